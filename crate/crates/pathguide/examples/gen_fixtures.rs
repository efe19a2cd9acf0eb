//! Regenerates the checked-in fixtures:
//!
//!   cargo run --release --example gen_fixtures -- refs <w> <h> <spp>
//!       writes refs/<scene>-<w>.pfm for every scene in scenes/
//!       (unguided tracer, fixed seed 1000)
//!
//!   cargo run --release --example gen_fixtures -- ckpt-seed
//!       writes a small valid checkpoint into the fuzz corpus

use std::path::{Path, PathBuf};

use pathguide::guiding::{GuideMode, ModelConfig, NpmModel};
use pathguide::math::{vec3, Aabb};
use pathguide::renderer::{render, RenderConfig};
use pathguide::scene::Scene;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("refs") => {
            let w: usize = args.get(1).map_or(128, |s| s.parse().unwrap());
            let h: usize = args.get(2).map_or(128, |s| s.parse().unwrap());
            let spp: usize = args.get(3).map_or(16384, |s| s.parse().unwrap());
            gen_refs(w, h, spp);
        }
        Some("ckpt-seed") => gen_ckpt_seed(),
        _ => {
            eprintln!("usage: gen_fixtures refs [w h spp] | gen_fixtures ckpt-seed");
            std::process::exit(1);
        }
    }
}

fn repo_root() -> PathBuf {
    // examples run from the crate dir under cargo; fixtures live two up.
    let here = Path::new(env!("CARGO_MANIFEST_DIR"));
    here.ancestors().nth(2).unwrap().to_path_buf()
}

fn gen_refs(width: usize, height: usize, spp: usize) {
    let root = repo_root();
    std::fs::create_dir_all(root.join("refs")).unwrap();
    for entry in std::fs::read_dir(root.join("scenes")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let scene = Scene::load(&path).unwrap();
        let cfg = RenderConfig {
            width,
            height,
            spp,
            seed: 1000,
            ..RenderConfig::default()
        };
        let t0 = std::time::Instant::now();
        let out = render(&scene, &cfg, None, None);
        let dest = root.join("refs").join(format!("{stem}-{width}.pfm"));
        out.image.write_pfm(&dest).unwrap();
        println!(
            "{} {spp}spp {:.0}s nonfinite={}",
            dest.display(),
            t0.elapsed().as_secs_f64(),
            out.nonfinite_paths
        );
    }
}

fn gen_ckpt_seed() {
    let mut mc = ModelConfig::new(GuideMode::Radiance);
    mc.levels = 2;
    mc.grid_coarse = 2;
    mc.grid_fine = 4;
    mc.grid_features = 2;
    mc.hidden_width = 8;
    mc.lobes = 2;
    let model = NpmModel::new(mc, Aabb::new(vec3(0.0, 0.0, 0.0), vec3(1.0, 1.0, 1.0)), 1);
    let bytes = pathguide::checkpoint::encode(&model);
    let dest = repo_root().join("fuzz/corpus/checkpoint_decode/small.ckpt");
    std::fs::create_dir_all(dest.parent().unwrap()).unwrap();
    std::fs::write(&dest, &bytes).unwrap();
    println!("{} ({} bytes)", dest.display(), bytes.len());
}
