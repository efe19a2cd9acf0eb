//! Command-line front end: render, probe, bench, and metrics subcommands.
//!
//! Every knob exists both as a JSON config-document field and as a flag;
//! flags win over the document. Selected flags also read environment
//! variables (prefix `PATHGUIDE_`) for CI use. The effective merged
//! configuration is echoed into the CSV header for provenance.
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 runtime
//! failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::guiding::{probe_map_integral, NpmModel, QueryAux};
use crate::image::ImageBuffer;
use crate::math::{vec3, Vec3};
use crate::metrics::{mape, rel_mse};
use crate::renderer::{render, GuideSetting, RenderConfig, RenderOutput};
use crate::scene::Scene;

#[derive(Parser)]
#[command(
    name = "pathguide",
    version,
    about = "Path tracer with an online-learned directional sampler"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a scene to PFM/PNG plus a convergence CSV.
    Render(RenderArgs),
    /// Decode a checkpoint and write equirectangular pdf maps.
    Probe(ProbeArgs),
    /// Compare guide modes across scenes and emit an error table.
    Bench(BenchArgs),
    /// Compute relMSE/MAPE between two PFM images.
    Metrics(MetricsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GuideArg {
    Off,
    Radiance,
    Product,
}

impl From<GuideArg> for GuideSetting {
    fn from(g: GuideArg) -> GuideSetting {
        match g {
            GuideArg::Off => GuideSetting::Off,
            GuideArg::Radiance => GuideSetting::Radiance,
            GuideArg::Product => GuideSetting::Product,
        }
    }
}

/// JSON run document; same parser surface as scene files.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunDoc {
    pub scene: Option<PathBuf>,
    pub render: RenderConfig,
    pub reference: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    /// Output prefix; `<prefix>.pfm`, `.png`, `.csv` are written.
    pub out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// JSON run document to start from; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, env = "PATHGUIDE_WIDTH")]
    width: Option<usize>,
    #[arg(long, env = "PATHGUIDE_HEIGHT")]
    height: Option<usize>,
    #[arg(long, env = "PATHGUIDE_SPP")]
    spp: Option<usize>,
    #[arg(long)]
    max_path_length: Option<usize>,
    #[arg(long, value_enum, env = "PATHGUIDE_GUIDE")]
    guide: Option<GuideArg>,
    /// Fraction of spp spent training before freezing the model.
    #[arg(long)]
    train_frac: Option<f64>,
    /// BSDF selection probability of the one-sample combination.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, env = "PATHGUIDE_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    train_steps_per_wave: Option<usize>,
    /// Worker threads; 1 guarantees bitwise determinism, 0 = all cores.
    #[arg(long, env = "PATHGUIDE_THREADS")]
    threads: Option<usize>,
    /// Product mode: factor the cosine out as a constant lobe.
    #[arg(long)]
    cosine_lobe: bool,
    /// Reference PFM for per-wave error logging.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    checkpoint_in: Option<PathBuf>,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Output prefix (default "out").
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probe position "x,y,z"; repeatable.
    #[arg(long = "point", required = true)]
    points: Vec<String>,
    /// Outgoing direction for product-mode models, "x,y,z"; cycled across
    /// points.
    #[arg(long = "omega")]
    omegas: Vec<String>,
    /// Surface normal for product-mode models.
    #[arg(long, default_value = "0,0,1")]
    normal: String,
    #[arg(long, default_value_t = 1.0)]
    roughness: f64,
    #[arg(long, default_value_t = 128)]
    map_width: usize,
    #[arg(long, default_value_t = 64)]
    map_height: usize,
    /// Output prefix; writes `<prefix>-<index>.pfm`.
    #[arg(long, default_value = "probe")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Scene file; repeatable, paired with --reference by position.
    #[arg(long = "scene", required = true)]
    scenes: Vec<PathBuf>,
    /// Reference PFM per scene.
    #[arg(long = "reference", required = true)]
    references: Vec<PathBuf>,
    #[arg(long, default_value_t = 64)]
    spp: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Comma-separated seed list.
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    reference: PathBuf,
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help/version output is not an error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Render(a) => cmd_render(a),
        Cmd::Probe(a) => cmd_probe(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Metrics(a) => cmd_metrics(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn load_doc(args: &RenderArgs) -> Result<RunDoc, CliError> {
    let mut doc = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| validation(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| validation(format!("bad config {}: {e}", path.display())))?
        }
        None => RunDoc::default(),
    };
    // Flags override the document.
    macro_rules! over {
        ($field:expr, $arg:expr) => {
            if let Some(v) = $arg {
                $field = v;
            }
        };
    }
    over!(doc.scene, args.scene.clone().map(Some));
    over!(doc.render.width, args.width);
    over!(doc.render.height, args.height);
    over!(doc.render.spp, args.spp);
    over!(doc.render.max_path_length, args.max_path_length);
    over!(doc.render.guide, args.guide.map(GuideSetting::from));
    over!(doc.render.train_frac, args.train_frac);
    over!(doc.render.selection_prob, args.alpha);
    over!(doc.render.seed, args.seed);
    over!(doc.render.batch_size, args.batch_size);
    over!(doc.render.train_steps_per_wave, args.train_steps_per_wave);
    over!(doc.render.threads, args.threads);
    if args.cosine_lobe {
        doc.render.cosine_lobe = true;
    }
    over!(doc.reference, args.reference.clone().map(Some));
    over!(doc.checkpoint_in, args.checkpoint_in.clone().map(Some));
    over!(doc.checkpoint_out, args.checkpoint_out.clone().map(Some));
    over!(doc.out, args.out.clone().map(Some));
    Ok(doc)
}

fn cmd_render(args: RenderArgs) -> Result<(), CliError> {
    let doc = load_doc(&args)?;
    let scene_path = doc
        .scene
        .as_ref()
        .ok_or_else(|| validation("no scene given (--scene or config)"))?;
    doc.render.validate().map_err(validation)?;
    let scene = Scene::load(scene_path)
        .map_err(|e| validation(format!("scene {}: {e}", scene_path.display())))?;
    let reference = doc
        .reference
        .as_ref()
        .map(|p| {
            let img = ImageBuffer::read_pfm(p)
                .map_err(|e| validation(format!("reference {}: {e}", p.display())))?;
            if (img.width, img.height) != (doc.render.width, doc.render.height) {
                return Err(validation("reference dimensions differ from render"));
            }
            Ok(img)
        })
        .transpose()?;

    let mut model = match (doc.render.guide, &doc.checkpoint_in) {
        (GuideSetting::Off, _) => None,
        (_, Some(path)) => Some(
            checkpoint::load(path)
                .map_err(|e| validation(format!("checkpoint {}: {e}", path.display())))?,
        ),
        (_, None) => {
            let mc = doc.render.model_config().expect("guide mode set");
            Some(NpmModel::new(mc, scene.aabb, doc.render.seed))
        }
    };

    let out = render(&scene, &doc.render, model.as_mut(), reference.as_ref());

    let prefix = doc.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let io = |e: crate::image::ImageError| runtime(format!("write failed: {e}"));
    out.image.write_pfm(&with_ext(&prefix, "pfm")).map_err(io)?;
    out.image.write_png(&with_ext(&prefix, "png")).map_err(io)?;
    write_csv(&with_ext(&prefix, "csv"), &doc, &out)
        .map_err(|e| runtime(format!("csv: {e}")))?;
    if let Some(m) = &model {
        let ckpt = doc
            .checkpoint_out
            .clone()
            .unwrap_or_else(|| with_ext(&prefix, "ckpt"));
        checkpoint::save(m, &ckpt).map_err(|e| runtime(format!("checkpoint: {e}")))?;
    }
    let final_err = out
        .log
        .last()
        .and_then(|l| l.rel_mse)
        .map(|v| format!("{v:.6}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "{} {}spp {:.1}s relMSE={final_err}",
        scene_path.display(),
        doc.render.spp,
        out.seconds
    );
    Ok(())
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}

fn write_csv(path: &Path, doc: &RunDoc, out: &RenderOutput) -> std::io::Result<()> {
    let mut text = String::new();
    let config = serde_json::to_string(doc).expect("config serializes");
    let _ = writeln!(text, "# config: {config}");
    let _ = writeln!(
        text,
        "# nonfinite_paths: {}, guide_fallbacks: {}",
        out.nonfinite_paths, out.guide_fallbacks
    );
    let _ = writeln!(text, "spp,seconds,relmse,mape,loss_proxy,train_steps,dropped");
    for l in &out.log {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.8e}")).unwrap_or_default();
        let _ = writeln!(
            text,
            "{},{:.3},{},{},{:.8e},{},{}",
            l.spp,
            l.seconds,
            fmt_opt(l.rel_mse),
            fmt_opt(l.mape),
            l.loss_proxy,
            l.train_steps,
            l.dropped
        );
    }
    std::fs::write(path, text)
}

fn parse_vec3(s: &str) -> Result<Vec3, CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| validation(format!("bad vector {s:?} (want x,y,z)")))?;
    if parts.len() != 3 {
        return Err(validation(format!("bad vector {s:?} (want x,y,z)")));
    }
    Ok(vec3(parts[0], parts[1], parts[2]))
}

fn cmd_probe(args: ProbeArgs) -> Result<(), CliError> {
    let model = checkpoint::load(&args.checkpoint)
        .map_err(|e| validation(format!("checkpoint {}: {e}", args.checkpoint.display())))?;
    let normal = parse_vec3(&args.normal)?.normalized();
    for (i, point) in args.points.iter().enumerate() {
        let x = parse_vec3(point)?;
        let omega_o = if args.omegas.is_empty() {
            normal
        } else {
            parse_vec3(&args.omegas[i % args.omegas.len()])?.normalized()
        };
        let aux = QueryAux {
            omega_o,
            normal,
            roughness: args.roughness,
        };
        let map = model.probe_distribution(x, Some(&aux), args.map_width, args.map_height);
        let integral = probe_map_integral(&map, args.map_width, args.map_height);
        let img = ImageBuffer::from_scalar_map(&map, args.map_width, args.map_height);
        let path = PathBuf::from(format!("{}-{i}.pfm", args.out.display()));
        img.write_pfm(&path)
            .map_err(|e| runtime(format!("write {}: {e}", path.display())))?;
        println!("{} x={point} integral={integral:.4}", path.display());
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    if args.scenes.len() != args.references.len() {
        return Err(validation("need one --reference per --scene"));
    }
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| validation("bad --seeds list"))?;
    if seeds.is_empty() {
        return Err(validation("empty seed list"));
    }

    let modes = [
        GuideSetting::Off,
        GuideSetting::Radiance,
        GuideSetting::Product,
    ];
    let mut csv = String::from("scene,mode,relmse,mape,speedup,seconds\n");
    println!(
        "{:<24} {:<10} {:>12} {:>12} {:>8}",
        "scene", "mode", "relMSE", "MAPE", "speedup"
    );
    for (scene_path, ref_path) in args.scenes.iter().zip(&args.references) {
        let scene = Scene::load(scene_path)
            .map_err(|e| validation(format!("scene {}: {e}", scene_path.display())))?;
        let reference = ImageBuffer::read_pfm(ref_path)
            .map_err(|e| validation(format!("reference {}: {e}", ref_path.display())))?;
        if (reference.width, reference.height) != (args.width, args.height) {
            return Err(validation(format!(
                "reference {} is {}x{}, bench renders {}x{}",
                ref_path.display(),
                reference.width,
                reference.height,
                args.width,
                args.height
            )));
        }
        let mut base_relmse = None;
        for mode in modes {
            let mut err_sum = 0.0;
            let mut mape_sum = 0.0;
            let mut secs = 0.0;
            for &seed in &seeds {
                let cfg = RenderConfig {
                    width: args.width,
                    height: args.height,
                    spp: args.spp,
                    guide: mode,
                    seed,
                    threads: args.threads,
                    ..RenderConfig::default()
                };
                let mut model = cfg
                    .model_config()
                    .map(|mc| NpmModel::new(mc, scene.aabb, seed));
                let out = render(&scene, &cfg, model.as_mut(), None);
                err_sum += rel_mse(&out.image, &reference);
                mape_sum += mape(&out.image, &reference);
                secs += out.seconds;
            }
            let relmse = err_sum / seeds.len() as f64;
            let mape_v = mape_sum / seeds.len() as f64;
            if mode == GuideSetting::Off {
                base_relmse = Some(relmse);
            }
            let speedup = base_relmse.expect("off runs first") / relmse;
            let mode_name = format!("{mode:?}").to_lowercase();
            let stem = scene_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            println!(
                "{stem:<24} {mode_name:<10} {relmse:>12.6} {mape_v:>12.6} {speedup:>8.2}"
            );
            let _ = writeln!(
                csv,
                "{stem},{mode_name},{relmse:.8e},{mape_v:.8e},{speedup:.4},{secs:.2}"
            );
        }
    }
    std::fs::write(&args.out, csv).map_err(|e| runtime(format!("write bench csv: {e}")))?;
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> Result<(), CliError> {
    let img = ImageBuffer::read_pfm(&args.image)
        .map_err(|e| validation(format!("image {}: {e}", args.image.display())))?;
    let reference = ImageBuffer::read_pfm(&args.reference)
        .map_err(|e| validation(format!("reference {}: {e}", args.reference.display())))?;
    if (img.width, img.height) != (reference.width, reference.height) {
        return Err(validation("image dimensions differ"));
    }
    println!(
        "relmse={:.8e} mape={:.8e}",
        rel_mse(&img, &reference),
        mape(&img, &reference)
    );
    Ok(())
}
