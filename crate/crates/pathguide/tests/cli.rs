//! Smoke tests of the command-line binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pathguide"))
}

fn scene_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .ancestors()
        .nth(2)
        .unwrap()
        .join("scenes")
        .join(name)
}

fn render_args(out: &Path, extra: &[&str]) -> Vec<String> {
    let mut args = vec![
        "render".to_string(),
        "--scene".into(),
        scene_path("cornell-box.json").display().to_string(),
        "--width".into(),
        "24".into(),
        "--height".into(),
        "24".into(),
        "--spp".into(),
        "2".into(),
        "--threads".into(),
        "1".into(),
        "--out".into(),
        out.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

#[test]
fn render_off_writes_pfm_png_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let status = bin()
        .args(render_args(&out, &["--guide", "off"]))
        .status()
        .unwrap();
    assert!(status.success());
    for ext in ["pfm", "png", "csv"] {
        let p = dir.path().join(format!("r.{ext}"));
        assert!(p.exists(), "missing {}", p.display());
    }
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.starts_with("# config:"), "no provenance header");
    assert!(csv.lines().count() >= 3 + 2);
}

#[test]
fn render_guided_writes_checkpoint_and_probe_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let status = bin()
        .args(render_args(
            &out,
            &["--guide", "radiance", "--train-frac", "0.5", "--batch-size", "512",
              "--train-steps-per-wave", "1"],
        ))
        .status()
        .unwrap();
    assert!(status.success());
    let ckpt = dir.path().join("g.ckpt");
    assert!(ckpt.exists());

    let probe_out = dir.path().join("probe");
    let output = bin()
        .args([
            "probe",
            "--checkpoint",
            &ckpt.display().to_string(),
            "--point",
            "0,1,0",
            "--point",
            "0.5,0.5,0.5",
            "--out",
            &probe_out.display().to_string(),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(dir.path().join("probe-0.pfm").exists());
    assert!(dir.path().join("probe-1.pfm").exists());
    // Untrained-ish model: quadrature line reports ≈ 1.
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("integral="), "{text}");
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert!(bin()
            .args(render_args(out, &["--guide", "off", "--seed", "9"]))
            .status()
            .unwrap()
            .success());
    }
    let pa = std::fs::read(dir.path().join("a.pfm")).unwrap();
    let pb = std::fs::read(dir.path().join("b.pfm")).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn metrics_on_own_output_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    assert!(bin()
        .args(render_args(&out, &["--guide", "off"]))
        .status()
        .unwrap()
        .success());
    let pfm = dir.path().join("m.pfm").display().to_string();
    let output = bin()
        .args(["metrics", "--image", &pfm, "--reference", &pfm])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("relmse=0.0"), "{text}");
}

#[test]
fn validation_failures_exit_one() {
    // Missing scene file.
    let code = bin()
        .args(["render", "--scene", "/nonexistent.json"])
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(1));
    // Bad config value.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let code = bin()
        .args(render_args(&out, &["--train-frac", "1.5"]))
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(1));
    // Missing checkpoint for probe.
    let code = bin()
        .args(["probe", "--checkpoint", "/nonexistent.ckpt", "--point", "0,0,0"])
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(1));
}

#[test]
fn config_file_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    let out = dir.path().join("c");
    std::fs::write(
        &cfg_path,
        format!(
            r#"{{
              "scene": "{}",
              "render": {{"width": 24, "height": 24, "spp": 64, "threads": 1}},
              "out": "{}"
            }}"#,
            scene_path("cornell-box.json").display(),
            out.display()
        ),
    )
    .unwrap();
    // Flag --spp 2 overrides the document's 64.
    assert!(bin()
        .args([
            "render",
            "--config",
            &cfg_path.display().to_string(),
            "--spp",
            "2"
        ])
        .status()
        .unwrap()
        .success());
    let csv = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert!(csv.contains("\"spp\":2"), "effective config not echoed: {csv}");
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2);
}
