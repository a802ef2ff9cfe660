use std::path::{Path, PathBuf};
use std::process::Command;

use stylelab::checkpoint::Checkpoint;
use stylelab::image_io::png_read;

const TINY: &str = r#"
[model]
height = 8
width = 8
channels = 4
embedding_dim = 4

[train]
total_steps = 6
transition_step = 2
style_steps = 3
base_steps = 30
base_dataset_size = 4
recon_steps = 4

[guidance]
sampling_steps = 4
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stylelab"))
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn ok(args: &[&str]) {
    let (code, err) = run(args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "7", "-o", s(&a)]);
    ok(&["gen-data", "7", "-o", s(&b)]);
    for f in ["content.png", "style.png"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let img = png_read(&a.join("content.png")).unwrap();
    assert_eq!(img.shape(), &[16, 16, 3]);
}

#[test]
fn usage_and_runtime_exit_codes() {
    assert_eq!(run(&[]).0, 1);
    assert_eq!(run(&["explode"]).0, 1);
    assert_eq!(run(&["transfer", "cfg.toml"]).0, 1);
    assert_eq!(run(&["gen-data", "1", "-o", "x", "--no-such-flag"]).0, 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let missing = dir.path().join("missing.png");
    let (code, err) = run(&["train-content", s(&cfg), s(&missing), "-o", s(&dir.path().join("o.ckpt"))]);
    assert_eq!(code, 2);
    assert!(err.contains("missing.png"), "{err}");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\ntotal_stepz = 1\n").unwrap();
    let (code, err) = run(&["train-base", s(&bad), "-o", s(&dir.path().join("b.ckpt"))]);
    assert_eq!(code, 2);
    assert!(err.contains("total_stepz"), "{err}");
}

#[test]
fn degenerate_transfer_with_untrained_adapters_emits_png() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = d.join("base.ckpt");
    let cfg = write_config(d, &format!("\n[paths]\nbase_checkpoint = {:?}\n", s(&base)));
    ok(&["gen-data", "3", "--size", "8", "-o", s(&d.join("data"))]);
    ok(&["train-base", s(&cfg), "-o", s(&base)]);
    let (c, st) = (d.join("c.ckpt"), d.join("s.ckpt"));
    ok(&["train-content", s(&cfg), s(&d.join("data/content.png")), "-o", s(&c), "--total-steps", "0", "--transition-step", "0"]);
    ok(&["train-style", s(&cfg), s(&d.join("data/style.png")), "-o", s(&st), "--total-steps", "0", "--transition-step", "0", "--style-steps", "0"]);
    let out = d.join("o.png");
    ok(&[
        "transfer", s(&cfg), "--content-lora", s(&c), "--style-lora", s(&st),
        "--lambda-cfg", "0", "--lambda-cont", "0", "--lambda-sty", "0", "-o", s(&out),
    ]);
    let img = png_read(&out).unwrap();
    assert_eq!(img.shape(), &[8, 8, 3]);

    // adapters swapped: content-image set in the style slot
    let (code, _) = run(&["transfer", s(&cfg), "--content-lora", s(&st), "--style-lora", s(&c), "-o", s(&out)]);
    assert_eq!(code, 2);
    // base weights in an adapter slot
    let (code, _) = run(&["transfer", s(&cfg), "--content-lora", s(&base), "--style-lora", s(&st), "-o", s(&out)]);
    assert_eq!(code, 2);
}

#[test]
fn training_commands_write_reports_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "");
    ok(&["gen-data", "4", "--size", "8", "-o", s(&d.join("data"))]);
    let img = d.join("data/style.png");
    for (cmd, scheme) in [("train-content", "eps_then_x0"), ("train-style", "x0_only"), ("train-joint", "eps_only")] {
        let ck = d.join(format!("{cmd}.ckpt"));
        let rep = d.join(format!("{cmd}.csv"));
        ok(&[cmd, s(&cfg), s(&img), "-o", s(&ck), "--report", s(&rep), "--loss-scheme", scheme, "--seed", "5"]);
        let text = std::fs::read_to_string(&rep).unwrap();
        assert!(text.starts_with("step,t,loss,scheme\n"));
        assert!(!text.contains('\r'));
        let rows = text.lines().count() - 1;
        let expect = if cmd == "train-style" { 6 + 3 } else { 6 };
        assert_eq!(rows, expect, "{cmd}");
        let (set, _) = Checkpoint::load(&ck).unwrap().to_lora().unwrap();
        match cmd {
            "train-content" => assert!(set.content.is_some() && set.style.is_none()),
            _ => assert!(set.content.is_some() && set.style.is_some()),
        }
    }
    let (code, _) = run(&["train-content", s(&cfg), s(&img), "-o", s(&d.join("x.ckpt")), "--loss-scheme", "bogus"]);
    assert_eq!(code, 1);
}

#[test]
fn analyze_loss_and_metrics_emit_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "");
    let base = d.join("base.ckpt");
    ok(&["train-base", s(&cfg), "-o", s(&base)]);
    let prof = d.join("p.csv");
    let samples = d.join("samples.csv");
    ok(&["analyze-loss", s(&cfg), s(&base), "-o", s(&prof), "--evals-per-bucket", "3", "--samples", s(&samples)]);
    let text = std::fs::read_to_string(&prof).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "bucket,t_lo,t_hi,count,mean_loss_eps,mean_loss_x0_direct,mean_loss_z0hat,mean_scaling_factor"
    );
    assert_eq!(lines.count(), 5);
    assert_eq!(std::fs::read_to_string(&samples).unwrap().lines().count(), 1 + 15);

    ok(&["gen-data", "1", "-o", s(&d.join("data"))]);
    let out = bin()
        .args(["metrics", s(&d.join("data/content.png")), s(&d.join("data/style.png"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "gram_style_distance,content_mse,pixel_mse");
    let vals: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(vals.iter().all(|v| *v > 0.0));
}
