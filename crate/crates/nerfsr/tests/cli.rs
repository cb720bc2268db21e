//! End-to-end command workflows on a generated toy dataset: train with
//! manifest semantics, render with timing, eval with reproducible reports,
//! the ablation matrix with resume, and benchmark profiling.

use std::path::{Path, PathBuf};

use clap::Parser;

use nerfsr::cli::{self, Cli};
use nerfsr::data::load_dataset;
use nerfsr::evaluation::profile_render;
use nerfsr::io::png;
use nerfsr::renderer::RenderConfig;
use nerfsr::training::TrainState;

fn run(args: &[&str]) -> nerfsr::Result<()> {
    cli::run(Cli::try_parse_from(args).expect("flags parse"))
}

fn make_toy(dir: &Path, image_size: usize) -> PathBuf {
    let data = dir.join("toy");
    run(&[
        "nerfsr",
        "make-toy",
        "--out",
        data.to_str().unwrap(),
        "--image-size",
        &image_size.to_string(),
        "--train",
        "2",
        "--val",
        "1",
        "--test",
        "1",
        "--seed",
        "5",
    ])
    .unwrap();
    data
}

fn write_tiny_config(dir: &Path, data: &Path, strategy: &str, epochs: usize) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"
data_root = "{data}"

[field]
resolution = [6, 6, 6]
density_rank = 2
appearance_rank = 3
hidden_dim = 12

[warmup]
iters = 10
batch_size = 32

[warmup.render]
n_samples = 8
chunk_size = 256

[train]
strategy = "{strategy}"
ratio = 2
patch_size = 16
epochs = {epochs}
sr_blocks = 1
sr_channels = 4
checkpoint_every = 2

[train.render]
n_samples = 8
chunk_size = 256
"#,
        data = data.display(),
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_render_eval_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_toy(dir.path(), 16);
    let config = write_tiny_config(dir.path(), &data, "ft-rand-patch", 2);
    let run_dir = dir.path().join("run");

    run(&[
        "nerfsr",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--seed",
        "3",
    ])
    .unwrap();

    // The manifest is finished and every declared output exists.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert!(manifest["finished_unix"].is_number());
    assert_eq!(manifest["seed"], 3);
    for output in manifest["outputs"].as_array().unwrap() {
        assert!(run_dir.join(output.as_str().unwrap()).exists(), "{output} missing");
    }
    for expected in ["config.toml", "warmup.nsr", "latest.nsr", "train_log.jsonl", "timing.json"] {
        assert!(run_dir.join(expected).exists(), "{expected} missing");
    }
    // Training log lines carry the documented record fields.
    let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2 * 2, "one record per image per epoch");
    let record: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    for key in ["epoch", "iter", "loss", "lr", "wall_seconds"] {
        assert!(record.get(key).is_some(), "log record missing {key}");
    }

    // A second claim of the run directory needs --resume...
    let err = run(&[
        "nerfsr",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ])
    .unwrap_err();
    assert!(err.to_string().contains("--resume"), "{err}");
    // ...and with it, re-running a finished run is an idempotent no-op.
    let state_before = std::fs::read(run_dir.join("latest.nsr")).unwrap();
    run(&[
        "nerfsr",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--resume",
    ])
    .unwrap();
    assert_eq!(state_before, std::fs::read(run_dir.join("latest.nsr")).unwrap());

    // Render the test split: one PNG per test view at the HR resolution.
    let render_dir = dir.path().join("renders");
    run(&[
        "nerfsr",
        "render",
        "--checkpoint",
        run_dir.join("latest.nsr").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        render_dir.to_str().unwrap(),
    ])
    .unwrap();
    let image = png::load_rgb(&render_dir.join("test_r_0.png"), [0.0; 3]).unwrap();
    assert_eq!(image.dim(), (16, 16, 3));
    assert!(render_dir.join("timing.json").exists());

    // Diagnostic mode: the backbone's own output at LR resolution.
    let lr_dir = dir.path().join("renders_lr");
    run(&[
        "nerfsr",
        "render",
        "--checkpoint",
        run_dir.join("latest.nsr").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        lr_dir.to_str().unwrap(),
        "--sr",
        "off",
    ])
    .unwrap();
    let lr_image = png::load_rgb(&lr_dir.join("test_r_0.png"), [0.0; 3]).unwrap();
    assert_eq!(lr_image.dim(), (8, 8, 3));

    // Evaluate twice; the reports must agree byte for byte.
    let eval_a = dir.path().join("eval_a");
    let eval_b = dir.path().join("eval_b");
    for out in [&eval_a, &eval_b] {
        run(&[
            "nerfsr",
            "eval",
            "--run",
            run_dir.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
    }
    let report_a = std::fs::read(eval_a.join("report.json")).unwrap();
    let report_b = std::fs::read(eval_b.join("report.json")).unwrap();
    assert_eq!(report_a, report_b);
    assert!(eval_a.join("report.txt").exists());
    assert!(eval_a.join("renders").join("test_r_0_render.png").exists());
    assert!(eval_a.join("renders").join("test_r_0_gt.png").exists());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(eval_a.join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["method"], "FT-RandPatch");
    assert_eq!(report["view_names"].as_array().unwrap().len(), 1);
}

#[test]
fn epochs_zero_is_a_valid_warmup_only_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_toy(dir.path(), 16);
    let config = write_tiny_config(dir.path(), &data, "bilinear", 0);
    let run_dir = dir.path().join("warmonly");
    run(&[
        "nerfsr",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--epochs",
        "0",
        "--out",
        run_dir.to_str().unwrap(),
    ])
    .unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert!(manifest["finished_unix"].is_number());
    assert!(run_dir.join("warmup.nsr").exists());
    // The warm backbone is still loadable and renderable as a run artifact.
    let state = TrainState::load(&run_dir.join("latest.nsr")).unwrap();
    assert_eq!(state.epoch, 0);
}

#[test]
fn unknown_strategy_is_rejected_with_the_full_list() {
    let dir = tempfile::tempdir().unwrap();
    let err = run(&[
        "nerfsr",
        "train",
        "--strategy",
        "sgd",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ])
    .unwrap_err();
    let message = err.to_string();
    for name in
        ["Bilinear", "Pretrained", "Scratch", "FT-GridPatch", "FT-RandPatch", "Distillation"]
    {
        assert!(message.contains(name), "{message} missing {name}");
    }
}

#[test]
fn ablate_runs_the_matrix_and_resume_skips_completed_cells() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_toy(dir.path(), 16);
    let config = write_tiny_config(dir.path(), &data, "bilinear", 1);
    let text = std::fs::read_to_string(&config).unwrap()
        + "\n[ablate]\nstrategies = [\"bilinear\", \"ft-grid-patch\"]\nseeds = [0, 1]\n";
    std::fs::write(&config, text).unwrap();

    let out = dir.path().join("matrix");
    run(&[
        "nerfsr",
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .unwrap();

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let rows = summary["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2, "one row per strategy");
    for row in rows {
        assert_eq!(row["seeds_ok"], 2);
        assert_eq!(row["seeds_failed"], 0);
        assert!(row["psnr_mean_db"].is_number());
        assert!(row["psnr_std_db"].is_number());
        assert!(row["train_minutes_mean"].is_number());
    }
    assert!(out.join("summary.txt").exists());

    // Four cells on disk, each its own finished run directory.
    let cells = out.join("cells");
    let mut cell_dirs: Vec<PathBuf> =
        std::fs::read_dir(&cells).unwrap().map(|e| e.unwrap().path()).collect();
    cell_dirs.sort();
    assert_eq!(cell_dirs.len(), 4);
    let stamp = |d: &Path| {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join("cell_result.json")).unwrap())
                .unwrap();
        v["completed_unix"].as_f64().unwrap()
    };
    let stamps: Vec<f64> = cell_dirs.iter().map(|d| stamp(d)).collect();

    // Resuming skips every completed cell: results are reused, not rerun.
    run(&[
        "nerfsr",
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--resume",
    ])
    .unwrap();
    let stamps_after: Vec<f64> = cell_dirs.iter().map(|d| stamp(d)).collect();
    assert_eq!(stamps, stamps_after);
}

#[test]
fn render_timing_agrees_with_profile_render() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_toy(dir.path(), 32);
    let config = write_tiny_config(dir.path(), &data, "ft-grid-patch", 0);
    let run_dir = dir.path().join("warm");
    run(&[
        "nerfsr",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ])
    .unwrap();

    let render_dir = dir.path().join("timed");
    run(&[
        "nerfsr",
        "render",
        "--checkpoint",
        run_dir.join("latest.nsr").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        render_dir.to_str().unwrap(),
        "--repeats",
        "3",
        "--n-samples",
        "96",
    ])
    .unwrap();
    let timing: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(render_dir.join("timing.json")).unwrap())
            .unwrap();
    let cli_mean = timing["mean_seconds"].as_f64().unwrap();

    let dataset = load_dataset(&data, 1, [1.0; 3]).unwrap();
    let state = TrainState::load(&run_dir.join("latest.nsr")).unwrap();
    let pipeline = state.pipeline(
        2,
        RenderConfig { n_samples: 96, background: dataset.background, ..RenderConfig::default() },
        dataset.ndc,
    );
    let cameras: Vec<_> = dataset.test.iter().map(|v| v.camera.clone()).collect();
    let profile = profile_render(&pipeline, &cameras, 3).unwrap();

    let rel = (cli_mean - profile.mean_seconds).abs() / profile.mean_seconds;
    assert!(
        rel < 0.2,
        "cli mean {cli_mean:.4}s vs profiled {:.4}s ({:.0}% apart)",
        profile.mean_seconds,
        rel * 100.0
    );
}

#[test]
fn benchmark_profiles_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_toy(dir.path(), 16);
    let config = write_tiny_config(dir.path(), &data, "ft-grid-patch", 0);
    let run_dir = dir.path().join("warm");
    run(&[
        "nerfsr",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ])
    .unwrap();

    let out = dir.path().join("bench");
    run(&[
        "nerfsr",
        "benchmark",
        "--checkpoint",
        run_dir.join("latest.nsr").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--repeats",
        "2",
        "--n-samples",
        "8",
    ])
    .unwrap();
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("benchmark.json")).unwrap())
            .unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["label"], "latest");
    assert!(rows[0]["mean_seconds"].as_f64().unwrap() > 0.0);
    assert!(rows[0]["model_bytes"].as_u64().unwrap() > 0);
}
