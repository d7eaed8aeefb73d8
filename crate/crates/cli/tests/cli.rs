//! End-to-end pipeline checks through the binary: generate -> train ->
//! eval -> infer -> visualize -> stats, plus exit-code mapping.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lanevid"))
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let data_root = dir.join("data");
    let run_dir = dir.join("run");
    let config = format!(
        r#"
[dataset]
root = "{data}"

[generate]
clips = 2
train_clips = 1
seed = 3
n_lanes = 2
length = 5
width = 64
height = 32
noise = 0.01
occluders = 0
curvature = [-4.0, 4.0]
lane_spacing = 24.0

[model]
preset = "desk"
encoder_widths = [4, 6, 8, 8]
value_channels = [8, 8]
attn_width = 6
decoder_channels = 8

[stage1]
max_iterations = 6

[stage2]
max_iterations = 3

[run]
seed = 5
out_dir = "{run}"
{extra}
"#,
        data = data_root.display(),
        run = run_dir.display(),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data = tmp.path().join("data");

    // Generate a tiny dataset.
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "generate"])
        .args(["--out", data.to_str().unwrap()])
        .output()
        .unwrap();
    ok(&out);
    assert!(data.join("clip000/frames/00000.png").is_file());
    assert!(data.join("clip000/anno/00004.json").is_file());
    assert!(data.join("clip000/masks/00000.png").is_file());
    assert!(data.join("train.txt").is_file());
    assert!(data.join("manifest.json").is_file());

    // Regeneration is byte-identical.
    let data2 = tmp.path().join("data2");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "generate",
            "--out",
            data2.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    for f in ["clip000/masks/00002.png", "clip001/frames/00003.png"] {
        assert_eq!(
            std::fs::read(data.join(f)).unwrap(),
            std::fs::read(data2.join(f)).unwrap(),
            "{f} differs between identical generate runs"
        );
    }

    // Train a few iterations.
    let train_dir = tmp.path().join("train_out");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "train",
            "--out",
            train_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    let ckpt = train_dir.join("stage2.ckpt");
    assert!(ckpt.is_file());
    assert!(train_dir.join("stage1.ckpt").is_file());
    assert!(train_dir.join("train_report.jsonl").is_file());
    assert!(train_dir.join("manifest.json").is_file());

    // Oracle eval on the train split must be perfect everywhere.
    let oracle_dir = tmp.path().join("oracle_out");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "eval",
            "--oracle",
            "--split",
            "train",
            "--out",
            oracle_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    let report = std::fs::read_to_string(oracle_dir.join("report.jsonl")).unwrap();
    let aggregate: serde_json::Value =
        serde_json::from_str(report.lines().last().unwrap()).unwrap();
    assert_eq!(aggregate["region"]["miou"].as_f64().unwrap(), 1.0);
    assert_eq!(aggregate["line"]["fp"].as_f64().unwrap(), 0.0);
    assert_eq!(aggregate["video"]["o_f"].as_f64().unwrap(), 1.0);
    assert!(oracle_dir.join("predictions/clip000/00000.png").is_file());

    // Model eval runs end to end on the test split.
    let eval_dir = tmp.path().join("eval_out");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
            "--baseline",
            oracle_dir.join("report.jsonl").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    assert!(eval_dir.join("report.txt").is_file());
    let table = std::fs::read_to_string(eval_dir.join("report.txt")).unwrap();
    assert!(table.contains("aggregate"));
    assert!(table.contains("vs baseline"));

    // Infer a single clip.
    let infer_dir = tmp.path().join("infer_out");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "infer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--video",
            "clip001",
            "--out",
            infer_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    assert!(infer_dir.join("predictions/clip001/00004.png").is_file());

    // Visualize predictions: 5 overlays + 1 plot.
    let viz_dir = tmp.path().join("viz_out");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "visualize",
            "--video",
            "clip001",
            "--predictions",
            infer_dir.join("predictions").to_str().unwrap(),
            "--out",
            viz_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    for i in 0..5 {
        assert!(viz_dir.join(format!("overlay_{i:05}.png")).is_file());
    }
    assert!(viz_dir.join("scores.png").is_file());

    // Stats over the generated tree.
    let stats_json = tmp.path().join("stats.json");
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "stats",
            "--json",
            stats_json.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    ok(&out);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&stats_json).unwrap()).unwrap();
    assert_eq!(stats["n_videos"].as_u64(), Some(2));
    assert_eq!(stats["n_frames"].as_u64(), Some(10));
    assert_eq!(stats["frames_per_lane_count"][2].as_u64(), Some(10));
}

#[test]
fn exit_codes_distinguish_error_families() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let data = tmp.path().join("data");

    // n_lanes = 7 exceeds the corpus maximum: config error (2).
    let cfg7 = tmp.path().join("run7.toml");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("n_lanes = 2", "n_lanes = 7");
    std::fs::write(&cfg7, text).unwrap();
    let out = bin()
        .args(["--config", cfg7.to_str().unwrap(), "generate"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Missing dataset: i/o error (3).
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "stats"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Empty split: validation error (4).
    ok(&bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "generate",
            "--out",
            data.to_str().unwrap(),
        ])
        .output()
        .unwrap());
    std::fs::write(data.join("test.txt"), "\n").unwrap();
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "eval",
            "--oracle",
            "--out",
            tmp.path().join("eval_empty").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Visualizing with missing predictions: validation error (4).
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "visualize",
            "--video",
            "clip000",
            "--predictions",
            tmp.path().join("nothing").to_str().unwrap(),
            "--out",
            tmp.path().join("viz_missing").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
