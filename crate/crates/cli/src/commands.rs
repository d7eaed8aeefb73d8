//! Subcommand implementations.

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use anyhow::Context;
use lanevid::annotation::{
    compute_dataset_stats, read_mask_png, write_mask_png, InstanceMaskFrame,
};
use lanevid::dataset::{
    generate_synthetic_clip, load_clip, read_split_file, write_clip, write_split_file, VideoClip,
};
use lanevid::metrics::{boundary_f_measure, evaluate_sequences, frame_jaccard, MetricReport};
use lanevid::network::{load_checkpoint, save_checkpoint, Variant};
use lanevid::training::{predict_clip, run_two_stage, PredictOptions};
use lanevid::viz::{plot_series, write_overlay};
use std::path::{Path, PathBuf};

fn clip_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("clip{i:03}")).collect()
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path, seed: u64) -> anyhow::Result<()> {
    cfg.generate.scene_config(seed, 0).validate()?; // fail fast on n_lanes > 6 etc.
    std::fs::create_dir_all(out)?;

    let ids = clip_ids(cfg.generate.clips());
    let mut manifest = RunManifest::new("generate", seed, serde_json::to_value(&cfg.generate)?);
    for id in &ids {
        manifest.output(format!("{id}/"));
    }
    manifest.output("train.txt").output("test.txt");
    manifest.write(out)?;

    for (i, id) in ids.iter().enumerate() {
        let clip = generate_synthetic_clip(&cfg.generate.scene_config(seed, i))?;
        write_clip(out, id, &clip)?;
    }
    let n_train = cfg.generate.n_train();
    write_split_file(&out.join("train.txt"), &ids[..n_train])?;
    write_split_file(&out.join("test.txt"), &ids[n_train..])?;
    println!(
        "generated {} clips under {} ({} train / {} test)",
        ids.len(),
        out.display(),
        n_train,
        ids.len() - n_train
    );
    Ok(())
}

fn load_split(root: &Path, split_file: &str) -> anyhow::Result<(Vec<String>, Vec<VideoClip>)> {
    let path = root.join(split_file);
    let ids =
        read_split_file(&path).with_context(|| format!("reading split list {}", path.display()))?;
    let mut clips = Vec::with_capacity(ids.len());
    for id in &ids {
        clips.push(load_clip(root, id)?);
    }
    Ok((ids, clips))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    cfg: &RunConfig,
    config_path: Option<&Path>,
    variant: Option<Variant>,
    memory_frames: Option<usize>,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let root = cfg.dataset_root()?;
    let (_, clips) = load_split(&root, cfg.dataset.train_split())?;
    if clips.is_empty() {
        return Err(lanevid::Error::Validation("training split is empty".into()).into());
    }

    let mut model_section = cfg.model.clone();
    if let Some(v) = variant {
        model_section.variant = Some(v);
    }
    if let Some(n) = memory_frames {
        model_section.memory_size = Some(n);
    }
    let model_cfg = model_section.model_config()?;
    let s1 = cfg.stage1.stage_config(1);
    let s2 = cfg.stage2.stage_config(2);
    let loss = cfg.loss.loss_config();

    let mut manifest = RunManifest::new("train", seed, serde_json::to_value(cfg)?);
    manifest
        .input("dataset", root.display().to_string())
        .input("variant", model_cfg.variant()?.name())
        .input("memory_size", model_cfg.memory_size.to_string())
        .output("stage1.ckpt")
        .output("stage2.ckpt")
        .output("train_report.jsonl")
        .output("summary.txt");
    if let Some(p) = config_path {
        manifest.hash_artifact("config", p)?;
    }
    manifest.write(out)?;

    let (net, rep1, rep2) = run_two_stage(&model_cfg, &clips, &s1, &s2, &loss, seed, out)?;
    save_checkpoint(&net, &out.join("stage2.ckpt"))?;

    let mut log = rep1.to_jsonl();
    log.push_str(&rep2.to_jsonl());
    std::fs::write(out.join("train_report.jsonl"), log)?;
    let summary = format!("{}\n{}\n", rep1.format_summary(), rep2.format_summary());
    std::fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("checkpoints written to {}", out.display());
    Ok(())
}

fn write_predictions(out: &Path, id: &str, masks: &[InstanceMaskFrame]) -> anyhow::Result<()> {
    let dir = out.join("predictions").join(id);
    std::fs::create_dir_all(&dir)?;
    for (i, m) in masks.iter().enumerate() {
        write_mask_png(m, &dir.join(format!("{i:05}.png")))?;
    }
    Ok(())
}

fn compare_to_baseline(report: &MetricReport, baseline_path: &Path) -> anyhow::Result<String> {
    let text = std::fs::read_to_string(baseline_path)?;
    let mut base: Option<serde_json::Value> = None;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("kind").and_then(|k| k.as_str()) == Some("aggregate") {
            base = Some(v);
        }
    }
    let base = base.ok_or_else(|| anyhow::anyhow!("baseline has no aggregate record"))?;
    let b_miou = base["region"]["miou"].as_f64().unwrap_or(f64::NAN);
    let b_f105 = base["region"]["f1_05"].as_f64().unwrap_or(f64::NAN);
    Ok(format!(
        "vs baseline {}: mIoU {:+.3}, F1@0.5 {:+.3}\n",
        baseline_path.display(),
        report.region.miou - b_miou,
        report.region.f1_05 - b_f105,
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    dataset: Option<&Path>,
    split: &str,
    out: &Path,
    oracle: bool,
    baseline: Option<&Path>,
    seed: u64,
) -> anyhow::Result<()> {
    let root = match dataset {
        Some(d) => d.to_path_buf(),
        None => cfg.dataset_root()?,
    };
    let split_file = match split {
        "train" => cfg.dataset.train_split().to_string(),
        "test" => cfg.dataset.test_split().to_string(),
        other => other.to_string(),
    };
    let (ids, clips) = load_split(&root, &split_file)?;
    if clips.is_empty() {
        return Err(lanevid::Error::Validation(format!(
            "split {split_file} is empty; nothing to evaluate"
        ))
        .into());
    }

    let mut manifest = RunManifest::new("eval", seed, serde_json::to_value(cfg)?);
    manifest
        .input("dataset", root.display().to_string())
        .input("split", split_file.clone())
        .input("mode", if oracle { "oracle" } else { "model" })
        .output("report.jsonl")
        .output("report.txt")
        .output("predictions/");
    if let Some(c) = checkpoint {
        manifest.hash_artifact("checkpoint", c)?;
    }
    manifest.write(out)?;

    let net = match (oracle, checkpoint) {
        (true, _) => None,
        (false, Some(c)) => Some(load_checkpoint(c)?),
        (false, None) => {
            return Err(lanevid::Error::Config(
                "eval needs --checkpoint unless --oracle is set".into(),
            )
            .into())
        }
    };

    let mut preds = Vec::with_capacity(clips.len());
    let mut gts = Vec::with_capacity(clips.len());
    for (id, clip) in ids.iter().zip(&clips) {
        let masks = match &net {
            Some(n) => predict_clip(
                n,
                clip,
                &PredictOptions {
                    shuffle_seed: seed,
                    resize_on_mismatch: false,
                },
            )
            .map_err(|e| anyhow::anyhow!("clip {id}: {e}"))?,
            None => clip.masks.clone(),
        };
        write_predictions(out, id, &masks)?;
        preds.push(masks);
        gts.push(clip.masks.clone());
    }
    let report = evaluate_sequences(&ids, &preds, &gts, &cfg.metrics.metric_config())?;
    std::fs::write(out.join("report.jsonl"), report.to_jsonl())?;
    let mut table = report.format_table();
    if let Some(b) = baseline {
        table.push_str(&compare_to_baseline(&report, b)?);
    }
    std::fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: Option<&Path>,
    video: &str,
    out: &Path,
    resize: bool,
    seed: u64,
) -> anyhow::Result<()> {
    let root = match dataset {
        Some(d) => d.to_path_buf(),
        None => cfg.dataset_root()?,
    };
    let clip = load_clip(&root, video)?;
    let mut manifest = RunManifest::new("infer", seed, serde_json::to_value(cfg)?);
    manifest
        .input("dataset", root.display().to_string())
        .input("video", video)
        .output("predictions/");
    manifest.hash_artifact("checkpoint", checkpoint)?;
    manifest.write(out)?;

    let net = load_checkpoint(checkpoint)?;
    let masks = predict_clip(
        &net,
        &clip,
        &PredictOptions {
            shuffle_seed: seed,
            resize_on_mismatch: resize,
        },
    )?;
    write_predictions(out, video, &masks)?;
    println!(
        "wrote {} masks to {}",
        masks.len(),
        out.join("predictions").join(video).display()
    );
    Ok(())
}

pub fn cmd_stats(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    json_out: Option<&Path>,
) -> anyhow::Result<()> {
    let root = match dataset {
        Some(d) => d.to_path_buf(),
        None => cfg.dataset_root()?,
    };
    let stats = compute_dataset_stats(&root)?;
    println!("videos: {}", stats.n_videos);
    println!("frames: {}", stats.n_frames);
    println!(
        "frames per lane count (0..8): {:?}",
        stats.frames_per_lane_count
    );
    println!("line-type counts: {:?}", stats.line_type_counts);
    println!("scenario counts: {:?}", stats.scenario_counts);
    if let Some(path) = json_out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(&stats)?)?;
        println!("stats written to {}", path.display());
    }
    Ok(())
}

pub fn cmd_visualize(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    video: &str,
    predictions: &Path,
    out: &Path,
    seed: u64,
) -> anyhow::Result<()> {
    let root = match dataset {
        Some(d) => d.to_path_buf(),
        None => cfg.dataset_root()?,
    };
    let clip = load_clip(&root, video)?;

    let mut manifest = RunManifest::new("visualize", seed, serde_json::to_value(cfg)?);
    manifest
        .input("dataset", root.display().to_string())
        .input("video", video)
        .input("predictions", predictions.display().to_string())
        .output("overlay_*.png")
        .output("scores.png");
    manifest.write(out)?;

    let pred_dir: PathBuf = if predictions.join(video).is_dir() {
        predictions.join(video)
    } else {
        predictions.to_path_buf()
    };
    let mut masks = Vec::with_capacity(clip.len());
    for i in 0..clip.len() {
        let path = pred_dir.join(format!("{i:05}.png"));
        if !path.is_file() {
            return Err(lanevid::Error::Validation(format!(
                "prediction {} missing for clip {video} ({} frames)",
                path.display(),
                clip.len()
            ))
            .into());
        }
        masks.push(read_mask_png(&path)?);
    }
    for m in &masks {
        if (m.height(), m.width()) != (clip.frame_size().1, clip.frame_size().0) {
            return Err(lanevid::Error::Validation(format!(
                "prediction size {:?} does not match clip {video}",
                (m.width(), m.height())
            ))
            .into());
        }
    }

    for (i, (frame, mask)) in clip.frames.iter().zip(&masks).enumerate() {
        write_overlay(frame, mask, 0.55, &out.join(format!("overlay_{i:05}.png")))?;
    }
    let frac = cfg.metrics.metric_config().boundary_tolerance_frac;
    let js: Vec<f64> = masks
        .iter()
        .zip(&clip.masks)
        .map(|(p, g)| frame_jaccard(p, g))
        .collect();
    let fs: Vec<f64> = masks
        .iter()
        .zip(&clip.masks)
        .map(|(p, g)| boundary_f_measure(p, g, frac))
        .collect();
    plot_series(
        &[("J".into(), js), ("F".into(), fs)],
        &out.join("scores.png"),
    )?;
    println!(
        "wrote {} overlays and scores.png to {}",
        masks.len(),
        out.display()
    );
    Ok(())
}
