//! TOML run configuration: dataset paths, generator settings, model and
//! stage hyperparameters. Every field is optional and falls back to the
//! desk-scale defaults, so a minimal config is an empty file.

use lanevid::dataset::SyntheticSceneConfig;
use lanevid::metrics::{LineMetricConfig, MetricConfig};
use lanevid::network::{ModelConfig, Variant};
use lanevid::training::{LossConfig, OptimizerKind, StageConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable holding the default dataset root.
pub const DATA_ROOT_ENV: &str = "LANEVID_DATA_ROOT";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub stage1: StageSection,
    #[serde(default)]
    pub stage2: StageSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Dataset root; `LANEVID_DATA_ROOT` is the fallback.
    pub root: Option<PathBuf>,
    pub train_split: Option<String>,
    pub test_split: Option<String>,
}

impl DatasetSection {
    pub fn train_split(&self) -> &str {
        self.train_split.as_deref().unwrap_or("train.txt")
    }

    pub fn test_split(&self) -> &str {
        self.test_split.as_deref().unwrap_or("test.txt")
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub clips: Option<usize>,
    /// Leading clips land in train.txt, the rest in test.txt.
    pub train_clips: Option<usize>,
    pub seed: Option<u64>,
    pub n_lanes: Option<usize>,
    pub length: Option<usize>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub noise: Option<f64>,
    pub occluders: Option<usize>,
    pub curvature: Option<(f64, f64)>,
    pub lane_spacing: Option<f64>,
}

impl GenerateSection {
    pub fn clips(&self) -> usize {
        self.clips.unwrap_or(4)
    }

    /// Train/test boundary; defaults to the corpus convention of an 8:2
    /// split (at least one training clip).
    pub fn n_train(&self) -> usize {
        self.train_clips
            .unwrap_or_else(|| (self.clips() * 4 / 5).max(1))
            .min(self.clips())
    }

    /// Scene config for one clip; the run seed offsets per clip index.
    pub fn scene_config(&self, run_seed: u64, clip_index: usize) -> SyntheticSceneConfig {
        let d = SyntheticSceneConfig::default();
        SyntheticSceneConfig {
            seed: self
                .seed
                .unwrap_or(run_seed)
                .wrapping_add(clip_index as u64),
            n_lanes: self.n_lanes.unwrap_or(d.n_lanes),
            curvature: self.curvature.unwrap_or(d.curvature),
            lane_spacing: self.lane_spacing.unwrap_or(d.lane_spacing),
            noise: self.noise.unwrap_or(d.noise),
            occluders: self.occluders.unwrap_or(d.occluders),
            width: self.width.unwrap_or(d.width),
            height: self.height.unwrap_or(d.height),
            length: self.length.unwrap_or(d.length),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `desk` (small CPU widths, default) or `reference` (full-scale).
    pub preset: Option<String>,
    pub variant: Option<Variant>,
    pub memory_size: Option<usize>,
    pub encoder_widths: Option<[usize; 4]>,
    pub value_channels: Option<[usize; 2]>,
    pub attn_width: Option<usize>,
    pub decoder_channels: Option<usize>,
}

impl ModelSection {
    pub fn model_config(&self) -> anyhow::Result<ModelConfig> {
        let mut cfg = match self.preset.as_deref().unwrap_or("desk") {
            "desk" => ModelConfig::desk(),
            "reference" => ModelConfig::default(),
            other => anyhow::bail!("unknown model preset `{other}` (desk|reference)"),
        };
        cfg = cfg.with_variant(self.variant.unwrap_or(Variant::Full));
        if let Some(n) = self.memory_size {
            cfg.memory_size = n;
        }
        if let Some(w) = self.encoder_widths {
            cfg.encoder_widths = w;
        }
        if let Some(v) = self.value_channels {
            cfg.value_channels = v;
        }
        if let Some(a) = self.attn_width {
            cfg.attn_width = a;
        }
        if let Some(d) = self.decoder_channels {
            cfg.decoder_channels = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub max_iterations: Option<usize>,
}

impl StageSection {
    pub fn stage_config(&self, stage: u8) -> StageConfig {
        let mut cfg = if stage == 1 {
            StageConfig::stage1_desk()
        } else {
            StageConfig::stage2_desk()
        };
        if let Some(o) = self.optimizer {
            cfg.optimizer = o;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(m) = self.momentum {
            cfg.momentum = m;
        }
        if let Some(w) = self.weight_decay {
            cfg.weight_decay = w;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(i) = self.max_iterations {
            cfg.max_iterations = Some(i);
        }
        cfg
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub ce_weight: Option<f64>,
    pub iou_weight: Option<f64>,
    pub class_weights: Option<Vec<f64>>,
}

impl LossSection {
    pub fn loss_config(&self) -> LossConfig {
        let d = LossConfig::default();
        LossConfig {
            ce_weight: self.ce_weight.unwrap_or(d.ce_weight),
            iou_weight: self.iou_weight.unwrap_or(d.iou_weight),
            class_weights: self.class_weights.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub row_stride: Option<usize>,
    pub point_threshold: Option<f64>,
    pub lane_accuracy_gate: Option<f64>,
    pub boundary_tolerance_frac: Option<f64>,
    pub per_frame_recall: Option<bool>,
}

impl MetricsSection {
    pub fn metric_config(&self) -> MetricConfig {
        let d = MetricConfig::default();
        MetricConfig {
            line: LineMetricConfig {
                point_threshold: self.point_threshold.unwrap_or(d.line.point_threshold),
                lane_accuracy_gate: self.lane_accuracy_gate.unwrap_or(d.line.lane_accuracy_gate),
            },
            row_stride: self.row_stride.unwrap_or(d.row_stride),
            boundary_tolerance_frac: self
                .boundary_tolerance_frac
                .unwrap_or(d.boundary_tolerance_frac),
            per_frame_recall: self.per_frame_recall.unwrap_or(d.per_frame_recall),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl RunSection {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(42)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs/default"))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
        Ok(cfg)
    }

    /// Dataset root from config, falling back to `LANEVID_DATA_ROOT`.
    pub fn dataset_root(&self) -> anyhow::Result<PathBuf> {
        if let Some(root) = &self.dataset.root {
            return Ok(root.clone());
        }
        if let Ok(env_root) = std::env::var(DATA_ROOT_ENV) {
            return Ok(PathBuf::from(env_root));
        }
        anyhow::bail!("no dataset root: set [dataset].root in the config or {DATA_ROOT_ENV}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_desk_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        let model = cfg.model.model_config().unwrap();
        assert_eq!(model, ModelConfig::desk());
        assert_eq!(cfg.run.seed(), 42);
        assert_eq!(cfg.generate.clips(), 4);
        assert_eq!(
            cfg.generate.n_train(),
            3,
            "8:2 split, at least one train clip"
        );
        assert_eq!(
            GenerateSection {
                clips: Some(10),
                ..Default::default()
            }
            .n_train(),
            8
        );
    }

    #[test]
    fn partial_sections_merge_over_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
[model]
variant = "basic"
memory_size = 3

[stage1]
lr = 0.01
"#,
        )
        .unwrap();
        let model = cfg.model.model_config().unwrap();
        assert_eq!(model.variant().unwrap(), Variant::Basic);
        assert_eq!(model.memory_size, 3);
        let s1 = cfg.stage1.stage_config(1);
        assert_eq!(s1.lr, 0.01);
        assert_eq!(s1.stage, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[model]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
