//! Two-stage training, optimizers, and inference drivers.
//!
//! Stage 1 trains the encoder, projections, memory read and decoder with a
//! plain mean-aggregated local memory of the two preceding frames. Stage 2
//! starts from the stage-1 checkpoint and optimizes the whole network with
//! the full five-local/five-global attentive aggregation (or whichever
//! ablation variant the configuration selects). Defaults mirror the
//! reference recipe (Adam 1e-5/0.9/5e-4, then SGD 1e-3/0.9/1e-6 at batch
//! size 1); desk-scale presets shrink the budget to a few hundred
//! iterations so the whole pipeline runs on one CPU core.

use crate::annotation::InstanceMaskFrame;
use crate::dataset::{select_memory_frames, shuffle_video_index, MemorySelection, VideoClip};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_sequences, MetricConfig, MetricReport};
use crate::network::{
    load_checkpoint, save_checkpoint, ForwardFlags, MmaNet, ModelConfig, ParamStore, Session,
};
pub use crate::tensor::LossConfig;
use crate::tensor::{argmax_channels, Arr};
use ndarray::Ix3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Optimizer family used by a training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Adaptive moments.
    Adam,
    /// Stochastic gradient descent with momentum.
    Sgd,
}

/// One training stage's recipe.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hard cap on optimizer steps; desk-scale budgets are expressed here.
    pub max_iterations: Option<usize>,
}

impl StageConfig {
    /// Reference recipe for stage 1: Adam, lr 1e-5, momentum 0.9, weight
    /// decay 5e-4, 100 epochs.
    pub fn stage1_reference() -> Self {
        Self {
            stage: 1,
            optimizer: OptimizerKind::Adam,
            lr: 1e-5,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 100,
            batch_size: 1,
            max_iterations: None,
        }
    }

    /// Reference recipe for stage 2: SGD, lr 1e-3, momentum 0.9, weight
    /// decay 1e-6, mini-batch size 1, 50 epochs.
    pub fn stage2_reference() -> Self {
        Self {
            stage: 2,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-6,
            epochs: 50,
            batch_size: 1,
            max_iterations: None,
        }
    }

    /// Desk-scale stage 1: the reference shape with a raised learning rate
    /// and a ~200-iteration budget, enough to overfit small synthetic sets.
    pub fn stage1_desk() -> Self {
        Self {
            lr: 2e-3,
            epochs: 1000,
            max_iterations: Some(200),
            ..Self::stage1_reference()
        }
    }

    /// Desk-scale stage 2: reference optimizer at a ~100-iteration budget.
    pub fn stage2_desk() -> Self {
        Self {
            lr: 2e-3,
            epochs: 1000,
            max_iterations: Some(100),
            ..Self::stage2_reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!(
                "stage must be 1 or 2, got {}",
                self.stage
            )));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if self.epochs == 0 && self.max_iterations.is_none() {
            return Err(Error::Config("training budget is empty".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config("only mini-batch size 1 is supported".into()));
        }
        Ok(())
    }

    /// Memory frames this stage feeds the network: stage 1 reads the two
    /// preceding frames (local only), stage 2 the configured size for both
    /// memories.
    pub fn memory_frames(&self, model_memory: usize) -> usize {
        if self.stage == 1 {
            2
        } else {
            model_memory
        }
    }
}

/// Per-epoch log record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iterations: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricReport>,
}

/// Training log for one stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub final_loss: f64,
    pub wall_secs: f64,
}

impl TrainReport {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(
                &serde_json::to_string(&serde_json::json!({
                    "stage": self.stage,
                    "epoch": r.epoch,
                    "iterations": r.iterations,
                    "mean_loss": r.mean_loss,
                }))
                .expect("json"),
            );
            out.push('\n');
        }
        out
    }

    pub fn format_summary(&self) -> String {
        format!(
            "stage {}: {} epochs, final mean loss {:.6}, {:.1}s (seed {})",
            self.stage,
            self.records.len(),
            self.final_loss,
            self.wall_secs,
            self.seed
        )
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// Adam / SGD-momentum with PyTorch-style coupled weight decay
/// (`g <- g + wd * p`). Parameters that received no gradient in a step are
/// left untouched, including their moment buffers.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Option<Arr>>,
    v: Vec<Option<Arr>>,
    steps: Vec<u64>,
}

impl Optimizer {
    pub fn new(cfg: &StageConfig, store: &ParamStore) -> Self {
        Self {
            kind: cfg.optimizer,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            steps: vec![0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Arr>]) {
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(grad) = &grads[idx] else { continue };
            let param = store.value(id).clone();
            let g = grad + &param.mapv(|p| p * self.weight_decay);
            let updated = match self.kind {
                OptimizerKind::Sgd => {
                    let buf = match self.m[idx].take() {
                        Some(prev) => prev.mapv(|b| b * self.momentum) + &g,
                        None => g.clone(),
                    };
                    let new = &param - &buf.mapv(|b| b * self.lr);
                    self.m[idx] = Some(buf);
                    new
                }
                OptimizerKind::Adam => {
                    self.steps[idx] += 1;
                    let t = self.steps[idx] as i32;
                    let b1 = self.momentum;
                    let b2 = self.beta2;
                    let m = match self.m[idx].take() {
                        Some(prev) => prev.mapv(|x| x * b1) + &g.mapv(|x| x * (1.0 - b1)),
                        None => g.mapv(|x| x * (1.0 - b1)),
                    };
                    let v = match self.v[idx].take() {
                        Some(prev) => prev.mapv(|x| x * b2) + &g.mapv(|x| x * x * (1.0 - b2)),
                        None => g.mapv(|x| x * x * (1.0 - b2)),
                    };
                    let mc = 1.0 - b1.powi(t);
                    let vc = 1.0 - b2.powi(t);
                    let mut new = param.clone();
                    ndarray::Zip::from(&mut new)
                        .and(&m)
                        .and(&v)
                        .for_each(|p, &mi, &vi| {
                            *p -= self.lr * (mi / mc) / ((vi / vc).sqrt() + self.eps);
                        });
                    self.m[idx] = Some(m);
                    self.v[idx] = Some(v);
                    new
                }
            };
            store.set(id, updated).expect("shape preserved");
        }
    }
}

// ---------------------------------------------------------------------------
// Loss wrapper
// ---------------------------------------------------------------------------

/// Combined cross-entropy + soft-Jaccard loss for full-resolution logits
/// against an instance mask. Returns the scalar loss var on the session's
/// tape; gradients flow through `Session::backward`.
pub fn segmentation_loss(
    sess: &mut Session,
    logits: crate::tensor::Var,
    target: &InstanceMaskFrame,
    cfg: &LossConfig,
) -> Result<crate::tensor::Var> {
    sess.graph.seg_loss(logits, &target.labels, cfg)
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix-style mixing keeps per-(clip, epoch) streams independent.
    let mut z =
        seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stage1_selection(t_len: usize, t: usize) -> MemorySelection {
    let originals: Vec<usize> = (0..t).collect();
    let take = originals.len().min(2);
    let mut local: Vec<usize> = if take == 0 {
        vec![t; 2]
    } else {
        let tail = &originals[originals.len() - take..];
        let mut v = vec![tail[0]; 2 - take];
        v.extend_from_slice(tail);
        v
    };
    if local.len() > 2 {
        local.truncate(2);
    }
    MemorySelection {
        query_index: t,
        local_indices: local.clone(),
        global_indices: local,
        shuffle_permutation: (0..t_len).collect(),
        memory_size: 2,
    }
}

/// Extra knobs for a training run.
#[derive(Clone, Default)]
pub struct StageRunOptions {
    /// Evaluate on these clips every `eval_every_epochs` epochs and attach
    /// the report to the epoch record.
    pub eval_clips: Option<Vec<VideoClip>>,
    pub eval_every_epochs: usize,
    pub metric_cfg: MetricConfig,
}

fn run_stage(
    net: &mut MmaNet,
    data: &[VideoClip],
    cfg: &StageConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    opts: &StageRunOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition(
            "training needs at least one clip".into(),
        ));
    }
    for clip in data {
        clip.validate()?;
    }
    let start = std::time::Instant::now();

    let flags = if cfg.stage == 1 {
        ForwardFlags {
            use_local_attention: false,
            use_global_memory: false,
        }
    } else {
        net.flags()
    };
    let n_mem = cfg.memory_frames(net.cfg.memory_size);

    // Query pool: every (clip, frame) pair.
    let pool: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(ci, clip)| (0..clip.len()).map(move |t| (ci, t)))
        .collect();

    let mut optimizer = Optimizer::new(cfg, &net.params);
    let mut records = Vec::new();
    let mut total_iters = 0usize;
    let mut final_loss = f64::NAN;
    let budget = cfg.max_iterations.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.epochs {
        let mut order = pool.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, 0xA11CE));
        order.shuffle(&mut rng);

        // One permutation per clip per epoch feeds the global memory.
        let perms: Vec<Vec<usize>> = data
            .iter()
            .enumerate()
            .map(|(ci, clip)| {
                shuffle_video_index(clip.len(), mix_seed(seed, epoch as u64, ci as u64))
            })
            .collect::<Result<_>>()?;

        let mut epoch_loss = 0.0;
        let mut epoch_iters = 0usize;
        for (ci, t) in order {
            if total_iters >= budget {
                break;
            }
            let clip = &data[ci];
            let selection = if cfg.stage == 1 {
                stage1_selection(clip.len(), t)
            } else {
                select_memory_frames(clip.len(), t, &perms[ci], n_mem)?
            };
            let mut sess = net.open_session(true);
            let logits = net.forward_with_flags(&mut sess, &clip.frames, &selection, flags)?;
            let loss = segmentation_loss(&mut sess, logits, &clip.masks[t], loss_cfg)?;
            let loss_value = sess.graph.value(loss).iter().next().copied().unwrap();
            if !loss_value.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage {} iteration {total_iters} (clip {ci}, frame {t}): loss = {loss_value}",
                    cfg.stage
                )));
            }
            sess.backward(loss)?;
            let grads = sess.param_grads();
            optimizer.step(&mut net.params, &grads);
            epoch_loss += loss_value;
            final_loss = loss_value;
            epoch_iters += 1;
            total_iters += 1;
        }
        if epoch_iters == 0 {
            break 'epochs;
        }

        let eval = match (&opts.eval_clips, opts.eval_every_epochs) {
            (Some(clips), every) if every > 0 && (epoch + 1) % every == 0 => {
                let (preds, gts, ids) = predict_set(net, clips, seed)?;
                Some(evaluate_sequences(&ids, &preds, &gts, &opts.metric_cfg)?)
            }
            _ => None,
        };
        records.push(EpochRecord {
            epoch,
            iterations: epoch_iters,
            mean_loss: epoch_loss / epoch_iters as f64,
            eval,
        });
        if total_iters >= budget {
            break 'epochs;
        }
    }

    Ok(TrainReport {
        stage: cfg.stage,
        seed,
        records,
        final_loss,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Stage 1: train encoder, projections, memory read and decoder with a
/// two-frame mean local memory (no attention, no global branch).
pub fn train_stage1(
    model_cfg: &ModelConfig,
    data: &[VideoClip],
    cfg: &StageConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    opts: &StageRunOptions,
) -> Result<(MmaNet, TrainReport)> {
    if cfg.stage != 1 {
        return Err(Error::Config(format!(
            "stage-1 trainer got stage {}",
            cfg.stage
        )));
    }
    let mut net = MmaNet::new(model_cfg, seed)?;
    let report = run_stage(&mut net, data, cfg, loss_cfg, seed, opts)?;
    Ok((net, report))
}

/// Stage 2: resume from a stage-1 checkpoint and optimize the full network
/// with the configured variant.
pub fn train_stage2(
    stage1_checkpoint: &Path,
    data: &[VideoClip],
    cfg: &StageConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    opts: &StageRunOptions,
) -> Result<(MmaNet, TrainReport)> {
    if cfg.stage != 2 {
        return Err(Error::Config(format!(
            "stage-2 trainer got stage {}",
            cfg.stage
        )));
    }
    if !stage1_checkpoint.is_file() {
        return Err(Error::Precondition(format!(
            "stage-1 checkpoint {} does not exist",
            stage1_checkpoint.display()
        )));
    }
    let mut net = load_checkpoint(stage1_checkpoint)?;
    net.cfg.validate()?;
    let report = run_stage(&mut net, data, cfg, loss_cfg, seed, opts)?;
    Ok((net, report))
}

/// Convenience: run both stages, saving the intermediate checkpoint.
pub fn run_two_stage(
    model_cfg: &ModelConfig,
    data: &[VideoClip],
    s1: &StageConfig,
    s2: &StageConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    workdir: &Path,
) -> Result<(MmaNet, TrainReport, TrainReport)> {
    std::fs::create_dir_all(workdir)?;
    let opts = StageRunOptions::default();
    let (net1, rep1) = train_stage1(model_cfg, data, s1, loss_cfg, seed, &opts)?;
    let ckpt1 = workdir.join("stage1.ckpt");
    save_checkpoint(&net1, &ckpt1)?;
    let (net2, rep2) = train_stage2(&ckpt1, data, s2, loss_cfg, seed.wrapping_add(1), &opts)?;
    Ok((net2, rep1, rep2))
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Inference knobs.
#[derive(Clone, Copy, Debug)]
pub struct PredictOptions {
    /// Shuffle seed for the global memory at inference; fixed so runs are
    /// reproducible.
    pub shuffle_seed: u64,
    /// Bilinear-resize frames whose size is not divisible by 16 (and map
    /// the predicted mask back); errors instead when false.
    pub resize_on_mismatch: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            shuffle_seed: 0x1A7E5EED,
            resize_on_mismatch: false,
        }
    }
}

/// Segment every frame of a clip with the trained network.
pub fn predict_clip(
    net: &MmaNet,
    clip: &VideoClip,
    opts: &PredictOptions,
) -> Result<Vec<InstanceMaskFrame>> {
    clip.validate()?;
    let (w, h) = clip.frame_size();
    let (needs_resize, rw, rh) = if w % 16 != 0 || h % 16 != 0 {
        if !opts.resize_on_mismatch {
            return Err(Error::Shape(format!(
                "frame size {w}x{h} not divisible by 16; enable resize_on_mismatch or regenerate"
            )));
        }
        (true, w.div_ceil(16) * 16, h.div_ceil(16) * 16)
    } else {
        (false, w, h)
    };
    let frames: Vec<ndarray::Array3<f64>> = if needs_resize {
        eprintln!("warning: resizing {w}x{h} frames to {rw}x{rh} for inference");
        clip.frames
            .iter()
            .map(|f| crate::tensor::resize_bilinear(&f.view(), rh, rw))
            .collect()
    } else {
        clip.frames.clone()
    };

    let t_len = frames.len();
    let perm = shuffle_video_index(t_len, opts.shuffle_seed)?;
    let mut masks = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let selection = select_memory_frames(t_len, t, &perm, net.cfg.memory_size)?;
        let mut sess = net.open_session(false);
        let logits = net.forward_detect(&mut sess, &frames, &selection)?;
        let lv = sess
            .graph
            .value(logits)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let mut mask = InstanceMaskFrame {
            labels: argmax_channels(&lv),
        };
        if needs_resize {
            mask = InstanceMaskFrame {
                labels: crate::tensor::resize_nearest_labels(&mask.labels, h, w),
            };
        }
        masks.push(mask);
    }
    Ok(masks)
}

/// Aligned `(predictions, ground truths, ids)` over a clip set.
pub type EvalSet = (
    Vec<Vec<InstanceMaskFrame>>,
    Vec<Vec<InstanceMaskFrame>>,
    Vec<String>,
);

/// Predict a set of clips and return aligned predictions, ground truths and
/// ids, ready for [`evaluate_sequences`].
pub fn predict_set(net: &MmaNet, clips: &[VideoClip], shuffle_seed: u64) -> Result<EvalSet> {
    let mut preds = Vec::with_capacity(clips.len());
    let mut gts = Vec::with_capacity(clips.len());
    let mut ids = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let opts = PredictOptions {
            shuffle_seed,
            resize_on_mismatch: false,
        };
        preds.push(predict_clip(net, clip, &opts)?);
        gts.push(clip.masks.clone());
        ids.push(format!("clip{i}"));
    }
    Ok((preds, gts, ids))
}

/// Train every memory size in `ns` with the same data and budgets, then
/// evaluate on `eval_clips`. The sweep harness behind the 3/5/7 comparison.
#[allow(clippy::too_many_arguments)]
pub fn memory_sweep(
    base: &ModelConfig,
    data: &[VideoClip],
    eval_clips: &[VideoClip],
    ns: &[usize],
    s1: &StageConfig,
    s2: &StageConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    metric_cfg: &MetricConfig,
    workdir: &Path,
) -> Result<Vec<(usize, MetricReport)>> {
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        let cfg = ModelConfig {
            memory_size: n,
            ..base.clone()
        };
        let dir = workdir.join(format!("mem{n}"));
        let (net, _, _) = run_two_stage(&cfg, data, s1, s2, loss_cfg, seed, &dir)?;
        let (preds, gts, ids) = predict_set(&net, eval_clips, seed)?;
        out.push((n, evaluate_sequences(&ids, &preds, &gts, metric_cfg)?));
    }
    Ok(out)
}
