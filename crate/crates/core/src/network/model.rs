//! Model assembly and forward paths.

use super::params::{Conv2dLayer, ParamStore, ResBlock, Session};
use super::{Level, ModelConfig};
use crate::dataset::MemorySelection;
use crate::error::{Error, Result};
use crate::tensor::{mean_of, Var};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Background plus eight position labels.
pub const CLASS_COUNT: usize = 9;

/// Vars of one frame's encoder outputs: skip features at strides 2 and 4,
/// the low-level map at stride 8 and the high-level map at stride 16.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramidVars {
    pub f1: Var,
    pub f2: Var,
    pub low: Var,
    pub high: Var,
}

/// A key/value pair of vars at one level.
#[derive(Clone, Copy, Debug)]
pub struct KeyValueVars {
    pub key: Var,
    pub value: Var,
}

/// Projected memory pairs for one level.
#[derive(Clone, Debug, Default)]
pub struct MemoryBankVars {
    pub local: Vec<KeyValueVars>,
    pub global: Vec<KeyValueVars>,
}

/// Per-branch aggregation switches used by the forward pass. The structural
/// `multi_level` flag always follows the model configuration because the
/// decoder is built for it.
#[derive(Clone, Copy, Debug)]
pub struct ForwardFlags {
    pub use_local_attention: bool,
    pub use_global_memory: bool,
}

struct EncoderStage {
    conv: Conv2dLayer,
    res: ResBlock,
}

struct EncoderParams {
    stem: Conv2dLayer,
    stages: [EncoderStage; 3],
}

struct ProjectionParams {
    key: Conv2dLayer,
    value: Conv2dLayer,
}

/// Learned softmax weighting over `n_inputs` same-shaped maps.
///
/// Concatenated inputs pass through a 1x1 reduction, two 3x3 convolutions
/// and a 1x1 expansion to `n_inputs` channels; a per-location softmax turns
/// those into convex combination weights.
pub struct AttentionBlock {
    reduce: Conv2dLayer,
    mid1: Conv2dLayer,
    mid2: Conv2dLayer,
    expand: Conv2dLayer,
    n_inputs: usize,
    in_channels: usize,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_inputs: usize,
        in_channels: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            reduce: Conv2dLayer::new(
                store,
                &format!("{name}.reduce"),
                n_inputs * in_channels,
                hidden,
                1,
                1,
                0,
                rng,
            ),
            mid1: Conv2dLayer::new(store, &format!("{name}.mid1"), hidden, hidden, 3, 1, 1, rng),
            mid2: Conv2dLayer::new(store, &format!("{name}.mid2"), hidden, hidden, 3, 1, 1, rng),
            expand: Conv2dLayer::new(
                store,
                &format!("{name}.expand"),
                hidden,
                n_inputs,
                1,
                1,
                0,
                rng,
            ),
            n_inputs,
            in_channels,
        }
    }

    /// Name of the final 1x1 convolution's weight parameter (tests zero it
    /// to force uniform attention).
    pub fn expand_weight_name(&self, store: &ParamStore) -> String {
        store.name(self.expand.w).to_string()
    }

    /// Weighted average of the inputs. Returns `(z_att, weights)` where
    /// `weights` has `n_inputs` channels summing to one at every location.
    pub fn forward(&self, sess: &mut Session, inputs: &[Var]) -> Result<(Var, Var)> {
        if inputs.len() != self.n_inputs {
            return Err(Error::Shape(format!(
                "attention block expects {} inputs, got {}",
                self.n_inputs,
                inputs.len()
            )));
        }
        let shape = sess.graph.value(inputs[0]).shape().to_vec();
        for v in inputs {
            if sess.graph.value(*v).shape() != shape.as_slice() {
                return Err(Error::Shape(
                    "attention block inputs must share one shape".into(),
                ));
            }
        }
        if shape[0] != self.in_channels {
            return Err(Error::Shape(format!(
                "attention block expects {} channels, got {}",
                self.in_channels, shape[0]
            )));
        }
        let cat = sess.graph.concat_channels(inputs)?;
        let h = self.reduce.forward(sess, cat)?;
        let h = sess.graph.relu(h);
        let h = self.mid1.forward(sess, h)?;
        let h = sess.graph.relu(h);
        let h = self.mid2.forward(sess, h)?;
        let h = sess.graph.relu(h);
        let logits = self.expand.forward(sess, h)?;
        let weights = sess.graph.softmax_channels(logits)?;

        let mut terms = Vec::with_capacity(self.n_inputs);
        for (i, z) in inputs.iter().enumerate() {
            let wi = sess.graph.channel(weights, i)?;
            terms.push(sess.graph.mul_channel_broadcast(wi, *z)?);
        }
        let z_att = sess.graph.add_n(&terms)?;
        Ok((z_att, weights))
    }
}

struct LgmaParams {
    local_key: AttentionBlock,
    local_value: AttentionBlock,
    global_key: AttentionBlock,
    global_value: AttentionBlock,
}

struct RefineBlock {
    skip: Conv2dLayer,
    res1: ResBlock,
    res2: ResBlock,
}

impl RefineBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        skip_channels: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            skip: Conv2dLayer::new(
                store,
                &format!("{name}.skip"),
                skip_channels,
                channels,
                3,
                1,
                1,
                rng,
            ),
            res1: ResBlock::new(store, &format!("{name}.res1"), channels, rng),
            res2: ResBlock::new(store, &format!("{name}.res2"), channels, rng),
        }
    }

    /// Fuse a skip feature with the coarser map, doubling its resolution.
    fn forward(&self, sess: &mut Session, skip_feat: Var, coarse: Var) -> Result<Var> {
        let s = self.skip.forward(sess, skip_feat)?;
        let s = sess.graph.relu(s);
        let s = self.res1.forward(sess, s)?;
        let up = sess.graph.upsample2x(coarse)?;
        let m = sess.graph.add(s, up)?;
        self.res2.forward(sess, m)
    }
}

struct CompressBlock {
    conv: Conv2dLayer,
    res: ResBlock,
}

impl CompressBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2dLayer::new(store, &format!("{name}.conv"), c_in, c_out, 3, 1, 1, rng),
            res: ResBlock::new(store, &format!("{name}.res"), c_out, rng),
        }
    }

    fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let h = self.conv.forward(sess, x)?;
        let h = sess.graph.relu(h);
        self.res.forward(sess, h)
    }
}

struct DecoderParams {
    compress_low: CompressBlock,
    compress_high: CompressBlock,
    refine_mid: RefineBlock,
    refine_f2: RefineBlock,
    refine_f1: RefineBlock,
    head: Conv2dLayer,
}

/// The full detector with its weights.
///
/// Debug prints a summary rather than the tensors.
pub struct MmaNet {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    encoder: EncoderParams,
    mem_proj: [ProjectionParams; 2],
    query_proj: [ProjectionParams; 2],
    lgma: [LgmaParams; 2],
    decoder: DecoderParams,
}

impl std::fmt::Debug for MmaNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "MmaNet {{ variant: {:?}, memory: {}, params: {} tensors / {} scalars }}",
            self.cfg.variant().map(|v| v.name()).unwrap_or("invalid"),
            self.cfg.memory_size,
            self.params.len(),
            self.params.n_scalars()
        )
    }
}

impl MmaNet {
    /// Build a freshly initialized network. Parameter registration order is
    /// fixed, so a given `(cfg, seed)` always produces identical weights.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w1, w2, w3, w4] = cfg.encoder_widths;

        let encoder = EncoderParams {
            stem: Conv2dLayer::new(&mut store, "encoder.stem", 3, w1, 3, 2, 1, &mut rng),
            stages: [
                EncoderStage {
                    conv: Conv2dLayer::new(
                        &mut store,
                        "encoder.s2.conv",
                        w1,
                        w2,
                        3,
                        2,
                        1,
                        &mut rng,
                    ),
                    res: ResBlock::new(&mut store, "encoder.s2.res", w2, &mut rng),
                },
                EncoderStage {
                    conv: Conv2dLayer::new(
                        &mut store,
                        "encoder.s3.conv",
                        w2,
                        w3,
                        3,
                        2,
                        1,
                        &mut rng,
                    ),
                    res: ResBlock::new(&mut store, "encoder.s3.res", w3, &mut rng),
                },
                EncoderStage {
                    conv: Conv2dLayer::new(
                        &mut store,
                        "encoder.s4.conv",
                        w3,
                        w4,
                        3,
                        2,
                        1,
                        &mut rng,
                    ),
                    res: ResBlock::new(&mut store, "encoder.s4.res", w4, &mut rng),
                },
            ],
        };

        let projections = |role: &str, rng: &mut ChaCha8Rng, store: &mut ParamStore| {
            [Level::Low, Level::High].map(|level| {
                let name = format!(
                    "{role}.{}",
                    if level == Level::Low { "low" } else { "high" }
                );
                ProjectionParams {
                    key: Conv2dLayer::new(
                        store,
                        &format!("{name}.key"),
                        cfg.feature_channels(level),
                        cfg.key_channels(level),
                        3,
                        1,
                        1,
                        rng,
                    ),
                    value: Conv2dLayer::new(
                        store,
                        &format!("{name}.value"),
                        cfg.feature_channels(level),
                        cfg.value_channels(level),
                        3,
                        1,
                        1,
                        rng,
                    ),
                }
            })
        };
        let mem_proj = projections("memory_proj", &mut rng, &mut store);
        let query_proj = projections("query_proj", &mut rng, &mut store);

        let lgma = [Level::Low, Level::High].map(|level| {
            let lname = if level == Level::Low { "low" } else { "high" };
            let n = cfg.memory_size;
            LgmaParams {
                local_key: AttentionBlock::new(
                    &mut store,
                    &format!("lgma.{lname}.local_key"),
                    n,
                    cfg.key_channels(level),
                    cfg.attn_width,
                    &mut rng,
                ),
                local_value: AttentionBlock::new(
                    &mut store,
                    &format!("lgma.{lname}.local_value"),
                    n,
                    cfg.value_channels(level),
                    cfg.attn_width,
                    &mut rng,
                ),
                global_key: AttentionBlock::new(
                    &mut store,
                    &format!("lgma.{lname}.global_key"),
                    n,
                    cfg.key_channels(level),
                    cfg.attn_width,
                    &mut rng,
                ),
                global_value: AttentionBlock::new(
                    &mut store,
                    &format!("lgma.{lname}.global_value"),
                    n,
                    cfg.value_channels(level),
                    cfg.attn_width,
                    &mut rng,
                ),
            }
        });

        let d = cfg.decoder_channels;
        let low_in = if cfg.multi_level {
            2 * cfg.value_channels(Level::Low)
        } else {
            cfg.feature_channels(Level::Low)
        };
        let decoder = DecoderParams {
            compress_low: CompressBlock::new(
                &mut store,
                "decoder.compress_low",
                low_in,
                d,
                &mut rng,
            ),
            compress_high: CompressBlock::new(
                &mut store,
                "decoder.compress_high",
                2 * cfg.value_channels(Level::High),
                d,
                &mut rng,
            ),
            refine_mid: RefineBlock::new(&mut store, "decoder.refine_mid", d, d, &mut rng),
            refine_f2: RefineBlock::new(&mut store, "decoder.refine_f2", w2, d, &mut rng),
            refine_f1: RefineBlock::new(&mut store, "decoder.refine_f1", w1, d, &mut rng),
            head: Conv2dLayer::new(
                &mut store,
                "decoder.head",
                d,
                cfg.num_classes,
                3,
                1,
                1,
                &mut rng,
            ),
        };

        Ok(Self {
            cfg: cfg.clone(),
            params: store,
            encoder,
            mem_proj,
            query_proj,
            lgma,
            decoder,
        })
    }

    /// Aggregation switches implied by the configuration.
    pub fn flags(&self) -> ForwardFlags {
        ForwardFlags {
            use_local_attention: self.cfg.use_local_attention,
            use_global_memory: self.cfg.use_global_memory,
        }
    }

    pub fn open_session(&self, trainable: bool) -> Session {
        Session::new(&self.params, trainable)
    }

    /// Encode one RGB frame into the four-level pyramid. The input must be
    /// divisible by 16 in both spatial dimensions; there is no implicit
    /// padding.
    pub fn encode_frame(
        &self,
        sess: &mut Session,
        image: &Array3<f64>,
    ) -> Result<FeaturePyramidVars> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!(
                "expected RGB input, got {c} channels"
            )));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!(
                "frame {w}x{h} not divisible by 16; resize or pad explicitly"
            )));
        }
        let x = sess.input(image.clone().into_dyn());
        let f1 = self.encoder.stem.forward(sess, x)?;
        let f1 = sess.graph.relu(f1);

        let mut feats = [f1; 3];
        let mut cur = f1;
        for (i, stage) in self.encoder.stages.iter().enumerate() {
            let h = stage.conv.forward(sess, cur)?;
            let h = sess.graph.relu(h);
            let h = stage.res.forward(sess, h)?;
            feats[i] = h;
            cur = h;
        }
        Ok(FeaturePyramidVars {
            f1,
            f2: feats[0],
            low: feats[1],
            high: feats[2],
        })
    }

    /// Project a memory feature into its key/value pair. The two 3x3
    /// convolutions are shared across all memory frames of a level.
    pub fn project_memory(
        &self,
        sess: &mut Session,
        level: Level,
        feature: Var,
    ) -> Result<KeyValueVars> {
        let p = &self.mem_proj[level.index()];
        Ok(KeyValueVars {
            key: p.key.forward(sess, feature)?,
            value: p.value.forward(sess, feature)?,
        })
    }

    /// Project the query frame's feature with the query's own convolutions.
    pub fn project_query(
        &self,
        sess: &mut Session,
        level: Level,
        feature: Var,
    ) -> Result<KeyValueVars> {
        let p = &self.query_proj[level.index()];
        Ok(KeyValueVars {
            key: p.key.forward(sess, feature)?,
            value: p.value.forward(sess, feature)?,
        })
    }

    /// Attention block access for the four branch aggregators of a level:
    /// `(local, keys)`, `(local, values)`, `(global, keys)`, `(global,
    /// values)`.
    pub fn attention_block(&self, level: Level, global: bool, values: bool) -> &AttentionBlock {
        let l = &self.lgma[level.index()];
        match (global, values) {
            (false, false) => &l.local_key,
            (false, true) => &l.local_value,
            (true, false) => &l.global_key,
            (true, true) => &l.global_value,
        }
    }

    /// Aggregate a memory bank into a single key/value pair with the
    /// configured switches.
    pub fn lgma_aggregate(
        &self,
        sess: &mut Session,
        level: Level,
        bank: &MemoryBankVars,
    ) -> Result<KeyValueVars> {
        self.aggregate_with_flags(sess, level, bank, self.flags())
    }

    /// Aggregation with explicit switches (stage-1 training disables both).
    pub fn aggregate_with_flags(
        &self,
        sess: &mut Session,
        level: Level,
        bank: &MemoryBankVars,
        flags: ForwardFlags,
    ) -> Result<KeyValueVars> {
        if bank.local.is_empty() {
            return Err(Error::Validation("memory bank has no local pairs".into()));
        }
        let need_n = self.cfg.memory_size;
        if flags.use_local_attention && bank.local.len() != need_n {
            return Err(Error::Validation(format!(
                "local memory has {} pairs, attention expects {need_n}",
                bank.local.len()
            )));
        }
        let l = &self.lgma[level.index()];
        let local_keys: Vec<Var> = bank.local.iter().map(|p| p.key).collect();
        let local_values: Vec<Var> = bank.local.iter().map(|p| p.value).collect();
        let (mut key, mut value) = if flags.use_local_attention {
            let (k, _) = l.local_key.forward(sess, &local_keys)?;
            let (v, _) = l.local_value.forward(sess, &local_values)?;
            (k, v)
        } else {
            (
                mean_of(&mut sess.graph, &local_keys)?,
                mean_of(&mut sess.graph, &local_values)?,
            )
        };

        if flags.use_global_memory {
            if bank.global.len() != need_n {
                return Err(Error::Validation(format!(
                    "global memory has {} pairs, expected {need_n}",
                    bank.global.len()
                )));
            }
            let global_keys: Vec<Var> = bank.global.iter().map(|p| p.key).collect();
            let global_values: Vec<Var> = bank.global.iter().map(|p| p.value).collect();
            let (gk, _) = l.global_key.forward(sess, &global_keys)?;
            let (gv, _) = l.global_value.forward(sess, &global_values)?;
            key = sess.graph.add(key, gk)?;
            value = sess.graph.add(value, gv)?;
        }
        Ok(KeyValueVars { key, value })
    }

    /// Decode read features and skip connections into full-resolution
    /// logits.
    pub fn decode(
        &self,
        sess: &mut Session,
        low_in: Var,
        high_read: Var,
        f1: Var,
        f2: Var,
    ) -> Result<Var> {
        let ch = self.decoder.compress_high.forward(sess, high_read)?;
        let cl = self.decoder.compress_low.forward(sess, low_in)?;
        let m8 = self.decoder.refine_mid.forward(sess, cl, ch)?;
        let m4 = self.decoder.refine_f2.forward(sess, f2, m8)?;
        let m2 = self.decoder.refine_f1.forward(sess, f1, m4)?;
        let h = sess.graph.relu(m2);
        let logits_half = self.decoder.head.forward(sess, h)?;
        sess.graph.upsample2x(logits_half)
    }

    /// Full forward pass for one query frame using the configured variant.
    pub fn forward_detect(
        &self,
        sess: &mut Session,
        frames: &[Array3<f64>],
        selection: &MemorySelection,
    ) -> Result<Var> {
        self.forward_with_flags(sess, frames, selection, self.flags())
    }

    /// Forward pass with explicit aggregation switches.
    pub fn forward_with_flags(
        &self,
        sess: &mut Session,
        frames: &[Array3<f64>],
        selection: &MemorySelection,
        flags: ForwardFlags,
    ) -> Result<Var> {
        let t = selection.query_index;
        if t >= frames.len() {
            return Err(Error::Validation(format!(
                "query index {t} outside clip of {} frames",
                frames.len()
            )));
        }
        let mut needed: Vec<usize> = selection.local_indices.clone();
        if flags.use_global_memory {
            needed.extend_from_slice(&selection.global_indices);
        }
        if needed.iter().any(|&i| i >= frames.len()) {
            return Err(Error::Validation(
                "memory selection references missing frames".into(),
            ));
        }
        needed.push(t);

        // Encode each distinct frame once; padded selections repeat indices.
        let mut pyramids: BTreeMap<usize, FeaturePyramidVars> = BTreeMap::new();
        for &idx in &needed {
            if let std::collections::btree_map::Entry::Vacant(e) = pyramids.entry(idx) {
                e.insert(self.encode_frame(sess, &frames[idx])?);
            }
        }

        let levels: &[Level] = if self.cfg.multi_level {
            &[Level::Low, Level::High]
        } else {
            &[Level::High]
        };
        let mut reads: BTreeMap<usize, Var> = BTreeMap::new();
        for &level in levels {
            let mut proj_cache: BTreeMap<usize, KeyValueVars> = BTreeMap::new();
            let project = |sess: &mut Session,
                           idx: usize,
                           cache: &mut BTreeMap<usize, KeyValueVars>|
             -> Result<KeyValueVars> {
                if let Some(p) = cache.get(&idx) {
                    return Ok(*p);
                }
                let pyr = pyramids[&idx];
                let feat = match level {
                    Level::Low => pyr.low,
                    Level::High => pyr.high,
                };
                let kv = self.project_memory(sess, level, feat)?;
                cache.insert(idx, kv);
                Ok(kv)
            };

            let mut bank = MemoryBankVars::default();
            for &idx in &selection.local_indices {
                bank.local.push(project(sess, idx, &mut proj_cache)?);
            }
            if flags.use_global_memory {
                for &idx in &selection.global_indices {
                    bank.global.push(project(sess, idx, &mut proj_cache)?);
                }
            }
            let aggregated = self.aggregate_with_flags(sess, level, &bank, flags)?;

            let q_pyr = pyramids[&t];
            let q_feat = match level {
                Level::Low => q_pyr.low,
                Level::High => q_pyr.high,
            };
            let q = self.project_query(sess, level, q_feat)?;
            reads.insert(level.index(), memory_read(sess, &aggregated, &q)?);
        }

        let q_pyr = pyramids[&t];
        let low_in = if self.cfg.multi_level {
            reads[&Level::Low.index()]
        } else {
            q_pyr.low
        };
        let high_read = reads[&Level::High.index()];
        self.decode(sess, low_in, high_read, q_pyr.f1, q_pyr.f2)
    }
}

/// Non-local memory read.
///
/// Affinity between every query location and every memory location is the
/// scaled dot product of their keys, softmax-normalized over memory
/// locations; the read feature is the affinity-weighted sum of memory
/// values, concatenated with the query's own value map.
pub fn memory_read(sess: &mut Session, mem: &KeyValueVars, query: &KeyValueVars) -> Result<Var> {
    memory_read_with_affinity(sess, mem, query).map(|(out, _)| out)
}

/// Memory read that also returns the `(HW_query, HW_mem)` affinity matrix.
pub fn memory_read_with_affinity(
    sess: &mut Session,
    mem: &KeyValueVars,
    query: &KeyValueVars,
) -> Result<(Var, Var)> {
    let k_mem = sess.graph.value(mem.key).shape().to_vec();
    let k_query = sess.graph.value(query.key).shape().to_vec();
    let v_mem = sess.graph.value(mem.value).shape().to_vec();
    let v_query = sess.graph.value(query.value).shape().to_vec();
    if k_mem.len() != 3 || k_query.len() != 3 {
        return Err(Error::Shape("memory read expects (C,H,W) key maps".into()));
    }
    if k_mem != k_query || v_mem != v_query || k_mem[1..] != v_mem[1..] {
        return Err(Error::Shape(format!(
            "memory/query level mismatch: keys {k_mem:?} vs {k_query:?}, values {v_mem:?} vs {v_query:?}"
        )));
    }
    let c_k = k_mem[0];
    let (h, w) = (k_query[1], k_query[2]);

    let q_rows = sess.graph.spatial_to_rows(query.key)?; // (HWq, Ck)
    let m_cols = sess.graph.flatten_spatial(mem.key)?; // (Ck, HWm)
    let logits = sess.graph.matmul(q_rows, m_cols)?;
    let scaled = sess.graph.scale(logits, 1.0 / (c_k as f64).sqrt());
    let affinity = sess.graph.softmax_rows(scaled)?;

    let v_rows = sess.graph.spatial_to_rows(mem.value)?; // (HWm, Cv)
    let read_rows = sess.graph.matmul(affinity, v_rows)?;
    let read = sess.graph.rows_to_spatial(read_rows, h, w)?;
    let out = sess.graph.concat_channels(&[read, query.value])?;
    Ok((out, affinity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_clip, select_memory_frames, SyntheticSceneConfig};
    use crate::network::{check_parameter_gradients, Variant};
    use crate::tensor::gradcheck::{finite_difference_check, GradSpec};
    use crate::tensor::Arr;
    use ndarray::{Ix2, Ix3, IxDyn};
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            encoder_widths: [4, 6, 8, 8],
            value_channels: [8, 8],
            attn_width: 6,
            decoder_channels: 8,
            memory_size: 5,
            ..ModelConfig::desk()
        }
    }

    fn rand3(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let cfg = tiny_cfg();
        let net = MmaNet::new(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = rand3(3, 64, 128, &mut rng).mapv(f64::abs);

        let mut sess = net.open_session(false);
        let pyr = net.encode_frame(&mut sess, &img).unwrap();
        assert_eq!(sess.graph.value(pyr.f1).shape(), &[4, 32, 64]);
        assert_eq!(sess.graph.value(pyr.f2).shape(), &[6, 16, 32]);
        assert_eq!(sess.graph.value(pyr.low).shape(), &[8, 8, 16]);
        assert_eq!(sess.graph.value(pyr.high).shape(), &[8, 4, 8]);

        let pyr2 = net.encode_frame(&mut sess, &img).unwrap();
        assert_eq!(sess.graph.value(pyr.high), sess.graph.value(pyr2.high));
    }

    #[test]
    fn encoder_rejects_unaligned_input() {
        let net = MmaNet::new(&tiny_cfg(), 1).unwrap();
        let mut sess = net.open_session(false);
        let img = Array3::<f64>::zeros((3, 65, 128));
        assert!(matches!(
            net.encode_frame(&mut sess, &img),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn projection_shapes_and_linearity() {
        let cfg = tiny_cfg();
        let net = MmaNet::new(&cfg, 3).unwrap();
        let mut sess = net.open_session(false);
        // Zero feature with the default zero bias projects to zero maps.
        let zero = sess.input(Arr::zeros(IxDyn(&[8, 8, 16])));
        let kv = net.project_memory(&mut sess, Level::Low, zero).unwrap();
        assert_eq!(sess.graph.value(kv.key).shape(), &[2, 8, 16]);
        assert_eq!(sess.graph.value(kv.value).shape(), &[8, 8, 16]);
        assert!(sess.graph.value(kv.key).iter().all(|&v| v == 0.0));
        assert!(sess.graph.value(kv.value).iter().all(|&v| v == 0.0));

        // Channel mismatch is a shape error.
        let bad = sess.input(Arr::zeros(IxDyn(&[5, 8, 16])));
        assert!(matches!(
            net.project_memory(&mut sess, Level::Low, bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn projection_input_gradient_matches_finite_differences() {
        // Probe d(sum_weighted(key ++ value)) / d(feature) on a 2x3x4 map.
        let cfg = ModelConfig {
            encoder_widths: [4, 6, 2, 8],
            value_channels: [8, 8],
            ..tiny_cfg()
        };
        let net = MmaNet::new(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feat = rand3(2, 3, 4, &mut rng).into_dyn();
        let coeffs_k =
            Arr::from_shape_fn(IxDyn(&[2, 3, 4]), |ix| ((ix[1] * 3 + ix[2]) as f64).sin());
        let coeffs_v = Arr::from_shape_fn(IxDyn(&[8, 3, 4]), |ix| ((ix[0] + ix[2]) as f64).cos());

        let run = |xs: &[Arr]| -> (f64, Arr) {
            let mut sess = net.open_session(false);
            let f = sess.trainable_input(xs[0].clone());
            let kv = net.project_memory(&mut sess, Level::Low, f).unwrap();
            let sk = sess.graph.sum_weighted(kv.key, coeffs_k.clone()).unwrap();
            let sv = sess.graph.sum_weighted(kv.value, coeffs_v.clone()).unwrap();
            let loss = sess.graph.add(sk, sv).unwrap();
            sess.graph.backward(loss).unwrap();
            let g = sess.graph.grad(f).cloned().unwrap();
            let v = sess.graph.value(loss).iter().next().copied().unwrap();
            (v, g)
        };
        let (_, analytic) = run(std::slice::from_ref(&feat));
        let mut eval = |xs: &[Arr]| run(xs).0;
        let report = finite_difference_check(
            &mut eval,
            std::slice::from_ref(&feat),
            &[analytic],
            GradSpec {
                coords_per_input: 24,
                seed: 13,
            },
        );
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn attention_block_uniform_when_expand_is_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = AttentionBlock::new(&mut store, "att", 5, 3, 6, &mut rng);
        // Zero the final convolution: softmax of zeros is uniform 1/5.
        let wname = block.expand_weight_name(&store);
        let wid = store.id_of(&wname).unwrap();
        let shape = store.value(wid).raw_dim();
        store.set(wid, Arr::zeros(shape)).unwrap();

        let mut sess = Session::new(&store, false);
        let mut rng2 = ChaCha8Rng::seed_from_u64(6);
        let inputs: Vec<Var> = (0..5)
            .map(|_| sess.input(rand3(3, 4, 5, &mut rng2).into_dyn()))
            .collect();
        let (z, w) = block.forward(&mut sess, &inputs).unwrap();
        for &wv in sess.graph.value(w).iter() {
            assert!((wv - 0.2).abs() < 1e-12);
        }
        // Output equals the elementwise mean of the five inputs.
        let mean = {
            let mut acc = sess.graph.value(inputs[0]).clone();
            for v in &inputs[1..] {
                acc += sess.graph.value(*v);
            }
            acc / 5.0
        };
        let zv = sess.graph.value(z);
        for (a, b) in zv.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_block_fixed_point_on_identical_inputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let block = AttentionBlock::new(&mut store, "att", 5, 4, 8, &mut rng);
        let mut sess = Session::new(&store, false);
        let z = rand3(4, 3, 6, &mut rng).into_dyn();
        let inputs: Vec<Var> = (0..5).map(|_| sess.input(z.clone())).collect();
        let (out, _) = block.forward(&mut sess, &inputs).unwrap();
        for (a, b) in sess.graph.value(out).iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_block_matches_per_pixel_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = AttentionBlock::new(&mut store, "att", 5, 3, 6, &mut rng);
        let mut sess = Session::new(&store, false);
        let arrays: Vec<Array3<f64>> = (0..5).map(|_| rand3(3, 4, 5, &mut rng)).collect();
        let inputs: Vec<Var> = arrays
            .iter()
            .map(|a| sess.input(a.clone().into_dyn()))
            .collect();
        let (z, w) = block.forward(&mut sess, &inputs).unwrap();

        let wv = sess
            .graph
            .value(w)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let zv = sess
            .graph
            .value(z)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let mut expect = 0.0;
                    for (i, arr) in arrays.iter().enumerate() {
                        expect += wv[[i, y, x]] * arr[[c, y, x]];
                    }
                    assert!((zv[[c, y, x]] - expect).abs() < 1e-12);
                }
            }
        }
        // Convexity: weights nonnegative, sum to one.
        for y in 0..4 {
            for x in 0..5 {
                let s: f64 = (0..5).map(|i| wv[[i, y, x]]).sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!((0..5).all(|i| wv[[i, y, x]] >= 0.0));
            }
        }
    }

    #[test]
    fn lgma_identical_banks_double_local_aggregate() {
        let cfg = tiny_cfg();
        let net = MmaNet::new(&cfg, 13).unwrap();
        let mut sess = net.open_session(false);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let key = rand3(2, 4, 6, &mut rng).into_dyn();
        let value = rand3(8, 4, 6, &mut rng).into_dyn();
        let pair = |sess: &mut Session, k: &Arr, v: &Arr| KeyValueVars {
            key: sess.input(k.clone()),
            value: sess.input(v.clone()),
        };
        let bank = MemoryBankVars {
            local: (0..5).map(|_| pair(&mut sess, &key, &value)).collect(),
            global: (0..5).map(|_| pair(&mut sess, &key, &value)).collect(),
        };
        let agg = net.lgma_aggregate(&mut sess, Level::Low, &bank).unwrap();
        // Both branches are convex combinations of identical inputs, so the
        // sum is exactly twice the input (and twice the local-only path).
        for (a, b) in sess.graph.value(agg.key).iter().zip(key.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
        for (a, b) in sess.graph.value(agg.value).iter().zip(value.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }

        let local_only = net
            .aggregate_with_flags(
                &mut sess,
                Level::Low,
                &bank,
                ForwardFlags {
                    use_local_attention: true,
                    use_global_memory: false,
                },
            )
            .unwrap();
        let lk = sess.graph.value(local_only.key).clone();
        for (a, b) in sess.graph.value(agg.key).iter().zip(lk.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn lgma_rejects_incomplete_bank() {
        let cfg = tiny_cfg();
        let net = MmaNet::new(&cfg, 13).unwrap();
        let mut sess = net.open_session(false);
        let pair = KeyValueVars {
            key: sess.input(Arr::zeros(IxDyn(&[2, 4, 6]))),
            value: sess.input(Arr::zeros(IxDyn(&[8, 4, 6]))),
        };
        let bank = MemoryBankVars {
            local: vec![pair; 3],
            global: vec![],
        };
        assert!(matches!(
            net.lgma_aggregate(&mut sess, Level::Low, &bank),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn memory_read_constant_key_reads_spatial_mean() {
        let net = MmaNet::new(&tiny_cfg(), 15).unwrap();
        let mut sess = net.open_session(false);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let value = rand3(8, 3, 4, &mut rng);
        let mem = KeyValueVars {
            key: sess.input(Arr::from_elem(IxDyn(&[2, 3, 4]), 0.7)),
            value: sess.input(value.clone().into_dyn()),
        };
        let query = KeyValueVars {
            key: sess.input(Arr::from_elem(IxDyn(&[2, 3, 4]), -0.3)),
            value: sess.input(rand3(8, 3, 4, &mut rng).into_dyn()),
        };
        let (out, affinity) = memory_read_with_affinity(&mut sess, &mem, &query).unwrap();
        let av = sess
            .graph
            .value(affinity)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        for row in av.outer_iter() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-9);
            for &v in row {
                assert!((v - 1.0 / 12.0).abs() < 1e-12, "uniform affinity expected");
            }
        }
        let ov = sess
            .graph
            .value(out)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        for c in 0..8 {
            let mean = value.slice(ndarray::s![c, .., ..]).mean().unwrap();
            for y in 0..3 {
                for x in 0..4 {
                    assert!((ov[[c, y, x]] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn memory_read_zero_values_pass_query_value_through() {
        let net = MmaNet::new(&tiny_cfg(), 15).unwrap();
        let mut sess = net.open_session(false);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let qv = rand3(8, 3, 4, &mut rng);
        let mem = KeyValueVars {
            key: sess.input(rand3(2, 3, 4, &mut rng).into_dyn()),
            value: sess.input(Arr::zeros(IxDyn(&[8, 3, 4]))),
        };
        let query = KeyValueVars {
            key: sess.input(rand3(2, 3, 4, &mut rng).into_dyn()),
            value: sess.input(qv.clone().into_dyn()),
        };
        let out = memory_read(&mut sess, &mem, &query).unwrap();
        let ov = sess
            .graph
            .value(out)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        assert_eq!(ov.dim(), (16, 3, 4));
        for c in 0..8 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(ov[[c, y, x]], 0.0);
                    assert_eq!(ov[[8 + c, y, x]], qv[[c, y, x]]);
                }
            }
        }
    }

    #[test]
    fn memory_read_matches_four_pixel_hand_oracle() {
        // 1-channel keys on a 2x2 grid; the oracle enumerates the 4x4
        // affinity with explicit exponentials.
        let net = MmaNet::new(&tiny_cfg(), 15).unwrap();
        let mut sess = net.open_session(false);
        let mk = [0.5, -1.0, 2.0, 0.0];
        let qk = [1.0, 0.25, -0.5, 0.75];
        let mv = [3.0, -2.0, 1.0, 4.0];
        let mem = KeyValueVars {
            key: sess.input(Arr::from_shape_vec(IxDyn(&[1, 2, 2]), mk.to_vec()).unwrap()),
            value: sess.input(Arr::from_shape_vec(IxDyn(&[1, 2, 2]), mv.to_vec()).unwrap()),
        };
        let query = KeyValueVars {
            key: sess.input(Arr::from_shape_vec(IxDyn(&[1, 2, 2]), qk.to_vec()).unwrap()),
            value: sess.input(Arr::zeros(IxDyn(&[1, 2, 2]))),
        };
        let (out, affinity) = memory_read_with_affinity(&mut sess, &mem, &query).unwrap();
        let av = sess
            .graph
            .value(affinity)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let ov = sess
            .graph
            .value(out)
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        for p in 0..4 {
            // C_k = 1, so logits are q*k (the 1/sqrt(C_k) scale is 1).
            let logits: Vec<f64> = (0..4).map(|q| qk[p] * mk[q]).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut read = 0.0;
            for q in 0..4 {
                let a = exps[q] / z;
                assert!((av[[p, q]] - a).abs() < 1e-6, "affinity[{p},{q}]");
                read += a * mv[q];
            }
            assert!((ov[[0, p / 2, p % 2]] - read).abs() < 1e-6);
        }
    }

    #[test]
    fn memory_read_invariant_under_joint_location_permutation() {
        let net = MmaNet::new(&tiny_cfg(), 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mk = rand3(2, 2, 3, &mut rng);
        let mv = rand3(8, 2, 3, &mut rng);
        let qk = rand3(2, 2, 3, &mut rng);
        let qv = rand3(8, 2, 3, &mut rng);

        // Reverse all memory locations (one fixed permutation).
        let flip = |a: &Array3<f64>| {
            let (c, h, w) = a.dim();
            Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
                let flat = h * w - 1 - (y * w + x);
                a[[ci, flat / w, flat % w]]
            })
        };

        let run = |mk: &Array3<f64>, mv: &Array3<f64>| {
            let mut sess = net.open_session(false);
            let mem = KeyValueVars {
                key: sess.input(mk.clone().into_dyn()),
                value: sess.input(mv.clone().into_dyn()),
            };
            let query = KeyValueVars {
                key: sess.input(qk.clone().into_dyn()),
                value: sess.input(qv.clone().into_dyn()),
            };
            let out = memory_read(&mut sess, &mem, &query).unwrap();
            sess.graph.value(out).clone()
        };
        let a = run(&mk, &mv);
        let b = run(&flip(&mk), &flip(&mv));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn memory_read_rejects_level_mismatch() {
        let net = MmaNet::new(&tiny_cfg(), 15).unwrap();
        let mut sess = net.open_session(false);
        let mem = KeyValueVars {
            key: sess.input(Arr::zeros(IxDyn(&[2, 4, 4]))),
            value: sess.input(Arr::zeros(IxDyn(&[8, 4, 4]))),
        };
        let query = KeyValueVars {
            key: sess.input(Arr::zeros(IxDyn(&[2, 2, 2]))),
            value: sess.input(Arr::zeros(IxDyn(&[8, 2, 2]))),
        };
        assert!(matches!(
            memory_read(&mut sess, &mem, &query),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn decode_produces_full_resolution_logits() {
        let cfg = tiny_cfg();
        let net = MmaNet::new(&cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let img = rand3(3, 64, 128, &mut rng).mapv(f64::abs);
        let clip = vec![img];
        let perm = vec![0usize];
        let sel = select_memory_frames(1, 0, &perm, 5).unwrap();
        let mut sess = net.open_session(false);
        let logits = net.forward_detect(&mut sess, &clip, &sel).unwrap();
        assert_eq!(sess.graph.value(logits).shape(), &[9, 64, 128]);

        let logits2 = net.forward_detect(&mut sess, &clip, &sel).unwrap();
        assert_eq!(sess.graph.value(logits), sess.graph.value(logits2));
    }

    #[test]
    fn full_forward_on_synthetic_clip() {
        let cfg = SyntheticSceneConfig {
            seed: 7,
            length: 20,
            ..Default::default()
        };
        let clip = generate_synthetic_clip(&cfg).unwrap();
        let net = MmaNet::new(&tiny_cfg(), 23).unwrap();
        let perm = crate::dataset::shuffle_video_index(20, 3).unwrap();
        let sel = select_memory_frames(20, 10, &perm, 5).unwrap();
        let mut sess = net.open_session(false);
        let logits = net.forward_detect(&mut sess, &clip.frames, &sel).unwrap();
        assert_eq!(sess.graph.value(logits).shape(), &[9, 64, 128]);
    }

    #[test]
    fn basic_variant_equals_hand_built_mean_memory_forward() {
        // Compose the same computation from the public pieces: mean the
        // projected local pairs, read, decode. The basic-variant forward
        // must match it exactly.
        let cfg = tiny_cfg().with_variant(Variant::Basic);
        let net = MmaNet::new(&cfg, 29).unwrap();
        let scene = SyntheticSceneConfig {
            seed: 11,
            length: 8,
            ..Default::default()
        };
        let clip = generate_synthetic_clip(&scene).unwrap();
        let perm: Vec<usize> = (0..8).collect();
        let sel = select_memory_frames(8, 6, &perm, 5).unwrap();

        let mut sess = net.open_session(false);
        let via_model = net.forward_detect(&mut sess, &clip.frames, &sel).unwrap();

        let mut sess2 = net.open_session(false);
        let mut pairs = Vec::new();
        let mut pyramids = BTreeMap::new();
        for &i in &sel.local_indices {
            pyramids
                .entry(i)
                .or_insert_with(|| net.encode_frame(&mut sess2, &clip.frames[i]).unwrap());
        }
        for &i in &sel.local_indices {
            let pyr = pyramids[&i];
            pairs.push(
                net.project_memory(&mut sess2, Level::High, pyr.high)
                    .unwrap(),
            );
        }
        let keys: Vec<Var> = pairs.iter().map(|p| p.key).collect();
        let values: Vec<Var> = pairs.iter().map(|p| p.value).collect();
        let mem = KeyValueVars {
            key: mean_of(&mut sess2.graph, &keys).unwrap(),
            value: mean_of(&mut sess2.graph, &values).unwrap(),
        };
        let q_pyr = net.encode_frame(&mut sess2, &clip.frames[6]).unwrap();
        let q = net
            .project_query(&mut sess2, Level::High, q_pyr.high)
            .unwrap();
        let read = memory_read(&mut sess2, &mem, &q).unwrap();
        let logits = net
            .decode(&mut sess2, q_pyr.low, read, q_pyr.f1, q_pyr.f2)
            .unwrap();

        let a = sess.graph.value(via_model);
        let b = sess2.graph.value(logits);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_aggregation_is_permutation_invariant() {
        // With attention off, permuting the local memory frames cannot
        // change the output.
        let cfg = tiny_cfg().with_variant(Variant::Basic);
        let net = MmaNet::new(&cfg, 31).unwrap();
        let scene = SyntheticSceneConfig {
            seed: 13,
            length: 10,
            ..Default::default()
        };
        let clip = generate_synthetic_clip(&scene).unwrap();
        let perm: Vec<usize> = (0..10).collect();
        let mut sel = select_memory_frames(10, 7, &perm, 5).unwrap();

        let mut sess = net.open_session(false);
        let a = net.forward_detect(&mut sess, &clip.frames, &sel).unwrap();
        let av = sess.graph.value(a).clone();

        sel.local_indices.reverse();
        sel.local_indices.swap(1, 3);
        let mut sess2 = net.open_session(false);
        let b = net.forward_detect(&mut sess2, &clip.frames, &sel).unwrap();
        for (x, y) in av.iter().zip(sess2.graph.value(b).iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_parameter_gradients_match_finite_differences() {
        // Toy-shape gradient check through the full decode path.
        let cfg = ModelConfig {
            encoder_widths: [3, 4, 5, 6],
            value_channels: [4, 4],
            attn_width: 4,
            decoder_channels: 5,
            memory_size: 2,
            ..ModelConfig::desk()
        };
        let net = MmaNet::new(&cfg, 33).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let low_in = rand3(8, 4, 8, &mut rng).into_dyn(); // 2*value_low at stride 8
        let high_in = rand3(8, 2, 4, &mut rng).into_dyn();
        let f1 = rand3(3, 16, 32, &mut rng).into_dyn();
        let f2 = rand3(4, 8, 16, &mut rng).into_dyn();
        let target = ndarray::Array2::<u8>::from_shape_fn((32, 64), |(y, x)| {
            ((y + x) % cfg.num_classes) as u8
        });

        let report = check_parameter_gradients(
            &net.params,
            |sess| {
                let li = sess.input(low_in.clone());
                let hi = sess.input(high_in.clone());
                let f1v = sess.input(f1.clone());
                let f2v = sess.input(f2.clone());
                let logits = net_decode(&net, sess, li, hi, f1v, f2v)?;
                sess.graph
                    .seg_loss(logits, &target, &crate::tensor::LossConfig::default())
            },
            GradSpec {
                coords_per_input: 1,
                seed: 35,
            },
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "max rel err {}",
            report.max_rel_err
        );
        assert!(report.coords_checked >= 20);
    }

    // Free-standing helper so the closure can borrow `net` immutably while
    // the store is mutated outside.
    fn net_decode(
        net: &MmaNet,
        sess: &mut Session,
        low: Var,
        high: Var,
        f1: Var,
        f2: Var,
    ) -> Result<Var> {
        net.decode(sess, low, high, f1, f2)
    }
}
