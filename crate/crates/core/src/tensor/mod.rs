//! A small reverse-mode autodiff engine over `ndarray` tensors.
//!
//! The engine is a flat tape: every operation appends a node holding its
//! value and the indices of its inputs, and [`Graph::backward`] walks the
//! tape in reverse accumulating gradients. Values are `f64` throughout so
//! finite-difference checks resolve well below the 1e-3 tolerance used by
//! the test suite.
//!
//! The op set is exactly what the detector needs: convolution, ReLU,
//! elementwise arithmetic, channel concat/split, softmax over channels or
//! rows, matrix products for the non-local affinity, bilinear x2 upsampling,
//! and a fused segmentation loss.

pub mod conv;
pub mod gradcheck;

use crate::error::{Error, Result};
use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, Ix3};

/// Dynamic-rank f64 tensor, the engine's value type.
pub type Arr = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// Weighting of the segmentation loss terms.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the pixelwise cross-entropy term.
    pub ce_weight: f64,
    /// Weight of the soft-Jaccard term.
    pub iou_weight: f64,
    /// Optional per-class weights applied inside the cross-entropy.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ce_weight: 1.0,
            iou_weight: 1.0,
            class_weights: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ce_weight < 0.0 || self.iou_weight < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.ce_weight == 0.0 && self.iou_weight == 0.0 {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        if let Some(ws) = &self.class_weights {
            if ws.iter().any(|w| *w < 0.0) {
                return Err(Error::Config("class weights must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

enum Op {
    Leaf,
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddN {
        xs: Vec<Var>,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// Multiply a `(1, H, W)` weight map across all channels of `(C, H, W)`.
    MulChannelBroadcast {
        w: Var,
        z: Var,
    },
    /// Slice one channel of `(C, H, W)` keeping the channel axis.
    Channel {
        x: Var,
        index: usize,
    },
    ConcatChannels {
        xs: Vec<Var>,
        widths: Vec<usize>,
    },
    SoftmaxChannels {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    /// `(C, H, W)` -> `(H*W, C)`.
    SpatialToRows {
        x: Var,
    },
    /// `(H*W, C)` -> `(C, H, W)`.
    RowsToSpatial {
        x: Var,
    },
    /// `(C, H, W)` -> `(C, H*W)` (plain reshape).
    FlattenSpatial {
        x: Var,
    },
    Upsample2x {
        x: Var,
    },
    /// Weighted sum against a constant: the scalar probe used by tests.
    SumWeighted {
        x: Var,
        coeffs: Arr,
    },
    SegLoss {
        logits: Var,
        target: Array2<u8>,
        cfg: LossConfig,
        probs: Array3<f64>,
    },
}

struct Node {
    value: Arr,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Arr>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward` call, if any.
    pub fn grad(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Insert a tensor as a leaf node.
    pub fn leaf(&mut self, value: Arr, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|t| t.max(0.0));
        let ng = self.needs(x);
        self.push(v, Op::Relu { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add { a, b }, ng))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("add_n: empty input list".into()))?;
        let shape = self.value(*first).shape().to_vec();
        let mut acc = self.value(*first).clone();
        for x in &xs[1..] {
            if self.value(*x).shape() != shape.as_slice() {
                return Err(Error::Shape("add_n: mismatched shapes".into()));
            }
            acc += self.value(*x);
        }
        let ng = xs.iter().any(|x| self.needs(*x));
        Ok(self.push(acc, Op::AddN { xs: xs.to_vec() }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).mapv(|t| t * c);
        let ng = self.needs(x);
        self.push(v, Op::Scale { x, c }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape("mul: mismatched shapes".into()));
        }
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul { a, b }, ng))
    }

    /// `w` is `(1, H, W)`, `z` is `(C, H, W)`; the weight map scales every
    /// channel of `z`.
    pub fn mul_channel_broadcast(&mut self, w: Var, z: Var) -> Result<Var> {
        let ws = self.value(w).shape().to_vec();
        let zs = self.value(z).shape().to_vec();
        if ws.len() != 3 || zs.len() != 3 || ws[0] != 1 || ws[1..] != zs[1..] {
            return Err(Error::Shape(format!(
                "mul_channel_broadcast: {ws:?} vs {zs:?}"
            )));
        }
        let wv = self.value(w).clone();
        let v = self.value(z) * &wv;
        let ng = self.needs(w) || self.needs(z);
        Ok(self.push(v, Op::MulChannelBroadcast { w, z }, ng))
    }

    /// Slice channel `index` of a `(C, H, W)` tensor as `(1, H, W)`.
    pub fn channel(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || index >= s[0] {
            return Err(Error::Shape(format!("channel {index} of shape {s:?}")));
        }
        let v = self
            .value(x)
            .slice_axis(Axis(0), ndarray::Slice::from(index..index + 1))
            .to_owned();
        let ng = self.needs(x);
        Ok(self.push(v, Op::Channel { x, index }, ng))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape("concat_channels: empty input list".into()));
        }
        let mut widths = Vec::with_capacity(xs.len());
        let hw = {
            let s = self.value(xs[0]).shape();
            if s.len() != 3 {
                return Err(Error::Shape(
                    "concat_channels: inputs must be (C,H,W)".into(),
                ));
            }
            (s[1], s[2])
        };
        for x in xs {
            let s = self.value(*x).shape();
            if s.len() != 3 || (s[1], s[2]) != hw {
                return Err(Error::Shape(
                    "concat_channels: mismatched spatial sizes".into(),
                ));
            }
            widths.push(s[0]);
        }
        let views: Vec<_> = xs.iter().map(|x| self.value(*x).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("concat_channels: {e}")))?;
        let ng = xs.iter().any(|x| self.needs(*x));
        Ok(self.push(
            v,
            Op::ConcatChannels {
                xs: xs.to_vec(),
                widths,
            },
            ng,
        ))
    }

    /// Softmax across the channel axis of `(C, H, W)`, per spatial location.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::Shape("softmax_channels: input must be (C,H,W)".into()))?;
        let (c, h, w) = xv.dim();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for i in 0..h {
            for j in 0..w {
                let mut m = f64::NEG_INFINITY;
                for k in 0..c {
                    m = m.max(xv[[k, i, j]]);
                }
                let mut z = 0.0;
                for k in 0..c {
                    let e = (xv[[k, i, j]] - m).exp();
                    out[[k, i, j]] = e;
                    z += e;
                }
                for k in 0..c {
                    out[[k, i, j]] /= z;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out.into_dyn(), Op::SoftmaxChannels { x }, ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::Shape("conv2d: input must be (C,H,W)".into()))?;
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| Error::Shape("conv2d: weight must be (Co,Ci,KH,KW)".into()))?;
        if xv.dim().0 != wv.dim().1 {
            return Err(Error::Shape(format!(
                "conv2d: input has {} channels, weight expects {}",
                xv.dim().0,
                wv.dim().1
            )));
        }
        if xv.dim().1 + 2 * pad < wv.dim().2 || xv.dim().2 + 2 * pad < wv.dim().3 {
            return Err(Error::Shape(
                "conv2d: kernel larger than padded input".into(),
            ));
        }
        let bias: Vec<f64> = self.value(b).iter().copied().collect();
        if bias.len() != wv.dim().0 {
            return Err(Error::Shape(
                "conv2d: bias length != output channels".into(),
            ));
        }
        let (out, cols) = conv::conv2d_forward(&xv, &wv, &bias, stride, pad);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Shape("matmul: lhs must be 2-D".into()))?;
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Shape("matmul: rhs must be 2-D".into()))?;
        if av.dim().1 != bv.dim().0 {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let v = av.dot(&bv);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v.into_dyn(), Op::MatMul { a, b }, ng))
    }

    /// Row-wise softmax of a 2-D matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Shape("softmax_rows: input must be 2-D".into()))?;
        let (m, n) = xv.dim();
        let mut out = Array2::<f64>::zeros((m, n));
        for i in 0..m {
            let row = xv.row(i);
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[[i, j]] = e;
                z += e;
            }
            for j in 0..n {
                out[[i, j]] /= z;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out.into_dyn(), Op::SoftmaxRows { x }, ng))
    }

    /// Reinterpret `(C, H, W)` as `(H*W, C)`: one row per spatial location.
    pub fn spatial_to_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::Shape("spatial_to_rows: input must be (C,H,W)".into()))?;
        let (c, h, w) = xv.dim();
        let flat = xv.to_shape((c, h * w)).expect("contiguous").to_owned();
        let rows = flat.t().as_standard_layout().to_owned();
        let ng = self.needs(x);
        Ok(self.push(rows.into_dyn(), Op::SpatialToRows { x }, ng))
    }

    /// Reshape `(C, H, W)` to `(C, H*W)`: one row per channel.
    pub fn flatten_spatial(&mut self, x: Var) -> Result<Var> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::Shape("flatten_spatial: input must be (C,H,W)".into()))?;
        let (c, h, w) = xv.dim();
        let v = xv.to_shape((c, h * w)).expect("contiguous").to_owned();
        let ng = self.needs(x);
        Ok(self.push(v.into_dyn(), Op::FlattenSpatial { x }, ng))
    }

    /// Inverse of [`Graph::spatial_to_rows`] for a known spatial size.
    pub fn rows_to_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::Shape("rows_to_spatial: input must be 2-D".into()))?;
        let (hw, c) = xv.dim();
        if hw != h * w {
            return Err(Error::Shape(format!(
                "rows_to_spatial: {hw} rows != {h}x{w}"
            )));
        }
        let t = xv.t().as_standard_layout().to_owned();
        let v = t.into_shape_with_order((c, h, w)).expect("reshape");
        let ng = self.needs(x);
        Ok(self.push(v.into_dyn(), Op::RowsToSpatial { x }, ng))
    }

    /// Bilinear x2 upsampling of `(C, H, W)` with half-pixel alignment and
    /// border replication.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::Shape("upsample2x: input must be (C,H,W)".into()))?;
        let v = upsample2x_forward(&xv);
        let ng = self.needs(x);
        Ok(self.push(v.into_dyn(), Op::Upsample2x { x }, ng))
    }

    /// Scalar probe `sum(x * coeffs)` used to reduce tensors for gradient
    /// checks.
    pub fn sum_weighted(&mut self, x: Var, coeffs: Arr) -> Result<Var> {
        if self.value(x).shape() != coeffs.shape() {
            return Err(Error::Shape(
                "sum_weighted: coefficient shape mismatch".into(),
            ));
        }
        let v = (self.value(x) * &coeffs).sum();
        let ng = self.needs(x);
        Ok(self.push(
            ndarray::arr0(v).into_dyn(),
            Op::SumWeighted { x, coeffs },
            ng,
        ))
    }

    /// Combined cross-entropy + soft-Jaccard segmentation loss.
    ///
    /// `logits` is `(K, H, W)`, `target` is `(H, W)` with labels `< K`. The
    /// Jaccard term is `1 - mean_c I_c / U_c` over classes present in the
    /// target, computed on softmax probabilities.
    pub fn seg_loss(&mut self, logits: Var, target: &Array2<u8>, cfg: &LossConfig) -> Result<Var> {
        cfg.validate()?;
        let lv = self
            .value(logits)
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::Shape("seg_loss: logits must be (K,H,W)".into()))?;
        let (k, h, w) = lv.dim();
        if target.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "seg_loss: target {:?} vs logits spatial ({h},{w})",
                target.dim()
            )));
        }
        if let Some(&bad) = target.iter().find(|&&t| (t as usize) >= k) {
            return Err(Error::Validation(format!(
                "seg_loss: target label {bad} out of range for {k} classes"
            )));
        }
        if let Some(ws) = &cfg.class_weights {
            if ws.len() != k {
                return Err(Error::Config(format!(
                    "seg_loss: {} class weights for {k} classes",
                    ws.len()
                )));
            }
        }
        let probs = softmax3(&lv);
        let value = seg_loss_value(&probs, target, cfg);
        let ng = self.needs(logits);
        Ok(self.push(
            ndarray::arr0(value).into_dyn(),
            Op::SegLoss {
                logits,
                target: target.clone(),
                cfg: cfg.clone(),
                probs,
            },
            ng,
        ))
    }

    /// Run reverse accumulation from a scalar output node.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::Shape("backward: output must be scalar".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[out.0] = Some(Arr::ones(self.nodes[out.0].value.raw_dim()));
        for i in (0..=out.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].clone().expect("checked above");
            let deltas = self.input_grads(i, &g);
            for (v, d) in deltas {
                match &mut self.grads[v.0] {
                    Some(acc) => *acc += &d,
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(())
    }

    /// Gradients flowing from node `i` to each of its inputs. Pure on
    /// `&self`; the caller accumulates.
    fn input_grads(&self, i: usize, g: &Arr) -> Vec<(Var, Arr)> {
        let mut out: Vec<(Var, Arr)> = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Relu { x } => {
                if self.needs(*x) {
                    let mask = self.value(*x).mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
                    out.push((*x, g * &mask));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::AddN { xs } => {
                for x in xs {
                    if self.needs(*x) {
                        out.push((*x, g.clone()));
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    out.push((*x, g.mapv(|t| t * c)));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g * self.value(*b)));
                }
                if self.needs(*b) {
                    out.push((*b, g * self.value(*a)));
                }
            }
            Op::MulChannelBroadcast { w, z } => {
                if self.needs(*z) {
                    out.push((*z, g * self.value(*w)));
                }
                if self.needs(*w) {
                    let dw = (g * self.value(*z))
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0))
                        .into_dyn();
                    out.push((*w, dw));
                }
            }
            Op::Channel { x, index } => {
                if self.needs(*x) {
                    let mut dx = Arr::zeros(self.value(*x).raw_dim());
                    dx.slice_axis_mut(Axis(0), ndarray::Slice::from(*index..*index + 1))
                        .assign(g);
                    out.push((*x, dx));
                }
            }
            Op::ConcatChannels { xs, widths } => {
                let mut offset = 0;
                for (x, width) in xs.iter().zip(widths) {
                    if self.needs(*x) {
                        let part = g
                            .slice_axis(Axis(0), ndarray::Slice::from(offset..offset + *width))
                            .to_owned();
                        out.push((*x, part));
                    }
                    offset += *width;
                }
            }
            Op::SoftmaxChannels { x } => {
                if self.needs(*x) {
                    let y = self.nodes[i]
                        .value
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap();
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, h, w) = y.dim();
                    let mut dx = Array3::<f64>::zeros((c, h, w));
                    for p in 0..h {
                        for q in 0..w {
                            let mut dot = 0.0;
                            for k in 0..c {
                                dot += gv[[k, p, q]] * y[[k, p, q]];
                            }
                            for k in 0..c {
                                dx[[k, p, q]] = y[[k, p, q]] * (gv[[k, p, q]] - dot);
                            }
                        }
                    }
                    out.push((*x, dx.into_dyn()));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let wv = self
                    .value(*w)
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let xd = self
                    .value(*x)
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .dim();
                let (dx, dw, db) = conv::conv2d_backward(&gv, cols, &wv, xd, *stride, *pad);
                if self.needs(*x) {
                    out.push((*x, dx.into_dyn()));
                }
                if self.needs(*w) {
                    out.push((*w, dw.into_dyn()));
                }
                if self.needs(*b) {
                    out.push((*b, db.into_dyn()));
                }
            }
            Op::MatMul { a, b } => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(*a) {
                    let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                    out.push((*a, gv.dot(&bv.t()).into_dyn()));
                }
                if self.needs(*b) {
                    let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                    out.push((*b, av.t().dot(&gv).into_dyn()));
                }
            }
            Op::SoftmaxRows { x } => {
                if self.needs(*x) {
                    let y = self.nodes[i]
                        .value
                        .view()
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let (m, n) = y.dim();
                    let mut dx = Array2::<f64>::zeros((m, n));
                    for r in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += gv[[r, j]] * y[[r, j]];
                        }
                        for j in 0..n {
                            dx[[r, j]] = y[[r, j]] * (gv[[r, j]] - dot);
                        }
                    }
                    out.push((*x, dx.into_dyn()));
                }
            }
            Op::SpatialToRows { x } => {
                if self.needs(*x) {
                    let (c, h, w) = self
                        .value(*x)
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .dim();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let dx = gv
                        .t()
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((c, h, w))
                        .expect("reshape");
                    out.push((*x, dx.into_dyn()));
                }
            }
            Op::RowsToSpatial { x } => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, h, w) = gv.dim();
                    let flat = gv.to_shape((c, h * w)).expect("contiguous").to_owned();
                    let dx = flat.t().as_standard_layout().to_owned();
                    out.push((*x, dx.into_dyn()));
                }
            }
            Op::FlattenSpatial { x } => {
                if self.needs(*x) {
                    let shape = self.value(*x).raw_dim();
                    let dx = g.to_shape(shape).expect("contiguous").to_owned();
                    out.push((*x, dx));
                }
            }
            Op::Upsample2x { x } => {
                if self.needs(*x) {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let xd = self
                        .value(*x)
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap()
                        .dim();
                    out.push((*x, upsample2x_backward(&gv, xd).into_dyn()));
                }
            }
            Op::SumWeighted { x, coeffs } => {
                if self.needs(*x) {
                    let scale = g.iter().next().copied().unwrap_or(1.0);
                    out.push((*x, coeffs.mapv(|t| t * scale)));
                }
            }
            Op::SegLoss {
                logits,
                target,
                cfg,
                probs,
            } => {
                if self.needs(*logits) {
                    let scale = g.iter().next().copied().unwrap_or(1.0);
                    let dlogits = seg_loss_backward(probs, target, cfg);
                    out.push((*logits, dlogits.mapv(|t| t * scale).into_dyn()));
                }
            }
        }
        out
    }
}

fn softmax3(logits: &ndarray::ArrayView3<f64>) -> Array3<f64> {
    let (k, h, w) = logits.dim();
    let mut probs = Array3::<f64>::zeros((k, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(logits[[c, i, j]]);
            }
            let mut z = 0.0;
            for c in 0..k {
                let e = (logits[[c, i, j]] - m).exp();
                probs[[c, i, j]] = e;
                z += e;
            }
            for c in 0..k {
                probs[[c, i, j]] /= z;
            }
        }
    }
    probs
}

fn present_classes(target: &Array2<u8>, k: usize) -> Vec<usize> {
    let mut seen = vec![false; k];
    for &t in target.iter() {
        seen[t as usize] = true;
    }
    (0..k).filter(|&c| seen[c]).collect()
}

fn seg_loss_value(probs: &Array3<f64>, target: &Array2<u8>, cfg: &LossConfig) -> f64 {
    let (k, h, w) = probs.dim();
    let n_pix = (h * w) as f64;
    let mut ce = 0.0;
    for i in 0..h {
        for j in 0..w {
            let t = target[[i, j]] as usize;
            let cw = cfg.class_weights.as_ref().map_or(1.0, |ws| ws[t]);
            ce -= cw * probs[[t, i, j]].max(1e-300).ln();
        }
    }
    ce /= n_pix;

    let present = present_classes(target, k);
    let mut jac = 0.0;
    for &c in &present {
        let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let y = if target[[i, j]] as usize == c {
                    1.0
                } else {
                    0.0
                };
                let p = probs[[c, i, j]];
                inter += p * y;
                psum += p;
                ysum += y;
            }
        }
        jac += inter / (psum + ysum - inter);
    }
    jac /= present.len() as f64;

    cfg.ce_weight * ce + cfg.iou_weight * (1.0 - jac)
}

fn seg_loss_backward(probs: &Array3<f64>, target: &Array2<u8>, cfg: &LossConfig) -> Array3<f64> {
    let (k, h, w) = probs.dim();
    let n_pix = (h * w) as f64;
    let present = present_classes(target, k);
    let n_present = present.len() as f64;

    // Cross-entropy gradient directly in logit space: (p - y) / n, optionally
    // class-weighted by the target pixel's weight.
    let mut dlogits = Array3::<f64>::zeros((k, h, w));
    for i in 0..h {
        for j in 0..w {
            let t = target[[i, j]] as usize;
            let cw = cfg.class_weights.as_ref().map_or(1.0, |ws| ws[t]);
            for c in 0..k {
                let y = if c == t { 1.0 } else { 0.0 };
                dlogits[[c, i, j]] += cfg.ce_weight * cw * (probs[[c, i, j]] - y) / n_pix;
            }
        }
    }

    // Jaccard gradient w.r.t. probabilities, then chained through softmax.
    let mut dprobs = Array3::<f64>::zeros((k, h, w));
    for &c in &present {
        let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
        for i in 0..h {
            for j in 0..w {
                let y = if target[[i, j]] as usize == c {
                    1.0
                } else {
                    0.0
                };
                let p = probs[[c, i, j]];
                inter += p * y;
                psum += p;
                ysum += y;
            }
        }
        let u = psum + ysum - inter;
        for i in 0..h {
            for j in 0..w {
                let y = if target[[i, j]] as usize == c {
                    1.0
                } else {
                    0.0
                };
                // dJ/dp = (y*U - I*(1-y)) / U^2; the loss term is -mean_c J_c.
                let dj = (y * u - inter * (1.0 - y)) / (u * u);
                dprobs[[c, i, j]] += cfg.iou_weight * (-dj) / n_present;
            }
        }
    }
    for i in 0..h {
        for j in 0..w {
            let mut dot = 0.0;
            for c in 0..k {
                dot += dprobs[[c, i, j]] * probs[[c, i, j]];
            }
            for c in 0..k {
                dlogits[[c, i, j]] += probs[[c, i, j]] * (dprobs[[c, i, j]] - dot);
            }
        }
    }
    dlogits
}

fn upsample2x_forward(x: &ndarray::ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h * 2, w * 2);
    let mut out = Array3::<f64>::zeros((c, ho, wo));
    for oy in 0..ho {
        let sy = 0.5 * (oy as f64 + 0.5) - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0c = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1c = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..wo {
            let sx = 0.5 * (ox as f64 + 0.5) - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0c = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1c = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            for ci in 0..c {
                out[[ci, oy, ox]] = (1.0 - fy) * (1.0 - fx) * x[[ci, y0c, x0c]]
                    + (1.0 - fy) * fx * x[[ci, y0c, x1c]]
                    + fy * (1.0 - fx) * x[[ci, y1c, x0c]]
                    + fy * fx * x[[ci, y1c, x1c]];
            }
        }
    }
    out
}

fn upsample2x_backward(
    g: &ndarray::ArrayView3<f64>,
    input_dim: (usize, usize, usize),
) -> Array3<f64> {
    let (c, h, w) = input_dim;
    let (ho, wo) = (h * 2, w * 2);
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for oy in 0..ho {
        let sy = 0.5 * (oy as f64 + 0.5) - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0c = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1c = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..wo {
            let sx = 0.5 * (ox as f64 + 0.5) - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0c = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1c = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            for ci in 0..c {
                let gv = g[[ci, oy, ox]];
                dx[[ci, y0c, x0c]] += (1.0 - fy) * (1.0 - fx) * gv;
                dx[[ci, y0c, x1c]] += (1.0 - fy) * fx * gv;
                dx[[ci, y1c, x0c]] += fy * (1.0 - fx) * gv;
                dx[[ci, y1c, x1c]] += fy * fx * gv;
            }
        }
    }
    dx
}

/// Bilinear resize to an arbitrary target size. Used by the inference resize
/// path, so it lives outside the tape.
pub fn resize_bilinear(x: &ndarray::ArrayView3<f64>, ho: usize, wo: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<f64>::zeros((c, ho, wo));
    let sy_scale = h as f64 / ho as f64;
    let sx_scale = w as f64 / wo as f64;
    for oy in 0..ho {
        let sy = sy_scale * (oy as f64 + 0.5) - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0c = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let y1c = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        for ox in 0..wo {
            let sx = sx_scale * (ox as f64 + 0.5) - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0c = (x0 as isize).clamp(0, w as isize - 1) as usize;
            let x1c = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
            for ci in 0..c {
                out[[ci, oy, ox]] = (1.0 - fy) * (1.0 - fx) * x[[ci, y0c, x0c]]
                    + (1.0 - fy) * fx * x[[ci, y0c, x1c]]
                    + fy * (1.0 - fx) * x[[ci, y1c, x0c]]
                    + fy * fx * x[[ci, y1c, x1c]];
            }
        }
    }
    out
}

/// Nearest-neighbour resize for label images.
pub fn resize_nearest_labels(m: &Array2<u8>, ho: usize, wo: usize) -> Array2<u8> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((ho, wo), |(i, j)| {
        let y = ((i as f64 + 0.5) * h as f64 / ho as f64 - 0.5).round();
        let x = ((j as f64 + 0.5) * w as f64 / wo as f64 - 0.5).round();
        let y = (y as isize).clamp(0, h as isize - 1) as usize;
        let x = (x as isize).clamp(0, w as isize - 1) as usize;
        m[[y, x]]
    })
}

/// Mean of several same-shaped vars: `sum(xs) / xs.len()`.
pub fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let s = g.add_n(xs)?;
    Ok(g.scale(s, 1.0 / xs.len() as f64))
}

/// Per-pixel argmax over the channel axis of `(K, H, W)` logits.
pub fn argmax_channels(logits: &ndarray::ArrayView3<f64>) -> Array2<u8> {
    let (k, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0usize;
        let mut bv = logits[[0, i, j]];
        for c in 1..k {
            if logits[[c, i, j]] > bv {
                bv = logits[[c, i, j]];
                best = c;
            }
        }
        best as u8
    })
}
