//! Image- and video-level evaluation.
//!
//! Region metrics (mIoU, F1 at IoU 0.5 and 0.8) run on optimally matched
//! instances: predictions and ground-truth lanes are paired by a Hungarian
//! assignment maximizing total IoU, so relabeling predictions never changes
//! a score. Line metrics follow the point-sampling protocol common to lane
//! benchmarks: centerlines are sampled every `row_stride` rows, a point is
//! correct within `point_threshold` pixels, and a matched lane whose
//! accuracy falls below `lane_accuracy_gate` counts as a false positive
//! (its ground-truth partner as a false negative). Video metrics are the
//! mean/recall of per-sequence region Jaccard and boundary F-measure, plus
//! a temporal-stability proxy `T` from consecutive-frame boundary
//! agreement.
//!
//! Aggregate 0/0 conventions, chosen so that `pred == gt` scores perfectly
//! on every metric (including empty frames) and spurious output is never
//! rewarded: ratios with an empty denominator are 1 when the other side is
//! empty too, else 0.

use crate::annotation::InstanceMaskFrame;
use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// One-to-one instance assignment between a predicted and a ground-truth
/// mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InstanceMatching {
    /// `(pred_label, gt_label, iou)` for matched pairs with positive IoU.
    pub pairs: Vec<(u8, u8, f64)>,
    pub unmatched_pred: Vec<u8>,
    pub unmatched_gt: Vec<u8>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub miou: f64,
    pub f1_05: f64,
    pub f1_08: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LineScores {
    pub accuracy: f64,
    #[serde(rename = "fp")]
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_rate: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub m_j: f64,
    pub o_j: f64,
    pub m_f: f64,
    pub o_f: f64,
    /// Temporal-stability proxy: consecutive-frame boundary agreement.
    /// Absent when no sequence has at least two frames.
    #[serde(rename = "m_t")]
    pub m_t: Option<f64>,
}

/// Sampled centerline point: `(row, mean column)`.
pub type LinePoint = (usize, f64);

/// One lane's sampled centerline within a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LaneLine {
    pub label: u8,
    pub points: Vec<LinePoint>,
}

/// Tunables for the line protocol.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LineMetricConfig {
    /// Pointwise correctness threshold, px.
    pub point_threshold: f64,
    /// Minimum per-lane accuracy before a matched prediction counts as a
    /// false positive.
    pub lane_accuracy_gate: f64,
}

impl Default for LineMetricConfig {
    fn default() -> Self {
        Self {
            point_threshold: 20.0,
            lane_accuracy_gate: 0.85,
        }
    }
}

/// Evaluation settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricConfig {
    pub line: LineMetricConfig,
    /// Row sampling stride for centerlines, px.
    pub row_stride: usize,
    /// Boundary tolerance as a fraction of the image diagonal.
    pub boundary_tolerance_frac: f64,
    /// Compute O_J / O_F over frames instead of sequences.
    pub per_frame_recall: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            line: LineMetricConfig::default(),
            row_stride: 10,
            boundary_tolerance_frac: 0.008,
            per_frame_recall: false,
        }
    }
}

/// Per-sequence scores carried in a [`MetricReport`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub id: String,
    pub n_frames: usize,
    pub j: f64,
    pub f: f64,
    pub t: Option<f64>,
}

/// Full evaluation output: pooled image-level scores, video-level scores,
/// and the per-sequence breakdown.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub region: RegionScores,
    pub line: LineScores,
    pub video: VideoScores,
    pub sequences: Vec<SequenceRecord>,
}

// ---------------------------------------------------------------------------
// Hungarian assignment
// ---------------------------------------------------------------------------

/// Minimum-cost assignment on a square matrix; returns `row -> col`.
/// Standard O(n^3) potentials algorithm.
fn hungarian_min_cost(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Pixel IoU between two label regions.
fn region_iou(a: &InstanceMaskFrame, la: u8, b: &InstanceMaskFrame, lb: u8) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&pa, &pb) in a.labels.iter().zip(b.labels.iter()) {
        let in_a = pa == la;
        let in_b = pb == lb;
        if in_a && in_b {
            inter += 1;
        }
        if in_a || in_b {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Optimal one-to-one matching between predicted and ground-truth instances,
/// maximizing total IoU; zero-IoU pairs are discarded into the unmatched
/// lists.
pub fn match_instances(pred: &InstanceMaskFrame, gt: &InstanceMaskFrame) -> InstanceMatching {
    assert_eq!(
        pred.labels.dim(),
        gt.labels.dim(),
        "instance matching requires same-size masks"
    );
    let pred_labels = pred.instance_labels();
    let gt_labels = gt.instance_labels();
    if pred_labels.is_empty() || gt_labels.is_empty() {
        return InstanceMatching {
            pairs: vec![],
            unmatched_pred: pred_labels,
            unmatched_gt: gt_labels,
        };
    }
    let n = pred_labels.len().max(gt_labels.len());
    // Pad to square with zero-IoU entries; minimize 1 - IoU.
    let mut cost = Array2::<f64>::ones((n, n));
    let mut iou = Array2::<f64>::zeros((n, n));
    for (i, &pl) in pred_labels.iter().enumerate() {
        for (j, &gl) in gt_labels.iter().enumerate() {
            let v = region_iou(pred, pl, gt, gl);
            iou[[i, j]] = v;
            cost[[i, j]] = 1.0 - v;
        }
    }
    let assignment = hungarian_min_cost(&cost);
    let mut matching = InstanceMatching::default();
    let mut gt_taken = vec![false; gt_labels.len()];
    for (i, &pl) in pred_labels.iter().enumerate() {
        let j = assignment[i];
        if j < gt_labels.len() && iou[[i, j]] > 0.0 {
            matching.pairs.push((pl, gt_labels[j], iou[[i, j]]));
            gt_taken[j] = true;
        } else {
            matching.unmatched_pred.push(pl);
        }
    }
    for (j, &gl) in gt_labels.iter().enumerate() {
        if !gt_taken[j] {
            matching.unmatched_gt.push(gl);
        }
    }
    matching
}

// ---------------------------------------------------------------------------
// Region metrics
// ---------------------------------------------------------------------------

fn ratio(num: f64, den: f64, vacuous: f64) -> f64 {
    if den == 0.0 {
        vacuous
    } else {
        num / den
    }
}

/// Pool matchings over a frame set into mIoU and F1 scores.
///
/// mIoU averages matched-pair IoUs with every unmatched ground-truth
/// instance contributing zero. F1 at threshold `t` counts pairs with
/// IoU > t as true positives against all predicted / ground-truth
/// instances.
pub fn region_metrics(matchings: &[InstanceMatching]) -> Result<RegionScores> {
    if matchings.is_empty() {
        return Err(Error::Validation(
            "region metrics need at least one frame".into(),
        ));
    }
    let mut iou_sum = 0.0;
    let mut n_pairs = 0usize;
    let mut n_unmatched_gt = 0usize;
    let mut n_pred = 0usize;
    let mut n_gt = 0usize;
    let mut tp05 = 0usize;
    let mut tp08 = 0usize;
    for m in matchings {
        for &(_, _, iou) in &m.pairs {
            iou_sum += iou;
            if iou > 0.5 {
                tp05 += 1;
            }
            if iou > 0.8 {
                tp08 += 1;
            }
        }
        n_pairs += m.pairs.len();
        n_unmatched_gt += m.unmatched_gt.len();
        n_pred += m.pairs.len() + m.unmatched_pred.len();
        n_gt += m.pairs.len() + m.unmatched_gt.len();
    }
    let miou_den = (n_pairs + n_unmatched_gt) as f64;
    let miou = if miou_den == 0.0 {
        // No ground truth anywhere: perfect only if nothing was predicted.
        if n_pred == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        iou_sum / miou_den
    };
    let f1 = |tp: usize| {
        if n_pred == 0 && n_gt == 0 {
            return 1.0;
        }
        let p = ratio(tp as f64, n_pred as f64, 0.0);
        let r = ratio(tp as f64, n_gt as f64, 0.0);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    Ok(RegionScores {
        miou,
        f1_05: f1(tp05),
        f1_08: f1(tp08),
    })
}

// ---------------------------------------------------------------------------
// Line metrics
// ---------------------------------------------------------------------------

/// Sample an instance's centerline: every `row_stride`-th row intersecting
/// the label contributes the mean column of its pixels. An absent label
/// yields an empty list.
pub fn mask_to_line(mask: &InstanceMaskFrame, label: u8, row_stride: usize) -> Vec<LinePoint> {
    let stride = row_stride.max(1);
    let (h, w) = mask.labels.dim();
    let mut out = Vec::new();
    for y in (0..h).step_by(stride) {
        let mut sum = 0.0;
        let mut count = 0usize;
        for x in 0..w {
            if mask.labels[[y, x]] == label {
                sum += x as f64;
                count += 1;
            }
        }
        if count > 0 {
            out.push((y, sum / count as f64));
        }
    }
    out
}

/// All lanes of a mask as sampled centerlines. Instances that intersect no
/// sampled row produce no line observation and are dropped.
pub fn mask_to_lines(mask: &InstanceMaskFrame, row_stride: usize) -> Vec<LaneLine> {
    mask.instance_labels()
        .into_iter()
        .map(|label| LaneLine {
            label,
            points: mask_to_line(mask, label, row_stride),
        })
        .filter(|l| !l.points.is_empty())
        .collect()
}

/// Fraction of `gt` points with a prediction within the threshold at the
/// same row.
fn lane_accuracy(pred: &LaneLine, gt: &LaneLine, threshold: f64) -> (usize, usize) {
    let pred_by_row: std::collections::BTreeMap<usize, f64> = pred.points.iter().cloned().collect();
    let mut correct = 0usize;
    for &(row, gx) in &gt.points {
        if let Some(&px) = pred_by_row.get(&row) {
            if (px - gx).abs() < threshold {
                correct += 1;
            }
        }
    }
    (correct, gt.points.len())
}

/// Point-sampled line metrics over a set of frames.
///
/// Within each frame, predicted and ground-truth lanes are paired by a
/// Hungarian assignment maximizing summed per-lane accuracy (matching is
/// geometric, never by label). Returns pooled accuracy plus lane-level
/// FP/FN rates.
pub fn line_metrics(
    pred_frames: &[Vec<LaneLine>],
    gt_frames: &[Vec<LaneLine>],
    cfg: &LineMetricConfig,
) -> Result<LineScores> {
    if cfg.point_threshold <= 0.0 {
        return Err(Error::Config(
            "line point threshold must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.lane_accuracy_gate) {
        return Err(Error::Config("lane accuracy gate must be in [0,1]".into()));
    }
    if pred_frames.len() != gt_frames.len() {
        return Err(Error::Validation(format!(
            "line metrics: {} predicted frames vs {} ground truth",
            pred_frames.len(),
            gt_frames.len()
        )));
    }
    let mut correct_points = 0usize;
    let mut total_gt_points = 0usize;
    let mut fp_lanes = 0usize;
    let mut fn_lanes = 0usize;
    let mut total_pred_lanes = 0usize;
    let mut total_gt_lanes = 0usize;

    for (preds, gts) in pred_frames.iter().zip(gt_frames) {
        total_pred_lanes += preds.len();
        total_gt_lanes += gts.len();
        total_gt_points += gts.iter().map(|l| l.points.len()).sum::<usize>();
        if gts.is_empty() {
            fp_lanes += preds.len();
            continue;
        }
        if preds.is_empty() {
            fn_lanes += gts.len();
            continue;
        }
        let n = preds.len().max(gts.len());
        let mut acc = Array2::<f64>::zeros((n, n));
        for (i, p) in preds.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                let (c, t) = lane_accuracy(p, g, cfg.point_threshold);
                acc[[i, j]] = ratio(c as f64, t as f64, 0.0);
            }
        }
        let cost = acc.mapv(|a| 1.0 - a);
        let assignment = hungarian_min_cost(&cost);
        let mut gt_matched = vec![false; gts.len()];
        for (i, p) in preds.iter().enumerate() {
            let j = assignment[i];
            if j >= gts.len() {
                fp_lanes += 1; // spurious prediction
                continue;
            }
            gt_matched[j] = true;
            let (c, t) = lane_accuracy(p, &gts[j], cfg.point_threshold);
            correct_points += c;
            // A ground-truth lane with no sampled points constrains nothing.
            let pair_acc = ratio(c as f64, t as f64, 1.0);
            if pair_acc < cfg.lane_accuracy_gate {
                // A bad match counts on both sides.
                fp_lanes += 1;
                fn_lanes += 1;
            }
        }
        fn_lanes += gt_matched.iter().filter(|&&m| !m).count();
    }

    let accuracy = if total_gt_points == 0 {
        if total_pred_lanes == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        correct_points as f64 / total_gt_points as f64
    };
    Ok(LineScores {
        accuracy,
        fp: ratio(fp_lanes as f64, total_pred_lanes as f64, 0.0),
        fn_rate: ratio(fn_lanes as f64, total_gt_lanes as f64, 0.0),
    })
}

// ---------------------------------------------------------------------------
// Boundary F-measure
// ---------------------------------------------------------------------------

/// Boundary pixels of one label: member pixels with a 4-neighbour of a
/// different label or lying on the image border.
fn boundary_pixels(mask: &InstanceMaskFrame, label: u8) -> Vec<(usize, usize)> {
    let (h, w) = mask.labels.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.labels[[y, x]] != label {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || mask.labels[[y - 1, x]] != label
                || mask.labels[[y + 1, x]] != label
                || mask.labels[[y, x - 1]] != label
                || mask.labels[[y, x + 1]] != label;
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance transform (two-pass parabola method).
/// `points` mark zero-distance sites on an `h x w` grid.
fn distance_transform_sq(points: &[(usize, usize)], h: usize, w: usize) -> Array2<f64> {
    const INF: f64 = 1e18;
    let mut grid = Array2::<f64>::from_elem((h, w), INF);
    for &(y, x) in points {
        grid[[y, x]] = 0.0;
    }
    // 1-D squared-distance transform along a line (Felzenszwalb-Huttenlocher).
    #[allow(clippy::needless_range_loop)]
    fn dt1d(f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let mut d = vec![0.0f64; n];
        let mut v = vec![0usize; n];
        let mut z = vec![0.0f64; n + 1];
        let mut k = 0usize;
        v[0] = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..n {
            loop {
                let s = ((f[q] + (q * q) as f64) - (f[v[k]] + (v[k] * v[k]) as f64))
                    / (2.0 * q as f64 - 2.0 * v[k] as f64);
                if s <= z[k] {
                    if k == 0 {
                        // Degenerate only when f values are -inf; cannot
                        // happen with finite inputs.
                        break;
                    }
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        k = 0;
        for q in 0..n {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let dq = q as f64 - v[k] as f64;
            d[q] = dq * dq + f[v[k]];
        }
        d
    }
    // Columns, then rows.
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| grid[[y, x]]).collect();
        for (y, v) in dt1d(&col).into_iter().enumerate() {
            grid[[y, x]] = v;
        }
    }
    for y in 0..h {
        let row: Vec<f64> = (0..w).map(|x| grid[[y, x]]).collect();
        for (x, v) in dt1d(&row).into_iter().enumerate() {
            grid[[y, x]] = v;
        }
    }
    grid
}

/// Boundary F-measure at an explicit pixel tolerance, averaged over the
/// instance classes present in either mask.
pub fn boundary_f_measure_with_tolerance(
    pred: &InstanceMaskFrame,
    gt: &InstanceMaskFrame,
    tolerance_px: f64,
) -> f64 {
    assert_eq!(
        pred.labels.dim(),
        gt.labels.dim(),
        "boundary F needs same-size masks"
    );
    let (h, w) = pred.labels.dim();
    let mut classes = pred.instance_labels();
    for l in gt.instance_labels() {
        if !classes.contains(&l) {
            classes.push(l);
        }
    }
    classes.sort_unstable();
    if classes.is_empty() {
        // Neither mask has any instance: vacuously perfect.
        return 1.0;
    }
    let tol_sq = tolerance_px * tolerance_px + 1e-9;
    let mut f_sum = 0.0;
    for &c in &classes {
        let bp = boundary_pixels(pred, c);
        let bg = boundary_pixels(gt, c);
        let f = match (bp.is_empty(), bg.is_empty()) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            (false, false) => {
                let dt_gt = distance_transform_sq(&bg, h, w);
                let dt_pred = distance_transform_sq(&bp, h, w);
                let matched_pred = bp.iter().filter(|&&(y, x)| dt_gt[[y, x]] <= tol_sq).count();
                let matched_gt = bg
                    .iter()
                    .filter(|&&(y, x)| dt_pred[[y, x]] <= tol_sq)
                    .count();
                let p = matched_pred as f64 / bp.len() as f64;
                let r = matched_gt as f64 / bg.len() as f64;
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            }
        };
        f_sum += f;
    }
    f_sum / classes.len() as f64
}

/// Boundary F-measure at the default tolerance: `ceil(frac * diagonal)`
/// pixels with `frac` = 0.8% unless overridden.
pub fn boundary_f_measure(pred: &InstanceMaskFrame, gt: &InstanceMaskFrame, frac: f64) -> f64 {
    let (h, w) = pred.labels.dim();
    let diag = ((h * h + w * w) as f64).sqrt();
    boundary_f_measure_with_tolerance(pred, gt, (frac * diag).ceil().max(1.0))
}

// ---------------------------------------------------------------------------
// Video metrics
// ---------------------------------------------------------------------------

/// Per-frame region Jaccard under the same conventions as
/// [`region_metrics`]: matched-pair IoUs averaged with unmatched ground
/// truth counting zero; an empty frame is perfect only when the prediction
/// is empty too.
pub fn frame_jaccard(pred: &InstanceMaskFrame, gt: &InstanceMaskFrame) -> f64 {
    let m = match_instances(pred, gt);
    let den = (m.pairs.len() + m.unmatched_gt.len()) as f64;
    if den == 0.0 {
        if m.unmatched_pred.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        m.pairs.iter().map(|&(_, _, iou)| iou).sum::<f64>() / den
    }
}

/// Sequence-level scores over aligned prediction/ground-truth sequences.
pub fn video_metrics(
    preds: &[Vec<InstanceMaskFrame>],
    gts: &[Vec<InstanceMaskFrame>],
    cfg: &MetricConfig,
) -> Result<(VideoScores, Vec<SequenceRecord>)> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Validation(format!(
            "video metrics: {} predicted sequences vs {} ground truth",
            preds.len(),
            gts.len()
        )));
    }
    let mut records = Vec::with_capacity(preds.len());
    let mut frame_j_all = Vec::new();
    let mut frame_f_all = Vec::new();
    for (idx, (ps, gs)) in preds.iter().zip(gts).enumerate() {
        if ps.len() != gs.len() || ps.is_empty() {
            return Err(Error::Validation(format!(
                "sequence {idx}: {} predicted frames vs {} ground truth",
                ps.len(),
                gs.len()
            )));
        }
        let js: Vec<f64> = ps
            .iter()
            .zip(gs)
            .map(|(p, g)| frame_jaccard(p, g))
            .collect();
        let fs: Vec<f64> = ps
            .iter()
            .zip(gs)
            .map(|(p, g)| boundary_f_measure(p, g, cfg.boundary_tolerance_frac))
            .collect();
        frame_j_all.extend_from_slice(&js);
        frame_f_all.extend_from_slice(&fs);
        let t = if ps.len() >= 2 {
            Some(
                ps.windows(2)
                    .map(|w| boundary_f_measure(&w[0], &w[1], cfg.boundary_tolerance_frac))
                    .sum::<f64>()
                    / (ps.len() - 1) as f64,
            )
        } else {
            None
        };
        records.push(SequenceRecord {
            id: format!("seq{idx}"),
            n_frames: ps.len(),
            j: js.iter().sum::<f64>() / js.len() as f64,
            f: fs.iter().sum::<f64>() / fs.len() as f64,
            t,
        });
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let recall = |xs: &[f64]| xs.iter().filter(|&&v| v > 0.5).count() as f64 / xs.len() as f64;
    let seq_j: Vec<f64> = records.iter().map(|r| r.j).collect();
    let seq_f: Vec<f64> = records.iter().map(|r| r.f).collect();
    let (o_j, o_f) = if cfg.per_frame_recall {
        (recall(&frame_j_all), recall(&frame_f_all))
    } else {
        (recall(&seq_j), recall(&seq_f))
    };
    let ts: Vec<f64> = records.iter().filter_map(|r| r.t).collect();
    let scores = VideoScores {
        m_j: mean(&seq_j),
        o_j,
        m_f: mean(&seq_f),
        o_f,
        m_t: if ts.is_empty() { None } else { Some(mean(&ts)) },
    };
    Ok((scores, records))
}

// ---------------------------------------------------------------------------
// Full evaluation
// ---------------------------------------------------------------------------

/// Evaluate aligned mask sequences: pooled region and line metrics over all
/// frames plus video-level scores per sequence.
pub fn evaluate_sequences(
    ids: &[String],
    preds: &[Vec<InstanceMaskFrame>],
    gts: &[Vec<InstanceMaskFrame>],
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    if ids.len() != preds.len() {
        return Err(Error::Validation("one id per sequence required".into()));
    }
    let mut matchings = Vec::new();
    let mut pred_lines = Vec::new();
    let mut gt_lines = Vec::new();
    for (ps, gs) in preds.iter().zip(gts) {
        for (p, g) in ps.iter().zip(gs) {
            if p.labels.dim() != g.labels.dim() {
                return Err(Error::Validation(format!(
                    "prediction {:?} vs ground truth {:?} size mismatch",
                    p.labels.dim(),
                    g.labels.dim()
                )));
            }
            matchings.push(match_instances(p, g));
            pred_lines.push(mask_to_lines(p, cfg.row_stride));
            gt_lines.push(mask_to_lines(g, cfg.row_stride));
        }
    }
    if matchings.is_empty() {
        return Err(Error::Validation(
            "evaluation needs at least one frame".into(),
        ));
    }
    let region = region_metrics(&matchings)?;
    let line = line_metrics(&pred_lines, &gt_lines, &cfg.line)?;
    let (video, mut sequences) = video_metrics(preds, gts, cfg)?;
    for (rec, id) in sequences.iter_mut().zip(ids) {
        rec.id = id.clone();
    }
    Ok(MetricReport {
        region,
        line,
        video,
        sequences,
    })
}

impl MetricReport {
    /// Machine-readable serialization: one JSON record per sequence followed
    /// by one aggregate record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.sequences {
            out.push_str(
                &serde_json::to_string(&serde_json::json!({
                    "kind": "sequence",
                    "id": rec.id,
                    "n_frames": rec.n_frames,
                    "J": rec.j,
                    "F": rec.f,
                    "T": rec.t,
                }))
                .expect("json"),
            );
            out.push('\n');
        }
        out.push_str(
            &serde_json::to_string(&serde_json::json!({
                "kind": "aggregate",
                "region": self.region,
                "line": self.line,
                "video": self.video,
            }))
            .expect("json"),
        );
        out.push('\n');
        out
    }

    /// Human-readable table mirroring the benchmark column layout.
    pub fn format_table(&self) -> String {
        let mt = self
            .video
            .m_t
            .map_or("   -  ".to_string(), |t| format!("{t:.3} "));
        let mut s = String::new();
        s.push_str("          | Region                  | Line                    | Video\n");
        s.push_str("          | mIoU   F1@0.5  F1@0.8   | Acc    FP      FN       | M_J    O_J    M_F    O_F    T-proxy\n");
        s.push_str(&format!(
            "aggregate | {:.3}  {:.3}   {:.3}    | {:.3}  {:.3}   {:.3}    | {:.3}  {:.3}  {:.3}  {:.3}  {}\n",
            self.region.miou,
            self.region.f1_05,
            self.region.f1_08,
            self.line.accuracy,
            self.line.fp,
            self.line.fn_rate,
            self.video.m_j,
            self.video.o_j,
            self.video.m_f,
            self.video.o_f,
            mt,
        ));
        for rec in &self.sequences {
            let t = rec.t.map_or("  -  ".to_string(), |t| format!("{t:.3}"));
            s.push_str(&format!(
                "{:<9} | J {:.3}  F {:.3}  T {}  ({} frames)\n",
                rec.id, rec.j, rec.f, t, rec.n_frames
            ));
        }
        s
    }
}
