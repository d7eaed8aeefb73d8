//! Lane annotation geometry: point groups, cubic fits, mask rasterization,
//! and dataset statistics.
//!
//! Annotations are per-frame JSON files holding one ordered point group per
//! lane, each tagged with an ego-relative position label (odd `2i-1` = i-th
//! lane left of the vehicle, even `2i` = i-th lane right, i <= 4) and one of
//! ten line-types. Point groups are fit with a least-squares cubic `x(y)`
//! and expanded to a fixed-width region: 30 px on 1920x1080 frames, scaled
//! by frame height elsewhere.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Maximum position label: up to four lanes on each side of the ego vehicle.
pub const MAX_LANE_ID: u8 = 8;

/// The ten annotated line-types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum LineType {
    SingleWhiteSolid = 0,
    SingleWhiteDotted = 1,
    SingleYellowSolid = 2,
    SingleYellowDotted = 3,
    DoubleWhiteSolid = 4,
    DoubleYellowSolid = 5,
    DoubleYellowDotted = 6,
    DoubleWhiteSolidDotted = 7,
    DoubleWhiteDottedSolid = 8,
    DoubleSolidWhiteYellow = 9,
}

impl LineType {
    pub const COUNT: usize = 10;

    pub fn from_index(i: u8) -> Result<Self> {
        use LineType::*;
        Ok(match i {
            0 => SingleWhiteSolid,
            1 => SingleWhiteDotted,
            2 => SingleYellowSolid,
            3 => SingleYellowDotted,
            4 => DoubleWhiteSolid,
            5 => DoubleYellowSolid,
            6 => DoubleYellowDotted,
            7 => DoubleWhiteSolidDotted,
            8 => DoubleWhiteDottedSolid,
            9 => DoubleSolidWhiteYellow,
            _ => {
                return Err(Error::Parse(format!(
                    "line_type {i} out of range 0..{}",
                    Self::COUNT
                )))
            }
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// The ten capture scenarios tracked by dataset statistics.
pub const SCENARIOS: [&str; 10] = [
    "normal",
    "crowded",
    "curved_road",
    "damaged_road",
    "shadows",
    "road_markings",
    "dazzle_light",
    "haze",
    "night",
    "crossroad",
];

/// One annotated lane: an ordered point group along the lane's center line.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPointSet {
    /// Center-line samples `(x, y)` in pixels, ordered by increasing `y`.
    pub points: Vec<(f64, f64)>,
    /// Ego-relative position label in `1..=8`.
    pub lane_id: u8,
    pub line_type: LineType,
}

impl ControlPointSet {
    /// Sort points by `y` and check the type invariants: at least four
    /// points (a cubic needs four) and strictly monotonic `y` once sorted.
    pub fn normalize(&mut self) -> Result<()> {
        if self.lane_id == 0 || self.lane_id > MAX_LANE_ID {
            return Err(Error::Validation(format!(
                "lane_id {} outside 1..={MAX_LANE_ID}",
                self.lane_id
            )));
        }
        if self.points.len() < 4 {
            return Err(Error::Validation(format!(
                "lane {} has {} points; a cubic needs at least 4",
                self.lane_id,
                self.points.len()
            )));
        }
        self.points
            .sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite y"));
        if self.points.windows(2).any(|w| w[0].1 >= w[1].1) {
            return Err(Error::Validation(format!(
                "lane {}: duplicate y coordinate in point group",
                self.lane_id
            )));
        }
        if self
            .points
            .iter()
            .any(|p| !p.0.is_finite() || !p.1.is_finite())
        {
            return Err(Error::Validation(format!(
                "lane {}: non-finite point coordinate",
                self.lane_id
            )));
        }
        Ok(())
    }
}

/// Least-squares cubic `x(y) = a0 + a1*y + a2*y^2 + a3*y^3`, valid on
/// `y_range` only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanePolynomial {
    pub coeffs: [f64; 4],
    pub y_range: (f64, f64),
}

impl LanePolynomial {
    pub fn eval(&self, y: f64) -> f64 {
        let [a0, a1, a2, a3] = self.coeffs;
        ((a3 * y + a2) * y + a1) * y + a0
    }
}

/// Integer label image: 0 = background, `k` in `1..=8` = lane position label.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMaskFrame {
    /// `(H, W)` label grid.
    pub labels: Array2<u8>,
}

impl InstanceMaskFrame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            labels: Array2::zeros((height, width)),
        }
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    /// Distinct nonzero labels, ascending.
    pub fn instance_labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in self.labels.iter() {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&v| v == label).count()
    }
}

/// Aggregate annotation statistics over a dataset tree.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_videos: usize,
    pub n_frames: usize,
    /// `frames_per_lane_count[k]` = number of frames with exactly `k`
    /// annotated lanes, `k` in `0..=8`.
    pub frames_per_lane_count: [usize; 9],
    /// Number of annotated lanes per line-type.
    pub line_type_counts: [usize; LineType::COUNT],
    /// Number of videos per scenario (from optional per-video metadata).
    pub scenario_counts: [usize; 10],
}

// ---------------------------------------------------------------------------
// Annotation files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LaneJson {
    id: u8,
    line_type: u8,
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    frame: usize,
    lanes: Vec<LaneJson>,
}

/// Serialize one frame's lanes into the canonical annotation JSON.
pub fn annotation_to_json(frame: usize, lanes: &[ControlPointSet]) -> serde_json::Value {
    let f = FrameJson {
        frame,
        lanes: lanes
            .iter()
            .map(|l| LaneJson {
                id: l.lane_id,
                line_type: l.line_type.index() as u8,
                points: l.points.iter().map(|&(x, y)| [x, y]).collect(),
            })
            .collect(),
    };
    serde_json::to_value(f).expect("annotation serialization")
}

fn frame_from_json(value: &serde_json::Value) -> Result<(usize, Vec<ControlPointSet>)> {
    // VIL-100 release schema nests lanes under "annotations"; translate it
    // to the canonical form first.
    if value.get("annotations").is_some() {
        return vil100::import_frame(value);
    }
    let parsed: FrameJson = serde_json::from_value(value.clone())
        .map_err(|e| Error::Parse(format!("annotation frame: {e}")))?;
    let mut lanes = Vec::with_capacity(parsed.lanes.len());
    let mut seen = BTreeMap::new();
    for lane in parsed.lanes {
        let mut cps = ControlPointSet {
            points: lane.points.iter().map(|p| (p[0], p[1])).collect(),
            lane_id: lane.id,
            line_type: LineType::from_index(lane.line_type)?,
        };
        cps.normalize()?;
        if seen.insert(lane.id, ()).is_some() {
            return Err(Error::Validation(format!(
                "frame {}: duplicate lane_id {}",
                parsed.frame, lane.id
            )));
        }
        lanes.push(cps);
    }
    Ok((parsed.frame, lanes))
}

/// Parse a canonical annotation file: either a single frame object
/// `{"frame": .., "lanes": [..]}` or an array of such objects. Files in the
/// VIL-100 release schema are translated on the fly.
pub fn parse_annotation_file(path: &Path) -> Result<Vec<(usize, Vec<ControlPointSet>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let frames = match &value {
        serde_json::Value::Array(items) => items
            .iter()
            .map(frame_from_json)
            .collect::<Result<Vec<_>>>()?,
        _ => vec![frame_from_json(&value)?],
    };
    Ok(frames)
}

/// Importer for the VIL-100 release schema.
///
/// The released files nest lanes under `annotations.lane`, use `lane_id` for
/// the position label and a 1-based `attribute` for the line-type. Only
/// those three fields are consumed; everything else is ignored.
pub mod vil100 {
    use super::*;

    pub fn import_frame(value: &serde_json::Value) -> Result<(usize, Vec<ControlPointSet>)> {
        let anno = value
            .get("annotations")
            .ok_or_else(|| Error::Parse("missing key `annotations`".into()))?;
        let lanes_json = anno
            .get("lane")
            .and_then(|l| l.as_array())
            .ok_or_else(|| Error::Parse("missing key `annotations.lane`".into()))?;
        let frame = value
            .get("info")
            .and_then(|i| i.get("frame"))
            .and_then(|f| f.as_u64())
            .unwrap_or(0) as usize;
        let mut lanes = Vec::new();
        let mut seen = BTreeMap::new();
        for (i, lane) in lanes_json.iter().enumerate() {
            let lane_id = lane
                .get("lane_id")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Parse(format!("lane[{i}]: missing key `lane_id`")))?
                as u8;
            let attribute = lane
                .get("attribute")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Parse(format!("lane[{i}]: missing key `attribute`")))?;
            if attribute == 0 || attribute > LineType::COUNT as u64 {
                return Err(Error::Parse(format!(
                    "lane[{i}]: attribute {attribute} outside 1..={}",
                    LineType::COUNT
                )));
            }
            let points = lane
                .get("points")
                .and_then(|v| v.as_array())
                .ok_or_else(|| Error::Parse(format!("lane[{i}]: missing key `points`")))?;
            let mut pts = Vec::with_capacity(points.len());
            for p in points {
                let pair = p.as_array().filter(|a| a.len() == 2).ok_or_else(|| {
                    Error::Parse(format!("lane[{i}]: point is not an [x, y] pair"))
                })?;
                let x = pair[0]
                    .as_f64()
                    .ok_or_else(|| Error::Parse(format!("lane[{i}]: non-numeric x coordinate")))?;
                let y = pair[1]
                    .as_f64()
                    .ok_or_else(|| Error::Parse(format!("lane[{i}]: non-numeric y coordinate")))?;
                pts.push((x, y));
            }
            let mut cps = ControlPointSet {
                points: pts,
                lane_id,
                line_type: LineType::from_index((attribute - 1) as u8)?,
            };
            cps.normalize()?;
            if seen.insert(lane_id, ()).is_some() {
                return Err(Error::Validation(format!("duplicate lane_id {lane_id}")));
            }
            lanes.push(cps);
        }
        Ok((frame, lanes))
    }
}

// ---------------------------------------------------------------------------
// Polynomial fit
// ---------------------------------------------------------------------------

/// Solve a small dense linear system by Gaussian elimination with partial
/// pivoting. Errors when a pivot collapses (rank-deficient system).
#[allow(clippy::needless_range_loop)]
fn solve_linear(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Result<[f64; 4]> {
    let scale = a
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-30);
    for col in 0..4 {
        let (pivot_row, pivot) = (col..4)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        if pivot < 1e-10 * scale {
            return Err(Error::Degenerate(
                "rank-deficient cubic fit (points do not span 4 distinct rows)".into(),
            ));
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for col in (0..4).rev() {
        let mut s = b[col];
        for c in col + 1..4 {
            s -= a[col][c] * x[c];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

/// Fit an unweighted least-squares cubic `x(y)` through a point group.
///
/// The fit runs on centered and scaled `y` for conditioning, then the
/// coefficients are expanded back to raw pixel coordinates.
pub fn fit_lane_polynomial(pts: &ControlPointSet) -> Result<LanePolynomial> {
    if pts.points.len() < 4 {
        return Err(Error::Validation(format!(
            "cubic fit needs at least 4 points, got {}",
            pts.points.len()
        )));
    }
    let ys: Vec<f64> = pts.points.iter().map(|p| p.1).collect();
    let xs: Vec<f64> = pts.points.iter().map(|p| p.0).collect();
    let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mid = 0.5 * (y_min + y_max);
    let half_span = 0.5 * (y_max - y_min);
    if half_span <= 0.0 {
        return Err(Error::Degenerate(
            "all points share one row; cubic fit is singular".into(),
        ));
    }

    // Normal equations in u = (y - mid) / half_span.
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for (&x, &y) in xs.iter().zip(&ys) {
        let u = (y - mid) / half_span;
        let basis = [1.0, u, u * u, u * u * u];
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += basis[i] * basis[j];
            }
            atb[i] += basis[i] * x;
        }
    }
    let b = solve_linear(ata, atb)?;

    // Expand sum_k b_k ((y - mid)/s)^k into raw-y coefficients using the
    // binomial theorem.
    let s = half_span;
    let mut coeffs = [0.0f64; 4];
    let binom: [[f64; 4]; 4] = [
        [1.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0],
        [1.0, 2.0, 1.0, 0.0],
        [1.0, 3.0, 3.0, 1.0],
    ];
    for (k, &bk) in b.iter().enumerate() {
        let scale = bk / s.powi(k as i32);
        for (j, coeff) in coeffs.iter_mut().enumerate().take(k + 1) {
            *coeff += scale * binom[k][j] * (-mid).powi((k - j) as i32);
        }
    }
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Degenerate(
            "cubic fit produced non-finite coefficients".into(),
        ));
    }
    Ok(LanePolynomial {
        coeffs,
        y_range: (y_min, y_max),
    })
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

/// Lane region width in pixels for a frame of the given height: 30 px at
/// 1080 rows, scaled proportionally and rounded to the nearest even integer,
/// never below 2.
pub fn lane_width_px(frame_height: usize) -> usize {
    let half = (30.0 * frame_height as f64 / 1080.0 / 2.0).round().max(1.0);
    2 * half as usize
}

/// Paint a fitted lane into an existing mask. Rows are limited to the
/// polynomial's `y_range`; within a row the lane covers `lane_width_px`
/// columns centered on the curve, clipped at the frame edge. Painted pixels
/// overwrite whatever was there.
pub fn paint_lane(mask: &mut InstanceMaskFrame, poly: &LanePolynomial, label: u8) -> Result<()> {
    if label == 0 || label > MAX_LANE_ID {
        return Err(Error::Validation(format!(
            "label {label} outside 1..={MAX_LANE_ID}"
        )));
    }
    let (h, w) = mask.labels.dim();
    let width = lane_width_px(h) as isize;
    let y_lo = poly.y_range.0.ceil().max(0.0) as isize;
    let y_hi = poly.y_range.1.floor().min(h as f64 - 1.0) as isize;
    for y in y_lo..=y_hi {
        let xc = poly.eval(y as f64);
        if !xc.is_finite() {
            continue;
        }
        let x_left = (xc - width as f64 / 2.0).round() as isize;
        for x in x_left..x_left + width {
            if x >= 0 && x < w as isize {
                mask.labels[[y as usize, x as usize]] = label;
            }
        }
    }
    Ok(())
}

/// Rasterize one lane into a fresh mask of the given `(width, height)`.
pub fn rasterize_lane(
    poly: &LanePolynomial,
    label: u8,
    frame_size: (usize, usize),
) -> Result<InstanceMaskFrame> {
    let (w, h) = frame_size;
    if w == 0 || h == 0 {
        return Err(Error::Validation("frame size must be positive".into()));
    }
    let mut mask = InstanceMaskFrame::zeros(w, h);
    paint_lane(&mut mask, poly, label)?;
    Ok(mask)
}

/// Build one mask per frame from parsed annotations. Frames with no
/// annotated lanes (crossroads) yield all-zero masks. Lanes are painted in
/// ascending `lane_id` order, so on overlap the higher label wins.
pub fn frames_to_instance_masks(
    annotations: &[(usize, Vec<ControlPointSet>)],
    frame_size: (usize, usize),
) -> Result<Vec<InstanceMaskFrame>> {
    let (w, h) = frame_size;
    let n_frames = annotations.iter().map(|(i, _)| i + 1).max().unwrap_or(0);
    let mut masks: Vec<InstanceMaskFrame> = (0..n_frames)
        .map(|_| InstanceMaskFrame::zeros(w, h))
        .collect();
    for (frame_idx, lanes) in annotations {
        let mut ordered: Vec<&ControlPointSet> = lanes.iter().collect();
        ordered.sort_by_key(|l| l.lane_id);
        for lane in ordered {
            let poly = fit_lane_polynomial(lane)
                .map_err(|e| Error::Degenerate(format!("frame {frame_idx}: {e}")))?;
            paint_lane(&mut masks[*frame_idx], &poly, lane.lane_id)
                .map_err(|e| Error::Validation(format!("frame {frame_idx}: {e}")))?;
        }
    }
    Ok(masks)
}

// ---------------------------------------------------------------------------
// Mask PNG i/o
// ---------------------------------------------------------------------------

/// Write a mask as single-channel 8-bit PNG, pixel value = instance label.
pub fn write_mask_png(mask: &InstanceMaskFrame, path: &Path) -> Result<()> {
    let (h, w) = mask.labels.dim();
    let buf: Vec<u8> = mask.labels.iter().copied().collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("mask buffer size matches dimensions");
    img.save(path)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<InstanceMaskFrame> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = Array2::from_shape_vec((h, w), img.into_raw())
        .map_err(|e| Error::Shape(format!("mask decode: {e}")))?;
    Ok(InstanceMaskFrame { labels })
}

// ---------------------------------------------------------------------------
// Dataset statistics
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct VideoMeta {
    #[serde(default)]
    scenarios: Vec<String>,
}

/// Scan a dataset tree (`root/<video>/anno/*.json`, or the VIL-100 release
/// layout `root/Json/<video>/*.json`) and histogram lanes per frame,
/// line-types, and scenarios.
pub fn compute_dataset_stats(root: &Path) -> Result<DatasetStats> {
    if !root.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset root {} does not exist", root.display()),
        )));
    }
    let vil100_json = root.join("Json");
    let video_dirs: Vec<std::path::PathBuf> = if vil100_json.is_dir() {
        list_dirs(&vil100_json)?
    } else {
        list_dirs(root)?
    };

    let mut stats = DatasetStats::default();
    for video_dir in &video_dirs {
        let anno_dir = if vil100_json.is_dir() {
            video_dir.clone()
        } else {
            video_dir.join("anno")
        };
        if !anno_dir.is_dir() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("missing annotation directory {}", anno_dir.display()),
            )));
        }
        stats.n_videos += 1;
        let mut files: Vec<_> = std::fs::read_dir(&anno_dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        files.sort();
        for file in files {
            for (_, lanes) in parse_annotation_file(&file)? {
                stats.n_frames += 1;
                let n = lanes.len().min(8);
                stats.frames_per_lane_count[n] += 1;
                for lane in &lanes {
                    stats.line_type_counts[lane.line_type.index()] += 1;
                }
            }
        }
        let meta_path = video_dir.join("meta.json");
        if let Ok(text) = std::fs::read_to_string(&meta_path) {
            let meta: VideoMeta = serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", meta_path.display())))?;
            for s in meta.scenarios {
                if let Some(i) = SCENARIOS.iter().position(|&name| name == s) {
                    stats.scenario_counts[i] += 1;
                }
            }
        }
    }
    Ok(stats)
}

fn list_dirs(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cps(points: &[(f64, f64)], lane_id: u8) -> ControlPointSet {
        ControlPointSet {
            points: points.to_vec(),
            lane_id,
            line_type: LineType::SingleWhiteSolid,
        }
    }

    /// Independent normal-equations solve on raw (unscaled) coordinates.
    /// Deliberately separate from the library path, which fits in centered
    /// coordinates.
    #[allow(clippy::needless_range_loop)]
    fn oracle_fit(points: &[(f64, f64)]) -> [f64; 4] {
        let mut ata = [[0.0f64; 4]; 4];
        let mut atb = [0.0f64; 4];
        for &(x, y) in points {
            let basis = [1.0, y, y * y, y * y * y];
            for i in 0..4 {
                for j in 0..4 {
                    ata[i][j] += basis[i] * basis[j];
                }
                atb[i] += basis[i] * x;
            }
        }
        let mut a = ata;
        let mut b = atb;
        for col in 0..4 {
            let piv = (col..4)
                .max_by(|&r, &s| a[r][col].abs().partial_cmp(&a[s][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for r in col + 1..4 {
                let f = a[r][col] / a[col][col];
                for c in col..4 {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = [0.0; 4];
        for col in (0..4).rev() {
            let mut s = b[col];
            for c in col + 1..4 {
                s -= a[col][c] * x[c];
            }
            x[col] = s / a[col][col];
        }
        x
    }

    #[test]
    fn fit_recovers_straight_line() {
        let pts: Vec<(f64, f64)> = (0..6)
            .map(|i| {
                let y = 10.0 + 20.0 * i as f64;
                (2.0 + 0.5 * y, y)
            })
            .collect();
        let poly = fit_lane_polynomial(&cps(&pts, 1)).unwrap();
        let expect = [2.0, 0.5, 0.0, 0.0];
        for (a, e) in poly.coeffs.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-9, "{:?}", poly.coeffs);
        }
        assert_eq!(poly.y_range, (10.0, 110.0));
    }

    #[test]
    fn fit_matches_normal_equation_oracle_on_cubic() {
        let truth = |y: f64| 1.0 + y - 0.01 * y * y + 0.0001 * y * y * y;
        let pts: Vec<(f64, f64)> = (0..10)
            .map(|i| {
                let y = 5.0 + 9.0 * i as f64;
                (truth(y), y)
            })
            .collect();
        let poly = fit_lane_polynomial(&cps(&pts, 1)).unwrap();
        let oracle = oracle_fit(&pts);
        for i in 0..=81 {
            let y = 5.0 + i as f64;
            assert!((poly.eval(y) - truth(y)).abs() < 1e-6, "y={y}");
            let ox = ((oracle[3] * y + oracle[2]) * y + oracle[1]) * y + oracle[0];
            assert!(
                (poly.eval(y) - ox).abs() < 1e-5,
                "y={y}: {} vs oracle {}",
                poly.eval(y),
                ox
            );
        }
    }

    #[test]
    fn fit_rejects_shared_row() {
        let pts = [(1.0, 7.0), (2.0, 7.0), (3.0, 7.0), (4.0, 7.0)];
        let err = fit_lane_polynomial(&cps(&pts, 1)).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn fit_rejects_three_distinct_rows() {
        // Four points but only three distinct rows: rank-3 system.
        let pts = [(1.0, 0.0), (2.0, 1.0), (3.0, 2.0), (4.0, 2.0)];
        let err = fit_lane_polynomial(&cps(&pts, 1)).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    proptest! {
        /// Fit-then-evaluate round trip: residual at the inputs stays below
        /// 1e-6 for cubics with coefficients up to 10 in magnitude.
        #[test]
        fn fit_round_trip(
            a0 in -10.0..10.0f64,
            a1 in -10.0..10.0f64,
            a2 in -10.0..10.0f64,
            a3 in -10.0..10.0f64,
            y0 in 0.0..40.0f64,
            span in 8.0..60.0f64,
            n in 5usize..12,
        ) {
            let pts: Vec<(f64, f64)> = (0..n).map(|i| {
                let y = y0 + span * i as f64 / (n - 1) as f64;
                (((a3 * y + a2) * y + a1) * y + a0, y)
            }).collect();
            let poly = fit_lane_polynomial(&cps(&pts, 1)).unwrap();
            for &(x, y) in &pts {
                prop_assert!((poly.eval(y) - x).abs() < 1e-6);
            }
        }

        /// Composed masks only ever contain 0 and declared labels.
        #[test]
        fn mask_label_set_is_bounded(label in 1u8..=8, xc in 5.0..120.0f64) {
            let poly = LanePolynomial { coeffs: [xc, 0.0, 0.0, 0.0], y_range: (0.0, 63.0) };
            let mask = rasterize_lane(&poly, label, (128, 64)).unwrap();
            for &v in mask.labels.iter() {
                prop_assert!(v == 0 || v == label);
            }
        }
    }

    #[test]
    fn width_rule() {
        assert_eq!(lane_width_px(1080), 30);
        assert_eq!(lane_width_px(368), 10);
        assert_eq!(lane_width_px(64), 2);
        assert_eq!(lane_width_px(720), 20);
    }

    #[test]
    fn rasterize_vertical_line_full_width() {
        // Vertical lane at x = 100 on 1920x1080: every row in range carries
        // a 30 px run centered on the curve.
        let poly = LanePolynomial {
            coeffs: [100.0, 0.0, 0.0, 0.0],
            y_range: (100.0, 900.0),
        };
        let mask = rasterize_lane(&poly, 3, (1920, 1080)).unwrap();
        for y in [100usize, 350, 900] {
            let run: Vec<usize> = (0..1920).filter(|&x| mask.labels[[y, x]] == 3).collect();
            assert_eq!(run.len(), 30, "row {y}");
            assert_eq!(run[0], 85);
            assert_eq!(*run.last().unwrap(), 114);
        }
        assert_eq!(mask.labels.row(99).iter().filter(|&&v| v != 0).count(), 0);
        assert_eq!(mask.labels.row(901).iter().filter(|&&v| v != 0).count(), 0);
    }

    #[test]
    fn rasterize_proportional_width_on_small_frame() {
        let poly = LanePolynomial {
            coeffs: [100.0, 0.0, 0.0, 0.0],
            y_range: (0.0, 367.0),
        };
        let mask = rasterize_lane(&poly, 1, (640, 368)).unwrap();
        let per_row = mask.labels.row(50).iter().filter(|&&v| v == 1).count();
        assert_eq!(per_row, 10);
        assert_eq!(mask.count_label(1), 10 * 368);
    }

    #[test]
    fn rasterize_empty_row_range() {
        let poly = LanePolynomial {
            coeffs: [10.0, 0.0, 0.0, 0.0],
            y_range: (5.2, 5.8),
        };
        let mask = rasterize_lane(&poly, 1, (64, 32)).unwrap();
        assert_eq!(mask.count_label(1), 0);
    }

    #[test]
    fn rasterize_rejects_bad_label() {
        let poly = LanePolynomial {
            coeffs: [10.0, 0.0, 0.0, 0.0],
            y_range: (0.0, 31.0),
        };
        assert!(matches!(
            rasterize_lane(&poly, 0, (64, 32)),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            rasterize_lane(&poly, 9, (64, 32)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn near_vertical_run_length_property() {
        // Slope |dx/dy| < 0.2: per-row run length equals the nominal width
        // within one pixel.
        let poly = LanePolynomial {
            coeffs: [60.0, 0.15, 0.0, 0.0],
            y_range: (0.0, 199.0),
        };
        let mask = rasterize_lane(&poly, 2, (256, 200)).unwrap();
        let w = lane_width_px(200) as isize;
        for y in 0..200usize {
            let run = mask.labels.row(y).iter().filter(|&&v| v == 2).count() as isize;
            assert!((run - w).abs() <= 1, "row {y}: run {run} vs width {w}");
        }
    }

    #[test]
    fn masks_compose_with_last_writer_overlap() {
        // Two overlapping near-vertical lanes; painted ascending, lane 2
        // owns the overlap.
        let mk = |x0: f64, id: u8| ControlPointSet {
            points: (0..5)
                .map(|i| (x0 + 0.01 * i as f64, 10.0 + 10.0 * i as f64))
                .collect(),
            lane_id: id,
            line_type: LineType::SingleWhiteDotted,
        };
        let annotations = vec![(0usize, vec![mk(40.0, 2), mk(41.0, 1)])];
        let masks = frames_to_instance_masks(&annotations, (128, 64)).unwrap();
        assert_eq!(masks.len(), 1);
        assert_eq!(masks[0].instance_labels(), vec![1, 2]);
        assert_eq!(masks[0].labels[[20, 40]], 2);
        let n1 = masks[0].count_label(1);
        let n2 = masks[0].count_label(2);
        assert!(
            n2 > n1,
            "lane 2 keeps its full band ({n2}) over lane 1 ({n1})"
        );
    }

    #[test]
    fn unannotated_middle_frame_yields_empty_mask() {
        let lane = cps(&[(30.0, 5.0), (30.5, 15.0), (31.0, 25.0), (31.5, 35.0)], 1);
        let annotations = vec![(0usize, vec![lane.clone()]), (2usize, vec![lane])];
        let masks = frames_to_instance_masks(&annotations, (64, 48)).unwrap();
        assert_eq!(masks.len(), 3);
        assert!(masks[0].count_label(1) > 0);
        assert_eq!(masks[1].instance_labels(), Vec::<u8>::new());
        assert!(masks[2].count_label(1) > 0);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let lane = cps(
            &[
                (12.0, 3.0),
                (13.0, 9.0),
                (14.0, 15.0),
                (15.0, 21.0),
                (16.0, 27.0),
            ],
            1,
        );
        let json = annotation_to_json(0, std::slice::from_ref(&lane));
        let path = dir.path().join("00000.json");
        std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
        let parsed = parse_annotation_file(&path).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].0, 0);
        assert_eq!(parsed[0].1, vec![lane]);

        // Duplicate lane ids must be rejected.
        let dup = serde_json::json!({
            "frame": 0,
            "lanes": [
                {"id": 2, "line_type": 0, "points": [[1.0,1.0],[2.0,2.0],[3.0,3.0],[4.0,4.0]]},
                {"id": 2, "line_type": 1, "points": [[5.0,1.0],[6.0,2.0],[7.0,3.0],[8.0,4.0]]}
            ]
        });
        let dup_path = dir.path().join("dup.json");
        std::fs::write(&dup_path, dup.to_string()).unwrap();
        assert!(matches!(
            parse_annotation_file(&dup_path),
            Err(Error::Validation(_))
        ));

        // Malformed schema names the offending key.
        let bad = serde_json::json!({"frame": 0, "lanes": [{"id": 1, "points": []}]});
        let bad_path = dir.path().join("bad.json");
        std::fs::write(&bad_path, bad.to_string()).unwrap();
        let err = parse_annotation_file(&bad_path).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("line_type"),
            "error should name the missing key: {msg}"
        );
    }

    #[test]
    fn parse_six_lane_frame() {
        let dir = tempfile::tempdir().unwrap();
        let lanes: Vec<ControlPointSet> = (1..=6u8)
            .map(|id| {
                cps(
                    &[
                        (10.0 * id as f64, 0.0),
                        (10.0 * id as f64, 10.0),
                        (10.0 * id as f64, 20.0),
                        (10.0 * id as f64, 30.0),
                    ],
                    id,
                )
            })
            .collect();
        let json = annotation_to_json(4, &lanes);
        let path = dir.path().join("00004.json");
        std::fs::write(&path, json.to_string()).unwrap();
        let parsed = parse_annotation_file(&path).unwrap();
        assert_eq!(parsed[0].1.len(), 6);
        assert_eq!(parsed[0].1.iter().map(|l| l.lane_id).max(), Some(6));
    }

    #[test]
    fn vil100_schema_translates() {
        let value = serde_json::json!({
            "info": {"width": 1920, "height": 1080, "frame": 7},
            "annotations": {"lane": [
                {"lane_id": 1, "attribute": 4, "occlusion": 0,
                 "points": [[100.0, 500.0], [102.0, 600.0], [104.0, 700.0], [106.0, 800.0]]}
            ]}
        });
        let (frame, lanes) = vil100::import_frame(&value).unwrap();
        assert_eq!(frame, 7);
        assert_eq!(lanes.len(), 1);
        assert_eq!(lanes[0].lane_id, 1);
        assert_eq!(lanes[0].line_type, LineType::SingleYellowDotted);
    }

    #[test]
    fn stats_on_synthetic_tree() {
        let dir = tempfile::tempdir().unwrap();
        let video = dir.path().join("clip0");
        std::fs::create_dir_all(video.join("anno")).unwrap();
        std::fs::create_dir_all(video.join("frames")).unwrap();
        for f in 0..10usize {
            let lanes: Vec<ControlPointSet> = (1..=2u8)
                .map(|id| {
                    cps(
                        &[
                            (10.0 * id as f64, 0.0),
                            (10.0 * id as f64, 8.0),
                            (10.0 * id as f64, 16.0),
                            (10.0 * id as f64, 24.0),
                        ],
                        id,
                    )
                })
                .collect();
            let json = annotation_to_json(f, &lanes);
            std::fs::write(
                video.join("anno").join(format!("{f:05}.json")),
                json.to_string(),
            )
            .unwrap();
        }
        std::fs::write(
            video.join("meta.json"),
            serde_json::json!({"scenarios": ["haze"]}).to_string(),
        )
        .unwrap();
        let stats = compute_dataset_stats(dir.path()).unwrap();
        assert_eq!(stats.n_videos, 1);
        assert_eq!(stats.n_frames, 10);
        assert_eq!(stats.frames_per_lane_count[2], 10);
        assert_eq!(
            stats.frames_per_lane_count.iter().sum::<usize>(),
            stats.n_frames
        );
        assert_eq!(
            stats.line_type_counts[LineType::SingleWhiteSolid.index()],
            20
        );
        assert_eq!(
            stats.scenario_counts[SCENARIOS.iter().position(|&s| s == "haze").unwrap()],
            1
        );
    }

    #[test]
    fn stats_on_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let stats = compute_dataset_stats(dir.path()).unwrap();
        assert_eq!(stats, DatasetStats::default());
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let poly = LanePolynomial {
            coeffs: [30.0, 0.1, 0.0, 0.0],
            y_range: (0.0, 47.0),
        };
        let mask = rasterize_lane(&poly, 5, (64, 48)).unwrap();
        let path = dir.path().join("m.png");
        write_mask_png(&mask, &path).unwrap();
        let back = read_mask_png(&path).unwrap();
        assert_eq!(back, mask);
    }
}
