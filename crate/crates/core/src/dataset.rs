//! Clips, synthetic scene generation, and memory-frame selection.
//!
//! A [`VideoClip`] is a sequence of RGB frames with per-frame instance
//! masks. Clips either come from disk (canonical layout
//! `root/<video>/frames/%05d.png` + `root/<video>/anno/%05d.json`, optional
//! `masks/%05d.png` cache) or from the deterministic synthetic generator,
//! which renders drifting cubic lanes and produces its ground truth through
//! the same fit-and-rasterize path used for real annotations.
//!
//! Memory selection implements the detector's two memories: the local
//! memory takes the frames immediately before the query in original order;
//! the global memory takes the entries immediately before the query's
//! position in a shuffled index sequence, which removes temporal order.

use crate::annotation::{
    self, frames_to_instance_masks, ControlPointSet, InstanceMaskFrame, LineType,
};
use crate::error::{Error, Result};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Nominal capture rate of the corpus this pipeline models.
pub const NOMINAL_FPS: f64 = 10.0;

/// A video clip: RGB frames in `[0, 1]` stored `(3, H, W)`, one instance
/// mask per frame, and (for synthetic clips) the generating control points.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub frames: Vec<Array3<f64>>,
    pub masks: Vec<InstanceMaskFrame>,
    /// Per-frame control points when known (synthetic clips and clips loaded
    /// from annotation files).
    pub annotations: Option<Vec<(usize, Vec<ControlPointSet>)>>,
    pub fps: f64,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame size as `(width, height)`.
    pub fn frame_size(&self) -> (usize, usize) {
        let (_, h, w) = self.frames[0].dim();
        (w, h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.masks.len() {
            return Err(Error::Integrity(format!(
                "{} frames vs {} masks",
                self.frames.len(),
                self.masks.len()
            )));
        }
        if self.frames.is_empty() {
            return Err(Error::Integrity("empty clip".into()));
        }
        let dim = self.frames[0].dim();
        for (i, f) in self.frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(Error::Integrity(format!("frame {i} size differs")));
            }
        }
        for (i, m) in self.masks.iter().enumerate() {
            if (m.height(), m.width()) != (dim.1, dim.2) {
                return Err(Error::Integrity(format!(
                    "mask {i} size differs from frames"
                )));
            }
        }
        Ok(())
    }
}

/// Memory frames chosen for one query frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemorySelection {
    pub query_index: usize,
    /// Original-order indices immediately before the query.
    pub local_indices: Vec<usize>,
    /// Shuffled-sequence entries immediately before the query's position.
    pub global_indices: Vec<usize>,
    pub shuffle_permutation: Vec<usize>,
    pub memory_size: usize,
}

/// Configuration of the deterministic synthetic scene generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSceneConfig {
    pub seed: u64,
    /// Number of lanes, 1..=6 (the corpus maximum).
    pub n_lanes: usize,
    /// Range of the quadratic bend applied to lanes, in px over the frame.
    pub curvature: (f64, f64),
    /// Horizontal distance between adjacent lane slots, px.
    pub lane_spacing: f64,
    /// Amplitude of uniform image noise in `[0, 1]`.
    pub noise: f64,
    /// Number of occluding boxes drawn over lanes (image only, masks keep
    /// the full lane).
    pub occluders: usize,
    pub width: usize,
    pub height: usize,
    /// Clip length in frames.
    pub length: usize,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_lanes: 2,
            curvature: (-6.0, 6.0),
            lane_spacing: 28.0,
            noise: 0.02,
            occluders: 0,
            width: 128,
            height: 64,
            length: 20,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lanes == 0 || self.n_lanes > 6 {
            return Err(Error::Config(format!(
                "n_lanes {} outside 1..=6 (corpus maximum is 6)",
                self.n_lanes
            )));
        }
        if self.length == 0 || self.width < 16 || self.height < 16 {
            return Err(Error::Config(
                "clip must have at least one 16x16 frame".into(),
            ));
        }
        if self.curvature.0 > self.curvature.1 {
            return Err(Error::Config("curvature range is inverted".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Ego-relative horizontal offset of a lane slot. Label `2i-1` sits left of
/// center, `2i` right, at `(i - 1/2) * spacing`.
fn slot_offset(label: u8, spacing: f64) -> f64 {
    let i = label.div_ceil(2) as f64;
    let side = if label % 2 == 1 { -1.0 } else { 1.0 };
    side * (i - 0.5) * spacing
}

struct LaneTrack {
    label: u8,
    line_type: LineType,
    base_x: f64,
    drift_amp: f64,
    drift_period: f64,
    drift_phase: f64,
    bend: f64,
    bend_rate: f64,
}

/// Render a deterministic synthetic clip.
///
/// Lane geometry, image noise, and occluder placement draw from three
/// independent seeded streams, so a config that differs only in `occluders`
/// produces pixel-identical imagery outside the occluded boxes.
pub fn generate_synthetic_clip(cfg: &SyntheticSceneConfig) -> Result<VideoClip> {
    cfg.validate()?;
    let (w, h, t_len) = (cfg.width, cfg.height, cfg.length);
    let mut rng_geom = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng_noise = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut rng_occ = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a09_e667_f3bc_c908);

    let y_top = (0.15 * h as f64).floor();
    let center = w as f64 / 2.0;
    let tracks: Vec<LaneTrack> = (1..=cfg.n_lanes as u8)
        .map(|label| LaneTrack {
            label,
            line_type: LineType::from_index(rng_geom.random_range(0..LineType::COUNT as u8))
                .expect("in range"),
            base_x: center + slot_offset(label, cfg.lane_spacing),
            drift_amp: rng_geom.random_range(1.0..(0.12 * w as f64).max(1.5)),
            drift_period: rng_geom.random_range(12.0..30.0),
            drift_phase: rng_geom.random_range(0.0..std::f64::consts::TAU),
            bend: rng_geom.random_range(cfg.curvature.0..=cfg.curvature.1),
            bend_rate: rng_geom.random_range(-0.05..0.05),
        })
        .collect();

    // Control points: 8 rows per lane spanning [y_top, h-1].
    let n_rows = 8;
    let mut annotations: Vec<(usize, Vec<ControlPointSet>)> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut lanes = Vec::with_capacity(tracks.len());
        for track in &tracks {
            let drift = track.drift_amp
                * (std::f64::consts::TAU * t as f64 / track.drift_period + track.drift_phase).sin();
            let bend = track.bend * (1.0 + track.bend_rate * t as f64);
            let points: Vec<(f64, f64)> = (0..n_rows)
                .map(|r| {
                    let y = y_top + (h as f64 - 1.0 - y_top) * r as f64 / (n_rows - 1) as f64;
                    // v runs 0 at the bottom of the frame to 1 at the lane top,
                    // so the bend grows toward the horizon.
                    let v = (h as f64 - 1.0 - y) / (h as f64 - 1.0 - y_top);
                    let x = track.base_x + drift + bend * v * v;
                    (x.clamp(1.0, w as f64 - 2.0), y)
                })
                .collect();
            lanes.push(ControlPointSet {
                points,
                lane_id: track.label,
                line_type: track.line_type,
            });
        }
        annotations.push((t, lanes));
    }

    let masks = frames_to_instance_masks(&annotations, (w, h))?;

    // Occluders: boxes parked over a lane for a few consecutive frames.
    struct Occluder {
        t0: usize,
        t1: usize,
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        shade: f64,
    }
    let occ_h = ((h as f64 - y_top) * 0.45).round() as usize;
    let occ_w = (w / 6).max(4);
    let occluders: Vec<Occluder> = (0..cfg.occluders)
        .map(|_| {
            let track = &tracks[rng_occ.random_range(0..tracks.len())];
            let t0 = rng_occ.random_range(0..t_len);
            let dur = rng_occ.random_range(2..=4.min(t_len));
            let yc = rng_occ.random_range(y_top as usize + occ_h / 2..h - occ_h / 2);
            let xc = (track.base_x + rng_occ.random_range(-2.0..2.0)) as usize;
            Occluder {
                t0,
                t1: (t0 + dur).min(t_len),
                x0: xc.saturating_sub(occ_w / 2).min(w - occ_w),
                y0: yc - occ_h / 2,
                w: occ_w,
                h: occ_h,
                shade: rng_occ.random_range(0.35..0.55),
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(t_len);
    #[allow(clippy::needless_range_loop)]
    for t in 0..t_len {
        let mut img = Array3::<f64>::zeros((3, h, w));
        // Road: dark gradient brightening toward the bottom of the frame.
        for y in 0..h {
            let base = 0.18 + 0.12 * y as f64 / h as f64;
            for x in 0..w {
                img[[0, y, x]] = base;
                img[[1, y, x]] = base;
                img[[2, y, x]] = base + 0.02;
            }
        }
        // Lane paint from the ground-truth mask; dotted types skip row bands.
        for track in &tracks {
            let (r, g, b) = line_color(track.line_type);
            let dashed = is_dashed(track.line_type);
            for y in 0..h {
                if dashed && (y / 4) % 2 == 1 {
                    continue;
                }
                for x in 0..w {
                    if masks[t].labels[[y, x]] == track.label {
                        img[[0, y, x]] = r;
                        img[[1, y, x]] = g;
                        img[[2, y, x]] = b;
                    }
                }
            }
        }
        for occ in &occluders {
            if t >= occ.t0 && t < occ.t1 {
                for y in occ.y0..(occ.y0 + occ.h).min(h) {
                    for x in occ.x0..(occ.x0 + occ.w).min(w) {
                        img[[0, y, x]] = occ.shade;
                        img[[1, y, x]] = occ.shade * 0.95;
                        img[[2, y, x]] = occ.shade * 0.9;
                    }
                }
            }
        }
        if cfg.noise > 0.0 {
            for v in img.iter_mut() {
                *v = (*v + rng_noise.random_range(-cfg.noise..cfg.noise)).clamp(0.0, 1.0);
            }
        }
        frames.push(img);
    }

    let clip = VideoClip {
        frames,
        masks,
        annotations: Some(annotations),
        fps: NOMINAL_FPS,
    };
    clip.validate()?;
    Ok(clip)
}

fn line_color(lt: LineType) -> (f64, f64, f64) {
    use LineType::*;
    match lt {
        SingleWhiteSolid
        | SingleWhiteDotted
        | DoubleWhiteSolid
        | DoubleWhiteSolidDotted
        | DoubleWhiteDottedSolid => (0.92, 0.92, 0.9),
        SingleYellowSolid | SingleYellowDotted | DoubleYellowSolid | DoubleYellowDotted => {
            (0.9, 0.8, 0.3)
        }
        DoubleSolidWhiteYellow => (0.91, 0.86, 0.6),
    }
}

fn is_dashed(lt: LineType) -> bool {
    use LineType::*;
    matches!(
        lt,
        SingleWhiteDotted | SingleYellowDotted | DoubleYellowDotted
    )
}

// ---------------------------------------------------------------------------
// Memory selection
// ---------------------------------------------------------------------------

/// Uniform random permutation of `0..t_len`, deterministic per seed.
pub fn shuffle_video_index(t_len: usize, seed: u64) -> Result<Vec<usize>> {
    if t_len == 0 {
        return Err(Error::Validation(
            "cannot shuffle an empty index sequence".into(),
        ));
    }
    let mut perm: Vec<usize> = (0..t_len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    Ok(perm)
}

/// Take the last `n` entries of `prefix`, padding at the front by repeating
/// the earliest available entry; `fallback` stands in when the prefix is
/// empty (query at position 0 references itself).
fn pad_take_last(prefix: &[usize], fallback: usize, n: usize) -> Vec<usize> {
    if prefix.is_empty() {
        return vec![fallback; n];
    }
    let take = prefix.len().min(n);
    let tail = &prefix[prefix.len() - take..];
    let mut out = vec![tail[0]; n - take];
    out.extend_from_slice(tail);
    // Padding repeats the earliest element of the window, which for short
    // prefixes is the earliest available frame.
    if prefix.len() < n {
        let earliest = prefix[0];
        for v in out.iter_mut().take(n - prefix.len()) {
            *v = earliest;
        }
    }
    out
}

/// Choose local and global memory frames for query `t`.
///
/// Local memory: the `n` original-order indices immediately before `t`.
/// Global memory: the `n` permutation entries immediately before `t`'s
/// position in the shuffled sequence; these may be temporally *future*
/// frames of the real video, which is the point of the shuffled memory.
/// Queries with fewer than `n` predecessors repeat the earliest available
/// frame (the query itself at the very start).
pub fn select_memory_frames(
    t_len: usize,
    t: usize,
    permutation: &[usize],
    n: usize,
) -> Result<MemorySelection> {
    if t >= t_len {
        return Err(Error::Validation(format!(
            "query index {t} outside clip of length {t_len}"
        )));
    }
    if permutation.len() != t_len {
        return Err(Error::Validation(format!(
            "permutation length {} != clip length {t_len}",
            permutation.len()
        )));
    }
    if n == 0 {
        return Err(Error::Config("memory size must be at least 1".into()));
    }
    let originals: Vec<usize> = (0..t).collect();
    let local_indices = pad_take_last(&originals, t, n);

    let pos = permutation
        .iter()
        .position(|&p| p == t)
        .ok_or_else(|| Error::Validation(format!("index {t} missing from permutation")))?;
    let global_indices = pad_take_last(&permutation[..pos], t, n);

    Ok(MemorySelection {
        query_index: t,
        local_indices,
        global_indices,
        shuffle_permutation: permutation.to_vec(),
        memory_size: n,
    })
}

// ---------------------------------------------------------------------------
// Disk layout
// ---------------------------------------------------------------------------

/// Write an RGB frame in `[0, 1]` as an 8-bit PNG.
pub fn write_frame_png(frame: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = frame.dim();
    if c != 3 {
        return Err(Error::Shape(format!("frame must have 3 channels, got {c}")));
    }
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf[(y * w + x) * 3 + ch] =
                    (frame[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    img.save(path)?;
    Ok(())
}

pub fn read_frame_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out[[ch, y, x]] = raw[(y * w + x) * 3 + ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Write a clip in the canonical dataset layout under `root/<video_id>/`.
pub fn write_clip(root: &Path, video_id: &str, clip: &VideoClip) -> Result<()> {
    clip.validate()?;
    let dir = root.join(video_id);
    let frames_dir = dir.join("frames");
    let anno_dir = dir.join("anno");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&frames_dir)?;
    std::fs::create_dir_all(&anno_dir)?;
    std::fs::create_dir_all(&masks_dir)?;
    for (i, frame) in clip.frames.iter().enumerate() {
        write_frame_png(frame, &frames_dir.join(format!("{i:05}.png")))?;
    }
    for (i, mask) in clip.masks.iter().enumerate() {
        annotation::write_mask_png(mask, &masks_dir.join(format!("{i:05}.png")))?;
    }
    let empty: Vec<ControlPointSet> = Vec::new();
    for i in 0..clip.len() {
        let lanes = clip
            .annotations
            .as_ref()
            .and_then(|a| a.iter().find(|(f, _)| *f == i))
            .map(|(_, l)| l)
            .unwrap_or(&empty);
        let json = annotation::annotation_to_json(i, lanes);
        std::fs::write(
            anno_dir.join(format!("{i:05}.json")),
            serde_json::to_string(&json)?,
        )?;
    }
    Ok(())
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Load a clip from the canonical layout. Masks come from the `masks/`
/// cache when present, otherwise they are rasterized from the annotations on
/// the fly; both paths produce identical masks.
pub fn load_clip(root: &Path, video_id: &str) -> Result<VideoClip> {
    let dir = root.join(video_id);
    let frames_dir = dir.join("frames");
    let anno_dir = dir.join("anno");
    let masks_dir = dir.join("masks");
    if !frames_dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing frames directory {}", frames_dir.display()),
        )));
    }
    let frame_files = sorted_files(&frames_dir, "png")?;
    if frame_files.is_empty() {
        return Err(Error::Integrity(format!("clip {video_id} has no frames")));
    }
    let mut frames = Vec::with_capacity(frame_files.len());
    for f in &frame_files {
        frames.push(read_frame_png(f)?);
    }
    let (_, h, w) = frames[0].dim();

    let mut annotations: Vec<(usize, Vec<ControlPointSet>)> = Vec::new();
    for i in 0..frame_files.len() {
        let anno_path = anno_dir.join(format!("{i:05}.json"));
        if !anno_path.is_file() {
            return Err(Error::Integrity(format!(
                "clip {video_id}: missing annotation for frame {i}"
            )));
        }
        for (frame_idx, lanes) in annotation::parse_annotation_file(&anno_path)? {
            annotations.push((frame_idx, lanes));
        }
    }
    let n_annotated = annotations.iter().map(|(i, _)| i + 1).max().unwrap_or(0);
    if n_annotated > frame_files.len() {
        return Err(Error::Integrity(format!(
            "clip {video_id}: annotations reference frame {} but only {} frames exist",
            n_annotated - 1,
            frame_files.len()
        )));
    }

    let masks = if masks_dir.is_dir() && !sorted_files(&masks_dir, "png")?.is_empty() {
        let mask_files = sorted_files(&masks_dir, "png")?;
        if mask_files.len() != frame_files.len() {
            return Err(Error::Integrity(format!(
                "clip {video_id}: {} cached masks vs {} frames",
                mask_files.len(),
                frame_files.len()
            )));
        }
        let mut masks = Vec::with_capacity(mask_files.len());
        for f in &mask_files {
            masks.push(annotation::read_mask_png(f)?);
        }
        masks
    } else {
        let mut masks = frames_to_instance_masks(&annotations, (w, h))?;
        while masks.len() < frame_files.len() {
            masks.push(InstanceMaskFrame::zeros(w, h));
        }
        masks
    };

    let clip = VideoClip {
        frames,
        masks,
        annotations: Some(annotations),
        fps: NOMINAL_FPS,
    };
    clip.validate()
        .map_err(|e| Error::Integrity(format!("clip {video_id}: {e}")))?;
    Ok(clip)
}

/// Alias kept close to the dataset's name: loads a clip stored in the
/// canonical layout (VIL-100 annotation files are translated transparently).
pub fn load_vil100_clip(root: &Path, video_id: &str) -> Result<VideoClip> {
    load_clip(root, video_id)
}

/// Read a plain-text split list (one video id per line, blanks ignored).
pub fn read_split_file(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_split_file(path: &Path, ids: &[String]) -> Result<()> {
    std::fs::write(path, ids.join("\n") + "\n")?;
    Ok(())
}
