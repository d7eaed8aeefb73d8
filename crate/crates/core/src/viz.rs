//! Mask overlays and simple score plots, written as image files.

use crate::annotation::InstanceMaskFrame;
use crate::error::{Error, Result};
use ndarray::Array3;
use std::path::Path;

/// Stable palette for the eight position labels.
pub fn label_color(label: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [230, 60, 60],  // 1: red
        [60, 200, 60],  // 2: green
        [70, 110, 245], // 3: blue
        [235, 220, 60], // 4: yellow
        [225, 70, 225], // 5: magenta
        [70, 220, 220], // 6: cyan
        [245, 150, 50], // 7: orange
        [150, 80, 220], // 8: purple
    ];
    PALETTE[((label.max(1) - 1) % 8) as usize]
}

/// Blend instance colors over an RGB frame. `alpha` is the mask opacity.
pub fn overlay_mask(
    frame: &Array3<f64>,
    mask: &InstanceMaskFrame,
    alpha: f64,
) -> Result<image::RgbImage> {
    let (c, h, w) = frame.dim();
    if c != 3 {
        return Err(Error::Shape("overlay expects an RGB frame".into()));
    }
    if mask.labels.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not fit frame {h}x{w}",
            mask.labels.dim()
        )));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let label = mask.labels[[y, x]];
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let base = frame[[ch, y, x]].clamp(0.0, 1.0) * 255.0;
                px[ch] = if label == 0 {
                    base.round() as u8
                } else {
                    let tint = label_color(label)[ch] as f64;
                    (base * (1.0 - alpha) + tint * alpha).round() as u8
                };
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

pub fn write_overlay(
    frame: &Array3<f64>,
    mask: &InstanceMaskFrame,
    alpha: f64,
    path: &Path,
) -> Result<()> {
    overlay_mask(frame, mask, alpha)?.save(path)?;
    Ok(())
}

/// Draw named series as polylines into a PNG. Values are clamped to
/// `[0, 1]`; the frame index runs along x. Axes are plain lines (no text),
/// series colors follow [`label_color`] order.
pub fn plot_series(series: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    const W: u32 = 640;
    const H: u32 = 320;
    const M: u32 = 24; // margin
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    // Axes.
    for x in M..W - M {
        img.put_pixel(x, H - M, image::Rgb([0, 0, 0]));
    }
    for y in M..H - M {
        img.put_pixel(M, y, image::Rgb([0, 0, 0]));
    }
    // Gridline at 0.5.
    let y_half = M + (H - 2 * M) / 2;
    for x in (M..W - M).step_by(4) {
        img.put_pixel(x, y_half, image::Rgb([210, 210, 210]));
    }

    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    if max_len == 0 {
        img.save(path)?;
        return Ok(());
    }
    let to_px = |i: usize, v: f64| {
        let fx = if max_len <= 1 {
            0.0
        } else {
            i as f64 / (max_len - 1) as f64
        };
        let x = M as f64 + fx * (W - 2 * M) as f64;
        let y = (H - M) as f64 - v.clamp(0.0, 1.0) * (H - 2 * M) as f64;
        (x as i64, y as i64)
    };
    for (si, (_, values)) in series.iter().enumerate() {
        let color = image::Rgb(label_color(si as u8 + 1));
        for pair in values
            .windows(2)
            .enumerate()
            .map(|(i, w)| (to_px(i, w[0]), to_px(i + 1, w[1])))
        {
            draw_line(&mut img, pair.0, pair.1, color);
        }
        if values.len() == 1 {
            let (x, y) = to_px(0, values[0]);
            put_safe(&mut img, x, y, color);
        }
    }
    img.save(path)?;
    Ok(())
}

fn put_safe(img: &mut image::RgbImage, x: i64, y: i64, color: image::Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Bresenham line.
fn draw_line(img: &mut image::RgbImage, from: (i64, i64), to: (i64, i64), color: image::Rgb<u8>) {
    let (mut x0, mut y0) = from;
    let (x1, y1) = to;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put_safe(img, x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}
