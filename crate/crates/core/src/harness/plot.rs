//! PNG output helpers: grayscale frame dumps and a small line-plot
//! rasterizer for drift curves.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Map a value in [-1, 1] to an 8-bit gray level, clamping outliers.
fn to_gray(v: f64) -> u8 {
    let t = ((v + 1.0) * 0.5).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Write one `[H, W, C]` frame as a grayscale PNG, averaging channels.
pub fn save_frame_png(frame: &Tensor, path: &Path) -> Result<()> {
    let s = frame.shape();
    if s.len() != 3 {
        return Err(Error::invalid("save_frame_png", "expected [H, W, C]"));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let d = frame.data();
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += d[(y * w + x) * c + ch];
            }
            img.put_pixel(x as u32, y as u32, Luma([to_gray(acc / c as f64)]));
        }
    }
    img.save(path).map_err(|e| Error::invalid("save_frame_png", &e.to_string()))
}

/// Write every frame of a `[frames, H, W, C]` clip as `prefix_NNN.png`.
pub fn save_clip_pngs(clip: &Tensor, dir: &Path, prefix: &str) -> Result<usize> {
    let s = clip.shape();
    if s.len() != 4 {
        return Err(Error::invalid("save_clip_pngs", "expected [frames, H, W, C]"));
    }
    std::fs::create_dir_all(dir)?;
    for k in 0..s[0] {
        let frame = clip.narrow(0, k, 1)?.reshape(&[s[1], s[2], s[3]])?;
        save_frame_png(&frame, &dir.join(format!("{prefix}_{k:03}.png")))?;
    }
    Ok(s[0])
}

/// Rasterize labelled curves into a simple line plot PNG. Each curve is a
/// series of y values over an implicit 0..n x axis; gray levels distinguish
/// the curves (darkest first).
pub fn save_line_plot(curves: &[(&str, &[f64])], path: &Path, width: u32, height: u32) -> Result<()> {
    if curves.is_empty() || curves.iter().all(|(_, ys)| ys.is_empty()) {
        return Err(Error::invalid("save_line_plot", "no data to plot"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut max_len = 0usize;
    for (_, ys) in curves {
        for &v in *ys {
            if !v.is_finite() {
                return Err(Error::invalid("save_line_plot", "non-finite value"));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        max_len = max_len.max(ys.len());
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let margin = 8u32;
    let mut img = GrayImage::from_pixel(width, height, Luma([255]));
    // axes
    for x in margin..width - margin {
        img.put_pixel(x, height - margin, Luma([200]));
    }
    for y in margin..height - margin {
        img.put_pixel(margin, y, Luma([200]));
    }
    let plot_w = (width - 2 * margin) as f64;
    let plot_h = (height - 2 * margin) as f64;
    let px_of = |i: usize, n: usize| -> u32 {
        let t = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        margin + (t * (plot_w - 1.0)).round() as u32
    };
    let py_of = |v: f64| -> u32 {
        let t = (v - lo) / (hi - lo);
        height - margin - 1 - (t * (plot_h - 1.0)).round() as u32
    };
    for (ci, (_, ys)) in curves.iter().enumerate() {
        let shade = (ci as u32 * 70).min(180) as u8;
        for i in 1..ys.len() {
            let (x0, y0) = (px_of(i - 1, ys.len()), py_of(ys[i - 1]));
            let (x1, y1) = (px_of(i, ys.len()), py_of(ys[i]));
            draw_line(&mut img, x0, y0, x1, y1, shade);
        }
        if ys.len() == 1 {
            img.put_pixel(px_of(0, 1), py_of(ys[0]), Luma([shade]));
        }
    }
    img.save(path).map_err(|e| Error::invalid("save_line_plot", &e.to_string()))
}

fn draw_line(img: &mut GrayImage, x0: u32, y0: u32, x1: u32, y1: u32, shade: u8) {
    // Bresenham over i64 coordinates
    let (mut x, mut y) = (x0 as i64, y0 as i64);
    let (x1, y1) = (x1 as i64, y1 as i64);
    let dx = (x1 - x).abs();
    let dy = -(y1 - y).abs();
    let sx = if x < x1 { 1 } else { -1 };
    let sy = if y < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Luma([shade]));
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}
