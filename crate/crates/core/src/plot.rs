//! Figure output: delimited data plus small unlabeled raster charts.
//!
//! Charts are drawn straight into RGB buffers (no fonts); the CSV written next
//! to each figure carries the numbers.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 24;

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(header).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, axis);
    }
    for y in MARGIN..=H - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, c);
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

fn bounds(series: &[Vec<(f64, f64)>]) -> Option<(f64, f64, f64, f64)> {
    let pts = series.iter().flatten().filter(|p| p.0.is_finite() && p.1.is_finite());
    let mut b: Option<(f64, f64, f64, f64)> = None;
    for &(x, y) in pts {
        b = Some(match b {
            None => (x, x, y, y),
            Some((a, bx, c, d)) => (a.min(x), bx.max(x), c.min(y), d.max(y)),
        });
    }
    b.map(|(x0, x1, y0, y1)| {
        let (x1, y1) = (if x1 > x0 { x1 } else { x0 + 1.0 }, if y1 > y0 { y1 } else { y0 + 1.0 });
        (x0, x1, y0, y1)
    })
}

/// Polylines, one color per series, autoscaled to a shared frame.
pub fn render_curves(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let mut img = canvas();
    if let Some((x0, x1, y0, y1)) = bounds(series) {
        let span_x = (W - 2 * MARGIN) as f64;
        let span_y = (H - 2 * MARGIN) as f64;
        let to_px = |(x, y): (f64, f64)| {
            (
                MARGIN as i64 + ((x - x0) / (x1 - x0) * span_x).round() as i64,
                (H - MARGIN) as i64 - ((y - y0) / (y1 - y0) * span_y).round() as i64,
            )
        };
        for (i, s) in series.iter().enumerate() {
            let c = Rgb(PALETTE[i % PALETTE.len()]);
            let pts: Vec<_> = s.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).map(to_px).collect();
            for w in pts.windows(2) {
                line(&mut img, w[0], w[1], c);
            }
            if pts.len() == 1 {
                line(&mut img, pts[0], pts[0], c);
            }
        }
    }
    save(&img, path)
}

/// Side-by-side bars per bin for several histograms over the same bins.
pub fn render_histograms(path: &Path, hists: &[&[f64]]) -> Result<()> {
    let mut img = canvas();
    let bins = hists.iter().map(|h| h.len()).max().unwrap_or(0);
    let top = hists.iter().flat_map(|h| h.iter().copied()).fold(0.0, f64::max);
    if bins > 0 && top > 0.0 && !hists.is_empty() {
        let bin_w = (W - 2 * MARGIN) as f64 / bins as f64;
        let bar_w = bin_w / hists.len() as f64;
        let span_y = (H - 2 * MARGIN) as f64;
        for (i, h) in hists.iter().enumerate() {
            let c = Rgb(PALETTE[i % PALETTE.len()]);
            for (b, &v) in h.iter().enumerate() {
                let xa = MARGIN as f64 + 1.0 + b as f64 * bin_w + i as f64 * bar_w;
                let height = (v / top * span_y).round() as u32;
                for x in xa.floor() as u32..((xa + bar_w).floor() as u32).min(W - MARGIN) {
                    for y in (H - MARGIN - height)..(H - MARGIN) {
                        img.put_pixel(x, y, c);
                    }
                }
            }
        }
    }
    save(&img, path)
}

/// Image blended with a jet-like heat map of `maps.max over classes`.
pub fn render_cam_overlay(path: &Path, image: &Array3<f64>, maps: &Array3<f64>) -> Result<()> {
    let (_, h, w) = image.dim();
    if maps.dim().1 != h || maps.dim().2 != w {
        return Err(Error::shape("cam overlay", format!("{h}x{w}"), format!("{:?}", maps.dim())));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (0..maps.dim().0).map(|c| maps[[c, y, x]]).fold(0.0, f64::max).clamp(0.0, 1.0);
            let heat = [(1.5 - (4.0 * v - 3.0).abs()), (1.5 - (4.0 * v - 2.0).abs()), (1.5 - (4.0 * v - 1.0).abs())];
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let mixed = 0.5 * image[[ch, y, x]] + 0.5 * heat[ch].clamp(0.0, 1.0);
                px[ch] = (mixed.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    save(&img, path)
}
