//! Minimal raster charts and slice overlays.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{s, Array2, Array3};

use crate::error::{CliError, Result};

pub const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189], [140, 86, 75]];
const BLACK: [u8; 3] = [0, 0, 0];
const GRID: [u8; 3] = [225, 225, 225];
const MARGIN: u32 = 40;

pub struct Canvas {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    pub fn new(width: u32, height: u32, x: (f64, f64), y: (f64, f64)) -> Self {
        let img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
        let mut c = Canvas { img, x, y };
        for k in 0..=4 {
            let v = y.0 + (y.1 - y.0) * k as f64 / 4.0;
            c.line((x.0, v), (x.1, v), GRID, 1);
        }
        c.line((x.0, y.0), (x.1, y.0), BLACK, 1);
        c.line((x.0, y.0), (x.0, y.1), BLACK, 1);
        c
    }

    fn px(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let w = (self.img.width() - 2 * MARGIN) as f64;
        let h = (self.img.height() - 2 * MARGIN) as f64;
        let fx = (x - self.x.0) / (self.x.1 - self.x.0);
        let fy = (y - self.y.0) / (self.y.1 - self.y.0);
        (MARGIN as f64 + fx * w, MARGIN as f64 + (1.0 - fy) * h)
    }

    fn dot(&mut self, x: i64, y: i64, color: [u8; 3], r: i64) {
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as u32) < self.img.width() && (py as u32) < self.img.height() {
                    self.img.put_pixel(px as u32, py as u32, Rgb(color));
                }
            }
        }
    }

    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3], width: i64) {
        let (a, b) = (self.px(a), self.px(b));
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = a.0 + t * (b.0 - a.0);
            let y = a.1 + t * (b.1 - a.1);
            self.dot(x.round() as i64, y.round() as i64, color, width / 2);
        }
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], color: [u8; 3]) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], color, 2);
        }
    }

    pub fn marker(&mut self, p: (f64, f64), color: [u8; 3]) {
        let (x, y) = self.px(p);
        self.dot(x.round() as i64, y.round() as i64, color, 3);
    }

    pub fn rect(&mut self, lo: (f64, f64), hi: (f64, f64), color: [u8; 3]) {
        let (a, b) = (self.px(lo), self.px(hi));
        let (x0, x1) = (a.0.min(b.0).round() as i64, a.0.max(b.0).round() as i64);
        let (y0, y1) = (a.1.min(b.1).round() as i64, a.1.max(b.1).round() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.dot(x, y, color, 0);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|source| CliError::Image { path: path.to_path_buf(), source })
    }
}

pub fn color(i: usize) -> [u8; 3] {
    PALETTE[i % PALETTE.len()]
}

fn value_range(series: &[(String, Vec<f64>)]) -> (f64, f64) {
    let all = series.iter().flat_map(|(_, v)| v.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(0.01);
    ((lo - pad).max(0.0), (hi + pad).min(1.0))
}

pub fn roc_chart(curves: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    let mut c = Canvas::new(480, 480, (0.0, 1.0), (0.0, 1.0));
    c.line((0.0, 0.0), (1.0, 1.0), [160, 160, 160], 1);
    for (i, (_, pts)) in curves.iter().enumerate() {
        c.polyline(pts, color(i));
    }
    c.save(path)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_chart(series: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    let k = series.len().max(1) as f64;
    let mut c = Canvas::new(120 * series.len().max(1) as u32 + 80, 400, (0.0, k), value_range(series));
    for (i, (_, v)) in series.iter().enumerate() {
        if v.is_empty() {
            continue;
        }
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        let x = i as f64 + 0.5;
        let col = color(i);
        c.line((x, s[0]), (x, s[s.len() - 1]), col, 2);
        c.rect((x - 0.25, quantile(&s, 0.25)), (x + 0.25, quantile(&s, 0.75)), col);
        c.line((x - 0.25, quantile(&s, 0.5)), (x + 0.25, quantile(&s, 0.5)), BLACK, 2);
    }
    c.save(path)
}

/// Bars at the mean with a one-standard-deviation whisker.
pub fn bar_chart(series: &[(String, f64, f64)], path: &Path) -> Result<()> {
    let k = series.len().max(1) as f64;
    let hi = series.iter().map(|(_, m, s)| m + s).fold(0.0, f64::max).max(1e-9);
    let mut c = Canvas::new(120 * series.len().max(1) as u32 + 80, 400, (0.0, k), (0.0, (hi * 1.1).min(1.0).max(hi)));
    for (i, (_, m, sd)) in series.iter().enumerate() {
        let x = i as f64 + 0.5;
        c.rect((x - 0.3, 0.0), (x + 0.3, *m), color(i));
        c.line((x, m - sd), (x, m + sd), BLACK, 2);
        c.line((x - 0.1, m + sd), (x + 0.1, m + sd), BLACK, 2);
        c.line((x - 0.1, m - sd), (x + 0.1, m - sd), BLACK, 2);
    }
    c.save(path)
}

/// One line per method across folds.
pub fn fold_chart(series: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let mut c = Canvas::new(560, 400, (0.0, (n - 1) as f64), value_range(series));
    for (i, (_, v)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = v.iter().enumerate().map(|(f, &a)| (f as f64, a)).collect();
        c.polyline(&pts, color(i));
        for p in &pts {
            c.marker(*p, color(i));
        }
    }
    c.save(path)
}

/// Mid-slices of a `[0, 1]` volume and map along each axis, blended as a heat
/// overlay and laid side by side at `scale` pixels per voxel.
pub fn overlay_mid_slices(volume: &Array3<f32>, map: &Array3<f64>, scale: u32, path: &Path) -> Result<()> {
    let (d, h, w) = volume.dim();
    let slices: [(Array2<f32>, Array2<f64>); 3] = [
        (volume.slice(s![d / 2, .., ..]).to_owned(), map.slice(s![d / 2, .., ..]).to_owned()),
        (volume.slice(s![.., h / 2, ..]).to_owned(), map.slice(s![.., h / 2, ..]).to_owned()),
        (volume.slice(s![.., .., w / 2]).to_owned(), map.slice(s![.., .., w / 2]).to_owned()),
    ];
    let tile = d.max(h).max(w) as u32 * scale;
    let mut img = RgbImage::new(3 * tile, tile);
    for (t, (v, m)) in slices.iter().enumerate() {
        let (rows, cols) = v.dim();
        for py in 0..tile {
            for px in 0..tile {
                let (r, cidx) = ((py / scale) as usize, (px / scale) as usize);
                if r >= rows || cidx >= cols {
                    continue;
                }
                let g = v[[rows - 1 - r, cidx]].clamp(0.0, 1.0) as f64;
                let a = m[[rows - 1 - r, cidx]].clamp(0.0, 1.0);
                let heat = [(2.0 * a).min(1.0), (2.0 * a - 1.0).max(0.0), 0.0];
                let alpha = 0.6 * a;
                let mix = |k: usize| (((1.0 - alpha) * g + alpha * heat[k]) * 255.0).round() as u8;
                img.put_pixel(t as u32 * tile + px, py, Rgb([mix(0), mix(1), mix(2)]));
            }
        }
    }
    img.save(path).map_err(|source| CliError::Image { path: path.to_path_buf(), source })
}
