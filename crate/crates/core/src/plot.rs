//! Minimal raster charts (PNG): loss curves and predicted-vs-label scatter.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 32;
const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

struct Canvas {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

impl Canvas {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let axis = Rgb([0, 0, 0]);
        for px in MARGIN..WIDTH - MARGIN / 2 {
            img.put_pixel(px, HEIGHT - MARGIN, axis);
        }
        for py in MARGIN / 2..=HEIGHT - MARGIN {
            img.put_pixel(MARGIN, py, axis);
        }
        Canvas { img, x, y }
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let w = (WIDTH - MARGIN - MARGIN / 2) as f64;
        let h = (HEIGHT - MARGIN - MARGIN / 2) as f64;
        let px = MARGIN as f64 + (x - self.x.0) / (self.x.1 - self.x.0) * w;
        let py = (HEIGHT - MARGIN) as f64 - (y - self.y.0) / (self.y.1 - self.y.0) * h;
        (px.round() as i64, py.round() as i64)
    }

    fn dot(&mut self, (px, py): (i64, i64), r: i64, c: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (px + dx, py + dy);
                if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
                    self.img.put_pixel(x as u32, y as u32, Rgb(c));
                }
            }
        }
    }

    fn line(&mut self, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let p = (
                (a.0 as f64 + t * (b.0 - a.0) as f64).round() as i64,
                (a.1 as f64 + t * (b.1 - a.1) as f64).round() as i64,
            );
            self.dot(p, 0, c);
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// One polyline per series, x = index within the series.
pub fn line_chart(series: &[&[f64]], path: &Path) -> Result<()> {
    let longest = series.iter().map(|s| s.len()).max().unwrap_or(0);
    let x = (0.0, (longest.max(2) - 1) as f64);
    let y = bounds(series.iter().flat_map(|s| s.iter().copied()));
    let mut c = Canvas::new(x, y);
    for (k, s) in series.iter().enumerate() {
        let col = PALETTE[k % PALETTE.len()];
        let pts: Vec<_> = s
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| c.to_px(i as f64, *v))
            .collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], col);
        }
        if pts.len() == 1 {
            c.dot(pts[0], 1, col);
        }
    }
    c.save(path)
}

/// Scatter of `(x[i], y[i])` with the `y = x` diagonal drawn in grey.
pub fn scatter(x: &[f64], y: &[f64], path: &Path) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid("scatter needs equally long coordinates"));
    }
    let xb = bounds(x.iter().copied());
    let yb = bounds(y.iter().copied());
    let mut c = Canvas::new(xb, yb);
    let lo = xb.0.max(yb.0);
    let hi = xb.1.min(yb.1);
    if lo < hi {
        let (a, b) = (c.to_px(lo, lo), c.to_px(hi, hi));
        c.line(a, b, [170, 170, 170]);
    }
    for (a, b) in x.iter().zip(y).filter(|(a, b)| a.is_finite() && b.is_finite()) {
        let p = c.to_px(*a, *b);
        c.dot(p, 2, PALETTE[0]);
    }
    c.save(path)
}
