//! Minimal PNG charts (lines, scatter, bars) drawn straight into an RGB
//! buffer. Values and labels live in the CSV written next to each chart.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 32;

pub const BLUE: [u8; 3] = [31, 119, 180];
pub const ORANGE: [u8; 3] = [255, 127, 14];
pub const GREEN: [u8; 3] = [44, 160, 44];
pub const RED: [u8; 3] = [214, 39, 40];

struct Frame {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

fn range(values: impl Iterator<Item = f64>) -> Result<(f64, f64)> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument("plot needs finite, nonempty data".into()));
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.5;
        return Ok((lo - pad, hi + pad));
    }
    let pad = (hi - lo) * 0.05;
    Ok((lo - pad, hi + pad))
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        for px in MARGIN..WIDTH - MARGIN / 2 {
            img.put_pixel(px, HEIGHT - MARGIN, Rgb([0, 0, 0]));
        }
        for py in MARGIN / 2..=HEIGHT - MARGIN {
            img.put_pixel(MARGIN, py, Rgb([0, 0, 0]));
        }
        Self { img, x, y }
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let w = f64::from(WIDTH - MARGIN - MARGIN / 2);
        let h = f64::from(HEIGHT - MARGIN - MARGIN / 2);
        let px = f64::from(MARGIN) + (x - self.x.0) / (self.x.1 - self.x.0) * w;
        let py = f64::from(HEIGHT - MARGIN) - (y - self.y.0) / (self.y.1 - self.y.0) * h;
        (px.round() as i64, py.round() as i64)
    }

    fn dot(&mut self, (px, py): (i64, i64), radius: i64, color: [u8; 3]) {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (x, y) = (px + dx, py + dy);
                if x >= 0 && y >= 0 && x < i64::from(WIDTH) && y < i64::from(HEIGHT) {
                    self.img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }

    /// Bresenham segment.
    fn segment(&mut self, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
        let (mut x, mut y) = a;
        let dx = (b.0 - a.0).abs();
        let dy = -(b.1 - a.1).abs();
        let sx = if a.0 < b.0 { 1 } else { -1 };
        let sy = if a.1 < b.1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.dot((x, y), 0, color);
            if (x, y) == b {
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

    fn save(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// One polyline per series.
pub fn line_plot(path: &Path, series: &[(Vec<(f64, f64)>, [u8; 3])]) -> Result<()> {
    let pts = || series.iter().flat_map(|(s, _)| s.iter());
    let mut f = Frame::new(range(pts().map(|p| p.0))?, range(pts().map(|p| p.1))?);
    for (s, color) in series {
        for w in s.windows(2) {
            let (a, b) = (f.to_px(w[0].0, w[0].1), f.to_px(w[1].0, w[1].1));
            f.segment(a, b, *color);
        }
        if let [only] = s.as_slice() {
            let p = f.to_px(only.0, only.1);
            f.dot(p, 1, *color);
        }
    }
    f.save(path)
}

/// Draws one marker per point and returns the number drawn.
pub fn scatter_plot(path: &Path, points: &[(f64, f64, [u8; 3])]) -> Result<usize> {
    let mut f = Frame::new(range(points.iter().map(|p| p.0))?, range(points.iter().map(|p| p.1))?);
    for &(x, y, color) in points {
        let p = f.to_px(x, y);
        f.dot(p, 3, color);
    }
    f.save(path)?;
    Ok(points.len())
}

/// Vertical bars from zero.
pub fn bar_plot(path: &Path, values: &[f64], color: [u8; 3]) -> Result<()> {
    let n = values.len();
    let y = range(values.iter().copied().chain(std::iter::once(0.0)))?;
    let mut f = Frame::new((0.0, n as f64), y);
    for (i, &v) in values.iter().enumerate() {
        let (x0, y0) = f.to_px(i as f64 + 0.15, 0.0);
        let (x1, y1) = f.to_px(i as f64 + 0.85, v);
        for x in x0.min(x1)..=x0.max(x1) {
            f.segment((x, y0), (x, y1), color);
        }
    }
    f.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_written_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        let s = vec![((0..50).map(|i| (i as f64, (i as f64 * 0.1).sin())).collect(), BLUE)];
        line_plot(&a, &s).unwrap();
        line_plot(&b, &s).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let n = scatter_plot(&dir.path().join("s.png"), &[(0.1, 0.5, RED), (0.9, 0.4, GREEN), (0.5, 0.5, RED)]).unwrap();
        assert_eq!(n, 3);
        bar_plot(&dir.path().join("bar.png"), &[0.3, -0.1, 0.0], ORANGE).unwrap();
        let img = image::open(dir.path().join("bar.png")).unwrap();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
        assert!(scatter_plot(&dir.path().join("e.png"), &[]).is_err());
    }
}
