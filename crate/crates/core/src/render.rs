//! Raster outputs: similarity heatmaps, robustness curves and 16-bit
//! residual images.

use std::fmt::Write as _;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::nn::Tensor;

const STOPS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

const PALETTE: [[u8; 3]; 7] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
];

/// Maps `t` in [0, 1] onto a perceptually ordered dark-to-bright ramp.
pub fn colormap(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// A `rows x cols` matrix as square cells, min-max scaled.
pub fn heatmap(m: &Tensor, cell: u32) -> Result<RgbImage> {
    let [rows, cols] = m.shape()[..] else {
        return Err(Error::Shape(format!("heatmap needs a matrix, got {:?}", m.shape())));
    };
    let d = m.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(RgbImage::from_fn(cols as u32 * cell, rows as u32 * cell, |x, y| {
        let (r, c) = ((y / cell) as usize, (x / cell) as usize);
        colormap((d[r * cols + c] - lo) / span)
    }))
}

/// Places images left to right on a white background.
pub fn hstack(images: &[RgbImage], gap: u32) -> RgbImage {
    let w = images.iter().map(|i| i.width()).sum::<u32>() + gap * images.len().saturating_sub(1) as u32;
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let mut out = RgbImage::from_pixel(w.max(1), h.max(1), Rgb([255, 255, 255]));
    let mut x0 = 0;
    for im in images {
        image::imageops::replace(&mut out, im, x0 as i64, 0);
        x0 += im.width() + gap;
    }
    out
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, a: (f32, f32), b: (f32, f32), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = k as f32 / steps as f32;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

fn draw_dot(img: &mut RgbImage, center: (f32, f32), r: i64, c: Rgb<u8>) {
    let (cx, cy) = (center.0.round() as i64, center.1.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

/// Line plot of one or more series against their index, with a light grid
/// at tenths of the value range. The y range is `[y_min, y_max]`.
pub fn line_plot(series: &[&[f64]], y_min: f64, y_max: f64, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 24.0;
    let (w, h) = (width as f32 - 2.0 * margin, height as f32 - 2.0 * margin);
    let n = series.iter().map(|s| s.len()).max().unwrap_or(0);
    let span = if y_max > y_min { y_max - y_min } else { 1.0 };
    let px = |i: usize| margin + if n > 1 { w * i as f32 / (n - 1) as f32 } else { w / 2.0 };
    let py = |v: f64| margin + h * (1.0 - ((v - y_min) / span).clamp(0.0, 1.0) as f32);
    for k in 0..=10 {
        let y = margin + h * k as f32 / 10.0;
        draw_line(&mut img, (margin, y), (margin + w, y), Rgb([225, 225, 225]));
    }
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, (margin, margin), (margin, margin + h), axis);
    draw_line(&mut img, (margin, margin + h), (margin + w, margin + h), axis);
    for (s, ys) in series.iter().enumerate() {
        let color = Rgb(PALETTE[s % PALETTE.len()]);
        for i in 1..ys.len() {
            draw_line(&mut img, (px(i - 1), py(ys[i - 1])), (px(i), py(ys[i])), color);
        }
        for (i, &v) in ys.iter().enumerate() {
            draw_dot(&mut img, (px(i), py(v)), 3, color);
        }
    }
    img
}

/// Writes a matrix as tab-separated rows.
pub fn matrix_tsv(m: &Tensor) -> Result<String> {
    let [rows, cols] = m.shape()[..] else {
        return Err(Error::Shape(format!("expected a matrix, got {:?}", m.shape())));
    };
    let mut s = String::new();
    for r in 0..rows {
        let row = &m.data()[r * cols..(r + 1) * cols];
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "{}", cells.join("\t"));
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualStats {
    pub min: f64,
    pub max: f64,
    /// Mean squared residual.
    pub energy: f64,
}

impl ResidualStats {
    pub fn of(t: &Tensor) -> Self {
        let d = t.data();
        Self {
            min: d.iter().copied().fold(f64::INFINITY, f64::min),
            max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            energy: d.iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64,
        }
    }

    pub fn to_text(&self, q: f64) -> String {
        format!("min\t{}\nmax\t{}\nenergy\t{}\nq\t{q}\n", self.min, self.max, self.energy)
    }
}

/// `[3, h, w]` residuals mapped affinely from `[-q, q]` onto `[0, 65535]`.
pub fn residual_png16(res: &Tensor, q: f64) -> Result<ImageBuffer<Rgb<u16>, Vec<u16>>> {
    let [3, h, w] = res.shape()[..] else {
        return Err(Error::Shape(format!("expected [3, h, w], got {:?}", res.shape())));
    };
    let d = res.data();
    let map = |v: f64| (((v + q) / (2.0 * q)).clamp(0.0, 1.0) * 65535.0).round() as u16;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([map(d[i]), map(d[h * w + i]), map(d[2 * h * w + i])])
    }))
}

pub fn save_image<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    img: &ImageBuffer<P, Vec<S>>,
    path: &Path,
) -> Result<()>
where
    [S]: image::EncodableLayout,
{
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), Rgb([68, 1, 84]));
        assert_eq!(colormap(1.0), Rgb([253, 231, 37]));
        assert_eq!(colormap(f64::NAN), colormap(0.0));
    }

    #[test]
    fn heatmap_extremes_use_ramp_ends() {
        let m = Tensor::new(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let img = heatmap(&m, 4).unwrap();
        assert_eq!(img.dimensions(), (8, 8));
        assert_eq!(*img.get_pixel(0, 0), colormap(0.0));
        assert_eq!(*img.get_pixel(7, 7), colormap(1.0));
    }

    #[test]
    fn residual_mapping_is_affine() {
        let t = Tensor::new(&[3, 1, 3], vec![-2.0, 0.0, 2.0, -5.0, 1.0, 5.0, 0.0, 0.0, 0.0]).unwrap();
        let img = residual_png16(&t, 2.0).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 32768]);
        assert_eq!(img.get_pixel(2, 0).0, [65535, 65535, 32768]);
        assert_eq!(img.get_pixel(1, 0).0[1], 49151);
    }

    #[test]
    fn plot_marks_points_and_stays_in_bounds() {
        let img = line_plot(&[&[1.0, 0.5, 2.0]], 0.0, 1.0, 120, 80);
        assert_eq!(img.dimensions(), (120, 80));
        // First point sits at the top-left corner of the plotting area.
        assert_eq!(*img.get_pixel(24, 24), Rgb(PALETTE[0]));
    }

    #[test]
    fn stats_on_known_values() {
        let t = Tensor::new(&[4], vec![-1.0, 1.0, 2.0, 0.0]).unwrap();
        let s = ResidualStats::of(&t);
        assert_eq!((s.min, s.max, s.energy), (-1.0, 2.0, 1.5));
    }

    #[test]
    fn tsv_round_trips_values() {
        let m = Tensor::new(&[2, 2], vec![0.1, 0.2, 1.0 / 3.0, 4.0]).unwrap();
        let back: Vec<f64> = matrix_tsv(&m)
            .unwrap()
            .split(['\t', '\n'])
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(back, m.data());
    }
}
