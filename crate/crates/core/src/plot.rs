//! Minimal PNG line plots for score curves. Scores live on a fixed [0, 1]
//! axis with grid lines every 0.1; x positions are spread evenly.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 40;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
/// Colors for successive series.
const PALETTE: [Rgb<u8>; 4] = [Rgb([31, 119, 180]), Rgb([214, 39, 40]), Rgb([44, 160, 44]), Rgb([148, 103, 189])];

/// One curve: y values in [0, 1], one per x position.
pub struct Series<'a> {
    pub values: &'a [f64],
}

fn to_px(i: usize, n: usize, y: f64) -> (i64, i64) {
    let span = (WIDTH - 2 * MARGIN) as f64;
    let x = MARGIN as f64 + if n > 1 { span * i as f64 / (n - 1) as f64 } else { span / 2.0 };
    let y = (HEIGHT - MARGIN) as f64 - (HEIGHT - 2 * MARGIN) as f64 * y.clamp(0.0, 1.0);
    (x.round() as i64, y.round() as i64)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham segment, two pixels thick.
fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        put(img, x0, y0 + 1, c);
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

/// Renders the curves over a shared x grid of `n` points.
pub fn render_lines(series: &[Series]) -> Result<RgbImage> {
    let n = series.first().map_or(0, |s| s.values.len());
    if n == 0 || series.iter().any(|s| s.values.len() != n) {
        return Err(Error::Input("plot series must be non-empty and of equal length".into()));
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    for k in 0..=10 {
        let (_, y) = to_px(0, 1, k as f64 / 10.0);
        line(&mut img, (MARGIN as i64, y), ((WIDTH - MARGIN) as i64, y), GRID);
    }
    let (left, bottom, top) = (MARGIN as i64, (HEIGHT - MARGIN) as i64, MARGIN as i64);
    line(&mut img, (left, bottom), ((WIDTH - MARGIN) as i64, bottom), AXIS);
    line(&mut img, (left, bottom), (left, top), AXIS);
    for i in 0..n {
        let (x, _) = to_px(i, n, 0.0);
        line(&mut img, (x, bottom), (x, bottom + 5), AXIS);
    }
    for (s, color) in series.iter().zip(PALETTE.iter().cycle()) {
        let pts: Vec<(i64, i64)> = s.values.iter().enumerate().map(|(i, v)| to_px(i, n, *v)).collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], *color);
        }
        for &(x, y) in &pts {
            for dy in -3..=3 {
                for dx in -3..=3 {
                    put(&mut img, x + dx, y + dy, *color);
                }
            }
        }
    }
    Ok(img)
}

pub fn save_line_plot(path: &Path, series: &[Series]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    render_lines(series)?.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::data(path, e))
}
