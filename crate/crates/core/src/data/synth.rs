//! Procedural scenes and forgery generators. Region geometry is integer-only;
//! textures are synthesized in f64 and quantized to 8 bits.

use std::collections::VecDeque;
use std::f64::consts::TAU;

use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{AttackSpec, ForgeryKind, Image, SampleMeta, SampleRecord};
use crate::error::{Error, Result};

/// Bounds on the forged fraction of the image area.
pub const MIN_AREA_FRACTION: f64 = 0.05;
pub const MAX_AREA_FRACTION: f64 = 0.40;

const MAX_ATTEMPTS: usize = 10_000;

/// Rendering parameters of a scene family. Hosts and donors come from
/// different "cameras": smoother texture and weak sensor noise for hosts,
/// busier texture and strong noise for donors.
struct Style {
    noise: (f64, f64),
    freq: (f64, f64),
    amp: (f64, f64),
}

const HOST: Style = Style { noise: (1.0, 3.0), freq: (0.5, 2.0), amp: (4.0, 12.0) };
const DONOR: Style = Style { noise: (7.0, 12.0), freq: (3.0, 6.0), amp: (10.0, 25.0) };

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % 16 != 0 {
        return Err(Error::Input(format!("sample size {size} is not a positive multiple of 16")));
    }
    Ok(())
}

fn color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(20.0..235.0), rng.random_range(20.0..235.0), rng.random_range(20.0..235.0)]
}

fn render<R: Rng + ?Sized>(rng: &mut R, size: usize, style: &Style) -> Image {
    let n = size as f64;
    let (c0, c1) = (color(rng), color(rng));
    let (gx, gy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let norm = (gx + gy) * n + 1e-9;
    let freq_x = rng.random_range(style.freq.0..style.freq.1);
    let freq_y = rng.random_range(style.freq.0..style.freq.1);
    let phase = rng.random_range(0.0..TAU);
    let amp = rng.random_range(style.amp.0..style.amp.1);
    let tint: [f64; 3] = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];

    let mut img = Array3::<f64>::zeros((size, size, 3));
    for ((y, x, c), v) in img.indexed_iter_mut() {
        let t = (gx * x as f64 + gy * y as f64) / norm;
        let wave = (TAU * (freq_x * x as f64 + freq_y * y as f64) / n + phase).sin();
        *v = c0[c] + (c1[c] - c0[c]) * t + amp * tint[c] * wave;
    }

    for _ in 0..rng.random_range(2..=4) {
        let (h, w) = (rng.random_range(size / 8..=size / 2), rng.random_range(size / 8..=size / 2));
        let shape = sample_shape(rng, h, w);
        let (top, left) = (rng.random_range(0..=size - h), rng.random_range(0..=size - w));
        let fill = color(rng);
        for ((y, x), inside) in shape.indexed_iter() {
            if *inside {
                for c in 0..3 {
                    let v = &mut img[[top + y, left + x, c]];
                    *v = 0.3 * *v + 0.7 * fill[c];
                }
            }
        }
    }

    let sigma = rng.random_range(style.noise.0..style.noise.1);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    img.mapv_inplace(|v| v + noise.sample(rng));
    img.mapv(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// Ellipse inscribed in, or convex polygon inside, an `h × w` box. Pixel
/// centers are tested in doubled coordinates so every comparison is exact.
fn sample_shape<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> Array2<bool> {
    let (h2, w2) = (2 * h as i64, 2 * w as i64);
    if rng.random_bool(0.5) {
        let rx = rng.random_range((w2 / 4).max(1)..=w2 / 2);
        let ry = rng.random_range((h2 / 4).max(1)..=h2 / 2);
        let (cx, cy) = (w as i64, h as i64);
        Array2::from_shape_fn((h, w), |(y, x)| {
            let (dx, dy) = (2 * x as i64 + 1 - cx, 2 * y as i64 + 1 - cy);
            (dx * ry).pow(2) + (dy * rx).pow(2) <= (rx * ry).pow(2)
        })
    } else {
        loop {
            let k = rng.random_range(3..=7);
            let pts: Vec<(i64, i64)> = (0..k).map(|_| (rng.random_range(0..=w2), rng.random_range(0..=h2))).collect();
            let hull = convex_hull(pts);
            if hull.len() < 3 {
                continue;
            }
            let shape = Array2::from_shape_fn((h, w), |(y, x)| {
                let p = (2 * x as i64 + 1, 2 * y as i64 + 1);
                (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0)
            });
            if shape.iter().any(|v| *v) {
                return shape;
            }
        }
    }
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise hull without collinear points.
fn convex_hull(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// 4-connectivity of the true pixels.
pub(crate) fn component_sizes(mask: &Array2<bool>) -> Vec<usize> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut sizes = Vec::new();
    for start in mask.indexed_iter().filter(|(_, v)| **v).map(|(p, _)| p) {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut n = 0;
        while let Some((y, x)) = queue.pop_front() {
            n += 1;
            let nbrs = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
            for q in nbrs {
                if q.0 < h && q.1 < w && mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(n);
    }
    sizes
}

/// A connected shape placed at `(top, left)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub shape: Array2<bool>,
}

impl Region {
    pub fn area(&self) -> usize {
        self.shape.iter().filter(|v| **v).count()
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.shape.indexed_iter().filter(|(_, v)| **v).map(|((y, x), _)| (self.top + y, self.left + x))
    }

    fn paint(&self, mask: &mut Array2<u8>) {
        for p in self.pixels() {
            mask[p] = 1;
        }
    }
}

fn connected_shape<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, area: (usize, usize)) -> Option<Array2<bool>> {
    let shape = sample_shape(rng, h, w);
    let n = shape.iter().filter(|v| **v).count();
    (n >= area.0 && n <= area.1 && component_sizes(&shape).len() == 1).then_some(shape)
}

fn area_bounds(size: usize, scale: f64) -> (usize, usize) {
    let total = (size * size) as f64;
    ((MIN_AREA_FRACTION * total * scale).ceil() as usize, (MAX_AREA_FRACTION * total * scale).floor() as usize)
}

fn meta(kind: ForgeryKind) -> SampleMeta {
    SampleMeta { kind, attack: AttackSpec::None, seed: 0 }
}

/// A splice together with the images it was composed from.
#[derive(Clone, Debug)]
pub struct SpliceParts {
    pub record: SampleRecord,
    pub host: Image,
    pub donor: Image,
    pub region: Region,
}

pub fn generate_splice_parts<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<SpliceParts> {
    check_size(size)?;
    let host = render(rng, size, &HOST);
    let donor = render(rng, size, &DONOR);
    let bounds = area_bounds(size, 1.0);
    for _ in 0..MAX_ATTEMPTS {
        let (h, w) = (rng.random_range(size / 4..=size), rng.random_range(size / 4..=size));
        let Some(shape) = connected_shape(rng, h, w, bounds) else { continue };
        let region = Region { top: rng.random_range(0..=size - h), left: rng.random_range(0..=size - w), shape };
        let mut image = host.clone();
        let mut mask = Array2::zeros((size, size));
        for p in region.pixels() {
            image.slice_mut(s![p.0, p.1, ..]).assign(&donor.slice(s![p.0, p.1, ..]));
        }
        region.paint(&mut mask);
        let record = SampleRecord { image, mask, meta: meta(ForgeryKind::Splice) };
        return Ok(SpliceParts { record, host, donor, region });
    }
    Err(Error::Input(format!("could not place a splice region in a {size}×{size} image")))
}

/// Pastes a donor region into a host scene.
pub fn generate_splice<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<SampleRecord> {
    Ok(generate_splice_parts(rng, size)?.record)
}

/// Duplicates a region to a disjoint, non-touching location in the same
/// image. The mask covers both copies.
pub fn generate_copy_move<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<SampleRecord> {
    check_size(size)?;
    let host = render(rng, size, &HOST);
    let bounds = area_bounds(size, 0.5);
    for _ in 0..MAX_ATTEMPTS {
        let (h, w) = (rng.random_range(size / 4..size / 2), rng.random_range(size / 4..size / 2));
        let Some(shape) = connected_shape(rng, h, w, bounds) else { continue };
        let src = (rng.random_range(0..=size - h), rng.random_range(0..=size - w));
        let tgt = (rng.random_range(0..=size - h), rng.random_range(0..=size - w));
        let apart = |a: usize, b: usize, len: usize| a.max(b) - a.min(b) > len;
        if !apart(src.0, tgt.0, h) && !apart(src.1, tgt.1, w) {
            continue;
        }
        let source = Region { top: src.0, left: src.1, shape: shape.clone() };
        let target = Region { top: tgt.0, left: tgt.1, shape };
        let mut image = host.clone();
        for (a, b) in source.pixels().zip(target.pixels()) {
            image.slice_mut(s![b.0, b.1, ..]).assign(&host.slice(s![a.0, a.1, ..]));
        }
        let mut mask = Array2::zeros((size, size));
        source.paint(&mut mask);
        target.paint(&mut mask);
        return Ok(SampleRecord { image, mask, meta: meta(ForgeryKind::CopyMove) });
    }
    Err(Error::Input(format!("could not place a copy-move pair in a {size}×{size} image")))
}

pub(crate) fn generate_authentic<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<SampleRecord> {
    check_size(size)?;
    let image = render(rng, size, &HOST);
    Ok(SampleRecord { image, mask: Array2::zeros((size, size)), meta: meta(ForgeryKind::Authentic) })
}
