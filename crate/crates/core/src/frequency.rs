//! Frequency stream front end: blockwise DCT features rearranged into
//! per-frequency channels, recalibrated by a squeeze-and-excitation gate.
//!
//! The pixel-side pipeline (colour conversion, upsampling, DCT, rearrangement,
//! normalization) has no parameters and is computed on plain arrays; only the
//! SE gate, the final resize and the stage-1 projection live on the tape.

use std::f64::consts::PI;

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{init_batch_norm, init_conv, init_se_gate, residual_gate, se_gate};
use crate::params::ParamStore;
use crate::tensor::{resize_bilinear, Tensor};

pub const NORM_EPS: f64 = 1e-6;

/// Patch size N and block size n of the DCT rearrangement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DctConfig {
    pub patch_size: usize,
    pub block_size: usize,
}

impl Default for DctConfig {
    fn default() -> Self {
        Self { patch_size: 8, block_size: 2 }
    }
}

impl DctConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.block_size == 0 || self.patch_size % self.block_size != 0 {
            return Err(Error::Config(format!(
                "dct patch size {} must be a positive multiple of block size {}",
                self.patch_size, self.block_size
            )));
        }
        Ok(())
    }

    /// Frequency groups per colour channel, (N/n)².
    pub fn groups(&self) -> usize {
        let r = self.patch_size / self.block_size;
        r * r
    }

    pub fn output_channels(&self) -> usize {
        3 * self.groups()
    }
}

/// Full-range BT.601 RGB → YCbCr on a (3, H, W) array of values in [0, 255].
/// Chroma is left unclamped, so saturated reds and blues may reach 255.5.
pub fn rgb_to_ycbcr(image: &Array3<f64>) -> Result<Array3<f64>> {
    if image.dim().0 != 3 {
        return shape_err(format!("expected 3 colour channels, got {}", image.dim().0));
    }
    if image.iter().any(|v| !(0.0..=255.0).contains(v)) {
        return Err(Error::Input("pixel values must lie in [0, 255]".into()));
    }
    let (r, g, b) = (image.index_axis(Axis(0), 0), image.index_axis(Axis(0), 1), image.index_axis(Axis(0), 2));
    let y = &r * 0.299 + &g * 0.587 + &b * 0.114;
    let cb = &r * -0.168736 + &g * -0.331264 + &b * 0.5 + 128.0;
    let cr = &r * 0.5 + &g * -0.418688 + &b * -0.081312 + 128.0;
    Ok(ndarray::stack(Axis(0), &[y.view(), cb.view(), cr.view()]).expect("equal shapes"))
}

/// Orthonormal DCT-II basis, row k holds frequency k.
pub fn dct_basis(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(k, i)| {
        let alpha = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        alpha * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos()
    })
}

/// Replaces every N×N tile by its orthonormal 2-D DCT-II coefficients.
pub fn blockwise_dct(channel: &Array2<f64>, patch: usize) -> Result<Array2<f64>> {
    let (h, w) = channel.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape_err(format!("{h}x{w} is not divisible into {patch}x{patch} tiles"));
    }
    let d = dct_basis(patch);
    let mut out = Array2::zeros((h, w));
    for ty in (0..h).step_by(patch) {
        for tx in (0..w).step_by(patch) {
            let tile = channel.slice(s![ty..ty + patch, tx..tx + patch]);
            let coeffs = d.dot(&tile).dot(&d.t());
            out.slice_mut(s![ty..ty + patch, tx..tx + patch]).assign(&coeffs);
        }
    }
    Ok(out)
}

fn check_rearrange(h: usize, w: usize, patch: usize, block: usize) -> Result<()> {
    if patch == 0 || block == 0 || patch % block != 0 || h % patch != 0 || w % patch != 0 {
        return shape_err(format!("cannot rearrange {h}x{w} with patch {patch} and block {block}"));
    }
    Ok(())
}

/// Gathers same-frequency n×n blocks of every N×N coefficient patch into one
/// channel. Block (p, q) of the patch grid goes to channel p·(N/n)+q, so
/// channel 0 carries the lowest frequencies. Output is ((N/n)², h·n/N, w·n/N).
pub fn frequency_rearrange(coeffs: &Array2<f64>, patch: usize, block: usize) -> Result<Array3<f64>> {
    let (h, w) = coeffs.dim();
    check_rearrange(h, w, patch, block)?;
    let r = patch / block;
    let (oh, ow) = (h / patch * block, w / patch * block);
    let mut out = Array3::zeros((r * r, oh, ow));
    for py in 0..h / patch {
        for px in 0..w / patch {
            for p in 0..r {
                for q in 0..r {
                    let src = coeffs.slice(s![
                        py * patch + p * block..py * patch + (p + 1) * block,
                        px * patch + q * block..px * patch + (q + 1) * block
                    ]);
                    out.slice_mut(s![p * r + q, py * block..(py + 1) * block, px * block..(px + 1) * block])
                        .assign(&src);
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`frequency_rearrange`].
pub fn inverse_rearrange(fm: &Array3<f64>, patch: usize, block: usize) -> Result<Array2<f64>> {
    let (c, oh, ow) = fm.dim();
    if patch == 0 || block == 0 || patch % block != 0 {
        return shape_err(format!("invalid patch {patch} / block {block}"));
    }
    let r = patch / block;
    if c != r * r || oh % block != 0 || ow % block != 0 {
        return shape_err(format!("map ({c}, {oh}, {ow}) does not match patch {patch} / block {block}"));
    }
    let (h, w) = (oh / block * patch, ow / block * patch);
    let mut out = Array2::zeros((h, w));
    for py in 0..h / patch {
        for px in 0..w / patch {
            for p in 0..r {
                for q in 0..r {
                    let src = fm.slice(s![p * r + q, py * block..(py + 1) * block, px * block..(px + 1) * block]);
                    out.slice_mut(s![
                        py * patch + p * block..py * patch + (p + 1) * block,
                        px * patch + q * block..px * patch + (q + 1) * block
                    ])
                    .assign(&src);
                }
            }
        }
    }
    Ok(out)
}

/// Per channel: subtract the spatial mean, divide by the spatial (population)
/// standard deviation plus [`NORM_EPS`].
pub fn channelwise_normalize(fm: &Array3<f64>) -> Array3<f64> {
    let mut out = fm.clone();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        let n = ch.len() as f64;
        let mean = ch.sum() / n;
        let std = (ch.fold(0.0, |a, v| a + (v - mean) * (v - mean)) / n).sqrt();
        if std == 0.0 {
            ch.fill(0.0);
        } else {
            ch.mapv_inplace(|v| (v - mean) / (std + NORM_EPS));
        }
    }
    out
}

/// Parameter-free part of the extractor for one (3, H, W) image: YCbCr,
/// bilinear 2× upsampling, blockwise DCT, rearrangement of the three colour
/// planes (Y groups first) and channelwise normalization.
pub fn dct_features(image: &Array3<f64>, cfg: &DctConfig) -> Result<Array3<f64>> {
    cfg.validate()?;
    let ycc = rgb_to_ycbcr(image)?;
    let (_, h, w) = ycc.dim();
    let up = resize_bilinear(&ycc.insert_axis(Axis(0)), 2 * h, 2 * w);
    let mut groups = Vec::with_capacity(3);
    for c in 0..3 {
        let plane = up.slice(s![0, c, .., ..]).to_owned();
        let coeffs = blockwise_dct(&plane, cfg.patch_size)?;
        groups.push(frequency_rearrange(&coeffs, cfg.patch_size, cfg.block_size)?);
    }
    let views: Vec<_> = groups.iter().map(|g| g.view()).collect();
    let stacked = ndarray::concatenate(Axis(0), &views).expect("equal group shapes");
    Ok(channelwise_normalize(&stacked))
}

pub fn init_frequency_front<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    cfg: &DctConfig,
    stage1_channels: usize,
) {
    let c = cfg.output_channels();
    init_se_gate(store, rng, &format!("{prefix}.se"), c);
    init_conv(store, rng, &format!("{prefix}.proj"), stage1_channels, c, 1, true);
    init_batch_norm(store, &format!("{prefix}.proj_bn"), stage1_channels);
}

/// DCT extractor: (N, 3, H, W) raw pixels → (N, 3·(N/n)², H, W) features.
pub fn dct_extractor_forward(g: &mut Graph, prefix: &str, image: Var, cfg: &DctConfig) -> Result<Var> {
    let [n, c, h, w] = g.shape(image);
    if c != 3 || h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return shape_err(format!("dct extractor needs (N, 3, 16k, 16k), got {:?}", [n, c, h, w]));
    }
    let img = g.value(image);
    let per_sample = (0..n)
        .map(|b| dct_features(&img.index_axis(Axis(0), b).to_owned(), cfg))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = per_sample.iter().map(|a| a.view()).collect();
    let feats: Tensor = ndarray::stack(Axis(0), &views).expect("equal sample shapes");
    let x = g.input(feats);
    let pooled = g.global_avg(x);
    let gate = se_gate(g, &format!("{prefix}.se"), pooled)?;
    let y = residual_gate(g, gate, x)?;
    Ok(g.resize(y, h, w))
}

/// First stage of the frequency stream: 1×1 conv to C₁ and batch norm.
pub fn frequency_stage1(g: &mut Graph, prefix: &str, freq: Var) -> Result<Var> {
    let y = g.conv_named(freq, &format!("{prefix}.proj"))?;
    g.batch_norm(y, &format!("{prefix}.proj_bn"))
}
