//! Hybrid pixel loss (BCE + SSIM + IoU) and its six-output deep-supervision
//! total. Maps are `H×W` arrays; probabilities live in [0, 1] and masks in
//! {0, 1}.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{shape_err, Error, Result};
use crate::graph::sigmoid;
use crate::tensor::Tensor;

pub const BCE_EPS: f64 = 1e-7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const NUM_OUTPUTS: usize = 6;

/// Which components enter the hybrid loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LossFlags {
    pub bce: bool,
    pub ssim: bool,
    pub iou: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self { bce: true, ssim: true, iou: true }
    }
}

impl LossFlags {
    pub fn validate(&self) -> Result<()> {
        if !(self.bce || self.ssim || self.iou) {
            return Err(Error::Config("at least one loss component must be enabled".into()));
        }
        Ok(())
    }

    /// The four loss combinations compared in the ablation, in table order.
    pub fn ablation_grid() -> [(&'static str, LossFlags); 4] {
        let f = |bce, ssim, iou| LossFlags { bce, ssim, iou };
        [
            ("BCE", f(true, false, false)),
            ("BCE+SSIM", f(true, true, false)),
            ("BCE+IOU", f(true, false, true)),
            ("BCE+IOU+SSIM", f(true, true, true)),
        ]
    }
}

impl fmt::Display for LossFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.bce {
            parts.push("bce");
        }
        if self.ssim {
            parts.push("ssim");
        }
        if self.iou {
            parts.push("iou");
        }
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for LossFlags {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut flags = LossFlags { bce: false, ssim: false, iou: false };
        for part in s.split('+').map(|p| p.trim().to_ascii_lowercase()) {
            match part.as_str() {
                "bce" => flags.bce = true,
                "ssim" => flags.ssim = true,
                "iou" => flags.iou = true,
                other => return Err(Error::Config(format!("unknown loss component `{other}`"))),
            }
        }
        flags.validate()?;
        Ok(flags)
    }
}

fn check_pair(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<()> {
    if p.dim() != g.dim() {
        return shape_err(format!("prediction {:?} vs mask {:?}", p.dim(), g.dim()));
    }
    if p.is_empty() {
        return shape_err("empty map");
    }
    Ok(())
}

/// Per-pixel mean binary cross-entropy with `P` clamped to [ε, 1−ε].
pub fn bce_loss(p: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<f64> {
    check_pair(&p, &g)?;
    let sum = ndarray::Zip::from(&p).and(&g).fold(0.0, |acc, &pv, &gv| {
        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc - (gv * pc.ln() + (1.0 - gv) * (1.0 - pc).ln())
    });
    Ok(sum / p.len() as f64)
}

/// BCE value and dL/dP. The derivative is zero where the clamp is active.
pub fn bce_with_grad(p: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    check_pair(&p, &g)?;
    let n = p.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(p.dim());
    ndarray::Zip::from(&mut grad).and(&p).and(&g).for_each(|d, &pv, &gv| {
        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
        loss -= gv * pc.ln() + (1.0 - gv) * (1.0 - pc).ln();
        if pv == pc {
            *d = (-gv / pc + (1.0 - gv) / (1.0 - pc)) / n;
        }
    });
    Ok((loss / n, grad))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Array1<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let t = Array1::from_shape_fn(size, |i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp());
    let s = t.sum();
    t / s
}

/// Window taps along each axis. Maps smaller than the window in either
/// dimension use the whole map as a single uniformly weighted window.
fn ssim_taps(h: usize, w: usize) -> (Array1<f64>, Array1<f64>) {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        (Array1::from_elem(h, 1.0 / h as f64), Array1::from_elem(w, 1.0 / w as f64))
    } else {
        let t = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
        (t.clone(), t)
    }
}

/// Valid separable correlation with `ky` along rows and `kx` along columns.
fn window_filter(x: &Array2<f64>, ky: &Array1<f64>, kx: &Array1<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - ky.len(), w + 1 - kx.len());
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let (ky, kx) = (ky.as_slice().expect("contiguous"), kx.as_slice().expect("contiguous"));
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        let src = &xs[i * w..(i + 1) * w];
        for (j, r) in rows[i * ow..(i + 1) * ow].iter_mut().enumerate() {
            *r = src[j..j + kx.len()].iter().zip(kx).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        let dst = &mut out[i * ow..(i + 1) * ow];
        for (t, k) in ky.iter().enumerate() {
            for (d, r) in dst.iter_mut().zip(&rows[(i + t) * ow..(i + t + 1) * ow]) {
                *d += k * r;
            }
        }
    }
    Array2::from_shape_vec((oh, ow), out).expect("filter output")
}

/// Adjoint of [`window_filter`]: scatters window values back to pixels.
fn window_filter_t(y: &Array2<f64>, ky: &Array1<f64>, kx: &Array1<f64>, h: usize, w: usize) -> Array2<f64> {
    let (oh, ow) = y.dim();
    let ys = y.as_slice().expect("standard layout");
    let (ky, kx) = (ky.as_slice().expect("contiguous"), kx.as_slice().expect("contiguous"));
    let mut rows = vec![0.0; h * ow];
    for i in 0..oh {
        let src = &ys[i * ow..(i + 1) * ow];
        for (t, k) in ky.iter().enumerate() {
            for (r, v) in rows[(i + t) * ow..(i + t + 1) * ow].iter_mut().zip(src) {
                *r += k * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let dst = &mut out[i * w..(i + 1) * w];
        for (j, r) in rows[i * ow..(i + 1) * ow].iter().enumerate() {
            for (d, k) in dst[j..j + kx.len()].iter_mut().zip(kx) {
                *d += k * r;
            }
        }
    }
    Array2::from_shape_vec((h, w), out).expect("filter output")
}

/// `1 − mean SSIM` over all valid windows.
pub fn ssim_loss(p: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<f64> {
    check_pair(&p, &g)?;
    let (h, w) = p.dim();
    let (ky, kx) = ssim_taps(h, w);
    let (p, g) = (p.to_owned(), g.to_owned());
    let m = SsimMoments::new(&p, &g, &ky, &kx);
    let mut sum = 0.0;
    for k in 0..m.m_p.len() {
        sum += m.terms(k).4;
    }
    Ok(1.0 - sum / m.m_p.len() as f64)
}

/// Windowed first and second moments of a prediction/mask pair.
struct SsimMoments {
    m_p: Vec<f64>,
    m_g: Vec<f64>,
    e_pp: Vec<f64>,
    e_gg: Vec<f64>,
    e_pg: Vec<f64>,
    dim: (usize, usize),
}

impl SsimMoments {
    fn new(p: &Array2<f64>, g: &Array2<f64>, ky: &Array1<f64>, kx: &Array1<f64>) -> Self {
        let f = |a: Array2<f64>| -> Vec<f64> { window_filter(&a, ky, kx).into_raw_vec_and_offset().0 };
        let m_p = window_filter(p, ky, kx);
        let dim = m_p.dim();
        Self {
            m_p: m_p.into_raw_vec_and_offset().0,
            m_g: f(g.clone()),
            e_pp: f(p * p),
            e_gg: f(g * g),
            e_pg: f(p * g),
            dim,
        }
    }

    /// `(a1, a2, b1, b2, ssim)` of window `k`.
    fn terms(&self, k: usize) -> (f64, f64, f64, f64, f64) {
        let (mp, mg) = (self.m_p[k], self.m_g[k]);
        let a1 = 2.0 * mp * mg + SSIM_C1;
        let a2 = 2.0 * (self.e_pg[k] - mp * mg) + SSIM_C2;
        let b1 = mp * mp + mg * mg + SSIM_C1;
        let b2 = (self.e_pp[k] - mp * mp) + (self.e_gg[k] - mg * mg) + SSIM_C2;
        (a1, a2, b1, b2, a1 * a2 / (b1 * b2))
    }
}

pub fn ssim_with_grad(p: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    check_pair(&p, &g)?;
    let (h, w) = p.dim();
    let (ky, kx) = ssim_taps(h, w);
    let (p, g) = (p.to_owned(), g.to_owned());
    let m = SsimMoments::new(&p, &g, &ky, &kx);
    let nw = m.m_p.len() as f64;
    let mut ssim_sum = 0.0;
    let mut d_mp = Array2::zeros(m.dim);
    let mut d_epg = Array2::zeros(m.dim);
    let mut d_epp = Array2::zeros(m.dim);
    for k in 0..m.m_p.len() {
        let (mp, mg) = (m.m_p[k], m.m_g[k]);
        let (a1, a2, b1, b2, s) = m.terms(k);
        ssim_sum += s;
        let idx = (k / m.dim.1, k % m.dim.1);
        // dL/d(moment) with L = 1 − mean S
        d_mp[idx] = -(2.0 * mg * (a2 - a1) / (b1 * b2) - 2.0 * mp * s * (1.0 / b1 - 1.0 / b2)) / nw;
        d_epg[idx] = -(2.0 * a1 / (b1 * b2)) / nw;
        d_epp[idx] = (s / b2) / nw;
    }
    let grad = window_filter_t(&d_mp, &ky, &kx, h, w)
        + &g * &window_filter_t(&d_epg, &ky, &kx, h, w)
        + &p * &window_filter_t(&d_epp, &ky, &kx, h, w) * 2.0;
    Ok((1.0 - ssim_sum / nw, grad))
}

/// `1 − ΣPG / Σ(P + G − PG)`; zero when both maps are empty.
pub fn iou_loss(p: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<f64> {
    check_pair(&p, &g)?;
    let (inter, union) = iou_sums(&p, &g);
    Ok(if union == 0.0 { 0.0 } else { 1.0 - inter / union })
}

fn iou_sums(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> (f64, f64) {
    ndarray::Zip::from(p).and(g).fold((0.0, 0.0), |(i, u), &pv, &gv| (i + pv * gv, u + pv + gv - pv * gv))
}

pub fn iou_with_grad(p: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    check_pair(&p, &g)?;
    let (inter, union) = iou_sums(&p, &g);
    if union == 0.0 {
        return Ok((0.0, Array2::zeros(p.dim())));
    }
    let grad = ndarray::Zip::from(&p)
        .and(&g)
        .map_collect(|_, &gv| -(gv * union - inter * (1.0 - gv)) / (union * union));
    Ok((1.0 - inter / union, grad))
}

/// Loss components of one supervised output.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub bce: f64,
    pub ssim: f64,
    pub iou: f64,
    pub total: f64,
}

impl LossComponents {
    fn accumulate(&mut self, o: &LossComponents, k: f64) {
        self.bce += k * o.bce;
        self.ssim += k * o.ssim;
        self.iou += k * o.iou;
        self.total += k * o.total;
    }
}

/// Per-output components plus their sums over the six outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub outputs: Vec<LossComponents>,
    pub sum: LossComponents,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.sum.total
    }
}

pub fn hybrid_loss(p: ArrayView2<f64>, g: ArrayView2<f64>, flags: LossFlags) -> Result<LossComponents> {
    flags.validate()?;
    check_pair(&p, &g)?;
    let mut c = LossComponents::default();
    if flags.bce {
        c.bce = bce_loss(p, g)?;
    }
    if flags.ssim {
        c.ssim = ssim_loss(p, g)?;
    }
    if flags.iou {
        c.iou = iou_loss(p, g)?;
    }
    c.total = c.bce + c.ssim + c.iou;
    Ok(c)
}

/// Enabled components and dL/dP of their sum. Disabled components report 0.
pub fn hybrid_with_grad(
    p: ArrayView2<f64>,
    g: ArrayView2<f64>,
    flags: LossFlags,
) -> Result<(LossComponents, Array2<f64>)> {
    flags.validate()?;
    check_pair(&p, &g)?;
    let mut c = LossComponents::default();
    let mut grad = Array2::zeros(p.dim());
    if flags.bce {
        let (v, d) = bce_with_grad(p, g)?;
        c.bce = v;
        grad += &d;
    }
    if flags.ssim {
        let (v, d) = ssim_with_grad(p, g)?;
        c.ssim = v;
        grad += &d;
    }
    if flags.iou {
        let (v, d) = iou_with_grad(p, g)?;
        c.iou = v;
        grad += &d;
    }
    c.total = c.bce + c.ssim + c.iou;
    Ok((c, grad))
}

/// Sum of the hybrid loss over the six probability maps.
pub fn total_loss(probs: &[Array2<f64>], g: ArrayView2<f64>, flags: LossFlags) -> Result<LossBreakdown> {
    if probs.len() != NUM_OUTPUTS {
        return shape_err(format!("expected {NUM_OUTPUTS} outputs, got {}", probs.len()));
    }
    let mut out = LossBreakdown::default();
    for p in probs {
        let c = hybrid_loss(p.view(), g, flags)?;
        out.sum.accumulate(&c, 1.0);
        out.outputs.push(c);
    }
    Ok(out)
}

/// Value of [`batch_loss_from_logits`] without the gradients.
pub fn batch_loss_value(logits: &[&Tensor], masks: &Tensor, flags: LossFlags) -> Result<LossBreakdown> {
    check_batch(logits, masks)?;
    let n = masks.dim().0;
    let mut out = LossBreakdown { outputs: vec![LossComponents::default(); NUM_OUTPUTS], ..Default::default() };
    for (k, logit) in logits.iter().enumerate() {
        for b in 0..n {
            let p = logit.index_axis(Axis(0), b).index_axis(Axis(0), 0).mapv(sigmoid);
            let gt = masks.index_axis(Axis(0), b);
            let c = hybrid_loss(p.view(), gt.index_axis(Axis(0), 0), flags)?;
            out.outputs[k].accumulate(&c, 1.0 / n as f64);
            out.sum.accumulate(&c, 1.0 / n as f64);
        }
    }
    Ok(out)
}

fn check_batch(logits: &[&Tensor], masks: &Tensor) -> Result<()> {
    if logits.len() != NUM_OUTPUTS {
        return shape_err(format!("expected {NUM_OUTPUTS} outputs, got {}", logits.len()));
    }
    if masks.dim().1 != 1 {
        return shape_err(format!("masks must have one channel, got {}", masks.dim().1));
    }
    for (k, logit) in logits.iter().enumerate() {
        if logit.dim() != masks.dim() {
            return shape_err(format!("output {} has shape {:?}, masks {:?}", k + 1, logit.dim(), masks.dim()));
        }
    }
    Ok(())
}

/// Batch loss from six `(N, 1, H, W)` logit tensors against `(N, 1, H, W)`
/// masks: the six-output total averaged over samples. Also returns dL/dlogit
/// for each output.
///
/// The BCE part of the logit gradient is taken in closed form, `(P − G)/HW`,
/// which matches the clamped loss wherever the clamp is inactive and keeps
/// saturated wrong pixels trainable.
pub fn batch_loss_from_logits(
    logits: &[&Tensor],
    masks: &Tensor,
    flags: LossFlags,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    flags.validate()?;
    check_batch(logits, masks)?;
    let (n, _, h, w) = masks.dim();
    let mut out = LossBreakdown { outputs: vec![LossComponents::default(); NUM_OUTPUTS], ..Default::default() };
    let mut seeds = Vec::with_capacity(NUM_OUTPUTS);
    let inv_n = 1.0 / n as f64;
    let hw = (h * w) as f64;
    for (k, logit) in logits.iter().enumerate() {
        let mut seed = Tensor::zeros(masks.dim());
        for b in 0..n {
            let z = logit.index_axis(Axis(0), b).index_axis(Axis(0), 0).to_owned();
            let gt = masks.index_axis(Axis(0), b);
            let gt = gt.index_axis(Axis(0), 0);
            let p = z.mapv(sigmoid);
            let mut rest = flags;
            rest.bce = false;
            let mut comps = LossComponents::default();
            let mut d_logit = Array2::zeros((h, w));
            if rest.ssim || rest.iou {
                let (rc, d_p) = hybrid_with_grad(p.view(), gt, rest)?;
                comps = rc;
                d_logit = d_p * &p.mapv(|v| v * (1.0 - v));
            }
            if flags.bce {
                comps.bce = bce_loss(p.view(), gt)?;
                comps.total += comps.bce;
                d_logit += &((&p - &gt) / hw);
            }
            out.outputs[k].accumulate(&comps, inv_n);
            out.sum.accumulate(&comps, inv_n);
            seed.index_axis_mut(Axis(0), b).index_axis_mut(Axis(0), 0).assign(&(d_logit * inv_n));
        }
        seeds.push(seed);
    }
    Ok((out, seeds))
}
