//! Per-stage encoder fusion.
//!
//! Frequency and noise features are fused by cross-modality dual attention
//! (a spatial branch, a channel branch and an intermediate 1×1 branch), and
//! the result gates the RGB features through guided attention:
//! `F_en = rgb ⊗ cmda ⊕ rgb`. The ablation variants replace either step by
//! plain addition or by concatenation followed by a 1×1 conv.

use std::fmt;
use std::str::FromStr;

use ndarray::Zip;
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{pair_softmax, Graph, Var};
use crate::layers::init_conv;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// How frequency and noise features are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ImperceptibleFusion {
    Add,
    Cat,
    Cmda,
}

/// How the fused imperceptible features are combined with RGB features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RgbFusion {
    Add,
    Cat,
    Ga,
}

impl ImperceptibleFusion {
    pub fn as_str(self) -> &'static str {
        match self {
            ImperceptibleFusion::Add => "add",
            ImperceptibleFusion::Cat => "cat",
            ImperceptibleFusion::Cmda => "cmda",
        }
    }
}

impl RgbFusion {
    pub fn as_str(self) -> &'static str {
        match self {
            RgbFusion::Add => "add",
            RgbFusion::Cat => "cat",
            RgbFusion::Ga => "ga",
        }
    }
}

impl FromStr for ImperceptibleFusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "cat" => Ok(Self::Cat),
            "cmda" => Ok(Self::Cmda),
            other => Err(Error::Config(format!("unknown imperceptible fusion `{other}`"))),
        }
    }
}

impl FromStr for RgbFusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "cat" => Ok(Self::Cat),
            "ga" => Ok(Self::Ga),
            other => Err(Error::Config(format!("unknown rgb fusion `{other}`"))),
        }
    }
}

impl fmt::Display for ImperceptibleFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for RgbFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The fusion-ablation grid, in table order.
pub const FUSION_GRID: [(ImperceptibleFusion, RgbFusion); 7] = [
    (ImperceptibleFusion::Add, RgbFusion::Add),
    (ImperceptibleFusion::Cat, RgbFusion::Cat),
    (ImperceptibleFusion::Add, RgbFusion::Ga),
    (ImperceptibleFusion::Cat, RgbFusion::Ga),
    (ImperceptibleFusion::Cmda, RgbFusion::Add),
    (ImperceptibleFusion::Cmda, RgbFusion::Cat),
    (ImperceptibleFusion::Cmda, RgbFusion::Ga),
];

/// Frequency and noise features of one stage.
#[derive(Clone, Copy, Debug)]
pub struct ModalityPair {
    pub freq: Var,
    pub noise: Var,
}

/// Two-way attention weights; `w_a + w_b = 1` elementwise.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub w_a: Tensor,
    pub w_b: Tensor,
}

/// Elementwise two-way softmax, stabilized by subtracting max(a, b).
pub fn modality_softmax(a: &Tensor, b: &Tensor) -> Result<AttentionWeights> {
    if a.shape() != b.shape() {
        return shape_err(format!("softmax operands differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mut w_a = a.clone();
    let mut w_b = b.clone();
    Zip::from(&mut w_a).and(&mut w_b).for_each(|x, y| {
        let (p, q) = (*x, *y);
        *x = pair_softmax(p, q);
        *y = pair_softmax(q, p);
    });
    Ok(AttentionWeights { w_a, w_b })
}

/// Intermediate nodes of one CMDA evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Cmda {
    pub out: Var,
    pub spatial_freq: Var,
    pub spatial_noise: Var,
    pub channel_freq: Var,
    pub channel_noise: Var,
}

pub fn spatial_hidden(c: usize) -> usize {
    (c / 2).max(1)
}

pub fn init_cmda<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, c: usize) {
    init_conv(store, rng, &format!("{prefix}.intermediate"), c, 2 * c, 1, true);
    for m in ["freq", "noise"] {
        init_conv(store, rng, &format!("{prefix}.spatial_{m}.conv1"), spatial_hidden(c), 2 * c, 1, true);
        init_conv(store, rng, &format!("{prefix}.spatial_{m}.conv2"), 1, spatial_hidden(c), 1, true);
        init_conv(store, rng, &format!("{prefix}.channel_{m}"), c, 2 * c, 1, true);
    }
}

fn check_pair(g: &Graph, pair: &ModalityPair) -> Result<()> {
    if g.shape(pair.freq) != g.shape(pair.noise) {
        return shape_err(format!(
            "modality shapes differ: {:?} vs {:?}",
            g.shape(pair.freq),
            g.shape(pair.noise)
        ));
    }
    Ok(())
}

/// Cross-modality dual attention over one stage's frequency and noise maps.
pub fn cmda_forward(g: &mut Graph, prefix: &str, pair: ModalityPair) -> Result<Cmda> {
    check_pair(g, &pair)?;
    let cat = g.concat(pair.freq, pair.noise)?;
    let f_in = g.conv_named(cat, &format!("{prefix}.intermediate"))?;

    let spatial_logit = |g: &mut Graph, m: &str| -> Result<Var> {
        let h = g.conv_named(cat, &format!("{prefix}.spatial_{m}.conv1"))?;
        let h = g.relu(h);
        g.conv_named(h, &format!("{prefix}.spatial_{m}.conv2"))
    };
    let sf = spatial_logit(g, "freq")?;
    let sn = spatial_logit(g, "noise")?;
    let spatial_freq = g.pair_softmax(sf, sn)?;
    let spatial_noise = g.pair_softmax(sn, sf)?;
    let f_sa = weighted_sum(g, spatial_freq, spatial_noise, pair, f_in)?;

    let cf = g.conv_named(cat, &format!("{prefix}.channel_freq"))?;
    let cf = g.global_avg(cf);
    let cn = g.conv_named(cat, &format!("{prefix}.channel_noise"))?;
    let cn = g.global_avg(cn);
    let channel_freq = g.pair_softmax(cf, cn)?;
    let channel_noise = g.pair_softmax(cn, cf)?;
    let f_ca = weighted_sum(g, channel_freq, channel_noise, pair, f_in)?;

    let out = g.add(f_sa, f_ca)?;
    Ok(Cmda { out, spatial_freq, spatial_noise, channel_freq, channel_noise })
}

fn weighted_sum(g: &mut Graph, wf: Var, wn: Var, pair: ModalityPair, f_in: Var) -> Result<Var> {
    let a = g.mul(wf, pair.freq)?;
    let b = g.mul(wn, pair.noise)?;
    let s = g.add(a, b)?;
    g.add(s, f_in)
}

/// `(rgb ⊗ cmda) ⊕ rgb`
pub fn guided_attention(g: &mut Graph, rgb: Var, cmda: Var) -> Result<Var> {
    if g.shape(rgb) != g.shape(cmda) {
        return shape_err(format!("guided attention shapes differ: {:?} vs {:?}", g.shape(rgb), g.shape(cmda)));
    }
    let m = g.mul(rgb, cmda)?;
    g.add(m, rgb)
}

/// Nodes produced by one stage of fusion.
#[derive(Clone, Copy, Debug)]
pub struct FusionTrace {
    /// Fused frequency/noise features (F_CMDA for the default modes).
    pub imperceptible: Var,
    /// Encoder output of the stage.
    pub out: Var,
    pub cmda: Option<Cmda>,
}

pub fn init_fusion<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    c: usize,
    imperceptible: ImperceptibleFusion,
    rgb: RgbFusion,
) {
    match imperceptible {
        ImperceptibleFusion::Add => {}
        ImperceptibleFusion::Cat => init_conv(store, rng, &format!("{prefix}.cat_imperceptible"), c, 2 * c, 1, true),
        ImperceptibleFusion::Cmda => init_cmda(store, rng, &format!("{prefix}.cmda"), c),
    }
    if rgb == RgbFusion::Cat {
        init_conv(store, rng, &format!("{prefix}.cat_rgb"), c, 2 * c, 1, true);
    }
}

pub fn fusion_variant_forward(
    g: &mut Graph,
    prefix: &str,
    rgb: Var,
    pair: ModalityPair,
    imperceptible: ImperceptibleFusion,
    rgb_mode: RgbFusion,
) -> Result<FusionTrace> {
    check_pair(g, &pair)?;
    let (imp, cmda) = match imperceptible {
        ImperceptibleFusion::Add => (g.add(pair.freq, pair.noise)?, None),
        ImperceptibleFusion::Cat => {
            let cat = g.concat(pair.freq, pair.noise)?;
            (g.conv_named(cat, &format!("{prefix}.cat_imperceptible"))?, None)
        }
        ImperceptibleFusion::Cmda => {
            let c = cmda_forward(g, &format!("{prefix}.cmda"), pair)?;
            (c.out, Some(c))
        }
    };
    if g.shape(rgb) != g.shape(imp) {
        return shape_err(format!("rgb {:?} vs fused {:?}", g.shape(rgb), g.shape(imp)));
    }
    let out = match rgb_mode {
        RgbFusion::Add => g.add(rgb, imp)?,
        RgbFusion::Cat => {
            let cat = g.concat(rgb, imp)?;
            g.conv_named(cat, &format!("{prefix}.cat_rgb"))?
        }
        RgbFusion::Ga => guided_attention(g, rgb, imp)?,
    };
    Ok(FusionTrace { imperceptible: imp, out, cmda })
}

/// Guided cross-modality dual attention for one stage.
pub fn gcmda_forward(g: &mut Graph, prefix: &str, rgb: Var, pair: ModalityPair) -> Result<Var> {
    let cmda = cmda_forward(g, &format!("{prefix}.cmda"), pair)?;
    guided_attention(g, rgb, cmda.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::params::ParamKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pattern(shape: (usize, usize, usize, usize), k: f64) -> Tensor {
        let mut i = 0.0;
        Tensor::from_shape_simple_fn(shape, || {
            i += 1.0;
            (i * k).sin() * 2.0
        })
    }

    #[test]
    fn softmax_examples() {
        let a = Tensor::from_elem((1, 1, 2, 2), 0.7);
        let w = modality_softmax(&a, &a).unwrap();
        assert!(w.w_a.iter().chain(w.w_b.iter()).all(|v| *v == 0.5));
        let b = Tensor::zeros((1, 1, 1, 1));
        let w = modality_softmax(&(&b + 3f64.ln()), &b).unwrap();
        assert!((w.w_a[[0, 0, 0, 0]] - 0.75).abs() < 1e-15);
        let w = modality_softmax(&(&b + 1000.0), &b).unwrap();
        assert_eq!(w.w_a[[0, 0, 0, 0]], 1.0);
        assert!(w.w_b[[0, 0, 0, 0]].is_finite());
        assert!(modality_softmax(&a, &b).is_err());
    }

    fn cmda_store(c: usize, zero: bool) -> ParamStore {
        let mut st = ParamStore::new();
        init_fusion(&mut st, &mut ChaCha8Rng::seed_from_u64(5), "f", c, ImperceptibleFusion::Cmda, RgbFusion::Ga);
        init_fusion(&mut st, &mut ChaCha8Rng::seed_from_u64(6), "f", c, ImperceptibleFusion::Cat, RgbFusion::Cat);
        if zero {
            for n in st.names(ParamKind::Trainable) {
                st.tensor_mut(&n).unwrap().fill(0.0);
            }
        }
        st
    }

    #[test]
    fn zeroed_cmda_on_equal_inputs_doubles() {
        let st = cmda_store(4, true);
        let x = pattern((1, 4, 4, 4), 0.3);
        let mut g = Graph::new(&st, Mode::Eval);
        let f = g.input(x.clone());
        let n = g.input(x.clone());
        let c = cmda_forward(&mut g, "f.cmda", ModalityPair { freq: f, noise: n }).unwrap();
        for (a, b) in g.value(c.out).iter().zip(x.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        assert!(g.value(c.spatial_freq).iter().all(|v| *v == 0.5));
    }

    #[test]
    fn cmda_shapes_and_zero_input() {
        let st = cmda_store(6, false);
        let mut g = Graph::new(&st, Mode::Eval);
        let f = g.input(pattern((2, 6, 8, 4), 0.1));
        let n = g.input(pattern((2, 6, 8, 4), 0.2));
        let c = cmda_forward(&mut g, "f.cmda", ModalityPair { freq: f, noise: n }).unwrap();
        assert_eq!(g.shape(c.out), [2, 6, 8, 4]);
        assert_eq!(g.shape(c.spatial_freq), [2, 1, 8, 4]);
        assert_eq!(g.shape(c.channel_freq), [2, 6, 1, 1]);
        let bad = g.input(Tensor::zeros((2, 6, 4, 4)));
        assert!(cmda_forward(&mut g, "f.cmda", ModalityPair { freq: f, noise: bad }).is_err());

        // zero inputs with zero biases
        let mut g = Graph::new(&st, Mode::Eval);
        let z = g.input(Tensor::zeros((1, 6, 4, 4)));
        let c = cmda_forward(&mut g, "f.cmda", ModalityPair { freq: z, noise: z }).unwrap();
        assert!(g.value(c.out).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn guided_attention_identities() {
        let st = ParamStore::new();
        let mut g = Graph::new(&st, Mode::Eval);
        let r = g.input(pattern((1, 3, 2, 2), 0.9));
        let zero = g.input(Tensor::zeros((1, 3, 2, 2)));
        let one = g.input(Tensor::from_elem((1, 3, 2, 2), 1.0));
        let out = guided_attention(&mut g, r, zero).unwrap();
        assert_eq!(g.value(out), g.value(r));
        let out = guided_attention(&mut g, r, one).unwrap();
        assert_eq!(*g.value(out), g.value(r) * 2.0);
        let out = guided_attention(&mut g, zero, r).unwrap();
        assert!(g.value(out).iter().all(|v| *v == 0.0));
        let two = g.input(Tensor::from_elem((1, 1, 1, 1), 2.0));
        let three = g.input(Tensor::from_elem((1, 1, 1, 1), 3.0));
        let out = guided_attention(&mut g, two, three).unwrap();
        assert_eq!(g.value(out)[[0, 0, 0, 0]], 8.0);
    }

    #[test]
    fn variants() {
        let st = cmda_store(4, false);
        let x = pattern((1, 4, 4, 4), 0.4);
        let mut g = Graph::new(&st, Mode::Eval);
        let r = g.input(x.clone());
        let f = g.input(x.clone());
        let n = g.input(x.clone());
        let pair = ModalityPair { freq: f, noise: n };
        let t = fusion_variant_forward(&mut g, "f", r, pair, ImperceptibleFusion::Add, RgbFusion::Add).unwrap();
        for (a, b) in g.value(t.out).iter().zip(x.iter()) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
        let t = fusion_variant_forward(&mut g, "f", r, pair, ImperceptibleFusion::Cat, RgbFusion::Cat).unwrap();
        assert_eq!(g.shape(t.out), [1, 4, 4, 4]);
        let t = fusion_variant_forward(&mut g, "f", r, pair, ImperceptibleFusion::Cmda, RgbFusion::Ga).unwrap();
        let direct = gcmda_forward(&mut g, "f", r, pair).unwrap();
        assert!(g.value(t.out).iter().zip(g.value(direct).iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!("mean".parse::<RgbFusion>().is_err());
        assert!("gate".parse::<ImperceptibleFusion>().is_err());
    }
}
