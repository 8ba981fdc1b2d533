//! Progressive decoder: per-stage pooled SE attention (PI-SE), 1×1 conv
//! blocks with 2× bilinear upsampling, top-down additive skips and six
//! supervised heads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::{StageBundle, StageConfig, NUM_STAGES};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{init_batch_norm, init_conv, init_se_gate, residual_gate, se_gate};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Gap,
    Gmp,
}

impl PoolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Gap => "GAP",
            PoolMode::Gmp => "GMP",
        }
    }
}

impl FromStr for PoolMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GAP" => Ok(PoolMode::Gap),
            "GMP" => Ok(PoolMode::Gmp),
            other => Err(Error::Config(format!("unknown pooling mode `{other}`"))),
        }
    }
}

/// Pooling used by the attention gate of each decoder stage, stage 1 first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolingSchedule {
    pub modes: [PoolMode; NUM_STAGES],
}

impl Default for PoolingSchedule {
    /// GMP in stages 1–2, GAP in stages 3–5.
    fn default() -> Self {
        use PoolMode::*;
        Self { modes: [Gmp, Gmp, Gap, Gap, Gap] }
    }
}

impl PoolingSchedule {
    pub fn mode(&self, stage: usize) -> PoolMode {
        self.modes[stage - 1]
    }

    /// `high` stages counted from stage 5 downwards use `high_mode`, the rest
    /// use the other mode.
    fn split(high: usize, high_mode: PoolMode) -> Self {
        let low_mode = match high_mode {
            PoolMode::Gap => PoolMode::Gmp,
            PoolMode::Gmp => PoolMode::Gap,
        };
        let mut modes = [low_mode; NUM_STAGES];
        for m in modes.iter_mut().skip(NUM_STAGES - high) {
            *m = high_mode;
        }
        Self { modes }
    }

    /// Ablation grid with its row labels. "aGAP+bGMP" puts GAP in the `a`
    /// highest stages; "aGMP+bGAP" puts GMP there.
    pub fn ablation_grid() -> Vec<(&'static str, PoolingSchedule)> {
        use PoolMode::*;
        vec![
            ("5GAP (w/o PI-SE)", Self::split(5, Gap)),
            ("4GAP+1GMP", Self::split(4, Gap)),
            ("3GAP+2GMP", Self::split(3, Gap)),
            ("2GAP+3GMP", Self::split(2, Gap)),
            ("1GAP+4GMP", Self::split(1, Gap)),
            ("5GMP", Self::split(5, Gmp)),
            ("4GMP+1GAP", Self::split(4, Gmp)),
            ("3GMP+2GAP", Self::split(3, Gmp)),
            ("2GMP+3GAP", Self::split(2, Gmp)),
            ("1GMP+4GAP", Self::split(1, Gmp)),
        ]
    }
}

impl fmt::Display for PoolingSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<_> = self.modes.iter().map(|m| m.as_str()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for PoolingSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let modes = s.split(',').map(str::parse).collect::<Result<Vec<PoolMode>>>()?;
        let modes: [PoolMode; NUM_STAGES] = modes
            .try_into()
            .map_err(|v: Vec<PoolMode>| Error::Config(format!("schedule needs {NUM_STAGES} entries, got {}", v.len())))?;
        Ok(Self { modes })
    }
}

/// Six pre-sigmoid maps at input resolution.
#[derive(Clone, Copy, Debug)]
pub struct PredictionSet {
    /// Side heads of stages 1..5.
    pub side: [Var; NUM_STAGES],
    pub final_logit: Var,
}

impl PredictionSet {
    /// Logits in supervision order: k = 1 is the final head, k = i + 1 the
    /// side head of stage i.
    pub fn logits(&self) -> [Var; 6] {
        let s = self.side;
        [self.final_logit, s[0], s[1], s[2], s[3], s[4]]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Pise {
    pub out: Var,
    pub weights: Var,
}

/// `w = σ(fc2(ReLU(fc1(pool(fm)))))`, output `(w ⊗ fm) ⊕ fm`.
pub fn pise_forward(g: &mut Graph, prefix: &str, fm: Var, mode: PoolMode) -> Result<Pise> {
    let pooled = match mode {
        PoolMode::Gap => g.global_avg(fm),
        PoolMode::Gmp => g.global_max(fm),
    };
    let weights = se_gate(g, prefix, pooled)?;
    let out = residual_gate(g, weights, fm)?;
    Ok(Pise { out, weights })
}

/// `enc ⊕ dec_above`, or `enc` alone at the top stage.
pub fn decoder_fuse(g: &mut Graph, enc: Var, dec_above: Option<Var>) -> Result<Var> {
    match dec_above {
        None => Ok(enc),
        Some(d) => {
            if g.shape(enc) != g.shape(d) {
                return shape_err(format!("skip shapes differ: {:?} vs {:?}", g.shape(enc), g.shape(d)));
            }
            g.add(enc, d)
        }
    }
}

/// `Up×2(ReLU(BN(Conv1×1(fm))))`, without the upsample when `upsample` is false.
pub fn decoder_block(g: &mut Graph, prefix: &str, fm: Var, upsample: bool) -> Result<Var> {
    let y = g.conv_named(fm, &format!("{prefix}.conv"))?;
    let y = g.batch_norm(y, &format!("{prefix}.bn"))?;
    let y = g.relu(y);
    if upsample {
        let [_, _, h, w] = g.shape(y);
        Ok(g.resize(y, 2 * h, 2 * w))
    } else {
        Ok(y)
    }
}

/// Output channels of decoder block `stage`.
fn block_channels(cfg: &StageConfig, stage: usize) -> usize {
    if stage == 1 {
        cfg.channels(1)
    } else {
        cfg.channels(stage - 1)
    }
}

pub fn init_decoder<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, cfg: &StageConfig) {
    for stage in 1..=NUM_STAGES {
        let c = cfg.channels(stage);
        let out = block_channels(cfg, stage);
        let p = format!("{prefix}.stage{stage}");
        init_se_gate(store, rng, &format!("{p}.pise"), c);
        init_conv(store, rng, &format!("{p}.block.conv"), out, c, 1, true);
        init_batch_norm(store, &format!("{p}.block.bn"), out);
        init_conv(store, rng, &format!("{prefix}.head{}", stage + 1), 1, out, 1, true);
    }
    init_conv(store, rng, &format!("{prefix}.head1"), 1, cfg.channels(1), 1, true);
}

/// Intermediate nodes of a decoder pass.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub predictions: PredictionSet,
    pub pise: Vec<Pise>,
}

pub fn decoder_forward(
    g: &mut Graph,
    prefix: &str,
    enc: &StageBundle,
    schedule: &PoolingSchedule,
) -> Result<DecoderTrace> {
    let [_, _, h, w] = g.shape(enc.stage(1));
    let mut above: Option<Var> = None;
    let mut side = Vec::with_capacity(NUM_STAGES);
    let mut pise = Vec::with_capacity(NUM_STAGES);
    let mut f1_de = None;
    for stage in (1..=NUM_STAGES).rev() {
        let p = format!("{prefix}.stage{stage}");
        let fused = decoder_fuse(g, enc.stage(stage), above)?;
        let att = pise_forward(g, &format!("{p}.pise"), fused, schedule.mode(stage))?;
        let de = decoder_block(g, &format!("{p}.block"), att.out, stage >= 2)?;
        let head = g.conv_named(de, &format!("{prefix}.head{}", stage + 1))?;
        side.push(g.resize(head, h, w));
        pise.push(att);
        above = Some(de);
        if stage == 1 {
            f1_de = Some(de);
        }
    }
    side.reverse();
    pise.reverse();
    let final_logit = g.conv_named(f1_de.expect("stage 1 runs"), &format!("{prefix}.head1"))?;
    let side: [Var; NUM_STAGES] = side.try_into().expect("five stages");
    Ok(DecoderTrace { predictions: PredictionSet { side, final_logit }, pise })
}
