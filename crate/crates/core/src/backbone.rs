//! VGG-shaped staged feature extractor used by all three encoder streams.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{channel_vec, he_kernel, ParamKind, ParamStore};

pub const NUM_STAGES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackbonePreset {
    Vgg16,
    Vgg11,
    Desk,
}

impl BackbonePreset {
    pub const ALL: [BackbonePreset; 3] = [BackbonePreset::Vgg16, BackbonePreset::Vgg11, BackbonePreset::Desk];

    pub fn as_str(self) -> &'static str {
        match self {
            BackbonePreset::Vgg16 => "vgg16",
            BackbonePreset::Vgg11 => "vgg11",
            BackbonePreset::Desk => "desk",
        }
    }
}

impl fmt::Display for BackbonePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackbonePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16" => Ok(BackbonePreset::Vgg16),
            "vgg11" => Ok(BackbonePreset::Vgg11),
            "desk" => Ok(BackbonePreset::Desk),
            other => Err(Error::Config(format!("unknown backbone preset `{other}`"))),
        }
    }
}

/// Channel widths and depth of the five stages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub stage_channels: [usize; NUM_STAGES],
    pub convs_per_stage: [usize; NUM_STAGES],
    pub input_channels: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0
            || self.stage_channels.contains(&0)
            || self.convs_per_stage.contains(&0)
        {
            return Err(Error::Config(format!("stage config entries must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Channels of stage `i` (1-based).
    pub fn channels(&self, stage: usize) -> usize {
        self.stage_channels[stage - 1]
    }
}

pub fn make_stage_config(preset: BackbonePreset) -> StageConfig {
    let (stage_channels, convs_per_stage) = match preset {
        BackbonePreset::Vgg16 => ([64, 128, 256, 512, 512], [2, 2, 3, 3, 3]),
        BackbonePreset::Vgg11 => ([64, 128, 256, 512, 512], [1, 1, 2, 2, 2]),
        BackbonePreset::Desk => ([8, 16, 32, 64, 64], [1, 1, 1, 1, 1]),
    };
    StageConfig { stage_channels, convs_per_stage, input_channels: 3 }
}

/// The five per-stage outputs of one stream, stage 1 first.
#[derive(Clone, Debug)]
pub struct StageBundle {
    pub maps: Vec<Var>,
}

impl StageBundle {
    pub fn new(maps: Vec<Var>) -> Result<Self> {
        if maps.len() != NUM_STAGES {
            return Err(Error::Shape(format!("stage bundle needs {NUM_STAGES} maps, got {}", maps.len())));
        }
        Ok(Self { maps })
    }

    /// Map of stage `i` (1-based).
    pub fn stage(&self, i: usize) -> Var {
        self.maps[i - 1]
    }
}

/// Adds He-initialized 3×3 convs with zero biases for stages `first..=5`.
/// `in_channels` is the channel count entering stage `first`.
pub fn init_backbone<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    cfg: &StageConfig,
    first: usize,
    in_channels: usize,
) {
    let mut cin = in_channels;
    for stage in first..=NUM_STAGES {
        let cout = cfg.channels(stage);
        for j in 1..=cfg.convs_per_stage[stage - 1] {
            let name = format!("{prefix}.stage{stage}.conv{j}");
            store.insert(format!("{name}.weight"), ParamKind::Trainable, he_kernel(rng, cout, cin, 3));
            store.insert(format!("{name}.bias"), ParamKind::Trainable, channel_vec(cout, 0.0));
            cin = cout;
        }
    }
}

pub(crate) fn check_input(g: &Graph, x: Var, channels: usize) -> Result<()> {
    let [_, c, h, w] = g.shape(x);
    if c != channels {
        return Err(Error::Shape(format!("expected {channels} input channels, got {c}")));
    }
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Shape(format!("input {h}x{w} must be a positive multiple of 16")));
    }
    if g.value(x).iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite input value".into()));
    }
    Ok(())
}

fn run_stage(g: &mut Graph, prefix: &str, cfg: &StageConfig, stage: usize, mut x: Var) -> Result<Var> {
    for j in 1..=cfg.convs_per_stage[stage - 1] {
        x = g.conv_named(x, &format!("{prefix}.stage{stage}.conv{j}"))?;
        x = g.relu(x);
    }
    Ok(x)
}

/// Runs stages `first..=5` starting from `tap`, the (pre-pool) output of
/// stage `first - 1`, or the raw input when `first == 1`. Returns the taps of
/// the stages that were run.
pub fn run_stages(g: &mut Graph, prefix: &str, cfg: &StageConfig, first: usize, tap: Var) -> Result<Vec<Var>> {
    let mut taps = Vec::new();
    let mut x = tap;
    for stage in first..=NUM_STAGES {
        if stage > 1 {
            x = g.max_pool2(x)?;
        }
        x = run_stage(g, prefix, cfg, stage, x)?;
        taps.push(x);
    }
    Ok(taps)
}

/// Full five-stage forward pass; stage outputs are tapped before pooling.
pub fn backbone_forward(g: &mut Graph, prefix: &str, input: Var, cfg: &StageConfig) -> Result<StageBundle> {
    check_input(g, input, cfg.input_channels)?;
    StageBundle::new(run_stages(g, prefix, cfg, 1, input)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_store() -> (ParamStore, StageConfig) {
        let cfg = make_stage_config(BackbonePreset::Desk);
        let mut store = ParamStore::new();
        init_backbone(&mut store, &mut ChaCha8Rng::seed_from_u64(1), "rgb", &cfg, 1, 3);
        (store, cfg)
    }

    #[test]
    fn presets() {
        assert_eq!(make_stage_config(BackbonePreset::Vgg16).stage_channels, [64, 128, 256, 512, 512]);
        assert_eq!(make_stage_config(BackbonePreset::Vgg16).convs_per_stage, [2, 2, 3, 3, 3]);
        assert_eq!(make_stage_config(BackbonePreset::Vgg11).convs_per_stage, [1, 1, 2, 2, 2]);
        assert_eq!(make_stage_config(BackbonePreset::Desk).stage_channels, [8, 16, 32, 64, 64]);
        assert!("resnet50".parse::<BackbonePreset>().is_err());
    }

    #[test]
    fn desk_stage_shapes() {
        let (store, cfg) = desk_store();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::from_shape_fn((1, 3, 64, 64), |(_, c, y, x)| ((c + y * 3 + x) % 7) as f64));
        let b = backbone_forward(&mut g, "rgb", x, &cfg).unwrap();
        let shapes: Vec<_> = b.maps.iter().map(|v| g.shape(*v)).collect();
        assert_eq!(
            shapes,
            vec![[1, 8, 64, 64], [1, 16, 32, 32], [1, 32, 16, 16], [1, 64, 8, 8], [1, 64, 4, 4]]
        );
        for v in &b.maps {
            assert!(g.value(*v).iter().all(|a| a.is_finite() && *a >= 0.0));
        }
    }

    #[test]
    fn vgg16_stage5_shape() {
        let cfg = make_stage_config(BackbonePreset::Vgg16);
        let mut store = ParamStore::new();
        init_backbone(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "rgb", &cfg, 1, 3);
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::zeros((1, 3, 256, 256)));
        let b = backbone_forward(&mut g, "rgb", x, &cfg).unwrap();
        assert_eq!(g.shape(b.stage(5)), [1, 512, 16, 16]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let (store, cfg) = desk_store();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::zeros((1, 3, 32, 32)));
        let b = backbone_forward(&mut g, "rgb", x, &cfg).unwrap();
        assert!(b.maps.iter().all(|v| g.value(*v).iter().all(|a| *a == 0.0)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (store, cfg) = desk_store();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::zeros((1, 3, 24, 32)));
        assert!(matches!(backbone_forward(&mut g, "rgb", x, &cfg), Err(Error::Shape(_))));
        let mut bad = Tensor::zeros((1, 3, 16, 16));
        bad[[0, 1, 2, 3]] = f64::NAN;
        let x = g.input(bad);
        assert!(matches!(backbone_forward(&mut g, "rgb", x, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let (store, cfg) = desk_store();
        let input = Tensor::from_shape_fn((1, 3, 32, 32), |(_, c, y, x)| ((c * 31 + y * 7 + x * 13) % 17) as f64);
        let run = || {
            let mut g = Graph::new(&store, Mode::Eval);
            let x = g.input(input.clone());
            let b = backbone_forward(&mut g, "rgb", x, &cfg).unwrap();
            b.maps.iter().map(|v| g.value(*v).clone()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
