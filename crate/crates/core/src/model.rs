//! The full network: RGB, frequency and noise encoders, per-stage fusion and
//! the progressive decoder.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    backbone_forward, check_input, init_backbone, make_stage_config, run_stages, BackbonePreset, StageBundle,
    StageConfig, NUM_STAGES,
};
use crate::decoder::{decoder_forward, init_decoder, DecoderTrace, PoolingSchedule, PredictionSet};
use crate::error::{Error, Result};
use crate::frequency::{dct_extractor_forward, frequency_stage1, init_frequency_front, DctConfig};
use crate::fusion::{fusion_variant_forward, init_fusion, FusionTrace, ImperceptibleFusion, ModalityPair, RgbFusion};
use crate::graph::{Graph, Var};
use crate::loss::LossFlags;
use crate::noise::{init_noise_front, noise_extractor_forward};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub const RGB_BACKBONE: &str = "rgb.backbone";
pub const FREQ_FRONT: &str = "freq.dct";
pub const FREQ_BACKBONE: &str = "freq.backbone";
pub const NOISE_FRONT: &str = "noise.front";
pub const NOISE_BACKBONE: &str = "noise.backbone";
pub const DECODER: &str = "decoder";

pub fn fusion_prefix(stage: usize) -> String {
    format!("fusion.stage{stage}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriPINetConfig {
    pub preset: BackbonePreset,
    pub dct: DctConfig,
    pub schedule: PoolingSchedule,
    pub imperceptible: ImperceptibleFusion,
    pub rgb_fusion: RgbFusion,
    pub loss: LossFlags,
    pub seed: u64,
}

impl Default for TriPINetConfig {
    fn default() -> Self {
        Self {
            preset: BackbonePreset::Desk,
            dct: DctConfig::default(),
            schedule: PoolingSchedule::default(),
            imperceptible: ImperceptibleFusion::Cmda,
            rgb_fusion: RgbFusion::Ga,
            loss: LossFlags::default(),
            seed: 0,
        }
    }
}

impl TriPINetConfig {
    pub fn validate(&self) -> Result<()> {
        self.dct.validate()?;
        self.loss.validate()?;
        self.stages().validate()
    }

    pub fn stages(&self) -> StageConfig {
        make_stage_config(self.preset)
    }

    /// Flat `key → value` view, used for echoing configs and for comparing a
    /// checkpoint against the requested model.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("model.preset".into(), self.preset.to_string());
        m.insert("model.dct.patch_size".into(), self.dct.patch_size.to_string());
        m.insert("model.dct.block_size".into(), self.dct.block_size.to_string());
        m.insert("decoder.schedule".into(), self.schedule.to_string());
        m.insert("fusion.imperceptible".into(), self.imperceptible.to_string());
        m.insert("fusion.rgb".into(), self.rgb_fusion.to_string());
        m.insert("loss.bce".into(), self.loss.bce.to_string());
        m.insert("loss.ssim".into(), self.loss.ssim.to_string());
        m.insert("loss.iou".into(), self.loss.iou.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| m.get(k).ok_or_else(|| Error::Config(format!("missing key `{k}`")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("`{k}` must be a non-negative integer")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?.parse().map_err(|_| Error::Config(format!("`{k}` must be true or false")))
        };
        let cfg = Self {
            preset: get("model.preset")?.parse()?,
            dct: DctConfig { patch_size: num("model.dct.patch_size")?, block_size: num("model.dct.block_size")? },
            schedule: get("decoder.schedule")?.parse()?,
            imperceptible: get("fusion.imperceptible")?.parse()?,
            rgb_fusion: get("fusion.rgb")?.parse()?,
            loss: LossFlags { bce: flag("loss.bce")?, ssim: flag("loss.ssim")?, iou: flag("loss.iou")? },
            seed: get("seed")?.parse().map_err(|_| Error::Config("`seed` must be an integer".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keys whose values differ between the two configs.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let (a, b) = (self.to_map(), other.to_map());
        a.keys().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
    }
}

/// Seeded parameter initialization. Constrained kernels are projected, SRM
/// kernels are frozen and every value is rounded to single precision so that
/// checkpoints reproduce it exactly.
pub fn init_params(cfg: &TriPINetConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let stages = cfg.stages();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut st = ParamStore::new();
    init_backbone(&mut st, &mut rng, RGB_BACKBONE, &stages, 1, 3);
    init_frequency_front(&mut st, &mut rng, FREQ_FRONT, &cfg.dct, stages.channels(1));
    init_backbone(&mut st, &mut rng, FREQ_BACKBONE, &stages, 2, stages.channels(1));
    init_noise_front(&mut st, &mut rng, NOISE_FRONT);
    init_backbone(&mut st, &mut rng, NOISE_BACKBONE, &stages, 1, 3);
    for stage in 1..=NUM_STAGES {
        init_fusion(&mut st, &mut rng, &fusion_prefix(stage), stages.channels(stage), cfg.imperceptible, cfg.rgb_fusion);
    }
    init_decoder(&mut st, &mut rng, DECODER, &stages);
    crate::noise::project_in_store(&mut st, &mut rng, NOISE_FRONT)?;
    st.quantize_f32();
    Ok(st)
}

/// Checks that `store` holds exactly the parameters `cfg` needs, with the
/// right kinds and shapes.
pub fn check_params(cfg: &TriPINetConfig, store: &ParamStore) -> Result<()> {
    let skeleton = init_params(&TriPINetConfig { seed: 0, ..cfg.clone() })?;
    let mut problems = Vec::new();
    for (name, e) in skeleton.iter() {
        match store.entry(name) {
            Err(_) => problems.push(format!("missing `{name}`")),
            Ok(got) if got.kind != e.kind => problems.push(format!("`{name}` is {:?}, expected {:?}", got.kind, e.kind)),
            Ok(got) if got.value.shape() != e.value.shape() => {
                problems.push(format!("`{name}` has shape {:?}, expected {:?}", got.value.shape(), e.value.shape()))
            }
            Ok(_) => {}
        }
    }
    for (name, _) in store.iter() {
        if !skeleton.contains(name) {
            problems.push(format!("unexpected `{name}`"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("parameters do not match the config: {}", problems.join("; "))))
    }
}

/// Every node a forward pass produces, for inspection.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// The 48-channel rearranged DCT map feeding the frequency stream.
    pub dct: Var,
    pub rgb: StageBundle,
    pub freq: StageBundle,
    pub noise: StageBundle,
    pub fusion: Vec<FusionTrace>,
    pub encoder: StageBundle,
    pub decoder: DecoderTrace,
}

/// `(x / 255 − mean) / std` per channel.
pub fn normalize_rgb(images: &Tensor) -> Tensor {
    let mut out = images / 255.0;
    for (c, mut plane) in out.axis_iter_mut(ndarray::Axis(1)).enumerate() {
        plane.mapv_inplace(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
    }
    out
}

/// Full forward pass over a `(N, 3, H, W)` batch of raw pixel values.
pub fn tripinet_trace(g: &mut Graph, cfg: &TriPINetConfig, image: Var) -> Result<ForwardTrace> {
    check_input(g, image, 3)?;
    if g.value(image).iter().any(|v| !(0.0..=255.0).contains(v)) {
        return Err(Error::Input("pixel values must lie in [0, 255]".into()));
    }
    let stages = cfg.stages();

    let rgb_in = g.input(normalize_rgb(g.value(image)));
    let rgb = backbone_forward(g, RGB_BACKBONE, rgb_in, &stages)?;

    let freq_feats = dct_extractor_forward(g, FREQ_FRONT, image, &cfg.dct)?;
    let f1 = frequency_stage1(g, FREQ_FRONT, freq_feats)?;
    let mut freq_maps = vec![f1];
    freq_maps.extend(run_stages(g, FREQ_BACKBONE, &stages, 2, f1)?);
    let freq = StageBundle::new(freq_maps)?;

    let residual = noise_extractor_forward(g, NOISE_FRONT, image)?;
    let noise = backbone_forward(g, NOISE_BACKBONE, residual, &stages)?;

    let mut fusion = Vec::with_capacity(NUM_STAGES);
    for stage in 1..=NUM_STAGES {
        let pair = ModalityPair { freq: freq.stage(stage), noise: noise.stage(stage) };
        fusion.push(fusion_variant_forward(
            g,
            &fusion_prefix(stage),
            rgb.stage(stage),
            pair,
            cfg.imperceptible,
            cfg.rgb_fusion,
        )?);
    }
    let encoder = StageBundle::new(fusion.iter().map(|f| f.out).collect())?;
    let decoder = decoder_forward(g, DECODER, &encoder, &cfg.schedule)?;
    Ok(ForwardTrace { dct: freq_feats, rgb, freq, noise, fusion, encoder, decoder })
}

pub fn tripinet_forward(g: &mut Graph, cfg: &TriPINetConfig, image: Var) -> Result<PredictionSet> {
    Ok(tripinet_trace(g, cfg, image)?.decoder.predictions)
}
