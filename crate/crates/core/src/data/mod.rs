//! Desk-scale forgery dataset: procedural splice and copy-move samples,
//! flip augmentation, post-processing attacks and the on-disk layout.

mod attack;
mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use attack::{apply_attack, blur_kernel, blur_sigma, psnr, AttackSpec, BLUR_KERNELS, JPEG_QUALITIES};
pub use io::{
    load_dataset, load_sample, read_mask_png, read_rgb_png, read_split, save_dataset, save_sample, write_gray_png,
    write_mask_png, write_rgb_png, write_split,
};
pub use synth::{
    generate_copy_move, generate_splice, generate_splice_parts, Region, SpliceParts, MAX_AREA_FRACTION,
    MIN_AREA_FRACTION,
};

/// H×W×3 8-bit image.
pub type Image = Array3<u8>;
/// H×W mask with values in {0, 1}.
pub type Mask = Array2<u8>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ForgeryKind {
    Splice,
    CopyMove,
    Authentic,
    /// An image/mask pair supplied from outside without a metadata sidecar.
    External,
}

impl ForgeryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ForgeryKind::Splice => "splice",
            ForgeryKind::CopyMove => "copy_move",
            ForgeryKind::Authentic => "authentic",
            ForgeryKind::External => "external",
        }
    }
}

impl fmt::Display for ForgeryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ForgeryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "splice" => Ok(ForgeryKind::Splice),
            "copy_move" => Ok(ForgeryKind::CopyMove),
            "authentic" => Ok(ForgeryKind::Authentic),
            "external" => Ok(ForgeryKind::External),
            other => Err(Error::Config(format!("unknown forgery kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub kind: ForgeryKind,
    pub attack: AttackSpec,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image: Image,
    pub mask: Mask,
    pub meta: SampleMeta,
}

impl SampleRecord {
    pub fn size(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|v| **v != 0).count()
    }

    /// Checks shapes and the mask/kind relation.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.mask.dim();
        if self.image.dim() != (h, w, 3) {
            return Err(Error::Input(format!("image {:?} does not match mask {:?}", self.image.dim(), (h, w))));
        }
        if self.mask.iter().any(|v| *v > 1) {
            return Err(Error::Input("mask is not binary".into()));
        }
        let forged = self.mask_area() > 0;
        match self.meta.kind {
            ForgeryKind::Authentic if forged => Err(Error::Input("authentic sample with a non-empty mask".into())),
            ForgeryKind::Splice | ForgeryKind::CopyMove if !forged => {
                Err(Error::Input(format!("{} sample with an empty mask", self.meta.kind)))
            }
            _ => Ok(()),
        }
    }
}

/// Generates one sample of `kind` from its own seed.
pub fn generate_sample(kind: ForgeryKind, seed: u64, size: usize) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rec = match kind {
        ForgeryKind::Splice => generate_splice(&mut rng, size)?,
        ForgeryKind::CopyMove => generate_copy_move(&mut rng, size)?,
        ForgeryKind::Authentic => synth::generate_authentic(&mut rng, size)?,
        ForgeryKind::External => return Err(Error::Config("external samples cannot be generated".into())),
    };
    rec.meta.seed = seed;
    Ok(rec)
}

pub fn flip_horizontal(rec: &SampleRecord) -> SampleRecord {
    SampleRecord {
        image: rec.image.slice(s![.., ..;-1, ..]).to_owned(),
        mask: rec.mask.slice(s![.., ..;-1]).to_owned(),
        meta: rec.meta.clone(),
    }
}

pub fn flip_vertical(rec: &SampleRecord) -> SampleRecord {
    SampleRecord {
        image: rec.image.slice(s![..;-1, .., ..]).to_owned(),
        mask: rec.mask.slice(s![..;-1, ..]).to_owned(),
        meta: rec.meta.clone(),
    }
}

/// Flips each axis independently with probability 0.5.
pub fn augment_flip<R: Rng + ?Sized>(rec: &SampleRecord, rng: &mut R) -> SampleRecord {
    let (horizontal, vertical) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let mut out = rec.clone();
    if horizontal {
        out = flip_horizontal(&out);
    }
    if vertical {
        out = flip_vertical(&out);
    }
    out
}

/// Stacks images into an (N, 3, H, W) tensor of raw pixel values.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Input("empty image batch".into()));
    };
    let (h, w, _) = first.dim();
    let mut t = Tensor::zeros((images.len(), 3, h, w));
    for (n, img) in images.iter().enumerate() {
        if img.dim() != (h, w, 3) {
            return Err(Error::Shape(format!("image {:?} in a batch of {:?}", img.dim(), (h, w, 3))));
        }
        for c in 0..3 {
            t.slice_mut(s![n, c, .., ..]).assign(&img.index_axis(Axis(2), c).mapv(f64::from));
        }
    }
    Ok(t)
}

pub fn mask_to_f64(mask: &Mask) -> Array2<f64> {
    mask.mapv(|v| if v != 0 { 1.0 } else { 0.0 })
}

/// Sample counts per forgery kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KindCounts {
    pub splice: usize,
    pub copy_move: usize,
    pub authentic: usize,
}

impl KindCounts {
    pub fn total(&self) -> usize {
        self.splice + self.copy_move + self.authentic
    }
}

/// Relative sizes of the train / validation / test partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatios {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 8, val: 1, test: 1 }
    }
}

impl SplitRatios {
    /// Partition sizes for `n` samples; validation and test are rounded down.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let total = self.train + self.val + self.test;
        if total == 0 {
            return Err(Error::Config("split ratios are all zero".into()));
        }
        let val = n * self.val / total;
        let test = n * self.test / total;
        Ok((n - val - test, val, test))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::Config(format!("unknown partition `{other}`"))),
        }
    }
}

impl Split {
    pub fn indices(&self, p: Partition) -> &[usize] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

/// A generated or loaded dataset. `ids[i]` names `samples[i]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub samples: Vec<SampleRecord>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn partition(&self, p: Partition) -> Vec<(&str, &SampleRecord)> {
        self.split.indices(p).iter().map(|&i| (self.ids[i].as_str(), &self.samples[i])).collect()
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Generates `counts` samples with per-sample seeds drawn from `rng`, attacks
/// each with a spec drawn uniformly from `attacks` (none when empty) and splits
/// them by a seeded shuffle.
pub fn make_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    counts: KindCounts,
    size: usize,
    attacks: &[AttackSpec],
    ratios: SplitRatios,
) -> Result<Dataset> {
    let kinds = std::iter::repeat_n(ForgeryKind::Splice, counts.splice)
        .chain(std::iter::repeat_n(ForgeryKind::CopyMove, counts.copy_move))
        .chain(std::iter::repeat_n(ForgeryKind::Authentic, counts.authentic));
    let mut samples = Vec::with_capacity(counts.total());
    for kind in kinds {
        let seed = rng.random::<u64>();
        let mut rec = generate_sample(kind, seed, size)?;
        if !attacks.is_empty() {
            let spec = attacks[rng.random_range(0..attacks.len())];
            rec.image = apply_attack(&rec.image, spec)?;
            rec.meta.attack = spec;
        }
        samples.push(rec);
    }
    let n = samples.len();
    let (n_train, n_val, _) = ratios.sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut split = Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(Dataset { ids: (0..n).map(sample_id).collect(), samples, split })
}
