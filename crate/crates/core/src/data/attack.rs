//! Post-processing attacks: JPEG recompression and Gaussian blur.

use std::fmt;
use std::str::FromStr;

use jpeg_encoder::{ColorType, Encoder, SamplingFactor};
use ndarray::Array3;

use super::Image;
use crate::error::{Error, Result};

pub const JPEG_QUALITIES: [u8; 6] = [50, 60, 70, 80, 90, 100];
pub const BLUR_KERNELS: [usize; 5] = [5, 11, 17, 23, 29];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum AttackSpec {
    #[default]
    None,
    Jpeg { quality: u8 },
    GaussianBlur { kernel: usize },
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AttackSpec::None => Ok(()),
            AttackSpec::Jpeg { quality } if JPEG_QUALITIES.contains(&quality) => Ok(()),
            AttackSpec::GaussianBlur { kernel } if BLUR_KERNELS.contains(&kernel) => Ok(()),
            AttackSpec::Jpeg { quality } => {
                Err(Error::Config(format!("JPEG quality {quality} is not one of {JPEG_QUALITIES:?}")))
            }
            AttackSpec::GaussianBlur { kernel } => {
                Err(Error::Config(format!("blur kernel {kernel} is not one of {BLUR_KERNELS:?}")))
            }
        }
    }

    /// Every grid point, JPEG qualities first.
    pub fn grid() -> Vec<AttackSpec> {
        JPEG_QUALITIES
            .iter()
            .map(|&quality| AttackSpec::Jpeg { quality })
            .chain(BLUR_KERNELS.iter().map(|&kernel| AttackSpec::GaussianBlur { kernel }))
            .collect()
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::Jpeg { .. } => "jpeg",
            AttackSpec::GaussianBlur { .. } => "blur",
        }
    }

    pub fn param(&self) -> Option<usize> {
        match *self {
            AttackSpec::None => None,
            AttackSpec::Jpeg { quality } => Some(quality as usize),
            AttackSpec::GaussianBlur { kernel } => Some(kernel),
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.param() {
            None => f.write_str("none"),
            Some(p) => write!(f, "{}:{p}", self.kind_str()),
        }
    }
}

impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(AttackSpec::None);
        }
        let bad = || Error::Config(format!("malformed attack `{s}` (expected none, jpeg:<q> or blur:<k>)"));
        let (kind, param) = s.split_once(':').ok_or_else(bad)?;
        let spec = match kind {
            "jpeg" => AttackSpec::Jpeg { quality: param.parse().map_err(|_| bad())? },
            "blur" => AttackSpec::GaussianBlur { kernel: param.parse().map_err(|_| bad())? },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn blur_sigma(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps.
pub fn blur_kernel(kernel: usize) -> Vec<f64> {
    let sigma = blur_sigma(kernel);
    let c = (kernel / 2) as f64;
    let taps: Vec<f64> = (0..kernel).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mirror index without repeating the edge sample.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_blur(image: &Image, kernel: usize) -> Image {
    let taps = blur_kernel(kernel);
    let r = (kernel / 2) as isize;
    let (h, w, _) = image.dim();
    let src = image.mapv(f64::from);
    let mut rows = Array3::<f64>::zeros((h, w, 3));
    for ((y, x, c), v) in rows.indexed_iter_mut() {
        *v = taps.iter().enumerate().map(|(k, t)| t * src[[y, reflect(x as isize + k as isize - r, w), c]]).sum();
    }
    let mut out = Array3::<u8>::zeros((h, w, 3));
    for ((y, x, c), v) in out.indexed_iter_mut() {
        let s: f64 =
            taps.iter().enumerate().map(|(k, t)| t * rows[[reflect(y as isize + k as isize - r, h), x, c]]).sum();
        *v = s.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Baseline 4:2:0 below quality 90, full-resolution chroma from 90 up.
pub fn chroma_sampling(quality: u8) -> SamplingFactor {
    if quality >= 90 {
        SamplingFactor::F_1_1
    } else {
        SamplingFactor::F_2_2
    }
}

fn jpeg_round_trip(image: &Image, quality: u8) -> Result<Image> {
    let (h, w, _) = image.dim();
    let (hu, wu) = (u16::try_from(h), u16::try_from(w));
    let (Ok(hu), Ok(wu)) = (hu, wu) else {
        return Err(Error::Input(format!("{h}×{w} image is too large for JPEG")));
    };
    let data: Vec<u8> = image.iter().copied().collect();
    let mut buf = Vec::new();
    let mut enc = Encoder::new(&mut buf, quality);
    enc.set_sampling_factor(chroma_sampling(quality));
    enc.encode(&data, wu, hu, ColorType::Rgb).map_err(|e| Error::Input(format!("JPEG encoding failed: {e}")))?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Input(format!("JPEG decoding failed: {e}")))?
        .to_rgb8();
    Array3::from_shape_vec((h, w, 3), decoded.into_raw()).map_err(|e| Error::Shape(e.to_string()))
}

/// Applies `spec` to an H×W×3 image; dimensions are preserved.
pub fn apply_attack(image: &Image, spec: AttackSpec) -> Result<Image> {
    spec.validate()?;
    match spec {
        AttackSpec::None => Ok(image.clone()),
        AttackSpec::Jpeg { quality } => jpeg_round_trip(image, quality),
        AttackSpec::GaussianBlur { kernel } => Ok(gaussian_blur(image, kernel)),
    }
}

/// Peak signal-to-noise ratio in dB for 8-bit images; infinite when equal.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>()
        / a.len() as f64;
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, ForgeryKind};

    #[test]
    fn spec_parsing_and_grid() {
        assert_eq!("jpeg:70".parse::<AttackSpec>().unwrap(), AttackSpec::Jpeg { quality: 70 });
        assert_eq!("blur:29".parse::<AttackSpec>().unwrap().to_string(), "blur:29");
        assert!(matches!("jpeg:75".parse::<AttackSpec>(), Err(Error::Config(_))));
        assert!(matches!("blur:7".parse::<AttackSpec>(), Err(Error::Config(_))));
        assert!("sharpen:3".parse::<AttackSpec>().is_err());
        assert_eq!(AttackSpec::grid().len(), 11);
    }

    #[test]
    fn off_grid_attack_is_config_error() {
        let img = Image::zeros((16, 16, 3));
        assert!(matches!(apply_attack(&img, AttackSpec::Jpeg { quality: 95 }), Err(Error::Config(_))));
        assert!(matches!(apply_attack(&img, AttackSpec::GaussianBlur { kernel: 3 }), Err(Error::Config(_))));
    }

    #[test]
    fn blur_kernel_properties() {
        assert!((blur_sigma(5) - 1.1).abs() < 1e-12);
        for k in BLUR_KERNELS {
            let taps = blur_kernel(k);
            assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(taps.iter().zip(taps.iter().rev()).all(|(a, b)| a == b));
        }
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = Image::from_elem((32, 32, 3), 137);
        for k in BLUR_KERNELS {
            assert_eq!(apply_attack(&img, AttackSpec::GaussianBlur { kernel: k }).unwrap(), img);
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn attacks_preserve_dimensions() {
        let img = generate_sample(ForgeryKind::Splice, 1, 48).unwrap().image;
        for spec in AttackSpec::grid() {
            assert_eq!(apply_attack(&img, spec).unwrap().dim(), img.dim());
        }
    }

    #[test]
    fn jpeg_quality_ordering() {
        let img = generate_sample(ForgeryKind::Splice, 2, 64).unwrap().image;
        let p100 = psnr(&img, &apply_attack(&img, AttackSpec::Jpeg { quality: 100 }).unwrap()).unwrap();
        let p50 = psnr(&img, &apply_attack(&img, AttackSpec::Jpeg { quality: 50 }).unwrap()).unwrap();
        assert!(p100 > p50, "{p100} vs {p50}");
    }
}
