//! On-disk layout: `images/<id>.png`, `masks/<id>_gt.png` (values 0/255),
//! `meta/<id>.txt` and `split.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use super::{AttackSpec, Dataset, ForgeryKind, Partition, SampleMeta, SampleRecord, Split};
use crate::error::{Error, Result};

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.png"))
}

fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("masks").join(format!("{id}_gt.png"))
}

fn meta_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("meta").join(format!("{id}.txt"))
}

fn write_png(path: &Path, data: Vec<u8>, w: usize, h: usize, color: image::ExtendedColorType) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    image::save_buffer_with_format(path, &data, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|e| Error::data(path, e))
}

/// Writes a {0, 255} grayscale PNG.
pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let data = mask.iter().map(|v| if *v != 0 { 255 } else { 0 }).collect();
    write_png(path, data, w, h, image::ExtendedColorType::L8)
}

/// Writes an 8-bit grayscale PNG as is.
pub fn write_gray_png(path: &Path, img: &Array2<u8>) -> Result<()> {
    let (h, w) = img.dim();
    write_png(path, img.iter().copied().collect(), w, h, image::ExtendedColorType::L8)
}

pub fn write_rgb_png(path: &Path, img: &Array3<u8>) -> Result<()> {
    let (h, w, _) = img.dim();
    write_png(path, img.iter().copied().collect(), w, h, image::ExtendedColorType::Rgb8)
}

pub fn read_rgb_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path).map_err(|e| Error::data(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw()).map_err(|e| Error::data(path, e))
}

/// Reads a mask PNG; every pixel must be 0 or 255.
pub fn read_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::data(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    if let Some(v) = raw.iter().find(|v| **v != 0 && **v != 255) {
        return Err(Error::data(path, format!("mask is not binary (found value {v})")));
    }
    let bits = raw.into_iter().map(|v| (v == 255) as u8).collect();
    Array2::from_shape_vec((h as usize, w as usize), bits).map_err(|e| Error::data(path, e))
}

fn meta_text(meta: &SampleMeta) -> String {
    format!("kind = {}\nattack = {}\nseed = {}\n", meta.kind, meta.attack, meta.seed)
}

fn parse_meta(path: &Path, text: &str) -> Result<SampleMeta> {
    let mut meta = SampleMeta { kind: ForgeryKind::External, attack: AttackSpec::None, seed: 0 };
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::data(path, format!("malformed line `{line}`")))?;
        let v = v.trim();
        match k.trim() {
            "kind" => meta.kind = v.parse().map_err(|e| Error::data(path, e))?,
            "attack" => meta.attack = v.parse().map_err(|e| Error::data(path, e))?,
            "seed" => meta.seed = v.parse().map_err(|e| Error::data(path, e))?,
            other => return Err(Error::data(path, format!("unknown key `{other}`"))),
        }
    }
    Ok(meta)
}

pub fn save_sample(dir: &Path, id: &str, rec: &SampleRecord) -> Result<()> {
    rec.validate()?;
    write_rgb_png(&image_path(dir, id), &rec.image)?;
    write_mask_png(&mask_path(dir, id), &rec.mask)?;
    let meta = meta_path(dir, id);
    fs::create_dir_all(meta.parent().expect("meta dir"))?;
    fs::write(&meta, meta_text(&rec.meta)).map_err(|e| Error::data(&meta, e))
}

/// Loads one sample. A missing metadata sidecar marks the pair as external.
pub fn load_sample(dir: &Path, id: &str) -> Result<SampleRecord> {
    let ipath = image_path(dir, id);
    let image = read_rgb_png(&ipath)?;
    let mask = read_mask_png(&mask_path(dir, id))?;
    let mpath = meta_path(dir, id);
    let meta = match fs::read_to_string(&mpath) {
        Ok(text) => parse_meta(&mpath, &text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            SampleMeta { kind: ForgeryKind::External, attack: AttackSpec::None, seed: 0 }
        }
        Err(e) => return Err(Error::data(&mpath, e)),
    };
    let rec = SampleRecord { image, mask, meta };
    rec.validate().map_err(|e| Error::data(&ipath, e))?;
    Ok(rec)
}

pub fn write_split(dir: &Path, ids: &[String], split: &Split) -> Result<()> {
    let mut lines = Vec::with_capacity(ids.len());
    for p in [Partition::Train, Partition::Val, Partition::Test] {
        for &i in split.indices(p) {
            lines.push((i, format!("{} {}\n", ids[i], p.as_str())));
        }
    }
    lines.sort_by_key(|(i, _)| *i);
    fs::create_dir_all(dir)?;
    let path = dir.join("split.txt");
    fs::write(&path, lines.into_iter().map(|(_, l)| l).collect::<String>()).map_err(|e| Error::data(&path, e))
}

/// Reads `split.txt`: one `<id> <train|val|test>` line per sample.
pub fn read_split(dir: &Path) -> Result<(Vec<String>, Split)> {
    let path = dir.join("split.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::data(&path, e))?;
    let mut ids = Vec::new();
    let mut split = Split::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let mut parts = line.split_whitespace();
        let (Some(id), Some(p), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::data(&path, format!("malformed line `{line}`")));
        };
        let index = ids.len();
        match p.parse::<Partition>().map_err(|e| Error::data(&path, e))? {
            Partition::Train => split.train.push(index),
            Partition::Val => split.val.push(index),
            Partition::Test => split.test.push(index),
        }
        ids.push(id.to_string());
    }
    Ok((ids, split))
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    for (id, rec) in ds.ids.iter().zip(&ds.samples) {
        save_sample(dir, id, rec)?;
    }
    write_split(dir, &ds.ids, &ds.split)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (ids, split) = read_split(dir)?;
    let samples = ids.iter().map(|id| load_sample(dir, id)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { ids, samples, split })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sample, make_dataset, KindCounts, SplitRatios};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = generate_sample(ForgeryKind::CopyMove, 11, 32).unwrap();
        save_sample(dir.path(), "x", &rec).unwrap();
        let bytes = fs::read(mask_path(dir.path(), "x")).unwrap();
        assert_eq!(load_sample(dir.path(), "x").unwrap(), rec);
        let mask = image::open(mask_path(dir.path(), "x")).unwrap().to_luma8();
        assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        save_sample(dir.path(), "x", &load_sample(dir.path(), "x").unwrap()).unwrap();
        assert_eq!(fs::read(mask_path(dir.path(), "x")).unwrap(), bytes);
    }

    #[test]
    fn load_errors_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_sample(dir.path(), "nope").unwrap_err();
        assert!(matches!(&err, Error::Data { path, .. } if path.ends_with("images/nope.png")));
        let rec = generate_sample(ForgeryKind::Splice, 1, 16).unwrap();
        save_sample(dir.path(), "c", &rec).unwrap();
        fs::write(image_path(dir.path(), "c"), b"not a png").unwrap();
        assert!(matches!(load_sample(dir.path(), "c"), Err(Error::Data { path, .. }) if path.ends_with("c.png")));
        save_sample(dir.path(), "g", &rec).unwrap();
        let gray = Array2::from_elem((16, 16), 128u8);
        write_png(&mask_path(dir.path(), "g"), gray.into_raw_vec_and_offset().0, 16, 16, image::ExtendedColorType::L8)
            .unwrap();
        let err = load_sample(dir.path(), "g").unwrap_err();
        assert!(err.to_string().contains("not binary"), "{err}");
    }

    #[test]
    fn missing_meta_is_external() {
        let dir = tempfile::tempdir().unwrap();
        let rec = generate_sample(ForgeryKind::Splice, 4, 16).unwrap();
        save_sample(dir.path(), "e", &rec).unwrap();
        fs::remove_file(meta_path(dir.path(), "e")).unwrap();
        assert_eq!(load_sample(dir.path(), "e").unwrap().meta.kind, ForgeryKind::External);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let counts = KindCounts { splice: 3, copy_move: 1, authentic: 1 };
        let attacks = [AttackSpec::None, AttackSpec::Jpeg { quality: 90 }];
        let ds =
            make_dataset(&mut ChaCha8Rng::seed_from_u64(2), counts, 16, &attacks, SplitRatios { train: 3, val: 1, test: 1 })
                .unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }
}
