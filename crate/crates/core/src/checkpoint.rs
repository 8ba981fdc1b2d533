//! Checkpoint container: a text manifest followed by raw little-endian f32
//! blobs. The manifest records the model config, training progress, and for
//! every blob its shape, byte range and SHA-256.
//!
//! ```text
//! TRIPINET-CKPT 1
//! config model.preset desk
//! meta epoch 12
//! blob param/decoder.head1.bias param 1x1x1x1 0 4 <sha256>
//! end
//! <blob bytes>
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{check_params, TriPINetConfig};
use crate::noise::{constraint_error, BAYAR_CHECK_TOL};
use crate::optim::{Adam, AdamConfig, Plateau};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &str = "TRIPINET-CKPT";
pub const VERSION: u32 = 1;

const MOMENT_KIND: &str = "moment";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TriPINetConfig,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub plateau: Plateau,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_val_loss: f64,
}

impl Checkpoint {
    /// A fresh training state for `params`.
    pub fn new(config: TriPINetConfig, params: ParamStore, lr: f64, adam: AdamConfig, patience: usize) -> Self {
        let optimizer = Adam::new(&params, lr, adam);
        Self { config, params, optimizer, plateau: Plateau::new(patience), epoch: 0, best_val_loss: f64::INFINITY }
    }
}

fn lock_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".lock");
    path.with_file_name(name)
}

fn open_lock(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(lock_path(path))
        .map_err(|e| Error::checkpoint(path, format!("cannot open lock file: {e}")))
}

fn shape_str(t: &Tensor) -> String {
    t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

struct Blob<'a> {
    name: String,
    kind: &'a str,
    tensor: &'a Tensor,
}

/// Serializes the checkpoint. The output depends only on its contents.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut blobs = Vec::new();
    for (name, e) in ckpt.params.iter() {
        blobs.push(Blob { name: format!("param/{name}"), kind: e.kind.as_str(), tensor: &e.value });
    }
    for (name, t) in &ckpt.optimizer.m {
        blobs.push(Blob { name: format!("adam.m/{name}"), kind: MOMENT_KIND, tensor: t });
    }
    for (name, t) in &ckpt.optimizer.v {
        blobs.push(Blob { name: format!("adam.v/{name}"), kind: MOMENT_KIND, tensor: t });
    }

    let mut manifest = format!("{MAGIC} {VERSION}\n");
    for (k, v) in ckpt.config.to_map() {
        manifest.push_str(&format!("config {k} {v}\n"));
    }
    let adam = &ckpt.optimizer;
    let meta: [(&str, String); 11] = [
        ("epoch", ckpt.epoch.to_string()),
        ("best_val_loss", ckpt.best_val_loss.to_string()),
        ("lr", adam.lr.to_string()),
        ("adam.step", adam.step.to_string()),
        ("adam.beta1", adam.cfg.beta1.to_string()),
        ("adam.beta2", adam.cfg.beta2.to_string()),
        ("adam.eps", adam.cfg.eps.to_string()),
        ("adam.weight_decay", adam.cfg.weight_decay.to_string()),
        ("plateau.patience", ckpt.plateau.patience.to_string()),
        ("plateau.best", ckpt.plateau.best.to_string()),
        ("plateau.stale", ckpt.plateau.stale.to_string()),
    ];
    for (k, v) in meta {
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    manifest.push_str(&format!("meta plateau.factor {}\n", ckpt.plateau.factor));

    let mut data = Vec::new();
    for b in &blobs {
        let start = data.len();
        for v in b.tensor.iter() {
            data.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let hash = hex::encode(Sha256::digest(&data[start..]));
        manifest.push_str(&format!(
            "blob {} {} {} {} {} {}\n",
            b.name,
            b.kind,
            shape_str(b.tensor),
            start,
            data.len() - start,
            hash
        ));
    }
    manifest.push_str("end\n");
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&data);
    out
}

/// Writes atomically (temporary file + rename) under an exclusive lock.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let lock = open_lock(path)?;
    lock.lock().map_err(|e| Error::checkpoint(path, format!("cannot lock: {e}")))?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(&encode_checkpoint(ckpt))?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::checkpoint(path, e))
}

struct Manifest {
    config: BTreeMap<String, String>,
    meta: BTreeMap<String, String>,
    blobs: Vec<BlobEntry>,
}

struct BlobEntry {
    name: String,
    kind: String,
    shape: [usize; 4],
    offset: usize,
    len: usize,
    hash: String,
}

fn parse_manifest(path: &Path, text: &str) -> Result<Manifest> {
    let bad = |reason: String| Error::checkpoint(path, reason);
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    match header.split_once(' ') {
        Some((MAGIC, v)) if v == VERSION.to_string() => {}
        Some((MAGIC, v)) => return Err(bad(format!("unsupported version {v} (expected {VERSION})"))),
        _ => return Err(bad("not a checkpoint file".into())),
    }
    let mut m = Manifest { config: BTreeMap::new(), meta: BTreeMap::new(), blobs: Vec::new() };
    for line in lines {
        let mut parts = line.splitn(3, ' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some("config"), Some(k), Some(v)) => {
                m.config.insert(k.to_string(), v.to_string());
            }
            (Some("meta"), Some(k), Some(v)) => {
                m.meta.insert(k.to_string(), v.to_string());
            }
            (Some("blob"), Some(name), Some(rest)) => {
                let f: Vec<&str> = rest.split(' ').collect();
                let entry = (|| {
                    let [kind, shape, offset, len, hash] = f.as_slice() else { return None };
                    let dims: Vec<usize> = shape.split('x').map(|d| d.parse().ok()).collect::<Option<_>>()?;
                    Some(BlobEntry {
                        name: name.to_string(),
                        kind: kind.to_string(),
                        shape: dims.try_into().ok()?,
                        offset: offset.parse().ok()?,
                        len: len.parse().ok()?,
                        hash: hash.to_string(),
                    })
                })()
                .ok_or_else(|| bad(format!("malformed manifest entry for blob `{name}`")))?;
                m.blobs.push(entry);
            }
            _ => return Err(bad(format!("malformed manifest line `{line}`"))),
        }
    }
    Ok(m)
}

fn meta_value<T: std::str::FromStr>(path: &Path, meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta.get(key)
        .ok_or_else(|| Error::checkpoint(path, format!("missing `{key}`")))?
        .parse()
        .map_err(|_| Error::checkpoint(path, format!("malformed `{key}`")))
}

/// Parses checkpoint bytes; `path` is used for error messages only.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    const END: &[u8] = b"\nend\n";
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::checkpoint(path, "truncated manifest"))?;
    let text = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::checkpoint(path, "manifest is not valid UTF-8"))?;
    let data = &bytes[split + END.len()..];
    let m = parse_manifest(path, text)?;

    let config = TriPINetConfig::from_map(&m.config).map_err(|e| Error::checkpoint(path, e))?;
    let mut params = ParamStore::new();
    let mut moments: [BTreeMap<String, Tensor>; 2] = Default::default();
    for b in &m.blobs {
        let fail = |reason: &str| Error::checkpoint(path, format!("blob `{}` {reason}", b.name));
        let numel: usize = b.shape.iter().product();
        if b.len != 4 * numel {
            return Err(fail("has a length that does not match its shape"));
        }
        let end = b.offset.checked_add(b.len).ok_or_else(|| fail("has an invalid byte range"))?;
        if end > data.len() {
            return Err(fail("is truncated"));
        }
        let raw = &data[b.offset..end];
        if hex::encode(Sha256::digest(raw)) != b.hash {
            return Err(fail("is corrupted (hash mismatch)"));
        }
        let values: Vec<f64> =
            raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
        let t = Tensor::from_shape_vec(b.shape, values).map_err(|e| fail(&e.to_string()))?;
        match b.name.split_once('/') {
            Some(("param", name)) => {
                let kind = ParamKind::parse(&b.kind).ok_or_else(|| fail("has an unknown kind"))?;
                params.insert(name, kind, t);
            }
            Some(("adam.m", name)) => {
                moments[0].insert(name.to_string(), t);
            }
            Some(("adam.v", name)) => {
                moments[1].insert(name.to_string(), t);
            }
            _ => return Err(fail("has an unknown section")),
        }
    }
    check_params(&config, &params).map_err(|e| Error::checkpoint(path, e))?;
    let bayar = params.tensor(&format!("{}.bayar.weight", crate::model::NOISE_FRONT))?;
    if constraint_error(bayar) > BAYAR_CHECK_TOL {
        return Err(Error::checkpoint(path, "constrained kernels violate their constraint"));
    }

    let meta = |k: &str| meta_value::<f64>(path, &m.meta, k);
    let [m1, m2] = moments;
    let optimizer = Adam {
        cfg: AdamConfig {
            beta1: meta("adam.beta1")?,
            beta2: meta("adam.beta2")?,
            eps: meta("adam.eps")?,
            weight_decay: meta("adam.weight_decay")?,
        },
        lr: meta("lr")?,
        step: meta_value(path, &m.meta, "adam.step")?,
        m: m1,
        v: m2,
    };
    let trainable = params.names(ParamKind::Trainable);
    if !optimizer.m.keys().eq(trainable.iter()) || !optimizer.v.keys().eq(trainable.iter()) {
        return Err(Error::checkpoint(path, "optimizer state does not cover the trainable parameters"));
    }
    let plateau = Plateau {
        patience: meta_value(path, &m.meta, "plateau.patience")?,
        factor: meta("plateau.factor")?,
        best: meta("plateau.best")?,
        stale: meta_value(path, &m.meta, "plateau.stale")?,
    };
    Ok(Checkpoint {
        config,
        params,
        optimizer,
        plateau,
        epoch: meta_value(path, &m.meta, "epoch")?,
        best_val_loss: meta("best_val_loss")?,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let lock = open_lock(path)?;
    lock.lock_shared().map_err(|e| Error::checkpoint(path, format!("cannot lock: {e}")))?;
    let bytes = fs::read(path).map_err(|e| Error::checkpoint(path, e))?;
    decode_checkpoint(path, &bytes)
}

/// Loads a checkpoint that must have been trained with `expected`'s model
/// settings; the seed may differ.
pub fn load_checkpoint_for(path: &Path, expected: &TriPINetConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let keys: Vec<String> = ckpt.config.diff(expected).into_iter().filter(|k| k != "seed").collect();
    if keys.is_empty() {
        Ok(ckpt)
    } else {
        Err(Error::ConfigMismatch(keys))
    }
}
