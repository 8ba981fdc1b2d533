//! Training loop, inference and per-image scoring.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{augment_flip, images_to_tensor, mask_to_f64, Image, SampleRecord};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Mode};
use crate::loss::{batch_loss_from_logits, batch_loss_value, LossBreakdown, LossComponents};
use crate::metrics::{score_sample, MetricReport};
use crate::model::{init_params, tripinet_forward, TriPINetConfig, NOISE_FRONT};
use crate::noise::project_in_store;
use crate::optim::{apply_bn_updates, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "epoch,train_bce,train_ssim,train_iou,train_total,val_loss,lr";

/// One row of `log.csv`; `lr` is the rate used during the epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossComponents,
    pub val_loss: f64,
    pub lr: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let t = &self.train;
        format!("{},{},{},{},{},{},{}", self.epoch, t.bce, t.ssim, t.iou, t.total, self.val_loss, self.lr)
    }
}

/// File locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.echo")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("log.csv")
    }
    pub fn ckpt_best(&self) -> PathBuf {
        self.root.join("ckpt.best")
    }
    pub fn ckpt_last(&self) -> PathBuf {
        self.root.join("ckpt.last")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.csv")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics.txt")
    }
    pub fn lock(&self) -> PathBuf {
        self.root.join("run.lock")
    }
}

/// (N, 3, H, W) pixels and (N, 1, H, W) masks.
pub fn batch_tensors(samples: &[&SampleRecord]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let x = images_to_tensor(&images)?;
    let (n, _, h, w) = x.dim();
    let mut m = Tensor::zeros((n, 1, h, w));
    for (i, s) in samples.iter().enumerate() {
        if s.mask.dim() != (h, w) {
            return Err(Error::Shape(format!("mask {:?} for a {h}×{w} image", s.mask.dim())));
        }
        m.slice_mut(s![i, 0, .., ..]).assign(&mask_to_f64(&s.mask));
    }
    Ok((x, m))
}

/// A fresh training state for `cfg`.
pub fn initial_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let params = init_params(&cfg.model)?;
    let adam = AdamConfig { weight_decay: cfg.train.weight_decay, ..Default::default() };
    Ok(Checkpoint::new(cfg.model.clone(), params, cfg.train.lr, adam, cfg.train.patience))
}

/// Mean six-output validation loss in evaluation mode.
pub fn validation_loss(params: &ParamStore, cfg: &TriPINetConfig, samples: &[&SampleRecord], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let (x, m) = batch_tensors(chunk)?;
        let mut g = Graph::new(params, Mode::Eval);
        let xv = g.input(x);
        let logits = tripinet_forward(&mut g, cfg, xv)?.logits();
        let vals: Vec<&Tensor> = logits.iter().map(|v| g.value(*v)).collect();
        total += batch_loss_value(&vals, &m, cfg.loss)?.total() * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Probability maps of the final head for a batch of images.
pub fn predict(params: &ParamStore, cfg: &TriPINetConfig, images: &[&Image]) -> Result<Vec<Array2<f64>>> {
    let x = images_to_tensor(images)?;
    let mut g = Graph::new(params, Mode::Eval);
    let xv = g.input(x);
    let out = tripinet_forward(&mut g, cfg, xv)?.final_logit;
    let logits = g.value(out);
    Ok(logits.axis_iter(Axis(0)).map(|l| l.index_axis(Axis(0), 0).mapv(sigmoid)).collect())
}

/// Threshold-swept F1/IoU for each `(id, sample)`.
pub fn evaluate(
    params: &ParamStore,
    cfg: &TriPINetConfig,
    samples: &[(&str, &SampleRecord)],
    batch: usize,
) -> Result<(MetricReport, Vec<Array2<f64>>)> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut probs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<&Image> = chunk.iter().map(|(_, s)| &s.image).collect();
        for ((id, s), p) in chunk.iter().zip(predict(params, cfg, &images)?) {
            rows.push(score_sample(id, p.view(), mask_to_f64(&s.mask).view())?);
            probs.push(p);
        }
    }
    Ok((MetricReport::new(rows), probs))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn diagnostics(epoch: usize, batch: usize, ids: &[usize], bd: &LossBreakdown, ckpt: &Checkpoint) -> String {
    let mut s = format!("non-finite loss at epoch {epoch}, batch {batch}\nsample indices: {ids:?}\n");
    for (k, c) in bd.outputs.iter().enumerate() {
        writeln!(s, "output {}: bce={} ssim={} iou={} total={}", k + 1, c.bce, c.ssim, c.iou, c.total).unwrap();
    }
    writeln!(s, "lr={} adam.step={}", ckpt.optimizer.lr, ckpt.optimizer.step).unwrap();
    for (name, e) in ckpt.params.iter() {
        let bad = e.value.iter().filter(|v| !v.is_finite()).count();
        let max = e.value.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if bad > 0 || max > 1e6 {
            writeln!(s, "param {name}: {bad} non-finite, max |v| = {max}").unwrap();
        }
    }
    s
}

/// One optimizer step on `batch`. Returns the batch loss.
pub fn train_step(ckpt: &mut Checkpoint, batch: &[&SampleRecord], rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
    let (x, m) = batch_tensors(batch)?;
    let (bd, grads, updates) = {
        let mut g = Graph::new(&ckpt.params, Mode::Train);
        let xv = g.input(x);
        let logits = tripinet_forward(&mut g, &ckpt.config, xv)?.logits();
        let vals: Vec<&Tensor> = logits.iter().map(|v| g.value(*v)).collect();
        let (bd, seeds) = batch_loss_from_logits(&vals, &m, ckpt.config.loss)?;
        if !bd.total().is_finite() {
            return Ok(bd);
        }
        let seeds: Vec<_> = logits.iter().copied().zip(seeds).collect();
        let grads = g.backward(&seeds);
        (bd, grads, g.take_bn_updates())
    };
    ckpt.optimizer.update(&mut ckpt.params, &grads)?;
    apply_bn_updates(&mut ckpt.params, &updates)?;
    project_in_store(&mut ckpt.params, rng, NOISE_FRONT)?;
    ckpt.params.quantize_f32();
    Ok(bd)
}

/// Trains from `ckpt` (fresh or resumed) until `cfg.train.epochs` epochs are
/// complete. With a run directory, writes `log.csv`, `ckpt.best` and
/// `ckpt.last` after every epoch.
pub fn train(
    cfg: &RunConfig,
    mut ckpt: Checkpoint,
    train_set: &[&SampleRecord],
    val_set: &[&SampleRecord],
    run: Option<&RunDir>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let diff = ckpt.config.diff(&cfg.model);
    if !diff.is_empty() {
        return Err(Error::ConfigMismatch(diff));
    }
    if let Some(run) = run {
        prepare_log(&run.log(), ckpt.epoch)?;
    }
    let mut records = Vec::new();
    let batch = cfg.train.batch_size;
    while ckpt.epoch < cfg.train.epochs {
        let epoch = ckpt.epoch + 1;
        let mut rng = epoch_rng(cfg.model.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let lr = ckpt.optimizer.lr;
        let mut sum = LossComponents::default();
        for (b, idx) in order.chunks(batch).enumerate() {
            let augmented: Vec<SampleRecord> = idx
                .iter()
                .map(|&i| if cfg.train.augment { augment_flip(train_set[i], &mut rng) } else { train_set[i].clone() })
                .collect();
            let refs: Vec<&SampleRecord> = augmented.iter().collect();
            let bd = train_step(&mut ckpt, &refs, &mut rng)?;
            if !bd.total().is_finite() {
                let report = diagnostics(epoch, b, idx, &bd, &ckpt);
                if let Some(run) = run {
                    fs::write(run.diagnostics(), &report)?;
                }
                return Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}, batch {b}")));
            }
            let k = idx.len() as f64;
            sum.bce += k * bd.sum.bce;
            sum.ssim += k * bd.sum.ssim;
            sum.iou += k * bd.sum.iou;
            sum.total += k * bd.sum.total;
        }
        let n = train_set.len() as f64;
        let train = LossComponents { bce: sum.bce / n, ssim: sum.ssim / n, iou: sum.iou / n, total: sum.total / n };
        let val_loss = if val_set.is_empty() {
            train.total
        } else {
            validation_loss(&ckpt.params, &ckpt.config, val_set, batch)?
        };
        if !val_loss.is_finite() {
            if let Some(run) = run {
                fs::write(run.diagnostics(), format!("non-finite validation loss at epoch {epoch}\n"))?;
            }
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        ckpt.epoch = epoch;
        let improved = val_loss < ckpt.best_val_loss;
        if improved {
            ckpt.best_val_loss = val_loss;
        }
        ckpt.optimizer.lr = ckpt.plateau.observe(val_loss, lr);
        let rec = EpochRecord { epoch, train, val_loss, lr };
        if let Some(run) = run {
            if improved {
                save_checkpoint(&run.ckpt_best(), &ckpt)?;
            }
            save_checkpoint(&run.ckpt_last(), &ckpt)?;
            let mut f = fs::OpenOptions::new().append(true).open(run.log())?;
            std::io::Write::write_all(&mut f, format!("{}\n", rec.csv_row()).as_bytes())?;
        }
        log::info!("epoch {epoch}: train {:.5} val {:.5} lr {lr}", train.total, val_loss);
        on_epoch(&rec);
        records.push(rec);
    }
    Ok((ckpt, records))
}

/// Starts `log.csv` or, when resuming, keeps only rows up to `epoch`.
fn prepare_log(path: &Path, epoch: usize) -> Result<()> {
    let mut text = format!("{LOG_HEADER}\n");
    if epoch > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                match line.split(',').next().and_then(|e| e.parse::<usize>().ok()) {
                    Some(e) if e <= epoch => writeln!(text, "{line}").unwrap(),
                    _ => {}
                }
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}
