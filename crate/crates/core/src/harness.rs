//! Command implementations behind the `tripinet` binary: data generation,
//! training, evaluation, robustness curves, ablations and feature dumps.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackbonePreset, NUM_STAGES};
use crate::checkpoint::{load_checkpoint, load_checkpoint_for, Checkpoint};
use crate::config::RunConfig;
use crate::data::{
    apply_attack, images_to_tensor, load_dataset, make_dataset, read_rgb_png, save_dataset, write_gray_png,
    write_mask_png, AttackSpec, Dataset, Partition, SampleRecord,
};
use crate::decoder::PoolingSchedule;
use crate::error::{Error, Result};
use crate::fusion::FUSION_GRID;
use crate::graph::{Graph, Mode};
use crate::loss::LossFlags;
use crate::metrics::MetricReport;
use crate::model::{tripinet_trace, TriPINetConfig};
use crate::params::ParamStore;
use crate::plot::{save_line_plot, Series};
use crate::train::{evaluate, initial_checkpoint, train, EpochRecord, RunDir};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "TRIPINET_RUN_ROOT";

/// `$TRIPINET_RUN_ROOT`, or `runs` in the working directory.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Exclusive hold on a run directory for the lifetime of the value.
pub struct RunLock {
    _file: File,
}

impl RunLock {
    pub fn acquire(run: &RunDir) -> Result<Self> {
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(run.lock())?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file }),
            Err(TryLockError::WouldBlock) => {
                Err(Error::Usage(format!("run directory {} is in use by another run", run.root.display())))
            }
            Err(TryLockError::Error(e)) => Err(e.into()),
        }
    }
}

/// Generates the configured synthetic dataset and writes it to `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let d = &cfg.data;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed);
    let ds = make_dataset(&mut rng, d.counts, d.size, &d.attacks, d.split)?;
    save_dataset(out, &ds)?;
    Ok(ds)
}

/// Loads `data` (or `cfg.data.dir`); otherwise generates the synthetic set
/// into `generated`.
pub fn dataset_for(cfg: &RunConfig, data: Option<&Path>, generated: &Path) -> Result<Dataset> {
    match data.or(cfg.data.dir.as_deref()) {
        Some(dir) => load_dataset(dir),
        None => cmd_gen_data(cfg, generated),
    }
}

pub struct TrainSummary {
    pub ckpt: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Trains into `run`, echoing the effective config. `resume` continues from a
/// saved training state.
pub fn cmd_train(cfg: &RunConfig, run: &RunDir, data: Option<&Path>, resume: Option<&Path>) -> Result<TrainSummary> {
    let _lock = RunLock::acquire(run)?;
    fs::write(run.config_echo(), cfg.to_text())?;
    let ds = dataset_for(cfg, data, &run.root.join("data"))?;
    let start = match resume {
        Some(path) => load_checkpoint_for(path, &cfg.model)?,
        None => initial_checkpoint(cfg)?,
    };
    let train_set: Vec<&SampleRecord> = ds.partition(Partition::Train).into_iter().map(|(_, s)| s).collect();
    let val_set: Vec<&SampleRecord> = ds.partition(Partition::Val).into_iter().map(|(_, s)| s).collect();
    let (ckpt, log) = train(cfg, start, &train_set, &val_set, Some(run), |_| {})?;
    let test = ds.partition(Partition::Test);
    if !test.is_empty() {
        let best = load_checkpoint(&run.ckpt_best())?;
        let (report, _) = evaluate(&best.params, &best.config, &test, cfg.train.batch_size)?;
        report.write_csv(&run.report())?;
    }
    plot_losses(&log, &run.plots().join("loss.png"))?;
    Ok(TrainSummary { ckpt, log })
}

/// Train and validation loss per epoch, each scaled by the largest value in
/// either curve.
fn plot_losses(log: &[EpochRecord], path: &Path) -> Result<()> {
    if log.is_empty() {
        return Ok(());
    }
    let train: Vec<f64> = log.iter().map(|r| r.train.total).collect();
    let val: Vec<f64> = log.iter().map(|r| r.val_loss).collect();
    let top = train.iter().chain(&val).fold(0.0f64, |m, v| m.max(*v));
    let scale = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| if top > 0.0 { x / top } else { 0.0 }).collect() };
    save_line_plot(path, &[Series { values: &scale(&train) }, Series { values: &scale(&val) }])
}

fn test_samples(ds: &Dataset) -> Result<Vec<(&str, &SampleRecord)>> {
    let test = ds.partition(Partition::Test);
    if test.is_empty() {
        return Err(Error::Input("dataset has no test samples".into()));
    }
    Ok(test)
}

/// Scores the test split; with `save_masks`, also writes each binarized
/// prediction (at its best threshold) as `masks/<id>_pred.png`.
pub fn cmd_eval(ckpt: &Path, data: &Path, out: &Path, save_masks: bool) -> Result<MetricReport> {
    let ck = load_checkpoint(ckpt)?;
    let ds = load_dataset(data)?;
    let samples = test_samples(&ds)?;
    let (report, probs) = evaluate(&ck.params, &ck.config, &samples, 8)?;
    fs::create_dir_all(out)?;
    report.write_csv(&out.join("report.csv"))?;
    if save_masks {
        for ((id, _), p) in samples.iter().zip(&probs) {
            let row = report.rows.iter().find(|r| r.sample_id == *id).expect("scored sample");
            let bin = p.mapv(|v| (v >= row.best_threshold) as u8);
            write_mask_png(&out.join("masks").join(format!("{id}_pred.png")), &bin)?;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub attack: AttackSpec,
    pub mean_f1: f64,
    pub mean_iou: f64,
}

/// Clean row first, then every grid attack grouped by kind and sorted by
/// parameter.
pub fn robustness_rows(
    params: &ParamStore,
    cfg: &TriPINetConfig,
    samples: &[(&str, &SampleRecord)],
) -> Result<Vec<RobustnessRow>> {
    let mut rows = Vec::new();
    for attack in std::iter::once(AttackSpec::None).chain(AttackSpec::grid()) {
        let attacked: Vec<SampleRecord> = samples
            .iter()
            .map(|(_, s)| Ok(SampleRecord { image: apply_attack(&s.image, attack)?, ..(*s).clone() }))
            .collect::<Result<_>>()?;
        let pairs: Vec<(&str, &SampleRecord)> = samples.iter().map(|(id, _)| *id).zip(&attacked).collect();
        let (report, _) = evaluate(params, cfg, &pairs, 8)?;
        rows.push(RobustnessRow { attack, mean_f1: report.mean_f1(), mean_iou: report.mean_iou() });
    }
    rows.sort_by_key(|r| (r.attack.kind_str() != "none", r.attack.kind_str(), r.attack.param()));
    Ok(rows)
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut s = String::from("attack,param,mean_f1,mean_iou\n");
    for r in rows {
        let param = r.attack.param().map_or(String::new(), |p| p.to_string());
        writeln!(s, "{},{param},{},{}", r.attack.kind_str(), r.mean_f1, r.mean_iou).unwrap();
    }
    s
}

/// Writes `robustness.csv` and one F1/IoU plot per attack kind.
pub fn cmd_robustness(ckpt: &Path, data: &Path, out: &Path) -> Result<Vec<RobustnessRow>> {
    let ck = load_checkpoint(ckpt)?;
    let ds = load_dataset(data)?;
    let rows = robustness_rows(&ck.params, &ck.config, &test_samples(&ds)?)?;
    write_robustness(&rows, out)?;
    Ok(rows)
}

pub fn write_robustness(rows: &[RobustnessRow], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("robustness.csv"), robustness_csv(rows))?;
    for kind in ["jpeg", "blur"] {
        let sel: Vec<&RobustnessRow> = rows.iter().filter(|r| r.attack.kind_str() == kind).collect();
        let f1: Vec<f64> = sel.iter().map(|r| r.mean_f1).collect();
        let iou: Vec<f64> = sel.iter().map(|r| r.mean_iou).collect();
        save_line_plot(&out.join("plots").join(format!("robustness_{kind}.png")), &[Series { values: &f1 }, Series {
            values: &iou,
        }])?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Fusion,
    Pooling,
    Loss,
    Backbone,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(AblationAxis::Fusion),
            "pooling" => Ok(AblationAxis::Pooling),
            "loss" => Ok(AblationAxis::Loss),
            "backbone" => Ok(AblationAxis::Backbone),
            other => Err(Error::Usage(format!("unknown ablation axis `{other}` (fusion, pooling, loss, backbone)"))),
        }
    }
}

/// The axis grid as labelled configs; everything but the axis is `base`.
pub fn ablation_variants(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut TriPINetConfig)| {
        let mut c = base.clone();
        f(&mut c.model);
        c
    };
    match axis {
        AblationAxis::Fusion => FUSION_GRID
            .iter()
            .map(|&(imp, rgb)| (format!("{imp}+{rgb}"), with(&|m| (m.imperceptible, m.rgb_fusion) = (imp, rgb))))
            .collect(),
        AblationAxis::Pooling => PoolingSchedule::ablation_grid()
            .into_iter()
            .map(|(label, sched)| (label.to_string(), with(&|m| m.schedule = sched)))
            .collect(),
        AblationAxis::Loss => LossFlags::ablation_grid()
            .into_iter()
            .map(|(label, flags)| (label.to_string(), with(&|m| m.loss = flags)))
            .collect(),
        AblationAxis::Backbone => BackbonePreset::ALL
            .iter()
            .map(|&p| (p.to_string(), with(&|m| m.preset = p)))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub mean_f1: f64,
    pub mean_iou: f64,
}

pub fn ablation_csv(axis: AblationAxis, seed: u64, rows: &[AblationRow]) -> String {
    let mut s = format!("# axis={axis:?} seed={seed}\nlabel,seed,mean_f1,mean_iou\n").to_lowercase();
    for r in rows {
        writeln!(s, "\"{}\",{seed},{},{}", r.label, r.mean_f1, r.mean_iou).unwrap();
    }
    s
}

fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

/// Trains every variant of `axis` on the shared dataset and scores its best
/// checkpoint on the test split. Writes `ablation_<axis>.csv` under `out`.
pub fn cmd_ablate(cfg: &RunConfig, axis: AblationAxis, out: &Path, data: Option<&Path>) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out)?;
    let ds = dataset_for(cfg, data, &out.join("data"))?;
    let test = test_samples(&ds)?;
    let mut rows = Vec::new();
    for (label, variant) in ablation_variants(cfg, axis) {
        let run = RunDir::new(out.join(slug(&label)))?;
        cmd_train(&variant, &run, Some(&dataset_path(cfg, data, out)), None)?;
        let best = load_checkpoint(&run.ckpt_best())?;
        let (report, _) = evaluate(&best.params, &best.config, &test, 8)?;
        report.write_csv(&run.report())?;
        rows.push(AblationRow { label, mean_f1: report.mean_f1(), mean_iou: report.mean_iou() });
    }
    let name = format!("ablation_{}.csv", format!("{axis:?}").to_lowercase());
    fs::write(out.join(name), ablation_csv(axis, cfg.model.seed, &rows))?;
    Ok(rows)
}

fn dataset_path(cfg: &RunConfig, data: Option<&Path>, out: &Path) -> PathBuf {
    data.map(Path::to_path_buf).or_else(|| cfg.data.dir.clone()).unwrap_or_else(|| out.join("data"))
}

/// Min-max scales a map to 8 bits; a constant map becomes black.
fn to_gray(map: &Array2<f64>) -> Array2<u8> {
    let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let span = hi - lo;
    map.mapv(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
}

/// Writes one grayscale PNG per channel of the RGB, frequency, noise,
/// fused-imperceptible and encoder features of `stage` to
/// `<out>/stage<i>/<stream>/c<k>.png`, and the DCT input map to `<out>/dct/`.
/// Returns the channel count per stream.
pub fn cmd_dump_features(ckpt: &Path, image_path: &Path, stage: usize, out: &Path) -> Result<Vec<(String, usize)>> {
    if !(1..=NUM_STAGES).contains(&stage) {
        return Err(Error::Usage(format!("stage must be in 1..={NUM_STAGES}, got {stage}")));
    }
    let ck = load_checkpoint(ckpt)?;
    let img = read_rgb_png(image_path)?;
    let x = images_to_tensor(&[&img])?;
    let mut g = Graph::new(&ck.params, Mode::Eval);
    let xv = g.input(x);
    let trace = tripinet_trace(&mut g, &ck.config, xv)?;
    let stage_dir = out.join(format!("stage{stage}"));
    let streams = [
        ("rgb", trace.rgb.stage(stage), stage_dir.join("rgb")),
        ("freq", trace.freq.stage(stage), stage_dir.join("freq")),
        ("noise", trace.noise.stage(stage), stage_dir.join("noise")),
        ("cmda", trace.fusion[stage - 1].imperceptible, stage_dir.join("cmda")),
        ("en", trace.encoder.stage(stage), stage_dir.join("en")),
        ("dct", trace.dct, out.join("dct")),
    ];
    let mut counts = Vec::new();
    for (name, var, dir) in streams {
        let t = g.value(var);
        for c in 0..t.dim().1 {
            let gray = to_gray(&t.slice(s![0, c, .., ..]).to_owned());
            write_gray_png(&dir.join(format!("c{c:03}.png")), &gray)?;
        }
        counts.push((name.to_string(), t.dim().1));
    }
    Ok(counts)
}
