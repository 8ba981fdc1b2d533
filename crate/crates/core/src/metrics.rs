//! Pixel-level F1 / IoU and the per-image threshold sweep.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{shape_err, Error, Result};

/// Number of threshold steps; thresholds are `k / THRESHOLD_STEPS`.
pub const THRESHOLD_STEPS: usize = 255;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    F1,
    Iou,
}

fn check_mask(g: &ArrayView2<f64>) -> Result<()> {
    if g.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Input("ground-truth mask is not binary".into()));
    }
    Ok(())
}

/// Counts against a binary mask; `pred` is true where the pixel is called forged.
pub fn confusion_counts(pred: ArrayView2<bool>, g: ArrayView2<f64>) -> Result<ConfusionCounts> {
    if pred.dim() != g.dim() {
        return shape_err(format!("prediction {:?} vs mask {:?}", pred.dim(), g.dim()));
    }
    check_mask(&g)?;
    let mut c = ConfusionCounts::default();
    ndarray::Zip::from(&pred).and(&g).for_each(|&p, &gv| match (p, gv == 1.0) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        (false, false) => c.tn += 1,
    });
    Ok(c)
}

/// `(F1, IoU)`. When prediction and mask are both empty the scores are 1.
pub fn f1_iou(cc: ConfusionCounts) -> (f64, f64) {
    let tp = cc.tp as f64;
    let wrong = (cc.fp + cc.fn_) as f64;
    if cc.tp + cc.fp + cc.fn_ == 0 {
        return (1.0, 1.0);
    }
    (2.0 * tp / (2.0 * tp + wrong), tp / (tp + wrong))
}

pub fn threshold(k: usize) -> f64 {
    k as f64 / THRESHOLD_STEPS as f64
}

/// Number of grid thresholds `t` with `t <= p`.
fn thresholds_at_or_below(p: f64) -> usize {
    if p.is_nan() || p < 0.0 {
        return 0;
    }
    let mut k = ((p * THRESHOLD_STEPS as f64).floor() as usize).min(THRESHOLD_STEPS);
    while k > 0 && threshold(k) > p {
        k -= 1;
    }
    while k < THRESHOLD_STEPS && threshold(k + 1) <= p {
        k += 1;
    }
    k + 1
}

/// Confusion counts for every grid threshold, binarizing with `P ≥ t`.
pub fn sweep_counts(p: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<Vec<ConfusionCounts>> {
    if p.dim() != g.dim() {
        return shape_err(format!("prediction {:?} vs mask {:?}", p.dim(), g.dim()));
    }
    check_mask(&g)?;
    let n = THRESHOLD_STEPS + 1;
    // pos[k] / neg[k]: pixels whose probability clears exactly k thresholds
    let mut pos = vec![0u64; n + 1];
    let mut neg = vec![0u64; n + 1];
    ndarray::Zip::from(&p).and(&g).for_each(|&pv, &gv| {
        let k = thresholds_at_or_below(pv);
        if gv == 1.0 {
            pos[k] += 1;
        } else {
            neg[k] += 1;
        }
    });
    let (total_pos, total_neg): (u64, u64) = (pos.iter().sum(), neg.iter().sum());
    // pixels predicted positive at threshold k clear more than k thresholds
    let mut out = Vec::with_capacity(n);
    let (mut pos_below, mut neg_below) = (0u64, 0u64);
    for k in 0..n {
        pos_below += pos[k];
        neg_below += neg[k];
        let tp = total_pos - pos_below;
        let fp = total_neg - neg_below;
        out.push(ConfusionCounts { tp, fp, fn_: total_pos - tp, tn: total_neg - fp });
    }
    Ok(out)
}

/// Best score over the threshold grid and the smallest threshold reaching it.
pub fn threshold_sweep(p: ArrayView2<f64>, g: ArrayView2<f64>, metric: Metric) -> Result<(f64, f64)> {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for (k, cc) in sweep_counts(p, g)?.into_iter().enumerate() {
        let (f1, iou) = f1_iou(cc);
        let s = match metric {
            Metric::F1 => f1,
            Metric::Iou => iou,
        };
        if s > best.0 {
            best = (s, threshold(k));
        }
    }
    Ok(best)
}

/// Per-image scores for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub sample_id: String,
    pub f1: f64,
    pub iou: f64,
    pub best_threshold: f64,
}

/// F1 and IoU are monotonically related, so one threshold maximizes both.
pub fn score_sample(sample_id: &str, p: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<SampleScore> {
    let (f1, t) = threshold_sweep(p, g, Metric::F1)?;
    let (iou, _) = threshold_sweep(p, g, Metric::Iou)?;
    Ok(SampleScore { sample_id: sample_id.to_string(), f1, iou, best_threshold: t })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<SampleScore>,
}

impl MetricReport {
    /// Rows sorted by sample id so the report does not depend on evaluation order.
    pub fn new(mut rows: Vec<SampleScore>) -> Self {
        rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        Self { rows }
    }

    pub fn mean_f1(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.f1))
    }

    pub fn mean_iou(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.iou))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,f1,iou,best_threshold\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.sample_id, r.f1, r.iou, r.best_threshold).unwrap();
        }
        writeln!(s, "mean,{},{},", self.mean_f1(), self.mean_iou()).unwrap();
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}
