//! Per-image classification metrics.
//!
//! AP is the step-wise area under the precision-recall curve over
//! descending score thresholds; samples with equal scores enter the
//! positive set together. FP/FN are reported at the cut point with the
//! highest F1, ties going to the higher threshold.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::model::{image_to_tensor, TwoStageModel};

/// sigmoid(cls_logit) per sample, in input order.
pub fn score_dataset(model: &TwoStageModel, samples: &[ImageSample]) -> Result<(Vec<f64>, Vec<bool>)> {
    let d = model.config().downsample_factor;
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let padded = s.padded_to(d);
        let out = model.forward(&image_to_tensor(&padded.image)?)?;
        let logit = out.cls_logit.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?[0];
        scores.push(sigmoid(logit));
    }
    Ok((scores, samples.iter().map(|s| s.label).collect()))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Confusion counts when predicting positive for `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    Ok(())
}

/// One entry per distinct score, in descending threshold order.
pub fn cut_points(scores: &[f64], labels: &[bool]) -> Result<Vec<CutPoint>> {
    check_lengths(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(CutPoint { threshold, tp, fp });
    }
    Ok(points)
}

fn positives(labels: &[bool]) -> usize {
    labels.iter().filter(|&&l| l).count()
}

pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let points = cut_points(scores, labels)?;
    let p = positives(labels);
    if p == 0 {
        return Err(Error::Metric("average precision needs at least one positive label".into()));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for c in points {
        let recall = c.tp as f64 / p as f64;
        let precision = c.tp as f64 / (c.tp + c.fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestF {
    pub threshold: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub tpr: f64,
    pub tnr: f64,
}

pub fn best_f_measure(scores: &[f64], labels: &[bool]) -> Result<BestF> {
    let points = cut_points(scores, labels)?;
    let p = positives(labels);
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Metric("best F-measure needs both positive and negative labels".into()));
    }
    let mut best: Option<BestF> = None;
    for c in points {
        let fn_ = p - c.tp;
        let f1 = 2.0 * c.tp as f64 / (2 * c.tp + c.fp + fn_) as f64;
        if best.is_none_or(|b| f1 > b.f1) {
            best = Some(BestF {
                threshold: c.threshold,
                f1,
                tp: c.tp,
                fp: c.fp,
                fn_,
                tn: n - c.fp,
                tpr: c.tp as f64 / p as f64,
                tnr: (n - c.fp) as f64 / n as f64,
            });
        }
    }
    Ok(best.expect("at least one cut point"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// (recall, precision) per distinct threshold, thresholds descending.
    pub pr_points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
    pub ap: f64,
    pub best_threshold: f64,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tpr: f64,
    pub tnr: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let ap = average_precision(scores, labels)?;
        let best = best_f_measure(scores, labels)?;
        let p = positives(labels);
        let points = cut_points(scores, labels)?;
        Ok(Self {
            pr_points: points.iter().map(|c| (c.tp as f64 / p as f64, c.tp as f64 / (c.tp + c.fp) as f64)).collect(),
            thresholds: points.iter().map(|c| c.threshold).collect(),
            ap,
            best_threshold: best.threshold,
            fp: best.fp,
            fn_: best.fn_,
            tpr: best.tpr,
            tnr: best.tnr,
            positives: p,
            negatives: labels.len() - p,
        })
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("ap", self.ap.to_string()),
            ("best_threshold", self.best_threshold.to_string()),
            ("fp", self.fp.to_string()),
            ("fn", self.fn_.to_string()),
            ("tpr", self.tpr.to_string()),
            ("tnr", self.tnr.to_string()),
            ("positives", self.positives.to_string()),
            ("negatives", self.negatives.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn pr_table(&self) -> String {
        let mut s = String::from("threshold\trecall\tprecision\n");
        for (t, (r, p)) in self.thresholds.iter().zip(&self.pr_points) {
            let _ = writeln!(s, "{t}\t{r}\t{p}");
        }
        s
    }

    /// Writes `<stem>.txt` (key-value) and `<stem>_pr.tsv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_kv())?;
        std::fs::write(dir.join(format!("{stem}_pr.tsv")), self.pr_table())?;
        Ok(())
    }
}

pub fn evaluate(model: &TwoStageModel, samples: &[ImageSample]) -> Result<EvalReport> {
    let (scores, labels) = score_dataset(model, samples)?;
    EvalReport::from_scores(&scores, &labels)
}

/// Per-fold metrics combined without pooling scores: mean AP, summed FP/FN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub folds: usize,
    pub fold_aps: Vec<f64>,
    pub mean_ap: f64,
    pub fp_sum: usize,
    pub fn_sum: usize,
}

impl FoldSummary {
    pub fn to_kv(&self) -> String {
        let aps: Vec<String> = self.fold_aps.iter().map(f64::to_string).collect();
        format!(
            "folds={}\nfold_aps={}\nmean_ap={}\nfp_sum={}\nfn_sum={}\n",
            self.folds,
            aps.join(","),
            self.mean_ap,
            self.fp_sum,
            self.fn_sum
        )
    }
}

pub fn aggregate_folds(reports: &[EvalReport]) -> Result<FoldSummary> {
    if reports.is_empty() {
        return Err(Error::Metric("no fold reports to aggregate".into()));
    }
    let fold_aps: Vec<f64> = reports.iter().map(|r| r.ap).collect();
    Ok(FoldSummary {
        folds: reports.len(),
        mean_ap: fold_aps.iter().sum::<f64>() / reports.len() as f64,
        fold_aps,
        fp_sum: reports.iter().map(|r| r.fp).sum(),
        fn_sum: reports.iter().map(|r| r.fn_).sum(),
    })
}

/// TPR/TNR per class (e.g. one row per surface type).
pub fn class_table(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::from("class\ttpr\ttnr\tap\tfp\tfn\n");
    for (name, r) in rows {
        let _ = writeln!(s, "{name}\t{:.2}\t{:.2}\t{}\t{}\t{}", 100.0 * r.tpr, 100.0 * r.tnr, r.ap, r.fp, r.fn_);
    }
    s
}
