//! End-to-end training loop: alternating stream, per-epoch loss mixing,
//! one backward pass per batch and plain SGD.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{downsample_mask, DatasetSplit, ImageSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::loss::{
    classification_loss_tensor, compute_weight_mask, lambda_at, segmentation_loss_tensor, total_loss_tensor,
    MixSchedule, WeightParams,
};
use crate::model::{image_to_tensor, TwoStageModel};
use crate::sampling::{batches, build_epoch_stream, SampleId, SamplerState, StreamItem};

/// The four switchable training components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub dyn_balanced_loss: bool,
    pub grad_flow_adjust: bool,
    pub freq_sampling: bool,
    pub dist_transform: bool,
}

impl Toggles {
    pub const NAMES: [&'static str; 4] = ["dyn_balanced_loss", "grad_flow_adjust", "freq_sampling", "dist_transform"];

    pub fn all(on: bool) -> Self {
        Self { dyn_balanced_loss: on, grad_flow_adjust: on, freq_sampling: on, dist_transform: on }
    }

    pub fn as_array(&self) -> [bool; 4] {
        [self.dyn_balanced_loss, self.grad_flow_adjust, self.freq_sampling, self.dist_transform]
    }

    pub fn from_array(v: [bool; 4]) -> Self {
        Self { dyn_balanced_loss: v[0], grad_flow_adjust: v[1], freq_sampling: v[2], dist_transform: v[3] }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all(true)
    }
}

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "1" | "true" | "on" | "yes" => Some(true),
        "0" | "false" | "off" | "no" => Some(false),
        _ => None,
    }
}

/// Either four positional flags (`1 0 1 1`) or all four named flags
/// (`dyn_balanced_loss=1 grad_flow_adjust=0 ...`), separated by whitespace
/// or commas.
impl FromStr for Toggles {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: String| Error::Config(format!("bad toggle row '{s}': {why}"));
        let fields: Vec<&str> = s.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 flags, found {}", fields.len())));
        }
        let mut values = [None; 4];
        if fields.iter().all(|f| f.contains('=')) {
            for f in fields {
                let (k, v) = f.split_once('=').unwrap();
                let i = Self::NAMES.iter().position(|n| *n == k).ok_or_else(|| bad(format!("unknown flag '{k}'")))?;
                if values[i].is_some() {
                    return Err(bad(format!("flag '{k}' given twice")));
                }
                values[i] = Some(parse_flag(v).ok_or_else(|| bad(format!("'{v}' is not 0/1")))?);
            }
        } else {
            for (slot, f) in values.iter_mut().zip(fields) {
                *slot = Some(parse_flag(f).ok_or_else(|| bad(format!("'{f}' is not 0/1")))?);
            }
        }
        Ok(Self::from_array(values.map(|v| v.expect("all four flags set"))))
    }
}

impl std::fmt::Display for Toggles {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> =
            Self::NAMES.iter().zip(self.as_array()).map(|(n, v)| format!("{n}={}", v as u8)).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub delta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_pos: f64,
    pub p: f64,
    pub toggles: Toggles,
    pub seed: u64,
    pub validation_select: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            delta: 1.0,
            epochs: 50,
            batch_size: 5,
            w_pos: 1.0,
            p: 1.0,
            toggles: Toggles::default(),
            seed: 0,
            validation_select: false,
        }
    }
}

impl TrainConfig {
    /// `epochs = 0` is accepted and trains nothing.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Config(format!("train.eta must be > 0 (got {})", self.eta)));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::Config(format!("train.delta must be >= 0 (got {})", self.delta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        WeightParams { w_pos: self.w_pos, p: self.p }
            .validate()
            .map_err(|e| Error::Config(format!("train.{}", e.to_string().trim_start_matches("configuration error: "))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub seg_loss: f64,
    pub cls_loss: f64,
    pub total_loss: f64,
    pub val_ap: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept when selecting on validation AP.
    pub best_epoch: Option<usize>,
    /// Usage count of every negative training sample, by sample id.
    pub negative_usage: Vec<(String, u64)>,
}

impl TrainHistory {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tlambda\tseg_loss\tcls_loss\ttotal_loss\tval_ap\n");
        for r in &self.records {
            let val = r.val_ap.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{val}", r.epoch, r.lambda, r.seg_loss, r.cls_loss, r.total_loss);
        }
        s
    }

    pub fn usage_tsv(&self) -> String {
        let mut s = String::from("id\tcount\n");
        for (id, c) in &self.negative_usage {
            let _ = writeln!(s, "{id}\t{c}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("history.tsv"), self.to_tsv())?;
        std::fs::write(dir.join("negative_usage.tsv"), self.usage_tsv())?;
        Ok(())
    }
}

/// Reported to the observer after every finished epoch.
pub struct EpochEvent<'a> {
    pub model: &'a TwoStageModel,
    pub record: &'a EpochRecord,
    /// True when this epoch set a new best validation AP.
    pub is_best: bool,
    pub is_last: bool,
}

/// One training sample with its loss targets at output resolution.
struct Prepared {
    input: Tensor,
    target: Tensor,
    weights: Tensor,
    dims: (usize, usize),
}

fn prepare(sample: &ImageSample, d: usize, cfg: &TrainConfig, dtype: DType) -> Result<Prepared> {
    let s = sample.padded_to(d);
    let (h, w) = (s.height(), s.width());
    let target = downsample_mask(&s.mask, d)?;
    let full = compute_weight_mask(&s.mask, cfg.w_pos, cfg.p, cfg.toggles.dist_transform)?;
    let weights = downsample_weights(&full.weights, &s.mask, &target, d);
    let to_tensor = |a: Array2<f32>| -> Result<Tensor> {
        Ok(Tensor::from_vec(a.iter().copied().collect::<Vec<_>>(), (1, 1, h / d, w / d), &Device::Cpu)?.to_dtype(dtype)?)
    };
    Ok(Prepared {
        input: image_to_tensor(&s.image)?.to_dtype(dtype)?,
        target: to_tensor(target.mapv(|v| v as f32))?,
        weights: to_tensor(weights)?,
        dims: (h, w),
    })
}

/// A positive output cell takes the largest weight among the positive input
/// pixels of its block; negative cells keep weight 1.
fn downsample_weights(weights: &Array2<f32>, mask: &Array2<u8>, target: &Array2<u8>, d: usize) -> Array2<f32> {
    Array2::from_shape_fn(target.dim(), |(y, x)| {
        if target[[y, x]] == 0 {
            return 1.0;
        }
        let block = s![y * d..(y + 1) * d, x * d..(x + 1) * d];
        weights
            .slice(block)
            .iter()
            .zip(mask.slice(block).iter())
            .filter(|(_, &m)| m != 0)
            .map(|(&w, _)| w)
            .fold(0.0, f32::max)
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Losses of one batch as graph tensors (seg, cls).
fn batch_losses(model: &TwoStageModel, items: &[&Prepared], labels: &[bool]) -> Result<(Tensor, Tensor)> {
    let dtype = model.dtype();
    let label_t = Tensor::from_vec(labels.iter().map(|&l| l as u8 as f32).collect::<Vec<_>>(), labels.len(), &Device::Cpu)?
        .to_dtype(dtype)?;
    if items.iter().all(|p| p.dims == items[0].dims) {
        let cat = |f: fn(&Prepared) -> &Tensor| Tensor::cat(&items.iter().map(|p| f(p)).collect::<Vec<_>>(), 0);
        let out = model.forward(&cat(|p| &p.input)?)?;
        let seg = segmentation_loss_tensor(&out.seg_output_map, &cat(|p| &p.target)?, &cat(|p| &p.weights)?)?;
        let cls = classification_loss_tensor(&out.cls_logit, &label_t)?;
        return Ok((seg, cls));
    }
    // Mixed image sizes: per-sample passes, averaged.
    let mut segs = Vec::with_capacity(items.len());
    let mut logits = Vec::with_capacity(items.len());
    for p in items {
        let out = model.forward(&p.input)?;
        segs.push(segmentation_loss_tensor(&out.seg_output_map, &p.target, &p.weights)?);
        logits.push(out.cls_logit);
    }
    let seg = Tensor::stack(&segs, 0)?.mean_all()?;
    let cls = classification_loss_tensor(&Tensor::cat(&logits, 0)?, &label_t)?;
    Ok((seg, cls))
}

/// `theta <- theta - eta * g` for every parameter the loss reaches.
pub fn sgd_step(model: &TwoStageModel, loss: &Tensor, eta: f64) -> Result<()> {
    let grads = loss.backward()?;
    for p in model.params() {
        if let Some(g) = grads.get(p.var.as_tensor()) {
            p.var.set(&(p.var.as_tensor() - g.affine(eta, 0.0)?)?)?;
        }
    }
    Ok(())
}

pub fn train(model: TwoStageModel, split: &DatasetSplit, cfg: &TrainConfig) -> Result<(TwoStageModel, TrainHistory)> {
    train_with(model, split, None, cfg, |_| Ok(()))
}

/// Full training entry point. With `cfg.validation_select`, AP on
/// `validation` is computed after every epoch and the best parameters are
/// restored at the end.
pub fn train_with(
    mut model: TwoStageModel,
    split: &DatasetSplit,
    validation: Option<&DatasetSplit>,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochEvent) -> Result<()>,
) -> Result<(TwoStageModel, TrainHistory)> {
    cfg.validate()?;
    if split.positives.is_empty() || split.negatives.is_empty() {
        return Err(Error::Data(format!(
            "{}: training needs at least one positive and one negative sample ({} / {})",
            split.name,
            split.positives.len(),
            split.negatives.len()
        )));
    }
    if cfg.validation_select && validation.is_none_or(|v| v.positives.is_empty()) {
        return Err(Error::Config("train.validation_select needs a validation split with positives".into()));
    }
    let g = cfg.toggles.grad_flow_adjust;
    model.set_grad_stops(g, g);

    let d = model.config().downsample_factor;
    let dtype = model.dtype();
    let pos: Vec<Prepared> = split.positives.iter().map(|s| prepare(s, d, cfg, dtype)).collect::<Result<_>>()?;
    let neg: Vec<Prepared> = split.negatives.iter().map(|s| prepare(s, d, cfg, dtype)).collect::<Result<_>>()?;
    let pos_ids: Vec<SampleId> = (0..pos.len()).collect();
    let neg_ids: Vec<SampleId> = (0..neg.len()).collect();

    let mut sampler = SamplerState::new(cfg.seed ^ 0x5eed_5a4d, cfg.toggles.freq_sampling);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;

    if cfg.epochs > 0 {
        let schedule = MixSchedule::new(cfg.epochs, cfg.delta, cfg.toggles.dyn_balanced_loss)?;
        for epoch in 0..cfg.epochs {
            let lambda = lambda_at(epoch, &schedule)?;
            let stream = build_epoch_stream(&pos_ids, &neg_ids, &mut sampler)?;
            let (mut seg_sum, mut cls_sum, mut tot_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
            for (step, batch) in batches(&stream, cfg.batch_size).enumerate() {
                let items: Vec<&Prepared> = batch
                    .iter()
                    .map(|it| match *it {
                        StreamItem::Positive(i) => &pos[i],
                        StreamItem::Negative(i) => &neg[i],
                    })
                    .collect();
                let labels: Vec<bool> = batch.iter().map(StreamItem::is_positive).collect();
                let (seg, cls) = batch_losses(&model, &items, &labels)?;
                let (seg_v, cls_v) = (scalar(&seg)?, scalar(&cls)?);
                if !(seg_v.is_finite() && cls_v.is_finite()) {
                    return Err(Error::NonFinite { epoch, step, seg_loss: seg_v, cls_loss: cls_v });
                }
                let total = total_loss_tensor(&seg, &cls, lambda, cfg.delta)?;
                sgd_step(&model, &total, cfg.eta)?;
                let k = batch.len();
                seg_sum += seg_v * k as f64;
                cls_sum += cls_v * k as f64;
                tot_sum += scalar(&total)? * k as f64;
                n += k;
            }
            let val_ap = match (cfg.validation_select, validation) {
                (true, Some(v)) => Some(evaluate(&model, &v.samples().cloned().collect::<Vec<_>>())?.ap),
                _ => None,
            };
            let is_best = match val_ap {
                Some(ap) if best.as_ref().is_none_or(|(b, _)| ap > *b) => {
                    best = Some((ap, model.snapshot()?));
                    history.best_epoch = Some(epoch);
                    true
                }
                _ => false,
            };
            let record = EpochRecord {
                epoch,
                lambda,
                seg_loss: seg_sum / n as f64,
                cls_loss: cls_sum / n as f64,
                total_loss: tot_sum / n as f64,
                val_ap,
            };
            log::info!(
                "epoch {epoch}: lambda={lambda:.4} seg={:.5} cls={:.5} total={:.5}{}",
                record.seg_loss,
                record.cls_loss,
                record.total_loss,
                val_ap.map(|a| format!(" val_ap={a:.4}")).unwrap_or_default()
            );
            observer(&EpochEvent { model: &model, record: &record, is_best, is_last: epoch + 1 == cfg.epochs })?;
            history.records.push(record);
        }
    }
    if let Some((_, params)) = best {
        model.restore(&params)?;
    }
    history.negative_usage = split.negatives.iter().enumerate().map(|(i, s)| (s.id.clone(), sampler.count(i))).collect();
    Ok((model, history))
}

/// One row of an ablation table; `report` is `None` when the run aborted.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Trains and evaluates one fresh model per grid row, all with `cfg.seed`.
/// A failing row is recorded and the remaining rows still run.
pub fn ablate(
    factory: impl Fn() -> Result<TwoStageModel>,
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
    cfg: &TrainConfig,
    grid: &[Toggles],
) -> Result<Vec<AblationRow>> {
    let test: Vec<ImageSample> = test_split.samples().cloned().collect();
    ablate_with(grid, |toggles| {
        let row_cfg = TrainConfig { toggles: *toggles, validation_select: false, ..cfg.clone() };
        let (model, _) = train(factory()?, train_split, &row_cfg)?;
        evaluate(&model, &test)
    })
}

/// Runs `run` per row, turning row errors into aborted rows.
pub fn ablate_with(grid: &[Toggles], mut run: impl FnMut(&Toggles) -> Result<EvalReport>) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    Ok(grid
        .iter()
        .map(|t| match run(t) {
            Ok(r) => AblationRow { toggles: *t, report: Some(r), error: None },
            Err(e) => {
                log::warn!("ablation row {t} aborted: {e}");
                AblationRow { toggles: *t, report: None, error: Some(e.to_string()) }
            }
        })
        .collect())
}

/// Tab-separated table: the four toggles, AP, FP+FN and a status column.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = Toggles::NAMES.join("\t");
    s.push_str("\tap\tfp_fn\tstatus\n");
    for r in rows {
        let flags: Vec<String> = r.toggles.as_array().iter().map(|&v| (v as u8).to_string()).collect();
        match &r.report {
            Some(rep) => {
                let _ = writeln!(s, "{}\t{:.4}\t{}\tok", flags.join("\t"), rep.ap, rep.fp + rep.fn_);
            }
            None => {
                let why = r.error.as_deref().unwrap_or("").replace(['\t', '\n'], " ");
                let _ = writeln!(s, "{}\t-\t-\taborted: {why}", flags.join("\t"));
            }
        }
    }
    s
}

/// Reads an ablation grid: one toggle row per line; `#` starts a comment.
pub fn parse_grid(text: &str) -> Result<Vec<Toggles>> {
    let grid: Vec<Toggles> = text
        .lines()
        .map(|l| l.split('#').next().unwrap().trim())
        .filter(|l| !l.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::model::ModelConfig;

    fn micro_split() -> DatasetSplit {
        synth_generate(&SynthSpec { n_pos: 3, n_neg: 4, size: 32, ..SynthSpec::default() }, 1)
    }

    fn micro_model(seed: u64) -> TwoStageModel {
        crate::model::build_model(&ModelConfig { base_channels: 2, ..ModelConfig::default() }, seed).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 2, eta: 0.05, ..TrainConfig::default() }
    }

    #[test]
    fn toggle_parsing() {
        let t: Toggles = "1 0 1 0".parse().unwrap();
        assert_eq!(t.as_array(), [true, false, true, false]);
        let named: Toggles = "freq_sampling=1,dist_transform=0,dyn_balanced_loss=1,grad_flow_adjust=0".parse().unwrap();
        assert_eq!(named, t);
        assert_eq!(t.to_string().parse::<Toggles>().unwrap(), t);
        assert!("1 0 1".parse::<Toggles>().is_err());
        assert!("1 0 1 2".parse::<Toggles>().is_err());
        assert!("a=1 b=0 c=1 d=0".parse::<Toggles>().is_err());
        assert!(parse_grid("# nothing\n\n").is_err());
        assert_eq!(parse_grid("1 1 1 1\n1 1 1 1 # dup\n").unwrap().len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1).validate().is_ok());
        assert!(TrainConfig { eta: 0.0, ..cfg(1) }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg(1) }.validate().is_err());
        assert!(TrainConfig { w_pos: -1.0, ..cfg(1) }.validate().is_err());
    }

    #[test]
    fn zero_epochs_leaves_parameters_unchanged() {
        let model = micro_model(4);
        let before = model.snapshot().unwrap();
        let (model, history) = train(model, &micro_split(), &cfg(0)).unwrap();
        assert!(history.records.is_empty());
        for (a, b) in before.iter().zip(model.snapshot().unwrap()) {
            assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }

    #[test]
    fn history_is_deterministic_and_tracks_lambda() {
        let split = micro_split();
        let (_, h1) = train(micro_model(4), &split, &cfg(3)).unwrap();
        let (_, h2) = train(micro_model(4), &split, &cfg(3)).unwrap();
        assert_eq!(h1, h2);
        let lambdas: Vec<f64> = h1.records.iter().map(|r| r.lambda).collect();
        assert_eq!(lambdas, vec![1.0, 1.0 - 1.0 / 3.0, 1.0 - 2.0 / 3.0]);
        assert!(h1.records.iter().all(|r| r.total_loss.is_finite()));
        assert_eq!(h1.negative_usage.iter().map(|(_, c)| c).sum::<u64>(), 9);
        assert_eq!(h1.to_tsv().lines().count(), 4);
    }

    #[test]
    fn divergence_aborts_with_location() {
        let c = TrainConfig { eta: 1e30, ..cfg(3) };
        match train(micro_model(4), &micro_split(), &c) {
            Err(Error::NonFinite { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn validation_selection_restores_best_epoch() {
        let split = micro_split();
        let val = synth_generate(&SynthSpec { n_pos: 2, n_neg: 2, size: 32, ..SynthSpec::default() }, 99);
        let c = TrainConfig { validation_select: true, ..cfg(3) };
        let mut snapshots = Vec::new();
        let (model, history) = train_with(micro_model(4), &split, Some(&val), &c, |ev| {
            snapshots.push(ev.model.snapshot()?);
            Ok(())
        })
        .unwrap();
        let best = history.best_epoch.unwrap();
        let aps: Vec<f64> = history.records.iter().map(|r| r.val_ap.unwrap()).collect();
        assert!(aps.iter().all(|&a| a <= aps[best]));
        assert_eq!(aps.iter().position(|&a| a == aps[best]), Some(best));
        for (a, b) in snapshots[best].iter().zip(model.snapshot().unwrap()) {
            assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
        assert!(train_with(micro_model(4), &split, None, &c, |_| Ok(())).is_err());
    }

    #[test]
    fn ablation_rows_survive_an_abort() {
        let grid = [Toggles::all(false), Toggles::all(true)];
        let ok = EvalReport::from_scores(&[0.9, 0.1], &[true, false]).unwrap();
        let rows = ablate_with(&grid, |t| {
            if t.grad_flow_adjust {
                Ok(ok.clone())
            } else {
                Err(Error::NonFinite { epoch: 1, step: 2, seg_loss: f64::NAN, cls_loss: 0.0 })
            }
        })
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].report.is_none() && rows[1].report.is_some());
        let table = ablation_table(&rows);
        assert!(table.lines().nth(1).unwrap().contains("aborted"));
        assert!(table.lines().nth(2).unwrap().ends_with("\tok"));
        assert!(ablate_with(&[], |_| Ok(ok.clone())).is_err());
    }

    #[test]
    fn weight_downsampling_keeps_region_peak() {
        let mut mask = Array2::<u8>::zeros((8, 8));
        mask.slice_mut(s![1..6, 1..6]).fill(1);
        let full = compute_weight_mask(&mask, 3.0, 1.0, true).unwrap();
        let target = downsample_mask(&mask, 4).unwrap();
        let w = downsample_weights(&full.weights, &mask, &target, 4);
        assert_eq!(w[[0, 0]], 3.0);
        assert!(w.iter().all(|&v| v > 0.0 && v <= 3.0));
    }
}
