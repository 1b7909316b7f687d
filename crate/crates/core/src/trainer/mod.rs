//! Self-training rounds with alternating segmentation/discriminator updates.
//!
//! Round 1 trains on labeled source data plus the adversarial term. Every
//! later round additionally fits pseudo labels that the previous round's
//! network produced on the unlabeled target split. Each round continues from
//! the previous weights with fresh optimizer state and its own polynomial
//! learning-rate decay.

pub mod data;
pub mod loss;
pub mod model;
pub mod optim;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{Domain, Modality};
use crate::dataio::pseudo::{save_pseudo_labels, PseudoLabelRecord};
use crate::dataio::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionCounts, MaxF, Scores, ThresholdSweep};
use crate::params::Checkpoint;
use crate::rng;
use crate::sfa::{adversarial_objective, generator_fool_loss};
use crate::tensor_ops::{downsample_nearest, resize_bilinear, tensor_to_array2};

pub use data::TensorSet;
pub use loss::{make_pseudo_labels, pseudo_label_masks, seg_loss, total_loss, LossBreakdown, LossTerms, PixelTargets};
pub use model::{Forward, Inputs, Model, DISCRIMINATOR_PREFIXES, GENERATOR_PREFIXES};
pub use optim::{poly_lr, Adam, Sgd};

/// Supervision for a whole split at input and at feature resolution.
#[derive(Debug, Clone)]
pub struct Supervision {
    pub full: PixelTargets,
    pub feat: PixelTargets,
}

impl Supervision {
    pub fn new(
        labels: &[Array2<u8>],
        ignore: Option<&[Array2<bool>]>,
        feat: (usize, usize),
        dtype: DType,
    ) -> Result<Self> {
        let dev = Device::Cpu;
        let l: Vec<&Array2<u8>> = labels.iter().collect();
        let ig: Option<Vec<&Array2<bool>>> = ignore.map(|i| i.iter().collect());
        let full = PixelTargets::new(&l, ig.as_deref(), dtype, &dev)?;
        let ls: Vec<Array2<u8>> = labels.iter().map(|x| downsample_nearest(x, feat.0, feat.1)).collect();
        let is: Option<Vec<Array2<bool>>> =
            ignore.map(|i| i.iter().map(|x| downsample_nearest(x, feat.0, feat.1)).collect());
        let lr: Vec<&Array2<u8>> = ls.iter().collect();
        let ir: Option<Vec<&Array2<bool>>> = is.as_ref().map(|i| i.iter().collect());
        let feat = PixelTargets::new(&lr, ir.as_deref(), dtype, &dev)?;
        Ok(Self { full, feat })
    }

    pub fn select(&self, idx: &Tensor) -> Result<Self> {
        Ok(Self {
            full: self.full.select(idx)?,
            feat: self.feat.select(idx)?,
        })
    }

    fn from_records(records: &[PseudoLabelRecord], feat: (usize, usize), dtype: DType) -> Result<Self> {
        let labels: Vec<Array2<u8>> = records.iter().map(|r| r.label.clone()).collect();
        let ignore: Vec<Array2<bool>> = records.iter().map(|r| r.ignore.clone()).collect();
        Self::new(&labels, Some(&ignore), feat, dtype)
    }
}

/// The three splits of an adaptation run.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub source: TensorSet,
    pub target_train: TensorSet,
    pub target_eval: Option<TensorSet>,
}

impl Datasets {
    pub fn load(
        source: &dyn crate::dataio::SampleSource,
        target_train: &dyn crate::dataio::SampleSource,
        target_eval: Option<&dyn crate::dataio::SampleSource>,
        with_normals: bool,
        dtype: DType,
    ) -> Result<Self> {
        Ok(Self {
            source: TensorSet::load(source, true, with_normals, dtype)?,
            target_train: TensorSet::load(target_train, false, with_normals, dtype)?,
            target_eval: target_eval
                .map(|t| TensorSet::load(t, true, with_normals, dtype))
                .transpose()?,
        })
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub epoch: usize,
    pub split: String,
    #[serde(rename = "PRE", skip_serializing_if = "Option::is_none", default)]
    pub precision: Option<f64>,
    #[serde(rename = "REC", skip_serializing_if = "Option::is_none", default)]
    pub recall: Option<f64>,
    #[serde(rename = "F1", skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
    #[serde(rename = "IoU", skip_serializing_if = "Option::is_none", default)]
    pub iou: Option<f64>,
    #[serde(rename = "MaxF", skip_serializing_if = "Option::is_none", default)]
    pub maxf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub losses: Option<serde_json::Value>,
}

impl MetricsRecord {
    fn train(round: usize, epoch: usize, losses: &LossBreakdown) -> Self {
        Self {
            round,
            epoch,
            split: "train".into(),
            precision: None,
            recall: None,
            f1: None,
            iou: None,
            maxf: None,
            losses: Some(serde_json::to_value(losses).expect("losses serialize")),
        }
    }

    fn eval(round: usize, epoch: usize, split: &str, r: &EvalReport) -> Self {
        Self {
            round,
            epoch,
            split: split.into(),
            precision: Some(r.scores.precision),
            recall: Some(r.scores.recall),
            f1: Some(r.scores.f1),
            iou: Some(r.scores.iou),
            maxf: Some(r.maxf.value),
            losses: None,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageScores {
    pub id: String,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub scores: Scores,
    #[serde(flatten)]
    pub maxf: MaxF,
    pub per_image: Vec<ImageScores>,
}

const INFERENCE_BATCH: usize = 8;

/// Full-resolution foreground probabilities for every sample of `set`.
pub fn predict(model: &Model, set: &TensorSet) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(INFERENCE_BATCH) {
        let fwd = model.forward(&set.inputs(chunk)?, Domain::Target)?;
        let p = fwd.foreground_full()?.detach();
        for i in 0..chunk.len() {
            out.push(tensor_to_array2(&p.get(i)?.squeeze(0)?)?);
        }
    }
    Ok(out)
}

/// Scores predictions at threshold 0.5 plus the MaxF sweep, aggregating
/// counts over the whole split.
pub fn score_predictions(ids: &[String], probs: &[Array2<f32>], labels: &[Array2<u8>]) -> Result<EvalReport> {
    let mut total = ConfusionCounts::default();
    let mut sweep = ThresholdSweep::new(metrics::default_thresholds())?;
    let mut per_image = Vec::with_capacity(ids.len());
    for ((id, p), gt) in ids.iter().zip(probs).zip(labels) {
        let c = metrics::confusion(&metrics::binarize(p, 0.5), gt, None)?;
        sweep.add(p, gt, None)?;
        total += c;
        per_image.push(ImageScores {
            id: id.clone(),
            counts: c,
            scores: metrics::scores(&c),
        });
    }
    Ok(EvalReport {
        counts: total,
        scores: metrics::scores(&total),
        maxf: sweep.best(),
        per_image,
    })
}

pub fn evaluate(model: &Model, set: &TensorSet) -> Result<(EvalReport, Vec<Array2<f32>>)> {
    let labels = set
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("cannot evaluate on {} without labels", set.role)))?;
    let probs = predict(model, set)?;
    Ok((score_predictions(&set.ids, &probs, labels)?, probs))
}

/// Pseudo labels for every sample of `set`, made by `model` after
/// `producer_round`.
pub fn pseudo_label_split(model: &Model, set: &TensorSet, alpha: f64, producer_round: usize) -> Result<Vec<PseudoLabelRecord>> {
    let probs = predict(model, set)?;
    Ok(set
        .ids
        .iter()
        .zip(&probs)
        .map(|(id, p)| make_pseudo_labels(id, p, alpha, producer_round))
        .collect())
}

/// Model plus optimizer state within one round.
pub struct Trainer {
    pub model: Model,
    opt_g: Sgd,
    opt_d: Adam,
    step: usize,
    total_steps: usize,
}

/// A batch of one domain with its supervision, if any.
pub struct DomainBatch<'a> {
    pub inputs: &'a Inputs,
    pub targets: Option<&'a Supervision>,
}

impl Trainer {
    pub fn new(model: Model, total_steps: usize) -> Self {
        let cfg = &model.config;
        let g_vars = model.store.vars_with_prefix(GENERATOR_PREFIXES).into_iter().map(|(_, v)| v).collect();
        let d_vars = model.store.vars_with_prefix(DISCRIMINATOR_PREFIXES).into_iter().map(|(_, v)| v).collect();
        let opt_g = Sgd::new(g_vars, cfg.lr_seg, cfg.momentum, cfg.weight_decay);
        let opt_d = Adam::new(d_vars, cfg.lr_disc);
        Self {
            model,
            opt_g,
            opt_d,
            step: 0,
            total_steps,
        }
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Segmentation-network loss terms for one source and one target batch.
    fn generator_terms(&self, round: usize, fs: &Forward, ft: &Forward, src: &DomainBatch, tgt: &DomainBatch) -> Result<LossTerms<Tensor>> {
        let cfg = &self.model.config;
        let (h, w) = fs.input_size;
        let mut terms = LossTerms::default();
        let st = src
            .targets
            .ok_or_else(|| Error::State("source batch without labels".into()))?;
        terms.seg_s = Some(seg_loss(&resize_bilinear(&fs.main.logits, h, w)?, &st.full)?);
        if let (Some(a), Some(b)) = (&fs.aux_rgb, &fs.aux_sn) {
            terms.rgb_seg_s = Some(seg_loss(&a.logits, &st.feat)?);
            terms.sn_seg_s = Some(seg_loss(&b.logits, &st.feat)?);
        }
        if round >= 2 {
            let tt = tgt
                .targets
                .ok_or_else(|| Error::State(format!("round {round} target batch lacks pseudo labels")))?;
            let (h, w) = ft.input_size;
            terms.seg_t = Some(seg_loss(&resize_bilinear(&ft.main.logits, h, w)?, &tt.full)?);
            if let (Some(a), Some(b)) = (&ft.aux_rgb, &ft.aux_sn) {
                terms.rgb_seg_t = Some(seg_loss(&a.logits, &tt.feat)?);
                terms.sn_seg_t = Some(seg_loss(&b.logits, &tt.feat)?);
            }
        }
        if cfg.sfa.enabled {
            let mut fool: Option<Tensor> = None;
            for m in self.model.aligned() {
                let d_t = self.model.domain_scores(ft, m, false)?;
                let l = generator_fool_loss(&d_t, cfg.sfa.sum_reduction)?;
                fool = Some(match fool {
                    Some(acc) => (acc + l)?,
                    None => l,
                });
            }
            terms.adv = fool;
        }
        Ok(terms)
    }

    /// One generator update followed by one discriminator update.
    pub fn alternate_step(&mut self, round: usize, src: &DomainBatch, tgt: &DomainBatch) -> Result<LossBreakdown> {
        let cfg = self.model.config.clone();
        let lr_scale = poly_lr(1.0, self.step, self.total_steps, cfg.poly_power);
        self.opt_g.lr = cfg.lr_seg * lr_scale;
        self.opt_d.lr = cfg.lr_disc * lr_scale;
        self.step += 1;

        let fs = self.model.forward(src.inputs, Domain::Source)?;
        let ft = self.model.forward(tgt.inputs, Domain::Target)?;
        let terms = self.generator_terms(round, &fs, &ft, src, tgt)?;
        let total = total_loss(round, &terms, &cfg.weights)?;
        let mut breakdown = LossBreakdown::from_terms(round, &terms.values()?, &cfg.weights)?;
        if !breakdown.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}: {breakdown:?}", self.step)));
        }
        let grads = total.backward()?;
        self.opt_g.step(&grads)?;
        drop(grads);

        let aligned = self.model.aligned();
        if !aligned.is_empty() {
            let mut objective: Option<Tensor> = None;
            for m in aligned {
                let d_s = self.model.domain_scores(&fs, m, true)?;
                let d_t = self.model.domain_scores(&ft, m, true)?;
                let o = adversarial_objective(&d_s, &d_t, cfg.sfa.sum_reduction)?;
                objective = Some(match objective {
                    Some(acc) => (acc + o)?,
                    None => o,
                });
            }
            let objective = objective.expect("at least one aligned modality");
            let value = crate::tensor_ops::scalar(&objective)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite discriminator objective at step {}", self.step)));
            }
            breakdown.disc = Some(value);
            let grads = objective.neg()?.backward()?;
            self.opt_d.step(&grads)?;
        }
        Ok(breakdown)
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Output directory for checkpoints, pseudo labels and the metrics log;
    /// `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint of a finished round to continue from.
    pub resume: Option<PathBuf>,
}

pub struct RunSummary {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    /// Target-eval report after the last round, if that split was given.
    pub final_eval: Option<EvalReport>,
}

impl RunSummary {
    /// The metrics log as JSON lines.
    pub fn log_text(&self) -> String {
        self.records.iter().map(|r| r.to_line() + "\n").collect()
    }

    /// Target-eval F1 after `round`.
    pub fn eval_f1(&self, round: usize) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.round == round && r.split == "target-eval")
            .and_then(|r| r.f1)
    }
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const PSEUDO_DIR: &str = "pseudo";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn checkpoint_path(out_dir: &Path, round: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("round-{round}.safetensors"))
}

pub fn save_checkpoint(model: &Model, path: &Path, round: usize) -> Result<()> {
    let meta = HashMap::from([
        ("config".to_string(), model.config.to_json()),
        ("round".to_string(), round.to_string()),
    ]);
    model.store.save(path, &meta)
}

/// Rebuilds a model from a checkpoint. Returns it with the round it closed.
pub fn load_checkpoint(path: &Path, dtype: DType) -> Result<(Model, usize)> {
    let ck = Checkpoint::read(path)?;
    let cfg_text = ck
        .metadata
        .get("config")
        .ok_or_else(|| Error::format(path, "checkpoint lacks its config"))?;
    let round: usize = ck
        .metadata
        .get("round")
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| Error::format(path, "checkpoint lacks its round index"))?;
    let cfg = TrainConfig::from_json(cfg_text)?;
    let model = Model::new(&cfg, dtype)?;
    model.store.load_values(&ck)?;
    Ok((model, round))
}

fn feature_size(model: &Model, h: usize, w: usize) -> (usize, usize) {
    let n = if model.spec.multi_scale() { 1 } else { 4 };
    let s = model.spec.stage_stride(n);
    (h / s, w / s)
}

fn epoch_order(seed: u64, round: usize, epoch: usize, n_src: usize, n_tgt: usize) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng::stream(rng::derive_seed(seed, 0x7472_6169_6e00 + round as u64), epoch as u64);
    let mut src: Vec<usize> = (0..n_src).collect();
    src.shuffle(&mut r);
    let mut tgt = Vec::with_capacity(n_src);
    while tgt.len() < n_src {
        let mut p: Vec<usize> = (0..n_tgt).collect();
        p.shuffle(&mut r);
        tgt.extend(p);
    }
    tgt.truncate(n_src);
    (src, tgt)
}

struct LogSink {
    file: Option<std::fs::File>,
    records: Vec<MetricsRecord>,
}

impl LogSink {
    fn push(&mut self, r: MetricsRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", r.to_line()).map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        self.records.push(r);
        Ok(())
    }
}

/// Trains `cfg.rounds` rounds, producing pseudo labels between rounds,
/// evaluating on target-eval after each round and checkpointing each round.
pub fn run_rounds(cfg: &TrainConfig, data: &Datasets, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let dtype = data.source.rgb.dtype();
    let (mut model, start) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            let round: usize = ck
                .metadata
                .get("round")
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| Error::format(path, "checkpoint lacks its round index"))?;
            let model = Model::new(cfg, dtype)?;
            model.store.load_values(&ck)?;
            (model, round + 1)
        }
        None => (Model::new(cfg, dtype)?, 1),
    };
    if cfg.sn_enabled && (data.source.sn.is_none() || data.target_train.sn.is_none()) {
        return Err(Error::Input("surface normals were not loaded".into()));
    }
    let (h, w) = (data.source.height, data.source.width);
    if (data.target_train.height, data.target_train.width) != (h, w) {
        return Err(Error::Input("source and target images differ in size".into()));
    }
    model.check_input_size(h, w)?;
    let feat = feature_size(&model, h, w);

    let mut sink = LogSink {
        file: None,
        records: Vec::new(),
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(opts.resume.is_some())
            .write(true)
            .truncate(opts.resume.is_none())
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        sink.file = Some(file);
    }

    let source_sup = Supervision::new(
        data.source.labels.as_ref().ok_or_else(|| Error::Input("source split has no labels".into()))?,
        None,
        feat,
        dtype,
    )?;
    let mut pseudo: Option<Supervision> = None;
    if (2..=cfg.rounds).contains(&start) {
        let records = pseudo_label_split(&model, &data.target_train, cfg.alpha, start - 1)?;
        persist_pseudo(opts, start, &records)?;
        pseudo = Some(Supervision::from_records(&records, feat, dtype)?);
    }

    let mut final_eval = None;
    let b = cfg.batch_size;
    let steps_per_epoch = data.source.len().div_ceil(b);
    for round in start..=cfg.rounds {
        let mut trainer = Trainer::new(model, cfg.epochs * steps_per_epoch);
        for epoch in 1..=cfg.epochs {
            let (src_order, tgt_order) = epoch_order(cfg.seed, round, epoch, data.source.len(), data.target_train.len());
            let mut losses = Vec::with_capacity(steps_per_epoch);
            for (si, ti) in src_order.chunks(b).zip(tgt_order.chunks(b)) {
                let s_idx = TensorSet::index_tensor(si)?;
                let t_idx = TensorSet::index_tensor(ti)?;
                let s_in = data.source.inputs(si)?;
                let t_in = data.target_train.inputs(ti)?;
                let s_sup = source_sup.select(&s_idx)?;
                let t_sup = pseudo.as_ref().map(|p| p.select(&t_idx)).transpose()?;
                let l = trainer.alternate_step(
                    round,
                    &DomainBatch { inputs: &s_in, targets: Some(&s_sup) },
                    &DomainBatch { inputs: &t_in, targets: t_sup.as_ref() },
                )?;
                losses.push(l);
            }
            let mean = LossBreakdown::mean(&losses);
            log::info!("round {round} epoch {epoch}: total {:.4}", mean.total);
            sink.push(MetricsRecord::train(round, epoch, &mean))?;
        }
        model = trainer.into_model();
        if let Some(eval) = &data.target_eval {
            let (report, _) = evaluate(&model, eval)?;
            log::info!("round {round} target-eval F1 {:.4} IoU {:.4}", report.scores.f1, report.scores.iou);
            sink.push(MetricsRecord::eval(round, cfg.epochs, "target-eval", &report))?;
            final_eval = Some(report);
        }
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(&model, &checkpoint_path(dir, round), round)?;
        }
        if round < cfg.rounds {
            let records = pseudo_label_split(&model, &data.target_train, cfg.alpha, round)?;
            persist_pseudo(opts, round + 1, &records)?;
            pseudo = Some(Supervision::from_records(&records, feat, dtype)?);
        }
    }
    Ok(RunSummary {
        model,
        records: sink.records,
        final_eval,
    })
}

fn persist_pseudo(opts: &RunOptions, round: usize, records: &[PseudoLabelRecord]) -> Result<()> {
    if let Some(dir) = &opts.out_dir {
        save_pseudo_labels(&dir.join(PSEUDO_DIR), round, records)?;
    }
    Ok(())
}

/// Diagnostic maps for one batch: main-head foreground, the two
/// cross-guidance maps, and discriminator scores per aligned modality.
pub struct Diagnostics {
    pub foreground: Tensor,
    pub a_rgb: Option<Tensor>,
    pub a_sn: Option<Tensor>,
    pub domain_scores: Vec<(Modality, Tensor)>,
}

pub fn diagnostics(model: &Model, inputs: &Inputs, domain: Domain) -> Result<Diagnostics> {
    let fwd = model.forward(inputs, domain)?;
    let mut domain_scores = Vec::new();
    for m in model.aligned() {
        domain_scores.push((m, model.domain_scores(&fwd, m, true)?.detach()));
    }
    Ok(Diagnostics {
        foreground: fwd.foreground_full()?.detach(),
        a_rgb: fwd.a_rgb.map(|a| a.detach()),
        a_sn: fwd.a_sn.map(|a| a.detach()),
        domain_scores,
    })
}
