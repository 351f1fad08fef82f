//! Multitask training (focal + MSE), evaluation, and the ensemble-ratio sweep.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{select, DatasetSplit, FunctionRecord};
use crate::error::{Error, Result};
use crate::kv;
use crate::lexer::{build_vocab, Vocabulary};
use crate::model::{
    check_ensemble, denormalize_lines, prepare_samples, save_checkpoint, Baseline, FrozenModel, LabelMode, Model,
    ModelConfig, Sample,
};
use crate::objectives::{classification_metrics, focal_loss_node, iou_1d, mse_loss_node, FocalConfig, MetricsReport};
use crate::tensor::{init, Matrix, NodeId, ParamStore, Tape};

pub const SEED_ENV: &str = "VULNGRAPH_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Train from the seeded initialization once per ratio.
    Retrain,
    /// Train once at the configured ratio, then fine-tune a copy per ratio.
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub w_cls: f64,
    pub w_loc: f64,
    pub focal: FocalConfig,
    pub optimizer: OptimizerKind,
    pub checkpoint_dir: Option<PathBuf>,
    pub sweep_mode: SweepMode,
    pub finetune_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 6e-6,
            batch_size: 8,
            seed: 42,
            w_cls: 1.0,
            w_loc: 1.0,
            focal: FocalConfig::default(),
            optimizer: OptimizerKind::Adam,
            checkpoint_dir: None,
            sweep_mode: SweepMode::Retrain,
            finetune_epochs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.w_cls >= 0.0 && self.w_loc >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        self.focal.validate()
    }
}

/// Everything a run needs: model shape, training schedule, preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub min_count: usize,
    pub baseline: Baseline,
}

impl Default for Config {
    fn default() -> Self {
        Config::profile(Profile::Desk)
    }
}

impl Config {
    pub fn profile(p: Profile) -> Self {
        let mut cfg = Config {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            min_count: 1,
            baseline: Baseline::Pad,
        };
        if p == Profile::Desk {
            cfg.model.embed_dim = 64;
            cfg.model.gcn_dim = 48;
            cfg.train.learning_rate = 1e-3;
        }
        cfg
    }

    pub fn label_mode(&self) -> LabelMode {
        self.model.label_mode()
    }

    /// Parses flat `key=value` text. A `profile` key, wherever it appears,
    /// selects the defaults the other keys override.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = kv::parse(text)?;
        let profile = match pairs.iter().find(|(k, _)| k == "profile").map(|(_, v)| v.as_str()) {
            None | Some("desk") => Profile::Desk,
            Some("full") => Profile::Full,
            Some(other) => return Err(Error::Config(format!("profile must be desk or full, got `{other}`"))),
        };
        let mut cfg = Config::profile(profile);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "profile" => {}
            "epochs" => t.epochs = kv::value(key, raw)?,
            "learning_rate" => t.learning_rate = kv::value(key, raw)?,
            "batch_size" => t.batch_size = kv::value(key, raw)?,
            "seed" => t.seed = kv::value(key, raw)?,
            "w_cls" => t.w_cls = kv::value(key, raw)?,
            "w_loc" => t.w_loc = kv::value(key, raw)?,
            "focal_alpha" => t.focal.alpha = kv::value(key, raw)?,
            "focal_delta" => t.focal.delta = kv::value(key, raw)?,
            "finetune_epochs" => t.finetune_epochs = kv::value(key, raw)?,
            "checkpoint_dir" => t.checkpoint_dir = Some(PathBuf::from(raw)),
            "optimizer" => {
                t.optimizer = match raw {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::Config(format!("optimizer must be adam or sgd, got `{raw}`"))),
                }
            }
            "sweep_mode" => {
                t.sweep_mode = match raw {
                    "retrain" => SweepMode::Retrain,
                    "finetune" => SweepMode::FineTune,
                    _ => {
                        return Err(Error::Config(format!(
                            "sweep_mode must be retrain or finetune, got `{raw}`"
                        )))
                    }
                }
            }
            "min_count" => self.min_count = kv::value(key, raw)?,
            "baseline" => self.baseline = Baseline::parse(raw)?,
            "label_mode" => self.model.num_classes = LabelMode::parse(raw)?.num_classes(),
            _ => {
                if !self.model.set(key, raw)? {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(4);
        m.validate()
    }

    /// Applies a seed override such as the value of [`SEED_ENV`].
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        let v = std::env::var(SEED_ENV).ok();
        self.apply_seed_override(v.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_f1: Option<f64>,
    pub val_iou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Model,
    pub vocab: Vocabulary,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Records the per-sample objective `w_cls·focal + w_loc·mse`; the MSE term
/// only for vulnerable samples.
pub fn sample_loss(tape: &mut Tape<'_>, model: &Model, sample: &Sample, train: &TrainConfig) -> Result<NodeId> {
    let rows = sample.ids[..sample.content_len()].iter().map(|&id| Some(id)).collect();
    let nodes = model.record(tape, rows, &sample.adjacency)?;
    let focal = focal_loss_node(tape, nodes.logits, sample.class, &train.focal)?;
    let mut loss = tape.scale(focal, train.w_cls);
    if let Some(target) = sample.loc_target() {
        let mse = mse_loss_node(tape, nodes.loc, &target)?;
        let mse = tape.scale(mse, train.w_loc);
        loss = tape.add(loss, mse)?;
    }
    Ok(loss)
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            }
        }
    }
}

fn sgd_step(store: &mut ParamStore, lr: f64) {
    for p in store.iter_mut() {
        for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *w -= lr * g;
        }
    }
}

enum Optimizer {
    Adam(Adam),
    Sgd,
}

impl Optimizer {
    fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(store)),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    fn step(&mut self, store: &mut ParamStore, lr: f64) {
        match self {
            Optimizer::Adam(a) => a.step(store, lr),
            Optimizer::Sgd => sgd_step(store, lr),
        }
    }
}

/// One pass over `samples` in shuffled mini-batches. Returns the mean
/// per-sample loss seen during the pass.
fn run_epoch(
    model: &mut Model,
    samples: &[Sample],
    train: &TrainConfig,
    opt: &mut Optimizer,
    rng: &mut rand_chacha::ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for (batch_no, batch) in order.chunks(train.batch_size).enumerate() {
        model.store_mut().zero_grad();
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let grads = {
                let mut tape = Tape::new(model.store());
                let loss = sample_loss(&mut tape, model, &samples[i], train)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                        param_norms: model.store().norms(),
                    });
                }
                total += value;
                tape.backward(loss)?
            };
            model.store_mut().accumulate(&grads, scale);
        }
        opt.step(model.store_mut(), train.learning_rate);
        if model.store().iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_no,
                param_norms: model.store().norms(),
            });
        }
    }
    Ok(total / samples.len() as f64)
}

/// Mean objective over `samples` without updating anything.
pub fn mean_loss(model: &Model, samples: &[Sample], train: &TrainConfig) -> Result<f64> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new(model.store());
            let loss = sample_loss(&mut tape, model, s, train)?;
            Ok(tape.scalar(loss))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn train_samples(
    records: &[FunctionRecord],
    split: &DatasetSplit,
    cfg: &Config,
) -> Result<(Vocabulary, ModelConfig, Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    let train_recs = select(records, &split.train)?;
    if train_recs.is_empty() {
        return Err(Error::InvalidSplit("training split is empty".into()));
    }
    let val_recs = select(records, &split.val)?;
    let vocab = build_vocab(train_recs.iter().copied(), cfg.min_count)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    model_cfg.validate()?;
    let train = prepare_samples(&train_recs, &vocab, &model_cfg)?;
    let val = prepare_samples(&val_recs, &vocab, &model_cfg)?;
    Ok((vocab, model_cfg, train, val))
}

/// Trains on `split.train` (vocabulary from that split only), validates on
/// `split.val` after every epoch, and writes `epoch-N/`, `best/` and
/// `log.jsonl` under the checkpoint directory when one is configured.
pub fn train(records: &[FunctionRecord], split: &DatasetSplit, cfg: &Config) -> Result<TrainOutcome> {
    let (vocab, model_cfg, train_set, val_set) = train_samples(records, split, cfg)?;
    let model = Model::new(model_cfg, cfg.train.seed)?;
    fit(model, vocab, &train_set, &val_set, &cfg.train, cfg.train.epochs)
}

fn fit(
    mut model: Model,
    vocab: Vocabulary,
    train_set: &[Sample],
    val_set: &[Sample],
    train: &TrainConfig,
    epochs: usize,
) -> Result<TrainOutcome> {
    let mut opt = Optimizer::new(train.optimizer, model.store());
    let mut rng = init::rng(train.seed ^ 0x5eed_5eed);
    let dir = train.checkpoint_dir.clone();
    let mut log_file = match &dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("log.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let mut log = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize)> = None;
    for epoch in 1..=epochs {
        let train_loss = run_epoch(&mut model, train_set, train, &mut opt, &mut rng, epoch)?;
        let (val_loss, val_f1, val_iou) = if val_set.is_empty() {
            (None, None, None)
        } else {
            let frozen = model.clone().freeze();
            let report = evaluate_samples(&frozen, val_set)?;
            (
                Some(mean_loss(&model, val_set, train)?),
                Some(report.f1),
                report.mean_iou,
            )
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_f1,
            val_iou,
        };
        let score = val_loss.unwrap_or(train_loss);
        let improved = best.is_none_or(|(b, _)| score < b);
        if improved {
            best = Some((score, epoch));
        }
        if let Some(d) = &dir {
            save_checkpoint(d.join(format!("epoch-{epoch}")), &model, &vocab)?;
            if improved {
                save_checkpoint(d.join("best"), &model, &vocab)?;
            }
        }
        if let Some((f, p)) = &mut log_file {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&*p, e))?;
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        model,
        vocab,
        log,
        best_epoch: best.map_or(epochs, |(_, e)| e),
    })
}

/// Per-sample prediction used by evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub lines: (usize, usize),
}

pub fn predict(model: &FrozenModel, sample: &Sample) -> Result<Prediction> {
    let out = model.forward(sample)?;
    Ok(Prediction {
        class: out.predicted_class(),
        lines: denormalize_lines(out.loc_pred, sample.line_count),
    })
}

pub fn evaluate_samples(model: &FrozenModel, samples: &[Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Metrics("cannot evaluate an empty split".into()));
    }
    let preds: Vec<Prediction> = samples.par_iter().map(|s| predict(model, s)).collect::<Result<_>>()?;
    let truths: Vec<usize> = samples.iter().map(|s| s.class).collect();
    let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let mut tp_ious = Vec::new();
    let mut all_ious = Vec::new();
    for (s, p) in samples.iter().zip(&preds) {
        if let Some(truth) = s.vul_lines {
            let iou = iou_1d(p.lines, truth)?;
            all_ious.push(iou);
            if p.class != 0 {
                tp_ious.push(iou);
            }
        }
    }
    Ok(classification_metrics(&classes, &truths, model.config().num_classes)?.with_iou(&tp_ious, &all_ious))
}

pub fn evaluate(model: &FrozenModel, records: &[&FunctionRecord], vocab: &Vocabulary) -> Result<MetricsReport> {
    let samples = prepare_samples(records, vocab, model.config())?;
    evaluate_samples(model, &samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kappa: f64,
    pub lambda: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Which split the rows were scored on.
    pub evaluated_on: &'static str,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<11} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            "kappa/lam", "IoU", "Acc", "F1", "Pre", "Rec"
        );
        for r in &self.rows {
            let iou = r.report.mean_iou.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:<11} {:>6} {:>6.4} {:>6.4} {:>6.4} {:>6.4}",
                format!("{:.2}/{:.2}", r.kappa, r.lambda),
                iou,
                r.report.accuracy,
                r.report.f1,
                r.report.precision,
                r.report.recall
            );
        }
        out
    }
}

pub const DEFAULT_RATIOS: [f64; 5] = [0.2, 0.4, 0.5, 0.6, 0.8];

/// Turns κ values into `(κ, 1 − κ)` pairs.
pub fn ratios_from_kappas(kappas: &[f64]) -> Vec<(f64, f64)> {
    kappas.iter().map(|&k| (k, 1.0 - k)).collect()
}

/// Trains and scores one model per `(κ, λ)` pair from the same seeded
/// initialization. Rows are scored on the test split, or on the training
/// split when the test split is empty.
pub fn sweep_ensemble(
    records: &[FunctionRecord],
    split: &DatasetSplit,
    ratios: &[(f64, f64)],
    cfg: &Config,
) -> Result<SweepTable> {
    for &(k, l) in ratios {
        check_ensemble(k, l)?;
    }
    let (vocab, model_cfg, train_set, val_set) = train_samples(records, split, cfg)?;
    let (eval_ids, evaluated_on) = if split.test.is_empty() {
        (&split.train, "train")
    } else {
        (&split.test, "test")
    };
    let eval_set = prepare_samples(&select(records, eval_ids)?, &vocab, &model_cfg)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.checkpoint_dir = None;

    let base = match train_cfg.sweep_mode {
        SweepMode::Retrain => None,
        SweepMode::FineTune => {
            let m = Model::new(model_cfg.clone(), train_cfg.seed)?;
            Some(fit(m, vocab.clone(), &train_set, &val_set, &train_cfg, train_cfg.epochs)?.model)
        }
    };
    let mut rows = Vec::with_capacity(ratios.len());
    for &(kappa, lambda) in ratios {
        let (mut model, epochs) = match &base {
            None => (Model::new(model_cfg.clone(), train_cfg.seed)?, train_cfg.epochs),
            Some(b) => (b.clone(), train_cfg.finetune_epochs.max(1)),
        };
        model.set_ensemble(kappa, lambda)?;
        let outcome = fit(model, vocab.clone(), &train_set, &val_set, &train_cfg, epochs)?;
        let report = evaluate_samples(&outcome.model.freeze(), &eval_set)?;
        rows.push(SweepRow { kappa, lambda, report });
    }
    Ok(SweepTable { rows, evaluated_on })
}
