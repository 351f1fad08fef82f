//! Losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax, Matrix, NodeId, Tape};

/// Focal loss parameters: `alpha` in (0, 1], `delta` ≥ 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub alpha: f64,
    pub delta: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig { alpha: 1.0, delta: 2.0 }
    }
}

impl FocalConfig {
    pub fn new(alpha: f64, delta: f64) -> Result<Self> {
        let cfg = FocalConfig { alpha, delta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "focal alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("focal delta must be >= 0, got {}", self.delta)));
        }
        Ok(())
    }
}

fn check_class(logits: &[f64], class: usize) -> Result<()> {
    if class >= logits.len() {
        return Err(Error::Shape {
            op: "focal_loss (class index)",
            left: (1, logits.len()),
            right: (class, 1),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

/// Loss value and gradient with respect to the logits.
///
/// With `p = softmax(z)[t]` and `L = −α(1−p)^δ ln p`, the gradient is
/// `k·(1[j=t] − s_j)` where `k = α(δ(1−p)^(δ−1)·p·ln p − (1−p)^δ)`.
fn focal_parts(logits: &[f64], class: usize, cfg: &FocalConfig) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let lp = logp[class];
    let p = lp.exp();
    let one_minus = -lp.exp_m1();
    let weight = one_minus.powf(cfg.delta);
    let loss = -cfg.alpha * weight * lp;

    let focus = if cfg.delta == 0.0 || one_minus == 0.0 {
        0.0
    } else {
        cfg.delta * one_minus.powf(cfg.delta - 1.0) * p * lp
    };
    let k = cfg.alpha * (focus - weight);
    let grad = logp
        .iter()
        .enumerate()
        .map(|(j, &l)| k * (f64::from(u8::from(j == class)) - l.exp()))
        .collect();
    (loss, grad)
}

pub fn focal_loss(logits: &[f64], true_class: usize, cfg: &FocalConfig) -> Result<f64> {
    check_class(logits, true_class)?;
    Ok(focal_parts(logits, true_class, cfg).0)
}

pub fn cross_entropy(logits: &[f64], true_class: usize) -> Result<f64> {
    check_class(logits, true_class)?;
    Ok(-log_softmax(logits)[true_class])
}

/// Records focal loss of a `1 × C` logits node.
pub fn focal_loss_node(tape: &mut Tape<'_>, logits: NodeId, true_class: usize, cfg: &FocalConfig) -> Result<NodeId> {
    let z = tape.value(logits);
    if z.rows() != 1 {
        return Err(Error::Shape {
            op: "focal_loss (logits must be a row)",
            left: z.shape(),
            right: (1, z.cols()),
        });
    }
    check_class(z.row(0), true_class)?;
    let (loss, grad) = focal_parts(z.row(0), true_class, cfg);
    tape.scalar_fn(logits, loss, Matrix::row_vector(grad))
}

/// Mean of squared componentwise differences.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "mse_loss",
            left: (1, pred.len()),
            right: (1, target.len()),
        });
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn mse_loss_node(tape: &mut Tape<'_>, pred: NodeId, target: &[f64]) -> Result<NodeId> {
    let p = tape.value(pred);
    if p.rows() != 1 {
        return Err(Error::Shape {
            op: "mse_loss (prediction must be a row)",
            left: p.shape(),
            right: (1, target.len()),
        });
    }
    let loss = mse_loss(p.row(0), target)?;
    let n = target.len() as f64;
    let grad = p.row(0).iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect();
    tape.scalar_fn(pred, loss, Matrix::row_vector(grad))
}

/// Intersection over union of two inclusive 1-based line ranges.
pub fn iou_1d(pred: (usize, usize), truth: (usize, usize)) -> Result<f64> {
    for &(s, e) in &[pred, truth] {
        if s == 0 || s > e {
            return Err(Error::InvalidRange { start: s, end: e });
        }
    }
    let lo = pred.0.max(truth.0);
    let hi = pred.1.min(truth.1);
    let inter = if lo <= hi { hi - lo + 1 } else { 0 };
    let union = (pred.1 - pred.0 + 1) + (truth.1 - truth.0 + 1) - inter;
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    pub predicted: Vec<usize>,
}

/// Classification and localization metrics.
///
/// `precision`/`recall`/`f1` are the headline figures: binary-positive when
/// there are two classes, macro-averaged over classes present in the truths
/// otherwise. Micro and binary (benign vs. any vulnerable class) figures are
/// always reported too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub binary_precision: f64,
    pub binary_recall: f64,
    pub binary_f1: f64,
    /// Mean IoU over records that are vulnerable and predicted vulnerable.
    pub mean_iou: Option<f64>,
    pub iou_samples: usize,
    /// Mean IoU over every truly vulnerable record.
    pub iou_all_vulnerable: Option<f64>,
    pub per_class: ClassStats,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Counts-based metrics. Class 0 is benign; IoU fields are left empty and
/// filled in by [`with_iou`](MetricsReport::with_iou).
pub fn classification_metrics(preds: &[usize], truths: &[usize], num_classes: usize) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Metrics("no predictions to score".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::Metrics(format!(
            "{} predictions vs {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::Metrics(format!("need at least 2 classes, got {num_classes}")));
    }
    if let Some(&bad) = preds.iter().chain(truths).find(|&&c| c >= num_classes) {
        return Err(Error::Metrics(format!(
            "class {bad} out of range for {num_classes} classes"
        )));
    }

    let mut tp = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    let (mut btp, mut bfp, mut bfn) = (0usize, 0usize, 0usize);
    for (&p, &t) in preds.iter().zip(truths) {
        predicted[p] += 1;
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        }
        match (p != 0, t != 0) {
            (true, true) => btp += 1,
            (true, false) => bfp += 1,
            (false, true) => bfn += 1,
            (false, false) => {}
        }
    }
    let correct: usize = tp.iter().sum();
    let n = preds.len();

    let precision: Vec<f64> = (0..num_classes).map(|c| ratio(tp[c], predicted[c])).collect();
    let recall: Vec<f64> = (0..num_classes).map(|c| ratio(tp[c], support[c])).collect();
    let f1: Vec<f64> = precision.iter().zip(&recall).map(|(&p, &r)| harmonic(p, r)).collect();

    let present: Vec<usize> = (0..num_classes).filter(|&c| support[c] > 0).collect();
    let mean_over = |v: &[f64]| present.iter().map(|&c| v[c]).sum::<f64>() / present.len() as f64;
    let (macro_precision, macro_recall, macro_f1) = (mean_over(&precision), mean_over(&recall), mean_over(&f1));

    // Single-label: every wrong prediction is one FP and one FN.
    let micro = ratio(correct, n);
    let binary_precision = ratio(btp, btp + bfp);
    let binary_recall = ratio(btp, btp + bfn);
    let binary_f1 = harmonic(binary_precision, binary_recall);

    let (hp, hr, hf) = if num_classes == 2 {
        (binary_precision, binary_recall, binary_f1)
    } else {
        (macro_precision, macro_recall, macro_f1)
    };

    Ok(MetricsReport {
        samples: n,
        accuracy: micro,
        precision: hp,
        recall: hr,
        f1: hf,
        macro_precision,
        macro_recall,
        macro_f1,
        micro_precision: micro,
        micro_recall: micro,
        micro_f1: micro,
        binary_precision,
        binary_recall,
        binary_f1,
        mean_iou: None,
        iou_samples: 0,
        iou_all_vulnerable: None,
        per_class: ClassStats {
            precision,
            recall,
            f1,
            support,
            predicted,
        },
    })
}

impl MetricsReport {
    /// Attaches the two IoU averages; `None` when the population is empty.
    pub fn with_iou(mut self, true_positive_ious: &[f64], all_vulnerable_ious: &[f64]) -> Self {
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        self.mean_iou = mean(true_positive_ious);
        self.iou_samples = true_positive_ious.len();
        self.iou_all_vulnerable = mean(all_vulnerable_ious);
        self
    }
}
