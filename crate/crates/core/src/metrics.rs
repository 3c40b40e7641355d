//! Dice loss and segmentation evaluation metrics.
//!
//! Overlap scores (dice, IoU) carry a `+1` smoothing term in numerator and
//! denominator so empty masks score 1. Masks are `&[bool]` in any fixed
//! pixel order; scores are probabilities in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Operation, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Column names of a metrics row, in report order.
pub const METRIC_COLUMNS: [&str; 7] = ["dice", "ac", "iou", "precision", "recall", "f1", "auc"];

fn dice_terms<E: Element>(target: &[E], pred: &[E]) -> (E, E) {
    let mut gp = E::zero();
    let mut gg = E::zero();
    let mut pp = E::zero();
    for (&g, &p) in target.iter().zip(pred) {
        gp = gp + g * p;
        gg = gg + g * g;
        pp = pp + p * p;
    }
    let two = E::one() + E::one();
    (two * gp + E::one(), gg + pp + E::one())
}

/// `-(2 Σ g p + 1) / (Σ g² + Σ p² + 1)`.
pub fn dice_loss<E: Element>(target: &Tensor<E>, pred: &Tensor<E>) -> Result<E> {
    if target.shape() != pred.shape() {
        return Err(Error::shape(
            "dice_loss",
            format!("target {} vs prediction {}", target.shape(), pred.shape()),
        ));
    }
    let (num, den) = dice_terms(target.data(), pred.data());
    Ok(-num / den)
}

/// Differentiable dice loss against a fixed target.
pub struct DiceLossOp<E> {
    target: Tensor<E>,
}

impl<E: Element> DiceLossOp<E> {
    pub fn new(target: Tensor<E>) -> Self {
        DiceLossOp { target }
    }
}

impl<E: Element> Operation<E> for DiceLossOp<E> {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn forward(&mut self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
        Ok(Tensor::scalar(dice_loss(&self.target, inputs[0])?))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        _: &Tensor<E>,
        grad: &Tensor<E>,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let (num, den) = dice_terms(self.target.data(), inputs[0].data());
        let two = E::one() + E::one();
        let scale = grad.item() / (den * den);
        let d = self
            .target
            .zip_map(inputs[0], |g, p| -(two * g * den - num * two * p) * scale)?;
        Ok(vec![Some(d)])
    }
}

/// Records the dice loss of `pred` against `target` on `tape`.
pub fn dice_loss_var<E: Element>(tape: &Tape<E>, pred: &Var<E>, target: &Tensor<E>) -> Result<Var<E>> {
    tape.record(DiceLossOp::new(target.clone()), &[pred])
}

pub fn binarize<E: Element>(t: &Tensor<E>, threshold: f64) -> Vec<bool> {
    t.data().iter().map(|v| v.as_f64() >= threshold).collect()
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} ground-truth pixels vs {b} predicted")));
    }
    Ok(())
}

fn overlap(gt: &[bool], pr: &[bool]) -> (usize, usize, usize) {
    let inter = gt.iter().zip(pr).filter(|(g, p)| **g && **p).count();
    let g = gt.iter().filter(|v| **v).count();
    let p = pr.iter().filter(|v| **v).count();
    (inter, g, p)
}

/// Smoothed dice coefficient `(2|GT ∩ PR| + 1) / (|GT| + |PR| + 1)`.
pub fn dice_coef(gt: &[bool], pr: &[bool]) -> Result<f64> {
    check_len("dice_coef", gt.len(), pr.len())?;
    let (i, g, p) = overlap(gt, pr);
    Ok((2 * i + 1) as f64 / (g + p + 1) as f64)
}

/// Unsmoothed dice `2|GT ∩ PR| / (|GT| + |PR|)`, 1 when both are empty.
pub fn dice_coef_raw(gt: &[bool], pr: &[bool]) -> Result<f64> {
    check_len("dice_coef_raw", gt.len(), pr.len())?;
    let (i, g, p) = overlap(gt, pr);
    if g + p == 0 {
        return Ok(1.0);
    }
    Ok((2 * i) as f64 / (g + p) as f64)
}

/// Smoothed Jaccard index `(|GT ∩ PR| + 1) / (|GT ∪ PR| + 1)`.
pub fn iou(gt: &[bool], pr: &[bool]) -> Result<f64> {
    check_len("iou", gt.len(), pr.len())?;
    let (i, g, p) = overlap(gt, pr);
    Ok((i + 1) as f64 / (g + p - i + 1) as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_masks(gt: &[bool], pr: &[bool]) -> Result<Self> {
        check_len("confusion", gt.len(), pr.len())?;
        let mut c = ConfusionCounts::default();
        for (&g, &p) in gt.iter().zip(pr) {
            match (g, p) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 1.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// `TP / (TP + FP)`; with no predicted positives, 1 if nothing was
    /// missed (`FN == 0`) and 0 otherwise.
    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 if self.fn_ == 0 => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }

    /// `TP / (TP + FN)`; with no actual positives, 1 if nothing was
    /// falsely flagged (`FP == 0`) and 0 otherwise.
    pub fn recall(&self) -> f64 {
        match self.tp + self.fn_ {
            0 if self.fp == 0 => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Thresholded confusion counts with the derived rate metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionSummary {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn confusion_metrics(gt: &[bool], probs: &[f64], threshold: f64) -> Result<ConfusionSummary> {
    check_len("confusion_metrics", gt.len(), probs.len())?;
    let pr: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    let counts = ConfusionCounts::from_masks(gt, &pr)?;
    Ok(ConfusionSummary {
        counts,
        accuracy: counts.accuracy(),
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
    })
}

/// Area under the ROC curve via the rank-sum statistic. Tied scores get
/// their mean rank, which equals trapezoidal integration over all distinct
/// thresholds (ties earn half credit).
pub fn auc_roc(gt: &[bool], scores: &[f64]) -> Result<f64> {
    check_len("auc_roc", gt.len(), scores.len())?;
    let positives = gt.iter().filter(|v| **v).count();
    let negatives = gt.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Degenerate(
            "ROC AUC needs both positive and negative ground-truth pixels".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Degenerate("ROC AUC scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| gt[k]).count();
        positive_rank_sum += mean_rank * tied_pos as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// All evaluation metrics for one image (or a mean over several).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Smoothed dice coefficient of the thresholded prediction.
    pub dice: f64,
    pub dice_raw: f64,
    pub accuracy: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the ground truth holds a single class.
    pub auc: Option<f64>,
    /// Soft dice loss of the raw probabilities.
    pub dice_loss: f64,
    pub counts: ConfusionCounts,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn evaluate<E: Element>(gt: &Tensor<E>, probs: &Tensor<E>, threshold: f64) -> Result<Self> {
        if gt.shape() != probs.shape() {
            return Err(Error::shape(
                "evaluate",
                format!("ground truth {} vs prediction {}", gt.shape(), probs.shape()),
            ));
        }
        let g = binarize(gt, 0.5);
        let scores: Vec<f64> = probs.data().iter().map(|v| v.as_f64()).collect();
        let pr: Vec<bool> = scores.iter().map(|&p| p >= threshold).collect();
        let conf = confusion_metrics(&g, &scores, threshold)?;
        let auc = match auc_roc(&g, &scores) {
            Ok(a) => Some(a),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            dice: dice_coef(&g, &pr)?,
            dice_raw: dice_coef_raw(&g, &pr)?,
            accuracy: conf.accuracy,
            iou: iou(&g, &pr)?,
            precision: conf.precision,
            recall: conf.recall,
            f1: conf.f1,
            auc,
            dice_loss: dice_loss(gt, probs)?.as_f64(),
            counts: conf.counts,
            threshold,
        })
    }

    /// Per-image mean. AUC averages over the images where it is defined;
    /// counts are summed.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let aucs: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
        let mut counts = ConfusionCounts::default();
        for r in reports {
            counts.tp += r.counts.tp;
            counts.tn += r.counts.tn;
            counts.fp += r.counts.fp;
            counts.fn_ += r.counts.fn_;
        }
        Some(MetricsReport {
            dice: avg(|r| r.dice),
            dice_raw: avg(|r| r.dice_raw),
            accuracy: avg(|r| r.accuracy),
            iou: avg(|r| r.iou),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            f1: avg(|r| r.f1),
            auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
            dice_loss: avg(|r| r.dice_loss),
            counts,
            threshold: first.threshold,
        })
    }

    /// Pooled-pixel evaluation: all images are treated as one.
    pub fn pooled<E: Element>(pairs: &[(&Tensor<E>, &Tensor<E>)], threshold: f64) -> Result<MetricsReport> {
        let mut gt = Vec::new();
        let mut pr = Vec::new();
        for (g, p) in pairs {
            if g.shape() != p.shape() {
                return Err(Error::shape("pooled", "ground truth and prediction differ in shape"));
            }
            gt.extend_from_slice(g.data());
            pr.extend_from_slice(p.data());
        }
        let n = gt.len();
        let gt = Tensor::from_vec([1, 1, 1, n], gt)?;
        let pr = Tensor::from_vec([1, 1, 1, n], pr)?;
        MetricsReport::evaluate(&gt, &pr, threshold)
    }

    /// The seven table metrics in [`METRIC_COLUMNS`] order.
    pub fn table_row(&self) -> [Option<f64>; 7] {
        [
            Some(self.dice),
            Some(self.accuracy),
            Some(self.iou),
            Some(self.precision),
            Some(self.recall),
            Some(self.f1),
            self.auc,
        ]
    }
}
