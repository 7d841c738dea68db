//! Pixel-level confusion counts, threshold metrics and a streaming
//! precision/recall curve.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autograd::Graph;
use crate::data::{self, SampleSource};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::UCloudNet;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// The curve is sampled at thresholds `i / CURVE_STEPS` for `i` in `0..=CURVE_STEPS`.
pub const CURVE_STEPS: usize = 255;

/// Pixel counts, with a prediction of `p >= threshold` counted as cloud.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn from_slices<T: Element>(pred: &[T], target: &[T], threshold: f64) -> Result<Self> {
        let mut c = Confusion::default();
        c.accumulate(pred, target, threshold)?;
        Ok(c)
    }

    pub fn accumulate<T: Element>(&mut self, pred: &[T], target: &[T], threshold: f64) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} predictions against {} targets", pred.len(), target.len()),
            ));
        }
        for (&p, &y) in pred.iter().zip(target) {
            let positive = p.as_f64() >= threshold;
            let cloud = y.as_f64() >= 0.5;
            match (positive, cloud) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Precision, recall and F-score take 0 when their denominator is 0.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f_score(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn error_rate(&self) -> f64 {
        ratio(self.fp + self.fn_, self.total())
    }
}

/// One point of the precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Histograms of predicted probabilities per class, enough to recover the
/// confusion counts at every curve threshold in one pass over the data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrAccumulator {
    positives: Vec<u64>,
    negatives: Vec<u64>,
    positives_below: u64,
    negatives_below: u64,
}

impl Default for PrAccumulator {
    fn default() -> Self {
        PrAccumulator {
            positives: alloc::vec![0; CURVE_STEPS + 1],
            negatives: alloc::vec![0; CURVE_STEPS + 1],
            positives_below: 0,
            negatives_below: 0,
        }
    }
}

fn threshold(i: usize) -> f64 {
    i as f64 / CURVE_STEPS as f64
}

/// Largest `i` with `p >= i / 255`, or `None` if `p` is below every threshold.
fn bin(p: f64) -> Option<usize> {
    if p.is_nan() || p < 0.0 {
        return None;
    }
    let mut i = (Float::floor(p * CURVE_STEPS as f64) as usize).min(CURVE_STEPS);
    // guard against rounding on either side of a threshold
    while i > 0 && p < threshold(i) {
        i -= 1;
    }
    while i < CURVE_STEPS && p >= threshold(i + 1) {
        i += 1;
    }
    Some(i)
}

impl PrAccumulator {
    pub fn accumulate<T: Element>(&mut self, pred: &[T], target: &[T]) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::shape(
                "pr curve",
                format!("{} predictions against {} targets", pred.len(), target.len()),
            ));
        }
        for (&p, &y) in pred.iter().zip(target) {
            if let Some(i) = bin(p.as_f64()) {
                if y.as_f64() >= 0.5 {
                    self.positives[i] += 1;
                } else {
                    self.negatives[i] += 1;
                }
            } else if y.as_f64() >= 0.5 {
                self.positives_below += 1;
            } else {
                self.negatives_below += 1;
            }
        }
        Ok(())
    }

    /// Confusion counts at threshold `i / 255`.
    pub fn confusion_at(&self, i: usize) -> Confusion {
        let tp: u64 = self.positives[i..].iter().sum();
        let fp: u64 = self.negatives[i..].iter().sum();
        let pos: u64 = self.positives.iter().sum::<u64>() + self.positives_below;
        let neg: u64 = self.negatives.iter().sum::<u64>() + self.negatives_below;
        Confusion { tp, fp, fn_: pos - tp, tn: neg - fp }
    }

    /// Points at thresholds `0, 1/255, ..., 1`. Fails unless both classes
    /// have been seen.
    pub fn curve(&self) -> Result<Vec<PrPoint>> {
        let all = self.confusion_at(0);
        if all.tp + all.fn_ == 0 || all.fp + all.tn == 0 {
            return Err(Error::invalid("precision/recall curve needs both cloud and sky pixels"));
        }
        Ok((0..=CURVE_STEPS)
            .map(|i| {
                let c = self.confusion_at(i);
                PrPoint { threshold: threshold(i), precision: c.precision(), recall: c.recall() }
            })
            .collect())
    }
}

/// Area under the precision/recall curve by the trapezoid rule over points
/// sorted by recall, anchored at `(recall 0, precision 1)`.
pub fn auc_pr(points: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    pts.push((0.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Threshold metrics plus the curve over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub error_rate: f64,
    pub curve: Vec<PrPoint>,
    pub auc_pr: f64,
    pub samples: usize,
}

impl EvalReport {
    pub fn new(confusion: Confusion, threshold: f64, pr: &PrAccumulator, samples: usize) -> Result<Self> {
        let curve = pr.curve()?;
        Ok(EvalReport {
            threshold,
            confusion,
            precision: confusion.precision(),
            recall: confusion.recall(),
            f_score: confusion.f_score(),
            error_rate: confusion.error_rate(),
            auc_pr: auc_pr(&curve),
            curve,
            samples,
        })
    }
}

/// Main-head probabilities for a batch, in eval mode.
pub fn predict<T: Element>(model: &mut UCloudNet<T>, x: Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x);
    let out = model.forward(&mut g, xv, false, false)?;
    Ok(g.value(out.main).clone())
}

/// Evaluates the main head over `ids` in batches of `batch_size`.
pub fn evaluate<T: Element, S: SampleSource<T> + ?Sized>(
    model: &mut UCloudNet<T>,
    samples: &S,
    ids: &[usize],
    batch_size: usize,
    threshold: f64,
) -> Result<EvalReport> {
    if ids.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let mut confusion = Confusion::default();
    let mut pr = PrAccumulator::default();
    for chunk in ids.chunks(batch_size.max(1)) {
        let (x, y) = data::collate(samples, chunk)?;
        let p = predict(model, x)?;
        confusion.accumulate(p.data(), y.data(), threshold)?;
        pr.accumulate(p.data(), y.data())?;
    }
    EvalReport::new(confusion, threshold, &pr, ids.len())
}
