use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;

/// Predictions are clipped into `[ε, 1 − ε]` before taking logs.
pub const PREDICTION_CLIP: f64 = 1e-9;

fn cross_entropy(predictions: impl Iterator<Item = f64>, labels: &[bool]) -> f64 {
    let mut total = 0.0;
    for (p, &y) in predictions.zip(labels) {
        let p = p.clamp(PREDICTION_CLIP, 1.0 - PREDICTION_CLIP);
        total -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    total / labels.len() as f64
}

/// Cross-entropy of `predictions` over that of the constant base-rate
/// predictor; 1 is uninformative, lower is better.
pub fn normalized_entropy(predictions: &[f64], labels: &[bool]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("no examples".into()));
    }
    if let Some(p) = predictions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Invalid(format!("prediction {p} is not a probability")));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::DegenerateLabels);
    }
    let base = positives as f64 / labels.len() as f64;
    let ce = cross_entropy(predictions.iter().copied(), labels);
    let base_ce = cross_entropy(std::iter::repeat(base), labels);
    Ok(ce / base_ce)
}

/// `(test − control) / control × 100`.
pub fn relative_metric_change(test: f64, control: f64) -> Result<f64> {
    if control == 0.0 {
        return Err(Error::ZeroControl);
    }
    Ok((test - control) / control * 100.0)
}

/// Two-decimal percentage, e.g. `0.28%`.
pub fn format_percent(change: f64) -> String {
    let s = format!("{change:.2}");
    // Avoid printing "-0.00%".
    if s == "-0.00" {
        "0.00%".into()
    } else {
        format!("{s}%")
    }
}

/// Fraction of edges joining users with the same label. An edgeless graph
/// scores 0 (with a warning).
pub fn neighbor_purity(graph: &SimilarityGraph, labels: &BTreeMap<u64, usize>) -> Result<f64> {
    let label = |u: u64| labels.get(&u).copied().ok_or(Error::Unlabeled(u));
    let mut same = 0usize;
    let mut total = 0usize;
    for (&u, neighbors) in &graph.edges {
        let lu = label(u)?;
        for &(v, _) in neighbors {
            total += 1;
            if label(v)? == lu {
                same += 1;
            }
        }
    }
    if total == 0 {
        log::warn!("graph has no edges; purity defined as 0");
        return Ok(0.0);
    }
    Ok(same as f64 / total as f64)
}

/// `|retrieved ∩ heldout| / |heldout|`.
pub fn retrieval_recall(retrieved: &BTreeSet<u64>, heldout: &BTreeSet<u64>) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::EmptyHeldout);
    }
    Ok(retrieved.intersection(heldout).count() as f64 / heldout.len() as f64)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `p = σ(a·x + b)`, fit by Newton's method on log loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Platt {
    pub a: f64,
    pub b: f64,
}

impl Platt {
    pub fn fit(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let pos = labels.iter().filter(|&&y| y).count();
        if scores.len() != labels.len() || pos == 0 || pos == labels.len() {
            return Err(Error::DegenerateLabels);
        }
        let base = pos as f64 / labels.len() as f64;
        let (mut a, mut b) = (0.0, (base / (1.0 - base)).ln());
        // A tiny ridge keeps the Hessian invertible on separable data.
        let ridge = 1e-9;
        for _ in 0..100 {
            let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (ridge * a, 0.0, ridge, 0.0, ridge);
            for (&x, &y) in scores.iter().zip(labels) {
                let p = sigmoid(a * x + b);
                let r = p - if y { 1.0 } else { 0.0 };
                let w = p * (1.0 - p);
                ga += r * x;
                gb += r;
                haa += w * x * x;
                hab += w * x;
                hbb += w;
            }
            let det = haa * hbb - hab * hab;
            if !(det.abs() > 0.0) {
                break;
            }
            let da = (hbb * ga - hab * gb) / det;
            let db = (haa * gb - hab * ga) / det;
            a -= da;
            b -= db;
            if da.abs() < 1e-12 && db.abs() < 1e-12 {
                break;
            }
        }
        Ok(Platt { a, b })
    }

    pub fn predict(&self, x: f64) -> f64 {
        sigmoid(self.a * x + self.b)
    }
}
