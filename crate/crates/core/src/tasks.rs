//! Task losses and evaluation metrics.
//!
//! Attack-side losses are oriented so that larger always means more damage
//! to the model: cross entropy for classification and segmentation, RMSE
//! against a reference prediction for depth, negative cosine similarity of
//! embeddings for retrieval. Evaluation metrics are the usual accuracy,
//! mean IoU, depth RMSE, retrieval mAP, embedding cosine similarity, and
//! PSNR of the perturbation.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayD};
use serde::{Deserialize, Serialize};

/// Tasks the toy stack serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
    Depth,
    Retrieval,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Segmentation => "segmentation",
            TaskKind::Depth => "depth",
            TaskKind::Retrieval => "retrieval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "segmentation" => Ok(TaskKind::Segmentation),
            "depth" => Ok(TaskKind::Depth),
            "retrieval" => Ok(TaskKind::Retrieval),
            other => Err(Error::Config(format!(
                "unknown task '{other}' (expected classification|segmentation|depth|retrieval)"
            ))),
        }
    }

    pub const ALL: [TaskKind; 4] = [
        TaskKind::Classification,
        TaskKind::Segmentation,
        TaskKind::Depth,
        TaskKind::Retrieval,
    ];
}

/// Divisor floor used when differentiating [`rmse_loss`], so the gradient
/// stays finite at zero residual while the loss itself stays exact.
pub const RMSE_LOSS_EPS: f64 = 1e-12;

/// Confidence margin of the true class: `p[label] - max p[other]`.
/// Positive means a correct, confident prediction; range is `[-1, 1]`.
pub fn margin_loss(probs: &Array1<f64>, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range 0..{}",
            probs.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::EmptyInput(
            "margin_loss needs a nonempty probability vector",
        ));
    }
    let mut best_other = f64::NEG_INFINITY;
    for (i, &p) in probs.iter().enumerate() {
        if i != label && p > best_other {
            best_other = p;
        }
    }
    if !best_other.is_finite() {
        return Err(Error::Domain(
            "margin_loss needs at least two classes".into(),
        ));
    }
    Ok(probs[label] - best_other)
}

/// RMSE between a prediction and a reference; exactly zero when they are
/// identical. Callers differentiating through it divide by
/// `max(rmse, RMSE_LOSS_EPS)` to keep the gradient finite at zero residual.
pub fn rmse_loss(pred: &ArrayD<f64>, reference: &ArrayD<f64>) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", reference.shape()),
            actual: format!("{:?}", pred.shape()),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("rmse_loss needs at least one element"));
    }
    let n = pred.len() as f64;
    let mse = pred
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(mse.sqrt())
}

/// Cosine similarity of two embeddings.
pub fn cosine_similarity(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}", a.len()),
            actual: format!("{}", b.len()),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput(
            "cosine_similarity needs nonempty vectors",
        ));
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na < 1e-300 || nb < 1e-300 {
        return Err(Error::Domain("cosine_similarity of a zero vector".into()));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Fraction of predictions equal to their labels.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("accuracy needs at least one prediction"));
    }
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", preds.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean intersection-over-union across classes, accumulated over the whole
/// batch. Classes absent from both predictions and ground truth are left
/// out of the mean; `include_background` controls whether class 0 counts.
pub fn miou(
    preds: &[Array2<u8>],
    truths: &[Array2<u8>],
    num_classes: usize,
    include_background: bool,
) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("miou needs at least one mask"));
    }
    if preds.len() != truths.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} truth masks", preds.len()),
            actual: format!("{}", truths.len()),
        });
    }
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (p, t) in preds.iter().zip(truths) {
        if p.dim() != t.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", t.dim()),
                actual: format!("{:?}", p.dim()),
            });
        }
        for (&pv, &tv) in p.iter().zip(t.iter()) {
            let (pv, tv) = (pv as usize, tv as usize);
            if pv >= num_classes || tv >= num_classes {
                return Err(Error::Domain(format!(
                    "mask value {} out of range 0..{num_classes}",
                    pv.max(tv)
                )));
            }
            if pv == tv {
                inter[pv] += 1;
                union[pv] += 1;
            } else {
                union[pv] += 1;
                union[tv] += 1;
            }
        }
    }
    let start = if include_background { 0 } else { 1 };
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in start..num_classes {
        if union[c] > 0 {
            total += inter[c] as f64 / union[c] as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::EmptyInput(
            "miou: every class was absent from both inputs",
        ));
    }
    Ok(total / counted as f64)
}

/// Plain RMSE between predicted and true depth maps over the whole batch.
pub fn rmse_depth(preds: &[Array2<f64>], truths: &[Array2<f64>]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("rmse_depth needs at least one map"));
    }
    if preds.len() != truths.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} truth maps", preds.len()),
            actual: format!("{}", truths.len()),
        });
    }
    let mut se = 0.0;
    let mut n = 0usize;
    for (p, t) in preds.iter().zip(truths) {
        if p.dim() != t.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", t.dim()),
                actual: format!("{:?}", p.dim()),
            });
        }
        for (&a, &b) in p.iter().zip(t.iter()) {
            se += (a - b) * (a - b);
            n += 1;
        }
    }
    Ok((se / n as f64).sqrt())
}

/// Outcome of a retrieval evaluation: the mAP over scored queries and how
/// many queries were skipped for lack of any positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalScore {
    pub map: f64,
    pub skipped_queries: usize,
}

/// Leave-one-out mean average precision. Each embedding queries all others;
/// gallery items sharing the query's group are positives. Ranking is by
/// cosine similarity, descending, with ties broken by the smaller gallery
/// index. Queries whose group has no other member are skipped and counted.
pub fn map_retrieval(embeddings: &[Array1<f64>], groups: &[u32]) -> Result<RetrievalScore> {
    if embeddings.len() < 2 {
        return Err(Error::EmptyInput(
            "map_retrieval needs at least two embeddings",
        ));
    }
    if embeddings.len() != groups.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} group ids", embeddings.len()),
            actual: format!("{}", groups.len()),
        });
    }
    let n = embeddings.len();
    let mut ap_sum = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for q in 0..n {
        let positives = (0..n).filter(|&i| i != q && groups[i] == groups[q]).count();
        if positives == 0 {
            skipped += 1;
            continue;
        }
        let mut ranked: Vec<(usize, f64)> = (0..n)
            .filter(|&i| i != q)
            .map(|i| Ok((i, cosine_similarity(&embeddings[q], &embeddings[i])?)))
            .collect::<Result<_>>()?;
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, (idx, _)) in ranked.iter().enumerate() {
            if groups[*idx] == groups[q] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += ap / positives as f64;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::EmptyInput(
            "map_retrieval: every query lacked positives",
        ));
    }
    Ok(RetrievalScore {
        map: ap_sum / scored as f64,
        skipped_queries: skipped,
    })
}

/// Mean cosine similarity over paired embedding lists.
pub fn mean_cosine_similarity(a: &[Array1<f64>], b: &[Array1<f64>]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyInput(
            "mean_cosine_similarity needs at least one pair",
        ));
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} paired embeddings", a.len()),
            actual: format!("{}", b.len()),
        });
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += cosine_similarity(x, y)?;
    }
    Ok(total / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`:
/// `10 * log10(1 / MSE)`. Identical inputs give positive infinity.
pub fn psnr(x: &ArrayD<f64>, y: &ArrayD<f64>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.shape()),
            actual: format!("{:?}", y.shape()),
        });
    }
    if x.is_empty() {
        return Err(Error::EmptyInput("psnr needs at least one element"));
    }
    let n = x.len() as f64;
    let mse = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
