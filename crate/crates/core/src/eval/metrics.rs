use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VsimError};

pub const DEFAULT_KL_FLOOR: f64 = 1e-10;

/// Item order used by ranking metrics: score descending, index ascending.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Mean of precision@k over the ranks `k` of relevant items.
pub fn average_precision(scores: &[f64], relevance: &[bool]) -> Result<f64> {
    if scores.len() != relevance.len() {
        return Err(VsimError::LengthMismatch {
            left: scores.len(),
            right: relevance.len(),
        });
    }
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(VsimError::NoRelevantItems);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in rank_order(scores).iter().enumerate() {
        if relevance[i] {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall of `score >= threshold` retrieval for each
/// threshold. Thresholds that retrieve nothing produce no point.
pub fn pr_curve(scores: &[f64], relevance: &[bool], thresholds: &[f64]) -> Result<Vec<PrPoint>> {
    if scores.len() != relevance.len() {
        return Err(VsimError::LengthMismatch {
            left: scores.len(),
            right: relevance.len(),
        });
    }
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(VsimError::NoRelevantItems);
    }
    let mut points = Vec::new();
    for &threshold in thresholds {
        let (mut retrieved, mut hits) = (0usize, 0usize);
        for (s, &r) in scores.iter().zip(relevance) {
            if *s >= threshold {
                retrieved += 1;
                hits += r as usize;
            }
        }
        if retrieved > 0 {
            points.push(PrPoint {
                threshold,
                precision: hits as f64 / retrieved as f64,
                recall: hits as f64 / total as f64,
            });
        }
    }
    Ok(points)
}

fn floored(p: &[f64], floor: f64) -> Vec<f64> {
    let mut out: Vec<f64> = p.iter().map(|&x| x.max(floor)).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

/// `KL(p‖q) + KL(q‖p)` in nats after flooring both inputs and
/// renormalizing.
pub fn symmetric_kl(p: &[f64], q: &[f64], floor: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(VsimError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    if !(floor > 0.0) {
        return Err(VsimError::InvalidParameter(format!("KL floor must be positive, got {floor}")));
    }
    let (p, q) = (floored(p, floor), floored(q, floor));
    // (p - q)(ln p - ln q) summed is the symmetric divergence and is
    // exactly symmetric in floating point
    Ok(p.iter().zip(&q).map(|(a, b)| (a - b) * (a.ln() - b.ln())).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNAccuracy {
    pub n: usize,
    /// Mean of `|top-n ∩ gt| / min(n, |gt|)`.
    pub normalized: f64,
    /// Mean of `|top-n ∩ gt|`.
    pub mean_hits: f64,
    pub evaluated: usize,
    /// Images skipped for having an empty ground-truth set.
    pub skipped: Vec<usize>,
}

/// Top-n accuracy of ranked predictions (most confident first, duplicates
/// ignored) against ground-truth label sets.
pub fn top_n_accuracy(ranked: &[Vec<usize>], gt: &[BTreeSet<usize>], n: usize) -> Result<TopNAccuracy> {
    if n == 0 {
        return Err(VsimError::InvalidParameter("n must be at least 1".into()));
    }
    if ranked.len() != gt.len() {
        return Err(VsimError::LengthMismatch {
            left: ranked.len(),
            right: gt.len(),
        });
    }
    let (mut norm_sum, mut hit_sum, mut evaluated) = (0.0, 0.0, 0usize);
    let mut skipped = Vec::new();
    for (i, (preds, truth)) in ranked.iter().zip(gt).enumerate() {
        if truth.is_empty() {
            log::warn!("image {i} has no ground-truth labels; skipped");
            skipped.push(i);
            continue;
        }
        let mut seen = BTreeSet::new();
        for &l in preds {
            if seen.len() == n {
                break;
            }
            seen.insert(l);
        }
        let hits = seen.intersection(truth).count() as f64;
        norm_sum += hits / n.min(truth.len()) as f64;
        hit_sum += hits;
        evaluated += 1;
    }
    let denom = evaluated.max(1) as f64;
    Ok(TopNAccuracy {
        n,
        normalized: norm_sum / denom,
        mean_hits: hit_sum / denom,
        evaluated,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelApGain {
    pub label: usize,
    pub name: String,
    pub relevant: usize,
    pub baseline_ap: f64,
    pub model_ap: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApGainReport {
    /// Labels with at least one relevant region, in label order.
    pub per_label: Vec<LabelApGain>,
    pub mean_gain: f64,
    pub positive: usize,
}

impl ApGainReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("label\trelevant\tbaseline_ap\tmodel_ap\tgain\n");
        for g in &self.per_label {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:+.6}",
                g.name, g.relevant, g.baseline_ap, g.model_ap, g.gain
            );
        }
        let _ = writeln!(
            out,
            "mean\t\t\t\t{:+.6}\npositive\t{}/{}",
            self.mean_gain,
            self.positive,
            self.per_label.len()
        );
        out
    }
}

/// Per-label AP of two region scorers and their difference. `baseline` and
/// `model` hold one length-L score vector per region; `truth` the region's
/// label.
pub fn ap_gain_report(
    baseline: &[Vec<f64>],
    model: &[Vec<f64>],
    truth: &[usize],
    names: &[String],
) -> Result<ApGainReport> {
    if baseline.len() != model.len() || baseline.len() != truth.len() {
        return Err(VsimError::LengthMismatch {
            left: baseline.len(),
            right: model.len().min(truth.len()),
        });
    }
    let num_labels = names.len();
    let mut per_label = Vec::new();
    for l in 0..num_labels {
        let relevance: Vec<bool> = truth.iter().map(|&t| t == l).collect();
        let relevant = relevance.iter().filter(|&&r| r).count();
        if relevant == 0 {
            continue;
        }
        let column = |rows: &[Vec<f64>]| -> Result<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    r.get(l).copied().ok_or(VsimError::DimensionMismatch {
                        expected: num_labels,
                        actual: r.len(),
                    })
                })
                .collect()
        };
        let baseline_ap = average_precision(&column(baseline)?, &relevance)?;
        let model_ap = average_precision(&column(model)?, &relevance)?;
        per_label.push(LabelApGain {
            label: l,
            name: names[l].clone(),
            relevant,
            baseline_ap,
            model_ap,
            gain: model_ap - baseline_ap,
        });
    }
    let mean_gain = if per_label.is_empty() {
        0.0
    } else {
        per_label.iter().map(|g| g.gain).sum::<f64>() / per_label.len() as f64
    };
    let positive = per_label.iter().filter(|g| g.gain > 0.0).count();
    Ok(ApGainReport {
        per_label,
        mean_gain,
        positive,
    })
}
