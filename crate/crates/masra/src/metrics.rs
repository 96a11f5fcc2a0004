//! Temporal grounding evaluation: interval IoU/GIoU, R1@tau, mAP over IoU
//! sweeps, and mean IoU.
//!
//! Intervals are half-open `[start, end)` in normalized time; measures are
//! plain lengths, so shared endpoints are never double counted.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type Interval = (f64, f64);

fn check_interval(op: &'static str, (s, e): Interval) -> Result<()> {
    if !(s.is_finite() && e.is_finite()) {
        return Err(Error::NonFinite(op.into()));
    }
    if e < s {
        return Err(Error::InvalidArg {
            op,
            reason: format!("negative-length interval ({s}, {e})"),
        });
    }
    Ok(())
}

/// Intersection-over-union of two intervals; 0 when disjoint or when the
/// union has zero measure.
pub fn temporal_iou(a: Interval, b: Interval) -> Result<f64> {
    check_interval("temporal_iou", a)?;
    check_interval("temporal_iou", b)?;
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok(inter / union)
}

/// IoU minus the normalized hull slack. Equals IoU for overlapping
/// intervals and goes negative for distant disjoint ones.
pub fn giou_1d(a: Interval, b: Interval) -> Result<f64> {
    check_interval("giou_1d", a)?;
    check_interval("giou_1d", b)?;
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    let hull = a.1.max(b.1) - a.0.min(b.0);
    if hull <= 0.0 {
        return Ok(0.0);
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    Ok(iou - (hull - union) / hull)
}

/// Fraction of top-1 IoUs at or above the threshold.
pub fn recall_at_1(top1_ious: &[f64], tau: f64) -> Result<f64> {
    if top1_ious.is_empty() {
        return Err(Error::InvalidArg {
            op: "recall_at_1",
            reason: "empty IoU list".into(),
        });
    }
    let hits = top1_ious.iter().filter(|&&v| v >= tau).count();
    Ok(hits as f64 / top1_ious.len() as f64)
}

pub fn mean_iou(top1_ious: &[f64]) -> Result<f64> {
    if top1_ious.is_empty() {
        return Err(Error::InvalidArg {
            op: "mean_iou",
            reason: "empty IoU list".into(),
        });
    }
    Ok(top1_ious.iter().sum::<f64>() / top1_ious.len() as f64)
}

/// One query's predictions: spans with confidences, plus its ground truths.
#[derive(Debug, Clone, Default)]
pub struct QueryDetections {
    pub predictions: Vec<(Interval, f64)>,
    pub ground_truths: Vec<Interval>,
}

#[derive(Debug, Clone)]
pub struct MeanApResult {
    /// `(tau, AP)` pairs in the order of the requested sweep.
    pub per_tau: Vec<(f64, f64)>,
    pub avg: f64,
    pub warnings: Vec<String>,
}

/// Average precision over a confidence-ranked prediction list.
///
/// Protocol: predictions are ranked globally by descending confidence
/// (ties by query id then prediction index), each greedily matched to the
/// highest-IoU unmatched ground truth of its own query with IoU >= tau,
/// and AP is the area under the all-points-interpolated precision-recall
/// curve.
pub fn mean_ap(queries: &[QueryDetections], taus: &[f64]) -> Result<MeanApResult> {
    if taus.is_empty() {
        return Err(Error::InvalidArg {
            op: "mean_ap",
            reason: "empty threshold sweep".into(),
        });
    }
    let mut warnings = Vec::new();
    let n_pos: usize = queries.iter().map(|q| q.ground_truths.len()).sum();
    for (qi, q) in queries.iter().enumerate() {
        if q.ground_truths.is_empty() {
            return Err(Error::InvalidArg {
                op: "mean_ap",
                reason: format!("query {qi} has no ground truth"),
            });
        }
        for p in &q.predictions {
            if !p.1.is_finite() {
                return Err(Error::NonFinite("mean_ap confidence".into()));
            }
        }
    }
    // Global ranking: confidence descending, ties by (query, index).
    let mut ranked: Vec<(usize, usize)> = queries
        .iter()
        .enumerate()
        .flat_map(|(qi, q)| (0..q.predictions.len()).map(move |pi| (qi, pi)))
        .collect();
    ranked.sort_by(|&(qa, pa), &(qb, pb)| {
        let ca = queries[qa].predictions[pa].1;
        let cb = queries[qb].predictions[pb].1;
        cb.total_cmp(&ca).then(qa.cmp(&qb)).then(pa.cmp(&pb))
    });
    if ranked.is_empty() {
        warnings.push("no predictions; AP = 0 at every threshold".into());
        return Ok(MeanApResult {
            per_tau: taus.iter().map(|&t| (t, 0.0)).collect(),
            avg: 0.0,
            warnings,
        });
    }
    let mut per_tau = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mut gt_used: Vec<Vec<bool>> = queries
            .iter()
            .map(|q| vec![false; q.ground_truths.len()])
            .collect();
        let mut tp_flags = Vec::with_capacity(ranked.len());
        for &(qi, pi) in &ranked {
            let (span, _) = queries[qi].predictions[pi];
            let mut best: Option<(usize, f64)> = None;
            for (gi, &gt) in queries[qi].ground_truths.iter().enumerate() {
                if gt_used[qi][gi] {
                    continue;
                }
                let iou = temporal_iou(span, gt)?;
                if iou >= tau && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, _)) => {
                    gt_used[qi][gi] = true;
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }
        // All-points interpolation: sum recall steps times the precision
        // envelope to the right.
        let mut precisions = Vec::with_capacity(tp_flags.len());
        let mut recalls = Vec::with_capacity(tp_flags.len());
        let (mut tp, mut fp) = (0usize, 0usize);
        for &hit in &tp_flags {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            precisions.push(tp as f64 / (tp + fp) as f64);
            recalls.push(tp as f64 / n_pos as f64);
        }
        for i in (0..precisions.len().saturating_sub(1)).rev() {
            precisions[i] = precisions[i].max(precisions[i + 1]);
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for (p, r) in precisions.iter().zip(recalls.iter()) {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
        per_tau.push((tau, ap));
    }
    let avg = per_tau.iter().map(|(_, ap)| ap).sum::<f64>() / per_tau.len() as f64;
    Ok(MeanApResult {
        per_tau,
        avg,
        warnings,
    })
}

/// The standard threshold sweeps.
pub const R1_TAUS: [f64; 3] = [0.3, 0.5, 0.7];

pub fn map_sweep() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalResult {
    /// tau (formatted with two decimals) -> fraction of queries whose top-1
    /// span clears it.
    pub r1_at: BTreeMap<String, f64>,
    pub map_at: BTreeMap<String, f64>,
    pub map_avg: f64,
    pub miou: f64,
    pub n_queries_evaluated: usize,
}

pub fn tau_key(tau: f64) -> String {
    format!("{tau:.2}")
}

impl EvalResult {
    /// Assemble from per-query top-1 IoUs plus full detection lists.
    pub fn compute(top1_ious: &[f64], queries: &[QueryDetections]) -> Result<Self> {
        let mut r1_at = BTreeMap::new();
        for tau in R1_TAUS {
            r1_at.insert(tau_key(tau), recall_at_1(top1_ious, tau)?);
        }
        let sweep = map_sweep();
        let ap = mean_ap(queries, &sweep)?;
        let mut map_at = BTreeMap::new();
        for (tau, v) in &ap.per_tau {
            map_at.insert(tau_key(*tau), *v);
        }
        Ok(EvalResult {
            r1_at,
            map_at,
            map_avg: ap.avg,
            miou: mean_iou(top1_ious)?,
            n_queries_evaluated: top1_ious.len(),
        })
    }

    pub fn r1(&self, tau: f64) -> f64 {
        self.r1_at.get(&tau_key(tau)).copied().unwrap_or(0.0)
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("queries evaluated: {}\n", self.n_queries_evaluated));
        for (k, v) in &self.r1_at {
            out.push_str(&format!("R1@{k:<5} {v:.4}\n"));
        }
        for k in ["0.50", "0.75"] {
            if let Some(v) = self.map_at.get(k) {
                out.push_str(&format!("mAP@{k:<4} {v:.4}\n"));
            }
        }
        out.push_str(&format!("mAP-avg   {:.4}\n", self.map_avg));
        out.push_str(&format!("mIoU      {:.4}\n", self.miou));
        out
    }
}
