//! Inference-path evaluation and the prediction dump format.
//!
//! Evaluation runs the prior-free backbone only: scenarios stripped of
//! caption/event arrays evaluate bit-identically to full ones.

use crate::error::{Error, Result};
use crate::metrics::{temporal_iou, EvalResult, QueryDetections};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::synth::io::{Dataset, Split};
use crate::synth::Scenario;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One JSON line per scenario: spans are `[start, end, confidence]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionRecord {
    pub scenario_id: u64,
    pub spans: Vec<[f64; 3]>,
    pub saliency: Vec<f64>,
}

pub fn predict_scenarios(
    model: &Model,
    store: &ParamStore,
    scenarios: &[Scenario],
) -> Result<Vec<PredictionRecord>> {
    scenarios
        .iter()
        .map(|scn| {
            let out = model.infer(store, &scn.video, &scn.query)?;
            Ok(PredictionRecord {
                scenario_id: scn.id,
                spans: out
                    .predictions
                    .iter()
                    .map(|p| {
                        let (s, e) = p.span();
                        [s, e, p.confidence]
                    })
                    .collect(),
                saliency: out.saliency,
            })
        })
        .collect()
}

/// Score a prediction dump against scenario ground truths. Top-1 is the
/// highest-confidence span (ties to the lower index).
pub fn score_records(scenarios: &[Scenario], records: &[PredictionRecord]) -> Result<EvalResult> {
    if scenarios.is_empty() {
        return Err(Error::InvalidArg {
            op: "score_records",
            reason: "empty split".into(),
        });
    }
    let mut top1 = Vec::with_capacity(scenarios.len());
    let mut queries = Vec::with_capacity(scenarios.len());
    for scn in scenarios {
        let rec = records
            .iter()
            .find(|r| r.scenario_id == scn.id)
            .ok_or_else(|| Error::InvalidArg {
                op: "score_records",
                reason: format!("no prediction record for scenario {}", scn.id),
            })?;
        let gt = scn.gt_normalized();
        let best = rec
            .spans
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a[2].total_cmp(&b[2]).then(ib.cmp(ia)))
            .ok_or_else(|| Error::InvalidArg {
                op: "score_records",
                reason: format!("scenario {} has no spans", scn.id),
            })?
            .1;
        top1.push(temporal_iou((best[0], best[1]), gt)?);
        queries.push(QueryDetections {
            predictions: rec.spans.iter().map(|s| ((s[0], s[1]), s[2])).collect(),
            ground_truths: vec![gt],
        });
    }
    EvalResult::compute(&top1, &queries)
}

pub fn evaluate_scenarios(
    model: &Model,
    store: &ParamStore,
    scenarios: &[Scenario],
) -> Result<(EvalResult, Vec<PredictionRecord>)> {
    let records = predict_scenarios(model, store, scenarios)?;
    let result = score_records(scenarios, &records)?;
    Ok((result, records))
}

pub fn evaluate_split(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
    split: Option<Split>,
) -> Result<(EvalResult, Vec<PredictionRecord>)> {
    let scenarios: Vec<Scenario> = dataset.iter(split).collect::<Result<_>>()?;
    evaluate_scenarios(model, store, &scenarios)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in records {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::CorruptRecord {
                record: format!("{}:{}", path.display(), i + 1),
                reason: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tiny_model_config, tiny_scenario_config, Model};
    use crate::synth::generate_scenario;

    fn scenarios(n: u64) -> Vec<Scenario> {
        (0..n)
            .map(|s| generate_scenario(&tiny_scenario_config(s + 400)).unwrap())
            .collect()
    }

    #[test]
    fn oracle_predictions_score_perfect_recall() {
        let scns = scenarios(6);
        let records: Vec<PredictionRecord> = scns
            .iter()
            .map(|s| {
                let (gs, ge) = s.gt_normalized();
                PredictionRecord {
                    scenario_id: s.id,
                    spans: vec![[gs, ge, 0.99], [0.0, 0.1, 0.2]],
                    saliency: vec![0.0; s.t()],
                }
            })
            .collect();
        let result = score_records(&scns, &records).unwrap();
        assert_eq!(result.r1(0.7), 1.0);
        assert_eq!(result.miou, 1.0);
        assert!(result.map_avg > 0.999);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (model, store) = Model::new(tiny_model_config(), 11).unwrap();
        let scns = scenarios(4);
        let (a, ra) = evaluate_scenarios(&model, &store, &scns).unwrap();
        let (b, rb) = evaluate_scenarios(&model, &store, &scns).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn prediction_dump_round_trips() {
        let dir = std::env::temp_dir().join(format!("masra_preds_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("preds.jsonl");
        let records = vec![
            PredictionRecord {
                scenario_id: 7,
                spans: vec![[0.1, 0.4, 0.9]],
                saliency: vec![0.5, -0.25],
            },
            PredictionRecord {
                scenario_id: 8,
                spans: vec![[0.2, 0.3, 0.1], [0.6, 0.9, 0.8]],
                saliency: vec![1.0, 0.0],
            },
        ];
        write_predictions(&path, &records).unwrap();
        let loaded = read_predictions(&path).unwrap();
        assert_eq!(records, loaded);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_record_is_an_error() {
        let scns = scenarios(2);
        let records = vec![PredictionRecord {
            scenario_id: scns[0].id,
            spans: vec![[0.1, 0.2, 0.5]],
            saliency: vec![],
        }];
        assert!(score_records(&scns, &records).is_err());
    }
}
