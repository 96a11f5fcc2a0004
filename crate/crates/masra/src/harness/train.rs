//! Training loop and checkpointing.

use super::config::RunConfig;
use super::evaluate::evaluate_scenarios;
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::model::{Model, ModelConfig};
use crate::nn::graph::GradMap;
use crate::nn::optim::MomentPair;
use crate::nn::{AdamW, Graph, ParamStore};
use crate::synth::io::{load_dataset, Split};
use crate::synth::Scenario;
use crate::grounding::LossBreakdown;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 8] = b"MASRACKP";
const CKPT_VERSION: u32 = 1;
/// Abort when the batch-mean objective exceeds this multiple of its
/// initial value.
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<EvalResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamBlock {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    run_config: RunConfig,
    model_config: ModelConfig,
    epoch: usize,
    adam_step: u64,
    metric_history: Vec<EpochMetrics>,
    params: Vec<ParamBlock>,
}

/// Snapshot of parameters, optimizer moments, configuration, and metric
/// history. Values are stored as exact little-endian f64, so reloading and
/// re-evaluating reproduces the recorded validation metrics bit for bit.
pub struct Checkpoint {
    pub run_config: RunConfig,
    pub model_config: ModelConfig,
    pub epoch: usize,
    pub adam_step: u64,
    pub metric_history: Vec<EpochMetrics>,
    /// name -> (value, first moment, second moment), sorted by name.
    pub tensors: Vec<(String, Array2<f64>, Array2<f64>, Array2<f64>)>,
}

impl Checkpoint {
    fn snapshot(
        run_config: &RunConfig,
        model_config: &ModelConfig,
        store: &ParamStore,
        opt: &AdamW,
        epoch: usize,
        metric_history: Vec<EpochMetrics>,
    ) -> Self {
        let tensors = store
            .iter()
            .map(|(name, value)| {
                let (m, v) = opt
                    .moments
                    .get(name)
                    .map(|p| (p.m.clone(), p.v.clone()))
                    .unwrap_or_else(|| {
                        (Array2::zeros(value.dim()), Array2::zeros(value.dim()))
                    });
                (name.to_string(), value.clone(), m, v)
            })
            .collect();
        Checkpoint {
            run_config: run_config.clone(),
            model_config: model_config.clone(),
            epoch,
            adam_step: opt.step_count,
            metric_history,
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |e: std::io::Error| Error::io(path, e);
        let header = CheckpointHeader {
            run_config: self.run_config.clone(),
            model_config: self.model_config.clone(),
            epoch: self.epoch,
            adam_step: self.adam_step,
            metric_history: self.metric_history.clone(),
            params: self
                .tensors
                .iter()
                .map(|(name, v, _, _)| ParamBlock {
                    name: name.clone(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        f.write_all(CKPT_MAGIC).map_err(io_err)?;
        f.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io_err)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        f.write_all(&header_json).map_err(io_err)?;
        for (_, value, m, v) in &self.tensors {
            for arr in [value, m, v] {
                for x in arr.iter() {
                    f.write_all(&x.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
        f.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: String| Error::Checkpoint(format!("{}: {reason}", path.display()));
        if buf.len() < 20 || &buf[..8] != CKPT_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
        if 20 + header_len > buf.len() {
            return Err(corrupt("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&buf[20..20 + header_len])
            .map_err(|e| corrupt(format!("header parse: {e}")))?;
        let mut pos = 20 + header_len;
        let mut tensors = Vec::with_capacity(header.params.len());
        for block in &header.params {
            let n = block.rows * block.cols;
            let read_arr = |pos: &mut usize| -> Result<Array2<f64>> {
                let bytes = 8 * n;
                if *pos + bytes > buf.len() {
                    return Err(corrupt(format!("truncated payload at {}", block.name)));
                }
                let vals: Vec<f64> = buf[*pos..*pos + bytes]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                *pos += bytes;
                Array2::from_shape_vec((block.rows, block.cols), vals)
                    .map_err(|e| corrupt(e.to_string()))
            };
            let value = read_arr(&mut pos)?;
            let m = read_arr(&mut pos)?;
            let v = read_arr(&mut pos)?;
            tensors.push((block.name.clone(), value, m, v));
        }
        if pos != buf.len() {
            return Err(corrupt("trailing bytes".into()));
        }
        Ok(Checkpoint {
            run_config: header.run_config,
            model_config: header.model_config,
            epoch: header.epoch,
            adam_step: header.adam_step,
            metric_history: header.metric_history,
            tensors,
        })
    }

    /// Rebuild the model and parameter store this checkpoint captured.
    pub fn build_model(&self) -> Result<(Model, ParamStore)> {
        let (model, mut store) = Model::new(self.model_config.clone(), self.run_config.seed)?;
        for (name, value, _, _) in &self.tensors {
            store.set(name, value.clone()).map_err(|_| {
                Error::Checkpoint(format!("checkpoint parameter {name} not in model"))
            })?;
        }
        let expected: Vec<&str> = store.names().collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "model expects {} parameters, checkpoint holds {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        Ok((model, store))
    }

    /// Optimizer with restored moments (for inspection or resumption).
    pub fn build_optimizer(&self) -> AdamW {
        let mut opt = AdamW::new(self.run_config.lr, self.run_config.weight_decay);
        opt.step_count = self.adam_step;
        for (name, _, m, v) in &self.tensors {
            opt.moments.insert(
                name.clone(),
                MomentPair {
                    m: m.clone(),
                    v: v.clone(),
                },
            );
        }
        opt
    }

    pub fn best_val(&self) -> Option<&EvalResult> {
        self.metric_history
            .iter()
            .filter_map(|e| e.val.as_ref())
            .max_by(|a, b| a.map_avg.total_cmp(&b.map_avg))
    }
}

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepLog>,
    pub final_train_loss: f64,
    pub initial_train_loss: f64,
}

/// Deterministic full training run; the returned checkpoint holds the
/// parameters of the best validation epoch (by mAP-avg), or the final
/// parameters when the dataset has no validation split.
pub fn train(config: &RunConfig) -> Result<TrainResult> {
    config.validate()?;
    let dataset = load_dataset(&config.dataset)?;
    let train_scenarios: Vec<Scenario> = dataset.iter(Some(Split::Train)).collect::<Result<_>>()?;
    let val_scenarios: Vec<Scenario> = dataset.iter(Some(Split::Val)).collect::<Result<_>>()?;
    if train_scenarios.is_empty() {
        return Err(Error::InvalidArg {
            op: "train",
            reason: "dataset has no training records".into(),
        });
    }
    let model_config = config.model_config(&dataset);
    let (model, mut store) = Model::new(model_config.clone(), config.seed)?;
    let mut opt = AdamW::new(config.lr, config.weight_decay);

    let out_dir = config.out_dir.clone();
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let resolved = serde_json::to_string_pretty(config).expect("config serializes");
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, resolved).map_err(|e| Error::io(&cfg_path, e))?;
    }

    let mut steps = Vec::new();
    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut initial_loss: Option<f64> = None;
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_scenarios.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for (batch_id, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = GradMap::new();
            let mut sums = [0.0f64; 6]; // vtg, sal, semantic, relation, cb, total
            for &idx in batch {
                let scn = &train_scenarios[idx];
                let mut g = Graph::new();
                let fwd = model.forward_training(&mut g, &store, scn, None)?;
                let b = &fwd.breakdown;
                for (acc, v) in sums
                    .iter_mut()
                    .zip([b.vtg, b.sal, b.semantic, b.relation, b.cb, b.total])
                {
                    *acc += v;
                }
                let back = g.backward(fwd.total)?;
                for (name, grad) in back.by_param {
                    grads
                        .entry(name)
                        .and_modify(|acc| *acc += &grad)
                        .or_insert(grad);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for grad in grads.values_mut() {
                grad.mapv_inplace(|v| v * scale);
            }
            let mean_total = sums[5] * scale;
            let init = *initial_loss.get_or_insert(mean_total);
            if !mean_total.is_finite() || mean_total > DIVERGENCE_FACTOR * init.max(1e-12) {
                let context = format!("epoch {epoch}, batch {batch_id}: mean total {mean_total:.6} vs initial {init:.6}");
                if let Some(dir) = &out_dir {
                    let ckpt = match &best {
                        Some((_, c)) => c.clone_shallow(),
                        None => Checkpoint::snapshot(
                            config,
                            &model_config,
                            &store,
                            &opt,
                            epoch,
                            history.clone(),
                        ),
                    };
                    let _ = ckpt.save(&dir.join("checkpoint.bin"));
                    let diag = serde_json::json!({
                        "epoch": epoch,
                        "batch": batch_id,
                        "mean_total": mean_total,
                        "initial": init,
                        "scenario_ids": batch.iter().map(|&i| train_scenarios[i].id).collect::<Vec<_>>(),
                    });
                    let _ = std::fs::write(
                        dir.join("divergence.json"),
                        serde_json::to_string_pretty(&diag).unwrap(),
                    );
                }
                return Err(Error::Diverged { context });
            }
            steps.push(StepLog {
                epoch,
                step: global_step,
                breakdown: LossBreakdown {
                    vtg: sums[0] * scale,
                    sal: sums[1] * scale,
                    semantic: sums[2] * scale,
                    relation: sums[3] * scale,
                    cb: sums[4] * scale,
                    lambdas: config.lambdas(),
                    total: mean_total,
                },
            });
            opt.step(&mut store, &grads)?;
            epoch_loss += mean_total;
            epoch_batches += 1;
            global_step += 1;
        }
        let train_loss = epoch_loss / epoch_batches.max(1) as f64;
        let val = if val_scenarios.is_empty() {
            None
        } else {
            Some(evaluate_scenarios(&model, &store, &val_scenarios)?.0)
        };
        if let Some(v) = &val {
            let score = v.map_avg;
            let is_better = best.as_ref().map_or(true, |(b, _)| score > *b);
            if is_better {
                let ckpt = Checkpoint::snapshot(
                    config,
                    &model_config,
                    &store,
                    &opt,
                    epoch,
                    Vec::new(),
                );
                best = Some((score, ckpt));
            }
        }
        history.push(EpochMetrics {
            epoch,
            train_loss,
            val,
        });
    }

    let mut checkpoint = match best {
        Some((_, mut ckpt)) => {
            ckpt.metric_history = history.clone();
            ckpt
        }
        None => Checkpoint::snapshot(
            config,
            &model_config,
            &store,
            &opt,
            config.epochs.saturating_sub(1),
            history.clone(),
        ),
    };
    checkpoint.run_config = config.clone();

    if let Some(dir) = &out_dir {
        checkpoint.save(&dir.join("checkpoint.bin"))?;
        let log_path = dir.join("log.jsonl");
        let mut f =
            std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        for s in &steps {
            writeln!(f, "{}", serde_json::to_string(s).unwrap())
                .map_err(|e| Error::io(&log_path, e))?;
        }
        if let Some(best_val) = checkpoint.best_val() {
            let eval_path = dir.join("eval.json");
            std::fs::write(
                &eval_path,
                serde_json::to_string_pretty(best_val).unwrap(),
            )
            .map_err(|e| Error::io(&eval_path, e))?;
        }
    }

    let initial = initial_loss.unwrap_or(0.0);
    let final_loss = history.last().map(|h| h.train_loss).unwrap_or(initial);
    Ok(TrainResult {
        checkpoint,
        steps,
        final_train_loss: final_loss,
        initial_train_loss: initial,
    })
}

impl Checkpoint {
    fn clone_shallow(&self) -> Checkpoint {
        Checkpoint {
            run_config: self.run_config.clone(),
            model_config: self.model_config.clone(),
            epoch: self.epoch,
            adam_step: self.adam_step,
            metric_history: self.metric_history.clone(),
            tensors: self.tensors.clone(),
        }
    }
}
