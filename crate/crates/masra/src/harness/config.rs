//! Run configuration: a flat JSON file overridable by CLI flags, with
//! `MASRA_SEED` sitting between the two (flag > env > file).

use crate::error::{Error, Result};
use crate::grounding::{Lambdas, MomentLossWeights};
use crate::model::{EstaSource, LrcaSource, ModelConfig};
use crate::synth::io::Dataset;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn d_c() -> usize { 64 }
fn d_heads() -> usize { 4 }
fn d_ctx_layers() -> usize { 2 }
fn d_post_fuse_layers() -> usize { 1 }
fn d_dec_layers() -> usize { 2 }
fn d_n_queries() -> usize { 5 }
fn d_codebook_size() -> usize { 128 }
fn d_aux_top_k() -> usize { 8 }
fn d_lambda_sal() -> f64 { 1.0 }
fn d_lambda_sem() -> f64 { 0.5 }
fn d_lambda_rel() -> f64 { 0.5 }
fn d_lambda_cb() -> f64 { 0.25 }
fn d_beta() -> f64 { 0.25 }
fn d_w_cls() -> f64 { 2.0 }
fn d_w_l1() -> f64 { 5.0 }
fn d_w_giou() -> f64 { 1.0 }
fn d_margin() -> f64 { 0.2 }
fn d_lr() -> f64 { 1e-4 }
fn d_weight_decay() -> f64 { 1e-4 }
fn d_batch_size() -> usize { 16 }
fn d_epochs() -> usize { 40 }
fn d_true() -> bool { true }
fn d_esta_source() -> EstaSource { EstaSource::MllmPrior }
fn d_lrca_source() -> LrcaSource { LrcaSource::TextPrior }

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "d_c")]
    pub c: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_ctx_layers")]
    pub ctx_layers: usize,
    #[serde(default = "d_post_fuse_layers")]
    pub post_fuse_layers: usize,
    #[serde(default = "d_dec_layers")]
    pub dec_layers: usize,
    #[serde(default = "d_n_queries")]
    pub n_queries: usize,
    #[serde(default = "d_codebook_size")]
    pub codebook_size: usize,
    #[serde(default = "d_aux_top_k")]
    pub aux_top_k: usize,
    #[serde(default = "d_lambda_sal")]
    pub lambda_sal: f64,
    #[serde(default = "d_lambda_sem")]
    pub lambda_sem: f64,
    #[serde(default = "d_lambda_rel")]
    pub lambda_rel: f64,
    #[serde(default = "d_lambda_cb")]
    pub lambda_cb: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_w_cls")]
    pub w_cls: f64,
    #[serde(default = "d_w_l1")]
    pub w_l1: f64,
    #[serde(default = "d_w_giou")]
    pub w_giou: f64,
    #[serde(default = "d_margin")]
    pub margin: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_true")]
    pub use_esta: bool,
    #[serde(default = "d_true")]
    pub use_lrca: bool,
    #[serde(default = "d_true")]
    pub use_dai: bool,
    #[serde(default = "d_true")]
    pub use_sge: bool,
    #[serde(default = "d_true")]
    pub use_sora: bool,
    #[serde(default = "d_true")]
    pub codebook_attn_grads: bool,
    #[serde(default = "d_esta_source")]
    pub esta_source: EstaSource,
    #[serde(default = "d_lrca_source")]
    pub lrca_source: LrcaSource,
}

impl RunConfig {
    pub fn with_dataset(dataset: impl Into<PathBuf>) -> Self {
        serde_json::from_value(serde_json::json!({ "dataset": dataset.into() }))
            .expect("defaults deserialize")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config {
            key: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// `MASRA_SEED` overrides the file seed; explicit flags override both
    /// (applied by the CLI after this call).
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("MASRA_SEED") {
            self.seed = v.parse().map_err(|_| Error::Config {
                key: "MASRA_SEED".into(),
                reason: format!("not an unsigned integer: {v}"),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, reason: String| Error::Config {
            key: key.into(),
            reason,
        };
        for (key, v) in [
            ("lambda_sal", self.lambda_sal),
            ("lambda_sem", self.lambda_sem),
            ("lambda_rel", self.lambda_rel),
            ("lambda_cb", self.lambda_cb),
            ("beta", self.beta),
            ("w_cls", self.w_cls),
            ("w_l1", self.w_l1),
            ("w_giou", self.w_giou),
            ("margin", self.margin),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(err(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.lr == 0.0 && self.epochs > 0 {
            return Err(err("lr", "must be positive when training".into()));
        }
        if self.batch_size == 0 {
            return Err(err("batch_size", "must be >= 1".into()));
        }
        if self.heads == 0 || self.c % self.heads != 0 {
            return Err(err(
                "heads",
                format!("{} must divide c = {}", self.heads, self.c),
            ));
        }
        if self.aux_top_k == 0 || self.aux_top_k > self.codebook_size {
            return Err(err(
                "aux_top_k",
                format!("{} outside 1..={}", self.aux_top_k, self.codebook_size),
            ));
        }
        if self.n_queries == 0 {
            return Err(err("n_queries", "must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            sal: self.lambda_sal,
            sem: self.lambda_sem,
            rel: self.lambda_rel,
            cb: self.lambda_cb,
        }
    }

    pub fn weights(&self) -> MomentLossWeights {
        MomentLossWeights {
            w_cls: self.w_cls,
            w_l1: self.w_l1,
            w_giou: self.w_giou,
        }
    }

    /// Model configuration over a specific dataset's feature dims.
    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        let dc = &dataset.manifest.config;
        ModelConfig {
            c: self.c,
            d: dc.d,
            c_v: dc.c_v,
            c_q: dc.c_q,
            t_max: dc.t,
            heads: self.heads,
            ctx_layers: self.ctx_layers,
            post_fuse_layers: self.post_fuse_layers,
            dec_layers: self.dec_layers,
            n_queries: self.n_queries,
            codebook_size: self.codebook_size,
            aux_top_k: self.aux_top_k,
            beta: self.beta,
            margin: self.margin,
            weights: self.weights(),
            lambdas: self.lambdas(),
            use_esta: self.use_esta,
            use_lrca: self.use_lrca,
            use_dai: self.use_dai,
            use_sge: self.use_sge,
            use_sora: self.use_sora,
            codebook_attn_grads: self.codebook_attn_grads,
            esta_source: self.esta_source,
            lrca_source: self.lrca_source,
        }
    }
}
