//! Full model assembly: backbone forward pass and training losses.
//!
//! The backbone consumes only video and query features, so evaluation is
//! structurally incapable of reading training-time priors; the training
//! wrapper adds the prior-driven losses on top of the backbone graph.

use crate::dai::{AuxSelection, Dai, DaiOutput};
use crate::error::{Error, Result};
use crate::esta::{ContextualReasoner, Sge, SpanPool, TemporalContext};
use crate::grounding::{
    moment_predictions, match_predictions, overall_loss_var, saliency_loss_var, vtg_loss_var,
    GroundTruthSpan, Lambdas, LossBreakdown, MomentHead, MomentLossWeights, MomentPrediction,
    PredictionVars, SaliencyHead,
};
use crate::lrca::{self, SimilarityMatrix, Sora};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::normal_sample;
use crate::nn::{Activation, AttentionSpec, Linear, Mlp, ParamStore, Tensor2D};
use crate::synth::Scenario;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstaSource {
    /// Event descriptions with spans from the caption oracle.
    MllmPrior,
    /// Only the ground-truth span and its description.
    GtOnly,
    /// Prior spans, but targets pooled from raw video features.
    Visual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrcaSource {
    /// Relation matrix from clip captions (cached with the dataset).
    TextPrior,
    /// Relation matrix recomputed from raw video features.
    VisualSelf,
}

/// Everything the model needs to build its parameter set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub c: usize,
    pub d: usize,
    pub c_v: usize,
    pub c_q: usize,
    pub t_max: usize,
    pub heads: usize,
    pub ctx_layers: usize,
    pub post_fuse_layers: usize,
    pub dec_layers: usize,
    pub n_queries: usize,
    pub codebook_size: usize,
    pub aux_top_k: usize,
    pub beta: f64,
    pub margin: f64,
    pub weights: MomentLossWeights,
    pub lambdas: Lambdas,
    pub use_esta: bool,
    pub use_lrca: bool,
    pub use_dai: bool,
    pub use_sge: bool,
    pub use_sora: bool,
    pub codebook_attn_grads: bool,
    pub esta_source: EstaSource,
    pub lrca_source: LrcaSource,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, reason: String| Error::Config {
            key: key.into(),
            reason,
        };
        if self.heads == 0 || self.c % self.heads != 0 {
            return Err(err("heads", format!("{} must divide c = {}", self.heads, self.c)));
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
        if self.beta < 0.0 {
            return Err(err("beta", format!("must be >= 0, got {}", self.beta)));
        }
        if self.margin < 0.0 {
            return Err(err("margin", format!("must be >= 0, got {}", self.margin)));
        }
        for (key, v) in [
            ("lambda_sal", self.lambdas.sal),
            ("lambda_sem", self.lambdas.sem),
            ("lambda_rel", self.lambdas.rel),
            ("lambda_cb", self.lambdas.cb),
            ("w_cls", self.weights.w_cls),
            ("w_l1", self.weights.w_l1),
            ("w_giou", self.weights.w_giou),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(err(key, format!("must be a finite non-negative value, got {v}")));
            }
        }
        Ok(())
    }
}

/// Discrete choices and stop-gradient buffers frozen during
/// finite-difference checks, so the checked loss surface is exactly the
/// function the analytic gradient differentiates: codeword selection and
/// prediction matching are piecewise-constant, and `sg()` arguments are
/// values, not functions of the parameters.
#[derive(Debug, Clone, Default)]
pub struct ForwardFixings {
    /// Frozen codeword selection (indices and the quantized mean).
    pub aux: Option<AuxSelection>,
    pub matched: Option<usize>,
    /// Frozen value of the context token for the quantization term.
    pub context_sg: Option<Vec<f64>>,
}

/// Graph handles produced by the prior-free backbone pass.
pub struct Backbone {
    pub video_proj: Var,
    pub query_proj: Var,
    pub query_pooled: Var,
    pub context_token: Var,
    pub aux: Option<AuxSelection>,
    pub interaction: DaiOutput,
    pub temporal_context: TemporalContext,
    pub fused: Var,
    pub temporal_features: Var,
    pub similarity: Var,
    pub refined_similarity: Var,
    pub reweighted: Var,
    pub predictions: Vec<PredictionVars>,
    pub saliency: Var,
}

/// Graph handles for the individual objective terms.
#[derive(Debug, Clone, Copy)]
pub struct ComponentVars {
    pub vtg: Var,
    pub sal: Var,
    pub semantic: Var,
    pub relation: Var,
    pub cb: Var,
}

pub struct TrainingForward {
    pub backbone: Backbone,
    pub total: Var,
    pub losses: ComponentVars,
    pub breakdown: LossBreakdown,
    pub matched: usize,
    pub warnings: Vec<String>,
}

pub struct Model {
    pub config: ModelConfig,
    in_video: Mlp,
    in_query: Mlp,
    /// Embedding normalization: keeps projected features at the same row
    /// scale as every LayerNormed stage, so attention logits across
    /// branches start at comparable magnitudes.
    in_video_ln: crate::nn::LayerNorm,
    in_query_ln: crate::nn::LayerNorm,
    dai: Dai,
    ctx: ContextualReasoner,
    span_pool: SpanPool,
    sge: Option<Sge>,
    concat_fuse: Option<Linear>,
    /// Positional table added to the fused features before the closing
    /// encoder; keeps temporal rows distinct (attention-only fusion can
    /// otherwise drive every row to the same mixture, a gradient trap).
    fuse_pos: crate::nn::PositionalEncoding,
    fuse_enc: crate::nn::TransformerEncoder,
    sora: Sora,
    /// Projects the pooled query onto the grounding tokens, so decoder
    /// attention carries a query-content selection term.
    dec_condition: Linear,
    moment_head: MomentHead,
    saliency_head: SaliencyHead,
    /// Fixed (non-trainable) projection used when the event-alignment
    /// targets are pooled raw video features; derived deterministically
    /// from the feature dims.
    visual_target_proj: Array2<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let spec = AttentionSpec::new(config.c, config.heads)?;
        let in_video = Mlp::register(
            &mut store,
            "in.video",
            &[config.c_v, config.c, config.c],
            Activation::Silu,
        )?;
        let in_query = Mlp::register(
            &mut store,
            "in.query",
            &[config.c_q, config.c, config.c],
            Activation::Silu,
        )?;
        let in_video_ln = crate::nn::LayerNorm::register(&mut store, "in.video_ln", config.c)?;
        let in_query_ln = crate::nn::LayerNorm::register(&mut store, "in.query_ln", config.c)?;
        let dai = Dai::register(&mut store, "dai", spec, config.codebook_size)?;
        let ctx = ContextualReasoner::register(
            &mut store,
            "ctx",
            spec,
            config.ctx_layers,
            config.t_max,
            false,
        )?;
        let span_pool = SpanPool::register(&mut store, "esta.span", config.c, config.d)?;
        let (sge, concat_fuse) = if config.use_sge {
            (Some(Sge::register(&mut store, "sge", spec)?), None)
        } else {
            (
                None,
                Some(Linear::register(
                    &mut store,
                    "fuse.concat",
                    2 * config.c,
                    config.c,
                    false,
                )?),
            )
        };
        let fuse_pos = crate::nn::PositionalEncoding::register(
            &mut store,
            "fuse",
            config.t_max,
            config.c,
        )?;
        let fuse_enc = crate::nn::TransformerEncoder::register(
            &mut store,
            "fuse.enc",
            spec,
            config.post_fuse_layers,
            false,
        )?;
        let sora = Sora::register(&mut store, "sora", config.c)?;
        let dec_condition = Linear::register(&mut store, "dec.cond", config.c, config.c, false)?;
        let moment_head = MomentHead::register(
            &mut store,
            "dec",
            spec,
            config.dec_layers,
            config.n_queries,
            config.t_max,
        )?;
        let saliency_head = SaliencyHead::register(&mut store, "sal", config.c)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x7669_7375_616c ^ config.c_v as u64);
        let scale = 1.0 / (config.c_v as f64).sqrt();
        let visual_target_proj =
            Array2::from_shape_simple_fn((config.c_v, config.d), || scale * normal_sample(&mut rng));
        Ok((
            Self {
                config,
                in_video,
                in_query,
                in_video_ln,
                in_query_ln,
                dai,
                ctx,
                span_pool,
                sge,
                concat_fuse,
                fuse_pos,
                fuse_enc,
                sora,
                dec_condition,
                moment_head,
                saliency_head,
                visual_target_proj,
            },
            store,
        ))
    }

    /// Prior-free forward pass from raw features to predictions.
    pub fn backbone(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        video: &Tensor2D,
        query: &Tensor2D,
        fix: Option<&ForwardFixings>,
    ) -> Result<Backbone> {
        let cfg = &self.config;
        let video_in = g.constant(video.array().clone());
        let query_in = g.constant(query.array().clone());
        let video_proj = self.in_video.forward(g, store, video_in)?;
        let video_proj = self.in_video_ln.forward(g, store, video_proj)?;
        let query_proj = self.in_query.forward(g, store, query_in)?;
        let query_proj = self.in_query_ln.forward(g, store, query_proj)?;
        let query_pooled = g.mean_rows(query_proj);
        let context_token = self.dai.context_token(g, store, video_proj, query_proj)?;
        let aux = if cfg.use_dai {
            match fix.and_then(|f| f.aux.clone()) {
                Some(frozen) => Some(frozen),
                None => {
                    let z: Vec<f64> = g.value(context_token).iter().copied().collect();
                    Some(self.dai.retrieve(store, &z, cfg.aux_top_k)?)
                }
            }
        } else {
            None
        };
        let aux_indices: Vec<usize> = aux.as_ref().map(|a| a.indices.clone()).unwrap_or_default();
        let interaction = self.dai.interact(
            g,
            store,
            video_proj,
            query_proj,
            &aux_indices,
            cfg.codebook_attn_grads,
        )?;
        let temporal_context = self.ctx.forward(g, store, video_proj, true)?;
        let fused = match (&self.sge, &self.concat_fuse) {
            (Some(sge), _) => {
                sge.fuse(g, store, &temporal_context, interaction.features)?
                    .0
            }
            (None, Some(lin)) => {
                let cat = g.concat_cols(&[temporal_context.features, interaction.features])?;
                lin.forward(g, store, cat)?
            }
            _ => unreachable!("one fusion path is always registered"),
        };
        let fused = self.fuse_pos.forward(g, store, fused)?;
        let temporal_features = self.fuse_enc.forward(g, store, fused)?;
        let similarity = lrca::similarity_matrix_var(g, temporal_features)?;
        let refined_similarity = if cfg.use_sora {
            self.sora.refine(g, store, similarity)?
        } else {
            similarity
        };
        let (reweighted, _) = self
            .sora
            .reweight(g, store, refined_similarity, temporal_features)?;
        let query_cond = self.dec_condition.forward(g, store, query_pooled)?;
        let predictions = self
            .moment_head
            .forward(g, store, reweighted, Some(query_cond))?;
        let saliency = self
            .saliency_head
            .forward(g, store, reweighted, query_pooled)?;
        Ok(Backbone {
            video_proj,
            query_proj,
            query_pooled,
            context_token,
            aux,
            interaction,
            temporal_context,
            fused,
            temporal_features,
            similarity,
            refined_similarity,
            reweighted,
            predictions,
            saliency,
        })
    }

    /// Event spans and alignment targets for the configured prior source.
    fn esta_targets(&self, scn: &Scenario) -> Result<(Vec<(usize, usize)>, Vec<Vec<f64>>)> {
        let events = scn.events()?;
        match self.config.esta_source {
            EstaSource::MllmPrior => Ok((
                events.iter().map(|e| e.span).collect(),
                events.iter().map(|e| e.description.clone()).collect(),
            )),
            EstaSource::GtOnly => {
                let ev = events
                    .iter()
                    .find(|e| e.span == scn.gt_span)
                    .ok_or_else(|| Error::InvalidArg {
                        op: "esta_targets",
                        reason: format!("no event matches gt span in scenario {}", scn.id),
                    })?;
                Ok((vec![ev.span], vec![ev.description.clone()]))
            }
            EstaSource::Visual => {
                let spans: Vec<(usize, usize)> = events.iter().map(|e| e.span).collect();
                let video = scn.video.array();
                let targets = spans
                    .iter()
                    .map(|&(s, e)| {
                        let mut pooled = vec![0.0; self.config.c_v];
                        for t in s..=e {
                            for (k, p) in pooled.iter_mut().enumerate() {
                                *p += video[(t - 1, k)];
                            }
                        }
                        let len = (e - s + 1) as f64;
                        let mut out = vec![0.0; self.config.d];
                        for (k, p) in pooled.iter().enumerate() {
                            let v = p / len;
                            for (j, o) in out.iter_mut().enumerate() {
                                *o += v * self.visual_target_proj[(k, j)];
                            }
                        }
                        out
                    })
                    .collect();
                Ok((spans, targets))
            }
        }
    }

    fn relation_target(&self, scn: &Scenario) -> Result<SimilarityMatrix> {
        match self.config.lrca_source {
            LrcaSource::TextPrior => {
                let priors = scn.priors.as_ref().ok_or_else(|| Error::InvalidArg {
                    op: "relation_target",
                    reason: format!("scenario {} carries no priors", scn.id),
                })?;
                SimilarityMatrix::new(priors.relation.clone())
            }
            LrcaSource::VisualSelf => lrca::textual_relation_matrix(&scn.video),
        }
    }

    /// Backbone plus the five-term training objective.
    pub fn forward_training(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scn: &Scenario,
        fix: Option<&ForwardFixings>,
    ) -> Result<TrainingForward> {
        let cfg = &self.config;
        let backbone = self.backbone(g, store, &scn.video, &scn.query, fix)?;
        let mut warnings = Vec::new();

        let gt = {
            let (s, e) = scn.gt_normalized();
            GroundTruthSpan::new(s, e)?
        };
        let pred_values = moment_predictions(g, &backbone.predictions);
        let matched = match fix.and_then(|f| f.matched) {
            Some(m) => m,
            None => match_predictions(&pred_values, &gt, &cfg.weights)?,
        };
        let vtg = vtg_loss_var(g, &backbone.predictions, matched, &gt, &cfg.weights)?;

        let (sal, sal_warning) =
            saliency_loss_var(g, backbone.saliency, &scn.saliency_gt, cfg.margin)?;
        if let Some(w) = sal_warning {
            warnings.push(w);
        }

        let semantic = if cfg.use_esta {
            let (spans, targets) = self.esta_targets(scn)?;
            let events =
                self.span_pool
                    .forward(g, store, &backbone.temporal_context, &spans)?;
            crate::esta::semantic_loss_var(g, &events, &targets)?
        } else {
            g.scalar_const(0.0)
        };

        let relation = if cfg.use_lrca {
            let target = self.relation_target(scn)?;
            lrca::relation_loss_var(g, backbone.similarity, &target)?
        } else {
            g.scalar_const(0.0)
        };

        let cb = match (&backbone.aux, cfg.use_dai) {
            (Some(sel), true) => self.dai.codebook_loss(
                g,
                store,
                backbone.context_token,
                sel,
                cfg.beta,
                fix.and_then(|f| f.context_sg.as_deref()),
            )?,
            _ => g.scalar_const(0.0),
        };

        let (total, breakdown) =
            overall_loss_var(g, vtg, sal, semantic, relation, cb, &cfg.lambdas)?;
        Ok(TrainingForward {
            backbone,
            total,
            losses: ComponentVars {
                vtg,
                sal,
                semantic,
                relation,
                cb,
            },
            breakdown,
            matched,
            warnings,
        })
    }

    /// Inference surface: predictions, saliency, and both similarity
    /// stages (for heatmap export).
    pub fn infer(
        &self,
        store: &ParamStore,
        video: &Tensor2D,
        query: &Tensor2D,
    ) -> Result<Inference> {
        let mut g = Graph::new();
        let backbone = self.backbone(&mut g, store, video, query, None)?;
        Ok(Inference {
            predictions: moment_predictions(&g, &backbone.predictions),
            saliency: g.value(backbone.saliency).iter().copied().collect(),
            similarity: g.value(backbone.similarity).clone(),
            refined_similarity: g.value(backbone.refined_similarity).clone(),
        })
    }

    /// Mean fraction of attention mass the interaction block places on aux
    /// keys, per video row (averaged over heads).
    pub fn aux_attention_mass(g: &Graph, out: &DaiOutput) -> Vec<f64> {
        let n_heads = out.attn_weights.len() as f64;
        let (rows, cols) = g.dims(out.attn_weights[0]);
        let mut mass = vec![0.0; rows];
        for w in &out.attn_weights {
            let vals = g.value(*w);
            for (i, m) in mass.iter_mut().enumerate() {
                let aux: f64 = (out.n_query_keys..cols).map(|j| vals[(i, j)]).sum();
                *m += aux / n_heads;
            }
        }
        mass
    }
}

pub struct Inference {
    pub predictions: Vec<MomentPrediction>,
    pub saliency: Vec<f64>,
    pub similarity: Array2<f64>,
    pub refined_similarity: Array2<f64>,
}

/// Desk-scale default model configuration over the default generator dims.
pub fn default_model_config() -> ModelConfig {
    ModelConfig {
        c: 64,
        d: 32,
        c_v: 64,
        c_q: 64,
        t_max: 32,
        heads: 4,
        ctx_layers: 2,
        post_fuse_layers: 1,
        dec_layers: 2,
        n_queries: 5,
        codebook_size: 128,
        aux_top_k: 8,
        beta: 0.25,
        margin: 0.2,
        weights: MomentLossWeights::default(),
        lambdas: Lambdas::default(),
        use_esta: true,
        use_lrca: true,
        use_dai: true,
        use_sge: true,
        use_sora: true,
        codebook_attn_grads: true,
        esta_source: EstaSource::MllmPrior,
        lrca_source: LrcaSource::TextPrior,
    }
}

/// A miniature configuration for fast finite-difference checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        c: 8,
        d: 4,
        c_v: 6,
        c_q: 6,
        t_max: 6,
        heads: 2,
        ctx_layers: 1,
        post_fuse_layers: 1,
        dec_layers: 1,
        n_queries: 2,
        codebook_size: 8,
        aux_top_k: 2,
        beta: 0.25,
        margin: 0.2,
        weights: MomentLossWeights::default(),
        lambdas: Lambdas::default(),
        use_esta: true,
        use_lrca: true,
        use_dai: true,
        use_sge: true,
        use_sora: true,
        codebook_attn_grads: true,
        esta_source: EstaSource::MllmPrior,
        lrca_source: LrcaSource::TextPrior,
    }
}

/// Generator settings matching [`tiny_model_config`].
pub fn tiny_scenario_config(seed: u64) -> crate::synth::ScenarioConfig {
    crate::synth::ScenarioConfig {
        t: 6,
        l: 3,
        c_v: 6,
        c_q: 6,
        d: 4,
        m_range: (2, 2),
        noise_sigma: 0.1,
        seed,
    }
}



#[cfg(test)]
impl Model {
    pub(crate) fn sge_for_probe(&self) -> Option<&crate::esta::Sge> {
        self.sge.as_ref()
    }
}

#[cfg(test)]
mod probe_trained {
    use super::*;
    use crate::synth::{generate_scenario, ScenarioConfig};

    #[test]
    #[ignore]
    fn trained_decoder_anatomy() {
        let path = std::env::var("MASRA_PROBE_CKPT").unwrap_or_default();
        if path.is_empty() {
            return;
        }
        let ckpt = crate::harness::Checkpoint::load(std::path::Path::new(&path)).unwrap();
        let (model, store) = ckpt.build_model().unwrap();
        for seed in [501u64, 502, 503] {
            let cfg = ScenarioConfig { seed, ..ScenarioConfig::default() };
            let scn = generate_scenario(&cfg).unwrap();
            let mut g = Graph::new();
            let b = model
                .backbone(&mut g, &store, &scn.video, &scn.query, None)
                .unwrap();
            let preds = crate::grounding::moment_predictions(&g, &b.predictions);
            let gt = scn.gt_normalized();
            println!("\nseed {seed}: gt ({:.3}, {:.3})", gt.0, gt.1);
            // internal relevance: recompute the decoder's bilinear scores
            let t = scn.t();
            let rel = {
                let mem = g.value(b.reweighted).clone();
                let qv = g.value(b.query_pooled).clone();
                let mut g2 = Graph::new();
                let memv = g2.constant(mem);
                // memory inside the head includes mem-PE; approximation: raw F
                let qq = g2.constant(qv);
                let dc = crate::nn::Linear::register(
                    &mut ParamStore::new(0), "x", model.config.c, model.config.c, false).unwrap();
                let _ = (memv, qq, dc);
                vec![0.0; t]
            };
            let _ = rel;
            let sal = g.value(b.saliency);
            let sal_str: Vec<String> = (0..t).map(|i| format!("{:+.2}", sal[(i, 0)])).collect();
            println!("saliency: {}", sal_str.join(" "));
            for (i, p) in preds.iter().enumerate() {
                let (s, e) = p.span();
                println!(
                    "tok {i}: span ({s:.3}, {e:.3}) conf {:.3}",
                    p.confidence
                );
            }
        }
    }
}
