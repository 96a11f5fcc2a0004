//! Event-semantic temporal alignment and semantic-guided fusion.
//!
//! A small self-attention encoder turns projected video features into a
//! temporal context; span pooling compresses that context into one vector
//! per event, which a cosine loss pulls toward the event's description
//! embedding. Fusion then runs two attention stages with distinct roles:
//! the context's self-affinity redistributes the interaction features, and
//! a second stage injects context content back into the result.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor2D;
use crate::nn::{cosine_var, AttentionSpec, Linear, Mha, PositionalEncoding, TransformerEncoder};

/// Temporal context produced by contextual reasoning (T x C).
#[derive(Debug)]
pub struct TemporalContext {
    pub features: Var,
}

/// Per-event pooled representations aligned with the scenario's prior list.
#[derive(Debug)]
pub struct EventFeatureSet {
    /// One 1xD node per event, in prior order.
    pub features: Vec<Var>,
    pub spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct ContextualReasoner {
    pos: PositionalEncoding,
    encoder: TransformerEncoder,
}

impl ContextualReasoner {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        spec: AttentionSpec,
        layers: usize,
        t_max: usize,
        zero_residual: bool,
    ) -> Result<Self> {
        Ok(Self {
            pos: PositionalEncoding::register(store, prefix, t_max, spec.model_dim)?,
            encoder: TransformerEncoder::register(
                store,
                &format!("{prefix}.enc"),
                spec,
                layers,
                zero_residual,
            )?,
        })
    }

    /// Self-attention over the clip sequence; positional encodings can be
    /// disabled, making the block permutation-equivariant.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        video: Var,
        use_pos: bool,
    ) -> Result<TemporalContext> {
        let (t, _) = g.dims(video);
        if t == 0 {
            return Err(Error::InvalidArg {
                op: "contextual_reason",
                reason: "empty clip sequence".into(),
            });
        }
        let x = if use_pos {
            self.pos.forward(g, store, video)?
        } else {
            video
        };
        Ok(TemporalContext {
            features: self.encoder.forward(g, store, x)?,
        })
    }
}

/// The shared span-pooling projection (context dim -> description dim).
#[derive(Debug, Clone)]
pub struct SpanPool {
    linear: Linear,
}

impl SpanPool {
    pub fn register(store: &mut ParamStore, prefix: &str, c: usize, d: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::register(store, prefix, c, d, false)?,
        })
    }

    /// Mean of the projected context rows inside each span (1-based,
    /// inclusive). One shared projection serves every event.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        context: &TemporalContext,
        spans: &[(usize, usize)],
    ) -> Result<EventFeatureSet> {
        let (t, _) = g.dims(context.features);
        let projected = self.linear.forward(g, store, context.features)?;
        let mut features = Vec::with_capacity(spans.len());
        for &(s, e) in spans {
            if !(1 <= s && s <= e && e <= t) {
                return Err(Error::InvalidArg {
                    op: "span_pool",
                    reason: format!("span ({s}, {e}) outside clip range 1..={t}"),
                });
            }
            let rows = g.slice_rows(projected, s - 1, e - s + 1)?;
            features.push(g.mean_rows(rows));
        }
        Ok(EventFeatureSet {
            features,
            spans: spans.to_vec(),
        })
    }
}

/// Mean cosine gap between pooled event features and their description
/// targets: `(1/M) * sum_i (1 - cos(u_i, o_i))`, in [0, 2].
pub fn semantic_loss_var(
    g: &mut Graph,
    events: &EventFeatureSet,
    targets: &[Vec<f64>],
) -> Result<Var> {
    if events.features.is_empty() {
        return Err(Error::InvalidArg {
            op: "semantic_loss",
            reason: "no events".into(),
        });
    }
    if events.features.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "semantic_loss",
            expected: format!("{} targets", events.features.len()),
            got: format!("{}", targets.len()),
        });
    }
    let m = events.features.len() as f64;
    let mut acc: Option<Var> = None;
    for (u, o) in events.features.iter().zip(targets) {
        let (_, d) = g.dims(*u);
        if d != o.len() {
            return Err(Error::ShapeMismatch {
                op: "semantic_loss",
                expected: format!("target dim {d}"),
                got: format!("{}", o.len()),
            });
        }
        let target = g.constant(
            ndarray::Array2::from_shape_vec((1, o.len()), o.clone()).expect("target shape"),
        );
        let cos = cosine_var(g, *u, target)?;
        let gap = g.neg(cos);
        let gap = g.add_const(gap, 1.0);
        acc = Some(match acc {
            Some(a) => g.add(a, gap)?,
            None => gap,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), 1.0 / m))
}

/// Two-stage semantic-guided fusion.
#[derive(Debug, Clone)]
pub struct Sge {
    redistribute: Mha,
    inject: Mha,
}

impl Sge {
    pub fn register(store: &mut ParamStore, prefix: &str, spec: AttentionSpec) -> Result<Self> {
        Ok(Self {
            redistribute: Mha::register(
                store,
                &format!("{prefix}.stage1"),
                spec,
                crate::nn::layers::MhaInit {
                    shared_qk: true,
                    identity_value: true,
                    ..Default::default()
                },
            )?,
            inject: Mha::register(
                store,
                &format!("{prefix}.stage2"),
                spec,
                crate::nn::layers::MhaInit {
                    shared_qk: true,
                    identity_value: true,
                    ..Default::default()
                },
            )?,
        })
    }

    /// Stage 1 aggregates interaction content under the context's

    /// self-affinity; stage 2 reads context content back through the
    /// stage-1 output. Returns the fused features and the stage-1 weights
    /// (which depend only on the context).
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        context: &TemporalContext,
        interaction: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let h = context.features;
        if g.dims(h) != g.dims(interaction) {
            return Err(Error::ShapeMismatch {
                op: "sge_fuse",
                expected: format!("{:?}", g.dims(h)),
                got: format!("{:?}", g.dims(interaction)),
            });
        }
        let (e1, stage1_weights) =
            self.redistribute
                .forward_with_weights(g, store, h, h, interaction)?;
        let e2 = self.inject.forward(g, store, e1, h, h)?;
        Ok((e2, stage1_weights))
    }
}

/// Value-level surface for the fusion op.
pub fn sge_fuse(
    sge: &Sge,
    store: &ParamStore,
    context: &Tensor2D,
    interaction: &Tensor2D,
) -> Result<Tensor2D> {
    let mut g = Graph::new();
    let h = g.constant(context.array().clone());
    let i = g.constant(interaction.array().clone());
    let ctx = TemporalContext { features: h };
    let (e2, _) = sge.fuse(&mut g, store, &ctx, i)?;
    Tensor2D::new(g.value(e2).clone())
}
