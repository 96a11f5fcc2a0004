//! Clip-to-clip relational alignment: similarity matrices, the relation
//! consistency loss, and convolutional refinement of the similarity map.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Init, ParamStore};
use crate::nn::tensor::Tensor2D;
use crate::nn::{Activation, Mlp, COS_EPS};
use std::io::Write;
use std::path::Path;

/// Square matrix of pairwise clip relations.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Tensor2D,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor2D) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::ShapeMismatch {
                op: "SimilarityMatrix::new",
                expected: "square matrix".into(),
                got: format!("({}, {})", values.rows(), values.cols()),
            });
        }
        Ok(Self { values })
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn tensor(&self) -> &Tensor2D {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor2D {
        self.values
    }

    /// Plain numeric CSV, one matrix row per line.
    pub fn to_csv(&self) -> String {
        let a = self.values.array();
        let mut out = String::new();
        for row in a.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Pairwise cosine of the rows of `features` as a graph node; shares the
/// epsilon rule of [`crate::nn::cosine_sim`], so degenerate rows never
/// produce NaN.
pub fn similarity_matrix_var(g: &mut Graph, features: Var) -> Result<Var> {
    let (t, _) = g.dims(features);
    if t < 2 {
        return Err(Error::InvalidArg {
            op: "similarity_matrix",
            reason: format!("need at least 2 rows, got {t}"),
        });
    }
    let et = g.transpose(features);
    let dots = g.matmul(features, et)?;
    let norms = g.row_norms(features);
    let nt = g.transpose(norms);
    let outer = g.matmul(norms, nt)?;
    let denom = g.clamp_min(outer, COS_EPS);
    g.div(dots, denom)
}

/// Visual similarity matrix of temporal features (differentiable route is
/// [`similarity_matrix_var`]).
pub fn similarity_matrix(features: &Tensor2D) -> Result<SimilarityMatrix> {
    let mut g = Graph::new();
    let e = g.constant(features.array().clone());
    let s = similarity_matrix_var(&mut g, e)?;
    SimilarityMatrix::new(Tensor2D::new(g.value(s).clone())?)
}

/// Caption-side relation matrix. Pure supervision: identical math to
/// [`similarity_matrix`] but never part of a gradient path.
pub fn textual_relation_matrix(captions: &Tensor2D) -> Result<SimilarityMatrix> {
    similarity_matrix(captions)
}

/// Mean squared elementwise gap between the visual and textual relation
/// structures; `relation` enters as a constant so gradients shape only the
/// visual side.
pub fn relation_loss_var(g: &mut Graph, s: Var, relation: &SimilarityMatrix) -> Result<Var> {
    let (sr, sc) = g.dims(s);
    let t = relation.size();
    if (sr, sc) != (t, t) {
        return Err(Error::ShapeMismatch {
            op: "relation_loss",
            expected: format!("({t}, {t})"),
            got: format!("({sr}, {sc})"),
        });
    }
    let r = g.constant(relation.tensor().array().clone());
    let diff = g.sub(s, r)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

pub fn relation_loss(s: &SimilarityMatrix, r: &SimilarityMatrix) -> Result<f64> {
    let mut g = Graph::new();
    let sv = g.constant(s.tensor().array().clone());
    let loss = relation_loss_var(&mut g, sv, r)?;
    Ok(g.scalar(loss))
}

/// Convolutional residual refinement of the similarity map plus row-softmax
/// feature reweighting.
///
/// The refine network is conv3x3 (1 -> `CHANNELS`) -> ReLU -> conv3x3
/// (`CHANNELS` -> 1) over the similarity grid with zero same-padding. The
/// closing convolution (and its bias) start at zero, so refinement is an
/// exact no-op at initialization.
#[derive(Debug, Clone)]
pub struct Sora {
    prefix: String,
    mlp: Mlp,
}

pub const SORA_CHANNELS: usize = 8;

impl Sora {
    pub fn register(store: &mut ParamStore, prefix: &str, c_dim: usize) -> Result<Self> {
        for ch in 0..SORA_CHANNELS {
            store.register(&format!("{prefix}.conv1.k{ch}"), 3, 3, Init::ScaledNormal)?;
            store.register(&format!("{prefix}.conv2.k{ch}"), 3, 3, Init::Zeros)?;
        }
        store.register(&format!("{prefix}.conv1.b"), 1, SORA_CHANNELS, Init::Zeros)?;
        store.register(&format!("{prefix}.conv2.b"), 1, 1, Init::Zeros)?;
        let mlp = Mlp::register(
            store,
            &format!("{prefix}.mlp"),
            &[c_dim, c_dim, c_dim],
            Activation::Silu,
        )?;
        Ok(Self {
            prefix: prefix.to_string(),
            mlp,
        })
    }

    /// `refined = s + phi(s)`.
    pub fn refine(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<Var> {
        let b1 = g.param(store, &format!("{}.conv1.b", self.prefix))?;
        let b2 = g.param(store, &format!("{}.conv2.b", self.prefix))?;
        let mut out: Option<Var> = None;
        for ch in 0..SORA_CHANNELS {
            let k1 = g.param(store, &format!("{}.conv1.k{ch}", self.prefix))?;
            let h = g.conv3x3(s, k1)?;
            let bias = g.slice_cols(b1, ch, 1)?;
            let h = g.add_scalar(h, bias)?;
            let h = g.relu(h);
            let k2 = g.param(store, &format!("{}.conv2.k{ch}", self.prefix))?;
            let contrib = g.conv3x3(h, k2)?;
            out = Some(match out {
                Some(acc) => g.add(acc, contrib)?,
                None => contrib,
            });
        }
        let phi = g.add_scalar(out.expect("channels > 0"), b2)?;
        g.add(s, phi)
    }

    /// Row-softmax of the refined map applied to a pointwise MLP of the
    /// temporal features. Returns `(features, weights)`.
    pub fn reweight(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        refined: Var,
        features: Var,
    ) -> Result<(Var, Var)> {
        let (t, _) = g.dims(refined);
        let (fr, _) = g.dims(features);
        if t != fr {
            return Err(Error::ShapeMismatch {
                op: "Sora::reweight",
                expected: format!("{t} feature rows"),
                got: format!("{fr}"),
            });
        }
        let weights = g.softmax_rows(refined);
        let mapped = self.mlp.forward(g, store, features)?;
        let out = g.matmul(weights, mapped)?;
        Ok((out, weights))
    }
}

/// Value-level surface of the refinement op: returns the refined matrix and
/// the reweighted features.
pub fn sora_refine(
    sora: &Sora,
    store: &ParamStore,
    s: &SimilarityMatrix,
    features: &Tensor2D,
) -> Result<(SimilarityMatrix, Tensor2D)> {
    let mut g = Graph::new();
    let sv = g.constant(s.tensor().array().clone());
    let fv = g.constant(features.array().clone());
    let refined = sora.refine(&mut g, store, sv)?;
    let (out, _) = sora.reweight(&mut g, store, refined, fv)?;
    Ok((
        SimilarityMatrix::new(Tensor2D::new(g.value(refined).clone())?)?,
        Tensor2D::new(g.value(out).clone())?,
    ))
}
