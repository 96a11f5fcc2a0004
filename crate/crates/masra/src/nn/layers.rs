//! Differentiable building blocks: projections, attention, encoders.
//!
//! Each block registers its parameters under a dotted prefix at
//! construction and builds graph nodes when applied. Blocks hold no
//! tensor state of their own, so a [`ParamStore`] can be shared
//! read-only across concurrent forward passes.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Init, ParamStore};
use crate::nn::tensor::Tensor2D;
use ndarray::Array2;

/// Epsilon used in every cosine denominator; keeps degenerate inputs finite.
pub const COS_EPS: f64 = 1e-8;

/// Init gain for residual-branch output projections: branches start an
/// order of magnitude below their trunk so per-row identity survives the
/// early epochs.
pub const RESIDUAL_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Silu => g.silu(x),
        }
    }
}

/// Affine map `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let w_init = if zero_init {
            Init::Zeros
        } else {
            Init::ScaledNormal
        };
        store.register(&format!("{prefix}.w"), in_dim, out_dim, w_init)?;
        store.register(&format!("{prefix}.b"), 1, out_dim, Init::Zeros)?;
        Ok(Self {
            prefix: prefix.to_string(),
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, c) = g.dims(x);
        if c != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "Linear::forward",
                expected: format!("cols {} for {}", self.in_dim, self.prefix),
                got: format!("cols {c}"),
            });
        }
        let w = g.param(store, &format!("{}.w", self.prefix))?;
        let b = g.param(store, &format!("{}.b", self.prefix))?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

/// Stack of affine layers with a shared hidden activation; the final layer
/// is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    /// `dims` lists layer widths from input to output, e.g. `[64, 64, 32]`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArg {
                op: "Mlp::register",
                reason: "need at least input and output widths".into(),
            });
        }
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(Linear::register(
                store,
                &format!("{prefix}.l{i}"),
                w[0],
                w[1],
                false,
            )?);
        }
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("non-empty").in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = self.activation.apply(g, h);
            }
        }
        Ok(h)
    }
}

/// Learnable per-feature normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    prefix: String,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        store.register(&format!("{prefix}.gamma"), 1, dim, Init::Ones)?;
        store.register(&format!("{prefix}.beta"), 1, dim, Init::Zeros)?;
        Ok(Self {
            prefix: prefix.to_string(),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.prefix))?;
        let beta = g.param(store, &format!("{}.beta", self.prefix))?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Head layout for multi-head attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub model_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl AttentionSpec {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || model_dim % num_heads != 0 {
            return Err(Error::InvalidArg {
                op: "AttentionSpec::new",
                reason: format!("{num_heads} heads do not divide model dim {model_dim}"),
            });
        }
        Ok(Self {
            model_dim,
            num_heads,
            head_dim: model_dim / num_heads,
        })
    }
}

/// Initialization style for one attention block. All projections remain
/// ordinary trainable parameters; only their starting values differ.
#[derive(Debug, Clone, Copy)]
pub struct MhaInit {
    /// Zero the output projection (exact-identity residual branches).
    pub zero_output: bool,
    /// Start the key projection at the query projection's values, making
    /// the logits a Gram matrix at init: rows attend by content similarity
    /// instead of mixing globally.
    pub shared_qk: bool,
    /// Gain on the output projection's init; residual call sites use a
    /// small gain so the trunk dominates early.
    pub output_gain: f64,
    /// Start the value and output projections at the identity, so the
    /// attended output stays in the input content space (content-carrying
    /// stages whose output feeds similarity computations).
    pub identity_value: bool,
}

impl Default for MhaInit {
    fn default() -> Self {
        Self {
            zero_output: false,
            shared_qk: false,
            output_gain: 1.0,
            identity_value: false,
        }
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Debug, Clone)]
pub struct Mha {
    prefix: String,
    pub spec: AttentionSpec,
}

impl Mha {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        spec: AttentionSpec,
        init: MhaInit,
    ) -> Result<Self> {
        let c = spec.model_dim;
        for name in ["wq", "wk", "wv"] {
            store.register(&format!("{prefix}.{name}"), c, c, Init::ScaledNormal)?;
        }
        if init.shared_qk {
            let wq = store.get(&format!("{prefix}.wq"))?.clone();
            store.set(&format!("{prefix}.wk"), wq)?;
        }
        let wo_init = if init.zero_output {
            Init::Zeros
        } else {
            Init::ScaledNormalGain(init.output_gain)
        };
        store.register(&format!("{prefix}.wo"), c, c, wo_init)?;
        if init.identity_value && !init.zero_output {
            store.set(&format!("{prefix}.wv"), Array2::eye(c))?;
            store.set(&format!("{prefix}.wo"), Array2::eye(c))?;
        }
        for name in ["bq", "bk", "bv", "bo"] {
            store.register(&format!("{prefix}.{name}"), 1, c, Init::Zeros)?;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            spec,
        })
    }

    fn project(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        which: &str,
    ) -> Result<Var> {
        let w = g.param(store, &format!("{}.w{which}", self.prefix))?;
        let b = g.param(store, &format!("{}.b{which}", self.prefix))?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    /// Returns the attended output and the per-head row-stochastic weight
    /// matrices (`q_rows x k_rows` each).
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Vec<Var>)> {
        self.forward_biased(g, store, q, k, v, None)
    }

    /// Attention with an optional additive logit bias (`q_rows x k_rows`,
    /// shared across heads), applied before the row softmax.
    pub fn forward_biased(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        logit_bias: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        let c = self.spec.model_dim;
        for (name, x) in [("q", q), ("k", k), ("v", v)] {
            let (_, xc) = g.dims(x);
            if xc != c {
                return Err(Error::ShapeMismatch {
                    op: "Mha::forward",
                    expected: format!("{name} cols {c}"),
                    got: format!("cols {xc}"),
                });
            }
        }
        let (kr, _) = g.dims(k);
        let (vr, _) = g.dims(v);
        if kr != vr {
            return Err(Error::ShapeMismatch {
                op: "Mha::forward",
                expected: format!("key rows {kr}"),
                got: format!("value rows {vr}"),
            });
        }
        let qp = self.project(g, store, q, "q")?;
        let kp = self.project(g, store, k, "k")?;
        let vp = self.project(g, store, v, "v")?;
        let dh = self.spec.head_dim;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.spec.num_heads);
        let mut head_weights = Vec::with_capacity(self.spec.num_heads);
        for h in 0..self.spec.num_heads {
            let qh = g.slice_cols(qp, h * dh, dh)?;
            let kh = g.slice_cols(kp, h * dh, dh)?;
            let vh = g.slice_cols(vp, h * dh, dh)?;
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt)?;
            let mut logits = g.scale(logits, scale);
            if let Some(bias) = logit_bias {
                logits = g.add(logits, bias)?;
            }
            let weights = g.softmax_rows(logits);
            head_weights.push(weights);
            head_outs.push(g.matmul(weights, vh)?);
        }
        let merged = g.concat_cols(&head_outs)?;
        let wo = g.param(store, &format!("{}.wo", self.prefix))?;
        let bo = g.param(store, &format!("{}.bo", self.prefix))?;
        let out = g.matmul(merged, wo)?;
        let out = g.add_row(out, bo)?;
        Ok((out, head_weights))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, q, k, v)?.0)
    }
}

/// Pre-normalization transformer encoder: per layer
/// `x += Attn(LN(x))`, `x += FFN(LN(x))`, with a closing LayerNorm after
/// the final layer. Zero layers short-circuit to the identity.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    final_ln: Option<LayerNorm>,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Mha,
    ln2: LayerNorm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
pub struct Ffn {
    lin1: Linear,
    lin2: Linear,
}

impl Ffn {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        zero_output: bool,
    ) -> Result<Self> {
        let lin1 = Linear::register(store, &format!("{prefix}.in"), dim, hidden, false)?;
        let lin2 = Linear::register(store, &format!("{prefix}.out"), hidden, dim, zero_output)?;
        if !zero_output {
            // Residual feed-forward branches start small (see Mha gain).
            let name = format!("{prefix}.out.w");
            let scaled = store.get(&name)?.mapv(|v| v * RESIDUAL_GAIN);
            store.set(&name, scaled)?;
        }
        Ok(Self { lin1, lin2 })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.lin1.forward(g, store, x)?;
        let h = g.silu(h);
        self.lin2.forward(g, store, h)
    }
}

impl TransformerEncoder {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        spec: AttentionSpec,
        layers: usize,
        zero_residual: bool,
    ) -> Result<Self> {
        let c = spec.model_dim;
        let mut built = Vec::with_capacity(layers);
        for i in 0..layers {
            let p = format!("{prefix}.l{i}");
            built.push(EncoderLayer {
                ln1: LayerNorm::register(store, &format!("{p}.ln1"), c)?,
                attn: Mha::register(
                    store,
                    &format!("{p}.attn"),
                    spec,
                    MhaInit {
                        zero_output: zero_residual,
                        shared_qk: true,
                        output_gain: RESIDUAL_GAIN,
                        ..MhaInit::default()
                    },
                )?,
                ln2: LayerNorm::register(store, &format!("{p}.ln2"), c)?,
                ffn: Ffn::register(store, &format!("{p}.ffn"), c, 2 * c, zero_residual)?,
            });
        }
        let final_ln = if layers > 0 {
            Some(LayerNorm::register(store, &format!("{prefix}.ln_out"), c)?)
        } else {
            None
        };
        Ok(Self {
            layers: built,
            final_ln,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let n1 = layer.ln1.forward(g, store, h)?;
            let a = layer.attn.forward(g, store, n1, n1, n1)?;
            h = g.add(h, a)?;
            let n2 = layer.ln2.forward(g, store, h)?;
            let f = layer.ffn.forward(g, store, n2)?;
            h = g.add(h, f)?;
        }
        match &self.final_ln {
            Some(ln) => ln.forward(g, store, h),
            None => Ok(h),
        }
    }
}

/// Learned positional table; `forward` adds the first `T` rows to `x`.
#[derive(Debug, Clone)]
pub struct PositionalEncoding {
    name: String,
    max_len: usize,
}

impl PositionalEncoding {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        max_len: usize,
        dim: usize,
    ) -> Result<Self> {
        let name = format!("{prefix}.pos");
        store.register(&name, max_len, dim, Init::Normal(0.05))?;
        Ok(Self { name, max_len })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (t, _) = g.dims(x);
        if t > self.max_len {
            return Err(Error::InvalidArg {
                op: "PositionalEncoding::forward",
                reason: format!("sequence length {t} exceeds table size {}", self.max_len),
            });
        }
        let table = g.param(store, &self.name)?;
        let rows = g.slice_rows(table, 0, t)?;
        g.add(x, rows)
    }
}

// ---- value-level op surface ------------------------------------------------

/// Run an MLP on a plain matrix.
pub fn mlp_forward(mlp: &Mlp, store: &ParamStore, x: &Tensor2D) -> Result<Tensor2D> {
    let mut g = Graph::new();
    let xv = g.constant(x.array().clone());
    let y = mlp.forward(&mut g, store, xv)?;
    Tensor2D::new(g.value(y).clone())
}

/// Run multi-head attention on plain matrices.
pub fn multi_head_attention(
    mha: &Mha,
    store: &ParamStore,
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
) -> Result<Tensor2D> {
    let mut g = Graph::new();
    let qv = g.constant(q.array().clone());
    let kv = g.constant(k.array().clone());
    let vv = g.constant(v.array().clone());
    let y = mha.forward(&mut g, store, qv, kv, vv)?;
    Tensor2D::new(g.value(y).clone())
}

/// Run a transformer encoder on a plain matrix.
pub fn transformer_encode(
    enc: &TransformerEncoder,
    store: &ParamStore,
    x: &Tensor2D,
) -> Result<Tensor2D> {
    let mut g = Graph::new();
    let xv = g.constant(x.array().clone());
    let y = enc.forward(&mut g, store, xv)?;
    Tensor2D::new(g.value(y).clone())
}

/// Column-wise arithmetic mean of the rows.
pub fn mean_pool(x: &Tensor2D) -> Vec<f64> {
    let a = x.array();
    let n = a.nrows() as f64;
    (0..a.ncols()).map(|j| a.column(j).sum() / n).collect()
}

/// Cosine similarity with an epsilon floor in the denominator: degenerate
/// zero-norm inputs yield 0, never NaN.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            expected: format!("len {}", a.len()),
            got: format!("len {}", b.len()),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidArg {
            op: "cosine_sim",
            reason: "empty vectors".into(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(dot / (na * nb).max(COS_EPS))
}

/// Graph-side cosine between two 1xC nodes, same epsilon rule as
/// [`cosine_sim`].
pub fn cosine_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let prod = g.mul(a, b)?;
    let dot = g.sum_all(prod);
    let na = g.row_norms(a);
    let nb = g.row_norms(b);
    let nn = g.mul(na, nb)?;
    let denom = g.clamp_min(nn, COS_EPS);
    g.div(dot, denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn identity_attention(store: &mut ParamStore, prefix: &str, dim: usize) -> Mha {
        let spec = AttentionSpec::new(dim, 1).unwrap();
        let mha = Mha::register(store, prefix, spec, MhaInit::default()).unwrap();
        let eye = Array2::eye(dim);
        for w in ["wq", "wk", "wv", "wo"] {
            store.set(&format!("{prefix}.{w}"), eye.clone()).unwrap();
        }
        mha
    }

    #[test]
    fn mlp_zero_weights_give_zero_output() {
        let mut store = ParamStore::new(0);
        let mlp = Mlp::register(&mut store, "m", &[3, 4, 2], Activation::Silu).unwrap();
        store.set("m.l0.w", Array2::zeros((3, 4))).unwrap();
        store.set("m.l1.w", Array2::zeros((4, 2))).unwrap();
        let x = Tensor2D::new(array![[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]]).unwrap();
        let y = mlp_forward(&mlp, &store, &x).unwrap();
        assert!(y.array().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_identity_weights_linear_activation_is_identity() {
        let mut store = ParamStore::new(0);
        let mlp = Mlp::register(&mut store, "m", &[3, 3, 3], Activation::Identity).unwrap();
        store.set("m.l0.w", Array2::eye(3)).unwrap();
        store.set("m.l1.w", Array2::eye(3)).unwrap();
        let x = Tensor2D::new(array![[1.0, -2.0, 3.0], [0.5, 0.25, -1.0]]).unwrap();
        let y = mlp_forward(&mlp, &store, &x).unwrap();
        assert_eq!(y.array(), x.array());
    }

    #[test]
    fn mlp_small_case_matches_hand_evaluation() {
        // Single hidden step evaluated by explicit loops, SiLU activation.
        let mut store = ParamStore::new(0);
        let mlp = Mlp::register(&mut store, "m", &[3, 2, 2], Activation::Silu).unwrap();
        let w0 = array![[0.5, -0.3], [0.2, 0.8], [-0.1, 0.4]];
        let b0 = array![[0.1, -0.2]];
        let w1 = array![[1.0, 0.5], [-0.5, 0.25]];
        let b1 = array![[0.0, 0.3]];
        store.set("m.l0.w", w0.clone()).unwrap();
        store.set("m.l0.b", b0.clone()).unwrap();
        store.set("m.l1.w", w1.clone()).unwrap();
        store.set("m.l1.b", b1.clone()).unwrap();
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]];
        let y = mlp_forward(&mlp, &store, &Tensor2D::new(x.clone()).unwrap()).unwrap();

        let silu = |v: f64| v / (1.0 + (-v).exp());
        for r in 0..2 {
            let mut hidden = [0.0f64; 2];
            for (j, h) in hidden.iter_mut().enumerate() {
                let mut acc = b0[(0, j)];
                for i in 0..3 {
                    acc += x[(r, i)] * w0[(i, j)];
                }
                *h = silu(acc);
            }
            for j in 0..2 {
                let mut acc = b1[(0, j)];
                for (i, h) in hidden.iter().enumerate() {
                    acc += h * w1[(i, j)];
                }
                let got = y.get(r, j);
                assert!((got - acc).abs() < 1e-12, "({r},{j}): {got} vs {acc}");
            }
        }
    }

    #[test]
    fn attention_uniform_weights_for_identical_keys() {
        let mut store = ParamStore::new(0);
        let mha = identity_attention(&mut store, "a", 2);
        let mut g = Graph::new();
        let q = g.constant(array![[0.3, -0.7]]);
        let k = g.constant(array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        let v = g.constant(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let (_, weights) = mha.forward_with_weights(&mut g, &store, q, k, v).unwrap();
        for w in g.value(weights[0]).iter() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_zero_values_give_zero_output() {
        let mut store = ParamStore::new(1);
        let spec = AttentionSpec::new(4, 2).unwrap();
        let mha = Mha::register(&mut store, "a", spec, MhaInit::default()).unwrap();
        let q = Tensor2D::new(Array2::from_elem((3, 4), 0.5)).unwrap();
        let k = Tensor2D::new(Array2::from_elem((5, 4), -0.25)).unwrap();
        let v = Tensor2D::new(Array2::zeros((5, 4))).unwrap();
        let y = multi_head_attention(&mha, &store, &q, &k, &v).unwrap();
        assert!(y.array().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn attention_weights_match_brute_force_softmax() {
        let mut store = ParamStore::new(0);
        let mha = identity_attention(&mut store, "a", 2);
        let qm = array![[0.5, -1.0], [2.0, 0.1]];
        let km = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let mut g = Graph::new();
        let q = g.constant(qm.clone());
        let k = g.constant(km.clone());
        let v = g.constant(km.clone());
        let (_, weights) = mha.forward_with_weights(&mut g, &store, q, k, v).unwrap();
        let got = g.value(weights[0]);
        let scale = 1.0 / (2.0f64).sqrt();
        for i in 0..2 {
            let logits: Vec<f64> = (0..3)
                .map(|j| scale * (qm[(i, 0)] * km[(j, 0)] + qm[(i, 1)] * km[(j, 1)]))
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..3 {
                let expect = logits[j].exp() / z;
                assert!(
                    (got[(i, j)] - expect).abs() < 1e-12,
                    "({i},{j}): {} vs {expect}",
                    got[(i, j)]
                );
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut store = ParamStore::new(5);
        let spec = AttentionSpec::new(8, 4).unwrap();
        let mha = Mha::register(&mut store, "a", spec, MhaInit::default()).unwrap();
        let mut g = Graph::new();
        let q = g.constant(Array2::from_shape_fn((6, 8), |(i, j)| {
            ((i * 7 + j * 3) as f64 * 0.37).sin()
        }));
        let k = g.constant(Array2::from_shape_fn((5, 8), |(i, j)| {
            ((i * 5 + j * 11) as f64 * 0.23).cos()
        }));
        let (_, weights) = mha.forward_with_weights(&mut g, &store, q, k, k).unwrap();
        assert_eq!(weights.len(), 4);
        for w in &weights {
            for row in g.value(*w).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn mismatched_key_value_rows_error() {
        let mut store = ParamStore::new(0);
        let spec = AttentionSpec::new(4, 2).unwrap();
        let mha = Mha::register(&mut store, "a", spec, MhaInit::default()).unwrap();
        let q = Tensor2D::new(Array2::zeros((2, 4))).unwrap();
        let k = Tensor2D::new(Array2::zeros((3, 4))).unwrap();
        let v = Tensor2D::new(Array2::zeros((4, 4))).unwrap();
        assert!(multi_head_attention(&mha, &store, &q, &k, &v).is_err());
    }

    #[test]
    fn encoder_zero_layers_is_identity() {
        let mut store = ParamStore::new(0);
        let spec = AttentionSpec::new(8, 4).unwrap();
        let enc = TransformerEncoder::register(&mut store, "e", spec, 0, false).unwrap();
        let x = Tensor2D::new(Array2::from_shape_fn((4, 8), |(i, j)| (i + j) as f64)).unwrap();
        let y = transformer_encode(&enc, &store, &x).unwrap();
        assert_eq!(y.array(), x.array());
    }

    #[test]
    fn encoder_zero_residuals_reduce_to_final_norm() {
        let mut store = ParamStore::new(3);
        let spec = AttentionSpec::new(8, 4).unwrap();
        let enc = TransformerEncoder::register(&mut store, "e", spec, 2, true).unwrap();
        let x = Tensor2D::new(Array2::from_shape_fn((4, 8), |(i, j)| {
            ((i * 13 + j) as f64 * 0.71).sin()
        }))
        .unwrap();
        let y = transformer_encode(&enc, &store, &x).unwrap();
        // With both residual branches zeroed, the trunk reaches the closing
        // LayerNorm untouched.
        let mut g = Graph::new();
        let xv = g.constant(x.array().clone());
        let ln = LayerNorm {
            prefix: "e.ln_out".into(),
        };
        let expect = ln.forward(&mut g, &store, xv).unwrap();
        assert_eq!(y.array(), g.value(expect));
    }

    #[test]
    fn encoder_is_deterministic() {
        let run = || {
            let mut store = ParamStore::new(11);
            let spec = AttentionSpec::new(8, 2).unwrap();
            let enc = TransformerEncoder::register(&mut store, "e", spec, 2, false).unwrap();
            let x =
                Tensor2D::new(Array2::from_shape_fn((4, 8), |(i, j)| {
                    ((i * 3 + j * 7) as f64).cos()
                }))
                .unwrap();
            transformer_encode(&enc, &store, &x).unwrap()
        };
        let a = run();
        let b = run();
        // Bit-identical across runs.
        assert!(a
            .array()
            .iter()
            .zip(b.array().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mean_pool_single_row_is_that_row() {
        let x = Tensor2D::new(array![[3.0, -1.0, 2.5]]).unwrap();
        assert_eq!(mean_pool(&x), vec![3.0, -1.0, 2.5]);
    }

    #[test]
    fn mean_pool_symmetry_case() {
        let x = Tensor2D::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(mean_pool(&x), vec![0.5, 0.5]);
    }

    #[test]
    fn mean_pool_matches_direct_summation() {
        let x = Tensor2D::new(Array2::from_shape_fn((5, 3), |(i, j)| {
            ((i * 31 + j * 17) as f64 * 0.13).sin()
        }))
        .unwrap();
        let got = mean_pool(&x);
        for j in 0..3 {
            let mut s = 0.0;
            for i in 0..5 {
                s += x.get(i, j);
            }
            assert!((got[j] - s / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_pool_is_linear() {
        let a = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64) - (j as f64) * 0.5);
        let b = Array2::from_shape_fn((4, 3), |(i, j)| ((i * j) as f64 * 0.3).cos());
        let (alpha, beta) = (1.7, -0.4);
        let lhs = mean_pool(&Tensor2D::new(&a * alpha + &b * beta).unwrap());
        let pa = mean_pool(&Tensor2D::new(a).unwrap());
        let pb = mean_pool(&Tensor2D::new(b).unwrap());
        for j in 0..3 {
            assert!((lhs[j] - (alpha * pa[j] + beta * pb[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_basic_cases() {
        assert!((cosine_sim(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_returns_zero() {
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_scale_invariance_and_bounds() {
        let a = [0.3, -0.8, 0.5];
        let b = [-0.2, 0.9, 1.4];
        let c1 = cosine_sim(&a, &b).unwrap();
        let scaled: Vec<f64> = a.iter().map(|x| x * 37.5).collect();
        let c2 = cosine_sim(&scaled, &b).unwrap();
        assert!((c1 - c2).abs() < 1e-12);
        assert!(c1.abs() <= 1.0 + 1e-9);
    }

    #[test]
    fn cosine_var_matches_value_level() {
        let a = vec![0.4, -1.1, 0.7];
        let b = vec![2.0, 0.3, -0.6];
        let mut g = Graph::new();
        let av = g.constant(Array2::from_shape_vec((1, 3), a.clone()).unwrap());
        let bv = g.constant(Array2::from_shape_vec((1, 3), b.clone()).unwrap());
        let c = cosine_var(&mut g, av, bv).unwrap();
        assert!((g.scalar(c) - cosine_sim(&a, &b).unwrap()).abs() < 1e-15);
    }
}
