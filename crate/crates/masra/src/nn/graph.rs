//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape of nodes built during a forward pass. Every op
//! validates shapes eagerly and records a backward closure; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every named parameter leaf.
//!
//! The tape is rebuilt per forward pass. Matrices are small at desk scale,
//! so nodes store owned values and closures capture only node indices.

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use ndarray::{Array2, Axis};
use std::collections::BTreeMap;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Named parameter gradients, ordered for deterministic reduction.
pub type GradMap = BTreeMap<String, Array2<f64>>;

type BackFn = Box<dyn Fn(&Graph, &Array2<f64>) -> Vec<(Var, Array2<f64>)>>;

struct Node {
    value: Array2<f64>,
    back: Option<BackFn>,
    param: Option<String>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    pub by_param: GradMap,
    node_grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the scalar root with respect to an arbitrary node,
    /// `None` if the node does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.node_grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_cache: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value,
            back,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let d = self.nodes[v.0].value.dim();
        (d.0, d.1)
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, None)
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Leaf bound to a named parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.param_cache.get(name) {
            return Ok(*v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, None);
        self.nodes[v.0].param = Some(name.to_string());
        self.param_cache.insert(name.to_string(), v);
        Ok(v)
    }

    /// Value copy with no gradient path (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::ShapeMismatch {
                op,
                expected: format!("{:?}", self.dims(a)),
                got: format!("{:?}", self.dims(b)),
            });
        }
        Ok(())
    }

    // ---- arithmetic -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(
            v,
            Some(Box::new(move |_, g| {
                vec![(a, g.clone()), (b, g.clone())]
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(
            v,
            Some(Box::new(move |_, g| vec![(a, g.clone()), (b, -g)])),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(
            v,
            Some(Box::new(move |gr, g| {
                vec![(a, g * gr.value(b)), (b, g * gr.value(a))]
            })),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        let v = self.value(a) / self.value(b);
        Ok(self.push(
            v,
            Some(Box::new(move |gr, g| {
                let bv = gr.value(b);
                let da = g / bv;
                let db = -(g * gr.value(a)) / (bv * bv);
                vec![(a, da), (b, db)]
            })),
        ))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, Some(Box::new(move |_, g| vec![(a, -g)])))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Some(Box::new(move |_, g| vec![(a, g * c)])))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Some(Box::new(move |_, g| vec![(a, g.clone())])))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ac) = self.dims(a);
        let (br, _) = self.dims(b);
        if ac != br {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: format!("inner dim {ac}"),
                got: format!("{:?} x {:?}", self.dims(a), self.dims(b)),
            });
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(
            v,
            Some(Box::new(move |gr, g| {
                let da = g.dot(&gr.value(b).t());
                let db = gr.value(a).t().dot(g);
                vec![(a, da), (b, db)]
            })),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Some(Box::new(move |_, g| vec![(a, g.t().to_owned())])))
    }

    /// Broadcast-add a 1xC row (bias) to every row of an TxC matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, xc) = self.dims(x);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != xc {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                expected: format!("(1, {xc})"),
                got: format!("({rr}, {rc})"),
            });
        }
        let v = self.value(x) + self.value(row);
        Ok(self.push(
            v,
            Some(Box::new(move |_, g| {
                let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![(x, g.clone()), (row, drow)]
            })),
        ))
    }

    /// Broadcast-add a 1x1 scalar node to every entry.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sr, sc) = self.dims(s);
        if (sr, sc) != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "add_scalar",
                expected: "(1, 1)".into(),
                got: format!("({sr}, {sc})"),
            });
        }
        let v = self.value(x) + self.scalar(s);
        Ok(self.push(
            v,
            Some(Box::new(move |_, g| {
                let ds = Array2::from_elem((1, 1), g.sum());
                vec![(x, g.clone()), (s, ds)]
            })),
        ))
    }

    // ---- elementwise nonlinearities -------------------------------------

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            v,
            Some(Box::new(move |gr, g| {
                let mask = gr.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(a, g * &mask)]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid_f);
        let out_idx = self.nodes.len();
        self.push(
            v,
            Some(Box::new(move |gr, g| {
                let y = &gr.nodes[out_idx].value;
                vec![(a, g * &(y * &y.mapv(|s| 1.0 - s)))]
            })),
        )
    }

    /// Smooth gate `x * sigmoid(x)`; the default hidden activation.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid_f(x));
        self.push(
            v,
            Some(Box::new(move |gr, g| {
                let d = gr.value(a).mapv(|x| {
                    let s = sigmoid_f(x);
                    s * (1.0 + x * (1.0 - s))
                });
                vec![(a, g * &d)]
            })),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(
            v,
            Some(Box::new(move |gr, g| {
                let s = gr.value(a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![(a, g * &s)]
            })),
        )
    }

    /// max(x, c); zero subgradient on the clamped side.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(c));
        self.push(
            v,
            Some(Box::new(move |gr, g| {
                let mask = gr.value(a).mapv(|x| if x > c { 1.0 } else { 0.0 });
                vec![(a, g * &mask)]
            })),
        )
    }

    /// Clamp into [lo, hi]; gradient passes strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(
            v,
            Some(Box::new(move |gr, g| {
                let mask = gr
                    .value(a)
                    .mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                vec![(a, g * &mask)]
            })),
        )
    }

    /// Elementwise maximum; ties route the gradient to the first argument.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("max_elem", a, b)?;
        let v = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.max(y));
        Ok(self.push(
            v,
            Some(Box::new(move |gr, g| {
                let av = gr.value(a);
                let bv = gr.value(b);
                let mask = ndarray::Zip::from(av)
                    .and(bv)
                    .map_collect(|&x, &y| if x >= y { 1.0 } else { 0.0 });
                let da = g * &mask;
                let db = g * &mask.mapv(|m| 1.0 - m);
                vec![(a, da), (b, db)]
            })),
        ))
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("min_elem", a, b)?;
        let v = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.min(y));
        Ok(self.push(
            v,
            Some(Box::new(move |gr, g| {
                let av = gr.value(a);
                let bv = gr.value(b);
                let mask = ndarray::Zip::from(av)
                    .and(bv)
                    .map_collect(|&x, &y| if x <= y { 1.0 } else { 0.0 });
                let da = g * &mask;
                let db = g * &mask.mapv(|m| 1.0 - m);
                vec![(a, da), (b, db)]
            })),
        ))
    }

    // ---- reductions and normalizations -----------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let out_idx = self.nodes.len();
        self.push(
            y,
            Some(Box::new(move |gr, g| {
                let y = &gr.nodes[out_idx].value;
                let mut dx = g * y;
                for (mut drow, (grow, yrow)) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(g.rows().into_iter().zip(y.rows()))
                {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d -= dot * yv;
                    }
                }
                vec![(a, dx)]
            })),
        )
    }

    /// Per-row layer normalization with learnable 1xC gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, c) = self.dims(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let d = self.dims(v);
            if d != (1, c) {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    expected: format!("(1, {c}) for {name}"),
                    got: format!("{d:?}"),
                });
            }
        }
        let xv = self.value(x);
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(istd);
            row.mapv_inplace(|v| (v - mean) * istd);
        }
        let y = &xhat * self.value(gamma) + self.value(beta);
        let xhat_node = self.constant(xhat);
        Ok(self.push(
            y,
            Some(Box::new(move |gr, g| {
                let xh = gr.value(xhat_node);
                let gam = gr.value(gamma);
                let dgamma = (g * xh).sum_axis(Axis(0)).insert_axis(Axis(0));
                let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dxhat = g * gam;
                let mut dx = dxhat.clone();
                for (i, mut drow) in dx.rows_mut().into_iter().enumerate() {
                    let dh = dxhat.row(i);
                    let xr = xh.row(i);
                    let mean_dh = dh.sum() / c as f64;
                    let mean_dh_xh =
                        dh.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for (j, d) in drow.iter_mut().enumerate() {
                        *d = inv_std[i] * (dh[j] - mean_dh - xr[j] * mean_dh_xh);
                    }
                }
                vec![(x, dx), (gamma, dgamma), (beta, dbeta)]
            })),
        ))
    }

    /// Column-wise mean over rows: TxC -> 1xC.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, _) = self.dims(a);
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(
            v,
            Some(Box::new(move |gr, g| {
                let (rows, cols) = gr.dims(a);
                let mut dx = Array2::zeros((rows, cols));
                for mut row in dx.rows_mut() {
                    row.assign(&(g.row(0).mapv(|v| v / r as f64)));
                }
                vec![(a, dx)]
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(
            v,
            Some(Box::new(move |gr, g| {
                let dx = Array2::from_elem(gr.dims(a), g[(0, 0)]);
                vec![(a, dx)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let n = (r * c) as f64;
        let v = Array2::from_elem((1, 1), self.value(a).sum() / n);
        self.push(
            v,
            Some(Box::new(move |gr, g| {
                let dx = Array2::from_elem(gr.dims(a), g[(0, 0)] / n);
                vec![(a, dx)]
            })),
        )
    }

    /// Per-row L2 norms: TxC -> Tx1.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            v[(i, 0)] = row.iter().map(|e| e * e).sum::<f64>().sqrt();
        }
        let out_idx = self.nodes.len();
        self.push(
            v,
            Some(Box::new(move |gr, g| {
                let x = gr.value(a);
                let n = &gr.nodes[out_idx].value;
                let mut dx = x.clone();
                for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let denom = n[(i, 0)].max(1e-12);
                    let gi = g[(i, 0)];
                    row.mapv_inplace(|e| gi * e / denom);
                }
                vec![(a, dx)]
            })),
        )
    }

    // ---- structural ops --------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArg {
                op: "concat_rows",
                reason: "no parts".into(),
            });
        }
        let c = self.dims(parts[0]).1;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    expected: format!("cols {c}"),
                    got: format!("cols {pc}"),
                });
            }
            total += pr;
        }
        let mut v = Array2::zeros((total, c));
        let mut off = 0;
        for &p in parts {
            let (pr, _) = self.dims(p);
            v.slice_mut(ndarray::s![off..off + pr, ..])
                .assign(self.value(p));
            off += pr;
        }
        let parts: Vec<Var> = parts.to_vec();
        Ok(self.push(
            v,
            Some(Box::new(move |gr, g| {
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in &parts {
                    let (pr, _) = gr.dims(p);
                    out.push((p, g.slice(ndarray::s![off..off + pr, ..]).to_owned()));
                    off += pr;
                }
                out
            })),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArg {
                op: "concat_cols",
                reason: "no parts".into(),
            });
        }
        let r = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    expected: format!("rows {r}"),
                    got: format!("rows {pr}"),
                });
            }
            total += pc;
        }
        let mut v = Array2::zeros((r, total));
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.dims(p);
            v.slice_mut(ndarray::s![.., off..off + pc])
                .assign(self.value(p));
            off += pc;
        }
        let parts: Vec<Var> = parts.to_vec();
        Ok(self.push(
            v,
            Some(Box::new(move |gr, g| {
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in &parts {
                    let (_, pc) = gr.dims(p);
                    out.push((p, g.slice(ndarray::s![.., off..off + pc]).to_owned()));
                    off += pc;
                }
                out
            })),
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, _) = self.dims(a);
        if start + len > r || len == 0 {
            return Err(Error::InvalidArg {
                op: "slice_rows",
                reason: format!("range {start}..{} out of {r} rows", start + len),
            });
        }
        let v = self
            .value(a)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        Ok(self.push(
            v,
            Some(Box::new(move |gr, g| {
                let mut dx = Array2::zeros(gr.dims(a));
                dx.slice_mut(ndarray::s![start..start + len, ..]).assign(g);
                vec![(a, dx)]
            })),
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, c) = self.dims(a);
        if start + len > c || len == 0 {
            return Err(Error::InvalidArg {
                op: "slice_cols",
                reason: format!("range {start}..{} out of {c} cols", start + len),
            });
        }
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        Ok(self.push(
            v,
            Some(Box::new(move |gr, g| {
                let mut dx = Array2::zeros(gr.dims(a));
                dx.slice_mut(ndarray::s![.., start..start + len]).assign(g);
                vec![(a, dx)]
            })),
        ))
    }

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArg {
                op: "gather_rows",
                reason: format!("index {bad} out of {r} rows"),
            });
        }
        if indices.is_empty() {
            return Err(Error::InvalidArg {
                op: "gather_rows",
                reason: "empty index set".into(),
            });
        }
        let mut v = Array2::zeros((indices.len(), c));
        for (k, &i) in indices.iter().enumerate() {
            v.row_mut(k).assign(&self.value(a).row(i));
        }
        let indices: Vec<usize> = indices.to_vec();
        Ok(self.push(
            v,
            Some(Box::new(move |gr, g| {
                let mut dx = Array2::zeros(gr.dims(a));
                for (k, &i) in indices.iter().enumerate() {
                    let mut row = dx.row_mut(i);
                    row += &g.row(k);
                }
                vec![(a, dx)]
            })),
        ))
    }

    /// 3x3 convolution over a single-channel grid with zero same-padding.
    pub fn conv3x3(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (kr, kc) = self.dims(kernel);
        if (kr, kc) != (3, 3) {
            return Err(Error::ShapeMismatch {
                op: "conv3x3",
                expected: "(3, 3)".into(),
                got: format!("({kr}, {kc})"),
            });
        }
        let (h, w) = self.dims(x);
        let xv = self.value(x);
        let kv = self.value(kernel);
        let mut y = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for di in 0..3usize {
                    for dj in 0..3usize {
                        let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            acc += xv[(ii as usize, jj as usize)] * kv[(di, dj)];
                        }
                    }
                }
                y[(i, j)] = acc;
            }
        }
        Ok(self.push(
            y,
            Some(Box::new(move |gr, g| {
                let (h, w) = gr.dims(x);
                let xv = gr.value(x);
                let kv = gr.value(kernel);
                let mut dx = Array2::zeros((h, w));
                let mut dk = Array2::zeros((3, 3));
                for i in 0..h {
                    for j in 0..w {
                        let go = g[(i, j)];
                        for di in 0..3usize {
                            for dj in 0..3usize {
                                let (ii, jj) =
                                    (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    let (iu, ju) = (ii as usize, jj as usize);
                                    dx[(iu, ju)] += go * kv[(di, dj)];
                                    dk[(di, dj)] += go * xv[(iu, ju)];
                                }
                            }
                        }
                    }
                }
                vec![(x, dx), (kernel, dk)]
            })),
        ))
    }

    // ---- fused loss heads -------------------------------------------------

    /// Sum of numerically stable binary cross-entropies between per-entry
    /// logits (nx1) and fixed labels.
    pub fn bce_with_logits_sum(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let (n, c) = self.dims(logits);
        if c != 1 || n != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits_sum",
                expected: format!("({}, 1) logits", labels.len()),
                got: format!("({n}, {c})"),
            });
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let l = lv[(i, 0)];
            total += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        }
        let labels: Vec<f64> = labels.to_vec();
        Ok(self.push(
            Array2::from_elem((1, 1), total),
            Some(Box::new(move |gr, g| {
                let lv = gr.value(logits);
                let mut dl = Array2::zeros((labels.len(), 1));
                for (i, &y) in labels.iter().enumerate() {
                    dl[(i, 0)] = g[(0, 0)] * (sigmoid_f(lv[(i, 0)]) - y);
                }
                vec![(logits, dl)]
            })),
        ))
    }

    /// Mean margin ranking hinge over all (inside, outside) score pairs:
    /// mean of max(0, margin - s_i + s_j). Scores are Tx1.
    pub fn hinge_pairs(
        &mut self,
        scores: Var,
        inside: &[usize],
        outside: &[usize],
        margin: f64,
    ) -> Result<Var> {
        let (t, c) = self.dims(scores);
        if c != 1 {
            return Err(Error::ShapeMismatch {
                op: "hinge_pairs",
                expected: "(T, 1)".into(),
                got: format!("({t}, {c})"),
            });
        }
        if inside.is_empty() || outside.is_empty() {
            return Err(Error::InvalidArg {
                op: "hinge_pairs",
                reason: "need at least one inside and one outside index".into(),
            });
        }
        if inside.iter().chain(outside.iter()).any(|&i| i >= t) {
            return Err(Error::InvalidArg {
                op: "hinge_pairs",
                reason: "index out of range".into(),
            });
        }
        let sv = self.value(scores);
        let n_pairs = (inside.len() * outside.len()) as f64;
        let mut total = 0.0;
        for &i in inside {
            for &j in outside {
                total += (margin - sv[(i, 0)] + sv[(j, 0)]).max(0.0);
            }
        }
        let inside: Vec<usize> = inside.to_vec();
        let outside: Vec<usize> = outside.to_vec();
        Ok(self.push(
            Array2::from_elem((1, 1), total / n_pairs),
            Some(Box::new(move |gr, g| {
                let sv = gr.value(scores);
                let (t, _) = gr.dims(scores);
                let mut ds = Array2::zeros((t, 1));
                let w = g[(0, 0)] / n_pairs;
                for &i in &inside {
                    for &j in &outside {
                        if margin - sv[(i, 0)] + sv[(j, 0)] > 0.0 {
                            ds[(i, 0)] -= w;
                            ds[(j, 0)] += w;
                        }
                    }
                }
                vec![(scores, ds)]
            })),
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar (1x1) root. Returns gradients for every
    /// named parameter reachable from the root plus per-node gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.dims(root) != (1, 1) {
            return Err(Error::InvalidArg {
                op: "backward",
                reason: format!("root must be scalar, got {:?}", self.dims(root)),
            });
        }
        let mut node_grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        node_grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            if let Some(back) = &self.nodes[i].back {
                for (parent, contrib) in back(self, &g) {
                    debug_assert!(parent.0 < i, "tape order violated");
                    match &mut node_grads[parent.0] {
                        Some(existing) => *existing += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            node_grads[i] = Some(g);
        }
        let mut by_param = GradMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &node_grads[i]) {
                by_param
                    .entry(name.clone())
                    .and_modify(|acc| *acc += g)
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(Gradients {
            by_param,
            node_grads,
        })
    }
}

#[inline]
fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
