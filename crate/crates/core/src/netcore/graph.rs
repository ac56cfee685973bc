//! Layer-spec graphs and their reverse-mode differentiation.
//!
//! A [`Graph`] is a straight-line program over a closed set of layer
//! primitives. Every node value is a `rows x cols` matrix; rows are tokens
//! (or batch items) and may be zero. [`forward`] records a [`Tape`] that
//! holds every intermediate needed to run [`Tape::backward`] exactly.

use std::f64::consts::LN_2;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;
/// Highest angular frequency of the sinusoidal time embedding.
const TIME_EMBED_MAX_FREQ: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Caller-supplied matrix with a fixed column count.
    Input {
        slot: usize,
        cols: usize,
    },
    /// A parameter used directly as a value (1-D parameters become one row).
    Param {
        path: String,
    },
    /// `x W + b` with `W: [in, out]`, `b: [out]`.
    Affine {
        input: NodeId,
        weight: String,
        bias: String,
    },
    Silu {
        input: NodeId,
    },
    /// Per-row normalization with learned gain and shift.
    LayerNorm {
        input: NodeId,
        gain: String,
        shift: String,
    },
    /// Single-head attention where row `i` attends to rows `0..=i`.
    CausalAttention {
        input: NodeId,
        query: String,
        key: String,
        value: String,
    },
    /// One-column input of times mapped to `[sin(f_k t) | cos(f_k t)]`.
    TimeEmbedding {
        input: NodeId,
        dim: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: Axis,
    },
    /// Mean over rows, producing a single row.
    MeanPool {
        input: NodeId,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub path: String,
    pub layer: Layer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    output: NodeId,
    output_cols: usize,
    num_inputs: usize,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn output_cols(&self) -> usize {
        self.output_cols
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    /// Parameter paths referenced by any node, sorted and deduplicated.
    pub fn param_paths(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .nodes
            .iter()
            .flat_map(|n| match &n.layer {
                Layer::Param { path } => vec![path.clone()],
                Layer::Affine { weight, bias, .. } => vec![weight.clone(), bias.clone()],
                Layer::LayerNorm { gain, shift, .. } => vec![gain.clone(), shift.clone()],
                Layer::CausalAttention { query, key, value, .. } => vec![query.clone(), key.clone(), value.clone()],
                _ => vec![],
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// Incrementally assembles a [`Graph`]; node ids are only handed out for
/// nodes that already exist, so graphs are acyclic by construction.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    num_inputs: usize,
    scope: Vec<String>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn path(&self, name: &str) -> String {
        if self.scope.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.scope.join("."))
        }
    }

    /// Parameter path under the current scope.
    pub fn param_path(&self, name: &str) -> String {
        self.path(name)
    }

    pub fn push_scope(&mut self, name: &str) {
        self.scope.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn push(&mut self, name: &str, layer: Layer) -> NodeId {
        let path = self.path(name);
        self.nodes.push(Node { path, layer });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str, slot: usize, cols: usize) -> NodeId {
        self.num_inputs = self.num_inputs.max(slot + 1);
        self.push(name, Layer::Input { slot, cols })
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        let path = self.path(name);
        self.push(name, Layer::Param { path })
    }

    /// Affine layer whose parameters are `<scope>.<name>.weight` / `.bias`.
    pub fn affine(&mut self, name: &str, input: NodeId) -> NodeId {
        let base = self.path(name);
        self.push(
            name,
            Layer::Affine {
                input,
                weight: format!("{base}.weight"),
                bias: format!("{base}.bias"),
            },
        )
    }

    pub fn silu(&mut self, name: &str, input: NodeId) -> NodeId {
        self.push(name, Layer::Silu { input })
    }

    pub fn layer_norm(&mut self, name: &str, input: NodeId) -> NodeId {
        let base = self.path(name);
        self.push(
            name,
            Layer::LayerNorm {
                input,
                gain: format!("{base}.gain"),
                shift: format!("{base}.shift"),
            },
        )
    }

    pub fn causal_attention(&mut self, name: &str, input: NodeId) -> NodeId {
        let base = self.path(name);
        self.push(
            name,
            Layer::CausalAttention {
                input,
                query: format!("{base}.query"),
                key: format!("{base}.key"),
                value: format!("{base}.value"),
            },
        )
    }

    pub fn time_embedding(&mut self, name: &str, input: NodeId, dim: usize) -> NodeId {
        self.push(name, Layer::TimeEmbedding { input, dim })
    }

    pub fn concat(&mut self, name: &str, inputs: &[NodeId], axis: Axis) -> NodeId {
        self.push(
            name,
            Layer::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn mean_pool(&mut self, name: &str, input: NodeId) -> NodeId {
        self.push(name, Layer::MeanPool { input })
    }

    pub fn finish(self, output: NodeId, output_cols: usize) -> Graph {
        assert!(output < self.nodes.len(), "output node out of range");
        Graph {
            nodes: self.nodes,
            output,
            output_cols,
            num_inputs: self.num_inputs,
        }
    }
}

// ---------------------------------------------------------------------------
// Dense kernels

/// `C = op(A) op(B) + beta C` with `op(A): m x k`, `op(B): k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths are checked above against the stated extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x == 0.0 {
        LN_2
    } else if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}

fn time_freqs(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                TIME_EMBED_MAX_FREQ.powf(k as f64 / (half - 1) as f64)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Forward

#[derive(Debug)]
enum Aux {
    None,
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attn {
        q: Vec<f64>,
        k: Vec<f64>,
        v: Vec<f64>,
        p: Vec<f64>,
    },
}

/// Activation record of one [`forward`] call.
#[derive(Debug)]
pub struct Tape<'g> {
    graph: &'g Graph,
    params_id: u64,
    params_version: u64,
    values: Vec<Tensor>,
    aux: Vec<Aux>,
    input_shapes: Vec<Vec<usize>>,
}

/// Gradients of a scalar objective w.r.t. every parameter and every input.
#[derive(Debug)]
pub struct Gradients {
    pub params: ParamSet,
    pub inputs: Vec<Tensor>,
}

fn param_matrix<'p>(params: &'p ParamSet, path: &str, node: &str) -> Result<(&'p Tensor, usize, usize)> {
    let t = params
        .get(path)
        .map_err(|_| Error::shape(node, format!("missing parameter `{path}`")))?;
    match t.shape() {
        [r, c] => Ok((t, *r, *c)),
        s => Err(Error::shape(node, format!("`{path}` must be 2-D, is {s:?}"))),
    }
}

fn param_vector<'p>(params: &'p ParamSet, path: &str, node: &str, len: usize) -> Result<&'p Tensor> {
    let t = params
        .get(path)
        .map_err(|_| Error::shape(node, format!("missing parameter `{path}`")))?;
    if t.numel() != len {
        return Err(Error::shape(
            node,
            format!("`{path}` has {} values, expected {len}", t.numel()),
        ));
    }
    Ok(t)
}

/// Evaluates `graph` on `inputs`, returning the output and the tape.
pub fn forward<'g>(params: &ParamSet, graph: &'g Graph, inputs: &[Tensor]) -> Result<(Tensor, Tape<'g>)> {
    if inputs.len() < graph.num_inputs {
        return Err(Error::shape(
            "graph",
            format!("expected {} inputs, got {}", graph.num_inputs, inputs.len()),
        ));
    }
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    let mut aux = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let (value, a) = eval_node(params, node, &values, inputs)?;
        if !value.all_finite() {
            return Err(Error::NonFinite {
                layer: node.path.clone(),
            });
        }
        values.push(value);
        aux.push(a);
    }
    let out = values[graph.output].clone();
    if out.cols() != graph.output_cols {
        return Err(Error::shape(
            &graph.nodes[graph.output].path,
            format!(
                "output has {} columns, graph declares {}",
                out.cols(),
                graph.output_cols
            ),
        ));
    }
    let tape = Tape {
        graph,
        params_id: params.id(),
        params_version: params.version(),
        values,
        aux,
        input_shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    };
    Ok((out, tape))
}

fn eval_node(params: &ParamSet, node: &Node, values: &[Tensor], inputs: &[Tensor]) -> Result<(Tensor, Aux)> {
    let path = node.path.as_str();
    Ok(match &node.layer {
        Layer::Input { slot, cols } => {
            let x = &inputs[*slot];
            if x.cols() != *cols || x.shape().len() > 2 {
                return Err(Error::shape(
                    path,
                    format!("input {slot} has shape {:?}, expected [_, {cols}]", x.shape()),
                ));
            }
            (x.as_matrix(), Aux::None)
        }
        Layer::Param { path: p } => {
            let t = params
                .get(p)
                .map_err(|_| Error::shape(path, format!("missing parameter `{p}`")))?;
            (t.as_matrix(), Aux::None)
        }
        Layer::Affine { input, weight, bias } => {
            let x = &values[*input];
            let (w, fan_in, fan_out) = param_matrix(params, weight, path)?;
            if x.cols() != fan_in {
                return Err(Error::shape(
                    path,
                    format!("input has {} columns, weight expects {fan_in}", x.cols()),
                ));
            }
            let b = param_vector(params, bias, path, fan_out)?;
            let rows = x.rows();
            let mut y = Vec::with_capacity(rows * fan_out);
            for _ in 0..rows {
                y.extend_from_slice(b.data());
            }
            gemm(rows, fan_in, fan_out, x.data(), false, w.data(), false, 1.0, &mut y);
            (Tensor::matrix(rows, fan_out, y), Aux::None)
        }
        Layer::Silu { input } => {
            let x = &values[*input];
            let y = x.data().iter().map(|&v| v * sigmoid(v)).collect();
            (Tensor::matrix(x.rows(), x.cols(), y), Aux::None)
        }
        Layer::LayerNorm { input, gain, shift } => {
            let x = &values[*input];
            let (rows, cols) = (x.rows(), x.cols());
            let g = param_vector(params, gain, path, cols)?;
            let s = param_vector(params, shift, path, cols)?;
            let mut xhat = vec![0.0; rows * cols];
            let mut inv_std = vec![0.0; rows];
            let mut y = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[r] = inv;
                for c in 0..cols {
                    let h = (row[c] - mean) * inv;
                    xhat[r * cols + c] = h;
                    y[r * cols + c] = g.data()[c] * h + s.data()[c];
                }
            }
            (Tensor::matrix(rows, cols, y), Aux::Norm { xhat, inv_std })
        }
        Layer::CausalAttention {
            input,
            query,
            key,
            value,
        } => {
            let x = &values[*input];
            let (rows, cols) = (x.rows(), x.cols());
            let (wq, qi, dk) = param_matrix(params, query, path)?;
            let (wk, ki, dk2) = param_matrix(params, key, path)?;
            let (wv, vi, dv) = param_matrix(params, value, path)?;
            if qi != cols || ki != cols || vi != cols || dk != dk2 {
                return Err(Error::shape(
                    path,
                    format!("projection shapes [{qi},{dk}] [{ki},{dk2}] [{vi},{dv}] vs input width {cols}"),
                ));
            }
            let mut q = vec![0.0; rows * dk];
            let mut k = vec![0.0; rows * dk];
            let mut v = vec![0.0; rows * dv];
            gemm(rows, cols, dk, x.data(), false, wq.data(), false, 0.0, &mut q);
            gemm(rows, cols, dk, x.data(), false, wk.data(), false, 0.0, &mut k);
            gemm(rows, cols, dv, x.data(), false, wv.data(), false, 0.0, &mut v);
            let mut p = vec![0.0; rows * rows];
            gemm(rows, dk, rows, &q, false, &k, true, 0.0, &mut p);
            let scale = 1.0 / (dk as f64).sqrt();
            for i in 0..rows {
                let row = &mut p[i * rows..(i + 1) * rows];
                let mut max = f64::NEG_INFINITY;
                for s in row[..=i].iter_mut() {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in row[..=i].iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for s in row[..=i].iter_mut() {
                    *s /= z;
                }
                for s in row[i + 1..].iter_mut() {
                    *s = 0.0;
                }
            }
            let mut y = vec![0.0; rows * dv];
            gemm(rows, rows, dv, &p, false, &v, false, 0.0, &mut y);
            (Tensor::matrix(rows, dv, y), Aux::Attn { q, k, v, p })
        }
        Layer::TimeEmbedding { input, dim } => {
            let x = &values[*input];
            if x.cols() != 1 || dim % 2 != 0 || *dim == 0 {
                return Err(Error::shape(
                    path,
                    format!("needs one input column and an even width, got {} and {dim}", x.cols()),
                ));
            }
            let freqs = time_freqs(*dim);
            let half = dim / 2;
            let mut y = vec![0.0; x.rows() * dim];
            for (r, &t) in x.data().iter().enumerate() {
                for (j, f) in freqs.iter().enumerate() {
                    y[r * dim + j] = (f * t).sin();
                    y[r * dim + half + j] = (f * t).cos();
                }
            }
            (Tensor::matrix(x.rows(), *dim, y), Aux::None)
        }
        Layer::Concat { inputs: ids, axis } => {
            let parts: Vec<&Tensor> = ids.iter().map(|&i| &values[i]).collect();
            match axis {
                Axis::Rows => {
                    let cols = parts[0].cols();
                    if let Some(bad) = parts.iter().find(|t| t.cols() != cols) {
                        return Err(Error::shape(
                            path,
                            format!("row concat of {cols} and {} columns", bad.cols()),
                        ));
                    }
                    let rows = parts.iter().map(|t| t.rows()).sum();
                    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
                    (Tensor::matrix(rows, cols, data), Aux::None)
                }
                Axis::Cols => {
                    let rows = parts[0].rows();
                    if let Some(bad) = parts.iter().find(|t| t.rows() != rows) {
                        return Err(Error::shape(
                            path,
                            format!("column concat of {rows} and {} rows", bad.rows()),
                        ));
                    }
                    let cols = parts.iter().map(|t| t.cols()).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for t in &parts {
                            data.extend_from_slice(t.row(r));
                        }
                    }
                    (Tensor::matrix(rows, cols, data), Aux::None)
                }
            }
        }
        Layer::MeanPool { input } => {
            let x = &values[*input];
            let (rows, cols) = (x.rows(), x.cols());
            if rows == 0 {
                return Err(Error::shape(path, "mean-pool over zero rows"));
            }
            let mut y = vec![0.0; cols];
            for r in 0..rows {
                for (acc, v) in y.iter_mut().zip(x.row(r)) {
                    *acc += v;
                }
            }
            y.iter_mut().for_each(|v| *v /= rows as f64);
            (Tensor::matrix(1, cols, y), Aux::None)
        }
    })
}

// ---------------------------------------------------------------------------
// Backward

fn add_into(slot: &mut Option<Tensor>, rows: usize, cols: usize, data: Vec<f64>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::matrix(rows, cols, data)),
    }
}

fn add_param(grads: &mut ParamSet, path: &str, data: &[f64]) -> Result<()> {
    let t = grads.tensor_mut(path)?;
    for (a, b) in t.data_mut().iter_mut().zip(data) {
        *a += b;
    }
    Ok(())
}

impl Tape<'_> {
    pub fn output(&self) -> &Tensor {
        &self.values[self.graph.output]
    }

    /// Value computed at `node` during the forward pass.
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node]
    }

    /// Propagates `output_grad` (d objective / d output) back through the graph.
    ///
    /// `params` must be the exact parameter set (same identity and version)
    /// the tape was recorded against.
    pub fn backward(&self, params: &ParamSet, output_grad: &Tensor) -> Result<Gradients> {
        if params.id() != self.params_id || params.version() != self.params_version {
            return Err(Error::StaleTape {
                tape_id: self.params_id,
                tape_version: self.params_version,
                id: params.id(),
                version: params.version(),
            });
        }
        let out = self.output();
        if output_grad.numel() != out.numel() {
            return Err(Error::shape(
                "backward",
                format!("output grad {:?} vs output {:?}", output_grad.shape(), out.shape()),
            ));
        }
        let mut pgrads = params.zeros_like();
        let mut inputs: Vec<Tensor> = self.input_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let nodes = &self.graph.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[self.graph.output] = Some(Tensor::matrix(out.rows(), out.cols(), output_grad.data().to_vec()));

        for (id, node) in nodes.iter().enumerate().rev() {
            let Some(dy) = grads[id].take() else { continue };
            let path = node.path.as_str();
            match &node.layer {
                Layer::Input { slot, .. } => {
                    inputs[*slot].add_assign(&dy.reshape(self.input_shapes[*slot].clone())?);
                }
                Layer::Param { path: p } => add_param(&mut pgrads, p, dy.data())?,
                Layer::Affine { input, weight, bias } => {
                    let x = &self.values[*input];
                    let (w, fan_in, fan_out) = param_matrix(params, weight, path)?;
                    let rows = x.rows();
                    let mut dw = vec![0.0; fan_in * fan_out];
                    gemm(fan_in, rows, fan_out, x.data(), true, dy.data(), false, 0.0, &mut dw);
                    add_param(&mut pgrads, weight, &dw)?;
                    let mut db = vec![0.0; fan_out];
                    for r in 0..rows {
                        for (acc, g) in db.iter_mut().zip(dy.row(r)) {
                            *acc += g;
                        }
                    }
                    add_param(&mut pgrads, bias, &db)?;
                    let mut dx = vec![0.0; rows * fan_in];
                    gemm(rows, fan_out, fan_in, dy.data(), false, w.data(), true, 0.0, &mut dx);
                    add_into(&mut grads[*input], rows, fan_in, dx);
                }
                Layer::Silu { input } => {
                    let x = &self.values[*input];
                    let dx = x
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&v, &g)| {
                            let s = sigmoid(v);
                            g * (s + v * s * (1.0 - s))
                        })
                        .collect();
                    add_into(&mut grads[*input], x.rows(), x.cols(), dx);
                }
                Layer::LayerNorm { input, gain, shift } => {
                    let Aux::Norm { xhat, inv_std } = &self.aux[id] else {
                        unreachable!("layer-norm aux")
                    };
                    let (rows, cols) = (dy.rows(), dy.cols());
                    let g = param_vector(params, gain, path, cols)?;
                    let mut dg = vec![0.0; cols];
                    let mut ds = vec![0.0; cols];
                    let mut dx = vec![0.0; rows * cols];
                    let n = cols as f64;
                    for r in 0..rows {
                        let dyr = dy.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            dg[c] += dyr[c] * xh[c];
                            ds[c] += dyr[c];
                            let dxh = dyr[c] * g.data()[c];
                            sum_d += dxh;
                            sum_dx += dxh * xh[c];
                        }
                        for c in 0..cols {
                            let dxh = dyr[c] * g.data()[c];
                            dx[r * cols + c] = inv_std[r] / n * (n * dxh - sum_d - xh[c] * sum_dx);
                        }
                    }
                    add_param(&mut pgrads, gain, &dg)?;
                    add_param(&mut pgrads, shift, &ds)?;
                    add_into(&mut grads[*input], rows, cols, dx);
                }
                Layer::CausalAttention {
                    input,
                    query,
                    key,
                    value,
                } => {
                    let Aux::Attn { q, k, v, p } = &self.aux[id] else {
                        unreachable!("attention aux")
                    };
                    let x = &self.values[*input];
                    let (rows, cols) = (x.rows(), x.cols());
                    let (wq, _, dk) = param_matrix(params, query, path)?;
                    let (wk, _, _) = param_matrix(params, key, path)?;
                    let (wv, _, dv) = param_matrix(params, value, path)?;
                    let scale = 1.0 / (dk as f64).sqrt();

                    let mut d_v = vec![0.0; rows * dv];
                    gemm(rows, rows, dv, p, true, dy.data(), false, 0.0, &mut d_v);
                    let mut dp = vec![0.0; rows * rows];
                    gemm(rows, dv, rows, dy.data(), false, v, true, 0.0, &mut dp);
                    let mut ds = vec![0.0; rows * rows];
                    for i in 0..rows {
                        let pr = &p[i * rows..(i + 1) * rows];
                        let dpr = &dp[i * rows..(i + 1) * rows];
                        let dot: f64 = (0..=i).map(|j| pr[j] * dpr[j]).sum();
                        for j in 0..=i {
                            ds[i * rows + j] = pr[j] * (dpr[j] - dot) * scale;
                        }
                    }
                    let mut dq = vec![0.0; rows * dk];
                    gemm(rows, rows, dk, &ds, false, k, false, 0.0, &mut dq);
                    let mut dkk = vec![0.0; rows * dk];
                    gemm(rows, rows, dk, &ds, true, q, false, 0.0, &mut dkk);

                    let mut dw = vec![0.0; cols * dk];
                    gemm(cols, rows, dk, x.data(), true, &dq, false, 0.0, &mut dw);
                    add_param(&mut pgrads, query, &dw)?;
                    gemm(cols, rows, dk, x.data(), true, &dkk, false, 0.0, &mut dw);
                    add_param(&mut pgrads, key, &dw)?;
                    let mut dwv = vec![0.0; cols * dv];
                    gemm(cols, rows, dv, x.data(), true, &d_v, false, 0.0, &mut dwv);
                    add_param(&mut pgrads, value, &dwv)?;

                    let mut dx = vec![0.0; rows * cols];
                    gemm(rows, dk, cols, &dq, false, wq.data(), true, 0.0, &mut dx);
                    gemm(rows, dk, cols, &dkk, false, wk.data(), true, 1.0, &mut dx);
                    gemm(rows, dv, cols, &d_v, false, wv.data(), true, 1.0, &mut dx);
                    add_into(&mut grads[*input], rows, cols, dx);
                }
                Layer::TimeEmbedding { input, dim } => {
                    let x = &self.values[*input];
                    let freqs = time_freqs(*dim);
                    let half = dim / 2;
                    let dx = x
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(r, &t)| {
                            let g = dy.row(r);
                            freqs
                                .iter()
                                .enumerate()
                                .map(|(j, f)| f * ((f * t).cos() * g[j] - (f * t).sin() * g[half + j]))
                                .sum()
                        })
                        .collect();
                    add_into(&mut grads[*input], x.rows(), 1, dx);
                }
                Layer::Concat { inputs: ids, axis } => match axis {
                    Axis::Rows => {
                        let cols = dy.cols();
                        let mut offset = 0;
                        for &i in ids {
                            let r = self.values[i].rows();
                            let part = dy.data()[offset * cols..(offset + r) * cols].to_vec();
                            add_into(&mut grads[i], r, cols, part);
                            offset += r;
                        }
                    }
                    Axis::Cols => {
                        let rows = dy.rows();
                        let mut offset = 0;
                        for &i in ids {
                            let c = self.values[i].cols();
                            let mut part = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                part.extend_from_slice(&dy.row(r)[offset..offset + c]);
                            }
                            add_into(&mut grads[i], rows, c, part);
                            offset += c;
                        }
                    }
                },
                Layer::MeanPool { input } => {
                    let x = &self.values[*input];
                    let (rows, cols) = (x.rows(), x.cols());
                    let mut dx = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        dx.extend(dy.data().iter().map(|g| g / rows as f64));
                    }
                    add_into(&mut grads[*input], rows, cols, dx);
                }
            }
        }
        Ok(Gradients { params: pgrads, inputs })
    }
}
