//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A `TapeGraph` is an append-only list of nodes; node indices are issued in
//! topological order, so the backward sweep is a single reverse walk. Each
//! node stores its output value (and any cached local jacobian factors), and
//! the tape is single-use: a second backward pass on the same recording is a
//! typed error.
//!
//! The operation set is exactly what the small denoiser models need: affine
//! layers, SiLU/ReLU, layer normalization, feature concatenation, and the
//! soft-rounding weight transform used during quantization calibration.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamVector, SegmentTable};
use crate::tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Node {
    /// Leaf with no gradient (inputs, cached activations, constants).
    Const,
    /// Leaf materialized from a parameter segment.
    Param { segment: usize },
    /// `y = x · wᵀ` with `x: [B, i]`, `w: [o, i]`.
    MatMulT { x: usize, w: usize },
    /// `y = x + b` broadcast over rows, `b: [o]`.
    AddRow { x: usize, b: usize },
    Silu { x: usize },
    Relu { x: usize },
    /// Row-wise layer normalization with affine output transform.
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        inv_std: Vec<f64>,
        normalized: Vec<f64>,
    },
    /// Concatenation of two rank-2 tensors along the feature axis.
    Concat { a: usize, b: usize },
    /// Elementwise map of a leaf with a cached diagonal jacobian.
    /// Covers soft-rounding weight dequantization (exact jacobian in the
    /// rounding variable) and straight-through activation quantization.
    DiagMap { x: usize, dval_dx: Vec<f64> },
    /// `y[r, c] = s[r] * x[r, c]`, a per-row rescale of a rank-2 tensor.
    ScaleRows { x: usize, s: usize },
}

pub struct TapeGraph {
    table: Arc<SegmentTable>,
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    output: Option<usize>,
    consumed: bool,
}

impl TapeGraph {
    pub fn new(table: Arc<SegmentTable>) -> Self {
        TapeGraph {
            table,
            nodes: Vec::new(),
            values: Vec::new(),
            output: None,
            consumed: false,
        }
    }

    fn push(&mut self, node: Node, value: Tensor) -> usize {
        self.nodes.push(node);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    pub fn output_id(&self) -> Option<usize> {
        self.output
    }

    pub fn set_output(&mut self, id: usize) {
        self.output = Some(id);
    }

    pub fn output_value(&self) -> Result<&Tensor> {
        let id = self
            .output
            .ok_or_else(|| Error::invalid("tape", "no output marked"))?;
        Ok(&self.values[id])
    }

    pub fn constant(&mut self, value: Tensor) -> usize {
        self.push(Node::Const, value)
    }

    /// Materializes a named parameter segment as a tensor leaf.
    pub fn param(&mut self, params: &ParamVector, name: &str, shape: Vec<usize>) -> Result<usize> {
        if !Arc::ptr_eq(params.table(), &self.table) && *params.table() != self.table {
            return Err(Error::SegmentTableMismatch);
        }
        let segment = self.table.index_of(name)?;
        let value = params.segment_tensor(name, shape)?;
        Ok(self.push(Node::Param { segment }, value))
    }

    pub fn matmul_t(&mut self, x: usize, w: usize) -> Result<usize> {
        let (b, i) = (self.values[x].rows()?, self.values[x].cols()?);
        let (o, wi) = (self.values[w].rows()?, self.values[w].cols()?);
        if i != wi {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                expected: vec![b, wi],
                got: vec![b, i],
            });
        }
        let xs = self.values[x].data();
        let ws = self.values[w].data();
        let mut out = vec![0.0; b * o];
        for r in 0..b {
            for c in 0..o {
                let mut acc = 0.0;
                for k in 0..i {
                    acc += xs[r * i + k] * ws[c * i + k];
                }
                out[r * o + c] = acc;
            }
        }
        let value = Tensor::new(vec![b, o], out)?;
        Ok(self.push(Node::MatMulT { x, w }, value))
    }

    pub fn add_row(&mut self, x: usize, b: usize) -> Result<usize> {
        let (rows, cols) = (self.values[x].rows()?, self.values[x].cols()?);
        if self.values[b].shape() != [cols] {
            return Err(Error::ShapeMismatch {
                context: "bias add",
                expected: vec![cols],
                got: self.values[b].shape().to_vec(),
            });
        }
        let xs = self.values[x].data();
        let bs = self.values[b].data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xs[r * cols + c] + bs[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(Node::AddRow { x, b }, value))
    }

    pub fn silu(&mut self, x: usize) -> usize {
        let value = self.values[x].map(|v| v * sigmoid(v));
        self.push(Node::Silu { x }, value)
    }

    pub fn relu(&mut self, x: usize) -> usize {
        let value = self.values[x].map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Node::Relu { x }, value)
    }

    pub fn layer_norm(&mut self, x: usize, gamma: usize, beta: usize, eps: f64) -> Result<usize> {
        let (rows, cols) = (self.values[x].rows()?, self.values[x].cols()?);
        for (leaf, label) in [(gamma, "gamma"), (beta, "beta")] {
            if self.values[leaf].shape() != [cols] {
                return Err(Error::ShapeMismatch {
                    context: if label == "gamma" {
                        "layer norm gamma"
                    } else {
                        "layer norm beta"
                    },
                    expected: vec![cols],
                    got: self.values[leaf].shape().to_vec(),
                });
            }
        }
        let xs = self.values[x].data();
        let gs = self.values[gamma].data();
        let bs = self.values[beta].data();
        let mut inv_std = vec![0.0; rows];
        let mut normalized = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let n = (row[c] - mean) * is;
                normalized[r * cols + c] = n;
                out[r * cols + c] = gs[c] * n + bs[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(
            Node::LayerNorm {
                x,
                gamma,
                beta,
                inv_std,
                normalized,
            },
            value,
        ))
    }

    pub fn concat(&mut self, a: usize, b: usize) -> Result<usize> {
        let (rows, ca) = (self.values[a].rows()?, self.values[a].cols()?);
        let (rb, cb) = (self.values[b].rows()?, self.values[b].cols()?);
        if rows != rb {
            return Err(Error::ShapeMismatch {
                context: "concat",
                expected: vec![rows, cb],
                got: vec![rb, cb],
            });
        }
        let xs = self.values[a].data();
        let ys = self.values[b].data();
        let cols = ca + cb;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            out[r * cols..r * cols + ca].copy_from_slice(&xs[r * ca..(r + 1) * ca]);
            out[r * cols + ca..(r + 1) * cols].copy_from_slice(&ys[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(Node::Concat { a, b }, value))
    }

    /// Elementwise transform of `x` given precomputed outputs and the
    /// diagonal jacobian d(out)/d(x). The caller owns the transform's math;
    /// the tape only routes adjoints through the cached diagonal.
    pub fn diag_map(&mut self, x: usize, out: Tensor, dval_dx: Vec<f64>) -> Result<usize> {
        self.values[x].check_same_shape(&out, "diagonal map")?;
        if dval_dx.len() != out.len() {
            return Err(Error::ShapeMismatch {
                context: "diagonal map jacobian",
                expected: vec![out.len()],
                got: vec![dval_dx.len()],
            });
        }
        Ok(self.push(Node::DiagMap { x, dval_dx }, out))
    }

    pub fn scale_rows(&mut self, x: usize, s: usize) -> Result<usize> {
        let (rows, cols) = (self.values[x].rows()?, self.values[x].cols()?);
        if self.values[s].shape() != [rows] {
            return Err(Error::ShapeMismatch {
                context: "row scale",
                expected: vec![rows],
                got: self.values[s].shape().to_vec(),
            });
        }
        let xs = self.values[x].data();
        let ss = self.values[s].data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = ss[r] * xs[r * cols + c];
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(Node::ScaleRows { x, s }, value))
    }

    /// Accumulates `dL/dθ` for `L = <seed, output>`, consuming the tape.
    pub fn backward(&mut self, seed: &Tensor) -> Result<ParamVector> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let out_id = self
            .output
            .ok_or_else(|| Error::invalid("tape", "no output marked"))?;
        self.values[out_id].check_same_shape(seed, "backward seed")?;

        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[out_id] = Some(seed.clone());
        let mut grad = ParamVector::zeros(Arc::clone(&self.table));

        for id in (0..self.nodes.len()).rev() {
            let adj = match adjoints[id].take() {
                Some(a) => a,
                None => continue,
            };
            match &self.nodes[id] {
                Node::Const => {}
                Node::Param { segment } => {
                    let seg = self.table.segment(*segment).clone();
                    let dst = &mut grad.data_mut()[seg.offset..seg.offset + seg.len];
                    for (d, a) in dst.iter_mut().zip(adj.data()) {
                        *d += a;
                    }
                }
                Node::MatMulT { x, w } => {
                    let (x, w) = (*x, *w);
                    let (b, i) = (self.values[x].rows()?, self.values[x].cols()?);
                    let o = self.values[w].rows()?;
                    let xs = self.values[x].data();
                    let ws = self.values[w].data();
                    let a = adj.data();
                    let mut dx = vec![0.0; b * i];
                    let mut dw = vec![0.0; o * i];
                    for r in 0..b {
                        for c in 0..o {
                            let g = a[r * o + c];
                            if g == 0.0 {
                                continue;
                            }
                            for k in 0..i {
                                dx[r * i + k] += g * ws[c * i + k];
                                dw[c * i + k] += g * xs[r * i + k];
                            }
                        }
                    }
                    accumulate(&mut adjoints[x], Tensor::new(vec![b, i], dx)?)?;
                    accumulate(&mut adjoints[w], Tensor::new(vec![o, i], dw)?)?;
                }
                Node::AddRow { x, b } => {
                    let (x, b) = (*x, *b);
                    let cols = self.values[b].len();
                    let mut db = vec![0.0; cols];
                    for (idx, a) in adj.data().iter().enumerate() {
                        db[idx % cols] += a;
                    }
                    accumulate(&mut adjoints[x], adj.clone())?;
                    accumulate(&mut adjoints[b], Tensor::new(vec![cols], db)?)?;
                }
                Node::Silu { x } => {
                    let x = *x;
                    let dx = self.values[x].zip(&adj, |v, a| {
                        let s = sigmoid(v);
                        a * s * (1.0 + v * (1.0 - s))
                    })?;
                    accumulate(&mut adjoints[x], dx)?;
                }
                Node::Relu { x } => {
                    let x = *x;
                    let dx = self.values[x].zip(&adj, |v, a| if v > 0.0 { a } else { 0.0 })?;
                    accumulate(&mut adjoints[x], dx)?;
                }
                Node::LayerNorm {
                    x,
                    gamma,
                    beta,
                    inv_std,
                    normalized,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (rows, cols) = (self.values[x].rows()?, self.values[x].cols()?);
                    let gs = self.values[gamma].data();
                    let a = adj.data();
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let off = r * cols;
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for c in 0..cols {
                            let dn = a[off + c] * gs[c];
                            mean_dn += dn;
                            mean_dn_n += dn * normalized[off + c];
                            dgamma[c] += a[off + c] * normalized[off + c];
                            dbeta[c] += a[off + c];
                        }
                        mean_dn /= cols as f64;
                        mean_dn_n /= cols as f64;
                        for c in 0..cols {
                            let dn = a[off + c] * gs[c];
                            dx[off + c] =
                                inv_std[r] * (dn - mean_dn - normalized[off + c] * mean_dn_n);
                        }
                    }
                    accumulate(&mut adjoints[x], Tensor::new(vec![rows, cols], dx)?)?;
                    accumulate(&mut adjoints[gamma], Tensor::new(vec![cols], dgamma)?)?;
                    accumulate(&mut adjoints[beta], Tensor::new(vec![cols], dbeta)?)?;
                }
                Node::Concat { a, b } => {
                    let (a, b) = (*a, *b);
                    let rows = self.values[a].rows()?;
                    let ca = self.values[a].cols()?;
                    let cb = self.values[b].cols()?;
                    let cols = ca + cb;
                    let s = adj.data();
                    let mut da = vec![0.0; rows * ca];
                    let mut db = vec![0.0; rows * cb];
                    for r in 0..rows {
                        da[r * ca..(r + 1) * ca].copy_from_slice(&s[r * cols..r * cols + ca]);
                        db[r * cb..(r + 1) * cb]
                            .copy_from_slice(&s[r * cols + ca..(r + 1) * cols]);
                    }
                    accumulate(&mut adjoints[a], Tensor::new(vec![rows, ca], da)?)?;
                    accumulate(&mut adjoints[b], Tensor::new(vec![rows, cb], db)?)?;
                }
                Node::DiagMap { x, dval_dx } => {
                    let x = *x;
                    let shape = self.values[x].shape().to_vec();
                    let data: Vec<f64> = adj
                        .data()
                        .iter()
                        .zip(dval_dx)
                        .map(|(a, d)| a * d)
                        .collect();
                    accumulate(&mut adjoints[x], Tensor::new(shape, data)?)?;
                }
                Node::ScaleRows { x, s } => {
                    let (x, s) = (*x, *s);
                    let (rows, cols) = (self.values[x].rows()?, self.values[x].cols()?);
                    let xs = self.values[x].data();
                    let ss = self.values[s].data();
                    let a = adj.data();
                    let mut dx = vec![0.0; rows * cols];
                    let mut ds = vec![0.0; rows];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = a[r * cols + c] * ss[r];
                            ds[r] += a[r * cols + c] * xs[r * cols + c];
                        }
                    }
                    accumulate(&mut adjoints[x], Tensor::new(vec![rows, cols], dx)?)?;
                    accumulate(&mut adjoints[s], Tensor::new(vec![rows], ds)?)?;
                }
            }
        }
        Ok(grad)
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(delta),
        Some(t) => {
            t.check_same_shape(&delta, "adjoint accumulation")?;
            for (a, d) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
    }
    Ok(())
}
