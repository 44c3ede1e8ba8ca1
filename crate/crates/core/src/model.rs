//! Small denoiser networks: architecture description, parameter layout,
//! taped forward passes, and per-sample gradients.
//!
//! A network is a flat list of named layers applied to the concatenation of
//! the data features and a sinusoidal timestep embedding. Layer parameters
//! live in a `ParamVector` whose segment names are derived from layer names
//! (`dense0.w`, `dense0.b`, ...), so checkpoints are self-describing.
//!
//! Forward recording is parameterized by a `LeafProvider`, which decides how
//! each parameter leaf enters the tape. The plain provider reads trainable
//! leaves from a parameter vector; the quantization code substitutes
//! soft-rounded weights without this module knowing about rounding.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ad::TapeGraph;
use crate::error::{Error, Result};
use crate::params::{ParamVector, SegmentTable};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Silu,
    Relu,
    LayerNorm { dim: usize },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub time_embed_dim: usize,
    pub layers: Vec<Layer>,
}

/// Sinusoidal embedding of an integer timestep, transformer-style: half the
/// dimensions are sines, half cosines, over a geometric frequency ladder.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000.0_f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

impl Architecture {
    /// A plain MLP denoiser: `hidden` dense+activation blocks of the given
    /// width, then a dense projection back to the input dimension.
    pub fn mlp(
        input_dim: usize,
        width: usize,
        hidden: usize,
        time_embed_dim: usize,
        layer_norm: bool,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("architecture", "needs at least one hidden layer"));
        }
        if time_embed_dim % 2 != 0 {
            return Err(Error::invalid("architecture", "time embedding dim must be even"));
        }
        let mut layers = Vec::new();
        let mut inputs = input_dim + time_embed_dim;
        for i in 0..hidden {
            layers.push(Layer {
                name: format!("dense{i}"),
                kind: LayerKind::Dense {
                    inputs,
                    outputs: width,
                },
            });
            if layer_norm {
                layers.push(Layer {
                    name: format!("norm{i}"),
                    kind: LayerKind::LayerNorm { dim: width },
                });
            }
            layers.push(Layer {
                name: format!("act{i}"),
                kind: LayerKind::Silu,
            });
            inputs = width;
        }
        layers.push(Layer {
            name: format!("dense{hidden}"),
            kind: LayerKind::Dense {
                inputs,
                outputs: input_dim,
            },
        });
        let arch = Architecture {
            input_dim,
            time_embed_dim,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Checks that feature dimensions chain correctly through the layers.
    pub fn validate(&self) -> Result<()> {
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("architecture", "time embedding dim must be even"));
        }
        let mut dim = self.input_dim + self.time_embed_dim;
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Dense { inputs, outputs } => {
                    if inputs != dim {
                        return Err(Error::invalid(
                            "architecture",
                            format!("layer `{}` expects {} features, gets {dim}", layer.name, inputs),
                        ));
                    }
                    dim = outputs;
                }
                LayerKind::LayerNorm { dim: d } => {
                    if d != dim {
                        return Err(Error::invalid(
                            "architecture",
                            format!("layer `{}` normalizes {d} features, gets {dim}", layer.name),
                        ));
                    }
                }
                LayerKind::Silu | LayerKind::Relu => {}
            }
        }
        Ok(())
    }

    /// Feature dimension entering each layer; the last entry is the output
    /// dimension of the whole network.
    pub fn feature_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len() + 1);
        let mut dim = self.input_dim + self.time_embed_dim;
        dims.push(dim);
        for layer in &self.layers {
            if let LayerKind::Dense { outputs, .. } = layer.kind {
                dim = outputs;
            }
            dims.push(dim);
        }
        dims
    }

    pub fn output_dim(&self) -> usize {
        *self.feature_dims().last().unwrap()
    }

    /// Indices of dense layers, the quantizable part of the network.
    pub fn dense_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Dense { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::invalid("layer name", format!("unknown layer `{name}`")))
    }

    pub fn param_table(&self) -> Result<Arc<SegmentTable>> {
        let mut entries = Vec::new();
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Dense { inputs, outputs } => {
                    entries.push((format!("{}.w", layer.name), inputs * outputs));
                    entries.push((format!("{}.b", layer.name), outputs));
                }
                LayerKind::LayerNorm { dim } => {
                    entries.push((format!("{}.g", layer.name), dim));
                    entries.push((format!("{}.b", layer.name), dim));
                }
                LayerKind::Silu | LayerKind::Relu => {}
            }
        }
        SegmentTable::new(&entries)
    }

    /// Random initialization: dense weights scaled by 1/sqrt(fan_in), biases
    /// zero, normalization gains one.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamVector> {
        let table = self.param_table()?;
        let mut params = ParamVector::zeros(table);
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Dense { inputs, .. } => {
                    let scale = 1.0 / (inputs as f64).sqrt();
                    let w = params.segment_slice_mut(&format!("{}.w", layer.name))?;
                    for v in w {
                        let z: f64 = StandardNormal.sample(rng);
                        *v = z * scale;
                    }
                }
                LayerKind::LayerNorm { .. } => {
                    let g = params.segment_slice_mut(&format!("{}.g", layer.name))?;
                    for v in g {
                        *v = 1.0;
                    }
                }
                LayerKind::Silu | LayerKind::Relu => {}
            }
        }
        Ok(params)
    }

    /// Records the layers in `span` onto `tape`, starting from `input_id`.
    /// Returns the node holding the span's output.
    pub fn record_span(
        &self,
        tape: &mut TapeGraph,
        input_id: usize,
        span: Range<usize>,
        leaves: &mut dyn LeafProvider,
    ) -> Result<usize> {
        let mut h = input_id;
        for idx in span {
            let layer = &self.layers[idx];
            match layer.kind {
                LayerKind::Dense { inputs, outputs } => {
                    h = leaves.pre_dense(tape, &layer.name, h)?;
                    let w = leaves.dense_weight(tape, &layer.name, [outputs, inputs])?;
                    let b = leaves.dense_bias(tape, &layer.name, outputs)?;
                    let prod = tape.matmul_t(h, w)?;
                    h = tape.add_row(prod, b)?;
                }
                LayerKind::Silu => h = tape.silu(h),
                LayerKind::Relu => h = tape.relu(h),
                LayerKind::LayerNorm { dim } => {
                    let (g, b) = leaves.layer_norm_params(tape, &layer.name, dim)?;
                    h = tape.layer_norm(h, g, b, LAYER_NORM_EPS)?;
                }
            }
        }
        Ok(h)
    }

    /// Records a full forward pass `x, t -> prediction` with trainable
    /// leaves drawn from `params`. The tape's output is set.
    pub fn forward_record(
        &self,
        params: &ParamVector,
        x: &Tensor,
        ts: &[usize],
    ) -> Result<TapeGraph> {
        let mut leaves = FpLeaves { params };
        self.forward_record_with(params.table().clone(), x, ts, &mut leaves)
    }

    /// Full forward pass with a caller-supplied leaf provider. `table` is the
    /// space gradients will be taken in.
    pub fn forward_record_with(
        &self,
        table: Arc<SegmentTable>,
        x: &Tensor,
        ts: &[usize],
        leaves: &mut dyn LeafProvider,
    ) -> Result<TapeGraph> {
        let rows = x.rows()?;
        if x.cols()? != self.input_dim {
            return Err(Error::ShapeMismatch {
                context: "model input",
                expected: vec![rows, self.input_dim],
                got: x.shape().to_vec(),
            });
        }
        if ts.len() != rows {
            return Err(Error::ShapeMismatch {
                context: "model timesteps",
                expected: vec![rows],
                got: vec![ts.len()],
            });
        }
        let mut tape = TapeGraph::new(table);
        let x_id = tape.constant(x.clone());
        let h = if self.time_embed_dim > 0 {
            let mut emb = Vec::with_capacity(rows * self.time_embed_dim);
            for &t in ts {
                emb.extend(time_embedding(t, self.time_embed_dim));
            }
            let emb_id = tape.constant(Tensor::new(vec![rows, self.time_embed_dim], emb)?);
            tape.concat(x_id, emb_id)?
        } else {
            x_id
        };
        let out = self.record_span(&mut tape, h, 0..self.layers.len(), leaves)?;
        tape.set_output(out);
        Ok(tape)
    }

    /// Forward pass without keeping the tape.
    pub fn forward(&self, params: &ParamVector, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let tape = self.forward_record(params, x, ts)?;
        Ok(tape.output_value()?.clone())
    }
}

/// Decides how parameter leaves are materialized during recording.
pub trait LeafProvider {
    fn dense_weight(
        &mut self,
        tape: &mut TapeGraph,
        layer: &str,
        shape: [usize; 2],
    ) -> Result<usize>;

    fn dense_bias(&mut self, tape: &mut TapeGraph, layer: &str, len: usize) -> Result<usize>;

    fn layer_norm_params(
        &mut self,
        tape: &mut TapeGraph,
        layer: &str,
        dim: usize,
    ) -> Result<(usize, usize)>;

    /// Hook on the activation entering a dense layer. Identity by default.
    fn pre_dense(&mut self, _tape: &mut TapeGraph, _layer: &str, x_id: usize) -> Result<usize> {
        Ok(x_id)
    }
}

/// All leaves read from one parameter vector as trainable tape parameters.
pub struct FpLeaves<'a> {
    pub params: &'a ParamVector,
}

impl LeafProvider for FpLeaves<'_> {
    fn dense_weight(
        &mut self,
        tape: &mut TapeGraph,
        layer: &str,
        shape: [usize; 2],
    ) -> Result<usize> {
        tape.param(self.params, &format!("{layer}.w"), shape.to_vec())
    }

    fn dense_bias(&mut self, tape: &mut TapeGraph, layer: &str, len: usize) -> Result<usize> {
        tape.param(self.params, &format!("{layer}.b"), vec![len])
    }

    fn layer_norm_params(
        &mut self,
        tape: &mut TapeGraph,
        layer: &str,
        dim: usize,
    ) -> Result<(usize, usize)> {
        let g = tape.param(self.params, &format!("{layer}.g"), vec![dim])?;
        let b = tape.param(self.params, &format!("{layer}.b"), vec![dim])?;
        Ok((g, b))
    }
}

/// Gradient of `L = sum_b seed_b . output_b` for each sample separately.
/// `seed_for(i, out_i)` maps a sample's output row to its seed row.
pub fn per_sample_gradients(
    arch: &Architecture,
    params: &ParamVector,
    xs: &Tensor,
    ts: &[usize],
    mut seed_for: impl FnMut(usize, &Tensor) -> Result<Tensor>,
) -> Result<Vec<ParamVector>> {
    let rows = xs.rows()?;
    let mut grads = Vec::with_capacity(rows);
    for i in 0..rows {
        let x = Tensor::row(xs.row_slice(i)?);
        let mut tape = arch.forward_record(params, &x, &ts[i..i + 1])?;
        let out = tape.output_value()?.clone();
        let seed = seed_for(i, &out)?;
        grads.push(tape.backward(&seed)?);
    }
    Ok(grads)
}
