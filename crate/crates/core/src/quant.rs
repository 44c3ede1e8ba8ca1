//! Uniform affine weight quantization with learnable soft rounding and
//! block-wise reconstruction.
//!
//! Each dense layer gets a min-max scale and a tensor of rounding scores V.
//! The rectified sigmoid h(V) interpolates between rounding down and up;
//! during block calibration it is a free variable pushed toward binary by an
//! annealed regularizer, and freezing a block thresholds it permanently.
//! Reconstruction is weighted: the calibration objective is the
//! weight-vector-weighted mean of per-sample squared block errors, with
//! block inputs taken from the already-quantized prefix and targets from the
//! full-precision network.
//!
//! The integer grid index of every weight is fixed by the initialization
//! scale. The optional joint scale optimization moves scales in log space
//! while that grid stays put, so a scale change never re-rounds a weight.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ad::{sigmoid, TapeGraph};
use crate::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::{time_embedding, Architecture, LayerKind, LeafProvider};
use crate::optim::Adam;
use crate::params::{ParamVector, SegmentTable};
use crate::rng::{choose_without_replacement, stream};
use crate::tensor::Tensor;

pub const ZETA: f64 = 1.1;
pub const GAMMA: f64 = -0.1;
/// Stretch of the rectified sigmoid, kept as a literal: the runtime
/// difference `ZETA - GAMMA` rounds one ulp above 1.2, which moves the
/// rounding midpoint h(0) off exactly 0.5.
pub const STRETCH: f64 = 1.2;

/// Rows per forward chunk when caching activations.
const ACTIVATION_CHUNK: usize = 512;

/// Rectified sigmoid: `clip(sigmoid(v) * STRETCH + GAMMA, 0, 1)`.
pub fn soft_round(v: f64) -> f64 {
    (sigmoid(v) * STRETCH + GAMMA).clamp(0.0, 1.0)
}

/// Derivative of `soft_round`, zero where the rectification clips.
pub fn soft_round_deriv(v: f64) -> f64 {
    let s = sigmoid(v);
    let raw = s * STRETCH + GAMMA;
    if raw <= 0.0 || raw >= 1.0 {
        0.0
    } else {
        STRETCH * s * (1.0 - s)
    }
}

/// Score whose soft rounding equals `rest`, the fractional grid offset.
/// Defined for `rest` in [0, 1]; the argument of the logarithm stays in
/// [0.09, 11] there, so the result is always finite.
pub fn score_for_offset(rest: f64) -> f64 {
    -(STRETCH / (rest - GAMMA) - 1.0).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub per_channel: bool,
    /// Weight of the rounding regularizer.
    pub lambda: f64,
    /// Annealing endpoints for the regularizer exponent.
    pub b_start: f64,
    pub b_end: f64,
    /// Fraction of iterations before the regularizer turns on.
    pub warmup: f64,
    pub iters_per_block: usize,
    pub minibatch: usize,
    /// Step size for the rounding-score optimizer.
    pub lr: f64,
    /// Static activation quantization bit width; `None` leaves activations
    /// at full precision.
    pub act_bits: Option<u32>,
    /// Jointly optimize scales during block calibration. Requires
    /// per-channel scales.
    pub optimize_scales: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            weight_bits: 4,
            per_channel: false,
            lambda: 0.01,
            b_start: 20.0,
            b_end: 2.0,
            warmup: 0.2,
            iters_per_block: 20_000,
            minibatch: 128,
            lr: 1e-3,
            act_bits: None,
            optimize_scales: false,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.weight_bits) {
            return Err(Error::invalid(
                "weight bits",
                format!("{} not in [2, 8]", self.weight_bits),
            ));
        }
        if self.iters_per_block == 0 {
            return Err(Error::invalid("iterations per block", "must be positive"));
        }
        if self.minibatch == 0 {
            return Err(Error::invalid("minibatch", "must be positive"));
        }
        if !(self.warmup >= 0.0 && self.warmup < 1.0) {
            return Err(Error::invalid(
                "warmup",
                format!("{} not in [0, 1)", self.warmup),
            ));
        }
        if !(self.b_start >= self.b_end && self.b_end > 0.0) {
            return Err(Error::invalid(
                "annealing exponents",
                format!("need b_start >= b_end > 0, got {} and {}", self.b_start, self.b_end),
            ));
        }
        if self.lambda < 0.0 {
            return Err(Error::invalid("lambda", "must be non-negative"));
        }
        if let Some(bits) = self.act_bits {
            if !(2..=16).contains(&bits) {
                return Err(Error::invalid(
                    "activation bits",
                    format!("{bits} not in [2, 16]"),
                ));
            }
        }
        if self.optimize_scales && !self.per_channel {
            return Err(Error::invalid(
                "scale optimization",
                "requires per-channel scales",
            ));
        }
        Ok(())
    }
}

/// Static asymmetric quantizer for the activation entering one dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub layer: String,
    pub bits: u32,
    pub scale: f64,
    pub zero_point: i64,
}

impl ActQuant {
    fn qmax(&self) -> f64 {
        ((1u64 << self.bits) - 1) as f64
    }

    /// Fake-quantized value and its straight-through derivative (one inside
    /// the representable range, zero where the clip is active).
    pub fn apply(&self, x: f64) -> (f64, f64) {
        let zp = self.zero_point as f64;
        let raw = (x / self.scale).round() + zp;
        let q = raw.clamp(0.0, self.qmax());
        let pass = raw >= 0.0 && raw <= self.qmax();
        (self.scale * (q - zp), if pass { 1.0 } else { 0.0 })
    }
}

/// Quantization state of one dense layer's weight tensor.
#[derive(Debug, Clone)]
pub struct QuantizedLayer {
    pub name: String,
    pub bits: u32,
    pub per_channel: bool,
    /// Applied scales, one per output channel or a single entry.
    pub scales: Vec<f64>,
    /// Scales that defined the integer grid at initialization. Equal to
    /// `scales` unless joint scale optimization moved the latter.
    pub grid_scales: Vec<f64>,
    pub zero_point: i64,
    /// Rounding scores, shaped like the weight tensor.
    pub v: Tensor,
    pub frozen: bool,
}

impl QuantizedLayer {
    pub fn qmax(&self) -> f64 {
        ((1u64 << (self.bits - 1)) - 1) as f64
    }

    pub fn qmin(&self) -> f64 {
        -self.qmax()
    }

    fn scale_of_row(&self, r: usize) -> f64 {
        self.scales[if self.per_channel { r } else { 0 }]
    }

    fn grid_scale_of_row(&self, r: usize) -> f64 {
        self.grid_scales[if self.per_channel { r } else { 0 }]
    }

    /// Rounding interpolation per weight: the rectified sigmoid of the
    /// scores, or its binarization once the layer is frozen. The freeze
    /// threshold is 0.5 with ties rounding up.
    pub fn h(&self) -> Tensor {
        if self.frozen {
            self.v
                .map(|v| if soft_round(v) >= 0.5 { 1.0 } else { 0.0 })
        } else {
            self.v.map(soft_round)
        }
    }

    /// A copy whose rounding is binarized, regardless of frozen state.
    pub fn binarized(&self) -> QuantizedLayer {
        QuantizedLayer {
            frozen: true,
            ..self.clone()
        }
    }
}

/// Dequantized weights under the layer's current rounding state:
/// `scale * (clip(floor(w / grid_scale) + h + zp, qmin, qmax) - zp)`.
pub fn fake_quant(w: &Tensor, layer: &QuantizedLayer) -> Result<Tensor> {
    let (vals, _) = dequant_with_jacobian(w, layer)?;
    Ok(vals)
}

/// Dequantized weights plus the elementwise derivative with respect to the
/// rounding scores. The derivative is zero where the integer clip is active
/// and everywhere once the layer is frozen.
fn dequant_with_jacobian(w: &Tensor, layer: &QuantizedLayer) -> Result<(Tensor, Vec<f64>)> {
    w.check_same_shape(&layer.v, "fake quantization")?;
    let cols = w.cols()?;
    let (qmin, qmax) = (layer.qmin(), layer.qmax());
    let zp = layer.zero_point as f64;
    let mut vals = Vec::with_capacity(w.len());
    let mut jac = Vec::with_capacity(w.len());
    for (e, (&wv, &vv)) in w.data().iter().zip(layer.v.data()).enumerate() {
        let r = e / cols;
        let gs = layer.grid_scale_of_row(r);
        let s = layer.scale_of_row(r);
        let n = (wv / gs).floor();
        let (h, dh) = if layer.frozen {
            (if soft_round(vv) >= 0.5 { 1.0 } else { 0.0 }, 0.0)
        } else {
            (soft_round(vv), soft_round_deriv(vv))
        };
        let raw = n + h + zp;
        let q = raw.clamp(qmin, qmax);
        let inside = raw >= qmin && raw <= qmax;
        vals.push(s * (q - zp));
        jac.push(if inside { s * dh } else { 0.0 });
    }
    Ok((Tensor::new(w.shape().to_vec(), vals)?, jac))
}

/// Grid offsets `clip(floor(w / grid_scale) + h + zp, qmin, qmax) - zp`
/// without the scale factor, for the joint scale-optimization path where
/// the scale is applied by a separate tape node.
fn grid_offsets_with_jacobian(w: &Tensor, layer: &QuantizedLayer) -> Result<(Tensor, Vec<f64>)> {
    w.check_same_shape(&layer.v, "grid offsets")?;
    let cols = w.cols()?;
    let (qmin, qmax) = (layer.qmin(), layer.qmax());
    let zp = layer.zero_point as f64;
    let mut vals = Vec::with_capacity(w.len());
    let mut jac = Vec::with_capacity(w.len());
    for (e, (&wv, &vv)) in w.data().iter().zip(layer.v.data()).enumerate() {
        let gs = layer.grid_scale_of_row(e / cols);
        let n = (wv / gs).floor();
        let (h, dh) = if layer.frozen {
            (if soft_round(vv) >= 0.5 { 1.0 } else { 0.0 }, 0.0)
        } else {
            (soft_round(vv), soft_round_deriv(vv))
        };
        let raw = n + h + zp;
        let q = raw.clamp(qmin, qmax);
        let inside = raw >= qmin && raw <= qmax;
        vals.push(q - zp);
        jac.push(if inside { dh } else { 0.0 });
    }
    Ok((Tensor::new(w.shape().to_vec(), vals)?, jac))
}

/// One reconstruction unit: a dense layer plus the activation span that
/// follows it, as a half-open range of layer indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub start: usize,
    pub end: usize,
    /// Index of the block's dense layer, always `start`.
    pub dense: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub blocks: Vec<Block>,
}

impl BlockPlan {
    /// One block per dense layer, spanning to the next dense layer. Every
    /// layer belongs to exactly one block.
    pub fn new(arch: &Architecture) -> Result<Self> {
        let dense = arch.dense_indices();
        if dense.is_empty() {
            return Err(Error::invalid("block plan", "network has no dense layers"));
        }
        if dense[0] != 0 {
            return Err(Error::invalid(
                "block plan",
                "network must start with a dense layer",
            ));
        }
        let mut blocks = Vec::with_capacity(dense.len());
        for (k, &d) in dense.iter().enumerate() {
            let end = dense.get(k + 1).copied().unwrap_or(arch.layers.len());
            blocks.push(Block {
                name: arch.layers[d].name.clone(),
                start: d,
                end,
                dense: d,
            });
        }
        Ok(BlockPlan { blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Full quantization state: per-layer rounding variables plus optional
/// activation quantizers and accumulated warnings.
#[derive(Debug, Clone)]
pub struct QuantState {
    pub config: QuantConfig,
    pub layers: Vec<QuantizedLayer>,
    pub act: Option<Vec<ActQuant>>,
    pub warnings: Vec<String>,
}

impl QuantState {
    pub fn layer(&self, name: &str) -> Result<&QuantizedLayer> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::invalid("layer name", format!("`{name}` is not quantized")))
    }

    fn layer_mut(&mut self, name: &str) -> Result<&mut QuantizedLayer> {
        self.layers
            .iter_mut()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::invalid("layer name", format!("`{name}` is not quantized")))
    }

    fn act_for(&self, layer: &str) -> Option<&ActQuant> {
        self.act
            .as_ref()
            .and_then(|v| v.iter().find(|a| a.layer == layer))
    }

    /// Parameter vector with every dense weight segment replaced by its
    /// dequantized value; biases and normalization parameters stay as given.
    pub fn effective_params(&self, fp: &ParamVector) -> Result<ParamVector> {
        let mut out = fp.clone();
        for layer in &self.layers {
            let w = fp.segment_tensor(&format!("{}.w", layer.name), layer.v.shape().to_vec())?;
            let dq = fake_quant(&w, layer)?;
            out.segment_slice_mut(&format!("{}.w", layer.name))?
                .copy_from_slice(dq.data());
        }
        Ok(out)
    }

    pub fn all_frozen(&self) -> bool {
        self.layers.iter().all(|l| l.frozen)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        for layer in &self.layers {
            entries.push((format!("{}.v", layer.name), layer.v.len()));
        }
        let table = SegmentTable::new(&entries)?;
        let mut container = ParamVector::zeros(table);
        for layer in &self.layers {
            container
                .segment_slice_mut(&format!("{}.v", layer.name))?
                .copy_from_slice(layer.v.data());
        }
        container.save(path)?;
        let sidecar = Sidecar {
            version: 1,
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerMeta {
                    name: l.name.clone(),
                    bits: l.bits,
                    per_channel: l.per_channel,
                    scales: l.scales.clone(),
                    grid_scales: l.grid_scales.clone(),
                    zero_point: l.zero_point,
                    frozen: l.frozen,
                    shape: [l.v.shape()[0], l.v.shape()[1]],
                })
                .collect(),
            act: self.act.clone(),
            warnings: self.warnings.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&sidecar)?;
        std::fs::write(sidecar_path(path), bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let bytes = std::fs::read(&side)?;
        let sidecar: Sidecar = serde_json::from_slice(&bytes)?;
        if sidecar.version != 1 {
            return Err(Error::BadArtifact {
                path: side,
                why: "unsupported version".to_string(),
            });
        }
        sidecar.config.validate()?;
        let container = ParamVector::load(path)?;
        let mut layers = Vec::with_capacity(sidecar.layers.len());
        for meta in sidecar.layers {
            let want = if meta.per_channel { meta.shape[0] } else { 1 };
            if meta.scales.len() != want || meta.grid_scales.len() != want {
                return Err(Error::BadArtifact {
                    path: side,
                    why: format!("layer `{}` has a malformed scale vector", meta.name),
                });
            }
            if meta.scales.iter().chain(&meta.grid_scales).any(|&s| !(s > 0.0)) {
                return Err(Error::BadArtifact {
                    path: side,
                    why: format!("layer `{}` has a non-positive scale", meta.name),
                });
            }
            let v = container
                .segment_tensor(&format!("{}.v", meta.name), vec![meta.shape[0], meta.shape[1]])?;
            layers.push(QuantizedLayer {
                name: meta.name,
                bits: meta.bits,
                per_channel: meta.per_channel,
                scales: meta.scales,
                grid_scales: meta.grid_scales,
                zero_point: meta.zero_point,
                v,
                frozen: meta.frozen,
            });
        }
        Ok(QuantState {
            config: sidecar.config,
            layers,
            act: sidecar.act,
            warnings: sidecar.warnings,
        })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    config: QuantConfig,
    layers: Vec<LayerMeta>,
    act: Option<Vec<ActQuant>>,
    warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    name: String,
    bits: u32,
    per_channel: bool,
    scales: Vec<f64>,
    grid_scales: Vec<f64>,
    zero_point: i64,
    frozen: bool,
    shape: [usize; 2],
}

/// Min-max initialization: per-layer (or per-channel) symmetric scales and
/// rounding scores that reproduce each weight's fractional grid offset, so
/// the soft-rounded model starts numerically at the full-precision weights.
pub fn init_quant(arch: &Architecture, fp: &ParamVector, cfg: &QuantConfig) -> Result<QuantState> {
    cfg.validate()?;
    let qmax = ((1u64 << (cfg.weight_bits - 1)) - 1) as f64;
    let mut layers = Vec::new();
    let mut warnings = Vec::new();
    for idx in arch.dense_indices() {
        let layer = &arch.layers[idx];
        let (inputs, outputs) = match layer.kind {
            LayerKind::Dense { inputs, outputs } => (inputs, outputs),
            _ => unreachable!("dense_indices returned a non-dense layer"),
        };
        let w = fp.segment_tensor(&format!("{}.w", layer.name), vec![outputs, inputs])?;
        let mut scales = Vec::new();
        if cfg.per_channel {
            let mut fallback_rows = 0usize;
            for r in 0..outputs {
                let row = w.row_slice(r)?;
                let m = row.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()));
                if m > 0.0 {
                    scales.push(m / qmax);
                } else {
                    scales.push(1.0);
                    fallback_rows += 1;
                }
            }
            if fallback_rows > 0 {
                warnings.push(format!(
                    "layer `{}`: {fallback_rows} all-zero output channel(s); scale fell back to 1.0",
                    layer.name
                ));
            }
        } else {
            let m = w.data().iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()));
            if m > 0.0 {
                scales.push(m / qmax);
            } else {
                scales.push(1.0);
                warnings.push(format!(
                    "layer `{}`: all-zero weights; scale fell back to 1.0",
                    layer.name
                ));
            }
        }
        let cols = inputs;
        let mut v = Vec::with_capacity(w.len());
        for (e, &wv) in w.data().iter().enumerate() {
            let s = scales[if cfg.per_channel { e / cols } else { 0 }];
            let x = wv / s;
            let rest = x - x.floor();
            v.push(score_for_offset(rest));
        }
        layers.push(QuantizedLayer {
            name: layer.name.clone(),
            bits: cfg.weight_bits,
            per_channel: cfg.per_channel,
            grid_scales: scales.clone(),
            scales,
            zero_point: 0,
            v: Tensor::new(vec![outputs, inputs], v)?,
            frozen: false,
        });
    }
    Ok(QuantState {
        config: cfg.clone(),
        layers,
        act: None,
        warnings,
    })
}

/// Leaf provider for plain inference: every weight is a constant, either
/// full precision or dequantized through a quantization state, and dense
/// inputs pass through the state's activation quantizers when present.
pub struct InferenceLeaves<'a> {
    pub fp: &'a ParamVector,
    pub state: Option<&'a QuantState>,
}

impl LeafProvider for InferenceLeaves<'_> {
    fn dense_weight(
        &mut self,
        tape: &mut TapeGraph,
        layer: &str,
        shape: [usize; 2],
    ) -> Result<usize> {
        let w = self
            .fp
            .segment_tensor(&format!("{layer}.w"), shape.to_vec())?;
        let value = match self.state {
            Some(state) => fake_quant(&w, state.layer(layer)?)?,
            None => w,
        };
        Ok(tape.constant(value))
    }

    fn dense_bias(&mut self, tape: &mut TapeGraph, layer: &str, len: usize) -> Result<usize> {
        let b = self.fp.segment_tensor(&format!("{layer}.b"), vec![len])?;
        Ok(tape.constant(b))
    }

    fn layer_norm_params(
        &mut self,
        tape: &mut TapeGraph,
        layer: &str,
        dim: usize,
    ) -> Result<(usize, usize)> {
        let g = self.fp.segment_tensor(&format!("{layer}.g"), vec![dim])?;
        let b = self.fp.segment_tensor(&format!("{layer}.b"), vec![dim])?;
        Ok((tape.constant(g), tape.constant(b)))
    }

    fn pre_dense(&mut self, tape: &mut TapeGraph, layer: &str, x_id: usize) -> Result<usize> {
        let Some(act) = self.state.and_then(|s| s.act_for(layer)) else {
            return Ok(x_id);
        };
        apply_act_quant(tape, x_id, act)
    }
}

fn apply_act_quant(tape: &mut TapeGraph, x_id: usize, act: &ActQuant) -> Result<usize> {
    let x = tape.value(x_id);
    let mut vals = Vec::with_capacity(x.len());
    let mut jac = Vec::with_capacity(x.len());
    for &v in x.data() {
        let (val, d) = act.apply(v);
        vals.push(val);
        jac.push(d);
    }
    let out = Tensor::new(x.shape().to_vec(), vals)?;
    tape.diag_map(x_id, out, jac)
}

/// Activations entering each block plus the final network output, computed
/// in row chunks. The returned inputs are the values before any activation
/// quantization hook.
pub fn boundary_activations(
    arch: &Architecture,
    plan: &BlockPlan,
    leaves: &mut dyn LeafProvider,
    x: &Tensor,
    ts: &[usize],
) -> Result<(Vec<Tensor>, Tensor)> {
    let rows = x.rows()?;
    if ts.len() != rows {
        return Err(Error::ShapeMismatch {
            context: "boundary activations timesteps",
            expected: vec![rows],
            got: vec![ts.len()],
        });
    }
    let table = SegmentTable::new(&[])?;
    let mut input_chunks: Vec<Vec<Tensor>> = vec![Vec::new(); plan.len()];
    let mut out_chunks: Vec<Tensor> = Vec::new();
    let mut begin = 0;
    while begin < rows {
        let end = (begin + ACTIVATION_CHUNK).min(rows);
        let mut data = Vec::with_capacity((end - begin) * arch.input_dim);
        for r in begin..end {
            data.extend_from_slice(x.row_slice(r)?);
        }
        let chunk = Tensor::new(vec![end - begin, arch.input_dim], data)?;
        let mut tape = TapeGraph::new(Arc::clone(&table));
        let x_id = tape.constant(chunk);
        let mut h = if arch.time_embed_dim > 0 {
            let mut emb = Vec::with_capacity((end - begin) * arch.time_embed_dim);
            for &t in &ts[begin..end] {
                emb.extend(time_embedding(t, arch.time_embed_dim));
            }
            let emb_id = tape.constant(Tensor::new(vec![end - begin, arch.time_embed_dim], emb)?);
            tape.concat(x_id, emb_id)?
        } else {
            x_id
        };
        for (k, block) in plan.blocks.iter().enumerate() {
            input_chunks[k].push(tape.value(h).clone());
            h = arch.record_span(&mut tape, h, block.start..block.end, leaves)?;
        }
        out_chunks.push(tape.value(h).clone());
        begin = end;
    }
    let mut inputs = Vec::with_capacity(plan.len());
    for chunks in input_chunks {
        inputs.push(vstack(&chunks)?);
    }
    Ok((inputs, vstack(&out_chunks)?))
}

fn vstack(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::EmptySet("tensor stack"));
    }
    let cols = parts[0].cols()?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.cols()? != cols {
            return Err(Error::ShapeMismatch {
                context: "tensor stack",
                expected: vec![parts[0].rows()?, cols],
                got: p.shape().to_vec(),
            });
        }
        rows += p.rows()?;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let cols = t.cols()?;
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(t.row_slice(i)?);
    }
    Tensor::new(vec![idx.len(), cols], data)
}

/// Leaves for calibrating one block: the block's dense weight is a function
/// of its rounding-score parameters (and optionally log scales); biases and
/// normalization parameters are constants.
struct BlockLeaves<'a> {
    fp: &'a ParamVector,
    layer: &'a QuantizedLayer,
    vparams: &'a ParamVector,
    act: Option<&'a ActQuant>,
    optimize_scales: bool,
}

impl LeafProvider for BlockLeaves<'_> {
    fn dense_weight(
        &mut self,
        tape: &mut TapeGraph,
        layer: &str,
        shape: [usize; 2],
    ) -> Result<usize> {
        if layer != self.layer.name {
            return Err(Error::invalid(
                "block leaves",
                format!("unexpected dense layer `{layer}` in block `{}`", self.layer.name),
            ));
        }
        let w = self
            .fp
            .segment_tensor(&format!("{layer}.w"), shape.to_vec())?;
        // Rebuild the layer's rounding state from the live parameters.
        let mut live = self.layer.clone();
        live.v = self
            .vparams
            .segment_tensor(&format!("{layer}.v"), shape.to_vec())?;
        let v_id = tape.param(self.vparams, &format!("{layer}.v"), shape.to_vec())?;
        if self.optimize_scales {
            let rho = self
                .vparams
                .segment_tensor(&format!("{layer}.rho"), vec![shape[0]])?;
            let s_vals = rho.map(f64::exp);
            let (r_vals, dr_dv) = grid_offsets_with_jacobian(&w, &live)?;
            let r_id = tape.diag_map(v_id, r_vals, dr_dv)?;
            let rho_id = tape.param(self.vparams, &format!("{layer}.rho"), vec![shape[0]])?;
            let ds = s_vals.data().to_vec();
            let s_id = tape.diag_map(rho_id, s_vals, ds)?;
            tape.scale_rows(r_id, s_id)
        } else {
            let (vals, jac) = dequant_with_jacobian(&w, &live)?;
            tape.diag_map(v_id, vals, jac)
        }
    }

    fn dense_bias(&mut self, tape: &mut TapeGraph, layer: &str, len: usize) -> Result<usize> {
        let b = self.fp.segment_tensor(&format!("{layer}.b"), vec![len])?;
        Ok(tape.constant(b))
    }

    fn layer_norm_params(
        &mut self,
        tape: &mut TapeGraph,
        layer: &str,
        dim: usize,
    ) -> Result<(usize, usize)> {
        let g = self.fp.segment_tensor(&format!("{layer}.g"), vec![dim])?;
        let b = self.fp.segment_tensor(&format!("{layer}.b"), vec![dim])?;
        Ok((tape.constant(g), tape.constant(b)))
    }

    fn pre_dense(&mut self, tape: &mut TapeGraph, _layer: &str, x_id: usize) -> Result<usize> {
        match self.act {
            Some(act) => apply_act_quant(tape, x_id, act),
            None => Ok(x_id),
        }
    }
}

/// Weighted reconstruction error of one block under a fixed rounding state:
/// `sum_i tilde_i * ||block(input_i) - target_i||^2`.
pub(crate) fn block_recon_loss(
    arch: &Architecture,
    block: &Block,
    fp: &ParamVector,
    layer: &QuantizedLayer,
    act: Option<&ActQuant>,
    input: &Tensor,
    target: &Tensor,
    tilde: &[f64],
) -> Result<f64> {
    let table = SegmentTable::new(&[])?;
    let mut tape = TapeGraph::new(table);
    let in_id = tape.constant(input.clone());
    let mut leaves = ConstBlockLeaves { fp, layer, act };
    let out_id = arch.record_span(&mut tape, in_id, block.start..block.end, &mut leaves)?;
    let diff = tape.value(out_id).sub(target)?;
    let rows = diff.rows()?;
    if tilde.len() != rows {
        return Err(Error::ShapeMismatch {
            context: "block loss weights",
            expected: vec![rows],
            got: vec![tilde.len()],
        });
    }
    let mut loss = 0.0;
    for (r, &w) in tilde.iter().enumerate() {
        let mut sq = 0.0;
        for v in diff.row_slice(r)? {
            sq += v * v;
        }
        loss += w * sq;
    }
    Ok(loss)
}

struct ConstBlockLeaves<'a> {
    fp: &'a ParamVector,
    layer: &'a QuantizedLayer,
    act: Option<&'a ActQuant>,
}

impl LeafProvider for ConstBlockLeaves<'_> {
    fn dense_weight(
        &mut self,
        tape: &mut TapeGraph,
        layer: &str,
        shape: [usize; 2],
    ) -> Result<usize> {
        let w = self
            .fp
            .segment_tensor(&format!("{layer}.w"), shape.to_vec())?;
        Ok(tape.constant(fake_quant(&w, self.layer)?))
    }

    fn dense_bias(&mut self, tape: &mut TapeGraph, layer: &str, len: usize) -> Result<usize> {
        let b = self.fp.segment_tensor(&format!("{layer}.b"), vec![len])?;
        Ok(tape.constant(b))
    }

    fn layer_norm_params(
        &mut self,
        tape: &mut TapeGraph,
        layer: &str,
        dim: usize,
    ) -> Result<(usize, usize)> {
        let g = self.fp.segment_tensor(&format!("{layer}.g"), vec![dim])?;
        let b = self.fp.segment_tensor(&format!("{layer}.b"), vec![dim])?;
        Ok((tape.constant(g), tape.constant(b)))
    }

    fn pre_dense(&mut self, tape: &mut TapeGraph, _layer: &str, x_id: usize) -> Result<usize> {
        match self.act {
            Some(act) => apply_act_quant(tape, x_id, act),
            None => Ok(x_id),
        }
    }
}

/// Rounding regularizer `sum(1 - |2h - 1|^b)` and its gradient in the
/// scores. Small `b` pulls every h toward 0 or 1.
fn rounding_regularizer(v: &Tensor, b: f64) -> (f64, Vec<f64>) {
    let mut val = 0.0;
    let mut grad = Vec::with_capacity(v.len());
    for &vv in v.data() {
        let h = soft_round(vv);
        let z = 2.0 * h - 1.0;
        let az = z.abs();
        val += 1.0 - az.powf(b);
        let dphi_dz = if az == 0.0 {
            0.0
        } else {
            -b * az.powf(b - 1.0) * z.signum()
        };
        grad.push(dphi_dz * 2.0 * soft_round_deriv(vv));
    }
    (val, grad)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: String,
    /// Weighted reconstruction error with rounding binarized at its
    /// initialization, i.e. plain round-to-nearest.
    pub nearest_loss: f64,
    /// Weighted reconstruction error of the soft-rounded initialization.
    pub soft_init_loss: f64,
    /// Weighted reconstruction error of the optimized soft state.
    pub final_soft_loss: f64,
    /// Weighted reconstruction error after freezing to binary rounding.
    pub final_frozen_loss: f64,
    pub iterations: usize,
    /// Per-iteration optimized objective (weighted reconstruction plus the
    /// active regularizer term).
    pub loss_trace: Vec<f64>,
}

/// Calibrates one block's rounding scores against the weighted
/// reconstruction objective, then freezes the block. Earlier blocks must
/// already be frozen; inputs come from the quantized prefix and targets
/// from the full-precision network.
pub fn block_calibrate(
    arch: &Architecture,
    fp: &ParamVector,
    state: &mut QuantState,
    plan: &BlockPlan,
    block_idx: usize,
    calib: &CalibrationSet,
    omega: &[f64],
    master_seed: u64,
) -> Result<BlockReport> {
    let cfg = state.config.clone();
    cfg.validate()?;
    if block_idx >= plan.len() {
        return Err(Error::invalid(
            "block index",
            format!("{block_idx} of {}", plan.len()),
        ));
    }
    let block = plan.blocks[block_idx].clone();
    for earlier in &plan.blocks[..block_idx] {
        if !state.layer(&earlier.name)?.frozen {
            return Err(Error::invalid(
                "block order",
                format!("block `{}` is not frozen yet", earlier.name),
            ));
        }
    }
    if state.layer(&block.name)?.frozen {
        return Err(Error::invalid(
            "block order",
            format!("block `{}` is already frozen", block.name),
        ));
    }
    if omega.len() != calib.len() {
        return Err(Error::invalid(
            "weights",
            format!("{} weights for {} samples", omega.len(), calib.len()),
        ));
    }

    // Weighted objective over the training split, weights renormalized to
    // sum to one there.
    let train = calib.train_indices();
    if train.is_empty() {
        return Err(Error::EmptySet("calibration training split"));
    }
    let mass: f64 = train.iter().map(|&i| omega[i]).sum();
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::NonFinite {
            context: "calibration weight mass".to_string(),
        });
    }
    let tilde: Vec<f64> = train.iter().map(|&i| omega[i] / mass).collect();

    let (xs, ts) = calib.gather(&train)?;
    let q_inputs = {
        let mut leaves = InferenceLeaves {
            fp,
            state: Some(state),
        };
        let (inputs, _) = boundary_activations(arch, plan, &mut leaves, &xs, &ts)?;
        inputs.into_iter().nth(block_idx).unwrap()
    };
    let target = {
        let mut leaves = InferenceLeaves { fp, state: None };
        let (inputs, final_out) = boundary_activations(arch, plan, &mut leaves, &xs, &ts)?;
        if block_idx + 1 < plan.len() {
            inputs.into_iter().nth(block_idx + 1).unwrap()
        } else {
            final_out
        }
    };

    let act = state.act_for(&block.name).cloned();
    let layer_init = state.layer(&block.name)?.clone();
    let shape = layer_init.v.shape().to_vec();
    let outputs = shape[0];

    let nearest_loss = block_recon_loss(
        arch,
        &block,
        fp,
        &layer_init.binarized(),
        act.as_ref(),
        &q_inputs,
        &target,
        &tilde,
    )?;
    let soft_init_loss = block_recon_loss(
        arch,
        &block,
        fp,
        &layer_init,
        act.as_ref(),
        &q_inputs,
        &target,
        &tilde,
    )?;

    // Live optimization variables: rounding scores, plus log scales when
    // joint scale optimization is on.
    let mut entries = vec![(format!("{}.v", block.name), layer_init.v.len())];
    if cfg.optimize_scales {
        entries.push((format!("{}.rho", block.name), outputs));
    }
    let vtable = SegmentTable::new(&entries)?;
    let mut vparams = ParamVector::zeros(Arc::clone(&vtable));
    vparams
        .segment_slice_mut(&format!("{}.v", block.name))?
        .copy_from_slice(layer_init.v.data());
    if cfg.optimize_scales {
        let rho: Vec<f64> = layer_init.scales.iter().map(|s| s.ln()).collect();
        vparams
            .segment_slice_mut(&format!("{}.rho", block.name))?
            .copy_from_slice(&rho);
    }

    let mut adam = Adam::new(vparams.len(), cfg.lr);
    let mut rng = stream(master_seed, "block-calib", block_idx as u64);
    let warm = ((cfg.iters_per_block as f64) * cfg.warmup).ceil() as usize;
    let pool: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.iters_per_block);

    for it in 1..=cfg.iters_per_block {
        let batch = choose_without_replacement(&pool, cfg.minibatch, &mut rng);
        let batch_mass: f64 = batch.iter().map(|&k| tilde[k]).sum();
        if !(batch_mass > 0.0) {
            return Err(Error::NonFinite {
                context: format!("block `{}` batch weight mass", block.name),
            });
        }
        let input = gather_rows(&q_inputs, &batch)?;
        let tgt = gather_rows(&target, &batch)?;

        let mut tape = TapeGraph::new(Arc::clone(&vtable));
        let in_id = tape.constant(input);
        let mut leaves = BlockLeaves {
            fp,
            layer: &layer_init,
            vparams: &vparams,
            act: act.as_ref(),
            optimize_scales: cfg.optimize_scales,
        };
        let out_id = arch.record_span(&mut tape, in_id, block.start..block.end, &mut leaves)?;
        tape.set_output(out_id);
        let diff = tape.output_value()?.sub(&tgt)?;
        let cols = diff.cols()?;
        let mut recon = 0.0;
        let mut seed = vec![0.0; diff.len()];
        for (r, &k) in batch.iter().enumerate() {
            let w = tilde[k] / batch_mass;
            let mut sq = 0.0;
            for c in 0..cols {
                let d = diff.data()[r * cols + c];
                sq += d * d;
                seed[r * cols + c] = 2.0 * w * d;
            }
            recon += w * sq;
        }
        let mut grad = tape.backward(&Tensor::new(diff.shape().to_vec(), seed)?)?;

        let mut total = recon;
        if it > warm && cfg.lambda > 0.0 {
            let span = (cfg.iters_per_block - warm).max(1) as f64;
            let p = (it - warm) as f64 / span;
            let b = cfg.b_start + (cfg.b_end - cfg.b_start) * p;
            let v_now = vparams.segment_tensor(&format!("{}.v", block.name), shape.clone())?;
            let (reg, dreg) = rounding_regularizer(&v_now, b);
            total += cfg.lambda * reg;
            let gv = grad.segment_slice_mut(&format!("{}.v", block.name))?;
            for (g, d) in gv.iter_mut().zip(&dreg) {
                *g += cfg.lambda * d;
            }
        }
        if !total.is_finite() {
            return Err(Error::Diverged {
                stage: format!("block `{}` calibration", block.name),
                iteration: it,
                loss: total,
            });
        }
        trace.push(total);
        let gsnap = grad.data().to_vec();
        adam.step(vparams.data_mut(), &gsnap);
    }

    // Publish the optimized state and freeze the block.
    {
        let layer = state.layer_mut(&block.name)?;
        layer.v = vparams.segment_tensor(&format!("{}.v", block.name), shape.clone())?;
        if cfg.optimize_scales {
            let rho = vparams.segment_slice(&format!("{}.rho", block.name))?;
            layer.scales = rho.iter().map(|r| r.exp()).collect();
            if layer.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::NonFinite {
                    context: format!("block `{}` optimized scales", block.name),
                });
            }
        }
        layer.frozen = false;
        let final_soft_loss = block_recon_loss(
            arch,
            &block,
            fp,
            layer,
            act.as_ref(),
            &q_inputs,
            &target,
            &tilde,
        )?;
        layer.frozen = true;
        let final_frozen_loss = block_recon_loss(
            arch,
            &block,
            fp,
            layer,
            act.as_ref(),
            &q_inputs,
            &target,
            &tilde,
        )?;
        Ok(BlockReport {
            block: block.name.clone(),
            nearest_loss,
            soft_init_loss,
            final_soft_loss,
            final_frozen_loss,
            iterations: cfg.iters_per_block,
            loss_trace: trace,
        })
    }
}

/// Computes static activation ranges for every dense input from the
/// full-precision network over the calibration set, using the bit width in
/// the state's configuration.
pub fn calibrate_activations(
    arch: &Architecture,
    fp: &ParamVector,
    calib: &CalibrationSet,
    state: &mut QuantState,
) -> Result<()> {
    let bits = state.config.act_bits.ok_or_else(|| {
        Error::invalid("activation calibration", "activation bits are not configured")
    })?;
    if calib.is_empty() {
        return Err(Error::EmptySet("calibration set"));
    }
    let plan = BlockPlan::new(arch)?;
    let all: Vec<usize> = (0..calib.len()).collect();
    let (xs, ts) = calib.gather(&all)?;
    let mut leaves = InferenceLeaves { fp, state: None };
    let (inputs, _) = boundary_activations(arch, &plan, &mut leaves, &xs, &ts)?;
    let qmax = ((1u64 << bits) - 1) as f64;
    let mut act = Vec::with_capacity(plan.len());
    for (block, input) in plan.blocks.iter().zip(&inputs) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in input.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        let (scale, zero_point) = if span > 0.0 {
            let s = span / qmax;
            let zp = (-lo / s).round().clamp(0.0, qmax) as i64;
            (s, zp)
        } else {
            state.warnings.push(format!(
                "layer `{}`: constant input activation; scale fell back to 1.0",
                block.name
            ));
            (1.0, 0)
        };
        act.push(ActQuant {
            layer: block.name.clone(),
            bits,
            scale,
            zero_point,
        });
    }
    state.act = Some(act);
    Ok(())
}
