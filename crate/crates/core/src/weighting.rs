//! Learned calibration-sample weights.
//!
//! Weights are a softmax over free scores, trained by a bi-level scheme:
//! a one-step-ahead model built from the weighted training gradients is
//! scored on held-out states of a sampled timestep group, and the weight
//! gradient of that score has a closed first-order form (no second-order
//! autodiff). Pseudo-updates accumulate over a window; every `t_acc`
//! iterations the averaged drift is committed to the real scores.
//!
//! `verify_lemma_43` and `verify_lemma_42` check the two analysis claims on
//! real instances: the committed drift follows the gradient of a composite
//! objective whose second term matches gradients across groups, and weight
//! gradient similarity tracks model gradient similarity in rank.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::{per_sample_gradients, Architecture};
use crate::optim::Adam;
use crate::params::ParamVector;
use crate::rng::{choose_without_replacement, stream};
use crate::tensor::Tensor;

/// Initial score for every sample, before any optimization.
pub const INIT_SCORE: f64 = 1.0 / 32.0;

/// Softmax with temperature over raw scores. Scores are shifted by their
/// maximum before exponentiation, so the largest weight never underflows.
pub fn softmax_weights(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(
            "temperature",
            format!("{tau} must be positive"),
        ));
    }
    if scores.is_empty() {
        return Err(Error::EmptySet("score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: "softmax scores".to_string(),
        });
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| ((s - m) / tau).exp()).collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    if w.iter().any(|&v| v <= 0.0) {
        return Err(Error::NonFinite {
            context: "softmax weights underflowed to zero".to_string(),
        });
    }
    Ok(w)
}

/// Free scores plus temperature; the weights are always their softmax.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleWeights {
    pub scores: Vec<f64>,
    pub tau: f64,
}

impl SampleWeights {
    pub fn uniform(n: usize, tau: f64) -> Self {
        SampleWeights {
            scores: vec![INIT_SCORE; n],
            tau,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        softmax_weights(&self.scores, self.tau)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Reconstruction objective: squared distance between a model's outputs and
/// the frozen reference outputs, per calibration state. Reference outputs
/// are computed once at construction.
pub struct ReconObjective<'a> {
    arch: &'a Architecture,
    calib: &'a CalibrationSet,
    reference: Tensor,
}

impl<'a> ReconObjective<'a> {
    pub fn new(
        arch: &'a Architecture,
        theta_ref: &ParamVector,
        calib: &'a CalibrationSet,
    ) -> Result<Self> {
        if calib.is_empty() {
            return Err(Error::EmptySet("calibration set"));
        }
        let all: Vec<usize> = (0..calib.len()).collect();
        let (xs, ts) = calib.gather(&all)?;
        let reference = arch.forward(theta_ref, &xs, &ts)?;
        if !reference.all_finite() {
            return Err(Error::NonFinite {
                context: "reference outputs".to_string(),
            });
        }
        Ok(ReconObjective {
            arch,
            calib,
            reference,
        })
    }

    pub fn len(&self) -> usize {
        self.calib.len()
    }

    pub fn is_empty(&self) -> bool {
        self.calib.is_empty()
    }

    pub fn calib(&self) -> &CalibrationSet {
        self.calib
    }

    pub fn arch(&self) -> &Architecture {
        self.arch
    }

    fn reference_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let cols = self.reference.cols()?;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.reference.row_slice(i)?);
        }
        Tensor::new(vec![idx.len(), cols], data)
    }

    /// Mean squared reconstruction error over the given samples.
    pub fn mean_loss(&self, theta: &ParamVector, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Err(Error::EmptySet("loss index set"));
        }
        let (xs, ts) = self.calib.gather(idx)?;
        let out = self.arch.forward(theta, &xs, &ts)?;
        let target = self.reference_rows(idx)?;
        let loss = out.sub(&target)?.sq_norm() / idx.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "reconstruction loss".to_string(),
            });
        }
        Ok(loss)
    }

    /// Mean loss and its parameter gradient in one batched pass.
    pub fn mean_loss_grad(
        &self,
        theta: &ParamVector,
        idx: &[usize],
    ) -> Result<(f64, ParamVector)> {
        if idx.is_empty() {
            return Err(Error::EmptySet("loss index set"));
        }
        let (xs, ts) = self.calib.gather(idx)?;
        let mut tape = self.arch.forward_record(theta, &xs, &ts)?;
        let target = self.reference_rows(idx)?;
        let diff = tape.output_value()?.sub(&target)?;
        let loss = diff.sq_norm() / idx.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "reconstruction loss".to_string(),
            });
        }
        let seed = diff.map(|d| 2.0 * d / idx.len() as f64);
        Ok((loss, tape.backward(&seed)?))
    }

    /// Per-sample gradients of the squared reconstruction error.
    pub fn per_sample_grads(
        &self,
        theta: &ParamVector,
        idx: &[usize],
    ) -> Result<Vec<ParamVector>> {
        let (xs, ts) = self.calib.gather(idx)?;
        let target = self.reference_rows(idx)?;
        per_sample_gradients(self.arch, theta, &xs, &ts, |row, out| {
            let t = target.row_slice(row)?;
            let mut seed = Vec::with_capacity(out.len());
            for (o, r) in out.data().iter().zip(t) {
                if !o.is_finite() {
                    return Err(Error::NonFinite {
                        context: "per-sample reconstruction output".to_string(),
                    });
                }
                seed.push(2.0 * (o - r));
            }
            Tensor::new(vec![1, seed.len()], seed)
        })
    }
}

/// `theta - eta * sum_i w_i g_i` with the batch's weights renormalized to
/// sum to one. Returns the stepped parameters, the per-sample gradients,
/// and the renormalized batch weights.
pub fn one_step_ahead(
    obj: &ReconObjective,
    theta: &ParamVector,
    batch: &[usize],
    omega: &[f64],
    eta: f64,
) -> Result<(ParamVector, Vec<ParamVector>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptySet("inner batch"));
    }
    if omega.len() != obj.len() {
        return Err(Error::invalid(
            "weights",
            format!("{} weights for {} samples", omega.len(), obj.len()),
        ));
    }
    let mut mass = 0.0;
    for &i in batch {
        mass += omega[i];
    }
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::NonFinite {
            context: "batch weight mass".to_string(),
        });
    }
    let tilde: Vec<f64> = batch.iter().map(|&i| omega[i] / mass).collect();
    let grads = obj.per_sample_grads(theta, batch)?;
    let mut stepped = theta.clone();
    for (w, g) in tilde.iter().zip(&grads) {
        stepped.axpy(-eta * w, g)?;
    }
    Ok((stepped, grads, tilde))
}

/// Gradient of a validation loss evaluated at the one-step-ahead parameters
/// with respect to the full weight vector. `val_grad` is the loss gradient
/// at the stepped parameters; `batch_grads` are the per-sample gradients the
/// step was built from. Entries outside the batch are zero.
pub fn weight_space_gradient(
    omega: &[f64],
    batch: &[usize],
    batch_grads: &[ParamVector],
    val_grad: &ParamVector,
    eta: f64,
) -> Result<Vec<f64>> {
    if batch.len() != batch_grads.len() {
        return Err(Error::invalid(
            "batch gradients",
            format!("{} gradients for {} samples", batch_grads.len(), batch.len()),
        ));
    }
    let mut mass = 0.0;
    for &i in batch {
        mass += omega[i];
    }
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::NonFinite {
            context: "batch weight mass".to_string(),
        });
    }
    // d loss / d tilde_k, then pulled back through the renormalization.
    let a: Vec<f64> = batch_grads
        .iter()
        .map(|g| val_grad.dot(g).map(|d| -eta * d))
        .collect::<Result<_>>()?;
    let mut a_dot = 0.0;
    for (k, &i) in batch.iter().enumerate() {
        a_dot += a[k] * (omega[i] / mass);
    }
    let mut domega = vec![0.0; omega.len()];
    for (k, &i) in batch.iter().enumerate() {
        domega[i] = (a[k] - a_dot) / mass;
    }
    Ok(domega)
}

/// Same weight-space gradient without the batch renormalization, the form
/// the drift analysis is stated in: `d/d omega_i = -eta <val_grad, g_i>`.
pub fn weight_space_gradient_raw(
    n: usize,
    batch: &[usize],
    batch_grads: &[ParamVector],
    val_grad: &ParamVector,
    eta: f64,
) -> Result<Vec<f64>> {
    let mut domega = vec![0.0; n];
    for (k, &i) in batch.iter().enumerate() {
        domega[i] = -eta * val_grad.dot(&batch_grads[k])?;
    }
    Ok(domega)
}

/// Full closed-form meta-gradient with respect to the free scores:
/// weight-space gradient pulled back through the softmax.
pub fn meta_gradient(
    weights: &SampleWeights,
    batch: &[usize],
    batch_grads: &[ParamVector],
    val_grad: &ParamVector,
    eta: f64,
) -> Result<Vec<f64>> {
    let omega = weights.weights()?;
    let domega = weight_space_gradient(&omega, batch, batch_grads, val_grad, eta)?;
    softmax_pullback(&omega, &domega, weights.tau)
}

/// `d L / d s_j = w_j (dLdw_j - <dLdw, w>) / tau`.
pub fn softmax_pullback(omega: &[f64], domega: &[f64], tau: f64) -> Result<Vec<f64>> {
    if omega.len() != domega.len() {
        return Err(Error::invalid(
            "softmax pullback",
            "weight and gradient lengths differ".to_string(),
        ));
    }
    let mut inner = 0.0;
    for (w, d) in omega.iter().zip(domega) {
        inner += w * d;
    }
    Ok(omega
        .iter()
        .zip(domega)
        .map(|(w, d)| w * (d - inner) / tau)
        .collect())
}

/// Negative mean pairwise inner product of group gradients. With the
/// ordered-pair flag each unordered pair is counted twice, doubling the
/// value; the default counts unordered pairs once.
pub fn gm_loss(grads: &[ParamVector], ordered_pairs: bool) -> Result<f64> {
    pairwise_gm(grads.len(), ordered_pairs, |i, j| grads[i].dot(&grads[j]))
}

/// `gm_loss` over plain vectors, used for weight-space gradients.
pub fn gm_loss_raw(vecs: &[Vec<f64>], ordered_pairs: bool) -> Result<f64> {
    pairwise_gm(vecs.len(), ordered_pairs, |i, j| {
        let mut acc = 0.0;
        for (a, b) in vecs[i].iter().zip(&vecs[j]) {
            acc += a * b;
        }
        Ok(acc)
    })
}

fn pairwise_gm(
    t: usize,
    ordered_pairs: bool,
    mut dot: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<f64> {
    if t < 2 {
        return Err(Error::invalid(
            "group gradients",
            format!("{t} groups, need at least two"),
        ));
    }
    let mut acc = 0.0;
    for i in 0..t {
        for j in i + 1..t {
            acc += dot(i, j)?;
        }
    }
    let scale = 2.0 / (t * (t - 1)) as f64;
    let mult = if ordered_pairs { 2.0 } else { 1.0 };
    Ok(-scale * mult * acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterOptimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchScope {
    /// Inner batches come from the sampled group's training samples.
    Group,
    /// Inner batches come from all training samples.
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Step size of the one-step-ahead parameter update.
    pub eta_inner: f64,
    /// Step size of the score pseudo-updates inside a window.
    pub eta_pseudo: f64,
    /// Scale of the committed update.
    pub eta_outer: f64,
    pub iters: usize,
    /// Window length; drift is committed every `t_acc` iterations.
    pub t_acc: usize,
    pub batch_size: usize,
    pub outer: OuterOptimizer,
    pub scope: BatchScope,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            eta_inner: 0.1,
            eta_pseudo: 0.1,
            eta_outer: 0.05,
            iters: 150,
            t_acc: 5,
            batch_size: 32,
            outer: OuterOptimizer::Adam,
            scope: BatchScope::Group,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaReport {
    pub iters: usize,
    pub commits: usize,
    /// Mean sampled-group validation loss over the first and last windows.
    pub first_window_val_loss: f64,
    pub last_window_val_loss: f64,
}

/// Runs the accumulation-window weight optimization against a fixed model
/// state. Scores move; the model does not. `stream_index` keys the
/// randomness so repeated invocations (one per block) stay independent.
pub fn algorithm1_optimize(
    obj: &ReconObjective,
    theta: &ParamVector,
    weights: &SampleWeights,
    cfg: &MetaConfig,
    master_seed: u64,
    stream_index: u64,
) -> Result<(SampleWeights, MetaReport)> {
    if weights.len() != obj.len() {
        return Err(Error::invalid(
            "weights",
            format!("{} scores for {} samples", weights.len(), obj.len()),
        ));
    }
    if cfg.t_acc == 0 {
        return Err(Error::invalid("meta config", "t_acc must be positive"));
    }
    let calib = obj.calib();
    let groups = calib.group_count();
    let mut group_train = Vec::with_capacity(groups);
    let mut group_val = Vec::with_capacity(groups);
    for g in 0..groups {
        let tr = calib.group_train_indices(g)?;
        let va = calib.group_val_indices(g)?;
        if tr.is_empty() || va.is_empty() {
            return Err(Error::invalid(
                "calibration groups",
                format!("group {g} is missing training or validation samples"),
            ));
        }
        group_train.push(tr);
        group_val.push(va);
    }
    let all_train = calib.train_indices();

    let mut rng = stream(master_seed, "meta-opt", stream_index);
    let mut committed = weights.scores.clone();
    let mut work = committed.clone();
    let mut adam = Adam::new(committed.len(), cfg.eta_outer);
    let mut commits = 0usize;
    let mut window_losses: Vec<f64> = Vec::new();
    let mut first_window_val_loss = f64::NAN;
    let mut last_window_val_loss = f64::NAN;

    for it in 1..=cfg.iters {
        let g = rng.random_range(0..groups);
        let pool: &[usize] = match cfg.scope {
            BatchScope::Group => &group_train[g],
            BatchScope::All => &all_train,
        };
        let batch = choose_without_replacement(pool, cfg.batch_size, &mut rng);

        let working = SampleWeights {
            scores: work.clone(),
            tau: weights.tau,
        };
        let omega = working.weights()?;
        let (theta_star, batch_grads, _) = one_step_ahead(obj, theta, &batch, &omega, cfg.eta_inner)?;
        let (val_loss, val_grad) = obj.mean_loss_grad(&theta_star, &group_val[g])?;
        window_losses.push(val_loss);
        let ds = meta_gradient(&working, &batch, &batch_grads, &val_grad, cfg.eta_inner)?;
        for (s, d) in work.iter_mut().zip(&ds) {
            *s -= cfg.eta_pseudo * d;
        }
        if work.iter().any(|s| !s.is_finite()) {
            return Err(Error::Diverged {
                stage: "weight optimization".to_string(),
                iteration: it,
                loss: val_loss,
            });
        }

        if it % cfg.t_acc == 0 {
            let mean_loss = window_losses.iter().sum::<f64>() / window_losses.len() as f64;
            if commits == 0 {
                first_window_val_loss = mean_loss;
            }
            last_window_val_loss = mean_loss;
            window_losses.clear();
            let inv_t = 1.0 / cfg.t_acc as f64;
            match cfg.outer {
                OuterOptimizer::Sgd => {
                    for (c, w) in committed.iter_mut().zip(&work) {
                        *c += cfg.eta_outer * inv_t * (*w - *c);
                    }
                }
                OuterOptimizer::Adam => {
                    // The averaged drift is a descent direction; its negation
                    // plays the role of the gradient.
                    let grad: Vec<f64> = committed
                        .iter()
                        .zip(&work)
                        .map(|(c, w)| -inv_t * (*w - *c))
                        .collect();
                    adam.step(&mut committed, &grad);
                }
            }
            work.copy_from_slice(&committed);
            commits += 1;
        }
    }

    Ok((
        SampleWeights {
            scores: committed,
            tau: weights.tau,
        },
        MetaReport {
            iters: cfg.iters,
            commits,
            first_window_val_loss,
            last_window_val_loss,
        },
    ))
}


/// Per-group validation losses plus the gradient-matching diagnostics at a
/// fixed model state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean reconstruction error over all validation samples.
    pub l_mse: f64,
    /// Gradient-matching loss over per-group validation gradients at theta.
    pub l_gm_theta: f64,
    /// Gradient-matching loss over weight-space group gradients at the
    /// one-step-ahead parameters.
    pub l_gm_omega: f64,
    pub per_group: Vec<GroupLoss>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupLoss {
    pub group: usize,
    pub count: usize,
    pub mse: f64,
}

/// Evaluates the loss decomposition at `theta` under the given weights.
/// The one-step-ahead model for the weight-space term is built from the
/// full training set.
pub fn compute_loss_report(
    obj: &ReconObjective,
    theta: &ParamVector,
    weights: &SampleWeights,
    eta_inner: f64,
) -> Result<LossReport> {
    let calib = obj.calib();
    let groups = calib.group_count();
    if groups < 2 {
        return Err(Error::invalid(
            "loss report",
            "needs at least two groups".to_string(),
        ));
    }
    let val = calib.val_indices();
    let l_mse = obj.mean_loss(theta, &val)?;

    let mut per_group = Vec::with_capacity(groups);
    let mut theta_grads = Vec::with_capacity(groups);
    for g in 0..groups {
        let idx = calib.group_val_indices(g)?;
        let (mse, grad) = obj.mean_loss_grad(theta, &idx)?;
        per_group.push(GroupLoss {
            group: g,
            count: idx.len(),
            mse,
        });
        theta_grads.push(grad);
    }
    let l_gm_theta = gm_loss(&theta_grads, false)?;

    let omega = weights.weights()?;
    let train = calib.train_indices();
    let (theta_star, batch_grads, _) = one_step_ahead(obj, theta, &train, &omega, eta_inner)?;
    let mut omega_grads = Vec::with_capacity(groups);
    for g in 0..groups {
        let idx = calib.group_val_indices(g)?;
        let (_, val_grad) = obj.mean_loss_grad(&theta_star, &idx)?;
        omega_grads.push(weight_space_gradient(
            &omega,
            &train,
            &batch_grads,
            &val_grad,
            eta_inner,
        )?);
    }
    let l_gm_omega = gm_loss_raw(&omega_grads, false)?;

    Ok(LossReport {
        l_mse,
        l_gm_theta,
        l_gm_omega,
        per_group,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lemma43Options {
    /// Pseudo-update step size, the expansion parameter of the prediction.
    pub eta_pseudo: f64,
    /// One-step-ahead step size inside the validation objective.
    pub eta_inner: f64,
    pub t_acc: usize,
    pub batch_size: usize,
}

impl Default for Lemma43Options {
    fn default() -> Self {
        Lemma43Options {
            eta_pseudo: 1e-6,
            eta_inner: 0.1,
            t_acc: 4,
            batch_size: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lemma43Report {
    pub drift_norm: f64,
    /// Residual of the first-order prediction alone.
    pub mse_only_residual: f64,
    /// Residual of the first-order prediction plus the pairwise
    /// gradient-interaction correction.
    pub composite_residual: f64,
    pub group_sequence: Vec<usize>,
}

/// Measures the weight drift over one accumulation window of plain
/// pseudo-updates and compares it against the first-order prediction and
/// the composite prediction with the quadratic cross-group correction.
///
/// Updates act directly on the weight simplex coordinates (the analysis
/// object), starting from the softmax of the given scores; the batch of
/// each window position is fixed up front. When `t_acc` equals the group
/// count the window visits each group exactly once, making the correction
/// term equal to the scaled gradient-matching objective.
pub fn verify_lemma_43(
    obj: &ReconObjective,
    theta: &ParamVector,
    weights: &SampleWeights,
    opts: &Lemma43Options,
    master_seed: u64,
) -> Result<Lemma43Report> {
    let calib = obj.calib();
    let groups = calib.group_count();
    if groups < 2 {
        return Err(Error::invalid("drift check", "needs at least two groups"));
    }
    let mut rng = stream(master_seed, "lemma43", 0);

    // Group visit sequence: a permutation when the window spans the groups,
    // uniform draws otherwise.
    let sequence: Vec<usize> = if opts.t_acc == groups {
        let mut seq: Vec<usize> = (0..groups).collect();
        seq.shuffle(&mut rng);
        seq
    } else {
        (0..opts.t_acc).map(|_| rng.random_range(0..groups)).collect()
    };

    // Fixed batches and cached per-sample gradients at theta; the weight
    // objective of each window position is then a smooth function of the
    // weights alone.
    let n = obj.len();
    let mut batches = Vec::with_capacity(sequence.len());
    let mut batch_grads = Vec::with_capacity(sequence.len());
    let mut val_sets = Vec::with_capacity(sequence.len());
    for &g in &sequence {
        let pool = calib.group_train_indices(g)?;
        let batch = choose_without_replacement(&pool, opts.batch_size, &mut rng);
        batch_grads.push(obj.per_sample_grads(theta, &batch)?);
        batches.push(batch);
        val_sets.push(calib.group_val_indices(g)?);
    }

    let grad_f = |k: usize, omega: &[f64]| -> Result<Vec<f64>> {
        let mut stepped = theta.clone();
        for (j, &i) in batches[k].iter().enumerate() {
            stepped.axpy(-opts.eta_inner * omega[i], &batch_grads[k][j])?;
        }
        let (_, val_grad) = obj.mean_loss_grad(&stepped, &val_sets[k])?;
        weight_space_gradient_raw(n, &batches[k], &batch_grads[k], &val_grad, opts.eta_inner)
    };

    let omega0 = weights.weights()?;

    // Measured drift from sequential pseudo-updates.
    let mut omega = omega0.clone();
    for k in 0..sequence.len() {
        let g = grad_f(k, &omega)?;
        for (w, d) in omega.iter_mut().zip(&g) {
            *w -= opts.eta_pseudo * d;
        }
    }
    let drift: Vec<f64> = omega.iter().zip(&omega0).map(|(a, b)| a - b).collect();
    let drift_norm = norm(&drift);

    // First-order prediction: all window gradients at the initial weights.
    let grads0: Vec<Vec<f64>> = (0..sequence.len())
        .map(|k| grad_f(k, &omega0))
        .collect::<Result<_>>()?;
    let mut p_mse = vec![0.0; n];
    for g in &grads0 {
        for (p, d) in p_mse.iter_mut().zip(g) {
            *p -= opts.eta_pseudo * d;
        }
    }

    // Quadratic correction: half the gradient of the pairwise interaction
    // sum, assembled from directional second derivatives. For position k
    // the needed direction is the sum of the other positions' gradients.
    let mut correction = vec![0.0; n];
    if sequence.len() >= 2 {
        for k in 0..sequence.len() {
            let mut dir = vec![0.0; n];
            for (l, g) in grads0.iter().enumerate() {
                if l != k {
                    for (d, v) in dir.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
            let dir_norm = norm(&dir);
            if dir_norm == 0.0 {
                continue;
            }
            let h = 1e-4 / dir_norm;
            let plus: Vec<f64> = omega0.iter().zip(&dir).map(|(w, d)| w + h * d).collect();
            let minus: Vec<f64> = omega0.iter().zip(&dir).map(|(w, d)| w - h * d).collect();
            let gp = grad_f(k, &plus)?;
            let gm = grad_f(k, &minus)?;
            for i in 0..n {
                correction[i] += (gp[i] - gm[i]) / (2.0 * h);
            }
        }
    }
    let mut p_comp = p_mse.clone();
    let c = opts.eta_pseudo * opts.eta_pseudo / 2.0;
    for (p, d) in p_comp.iter_mut().zip(&correction) {
        *p += c * d;
    }

    let residual = |pred: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (d, p) in drift.iter().zip(pred) {
            acc += (d - p) * (d - p);
        }
        acc.sqrt() / drift_norm.max(f64::MIN_POSITIVE)
    };

    Ok(Lemma43Report {
        drift_norm,
        mse_only_residual: residual(&p_mse),
        composite_residual: residual(&p_comp),
        group_sequence: sequence,
    })
}

fn norm(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x * x;
    }
    acc.sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let mut dot = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lemma42Report {
    /// Rank correlation between weight-space and parameter-space pairwise
    /// gradient cosines; `None` when either side is constant.
    pub spearman: Option<f64>,
    pub n_pairs: usize,
    pub degenerate: bool,
}

/// Samples weight configurations, and for each compares the pairwise cosine
/// structure of per-group validation gradients taken in weight space versus
/// parameter space at the one-step-ahead model.
pub fn verify_lemma_42(
    obj: &ReconObjective,
    theta: &ParamVector,
    base: &SampleWeights,
    eta_inner: f64,
    n_configs: usize,
    score_spread: f64,
    master_seed: u64,
) -> Result<Lemma42Report> {
    use rand_distr::{Distribution, StandardNormal};

    let calib = obj.calib();
    let groups = calib.group_count();
    if groups < 2 {
        return Err(Error::invalid("alignment check", "needs at least two groups"));
    }
    let train = calib.train_indices();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rng = stream(master_seed, "lemma42", 0);

    for _ in 0..n_configs {
        let mut scores = base.scores.clone();
        for s in &mut scores {
            let z: f64 = StandardNormal.sample(&mut rng);
            *s += score_spread * z;
        }
        let w = SampleWeights {
            scores,
            tau: base.tau,
        };
        let omega = w.weights()?;
        let (theta_star, batch_grads, _) = one_step_ahead(obj, theta, &train, &omega, eta_inner)?;

        let mut param_grads = Vec::with_capacity(groups);
        let mut weight_grads = Vec::with_capacity(groups);
        for g in 0..groups {
            let idx = calib.group_val_indices(g)?;
            let (_, val_grad) = obj.mean_loss_grad(&theta_star, &idx)?;
            weight_grads.push(weight_space_gradient(
                &omega,
                &train,
                &batch_grads,
                &val_grad,
                eta_inner,
            )?);
            param_grads.push(val_grad);
        }
        for i in 0..groups {
            for j in i + 1..groups {
                let pw = cosine(&weight_grads[i], &weight_grads[j]);
                let pp = cosine(param_grads[i].data(), param_grads[j].data());
                if let (Some(x), Some(y)) = (pw, pp) {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
    }

    let spearman = crate::stats::spearman(&xs, &ys);
    Ok(Lemma42Report {
        spearman,
        n_pairs: xs.len(),
        degenerate: spearman.is_none(),
    })
}
