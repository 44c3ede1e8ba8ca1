//! Denoising diffusion on 2-D toy distributions: noise schedule, forward
//! noising, deterministic sampling steps, and full-precision training.
//!
//! The sampler is the deterministic (eta = 0) variant: each step maps the
//! current state to its predicted clean point and re-noises it at the target
//! timestep's level. States are visited down the full timestep ladder, which
//! is also where calibration trajectories are recorded.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::optim::Adam;
use crate::params::ParamVector;
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of betas over `t_steps` timesteps.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::invalid("schedule", "needs at least one timestep"));
        }
        let mut betas = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let frac = if t_steps == 1 {
                0.0
            } else {
                t as f64 / (t_steps - 1) as f64
            };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule", "needs at least one timestep"));
        }
        if betas.iter().any(|&b| b <= 0.0 || b >= 1.0) {
            return Err(Error::invalid("schedule", "betas must lie strictly in (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange {
                t,
                t_steps: self.t_steps(),
            })
    }

    /// Digest of the schedule's defining constants, recorded alongside
    /// calibration data so mismatched artifacts are detected on load.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.betas.len() as u64).to_le_bytes());
        for b in &self.betas {
            h.update(b.to_le_bytes());
        }
        let digest: [u8; 32] = h.finalize().into();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    #[cfg(test)]
    pub(crate) fn with_alpha_bar_unchecked(betas: Vec<f64>, alpha_bars: Vec<f64>) -> Self {
        NoiseSchedule { betas, alpha_bars }
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`, rows of `x0` and `noise`
/// paired elementwise.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: usize,
    noise: &Tensor,
) -> Result<Tensor> {
    x0.check_same_shape(noise, "forward noising")?;
    let ab = schedule.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip(noise, |x, n| sa * x + sn * n)
}

/// One deterministic sampler step given the model's noise prediction.
/// Exposed separately so closed-form oracles can drive it directly.
pub fn ddim_step_from_eps(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
) -> Result<Tensor> {
    if t_prev > t {
        return Err(Error::TimestepOrder { t, t_prev });
    }
    x_t.check_same_shape(eps_hat, "sampler step")?;
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let (sa_t, sn_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sa_p, sn_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x_t.zip(eps_hat, |x, e| {
        let x0_hat = (x - sn_t * e) / sa_t;
        sa_p * x0_hat + sn_p * e
    })
}

/// One deterministic sampler step using the model's prediction at `t`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    arch: &Architecture,
    params: &ParamVector,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
) -> Result<Tensor> {
    if t >= schedule.t_steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            t_steps: schedule.t_steps(),
        });
    }
    let rows = x_t.rows()?;
    let eps_hat = arch.forward(params, x_t, &vec![t; rows])?;
    ddim_step_from_eps(schedule, x_t, t, t_prev, &eps_hat)
}

/// Runs the full ladder from `x_init` at the last timestep down to zero,
/// calling `visit(ladder_position, t, state)` at every state before it is
/// advanced. Returns the final state.
pub fn ddim_sample_with(
    schedule: &NoiseSchedule,
    arch: &Architecture,
    params: &ParamVector,
    x_init: Tensor,
    mut visit: impl FnMut(usize, usize, &Tensor) -> Result<()>,
) -> Result<Tensor> {
    let t_steps = schedule.t_steps();
    let mut x = x_init;
    for k in 0..t_steps {
        let t = t_steps - 1 - k;
        visit(k, t, &x)?;
        if !x.all_finite() {
            return Err(Error::NonFinite {
                context: format!("sampler state at timestep {t}"),
            });
        }
        if t > 0 {
            x = ddim_step(schedule, arch, params, &x, t, t - 1)?;
        }
    }
    Ok(x)
}

/// Draws `n` samples from pure noise with the deterministic sampler.
pub fn ddim_sample(
    schedule: &NoiseSchedule,
    arch: &Architecture,
    params: &ParamVector,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let dim = arch.input_dim;
    let mut init = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        let z: f64 = StandardNormal.sample(rng);
        init.push(z);
    }
    ddim_sample_with(
        schedule,
        arch,
        params,
        Tensor::new(vec![n, dim], init)?,
        |_, _, _| Ok(()),
    )
}

/// Synthetic 2-D training distributions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ToyDataset {
    GaussianMixture { centers: Vec<[f64; 2]>, std: f64 },
    SwissRoll { turns: f64, noise: f64 },
}

impl Default for ToyDataset {
    /// Two well-separated components with roughly unit marginal variance.
    fn default() -> Self {
        ToyDataset::GaussianMixture {
            centers: vec![[-0.9, -0.9], [0.9, 0.9]],
            std: 0.3,
        }
    }
}

impl ToyDataset {
    pub fn dim(&self) -> usize {
        2
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
        let mut data = Vec::with_capacity(n * 2);
        match self {
            ToyDataset::GaussianMixture { centers, std } => {
                if centers.is_empty() {
                    return Err(Error::invalid("dataset", "mixture needs at least one center"));
                }
                for _ in 0..n {
                    let c = centers[rng.random_range(0..centers.len())];
                    for d in 0..2 {
                        let z: f64 = StandardNormal.sample(rng);
                        data.push(c[d] + std * z);
                    }
                }
            }
            ToyDataset::SwissRoll { turns, noise } => {
                for _ in 0..n {
                    let u: f64 = rng.random();
                    let theta = turns * std::f64::consts::TAU * (0.25 + 0.75 * u);
                    let r = 0.9 * (0.25 + 0.75 * u);
                    let (zx, zy): (f64, f64) =
                        (StandardNormal.sample(rng), StandardNormal.sample(rng));
                    data.push(r * theta.cos() + noise * zx);
                    data.push(r * theta.sin() + noise * zy);
                }
            }
        }
        Tensor::new(vec![n, 2], data)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FpTrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for FpTrainConfig {
    fn default() -> Self {
        FpTrainConfig {
            iters: 4000,
            batch_size: 128,
            lr: 1e-3,
            train_size: 4096,
            val_size: 512,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FpTrainReport {
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub iterations: usize,
}

/// Trains a noise-prediction model with Adam. A zero-iteration budget
/// returns the initialization unchanged; a non-finite loss is a typed
/// divergence error. All randomness is keyed to `master_seed`.
pub fn train_fp(
    arch: &Architecture,
    init: ParamVector,
    schedule: &NoiseSchedule,
    dataset: &ToyDataset,
    cfg: &FpTrainConfig,
    master_seed: u64,
) -> Result<(ParamVector, FpTrainReport)> {
    if cfg.batch_size == 0 || cfg.train_size == 0 || cfg.val_size == 0 {
        return Err(Error::invalid("fp training", "sizes must be positive"));
    }
    let t_steps = schedule.t_steps();
    let mut data_rng = stream(master_seed, "fp-data", 0);
    let train = dataset.sample(cfg.train_size, &mut data_rng)?;

    // A fixed noised validation batch makes loss values comparable across
    // iterations and runs.
    let mut val_rng = stream(master_seed, "fp-val", 0);
    let val_x0 = dataset.sample(cfg.val_size, &mut val_rng)?;
    let mut val_ts = Vec::with_capacity(cfg.val_size);
    let mut val_noise = Vec::with_capacity(cfg.val_size * 2);
    for _ in 0..cfg.val_size {
        val_ts.push(val_rng.random_range(0..t_steps));
        val_noise.push(StandardNormal.sample(&mut val_rng));
        val_noise.push(StandardNormal.sample(&mut val_rng));
    }
    let val_noise = Tensor::new(vec![cfg.val_size, 2], val_noise)?;
    let mut val_xt = Vec::with_capacity(cfg.val_size * 2);
    for i in 0..cfg.val_size {
        let ab = schedule.alpha_bar(val_ts[i])?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0 = val_x0.row_slice(i)?;
        let nz = val_noise.row_slice(i)?;
        val_xt.push(sa * x0[0] + sn * nz[0]);
        val_xt.push(sa * x0[1] + sn * nz[1]);
    }
    let val_xt = Tensor::new(vec![cfg.val_size, 2], val_xt)?;

    let val_loss = |params: &ParamVector| -> Result<f64> {
        let out = arch.forward(params, &val_xt, &val_ts)?;
        let diff = out.sub(&val_noise)?;
        let loss = diff.sq_norm() / cfg.val_size as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "fp validation loss".to_string(),
            });
        }
        Ok(loss)
    };

    let mut params = init;
    let initial_val_loss = val_loss(&params)?;
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut train_rng = stream(master_seed, "fp-train", 0);

    for iter in 0..cfg.iters {
        let b = cfg.batch_size;
        let mut xs = Vec::with_capacity(b * 2);
        let mut ts = Vec::with_capacity(b);
        let mut noise = Vec::with_capacity(b * 2);
        for _ in 0..b {
            let idx = train_rng.random_range(0..cfg.train_size);
            let t = train_rng.random_range(0..t_steps);
            let row = train.row_slice(idx)?;
            let ab = schedule.alpha_bar(t)?;
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for d in 0..2 {
                let z: f64 = StandardNormal.sample(&mut train_rng);
                noise.push(z);
                xs.push(sa * row[d] + sn * z);
            }
            ts.push(t);
        }
        let x = Tensor::new(vec![b, 2], xs)?;
        let target = Tensor::new(vec![b, 2], noise)?;
        let mut tape = arch.forward_record(&params, &x, &ts)?;
        let out = tape.output_value()?;
        let diff = out.sub(&target)?;
        let loss = diff.sq_norm() / b as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                stage: "fp training".to_string(),
                iteration: iter,
                loss,
            });
        }
        let seed = diff.map(|d| 2.0 * d / b as f64);
        let grad = tape.backward(&seed)?;
        opt.step(params.data_mut(), grad.data());
    }

    let final_val_loss = val_loss(&params)?;
    let report = FpTrainReport {
        initial_val_loss,
        final_val_loss,
        iterations: cfg.iters,
    };
    Ok((params, report))
}
