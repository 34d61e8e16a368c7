//! Gradient descent on Toeplitz and BLT strategies for prefix-sum RMSE under
//! balls-in-bins amplification.
//!
//! The objective is `sigma*(C) * ||A C^{-1}||_F`, where `sigma*(C)` solves
//! `delta_hat(sigma; C) = delta / tau` on a fixed Monte Carlo sample. Its
//! gradient uses the implicit function theorem:
//! `d sigma / d theta = -(d delta_hat / d theta) / (d delta_hat / d sigma)`.
//!
//! Derivatives of `delta_hat` need the full noise vectors `Z` (not just their
//! projections), so optimization works on a [`FullNoiseSample`]. The same `Z`
//! is reused for every candidate within a step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{
    calibrate_with_base, Adjacency, BisectionOptions, Calibrator, Direction, FullNoiseSample,
    DEFAULT_TAU,
};
use crate::baseline::calibrate_gaussian_sigma;
use crate::error::{Error, Result};
use crate::matrix::{
    blt_coeffs, toeplitz_inverse_coeffs, ModeSet, ParticipationSchema, StrategyMatrix,
};
use crate::numerics::{derive_seed, pairwise_sum};

const DECAY_FLOOR: f64 = 1e-3;
const MAX_HALVINGS: usize = 10;
const MAX_STALLED_STEPS: usize = 10;
const MAX_LR_GROWTH: f64 = 1024.0;
/// `|d delta / d sigma|` below this multiple of `delta / sigma` is treated as degenerate.
const DEGENERACY_RATIO: f64 = 1e-3;
const FINAL_SEED_TAG: u64 = u64::MAX;

/// Free parameters of an optimizable family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum StrategyParams {
    /// All coefficients `c_0..c_{n-1}`; the optimizer holds `c_0 = 1`.
    Toeplitz {
        coeffs: Vec<f64>,
    },
    Blt {
        weights: Vec<f64>,
        decays: Vec<f64>,
    },
}

impl StrategyParams {
    pub fn identity_toeplitz(n: usize) -> Self {
        let mut coeffs = vec![0.0; n];
        coeffs[0] = 1.0;
        Self::Toeplitz { coeffs }
    }

    /// `w_m = 0.1`, decays evenly spaced over `[0.3, 0.9]`.
    pub fn default_blt(buffers: usize) -> Self {
        let decays = if buffers == 1 {
            vec![0.6]
        } else {
            (0..buffers)
                .map(|m| 0.3 + 0.6 * m as f64 / (buffers - 1) as f64)
                .collect()
        };
        Self::Blt {
            weights: vec![0.1; buffers],
            decays,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Toeplitz { coeffs } => coeffs.len(),
            Self::Blt { weights, decays } => weights.len() + decays.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            Self::Toeplitz { coeffs } => coeffs.clone(),
            Self::Blt { weights, decays } => weights.iter().chain(decays).copied().collect(),
        }
    }

    /// Same family with new values, laid out as in [`Self::to_vec`].
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: values.len(),
            });
        }
        Ok(match self {
            Self::Toeplitz { .. } => Self::Toeplitz {
                coeffs: values.to_vec(),
            },
            Self::Blt { weights, .. } => {
                let (w, t) = values.split_at(weights.len());
                Self::Blt {
                    weights: w.to_vec(),
                    decays: t.to_vec(),
                }
            }
        })
    }

    /// Toeplitz coefficients of the order-`n` matrix.
    pub fn coeffs(&self, n: usize) -> Vec<f64> {
        match self {
            Self::Toeplitz { coeffs } => {
                let mut c = coeffs.clone();
                c.resize(n, 0.0);
                c
            }
            Self::Blt { weights, decays } => blt_coeffs(weights, decays, n),
        }
    }

    pub fn matrix(&self, n: usize) -> Result<StrategyMatrix> {
        match self {
            Self::Toeplitz { coeffs } => StrategyMatrix::toeplitz_with_order(coeffs, n),
            Self::Blt { weights, decays } => StrategyMatrix::blt(weights, decays, n),
        }
    }

    /// Pulls a gradient over Toeplitz coefficients back to these parameters.
    pub fn pull_back(&self, d_coeffs: &[f64]) -> Vec<f64> {
        match self {
            Self::Toeplitz { coeffs } => {
                let mut g = d_coeffs.to_vec();
                g.resize(coeffs.len(), 0.0);
                g
            }
            Self::Blt { weights, decays } => {
                let d = weights.len();
                let mut g = vec![0.0; 2 * d];
                for m in 0..d {
                    let (w, t) = (weights[m], decays[m]);
                    // c_k = sum_m w_m t_m^(k-1) for k >= 1.
                    let mut power = 1.0;
                    let mut prev_power = 0.0;
                    for (k, dc) in d_coeffs.iter().enumerate().skip(1) {
                        g[m] += dc * power;
                        g[d + m] += dc * w * (k - 1) as f64 * prev_power;
                        prev_power = power;
                        power *= t;
                    }
                }
                g
            }
        }
    }

    /// Feasible point nearest in each coordinate: `c_0 = 1` and `c_k >= 0`, or `w >= 0` and clamped decays.
    pub fn project(&self) -> Self {
        match self {
            Self::Toeplitz { coeffs } => {
                let mut c: Vec<f64> = coeffs.iter().map(|v| v.max(0.0)).collect();
                c[0] = 1.0;
                Self::Toeplitz { coeffs: c }
            }
            Self::Blt { weights, decays } => Self::Blt {
                weights: weights.iter().map(|w| w.max(0.0)).collect(),
                decays: decays
                    .iter()
                    .map(|t| t.clamp(DECAY_FLOOR, 1.0 - DECAY_FLOOR))
                    .collect(),
            },
        }
    }

    /// Mask of coordinates the optimizer may move.
    fn free(&self) -> Vec<bool> {
        match self {
            Self::Toeplitz { coeffs } => (0..coeffs.len()).map(|k| k > 0).collect(),
            Self::Blt { .. } => vec![true; self.len()],
        }
    }
}

/// Derivatives of `delta_hat` at a fixed sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaPartials {
    pub delta_hat: f64,
    /// The direction whose estimate was larger (and is differentiated).
    pub direction: Direction,
    pub d_sigma: f64,
    /// Gradient over the Toeplitz coefficients `c_0..c_{n-1}`.
    pub d_coeffs: Vec<f64>,
    /// Gradient over the family parameters.
    pub d_params: Vec<f64>,
}

#[derive(Clone, Debug)]
struct DirectionAccum {
    sum: f64,
    d_sigma: f64,
    /// Row-major `b x n` gradient with respect to the mode vectors.
    d_modes: Vec<f64>,
}

impl DirectionAccum {
    fn zeros(len: usize) -> Self {
        Self {
            sum: 0.0,
            d_sigma: 0.0,
            d_modes: vec![0.0; len],
        }
    }
}

/// Per-sample contribution of one direction; returns nothing when the clamp is active.
#[allow(clippy::too_many_arguments)]
fn accumulate(
    acc: &mut DirectionAccum,
    direction: Direction,
    eps: f64,
    sigma: f64,
    i: usize,
    z: &[f64],
    modes: &[Vec<f64>],
    gram_row: &[f64],
    half_diag: &[f64],
    p: &[f64],
    s: &mut [f64],
    x: &mut [f64],
) {
    let b = modes.len();
    let inv_var = 1.0 / (sigma * sigma);
    let mut max = f64::NEG_INFINITY;
    for k in 0..b {
        let shift = if direction == Direction::Add {
            gram_row[k]
        } else {
            0.0
        };
        s[k] = (shift - half_diag[k]) * inv_var + p[k] / sigma;
        max = max.max(s[k]);
    }
    let mut total = 0.0;
    for &sk in s.iter() {
        total += (sk - max).exp();
    }
    let lse = max + (total / b as f64).ln();
    let (y, sign) = match direction {
        Direction::Add => (lse, 1.0),
        Direction::Remove => (-lse, -1.0),
    };
    if y <= eps {
        return;
    }
    let coef = (eps - y).exp();
    acc.sum += -(eps - y).exp_m1();

    let mut dy_dsigma = 0.0;
    for k in 0..b {
        let w = (s[k] - max).exp() / total;
        dy_dsigma += w * (p[k] * inv_var - 2.0 * s[k] / sigma);
    }
    acc.d_sigma += sign * coef * dy_dsigma;

    let n = z.len();
    for r in 0..n {
        x[r] = sigma * z[r];
    }
    if direction == Direction::Add {
        for (xr, mr) in x.iter_mut().zip(&modes[i]) {
            *xr += mr;
        }
    }
    let scale = sign * coef * inv_var;
    for k in 0..b {
        let w = (s[k] - max).exp() / total;
        if w == 0.0 {
            continue;
        }
        let f = scale * w;
        let row = &mut acc.d_modes[k * n..(k + 1) * n];
        for r in 0..n {
            row[r] += f * (x[r] - modes[k][r]);
        }
        if direction == Direction::Add {
            // x = m_i + sigma Z also moves with m_i.
            let row_i = &mut acc.d_modes[i * n..(i + 1) * n];
            for r in 0..n {
                row_i[r] += f * modes[k][r];
            }
        }
    }
}

/// `delta_hat` and its derivatives in `sigma` and the family parameters.
///
/// For `Both`, the direction with the larger estimate is differentiated.
pub fn delta_hat_partials(
    sigma: f64,
    params: &StrategyParams,
    schema: &ParticipationSchema,
    sample: &FullNoiseSample,
    eps: f64,
    adjacency: Adjacency,
) -> Result<DeltaPartials> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma {sigma} must be positive"
        )));
    }
    let n = schema.iterations();
    let c = params.coeffs(n);
    let modes = params.matrix(n)?.mode_vectors(schema)?;
    if sample.dim() != n || sample.batches() != modes.len() {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: sample.dim(),
        });
    }
    let b = modes.len();
    let gram = modes.gram();
    let gram_rows: Vec<Vec<f64>> = (0..b)
        .map(|i| (0..b).map(|j| gram[(i, j)]).collect())
        .collect();
    let half_diag: Vec<f64> = (0..b).map(|k| 0.5 * gram[(k, k)]).collect();
    let directions = adjacency.directions();

    let chunk = crate::accountant::DEFAULT_CHUNK_SIZE;
    let indices: Vec<usize> = (0..sample.sample_count()).collect();
    let partial: Vec<Vec<DirectionAccum>> = indices
        .par_chunks(chunk)
        .map(|js| {
            let mut accs: Vec<DirectionAccum> = directions
                .iter()
                .map(|_| DirectionAccum::zeros(b * n))
                .collect();
            let mut p = vec![0.0; b];
            let mut s = vec![0.0; b];
            let mut x = vec![0.0; n];
            for &j in js {
                let z = sample.noise(j);
                let i = sample.mode_indices()[j] as usize;
                for (pk, mode) in p.iter_mut().zip(modes.modes()) {
                    *pk = crate::matrix::dot(z, mode);
                }
                for (acc, &dir) in accs.iter_mut().zip(directions) {
                    accumulate(
                        acc,
                        dir,
                        eps,
                        sigma,
                        i,
                        z,
                        modes.modes(),
                        &gram_rows[i],
                        &half_diag,
                        &p,
                        &mut s,
                        &mut x,
                    );
                }
            }
            accs
        })
        .collect();

    let m = sample.sample_count() as f64;
    let mut best: Option<(Direction, f64, f64, Vec<f64>)> = None;
    for (d, &dir) in directions.iter().enumerate() {
        let sum = pairwise_sum(&partial.iter().map(|a| a[d].sum).collect::<Vec<_>>()) / m;
        if best.as_ref().is_some_and(|(_, v, _, _)| *v >= sum) {
            continue;
        }
        let d_sigma = pairwise_sum(&partial.iter().map(|a| a[d].d_sigma).collect::<Vec<_>>()) / m;
        let d_modes: Vec<f64> = (0..b * n)
            .map(|q| pairwise_sum(&partial.iter().map(|a| a[d].d_modes[q]).collect::<Vec<_>>()) / m)
            .collect();
        best = Some((dir, sum, d_sigma, d_modes));
    }
    let (direction, delta_hat, d_sigma, d_modes) = best.expect("at least one direction");

    // m_k[r] = sum_e |c_{r - (b e + k)}|.
    let mut d_coeffs = vec![0.0; n];
    for col in 0..n {
        let k = col % b;
        for (l, dc) in d_coeffs.iter_mut().enumerate().take(n - col) {
            let sign = if c[l] < 0.0 { -1.0 } else { 1.0 };
            *dc += sign * d_modes[k * n + col + l];
        }
    }
    let d_params = params.pull_back(&d_coeffs);
    Ok(DeltaPartials {
        delta_hat: delta_hat.clamp(0.0, 1.0),
        direction,
        d_sigma,
        d_coeffs,
        d_params,
    })
}

/// `d sigma / d theta = -(d delta / d theta) / (d delta / d sigma)` on the calibration constraint.
pub fn implicit_sigma_gradient(
    partials: &DeltaPartials,
    delta: f64,
    sigma: f64,
) -> Result<Vec<f64>> {
    if !(partials.d_sigma < 0.0) || partials.d_sigma.abs() < DEGENERACY_RATIO * delta / sigma {
        return Err(Error::DegenerateConstraint(partials.d_sigma));
    }
    Ok(partials
        .d_params
        .iter()
        .map(|g| -g / partials.d_sigma)
        .collect())
}

/// `||A T(c)^{-1}||_F` and its gradient over `c`.
pub fn prefix_error_norm_gradient(c: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = c.len();
    let g = toeplitz_inverse_coeffs(c, n)?;
    let mut h = vec![0.0; n];
    let mut running = 0.0;
    for k in 0..n {
        running += g[k];
        h[k] = running;
    }
    let norm = h
        .iter()
        .enumerate()
        .map(|(k, hk)| (n - k) as f64 * hk * hk)
        .sum::<f64>()
        .sqrt();
    // d g_t / d c_l = -(g * g)_{t-l}, so d h_k / d c_l = -q_{k-l} with q = cumsum(g * g).
    let gg = crate::matrix::toeplitz_convolve(&g, &g, n);
    let mut q = vec![0.0; n];
    let mut running = 0.0;
    for j in 0..n {
        running += gg[j];
        q[j] = running;
    }
    let grad = (0..n)
        .map(|l| {
            -(l..n)
                .map(|k| (n - k) as f64 * h[k] * q[k - l])
                .sum::<f64>()
                / norm
        })
        .collect();
    Ok((norm, grad))
}

/// Objective `sigma * ||A C^{-1}||_F` and its gradient, given `d sigma / d theta`.
pub fn rmse_gradient(
    params: &StrategyParams,
    n: usize,
    sigma: f64,
    d_sigma_params: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if d_sigma_params.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: d_sigma_params.len(),
        });
    }
    let (norm, d_norm_coeffs) = prefix_error_norm_gradient(&params.coeffs(n))?;
    let d_norm = params.pull_back(&d_norm_coeffs);
    let grad = d_norm
        .iter()
        .zip(d_sigma_params)
        .map(|(dn, ds)| sigma * dn + norm * ds)
        .collect();
    Ok((sigma * norm, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Family {
    Toeplitz,
    Blt { buffers: usize },
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub family: Family,
    pub epsilon: f64,
    /// Verification threshold; calibration targets `delta / tau`.
    pub delta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub schema: ParticipationSchema,
    pub steps: usize,
    pub learning_rate: f64,
    pub samples_per_step: usize,
    pub final_sample_count: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub resample_each_step: bool,
    #[serde(default)]
    pub adjacency: Adjacency,
    /// Starting point; identity Toeplitz or the default BLT when absent.
    #[serde(default)]
    pub initial: Option<StrategyParams>,
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if self.samples_per_step == 0 || self.final_sample_count < self.samples_per_step {
            return Err(Error::InvalidParameter(
                "need 0 < samples_per_step <= final_sample_count".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if let Family::Blt { buffers: 0 } = self.family {
            return Err(Error::InvalidParameter(
                "BLT needs at least one buffer".into(),
            ));
        }
        crate::accountant::PrivacyParams::new(self.epsilon, self.delta)?;
        if !(self.tau >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "tau {} must be >= 1",
                self.tau
            )));
        }
        Ok(())
    }

    fn initial_params(&self) -> Result<StrategyParams> {
        let n = self.schema.iterations();
        let params = match (&self.initial, self.family) {
            (Some(p), _) => p.clone(),
            (None, Family::Toeplitz) => StrategyParams::identity_toeplitz(n),
            (None, Family::Blt { buffers }) => StrategyParams::default_blt(buffers),
        };
        if let StrategyParams::Toeplitz { coeffs } = &params {
            if coeffs.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: coeffs.len(),
                });
            }
        }
        Ok(params.project())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Objective at the start of the step, on that step's sample.
    pub rmse: f64,
    pub sigma: f64,
    pub grad_norm: f64,
    /// Step size that was accepted, or the last one tried.
    pub learning_rate: f64,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub steps: Vec<StepRecord>,
    pub final_params: StrategyParams,
    pub final_sigma: f64,
    pub final_rmse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopped_early: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub params: StrategyParams,
    pub matrix: StrategyMatrix,
    /// From the final high-sample calibration.
    pub sigma: f64,
    pub rmse: f64,
    pub trace: OptimizationTrace,
}

/// Calibrated sigma for `params` on a fixed full-noise sample.
pub fn calibrate_on_sample(
    params: &StrategyParams,
    schema: &ParticipationSchema,
    sample: &FullNoiseSample,
    eps: f64,
    target_delta: f64,
    adjacency: Adjacency,
    options: BisectionOptions,
) -> Result<(f64, ModeSet)> {
    let modes = params.matrix(schema.iterations())?.mode_vectors(schema)?;
    let base = sample.project(&modes)?;
    let sigma_hi = calibrate_gaussian_sigma(eps, target_delta, modes.max_norm())?;
    let cal = calibrate_with_base(
        eps,
        target_delta,
        &base,
        modes.gram(),
        adjacency,
        sigma_hi,
        options,
    )?;
    Ok((cal.sigma, modes))
}

struct Evaluation {
    objective: f64,
    sigma: f64,
}

fn evaluate(
    params: &StrategyParams,
    config: &OptimizerConfig,
    sample: &FullNoiseSample,
) -> Result<Evaluation> {
    let n = config.schema.iterations();
    let target = config.delta / config.tau;
    let (sigma, _) = calibrate_on_sample(
        params,
        &config.schema,
        sample,
        config.epsilon,
        target,
        config.adjacency,
        BisectionOptions::default(),
    )?;
    let norm = params.matrix(n)?.prefix_error_norm();
    Ok(Evaluation {
        objective: sigma * norm,
        sigma,
    })
}

/// Projected gradient descent with backtracking on the calibrated RMSE.
///
/// Each step draws (or reuses) `samples_per_step` noise vectors, solves for
/// sigma, and halves the step up to 10 times until the objective on the same
/// sample decreases. The reported sigma and RMSE come from a separate
/// calibration with `final_sample_count` samples and an independent seed.
pub fn optimize(config: &OptimizerConfig) -> Result<OptimizationResult> {
    config.validate()?;
    let n = config.schema.iterations();
    let b = config.schema.batches_per_epoch();
    let target = config.delta / config.tau;
    let mut params = config.initial_params()?;
    let mut records = Vec::with_capacity(config.steps);
    let mut lr = config.learning_rate;
    let mut stalled = 0;
    let mut stopped_early = None;
    let fixed_sample = if config.resample_each_step || config.steps == 0 {
        None
    } else {
        Some(FullNoiseSample::draw(
            n,
            b,
            config.samples_per_step,
            derive_seed(config.seed, 0),
        )?)
    };

    for step in 0..config.steps {
        let drawn;
        let sample = match &fixed_sample {
            Some(s) => s,
            None => {
                drawn = FullNoiseSample::draw(
                    n,
                    b,
                    config.samples_per_step,
                    derive_seed(config.seed, step as u64),
                )?;
                &drawn
            }
        };
        let here = evaluate(&params, config, sample)?;
        let mut record = StepRecord {
            step,
            rmse: here.objective,
            sigma: here.sigma,
            grad_norm: f64::NAN,
            learning_rate: lr,
            accepted: false,
            note: None,
        };

        let partials = delta_hat_partials(
            here.sigma,
            &params,
            &config.schema,
            sample,
            config.epsilon,
            config.adjacency,
        )?;
        match implicit_sigma_gradient(&partials, target, here.sigma) {
            Err(Error::DegenerateConstraint(slope)) => {
                record.note = Some(format!(
                    "degenerate constraint (d delta/d sigma = {slope:e}); step skipped"
                ));
            }
            Err(e) => return Err(e),
            Ok(d_sigma) => {
                let (_, mut grad) = rmse_gradient(&params, n, here.sigma, &d_sigma)?;
                for (g, free) in grad.iter_mut().zip(params.free()) {
                    if !free {
                        *g = 0.0;
                    }
                }
                record.grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                let current = params.to_vec();
                let mut trial_lr = lr;
                for _ in 0..=MAX_HALVINGS {
                    let moved: Vec<f64> = current
                        .iter()
                        .zip(&grad)
                        .map(|(p, g)| p - trial_lr * g)
                        .collect();
                    let candidate = params.with_values(&moved)?.project();
                    if candidate != params {
                        if let Ok(eval) = evaluate(&candidate, config, sample) {
                            if eval.objective < here.objective {
                                params = candidate;
                                record.accepted = true;
                                break;
                            }
                        }
                    }
                    trial_lr *= 0.5;
                }
                record.learning_rate = if record.accepted {
                    trial_lr
                } else {
                    trial_lr * 2.0
                };
                if record.accepted {
                    lr = (2.0 * trial_lr).min(config.learning_rate * MAX_LR_GROWTH);
                }
            }
        }
        stalled = if record.accepted { 0 } else { stalled + 1 };
        records.push(record);
        if stalled >= MAX_STALLED_STEPS {
            stopped_early = Some(format!(
                "no accepted step in {MAX_STALLED_STEPS} consecutive iterations"
            ));
            break;
        }
    }

    let matrix = params.matrix(n)?;
    let final_cal = Calibrator::new(
        config.epsilon,
        config.delta,
        config.final_sample_count,
        derive_seed(config.seed, FINAL_SEED_TAG),
    )
    .with_tau(config.tau)
    .with_adjacency(config.adjacency)
    .calibrate(&matrix, &config.schema)?;
    let rmse = matrix.rmse(final_cal.sigma)?;
    Ok(OptimizationResult {
        params: params.clone(),
        matrix,
        sigma: final_cal.sigma,
        rmse,
        trace: OptimizationTrace {
            steps: records,
            final_params: params,
            final_sigma: final_cal.sigma,
            final_rmse: rmse,
            stopped_early,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::toeplitz_prefix_error_norm;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn blt_pull_back_matches_finite_differences() {
        let p = StrategyParams::Blt {
            weights: vec![0.3, 0.1],
            decays: vec![0.5, 0.8],
        };
        let n = 9;
        let upstream: Vec<f64> = (0..n).map(|k| 0.1 * k as f64 - 0.3).collect();
        let f = |q: &StrategyParams| {
            q.coeffs(n)
                .iter()
                .zip(&upstream)
                .map(|(c, u)| c * u)
                .sum::<f64>()
        };
        let g = p.pull_back(&upstream);
        let v = p.to_vec();
        for k in 0..v.len() {
            let h = 1e-6;
            let mut up = v.clone();
            up[k] += h;
            let mut dn = v.clone();
            dn[k] -= h;
            let fd =
                (f(&p.with_values(&up).unwrap()) - f(&p.with_values(&dn).unwrap())) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn norm_gradient_matches_finite_differences_at_prefix_sum() {
        let n = 6;
        let c = vec![1.0; n];
        let (norm, grad) = prefix_error_norm_gradient(&c).unwrap();
        assert!(rel(norm, (n as f64).sqrt()) < 1e-12);
        for l in 0..n {
            let h = 1e-6;
            let mut up = c.clone();
            up[l] += h;
            let mut dn = c.clone();
            dn[l] -= h;
            let fd = (toeplitz_prefix_error_norm(&up).unwrap()
                - toeplitz_prefix_error_norm(&dn).unwrap())
                / (2.0 * h);
            assert!((fd - grad[l]).abs() < 1e-7, "{l}: {fd} vs {}", grad[l]);
        }
    }

    #[test]
    fn zero_partials_give_zero_sigma_gradient() {
        let partials = DeltaPartials {
            delta_hat: 1e-5,
            direction: Direction::Add,
            d_sigma: -1.0,
            d_coeffs: vec![0.0; 3],
            d_params: vec![0.0; 3],
        };
        assert_eq!(
            implicit_sigma_gradient(&partials, 1e-5, 1.0).unwrap(),
            vec![0.0; 3]
        );
        let flat = DeltaPartials {
            d_sigma: -1e-12,
            ..partials
        };
        assert!(matches!(
            implicit_sigma_gradient(&flat, 1e-5, 1.0),
            Err(Error::DegenerateConstraint(_))
        ));
    }

    #[test]
    fn clamped_samples_give_zero_gradient() {
        let schema = ParticipationSchema::new(2, 2).unwrap();
        let params = StrategyParams::Toeplitz {
            coeffs: vec![1.0, 0.4, 0.2, 0.1],
        };
        let sample = FullNoiseSample::draw(4, 2, 2000, 3).unwrap();
        let p = delta_hat_partials(1.0, &params, &schema, &sample, 1e3, Adjacency::Both).unwrap();
        assert_eq!(p.delta_hat, 0.0);
        assert_eq!(p.d_sigma, 0.0);
        assert!(p.d_params.iter().all(|&g| g == 0.0));
    }

    fn delta_at(
        params: &StrategyParams,
        schema: &ParticipationSchema,
        sample: &FullNoiseSample,
        eps: f64,
        sigma: f64,
        adj: Adjacency,
    ) -> f64 {
        let modes = params
            .matrix(schema.iterations())
            .unwrap()
            .mode_vectors(schema)
            .unwrap();
        let base = sample.project(&modes).unwrap();
        base.estimate_delta(eps, sigma, modes.gram(), adj)
            .unwrap()
            .delta_hat
    }

    #[test]
    fn partials_match_finite_differences() {
        let schema = ParticipationSchema::new(2, 3).unwrap();
        let params = StrategyParams::Toeplitz {
            coeffs: vec![1.0, 0.5, 0.3, 0.2, 0.15, 0.1],
        };
        let sample = FullNoiseSample::draw(6, 2, 20_000, 17).unwrap();
        let (eps, sigma) = (0.5, 1.5);
        for adj in [Adjacency::Add, Adjacency::Remove] {
            let p = delta_hat_partials(sigma, &params, &schema, &sample, eps, adj).unwrap();
            assert!(
                (p.delta_hat - delta_at(&params, &schema, &sample, eps, sigma, adj)).abs() < 1e-12
            );
            let h = 1e-6 * sigma;
            let fd = (delta_at(&params, &schema, &sample, eps, sigma + h, adj)
                - delta_at(&params, &schema, &sample, eps, sigma - h, adj))
                / (2.0 * h);
            assert!(
                rel(p.d_sigma, fd) < 1e-4,
                "{adj:?} sigma: {} vs {fd}",
                p.d_sigma
            );
            let v = params.to_vec();
            for k in 0..v.len() {
                let mut up = v.clone();
                up[k] += 1e-6;
                let mut dn = v.clone();
                dn[k] -= 1e-6;
                let fd = (delta_at(
                    &params.with_values(&up).unwrap(),
                    &schema,
                    &sample,
                    eps,
                    sigma,
                    adj,
                ) - delta_at(
                    &params.with_values(&dn).unwrap(),
                    &schema,
                    &sample,
                    eps,
                    sigma,
                    adj,
                )) / 2e-6;
                assert!(
                    (p.d_params[k] - fd).abs() < 1e-4 * fd.abs().max(1e-3 * p.delta_hat),
                    "{adj:?} c{k}: {} vs {fd}",
                    p.d_params[k]
                );
            }
        }
    }

    #[test]
    fn sigma_gradient_respects_scale_covariance() {
        // sigma*(gamma C) = gamma sigma*(C), so sum_l c_l d sigma/d c_l = sigma.
        let schema = ParticipationSchema::new(3, 1).unwrap();
        let params = StrategyParams::Toeplitz {
            coeffs: vec![1.0, 0.4, 0.2],
        };
        let sample = FullNoiseSample::draw(3, 3, 50_000, 5).unwrap();
        let target = 1e-3;
        let options = BisectionOptions {
            rel_tol: 1e-13,
            max_iter: 300,
        };
        let (sigma, _) = calibrate_on_sample(
            &params,
            &schema,
            &sample,
            1.0,
            target,
            Adjacency::Both,
            options,
        )
        .unwrap();
        let p = delta_hat_partials(sigma, &params, &schema, &sample, 1.0, Adjacency::Both).unwrap();
        let g = implicit_sigma_gradient(&p, target, sigma).unwrap();
        let directional: f64 = g.iter().zip(params.to_vec()).map(|(a, c)| a * c).sum();
        assert!(rel(directional, sigma) < 1e-6, "{directional} vs {sigma}");
    }

    #[test]
    fn projection_restores_constraints() {
        let p = StrategyParams::Toeplitz {
            coeffs: vec![0.7, -0.2, 0.3],
        }
        .project();
        assert_eq!(
            p,
            StrategyParams::Toeplitz {
                coeffs: vec![1.0, 0.0, 0.3]
            }
        );
        let q = StrategyParams::Blt {
            weights: vec![-1.0, 0.2],
            decays: vec![0.0, 1.5],
        }
        .project();
        assert_eq!(
            q,
            StrategyParams::Blt {
                weights: vec![0.0, 0.2],
                decays: vec![1e-3, 1.0 - 1e-3]
            }
        );
        assert!(q.matrix(5).is_ok());
    }

    #[test]
    fn default_blt_layout() {
        let p = StrategyParams::default_blt(3);
        assert_eq!(p.len(), 6);
        let StrategyParams::Blt { weights, decays } = p else {
            panic!()
        };
        assert_eq!(weights, vec![0.1; 3]);
        assert!(
            rel(decays[0], 0.3) < 1e-15
                && rel(decays[1], 0.6) < 1e-15
                && rel(decays[2], 0.9) < 1e-15
        );
    }

    fn small_config(steps: usize) -> OptimizerConfig {
        OptimizerConfig {
            family: Family::Toeplitz,
            epsilon: 1.0,
            delta: 1e-3,
            tau: 1.25,
            schema: ParticipationSchema::new(4, 1).unwrap(),
            steps,
            learning_rate: 0.01,
            samples_per_step: 2000,
            final_sample_count: 20_000,
            seed: 1,
            resample_each_step: true,
            adjacency: Adjacency::Both,
            initial: None,
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let r = optimize(&small_config(0)).unwrap();
        assert_eq!(r.params, StrategyParams::identity_toeplitz(4));
        assert!(r.trace.steps.is_empty());
        assert_eq!(r.rmse, r.matrix.rmse(r.sigma).unwrap());
    }

    #[test]
    fn accepted_steps_keep_feasibility_and_decrease() {
        let r = optimize(&small_config(5)).unwrap();
        let StrategyParams::Toeplitz { coeffs } = &r.params else {
            panic!()
        };
        assert_eq!(coeffs[0], 1.0);
        assert!(coeffs.iter().all(|&c| c >= 0.0));
        assert!(r.trace.steps.iter().any(|s| s.accepted));
        let start = optimize(&small_config(0)).unwrap();
        assert!(r.rmse <= start.rmse * 1.02, "{} vs {}", r.rmse, start.rmse);
    }
}
