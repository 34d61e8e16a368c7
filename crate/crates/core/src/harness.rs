//! Streaming correlated noise and a small DP-FTRL training loop.
//!
//! [`NoiseStream`] emits the rows of `C^{-1} Z` one at a time by forward
//! substitution, keeping only the state its family needs. [`train`] runs
//! clipped, noised gradient descent on a synthetic linear regression task.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batching::{assign, practical_batches, shuffle_fixed, PracticalBatch, SENTINEL};
use crate::error::{Error, Result};
use crate::matrix::{ParticipationSchema, Representation, StrategyMatrix};

#[derive(Clone, Debug)]
enum StreamState {
    /// All previous solved rows.
    Dense {
        matrix: DMatrix<f64>,
        history: Vec<Vec<f64>>,
    },
    /// Most recent rows, newest first, at most `band_width - 1`.
    Banded {
        diagonals: Vec<Vec<f64>>,
        recent: VecDeque<Vec<f64>>,
    },
    /// Most recent rows, newest first, at most `n - 1`.
    Toeplitz {
        coeffs: Vec<f64>,
        recent: VecDeque<Vec<f64>>,
    },
    /// `buffers[m] = sum_{k >= 1} theta_m^(k-1) u_{i-k}`.
    Blt {
        weights: Vec<f64>,
        decays: Vec<f64>,
        buffers: Vec<Vec<f64>>,
    },
}

/// Solves `C u = z` one row at a time.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    order: usize,
    dim: usize,
    step: usize,
    state: StreamState,
}

impl NoiseStream {
    pub fn new(strategy: &StrategyMatrix, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "model dimension must be positive".into(),
            ));
        }
        let state = match strategy.representation() {
            Representation::Dense(m) => StreamState::Dense {
                matrix: m.clone(),
                history: Vec::new(),
            },
            Representation::Banded { diagonals } => StreamState::Banded {
                diagonals: diagonals.clone(),
                recent: VecDeque::new(),
            },
            Representation::Toeplitz(c) => StreamState::Toeplitz {
                coeffs: c.clone(),
                recent: VecDeque::new(),
            },
            Representation::Blt { weights, decays } => StreamState::Blt {
                weights: weights.clone(),
                decays: decays.clone(),
                buffers: vec![vec![0.0; dim]; weights.len()],
            },
        };
        Ok(Self {
            order: strategy.order(),
            dim,
            step: 0,
            state,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Number of reals currently held as state.
    pub fn state_len(&self) -> usize {
        match &self.state {
            StreamState::Dense { history, .. } => history.len() * self.dim,
            StreamState::Banded { recent, .. } | StreamState::Toeplitz { recent, .. } => {
                recent.len() * self.dim
            }
            StreamState::Blt { buffers, .. } => buffers.len() * self.dim,
        }
    }

    /// Row `i` of `C^{-1} Z` given row `i` of `Z`.
    pub fn noise_next(&mut self, z: &[f64]) -> Result<Vec<f64>> {
        if self.step >= self.order {
            return Err(Error::StreamExhausted(self.order));
        }
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: z.len(),
            });
        }
        let i = self.step;
        let mut u = z.to_vec();
        match &mut self.state {
            StreamState::Dense { matrix, history } => {
                for (k, row) in history.iter().enumerate() {
                    axpy(&mut u, -matrix[(i, k)], row);
                }
                scale(&mut u, 1.0 / matrix[(i, i)]);
                history.push(u.clone());
            }
            StreamState::Banded { diagonals, recent } => {
                for (lag, row) in recent.iter().enumerate() {
                    let k = lag + 1;
                    axpy(&mut u, -diagonals[k][i - k], row);
                }
                scale(&mut u, 1.0 / diagonals[0][i]);
                push_recent(recent, u.clone(), diagonals.len() - 1);
            }
            StreamState::Toeplitz { coeffs, recent } => {
                for (lag, row) in recent.iter().enumerate() {
                    axpy(&mut u, -coeffs[lag + 1], row);
                }
                scale(&mut u, 1.0 / coeffs[0]);
                push_recent(recent, u.clone(), coeffs.len() - 1);
            }
            StreamState::Blt {
                weights,
                decays,
                buffers,
            } => {
                for (w, buf) in weights.iter().zip(buffers.iter()) {
                    axpy(&mut u, -w, buf);
                }
                for (theta, buf) in decays.iter().zip(buffers.iter_mut()) {
                    for (b, x) in buf.iter_mut().zip(&u) {
                        *b = x + theta * *b;
                    }
                }
            }
        }
        self.step += 1;
        Ok(u)
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    if a != 0.0 {
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += a * xi;
        }
    }
}

fn scale(y: &mut [f64], a: f64) {
    if a != 1.0 {
        for v in y.iter_mut() {
            *v *= a;
        }
    }
}

fn push_recent(recent: &mut VecDeque<Vec<f64>>, row: Vec<f64>, cap: usize) {
    if cap == 0 {
        return;
    }
    recent.push_front(row);
    recent.truncate(cap);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Balls-in-bins batches padded or truncated to `B`.
    PracticalBib,
    /// Shuffle once into fixed batches of size `B`.
    ShuffleFixed,
    /// Practical balls-in-bins batches, run with the unamplified sigma.
    UnamplifiedSigma,
}

fn default_clip() -> f64 {
    1.0
}

fn default_label_noise() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub model_dim: usize,
    pub dataset_size: usize,
    pub schema: ParticipationSchema,
    pub batch_size: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    pub data_seed: u64,
    pub assignment_seed: u64,
    pub noise_seed: u64,
    pub mode: TrainingMode,
    /// Standard deviation of the label noise in the synthetic task.
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
}

impl TrainingConfig {
    fn validate(&self, strategy: &StrategyMatrix, sigma: f64) -> Result<()> {
        if self.model_dim == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "model dimension and batch size must be positive".into(),
            ));
        }
        if strategy.order() != self.schema.iterations() {
            return Err(Error::DimensionMismatch {
                expected: self.schema.iterations(),
                actual: strategy.order(),
            });
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "clip norm {} must be positive",
                self.clip_norm
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma {sigma} must be finite and >= 0"
            )));
        }
        Ok(())
    }
}

/// Linear regression data `y = <x, w*> + noise` with standard Gaussian features.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub true_weights: Vec<f64>,
}

impl SyntheticTask {
    pub fn generate(dataset_size: usize, dim: usize, label_noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let true_weights: Vec<f64> = (0..dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut features = Vec::with_capacity(dataset_size);
        let mut labels = Vec::with_capacity(dataset_size);
        for _ in 0..dataset_size {
            let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let y = dot(&x, &true_weights) + label_noise * rng.sample::<f64, _>(StandardNormal);
            features.push(x);
            labels.push(y);
        }
        Self {
            features,
            labels,
            true_weights,
        }
    }

    /// Mean of `(<x, w> - y)^2 / 2`.
    pub fn loss(&self, w: &[f64]) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .features
            .iter()
            .zip(&self.labels)
            .map(|(x, y)| 0.5 * (dot(x, w) - y).powi(2))
            .sum();
        total / self.labels.len() as f64
    }

    /// Gradient of the example loss, `(<x, w> - y) x`.
    pub fn example_gradient(&self, example: usize, w: &[f64]) -> Vec<f64> {
        let x = &self.features[example];
        let r = dot(x, w) - self.labels[example];
        x.iter().map(|v| r * v).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingStep {
    pub step: usize,
    /// Full-dataset loss after the update.
    pub loss: f64,
    pub grad_norm: f64,
    pub noise_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub mode: TrainingMode,
    pub sigma: f64,
    pub initial_loss: f64,
    pub steps: Vec<TrainingStep>,
    pub final_model: Vec<f64>,
    pub truncated_examples: usize,
    pub padded_slots: usize,
}

impl TrainingTrace {
    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(self.initial_loss, |s| s.loss)
    }

    /// Writes `step,loss,grad_norm,noise_norm`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.steps {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Batches for the configured mode, one per slot of an epoch.
pub fn training_batches(config: &TrainingConfig) -> Result<Vec<PracticalBatch>> {
    let b = config.schema.batches_per_epoch();
    match config.mode {
        TrainingMode::PracticalBib | TrainingMode::UnamplifiedSigma => practical_batches(
            &assign(config.dataset_size, b, config.assignment_seed)?,
            config.batch_size,
        ),
        TrainingMode::ShuffleFixed => shuffle_fixed(
            config.dataset_size,
            b,
            config.batch_size,
            config.assignment_seed,
        ),
    }
}

/// Clipped, correlated-noise gradient descent with momentum.
///
/// Iteration `i` uses batch `i mod b`. The update direction is
/// `sum_x clip(g_x) / B + (sigma * clip / B) * (C^{-1} Z)[i]`, fed through
/// heavy-ball momentum; padding slots contribute nothing to the sum.
pub fn train(
    config: &TrainingConfig,
    strategy: &StrategyMatrix,
    sigma: f64,
) -> Result<TrainingTrace> {
    config.validate(strategy, sigma)?;
    let task = SyntheticTask::generate(
        config.dataset_size,
        config.model_dim,
        config.label_noise,
        config.data_seed,
    );
    train_on(&task, config, strategy, sigma)
}

/// As [`train`], on a caller-supplied task.
pub fn train_on(
    task: &SyntheticTask,
    config: &TrainingConfig,
    strategy: &StrategyMatrix,
    sigma: f64,
) -> Result<TrainingTrace> {
    config.validate(strategy, sigma)?;
    if task.labels.len() != config.dataset_size || task.true_weights.len() != config.model_dim {
        return Err(Error::InvalidParameter(
            "task does not match the configuration".into(),
        ));
    }
    let p = config.model_dim;
    let batches = training_batches(config)?;
    let mut stream = NoiseStream::new(strategy, p)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
    let inv_batch = 1.0 / config.batch_size as f64;
    let noise_scale = sigma * config.clip_norm * inv_batch;

    let mut w = vec![0.0; p];
    let mut velocity = vec![0.0; p];
    let mut steps = Vec::with_capacity(config.schema.iterations());
    let initial_loss = task.loss(&w);

    for i in 0..config.schema.iterations() {
        let batch = &batches[i % batches.len()];
        let mut grad = vec![0.0; p];
        for &x in &batch.example_indices {
            if x == SENTINEL {
                continue;
            }
            let mut g = task.example_gradient(x, &w);
            let gn = norm(&g);
            if gn > config.clip_norm {
                scale(&mut g, config.clip_norm / gn);
            }
            assert!(
                norm(&g) <= config.clip_norm * (1.0 + 1e-12),
                "clipped gradient exceeds the clip norm"
            );
            axpy(&mut grad, 1.0, &g);
        }
        scale(&mut grad, inv_batch);
        let grad_norm = norm(&grad);

        let z: Vec<f64> = (0..p).map(|_| noise_rng.sample(StandardNormal)).collect();
        let mut noise = stream.noise_next(&z)?;
        scale(&mut noise, noise_scale);
        let noise_norm = norm(&noise);

        for k in 0..p {
            velocity[k] = config.momentum * velocity[k] + (grad[k] + noise[k]);
            w[k] -= config.learning_rate * velocity[k];
        }
        steps.push(TrainingStep {
            step: i + 1,
            loss: task.loss(&w),
            grad_norm,
            noise_norm,
        });
    }

    Ok(TrainingTrace {
        mode: config.mode,
        sigma,
        initial_loss,
        steps,
        final_model: w,
        truncated_examples: batches.iter().map(|b| b.truncated_count).sum(),
        padded_slots: batches.iter().map(|b| b.pad_count()).sum(),
    })
}
