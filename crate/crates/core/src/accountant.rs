//! Monte Carlo privacy accounting for balls-in-bins correlated noise.
//!
//! The dominating pair is `P = (1/b) sum_i N(m_i, s^2 I)` against `Q = N(0, s^2 I)`.
//! The privacy loss of a point `x` depends on `x` only through the inner
//! products `x . m_j`, so samples are stored in the `b`-dimensional mode span:
//! a mode index `i` and a vector `u ~ N(0, G)` standing for `(Z . m_j)_j`.
//! Neither depends on sigma, so one base sample serves every sigma tried while
//! calibrating.
//!
//! Sampling is split into fixed-size chunks. Chunk `k` draws from its own
//! ChaCha stream `(seed, k)` and per-chunk sums are combined in a fixed
//! pairwise order, so results depend on `(seed, chunk_size)` only, never on
//! the number of worker threads.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::calibrate_gaussian_sigma;
use crate::error::{Error, Result};
use crate::matrix::{ModeSet, ParticipationSchema, StrategyMatrix};
use crate::numerics::{brent_decreasing, chunk_rng, hockey_term, pairwise_sum};

pub const DEFAULT_CHUNK_SIZE: usize = 4096;
pub const DEFAULT_TAU: f64 = 1.25;
/// Upper end of the epsilon search range.
pub const EPSILON_CEILING: f64 = 128.0;

/// Which neighbouring relation a privacy loss sample describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `X ~ P`, loss `log P/Q`.
    Add,
    /// `X ~ Q`, loss `log Q/P`.
    Remove,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjacency {
    Add,
    Remove,
    /// Worst case of add and remove.
    #[default]
    Both,
}

impl Adjacency {
    pub fn directions(self) -> &'static [Direction] {
        match self {
            Adjacency::Add => &[Direction::Add],
            Adjacency::Remove => &[Direction::Remove],
            Adjacency::Both => &[Direction::Add, Direction::Remove],
        }
    }
}

impl From<Direction> for Adjacency {
    fn from(d: Direction) -> Self {
        match d {
            Direction::Add => Adjacency::Add,
            Direction::Remove => Adjacency::Remove,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon {epsilon} must be finite and >= 0"
            )));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "delta {delta} must lie in (0, 1)"
            )));
        }
        Ok(Self { epsilon, delta })
    }
}

/// A delta estimate with its Monte Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub delta_hat: f64,
    pub std_error: f64,
    pub sample_count: usize,
    pub adjacency: Adjacency,
}

/// Per-direction sums over a set of samples.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn finish(chunks: &[Moments], m: usize, adjacency: Adjacency) -> EstimatorResult {
        let sums: Vec<f64> = chunks.iter().map(|c| c.sum).collect();
        let squares: Vec<f64> = chunks.iter().map(|c| c.sum_sq).collect();
        let sum = pairwise_sum(&sums);
        let sum_sq = pairwise_sum(&squares);
        let mf = m as f64;
        let mean = sum / mf;
        let var = if m > 1 {
            ((sum_sq - sum * mean) / (mf - 1.0)).max(0.0)
        } else {
            0.0
        };
        EstimatorResult {
            delta_hat: mean.clamp(0.0, 1.0),
            std_error: (var / mf).sqrt(),
            sample_count: m,
            adjacency,
        }
    }
}

/// Row-major copy of the Gram matrix with the half-diagonal cached.
#[derive(Clone, Debug)]
pub(crate) struct GramView {
    b: usize,
    entries: Vec<f64>,
    half_diag: Vec<f64>,
}

impl GramView {
    pub(crate) fn new(gram: &DMatrix<f64>) -> Result<Self> {
        let b = gram.nrows();
        if b == 0 || gram.ncols() != b {
            return Err(Error::InvalidParameter(
                "Gram matrix must be square and non-empty".into(),
            ));
        }
        if gram.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "Gram matrix has non-finite entries".into(),
            ));
        }
        let entries = (0..b)
            .flat_map(|i| (0..b).map(move |j| (i, j)))
            .map(|(i, j)| gram[(i, j)])
            .collect();
        let half_diag = (0..b).map(|i| 0.5 * gram[(i, i)]).collect();
        Ok(Self {
            b,
            entries,
            half_diag,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.b..(i + 1) * self.b]
    }

    /// Log-mixture ratio `log (1/b) sum_j exp(s_j)` with `s_j = (shift_j + sigma u_j - |m_j|^2/2) / sigma^2`.
    #[inline]
    fn log_mixture(
        &self,
        shift: Option<&[f64]>,
        u: &[f64],
        sigma: f64,
        scratch: &mut [f64],
    ) -> f64 {
        let inv_var = 1.0 / (sigma * sigma);
        let mut max = f64::NEG_INFINITY;
        for j in 0..self.b {
            let base = shift.map_or(0.0, |s| s[j]);
            let s = (base + sigma * u[j] - self.half_diag[j]) * inv_var;
            scratch[j] = s;
            if s > max {
                max = s;
            }
        }
        let mut total = 0.0;
        for &s in scratch.iter() {
            total += (s - max).exp();
        }
        max + (total / self.b as f64).ln()
    }

    #[inline]
    pub(crate) fn loss(
        &self,
        direction: Direction,
        i: usize,
        u: &[f64],
        sigma: f64,
        scratch: &mut [f64],
    ) -> f64 {
        match direction {
            Direction::Add => self.log_mixture(Some(self.row(i)), u, sigma, scratch),
            Direction::Remove => -self.log_mixture(None, u, sigma, scratch),
        }
    }
}

/// Privacy loss `Y` of one projected sample.
///
/// For `Add`, `x = m_i + sigma Z` and `x . m_j = G[i,j] + sigma u[j]`; for
/// `Remove`, `x = sigma Z` and `i` is ignored.
pub fn log_density_ratio(
    mode_index: usize,
    u: &[f64],
    sigma: f64,
    gram: &DMatrix<f64>,
    direction: Direction,
) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma {sigma} must be positive"
        )));
    }
    let view = GramView::new(gram)?;
    if u.len() != view.b {
        return Err(Error::DimensionMismatch {
            expected: view.b,
            actual: u.len(),
        });
    }
    if mode_index >= view.b {
        return Err(Error::InvalidParameter(format!(
            "mode index {mode_index} out of range"
        )));
    }
    let mut scratch = vec![0.0; view.b];
    Ok(view.loss(direction, mode_index, u, sigma, &mut scratch))
}

/// Square factor `F` with `F F^T = G`: Cholesky, then jittered Cholesky, then a clamped eigendecomposition.
pub(crate) fn gram_factor(gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = gram.nrows();
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "Gram matrix has non-finite entries".into(),
        ));
    }
    if let Some(ch) = Cholesky::new(gram.clone()) {
        return Ok(ch.l());
    }
    let jitter = 1e-12 * gram.trace() / b as f64;
    let mut shifted = gram.clone();
    for i in 0..b {
        shifted[(i, i)] += jitter;
    }
    if let Some(ch) = Cholesky::new(shifted) {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(gram.clone());
    let mut f = eig.eigenvectors.clone();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        for r in 0..b {
            f[(r, k)] *= s;
        }
    }
    Ok(f)
}

/// Sigma-independent draws `(i_j, u_j)` with `i_j` uniform and `u_j ~ N(0, G)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PldBaseSample {
    batches: usize,
    /// 0-based mode indices.
    mode_indices: Vec<u32>,
    /// Row-major `m x b`.
    projected: Vec<f64>,
    seed: u64,
    chunk_size: usize,
}

impl PldBaseSample {
    pub fn draw(modes: &ModeSet, sample_count: usize, seed: u64) -> Result<Self> {
        Self::draw_chunked(modes.gram(), sample_count, seed, DEFAULT_CHUNK_SIZE)
    }

    /// Draws with an explicit chunk size; results are reproducible for a fixed `(seed, chunk_size)`.
    pub fn draw_chunked(
        gram: &DMatrix<f64>,
        sample_count: usize,
        seed: u64,
        chunk_size: usize,
    ) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::InvalidParameter(
                "sample count must be positive".into(),
            ));
        }
        if chunk_size == 0 {
            return Err(Error::InvalidParameter(
                "chunk size must be positive".into(),
            ));
        }
        let b = gram.nrows();
        if b == 0 {
            return Err(Error::InvalidParameter("need at least one mode".into()));
        }
        let factor = gram_factor(gram)?;
        let factor_rows: Vec<f64> = (0..b)
            .flat_map(|r| (0..b).map(move |c| (r, c)))
            .map(|(r, c)| factor[(r, c)])
            .collect();
        let mut mode_indices = vec![0u32; sample_count];
        let mut projected = vec![0.0; sample_count * b];

        mode_indices
            .par_chunks_mut(chunk_size)
            .zip(projected.par_chunks_mut(chunk_size * b))
            .enumerate()
            .for_each(|(k, (idx, proj))| {
                let mut rng = chunk_rng(seed, k as u64);
                let mut w = vec![0.0; b];
                for (slot, u) in idx.iter_mut().zip(proj.chunks_mut(b)) {
                    *slot = rng.random_range(0..b as u32);
                    for wi in w.iter_mut() {
                        *wi = rng.sample(StandardNormal);
                    }
                    for (r, ur) in u.iter_mut().enumerate() {
                        let row = &factor_rows[r * b..(r + 1) * b];
                        *ur = row.iter().zip(&w).map(|(f, x)| f * x).sum();
                    }
                }
            });
        Ok(Self {
            batches: b,
            mode_indices,
            projected,
            seed,
            chunk_size,
        })
    }

    /// Assembles a base sample from precomputed projections.
    pub fn from_parts(
        batches: usize,
        mode_indices: Vec<u32>,
        projected: Vec<f64>,
        seed: u64,
        chunk_size: usize,
    ) -> Result<Self> {
        if batches == 0
            || mode_indices.is_empty()
            || projected.len() != mode_indices.len() * batches
        {
            return Err(Error::InvalidParameter(
                "inconsistent base sample layout".into(),
            ));
        }
        if mode_indices.iter().any(|&i| i as usize >= batches) {
            return Err(Error::InvalidParameter("mode index out of range".into()));
        }
        if chunk_size == 0 {
            return Err(Error::InvalidParameter(
                "chunk size must be positive".into(),
            ));
        }
        Ok(Self {
            batches,
            mode_indices,
            projected,
            seed,
            chunk_size,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.mode_indices.len()
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn mode_indices(&self) -> &[u32] {
        &self.mode_indices
    }

    /// Projected noise of sample `j` (length `b`).
    pub fn projected(&self, j: usize) -> &[f64] {
        &self.projected[j * self.batches..(j + 1) * self.batches]
    }

    fn check_gram(&self, gram: &DMatrix<f64>) -> Result<GramView> {
        if gram.nrows() != self.batches {
            return Err(Error::DimensionMismatch {
                expected: self.batches,
                actual: gram.nrows(),
            });
        }
        GramView::new(gram)
    }

    /// Chunked map over samples yielding per-chunk moments for add and remove.
    fn moments(
        &self,
        view: &GramView,
        eps: f64,
        sigma: f64,
        adjacency: Adjacency,
    ) -> (Vec<Moments>, Vec<Moments>) {
        let b = self.batches;
        let want_add = adjacency != Adjacency::Remove;
        let want_remove = adjacency != Adjacency::Add;
        self.mode_indices
            .par_chunks(self.chunk_size)
            .zip(self.projected.par_chunks(self.chunk_size * b))
            .map(|(idx, proj)| {
                let mut scratch = vec![0.0; b];
                let mut add = Moments::default();
                let mut remove = Moments::default();
                for (&i, u) in idx.iter().zip(proj.chunks(b)) {
                    if want_add {
                        let y = view.loss(Direction::Add, i as usize, u, sigma, &mut scratch);
                        add.push(hockey_term(eps, y));
                    }
                    if want_remove {
                        let y = view.loss(Direction::Remove, 0, u, sigma, &mut scratch);
                        remove.push(hockey_term(eps, y));
                    }
                }
                (add, remove)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .unzip()
    }

    /// `delta_hat = mean_j max{1 - exp(eps - Y_j), 0}`; `Both` takes the larger direction.
    pub fn estimate_delta(
        &self,
        eps: f64,
        sigma: f64,
        gram: &DMatrix<f64>,
        adjacency: Adjacency,
    ) -> Result<EstimatorResult> {
        let [add, remove] = self.estimate_directions(eps, sigma, gram, adjacency)?;
        Ok(match (add, remove) {
            (Some(a), Some(r)) => {
                let worst = if r.delta_hat > a.delta_hat { r } else { a };
                EstimatorResult {
                    adjacency: Adjacency::Both,
                    ..worst
                }
            }
            (Some(a), None) => a,
            (None, Some(r)) => r,
            (None, None) => unreachable!("at least one direction is requested"),
        })
    }

    /// Separate add/remove estimates on the same samples (`None` when not requested).
    pub fn estimate_directions(
        &self,
        eps: f64,
        sigma: f64,
        gram: &DMatrix<f64>,
        adjacency: Adjacency,
    ) -> Result<[Option<EstimatorResult>; 2]> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma {sigma} must be positive"
            )));
        }
        let view = self.check_gram(gram)?;
        let m = self.sample_count();
        let (add, remove) = self.moments(&view, eps, sigma, adjacency);
        let add =
            (adjacency != Adjacency::Remove).then(|| Moments::finish(&add, m, Adjacency::Add));
        let remove =
            (adjacency != Adjacency::Add).then(|| Moments::finish(&remove, m, Adjacency::Remove));
        Ok([add, remove])
    }

    /// Privacy losses at a fixed sigma, for repeated queries over epsilon.
    pub fn privacy_losses(
        &self,
        sigma: f64,
        gram: &DMatrix<f64>,
        adjacency: Adjacency,
    ) -> Result<PrivacyLosses> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma {sigma} must be positive"
            )));
        }
        let view = self.check_gram(gram)?;
        let b = self.batches;
        let losses = |direction: Direction| -> Vec<f64> {
            self.mode_indices
                .par_chunks(self.chunk_size)
                .zip(self.projected.par_chunks(self.chunk_size * b))
                .flat_map_iter(|(idx, proj)| {
                    let mut scratch = vec![0.0; b];
                    idx.iter()
                        .zip(proj.chunks(b))
                        .map(|(&i, u)| view.loss(direction, i as usize, u, sigma, &mut scratch))
                        .collect::<Vec<_>>()
                })
                .collect()
        };
        Ok(PrivacyLosses {
            add: (adjacency != Adjacency::Remove).then(|| losses(Direction::Add)),
            remove: (adjacency != Adjacency::Add).then(|| losses(Direction::Remove)),
            chunk_size: self.chunk_size,
            adjacency,
        })
    }
}

/// Privacy loss samples at a fixed sigma.
#[derive(Clone, Debug)]
pub struct PrivacyLosses {
    add: Option<Vec<f64>>,
    remove: Option<Vec<f64>>,
    chunk_size: usize,
    adjacency: Adjacency,
}

impl PrivacyLosses {
    pub fn add(&self) -> Option<&[f64]> {
        self.add.as_deref()
    }

    pub fn remove(&self) -> Option<&[f64]> {
        self.remove.as_deref()
    }

    fn estimate_one(&self, losses: &[f64], eps: f64, adjacency: Adjacency) -> EstimatorResult {
        let chunks: Vec<Moments> = losses
            .par_chunks(self.chunk_size)
            .map(|c| {
                let mut acc = Moments::default();
                for &y in c {
                    acc.push(hockey_term(eps, y));
                }
                acc
            })
            .collect();
        Moments::finish(&chunks, losses.len(), adjacency)
    }

    /// Same value as [`PldBaseSample::estimate_delta`] at the sigma these losses were computed for.
    pub fn delta_at(&self, eps: f64) -> EstimatorResult {
        let add = self
            .add
            .as_ref()
            .map(|l| self.estimate_one(l, eps, Adjacency::Add));
        let remove = self
            .remove
            .as_ref()
            .map(|l| self.estimate_one(l, eps, Adjacency::Remove));
        match (add, remove) {
            (Some(a), Some(r)) => {
                let worst = if r.delta_hat > a.delta_hat { r } else { a };
                EstimatorResult {
                    adjacency: self.adjacency,
                    ..worst
                }
            }
            (Some(a), None) => a,
            (None, Some(r)) => r,
            (None, None) => unreachable!("at least one direction is stored"),
        }
    }

    /// Smallest epsilon in `[0, 128]` with `delta_hat(eps) <= delta`, to 1e-4 relative.
    pub fn epsilon_for(&self, delta: f64) -> Result<f64> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "delta {delta} must lie in (0, 1)"
            )));
        }
        let at = |e: f64| self.delta_at(e).delta_hat;
        let (f0, f_top) = (at(0.0), at(EPSILON_CEILING));
        if f0 <= delta {
            return Ok(0.0);
        }
        if f_top > delta {
            return Err(Error::BracketNotStraddled {
                lo: 0.0,
                hi: EPSILON_CEILING,
                target: delta,
                f_lo: f0,
                f_hi: f_top,
            });
        }
        let root = brent_decreasing(at, 0.0, EPSILON_CEILING, f0, f_top, delta, 1e-4, 200);
        Ok(root.upper_side)
    }
}

/// Inverts the delta estimate over epsilon for a fixed sigma and base sample.
pub fn estimate_epsilon(
    delta: f64,
    sigma: f64,
    base: &PldBaseSample,
    gram: &DMatrix<f64>,
    adjacency: Adjacency,
) -> Result<f64> {
    base.privacy_losses(sigma, gram, adjacency)?
        .epsilon_for(delta)
}

/// Full-dimensional draws `(i_j, Z_j)` with `Z_j ~ N(0, I_n)`.
///
/// Projecting onto the modes of a particular matrix yields a [`PldBaseSample`].
/// Keeping `Z` fixed while `C` changes gives common random numbers across
/// matrices, which the optimizer's gradients and line search rely on.
#[derive(Clone, Debug, PartialEq)]
pub struct FullNoiseSample {
    dim: usize,
    batches: usize,
    mode_indices: Vec<u32>,
    noise: Vec<f64>,
    seed: u64,
    chunk_size: usize,
}

impl FullNoiseSample {
    pub fn draw(dim: usize, batches: usize, sample_count: usize, seed: u64) -> Result<Self> {
        if dim == 0 || batches == 0 || sample_count == 0 {
            return Err(Error::InvalidParameter(
                "dimension, batches and sample count must be positive".into(),
            ));
        }
        let chunk_size = DEFAULT_CHUNK_SIZE;
        let mut mode_indices = vec![0u32; sample_count];
        let mut noise = vec![0.0; sample_count * dim];
        mode_indices
            .par_chunks_mut(chunk_size)
            .zip(noise.par_chunks_mut(chunk_size * dim))
            .enumerate()
            .for_each(|(k, (idx, z))| {
                let mut rng = chunk_rng(seed, k as u64);
                for (slot, row) in idx.iter_mut().zip(z.chunks_mut(dim)) {
                    *slot = rng.random_range(0..batches as u32);
                    for v in row.iter_mut() {
                        *v = rng.sample(StandardNormal);
                    }
                }
            });
        Ok(Self {
            dim,
            batches,
            mode_indices,
            noise,
            seed,
            chunk_size,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn sample_count(&self) -> usize {
        self.mode_indices.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode_indices(&self) -> &[u32] {
        &self.mode_indices
    }

    pub fn noise(&self, j: usize) -> &[f64] {
        &self.noise[j * self.dim..(j + 1) * self.dim]
    }

    /// `u_j = (Z . m_k)_k` for the given modes.
    pub fn project(&self, modes: &ModeSet) -> Result<PldBaseSample> {
        if modes.len() != self.batches {
            return Err(Error::DimensionMismatch {
                expected: self.batches,
                actual: modes.len(),
            });
        }
        if modes.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: modes.dim(),
            });
        }
        let b = self.batches;
        let n = self.dim;
        let mut projected = vec![0.0; self.sample_count() * b];
        projected
            .par_chunks_mut(self.chunk_size * b)
            .zip(self.noise.par_chunks(self.chunk_size * n))
            .for_each(|(out, z)| {
                for (u, row) in out.chunks_mut(b).zip(z.chunks(n)) {
                    for (uk, mode) in u.iter_mut().zip(modes.modes()) {
                        *uk = crate::matrix::dot(row, mode);
                    }
                }
            });
        PldBaseSample::from_parts(
            b,
            self.mode_indices.clone(),
            projected,
            self.seed,
            self.chunk_size,
        )
    }
}

/// `exp(-s (tau-1)^2 delta / (8 tau/3 - 2/3))`: chance that `delta_hat < delta` when the true value is `>= tau delta`.
pub fn bernstein_failure_prob(samples: u64, tau: f64, delta: f64) -> Result<f64> {
    if !(tau > 1.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau {tau} must exceed 1")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "delta {delta} must lie in (0, 1)"
        )));
    }
    let s = samples as f64;
    Ok((-s * (tau - 1.0).powi(2) * delta / (8.0 * tau / 3.0 - 2.0 / 3.0)).exp())
}

/// Bernstein failure probability union-bounded over the verified directions.
pub fn verification_failure_prob(
    samples: u64,
    tau: f64,
    delta: f64,
    adjacency: Adjacency,
) -> Result<f64> {
    let single = bernstein_failure_prob(samples, tau, delta)?;
    Ok((single * adjacency.directions().len() as f64).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "lowercase")]
pub enum Release {
    /// Run the mechanism; the released guarantee is `(epsilon, tau * delta)`.
    Proceed {
        epsilon: f64,
        delta: f64,
    },
    Abort,
}

/// Estimate-verify-release gate: proceed iff `delta_hat <= delta`.
pub fn evr_gate(target: &PrivacyParams, delta_hat: f64, tau: f64) -> Result<Release> {
    if !(tau >= 1.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau {tau} must be >= 1")));
    }
    Ok(if delta_hat <= target.delta {
        Release::Proceed {
            epsilon: target.epsilon,
            delta: tau * target.delta,
        }
    } else {
        Release::Abort
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BisectionOptions {
    /// Stop once the bracket is narrower than `rel_tol * sigma`.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for BisectionOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-4,
            max_iter: 80,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sigma: f64,
    /// `delta_hat` at `sigma` (never above the target).
    pub delta_hat: f64,
    pub target_delta: f64,
    /// Unamplified sigma used as the initial upper bracket.
    pub sigma_unamplified: f64,
    pub iterations: usize,
}

/// Lower bracket end as a fraction of the unamplified sigma.
const LOWER_BRACKET_FRACTION: f64 = 1e-6;
/// Doublings allowed when the unamplified sigma fails to bracket the root.
const MAX_UPPER_EXPANSIONS: usize = 16;

/// Solves `delta_hat(sigma) = target_delta` on a fixed base sample.
///
/// The bracket starts at `[1e-6 sigma_hi, sigma_hi]`. If Monte Carlo error
/// leaves `delta_hat(sigma_hi)` above the target, the upper end is doubled
/// (up to 16 times) before giving up.
pub fn calibrate_with_base(
    eps: f64,
    target_delta: f64,
    base: &PldBaseSample,
    gram: &DMatrix<f64>,
    adjacency: Adjacency,
    sigma_hi: f64,
    options: BisectionOptions,
) -> Result<Calibration> {
    if !(target_delta > 0.0 && target_delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target delta {target_delta} must lie in (0, 1)"
        )));
    }
    if !(sigma_hi > 0.0 && sigma_hi.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "upper bracket {sigma_hi} must be positive"
        )));
    }
    let view = base.check_gram(gram)?;
    let mut evaluations = 0usize;
    let mut delta_at = |sigma: f64| -> f64 {
        evaluations += 1;
        let (add, remove) = base.moments(&view, eps, sigma, adjacency);
        let m = base.sample_count();
        let mut worst = 0.0f64;
        if adjacency != Adjacency::Remove {
            worst = worst.max(Moments::finish(&add, m, Adjacency::Add).delta_hat);
        }
        if adjacency != Adjacency::Add {
            worst = worst.max(Moments::finish(&remove, m, Adjacency::Remove).delta_hat);
        }
        worst
    };

    let lo = LOWER_BRACKET_FRACTION * sigma_hi;
    let f_lo = delta_at(lo);
    let mut hi = sigma_hi;
    let mut f_hi = delta_at(hi);
    let mut expansions = 0;
    while f_hi > target_delta && expansions < MAX_UPPER_EXPANSIONS {
        hi *= 2.0;
        f_hi = delta_at(hi);
        expansions += 1;
    }
    if f_lo <= target_delta || f_hi > target_delta {
        return Err(Error::BracketNotStraddled {
            lo,
            hi,
            target: target_delta,
            f_lo,
            f_hi,
        });
    }
    let root = brent_decreasing(
        &mut delta_at,
        lo,
        hi,
        f_lo,
        f_hi,
        target_delta,
        options.rel_tol,
        options.max_iter,
    );
    Ok(Calibration {
        sigma: root.upper_side,
        delta_hat: root.value_at_upper_side,
        target_delta,
        sigma_unamplified: sigma_hi,
        iterations: evaluations,
    })
}

/// Noise calibration for a matrix under balls-in-bins batching.
///
/// The solved target is `delta / tau`, leaving a margin so that a later,
/// larger verification run at threshold `delta` passes with high probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub epsilon: f64,
    pub delta: f64,
    pub tau: f64,
    pub adjacency: Adjacency,
    pub sample_count: usize,
    pub seed: u64,
    pub bisection: BisectionOptions,
}

impl Calibrator {
    pub fn new(epsilon: f64, delta: f64, sample_count: usize, seed: u64) -> Self {
        Self {
            epsilon,
            delta,
            tau: DEFAULT_TAU,
            adjacency: Adjacency::Both,
            sample_count,
            seed,
            bisection: BisectionOptions::default(),
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_adjacency(mut self, adjacency: Adjacency) -> Self {
        self.adjacency = adjacency;
        self
    }

    pub fn with_bisection(mut self, bisection: BisectionOptions) -> Self {
        self.bisection = bisection;
        self
    }

    pub fn target_delta(&self) -> f64 {
        self.delta / self.tau
    }

    fn validate(&self) -> Result<()> {
        PrivacyParams::new(self.epsilon, self.delta)?;
        if !(self.tau >= 1.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "tau {} must be >= 1",
                self.tau
            )));
        }
        if self.sample_count == 0 {
            return Err(Error::InvalidParameter(
                "sample count must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn calibrate(
        &self,
        c: &StrategyMatrix,
        schema: &ParticipationSchema,
    ) -> Result<Calibration> {
        self.calibrate_modes(&c.mode_vectors(schema)?)
    }

    pub fn calibrate_modes(&self, modes: &ModeSet) -> Result<Calibration> {
        self.validate()?;
        let base = PldBaseSample::draw(modes, self.sample_count, self.seed)?;
        self.calibrate_base(modes, &base)
    }

    /// Calibrates on an existing base sample drawn for `modes`.
    pub fn calibrate_base(&self, modes: &ModeSet, base: &PldBaseSample) -> Result<Calibration> {
        self.validate()?;
        let target = self.target_delta();
        let sigma_max = calibrate_gaussian_sigma(self.epsilon, target, modes.max_norm())?;
        calibrate_with_base(
            self.epsilon,
            target,
            base,
            modes.gram(),
            self.adjacency,
            sigma_max,
            self.bisection,
        )
    }
}

/// Calibrated sigma for `(eps, delta)` with default margin, adjacency and bisection settings.
pub fn calibrate_sigma(
    eps: f64,
    delta: f64,
    c: &StrategyMatrix,
    schema: &ParticipationSchema,
    sample_count: usize,
    seed: u64,
) -> Result<f64> {
    Ok(Calibrator::new(eps, delta, sample_count, seed)
        .calibrate(c, schema)?
        .sigma)
}

/// Machine-readable summary of a calibration plus verification run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub epsilon: f64,
    pub delta: f64,
    pub delta_prime: f64,
    pub sigma_star: f64,
    pub sample_count: usize,
    pub std_error: f64,
    pub bernstein_failure_prob: f64,
    pub adjacency: Adjacency,
    pub seed: u64,
    pub matrix_fingerprint: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{analytic_delta, GaussianMechanismSpec};

    fn single_mode() -> ModeSet {
        ModeSet::from_vectors(vec![vec![1.0]])
    }

    #[test]
    fn single_batch_draws_mode_zero() {
        let c = StrategyMatrix::toeplitz(&[1.0, 0.3, 0.2]).unwrap();
        let modes = c
            .mode_vectors(&ParticipationSchema::new(1, 3).unwrap())
            .unwrap();
        let base = PldBaseSample::draw(&modes, 1000, 3).unwrap();
        assert!(base.mode_indices().iter().all(|&i| i == 0));
    }

    #[test]
    fn draws_are_deterministic_and_chunk_seeded() {
        let modes = StrategyMatrix::identity(2)
            .unwrap()
            .mode_vectors(&ParticipationSchema::new(2, 1).unwrap())
            .unwrap();
        let a = PldBaseSample::draw(&modes, 10_000, 42).unwrap();
        let b = PldBaseSample::draw(&modes, 10_000, 42).unwrap();
        assert_eq!(a, b);
        let c = PldBaseSample::draw(&modes, 10_000, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn orthonormal_modes_give_standard_projections() {
        let modes = StrategyMatrix::identity(2)
            .unwrap()
            .mode_vectors(&ParticipationSchema::new(2, 1).unwrap())
            .unwrap();
        assert_eq!(modes.gram(), &DMatrix::identity(2, 2));
        let base = PldBaseSample::draw(&modes, 200_000, 9).unwrap();
        let m = base.sample_count() as f64;
        let mut cov = [[0.0; 2]; 2];
        for j in 0..base.sample_count() {
            let u = base.projected(j);
            for r in 0..2 {
                for c in 0..2 {
                    cov[r][c] += u[r] * u[c] / m;
                }
            }
        }
        assert!((cov[0][0] - 1.0).abs() < 0.02 && (cov[1][1] - 1.0).abs() < 0.02);
        assert!(cov[0][1].abs() < 0.02);
    }

    #[test]
    fn correlated_gram_is_reproduced() {
        let c = StrategyMatrix::toeplitz(&[1.0, 0.8, 0.6, 0.4]).unwrap();
        let modes = c
            .mode_vectors(&ParticipationSchema::new(2, 2).unwrap())
            .unwrap();
        let base = PldBaseSample::draw(&modes, 400_000, 5).unwrap();
        let m = base.sample_count() as f64;
        let g = modes.gram();
        for r in 0..2 {
            for col in 0..2 {
                let est: f64 = (0..base.sample_count())
                    .map(|j| base.projected(j)[r] * base.projected(j)[col])
                    .sum::<f64>()
                    / m;
                assert!(
                    (est - g[(r, col)]).abs() < 0.02 * g[(r, r)].max(g[(col, col)]),
                    "{r},{col}: {est} vs {}",
                    g[(r, col)]
                );
            }
        }
    }

    #[test]
    fn gram_factor_handles_singular_input() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = gram_factor(&g).unwrap();
        let back = &f * f.transpose();
        assert!((back - g).abs().max() < 1e-6);
        let bad = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(gram_factor(&bad).is_err());
    }

    #[test]
    fn log_density_ratio_closed_forms() {
        let g = DMatrix::from_element(1, 1, 1.0);
        let y = log_density_ratio(0, &[0.0], 1.0, &g, Direction::Add).unwrap();
        assert!((y - 0.5).abs() < 1e-15);
        let far = log_density_ratio(0, &[0.3], 1e8, &g, Direction::Add).unwrap();
        assert!(far.abs() < 1e-7);
        assert!(log_density_ratio(0, &[1.0], 0.0, &g, Direction::Add).is_err());

        // Modes (1,1) and (0,1): x = (1,1) is m_1 with Z = 0.
        let g2 = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let y = log_density_ratio(0, &[0.0, 0.0], 1.0, &g2, Direction::Add).unwrap();
        let expected = (0.5 * (1f64.exp() + 0.5f64.exp())).ln();
        assert!((y - expected).abs() < 1e-15);
    }

    #[test]
    fn huge_epsilon_clamps_everything() {
        let modes = single_mode();
        let base = PldBaseSample::draw(&modes, 10_000, 1).unwrap();
        let r = base
            .estimate_delta(1e6, 1.0, modes.gram(), Adjacency::Both)
            .unwrap();
        assert_eq!(r.delta_hat, 0.0);
        assert_eq!(r.std_error, 0.0);
    }

    #[test]
    fn delta_hat_is_nonincreasing_in_epsilon() {
        let modes = StrategyMatrix::identity(3)
            .unwrap()
            .mode_vectors(&ParticipationSchema::new(3, 1).unwrap())
            .unwrap();
        let base = PldBaseSample::draw(&modes, 50_000, 2).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..30 {
            let d = base
                .estimate_delta(0.1 * k as f64, 0.8, modes.gram(), Adjacency::Both)
                .unwrap()
                .delta_hat;
            assert!((0.0..=1.0).contains(&d));
            assert!(d <= prev);
            prev = d;
        }
    }

    #[test]
    fn both_is_max_of_directions() {
        let modes = StrategyMatrix::identity(4)
            .unwrap()
            .mode_vectors(&ParticipationSchema::new(2, 2).unwrap())
            .unwrap();
        let base = PldBaseSample::draw(&modes, 20_000, 8).unwrap();
        let [a, r] = base
            .estimate_directions(0.5, 1.0, modes.gram(), Adjacency::Both)
            .unwrap();
        let both = base
            .estimate_delta(0.5, 1.0, modes.gram(), Adjacency::Both)
            .unwrap();
        assert_eq!(
            both.delta_hat,
            a.unwrap().delta_hat.max(r.unwrap().delta_hat)
        );
        assert_eq!(both.adjacency, Adjacency::Both);
    }

    #[test]
    fn single_gaussian_matches_analytic() {
        let modes = single_mode();
        let base = PldBaseSample::draw(&modes, 1_000_000, 11).unwrap();
        for eps in [0.5, 1.0] {
            let exact = analytic_delta(eps, &GaussianMechanismSpec::new(1.0, 1.0).unwrap());
            for adj in [Adjacency::Add, Adjacency::Remove] {
                let r = base.estimate_delta(eps, 1.0, modes.gram(), adj).unwrap();
                assert!(
                    (r.delta_hat - exact).abs() <= 4.0 * r.std_error,
                    "{adj:?} eps {eps}: {} vs {exact}",
                    r.delta_hat
                );
            }
        }
    }

    #[test]
    fn privacy_losses_agree_with_fused_estimate() {
        let modes = StrategyMatrix::identity(4)
            .unwrap()
            .mode_vectors(&ParticipationSchema::new(2, 2).unwrap())
            .unwrap();
        let base = PldBaseSample::draw(&modes, 30_000, 4).unwrap();
        let losses = base
            .privacy_losses(0.9, modes.gram(), Adjacency::Both)
            .unwrap();
        let fused = base
            .estimate_delta(0.7, 0.9, modes.gram(), Adjacency::Both)
            .unwrap();
        assert_eq!(losses.delta_at(0.7), fused);
    }

    #[test]
    fn epsilon_inversion_round_trips() {
        let modes = single_mode();
        let base = PldBaseSample::draw(&modes, 200_000, 6).unwrap();
        let target = base
            .estimate_delta(1.0, 1.0, modes.gram(), Adjacency::Both)
            .unwrap()
            .delta_hat;
        let eps = estimate_epsilon(target, 1.0, &base, modes.gram(), Adjacency::Both).unwrap();
        assert!((eps - 1.0).abs() <= 2e-4, "{eps}");
        let tiny = estimate_epsilon(1e-3, 1e4, &base, modes.gram(), Adjacency::Both).unwrap();
        assert!(tiny < 1e-3);
        assert!(estimate_epsilon(0.0, 1.0, &base, modes.gram(), Adjacency::Both).is_err());
    }

    #[test]
    fn bernstein_examples() {
        let p = bernstein_failure_prob(100_000_000, 1.25, 8e-6).unwrap();
        assert!(p <= 7.2e-9, "{p}");
        assert!(
            verification_failure_prob(100_000_000, 1.25, 8e-6, Adjacency::Both).unwrap() <= 1.5e-8
        );
        assert_eq!(bernstein_failure_prob(0, 1.25, 8e-6).unwrap(), 1.0);
        assert!(bernstein_failure_prob(10, 1.0, 8e-6).is_err());
    }

    #[test]
    fn evr_gate_examples() {
        let target = PrivacyParams::new(1.0, 1e-5).unwrap();
        assert!(matches!(
            evr_gate(&target, 0.0, 1.25).unwrap(),
            Release::Proceed { .. }
        ));
        assert_eq!(evr_gate(&target, 2e-5, 1.25).unwrap(), Release::Abort);
        match evr_gate(&target, 1e-5, 1.25).unwrap() {
            Release::Proceed { epsilon, delta } => {
                assert_eq!(epsilon, 1.0);
                assert!((delta - 1.25e-5).abs() < 1e-20);
            }
            Release::Abort => panic!("equality must proceed"),
        }
    }

    #[test]
    fn larger_epsilon_needs_less_noise() {
        let c = StrategyMatrix::identity(4).unwrap();
        let schema = ParticipationSchema::new(4, 1).unwrap();
        let s1 = calibrate_sigma(0.5, 1e-4, &c, &schema, 50_000, 7).unwrap();
        let s2 = calibrate_sigma(1.0, 1e-4, &c, &schema, 50_000, 7).unwrap();
        assert!(s2 < s1);
    }

    #[test]
    fn calibration_rejects_unreachable_bracket() {
        let modes = single_mode();
        let base = PldBaseSample::draw(&modes, 1000, 1).unwrap();
        let err = calibrate_with_base(
            1.0,
            0.999_999,
            &base,
            modes.gram(),
            Adjacency::Add,
            1e-9,
            BisectionOptions::default(),
        );
        assert!(matches!(err, Err(Error::BracketNotStraddled { .. })));
    }
}
