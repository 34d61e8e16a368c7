//! Deterministic hockey-stick divergence for a Gaussian mixture against a
//! centred Gaussian, used to cross-check the Monte Carlo accountant.
//!
//! Coordinates are rotated onto the span of the modes and measured in units
//! of sigma, so only `r = rank` axes remain. Along the last axis the log
//! likelihood ratio is convex, hence the region where `P - alpha Q` has a
//! fixed sign is an interval whose Gaussian mass is available in closed form.
//! The remaining `r - 1` axes use nested adaptive Gauss-Kronrod quadrature.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::accountant::Direction;
use crate::baseline::normal_cdf;
use crate::error::{Error, Result};

pub const MAX_EFFECTIVE_DIM: usize = 4;
/// Integration half-width beyond the largest mode coordinate, in sigma units.
const EXTENT: f64 = 10.0;
/// Half-width used when locating the sign-change interval on the last axis.
const ROOT_EXTENT: f64 = 12.0;
const OUTER_TOL: f64 = 1e-10;
const MAX_PIECES: usize = 4000;
const RANK_TOL: f64 = 1e-12;

/// Mixture `P = sum_i w_i N(m_i, s^2 I)` against `Q = N(0, s^2 I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowDimPair {
    modes: Vec<Vec<f64>>,
    weights: Vec<f64>,
    sigma: f64,
    /// Mode coordinates in an orthonormal basis of their span, divided by sigma.
    #[serde(skip)]
    coords: Vec<Vec<f64>>,
}

impl LowDimPair {
    pub fn new(modes: Vec<Vec<f64>>, weights: Vec<f64>, sigma: f64) -> Result<Self> {
        if modes.is_empty() || modes.len() != weights.len() {
            return Err(Error::InvalidParameter(
                "need one weight per mode and at least one mode".into(),
            ));
        }
        let dim = modes[0].len();
        if modes.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidParameter(
                "modes must share a dimension".into(),
            ));
        }
        if modes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("modes must be finite".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidParameter(
                "weights must be nonnegative and sum to 1".into(),
            ));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma {sigma} must be positive"
            )));
        }
        let coords = span_coordinates(&modes, sigma);
        let r = coords.first().map_or(0, Vec::len);
        if r > MAX_EFFECTIVE_DIM {
            return Err(Error::InvalidParameter(format!(
                "effective dimension {r} exceeds {MAX_EFFECTIVE_DIM}"
            )));
        }
        Ok(Self {
            modes,
            weights,
            sigma,
            coords,
        })
    }

    /// Equal-weight mixture, as in the balls-in-bins dominating pair.
    pub fn uniform(modes: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        let b = modes.len();
        Self::new(modes, vec![1.0 / b as f64; b], sigma)
    }

    pub fn modes(&self) -> &[Vec<f64>] {
        &self.modes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Rank of the mode span.
    pub fn effective_dim(&self) -> usize {
        self.coords.first().map_or(0, Vec::len)
    }
}

fn span_coordinates(modes: &[Vec<f64>], sigma: f64) -> Vec<Vec<f64>> {
    let b = modes.len();
    let scale = 1.0 / (sigma * sigma);
    let gram = DMatrix::from_fn(b, b, |i, j| {
        scale
            * modes[i]
                .iter()
                .zip(&modes[j])
                .map(|(x, y)| x * y)
                .sum::<f64>()
    });
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut keep: Vec<usize> = (0..b)
        .filter(|&k| eig.eigenvalues[k] > RANK_TOL * top.max(f64::MIN_POSITIVE))
        .collect();
    if top == 0.0 {
        keep.clear();
    }
    keep.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    (0..b)
        .map(|i| {
            keep.iter()
                .map(|&k| eig.eigenvectors[(i, k)] * eig.eigenvalues[k].sqrt())
                .collect()
        })
        .collect()
}

/// Gaussian mass of `[lo, hi]`, accurate in either tail.
fn interval_mass(lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        0.0
    } else if lo > 0.0 {
        normal_cdf(-lo) - normal_cdf(-hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

/// Convex `L(t) = log sum_i exp(c_i + s_i t)` restricted to one line.
struct Line<'a> {
    offsets: &'a [f64],
    slopes: &'a [f64],
}

impl Line<'_> {
    /// `(L(t), L'(t))`.
    fn eval(&self, t: f64) -> (f64, f64) {
        let max = self
            .offsets
            .iter()
            .zip(self.slopes)
            .map(|(c, s)| c + s * t)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return (f64::NEG_INFINITY, 0.0);
        }
        let (mut total, mut slope) = (0.0, 0.0);
        for (c, s) in self.offsets.iter().zip(self.slopes) {
            let e = (c + s * t - max).exp();
            total += e;
            slope += e * s;
        }
        (max + total.ln(), slope / total)
    }

    /// Root of a nondecreasing `f` on `[lo, hi]` with `f(lo) <= 0 <= f(hi)`.
    fn monotone_root(
        f: impl Fn(f64) -> (f64, f64),
        mut lo: f64,
        mut hi: f64,
        increasing: bool,
    ) -> f64 {
        let mut t = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (v, d) = f(t);
            let v = if increasing { v } else { -v };
            let d = if increasing { d } else { -d };
            if v == 0.0 {
                return t;
            }
            if v < 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let newton = if d > 0.0 { t - v / d } else { f64::NAN };
            t = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 1e-14 * (1.0 + t.abs()) {
                break;
            }
        }
        t
    }

    /// `{t : L(t) <= level}` as `(t1, t2)`; infinite ends mean the set is unbounded there.
    fn sublevel(&self, level: f64, extent: f64) -> Option<(f64, f64)> {
        let (lo, hi) = (-extent, extent);
        let (_, d_lo) = self.eval(lo);
        let (_, d_hi) = self.eval(hi);
        let t_min = if d_lo >= 0.0 {
            lo
        } else if d_hi <= 0.0 {
            hi
        } else {
            Self::monotone_root(
                |t| {
                    let (_, d) = self.eval(t);
                    // Slope of L' is its softmax variance; a finite difference is enough for the safeguard.
                    let h = 1e-6 * (1.0 + t.abs());
                    (d, (self.eval(t + h).1 - d) / h)
                },
                lo,
                hi,
                true,
            )
        };
        let (l_min, _) = self.eval(t_min);
        if l_min > level {
            return None;
        }
        let shifted = |t: f64| {
            let (v, d) = self.eval(t);
            (v - level, d)
        };
        let t1 = if self.eval(lo).0 <= level {
            f64::NEG_INFINITY
        } else {
            Self::monotone_root(shifted, lo, t_min, false)
        };
        let t2 = if self.eval(hi).0 <= level {
            f64::INFINITY
        } else {
            Self::monotone_root(shifted, t_min, hi, true)
        };
        Some((t1, t2))
    }
}

/// 15-point Kronrod nodes (non-negative half) and weights, with the embedded 7-point Gauss weights.
#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gauss_kronrod(f: &mut dyn FnMut(f64) -> Result<f64>, a: f64, b: f64) -> Result<(f64, f64)> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center)?;
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for k in 0..7 {
        let dx = half * XGK[k];
        let pair = f(center - dx)? + f(center + dx)?;
        kronrod += WGK[k] * pair;
        if k % 2 == 1 {
            gauss += WG[k / 2] * pair;
        }
    }
    Ok((kronrod * half, ((kronrod - gauss) * half).abs()))
}

/// Globally adaptive Gauss-Kronrod: split the worst interval until the summed error estimate is below `tol`.
fn adaptive(f: &mut dyn FnMut(f64) -> Result<f64>, a: f64, b: f64, tol: f64) -> Result<f64> {
    let (value, err) = gauss_kronrod(f, a, b)?;
    let mut pieces = vec![(a, b, value, err)];
    let mut total_err = err;
    while total_err > tol {
        if pieces.len() >= MAX_PIECES {
            return Err(Error::Quadrature(format!(
                "error estimate {total_err:e} above {tol:e} after {MAX_PIECES} subintervals"
            )));
        }
        let worst = (0..pieces.len())
            .max_by(|&x, &y| pieces[x].3.total_cmp(&pieces[y].3))
            .expect("non-empty");
        let (lo, hi, _, old_err) = pieces.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (lv, le) = gauss_kronrod(f, lo, mid)?;
        let (rv, re) = gauss_kronrod(f, mid, hi)?;
        pieces.push((lo, mid, lv, le));
        pieces.push((mid, hi, rv, re));
        total_err += le + re - old_err;
        if total_err <= tol {
            // Guard against drift in the running sum.
            total_err = pieces.iter().map(|p| p.3).sum();
        }
    }
    pieces.sort_by(|x, y| x.0.total_cmp(&y.0));
    Ok(crate::numerics::pairwise_sum(
        &pieces.iter().map(|p| p.2).collect::<Vec<_>>(),
    ))
}

struct Integrand<'a> {
    coords: &'a [Vec<f64>],
    log_weights: Vec<f64>,
    alpha: f64,
    direction: Direction,
    extents: Vec<f64>,
}

impl Integrand<'_> {
    fn rank(&self) -> usize {
        self.coords[0].len()
    }

    /// Closed-form integral over the last axis for fixed leading coordinates `y`.
    fn last_axis(&self, y: &[f64]) -> f64 {
        let r = self.rank();
        let lead = r - 1;
        let log_phi_y: f64 = y
            .iter()
            .map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum();
        let b = self.coords.len();
        let mut offsets = Vec::with_capacity(b);
        let mut slopes = Vec::with_capacity(b);
        let mut prefactors = Vec::with_capacity(b);
        for (a, lw) in self.coords.iter().zip(&self.log_weights) {
            let cross: f64 = a[..lead].iter().zip(y).map(|(x, v)| x * v).sum();
            let lead_sq: f64 = a[..lead].iter().map(|x| x * x).sum();
            let last = a[lead];
            // log w_i + a.y - |a|^2/2 with the last axis kept symbolic.
            offsets.push(lw + cross - 0.5 * lead_sq - 0.5 * last * last);
            slopes.push(last);
            prefactors.push((lw + log_phi_y + cross - 0.5 * lead_sq).exp());
        }
        let q_prefactor = log_phi_y.exp();
        let line = Line {
            offsets: &offsets,
            slopes: &slopes,
        };
        let extent = self.extents[lead] + ROOT_EXTENT;
        match self.direction {
            Direction::Add => {
                let region = line.sublevel(self.alpha.ln(), extent);
                let outside = |shift: f64| match region {
                    None => 1.0,
                    Some((t1, t2)) => normal_cdf(t1 - shift) + normal_cdf(shift - t2),
                };
                let p: f64 = prefactors
                    .iter()
                    .zip(&slopes)
                    .map(|(pf, s)| pf * outside(*s))
                    .sum();
                (p - self.alpha * q_prefactor * outside(0.0)).max(0.0)
            }
            Direction::Remove => {
                let Some((t1, t2)) = line.sublevel(-self.alpha.ln(), extent) else {
                    return 0.0;
                };
                let p: f64 = prefactors
                    .iter()
                    .zip(&slopes)
                    .map(|(pf, s)| pf * interval_mass(t1 - s, t2 - s))
                    .sum();
                (q_prefactor * interval_mass(t1, t2) - self.alpha * p).max(0.0)
            }
        }
    }

    fn integrate(&self, y: &mut Vec<f64>, tol: f64) -> Result<f64> {
        let axis = y.len();
        if axis == self.rank() - 1 {
            return Ok(self.last_axis(y));
        }
        let half = self.extents[axis] + EXTENT;
        let inner_tol = tol * 1e-2;
        let mut f = |v: f64| -> Result<f64> {
            y.push(v);
            let out = self.integrate(y, inner_tol);
            y.pop();
            out
        };
        adaptive(&mut f, -half, half, tol)
    }
}

/// `H_alpha(P, Q)` for `Add` and `H_alpha(Q, P)` for `Remove`.
pub fn hockey_stick_quadrature(pair: &LowDimPair, alpha: f64, direction: Direction) -> Result<f64> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "alpha {alpha} must be finite and >= 0"
        )));
    }
    if alpha == 0.0 {
        return Ok(1.0);
    }
    let r = pair.effective_dim();
    if r == 0 {
        return Ok((1.0 - alpha).max(0.0));
    }
    let extents = (0..r)
        .map(|k| pair.coords.iter().map(|a| a[k].abs()).fold(0.0, f64::max))
        .collect();
    let integrand = Integrand {
        coords: &pair.coords,
        log_weights: pair.weights.iter().map(|w| w.ln()).collect(),
        alpha,
        direction,
        extents,
    };
    let value = integrand.integrate(&mut Vec::with_capacity(r), OUTER_TOL)?;
    Ok(value.clamp(0.0, 1.0))
}

/// Worst case over add and remove.
pub fn hockey_stick_both(pair: &LowDimPair, alpha: f64) -> Result<f64> {
    Ok(
        hockey_stick_quadrature(pair, alpha, Direction::Add)?.max(hockey_stick_quadrature(
            pair,
            alpha,
            Direction::Remove,
        )?),
    )
}

/// Two-batch mixtures `M(a, b) = 1/2 N((a, -a), s^2 I) + 1/2 N((0, b), s^2 I)` against `N(0, s^2 I)`.
///
/// Returns `(H(M(1, -1)), H(M(1, 1)))`. Mode vectors built from `|C|` would
/// predict the second; an adaptive adversary that picks the sign of the
/// second contribution attains the first.
pub fn adaptivity_counterexample_check(sigma: f64, alpha: f64) -> Result<(f64, f64)> {
    let h = |b: f64| -> Result<f64> {
        let pair = LowDimPair::uniform(vec![vec![1.0, -1.0], vec![0.0, b]], sigma)?;
        hockey_stick_quadrature(&pair, alpha, Direction::Add)
    };
    Ok((h(-1.0)?, h(1.0)?))
}
