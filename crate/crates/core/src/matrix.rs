//! Correlation-matrix families, participation schemas and mode vectors.
//!
//! Every strategy matrix `C` is lower triangular with a positive diagonal.
//! Parametric families (Toeplitz, BLT) are stored by their coefficients and
//! only materialized when a dense view is needed.
//!
//! Batches are numbered `1..=b` in the user-facing API (round robin), but all
//! vectors here are 0-indexed: mode `i` (0-based) sums the columns
//! `b*j + i` for `j = 0..E`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// `b` batches per epoch, `E` epochs, `n = b * E` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaWire", into = "SchemaWire")]
pub struct ParticipationSchema {
    batches_per_epoch: usize,
    epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct SchemaWire {
    batches_per_epoch: usize,
    epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
}

impl TryFrom<SchemaWire> for ParticipationSchema {
    type Error = Error;

    fn try_from(w: SchemaWire) -> Result<Self> {
        let schema = ParticipationSchema::new(w.batches_per_epoch, w.epochs)?;
        if let Some(n) = w.iterations {
            if n != schema.iterations() {
                return Err(Error::DimensionMismatch {
                    expected: schema.iterations(),
                    actual: n,
                });
            }
        }
        Ok(schema)
    }
}

impl From<ParticipationSchema> for SchemaWire {
    fn from(s: ParticipationSchema) -> Self {
        SchemaWire {
            batches_per_epoch: s.batches_per_epoch,
            epochs: s.epochs,
            iterations: Some(s.iterations()),
        }
    }
}

impl ParticipationSchema {
    pub fn new(batches_per_epoch: usize, epochs: usize) -> Result<Self> {
        if batches_per_epoch == 0 || epochs == 0 {
            return Err(Error::InvalidParameter(format!(
                "schema needs b >= 1 and E >= 1, got b={batches_per_epoch}, E={epochs}"
            )));
        }
        Ok(Self {
            batches_per_epoch,
            epochs,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn iterations(&self) -> usize {
        self.batches_per_epoch * self.epochs
    }
}

/// Storage for the supported matrix families.
#[derive(Clone, Debug, PartialEq)]
pub enum Representation {
    Dense(DMatrix<f64>),
    /// `diagonals[k][i]` is the entry at `(i + k, i)`.
    Banded {
        diagonals: Vec<Vec<f64>>,
    },
    /// Coefficients `c_0..c_{n-1}`; entry `(i, j)` is `c_{i-j}` for `i >= j`.
    Toeplitz(Vec<f64>),
    /// Buffered linear Toeplitz: `c_0 = 1`, `c_k = sum_m w_m theta_m^(k-1)`.
    Blt {
        weights: Vec<f64>,
        decays: Vec<f64>,
    },
}

/// Lower-triangular correlation matrix `C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixWire", into = "MatrixWire")]
pub struct StrategyMatrix {
    order: usize,
    repr: Representation,
}

impl StrategyMatrix {
    pub fn dense(entries: DMatrix<f64>) -> Result<Self> {
        let n = entries.nrows();
        if n == 0 || entries.ncols() != n {
            return Err(Error::InvalidMatrix(format!(
                "dense matrix must be square and non-empty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let v = entries[(i, j)];
                if !v.is_finite() {
                    return Err(Error::InvalidMatrix(format!(
                        "entry ({i}, {j}) is not finite"
                    )));
                }
                if j > i && v != 0.0 {
                    return Err(Error::InvalidMatrix(format!(
                        "entry ({i}, {j}) = {v} lies above the diagonal"
                    )));
                }
            }
            if entries[(i, i)] <= 0.0 {
                return Err(Error::InvalidMatrix(format!(
                    "diagonal entry {i} = {} is not positive",
                    entries[(i, i)]
                )));
            }
        }
        Ok(Self {
            order: n,
            repr: Representation::Dense(entries),
        })
    }

    /// Dense matrix from a list of rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidMatrix(
                "rows must all have length equal to the row count".into(),
            ));
        }
        Self::dense(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut c = vec![0.0; n];
        if let Some(c0) = c.first_mut() {
            *c0 = 1.0;
        }
        Self::toeplitz_with_order(&c, n)
    }

    /// Lower-triangular all-ones matrix (the prefix-sum workload).
    pub fn prefix_sum(n: usize) -> Result<Self> {
        Self::toeplitz_with_order(&vec![1.0; n], n)
    }

    /// Toeplitz matrix whose order is the number of coefficients.
    pub fn toeplitz(coeffs: &[f64]) -> Result<Self> {
        Self::toeplitz_with_order(coeffs, coeffs.len())
    }

    /// Toeplitz matrix of order `n`; missing coefficients are zero, extra ones are dropped.
    pub fn toeplitz_with_order(coeffs: &[f64], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidMatrix("order must be positive".into()));
        }
        let mut c = coeffs.to_vec();
        c.resize(n, 0.0);
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(
                "Toeplitz coefficients must be finite".into(),
            ));
        }
        if c[0] <= 0.0 {
            return Err(Error::InvalidMatrix(format!(
                "c_0 = {} must be positive",
                c[0]
            )));
        }
        Ok(Self {
            order: n,
            repr: Representation::Toeplitz(c),
        })
    }

    pub fn banded(diagonals: Vec<Vec<f64>>) -> Result<Self> {
        let n = diagonals.first().map_or(0, Vec::len);
        if n == 0 {
            return Err(Error::InvalidMatrix(
                "banded matrix needs a non-empty main diagonal".into(),
            ));
        }
        if diagonals.len() > n {
            return Err(Error::InvalidMatrix(format!(
                "band width {} exceeds order {n}",
                diagonals.len()
            )));
        }
        for (k, d) in diagonals.iter().enumerate() {
            if d.len() != n - k {
                return Err(Error::InvalidMatrix(format!(
                    "diagonal {k} has length {}, expected {}",
                    d.len(),
                    n - k
                )));
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMatrix(format!(
                    "diagonal {k} has non-finite entries"
                )));
            }
        }
        if diagonals[0].iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidMatrix(
                "main diagonal must be strictly positive".into(),
            ));
        }
        Ok(Self {
            order: n,
            repr: Representation::Banded { diagonals },
        })
    }

    pub fn blt(weights: &[f64], decays: &[f64], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidMatrix("order must be positive".into()));
        }
        if weights.is_empty() || weights.len() != decays.len() {
            return Err(Error::InvalidMatrix(format!(
                "BLT needs d >= 1 buffers with matching weights/decays, got {} and {}",
                weights.len(),
                decays.len()
            )));
        }
        if weights.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return Err(Error::InvalidMatrix(
                "BLT weights must be finite and nonnegative".into(),
            ));
        }
        if decays.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::InvalidMatrix("BLT decays must lie in (0, 1)".into()));
        }
        Ok(Self {
            order: n,
            repr: Representation::Blt {
                weights: weights.to_vec(),
                decays: decays.to_vec(),
            },
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn representation(&self) -> &Representation {
        &self.repr
    }

    pub fn family(&self) -> &'static str {
        match self.repr {
            Representation::Dense(_) => "dense",
            Representation::Banded { .. } => "banded",
            Representation::Toeplitz(_) => "toeplitz",
            Representation::Blt { .. } => "blt",
        }
    }

    /// Number of free parameters of the family.
    pub fn parameter_count(&self) -> usize {
        match &self.repr {
            Representation::Dense(_) => self.order * (self.order + 1) / 2,
            Representation::Banded { diagonals } => diagonals.iter().map(Vec::len).sum(),
            Representation::Toeplitz(c) => c.len(),
            Representation::Blt { weights, decays } => weights.len() + decays.len(),
        }
    }

    /// Expanded Toeplitz coefficients for the Toeplitz and BLT families.
    pub fn toeplitz_coeffs(&self) -> Option<Vec<f64>> {
        match &self.repr {
            Representation::Toeplitz(c) => Some(c.clone()),
            Representation::Blt { weights, decays } => {
                Some(blt_coeffs(weights, decays, self.order))
            }
            _ => None,
        }
    }

    /// Canonical dense form.
    pub fn materialize(&self) -> DMatrix<f64> {
        let n = self.order;
        match &self.repr {
            Representation::Dense(m) => m.clone(),
            Representation::Banded { diagonals } => {
                let mut m = DMatrix::zeros(n, n);
                for (k, d) in diagonals.iter().enumerate() {
                    for (i, &v) in d.iter().enumerate() {
                        m[(i + k, i)] = v;
                    }
                }
                m
            }
            Representation::Toeplitz(_) | Representation::Blt { .. } => {
                let c = self.toeplitz_coeffs().expect("toeplitz family");
                toeplitz_dense(&c, n)
            }
        }
    }

    /// Mode vectors `m_i = sum_j |C|[:, b*j + i]` and their Gram matrix.
    pub fn mode_vectors(&self, schema: &ParticipationSchema) -> Result<ModeSet> {
        let n = self.order;
        if schema.iterations() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: schema.iterations(),
            });
        }
        let b = schema.batches_per_epoch();
        let mut modes = vec![vec![0.0; n]; b];
        match &self.repr {
            Representation::Toeplitz(_) | Representation::Blt { .. } => {
                let c = self.toeplitz_coeffs().expect("toeplitz family");
                for (i, mode) in modes.iter_mut().enumerate() {
                    for e in 0..schema.epochs() {
                        let col = b * e + i;
                        for row in col..n {
                            mode[row] += c[row - col].abs();
                        }
                    }
                }
            }
            _ => {
                let m = self.materialize();
                for (i, mode) in modes.iter_mut().enumerate() {
                    for e in 0..schema.epochs() {
                        let col = b * e + i;
                        for row in col..n {
                            mode[row] += m[(row, col)].abs();
                        }
                    }
                }
            }
        }
        Ok(ModeSet::from_vectors(modes))
    }

    /// Largest mode norm: the L2 sensitivity under fixed (unrandomized) batch assignment.
    pub fn unamplified_sensitivity(&self, schema: &ParticipationSchema) -> Result<f64> {
        Ok(self.mode_vectors(schema)?.max_norm())
    }

    /// `||A C^{-1}||_F`, using the Toeplitz recurrence when available.
    pub fn prefix_error_norm(&self) -> f64 {
        match self.toeplitz_coeffs() {
            Some(c) => toeplitz_prefix_error_norm(&c).expect("validated c_0 > 0"),
            None => dense_prefix_error_norm(&self.materialize()).expect("validated diagonal"),
        }
    }

    /// RMSE of prefix sums, `sigma * ||A C^{-1}||_F`.
    pub fn rmse(&self, sigma: f64) -> Result<f64> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma = {sigma} must be finite and >= 0"
            )));
        }
        Ok(sigma * self.prefix_error_norm())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("matrix serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Entrywise absolute value, kept in the same family where that is possible.
    pub fn abs(&self) -> Self {
        let repr = match &self.repr {
            Representation::Dense(m) => Representation::Dense(m.abs()),
            Representation::Banded { diagonals } => Representation::Banded {
                diagonals: diagonals
                    .iter()
                    .map(|d| d.iter().map(|v| v.abs()).collect())
                    .collect(),
            },
            Representation::Toeplitz(c) => {
                Representation::Toeplitz(c.iter().map(|v| v.abs()).collect())
            }
            Representation::Blt { .. } => self.repr.clone(),
        };
        Self {
            order: self.order,
            repr,
        }
    }

    /// `gamma * C` for `gamma > 0`. BLT matrices are expanded to Toeplitz.
    pub fn scaled(&self, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "scale {gamma} must be positive"
            )));
        }
        let repr = match &self.repr {
            Representation::Dense(m) => Representation::Dense(m * gamma),
            Representation::Banded { diagonals } => Representation::Banded {
                diagonals: diagonals
                    .iter()
                    .map(|d| d.iter().map(|v| v * gamma).collect())
                    .collect(),
            },
            Representation::Toeplitz(_) | Representation::Blt { .. } => Representation::Toeplitz(
                self.toeplitz_coeffs()
                    .expect("toeplitz family")
                    .iter()
                    .map(|v| v * gamma)
                    .collect(),
            ),
        };
        Ok(Self {
            order: self.order,
            repr,
        })
    }
}

/// The `b` mixture means of the dominating pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSet {
    modes: Vec<Vec<f64>>,
    gram: DMatrix<f64>,
}

impl ModeSet {
    /// Builds the Gram matrix from arbitrary vectors of a common dimension.
    pub fn from_vectors(modes: Vec<Vec<f64>>) -> Self {
        let b = modes.len();
        let gram = DMatrix::from_fn(b, b, |i, j| dot(&modes[i], &modes[j]));
        Self { modes, gram }
    }

    pub fn modes(&self) -> &[Vec<f64>] {
        &self.modes
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Number of modes (batches per epoch).
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Ambient dimension `n`.
    pub fn dim(&self) -> usize {
        self.modes.first().map_or(0, Vec::len)
    }

    pub fn norms(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.gram[(i, i)].sqrt()).collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.norms().into_iter().fold(0.0, f64::max)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn toeplitz_dense(c: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i >= j {
            c.get(i - j).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    })
}

/// Expanded coefficients of a BLT matrix of order `n`.
pub fn blt_coeffs(weights: &[f64], decays: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n];
    if n == 0 {
        return c;
    }
    c[0] = 1.0;
    let mut powers = vec![1.0; decays.len()];
    for ck in c.iter_mut().skip(1) {
        *ck = weights.iter().zip(&powers).map(|(w, p)| w * p).sum();
        for (p, t) in powers.iter_mut().zip(decays) {
            *p *= t;
        }
    }
    c
}

/// Power-series inverse: coefficients `g` with `Toeplitz(c) * Toeplitz(g) = I` at order `n`.
pub fn toeplitz_inverse_coeffs(c: &[f64], n: usize) -> Result<Vec<f64>> {
    let c0 = c.first().copied().unwrap_or(0.0);
    if !(c0 > 0.0) {
        return Err(Error::InvalidMatrix(format!("c_0 = {c0} must be positive")));
    }
    let mut g = vec![0.0; n];
    if n == 0 {
        return Ok(g);
    }
    g[0] = 1.0 / c0;
    for k in 1..n {
        let mut acc = 0.0;
        for j in 1..=k.min(c.len() - 1) {
            acc += c[j] * g[k - j];
        }
        g[k] = -acc / c0;
    }
    Ok(g)
}

/// Product of two lower-triangular Toeplitz matrices, truncated to `n` coefficients.
pub fn toeplitz_convolve(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (i, &ai) in a.iter().enumerate().take(n) {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate().take(n - i) {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// `||A T(c)^{-1}||_F` with `h = cumsum(g)` and `sum_k (n - k) h_k^2`.
pub fn toeplitz_prefix_error_norm(c: &[f64]) -> Result<f64> {
    let n = c.len();
    let g = toeplitz_inverse_coeffs(c, n)?;
    let mut h = 0.0;
    let mut total = 0.0;
    for (k, gk) in g.iter().enumerate() {
        h += gk;
        total += (n - k) as f64 * h * h;
    }
    Ok(total.sqrt())
}

/// Inverse of a lower-triangular matrix by forward substitution.
pub fn lower_triangular_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let d = m[(i, i)];
            if d == 0.0 || !d.is_finite() {
                return Err(Error::InvalidMatrix(format!(
                    "singular: diagonal entry {i} is {d}"
                )));
            }
            let rhs = if i == j { 1.0 } else { 0.0 };
            let mut acc = 0.0;
            for k in j..i {
                acc += m[(i, k)] * inv[(k, j)];
            }
            inv[(i, j)] = (rhs - acc) / d;
        }
    }
    Ok(inv)
}

/// `||A C^{-1}||_F` through a dense inverse.
pub fn dense_prefix_error_norm(m: &DMatrix<f64>) -> Result<f64> {
    let inv = lower_triangular_inverse(m)?;
    let n = inv.nrows();
    let mut total = 0.0;
    for j in 0..n {
        let mut running = 0.0;
        for i in 0..n {
            running += inv[(i, j)];
            total += running * running;
        }
    }
    Ok(total.sqrt())
}

#[derive(Serialize, Deserialize)]
struct MatrixWire {
    order: usize,
    family: String,
    payload: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct BandedPayload {
    band_width: usize,
    diagonals: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct BltPayload {
    buffers: usize,
    weights: Vec<f64>,
    decays: Vec<f64>,
}

impl From<StrategyMatrix> for MatrixWire {
    fn from(m: StrategyMatrix) -> Self {
        let family = m.family().to_string();
        let payload = match m.repr {
            Representation::Dense(d) => {
                let rows: Vec<Vec<f64>> = (0..d.nrows())
                    .map(|i| (0..d.ncols()).map(|j| d[(i, j)]).collect())
                    .collect();
                serde_json::to_value(rows)
            }
            Representation::Banded { diagonals } => serde_json::to_value(BandedPayload {
                band_width: diagonals.len(),
                diagonals,
            }),
            Representation::Toeplitz(c) => serde_json::to_value(c),
            Representation::Blt { weights, decays } => serde_json::to_value(BltPayload {
                buffers: weights.len(),
                weights,
                decays,
            }),
        }
        .expect("plain numeric payload");
        MatrixWire {
            order: m.order,
            family,
            payload,
        }
    }
}

impl TryFrom<MatrixWire> for StrategyMatrix {
    type Error = Error;

    fn try_from(w: MatrixWire) -> Result<Self> {
        let m = match w.family.as_str() {
            "dense" => {
                let rows: Vec<Vec<f64>> = serde_json::from_value(w.payload)?;
                StrategyMatrix::from_rows(&rows)?
            }
            "banded" => {
                let p: BandedPayload = serde_json::from_value(w.payload)?;
                if p.band_width != p.diagonals.len() {
                    return Err(Error::InvalidMatrix(format!(
                        "band_width {} but {} diagonals",
                        p.band_width,
                        p.diagonals.len()
                    )));
                }
                StrategyMatrix::banded(p.diagonals)?
            }
            "toeplitz" => {
                let c: Vec<f64> = serde_json::from_value(w.payload)?;
                StrategyMatrix::toeplitz_with_order(&c, w.order)?
            }
            "blt" => {
                let p: BltPayload = serde_json::from_value(w.payload)?;
                if p.buffers != p.weights.len() {
                    return Err(Error::InvalidMatrix(format!(
                        "buffers = {} but {} weights",
                        p.buffers,
                        p.weights.len()
                    )));
                }
                StrategyMatrix::blt(&p.weights, &p.decays, w.order)?
            }
            other => return Err(Error::InvalidMatrix(format!("unknown family {other:?}"))),
        };
        if m.order != w.order {
            return Err(Error::DimensionMismatch {
                expected: w.order,
                actual: m.order,
            });
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect()
    }

    #[test]
    fn materialize_toeplitz_examples() {
        assert_eq!(
            rows(&StrategyMatrix::toeplitz(&[1.0]).unwrap().materialize()),
            vec![vec![1.0]]
        );
        assert_eq!(
            rows(&StrategyMatrix::toeplitz(&[1.0, 0.5]).unwrap().materialize()),
            vec![vec![1.0, 0.0], vec![0.5, 1.0]]
        );
    }

    #[test]
    fn blt_expands_to_geometric_coefficients() {
        let blt = StrategyMatrix::blt(&[0.5], &[0.5], 3).unwrap();
        assert_eq!(blt.toeplitz_coeffs().unwrap(), vec![1.0, 0.5, 0.25]);
        let t = StrategyMatrix::toeplitz(&[1.0, 0.5, 0.25]).unwrap();
        assert_eq!(blt.materialize(), t.materialize());
    }

    #[test]
    fn rejects_invalid_matrices() {
        let upper = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(StrategyMatrix::dense(upper).is_err());
        let zero_diag = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 0.0]);
        assert!(StrategyMatrix::dense(zero_diag).is_err());
        assert!(StrategyMatrix::toeplitz(&[0.0, 1.0]).is_err());
        assert!(StrategyMatrix::toeplitz(&[1.0, f64::NAN]).is_err());
        assert!(StrategyMatrix::blt(&[0.1], &[1.0], 4).is_err());
        assert!(StrategyMatrix::blt(&[-0.1], &[0.5], 4).is_err());
        assert!(StrategyMatrix::banded(vec![vec![1.0, 1.0], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn banded_places_diagonals() {
        let m = StrategyMatrix::banded(vec![vec![1.0, 2.0, 3.0], vec![0.5, 0.25]]).unwrap();
        assert_eq!(
            rows(&m.materialize()),
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.5, 2.0, 0.0],
                vec![0.0, 0.25, 3.0]
            ]
        );
    }

    #[test]
    fn identity_modes_sum_participating_columns() {
        let c = StrategyMatrix::identity(4).unwrap();
        let modes = c
            .mode_vectors(&ParticipationSchema::new(2, 2).unwrap())
            .unwrap();
        assert_eq!(modes.modes()[0], vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(modes.modes()[1], vec![0.0, 1.0, 0.0, 1.0]);
        assert!(close(
            c.unamplified_sensitivity(&ParticipationSchema::new(2, 2).unwrap())
                .unwrap(),
            2f64.sqrt(),
            1e-15
        ));

        let single = c
            .mode_vectors(&ParticipationSchema::new(1, 4).unwrap())
            .unwrap();
        assert_eq!(single.modes()[0], vec![1.0; 4]);
        assert!(close(single.max_norm(), 2.0, 1e-15));

        let n = 5;
        let id = StrategyMatrix::identity(n).unwrap();
        assert_eq!(
            id.unamplified_sensitivity(&ParticipationSchema::new(n, 1).unwrap())
                .unwrap(),
            1.0
        );
    }

    #[test]
    fn signed_matrix_modes_use_absolute_values() {
        let c = StrategyMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 1.0]]).unwrap();
        let schema = ParticipationSchema::new(2, 1).unwrap();
        let modes = c.mode_vectors(&schema).unwrap();
        assert_eq!(modes.modes()[0], vec![1.0, 1.0]);
        assert_eq!(modes.modes()[1], vec![0.0, 1.0]);
        assert_eq!(modes, c.abs().mode_vectors(&schema).unwrap());
        assert!(close(
            c.unamplified_sensitivity(&schema).unwrap(),
            2f64.sqrt(),
            1e-15
        ));
    }

    #[test]
    fn mode_vectors_reject_mismatched_schema() {
        let c = StrategyMatrix::identity(4).unwrap();
        assert!(matches!(
            c.mode_vectors(&ParticipationSchema::new(3, 1).unwrap()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn inverse_coefficient_examples() {
        assert_eq!(toeplitz_inverse_coeffs(&[1.0], 1).unwrap(), vec![1.0]);
        assert_eq!(
            toeplitz_inverse_coeffs(&[1.0, 0.5], 3).unwrap(),
            vec![1.0, -0.5, 0.25]
        );
        assert_eq!(toeplitz_inverse_coeffs(&[2.0], 2).unwrap(), vec![0.5, 0.0]);
        assert!(toeplitz_inverse_coeffs(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn rmse_examples() {
        let n = 6;
        let a = StrategyMatrix::prefix_sum(n).unwrap();
        assert!(close(a.rmse(1.0).unwrap(), (n as f64).sqrt(), 1e-14));
        let id = StrategyMatrix::identity(4).unwrap();
        assert!(close(id.rmse(1.0).unwrap(), 10f64.sqrt(), 1e-14));
        let t = StrategyMatrix::toeplitz(&[1.0, 0.5]).unwrap();
        assert!(close(t.rmse(2.0).unwrap(), 3.0, 1e-14));
        let dense = StrategyMatrix::dense(t.materialize()).unwrap();
        assert!(close(dense.rmse(2.0).unwrap(), 3.0, 1e-14));
    }

    #[test]
    fn json_layout_matches_wire_format() {
        let t = StrategyMatrix::toeplitz(&[1.0, 0.5]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&t).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"order": 2, "family": "toeplitz", "payload": [1.0, 0.5]})
        );

        let blt = StrategyMatrix::blt(&[0.1, 0.2, 0.3], &[0.3, 0.6, 0.9], 8).unwrap();
        let v = serde_json::to_value(&blt).unwrap();
        assert_eq!(v["payload"]["buffers"], 3);
        let back: StrategyMatrix = serde_json::from_value(v).unwrap();
        assert_eq!(back, blt);

        let dense: StrategyMatrix =
            serde_json::from_str(r#"{"order":2,"family":"dense","payload":[[1,0],[-1,1]]}"#)
                .unwrap();
        assert_eq!(dense.materialize()[(1, 0)], -1.0);

        assert!(serde_json::from_str::<StrategyMatrix>(
            r#"{"order":2,"family":"dense","payload":[[1,2],[0,1]]}"#
        )
        .is_err());
        assert!(serde_json::from_str::<StrategyMatrix>(
            r#"{"order":2,"family":"circulant","payload":[]}"#
        )
        .is_err());
    }

    #[test]
    fn schema_rejects_inconsistent_iterations() {
        assert!(serde_json::from_str::<ParticipationSchema>(
            r#"{"batches_per_epoch":4,"epochs":2,"iterations":9}"#
        )
        .is_err());
        let s: ParticipationSchema =
            serde_json::from_str(r#"{"batches_per_epoch":4,"epochs":2}"#).unwrap();
        assert_eq!(s.iterations(), 8);
        assert!(ParticipationSchema::new(0, 1).is_err());
    }
}
