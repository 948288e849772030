//! Continuous-time Markov mutation models and branch transition matrices.
//!
//! A model is a per-unit-theta rate matrix `R` together with its equilibrium
//! law `p0`. The transition matrix along a branch of coalescent length `dt`
//! is `exp(theta * dt * R)`.
//!
//! Reversible models (every model built here) carry a spectral factorization
//! of the symmetrized generator `D^{1/2} R D^{-1/2}`, `D = diag(p0)`, so that
//! both whole matrices and matrix-vector products `T v` / `T^T v` can be
//! evaluated for any branch length without re-exponentiating. Models that are
//! not reversible fall back to scaling-and-squaring with a Taylor core.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;
const EQUILIBRIUM_SUM_TOL: f64 = 1e-12;
const STATIONARITY_TOL: f64 = 1e-10;
const REVERSIBILITY_TOL: f64 = 1e-12;

/// Eigen-factorization of a reversible generator.
#[derive(Debug, Clone)]
pub struct Spectral {
    k: usize,
    sqrt_p0: Vec<f64>,
    inv_sqrt_p0: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors, row-major, column `j` belongs to `eigenvalues[j]`.
    vectors: Vec<f64>,
}

impl Spectral {
    fn new(rate: &[f64], p0: &[f64], k: usize) -> Option<Self> {
        if p0.iter().any(|&p| p <= 0.0) {
            return None;
        }
        let sqrt_p0: Vec<f64> = p0.iter().map(|p| p.sqrt()).collect();
        let inv_sqrt_p0: Vec<f64> = sqrt_p0.iter().map(|s| 1.0 / s).collect();
        let scale = rate.iter().fold(0.0f64, |m, r| m.max(r.abs())).max(1.0);
        let sym = DMatrix::from_fn(k, k, |i, j| sqrt_p0[i] * rate[i * k + j] * inv_sqrt_p0[j]);
        for i in 0..k {
            for j in (i + 1)..k {
                if (sym[(i, j)] - sym[(j, i)]).abs() > REVERSIBILITY_TOL * scale {
                    return None;
                }
            }
        }
        let sym = (&sym + sym.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let mut vectors = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                vectors[i * k + j] = eig.eigenvectors[(i, j)];
            }
        }
        // the generator is negative semidefinite; clip rounding above zero
        let eigenvalues = eig.eigenvalues.iter().map(|&l| l.min(0.0)).collect();
        Some(Spectral {
            k,
            sqrt_p0,
            inv_sqrt_p0,
            eigenvalues,
            vectors,
        })
    }

    pub fn num_states(&self) -> usize {
        self.k
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Coefficients for evaluating `T(s) v` at many `s`.
    pub fn forward_coefficients(&self, v: &[f64], out: &mut [f64]) {
        self.project(v, &self.sqrt_p0, out);
    }

    /// Coefficients for evaluating `T(s)^T v` at many `s`.
    pub fn transpose_coefficients(&self, v: &[f64], out: &mut [f64]) {
        self.project(v, &self.inv_sqrt_p0, out);
    }

    fn project(&self, v: &[f64], weight: &[f64], out: &mut [f64]) {
        let k = self.k;
        out[..k].iter_mut().for_each(|o| *o = 0.0);
        for i in 0..k {
            let wv = weight[i] * v[i];
            if wv == 0.0 {
                continue;
            }
            let row = &self.vectors[i * k..(i + 1) * k];
            for (o, &e) in out[..k].iter_mut().zip(row) {
                *o += e * wv;
            }
        }
    }

    /// `out = T(s) v` from coefficients produced by [`Spectral::forward_coefficients`].
    pub fn eval_forward(&self, coeffs: &[f64], s: f64, decay: &mut [f64], out: &mut [f64]) {
        self.eval(coeffs, s, &self.inv_sqrt_p0, decay, out);
    }

    /// `out = T(s)^T v` from coefficients produced by [`Spectral::transpose_coefficients`].
    pub fn eval_transpose(&self, coeffs: &[f64], s: f64, decay: &mut [f64], out: &mut [f64]) {
        self.eval(coeffs, s, &self.sqrt_p0, decay, out);
    }

    fn eval(&self, coeffs: &[f64], s: f64, weight: &[f64], decay: &mut [f64], out: &mut [f64]) {
        let k = self.k;
        for j in 0..k {
            decay[j] = (self.eigenvalues[j] * s).exp() * coeffs[j];
        }
        for i in 0..k {
            let row = &self.vectors[i * k..(i + 1) * k];
            let acc: f64 = row.iter().zip(&decay[..k]).map(|(e, d)| e * d).sum();
            out[i] = weight[i] * acc;
        }
    }

    /// Dense `exp(s R)`.
    pub fn matrix(&self, s: f64) -> Vec<f64> {
        let k = self.k;
        let decay: Vec<f64> = self.eigenvalues.iter().map(|l| (l * s).exp()).collect();
        let mut out = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let mut acc = 0.0;
                for (l, d) in decay.iter().enumerate() {
                    acc += self.vectors[i * k + l] * d * self.vectors[j * k + l];
                }
                out[i * k + j] = self.inv_sqrt_p0[i] * acc * self.sqrt_p0[j];
            }
        }
        out
    }
}

/// A continuous-time mutation process on `K` allelic states.
#[derive(Debug, Clone)]
pub struct MutationModel {
    num_states: usize,
    rate: Vec<f64>,
    equilibrium: Vec<f64>,
    spectral: Option<Spectral>,
}

impl MutationModel {
    /// Builds a model from a row-major `K x K` rate matrix, solving for its equilibrium.
    pub fn from_rate_matrix(num_states: usize, rate: Vec<f64>) -> Result<Self> {
        if num_states < 2 {
            return Err(Error::InvalidModel(format!(
                "need at least 2 states, got {num_states}"
            )));
        }
        if rate.len() != num_states * num_states {
            return Err(Error::InvalidModel(format!(
                "rate matrix has {} entries, expected {}",
                rate.len(),
                num_states * num_states
            )));
        }
        let k = num_states;
        let scale = rate.iter().fold(0.0f64, |m, r| m.max(r.abs())).max(1.0);
        for i in 0..k {
            let row = &rate[i * k..(i + 1) * k];
            if row.iter().any(|r| !r.is_finite()) {
                return Err(Error::InvalidModel(format!("row {i} has non-finite rates")));
            }
            if row.iter().enumerate().any(|(j, &r)| j != i && r < 0.0) {
                return Err(Error::InvalidModel(format!(
                    "row {i} has a negative off-diagonal rate"
                )));
            }
            let sum: f64 = row.iter().sum();
            if sum.abs() > ROW_SUM_TOL * scale {
                return Err(Error::InvalidModel(format!(
                    "row {i} sums to {sum:e}, expected 0"
                )));
            }
        }
        let equilibrium = solve_equilibrium(&rate, k)?;
        Self::with_equilibrium(k, rate, equilibrium)
    }

    fn with_equilibrium(k: usize, rate: Vec<f64>, equilibrium: Vec<f64>) -> Result<Self> {
        let total: f64 = equilibrium.iter().sum();
        if (total - 1.0).abs() > EQUILIBRIUM_SUM_TOL || equilibrium.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidModel(
                "equilibrium is not a probability vector".into(),
            ));
        }
        if equilibrium.iter().any(|&p| p <= 0.0) {
            return Err(Error::InvalidModel(
                "equilibrium has empty states; the chain must be irreducible".into(),
            ));
        }
        for j in 0..k {
            let flux: f64 = (0..k).map(|i| equilibrium[i] * rate[i * k + j]).sum();
            if flux.abs() > STATIONARITY_TOL {
                return Err(Error::InvalidModel(format!(
                    "equilibrium is not stationary at state {j} (residual {flux:e})"
                )));
            }
        }
        let spectral = Spectral::new(&rate, &equilibrium, k);
        Ok(MutationModel {
            num_states: k,
            rate,
            equilibrium,
            spectral,
        })
    }

    /// Two-allele model with unit rate matrix `[[-0.5, 0.5], [0.5, -0.5]]`.
    pub fn binary() -> Self {
        Self::with_equilibrium(2, vec![-0.5, 0.5, 0.5, -0.5], vec![0.5, 0.5])
            .expect("binary model is valid")
    }

    /// Stepwise microsatellite model on states `0..num_states`.
    ///
    /// Interior states move to either neighbour at rate 0.5; the two boundary
    /// states move to their single neighbour at rate 1.
    pub fn stepwise(num_states: usize) -> Result<Self> {
        if num_states < 2 {
            return Err(Error::InvalidModel(format!(
                "stepwise model needs at least 2 states, got {num_states}"
            )));
        }
        let k = num_states;
        let mut rate = vec![0.0; k * k];
        for i in 0..k {
            let neighbours: Vec<usize> = [i.checked_sub(1), (i + 1 < k).then_some(i + 1)]
                .into_iter()
                .flatten()
                .collect();
            let r = 1.0 / neighbours.len() as f64;
            for j in neighbours {
                rate[i * k + j] = r;
            }
            rate[i * k + i] = -1.0;
        }
        Self::from_rate_matrix(k, rate)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// Row-major `K x K` unit rate matrix.
    pub fn rate_matrix(&self) -> &[f64] {
        &self.rate
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rate[from * self.num_states + to]
    }

    pub fn equilibrium(&self) -> &[f64] {
        &self.equilibrium
    }

    /// Spectral factorization, present for reversible models.
    pub fn spectral(&self) -> Option<&Spectral> {
        self.spectral.as_ref()
    }

    /// `exp(theta * dt * R)`.
    pub fn transition_matrix(&self, theta: f64, dt: f64) -> Result<TransitionMatrix> {
        if !(dt >= 0.0) || !dt.is_finite() {
            return Err(Error::Domain(format!(
                "branch duration must be a finite nonnegative number, got {dt}"
            )));
        }
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::Domain(format!(
                "theta must be positive and finite, got {theta}"
            )));
        }
        Ok(self.transition_for_length(theta * dt))
    }

    /// `exp(s * R)` for a nonnegative scaled branch length `s`.
    pub(crate) fn transition_for_length(&self, s: f64) -> TransitionMatrix {
        let k = self.num_states;
        let mut data = if s == 0.0 {
            identity(k)
        } else {
            match &self.spectral {
                Some(sp) => sp.matrix(s),
                None => {
                    let a: Vec<f64> = self.rate.iter().map(|r| r * s).collect();
                    expm_scaling_squaring(&a, k)
                }
            }
        };
        for v in data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        TransitionMatrix {
            k,
            data,
            branch_length: s,
        }
    }
}

fn identity(k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k * k];
    for i in 0..k {
        m[i * k + i] = 1.0;
    }
    m
}

/// Normalized left null vector of `R`: solves `R^T p = 0` with `sum(p) = 1`.
fn solve_equilibrium(rate: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut a = DMatrix::from_fn(k, k, |i, j| rate[j * k + i]);
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(k);
    b[k - 1] = 1.0;
    let p = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidModel("rate matrix has no unique equilibrium".into()))?;
    Ok(p.iter()
        .map(|&v| if v.abs() < 1e-300 { 0.0 } else { v })
        .collect())
}

/// Matrix exponential of a row-major `k x k` matrix by scaling and squaring
/// around a degree-20 Taylor core.
pub fn expm_scaling_squaring(a: &[f64], k: usize) -> Vec<f64> {
    let norm = (0..k)
        .map(|j| (0..k).map(|i| a[i * k + j].abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let mut squarings = 0u32;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
    }
    let scale = 0.5f64.powi(squarings as i32);
    let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();

    let mut result = identity(k);
    let mut term = identity(k);
    for order in 1..=20 {
        term = matmul(&term, &scaled, k);
        let inv = 1.0 / order as f64;
        term.iter_mut().for_each(|t| *t *= inv);
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, &result, k);
    }
    result
}

pub(crate) fn matmul(a: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..k {
                out[i * k + j] += ail * b[l * k + j];
            }
        }
    }
    out
}

/// Branch transition matrix `exp(branch_length * R)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    k: usize,
    data: Vec<f64>,
    branch_length: f64,
}

impl TransitionMatrix {
    pub fn num_states(&self) -> usize {
        self.k
    }

    /// `theta * dt`.
    pub fn branch_length(&self) -> f64 {
        self.branch_length
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.k + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.data[from * self.k..(from + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `out[y] = sum_z T[y][z] v[z]`: pulls a child-side vector up to the parent.
    #[inline]
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let k = self.k;
        for (y, o) in out[..k].iter_mut().enumerate() {
            let row = &self.data[y * k..(y + 1) * k];
            *o = row.iter().zip(v).map(|(t, m)| t * m).sum();
        }
    }

    /// `out[z] = sum_y T[y][z] v[y]`: pushes a parent-side vector down to the child.
    #[inline]
    pub fn apply_transpose(&self, v: &[f64], out: &mut [f64]) {
        let k = self.k;
        out[..k].iter_mut().for_each(|o| *o = 0.0);
        for (y, &vy) in v[..k].iter().enumerate() {
            if vy == 0.0 {
                continue;
            }
            let row = &self.data[y * k..(y + 1) * k];
            for (o, t) in out[..k].iter_mut().zip(row) {
                *o += t * vy;
            }
        }
    }
}

/// Memo of transition matrices keyed on the exact bit patterns of `(theta, dt)`.
///
/// Owned by a single worker. Exact keys keep cached and uncached evaluation
/// bit-identical.
#[derive(Debug, Clone)]
pub struct TransitionCache {
    entries: HashMap<(u64, u64), Arc<TransitionMatrix>>,
    capacity: usize,
    hits: u64,
    misses: u64,
}

impl Default for TransitionCache {
    fn default() -> Self {
        Self::with_capacity(4096)
    }
}

impl TransitionCache {
    pub fn with_capacity(capacity: usize) -> Self {
        TransitionCache {
            entries: HashMap::new(),
            capacity: capacity.max(1),
            hits: 0,
            misses: 0,
        }
    }

    pub fn get(
        &mut self,
        model: &MutationModel,
        theta: f64,
        dt: f64,
    ) -> Result<Arc<TransitionMatrix>> {
        let key = (theta.to_bits(), dt.to_bits());
        if let Some(t) = self.entries.get(&key) {
            self.hits += 1;
            return Ok(Arc::clone(t));
        }
        let t = Arc::new(model.transition_matrix(theta, dt)?);
        self.misses += 1;
        if self.entries.len() >= self.capacity {
            self.entries.clear();
        }
        self.entries.insert(key, Arc::clone(&t));
        Ok(t)
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn binary_model_matches_unit_rates() {
        let m = MutationModel::binary();
        assert_eq!(m.rate_matrix(), &[-0.5, 0.5, 0.5, -0.5]);
        assert_eq!(m.equilibrium(), &[0.5, 0.5]);
        for j in 0..2 {
            let flux: f64 = (0..2).map(|i| m.equilibrium()[i] * m.rate(i, j)).sum();
            assert_eq!(flux, 0.0);
        }
        assert!(m.spectral().is_some());
    }

    #[test]
    fn stepwise_two_states_is_symmetric_unit_flip() {
        let m = MutationModel::stepwise(2).unwrap();
        assert_eq!(m.rate_matrix(), &[-1.0, 1.0, 1.0, -1.0]);
        assert!(max_abs_diff(m.equilibrium(), &[0.5, 0.5]) < 1e-15);
    }

    #[test]
    fn stepwise_twenty_is_tridiagonal() {
        let m = MutationModel::stepwise(20).unwrap();
        for i in 0..20 {
            let row_sum: f64 = (0..20).map(|j| m.rate(i, j)).sum();
            assert!(row_sum.abs() < 1e-12);
            assert_eq!(m.rate(i, i), -1.0);
            for j in 0..20 {
                if i.abs_diff(j) > 1 {
                    assert_eq!(m.rate(i, j), 0.0);
                }
            }
        }
        assert_eq!(m.rate(0, 1), 1.0);
        assert_eq!(m.rate(19, 18), 1.0);
        assert_eq!(m.rate(5, 4), 0.5);
        assert_eq!(m.rate(5, 6), 0.5);
        assert!(
            m.spectral().is_some(),
            "reflecting stepwise model is reversible"
        );
    }

    #[test]
    fn stepwise_three_equilibrium_matches_long_time_limit() {
        let m = MutationModel::stepwise(3).unwrap();
        // long-time oracle: rows of exp(100 R) via scaling and squaring
        let a: Vec<f64> = m.rate_matrix().iter().map(|r| r * 100.0).collect();
        let limit = expm_scaling_squaring(&a, 3);
        for i in 0..3 {
            assert!(max_abs_diff(&limit[i * 3..i * 3 + 3], m.equilibrium()) < 1e-12);
        }
        assert!(max_abs_diff(m.equilibrium(), &[0.25, 0.5, 0.25]) < 1e-14);
    }

    #[test]
    fn rejects_too_few_states() {
        assert!(matches!(
            MutationModel::stepwise(1),
            Err(Error::InvalidModel(_))
        ));
        assert!(matches!(
            MutationModel::stepwise(0),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn rejects_bad_rate_matrices() {
        assert!(MutationModel::from_rate_matrix(2, vec![-1.0, 1.0, 1.0, -0.5]).is_err());
        assert!(MutationModel::from_rate_matrix(2, vec![1.0, -1.0, 1.0, -1.0]).is_err());
        assert!(MutationModel::from_rate_matrix(2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn zero_branch_is_identity() {
        let m = MutationModel::binary();
        let t = m.transition_matrix(1.0, 0.0).unwrap();
        assert_eq!(t.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn negative_branch_is_a_domain_error() {
        let m = MutationModel::binary();
        assert!(matches!(
            m.transition_matrix(1.0, -0.1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            m.transition_matrix(0.0, 0.1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn binary_closed_form_and_taylor_agree() {
        let m = MutationModel::binary();
        for &tau in &[1e-6, 0.01, 0.3, 1.0, 2.5, 7.0] {
            let t = m.transition_matrix(1.0, tau).unwrap();
            let e = (-tau).exp();
            let closed = [
                (1.0 + e) / 2.0,
                (1.0 - e) / 2.0,
                (1.0 - e) / 2.0,
                (1.0 + e) / 2.0,
            ];
            let a: Vec<f64> = m.rate_matrix().iter().map(|r| r * tau).collect();
            let taylor = expm_scaling_squaring(&a, 2);
            assert!(max_abs_diff(t.as_slice(), &closed) < 1e-12, "tau={tau}");
            assert!(max_abs_diff(&taylor, &closed) < 1e-12, "tau={tau}");
        }
    }

    #[test]
    fn stepwise_twenty_rows_are_stochastic() {
        let m = MutationModel::stepwise(20).unwrap();
        let t = m.transition_matrix(5.0, 2.0).unwrap();
        let a: Vec<f64> = m.rate_matrix().iter().map(|r| r * 10.0).collect();
        let oracle = expm_scaling_squaring(&a, 20);
        assert!(max_abs_diff(t.as_slice(), &oracle) < 1e-12);
        for i in 0..20 {
            let s: f64 = t.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
            assert!(t.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn spectral_products_match_dense_matrix() {
        let m = MutationModel::stepwise(6).unwrap();
        let sp = m.spectral().unwrap();
        let v = [0.3, 2.0, 0.0, 1.0, 0.5, 4.0];
        let mut c = [0.0; 6];
        let mut d = [0.0; 6];
        let mut out = [0.0; 6];
        let mut dense_out = [0.0; 6];
        for &s in &[0.0, 0.1, 1.7, 30.0] {
            let t = m.transition_for_length(s);
            sp.forward_coefficients(&v, &mut c);
            sp.eval_forward(&c, s, &mut d, &mut out);
            t.apply(&v, &mut dense_out);
            assert!(max_abs_diff(&out, &dense_out) < 1e-12);
            sp.transpose_coefficients(&v, &mut c);
            sp.eval_transpose(&c, s, &mut d, &mut out);
            t.apply_transpose(&v, &mut dense_out);
            assert!(max_abs_diff(&out, &dense_out) < 1e-12);
        }
    }

    #[test]
    fn non_reversible_models_use_taylor_route() {
        // cyclic 0 -> 1 -> 2 -> 0 drift is not reversible
        let r = vec![-1.0, 1.0, 0.0, 0.0, -1.0, 1.0, 1.0, 0.0, -1.0];
        let m = MutationModel::from_rate_matrix(3, r).unwrap();
        assert!(m.spectral().is_none());
        let t = m.transition_matrix(2.0, 0.7).unwrap();
        for i in 0..3 {
            assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        let left: Vec<f64> = (0..3)
            .map(|j| (0..3).map(|i| m.equilibrium()[i] * t.get(i, j)).sum())
            .collect();
        assert!(max_abs_diff(&left, m.equilibrium()) < 1e-12);
    }

    #[test]
    fn cache_returns_identical_matrices() {
        let m = MutationModel::stepwise(4).unwrap();
        let mut cache = TransitionCache::with_capacity(2);
        let a = cache.get(&m, 1.5, 0.25).unwrap();
        let b = cache.get(&m, 1.5, 0.25).unwrap();
        assert_eq!(*a, *b);
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
        cache.get(&m, 1.5, 0.5).unwrap();
        cache.get(&m, 1.5, 0.75).unwrap();
        let c = cache.get(&m, 1.5, 0.25).unwrap();
        assert_eq!(*a, *c);
        assert_eq!(*c, m.transition_matrix(1.5, 0.25).unwrap());
    }
}
