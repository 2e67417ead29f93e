//! Local spectrum of a terminal node.
//!
//! A node's log spectrum is `alpha + sum_s beta_s cos(2 pi s nu)` with priors
//! `alpha ~ N(0, sigma_alpha^2)`, `beta ~ N(0, tau^2 D_S)`,
//! `D_S = diag((sqrt(2) pi s)^-2)`, and a half-t prior on `tau` written as
//! `tau^2 | a ~ IG(xi/2, xi/a)`, `a ~ IG(1/2, 1/A^2)`.
//!
//! The Whittle likelihood of a block of residual log-periodogram rows only
//! depends on the row count and, per frequency, on `log sum_l exp(r_lk)`.
//! [`NodeData`] stores exactly these sufficient statistics, which makes mode
//! finding cost `O(N S^2)` per Newton step regardless of the node size.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::matrix::RowMatrix;

pub const DEFAULT_N_BASIS: usize = 7;
pub const DEFAULT_SIGMA_ALPHA2: f64 = 100.0;

/// Exponents of `exp(r - log f)` are clamped to this magnitude.
pub const EXP_CLAMP: f64 = 700.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gradient infinity-norm at which Newton iterations stop.
pub const MODE_GRAD_TOL: f64 = 1e-8;
pub const MODE_MAX_ITER: usize = 100;
/// When the line search stalls at rounding level, a gradient below this is
/// still accepted as converged.
const MODE_STALL_TOL: f64 = 1e-5;

/// Demmler-Reinsch cosine basis `Z[k, s] = cos(2 pi s nu_k)` with penalty
/// `D_S[s] = (sqrt(2) pi s)^-2`, `s = 1..S`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineBasis {
    freqs: Vec<f64>,
    n_basis: usize,
    z: Vec<f64>,
    penalty: Vec<f64>,
    sigma_alpha2: f64,
}

impl CosineBasis {
    pub fn new(freqs: &[f64], n_basis: usize, sigma_alpha2: f64) -> Result<Self> {
        if n_basis == 0 || n_basis >= freqs.len() {
            return Err(Error::Config(format!(
                "basis size S = {n_basis} must satisfy 1 <= S < N = {}",
                freqs.len()
            )));
        }
        if !(sigma_alpha2 > 0.0) {
            return Err(Error::Config("sigma_alpha2 must be positive".into()));
        }
        let mut z = Vec::with_capacity(freqs.len() * n_basis);
        for &nu in freqs {
            for s in 1..=n_basis {
                z.push((2.0 * PI * s as f64 * nu).cos());
            }
        }
        Ok(Self {
            freqs: freqs.to_vec(),
            n_basis,
            z,
            penalty: penalty_diagonal(n_basis),
            sigma_alpha2,
        })
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn n_freqs(&self) -> usize {
        self.freqs.len()
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    /// Row `k` of `Z` (length `S`).
    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.z[k * self.n_basis..(k + 1) * self.n_basis]
    }

    pub fn penalty(&self) -> &[f64] {
        &self.penalty
    }

    pub fn sigma_alpha2(&self) -> f64 {
        self.sigma_alpha2
    }

    /// `alpha + Z beta`.
    pub fn log_spectrum(&self, alpha: f64, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_freqs()];
        self.log_spectrum_into(alpha, beta, &mut out);
        out
    }

    pub fn log_spectrum_into(&self, alpha: f64, beta: &[f64], out: &mut [f64]) {
        debug_assert_eq!(beta.len(), self.n_basis);
        for (k, o) in out.iter_mut().enumerate() {
            *o = alpha + dot(self.row(k), beta);
        }
    }
}

/// `D_S[s] = (sqrt(2) pi s)^-2` for `s = 1..S`.
pub fn penalty_diagonal(n_basis: usize) -> Vec<f64> {
    (1..=n_basis)
        .map(|s| (2.0f64.sqrt() * PI * s as f64).powi(-2))
        .collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spline coefficients and smoothing parameters of one terminal node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub tau2: f64,
    pub a: f64,
}

impl NodeParams {
    pub fn new(alpha: f64, beta: Vec<f64>, tau2: f64, a: f64) -> Result<Self> {
        let p = Self { alpha, beta, tau2, a };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.alpha.is_finite() && self.beta.iter().all(|b| b.is_finite());
        if !finite || !(self.tau2 > 0.0) || !(self.a > 0.0) || !self.tau2.is_finite() || !self.a.is_finite() {
            return Err(Error::Config(format!("invalid node parameters {self:?}")));
        }
        Ok(())
    }

    /// `(alpha, beta_1, ..., beta_S)`.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.beta.len() + 1);
        theta.push(self.alpha);
        theta.extend_from_slice(&self.beta);
        theta
    }

    pub fn with_coefficients(&self, theta: &[f64]) -> Self {
        Self {
            alpha: theta[0],
            beta: theta[1..].to_vec(),
            tau2: self.tau2,
            a: self.a,
        }
    }
}

pub fn log_spectrum_values(params: &NodeParams, basis: &CosineBasis) -> Result<Vec<f64>> {
    if params.beta.len() != basis.n_basis() {
        return Err(Error::Dimension(format!(
            "beta has length {}, basis has {} columns",
            params.beta.len(),
            basis.n_basis()
        )));
    }
    Ok(basis.log_spectrum(params.alpha, &params.beta))
}

/// Half-t hyperparameters `(xi_tau, A_tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HalfTHyper {
    pub xi: f64,
    pub scale: f64,
}

impl Default for HalfTHyper {
    fn default() -> Self {
        Self { xi: 2.0, scale: 10.0 }
    }
}

impl HalfTHyper {
    pub fn validate(&self) -> Result<()> {
        if self.xi > 0.0 && self.scale > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("half-t hyperparameters must be positive".into()))
        }
    }
}

/// Form of the `tau^2 | a, beta` full conditional.
///
/// `Conjugate` is the exact conditional under `beta ~ N(0, tau^2 D_S)`:
/// `IG((xi + S)/2, beta' D_S^-1 beta / 2 + xi/a)`. `PaperLiteral` uses shape
/// `(xi + S + 1)/2` and rate `beta' beta / 2 + xi/a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauUpdateForm {
    #[default]
    Conjugate,
    PaperLiteral,
}

/// Whittle log-likelihood of a block of residual log-periodogram rows under a
/// common log spectrum, including the `-(N/2) log 2 pi` constant per row.
pub fn whittle_loglik(block: &[&[f64]], log_f: &[f64]) -> Result<f64> {
    let n = log_f.len();
    let mut total = 0.0;
    for row in block {
        if row.len() != n {
            return Err(Error::Dimension(format!(
                "residual row of length {} against log spectrum of length {n}",
                row.len()
            )));
        }
        total -= 0.5 * n as f64 * LN_2PI;
        for (r, lf) in row.iter().zip(log_f) {
            total -= lf + (r - lf).clamp(-EXP_CLAMP, EXP_CLAMP).exp();
        }
    }
    Ok(total)
}

/// Sufficient statistics of the residual rows assigned to a node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeData {
    n_series: usize,
    log_sum_exp: Vec<f64>,
}

impl NodeData {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]> + Clone, n_freqs: usize) -> Self {
        let mut max = vec![f64::NEG_INFINITY; n_freqs];
        let mut count = 0;
        for row in rows.clone() {
            assert_eq!(row.len(), n_freqs, "residual row length");
            for (m, &r) in max.iter_mut().zip(row) {
                if r > *m {
                    *m = r;
                }
            }
            count += 1;
        }
        let mut sum = vec![0.0; n_freqs];
        for row in rows {
            for ((s, &r), &m) in sum.iter_mut().zip(row).zip(&max) {
                *s += (r - m).exp();
            }
        }
        let log_sum_exp = max
            .iter()
            .zip(&sum)
            .map(|(&m, &s)| if count == 0 { f64::NEG_INFINITY } else { m + s.ln() })
            .collect();
        Self {
            n_series: count,
            log_sum_exp,
        }
    }

    pub fn from_block(block: &[&[f64]], n_freqs: usize) -> Self {
        Self::from_rows(block.iter().copied(), n_freqs)
    }

    pub fn from_subjects(residuals: &RowMatrix, subjects: &[usize]) -> Self {
        Self::from_rows(subjects.iter().map(|&l| residuals.row(l)), residuals.cols())
    }

    /// Same statistics from precomputed `exp(residuals)`. Frequencies whose
    /// plain sum leaves the safe range are redone from `residuals`.
    pub fn from_exp_subjects(exp_residuals: &RowMatrix, residuals: &RowMatrix, subjects: &[usize]) -> Self {
        let n = exp_residuals.cols();
        let mut sum = vec![0.0; n];
        for &l in subjects {
            for (s, &x) in sum.iter_mut().zip(exp_residuals.row(l)) {
                *s += x;
            }
        }
        let log_sum_exp = sum
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                if (1e-290..1e290).contains(&s) || subjects.is_empty() {
                    s.ln()
                } else {
                    let max = subjects.iter().map(|&l| residuals.get(l, k)).fold(f64::NEG_INFINITY, f64::max);
                    max + subjects.iter().map(|&l| (residuals.get(l, k) - max).exp()).sum::<f64>().ln()
                }
            })
            .collect();
        Self {
            n_series: subjects.len(),
            log_sum_exp,
        }
    }

    /// Statistics of the union of two disjoint blocks.
    pub fn merge(&self, other: &NodeData) -> Self {
        let log_sum_exp = self
            .log_sum_exp
            .iter()
            .zip(&other.log_sum_exp)
            .map(|(&x, &y)| log_add_exp(x, y))
            .collect();
        Self {
            n_series: self.n_series + other.n_series,
            log_sum_exp,
        }
    }

    pub fn n_series(&self) -> usize {
        self.n_series
    }

    pub fn n_freqs(&self) -> usize {
        self.log_sum_exp.len()
    }

    pub fn log_sum_exp(&self) -> &[f64] {
        &self.log_sum_exp
    }

    /// Same value as [`whittle_loglik`] on the rows this was built from.
    pub fn whittle_loglik(&self, log_f: &[f64]) -> f64 {
        let n = self.n_series as f64;
        let mut total = -0.5 * self.n_freqs() as f64 * n * LN_2PI;
        for (&lse, &lf) in self.log_sum_exp.iter().zip(log_f) {
            total -= n * lf + (lse - lf).clamp(-EXP_CLAMP, EXP_CLAMP).exp();
        }
        total
    }
}

fn log_add_exp(x: f64, y: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return y;
    }
    if y == f64::NEG_INFINITY {
        return x;
    }
    let m = x.max(y);
    m + ((x - m).exp() + (y - m).exp()).ln()
}

/// Value, gradient and Hessian of the negative log conditional posterior of
/// `theta = (alpha, beta)` given `tau^2`, up to an additive constant.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub clamp_events: usize,
}

/// `sum_l sum_k [h_k + exp(r_lk - h_k)] + alpha^2/(2 sigma_alpha^2)
///  + beta' D_S^-1 beta / (2 tau^2)` with `h = alpha + Z beta`.
pub fn neg_log_posterior(theta: &[f64], data: &NodeData, tau2: f64, basis: &CosineBasis) -> Objective {
    let d = basis.n_basis() + 1;
    assert_eq!(theta.len(), d);
    let n = data.n_series as f64;
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    let mut clamps = 0;
    let mut value = 0.0;
    let mut x = vec![0.0; d];
    x[0] = 1.0;
    for k in 0..basis.n_freqs() {
        let zk = basis.row(k);
        x[1..].copy_from_slice(zk);
        let h = theta[0] + dot(zk, &theta[1..]);
        let mut e = data.log_sum_exp[k] - h;
        if e.abs() > EXP_CLAMP {
            clamps += 1;
            e = e.clamp(-EXP_CLAMP, EXP_CLAMP);
        }
        let w = e.exp();
        value += n * h + w;
        let g = n - w;
        for i in 0..d {
            grad[i] += g * x[i];
            let wx = w * x[i];
            for j in 0..=i {
                hess[(i, j)] += wx * x[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            hess[(j, i)] = hess[(i, j)];
        }
    }
    add_prior_terms(theta, tau2, basis, &mut value, Some((&mut grad, &mut hess)));
    Objective {
        value,
        gradient: grad,
        hessian: hess,
        clamp_events: clamps,
    }
}

fn add_prior_terms(
    theta: &[f64],
    tau2: f64,
    basis: &CosineBasis,
    value: &mut f64,
    derivs: Option<(&mut DVector<f64>, &mut DMatrix<f64>)>,
) {
    let sa2 = basis.sigma_alpha2();
    *value += theta[0] * theta[0] / (2.0 * sa2);
    for (s, &ds) in basis.penalty().iter().enumerate() {
        let b = theta[s + 1];
        *value += b * b / (2.0 * tau2 * ds);
    }
    if let Some((grad, hess)) = derivs {
        grad[0] += theta[0] / sa2;
        hess[(0, 0)] += 1.0 / sa2;
        for (s, &ds) in basis.penalty().iter().enumerate() {
            grad[s + 1] += theta[s + 1] / (tau2 * ds);
            hess[(s + 1, s + 1)] += 1.0 / (tau2 * ds);
        }
    }
}

/// Objective value only (no derivatives).
pub fn neg_log_posterior_value(theta: &[f64], data: &NodeData, tau2: f64, basis: &CosineBasis) -> f64 {
    let n = data.n_series as f64;
    let mut value = 0.0;
    for k in 0..basis.n_freqs() {
        let h = theta[0] + dot(basis.row(k), &theta[1..]);
        let e = (data.log_sum_exp[k] - h).clamp(-EXP_CLAMP, EXP_CLAMP);
        value += n * h + e.exp();
    }
    add_prior_terms(theta, tau2, basis, &mut value, None);
    value
}

/// Normal approximation `N(mode, H^-1)` of the coefficient posterior.
#[derive(Debug, Clone)]
pub struct Mode {
    pub mean: DVector<f64>,
    /// Lower Cholesky factor of the Hessian at the mode.
    chol_l: DMatrix<f64>,
    log_det_precision: f64,
    pub iterations: usize,
    pub clamp_events: usize,
}

impl Mode {
    fn from_parts(mean: DVector<f64>, chol: Cholesky<f64, Dyn>, iterations: usize, clamps: usize) -> Self {
        let chol_l = chol.l();
        let log_det_precision = 2.0 * chol_l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Self {
            mean,
            chol_l,
            log_det_precision,
            iterations,
            clamp_events: clamps,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Inverse Hessian at the mode.
    pub fn covariance(&self) -> DMatrix<f64> {
        let prec = &self.chol_l * self.chol_l.transpose();
        Cholesky::new(prec)
            .map(|c| c.inverse())
            .unwrap_or_else(|| DMatrix::from_element(self.dim(), self.dim(), f64::NAN))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        // L' x = z gives x ~ N(0, (L L')^-1).
        let x = self
            .chol_l
            .tr_solve_lower_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        (&self.mean + x).iter().copied().collect()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(theta) - &self.mean;
        let y = self.chol_l.transpose() * diff;
        -0.5 * y.norm_squared() + 0.5 * self.log_det_precision - 0.5 * self.dim() as f64 * LN_2PI
    }
}

/// Damped Newton search for the posterior mode of `(alpha, beta)`.
pub fn find_mode(data: &NodeData, tau2: f64, basis: &CosineBasis, init: &[f64]) -> Result<Mode> {
    let mut theta = init.to_vec();
    let mut clamps = 0;
    let mut grad_norm = f64::INFINITY;
    for iter in 0..MODE_MAX_ITER {
        let obj = neg_log_posterior(&theta, data, tau2, basis);
        clamps += obj.clamp_events;
        grad_norm = obj.gradient.amax();
        if !obj.value.is_finite() || !grad_norm.is_finite() {
            break;
        }
        let Some(chol) = Cholesky::new(obj.hessian.clone()) else {
            break;
        };
        if grad_norm < MODE_GRAD_TOL {
            return Ok(Mode::from_parts(DVector::from_vec(theta), chol, iter, clamps));
        }
        let step = chol.solve(&(-&obj.gradient));
        // Near the mode the decrease is below the rounding error of the sum.
        let slack = 1e-13 * obj.value.abs().max(1.0);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(x, s)| x + t * s).collect();
            let v = neg_log_posterior_value(&cand, data, tau2, basis);
            if v <= obj.value + slack {
                moved = cand != theta;
                theta = cand;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            if grad_norm < MODE_STALL_TOL {
                return Ok(Mode::from_parts(DVector::from_vec(theta), chol, iter, clamps));
            }
            break;
        }
    }
    Err(Error::ModeNotConverged {
        iterations: MODE_MAX_ITER,
        grad_norm,
    })
}

/// Log M-H ratio for moving the coefficients from `from` to `to` when both
/// are proposed independently from `proposal`.
pub fn coeff_log_acceptance(
    from: &[f64],
    to: &[f64],
    data: &NodeData,
    tau2: f64,
    basis: &CosineBasis,
    proposal: &Mode,
) -> f64 {
    let u_from = neg_log_posterior_value(from, data, tau2, basis);
    let u_to = neg_log_posterior_value(to, data, tau2, basis);
    (u_from - u_to) + (proposal.log_density(from) - proposal.log_density(to))
}

#[derive(Debug, Clone)]
pub struct CoeffUpdate {
    pub params: NodeParams,
    pub accepted: bool,
    /// Mode finding failed; `params` is the unchanged input.
    pub skipped: bool,
    pub clamp_events: usize,
}

/// Independence M-H update of `(alpha, beta)` with the normal approximation at
/// the mode as proposal. `tau2` and `a` are unchanged.
pub fn mh_update_coeffs<R: Rng + ?Sized>(
    current: &NodeParams,
    data: &NodeData,
    basis: &CosineBasis,
    rng: &mut R,
) -> CoeffUpdate {
    let theta = current.coefficients();
    let mode = match find_mode(data, current.tau2, basis, &theta) {
        Ok(m) => m,
        Err(_) => {
            return CoeffUpdate {
                params: current.clone(),
                accepted: false,
                skipped: true,
                clamp_events: 0,
            }
        }
    };
    let proposal = mode.sample(rng);
    let log_ratio = coeff_log_acceptance(&theta, &proposal, data, current.tau2, basis, &mode);
    let u: f64 = rng.random();
    let accepted = u.ln() < log_ratio;
    CoeffUpdate {
        params: if accepted { current.with_coefficients(&proposal) } else { current.clone() },
        accepted,
        skipped: false,
        clamp_events: mode.clamp_events,
    }
}

/// Draw from `IG(shape, rate)`.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
    rate / g
}

pub fn log_inverse_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// Shapes of the `a | tau^2` and `tau^2 | a, beta` conditionals.
pub fn tau_conditional_shapes(hyper: &HalfTHyper, n_basis: usize, form: TauUpdateForm) -> (f64, f64) {
    let a_shape = (hyper.xi + 1.0) / 2.0;
    let tau_shape = match form {
        TauUpdateForm::Conjugate => (hyper.xi + n_basis as f64) / 2.0,
        TauUpdateForm::PaperLiteral => (hyper.xi + n_basis as f64 + 1.0) / 2.0,
    };
    (a_shape, tau_shape)
}

/// Two-step Gibbs update: `a | tau^2` then `tau^2 | a, beta`.
pub fn gibbs_update_tau<R: Rng + ?Sized>(
    current: &NodeParams,
    hyper: &HalfTHyper,
    penalty: &[f64],
    form: TauUpdateForm,
    rng: &mut R,
) -> NodeParams {
    assert_eq!(current.beta.len(), penalty.len());
    let (a_shape, tau_shape) = tau_conditional_shapes(hyper, penalty.len(), form);
    let a = sample_inverse_gamma(
        a_shape,
        hyper.xi / current.tau2 + 1.0 / (hyper.scale * hyper.scale),
        rng,
    );
    let quad: f64 = match form {
        TauUpdateForm::Conjugate => current.beta.iter().zip(penalty).map(|(b, d)| b * b / d).sum(),
        TauUpdateForm::PaperLiteral => current.beta.iter().map(|b| b * b).sum(),
    };
    let tau2 = sample_inverse_gamma(tau_shape, quad / 2.0 + hyper.xi / a, rng);
    NodeParams {
        alpha: current.alpha,
        beta: current.beta.clone(),
        tau2,
        a,
    }
}

/// Log joint prior density of a node's `(alpha, beta, tau^2, a)`.
pub fn node_log_prior(params: &NodeParams, basis: &CosineBasis, hyper: &HalfTHyper) -> f64 {
    let sa2 = basis.sigma_alpha2();
    let mut lp = -0.5 * (LN_2PI + sa2.ln()) - params.alpha * params.alpha / (2.0 * sa2);
    for (&b, &ds) in params.beta.iter().zip(basis.penalty()) {
        let var = params.tau2 * ds;
        lp += -0.5 * (LN_2PI + var.ln()) - b * b / (2.0 * var);
    }
    lp += log_inverse_gamma_pdf(params.tau2, hyper.xi / 2.0, hyper.xi / params.a);
    lp += log_inverse_gamma_pdf(params.a, 0.5, 1.0 / (hyper.scale * hyper.scale));
    lp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::fourier_frequencies;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basis(t: usize, s: usize) -> CosineBasis {
        CosineBasis::new(&fourier_frequencies(t), s, DEFAULT_SIGMA_ALPHA2).unwrap()
    }

    #[test]
    fn basis_entries() {
        let b = CosineBasis::new(&[0.1, 0.25, 0.4], 2, 100.0).unwrap();
        assert!(b.row(1)[0].abs() < 1e-15);
        assert!((b.penalty()[0] - 1.0 / (2.0 * PI * PI)).abs() < 1e-15);
        assert!((b.penalty()[0] - 0.050_660_6).abs() < 1e-7);
        assert!(b.penalty().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn basis_shape_for_gait_length() {
        let b = basis(256, 7);
        assert_eq!(b.n_freqs(), 127);
        assert_eq!(b.n_basis(), 7);
        assert!(CosineBasis::new(&fourier_frequencies(16), 7, 100.0).is_err());
    }

    #[test]
    fn log_spectrum_examples() {
        let b = basis(64, 7);
        let flat = NodeParams::new(0.7, vec![0.0; 7], 1.0, 1.0).unwrap();
        assert!(log_spectrum_values(&flat, &b).unwrap().iter().all(|&v| v == 0.7));
        let mut beta = vec![0.0; 7];
        beta[0] = 1.0;
        let one = NodeParams::new(0.0, beta, 1.0, 1.0).unwrap();
        let v = log_spectrum_values(&one, &b).unwrap();
        for (k, nu) in b.freqs().iter().enumerate() {
            assert!((v[k] - (2.0 * PI * nu).cos()).abs() < 1e-14);
        }
        let bad = NodeParams::new(0.0, vec![0.0; 3], 1.0, 1.0).unwrap();
        assert!(log_spectrum_values(&bad, &b).is_err());
    }

    #[test]
    fn whittle_examples() {
        let v = whittle_loglik(&[&[0.0, 0.0]], &[0.0, 0.0]).unwrap();
        assert!((v - (-LN_2PI - 2.0)).abs() < 1e-12);
        assert!((v + 3.837_877_066).abs() < 1e-8);

        let r = [0.3, -1.2, 2.0];
        let one = whittle_loglik(&[&r], &r).unwrap();
        let expect: f64 = r.iter().map(|x| -x - 1.0 - 0.5 * LN_2PI).sum();
        assert!((one - expect).abs() < 1e-12);
        let two = whittle_loglik(&[&r, &r], &[0.1, 0.2, 0.3]).unwrap();
        let single = whittle_loglik(&[&r], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(two, 2.0 * single);
        assert!(whittle_loglik(&[&r], &[0.0]).is_err());
    }

    #[test]
    fn objective_at_zero_residuals() {
        let b = basis(32, 7);
        let rows = vec![vec![0.0; b.n_freqs()]; 3];
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let data = NodeData::from_block(&refs, b.n_freqs());
        let obj = neg_log_posterior(&[0.0; 8], &data, 1.0, &b);
        assert!((obj.value - 3.0 * b.n_freqs() as f64).abs() < 1e-9);
    }

    #[test]
    fn merge_matches_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..10).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let all = NodeData::from_block(&refs, 10);
        let merged = NodeData::from_block(&refs[..2], 10).merge(&NodeData::from_block(&refs[2..], 10));
        assert_eq!(all.n_series(), merged.n_series());
        for (x, y) in all.log_sum_exp().iter().zip(merged.log_sum_exp()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gibbs_shapes() {
        let h = HalfTHyper::default();
        assert_eq!(tau_conditional_shapes(&h, 7, TauUpdateForm::PaperLiteral), (1.5, 5.0));
        assert_eq!(tau_conditional_shapes(&h, 7, TauUpdateForm::Conjugate), (1.5, 4.5));
    }

    #[test]
    fn zero_beta_tau_draw_is_pure_inverse_gamma() {
        let h = HalfTHyper::default();
        let p = NodeParams::new(0.0, vec![0.0; 7], 2.0, 1.0).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = r1.clone();
        let out = gibbs_update_tau(&p, &h, &penalty_diagonal(7), TauUpdateForm::PaperLiteral, &mut r1);
        let a = sample_inverse_gamma(1.5, h.xi / 2.0 + 1.0 / 100.0, &mut r2);
        let tau2 = sample_inverse_gamma(5.0, h.xi / a, &mut r2);
        assert_eq!(out.a, a);
        assert_eq!(out.tau2, tau2);
    }

    #[test]
    fn inverse_gamma_density_normalises() {
        // trapezoid on a log grid
        let (shape, rate) = (1.5, 0.7);
        let mut total = 0.0;
        let n = 200_000;
        let (lo, hi) = (1e-4f64.ln(), 1e5f64.ln());
        let h = (hi - lo) / n as f64;
        for i in 0..=n {
            let lx = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * (log_inverse_gamma_pdf(lx.exp(), shape, rate) + lx).exp() * h;
        }
        assert!((total - 1.0).abs() < 2e-3, "{total}");
    }
}
