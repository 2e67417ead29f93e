//! Simulated panels of AR processes with known spectra.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::RowMatrix;
use crate::panel::{fourier_frequencies, CovariateSpec, PanelSchema, TimeSeriesPanel, MIN_SERIES_LEN};
use crate::rng::{stream, Substream};

/// Presample steps discarded before the recorded series starts.
pub const BURN_IN: usize = 500;
pub const DEFAULT_NOISE_COVARIATES: usize = 95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimKind {
    AbruptSmooth,
    ArFriedman,
    AdaptspecX,
    SparseFriedman,
}

impl SimKind {
    pub const NAMES: [&'static str; 4] = ["abrupt-smooth", "ar-friedman", "adaptspec-x", "sparse-friedman"];

    pub fn name(self) -> &'static str {
        match self {
            SimKind::AbruptSmooth => Self::NAMES[0],
            SimKind::ArFriedman => Self::NAMES[1],
            SimKind::AdaptspecX => Self::NAMES[2],
            SimKind::SparseFriedman => Self::NAMES[3],
        }
    }
}

impl fmt::Display for SimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abrupt-smooth" => Ok(SimKind::AbruptSmooth),
            "ar-friedman" => Ok(SimKind::ArFriedman),
            "adaptspec-x" => Ok(SimKind::AdaptspecX),
            "sparse-friedman" => Ok(SimKind::SparseFriedman),
            other => Err(Error::UnknownSetting {
                name: other.to_string(),
                valid: Self::NAMES.join(", "),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSetting {
    pub kind: SimKind,
    pub n_series: usize,
    pub series_len: usize,
    pub seed: u64,
    /// Standard-normal noise covariates appended to the Friedman settings.
    pub n_noise: usize,
}

impl SimSetting {
    pub fn new(kind: SimKind, n_series: usize, series_len: usize, seed: u64) -> Self {
        let n_noise = if kind == SimKind::SparseFriedman { DEFAULT_NOISE_COVARIATES } else { 0 };
        Self {
            kind,
            n_series,
            series_len,
            seed,
            n_noise,
        }
    }

    pub fn generate(&self) -> Result<(TimeSeriesPanel, TrueSpectrumSet)> {
        match self.kind {
            SimKind::AbruptSmooth => gen_abrupt_smooth(self.n_series, self.series_len, self.seed),
            SimKind::ArFriedman | SimKind::SparseFriedman => {
                gen_ar_friedman(self.n_series, self.series_len, self.seed, self.n_noise)
            }
            SimKind::AdaptspecX => gen_adjusted_adaptspec(self.n_series, self.series_len, self.seed, &quadrant_region),
        }
    }
}

/// Causal AR(p) process with Gaussian innovations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArProcess {
    pub coeffs: Vec<f64>,
    pub sigma2: f64,
}

impl ArProcess {
    pub fn new(coeffs: Vec<f64>, sigma2: f64) -> Result<Self> {
        check_stationary(&coeffs)?;
        if !(sigma2 > 0.0) {
            return Err(Error::Config("innovation variance must be positive".into()));
        }
        Ok(Self { coeffs, sigma2 })
    }

    /// Autocovariances `gamma_0..gamma_p` from the Yule-Walker equations.
    pub fn autocovariances(&self) -> Vec<f64> {
        let p = self.coeffs.len();
        let mut a = DMatrix::<f64>::zeros(p + 1, p + 1);
        let mut b = DVector::<f64>::zeros(p + 1);
        b[0] = self.sigma2;
        for k in 0..=p {
            a[(k, k)] += 1.0;
            for (r, phi) in self.coeffs.iter().enumerate() {
                let lag = (k as isize - (r as isize + 1)).unsigned_abs();
                a[(k, lag)] -= phi;
            }
        }
        a.lu().solve(&b).expect("stationary process").iter().copied().collect()
    }

    pub fn spectrum(&self, freqs: &[f64]) -> Vec<f64> {
        freqs.iter().map(|&nu| ar_spectrum_at(&self.coeffs, self.sigma2, nu)).collect()
    }

    /// `t` observations after [`BURN_IN`] presample steps started from the
    /// stationary distribution.
    pub fn simulate<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Vec<f64> {
        let p = self.coeffs.len();
        let sd = self.sigma2.sqrt();
        let mut x: Vec<f64> = Vec::with_capacity(p + BURN_IN + t);
        if p > 0 {
            let gamma = self.autocovariances();
            let cov = DMatrix::from_fn(p, p, |i, j| gamma[i.abs_diff(j)]);
            let chol = cov.cholesky().expect("positive definite stationary covariance");
            let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            x.extend((chol.l() * z).iter());
        }
        for _ in 0..BURN_IN + t {
            let n = x.len();
            let mut v = sd * rng.sample::<f64, _>(StandardNormal);
            for (r, phi) in self.coeffs.iter().enumerate() {
                v += phi * x[n - 1 - r];
            }
            x.push(v);
        }
        x.split_off(p + BURN_IN)
    }
}

fn ar_spectrum_at(coeffs: &[f64], sigma2: f64, nu: f64) -> f64 {
    let (mut re, mut im) = (1.0, 0.0);
    for (r, phi) in coeffs.iter().enumerate() {
        let w = 2.0 * PI * (r + 1) as f64 * nu;
        re -= phi * w.cos();
        im += phi * w.sin();
    }
    sigma2 / (re * re + im * im)
}

/// Moduli of the companion-matrix eigenvalues.
pub fn companion_moduli(coeffs: &[f64]) -> Vec<f64> {
    let p = coeffs.len();
    if p == 0 {
        return Vec::new();
    }
    let m = DMatrix::from_fn(p, p, |i, j| if i == 0 { coeffs[j] } else if i == j + 1 { 1.0 } else { 0.0 });
    m.complex_eigenvalues().iter().map(|z| z.norm()).collect()
}

/// Stationary iff every root of `1 - sum phi_r z^r` lies outside the unit
/// circle, i.e. every companion eigenvalue lies inside it.
pub fn check_stationary(coeffs: &[f64]) -> Result<()> {
    if coeffs.iter().any(|c| !c.is_finite()) || companion_moduli(coeffs).iter().any(|&m| !(m < 1.0)) {
        return Err(Error::NonStationary(coeffs.to_vec()));
    }
    Ok(())
}

/// `sigma^2 / |1 - sum_r phi_r exp(-2 pi i r nu)|^2`.
pub fn true_ar_spectrum(coeffs: &[f64], sigma2: f64, freqs: &[f64]) -> Result<Vec<f64>> {
    Ok(ArProcess::new(coeffs.to_vec(), sigma2)?.spectrum(freqs))
}

/// Per-subject generating processes and their spectra on the Fourier grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueSpectrumSet {
    pub processes: Vec<ArProcess>,
    pub freqs: Vec<f64>,
    /// Latent region label per subject (region-map setting only).
    pub labels: Option<Vec<u8>>,
}

impl TrueSpectrumSet {
    pub fn spectrum(&self, subject: usize) -> Vec<f64> {
        self.processes[subject].spectrum(&self.freqs)
    }

    /// `L x N` matrix of true spectra.
    pub fn spectra(&self) -> RowMatrix {
        let rows: Vec<Vec<f64>> = (0..self.processes.len()).map(|l| self.spectrum(l)).collect();
        RowMatrix::from_rows(&rows)
    }

    pub fn log_spectra(&self) -> RowMatrix {
        let mut m = self.spectra();
        m.as_mut_slice().iter_mut().for_each(|v| *v = v.ln());
        m
    }
}

pub fn abrupt_smooth_phi(w1: f64, w2: f64) -> f64 {
    if w1 < 0.5 {
        -0.7 + 1.4 * w2
    } else {
        0.9 - 1.8 * w2
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Friedman-type AR coefficient from the first five covariates.
pub fn friedman_phi(w: &[f64]) -> f64 {
    0.5 * (PI * w[0] * w[1]).sin() - (w[2] - 0.5).powi(2) + 0.35 * sign(w[3] - 0.5) - 0.15 * w[4]
}

/// AR(2) coefficients of region `z`.
pub fn region_coeffs(z: u8) -> Result<[f64; 2]> {
    match z {
        1 => Ok([1.5, -0.75]),
        2 => Ok([-0.8, 0.0]),
        3 => Ok([-1.5, -0.75]),
        4 => Ok([0.2, 0.0]),
        other => Err(Error::Config(format!("region label {other} outside 1..4"))),
    }
}

/// Quadrants split at 0.5: (low, low) = 1, (high, low) = 2, (low, high) = 3,
/// (high, high) = 4.
pub fn quadrant_region(w1: f64, w2: f64) -> u8 {
    match (w1 >= 0.5, w2 >= 0.5) {
        (false, false) => 1,
        (true, false) => 2,
        (false, true) => 3,
        (true, true) => 4,
    }
}

fn check_dims(l: usize, t: usize) -> Result<()> {
    if l == 0 {
        return Err(Error::Config("at least one series is required".into()));
    }
    if t < MIN_SERIES_LEN {
        return Err(Error::SeriesTooShort(t));
    }
    Ok(())
}

fn uniform_covariates<R: Rng + ?Sized>(l: usize, p: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..l).map(|_| (0..p).map(|_| rng.random::<f64>()).collect()).collect()
}

fn assemble<R: Rng + ?Sized>(
    covariates: Vec<Vec<f64>>,
    processes: Vec<ArProcess>,
    t: usize,
    labels: Option<Vec<u8>>,
    rng: &mut R,
) -> Result<(TimeSeriesPanel, TrueSpectrumSet)> {
    let p = covariates[0].len();
    let schema = PanelSchema {
        covariates: (1..=p).map(|j| CovariateSpec::continuous(format!("w{j}"))).collect(),
    };
    let ids: Vec<String> = (1..=covariates.len()).map(|l| format!("s{l}")).collect();
    let series: Vec<Vec<f64>> = processes.iter().map(|proc_| proc_.simulate(t, rng)).collect();
    let panel = TimeSeriesPanel::new(ids, series, covariates, schema)?;
    let truth = TrueSpectrumSet {
        processes,
        freqs: fourier_frequencies(t),
        labels,
    };
    Ok((panel, truth))
}

pub fn gen_abrupt_smooth(l: usize, t: usize, seed: u64) -> Result<(TimeSeriesPanel, TrueSpectrumSet)> {
    check_dims(l, t)?;
    let mut rng = stream(seed, Substream::Panel);
    let covariates = uniform_covariates(l, 2, &mut rng);
    let processes = covariates
        .iter()
        .map(|w| ArProcess::new(vec![abrupt_smooth_phi(w[0], w[1])], 1.0))
        .collect::<Result<Vec<_>>>()?;
    assemble(covariates, processes, t, None, &mut rng)
}

pub fn gen_ar_friedman(l: usize, t: usize, seed: u64, n_noise: usize) -> Result<(TimeSeriesPanel, TrueSpectrumSet)> {
    check_dims(l, t)?;
    let mut rng = stream(seed, Substream::Panel);
    let mut covariates = uniform_covariates(l, 5, &mut rng);
    for row in &mut covariates {
        row.extend((0..n_noise).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    let processes = covariates
        .iter()
        .map(|w| ArProcess::new(vec![friedman_phi(w)], 1.0))
        .collect::<Result<Vec<_>>>()?;
    assemble(covariates, processes, t, None, &mut rng)
}

pub fn gen_adjusted_adaptspec(
    l: usize,
    t: usize,
    seed: u64,
    region_map: &dyn Fn(f64, f64) -> u8,
) -> Result<(TimeSeriesPanel, TrueSpectrumSet)> {
    check_dims(l, t)?;
    let mut rng = stream(seed, Substream::Panel);
    let covariates = uniform_covariates(l, 2, &mut rng);
    let labels: Vec<u8> = covariates.iter().map(|w| region_map(w[0], w[1])).collect();
    let processes = labels
        .iter()
        .map(|&z| ArProcess::new(region_coeffs(z)?.to_vec(), 1.0))
        .collect::<Result<Vec<_>>>()?;
    assemble(covariates, processes, t, Some(labels), &mut rng)
}

/// Mean squared difference of two log-spectrum matrices.
pub fn mse_log_scale(estimated_log: &RowMatrix, truth_log: &RowMatrix) -> Result<f64> {
    if estimated_log.rows() != truth_log.rows() || estimated_log.cols() != truth_log.cols() {
        return Err(Error::Dimension(format!(
            "estimate is {}x{}, truth is {}x{}",
            estimated_log.rows(),
            estimated_log.cols(),
            truth_log.rows(),
            truth_log.cols()
        )));
    }
    let n = estimated_log.as_slice().len() as f64;
    Ok(estimated_log
        .as_slice()
        .iter()
        .zip(truth_log.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `mean (log f_hat - log f)^2` for an estimated log spectrum against a true
/// spectrum on its natural scale.
pub fn mse_log_spectrum(estimated_log: &RowMatrix, truth: &RowMatrix) -> Result<f64> {
    if let Some(&bad) = truth.as_slice().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::NonPositiveTruth(bad));
    }
    let mut log_truth = truth.clone();
    log_truth.as_mut_slice().iter_mut().for_each(|v| *v = v.ln());
    mse_log_scale(estimated_log, &log_truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abrupt_smooth_examples() {
        assert!(abrupt_smooth_phi(0.3, 0.5).abs() < 1e-15);
        assert!((abrupt_smooth_phi(0.7, 0.0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn friedman_examples() {
        let phi = friedman_phi(&[0.5, 0.5, 0.5, 0.9, 0.0]);
        assert!((phi - (0.5 * (PI / 4.0).sin() + 0.35)).abs() < 1e-15);
        assert!((phi - 0.70355).abs() < 1e-5);
        let zero = friedman_phi(&[0.0, 0.0, 0.5, 0.5, 0.0]);
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn region_processes_are_stationary() {
        for z in 1..=4 {
            check_stationary(&region_coeffs(z).unwrap()).unwrap();
        }
        assert!(region_coeffs(5).is_err());
        assert!(check_stationary(&[1.0]).is_err());
        assert!(check_stationary(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn ar1_spectrum_values() {
        assert_eq!(true_ar_spectrum(&[0.0], 1.0, &[0.1, 0.3]).unwrap(), vec![1.0, 1.0]);
        assert!((true_ar_spectrum(&[0.5], 1.0, &[0.0]).unwrap()[0] - 4.0).abs() < 1e-12);
        assert!(true_ar_spectrum(&[1.2], 1.0, &[0.1]).is_err());
    }

    #[test]
    fn autocovariance_ar1() {
        let p = ArProcess::new(vec![0.6], 2.0).unwrap();
        let g = p.autocovariances();
        assert!((g[0] - 2.0 / (1.0 - 0.36)).abs() < 1e-12);
        assert!((g[1] - 0.6 * g[0]).abs() < 1e-12);
    }

    #[test]
    fn unknown_setting_lists_valid_names() {
        let err = "abrupt-smoth".parse::<SimKind>().unwrap_err().to_string();
        for name in SimKind::NAMES {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn mse_examples() {
        let a = RowMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]);
        let mut b = a.clone();
        assert_eq!(mse_log_scale(&a, &b).unwrap(), 0.0);
        b.as_mut_slice().iter_mut().for_each(|v| *v += 0.3);
        assert!((mse_log_scale(&a, &b).unwrap() - 0.09).abs() < 1e-15);
        let bad = RowMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]);
        assert!(matches!(mse_log_spectrum(&a, &bad), Err(Error::NonPositiveTruth(_))));
    }
}
