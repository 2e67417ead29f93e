//! Posterior summaries of a fitted forest: conditional spectra, accumulated
//! local effects, band ratios and variable inclusion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::PosteriorDraws;
use crate::spectrum::CosineBasis;
use crate::tree::{NodeRecordKind, TreeRecord};

/// One posterior draw of the forest with its leaf spectra evaluated.
pub struct ForestPredictor<'a> {
    trees: &'a [TreeRecord],
    leaf_spectra: Vec<Vec<Option<Vec<f64>>>>,
    n_freqs: usize,
}

impl<'a> ForestPredictor<'a> {
    pub fn new(trees: &'a [TreeRecord], basis: &CosineBasis) -> Self {
        let leaf_spectra = trees
            .iter()
            .map(|t| {
                t.nodes
                    .iter()
                    .map(|n| match n.as_ref().map(|n| &n.kind) {
                        Some(NodeRecordKind::Leaf { params }) => Some(basis.log_spectrum(params.alpha, &params.beta)),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        Self {
            trees,
            leaf_spectra,
            n_freqs: basis.n_freqs(),
        }
    }

    /// Sum over trees of the log spectrum of the leaf reached by `omega`.
    pub fn predict(&self, omega: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_freqs];
        self.predict_into(omega, &mut out);
        out
    }

    pub fn predict_into(&self, omega: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (tree, spectra) in self.trees.iter().zip(&self.leaf_spectra) {
            let leaf = spectra[tree.assign(omega)].as_ref().expect("leaf spectrum");
            for (o, s) in out.iter_mut().zip(leaf) {
                *o += s;
            }
        }
    }
}

/// Log spectrum of `omega` under one forest draw.
pub fn predict_log_spectrum(omega: &[f64], forest: &[TreeRecord], basis: &CosineBasis) -> Vec<f64> {
    ForestPredictor::new(forest, basis).predict(omega)
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty data");
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and central 95% interval of a sample.
pub fn summarize(sample: &mut [f64]) -> (f64, f64, f64) {
    let mean = sample.iter().sum::<f64>() / sample.len() as f64;
    sample.sort_unstable_by(f64::total_cmp);
    (mean, quantile_sorted(sample, 0.025), quantile_sorted(sample, 0.975))
}

/// Equal-count partition of one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AleGrid {
    pub covariate: usize,
    /// `z_0 < ... < z_H`.
    pub points: Vec<f64>,
    /// `n(h)` for `h = 1..H`.
    pub counts: Vec<usize>,
    /// Interval index `h(x) - 1` of every observation.
    pub membership: Vec<usize>,
}

impl AleGrid {
    /// Partition points are the `h/H` empirical quantiles (midpoint of the two
    /// bracketing order statistics); tied points are merged.
    pub fn new(covariate: usize, values: &[f64], h: usize) -> Result<Self> {
        if h == 0 || values.is_empty() {
            return Err(Error::Dimension("ALE needs H >= 1 and at least one observation".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        let n = sorted.len();
        let mut points: Vec<f64> = (0..=h)
            .map(|i| {
                let q = (n - 1) as f64 * i as f64 / h as f64;
                0.5 * (sorted[q.floor() as usize] + sorted[q.ceil() as usize])
            })
            .collect();
        points.dedup();
        if points.len() < 2 {
            return Err(Error::Dimension(format!("covariate {covariate} has a single distinct value")));
        }
        let membership: Vec<usize> = values.iter().map(|&x| interval_of(&points, x)).collect();
        let mut counts = vec![0; points.len() - 1];
        for &m in &membership {
            counts[m] += 1;
        }
        Ok(Self {
            covariate,
            points,
            counts,
            membership,
        })
    }

    pub fn n_intervals(&self) -> usize {
        self.points.len() - 1
    }
}

/// `[z_0, z_1]` is interval 0, `(z_{h-1}, z_h]` is interval `h - 1`.
fn interval_of(points: &[f64], x: f64) -> usize {
    let h = points.len() - 1;
    (1..=h).find(|&i| x <= points[i]).unwrap_or(h) - 1
}

/// Centered ALE values at `z_1..z_H` for a vector-valued prediction
/// function `f(observation, z)` evaluated with the covariate set to `z`.
pub fn ale_values(grid: &AleGrid, f: impl Fn(usize, f64) -> Vec<f64>) -> Vec<Vec<f64>> {
    let h = grid.n_intervals();
    let mut diffs: Vec<Vec<f64>> = Vec::with_capacity(h);
    for (i, &m) in grid.membership.iter().enumerate() {
        let hi = f(i, grid.points[m + 1]);
        let lo = f(i, grid.points[m]);
        if diffs.is_empty() {
            diffs = vec![vec![0.0; hi.len()]; h];
        }
        for ((d, a), b) in diffs[m].iter_mut().zip(&hi).zip(&lo) {
            *d += a - b;
        }
    }
    let dim = diffs[0].len();
    let mut acc = vec![0.0; dim];
    let mut uncentered = Vec::with_capacity(h);
    for (m, d) in diffs.iter().enumerate() {
        if grid.counts[m] > 0 {
            for (a, v) in acc.iter_mut().zip(d) {
                *a += v / grid.counts[m] as f64;
            }
        }
        uncentered.push(acc.clone());
    }
    let n: usize = grid.counts.iter().sum();
    let mut center = vec![0.0; dim];
    for (g, &c) in uncentered.iter().zip(&grid.counts) {
        for (s, v) in center.iter_mut().zip(g) {
            *s += c as f64 * v / n as f64;
        }
    }
    uncentered
        .into_iter()
        .map(|g| g.iter().zip(&center).map(|(v, c)| v - c).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AleScale {
    /// ALE of the power spectrum `exp(log f)`.
    #[default]
    Spectrum,
    LogSpectrum,
}

/// Low (`0.05 < nu <= 0.25`) and high (`0.25 < nu < 0.5`) band indices.
pub fn band_indices(freqs: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    let lf: Vec<usize> = (0..freqs.len()).filter(|&k| freqs[k] > 0.05 && freqs[k] <= 0.25).collect();
    let hf: Vec<usize> = (0..freqs.len()).filter(|&k| freqs[k] > 0.25 && freqs[k] < 0.5).collect();
    if lf.is_empty() {
        return Err(Error::EmptyBand("LF"));
    }
    if hf.is_empty() {
        return Err(Error::EmptyBand("HF"));
    }
    Ok((lf, hf))
}

/// `sum_LF f / sum_HF f` from a log spectrum.
pub fn lf_hf_ratio(log_f: &[f64], lf: &[usize], hf: &[usize]) -> f64 {
    let low: f64 = lf.iter().map(|&k| log_f[k].exp()).sum();
    let high: f64 = hf.iter().map(|&k| log_f[k].exp()).sum();
    low / high
}

/// Pointwise posterior summary of an ALE curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AleCurve {
    pub grid: AleGrid,
    /// Column labels: frequencies, or the functional name.
    pub labels: Vec<String>,
    /// `[draw][h][column]`, `h` indexing `z_1..z_H`.
    pub draws: Vec<Vec<Vec<f64>>>,
    pub mean: Vec<Vec<f64>>,
    pub lo95: Vec<Vec<f64>>,
    pub hi95: Vec<Vec<f64>>,
}

impl AleCurve {
    fn from_draws(grid: AleGrid, labels: Vec<String>, draws: Vec<Vec<Vec<f64>>>) -> Self {
        let h = grid.n_intervals();
        let cols = labels.len();
        let mut mean = vec![vec![0.0; cols]; h];
        let mut lo95 = mean.clone();
        let mut hi95 = mean.clone();
        let mut sample = vec![0.0; draws.len()];
        for i in 0..h {
            for c in 0..cols {
                for (s, d) in sample.iter_mut().zip(&draws) {
                    *s = d[i][c];
                }
                let (m, lo, hi) = summarize(&mut sample);
                mean[i][c] = m;
                lo95[i][c] = lo;
                hi95[i][c] = hi;
            }
        }
        Self {
            grid,
            labels,
            draws,
            mean,
            lo95,
            hi95,
        }
    }
}

fn check_ale_request(draws: &PosteriorDraws, covariate: usize) -> Result<()> {
    if draws.n_draws() == 0 {
        return Err(Error::Dimension("no posterior draws".into()));
    }
    let spec = draws
        .schema
        .covariates
        .get(covariate)
        .ok_or_else(|| Error::Dimension(format!("covariate index {covariate} out of range")))?;
    if !spec.kind.is_ordered() {
        return Err(Error::CategoricalAle(spec.name.clone()));
    }
    Ok(())
}

fn ale_per_draw(
    draws: &PosteriorDraws,
    grid: &AleGrid,
    functional: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let basis = draws.basis()?;
    let j = grid.covariate;
    let mut out = Vec::with_capacity(draws.n_draws());
    for forest in &draws.forests {
        let predictor = ForestPredictor::new(forest, &basis);
        out.push(ale_values(grid, |i, z| {
            let mut omega = draws.covariates[i].clone();
            omega[j] = z;
            functional(&predictor.predict(&omega))
        }));
    }
    Ok(out)
}

/// Per-frequency ALE of covariate `j` over `h` equal-count intervals.
pub fn ale_spectrum(draws: &PosteriorDraws, j: usize, h: usize, scale: AleScale) -> Result<AleCurve> {
    check_ale_request(draws, j)?;
    let values: Vec<f64> = draws.covariates.iter().map(|r| r[j]).collect();
    let grid = AleGrid::new(j, &values, h)?;
    let per_draw = ale_per_draw(draws, &grid, |log_f| match scale {
        AleScale::Spectrum => log_f.iter().map(|v| v.exp()).collect(),
        AleScale::LogSpectrum => log_f.to_vec(),
    })?;
    let labels = draws.freqs.iter().map(|f| format!("{f}")).collect();
    Ok(AleCurve::from_draws(grid, labels, per_draw))
}

/// ALE of covariate `j` on the LF/HF ratio.
pub fn ale_lf_hf(draws: &PosteriorDraws, j: usize, h: usize) -> Result<AleCurve> {
    check_ale_request(draws, j)?;
    let (lf, hf) = band_indices(&draws.freqs)?;
    let values: Vec<f64> = draws.covariates.iter().map(|r| r[j]).collect();
    let grid = AleGrid::new(j, &values, h)?;
    let per_draw = ale_per_draw(draws, &grid, |log_f| vec![lf_hf_ratio(log_f, &lf, &hf)])?;
    Ok(AleCurve::from_draws(grid, vec!["lfhf".to_string()], per_draw))
}

/// Fraction of draws whose forest splits on each covariate at least once.
pub fn inclusion_probabilities(draws: &PosteriorDraws) -> Result<Vec<f64>> {
    if draws.n_draws() == 0 {
        return Err(Error::Dimension("no posterior draws".into()));
    }
    let p = draws.schema.covariates.len();
    let mut hits = vec![0usize; p];
    for forest in &draws.forests {
        let mut used = vec![false; p];
        for tree in forest {
            for c in tree.split_covariates() {
                used[c] = true;
            }
        }
        for (h, u) in hits.iter_mut().zip(used) {
            *h += usize::from(u);
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / draws.n_draws() as f64).collect())
}

/// Where to evaluate the posterior spectrum.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Covariates(Vec<f64>),
    Subject(usize),
}

/// Posterior mean and 95% band of a log spectrum, per frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub mean: Vec<f64>,
    pub lo95: Vec<f64>,
    pub hi95: Vec<f64>,
}

pub fn posterior_summary(draws: &PosteriorDraws, targets: &[Target]) -> Result<Vec<SpectrumSummary>> {
    if draws.n_draws() == 0 {
        return Err(Error::Dimension("no posterior draws".into()));
    }
    let basis = draws.basis()?;
    let p = draws.schema.covariates.len();
    let omegas: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| match t {
            Target::Covariates(w) if w.len() == p => Ok(w.clone()),
            Target::Covariates(w) => Err(Error::Dimension(format!("target has {} covariates, expected {p}", w.len()))),
            Target::Subject(l) => draws
                .covariates
                .get(*l)
                .cloned()
                .ok_or_else(|| Error::Dimension(format!("subject index {l} out of range"))),
        })
        .collect::<Result<_>>()?;
    // [target][freq][draw]
    let n = basis.n_freqs();
    let mut samples = vec![vec![Vec::with_capacity(draws.n_draws()); n]; omegas.len()];
    for forest in &draws.forests {
        let predictor = ForestPredictor::new(forest, &basis);
        for (t, omega) in omegas.iter().enumerate() {
            for (k, v) in predictor.predict(omega).into_iter().enumerate() {
                samples[t][k].push(v);
            }
        }
    }
    Ok(samples
        .into_iter()
        .map(|per_freq| {
            let mut s = SpectrumSummary {
                mean: Vec::with_capacity(n),
                lo95: Vec::with_capacity(n),
                hi95: Vec::with_capacity(n),
            };
            for mut sample in per_freq {
                let (m, lo, hi) = summarize(&mut sample);
                s.mean.push(m);
                s.lo95.push(lo);
                s.hi95.push(hi);
            }
            s
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!((quantile_sorted(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile_sorted(&v, 0.25) - 1.75).abs() < 1e-15);
        assert_eq!(quantile_sorted(&[7.0], 0.975), 7.0);
    }

    #[test]
    fn grid_equal_counts() {
        let values: Vec<f64> = (0..10).map(f64::from).collect();
        let g = AleGrid::new(0, &values, 5).unwrap();
        assert_eq!(g.points.len(), 6);
        assert_eq!(g.points[0], 0.0);
        assert_eq!(g.points[5], 9.0);
        assert_eq!(g.counts.iter().sum::<usize>(), 10);
        let (lo, hi) = (g.counts.iter().min().unwrap(), g.counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{:?}", g.counts);
    }

    #[test]
    fn tied_points_merge() {
        let values = [1.0, 1.0, 1.0, 1.0, 2.0];
        let g = AleGrid::new(0, &values, 4).unwrap();
        assert_eq!(g.points, vec![1.0, 2.0]);
        assert_eq!(g.counts, vec![5]);
        assert!(AleGrid::new(0, &[3.0, 3.0], 2).is_err());
    }

    #[test]
    fn single_interval_is_zero() {
        let values = [0.1, 0.5, 0.9];
        let g = AleGrid::new(0, &values, 1).unwrap();
        let ale = ale_values(&g, |_, z| vec![3.0 * z]);
        assert_eq!(ale.len(), 1);
        assert!(ale[0][0].abs() < 1e-15);
    }

    #[test]
    fn band_indices_t256() {
        let freqs = crate::panel::fourier_frequencies(256);
        let (lf, hf) = band_indices(&freqs).unwrap();
        // index k - 1 holds nu = k / 256
        assert_eq!(lf.first().map(|i| i + 1), Some(13));
        assert_eq!(lf.last().map(|i| i + 1), Some(64));
        assert_eq!(hf.first().map(|i| i + 1), Some(65));
        assert_eq!(hf.last().map(|i| i + 1), Some(127));
        assert!(matches!(band_indices(&[0.1, 0.2]), Err(Error::EmptyBand("HF"))));
        assert!(matches!(band_indices(&[0.03, 0.3]), Err(Error::EmptyBand("LF"))));
    }

    #[test]
    fn flat_spectrum_ratio_is_count_ratio() {
        let freqs = crate::panel::fourier_frequencies(256);
        let (lf, hf) = band_indices(&freqs).unwrap();
        let flat = vec![0.3; freqs.len()];
        let r = lf_hf_ratio(&flat, &lf, &hf);
        assert!((r - lf.len() as f64 / hf.len() as f64).abs() < 1e-12);
        let scaled: Vec<f64> = flat.iter().map(|v| v + 2.0).collect();
        assert!((lf_hf_ratio(&scaled, &lf, &hf) - r).abs() < 1e-12);
    }
}
