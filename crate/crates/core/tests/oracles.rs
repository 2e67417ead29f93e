//! Library routines checked against independent direct computations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spectree::analysis::{ale_values, quantile_sorted, AleGrid};
use spectree::panel::{demean, full_grid_periodogram, periodogram, CovariateSpec, PanelSchema, TimeSeriesPanel};
use spectree::simgen::{true_ar_spectrum, ArProcess};
use spectree::spectrum::{
    find_mode, neg_log_posterior, neg_log_posterior_value, whittle_loglik, CosineBasis, NodeData,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normals(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn one_series_panel(x: Vec<f64>) -> TimeSeriesPanel {
    TimeSeriesPanel::new(
        vec!["a".into()],
        vec![x],
        vec![vec![0.0]],
        PanelSchema {
            covariates: vec![CovariateSpec::continuous("w")],
        },
    )
    .unwrap()
}

fn direct_dft_power(x: &[f64], k: usize) -> f64 {
    let t = x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (j, &v) in x.iter().enumerate() {
        let ang = 2.0 * PI * k as f64 * j as f64 / t;
        re += v * ang.cos();
        im -= v * ang.sin();
    }
    (re * re + im * im) / t
}

#[test]
fn fft_periodogram_matches_direct_sum() {
    let mut r = rng(1);
    for t in [16, 64, 100, 127, 256, 512] {
        let x = normals(&mut r, t);
        let p = periodogram(&one_series_panel(x.clone())).unwrap();
        let scale = x.iter().map(|v| v * v).sum::<f64>() / t as f64;
        for k in 1..=p.n_freqs() {
            let want = direct_dft_power(&x, k);
            let got = p.values.get(0, k - 1);
            assert!((got - want).abs() <= 1e-10 * want.max(scale), "T={t} k={k}: {got} vs {want}");
        }
    }
}

#[test]
fn cosine_at_fourier_frequency() {
    let t = 64;
    let x: Vec<f64> = (0..t).map(|j| (2.0 * PI * j as f64 * 8.0 / t as f64).cos()).collect();
    let p = periodogram(&one_series_panel(x)).unwrap();
    for k in 1..=p.n_freqs() {
        let v = p.values.get(0, k - 1);
        if k == 8 {
            assert!((v - 16.0).abs() < 1e-10);
        } else {
            assert!(v.abs() < 1e-10, "k={k}: {v}");
        }
    }
}

#[test]
fn parseval_on_full_grid() {
    let mut r = rng(2);
    for t in [7, 50, 128, 333] {
        let x = normals(&mut r, t);
        let total: f64 = full_grid_periodogram(&x).iter().sum();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        assert!((total - energy).abs() <= 1e-8 * energy);
    }
}

#[test]
fn demeaned_constant_has_zero_periodogram() {
    let panel = demean(&one_series_panel(vec![3.25; 40]));
    let p = periodogram(&panel).unwrap();
    assert!(p.values.as_slice().iter().all(|&v| v.abs() < 1e-20));
}

#[test]
fn basis_matches_scalar_formula() {
    let mut r = rng(3);
    let freqs: Vec<f64> = (1..=49).map(|k| k as f64 / 100.0).collect();
    let basis = CosineBasis::new(&freqs, 7, 100.0).unwrap();
    let alpha: f64 = r.sample(StandardNormal);
    let beta = normals(&mut r, 7);
    let got = basis.log_spectrum(alpha, &beta);
    for (k, &nu) in freqs.iter().enumerate() {
        let mut want = alpha;
        for (s, b) in beta.iter().enumerate() {
            want += b * (2.0 * PI * (s + 1) as f64 * nu).cos();
        }
        assert!((got[k] - want).abs() < 1e-12);
    }
    for s in 1..=7 {
        let d = (2.0f64.sqrt() * PI * s as f64).powi(-2);
        assert!((basis.penalty()[s - 1] - d).abs() < 1e-15);
    }
}

#[test]
fn whittle_matches_scalar_loop() {
    let mut r = rng(4);
    for (nb, n) in [(1, 2), (3, 10), (8, 63)] {
        let rows: Vec<Vec<f64>> = (0..nb).map(|_| normals(&mut r, n)).collect();
        let log_f = normals(&mut r, n);
        let block: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();
        let got = whittle_loglik(&block, &log_f).unwrap();
        let mut want = -(n as f64 / 2.0) * nb as f64 * (2.0 * PI).ln();
        for row in &rows {
            for k in 0..n {
                want -= log_f[k] + (row[k] - log_f[k]).exp();
            }
        }
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        let stats = NodeData::from_block(&block, n);
        assert!((stats.whittle_loglik(&log_f) - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
    let one = whittle_loglik(&[&[0.0, 0.0][..]], &[0.0, 0.0]).unwrap();
    assert!((one - (-(2.0 * PI).ln() - 2.0)).abs() < 1e-12);
}

fn toy_node(seed: u64, nb: usize, n: usize) -> (NodeData, CosineBasis) {
    let mut r = rng(seed);
    let freqs: Vec<f64> = (1..=n).map(|k| k as f64 / (2 * n + 2) as f64).collect();
    let basis = CosineBasis::new(&freqs, 7, 100.0).unwrap();
    let rows: Vec<Vec<f64>> = (0..nb)
        .map(|_| {
            freqs
                .iter()
                .map(|nu| {
                    let e: f64 = -(1.0 - r.random::<f64>()).ln();
                    (1.0 + (2.0 * PI * nu).cos()).ln() + e.ln()
                })
                .collect()
        })
        .collect();
    let block: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();
    (NodeData::from_block(&block, n), basis)
}

#[test]
fn gradient_and_hessian_match_finite_differences() {
    let (data, basis) = toy_node(5, 6, 40);
    let mut r = rng(6);
    let h = 1e-5;
    for _ in 0..20 {
        let theta: Vec<f64> = normals(&mut r, 8).iter().map(|v| 0.5 * v).collect();
        let tau2 = 0.1 + r.random::<f64>() * 5.0;
        let obj = neg_log_posterior(&theta, &data, tau2, &basis);
        for i in 0..8 {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (neg_log_posterior_value(&up, &data, tau2, &basis)
                - neg_log_posterior_value(&dn, &data, tau2, &basis))
                / (2.0 * h);
            let g = obj.gradient[i];
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0), "grad {i}: {g} vs {fd}");
            let gu = neg_log_posterior(&up, &data, tau2, &basis).gradient;
            let gd = neg_log_posterior(&dn, &data, tau2, &basis).gradient;
            for j in 0..8 {
                let fd = (gu[j] - gd[j]) / (2.0 * h);
                let hv = obj.hessian[(i, j)];
                assert!((fd - hv).abs() <= 1e-5 * hv.abs().max(1.0), "hess {i},{j}: {hv} vs {fd}");
            }
        }
    }
}

#[test]
fn objective_at_zero_residuals() {
    let rows = vec![vec![0.0; 20]; 3];
    let block: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();
    let data = NodeData::from_block(&block, 20);
    let freqs: Vec<f64> = (1..=20).map(|k| k as f64 / 42.0).collect();
    let basis = CosineBasis::new(&freqs, 7, 100.0).unwrap();
    let v = neg_log_posterior_value(&[0.0; 8], &data, 1.0, &basis);
    assert!((v - 60.0).abs() < 1e-12);
}

/// Cyclic golden-section search, independent of derivatives.
fn coordinate_search(f: impl Fn(&[f64]) -> f64, mut x: Vec<f64>) -> Vec<f64> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        for i in 0..x.len() {
            let (mut a, mut b) = (x[i] - 4.0, x[i] + 4.0);
            let eval = |v: f64, x: &mut Vec<f64>| {
                let old = x[i];
                x[i] = v;
                let out = f(x);
                x[i] = old;
                out
            };
            for _ in 0..100 {
                let c = b - g * (b - a);
                let d = a + g * (b - a);
                if eval(c, &mut x) < eval(d, &mut x) {
                    b = d;
                } else {
                    a = c;
                }
            }
            x[i] = 0.5 * (a + b);
        }
    }
    x
}

#[test]
fn mode_matches_coordinate_search_with_one_basis_function() {
    let mut r = rng(7);
    let n = 30;
    let freqs: Vec<f64> = (1..=n).map(|k| k as f64 / 62.0).collect();
    let basis = CosineBasis::new(&freqs, 1, 100.0).unwrap();
    let rows: Vec<Vec<f64>> = (0..4)
        .map(|_| freqs.iter().map(|nu| 0.3 + 0.8 * (2.0 * PI * nu).cos() + 0.5 * r.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let block: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();
    let data = NodeData::from_block(&block, n);
    let tau2 = 2.0;
    let mode = find_mode(&data, tau2, &basis, &[0.0, 0.0]).unwrap();
    let oracle = coordinate_search(|x| neg_log_posterior_value(x, &data, tau2, &basis), vec![0.0, 0.0]);
    for i in 0..2 {
        assert!((mode.mean[i] - oracle[i]).abs() < 1e-4, "{} vs {}", mode.mean[i], oracle[i]);
    }
    let g = neg_log_posterior(mode.mean.as_slice(), &data, tau2, &basis).gradient;
    assert!(g.amax() < 1e-8);
}

#[test]
fn mode_is_independent_of_start() {
    let (data, basis) = toy_node(8, 5, 50);
    let a = find_mode(&data, 1.5, &basis, &[0.0; 8]).unwrap();
    let b = find_mode(&data, 1.5, &basis, &[3.0, -2.0, 1.0, 1.0, -1.0, 0.5, 0.5, -0.5]).unwrap();
    for i in 0..8 {
        assert!((a.mean[i] - b.mean[i]).abs() < 1e-6);
    }
}

#[test]
fn ar1_spectrum_integrates_to_variance() {
    let (phi, s2) = (0.6, 1.3);
    let m = 200_000;
    let grid: Vec<f64> = (0..m).map(|i| -0.5 + (i as f64 + 0.5) / m as f64).collect();
    let f = true_ar_spectrum(&[phi], s2, &grid).unwrap();
    let integral: f64 = f.iter().sum::<f64>() / m as f64;
    assert!((integral - s2 / (1.0 - phi * phi)).abs() < 1e-6);
    let at0 = true_ar_spectrum(&[0.5], 1.0, &[0.0]).unwrap()[0];
    assert!((at0 - 4.0).abs() < 1e-12);
}

#[test]
fn ar1_lag_one_autocovariance() {
    let (phi, s2) = (0.7, 1.0);
    let ar = ArProcess::new(vec![phi], s2).unwrap();
    let t = 100_000;
    let x = ar.simulate(t, &mut rng(9));
    let mean = x.iter().sum::<f64>() / t as f64;
    let c1: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / t as f64;
    let gamma0 = s2 / (1.0 - phi * phi);
    let want = phi * gamma0;
    // Bartlett: T var(c1) = sum_j gamma_j^2 + gamma_{j+1} gamma_{j-1}
    let g = |j: i64| gamma0 * phi.powi(j.unsigned_abs() as i32);
    let bartlett: f64 = (-200..=200).map(|j| g(j) * g(j) + g(j + 1) * g(j - 1)).sum();
    let se = (bartlett / t as f64).sqrt();
    assert!((c1 - want).abs() < 3.0 * se, "{c1} vs {want} (se {se})");
    let acv = ar.autocovariances();
    assert!((acv[1] - want).abs() < 1e-12);
}

#[test]
fn ale_four_points_two_intervals() {
    // x = (0.1, 0.4, 0.6, 0.9): z = (0.1, 0.5, 0.9), two points per interval.
    let xs = [0.1, 0.4, 0.6, 0.9];
    let others = [1.0, -2.0, 0.5, 3.0];
    let grid = AleGrid::new(0, &xs, 2).unwrap();
    assert_eq!(grid.points, vec![0.1, 0.5, 0.9]);
    assert_eq!(grid.counts, vec![2, 2]);

    let linear = ale_values(&grid, |_, z| vec![z]);
    // uncentered (0.4, 0.8); center = (2*0.4 + 2*0.8)/4 = 0.6
    assert!((linear[0][0] - (-0.2)).abs() < 1e-12);
    assert!((linear[1][0] - 0.2).abs() < 1e-12);
    assert!((linear[1][0] - linear[0][0] - (0.9 - 0.5)).abs() < 1e-12);

    let quad = ale_values(&grid, |i, z| vec![z * z + others[i]]);
    // per-interval differences 0.24 and 0.56; uncentered (0.24, 0.80); center 0.52
    assert!((quad[0][0] - (-0.28)).abs() < 1e-12);
    assert!((quad[1][0] - 0.28).abs() < 1e-12);
}

#[test]
fn ale_recovers_additive_component() {
    let mut r = rng(10);
    let n = 300;
    let rows: Vec<[f64; 2]> = (0..n).map(|_| [r.random::<f64>(), r.random::<f64>()]).collect();
    let g = |x: f64| (3.0 * x).sin() + x * x;
    let xs: Vec<f64> = rows.iter().map(|w| w[0]).collect();
    let grid = AleGrid::new(0, &xs, 8).unwrap();
    let ale = ale_values(&grid, |i, z| vec![g(z) + 5.0 * rows[i][1].powi(3)]);
    let offset = ale[0][0] - g(grid.points[1]);
    for (h, v) in ale.iter().enumerate() {
        assert!((v[0] - g(grid.points[h + 1]) - offset).abs() < 1e-12);
    }
    // centering: observation-weighted mean of the step function is zero
    let centered_mean: f64 = grid.membership.iter().map(|&m| ale[m][0]).sum::<f64>() / n as f64;
    assert!(centered_mean.abs() < 1e-12);
}

#[test]
fn quantiles_match_order_statistics() {
    let mut r = rng(11);
    let mut draws: Vec<f64> = normals(&mut r, 1000);
    draws.sort_by(f64::total_cmp);
    for p in [0.025, 0.1, 0.5, 0.9, 0.975] {
        let h = (draws.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let want = draws[lo] + (h - lo as f64) * (draws[(lo + 1).min(999)] - draws[lo]);
        assert!((quantile_sorted(&draws, p) - want).abs() < 1e-15);
    }
}
