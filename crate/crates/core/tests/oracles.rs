//! Library results checked against independent reference computations.

#![allow(clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spotvol::metrics::{relative_error_norm, spectral_norm};
use spotvol::preavg::{build_panel, cv_bandwidth_preaverage};
use spotvol::shrink::precision_matrix;
use spotvol::sim::{self, Sampling, SimConfig};
use spotvol::spotpca::{cv_bandwidth_spot, realized_spot_matrix};
use spotvol::{kernel_filter, linalg, BandwidthMode, FilteredPanel, Kernel, KernelSpec, TickSeries};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_symmetric(p: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| r.sample::<f64, _>(StandardNormal));
    (&a + a.transpose()) * 0.5
}

fn random_pd(p: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| r.sample::<f64, _>(StandardNormal));
    &a * a.transpose() / p as f64 + DMatrix::identity(p, p) * 0.5
}

/// Cyclic Jacobi rotations; returns eigenvalues and eigenvectors (columns).
fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[(i, i)]).collect(), v)
}

/// det(A - x I) by Gaussian elimination with partial pivoting.
fn char_poly(a: &DMatrix<f64>, x: f64) -> f64 {
    let n = a.nrows();
    let mut m = a - DMatrix::identity(n, n) * x;
    let mut det = 1.0;
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| m[(i, c)].abs().total_cmp(&m[(j, c)].abs()))
            .unwrap();
        if m[(piv, c)] == 0.0 {
            return 0.0;
        }
        if piv != c {
            m.swap_rows(piv, c);
            det = -det;
        }
        det *= m[(c, c)];
        for r in c + 1..n {
            let f = m[(r, c)] / m[(c, c)];
            for k in c..n {
                m[(r, k)] -= f * m[(c, k)];
            }
        }
    }
    det
}

fn char_poly_roots(a: &DMatrix<f64>, lo: f64, hi: f64) -> Vec<f64> {
    let steps = 20_000;
    let h = (hi - lo) / steps as f64;
    let mut roots = Vec::new();
    let mut prev = char_poly(a, lo);
    for s in 1..=steps {
        let x = lo + s as f64 * h;
        let cur = char_poly(a, x);
        if prev.signum() != cur.signum() {
            let (mut l, mut r, mut fl) = (x - h, x, prev);
            for _ in 0..200 {
                let mid = 0.5 * (l + r);
                let fm = char_poly(a, mid);
                if fm.signum() == fl.signum() {
                    l = mid;
                    fl = fm;
                } else {
                    r = mid;
                }
            }
            roots.push(0.5 * (l + r));
        }
        prev = cur;
    }
    roots
}

#[test]
fn banded_correlation_spectrum_matches_char_poly() {
    let (p, rho, band) = (10, 0.5f64, 3);
    let raw = DMatrix::from_fn(p, p, |i: usize, j: usize| {
        let d = i.abs_diff(j);
        if d <= band {
            rho.powi(d as i32)
        } else {
            0.0
        }
    });
    let eig = linalg::sym_eigen(&raw).unwrap();
    let mut roots = char_poly_roots(&raw, -1.0, 4.0);
    roots.sort_by(|a, b| b.total_cmp(a));
    assert_eq!(roots.len(), p);
    for (r, e) in roots.iter().zip(eig.values.iter()) {
        assert!((r - e).abs() < 1e-9, "{r} vs {e}");
    }
    let repaired = sim::build_banded_correlation(p, rho, band);
    assert!(linalg::min_eigenvalue(&repaired).unwrap() >= 1e-8);
    for i in 0..p {
        assert_eq!(repaired[(i, i)], 1.0);
    }
}

#[test]
fn terminal_variance_matches_ito_isometry() {
    // constant coefficients: Var X_T = T (sum_l a_l + theta)
    let draws = 10_000;
    let mut cfg = SimConfig::new(1, 0);
    cfg.k = 1;
    cfg.delta = 1.0 / 234.0;
    cfg.freeze_coefficients = true;
    let coef = sim::DgpCoefficients::standard(1, 1);
    let expected = cfg.horizon * (coef.a[(0, 0)] + coef.theta[0]);
    let finals: Vec<f64> = (0..draws)
        .map(|s| {
            cfg.seed = s as u64;
            let gt = sim::simulate_ground_truth(&cfg).unwrap();
            gt.x[(0, gt.steps())]
        })
        .collect();
    let mean = finals.iter().sum::<f64>() / draws as f64;
    let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let se = expected * (2.0 / (draws - 1) as f64).sqrt();
    assert!(
        (var - expected).abs() < 3.0 * se,
        "var {var}, expected {expected} +- {se}"
    );
}

#[test]
fn poisson_clock_mean_count() {
    let mut cfg = SimConfig::new(3, 11);
    cfg.sampling = Sampling::PoissonClock {
        lambda_low: 2.0,
        lambda_high: 2.0,
        base_unit: 10.0 / 23_400.0,
    };
    let gt = sim::simulate_ground_truth(&cfg).unwrap();
    let ticks = sim::contaminate_and_sample(&gt, &cfg).unwrap();
    let band = 3.0 * 1170f64.sqrt();
    for t in &ticks {
        assert!((t.len() as f64 - 1170.0).abs() < band, "{} ticks", t.len());
        assert!(t.times.windows(2).all(|w| w[1] > w[0]));
    }
}

#[test]
fn noise_is_independent_across_assets() {
    let mut cfg = SimConfig::new(6, 5);
    cfg.sigma_eps = 0.1;
    let gt = sim::simulate_ground_truth(&cfg).unwrap();
    let ticks = sim::contaminate_and_sample(&gt, &cfg).unwrap();
    let eps: Vec<Vec<f64>> = ticks
        .iter()
        .map(|t| {
            t.prices
                .iter()
                .enumerate()
                .map(|(j, y)| y - gt.x[(t.asset_id, j)])
                .collect()
        })
        .collect();
    let n = eps[0].len() as f64;
    let corr = |a: &[f64], b: &[f64]| {
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    };
    for i in 0..eps.len() {
        for j in i + 1..eps.len() {
            let c = corr(&eps[i], &eps[j]);
            assert!(c.abs() < 4.0 / n.sqrt(), "assets {i},{j}: {c}");
        }
    }
}

#[test]
fn linear_price_filter_by_direct_summation() {
    let n = 1000;
    let dt = 1.0 / n as f64;
    let times: Vec<f64> = (1..=n).map(|j| j as f64 * dt).collect();
    let ticks = TickSeries::new(0, times.clone(), times.clone()).unwrap();
    let b = 0.05;
    let grid = [0.3, 0.5, 0.71];
    let spec = KernelSpec::new(Kernel::Epanechnikov);
    let out = kernel_filter(&ticks, &spec, b, &grid).unwrap();
    for (g, &t) in grid.iter().enumerate() {
        let mut direct = 0.0;
        let mut prev = 0.0;
        for &tj in &times {
            let u = (tj - t) / b;
            let l = if u.abs() <= 1.0 { 0.75 * (1.0 - u * u) / b } else { 0.0 };
            direct += (tj - prev) * l * tj;
            prev = tj;
        }
        assert!((out.values[g] - direct).abs() < 1e-12, "{} vs {direct}", out.values[g]);
        assert!((out.values[g] - t).abs() < 2.0 * dt, "{} vs {t}", out.values[g]);
    }
}

#[test]
fn preaverage_cv_prefers_small_b_without_noise_and_large_b_with_noise() {
    let n = 2340;
    let times: Vec<f64> = (1..=n).map(|j| j as f64 / n as f64).collect();
    let spec = KernelSpec::new(Kernel::Epanechnikov);
    let candidates = [0.004, 0.1];

    let smooth: Vec<f64> = times
        .iter()
        .map(|t| (2.0 * std::f64::consts::PI * 3.0 * t).sin())
        .collect();
    let ticks = TickSeries::new(0, times.clone(), smooth).unwrap();
    assert_eq!(cv_bandwidth_preaverage(&ticks, &spec, &candidates).unwrap(), 0.004);

    let mut r = rng(3);
    let noisy: Vec<f64> = times.iter().map(|_| 1.0 + r.sample::<f64, _>(StandardNormal)).collect();
    let ticks = TickSeries::new(0, times, noisy).unwrap();
    assert_eq!(cv_bandwidth_preaverage(&ticks, &spec, &candidates).unwrap(), 0.1);
}

#[test]
fn filter_error_shrinks_with_bandwidth_on_noiseless_ticks() {
    let mut cfg = SimConfig::new(4, 8);
    cfg.sigma_eps = 0.0;
    let gt = sim::simulate_ground_truth(&cfg).unwrap();
    let ticks = sim::contaminate_and_sample(&gt, &cfg).unwrap();
    let spec = KernelSpec::new(Kernel::Uniform);
    let mut last = f64::INFINITY;
    for b in [0.05, 0.02, 0.01] {
        let panel = build_panel(&ticks, &spec, cfg.delta, 1.0, &BandwidthMode::Fixed { b }).unwrap();
        let mut err: f64 = 0.0;
        for (j, &t) in panel.grid.iter().enumerate() {
            if !(0.1..=0.9).contains(&t) {
                continue;
            }
            for i in 0..4 {
                err = err.max((panel.values[(i, j)] - gt.x[(i, gt.grid_index(t))]).abs());
            }
        }
        assert!(err < last, "b = {b}: {err} vs {last}");
        last = err;
    }
}

#[test]
fn panel_is_equivariant_to_asset_order() {
    let cfg = SimConfig::new(5, 21);
    let gt = sim::simulate_ground_truth(&cfg).unwrap();
    let ticks = sim::contaminate_and_sample(&gt, &cfg).unwrap();
    let spec = KernelSpec::new(Kernel::Epanechnikov);
    let bw = BandwidthMode::CrossValidated { candidates: None };
    let a = build_panel(&ticks, &spec, 1.0 / 100.0, 1.0, &bw).unwrap();
    let order = [3, 0, 4, 2, 1];
    let shuffled: Vec<TickSeries> = order.iter().map(|&i| ticks[i].clone()).collect();
    let b = build_panel(&shuffled, &spec, 1.0 / 100.0, 1.0, &bw).unwrap();
    for (row, &i) in order.iter().enumerate() {
        assert_eq!(b.asset_ids[row], a.asset_ids[i]);
        assert_eq!(b.bandwidths[row], a.bandwidths[i]);
        assert_eq!(b.values.row(row), a.values.row(i));
    }
}

#[test]
fn spot_matrix_is_weighted_outer_product_sum() {
    // increments [1,0], [0,1], [1,1]
    let values = DMatrix::from_row_slice(2, 4, &[0.0, 1.0, 1.0, 2.0, 0.0, 0.0, 1.0, 2.0]);
    let delta0 = 0.25;
    let panel = FilteredPanel::from_values(values, delta0).unwrap();
    let (h, tau) = (0.6, 0.5);
    let raw = realized_spot_matrix(&panel, &KernelSpec::new(Kernel::Epanechnikov), h, tau).unwrap();
    let k = |t: f64| {
        let u: f64 = (t - tau) / h;
        if u.abs() <= 1.0 {
            0.75 * (1.0 - u * u) / h
        } else {
            0.0
        }
    };
    let (w1, w2, w3) = (k(0.25), k(0.5), k(0.75));
    let want = [[w1 + w3, w3], [w3, w2 + w3]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((raw.sigma_tilde_x[(i, j)] - want[i][j]).abs() < 1e-14);
        }
    }
}

fn brownian_panel(p: usize, n: usize, vol: impl Fn(f64) -> f64, seed: u64) -> FilteredPanel {
    let mut r = rng(seed);
    let dt = 1.0 / n as f64;
    let mut values = DMatrix::zeros(p, n + 1);
    for j in 1..=n {
        let s = vol((j as f64 - 0.5) * dt);
        for i in 0..p {
            values[(i, j)] = values[(i, j - 1)] + s * dt.sqrt() * r.sample::<f64, _>(StandardNormal);
        }
    }
    FilteredPanel::from_values(values, dt).unwrap()
}

#[test]
fn spot_cv_tracks_volatility_shape() {
    let candidates = [0.02, 0.04, 0.08, 0.16];
    let spec = KernelSpec::new(Kernel::Epanechnikov);
    let taus: Vec<f64> = (0..=60).map(|i| 0.2 + 0.6 * i as f64 / 60.0).collect();
    let (mut flat_h, mut steep_h) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        let flat = brownian_panel(20, 400, |_| 1.0, seed);
        let steep = brownian_panel(20, 400, |t| if t < 0.5 { 1.0 } else { 2.0 }, seed);
        flat_h.push(cv_bandwidth_spot(&flat, &spec, &candidates, &taus).unwrap());
        steep_h.push(cv_bandwidth_spot(&steep, &spec, &candidates, &taus).unwrap());
    }
    let largest = flat_h.iter().filter(|&&h| h == 0.16).count();
    assert!(largest > 5, "largest candidate chosen {largest}/10 times: {flat_h:?}");
    for (s, f) in steep_h.iter().zip(&flat_h) {
        assert!(s <= f, "steep {steep_h:?} vs flat {flat_h:?}");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&steep_h) < mean(&flat_h), "steep {steep_h:?} vs flat {flat_h:?}");
}

#[test]
fn spectral_norm_matches_power_iteration() {
    let mut r = rng(9);
    for _ in 0..5 {
        let a = random_symmetric(10, &mut r);
        // power iteration on A^2 gives the largest |eigenvalue|
        let a2 = &a * &a;
        let mut v = DVector::from_element(10, 1.0).normalize();
        for _ in 0..1000 {
            v = (&a2 * &v).normalize();
        }
        let oracle = (v.dot(&(&a2 * &v))).sqrt();
        let got = spectral_norm(&a);
        assert!((got - oracle).abs() < 1e-8 * oracle, "{got} vs {oracle}");
    }
}

#[test]
fn relative_error_matches_jacobi_square_root() {
    let mut r = rng(13);
    for _ in 0..5 {
        let sigma = random_pd(5, &mut r);
        let hat = random_pd(5, &mut r);
        let (vals, vecs) = jacobi_eigen(&sigma);
        let inv_sqrt = &vecs
            * DMatrix::from_diagonal(&DVector::from_iterator(5, vals.iter().map(|v| 1.0 / v.sqrt())))
            * vecs.transpose();
        let m = &inv_sqrt * &hat * &inv_sqrt - DMatrix::<f64>::identity(5, 5);
        let oracle = m.norm() / 5f64.sqrt();
        let got = relative_error_norm(&hat, &sigma).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }
}

#[test]
fn smw_matches_dense_inverse() {
    let mut r = rng(17);
    let (p, k) = (20, 3);
    let loadings = DMatrix::from_fn(p, k, |_, _| r.sample::<f64, _>(StandardNormal));
    let su = random_pd(p, &mut r);
    let smw = precision_matrix(&loadings, &su).unwrap();
    let dense = (&loadings * loadings.transpose() + &su).try_inverse().unwrap();
    let scale = dense.amax();
    assert!((&smw - &dense).amax() < 1e-8 * scale);
}
