use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sprs::{CsMat, TriMat};

use spatial_spde::eval::crps_gaussian;
use spatial_spde::fem::assemble_fem;
use spatial_spde::gmrf::{ConstrainedGmrf, ConstraintSet, FactoredPrecision};
use spatial_spde::lgm::{mixture_marginal, Moments, Observation, ObservationSet, Station};
use spatial_spde::mesh::{build_structured_mesh, Extent};
use spatial_spde::prior::{
    nominal_log_params, nominal_prior_quantile, solve_nonstationary_prior, solve_stationary_prior, CoherenceInputs,
    Nominal, QuantileTargets,
};
use spatial_spde::spde::assemble_precision;

/// Banded SPD matrix with a random lower band of width `band`.
fn banded_spd(n: usize, band: usize, vals: &[f64]) -> CsMat<f64> {
    let mut d = DMatrix::<f64>::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i.saturating_sub(band)..i {
            let v = vals[k % vals.len()];
            k += 1;
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| d[(i, j)].abs()).sum();
        d[(i, i)] = off + 0.5 + vals[i % vals.len()].abs();
    }
    let mut t = TriMat::new((n, n));
    for i in 0..n {
        for j in 0..n {
            if d[(i, j)] != 0.0 {
                t.add_triplet(i, j, d[(i, j)]);
            }
        }
    }
    t.to_csc()
}

fn dense(s: &CsMat<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(s.rows(), s.cols());
    for (&v, (i, j)) in s.iter() {
        d[(i, j)] += v;
    }
    d
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn crps_is_translation_invariant(m in -5.0..5.0f64, sd in 0.05..5.0f64, y in -5.0..5.0f64, c in -10.0..10.0f64) {
        let a = crps_gaussian(m, sd, y).unwrap();
        let b = crps_gaussian(m + c, sd, y + c).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn crps_scales_and_is_symmetric(m in -5.0..5.0f64, sd in 0.05..5.0f64, d in -5.0..5.0f64, s in 0.1..10.0f64) {
        let a = crps_gaussian(m, sd, m + d).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - crps_gaussian(m, sd, m - d).unwrap()).abs() < 1e-12);
        let scaled = crps_gaussian(s * m, s * sd, s * (m + d)).unwrap();
        prop_assert!((scaled - s * a).abs() < 1e-10 * (1.0 + s * a));
        // Never exceeds the point-mass score plus sd/√π.
        prop_assert!(a <= d.abs() + sd / std::f64::consts::PI.sqrt() + 1e-12);
    }

    #[test]
    fn fem_matrices_conserve_area_and_annihilate_constants(w in 20.0..200.0f64, h in 20.0..200.0f64, frac in 0.05..0.5f64) {
        let mesh = build_structured_mesh(Extent::new(0.0, 0.0, w, h), frac * w.min(h)).unwrap();
        let fem = assemble_fem(&mesh).unwrap();
        let total: f64 = fem.c.iter().sum();
        prop_assert!((total - w * h).abs() < 1e-9 * w * h);
        let g = dense(&fem.g);
        prop_assert!((&g - g.transpose()).amax() < 1e-12);
        let row_sums = &g * DVector::from_element(g.ncols(), 1.0);
        prop_assert!(row_sums.amax() < 1e-10);
    }

    #[test]
    fn stationary_precision_maps_constants_to_scaled_mass(log_tau in -2.0..2.0f64, log_kappa in -3.0..0.0f64) {
        let mesh = build_structured_mesh(Extent::new(0.0, 0.0, 60.0, 40.0), 10.0).unwrap();
        let fem = assemble_fem(&mesh).unwrap();
        let m = fem.c.len();
        let (tau, kappa) = (log_tau.exp(), log_kappa.exp());
        let q = dense(&assemble_precision(&fem, &vec![tau; m], &vec![kappa; m]).unwrap());
        prop_assert!((&q - q.transpose()).amax() <= 1e-12 * q.amax());
        let q1 = &q * DVector::from_element(m, 1.0);
        let scale = tau * tau * kappa.powi(4);
        for i in 0..m {
            prop_assert!((q1[i] - scale * fem.c[i]).abs() <= 1e-9 * q.amax());
        }
        prop_assert!(q.cholesky().is_some());
    }

    #[test]
    fn stationary_prior_reproduces_its_quantile_targets(
        rho_median in 10.0..500.0f64, rho_ratio in 1.5..5.0f64, sigma_median in 0.05..2.0f64, extra in 0.1..3.0f64, q in 0.6..0.99f64
    ) {
        let sigma_ratio = rho_ratio * (1.0 + extra);
        let t = QuantileTargets {
            rho_median,
            rho_q: rho_median * rho_ratio,
            sigma_median,
            sigma_q: sigma_median * sigma_ratio,
            q_level: q,
        };
        let st = solve_stationary_prior(&t).unwrap();
        let coh = CoherenceInputs { h0: 0.4, c_rho: 0.5, c_sigma: 0.9 };
        let prior = solve_nonstationary_prior(&st, &coh).unwrap();
        let rel = |a: f64, b: f64| (a / b - 1.0).abs();
        prop_assert!(rel(nominal_prior_quantile(&prior, 0.0, 0.5, Nominal::Rho), t.rho_median) < 1e-10);
        prop_assert!(rel(nominal_prior_quantile(&prior, 0.0, q, Nominal::Rho), t.rho_q) < 1e-10);
        prop_assert!(rel(nominal_prior_quantile(&prior, 0.0, 0.5, Nominal::Sigma), t.sigma_median) < 1e-10);
        prop_assert!(rel(nominal_prior_quantile(&prior, 0.0, q, Nominal::Sigma), t.sigma_q) < 1e-10);
    }

    #[test]
    fn coherence_sets_ratio_variation(h0 in 0.1..2.0f64, c_rho in 0.1..1.5f64, gap in 0.05..1.5f64) {
        let (t, _) = spatial_spde::prior::reference_inputs();
        let st = solve_stationary_prior(&t).unwrap();
        let c = CoherenceInputs { h0, c_rho, c_sigma: c_rho + gap };
        let prior = solve_nonstationary_prior(&st, &c).unwrap();
        // log(ratio at h0 / ratio at 0) has variance h0² times the slope variances.
        let var_rho = h0 * h0 * prior.theta_kappa[1].variance;
        let var_sigma = h0 * h0 * (prior.theta_tau[1].variance + prior.theta_kappa[1].variance);
        prop_assert!(((var_rho.exp() - 1.0).sqrt() - c.c_rho).abs() < 1e-10);
        prop_assert!(((var_sigma.exp() - 1.0).sqrt() - c.c_sigma).abs() < 1e-10);
        // Sea-level marginals are untouched.
        let a = nominal_log_params(&prior, 0.0, Nominal::Rho);
        let b = nominal_log_params(&prior.to_stationary(), 0.0, Nominal::Rho);
        prop_assert!((a.0 - b.0).abs() < 1e-14 && (a.1 - b.1).abs() < 1e-14);
    }

    #[test]
    fn partial_inverse_matches_dense_inverse(n in 3usize..30, band in 1usize..5, vals in prop::collection::vec(-1.0..1.0f64, 8..40)) {
        let q = banded_spd(n, band, &vals);
        let f = FactoredPrecision::new(&q).unwrap();
        let inv = dense(&q).try_inverse().unwrap();
        let pinv = f.partial_inverse();
        for i in 0..n {
            prop_assert!((pinv.variance(i) - inv[(i, i)]).abs() < 1e-10 * inv.amax());
            for j in 0..n {
                if let Some(v) = pinv.get(i, j) {
                    prop_assert!((v - inv[(i, j)]).abs() < 1e-10 * inv.amax());
                }
            }
        }
        let dl: f64 = 2.0 * dense(&q).cholesky().unwrap().l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        prop_assert!((f.log_det() - dl).abs() < 1e-9 * (1.0 + dl.abs()));
    }

    #[test]
    fn conditioned_samples_satisfy_constraints(n in 4usize..25, k in 1usize..3, seed in 0u64..1000, vals in prop::collection::vec(-1.0..1.0f64, 8..40)) {
        let q = banded_spd(n, 2, &vals);
        let f = FactoredPrecision::new(&q).unwrap();
        let a = DMatrix::from_fn(k, n, |i, j| ((i + 1) as f64 * 0.37 + j as f64 * 0.11).sin() + if j == i { 2.0 } else { 0.0 });
        let e = DVector::from_fn(k, |i, _| 0.3 * i as f64 - 0.1);
        let cs = ConstraintSet::new(a.clone(), e.clone()).unwrap();
        let mean: Vec<f64> = (0..n).map(|i| (i as f64 * 0.5).cos()).collect();
        let g = ConstrainedGmrf::new(&f, mean, &cs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..3 {
            let x = g.sample(&mut rng);
            let res = &a * DVector::from_column_slice(&x) - &e;
            prop_assert!(res.amax() < 1e-10, "residual {}", res.amax());
            prop_assert!(g.log_density(&x).unwrap().is_finite());
        }
        let cm = g.constrained_mean();
        prop_assert!(cs.residual(&cm).amax() < 1e-10);
    }

    #[test]
    fn mixture_quantiles_are_ordered(
        means in prop::collection::vec(-3.0..3.0f64, 1..6), sds in prop::collection::vec(0.05..2.0f64, 6), raw in prop::collection::vec(0.01..1.0f64, 6)
    ) {
        let k = means.len();
        let total: f64 = raw[..k].iter().sum();
        let w: Vec<f64> = raw[..k].iter().map(|v| v / total).collect();
        let comps: Vec<Moments> = (0..k).map(|i| Moments { mean: means[i], var: sds[i] * sds[i] }).collect();
        let m = mixture_marginal("x", &w, &comps);
        prop_assert!(m.quantiles.windows(2).all(|p| p[0].1 <= p[1].1 + 1e-12));
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m.mean >= lo - 1e-12 && m.mean <= hi + 1e-12);
        let within: f64 = w.iter().zip(&comps).map(|(w, c)| w * c.var).sum();
        prop_assert!(m.sd * m.sd >= within - 1e-12);
    }

    #[test]
    fn observation_csv_round_trips(values in prop::collection::vec(-10.0..10.0f64, 2..30), xs in prop::collection::vec(0.0..100.0f64, 5)) {
        let stations: Vec<Station> = (0..5)
            .map(|i| Station { id: format!("st{i}"), location: [xs[i], 2.0 * xs[i] + 1.0], elevation: xs[i] / 100.0 })
            .collect();
        let years: Vec<String> = (0..3).map(|y| format!("{}", 1980 + y)).collect();
        let mut obs: Vec<Observation> = (0..5).map(|s| Observation { station: s, year: 0, value: 0.5 * s as f64 }).collect();
        for (k, v) in values.iter().enumerate() {
            let (station, year) = (k % 5, 1 + (k / 5) % 2);
            if obs.iter().all(|o| (o.station, o.year) != (station, year)) {
                obs.push(Observation { station, year, value: *v });
            }
        }
        let set = ObservationSet::new(stations, years, obs).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf, &["header comment".into()]).unwrap();
        let back = ObservationSet::from_reader(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), set.len());
        let key = |s: &ObservationSet| {
            let mut v: Vec<(String, String, u64)> = s
                .observations
                .iter()
                .map(|o| (s.stations[o.station].id.clone(), s.years[o.year].clone(), o.value.to_bits()))
                .collect();
            v.sort();
            v
        };
        prop_assert_eq!(key(&back), key(&set));
    }
}
