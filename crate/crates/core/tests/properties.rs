//! Property tests for the invariants the library promises.

use iprior_core::anova::{AnovaSpec, GramSet, Parameterization};
use iprior_core::applications::{build_classifier, ModelReport};
use iprior_core::data::{CovariateColumn, Covariates, Dataset};
use iprior_core::estimate::{em_fit, em_run, m_step, q_value, FitConfig, ModelSpec, Workspace};
use iprior_core::inference::{fisher_information, log_marginal_likelihood, posterior_weights, ErrorModel};
use iprior_core::kernels::{cross_gram, gram, KernelSpec};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 32,
        ..ProptestConfig::default()
    }
}

fn distinct(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[1] - w[0] > 1e-3)
}

fn xs(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n).prop_filter("distinct points", |v| distinct(v))
}

fn kernel() -> impl Strategy<Value = KernelSpec> {
    prop_oneof![
        Just(KernelSpec::canonical()),
        (0.05f64..0.95).prop_map(KernelSpec::fbm),
        (0.3f64..3.0).prop_map(KernelSpec::sqexp),
    ]
}

fn labels(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), n)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn fbm_gram(x: &[f64], hurst: f64) -> DMatrix<f64> {
    gram(&KernelSpec::fbm(hurst), &CovariateColumn::real_scalar("x", x)).unwrap().0
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn centered_grams_are_symmetric_with_zero_row_sums(x in xs(3..14), k in kernel()) {
        let n = x.len() as f64;
        let (h, _) = gram(&k, &CovariateColumn::real_scalar("x", &x)).unwrap();
        let scale = max_abs(&h).max(1e-300);
        for i in 0..h.nrows() {
            prop_assert!(h.row(i).sum().abs() <= 1e-8 * n * scale);
            for j in 0..h.ncols() {
                prop_assert!((h[(i, j)] - h[(j, i)]).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn cross_gram_at_training_points_is_the_training_gram(x in xs(3..12), k in kernel()) {
        let col = CovariateColumn::real_scalar("x", &x);
        let (h, trained) = gram(&k, &col).unwrap();
        let c = cross_gram(&trained, &col).unwrap();
        prop_assert!(max_abs(&(c - &h)) <= 1e-10 * max_abs(&h).max(1.0));
    }

    #[test]
    fn pearson_gram_is_inverse_proportions_minus_one(g in labels(2..20)) {
        let n = g.len() as f64;
        let (h, _) = gram(&KernelSpec::pearson(), &CovariateColumn::categorical("g", &g)).unwrap();
        for i in 0..g.len() {
            for j in 0..g.len() {
                let p = g.iter().filter(|l| **l == g[i]).count() as f64 / n;
                let expect = if g[i] == g[j] { 1.0 / p - 1.0 } else { -1.0 };
                prop_assert!((h[(i, j)] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn likelihood_is_translation_and_permutation_invariant(
        x in xs(3..10),
        hurst in 0.1f64..0.9,
        psi in 0.1f64..10.0,
        shift in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let n = x.len();
        let h = fbm_gram(&x, hurst);
        let y: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * (seed % 97) as f64).sin() * 2.0).collect();
        let yv = DVector::from_vec(y.clone());
        let base = log_marginal_likelihood(&h, psi, &yv, 0.3).unwrap();
        let moved = log_marginal_likelihood(&h, psi, &yv.add_scalar(shift), 0.3 + shift).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * (1.0 + base.abs()));

        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..n).collect();
            p.rotate_left((seed as usize) % n);
            p.reverse();
            p
        };
        let hp = DMatrix::from_fn(n, n, |i, j| h[(perm[i], perm[j])]);
        let yp = DVector::from_iterator(n, perm.iter().map(|&i| y[i]));
        let permuted = log_marginal_likelihood(&hp, psi, &yp, 0.3).unwrap();
        prop_assert!((base - permuted).abs() <= 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn commutation_identity_for_posterior_weights(
        x in xs(3..10),
        hurst in 0.1f64..0.9,
        lambda in -3.0f64..3.0,
        psi in 0.05f64..20.0,
        r in prop::collection::vec(-5.0f64..5.0, 10),
    ) {
        let n = x.len();
        let h = fbm_gram(&x, hurst) * lambda;
        let r = DVector::from_column_slice(&r[..n]);
        let v = &h * &h * psi + DMatrix::identity(n, n) / psi;
        // Solves, not an explicit inverse: the inverse loses ~1e-8 to
        // cancellation when ψH² dominates.
        let lu = v.lu();
        let left = &h * lu.solve(&r).unwrap() * psi;
        let right = lu.solve(&(&h * &r)).unwrap() * psi;
        let w = posterior_weights(&h, psi, &r, 0.0).unwrap();
        let scale = 1.0 + left.amax();
        prop_assert!((&left - &right).amax() <= 1e-9 * scale);
        prop_assert!((&w - &left).amax() <= 1e-9 * scale);
    }

    #[test]
    fn fisher_information_grows_with_observations(
        rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 1..15),
        psi in 0.01f64..50.0,
    ) {
        let a: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let b: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let m = a.len();
        for k in 1..=m {
            let e = ErrorModel::Iid { psi };
            let before = fisher_information(&a[..k - 1], &a[..k - 1], e);
            let after = fisher_information(&a[..k], &a[..k], e);
            prop_assert!(after >= before - 1e-10);
            let before_b = fisher_information(&b[..k - 1], &b[..k - 1], e);
            let after_b = fisher_information(&b[..k], &b[..k], e);
            prop_assert!(after_b >= before_b - 1e-10);
        }
        // Off the diagonal the double sum is a plain inner product.
        let brute: f64 = a.iter().zip(&b).map(|(u, v)| psi * u * v).sum();
        let got = fisher_information(&a, &b, ErrorModel::Iid { psi });
        prop_assert!((got - brute).abs() <= 1e-10 * (1.0 + brute.abs()));
    }

    #[test]
    fn parsimonious_and_extended_agree_at_matching_weights(
        x in xs(4..10),
        g in labels(10..11),
        lx in -2.0f64..2.0,
        lg in -2.0f64..2.0,
        psi in 0.1f64..5.0,
    ) {
        let n = x.len();
        let g = &g[..n];
        let mut grams = GramSet::default();
        grams.insert("x", gram(&KernelSpec::canonical(), &CovariateColumn::real_scalar("x", &x)).unwrap().0);
        grams.insert("g", gram(&KernelSpec::pearson(), &CovariateColumn::categorical("g", g)).unwrap().0);
        let anova = AnovaSpec::from_sperner(
            vec!["x".into(), "g".into()],
            &[vec!["x".into(), "g".into()]],
            Parameterization::Parsimonious,
        ).unwrap();
        let y: Vec<f64> = x.iter().map(|v| v * 1.5 + v.sin()).collect();
        let ws = Workspace::new(anova.clone(), &grams, &y, 0.0).unwrap();
        let ext = ws.reparameterized(Parameterization::Extended);
        let lambda = [lx, lg];
        let c: Vec<f64> = anova.coefficients(&lambda).iter().copied().collect();
        let a = ws.log_likelihood(&lambda, psi).unwrap();
        let b = ext.log_likelihood(&c, psi).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn aic_and_bic_follow_their_definitions(l in -1e4f64..1e4, k in 0usize..12, n in 2usize..10_000) {
        let r = ModelReport::new("m", l, k, n);
        let kt = (k + 1) as f64;
        prop_assert_eq!(r.aic, -2.0 * l + 2.0 * kt);
        prop_assert_eq!(r.bic, -2.0 * l + kt * (n as f64).ln());
    }
}

fn two_term_workspace(x: &[f64], g: &[String], y: &[f64]) -> Workspace {
    let mut grams = GramSet::default();
    grams.insert("x", gram(&KernelSpec::fbm(0.5), &CovariateColumn::real_scalar("x", x)).unwrap().0);
    grams.insert("g", gram(&KernelSpec::pearson(), &CovariateColumn::categorical("g", g)).unwrap().0);
    let anova = AnovaSpec::new(
        vec!["x".into(), "g".into()],
        vec![vec!["x".into()], vec!["g".into()], vec!["x".into(), "g".into()]],
        Parameterization::Parsimonious,
    )
    .unwrap();
    let f0 = y.iter().sum::<f64>() / y.len() as f64;
    Workspace::new(anova, &grams, y, f0).unwrap()
}

fn problem() -> impl Strategy<Value = (Vec<f64>, Vec<String>, Vec<f64>)> {
    (5usize..14).prop_flat_map(|n| {
        (
            xs(n..n + 1),
            labels(n..n + 1),
            prop::collection::vec(-1.0f64..1.0, n),
        )
            .prop_map(|(x, g, e)| {
                let y = x
                    .iter()
                    .zip(&g)
                    .zip(&e)
                    .map(|((x, g), e)| x.sin() + if g == "a" { 0.5 } else { 0.0 } + 0.3 * e)
                    .collect();
                (x, g, y)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn em_trace_never_decreases(
        (x, g, y) in problem(),
        l0 in prop::collection::vec(-1.0f64..1.0, 2),
        psi0 in 0.2f64..5.0,
    ) {
        let ws = two_term_workspace(&x, &g, &y);
        let cfg = FitConfig { max_iter: 60, ..FitConfig::default() };
        let run = em_run(&ws, &l0, psi0, &cfg).unwrap();
        for w in run.trace.windows(2) {
            let (a, b) = (w[0].log_likelihood, w[1].log_likelihood);
            prop_assert!(b >= a - 1e-8 * (1.0 + a.abs()), "{a} -> {b}");
        }
    }

    #[test]
    fn e_step_second_moment_is_symmetric_psd_and_m_step_ascends(
        (x, g, y) in problem(),
        l0 in prop::collection::vec(-1.0f64..1.0, 2),
        psi0 in 0.2f64..5.0,
    ) {
        let ws = two_term_workspace(&x, &g, &y);
        let e = ws.e_step(&l0, psi0).unwrap();
        let wt = e.w_tilde();
        let scale = max_abs(&wt).max(1.0);
        prop_assert!(max_abs(&(&wt - wt.transpose())) <= 1e-10 * scale);
        let eig = wt.symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() >= -1e-9 * scale);

        let m = m_step(&ws.anova, &e.qform, &l0, psi0).unwrap();
        let q0 = q_value(&ws.anova, &e.qform, &l0, psi0);
        let q1 = q_value(&ws.anova, &e.qform, &m.lambda, m.psi);
        prop_assert!(q1 >= q0 - 1e-10 * (1.0 + q0.abs()));
    }

    #[test]
    fn q_is_quadratic_in_each_scale(
        (x, g, y) in problem(),
        l0 in prop::collection::vec(-1.0f64..1.0, 2),
        psi0 in 0.2f64..5.0,
        k in 0usize..2,
    ) {
        let ws = two_term_workspace(&x, &g, &y);
        let e = ws.e_step(&l0, psi0).unwrap();
        let q = |t: f64| {
            let mut l = l0.clone();
            l[k] = t;
            q_value(&ws.anova, &e.qform, &l, psi0)
        };
        let (t0, t1, t2, t3) = (-1.0, 0.0, 1.0, 2.5);
        let (q0, q1, q2) = (q(t0), q(t1), q(t2));
        // Lagrange interpolation through the first three points.
        let lag = |t: f64| {
            q0 * (t - t1) * (t - t2) / ((t0 - t1) * (t0 - t2))
                + q1 * (t - t0) * (t - t2) / ((t1 - t0) * (t1 - t2))
                + q2 * (t - t0) * (t - t1) / ((t2 - t0) * (t2 - t1))
        };
        let q3 = q(t3);
        prop_assert!((lag(t3) - q3).abs() <= 1e-9 * (1.0 + q3.abs()), "{} vs {q3}", lag(t3));
    }
}

// Overlapping classes keep the likelihood maximum finite.
fn blob_features(n: usize, shift: f64) -> (Covariates, Vec<String>) {
    let classes = ["p", "q", "r"];
    let mut u = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 3;
        u.push(c as f64 * 0.4 + shift * ((i * 7) as f64).sin());
        labels.push(classes[c].to_string());
    }
    (Covariates::new(vec![CovariateColumn::real_scalar("u", &u)]).unwrap(), labels)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn class_means_sum_to_one_and_follow_relabeling(n in 6usize..11, shift in 0.5f64..0.9) {
        let (feats, labels) = blob_features(n, shift);
        // With the parsimonious form the interaction scale is λ_class·λ_u and
        // the optimum sits on a ridge, so separate fits stop at different points.
        let kernels = vec![("u".to_string(), KernelSpec::fbm(0.5))];
        let cfg = FitConfig { restarts: 2, max_iter: 3000, rel_tol: 1e-12, ..FitConfig::default() };
        let clf = build_classifier(&feats, &labels, &kernels, Parameterization::Extended, &cfg).unwrap();
        let means = clf.class_means(&feats).unwrap();
        for row in means.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6, "row sum {}", row.sum());
        }
        for obs in clf.model.response.chunks(clf.classes.len()) {
            prop_assert_eq!(obs.iter().sum::<f64>(), 1.0);
        }

        // Rename p→z, q→y, r→x: sorted order reverses, so means reverse too.
        let renamed: Vec<String> = labels
            .iter()
            .map(|l| match l.as_str() { "p" => "z", "q" => "y", _ => "x" }.to_string())
            .collect();
        let other = build_classifier(&feats, &renamed, &kernels, Parameterization::Extended, &cfg).unwrap();
        let m2 = other.class_means(&feats).unwrap();
        let c = clf.classes.len();
        for i in 0..n {
            for j in 0..c {
                prop_assert!((means[(i, j)] - m2[(i, c - 1 - j)]).abs() <= 1e-5);
            }
        }
        let p1 = clf.predict(&feats).unwrap();
        let p2 = other.predict(&feats).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            let mapped = match a.as_str() { "p" => "z", "q" => "y", _ => "x" };
            prop_assert_eq!(mapped, b.as_str());
        }
    }

    #[test]
    fn fixed_seed_fits_are_bit_identical(seed in any::<u64>(), n in 6usize..15) {
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * v + 0.2 * ((i * 3) as f64).cos()).collect();
        let data = Dataset::new(vec![CovariateColumn::real_scalar("x", &x)], "y", y).unwrap();
        let anova = AnovaSpec::new(vec!["x".into()], vec![vec!["x".into()]], Parameterization::Extended).unwrap();
        let spec = ModelSpec::new(anova, vec![KernelSpec::fbm(0.5)]).unwrap();
        let cfg = FitConfig { seed, restarts: 4, max_iter: 100, ..FitConfig::default() };
        let a = em_fit(&data, &spec, &cfg).unwrap();
        let b = em_fit(&data, &spec, &cfg).unwrap();
        prop_assert_eq!(a.lambda.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.lambda.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.psi().to_bits(), b.psi().to_bits());
        prop_assert_eq!(a.trace.len(), b.trace.len());
        for (r, s) in a.trace.iter().zip(&b.trace) {
            prop_assert_eq!(r.log_likelihood.to_bits(), s.log_likelihood.to_bits());
        }
    }
}
