use iprior_core::anova::Parameterization;
use iprior_core::applications::{
    build_classifier, build_longitudinal, build_multilevel, classification_metrics, extract_group_effects,
    GrowthModel, MultilevelVariant,
};
use iprior_core::data::{CovariateColumn, Covariates, Dataset};
use iprior_core::estimate::FitConfig;
use iprior_core::kernels::{gram, KernelSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn cfg(max_iter: usize) -> FitConfig {
    FitConfig {
        max_iter,
        ..FitConfig::default()
    }
}

fn grouped(groups: &[&str], x: &[f64], y: Vec<f64>) -> Dataset {
    Dataset::new(
        vec![CovariateColumn::categorical("g", groups), CovariateColumn::real_scalar("x", x)],
        "y",
        y,
    )
    .unwrap()
}

#[test]
fn identical_groups_get_identical_intercepts() {
    let xs = [0.1, 0.4, 0.5, 0.9, 1.3, 1.7];
    let ys = [1.0, 1.9, 1.7, 3.1, 3.6, 4.8];
    let mut g = Vec::new();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for label in ["a", "b"] {
        for (xi, yi) in xs.iter().zip(&ys) {
            g.push(label);
            x.push(*xi);
            y.push(*yi);
        }
    }
    let data = grouped(&g, &x, y);
    let m = build_multilevel(&data, "g", "x", MultilevelVariant::VaryingSlope, Parameterization::Parsimonious, &cfg(2000))
        .unwrap();
    let fx = extract_group_effects(&m, "g", "x").unwrap();
    let (a, b) = (&fx.groups[0], &fx.groups[1]);
    assert!((a.intercept - b.intercept).abs() < 1e-9);
    assert!(a.intercept_effect.abs() < 1e-9 && b.intercept_effect.abs() < 1e-9);
    assert!(fx.sd_intercept < 1e-9);
    assert!(fx.correlation.is_none());
}

#[test]
fn small_groups_get_large_prior_variance() {
    let mut labels = vec!["small"; 2];
    labels.extend(vec!["medium"; 5]);
    labels.extend(vec!["large"; 13]);
    let col = CovariateColumn::categorical("g", &labels);
    let (h, _) = gram(&KernelSpec::pearson(), &col).unwrap();
    let (s, m, l) = (h[(0, 0)], h[(2, 2)], h[(10, 10)]);
    assert!(s > m && m > l, "{s} {m} {l}");
    assert!((s - (20.0 / 2.0 - 1.0)).abs() < 1e-12);
}

#[test]
fn varying_slopes_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 30;
    let e = normals(&mut rng, 2 * n);
    let (mut g, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (j, (label, slope)) in [("one", 1.0), ("three", 3.0)].into_iter().enumerate() {
        for i in 0..n {
            let xi = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
            g.push(label);
            x.push(xi);
            y.push(0.5 + slope * xi + 0.05 * e[j * n + i]);
        }
    }
    let data = grouped(&g, &x, y);
    let m = build_multilevel(&data, "g", "x", MultilevelVariant::VaryingSlope, Parameterization::Parsimonious, &cfg(3000))
        .unwrap();
    let fx = extract_group_effects(&m, "g", "x").unwrap();
    let slope = |name: &str| fx.groups.iter().find(|e| e.group == name).unwrap().slope;
    assert!((slope("one") - 1.0).abs() < 0.2, "slope {}", slope("one"));
    assert!((slope("three") - 3.0).abs() < 0.2, "slope {}", slope("three"));

    // The canonical kernel makes the posterior mean linear in x within a
    // group, so any pair of points gives the same difference quotient.
    let pts = Covariates::new(vec![
        CovariateColumn::categorical("g", &["one", "one", "three", "three"]),
        CovariateColumn::real_scalar("x", &[-0.5, 2.5, -0.5, 2.5]),
    ])
    .unwrap();
    let (mean, _) = m.posterior_mean_var(&pts).unwrap();
    assert!(((mean[1] - mean[0]) / 3.0 - slope("one")).abs() < 1e-10);
    assert!(((mean[3] - mean[2]) / 3.0 - slope("three")).abs() < 1e-10);
}

#[test]
fn slope_models_carry_two_scale_parameters() {
    let x: Vec<f64> = (0..12).map(|i| i as f64 / 4.0).collect();
    let g: Vec<&str> = (0..12).map(|i| ["u", "v", "w"][i % 3]).collect();
    let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + (i % 3) as f64 + 0.1 * (i as f64).sin()).collect();
    let data = grouped(&g, &x, y);
    for v in [MultilevelVariant::ConstantSlope, MultilevelVariant::VaryingSlope] {
        let m = build_multilevel(&data, "g", "x", v, Parameterization::Parsimonious, &cfg(300)).unwrap();
        assert_eq!(m.lambda.len(), 2, "{v:?}");
    }
    let m = build_multilevel(&data, "g", "x", MultilevelVariant::VaryingIntercept, Parameterization::Parsimonious, &cfg(300))
        .unwrap();
    assert_eq!(m.lambda.len(), 1);
}

#[test]
fn multilevel_rejects_a_real_group_column() {
    let data = Dataset::new(
        vec![CovariateColumn::real_scalar("g", &[1.0, 2.0, 3.0]), CovariateColumn::real_scalar("x", &[0.0, 1.0, 2.0])],
        "y",
        vec![1.0, 2.0, 2.5],
    )
    .unwrap();
    assert!(build_multilevel(&data, "g", "x", MultilevelVariant::VaryingSlope, Parameterization::Parsimonious, &cfg(10)).is_err());
}

fn herd(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = 6;
    let times = [0.0f64, 1.0, 2.0, 3.0, 4.0];
    let e = normals(&mut rng, units * times.len());
    let unit_shift = normals(&mut rng, units);
    let (mut t, mut c, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for u in 0..units {
        let treated = u % 2 == 1;
        for (k, &tk) in times.iter().enumerate() {
            t.push(tk);
            c.push(format!("c{u}"));
            x.push(if treated { "b" } else { "a" });
            let growth = 2.0 * (1.0 + tk).ln() + if treated { 0.3 * tk } else { 0.0 };
            y.push(growth + 0.4 * unit_shift[u] + 0.2 * e[u * times.len() + k]);
        }
    }
    Dataset::new(
        vec![
            CovariateColumn::real_scalar("t", &t),
            CovariateColumn::categorical("c", &c),
            CovariateColumn::categorical("x", &x),
        ],
        "y",
        y,
    )
    .unwrap()
}

#[test]
fn larger_growth_models_fit_at_least_as_well() {
    let data = herd(11);
    let fit = |m| {
        build_longitudinal(&data, "t", "c", "x", m, 0.3, Parameterization::Parsimonious, &cfg(3000))
            .unwrap()
            .log_likelihood
    };
    let (common, treat) = (fit(GrowthModel::Common), fit(GrowthModel::Treatment));
    let (unit, both) = (fit(GrowthModel::Unit), fit(GrowthModel::UnitPlusTreatment));
    assert!(treat >= common - 1e-6, "{{X}} {treat} < {{}} {common}");
    assert!(both >= unit - 1e-6, "{{C,X}} {both} < {{C}} {unit}");
}

#[test]
fn one_example_per_class_is_interpolated() {
    let feats = Covariates::new(vec![CovariateColumn::real_scalar("u", &[0.0, 1.0, 2.5])]).unwrap();
    let labels = ["left", "mid", "right"];
    let kernels = vec![("u".to_string(), KernelSpec::fbm(0.5))];
    let clf = build_classifier(&feats, &labels, &kernels, Parameterization::Parsimonious, &cfg(300)).unwrap();
    let m = classification_metrics(&clf, &feats, &labels).unwrap();
    assert_eq!(m.errors, 0);
}

#[test]
fn separable_blobs_are_classified_without_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 40;
    let z = normals(&mut rng, 2 * n);
    let mut pts = nalgebra::DMatrix::zeros(n, 2);
    let mut labels = Vec::new();
    for i in 0..n {
        let (c, centre) = if i % 2 == 0 { ("neg", -3.0) } else { ("pos", 3.0) };
        pts[(i, 0)] = centre + 0.5 * z[2 * i];
        pts[(i, 1)] = centre + 0.5 * z[2 * i + 1];
        labels.push(c);
    }
    let feats = Covariates::new(vec![CovariateColumn::real("p", pts)]).unwrap();
    let kernels = vec![("p".to_string(), KernelSpec::canonical())];
    let clf = build_classifier(&feats, &labels, &kernels, Parameterization::Parsimonious, &cfg(500)).unwrap();
    let m = classification_metrics(&clf, &feats, &labels).unwrap();
    assert_eq!((m.n, m.errors), (n, 0));
    let means = clf.class_means(&feats).unwrap();
    for row in means.row_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn a_constant_predictor_misses_all_but_one_class() {
    // A constant feature has a zero centred kernel, so every class mean is
    // 1/11 and ties fall to the first class.
    let classes: Vec<String> = (0..11).map(|k| format!("k{k:02}")).collect();
    let labels: Vec<String> = (0..33).map(|i| classes[i % 11].clone()).collect();
    let feats = Covariates::new(vec![CovariateColumn::real_scalar("u", &[1.0; 33])]).unwrap();
    let kernels = vec![("u".to_string(), KernelSpec::canonical())];
    let clf = build_classifier(&feats, &labels, &kernels, Parameterization::Parsimonious, &cfg(50)).unwrap();
    let m = classification_metrics(&clf, &feats, &labels).unwrap();
    assert_eq!(m.errors, 30);
    assert!((m.error_rate - 10.0 / 11.0).abs() < 1e-12);

    let mut wrong = labels.clone();
    wrong[0] = "never-seen".into();
    let m = classification_metrics(&clf, &feats, &wrong).unwrap();
    assert_eq!((m.unknown_labels, m.errors), (1, 31));
}
