//! Multi-class classification as regression on one-hot indicators.
//!
//! Each observation `k` is expanded into one row per class `j` with response
//! `y_jk = 1{c_k = j}`. The regression function is
//! `|C|⁻¹ + α_j + f_j(x_k)`: a class main effect plus class-by-feature
//! interactions, with no feature main effect.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::anova::{AnovaSpec, Parameterization};
use crate::data::{CovariateColumn, Covariates, Dataset};
use crate::error::{Error, Result};
use crate::estimate::{em_fit, FitConfig, ModelSpec, PriorMean};
use crate::inference::FittedModel;
use crate::kernels::KernelSpec;

pub const CLASS_COLUMN: &str = "class";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Classifier {
    /// Class labels in sorted order; ties go to the earliest.
    pub classes: Vec<String>,
    pub features: Vec<String>,
    pub model: FittedModel,
}

fn expand(features: &Covariates, classes: &[String]) -> Covariates {
    let c = classes.len();
    let rows: Vec<usize> = (0..features.n).flat_map(|k| std::iter::repeat_n(k, c)).collect();
    let mut columns: Vec<CovariateColumn> = features.columns.iter().map(|col| col.select(&rows)).collect();
    let labels: Vec<&str> = (0..features.n).flat_map(|_| classes.iter().map(String::as_str)).collect();
    columns.insert(0, CovariateColumn::categorical(CLASS_COLUMN, &labels));
    Covariates {
        columns,
        n: features.n * c,
    }
}

/// Fits the classifier with one kernel per feature column.
pub fn build_classifier<S: AsRef<str>>(
    features: &Covariates,
    labels: &[S],
    kernels: &[(String, KernelSpec)],
    parameterization: Parameterization,
    config: &FitConfig,
) -> Result<Classifier> {
    if labels.len() != features.n {
        return Err(Error::Dimension(format!(
            "{} labels for {} observations",
            labels.len(),
            features.n
        )));
    }
    if kernels.is_empty() {
        return Err(Error::Spec("a classifier needs at least one feature".into()));
    }
    let classes: Vec<String> = labels
        .iter()
        .map(|l| l.as_ref().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() < 2 {
        return Err(Error::Spec("a classifier needs at least two classes".into()));
    }
    let mut names = vec![CLASS_COLUMN.to_string()];
    let mut specs = vec![KernelSpec::pearson()];
    let mut terms = vec![vec![CLASS_COLUMN.to_string()]];
    let mut selected = Vec::new();
    for (name, spec) in kernels {
        if name == CLASS_COLUMN {
            return Err(Error::Spec(format!("feature name `{CLASS_COLUMN}` is reserved")));
        }
        let col = features.get(name).ok_or_else(|| Error::MissingColumn(name.clone()))?;
        selected.push(col.clone());
        names.push(name.clone());
        specs.push(spec.clone());
        terms.push(vec![CLASS_COLUMN.to_string(), name.clone()]);
    }
    let features = Covariates::new(selected)?;
    let anova = AnovaSpec::new(names, terms, parameterization)?;
    let spec = ModelSpec::new(anova, specs)?.with_prior_mean(PriorMean::Fixed(1.0 / classes.len() as f64));
    let expanded = expand(&features, &classes);
    let y: Vec<f64> = labels
        .iter()
        .flat_map(|l| classes.iter().map(move |c| f64::from(c == l.as_ref())))
        .collect();
    let data = Dataset::new(expanded.columns, "indicator", y)?;
    let model = em_fit(&data, &spec, config)?;
    Ok(Classifier {
        classes,
        features: kernels.iter().map(|(n, _)| n.clone()).collect(),
        model,
    })
}

impl Classifier {
    fn feature_subset(&self, features: &Covariates) -> Result<Covariates> {
        let cols = self
            .features
            .iter()
            .map(|n| features.get(n).cloned().ok_or_else(|| Error::MissingColumn(n.clone())))
            .collect::<Result<Vec<_>>>()?;
        if cols.is_empty() {
            return Ok(Covariates {
                columns: cols,
                n: features.n,
            });
        }
        Covariates::new(cols)
    }

    /// Posterior class means, one row per observation and one column per class.
    pub fn class_means(&self, features: &Covariates) -> Result<DMatrix<f64>> {
        let features = self.feature_subset(features)?;
        let c = self.classes.len();
        let expanded = expand(&features, &self.classes);
        let (mean, _) = self.model.posterior_mean_var(&expanded)?;
        Ok(DMatrix::from_row_iterator(features.n, c, mean.iter().copied()))
    }

    /// Observations carrying a categorical feature level unseen in training.
    pub fn extrapolation_mask(&self, features: &Covariates) -> Result<Vec<bool>> {
        let features = self.feature_subset(features)?;
        let expanded = expand(&features, &self.classes);
        let mask = self.model.extrapolation_mask(&expanded)?;
        Ok(mask
            .chunks(self.classes.len())
            .map(|c| c.iter().any(|&b| b))
            .collect())
    }

    pub fn predict(&self, features: &Covariates) -> Result<Vec<String>> {
        let means = self.class_means(features)?;
        Ok(means
            .row_iter()
            .enumerate()
            .map(|(i, row)| {
                let best = row.max();
                let winners: Vec<usize> = (0..row.len()).filter(|&j| row[j] == best).collect();
                if winners.len() > 1 {
                    log::info!(
                        "row {i}: tie between classes {:?}; taking `{}`",
                        winners.iter().map(|&j| &self.classes[j]).collect::<Vec<_>>(),
                        self.classes[winners[0]]
                    );
                }
                self.classes[winners[0]].clone()
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub n: usize,
    pub errors: usize,
    pub error_rate: f64,
    /// True labels the classifier never saw; each counts as an error.
    pub unknown_labels: usize,
}

pub fn classification_metrics<S: AsRef<str>>(
    classifier: &Classifier,
    features: &Covariates,
    labels: &[S],
) -> Result<ClassificationMetrics> {
    if labels.len() != features.n {
        return Err(Error::Dimension(format!(
            "{} labels for {} observations",
            labels.len(),
            features.n
        )));
    }
    let predicted = classifier.predict(features)?;
    let mut errors = 0;
    let mut unknown = 0;
    for (p, t) in predicted.iter().zip(labels) {
        let t = t.as_ref();
        if !classifier.classes.iter().any(|c| c == t) {
            unknown += 1;
        }
        if p != t {
            errors += 1;
        }
    }
    if unknown > 0 {
        log::warn!("{unknown} labels were not among the training classes");
    }
    let n = labels.len();
    Ok(ClassificationMetrics {
        n,
        errors,
        error_rate: if n == 0 { 0.0 } else { errors as f64 / n as f64 },
        unknown_labels: unknown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_is_observation_major() {
        let f = Covariates::new(vec![CovariateColumn::real_scalar("x", &[1.0, 2.0])]).unwrap();
        let e = expand(&f, &["a".to_string(), "b".to_string(), "c".to_string()]);
        assert_eq!(e.n, 6);
        assert_eq!(e.columns[0].labels().unwrap(), vec!["a", "b", "c", "a", "b", "c"]);
        assert_eq!(e.columns[1].numeric().unwrap().as_slice(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn single_class_is_rejected() {
        let f = Covariates::new(vec![CovariateColumn::real_scalar("x", &[1.0, 2.0])]).unwrap();
        let r = build_classifier(
            &f,
            &["a", "a"],
            &[("x".into(), KernelSpec::canonical())],
            Parameterization::Parsimonious,
            &FitConfig::default(),
        );
        assert!(r.is_err());
        let r = build_classifier(&f, &["a", "b"], &[], Parameterization::Parsimonious, &FitConfig::default());
        assert!(r.is_err());
    }
}
