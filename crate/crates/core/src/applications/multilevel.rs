//! Multilevel (random intercept / random slope) models with a Pearson
//! kernel on the grouping factor and a canonical kernel on the covariate.

use serde::{Deserialize, Serialize};

use crate::anova::{AnovaSpec, Parameterization};
use crate::data::{ColumnType, CovariateColumn, Covariates, Dataset};
use crate::error::{Error, Result};
use crate::estimate::{em_fit, FitConfig, ModelSpec};
use crate::inference::FittedModel;
use crate::kernels::{KernelFamily, KernelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultilevelVariant {
    /// `{group}`
    VaryingIntercept,
    /// `{group}, {x}`
    ConstantSlope,
    /// `{group}, {x}, {group×x}`
    VaryingSlope,
}

pub fn multilevel_spec(
    group: &str,
    covariate: &str,
    variant: MultilevelVariant,
    parameterization: Parameterization,
) -> Result<ModelSpec> {
    let g = group.to_string();
    let x = covariate.to_string();
    let (anova, kernels) = match variant {
        MultilevelVariant::VaryingIntercept => (
            AnovaSpec::new(vec![g.clone()], vec![vec![g]], parameterization)?,
            vec![KernelSpec::pearson()],
        ),
        MultilevelVariant::ConstantSlope => (
            AnovaSpec::new(vec![g.clone(), x.clone()], vec![vec![g], vec![x]], parameterization)?,
            vec![KernelSpec::pearson(), KernelSpec::canonical()],
        ),
        MultilevelVariant::VaryingSlope => (
            AnovaSpec::from_sperner(vec![g.clone(), x.clone()], &[vec![g, x]], parameterization)?,
            vec![KernelSpec::pearson(), KernelSpec::canonical()],
        ),
    };
    ModelSpec::new(anova, kernels)
}

pub fn build_multilevel(
    data: &Dataset,
    group: &str,
    covariate: &str,
    variant: MultilevelVariant,
    parameterization: Parameterization,
    config: &FitConfig,
) -> Result<FittedModel> {
    let g = data.column(group).ok_or_else(|| Error::MissingColumn(group.into()))?;
    if g.column_type() != ColumnType::Categorical {
        return Err(Error::Spec(format!("group column `{group}` must be categorical")));
    }
    if variant != MultilevelVariant::VaryingIntercept {
        let x = data.column(covariate).ok_or_else(|| Error::MissingColumn(covariate.into()))?;
        if x.column_type() != ColumnType::Real {
            return Err(Error::Spec(format!("covariate `{covariate}` must be real")));
        }
    }
    em_fit(data, &multilevel_spec(group, covariate, variant, parameterization)?, config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEffect {
    pub group: String,
    /// Posterior mean of `f` in this group at `x = 0`.
    pub intercept: f64,
    /// `f̂(group, 1) − f̂(group, 0)`.
    pub slope: f64,
    /// Posterior mean of the `{group}` component alone.
    pub intercept_effect: f64,
    /// Unit-step change of the `{group×x}` component alone.
    pub slope_effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEffects {
    pub groups: Vec<GroupEffect>,
    pub mean_intercept: f64,
    pub sd_intercept: f64,
    pub mean_slope: f64,
    pub sd_slope: f64,
    /// Correlation between intercepts and slopes; `None` when either is constant.
    pub correlation: Option<f64>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Per-group intercepts and slopes read off the posterior mean.
pub fn extract_group_effects(model: &FittedModel, group: &str, covariate: &str) -> Result<GroupEffects> {
    let gi = model
        .anova
        .covariates
        .iter()
        .position(|c| c == group)
        .ok_or_else(|| Error::Spec(format!("`{group}` is not a covariate of the model")))?;
    let gk = &model.kernels[gi];
    if !matches!(gk.spec.family, KernelFamily::Pearson) {
        return Err(Error::Spec(format!("`{group}` does not carry a Pearson kernel")));
    }
    if !model.anova.terms.iter().any(|t| t == &vec![gi]) {
        return Err(Error::Spec("model has no group main effect".into()));
    }
    let xi = model.anova.covariates.iter().position(|c| c == covariate);
    if let Some(xi) = xi {
        let dim = model.kernels[xi].training_column().numeric().map(|d| d.ncols());
        if dim != Some(1) {
            return Err(Error::Spec(format!("`{covariate}` must be a scalar real covariate")));
        }
    }
    let levels: Vec<String> = {
        let mut seen = Vec::<String>::new();
        for l in gk.training_column().labels().expect("categorical") {
            if !seen.iter().any(|s| s == l) {
                seen.push(l.to_string());
            }
        }
        seen
    };
    let g = levels.len();
    // Rows: every group at x = 0, then every group at x = 1.
    let labels: Vec<&str> = levels.iter().chain(levels.iter()).map(String::as_str).collect();
    let mut cols = vec![CovariateColumn::categorical(group, &labels)];
    if xi.is_some() {
        let xs: Vec<f64> = (0..2 * g).map(|i| if i < g { 0.0 } else { 1.0 }).collect();
        cols.push(CovariateColumn::real_scalar(covariate, &xs));
    }
    let points = Covariates::new(cols)?;
    let (mean, _) = model.posterior_mean_var(&points)?;
    let parts = model.term_contributions(&points)?;
    let g_term = model.anova.terms.iter().position(|t| t == &vec![gi]);
    let gx_term = xi.and_then(|xi| {
        let mut t = vec![gi, xi];
        t.sort_unstable();
        model.anova.terms.iter().position(|u| *u == t)
    });
    let groups: Vec<GroupEffect> = levels
        .iter()
        .enumerate()
        .map(|(j, label)| GroupEffect {
            group: label.clone(),
            intercept: mean[j],
            slope: if xi.is_some() { mean[g + j] - mean[j] } else { 0.0 },
            intercept_effect: g_term.map_or(0.0, |t| parts[(j, t)]),
            slope_effect: gx_term.map_or(0.0, |t| parts[(g + j, t)] - parts[(j, t)]),
        })
        .collect();
    let ints: Vec<f64> = groups.iter().map(|e| e.intercept).collect();
    let slopes: Vec<f64> = groups.iter().map(|e| e.slope).collect();
    let (mean_intercept, sd_intercept) = mean_sd(&ints);
    let (mean_slope, sd_slope) = mean_sd(&slopes);
    let correlation = if g > 1 && sd_intercept > 1e-12 * mean_intercept.abs().max(1.0) && sd_slope > 1e-12 * mean_slope.abs().max(1.0) {
        let cov = ints
            .iter()
            .zip(&slopes)
            .map(|(a, b)| (a - mean_intercept) * (b - mean_slope))
            .sum::<f64>()
            / (g as f64 - 1.0);
        Some(cov / (sd_intercept * sd_slope))
    } else {
        None
    };
    Ok(GroupEffects {
        groups,
        mean_intercept,
        sd_intercept,
        mean_slope,
        sd_slope,
        correlation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        let p = Parameterization::Parsimonious;
        let count = |v| multilevel_spec("g", "x", v, p).unwrap().anova.n_params();
        assert_eq!(count(MultilevelVariant::VaryingIntercept), 1);
        assert_eq!(count(MultilevelVariant::ConstantSlope), 2);
        assert_eq!(count(MultilevelVariant::VaryingSlope), 2);
        let s = multilevel_spec("g", "x", MultilevelVariant::VaryingSlope, p).unwrap();
        assert_eq!(s.anova.n_terms(), 3);
    }
}
