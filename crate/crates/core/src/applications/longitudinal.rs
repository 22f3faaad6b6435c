//! Growth-curve models over time `T`, unit `C` and treatment `X`.
//!
//! Each model is a Sperner family over `{T, C, X}`; every term contains
//! time, so every model describes how curves over time differ.

use serde::{Deserialize, Serialize};

use crate::anova::{AnovaSpec, Parameterization};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimate::{em_fit, FitConfig, ModelSpec};
use crate::inference::FittedModel;
use crate::kernels::KernelSpec;

pub const DEFAULT_HURST: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrowthModel {
    /// `{}`: a single curve.
    #[serde(rename = "{}")]
    Common,
    /// `{X}`: curves differ by treatment.
    #[serde(rename = "{X}")]
    Treatment,
    /// `{C}`: curves differ by unit.
    #[serde(rename = "{C}")]
    Unit,
    /// `{C,X}`: additive unit and treatment differences.
    #[serde(rename = "{C,X}")]
    UnitPlusTreatment,
    /// `{CX}`: unit-by-treatment differences.
    #[serde(rename = "{CX}")]
    UnitByTreatment,
}

impl GrowthModel {
    pub const ALL: [GrowthModel; 5] = [
        GrowthModel::Common,
        GrowthModel::Treatment,
        GrowthModel::Unit,
        GrowthModel::UnitPlusTreatment,
        GrowthModel::UnitByTreatment,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            GrowthModel::Common => "{}",
            GrowthModel::Treatment => "{X}",
            GrowthModel::Unit => "{C}",
            GrowthModel::UnitPlusTreatment => "{C,X}",
            GrowthModel::UnitByTreatment => "{CX}",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let inner = compact.trim_start_matches('{').trim_end_matches('}').to_ascii_uppercase();
        match inner.as_str() {
            "" => Ok(GrowthModel::Common),
            "X" => Ok(GrowthModel::Treatment),
            "C" => Ok(GrowthModel::Unit),
            "C,X" | "X,C" => Ok(GrowthModel::UnitPlusTreatment),
            "CX" | "XC" | "C*X" | "X*C" => Ok(GrowthModel::UnitByTreatment),
            _ => Err(Error::Spec(format!("unknown growth model `{s}`"))),
        }
    }
}

pub fn longitudinal_spec(
    time: &str,
    unit: &str,
    treatment: &str,
    model: GrowthModel,
    hurst: f64,
    parameterization: Parameterization,
) -> Result<ModelSpec> {
    let (t, c, x) = (time.to_string(), unit.to_string(), treatment.to_string());
    let (covariates, family): (Vec<String>, Vec<Vec<String>>) = match model {
        GrowthModel::Common => (vec![t.clone()], vec![vec![t]]),
        GrowthModel::Treatment => (vec![t.clone(), x.clone()], vec![vec![t, x]]),
        GrowthModel::Unit => (vec![t.clone(), c.clone()], vec![vec![t, c]]),
        GrowthModel::UnitPlusTreatment => (
            vec![t.clone(), c.clone(), x.clone()],
            vec![vec![t.clone(), c], vec![t, x]],
        ),
        GrowthModel::UnitByTreatment => (vec![t.clone(), c.clone(), x.clone()], vec![vec![t, c, x]]),
    };
    let kernels = covariates
        .iter()
        .map(|name| {
            if *name == time {
                KernelSpec::fbm(hurst)
            } else {
                KernelSpec::pearson()
            }
        })
        .collect();
    let anova = AnovaSpec::from_sperner(covariates, &family, parameterization)?;
    ModelSpec::new(anova, kernels)
}

#[allow(clippy::too_many_arguments)]
pub fn build_longitudinal(
    data: &Dataset,
    time: &str,
    unit: &str,
    treatment: &str,
    model: GrowthModel,
    hurst: f64,
    parameterization: Parameterization,
    config: &FitConfig,
) -> Result<FittedModel> {
    let spec = longitudinal_spec(time, unit, treatment, model, hurst, parameterization)?;
    em_fit(data, &spec, config)
}
