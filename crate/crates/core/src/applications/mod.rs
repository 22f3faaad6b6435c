//! Model builders for classification, multilevel and longitudinal data, and
//! likelihood-based model comparison.

pub mod classification;
mod longitudinal;
mod multilevel;
mod report;

pub use classification::{build_classifier, classification_metrics, ClassificationMetrics, Classifier};
pub use longitudinal::{build_longitudinal, longitudinal_spec, GrowthModel, DEFAULT_HURST};
pub use multilevel::{
    build_multilevel, extract_group_effects, multilevel_spec, GroupEffect, GroupEffects, MultilevelVariant,
};
pub use report::{compare_models, format_table, response_checksum, write_comparison, ComparisonRow, ModelReport};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::inference::FittedModel;

/// The on-disk model artifact.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SavedModel {
    Regression { model: FittedModel },
    Classifier { classifier: Classifier },
}

impl SavedModel {
    pub fn fitted(&self) -> &FittedModel {
        match self {
            SavedModel::Regression { model } => model,
            SavedModel::Classifier { classifier } => &classifier.model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and re-validates the embedded model (see [`FittedModel::from_json`]).
    pub fn from_json(s: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(s)?;
        let kind = value.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
        let inner = |v: &serde_json::Value| FittedModel::from_json(&v.to_string());
        match kind.as_str() {
            "regression" => Ok(SavedModel::Regression {
                model: inner(&value["model"])?,
            }),
            "classifier" => {
                let mut classifier: Classifier = serde_json::from_value(value["classifier"].clone())?;
                classifier.model = inner(&value["classifier"]["model"])?;
                Ok(SavedModel::Classifier { classifier })
            }
            other => Err(crate::Error::Spec(format!("unknown model kind `{other}`"))),
        }
    }
}
