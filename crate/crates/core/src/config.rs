//! Run configuration files.
//!
//! A configuration is TOML with the sections `[data]`, `[columns]`,
//! `[kernels]`, `[model]`, `[fit]`, and optionally `[profile]` and
//! `[output]`. Relative paths are resolved against the configuration file's
//! directory. See the README for the full grammar.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::anova::{parse_terms, AnovaSpec, Parameterization};
use crate::data::{ColumnType, Metric, Schema};
use crate::error::{Error, Result};
use crate::estimate::{FitConfig, Hyperparameter, ModelSpec, PriorMean, ProfileTarget};
use crate::kernels::{KernelFamily, KernelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Regression,
    Classification,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Use the first `train_rows` rows of `train` for fitting and the rest as
    /// the test set.
    #[serde(default)]
    pub train_rows: Option<usize>,
    pub response: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelEntry {
    pub family: String,
    #[serde(default)]
    pub hurst: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    /// `euclidean`, `mahalanobis` or `sobolev`.
    #[serde(default)]
    pub metric: Option<String>,
    #[serde(default)]
    pub centered: Option<bool>,
}

impl KernelEntry {
    pub fn to_spec(&self, column: &str) -> Result<KernelSpec> {
        let need = |v: Option<f64>, what: &str| {
            v.ok_or_else(|| Error::Config(format!("kernel for `{column}`: `{}` needs `{what}`", self.family)))
        };
        let family = match self.family.as_str() {
            "constant" => KernelFamily::Constant,
            "canonical_finite" | "nominal" => KernelFamily::CanonicalFinite,
            "pearson" => KernelFamily::Pearson,
            "canonical" | "linear" => KernelFamily::Canonical,
            "mahalanobis" => KernelFamily::Mahalanobis,
            "fbm" => KernelFamily::Fbm {
                hurst: need(self.hurst, "hurst")?,
            },
            "sqexp" | "se" => KernelFamily::SqExp {
                sigma: need(self.sigma, "sigma")?,
            },
            other => return Err(Error::Config(format!("kernel for `{column}`: unknown family `{other}`"))),
        };
        let mut spec = KernelSpec::new(family);
        if let Some(m) = &self.metric {
            spec.metric = Some(match m.as_str() {
                "euclidean" => Metric::Euclidean,
                "mahalanobis" => Metric::Mahalanobis { covariance: None },
                "sobolev" => Metric::SobolevCurve,
                other => return Err(Error::Config(format!("kernel for `{column}`: unknown metric `{other}`"))),
            });
        }
        if let Some(c) = self.centered {
            spec.centered = c;
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub task: Task,
    /// Explicit term list, e.g. `"x + g + x*g"`.
    #[serde(default)]
    pub terms: Option<String>,
    /// Highest-order terms, e.g. `["x*g", "z"]`; expanded to all sub-terms.
    #[serde(default)]
    pub sperner: Option<Vec<String>>,
    #[serde(default)]
    pub parameterization: Parameterization,
    /// Only `iid` is supported.
    #[serde(default = "default_error")]
    pub error: String,
    #[serde(default)]
    pub prior_mean: Option<f64>,
}

fn default_error() -> String {
    "iid".into()
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub covariate: String,
    pub parameter: Hyperparameter,
    pub lower: f64,
    pub upper: f64,
    #[serde(default)]
    pub tol: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    data: DataSection,
    columns: BTreeMap<String, String>,
    kernels: BTreeMap<String, KernelEntry>,
    model: ModelSection,
    #[serde(default)]
    fit: FitConfig,
    #[serde(default)]
    profile: Option<ProfileSection>,
    #[serde(default)]
    output: OutputSection,
}

/// A validated configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub label: String,
    pub task: Task,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    pub train_rows: Option<usize>,
    pub response: String,
    /// Covariate columns (the response excluded), in name order.
    pub schema: Schema,
    /// Regression model; for classification, the per-feature kernels with
    /// terms filled in by the classifier builder.
    pub model: ModelSpec,
    pub fit: FitConfig,
    pub profile: Option<ProfileTarget>,
    pub output_dir: Option<PathBuf>,
}

fn column_type(name: &str, s: &str) -> Result<ColumnType> {
    match s {
        "categorical" => Ok(ColumnType::Categorical),
        "real" => Ok(ColumnType::Real),
        "functional" => Ok(ColumnType::Functional),
        other => Err(Error::Config(format!("column `{name}`: unknown type `{other}`"))),
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let default_label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        Self::parse(&text, base, &default_label)
    }

    pub fn parse(text: &str, base: &Path, default_label: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

        let mut schema = Schema::new();
        for (name, ty) in &raw.columns {
            if *name == raw.data.response {
                continue;
            }
            schema = schema.with(name.clone(), column_type(name, ty)?);
        }
        if raw.data.test.is_some() && raw.data.train_rows.is_some() {
            return Err(Error::Config("give either `test` or `train_rows`, not both".into()));
        }
        if raw.model.error != "iid" {
            return Err(Error::Config(format!(
                "error model `{}` is not supported (only `iid`)",
                raw.model.error
            )));
        }
        for name in raw.kernels.keys() {
            if !schema.columns.iter().any(|(c, _)| c == name) {
                return Err(Error::Config(format!("kernel assigned to undeclared column `{name}`")));
            }
        }

        let task = raw.model.task;
        let (covariates, terms): (Vec<String>, Vec<Vec<String>>) = match task {
            Task::Classification => {
                if raw.model.terms.is_some() || raw.model.sperner.is_some() {
                    return Err(Error::Config(
                        "classification models take no terms; every kernel column is a feature".into(),
                    ));
                }
                let names: Vec<String> = raw.kernels.keys().cloned().collect();
                if names.is_empty() {
                    return Err(Error::Config("classification needs at least one feature kernel".into()));
                }
                let terms = names.iter().map(|n| vec![n.clone()]).collect();
                (names, terms)
            }
            Task::Regression => {
                let terms = match (&raw.model.terms, &raw.model.sperner) {
                    (Some(t), None) => parse_terms(t).map_err(|e| Error::Config(e.to_string()))?,
                    (None, Some(s)) => {
                        let family = s
                            .iter()
                            .map(|t| parse_terms(t).map(|mut v| v.remove(0)))
                            .collect::<Result<Vec<_>>>()
                            .map_err(|e| Error::Config(e.to_string()))?;
                        family
                    }
                    _ => return Err(Error::Config("give exactly one of `terms` or `sperner`".into())),
                };
                let mut names: Vec<String> = Vec::new();
                for t in &terms {
                    for v in t {
                        if !names.contains(v) {
                            names.push(v.clone());
                        }
                    }
                }
                (names, terms)
            }
        };
        let mut kernels = Vec::with_capacity(covariates.len());
        for name in &covariates {
            let entry = raw
                .kernels
                .get(name)
                .ok_or_else(|| Error::Config(format!("term uses `{name}`, which has no kernel")))?;
            let ty = schema
                .columns
                .iter()
                .find(|(c, _)| c == name)
                .map(|(_, t)| *t)
                .ok_or_else(|| Error::Config(format!("term uses undeclared column `{name}`")))?;
            let spec = entry.to_spec(name)?;
            spec.validate(ty).map_err(|e| Error::Config(format!("column `{name}`: {e}")))?;
            kernels.push(spec);
        }
        let anova = if task == Task::Regression && raw.model.sperner.is_some() {
            AnovaSpec::from_sperner(covariates, &terms, raw.model.parameterization)
        } else {
            AnovaSpec::new(covariates, terms, raw.model.parameterization)
        }
        .map_err(|e| Error::Config(e.to_string()))?;
        let mut model = ModelSpec::new(anova, kernels).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(v) = raw.model.prior_mean {
            model = model.with_prior_mean(PriorMean::Fixed(v));
        }
        raw.fit.validate().map_err(|e| Error::Config(e.to_string()))?;

        let profile = raw.profile.map(|p| ProfileTarget {
            covariate: p.covariate,
            which: p.parameter,
            lower: p.lower,
            upper: p.upper,
            tol: p.tol.unwrap_or(1e-3),
        });
        if let Some(p) = &profile {
            if task == Task::Classification {
                return Err(Error::Config("profile search is only available for regression".into()));
            }
            let k = model
                .anova
                .covariates
                .iter()
                .position(|c| *c == p.covariate)
                .ok_or_else(|| Error::Config(format!("profile covariate `{}` is not in the model", p.covariate)))?;
            let ok = matches!(
                (&model.kernels[k].family, p.which),
                (KernelFamily::Fbm { .. }, Hyperparameter::Hurst) | (KernelFamily::SqExp { .. }, Hyperparameter::Sigma)
            );
            if !ok {
                return Err(Error::Config(format!(
                    "cannot profile {:?} on the `{}` kernel of `{}`",
                    p.which,
                    model.kernels[k].family.name(),
                    p.covariate
                )));
            }
        }

        Ok(Self {
            label: raw.model.label.unwrap_or_else(|| default_label.to_string()),
            task,
            train: resolve(&raw.data.train),
            test: raw.data.test.as_deref().map(resolve),
            train_rows: raw.data.train_rows,
            response: raw.data.response,
            schema,
            model,
            fit: raw.fit,
            profile,
            output_dir: raw.output.dir.as_deref().map(resolve),
        })
    }

    /// Schema restricted to the columns the model uses.
    pub fn model_schema(&self) -> Schema {
        let mut s = Schema::new();
        for (name, ty) in &self.schema.columns {
            if self.model.anova.covariates.contains(name) {
                s = s.with(name.clone(), *ty);
            }
        }
        s
    }
}
