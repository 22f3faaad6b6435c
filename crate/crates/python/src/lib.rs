//! Python bindings.
//!
//! Columns are passed as a dict from name to values: a list of strings is
//! categorical, a list of numbers is a real scalar, a list of equal-length
//! number lists is a real vector, and `{"grid": [...], "samples": [[...]]}` is
//! a functional column. Kernels are a family name or a dict such as
//! `{"family": "fbm", "hurst": 0.3}`.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use iprior_core::anova::{expand_sperner as core_expand_sperner, parse_terms, AnovaSpec, Parameterization};
use iprior_core::applications::{build_classifier, Classifier as CoreClassifier, SavedModel};
use iprior_core::config::KernelEntry;
use iprior_core::data::{CovariateColumn, Covariates, Dataset};
use iprior_core::estimate::{em_fit, standard_errors, FitConfig, ModelSpec, PriorMean, StandardErrors};
use iprior_core::inference::{self, FitStatus, FittedModel};
use iprior_core::kernels::{self, KernelSpec};

pyo3::create_exception!(iprior, IpriorError, PyException);

fn err(e: iprior_core::Error) -> PyErr {
    IpriorError::new_err(e.to_string())
}

fn column(name: &str, values: &Bound<'_, PyAny>) -> PyResult<CovariateColumn> {
    if let Ok(d) = values.cast::<PyDict>() {
        let grid: Vec<f64> = d
            .get_item("grid")?
            .ok_or_else(|| PyValueError::new_err(format!("functional column `{name}` needs `grid`")))?
            .extract()?;
        let samples: Vec<Vec<f64>> = d
            .get_item("samples")?
            .ok_or_else(|| PyValueError::new_err(format!("functional column `{name}` needs `samples`")))?
            .extract()?;
        return CovariateColumn::functional(name, grid.clone(), rows_to_matrix(&samples, grid.len())?).map_err(err);
    }
    if let Ok(labels) = values.extract::<Vec<String>>() {
        return Ok(CovariateColumn::categorical(name, &labels));
    }
    if let Ok(x) = values.extract::<Vec<f64>>() {
        return Ok(CovariateColumn::real_scalar(name, &x));
    }
    if let Ok(rows) = values.extract::<Vec<Vec<f64>>>() {
        let p = rows.first().map_or(0, Vec::len);
        return Ok(CovariateColumn::real(name, rows_to_matrix(&rows, p)?));
    }
    Err(PyValueError::new_err(format!(
        "column `{name}`: expected strings, numbers, number rows or a functional dict"
    )))
}

fn rows_to_matrix(rows: &[Vec<f64>], p: usize) -> PyResult<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err(format!("rows must all have length {p}")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), p, rows.iter().flatten().copied()))
}

fn covariates(columns: &Bound<'_, PyDict>) -> PyResult<Covariates> {
    let cols = columns
        .iter()
        .map(|(k, v)| column(&k.extract::<String>()?, &v))
        .collect::<PyResult<Vec<_>>>()?;
    Covariates::new(cols).map_err(err)
}

fn kernel_spec(name: &str, kernel: &Bound<'_, PyAny>) -> PyResult<KernelSpec> {
    let entry = if let Ok(family) = kernel.extract::<String>() {
        KernelEntry {
            family,
            hurst: None,
            sigma: None,
            metric: None,
            centered: None,
        }
    } else {
        let d = kernel.cast::<PyDict>().map_err(|_| {
            PyValueError::new_err(format!("kernel for `{name}` must be a family name or a dict"))
        })?;
        let get = |k: &str| -> PyResult<Option<Bound<'_, PyAny>>> { d.get_item(k) };
        KernelEntry {
            family: get("family")?
                .ok_or_else(|| PyValueError::new_err(format!("kernel for `{name}` needs `family`")))?
                .extract()?,
            hurst: get("hurst")?.map(|v| v.extract()).transpose()?,
            sigma: get("sigma")?.map(|v| v.extract()).transpose()?,
            metric: get("metric")?.map(|v| v.extract()).transpose()?,
            centered: get("centered")?.map(|v| v.extract()).transpose()?,
        }
    };
    entry.to_spec(name).map_err(err)
}

fn parameterization(s: &str) -> PyResult<Parameterization> {
    match s {
        "parsimonious" => Ok(Parameterization::Parsimonious),
        "extended" => Ok(Parameterization::Extended),
        other => Err(PyValueError::new_err(format!("unknown parameterization `{other}`"))),
    }
}

fn fit_config(seed: u64, restarts: usize, max_iter: usize, rel_tol: f64) -> PyResult<FitConfig> {
    let cfg = FitConfig {
        seed,
        restarts,
        max_iter,
        rel_tol,
        ..FitConfig::default()
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn status_name(s: FitStatus) -> &'static str {
    match s {
        FitStatus::Converged => "converged",
        FitStatus::Stalled => "stalled",
        FitStatus::Fixed => "fixed",
    }
}

/// A fitted I-prior regression model.
#[pyclass(module = "iprior", frozen)]
pub struct Regression {
    model: FittedModel,
}

#[pymethods]
impl Regression {
    /// Fits `y` on the given columns. `terms` uses `+`-separated terms with
    /// `*` for interactions; `sperner=True` treats them as highest-order terms.
    #[staticmethod]
    #[pyo3(signature = (columns, y, terms, kernels, *, sperner = false, parameterization = "parsimonious",
                        prior_mean = None, seed = 0, restarts = 8, max_iter = 500, rel_tol = 1e-8))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        py: Python<'_>,
        columns: &Bound<'_, PyDict>,
        y: Vec<f64>,
        terms: &str,
        kernels: &Bound<'_, PyDict>,
        sperner: bool,
        parameterization: &str,
        prior_mean: Option<f64>,
        seed: u64,
        restarts: usize,
        max_iter: usize,
        rel_tol: f64,
    ) -> PyResult<Self> {
        let covs = covariates(columns)?;
        let parsed = parse_terms(terms).map_err(err)?;
        let mut names: Vec<String> = Vec::new();
        for v in parsed.iter().flatten() {
            if !names.contains(v) {
                names.push(v.clone());
            }
        }
        let specs = names
            .iter()
            .map(|n| {
                let k = kernels
                    .get_item(n)?
                    .ok_or_else(|| PyValueError::new_err(format!("no kernel for `{n}`")))?;
                kernel_spec(n, &k)
            })
            .collect::<PyResult<Vec<_>>>()?;
        let param = self::parameterization(parameterization)?;
        let anova = if sperner {
            AnovaSpec::from_sperner(names, &parsed, param)
        } else {
            AnovaSpec::new(names, parsed, param)
        }
        .map_err(err)?;
        let mut spec = ModelSpec::new(anova, specs).map_err(err)?;
        if let Some(m) = prior_mean {
            spec = spec.with_prior_mean(PriorMean::Fixed(m));
        }
        let cfg = fit_config(seed, restarts, max_iter, rel_tol)?;
        let data = Dataset::new(covs.columns, "y", y).map_err(err)?;
        let model = py.detach(|| em_fit(&data, &spec, &cfg)).map_err(err)?;
        Ok(Self { model })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        match SavedModel::from_json(text).map_err(err)? {
            SavedModel::Regression { model } => Ok(Self { model }),
            SavedModel::Classifier { .. } => Err(IpriorError::new_err("document holds a classifier")),
        }
    }

    fn to_json(&self) -> PyResult<String> {
        SavedModel::Regression {
            model: self.model.clone(),
        }
        .to_json()
        .map_err(err)
    }

    #[getter]
    fn lambda_(&self) -> Vec<f64> {
        self.model.lambda.clone()
    }

    #[getter]
    fn param_names(&self) -> Vec<String> {
        self.model.anova.param_names()
    }

    #[getter]
    fn psi(&self) -> f64 {
        self.model.psi()
    }

    #[getter]
    fn f0(&self) -> f64 {
        self.model.f0
    }

    #[getter]
    fn log_likelihood(&self) -> f64 {
        self.model.log_likelihood
    }

    #[getter]
    fn status(&self) -> &'static str {
        status_name(self.model.status)
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.model.iterations
    }

    /// Posterior mean and standard deviation at the training points.
    fn fitted(&self) -> (Vec<f64>, Vec<f64>) {
        let (m, s) = self.model.fitted();
        (m.as_slice().to_vec(), s.as_slice().to_vec())
    }

    /// Predictive mean and variance (including error variance) at new points.
    fn predict(&self, columns: &Bound<'_, PyDict>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let new = covariates(columns)?;
        let (m, v) = self.model.predictive(&new).map_err(err)?;
        Ok((m.as_slice().to_vec(), v.as_slice().to_vec()))
    }

    /// Posterior covariance of `f` at new points, as a list of rows.
    fn posterior_cov(&self, columns: &Bound<'_, PyDict>) -> PyResult<Vec<Vec<f64>>> {
        let new = covariates(columns)?;
        let (_, c) = self.model.posterior_f(&new).map_err(err)?;
        Ok(matrix_rows(&c))
    }

    /// Standard errors keyed by parameter name, or `None` when unavailable.
    fn standard_errors(&self) -> Option<Vec<(String, f64)>> {
        match standard_errors(&self.model) {
            StandardErrors::Available { names, values } => Some(names.into_iter().zip(values).collect()),
            StandardErrors::Unavailable { .. } => None,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Regression(terms={}, log_likelihood={:.4}, status={})",
            self.model.anova.param_names().join(" + "),
            self.model.log_likelihood,
            status_name(self.model.status)
        )
    }
}

/// A fitted one-vs-rest I-prior classifier.
#[pyclass(module = "iprior", frozen)]
pub struct Classifier {
    inner: CoreClassifier,
}

#[pymethods]
impl Classifier {
    #[staticmethod]
    #[pyo3(signature = (columns, labels, kernels, *, parameterization = "parsimonious",
                        seed = 0, restarts = 8, max_iter = 500, rel_tol = 1e-8))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        py: Python<'_>,
        columns: &Bound<'_, PyDict>,
        labels: Vec<String>,
        kernels: &Bound<'_, PyDict>,
        parameterization: &str,
        seed: u64,
        restarts: usize,
        max_iter: usize,
        rel_tol: f64,
    ) -> PyResult<Self> {
        let covs = covariates(columns)?;
        let ks = kernels
            .iter()
            .map(|(k, v)| {
                let name: String = k.extract()?;
                let spec = kernel_spec(&name, &v)?;
                Ok((name, spec))
            })
            .collect::<PyResult<Vec<_>>>()?;
        let param = self::parameterization(parameterization)?;
        let cfg = fit_config(seed, restarts, max_iter, rel_tol)?;
        let inner = py
            .detach(|| build_classifier(&covs, &labels, &ks, param, &cfg))
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        match SavedModel::from_json(text).map_err(err)? {
            SavedModel::Classifier { classifier } => Ok(Self { inner: classifier }),
            SavedModel::Regression { .. } => Err(IpriorError::new_err("document holds a regression model")),
        }
    }

    fn to_json(&self) -> PyResult<String> {
        SavedModel::Classifier {
            classifier: self.inner.clone(),
        }
        .to_json()
        .map_err(err)
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    #[getter]
    fn log_likelihood(&self) -> f64 {
        self.inner.model.log_likelihood
    }

    fn predict(&self, columns: &Bound<'_, PyDict>) -> PyResult<Vec<String>> {
        self.inner.predict(&covariates(columns)?).map_err(err)
    }

    /// Posterior class means, one row per observation.
    fn class_means(&self, columns: &Bound<'_, PyDict>) -> PyResult<Vec<Vec<f64>>> {
        let m = self.inner.class_means(&covariates(columns)?).map_err(err)?;
        Ok(matrix_rows(&m))
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Centered Gram matrix of one column.
#[pyfunction]
fn gram(values: &Bound<'_, PyAny>, kernel: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<f64>>> {
    let col = column("x", values)?;
    let spec = kernel_spec("x", kernel)?;
    let (h, _) = kernels::gram(&spec, &col).map_err(err)?;
    Ok(matrix_rows(&h))
}

/// Cross Gram between new points and training points, centered with the
/// training statistics.
#[pyfunction]
fn cross_gram(train: &Bound<'_, PyAny>, new: &Bound<'_, PyAny>, kernel: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<f64>>> {
    let t = column("x", train)?;
    let n = column("x", new)?;
    let spec = kernel_spec("x", kernel)?;
    let (_, trained) = kernels::gram(&spec, &t).map_err(err)?;
    Ok(matrix_rows(&kernels::cross_gram(&trained, &n).map_err(err)?))
}

/// Log marginal likelihood of `y` under kernel matrix `h`.
#[pyfunction]
fn log_marginal_likelihood(h: Vec<Vec<f64>>, psi: f64, y: Vec<f64>, f0: f64) -> PyResult<f64> {
    let h = rows_to_matrix(&h, y.len())?;
    inference::log_marginal_likelihood(&h, psi, &DVector::from_vec(y), f0).map_err(err)
}

/// All sub-terms implied by a family of highest-order terms, e.g.
/// `["x*g"]` gives `[["x"], ["g"], ["x", "g"]]`.
#[pyfunction]
fn expand_sperner(terms: Vec<String>) -> PyResult<Vec<Vec<String>>> {
    let family: Vec<Vec<String>> = terms
        .iter()
        .map(|t| parse_terms(t).map(|mut v| v.remove(0)))
        .collect::<iprior_core::Result<_>>()
        .map_err(err)?;
    let mut names: Vec<String> = Vec::new();
    for v in family.iter().flatten() {
        if !names.contains(v) {
            names.push(v.clone());
        }
    }
    let idx: Vec<Vec<usize>> = family
        .iter()
        .map(|t| t.iter().map(|v| names.iter().position(|n| n == v).expect("collected")).collect())
        .collect();
    let expanded = core_expand_sperner(&idx).map_err(err)?;
    Ok(expanded
        .into_iter()
        .map(|t| t.into_iter().map(|i| names[i].clone()).collect())
        .collect())
}

#[pymodule]
fn iprior(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IpriorError", m.py().get_type::<IpriorError>())?;
    m.add_class::<Regression>()?;
    m.add_class::<Classifier>()?;
    m.add_function(wrap_pyfunction!(gram, m)?)?;
    m.add_function(wrap_pyfunction!(cross_gram, m)?)?;
    m.add_function(wrap_pyfunction!(log_marginal_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(expand_sperner, m)?)?;
    Ok(())
}
