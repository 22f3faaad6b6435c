//! Goodness-of-fit reports and model comparison.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{FitStatus, FittedModel};

/// Information criteria use `k = #λ + #error parameters` throughout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub label: String,
    pub log_likelihood: f64,
    pub n_lambda: usize,
    pub n_error: usize,
    pub n_rows: usize,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
    pub data_checksum: String,
    pub train_rmse: Option<f64>,
    pub test_rmse: Option<f64>,
    pub train_error_rate: Option<f64>,
    pub test_error_rate: Option<f64>,
}

impl ModelReport {
    pub fn new(label: impl Into<String>, log_likelihood: f64, n_lambda: usize, n_rows: usize) -> Self {
        let n_error = 1;
        let k = (n_lambda + n_error) as f64;
        Self {
            label: label.into(),
            log_likelihood,
            n_lambda,
            n_error,
            n_rows,
            aic: -2.0 * log_likelihood + 2.0 * k,
            bic: -2.0 * log_likelihood + k * (n_rows as f64).ln(),
            converged: true,
            data_checksum: String::new(),
            train_rmse: None,
            test_rmse: None,
            train_error_rate: None,
            test_error_rate: None,
        }
    }

    pub fn from_model(label: impl Into<String>, model: &FittedModel) -> Self {
        let mut r = Self::new(label, model.log_likelihood, model.lambda.len(), model.n());
        r.converged = model.status == FitStatus::Converged;
        r.data_checksum = response_checksum(&model.response);
        r
    }

    pub fn k_total(&self) -> usize {
        self.n_lambda + self.n_error
    }
}

/// Fingerprint of a response vector; models compared on the same rows share it
/// whatever covariates they use.
pub fn response_checksum(y: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in y {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub rank: usize,
    pub report: ModelReport,
    /// Highest likelihood among two or more models with the same parameter count.
    pub likelihood_selected: bool,
}

/// Ranks models by BIC (ascending; ties keep input order).
pub fn compare_models(reports: &[ModelReport]) -> Result<Vec<ComparisonRow>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Spec("no models to compare".into()))?;
    let mut labels = HashSet::new();
    for r in reports {
        if r.n_rows != first.n_rows {
            return Err(Error::Dimension(format!(
                "model `{}` was fitted on {} rows, `{}` on {}",
                r.label, r.n_rows, first.label, first.n_rows
            )));
        }
        if !r.data_checksum.is_empty() && !first.data_checksum.is_empty() && r.data_checksum != first.data_checksum {
            return Err(Error::Dimension(format!(
                "models `{}` and `{}` were fitted on different data",
                first.label, r.label
            )));
        }
        if !labels.insert(r.label.as_str()) {
            return Err(Error::Spec(format!("duplicate model label `{}`", r.label)));
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in reports.iter().enumerate() {
        groups.entry(r.k_total()).or_default().push(i);
    }
    let mut selected = vec![false; reports.len()];
    for members in groups.values().filter(|m| m.len() > 1) {
        let best = members
            .iter()
            .copied()
            .reduce(|a, b| {
                if reports[b].log_likelihood > reports[a].log_likelihood {
                    b
                } else {
                    a
                }
            })
            .expect("nonempty");
        selected[best] = true;
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| reports[a].bic.total_cmp(&reports[b].bic));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| ComparisonRow {
            rank: rank + 1,
            report: reports[i].clone(),
            likelihood_selected: selected[i],
        })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_comparison<W: Write>(rows: &[ComparisonRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "rank",
        "label",
        "log_likelihood",
        "n_lambda",
        "n_error",
        "n_rows",
        "aic",
        "bic",
        "converged",
        "likelihood_selected",
        "train_rmse",
        "test_rmse",
        "train_error_rate",
        "test_error_rate",
    ])?;
    for row in rows {
        let r = &row.report;
        w.write_record([
            row.rank.to_string(),
            r.label.clone(),
            r.log_likelihood.to_string(),
            r.n_lambda.to_string(),
            r.n_error.to_string(),
            r.n_rows.to_string(),
            r.aic.to_string(),
            r.bic.to_string(),
            r.converged.to_string(),
            row.likelihood_selected.to_string(),
            opt(r.train_rmse),
            opt(r.test_rmse),
            opt(r.train_error_rate),
            opt(r.test_error_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text table of a comparison.
pub fn format_table(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:>4}  {:<16} {:>14} {:>4} {:>12} {:>12}  {}\n",
        "rank", "model", "logL", "k", "AIC", "BIC", "flag"
    );
    for row in rows {
        let r = &row.report;
        out.push_str(&format!(
            "{:>4}  {:<16} {:>14.4} {:>4} {:>12.4} {:>12.4}  {}\n",
            row.rank,
            r.label,
            r.log_likelihood,
            r.k_total(),
            r.aic,
            r.bic,
            if row.likelihood_selected { "*" } else { "" }
        ));
    }
    out
}
