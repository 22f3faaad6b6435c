//! Datasets with heterogeneous covariates, and the inner products each kernel
//! family needs.
//!
//! Three covariate kinds are supported: categorical labels, real vectors and
//! functional curves sampled on a shared ascending grid. Every metric reduces
//! to a linear feature map followed by the Euclidean inner product, so
//! distances and inner products stay mutually consistent:
//!
//! * `Euclidean`: identity features.
//! * `Mahalanobis`: features `L⁻¹x` where `S = LLᵀ`.
//! * `SobolevCurve`: per-interval finite differences `Δx / sqrt(Δt)`, i.e. the
//!   trapezoid rule applied to the squared finite-difference derivative,
//!   which is the Brownian-motion RKHS norm of the piecewise-linear curve.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Column type as declared in a schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    Categorical,
    Real,
    Functional,
}

/// Ordered map from column name to declared type.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<(String, ColumnType)>,
}

impl Schema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, ty: ColumnType) -> Self {
        self.columns.push((name.into(), ty));
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnValues {
    /// Labels interned in order of first appearance.
    Categorical { levels: Vec<String>, codes: Vec<usize> },
    /// One row per observation.
    Real { data: DMatrix<f64> },
    /// One row per observation, one column per grid point.
    Functional { grid: Vec<f64>, samples: DMatrix<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateColumn {
    pub name: String,
    pub values: ColumnValues,
}

impl CovariateColumn {
    pub fn categorical<S: AsRef<str>>(name: impl Into<String>, labels: &[S]) -> Self {
        let mut levels: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let codes = labels
            .iter()
            .map(|l| {
                let l = l.as_ref();
                *index.entry(l.to_string()).or_insert_with(|| {
                    levels.push(l.to_string());
                    levels.len() - 1
                })
            })
            .collect();
        Self {
            name: name.into(),
            values: ColumnValues::Categorical { levels, codes },
        }
    }

    pub fn real(name: impl Into<String>, data: DMatrix<f64>) -> Self {
        Self {
            name: name.into(),
            values: ColumnValues::Real { data },
        }
    }

    pub fn real_scalar(name: impl Into<String>, values: &[f64]) -> Self {
        Self::real(name, DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn functional(
        name: impl Into<String>,
        grid: Vec<f64>,
        samples: DMatrix<f64>,
    ) -> Result<Self> {
        let name = name.into();
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::GridNotAscending(name));
        }
        if samples.ncols() != grid.len() {
            return Err(Error::Dimension(format!(
                "functional column `{name}` has {} samples per curve but {} grid points",
                samples.ncols(),
                grid.len()
            )));
        }
        Ok(Self {
            name,
            values: ColumnValues::Functional { grid, samples },
        })
    }

    pub fn len(&self) -> usize {
        match &self.values {
            ColumnValues::Categorical { codes, .. } => codes.len(),
            ColumnValues::Real { data } => data.nrows(),
            ColumnValues::Functional { samples, .. } => samples.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column_type(&self) -> ColumnType {
        match &self.values {
            ColumnValues::Categorical { .. } => ColumnType::Categorical,
            ColumnValues::Real { .. } => ColumnType::Real,
            ColumnValues::Functional { .. } => ColumnType::Functional,
        }
    }

    /// Label of observation `i` for categorical columns.
    pub fn label(&self, i: usize) -> Option<&str> {
        match &self.values {
            ColumnValues::Categorical { levels, codes } => Some(levels[codes[i]].as_str()),
            _ => None,
        }
    }

    pub fn labels(&self) -> Option<Vec<&str>> {
        match &self.values {
            ColumnValues::Categorical { levels, codes } => {
                Some(codes.iter().map(|&c| levels[c].as_str()).collect())
            }
            _ => None,
        }
    }

    /// Numeric payload as an `n × d` matrix (real vectors and curves).
    pub fn numeric(&self) -> Option<&DMatrix<f64>> {
        match &self.values {
            ColumnValues::Real { data } => Some(data),
            ColumnValues::Functional { samples, .. } => Some(samples),
            ColumnValues::Categorical { .. } => None,
        }
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let values = match &self.values {
            ColumnValues::Categorical { levels, codes } => ColumnValues::Categorical {
                levels: levels.clone(),
                codes: rows.iter().map(|&i| codes[i]).collect(),
            },
            ColumnValues::Real { data } => ColumnValues::Real {
                data: data.select_rows(rows),
            },
            ColumnValues::Functional { grid, samples } => ColumnValues::Functional {
                grid: grid.clone(),
                samples: samples.select_rows(rows),
            },
        };
        Self {
            name: self.name.clone(),
            values,
        }
    }

    fn headers(&self) -> Vec<String> {
        match &self.values {
            ColumnValues::Categorical { .. } => vec![self.name.clone()],
            ColumnValues::Real { data } if data.ncols() == 1 => vec![self.name.clone()],
            ColumnValues::Real { data } => (1..=data.ncols())
                .map(|k| format!("{}:{k}", self.name))
                .collect(),
            ColumnValues::Functional { grid, .. } => {
                grid.iter().map(|g| format!("{}:{g}", self.name)).collect()
            }
        }
    }

    fn cells(&self, i: usize, out: &mut Vec<String>) {
        match &self.values {
            ColumnValues::Categorical { levels, codes } => out.push(levels[codes[i]].clone()),
            ColumnValues::Real { data } => out.extend(data.row(i).iter().map(|v| v.to_string())),
            ColumnValues::Functional { samples, .. } => {
                out.extend(samples.row(i).iter().map(|v| v.to_string()))
            }
        }
    }
}

/// Covariate columns without a response (e.g. points to predict at).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub columns: Vec<CovariateColumn>,
    pub n: usize,
}

impl Covariates {
    pub fn new(columns: Vec<CovariateColumn>) -> Result<Self> {
        let n = columns.first().map_or(0, |c| c.len());
        if let Some(c) = columns.iter().find(|c| c.len() != n) {
            return Err(Error::InvalidData(format!(
                "column `{}` has {} rows, expected {n}",
                c.name,
                c.len()
            )));
        }
        Ok(Self { columns, n })
    }

    pub fn get(&self, name: &str) -> Option<&CovariateColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            n: rows.len(),
        }
    }
}

/// Observations with typed covariates and a real response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub covariates: Covariates,
    pub response_name: String,
    pub response: Vec<f64>,
}

impl Dataset {
    pub fn new(
        columns: Vec<CovariateColumn>,
        response_name: impl Into<String>,
        response: Vec<f64>,
    ) -> Result<Self> {
        let covariates = if columns.is_empty() {
            Covariates {
                columns,
                n: response.len(),
            }
        } else {
            Covariates::new(columns)?
        };
        if covariates.n != response.len() {
            return Err(Error::InvalidData(format!(
                "response has {} values but covariates have {} rows",
                response.len(),
                covariates.n
            )));
        }
        if response.len() < 2 {
            return Err(Error::InvalidData(
                "a dataset needs at least 2 observations".into(),
            ));
        }
        if response.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("response contains non-finite values".into()));
        }
        Ok(Self {
            covariates,
            response_name: response_name.into(),
            response,
        })
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn column(&self, name: &str) -> Option<&CovariateColumn> {
        self.covariates.get(name)
    }

    pub fn response_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.response)
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.covariates.select(rows).columns,
            self.response_name.clone(),
            rows.iter().map(|&i| self.response[i]).collect(),
        )
    }

    /// First `k` rows and the remainder.
    pub fn split_at(&self, k: usize) -> Result<(Self, Self)> {
        let head: Vec<usize> = (0..k).collect();
        let tail: Vec<usize> = (k..self.n()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_csv(&self.covariates, Some((&self.response_name, &self.response)), writer)
    }

    /// SHA-256 of the canonical CSV serialization.
    pub fn checksum(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        let digest = Sha256::digest(&buf);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn write_csv<W: Write>(
    covariates: &Covariates,
    response: Option<(&str, &[f64])>,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = covariates.columns.iter().flat_map(|c| c.headers()).collect();
    if let Some((name, _)) = response {
        header.push(name.to_string());
    }
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..covariates.n {
        row.clear();
        for c in &covariates.columns {
            c.cells(i, &mut row);
        }
        if let Some((_, y)) = response {
            row.push(y[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table<R: Read>(reader: R) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::RaggedRow {
                row: i + 1,
                expected: header.len(),
                found: rec.len(),
            });
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(RawTable { header, rows })
}

fn parse_cell(table: &RawTable, row: usize, col: usize) -> Result<f64> {
    let cell = &table.rows[row][col];
    cell.parse::<f64>().map_err(|_| Error::NonNumeric {
        column: table.header[col].clone(),
        row: row + 1,
        value: cell.clone(),
    })
}

/// Grid value encoded in a functional-column header: `name:g` or `name<g>`.
fn grid_point(header: &str, name: &str) -> Option<f64> {
    let rest = header.strip_prefix(name)?;
    let rest = rest.strip_prefix(':').unwrap_or(rest);
    rest.parse::<f64>().ok()
}

fn extract_column(table: &RawTable, name: &str, ty: ColumnType) -> Result<CovariateColumn> {
    let n = table.rows.len();
    let exact = table.header.iter().position(|h| h == name);
    match ty {
        ColumnType::Categorical => {
            let j = exact.ok_or_else(|| Error::MissingColumn(name.to_string()))?;
            let labels: Vec<&str> = table.rows.iter().map(|r| r[j].as_str()).collect();
            Ok(CovariateColumn::categorical(name, &labels))
        }
        ColumnType::Real => {
            let cols: Vec<usize> = match exact {
                Some(j) => vec![j],
                None => {
                    let prefix = format!("{name}:");
                    table
                        .header
                        .iter()
                        .enumerate()
                        .filter(|(_, h)| h.starts_with(&prefix))
                        .map(|(j, _)| j)
                        .collect()
                }
            };
            if cols.is_empty() {
                return Err(Error::MissingColumn(name.to_string()));
            }
            let mut data = DMatrix::zeros(n, cols.len());
            for i in 0..n {
                for (k, &j) in cols.iter().enumerate() {
                    data[(i, k)] = parse_cell(table, i, j)?;
                }
            }
            Ok(CovariateColumn::real(name, data))
        }
        ColumnType::Functional => {
            let (cols, grid): (Vec<usize>, Vec<f64>) = table
                .header
                .iter()
                .enumerate()
                .filter_map(|(j, h)| grid_point(h, name).map(|g| (j, g)))
                .unzip();
            if cols.is_empty() {
                return Err(Error::MissingColumn(name.to_string()));
            }
            if cols.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(Error::InvalidData(format!(
                    "functional column `{name}` must be a contiguous block of columns"
                )));
            }
            let mut samples = DMatrix::zeros(n, cols.len());
            for i in 0..n {
                for (k, &j) in cols.iter().enumerate() {
                    samples[(i, k)] = parse_cell(table, i, j)?;
                }
            }
            CovariateColumn::functional(name, grid, samples)
        }
    }
}

fn extract_covariates(table: &RawTable, schema: &Schema) -> Result<Covariates> {
    let columns = schema
        .columns
        .iter()
        .map(|(name, ty)| extract_column(table, name, *ty))
        .collect::<Result<Vec<_>>>()?;
    Ok(Covariates {
        columns,
        n: table.rows.len(),
    })
}

fn extract_response(table: &RawTable, response: &str) -> Result<Vec<f64>> {
    let j = table
        .header
        .iter()
        .position(|h| h == response)
        .ok_or_else(|| Error::MissingColumn(response.to_string()))?;
    (0..table.rows.len()).map(|i| parse_cell(table, i, j)).collect()
}

pub fn read_dataset<R: Read>(reader: R, schema: &Schema, response: &str) -> Result<Dataset> {
    let table = read_table(reader)?;
    let covariates = extract_covariates(&table, schema)?;
    let y = extract_response(&table, response)?;
    Dataset::new(covariates.columns, response, y)
}

pub fn read_covariates<R: Read>(reader: R, schema: &Schema) -> Result<Covariates> {
    let table = read_table(reader)?;
    extract_covariates(&table, schema)
}

/// Loads a CSV with a header row into a validated [`Dataset`].
pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema, response: &str) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?, schema, response)
}

/// Loads covariates only; the file may have zero data rows.
pub fn load_covariates(path: impl AsRef<Path>, schema: &Schema) -> Result<Covariates> {
    read_covariates(std::fs::File::open(path)?, schema)
}

/// Loads a categorical label column (e.g. class labels) alongside covariates.
pub fn load_labels(path: impl AsRef<Path>, name: &str) -> Result<Vec<String>> {
    let table = read_table(std::fs::File::open(path)?)?;
    let j = table
        .header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    Ok(table.rows.iter().map(|r| r[j].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    /// `covariance: None` uses the sample covariance of the training column.
    Mahalanobis {
        #[serde(default)]
        covariance: Option<DMatrix<f64>>,
    },
    SobolevCurve,
}

impl Metric {
    /// Euclidean for real vectors, the Sobolev curve norm for curves.
    pub fn default_for(ty: ColumnType) -> Option<Metric> {
        match ty {
            ColumnType::Real => Some(Metric::Euclidean),
            ColumnType::Functional => Some(Metric::SobolevCurve),
            ColumnType::Categorical => None,
        }
    }
}

const RIDGE_CONDITION_LIMIT: f64 = 1e12;

/// Linear map taking raw payloads to features whose Euclidean inner product is
/// the metric's inner product. Fitted once on training data, then frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "snake_case")]
pub enum FeatureMap {
    Identity { dim: usize },
    /// Lower Cholesky factor `L` of the covariance `S`.
    Whiten { chol: DMatrix<f64> },
    CurveDerivative { grid: Vec<f64> },
}

fn sample_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mean = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    centered.transpose() * centered / ((n.max(2) - 1) as f64)
}

fn condition_number(s: &DMatrix<f64>) -> f64 {
    let eig = s.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

impl FeatureMap {
    pub fn fit(col: &CovariateColumn, metric: &Metric) -> Result<Self> {
        match (metric, &col.values) {
            (_, ColumnValues::Categorical { .. }) => Err(Error::Spec(format!(
                "column `{}` is categorical and has no metric",
                col.name
            ))),
            (Metric::Euclidean, ColumnValues::Real { data }) => {
                Ok(FeatureMap::Identity { dim: data.ncols() })
            }
            (Metric::Euclidean, ColumnValues::Functional { samples, .. }) => {
                Ok(FeatureMap::Identity {
                    dim: samples.ncols(),
                })
            }
            (Metric::Mahalanobis { covariance }, ColumnValues::Real { data }) => {
                let d = data.ncols();
                let chol = match covariance {
                    Some(s) => {
                        if s.nrows() != d || s.ncols() != d {
                            return Err(Error::Dimension(format!(
                                "covariance is {}x{}, column `{}` has dimension {d}",
                                s.nrows(),
                                s.ncols(),
                                col.name
                            )));
                        }
                        s.clone().cholesky().ok_or(Error::SingularCovariance)?
                    }
                    None => {
                        let mut s = sample_covariance(data);
                        let ill = s.clone().cholesky().is_none()
                            || condition_number(&s) > RIDGE_CONDITION_LIMIT;
                        if ill {
                            let ridge = 1e-8 * s.trace();
                            log::warn!(
                                "sample covariance of `{}` is ill-conditioned; adding ridge {ridge:e}",
                                col.name
                            );
                            for i in 0..d {
                                s[(i, i)] += ridge;
                            }
                        }
                        s.cholesky().ok_or(Error::SingularCovariance)?
                    }
                };
                Ok(FeatureMap::Whiten { chol: chol.l() })
            }
            (Metric::SobolevCurve, ColumnValues::Functional { grid, .. }) => {
                if grid.len() < 2 {
                    return Err(Error::Spec(format!(
                        "sobolev_curve metric needs at least 2 grid points (column `{}`)",
                        col.name
                    )));
                }
                Ok(FeatureMap::CurveDerivative { grid: grid.clone() })
            }
            (Metric::Mahalanobis { .. }, _) => Err(Error::Spec(format!(
                "mahalanobis metric requires a real-vector column (`{}`)",
                col.name
            ))),
            (Metric::SobolevCurve, _) => Err(Error::Spec(format!(
                "sobolev_curve metric requires a functional column (`{}`)",
                col.name
            ))),
        }
    }

    /// Feature matrix (one row per observation) for a column compatible with
    /// the one the map was fitted on.
    pub fn apply(&self, col: &CovariateColumn) -> Result<DMatrix<f64>> {
        let x = col.numeric().ok_or_else(|| {
            Error::Dimension(format!("column `{}` is not numeric", col.name))
        })?;
        match self {
            FeatureMap::Identity { dim } => {
                check_width(col, x, *dim)?;
                Ok(x.clone())
            }
            FeatureMap::Whiten { chol } => {
                check_width(col, x, chol.nrows())?;
                let xt = x.transpose();
                let z = chol
                    .solve_lower_triangular(&xt)
                    .ok_or(Error::SingularCovariance)?;
                Ok(z.transpose())
            }
            FeatureMap::CurveDerivative { grid } => {
                match &col.values {
                    ColumnValues::Functional { grid: g, .. } if g == grid => {}
                    _ => {
                        return Err(Error::Dimension(format!(
                            "column `{}` is not sampled on the training grid",
                            col.name
                        )))
                    }
                }
                let m = grid.len();
                let scale: Vec<f64> = grid.windows(2).map(|w| (w[1] - w[0]).sqrt()).collect();
                Ok(DMatrix::from_fn(x.nrows(), m - 1, |i, k| {
                    (x[(i, k + 1)] - x[(i, k)]) / scale[k]
                }))
            }
        }
    }
}

fn check_width(col: &CovariateColumn, x: &DMatrix<f64>, dim: usize) -> Result<()> {
    if x.ncols() != dim {
        return Err(Error::Dimension(format!(
            "column `{}` has dimension {}, expected {dim}",
            col.name,
            x.ncols()
        )));
    }
    Ok(())
}

/// `‖a_i − b_j‖` for feature rows.
pub(crate) fn feature_distances(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        a.row(i)
            .iter()
            .zip(b.row(j).iter())
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt()
    })
}

pub fn pairwise_distance(col: &CovariateColumn, metric: &Metric) -> Result<DMatrix<f64>> {
    let z = FeatureMap::fit(col, metric)?.apply(col)?;
    let mut d = feature_distances(&z, &z);
    d.fill_diagonal(0.0);
    Ok(d)
}

pub fn inner_product_matrix(col: &CovariateColumn, metric: &Metric) -> Result<DMatrix<f64>> {
    let z = FeatureMap::fit(col, metric)?.apply(col)?;
    Ok(&z * z.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curves(grid: Vec<f64>, rows: &[&[f64]]) -> CovariateColumn {
        let m = grid.len();
        let samples = DMatrix::from_fn(rows.len(), m, |i, k| rows[i][k]);
        CovariateColumn::functional("x", grid, samples).unwrap()
    }

    #[test]
    fn minimal_categorical_parse() {
        let csv = "school,y\nA,1\nB,2\nA,3\n";
        let schema = Schema::new().with("school", ColumnType::Categorical);
        let ds = read_dataset(csv.as_bytes(), &schema, "y").unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.covariates.columns.len(), 1);
        assert_eq!(ds.column("school").unwrap().labels().unwrap(), vec!["A", "B", "A"]);
    }

    #[test]
    fn ragged_row_is_rejected() {
        let header: Vec<String> = (0..9).map(|k| format!("c{k}")).chain(["y".into()]).collect();
        let row: Vec<String> = (0..9).map(|k| k.to_string()).collect();
        let csv = format!("{}\n{}\n", header.join(","), row.join(","));
        let schema = Schema::new().with("c0", ColumnType::Real);
        match read_dataset(csv.as_bytes(), &schema, "y") {
            Err(Error::RaggedRow {
                expected: 10,
                found: 9,
                ..
            }) => {}
            other => panic!("expected ragged-row error, got {other:?}"),
        }
    }

    #[test]
    fn missing_and_non_numeric_columns() {
        let csv = "x,y\n1,2\nfoo,3\n";
        let schema = Schema::new().with("x", ColumnType::Real);
        assert!(matches!(
            read_dataset(csv.as_bytes(), &schema, "y"),
            Err(Error::NonNumeric { row: 2, .. })
        ));
        let schema = Schema::new().with("z", ColumnType::Real);
        assert!(matches!(
            read_dataset("x,y\n1,2\n3,4\n".as_bytes(), &schema, "y"),
            Err(Error::MissingColumn(c)) if c == "z"
        ));
    }

    #[test]
    fn functional_headers_both_styles() {
        let csv = "t1,t2,t3,fat\n1,2,3,10\n2,2,2,11\n";
        let schema = Schema::new().with("t", ColumnType::Functional);
        let ds = read_dataset(csv.as_bytes(), &schema, "fat").unwrap();
        match &ds.column("t").unwrap().values {
            ColumnValues::Functional { grid, samples } => {
                assert_eq!(grid, &vec![1.0, 2.0, 3.0]);
                assert_eq!(samples[(1, 0)], 2.0);
            }
            _ => panic!(),
        }
        let csv = "a:0,a:0.5,a:1,y\n0,1,2,1\n0,0,0,2\n";
        let schema = Schema::new().with("a", ColumnType::Functional);
        assert!(read_dataset(csv.as_bytes(), &schema, "y").is_ok());
        let csv = "a:1,a:0.5,y\n0,1,1\n0,0,2\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &schema, "y"),
            Err(Error::GridNotAscending(_))
        ));
    }

    #[test]
    fn sobolev_distances_and_inner_products() {
        let c = curves(vec![0.0, 1.0], &[&[0.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]]);
        let d = pairwise_distance(&c, &Metric::SobolevCurve).unwrap();
        assert!((d[(0, 1)] - 1.0).abs() < 1e-15);
        assert_eq!(d[(0, 2)], 0.0);

        let c = curves(vec![0.0, 0.5, 1.0], &[&[0.0, 0.5, 1.0], &[0.0, 1.0, 2.0]]);
        let g = inner_product_matrix(&c, &Metric::SobolevCurve).unwrap();
        assert!((g[(0, 1)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn euclidean_examples() {
        let c = CovariateColumn::real("x", DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 4.0]));
        assert!((pairwise_distance(&c, &Metric::Euclidean).unwrap()[(0, 1)] - 5.0).abs() < 1e-15);
        let c = CovariateColumn::real("x", DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(inner_product_matrix(&c, &Metric::Euclidean).unwrap()[(0, 1)], 11.0);
    }

    #[test]
    fn mahalanobis_errors_and_ridge() {
        let c = CovariateColumn::real("x", DMatrix::from_row_slice(3, 2, &[1., 2., 2., 4., 3., 6.]));
        let singular = Metric::Mahalanobis {
            covariance: Some(DMatrix::from_row_slice(2, 2, &[1., 1., 1., 1.])),
        };
        assert!(matches!(
            pairwise_distance(&c, &singular),
            Err(Error::SingularCovariance)
        ));
        // collinear sample covariance gets a ridge instead of failing
        let d = pairwise_distance(&c, &Metric::Mahalanobis { covariance: None }).unwrap();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(matches!(
            pairwise_distance(&c, &Metric::SobolevCurve),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn mahalanobis_matches_explicit_inverse() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 0.5, -1., 2., 0.3, -0.7, 2., 1.]);
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let c = CovariateColumn::real("x", x.clone());
        let g = inner_product_matrix(&c, &Metric::Mahalanobis { covariance: Some(s.clone()) })
            .unwrap();
        let expected = &x * s.try_inverse().unwrap() * x.transpose();
        assert!((g - expected).amax() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 1.0 / 3.0, -2.5, 1e-9, 7.0, 8.0]);
        let f = CovariateColumn::functional(
            "f",
            vec![0.0, 0.25, 1.0],
            DMatrix::from_row_slice(3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.25]),
        )
        .unwrap();
        let ds = Dataset::new(
            vec![
                CovariateColumn::categorical("g", &["a", "b", "a"]),
                CovariateColumn::real("x", x),
                f,
            ],
            "y",
            vec![1.5, -2.0, std::f64::consts::PI],
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let schema = Schema::new()
            .with("g", ColumnType::Categorical)
            .with("x", ColumnType::Real)
            .with("f", ColumnType::Functional);
        let back = read_dataset(buf.as_slice(), &schema, "y").unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dataset_needs_two_rows() {
        assert!(Dataset::new(vec![CovariateColumn::real_scalar("x", &[1.0])], "y", vec![1.0]).is_err());
    }
}
