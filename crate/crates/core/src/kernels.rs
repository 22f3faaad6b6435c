//! Reproducing kernels and their sample-centered Gram matrices.
//!
//! A kernel is "trained" on a column: the training points, the frozen feature
//! map and the centering statistics are kept so that cross Grams between new
//! points and the training sample are centered exactly like the training Gram.
//! Centering is `h(x,x') − m(x) − m(x') + g` with `m(x) = n⁻¹ Σ_j h(x, x_j)` and
//! `g = n⁻² Σ_ij h(x_i, x_j)`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{feature_distances, ColumnType, ColumnValues, CovariateColumn, FeatureMap, Metric};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelFamily {
    Constant,
    /// Kronecker delta over a finite set.
    CanonicalFinite,
    /// `δ(x,x')/p(x) − 1` over the empirical label distribution.
    Pearson,
    /// Inner product of the (metric-mapped) covariate.
    Canonical,
    /// Inner product under the inverse covariance.
    Mahalanobis,
    /// Fractional Brownian motion with Hurst coefficient in (0, 1).
    Fbm { hurst: f64 },
    /// `exp(−‖x−x'‖²/(2σ²))`.
    SqExp { sigma: f64 },
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Constant => "constant",
            KernelFamily::CanonicalFinite => "canonical_finite",
            KernelFamily::Pearson => "pearson",
            KernelFamily::Canonical => "canonical",
            KernelFamily::Mahalanobis => "mahalanobis",
            KernelFamily::Fbm { .. } => "fbm",
            KernelFamily::SqExp { .. } => "sqexp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(flatten)]
    pub family: KernelFamily,
    #[serde(default)]
    pub metric: Option<Metric>,
    pub centered: bool,
}

impl KernelSpec {
    /// Centered unless the family is `Constant`.
    pub fn new(family: KernelFamily) -> Self {
        let centered = family != KernelFamily::Constant;
        Self {
            family,
            metric: None,
            centered,
        }
    }

    pub fn pearson() -> Self {
        Self::new(KernelFamily::Pearson)
    }

    pub fn canonical() -> Self {
        Self::new(KernelFamily::Canonical)
    }

    pub fn fbm(hurst: f64) -> Self {
        Self::new(KernelFamily::Fbm { hurst })
    }

    pub fn sqexp(sigma: f64) -> Self {
        Self::new(KernelFamily::SqExp { sigma })
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = Some(metric);
        self
    }

    pub fn uncentered(mut self) -> Self {
        self.centered = false;
        self
    }

    /// Checks hyperparameter ranges and compatibility with a column type.
    pub fn validate(&self, ty: ColumnType) -> Result<()> {
        let family = self.family.name();
        match self.family {
            KernelFamily::Fbm { hurst } if !(hurst > 0.0 && hurst < 1.0) => {
                return Err(Error::Spec(format!("fbm Hurst coefficient {hurst} not in (0,1)")))
            }
            KernelFamily::SqExp { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                return Err(Error::Spec(format!("sqexp sigma {sigma} must be positive")))
            }
            KernelFamily::Constant if self.centered => {
                return Err(Error::Spec("the constant kernel cannot be centered".into()))
            }
            _ => {}
        }
        let ok = match self.family {
            KernelFamily::Constant => true,
            KernelFamily::CanonicalFinite | KernelFamily::Pearson => ty == ColumnType::Categorical,
            KernelFamily::Mahalanobis => {
                ty == ColumnType::Real
                    && matches!(self.metric, None | Some(Metric::Mahalanobis { .. }))
            }
            KernelFamily::Canonical | KernelFamily::Fbm { .. } | KernelFamily::SqExp { .. } => {
                ty != ColumnType::Categorical
            }
        };
        if !ok {
            return Err(Error::Spec(format!(
                "kernel `{family}` is not compatible with a {ty:?} column"
            )));
        }
        if self.metric.is_some() && ty == ColumnType::Categorical {
            return Err(Error::Spec(format!("kernel `{family}` on a categorical column takes no metric")));
        }
        Ok(())
    }

    fn resolved_metric(&self, ty: ColumnType) -> Option<Metric> {
        match (&self.family, &self.metric) {
            (KernelFamily::Constant, _) => None,
            (KernelFamily::Mahalanobis, None) => Some(Metric::Mahalanobis { covariance: None }),
            (_, Some(m)) => Some(m.clone()),
            (_, None) => Metric::default_for(ty),
        }
    }
}

/// Statistics frozen at training time and reused for every cross Gram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenteringStats {
    /// `m_i = n⁻¹ Σ_j h(x_i, x_j)`
    pub row_means: Vec<f64>,
    /// `g = n⁻² Σ_ij h(x_i, x_j)`
    pub grand_mean: f64,
    /// Empirical label distribution for categorical families.
    #[serde(default)]
    pub label_distribution: Option<Vec<(String, f64)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "snake_case")]
enum Encoding {
    Labels { levels: Vec<String>, probs: Vec<f64> },
    Features { map: FeatureMap },
    Count,
}

#[derive(Clone, Debug)]
enum Encoded {
    /// Index into the training levels; `None` for labels unseen in training.
    Labels(Vec<Option<usize>>),
    Features(DMatrix<f64>),
    Count(usize),
}

impl Encoded {
    fn len(&self) -> usize {
        match self {
            Encoded::Labels(l) => l.len(),
            Encoded::Features(z) => z.nrows(),
            Encoded::Count(n) => *n,
        }
    }
}

/// A kernel fitted to a training column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedKernel {
    pub column: String,
    pub spec: KernelSpec,
    pub column_type: ColumnType,
    encoding: Encoding,
    /// Training points, kept so cross Grams can be formed after reload.
    train: CovariateColumn,
    pub stats: CenteringStats,
}

fn row_means(k: &DMatrix<f64>) -> Vec<f64> {
    let n = k.ncols().max(1) as f64;
    k.row_iter().map(|r| r.sum() / n).collect()
}

impl TrainedKernel {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn training_column(&self) -> &CovariateColumn {
        &self.train
    }

    fn encode(&self, col: &CovariateColumn) -> Result<Encoded> {
        if col.column_type() != self.column_type {
            return Err(Error::Dimension(format!(
                "column `{}` is {:?}, kernel was trained on {:?}",
                col.name,
                col.column_type(),
                self.column_type
            )));
        }
        match &self.encoding {
            Encoding::Count => Ok(Encoded::Count(col.len())),
            Encoding::Features { map } => Ok(Encoded::Features(map.apply(col)?)),
            Encoding::Labels { levels, .. } => {
                let index: HashMap<&str, usize> =
                    levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
                let labels = col.labels().expect("categorical column");
                Ok(Encoded::Labels(
                    labels.iter().map(|l| index.get(l).copied()).collect(),
                ))
            }
        }
    }

    fn probs(&self) -> &[f64] {
        match &self.encoding {
            Encoding::Labels { probs, .. } => probs,
            _ => &[],
        }
    }

    fn raw_block(&self, a: &Encoded, b: &Encoded) -> DMatrix<f64> {
        let (na, nb) = (a.len(), b.len());
        match (&self.spec.family, a, b) {
            (KernelFamily::Constant, _, _) => DMatrix::from_element(na, nb, 1.0),
            (KernelFamily::CanonicalFinite, Encoded::Labels(la), Encoded::Labels(lb)) => {
                DMatrix::from_fn(na, nb, |i, j| match (la[i], lb[j]) {
                    (Some(u), Some(v)) if u == v => 1.0,
                    _ => 0.0,
                })
            }
            (KernelFamily::Pearson, Encoded::Labels(la), Encoded::Labels(lb)) => {
                let p = self.probs();
                DMatrix::from_fn(na, nb, |i, j| match (la[i], lb[j]) {
                    (Some(u), Some(v)) if p[u] > 0.0 && p[v] > 0.0 => {
                        if u == v {
                            1.0 / p[u] - 1.0
                        } else {
                            -1.0
                        }
                    }
                    _ => 0.0,
                })
            }
            (KernelFamily::Canonical | KernelFamily::Mahalanobis, Encoded::Features(za), Encoded::Features(zb)) => {
                za * zb.transpose()
            }
            (KernelFamily::Fbm { hurst }, Encoded::Features(za), Encoded::Features(zb)) => {
                let e = 2.0 * hurst;
                let d = feature_distances(za, zb);
                let norm_a: Vec<f64> = za.row_iter().map(|r| r.norm().powf(e)).collect();
                let norm_b: Vec<f64> = zb.row_iter().map(|r| r.norm().powf(e)).collect();
                DMatrix::from_fn(na, nb, |i, j| {
                    -0.5 * (d[(i, j)].powf(e) - norm_a[i] - norm_b[j])
                })
            }
            (KernelFamily::SqExp { sigma }, Encoded::Features(za), Encoded::Features(zb)) => {
                let d = feature_distances(za, zb);
                d.map(|v| (-(v * v) / (2.0 * sigma * sigma)).exp())
            }
            _ => unreachable!("encoding always matches the kernel family"),
        }
    }

    /// Kernel whose centered version equals the centered kernel. For FBM the
    /// norm terms cancel under centering, so only `−½‖x−x'‖^{2γ}` is kept.
    fn centering_block(&self, a: &Encoded, b: &Encoded) -> DMatrix<f64> {
        match (&self.spec.family, a, b) {
            (KernelFamily::Fbm { hurst }, Encoded::Features(za), Encoded::Features(zb)) => {
                let e = 2.0 * hurst;
                feature_distances(za, zb).map(|d| -0.5 * d.powf(e))
            }
            _ => self.raw_block(a, b),
        }
    }

    fn block(&self, a: &Encoded, b: &Encoded) -> DMatrix<f64> {
        if !self.spec.centered {
            return self.raw_block(a, b);
        }
        if self.spec.family == KernelFamily::Pearson {
            // centered by construction; stats are identically zero
            return self.raw_block(a, b);
        }
        let train = self.encode(&self.train).expect("training column encodes");
        let mut k = self.centering_block(a, b);
        let ma = row_means(&self.centering_block(a, &train));
        let mb = row_means(&self.centering_block(b, &train));
        let g = self.stats.grand_mean;
        for j in 0..k.ncols() {
            for i in 0..k.nrows() {
                k[(i, j)] += g - ma[i] - mb[j];
            }
        }
        k
    }

    /// Kernel (centered per the spec) between two arbitrary point sets.
    pub fn evaluate(&self, a: &CovariateColumn, b: &CovariateColumn) -> Result<DMatrix<f64>> {
        let ea = self.encode(a)?;
        let eb = self.encode(b)?;
        Ok(self.block(&ea, &eb))
    }

    /// Raw (uncentered) kernel between two point sets.
    pub fn evaluate_raw(&self, a: &CovariateColumn, b: &CovariateColumn) -> Result<DMatrix<f64>> {
        let ea = self.encode(a)?;
        let eb = self.encode(b)?;
        Ok(self.raw_block(&ea, &eb))
    }

    /// Train Gram, recomputed from the stored training column.
    pub fn train_gram(&self) -> DMatrix<f64> {
        let e = self.encode(&self.train).expect("training column encodes");
        if !self.spec.centered || self.spec.family == KernelFamily::Pearson {
            let k = self.raw_block(&e, &e);
            return symmetrize(k);
        }
        let mut k = self.centering_block(&e, &e);
        let m = &self.stats.row_means;
        let g = self.stats.grand_mean;
        for j in 0..k.ncols() {
            for i in 0..k.nrows() {
                k[(i, j)] += g - m[i] - m[j];
            }
        }
        symmetrize(k)
    }
}

fn symmetrize(k: DMatrix<f64>) -> DMatrix<f64> {
    (&k + k.transpose()) * 0.5
}

/// Fits a kernel to a training column and returns its (centered) train Gram.
pub fn gram(spec: &KernelSpec, col: &CovariateColumn) -> Result<(DMatrix<f64>, TrainedKernel)> {
    let ty = col.column_type();
    spec.validate(ty)?;
    if col.is_empty() {
        return Err(Error::InvalidData(format!("column `{}` is empty", col.name)));
    }
    let encoding = match (&spec.family, &col.values) {
        (KernelFamily::Constant, _) => Encoding::Count,
        (_, ColumnValues::Categorical { levels, codes }) => {
            let n = codes.len() as f64;
            let mut counts = vec![0usize; levels.len()];
            for &c in codes {
                counts[c] += 1;
            }
            Encoding::Labels {
                levels: levels.clone(),
                probs: counts.iter().map(|&c| c as f64 / n).collect(),
            }
        }
        _ => {
            let metric = spec.resolved_metric(ty).expect("numeric column has a metric");
            Encoding::Features {
                map: FeatureMap::fit(col, &metric)?,
            }
        }
    };
    let label_distribution = match &encoding {
        Encoding::Labels { levels, probs } => Some(
            levels
                .iter()
                .cloned()
                .zip(probs.iter().copied())
                .filter(|(_, p)| *p > 0.0)
                .collect(),
        ),
        _ => None,
    };
    let mut trained = TrainedKernel {
        column: col.name.clone(),
        spec: spec.clone(),
        column_type: ty,
        encoding,
        train: col.clone(),
        stats: CenteringStats {
            row_means: vec![0.0; col.len()],
            grand_mean: 0.0,
            label_distribution,
        },
    };
    let pearson = spec.family == KernelFamily::Pearson;
    if spec.centered && !pearson {
        let e = trained.encode(col)?;
        let k = trained.centering_block(&e, &e);
        let m = row_means(&k);
        trained.stats.grand_mean = m.iter().sum::<f64>() / m.len() as f64;
        trained.stats.row_means = m;
    }
    let h = trained.train_gram();
    Ok((h, trained))
}

/// Centered kernel rows `h(x_new, x_i)` against the training sample.
pub fn cross_gram(trained: &TrainedKernel, new_points: &CovariateColumn) -> Result<DMatrix<f64>> {
    let e = trained.encode(new_points)?;
    let t = trained.encode(&trained.train)?;
    if !trained.spec.centered || trained.spec.family == KernelFamily::Pearson {
        return Ok(trained.raw_block(&e, &t));
    }
    let mut k = trained.centering_block(&e, &t);
    let m_new = row_means(&k);
    let m = &trained.stats.row_means;
    let g = trained.stats.grand_mean;
    for j in 0..k.ncols() {
        for i in 0..k.nrows() {
            k[(i, j)] += g - m_new[i] - m[j];
        }
    }
    Ok(k)
}

/// Checks that the Fisher information of a single-covariate Pearson I-prior
/// model (ψ = 1) reproduces the Pearson kernel: `Σ_i h(x,x_i) h(x',x_i) =
/// n·h(x,x')` for every pair of observed labels and an unseen label.
pub fn pearson_fisher_identity_check(col: &CovariateColumn) -> Result<bool> {
    let (_, trained) = gram(&KernelSpec::pearson(), col)?;
    let mut labels: Vec<String> = match &col.values {
        ColumnValues::Categorical { levels, .. } => levels.clone(),
        _ => unreachable!("validated by gram"),
    };
    let mut unseen = String::from("__unseen__");
    while labels.contains(&unseen) {
        unseen.push('_');
    }
    labels.push(unseen);
    let probe = CovariateColumn::categorical(col.name.clone(), &labels);
    let rows = cross_gram(&trained, &probe)?;
    let info = &rows * rows.transpose();
    let n = col.len() as f64;
    let target = trained.evaluate(&probe, &probe)? * n;
    Ok(info
        .iter()
        .zip(target.iter())
        .all(|(a, b)| (a - b).abs() <= 1e-9 * b.abs().max(1.0)))
}
