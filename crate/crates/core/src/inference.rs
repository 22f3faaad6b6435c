//! Exact Gaussian computations under the I-prior.
//!
//! Everything goes through one symmetric eigendecomposition `H = U D Uᵀ`. With
//! iid errors (`Ψ = ψI`) the marginal covariance `V_y = ψH² + ψ⁻¹I` shares the
//! eigenvectors of `H` and has eigenvalues `ψd² + ψ⁻¹ > 0`, so solves and
//! log-determinants are diagonal in that basis even when `H` is indefinite.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::anova::{AnovaSpec, GramSet, TermCache};
use crate::data::{ColumnType, Covariates};
use crate::error::{Error, Result};
use crate::kernels::{cross_gram, TrainedKernel};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Error covariance structure. Only iid errors are implemented.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "snake_case")]
pub enum ErrorModel {
    /// `Ψ = ψI` (ψ is a precision).
    Iid { psi: f64 },
}

impl ErrorModel {
    pub fn psi(&self) -> f64 {
        match self {
            ErrorModel::Iid { psi } => *psi,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Spectral {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl Spectral {
    pub fn of(h: &DMatrix<f64>) -> Self {
        let sym = (h + h.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        Self {
            vectors: eig.eigenvectors,
            values: eig.eigenvalues,
        }
    }

    /// Spectrum of `c·H` from that of `H`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            vectors: self.vectors.clone(),
            values: &self.values * c,
        }
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut ud = self.vectors.clone();
        for (j, mut col) in ud.column_iter_mut().enumerate() {
            col *= self.values[j];
        }
        ud * self.vectors.transpose()
    }
}

/// Factorized `V_y = U (ψD² + ψ⁻¹I) Uᵀ`. Never formed or inverted densely
/// except on request.
#[derive(Clone, Debug)]
pub struct MarginalCov {
    pub spectral: Spectral,
    pub psi: f64,
    /// Eigenvalues of `V_y`.
    pub v: DVector<f64>,
}

impl MarginalCov {
    pub fn new(spectral: Spectral, psi: f64) -> Result<Self> {
        if !(psi > 0.0 && psi.is_finite()) {
            return Err(Error::Spec(format!("error precision ψ = {psi} must be positive and finite")));
        }
        let inv = 1.0 / psi;
        let mut v = spectral.values.map(|d| psi * d * d + inv);
        if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            let dmax = spectral.values.amax();
            let jitter = 1e-10 * dmax;
            log::warn!("marginal covariance eigenvalues not positive; adding jitter {jitter:e} to D²");
            v = spectral.values.map(|d| psi * (d * d + jitter) + inv);
            if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::Numerical(format!(
                    "marginal covariance is not positive definite (ψ = {psi:e}, max|d| = {dmax:e})"
                )));
            }
        }
        Ok(Self { spectral, psi, v })
    }

    pub fn n(&self) -> usize {
        self.v.len()
    }

    pub fn log_det(&self) -> f64 {
        self.v.iter().map(|x| x.ln()).sum()
    }

    fn project(&self, r: &DVector<f64>) -> DVector<f64> {
        self.spectral.vectors.tr_mul(r)
    }

    fn apply_diag(&self, r: &DVector<f64>, f: impl Fn(usize) -> f64) -> DVector<f64> {
        let mut z = self.project(r);
        for (i, zi) in z.iter_mut().enumerate() {
            *zi *= f(i);
        }
        &self.spectral.vectors * z
    }

    /// `V_y⁻¹ r`
    pub fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        self.apply_diag(r, |i| 1.0 / self.v[i])
    }

    pub fn quad_form(&self, r: &DVector<f64>) -> f64 {
        let z = self.project(r);
        z.iter().zip(self.v.iter()).map(|(a, b)| a * a / b).sum()
    }

    pub fn log_likelihood(&self, r: &DVector<f64>) -> Result<f64> {
        let n = self.n() as f64;
        let l = -0.5 * n * LN_2PI - 0.5 * self.log_det() - 0.5 * self.quad_form(r);
        if !l.is_finite() {
            return Err(Error::Numerical(format!(
                "log marginal likelihood is not finite (log|V| = {}, quadratic form = {})",
                self.log_det(),
                self.quad_form(r)
            )));
        }
        Ok(l)
    }

    /// `ŵ = ΨHV_y⁻¹ r`
    pub fn posterior_weights(&self, r: &DVector<f64>) -> DVector<f64> {
        let d = &self.spectral.values;
        self.apply_diag(r, |i| self.psi * d[i] / self.v[i])
    }

    pub fn dense(&self) -> DMatrix<f64> {
        self.scaled_outer(|i| self.v[i])
    }

    pub fn inverse_dense(&self) -> DMatrix<f64> {
        self.scaled_outer(|i| 1.0 / self.v[i])
    }

    fn scaled_outer(&self, f: impl Fn(usize) -> f64) -> DMatrix<f64> {
        let u = &self.spectral.vectors;
        let mut ud = u.clone();
        for (j, mut col) in ud.column_iter_mut().enumerate() {
            col *= f(j);
        }
        ud * u.transpose()
    }
}

pub fn marginal_cov(h: &DMatrix<f64>, error: ErrorModel) -> Result<MarginalCov> {
    MarginalCov::new(Spectral::of(h), error.psi())
}

fn residual(y: &DVector<f64>, f0: f64) -> DVector<f64> {
    y.map(|v| v - f0)
}

/// Log marginal likelihood of `(H_λ, ψ)` for response `y` and constant prior mean `f0`.
pub fn log_marginal_likelihood(h: &DMatrix<f64>, psi: f64, y: &DVector<f64>, f0: f64) -> Result<f64> {
    marginal_cov(h, ErrorModel::Iid { psi })?.log_likelihood(&residual(y, f0))
}

pub fn posterior_weights(h: &DMatrix<f64>, psi: f64, y: &DVector<f64>, f0: f64) -> Result<DVector<f64>> {
    Ok(marginal_cov(h, ErrorModel::Iid { psi })?.posterior_weights(&residual(y, f0)))
}

/// `I[f](x,x') = ψ Σ_i h(x,x_i) h(x',x_i)` for iid errors.
pub fn fisher_information(row_x: &[f64], row_xp: &[f64], error: ErrorModel) -> f64 {
    error.psi() * row_x.iter().zip(row_xp).map(|(a, b)| a * b).sum::<f64>()
}

/// Analytic gradient of the log marginal likelihood with respect to the
/// scale parameters and `log ψ`.
pub fn log_likelihood_gradient(
    spec: &AnovaSpec,
    cache: &TermCache,
    lambda: &[f64],
    psi: f64,
    r: &DVector<f64>,
) -> Result<(Vec<f64>, f64)> {
    let h = cache.assemble(spec, lambda);
    let m = MarginalCov::new(Spectral::of(&h), psi)?;
    let alpha = m.solve(r);
    let h_alpha = &h * &alpha;
    let d = &m.spectral.values;
    // B = H V⁻¹
    let b = m.scaled_outer(|i| d[i] / m.v[i]);
    let grad_lambda = (0..spec.n_params())
        .map(|k| {
            let dh = cache.d_assemble(spec, lambda, k);
            let tr = dh.component_mul(&b).sum();
            let quad = (&dh * &alpha).dot(&h_alpha);
            -psi * tr + psi * quad
        })
        .collect();
    let inv2 = 1.0 / (psi * psi);
    let tr_psi: f64 = d.iter().zip(m.v.iter()).map(|(di, vi)| (di * di - inv2) / vi).sum();
    let quad_psi = h_alpha.norm_squared() - inv2 * alpha.norm_squared();
    let d_psi = -0.5 * tr_psi + 0.5 * quad_psi;
    Ok((grad_lambda, psi * d_psi))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// Iteration limit reached before the likelihood settled.
    Stalled,
    /// Parameters supplied directly rather than estimated.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub lambda: Vec<f64>,
    pub psi: f64,
}

#[derive(Clone, Debug)]
struct Factor {
    marginal: MarginalCov,
    h: DMatrix<f64>,
}

/// A fitted I-prior model, self-contained for prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FittedModel {
    pub anova: AnovaSpec,
    /// One trained kernel per covariate of `anova`, in the same order.
    pub kernels: Vec<TrainedKernel>,
    pub lambda: Vec<f64>,
    pub error: ErrorModel,
    pub f0: f64,
    pub w_hat: Vec<f64>,
    pub response: Vec<f64>,
    pub log_likelihood: f64,
    pub status: FitStatus,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
    pub training_checksum: String,
    #[serde(skip)]
    factor: Option<Factor>,
}

impl FittedModel {
    /// Builds the model at fixed parameters, computing `ŵ` and the likelihood.
    pub fn at_parameters(
        anova: AnovaSpec,
        kernels: Vec<TrainedKernel>,
        lambda: Vec<f64>,
        psi: f64,
        f0: f64,
        response: Vec<f64>,
        training_checksum: String,
    ) -> Result<Self> {
        if kernels.len() != anova.covariates.len() {
            return Err(Error::Spec("one trained kernel per covariate is required".into()));
        }
        if lambda.len() != anova.n_params() {
            return Err(Error::Dimension(format!(
                "scale vector has {} entries, model has {} parameters",
                lambda.len(),
                anova.n_params()
            )));
        }
        let mut model = Self {
            anova,
            kernels,
            lambda,
            error: ErrorModel::Iid { psi },
            f0,
            w_hat: Vec::new(),
            response,
            log_likelihood: f64::NAN,
            status: FitStatus::Fixed,
            iterations: 0,
            trace: Vec::new(),
            training_checksum,
            factor: None,
        };
        let factor = model.compute_factor()?;
        let r = model.residual();
        model.w_hat = factor.marginal.posterior_weights(&r).iter().copied().collect();
        model.log_likelihood = factor.marginal.log_likelihood(&r)?;
        model.factor = Some(factor);
        Ok(model)
    }

    pub fn psi(&self) -> f64 {
        self.error.psi()
    }

    pub fn n(&self) -> usize {
        self.response.len()
    }

    fn residual(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.response.iter().map(|v| v - self.f0))
    }

    fn train_grams(&self) -> GramSet {
        let mut gs = GramSet::default();
        for k in &self.kernels {
            gs.insert(k.column.clone(), k.train_gram());
        }
        gs
    }

    fn compute_factor(&self) -> Result<Factor> {
        let cache = TermCache::new(&self.anova, &self.train_grams())?;
        let h = cache.assemble(&self.anova, &self.lambda);
        let marginal = MarginalCov::new(Spectral::of(&h), self.psi())?;
        Ok(Factor { marginal, h })
    }

    fn factor(&self) -> &Factor {
        self.factor.as_ref().expect("factor is computed on construction and load")
    }

    /// Factorization of `V_y` at the fitted parameters.
    pub fn marginal(&self) -> &MarginalCov {
        &self.factor().marginal
    }

    /// `H_λ̂` over the training sample.
    pub fn train_kernel(&self) -> &DMatrix<f64> {
        &self.factor().h
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Restores a model and recomputes its factorization; `ŵ` must be
    /// reproducible from the stored parameters.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut model: Self = serde_json::from_str(s)?;
        let factor = model.compute_factor()?;
        let w = factor.marginal.posterior_weights(&model.residual());
        let scale = w.amax().max(1.0);
        let dev = w
            .iter()
            .zip(&model.w_hat)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if model.w_hat.len() != w.len() || dev > 1e-10 * scale {
            return Err(Error::Numerical(format!(
                "stored posterior weights are not reproducible (max deviation {dev:e})"
            )));
        }
        model.factor = Some(factor);
        Ok(model)
    }

    /// Assembled kernel rows `h_λ̂(x_new, x_i)`.
    pub fn cross_kernel(&self, new: &Covariates) -> Result<DMatrix<f64>> {
        let mut gs = GramSet::default();
        for k in &self.kernels {
            let col = new
                .get(&k.column)
                .ok_or_else(|| Error::Dimension(format!("missing covariate `{}`", k.column)))?;
            gs.insert(k.column.clone(), cross_gram(k, col)?);
        }
        if new.n == 0 {
            return Ok(DMatrix::zeros(0, self.n()));
        }
        let cache = TermCache::new(&self.anova, &gs)?;
        Ok(cache.assemble(&self.anova, &self.lambda))
    }

    /// Posterior mean of each ANOVA term's component at new points, one
    /// column per term (the prior mean is not included).
    pub fn term_contributions(&self, new: &Covariates) -> Result<DMatrix<f64>> {
        let mut gs = GramSet::default();
        for k in &self.kernels {
            let col = new
                .get(&k.column)
                .ok_or_else(|| Error::Dimension(format!("missing covariate `{}`", k.column)))?;
            gs.insert(k.column.clone(), cross_gram(k, col)?);
        }
        let t = self.anova.n_terms();
        if new.n == 0 {
            return Ok(DMatrix::zeros(0, t));
        }
        let cache = TermCache::new(&self.anova, &gs)?;
        let c = self.anova.coefficients(&self.lambda);
        let w = DVector::from_column_slice(&self.w_hat);
        let mut out = DMatrix::zeros(new.n, t);
        for (j, p) in cache.products.iter().enumerate() {
            out.set_column(j, &(p * &w * c[j]));
        }
        Ok(out)
    }

    /// Posterior mean and covariance of `f` at new points.
    pub fn posterior_f(&self, new: &Covariates) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let hx = self.cross_kernel(new)?;
        let mean = self.mean_from(&hx);
        let g = self.whitened(&hx);
        let cov = &g * g.transpose();
        Ok((mean, (&cov + cov.transpose()) * 0.5))
    }

    fn mean_from(&self, hx: &DMatrix<f64>) -> DVector<f64> {
        let w = DVector::from_column_slice(&self.w_hat);
        (hx * w).add_scalar(self.f0)
    }

    /// `H_x U diag(v^{-1/2})`, so that `cov = G Gᵀ`.
    fn whitened(&self, hx: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.marginal();
        let mut g = hx * &m.spectral.vectors;
        for (j, mut col) in g.column_iter_mut().enumerate() {
            col /= m.v[j].sqrt();
        }
        g
    }

    /// Posterior mean and marginal variance of `f` (no error variance).
    pub fn posterior_mean_var(&self, new: &Covariates) -> Result<(DVector<f64>, DVector<f64>)> {
        let hx = self.cross_kernel(new)?;
        let mean = self.mean_from(&hx);
        let g = self.whitened(&hx);
        let var = DVector::from_iterator(g.nrows(), g.row_iter().map(|r| r.norm_squared()));
        Ok((mean, var))
    }

    /// Predictive mean and variance for new responses (`+ 1/ψ̂`).
    pub fn predictive(&self, new: &Covariates) -> Result<(DVector<f64>, DVector<f64>)> {
        let (mean, var) = self.posterior_mean_var(new)?;
        let noise = 1.0 / self.psi();
        Ok((mean, var.add_scalar(noise)))
    }

    /// Posterior mean and standard deviation of `f` at the training points.
    pub fn fitted(&self) -> (DVector<f64>, DVector<f64>) {
        let h = self.train_kernel();
        let mean = self.mean_from(h);
        let m = self.marginal();
        let d = &m.spectral.values;
        let u = &m.spectral.vectors;
        let sd = DVector::from_iterator(
            self.n(),
            u.row_iter().map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(k, uik)| uik * uik * d[k] * d[k] / m.v[k])
                    .sum::<f64>()
                    .sqrt()
            }),
        );
        (mean, sd)
    }

    /// Fisher information on `f` between two point sets at the fitted parameters.
    pub fn fisher_information(&self, a: &Covariates, b: &Covariates) -> Result<DMatrix<f64>> {
        let ha = self.cross_kernel(a)?;
        let hb = self.cross_kernel(b)?;
        Ok(ha * hb.transpose() * self.psi())
    }

    /// Rows whose categorical covariates carry labels unseen in training.
    pub fn extrapolation_mask(&self, new: &Covariates) -> Result<Vec<bool>> {
        let mut mask = vec![false; new.n];
        for k in self.kernels.iter().filter(|k| k.column_type == ColumnType::Categorical) {
            let col = new
                .get(&k.column)
                .ok_or_else(|| Error::Dimension(format!("missing covariate `{}`", k.column)))?;
            let seen: std::collections::HashSet<&str> = k
                .training_column()
                .labels()
                .expect("categorical")
                .into_iter()
                .collect();
            for (i, l) in col.labels().expect("categorical").iter().enumerate() {
                if !seen.contains(l) {
                    mask[i] = true;
                }
            }
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_sym(n: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed;
        let m = DMatrix::from_fn(n, n, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        });
        &m + m.transpose()
    }

    #[test]
    fn zero_and_identity_kernels() {
        let m = marginal_cov(&DMatrix::zeros(3, 3), ErrorModel::Iid { psi: 2.0 }).unwrap();
        assert!((m.dense() - DMatrix::identity(3, 3) * 0.5).amax() < 1e-15);
        let m = marginal_cov(&DMatrix::identity(3, 3), ErrorModel::Iid { psi: 1.0 }).unwrap();
        assert!((m.dense() - DMatrix::identity(3, 3) * 2.0).amax() < 1e-14);
    }

    #[test]
    fn factorized_matches_dense() {
        let h = random_sym(6, 3);
        let psi = 0.7;
        let m = marginal_cov(&h, ErrorModel::Iid { psi }).unwrap();
        let dense = &h * &h * psi + DMatrix::identity(6, 6) / psi;
        assert!((m.dense() - dense).amax() < 1e-9);
    }

    #[test]
    fn nonpositive_psi_is_rejected() {
        assert!(marginal_cov(&DMatrix::identity(2, 2), ErrorModel::Iid { psi: 0.0 }).is_err());
        assert!(marginal_cov(&DMatrix::identity(2, 2), ErrorModel::Iid { psi: -1.0 }).is_err());
    }

    #[test]
    fn likelihood_examples() {
        let l = log_marginal_likelihood(&DMatrix::zeros(1, 1), 1.0, &DVector::from_element(1, 3.0), 3.0).unwrap();
        assert!((l + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let l = log_marginal_likelihood(&DMatrix::identity(2, 2), 1.0, &y, 0.0).unwrap();
        let expected = -(2.0 * std::f64::consts::PI).ln() - 2f64.ln() - 0.25;
        assert!((l - expected).abs() < 1e-14);
    }

    #[test]
    fn translation_invariance() {
        let h = random_sym(5, 9);
        let y = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1, 0.5]);
        let a = log_marginal_likelihood(&h, 1.3, &y, 0.2).unwrap();
        let b = log_marginal_likelihood(&h, 1.3, &y.add_scalar(7.5), 7.7).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn weights_examples() {
        let y = DVector::from_vec(vec![1.0, -2.0, 4.0]);
        let w = posterior_weights(&DMatrix::identity(3, 3), 1.0, &y, 0.0).unwrap();
        assert!((w - &y / 2.0).amax() < 1e-14);
        let w = posterior_weights(&DMatrix::zeros(3, 3), 1.0, &y, 0.0).unwrap();
        assert!(w.amax() < 1e-15);
    }

    #[test]
    fn commuted_weight_forms_agree() {
        let h = random_sym(7, 11);
        let psi = 1.7;
        let r = DVector::from_fn(7, |i, _| (i as f64 * 0.37).sin());
        let m = marginal_cov(&h, ErrorModel::Iid { psi }).unwrap();
        let v = m.dense();
        let lu = v.clone().lu();
        let a = &h * lu.solve(&r).unwrap() * psi;
        let b = lu.solve(&(&h * &r * psi)).unwrap();
        assert!((&a - &b).amax() < 1e-9);
        assert!((m.posterior_weights(&r) - a).amax() < 1e-9);
    }

    #[test]
    fn fisher_information_of_zero_row() {
        assert_eq!(fisher_information(&[0.0, 0.0], &[1.0, 2.0], ErrorModel::Iid { psi: 3.0 }), 0.0);
        assert_eq!(fisher_information(&[1.0, 2.0], &[3.0, 4.0], ErrorModel::Iid { psi: 2.0 }), 22.0);
    }
}
