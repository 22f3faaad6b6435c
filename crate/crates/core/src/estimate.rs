//! Maximum marginal likelihood estimation of the scale parameters and the
//! error precision by EM, with multi-start control, profile search over
//! kernel hyperparameters and Hessian-based standard errors.
//!
//! The E-step gives `w | y ~ N(w̃, V_y⁻¹)`, so `W̃ = V_y⁻¹ + w̃w̃ᵀ`. The
//! M-step never forms `W̃`: with term weights `c(λ)` and term kernels `P_A`,
//!
//! ```text
//! Q = −½ψ‖r‖² − ½ψ cᵀMc − ½ψ⁻¹ tr W̃ + ψ cᵀz,
//! M_AB = tr(P_A W̃ P_B),  z_A = rᵀP_A w̃,
//! ```
//!
//! and `c` is affine in each single λ_k, so every coordinate update is the
//! root of a scalar quadratic.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anova::{AnovaSpec, GramSet, Parameterization, TermCache};
use crate::data::{Covariates, Dataset};
use crate::error::{Error, Result};
use crate::inference::{FitStatus, FittedModel, MarginalCov, Spectral, TraceRow};
use crate::kernels::{gram, KernelFamily, KernelSpec, TrainedKernel};

/// How the constant prior mean `f₀` is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PriorMean {
    /// Training mean `ȳ`.
    #[default]
    SampleMean,
    Fixed(f64),
}

/// ANOVA structure plus one kernel per covariate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub anova: AnovaSpec,
    /// Aligned with `anova.covariates`.
    pub kernels: Vec<KernelSpec>,
    #[serde(default)]
    pub prior_mean: PriorMean,
}

impl ModelSpec {
    pub fn new(anova: AnovaSpec, kernels: Vec<KernelSpec>) -> Result<Self> {
        if kernels.len() != anova.covariates.len() {
            return Err(Error::Spec(format!(
                "{} kernels given for {} covariates",
                kernels.len(),
                anova.covariates.len()
            )));
        }
        Ok(Self {
            anova,
            kernels,
            prior_mean: PriorMean::SampleMean,
        })
    }

    pub fn with_prior_mean(mut self, prior_mean: PriorMean) -> Self {
        self.prior_mean = prior_mean;
        self
    }

    pub fn kernel_mut(&mut self, covariate: &str) -> Option<&mut KernelSpec> {
        let i = self.anova.covariates.iter().position(|c| c == covariate)?;
        self.kernels.get_mut(i)
    }

    /// Trains every kernel on the given covariates.
    pub fn train(&self, covariates: &Covariates) -> Result<(Vec<TrainedKernel>, GramSet)> {
        let mut trained = Vec::with_capacity(self.kernels.len());
        let mut grams = GramSet::default();
        for (name, spec) in self.anova.covariates.iter().zip(&self.kernels) {
            let col = covariates.get(name).ok_or_else(|| Error::MissingColumn(name.clone()))?;
            let (g, t) = gram(spec, col)?;
            grams.insert(name.clone(), g);
            trained.push(t);
        }
        Ok((trained, grams))
    }

    pub fn f0(&self, y: &[f64]) -> f64 {
        match self.prior_mean {
            PriorMean::SampleMean => y.iter().sum::<f64>() / y.len() as f64,
            PriorMean::Fixed(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Stop when `|ΔL| ≤ rel_tol·max(1, |L|)`.
    pub rel_tol: f64,
    pub restarts: usize,
    /// Random starts draw each λ_k uniformly from `[−init_range, init_range]`.
    pub init_range: f64,
    /// `None` means `1/var(y)`.
    pub psi_init: Option<f64>,
    pub seed: u64,
    /// Squared-extrapolation steps between EM updates; a step is kept only
    /// when it raises the likelihood.
    pub accelerate: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-8,
            restarts: 8,
            init_range: 1.0,
            psi_init: None,
            seed: 0,
            accelerate: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.restarts == 0 {
            return Err(Error::Spec("max_iter and restarts must be positive".into()));
        }
        if !(self.rel_tol > 0.0) || !(self.init_range > 0.0) {
            return Err(Error::Spec("rel_tol and init_range must be positive".into()));
        }
        if let Some(p) = self.psi_init {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Spec(format!("psi_init = {p} must be positive")));
            }
        }
        Ok(())
    }

    /// Starting points: the all-ones vector, then seeded uniform draws.
    pub fn starts(&self, n_params: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = vec![vec![1.0; n_params]];
        for _ in 1..self.restarts {
            out.push(
                (0..n_params)
                    .map(|_| rng.random_range(-self.init_range..=self.init_range))
                    .collect(),
            );
        }
        out
    }
}

/// Everything about a fitting problem that does not change with `(λ, ψ)`.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub anova: AnovaSpec,
    pub cache: TermCache,
    /// `y − f₀`
    pub r: DVector<f64>,
    /// Spectrum of the sole term kernel, when there is only one.
    single: Option<Spectral>,
}

/// Frozen E-step quantities reduced to what `Q` needs.
///
/// `M = F + G` splits into the posterior-covariance part
/// `F_AB = tr(P_A V_y⁻¹ P_B)` and the mean part `G_AB = g_A·g_B` with
/// `g_A = P_A w̃`. Keeping the `g_A` lets `‖r − H w̃‖²` be formed directly,
/// which stays accurate when the fit is nearly exact.
#[derive(Clone, Debug)]
pub struct QForm {
    pub f: DMatrix<f64>,
    pub g: Vec<DVector<f64>>,
    pub r: DVector<f64>,
    /// `M_AB = tr(P_A W̃ P_B)`
    pub m: DMatrix<f64>,
    /// `z_A = rᵀ P_A w̃`
    pub z: DVector<f64>,
    /// `‖r‖²`
    pub r2: f64,
    /// `tr W̃`
    pub trace_w: f64,
}

impl QForm {
    fn combine_g(&self, c: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.r.len());
        for (gi, ci) in self.g.iter().zip(c.iter()) {
            out.axpy(*ci, gi, 1.0);
        }
        out
    }

    /// `E‖r − Hw‖² = ‖r − Hw̃‖² + tr(H V_y⁻¹ H)` at term weights `c`.
    pub fn expected_residual(&self, c: &DVector<f64>) -> f64 {
        let e = &self.r - self.combine_g(c);
        e.norm_squared() + (c.transpose() * &self.f * c)[0]
    }
}

#[derive(Clone, Debug)]
pub struct EStep {
    pub lambda: Vec<f64>,
    pub psi: f64,
    /// Posterior mean `w̃`.
    pub w: DVector<f64>,
    /// `V_y`, whose inverse is the posterior covariance of `w`.
    pub marginal: MarginalCov,
    pub log_likelihood: f64,
    pub qform: QForm,
}

impl EStep {
    /// Dense `W̃ = V_y⁻¹ + w̃w̃ᵀ`.
    pub fn w_tilde(&self) -> DMatrix<f64> {
        self.marginal.inverse_dense() + &self.w * self.w.transpose()
    }
}

impl Workspace {
    pub fn new(anova: AnovaSpec, grams: &GramSet, y: &[f64], f0: f64) -> Result<Self> {
        let cache = TermCache::new(&anova, grams)?;
        let (rows, cols) = cache.shape();
        if rows != cols || rows != y.len() {
            return Err(Error::Dimension(format!(
                "Gram is {rows}×{cols} but the response has {} entries",
                y.len()
            )));
        }
        let single = (anova.n_terms() == 1).then(|| Spectral::of(&cache.products[0]));
        let r = DVector::from_iterator(y.len(), y.iter().map(|v| v - f0));
        Ok(Self {
            anova,
            cache,
            r,
            single,
        })
    }

    pub fn for_model(model: &FittedModel) -> Result<Self> {
        let mut grams = GramSet::default();
        for k in &model.kernels {
            grams.insert(k.column.clone(), k.train_gram());
        }
        Self::new(model.anova.clone(), &grams, &model.response, model.f0)
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    /// The same problem with the terms reweighted under another parameterization.
    pub fn reparameterized(&self, parameterization: Parameterization) -> Self {
        Self {
            anova: AnovaSpec {
                parameterization,
                ..self.anova.clone()
            },
            ..self.clone()
        }
    }

    pub fn kernel(&self, lambda: &[f64]) -> DMatrix<f64> {
        self.cache.assemble(&self.anova, lambda)
    }

    pub fn spectral(&self, lambda: &[f64]) -> Spectral {
        match &self.single {
            Some(s) => s.scaled(self.anova.coefficients(lambda)[0]),
            None => Spectral::of(&self.kernel(lambda)),
        }
    }

    pub fn marginal(&self, lambda: &[f64], psi: f64) -> Result<MarginalCov> {
        MarginalCov::new(self.spectral(lambda), psi)
    }

    pub fn log_likelihood(&self, lambda: &[f64], psi: f64) -> Result<f64> {
        self.marginal(lambda, psi)?.log_likelihood(&self.r)
    }

    pub fn e_step(&self, lambda: &[f64], psi: f64) -> Result<EStep> {
        let marginal = self.marginal(lambda, psi)?;
        let log_likelihood = marginal.log_likelihood(&self.r)?;
        let w = marginal.posterior_weights(&self.r);
        let qform = self.qform(&marginal, &w);
        Ok(EStep {
            lambda: lambda.to_vec(),
            psi,
            w,
            marginal,
            log_likelihood,
            qform,
        })
    }

    fn qform(&self, marginal: &MarginalCov, w: &DVector<f64>) -> QForm {
        let t = self.anova.n_terms();
        let inv_v = marginal.v.map(|v| 1.0 / v);
        let trace_w = inv_v.sum() + w.norm_squared();
        let g: Vec<DVector<f64>> = self.cache.products.iter().map(|p| p * w).collect();
        let z = DVector::from_iterator(t, g.iter().map(|gi| self.r.dot(gi)));
        let mut f = DMatrix::zeros(t, t);
        if let Some(s) = &self.single {
            f[(0, 0)] = s.values.iter().zip(inv_v.iter()).map(|(p, iv)| p * p * iv).sum();
        } else {
            let u = &marginal.spectral.vectors;
            let half = inv_v.map(f64::sqrt);
            let whitened: Vec<DMatrix<f64>> = self
                .cache
                .products
                .par_iter()
                .map(|p| {
                    let mut pu = p * u;
                    for (j, mut col) in pu.column_iter_mut().enumerate() {
                        col *= half[j];
                    }
                    pu
                })
                .collect();
            for a in 0..t {
                for b in a..t {
                    let v = whitened[a].dot(&whitened[b]);
                    f[(a, b)] = v;
                    f[(b, a)] = v;
                }
            }
        }
        let m = DMatrix::from_fn(t, t, |a, b| f[(a, b)] + g[a].dot(&g[b]));
        QForm {
            f,
            g,
            r: self.r.clone(),
            m,
            z,
            r2: self.r.norm_squared(),
            trace_w,
        }
    }
}

/// `Q(λ, ψ)` from frozen E-step quantities, with the additive constant set to 0.
pub fn q_value(anova: &AnovaSpec, qf: &QForm, lambda: &[f64], psi: f64) -> f64 {
    let c = DVector::from_vec(anova.coefficients(lambda));
    q_at(&c, psi, qf)
}

fn q_at(c: &DVector<f64>, psi: f64, qf: &QForm) -> f64 {
    -0.5 * psi * qf.expected_residual(c) - 0.5 * qf.trace_w / psi
}

/// Dense reference evaluation of `Q = −½ψ‖r‖² − ½tr(V W̃) + ψ rᵀHw̃` at
/// kernel `h`, used to validate the reduced form.
pub fn q_value_dense(h: &DMatrix<f64>, psi: f64, r: &DVector<f64>, w: &DVector<f64>, w_tilde: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    let v = h * h * psi + DMatrix::identity(n, n) / psi;
    -0.5 * psi * r.norm_squared() - 0.5 * (v * w_tilde).trace() + psi * r.dot(&(h * w))
}

/// Analytic `(∂Q/∂λ, ∂Q/∂ψ)`.
pub fn q_gradient(anova: &AnovaSpec, qf: &QForm, lambda: &[f64], psi: f64) -> (Vec<f64>, f64) {
    let c = DVector::from_vec(anova.coefficients(lambda));
    let mc = &qf.m * &c;
    let d_lambda = (0..anova.n_params())
        .map(|k| {
            let dc = DVector::from_vec(anova.d_coefficients(lambda, k));
            -psi * dc.dot(&mc) + psi * dc.dot(&qf.z)
        })
        .collect();
    let d_psi = -0.5 * qf.r2 - 0.5 * c.dot(&mc) + 0.5 * qf.trace_w / (psi * psi) + c.dot(&qf.z);
    (d_lambda, d_psi)
}

#[derive(Clone, Debug)]
pub struct MStep {
    pub lambda: Vec<f64>,
    pub psi: f64,
    pub q_before: f64,
    pub q_after: f64,
    pub cycles: usize,
}

const M_STEP_TOL: f64 = 1e-10;
const M_STEP_MAX_CYCLES: usize = 200;

/// Closed-form maximizer of `Q` over λ_k with the other coordinates fixed.
///
/// `Q(t) = const − ½ψ(a + t·dc)ᵀM(a + t·dc) + ψ t·dcᵀz` is a concave quadratic
/// in `t` when `dcᵀM dc > 0`; otherwise it is linear and a unit step is taken
/// uphill.
pub fn coordinate_update(anova: &AnovaSpec, qf: &QForm, lambda: &[f64], psi: f64, k: usize) -> f64 {
    let c = DVector::from_vec(anova.coefficients(lambda));
    let dc = DVector::from_vec(anova.d_coefficients(lambda, k));
    let a = &c - &dc * lambda[k];
    // dQ/dt = ψ(numer − t·c2)
    let gd = qf.combine_g(&dc);
    let fdc = &qf.f * &dc;
    let c2 = dc.dot(&fdc) + gd.norm_squared();
    let numer = gd.dot(&(&qf.r - qf.combine_g(&a))) - a.dot(&fdc);
    let scale = qf.m.diagonal().amax().max(f64::MIN_POSITIVE);
    let current = lambda[k];
    let candidate = if c2 > 1e-14 * scale * dc.norm_squared() && c2 > 0.0 {
        numer / c2
    } else {
        let slope = numer - current * c2;
        if slope > 0.0 {
            current + 1.0
        } else if slope < 0.0 {
            current - 1.0
        } else {
            current
        }
    };
    if !candidate.is_finite() {
        return current;
    }
    let mut trial = lambda.to_vec();
    trial[k] = candidate;
    if q_value(anova, qf, &trial, psi) >= q_value(anova, qf, lambda, psi) {
        candidate
    } else {
        current
    }
}

/// Closed-form `ψ⁺ = sqrt(tr W̃ / (‖r‖² + tr(H²W̃) − 2rᵀHw̃))`.
pub fn psi_update(anova: &AnovaSpec, qf: &QForm, lambda: &[f64]) -> Result<f64> {
    let c = DVector::from_vec(anova.coefficients(lambda));
    let denom = qf.expected_residual(&c);
    if !(denom > 0.0) || !(qf.trace_w > 0.0) {
        return Err(Error::Numerical(format!(
            "ψ update radicand is not positive (numerator {:e}, denominator {denom:e})",
            qf.trace_w
        )));
    }
    let psi = (qf.trace_w / denom).sqrt();
    if !psi.is_finite() {
        return Err(Error::Numerical(format!("ψ update is not finite ({psi})")));
    }
    Ok(psi)
}

/// Cyclic exact coordinate ascent on `Q`.
pub fn m_step(anova: &AnovaSpec, qf: &QForm, lambda: &[f64], psi: f64) -> Result<MStep> {
    let q_before = q_value(anova, qf, lambda, psi);
    let mut lam = lambda.to_vec();
    let mut psi_new = psi;
    let mut q_prev = q_before;
    let mut cycles = 0;
    while cycles < M_STEP_MAX_CYCLES {
        cycles += 1;
        for k in 0..lam.len() {
            lam[k] = coordinate_update(anova, qf, &lam, psi_new, k);
        }
        psi_new = psi_update(anova, qf, &lam)?;
        let q = q_value(anova, qf, &lam, psi_new);
        if (q - q_prev).abs() < M_STEP_TOL {
            q_prev = q;
            break;
        }
        q_prev = q;
    }
    Ok(MStep {
        lambda: lam,
        psi: psi_new,
        q_before,
        q_after: q_prev,
        cycles,
    })
}

/// Outcome of one EM run from one starting point.
#[derive(Clone, Debug)]
pub struct EmRun {
    pub lambda: Vec<f64>,
    pub psi: f64,
    pub log_likelihood: f64,
    pub trace: Vec<TraceRow>,
    pub status: FitStatus,
    pub iterations: usize,
}

fn em_step(ws: &Workspace, e: &EStep) -> Result<EStep> {
    let m = m_step(&ws.anova, &e.qform, &e.lambda, e.psi)?;
    ws.e_step(&m.lambda, m.psi)
}

fn packed(e: &EStep) -> Vec<f64> {
    let mut p = e.lambda.clone();
    p.push(e.psi.ln());
    p
}

/// One squared-extrapolation cycle (SQUAREM, scheme 3) in `(λ, log ψ)`.
/// Falls back to two plain EM steps whenever the extrapolated point does
/// not beat them, so the likelihood never decreases.
fn squarem_step(ws: &Workspace, e0: &EStep) -> Result<EStep> {
    let e1 = em_step(ws, e0)?;
    let e2 = match em_step(ws, &e1) {
        Ok(e2) => e2,
        Err(_) => return Ok(e1),
    };
    let (p0, p1, p2) = (packed(e0), packed(&e1), packed(&e2));
    let r: Vec<f64> = p1.iter().zip(&p0).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = (0..p0.len()).map(|i| p2[i] - 2.0 * p1[i] + p0[i]).collect();
    let norm = |u: &[f64]| u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (nr, nv) = (norm(&r), norm(&v));
    if !(nv > 0.0) || !(nr > 0.0) {
        return Ok(e2);
    }
    let mut alpha = (-nr / nv).min(-1.0);
    for _ in 0..SQUAREM_BACKTRACK {
        if alpha > -1.0 - 1e-12 {
            break;
        }
        let p: Vec<f64> = (0..p0.len()).map(|i| p0[i] - 2.0 * alpha * r[i] + alpha * alpha * v[i]).collect();
        let n = p.len() - 1;
        let candidate = ws.e_step(&p[..n], p[n].exp()).and_then(|e| em_step(ws, &e));
        if let Ok(c) = candidate {
            if c.log_likelihood.is_finite() && c.log_likelihood >= e2.log_likelihood {
                return Ok(c);
            }
        }
        alpha = (alpha - 1.0) / 2.0;
    }
    Ok(e2)
}

const SQUAREM_BACKTRACK: usize = 8;

pub fn em_run(ws: &Workspace, lambda0: &[f64], psi0: f64, config: &FitConfig) -> Result<EmRun> {
    let mut e = ws.e_step(lambda0, psi0)?;
    let mut trace = vec![TraceRow {
        iteration: 0,
        log_likelihood: e.log_likelihood,
        lambda: e.lambda.clone(),
        psi: e.psi,
    }];
    let mut status = FitStatus::Stalled;
    let mut iterations = 0;
    for it in 1..=config.max_iter {
        iterations = it;
        // A failure after the first E-step ends the run at its last valid
        // iterate; the likelihood there is still exact.
        let next = if config.accelerate {
            squarem_step(ws, &e)
        } else {
            em_step(ws, &e)
        };
        let next = match next {
            Ok(next) => next,
            Err(err) => {
                log::warn!("EM stopped at iteration {it}: {err}");
                break;
            }
        };
        let prev = e.log_likelihood;
        e = next;
        trace.push(TraceRow {
            iteration: it,
            log_likelihood: e.log_likelihood,
            lambda: e.lambda.clone(),
            psi: e.psi,
        });
        if (e.log_likelihood - prev).abs() <= config.rel_tol * prev.abs().max(1.0) {
            status = FitStatus::Converged;
            break;
        }
    }
    Ok(EmRun {
        lambda: e.lambda,
        psi: e.psi,
        log_likelihood: e.log_likelihood,
        trace,
        status,
        iterations,
    })
}

fn default_psi(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    if var > 0.0 && var.is_finite() {
        1.0 / var
    } else {
        1.0
    }
}

/// Runs every restart (in parallel) and keeps the highest final likelihood;
/// ties go to the earliest start.
pub fn em_best(ws: &Workspace, y: &[f64], config: &FitConfig) -> Result<EmRun> {
    config.validate()?;
    let psi0 = config.psi_init.unwrap_or_else(|| default_psi(y));
    let starts = config.starts(ws.anova.n_params());
    let runs: Vec<Result<EmRun>> = starts.par_iter().map(|l0| em_run(ws, l0, psi0, config)).collect();
    let mut best: Option<EmRun> = None;
    let mut failures = Vec::new();
    for (i, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) => {
                log::debug!(
                    "restart {i}: logL = {:.10}, {} iterations, {:?}",
                    run.log_likelihood,
                    run.iterations,
                    run.status
                );
                if best.as_ref().is_none_or(|b| run.log_likelihood > b.log_likelihood) {
                    best = Some(run);
                }
            }
            Err(e) => {
                log::warn!("restart {i} failed: {e}");
                failures.push(format!("restart {i}: {e}"));
            }
        }
    }
    best.ok_or_else(|| Error::Fit(format!("all restarts failed; {}", failures.join("; "))))
}

pub fn em_fit(data: &Dataset, spec: &ModelSpec, config: &FitConfig) -> Result<FittedModel> {
    let (trained, grams) = spec.train(&data.covariates)?;
    let y = &data.response;
    let f0 = spec.f0(y);
    let ws = Workspace::new(spec.anova.clone(), &grams, y, f0)?;
    let run = em_best(&ws, y, config)?;
    let mut model = FittedModel::at_parameters(
        spec.anova.clone(),
        trained,
        run.lambda,
        run.psi,
        f0,
        y.clone(),
        data.checksum(),
    )?;
    model.status = run.status;
    model.iterations = run.iterations;
    model.trace = run.trace;
    Ok(model)
}

/// Writes `iteration,log_likelihood,<param names…>,psi`.
pub fn write_trace<W: Write>(trace: &[TraceRow], param_names: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["iteration".to_string(), "log_likelihood".to_string()];
    header.extend(param_names.iter().map(|p| format!("lambda_{p}")));
    header.push("psi".into());
    w.write_record(&header)?;
    for row in trace {
        let mut rec = vec![row.iteration.to_string(), row.log_likelihood.to_string()];
        rec.extend(row.lambda.iter().map(f64::to_string));
        rec.push(row.psi.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hyperparameter {
    /// FBM Hurst coefficient, searched on `(0, 1)`.
    Hurst,
    /// Squared-exponential length scale, searched on the log scale.
    Sigma,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileTarget {
    pub covariate: String,
    pub which: Hyperparameter,
    pub lower: f64,
    pub upper: f64,
    #[serde(default = "default_profile_tol")]
    pub tol: f64,
}

fn default_profile_tol() -> f64 {
    1e-3
}

#[derive(Debug)]
pub struct ProfileResult {
    pub best: f64,
    pub model: FittedModel,
    /// Every probed `(value, profile log-likelihood)`, in evaluation order.
    pub probes: Vec<(f64, f64)>,
}

const PROFILE_GRID: usize = 9;
const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn with_hyperparameter(spec: &ModelSpec, target: &ProfileTarget, value: f64) -> Result<ModelSpec> {
    let mut s = spec.clone();
    let k = s
        .kernel_mut(&target.covariate)
        .ok_or_else(|| Error::Spec(format!("profile covariate `{}` is not in the model", target.covariate)))?;
    match (&mut k.family, target.which) {
        (KernelFamily::Fbm { hurst }, Hyperparameter::Hurst) => *hurst = value,
        (KernelFamily::SqExp { sigma }, Hyperparameter::Sigma) => *sigma = value,
        (f, w) => {
            return Err(Error::Spec(format!(
                "cannot profile {w:?} on a {} kernel",
                f.name()
            )))
        }
    }
    Ok(s)
}

/// Golden-section search of the profile log marginal likelihood after a
/// coarse grid scan that picks the bracket.
pub fn profile_hyperparameter(
    data: &Dataset,
    spec: &ModelSpec,
    target: &ProfileTarget,
    config: &FitConfig,
) -> Result<ProfileResult> {
    let log_scale = target.which == Hyperparameter::Sigma;
    let valid = match target.which {
        Hyperparameter::Hurst => 0.0 < target.lower && target.upper < 1.0,
        Hyperparameter::Sigma => 0.0 < target.lower && target.upper.is_finite(),
    };
    if !valid || !(target.lower < target.upper) || !(target.tol > 0.0) {
        return Err(Error::Spec(format!(
            "invalid profile interval [{}, {}] for {:?}",
            target.lower, target.upper, target.which
        )));
    }
    with_hyperparameter(spec, target, target.lower)?;
    let to_value = |s: f64| if log_scale { s.exp() } else { s };
    let (lo, hi) = if log_scale {
        (target.lower.ln(), target.upper.ln())
    } else {
        (target.lower, target.upper)
    };
    // Tolerance is on the hyperparameter; on the log scale use the relative
    // width at the lower end as a conservative proxy.
    let tol = if log_scale { target.tol / target.upper } else { target.tol };

    let probe = |s: f64| -> (f64, Option<FittedModel>) {
        let value = to_value(s);
        match with_hyperparameter(spec, target, value).and_then(|sp| em_fit(data, &sp, config)) {
            Ok(m) => (m.log_likelihood, Some(m)),
            Err(e) => {
                log::warn!("profile probe at {value} failed: {e}");
                (f64::NEG_INFINITY, None)
            }
        }
    };

    let grid: Vec<f64> = (0..PROFILE_GRID)
        .map(|i| lo + (hi - lo) * i as f64 / (PROFILE_GRID - 1) as f64)
        .collect();
    let evaluated: Vec<(f64, (f64, Option<FittedModel>))> = grid.par_iter().map(|&s| (s, probe(s))).collect();
    let mut probes: Vec<(f64, f64)> = evaluated.iter().map(|(s, (l, _))| (to_value(*s), *l)).collect();
    let mut best: Option<(f64, f64, FittedModel)> = None;
    let consider = |s: f64, l: f64, m: Option<FittedModel>, best: &mut Option<(f64, f64, FittedModel)>| {
        if let Some(m) = m {
            if best.as_ref().is_none_or(|(_, bl, _)| l > *bl) {
                *best = Some((s, l, m));
            }
        }
    };
    let mut imax = 0;
    for (i, (s, (l, m))) in evaluated.into_iter().enumerate() {
        if l > probes[imax].1 {
            imax = i;
        }
        consider(s, l, m, &mut best);
    }
    if best.is_none() {
        return Err(Error::Fit("every profile probe failed".into()));
    }

    let mut a = grid[imax.saturating_sub(1)];
    let mut b = grid[(imax + 1).min(PROFILE_GRID - 1)];
    let mut x1 = b - GOLDEN * (b - a);
    let mut x2 = a + GOLDEN * (b - a);
    let (mut f1, m1) = probe(x1);
    probes.push((to_value(x1), f1));
    consider(x1, f1, m1, &mut best);
    let (mut f2, m2) = probe(x2);
    probes.push((to_value(x2), f2));
    consider(x2, f2, m2, &mut best);
    while b - a > tol {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - GOLDEN * (b - a);
            let (f, m) = probe(x1);
            f1 = f;
            probes.push((to_value(x1), f));
            consider(x1, f, m, &mut best);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + GOLDEN * (b - a);
            let (f, m) = probe(x2);
            f2 = f;
            probes.push((to_value(x2), f));
            consider(x2, f, m, &mut best);
        }
    }
    let (s, _, model) = best.expect("checked above");
    Ok(ProfileResult {
        best: to_value(s),
        model,
        probes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StandardErrors {
    /// Standard errors for each λ parameter followed by `log ψ`.
    Available { names: Vec<String>, values: Vec<f64> },
    Unavailable { reason: String },
}

impl StandardErrors {
    pub fn values(&self) -> Option<&[f64]> {
        match self {
            StandardErrors::Available { values, .. } => Some(values),
            StandardErrors::Unavailable { .. } => None,
        }
    }
}

/// Standard errors of `(λ, log ψ)` from the inverse of the central-difference
/// Hessian of the log marginal likelihood at the fitted values.
pub fn standard_errors(model: &FittedModel) -> StandardErrors {
    if model.status != FitStatus::Converged {
        return StandardErrors::Unavailable {
            reason: format!("model status is {:?}, not converged", model.status),
        };
    }
    let ws = match Workspace::for_model(model) {
        Ok(ws) => ws,
        Err(e) => return StandardErrors::Unavailable { reason: e.to_string() },
    };
    let p = model.lambda.len();
    let mut theta = model.lambda.clone();
    theta.push(model.psi().ln());
    let f = |t: &[f64]| ws.log_likelihood(&t[..p], t[p].exp());
    match numerical_hessian(&f, &theta) {
        Ok(h) => {
            let neg = -h;
            match neg.clone().cholesky() {
                Some(ch) => {
                    let inv = ch.inverse();
                    let mut names = model.anova.param_names();
                    names.push("log_psi".into());
                    StandardErrors::Available {
                        names,
                        values: (0..=p).map(|i| inv[(i, i)].sqrt()).collect(),
                    }
                }
                None => StandardErrors::Unavailable {
                    reason: format!(
                        "negative Hessian is not positive definite (eigenvalues {:?})",
                        neg.symmetric_eigen().eigenvalues.as_slice()
                    ),
                },
            }
        }
        Err(e) => StandardErrors::Unavailable { reason: e.to_string() },
    }
}

/// Central second differences with step `1e−4·(1+|θ_i|)`.
pub fn numerical_hessian(f: &dyn Fn(&[f64]) -> Result<f64>, theta: &[f64]) -> Result<DMatrix<f64>> {
    let p = theta.len();
    let step: Vec<f64> = theta.iter().map(|t| 1e-4 * (1.0 + t.abs())).collect();
    let at = |di: &[(usize, f64)]| {
        let mut t = theta.to_vec();
        for &(i, d) in di {
            t[i] += d;
        }
        f(&t)
    };
    let f0 = f(theta)?;
    let mut h = DMatrix::zeros(p, p);
    for i in 0..p {
        let hi = step[i];
        h[(i, i)] = (at(&[(i, hi)])? - 2.0 * f0 + at(&[(i, -hi)])?) / (hi * hi);
        for j in 0..i {
            let hj = step[j];
            let v = (at(&[(i, hi), (j, hj)])? - at(&[(i, hi), (j, -hj)])? - at(&[(i, -hi), (j, hj)])?
                + at(&[(i, -hi), (j, -hj)])?)
                / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CovariateColumn;

    fn one_term(n: usize, p: DMatrix<f64>) -> (AnovaSpec, GramSet) {
        assert_eq!(p.nrows(), n);
        let spec = AnovaSpec::new(vec!["x".into()], vec![vec!["x".into()]], Parameterization::Parsimonious).unwrap();
        let mut gs = GramSet::default();
        gs.insert("x", p);
        (spec, gs)
    }

    #[test]
    fn e_step_with_zero_kernel() {
        let (spec, gs) = one_term(3, DMatrix::identity(3, 3));
        let ws = Workspace::new(spec, &gs, &[1.0, 2.0, 4.0], 0.0).unwrap();
        let e = ws.e_step(&[0.0], 2.5).unwrap();
        assert!(e.w.amax() == 0.0);
        assert!((e.w_tilde() - DMatrix::identity(3, 3) * 2.5).amax() < 1e-14);
    }

    #[test]
    fn e_step_with_identity_kernel() {
        let (spec, gs) = one_term(3, DMatrix::identity(3, 3));
        let y = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let ws = Workspace::new(spec, &gs, y.as_slice(), 0.0).unwrap();
        let e = ws.e_step(&[1.0], 1.0).unwrap();
        assert!((&e.w - &y / 2.0).amax() < 1e-14);
        let expected = DMatrix::identity(3, 3) * 0.5 + &y * y.transpose() / 4.0;
        assert!((e.w_tilde() - expected).amax() < 1e-14);
    }

    #[test]
    fn psi_update_with_zero_kernel() {
        let (spec, gs) = one_term(3, DMatrix::identity(3, 3));
        let y = [1.0, 2.0, 6.0];
        let f0 = 3.0;
        let ws = Workspace::new(spec.clone(), &gs, &y, f0).unwrap();
        let e = ws.e_step(&[0.0], 0.7).unwrap();
        let psi = psi_update(&spec, &e.qform, &[0.0]).unwrap();
        let r2: f64 = y.iter().map(|v| (v - f0).powi(2)).sum();
        assert!((psi - (e.w_tilde().trace() / r2).sqrt()).abs() < 1e-14);
        let q = q_value(&spec, &e.qform, &[0.0], 0.7);
        assert!((q - (-0.5 * 0.7 * r2 - 0.5 / 0.7 * e.w_tilde().trace())).abs() < 1e-12);
    }

    #[test]
    fn starts_are_seeded() {
        let c = FitConfig { seed: 7, ..Default::default() };
        assert_eq!(c.starts(3), c.starts(3));
        assert_eq!(c.starts(3)[0], vec![1.0; 3]);
        assert_eq!(c.starts(3).len(), 8);
        assert_ne!(c.starts(3), FitConfig { seed: 8, ..Default::default() }.starts(3));
    }

    #[test]
    fn linear_fit_recovers_noiseless_line() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 4.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let data = Dataset::new(vec![CovariateColumn::real_scalar("x", &x)], "y", y.clone()).unwrap();
        let anova = AnovaSpec::new(vec!["x".into()], vec![vec!["x".into()]], Parameterization::Parsimonious).unwrap();
        let spec = ModelSpec::new(anova, vec![KernelSpec::canonical()]).unwrap();
        let model = em_fit(&data, &spec, &FitConfig::default()).unwrap();
        let (fit, _) = model.fitted();
        let rmse = (fit.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 20.0).sqrt();
        assert!(rmse < 1e-3, "rmse {rmse}, psi {}", model.psi());
        assert!(model.psi() > 1e3);
    }
}
