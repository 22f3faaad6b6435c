//! ANOVA kernel composition.
//!
//! A model is a list of interaction terms, each a set of covariates. The
//! kernel of a term is the entrywise product of its covariates' Grams, and the
//! model kernel is a weighted sum of term kernels:
//!
//! * parsimonious: one scale `λ_v` per covariate, term weight `Π_{v∈A} λ_v`;
//! * extended: one free weight `υ_A` per term.
//!
//! The intercept (empty term) is not part of the kernel; it is carried by the
//! prior mean.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Parsimonious,
    Extended,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnovaSpec {
    pub covariates: Vec<String>,
    /// Sorted covariate indices per term.
    pub terms: Vec<Vec<usize>>,
    pub parameterization: Parameterization,
}

/// Splits `"C + X + C*X"` into `[["C"], ["X"], ["C", "X"]]`.
pub fn parse_terms(s: &str) -> Result<Vec<Vec<String>>> {
    s.split(['+', ','])
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let names: Vec<String> = t.split('*').map(|v| v.trim().to_string()).collect();
            if names.iter().any(String::is_empty) {
                Err(Error::Spec(format!("malformed term `{t}`")))
            } else {
                Ok(names)
            }
        })
        .collect()
}

fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|v| b.contains(v))
}

/// All nonempty subsets of the members of a Sperner family, deduplicated and
/// ordered by (size, lexicographic).
pub fn expand_sperner(family: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
    let sets: Vec<Vec<usize>> = family
        .iter()
        .map(|s| {
            let set: BTreeSet<usize> = s.iter().copied().collect();
            set.into_iter().collect()
        })
        .collect();
    for (i, a) in sets.iter().enumerate() {
        if a.is_empty() {
            return Err(Error::Spec("Sperner family members must be nonempty".into()));
        }
        for (j, b) in sets.iter().enumerate() {
            if i != j && is_subset(a, b) {
                return Err(Error::Spec(format!(
                    "not a Sperner family: member {a:?} is contained in member {b:?}"
                )));
            }
        }
    }
    let mut out: BTreeSet<(usize, Vec<usize>)> = BTreeSet::new();
    for s in &sets {
        let k = s.len();
        for mask in 1u64..(1u64 << k) {
            let subset: Vec<usize> = (0..k).filter(|b| mask & (1 << b) != 0).map(|b| s[b]).collect();
            out.insert((subset.len(), subset));
        }
    }
    Ok(out.into_iter().map(|(_, s)| s).collect())
}

/// Named per-covariate Grams (train–train or new–train).
#[derive(Clone, Debug, Default)]
pub struct GramSet {
    pub grams: Vec<(String, DMatrix<f64>)>,
}

impl GramSet {
    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.grams.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn insert(&mut self, name: impl Into<String>, gram: DMatrix<f64>) {
        let name = name.into();
        self.grams.retain(|(n, _)| *n != name);
        self.grams.push((name, gram));
    }
}

impl AnovaSpec {
    pub fn new(
        covariates: Vec<String>,
        terms: Vec<Vec<String>>,
        parameterization: Parameterization,
    ) -> Result<Self> {
        let unique: BTreeSet<&String> = covariates.iter().collect();
        if unique.len() != covariates.len() {
            return Err(Error::Spec("duplicate covariate names".into()));
        }
        let mut seen = BTreeSet::new();
        let mut idx_terms = Vec::with_capacity(terms.len());
        for t in &terms {
            if t.is_empty() {
                return Err(Error::Spec("empty term; the intercept is handled by the prior mean".into()));
            }
            let mut idx = t
                .iter()
                .map(|name| {
                    covariates
                        .iter()
                        .position(|c| c == name)
                        .ok_or_else(|| Error::Spec(format!("term references unknown covariate `{name}`")))
                })
                .collect::<Result<Vec<usize>>>()?;
            idx.sort_unstable();
            if idx.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Spec(format!("term `{}` repeats a covariate", t.join("*"))));
            }
            if !seen.insert(idx.clone()) {
                return Err(Error::Spec(format!("duplicate term `{}`", t.join("*"))));
            }
            idx_terms.push(idx);
        }
        if idx_terms.is_empty() {
            return Err(Error::Spec("a model needs at least one term".into()));
        }
        Ok(Self {
            covariates,
            terms: idx_terms,
            parameterization,
        })
    }

    /// Terms from the power-set expansion of a Sperner family of covariate names.
    pub fn from_sperner(
        covariates: Vec<String>,
        family: &[Vec<String>],
        parameterization: Parameterization,
    ) -> Result<Self> {
        let idx = family
            .iter()
            .map(|s| {
                s.iter()
                    .map(|name| {
                        covariates
                            .iter()
                            .position(|c| c == name)
                            .ok_or_else(|| Error::Spec(format!("unknown covariate `{name}`")))
                    })
                    .collect::<Result<Vec<usize>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let terms = expand_sperner(&idx)?;
        Ok(Self {
            covariates,
            terms,
            parameterization,
        })
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    /// Covariates that appear in at least one term, in covariate order.
    pub fn used_covariates(&self) -> Vec<usize> {
        let used: BTreeSet<usize> = self.terms.iter().flatten().copied().collect();
        used.into_iter().collect()
    }

    pub fn n_params(&self) -> usize {
        match self.parameterization {
            Parameterization::Parsimonious => self.used_covariates().len(),
            Parameterization::Extended => self.terms.len(),
        }
    }

    pub fn term_label(&self, t: usize) -> String {
        self.terms[t]
            .iter()
            .map(|&v| self.covariates[v].as_str())
            .collect::<Vec<_>>()
            .join("*")
    }

    pub fn param_names(&self) -> Vec<String> {
        match self.parameterization {
            Parameterization::Parsimonious => self
                .used_covariates()
                .into_iter()
                .map(|v| self.covariates[v].clone())
                .collect(),
            Parameterization::Extended => (0..self.terms.len()).map(|t| self.term_label(t)).collect(),
        }
    }

    /// λ slot of each covariate (parsimonious only).
    fn slots(&self) -> Vec<Option<usize>> {
        let mut slots = vec![None; self.covariates.len()];
        for (k, v) in self.used_covariates().into_iter().enumerate() {
            slots[v] = Some(k);
        }
        slots
    }

    fn check_len(&self, lambda: &[f64]) {
        assert_eq!(
            lambda.len(),
            self.n_params(),
            "scale vector has {} entries, model has {} parameters",
            lambda.len(),
            self.n_params()
        );
    }

    /// Weight of each term kernel at `lambda`.
    pub fn coefficients(&self, lambda: &[f64]) -> Vec<f64> {
        self.check_len(lambda);
        match self.parameterization {
            Parameterization::Extended => lambda.to_vec(),
            Parameterization::Parsimonious => {
                let slots = self.slots();
                self.terms
                    .iter()
                    .map(|t| t.iter().map(|&v| lambda[slots[v].unwrap()]).product())
                    .collect()
            }
        }
    }

    /// Derivative of each term weight with respect to parameter `k`.
    pub fn d_coefficients(&self, lambda: &[f64], k: usize) -> Vec<f64> {
        self.check_len(lambda);
        match self.parameterization {
            Parameterization::Extended => (0..self.terms.len()).map(|t| f64::from(t == k)).collect(),
            Parameterization::Parsimonious => {
                let slots = self.slots();
                self.terms
                    .iter()
                    .map(|t| {
                        if t.iter().any(|&v| slots[v] == Some(k)) {
                            t.iter()
                                .filter(|&&v| slots[v] != Some(k))
                                .map(|&v| lambda[slots[v].unwrap()])
                                .product()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        }
    }

    /// The same terms with one free weight per term.
    pub fn to_extended(&self) -> Self {
        Self {
            parameterization: Parameterization::Extended,
            ..self.clone()
        }
    }
}

/// Per-term entrywise products `Π_{v∈A} H_v`, computed once and reused for
/// every scale update.
#[derive(Clone, Debug)]
pub struct TermCache {
    pub products: Vec<DMatrix<f64>>,
}

impl TermCache {
    pub fn new(spec: &AnovaSpec, grams: &GramSet) -> Result<Self> {
        let mut products = Vec::with_capacity(spec.terms.len());
        for t in &spec.terms {
            let mut acc: Option<DMatrix<f64>> = None;
            for &v in t {
                let name = &spec.covariates[v];
                let g = grams
                    .get(name)
                    .ok_or_else(|| Error::Spec(format!("no Gram for covariate `{name}`")))?;
                acc = Some(match acc {
                    None => g.clone(),
                    Some(a) => {
                        if a.shape() != g.shape() {
                            return Err(Error::Dimension(format!(
                                "Gram for `{name}` is {:?}, expected {:?}",
                                g.shape(),
                                a.shape()
                            )));
                        }
                        a.component_mul(g)
                    }
                });
            }
            products.push(acc.expect("terms are nonempty"));
        }
        Ok(Self { products })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.products[0].shape()
    }

    /// `Σ_A c_A P_A`
    pub fn combine(&self, coefs: &[f64]) -> DMatrix<f64> {
        let (r, c) = self.shape();
        let mut h: DMatrix<f64> = DMatrix::zeros(r, c);
        for (p, &w) in self.products.iter().zip(coefs) {
            if w != 0.0 {
                h.zip_apply(p, |a, b| *a += w * b);
            }
        }
        h
    }

    pub fn assemble(&self, spec: &AnovaSpec, lambda: &[f64]) -> DMatrix<f64> {
        self.combine(&spec.coefficients(lambda))
    }

    pub fn d_assemble(&self, spec: &AnovaSpec, lambda: &[f64], k: usize) -> DMatrix<f64> {
        self.combine(&spec.d_coefficients(lambda, k))
    }
}

/// `H_λ` together with the term cache used to build it.
pub fn assemble(spec: &AnovaSpec, lambda: &[f64], grams: &GramSet) -> Result<(DMatrix<f64>, TermCache)> {
    if lambda.len() != spec.n_params() {
        return Err(Error::Dimension(format!(
            "scale vector has {} entries, model has {} parameters",
            lambda.len(),
            spec.n_params()
        )));
    }
    if lambda.iter().any(|v| !v.is_finite()) {
        return Err(Error::Spec("scale parameters must be finite".into()));
    }
    let cache = TermCache::new(spec, grams)?;
    let h = cache.assemble(spec, lambda);
    Ok((h, cache))
}

/// `∂H_λ/∂λ_k`.
pub fn d_assemble(spec: &AnovaSpec, lambda: &[f64], grams: &GramSet, k: usize) -> Result<DMatrix<f64>> {
    if k >= spec.n_params() {
        return Err(Error::Dimension(format!("parameter index {k} out of range")));
    }
    let cache = TermCache::new(spec, grams)?;
    Ok(cache.d_assemble(spec, lambda, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn sym(n: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed;
        let m = DMatrix::from_fn(n, n, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        });
        &m + m.transpose()
    }

    #[test]
    fn sperner_expansion_examples() {
        assert_eq!(expand_sperner(&[vec![1, 2]]).unwrap(), vec![vec![1], vec![2], vec![1, 2]]);
        assert_eq!(
            expand_sperner(&[vec![1, 2], vec![2, 3]]).unwrap(),
            vec![vec![1], vec![2], vec![3], vec![1, 2], vec![2, 3]]
        );
        let err = expand_sperner(&[vec![1], vec![1, 2]]).unwrap_err();
        assert!(err.to_string().contains("[1]") && err.to_string().contains("[1, 2]"));
    }

    #[test]
    fn parse_term_lists() {
        assert_eq!(
            parse_terms("C + X + C*X").unwrap(),
            vec![names(&["C"]), names(&["X"]), names(&["C", "X"])]
        );
        assert!(parse_terms("C + *X").is_err());
    }

    #[test]
    fn spec_validation() {
        let cov = names(&["a", "b"]);
        assert!(AnovaSpec::new(cov.clone(), vec![names(&["c"])], Parameterization::Parsimonious).is_err());
        assert!(AnovaSpec::new(
            cov.clone(),
            vec![names(&["a", "b"]), names(&["b", "a"])],
            Parameterization::Parsimonious
        )
        .is_err());
        assert!(AnovaSpec::new(cov, vec![names(&["a", "a"])], Parameterization::Parsimonious).is_err());
    }

    #[test]
    fn single_term_scaling() {
        let spec = AnovaSpec::new(names(&["a"]), vec![names(&["a"])], Parameterization::Parsimonious).unwrap();
        let h1 = sym(4, 1);
        let mut gs = GramSet::default();
        gs.insert("a", h1.clone());
        let (h, _) = assemble(&spec, &[2.0], &gs).unwrap();
        assert!((h - h1 * 2.0).amax() < 1e-15);
    }

    #[test]
    fn two_covariate_full_interaction() {
        let spec = AnovaSpec::from_sperner(names(&["a", "b"]), &[names(&["a", "b"])], Parameterization::Parsimonious)
            .unwrap();
        let (h1, h2) = (sym(5, 1), sym(5, 2));
        let mut gs = GramSet::default();
        gs.insert("a", h1.clone());
        gs.insert("b", h2.clone());
        let (l1, l2) = (0.7, -1.3);
        let (h, cache) = assemble(&spec, &[l1, l2], &gs).unwrap();
        let expected = &h1 * l1 + &h2 * l2 + h1.component_mul(&h2) * (l1 * l2);
        assert!((&h - expected).amax() < 1e-12);

        let d1 = cache.d_assemble(&spec, &[l1, l2], 0);
        let expected = &h1 + h1.component_mul(&h2) * l2;
        assert!((d1 - expected).amax() < 1e-12);

        let ext = spec.to_extended();
        let upsilon = spec.coefficients(&[l1, l2]);
        let he = cache.assemble(&ext, &upsilon);
        assert!((he - &h).amax() < 1e-12);
        let d = cache.d_assemble(&ext, &upsilon, 2);
        assert_eq!(d, h1.component_mul(&h2));
    }

    #[test]
    fn missing_gram_is_an_error() {
        let spec = AnovaSpec::new(names(&["a", "b"]), vec![names(&["a", "b"])], Parameterization::Extended).unwrap();
        let mut gs = GramSet::default();
        gs.insert("a", sym(3, 1));
        assert!(matches!(assemble(&spec, &[1.0], &gs), Err(Error::Spec(_))));
    }

    #[test]
    fn longitudinal_parameter_counts() {
        let cov = names(&["T", "C", "X"]);
        let fams: [Vec<Vec<String>>; 5] = [
            vec![names(&["T"])],
            vec![names(&["T", "X"])],
            vec![names(&["T", "C"])],
            vec![names(&["T", "C"]), names(&["T", "X"])],
            vec![names(&["T", "C", "X"])],
        ];
        let pars: Vec<usize> = fams
            .iter()
            .map(|f| AnovaSpec::from_sperner(cov.clone(), f, Parameterization::Parsimonious).unwrap().n_params())
            .collect();
        let ext: Vec<usize> = fams
            .iter()
            .map(|f| AnovaSpec::from_sperner(cov.clone(), f, Parameterization::Extended).unwrap().n_params())
            .collect();
        assert_eq!(pars, vec![1, 2, 2, 3, 3]);
        assert_eq!(&ext[1..], &[3, 3, 5, 7]);
    }
}
