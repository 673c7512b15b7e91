//! Marginal families, hypothesis-conditional joint densities and the
//! prior-weighted mixture over both hypotheses.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::copula::{CopulaFamily, CopulaModel};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginalFamily {
    Gamma,
}

/// Shape-scale Gamma marginal (mean `shape * scale`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    pub family: MarginalFamily,
    pub shape: f64,
    pub scale: f64,
}

impl MarginalModel {
    pub fn gamma(shape: f64, scale: f64) -> Result<Self> {
        let m = Self { family: MarginalFamily::Gamma, shape, scale };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape.is_finite() && self.shape > 0.0 && self.scale.is_finite() && self.scale > 0.0) {
            return Err(invalid(format!(
                "gamma marginal needs positive shape and scale, got ({}, {})",
                self.shape, self.scale
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    /// Density; zero below the support.
    pub fn pdf(&self, y: f64) -> f64 {
        if y < 0.0 {
            return 0.0;
        }
        let (k, s) = (self.shape, self.scale);
        if y == 0.0 {
            return match k.partial_cmp(&1.0) {
                Some(std::cmp::Ordering::Less) => f64::INFINITY,
                Some(std::cmp::Ordering::Equal) => 1.0 / s,
                _ => 0.0,
            };
        }
        ((k - 1.0) * y.ln() - y / s - ln_gamma(k) - k * s.ln()).exp()
    }

    /// Regularized lower incomplete gamma `P(k, y / s)`.
    pub fn cdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        if y.is_infinite() {
            return 1.0;
        }
        gamma_lr(self.shape, y / self.scale)
    }

    /// Inverse CDF by safeguarded Newton iteration inside a bracket.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(invalid(format!("quantile level {u} outside (0, 1)")));
        }
        let mut lo = 0.0;
        let mut hi = self.mean().max(self.scale);
        while self.cdf(hi) < u {
            lo = hi;
            hi *= 2.0;
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let f = self.cdf(x) - u;
            if f.abs() <= 1e-13 {
                break;
            }
            if f < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let d = self.pdf(x);
            let newton = x - f / d;
            x = if d > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        Ok(x)
    }
}

/// Joint law of the sensor observations under one hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisModel {
    pub copula: CopulaModel,
    /// Dependence parameter; ignored by the independence copula.
    pub theta: f64,
    pub marginals: Vec<MarginalModel>,
}

impl HypothesisModel {
    pub fn new(copula: CopulaModel, theta: f64, marginals: Vec<MarginalModel>) -> Result<Self> {
        let h = Self { copula, theta, marginals };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.marginals.len() != self.copula.dim {
            return Err(Error::Dimension(format!(
                "{} marginals for a copula of dimension {}",
                self.marginals.len(),
                self.copula.dim
            )));
        }
        self.copula.validate(self.theta)?;
        self.marginals.iter().try_for_each(MarginalModel::validate)
    }

    pub fn dim(&self) -> usize {
        self.copula.dim
    }

    /// `c(F_1(y_1), ..., F_L(y_L)) * prod p_i(y_i)`.
    pub fn joint_pdf(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "observation of length {} for a {}-sensor model",
                y.len(),
                self.dim()
            )));
        }
        let mut prod = 1.0;
        for (m, &yi) in self.marginals.iter().zip(y) {
            prod *= m.pdf(yi);
        }
        if prod == 0.0 || self.copula.family == CopulaFamily::Independence {
            return Ok(prod);
        }
        let v: Vec<f64> = self.marginals.iter().zip(y).map(|(m, &yi)| m.cdf(yi)).collect();
        Ok(self.copula.density(self.theta, &v)? * prod)
    }

    /// Names and kinds of the scalar parameters, copula first.
    fn entries(&self) -> Vec<(String, ParamKind)> {
        let mut out = Vec::new();
        if self.copula.n_params() == 1 {
            out.push(("copula".to_string(), ParamKind::Dependence));
        }
        for i in 0..self.marginals.len() {
            out.push((format!("m{i}.shape"), ParamKind::Positive));
            out.push((format!("m{i}.scale"), ParamKind::Positive));
        }
        out
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if self.copula.n_params() == 1 {
            out.push(self.theta);
        }
        for m in &self.marginals {
            out.push(m.shape);
            out.push(m.scale);
        }
        out
    }

    fn set_flat(&mut self, vals: &[f64]) {
        let mut it = vals.iter().copied();
        if self.copula.n_params() == 1 {
            self.theta = it.next().unwrap();
        }
        for m in &mut self.marginals {
            m.shape = it.next().unwrap();
            m.scale = it.next().unwrap();
        }
    }
}

/// Admissible range of a scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Lies in (0, 1).
    Probability,
    /// Copula dependence parameter (Clayton: strictly positive).
    Dependence,
    /// Strictly positive marginal parameter.
    Positive,
}

/// The full parameter `[P0, theta_0, theta_1]` with a free/fixed mask.
///
/// The flat layout is `p0`, then each hypothesis' copula parameter (if any)
/// followed by `shape, scale` per marginal. Entries are named
/// `p0`, `h{j}.copula`, `h{j}.m{i}.shape`, `h{j}.m{i}.scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub p0: f64,
    pub hypotheses: [HypothesisModel; 2],
    pub free: Vec<bool>,
}

impl ParamVector {
    /// All entries fixed.
    pub fn new(p0: f64, h0: HypothesisModel, h1: HypothesisModel) -> Result<Self> {
        let mut p = Self { p0, hypotheses: [h0, h1], free: Vec::new() };
        p.free = vec![false; p.len()];
        p.validate()?;
        Ok(p)
    }

    /// Structural check. The degenerate priors 0 and 1 are accepted here;
    /// estimation and scenario loading require the open interval.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p0) {
            return Err(invalid(format!("p0 = {} outside [0, 1]", self.p0)));
        }
        if self.hypotheses[0].dim() != self.hypotheses[1].dim() {
            return Err(Error::Dimension("hypotheses have different sensor counts".into()));
        }
        if self.free.len() != self.len() {
            return Err(Error::Dimension(format!(
                "free mask of length {} for {} parameters",
                self.free.len(),
                self.len()
            )));
        }
        self.hypotheses.iter().try_for_each(HypothesisModel::validate)
    }

    pub fn validate_interior(&self) -> Result<()> {
        self.validate()?;
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return Err(invalid(format!("p0 = {} outside (0, 1)", self.p0)));
        }
        Ok(())
    }

    pub fn p1(&self) -> f64 {
        1.0 - self.p0
    }

    pub fn dim(&self) -> usize {
        self.hypotheses[0].dim()
    }

    pub fn len(&self) -> usize {
        1 + self.hypotheses.iter().map(|h| h.flat().len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<String> {
        self.entries().into_iter().map(|(n, _)| n).collect()
    }

    pub fn kinds(&self) -> Vec<ParamKind> {
        self.entries().into_iter().map(|(_, k)| k).collect()
    }

    fn entries(&self) -> Vec<(String, ParamKind)> {
        let mut out = vec![("p0".to_string(), ParamKind::Probability)];
        for (j, h) in self.hypotheses.iter().enumerate() {
            out.extend(h.entries().into_iter().map(|(n, k)| (format!("h{j}.{n}"), k)));
        }
        out
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| n == name)
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = vec![self.p0];
        for h in &self.hypotheses {
            out.extend(h.flat());
        }
        out
    }

    pub fn set_flat(&mut self, vals: &[f64]) -> Result<()> {
        if vals.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                vals.len(),
                self.len()
            )));
        }
        self.p0 = vals[0];
        let n0 = self.hypotheses[0].flat().len();
        self.hypotheses[0].set_flat(&vals[1..1 + n0]);
        self.hypotheses[1].set_flat(&vals[1 + n0..]);
        Ok(())
    }

    /// Marks the named entry as estimated (`true`) or known.
    pub fn set_free(&mut self, name: &str, free: bool) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| invalid(format!("unknown parameter name '{name}'")))?;
        self.free[i] = free;
        Ok(())
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.free.len()).filter(|&i| self.free[i]).collect()
    }

    pub fn n_free(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }

    pub fn free_names(&self) -> Vec<String> {
        let names = self.names();
        self.free_indices().into_iter().map(|i| names[i].clone()).collect()
    }

    pub fn free_kinds(&self) -> Vec<ParamKind> {
        let kinds = self.kinds();
        self.free_indices().into_iter().map(|i| kinds[i]).collect()
    }

    pub fn free_values(&self) -> Vec<f64> {
        let flat = self.flat();
        self.free_indices().into_iter().map(|i| flat[i]).collect()
    }

    /// Copy with the free entries replaced; fixed entries keep their values.
    pub fn with_free_values(&self, vals: &[f64]) -> Result<Self> {
        let idx = self.free_indices();
        if vals.len() != idx.len() {
            return Err(Error::Dimension(format!(
                "{} values for {} free parameters",
                vals.len(),
                idx.len()
            )));
        }
        let mut flat = self.flat();
        for (&i, &v) in idx.iter().zip(vals) {
            flat[i] = v;
        }
        let mut out = self.clone();
        out.set_flat(&flat)?;
        Ok(out)
    }

    /// `P0 p(y | H0) + (1 - P0) p(y | H1)`.
    pub fn mixture_pdf(&self, y: &[f64]) -> Result<f64> {
        let a = self.hypotheses[0].joint_pdf(y)?;
        let b = self.hypotheses[1].joint_pdf(y)?;
        Ok(self.p0 * a + (1.0 - self.p0) * b)
    }
}
