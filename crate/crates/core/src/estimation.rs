//! Maximum-likelihood estimation from quantized multi-stage histograms and
//! the Fisher information of quantized samples.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{HypothesisModel, ParamKind, ParamVector};
use crate::quantization::{cell_mass, outcome_masses, CellMass, QuantizedHistogram, QuantizerBank, SensorGrid};

/// Per-hypothesis memo of cell tables and raw per-bank outcome masses.
///
/// Fixed hypotheses are computed once; a hypothesis whose parameters
/// change is recomputed on the next call.
#[derive(Default)]
pub struct PmfEvaluator {
    slots: [HashMap<Vec<u64>, Slot>; 2],
}

struct Slot {
    params: Vec<u64>,
    mass: Arc<CellMass>,
    raw: Vec<Vec<f64>>,
}

fn param_key(h: &HypothesisModel) -> Vec<u64> {
    let mut k = vec![h.copula.family as u64, h.theta.to_bits()];
    for m in &h.marginals {
        k.push(m.shape.to_bits());
        k.push(m.scale.to_bits());
    }
    k
}

fn grid_key(grids: &[SensorGrid]) -> Vec<u64> {
    grids.iter().flat_map(|g| [g.y_min.to_bits(), g.y_max.to_bits(), g.delta.to_bits()]).collect()
}

impl PmfEvaluator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Renormalized pmfs of each bank under hypotheses 0 and 1.
    pub fn hypothesis_pmfs(&mut self, params: &ParamVector, banks: &[&QuantizerBank]) -> Result<[Vec<Vec<f64>>; 2]> {
        let mut out: [Vec<Vec<f64>>; 2] = [Vec::with_capacity(banks.len()), Vec::with_capacity(banks.len())];
        for (j, h) in params.hypotheses.iter().enumerate() {
            let pkey = param_key(h);
            // banks sharing grids share one cell table
            let mut by_grid: Vec<(Vec<u64>, Vec<usize>)> = Vec::new();
            for (b, bank) in banks.iter().enumerate() {
                let gk = grid_key(&bank.grids());
                match by_grid.iter_mut().find(|(k, _)| *k == gk) {
                    Some((_, v)) => v.push(b),
                    None => by_grid.push((gk, vec![b])),
                }
            }
            let mut pmfs = vec![Vec::new(); banks.len()];
            for (gk, members) in by_grid {
                let stale = self.slots[j].get(&gk).is_none_or(|s| s.params != pkey || s.raw.len() != members.len());
                let slot = if stale {
                    let mass = match self.slots[j].get(&gk) {
                        Some(s) if s.params == pkey => s.mass.clone(),
                        _ => Arc::new(cell_mass(h, &banks[members[0]].grids())?),
                    };
                    self.slots[j].insert(gk.clone(), Slot { params: pkey.clone(), mass, raw: Vec::new() });
                    let slot = self.slots[j].get_mut(&gk).unwrap();
                    for &b in &members {
                        slot.raw.push(outcome_masses(&slot.mass, banks[b])?);
                    }
                    slot
                } else {
                    self.slots[j].get_mut(&gk).unwrap()
                };
                for (k, &b) in members.iter().enumerate() {
                    let raw = &slot.raw[k];
                    let total: f64 = raw.iter().sum();
                    if !(total > 0.0) {
                        return Err(invalid("model puts no mass inside the observation window"));
                    }
                    pmfs[b] = raw.iter().map(|x| x / total).collect();
                }
            }
            out[j] = pmfs;
        }
        Ok(out)
    }

    /// Mixture pmf per bank.
    pub fn mixture_pmfs(&mut self, params: &ParamVector, banks: &[&QuantizerBank]) -> Result<Vec<Vec<f64>>> {
        let [f0, f1] = self.hypothesis_pmfs(params, banks)?;
        let p0 = params.p0;
        Ok(f0
            .iter()
            .zip(&f1)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| p0 * x + (1.0 - p0) * y).collect())
            .collect())
    }

    /// Log-likelihood of the histogram at the given free-parameter values.
    pub fn log_likelihood(&mut self, free: &[f64], hist: &QuantizedHistogram, template: &ParamVector) -> Result<f64> {
        let params = admissible(template, free)?;
        let banks: Vec<&QuantizerBank> = hist.groups.iter().map(|g| &g.bank).collect();
        let pmfs = self.mixture_pmfs(&params, &banks)?;
        Ok(histogram_log_likelihood(hist, &pmfs))
    }
}

fn admissible(template: &ParamVector, free: &[f64]) -> Result<ParamVector> {
    let params = template.with_free_values(free)?;
    for (v, k) in free.iter().zip(template.free_kinds()) {
        let ok = match k {
            ParamKind::Probability => *v > 0.0 && *v < 1.0,
            ParamKind::Dependence | ParamKind::Positive => v.is_finite() && *v > 0.0,
        };
        if !ok {
            return Err(invalid(format!("free parameter value {v} outside its admissible set")));
        }
    }
    params.validate_interior()?;
    Ok(params)
}

/// `sum_j sum_m K_m^(j) log f_m^(j)`; zero counts contribute nothing and a
/// positive count on a zero-probability outcome gives `-inf`.
pub fn histogram_log_likelihood(hist: &QuantizedHistogram, pmfs: &[Vec<f64>]) -> f64 {
    let mut ll = 0.0;
    for (g, f) in hist.groups.iter().zip(pmfs) {
        let mut group = 0.0;
        for (&k, &p) in g.counts.iter().zip(f) {
            if k == 0 {
                continue;
            }
            if p <= 0.0 {
                return f64::NEG_INFINITY;
            }
            group += k as f64 * p.ln();
        }
        ll += group;
    }
    ll
}

/// Quantized-data log-likelihood of the free parameters.
pub fn log_likelihood(free: &[f64], hist: &QuantizedHistogram, template: &ParamVector) -> Result<f64> {
    PmfEvaluator::new().log_likelihood(free, hist, template)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    pub restarts: usize,
    /// Simplex diameter (transformed coordinates) that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial simplex edge in transformed coordinates.
    pub initial_step: f64,
    /// Offset into the quasi-random start sequence.
    pub seed: u64,
    /// Search box for the prior.
    pub p_bounds: (f64, f64),
    /// Search box for copula dependence parameters.
    pub dependence_bounds: (f64, f64),
    /// Search box for positive marginal parameters.
    pub positive_bounds: (f64, f64),
    /// Box the restarts are drawn from.
    pub init_p: (f64, f64),
    pub init_dependence: (f64, f64),
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            tol: 1e-6,
            max_iter: 2000,
            initial_step: 0.3,
            seed: 0,
            p_bounds: (1e-4, 1.0 - 1e-4),
            dependence_bounds: (1e-3, 50.0),
            positive_bounds: (1e-3, 1e3),
            init_p: (0.05, 0.95),
            init_dependence: (0.1, 10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    /// Template with the free entries set to the estimate.
    pub estimate: ParamVector,
    pub free_names: Vec<String>,
    pub free_values: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    /// Simplex iterations of the winning restart.
    pub iterations: usize,
    pub restarts_used: usize,
    /// Gradient norm of the per-sample log-likelihood in transformed
    /// coordinates at the estimate (stationarity check).
    pub grad_norm: f64,
}

/// Maps between natural parameters and the unconstrained search space.
#[derive(Debug, Clone)]
struct Transform {
    kinds: Vec<ParamKind>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Transform {
    fn new(kinds: Vec<ParamKind>, opts: &MleOptions) -> Self {
        let (lo, hi) = kinds
            .iter()
            .map(|k| match k {
                ParamKind::Probability => (logit(opts.p_bounds.0), logit(opts.p_bounds.1)),
                ParamKind::Dependence => (opts.dependence_bounds.0.ln(), opts.dependence_bounds.1.ln()),
                ParamKind::Positive => (opts.positive_bounds.0.ln(), opts.positive_bounds.1.ln()),
            })
            .unzip();
        Self { kinds, lo, hi }
    }

    fn to_natural(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.kinds)
            .map(|(&z, k)| match k {
                ParamKind::Probability => sigmoid(z),
                _ => z.exp(),
            })
            .collect()
    }

    fn to_search(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.kinds)
            .map(|(&x, k)| match k {
                ParamKind::Probability => logit(x),
                _ => x.ln(),
            })
            .collect()
    }

    fn clip(&self, z: &mut [f64]) {
        for ((z, lo), hi) in z.iter_mut().zip(&self.lo).zip(&self.hi) {
            *z = z.clamp(*lo, *hi);
        }
    }
}

/// Outcome of one Nelder-Mead minimization.
#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder-Mead minimization inside a box; trial points are projected onto
/// the box. Converged when the largest vertex distance (max-norm) from the
/// best vertex falls below `tol`.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    step: f64,
    lo: &[f64],
    hi: &[f64],
    tol: f64,
    max_iter: usize,
) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let project = |mut x: Vec<f64>| {
        for i in 0..n {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
        x
    };
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let start = project(x0.to_vec());
    simplex.push((start.clone(), eval(&start)));
    for i in 0..n {
        let mut x = start.clone();
        // step away from the nearer bound so the vertex stays distinct
        x[i] += if x[i] + step <= hi[i] { step } else { -step };
        let x = project(x);
        let v = eval(&x);
        simplex.push((x, v));
    }
    let diameter = |s: &[(Vec<f64>, f64)]| {
        s[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&s[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    };
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if diameter(&simplex) < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let centroid: Vec<f64> = (0..n)
            .map(|i| simplex[..n].iter().map(|(x, _)| x[i]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let along = |t: f64| project(centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect());
        let xr = along(1.0);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst.1 {
            let xc = along(0.5);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc);
            (xc, fc)
        };
        if fc < worst.1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for (x, v) in simplex[1..].iter_mut() {
            *x = project(best.iter().zip(x.iter()).map(|(b, xi)| b + 0.5 * (xi - b)).collect());
            *v = eval(x);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    SimplexResult { x, value, iterations, converged }
}

/// Halton radical inverse of `index` in `base`.
fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    let mut scale = inv;
    while index > 0 {
        out += (index % base) as f64 * scale;
        index /= base;
        scale *= inv;
    }
    inv = out;
    inv
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Quasi-random restart points in natural coordinates.
fn restart_points(template: &ParamVector, opts: &MleOptions) -> Vec<Vec<f64>> {
    let kinds = template.free_kinds();
    let centers = template.free_values();
    (0..opts.restarts.max(1))
        .map(|r| {
            let index = 1 + opts.seed * opts.restarts as u64 + r as u64;
            kinds
                .iter()
                .zip(&centers)
                .enumerate()
                .map(|(d, (k, &c))| {
                    let q = radical_inverse(index, PRIMES[d % PRIMES.len()]);
                    match k {
                        ParamKind::Probability => opts.init_p.0 + q * (opts.init_p.1 - opts.init_p.0),
                        ParamKind::Dependence => {
                            opts.init_dependence.0 + q * (opts.init_dependence.1 - opts.init_dependence.0)
                        }
                        // half to double the template value, uniform in log scale
                        ParamKind::Positive => c * 2f64.powf(2.0 * q - 1.0),
                    }
                })
                .collect()
        })
        .collect()
}

/// Maximizes the quantized log-likelihood over the free parameters.
pub fn mle_fit(hist: &QuantizedHistogram, template: &ParamVector, opts: &MleOptions) -> Result<MleResult> {
    if hist.groups.is_empty() || hist.n_total() == 0 {
        return Err(invalid("histogram is empty"));
    }
    if template.n_free() == 0 {
        return Err(invalid("no free parameters to estimate"));
    }
    let transform = Transform::new(template.free_kinds(), opts);
    let starts = restart_points(template, opts);
    let runs: Vec<SimplexResult> = starts
        .par_iter()
        .map(|x0| {
            let mut ev = PmfEvaluator::new();
            let mut z0 = transform.to_search(x0);
            transform.clip(&mut z0);
            nelder_mead(
                |z| {
                    let x = transform.to_natural(z);
                    match ev.log_likelihood(&x, hist, template) {
                        Ok(ll) => -ll,
                        Err(_) => f64::INFINITY,
                    }
                },
                &z0,
                opts.initial_step,
                &transform.lo,
                &transform.hi,
                opts.tol,
                opts.max_iter,
            )
        })
        .collect();
    // lowest index wins ties, matching sequential order
    let best = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value).then(a.0.cmp(&b.0)))
        .map(|(_, r)| r.clone())
        .unwrap();
    let free_values = transform.to_natural(&best.x);
    let log_likelihood = -best.value;
    let estimate = template.with_free_values(&free_values)?;
    let grad_norm = if log_likelihood.is_finite() {
        let n = hist.n_total() as f64;
        let mut ev = PmfEvaluator::new();
        let g = central_gradient(
            |z| {
                ev.log_likelihood(&transform.to_natural(z), hist, template)
                    .map(|v| v / n)
                    .unwrap_or(f64::NEG_INFINITY)
            },
            &best.x,
            1e-5,
        );
        g.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else {
        f64::NAN
    };
    Ok(MleResult {
        estimate,
        free_names: template.free_names(),
        free_values,
        log_likelihood,
        converged: best.converged && log_likelihood.is_finite(),
        iterations: best.iterations,
        restarts_used: runs.len(),
        grad_norm,
    })
}

/// Central finite differences with absolute step `h`.
pub fn central_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Gradient of the log-likelihood in natural coordinates (central
/// differences, relative step `1e-5`).
pub fn log_likelihood_gradient(free: &[f64], hist: &QuantizedHistogram, template: &ParamVector) -> Result<Vec<f64>> {
    let mut ev = PmfEvaluator::new();
    let mut x = free.to_vec();
    let mut out = Vec::with_capacity(free.len());
    for i in 0..free.len() {
        let h = FD_REL_STEP * free[i].abs().max(1e-3);
        x[i] = free[i] + h;
        let up = ev.log_likelihood(&x, hist, template)?;
        x[i] = free[i] - h;
        let down = ev.log_likelihood(&x, hist, template)?;
        x[i] = free[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

pub const FD_REL_STEP: f64 = 1e-5;

/// Fisher information of one quantized sample, per group and combined.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub names: Vec<String>,
    /// `sum_j w_j I_j`.
    pub matrix: DMatrix<f64>,
    pub per_group: Vec<DMatrix<f64>>,
    pub weights: Vec<f64>,
}

impl FisherInfo {
    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.matrix.clone()).eigenvalues.min()
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).abs().max()
    }
}

/// Categorical Fisher information `sum_m grad f_m grad f_m^T / f_m` from a
/// pmf and its Jacobian (`jac[i][m] = d f_m / d x_i`).
pub fn categorical_fisher(pmf: &[f64], jac: &[Vec<f64>]) -> DMatrix<f64> {
    let k = jac.len();
    let mut m = DMatrix::zeros(k, k);
    for (o, &f) in pmf.iter().enumerate() {
        if f <= 0.0 {
            continue;
        }
        for a in 0..k {
            for b in 0..=a {
                let v = jac[a][o] * jac[b][o] / f;
                m[(a, b)] += v;
                if a != b {
                    m[(b, a)] += v;
                }
            }
        }
    }
    m
}

/// Fisher information at `params` (free entries) for banks with weights
/// `N_j / N`. Gradients by central differences, relative step `1e-5`.
pub fn fisher_info(params: &ParamVector, banks: &[QuantizerBank], weights: &[f64]) -> Result<FisherInfo> {
    if banks.len() != weights.len() || banks.is_empty() {
        return Err(Error::Dimension("one weight per bank required".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
        return Err(invalid(format!("bank weights must be a convex combination, sum = {sum}")));
    }
    if params.n_free() == 0 {
        return Err(invalid("no free parameters"));
    }
    let x = params.free_values();
    admissible(params, &x)?;
    let refs: Vec<&QuantizerBank> = banks.iter().collect();
    let mut ev = PmfEvaluator::new();
    let center = ev.mixture_pmfs(params, &refs)?;
    // jac[group][param][outcome]
    let mut jac = vec![Vec::with_capacity(x.len()); banks.len()];
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = FD_REL_STEP * x[i].abs().max(1e-3);
        xp[i] = x[i] + h;
        let up = ev.mixture_pmfs(&admissible(params, &xp)?, &refs)?;
        xp[i] = x[i] - h;
        let down = ev.mixture_pmfs(&admissible(params, &xp)?, &refs)?;
        xp[i] = x[i];
        for (g, (u, d)) in up.iter().zip(&down).enumerate() {
            jac[g].push(u.iter().zip(d).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>());
        }
    }
    let per_group: Vec<DMatrix<f64>> = center.iter().zip(&jac).map(|(f, j)| categorical_fisher(f, j)).collect();
    let k = x.len();
    let matrix = per_group
        .iter()
        .zip(weights)
        .fold(DMatrix::zeros(k, k), |acc, (m, &w)| acc + m * w);
    Ok(FisherInfo { names: params.free_names(), matrix, per_group, weights: weights.to_vec() })
}

/// Fisher information for the banks of a histogram, weighted by group size.
pub fn histogram_fisher_info(params: &ParamVector, hist: &QuantizedHistogram) -> Result<FisherInfo> {
    let banks: Vec<QuantizerBank> = hist.groups.iter().map(|g| g.bank.clone()).collect();
    fisher_info(params, &banks, &hist.weights())
}

/// Cramer-Rao bound `(N * I)^{-1}`; `None` when the information matrix is
/// singular.
pub fn fisher_crlb(fi: &FisherInfo, n_total: u64) -> Option<DMatrix<f64>> {
    crlb_from_matrix(&fi.matrix, n_total)
}

pub fn crlb_from_matrix(matrix: &DMatrix<f64>, n_total: u64) -> Option<DMatrix<f64>> {
    if n_total == 0 {
        return None;
    }
    let eig = SymmetricEigen::new(matrix.clone());
    let max = eig.eigenvalues.abs().max();
    if !(max > 0.0) || eig.eigenvalues.min() <= 1e-12 * max.max(1.0) {
        return None;
    }
    (matrix * n_total as f64).try_inverse()
}
