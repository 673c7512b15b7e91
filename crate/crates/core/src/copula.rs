//! Parametric copula families.
//!
//! Only the independence copula (any dimension) and the bivariate Clayton
//! copula with positive dependence (`theta > 0`) are implemented. All
//! operations are pure; sampling draws from a caller-supplied RNG.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Interior clamp applied to copula arguments before evaluating powers.
pub const BOUNDARY_EPS: f64 = 1e-12;

/// Midpoint grid resolution used by [`CopulaModel::spearman_rho`].
pub const SPEARMAN_GRID: usize = 400;

/// Bisection bracket for [`CopulaModel::theta_from_rho`].
pub const THETA_BRACKET: (f64, f64) = (1e-3, 50.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopulaFamily {
    Independence,
    Clayton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopulaModel {
    pub family: CopulaFamily,
    pub dim: usize,
}

impl CopulaModel {
    pub fn independence(dim: usize) -> Self {
        Self { family: CopulaFamily::Independence, dim }
    }

    pub fn clayton() -> Self {
        Self { family: CopulaFamily::Clayton, dim: 2 }
    }

    /// Number of scalar dependence parameters.
    pub fn n_params(&self) -> usize {
        match self.family {
            CopulaFamily::Independence => 0,
            CopulaFamily::Clayton => 1,
        }
    }

    pub fn validate(&self, theta: f64) -> Result<()> {
        if self.dim == 0 {
            return Err(invalid("copula dimension must be positive"));
        }
        match self.family {
            CopulaFamily::Independence => Ok(()),
            CopulaFamily::Clayton => {
                if self.dim != 2 {
                    return Err(invalid(format!(
                        "Clayton copula is implemented for dimension 2, got {}",
                        self.dim
                    )));
                }
                if theta == 0.0 {
                    return Err(invalid("Clayton theta = 0 is excluded from the parameter set"));
                }
                if !(theta.is_finite() && theta > 0.0) {
                    return Err(invalid(format!(
                        "Clayton theta must be finite and positive, got {theta}"
                    )));
                }
                Ok(())
            }
        }
    }

    fn check_point(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(crate::Error::Dimension(format!(
                "copula of dimension {} evaluated at a point of length {}",
                self.dim,
                v.len()
            )));
        }
        if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(invalid(format!("copula argument {x} outside [0, 1]")));
        }
        Ok(())
    }

    /// Copula density `c(v | theta)`.
    pub fn density(&self, theta: f64, v: &[f64]) -> Result<f64> {
        self.validate(theta)?;
        self.check_point(v)?;
        Ok(match self.family {
            CopulaFamily::Independence => 1.0,
            CopulaFamily::Clayton => clayton_density(theta, v[0], v[1]),
        })
    }

    /// Copula distribution function `C(v | theta)`.
    pub fn cdf(&self, theta: f64, v: &[f64]) -> Result<f64> {
        self.validate(theta)?;
        self.check_point(v)?;
        Ok(match self.family {
            CopulaFamily::Independence => v.iter().product(),
            CopulaFamily::Clayton => clayton_cdf(theta, v[0], v[1]),
        })
    }

    /// Population Spearman rho, `12 * int C - 3`, on the default grid.
    pub fn spearman_rho(&self, theta: f64) -> Result<f64> {
        self.spearman_rho_with_grid(theta, SPEARMAN_GRID)
    }

    pub fn spearman_rho_with_grid(&self, theta: f64, grid: usize) -> Result<f64> {
        self.validate(theta)?;
        match self.family {
            CopulaFamily::Independence => Ok(0.0),
            CopulaFamily::Clayton => {
                let h = 1.0 / grid as f64;
                let pows: Vec<f64> = (0..grid)
                    .map(|i| ((i as f64 + 0.5) * h).powf(-theta))
                    .collect();
                let mut acc = 0.0;
                for a in &pows {
                    let mut row = 0.0;
                    for b in &pows {
                        row += (a + b - 1.0).powf(-1.0 / theta);
                    }
                    acc += row;
                }
                Ok(12.0 * acc * h * h - 3.0)
            }
        }
    }

    /// Inverts [`Self::spearman_rho`] by bisection on [`THETA_BRACKET`].
    pub fn theta_from_rho(&self, rho: f64) -> Result<f64> {
        match self.family {
            CopulaFamily::Independence => Err(invalid(
                "independence copula has no dependence parameter to solve for",
            )),
            CopulaFamily::Clayton => {
                if !(rho > 0.0 && rho < 1.0) {
                    return Err(invalid(format!(
                        "rho = {rho} outside the achievable Clayton range (0, 1)"
                    )));
                }
                let (mut lo, mut hi) = THETA_BRACKET;
                let r_lo = self.spearman_rho(lo)?;
                let r_hi = self.spearman_rho(hi)?;
                if rho <= r_lo || rho >= r_hi {
                    return Err(invalid(format!(
                        "rho = {rho} outside the bracket range [{r_lo:.6}, {r_hi:.6}]"
                    )));
                }
                while hi - lo > 1e-6 {
                    let mid = 0.5 * (lo + hi);
                    if self.spearman_rho(mid)? < rho {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }

    /// Draws one point into `out` by conditional inversion.
    pub fn draw<R: Rng + ?Sized>(&self, theta: f64, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        match self.family {
            CopulaFamily::Independence => {
                for x in out.iter_mut() {
                    *x = rng.sample(Open01);
                }
            }
            CopulaFamily::Clayton => {
                let v1: f64 = rng.sample(Open01);
                let w: f64 = rng.sample(Open01);
                out[0] = v1;
                out[1] = clayton_conditional_inverse(theta, v1, w);
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, theta: f64, rng: &mut R, n: usize) -> Result<Vec<Vec<f64>>> {
        self.validate(theta)?;
        Ok((0..n)
            .map(|_| {
                let mut v = vec![0.0; self.dim];
                self.draw(theta, rng, &mut v);
                v
            })
            .collect())
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(BOUNDARY_EPS, 1.0 - BOUNDARY_EPS)
}

pub(crate) fn clayton_density(theta: f64, v1: f64, v2: f64) -> f64 {
    let (v1, v2) = (clamp01(v1), clamp01(v2));
    let (l1, l2) = (v1.ln(), v2.ln());
    // a - 1 and b - 1 kept separate so small theta stays accurate
    let am1 = (-theta * l1).exp_m1();
    let bm1 = (-theta * l2).exp_m1();
    let log_s = (am1 + bm1).ln_1p();
    let log_c = (1.0 + theta).ln() - (1.0 + theta) * (l1 + l2) - (2.0 + 1.0 / theta) * log_s;
    log_c.exp()
}

pub(crate) fn clayton_cdf(theta: f64, v1: f64, v2: f64) -> f64 {
    if v1 <= 0.0 || v2 <= 0.0 {
        return 0.0;
    }
    if v1 >= 1.0 {
        return v2.min(1.0);
    }
    if v2 >= 1.0 {
        return v1;
    }
    let am1 = (-theta * v1.ln()).exp_m1();
    let bm1 = (-theta * v2.ln()).exp_m1();
    (-(am1 + bm1).ln_1p() / theta).exp()
}

fn clayton_conditional_inverse(theta: f64, v1: f64, w: f64) -> f64 {
    let t = w.powf(-theta / (1.0 + theta)) - 1.0;
    let v2 = (t * v1.powf(-theta) + 1.0).powf(-1.0 / theta);
    v2.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Sample Spearman rank correlation of the first two coordinates.
pub fn sample_spearman(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let ranks = |k: usize| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| points[a][k].total_cmp(&points[b][k]));
        let mut r = vec![0.0; n];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    };
    let (r1, r2) = (ranks(0), ranks(1));
    let mean = (n as f64 - 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (r1[i] - mean, r2[i] - mean);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}
