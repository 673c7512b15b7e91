//! Versioned TOML scenario files.
//!
//! ```toml
//! version = 1
//! name = "s5-rho0.7"
//!
//! [model]
//! p0 = 0.8
//! free = ["p0", "h1.copula"]
//!
//! [model.h0]
//! copula = "independence"
//! marginals = [{ family = "gamma", shape = 3.0, scale = 4.0 },
//!              { family = "gamma", shape = 5.0, scale = 4.0 }]
//!
//! [model.h1]
//! copula = "clayton"
//! theta = 2.1316        # or `rho`; with both, they must agree to 0.01
//! rho = 0.7
//! marginals = [{ family = "gamma", shape = 5.0, scale = 4.0 },
//!              { family = "gamma", shape = 7.0, scale = 4.0 }]
//!
//! [grid]                # shared by every sensor
//! y_min = 0.0
//! y_max = 60.0
//! delta = 0.5
//!
//! [design]
//! # per sensor, one I[slope * y + offset] indicator per bit
//! quantizers = [[{ slope = 3.0, offset = -60.0 }], [{ slope = -3.0, offset = 60.0 }]]
//! fusion_rule = "or"    # "or", "and" or a bit string such as "0111"
//! schedule = "at-fixed-point"
//! start = "best"
//! max_sweeps = 50
//!
//! [costs]
//! c00 = 0.0
//! c01 = 1.0
//! c10 = 2.0
//! c11 = 0.0
//!
//! [stages]
//! count = 10
//! size = 100
//!
//! [estimation]          # optional simplex settings
//! restarts = 5
//!
//! [monte_carlo]
//! seed = 1
//! max_failure_fraction = 0.05
//!
//! [rmse]
//! replicates = 200
//! j_values = [2, 3, 4, 5, 6, 7, 8, 9, 10]
//!
//! [roc]
//! replicates = 100
//! c01 = [1.2, 1.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.04]
//! test_h0 = 1600
//! test_h1 = 400
//! budgets = [{ count = 10, size = 100 }]
//! feedback_per_cost = false
//! ```

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Spanned;

use crate::copula::{CopulaFamily, CopulaModel};
use crate::design::{CostCoefficients, DesignStart, FusionRule, RuleSchedule, DEFAULT_MAX_SWEEPS};
use crate::error::{Error, Result};
use crate::estimation::MleOptions;
use crate::model::{HypothesisModel, MarginalModel, ParamVector};
use crate::quantization::{QuantizerBank, SensorGrid, SensorQuantizer};

pub const CONFIG_VERSION: u32 = 1;

/// Largest allowed distance between a configured `rho` and the one implied by `theta`.
pub const RHO_THETA_TOLERANCE: f64 = 0.01;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    version: Spanned<u32>,
    name: Option<String>,
    model: Spanned<RawModel>,
    grid: Spanned<SensorGrid>,
    design: Spanned<RawDesign>,
    costs: Spanned<CostCoefficients>,
    stages: Spanned<StagePlan>,
    estimation: Option<Spanned<RawEstimation>>,
    monte_carlo: Option<Spanned<MonteCarloPlan>>,
    rmse: Option<Spanned<RawRmse>>,
    roc: Option<Spanned<RawRoc>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    p0: Spanned<f64>,
    #[serde(default)]
    free: Vec<Spanned<String>>,
    h0: Spanned<RawHypothesis>,
    h1: Spanned<RawHypothesis>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHypothesis {
    copula: CopulaFamily,
    theta: Option<f64>,
    rho: Option<f64>,
    marginals: Vec<MarginalModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub slope: f64,
    pub offset: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDesign {
    quantizers: Vec<Vec<Threshold>>,
    fusion_rule: String,
    #[serde(default)]
    schedule: RuleSchedule,
    #[serde(default)]
    start: DesignStart,
    max_sweeps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEstimation {
    restarts: Option<usize>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    initial_step: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRmse {
    replicates: Option<usize>,
    j_values: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoc {
    replicates: Option<usize>,
    #[serde(default)]
    c01: Vec<f64>,
    test_h0: Option<usize>,
    test_h1: Option<usize>,
    budgets: Option<Vec<StagePlan>>,
    #[serde(default)]
    feedback_per_cost: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub count: usize,
    pub size: usize,
}

impl StagePlan {
    pub fn sizes(&self) -> Vec<usize> {
        vec![self.size; self.count]
    }

    pub fn label(&self) -> String {
        format!("{}x{}", self.count, self.size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloPlan {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_failure_fraction")]
    pub max_failure_fraction: f64,
}

fn default_failure_fraction() -> f64 {
    0.05
}

impl Default for MonteCarloPlan {
    fn default() -> Self {
        Self { seed: 0, max_failure_fraction: default_failure_fraction() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsePlan {
    pub replicates: usize,
    pub j_values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPlan {
    pub replicates: usize,
    pub c01: Vec<f64>,
    pub test_h0: usize,
    pub test_h1: usize,
    pub budgets: Vec<StagePlan>,
    /// Run a separate feedback loop per cost point instead of one loop at
    /// the scenario costs followed by a redesign per cost point.
    pub feedback_per_cost: bool,
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub version: u32,
    pub name: String,
    /// Ground truth; its free mask marks the parameters to estimate.
    pub truth: ParamVector,
    /// Spearman rho of the H1 copula, used to label reports.
    pub rho: f64,
    pub grid: SensorGrid,
    pub initial_bank: QuantizerBank,
    pub initial_rule: FusionRule,
    pub schedule: RuleSchedule,
    pub start: DesignStart,
    pub max_sweeps: usize,
    pub costs: CostCoefficients,
    pub stages: StagePlan,
    pub mle: MleOptions,
    pub monte_carlo: MonteCarloPlan,
    pub rmse: RmsePlan,
    pub roc: RocPlan,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

struct Anchor<'a> {
    path: &'a str,
    text: &'a str,
}

impl Anchor<'_> {
    fn at(&self, span: Range<usize>, msg: impl std::fmt::Display) -> Error {
        Error::Config { path: self.path.to_string(), line: line_of(self.text, span.start), msg: msg.to_string() }
    }
}

fn build_hypothesis(raw: &RawHypothesis, span: Range<usize>, a: &Anchor<'_>, which: &str) -> Result<(HypothesisModel, Option<f64>)> {
    let dim = raw.marginals.len();
    let (copula, theta, rho) = match raw.copula {
        CopulaFamily::Independence => {
            if raw.theta.is_some() || raw.rho.is_some_and(|r| r != 0.0) {
                return Err(a.at(span, format!("[model.{which}] the independence copula takes no theta or rho")));
            }
            (CopulaModel::independence(dim), 1.0, Some(0.0))
        }
        CopulaFamily::Clayton => {
            let c = CopulaModel::clayton();
            let theta = match (raw.theta, raw.rho) {
                (Some(t), None) => t,
                (None, Some(r)) => c.theta_from_rho(r).map_err(|e| a.at(span.clone(), format!("[model.{which}] {e}")))?,
                (Some(t), Some(r)) => {
                    let implied = c.spearman_rho(t).map_err(|e| a.at(span.clone(), format!("[model.{which}] {e}")))?;
                    if (implied - r).abs() > RHO_THETA_TOLERANCE {
                        return Err(a.at(
                            span,
                            format!("[model.{which}] theta = {t} implies rho = {implied:.4}, not {r}"),
                        ));
                    }
                    t
                }
                (None, None) => return Err(a.at(span, format!("[model.{which}] the Clayton copula needs theta or rho"))),
            };
            (c, theta, raw.rho)
        }
    };
    let h = HypothesisModel::new(copula, theta, raw.marginals.clone()).map_err(|e| a.at(span, format!("[model.{which}] {e}")))?;
    Ok((h, rho))
}

fn build_bank(grid: SensorGrid, quantizers: &[Vec<Threshold>]) -> Result<QuantizerBank> {
    let sensors = quantizers
        .iter()
        .map(|bits| SensorQuantizer {
            grid,
            bits: bits
                .iter()
                .map(|t| (0..grid.n_cells()).map(|m| t.slope * grid.midpoint(m) + t.offset >= 0.0).collect())
                .collect(),
        })
        .collect();
    QuantizerBank::new(sensors)
}

fn parse_rule(s: &str, n_outcomes: usize) -> Result<FusionRule> {
    let rule = match s {
        "or" => FusionRule::or(n_outcomes),
        "and" => FusionRule::and(n_outcomes),
        bits => FusionRule::from_bit_string(bits)?,
    };
    if rule.len() != n_outcomes {
        return Err(Error::Dimension(format!("fusion rule has {} entries for {n_outcomes} outcomes", rule.len())));
    }
    Ok(rule)
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Parses and validates a scenario; `path` only labels error messages.
    pub fn from_toml_str(text: &str, path: &str) -> Result<Self> {
        let a = Anchor { path, text };
        let raw: RawConfig = toml::from_str(text).map_err(|e| a.at(e.span().unwrap_or(0..0), e.message()))?;

        if *raw.version.get_ref() != CONFIG_VERSION {
            return Err(a.at(
                raw.version.span(),
                format!("unsupported config version {} (expected {CONFIG_VERSION})", raw.version.get_ref()),
            ));
        }

        let model_span = raw.model.span();
        let model = raw.model.into_inner();
        let (h0, _) = build_hypothesis(model.h0.get_ref(), model.h0.span(), &a, "h0")?;
        let (h1, h1_rho) = build_hypothesis(model.h1.get_ref(), model.h1.span(), &a, "h1")?;
        if h0.dim() != h1.dim() {
            return Err(a.at(model_span, "[model] h0 and h1 must have the same number of marginals"));
        }
        let p0_span = model.p0.span();
        let mut truth = ParamVector::new(*model.p0.get_ref(), h0, h1).map_err(|e| a.at(p0_span.clone(), format!("[model] {e}")))?;
        truth.validate_interior().map_err(|e| a.at(p0_span, format!("[model] {e}")))?;
        for name in &model.free {
            truth.set_free(name.get_ref(), true).map_err(|e| a.at(name.span(), format!("[model] free: {e}")))?;
        }
        let rho = match h1_rho {
            Some(r) => r,
            None => truth.hypotheses[1].copula.spearman_rho(truth.hypotheses[1].theta)?,
        };

        let grid_span = raw.grid.span();
        let grid = raw.grid.into_inner();
        grid.validate().map_err(|e| a.at(grid_span, format!("[grid] {e}")))?;

        let design_span = raw.design.span();
        let design = raw.design.into_inner();
        if design.quantizers.len() != truth.dim() {
            return Err(a.at(
                design_span,
                format!("[design] {} quantizers for {} sensors", design.quantizers.len(), truth.dim()),
            ));
        }
        if design.quantizers.iter().any(Vec::is_empty) {
            return Err(a.at(design_span, "[design] every sensor needs at least one bit"));
        }
        let initial_bank = build_bank(grid, &design.quantizers).map_err(|e| a.at(design_span.clone(), format!("[design] {e}")))?;
        let initial_rule = parse_rule(&design.fusion_rule, initial_bank.n_outcomes())
            .map_err(|e| a.at(design_span.clone(), format!("[design] fusion_rule: {e}")))?;
        let max_sweeps = design.max_sweeps.unwrap_or(DEFAULT_MAX_SWEEPS);
        if max_sweeps == 0 {
            return Err(a.at(design_span, "[design] max_sweeps must be positive"));
        }

        let costs_span = raw.costs.span();
        let costs = raw.costs.into_inner();
        costs.validate().map_err(|e| a.at(costs_span, format!("[costs] {e}")))?;

        let stages_span = raw.stages.span();
        let stages = raw.stages.into_inner();
        if stages.count == 0 || stages.size == 0 {
            return Err(a.at(stages_span, "[stages] count and size must be positive"));
        }

        let mut mle = MleOptions::default();
        if let Some(est) = raw.estimation {
            let span = est.span();
            let est = est.into_inner();
            mle.restarts = est.restarts.unwrap_or(mle.restarts);
            mle.tol = est.tol.unwrap_or(mle.tol);
            mle.max_iter = est.max_iter.unwrap_or(mle.max_iter);
            mle.initial_step = est.initial_step.unwrap_or(mle.initial_step);
            mle.seed = est.seed.unwrap_or(mle.seed);
            if mle.restarts == 0 || !(mle.tol > 0.0) || mle.max_iter == 0 || !(mle.initial_step > 0.0) {
                return Err(a.at(span, "[estimation] restarts, tol, max_iter and initial_step must be positive"));
            }
        }

        let monte_carlo = match raw.monte_carlo {
            Some(mc) => {
                let span = mc.span();
                let mc = mc.into_inner();
                if !(0.0..=1.0).contains(&mc.max_failure_fraction) {
                    return Err(a.at(span, "[monte_carlo] max_failure_fraction must lie in [0, 1]"));
                }
                mc
            }
            None => MonteCarloPlan::default(),
        };

        let rmse = match raw.rmse {
            Some(r) => {
                let span = r.span();
                let r = r.into_inner();
                let plan = RmsePlan {
                    replicates: r.replicates.unwrap_or(200),
                    j_values: r.j_values.unwrap_or_else(|| (2..=stages.count).collect()),
                };
                if plan.replicates == 0 || plan.j_values.is_empty() || plan.j_values.contains(&0) {
                    return Err(a.at(span, "[rmse] replicates and every j value must be positive"));
                }
                plan
            }
            None => RmsePlan { replicates: 200, j_values: (2..=stages.count.max(2)).collect() },
        };

        let roc = match raw.roc {
            Some(r) => {
                let span = r.span();
                let r = r.into_inner();
                let plan = RocPlan {
                    replicates: r.replicates.unwrap_or(100),
                    c01: r.c01,
                    test_h0: r.test_h0.unwrap_or(1600),
                    test_h1: r.test_h1.unwrap_or(400),
                    budgets: r.budgets.unwrap_or_else(|| vec![stages]),
                    feedback_per_cost: r.feedback_per_cost,
                };
                if plan.replicates == 0 || plan.test_h0 == 0 || plan.test_h1 == 0 {
                    return Err(a.at(span, "[roc] replicates and test set sizes must be positive"));
                }
                if plan.budgets.is_empty() || plan.budgets.iter().any(|b| b.count == 0 || b.size == 0) {
                    return Err(a.at(span, "[roc] budgets need positive stage counts and sizes"));
                }
                if let Some(c) = plan.c01.iter().find(|&&c| !(c > costs.c11)) {
                    return Err(a.at(span, format!("[roc] c01 = {c} must exceed c11 = {}", costs.c11)));
                }
                plan
            }
            None => RocPlan {
                replicates: 100,
                c01: Vec::new(),
                test_h0: 1600,
                test_h1: 400,
                budgets: vec![stages],
                feedback_per_cost: false,
            },
        };

        Ok(Self {
            version: CONFIG_VERSION,
            name: raw.name.unwrap_or_else(|| path.to_string()),
            truth,
            rho,
            grid,
            initial_bank,
            initial_rule,
            schedule: design.schedule,
            start: design.start,
            max_sweeps,
            costs,
            stages,
            mle,
            monte_carlo,
            rmse,
            roc,
        })
    }

    pub fn grids(&self) -> Vec<SensorGrid> {
        vec![self.grid; self.truth.dim()]
    }

    /// The model with its free mask, used as the estimation template.
    pub fn template(&self) -> &ParamVector {
        &self.truth
    }

    /// Hex SHA-256 of the canonical JSON form of the validated scenario.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Costs with `c01` replaced.
    pub fn costs_with_c01(&self, c01: f64) -> Result<CostCoefficients> {
        CostCoefficients::new(self.costs.c00, c01, self.costs.c10, self.costs.c11)
    }
}
