//! Bayes-cost evaluation, likelihood-ratio fusion rules, cell-wise
//! quantizer search and the estimate/redesign feedback loop.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimation::{mle_fit, MleOptions, MleResult};
use crate::model::ParamVector;
use crate::quantization::{
    cell_mass, outcome_masses, pack_bits, unpack_bits, CellMass, HistogramGroup, QuantizedHistogram,
    QuantizerBank, SensorGrid, SensorQuantizer,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    pub c00: f64,
    pub c01: f64,
    pub c10: f64,
    pub c11: f64,
}

impl CostCoefficients {
    pub fn new(c00: f64, c01: f64, c10: f64, c11: f64) -> Result<Self> {
        let c = Self { c00, c01, c10, c11 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c10 > self.c00 && self.c01 > self.c11) {
            return Err(invalid(format!(
                "errors must cost more than correct decisions: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { c00: self.c00 * k, c01: self.c01 * k, c10: self.c10 * k, c11: self.c11 * k }
    }
}

/// Decision per joint outcome; `true` decides H1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionRule {
    pub decisions: Vec<bool>,
}

impl FusionRule {
    pub fn constant(n_outcomes: usize, decide_h1: bool) -> Self {
        Self { decisions: vec![decide_h1; n_outcomes] }
    }

    /// Decide H1 when any bit is set.
    pub fn or(n_outcomes: usize) -> Self {
        Self { decisions: (0..n_outcomes).map(|o| o != 0).collect() }
    }

    /// Decide H1 when every bit is set.
    pub fn and(n_outcomes: usize) -> Self {
        Self { decisions: (0..n_outcomes).map(|o| o == n_outcomes - 1).collect() }
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_constant(&self) -> bool {
        self.decisions.windows(2).all(|w| w[0] == w[1])
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    /// `"0110"`-style string, outcome 0 first.
    pub fn to_bit_string(&self) -> String {
        self.decisions.iter().map(|&d| if d { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        let decisions = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(invalid(format!("bad fusion rule character '{c}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if !decisions.len().is_power_of_two() {
            return Err(invalid("fusion rule length must be a power of two"));
        }
        Ok(Self { decisions })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub p_false_alarm: f64,
    pub p_detect: f64,
    pub bayes_cost: f64,
}

/// Metrics of a rule given the outcome pmfs under H0 and H1.
pub fn metrics_from_pmfs(f0: &[f64], f1: &[f64], rule: &FusionRule, p0: f64, costs: &CostCoefficients) -> DetectionMetrics {
    let (mut pf, mut pd) = (0.0, 0.0);
    for ((&d, &a), &b) in rule.decisions.iter().zip(f0).zip(f1) {
        if d {
            pf += a;
            pd += b;
        }
    }
    let p1 = 1.0 - p0;
    let bayes_cost = costs.c00 * p0 * (1.0 - pf) + costs.c01 * p1 * (1.0 - pd) + costs.c10 * p0 * pf + costs.c11 * p1 * pd;
    DetectionMetrics { p_false_alarm: pf, p_detect: pd, bayes_cost }
}

/// Likelihood-ratio rule: decide H1 iff
/// `P1 (C01 - C11) f1 >= P0 (C10 - C00) f0`; outcomes with zero
/// probability under both hypotheses decide H0.
pub fn lr_rule(f0: &[f64], f1: &[f64], p0: f64, costs: &CostCoefficients) -> FusionRule {
    let w0 = p0 * (costs.c10 - costs.c00);
    let w1 = (1.0 - p0) * (costs.c01 - costs.c11);
    FusionRule {
        decisions: f0
            .iter()
            .zip(f1)
            .map(|(&a, &b)| !(a == 0.0 && b == 0.0) && w1 * b >= w0 * a)
            .collect(),
    }
}

fn check_rule(bank: &QuantizerBank, rule: &FusionRule) -> Result<()> {
    if rule.len() != bank.n_outcomes() {
        return Err(Error::Dimension(format!(
            "fusion rule of length {} for {} outcomes",
            rule.len(),
            bank.n_outcomes()
        )));
    }
    Ok(())
}

/// Bayes cost of a bank and fusion rule under the given model.
pub fn bayes_cost(bank: &QuantizerBank, rule: &FusionRule, params: &ParamVector, costs: &CostCoefficients) -> Result<DetectionMetrics> {
    check_rule(bank, rule)?;
    let problem = DesignProblem::new(params, &bank.grids(), *costs)?;
    Ok(problem.metrics(bank, rule))
}

/// Chair-Varshney optimal fusion rule for a fixed bank.
pub fn optimal_fusion_rule(bank: &QuantizerBank, params: &ParamVector, costs: &CostCoefficients) -> Result<FusionRule> {
    let problem = DesignProblem::new(params, &bank.grids(), *costs)?;
    Ok(problem.lr_rule(bank))
}

/// Cell tables of both hypotheses (each normalized to total mass one)
/// plus the prior and costs: everything the design search needs.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    pub masses: [Arc<CellMass>; 2],
    pub p0: f64,
    pub costs: CostCoefficients,
}

/// Smallest cost decrease accepted as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-13;

impl DesignProblem {
    pub fn new(params: &ParamVector, grids: &[SensorGrid], costs: CostCoefficients) -> Result<Self> {
        costs.validate()?;
        params.validate()?;
        let norm = |j: usize| -> Result<Arc<CellMass>> {
            let mut m = cell_mass(&params.hypotheses[j], grids)?;
            let t = m.total();
            if !(t > 0.0) {
                return Err(invalid("model puts no mass inside the observation window"));
            }
            m.data.iter_mut().for_each(|v| *v /= t);
            Ok(Arc::new(m))
        };
        Ok(Self { masses: [norm(0)?, norm(1)?], p0: params.p0, costs })
    }

    /// Problem from explicit (not necessarily normalized) cell tables.
    pub fn from_masses(m0: CellMass, m1: CellMass, p0: f64, costs: CostCoefficients) -> Result<Self> {
        if m0.dims != m1.dims {
            return Err(Error::Dimension("cell tables differ in shape".into()));
        }
        costs.validate()?;
        let norm = |mut m: CellMass| {
            let t = m.total();
            m.data.iter_mut().for_each(|v| *v /= t);
            Arc::new(m)
        };
        Ok(Self { masses: [norm(m0), norm(m1)], p0, costs })
    }

    pub fn pmfs(&self, bank: &QuantizerBank) -> [Vec<f64>; 2] {
        [
            outcome_masses(&self.masses[0], bank).expect("bank matches problem grids"),
            outcome_masses(&self.masses[1], bank).expect("bank matches problem grids"),
        ]
    }

    pub fn metrics(&self, bank: &QuantizerBank, rule: &FusionRule) -> DetectionMetrics {
        let [f0, f1] = self.pmfs(bank);
        metrics_from_pmfs(&f0, &f1, rule, self.p0, &self.costs)
    }

    pub fn lr_rule(&self, bank: &QuantizerBank) -> FusionRule {
        let [f0, f1] = self.pmfs(bank);
        lr_rule(&f0, &f1, self.p0, &self.costs)
    }

    /// Weighted per-cell contributions for sensor `i`: entry `[m][o]` is the
    /// cost weight of cell `m` jointly with the other sensors' outcome code
    /// `o` (sensor `i` bits zero).
    fn sensor_weights(&self, bank: &QuantizerBank, i: usize) -> Vec<Vec<f64>> {
        let codes = bank.shifted_codes();
        let dims = &self.masses[0].dims;
        let n_out = bank.n_outcomes();
        let w0 = self.p0 * (self.costs.c10 - self.costs.c00);
        let w1 = (1.0 - self.p0) * (self.costs.c01 - self.costs.c11);
        let mut g = vec![vec![0.0; n_out]; dims[i]];
        let mut idx = vec![0usize; dims.len()];
        for (a, b) in self.masses[0].data.iter().zip(&self.masses[1].data) {
            let o = idx
                .iter()
                .zip(&codes)
                .enumerate()
                .filter(|(s, _)| *s != i)
                .fold(0, |acc, (_, (&m, c))| acc | c[m]);
            g[idx[i]][o] += w0 * a - w1 * b;
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        g
    }

    /// One Gauss-Seidel pass over every cell of every sensor with the rule
    /// held fixed. Returns the number of accepted moves.
    pub fn sweep(&self, bank: &mut QuantizerBank, rule: &FusionRule) -> usize {
        let mut moves = 0;
        for i in 0..bank.n_sensors() {
            let g = self.sensor_weights(bank, i);
            let off = bank.bit_offset(i);
            let n_patterns = 1usize << bank.sensors[i].n_bits();
            let others: Vec<usize> = (0..bank.n_outcomes()).filter(|o| (o >> off) & (n_patterns - 1) == 0).collect();
            for (m, gm) in g.iter().enumerate() {
                let contrib = |q: usize| -> f64 {
                    others
                        .iter()
                        .filter(|&&o| rule.decisions[o | (q << off)])
                        .map(|&o| gm[o])
                        .sum()
                };
                let current = bank.sensors[i].pattern(m);
                let mut best = (current, contrib(current));
                for q in 0..n_patterns {
                    if q == current {
                        continue;
                    }
                    let c = contrib(q);
                    if c < best.1 - IMPROVEMENT_EPS {
                        best = (q, c);
                    }
                }
                if best.0 != current {
                    bank.sensors[i].set_pattern(m, best.0);
                    moves += 1;
                }
            }
        }
        moves
    }

    /// Alternates cell sweeps with LR rule updates until a sweep moves
    /// nothing and the rule is stable.
    pub fn coordinate_descent(
        &self,
        bank: &mut QuantizerBank,
        rule: &mut FusionRule,
        max_sweeps: usize,
        schedule: RuleSchedule,
    ) -> DescentReport {
        let mut trace = vec![self.metrics(bank, rule).bayes_cost];
        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < max_sweeps {
            sweeps += 1;
            let moves = self.sweep(bank, rule);
            if moves > 0 && schedule == RuleSchedule::AtFixedPoint {
                trace.push(self.metrics(bank, rule).bayes_cost);
                continue;
            }
            let new_rule = self.lr_rule(bank);
            let rule_changed = new_rule != *rule;
            *rule = new_rule;
            trace.push(self.metrics(bank, rule).bayes_cost);
            if moves == 0 && !rule_changed {
                converged = true;
                break;
            }
        }
        DescentReport { cost_trace: trace, sweeps, converged }
    }
}

/// When the fusion rule is recomputed during the quantizer search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleSchedule {
    /// After every full sweep over the sensors.
    EverySweep,
    /// Only once a sweep leaves every sensor unchanged.
    #[default]
    AtFixedPoint,
}

/// Where each feedback stage starts its quantizer search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignStart {
    /// The previous stage's bank and rule.
    Previous,
    /// The configured initial bank and rule.
    Initial,
    /// Both; keep the lower cost under the estimate (ties keep `Previous`).
    #[default]
    Best,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    /// Cost before the first sweep, then after each sweep + rule update.
    pub cost_trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

pub const DEFAULT_MAX_SWEEPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignState {
    pub stage: usize,
    pub bank: QuantizerBank,
    pub rule: FusionRule,
    pub estimate: ParamVector,
    pub cost_trace: Vec<f64>,
}

/// Quantizer search followed by the optimal fusion rule, starting from the
/// state's bank and rule, under `params`.
pub fn optimize_quantizers(state: &DesignState, params: &ParamVector, costs: &CostCoefficients) -> Result<DesignState> {
    optimize_quantizers_with(state, params, costs, DEFAULT_MAX_SWEEPS, RuleSchedule::default())
}

pub fn optimize_quantizers_with(
    state: &DesignState,
    params: &ParamVector,
    costs: &CostCoefficients,
    max_sweeps: usize,
    schedule: RuleSchedule,
) -> Result<DesignState> {
    check_rule(&state.bank, &state.rule)?;
    let problem = DesignProblem::new(params, &state.bank.grids(), *costs)?;
    Ok(descend_from(&problem, state, params, max_sweeps, schedule))
}

fn descend_from(problem: &DesignProblem, state: &DesignState, params: &ParamVector, max_sweeps: usize, schedule: RuleSchedule) -> DesignState {
    let mut bank = state.bank.clone();
    let mut rule = state.rule.clone();
    let report = problem.coordinate_descent(&mut bank, &mut rule, max_sweeps, schedule);
    DesignState { stage: state.stage, bank, rule, estimate: params.clone(), cost_trace: report.cost_trace }
}

/// Produces quantized observations for a bank (the sensors' side of the loop).
pub trait QuantizedSource {
    /// Outcome counts of `n` fresh observations quantized by `bank`.
    fn observe(&mut self, bank: &QuantizerBank, n: usize) -> Result<Vec<u64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    /// Stage sizes `N_1..N_T`; the number of stages is its length.
    pub stage_sizes: Vec<usize>,
    pub initial_bank: QuantizerBank,
    pub initial_rule: FusionRule,
    /// Model template: fixed entries are known, free entries estimated.
    pub template: ParamVector,
    pub costs: CostCoefficients,
    pub mle: MleOptions,
    pub max_sweeps: usize,
    pub schedule: RuleSchedule,
    pub start: DesignStart,
    /// When set, each stage's design is also scored under this model.
    pub truth: Option<ParamVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// Bank the stage's observations were quantized with.
    pub collection_bank: QuantizerBank,
    pub counts: Vec<u64>,
    pub mle: MleResult,
    /// MLE failed to converge and the previous estimate was kept.
    pub reused_previous: bool,
    pub design: DesignState,
    pub metrics_at_truth: Option<DetectionMetrics>,
}

impl StageRecord {
    /// Estimate actually used for the design.
    pub fn estimate(&self) -> &ParamVector {
        &self.design.estimate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackRun {
    pub stages: Vec<StageRecord>,
    pub histogram: QuantizedHistogram,
}

/// The estimate/redesign loop: quantize `N_t` observations with the
/// current bank, refit on every group so far, redesign under the fit,
/// feed the new bank back.
pub fn run_feedback_loop<S: QuantizedSource>(config: &FeedbackConfig, source: &mut S) -> Result<FeedbackRun> {
    if config.stage_sizes.is_empty() || config.stage_sizes.contains(&0) {
        return Err(invalid("need at least one stage and positive stage sizes"));
    }
    check_rule(&config.initial_bank, &config.initial_rule)?;
    let mut hist = QuantizedHistogram::default();
    let mut stages: Vec<StageRecord> = Vec::with_capacity(config.stage_sizes.len());
    let mut bank = config.initial_bank.clone();
    let mut rule = config.initial_rule.clone();
    let mut estimate = config.template.clone();
    for (t, &n) in config.stage_sizes.iter().enumerate() {
        let counts = source.observe(&bank, n)?;
        hist.push(HistogramGroup::new(counts.clone(), bank.clone())?);
        let mle = mle_fit(&hist, &config.template, &config.mle)?;
        let reused_previous = !mle.converged;
        if !reused_previous {
            estimate = mle.estimate.clone();
        }
        let problem = DesignProblem::new(&estimate, &bank.grids(), config.costs)?;
        let warm = DesignState { stage: t + 1, bank: bank.clone(), rule: rule.clone(), estimate: estimate.clone(), cost_trace: Vec::new() };
        let cold = DesignState { bank: config.initial_bank.clone(), rule: config.initial_rule.clone(), ..warm.clone() };
        let run = |s: &DesignState| descend_from(&problem, s, &estimate, config.max_sweeps, config.schedule);
        let mut design = match config.start {
            DesignStart::Previous => run(&warm),
            DesignStart::Initial => run(&cold),
            DesignStart::Best => {
                let (a, b) = (run(&warm), run(&cold));
                if b.cost_trace.last() < a.cost_trace.last() { b } else { a }
            }
        };
        if design.rule.is_constant() {
            design.bank = bank.clone();
        }
        let metrics_at_truth = match &config.truth {
            Some(truth) => Some(bayes_cost(&design.bank, &design.rule, truth, &config.costs)?),
            None => None,
        };
        stages.push(StageRecord {
            stage: t + 1,
            collection_bank: bank.clone(),
            counts,
            mle,
            reused_previous,
            design: design.clone(),
            metrics_at_truth,
        });
        bank = design.bank;
        rule = design.rule;
    }
    Ok(FeedbackRun { stages, histogram: hist })
}

/// Flipped cell indices per sensor and bit between two banks.
pub fn bank_delta(from: &QuantizerBank, to: &QuantizerBank) -> Result<Vec<Vec<Vec<usize>>>> {
    if !from.same_grids(to) || from.cell_dims() != to.cell_dims() {
        return Err(Error::Dimension("banks have different grids".into()));
    }
    Ok(from
        .sensors
        .iter()
        .zip(&to.sensors)
        .map(|(a, b)| {
            a.bits
                .iter()
                .zip(&b.bits)
                .map(|(x, y)| (0..x.len()).filter(|&m| x[m] != y[m]).collect())
                .collect()
        })
        .collect())
}

pub fn apply_delta(bank: &QuantizerBank, delta: &[Vec<Vec<usize>>]) -> Result<QuantizerBank> {
    let mut out = bank.clone();
    if delta.len() != out.sensors.len() {
        return Err(Error::Dimension("delta sensor count mismatch".into()));
    }
    for (s, d) in out.sensors.iter_mut().zip(delta) {
        if d.len() != s.bits.len() {
            return Err(Error::Dimension("delta bit count mismatch".into()));
        }
        for (bits, flips) in s.bits.iter_mut().zip(d) {
            for &m in flips {
                let b = bits.get_mut(m).ok_or_else(|| invalid(format!("delta cell {m} out of range")))?;
                *b = !*b;
            }
        }
    }
    Ok(out)
}

/// One line of the stage trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: usize,
    pub n: u64,
    /// Full collection bank; present on the first stage only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<BankRecord>,
    pub counts: Vec<u64>,
    /// Designed bank as cell flips against this stage's collection bank.
    pub quantizer_delta: Vec<Vec<Vec<usize>>>,
    pub fusion_rule: String,
    pub estimate: Vec<(String, f64)>,
    /// Absent when the fit never reached a finite log-likelihood.
    pub log_likelihood: Option<f64>,
    pub converged: bool,
    pub reused_previous: bool,
    pub design_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_at_truth: Option<DetectionMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankRecord {
    pub grids: Vec<SensorGrid>,
    pub quantizers: Vec<Vec<String>>,
}

impl BankRecord {
    pub fn from_bank(bank: &QuantizerBank) -> Self {
        Self {
            grids: bank.grids(),
            quantizers: bank.sensors.iter().map(|s| s.bits.iter().map(|b| pack_bits(b)).collect()).collect(),
        }
    }

    pub fn to_bank(&self) -> Result<QuantizerBank> {
        if self.grids.len() != self.quantizers.len() {
            return Err(Error::Dimension("grid and quantizer counts differ".into()));
        }
        let sensors = self
            .grids
            .iter()
            .zip(&self.quantizers)
            .map(|(g, q)| {
                Ok(SensorQuantizer {
                    grid: *g,
                    bits: q.iter().map(|h| unpack_bits(h, g.n_cells())).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        QuantizerBank::new(sensors)
    }
}

pub fn trace_records(run: &FeedbackRun) -> Result<Vec<TraceRecord>> {
    run.stages
        .iter()
        .map(|s| {
            Ok(TraceRecord {
                stage: s.stage,
                n: s.counts.iter().sum(),
                initial: (s.stage == 1).then(|| BankRecord::from_bank(&s.collection_bank)),
                counts: s.counts.clone(),
                quantizer_delta: bank_delta(&s.collection_bank, &s.design.bank)?,
                fusion_rule: s.design.rule.to_bit_string(),
                estimate: s.mle.free_names.iter().cloned().zip(s.estimate().free_values()).collect(),
                log_likelihood: s.mle.log_likelihood.is_finite().then_some(s.mle.log_likelihood),
                converged: s.mle.converged,
                reused_previous: s.reused_previous,
                design_cost: *s.design.cost_trace.last().unwrap_or(&f64::NAN),
                metrics_at_truth: s.metrics_at_truth,
            })
        })
        .collect()
}

pub fn write_trace<W: Write>(run: &FeedbackRun, mut w: W) -> Result<()> {
    for rec in trace_records(run)? {
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Parses a trace log and rebuilds the collection banks and histogram.
pub fn read_trace<R: BufRead>(r: R) -> Result<(Vec<TraceRecord>, QuantizedHistogram)> {
    let mut records = Vec::new();
    let mut hist = QuantizedHistogram::default();
    let mut bank: Option<QuantizerBank> = None;
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: k + 1, msg };
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let current = match (&rec.initial, bank.take()) {
            (Some(b), _) => b.to_bank().map_err(|e| err(e.to_string()))?,
            (None, Some(b)) => b,
            (None, None) => return Err(err("first trace record has no initial bank".into())),
        };
        hist.push(HistogramGroup::new(rec.counts.clone(), current.clone()).map_err(|e| err(e.to_string()))?);
        bank = Some(apply_delta(&current, &rec.quantizer_delta).map_err(|e| err(e.to_string()))?);
        records.push(rec);
    }
    Ok((records, hist))
}
