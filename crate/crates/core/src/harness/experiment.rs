//! Monte-Carlo experiment suites: RMSE curves, ROC comparison and single traces.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::copula::CopulaModel;
use crate::design::{
    optimize_quantizers_with, run_feedback_loop, CostCoefficients, DesignState, FeedbackConfig, FeedbackRun,
    FusionRule,
};
use crate::error::{invalid, Error, Result};
use crate::estimation::{crlb_from_matrix, fisher_crlb, fisher_info, histogram_fisher_info, mle_fit};
use crate::model::{HypothesisModel, ParamVector};
use crate::quantization::{pack_bits, QuantizedHistogram, QuantizerBank};

use super::config::{ScenarioConfig, StagePlan};
use super::report::{
    DesignRow, EstimateRow, ExperimentReport, ReportKind, ReportMetadata, RmseRow, RocRow, Rows, TraceRow,
};
use super::simulate::{Draw, SensorSimulator, TestSet};

/// Estimation stream of replicate `r`.
pub fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ r as u64)
}

/// Test-set stream of replicate `r`, disjoint from its estimation stream.
pub fn test_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = replicate_rng(seed, r);
    rng.set_stream(1);
    rng
}

pub fn feedback_config(cfg: &ScenarioConfig, plan: StagePlan, costs: CostCoefficients, with_truth: bool) -> FeedbackConfig {
    FeedbackConfig {
        stage_sizes: plan.sizes(),
        initial_bank: cfg.initial_bank.clone(),
        initial_rule: cfg.initial_rule.clone(),
        template: cfg.template().clone(),
        costs,
        mle: cfg.mle.clone(),
        max_sweeps: cfg.max_sweeps,
        schedule: cfg.schedule,
        start: cfg.start,
        truth: with_truth.then(|| cfg.truth.clone()),
    }
}

fn metadata(cfg: &ScenarioConfig, kind: ReportKind, replicates: usize, failed: usize, started: Instant) -> ReportMetadata {
    ReportMetadata {
        kind,
        scenario: cfg.name.clone(),
        config_hash: cfg.hash(),
        seed: cfg.monte_carlo.seed,
        replicates,
        failed_replicates: failed,
        runtime_secs: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn check_failures(cfg: &ScenarioConfig, what: &str, failed: usize, total: usize) -> Result<()> {
    if failed as f64 > cfg.monte_carlo.max_failure_fraction * total as f64 {
        return Err(Error::Experiment(format!(
            "{what}: {failed} of {total} replicates failed (limit {:.1}%)",
            100.0 * cfg.monte_carlo.max_failure_fraction
        )));
    }
    Ok(())
}

/// Design from the configured initial bank and rule under `params`.
pub fn design_from_initial(cfg: &ScenarioConfig, params: &ParamVector, costs: &CostCoefficients) -> Result<DesignState> {
    let start = DesignState {
        stage: 0,
        bank: cfg.initial_bank.clone(),
        rule: cfg.initial_rule.clone(),
        estimate: params.clone(),
        cost_trace: Vec::new(),
    };
    optimize_quantizers_with(&start, params, costs, cfg.max_sweeps, cfg.schedule)
}

/// The H1 copula replaced by independence; everything else known.
pub fn independence_model(truth: &ParamVector) -> Result<ParamVector> {
    let [h0, h1] = truth.hypotheses.clone();
    let h1 = HypothesisModel::new(CopulaModel::independence(truth.dim()), 0.0, h1.marginals)?;
    let mut p = ParamVector::new(truth.p0, h0, h1)?;
    for name in truth.free_names() {
        if p.index_of(&name).is_some() {
            p.set_free(&name, true)?;
        }
    }
    Ok(p)
}

/// Index of `p0` and `h1.copula` among the free parameters.
fn rmse_indices(cfg: &ScenarioConfig) -> Result<(usize, usize)> {
    let names = cfg.truth.free_names();
    let find = |n: &str| {
        names
            .iter()
            .position(|x| x == n)
            .ok_or_else(|| invalid(format!("the RMSE experiment needs '{n}' among the free parameters")))
    };
    Ok((find("p0")?, find("h1.copula")?))
}

/// Per-replicate outcome of the RMSE experiment, one entry per J.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseReplicate {
    /// `(P1 estimate, theta1 estimate)`, `None` where the stage's fit failed.
    pub estimates: Vec<Option<(f64, f64)>>,
    /// Accumulated Fisher information `sum_{j<=J} N_j I_j` at the truth for
    /// the banks the replicate actually used.
    pub information: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct RmseExperiment {
    pub report: ExperimentReport,
    pub replicates: Vec<RmseReplicate>,
}

fn rmse_replicate(cfg: &ScenarioConfig, r: usize, j_max: usize, idx: (usize, usize)) -> Result<RmseReplicate> {
    let plan = StagePlan { count: j_max, size: cfg.stages.size };
    let fc = feedback_config(cfg, plan, cfg.costs, false);
    let mut sim = SensorSimulator::new(&cfg.truth, &cfg.grids(), Draw::Mixture, replicate_rng(cfg.monte_carlo.seed, r))?;
    let run = run_feedback_loop(&fc, &mut sim)?;
    let banks: Vec<QuantizerBank> = run.stages.iter().map(|s| s.collection_bank.clone()).collect();
    let sizes: Vec<f64> = run.stages.iter().map(|s| s.counts.iter().sum::<u64>() as f64).collect();
    let total: f64 = sizes.iter().sum();
    let fi = fisher_info(&cfg.truth, &banks, &sizes.iter().map(|n| n / total).collect::<Vec<_>>())?;
    let (ip, it) = idx;
    let mut estimates = Vec::with_capacity(j_max);
    let mut information = Vec::with_capacity(j_max);
    let mut acc = DMatrix::zeros(fi.names.len(), fi.names.len());
    for (s, (m, n)) in run.stages.iter().zip(fi.per_group.iter().zip(&sizes)) {
        estimates.push((!s.reused_previous).then(|| {
            let v = &s.mle.free_values;
            (1.0 - v[ip], v[it])
        }));
        acc += m * *n;
        information.push(acc.clone());
    }
    Ok(RmseReplicate { estimates, information })
}

/// Root mean square error of the estimates in replicate order.
pub fn rmse(errors: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for e in errors {
        sum += e * e;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Rows from per-replicate results; replicates whose fit failed at J are skipped at J.
///
/// The bound at J inverts the replicate average of the accumulated information,
/// which is the information of the whole adaptive experiment.
pub fn rmse_rows(cfg: &ScenarioConfig, replicates: &[RmseReplicate]) -> Result<Vec<RmseRow>> {
    let (p1, theta1) = (cfg.truth.p1(), cfg.truth.hypotheses[1].theta);
    let (ip, it) = rmse_indices(cfg)?;
    let mut js = cfg.rmse.j_values.clone();
    js.sort_unstable();
    js.dedup();
    Ok(js
        .into_iter()
        .map(|j| {
            let est = || replicates.iter().filter_map(|r| r.estimates[j - 1]);
            let used: Vec<&DMatrix<f64>> =
                replicates.iter().filter(|r| r.estimates[j - 1].is_some()).map(|r| &r.information[j - 1]).collect();
            let n_total = (j * cfg.stages.size) as u64;
            let bound = used.first().and_then(|first| {
                let mean = used.iter().skip(1).fold((*first).clone(), |acc, m| acc + *m) / used.len() as f64;
                crlb_from_matrix(&(mean / n_total as f64), n_total)
            });
            let sd = |i: usize| bound.as_ref().map_or(f64::NAN, |c| c[(i, i)].sqrt());
            RmseRow {
                rho: cfg.rho,
                j,
                n_total,
                rmse_p1: rmse(est().map(|e| e.0 - p1)),
                rmse_theta1: rmse(est().map(|e| e.1 - theta1)),
                crlb_sqrt_p1: sd(ip),
                crlb_sqrt_theta1: sd(it),
            }
        })
        .collect())
}

/// RMSE of the feedback MLE of `P1` and `theta1` against the number of stages.
pub fn run_rmse_experiment(cfg: &ScenarioConfig) -> Result<RmseExperiment> {
    let started = Instant::now();
    let idx = rmse_indices(cfg)?;
    let j_max = *cfg.rmse.j_values.iter().max().ok_or_else(|| invalid("no J values"))?;
    let n = cfg.rmse.replicates;
    let results: Vec<Result<RmseReplicate>> = (0..n).into_par_iter().map(|r| rmse_replicate(cfg, r, j_max, idx)).collect();
    let mut replicates = Vec::with_capacity(n);
    let mut failed = 0;
    for res in results {
        match res {
            Ok(rep) => {
                if cfg.rmse.j_values.iter().any(|&j| rep.estimates[j - 1].is_none()) {
                    failed += 1;
                }
                replicates.push(rep);
            }
            Err(Error::Experiment(_)) | Err(Error::InvalidParameter(_)) => failed += 1,
            Err(e) => return Err(e),
        }
    }
    check_failures(cfg, "rmse", failed, n)?;
    let rows = rmse_rows(cfg, &replicates)?;
    Ok(RmseExperiment {
        report: ExperimentReport { rows: Rows::Rmse(rows), metadata: metadata(cfg, ReportKind::Rmse, n, failed, started) },
        replicates,
    })
}

pub const CLAIRVOYANT: &str = "clairvoyant";
pub const INDEPENDENCE: &str = "independence";

pub fn feedback_label(plan: StagePlan) -> String {
    format!("feedback-{}", plan.label())
}

/// Empirical `(P_f, P_d)` of every detector at every cost point for one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct RocReplicate {
    /// `[detector][cost point] -> (pf, pd)`; `None` for a failed feedback fit.
    pub rates: Vec<Vec<Option<(f64, f64)>>>,
}

#[derive(Debug, Clone)]
pub struct RocExperiment {
    pub report: ExperimentReport,
    pub detectors: Vec<String>,
    pub replicates: Vec<RocReplicate>,
}

type Design = (QuantizerBank, FusionRule);

/// Designs for each C01 under `params`, in the order given.
///
/// Cost points are visited from the largest C01 down. Each point descends from
/// the configured initial design and from the previous point's design and keeps
/// the cheaper result, so the search follows the ROC instead of falling into the
/// constant rule at small C01.
pub fn design_sweep(cfg: &ScenarioConfig, params: &ParamVector, c01s: &[f64]) -> Result<Vec<DesignState>> {
    let mut order: Vec<usize> = (0..c01s.len()).collect();
    order.sort_by(|&a, &b| c01s[b].total_cmp(&c01s[a]));
    let mut out: Vec<Option<DesignState>> = vec![None; c01s.len()];
    let mut previous: Option<DesignState> = None;
    for k in order {
        let costs = cfg.costs_with_c01(c01s[k])?;
        let mut best = design_from_initial(cfg, params, &costs)?;
        if let Some(prev) = &previous {
            let warm = optimize_quantizers_with(prev, params, &costs, cfg.max_sweeps, cfg.schedule)?;
            if warm.cost_trace.last() < best.cost_trace.last() {
                best = warm;
            }
        }
        previous = Some(best.clone());
        out[k] = Some(best);
    }
    Ok(out.into_iter().map(|d| d.expect("every cost point visited")).collect())
}

fn fixed_designs(cfg: &ScenarioConfig, params: &ParamVector) -> Result<Vec<Design>> {
    Ok(design_sweep(cfg, params, &cfg.roc.c01)?.into_iter().map(|d| (d.bank, d.rule)).collect())
}

fn feedback_designs(cfg: &ScenarioConfig, plan: StagePlan, r: usize) -> Result<Option<Vec<Design>>> {
    let sim = || SensorSimulator::new(&cfg.truth, &cfg.grids(), Draw::Mixture, replicate_rng(cfg.monte_carlo.seed, r));
    if cfg.roc.feedback_per_cost {
        let mut out = Vec::with_capacity(cfg.roc.c01.len());
        for &c in &cfg.roc.c01 {
            let run = run_feedback_loop(&feedback_config(cfg, plan, cfg.costs_with_c01(c)?, false), &mut sim()?)?;
            let last = run.stages.last().expect("at least one stage");
            if last.reused_previous {
                return Ok(None);
            }
            out.push((last.design.bank.clone(), last.design.rule.clone()));
        }
        Ok(Some(out))
    } else {
        let run = run_feedback_loop(&feedback_config(cfg, plan, cfg.costs, false), &mut sim()?)?;
        let last = run.stages.last().expect("at least one stage");
        if last.reused_previous {
            return Ok(None);
        }
        fixed_designs(cfg, last.estimate()).map(Some)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// ROC points of the clairvoyant, independence-assumed and feedback-MLE detectors.
pub fn run_roc_experiment(cfg: &ScenarioConfig) -> Result<RocExperiment> {
    let started = Instant::now();
    if cfg.roc.c01.is_empty() {
        return Err(invalid("the ROC experiment needs a non-empty [roc] c01 list"));
    }
    let clairvoyant = fixed_designs(cfg, &cfg.truth)?;
    let independent = fixed_designs(cfg, &independence_model(&cfg.truth)?)?;
    let mut detectors = vec![CLAIRVOYANT.to_string(), INDEPENDENCE.to_string()];
    detectors.extend(cfg.roc.budgets.iter().map(|&b| feedback_label(b)));
    let n = cfg.roc.replicates;
    let results: Vec<Result<RocReplicate>> = (0..n)
        .into_par_iter()
        .map(|r| {
            let mut tsim = SensorSimulator::new(&cfg.truth, &cfg.grids(), Draw::Mixture, test_rng(cfg.monte_carlo.seed, r))?;
            let test = TestSet::draw(&mut tsim, cfg.roc.test_h0, cfg.roc.test_h1);
            let eval = |ds: &[Design]| ds.iter().map(|(b, rule)| Some(test.rates(b, rule))).collect::<Vec<_>>();
            let mut rates = vec![eval(&clairvoyant), eval(&independent)];
            for &plan in &cfg.roc.budgets {
                rates.push(match feedback_designs(cfg, plan, r) {
                    Ok(Some(ds)) => eval(&ds),
                    Ok(None) | Err(Error::Experiment(_)) | Err(Error::InvalidParameter(_)) => vec![None; cfg.roc.c01.len()],
                    Err(e) => return Err(e),
                });
            }
            Ok(RocReplicate { rates })
        })
        .collect();
    let replicates = results.into_iter().collect::<Result<Vec<_>>>()?;
    let failed = replicates.iter().filter(|r| r.rates.iter().any(|d| d.iter().any(Option::is_none))).count();
    check_failures(cfg, "roc", failed, n)?;

    let mut rows = Vec::with_capacity(detectors.len() * cfg.roc.c01.len());
    for (d, name) in detectors.iter().enumerate() {
        for (k, &c01) in cfg.roc.c01.iter().enumerate() {
            let pts: Vec<(f64, f64)> = replicates.iter().filter_map(|r| r.rates[d][k]).collect();
            let (pf_mean, pf_std) = mean_std(&pts.iter().map(|p| p.0).collect::<Vec<_>>());
            let (pd_mean, pd_std) = mean_std(&pts.iter().map(|p| p.1).collect::<Vec<_>>());
            rows.push(RocRow { rho: cfg.rho, detector: name.clone(), c01, pf_mean, pd_mean, pf_std, pd_std });
        }
    }
    rows.sort_by(|a, b| a.detector.cmp(&b.detector).then(a.c01.total_cmp(&b.c01)));
    Ok(RocExperiment {
        report: ExperimentReport { rows: Rows::Roc(rows), metadata: metadata(cfg, ReportKind::Roc, n, failed, started) },
        detectors,
        replicates,
    })
}

#[derive(Debug, Clone)]
pub struct TraceExperiment {
    pub report: ExperimentReport,
    pub run: FeedbackRun,
}

/// One seeded feedback run with per-stage diagnostics.
pub fn run_trace(cfg: &ScenarioConfig) -> Result<TraceExperiment> {
    let started = Instant::now();
    let fc = feedback_config(cfg, cfg.stages, cfg.costs, true);
    let mut sim = SensorSimulator::new(&cfg.truth, &cfg.grids(), Draw::Mixture, replicate_rng(cfg.monte_carlo.seed, 0))?;
    let run = run_feedback_loop(&fc, &mut sim)?;
    let mut rows = Vec::new();
    let mut n_total = 0;
    for s in &run.stages {
        n_total += s.counts.iter().sum::<u64>();
        let truth = s.metrics_at_truth.expect("trace runs score designs at the truth");
        for (name, value) in s.mle.free_names.iter().zip(s.estimate().free_values()) {
            rows.push(TraceRow {
                stage: s.stage,
                n_total,
                parameter: name.clone(),
                estimate: value,
                log_likelihood: s.mle.log_likelihood,
                converged: s.mle.converged,
                reused_previous: s.reused_previous,
                fusion_rule: s.design.rule.to_bit_string(),
                design_cost: *s.design.cost_trace.last().unwrap_or(&f64::NAN),
                pf_truth: truth.p_false_alarm,
                pd_truth: truth.p_detect,
                cost_truth: truth.bayes_cost,
            });
        }
    }
    let failed = usize::from(run.stages.iter().any(|s| s.reused_previous));
    Ok(TraceExperiment {
        report: ExperimentReport { rows: Rows::Trace(rows), metadata: metadata(cfg, ReportKind::Trace, 1, failed, started) },
        run,
    })
}

/// Hex-packed bank, sensors separated by `;` and bits by `,`.
pub fn bank_hex(bank: &QuantizerBank) -> String {
    bank.sensors
        .iter()
        .map(|s| s.bits.iter().map(|b| pack_bits(b)).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

/// One design pass per cost point (the scenario costs when the ROC list is empty)
/// under the scenario's ground-truth model.
pub fn run_design(cfg: &ScenarioConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    let c01s = if cfg.roc.c01.is_empty() { vec![cfg.costs.c01] } else { cfg.roc.c01.clone() };
    let designs = design_sweep(cfg, &cfg.truth, &c01s)?;
    let mut rows = Vec::with_capacity(c01s.len());
    for (c01, d) in c01s.into_iter().zip(designs) {
        let costs = cfg.costs_with_c01(c01)?;
        let m = crate::design::bayes_cost(&d.bank, &d.rule, &cfg.truth, &costs)?;
        rows.push(DesignRow {
            c01,
            p_false_alarm: m.p_false_alarm,
            p_detect: m.p_detect,
            bayes_cost: m.bayes_cost,
            sweeps: d.cost_trace.len() - 1,
            fusion_rule: d.rule.to_bit_string(),
            quantizers: bank_hex(&d.bank),
        });
    }
    rows.sort_by(|a, b| a.c01.total_cmp(&b.c01));
    Ok(ExperimentReport { rows: Rows::Design(rows), metadata: metadata(cfg, ReportKind::Design, 1, 0, started) })
}

/// Maximum-likelihood fit of the scenario's free parameters to a stored histogram,
/// with the CRLB evaluated at the estimate.
pub fn run_estimate(cfg: &ScenarioConfig, hist: &QuantizedHistogram) -> Result<ExperimentReport> {
    let started = Instant::now();
    if hist.groups.is_empty() {
        return Err(invalid("the histogram has no groups"));
    }
    let fit = mle_fit(hist, cfg.template(), &cfg.mle)?;
    let crlb = histogram_fisher_info(&fit.estimate, hist)
        .ok()
        .and_then(|fi| fisher_crlb(&fi, hist.n_total()));
    let rows = fit
        .free_names
        .iter()
        .zip(&fit.free_values)
        .enumerate()
        .map(|(i, (name, &v))| EstimateRow {
            parameter: name.clone(),
            estimate: v,
            crlb_sqrt: crlb.as_ref().map_or(f64::NAN, |c| c[(i, i)].sqrt()),
            log_likelihood: fit.log_likelihood,
            converged: fit.converged,
        })
        .collect();
    let failed = usize::from(!fit.converged);
    Ok(ExperimentReport { rows: Rows::Estimate(rows), metadata: metadata(cfg, ReportKind::Estimate, 1, failed, started) })
}
