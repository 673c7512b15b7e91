//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line; the test
//! fails if any criterion does.
//!
//! The Monte-Carlo criteria (5, 6, 7) run at desk scale and take most of the
//! suite's wall time: expect tens of minutes on a single core.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use copula_fusion::copula::CopulaModel;
use copula_fusion::design::{
    lr_rule, metrics_from_pmfs, CostCoefficients, DesignProblem, FusionRule, QuantizedSource, RuleSchedule,
    DEFAULT_MAX_SWEEPS,
};
use copula_fusion::estimation::{fisher_info, log_likelihood, log_likelihood_gradient};
use copula_fusion::harness::experiment::{
    feedback_label, run_design, run_estimate, run_rmse_experiment, run_roc_experiment, run_trace, CLAIRVOYANT,
    INDEPENDENCE,
};
use copula_fusion::harness::report::{RmseRow, RocRow};
use copula_fusion::harness::{generate_observations, Draw, Rows, ScenarioConfig, SensorSimulator, StagePlan};
use copula_fusion::model::ParamVector;
use copula_fusion::quantization::{
    mixture_pmf, quantized_pmf, CellMass, HistogramGroup, QuantizedHistogram, QuantizerBank, SensorGrid,
    SensorQuantizer,
};

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn scenario(file: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(file);
    ScenarioConfig::load(&path).unwrap_or_else(|e| panic!("{e}"))
}

fn random_bank(grids: &[SensorGrid], rng: &mut ChaCha8Rng) -> QuantizerBank {
    QuantizerBank::new(
        grids
            .iter()
            .map(|&grid| SensorQuantizer { grid, bits: vec![(0..grid.n_cells()).map(|_| rng.random()).collect()] })
            .collect(),
    )
    .unwrap()
}

fn random_pmf(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

fn copula_ground_truth() -> Outcome {
    let c = CopulaModel::clayton();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (theta, rho) in [(0.5109, 0.30), (1.0759, 0.50), (2.1316, 0.70)] {
        let got = c.spearman_rho(theta).unwrap();
        worst = worst.max((got - rho).abs());
        parts.push(format!("rho({theta})={got:.4}"));
    }
    Outcome::new(worst <= 0.01, format!("{} max dev {worst:.2e}", parts.join(" ")))
}

fn quantized_pmf_correctness() -> Outcome {
    let cfg = scenario("s5_rho05.toml");
    let h0 = &cfg.truth.hypotheses[0];
    let f = quantized_pmf(h0, 0, &cfg.initial_bank).unwrap();
    let q1 = 1.0 - h0.marginals[0].cdf(20.0);
    let q2 = h0.marginals[1].cdf(20.0);
    let analytic = [(1.0 - q1) * (1.0 - q2), q1 * (1.0 - q2), (1.0 - q1) * q2, q1 * q2];
    let analytic_dev = f.probs.iter().zip(analytic).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let n = 100_000;
    let mut h0_only = cfg.truth.clone();
    h0_only.p0 = 1.0;
    let obs = generate_observations(&h0_only, Draw::H0, n, &mut ChaCha8Rng::seed_from_u64(2024)).unwrap();
    let mut counts = [0usize; 4];
    for o in &obs {
        counts[cfg.initial_bank.quantize(&o.y)] += 1;
    }
    let empirical_dev = counts
        .iter()
        .zip(&f.probs)
        .map(|(&c, p)| (c as f64 / n as f64 - p).abs())
        .fold(0.0, f64::max);
    let bound = 4.0 / (n as f64).sqrt();
    Outcome::new(
        analytic_dev <= 1e-3 && empirical_dev <= bound,
        format!("analytic dev {analytic_dev:.2e} (<= 1e-3), empirical dev {empirical_dev:.2e} (<= {bound:.2e})"),
    )
}

fn fusion_rule_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let costs = CostCoefficients::new(0.0, 1.0, 2.0, 0.0).unwrap();
    let mut exact = 0;
    for _ in 0..20 {
        let (f0, f1) = (random_pmf(&mut rng, 4), random_pmf(&mut rng, 4));
        let p0 = rng.random_range(0.05..0.95);
        let best = (0..16u32)
            .map(|code| {
                let rule = FusionRule { decisions: (0..4).map(|o| code >> o & 1 == 1).collect() };
                metrics_from_pmfs(&f0, &f1, &rule, p0, &costs).bayes_cost
            })
            .fold(f64::INFINITY, f64::min);
        let lr = metrics_from_pmfs(&f0, &f1, &lr_rule(&f0, &f1, p0, &costs), p0, &costs).bayes_cost;
        if lr == best {
            exact += 1;
        }
    }
    Outcome::new(exact == 20, format!("LR rule attains the exhaustive minimum on {exact}/20 instances"))
}

fn toy_optimum(problem: &DesignProblem, grid: SensorGrid) -> f64 {
    let mut best = f64::INFINITY;
    for code in 0..16u32 {
        let bank =
            QuantizerBank::new(vec![SensorQuantizer { grid, bits: vec![(0..4).map(|m| code >> m & 1 == 1).collect()] }])
                .unwrap();
        for rc in 0..4u32 {
            let rule = FusionRule { decisions: vec![rc & 1 == 1, rc & 2 == 2] };
            best = best.min(problem.metrics(&bank, &rule).bayes_cost);
        }
    }
    best
}

fn quantizer_search_soundness() -> Outcome {
    let cfg = scenario("s5_rho05.toml");
    let grids = cfg.grids();
    let problem = DesignProblem::new(&cfg.truth, &grids, cfg.costs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut monotone, mut terminated, mut max_sweeps) = (true, true, 0);
    for _ in 0..10 {
        let mut bank = random_bank(&grids, &mut rng);
        let mut rule = FusionRule { decisions: (0..4).map(|_| rng.random()).collect() };
        let rep = problem.coordinate_descent(&mut bank, &mut rule, DEFAULT_MAX_SWEEPS, RuleSchedule::default());
        monotone &= rep.cost_trace.windows(2).all(|w| w[1] <= w[0]);
        terminated &= rep.converged && rep.sweeps <= 50;
        max_sweeps = max_sweeps.max(rep.sweeps);
    }

    let grid = SensorGrid::new(0.0, 4.0, 1.0).unwrap();
    let mut hits = 0;
    let mut max_gap: f64 = 0.0;
    for _ in 0..10 {
        let m0 = CellMass { dims: vec![4], data: random_pmf(&mut rng, 4) };
        let m1 = CellMass { dims: vec![4], data: random_pmf(&mut rng, 4) };
        let toy = DesignProblem::from_masses(m0, m1, rng.random_range(0.2..0.8), cfg.costs).unwrap();
        // threshold start with the identity rule, the one-sensor analogue of the scenario start
        let k = rng.random_range(1..4);
        let mut bank =
            QuantizerBank::new(vec![SensorQuantizer { grid, bits: vec![(0..4).map(|m| m >= k).collect()] }]).unwrap();
        let mut rule = FusionRule { decisions: vec![false, true] };
        let rep = toy.coordinate_descent(&mut bank, &mut rule, DEFAULT_MAX_SWEEPS, RuleSchedule::default());
        let gap = rep.cost_trace.last().unwrap() - toy_optimum(&toy, grid);
        max_gap = max_gap.max(gap);
        if gap.abs() <= 1e-15 {
            hits += 1;
        }
    }
    Outcome::new(
        monotone && terminated && hits >= 8,
        format!(
            "monotone={monotone} terminated={terminated} max sweeps {max_sweeps}; toy optimum reached {hits}/10, max gap {max_gap:.3e}"
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mle_consistency() -> Outcome {
    let mut cfg = scenario("s5_rho05.toml");
    cfg.stages = StagePlan { count: 10, size: 1000 };
    cfg.rmse.replicates = 200;
    cfg.rmse.j_values = vec![10];
    let exp = match run_rmse_experiment(&cfg) {
        Ok(e) => e,
        Err(e) => return Outcome::new(false, format!("experiment error: {e}")),
    };
    let Rows::Rmse(rows) = &exp.report.rows else { unreachable!() };
    let row = &rows[0];
    let (p1, theta1) = (cfg.truth.p1(), cfg.truth.hypotheses[1].theta);
    let ests: Vec<(f64, f64)> = exp.replicates.iter().filter_map(|r| r.estimates[9]).collect();
    let med_p1 = median(ests.iter().map(|e| (e.0 - p1).abs()).collect());
    let med_th = median(ests.iter().map(|e| (e.1 - theta1).abs()).collect());
    let a = med_p1 <= 3.0 * row.crlb_sqrt_p1 && med_th <= 3.0 * row.crlb_sqrt_theta1;
    let (r_p1, r_th) = (row.rmse_p1 / row.crlb_sqrt_p1, row.rmse_theta1 / row.crlb_sqrt_theta1);
    let b = (1.0..=1.5).contains(&r_p1) && (1.0..=1.5).contains(&r_th);
    Outcome::new(
        a && b,
        format!(
            "(a) median |dP1| {med_p1:.4} vs 3*crlb {:.4}, median |dtheta1| {med_th:.4} vs 3*crlb {:.4}: {a}; \
             (b) rmse/crlb P1 {r_p1:.3}, theta1 {r_th:.3}: {b}; {} usable replicates",
            3.0 * row.crlb_sqrt_p1,
            3.0 * row.crlb_sqrt_theta1,
            ests.len()
        ),
    )
}

fn rmse_trend() -> Outcome {
    let mut curves: Vec<(f64, Vec<RmseRow>)> = Vec::new();
    for file in ["s5_rho03.toml", "s5_rho05.toml", "s5_rho07.toml"] {
        let mut cfg = scenario(file);
        cfg.stages = StagePlan { count: 10, size: 100 };
        cfg.rmse.replicates = 200;
        cfg.rmse.j_values = (2..=10).collect();
        match run_rmse_experiment(&cfg) {
            Ok(e) => {
                let Rows::Rmse(rows) = e.report.rows else { unreachable!() };
                curves.push((cfg.rho, rows));
            }
            Err(e) => return Outcome::new(false, format!("{file}: {e}")),
        }
    }
    let mut pass = true;
    let mut detail = Vec::new();
    for (rho, rows) in &curves {
        let dec_p1 = rows.windows(2).all(|w| w[1].rmse_p1 < w[0].rmse_p1);
        let dec_th = rows.windows(2).all(|w| w[1].rmse_theta1 < w[0].rmse_theta1);
        pass &= dec_p1 && dec_th;
        let fmt = |f: fn(&RmseRow) -> f64| rows.iter().map(|r| format!("{:.4}", f(r))).collect::<Vec<_>>().join(" ");
        detail.push(format!(
            "rho {rho}: P1 [{}] decreasing={dec_p1}; theta1 [{}] decreasing={dec_th}",
            fmt(|r| r.rmse_p1),
            fmt(|r| r.rmse_theta1)
        ));
    }
    let at10 = |i: usize| curves[i].1.last().unwrap().clone();
    let (lo, hi) = (at10(0), at10(2));
    let p1_order = hi.rmse_p1 <= lo.rmse_p1;
    let th_order = lo.rmse_theta1 <= hi.rmse_theta1;
    pass &= p1_order && th_order;
    detail.push(format!(
        "J=10 P1 rho0.7 {:.4} <= rho0.3 {:.4}: {p1_order}; theta1 rho0.3 {:.4} <= rho0.7 {:.4}: {th_order}",
        hi.rmse_p1, lo.rmse_p1, lo.rmse_theta1, hi.rmse_theta1
    ));
    Outcome::new(pass, detail.join("\n    "))
}

/// Detection probability of an ROC (points joined by straight lines,
/// anchored at (0,0) and (1,1)) at false-alarm rate `pf`.
fn roc_pd_at(points: &[(f64, f64)], pf: f64) -> f64 {
    let mut pts = vec![(0.0, 0.0), (1.0, 1.0)];
    pts.extend_from_slice(points);
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut best: f64 = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if pf >= x0 && pf <= x1 {
            let y = if x1 > x0 { y0 + (y1 - y0) * (pf - x0) / (x1 - x0) } else { y0.max(y1) };
            best = best.max(y);
        }
    }
    best
}

/// Cost points at which `a`'s ROC is no lower than `b`'s design point,
/// within twice the combined Monte-Carlo standard error.
fn dominated_points(a: &[&RocRow], b: &[&RocRow], replicates: usize) -> Vec<bool> {
    let curve: Vec<(f64, f64)> = a.iter().map(|r| (r.pf_mean, r.pd_mean)).collect();
    a.iter()
        .zip(b)
        .map(|(ra, rb)| {
            let noise = 2.0 * (ra.pd_std.powi(2) + rb.pd_std.powi(2)).sqrt() / (replicates as f64).sqrt();
            roc_pd_at(&curve, rb.pf_mean) >= rb.pd_mean - noise
        })
        .collect()
}

fn roc_ordering() -> Outcome {
    let mut cfg = scenario("s5_rho07.toml");
    let small = StagePlan { count: 10, size: 100 };
    let large = StagePlan { count: 10, size: 200 };
    cfg.roc.replicates = 100;
    cfg.roc.budgets = vec![small, large];
    let exp = match run_roc_experiment(&cfg) {
        Ok(e) => e,
        Err(e) => return Outcome::new(false, format!("experiment error: {e}")),
    };
    let Rows::Roc(rows) = &exp.report.rows else { unreachable!() };
    let curve = |name: &str| -> Vec<&RocRow> { rows.iter().filter(|r| r.detector == name).collect() };
    let (clair, indep) = (curve(CLAIRVOYANT), curve(INDEPENDENCE));
    let (fb, fb_large) = (curve(&feedback_label(small)), curve(&feedback_label(large)));
    let r = cfg.roc.replicates;
    let c_over_f = dominated_points(&clair, &fb, r);
    let f_over_i = dominated_points(&fb, &indep, r);
    let ordered = c_over_f.iter().zip(&f_over_i).filter(|(a, b)| **a && **b).count();
    let budget = dominated_points(&fb_large, &fb, r).iter().filter(|&&x| x).count();
    let pts = |c: &[&RocRow]| c.iter().map(|r| format!("({:.3},{:.3})", r.pf_mean, r.pd_mean)).collect::<Vec<_>>().join(" ");
    Outcome::new(
        ordered >= 8 && budget >= 8,
        format!(
            "clairvoyant >= feedback >= independence at {ordered}/10 cost points; 10x200 >= 10x100 at {budget}/10\n    \
             clairvoyant {}\n    feedback-10x100 {}\n    feedback-10x200 {}\n    independence {}",
            pts(&clair),
            pts(&fb),
            pts(&fb_large),
            pts(&indep)
        ),
    )
}

fn determinism() -> Outcome {
    let mut cfg = scenario("s5_rho07.toml");
    cfg.stages = StagePlan { count: 3, size: 100 };
    cfg.rmse.replicates = 4;
    cfg.rmse.j_values = vec![2, 3];
    cfg.roc.replicates = 3;
    cfg.roc.c01 = vec![1.0, 0.5];
    cfg.monte_carlo.seed = 11;
    let csvs = || -> Vec<String> {
        let trace = run_trace(&cfg).unwrap();
        vec![
            run_rmse_experiment(&cfg).unwrap().report.csv_string().unwrap(),
            run_roc_experiment(&cfg).unwrap().report.csv_string().unwrap(),
            trace.report.csv_string().unwrap(),
            run_design(&cfg).unwrap().csv_string().unwrap(),
            run_estimate(&cfg, &trace.run.histogram).unwrap().csv_string().unwrap(),
        ]
    };
    let (a, b) = (csvs(), csvs());
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    Outcome::new(same == a.len(), format!("{same}/{} reports byte-identical (rmse, roc, trace, design, estimate)", a.len()))
}

fn numerical_hygiene() -> Outcome {
    let cfg = scenario("s5_rho05.toml");
    let grids = cfg.grids();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut norm_dev: f64 = 0.0;
    let mut banks = Vec::new();
    for _ in 0..100 {
        let bank = random_bank(&grids, &mut rng);
        for (j, h) in cfg.truth.hypotheses.iter().enumerate() {
            norm_dev = norm_dev.max((quantized_pmf(h, j, &bank).unwrap().probs.iter().sum::<f64>() - 1.0).abs());
        }
        norm_dev = norm_dev.max((mixture_pmf(&cfg.truth, &bank).unwrap().probs.iter().sum::<f64>() - 1.0).abs());
        banks.push(bank);
    }

    let mut all_free: ParamVector = cfg.truth.clone();
    all_free.free = vec![true; all_free.len()];
    let (mut asym, mut min_eig) = (0.0f64, f64::INFINITY);
    for chunk in banks.chunks(10) {
        for params in [&cfg.truth, &all_free] {
            let w = vec![1.0 / chunk.len() as f64; chunk.len()];
            let fi = fisher_info(params, chunk, &w).unwrap();
            asym = asym.max(fi.asymmetry());
            min_eig = min_eig.min(fi.min_eigenvalue());
        }
    }

    let mut sim = SensorSimulator::new(&cfg.truth, &grids, Draw::Mixture, ChaCha8Rng::seed_from_u64(10)).unwrap();
    let mut hist = QuantizedHistogram::default();
    for bank in banks.iter().take(3).chain([&cfg.initial_bank]) {
        let counts = sim.observe(bank, 500).unwrap();
        hist.push(HistogramGroup::new(counts, bank.clone()).unwrap());
    }
    let mut fd_dev: f64 = 0.0;
    for template in [&cfg.truth, &all_free] {
        for _ in 0..3 {
            let x: Vec<f64> = template.free_values().iter().map(|v| v * rng.random_range(0.9..1.1)).collect();
            let d: Vec<f64> = x.iter().map(|v| v * rng.random_range(-1.0..1.0)).collect();
            let g = log_likelihood_gradient(&x, &hist, template).unwrap();
            let ll = |t: f64| {
                let p: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                log_likelihood(&p, &hist, template).unwrap()
            };
            let e = 1e-4;
            let fd = (-ll(2.0 * e) + 8.0 * ll(e) - 8.0 * ll(-e) + ll(-2.0 * e)) / (12.0 * e);
            let gd: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let scale = g.iter().zip(&d).map(|(a, b)| (a * b).abs()).sum::<f64>().max(1e-12);
            fd_dev = fd_dev.max((fd - gd).abs() / scale);
        }
    }
    Outcome::new(
        norm_dev <= 1e-6 && asym <= 1e-12 && min_eig >= -1e-10 && fd_dev <= 1e-4,
        format!(
            "pmf sum dev {norm_dev:.2e}; Fisher asymmetry {asym:.2e}, min eigenvalue {min_eig:.3e}; gradient rel dev {fd_dev:.2e}"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, Check); 9] = [
        ("copula ground truth", copula_ground_truth),
        ("quantized pmf correctness", quantized_pmf_correctness),
        ("fusion-rule optimality oracle", fusion_rule_oracle),
        ("quantizer-search soundness", quantizer_search_soundness),
        ("MLE consistency and efficiency", mle_consistency),
        ("RMSE trend over stages and correlation", rmse_trend),
        ("ROC ordering and budget improvement", roc_ordering),
        ("determinism", determinism),
        ("numerical hygiene", numerical_hygiene),
    ];
    // ACCEPTANCE_CRITERIA=1,3,9 restricts a local run to the listed criteria
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let started = Instant::now();
        let out = check();
        let line = format!(
            "criterion {}: {} {name} [{:.1}s]\n    {}\n",
            i + 1,
            if out.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            out.detail
        );
        // written past the test harness' capture so the lines always show
        let mut stdout = std::io::stdout().lock();
        stdout.write_all(line.as_bytes()).unwrap();
        stdout.flush().unwrap();
        if !out.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
