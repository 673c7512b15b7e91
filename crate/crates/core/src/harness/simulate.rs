//! Seeded observation generators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::{FusionRule, QuantizedSource};
use crate::error::{invalid, Error, Result};
use crate::model::ParamVector;
use crate::quantization::{CellLocator, QuantizerBank, SensorGrid};

/// Which distribution a batch of observations comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Draw {
    H0,
    H1,
    /// Hypothesis label drawn per sample with probability `P1` for H1.
    Mixture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub label: usize,
    pub y: Vec<f64>,
}

fn draw_label<R: Rng + ?Sized>(params: &ParamVector, draw: Draw, rng: &mut R) -> usize {
    match draw {
        Draw::H0 => 0,
        Draw::H1 => 1,
        Draw::Mixture => usize::from(rng.random::<f64>() < params.p1()),
    }
}

/// `n` continuous observations: label, copula point, marginal quantiles.
pub fn generate_observations<R: Rng + ?Sized>(params: &ParamVector, draw: Draw, n: usize, rng: &mut R) -> Result<Vec<Observation>> {
    if n == 0 {
        return Err(invalid("need at least one observation"));
    }
    params.validate()?;
    let mut v = vec![0.0; params.dim()];
    (0..n)
        .map(|_| {
            let label = draw_label(params, draw, rng);
            let h = &params.hypotheses[label];
            h.copula.draw(h.theta, rng, &mut v);
            let y = v
                .iter()
                .zip(&h.marginals)
                .map(|(&u, m)| m.quantile(u))
                .collect::<Result<Vec<_>>>()?;
            Ok(Observation { label, y })
        })
        .collect()
}

/// Draws grid cells directly: the same stream as [`generate_observations`]
/// followed by `cell_of`, without the quantile solve.
#[derive(Debug, Clone)]
pub struct SensorSimulator {
    params: ParamVector,
    grids: Vec<SensorGrid>,
    locators: [Vec<CellLocator>; 2],
    scratch: Vec<f64>,
    pub draw: Draw,
    pub rng: ChaCha8Rng,
}

impl SensorSimulator {
    pub fn new(params: &ParamVector, grids: &[SensorGrid], draw: Draw, rng: ChaCha8Rng) -> Result<Self> {
        params.validate()?;
        if grids.len() != params.dim() {
            return Err(Error::Dimension(format!("{} grids for {} sensors", grids.len(), params.dim())));
        }
        let loc = |j: usize| -> Vec<CellLocator> {
            grids.iter().zip(&params.hypotheses[j].marginals).map(|(g, m)| CellLocator::new(g, m)).collect()
        };
        Ok(Self { params: params.clone(), grids: grids.to_vec(), locators: [loc(0), loc(1)], scratch: vec![0.0; grids.len()], draw, rng })
    }

    pub fn grids(&self) -> &[SensorGrid] {
        &self.grids
    }

    /// Label and cell indices of one fresh observation.
    pub fn draw_cells(&mut self, draw: Draw, cells: &mut [usize]) -> usize {
        let label = draw_label(&self.params, draw, &mut self.rng);
        let h = &self.params.hypotheses[label];
        h.copula.draw(h.theta, &mut self.rng, &mut self.scratch);
        for ((c, &u), loc) in cells.iter_mut().zip(&self.scratch).zip(&self.locators[label]) {
            *c = loc.locate(u);
        }
        label
    }

    /// `n` cell vectors, flattened sensor-minor.
    pub fn cell_batch(&mut self, draw: Draw, n: usize) -> Vec<usize> {
        let l = self.grids.len();
        let mut out = vec![0usize; n * l];
        for row in out.chunks_mut(l) {
            self.draw_cells(draw, row);
        }
        out
    }
}

impl QuantizedSource for SensorSimulator {
    fn observe(&mut self, bank: &QuantizerBank, n: usize) -> Result<Vec<u64>> {
        if bank.grids() != self.grids {
            return Err(Error::Dimension("bank grids differ from the simulator's".into()));
        }
        let codes = bank.shifted_codes();
        let mut counts = vec![0u64; bank.n_outcomes()];
        let mut cells = vec![0usize; self.grids.len()];
        for _ in 0..n {
            self.draw_cells(self.draw, &mut cells);
            let o = cells.iter().zip(&codes).fold(0, |acc, (&m, c)| acc | c[m]);
            counts[o] += 1;
        }
        Ok(counts)
    }
}

/// Labelled test observations as grid cells.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub n_sensors: usize,
    pub h0: Vec<usize>,
    pub h1: Vec<usize>,
}

impl TestSet {
    pub fn draw(sim: &mut SensorSimulator, n_h0: usize, n_h1: usize) -> Self {
        let h1 = sim.cell_batch(Draw::H1, n_h1);
        let h0 = sim.cell_batch(Draw::H0, n_h0);
        Self { n_sensors: sim.grids.len(), h0, h1 }
    }

    fn decide_rate(&self, cells: &[usize], bank: &QuantizerBank, rule: &FusionRule) -> f64 {
        let codes = bank.shifted_codes();
        let n = cells.len() / self.n_sensors;
        let hits = cells
            .chunks(self.n_sensors)
            .filter(|row| rule.decisions[row.iter().zip(&codes).fold(0, |acc, (&m, c)| acc | c[m])])
            .count();
        hits as f64 / n as f64
    }

    /// Empirical `(P_f, P_d)` of a designed system.
    pub fn rates(&self, bank: &QuantizerBank, rule: &FusionRule) -> (f64, f64) {
        (self.decide_rate(&self.h0, bank, rule), self.decide_rate(&self.h1, bank, rule))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::sample_spearman;
    use crate::design::{bayes_cost, CostCoefficients};
    use crate::quantization::tests::{s5_bank, s5_grids, s5_models};
    use rand::SeedableRng;

    fn s5(theta1: f64) -> ParamVector {
        let (h0, h1) = s5_models(theta1);
        ParamVector::new(0.8, h0, h1).unwrap()
    }

    #[test]
    fn h0_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = generate_observations(&s5(1.0759), Draw::H0, 10_000, &mut rng).unwrap();
        let mean = |i: usize| obs.iter().map(|o| o.y[i]).sum::<f64>() / obs.len() as f64;
        assert!((mean(0) - 12.0).abs() < 0.3);
        assert!((mean(1) - 20.0).abs() < 0.4);
        assert!(obs.iter().all(|o| o.label == 0));
    }

    #[test]
    fn mixture_label_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = generate_observations(&s5(1.0759), Draw::Mixture, 10_000, &mut rng).unwrap();
        let frac = obs.iter().filter(|o| o.label == 1).count() as f64 / 1e4;
        assert!((frac - 0.2).abs() < 0.012, "{frac}");
    }

    #[test]
    fn h1_rank_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = generate_observations(&s5(2.1316), Draw::H1, 100_000, &mut rng).unwrap();
        let pts: Vec<Vec<f64>> = obs.into_iter().map(|o| o.y).collect();
        assert!((sample_spearman(&pts) - 0.7).abs() < 0.02);
    }

    #[test]
    fn zero_draws_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_observations(&s5(1.0), Draw::H0, 0, &mut rng).is_err());
    }

    #[test]
    fn cell_stream_matches_continuous_stream() {
        let p = s5(1.0759);
        let grids = s5_grids();
        let obs = generate_observations(&p, Draw::Mixture, 2000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut sim = SensorSimulator::new(&p, &grids, Draw::Mixture, ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut cells = [0usize; 2];
        let mut mismatches = 0;
        for o in &obs {
            let label = sim.draw_cells(Draw::Mixture, &mut cells);
            assert_eq!(label, o.label);
            if cells != [grids[0].cell_of(o.y[0]), grids[1].cell_of(o.y[1])] {
                mismatches += 1;
            }
        }
        // only quantile round-off right at a cell edge can disagree
        assert!(mismatches <= 2, "{mismatches}");
    }

    #[test]
    fn empirical_bayes_cost_matches_analytic() {
        let p = s5(2.1316);
        let bank = s5_bank();
        let rule = FusionRule::or(4);
        let c = CostCoefficients::new(0.0, 1.0, 2.0, 0.0).unwrap();
        let m = bayes_cost(&bank, &rule, &p, &c).unwrap();
        let n = 1_000_000;
        let mut sim = SensorSimulator::new(&p, &s5_grids(), Draw::Mixture, ChaCha8Rng::seed_from_u64(5)).unwrap();
        let codes = bank.shifted_codes();
        let mut cells = [0usize; 2];
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let label = sim.draw_cells(Draw::Mixture, &mut cells);
            let d = rule.decisions[codes[0][cells[0]] | codes[1][cells[1]]];
            let cost = match (label, d) {
                (0, false) => c.c00,
                (0, true) => c.c10,
                (_, false) => c.c01,
                (_, true) => c.c11,
            };
            sum += cost;
            sum_sq += cost * cost;
        }
        let mean = sum / n as f64;
        let sd = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        // the window clamp moves a little mass relative to the renormalized model
        assert!((mean - m.bayes_cost).abs() < 3.0 * sd + 1e-4, "{mean} vs {}", m.bayes_cost);
    }

    #[test]
    fn test_set_rates_match_pmfs() {
        let p = s5(1.0759);
        let bank = s5_bank();
        let rule = FusionRule::or(4);
        let mut sim = SensorSimulator::new(&p, &s5_grids(), Draw::Mixture, ChaCha8Rng::seed_from_u64(4)).unwrap();
        let t = TestSet::draw(&mut sim, 40_000, 40_000);
        let (pf, pd) = t.rates(&bank, &rule);
        let m = bayes_cost(&bank, &rule, &p, &CostCoefficients::new(0.0, 1.0, 2.0, 0.0).unwrap()).unwrap();
        assert!((pf - m.p_false_alarm).abs() < 4.0 / 200.0);
        assert!((pd - m.p_detect).abs() < 4.0 / 200.0);
    }
}
