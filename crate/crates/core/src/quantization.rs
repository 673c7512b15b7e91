//! Discretized sensor grids, bit-assignment quantizers, per-cell joint
//! masses and the induced quantized-outcome pmf.
//!
//! Joint outcomes are indexed by concatenating every sensor's bits,
//! sensor-major and bit-minor, and reading the result little-endian: bit
//! `t` of sensor `i` has weight `2^(offset_i + t)` with
//! `offset_i = r_1 + ... + r_{i-1}`.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::copula::{CopulaFamily, BOUNDARY_EPS};
use crate::error::{invalid, Error, Result};
use crate::model::{HypothesisModel, MarginalModel, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorGrid {
    pub y_min: f64,
    pub y_max: f64,
    pub delta: f64,
}

impl SensorGrid {
    pub fn new(y_min: f64, y_max: f64, delta: f64) -> Result<Self> {
        let g = Self { y_min, y_max, delta };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.y_max > self.y_min && self.y_min.is_finite() && self.y_max.is_finite()) {
            return Err(invalid(format!("bad grid {self:?}")));
        }
        let m = (self.y_max - self.y_min) / self.delta;
        if (m - m.round()).abs() > 1e-9 * m.max(1.0) || m.round() < 1.0 {
            return Err(invalid(format!(
                "grid step {} does not divide [{}, {}]",
                self.delta, self.y_min, self.y_max
            )));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        ((self.y_max - self.y_min) / self.delta).round() as usize
    }

    /// Lower edge of cell `m`.
    pub fn edge(&self, m: usize) -> f64 {
        self.y_min + m as f64 * self.delta
    }

    pub fn midpoint(&self, m: usize) -> f64 {
        self.y_min + (m as f64 + 0.5) * self.delta
    }

    /// Cell containing `y`; values outside the window go to the boundary cell.
    pub fn cell_of(&self, y: f64) -> usize {
        let m = ((y - self.y_min) / self.delta).floor();
        if m.is_nan() || m < 0.0 {
            0
        } else {
            (m as usize).min(self.n_cells() - 1)
        }
    }
}

/// Bit assignments of one sensor's `r_i` indicator functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorQuantizer {
    pub grid: SensorGrid,
    /// `bits[t][m]` is the output of indicator `t` on cell `m`.
    pub bits: Vec<Vec<bool>>,
}

impl SensorQuantizer {
    pub fn n_bits(&self) -> usize {
        self.bits.len()
    }

    /// Bits of cell `m` packed little-endian.
    pub fn pattern(&self, m: usize) -> usize {
        self.bits
            .iter()
            .enumerate()
            .fold(0, |acc, (t, b)| acc | ((b[m] as usize) << t))
    }

    pub fn set_pattern(&mut self, m: usize, pattern: usize) {
        for (t, b) in self.bits.iter_mut().enumerate() {
            b[m] = (pattern >> t) & 1 == 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerBank {
    pub sensors: Vec<SensorQuantizer>,
}

impl QuantizerBank {
    pub fn new(sensors: Vec<SensorQuantizer>) -> Result<Self> {
        let b = Self { sensors };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sensors.is_empty() {
            return Err(invalid("quantizer bank has no sensors"));
        }
        for (i, s) in self.sensors.iter().enumerate() {
            s.grid.validate()?;
            if s.bits.is_empty() {
                return Err(invalid(format!("sensor {i} has no quantizer bits")));
            }
            let m = s.grid.n_cells();
            if let Some(b) = s.bits.iter().find(|b| b.len() != m) {
                return Err(Error::Dimension(format!(
                    "sensor {i}: bit vector of length {} for {m} cells",
                    b.len()
                )));
            }
        }
        if self.total_bits() > 20 {
            return Err(invalid("more than 20 total quantizer bits"));
        }
        Ok(())
    }

    /// One-bit threshold quantizers `I[slope_i * y + offset_i >= 0]`,
    /// evaluated at cell midpoints.
    pub fn linear_thresholds(grids: &[SensorGrid], lines: &[(f64, f64)]) -> Result<Self> {
        if grids.len() != lines.len() {
            return Err(Error::Dimension("one (slope, offset) pair per sensor required".into()));
        }
        let sensors = grids
            .iter()
            .zip(lines)
            .map(|(g, &(slope, offset))| SensorQuantizer {
                grid: *g,
                bits: vec![(0..g.n_cells()).map(|m| slope * g.midpoint(m) + offset >= 0.0).collect()],
            })
            .collect();
        Self::new(sensors)
    }

    /// All-zero quantizers with `r_i` bits per sensor.
    pub fn constant(grids: &[SensorGrid], bits_per_sensor: &[usize]) -> Result<Self> {
        let sensors = grids
            .iter()
            .zip(bits_per_sensor)
            .map(|(g, &r)| SensorQuantizer { grid: *g, bits: vec![vec![false; g.n_cells()]; r] })
            .collect();
        Self::new(sensors)
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn total_bits(&self) -> usize {
        self.sensors.iter().map(SensorQuantizer::n_bits).sum()
    }

    pub fn n_outcomes(&self) -> usize {
        1 << self.total_bits()
    }

    pub fn bit_offset(&self, sensor: usize) -> usize {
        self.sensors[..sensor].iter().map(SensorQuantizer::n_bits).sum()
    }

    pub fn grids(&self) -> Vec<SensorGrid> {
        self.sensors.iter().map(|s| s.grid).collect()
    }

    pub fn cell_dims(&self) -> Vec<usize> {
        self.sensors.iter().map(|s| s.grid.n_cells()).collect()
    }

    /// Outcome code of each cell per sensor, already shifted into place.
    pub fn shifted_codes(&self) -> Vec<Vec<usize>> {
        self.sensors
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let off = self.bit_offset(i);
                (0..s.grid.n_cells()).map(|m| s.pattern(m) << off).collect()
            })
            .collect()
    }

    pub fn outcome_of_cells(&self, cells: &[usize]) -> usize {
        let mut out = 0;
        let mut off = 0;
        for (s, &m) in self.sensors.iter().zip(cells) {
            out |= s.pattern(m) << off;
            off += s.n_bits();
        }
        out
    }

    /// Outcome index of an observation vector.
    pub fn quantize(&self, y: &[f64]) -> usize {
        debug_assert_eq!(y.len(), self.n_sensors());
        let cells: Vec<usize> = self.sensors.iter().zip(y).map(|(s, &v)| s.grid.cell_of(v)).collect();
        self.outcome_of_cells(&cells)
    }

    pub fn same_grids(&self, other: &QuantizerBank) -> bool {
        self.grids() == other.grids()
    }
}

/// Joint probability of every grid cell, row-major with sensor 0 slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMass {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl CellMass {
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn get(&self, cells: &[usize]) -> f64 {
        let mut idx = 0;
        for (&m, &d) in cells.iter().zip(&self.dims) {
            idx = idx * d + m;
        }
        self.data[idx]
    }

    /// Mass of each cell of one sensor (other sensors summed out).
    pub fn marginal(&self, sensor: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dims[sensor]];
        let inner: usize = self.dims[sensor + 1..].iter().product();
        for (k, &v) in self.data.iter().enumerate() {
            out[(k / inner) % self.dims[sensor]] += v;
        }
        out
    }
}

/// Midpoint-rule cell masses of a hypothesis model over the given grids.
pub fn cell_mass(h: &HypothesisModel, grids: &[SensorGrid]) -> Result<CellMass> {
    h.validate()?;
    if grids.len() != h.dim() {
        return Err(Error::Dimension(format!(
            "{} grids for a {}-sensor model",
            grids.len(),
            h.dim()
        )));
    }
    let dims: Vec<usize> = grids.iter().map(SensorGrid::n_cells).collect();
    // per-sensor pdf * delta at the midpoints
    let weights: Vec<Vec<f64>> = grids
        .iter()
        .zip(&h.marginals)
        .map(|(g, m)| (0..g.n_cells()).map(|k| m.pdf(g.midpoint(k)) * g.delta).collect())
        .collect();
    let data = match h.copula.family {
        CopulaFamily::Independence => outer_product(&weights),
        CopulaFamily::Clayton => {
            let cdfs: Vec<Vec<f64>> = grids
                .iter()
                .zip(&h.marginals)
                .map(|(g, m)| (0..g.n_cells()).map(|k| m.cdf(g.midpoint(k))).collect())
                .collect();
            clayton_cells(h.theta, &cdfs[0], &cdfs[1], &weights[0], &weights[1])
        }
    };
    Ok(CellMass { dims, data })
}

fn outer_product(weights: &[Vec<f64>]) -> Vec<f64> {
    let mut data = vec![1.0];
    for w in weights {
        let mut next = Vec::with_capacity(data.len() * w.len());
        for &a in &data {
            next.extend(w.iter().map(|&b| a * b));
        }
        data = next;
    }
    data
}

fn clayton_cells(theta: f64, u: &[f64], v: &[f64], wu: &[f64], wv: &[f64]) -> Vec<f64> {
    let prep = |cdf: &[f64], w: &[f64]| -> (Vec<f64>, Vec<f64>) {
        cdf.iter()
            .zip(w)
            .map(|(&c, &w)| {
                let l = c.clamp(BOUNDARY_EPS, 1.0 - BOUNDARY_EPS).ln();
                ((-theta * l).exp_m1(), w.ln() - (1.0 + theta) * l)
            })
            .unzip()
    };
    let (am1, la) = prep(u, wu);
    let (bm1, lb) = prep(v, wv);
    let log_norm = (1.0 + theta).ln();
    let expo = 2.0 + 1.0 / theta;
    let mut data = Vec::with_capacity(u.len() * v.len());
    for (a, la) in am1.iter().zip(&la) {
        let base = log_norm + la;
        data.extend(
            bm1.iter()
                .zip(&lb)
                .map(|(b, lb)| (base + lb - expo * (1.0 + a + b).ln()).exp()),
        );
    }
    data
}

/// Bounded cache of cell-mass tables keyed by model parameters and grids.
#[derive(Debug, Default)]
pub struct CellMassCache {
    capacity: usize,
    map: RwLock<HashMap<Vec<u64>, Arc<CellMass>>>,
}

impl CellMassCache {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, map: RwLock::new(HashMap::new()) }
    }

    fn key(h: &HypothesisModel, grids: &[SensorGrid]) -> Vec<u64> {
        let mut k = vec![h.copula.family as u64, h.theta.to_bits()];
        for m in &h.marginals {
            k.push(m.shape.to_bits());
            k.push(m.scale.to_bits());
        }
        for g in grids {
            k.extend([g.y_min.to_bits(), g.y_max.to_bits(), g.delta.to_bits()]);
        }
        k
    }

    pub fn get_or_compute(&self, h: &HypothesisModel, grids: &[SensorGrid]) -> Result<Arc<CellMass>> {
        let key = Self::key(h, grids);
        if let Some(hit) = self.map.read().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let table = Arc::new(cell_mass(h, grids)?);
        if self.capacity > 0 {
            let mut map = self.map.write().unwrap();
            if map.len() >= self.capacity {
                map.clear();
            }
            map.insert(key, table.clone());
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which model a pmf was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PmfSource {
    Hypothesis(usize),
    Mixture { p0: f64 },
    Table,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPmf {
    pub probs: Vec<f64>,
    pub source: PmfSource,
    /// Cell mass inside the window before renormalization.
    pub window_mass: f64,
}

/// Unnormalized outcome masses of a cell table under a bank.
pub fn outcome_masses(mass: &CellMass, bank: &QuantizerBank) -> Result<Vec<f64>> {
    if mass.dims != bank.cell_dims() {
        return Err(Error::Dimension(format!(
            "cell table {:?} does not match quantizer grids {:?}",
            mass.dims,
            bank.cell_dims()
        )));
    }
    let codes = bank.shifted_codes();
    let mut out = vec![0.0; bank.n_outcomes()];
    if codes.len() == 2 {
        // one indicator column per sensor-1 pattern; each row reduces to dot products
        let n1 = codes[1].len();
        let off1 = bank.bit_offset(1);
        let n_pat = 1usize << bank.sensors[1].n_bits();
        let ind: Vec<Vec<f64>> = (0..n_pat)
            .map(|k| codes[1].iter().map(|&c| if c >> off1 == k { 1.0 } else { 0.0 }).collect())
            .collect();
        for (row, &c0) in mass.data.chunks_exact(n1).zip(&codes[0]) {
            for (k, w) in ind.iter().enumerate() {
                out[c0 | (k << off1)] += dot(row, w);
            }
        }
    } else {
        let mut idx = vec![0usize; codes.len()];
        for &v in &mass.data {
            let o = idx.iter().zip(&codes).fold(0, |acc, (&m, c)| acc | c[m]);
            out[o] += v;
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < mass.dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Renormalized pmf of one cell table under a bank.
pub fn pmf_from_mass(mass: &CellMass, bank: &QuantizerBank, source: PmfSource) -> Result<QuantizedPmf> {
    let raw = outcome_masses(mass, bank)?;
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("model puts no mass inside the observation window"));
    }
    Ok(QuantizedPmf { probs: raw.iter().map(|p| p / total).collect(), source, window_mass: total })
}

/// Pmf of the quantized outcome under hypothesis `j`.
pub fn quantized_pmf(h: &HypothesisModel, j: usize, bank: &QuantizerBank) -> Result<QuantizedPmf> {
    pmf_from_mass(&cell_mass(h, &bank.grids())?, bank, PmfSource::Hypothesis(j))
}

/// Mixture pmf; each hypothesis pmf is renormalized before weighting.
pub fn mixture_pmf(p: &ParamVector, bank: &QuantizerBank) -> Result<QuantizedPmf> {
    let f0 = quantized_pmf(&p.hypotheses[0], 0, bank)?;
    let f1 = quantized_pmf(&p.hypotheses[1], 1, bank)?;
    Ok(QuantizedPmf {
        probs: f0.probs.iter().zip(&f1.probs).map(|(a, b)| p.p0 * a + (1.0 - p.p0) * b).collect(),
        source: PmfSource::Mixture { p0: p.p0 },
        window_mass: p.p0 * f0.window_mass + (1.0 - p.p0) * f1.window_mass,
    })
}

/// Maps copula-scale uniforms to grid cells via the marginal CDF at the
/// cell edges, equivalent to `cell_of(F^{-1}(v))`.
#[derive(Debug, Clone)]
pub struct CellLocator {
    /// CDF at interior edges `y_min + k * delta`, `k = 1..M`.
    edges: Vec<f64>,
}

impl CellLocator {
    pub fn new(grid: &SensorGrid, marginal: &MarginalModel) -> Self {
        Self { edges: (1..grid.n_cells()).map(|k| marginal.cdf(grid.edge(k))).collect() }
    }

    pub fn locate(&self, v: f64) -> usize {
        self.edges.partition_point(|&f| f <= v)
    }
}

/// Outcome counts of one feedback stage together with the bank that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramGroup {
    pub counts: Vec<u64>,
    pub bank: QuantizerBank,
}

impl HistogramGroup {
    pub fn new(counts: Vec<u64>, bank: QuantizerBank) -> Result<Self> {
        if counts.len() != bank.n_outcomes() {
            return Err(Error::Dimension(format!(
                "{} counts for {} outcomes",
                counts.len(),
                bank.n_outcomes()
            )));
        }
        Ok(Self { counts, bank })
    }

    pub fn n(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantizedHistogram {
    pub groups: Vec<HistogramGroup>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HistogramRecord {
    stage: usize,
    n: u64,
    grids: Vec<SensorGrid>,
    /// Per sensor, one hex string per indicator bit.
    quantizers: Vec<Vec<String>>,
    counts: Vec<u64>,
}

/// Packs bits LSB-first into bytes and hex-encodes them.
pub fn pack_bits(bits: &[bool]) -> String {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (k, &b) in bits.iter().enumerate() {
        if b {
            bytes[k / 8] |= 1 << (k % 8);
        }
    }
    hex::encode(bytes)
}

pub fn unpack_bits(hex_str: &str, len: usize) -> Result<Vec<bool>> {
    let bytes = hex::decode(hex_str).map_err(|e| invalid(format!("bad hex bit vector: {e}")))?;
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::Dimension(format!(
            "{} packed bytes for {len} cells",
            bytes.len()
        )));
    }
    Ok((0..len).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect())
}

impl QuantizedHistogram {
    pub fn push(&mut self, group: HistogramGroup) {
        self.groups.push(group);
    }

    pub fn n_total(&self) -> u64 {
        self.groups.iter().map(HistogramGroup::n).sum()
    }

    /// Group weights `N_j / N`.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.n_total() as f64;
        self.groups.iter().map(|g| g.n() as f64 / n).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (j, g) in self.groups.iter().enumerate() {
            let rec = HistogramRecord {
                stage: j + 1,
                n: g.n(),
                grids: g.bank.grids(),
                quantizers: g
                    .bank
                    .sensors
                    .iter()
                    .map(|s| s.bits.iter().map(|b| pack_bits(b)).collect())
                    .collect(),
                counts: g.counts.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut hist = Self::default();
        for (k, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: k + 1, msg };
            let rec: HistogramRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            if rec.grids.len() != rec.quantizers.len() {
                return Err(err("grids and quantizers differ in sensor count".into()));
            }
            let sensors = rec
                .grids
                .iter()
                .zip(&rec.quantizers)
                .map(|(g, qs)| {
                    g.validate()?;
                    let bits = qs
                        .iter()
                        .map(|h| unpack_bits(h, g.n_cells()))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(SensorQuantizer { grid: *g, bits })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| err(e.to_string()))?;
            let bank = QuantizerBank::new(sensors).map_err(|e| err(e.to_string()))?;
            let group = HistogramGroup::new(rec.counts, bank).map_err(|e| err(e.to_string()))?;
            if group.n() != rec.n {
                return Err(err(format!("counts sum to {} but n = {}", group.n(), rec.n)));
            }
            hist.push(group);
        }
        Ok(hist)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::copula::CopulaModel;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn s5_grids() -> Vec<SensorGrid> {
        vec![SensorGrid::new(0.0, 60.0, 0.5).unwrap(); 2]
    }

    pub(crate) fn s5_bank() -> QuantizerBank {
        QuantizerBank::linear_thresholds(&s5_grids(), &[(3.0, -60.0), (-3.0, 60.0)]).unwrap()
    }

    pub(crate) fn s5_models(theta1: f64) -> (HypothesisModel, HypothesisModel) {
        let g = |k| MarginalModel::gamma(k, 4.0).unwrap();
        let h0 = HypothesisModel::new(CopulaModel::independence(2), 0.0, vec![g(3.0), g(5.0)]).unwrap();
        let h1 = HypothesisModel::new(CopulaModel::clayton(), theta1, vec![g(5.0), g(7.0)]).unwrap();
        (h0, h1)
    }

    #[test]
    fn grid_validation() {
        assert!(SensorGrid::new(0.0, 60.0, 0.7).is_err());
        assert!(SensorGrid::new(0.0, 60.0, -0.5).is_err());
        let g = SensorGrid::new(0.0, 60.0, 0.5).unwrap();
        assert_eq!(g.n_cells(), 120);
        assert_eq!(g.cell_of(0.0), 0);
        assert_eq!(g.cell_of(0.5), 1);
        assert_eq!(g.cell_of(-3.0), 0);
        assert_eq!(g.cell_of(75.0), 119);
        assert_eq!(g.cell_of(59.99), 119);
    }

    #[test]
    fn quantize_examples() {
        let bank = s5_bank();
        assert_eq!(bank.quantize(&[25.0, 10.0]), 0b11);
        assert_eq!(bank.quantize(&[0.0, 59.5]), 0);
        assert_eq!(bank.quantize(&[20.0, 25.0]), 0b01);
        assert_eq!(bank.quantize(&[19.9, 19.9]), 0b10);
        let zero = QuantizerBank::constant(&s5_grids(), &[1, 2]).unwrap();
        for y in [[1.0, 2.0], [30.0, 59.0]] {
            assert_eq!(zero.quantize(&y), 0);
        }
        assert_eq!(zero.n_outcomes(), 8);
    }

    #[test]
    fn multi_bit_outcome_indexing() {
        let grids = vec![SensorGrid::new(0.0, 4.0, 1.0).unwrap(); 2];
        let mut bank = QuantizerBank::constant(&grids, &[2, 1]).unwrap();
        bank.sensors[0].set_pattern(3, 0b10);
        bank.sensors[1].set_pattern(2, 1);
        assert_eq!(bank.bit_offset(1), 2);
        assert_eq!(bank.quantize(&[3.5, 2.5]), 0b110);
        assert_eq!(bank.quantize(&[3.5, 0.5]), 0b010);
        assert_eq!(bank.quantize(&[0.5, 2.5]), 0b100);
        assert_eq!(bank.sensors[0].pattern(3), 2);
    }

    #[test]
    fn independence_mass_factorizes() {
        let (h0, _) = s5_models(1.0);
        let mass = cell_mass(&h0, &s5_grids()).unwrap();
        let w0 = mass.marginal(0);
        let w1 = mass.marginal(1);
        let tot = mass.total();
        for (m, n) in [(3, 7), (40, 40), (100, 2)] {
            assert_abs_diff_eq!(mass.get(&[m, n]) * tot, w0[m] * w1[n], epsilon = 1e-15);
        }
    }

    #[test]
    fn mass_total_matches_window_probability() {
        let (h0, h1) = s5_models(1.0759);
        let grids = s5_grids();
        let m0 = cell_mass(&h0, &grids).unwrap();
        let expected = h0.marginals[0].cdf(60.0) * h0.marginals[1].cdf(60.0);
        assert_abs_diff_eq!(m0.total(), expected, epsilon = 1e-3);
        assert_abs_diff_eq!(m0.total(), 1.0, epsilon = 1e-2);
        let m1 = cell_mass(&h1, &grids).unwrap();
        assert_abs_diff_eq!(m1.total(), 1.0, epsilon = 1e-2);
    }

    #[test]
    fn clayton_fast_path_matches_joint_pdf() {
        let (_, h1) = s5_models(2.1316);
        let grids = s5_grids();
        let mass = cell_mass(&h1, &grids).unwrap();
        for (m, n) in [(0, 0), (10, 30), (50, 60), (119, 119), (5, 110)] {
            let y = [grids[0].midpoint(m), grids[1].midpoint(n)];
            let direct = h1.joint_pdf(&y).unwrap() * 0.25;
            assert!((mass.get(&[m, n]) - direct).abs() <= 1e-12 * direct.max(1e-300));
        }
    }

    #[test]
    fn refinement_changes_aggregate_mass_little() {
        let (_, h1) = s5_models(2.1316);
        let coarse = s5_grids();
        let fine = vec![SensorGrid::new(0.0, 60.0, 0.25).unwrap(); 2];
        let bank_c = s5_bank();
        let bank_f = QuantizerBank::linear_thresholds(&fine, &[(3.0, -60.0), (-3.0, 60.0)]).unwrap();
        let a = outcome_masses(&cell_mass(&h1, &coarse).unwrap(), &bank_c).unwrap();
        let b = outcome_masses(&cell_mass(&h1, &fine).unwrap(), &bank_f).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-3, "{x} vs {y}");
        }
    }

    #[test]
    fn s5_initial_pmf_under_h0_factorizes() {
        let (h0, _) = s5_models(1.0);
        let f = quantized_pmf(&h0, 0, &s5_bank()).unwrap();
        // renormalized to the window: condition each marginal on [0, 60]
        let (g1, g2) = (&h0.marginals[0], &h0.marginals[1]);
        let p1 = (g1.cdf(60.0) - g1.cdf(20.0)) / g1.cdf(60.0);
        let p2 = g2.cdf(20.0) / g2.cdf(60.0);
        let expect = [(1.0 - p1) * (1.0 - p2), p1 * (1.0 - p2), (1.0 - p1) * p2, p1 * p2];
        for (a, b) in f.probs.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-3);
        }
        // and against the untruncated analytic values
        let q1 = 1.0 - g1.cdf(20.0);
        let q2 = g2.cdf(20.0);
        assert_abs_diff_eq!(f.probs[3], q1 * q2, epsilon = 1e-3);
        assert_abs_diff_eq!(f.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_quantizer_gives_point_mass() {
        let (_, h1) = s5_models(1.0);
        let f = quantized_pmf(&h1, 1, &QuantizerBank::constant(&s5_grids(), &[1, 1]).unwrap()).unwrap();
        assert_eq!(f.probs[0], 1.0);
        assert!(f.probs[1..].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn degenerate_mixture_equals_h0() {
        let (h0, h1) = s5_models(1.0);
        let p = ParamVector::new(1.0, h0.clone(), h1).unwrap();
        let bank = s5_bank();
        assert_eq!(mixture_pmf(&p, &bank).unwrap().probs, quantized_pmf(&h0, 0, &bank).unwrap().probs);
    }

    #[test]
    fn empirical_frequencies_match_pmf() {
        let (_, h1) = s5_models(1.0759);
        let bank = s5_bank();
        let f = quantized_pmf(&h1, 1, &bank).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0usize; 4];
        let mut v = [0.0; 2];
        for _ in 0..n {
            h1.copula.draw(h1.theta, &mut rng, &mut v);
            let y = [h1.marginals[0].quantile(v[0]).unwrap(), h1.marginals[1].quantile(v[1]).unwrap()];
            counts[bank.quantize(&y)] += 1;
        }
        for (c, p) in counts.iter().zip(&f.probs) {
            assert!((*c as f64 / n as f64 - p).abs() <= 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn locator_agrees_with_quantile_then_cell() {
        let g = SensorGrid::new(0.0, 60.0, 0.5).unwrap();
        let m = MarginalModel::gamma(5.0, 4.0).unwrap();
        let loc = CellLocator::new(&g, &m);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let v: f64 = rng.random_range(1e-9..1.0 - 1e-9);
            let y = m.quantile(v).unwrap();
            let a = loc.locate(v);
            let b = g.cell_of(y);
            // agreement up to the quantile's root tolerance at cell edges
            assert!(a == b || (g.edge(a.max(b)) - y).abs() < 1e-6, "{v} {y} {a} {b}");
        }
        assert_eq!(loc.locate(1.0 - 1e-15), 119);
    }

    #[test]
    fn cache_returns_same_table() {
        let cache = CellMassCache::new(2);
        let (h0, h1) = s5_models(1.0);
        let g = s5_grids();
        let a = cache.get_or_compute(&h1, &g).unwrap();
        let b = cache.get_or_compute(&h1, &g).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        cache.get_or_compute(&h0, &g).unwrap();
        assert_eq!(cache.len(), 2);
        let (_, h2) = s5_models(3.0);
        cache.get_or_compute(&h2, &g).unwrap();
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn histogram_jsonl_roundtrip_and_errors() {
        let bank = s5_bank();
        let mut hist = QuantizedHistogram::default();
        hist.push(HistogramGroup::new(vec![10, 20, 30, 40], bank.clone()).unwrap());
        let mut b2 = bank.clone();
        b2.sensors[1].set_pattern(77, 1);
        hist.push(HistogramGroup::new(vec![1, 0, 0, 99], b2).unwrap());
        let mut buf = Vec::new();
        hist.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"stage\":1,\"n\":100,"));
        let back = QuantizedHistogram::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, hist);
        assert_eq!(hist.weights(), vec![0.5, 0.5]);

        let bad = text.replacen("\"n\":100", "\"n\":101", 1);
        match QuantizedHistogram::read_jsonl(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad2 = format!("{}\nnot json\n", text.lines().next().unwrap());
        match QuantizedHistogram::read_jsonl(bad2.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn random_bank(seed: u64, bits: &[usize]) -> QuantizerBank {
        let grids = vec![SensorGrid::new(0.0, 60.0, 0.5).unwrap(); bits.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = QuantizerBank::constant(&grids, bits).unwrap();
        for s in &mut bank.sensors {
            for b in &mut s.bits {
                for x in b.iter_mut() {
                    *x = rng.random();
                }
            }
        }
        bank
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_banks_partition_the_mass(seed in any::<u64>(), r0 in 1usize..3, r1 in 1usize..3) {
            let (_, h1) = s5_models(1.5);
            let bank = random_bank(seed, &[r0, r1]);
            let mass = cell_mass(&h1, &bank.grids()).unwrap();
            let raw = outcome_masses(&mass, &bank).unwrap();
            prop_assert!((raw.iter().sum::<f64>() - mass.total()).abs() < 1e-12);
            let f = pmf_from_mass(&mass, &bank, PmfSource::Table).unwrap();
            prop_assert!((f.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(f.probs.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn merging_outcomes_sums_their_mass(seed in any::<u64>()) {
            let (_, h1) = s5_models(0.8);
            let bank = random_bank(seed, &[2, 1]);
            let mass = cell_mass(&h1, &bank.grids()).unwrap();
            let fine = outcome_masses(&mass, &bank).unwrap();
            // drop sensor 0's second bit: outcomes differing only in bit 1 merge
            let mut coarse_bank = bank.clone();
            coarse_bank.sensors[0].bits.truncate(1);
            let coarse = outcome_masses(&mass, &coarse_bank).unwrap();
            for (o, c) in coarse.iter().enumerate() {
                let (b0, b2) = (o & 1, o >> 1);
                let merged = fine[b0 | (b2 << 2)] + fine[b0 | 0b10 | (b2 << 2)];
                prop_assert!((merged - c).abs() < 1e-14);
            }
        }
    }
}
