//! `(d, e)` sweeps, success-rate intervals and the latency micro-benchmark.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asyncexec::{run_episode, staleness_stats, validate_schedule, Schedule, Violation};
use crate::envsim::EnvConfig;
use crate::policies::{ChunkPolicy, CorrectionHead};
use crate::rng;
use crate::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    A2c2,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Naive => "naive",
            Method::A2c2 => "a2c2",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Method::Naive),
            "a2c2" => Ok(Method::A2c2),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub env: EnvConfig,
    pub horizon: usize,
    /// `(d, e)` pairs; invalid ones are reported and skipped.
    pub cells: Vec<(usize, usize)>,
    pub rollouts: usize,
    pub base_seed: u64,
    pub methods: Vec<Method>,
}

/// Delays `0..=4` at `e = max(d, 1)`, then `e = 1..H−1` at `d = 1`.
pub fn default_cells(horizon: usize) -> Vec<(usize, usize)> {
    let mut cells: Vec<(usize, usize)> = (0..=4).map(|d| (d, d.max(1))).collect();
    for e in 1..horizon {
        if !cells.contains(&(1, e)) {
            cells.push((1, e));
        }
    }
    cells
}

/// Every valid `(d, e)` with `d ≤ max_delay`.
pub fn cross_product_cells(horizon: usize, max_delay: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for d in 0..=max_delay {
        for e in 1..=horizon {
            if validate_schedule(horizon, e, d).is_ok() {
                out.push((d, e));
            }
        }
    }
    out
}

/// Episode seed for rollout `i`. It depends on neither the method nor the cell,
/// so every method and every `(d, e)` faces the same episodes.
pub fn rollout_seed(base_seed: u64, i: usize) -> u64 {
    rng::mix(&[base_seed, rng::Stream::Sweep as u64, i as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub d: usize,
    pub e: usize,
    pub successes: usize,
    pub n: usize,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_staleness: f64,
    pub mean_delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub cells: Vec<CellResult>,
    pub skipped: Vec<(usize, usize, Violation)>,
    /// Exogenous-event hashes per rollout, in the same order as `cells`.
    pub exogenous: Vec<Vec<u64>>,
}

impl SweepReport {
    pub fn cell(&self, method: Method, d: usize, e: usize) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.method == method && c.d == d && c.e == e)
    }
}

/// Wilson score interval at quantile `z`.
pub fn wilson(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z / denom * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

fn cell_result(method: Method, d: usize, e: usize, successes: usize, n: usize, staleness: f64, delta: f64) -> CellResult {
    let (lo, hi) = wilson(successes, n, Z95);
    CellResult {
        method,
        d,
        e,
        successes,
        n,
        success_rate: successes as f64 / n as f64,
        ci_low: lo,
        ci_high: hi,
        mean_staleness: staleness,
        mean_delta_norm: delta,
    }
}

/// Runs every retained cell for every method with paired episode seeds.
pub fn run_sweep(spec: &SweepSpec, base: &dyn ChunkPolicy, head: Option<&CorrectionHead>) -> Result<SweepReport> {
    if spec.rollouts == 0 {
        return Err(Error::InvalidArgument("rollouts must be at least 1".into()));
    }
    if spec.methods.contains(&Method::A2c2) && head.is_none() {
        return Err(Error::InvalidArgument("the a2c2 method needs a correction head".into()));
    }
    let mut schedules = Vec::new();
    let mut skipped = Vec::new();
    for &(d, e) in &spec.cells {
        match validate_schedule(spec.horizon, e, d) {
            Ok(s) => schedules.push(s),
            Err(v) => {
                log::warn!("skipping cell d={d} e={e}: {v}");
                skipped.push((d, e, v));
            }
        }
    }
    let jobs: Vec<(usize, Method, usize)> = (0..schedules.len())
        .flat_map(|c| spec.methods.iter().flat_map(move |&m| (0..spec.rollouts).map(move |i| (c, m, i))))
        .collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(c, m, i)| -> Result<(bool, f64, f64, u64)> {
            let s: Schedule = schedules[c];
            let h = if m == Method::A2c2 { head } else { None };
            let tr = run_episode(&spec.env, base, h, s, rollout_seed(spec.base_seed, i))?;
            let st = staleness_stats(&tr)?;
            Ok((tr.success, st.mean, tr.mean_delta_norm(), tr.exogenous_hash))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    let mut exogenous = Vec::new();
    let per_cell = spec.methods.len() * spec.rollouts;
    for (c, s) in schedules.iter().enumerate() {
        let block = &outcomes[c * per_cell..(c + 1) * per_cell];
        for (mi, &m) in spec.methods.iter().enumerate() {
            let rows = &block[mi * spec.rollouts..(mi + 1) * spec.rollouts];
            let successes = rows.iter().filter(|r| r.0).count();
            let n = rows.len() as f64;
            let staleness = rows.iter().map(|r| r.1).sum::<f64>() / n;
            let delta = rows.iter().map(|r| r.2).sum::<f64>() / n;
            cells.push(cell_result(m, s.delay, s.exec, successes, rows.len(), staleness, delta));
            exogenous.push(rows.iter().map(|r| r.3).collect());
        }
    }
    Ok(SweepReport { cells, skipped, exogenous })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    /// `rate(a) − rate(b)`.
    pub difference: f64,
    /// Newcombe hybrid-score 95% interval for the difference.
    pub ci_low: f64,
    pub ci_high: f64,
    /// The two Wilson intervals do not overlap.
    pub significant: bool,
}

pub fn compare(a: &CellResult, b: &CellResult) -> Result<Comparison> {
    if a.d != b.d || a.e != b.e || a.n != b.n {
        return Err(Error::InvalidArgument(format!(
            "cells differ: (d={}, e={}, n={}) vs (d={}, e={}, n={})",
            a.d, a.e, a.n, b.d, b.e, b.n
        )));
    }
    let (p1, p2) = (a.success_rate, b.success_rate);
    let (l1, u1) = wilson(a.successes, a.n, Z95);
    let (l2, u2) = wilson(b.successes, b.n, Z95);
    let diff = p1 - p2;
    let lo = diff - ((p1 - l1).powi(2) + (u2 - p2).powi(2)).sqrt();
    let hi = diff + ((u1 - p1).powi(2) + (p2 - l2).powi(2)).sqrt();
    Ok(Comparison {
        difference: diff,
        ci_low: lo,
        ci_high: hi,
        significant: l1 > u2 || l2 > u1,
    })
}

pub fn write_sweep_csv(cells: &[CellResult], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for c in cells {
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<CellResult>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyReport {
    /// Median seconds per base-policy chunk inference.
    pub base_seconds: f64,
    /// Median seconds per head residual prediction.
    pub head_seconds: f64,
}

impl LatencyReport {
    pub fn ratio(&self) -> f64 {
        self.base_seconds / self.head_seconds
    }
}

fn median_seconds(rounds: usize, iters: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut samples = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let start = Instant::now();
        for _ in 0..iters {
            f()?;
        }
        samples.push(start.elapsed().as_secs_f64() / iters as f64);
    }
    samples.sort_by(|a, b| a.total_cmp(b));
    Ok(samples[rounds / 2])
}

/// Single-observation wall time of `predict_chunk` vs `predict_residual`,
/// interleaved so both see the same machine state.
pub fn measure_latency(base: &dyn ChunkPolicy, head: &CorrectionHead, obs: &[f32], iters: usize) -> Result<LatencyReport> {
    let p = base.predict_chunk(obs)?;
    let a = p.chunk.action(0).to_vec();
    let rounds = 9;
    let mut base_s = Vec::new();
    let mut head_s = Vec::new();
    for _ in 0..3 {
        base_s.push(median_seconds(rounds, iters, || base.predict_chunk(obs).map(|_| ()))?);
        head_s.push(median_seconds(rounds, iters * 8, || {
            head.predict_residual(obs, &a, 1, &p.latent, &p.chunk.actions).map(|_| ())
        })?);
    }
    base_s.sort_by(|a, b| a.total_cmp(b));
    head_s.sort_by(|a, b| a.total_cmp(b));
    Ok(LatencyReport {
        base_seconds: base_s[1],
        head_seconds: head_s[1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::EnvKind;
    use crate::policies::{ExpertChunkPolicy, HeadArch};

    fn cell(successes: usize, n: usize) -> CellResult {
        cell_result(Method::Naive, 4, 4, successes, n, 0.0, 0.0)
    }

    #[test]
    fn wilson_reference_values() {
        // Closed-form evaluation for 480/512.
        let (lo, hi) = wilson(480, 512, Z95);
        let (p, n, z) = (480.0 / 512.0, 512.0, Z95);
        let c = (p + z * z / (2.0 * n)) / (1.0 + z * z / n);
        let h = z / (1.0 + z * z / n) * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
        assert!((lo - (c - h)).abs() < 1e-15 && (hi - (c + h)).abs() < 1e-15);
        assert!(lo < p && p < hi);
        assert_eq!(wilson(0, 10, Z95).0, 0.0);
        assert!(wilson(10, 10, Z95).1 > 1.0 - 1e-12);
    }

    #[test]
    fn comparison_examples() {
        let same = compare(&cell(300, 512), &cell(300, 512)).unwrap();
        assert_eq!(same.difference, 0.0);
        assert!(!same.significant);
        let c = compare(&cell(480, 512), &cell(260, 512)).unwrap();
        assert!((c.difference - 0.4297).abs() < 5e-5);
        assert!(c.significant);
        assert!(c.ci_low > 0.0 && c.ci_low < c.difference && c.difference < c.ci_high);
        assert!(compare(&cell(1, 512), &cell(1, 256)).is_err());
    }

    #[test]
    fn default_cells_cover_both_axes() {
        let cells = default_cells(8);
        assert_eq!(&cells[..5], &[(0, 1), (1, 1), (2, 2), (3, 3), (4, 4)]);
        for e in 1..8 {
            assert!(cells.contains(&(1, e)));
        }
        assert_eq!(cells.len(), 11);
        assert!(cells.iter().all(|&(d, e)| validate_schedule(8, e, d).is_ok()));
    }

    fn small_spec(env: EnvConfig, cells: Vec<(usize, usize)>) -> SweepSpec {
        SweepSpec {
            env,
            horizon: 8,
            cells,
            rollouts: 16,
            base_seed: 5,
            methods: vec![Method::Naive, Method::A2c2],
        }
    }

    #[test]
    fn zero_head_gives_identical_rates_and_paired_seeds() {
        let env = EnvConfig::pursuit();
        let p = ExpertChunkPolicy { env, horizon: 8 };
        let head = CorrectionHead::zeros(EnvKind::Pursuit, 8, 2, 8, &HeadArch::default()).unwrap();
        let r = run_sweep(&small_spec(env, vec![(0, 1), (2, 3), (3, 2)]), &p, Some(&head)).unwrap();
        assert_eq!(r.skipped.len(), 1);
        for (d, e) in [(0, 1), (2, 3)] {
            let a = r.cell(Method::Naive, d, e).unwrap();
            let b = r.cell(Method::A2c2, d, e).unwrap();
            assert_eq!(a.successes, b.successes);
            assert_eq!(a.success_rate, a.successes as f64 / a.n as f64);
        }
        // Same cell, different methods: identical environment randomness.
        assert_eq!(r.exogenous[0], r.exogenous[1]);
        assert_eq!(r.exogenous[2], r.exogenous[3]);
    }

    #[test]
    fn expert_sweep_meets_quality_bar() {
        let env = EnvConfig::holdzone();
        let p = ExpertChunkPolicy { env, horizon: 8 };
        let mut spec = small_spec(env, vec![(0, 1)]);
        spec.methods = vec![Method::Naive];
        spec.rollouts = 64;
        let r = run_sweep(&spec, &p, None).unwrap();
        assert!(r.cells[0].success_rate >= 0.95);
        spec.methods = vec![Method::A2c2];
        assert!(run_sweep(&spec, &p, None).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let cells = vec![
            cell_result(Method::Naive, 1, 3, 311, 512, 2.0000001, 0.0),
            cell_result(Method::A2c2, 4, 4, 77, 512, 5.5, 0.123456789),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&cells, &path).unwrap();
        assert_eq!(read_sweep_csv(&path).unwrap(), cells);
        let head = std::fs::read_to_string(&path).unwrap();
        assert!(head.starts_with("method,d,e,successes,n,success_rate,ci_low,ci_high,mean_staleness,mean_delta_norm\n"));
    }
}
