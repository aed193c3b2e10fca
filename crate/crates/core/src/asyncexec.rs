//! Asynchronous chunk execution with simulated inference delay.
//!
//! Timeline for a schedule `(H, e, d)`:
//!
//! * At `t = 0` a chunk is computed on `o_0` with the environment frozen, so
//!   steps `0..d+e−1` execute its indices `k = t`. Steps `t < d` are the
//!   bootstrap prefix.
//! * At every `t = j·e` (`j ≥ 1`) an inference is submitted on `o_t`. It
//!   completes and is adopted at `t + d`, after which indices `d..d+e−1` run.
//! * Adoption happens before submission within a step, so at most one
//!   inference is ever pending.
//!
//! Staleness is the executed index `k`; the step during which the action stays
//! in effect is reported separately as `k + 1`.

use std::fmt;
use std::path::Path;

use crate::envsim::{self, EnvConfig};
use crate::policies::{apply_correction, ChunkPolicy, CorrectionHead, Prediction};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Schedule {
    pub horizon: usize,
    pub exec: usize,
    pub delay: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    ZeroHorizon,
    /// `e = 0`: nothing would ever execute.
    EmptyExecution,
    /// `e < d`: the active chunk runs out of its `e` steps before the next
    /// one arrives, leaving steps with no action.
    WaitingGap { exec: usize, delay: usize },
    /// `e > H − d`: the chunk has no action left while the next inference is
    /// still running.
    ChunkExhausted { exec: usize, horizon: usize, delay: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::ZeroHorizon => write!(f, "horizon H must be at least 1"),
            Violation::EmptyExecution => write!(f, "execution horizon e must be at least 1"),
            Violation::WaitingGap { exec, delay } => write!(f, "e < d (waiting gap): e={exec}, d={delay}"),
            Violation::ChunkExhausted { exec, horizon, delay } => {
                write!(f, "e > H−d (chunk exhausted): e={exec}, H−d={}", horizon as i64 - delay as i64)
            }
        }
    }
}

/// Checks `max(d, 1) ≤ e ≤ H − d`, naming the first violated bound.
pub fn validate_schedule(horizon: usize, exec: usize, delay: usize) -> std::result::Result<Schedule, Violation> {
    if horizon == 0 {
        return Err(Violation::ZeroHorizon);
    }
    if exec == 0 {
        return Err(Violation::EmptyExecution);
    }
    if exec < delay {
        return Err(Violation::WaitingGap { exec, delay });
    }
    if exec + delay > horizon {
        return Err(Violation::ChunkExhausted { exec, horizon, delay });
    }
    Ok(Schedule { horizon, exec, delay })
}

impl Schedule {
    pub fn new(horizon: usize, exec: usize, delay: usize) -> Result<Self> {
        validate_schedule(horizon, exec, delay).map_err(|v| Error::Schedule(v.to_string()))
    }
}

/// `⌊δ / Δt⌋`. A tiny relative tolerance keeps exact multiples such as
/// `0.15 / 0.05` from flooring to the step below.
pub fn compute_delay(delta_seconds: f64, dt_seconds: f64) -> Result<usize> {
    if !(dt_seconds > 0.0) || !(delta_seconds >= 0.0) || !delta_seconds.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "need dt > 0 and delta ≥ 0, got dt={dt_seconds}, delta={delta_seconds}"
        )));
    }
    let ratio = delta_seconds / dt_seconds;
    Ok((ratio * (1.0 + 1e-12)).floor() as usize)
}

/// Active chunk plus at most one pending inference.
#[derive(Debug, Clone)]
pub struct ChunkBuffer {
    active: Prediction,
    pending: Option<(Prediction, usize)>,
}

impl ChunkBuffer {
    pub fn new(first: Prediction) -> Self {
        ChunkBuffer { active: first, pending: None }
    }

    pub fn active(&self) -> &Prediction {
        &self.active
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Registers an inference that completes at step `completes_at`.
    pub fn submit(&mut self, prediction: Prediction, completes_at: usize) -> Result<()> {
        if self.pending.is_some() {
            return Err(Error::Schedule("a second inference was submitted while one is pending".into()));
        }
        self.pending = Some((prediction, completes_at));
        Ok(())
    }

    /// Adopts the pending chunk if it has completed by step `t`.
    pub fn poll(&mut self, t: usize) -> bool {
        match &self.pending {
            Some((_, at)) if *at <= t => {
                let (p, _) = self.pending.take().expect("checked above");
                self.active = p;
                true
            }
            _ => false,
        }
    }

    /// Replaces the active chunk directly (used when chunks arrive from outside).
    pub fn adopt(&mut self, prediction: Prediction) {
        self.active = prediction;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub k: usize,
    /// Steps the action remains in effect past its observation, `k + 1`.
    pub staleness_in_effect: usize,
    pub bootstrap: bool,
    pub base: Vec<f32>,
    pub delta: Vec<f32>,
    pub executed: Vec<f32>,
    /// Hash of the environment state after this step.
    pub state_hash: u64,
    pub success_so_far: bool,
}

impl TraceStep {
    pub fn staleness(&self) -> usize {
        self.k
    }

    pub fn delta_norm(&self) -> f32 {
        self.delta.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub schedule: Schedule,
    pub corrected: bool,
    pub steps: Vec<TraceStep>,
    pub success: bool,
    /// Hash of every exogenous event (target turns, disturbances).
    pub exogenous_hash: u64,
}

impl EpisodeTrace {
    pub fn bit_eq(&self, other: &EpisodeTrace) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.success == other.success
            && self.exogenous_hash == other.exogenous_hash
            && self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.t == b.t
                    && a.k == b.k
                    && a.bootstrap == b.bootstrap
                    && a.state_hash == b.state_hash
                    && a.success_so_far == b.success_so_far
                    && bits(&a.base) == bits(&b.base)
                    && bits(&a.executed) == bits(&b.executed)
            })
    }

    pub fn mean_delta_norm(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.delta_norm() as f64).sum::<f64>() / self.steps.len() as f64
    }
}

/// One control step: read `o_t`, take element `k` of the active chunk,
/// optionally add the head's residual, and step the environment.
pub(crate) fn execute_step(
    state: &mut envsim::EnvState,
    head: Option<&CorrectionHead>,
    active: &Prediction,
    t: usize,
    delay: usize,
) -> Result<TraceStep> {
    let chunk = &active.chunk;
    let k = t
        .checked_sub(chunk.source_step)
        .filter(|&k| k < chunk.horizon)
        .ok_or_else(|| Error::Schedule(format!("no action for step {t} in the chunk from step {}", chunk.source_step)))?;
    let base = chunk.action(k).to_vec();
    let (delta, executed) = match head {
        Some(h) => {
            let obs = state.observation();
            let delta = h.predict_residual(&obs, &base, k, &active.latent, &chunk.actions)?;
            let exec = apply_correction(&base, &delta);
            (delta, exec)
        }
        None => (vec![0.0; base.len()], base.clone()),
    };
    state.step(&executed)?;
    Ok(TraceStep {
        t,
        k,
        staleness_in_effect: k + 1,
        bootstrap: t < delay,
        base,
        delta,
        executed,
        state_hash: state.state_hash(),
        success_so_far: state.success,
    })
}

fn check_dims(env: &EnvConfig, base: &dyn ChunkPolicy, head: Option<&CorrectionHead>, schedule: &Schedule) -> Result<()> {
    if base.obs_dim() != env.obs_dim() || base.act_dim() != env.act_dim() || base.horizon() != schedule.horizon {
        return Err(Error::shape(
            "run_episode",
            format!("obs {} act {} H {}", env.obs_dim(), env.act_dim(), schedule.horizon),
            format!("policy obs {} act {} H {}", base.obs_dim(), base.act_dim(), base.horizon()),
        ));
    }
    if let Some(h) = head {
        if h.obs_dim != env.obs_dim() || h.act_dim != env.act_dim() || h.horizon != schedule.horizon {
            return Err(Error::shape(
                "run_episode head",
                format!("obs {} act {} H {}", env.obs_dim(), env.act_dim(), schedule.horizon),
                format!("head obs {} act {} H {}", h.obs_dim, h.act_dim, h.horizon),
            ));
        }
        if h.latent_dim > 0 && h.latent_dim != base.latent_dim() {
            return Err(Error::shape("run_episode latent", h.latent_dim, base.latent_dim()));
        }
    }
    Ok(())
}

/// Simulates one episode under `schedule`, with or without the head.
pub fn run_episode(
    env: &EnvConfig,
    base: &dyn ChunkPolicy,
    head: Option<&CorrectionHead>,
    schedule: Schedule,
    seed: u64,
) -> Result<EpisodeTrace> {
    let schedule = Schedule::new(schedule.horizon, schedule.exec, schedule.delay)?;
    check_dims(env, base, head, &schedule)?;
    let (e, d) = (schedule.exec, schedule.delay);
    let mut state = envsim::reset(env, seed);
    let mut buffer = ChunkBuffer::new(base.predict_chunk(&state.observation())?);
    let mut steps = Vec::new();
    let mut t = 0usize;
    while !state.done {
        buffer.poll(t);
        if t > 0 && t % e == 0 {
            let mut p = base.predict_chunk(&state.observation())?;
            p.chunk.source_step = t;
            buffer.submit(p, t + d)?;
            buffer.poll(t);
        }
        steps.push(execute_step(&mut state, head, buffer.active(), t, d)?);
        t += 1;
    }
    Ok(EpisodeTrace {
        seed,
        schedule,
        corrected: head.is_some(),
        steps,
        success: state.success,
        exogenous_hash: state.exogenous_hash(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StalenessStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// Staleness over the steps after the bootstrap prefix (all steps if the
/// episode ended inside it).
pub fn staleness_stats(trace: &EpisodeTrace) -> Result<StalenessStats> {
    let steady: Vec<usize> = trace.steps.iter().filter(|s| !s.bootstrap).map(|s| s.k).collect();
    let ks = if steady.is_empty() {
        trace.steps.iter().map(|s| s.k).collect()
    } else {
        steady
    };
    if ks.is_empty() {
        return Err(Error::InvalidArgument("empty trace".into()));
    }
    Ok(StalenessStats {
        min: *ks.iter().min().unwrap(),
        max: *ks.iter().max().unwrap(),
        mean: ks.iter().sum::<usize>() as f64 / ks.len() as f64,
    })
}

/// One CSV row per step: `t, k, staleness, staleness_in_effect, bootstrap,
/// base_*, delta_*, exec_*, delta_norm, success_so_far, state_hash`.
pub fn write_trace_csv(trace: &EpisodeTrace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let ad = trace.steps.first().map_or(0, |s| s.base.len());
    let mut header: Vec<String> = ["t", "k", "staleness", "staleness_in_effect", "bootstrap"].iter().map(|s| s.to_string()).collect();
    for p in ["base", "delta", "exec"] {
        header.extend((0..ad).map(|i| format!("{p}_{i}")));
    }
    header.extend(["delta_norm", "success_so_far", "state_hash"].iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for s in &trace.steps {
        let mut row = vec![
            s.t.to_string(),
            s.k.to_string(),
            s.staleness().to_string(),
            s.staleness_in_effect.to_string(),
            (s.bootstrap as u8).to_string(),
        ];
        for v in [&s.base, &s.delta, &s.executed] {
            row.extend(v.iter().map(f32::to_string));
        }
        row.push(s.delta_norm().to_string());
        row.push((s.success_so_far as u8).to_string());
        row.push(format!("{:016x}", s.state_hash));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
