//! Deterministic toy tasks with scripted experts.
//!
//! * `pursuit`: a double-integrator agent in a square arena chases a target that
//!   moves at constant speed and re-draws its heading at geometric random
//!   intervals. Success is staying within the catch radius for `catch_steps`
//!   consecutive steps.
//! * `holdzone`: a scalar unstable plant `x' = αx + u·a + w` driven by an
//!   Ornstein–Uhlenbeck disturbance `w`. The episode fails as soon as
//!   `|x| > bound` and succeeds by surviving `episode_len` steps.
//!
//! All exogenous randomness (target turns, disturbance innovations) comes from
//! the per-episode stream, never from the actions, so two rollouts with the same
//! episode seed see the same exogenous events whatever the policy does.

use std::f32::consts::TAU;

use rand::Rng as _;

use crate::rng::{self, Fnv, Rng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvKind {
    Pursuit,
    HoldZone,
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Pursuit => "pursuit",
            EnvKind::HoldZone => "holdzone",
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::Pursuit => 8,
            EnvKind::HoldZone => 2,
        }
    }

    pub fn act_dim(self) -> usize {
        match self {
            EnvKind::Pursuit => 2,
            EnvKind::HoldZone => 1,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            EnvKind::Pursuit => 0,
            EnvKind::HoldZone => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EnvKind::Pursuit),
            1 => Some(EnvKind::HoldZone),
            _ => None,
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pursuit" => Ok(EnvKind::Pursuit),
            "holdzone" => Ok(EnvKind::HoldZone),
            other => Err(Error::InvalidArgument(format!(
                "unknown env '{other}' (expected pursuit or holdzone)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PursuitParams {
    pub accel_gain: f32,
    pub v_max: f32,
    pub target_speed: f32,
    pub catch_radius: f32,
    pub catch_steps: u32,
    /// Mean number of steps between target heading changes.
    pub turn_mean: f32,
    pub spawn_min: f32,
    pub spawn_max: f32,
    /// Arena is the square `[-half_width, half_width]²`.
    pub half_width: f32,
    /// Expert: position gain of the desired velocity.
    pub expert_kp: f32,
    /// Expert: velocity tracking time constant (seconds).
    pub expert_tau: f32,
}

impl Default for PursuitParams {
    fn default() -> Self {
        PursuitParams {
            accel_gain: 4.0,
            v_max: 1.5,
            target_speed: 1.0,
            catch_radius: 0.15,
            catch_steps: 5,
            turn_mean: 10.0,
            spawn_min: 1.0,
            spawn_max: 2.0,
            half_width: 4.0,
            expert_kp: 3.0,
            expert_tau: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldZoneParams {
    pub alpha: f32,
    pub control_gain: f32,
    /// Stationary standard deviation of the disturbance.
    pub dist_sigma: f32,
    /// Disturbance correlation time (seconds).
    pub dist_tau: f32,
    pub x0_max: f32,
    pub bound: f32,
    /// Expert proportional gain.
    pub expert_kp: f32,
}

impl Default for HoldZoneParams {
    fn default() -> Self {
        HoldZoneParams {
            alpha: 0.6,
            control_gain: 10.0,
            dist_sigma: 2.0,
            dist_tau: 0.2,
            x0_max: 0.1,
            bound: 1.0,
            expert_kp: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub episode_len: u32,
    /// Seconds per control step.
    pub dt: f32,
    pub pursuit: PursuitParams,
    pub holdzone: HoldZoneParams,
    pub seed: u64,
}

impl EnvConfig {
    pub fn new(kind: EnvKind) -> Self {
        EnvConfig {
            kind,
            episode_len: 200,
            dt: 0.05,
            pursuit: PursuitParams::default(),
            holdzone: HoldZoneParams::default(),
            seed: 0,
        }
    }

    pub fn pursuit() -> Self {
        Self::new(EnvKind::Pursuit)
    }

    pub fn holdzone() -> Self {
        Self::new(EnvKind::HoldZone)
    }

    pub fn obs_dim(&self) -> usize {
        self.kind.obs_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.kind.act_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.episode_len == 0 {
            return Err(Error::InvalidArgument("episode_len must be >= 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be > 0, got {}", self.dt)));
        }
        let p = &self.pursuit;
        if !(p.spawn_min >= 0.0 && p.spawn_min <= p.spawn_max && p.spawn_max < p.half_width) {
            return Err(Error::InvalidArgument("spawn annulus must lie inside the arena".into()));
        }
        if p.turn_mean < 1.0 || p.v_max <= 0.0 || p.catch_steps == 0 {
            return Err(Error::InvalidArgument("invalid pursuit parameters".into()));
        }
        let h = &self.holdzone;
        if h.bound <= 0.0 || h.dist_tau <= 0.0 || h.dist_sigma < 0.0 || h.x0_max >= h.bound {
            return Err(Error::InvalidArgument("invalid holdzone parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PursuitState {
    pub pos: [f32; 2],
    pub vel: [f32; 2],
    pub target_pos: [f32; 2],
    pub target_vel: [f32; 2],
    /// Steps until the target re-draws its heading.
    pub turn_countdown: u32,
    /// Consecutive steps spent inside the catch radius.
    pub catch_run: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoldZoneState {
    pub x: f32,
    /// Current disturbance value.
    pub w: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Pursuit(PursuitState),
    HoldZone(HoldZoneState),
}

/// Complete simulator state. A value: clone it to branch an episode.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub config: EnvConfig,
    pub body: Body,
    pub step: u32,
    pub done: bool,
    pub success: bool,
    /// When set, exogenous processes follow their expectation (no turns, no
    /// innovations). Used for model-based expert chunks.
    pub nominal: bool,
    rng: Rng,
    exo: Fnv,
}

/// Result of one [`EnvState::step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub done: bool,
    pub success: bool,
}

fn geometric(rng: &mut Rng, mean: f32) -> u32 {
    if mean <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean as f64;
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    ((u.ln() / (1.0 - p).ln()).ceil() as u32).max(1)
}

fn normal(rng: &mut Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

fn clamp_unit(v: f32) -> f32 {
    v.clamp(-1.0, 1.0)
}

/// Initial state for `(config, episode_seed)`.
pub fn reset(config: &EnvConfig, episode_seed: u64) -> EnvState {
    let mut rng = rng::stream(rng::mix(&[config.seed, episode_seed]), Stream::EnvEpisode);
    let mut exo = Fnv::default();
    let body = match config.kind {
        EnvKind::Pursuit => {
            let p = &config.pursuit;
            let r = rng.gen_range(p.spawn_min..=p.spawn_max);
            let ang: f32 = rng.gen_range(0.0..TAU);
            let heading: f32 = rng.gen_range(0.0..TAU);
            let countdown = geometric(&mut rng, p.turn_mean);
            let s = PursuitState {
                pos: [0.0, 0.0],
                vel: [0.0, 0.0],
                target_pos: [r * ang.cos(), r * ang.sin()],
                target_vel: [p.target_speed * heading.cos(), p.target_speed * heading.sin()],
                turn_countdown: countdown,
                catch_run: 0,
            };
            exo.floats(&s.target_pos);
            exo.floats(&s.target_vel);
            Body::Pursuit(s)
        }
        EnvKind::HoldZone => {
            let h = &config.holdzone;
            let x = if h.x0_max > 0.0 { rng.gen_range(-h.x0_max..=h.x0_max) } else { 0.0 };
            let w = h.dist_sigma * normal(&mut rng);
            exo.floats(&[x, w]);
            Body::HoldZone(HoldZoneState { x, w })
        }
    };
    EnvState {
        config: *config,
        body,
        step: 0,
        done: false,
        success: false,
        nominal: false,
        rng,
        exo,
    }
}

impl EnvState {
    /// Flattened observation: pursuit `[pos, vel, target_pos − pos, target_vel]`,
    /// holdzone `[x, w]`.
    pub fn observation(&self) -> Vec<f32> {
        match &self.body {
            Body::Pursuit(s) => vec![
                s.pos[0],
                s.pos[1],
                s.vel[0],
                s.vel[1],
                s.target_pos[0] - s.pos[0],
                s.target_pos[1] - s.pos[1],
                s.target_vel[0],
                s.target_vel[1],
            ],
            Body::HoldZone(s) => vec![s.x, s.w],
        }
    }

    /// Rebuilds a nominal (no exogenous randomness) state from an observation.
    pub fn from_observation(config: &EnvConfig, obs: &[f32]) -> Result<EnvState> {
        if obs.len() != config.obs_dim() {
            return Err(Error::shape("EnvState::from_observation", config.obs_dim(), obs.len()));
        }
        let body = match config.kind {
            EnvKind::Pursuit => Body::Pursuit(PursuitState {
                pos: [obs[0], obs[1]],
                vel: [obs[2], obs[3]],
                target_pos: [obs[4] + obs[0], obs[5] + obs[1]],
                target_vel: [obs[6], obs[7]],
                turn_countdown: u32::MAX,
                catch_run: 0,
            }),
            EnvKind::HoldZone => Body::HoldZone(HoldZoneState { x: obs[0], w: obs[1] }),
        };
        Ok(EnvState {
            config: *config,
            body,
            step: 0,
            done: false,
            success: false,
            nominal: true,
            rng: rng::stream(0, Stream::EnvEpisode),
            exo: Fnv::default(),
        })
    }

    /// Fingerprint of every exogenous draw so far.
    pub fn exogenous_hash(&self) -> u64 {
        self.exo.finish()
    }

    /// Fingerprint of the observable state.
    pub fn state_hash(&self) -> u64 {
        let mut h = Fnv::default();
        h.word(self.step);
        h.floats(&self.observation());
        h.word(self.done as u32 | (self.success as u32) << 1);
        h.finish()
    }

    /// Advances one control step. Action coordinates are clamped to [-1, 1].
    pub fn step(&mut self, action: &[f32]) -> Result<Transition> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let cfg = self.config;
        if action.len() != cfg.act_dim() {
            return Err(Error::shape("EnvState::step", cfg.act_dim(), action.len()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("action"));
        }
        let dt = cfg.dt;
        let mut failed = false;
        match &mut self.body {
            Body::Pursuit(s) => {
                let p = &cfg.pursuit;
                let a = [clamp_unit(action[0]), clamp_unit(action[1])];
                for i in 0..2 {
                    s.vel[i] += a[i] * dt * p.accel_gain;
                }
                let speed = s.vel[0].hypot(s.vel[1]);
                if speed > p.v_max {
                    let k = p.v_max / speed;
                    s.vel = [s.vel[0] * k, s.vel[1] * k];
                }
                for i in 0..2 {
                    s.pos[i] += s.vel[i] * dt;
                    if s.pos[i].abs() > p.half_width {
                        s.pos[i] = s.pos[i].clamp(-p.half_width, p.half_width);
                        s.vel[i] = 0.0;
                    }
                }

                if !self.nominal {
                    s.turn_countdown = s.turn_countdown.saturating_sub(1);
                    if s.turn_countdown == 0 {
                        let heading: f32 = self.rng.gen_range(0.0..TAU);
                        s.target_vel = [p.target_speed * heading.cos(), p.target_speed * heading.sin()];
                        s.turn_countdown = geometric(&mut self.rng, p.turn_mean);
                        self.exo.floats(&s.target_vel);
                    }
                }
                for i in 0..2 {
                    s.target_pos[i] += s.target_vel[i] * dt;
                    if s.target_pos[i].abs() > p.half_width {
                        let wall = p.half_width.copysign(s.target_pos[i]);
                        s.target_pos[i] = 2.0 * wall - s.target_pos[i];
                        s.target_vel[i] = -s.target_vel[i];
                    }
                }

                let d = (s.target_pos[0] - s.pos[0]).hypot(s.target_pos[1] - s.pos[1]);
                if d < p.catch_radius {
                    s.catch_run += 1;
                } else {
                    s.catch_run = 0;
                }
                if s.catch_run >= p.catch_steps {
                    self.success = true;
                }
            }
            Body::HoldZone(s) => {
                let h = &cfg.holdzone;
                let a = clamp_unit(action[0]);
                s.x += dt * (h.alpha * s.x + h.control_gain * a + s.w);
                let rho = (-dt / h.dist_tau).exp();
                s.w *= rho;
                if !self.nominal {
                    let xi = normal(&mut self.rng);
                    s.w += h.dist_sigma * (1.0 - rho * rho).sqrt() * xi;
                    self.exo.word(s.w.to_bits());
                }
                if s.x.abs() > h.bound {
                    failed = true;
                }
            }
        }
        self.step += 1;
        if self.config.kind == EnvKind::HoldZone && !failed && self.step >= cfg.episode_len {
            self.success = true;
        }
        self.done = self.success || failed || self.step >= cfg.episode_len;
        Ok(Transition {
            done: self.done,
            success: self.success,
        })
    }
}

/// Value-style step: returns the successor state and its flags.
pub fn step(state: &EnvState, action: &[f32]) -> Result<(EnvState, bool, bool)> {
    let mut next = state.clone();
    let t = next.step(action)?;
    Ok((next, t.done, t.success))
}

/// Scripted expert. Pursuit: lead pursuit toward `target_vel + kp·(target − pos)`
/// with first-order velocity tracking. Holdzone: proportional stabilizer.
pub fn expert_action(state: &EnvState) -> Vec<f32> {
    let cfg = &state.config;
    match &state.body {
        Body::Pursuit(s) => {
            let p = &cfg.pursuit;
            let mut want = [
                s.target_vel[0] + p.expert_kp * (s.target_pos[0] - s.pos[0]),
                s.target_vel[1] + p.expert_kp * (s.target_pos[1] - s.pos[1]),
            ];
            let n = want[0].hypot(want[1]);
            if n > p.v_max {
                want = [want[0] * p.v_max / n, want[1] * p.v_max / n];
            }
            let k = 1.0 / (p.expert_tau * p.accel_gain);
            vec![
                clamp_unit(k * (want[0] - s.vel[0])),
                clamp_unit(k * (want[1] - s.vel[1])),
            ]
        }
        Body::HoldZone(s) => vec![clamp_unit(-cfg.holdzone.expert_kp * s.x)],
    }
}

/// Expert chunk from an observation alone: the expert rolled forward `horizon`
/// steps on the nominal model (target keeps its heading, disturbance decays to
/// its mean). Flattened `horizon × act_dim`.
pub fn expert_chunk(config: &EnvConfig, obs: &[f32], horizon: usize) -> Result<Vec<f32>> {
    let mut s = EnvState::from_observation(config, obs)?;
    s.config.episode_len = u32::MAX;
    let mut out = Vec::with_capacity(horizon * config.act_dim());
    for _ in 0..horizon {
        let a = expert_action(&s);
        out.extend_from_slice(&a);
        if !s.done {
            s.step(&a)?;
        }
    }
    Ok(out)
}

/// Runs the expert closed-loop for one episode and returns the success flag.
pub fn expert_rollout(config: &EnvConfig, episode_seed: u64) -> bool {
    let mut s = reset(config, episode_seed);
    while !s.done {
        let a = expert_action(&s);
        s.step(&a).expect("expert actions are valid");
    }
    s.success
}
