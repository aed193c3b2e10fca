//! Expert demonstration datasets and the augmented correction dataset.
//!
//! Both kinds share one little-endian file layout:
//!
//! ```text
//! magic        8   "A2C2DS\0\0"
//! version      u16 1
//! kind         u8  0 = base, 1 = correction
//! task         u8  environment code
//! obs_dim      u32
//! act_dim      u32
//! horizon      u32 0 for base datasets
//! latent_dim   u32
//! chunk_dim    u32 full-chunk width stored per record, 0 if absent
//! episodes     u32
//! records      u64 transitions (base) or correction records
//! obs_mean     f32 × obs_dim
//! obs_std      f32 × obs_dim
//! act_mean     f32 × act_dim
//! act_std      f32 × act_dim
//! ```
//!
//! Base payload, per episode: `seed u64, len u32`, then `len` rows of
//! `obs (obs_dim) ‖ action (act_dim)`.
//!
//! Correction payload, per record: `episode u32, t u32, k u32`, then
//! `obs ‖ target ‖ base_action ‖ tau (2) ‖ latent ‖ chunk` as f32.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::bytes::{Reader, Writer};
use crate::envsim::{self, EnvConfig, EnvKind};
use crate::numkit::{sin_embed, Tensor};
use crate::policies::ChunkPolicy;
use crate::rng::{self, Stream};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"A2C2DS\0\0";
pub const DATASET_VERSION: u16 = 1;
const HEADER_FIXED: usize = 8 + 2 + 1 + 1 + 4 * 6 + 8;
const CTX: &str = "dataset file";

/// Standard deviations below this are replaced by 1 so constant dimensions
/// pass through unscaled.
pub const STD_FLOOR: f32 = 1e-6;

/// Per-dimension affine normalization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits mean and population std over `rows` (flat, `dim` wide), in f64.
    pub fn fit(rows: &[f32], dim: usize) -> Self {
        if dim == 0 || rows.is_empty() {
            return Normalizer::identity(dim);
        }
        let n = (rows.len() / dim) as f64;
        let mut sum = vec![0f64; dim];
        for r in rows.chunks_exact(dim) {
            for (s, &v) in sum.iter_mut().zip(r) {
                *s += v as f64;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut var = vec![0f64; dim];
        for r in rows.chunks_exact(dim) {
            for ((q, &v), m) in var.iter_mut().zip(r).zip(&mean) {
                let dv = v as f64 - m;
                *q += dv * dv;
            }
        }
        let std = var
            .iter()
            .map(|q| {
                let s = (q / n).sqrt() as f32;
                if s.is_finite() && s >= STD_FLOOR {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        }
    }

    /// Zero mean and per-dimension root-mean-square scale, so zero maps to zero.
    pub fn fit_scale(rows: &[f32], dim: usize) -> Self {
        let mut n = Normalizer::identity(dim);
        if dim == 0 || rows.is_empty() {
            return n;
        }
        let count = (rows.len() / dim) as f64;
        let mut sq = vec![0f64; dim];
        for r in rows.chunks_exact(dim) {
            for (q, &v) in sq.iter_mut().zip(r) {
                *q += (v as f64) * (v as f64);
            }
        }
        for (s, q) in n.std.iter_mut().zip(sq) {
            let rms = (q / count).sqrt() as f32;
            if rms.is_finite() && rms >= STD_FLOOR {
                *s = rms;
            }
        }
        n
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_into(&self, x: &[f32], out: &mut [f32]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }

    pub fn normalize(&self, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; x.len()];
        self.normalize_into(x, &mut out);
        out
    }

    pub fn denormalize_into(&self, z: &[f32], out: &mut [f32]) {
        for i in 0..z.len() {
            out[i] = z[i] * self.std[i] + self.mean[i];
        }
    }

    pub fn denormalize(&self, z: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; z.len()];
        self.denormalize_into(z, &mut out);
        out
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.f32s(&self.mean);
        w.f32s(&self.std);
    }

    pub(crate) fn read(r: &mut Reader, dim: usize) -> Result<Self> {
        let mean = r.f32s(dim)?;
        let std = r.f32s(dim)?;
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::format(CTX, "normalization constants must be finite with positive std"));
        }
        Ok(Normalizer { mean, std })
    }
}

/// One demonstration: observations and expert actions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub obs: Vec<f32>,
    pub actions: Vec<f32>,
}

impl Episode {
    pub fn len(&self, obs_dim: usize) -> usize {
        self.obs.len() / obs_dim
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Expert demonstrations plus normalization constants fitted over them.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDataset {
    pub task: EnvKind,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub episodes: Vec<Episode>,
    pub obs_norm: Normalizer,
    pub act_norm: Normalizer,
}

impl BaseDataset {
    /// Validates shapes and fits the normalizers.
    pub fn new(task: EnvKind, obs_dim: usize, act_dim: usize, episodes: Vec<Episode>) -> Result<Self> {
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::InvalidArgument("dataset dims must be positive".into()));
        }
        for (i, ep) in episodes.iter().enumerate() {
            let t = ep.obs.len() / obs_dim;
            if t == 0 || ep.obs.len() != t * obs_dim || ep.actions.len() != t * act_dim {
                return Err(Error::shape(
                    "episode",
                    format!("T ≥ 1 rows of {obs_dim} obs and {act_dim} action values"),
                    format!("episode {i} with {} obs and {} action values", ep.obs.len(), ep.actions.len()),
                ));
            }
        }
        let all_obs: Vec<f32> = episodes.iter().flat_map(|e| e.obs.iter().copied()).collect();
        let all_act: Vec<f32> = episodes.iter().flat_map(|e| e.actions.iter().copied()).collect();
        Ok(BaseDataset {
            task,
            obs_dim,
            act_dim,
            obs_norm: Normalizer::fit(&all_obs, obs_dim),
            act_norm: Normalizer::fit(&all_act, act_dim),
            episodes,
        })
    }

    pub fn transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.len(self.obs_dim)).sum()
    }
}

/// One augmented sample: target action `a_t` paired with element `k` of the
/// chunk inferred on `o_{t−k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionRecord {
    pub episode: u32,
    pub t: u32,
    pub k: u32,
    pub obs: Vec<f32>,
    pub target: Vec<f32>,
    pub base_action: Vec<f32>,
    pub tau: [f32; 2],
    pub latent: Vec<f32>,
    pub chunk: Vec<f32>,
}

/// `a_t − â`, elementwise.
pub fn residual_target(record: &CorrectionRecord) -> Vec<f32> {
    record.target.iter().zip(&record.base_action).map(|(a, b)| a - b).collect()
}

/// Correction records stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionDataset {
    pub task: EnvKind,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub horizon: usize,
    pub latent_dim: usize,
    pub chunk_dim: usize,
    pub episode_count: usize,
    pub obs_norm: Normalizer,
    pub act_norm: Normalizer,
    pub episode: Vec<u32>,
    pub t: Vec<u32>,
    pub k: Vec<u32>,
    pub obs: Vec<f32>,
    pub target: Vec<f32>,
    pub base_action: Vec<f32>,
    pub tau: Vec<f32>,
    pub latent: Vec<f32>,
    pub chunk: Vec<f32>,
}

impl CorrectionDataset {
    fn empty_like(base: &BaseDataset, horizon: usize, latent_dim: usize, chunk_dim: usize) -> Self {
        CorrectionDataset {
            task: base.task,
            obs_dim: base.obs_dim,
            act_dim: base.act_dim,
            horizon,
            latent_dim,
            chunk_dim,
            episode_count: base.episodes.len(),
            obs_norm: base.obs_norm.clone(),
            act_norm: base.act_norm.clone(),
            episode: Vec::new(),
            t: Vec::new(),
            k: Vec::new(),
            obs: Vec::new(),
            target: Vec::new(),
            base_action: Vec::new(),
            tau: Vec::new(),
            latent: Vec::new(),
            chunk: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn record(&self, i: usize) -> CorrectionRecord {
        let (od, ad, ld, cd) = (self.obs_dim, self.act_dim, self.latent_dim, self.chunk_dim);
        CorrectionRecord {
            episode: self.episode[i],
            t: self.t[i],
            k: self.k[i],
            obs: self.obs[i * od..(i + 1) * od].to_vec(),
            target: self.target[i * ad..(i + 1) * ad].to_vec(),
            base_action: self.base_action[i * ad..(i + 1) * ad].to_vec(),
            tau: [self.tau[2 * i], self.tau[2 * i + 1]],
            latent: self.latent[i * ld..(i + 1) * ld].to_vec(),
            chunk: self.chunk[i * cd..(i + 1) * cd].to_vec(),
        }
    }

    /// Residual targets for every record, row-major `len × act_dim`.
    pub fn residuals(&self) -> Vec<f32> {
        self.target.iter().zip(&self.base_action).map(|(a, b)| a - b).collect()
    }

    fn push(&mut self, r: &CorrectionRecord) {
        self.episode.push(r.episode);
        self.t.push(r.t);
        self.k.push(r.k);
        self.obs.extend_from_slice(&r.obs);
        self.target.extend_from_slice(&r.target);
        self.base_action.extend_from_slice(&r.base_action);
        self.tau.extend_from_slice(&r.tau);
        self.latent.extend_from_slice(&r.latent);
        self.chunk.extend_from_slice(&r.chunk);
    }

    fn append(&mut self, mut other: CorrectionDataset) {
        self.episode.append(&mut other.episode);
        self.t.append(&mut other.t);
        self.k.append(&mut other.k);
        self.obs.append(&mut other.obs);
        self.target.append(&mut other.target);
        self.base_action.append(&mut other.base_action);
        self.tau.append(&mut other.tau);
        self.latent.append(&mut other.latent);
        self.chunk.append(&mut other.chunk);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Base(BaseDataset),
    Correction(CorrectionDataset),
}

impl Dataset {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Dataset::Base(_) => "base",
            Dataset::Correction(_) => "correction",
        }
    }
}

/// Number of correction records an episode of length `t_len` yields with
/// horizon `h`: `Σ_t (min(t, h−1) + 1)`.
pub fn dcor_record_count(t_len: usize, h: usize) -> usize {
    if h == 0 {
        return 0;
    }
    if t_len >= h {
        h * t_len - h * (h - 1) / 2
    } else {
        t_len * (t_len + 1) / 2
    }
}

/// Rolls out the scripted expert for `n_episodes` seeded episodes.
pub fn record_expert_dataset(env: &EnvConfig, n_episodes: usize, seed: u64) -> Result<BaseDataset> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be at least 1".into()));
    }
    env.validate()?;
    let mut r = rng::stream(seed, Stream::DatasetEpisodes);
    let seeds: Vec<u64> = (0..n_episodes).map(|_| r.gen()).collect();
    let episodes = seeds
        .par_iter()
        .map(|&s| expert_episode(env, s))
        .collect::<Result<Vec<_>>>()?;
    BaseDataset::new(env.kind, env.obs_dim(), env.act_dim(), episodes)
}

/// One recorded expert rollout.
pub fn expert_episode(env: &EnvConfig, episode_seed: u64) -> Result<Episode> {
    let mut s = envsim::reset(env, episode_seed);
    let mut obs = Vec::new();
    let mut actions = Vec::new();
    while !s.done {
        let a = envsim::expert_action(&s);
        obs.extend(s.observation());
        actions.extend_from_slice(&a);
        s.step(&a)?;
    }
    Ok(Episode {
        seed: episode_seed,
        obs,
        actions,
    })
}

/// Anything that can produce one chunk per observation of an episode.
pub trait ChunkSource: Sync {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn latent_dim(&self) -> usize;
    /// Chunks (`T × horizon·act_dim`) and latents (`T × latent_dim`) for every
    /// step of `episode`.
    fn episode_chunks(&self, episode: &Episode) -> Result<(Vec<f32>, Vec<f32>)>;
}

impl<P: ChunkPolicy> ChunkSource for P {
    fn obs_dim(&self) -> usize {
        ChunkPolicy::obs_dim(self)
    }
    fn act_dim(&self) -> usize {
        ChunkPolicy::act_dim(self)
    }
    fn horizon(&self) -> usize {
        ChunkPolicy::horizon(self)
    }
    fn latent_dim(&self) -> usize {
        ChunkPolicy::latent_dim(self)
    }
    fn episode_chunks(&self, episode: &Episode) -> Result<(Vec<f32>, Vec<f32>)> {
        let od = ChunkPolicy::obs_dim(self);
        let rows = episode.obs.len() / od;
        let obs = Tensor::from_vec(rows, od, episode.obs.clone())?;
        let (chunks, latent) = self.predict_batch(&obs)?;
        Ok((chunks.into_vec(), latent.into_vec()))
    }
}

/// Replays the episode's own future expert actions as the chunk, holding the
/// last action past the end, optionally with an added per-coordinate offset.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub horizon: usize,
    pub offset: Vec<f32>,
}

impl ReplaySource {
    pub fn new(obs_dim: usize, act_dim: usize, horizon: usize) -> Self {
        ReplaySource {
            obs_dim,
            act_dim,
            horizon,
            offset: vec![0.0; act_dim],
        }
    }

    pub fn with_offset(mut self, offset: Vec<f32>) -> Self {
        self.offset = offset;
        self
    }
}

impl ChunkSource for ReplaySource {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    fn act_dim(&self) -> usize {
        self.act_dim
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn latent_dim(&self) -> usize {
        0
    }
    fn episode_chunks(&self, episode: &Episode) -> Result<(Vec<f32>, Vec<f32>)> {
        let ad = self.act_dim;
        let t_len = episode.actions.len() / ad;
        let mut out = Vec::with_capacity(t_len * self.horizon * ad);
        for s in 0..t_len {
            for j in 0..self.horizon {
                let src = (s + j).min(t_len - 1);
                for c in 0..ad {
                    out.push(episode.actions[src * ad + c] + self.offset[c]);
                }
            }
        }
        Ok((out, Vec::new()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentOptions {
    /// Store the chunk's latent vector with every record.
    pub capture_latent: bool,
    /// Store the whole chunk with every record.
    pub capture_chunk: bool,
}

/// Builds the correction dataset: for every step `t` and every
/// `k ≤ min(t, H−1)`, pairs `a_t` with element `k` of the chunk inferred on
/// `o_{t−k}`. Each chunk is computed once per source step.
pub fn build_dcor(
    dbase: &BaseDataset,
    source: &dyn ChunkSource,
    horizon: usize,
    options: AugmentOptions,
) -> Result<CorrectionDataset> {
    if horizon == 0 || source.horizon() != horizon {
        return Err(Error::shape("build_dcor", format!("horizon {horizon}"), format!("source horizon {}", source.horizon())));
    }
    if source.obs_dim() != dbase.obs_dim || source.act_dim() != dbase.act_dim {
        return Err(Error::shape(
            "build_dcor",
            format!("dataset obs {} / act {}", dbase.obs_dim, dbase.act_dim),
            format!("policy obs {} / act {}", source.obs_dim(), source.act_dim()),
        ));
    }
    let latent_dim = if options.capture_latent {
        if source.latent_dim() == 0 {
            return Err(Error::InvalidArgument("latent capture requested but the policy exposes no latent".into()));
        }
        source.latent_dim()
    } else {
        0
    };
    let (od, ad) = (dbase.obs_dim, dbase.act_dim);
    let chunk_width = horizon * ad;
    let chunk_dim = if options.capture_chunk { chunk_width } else { 0 };
    let taus: Vec<[f32; 2]> = (0..horizon).map(|k| sin_embed(k, horizon)).collect::<Result<_>>()?;

    let parts = dbase
        .episodes
        .par_iter()
        .enumerate()
        .map(|(ei, ep)| -> Result<CorrectionDataset> {
            let t_len = ep.len(od);
            let (chunks, latents) = source.episode_chunks(ep)?;
            if chunks.len() != t_len * chunk_width || latents.len() != t_len * source.latent_dim() {
                return Err(Error::shape(
                    "build_dcor chunks",
                    format!("{} chunk values", t_len * chunk_width),
                    chunks.len(),
                ));
            }
            let sl = source.latent_dim();
            let mut part = CorrectionDataset::empty_like(dbase, horizon, latent_dim, chunk_dim);
            for t in 0..t_len {
                for k in 0..=t.min(horizon - 1) {
                    let s = t - k;
                    let chunk = &chunks[s * chunk_width..(s + 1) * chunk_width];
                    part.push(&CorrectionRecord {
                        episode: ei as u32,
                        t: t as u32,
                        k: k as u32,
                        obs: ep.obs[t * od..(t + 1) * od].to_vec(),
                        target: ep.actions[t * ad..(t + 1) * ad].to_vec(),
                        base_action: chunk[k * ad..(k + 1) * ad].to_vec(),
                        tau: taus[k],
                        latent: if latent_dim > 0 { latents[s * sl..(s + 1) * sl].to_vec() } else { Vec::new() },
                        chunk: if chunk_dim > 0 { chunk.to_vec() } else { Vec::new() },
                    });
                }
            }
            Ok(part)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = CorrectionDataset::empty_like(dbase, horizon, latent_dim, chunk_dim);
    for p in parts {
        out.append(p);
    }
    Ok(out)
}

fn write_header(
    w: &mut Writer,
    kind: u8,
    task: EnvKind,
    dims: [usize; 6],
    records: u64,
    obs_norm: &Normalizer,
    act_norm: &Normalizer,
) {
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.u8(kind);
    w.u8(task.code());
    for d in dims {
        w.u32(d as u32);
    }
    w.u64(records);
    obs_norm.write(w);
    act_norm.write(w);
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new();
    match ds {
        Dataset::Base(b) => {
            write_header(
                &mut w,
                0,
                b.task,
                [b.obs_dim, b.act_dim, 0, 0, 0, b.episodes.len()],
                b.transitions() as u64,
                &b.obs_norm,
                &b.act_norm,
            );
            for ep in &b.episodes {
                let t_len = ep.len(b.obs_dim);
                w.u64(ep.seed);
                w.u32(t_len as u32);
                for t in 0..t_len {
                    w.f32s(&ep.obs[t * b.obs_dim..(t + 1) * b.obs_dim]);
                    w.f32s(&ep.actions[t * b.act_dim..(t + 1) * b.act_dim]);
                }
            }
        }
        Dataset::Correction(c) => {
            write_header(
                &mut w,
                1,
                c.task,
                [c.obs_dim, c.act_dim, c.horizon, c.latent_dim, c.chunk_dim, c.episode_count],
                c.len() as u64,
                &c.obs_norm,
                &c.act_norm,
            );
            for i in 0..c.len() {
                let r = c.record(i);
                w.u32(r.episode);
                w.u32(r.t);
                w.u32(r.k);
                w.f32s(&r.obs);
                w.f32s(&r.target);
                w.f32s(&r.base_action);
                w.f32s(&r.tau);
                w.f32s(&r.latent);
                w.f32s(&r.chunk);
            }
        }
    }
    w.buf
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

fn check_total(expected: u64, actual: usize) -> Result<()> {
    if expected > actual as u64 {
        return Err(Error::Truncated {
            context: CTX,
            expected,
            actual: actual as u64,
        });
    }
    if expected < actual as u64 {
        return Err(Error::format(CTX, format!("{} trailing bytes after the last record", actual as u64 - expected)));
    }
    Ok(())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes, CTX);
    if r.take(8)? != DATASET_MAGIC {
        return Err(Error::format(CTX, "bad magic"));
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::format(CTX, format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    let task_code = r.u8()?;
    let task = EnvKind::from_code(task_code).ok_or_else(|| Error::format(CTX, format!("unknown task code {task_code}")))?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let [obs_dim, act_dim, horizon, latent_dim, chunk_dim, episode_count] = dims;
    let records = r.u64()?;
    if obs_dim == 0 || act_dim == 0 {
        return Err(Error::format(CTX, "obs_dim and act_dim must be positive"));
    }
    let obs_norm = Normalizer::read(&mut r, obs_dim)?;
    let act_norm = Normalizer::read(&mut r, act_dim)?;
    debug_assert_eq!(r.position(), HEADER_FIXED + 8 * (obs_dim + act_dim));
    match kind {
        0 => {
            let row = 4 * (obs_dim + act_dim) as u64;
            let expected = r.position() as u64 + 12 * episode_count as u64 + row * records;
            check_total(expected, bytes.len())?;
            let mut episodes = Vec::with_capacity(episode_count);
            let mut seen = 0u64;
            for _ in 0..episode_count {
                let seed = r.u64()?;
                let t_len = r.u32()? as usize;
                seen += t_len as u64;
                if t_len == 0 || seen > records {
                    return Err(Error::format(CTX, format!("episode lengths disagree with the header count {records}")));
                }
                let mut obs = Vec::with_capacity(t_len * obs_dim);
                let mut actions = Vec::with_capacity(t_len * act_dim);
                for _ in 0..t_len {
                    r.f32s_into(obs_dim, &mut obs)?;
                    r.f32s_into(act_dim, &mut actions)?;
                }
                episodes.push(Episode { seed, obs, actions });
            }
            if seen != records {
                return Err(Error::format(CTX, format!("episodes hold {seen} transitions, header says {records}")));
            }
            Ok(Dataset::Base(BaseDataset {
                task,
                obs_dim,
                act_dim,
                episodes,
                obs_norm,
                act_norm,
            }))
        }
        1 => {
            if horizon == 0 {
                return Err(Error::format(CTX, "correction dataset with zero horizon"));
            }
            let row = 12 + 4 * (obs_dim + 2 * act_dim + 2 + latent_dim + chunk_dim) as u64;
            let expected = r.position() as u64 + row * records;
            check_total(expected, bytes.len())?;
            let empty = BaseDataset {
                task,
                obs_dim,
                act_dim,
                episodes: Vec::new(),
                obs_norm,
                act_norm,
            };
            let mut c = CorrectionDataset::empty_like(&empty, horizon, latent_dim, chunk_dim);
            c.episode_count = episode_count;
            for _ in 0..records {
                c.episode.push(r.u32()?);
                c.t.push(r.u32()?);
                let k = r.u32()?;
                if k as usize >= horizon {
                    return Err(Error::format(CTX, format!("chunk index {k} outside horizon {horizon}")));
                }
                c.k.push(k);
                r.f32s_into(obs_dim, &mut c.obs)?;
                r.f32s_into(act_dim, &mut c.target)?;
                r.f32s_into(act_dim, &mut c.base_action)?;
                r.f32s_into(2, &mut c.tau)?;
                r.f32s_into(latent_dim, &mut c.latent)?;
                r.f32s_into(chunk_dim, &mut c.chunk)?;
            }
            Ok(Dataset::Correction(c))
        }
        other => Err(Error::format(CTX, format!("unknown dataset kind {other}"))),
    }
}

/// CSV view of a dataset, one row per transition or record.
///
/// Base columns: `episode, t, obs_0.., act_0..`. Correction columns:
/// `episode, t, k, obs_0.., target_0.., base_0.., tau_sin, tau_cos,
/// latent_0.., chunk_0..`.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let names = |p: &'static str, n: usize| (0..n).map(move |i| format!("{p}_{i}"));
    match ds {
        Dataset::Base(b) => {
            let mut header = vec!["episode".to_string(), "t".to_string()];
            header.extend(names("obs", b.obs_dim));
            header.extend(names("act", b.act_dim));
            w.write_record(&header)?;
            for (ei, ep) in b.episodes.iter().enumerate() {
                for t in 0..ep.len(b.obs_dim) {
                    let mut row = vec![ei.to_string(), t.to_string()];
                    row.extend(ep.obs[t * b.obs_dim..(t + 1) * b.obs_dim].iter().map(f32::to_string));
                    row.extend(ep.actions[t * b.act_dim..(t + 1) * b.act_dim].iter().map(f32::to_string));
                    w.write_record(&row)?;
                }
            }
        }
        Dataset::Correction(c) => {
            let mut header = vec!["episode".to_string(), "t".to_string(), "k".to_string()];
            header.extend(names("obs", c.obs_dim));
            header.extend(names("target", c.act_dim));
            header.extend(names("base", c.act_dim));
            header.push("tau_sin".into());
            header.push("tau_cos".into());
            header.extend(names("latent", c.latent_dim));
            header.extend(names("chunk", c.chunk_dim));
            w.write_record(&header)?;
            for i in 0..c.len() {
                let r = c.record(i);
                let mut row = vec![r.episode.to_string(), r.t.to_string(), r.k.to_string()];
                for v in [&r.obs, &r.target, &r.base_action, &r.tau.to_vec(), &r.latent, &r.chunk] {
                    row.extend(v.iter().map(f32::to_string));
                }
                w.write_record(&row)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_base(lengths: &[usize]) -> BaseDataset {
        let episodes = lengths
            .iter()
            .enumerate()
            .map(|(e, &t)| Episode {
                seed: e as u64,
                obs: (0..t * 2).map(|i| (i as f32 * 0.1) + e as f32).collect(),
                actions: (0..t).map(|i| ((i + e) as f32 * 0.07).sin()).collect(),
            })
            .collect();
        BaseDataset::new(EnvKind::HoldZone, 2, 1, episodes).unwrap()
    }

    #[test]
    fn closed_form_matches_enumeration() {
        assert_eq!(dcor_record_count(5, 3), 12);
        for h in 1..=10 {
            for t in 0..=50 {
                let brute: usize = (0..t).map(|s| s.min(h - 1) + 1).sum();
                assert_eq!(dcor_record_count(t, h), brute, "T={t} H={h}");
            }
        }
    }

    #[test]
    fn five_step_episode_with_horizon_three_gives_twelve_records() {
        let base = toy_base(&[5]);
        let d = build_dcor(&base, &ReplaySource::new(2, 1, 3), 3, AugmentOptions::default()).unwrap();
        assert_eq!(d.len(), 12);
        let ks: Vec<u32> = d.k.clone();
        assert_eq!(ks, vec![0, 0, 1, 0, 1, 2, 0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn replay_source_gives_zero_residuals_and_exact_taus() {
        let base = toy_base(&[1, 4, 9, 17]);
        let h = 6;
        let d = build_dcor(&base, &ReplaySource::new(2, 1, h), h, AugmentOptions::default()).unwrap();
        for i in 0..d.len() {
            let rec = d.record(i);
            assert!(residual_target(&rec).iter().all(|&v| v == 0.0));
            assert_eq!(rec.tau, sin_embed(rec.k as usize, h).unwrap());
            assert!(rec.k <= rec.t.min(h as u32 - 1));
        }
    }

    #[test]
    fn residual_target_subtracts() {
        let rec = CorrectionRecord {
            episode: 0,
            t: 0,
            k: 0,
            obs: vec![],
            target: vec![0.5, -0.5],
            base_action: vec![0.2, 0.1],
            tau: [0.0, 1.0],
            latent: vec![],
            chunk: vec![],
        };
        let r = residual_target(&rec);
        assert!((r[0] - 0.3).abs() < 1e-6 && (r[1] + 0.6).abs() < 1e-6);
    }

    #[test]
    fn perturbed_replay_bounds_mean_residual() {
        // A source whose chunks deviate from the expert by at most eps.
        struct Noisy(f32);
        impl ChunkSource for Noisy {
            fn obs_dim(&self) -> usize {
                2
            }
            fn act_dim(&self) -> usize {
                1
            }
            fn horizon(&self) -> usize {
                4
            }
            fn latent_dim(&self) -> usize {
                0
            }
            fn episode_chunks(&self, ep: &Episode) -> Result<(Vec<f32>, Vec<f32>)> {
                let (mut c, l) = ReplaySource::new(2, 1, 4).episode_chunks(ep)?;
                let mut r = rng::stream(ep.seed, Stream::Jitter);
                for v in c.iter_mut() {
                    *v += r.gen_range(-self.0..=self.0);
                }
                Ok((c, l))
            }
        }
        let base = toy_base(&[7, 12, 30]);
        let eps = 0.05;
        let d = build_dcor(&base, &Noisy(eps), 4, AugmentOptions::default()).unwrap();
        let res = d.residuals();
        let mean = res.iter().map(|v| v.abs()).sum::<f32>() / res.len() as f32;
        assert!(res.iter().all(|v| v.abs() <= eps + 1e-6));
        assert!(mean <= eps);
    }

    #[test]
    fn capture_options_size_records() {
        let base = toy_base(&[6]);
        let opts = AugmentOptions {
            capture_latent: false,
            capture_chunk: true,
        };
        let d = build_dcor(&base, &ReplaySource::new(2, 1, 3), 3, opts).unwrap();
        assert_eq!(d.chunk_dim, 3);
        assert_eq!(d.chunk.len(), d.len() * 3);
        let latent = AugmentOptions {
            capture_latent: true,
            capture_chunk: false,
        };
        assert!(build_dcor(&base, &ReplaySource::new(2, 1, 3), 3, latent).is_err());
    }

    #[test]
    fn dim_mismatch_rejected() {
        let base = toy_base(&[6]);
        assert!(build_dcor(&base, &ReplaySource::new(3, 1, 3), 3, AugmentOptions::default()).is_err());
        assert!(build_dcor(&base, &ReplaySource::new(2, 1, 3), 4, AugmentOptions::default()).is_err());
    }

    #[test]
    fn base_round_trip_bit_exact() {
        let base = toy_base(&[3, 1, 8]);
        let ds = Dataset::Base(base);
        let bytes = encode_dataset(&ds);
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn correction_round_trip_bit_exact() {
        let base = toy_base(&[3, 9]);
        let opts = AugmentOptions {
            capture_latent: false,
            capture_chunk: true,
        };
        let d = Dataset::Correction(build_dcor(&base, &ReplaySource::new(2, 1, 4), 4, opts).unwrap());
        let bytes = encode_dataset(&d);
        assert_eq!(decode_dataset(&bytes).unwrap(), d);
    }

    #[test]
    fn truncation_reports_expected_and_actual() {
        let bytes = encode_dataset(&Dataset::Base(toy_base(&[4, 4])));
        let cut = &bytes[..bytes.len() - 5];
        match decode_dataset(cut) {
            Err(Error::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, cut.len() as u64);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn newer_version_rejected() {
        let mut bytes = encode_dataset(&Dataset::Base(toy_base(&[2])));
        bytes[8] = (DATASET_VERSION + 1) as u8;
        let err = decode_dataset(&bytes).unwrap_err().to_string();
        assert!(err.contains("unsupported version"), "{err}");
        bytes[0] = b'X';
        assert!(decode_dataset(&bytes).unwrap_err().to_string().contains("bad magic"));
    }

    #[test]
    fn expert_dataset_matches_direct_rollout() {
        let env = EnvConfig::pursuit();
        let ds = record_expert_dataset(&env, 1, 99).unwrap();
        let ep = &ds.episodes[0];
        let direct = expert_episode(&env, ep.seed).unwrap();
        assert_eq!(ep, &direct);
        assert_eq!(ds.transitions(), ep.len(env.obs_dim()));
        let again = record_expert_dataset(&env, 1, 99).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn normalizer_round_trip() {
        let rows = vec![1.0, 5.0, 3.0, 5.0, -2.0, 5.0];
        let n = Normalizer::fit(&rows, 2);
        assert_eq!(n.std[1], 1.0);
        let s = Normalizer::fit_scale(&[3.0, 0.0, -4.0, 0.0], 2);
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert!((s.std[0] - 12.5f32.sqrt()).abs() < 1e-6 && s.std[1] == 1.0);
        for r in rows.chunks(2) {
            let back = n.denormalize(&n.normalize(r));
            for (a, b) in back.iter().zip(r) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn csv_export_has_one_row_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let base = toy_base(&[5]);
        let d = build_dcor(&base, &ReplaySource::new(2, 1, 3), 3, AugmentOptions::default()).unwrap();
        let p = dir.path().join("dcor.csv");
        export_csv(&Dataset::Correction(d), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "episode,t,k,obs_0,obs_1,target_0,base_0,tau_sin,tau_cos");
        assert_eq!(lines.count(), 12);
    }
}
