//! Base chunking policy and the residual correction head.
//!
//! Policy files (`A2C2PL\0\0`, version 1) hold a small header followed by the
//! network in the numkit weight format:
//!
//! ```text
//! magic       8   "A2C2PL\0\0"
//! version     u16 1
//! role        u8  0 = base policy, 1 = correction head
//! task        u8  environment code
//! obs_dim     u32
//! act_dim     u32
//! horizon     u32
//! latent_tap  u32 hidden layer providing z (base); u32::MAX if none
//! latent_dim  u32 base: width of z; head: width of the z input (0 = unused)
//! chunk_dim   u32 head only: width of the full-chunk input (0 = unused)
//! obs_mean, obs_std               f32 × obs_dim
//! out_mean, out_std               f32 × act_dim (base: actions, head: residuals)
//! weights                         numkit weight file
//! ```

use std::path::Path;

use rand::seq::SliceRandom;

use crate::bytes::{Reader, Writer};
use crate::datastore::{BaseDataset, CorrectionDataset, Normalizer};
use crate::envsim::{self, EnvConfig, EnvKind};
use crate::numkit::{read_weights_from, sin_embed, write_weights_to, AdamWConfig, AdamWState, MlpSpec, MlpWeights, Tensor};
use crate::rng::{self, Stream};
use crate::{Error, Result};

pub const POLICY_MAGIC: &[u8; 8] = b"A2C2PL\0\0";
pub const POLICY_VERSION: u16 = 1;
const CTX: &str = "policy file";
const NO_TAP: u32 = u32::MAX;

/// `H` consecutive actions from one inference, tagged with the step of the
/// observation it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub source_step: usize,
    pub horizon: usize,
    pub act_dim: usize,
    pub actions: Vec<f32>,
}

impl ActionChunk {
    pub fn action(&self, k: usize) -> &[f32] {
        &self.actions[k * self.act_dim..(k + 1) * self.act_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub chunk: ActionChunk,
    pub latent: Vec<f32>,
}

/// Maps observations to action chunks.
pub trait ChunkPolicy: Sync {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn latent_dim(&self) -> usize;

    /// Chunks (`N × H·act_dim`, clamped to `[−1, 1]`) and latents
    /// (`N × latent_dim`) for a batch of raw observations.
    fn predict_batch(&self, obs: &Tensor) -> Result<(Tensor, Tensor)>;

    fn predict_chunk(&self, obs: &[f32]) -> Result<Prediction> {
        if obs.len() != self.obs_dim() {
            return Err(Error::shape("predict_chunk", self.obs_dim(), obs.len()));
        }
        let (c, z) = self.predict_batch(&Tensor::row_vector(obs))?;
        Ok(Prediction {
            chunk: ActionChunk {
                source_step: 0,
                horizon: self.horizon(),
                act_dim: self.act_dim(),
                actions: c.into_vec(),
            },
            latent: z.into_vec(),
        })
    }
}

/// Network shape of a base policy.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseArch {
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
}

impl Default for BaseArch {
    fn default() -> Self {
        BaseArch {
            horizon: 8,
            hidden: vec![512, 512],
            layer_norm: false,
        }
    }
}

/// Network shape and optional inputs of a correction head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadArch {
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
    pub use_latent: bool,
    /// Append the whole base chunk to the head input.
    pub use_chunk: bool,
}

impl Default for HeadArch {
    fn default() -> Self {
        HeadArch {
            hidden: vec![64, 64],
            layer_norm: true,
            use_latent: false,
            use_chunk: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub warmup_steps: u64,
    pub seed: u64,
    /// Fraction of episodes held out for evaluation.
    pub eval_fraction: f64,
}

impl TrainConfig {
    /// Kinetix flow-policy training table.
    pub fn base_defaults() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 512,
            epochs: 32,
            weight_decay: 1e-2,
            grad_clip: 10.0,
            warmup_steps: 1000,
            seed: 0,
            eval_fraction: 0.1,
        }
    }

    /// Kinetix correction-head training table.
    pub fn head_defaults() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 512,
            epochs: 16,
            weight_decay: 1e-3,
            grad_clip: 5.0,
            warmup_steps: 500,
            seed: 0,
            eval_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && self.weight_decay >= 0.0
            && self.grad_clip > 0.0
            && self.eval_fraction > 0.0
            && self.eval_fraction <= 0.5;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training config {self:?}")))
        }
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            grad_clip_norm: Some(self.grad_clip),
            warmup_steps: self.warmup_steps,
            ..AdamWConfig::default()
        }
    }
}

/// Per-epoch mean training loss and held-out loss (normalized units).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub eval: Vec<f64>,
    pub steps: u64,
}

/// Behavior-cloned chunk regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePolicy {
    pub task: EnvKind,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub horizon: usize,
    pub latent_tap: Option<usize>,
    pub weights: MlpWeights,
    pub obs_norm: Normalizer,
    pub act_norm: Normalizer,
}

impl BasePolicy {
    pub fn new(
        task: EnvKind,
        horizon: usize,
        weights: MlpWeights,
        obs_norm: Normalizer,
        act_norm: Normalizer,
    ) -> Result<Self> {
        let obs_dim = weights.input_dim();
        let act_dim = act_norm.dim();
        if horizon == 0 || act_dim == 0 || weights.output_dim() != horizon * act_dim || obs_norm.dim() != obs_dim {
            return Err(Error::shape(
                "base policy",
                format!("output {horizon}×{act_dim}, obs {}", obs_norm.dim()),
                format!("output {}, input {}", weights.output_dim(), obs_dim),
            ));
        }
        let latent_tap = weights.hidden_layers().checked_sub(1);
        Ok(BasePolicy {
            task,
            obs_dim,
            act_dim,
            horizon,
            latent_tap,
            weights,
            obs_norm,
            act_norm,
        })
    }
}

impl ChunkPolicy for BasePolicy {
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
        self.latent_tap.map_or(0, |t| self.weights.layers()[t].fan_out)
    }

    fn predict_batch(&self, obs: &Tensor) -> Result<(Tensor, Tensor)> {
        if obs.cols() != self.obs_dim {
            return Err(Error::shape("predict_chunk", self.obs_dim, obs.cols()));
        }
        let mut x = obs.clone();
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - self.obs_norm.mean[i]) / self.obs_norm.std[i];
            }
        }
        let (mut out, latent) = self.weights.forward_tap(&x, self.latent_tap)?;
        let ad = self.act_dim;
        for v in out.data_mut().chunks_exact_mut(ad) {
            for (c, a) in v.iter_mut().enumerate() {
                // `+ 0.0` folds −0.0 into +0.0 so adding a zero residual is bit-exact.
                *a = (*a * self.act_norm.std[c] + self.act_norm.mean[c]).clamp(-1.0, 1.0) + 0.0;
            }
        }
        let latent = latent.unwrap_or_else(|| Tensor::zeros(obs.rows(), 0));
        Ok((out, latent))
    }
}

/// Scripted expert planned forward on the nominal model; a reference
/// chunking policy with no latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertChunkPolicy {
    pub env: EnvConfig,
    pub horizon: usize,
}

impl ChunkPolicy for ExpertChunkPolicy {
    fn obs_dim(&self) -> usize {
        self.env.obs_dim()
    }
    fn act_dim(&self) -> usize {
        self.env.act_dim()
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn latent_dim(&self) -> usize {
        0
    }
    fn predict_batch(&self, obs: &Tensor) -> Result<(Tensor, Tensor)> {
        if obs.cols() != self.obs_dim() {
            return Err(Error::shape("predict_chunk", self.obs_dim(), obs.cols()));
        }
        let mut data = Vec::with_capacity(obs.rows() * self.horizon * self.act_dim());
        for r in 0..obs.rows() {
            data.extend(envsim::expert_chunk(&self.env, obs.row(r), self.horizon)?.into_iter().map(|a| a + 0.0));
        }
        Ok((Tensor::from_vec(obs.rows(), self.horizon * self.act_dim(), data)?, Tensor::zeros(obs.rows(), 0)))
    }
}

/// Per-step residual regressor over `(o_now, â_k, τ_k [, z] [, chunk])`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionHead {
    pub task: EnvKind,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub horizon: usize,
    pub latent_dim: usize,
    pub chunk_dim: usize,
    pub weights: MlpWeights,
    pub obs_norm: Normalizer,
    pub residual_norm: Normalizer,
}

impl CorrectionHead {
    pub fn input_dim(obs_dim: usize, act_dim: usize, latent_dim: usize, chunk_dim: usize) -> usize {
        obs_dim + act_dim + 2 + latent_dim + chunk_dim
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        task: EnvKind,
        horizon: usize,
        latent_dim: usize,
        chunk_dim: usize,
        weights: MlpWeights,
        obs_norm: Normalizer,
        residual_norm: Normalizer,
    ) -> Result<Self> {
        let obs_dim = obs_norm.dim();
        let act_dim = residual_norm.dim();
        let input = Self::input_dim(obs_dim, act_dim, latent_dim, chunk_dim);
        if horizon == 0 || weights.input_dim() != input || weights.output_dim() != act_dim {
            return Err(Error::shape(
                "correction head",
                format!("{input} → {act_dim}"),
                format!("{} → {}", weights.input_dim(), weights.output_dim()),
            ));
        }
        Ok(CorrectionHead {
            task,
            obs_dim,
            act_dim,
            horizon,
            latent_dim,
            chunk_dim,
            weights,
            obs_norm,
            residual_norm,
        })
    }

    /// Head whose output is exactly zero for every input.
    pub fn zeros(task: EnvKind, obs_dim: usize, act_dim: usize, horizon: usize, arch: &HeadArch) -> Result<Self> {
        let spec = head_spec(obs_dim, act_dim, 0, 0, arch, 0);
        CorrectionHead::new(
            task,
            horizon,
            0,
            0,
            MlpWeights::zeros(&spec)?,
            Normalizer::identity(obs_dim),
            Normalizer::identity(act_dim),
        )
    }

    pub fn uses_latent(&self) -> bool {
        self.latent_dim > 0
    }

    fn fill_input(&self, obs: &[f32], base_action: &[f32], k: usize, latent: &[f32], chunk: &[f32], out: &mut [f32]) -> Result<()> {
        let (od, ad) = (self.obs_dim, self.act_dim);
        if obs.len() != od || base_action.len() != ad {
            return Err(Error::shape(
                "predict_residual",
                format!("obs {od}, action {ad}"),
                format!("obs {}, action {}", obs.len(), base_action.len()),
            ));
        }
        if self.latent_dim > 0 && latent.len() != self.latent_dim {
            return Err(Error::shape("predict_residual latent", self.latent_dim, latent.len()));
        }
        if self.chunk_dim > 0 && chunk.len() != self.chunk_dim {
            return Err(Error::shape("predict_residual chunk", self.chunk_dim, chunk.len()));
        }
        let tau = sin_embed(k, self.horizon)?;
        self.obs_norm.normalize_into(obs, &mut out[..od]);
        out[od..od + ad].copy_from_slice(base_action);
        out[od + ad..od + ad + 2].copy_from_slice(&tau);
        let mut o = od + ad + 2;
        if self.latent_dim > 0 {
            out[o..o + self.latent_dim].copy_from_slice(latent);
            o += self.latent_dim;
        }
        if self.chunk_dim > 0 {
            out[o..o + self.chunk_dim].copy_from_slice(chunk);
        }
        Ok(())
    }

    /// One forward pass on `concat(normalize(obs), base_action, τ_k [, z] [, chunk])`.
    /// `latent` and `chunk` are ignored unless the head was trained with them.
    pub fn predict_residual(&self, obs: &[f32], base_action: &[f32], k: usize, latent: &[f32], chunk: &[f32]) -> Result<Vec<f32>> {
        let mut x = vec![0.0; self.weights.input_dim()];
        self.fill_input(obs, base_action, k, latent, chunk, &mut x)?;
        let out = self.weights.forward(&Tensor::row_vector(&x))?;
        Ok(self.residual_norm.denormalize(out.data()))
    }
}

/// `clamp(base + delta, −1, 1)`, elementwise.
pub fn apply_correction(base_action: &[f32], delta: &[f32]) -> Vec<f32> {
    base_action.iter().zip(delta).map(|(b, d)| (b + d).clamp(-1.0, 1.0)).collect()
}

fn head_spec(obs_dim: usize, act_dim: usize, latent_dim: usize, chunk_dim: usize, arch: &HeadArch, seed: u64) -> MlpSpec {
    let mut sizes = vec![CorrectionHead::input_dim(obs_dim, act_dim, latent_dim, chunk_dim)];
    sizes.extend(&arch.hidden);
    sizes.push(act_dim);
    MlpSpec::new(sizes, arch.layer_norm, seed)
}

/// Marks a deterministic `fraction` of `n` episodes as held out. With a single
/// episode there is nothing to hold out, so it serves as both sets.
pub fn split_episodes(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    if n < 2 {
        return vec![true; n];
    }
    let n_eval = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Split));
    let mut held = vec![false; n];
    for &i in &order[..n_eval] {
        held[i] = true;
    }
    held
}

/// Regression problem in normalized units: row-major inputs and targets.
struct Problem<'a> {
    inputs: &'a [f32],
    targets: &'a [f32],
    in_dim: usize,
    out_dim: usize,
}

impl Problem<'_> {
    fn gather(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let mut x = Vec::with_capacity(idx.len() * self.in_dim);
        let mut y = Vec::with_capacity(idx.len() * self.out_dim);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * self.in_dim..(i + 1) * self.in_dim]);
            y.extend_from_slice(&self.targets[i * self.out_dim..(i + 1) * self.out_dim]);
        }
        (
            Tensor::from_vec(idx.len(), self.in_dim, x).expect("gathered rows"),
            Tensor::from_vec(idx.len(), self.out_dim, y).expect("gathered rows"),
        )
    }

    fn mse(&self, w: &MlpWeights, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0f64;
        for part in idx.chunks(4096) {
            let (x, y) = self.gather(part);
            let out = w.forward(&x)?;
            total += out.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
        }
        Ok(total / (idx.len() * self.out_dim) as f64)
    }
}

fn fit(w: &mut MlpWeights, p: &Problem, train: &[usize], eval: &[usize], cfg: &TrainConfig) -> Result<LossCurve> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut opt = AdamWState::new(cfg.optimizer(), w);
    let mut shuffle = rng::stream(cfg.seed, Stream::Shuffle);
    let mut order = train.to_vec();
    let mut curve = LossCurve::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = 0f64;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = p.gather(batch);
            let pass = w.forward_pass(&x)?;
            let scale = 2.0 / (batch.len() * p.out_dim) as f32;
            let mut g = Tensor::zeros(batch.len(), p.out_dim);
            for ((gv, &o), &t) in g.data_mut().iter_mut().zip(pass.output().data()).zip(y.data()) {
                let diff = o - t;
                sum += (diff as f64) * (diff as f64);
                *gv = scale * diff;
            }
            let (grads, _) = w.backward(&pass, &g)?;
            opt.update(w, &grads)?;
        }
        let train_loss = sum / (order.len() * p.out_dim) as f64;
        let eval_loss = p.mse(w, eval)?;
        log::debug!("epoch {epoch}: train {train_loss:.6} eval {eval_loss:.6}");
        curve.train.push(train_loss);
        curve.eval.push(eval_loss);
    }
    curve.steps = opt.step_count();
    Ok(curve)
}

/// Behavior cloning on `H`-step chunk targets. Chunk starts whose window would
/// run past the episode end are skipped.
pub fn train_base(dbase: &BaseDataset, arch: &BaseArch, cfg: &TrainConfig) -> Result<(BasePolicy, LossCurve)> {
    cfg.validate()?;
    let (od, ad, h) = (dbase.obs_dim, dbase.act_dim, arch.horizon);
    if h == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let held = split_episodes(dbase.episodes.len(), cfg.eval_fraction, cfg.seed);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    let mut n = 0usize;
    for (ei, ep) in dbase.episodes.iter().enumerate() {
        let t_len = ep.len(od);
        if t_len < h {
            continue;
        }
        let norm_obs: Vec<f32> = ep.obs.chunks_exact(od).flat_map(|o| dbase.obs_norm.normalize(o)).collect();
        let norm_act: Vec<f32> = ep.actions.chunks_exact(ad).flat_map(|a| dbase.act_norm.normalize(a)).collect();
        for s in 0..=t_len - h {
            inputs.extend_from_slice(&norm_obs[s * od..(s + 1) * od]);
            targets.extend_from_slice(&norm_act[s * ad..(s + h) * ad]);
            if held[ei] {
                eval.push(n);
            }
            if !held[ei] || dbase.episodes.len() < 2 {
                train.push(n);
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument(format!("no episode is long enough for a {h}-step chunk")));
    }
    let mut sizes = vec![od];
    sizes.extend(&arch.hidden);
    sizes.push(h * ad);
    let spec = MlpSpec::new(sizes, arch.layer_norm, rng::mix(&[cfg.seed, 1]));
    let mut w = MlpWeights::init(&spec)?;
    let problem = Problem {
        inputs: &inputs,
        targets: &targets,
        in_dim: od,
        out_dim: h * ad,
    };
    let curve = fit(&mut w, &problem, &train, &eval, cfg)?;
    let policy = BasePolicy::new(dbase.task, h, w, dbase.obs_norm.clone(), dbase.act_norm.clone())?;
    Ok((policy, curve))
}

/// Residual regression over every correction record, sampled uniformly.
pub fn train_correction(dcor: &CorrectionDataset, arch: &HeadArch, cfg: &TrainConfig) -> Result<(CorrectionHead, LossCurve)> {
    cfg.validate()?;
    if arch.use_latent && dcor.latent_dim == 0 {
        return Err(Error::InvalidArgument("head requests the latent input but the dataset has none".into()));
    }
    if arch.use_chunk && dcor.chunk_dim == 0 {
        return Err(Error::InvalidArgument("head requests the chunk input but the dataset has none".into()));
    }
    if dcor.is_empty() {
        return Err(Error::InvalidArgument("empty correction dataset".into()));
    }
    let (od, ad) = (dcor.obs_dim, dcor.act_dim);
    let ld = if arch.use_latent { dcor.latent_dim } else { 0 };
    let cd = if arch.use_chunk { dcor.chunk_dim } else { 0 };
    let held = split_episodes(dcor.episode_count.max(1), cfg.eval_fraction, cfg.seed);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for i in 0..dcor.len() {
        let e = dcor.episode[i] as usize;
        let is_eval = held.get(e).copied().unwrap_or(false);
        if is_eval {
            eval.push(i);
        }
        if !is_eval || held.len() < 2 {
            train.push(i);
        }
    }
    let residuals = dcor.residuals();
    let train_res: Vec<f32> = train.iter().flat_map(|&i| residuals[i * ad..(i + 1) * ad].iter().copied()).collect();
    let residual_norm = Normalizer::fit_scale(&train_res, ad);
    let targets: Vec<f32> = residuals.chunks_exact(ad).flat_map(|r| residual_norm.normalize(r)).collect();

    let spec = head_spec(od, ad, ld, cd, arch, rng::mix(&[cfg.seed, 2]));
    let mut head = CorrectionHead::new(
        dcor.task,
        dcor.horizon,
        ld,
        cd,
        MlpWeights::zeros(&spec)?,
        dcor.obs_norm.clone(),
        residual_norm,
    )?;
    let in_dim = head.weights.input_dim();
    let mut inputs = vec![0f32; dcor.len() * in_dim];
    for (i, x) in inputs.chunks_exact_mut(in_dim).enumerate() {
        head.fill_input(
            &dcor.obs[i * od..(i + 1) * od],
            &dcor.base_action[i * ad..(i + 1) * ad],
            dcor.k[i] as usize,
            &dcor.latent[i * dcor.latent_dim..(i + 1) * dcor.latent_dim],
            &dcor.chunk[i * dcor.chunk_dim..(i + 1) * dcor.chunk_dim],
            x,
        )?;
    }
    // The output layer starts at zero so an untrained head leaves the base
    // action untouched.
    let mut w = MlpWeights::init(&spec)?;
    if let Some(last) = w.layers_mut().last_mut() {
        last.weight.iter_mut().for_each(|v| *v = 0.0);
    }
    let problem = Problem {
        inputs: &inputs,
        targets: &targets,
        in_dim,
        out_dim: ad,
    };
    let curve = fit(&mut w, &problem, &train, &eval, cfg)?;
    head.weights = w;
    Ok((head, curve))
}

/// Record indices of the held-out episodes under `cfg`'s split.
pub fn held_out_records(dcor: &CorrectionDataset, cfg: &TrainConfig) -> Vec<usize> {
    let held = split_episodes(dcor.episode_count.max(1), cfg.eval_fraction, cfg.seed);
    (0..dcor.len()).filter(|&i| held.get(dcor.episode[i] as usize).copied().unwrap_or(false)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Base(BasePolicy),
    Head(CorrectionHead),
}

impl Policy {
    pub fn role_name(&self) -> &'static str {
        match self {
            Policy::Base(_) => "base policy",
            Policy::Head(_) => "correction head",
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn encode_policy_parts(
    role: u8,
    task: EnvKind,
    dims: [u32; 6],
    obs_norm: &Normalizer,
    out_norm: &Normalizer,
    weights: &MlpWeights,
) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(POLICY_MAGIC);
    w.u16(POLICY_VERSION);
    w.u8(role);
    w.u8(task.code());
    for d in dims {
        w.u32(d);
    }
    obs_norm.write(&mut w);
    out_norm.write(&mut w);
    write_weights_to(weights, &mut w.buf)?;
    Ok(w.buf)
}

pub fn encode_policy(p: &Policy) -> Result<Vec<u8>> {
    match p {
        Policy::Base(b) => encode_policy_parts(
            0,
            b.task,
            [
                b.obs_dim as u32,
                b.act_dim as u32,
                b.horizon as u32,
                b.latent_tap.map_or(NO_TAP, |t| t as u32),
                b.latent_dim() as u32,
                0,
            ],
            &b.obs_norm,
            &b.act_norm,
            &b.weights,
        ),
        Policy::Head(h) => encode_policy_parts(
            1,
            h.task,
            [
                h.obs_dim as u32,
                h.act_dim as u32,
                h.horizon as u32,
                NO_TAP,
                h.latent_dim as u32,
                h.chunk_dim as u32,
            ],
            &h.obs_norm,
            &h.residual_norm,
            &h.weights,
        ),
    }
}

pub fn decode_policy(bytes: &[u8]) -> Result<Policy> {
    let mut r = Reader::new(bytes, CTX);
    if r.take(8)? != POLICY_MAGIC {
        return Err(Error::format(CTX, "bad magic"));
    }
    let version = r.u16()?;
    if version != POLICY_VERSION {
        return Err(Error::format(CTX, format!("unsupported version {version}")));
    }
    let role = r.u8()?;
    let code = r.u8()?;
    let task = EnvKind::from_code(code).ok_or_else(|| Error::format(CTX, format!("unknown task code {code}")))?;
    let mut d = [0u32; 6];
    for v in d.iter_mut() {
        *v = r.u32()?;
    }
    let [obs_dim, act_dim, horizon, tap, latent_dim, chunk_dim] = d;
    let obs_norm = Normalizer::read(&mut r, obs_dim as usize)?;
    let out_norm = Normalizer::read(&mut r, act_dim as usize)?;
    let mut rest = r.take(r.remaining())?;
    let weights = read_weights_from(&mut rest)?;
    match role {
        0 => {
            let mut b = BasePolicy::new(task, horizon as usize, weights, obs_norm, out_norm)?;
            b.latent_tap = if tap == NO_TAP { None } else { Some(tap as usize) };
            if b.latent_tap.is_some_and(|t| t >= b.weights.hidden_layers()) || b.latent_dim() != latent_dim as usize {
                return Err(Error::format(CTX, "latent tap does not match the network"));
            }
            Ok(Policy::Base(b))
        }
        1 => Ok(Policy::Head(CorrectionHead::new(
            task,
            horizon as usize,
            latent_dim as usize,
            chunk_dim as usize,
            weights,
            obs_norm,
            out_norm,
        )?)),
        other => Err(Error::format(CTX, format!("unknown policy role {other}"))),
    }
}

pub fn save_policy(p: &Policy, path: &Path) -> Result<()> {
    std::fs::write(path, encode_policy(p)?).map_err(|e| Error::io(path, e))
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    decode_policy(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_base(path: &Path) -> Result<BasePolicy> {
    match load_policy(path)? {
        Policy::Base(b) => Ok(b),
        other => Err(Error::format(CTX, format!("{} holds a {}, expected a base policy", path.display(), other.role_name()))),
    }
}

pub fn load_head(path: &Path) -> Result<CorrectionHead> {
    match load_policy(path)? {
        Policy::Head(h) => Ok(h),
        other => Err(Error::format(CTX, format!("{} holds a {}, expected a correction head", path.display(), other.role_name()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{build_dcor, AugmentOptions, Episode, ReplaySource};

    fn constant_dataset() -> BaseDataset {
        let episodes = (0..100)
            .map(|e| {
                let t = 200;
                Episode {
                    seed: e,
                    obs: (0..t * 2).map(|i| ((i as f32 + e as f32) * 0.37).sin()).collect(),
                    actions: [0.3f32, -0.6].repeat(t),
                }
            })
            .collect();
        BaseDataset::new(EnvKind::Pursuit, 2, 2, episodes).unwrap()
    }

    fn small_base_arch(h: usize) -> BaseArch {
        BaseArch {
            horizon: h,
            hidden: vec![32, 32],
            layer_norm: false,
        }
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            epochs,
            warmup_steps: 20,
            learning_rate: 1e-3,
            ..TrainConfig::base_defaults()
        }
    }

    #[test]
    fn constant_action_dataset_is_learned() {
        let (p, curve) = train_base(&constant_dataset(), &small_base_arch(4), &TrainConfig::base_defaults()).unwrap();
        assert!(*curve.eval.last().unwrap() < 1e-4, "{curve:?}");
        let pred = p.predict_chunk(&[0.1, 0.2]).unwrap();
        assert_eq!(pred.chunk.actions.len(), 8);
        for k in 0..4 {
            let a = pred.chunk.action(k);
            assert!((a[0] - 0.3).abs() < 0.05 && (a[1] + 0.6).abs() < 0.05, "{a:?}");
        }
    }

    #[test]
    fn training_loss_does_not_jump() {
        let env = EnvConfig::holdzone();
        let ds = crate::datastore::record_expert_dataset(&env, 16, 3).unwrap();
        let (_, curve) = train_base(&ds, &small_base_arch(4), &quick(12)).unwrap();
        for w in curve.train.windows(2) {
            assert!(w[1] <= w[0] * 1.1, "{:?}", curve.train);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = constant_dataset();
        let (a, ca) = train_base(&ds, &small_base_arch(3), &quick(2)).unwrap();
        let (b, cb) = train_base(&ds, &small_base_arch(3), &quick(2)).unwrap();
        assert!(a.weights.bit_eq(&b.weights));
        assert_eq!(ca, cb);
    }

    #[test]
    fn chunk_shape_for_several_horizons() {
        let ds = constant_dataset();
        for h in [1, 4, 8] {
            let (p, _) = train_base(&ds, &small_base_arch(h), &quick(1)).unwrap();
            let a = p.predict_chunk(&[0.0, 0.5]).unwrap();
            let b = p.predict_chunk(&[0.0, 0.5]).unwrap();
            assert_eq!(a.chunk.actions.len(), h * 2);
            assert_eq!(a, b);
            assert_eq!(a.latent.len(), 32);
        }
    }

    #[test]
    fn raw_output_is_clamped() {
        let spec = MlpSpec::new(vec![1, 2], false, 0);
        let mut w = MlpWeights::zeros(&spec).unwrap();
        w.layers_mut()[0].bias = vec![1.3, -0.2];
        let p = BasePolicy::new(EnvKind::HoldZone, 2, w, Normalizer::identity(1), Normalizer::identity(1)).unwrap();
        let c = p.predict_chunk(&[0.0]).unwrap();
        assert_eq!(c.chunk.actions, vec![1.0, -0.2]);
        assert!(p.latent_tap.is_none() && c.latent.is_empty());
    }

    #[test]
    fn too_short_dataset_rejected() {
        let ds = constant_dataset();
        assert!(train_base(&ds, &small_base_arch(201), &quick(1)).is_err());
    }

    #[test]
    fn zero_head_outputs_zero() {
        let head = CorrectionHead::zeros(EnvKind::Pursuit, 8, 2, 8, &HeadArch::default()).unwrap();
        for k in 0..8 {
            let d = head.predict_residual(&[0.3; 8], &[0.1, -0.9], k, &[], &[]).unwrap();
            assert!(d.iter().all(|v| *v == 0.0 && v.is_sign_positive()));
        }
    }

    #[test]
    fn residual_depends_only_on_inputs() {
        let arch = HeadArch::default();
        let spec = head_spec(2, 1, 0, 0, &arch, 5);
        let head = CorrectionHead::new(
            EnvKind::HoldZone,
            8,
            0,
            0,
            MlpWeights::init(&spec).unwrap(),
            Normalizer::identity(2),
            Normalizer::identity(1),
        )
        .unwrap();
        let a = head.predict_residual(&[0.2, 0.1], &[0.4], 1, &[], &[]).unwrap();
        let b = head.predict_residual(&[0.2, 0.1], &[0.4], 5, &[], &[]).unwrap();
        let c = head.predict_residual(&[0.2, 0.1], &[0.4], 1, &[], &[]).unwrap();
        assert_ne!(a, b);
        assert_eq!(a[0].to_bits(), c[0].to_bits());
        assert!(head.predict_residual(&[0.2], &[0.4], 1, &[], &[]).is_err());
        assert!(head.predict_residual(&[0.2, 0.1], &[0.4], 8, &[], &[]).is_err());
    }

    #[test]
    fn apply_correction_adds_and_clamps() {
        assert_eq!(apply_correction(&[0.2, -0.1], &[0.0, 0.0]), vec![0.2, -0.1]);
        let e = apply_correction(&[0.2, -0.1], &[0.05, 0.1]);
        assert!((e[0] - 0.25).abs() < 1e-7 && e[1].abs() < 1e-7);
        assert_eq!(apply_correction(&[0.95], &[0.2]), vec![1.0]);
    }

    fn replay_dcor(offset: Vec<f32>) -> CorrectionDataset {
        let env = EnvConfig::pursuit();
        let ds = crate::datastore::record_expert_dataset(&env, 24, 11).unwrap();
        let src = ReplaySource::new(8, 2, 8).with_offset(offset);
        build_dcor(&ds, &src, 8, AugmentOptions::default()).unwrap()
    }

    fn head_quick() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch_size: 256,
            warmup_steps: 50,
            learning_rate: 1e-3,
            ..TrainConfig::head_defaults()
        }
    }

    #[test]
    fn zero_residuals_give_a_near_zero_head() {
        let d = replay_dcor(vec![0.0, 0.0]);
        let cfg = head_quick();
        let (head, _) = train_correction(&d, &HeadArch::default(), &cfg).unwrap();
        let held = held_out_records(&d, &cfg);
        let mut total = 0f64;
        for &i in &held {
            let r = d.record(i);
            let out = head.predict_residual(&r.obs, &r.base_action, r.k as usize, &[], &[]).unwrap();
            total += out.iter().map(|v| v.abs() as f64).sum::<f64>() / 2.0;
        }
        let mean = total / held.len() as f64;
        assert!(mean < 1e-3, "mean |Δa| {mean}");
    }

    #[test]
    fn constant_bias_is_cancelled() {
        let b = [0.15f32, -0.1];
        let d = replay_dcor(b.to_vec());
        let cfg = head_quick();
        let (head, _) = train_correction(&d, &HeadArch::default(), &cfg).unwrap();
        let held = held_out_records(&d, &cfg);
        let mut total = 0f64;
        for &i in &held {
            let r = d.record(i);
            let out = head.predict_residual(&r.obs, &r.base_action, r.k as usize, &[], &[]).unwrap();
            total += (out[0] + b[0]).abs().max((out[1] + b[1]).abs()) as f64;
        }
        let mean = total / held.len() as f64;
        assert!(mean < 0.02, "mean bias error {mean}");
    }

    #[test]
    fn latent_request_without_latent_rejected() {
        let d = replay_dcor(vec![0.0, 0.0]);
        let arch = HeadArch {
            use_latent: true,
            ..HeadArch::default()
        };
        assert!(train_correction(&d, &arch, &head_quick()).is_err());
    }

    #[test]
    fn policy_files_round_trip() {
        let (p, _) = train_base(&constant_dataset(), &small_base_arch(3), &quick(1)).unwrap();
        let bytes = encode_policy(&Policy::Base(p.clone())).unwrap();
        assert_eq!(decode_policy(&bytes).unwrap(), Policy::Base(p));
        let h = CorrectionHead::zeros(EnvKind::HoldZone, 2, 1, 8, &HeadArch::default()).unwrap();
        let bytes = encode_policy(&Policy::Head(h.clone())).unwrap();
        assert_eq!(decode_policy(&bytes).unwrap(), Policy::Head(h));
        assert!(decode_policy(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn expert_chunk_policy_matches_envsim() {
        let env = EnvConfig::pursuit();
        let p = ExpertChunkPolicy { env, horizon: 8 };
        let s = envsim::reset(&env, 4);
        let obs = s.observation();
        let pred = p.predict_chunk(&obs).unwrap();
        let direct = envsim::expert_chunk(&env, &obs, 8).unwrap();
        assert!(pred.chunk.actions.iter().zip(&direct).all(|(a, b)| a == b));
    }
}
