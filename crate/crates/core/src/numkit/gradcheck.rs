//! Central finite-difference check of [`MlpWeights::backward`].
//!
//! The loss is `L = Σ r ⊙ f(x)` for a random probe `r`, so the analytic side is
//! a single backward call with `output_grad = r`. The numeric side re-evaluates
//! the network with a plain `f64` scalar forward written independently of the
//! batched `f32` path, using step 1e-3 with Richardson extrapolation. When a
//! ±step perturbation flips a ReLU, the step is shrunk (÷10, down to 1e-7)
//! until every probe sees the same activation pattern, so kinks don't
//! masquerade as gradient bugs.

use rand::Rng as _;

use super::mlp::{MlpSpec, MlpWeights, LN_EPS};
use super::tensor::Tensor;
use crate::rng::{self, Stream};
use crate::Result;

const STEP: f64 = 1e-3;
const MIN_STEP: f64 = 1e-7;
const BATCH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over trials of ‖g_analytic − g_fd‖∞ / (‖g_fd‖∞ + 1e-8)
    pub max_rel_error: f64,
    pub trials: usize,
    pub checked_values: usize,
}

/// Gradient check of the crate's own backward pass.
pub fn grad_check(spec: &MlpSpec, trials: usize) -> Result<GradCheckReport> {
    grad_check_with(spec, trials, |w, x, r| {
        let pass = w.forward_pass(x)?;
        w.backward(&pass, r)
    })
}

/// Gradient check against an arbitrary backward implementation
/// `(weights, input, output_grad) -> (param grads, input grad)`.
pub fn grad_check_with<F>(spec: &MlpSpec, trials: usize, backward: F) -> Result<GradCheckReport>
where
    F: Fn(&MlpWeights, &Tensor, &Tensor) -> Result<(MlpWeights, Tensor)>,
{
    spec.validate()?;
    let trials = trials.max(1);
    let mut rng = rng::stream(spec.seed, Stream::GradCheck);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for trial in 0..trials {
        let mut weights = MlpWeights::init(&MlpSpec {
            seed: rng::mix(&[spec.seed, trial as u64]),
            ..spec.clone()
        })?;
        // Perturb biases and norm parameters away from their init so every
        // buffer has a non-trivial gradient.
        for layer in weights.layers_mut() {
            for b in &mut layer.bias {
                *b = rng.gen_range(-0.1..0.1);
            }
            if let Some(n) = &mut layer.norm {
                for g in &mut n.gain {
                    *g = rng.gen_range(0.5..1.5);
                }
                for s in &mut n.shift {
                    *s = rng.gen_range(-0.5..0.5);
                }
            }
        }
        let in_dim = weights.input_dim();
        let out_dim = weights.output_dim();
        let x = Tensor::from_vec(BATCH, in_dim, (0..BATCH * in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let probe = Tensor::from_vec(BATCH, out_dim, (0..BATCH * out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

        let (pgrad, xgrad) = backward(&weights, &x, &probe)?;
        let mut analytic: Vec<f64> = Vec::new();
        for p in pgrad.params() {
            analytic.extend(p.iter().map(|&v| v as f64));
        }
        analytic.extend(xgrad.data().iter().map(|&v| v as f64));

        let mut reference = Reference::new(&weights, &x, &probe);
        let mut numeric = Vec::with_capacity(analytic.len());
        for slot in 0..reference.len() {
            numeric.push(reference.central_difference(slot));
        }
        let num_inf = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff_inf = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let err = if analytic.len() != numeric.len() {
            f64::INFINITY
        } else {
            diff_inf / (num_inf + 1e-8)
        };
        worst = worst.max(err);
        checked += numeric.len();
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        trials,
        checked_values: checked,
    })
}

struct RefLayer {
    fan_in: usize,
    fan_out: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    norm: Option<(Vec<f64>, Vec<f64>)>,
}

/// f64 copy of the network plus input, addressable as one flat parameter list
/// in the same order as `MlpWeights::params` followed by the input.
struct Reference {
    layers: Vec<RefLayer>,
    input: Vec<f64>,
    probe: Vec<f64>,
    rows: usize,
}

impl Reference {
    fn new(w: &MlpWeights, x: &Tensor, probe: &Tensor) -> Self {
        let f = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
        Reference {
            layers: w
                .layers()
                .iter()
                .map(|l| RefLayer {
                    fan_in: l.fan_in,
                    fan_out: l.fan_out,
                    weight: f(&l.weight),
                    bias: f(&l.bias),
                    norm: l.norm.as_ref().map(|n| (f(&n.gain), f(&n.shift))),
                })
                .collect(),
            input: f(x.data()),
            probe: f(probe.data()),
            rows: x.rows(),
        }
    }

    fn buffers(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some((g, s)) = &mut l.norm {
                out.push(g);
                out.push(s);
            }
        }
        out.push(&mut self.input);
        out
    }

    fn len(&mut self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    fn slot(&mut self, mut index: usize) -> &mut f64 {
        for b in self.buffers() {
            if index < b.len() {
                return &mut b[index];
            }
            index -= b.len();
        }
        unreachable!("slot index out of range")
    }

    /// Richardson-extrapolated central difference: `(4·D(h/2) − D(h)) / 3`,
    /// which cancels the O(h²) term. Narrow LayerNorm layers are curved
    /// enough that plain `D(1e-3)` is off by several 1e-3 relative.
    fn central_difference(&mut self, index: usize) -> f64 {
        let original = *self.slot(index);
        let mut h = STEP;
        loop {
            let mut d = [0.0; 2];
            let mut patterns = Vec::with_capacity(4);
            for (k, step) in [h, h / 2.0].into_iter().enumerate() {
                *self.slot(index) = original + step;
                let (plus, pat_plus) = self.loss();
                *self.slot(index) = original - step;
                let (minus, pat_minus) = self.loss();
                *self.slot(index) = original;
                d[k] = (plus - minus) / (2.0 * step);
                patterns.push(pat_plus);
                patterns.push(pat_minus);
            }
            if patterns.windows(2).all(|w| w[0] == w[1]) || h <= MIN_STEP {
                return (4.0 * d[1] - d[0]) / 3.0;
            }
            h /= 10.0;
        }
    }

    /// Loss and the ReLU on/off pattern of every hidden unit.
    fn loss(&self) -> (f64, Vec<bool>) {
        let mut pattern = Vec::new();
        let mut total = 0.0;
        for r in 0..self.rows {
            let first = self.layers[0].fan_in;
            let mut act: Vec<f64> = self.input[r * first..(r + 1) * first].to_vec();
            for (li, l) in self.layers.iter().enumerate() {
                let mut z = vec![0.0; l.fan_out];
                for (o, zo) in z.iter_mut().enumerate() {
                    let mut s = l.bias[o];
                    for (i, a) in act.iter().enumerate() {
                        s += a * l.weight[i * l.fan_out + o];
                    }
                    *zo = s;
                }
                if li + 1 == self.layers.len() {
                    act = z;
                    break;
                }
                if let Some((gain, shift)) = &l.norm {
                    let n = z.len() as f64;
                    let mean = z.iter().sum::<f64>() / n;
                    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS as f64).sqrt();
                    for (j, v) in z.iter_mut().enumerate() {
                        *v = (*v - mean) * inv * gain[j] + shift[j];
                    }
                }
                for v in z.iter_mut() {
                    pattern.push(*v > 0.0);
                    *v = v.max(0.0);
                }
                act = z;
            }
            let out = act.len();
            total += act
                .iter()
                .zip(&self.probe[r * out..(r + 1) * out])
                .map(|(a, p)| a * p)
                .sum::<f64>();
        }
        (total, pattern)
    }
}
