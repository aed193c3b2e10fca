use rand::Rng as _;

use super::gemm;
use super::tensor::Tensor;
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Layer-norm variance epsilon.
pub const LN_EPS: f32 = 1e-5;

/// Architecture of a ReLU MLP.
///
/// `layer_sizes` runs input → hidden… → output; every hidden layer is
/// `linear → [layer norm] → ReLU`, the output layer is linear only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    /// One flag per hidden layer.
    pub layer_norm: Vec<bool>,
    pub seed: u64,
}

impl MlpSpec {
    /// Spec with the same layer-norm flag on every hidden layer.
    pub fn new(layer_sizes: Vec<usize>, layer_norm: bool, seed: u64) -> Self {
        let hidden = layer_sizes.len().saturating_sub(2);
        MlpSpec {
            layer_sizes,
            layer_norm: vec![layer_norm; hidden],
            seed,
        }
    }

    pub fn hidden_layers(&self) -> usize {
        self.layer_sizes.len().saturating_sub(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least 2 layer sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_norm.len() != self.hidden_layers() {
            return Err(Error::InvalidArgument(format!(
                "{} layer-norm flags for {} hidden layers",
                self.layer_norm.len(),
                self.hidden_layers()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f32>,
    pub shift: Vec<f32>,
}

/// One affine layer. `weight` is `fan_in × fan_out`, row-major, so a batch
/// `x: rows × fan_in` maps to `x · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub norm: Option<LayerNorm>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize, norm: bool, gain: f32) -> Self {
        Dense {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
            norm: norm.then(|| LayerNorm {
                gain: vec![gain; fan_out],
                shift: vec![0.0; fan_out],
            }),
        }
    }

    fn check(&self) -> Result<()> {
        let ok = self.weight.len() == self.fan_in * self.fan_out
            && self.bias.len() == self.fan_out
            && self
                .norm
                .as_ref()
                .map_or(true, |n| n.gain.len() == self.fan_out && n.shift.len() == self.fan_out);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "Dense",
                format!("{}x{} layer", self.fan_in, self.fan_out),
                "inconsistent parameter lengths",
            ))
        }
    }
}

/// MLP parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    layers: Vec<Dense>,
}

/// Activations kept by [`MlpWeights::forward_pass`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    input: Tensor,
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// Post-ReLU activation for hidden layers, raw output for the last layer.
    out: Tensor,
    /// Normalized pre-activation and per-row `1/σ`, for layer-norm layers.
    norm: Option<(Tensor, Vec<f32>)>,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        &self.layers.last().expect("non-empty network").out
    }

    /// Post-ReLU activation of hidden layer `index` (0-based).
    pub fn hidden(&self, index: usize) -> Option<&Tensor> {
        if index + 1 < self.layers.len() {
            Some(&self.layers[index].out)
        } else {
            None
        }
    }

    pub fn into_output(mut self) -> Tensor {
        self.layers.pop().expect("non-empty network").out
    }
}

impl MlpWeights {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(spec.seed, Stream::WeightInit);
        let n = spec.layer_sizes.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let (fan_in, fan_out) = (spec.layer_sizes[i], spec.layer_sizes[i + 1]);
            let norm = i + 1 < n && spec.layer_norm[i];
            let mut layer = Dense::zeros(fan_in, fan_out, norm, 1.0);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            for w in &mut layer.weight {
                *w = rng.gen_range(-limit..=limit);
            }
            layers.push(layer);
        }
        Ok(MlpWeights { layers })
    }

    /// All weights and biases zero (layer-norm gains one); the network outputs zero.
    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.layer_sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let norm = i + 1 < n && spec.layer_norm[i];
                Dense::zeros(spec.layer_sizes[i], spec.layer_sizes[i + 1], norm, 1.0)
            })
            .collect();
        Ok(MlpWeights { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            l.check()?;
            if let Some(next) = layers.get(i + 1) {
                if next.fan_in != l.fan_out {
                    return Err(Error::shape(
                        "MlpWeights::from_layers",
                        format!("layer {} fan_in {}", i + 1, l.fan_out),
                        next.fan_in,
                    ));
                }
            }
        }
        if layers.last().is_some_and(|l| l.norm.is_some()) {
            return Err(Error::InvalidArgument("output layer cannot carry layer norm".into()));
        }
        Ok(MlpWeights { layers })
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        MlpWeights {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.fan_in, l.fan_out, l.norm.is_some(), 0.0))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.fan_out))
            .collect()
    }

    /// Parameter buffers in a fixed order: per layer weight, bias, then gain
    /// and shift when normalized.
    pub fn params(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(l.bias.as_slice());
            if let Some(n) = &l.norm {
                out.push(n.gain.as_slice());
                out.push(n.shift.as_slice());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
            if let Some(n) = &mut l.norm {
                out.push(n.gain.as_mut_slice());
                out.push(n.shift.as_mut_slice());
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// True when every parameter has the same bit pattern.
    pub fn bit_eq(&self, other: &MlpWeights) -> bool {
        let (a, b) = (self.params(), other.params());
        a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| {
                x.len() == y.len() && x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    fn check_input(&self, op: &'static str, input: &Tensor) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(
                op,
                format!("{} input columns", self.input_dim()),
                input.cols(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input("mlp_forward", input)?;
        let mut cur: Option<Tensor> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let last = i + 1 == self.layers.len();
            cur = Some(layer_forward(layer, cur.as_ref().unwrap_or(input), last, false).0);
        }
        let cur = cur.expect("validated network has at least one layer");
        if !cur.is_finite() {
            return Err(Error::NonFinite("mlp_forward output"));
        }
        Ok(cur)
    }

    /// Forward pass returning the output and, if requested, the post-ReLU
    /// activation of hidden layer `tap`.
    pub fn forward_tap(&self, input: &Tensor, tap: Option<usize>) -> Result<(Tensor, Option<Tensor>)> {
        self.check_input("mlp_forward", input)?;
        if let Some(t) = tap {
            if t >= self.hidden_layers() {
                return Err(Error::InvalidArgument(format!(
                    "latent tap {t} but network has {} hidden layers",
                    self.hidden_layers()
                )));
            }
        }
        let mut cur: Option<Tensor> = None;
        let mut tapped = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let last = i + 1 == self.layers.len();
            let out = layer_forward(layer, cur.as_ref().unwrap_or(input), last, false).0;
            if tap == Some(i) {
                tapped = Some(out.clone());
            }
            cur = Some(out);
        }
        let cur = cur.expect("validated network has at least one layer");
        if !cur.is_finite() {
            return Err(Error::NonFinite("mlp_forward output"));
        }
        Ok((cur, tapped))
    }

    pub fn forward_pass(&self, input: &Tensor) -> Result<ForwardPass> {
        self.check_input("mlp_forward", input)?;
        let mut layers: Vec<LayerCache> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let last = i + 1 == self.layers.len();
            let prev = layers.last().map_or(input, |c| &c.out);
            let (out, norm) = layer_forward(layer, prev, last, true);
            layers.push(LayerCache { out, norm });
        }
        let pass = ForwardPass {
            input: input.clone(),
            layers,
        };
        if !pass.output().is_finite() {
            return Err(Error::NonFinite("mlp_forward output"));
        }
        Ok(pass)
    }

    /// Reverse-mode gradients of `Σ output_grad ⊙ output` with respect to every
    /// parameter and to the input.
    pub fn backward(&self, pass: &ForwardPass, output_grad: &Tensor) -> Result<(MlpWeights, Tensor)> {
        let rows = pass.input.rows();
        if output_grad.shape() != (rows, self.output_dim()) {
            return Err(Error::shape(
                "mlp_backward",
                format!("{rows}x{} output gradient", self.output_dim()),
                format!("{}x{}", output_grad.rows(), output_grad.cols()),
            ));
        }
        if pass.layers.len() != self.layers.len() {
            return Err(Error::shape(
                "mlp_backward",
                format!("{} cached layers", self.layers.len()),
                pass.layers.len(),
            ));
        }
        let mut grads = self.zeros_like();
        let mut upstream = output_grad.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let cache = &pass.layers[i];
            let below = if i == 0 { &pass.input } else { &pass.layers[i - 1].out };
            let last = i + 1 == self.layers.len();
            let g = &mut grads.layers[i];

            let dz = if last {
                upstream
            } else {
                let mut du = upstream;
                for (d, h) in du.data_mut().iter_mut().zip(cache.out.data()) {
                    if *h <= 0.0 {
                        *d = 0.0;
                    }
                }
                match (&layer.norm, &cache.norm, &mut g.norm) {
                    (Some(ln), Some((xhat, inv_std)), Some(gln)) => {
                        layer_norm_backward(ln, gln, xhat, inv_std, du)
                    }
                    _ => du,
                }
            };

            gemm::tn(layer.fan_in, rows, layer.fan_out, below.data(), dz.data(), &mut g.weight);
            for r in 0..rows {
                for (b, d) in g.bias.iter_mut().zip(dz.row(r)) {
                    *b += d;
                }
            }
            let mut dprev = Tensor::zeros(rows, layer.fan_in);
            gemm::nt(rows, layer.fan_out, layer.fan_in, dz.data(), &layer.weight, dprev.data_mut());
            upstream = dprev;
        }
        Ok((grads, upstream))
    }
}

/// One dense layer, then LayerNorm and ReLU unless `last`. With `keep_norm`
/// (training) the product goes through the packed GEMM and the normalized
/// pre-gain activations and inverse std are returned for the backward pass.
/// Inference uses the row-wise product so a row's output never depends on
/// the batch it was computed in.
fn layer_forward(layer: &Dense, input: &Tensor, last: bool, keep_norm: bool) -> (Tensor, Option<(Tensor, Vec<f32>)>) {
    let rows = input.rows();
    let mut z = Tensor::zeros(rows, layer.fan_out);
    if keep_norm {
        gemm::nn(rows, layer.fan_in, layer.fan_out, input.data(), &layer.weight, z.data_mut(), false);
    } else {
        gemm::rows_nn(rows, layer.fan_in, layer.fan_out, input.data(), &layer.weight, z.data_mut());
    }
    for r in 0..rows {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    if last {
        return (z, None);
    }
    let norm = layer.norm.as_ref().and_then(|ln| {
        let mut xhat = keep_norm.then(|| Tensor::zeros(rows, layer.fan_out));
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = z.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let inv = (1.0 / (var + LN_EPS as f64).sqrt()) as f32;
            let mean = mean as f32;
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            if let Some(x) = &mut xhat {
                x.row_mut(r).copy_from_slice(row);
            }
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * ln.gain[j] + ln.shift[j];
            }
            inv_std.push(inv);
        }
        xhat.map(|x| (x, inv_std))
    });
    for v in z.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    (z, norm)
}

fn layer_norm_backward(
    ln: &LayerNorm,
    gln: &mut LayerNorm,
    xhat: &Tensor,
    inv_std: &[f32],
    mut du: Tensor,
) -> Tensor {
    let n = du.cols();
    for r in 0..du.rows() {
        let xr = xhat.row(r);
        let dr = du.row_mut(r);
        let mut sum_d = 0.0f64;
        let mut sum_dx = 0.0f64;
        for j in 0..n {
            gln.gain[j] += dr[j] * xr[j];
            gln.shift[j] += dr[j];
            let dxhat = dr[j] * ln.gain[j];
            dr[j] = dxhat;
            sum_d += dxhat as f64;
            sum_dx += (dxhat * xr[j]) as f64;
        }
        let mean_d = (sum_d / n as f64) as f32;
        let mean_dx = (sum_dx / n as f64) as f32;
        let inv = inv_std[r];
        for j in 0..n {
            dr[j] = inv * (dr[j] - mean_d - xr[j] * mean_dx);
        }
    }
    du
}

pub fn mlp_forward(weights: &MlpWeights, input: &Tensor) -> Result<Tensor> {
    weights.forward(input)
}

/// Parameter gradients and input gradient of `Σ output_grad ⊙ mlp_forward(input)`.
pub fn mlp_backward(weights: &MlpWeights, input: &Tensor, output_grad: &Tensor) -> Result<(MlpWeights, Tensor)> {
    let pass = weights.forward_pass(input)?;
    weights.backward(&pass, output_grad)
}
