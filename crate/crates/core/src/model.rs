//! Feed-forward ReLU classifier with a single sigmoid output and manual
//! backpropagation.
//!
//! Parameters live in one flat [`Vec64`] laid out layer by layer; each layer
//! stores its weight matrix (row-major, `out x in`) followed by its biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{RngState, Vec64};

/// Probability clamp used by the cross-entropy loss.
pub const PROB_EPS: f64 = 1e-12;

pub const DEFAULT_HIDDEN: [usize; 4] = [32, 32, 32, 32];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_default_hidden(input_dim: usize) -> Result<Self> {
        Self::new(input_dim, DEFAULT_HIDDEN.to_vec())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "hidden_dims must be nonempty with every width >= 1".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend(&self.hidden_dims);
        dims.push(1);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, rng: RngState) -> Vec64 {
        let mut r = rng.rng();
        let mut out = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_shapes() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                out.push(r.random_range(-bound..bound));
            }
            out.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Vec64::from_vec_unchecked(out)
    }

    fn check_params(&self, params: &Vec64) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        Ok(())
    }
}

/// One dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major `fan_out x fan_in`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Structured view of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn unflatten(spec: &MlpSpec, flat: &Vec64) -> Result<Self> {
        spec.check_params(flat)?;
        let data = flat.as_slice();
        let mut offset = 0;
        let mut layers = Vec::new();
        for (fan_in, fan_out) in spec.layer_shapes() {
            let weights = data[offset..offset + fan_in * fan_out].to_vec();
            offset += fan_in * fan_out;
            let biases = data[offset..offset + fan_out].to_vec();
            offset += fan_out;
            layers.push(Layer { weights, biases });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn flatten(&self) -> Vec64 {
        let mut out = Vec::with_capacity(self.spec.param_count());
        for layer in &self.layers {
            out.extend(&layer.weights);
            out.extend(&layer.biases);
        }
        Vec64::from_vec_unchecked(out)
    }
}

/// One record `d = (s, x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    /// One group index per sensitive attribute.
    pub s: Vec<usize>,
    pub y: u8,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of one prediction, with the probability clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce(p: f64, y: u8) -> f64 {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y == 1 {
        -pc.ln()
    } else {
        -(1.0 - pc).ln()
    }
}

/// d bce / d logit. Zero where the clamp is active.
pub fn bce_dlogit(p: f64, y: u8) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        0.0
    } else {
        p - f64::from(y)
    }
}

fn check_input(spec: &MlpSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(Error::LengthMismatch {
            expected: spec.input_dim,
            actual: x.len(),
        });
    }
    Ok(())
}

fn logit(spec: &MlpSpec, params: &[f64], x: &[f64]) -> f64 {
    let mut act = x.to_vec();
    let mut offset = 0;
    let shapes = spec.layer_shapes();
    let last = shapes.len() - 1;
    for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let mut next = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let z = b[o] + row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>();
            next.push(if l == last { z } else { z.max(0.0) });
        }
        act = next;
    }
    act[0]
}

/// Predicted probability `sigmoid(logit)` for one feature vector.
pub fn forward(spec: &MlpSpec, params: &Vec64, x: &[f64]) -> Result<f64> {
    spec.check_params(params)?;
    check_input(spec, x)?;
    let p = sigmoid(logit(spec, params.as_slice(), x));
    if !p.is_finite() {
        return Err(Error::NonFinite("forward".into()));
    }
    Ok(p)
}

/// Cached forward pass over a batch, reusable for several backward passes.
#[derive(Debug, Clone)]
pub struct BatchForward<'a> {
    spec: &'a MlpSpec,
    params: &'a Vec64,
    /// Input activations of every layer: `acts[l]` is `n x fan_in(l)`.
    acts: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl<'a> BatchForward<'a> {
    pub fn run(spec: &'a MlpSpec, params: &'a Vec64, batch: &[Sample]) -> Result<Self> {
        spec.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let n = batch.len();
        let mut input = Vec::with_capacity(n * spec.input_dim);
        for s in batch {
            check_input(spec, &s.x)?;
            input.extend(&s.x);
        }
        let p = params.as_slice();
        let shapes = spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut acts = vec![input];
        let mut offset = 0;
        let mut logits = Vec::new();
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &p[offset..offset + fan_in * fan_out];
            let b = &p[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let prev = &acts[l];
            let mut next = vec![0.0; n * fan_out];
            for i in 0..n {
                let a = &prev[i * fan_in..(i + 1) * fan_in];
                for o in 0..fan_out {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let z = b[o] + row.iter().zip(a).map(|(u, v)| u * v).sum::<f64>();
                    next[i * fan_out + o] = if l == last { z } else { z.max(0.0) };
                }
            }
            if l == last {
                logits = next;
            } else {
                acts.push(next);
            }
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("forward logits".into()));
        }
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(Self {
            spec,
            params,
            acts,
            logits,
            probs,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Per-sample cross-entropy losses.
    pub fn losses(&self, batch: &[Sample]) -> Vec<f64> {
        self.probs.iter().zip(batch).map(|(&p, s)| bce(p, s.y)).collect()
    }

    /// `Σ_i dlogit[i] · ∂logit_i/∂w`.
    pub fn backward(&self, dlogit: &[f64]) -> Result<Vec64> {
        let n = self.len();
        if dlogit.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: dlogit.len(),
            });
        }
        let p = self.params.as_slice();
        let shapes = self.spec.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for &(fan_in, fan_out) in &shapes {
            offsets.push(off);
            off += fan_in * fan_out + fan_out;
        }
        let mut grad = vec![0.0; off];
        // delta holds d/dz for the current layer's outputs, n x fan_out.
        let mut delta: Vec<f64> = dlogit.to_vec();
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let w_off = offsets[l];
            let b_off = w_off + fan_in * fan_out;
            let input = &self.acts[l];
            for i in 0..n {
                let a = &input[i * fan_in..(i + 1) * fan_in];
                for o in 0..fan_out {
                    let d = delta[i * fan_out + o];
                    if d == 0.0 {
                        continue;
                    }
                    let g = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    for (gj, aj) in g.iter_mut().zip(a) {
                        *gj += d * aj;
                    }
                    grad[b_off + o] += d;
                }
            }
            if l == 0 {
                break;
            }
            let w = &p[w_off..w_off + fan_in * fan_out];
            let mut prev = vec![0.0; n * fan_in];
            for i in 0..n {
                let a = &input[i * fan_in..(i + 1) * fan_in];
                let pd = &mut prev[i * fan_in..(i + 1) * fan_in];
                for o in 0..fan_out {
                    let d = delta[i * fan_out + o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    for (pj, wj) in pd.iter_mut().zip(row) {
                        *pj += d * wj;
                    }
                }
                // ReLU mask: the input of layer l is the activation of layer l-1.
                for (pj, aj) in pd.iter_mut().zip(a) {
                    if *aj <= 0.0 {
                        *pj = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Vec64::new(grad).map_err(|_| Error::NonFinite("backward".into()))
    }
}

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_grad(spec: &MlpSpec, params: &Vec64, batch: &[Sample]) -> Result<(f64, Vec64)> {
    let fwd = BatchForward::run(spec, params, batch)?;
    let n = batch.len() as f64;
    let loss = fwd.losses(batch).iter().sum::<f64>() / n;
    let dlogit: Vec<f64> = fwd
        .probs
        .iter()
        .zip(batch)
        .map(|(&p, s)| bce_dlogit(p, s.y) / n)
        .collect();
    let grad = fwd.backward(&dlogit)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, grad))
}

/// Mean predicted probability over the batch and its gradient.
pub fn prob_and_grad(spec: &MlpSpec, params: &Vec64, batch: &[Sample]) -> Result<(f64, Vec64)> {
    let fwd = BatchForward::run(spec, params, batch)?;
    let n = batch.len() as f64;
    let mean = fwd.probs.iter().sum::<f64>() / n;
    let dlogit: Vec<f64> = fwd.probs.iter().map(|&p| p * (1.0 - p) / n).collect();
    Ok((mean, fwd.backward(&dlogit)?))
}

/// Probabilities for every sample, without gradients.
pub fn predict_probs(spec: &MlpSpec, params: &Vec64, samples: &[Sample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    Ok(BatchForward::run(spec, params, samples)?.probs)
}
