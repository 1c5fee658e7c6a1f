//! A small fully connected network with manual backpropagation.
//!
//! Parameters of all layers live in one flat vector so optimizers and
//! finite-difference checks can treat the model as a point in R^n. Layer `l`
//! stores its `outputs x inputs` weight matrix row-major, followed by its bias.
//! Hidden layers use ReLU; the output layer is linear (logits).

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded during a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the post-activation output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has at least the input")
    }
}

impl Mlp {
    /// Xavier-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut R,
    ) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let n = param_count(&sizes);
        let mut params = Vec::with_capacity(n);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-limit..limit));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Mlp { sizes, params }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .take(layer)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Sets the last layer's weights and biases to zero, making every logit 0.
    pub fn zero_output_layer(&mut self) {
        let last = self.n_layers() - 1;
        let off = self.layer_offset(last);
        let len = self.sizes[last] * self.sizes[last + 1] + self.sizes[last + 1];
        self.params[off..off + len].fill(0.0);
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut cur = x.to_vec();
        let mut off = 0;
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (nin, nout) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + nin * nout];
            let b = &self.params[off + nin * nout..off + nin * nout + nout];
            let mut next = b.to_vec();
            for (o, z) in next.iter_mut().enumerate() {
                let row = &w[o * nin..(o + 1) * nin];
                *z += dot(row, &cur);
                if l < last && *z < 0.0 {
                    *z = 0.0;
                }
            }
            off += nin * nout + nout;
            cur = next;
        }
        cur
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_vec());
        let mut off = 0;
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (nin, nout) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + nin * nout];
            let b = &self.params[off + nin * nout..off + nin * nout + nout];
            let cur = &acts[l];
            let next: Vec<f64> = (0..nout)
                .map(|o| {
                    let z = b[o] + dot(&w[o * nin..(o + 1) * nin], cur);
                    if l < last {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            off += nin * nout + nout;
            acts.push(next);
        }
        Trace { acts }
    }

    /// Accumulates into `grad` the parameter gradient of a scalar loss whose
    /// derivative with respect to the network output is `d_out`.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let mut delta = d_out.to_vec();
        let mut end = self.params.len();
        for l in (0..self.n_layers()).rev() {
            let (nin, nout) = (self.sizes[l], self.sizes[l + 1]);
            let off = end - (nin * nout + nout);
            let input = &trace.acts[l];
            for o in 0..nout {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grad[off + o * nin..off + (o + 1) * nin];
                for (g, &a) in gw.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[off + nin * nout + o] += d;
            }
            if l > 0 {
                let w = &self.params[off..off + nin * nout];
                let mut prev = vec![0.0; nin];
                for o in 0..nout {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, &wv) in prev.iter_mut().zip(&w[o * nin..(o + 1) * nin]) {
                        *p += d * wv;
                    }
                }
                // ReLU derivative, taken from the stored post-activation.
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
            end = off;
        }
    }

    pub fn to_record(&self) -> MlpRecord {
        let mut layers = Vec::with_capacity(self.n_layers());
        let mut off = 0;
        for l in 0..self.n_layers() {
            let (nin, nout) = (self.sizes[l], self.sizes[l + 1]);
            layers.push(LayerRecord {
                inputs: nin,
                outputs: nout,
                weights: self.params[off..off + nin * nout].to_vec(),
                bias: self.params[off + nin * nout..off + nin * nout + nout].to_vec(),
            });
            off += nin * nout + nout;
        }
        MlpRecord { layers }
    }

    pub fn from_record(rec: &MlpRecord) -> Result<Self, String> {
        if rec.layers.is_empty() {
            return Err("network has no layers".into());
        }
        let mut sizes = vec![rec.layers[0].inputs];
        let mut params = Vec::new();
        for (i, l) in rec.layers.iter().enumerate() {
            if l.inputs != *sizes.last().unwrap() {
                return Err(format!(
                    "layer {i} expects {} inputs, previous has {}",
                    l.inputs,
                    sizes.last().unwrap()
                ));
            }
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(format!("layer {i} has inconsistent shapes"));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(format!("layer {i} has non-finite parameters"));
            }
            sizes.push(l.outputs);
            params.extend_from_slice(&l.weights);
            params.extend_from_slice(&l.bias);
        }
        Ok(Mlp { sizes, params })
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Serialized layer: row-major `outputs x inputs` weights plus bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpRecord {
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// First-order optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let state = if kind == OptimizerKind::Adam {
            n_params
        } else {
            0
        };
        Optimizer {
            kind,
            lr,
            m: vec![0.0; state],
            v: vec![0.0; state],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
                    params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}
