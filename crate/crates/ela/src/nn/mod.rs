//! Minimal dense-network substrate shared by the perception net, the sign
//! classifiers, and the policy/value nets.
//!
//! Everything is `f64`, flat `Vec` storage, no autograd: each consumer wires
//! its own backward pass out of the layer primitives here.

mod checkpoint;
mod gradcheck;
mod loss;
mod optim;

pub use checkpoint::{
    describe_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{gaussian_logprob_entropy, softmax, softmax_xent};
pub use optim::OptimState;

use crate::error::{ElaError, Result};
use crate::rng::SeedNode;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation z.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            t => Err(ElaError::Format {
                path: String::new(),
                reason: format!("unknown activation tag {t}"),
            }),
        }
    }
}

/// One dense layer: `y = act(W x + b)`, weights row-major `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

/// A stack of dense layers with chained dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Per-layer gradients matching a `DenseNet`'s parameter layout.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Forward-pass cache: pre-activations and post-activations per layer.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl DenseNet {
    /// Build a net from layer sizes, e.g. `[4, 64, 64, 5]`, one activation per
    /// weight layer. He-scaled init for relu layers, Xavier for tanh/identity.
    pub fn new(sizes: &[usize], activations: &[Activation], seed: SeedNode) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(ElaError::Argument(format!(
                "need n>=2 sizes and n-1 activations, got {} sizes / {} activations",
                sizes.len(),
                activations.len()
            )));
        }
        let mut layers = Vec::with_capacity(activations.len());
        for (i, &act) in activations.iter().enumerate() {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let mut rng = seed.child_idx(i as u64).rng();
            let std = match act {
                Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                _ => (2.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let weights = (0..fan_in * fan_out)
                .map(|_| {
                    // Box-Muller from two uniforms keeps us off rand_distr.
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            layers.push(Layer {
                in_dim: fan_in,
                out_dim: fan_out,
                weights,
                biases: vec![0.0; fan_out],
                activation: act,
            });
        }
        Ok(Self { layers })
    }

    pub fn zeros(sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        let mut net = Self::new(sizes, activations, SeedNode::new(0))?;
        for layer in &mut net.layers {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        Ok(net)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Zero the final layer (weights and biases). Used for constant-output
    /// heads at init.
    pub fn zero_last_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.biases.iter_mut().for_each(|b| *b = 0.0);
    }

    /// Overwrite the output-layer biases (e.g. to pick the initial operating
    /// point of a decoded head).
    pub fn set_output_bias(&mut self, biases: &[f64]) -> Result<()> {
        let last = self.layers.last_mut().unwrap();
        if biases.len() != last.biases.len() {
            return Err(ElaError::Shape(format!(
                "output bias length {} != {}",
                biases.len(),
                last.biases.len()
            )));
        }
        last.biases.copy_from_slice(biases);
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.in_dim() {
            return Err(ElaError::Shape(format!(
                "input length {} != net in-dim {}",
                input.len(),
                self.in_dim()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(ElaError::Numeric("non-finite network input".into()));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for layer in &self.layers {
            let mut z = layer.biases.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut acc = 0.0;
                for (w, xi) in row.iter().zip(x.iter()) {
                    acc += w * xi;
                }
                *zo += acc;
            }
            let y: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            x = y.clone();
            post.push(y);
        }
        Ok((
            x,
            ForwardCache {
                input: input.to_vec(),
                pre,
                post,
            },
        ))
    }

    /// Backprop `output_grad` through the cached forward pass. Returns the
    /// parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        if output_grad.len() != self.out_dim() {
            return Err(ElaError::Shape(format!(
                "output grad length {} != net out-dim {}",
                output_grad.len(),
                self.out_dim()
            )));
        }
        let mut grads = NetGrads {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: self.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        };
        let mut upstream = output_grad.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[li];
            let x = if li == 0 { &cache.input } else { &cache.post[li - 1] };
            // dL/dz = dL/dy * act'(z)
            let dz: Vec<f64> = upstream
                .iter()
                .zip(z.iter())
                .map(|(g, &zv)| g * layer.activation.derivative(zv))
                .collect();
            let gw = &mut grads.weights[li];
            for (o, &dzo) in dz.iter().enumerate() {
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (rw, xi) in row.iter_mut().zip(x.iter()) {
                    *rw += dzo * xi;
                }
            }
            grads.biases[li].copy_from_slice(&dz);
            let mut dx = vec![0.0; layer.in_dim];
            for (o, &dzo) in dz.iter().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (dxi, w) in dx.iter_mut().zip(row.iter()) {
                    *dxi += dzo * w;
                }
            }
            upstream = dx;
        }
        Ok((grads, upstream))
    }

    /// Like `backward`, but adds the parameter gradient into `acc` instead
    /// of allocating a fresh `NetGrads`. Batched training loops reuse one
    /// accumulator per minibatch, which matters on large input layers where
    /// a per-sample gradient buffer dominates the memory traffic.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        acc: &mut NetGrads,
    ) -> Result<Vec<f64>> {
        if output_grad.len() != self.out_dim() {
            return Err(ElaError::Shape(format!(
                "output grad length {} != net out-dim {}",
                output_grad.len(),
                self.out_dim()
            )));
        }
        if acc.weights.len() != self.layers.len() {
            return Err(ElaError::Shape("gradient accumulator layer mismatch".into()));
        }
        let mut upstream = output_grad.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[li];
            let x = if li == 0 { &cache.input } else { &cache.post[li - 1] };
            let dz: Vec<f64> = upstream
                .iter()
                .zip(z.iter())
                .map(|(g, &zv)| g * layer.activation.derivative(zv))
                .collect();
            let gw = &mut acc.weights[li];
            for (o, &dzo) in dz.iter().enumerate() {
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (rw, xi) in row.iter_mut().zip(x.iter()) {
                    *rw += dzo * xi;
                }
            }
            for (b, &d) in acc.biases[li].iter_mut().zip(dz.iter()) {
                *b += d;
            }
            let mut dx = vec![0.0; layer.in_dim];
            for (o, &dzo) in dz.iter().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (dxi, w) in dx.iter_mut().zip(row.iter()) {
                    *dxi += dzo * w;
                }
            }
            upstream = dx;
        }
        Ok(upstream)
    }

    /// Flatten all parameters into one vector (layer order, weights then biases).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.biases);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(ElaError::Shape(format!(
                "flat parameter length {} != param count {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let wlen = layer.weights.len();
            layer.weights.copy_from_slice(&flat[off..off + wlen]);
            off += wlen;
            let blen = layer.biases.len();
            layer.biases.copy_from_slice(&flat[off..off + blen]);
            off += blen;
        }
        Ok(())
    }
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &NetGrads) {
        for (a, b) in self.weights.iter_mut().zip(other.weights.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(other.biases.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single_layer(w: Vec<f64>, b: Vec<f64>, in_dim: usize, act: Activation) -> DenseNet {
        let out_dim = b.len();
        DenseNet {
            layers: vec![Layer {
                in_dim,
                out_dim,
                weights: w,
                biases: b,
                activation: act,
            }],
        }
    }

    #[test]
    fn forward_identity_single_layer() {
        let net = single_layer(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, Activation::Identity);
        let y = net.forward(&[3.0, -2.0]).unwrap();
        assert_eq!(y, vec![3.0, -2.0]);
    }

    #[test]
    fn forward_relu_clamps() {
        let net = single_layer(vec![1.0, 1.0], vec![0.5], 2, Activation::Relu);
        let y = net.forward(&[2.0, -5.0]).unwrap();
        assert_eq!(y, vec![0.0]);
    }

    #[test]
    fn forward_matches_scalar_loop_oracle() {
        let net = DenseNet::new(
            &[3, 4, 2],
            &[Activation::Tanh, Activation::Identity],
            SeedNode::new(42),
        )
        .unwrap();
        let input = [1.0, 1.0, 1.0];
        let y = net.forward(&input).unwrap();

        // Straight-line recomputation, no shared helpers.
        let l0 = &net.layers[0];
        let mut h = vec![0.0; 4];
        for o in 0..4 {
            let mut z = l0.biases[o];
            for i in 0..3 {
                z += l0.weights[o * 3 + i] * input[i];
            }
            h[o] = z.tanh();
        }
        let l1 = &net.layers[1];
        for o in 0..2 {
            let mut z = l1.biases[o];
            for i in 0..4 {
                z += l1.weights[o * 4 + i] * h[i];
            }
            assert_relative_eq!(y[o], z, max_relative = 1e-14);
        }
    }

    #[test]
    fn forward_shape_error() {
        let net = single_layer(vec![1.0], vec![0.0], 1, Activation::Identity);
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_init_identity_returns_bias_chain() {
        let mut net = DenseNet::zeros(&[3, 2, 2], &[Activation::Identity, Activation::Identity]).unwrap();
        net.layers[0].biases = vec![1.0, 2.0];
        net.layers[1].biases = vec![0.5, -0.5];
        // zero weights: output = b1 (b0 contributes 0 through zero W1)
        let y = net.forward(&[9.0, 9.0, 9.0]).unwrap();
        assert_eq!(y, vec![0.5, -0.5]);
    }

    #[test]
    fn backward_scalar_chain_rule() {
        let net = single_layer(vec![2.0], vec![0.0], 1, Activation::Identity);
        let (_, cache) = net.forward_cached(&[3.0]).unwrap();
        let (grads, dx) = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(grads.weights[0], vec![3.0]);
        assert_eq!(dx, vec![2.0]);
    }

    #[test]
    fn backward_relu_dead_region() {
        let net = single_layer(vec![1.0], vec![-1.0], 1, Activation::Relu);
        let (_, cache) = net.forward_cached(&[0.0]).unwrap();
        let (grads, dx) = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(grads.weights[0], vec![0.0]);
        assert_eq!(grads.biases[0], vec![0.0]);
        assert_eq!(dx, vec![0.0]);
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = DenseNet::new(&[4, 8, 3], &[Activation::Relu, Activation::Identity], SeedNode::new(7)).unwrap();
        let b = DenseNet::new(&[4, 8, 3], &[Activation::Relu, Activation::Identity], SeedNode::new(7)).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
    }

    #[test]
    fn params_flat_round_trip() {
        let mut net =
            DenseNet::new(&[4, 8, 3], &[Activation::Relu, Activation::Identity], SeedNode::new(7)).unwrap();
        let flat = net.params_flat();
        let mut perturbed = flat.clone();
        perturbed[5] += 1.0;
        net.set_params_flat(&perturbed).unwrap();
        assert_eq!(net.params_flat(), perturbed);
    }
}
