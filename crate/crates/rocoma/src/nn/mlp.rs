//! Small fully-connected networks over flat `f64` parameter vectors, with
//! exact reverse-mode gradients. No autodiff framework: the architectures
//! here are two hidden layers at most and the hand-rolled backward pass is
//! checked against finite differences in the test suite.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::math::{sigmoid, softplus};

/// Output-layer activation. Hidden layers are always softplus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Strictly positive outputs (concentration heads).
    Softplus,
    /// Raw affine outputs (value heads).
    Identity,
}

/// Number of parameters of a dense network with the given layer sizes.
pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

/// Dense feed-forward network. Parameters are stored flat, layer by layer,
/// weights (row-major, `[out][in]`) before biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    out_act: Activation,
    params: Vec<f64>,
}

/// Cached activations from a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Layer inputs: `acts[0]` is the network input, `acts[l]` the activated
    /// output of layer `l - 1`.
    acts: Vec<Vec<f64>>,
    /// Pre-activation values per layer.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace holds at least the input")
    }
}

impl Mlp {
    /// Zero-initialized network.
    pub fn new(sizes: Vec<usize>, out_act: Activation) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output layers");
        let n = param_count(&sizes);
        Mlp { sizes, out_act, params: vec![0.0; n] }
    }

    /// Uniform init on [-0.1, 0.1], the engine-wide convention.
    pub fn init_uniform(sizes: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut mlp = Mlp::new(sizes, Activation::Softplus);
        for p in &mut mlp.params {
            *p = rng.random_range(-0.1..0.1);
        }
        mlp
    }

    pub fn with_activation(mut self, out_act: Activation) -> Self {
        self.out_act = out_act;
        self
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn out_act(&self) -> Activation {
        self.out_act
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.params.len(), "parameter length mismatch");
        self.params.copy_from_slice(p);
    }

    fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    fn activate(&self, layer: usize, z: f64) -> f64 {
        if layer + 1 < self.layer_count() || self.out_act == Activation::Softplus {
            softplus(z)
        } else {
            z
        }
    }

    fn activate_grad(&self, layer: usize, z: f64) -> f64 {
        if layer + 1 < self.layer_count() || self.out_act == Activation::Softplus {
            sigmoid(z)
        } else {
            1.0
        }
    }

    /// Forward pass keeping the intermediate activations.
    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        assert_eq!(x.len(), self.input_len(), "input length mismatch");
        let mut acts = Vec::with_capacity(self.sizes.len());
        let mut pre = Vec::with_capacity(self.layer_count());
        acts.push(x.to_vec());
        let mut offset = 0;
        for l in 0..self.layer_count() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_out * n_in];
            let b = &self.params[offset + n_out * n_in..offset + n_out * (n_in + 1)];
            offset += n_out * (n_in + 1);
            let input = &acts[l];
            let mut z = vec![0.0; n_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut s = b[o];
                for (wi, xi) in row.iter().zip(input) {
                    s += wi * xi;
                }
                *zo = s;
            }
            let a = z.iter().map(|&v| self.activate(l, v)).collect();
            pre.push(z);
            acts.push(a);
        }
        Trace { acts, pre }
    }

    /// Forward pass returning only the output.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x).acts.pop().unwrap()
    }

    /// Scale the network's output by `c` exactly, by scaling the output
    /// layer's weights and biases. Requires an affine (Identity) output.
    pub fn scale_output_layer(&mut self, c: f64) {
        debug_assert_eq!(
            self.out_act,
            Activation::Identity,
            "output scaling needs an affine output layer"
        );
        let l = self.layer_count() - 1;
        let tail = self.sizes[l + 1] * (self.sizes[l] + 1);
        let start = self.params.len() - tail;
        for p in &mut self.params[start..] {
            *p *= c;
        }
    }

    /// Parameter gradient of `sum_k upstream[k] * output[k]` for the forward
    /// pass captured in `trace`. Returns a flat vector matching `params()`.
    pub fn backward(&self, trace: &Trace, upstream: &[f64]) -> Vec<f64> {
        assert_eq!(upstream.len(), self.output_len(), "upstream length mismatch");
        let mut grad = vec![0.0; self.params.len()];
        let mut g: Vec<f64> = upstream.to_vec();
        // Parameter offsets per layer, walked in reverse.
        let mut offsets = Vec::with_capacity(self.layer_count());
        let mut off = 0;
        for l in 0..self.layer_count() {
            offsets.push(off);
            off += self.sizes[l + 1] * (self.sizes[l] + 1);
        }
        for l in (0..self.layer_count()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let offset = offsets[l];
            let input = &trace.acts[l];
            let pre = &trace.pre[l];
            let mut dz = vec![0.0; n_out];
            for o in 0..n_out {
                dz[o] = g[o] * self.activate_grad(l, pre[o]);
            }
            let (gw, gb) = grad[offset..offset + n_out * (n_in + 1)].split_at_mut(n_out * n_in);
            for o in 0..n_out {
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for (gwi, xi) in row.iter_mut().zip(input) {
                    *gwi += dz[o] * xi;
                }
                gb[o] += dz[o];
            }
            if l > 0 {
                let w = &self.params[offset..offset + n_out * n_in];
                let mut gnext = vec![0.0; n_in];
                for o in 0..n_out {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    for (gi, wi) in gnext.iter_mut().zip(row) {
                        *gi += dz[o] * wi;
                    }
                }
                g = gnext;
            }
        }
        grad
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    /// One descent step in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{stream, stream_rng};

    fn numeric_grad(mlp: &Mlp, x: &[f64], upstream: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; mlp.params().len()];
        let mut probe = mlp.clone();
        for i in 0..g.len() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let up: f64 = probe.forward(x).iter().zip(upstream).map(|(o, u)| o * u).sum();
            probe.params_mut()[i] = orig - h;
            let dn: f64 = probe.forward(x).iter().zip(upstream).map(|(o, u)| o * u).sum();
            probe.params_mut()[i] = orig;
            g[i] = (up - dn) / (2.0 * h);
        }
        g
    }

    #[test]
    fn zero_params_give_softplus_of_zero() {
        let mlp = Mlp::new(vec![3, 4, 2], Activation::Softplus);
        let out = mlp.forward(&[0.3, -0.2, 0.9]);
        for o in out {
            // softplus(0) feeds softplus(0 weights) = softplus(0) again.
            assert!((o - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let valnet = Mlp::new(vec![3, 4, 1], Activation::Identity);
        assert_eq!(valnet.forward(&[1.0, 2.0, 3.0])[0], 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream_rng(11, stream::INIT_PARAMS, 0);
        for (case, act) in [(0usize, Activation::Softplus), (1, Activation::Identity)] {
            for rep in 0..10 {
                let mut rng2 = stream_rng(11, stream::INIT_PARAMS, (case * 100 + rep) as u64);
                let mlp = Mlp::init_uniform(vec![5, 8, 8, 3], &mut rng2).with_activation(act);
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let upstream: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let trace = mlp.forward_trace(&x);
                let analytic = mlp.backward(&trace, &upstream);
                let numeric = numeric_grad(&mlp, &x, &upstream, 1e-5);
                for (a, n) in analytic.iter().zip(&numeric) {
                    let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                    assert!(rel < 1e-4, "gradient mismatch: analytic {a}, numeric {n}");
                }
            }
        }
    }

    #[test]
    fn no_overflow_for_large_preactivations() {
        let mut mlp = Mlp::new(vec![1, 2, 1], Activation::Softplus);
        // First layer weights 50, biases 0; second layer passes through.
        let p = mlp.params_mut();
        p[0] = 50.0;
        p[1] = 50.0;
        for q in p[4..6].iter_mut() {
            *q = 1.0;
        }
        let out = mlp.forward(&[1.0]);
        assert!(out[0].is_finite());
        let trace = mlp.forward_trace(&[1.0]);
        let grad = mlp.backward(&trace, &[1.0]);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = vec![5.0, -3.0];
        let mut opt = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let grad: Vec<f64> = params.iter().map(|&p| 2.0 * p).collect();
            opt.step(&mut params, &grad);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-3), "Adam failed to reach minimum: {params:?}");
    }

    #[test]
    fn param_count_matches_layout() {
        assert_eq!(param_count(&[9, 32, 32, 10]), 9 * 32 + 32 + 32 * 32 + 32 + 32 * 10 + 10);
        let mlp = Mlp::new(vec![9, 32, 32, 10], Activation::Softplus);
        assert_eq!(mlp.params().len(), param_count(&[9, 32, 32, 10]));
    }
}
