//! Minimal fully connected decoder with explicit forward/backward passes,
//! plus the Adam optimizer and EMA shadow weights used for inference.
//!
//! Weights are stored in a caller-owned flat `f64` slice so the network,
//! the grid features, the optimizer moments, and the EMA copy can all
//! share one parameter layout. Within a layer, weights are stored
//! input-major (`w[j * out + i]` connects input j to output i), which
//! turns the matrix-vector product into an axpy loop over outputs.

use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LEARNING_RATE: f64 = 0.005;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;

/// Architecture and parameter layout of the decoder MLP. ReLU between
/// layers, identity on the last layer; the mixture activations live in
/// `vmf::activate_params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderNet {
    dims: Vec<(usize, usize)>,
    weight_offsets: Vec<usize>,
    bias_offsets: Vec<usize>,
    param_count: usize,
}

/// Per-layer activations cached by `forward` for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `post[i]` is the post-activation output of layer i; `post.last()`
    /// is the raw network output.
    post: Vec<Vec<f64>>,
    input: Vec<f64>,
}

impl DecoderNet {
    /// Standard decoder: `hidden_layers` hidden affine layers of width
    /// `width` plus the output layer ("3 linear layers of width 64" is
    /// `new(input, 64, 2, output)`).
    pub fn new(input_dim: usize, width: usize, hidden_layers: usize, output_dim: usize) -> DecoderNet {
        let mut dims = Vec::new();
        let mut prev = input_dim;
        for _ in 0..hidden_layers {
            dims.push((prev, width));
            prev = width;
        }
        dims.push((prev, output_dim));
        Self::from_dims(dims)
    }

    pub fn from_dims(dims: Vec<(usize, usize)>) -> DecoderNet {
        let mut weight_offsets = Vec::with_capacity(dims.len());
        let mut bias_offsets = Vec::with_capacity(dims.len());
        let mut off = 0usize;
        for &(i, o) in &dims {
            weight_offsets.push(off);
            off += i * o;
            bias_offsets.push(off);
            off += o;
        }
        DecoderNet {
            dims,
            weight_offsets,
            bias_offsets,
            param_count: off,
        }
    }

    pub fn dims(&self) -> &[(usize, usize)] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0].0
    }

    pub fn output_dim(&self) -> usize {
        self.dims.last().unwrap().1
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn weight_slice<'a>(&self, layer: usize, params: &'a [f64]) -> &'a [f64] {
        let (i, o) = self.dims[layer];
        &params[self.weight_offsets[layer]..self.weight_offsets[layer] + i * o]
    }

    pub fn bias_slice<'a>(&self, layer: usize, params: &'a [f64]) -> &'a [f64] {
        let o = self.dims[layer].1;
        &params[self.bias_offsets[layer]..self.bias_offsets[layer] + o]
    }

    pub fn weight_range(&self, layer: usize) -> std::ops::Range<usize> {
        let (i, o) = self.dims[layer];
        self.weight_offsets[layer]..self.weight_offsets[layer] + i * o
    }

    pub fn bias_range(&self, layer: usize) -> std::ops::Range<usize> {
        let o = self.dims[layer].1;
        self.bias_offsets[layer]..self.bias_offsets[layer] + o
    }

    /// Uniform ±√(6 / (fan_in + fan_out)) weight init, zero biases.
    pub fn init_params(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count];
        for (layer, &(i, o)) in self.dims.iter().enumerate() {
            let bound = (6.0 / (i + o) as f64).sqrt();
            let w = &mut params[self.weight_offsets[layer]..self.weight_offsets[layer] + i * o];
            for v in w {
                *v = rng.gen_range(-bound..bound);
            }
        }
        params
    }

    /// Affine-ReLU chain; writes the raw output into the cache and
    /// returns it. Rejects non-finite input.
    pub fn forward<'a>(
        &self,
        params: &[f64],
        input: &[f64],
        cache: &'a mut ForwardCache,
    ) -> &'a [f64] {
        assert_eq!(input.len(), self.input_dim(), "input width mismatch");
        assert!(
            input.iter().all(|v| v.is_finite()),
            "non-finite network input"
        );
        cache.input.clear();
        cache.input.extend_from_slice(input);
        cache.post.resize(self.dims.len(), Vec::new());
        let layers = self.dims.len();
        for layer in 0..layers {
            let (in_dim, out_dim) = self.dims[layer];
            let w = &params[self.weight_offsets[layer]..];
            let b = &params[self.bias_offsets[layer]..self.bias_offsets[layer] + out_dim];
            // Split borrow: read previous activation, write current.
            let (done, rest) = cache.post.split_at_mut(layer);
            let x: &[f64] = if layer == 0 {
                &cache.input
            } else {
                &done[layer - 1]
            };
            let out = &mut rest[0];
            out.clear();
            out.extend_from_slice(b);
            for j in 0..in_dim {
                let xj = x[j];
                if xj == 0.0 {
                    continue;
                }
                let row = &w[j * out_dim..(j + 1) * out_dim];
                for (o, wv) in out.iter_mut().zip(row) {
                    *o += xj * wv;
                }
            }
            if layer + 1 < layers {
                for o in out.iter_mut() {
                    if *o < 0.0 {
                        *o = 0.0;
                    }
                }
            }
        }
        cache.post.last().unwrap()
    }

    /// Reverse-mode gradients for the forward pass cached in `cache`.
    /// Accumulates parameter gradients into `param_grads` (same layout as
    /// `params`) and writes the gradient w.r.t. the input into
    /// `input_grad`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        upstream: &[f64],
        param_grads: &mut [f64],
        input_grad: &mut [f64],
    ) {
        assert_eq!(upstream.len(), self.output_dim());
        assert_eq!(param_grads.len(), self.param_count);
        assert_eq!(input_grad.len(), self.input_dim());
        let layers = self.dims.len();
        let mut delta = upstream.to_vec();
        for layer in (0..layers).rev() {
            let (in_dim, out_dim) = self.dims[layer];
            let x: &[f64] = if layer == 0 {
                &cache.input
            } else {
                &cache.post[layer - 1]
            };
            // ReLU gate on non-final layers: dead units pass no gradient.
            if layer + 1 < layers {
                let act = &cache.post[layer];
                for (d, a) in delta.iter_mut().zip(act) {
                    if *a == 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let wg = &mut param_grads[self.weight_offsets[layer]..];
            for j in 0..in_dim {
                let xj = x[j];
                if xj != 0.0 {
                    let row = &mut wg[j * out_dim..(j + 1) * out_dim];
                    for (g, d) in row.iter_mut().zip(&delta) {
                        *g += xj * d;
                    }
                }
            }
            let bg = &mut param_grads[self.bias_offsets[layer]..self.bias_offsets[layer] + out_dim];
            for (g, d) in bg.iter_mut().zip(&delta) {
                *g += d;
            }
            // δ_prev = Wᵀ δ
            let w = &params[self.weight_offsets[layer]..];
            let mut prev = vec![0.0; in_dim];
            for (j, p) in prev.iter_mut().enumerate() {
                let row = &w[j * out_dim..(j + 1) * out_dim];
                *p = row.iter().zip(&delta).map(|(wv, d)| wv * d).sum();
            }
            if layer == 0 {
                input_grad.copy_from_slice(&prev);
            } else {
                delta = prev;
            }
        }
    }
}

/// Bias-corrected Adam over a flat parameter vector. One state covers the
/// whole vector; dense ranges and sparse index sets can be stepped
/// independently within the same time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(param_count: usize, learning_rate: f64) -> AdamState {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            learning_rate,
        }
    }

    /// Advances the shared step counter; call once per optimization step
    /// before `step_dense` / `step_sparse`.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    fn correction(&self) -> (f64, f64) {
        let t = self.t as i32;
        (
            1.0 - ADAM_BETA1.powi(t),
            1.0 - ADAM_BETA2.powi(t),
        )
    }

    /// Updates `params[range]` from `grads` (same indexing as `params`).
    /// Non-finite gradient entries are treated as zero; returns how many
    /// were dropped.
    pub fn step_dense(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        range: std::ops::Range<usize>,
    ) -> usize {
        let (c1, c2) = self.correction();
        let mut dropped = 0usize;
        for i in range {
            let mut g = grads[i];
            if !g.is_finite() {
                g = 0.0;
                dropped += 1;
            }
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        dropped
    }

    /// Sparse variant: only the listed indices are touched.
    pub fn step_sparse(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        indices: &[u32],
    ) -> usize {
        let (c1, c2) = self.correction();
        let mut dropped = 0usize;
        for &i in indices {
            let i = i as usize;
            let mut g = grads[i];
            if !g.is_finite() {
                g = 0.0;
                dropped += 1;
            }
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        dropped
    }
}

/// ema ← decay · ema + (1 − decay) · params
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) {
    debug_assert_eq!(ema.len(), params.len());
    debug_assert!((0.0..1.0).contains(&decay));
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_zero_params_gives_zero() {
        let net = DecoderNet::new(4, 8, 2, 3);
        let params = vec![0.0; net.param_count()];
        let mut cache = ForwardCache::default();
        let out = net.forward(&params, &[1.0, -2.0, 0.5, 3.0], &mut cache);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_identity_passthrough() {
        // Single layer wired as the identity.
        let net = DecoderNet::from_dims(vec![(3, 3)]);
        let mut params = vec![0.0; net.param_count()];
        for j in 0..3 {
            params[j * 3 + j] = 1.0;
        }
        let mut cache = ForwardCache::default();
        let out = net.forward(&params, &[0.3, -0.7, 2.0], &mut cache);
        assert_eq!(out, &[0.3, -0.7, 2.0]);
    }

    /// Independent dense-algebra oracle: naive per-output dot products.
    fn forward_oracle(net: &DecoderNet, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        for (layer, &(_, out_dim)) in net.dims().iter().enumerate() {
            let w = net.weight_slice(layer, params);
            let b = net.bias_slice(layer, params);
            let mut y = vec![0.0; out_dim];
            for (i, yi) in y.iter_mut().enumerate() {
                let mut acc = b[i];
                for (j, xj) in x.iter().enumerate() {
                    acc += w[j * out_dim + i] * xj;
                }
                *yi = acc;
            }
            if layer + 1 < net.dims().len() {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            }
            x = y;
        }
        x
    }

    #[test]
    fn forward_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DecoderNet::new(6, 16, 2, 5);
        let params = net.init_params(&mut rng);
        for _ in 0..50 {
            let input: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut cache = ForwardCache::default();
            let out = net.forward(&params, &input, &mut cache).to_vec();
            let oracle = forward_oracle(&net, &params, &input);
            for (a, b) in out.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn forward_rejects_non_finite_input() {
        let net = DecoderNet::new(2, 4, 1, 2);
        let params = vec![0.0; net.param_count()];
        let mut cache = ForwardCache::default();
        net.forward(&params, &[1.0, f64::NAN], &mut cache);
    }

    #[test]
    fn backward_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DecoderNet::new(3, 8, 2, 4);
        let params = net.init_params(&mut rng);
        let mut cache = ForwardCache::default();
        net.forward(&params, &[0.1, 0.2, 0.3], &mut cache);
        let mut grads = vec![0.0; net.param_count()];
        let mut input_grad = vec![0.0; 3];
        net.backward(&params, &cache, &[0.0; 4], &mut grads, &mut input_grad);
        assert!(grads.iter().all(|g| *g == 0.0));
        assert!(input_grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DecoderNet::new(4, 8, 2, 3);
        let mut params = net.init_params(&mut rng);
        let input: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |net: &DecoderNet, params: &[f64], input: &[f64]| -> f64 {
            let mut cache = ForwardCache::default();
            let out = net.forward(params, input, &mut cache);
            out.iter().zip(&upstream).map(|(o, u)| o * u).sum()
        };

        let mut cache = ForwardCache::default();
        net.forward(&params, &input, &mut cache);
        let mut grads = vec![0.0; net.param_count()];
        let mut input_grad = vec![0.0; 4];
        net.backward(&params, &cache, &upstream, &mut grads, &mut input_grad);

        let h = 1e-6;
        for idx in 0..net.param_count() {
            let orig = params[idx];
            params[idx] = orig + h;
            let fp = loss(&net, &params, &input);
            params[idx] = orig - h;
            let fm = loss(&net, &params, &input);
            params[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(grads[idx].abs()).max(1e-6);
            assert!(
                (fd - grads[idx]).abs() / scale < 1e-4,
                "param {idx}: {fd} vs {}",
                grads[idx]
            );
        }
        let mut in_mut = input.clone();
        for idx in 0..4 {
            let orig = in_mut[idx];
            in_mut[idx] = orig + h;
            let fp = loss(&net, &params, &in_mut);
            in_mut[idx] = orig - h;
            let fm = loss(&net, &params, &in_mut);
            in_mut[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(input_grad[idx].abs()).max(1e-6);
            assert!((fd - input_grad[idx]).abs() / scale < 1e-4);
        }
    }

    #[test]
    fn backward_dead_relu_unit_gets_zero_weight_grad() {
        // Layer 0 output forced negative => ReLU-dead; its incoming
        // weights must receive zero gradient.
        let net = DecoderNet::from_dims(vec![(1, 1), (1, 1)]);
        let mut params = vec![0.0; net.param_count()];
        params[0] = 1.0; // w0
        params[1] = -5.0; // b0 => pre-activation -5 + x
        params[2] = 1.0; // w1
        let mut cache = ForwardCache::default();
        net.forward(&params, &[1.0], &mut cache);
        let mut grads = vec![0.0; net.param_count()];
        let mut ig = vec![0.0; 1];
        net.backward(&params, &cache, &[1.0], &mut grads, &mut ig);
        assert_eq!(grads[0], 0.0);
        assert_eq!(grads[1], 0.0);
        assert_eq!(ig[0], 0.0);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut adam = AdamState::new(3, 0.01);
        let mut params = vec![1.0, 2.0, 3.0];
        let grads = vec![0.5, -3.0, 0.0];
        adam.begin_step();
        adam.step_dense(&mut params, &grads, 0..3);
        // Bias correction makes m̂/√v̂ = sign(g) on the first step.
        assert!((params[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((params[1] - (2.0 + 0.01)).abs() < 1e-6);
        assert_eq!(params[2], 3.0);
    }

    #[test]
    fn adam_zero_gradient_stream_keeps_params() {
        let mut adam = AdamState::new(2, 0.01);
        let mut params = vec![0.7, -0.3];
        for _ in 0..10 {
            adam.begin_step();
            adam.step_dense(&mut params, &[0.0, 0.0], 0..2);
        }
        assert_eq!(params, vec![0.7, -0.3]);
    }

    #[test]
    fn adam_drops_and_counts_non_finite() {
        let mut adam = AdamState::new(2, 0.01);
        let mut params = vec![1.0, 1.0];
        adam.begin_step();
        let dropped = adam.step_dense(&mut params, &[f64::NAN, 1.0], 0..2);
        assert_eq!(dropped, 1);
        assert_eq!(params[0], 1.0);
        assert!(params[1] < 1.0);
    }

    #[test]
    fn adam_converges_on_convex_quadratic() {
        // f(p) = 0.5 Σ aᵢ (pᵢ − cᵢ)²
        let a = [1.0, 4.0, 0.5];
        let c = [2.0, -1.0, 0.3];
        let mut params = vec![0.0; 3];
        let mut adam = AdamState::new(3, 0.05);
        let mut grad_norm = f64::INFINITY;
        for _ in 0..2000 {
            let grads: Vec<f64> = (0..3).map(|i| a[i] * (params[i] - c[i])).collect();
            grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if grad_norm < 1e-3 {
                break;
            }
            adam.begin_step();
            adam.step_dense(&mut params, &grads, 0..3);
        }
        assert!(grad_norm < 1e-3, "|grad| = {grad_norm}");
    }

    #[test]
    fn ema_closed_form() {
        let params = vec![2.0, -4.0];
        let mut ema = vec![0.0, 0.0];
        let decay = 0.9;
        let n = 17;
        for _ in 0..n {
            ema_update(&mut ema, &params, decay);
        }
        let factor = 1.0 - decay.powi(n);
        assert!((ema[0] - 2.0 * factor).abs() < 1e-12);
        assert!((ema[1] + 4.0 * factor).abs() < 1e-12);

        // decay = 0 copies the live parameters.
        ema_update(&mut ema, &params, 0.0);
        assert_eq!(ema, params);
    }
}
