//! Fully connected networks with hand-written reverse mode, an Adam
//! optimizer, Ornstein–Uhlenbeck exploration noise and Polyak averaging.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! (`out × in`, column-major) followed by its bias. Batches are matrices with
//! one sample per column.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CulError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, m: &mut DMatrix<f64>) {
        match self {
            Activation::Linear => {}
            Activation::Relu => m.apply(|v| *v = v.max(0.0)),
            Activation::Tanh => m.apply(|v| *v = v.tanh()),
        }
    }

    /// Multiplies `grad` in place by the derivative, expressed through the
    /// layer's post-activation output.
    fn backprop(self, grad: &mut DMatrix<f64>, post: &DMatrix<f64>) {
        match self {
            Activation::Linear => {}
            Activation::Relu => grad.zip_apply(post, |g, y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_apply(post, |g, y| *g *= 1.0 - y * y),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(CulError::Parse(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
}

/// Per-layer activations saved by a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    /// `layers[0]` is the input batch; `layers[l]` is the output of layer `l`.
    layers: Vec<DMatrix<f64>>,
}

impl Cache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.layers.last().expect("cache holds the input at least")
    }

    pub fn batch_size(&self) -> usize {
        self.layers[0].ncols()
    }

    /// Input batch (`0`) or the activated output of layer `l` (`1..`).
    pub fn layer(&self, l: usize) -> &DMatrix<f64> {
        &self.layers[l]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl DenseNet {
    /// Network with all parameters zero.
    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(CulError::InvalidParams {
                name: "layer sizes",
                reason: format!("need at least two non-zero sizes, got {sizes:?}"),
            });
        }
        Ok(DenseNet {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params: vec![0.0; param_count(sizes)],
        })
    }

    /// Uniform initialization in `±1/√fan_in` for weights and biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out + fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(CulError::DimensionMismatch {
                context: "set_params",
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn layer_offsets(&self, layer: usize) -> (usize, usize, usize, usize) {
        let off: usize = self.sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (fan_in, fan_out) = (self.sizes[layer], self.sizes[layer + 1]);
        (off, off + fan_in * fan_out, fan_in, fan_out)
    }

    /// Range of the flat vector holding layer `layer` (weights then bias).
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let (w_off, b_off, _, fan_out) = self.layer_offsets(layer);
        w_off..b_off + fan_out
    }

    pub fn weights(&self, layer: usize) -> DMatrixView<'_, f64> {
        let (w_off, b_off, fan_in, fan_out) = self.layer_offsets(layer);
        DMatrixView::from_slice(&self.params[w_off..b_off], fan_out, fan_in)
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (_, b_off, _, fan_out) = self.layer_offsets(layer);
        &self.params[b_off..b_off + fan_out]
    }

    /// Multiplies every parameter of layer `layer` by `factor`.
    pub fn scale_layer(&mut self, layer: usize, factor: f64) {
        let range = self.layer_range(layer);
        self.params[range].iter_mut().for_each(|p| *p *= factor);
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Forward pass on a batch (`input_dim × batch`).
    pub fn forward_batch(&self, input: &DMatrix<f64>) -> Result<(DMatrix<f64>, Cache)> {
        if input.nrows() != self.input_dim() {
            return Err(CulError::DimensionMismatch {
                context: "forward input",
                expected: self.input_dim(),
                got: input.nrows(),
            });
        }
        let mut layers = Vec::with_capacity(self.sizes.len());
        layers.push(input.clone());
        for l in 0..self.num_layers() {
            let w = self.weights(l);
            let b = self.bias(l);
            let mut z = w * layers.last().unwrap();
            for mut col in z.column_iter_mut() {
                for (v, bi) in col.iter_mut().zip(b) {
                    *v += bi;
                }
            }
            self.activation(l).apply(&mut z);
            layers.push(z);
        }
        let cache = Cache { layers };
        Ok((cache.output().clone(), cache))
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Cache)> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        let (y, cache) = self.forward_batch(&x)?;
        Ok((y.as_slice().to_vec(), cache))
    }

    /// Evaluates without keeping a cache.
    pub fn predict_batch(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if input.nrows() != self.input_dim() {
            return Err(CulError::DimensionMismatch {
                context: "predict input",
                expected: self.input_dim(),
                got: input.nrows(),
            });
        }
        let mut h = input.clone();
        for l in 0..self.num_layers() {
            let mut z = self.weights(l) * &h;
            let b = self.bias(l);
            for mut col in z.column_iter_mut() {
                for (v, bi) in col.iter_mut().zip(b) {
                    *v += bi;
                }
            }
            self.activation(l).apply(&mut z);
            h = z;
        }
        Ok(h)
    }

    fn check_cache(&self, cache: &Cache, upstream: &DMatrix<f64>) -> Result<()> {
        if cache.layers.len() != self.sizes.len()
            || cache.layers.iter().zip(&self.sizes).any(|(m, &s)| m.nrows() != s)
        {
            return Err(CulError::DimensionMismatch {
                context: "stale cache",
                expected: self.sizes.len(),
                got: cache.layers.len(),
            });
        }
        if upstream.shape() != cache.output().shape() {
            return Err(CulError::DimensionMismatch {
                context: "upstream gradient",
                expected: cache.output().len(),
                got: upstream.len(),
            });
        }
        Ok(())
    }

    /// Reverse pass: gradient of `Σ upstream ⊙ output` with respect to the
    /// parameters (summed over the batch) and to the input batch.
    pub fn backward_batch(
        &self,
        cache: &Cache,
        upstream: &DMatrix<f64>,
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        self.check_cache(cache, upstream)?;
        let mut grad = vec![0.0; self.params.len()];
        let mut delta = upstream.clone();
        for l in (0..self.num_layers()).rev() {
            self.activation(l).backprop(&mut delta, &cache.layers[l + 1]);
            let (w_off, b_off, fan_in, fan_out) = self.layer_offsets(l);
            {
                let mut gw = DMatrixViewMut::from_slice(&mut grad[w_off..b_off], fan_out, fan_in);
                gw.gemm(1.0, &delta, &cache.layers[l].transpose(), 0.0);
            }
            for (i, g) in grad[b_off..b_off + fan_out].iter_mut().enumerate() {
                *g = delta.row(i).sum();
            }
            delta = self.weights(l).transpose() * &delta;
        }
        Ok((grad, delta))
    }

    pub fn backward(&self, cache: &Cache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let up = DMatrix::from_column_slice(upstream.len(), 1, upstream);
        let (g, dx) = self.backward_batch(cache, &up)?;
        Ok((g, dx.as_slice().to_vec()))
    }

    /// `Σ_i (∂(upstream_i · output_i)/∂θ)²` over the batch columns `i`,
    /// i.e. the sum of squared per-sample parameter gradients.
    pub fn squared_grad_sum(&self, cache: &Cache, upstream: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_cache(cache, upstream)?;
        let mut out = vec![0.0; self.params.len()];
        let mut delta = upstream.clone();
        for l in (0..self.num_layers()).rev() {
            self.activation(l).backprop(&mut delta, &cache.layers[l + 1]);
            let (w_off, b_off, fan_in, fan_out) = self.layer_offsets(l);
            let delta_sq = delta.map(|v| v * v);
            let input_sq = cache.layers[l].map(|v| v * v);
            {
                let mut gw = DMatrixViewMut::from_slice(&mut out[w_off..b_off], fan_out, fan_in);
                gw.gemm(1.0, &delta_sq, &input_sq.transpose(), 0.0);
            }
            for (i, g) in out[b_off..b_off + fan_out].iter_mut().enumerate() {
                *g = delta_sq.row(i).sum();
            }
            if l > 0 {
                delta = self.weights(l).transpose() * &delta;
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# dense network: sizes, activations, flat parameters\n");
        out.push_str("version 1\n");
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "sizes {}", sizes.join(" "));
        let _ = writeln!(out, "hidden {}", self.hidden.name());
        let _ = writeln!(out, "output {}", self.output.name());
        let _ = writeln!(out, "params {}", self.params.len());
        for p in &self.params {
            let _ = writeln!(out, "{p:.16e}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let mut field = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| CulError::Parse(format!("missing {key:?} line")))?;
            line.strip_prefix(key)
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| CulError::Parse(format!("expected {key:?}, got {line:?}")))
        };
        if field("version")? != "1" {
            return Err(CulError::Parse("unsupported network version".into()));
        }
        let sizes = field("sizes")?
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|e| CulError::Parse(format!("bad size {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let hidden = Activation::parse(&field("hidden")?)?;
        let output = Activation::parse(&field("output")?)?;
        let count: usize = field("params")?
            .parse()
            .map_err(|e| CulError::Parse(format!("bad parameter count: {e}")))?;
        let mut net = DenseNet::zeros(&sizes, hidden, output)?;
        if count != net.params.len() {
            return Err(CulError::DimensionMismatch {
                context: "network text parameters",
                expected: net.params.len(),
                got: count,
            });
        }
        for (i, p) in net.params.iter_mut().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| CulError::Parse(format!("missing parameter {i}")))?;
            *p = line
                .parse()
                .map_err(|e| CulError::Parse(format!("parameter {i} {line:?}: {e}")))?;
        }
        Ok(net)
    }
}

/// Adam optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(n: usize, lr: f64) -> Self {
        OptState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam step. A non-finite gradient is rejected and
    /// leaves both the parameters and the moments untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(CulError::DimensionMismatch {
                context: "optimizer step",
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(CulError::NonFiniteValue("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Ornstein–Uhlenbeck process in normalized action units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuNoise {
    pub value: f64,
    pub theta: f64,
    pub sigma: f64,
    pub mean: f64,
    pub dt: f64,
}

impl Default for OuNoise {
    fn default() -> Self {
        OuNoise {
            value: 0.0,
            theta: 0.15,
            sigma: 0.2,
            mean: 0.0,
            dt: 1.0,
        }
    }
}

impl OuNoise {
    pub fn reset(&mut self) {
        self.value = self.mean;
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.value += self.theta * (self.mean - self.value) * self.dt + self.sigma * self.dt.sqrt() * z;
        self.value
    }
}

/// `target ← η·source + (1 − η)·target`.
pub fn soft_update(target: &mut [f64], source: &[f64], eta: f64) -> Result<()> {
    if target.len() != source.len() {
        return Err(CulError::DimensionMismatch {
            context: "soft_update",
            expected: target.len(),
            got: source.len(),
        });
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(CulError::InvalidParams {
            name: "eta",
            reason: format!("must lie in (0, 1], got {eta}"),
        });
    }
    for (t, s) in target.iter_mut().zip(source) {
        *t = eta * s + (1.0 - eta) * *t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64, sizes: &[usize], out: Activation) -> DenseNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseNet::new(sizes, Activation::Relu, out, &mut rng).unwrap()
    }

    #[test]
    fn parameter_layout() {
        let net = DenseNet::zeros(&[6, 128, 128, 1], Activation::Relu, Activation::Tanh).unwrap();
        assert_eq!(net.params().len(), 6 * 128 + 128 + 128 * 128 + 128 + 128 + 1);
        assert_eq!(net.layer_range(2).end, net.params().len());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&[3, 5, 2], Activation::Relu, Activation::Linear).unwrap();
        let (y, _) = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn single_layer_is_affine() {
        let mut net = DenseNet::zeros(&[2, 2], Activation::Relu, Activation::Linear).unwrap();
        // W = [[1, 2], [3, 4]] column-major, b = [0.5, -1]
        net.set_params(&[1.0, 3.0, 2.0, 4.0, 0.5, -1.0]).unwrap();
        let (y, cache) = net.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(y, vec![3.5, 6.0]);
        let (_, dx) = net.backward(&cache, &[1.0, 2.0]).unwrap();
        assert_eq!(dx, vec![1.0 + 6.0, 2.0 + 8.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = random_net(5, &[4, 16, 16, 1], Activation::Linear);
        let x = [0.3, -0.2, 0.9, 0.1];
        assert_eq!(net.forward(&x).unwrap().0, net.forward(&x).unwrap().0);
    }

    #[test]
    fn dimension_errors() {
        let net = random_net(5, &[4, 8, 1], Activation::Linear);
        assert!(net.forward(&[1.0, 2.0]).is_err());
        let other = random_net(5, &[3, 8, 1], Activation::Linear);
        let (_, cache) = other.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(net.backward(&cache, &[1.0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = random_net(9, &[4, 8, 8, 1], Activation::Tanh);
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let (g, dx) = net.backward(&cache, &[0.0]).unwrap();
        assert!(g.iter().chain(&dx).all(|&v| v == 0.0));
    }

    /// Finite-difference oracle; skips coordinates whose ±h perturbation
    /// flips a rectifier.
    fn check_gradient(net: &DenseNet, x: &[f64]) -> (f64, usize) {
        let h = 1e-5;
        let (_, cache) = net.forward(x).unwrap();
        let (g, _) = net.backward(&cache, &[1.0]).unwrap();
        let pattern = |n: &DenseNet| {
            let (_, c) = n.forward(x).unwrap();
            c.layers[1..c.layers.len() - 1]
                .iter()
                .flat_map(|m| m.iter().map(|v| *v > 0.0).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        let base = pattern(net);
        let mut worst = 0.0f64;
        let mut skipped = 0;
        for j in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[j] += h;
            let mut minus = net.clone();
            minus.params_mut()[j] -= h;
            if pattern(&plus) != base || pattern(&minus) != base {
                skipped += 1;
                continue;
            }
            let fd = (plus.forward(x).unwrap().0[0] - minus.forward(x).unwrap().0[0]) / (2.0 * h);
            let denom = g[j].abs().max(fd.abs()).max(1e-4);
            worst = worst.max((g[j] - fd).abs() / denom);
        }
        (worst, skipped)
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..20 {
            let out = if seed % 2 == 0 { Activation::Linear } else { Activation::Tanh };
            let net = random_net(seed, &[8, 16, 16, 1], out);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (worst, skipped) = check_gradient(&net, &x);
            assert!(worst < 1e-4, "seed {seed}: {worst}");
            assert!(skipped < 10);
        }
    }

    #[test]
    fn input_gradient_of_linear_net_is_transpose() {
        let net = random_net(2, &[3, 2], Activation::Linear);
        let (_, cache) = net.forward(&[0.5, 0.1, -0.3]).unwrap();
        let up = [0.7, -1.3];
        let (_, dx) = net.backward(&cache, &up).unwrap();
        let w = net.weights(0);
        for j in 0..3 {
            assert_relative_eq!(dx[j], w[(0, j)] * up[0] + w[(1, j)] * up[1], epsilon = 1e-15);
        }
    }

    #[test]
    fn squared_grad_sum_matches_per_sample_loop() {
        let net = random_net(3, &[4, 8, 8, 1], Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = DMatrix::from_fn(4, 10, |_, _| rng.random_range(-1.0..1.0));
        let (_, cache) = net.forward_batch(&x).unwrap();
        let fast = net.squared_grad_sum(&cache, &DMatrix::from_element(1, 10, 1.0)).unwrap();
        let mut slow = vec![0.0; fast.len()];
        for i in 0..10 {
            let col: Vec<f64> = x.column(i).iter().copied().collect();
            let (_, c) = net.forward(&col).unwrap();
            let (g, _) = net.backward(&c, &[1.0]).unwrap();
            for (s, gi) in slow.iter_mut().zip(g) {
                *s += gi * gi;
            }
        }
        for (a, b) in fast.iter().zip(&slow) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12, epsilon = 1e-300);
        }
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let net = random_net(4, &[6, 16, 16, 1], Activation::Tanh);
        assert_eq!(DenseNet::from_text(&net.to_text()).unwrap(), net);
    }

    #[test]
    fn adam_zero_gradient_is_no_op() {
        let mut opt = OptState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..10 {
            opt.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut opt = OptState::new(2, 1e-3);
        let mut p = vec![0.0, 1.0];
        opt.step(&mut p, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(p[0], -1e-3, max_relative = 1e-7);
        assert_relative_eq!(p[1], 1.0 - 1e-3, max_relative = 1e-7);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut opt = OptState::new(2, 1e-3);
        let mut p = vec![0.0, 1.0];
        assert!(opt.step(&mut p, &[f64::NAN, 1.0]).is_err());
        assert_eq!((p, opt.step), (vec![0.0, 1.0], 0));
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let target = [1.5, -0.7, 3.0];
        let mut p = vec![0.0; 3];
        let mut opt = OptState::new(3, 1e-2);
        let mut steps = 0;
        while steps < 10_000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            opt.step(&mut p, &g).unwrap();
            steps += 1;
            if p.iter().zip(&target).all(|(x, t)| (x - t).abs() < 1e-6) {
                break;
            }
        }
        assert!(p.iter().zip(&target).all(|(x, t)| (x - t).abs() < 1e-6), "{p:?} after {steps}");
    }

    #[test]
    fn ou_noise_free_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut n = OuNoise { value: 1.0, sigma: 0.0, ..OuNoise::default() };
        assert_relative_eq!(n.sample(&mut rng), 1.0 - 0.15, epsilon = 1e-15);
        let mut at_mean = OuNoise { sigma: 0.0, ..OuNoise::default() };
        for _ in 0..10 {
            assert_eq!(at_mean.sample(&mut rng), 0.0);
        }
        n.reset();
        assert_eq!(n.value, n.mean);
    }

    #[test]
    fn ou_stationary_variance() {
        // Exact discrete stationary variance is σ²dt/(1−(1−θdt)²); the
        // continuous formula σ²/(2θ) is within 10% of it for θdt = 0.15.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut n = OuNoise::default();
        let steps = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..steps {
            let v = n.sample(&mut rng);
            s += v;
            s2 += v * v;
        }
        let mean = s / steps as f64;
        let var = s2 / steps as f64 - mean * mean;
        let expect = 0.2f64.powi(2) / (2.0 * 0.15);
        assert!((var - expect).abs() / expect < 0.1, "var {var} vs {expect}");
    }

    #[test]
    fn soft_update_cases() {
        let mut t = vec![0.0; 3];
        soft_update(&mut t, &[1.0; 3], 1e-3).unwrap();
        assert_eq!(t, vec![0.001; 3]);
        let src = vec![0.3, -0.2, 5.0];
        let mut t2 = src.clone();
        soft_update(&mut t2, &src, 0.37).unwrap();
        assert_eq!(t2, src);
        let mut t3 = vec![9.0, 8.0, 7.0];
        soft_update(&mut t3, &src, 1.0).unwrap();
        assert_eq!(t3, src);
        assert!(soft_update(&mut t3, &[1.0], 0.5).is_err());
        assert!(soft_update(&mut t3, &src, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn soft_update_contracts(eta in 1e-3f64..=1.0, t in prop::collection::vec(-5.0f64..5.0, 8), s in prop::collection::vec(-5.0f64..5.0, 8)) {
            let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let before = dist(&t, &s);
            let mut t2 = t.clone();
            soft_update(&mut t2, &s, eta).unwrap();
            prop_assert!((dist(&t2, &s) - (1.0 - eta) * before).abs() <= 1e-12 * (1.0 + before));
        }
    }
}
