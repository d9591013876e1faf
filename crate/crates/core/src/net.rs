//! Random ReLU-like networks, vanilla and residual.
//!
//! Inputs are processed in batches: every activation matrix stores one input
//! per row, so a forward pass over `B` inputs is a sequence of `B x N` GEMMs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Vanilla,
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    #[serde(default = "one")]
    pub u: f64,
    #[serde(default)]
    pub v: f64,
    pub arch: Arch,
}

fn one() -> f64 {
    1.0
}

impl NetworkConfig {
    /// ReLU network (`u = 1`, `v = 0`).
    pub fn relu(arch: Arch, d: usize, k: usize, l: usize, n: usize, sigma_w2: f64, sigma_b2: f64) -> Self {
        NetworkConfig { d, k, l, n, sigma_w2, sigma_b2, u: 1.0, v: 0.0, arch }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.n == 0 {
            return Err(Error::Config("d, K and N must be at least 1".into()));
        }
        if !(self.sigma_w2 >= 0.0 && self.sigma_b2 >= 0.0) {
            return Err(Error::Config("variances must be nonnegative".into()));
        }
        if !(self.u.is_finite() && self.v.is_finite()) || (self.u == 0.0 && self.v == 0.0) {
            return Err(Error::Config("activation slopes (u, v) must be finite and not both zero".into()));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        (self.u * self.u + self.v * self.v) / 2.0
    }

    /// Per-layer signal multiplier for the configured architecture.
    pub fn omega(&self) -> f64 {
        omega_for(self.arch, self.alpha(), self.sigma_w2)
    }
}

pub fn omega_for(arch: Arch, alpha: f64, sigma_w2: f64) -> f64 {
    match arch {
        Arch::Vanilla => alpha * sigma_w2,
        Arch::Residual => 1.0 + alpha * sigma_w2,
    }
}

/// Sampled parameters. `w`, `b` and `p_short` are indexed by layer `0..L`.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub p_in: Array2<f64>,
    pub p_out: Array2<f64>,
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
    pub p_short: Vec<Array2<f64>>,
    pub seed: u64,
    pub replicate: u64,
}

/// Forward activations, one row per input.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub x0: Array2<f64>,
    pub h: Vec<Array2<f64>>,
    pub x: Vec<Array2<f64>>,
    pub out: Array2<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.x0.nrows()
    }

    /// Post-activation entering layer `l` (zero-based), i.e. x^(l) with x^(0) = P_in x.
    pub fn layer_input(&self, l: usize) -> &Array2<f64> {
        if l == 0 {
            &self.x0
        } else {
            &self.x[l - 1]
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearRegion {
    pub j: Array2<f64>,
    pub a: Array1<f64>,
}

/// Gradients with respect to the trainable tensors (weights and biases).
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterGradients {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

impl ParameterGradients {
    pub fn zeros(config: &NetworkConfig) -> Self {
        ParameterGradients {
            w: (0..config.l).map(|_| Array2::zeros((config.n, config.n))).collect(),
            b: (0..config.l).map(|_| Array1::zeros(config.n)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParameterGradients, c: f64) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            a.scaled_add(c, b);
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            a.scaled_add(c, b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.w.iter_mut().for_each(|m| *m *= c);
        self.b.iter_mut().for_each(|m| *m *= c);
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.b.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        let fold = |acc: f64, v: &f64| acc.max(v.abs());
        let w = self.w.iter().map(|m| m.iter().fold(0.0, fold)).fold(0.0, f64::max);
        let b = self.b.iter().map(|m| m.iter().fold(0.0, fold)).fold(0.0, f64::max);
        w.max(b)
    }
}

#[derive(Clone, Copy, Default)]
struct Want {
    params: bool,
    layers: bool,
    pre: bool,
}

struct Reverse {
    input: Array2<f64>,
    params: Option<ParameterGradients>,
    layers: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

pub(crate) mod tensor_id {
    pub const P_IN: u64 = 0;
    pub const P_OUT: u64 = 1;
    pub fn w(l: usize) -> u64 {
        2 + 3 * l as u64
    }
    pub fn b(l: usize) -> u64 {
        3 + 3 * l as u64
    }
    pub fn short(l: usize) -> u64 {
        4 + 3 * l as u64
    }
}

fn gaussian_matrix(seed: u64, rep: u64, id: u64, rows: usize, cols: usize, var: f64) -> Array2<f64> {
    let data = rng::normal_vec(seed, rep, rng::domain::NETWORK + id, var.sqrt(), rows * cols);
    Array2::from_shape_vec((rows, cols), data).expect("shape matches length")
}

impl Network {
    pub fn sample(config: &NetworkConfig, seed: u64) -> Result<Network> {
        Network::sample_replicate(config, seed, 0)
    }

    /// Samples the network of Monte-Carlo replicate `replicate` under `seed`.
    pub fn sample_replicate(config: &NetworkConfig, seed: u64, replicate: u64) -> Result<Network> {
        config.validate()?;
        let (d, k, n) = (config.d, config.k, config.n);
        let p_in = gaussian_matrix(seed, replicate, tensor_id::P_IN, n, d, 1.0 / d as f64);
        let p_out = gaussian_matrix(seed, replicate, tensor_id::P_OUT, k, n, 1.0 / n as f64);
        let mut w = Vec::with_capacity(config.l);
        let mut b = Vec::with_capacity(config.l);
        let mut p_short = Vec::new();
        for l in 0..config.l {
            w.push(gaussian_matrix(seed, replicate, tensor_id::w(l), n, n, config.sigma_w2 / n as f64));
            let bias = rng::normal_vec(
                seed,
                replicate,
                rng::domain::NETWORK + tensor_id::b(l),
                config.sigma_b2.sqrt(),
                n,
            );
            b.push(Array1::from(bias));
            if config.arch == Arch::Residual {
                p_short.push(gaussian_matrix(seed, replicate, tensor_id::short(l), n, n, 1.0 / n as f64));
            }
        }
        Ok(Network { config: config.clone(), p_in, p_out, w, b, p_short, seed, replicate })
    }

    #[inline]
    fn phi(&self, z: f64) -> f64 {
        if z >= 0.0 {
            self.config.u * z
        } else {
            self.config.v * z
        }
    }

    #[inline]
    fn dphi(&self, z: f64) -> f64 {
        if z >= 0.0 {
            self.config.u
        } else {
            self.config.v
        }
    }

    pub fn forward(&self, x_in: &[f64]) -> Result<ForwardCache> {
        check_len("input", self.config.d, x_in.len())?;
        let xs = ArrayView2::from_shape((1, x_in.len()), x_in).expect("row view");
        self.forward_batch(xs)
    }

    pub fn forward_batch(&self, xs: ArrayView2<f64>) -> Result<ForwardCache> {
        check_len("input", self.config.d, xs.ncols())?;
        let x0 = xs.dot(&self.p_in.t());
        let mut h = Vec::with_capacity(self.config.l);
        let mut x: Vec<Array2<f64>> = Vec::with_capacity(self.config.l);
        for l in 0..self.config.l {
            let prev = if l == 0 { &x0 } else { &x[l - 1] };
            let mut hl = prev.dot(&self.w[l].t());
            hl += &self.b[l].view().insert_axis(Axis(0));
            let act = hl.mapv(|z| self.phi(z));
            let xl = match self.config.arch {
                Arch::Vanilla => act,
                Arch::Residual => prev + &act.dot(&self.p_short[l].t()),
            };
            h.push(hl);
            x.push(xl);
        }
        let last = if self.config.l == 0 { &x0 } else { &x[self.config.l - 1] };
        let out = last.dot(&self.p_out.t());
        Ok(ForwardCache { x0, h, x, out })
    }

    pub fn output(&self, x_in: &[f64]) -> Result<Array1<f64>> {
        Ok(self.forward(x_in)?.out.row(0).to_owned())
    }

    pub fn output_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_batch(xs)?.out)
    }

    /// Reverse sweep. `g_out` holds one cotangent row per cache row, or any
    /// number of rows when the cache holds a single input (the activation
    /// pattern is then shared by every row).
    fn reverse(&self, cache: &ForwardCache, g_out: ArrayView2<f64>, want: Want) -> Reverse {
        let lcount = self.config.l;
        let mut g = g_out.dot(&self.p_out);
        let mut rev = Reverse {
            input: Array2::zeros((0, 0)),
            params: want.params.then(|| ParameterGradients::zeros(&self.config)),
            layers: Vec::new(),
            pre: Vec::new(),
        };
        if want.layers {
            rev.layers.push(g.clone());
        }
        for l in (0..lcount).rev() {
            let mask = cache.h[l].mapv(|z| self.dphi(z));
            let gh = match self.config.arch {
                Arch::Vanilla => &g * &mask,
                Arch::Residual => &g.dot(&self.p_short[l]) * &mask,
            };
            if let Some(p) = rev.params.as_mut() {
                p.w[l] = gh.t().dot(cache.layer_input(l));
                p.b[l] = gh.sum_axis(Axis(0));
            }
            let back = gh.dot(&self.w[l]);
            if want.pre {
                rev.pre.push(gh);
            }
            g = match self.config.arch {
                Arch::Vanilla => back,
                Arch::Residual => g + back,
            };
            if want.layers {
                rev.layers.push(g.clone());
            }
        }
        rev.layers.reverse();
        rev.pre.reverse();
        rev.input = g.dot(&self.p_in);
        rev
    }

    fn check_cotangent(&self, cache: &ForwardCache, g_out: &ArrayView2<f64>) -> Result<()> {
        check_len("output gradient", self.config.k, g_out.ncols())?;
        check_len("output gradient rows", cache.batch(), g_out.nrows())
    }

    /// Gradient of `<out_grad, f(x_in)>` with respect to all trainable
    /// parameters and to the input.
    pub fn backprop(&self, x_in: &[f64], out_grad: &[f64]) -> Result<(ParameterGradients, Array1<f64>)> {
        let cache = self.forward(x_in)?;
        check_len("output gradient", self.config.k, out_grad.len())?;
        let g = ArrayView2::from_shape((1, out_grad.len()), out_grad).expect("row view");
        let rev = self.reverse(&cache, g, Want { params: true, ..Want::default() });
        Ok((rev.params.expect("requested"), rev.input.row(0).to_owned()))
    }

    /// Batched backprop; parameter gradients are summed over the batch.
    pub fn backprop_batch(
        &self,
        cache: &ForwardCache,
        g_out: ArrayView2<f64>,
    ) -> Result<(ParameterGradients, Array2<f64>)> {
        self.check_cotangent(cache, &g_out)?;
        let rev = self.reverse(cache, g_out, Want { params: true, ..Want::default() });
        Ok((rev.params.expect("requested"), rev.input))
    }

    /// Per-row input gradients only.
    pub fn input_gradients(&self, cache: &ForwardCache, g_out: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_cotangent(cache, &g_out)?;
        Ok(self.reverse(cache, g_out, Want::default()).input)
    }

    /// Gradients of `<g_out, f>` with respect to every x^(l), l = 0..L, for a
    /// batch. Entry `l` has one row per input.
    pub fn layer_gradients(&self, cache: &ForwardCache, g_out: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.check_cotangent(cache, &g_out)?;
        Ok(self.reverse(cache, g_out, Want { layers: true, ..Want::default() }).layers)
    }

    /// Gradients of `<g_out, f>` with respect to every pre-activation h^(l),
    /// l = 1..L (index 0 is the first layer). The cache must hold a single
    /// input; `g_out` may have any number of rows.
    pub fn preactivation_gradients(&self, cache: &ForwardCache, g_out: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        check_len("output gradient", self.config.k, g_out.ncols())?;
        check_len("cache rows", 1, cache.batch())?;
        Ok(self.reverse(cache, g_out, Want { pre: true, ..Want::default() }).pre)
    }

    /// Mean squared gradient of `<g, f>` with respect to x^(l), l = 0..L.
    pub fn chi_profile(&self, x_in: &[f64], loss_grad_at_output: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward(x_in)?;
        check_len("output gradient", self.config.k, loss_grad_at_output.len())?;
        let g = ArrayView2::from_shape((1, self.config.k), loss_grad_at_output).expect("row view");
        let layers = self.reverse(&cache, g, Want { layers: true, ..Want::default() }).layers;
        Ok(layers.iter().map(|m| m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64).collect())
    }

    /// Exact input Jacobian of the region containing `x_in`, with `a = f - Jx`.
    pub fn linear_region(&self, x_in: &[f64]) -> Result<LinearRegion> {
        let cache = self.forward(x_in)?;
        Ok(self.linear_region_from(&cache, 0, x_in))
    }

    /// Linear region of row `row` of an existing cache.
    pub fn linear_region_from(&self, cache: &ForwardCache, row: usize, x_in: &[f64]) -> LinearRegion {
        let single = ForwardCache {
            x0: cache.x0.select(Axis(0), &[row]),
            h: cache.h.iter().map(|m| m.select(Axis(0), &[row])).collect(),
            x: Vec::new(),
            out: cache.out.select(Axis(0), &[row]),
        };
        let eye = Array2::<f64>::eye(self.config.k);
        let j = self.reverse(&single, eye.view(), Want::default()).input;
        let f = single.out.row(0);
        let a = &f - &j.dot(&ArrayView1::from(x_in));
        LinearRegion { j, a }
    }

    pub fn num_parameters(&self) -> usize {
        self.config.l * (self.config.n * self.config.n + self.config.n)
    }
}

impl LinearRegion {
    pub fn apply(&self, x: &[f64]) -> Array1<f64> {
        self.j.dot(&ArrayView1::from(x)) + &self.a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ones_net() -> Network {
        let cfg = NetworkConfig::relu(Arch::Vanilla, 2, 1, 1, 1, 1.0, 1.0);
        let mut net = Network::sample(&cfg, 0).unwrap();
        net.p_in.fill(1.0);
        net.p_out.fill(1.0);
        net.w[0].fill(1.0);
        net.b[0].fill(1.0);
        net
    }

    #[test]
    fn hand_evaluated_forward() {
        // x0 = 1 + 1 = 2, h = 2 + 1 = 3, out = phi(3) = 3
        let out = ones_net().output(&[1.0, 1.0]).unwrap();
        assert_eq!(out[0], 3.0);
    }

    #[test]
    fn zero_variance_zero_parameters() {
        let cfg = NetworkConfig::relu(Arch::Residual, 5, 2, 3, 7, 0.0, 0.0);
        let net = Network::sample(&cfg, 3).unwrap();
        assert!(net.w.iter().all(|m| m.iter().all(|&v| v == 0.0)));
        assert!(net.b.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sampling_is_bit_reproducible() {
        let cfg = NetworkConfig::relu(Arch::Residual, 6, 3, 2, 9, 2.0, 0.01);
        let a = Network::sample(&cfg, 11).unwrap();
        let b = Network::sample(&cfg, 11).unwrap();
        assert_eq!(a.p_in, b.p_in);
        assert_eq!(a.w, b.w);
        assert_eq!(a.b, b.b);
        assert_eq!(a.p_short, b.p_short);
        let c = Network::sample_replicate(&cfg, 11, 1).unwrap();
        assert_ne!(a.w, c.w);
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = NetworkConfig::relu(Arch::Vanilla, 4, 3, 2, 5, 2.0, 0.01);
        let net = Network::sample(&cfg, 1).unwrap();
        assert_eq!(net.p_in.dim(), (5, 4));
        assert_eq!(net.p_out.dim(), (3, 5));
        assert_eq!(net.w.len(), 2);
        assert!(net.p_short.is_empty());
        let res = Network::sample(&NetworkConfig { arch: Arch::Residual, ..cfg }, 1).unwrap();
        assert_eq!(res.p_short.len(), 2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = NetworkConfig::relu(Arch::Vanilla, 4, 3, 2, 5, 2.0, 0.01);
        cfg.u = 0.0;
        assert!(Network::sample(&cfg, 0).is_err());
        cfg.u = 1.0;
        cfg.sigma_w2 = -1.0;
        assert!(cfg.validate().is_err());
        cfg.sigma_w2 = 1.0;
        cfg.d = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let cfg = NetworkConfig::relu(Arch::Vanilla, 4, 3, 3, 8, 2.0, 0.0);
        let net = Network::sample(&cfg, 5).unwrap();
        assert!(net.output(&[0.0; 4]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let cfg = NetworkConfig::relu(Arch::Vanilla, 4, 3, 1, 8, 2.0, 0.0);
        let net = Network::sample(&cfg, 5).unwrap();
        assert!(matches!(net.forward(&[0.0; 3]), Err(Error::Dimension { .. })));
        assert!(net.backprop(&[0.0; 4], &[1.0]).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let cfg = NetworkConfig::relu(Arch::Residual, 4, 2, 3, 6, 2.0, 0.1);
        let net = Network::sample(&cfg, 9).unwrap();
        let xs = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - 1.0) * 0.3 + j as f64 * 0.1);
        let out = net.output_batch(xs.view()).unwrap();
        for i in 0..3 {
            let single = net.output(xs.row(i).as_slice().unwrap()).unwrap();
            for k in 0..2 {
                assert_relative_eq!(out[[i, k]], single[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_depth_has_unit_chi_ratio() {
        let cfg = NetworkConfig::relu(Arch::Vanilla, 5, 2, 0, 6, 2.0, 0.1);
        let net = Network::sample(&cfg, 2).unwrap();
        let chi = net.chi_profile(&[1.0; 5], &[1.0, -1.0]).unwrap();
        assert_eq!(chi.len(), 1);
        assert_eq!(chi[0] / chi[0], 1.0);
    }
}
