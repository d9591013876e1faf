//! Training loops with standard, l2-regularized, surrogate-adversarial and
//! PGD-adversarial objectives, plus the capacity and variance metrics logged
//! along the way.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::attack::{norm_subgradient, pgd_attack_batch, AttackSpec};
use crate::data::{normalize_sqrt_d, Dataset, TraceRow};
use crate::error::{Error, Result};
use crate::net::{omega_for, Network, ParameterGradients};
use crate::rng;
use crate::theory::{beta, NormPair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    Standard,
    L2Reg,
    AdvSurrogate,
    AdvPGD,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    /// beta1 = 0.9, beta2 = 0.999, delta = 1e-8.
    Adam,
}

fn default_pair() -> NormPair {
    NormPair::INF_INF
}

fn default_eval_size() -> usize {
    1000
}

fn default_metric_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub mode: TrainMode,
    #[serde(default)]
    pub optimizer: Optimizer,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// PGD settings for `AdvPGD`.
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    /// Budget and norm pair of the surrogate loss.
    #[serde(default)]
    pub eps: f64,
    #[serde(default = "default_pair")]
    pub pair: NormPair,
    #[serde(default = "default_metric_every")]
    pub metric_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop once train accuracy has not improved for this many steps.
    #[serde(default)]
    pub early_stop: Option<usize>,
    /// Training examples used for the logged accuracy.
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    /// Index of the example used for the Fisher-Rao and chi probes.
    #[serde(default)]
    pub probe: usize,
}

impl TrainSpec {
    pub fn new(mode: TrainMode, lr: f64, steps: usize, batch: usize) -> Self {
        TrainSpec {
            mode,
            optimizer: Optimizer::Sgd,
            lr,
            steps,
            batch,
            attack: None,
            eps: 0.0,
            pair: default_pair(),
            metric_every: 1,
            seed: 0,
            early_stop: None,
            eval_size: default_eval_size(),
            probe: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.metric_every == 0 {
            return Err(Error::Config("batch and metric_every must be positive".into()));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config("eps must be nonnegative".into()));
        }
        match self.mode {
            TrainMode::AdvSurrogate => self.pair.require_supported()?,
            TrainMode::AdvPGD => match &self.attack {
                Some(a) => a.validate()?,
                None => return Err(Error::Config("AdvPGD needs an attack section".into())),
            },
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    /// Set when a non-finite loss or gradient ended the run.
    pub aborted: bool,
    pub stopped_early: bool,
    pub steps_run: usize,
}

impl TrainTrace {
    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.train_acc)
    }

    pub fn best_accuracy(&self) -> f64 {
        self.rows.iter().map(|r| r.train_acc).fold(f64::NAN, f64::max)
    }

    pub fn column(&self, f: impl Fn(&TraceRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }
}

/// `(sigma_w^2, sigma_b^2)` with sigma_w^2 = sum W^2 / (L N) and sigma_b^2 the
/// mean squared bias.
pub fn weight_variance(net: &Network) -> (f64, f64) {
    let c = &net.config;
    if c.l == 0 {
        return (0.0, 0.0);
    }
    let sw: f64 = net.w.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum();
    let sb: f64 = net.b.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum();
    (sw / (c.l * c.n) as f64, sb / (c.l * c.n) as f64)
}

fn log_softmax_row(f: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let m = f.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    f.mapv(|v| v - lse)
}

/// Mean cross-entropy of the logits and its gradient with respect to them.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::Dimension { what: "labels", expected: b, got: labels.len() });
    }
    let mut grad = Array2::zeros((b, k));
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.axis_iter(Axis(0)).zip(labels).enumerate() {
        if y >= k {
            return Err(Error::Precondition(format!("label {y} out of range for {k} outputs")));
        }
        let ls = log_softmax_row(row);
        loss -= ls[y];
        let mut g = grad.row_mut(i);
        g.assign(&ls.mapv(f64::exp));
        g[y] -= 1.0;
    }
    let inv = 1.0 / b.max(1) as f64;
    grad *= inv;
    Ok((loss * inv, grad))
}

/// Mean softmax cross-entropy gradient over a labeled batch, and the loss.
pub fn grad_standard(net: &Network, xs: ArrayView2<f64>, labels: &[usize]) -> Result<(ParameterGradients, f64)> {
    let cache = net.forward_batch(xs)?;
    let (loss, g) = cross_entropy(cache.out.view(), labels)?;
    let (grads, _) = net.backprop_batch(&cache, g.view())?;
    Ok((grads, loss))
}

/// Closed-form gradient of `eps * beta * omega^{L/2}` with omega taken from
/// the current weights: `(eps alpha beta omega^{L/2-1} / N) W`, zero on biases.
pub fn grad_adv_surrogate(net: &Network, eps: f64, pair: NormPair) -> Result<ParameterGradients> {
    let c = &net.config;
    let b = beta(pair, c.d, c.k)?;
    let alpha = c.alpha();
    let omega = omega_for(c.arch, alpha, weight_variance(net).0);
    let coef = eps * alpha * b * omega.powf(c.l as f64 / 2.0 - 1.0) / c.n as f64;
    Ok(scaled_weights(net, if coef.is_finite() { coef } else { 0.0 }))
}

/// Gradient of `sum W^2 / (2 L N)`: `W / (L N)`, zero on biases.
pub fn grad_l2(net: &Network) -> ParameterGradients {
    let c = &net.config;
    scaled_weights(net, 1.0 / (c.l.max(1) * c.n) as f64)
}

fn scaled_weights(net: &Network, coef: f64) -> ParameterGradients {
    let mut g = ParameterGradients::zeros(&net.config);
    for (gw, w) in g.w.iter_mut().zip(&net.w) {
        gw.assign(&(w * coef));
    }
    g
}

/// Gradient of the batch mean of `||f(x + eta) - f(x)||_q` at fixed
/// perturbations, and the loss.
pub fn grad_adv_deviation(
    net: &Network,
    xs: ArrayView2<f64>,
    etas: ArrayView2<f64>,
    q: crate::theory::Norm,
) -> Result<(ParameterGradients, f64)> {
    let clean = net.forward_batch(xs)?;
    let shifted = &xs + &etas;
    let adv = net.forward_batch(shifted.view())?;
    let delta = &adv.out - &clean.out;
    let (b, k) = delta.dim();
    let mut cot = Array2::zeros((b, k));
    let mut loss = 0.0;
    let mut buf = vec![0.0; k];
    for (i, row) in delta.axis_iter(Axis(0)).enumerate() {
        let r = row.to_vec();
        loss += crate::attack::lp_norm(&r, q);
        if norm_subgradient(&r, q, &mut buf).is_some() {
            cot.row_mut(i).assign(&Array1::from(buf.clone()));
        }
    }
    let inv = 1.0 / b.max(1) as f64;
    cot *= inv;
    let (mut g, _) = net.backprop_batch(&adv, cot.view())?;
    let neg = cot.mapv(|v| -v);
    let (g0, _) = net.backprop_batch(&clean, neg.view())?;
    g.add_scaled(&g0, 1.0);
    Ok((g, loss * inv))
}

/// `w^T diag(F) w = sum_k sum_i w_i^2 (df_k/dw_i)^2` at a single input.
pub fn fisher_rao_diag(net: &Network, x_in: &[f64]) -> Result<f64> {
    let cache = net.forward(x_in)?;
    let eye = Array2::<f64>::eye(net.config.k);
    let pre = net.preactivation_gradients(&cache, eye.view())?;
    let mut total = 0.0;
    for (l, delta) in pre.iter().enumerate() {
        let d2 = delta.mapv(|v| v * v);
        let x2 = cache.layer_input(l).row(0).mapv(|v| v * v);
        let w2 = net.w[l].mapv(|v| v * v);
        let b2 = net.b[l].mapv(|v| v * v);
        total += d2.dot(&(w2.dot(&x2) + b2)).sum();
    }
    Ok(total)
}

/// chi^(0) / chi^(L) for a uniform output cotangent.
pub fn chi_ratio(net: &Network, x_in: &[f64]) -> Result<f64> {
    let k = net.config.k;
    let chi = net.chi_profile(x_in, &vec![1.0 / (k as f64).sqrt(); k])?;
    Ok(chi[0] / chi[chi.len() - 1])
}

/// Fraction of rows whose argmax output equals the label.
pub fn accuracy(net: &Network, xs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(f64::NAN);
    }
    let mut hits = 0usize;
    for start in (0..labels.len()).step_by(256) {
        let end = (start + 256).min(labels.len());
        let out = net.output_batch(xs.slice(ndarray::s![start..end, ..]))?;
        for (row, &y) in out.axis_iter(Axis(0)).zip(&labels[start..end]) {
            let arg = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0;
            hits += usize::from(arg == y);
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

struct Adam {
    m: ParameterGradients,
    v: ParameterGradients,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const DELTA: f64 = 1e-8;

    fn step(&mut self, net: &mut Network, g: &ParameterGradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let upd = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::DELTA);
        };
        for l in 0..net.w.len() {
            ndarray::Zip::from(&mut net.w[l])
                .and(&mut self.m.w[l])
                .and(&mut self.v.w[l])
                .and(&g.w[l])
                .for_each(|p, m, v, &g| upd(p, m, v, g));
            ndarray::Zip::from(&mut net.b[l])
                .and(&mut self.m.b[l])
                .and(&mut self.v.b[l])
                .and(&g.b[l])
                .for_each(|p, m, v, &g| upd(p, m, v, g));
        }
    }
}

fn sgd_step(net: &mut Network, g: &ParameterGradients, lr: f64) {
    for l in 0..net.w.len() {
        net.w[l].scaled_add(-lr, &g.w[l]);
        net.b[l].scaled_add(-lr, &g.b[l]);
    }
}

/// Full objective gradient for one batch, and the loss (surrogate terms are
/// included in the loss value).
pub fn objective_gradient(
    net: &Network,
    xs: ArrayView2<f64>,
    labels: &[usize],
    spec: &TrainSpec,
    step: usize,
) -> Result<(ParameterGradients, f64)> {
    let (mut g, mut loss) = grad_standard(net, xs, labels)?;
    match spec.mode {
        TrainMode::Standard => {}
        TrainMode::L2Reg => {
            g.add_scaled(&grad_l2(net), 1.0);
            loss += weight_variance(net).0 / 2.0;
        }
        TrainMode::AdvSurrogate => {
            g.add_scaled(&grad_adv_surrogate(net, spec.eps, spec.pair)?, 1.0);
            let c = &net.config;
            let omega = omega_for(c.arch, c.alpha(), weight_variance(net).0);
            loss += spec.eps * beta(spec.pair, c.d, c.k)? * omega.powf(c.l as f64 / 2.0);
        }
        TrainMode::AdvPGD => {
            let mut atk = spec.attack.clone().ok_or_else(|| Error::Config("AdvPGD needs an attack section".into()))?;
            atk.seed = rng::splitmix64(atk.seed ^ rng::splitmix64(spec.seed.wrapping_add(step as u64)));
            let results = pgd_attack_batch(net, xs, &atk)?;
            let mut etas = Array2::zeros(xs.dim());
            for (mut row, r) in etas.axis_iter_mut(Axis(0)).zip(&results) {
                row.assign(&Array1::from(r.eta.clone()));
            }
            let (ga, la) = grad_adv_deviation(net, xs, etas.view(), atk.pair.q)?;
            g.add_scaled(&ga, 1.0);
            loss += la;
        }
    }
    Ok((g, loss))
}

/// Runs `spec.steps` updates in place and logs a row every `metric_every`
/// steps (plus the initial state). Deterministic given `TrainSpec::seed`.
pub fn train(net: &mut Network, dataset: &Dataset, spec: &TrainSpec) -> Result<TrainTrace> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if dataset.dim() != net.config.d {
        return Err(Error::Dimension { what: "input dimension", expected: net.config.d, got: dataset.dim() });
    }
    if let Some(&bad) = dataset.labels.iter().find(|&&y| y >= net.config.k) {
        return Err(Error::Precondition(format!("label {bad} out of range for {} outputs", net.config.k)));
    }
    let probe = normalize_sqrt_d(&dataset.image(spec.probe.min(dataset.len() - 1)).to_vec())?;
    let eval_n = spec.eval_size.min(dataset.len());
    let eval_x = dataset.images.slice(ndarray::s![..eval_n, ..]);
    let eval_y = &dataset.labels[..eval_n];

    let log = |net: &Network, step: usize| -> Result<TraceRow> {
        let (sw, sb) = weight_variance(net);
        Ok(TraceRow {
            step,
            t: step as f64 * spec.lr,
            sigma_w2: sw,
            sigma_b2: sb,
            train_acc: accuracy(net, eval_x, eval_y)?,
            fr_diag: fisher_rao_diag(net, &probe)?,
            chi_ratio: chi_ratio(net, &probe)?,
        })
    };

    let mut trace = TrainTrace::default();
    trace.rows.push(log(net, 0)?);
    let mut best = trace.rows[0].train_acc;
    let mut best_step = 0usize;
    let mut adam = Adam { m: ParameterGradients::zeros(&net.config), v: ParameterGradients::zeros(&net.config), t: 0 };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let bsz = spec.batch.min(dataset.len());

    for step in 1..=spec.steps {
        if cursor + bsz > order.len() {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng::stream(spec.seed, epoch, rng::domain::SHUFFLE));
            epoch += 1;
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bsz];
        cursor += bsz;
        let xs = dataset.images.select(Axis(0), idx);
        let ys: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();

        let (g, loss) = objective_gradient(net, xs.view(), &ys, spec, step)?;
        if !loss.is_finite() || !g.is_finite() {
            warn!(step, loss, "non-finite loss or gradient; aborting run");
            trace.aborted = true;
            trace.steps_run = step - 1;
            return Ok(trace);
        }
        match spec.optimizer {
            Optimizer::Sgd => sgd_step(net, &g, spec.lr),
            Optimizer::Adam => adam.step(net, &g, spec.lr),
        }
        trace.steps_run = step;

        if step % spec.metric_every == 0 {
            let row = log(net, step)?;
            debug!(step, loss, acc = row.train_acc, sigma_w2 = row.sigma_w2, "train");
            if row.train_acc > best {
                best = row.train_acc;
                best_step = step;
            }
            trace.rows.push(row);
            if let Some(patience) = spec.early_stop {
                if step - best_step >= patience {
                    trace.stopped_early = true;
                    return Ok(trace);
                }
            }
        }
    }
    Ok(trace)
}
