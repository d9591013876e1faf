//! lp-ball attacks on the output deviation `||f(x + eta) - f(x)||_q`, exact
//! operator norms and the single signed-gradient attack.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{check_len, Error, Result};
use crate::net::Network;
use crate::rng;
use crate::theory::{Norm, NormPair};

fn default_step_scale() -> f64 {
    2.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub pair: NormPair,
    pub eps: f64,
    pub iters: usize,
    pub restarts: usize,
    #[serde(default = "default_step_scale")]
    pub step_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(pair: NormPair, eps: f64, iters: usize, restarts: usize) -> Self {
        AttackSpec { pair, eps, iters, restarts, step_scale: default_step_scale(), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.restarts == 0 {
            return Err(Error::Config("attack needs iters >= 1 and restarts >= 1".into()));
        }
        if !(self.step_scale > 0.0) || !(self.eps >= 0.0) {
            return Err(Error::Config("attack needs step_scale > 0 and eps >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub eta: Vec<f64>,
    pub loss: f64,
    /// Best-so-far loss after every evaluation, one vector per restart.
    pub trace: Vec<Vec<f64>>,
}

pub fn lp_norm(v: &[f64], p: Norm) -> f64 {
    p.of(v.iter().copied())
}

/// Euclidean projection onto `{w : ||w||_p <= eps}`.
pub fn project_lp_ball(v: &[f64], p: Norm, eps: f64) -> Vec<f64> {
    let mut w = v.to_vec();
    project_in_place(&mut w, p, eps);
    w
}

fn project_in_place(v: &mut [f64], p: Norm, eps: f64) {
    if eps <= 0.0 {
        v.fill(0.0);
        return;
    }
    match p {
        Norm::Inf => v.iter_mut().for_each(|x| *x = x.clamp(-eps, eps)),
        Norm::Two => {
            let n = lp_norm(v, Norm::Two);
            if n > eps {
                let s = eps / n;
                v.iter_mut().for_each(|x| *x *= s);
            }
        }
        Norm::One => {
            if lp_norm(v, Norm::One) <= eps {
                return;
            }
            let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
            u.sort_unstable_by(|a, b| b.total_cmp(a));
            let mut cum = 0.0;
            let mut theta = 0.0;
            for (j, &uj) in u.iter().enumerate() {
                cum += uj;
                let t = (cum - eps) / (j + 1) as f64;
                if uj - t > 0.0 {
                    theta = t;
                } else {
                    break;
                }
            }
            v.iter_mut().for_each(|x| *x = x.signum() * (x.abs() - theta).max(0.0));
        }
    }
}

/// (p, q) operator norm `max_{||x||_p = 1} ||J x||_q` for the computable pairs.
pub fn operator_norm(j: ArrayView2<f64>, pair: NormPair) -> Result<f64> {
    pair.require_supported()?;
    let col = |q: Norm| j.axis_iter(Axis(1)).map(|c| q.of(c.iter().copied())).fold(0.0, f64::max);
    let row = |p: Norm| j.axis_iter(Axis(0)).map(|r| p.of(r.iter().copied())).fold(0.0, f64::max);
    Ok(match (pair.p, pair.q) {
        (Norm::One, q) => col(q),
        (Norm::Two, Norm::Two) => spectral_norm(j),
        (Norm::Two, Norm::Inf) => row(Norm::Two),
        (Norm::Inf, Norm::Inf) => row(Norm::One),
        _ => unreachable!("filtered by require_supported"),
    })
}

/// Largest singular value via power iteration on `J^T J`.
pub fn spectral_norm(j: ArrayView2<f64>) -> f64 {
    let (best, _) = j
        .axis_iter(Axis(1))
        .enumerate()
        .map(|(i, c)| (i, c.iter().map(|x| x * x).sum::<f64>()))
        .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
    if j.ncols() == 0 || j.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut v = j.t().dot(&j.column(best));
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let nv = v.dot(&v).sqrt();
        if nv == 0.0 {
            return 0.0;
        }
        v /= nv;
        let w = j.t().dot(&j.dot(&v));
        let next = v.dot(&w);
        let done = (next - lambda).abs() <= 1e-8 * next.abs();
        lambda = next;
        v = w;
        if done {
            break;
        }
    }
    lambda.max(0.0).sqrt()
}

fn random_in_ball(rng: &mut ChaCha8Rng, p: Norm, eps: f64, out: &mut [f64]) {
    let d = out.len();
    match p {
        Norm::Inf => out.iter_mut().for_each(|x| *x = rng.gen_range(-eps..=eps)),
        Norm::Two => {
            out.iter_mut().for_each(|x| *x = StandardNormal.sample(rng));
            let n = lp_norm(out, Norm::Two).max(f64::MIN_POSITIVE);
            let r = eps * rng.gen::<f64>().powf(1.0 / d as f64);
            out.iter_mut().for_each(|x| *x *= r / n);
        }
        Norm::One => {
            let mut total: f64 = Exp1.sample(rng);
            out.iter_mut().for_each(|x| {
                let e: f64 = Exp1.sample(rng);
                total += e;
                *x = if rng.gen::<bool>() { e } else { -e };
            });
            out.iter_mut().for_each(|x| *x *= eps / total);
        }
    }
}

/// Subgradient of `||delta||_q`; `None` when delta is exactly zero.
pub(crate) fn norm_subgradient(delta: &[f64], q: Norm, out: &mut [f64]) -> Option<()> {
    out.fill(0.0);
    match q {
        Norm::One => {
            if delta.iter().all(|&x| x == 0.0) {
                return None;
            }
            out.iter_mut().zip(delta).for_each(|(o, &x)| *o = sgn(x));
        }
        Norm::Two => {
            let n = lp_norm(delta, Norm::Two);
            if n == 0.0 {
                return None;
            }
            out.iter_mut().zip(delta).for_each(|(o, &x)| *o = x / n);
        }
        Norm::Inf => {
            let (k, m) = delta
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |a, (i, &x)| if x.abs() > a.1 { (i, x.abs()) } else { a });
            if m == 0.0 {
                return None;
            }
            out[k] = sgn(delta[k]);
        }
    }
    Some(())
}

fn random_cotangent(rng: &mut ChaCha8Rng, q: Norm, out: &mut [f64]) {
    out.fill(0.0);
    match q {
        Norm::One => out.iter_mut().for_each(|o| *o = if rng.gen::<bool>() { 1.0 } else { -1.0 }),
        Norm::Two => {
            out.iter_mut().for_each(|o| *o = StandardNormal.sample(rng));
            let n = lp_norm(out, Norm::Two).max(f64::MIN_POSITIVE);
            out.iter_mut().for_each(|o| *o /= n);
        }
        Norm::Inf => {
            let k = rng.gen_range(0..out.len());
            out[k] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
    }
}

/// Independent evaluation of `||J||_{p,q}` that avoids the closed forms:
/// enumeration of sign vectors for p = inf, of l1-ball vertices for p = 1 and
/// restarted ascent on the unit sphere (power iteration for q = 2) for p = 2.
pub fn brute_force_operator_norm(j: ArrayView2<f64>, pair: NormPair, restarts: usize, seed: u64) -> Result<f64> {
    pair.require_supported()?;
    let (k, d) = j.dim();
    let q = pair.q;
    Ok(match pair.p {
        Norm::Inf => {
            if d > 24 {
                return Err(Error::Precondition(format!("sign enumeration over {d} columns is too large")));
            }
            let mut best = 0.0f64;
            let mut y = vec![0.0; k];
            for mask in 0u32..(1u32 << d) {
                y.fill(0.0);
                for (c, col) in j.axis_iter(Axis(1)).enumerate() {
                    let s = if mask >> c & 1 == 1 { -1.0 } else { 1.0 };
                    y.iter_mut().zip(col.iter()).for_each(|(a, &b)| *a += s * b);
                }
                best = best.max(lp_norm(&y, q));
            }
            best
        }
        Norm::One => j.axis_iter(Axis(1)).map(|c| q.of(c.iter().copied())).fold(0.0, f64::max),
        Norm::Two => {
            let mut best = 0.0f64;
            let mut g = vec![0.0; k];
            for r in 0..restarts.max(1) {
                let mut x = rng::normal_vec(seed, r as u64, rng::domain::MISC, 1.0, d);
                let mut prev = -1.0;
                for _ in 0..5000 {
                    let n = lp_norm(&x, Norm::Two);
                    if n == 0.0 {
                        break;
                    }
                    x.iter_mut().for_each(|v| *v /= n);
                    let y = j.dot(&ndarray::ArrayView1::from(&x[..])).to_vec();
                    let val = lp_norm(&y, q);
                    best = best.max(val);
                    if val - prev <= 1e-15 * val || norm_subgradient(&y, q, &mut g).is_none() {
                        break;
                    }
                    prev = val;
                    x = j.t().dot(&ndarray::ArrayView1::from(&g[..])).to_vec();
                }
            }
            best
        }
    })
}

/// Signed unit cotangent on the output whose gradient has the largest dual
/// norm, i.e. the best first-order ascent direction for an l_inf output loss.
fn steepest_coordinate(j: ArrayView2<f64>, p: Norm, out: &mut [f64]) {
    let dual = match p {
        Norm::One => Norm::Inf,
        Norm::Two => Norm::Two,
        Norm::Inf => Norm::One,
    };
    let (kk, _) = j
        .axis_iter(Axis(0))
        .map(|r| dual.of(r.iter().copied()))
        .enumerate()
        .fold((0, -1.0f64), |a, (i, v)| if v > a.1 { (i, v) } else { a });
    out.fill(0.0);
    out[kk] = 1.0;
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One attack problem inside a batched run: input row, norms and budget.
#[derive(Clone, Copy, Debug)]
pub struct AttackJob {
    pub input: usize,
    pub pair: NormPair,
    pub eps: f64,
}

/// Multi-restart PGD with cosine-decayed steps. Every (job, restart) pair is
/// one row of a shared batch, so all problems advance through the network in
/// the same GEMMs. `spec.pair` and `spec.eps` are ignored in favour of the
/// per-job values.
pub fn pgd_jobs(net: &Network, xs: ArrayView2<f64>, jobs: &[AttackJob], spec: &AttackSpec) -> Result<Vec<AttackResult>> {
    spec.validate()?;
    check_len("input", net.config.d, xs.ncols())?;
    let d = net.config.d;
    let k = net.config.k;
    let r = spec.restarts;
    let rows = jobs.len() * r;
    if jobs.iter().any(|j| j.input >= xs.nrows() || !(j.eps >= 0.0)) {
        return Err(Error::Config("attack job refers to a missing input or has negative eps".into()));
    }
    let f0 = net.output_batch(xs)?;
    let mut base = Array2::<f64>::zeros((rows, d));
    let mut eta = Array2::<f64>::zeros((rows, d));
    let mut rngs = Vec::with_capacity(rows);
    for (ji, job) in jobs.iter().enumerate() {
        for ri in 0..r {
            let row = ji * r + ri;
            base.row_mut(row).assign(&xs.row(job.input));
            let mut g = rng::stream(spec.seed, ji as u64, rng::domain::ATTACK + ri as u64);
            if ri > 0 {
                random_in_ball(&mut g, job.pair.p, job.eps, eta.row_mut(row).as_slice_mut().expect("contiguous"));
            }
            rngs.push(g);
        }
    }
    let mut alive = vec![true; rows];
    let mut best = vec![0.0f64; rows];
    let mut best_eta = eta.clone();
    let mut trace: Vec<Vec<f64>> = vec![Vec::with_capacity(spec.iters + 1); rows];
    let mut cot = Array2::<f64>::zeros((rows, k));
    let mut delta = vec![0.0; k];
    let x_cache = net.forward_batch(xs)?;
    let mut seeds: std::collections::HashMap<usize, Array2<f64>> = std::collections::HashMap::new();

    for it in 0..=spec.iters {
        let cache = net.forward_batch((&base + &eta).view())?;
        for row in 0..rows {
            let job = &jobs[row / r];
            let out = cache.out.row(row);
            let f = f0.row(job.input);
            delta.iter_mut().zip(out.iter().zip(f.iter())).for_each(|(dl, (a, b))| *dl = a - b);
            let loss = lp_norm(&delta, job.pair.q);
            if alive[row] && !loss.is_finite() {
                warn!(row, iteration = it, "non-finite attack loss, restart abandoned");
                alive[row] = false;
            }
            if alive[row] && loss > best[row] {
                best[row] = loss;
                best_eta.row_mut(row).assign(&eta.row(row));
            }
            trace[row].push(best[row]);
            let c = cot.row_mut(row).into_slice().expect("contiguous");
            if !alive[row] || job.eps == 0.0 {
                c.fill(0.0);
            } else if norm_subgradient(&delta, job.pair.q, c).is_none() {
                if job.pair.q == Norm::Inf {
                    let j = seeds.entry(job.input).or_insert_with(|| net.linear_region_from(&x_cache, job.input, &xs.row(job.input).to_vec()).j);
                    steepest_coordinate(j.view(), job.pair.p, c);
                } else {
                    random_cotangent(&mut rngs[row], job.pair.q, c);
                }
            }
        }
        if it == spec.iters {
            break;
        }
        let grad = net.input_gradients(&cache, cot.view())?;
        let decay = 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / spec.iters as f64).cos());
        for row in 0..rows {
            if !alive[row] {
                continue;
            }
            let job = &jobs[row / r];
            let step = spec.step_scale * job.eps / spec.iters as f64 * decay;
            let g = grad.row(row);
            if g.iter().any(|v| !v.is_finite()) {
                warn!(row, iteration = it, "non-finite attack gradient, restart abandoned");
                alive[row] = false;
                continue;
            }
            let mut e = eta.row_mut(row);
            match job.pair.p {
                Norm::Inf => e.zip_mut_with(&g, |x, &gv| *x += step * sgn(gv)),
                Norm::Two => {
                    let n = g.dot(&g).sqrt();
                    if n > 0.0 {
                        e.zip_mut_with(&g, |x, &gv| *x += step * gv / n);
                    }
                }
                Norm::One => {
                    let (kk, m) = g
                        .iter()
                        .enumerate()
                        .fold((0, 0.0f64), |a, (i, &x)| if x.abs() > a.1 { (i, x.abs()) } else { a });
                    if m > 0.0 {
                        e[kk] += step * sgn(g[kk]);
                    }
                }
            }
            project_in_place(e.as_slice_mut().expect("contiguous"), job.pair.p, job.eps);
        }
    }

    let mut results = Vec::with_capacity(jobs.len());
    for (ji, job) in jobs.iter().enumerate() {
        let rows_of = ji * r..(ji + 1) * r;
        let winner = rows_of.clone().fold(ji * r, |a, b| if best[b] > best[a] { b } else { a });
        let eta_best: Vec<f64> = best_eta.row(winner).to_vec();
        let x: Vec<f64> = xs.row(job.input).iter().zip(&eta_best).map(|(a, b)| a + b).collect();
        let out = net.output(&x)?;
        let loss = job.pair.q.of(out.iter().zip(f0.row(job.input).iter()).map(|(a, b)| a - b));
        results.push(AttackResult { eta: eta_best, loss, trace: rows_of.map(|i| trace[i].clone()).collect() });
    }
    Ok(results)
}

pub fn pgd_attack(net: &Network, x_in: &[f64], spec: &AttackSpec) -> Result<AttackResult> {
    check_len("input", net.config.d, x_in.len())?;
    let xs = ArrayView2::from_shape((1, x_in.len()), x_in).expect("row view");
    let job = AttackJob { input: 0, pair: spec.pair, eps: spec.eps };
    Ok(pgd_jobs(net, xs, &[job], spec)?.remove(0))
}

/// Attacks every row of `xs` with the same spec.
pub fn pgd_attack_batch(net: &Network, xs: ArrayView2<f64>, spec: &AttackSpec) -> Result<Vec<AttackResult>> {
    let jobs: Vec<AttackJob> = (0..xs.nrows()).map(|i| AttackJob { input: i, pair: spec.pair, eps: spec.eps }).collect();
    pgd_jobs(net, xs, &jobs, spec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignAttack {
    pub flipped: bool,
    /// The output sign actually changed at `x + eta`.
    pub sign_changed: bool,
    /// `|Jx + a| < |J eta|`, i.e. the step crosses zero in the local linear model.
    pub linear_crossing: bool,
    pub eta: Vec<f64>,
}

/// Single step `eta = eps * sgn(J)`, oriented against the sign of `f(x)`.
pub fn single_sign_attack(net: &Network, x_in: &[f64], eps: f64) -> Result<SignAttack> {
    if net.config.k != 1 {
        return Err(Error::Precondition(format!("single sign attack needs K = 1, got {}", net.config.k)));
    }
    let region = net.linear_region(x_in)?;
    let f = region.apply(x_in)[0];
    let orient = if f >= 0.0 { -1.0 } else { 1.0 };
    let eta: Vec<f64> = region.j.row(0).iter().map(|&jv| orient * eps * sgn(jv)).collect();
    if eps == 0.0 {
        return Ok(SignAttack { flipped: false, sign_changed: false, linear_crossing: false, eta });
    }
    let x: Vec<f64> = x_in.iter().zip(&eta).map(|(a, b)| a + b).collect();
    let f_adv = net.output(&x)?[0];
    let f_here = net.output(x_in)?[0];
    let sign_changed = (f_adv >= 0.0) != (f_here >= 0.0);
    let j_eta: f64 = region.j.row(0).iter().zip(&eta).map(|(a, b)| a * b).sum();
    let linear_crossing = f.abs() < j_eta.abs();
    Ok(SignAttack { flipped: sign_changed || linear_crossing, sign_changed, linear_crossing, eta })
}
