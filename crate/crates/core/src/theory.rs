//! Closed-form mean-field predictors. Everything here is a scalar formula.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::net::{omega_for, Arch, NetworkConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Inf,
}

impl Norm {
    pub fn of(self, v: impl IntoIterator<Item = f64>) -> f64 {
        let it = v.into_iter();
        match self {
            Norm::One => it.map(f64::abs).sum(),
            Norm::Two => it.map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Inf => it.fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    pub fn code(self) -> i32 {
        match self {
            Norm::One => 1,
            Norm::Two => 2,
            Norm::Inf => 0,
        }
    }

    pub fn from_code(c: i32) -> Option<Norm> {
        match c {
            1 => Some(Norm::One),
            2 => Some(Norm::Two),
            0 => Some(Norm::Inf),
            _ => None,
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::One => "1",
            Norm::Two => "2",
            Norm::Inf => "inf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Norm> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" => Ok(Norm::One),
            "2" => Ok(Norm::Two),
            "inf" | "infinity" | "∞" => Ok(Norm::Inf),
            other => Err(Error::Config(format!("unknown norm {other:?}"))),
        }
    }
}

/// Input-side norm `p` and output-side norm `q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormPair {
    pub p: Norm,
    pub q: Norm,
}

impl NormPair {
    pub const fn new(p: Norm, q: Norm) -> Self {
        NormPair { p, q }
    }

    pub const INF_INF: NormPair = NormPair::new(Norm::Inf, Norm::Inf);

    /// The six pairs with a closed-form operator norm and a known `beta`.
    pub const SUPPORTED: [NormPair; 6] = [
        NormPair::new(Norm::One, Norm::One),
        NormPair::new(Norm::One, Norm::Two),
        NormPair::new(Norm::One, Norm::Inf),
        NormPair::new(Norm::Two, Norm::Two),
        NormPair::new(Norm::Two, Norm::Inf),
        NormPair::new(Norm::Inf, Norm::Inf),
    ];

    pub fn is_supported(self) -> bool {
        NormPair::SUPPORTED.contains(&self)
    }

    pub fn require_supported(self) -> Result<()> {
        if self.is_supported() {
            Ok(())
        } else {
            Err(Error::UnsupportedPair { p: self.p.to_string(), q: self.q.to_string() })
        }
    }
}

impl fmt::Display for NormPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.p, self.q)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub alpha: f64,
    pub omega: f64,
    pub arch: Arch,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub sigma_b2: f64,
    /// Weight variance the predictors treat as the initial value.
    pub sigma_w2: f64,
    /// max(|u|, |v|).
    pub max_slope: f64,
}

impl TheoryParams {
    pub fn from_config(c: &NetworkConfig) -> Self {
        TheoryParams {
            alpha: c.alpha(),
            omega: c.omega(),
            arch: c.arch,
            l: c.l,
            n: c.n,
            d: c.d,
            k: c.k,
            sigma_b2: c.sigma_b2,
            sigma_w2: c.sigma_w2,
            max_slope: c.u.abs().max(c.v.abs()),
        }
    }

    /// Same parameters with the weight variance replaced, `omega` recomputed.
    pub fn with_sigma_w2(&self, sigma_w2: f64) -> Self {
        TheoryParams { sigma_w2, omega: omega_for(self.arch, self.alpha, sigma_w2), ..self.clone() }
    }

    pub fn omega_pow_l(&self) -> f64 {
        self.omega.powi(self.l as i32)
    }

    /// sum_{k=1}^{L} omega^{k-1}
    pub fn geometric_sum(&self) -> f64 {
        let mut s = 0.0;
        let mut p = 1.0;
        for _ in 0..self.l {
            s += p;
            p *= self.omega;
        }
        s
    }

    pub fn jacobian_variance(&self) -> f64 {
        self.omega_pow_l() / self.d as f64
    }

    pub fn bias_variance(&self) -> f64 {
        self.alpha * self.sigma_b2 * self.geometric_sum()
    }
}

pub fn beta(pair: NormPair, d: usize, k: usize) -> Result<f64> {
    let (d, k) = (d as f64, k as f64);
    use std::f64::consts::PI;
    use Norm::*;
    Ok(match (pair.p, pair.q) {
        (One, One) => (2.0 * k * k / (PI * d)).sqrt(),
        (One, Two) => (k / d).sqrt(),
        (One, Inf) => (2.0 * k.ln() / d).sqrt(),
        (Two, Two) => 1.0 + (k / d).sqrt(),
        (Two, Inf) => 1.0,
        (Inf, Inf) => (2.0 * d / PI).sqrt(),
        _ => return Err(Error::UnsupportedPair { p: pair.p.to_string(), q: pair.q.to_string() }),
    })
}

pub fn beta_scaled(pair: NormPair, d: usize, k: usize) -> Result<f64> {
    let b = beta(pair, d, k)?;
    let lp = match pair.p {
        Norm::One => d as f64,
        Norm::Two => (d as f64).sqrt(),
        Norm::Inf => 1.0,
    };
    let lq = match pair.q {
        Norm::One => 1.0 / k as f64,
        Norm::Two => 1.0 / (k as f64).sqrt(),
        Norm::Inf => 1.0,
    };
    Ok(lp * lq * b)
}

pub fn adv_loss_bound(params: &TheoryParams, pair: NormPair, eps: f64) -> Result<f64> {
    Ok(eps * beta(pair, params.d, params.k)? * params.omega.powf(params.l as f64 / 2.0))
}

/// Bounds obtained by multiplying per-layer norms: the Marchenko-Pastur
/// chain and the Frobenius chain.
pub fn naive_decomposition_bounds(params: &TheoryParams) -> (f64, f64) {
    let l = params.l as f64;
    let (n, d, k) = (params.n as f64, params.d as f64, params.k as f64);
    let act = params.max_slope.powf(l);
    let sw = params.sigma_w2.powf(l / 2.0);
    let mp = act * (1.0 + (n / d).sqrt()) * (1.0 + (k / n).sqrt()) * 2f64.powf(l) * sw;
    let frob = act * k.sqrt() * n.powf((l + 1.0) / 2.0) * sw;
    (mp, frob)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvolutionMode {
    AdvVanilla,
    AdvResidual,
    L2Reg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSpec {
    pub mode: EvolutionMode,
    pub eps: f64,
    pub pair: NormPair,
    /// sigma_w^2(0)
    pub init: f64,
    pub params: TheoryParams,
    /// Use the exact exponential solution instead of the linearized one
    /// (residual mode only).
    #[serde(default)]
    pub exact: bool,
}

pub fn sigma_w2_at(spec: &EvolutionSpec, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Precondition(format!("time must be nonnegative, got {t}")));
    }
    let p = &spec.params;
    let n = p.n as f64;
    let l = p.l as f64;
    if t > n / 10.0 {
        warn!(t, n, "time horizon beyond N/10; linearized dynamics are unreliable");
    }
    let s0 = spec.init;
    let rate = || -> Result<f64> { Ok(spec.eps * p.alpha * beta(spec.pair, p.d, p.k)? / n) };
    Ok(match spec.mode {
        EvolutionMode::AdvVanilla => {
            let w0 = p.alpha * s0;
            (1.0 - rate()? * w0.powf(l / 2.0 - 1.0) * t) * s0
        }
        EvolutionMode::AdvResidual => {
            if p.alpha * s0 > 0.2 {
                warn!(alpha_sigma = p.alpha * s0, "residual evolution assumes alpha*sigma_w^2(0) << 1");
            }
            let lp = l / 2.0 - 1.0;
            if spec.exact {
                if s0 == 0.0 {
                    0.0
                } else {
                    1.0 / ((1.0 / s0 + p.alpha * lp) * (rate()? * t).exp() - p.alpha * lp)
                }
            } else {
                (1.0 - (1.0 + p.alpha * lp * s0) * rate()? * t) * s0
            }
        }
        EvolutionMode::L2Reg => (1.0 - t / (l * n)) * s0,
    })
}

/// d sigma_w^2 / dt at t = 0.
pub fn sigma_w2_slope(spec: &EvolutionSpec) -> Result<f64> {
    let exact = EvolutionSpec { exact: false, ..spec.clone() };
    Ok(sigma_w2_at(&exact, 1.0)? - sigma_w2_at(&exact, 0.0)?)
}

fn check_mm(m_upper: f64, m_lower: f64) -> Result<()> {
    if !(0.0 <= m_lower && m_lower <= 1.0 && 1.0 <= m_upper) {
        return Err(Error::Precondition(format!("need 0 <= m <= 1 <= M, got m={m_lower}, M={m_upper}")));
    }
    Ok(())
}

/// Range of alpha*sigma_w^2 satisfying the (M, m) trainability condition.
pub fn trainability_interval(arch: Arch, m_upper: f64, m_lower: f64, l: usize) -> Result<(f64, f64)> {
    check_mm(m_upper, m_lower)?;
    if l == 0 {
        return Err(Error::Precondition("depth must be at least 1".into()));
    }
    let inv = 1.0 / l as f64;
    Ok(match arch {
        Arch::Vanilla => (m_lower.powf(inv), m_upper.powf(inv)),
        Arch::Residual => (0.0, m_upper.powf(inv) - 1.0),
    })
}

/// Training time after which a vanilla network leaves the trainable range.
pub fn untrainable_t_vanilla(params: &TheoryParams, pair: NormPair, eps: f64, m_lower: f64) -> Result<f64> {
    check_mm(1.0, m_lower)?;
    if (params.alpha * params.sigma_w2 - 1.0).abs() > 1e-9 {
        warn!(alpha_sigma = params.alpha * params.sigma_w2, "threshold assumes alpha*sigma_w^2(0) = 1");
    }
    let b = beta(pair, params.d, params.k)?;
    if eps == 0.0 {
        return Ok(f64::INFINITY);
    }
    let l = params.l as f64;
    Ok((1.0 - m_lower.powf(1.0 / l)) * params.n as f64 / (eps * params.alpha * b))
}

/// Training time after which an over-initialized residual network becomes trainable.
pub fn trainable_onset_t_residual(params: &TheoryParams, pair: NormPair, eps: f64, m_upper: f64) -> Result<f64> {
    check_mm(m_upper, 0.0)?;
    let l = params.l as f64;
    let limit = m_upper.powf(1.0 / l) - 1.0;
    let excess = params.alpha * params.sigma_w2 - limit;
    if excess < 0.0 {
        return Err(Error::Precondition("trainability condition already holds at t = 0".into()));
    }
    let b = beta(pair, params.d, params.k)?;
    if excess == 0.0 {
        return Ok(0.0);
    }
    if eps == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(excess * params.n as f64
        / (eps * params.alpha.powf(l / 2.0 + 1.0) * b * params.sigma_w2.powf(l / 2.0)))
}

/// Expected Fisher-Rao norm at training time `t` under adversarial training.
pub fn fisher_rao_expected(params: &TheoryParams, pair: NormPair, eps: f64, t: f64) -> Result<f64> {
    let b = beta(pair, params.d, params.k)?;
    let (l, k, n) = (params.l as f64, params.k as f64, params.n as f64);
    let a = params.alpha;
    if params.sigma_b2 != 0.0 {
        warn!(sigma_b2 = params.sigma_b2, "capacity prediction assumes zero bias variance");
    }
    let c = eps * a * b * t / n;
    Ok(match params.arch {
        Arch::Vanilla => {
            if (a * params.sigma_w2 - 1.0).abs() > 1e-9 {
                warn!(alpha_sigma = a * params.sigma_w2, "capacity prediction assumes alpha*sigma_w^2(0) = 1");
            }
            l * k * (1.0 - c * l)
        }
        Arch::Residual => {
            let s = a * params.sigma_w2;
            if s > 0.2 {
                warn!(alpha_sigma = s, "capacity prediction assumes alpha*sigma_w^2(0) << 1");
            }
            l * k * s * (1.0 + (l - 1.0) * s - (2.0 * (l - 1.0) * s + 1.0) * (1.0 + (l / 2.0 - 1.0) * s) * c)
        }
    })
}

/// Probability that a single signed-gradient step of size `eps` flips the
/// sign of a scalar-output random network at an input with norm sqrt(d).
pub fn flip_probability(params: &TheoryParams, eps: f64) -> Result<f64> {
    if params.k != 1 {
        return Err(Error::Precondition(format!("flip probability needs K = 1, got {}", params.k)));
    }
    let wl = params.omega_pow_l();
    let denom = std::f64::consts::PI * (wl + params.bias_variance());
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(erf(eps * (wl * params.d as f64 / denom).sqrt()).clamp(0.0, 1.0))
}

/// Expected squared output coordinate at an input of Euclidean norm `x_norm`.
pub fn mean_squared_output(params: &TheoryParams, x_norm: f64) -> f64 {
    params.omega_pow_l() / params.d as f64 * x_norm * x_norm + params.bias_variance()
}

/// Error function, rational approximation with absolute error below 1.5e-7.
pub fn erf(x: f64) -> f64 {
    const A: [f64; 5] = [0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429];
    const P: f64 = 0.3275911;
    let s = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + P * x);
    let poly = ((((A[4] * t + A[3]) * t + A[2]) * t + A[1]) * t + A[0]) * t;
    let y = 1.0 - poly * (-x * x).exp();
    if x == 0.0 {
        0.0
    } else {
        s * y
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const INF_INF: NormPair = NormPair::new(Norm::Inf, Norm::Inf);
    const TWO_INF: NormPair = NormPair::new(Norm::Two, Norm::Inf);

    fn relu_params(arch: Arch, d: usize, k: usize, l: usize, n: usize, sw: f64, sb: f64) -> TheoryParams {
        TheoryParams::from_config(&NetworkConfig::relu(arch, d, k, l, n, sw, sb))
    }

    #[test]
    fn beta_table_values() {
        assert_relative_eq!(beta(INF_INF, 784, 10).unwrap(), 22.340768, epsilon = 1e-6);
        assert_eq!(beta(TWO_INF, 17, 3).unwrap(), 1.0);
        assert_eq!(beta(NormPair::new(Norm::Two, Norm::Two), 9, 9).unwrap(), 2.0);
        assert!(beta(NormPair::new(Norm::Inf, Norm::Two), 9, 9).is_err());
        assert!(beta(NormPair::new(Norm::Two, Norm::One), 9, 9).is_err());
        assert!(beta(NormPair::new(Norm::Inf, Norm::One), 9, 9).is_err());
    }

    #[test]
    fn scaled_beta_values() {
        let one_one = NormPair::new(Norm::One, Norm::One);
        assert_relative_eq!(beta_scaled(one_one, 100, 7).unwrap(), (200.0 / std::f64::consts::PI).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(beta_scaled(NormPair::new(Norm::Two, Norm::Two), 400, 4).unwrap(), 11.0, epsilon = 1e-12);
        assert_eq!(beta_scaled(INF_INF, 55, 3).unwrap(), beta(INF_INF, 55, 3).unwrap());
    }

    #[test]
    fn loss_bound_values() {
        let p = relu_params(Arch::Vanilla, 500, 1, 3, 100, 2.0, 0.0);
        assert_relative_eq!(adv_loss_bound(&p, TWO_INF, 0.1).unwrap(), 0.1, epsilon = 1e-12);
        assert_eq!(adv_loss_bound(&p, TWO_INF, 0.0).unwrap(), 0.0);
        assert_relative_eq!(adv_loss_bound(&p, INF_INF, 0.1).unwrap(), 1.7841, epsilon = 1e-4);
    }

    #[test]
    fn naive_bounds() {
        let p = relu_params(Arch::Vanilla, 64, 64, 1, 64, 1.0, 0.0);
        let (mp, frob) = naive_decomposition_bounds(&p);
        // 1 * (1 + 1) * (1 + 1) * 2 * 1
        assert_relative_eq!(mp, 8.0, epsilon = 1e-12);
        assert_relative_eq!(frob, 8.0 * 64.0, epsilon = 1e-9);
        let z = relu_params(Arch::Vanilla, 64, 64, 3, 64, 0.0, 0.0);
        assert_eq!(naive_decomposition_bounds(&z), (0.0, 0.0));
        let deep = relu_params(Arch::Vanilla, 100, 10, 10, 1000, 2.0, 0.0);
        let (mp, _) = naive_decomposition_bounds(&deep);
        assert!(mp / deep.omega.powf(5.0) > 1e4);
    }

    fn spec(mode: EvolutionMode, init: f64, params: TheoryParams) -> EvolutionSpec {
        EvolutionSpec { mode, eps: 0.3, pair: INF_INF, init, params, exact: false }
    }

    #[test]
    fn evolution_values() {
        let p = relu_params(Arch::Vanilla, 784, 10, 2, 1000, 2.0, 0.0);
        let s = spec(EvolutionMode::AdvVanilla, 2.0, p);
        assert_relative_eq!(sigma_w2_at(&s, 10.0).unwrap(), 1.93298, epsilon = 1e-5);
        assert_eq!(sigma_w2_at(&s, 0.0).unwrap(), 2.0);
        assert!(sigma_w2_at(&s, -1.0).is_err());
        let l2 = spec(EvolutionMode::L2Reg, 2.0, relu_params(Arch::Vanilla, 784, 10, 10, 1000, 2.0, 0.0));
        assert_relative_eq!(sigma_w2_at(&l2, 100.0).unwrap(), 0.99 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_exact_matches_linearized_for_small_t() {
        let p = relu_params(Arch::Residual, 784, 10, 10, 1000, 0.1, 0.0);
        let lin = spec(EvolutionMode::AdvResidual, 0.1, p);
        let ex = EvolutionSpec { exact: true, ..lin.clone() };
        for t in [0.0, 0.01, 0.1] {
            let a = sigma_w2_at(&lin, t).unwrap();
            let b = sigma_w2_at(&ex, t).unwrap();
            assert!((a - b).abs() < 1e-3 * 0.1, "t={t}: {a} vs {b}");
        }
    }

    #[test]
    fn slope_ratio_adv_over_l2_is_eps_alpha_beta_l() {
        let p = relu_params(Arch::Vanilla, 784, 10, 10, 500, 2.0, 0.0);
        let adv = sigma_w2_slope(&spec(EvolutionMode::AdvVanilla, 2.0, p.clone())).unwrap();
        let l2 = sigma_w2_slope(&spec(EvolutionMode::L2Reg, 2.0, p)).unwrap();
        let expected = 0.3 * 0.5 * beta(INF_INF, 784, 10).unwrap() * 10.0;
        assert_relative_eq!(adv / l2, expected, max_relative = 1e-9);
        assert_relative_eq!(expected, 33.51, epsilon = 0.01);
    }

    #[test]
    fn trainability_intervals() {
        let (lo, hi) = trainability_interval(Arch::Vanilla, 1e4, 1e-4, 20).unwrap();
        assert_relative_eq!(lo, 0.6310, epsilon = 1e-4);
        assert_relative_eq!(hi, 1.5849, epsilon = 1e-4);
        let e = std::f64::consts::E;
        let (lo, hi) = trainability_interval(Arch::Residual, e, 0.5, 7).unwrap();
        assert_eq!(lo, 0.0);
        assert_relative_eq!(hi, e.powf(1.0 / 7.0) - 1.0, epsilon = 1e-15);
        assert_eq!(trainability_interval(Arch::Vanilla, 1.0, 1.0, 5).unwrap(), (1.0, 1.0));
        assert!(trainability_interval(Arch::Vanilla, 0.5, 0.1, 5).is_err());
    }

    #[test]
    fn vanilla_threshold_values() {
        let mut p = relu_params(Arch::Vanilla, 784, 10, 20, 256, 2.0, 0.0);
        let t = untrainable_t_vanilla(&p, INF_INF, 0.3, 1e-4).unwrap();
        assert_relative_eq!(t, 28.2, epsilon = 0.05);
        p.n = 512;
        assert_relative_eq!(untrainable_t_vanilla(&p, INF_INF, 0.3, 1e-4).unwrap(), 2.0 * t, max_relative = 1e-12);
        assert_eq!(untrainable_t_vanilla(&p, INF_INF, 0.3, 1.0).unwrap(), 0.0);
        assert_eq!(untrainable_t_vanilla(&p, INF_INF, 0.0, 1e-4).unwrap(), f64::INFINITY);
    }

    #[test]
    fn residual_onset_matches_integrated_dynamics() {
        let p = relu_params(Arch::Residual, 784, 1, 4, 1000, 4.0, 0.0);
        let two_inf = TWO_INF;
        let e = std::f64::consts::E;
        let t = trainable_onset_t_residual(&p, two_inf, 0.3, e).unwrap();
        // Integrate d s/dt = -(eps alpha beta / N) (alpha s)^{L/2-1} s with the
        // power taken on alpha*s, and stop when alpha*s reaches M^{1/L}-1.
        let target = e.powf(0.25) - 1.0;
        let c = 0.3 * 0.5 / 1000.0;
        let (mut s, mut time, h) = (4.0f64, 0.0f64, 1e-3);
        let f = |s: f64| -c * (0.5 * s).powf(1.0) * s;
        while 0.5 * s > target {
            let k1 = f(s);
            let k2 = f(s + 0.5 * h * k1);
            let k3 = f(s + 0.5 * h * k2);
            let k4 = f(s + h * k3);
            s += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            time += h;
        }
        // The closed form is the first-order (linear in t) estimate of this crossing time.
        let linear = (0.5 * 4.0 - target) * 1000.0 / (0.3 * 0.5f64.powf(3.0) * 16.0);
        assert_relative_eq!(t, linear, max_relative = 1e-12);
        assert!(time > t, "linearized time {t} should undershoot integrated time {time}");
        let boundary = TheoryParams { sigma_w2: target / 0.5, ..p.clone() };
        assert!(trainable_onset_t_residual(&boundary, two_inf, 0.3, e).unwrap().abs() < 1e-9);
        assert_eq!(trainable_onset_t_residual(&p, two_inf, 0.0, e).unwrap(), f64::INFINITY);
        let small = TheoryParams { sigma_w2: 0.01, ..p };
        assert!(trainable_onset_t_residual(&small, two_inf, 0.3, e).is_err());
    }

    #[test]
    fn fisher_rao_values() {
        let p = relu_params(Arch::Vanilla, 784, 10, 10, 1000, 2.0, 0.0);
        assert_relative_eq!(fisher_rao_expected(&p, INF_INF, 0.3, 0.0).unwrap(), 100.0, epsilon = 1e-12);
        assert_relative_eq!(fisher_rao_expected(&p, INF_INF, 0.3, 10.0).unwrap(), 66.49, epsilon = 0.01);
        let r = relu_params(Arch::Residual, 784, 10, 10, 1000, 0.0, 0.0);
        assert_eq!(fisher_rao_expected(&r, INF_INF, 0.3, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn flip_probability_values() {
        let p = relu_params(Arch::Vanilla, 2000, 1, 5, 100, 2.0, 0.01);
        assert_eq!(flip_probability(&p, 0.0).unwrap(), 0.0);
        assert_relative_eq!(flip_probability(&p, 0.05).unwrap(), 0.9220, epsilon = 5e-4);
        let wide = relu_params(Arch::Vanilla, 2_000_000, 1, 5, 100, 2.0, 0.01);
        assert!(flip_probability(&wide, 0.05).unwrap() > 0.999_999);
        let multi = relu_params(Arch::Vanilla, 20, 3, 5, 100, 2.0, 0.01);
        assert!(flip_probability(&multi, 0.05).is_err());
    }

    #[test]
    fn mean_squared_output_values() {
        let p = relu_params(Arch::Vanilla, 300, 1, 10, 100, 2.0, 0.0);
        assert_relative_eq!(mean_squared_output(&p, 300f64.sqrt()), 1.0, epsilon = 1e-12);
        let p0 = relu_params(Arch::Vanilla, 300, 1, 0, 100, 2.0, 0.5);
        assert_relative_eq!(mean_squared_output(&p0, 3.0), 9.0 / 300.0, epsilon = 1e-15);
        let pb = relu_params(Arch::Vanilla, 300, 1, 10, 100, 2.0, 0.01);
        assert_relative_eq!(mean_squared_output(&pb, 300f64.sqrt()), 1.05, epsilon = 1e-12);
    }

    #[test]
    fn erf_accuracy_against_reference_values() {
        // High-precision reference values.
        let cases = [
            (0.1, 0.1124629160182849),
            (0.5, 0.5204998778130465),
            (1.0, 0.8427007929497149),
            (1.2464, 0.9220448127559083),
            (2.0, 0.9953222650189527),
            (3.5, 0.9999992569016276),
        ];
        for (x, want) in cases {
            assert!((erf(x) - want).abs() < 1.5e-7, "erf({x})");
            assert!((erf(-x) + want).abs() < 1.5e-7);
        }
        assert_eq!(erf(0.0), 0.0);
    }

    proptest! {
        #[test]
        fn scaled_beta_is_lambda_times_beta(pi in 0usize..6, d in 1usize..5000, k in 2usize..500) {
            let pair = NormPair::SUPPORTED[pi];
            let lp = match pair.p { Norm::One => d as f64, Norm::Two => (d as f64).sqrt(), Norm::Inf => 1.0 };
            let lq = match pair.q { Norm::One => 1.0 / k as f64, Norm::Two => 1.0 / (k as f64).sqrt(), Norm::Inf => 1.0 };
            prop_assert_eq!(beta_scaled(pair, d, k).unwrap(), lp * lq * beta(pair, d, k).unwrap());
        }

        #[test]
        fn bound_monotone(e1 in 0.0f64..1.0, de in 0.0f64..1.0, l in 1usize..20, sw in 2.01f64..4.0) {
            let p = relu_params(Arch::Vanilla, 100, 10, l, 100, sw, 0.0);
            let a = adv_loss_bound(&p, INF_INF, e1).unwrap();
            prop_assert!(adv_loss_bound(&p, INF_INF, e1 + de).unwrap() >= a);
            let deeper = relu_params(Arch::Vanilla, 100, 10, l + 1, 100, sw, 0.0);
            prop_assert!(adv_loss_bound(&deeper, INF_INF, e1).unwrap() >= a);
            let wider = relu_params(Arch::Vanilla, 100, 10, l, 100, sw + 0.1, 0.0);
            prop_assert!(adv_loss_bound(&wider, INF_INF, e1).unwrap() >= a);
        }

        #[test]
        fn mp_bound_dominates_on_relu(l in 1usize..30, n in 10usize..5000, d in 10usize..5000) {
            let p = relu_params(Arch::Vanilla, d, 10, l, n, 2.0, 0.0);
            let (mp, _) = naive_decomposition_bounds(&p);
            prop_assert!(mp >= p.omega.powf(l as f64 / 2.0));
        }

        #[test]
        fn evolution_linear_in_t(t in 0.0f64..10.0, init in 0.5f64..3.0) {
            let p = relu_params(Arch::Vanilla, 784, 10, 10, 1000, init, 0.0);
            for mode in [EvolutionMode::AdvVanilla, EvolutionMode::L2Reg] {
                let s = spec(mode, init, p.clone());
                let a = sigma_w2_at(&s, t).unwrap();
                let b = sigma_w2_at(&s, 2.0 * t).unwrap();
                let z = sigma_w2_at(&s, 0.0).unwrap();
                prop_assert!(((b - z) - 2.0 * (a - z)).abs() < 1e-12);
            }
        }

        #[test]
        fn vanilla_threshold_scaling(n in 10usize..5000, eps in 0.01f64..1.0) {
            let p = relu_params(Arch::Vanilla, 784, 10, 20, n, 2.0, 0.0);
            let t1 = untrainable_t_vanilla(&p, INF_INF, eps, 1e-4).unwrap();
            let p2 = TheoryParams { n: 2 * n, ..p.clone() };
            prop_assert!((untrainable_t_vanilla(&p2, INF_INF, eps, 1e-4).unwrap() / t1 - 2.0).abs() < 1e-12);
            prop_assert!((untrainable_t_vanilla(&p, INF_INF, 2.0 * eps, 1e-4).unwrap() / t1 - 0.5).abs() < 1e-12);
        }

        #[test]
        fn flip_probability_in_unit_interval_and_monotone(eps in 0.0f64..0.2, de in 0.0f64..0.1, d in 1usize..5000) {
            let p = relu_params(Arch::Vanilla, d, 1, 5, 100, 2.0, 0.01);
            let a = flip_probability(&p, eps).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(flip_probability(&p, eps + de).unwrap() >= a);
            let p2 = relu_params(Arch::Vanilla, d + 10, 1, 5, 100, 2.0, 0.01);
            prop_assert!(flip_probability(&p2, eps).unwrap() >= a);
        }
    }
}
