//! Monte-Carlo sampling of Jacobian and offset entries and the statistical
//! instruments used to check them.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Network, NetworkConfig};
use crate::rng;
use crate::theory::normal_cdf;

/// Critical value of the Kolmogorov distribution at significance 0.01.
pub const KS_C_001: f64 = 1.628;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Entry {
    J { row: usize, col: usize },
    A { row: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    /// Index into `MCPlan::inputs`.
    pub input: usize,
    pub entry: Entry,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCPlan {
    pub replicates: usize,
    pub base_seed: u64,
    pub config: NetworkConfig,
    pub inputs: Vec<Vec<f64>>,
    pub probes: Vec<Probe>,
    /// When false every replicate reuses the stream of replicate 0.
    #[serde(default = "yes")]
    pub independent: bool,
}

impl MCPlan {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.replicates < 2 {
            return Err(Error::Config("a Monte-Carlo plan needs at least 2 replicates".into()));
        }
        for x in &self.inputs {
            if x.len() != self.config.d {
                return Err(Error::Dimension { what: "probe input", expected: self.config.d, got: x.len() });
            }
        }
        for p in &self.probes {
            let ok = p.input < self.inputs.len()
                && match p.entry {
                    Entry::J { row, col } => row < self.config.k && col < self.config.d,
                    Entry::A { row } => row < self.config.k,
                };
            if !ok {
                return Err(Error::Config(format!("probe {p:?} is out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub sample_mean: f64,
    pub sample_var: f64,
    pub ks_statistic: f64,
    pub ks_threshold: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleReport {
    pub ks_statistic: f64,
    pub ks_threshold: f64,
    pub pass: bool,
}

/// Records the requested entries for one replicate.
pub fn sample_replicate(plan: &MCPlan, replicate: usize) -> Result<Vec<f64>> {
    let rep = if plan.independent { replicate as u64 } else { 0 };
    let net = Network::sample_replicate(&plan.config, plan.base_seed, rep)?;
    let d = plan.config.d;
    let flat: Vec<f64> = plan.inputs.iter().flatten().copied().collect();
    let xs = ArrayView2::from_shape((plan.inputs.len(), d), &flat).expect("validated shapes");
    let cache = net.forward_batch(xs)?;
    let mut regions = vec![None; plan.inputs.len()];
    let mut row = Vec::with_capacity(plan.probes.len());
    for p in &plan.probes {
        let region = regions[p.input].get_or_insert_with(|| net.linear_region_from(&cache, p.input, &plan.inputs[p.input]));
        row.push(match p.entry {
            Entry::J { row, col } => region.j[[row, col]],
            Entry::A { row } => region.a[row],
        });
    }
    Ok(row)
}

/// Sample matrix with one row per replicate and one column per probe.
pub fn sample_entries(plan: &MCPlan) -> Result<Array2<f64>> {
    plan.validate()?;
    let rows: Vec<Vec<f64>> =
        (0..plan.replicates).into_par_iter().map(|r| sample_replicate(plan, r)).collect::<Result<_>>()?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((plan.replicates, plan.probes.len()), flat).expect("row lengths match"))
}

/// Sum by a fixed binary tree, independent of thread count.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

pub fn mean(v: &[f64]) -> f64 {
    pairwise_sum(v) / v.len() as f64
}

/// Unbiased sample variance.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    let sq: Vec<f64> = v.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / (v.len() as f64 - 1.0)
}

pub fn geometric_mean(v: &[f64]) -> f64 {
    let logs: Vec<f64> = v.iter().map(|x| x.ln()).collect();
    mean(&logs).exp()
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("non-finite sample".into()));
    }
    let mut s = v.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    Ok(s)
}

/// One-sample Kolmogorov-Smirnov test against N(mean, var) at level 0.01.
pub fn ks_test(samples: &[f64], mean_ref: f64, var_ref: f64) -> Result<FitReport> {
    if !(var_ref > 0.0) {
        return Err(Error::Degenerate(format!("reference variance must be positive, got {var_ref}")));
    }
    if samples.len() < 50 {
        return Err(Error::Degenerate(format!("need at least 50 samples, got {}", samples.len())));
    }
    let s = sorted(samples)?;
    let n = s.len() as f64;
    let sd = var_ref.sqrt();
    let stat = s.iter().enumerate().fold(0.0f64, |m, (i, &x)| {
        let f = normal_cdf((x - mean_ref) / sd);
        m.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    });
    let threshold = KS_C_001 / n.sqrt();
    Ok(FitReport {
        sample_mean: mean(samples),
        sample_var: variance(samples),
        ks_statistic: stat,
        ks_threshold: threshold,
        pass: stat < threshold,
    })
}

/// Two-sample Kolmogorov-Smirnov test at level 0.01.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TwoSampleReport> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Degenerate("two-sample test needs at least 2 samples each".into()));
    }
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut stat) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        stat = stat.max((i as f64 / n - j as f64 / m).abs());
    }
    let threshold = KS_C_001 * ((n + m) / (n * m)).sqrt();
    Ok(TwoSampleReport { ks_statistic: stat, ks_threshold: threshold, pass: stat < threshold })
}

/// Pearson correlation coefficient.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Degenerate("correlation needs equal lengths of at least 2".into()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let cross: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    let va: Vec<f64> = a.iter().map(|x| (x - ma) * (x - ma)).collect();
    let vb: Vec<f64> = b.iter().map(|y| (y - mb) * (y - mb)).collect();
    let (sa, sb) = (pairwise_sum(&va), pairwise_sum(&vb));
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::Degenerate("zero-variance input to correlation".into()));
    }
    Ok(pairwise_sum(&cross) / (sa * sb).sqrt())
}

/// Fraction of trials in which the largest of `n` absolute N(0, sigma2)
/// draws exceeds `sqrt(2 sigma2 ln n)`.
pub fn max_abs_gaussian_check(n: usize, sigma2: f64, trials: usize, seed: u64) -> Result<f64> {
    if n < 2 || trials < 100 || !(sigma2 >= 0.0) {
        return Err(Error::Precondition("need n >= 2, trials >= 100 and sigma2 >= 0".into()));
    }
    let level = (2.0 * sigma2 * (n as f64).ln()).sqrt();
    let hits: usize = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut g = rng::stream(seed, t as u64, rng::domain::MISC);
            let mut z = vec![0.0; n];
            rng::fill_normal(&mut g, sigma2.sqrt(), &mut z);
            usize::from(z.iter().fold(0.0f64, |m, x| m.max(x.abs())) > level)
        })
        .sum();
    Ok(hits as f64 / trials as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Degenerate("linear fit needs equal lengths of at least 2".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("constant regressor".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit { slope, intercept: my - slope * mx, r2 })
}

/// Deterministic random input of Euclidean norm `sqrt(d)`.
pub fn random_input(d: usize, seed: u64, index: u64) -> Vec<f64> {
    let v = rng::normal_vec(seed, index, rng::domain::INPUT, 1.0, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x * (d as f64).sqrt() / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Arch;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn calibrated_samples_pass() {
        let z = rng::normal_vec(3, 0, 99, 2.0, 10_000);
        let r = ks_test(&z, 0.0, 4.0).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.pass, r.ks_statistic < r.ks_threshold);
        assert_relative_eq!(r.ks_threshold, 0.01628, epsilon = 1e-12);
    }

    #[test]
    fn uniform_samples_fail() {
        let mut g = rng::stream(1, 0, 0);
        let u: Vec<f64> = (0..5000).map(|_| g.gen_range(-1.0..1.0)).collect();
        assert!(!ks_test(&u, 0.0, 1.0).unwrap().pass);
        assert!(ks_test(&u[..10], 0.0, 1.0).is_err());
        assert!(ks_test(&u, 0.0, 0.0).is_err());
    }

    #[test]
    fn two_sample_agrees_with_shifted_samples() {
        let a = rng::normal_vec(5, 0, 1, 1.0, 3000);
        let b = rng::normal_vec(5, 1, 1, 1.0, 3000);
        assert!(ks_two_sample(&a, &b).unwrap().pass);
        let c: Vec<f64> = b.iter().map(|x| x + 0.5).collect();
        assert!(!ks_two_sample(&a, &c).unwrap().pass);
        let same = ks_two_sample(&a, &a).unwrap();
        assert_eq!(same.ks_statistic, 0.0);
    }

    #[test]
    fn correlation_basics() {
        let a = [1.0, 2.0, 3.5, -1.0];
        assert_relative_eq!(correlation(&a, &a).unwrap(), 1.0, epsilon = 1e-15);
        let neg: Vec<f64> = a.iter().map(|x| -2.0 * x + 1.0).collect();
        assert_relative_eq!(correlation(&a, &neg).unwrap(), -1.0, epsilon = 1e-15);
        assert!(correlation(&a, &[1.0; 4]).is_err());
    }

    #[test]
    fn max_abs_exceedance_edge_cases() {
        assert_eq!(max_abs_gaussian_check(100, 0.0, 200, 1).unwrap(), 0.0);
        assert!(max_abs_gaussian_check(2, 1.0, 2000, 1).unwrap() > 0.3);
        assert!(max_abs_gaussian_check(1, 1.0, 200, 1).is_err());
    }

    #[test]
    fn degenerate_plan_repeats_rows() {
        let cfg = NetworkConfig::relu(Arch::Vanilla, 6, 2, 3, 20, 2.0, 0.01);
        let plan = MCPlan {
            replicates: 2,
            base_seed: 4,
            config: cfg.clone(),
            inputs: vec![random_input(6, 1, 0)],
            probes: vec![Probe { input: 0, entry: Entry::J { row: 1, col: 3 } }, Probe { input: 0, entry: Entry::A { row: 0 } }],
            independent: false,
        };
        let s = sample_entries(&plan).unwrap();
        assert_eq!(s.row(0), s.row(1));
        let indep = sample_entries(&MCPlan { independent: true, ..plan.clone() }).unwrap();
        assert_ne!(indep.row(0), indep.row(1));
        assert_eq!(indep, sample_entries(&MCPlan { independent: true, ..plan.clone() }).unwrap());
        let bad = MCPlan { probes: vec![Probe { input: 0, entry: Entry::J { row: 2, col: 0 } }], ..plan };
        assert!(sample_entries(&bad).is_err());
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.5 * v).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert_relative_eq!(f.slope, -0.5, epsilon = 1e-12);
        assert_relative_eq!(f.intercept, 3.0, epsilon = 1e-12);
        assert_relative_eq!(f.r2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        assert_relative_eq!(pairwise_sum(&v), v.iter().sum::<f64>(), epsilon = 1e-10);
    }

    #[test]
    fn random_inputs_have_norm_sqrt_d() {
        let x = random_input(37, 2, 5);
        assert_relative_eq!(x.iter().map(|v| v * v).sum::<f64>(), 37.0, max_relative = 1e-12);
    }
}
