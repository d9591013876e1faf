//! Experiment drivers behind the CLI subcommands. Each returns structured
//! results; writing files is left to the caller.

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{brute_force_operator_norm, operator_norm, pgd_attack_batch, pgd_jobs, single_sign_attack, AttackJob, AttackSpec};
use crate::data::{normalize_sqrt_d, BoundSweepRow, Dataset, ExperimentConfig};
use crate::error::{Error, Result};
use crate::net::{Arch, Network, NetworkConfig};
use crate::rng;
use crate::stats::{self, Entry, FitReport, MCPlan, Probe};
use crate::theory::{self, EvolutionMode, EvolutionSpec, NormPair, TheoryParams};
use crate::train::{self, TrainMode, TrainSpec, TrainTrace};

fn default_attack(cfg: &ExperimentConfig, pair: NormPair, eps: f64) -> AttackSpec {
    let mut a = cfg.attack.clone().unwrap_or_else(|| AttackSpec::new(pair, eps, 50, 3));
    a.pair = pair;
    a.eps = eps;
    a
}

fn eps_values(cfg: &ExperimentConfig) -> Vec<f64> {
    if !cfg.sweep.eps_values.is_empty() {
        cfg.sweep.eps_values.clone()
    } else {
        vec![cfg.attack.as_ref().map_or(0.1, |a| a.eps)]
    }
}

fn train_spec(cfg: &ExperimentConfig) -> Result<TrainSpec> {
    cfg.train.clone().ok_or_else(|| Error::Config("this subcommand needs a train section".into()))
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeFit {
    pub probe: Probe,
    pub theory_var: f64,
    pub report: FitReport,
}

#[derive(Clone, Debug)]
pub struct JacobianRun {
    pub plan: MCPlan,
    /// One row per replicate, one column per probe.
    pub samples: ndarray::Array2<f64>,
    pub fits: Vec<ProbeFit>,
}

impl JacobianRun {
    pub fn passed(&self) -> bool {
        self.fits.iter().all(|f| f.report.pass)
    }
}

pub fn theory_variance(params: &TheoryParams, entry: Entry) -> f64 {
    match entry {
        Entry::J { .. } => params.jacobian_variance(),
        Entry::A { .. } => params.bias_variance(),
    }
}

/// Monte-Carlo law of Jacobian and offset entries at random inputs of norm sqrt(d).
pub fn sample_jacobian(cfg: &ExperimentConfig) -> Result<JacobianRun> {
    let mc = cfg.mc.as_ref().ok_or_else(|| Error::Config("sample-jacobian needs an mc section".into()))?;
    let d = cfg.network.d;
    let inputs: Vec<Vec<f64>> = (0..mc.inputs).map(|i| stats::random_input(d, cfg.seed, i as u64)).collect();
    let probes: Vec<Probe> =
        (0..mc.inputs).flat_map(|input| mc.entries.iter().map(move |&entry| Probe { input, entry })).collect();
    let plan = MCPlan { replicates: mc.replicates, base_seed: cfg.seed, config: cfg.network.clone(), inputs, probes, independent: true };
    let samples = stats::sample_entries(&plan)?;
    let params = TheoryParams::from_config(&cfg.network);
    let fits = plan
        .probes
        .iter()
        .enumerate()
        .map(|(c, &probe)| {
            let v = theory_variance(&params, probe.entry);
            Ok(ProbeFit { probe, theory_var: v, report: stats::ks_test(&samples.column(c).to_vec(), 0.0, v)? })
        })
        .collect::<Result<_>>()?;
    Ok(JacobianRun { plan, samples, fits })
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundSample {
    pub d: usize,
    pub pair: NormPair,
    pub eps: f64,
    pub sample: usize,
    pub loss: f64,
    pub exact: f64,
    pub bound: f64,
}

#[derive(Clone, Debug)]
pub struct BoundRun {
    pub rows: Vec<BoundSweepRow>,
    pub samples: Vec<BoundSample>,
}

fn d_values(cfg: &ExperimentConfig) -> Vec<usize> {
    if cfg.sweep.d_values.is_empty() {
        vec![cfg.network.d]
    } else {
        cfg.sweep.d_values.clone()
    }
}

/// PGD-achieved adversarial loss against the mean-field bound, one fresh
/// network and input per sample. `exact` is eps times the operator norm of the
/// Jacobian of the linear region at the clean input.
pub fn bound_samples(cfg: &ExperimentConfig, pairs: &[NormPair], eps: &[f64]) -> Result<Vec<BoundSample>> {
    for p in pairs {
        p.require_supported()?;
    }
    let template = default_attack(cfg, NormPair::INF_INF, 0.0);
    let mut out = Vec::new();
    for d in d_values(cfg) {
        let net_cfg = NetworkConfig { d, ..cfg.network.clone() };
        net_cfg.validate()?;
        let params = TheoryParams::from_config(&net_cfg);
        let jobs: Vec<AttackJob> =
            pairs.iter().flat_map(|&pair| eps.iter().map(move |&e| AttackJob { input: 0, pair, eps: e })).collect();
        let per: Vec<Vec<BoundSample>> = (0..cfg.sweep.samples)
            .into_par_iter()
            .map(|s| {
                let net = Network::sample_replicate(&net_cfg, cfg.seed, s as u64)?;
                let x = stats::random_input(d, cfg.seed, s as u64);
                let xs = ndarray::ArrayView2::from_shape((1, d), &x).expect("row view");
                let mut spec = template.clone();
                spec.seed = rng::splitmix64(cfg.seed ^ rng::splitmix64(s as u64 + ((d as u64) << 32)));
                let res = pgd_jobs(&net, xs, &jobs, &spec)?;
                let j = net.linear_region(&x)?.j;
                jobs.iter()
                    .zip(res)
                    .map(|(job, r)| {
                        Ok(BoundSample {
                            d,
                            pair: job.pair,
                            eps: job.eps,
                            sample: s,
                            loss: r.loss,
                            exact: job.eps * operator_norm(j.view(), job.pair)?,
                            bound: theory::adv_loss_bound(&params, job.pair, job.eps)?,
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        out.extend(per.into_iter().flatten());
    }
    Ok(out)
}

pub fn bound_sweep(cfg: &ExperimentConfig) -> Result<BoundRun> {
    if cfg.sweep.samples < 2 {
        return Err(Error::Config("bound-sweep needs sweep.samples >= 2".into()));
    }
    let eps = eps_values(cfg);
    let samples = bound_samples(cfg, &cfg.sweep.pairs, &eps)?;
    let mut rows = Vec::new();
    for d in d_values(cfg) {
        for &pair in &cfg.sweep.pairs {
            for &e in &eps {
                let sel: Vec<&BoundSample> = samples.iter().filter(|s| s.d == d && s.pair == pair && s.eps == e).collect();
                let losses: Vec<f64> = sel.iter().map(|s| s.loss).collect();
                rows.push(BoundSweepRow {
                    d,
                    k: cfg.network.k,
                    n: cfg.network.n,
                    l: cfg.network.l,
                    pair,
                    eps: e,
                    sample_mean: stats::mean(&losses),
                    sample_std: stats::variance(&losses).sqrt(),
                    bound: sel[0].bound,
                });
            }
        }
    }
    Ok(BoundRun { rows, samples })
}

/// Theory curve for the bound sweep on the same axis values.
pub fn bound_theory(cfg: &ExperimentConfig) -> Result<Vec<BoundSweepRow>> {
    let mut rows = Vec::new();
    for d in d_values(cfg) {
        let params = TheoryParams::from_config(&NetworkConfig { d, ..cfg.network.clone() });
        for &pair in &cfg.sweep.pairs {
            for e in eps_values(cfg) {
                let b = theory::adv_loss_bound(&params, pair, e)?;
                rows.push(BoundSweepRow {
                    d,
                    k: cfg.network.k,
                    n: cfg.network.n,
                    l: cfg.network.l,
                    pair,
                    eps: e,
                    sample_mean: b,
                    sample_std: 0.0,
                    bound: b,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct EvolveRun {
    pub trace: TrainTrace,
    /// Closed-form sigma_w^2(t) anchored at the measured initial value.
    pub theory: Vec<f64>,
    pub fit: stats::LinearFit,
    pub theory_slope: f64,
}

pub fn evolution_spec(net_cfg: &NetworkConfig, spec: &TrainSpec, init: f64) -> Option<EvolutionSpec> {
    let mode = match (spec.mode, net_cfg.arch) {
        (TrainMode::AdvSurrogate, Arch::Vanilla) => EvolutionMode::AdvVanilla,
        (TrainMode::AdvSurrogate, Arch::Residual) => EvolutionMode::AdvResidual,
        (TrainMode::L2Reg, _) => EvolutionMode::L2Reg,
        _ => return None,
    };
    let params = TheoryParams::from_config(net_cfg).with_sigma_w2(init);
    Some(EvolutionSpec { mode, eps: spec.eps, pair: spec.pair, init, params, exact: false })
}

/// Trains one network and compares sigma_w^2(t) with the closed form.
pub fn evolve(cfg: &ExperimentConfig, data: &Dataset) -> Result<EvolveRun> {
    let spec = train_spec(cfg)?;
    let mut net = Network::sample(&cfg.network, cfg.seed)?;
    let trace = train::train(&mut net, data, &spec)?;
    let t = trace.column(|r| r.t);
    let s = trace.column(|r| r.sigma_w2);
    let s0 = s[0];
    let (theory, theory_slope) = match evolution_spec(&cfg.network, &spec, s0) {
        Some(es) => (t.iter().map(|&tt| theory::sigma_w2_at(&es, tt)).collect::<Result<_>>()?, theory::sigma_w2_slope(&es)?),
        None => (vec![s0; t.len()], 0.0),
    };
    let fit = if t.len() >= 2 { stats::linear_fit(&t, &s)? } else { stats::LinearFit { slope: 0.0, intercept: s0, r2: 1.0 } };
    Ok(EvolveRun { trace, theory, fit, theory_slope })
}

#[derive(Clone, Debug, Serialize)]
pub struct HeatCell {
    pub l: usize,
    pub n: usize,
    pub lr: f64,
    pub final_acc: f64,
    pub best_acc: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub aborted: bool,
}

/// Trains one network and returns its final accuracy and run statistics.
pub fn train_cell(cfg: &ExperimentConfig, data: &Dataset, l: usize, n: usize, lr: f64) -> Result<HeatCell> {
    let mut spec = train_spec(cfg)?;
    spec.lr = lr;
    let net_cfg = NetworkConfig { l, n, d: data.dim(), ..cfg.network.clone() };
    let mut net = Network::sample(&net_cfg, cfg.seed)?;
    let trace = train::train(&mut net, data, &spec)?;
    Ok(HeatCell {
        l,
        n,
        lr,
        final_acc: trace.final_accuracy(),
        best_acc: trace.best_accuracy(),
        steps_run: trace.steps_run,
        stopped_early: trace.stopped_early,
        aborted: trace.aborted,
    })
}

/// Final train accuracy over the (L, N) grid; with several learning rates
/// the best final accuracy per cell is kept.
pub fn trainability_heatmap(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<HeatCell>> {
    let spec = train_spec(cfg)?;
    let ls = if cfg.sweep.l_values.is_empty() { vec![cfg.network.l] } else { cfg.sweep.l_values.clone() };
    let ns = if cfg.sweep.n_values.is_empty() { vec![cfg.network.n] } else { cfg.sweep.n_values.clone() };
    let lrs = if cfg.sweep.lr_values.is_empty() { vec![spec.lr] } else { cfg.sweep.lr_values.clone() };
    let mut cells = Vec::new();
    for &l in &ls {
        for &n in &ns {
            cells.extend(lrs.iter().map(|&lr| (l, n, lr)));
        }
    }
    let runs: Vec<HeatCell> = cells.par_iter().map(|&(l, n, lr)| train_cell(cfg, data, l, n, lr)).collect::<Result<_>>()?;
    let mut best: Vec<HeatCell> = Vec::new();
    for r in runs {
        match best.iter_mut().find(|b| b.l == r.l && b.n == r.n) {
            Some(b) if r.final_acc > b.final_acc || b.final_acc.is_nan() => *b = r,
            Some(_) => {}
            None => best.push(r),
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, Serialize)]
pub struct HeatTheory {
    pub l: usize,
    pub n: usize,
    /// Untrainability time (vanilla) or trainability onset (residual).
    pub threshold_t: f64,
    pub budget_t: f64,
    pub predicted_trainable: bool,
}

pub fn heatmap_theory(cfg: &ExperimentConfig, d: usize) -> Result<Vec<HeatTheory>> {
    let spec = train_spec(cfg)?;
    let (pair, eps) = match (&spec.attack, spec.mode) {
        (Some(a), TrainMode::AdvPGD) => (a.pair, a.eps),
        _ => (spec.pair, spec.eps),
    };
    let ls = if cfg.sweep.l_values.is_empty() { vec![cfg.network.l] } else { cfg.sweep.l_values.clone() };
    let ns = if cfg.sweep.n_values.is_empty() { vec![cfg.network.n] } else { cfg.sweep.n_values.clone() };
    let budget = spec.steps as f64 * spec.lr;
    let mut rows = Vec::new();
    for &l in &ls {
        for &n in &ns {
            let params = TheoryParams::from_config(&NetworkConfig { l, n, d, ..cfg.network.clone() });
            let (threshold_t, trainable) = match cfg.network.arch {
                Arch::Vanilla => {
                    let t = theory::untrainable_t_vanilla(&params, pair, eps, cfg.sweep.m_lower)?;
                    (t, budget <= t)
                }
                Arch::Residual => match theory::trainable_onset_t_residual(&params, pair, eps, cfg.sweep.m_upper) {
                    Ok(t) => (t, budget >= t),
                    Err(Error::Precondition(_)) => (0.0, true),
                    Err(e) => return Err(e),
                },
            };
            rows.push(HeatTheory { l, n, threshold_t, budget_t: budget, predicted_trainable: trainable });
        }
    }
    Ok(rows)
}

/// Diagonal Fisher-Rao norm of `samples` fresh networks at random inputs of
/// norm sqrt(d).
pub fn capacity_at_init(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    (0..cfg.sweep.samples)
        .into_par_iter()
        .map(|s| {
            let net = Network::sample_replicate(&cfg.network, cfg.seed, s as u64)?;
            train::fisher_rao_diag(&net, &stats::random_input(cfg.network.d, cfg.seed, s as u64))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CapacityRun {
    pub init: Vec<f64>,
    pub trace: Option<TrainTrace>,
    pub theory: Vec<f64>,
}

pub fn capacity(cfg: &ExperimentConfig, data: Option<&Dataset>) -> Result<CapacityRun> {
    let init = capacity_at_init(cfg)?;
    let (trace, theory) = match (data, &cfg.train) {
        (Some(ds), Some(spec)) => {
            let mut net = Network::sample(&cfg.network, cfg.seed)?;
            let trace = train::train(&mut net, ds, spec)?;
            let params = TheoryParams::from_config(&cfg.network);
            let th = trace
                .rows
                .iter()
                .map(|r| theory::fisher_rao_expected(&params, spec.pair, spec.eps, r.t))
                .collect::<Result<_>>()?;
            (Some(trace), th)
        }
        _ => (None, Vec::new()),
    };
    Ok(CapacityRun { init, trace, theory })
}

#[derive(Clone, Debug, Serialize)]
pub struct FlipRow {
    pub eps: f64,
    pub nets: usize,
    pub flips: usize,
    pub rate: f64,
    pub theory: f64,
}

/// Success rate of the single signed-gradient attack over fresh scalar-output
/// networks, one random input of norm sqrt(d) each.
pub fn flip_prob(cfg: &ExperimentConfig) -> Result<Vec<FlipRow>> {
    let params = TheoryParams::from_config(&cfg.network);
    let nets = cfg.sweep.samples;
    let flips: Vec<Vec<bool>> = (0..nets)
        .into_par_iter()
        .map(|s| {
            let net = Network::sample_replicate(&cfg.network, cfg.seed, s as u64)?;
            let x = stats::random_input(cfg.network.d, cfg.seed, s as u64);
            eps_values(cfg).iter().map(|&e| Ok(single_sign_attack(&net, &x, e)?.flipped)).collect()
        })
        .collect::<Result<_>>()?;
    eps_values(cfg)
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let f = flips.iter().filter(|v| v[i]).count();
            Ok(FlipRow { eps: e, nets, flips: f, rate: f as f64 / nets.max(1) as f64, theory: theory::flip_probability(&params, e)? })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct OpnormRow {
    pub trial: usize,
    pub rows: usize,
    pub cols: usize,
    pub pair: NormPair,
    pub closed_form: f64,
    pub brute_force: f64,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl OpnormRow {
    pub fn pass(&self) -> bool {
        self.rel_err <= self.tolerance
    }
}

/// Closed-form operator norms against brute force on random matrices of
/// size at most 8x8.
pub fn opnorm_selftest(cfg: &ExperimentConfig) -> Result<Vec<OpnormRow>> {
    use rand::Rng;
    let trials = cfg.sweep.samples;
    let per: Vec<Vec<OpnormRow>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut g = rng::stream(cfg.seed, t as u64, rng::domain::MISC + 1);
            let (r, c) = (g.gen_range(1..=8usize), g.gen_range(1..=8usize));
            let v = rng::normal_vec(cfg.seed, t as u64, rng::domain::MISC + 2, 1.0, r * c);
            let j = ndarray::Array2::from_shape_vec((r, c), v).expect("sized");
            NormPair::SUPPORTED
                .iter()
                .map(|&pair| {
                    let a = operator_norm(j.view(), pair)?;
                    let b = brute_force_operator_norm(j.view(), pair, 20, cfg.seed ^ t as u64)?;
                    let tolerance = if pair == NormPair::new(theory::Norm::Two, theory::Norm::Two) { 1e-4 } else { 1e-6 };
                    Ok(OpnormRow { trial: t, rows: r, cols: c, pair, closed_form: a, brute_force: b, rel_err: (a - b).abs() / a.abs().max(f64::MIN_POSITIVE), tolerance })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct EqualityRow {
    pub sample: usize,
    pub pair: NormPair,
    pub eps: f64,
    pub achieved: f64,
    pub exact: f64,
    pub bound: f64,
}

/// Achieved loss against the bound in the small-budget, single-output regime
/// where the two coincide in expectation.
pub fn equality_check(cfg: &ExperimentConfig) -> Result<Vec<EqualityRow>> {
    let pairs: Vec<NormPair> = cfg.sweep.pairs.clone();
    Ok(bound_samples(cfg, &pairs, &eps_values(cfg))?
        .into_iter()
        .map(|s| EqualityRow { sample: s.sample, pair: s.pair, eps: s.eps, achieved: s.loss, exact: s.exact, bound: s.bound })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustRow {
    pub l: usize,
    pub n: usize,
    pub parameters: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub final_train_acc: f64,
}

/// Trains on `train_set` and reports clean and PGD accuracy on `test_set`.
/// The attack maximizes the output deviation, not the classification loss.
pub fn robust_eval(cfg: &ExperimentConfig, train_set: &Dataset, test_set: &Dataset) -> Result<Vec<RobustRow>> {
    let spec = train_spec(cfg)?;
    let atk0 = cfg.attack.clone().ok_or_else(|| Error::Config("robust-eval needs an attack section".into()))?;
    let atk = AttackSpec { iters: 50, restarts: 5, ..atk0 };
    let ls = if cfg.sweep.l_values.is_empty() { vec![cfg.network.l] } else { cfg.sweep.l_values.clone() };
    let ns = if cfg.sweep.n_values.is_empty() { vec![cfg.network.n] } else { cfg.sweep.n_values.clone() };
    let cells: Vec<(usize, usize)> = ls.iter().flat_map(|&l| ns.iter().map(move |&n| (l, n))).collect();
    cells
        .par_iter()
        .map(|&(l, n)| {
            let net_cfg = NetworkConfig { l, n, d: train_set.dim(), ..cfg.network.clone() };
            let mut net = Network::sample(&net_cfg, cfg.seed)?;
            let trace = train::train(&mut net, train_set, &spec)?;
            let clean = train::accuracy(&net, test_set.images.view(), &test_set.labels)?;
            let mut robust_hits = 0usize;
            for start in (0..test_set.len()).step_by(64) {
                let end = (start + 64).min(test_set.len());
                let xs = test_set.images.slice(ndarray::s![start..end, ..]);
                let res = pgd_attack_batch(&net, xs, &atk)?;
                let mut adv = xs.to_owned();
                for (mut row, r) in adv.axis_iter_mut(ndarray::Axis(0)).zip(&res) {
                    row.zip_mut_with(&ndarray::ArrayView1::from(&r.eta[..]), |a, &e| *a += e);
                }
                let acc = train::accuracy(&net, adv.view(), &test_set.labels[start..end])?;
                robust_hits += (acc * (end - start) as f64).round() as usize;
            }
            Ok(RobustRow {
                l,
                n,
                parameters: net.num_parameters(),
                clean_acc: clean,
                robust_acc: robust_hits as f64 / test_set.len().max(1) as f64,
                final_train_acc: trace.final_accuracy(),
            })
        })
        .collect()
}

/// Chi ratio chi^(0)/chi^(L) at a normalized input for `samples` fresh nets.
pub fn chi_ratios(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    (0..cfg.sweep.samples)
        .into_par_iter()
        .map(|s| {
            let net = Network::sample_replicate(&cfg.network, cfg.seed, s as u64)?;
            let x = normalize_sqrt_d(&stats::random_input(cfg.network.d, cfg.seed, s as u64))?;
            train::chi_ratio(&net, &x)
        })
        .collect()
}
