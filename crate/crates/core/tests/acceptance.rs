//! End-to-end acceptance criteria. Every test prints one `PASS`/`FAIL` line
//! with the measured quantity and its tolerance, then asserts the criterion.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use mfadvlab::attack::AttackSpec;
use mfadvlab::data::{load_idx, Dataset, ExperimentConfig, McSection};
use mfadvlab::experiment::{self, EvolveRun};
use mfadvlab::net::{Arch, Network, NetworkConfig};
use mfadvlab::stats::{self, Entry};
use mfadvlab::theory::{self, Norm, NormPair, TheoryParams};
use mfadvlab::train::{Optimizer, TrainMode, TrainSpec};
use rand::{Rng, SeedableRng};

/// Writes straight to the stderr handle so lines survive the test harness's
/// output capture.
fn emit(line: &str) {
    let _ = writeln!(std::io::stderr().lock(), "\n{line}");
}

macro_rules! note {
    ($($arg:tt)*) => {
        emit(&format!($($arg)*))
    };
}

fn report(id: &str, pass: bool, detail: impl AsRef<str>) {
    emit(&format!("{id:<4} {}  {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref()));
}

fn mnist() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
        load_idx(dir.join("mnist5k-images-idx3-ubyte.gz"), dir.join("mnist5k-labels-idx1-ubyte.gz")).expect("MNIST subset")
    })
}

fn relu(arch: Arch, d: usize, k: usize, l: usize, n: usize, sw: f64, sb: f64) -> NetworkConfig {
    NetworkConfig::relu(arch, d, k, l, n, sw, sb)
}

fn pair(p: Norm, q: Norm) -> NormPair {
    NormPair::new(p, q)
}

#[test]
fn linear_region_is_exact_near_the_input() {
    let start = Instant::now();
    let mut g = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for i in 0..1000u64 {
        let arch = if i % 2 == 0 { Arch::Vanilla } else { Arch::Residual };
        let d = g.gen_range(1..=200);
        let n = g.gen_range(1..=512);
        let l = g.gen_range(1..=12);
        let k = g.gen_range(1..=10);
        let sw = match arch {
            Arch::Vanilla => g.gen_range(1.0..3.0),
            Arch::Residual => g.gen_range(0.01..0.5),
        };
        let net = Network::sample(&relu(arch, d, k, l, n, sw, 0.01), i).unwrap();
        let x = stats::random_input(d, 77, i);
        let region = net.linear_region(&x).unwrap();
        let pattern = |c: &mfadvlab::net::ForwardCache| -> Vec<bool> { c.h.iter().flat_map(|h| h.iter().map(|&z| z >= 0.0)).collect() };
        let base = pattern(&net.forward(&x).unwrap());
        let dir = stats::random_input(d, 78, i);
        let mut scale = 1e-3;
        let y = loop {
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + scale * b).collect();
            if pattern(&net.forward(&y).unwrap()) == base || scale < 1e-12 {
                break y;
            }
            scale *= 0.1;
        };
        let f = net.output(&y).unwrap();
        let lin = region.apply(&y);
        let fmax = f.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let err = f.iter().zip(lin.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / fmax;
        worst = worst.max(err);
        checked += 1;
    }
    let pass = worst <= 1e-4;
    report("A1", pass, format!("max ||f - (Jx + a)||_inf / max(1, ||f||_inf) = {worst:.2e} over {checked} pairs (<= 1e-4) [{:.0?}]", start.elapsed()));
    assert!(pass);
}

struct JacobianSamples {
    j11: Vec<f64>,
    j12: Vec<f64>,
    a1: Vec<f64>,
    j11_other: Vec<f64>,
    params: TheoryParams,
}

fn jacobian_samples() -> &'static JacobianSamples {
    static S: OnceLock<JacobianSamples> = OnceLock::new();
    S.get_or_init(|| {
        let start = Instant::now();
        let mut cfg = ExperimentConfig::new(1, relu(Arch::Vanilla, 200, 1, 10, 2000, 2.0, 0.01));
        cfg.mc = Some(McSection {
            replicates: 2000,
            inputs: 2,
            entries: vec![Entry::J { row: 0, col: 0 }, Entry::J { row: 0, col: 1 }, Entry::A { row: 0 }],
        });
        let run = experiment::sample_jacobian(&cfg).unwrap();
        let col = |c: usize| run.samples.column(c).to_vec();
        note!("     Monte-Carlo sampling of 2000 networks took {:.0?}", start.elapsed());
        JacobianSamples { j11: col(0), j12: col(1), a1: col(2), j11_other: col(3), params: TheoryParams::from_config(&cfg.network) }
    })
}

#[test]
fn entries_follow_the_mean_field_law() {
    let s = jacobian_samples();
    let vj = s.params.jacobian_variance();
    let va = s.params.bias_variance();
    let fj = stats::ks_test(&s.j11, 0.0, vj).unwrap();
    let fa = stats::ks_test(&s.a1, 0.0, va).unwrap();
    let rj = fj.sample_var / vj;
    let ra = fa.sample_var / va;
    let pass = (0.9..=1.1).contains(&rj) && fj.pass && (0.9..=1.1).contains(&ra) && fa.pass;
    report(
        "A2",
        pass,
        format!(
            "J11 var/theory = {rj:.4} (theory {vj:.5}), KS {:.4} < {:.4}; a1 var/theory = {ra:.4} (theory {va:.5}), KS {:.4} < {:.4}",
            fj.ks_statistic, fj.ks_threshold, fa.ks_statistic, fa.ks_threshold
        ),
    );
    assert!(pass);
}

#[test]
fn jacobian_law_does_not_depend_on_the_input() {
    let s = jacobian_samples();
    let r = stats::ks_two_sample(&s.j11, &s.j11_other).unwrap();
    report("A3", r.pass, format!("two-sample KS between inputs {:.4} < {:.4}", r.ks_statistic, r.ks_threshold));
    assert!(r.pass);
}

#[test]
fn distinct_entries_are_uncorrelated() {
    let s = jacobian_samples();
    let cj = stats::correlation(&s.j11, &s.j12).unwrap();
    let ca = stats::correlation(&s.j11, &s.a1).unwrap();
    let pass = cj.abs() < 0.05 && ca.abs() < 0.05;
    report("A4", pass, format!("corr(J11, J12) = {cj:+.4}, corr(J11, a1) = {ca:+.4} (|.| < 0.05)"));
    assert!(pass);
}

#[test]
fn operator_norms_match_brute_force() {
    let mut cfg = ExperimentConfig::new(5, relu(Arch::Vanilla, 2, 1, 1, 2, 2.0, 0.0));
    cfg.sweep.samples = 100;
    let rows = experiment::opnorm_selftest(&cfg).unwrap();
    let bad = rows.iter().filter(|r| !r.pass()).count();
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    report("A5", bad == 0, format!("{} comparisons on 100 matrices up to 8x8, {bad} outside tolerance, worst rel. err {worst:.1e}", rows.len()));
    assert_eq!(bad, 0);
}

#[test]
fn pgd_loss_is_bounded_by_the_closed_form() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::new(6, relu(Arch::Vanilla, 100, 50, 3, 4000, 2.0, 0.01));
    cfg.sweep.d_values = vec![100, 400];
    cfg.sweep.pairs = vec![pair(Norm::One, Norm::Two), pair(Norm::Two, Norm::Two), pair(Norm::Two, Norm::Inf), pair(Norm::Inf, Norm::Inf)];
    cfg.sweep.eps_values = vec![0.1];
    cfg.sweep.samples = 30;
    cfg.attack = Some(AttackSpec::new(NormPair::INF_INF, 0.1, 50, 3));
    let run = experiment::bound_sweep(&cfg).unwrap();
    let mut all = true;
    for row in &run.rows {
        let point: Vec<_> = run.samples.iter().filter(|s| s.d == row.d && s.pair == row.pair).collect();
        let exceed = point.iter().filter(|s| s.loss > s.bound).count() as f64 / point.len() as f64;
        let exact = point.iter().map(|s| s.exact / s.bound).sum::<f64>() / point.len() as f64;
        let ratio = row.sample_mean / row.bound;
        let ok = (0.5..=1.1).contains(&ratio) && exceed <= 0.2;
        all &= ok;
        note!(
            "     d={:<4} {}  mean/bound = {ratio:.3}  exceedance = {:.2}  eps*||J||/bound = {exact:.3}  {}",
            row.d,
            row.pair,
            exceed,
            if ok { "ok" } else { "out of band" }
        );
    }
    report("A6", all, format!("mean/bound in [0.5, 1.1] and exceedance <= 0.2 at every point [{:.0?}]", start.elapsed()));
    assert!(all);
}

#[test]
fn small_budget_attains_the_bound() {
    let mut cfg = ExperimentConfig::new(7, relu(Arch::Vanilla, 400, 1, 3, 2000, 2.0, 0.01));
    cfg.sweep.pairs = vec![NormPair::INF_INF, pair(Norm::Two, Norm::Inf)];
    cfg.sweep.eps_values = vec![1e-3];
    cfg.sweep.samples = 30;
    let rows = experiment::equality_check(&cfg).unwrap();
    let mut all = true;
    let mut parts = Vec::new();
    for p in &cfg.sweep.pairs {
        let r: Vec<f64> = rows.iter().filter(|x| x.pair == *p).map(|x| x.achieved / x.bound).collect();
        let m = stats::mean(&r);
        all &= (0.9..=1.02).contains(&m);
        parts.push(format!("{p} mean achieved/bound = {m:.4}"));
    }
    report("A7", all, format!("{} (in [0.9, 1.02], 30 samples)", parts.join(", ")));
    assert!(all);
}

fn surrogate_spec(mode: TrainMode) -> TrainSpec {
    let mut s = TrainSpec::new(mode, 1e-4, 2000, 32);
    s.eps = 0.3;
    s.pair = NormPair::INF_INF;
    s.metric_every = 20;
    s.eval_size = 256;
    s.seed = 8;
    s
}

fn evolve_run(arch: Arch, mode: TrainMode) -> EvolveRun {
    let sw = if arch == Arch::Vanilla { 2.0 } else { 0.1 };
    let mut cfg = ExperimentConfig::new(8, relu(arch, 784, 10, 10, 500, sw, 0.01));
    cfg.train = Some(surrogate_spec(mode));
    experiment::evolve(&cfg, mnist()).unwrap()
}

fn vanilla_adv() -> &'static EvolveRun {
    static R: OnceLock<EvolveRun> = OnceLock::new();
    R.get_or_init(|| evolve_run(Arch::Vanilla, TrainMode::AdvSurrogate))
}

fn vanilla_l2() -> &'static EvolveRun {
    static R: OnceLock<EvolveRun> = OnceLock::new();
    R.get_or_init(|| evolve_run(Arch::Vanilla, TrainMode::L2Reg))
}

fn vanilla_standard() -> &'static EvolveRun {
    static R: OnceLock<EvolveRun> = OnceLock::new();
    R.get_or_init(|| evolve_run(Arch::Vanilla, TrainMode::Standard))
}

#[test]
fn weight_variance_follows_the_surrogate_dynamics() {
    let v = vanilla_adv();
    let r = evolve_run(Arch::Residual, TrainMode::AdvSurrogate);
    let rv = v.fit.slope / v.theory_slope;
    let rr = r.fit.slope / r.theory_slope;
    let pass = (rv - 1.0).abs() <= 0.15 && v.fit.r2 >= 0.99 && (rr - 1.0).abs() <= 0.20;
    report(
        "A8",
        pass,
        format!(
            "vanilla slope {:.4e} vs closed form {:.4e} (ratio {rv:.3}, R^2 {:.4}); residual slope {:.4e} vs {:.4e} (ratio {rr:.3}, R^2 {:.4})",
            v.fit.slope, v.theory_slope, v.fit.r2, r.fit.slope, r.theory_slope, r.fit.r2
        ),
    );
    note!("     exact gradient flow of the stated surrogate gradient gives twice the closed-form slope (expected ratio 2)");
    assert!(pass, "vanilla ratio {rv}, residual ratio {rr}");
}

#[test]
fn surrogate_to_l2_slope_ratio() {
    let a = vanilla_adv();
    let l2 = vanilla_l2();
    let st = vanilla_standard();
    let b = theory::beta(NormPair::INF_INF, 784, 10).unwrap();
    let target = 0.3 * 0.5 * b * 10.0;
    let raw = a.fit.slope / l2.fit.slope;
    let net = (a.fit.slope - st.fit.slope) / (l2.fit.slope - st.fit.slope);
    let pass = (raw / target - 1.0).abs() <= 0.25;
    report("A9", pass, format!("slope ratio {raw:.2} vs eps*alpha*beta*L = {target:.2} (within 25%)"));
    note!(
        "     slopes: surrogate {:.4e}, l2 {:.4e}, standard-only {:.4e}; ratio after removing the standard-loss drift {net:.2}",
        a.fit.slope, l2.fit.slope, st.fit.slope
    );
    note!("     the closed form assumes the standard loss leaves sigma_w^2 unchanged; at N = 500 its own drift inflates the raw ratio");
    assert!(pass, "raw ratio {raw}, drift-corrected {net}, target {target}");
}

#[test]
fn adversarial_training_fails_at_small_width() {
    let start = Instant::now();
    let data = mnist();
    let mut cfg = ExperimentConfig::new(10, relu(Arch::Vanilla, 784, 10, 20, 256, 2.0, 0.01));
    let mut spec = TrainSpec::new(TrainMode::AdvPGD, 1e-3, 3000, 32);
    spec.optimizer = Optimizer::Adam;
    spec.attack = Some(AttackSpec::new(NormPair::INF_INF, 0.3, 10, 1));
    spec.metric_every = 50;
    spec.early_stop = Some(200);
    spec.eval_size = 1000;
    spec.seed = 10;
    let mut best = |mode: TrainMode, n: usize| {
        let mut s = spec.clone();
        s.mode = mode;
        cfg.train = Some(s);
        let mut top = 0.0f64;
        for lr in [1e-3, 1e-4] {
            let c = experiment::train_cell(&cfg, data, 20, n, lr).unwrap();
            note!(
                "     {mode:?} L={} N={} lr={lr:e} steps={} early_stop={} aborted={} final={:.3} best={:.3}",
                c.l, c.n, c.steps_run, c.stopped_early, c.aborted, c.final_acc, c.best_acc
            );
            top = top.max(c.final_acc);
        }
        top
    };
    let adv256 = best(TrainMode::AdvPGD, 256);
    let adv512 = best(TrainMode::AdvPGD, 512);
    let std256 = best(TrainMode::Standard, 256);
    let std512 = best(TrainMode::Standard, 512);
    let gap = adv512 - adv256;
    let pass = gap >= 0.20 && std256 >= 0.95 && std512 >= 0.95;
    report(
        "A10",
        pass,
        format!(
            "adversarial acc N=256 {adv256:.3} vs N=512 {adv512:.3} (gap {gap:.3} >= 0.20); standard acc {std256:.3} / {std512:.3} (>= 0.95); best final accuracy over lr 1e-3, 1e-4 [{:.0?}]",
            start.elapsed()
        ),
    );
    assert!(pass);
}

#[test]
fn fisher_rao_capacity_at_init_and_under_training() {
    let mut cfg = ExperimentConfig::new(11, relu(Arch::Vanilla, 784, 10, 10, 500, 2.0, 0.0));
    cfg.sweep.samples = 100;
    let init = experiment::capacity_at_init(&cfg).unwrap();
    let m = stats::mean(&init);
    let v = vanilla_adv();
    let t = v.trace.column(|r| r.t);
    let fr = v.trace.column(|r| r.fr_diag);
    let fit = stats::linear_fit(&t, &fr).unwrap();
    let b = theory::beta(NormPair::INF_INF, 784, 10).unwrap();
    let predicted = -100.0 * 0.3 * 0.5 * b * 10.0 / 500.0;
    let pass = (m / 100.0 - 1.0).abs() <= 0.2 && fit.slope < 0.0 && predicted < 0.0;
    report(
        "A11",
        pass,
        format!("mean diag-FR at init {m:.2} vs LK = 100 (within 20%); FR slope under surrogate training {:.3} (closed form {predicted:.3}, sign must match)", fit.slope),
    );
    assert!(pass);
}

#[test]
fn single_step_flip_probability() {
    let mut cfg = ExperimentConfig::new(12, relu(Arch::Vanilla, 2000, 1, 5, 1000, 2.0, 0.01));
    cfg.sweep.eps_values = vec![0.05];
    cfg.sweep.samples = 500;
    let row = &experiment::flip_prob(&cfg).unwrap()[0];
    let pass = (row.rate - row.theory).abs() <= 0.05;
    report("A12", pass, format!("flip rate {:.3} ({} of {}) vs erf prediction {:.4} (+-0.05)", row.rate, row.flips, row.nets, row.theory));
    assert!(pass);
}

#[test]
fn max_abs_gaussian_exceedance() {
    let ns = [100usize, 1_000, 10_000, 100_000];
    let fr: Vec<f64> = ns.iter().map(|&n| stats::max_abs_gaussian_check(n, 1.0, 1000, 13).unwrap()).collect();
    let decreasing = fr.windows(2).all(|w| w[1] <= w[0]);
    let pass = fr[3] < 0.05 && decreasing;
    report("A13", pass, format!("exceedance of sqrt(2 ln n): {:?} for n = {ns:?} (need < 0.05 at 1e5, decreasing)", fr.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()));
    note!("     the exact probability at n = 1e5 is 0.148; the threshold sqrt(2 ln n) is exceeded with probability tending to 0 only logarithmically slowly");
    assert!(pass, "{fr:?}");
}

#[test]
fn chi_ratio_tracks_omega_to_the_depth() {
    let mut all = true;
    let mut parts = Vec::new();
    for omega in [0.9, 1.0, 1.1] {
        let mut cfg = ExperimentConfig::new(14, relu(Arch::Vanilla, 500, 10, 10, 500, 2.0 * omega, 0.01));
        cfg.sweep.samples = 200;
        let g = stats::geometric_mean(&experiment::chi_ratios(&cfg).unwrap());
        let target = f64::powi(omega, 10);
        let ok = g / target <= 2.0 && target / g <= 2.0;
        all &= ok;
        parts.push(format!("omega={omega}: {g:.3} vs {target:.3}"));
    }
    report("A14", all, format!("geometric mean chi0/chiL {} (within factor 2)", parts.join(", ")));
    assert!(all);
}
