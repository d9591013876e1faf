//! Command-line front end: one subcommand per experiment, each writing CSV
//! results, `*_theory.csv` overlays and a manifest into the output directory.

use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use tracing::info;

use crate::data::{
    fmt_f64, load_idx, read_config, write_csv, write_manifest, write_table, CsvRecord, Dataset, ExperimentConfig,
    MCSampleRow, Manifest, MANIFEST_SCHEMA,
};
use crate::error::{Error, Result};
use crate::experiment;
use crate::stats::Entry;
use crate::train::TrainTrace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subcommand {
    SampleJacobian,
    BoundSweep,
    EqualityCheck,
    Evolve,
    TrainabilityHeatmap,
    Capacity,
    FlipProb,
    OpnormSelftest,
    RobustEval,
}

impl Subcommand {
    pub fn name(self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "mfadvlab", version, about = "Mean-field adversarial training laboratory")]
pub struct Args {
    #[arg(value_enum)]
    pub subcommand: Subcommand,
    /// Experiment configuration (JSON, schema mfadvlab-config/1).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's output_dir, taken relative
    /// to the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Keep only the first N training examples.
    #[arg(long)]
    pub subset: Option<usize>,
}

/// Result of a completed run. `passed` is false when a built-in check failed.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub passed: bool,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

struct Out<'a> {
    dir: &'a Path,
    outcome: Outcome,
}

impl Out<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outcome.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn csv<R: CsvRecord>(&mut self, name: &str, rows: &[R]) -> Result<()> {
        let p = self.path(name);
        write_csv(rows, p)
    }

    fn table(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        let p = self.path(name);
        write_table(p, header, &rows)
    }

    fn note(&mut self, s: impl Into<String>) {
        let s = s.into();
        info!("{s}");
        self.outcome.notes.push(s);
    }
}

/// Applies flag overrides; a seed override reseeds every stochastic component.
pub fn apply_overrides(cfg: &mut ExperimentConfig, seed: Option<u64>, subset: Option<usize>, out: Option<PathBuf>) {
    if let Some(s) = seed {
        cfg.seed = s;
        if let Some(t) = cfg.train.as_mut() {
            t.seed = s;
            if let Some(a) = t.attack.as_mut() {
                a.seed = s;
            }
        }
        if let Some(a) = cfg.attack.as_mut() {
            a.seed = s;
        }
    }
    if let Some(n) = subset {
        if let Some(d) = cfg.data.as_mut() {
            d.subset = Some(n);
        }
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads the training set and, when configured, a test set (separate files or
/// a held-out tail of the training files). Relative paths resolve against `base`.
pub fn load_data(cfg: &ExperimentConfig, base: &Path) -> Result<(Dataset, Option<Dataset>)> {
    let sec = cfg.data.as_ref().ok_or_else(|| Error::Config("this subcommand needs a data section".into()))?;
    let mut full = load_idx(resolve(base, &sec.images), resolve(base, &sec.labels))?;
    let mut test = None;
    if let (Some(ti), Some(tl)) = (&sec.test_images, &sec.test_labels) {
        test = Some(load_idx(resolve(base, ti), resolve(base, tl))?);
    } else if sec.holdout > 0 {
        if sec.holdout >= full.len() {
            return Err(Error::Config(format!("holdout {} leaves no training data", sec.holdout)));
        }
        let cut = full.len() - sec.holdout;
        test = Some(full.select(&(cut..full.len()).collect::<Vec<_>>()));
        full = full.select(&(0..cut).collect::<Vec<_>>());
    }
    let train = match sec.subset {
        Some(n) => full.subset(n, sec.subset_seed),
        None => full,
    };
    Ok((train, test))
}

fn trace_theory_rows(trace: &TrainTrace, theory: &[f64]) -> Vec<Vec<String>> {
    trace.rows.iter().zip(theory).map(|(r, &v)| vec![r.step.to_string(), fmt_f64(r.t), fmt_f64(v)]).collect()
}

fn entry_fields(e: Entry) -> [String; 3] {
    match e {
        Entry::J { row, col } => ["J".into(), row.to_string(), col.to_string()],
        Entry::A { row } => ["a".into(), row.to_string(), String::new()],
    }
}

/// Runs one subcommand and writes its outputs into `out_dir`. `base` is the
/// directory relative data paths resolve against.
pub fn execute(sub: Subcommand, cfg: &ExperimentConfig, out_dir: &Path, base: &Path) -> Result<Outcome> {
    cfg.network.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut o = Out { dir: out_dir, outcome: Outcome { passed: true, ..Outcome::default() } };
    match sub {
        Subcommand::SampleJacobian => {
            let run = experiment::sample_jacobian(cfg)?;
            let rows: Vec<MCSampleRow> = run
                .samples
                .outer_iter()
                .enumerate()
                .flat_map(|(r, row)| row.iter().enumerate().map(move |(p, &value)| MCSampleRow { replicate: r, probe: p, value }).collect::<Vec<_>>())
                .collect();
            o.csv("samples.csv", &rows)?;
            let fit_rows = run
                .fits
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let [kind, row, col] = entry_fields(f.probe.entry);
                    vec![
                        i.to_string(),
                        f.probe.input.to_string(),
                        kind,
                        row,
                        col,
                        fmt_f64(f.report.sample_mean),
                        fmt_f64(f.report.sample_var),
                        fmt_f64(f.theory_var),
                        fmt_f64(f.report.ks_statistic),
                        fmt_f64(f.report.ks_threshold),
                        f.report.pass.to_string(),
                    ]
                })
                .collect();
            o.table(
                "fit.csv",
                &["probe", "input", "kind", "row", "col", "sample_mean", "sample_var", "theory_var", "ks_statistic", "ks_threshold", "pass"],
                fit_rows,
            )?;
            let th = run
                .fits
                .iter()
                .enumerate()
                .map(|(i, f)| vec![i.to_string(), fmt_f64(0.0), fmt_f64(f.theory_var)])
                .collect();
            o.table("samples_theory.csv", &["probe", "mean", "variance"], th)?;
            o.outcome.passed = run.passed();
            o.note(format!("{} of {} probes pass the KS test at 0.01", run.fits.iter().filter(|f| f.report.pass).count(), run.fits.len()));
        }
        Subcommand::BoundSweep => {
            let run = experiment::bound_sweep(cfg)?;
            o.csv("bound_sweep.csv", &run.rows)?;
            o.csv("bound_sweep_theory.csv", &experiment::bound_theory(cfg)?)?;
            let samples = run
                .samples
                .iter()
                .map(|s| {
                    vec![
                        s.d.to_string(),
                        s.pair.p.to_string(),
                        s.pair.q.to_string(),
                        fmt_f64(s.eps),
                        s.sample.to_string(),
                        fmt_f64(s.loss),
                        fmt_f64(s.exact),
                        fmt_f64(s.bound),
                    ]
                })
                .collect();
            o.table("bound_samples.csv", &["d", "p", "q", "eps", "sample", "loss", "exact", "bound"], samples)?;
        }
        Subcommand::EqualityCheck => {
            let rows = experiment::equality_check(cfg)?;
            let table = rows
                .iter()
                .map(|r| {
                    vec![
                        r.sample.to_string(),
                        r.pair.p.to_string(),
                        r.pair.q.to_string(),
                        fmt_f64(r.eps),
                        fmt_f64(r.achieved),
                        fmt_f64(r.exact),
                        fmt_f64(r.bound),
                        fmt_f64(r.achieved / r.bound),
                    ]
                })
                .collect();
            o.table("equality.csv", &["sample", "p", "q", "eps", "achieved", "exact", "bound", "ratio"], table)?;
            let mut summary = Vec::new();
            for &pair in &cfg.sweep.pairs {
                let ratios: Vec<f64> = rows.iter().filter(|r| r.pair == pair).map(|r| r.achieved / r.bound).collect();
                let m = crate::stats::mean(&ratios);
                let pass = (0.9..=1.02).contains(&m);
                o.outcome.passed &= pass;
                summary.push(vec![pair.p.to_string(), pair.q.to_string(), fmt_f64(m), pass.to_string()]);
            }
            o.table("equality_summary.csv", &["p", "q", "mean_ratio", "pass"], summary)?;
        }
        Subcommand::Evolve => {
            let (data, _) = load_data(cfg, base)?;
            let run = experiment::evolve(cfg, &data)?;
            o.csv("trace.csv", &run.trace.rows)?;
            o.table("trace_theory.csv", &["step", "t", "sigma_w2"], trace_theory_rows(&run.trace, &run.theory))?;
            o.table(
                "evolve_fit.csv",
                &["slope", "intercept", "r2", "theory_slope"],
                vec![vec![fmt_f64(run.fit.slope), fmt_f64(run.fit.intercept), fmt_f64(run.fit.r2), fmt_f64(run.theory_slope)]],
            )?;
            o.note(format!("fitted slope {:.6e}, closed-form slope {:.6e}, R^2 {:.5}", run.fit.slope, run.theory_slope, run.fit.r2));
            if run.trace.aborted {
                o.outcome.passed = false;
                o.note("training aborted on a non-finite loss");
            }
        }
        Subcommand::TrainabilityHeatmap => {
            let (data, _) = load_data(cfg, base)?;
            let cells = experiment::trainability_heatmap(cfg, &data)?;
            let rows = cells
                .iter()
                .map(|c| {
                    vec![
                        c.l.to_string(),
                        c.n.to_string(),
                        fmt_f64(c.lr),
                        fmt_f64(c.final_acc),
                        fmt_f64(c.best_acc),
                        c.steps_run.to_string(),
                        c.stopped_early.to_string(),
                        c.aborted.to_string(),
                    ]
                })
                .collect();
            o.table("heatmap.csv", &["L", "N", "lr", "final_acc", "best_acc", "steps_run", "stopped_early", "aborted"], rows)?;
            let th = experiment::heatmap_theory(cfg, data.dim())?
                .iter()
                .map(|r| vec![r.l.to_string(), r.n.to_string(), fmt_f64(r.threshold_t), fmt_f64(r.budget_t), r.predicted_trainable.to_string()])
                .collect();
            o.table("heatmap_theory.csv", &["L", "N", "threshold_t", "budget_t", "predicted_trainable"], th)?;
        }
        Subcommand::Capacity => {
            let data = if cfg.data.is_some() && cfg.train.is_some() { Some(load_data(cfg, base)?.0) } else { None };
            let run = experiment::capacity(cfg, data.as_ref())?;
            let params = crate::theory::TheoryParams::from_config(&cfg.network);
            let lk = (params.l * params.k) as f64;
            o.table("capacity_init.csv", &["sample", "fr_diag"], run.init.iter().enumerate().map(|(i, v)| vec![i.to_string(), fmt_f64(*v)]).collect())?;
            o.table("capacity_init_theory.csv", &["fr_diag"], vec![vec![fmt_f64(lk * params.alpha * params.sigma_w2)]])?;
            if let Some(trace) = &run.trace {
                o.csv("capacity.csv", &trace.rows)?;
                o.table("capacity_theory.csv", &["step", "t", "fr_diag"], trace_theory_rows(trace, &run.theory))?;
            }
        }
        Subcommand::FlipProb => {
            let rows = experiment::flip_prob(cfg)?;
            let t = rows
                .iter()
                .map(|r| vec![fmt_f64(r.eps), r.nets.to_string(), r.flips.to_string(), fmt_f64(r.rate)])
                .collect();
            o.table("flip.csv", &["eps", "nets", "flips", "rate"], t)?;
            o.table("flip_theory.csv", &["eps", "probability"], rows.iter().map(|r| vec![fmt_f64(r.eps), fmt_f64(r.theory)]).collect())?;
        }
        Subcommand::OpnormSelftest => {
            let rows = experiment::opnorm_selftest(cfg)?;
            o.outcome.passed = rows.iter().all(|r| r.pass());
            let t = rows
                .iter()
                .map(|r| {
                    vec![
                        r.trial.to_string(),
                        r.rows.to_string(),
                        r.cols.to_string(),
                        r.pair.p.to_string(),
                        r.pair.q.to_string(),
                        fmt_f64(r.closed_form),
                        fmt_f64(r.brute_force),
                        fmt_f64(r.rel_err),
                        r.pass().to_string(),
                    ]
                })
                .collect();
            o.table("opnorm.csv", &["trial", "rows", "cols", "p", "q", "closed_form", "brute_force", "rel_err", "pass"], t)?;
            o.note(format!("{} of {} comparisons within tolerance", rows.iter().filter(|r| r.pass()).count(), rows.len()));
        }
        Subcommand::RobustEval => {
            let (train_set, test) = load_data(cfg, base)?;
            let test = test.ok_or_else(|| Error::Config("robust-eval needs test files or data.holdout > 0".into()))?;
            let rows = experiment::robust_eval(cfg, &train_set, &test)?;
            let t = rows
                .iter()
                .map(|r| {
                    vec![
                        r.l.to_string(),
                        r.n.to_string(),
                        r.parameters.to_string(),
                        fmt_f64(r.clean_acc),
                        fmt_f64(r.robust_acc),
                        fmt_f64(r.final_train_acc),
                    ]
                })
                .collect();
            o.table("robust.csv", &["L", "N", "parameters", "clean_acc", "robust_acc", "final_train_acc"], t)?;
            o.note("robust accuracy from multi-restart PGD (50 iterations, 5 restarts) on the output-deviation loss, not AutoAttack");
        }
    }
    Ok(o.outcome)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::Degenerate(_) => 1,
        _ => 2,
    }
}

/// Parses arguments, runs the subcommand and returns the process exit code:
/// 0 on success, 1 when a check fails or a run diverges, 2 on configuration
/// errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut cfg = match read_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    apply_overrides(&mut cfg, args.seed, args.subset, args.out.clone());
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let out_dir = if args.out.is_some() { cfg.output_dir.clone() } else { resolve(&base, &cfg.output_dir) };
    let threads = args.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot build thread pool: {e}");
            return 2;
        }
    };
    let result = pool.install(|| execute(args.subcommand, &cfg, &out_dir, &base));
    match result {
        Ok(outcome) => {
            let manifest = Manifest {
                schema: MANIFEST_SCHEMA.into(),
                subcommand: args.subcommand.name(),
                artifact_version: env!("CARGO_PKG_VERSION").into(),
                seed: cfg.seed,
                threads,
                config: cfg.clone(),
                outputs: outcome.outputs.clone(),
                notes: outcome.notes.clone(),
            };
            if let Err(e) = write_manifest(&manifest, out_dir.join("manifest.json")) {
                eprintln!("error: {e}");
                return 2;
            }
            for n in &outcome.notes {
                println!("{n}");
            }
            if outcome.passed {
                0
            } else {
                eprintln!("check failed; see {}", out_dir.display());
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
