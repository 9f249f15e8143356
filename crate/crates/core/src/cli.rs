//! `fbpc-lab` command-line front end.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array_io::{read_json, write_atomic, write_json_atomic};
use crate::baselines::{random_coreset, train_bpc_fkl};
use crate::config::{ExperimentConfig, Method, Overrides};
use crate::data::Dataset;
use crate::error::{FbpcError, Result};
use crate::fbpc::{train_fbpc, LogRecord, Pseudocoreset};
use crate::models::ArchitectureSpec;
use crate::posteriors::{generate_expert_trajectories, TrajectoryPool, POOL_MANIFEST};
use crate::rng::derived;
use crate::sghmc::{evaluate_ensemble, evaluate_robustness, sghmc_sample, EvalReport};

pub const METRICS_SCHEMA: &str = "fbpc_metrics_v1";
pub const REPORT_SCHEMA: &str = "fbpc_eval_v1";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(
    name = "fbpc-lab",
    version,
    about = "Function-space Bayesian pseudocoresets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train expert trajectory pools for every configured architecture.
    GenExperts(CommonArgs),
    /// Learn one coreset per seed.
    Train(CommonArgs),
    /// Sample posteriors on trained coresets and report test metrics.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding the coresets; defaults to the output directory.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Tabulate several evaluated runs.
    Compare {
        /// Run directories containing eval reports.
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// May be repeated.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub ipc: Option<usize>,
    #[arg(long)]
    pub force: bool,
    /// `KIND:SEVERITY`, may be repeated.
    #[arg(long = "corrupt")]
    pub corruptions: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "FBPC_LAB_CACHE")]
    pub pool_root: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::resolve(
            self.config.as_deref(),
            Overrides {
                seeds: self.seeds.clone(),
                method: self.method,
                ipc: self.ipc,
                corruptions: self.corruptions.clone(),
                output: self.out.clone(),
                pool_root: self.pool_root.clone(),
            },
        )
    }
}

/// Parse, run and map the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenExperts(a) => cmd_gen_experts(&a.resolve()?, a.force),
        Command::Train(a) => cmd_train(&a.resolve()?),
        Command::Eval { common, run } => {
            let cfg = common.resolve()?;
            let run = run.unwrap_or_else(|| cfg.output.clone());
            cmd_eval(&cfg, &run)
        }
        Command::Compare { runs, out } => cmd_compare(&runs, &out),
    }
}

fn snapshot(cfg: &ExperimentConfig, name: &str) -> Result<()> {
    write_json_atomic(&cfg.output.join(name), cfg)
}

fn resolve_specs(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<ArchitectureSpec>> {
    cfg.architectures.iter().map(|a| a.resolve(ds)).collect()
}

fn dir_is_nonempty(dir: &Path) -> bool {
    std::fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some())
}

pub fn cmd_gen_experts(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let ds = cfg.dataset.build()?;
    let specs = resolve_specs(cfg, &ds)?;
    for spec in &specs {
        let dir = cfg.pool_dir(spec);
        if dir_is_nonempty(&dir) {
            if !force {
                return Err(FbpcError::Config(format!(
                    "pool directory {} already exists; pass --force to overwrite",
                    dir.display()
                )));
            }
            std::fs::remove_dir_all(&dir).map_err(|e| FbpcError::io(&dir, e))?;
        }
    }
    for spec in &specs {
        let pool = generate_expert_trajectories(spec, &ds, &cfg.experts, cfg.expert_seed)?;
        let dir = cfg.pool_dir(spec);
        pool.save(&dir)?;
        eprintln!(
            "wrote {} trajectories for {} to {}",
            pool.trajectories.len(),
            spec.id(),
            dir.display()
        );
    }
    snapshot(cfg, "gen_experts_config.json")
}

fn load_pools(cfg: &ExperimentConfig, specs: &[ArchitectureSpec]) -> Result<Vec<TrajectoryPool>> {
    specs
        .iter()
        .map(|spec| {
            let dir = cfg.pool_dir(spec);
            if !dir.join(POOL_MANIFEST).is_file() {
                return Err(FbpcError::Config(format!(
                    "no expert pool for architecture {} at {}; run `fbpc-lab gen-experts` with the same config first",
                    spec.id(),
                    dir.display()
                )));
            }
            TrajectoryPool::load(&dir)
        })
        .collect()
}

pub fn coreset_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("coreset_seed{seed}.fbpa"))
}

pub fn log_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("train_log_seed{seed}.jsonl"))
}

/// Train the configured method for one seed.
pub fn train_one(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    specs: &[ArchitectureSpec],
    pools: &[TrajectoryPool],
    seed: u64,
) -> Result<(Pseudocoreset, Vec<LogRecord>)> {
    match cfg.method {
        Method::Random => Ok((
            random_coreset(ds, cfg.ipc, &mut derived(seed, &["init"]))?,
            Vec::new(),
        )),
        Method::Fbpc | Method::FbpcIsotropic => {
            let mut fc = cfg.fbpc.clone();
            fc.isotropic = cfg.method == Method::FbpcIsotropic;
            train_fbpc(specs, pools, ds, cfg.ipc, &fc, seed)
        }
        Method::BpcFkl => train_bpc_fkl(&specs[0], &pools[0], ds, cfg.ipc, &cfg.bpc, seed),
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let ds = cfg.dataset.build()?;
    let specs = resolve_specs(cfg, &ds)?;
    let pools = if cfg.method.needs_pool() {
        let used = if cfg.method == Method::BpcFkl {
            &specs[..1]
        } else {
            &specs[..]
        };
        load_pools(cfg, used)?
    } else {
        Vec::new()
    };
    snapshot(cfg, "train_config.json")?;
    for &seed in &cfg.seeds {
        let (pc, log) = train_one(cfg, &ds, &specs, &pools, seed)
            .map_err(|e| e.with_context(format!("method {} seed {seed}", cfg.method)))?;
        let provenance = serde_json::json!({
            "method": cfg.method,
            "ipc": cfg.ipc,
            "seed": seed,
            "dataset": cfg.dataset.key(),
            "architectures": specs.iter().map(|s| s.id().0).collect::<Vec<_>>(),
        });
        pc.save(&coreset_path(&cfg.output, seed), provenance)?;
        let mut lines = Vec::new();
        for rec in &log {
            serde_json::to_writer(&mut lines, rec).expect("log record serializes");
            lines.push(b'\n');
        }
        write_atomic(&log_path(&cfg.output, seed), &lines)?;
        eprintln!(
            "seed {seed}: wrote {}",
            coreset_path(&cfg.output, seed).display()
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub clean: EvalReport,
    pub corrupted: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub method: Method,
    pub ipc: usize,
    pub dataset: String,
    pub architecture: String,
    pub seeds: Vec<SeedReport>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

pub fn cmd_eval(cfg: &ExperimentConfig, run: &Path) -> Result<()> {
    let ds = cfg.dataset.build()?;
    let spec = cfg.architectures[0].resolve(&ds)?;
    let corruptions = cfg.parsed_corruptions()?;
    snapshot(cfg, "eval_config.json")?;
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (pc, _) = Pseudocoreset::load(&coreset_path(run, seed))?;
            if pc.input_shape != spec.input_shape || pc.num_classes != spec.num_classes {
                return Err(FbpcError::Validation(format!(
                    "coreset for seed {seed} has shape {:?} with {} classes, architecture expects {:?} with {}",
                    pc.input_shape, pc.num_classes, spec.input_shape, spec.num_classes
                )));
            }
            let samples = sghmc_sample(&spec, &pc, &cfg.sghmc, &mut derived(seed, &["sghmc"]))
                .map_err(|e| e.with_context(format!("seed {seed}")))?;
            let clean = evaluate_ensemble(&spec, &samples, &ds.test)?;
            let corrupted = evaluate_robustness(&spec, &samples, &ds.test, &corruptions, seed)?;
            Ok(SeedReport { seed, clean, corrupted })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport {
        schema: REPORT_SCHEMA.into(),
        method: cfg.method,
        ipc: cfg.ipc,
        dataset: cfg.dataset.key(),
        architecture: spec.id().0,
        seeds,
    };
    write_json_atomic(&cfg.output.join(EVAL_REPORT), &report)?;
    write_atomic(
        &cfg.output.join(METRICS_CSV),
        metrics_csv(&report).as_bytes(),
    )?;
    for s in &report.seeds {
        eprintln!(
            "seed {}: acc {:.4} nll {:.4}",
            s.seed, s.clean.accuracy, s.clean.nll
        );
    }
    Ok(())
}

fn condition(r: &EvalReport) -> String {
    match (&r.corruption, r.severity) {
        (Some(k), Some(s)) => format!("{k}:{s}"),
        _ => "clean".into(),
    }
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One `seed` row per (seed, condition) and one `summary` row per condition.
pub fn metrics_csv(report: &RunReport) -> String {
    let header = [
        METRICS_SCHEMA,
        "method",
        "ipc",
        "seed",
        "condition",
        "accuracy",
        "accuracy_std",
        "nll",
        "nll_std",
        "degradation",
        "degradation_std",
    ];
    let mut rows = Vec::new();
    let mut by_cond: BTreeMap<String, Vec<&EvalReport>> = BTreeMap::new();
    for s in &report.seeds {
        for r in std::iter::once(&s.clean).chain(&s.corrupted) {
            rows.push(vec![
                "seed".into(),
                report.method.to_string(),
                report.ipc.to_string(),
                s.seed.to_string(),
                condition(r),
                r.accuracy.to_string(),
                String::new(),
                r.nll.to_string(),
                String::new(),
                opt(r.degradation),
                String::new(),
            ]);
            by_cond.entry(condition(r)).or_default().push(r);
        }
    }
    for (cond, rs) in by_cond {
        let (am, asd) = mean_std(&rs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
        let (nm, nsd) = mean_std(&rs.iter().map(|r| r.nll).collect::<Vec<_>>());
        let degs: Vec<f64> = rs.iter().filter_map(|r| r.degradation).collect();
        let (dm, dsd) = if degs.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&degs);
            (Some(m), Some(s))
        };
        rows.push(vec![
            "summary".into(),
            report.method.to_string(),
            report.ipc.to_string(),
            String::new(),
            cond,
            am.to_string(),
            asd.to_string(),
            nm.to_string(),
            nsd.to_string(),
            opt(dm),
            opt(dsd),
        ]);
    }
    csv_string(&header, &rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub run: PathBuf,
    pub method: Method,
    pub ipc: usize,
    pub acc: (f64, f64),
    pub nll: (f64, f64),
    pub seeds: Vec<u64>,
    pub missing: Vec<u64>,
}

/// Rows in input order plus the CSV and markdown renderings.
pub fn compare_runs(runs: &[PathBuf]) -> Result<(Vec<CompareRow>, String, String)> {
    if runs.len() < 2 {
        return Err(FbpcError::Config("compare needs at least two runs".into()));
    }
    let mut reports = Vec::with_capacity(runs.len());
    for r in runs {
        let path = r.join(EVAL_REPORT);
        let rep: RunReport = read_json(&path).map_err(|e| match e {
            FbpcError::Format { reason, .. } => {
                FbpcError::Validation(format!("{}: {reason}", path.display()))
            }
            other => other,
        })?;
        if rep.schema != REPORT_SCHEMA {
            return Err(FbpcError::Validation(format!(
                "{} has schema {}",
                path.display(),
                rep.schema
            )));
        }
        reports.push(rep);
    }
    if let Some(r) = reports.iter().find(|r| r.dataset != reports[0].dataset) {
        return Err(FbpcError::Validation(format!(
            "runs use different datasets ({} vs {})",
            reports[0].dataset, r.dataset
        )));
    }
    let all: BTreeSet<u64> = reports
        .iter()
        .flat_map(|r| r.seeds.iter().map(|s| s.seed))
        .collect();
    let rows: Vec<CompareRow> = runs
        .iter()
        .zip(&reports)
        .map(|(path, r)| {
            let have: BTreeSet<u64> = r.seeds.iter().map(|s| s.seed).collect();
            CompareRow {
                run: path.clone(),
                method: r.method,
                ipc: r.ipc,
                acc: mean_std(&r.seeds.iter().map(|s| s.clean.accuracy).collect::<Vec<_>>()),
                nll: mean_std(&r.seeds.iter().map(|s| s.clean.nll).collect::<Vec<_>>()),
                seeds: have.iter().copied().collect(),
                missing: all.difference(&have).copied().collect(),
            }
        })
        .collect();
    let complete = |r: &&CompareRow| r.missing.is_empty();
    let best_acc = rows
        .iter()
        .filter(complete)
        .map(|r| r.acc.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let best_nll = rows
        .iter()
        .filter(complete)
        .map(|r| r.nll.0)
        .fold(f64::INFINITY, f64::min);
    let mut csv_rows = Vec::with_capacity(rows.len());
    let mut md =
        String::from("| Method | ipc | Acc | NLL | Seeds | Status |\n|---|---|---|---|---|---|\n");
    for r in &rows {
        let status = if r.missing.is_empty() {
            "complete".to_string()
        } else {
            format!("incomplete (missing seeds {:?})", r.missing)
        };
        csv_rows.push(vec![
            r.method.to_string(),
            r.ipc.to_string(),
            r.acc.0.to_string(),
            r.acc.1.to_string(),
            r.nll.0.to_string(),
            r.nll.1.to_string(),
            r.seeds.len().to_string(),
            if r.missing.is_empty() {
                "complete"
            } else {
                "incomplete"
            }
            .into(),
        ]);
        let cell = |v: (f64, f64), best: bool| {
            let s = format!("{:.4} ± {:.4}", v.0, v.1);
            if best && r.missing.is_empty() {
                format!("**{s}**")
            } else {
                s
            }
        };
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.method,
            r.ipc,
            cell(r.acc, r.acc.0 == best_acc),
            cell(r.nll, r.nll.0 == best_nll),
            r.seeds.len(),
            status
        );
    }
    let csv = csv_string(
        &[
            "method", "ipc", "acc_mean", "acc_std", "nll_mean", "nll_std", "n_seeds", "status",
        ],
        &csv_rows,
    );
    Ok((rows, csv, md))
}

pub fn cmd_compare(runs: &[PathBuf], out: &Path) -> Result<()> {
    let (rows, csv, md) = compare_runs(runs)?;
    write_json_atomic(
        &out.join("compare_config.json"),
        &serde_json::json!({ "runs": runs }),
    )?;
    write_atomic(&out.join("compare.csv"), csv.as_bytes())?;
    write_atomic(&out.join("compare.md"), md.as_bytes())?;
    print!("{md}");
    let incomplete: Vec<String> = rows
        .iter()
        .filter(|r| !r.missing.is_empty())
        .map(|r| r.run.display().to_string())
        .collect();
    if incomplete.is_empty() {
        Ok(())
    } else {
        Err(FbpcError::Validation(format!(
            "incomplete runs: {}",
            incomplete.join(", ")
        )))
    }
}
