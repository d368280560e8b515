//! Command implementations.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use coin_core::eval::{build_report, emit_curves, BenchmarkReport, EnvKind, RunResult};
use coin_core::experiment::{mean_log, parallel_map, run_benchmark, ExperimentConfig};
use coin_core::telemetry::{generate_dataset, save_traces, DatasetSpec, TraceDataset, TraceFormat};
use coin_core::trainer::{
    read_log_csv, train_with_hook, write_log_csv, LogRow, Method, TrainConfig, TrainedPolicy,
};
use log::info;
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::{
    CliError, EvalArgs, GenDataArgs, ReportArgs, RunArgs, SweepArgs, TrainArgs, OUTPUT_ROOT_VAR,
};

type CliResult<T> = std::result::Result<T, CliError>;

pub const RESULTS_FILE: &str = "results.json";
pub const RUNS_FILE: &str = "runs.json";

/// Index entry for one trained policy; paths are relative to the run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEntry {
    pub method: String,
    pub seed: u64,
    pub policy: PathBuf,
    pub log: PathBuf,
    pub aborted: Option<String>,
}

fn output_dir(out: &Option<PathBuf>, command: &str) -> PathBuf {
    if let Some(p) = out {
        return p.clone();
    }
    let root = std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    root.join(format!("{command}-{stamp}"))
}

fn parse_method(s: &str) -> CliResult<Method> {
    s.parse::<Method>()
        .map_err(|_| CliError::Usage(format!("unknown method {s}")))
}

/// Config file, or the built-in benchmark, with flag overrides applied.
pub fn resolve(run: &RunArgs) -> CliResult<ExperimentConfig> {
    let flag_env = run
        .env
        .as_deref()
        .map(|e| e.parse::<EnvKind>())
        .transpose()?;
    let mut cfg = match &run.config {
        Some(p) => {
            let cfg = ExperimentConfig::from_toml_file(p)?;
            if let Some(e) = flag_env {
                if e != cfg.env {
                    return Err(CliError::Usage(format!(
                        "--env {e:?} conflicts with env {:?} in {}",
                        cfg.env,
                        p.display()
                    )));
                }
            }
            cfg
        }
        None => ExperimentConfig::for_env(flag_env.unwrap_or(EnvKind::Cloud)),
    };
    if let Some(s) = &run.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(e) = run.epochs {
        cfg.train.epochs = e;
    }
    if let Some(g) = run.g {
        cfg.train.chance.g = g;
    }
    if let Some(d) = run.delta {
        cfg.train.chance.delta = d;
        cfg.eval.delta = d;
    }
    if let Some(n) = run.episodes {
        cfg.eval.episodes = n;
    }
    if let Some(p) = &run.data {
        cfg.data_path = Some(p.clone());
    }
    if run.jobs == 0 {
        return Err(CliError::Usage("--jobs must be >= 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn shared_data(cfg: &ExperimentConfig) -> CliResult<Option<Arc<TraceDataset>>> {
    Ok(match cfg.env {
        EnvKind::Cloud => Some(Arc::new(cfg.dataset()?)),
        EnvKind::Airline => None,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Run(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

fn write_report(dir: &Path, report: &BenchmarkReport) -> CliResult<()> {
    std::fs::write(dir.join("report.csv"), report.to_csv())
        .and_then(|_| std::fs::write(dir.join("report.txt"), report.to_table()))
        .map_err(|e| CliError::Run(e.to_string()))
}

/// Save a policy and its log under `dir/<method>_seed<seed>/`.
fn persist_run(
    dir: &Path,
    method: Method,
    seed: u64,
    policy: &TrainedPolicy,
    log: &[LogRow],
    aborted: Option<String>,
) -> coin_core::Result<RunEntry> {
    let rel = PathBuf::from(format!("{}_seed{seed}", method.name()));
    std::fs::create_dir_all(dir.join(&rel))?;
    let entry = RunEntry {
        method: method.name().to_string(),
        seed,
        policy: rel.join("policy.json"),
        log: rel.join("log.csv"),
        aborted,
    };
    policy.save_json(&dir.join(&entry.policy))?;
    write_log_csv(log, File::create(dir.join(&entry.log))?)?;
    Ok(entry)
}

fn finish(manifest: &mut RunManifest, entries: &[RunEntry]) -> CliResult<()> {
    let failed: Vec<String> = entries
        .iter()
        .filter_map(|e| {
            e.aborted
                .as_ref()
                .map(|r| format!("{} seed {}: {r}", e.method, e.seed))
        })
        .collect();
    if failed.is_empty() {
        manifest.finish("ok")?;
        Ok(())
    } else {
        manifest.finish("aborted")?;
        Err(CliError::Run(format!(
            "aborted runs: {}",
            failed.join("; ")
        )))
    }
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            DatasetSpec::from_toml_str(&text)?
        }
        None => DatasetSpec::cloud_benchmark(200, 100, 7),
    };
    if let Some(n) = a.users {
        spec.n_users = n;
    }
    if let Some(t) = a.horizon {
        spec.horizon = t;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let format: TraceFormat = a.format.parse()?;
    let dir = output_dir(&a.out, "gen-data");
    let mut cfg = ExperimentConfig::cloud();
    cfg.data = spec.clone();
    let mut manifest = RunManifest::begin("gen-data", a.spec.as_deref(), &cfg, &dir)?;
    std::fs::write(dir.join("spec.toml"), spec.to_toml_string()?)
        .map_err(|e| CliError::Run(e.to_string()))?;
    let ds = generate_dataset(&spec)?;
    let path = dir.join(format!("traces.{}", a.format));
    save_traces(&ds, &path, format)?;
    manifest.finish("ok")?;
    println!("{}", path.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.run)?;
    let method = parse_method(&a.method)?;
    cfg.methods = vec![method];
    if let Some(r) = a.rate {
        cfg.train.grid_rate = r;
    }
    if let Some(k) = a.checkpoint_every {
        cfg.train.checkpoint_interval = k;
    }
    cfg.validate()?;
    let dir = output_dir(&a.run.out, "train");
    let mut manifest = RunManifest::begin("train", a.run.config.as_deref(), &cfg, &dir)?;
    let data = shared_data(&cfg)?;

    let entries = parallel_map(&cfg.seeds, a.run.jobs, |seed| {
        let mut env = cfg.build_env(data.clone())?;
        let tc = TrainConfig {
            method,
            seed: *seed,
            ..cfg.train.clone()
        };
        let ckpt_dir = dir
            .join(format!("{}_seed{seed}", method.name()))
            .join("checkpoints");
        let mut hook = |epoch: usize, p: &TrainedPolicy| {
            std::fs::create_dir_all(&ckpt_dir)?;
            p.save_json(&ckpt_dir.join(format!("epoch_{epoch:06}.json")))
        };
        let out = train_with_hook(env.as_mut(), &tc, &mut hook)?;
        info!("{} seed {seed}: {} epochs", method, out.log.len());
        persist_run(&dir, method, *seed, &out.policy, &out.log, out.aborted)
    })?;
    write_json(&dir.join(RUNS_FILE), &entries)?;
    println!("{}", dir.display());
    finish(&mut manifest, &entries)
}

fn policy_name(p: &TrainedPolicy) -> String {
    match p.method {
        Method::Grid => format!("grid-{}", p.grid_rate),
        m => m.name().to_string(),
    }
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.run)?;
    if let Some(b) = &a.budgets {
        cfg.eval.budgets = b.clone();
    }
    let policies = a
        .policy
        .iter()
        .map(|p| {
            TrainedPolicy::load_json(p)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    for (p, path) in policies.iter().zip(&a.policy) {
        if p.method != Method::Grid && p.chance.horizon != cfg.horizon() {
            return Err(CliError::Usage(format!(
                "{} was trained with horizon {}, environment has {}",
                path.display(),
                p.chance.horizon,
                cfg.horizon()
            )));
        }
    }
    let dir = output_dir(&a.run.out, "eval");
    let mut manifest = RunManifest::begin("eval", a.run.config.as_deref(), &cfg, &dir)?;
    let data = shared_data(&cfg)?;
    let jobs: Vec<(usize, &TrainedPolicy)> = policies.iter().enumerate().collect();
    let results = parallel_map(&jobs, a.run.jobs, |(i, p)| {
        let seed = cfg.seeds.get(*i).copied().unwrap_or(*i as u64);
        let mut env = cfg.build_env(data.clone())?;
        cfg.evaluate(env.as_mut(), p, &policy_name(p), seed)
    })?;
    write_json(&dir.join(RESULTS_FILE), &results)?;
    let report = build_report(&results, cfg.env, &cfg.eval.budgets, cfg.eval.delta)?;
    write_report(&dir, &report)?;
    print!("{}", report.to_table());
    manifest.finish("ok")?;
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.run)?;
    let methods = a
        .methods
        .iter()
        .map(|m| parse_method(m))
        .collect::<CliResult<Vec<_>>>()?;
    if !methods.contains(&Method::Grid) {
        cfg.grid_rates.clear();
    }
    cfg.methods = methods.into_iter().filter(|m| *m != Method::Grid).collect();
    if cfg.methods.is_empty() && cfg.grid_rates.is_empty() {
        return Err(CliError::Usage("nothing to sweep".into()));
    }
    let gs = a
        .train_g
        .clone()
        .unwrap_or_else(|| vec![cfg.train.chance.g]);
    let deltas = a.deltas.clone().unwrap_or_else(|| vec![cfg.eval.delta]);
    let dir = output_dir(&a.run.out, "sweep");
    let mut manifest = RunManifest::begin("sweep", a.run.config.as_deref(), &cfg, &dir)?;

    let mut consolidated = String::new();
    let mut entries = Vec::new();
    for g in &gs {
        for d in &deltas {
            let mut c = cfg.clone();
            c.train.chance.g = *g;
            c.train.chance.delta = *d;
            c.eval.delta = *d;
            c.validate()?;
            let sub = dir.join(format!("g{g}_delta{d}"));
            let mut sub_manifest = RunManifest::begin("sweep", a.run.config.as_deref(), &c, &sub)?;
            let bench = run_benchmark(&c, a.run.jobs)?;
            let mut sub_entries = Vec::new();
            for r in &bench.runs {
                sub_entries.push(persist_run(
                    &sub,
                    r.method,
                    r.seed,
                    &r.policy,
                    &r.log,
                    r.aborted.clone(),
                )?);
            }
            let results: Vec<RunResult> = bench
                .runs
                .iter()
                .map(|r| r.result.clone())
                .chain(bench.grid.iter().cloned())
                .collect();
            write_json(&sub.join(RESULTS_FILE), &results)?;
            write_json(&sub.join(RUNS_FILE), &sub_entries)?;
            write_report(&sub, &bench.report)?;
            emit_curves(&bench.mean_logs(), c.env, &sub.join("curves"))?;
            println!("train g {g}, delta {d}");
            print!("{}", bench.report.to_table());

            let csv = bench.report.to_csv();
            let mut lines = csv.lines();
            if consolidated.is_empty() {
                if let Some(h) = lines.next() {
                    consolidated.push_str(&format!("train_g,delta,{h}\n"));
                }
            } else {
                lines.next();
            }
            for l in lines {
                consolidated.push_str(&format!("{g},{d},{l}\n"));
            }
            sub_manifest.finish("ok")?;
            entries.extend(sub_entries);
        }
    }
    std::fs::write(dir.join("report.csv"), consolidated)
        .map_err(|e| CliError::Run(e.to_string()))?;
    finish(&mut manifest, &entries)
}

pub fn report(a: &ReportArgs) -> CliResult<()> {
    let source = RunManifest::load(&a.dir)
        .map_err(|e| CliError::Usage(format!("{}: no readable manifest: {e}", a.dir.display())))?;
    let mut cfg = source.config.clone();
    if let Some(b) = &a.budgets {
        cfg.eval.budgets = b.clone();
    }
    if let Some(d) = a.delta {
        cfg.eval.delta = d;
    }
    let results_path = a.dir.join(RESULTS_FILE);
    let runs_path = a.dir.join(RUNS_FILE);
    if !results_path.exists() && !runs_path.exists() {
        return Err(CliError::Run(format!(
            "{} holds neither {RESULTS_FILE} nor {RUNS_FILE}",
            a.dir.display()
        )));
    }
    let out = a.out.clone().unwrap_or_else(|| a.dir.join("report"));
    let mut manifest = RunManifest::begin("report", source.config_path.as_deref(), &cfg, &out)?;
    if results_path.exists() {
        let results: Vec<RunResult> = read_json(&results_path)?;
        let report = build_report(&results, cfg.env, &cfg.eval.budgets, cfg.eval.delta)?;
        write_report(&out, &report)?;
        print!("{}", report.to_table());
    }
    if runs_path.exists() {
        let entries: Vec<RunEntry> = read_json(&runs_path)?;
        let mut methods: Vec<String> = Vec::new();
        for e in &entries {
            if !methods.contains(&e.method) {
                methods.push(e.method.clone());
            }
        }
        let mut curves = Vec::new();
        for m in methods {
            let logs = entries
                .iter()
                .filter(|e| e.method == m)
                .map(|e| {
                    let f = File::open(a.dir.join(&e.log))
                        .map_err(|err| CliError::Run(format!("{}: {err}", e.log.display())))?;
                    Ok(read_log_csv(f)?)
                })
                .collect::<CliResult<Vec<_>>>()?;
            let refs: Vec<&Vec<LogRow>> = logs.iter().collect();
            curves.push((m, mean_log(&refs)));
        }
        for p in emit_curves(&curves, cfg.env, &out.join("curves"))? {
            println!("{}", p.display());
        }
    }
    manifest.finish("ok")?;
    Ok(())
}
