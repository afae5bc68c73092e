//! Command-line surface: experiment subcommands, flat key=value config
//! handling, and plot-ready CSV emission.
//!
//! Exit codes: 0 success, 1 configuration error, 2 internal inconsistency
//! (probe or harness failure mid-experiment).

pub mod config;
pub mod experiments;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::ir::assemble;
use crate::zigzagger::{transform, BranchesPerTrampoline, ZigzaggerConfig};

pub use config::{build_config, parse_pairs, ConfigError, ExperimentConfig, SEED_ENV_VAR};
pub use experiments::{
    attack_campaign, balanced_probe_accuracy, conditional_probe_map, run_flag_attack, sweep_flush,
    timing_table, CampaignResult, ExperimentError, SweepRow, TimingRow, TrialOutcome,
};

#[derive(Parser)]
#[command(name = "shadowlab", version, about = "Branch-shadowing laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an attack campaign and emit a per-trial CSV report.
    Attack {
        /// Flat key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config overrides, e.g. --set victim=modexp (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Also write the full campaign report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the periodic-flush period and emit (period, accuracy, ipc).
    SweepFlush {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Flush periods in cycles.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "100,1000,10000,100000,1000000"
        )]
        periods: Vec<u64>,
    },
    /// Transform an IR file with the branch obfuscator.
    Zigzag {
        /// Input IR file.
        input: PathBuf,
        /// Branches per trampoline: `all` or a count >= 2.
        #[arg(long, default_value = "all")]
        k: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the transformed IR.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample the timing channels and print per-class statistics.
    TimingTable {
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a campaign JSON written by `attack --out`.
    Report { input: PathBuf },
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV_VAR)
        .ok()
        .and_then(|s| s.parse().ok())
}

fn load_config(path: &Option<PathBuf>, set: &[String]) -> Result<ExperimentConfig, String> {
    let mut pairs = Vec::new();
    if let Some(path) = path {
        let text =
            fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        pairs.extend(parse_pairs(&text).map_err(|e| e.to_string())?);
    }
    for item in set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| format!("--set takes key=value, got `{item}`"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    build_config(&pairs, env_seed()).map_err(|e| e.to_string())
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, String> {
    flag.or_else(env_seed)
        .ok_or_else(|| format!("no seed: pass --seed or set {SEED_ENV_VAR}"))
}

fn cmd_attack(
    config: Option<PathBuf>,
    set: Vec<String>,
    out: Option<PathBuf>,
) -> Result<i32, String> {
    let cfg = load_config(&config, &set)?;
    let result = match attack_campaign(&cfg) {
        Ok(r) => r,
        Err(ExperimentError::UnknownVictim(v)) => return Err(format!("no victim `{v}`")),
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(2);
        }
    };
    print!("{}", cfg.header());
    println!("trial,ok,interrupts,instructions,cycles,ipc");
    for t in &result.trials {
        println!(
            "{},{},{},{},{},{:.4}",
            t.trial,
            u8::from(t.ok),
            t.interrupts,
            t.instructions,
            t.cycles,
            t.ipc
        );
    }
    println!("# accuracy={:.4}", result.accuracy);
    println!("# mean_ipc={:.4}", result.mean_ipc);
    if let Some(path) = out {
        let config_map: serde_json::Map<String, serde_json::Value> = cfg
            .pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
            .collect();
        let doc = json!({ "config": config_map, "result": result });
        fs::write(
            &path,
            serde_json::to_string_pretty(&doc).expect("serializable"),
        )
        .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    }
    Ok(0)
}

fn cmd_sweep_flush(
    config: Option<PathBuf>,
    set: Vec<String>,
    periods: Vec<u64>,
) -> Result<i32, String> {
    let cfg = load_config(&config, &set)?;
    if periods.is_empty() || periods.contains(&0) {
        return Err("periods must be a non-empty list of positive cycle counts".into());
    }
    let rows = match sweep_flush(&cfg, &periods) {
        Ok(rows) => rows,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(2);
        }
    };
    print!("{}", cfg.header());
    println!("period,accuracy,mean_ipc");
    for row in rows {
        println!("{},{:.4},{:.4}", row.period, row.accuracy, row.mean_ipc);
    }
    Ok(0)
}

fn cmd_zigzag(input: PathBuf, k: String, seed: Option<u64>, out: PathBuf) -> Result<i32, String> {
    let k = BranchesPerTrampoline::parse(&k)
        .filter(|k| !matches!(k, BranchesPerTrampoline::Count(c) if *c < 2))
        .ok_or_else(|| format!("bad --k `{k}`: expected `all` or a count >= 2"))?;
    let seed = resolve_seed(seed)?;
    let text =
        fs::read_to_string(&input).map_err(|e| format!("cannot read {}: {e}", input.display()))?;
    let program = assemble(&text).map_err(|e| e.to_string())?;
    let (transformed, report) = transform(
        &program,
        &ZigzaggerConfig {
            branches_per_trampoline: k,
            seed,
        },
    )
    .map_err(|e| e.to_string())?;
    fs::write(&out, transformed.print())
        .map_err(|e| format!("cannot write {}: {e}", out.display()))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable")
    );
    Ok(0)
}

fn cmd_timing_table(samples: u64, seed: Option<u64>) -> Result<i32, String> {
    let seed = resolve_seed(seed)?;
    println!("# samples={samples}");
    println!("# seed={seed}");
    println!("channel,class,mean,sd,clamped_frac");
    for row in timing_table(samples, seed) {
        let class = if row.mispredicted {
            "mispredicted"
        } else {
            "correct"
        };
        println!(
            "{},{},{:.4},{:.4},{:.4}",
            row.channel.name(),
            class,
            row.mean,
            row.sd,
            row.clamped_fraction
        );
    }
    Ok(0)
}

fn cmd_report(input: PathBuf) -> Result<i32, String> {
    let text =
        fs::read_to_string(&input).map_err(|e| format!("cannot read {}: {e}", input.display()))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| format!("bad report JSON: {e}"))?;
    let config = doc.get("config").ok_or("report is missing `config`")?;
    let result = doc.get("result").ok_or("report is missing `result`")?;
    println!("campaign report: {}", input.display());
    if let Some(map) = config.as_object() {
        for (k, v) in map {
            println!("  {k} = {}", v.as_str().unwrap_or(&v.to_string()));
        }
    }
    let accuracy = result
        .get("accuracy")
        .and_then(|v| v.as_f64())
        .unwrap_or(f64::NAN);
    let mean_ipc = result
        .get("mean_ipc")
        .and_then(|v| v.as_f64())
        .unwrap_or(f64::NAN);
    let trials = result
        .get("trials")
        .and_then(|v| v.as_array())
        .map(|a| a.len())
        .unwrap_or(0);
    println!("  trials    = {trials}");
    println!("  accuracy  = {accuracy:.4}");
    println!("  mean ipc  = {mean_ipc:.4}");
    Ok(0)
}

/// Runs the CLI; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successes; everything else is a config error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.cmd {
        Cmd::Attack { config, set, out } => cmd_attack(config, set, out),
        Cmd::SweepFlush {
            config,
            set,
            periods,
        } => cmd_sweep_flush(config, set, periods),
        Cmd::Zigzag {
            input,
            k,
            seed,
            out,
        } => cmd_zigzag(input, k, seed, out),
        Cmd::TimingTable { samples, seed } => cmd_timing_table(samples, seed),
        Cmd::Report { input } => cmd_report(input),
    };
    match outcome {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

pub fn main() {
    std::process::exit(run(std::env::args_os()));
}
