//! `hmoe`: generate traces, simulate one policy, compare all policies and
//! run sensitivity sweeps from a TOML experiment config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hetero_moe::config::{Experiment, ExperimentConfig};
use hetero_moe::exec::Exec;
use hetero_moe::placement::PlacementPolicy;
use hetero_moe::scheduler::Policy;
use hetero_moe::sim::{write_sweep_csv, CompareReport, RunReport, SweepAxis};

#[derive(Parser, Debug)]
#[command(name = "hmoe", version, about = "MoE decode offloading simulator (GPU + CPU + DIMM-NDP)")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic activation trace (JSONL).
    GenTrace {
        #[command(flatten)]
        common: Common,
        /// Output file; defaults to <output_dir>/trace.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the configured policy and write report.json, steps.csv and migrations.json.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Run all four policies on the same trace and write compare.json / compare.csv.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep one hardware or workload axis and write sweep_<axis>.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// num_dimms, cpu_flops_scale or batch.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. 4,8,16,32.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Policies to run at each point; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<Policy>,
        /// Worker threads for the sweep.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

/// Flags shared by every command. Each one overrides the matching config key.
#[derive(Args, Debug)]
struct Common {
    /// Experiment TOML; relative paths inside it resolve against its directory.
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// tri-domain, gpu-only, gpu-cpu or gpu-ndp.
    #[arg(long)]
    policy: Option<Policy>,
    /// auto, class-aware, all-striped or all-localized.
    #[arg(long)]
    placement: Option<PlacementPolicy>,
    #[arg(long)]
    num_dimms: Option<usize>,
    /// Multiplier on CPU peak FLOP/s and its measured curve.
    #[arg(long)]
    cpu_flops_scale: Option<f64>,
    /// Read the trace from this JSONL file instead of the generator.
    #[arg(long, conflicts_with_all = ["batch", "steps", "seed"])]
    trace: Option<PathBuf>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// EMA smoothing factor of the load predictor.
    #[arg(long)]
    alpha: Option<f64>,
    /// Migration overlap window per layer, in seconds.
    #[arg(long)]
    window_s: Option<f64>,
    #[arg(long)]
    no_migration: bool,
    #[arg(long)]
    no_refine: bool,
}

impl Common {
    fn experiment(&self) -> Result<Experiment> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        let cwd = PathBuf::from(".");
        if let Some(v) = &self.output_dir {
            cfg.output_dir = std::path::absolute(v).unwrap_or_else(|_| cwd.join(v));
        }
        if let Some(v) = self.policy {
            cfg.policy.name = v;
        }
        if let Some(v) = self.placement {
            cfg.policy.placement = v;
        }
        if let Some(v) = self.num_dimms {
            cfg.hardware.num_dimms = Some(v);
        }
        if let Some(v) = self.cpu_flops_scale {
            cfg.hardware.cpu_flops_scale = Some(v);
        }
        if let Some(v) = self.alpha {
            cfg.predictor.alpha = v;
        }
        if let Some(v) = self.window_s {
            cfg.migration.window_s = v;
        }
        if self.no_migration {
            cfg.migration.enabled = false;
        }
        if self.no_refine {
            cfg.refine.enabled = false;
        }
        if let Some(p) = &self.trace {
            cfg.trace.path = Some(std::path::absolute(p).unwrap_or_else(|_| p.clone()));
            cfg.trace.generator = None;
        }
        if self.batch.is_some() || self.steps.is_some() || self.seed.is_some() {
            let Some(g) = cfg.trace.generator.as_mut() else {
                bail!("--batch/--steps/--seed need a [trace.generator] section in {}", self.config.display());
            };
            g.batch = self.batch.unwrap_or(g.batch);
            g.steps = self.steps.unwrap_or(g.steps);
            g.seed = self.seed.unwrap_or(g.seed);
        }
        let base = self.config.parent().unwrap_or(Path::new("."));
        Ok(cfg.resolve(base)?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Timestamps and invocation details live here so primary outputs stay
/// byte-identical across runs.
fn write_metadata(dir: &Path, command: &str, config: &Path, outputs: &[&Path]) -> Result<()> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = serde_json::json!({
        "command": command,
        "config": config.display().to_string(),
        "args": std::env::args().collect::<Vec<_>>(),
        "unix_time_s": now,
        "version": env!("CARGO_PKG_VERSION"),
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    write_json(&dir.join(format!("{command}.meta.json")), &meta)
}

fn print_summary(r: &RunReport) {
    println!("policy            {} (placement {})", r.policy, r.placement);
    println!("batch x steps     {} x {}", r.batch_size, r.steps);
    println!("decode time       {:.6} s", r.total_decode_time_s);
    println!("  moe time        {:.6} s (greedy {:.6} s)", r.moe_time_s, r.greedy_moe_time_s);
    println!("  non-expert      {:.6} s", r.non_expert_time_s);
    println!("  migration ovh   {:.6} s ({:.2}%)", r.migration_overhead_s, 100.0 * r.migration_overhead_fraction);
    println!("throughput        {:.1} tokens/s", r.throughput_tokens_per_s);
    println!("migrations        {} applied, {} stale", r.migrations_applied, r.migrations_stale);
    println!("refine moves      {}", r.refine_moves);
    let u = &r.utilization;
    println!("utilization       gpu {:.3}  cpu {:.3}  ndp {:.3}", u.gpu, u.cpu, u.ndp);
    let c = &r.class_shares;
    println!(
        "token shares      hot {:.3}  warm {:.3}  cold {:.3}",
        c.hot_tokens, c.warm_tokens, c.cold_tokens
    );
    println!(
        "expert shares     hot {:.3}  warm {:.3}  cold {:.3}",
        c.hot_experts, c.warm_experts, c.cold_experts
    );
}

fn compare_csv(report: &CompareReport) -> String {
    let tri = report.run(Policy::TriDomain).map(|r| r.moe_time_s).unwrap_or(f64::NAN);
    let mut s = String::from("policy,moe_time_s,total_decode_time_s,throughput_tokens_per_s,moe_time_ratio\n");
    for r in &report.runs {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.policy,
            r.moe_time_s,
            r.total_decode_time_s,
            r.throughput_tokens_per_s,
            r.moe_time_s / tri
        ));
    }
    s
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::GenTrace { common, out } => {
            let e = common.experiment()?;
            let trace = e.load_trace(exec)?;
            let path = out.unwrap_or_else(|| e.output_dir.join("trace.jsonl"));
            let mut buf = Vec::new();
            trace.write_jsonl(&mut buf)?;
            write_file(&path, &buf)?;
            write_metadata(&e.output_dir, "gen-trace", &common.config, &[&path])?;
            println!("wrote {} ({} steps, {} layers)", path.display(), trace.steps.len(), trace.num_layers());
        }
        Command::Simulate { common } => {
            let e = common.experiment()?;
            let trace = e.load_trace(exec)?;
            let out = e.simulate(&trace, exec)?;
            let dir = &e.output_dir;
            let report = dir.join("report.json");
            let steps = dir.join("steps.csv");
            let migrations = dir.join("migrations.json");
            write_json(&report, &out.report)?;
            let mut csv = String::from("step_index,latency_s,migrations_applied,migration_overhead_s\n");
            for s in &out.steps {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    s.step_index, s.latency_s, s.migrations_applied, s.migration_overhead_s
                ));
            }
            write_file(&steps, csv.as_bytes())?;
            write_json(&migrations, &out.migration_log)?;
            write_metadata(dir, "simulate", &common.config, &[&report, &steps, &migrations])?;
            print_summary(&out.report);
        }
        Command::Compare { common } => {
            let e = common.experiment()?;
            let trace = e.load_trace(exec)?;
            let report = e.compare(&trace, exec)?;
            let dir = &e.output_dir;
            let json = dir.join("compare.json");
            let csv = dir.join("compare.csv");
            write_json(&json, &report)?;
            let table = compare_csv(&report);
            write_file(&csv, table.as_bytes())?;
            write_metadata(dir, "compare", &common.config, &[&json, &csv])?;
            let tri = report.run(Policy::TriDomain).map(|r| r.moe_time_s).unwrap_or(f64::NAN);
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{:<12} {:>14} {:>14} {:>10}", "policy", "moe_time_s", "decode_time_s", "ratio")?;
            for r in &report.runs {
                writeln!(
                    stdout,
                    "{:<12} {:>14.6} {:>14.6} {:>10.3}",
                    r.policy.to_string(),
                    r.moe_time_s,
                    r.total_decode_time_s,
                    r.moe_time_s / tri
                )?;
            }
        }
        Command::Sweep { common, axis, values, policies, jobs } => {
            let e = common.experiment()?;
            let policies = if policies.is_empty() { vec![e.sim.policy] } else { policies };
            let mut builder = rayon::ThreadPoolBuilder::new();
            if let Some(j) = jobs {
                if j == 0 {
                    bail!("--jobs must be >= 1");
                }
                builder = builder.num_threads(j);
            }
            let pool = builder.build()?;
            let rows = pool.install(|| e.sweep(axis, &values, &policies, exec))?;
            let path = e.output_dir.join(format!("sweep_{axis}.csv"));
            let mut buf = Vec::new();
            write_sweep_csv(&rows, &mut buf)?;
            write_file(&path, &buf)?;
            write_metadata(&e.output_dir, "sweep", &common.config, &[&path])?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
