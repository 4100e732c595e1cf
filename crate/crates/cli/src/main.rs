use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fjdgd_core::analysis::{noise_envelope, stacked_noise_envelope, summarize_trace, TraceSummary, METRIC_NAMES};
use fjdgd_core::datagen::dataset_to_csv;
use fjdgd_core::engine::{checkpoint_to_csv, AlgoState, MetricsTrace};
use fjdgd_core::experiment::{resolve_mnist_dir, Experiment, Workload};
use fjdgd_core::ExperimentConfig;
use serde_json::json;

/// Environment variable naming a directory with the MNIST IDX training files.
const MNIST_ENV: &str = "FJDGD_MNIST_DIR";
/// Largest stacked parameter count for which `analyze` runs the oracles.
const ORACLE_PARAM_LIMIT: usize = 20_000;

#[derive(Parser)]
#[command(name = "fjdgd", version, about = "Stubborn distributed gradient descent experiments")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the generated datasets, graph and mixing matrix of a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Also dump the final algorithm state.
        #[arg(long)]
        checkpoint: bool,
    },
    /// Run one experiment per value of a parameter (e.g. `lambda`, `data.theta`).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Fixed points and noise envelope for a completed run.
    Analyze {
        run_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure {t} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::GenData { config, out, force } => cmd_gen_data(&config, &out, force),
        Command::Run {
            config,
            out,
            force,
            checkpoint,
        } => load_config(&config).and_then(|c| cmd_run(&c, &out, force, checkpoint)),
        Command::Sweep {
            config,
            param,
            values,
            out,
            force,
        } => cmd_sweep(&config, &param, &values, &out, force),
        Command::Analyze { run_dir, force } => cmd_analyze(&run_dir, force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn mnist_override() -> Option<PathBuf> {
    std::env::var_os(MNIST_ENV).map(PathBuf::from)
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))
}

/// Environment override wins over the config's own directory.
fn prepare(cfg: &ExperimentConfig) -> Result<Experiment> {
    let env = mnist_override();
    let dir = env.clone().or_else(|| resolve_mnist_dir(cfg, None));
    let mut cfg = cfg.clone();
    if let (Some(d), fjdgd_core::config::DataSpec::Mnist { dir: slot, .. }) = (env, &mut cfg.data) {
        *slot = Some(d.display().to_string());
    }
    Ok(Experiment::prepare(&cfg, dir.as_deref())?)
}

fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!("output directory {} is not empty (use --force to overwrite)", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen_data(config: &Path, out: &Path, force: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let exp = prepare(&cfg)?;
    ensure_out_dir(out, force)?;
    write(out, "graph.txt", exp.graph.to_edge_list())?;
    write(out, "mixing.csv", exp.mixing.to_csv())?;
    match &exp.workload {
        Workload::Learning(p) => {
            for (i, s) in p.splits.iter().enumerate() {
                write(out, &format!("agent_{i}_train.csv"), dataset_to_csv(&s.train))?;
                write(out, &format!("agent_{i}_test.csv"), dataset_to_csv(&s.test))?;
            }
        }
        Workload::Quadratic(p) => {
            let mut csv = String::from("agent,coordinate,curvature,center\n");
            for (i, q) in p.quadratics.iter().enumerate() {
                for (k, (h, c)) in q.curvature.iter().zip(&q.center).enumerate() {
                    let _ = writeln!(csv, "{i},{k},{h},{c}");
                }
            }
            write(out, "quadratics.csv", csv)?;
        }
    }
    println!("wrote data for {} agents to {}", exp.n_agents(), out.display());
    Ok(())
}

struct RunArtifacts {
    summary: TraceSummary,
}

fn cmd_run(cfg: &ExperimentConfig, out: &Path, force: bool, checkpoint: bool) -> Result<()> {
    let exp = prepare(cfg)?;
    ensure_out_dir(out, force)?;
    let artifacts = execute(&exp, out, checkpoint)?;
    println!(
        "{}: {} agents, {} iterations, mean local test accuracy {:.4} -> {}",
        exp.setup.algorithm.name(),
        exp.n_agents(),
        cfg.iterations,
        artifacts
            .summary
            .metrics
            .get("local_test_acc")
            .map_or(f64::NAN, |m| m.mean),
        out.display()
    );
    Ok(())
}

fn execute(exp: &Experiment, out: &Path, checkpoint: bool) -> Result<RunArtifacts> {
    write(out, "config.resolved", exp.config.to_canonical_string())?;
    write(out, "certificate.json", serde_json::to_string_pretty(&exp.certificate)?)?;
    let output = match exp.run() {
        Ok(o) => o,
        Err(fjdgd_core::Error::DivergedRun { iteration, agent, trace }) => {
            write(out, "trace.csv", trace.to_csv())?;
            bail!("run diverged at iteration {iteration} (agent {agent}); partial trace written");
        }
        Err(e) => return Err(e.into()),
    };
    write(out, "trace.csv", output.trace.to_csv())?;
    let summary = summarize_trace(&output.trace)?;
    let malicious: Vec<usize> = exp.setup.attack.as_ref().map(|a| a.malicious.clone()).unwrap_or_default();
    let doc = json!({
        "algorithm": exp.setup.algorithm.name(),
        "alpha": exp.setup.alpha,
        "n_agents": exp.n_agents(),
        "malicious": malicious,
        "max_perturbation_norm": output.max_perturbation_norm,
        "final": summary,
    });
    write(out, "summary.json", serde_json::to_string_pretty(&doc)?)?;
    if checkpoint {
        write(out, "state.csv", checkpoint_to_csv(&output.final_state))?;
    }
    Ok(RunArtifacts { summary })
}

fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn cmd_sweep(config: &Path, param: &str, values: &[String], out: &Path, force: bool) -> Result<()> {
    let base = load_config(config)?;
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| base.with_override(param, v).with_context(|| format!("{param} = {v}")))
        .collect::<Result<_>>()?;
    ensure_out_dir(out, force)?;
    let mut header = String::from("value,iteration,agents");
    for m in METRIC_NAMES {
        for stat in ["mean", "std", "min", "max", "p12_5", "p87_5"] {
            let _ = write!(header, ",{m}_{stat}");
        }
    }
    let mut merged = header + "\n";
    for (value, cfg) in values.iter().zip(&configs) {
        let dir = out.join(format!("{}_{}", sanitize(param), sanitize(value)));
        ensure_out_dir(&dir, force)?;
        let exp = prepare(cfg)?;
        let s = execute(&exp, &dir, false)?.summary;
        let _ = write!(merged, "{value},{},{}", s.iteration, s.agents);
        for m in METRIC_NAMES {
            match s.metrics.get(m) {
                Some(v) => {
                    let _ = write!(merged, ",{},{},{},{},{},{}", v.mean, v.std, v.min, v.max, v.p12_5, v.p87_5);
                }
                None => merged.push_str(",,,,,,"),
            }
        }
        merged.push('\n');
        println!("{param} = {value} -> {}", dir.display());
    }
    write(out, "sweep.csv", merged)?;
    Ok(())
}

fn cmd_analyze(run_dir: &Path, force: bool) -> Result<()> {
    let trace_path = run_dir.join("trace.csv");
    if !trace_path.is_file() {
        bail!("no trace.csv in {}; run `fjdgd run` first", run_dir.display());
    }
    let cfg = load_config(&run_dir.join("config.resolved"))?;
    MetricsTrace::from_csv(&fs::read_to_string(&trace_path)?, None).context("reading trace.csv")?;
    for name in ["fixed_points.json", "bounds.csv"] {
        if run_dir.join(name).exists() && !force {
            bail!("{name} already exists in {} (use --force to overwrite)", run_dir.display());
        }
    }
    let exp = prepare(&cfg)?;
    let (rows, cols) = exp.workload.param_shape();
    let size = rows * cols * exp.n_agents();
    if size > ORACLE_PARAM_LIMIT {
        println!("skipping oracles: {size} stacked parameters exceed the limit of {ORACLE_PARAM_LIMIT}");
        return Ok(());
    }
    let report = exp.fixed_points()?;
    write(run_dir, "fixed_points.json", serde_json::to_string_pretty(&report)?)?;

    let x_hat = report.x_hat.clone();
    let mut distances = Vec::with_capacity(cfg.iterations + 1);
    let output = exp.run_observed(|state: &AlgoState, _| {
        distances.push(AlgoState::distance_sq(&state.x, &x_hat).sqrt());
    })?;
    let lambdas = exp.theory_lambdas();
    let min_lambda = lambdas.iter().copied().fold(f64::INFINITY, f64::min);
    let max_lambda = lambdas.iter().copied().fold(0.0, f64::max);
    let tau = exp
        .setup
        .attack
        .as_ref()
        .and_then(|a| a.clip)
        .unwrap_or(output.max_perturbation_norm);
    let zeta = exp.certificate.zeta;
    let d0 = distances.first().copied().unwrap_or(0.0);
    // Every track starts at x0.
    let dy = AlgoState::distance_sq(&exp.x0, &report.x_star_local).sqrt();
    let dz = AlgoState::distance_sq(&exp.x0, &report.x_bar).sqrt();
    let mut csv = String::from("iteration,distance,envelope,stacked_envelope\n");
    for (k, d) in distances.iter().enumerate() {
        let env = noise_envelope(k as u64, zeta, tau, min_lambda, d0);
        let stacked = stacked_noise_envelope(k as u64, zeta, tau, (min_lambda, max_lambda), dy, dz);
        let _ = writeln!(csv, "{k},{d},{env},{stacked}");
    }
    write(run_dir, "bounds.csv", csv)?;
    println!("zeta = {zeta}, tau = {tau}; wrote fixed_points.json and bounds.csv to {}", run_dir.display());
    Ok(())
}
