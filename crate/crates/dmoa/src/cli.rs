//! Command-line surface: `stability`, `simulate`, `sweep`, `live`.
//!
//! Exit codes: 0 success (stable-looking where applicable), 1 error,
//! 2 simulation verdict "growing", 3 aborted by the queue guard. Every
//! error path prints a single `error: …` line on stderr.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{parse_config, Mode, RunConfigFile};
use crate::live::{parse_prompts, run_live, LiveStatus};
use crate::queueing::{is_stable, max_stable_lambda, RateSummary, ServiceProfile};
use crate::sim::{replicate, run_simulation_traced, SimReport, TraceRecord, Verdict};
use crate::sweep::{parse_grid, render_csv, run_sweep};

#[derive(Debug, Parser)]
#[command(
    name = "dmoa",
    version,
    about = "Distributed mixture-of-agents: queueing stability analysis, discrete-event simulation, sweeps, and live runs"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Csv,
    Records,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form per-node rates and the stability verdict
    Stability {
        /// Number of nodes
        #[arg(long)]
        n: u32,
        /// Fan-out: neighbors gossiped to per layer
        #[arg(short, long)]
        k: u32,
        /// Number of proposal layers
        #[arg(short = 'M', long = "layers", visible_alias = "M")]
        layers: u32,
        /// Per-user prompt arrival rate (prompts/s)
        #[arg(long)]
        lambda: f64,
        /// Mean inference time(s): one value, or one per node
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        alpha: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Write the report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the discrete-event simulator from a config file
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Override the config file's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config file's replication count
        #[arg(long)]
        replications: Option<usize>,
        /// Stream an event trace (newline-delimited records) to this path
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a grid of (M,k) points and emit one CSV row per point
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Grid points: `M,k[,lambda[,alpha]]` separated by `;`
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Execute a prompts file against live backends
    Live {
        #[arg(long)]
        config: PathBuf,
        /// Newline-delimited `origin<TAB>prompt` records
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Records)]
        format: Format,
        /// Override the config file's seed (neighbor selection)
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the startup backend health checks
        #[arg(long)]
        no_validate: bool,
    },
}

type CmdError = Box<dyn std::error::Error>;

/// Parse arguments and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let cause = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .to_string();
            eprintln!("error: {cause}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            1
        }
    }
}

/// Collapse a possibly multi-line message so stderr carries exactly one
/// `error: …` line.
fn one_line(message: &str) -> String {
    message
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

fn dispatch(command: Command) -> Result<i32, CmdError> {
    match command {
        Command::Stability {
            n,
            k,
            layers,
            lambda,
            alpha,
            format,
            out,
        } => cmd_stability(n, k, layers, lambda, &alpha, format, out.as_deref()),
        Command::Simulate {
            config,
            out,
            format,
            seed,
            replications,
            trace,
        } => cmd_simulate(&config, out.as_deref(), format, seed, replications, trace.as_deref()),
        Command::Sweep {
            config,
            grid,
            out,
            seed,
            replications,
        } => cmd_sweep(&config, &grid, out.as_deref(), seed, replications),
        Command::Live {
            config,
            prompts,
            out,
            format,
            seed,
            no_validate,
        } => cmd_live(&config, &prompts, out.as_deref(), format, seed, no_validate),
    }
}

fn write_output(out: Option<&Path>, content: &str) -> Result<(), CmdError> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| format!("cannot write {}: {e}", path.display()).into()),
        None => {
            print!("{content}");
            std::io::stdout().flush()?;
            Ok(())
        }
    }
}

fn verdict_exit(verdict: Verdict) -> i32 {
    match verdict {
        Verdict::StableLooking => 0,
        Verdict::Growing => 2,
        Verdict::AbortedByGuard => 3,
    }
}

fn cmd_stability(
    n: u32,
    k: u32,
    layers: u32,
    lambda: f64,
    alpha: &[f64],
    format: Format,
    out: Option<&Path>,
) -> Result<i32, CmdError> {
    crate::protocol::ProtocolParams::new(n, k, layers)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(format!("lambda must be positive and finite, got {lambda}").into());
    }
    if alpha.is_empty() {
        return Err("at least one --alpha value is required".into());
    }
    if alpha.len() > 1 && alpha.len() != n as usize {
        return Err(format!(
            "--alpha must give one value or one per node ({n}), got {}",
            alpha.len()
        )
        .into());
    }
    let profile = ServiceProfile::new(alpha.to_vec())?;
    let summary = is_stable(lambda, k, layers, profile.alpha_max());
    let lambda_star = max_stable_lambda(k, layers, profile.alpha_max());

    let content = match format {
        Format::Table => render_stability_table(n, k, layers, &summary, lambda_star),
        Format::Csv => {
            let mut s = String::from(
                "n,k,M,lambda,alpha,r_prop_in,r_layer_in,r_in,r_out,utilization,stable,max_stable_lambda\n",
            );
            let _ = writeln!(
                s,
                "{n},{k},{layers},{},{},{},{},{},{},{},{},{}",
                summary.lambda,
                summary.alpha,
                summary.r_prop_in,
                summary.r_layer_in,
                summary.r_in,
                summary.r_out,
                summary.utilization,
                summary.stable,
                lambda_star
            );
            s
        }
        Format::Records => {
            let mut value = serde_json::to_value(summary)?;
            value["max_stable_lambda"] = serde_json::json!(lambda_star);
            value["n"] = serde_json::json!(n);
            value["k"] = serde_json::json!(k);
            value["M"] = serde_json::json!(layers);
            format!("{}\n", serde_json::to_string(&value)?)
        }
    };
    write_output(out, &content)?;
    Ok(0)
}

fn render_stability_table(
    n: u32,
    k: u32,
    layers: u32,
    summary: &RateSummary,
    lambda_star: f64,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "configuration  n={n} k={k} M={layers}");
    let _ = writeln!(s, "lambda         {}", summary.lambda);
    let _ = writeln!(s, "alpha          {} (max over nodes)", summary.alpha);
    let _ = writeln!(s, "r_prop_in      {}", summary.r_prop_in);
    let _ = writeln!(s, "r_layer_in     {}", summary.r_layer_in);
    let _ = writeln!(s, "r_in           {}", summary.r_in);
    let _ = writeln!(s, "r_out          {}", summary.r_out);
    let _ = writeln!(s, "utilization    {}", summary.utilization);
    let _ = writeln!(
        s,
        "stable         {}",
        if summary.stable { "yes" } else { "NO" }
    );
    let _ = writeln!(s, "max_stable_lambda {lambda_star}");
    s
}

fn config_label(cfg: &crate::sim::MoAConfig) -> String {
    format!(
        "n={} k={} M={} lambda={}",
        cfg.params.n, cfg.params.k, cfg.params.layers, cfg.lambda
    )
}

fn cmd_simulate(
    config_path: &Path,
    out: Option<&Path>,
    format: Format,
    seed: Option<u64>,
    replications: Option<usize>,
    trace: Option<&Path>,
) -> Result<i32, CmdError> {
    let file = parse_config(config_path)?;
    require_mode(&file, Mode::Simulate)?;
    let cfg = file.to_sim_config(seed)?;
    let replications = replications.unwrap_or(file.replications);
    if replications == 0 {
        return Err("replications must be at least 1".into());
    }
    if trace.is_some() && replications != 1 {
        return Err("--trace requires a single replication".into());
    }

    let (reports, summary_json) = if replications == 1 {
        let report = match trace {
            Some(path) => {
                let mut writer = std::io::BufWriter::new(
                    std::fs::File::create(path)
                        .map_err(|e| format!("cannot write {}: {e}", path.display()))?,
                );
                let mut line_error: Option<std::io::Error> = None;
                let mut sink = |record: TraceRecord| {
                    if line_error.is_none() {
                        let result = serde_json::to_writer(&mut writer, &record)
                            .map_err(std::io::Error::from)
                            .and_then(|()| writer.write_all(b"\n"));
                        if let Err(e) = result {
                            line_error = Some(e);
                        }
                    }
                };
                let report = run_simulation_traced(&cfg, &mut sink)?;
                writer.flush()?;
                if let Some(e) = line_error {
                    return Err(format!("trace write failed: {e}").into());
                }
                report
            }
            None => crate::sim::run_simulation(&cfg)?,
        };
        let json = serde_json::to_string(&report)?;
        (vec![report], json)
    } else {
        let rep = replicate(&cfg, replications)?;
        let json = serde_json::to_string(&rep)?;
        (rep.per_run, json)
    };

    let verdict = reports
        .iter()
        .map(|r| r.verdict)
        .max_by_key(|v| verdict_exit(*v))
        .expect("at least one run");
    let mean_latency = mean_over(reports.iter().filter_map(|r| r.overall.mean_latency));
    let avg_queue = mean_over(reports.iter().map(|r| r.overall.avg_queue_size));
    let label = config_label(&cfg);

    let content = match format {
        Format::Table => render_simulate_table(&label, mean_latency, avg_queue, verdict, &reports),
        Format::Csv => {
            let latency = mean_latency.map(|l| l.to_string()).unwrap_or_default();
            format!(
                "config,mean_latency,avg_queue_size,verdict\n{},{},{},{}\n",
                label,
                latency,
                avg_queue.unwrap_or(f64::NAN),
                verdict
            )
        }
        Format::Records => format!("{summary_json}\n"),
    };
    write_output(out, &content)?;
    Ok(verdict_exit(verdict))
}

fn mean_over(values: impl Iterator<Item = f64>) -> Option<f64> {
    let collected: Vec<f64> = values.collect();
    if collected.is_empty() {
        None
    } else {
        Some(collected.iter().sum::<f64>() / collected.len() as f64)
    }
}

fn render_simulate_table(
    label: &str,
    mean_latency: Option<f64>,
    avg_queue: Option<f64>,
    verdict: Verdict,
    reports: &[SimReport],
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config          {label}");
    let _ = writeln!(
        s,
        "mean_latency    {}",
        mean_latency.map_or("n/a".to_string(), |l| l.to_string())
    );
    let _ = writeln!(
        s,
        "avg_queue_size  {}",
        avg_queue.map_or("n/a".to_string(), |q| q.to_string())
    );
    let _ = writeln!(s, "verdict         {verdict}");
    let _ = writeln!(s, "replications    {}", reports.len());
    if let [report] = reports {
        let _ = writeln!(
            s,
            "jobs            {} completed / {} generated",
            report.overall.completed_jobs, report.overall.generated_jobs
        );
        let _ = writeln!(s, "growth_slope    {}", report.overall.growth_slope);
        for node in &report.per_node {
            let _ = writeln!(
                s,
                "node {:>3}        waiting={:.4} in_system={:.4} utilization={:.4} served={}",
                node.node,
                node.time_avg_queue_waiting,
                node.time_avg_in_system,
                node.utilization_measured,
                node.tasks_served
            );
        }
    }
    s
}

fn cmd_sweep(
    config_path: &Path,
    grid: &str,
    out: Option<&Path>,
    seed: Option<u64>,
    replications: Option<usize>,
) -> Result<i32, CmdError> {
    let file = parse_config(config_path)?;
    require_mode(&file, Mode::Simulate)?;
    let base = file.to_sim_config(seed)?;
    let points = parse_grid(grid)?;
    let replications = replications.unwrap_or(file.replications);
    if replications == 0 {
        return Err("replications must be at least 1".into());
    }
    let results = run_sweep(&base, &points, replications)?;
    write_output(out, &render_csv(&results))?;
    Ok(0)
}

fn require_mode(file: &RunConfigFile, want: Mode) -> Result<(), CmdError> {
    if file.mode != want {
        let (has, needs) = match want {
            Mode::Simulate => ("live", "simulate"),
            Mode::Live => ("simulate", "live"),
        };
        return Err(format!("config file has mode = \"{has}\" but this command needs mode = \"{needs}\"").into());
    }
    Ok(())
}

fn cmd_live(
    config_path: &Path,
    prompts_path: &Path,
    out: Option<&Path>,
    format: Format,
    seed: Option<u64>,
    no_validate: bool,
) -> Result<i32, CmdError> {
    let file = parse_config(config_path)?;
    require_mode(&file, Mode::Live)?;
    let cfg = file.to_live_config(seed, !no_validate);
    let prompts_file = std::fs::File::open(prompts_path)
        .map_err(|e| format!("cannot read {}: {e}", prompts_path.display()))?;
    let prompts = parse_prompts(std::io::BufReader::new(prompts_file))?;
    let outcomes = run_live(&cfg, &prompts)?;

    let mut failed = 0usize;
    let content = match format {
        Format::Records => {
            let mut s = String::new();
            for o in &outcomes {
                let _ = writeln!(s, "{}", serde_json::to_string(o)?);
            }
            s
        }
        Format::Csv => {
            let mut s = String::from("job,origin,status,end_to_end_latency,stages\n");
            for o in &outcomes {
                let status = match &o.status {
                    LiveStatus::Completed => "completed",
                    LiveStatus::Failed { .. } => "failed",
                };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    o.job,
                    o.origin,
                    status,
                    o.end_to_end_latency.map(|l| l.to_string()).unwrap_or_default(),
                    o.stages.len()
                );
            }
            s
        }
        Format::Table => {
            let mut s = String::new();
            for o in &outcomes {
                match &o.status {
                    LiveStatus::Completed => {
                        let _ = writeln!(
                            s,
                            "job {:>3} origin {} completed in {:.3}s ({} stages)",
                            o.job,
                            o.origin,
                            o.end_to_end_latency.unwrap_or(f64::NAN),
                            o.stages.len()
                        );
                    }
                    LiveStatus::Failed { stage, node, error } => {
                        let _ = writeln!(
                            s,
                            "job {:>3} origin {} FAILED at {stage} on node {node}: {error}",
                            o.job, o.origin
                        );
                    }
                }
            }
            s
        }
    };
    for o in &outcomes {
        if matches!(o.status, LiveStatus::Failed { .. }) {
            failed += 1;
        }
    }
    write_output(out, &content)?;
    if failed > 0 {
        eprintln!("error: {failed} of {} jobs failed", outcomes.len());
        return Ok(1);
    }
    Ok(0)
}
