use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};

use a2c2::asyncexec::{run_episode, staleness_stats, write_trace_csv, EpisodeTrace, Schedule};
use a2c2::bench::{write_sweep_csv, SweepReport};
use a2c2::config::{Origin, RunConfig};
use a2c2::datastore::{export_csv, read_dataset, write_dataset, Dataset};
use a2c2::envsim::EnvConfig;
use a2c2::pipeline::{self, manifest_path, Manifest};
use a2c2::policies::{load_base, load_head, load_policy, save_policy, LossCurve, Policy};
use a2c2::wire::{client_run, serve, ClientConfig, ServerConfig, SharedPolicy};
use a2c2::{Error, Result};

/// Asynchronous action-chunk execution with a residual correction head.
#[derive(Parser)]
#[command(name = "a2c2", version, after_help = "Config keys (set with --set key=value or a --config file):\n\n{keys}")]
struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Print the merged configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert episodes into a base dataset.
    GenExpert {
        #[arg(long)]
        out: PathBuf,
        /// Shortcut for --set task=...
        #[arg(long)]
        task: Option<String>,
    },
    /// Train the chunking base policy on a base dataset.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the correction dataset from a base dataset and a base policy.
    InferAugment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the residual correction head on a correction dataset.
    TrainCorrection {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one episode under a delay/execution schedule.
    Rollout {
        #[command(flatten)]
        policies: PolicyArgs,
        /// Inference delay d in control steps.
        #[arg(long)]
        delay: usize,
        /// Execution horizon e.
        #[arg(long)]
        exec: usize,
        /// Environment seed for the episode.
        #[arg(long, default_value_t = 0)]
        episode: u64,
        /// Per-step trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate naive and corrected execution over (d, e) cells.
    Sweep {
        #[command(flatten)]
        policies: PolicyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a base policy over TCP with injected latency.
    Serve {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7070")]
        bind: String,
        /// Injected latency in seconds.
        #[arg(long, default_value_t = 0.0)]
        delay: f64,
        /// Uniform jitter half-width in seconds.
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
    },
    /// Run one real-time episode against a policy server.
    Client {
        #[arg(long, default_value = "127.0.0.1:7070")]
        addr: String,
        /// Control period in seconds.
        #[arg(long, default_value_t = 0.05)]
        dt: f64,
        #[arg(long)]
        exec: usize,
        /// Expected delay in steps, used to validate the schedule.
        #[arg(long)]
        delay_steps: usize,
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        episode: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Shortcut for --set task=...
        #[arg(long)]
        task: Option<String>,
    },
    /// Finite-difference check of the backward pass on random networks.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        specs: usize,
        #[arg(long, default_value_t = 3)]
        trials: usize,
    },
    /// Convert a dataset file to CSV.
    ExportCsv {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run gen-expert, train-base, infer-augment, train-correction and sweep.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        /// Shortcut for --set task=...
        #[arg(long)]
        task: Option<String>,
    },
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long)]
    base: PathBuf,
    /// Correction head; required for the a2c2 method.
    #[arg(long)]
    head: Option<PathBuf>,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.apply_file(p)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    let task = match &cli.command {
        Command::GenExpert { task, .. } | Command::Client { task, .. } | Command::Pipeline { task, .. } => task.as_deref(),
        _ => None,
    };
    if let Some(t) = task {
        cfg.set("task", t, Origin::Flag)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string(), Origin::Flag)?;
    }
    if let Some(j) = cli.jobs {
        cfg.set("jobs", &j.to_string(), Origin::Flag)?;
    }
    Ok(cfg)
}

fn write_manifest(mut m: Manifest, inputs: &[(&str, &Path)], out: &Path) -> Result<()> {
    for (name, p) in inputs {
        m.artifact("input", name, p)?;
    }
    m.artifact("output", "main", out)?;
    m.write(&manifest_path(out))
}

fn print_curve(name: &str, c: &LossCurve) {
    let last = |v: &[f64]| v.last().map(|x| format!("{x:.5}")).unwrap_or_else(|| "-".into());
    println!("{name}: {} steps, train loss {}, eval loss {}", c.steps, last(&c.train), last(&c.eval));
}

fn print_report(r: &SweepReport) {
    println!("{:<6} {:>2} {:>2} {:>8} {:>17} {:>10}", "method", "d", "e", "success", "wilson95", "mean|da|");
    for c in &r.cells {
        println!(
            "{:<6} {:>2} {:>2} {:>8.3} [{:.3}, {:.3}] {:>10.4}",
            c.method.to_string(),
            c.d,
            c.e,
            c.success_rate,
            c.ci_low,
            c.ci_high,
            c.mean_delta_norm
        );
    }
    for (d, e, why) in &r.skipped {
        println!("skipped d={d} e={e}: {why}");
    }
}

fn print_trace(trace: &EpisodeTrace) -> Result<()> {
    let s = staleness_stats(trace)?;
    println!(
        "success={} steps={} staleness min={} max={} mean={:.3} mean|da|={:.5}",
        trace.success,
        trace.steps.len(),
        s.min,
        s.max,
        s.mean,
        trace.mean_delta_norm()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.render());
        return Ok(());
    }
    let jobs = cfg.jobs()?;
    if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::GenExpert { out, .. } => {
            let ds = pipeline::gen_expert(&cfg)?;
            println!("recorded {} episodes, {} transitions", ds.episodes.len(), ds.transitions());
            write_dataset(&Dataset::Base(ds), out)?;
            write_manifest(Manifest::new("gen-expert", &cfg), &[], out)?;
        }
        Command::TrainBase { data, out } => {
            let ds = match read_dataset(data)? {
                Dataset::Base(d) => d,
                Dataset::Correction(_) => return Err(Error::InvalidArgument(format!("{} is a correction dataset; train-base needs a base dataset", data.display()))),
            };
            let (base, curve) = pipeline::train_base(&cfg, &ds)?;
            print_curve("train-base", &curve);
            save_policy(&Policy::Base(base), out)?;
            write_manifest(Manifest::new("train-base", &cfg), &[("data", data)], out)?;
        }
        Command::InferAugment { data, base, out } => {
            let ds = match read_dataset(data)? {
                Dataset::Base(d) => d,
                Dataset::Correction(_) => return Err(Error::InvalidArgument(format!("{} is already a correction dataset", data.display()))),
            };
            let policy = load_base(base)?;
            let dcor = pipeline::infer_augment(&cfg, &ds, &policy)?;
            println!("built {} correction records", dcor.len());
            write_dataset(&Dataset::Correction(dcor), out)?;
            write_manifest(Manifest::new("infer-augment", &cfg), &[("data", data), ("base", base)], out)?;
        }
        Command::TrainCorrection { data, out } => {
            let dcor = match read_dataset(data)? {
                Dataset::Correction(d) => d,
                Dataset::Base(_) => {
                    return Err(Error::InvalidArgument(format!(
                        "{} is a base dataset; run infer-augment first",
                        data.display()
                    )))
                }
            };
            let (head, curve) = pipeline::train_correction(&cfg, &dcor)?;
            print_curve("train-correction", &curve);
            save_policy(&Policy::Head(head), out)?;
            write_manifest(Manifest::new("train-correction", &cfg), &[("data", data)], out)?;
        }
        Command::Rollout {
            policies,
            delay,
            exec,
            episode,
            trace,
        } => {
            let base = load_base(&policies.base)?;
            let head = policies.head.as_deref().map(load_head).transpose()?;
            let schedule = Schedule::new(base.horizon, *exec, *delay)?;
            let env = EnvConfig::new(base.task);
            let t = run_episode(&env, &base, head.as_ref(), schedule, *episode)?;
            print_trace(&t)?;
            if let Some(p) = trace {
                write_trace_csv(&t, p)?;
            }
        }
        Command::Sweep { policies, out } => {
            let base = load_base(&policies.base)?;
            let head = policies.head.as_deref().map(load_head).transpose()?;
            let report = pipeline::sweep(&cfg, &base, head.as_ref())?;
            print_report(&report);
            write_sweep_csv(&report.cells, out)?;
            let mut inputs = vec![("base", policies.base.as_path())];
            if let Some(h) = &policies.head {
                inputs.push(("head", h.as_path()));
            }
            write_manifest(Manifest::new("sweep", &cfg), &inputs, out)?;
        }
        Command::Serve {
            policy,
            bind,
            delay,
            jitter,
        } => {
            let shared: SharedPolicy = match load_policy(policy)? {
                Policy::Base(b) => Arc::new(b),
                Policy::Head(_) => return Err(Error::InvalidArgument(format!("{} is a correction head, not a base policy", policy.display()))),
            };
            let secs = |name: &str, v: f64| {
                if v.is_finite() && v >= 0.0 {
                    Ok(Duration::from_secs_f64(v))
                } else {
                    Err(Error::InvalidArgument(format!("{name} must be a non-negative number of seconds")))
                }
            };
            let server = serve(
                ServerConfig {
                    bind: bind.clone(),
                    delay: secs("delay", *delay)?,
                    jitter: secs("jitter", *jitter)?,
                    seed: cfg.seed()?,
                },
                shared,
            )?;
            println!("listening on {}", server.local_addr());
            server.wait();
        }
        Command::Client {
            addr,
            dt,
            exec,
            delay_steps,
            head,
            episode,
            trace,
            ..
        } => {
            let head = head.as_deref().map(load_head).transpose()?;
            let env = cfg.env()?;
            let schedule = Schedule::new(cfg.horizon()?, *exec, *delay_steps)?;
            let started = Instant::now();
            let report = client_run(
                &ClientConfig {
                    addr: addr.clone(),
                    dt: *dt,
                    schedule,
                    env,
                    seed: *episode,
                },
                head.as_ref(),
            )?;
            print_trace(&report.trace)?;
            println!(
                "measured delays {:?}, overruns {}, late replies {}, max head time {:?}, wall {:.2?}",
                report.measured_delays,
                report.overruns,
                report.late_replies,
                report.max_head_time,
                started.elapsed()
            );
            if let Some(p) = trace {
                write_trace_csv(&report.trace, p)?;
            }
        }
        Command::Gradcheck { specs, trials } => {
            let results = pipeline::gradcheck_suite(*specs, *trials, cfg.seed()?)?;
            let worst = results.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
            for (s, r) in &results {
                println!("{:?} ln={:?} max_rel_error={:.3e}", s.layer_sizes, s.layer_norm, r.max_rel_error);
            }
            let verdict = if worst < 1e-3 { "PASS" } else { "FAIL" };
            println!("max relative error {worst:.3e} over {} specs: {verdict}", results.len());
            if worst >= 1e-3 {
                return Err(Error::CheckFailed(format!("gradient check error {worst:.3e} is not below 1e-3")));
            }
        }
        Command::ExportCsv { input, out } => {
            export_csv(&read_dataset(input)?, out)?;
        }
        Command::Pipeline { out, .. } => {
            let started = Instant::now();
            let o = pipeline::run_pipeline(&cfg, out)?;
            print_curve("train-base", &o.base_curve);
            print_curve("train-correction", &o.head_curve);
            print_report(&o.report);
            for (name, d) in &o.timings {
                println!("{name}: {:.1?}", d);
            }
            println!("total {:.1?}; artifacts in {}", started.elapsed(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let keys = RunConfig::describe_keys();
    let cmd = <Cli as clap::CommandFactory>::command();
    let help = cmd.get_after_help().map(|h| h.to_string().replace("{keys}", &keys)).unwrap_or_default();
    let matches = <Cli as clap::CommandFactory>::command().after_help(help).get_matches();
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
