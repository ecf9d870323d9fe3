//! Command-line front end: train a policy, evaluate it against the
//! baselines, and compare saved reports.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use rocoma::baselines::{BaselineKind, BaselinePolicy};
use rocoma::harness::{compare, evaluate, trace_csv, EvalReport, EvalSpec};
use rocoma::mdp::Policy;
use rocoma::nn::checkpoint::Checkpoint;
use rocoma::sim::PerturbConfig;
use rocoma::trainer::{load_policy, resume, train, RunConfig, TrainState};

#[derive(Parser)]
#[command(name = "rocoma", version, about = "EV rebalancing: simulator, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy and write metrics, timings, and checkpoints.
    Train {
        /// Run configuration (TOML with [sim] and [train] tables); defaults
        /// apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for metrics.csv, timings.csv, checkpoint.ckpt.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a policy over repeated episodes and write a report.
    Eval {
        /// no | edp | rdp | cop, or a trained policy: rocoma | nonrobust |
        /// nonconstrained (these need --checkpoint).
        #[arg(long)]
        policy: String,
        /// nominal | perturbed
        #[arg(long, default_value = "nominal")]
        env: String,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report destination (CSV).
        #[arg(long)]
        out: PathBuf,
        /// Trained-policy checkpoint (trainer kind).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run configuration; its [sim] table is the environment and its
        /// [train] table supplies the cost weights.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write a per-step, per-region trajectory trace.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Compare saved reports metric by metric.
    Compare {
        /// Two or more report CSV files.
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Index of the reference report (0-based).
        #[arg(long = "ref", default_value_t = 0)]
        reference: usize,
    },
}

fn parse_env(label: &str) -> anyhow::Result<PerturbConfig> {
    match label {
        "nominal" => Ok(PerturbConfig::default()),
        "perturbed" => Ok(PerturbConfig::perturbed()),
        other => bail!("unknown environment {other}; expected nominal or perturbed"),
    }
}

fn is_trained_token(policy: &str) -> bool {
    matches!(policy, "rocoma" | "nonrobust" | "nonconstrained")
}

fn load_run_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_train(config: Option<&Path>, out: &Path, from: Option<&Path>) -> anyhow::Result<()> {
    let run = load_run_config(config)?;
    let state = match from {
        Some(ckpt_path) => {
            let ck = Checkpoint::load(ckpt_path)
                .with_context(|| format!("loading {}", ckpt_path.display()))?;
            let restored = TrainState::from_checkpoint(&ck, &run.train, &run.sim)
                .context("checkpoint does not match the run configuration")?;
            println!("resuming at iteration {} of {}", restored.iteration, run.train.iterations);
            resume(&run.train, &run.sim, restored, Some(out))?
        }
        None => train(&run.train, &run.sim, Some(out))?,
    };
    match state.history.last() {
        Some(row) => println!(
            "finished {} iterations: avg_reward {:.4}, lambda {:.4}",
            state.iteration, row.avg_reward, row.lambda
        ),
        None => println!("nothing to do: checkpoint already at iteration {}", state.iteration),
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    policy: &str,
    env: &str,
    repeats: usize,
    seed: u64,
    out: &Path,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    trace_out: Option<&Path>,
) -> anyhow::Result<()> {
    let run = load_run_config(config)?;
    let perturb = parse_env(env)?;
    let weights = run.train.weights;
    let agent: Box<dyn Policy + Sync> = if is_trained_token(policy) {
        let ckpt_path = checkpoint
            .with_context(|| format!("policy {policy} needs --checkpoint <file>"))?;
        let ck = Checkpoint::load(ckpt_path)
            .with_context(|| format!("loading {}", ckpt_path.display()))?;
        Box::new(load_policy(&ck)?)
    } else {
        let kind: BaselineKind = policy
            .parse()
            .map_err(|e: rocoma::Error| anyhow::anyhow!("{e}"))?;
        Box::new(BaselinePolicy::new(kind, weights))
    };
    let spec = EvalSpec {
        policy_label: policy.to_string(),
        env_label: env.to_string(),
        sim: &run.sim,
        perturb,
        weights,
        repeats,
        seed,
    };
    let report = evaluate(agent.as_ref(), &spec)?;
    report.save_csv(out)?;
    let s = report.summary();
    println!(
        "{policy} on {env}: rebalancing_cost {:.3} (+-{:.3}), system_fairness {:.3} (+-{:.3}), \
         expired {:.2}, response_rate {:.2}%",
        s.rebalancing_cost.mean,
        s.rebalancing_cost.std,
        s.system_fairness.mean,
        s.system_fairness.std,
        s.expired_orders.mean,
        s.response_rate.mean
    );
    println!("report written to {}", out.display());
    if let Some(trace_path) = trace_out {
        trace_csv(agent.as_ref(), &spec, trace_path)?;
        println!("trace written to {}", trace_path.display());
    }
    Ok(())
}

fn cmd_compare(paths: &[PathBuf], reference: usize) -> anyhow::Result<()> {
    let reports: Vec<EvalReport> = paths
        .iter()
        .map(|p| EvalReport::load_csv(p).with_context(|| format!("loading {}", p.display())))
        .collect::<anyhow::Result<_>>()?;
    let cmp = compare(&reports, reference)?;
    print!("{}", cmp.render());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Train { config, out, resume } => {
            cmd_train(config.as_deref(), &out, resume.as_deref())
        }
        Cmd::Eval { policy, env, repeats, seed, out, checkpoint, config, trace_out } => cmd_eval(
            &policy,
            &env,
            repeats,
            seed,
            &out,
            checkpoint.as_deref(),
            config.as_deref(),
            trace_out.as_deref(),
        ),
        Cmd::Compare { reports, reference } => cmd_compare(&reports, reference),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
