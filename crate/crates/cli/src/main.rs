use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hcmvp_core::config::RunConfig;
use hcmvp_core::harness::{self, evaluate, train, Learner, Policy};
use hcmvp_core::report;
use hcmvp_core::road_network::Turn;
use hcmvp_core::selfcheck::{self, Sizes};
use hcmvp_core::state_codec::{encode_agent_state, encode_env_info};
use hcmvp_core::traffic_sim::{CaptureEvent, Snapshot};
use hcmvp_core::{ConfigError, Error};

#[derive(Parser)]
#[command(name = "hcmvp", version, about = "Cooperative multi-vehicle pursuit on a grid road network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set sim.pursuers=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// More progress output (repeatable).
    #[arg(long, short, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only print errors.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Learned,
    Random,
    Chaser,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured variant and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write one record per timestep to `steps.jsonl`.
        #[arg(long)]
        steps: bool,
        /// Include attention weights in step records.
        #[arg(long)]
        attention_dump: bool,
        /// Write `reward_curve.svg`.
        #[arg(long)]
        svg: bool,
    },
    /// Greedy evaluation over seeded episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "learned")]
        policy: PolicyKind,
        #[arg(long)]
        episodes: Option<usize>,
        /// Master seed of the evaluation episodes (default: `train.eval_seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: bool,
        #[arg(long)]
        attention_dump: bool,
    },
    /// Run one episode and dump every timestep as JSON lines.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "learned")]
        policy: PolicyKind,
        /// Simulator seed of the episode.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trajectory file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the position matrices of a simulator state.
    InspectState {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random-policy steps to run before printing.
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Only this pursuer's matrices.
        #[arg(long)]
        pursuer: Option<usize>,
    },
    /// Evaluate several checkpoints on the same seeds; one CSV column each.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also add random and chaser baseline columns.
        #[arg(long)]
        baselines: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient checks and invariant sweeps.
    Selfcheck {
        #[command(flatten)]
        common: Common,
        /// Smaller sample sizes.
        #[arg(long)]
        quick: bool,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
    SelfCheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(c) => Failure::Config(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.join("config.toml").is_file() {
        Ok(())
    } else {
        Err(Failure::Config(format!(
            "{}: not a {what} directory (missing config.toml)",
            path.display()
        )))
    }
}

impl Common {
    fn log(&self, level: u8, msg: impl AsRef<str>) {
        if !self.quiet && self.verbose >= level {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Configuration from `--config` (or `base`, or defaults) plus overrides.
    fn resolve(&self, base: Option<RunConfig>) -> CliResult<RunConfig> {
        let cfg = match &self.config {
            Some(path) => {
                if !path.is_file() {
                    return Err(Failure::Config(format!("{}: configuration file not found", path.display())));
                }
                RunConfig::load(path)?
            }
            None => base.unwrap_or_default(),
        };
        Ok(cfg.with_overrides(&self.overrides)?)
    }
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| io_failure(&path, e))
}

/// Checkpoint configuration, optionally replaced by `--config`, plus
/// overrides; the network shape must still match the checkpoint.
fn checkpoint_config(common: &Common, dir: &Path) -> CliResult<(RunConfig, Learner)> {
    require_dir(dir, "checkpoint")?;
    let saved = RunConfig::load(dir.join("config.toml"))?;
    let cfg = common.resolve(Some(saved.clone()))?;
    if !cfg.same_architecture(&saved) {
        return Err(Failure::Config(format!(
            "{}: checkpoint architecture does not match the configuration",
            dir.display()
        )));
    }
    let learner = Learner::load_with(&cfg, dir)?;
    Ok((cfg, learner))
}

fn policy_setup(common: &Common, kind: PolicyKind, checkpoint: Option<&Path>) -> CliResult<(RunConfig, Option<Learner>)> {
    match (kind, checkpoint) {
        (PolicyKind::Learned, None) => Err(Failure::Config("--checkpoint is required for the learned policy".into())),
        (PolicyKind::Learned, Some(dir)) => {
            let (cfg, learner) = checkpoint_config(common, dir)?;
            Ok((cfg, Some(learner)))
        }
        (_, Some(dir)) => {
            let (cfg, _) = checkpoint_config(common, dir)?;
            Ok((cfg, None))
        }
        (_, None) => Ok((common.resolve(None)?, None)),
    }
}

fn policy<'a>(kind: PolicyKind, learner: &'a Option<Learner>) -> Policy<'a> {
    match (kind, learner) {
        (PolicyKind::Learned, Some(l)) => Policy::Learned(l),
        (PolicyKind::Chaser, _) => Policy::Chaser,
        _ => Policy::Random,
    }
}

fn cmd_train(
    common: &Common,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
    steps: bool,
    attention_dump: bool,
    svg: bool,
) -> CliResult<()> {
    let base = match &resume {
        Some(dir) => {
            require_dir(dir, "checkpoint")?;
            Some(RunConfig::load(dir.join("config.toml"))?)
        }
        None => None,
    };
    let mut cfg = common.resolve(base)?;
    cfg.output.step_records |= steps;
    cfg.output.attention_dump |= attention_dump;
    cfg.output.svg |= svg;
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    cfg.output.dir = out.display().to_string();
    echo_config(&cfg, &out)?;
    common.log(
        1,
        format!("training {} for {} episodes into {}", cfg.variant.name(), cfg.train.episodes, out.display()),
    );
    let outcome = train(&cfg, Some(&out), resume.as_deref())?;
    for m in &outcome.history {
        common.log(
            2,
            format!(
                "episode {:>5}  T {:>5}  R {:>10.3}  eps {:.3}",
                m.episode, m.total_timestep, m.total_reward, m.epsilon
            ),
        );
    }
    if cfg.train.eval_episodes > 0 {
        let eval = evaluate(&cfg, &Policy::Learned(&outcome.trainer.learner), cfg.train.eval_episodes, cfg.train.eval_seed)?;
        report::write_summary_csv(&out.join("eval_summary.csv"), &eval.aggregate)?;
        report::write_jsonl(&out.join("eval_episodes.jsonl"), &eval.episodes)?;
        common.log(0, summary_line(cfg.variant.name(), &eval.aggregate));
    }
    Ok(())
}

fn summary_line(name: &str, a: &harness::Aggregate) -> String {
    format!(
        "{name}: {} episodes, total timestep {:.2}, total reward {:.3}, average reward {:.4}, success {:.2}",
        a.episodes, a.total_timestep.mean, a.total_reward.mean, a.average_reward.mean, a.success_rate
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: &Common,
    checkpoint: Option<PathBuf>,
    kind: PolicyKind,
    episodes: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    steps: bool,
    attention_dump: bool,
) -> CliResult<()> {
    let (mut cfg, learner) = policy_setup(common, kind, checkpoint.as_deref())?;
    cfg.output.step_records |= steps;
    cfg.output.attention_dump |= attention_dump;
    let n = episodes.unwrap_or(cfg.train.eval_episodes);
    let master = seed.unwrap_or(cfg.train.eval_seed);
    let p = policy(kind, &learner);
    let eval = evaluate(&cfg, &p, n, master)?;
    if let Some(dir) = &out {
        echo_config(&cfg, dir)?;
        report::write_summary_csv(&dir.join("summary.csv"), &eval.aggregate)?;
        report::write_jsonl(&dir.join("episodes.jsonl"), &eval.episodes)?;
        if cfg.output.step_records {
            report::write_jsonl(&dir.join("steps.jsonl"), &eval.steps)?;
        }
    }
    common.log(0, summary_line(&p.name(), &eval.aggregate));
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryRecord<'a> {
    #[serde(flatten)]
    snapshot: Snapshot,
    actions: &'a [Turn],
    captures: &'a [CaptureEvent],
    done: bool,
}

fn cmd_simulate(
    common: &Common,
    checkpoint: Option<PathBuf>,
    kind: PolicyKind,
    seed: u64,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let (cfg, learner) = policy_setup(common, kind, checkpoint.as_deref())?;
    let sim = harness::build_simulator(&cfg)?;
    let p = policy(kind, &learner);
    let mut sink: Box<dyn Write> = match &out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
            }
            Box::new(std::io::BufWriter::new(fs::File::create(path).map_err(|e| io_failure(path, e))?))
        }
        None => Box::new(std::io::stdout().lock()),
    };
    let label = out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    let mut write_err = None;
    let mut rng = hcmvp_core::seeds::stream(seed, "simulate-policy", 0);
    let state = sim.reset(seed);
    let first = TrajectoryRecord {
        snapshot: sim.snapshot(&state),
        actions: &[],
        captures: &[],
        done: state.done,
    };
    let mut emit = |rec: &TrajectoryRecord| {
        if write_err.is_none() {
            let r = serde_json::to_writer(&mut sink, rec)
                .map_err(std::io::Error::from)
                .and_then(|_| sink.write_all(b"\n"));
            if let Err(e) = r {
                write_err = Some(e);
            }
        }
    };
    emit(&first);
    let (metrics, _) = harness::run_eval_traced(&sim, &cfg, &p, state, &mut rng, 0, seed, false, &mut |s, a, ev| {
        emit(&TrajectoryRecord {
            snapshot: sim.snapshot(s),
            actions: a,
            captures: &ev.captures,
            done: ev.done,
        })
    })?;
    drop(emit);
    if let Some(e) = write_err {
        return Err(io_failure(&label, e));
    }
    sink.flush().map_err(|e| io_failure(&label, e))?;
    common.log(
        1,
        format!(
            "{} steps, total reward {:.3}, {} captures",
            metrics.total_timestep,
            metrics.total_reward,
            metrics.captures.len()
        ),
    );
    Ok(())
}

fn cmd_inspect(common: &Common, seed: u64, steps: usize, only: Option<usize>) -> CliResult<()> {
    let cfg = common.resolve(None)?;
    let sim = harness::build_simulator(&cfg)?;
    let mut state = sim.reset(seed);
    let mut rng = hcmvp_core::seeds::stream(seed, "inspect-policy", 0);
    while state.clock < steps && !state.done {
        let actions = (0..state.pursuers)
            .map(|m| {
                let mask = sim.decision_mask(&state, m)?;
                Ok(hcmvp_core::dqn_agent::random_valid(mask, &mut rng).expect("non-empty mask"))
            })
            .collect::<Result<Vec<_>, Error>>()?;
        sim.step(&mut state, &actions).map_err(Error::from)?;
    }
    if let Some(m) = only {
        if m >= state.pursuers {
            return Err(Failure::Config(format!("--pursuer {m}: only {} pursuers", state.pursuers)));
        }
    }
    println!("clock {}  alive evaders {}  done {}", state.clock, state.alive_evader_count(), state.done);
    for m in (0..state.pursuers).filter(|m| only.is_none_or(|o| o == *m)) {
        let s = encode_agent_state(&sim, &state, m).map_err(Error::from)?;
        println!("\npursuer {m}: {s}");
    }
    let env = encode_env_info(&sim, &state);
    println!("\nenvironment:\n{env}");
    Ok(())
}

fn cmd_compare(
    common: &Common,
    checkpoints: &[PathBuf],
    episodes: Option<usize>,
    seed: Option<u64>,
    baselines: bool,
    out: &Path,
) -> CliResult<()> {
    let mut loaded = Vec::new();
    for dir in checkpoints {
        loaded.push(checkpoint_config(common, dir)?);
    }
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let mut columns: Vec<(String, harness::Aggregate)> = Vec::new();
    let name_for = |base: &str, columns: &[(String, harness::Aggregate)]| {
        let taken = columns.iter().filter(|(n, _)| n == base || n.starts_with(&format!("{base}#"))).count();
        if taken == 0 {
            base.to_string()
        } else {
            format!("{base}#{}", taken + 1)
        }
    };
    for ((cfg, learner), dir) in loaded.iter().zip(checkpoints) {
        let n = episodes.unwrap_or(cfg.train.eval_episodes);
        let master = seed.unwrap_or(cfg.train.eval_seed);
        let eval = evaluate(cfg, &Policy::Learned(learner), n, master)?;
        let name = name_for(cfg.variant.name(), &columns);
        common.log(1, format!("{} ({})", summary_line(&name, &eval.aggregate), dir.display()));
        report::write_jsonl(&out.join(format!("{name}.episodes.jsonl")), &eval.episodes)?;
        columns.push((name, eval.aggregate));
    }
    if baselines {
        let (cfg, _) = &loaded[0];
        let n = episodes.unwrap_or(cfg.train.eval_episodes);
        let master = seed.unwrap_or(cfg.train.eval_seed);
        for p in [Policy::Random, Policy::Chaser] {
            let eval = evaluate(cfg, &p, n, master)?;
            common.log(1, summary_line(&p.name(), &eval.aggregate));
            columns.push((p.name(), eval.aggregate));
        }
    }
    let path = out.join("compare.csv");
    report::write_compare_csv(&path, &columns)?;
    common.log(0, format!("wrote {}", path.display()));
    Ok(())
}

fn cmd_selfcheck(common: &Common, quick: bool, out: Option<PathBuf>) -> CliResult<()> {
    let report = selfcheck::run(if quick { Sizes::QUICK } else { Sizes::FULL });
    for c in &report.checks {
        let line = format!(
            "{} {:<36} {:>7.2}s  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.seconds,
            c.detail
        );
        if c.passed {
            common.log(0, line);
        } else {
            eprintln!("{line}");
        }
    }
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure::SelfCheck(format!("failed: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            common,
            out,
            resume,
            steps,
            attention_dump,
            svg,
        } => cmd_train(&common, out, resume, steps, attention_dump, svg),
        Command::Eval {
            common,
            checkpoint,
            policy,
            episodes,
            seed,
            out,
            steps,
            attention_dump,
        } => cmd_eval(&common, checkpoint, policy, episodes, seed, out, steps, attention_dump),
        Command::Simulate {
            common,
            checkpoint,
            policy,
            seed,
            out,
        } => cmd_simulate(&common, checkpoint, policy, seed, out),
        Command::InspectState {
            common,
            seed,
            step,
            pursuer,
        } => cmd_inspect(&common, seed, step, pursuer),
        Command::Compare {
            common,
            checkpoints,
            episodes,
            seed,
            baselines,
            out,
        } => cmd_compare(&common, &checkpoints, episodes, seed, baselines, &out),
        Command::Selfcheck { common, quick, out } => cmd_selfcheck(&common, quick, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::SelfCheck(msg)) => {
            eprintln!("selfcheck {msg}");
            ExitCode::from(4)
        }
    }
}
