mod manifest;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qdpp::baselines::{TabularQ, TABLE_MAGIC};
use qdpp::config::{ConfigError, TrainConfig};
use qdpp::envs::EnvKind;
use qdpp::kernel::{self, GroundSet, KernelError, QDppKernel, CHECKPOINT_MAGIC};
use qdpp::learner::{self, Agent, Algo, CsvSink, LearnerError};
use qdpp::rng::{stream, Stream};
use qdpp::sampler::{self, SamplerError};
use thiserror::Error;

use manifest::{build_id, Outputs, RunManifest, Totals, CHECKPOINT_FILE, GREEDY_FILE, METRICS_FILE};

#[derive(Debug, Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Guard(String),
    #[error("{0}")]
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Checkpoint(_) => 4,
            Failure::Guard(_) => 5,
        }
    }

    fn io(context: impl std::fmt::Display, e: io::Error) -> Self {
        Failure::Io(format!("{context}: {e}"))
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<KernelError> for Failure {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::Checkpoint(_) | KernelError::NonFinite(_) | KernelError::NormViolation { .. } => {
                Failure::Checkpoint(e.to_string())
            }
            KernelError::Io(e) => Failure::Io(e.to_string()),
            KernelError::FeatureDimTooSmall { .. } | KernelError::BadDelta(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<SamplerError> for Failure {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::GuardExceeded { .. } => Failure::Guard(e.to_string()),
            SamplerError::Kernel(k) => Failure::Usage(k.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<LearnerError> for Failure {
    fn from(e: LearnerError) -> Self {
        match e {
            LearnerError::Kernel(k) => k.into(),
            LearnerError::Sampler(s) => s.into(),
            LearnerError::Io(e) => Failure::Io(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "qdpp", version, about = "Determinantal Q-learning for cooperative multi-agent tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed; each run gets its own output directory.
    Train(TrainArgs),
    /// Greedy rollouts of a saved checkpoint.
    Eval(EvalArgs),
    /// Exact joint distribution and sampler bound report for one observation.
    SampleDebug(DebugArgs),
    /// Print the build identifier.
    Version,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    env: EnvKind,
    #[arg(long, default_value = "qdpp")]
    algo: Algo,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds, run one after another.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<u64>,
    /// Flat `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; defaults to $QDPP_OUT_DIR, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    penalty_weight: Option<f64>,
    #[arg(long)]
    epsilon_start: Option<f64>,
    #[arg(long)]
    epsilon_end: Option<f64>,
    #[arg(long)]
    epsilon_decay_steps: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the env recorded in the run manifest beside the checkpoint.
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Eval CSV path; defaults to `eval.csv` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DebugArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Joint observation, one id per agent.
    #[arg(long, value_delimiter = ',', required = true)]
    obs: Vec<usize>,
    #[arg(long, default_value_t = 200_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `distribution.csv` and `bound.csv`; defaults to the current directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut config = TrainConfig::for_env(args.env);
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(path.display(), e))?;
        config.apply_text(&text)?;
    }
    if let Some(s) = args.steps {
        config.max_steps = s;
    }
    if let Some(d) = args.delta {
        config.delta = d;
    }
    if let Some(w) = args.penalty_weight {
        config.penalty_weight = w;
    }
    if let Some(e) = args.epsilon_start {
        config.epsilon_start = e;
    }
    if let Some(e) = args.epsilon_end {
        config.epsilon_end = e;
    }
    if let Some(e) = args.epsilon_decay_steps {
        config.epsilon_decay_steps = e;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn output_root(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os("QDPP_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Creates `<env>_<algo>_<seed>_<timestamp>`, suffixing a counter on collision.
fn create_run_dir(root: &Path, env: EnvKind, algo: Algo, seed: u64) -> Result<PathBuf, Failure> {
    fs::create_dir_all(root).map_err(|e| Failure::io(root.display(), e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{env}_{algo}_{seed}_{stamp}");
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Failure::io(dir.display(), e)),
        }
    }
    unreachable!()
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::io(path.display(), e))
}

fn train_one(args: &TrainArgs, mut config: TrainConfig, seed: u64) -> Result<PathBuf, Failure> {
    config.seed = seed;
    let dir = create_run_dir(&output_root(&args.out), args.env, args.algo, seed)?;
    let mut manifest = RunManifest {
        algorithm: args.algo,
        env: args.env,
        seed,
        config: config.clone(),
        build: build_id(),
        started_at: now(),
        finished_at: None,
        outputs: Outputs {
            dir: dir.clone(),
            metrics: METRICS_FILE.into(),
            greedy: GREEDY_FILE.into(),
            checkpoint: CHECKPOINT_FILE.into(),
        },
        totals: None,
    };
    manifest.write(&dir).map_err(|e| Failure::io(dir.display(), e))?;

    let mut sink = CsvSink::new(create(&dir.join(METRICS_FILE))?, create(&dir.join(GREEDY_FILE))?)
        .map_err(|e| Failure::io(dir.display(), e))?;
    log::info!("training {} on {} (seed {seed}) into {}", args.algo, args.env, dir.display());
    let (agent, summary) = learner::train(args.env, args.algo, &config, &mut sink)?;
    sink.finish().map_err(|e| Failure::io(dir.display(), e))?;

    let ckpt = dir.join(CHECKPOINT_FILE);
    let mut out = create(&ckpt)?;
    agent.write_checkpoint(&mut out)?;
    out.flush().map_err(|e| Failure::io(ckpt.display(), e))?;

    manifest.finished_at = Some(now());
    manifest.totals = Some(Totals::from(&summary));
    manifest.write(&dir).map_err(|e| Failure::io(dir.display(), e))?;
    if let Some(last) = summary.greedy.last() {
        log::info!("final greedy return {}", last.greedy_return);
    }
    Ok(dir)
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let config = resolve_config(&args)?;
    let seeds = args.seeds.clone().unwrap_or_else(|| vec![config.seed]);
    for seed in seeds {
        let dir = train_one(&args, config.clone(), seed)?;
        println!("{}", dir.display());
    }
    Ok(())
}

enum Loaded {
    Kernel(QDppKernel),
    Tables(TabularQ),
}

fn load_checkpoint(path: &Path) -> Result<Loaded, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::io(path.display(), e))?;
    match bytes.get(..4) {
        Some(m) if m == CHECKPOINT_MAGIC => Ok(Loaded::Kernel(kernel::read_checkpoint(&bytes[..])?)),
        Some(m) if m == TABLE_MAGIC => Ok(Loaded::Tables(TabularQ::read(&bytes[..])?)),
        _ => Err(Failure::Checkpoint(format!("{}: not a checkpoint", path.display()))),
    }
}

/// Greedy-only agent view over a loaded checkpoint.
struct Frozen(Loaded);

impl Agent for Frozen {
    fn algo(&self) -> &'static str {
        "frozen"
    }

    fn act(&mut self, obs: &[usize], _: f64, _: &mut qdpp::rng::Rng) -> Result<sampler::Explored, LearnerError> {
        Ok(sampler::Explored {
            actions: self.greedy(obs)?,
            sampled: false,
            degenerate_slices: 0,
        })
    }

    fn greedy(&self, obs: &[usize]) -> Result<Vec<usize>, LearnerError> {
        Ok(match &self.0 {
            Loaded::Kernel(k) => k.greedy_joint(obs)?,
            Loaded::Tables(t) => t.greedy_joint(obs)?,
        })
    }

    fn train(&mut self, _: &[&learner::Transition]) -> Result<learner::TrainStats, LearnerError> {
        Ok(learner::TrainStats::default())
    }

    fn write_checkpoint(&self, out: &mut dyn Write) -> Result<(), LearnerError> {
        match &self.0 {
            Loaded::Kernel(k) => kernel::write_checkpoint(k, out)?,
            Loaded::Tables(t) => t.write(out)?,
        }
        Ok(())
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    if args.episodes == 0 {
        return Err(Failure::Usage("--episodes must be at least 1".into()));
    }
    let loaded = load_checkpoint(&args.checkpoint)?;
    let parent = args
        .checkpoint
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let env_kind = match args.env {
        Some(e) => e,
        None => {
            RunManifest::read(&parent)
                .map_err(|e| Failure::Usage(format!("--env not given and no readable manifest beside the checkpoint: {e}")))?
                .env
        }
    };
    let mut env = env_kind.make();
    let spec = env.spec();
    let want = GroundSet::new(spec.n_agents, spec.n_obs, spec.n_actions)?;
    let got = match &loaded {
        Loaded::Kernel(k) => *k.ground(),
        Loaded::Tables(t) => *t.ground(),
    };
    if got != want {
        return Err(Failure::Usage(format!(
            "checkpoint shape {got:?} does not match {env_kind} ({want:?})"
        )));
    }
    let agent = Frozen(loaded);
    let mut rng = stream(args.seed, Stream::Eval);
    let returns = learner::evaluate_greedy(env.as_mut(), &agent, args.episodes, &mut rng)?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();

    let out = args.out.unwrap_or_else(|| parent.join("eval.csv"));
    let mut w = create(&out)?;
    let write = |w: &mut BufWriter<File>| -> io::Result<()> {
        writeln!(w, "episode,return")?;
        for (i, r) in returns.iter().enumerate() {
            writeln!(w, "{i},{r}")?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Failure::io(out.display(), e))?;
    println!("{mean} ± {std} over {} episodes", returns.len());
    Ok(())
}

fn cmd_sample_debug(args: DebugArgs) -> Result<(), Failure> {
    let kernel = match load_checkpoint(&args.checkpoint)? {
        Loaded::Kernel(k) => k,
        Loaded::Tables(_) => {
            return Err(Failure::Usage("sample-debug needs a kernel checkpoint, not a table".into()))
        }
    };
    let dist = sampler::exact_distribution(&kernel, &args.obs)?;
    let mut rng = stream(args.seed, Stream::Debug);
    let report = sampler::theorem1_check(&kernel, &args.obs, args.draws, &mut rng)?;

    let dir = args.out.unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Failure::io(dir.display(), e))?;
    let agents: Vec<String> = (0..kernel.ground().n_agents()).map(|i| format!("a{i}")).collect();
    let cols = agents.join(",");
    let join = |a: &[usize]| a.iter().map(usize::to_string).collect::<Vec<_>>().join(",");

    let path = dir.join("distribution.csv");
    let mut w = create(&path)?;
    let res: io::Result<()> = (|| {
        writeln!(w, "{cols},probability")?;
        for k in 0..dist.len() {
            writeln!(w, "{},{}", join(&dist.actions(k)), dist.probs[k])?;
        }
        w.flush()
    })();
    res.map_err(|e| Failure::io(path.display(), e))?;

    let path = dir.join("bound.csv");
    let mut w = create(&path)?;
    let res: io::Result<()> = (|| {
        writeln!(w, "{cols},empirical,exact,bound,status")?;
        for r in &report.rows {
            let status = match r.pass {
                Some(true) => "pass",
                Some(false) => "fail",
                None => "skipped",
            };
            let bound = r.bound.map(|b| b.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{bound},{status}", join(&r.actions), r.empirical, r.exact)?;
        }
        w.flush()
    })();
    res.map_err(|e| Failure::io(path.display(), e))?;

    let verdict = if report.skipped() {
        "skipped (delta = 0)"
    } else if report.all_pass() {
        "pass"
    } else {
        "fail"
    };
    println!(
        "delta {} over {} draws, {} outcomes: {verdict}{}",
        report.delta,
        report.n_draws,
        report.rows.len(),
        if dist.all_zero { " (all determinants zero, uniform)" } else { "" }
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SampleDebug(a) => cmd_sample_debug(a),
        Command::Version => {
            println!("{}", build_id());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
