mod selfcheck;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cul_core::evalbench::{self, emit_case, emit_monte_carlo, resolve_case, write_reward_curve};
use cul_core::{nominal_mbc, Policies, RunConfig, RunMeta, StateSpaceController, TrainVariant, Trainer};

#[derive(Parser)]
#[command(name = "cul", version, about = "Continual uncertainty learning for powertrain vibration control")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Episodes per curriculum stage (overrides the config).
    #[arg(long, global = true)]
    episodes_per_stage: Option<usize>,
    /// Steps per episode (overrides the config).
    #[arg(long, global = true)]
    horizon: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or more agents through the curriculum.
    Train {
        /// Variants to train.
        #[arg(long, value_enum, num_args = 1.., default_value = "proposed")]
        variant: Vec<VariantArg>,
        /// Continue from the latest checkpoint of each variant if present.
        #[arg(long)]
        resume: bool,
    },
    /// Compare all variants on a named corner case or a key=value spec.
    Eval {
        /// Case name (nominal, fig6, fig7, fig8) or spec such as "m_b=max,delta=min".
        #[arg(long, default_value = "nominal")]
        case: String,
        /// Directory holding trained checkpoints [default: <out>/checkpoints].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Monte Carlo robustness study over fully randomized plants.
    Montecarlo {
        /// Number of sampled plants [default: from config].
        #[arg(long)]
        trials: Option<usize>,
        /// Directory holding trained checkpoints [default: <out>/checkpoints].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Synthesize the baseline controller and export its matrices.
    SynthMbc,
    /// Run a fast subset of the property checks.
    Selfcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Proposed,
    NoMbc,
    FullRandomization,
    All,
}

impl VariantArg {
    fn expand(self) -> Vec<TrainVariant> {
        match self {
            VariantArg::Proposed => vec![TrainVariant::Proposed],
            VariantArg::NoMbc => vec![TrainVariant::NoMbc],
            VariantArg::FullRandomization => vec![TrainVariant::FullRandomization],
            VariantArg::All => TrainVariant::ALL.to_vec(),
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    if let Some(n) = g.episodes_per_stage {
        cfg.schedule.episodes_per_stage = n;
    }
    if let Some(h) = g.horizon {
        cfg.env.horizon = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn meta(cfg: &RunConfig) -> RunMeta {
    RunMeta {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_effective_config(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("config.toml");
    let text = format!("# config_hash={} seed={}\n{}", cfg.hash(), cfg.seed, cfg.to_toml()?);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_path(dir: &Path, v: TrainVariant) -> PathBuf {
    dir.join(format!("{}.bin", v.name()))
}

fn cmd_train(cfg: &RunConfig, variants: &[VariantArg], resume: bool) -> Result<()> {
    write_effective_config(cfg)?;
    let ck_dir = cfg.output_dir.join("checkpoints");
    create_dir(&ck_dir)?;
    let mut order: Vec<TrainVariant> = Vec::new();
    for v in variants.iter().flat_map(|v| v.expand()) {
        if !order.contains(&v) {
            order.push(v);
        }
    }
    let hash = cfg.hash();
    let mbc = nominal_mbc(cfg)?;
    for variant in order {
        let ck = checkpoint_path(&ck_dir, variant);
        let mut trainer = if resume && ck.exists() {
            let t = Trainer::load(&ck)?;
            if t.config_hash != hash {
                bail!("checkpoint {} was written with config {} but the current config is {hash}", ck.display(), t.config_hash);
            }
            eprintln!("{}: resuming at episode {}", variant.name(), t.episode);
            t
        } else {
            Trainer::new(variant, cfg.train_setup(), mbc.clone(), cfg.seed, hash.clone())?
        };
        let total = trainer.setup.schedule.total_episodes();
        let result = trainer.run(|t| {
            let last = t.curve.last().expect("a stage ended");
            eprintln!(
                "{}: stage {} done at episode {}/{} (last return {:.4})",
                variant.name(),
                last.stage,
                t.episode,
                total,
                last.ret
            );
            t.save(&ck)
        });
        if let Err(e) = result {
            let aborted = ck_dir.join(format!("{}_aborted.bin", variant.name()));
            trainer.save(&aborted)?;
            return Err(e).with_context(|| format!("{} training aborted; state saved to {}", variant.name(), aborted.display()));
        }
        trainer.save(&ck)?;
        let curve = cfg.output_dir.join(format!("reward_curve_{}.csv", variant.name()));
        write_reward_curve(&curve, &meta(cfg), &trainer.curve)?;
        println!("{}: wrote {} and {}", variant.name(), ck.display(), curve.display());
    }
    Ok(())
}

/// Loads every available trained policy and the controller they were
/// trained with.
fn load_policies(cfg: &RunConfig, dir: &Path) -> Result<(Policies, StateSpaceController)> {
    let mut policies = Policies::default();
    let mut mbc = None;
    for v in TrainVariant::ALL {
        let path = checkpoint_path(dir, v);
        if !path.exists() {
            continue;
        }
        let t = Trainer::load(&path)?;
        if t.config_hash != cfg.hash() {
            eprintln!(
                "warning: {} was trained with config {} but evaluation uses {}",
                path.display(),
                t.config_hash,
                cfg.hash()
            );
        }
        if !t.is_finished() {
            eprintln!("warning: {} is only trained through episode {}", path.display(), t.episode);
        }
        let policy = Some(t.policy());
        match v {
            TrainVariant::Proposed => policies.proposed = policy,
            TrainVariant::NoMbc => policies.no_mbc = policy,
            TrainVariant::FullRandomization => policies.full_randomization = policy,
        }
        mbc.get_or_insert(t.mbc);
    }
    let mbc = match mbc {
        Some(m) => m,
        None => {
            eprintln!("warning: no checkpoints in {}; evaluating baselines only", dir.display());
            nominal_mbc(cfg)?
        }
    };
    Ok((policies, mbc))
}

fn cmd_eval(cfg: &RunConfig, case: &str, checkpoint: Option<PathBuf>) -> Result<()> {
    let dir = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoints"));
    let params = resolve_case(case, &cfg.plant, &cfg.ranges).map_err(|e| match e {
        cul_core::CulError::UnknownCaseKey(k) => anyhow::anyhow!(
            "unknown case key {k:?}; valid keys are {}",
            evalbench::case_keys().join(", ")
        ),
        other => other.into(),
    })?;
    let (policies, mbc) = load_policies(cfg, &dir)?;
    let name = if case.contains('=') { "custom" } else { case };
    let result = evalbench::evaluate_case(name, &params, &mbc, &policies, &cfg.env)?;
    let out = cfg.output_dir.join("eval");
    let paths = emit_case(&out, &meta(cfg), &result)?;
    println!("{:<20} {:>14} {:>14}", "variant", "error_norm", "terminal_error");
    for r in &result.runs {
        println!("{:<20} {:>14.6e} {:>14.6e}", r.metric.variant.label(), r.metric.error_norm, r.metric.terminal_error);
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_montecarlo(cfg: &RunConfig, trials: Option<usize>, checkpoint: Option<PathBuf>) -> Result<()> {
    let dir = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoints"));
    let (policies, mbc) = load_policies(cfg, &dir)?;
    let n = trials.unwrap_or(cfg.monte_carlo_trials);
    let summary = evalbench::monte_carlo(n, &cfg.plant, &cfg.ranges, &mbc, &policies, &cfg.env, cfg.seed)?;
    let paths = emit_monte_carlo(&cfg.output_dir.join("montecarlo"), &meta(cfg), &summary, cfg.env.dt)?;
    println!("{:<20} {:>14} {:>14}", "variant", "mean", "std");
    for s in &summary.variants {
        println!("{:<20} {:>14.6e} {:>14.6e}", s.variant.label(), s.mean, s.std);
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let mbc = nominal_mbc(cfg)?;
    let model = cul_core::dynamics::linearize_nominal(&cfg.plant.linear(), cfg.env.dt)?;
    let rho = cul_core::lincontrol::closed_loop_spectral_radius(&model, &mbc);
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("mbc.txt");
    mbc.save(&path)?;
    println!("controller order {}, nominal closed-loop spectral radius {rho:.6}", mbc.order());
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Command::Selfcheck = cli.command {
        return Ok(selfcheck::run());
    }
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Train { variant, resume } => cmd_train(&cfg, &variant, resume)?,
        Command::Eval { case, checkpoint } => cmd_eval(&cfg, &case, checkpoint)?,
        Command::Montecarlo { trials, checkpoint } => cmd_montecarlo(&cfg, trials, checkpoint)?,
        Command::SynthMbc => cmd_synth(&cfg)?,
        Command::Selfcheck => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
