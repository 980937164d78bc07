mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ncdpo::checkpoint::{load_actor, load_trainer, save_actor, save_trainer, Checkpoint};
use ncdpo::envs::{load_dataset, make_demonstrations, save_dataset, EnvRng};
use ncdpo::metrics::MetricsRow;
use ncdpo::rl::{derive_seed, evaluate, pretrain, Algo, EvalResult, Trainer};
use rand::SeedableRng;

use config::RunConfig;

const BUILD_ID: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("NCDPO_GIT_REV"));

/// Tags for seeds derived outside the training loop.
const TAG_ACTOR_INIT: [u64; 2] = [0, 1];
const TAG_PRETRAIN: [u64; 2] = [0, 3];
const TAG_DEMOS: [u64; 2] = [0, 4];
const TAG_EVAL: [u64; 2] = [u64::MAX, 0];

#[derive(Parser)]
#[command(name = "ncdpo", version = BUILD_ID, about = "Train and evaluate diffusion and MLP policies with PPO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations.
    MakeDemos {
        #[command(flatten)]
        common: Common,
    },
    /// Behavior-clone a policy on demonstrations.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        algo: Option<Algo>,
    },
    /// Fine-tune or train a policy with PPO.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        algo: Option<Algo>,
        /// Policy checkpoint to start from, or a training checkpoint to resume.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpointed policy.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write eval.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stochastic actions instead of the deterministic chain.
        #[arg(long)]
        stochastic: bool,
    },
    /// Train once per denoising step count and seed.
    AblateK {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        algo: Option<Algo>,
    },
    /// Plot metrics CSVs; `label=path` groups runs under one curve.
    Plot {
        #[arg(required = true)]
        inputs: Vec<String>,
        /// SVG file, or a directory to hold curves.svg.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "mean_return")]
        metric: String,
    },
}

/// Training stopped on a non-finite value.
#[derive(Debug)]
struct Halt(String);

impl std::fmt::Display for Halt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Halt {}

fn is_non_finite(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<Halt>().is_some()
            || matches!(
                c.downcast_ref::<ncdpo::Error>(),
                Some(ncdpo::Error::NonFinite(_))
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_non_finite(&e) { 2 } else { 1 })
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Config with command-line overrides applied, and the effective seed.
fn resolve(common: &Common, algo: Option<Algo>) -> Result<(RunConfig, u64)> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(a) = algo {
        cfg.train.algo = a.name().into();
    }
    let seed = common.seed.or(cfg.seed).unwrap_or(0);
    cfg.seed = Some(seed);
    Ok((cfg, seed))
}

fn prepare_dir(out: &Path, cfg: &RunConfig, seed: u64) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    fs::write(out.join("seed"), format!("{seed}\n"))?;
    fs::write(out.join("build_id"), format!("{BUILD_ID}\n"))?;
    Ok(())
}

fn write_eval(out: &Path, r: &EvalResult, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("eval.csv"))?;
    w.write_record(["episodes", "mean_return", "success_rate", "seed"])?;
    w.write_record([
        r.returns.len().to_string(),
        r.mean_return.to_string(),
        r.success_rate.to_string(),
        seed.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeDemos { common } => make_demos(&common),
        Command::Pretrain { common, algo } => {
            let (cfg, seed) = resolve(&common, algo)?;
            cfg.train_config()?;
            prepare_dir(&common.out, &cfg, seed)?;
            pretrain_run(&cfg, seed, &common.out).map(|_| ())
        }
        Command::Train {
            common,
            algo,
            checkpoint,
        } => {
            let (cfg, seed) = resolve(&common, algo)?;
            cfg.train_config()?;
            prepare_dir(&common.out, &cfg, seed)?;
            train_run(&cfg, seed, &common.out, checkpoint.as_deref()).map(|_| ())
        }
        Command::Evaluate {
            config,
            seed,
            checkpoint,
            out,
            stochastic,
        } => {
            let cfg = load_config(config.as_deref())?;
            let seed = seed.or(cfg.seed).unwrap_or(0);
            let (actor, env, chunk) = load_actor(&checkpoint)?;
            let episodes = cfg.train.eval_episodes.max(config::MIN_EVAL_EPISODES);
            let r = evaluate(
                &actor,
                &env,
                chunk,
                episodes,
                derive_seed(seed, &TAG_EVAL),
                !stochastic,
            )?;
            println!(
                "episodes {episodes} mean_return {} success_rate {}",
                r.mean_return, r.success_rate
            );
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                write_eval(&out, &r, seed)?;
            }
            Ok(())
        }
        Command::AblateK { common, algo } => ablate_k(&common, algo),
        Command::Plot {
            inputs,
            out,
            metric,
        } => plot_cmd(&inputs, &out, &metric),
    }
}

fn make_demos(common: &Common) -> Result<()> {
    let (cfg, seed) = resolve(common, None)?;
    let env = cfg.env.spec()?;
    let quality = cfg.demos.quality()?;
    prepare_dir(&common.out, &cfg, seed)?;
    let mut rng = EnvRng::seed_from_u64(derive_seed(seed, &TAG_DEMOS));
    let ds = make_demonstrations(&env, quality, cfg.demos.episodes, cfg.env.chunk, &mut rng)?;
    let path = common.out.join("demos.bin");
    save_dataset(&ds, &path)?;
    let mean = ds.episode_returns.iter().sum::<f64>() / ds.episode_returns.len() as f64;
    let success = ds.episode_successes.iter().filter(|&&s| s).count() as f64
        / ds.episode_successes.len() as f64;
    println!(
        "wrote {} records from {} {quality} episodes to {} (mean return {mean}, success rate {success})",
        ds.len(),
        ds.episode_returns.len(),
        path.display()
    );
    Ok(())
}

/// Behavior cloning; writes `checkpoint/`, `pretrain_loss.csv` and `eval.csv`
/// under `out` and returns the checkpoint directory.
fn pretrain_run(cfg: &RunConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    let tc = cfg.train_config()?;
    let demos = cfg
        .pretrain
        .demos
        .as_ref()
        .context("pretrain.demos is not set")?;
    let ds = load_dataset(demos, Some(&tc.env))
        .with_context(|| format!("loading {}", demos.display()))?;
    if ds.chunk != tc.chunk {
        bail!(
            "demonstrations use chunk {}, config asks for {}",
            ds.chunk,
            tc.chunk
        );
    }
    let mut actor = tc.actor.build(
        tc.algo.is_diffusion(),
        &tc.env,
        tc.chunk,
        derive_seed(seed, &TAG_ACTOR_INIT),
    )?;
    let trace = pretrain(
        &mut actor,
        &ds,
        &(&cfg.pretrain).into(),
        derive_seed(seed, &TAG_PRETRAIN),
    )?;
    let mut w = csv::Writer::from_path(out.join("pretrain_loss.csv"))?;
    w.write_record(["epoch", "bc_loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    let dir = out.join("checkpoint");
    save_actor(&dir, &actor, &tc.env, tc.chunk, seed)?;
    let r = evaluate(
        &actor,
        &tc.env,
        tc.chunk,
        cfg.train.eval_episodes,
        derive_seed(seed, &TAG_EVAL),
        true,
    )?;
    write_eval(out, &r, seed)?;
    println!(
        "pretrained {} epochs, final bc_loss {}; eval mean_return {} success_rate {}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN),
        r.mean_return,
        r.success_rate
    );
    Ok(dir)
}

/// PPO training into `out`. A checkpoint holding an iteration counter is
/// resumed; any other checkpoint supplies the initial policy.
fn train_run(
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<EvalResult> {
    let tc = cfg.train_config()?;
    let metrics_path = out.join("metrics.csv");
    let mut trainer = match checkpoint {
        Some(dir) if Checkpoint::read(dir)?.get("iteration").is_ok() => load_trainer(dir, tc)?,
        Some(dir) => {
            let (actor, env, chunk) = load_actor(dir)?;
            if env != tc.env || chunk != tc.chunk {
                bail!("checkpoint is for '{env}' with chunk {chunk}; config asks for '{}' with chunk {}", tc.env, tc.chunk);
            }
            Trainer::with_actor(tc, seed, actor)?
        }
        None => Trainer::new(tc, seed)?,
    };
    if trainer.seed != seed {
        let mut resumed = cfg.clone();
        resumed.seed = Some(trainer.seed);
        prepare_dir(out, &resumed, trainer.seed)?;
    }
    let mut rows: Vec<MetricsRow> = if trainer.iteration > 0 && metrics_path.exists() {
        plot::read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.iteration < trainer.iteration)
            .collect()
    } else {
        Vec::new()
    };
    plot::write_metrics(&metrics_path, &rows)?;
    let ckpts = out.join("checkpoints");
    while !trainer.finished() {
        let row = match trainer.step() {
            Ok(r) => r,
            Err(e @ ncdpo::Error::NonFinite(_)) => {
                let dir = ckpts.join("last_good");
                save_trainer(&dir, &trainer)?;
                return Err(
                    Halt(format!("{e}; last good state saved to {}", dir.display())).into(),
                );
            }
            Err(e) => return Err(e.into()),
        };
        eprintln!(
            "iter {} env_steps {} mean_return {} success_rate {}",
            row.iteration, row.env_steps, row.mean_return, row.success_rate
        );
        rows.push(row);
        plot::write_metrics(&metrics_path, &rows)?;
        let every = cfg.train.checkpoint_every;
        if every > 0 && trainer.iteration % every == 0 {
            save_trainer(
                &ckpts.join(format!("iter_{:06}", trainer.iteration)),
                &trainer,
            )?;
        }
    }
    save_trainer(&ckpts.join("final"), &trainer)?;
    let r = trainer.evaluate(
        cfg.train.eval_episodes,
        derive_seed(trainer.seed, &TAG_EVAL),
    )?;
    write_eval(out, &r, trainer.seed)?;
    println!(
        "{} iterations, {} env steps; eval over {} episodes: mean_return {} success_rate {}",
        trainer.iteration,
        trainer.env_steps,
        r.returns.len(),
        r.mean_return,
        r.success_rate
    );
    Ok(r)
}

fn ablate_k(common: &Common, algo: Option<Algo>) -> Result<()> {
    let (cfg, seed) = resolve(common, algo)?;
    if !cfg.algo()?.is_diffusion() {
        bail!("ablate-k needs a diffusion algorithm");
    }
    if cfg.ablate.k_list.is_empty() {
        bail!("ablate.k_list is empty");
    }
    prepare_dir(&common.out, &cfg, seed)?;
    let seeds = if cfg.ablate.seeds.is_empty() {
        vec![seed]
    } else {
        cfg.ablate.seeds.clone()
    };
    let mut w = csv::Writer::from_path(common.out.join("ablate_k.csv"))?;
    w.write_record(["k", "seed", "mean_return", "success_rate"])?;
    for &k in &cfg.ablate.k_list {
        for &s in &seeds {
            let mut run = cfg.clone();
            run.actor.steps = k;
            run.seed = Some(s);
            let dir = common.out.join(format!("k{k}_seed{s}"));
            prepare_dir(&dir, &run, s)?;
            let init = match run.pretrain.demos {
                Some(_) => Some(pretrain_run(&run, s, &dir)?),
                None => None,
            };
            let r = train_run(&run, s, &dir, init.as_deref())?;
            w.write_record([
                k.to_string(),
                s.to_string(),
                r.mean_return.to_string(),
                r.success_rate.to_string(),
            ])?;
            w.flush()?;
        }
    }
    Ok(())
}

fn plot_cmd(inputs: &[String], out: &Path, metric: &str) -> Result<()> {
    let mut groups: Vec<(String, Vec<Vec<MetricsRow>>)> = Vec::new();
    for input in inputs {
        let (label, path) = match input.split_once('=') {
            Some((l, p)) => (l.to_string(), p),
            None => (input.clone(), input.as_str()),
        };
        let rows = plot::read_metrics(Path::new(path))?;
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, runs)) => runs.push(rows),
            None => groups.push((label, vec![rows])),
        }
    }
    let curves = groups
        .iter()
        .map(|(label, runs)| plot::aggregate(label, runs, metric))
        .collect::<Result<Vec<_>>>()?;
    let svg = plot::render_svg(&curves, metric);
    let path = if out.extension().is_some_and(|e| e == "svg") {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        out.to_path_buf()
    } else {
        fs::create_dir_all(out)?;
        out.join("curves.svg")
    };
    fs::write(&path, svg)?;
    println!("wrote {}", path.display());
    Ok(())
}
