use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use finedual::checkpoint::Checkpoint;
use finedual::config::RunConfig;
use finedual::dataset::{load_dataset, save_dataset, Sample};
use finedual::evaluator::train_toy_evaluator;
use finedual::pipeline::{
    evaluate, evaluator_checkpoint, evaluator_from_checkpoint, generate, profile_dump, write_generations,
    MetricSelection,
};
use finedual::synth::{synth_generate, Scenario, SynthConfig};
use finedual::text::{decompose_prompt, DecompositionCache};
use finedual::train::{save_verified, train, TrainOptions, TrainedModel};
use finedual::{Error, Result};

// Training allocates many short-lived activation buffers; the system
// allocator returns them to the kernel and pays for it in page faults.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Environment variable that supplies the seed when no `--seed` is given.
const SEED_ENV: &str = "FINEDUAL_SEED";

#[derive(Parser)]
#[command(name = "finedual", version, about = "Tri-stage dual-human motion diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    SynthData {
        /// Scenario name or `all` to cycle through every scenario.
        #[arg(long, default_value = "all")]
        scenario: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 5)]
        joints: usize,
    },
    /// Train the denoiser and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the toy motion/text evaluator used by embedding metrics.
    TrainEvaluator {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample motion pairs for a prompt.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Tab-separated decomposition cache (overall, person1, person2).
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Config the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 20.0)]
        fps: f32,
    },
    /// Generate for every sample of a dataset and report metrics.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated groups: joint, embedding, all.
        #[arg(long, default_value = "joint")]
        metrics: String,
        #[arg(long)]
        evaluator: Option<PathBuf>,
        /// Output prefix; writes `<prefix>.tsv` and `<prefix>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Split a prompt into per-person descriptions.
    Decompose {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Dump ground-truth (and optionally predicted) distance profiles.
    InspectDistance {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numeric(_) => 3,
                _ => 2,
            })
        }
    }
}

fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::InvalidArgument(format!("{SEED_ENV}='{v}' is not a seed"))),
        Err(_) => Ok(fallback),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_model(ckpt: &Path, config: Option<&Path>, force: bool) -> Result<TrainedModel> {
    let ck = Checkpoint::load(ckpt)?;
    if let Some(path) = config {
        ck.check_fingerprint(&RunConfig::load(path)?.fingerprint(), force)?;
    }
    TrainedModel::from_checkpoint(&ck)
}

fn load_cache(path: Option<&Path>) -> Result<Option<DecompositionCache>> {
    path.map(DecompositionCache::load).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { scenario, count, out, seed, frames, joints } => {
            let seed = resolve_seed(seed, 0)?;
            let scenarios: Vec<Scenario> =
                if scenario == "all" { Scenario::ALL.to_vec() } else { vec![scenario.parse()?] };
            let config = SynthConfig { frames, joint_count: joints, ..SynthConfig::default() };
            let samples = (0..count)
                .map(|i| {
                    let sc = scenarios[i % scenarios.len()];
                    let (mut motion, prompt) = synth_generate(sc, &config, seed.wrapping_add(i as u64))?;
                    motion.id = format!("{sc}-{i:05}");
                    Ok(Sample { motion, prompts: decompose_prompt(&prompt, None) })
                })
                .collect::<Result<Vec<_>>>()?;
            save_dataset(&out, &samples)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train { config, data, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.seed = resolve_seed(seed, cfg.seed)?;
            let samples = load_dataset(&data)?;
            let options = TrainOptions { null_text: false, checkpoint_dir: out.parent().map(Path::to_path_buf) };
            let every = cfg.train.log_every.max(1);
            let trained = train(&cfg, &samples, &options, |log| {
                if log.step % every == 0 {
                    eprintln!(
                        "step {:>6}  loss {:.6}  recon {:.6}  distance {:.6}  lr {:.3e}",
                        log.step, log.loss, log.recon, log.distance, log.lr
                    );
                }
            })?;
            save_verified(&trained.checkpoint(), &out)?;
            println!("wrote {} (fingerprint {})", out.display(), cfg.fingerprint());
        }
        Command::TrainEvaluator { config, data, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.seed = resolve_seed(seed, cfg.seed)?;
            let samples = load_dataset(&data)?;
            let eval = train_toy_evaluator(&samples, &cfg.evaluator, cfg.seed)?;
            evaluator_checkpoint(&eval, &cfg).save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Generate { ckpt, prompt, count, seed, out, cache, config, force, fps } => {
            let seed = resolve_seed(seed, 0)?;
            let model = load_model(&ckpt, config.as_deref(), force)?;
            let cache = load_cache(cache.as_deref())?;
            let (record, gens) = generate(&model, &prompt, cache.as_ref(), count, fps, seed)?;
            write_generations(&out, &record, &gens)?;
            println!("person1: {}\nperson2: {}\nwrote {count} pairs to {}", record.person1, record.person2, out.display());
        }
        Command::Evaluate { ckpt, data, metrics, evaluator, out, seed, config, force } => {
            let seed = resolve_seed(seed, 0)?;
            let selection: MetricSelection = metrics.parse()?;
            let model = load_model(&ckpt, config.as_deref(), force)?;
            let eval = evaluator.map(|p| evaluator_from_checkpoint(&Checkpoint::load(&p)?)).transpose()?;
            let samples = load_dataset(&data)?;
            let report = evaluate(&model, &samples, eval.as_ref(), selection, seed)?;
            match out {
                Some(prefix) => {
                    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
                        fs::create_dir_all(dir)?;
                    }
                    fs::write(prefix.with_extension("tsv"), report.to_tsv())?;
                    fs::write(prefix.with_extension("json"), report.to_json())?;
                }
                None => print!("{}", report.to_tsv()),
            }
            for (k, v) in &report.metrics {
                eprintln!("{k}\t{v}");
            }
        }
        Command::Decompose { prompt, cache } => {
            if prompt.trim().is_empty() {
                return Err(Error::InvalidArgument("prompt must not be empty".into()));
            }
            let cache = load_cache(cache.as_deref())?;
            let r = decompose_prompt(&prompt, cache.as_ref());
            println!("overall\t{}\nperson1\t{}\nperson2\t{}\nsource\t{}", r.overall, r.person1, r.person2, r.source.as_str());
        }
        Command::InspectDistance { data, k, ckpt } => {
            let samples = load_dataset(&data)?;
            let model = ckpt.map(|p| load_model(&p, None, false)).transpose()?;
            print!("{}", profile_dump(&samples, k, model.as_ref())?);
        }
    }
    Ok(())
}
