//! Command line front end: dataset generation, training, evaluation, the
//! gradient gate and the HTTP service.

pub mod service;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use pdas_core::data::{
    generate_domain, sample_sparse_points, DomainSpec, LabelOptions, DEFAULT_SIGMA,
};
use pdas_core::dataset::{write_dataset, Dataset};
use pdas_core::gradcheck::{primitive_suite, DEFAULT_EPS};
use pdas_core::infer::{default_stride, digest, evaluate_with_masks, export_masks, EvalConfig};
use pdas_core::model::ModelState;
use pdas_core::seed::{self, salt};
use pdas_core::train::{
    composed_loss_gradcheck, read_bootstrap_cache, uda_bootstrap_points, write_bootstrap_cache,
    Mode, TrainConfig, Trainer,
};
use pdas_core::Sample;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-3;
pub const GRADCHECK_SEEDS: u64 = 20;

/// Name of the reproducibility record written next to command outputs.
pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Parser)]
#[command(
    name = "pdas",
    version,
    about = "Promptable segmentation with domain adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// `source`, `target`, or a path to a JSON domain spec.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = pdas_core::data::DEFAULT_SPARSE_FRACTION)]
        sparse_frac: f64,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
    },
    /// Train from scratch (supervised) or adapt a source checkpoint.
    Train {
        #[arg(long)]
        mode: Option<Mode>,
        /// Resamples the target sparse points at this fraction.
        #[arg(long)]
        sparse_frac: Option<f64>,
        /// JSON training configuration; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Starting checkpoint, required for adaptation.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint and print the metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Fraction of ground-truth centers given as test prompts.
        #[arg(long, default_value_t = 0.0)]
        prompts: f64,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for predicted instance maps and RLE masks.
        #[arg(long)]
        masks_out: Option<PathBuf>,
    },
    /// Serve interactive segmentation over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080, value_parser = clap::value_parser!(u16).range(1..))]
        port: u16,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        max_concurrent: usize,
    },
    /// Finite-difference check of every primitive and the composed loss.
    Gradcheck {
        #[arg(long, default_value_t = GRADCHECK_SEEDS)]
        seeds: u64,
    },
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("PDAS_LOG", "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp_millis()
        .try_init();
}

fn dispatch(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::GenData {
            spec,
            n,
            out,
            seed,
            sparse_frac,
            sigma,
        } => {
            gen_data(
                &spec,
                n,
                &out,
                seed,
                LabelOptions {
                    sigma,
                    sparse_fraction: sparse_frac,
                },
            )?;
            Ok(EXIT_OK)
        }
        Command::Train {
            mode,
            sparse_frac,
            config,
            out,
            source,
            target,
            init,
            iterations,
            seed,
        } => {
            let mut cfg: TrainConfig = match &config {
                Some(p) => serde_json::from_slice(
                    &std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
                )?,
                None => TrainConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(f) = sparse_frac {
                cfg.sparse_fraction = f;
            }
            if let Some(i) = iterations {
                cfg.iterations = i;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let resample = sparse_frac.is_some();
            train(
                cfg,
                &out,
                &source,
                target.as_deref(),
                init.as_deref(),
                resample,
            )?;
            Ok(EXIT_OK)
        }
        Command::Eval {
            ckpt,
            data,
            prompts,
            stride,
            seed,
            masks_out,
        } => {
            let report = eval(&ckpt, &data, prompts, stride, seed, masks_out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(EXIT_OK)
        }
        Command::Serve {
            port,
            ckpt,
            data,
            max_concurrent,
        } => {
            let config = service::ServiceConfig {
                port,
                checkpoint: ckpt,
                dataset_root: data,
                max_concurrent,
                max_image_side: service::MAX_IMAGE_SIDE,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(config))?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { seeds } => Ok(if gradcheck(seeds)? {
            EXIT_OK
        } else {
            EXIT_FAILURE
        }),
    }
}

fn resolve_spec(spec: &str) -> anyhow::Result<DomainSpec> {
    Ok(match spec {
        "source" => DomainSpec::source(),
        "target" => DomainSpec::target(),
        path => serde_json::from_slice(
            &std::fs::read(path).with_context(|| format!("reading spec {path}"))?,
        )
        .with_context(|| format!("parsing spec {path}"))?,
    })
}

/// Writes `run.json` holding the command, its configuration and the
/// configuration digest.
pub fn write_run_record<T: Serialize>(
    dir: &Path,
    command: &str,
    config: &T,
) -> anyhow::Result<String> {
    let config = serde_json::to_value(config)?;
    let digest = digest(&config)?;
    let record =
        serde_json::json!({ "command": command, "config": config, "config_digest": digest });
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RUN_RECORD), serde_json::to_vec_pretty(&record)?)?;
    Ok(digest)
}

pub fn gen_data(
    spec: &str,
    n: usize,
    out: &Path,
    seed: Option<u64>,
    labels: LabelOptions,
) -> anyhow::Result<()> {
    let mut spec = resolve_spec(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let samples = generate_domain(&spec, n, &labels)?;
    write_dataset(out, &spec, &labels, &samples)?;
    let d = write_run_record(
        out,
        "gen-data",
        &serde_json::json!({ "spec": spec, "labels": labels, "n": n }),
    )?;
    log::info!("wrote {n} samples to {} (config {d})", out.display());
    Ok(())
}

fn load_samples(dir: &Path) -> anyhow::Result<(Dataset, Vec<Sample>)> {
    let ds = Dataset::open(dir).with_context(|| format!("opening dataset {}", dir.display()))?;
    let samples = ds.samples()?;
    Ok((ds, samples))
}

pub fn train(
    cfg: TrainConfig,
    out: &Path,
    source: &Path,
    target: Option<&Path>,
    init: Option<&Path>,
    resample: bool,
) -> anyhow::Result<()> {
    cfg.validate()?;
    let (_, source_samples) = load_samples(source)?;
    let mut target_samples = match target {
        Some(t) => {
            let (ds, mut samples) = load_samples(t)?;
            if resample {
                for (i, s) in samples.iter_mut().enumerate() {
                    s.sparse = sample_sparse_points(
                        &s.centers,
                        cfg.sparse_fraction,
                        seed::mix(ds.manifest.seed, salt::SPARSE, i as u64),
                    );
                }
            }
            samples
        }
        None => Vec::new(),
    };
    if cfg.mode != Mode::Supervised && target_samples.is_empty() {
        bail!("--target is required for {:?} training", cfg.mode);
    }
    if cfg.mode == Mode::Supervised {
        target_samples.clear();
    }
    let model = match init {
        Some(p) => ModelState::load(p).with_context(|| format!("loading {}", p.display()))?,
        None if cfg.mode == Mode::Supervised => ModelState::new(cfg.model.clone(), cfg.seed)?,
        None => bail!("--init is required for {:?} training", cfg.mode),
    };
    if model.config() != &cfg.model {
        log::warn!("initial checkpoint's model configuration overrides the training configuration");
    }
    let mut cfg = cfg;
    cfg.model = model.config().clone();
    let bootstrap = if cfg.mode == Mode::Uda {
        let cache = out.join("bootstrap.json");
        let cached = cache
            .is_file()
            .then(|| read_bootstrap_cache(&cache))
            .transpose()?;
        match cached {
            Some(b) if b.len() == target_samples.len() => Some(b),
            _ => {
                let images: Vec<_> = target_samples.iter().map(|s| s.image.clone()).collect();
                let b = uda_bootstrap_points(&model, &images, &cfg)?;
                std::fs::create_dir_all(out)?;
                write_bootstrap_cache(&cache, &b)?;
                Some(b)
            }
        }
    } else {
        None
    };
    let d = write_run_record(
        out,
        "train",
        &serde_json::json!({
            "train": cfg,
            "source": source,
            "target": target,
            "init": init,
            "init_step": model.step,
        }),
    )?;
    log::info!(
        "training {:?} for {} iterations (config {d})",
        cfg.mode,
        cfg.iterations
    );
    let mut trainer = Trainer::new(cfg, model, source_samples, target_samples, bootstrap)?;
    trainer.run(Some(out))?;
    log::info!("wrote {}", out.join("final.ckpt").display());
    Ok(())
}

pub fn eval(
    ckpt: &Path,
    data: &Path,
    prompts: f64,
    stride: Option<usize>,
    seed: u64,
    masks_out: Option<&Path>,
) -> anyhow::Result<pdas_core::infer::MetricsReport> {
    let model = ModelState::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (_, samples) = load_samples(data)?;
    let config = EvalConfig {
        prompt_fraction: prompts,
        seed,
        stride: stride.unwrap_or_else(|| default_stride(&model)),
    };
    let (report, segs) = evaluate_with_masks(&model, &samples, &config)?;
    if let Some(dir) = masks_out {
        let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        export_masks(dir, &ids, &segs)?;
    }
    Ok(report)
}

/// Prints one line per check; true when every check is under tolerance.
pub fn gradcheck(seeds: u64) -> anyhow::Result<bool> {
    let mut ok = true;
    let mut worst = 0.0f64;
    for s in 0..seeds {
        for (name, r) in primitive_suite(s, DEFAULT_EPS) {
            match r {
                Ok(r) if r.max_rel_error < PRIMITIVE_TOLERANCE => {
                    worst = worst.max(r.max_rel_error)
                }
                Ok(r) => {
                    ok = false;
                    println!(
                        "FAIL {name} seed {s}: max relative error {:.3e}",
                        r.max_rel_error
                    );
                }
                Err(e) => {
                    ok = false;
                    println!("FAIL {name} seed {s}: {e}");
                }
            }
        }
    }
    println!("primitives: {seeds} seeds, worst max relative error {worst:.3e}");
    let composed = composed_loss_gradcheck(0, DEFAULT_EPS)?;
    let pass = composed.max_rel_error < COMPOSED_TOLERANCE;
    ok &= pass;
    println!(
        "{} composed loss: max relative error {:.3e} over {} entries",
        if pass { "ok" } else { "FAIL" },
        composed.max_rel_error,
        composed.checked
    );
    Ok(ok)
}
