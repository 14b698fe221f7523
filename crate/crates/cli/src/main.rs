use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use seprep_core::adapt::{adapt, AdaptConfig};
use seprep_core::ckpt;
use seprep_core::data::{gen_domain, split, DomainSpec, LabeledSet, Transform};
use seprep_core::experiment::{pretrain, ExperimentConfig, PretrainConfig};
use seprep_core::metrics::{evaluate, fingerprint, flops_count, EvalReport, Predictor};
use seprep_core::nn::{fine_tune, train_source, Arch, ModelBundle, TrainConfig};
use seprep_core::seprep::{assemble, fuse_model, Criterion, WeightMode};
use seprep_core::{run_experiment, Real, SplitMix64, Tensor};

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {
        writeln!(io::stdout().lock(), $($arg)*)?
    };
}

#[derive(Parser)]
#[command(name = "seprep", version, about = "Assemble, adapt and fuse source models on synthetic domains")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Arithmetic used for computation; checkpoints always store 32-bit floats.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    PerBatch,
    PerSample,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test datasets for a list of domains.
    GenData {
        /// Comma-separated transforms, e.g. identity,rotate:25,invert,noise:0.2
        #[arg(long, default_value = "identity,rotate:25,invert,noise:0.2")]
        domains: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 150)]
        per_class: usize,
        /// Fraction of each domain held out for testing.
        #[arg(long, default_value_t = 1.0 / 3.0)]
        test_fraction: f64,
    },
    /// Train a shared initialization on classes disjoint from the benchmark's.
    Pretrain {
        #[arg(long, default_value = "toy")]
        arch: String,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.2)]
        lr: f64,
    },
    /// Supervised training of one source model.
    TrainSource {
        #[arg(long)]
        domain: PathBuf,
        #[arg(long, default_value = "toy")]
        arch: String,
        /// Start from this checkpoint with a fresh head instead of a random initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.2)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1.0)]
        head_lr_mult: f64,
    },
    /// Stack source models into one multi-pathway network.
    Assemble {
        #[arg(long, num_args = 1.., required = true)]
        sources: Vec<PathBuf>,
    },
    /// Adapt an assembled network to unlabeled target images.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        /// Dataset whose images are used; its labels are ignored.
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        #[arg(long, default_value_t = 0.3)]
        beta_pl: f64,
        #[arg(long, value_enum, default_value_t = CriterionArg::Entropy)]
        criterion: CriterionArg,
    },
    /// Reparameterize every unit into one convolution with bias.
    Fuse {
        #[arg(long)]
        model: PathBuf,
    },
    /// Evaluate a model on labeled source and target test sets.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        sources: Vec<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::PerBatch)]
        weight_mode: Mode,
        #[arg(long, value_enum, default_value_t = CriterionArg::Entropy)]
        criterion: CriterionArg,
        /// Method name recorded in the report.
        #[arg(long)]
        method: Option<String>,
    },
    /// Per-sample FLOPs of a model.
    Flops {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the full comparison from a JSON config.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Entropy,
    Confidence,
    Margin,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Entropy => Criterion::Entropy,
            CriterionArg::Confidence => Criterion::Confidence,
            CriterionArg::Margin => Criterion::Margin,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::FAILURE;
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| c.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe))
}

fn out_path(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().context("--out is required for this command")
}

fn load_model(path: &Path) -> Result<ModelBundle<f32>> {
    ckpt::load_model(path).with_context(|| format!("bad checkpoint {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<LabeledSet> {
    ckpt::load_dataset(path).with_context(|| format!("bad dataset {}", path.display()))
}

/// Domain name of a dataset file written by `gen-data`.
fn domain_name(path: &Path) -> String {
    let stem = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = stem.strip_suffix(".sprn").unwrap_or(&stem);
    let stem = stem.strip_suffix(".test").or_else(|| stem.strip_suffix(".train")).unwrap_or(stem);
    stem.to_string()
}

/// Records the command's configuration and its fingerprint next to `out`.
fn write_run_record(out: &Path, command: &str, config: Value) -> Result<String> {
    let fp = fingerprint(&json!({ "command": command, "config": config }))?;
    let record = json!({ "command": command, "config": config, "fingerprint": fp });
    let path = if out.is_dir() {
        out.join("run.json")
    } else {
        let mut name = out.as_os_str().to_owned();
        name.push(".run.json");
        PathBuf::from(name)
    };
    fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(fp)
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let precision = precision_name(cli.precision);
    match &cli.command {
        Command::GenData {
            domains,
            classes,
            per_class,
            test_fraction,
        } => {
            let out = out_path(cli)?;
            let transforms = domains
                .split(',')
                .map(|d| d.parse::<Transform>())
                .collect::<seprep_core::Result<Vec<_>>>()?;
            fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
            let root = SplitMix64::new(seed);
            for (i, t) in transforms.iter().enumerate() {
                let mut rng = root.derive(i as u64);
                let spec = DomainSpec::new(*t, *per_class, rng.next_u64());
                let set = gen_domain(&spec, *classes)?;
                let (train, test) = split(&set, (1.0 - test_fraction, *test_fraction), rng.next_u64())?;
                let name = t.to_string().replace(':', "_");
                ckpt::save_dataset(&train, out.join(format!("{name}.train.sprn")))?;
                ckpt::save_dataset(&test, out.join(format!("{name}.test.sprn")))?;
                say!("{name}: {} train, {} test", train.len(), test.len());
            }
            let config = json!({
                "domains": transforms.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
                "classes": classes, "per_class": per_class, "test_fraction": test_fraction, "seed": seed,
            });
            write_run_record(out, "gen-data", config)?;
        }
        Command::Pretrain {
            arch,
            per_class,
            epochs,
            lr,
        } => {
            let out = out_path(cli)?;
            let arch = Arch::parse(arch)?;
            let cfg = PretrainConfig {
                per_class: *per_class,
                train: TrainConfig { epochs: *epochs, lr: *lr, ..TrainConfig::default() },
                ..PretrainConfig::default()
            };
            let model = pretrain(&cfg, &arch, seed)?;
            ckpt::save_model(&model, out)?;
            write_run_record(out, "pretrain", json!({ "arch": arch, "pretrain": cfg, "seed": seed }))?;
        }
        Command::TrainSource {
            domain,
            arch,
            init,
            epochs,
            lr,
            batch_size,
            head_lr_mult,
        } => {
            let out = out_path(cli)?;
            let data = load_dataset(domain)?;
            let cfg = TrainConfig {
                epochs: *epochs,
                lr: *lr,
                batch_size: *batch_size,
                head_lr_mult: *head_lr_mult,
                seed,
                ..TrainConfig::default()
            };
            let base = match init {
                Some(path) => {
                    let mut m = load_model(path)?;
                    m.reset_heads(SplitMix64::new(seed).derive(1).next_u64());
                    Some(m)
                }
                None => None,
            };
            let arch = match &base {
                Some(m) => m.arch.clone(),
                None => Arch::parse(arch)?,
            };
            let model: ModelBundle<f32> = match cli.precision {
                Precision::F32 => train_in(&base, &data, &arch, &cfg)?,
                Precision::F64 => train_in::<f64>(&base.map(|m| m.cast()), &data, &arch, &cfg)?.cast(),
            };
            ckpt::save_model(&model, out)?;
            let config = json!({
                "domain": domain, "arch": arch, "init": init, "train": cfg, "precision": precision,
            });
            write_run_record(out, "train-source", config)?;
        }
        Command::Assemble { sources } => {
            let out = out_path(cli)?;
            let models = sources.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
            let model = assemble(&models)?;
            ckpt::save_model(&model, out)?;
            write_run_record(out, "assemble", json!({ "sources": sources }))?;
        }
        Command::Adapt {
            model,
            target,
            epochs,
            lr,
            beta_pl,
            criterion,
        } => {
            let out = out_path(cli)?;
            let m = load_model(model)?;
            let images = load_dataset(target)?.images;
            let cfg = AdaptConfig {
                epochs: *epochs,
                lr: *lr,
                beta_pl: *beta_pl,
                criterion: (*criterion).into(),
                seed,
                ..AdaptConfig::default()
            };
            let (adapted, weights) = match cli.precision {
                Precision::F32 => {
                    let a = adapt(&m, &images, &cfg)?;
                    (a.model, a.loss_weights)
                }
                Precision::F64 => {
                    let a = adapt(&m.cast::<f64>(), &images.cast::<f64>(), &cfg)?;
                    (a.model.cast(), a.loss_weights)
                }
            };
            say!("head-loss weights ({}): {:?}", weights.criterion, weights.weights);
            ckpt::save_model(&adapted, out)?;
            let config = json!({ "model": model, "target": target, "adapt": cfg, "precision": precision });
            write_run_record(out, "adapt", config)?;
        }
        Command::Fuse { model } => {
            let out = out_path(cli)?;
            let m = load_model(model)?;
            let fused = fuse_model(&m)?;
            let deviation = match cli.precision {
                Precision::F32 => probe_deviation(&m, &fused, seed)?,
                Precision::F64 => probe_deviation(&m.cast::<f64>(), &fused.cast::<f64>(), seed)?,
            };
            say!("max |logit difference| over 64 probe inputs: {deviation:.3e}");
            ckpt::save_model(&fused, out)?;
            write_run_record(out, "fuse", json!({ "model": model, "seed": seed, "precision": precision }))?;
        }
        Command::Eval {
            model,
            sources,
            target,
            weight_mode,
            criterion,
            method,
        } => {
            let m = load_model(model)?;
            let mode = match weight_mode {
                Mode::PerBatch => WeightMode::PerBatch,
                Mode::PerSample => WeightMode::PerSample,
            };
            let src = sources
                .iter()
                .map(|p| Ok((domain_name(p), load_dataset(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let tgt = (domain_name(target), load_dataset(target)?);
            let method = method.clone().unwrap_or_else(|| m.form().to_string());
            let config = json!({
                "model": model, "sources": sources, "target": target, "criterion": Criterion::from(*criterion),
                "weight_mode": mode, "method": method, "precision": precision,
            });
            let fp = fingerprint(&json!({ "command": "eval", "config": config }))?;
            let criterion = Criterion::from(*criterion);
            let src_refs: Vec<(&str, &LabeledSet)> = src.iter().map(|(n, s)| (n.as_str(), s)).collect();
            let tgt_ref = (tgt.0.as_str(), &tgt.1);
            let report = match cli.precision {
                Precision::F32 => {
                    let p = Predictor::Model { model: &m, mode, criterion };
                    evaluate(&method, &p, &src_refs, tgt_ref, &fp, false)?
                }
                Precision::F64 => {
                    let m64 = m.cast::<f64>();
                    let p = Predictor::Model { model: &m64, mode, criterion };
                    evaluate(&method, &p, &src_refs, tgt_ref, &fp, false)?
                }
            };
            if let Some(out) = &cli.out {
                fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
                fs::write(out.join("report.json"), report.to_json()? + "\n")?;
                fs::write(out.join("report.csv"), EvalReport::to_csv(std::slice::from_ref(&report)))?;
                write_run_record(out, "eval", config)?;
            }
            say!(
                "{}: S {:.2} T {:.2} H {:.2} FLOPs {}",
                report.method, report.source_mean, report.target_accuracy, report.h_score, report.flops.total
            );
            say!("{}", report.to_json()?);
        }
        Command::Flops { model } => {
            let m = load_model(model)?;
            let f = flops_count(&m, &m.arch.input_shape())?;
            say!("form {} ({} pathways, {} heads)", m.form(), m.pathways(), m.num_heads());
            say!("extractor {}", f.extractor);
            say!("heads {}", f.heads);
            say!("total {}", f.total);
            if let Some(out) = &cli.out {
                fs::write(out, serde_json::to_string_pretty(&f)? + "\n")?;
                write_run_record(out, "flops", json!({ "model": model }))?;
            }
        }
        Command::Experiment { config } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
                    ExperimentConfig::from_json(&text)?
                }
                None => ExperimentConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if matches!(cli.precision, Precision::F64) {
                bail!("experiment runs in 32-bit only");
            }
            let report = run_experiment(&cfg)?;
            if let Some(out) = &cli.out {
                fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
                fs::write(out.join("report.csv"), report.to_csv())?;
                fs::write(out.join("report.json"), report.to_json()? + "\n")?;
                if cfg.ablation {
                    fs::write(out.join("ablation.csv"), report.ablation_csv())?;
                }
                write_run_record(out, "experiment", serde_json::to_value(&cfg)?)?;
            }
            write!(io::stdout().lock(), "{}", report.table())?;
        }
    }
    Ok(())
}

fn train_in<T: Real>(
    base: &Option<ModelBundle<T>>,
    data: &LabeledSet,
    arch: &Arch,
    cfg: &TrainConfig,
) -> Result<ModelBundle<T>> {
    Ok(match base {
        Some(m) => fine_tune(m, data, cfg)?,
        None => train_source(data, arch, cfg)?,
    })
}

/// Largest logit difference between two models on 64 uniform random images.
fn probe_deviation<T: Real>(a: &ModelBundle<T>, b: &ModelBundle<T>, seed: u64) -> Result<f64> {
    let [c, h, w] = a.arch.input_shape();
    let mut rng = SplitMix64::new(seed);
    let n = 64 * c * h * w;
    let x = Tensor::new(&[64, c, h, w], (0..n).map(|_| T::from_f64(rng.next_f64())).collect())?;
    Ok(a.forward_eval(&x)?.max_abs_diff(&b.forward_eval(&x)?)?.as_f64())
}
