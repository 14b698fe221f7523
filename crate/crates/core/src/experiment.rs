//! Method comparison on the synthetic multi-domain benchmark.
//!
//! For every chosen target domain the remaining domains act as sources: one
//! model is trained per source domain, and each method is evaluated on the
//! sources' test splits (S), the target's test split (T) and by cost (FLOPs).
//! Adaptation only ever sees the target's unlabeled training images.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt, kd_distill, AdaptConfig, Adapted, Ensemble, KdConfig};
use crate::data::{default_domains, gen_domain, split, DomainSpec, LabeledSet, Transform, MAX_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, fingerprint, h_score, EvalReport, Predictor};
use crate::nn::{fine_tune, train_source, Arch, ModelBundle, TrainConfig};
use crate::rng::SplitMix64;
use crate::seprep::{assemble, extract_pathway, fuse_model, model_uncertainty, Criterion, UncertaintyReport, WeightMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Uniform ensemble of the unadapted source models.
    SourceEns,
    /// Uniform ensemble of individually adapted source models.
    ShotEns,
    /// A single model distilled from the adapted ensemble.
    ShotEnsKd,
    /// Assembled, adapted and fused network.
    SepRep,
    /// Assembled and adapted, evaluated without fusion.
    SepRepUnfused,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::SourceEns,
        Method::ShotEns,
        Method::ShotEnsKd,
        Method::SepRep,
        Method::SepRepUnfused,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::SourceEns => "source-ens",
            Method::ShotEns => "shot-ens",
            Method::ShotEnsKd => "shot-ens+kd",
            Method::SepRep => "seprep",
            Method::SepRepUnfused => "seprep-unfused",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Shared initialization of the source models: an extractor trained on glyph
/// classes `C..2C`, a label space disjoint from the benchmark's. Every source
/// is fine-tuned from it with a fresh head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub per_class: usize,
    pub transform: Transform,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            per_class: 100,
            transform: Transform::Identity,
            train: TrainConfig::default(),
        }
    }
}

fn default_source_training() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        lr: 0.02,
        head_lr_mult: 10.0,
        ..TrainConfig::default()
    }
}

/// Initialization of the distillation student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentInit {
    /// The adapted source model that is least uncertain on the target.
    #[default]
    BestSource,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub classes: usize,
    pub domains: Vec<Transform>,
    /// Indices into `domains` used in turn as the target.
    pub targets: Vec<usize>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub arch: Arch,
    /// Shared pretraining; `null` trains every source from its own random
    /// initialization.
    pub pretrain: Option<PretrainConfig>,
    /// Supervised training of each source model.
    pub source: TrainConfig,
    pub adapt: AdaptConfig,
    pub kd: KdConfig,
    pub kd_student_init: StudentInit,
    pub methods: Vec<String>,
    pub weight_mode: WeightMode,
    /// Also run the uncertainty-criterion comparison for every target.
    pub ablation: bool,
    /// Record wall-clock seconds per method (makes reports run-dependent).
    pub timing: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            classes: 10,
            domains: default_domains(),
            targets: vec![0, 1, 2, 3],
            train_per_class: 100,
            test_per_class: 50,
            arch: Arch::toy(),
            pretrain: Some(PretrainConfig::default()),
            source: default_source_training(),
            adapt: AdaptConfig::default(),
            kd: KdConfig::default(),
            kd_student_init: StudentInit::default(),
            methods: Method::ALL.iter().map(Method::to_string).collect(),
            weight_mode: WeightMode::PerBatch,
            ablation: false,
            timing: false,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.methods()?;
        self.arch.validate()?;
        self.adapt.validate()?;
        for t in &self.domains {
            t.validate()?;
        }
        if self.domains.len() < 2 {
            return Err(Error::InvalidArgument("need at least two domains".into()));
        }
        if let Some(t) = self.targets.iter().find(|&&t| t >= self.domains.len()) {
            return Err(Error::InvalidArgument(format!("target {t} of {} domains", self.domains.len())));
        }
        if let Some(p) = &self.pretrain {
            p.transform.validate()?;
            if p.per_class == 0 || 2 * self.classes > MAX_CLASSES {
                return Err(Error::InvalidArgument(format!(
                    "pretraining needs a positive sample count and at most {} benchmark classes",
                    MAX_CLASSES / 2
                )));
            }
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidArgument("per-class sample counts must be positive".into()));
        }
        if self.arch.classes != self.classes || self.arch.input_shape() != [3, 16, 16] {
            return Err(Error::InvalidArgument(format!(
                "architecture {:?} does not match {} classes of 3x16x16 images",
                self.arch, self.classes
            )));
        }
        Ok(())
    }
}

/// Comparison result of one criterion in the uncertainty ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub criterion: Criterion,
    pub target_domain: String,
    pub source_mean: f64,
    pub target_accuracy: f64,
    pub h_score: f64,
    /// Head-loss weights used during adaptation.
    pub loss_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target_domain: String,
    /// Target accuracy of the assembled network before adaptation.
    pub unadapted_target_accuracy: f64,
    /// Head-loss weights of the seprep adaptation, if it ran.
    pub loss_weights: Option<UncertaintyReport>,
    pub rows: Vec<EvalReport>,
    pub ablation: Vec<AblationRow>,
}

impl TargetReport {
    pub fn row(&self, method: Method) -> Option<&EvalReport> {
        let name = method.to_string();
        self.rows.iter().find(|r| r.method == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub fingerprint: String,
    pub targets: Vec<TargetReport>,
}

pub const ABLATION_CSV_HEADER: &str = "criterion,target_domain,S,T,H,loss_weights";

impl ExperimentReport {
    /// Every method row of every target, with a header line.
    pub fn to_csv(&self) -> String {
        let rows: Vec<EvalReport> = self.targets.iter().flat_map(|t| t.rows.clone()).collect();
        EvalReport::to_csv(&rows)
    }

    pub fn ablation_csv(&self) -> String {
        let mut out = format!("{ABLATION_CSV_HEADER}\n");
        for r in self.targets.iter().flat_map(|t| &t.ablation) {
            let w: Vec<String> = r.loss_weights.iter().map(|w| format!("{w:.4}")).collect();
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{}\n",
                r.criterion,
                r.target_domain,
                r.source_mean,
                r.target_accuracy,
                r.h_score,
                w.join(";")
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable comparison table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for t in &self.targets {
            out.push_str(&format!(
                "target {} (assembled, unadapted: T = {:.1})\n",
                t.target_domain, t.unadapted_target_accuracy
            ));
            out.push_str(&format!(
                "  {:<16}{:>8}{:>8}{:>8}{:>14}\n",
                "method", "S", "T", "H", "FLOPs"
            ));
            for r in &t.rows {
                out.push_str(&format!(
                    "  {:<16}{:>8.1}{:>8.1}{:>8.1}{:>14}\n",
                    r.method, r.source_mean, r.target_accuracy, r.h_score, r.flops.total
                ));
            }
            if !t.ablation.is_empty() {
                out.push_str(&format!("  {:<16}{:>8}{:>8}{:>8}\n", "criterion", "S", "T", "H"));
                for r in &t.ablation {
                    out.push_str(&format!(
                        "  {:<16}{:>8.1}{:>8.1}{:>8.1}\n",
                        r.criterion.to_string(),
                        r.source_mean,
                        r.target_accuracy,
                        r.h_score
                    ));
                }
            }
        }
        out
    }
}

pub struct Domain {
    pub name: String,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Generated domains and trained source models, shared by all targets.
pub struct Benchmark {
    pub cfg: ExperimentConfig,
    pub fingerprint: String,
    pub domains: Vec<Domain>,
    pub sources: Vec<ModelBundle<f32>>,
}

fn sub_seed(base: u64, stream: u64, index: u64) -> u64 {
    SplitMix64::new(base).derive(stream).derive(index).next_u64()
}

const DATA_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const SOURCE_STREAM: u64 = 3;
const ADAPT_STREAM: u64 = 4;
const KD_STREAM: u64 = 5;
const PRETRAIN_STREAM: u64 = 6;

/// Trains the shared initialization on classes `C..2C`, relabeled to `0..C`.
pub fn pretrain(cfg: &PretrainConfig, arch: &Arch, seed: u64) -> Result<ModelBundle<f32>> {
    let c = arch.classes;
    let spec = DomainSpec::new(cfg.transform, cfg.per_class, sub_seed(seed, PRETRAIN_STREAM, 0));
    let all = gen_domain(&spec, 2 * c)?;
    let rows: Vec<usize> = (0..all.len()).filter(|&i| all.labels[i] >= c).collect();
    let upper = all.subset(&rows)?;
    let set = LabeledSet::new(upper.images, upper.labels.iter().map(|y| y - c).collect(), c)?;
    let train = TrainConfig {
        seed: sub_seed(seed, PRETRAIN_STREAM, 1),
        ..cfg.train.clone()
    };
    train_source(&set, arch, &train)
}

impl Benchmark {
    /// Generates every domain and trains one source model per domain.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let per_class = cfg.train_per_class + cfg.test_per_class;
        let frac = cfg.train_per_class as f64 / per_class as f64;
        let base = cfg.pretrain.as_ref().map(|p| pretrain(p, &cfg.arch, cfg.seed)).transpose()?;
        let mut domains = Vec::with_capacity(cfg.domains.len());
        let mut sources = Vec::with_capacity(cfg.domains.len());
        for (d, &t) in cfg.domains.iter().enumerate() {
            let d = d as u64;
            let spec = DomainSpec::new(t, per_class, sub_seed(cfg.seed, DATA_STREAM, d));
            let set = gen_domain(&spec, cfg.classes)?;
            let (train, test) = split(&set, (frac, 1.0 - frac), sub_seed(cfg.seed, SPLIT_STREAM, d))?;
            let train_cfg = TrainConfig {
                seed: sub_seed(cfg.seed, SOURCE_STREAM, d),
                ..cfg.source.clone()
            };
            sources.push(match &base {
                Some(b) => {
                    let mut init = b.clone();
                    init.reset_heads(sub_seed(cfg.seed, SOURCE_STREAM, 64 + d));
                    fine_tune(&init, &train, &train_cfg)?
                }
                None => train_source(&train, &cfg.arch, &train_cfg)?,
            });
            domains.push(Domain {
                name: t.to_string(),
                train,
                test,
            });
        }
        Ok(Benchmark {
            cfg: cfg.clone(),
            fingerprint: fingerprint(cfg)?,
            domains,
            sources,
        })
    }

    fn source_indices(&self, target: usize) -> Vec<usize> {
        (0..self.domains.len()).filter(|&d| d != target).collect()
    }

    fn adapt_cfg(&self, target: usize, run: u64) -> AdaptConfig {
        AdaptConfig {
            seed: sub_seed(self.cfg.seed, ADAPT_STREAM, 16 * target as u64 + run),
            ..self.cfg.adapt.clone()
        }
    }

    fn eval(&self, method: &str, predictor: &Predictor, target: usize, started: Instant) -> Result<EvalReport> {
        let src: Vec<(&str, &LabeledSet)> = self
            .source_indices(target)
            .into_iter()
            .map(|d| (self.domains[d].name.as_str(), &self.domains[d].test))
            .collect();
        let tgt = &self.domains[target];
        let mut report = evaluate(method, predictor, &src, (&tgt.name, &tgt.test), &self.fingerprint, false)?;
        if self.cfg.timing {
            report.wall_clock_secs = Some(started.elapsed().as_secs_f64());
        }
        Ok(report)
    }

    fn model_predictor<'a>(&self, model: &'a ModelBundle<f32>, criterion: Criterion) -> Predictor<'a> {
        Predictor::Model {
            model,
            mode: self.cfg.weight_mode.clone(),
            criterion,
        }
    }

    fn check_target(&self, target: usize) -> Result<()> {
        if target >= self.domains.len() {
            return Err(Error::InvalidArgument(format!("target {target} of {} domains", self.domains.len())));
        }
        Ok(())
    }

    /// Runs every configured method with `target` as the target domain.
    pub fn run_target(&self, target: usize) -> Result<TargetReport> {
        self.check_target(target)?;
        let methods = self.cfg.methods()?;
        let srcs: Vec<ModelBundle<f32>> = self.source_indices(target).iter().map(|&d| self.sources[d].clone()).collect();
        let target_x = &self.domains[target].train.images;
        let criterion = self.cfg.adapt.criterion;

        let assembled = assemble(&srcs)?;
        let unadapted = self.eval("assembled", &self.model_predictor(&assembled, criterion), target, Instant::now())?;

        let needs_singles = methods.iter().any(|m| matches!(m, Method::ShotEns | Method::ShotEnsKd));
        let needs_seprep = methods.iter().any(|m| matches!(m, Method::SepRep | Method::SepRepUnfused));
        let started = Instant::now();
        let singles: Vec<ModelBundle<f32>> = if needs_singles {
            srcs.iter()
                .enumerate()
                .map(|(k, s)| {
                    let a = adapt(&assemble(std::slice::from_ref(s))?, target_x, &self.adapt_cfg(target, 1 + k as u64))?;
                    extract_pathway(&a.model, 0)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let singles_secs = started.elapsed();
        let started = Instant::now();
        let sep: Option<Adapted<f32>> = if needs_seprep {
            Some(adapt(&assembled, target_x, &self.adapt_cfg(target, 0))?)
        } else {
            None
        };
        let sep_secs = started.elapsed();

        let mut rows = Vec::with_capacity(methods.len());
        for m in &methods {
            let name = m.to_string();
            let started = Instant::now();
            let row = match m {
                Method::SourceEns => {
                    let ens = Ensemble::new(srcs.iter().map(fuse_model).collect::<Result<_>>()?)?;
                    self.eval(&name, &Predictor::Ensemble(&ens), target, started)?
                }
                Method::ShotEns => {
                    let ens = Ensemble::new(singles.iter().map(fuse_model).collect::<Result<_>>()?)?;
                    let mut r = self.eval(&name, &Predictor::Ensemble(&ens), target, started)?;
                    r.wall_clock_secs = r.wall_clock_secs.map(|s| s + singles_secs.as_secs_f64());
                    r
                }
                Method::ShotEnsKd => {
                    let teacher = Ensemble::new(singles.clone())?;
                    let student = match self.cfg.kd_student_init {
                        StudentInit::BestSource => {
                            let scores = singles
                                .iter()
                                .map(|s| model_uncertainty(s, 0, target_x, criterion))
                                .collect::<Result<Vec<_>>>()?;
                            let best = (0..scores.len())
                                .min_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                                .expect("at least one source");
                            singles[best].clone()
                        }
                        StudentInit::Random => {
                            ModelBundle::init(&self.cfg.arch, sub_seed(self.cfg.seed, KD_STREAM, 2 * target as u64))?
                        }
                    };
                    let kd_cfg = KdConfig {
                        seed: sub_seed(self.cfg.seed, KD_STREAM, 2 * target as u64 + 1),
                        ..self.cfg.kd.clone()
                    };
                    let distilled = fuse_model(&kd_distill(&teacher, &student, target_x, &kd_cfg)?)?;
                    let mut r = self.eval(&name, &self.model_predictor(&distilled, criterion), target, started)?;
                    r.wall_clock_secs = r.wall_clock_secs.map(|s| s + singles_secs.as_secs_f64());
                    r
                }
                Method::SepRep | Method::SepRepUnfused => {
                    let adapted = &sep.as_ref().expect("seprep adaptation ran").model;
                    let model = if *m == Method::SepRep { fuse_model(adapted)? } else { adapted.clone() };
                    let mut r = self.eval(&name, &self.model_predictor(&model, criterion), target, started)?;
                    r.wall_clock_secs = r.wall_clock_secs.map(|s| s + sep_secs.as_secs_f64());
                    r
                }
            };
            rows.push(row);
        }

        Ok(TargetReport {
            target_domain: self.domains[target].name.clone(),
            unadapted_target_accuracy: unadapted.target_accuracy,
            loss_weights: sep.map(|a| a.loss_weights),
            rows,
            ablation: Vec::new(),
        })
    }

    /// Adapts and fuses the assembled network once per uncertainty criterion,
    /// using the same criterion for the head-loss and prediction weights.
    pub fn ablation(&self, target: usize) -> Result<Vec<AblationRow>> {
        self.check_target(target)?;
        let srcs: Vec<ModelBundle<f32>> = self.source_indices(target).iter().map(|&d| self.sources[d].clone()).collect();
        let assembled = assemble(&srcs)?;
        Criterion::ALL
            .iter()
            .map(|&criterion| {
                let cfg = AdaptConfig {
                    criterion,
                    ..self.adapt_cfg(target, 0)
                };
                let adapted = adapt(&assembled, &self.domains[target].train.images, &cfg)?;
                let fused = fuse_model(&adapted.model)?;
                let r = self.eval(&format!("seprep/{criterion}"), &self.model_predictor(&fused, criterion), target, Instant::now())?;
                Ok(AblationRow {
                    criterion,
                    target_domain: r.target_domain,
                    source_mean: r.source_mean,
                    target_accuracy: r.target_accuracy,
                    h_score: h_score(r.source_mean, r.target_accuracy)?,
                    loss_weights: adapted.loss_weights.weights,
                })
            })
            .collect()
    }
}

/// Trains the sources and runs every configured method for every target.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let bench = Benchmark::prepare(cfg)?;
    let targets = cfg
        .targets
        .iter()
        .map(|&t| {
            let mut report = bench.run_target(t)?;
            if cfg.ablation {
                report.ablation = bench.ablation(t)?;
            }
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        fingerprint: bench.fingerprint,
        targets,
    })
}
