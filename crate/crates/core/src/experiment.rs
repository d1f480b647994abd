//! Experiment configuration files and the train-then-evaluate pipeline
//! behind `dcdl train`.
//!
//! A config is a list of `key=value` lines. Keys carry a section prefix
//! (`loss.lambda=0.5`); `seed` is the only top-level key. Blank lines and
//! lines starting with `#` are ignored. Missing keys take their defaults,
//! unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::{load_dataset, Dataset, GaussianMixture, NoiseKind, NoiseSpec, Split};
use crate::discrepancy::{DiscrepancyKind, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::losses::{LocalLoss, LossConfig};
use crate::ot::SinkhornConfig;
use crate::trainer::{train_with, EmbeddingModel, OptimizerConfig, OptimizerKind, TrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { classes: usize, dim: usize, separation: f64, train_per_class: usize, test_per_class: usize },
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSource,
    pub noise: NoiseSpec,
    pub loss: LossConfig,
    pub hidden: Option<usize>,
    pub embedding_dim: usize,
    pub optim: OptimizerConfig,
    pub batch: TrainOptions,
    pub eval: EvalOptions,
    /// Evaluate every this many epochs during training; 0 evaluates only
    /// the final model.
    pub eval_every: usize,
    pub output: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults are valid")
    }
}

/// Seeds for the independent random streams of one experiment.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

const NOISE_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;
const SAMPLER_STREAM: u64 = 3;
const MEANS_STREAM: u64 = 4;
const TRAIN_STREAM: u64 = 5;
const TEST_STREAM: u64 = 6;
const KMEANS_STREAM: u64 = 7;

struct Fields {
    values: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, reason: format!("expected key=value, found `{line}`") })?;
            let key = key.trim().to_string();
            if values.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::config(&key, "given more than once"));
            }
        }
        Ok(Self { values })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.values.remove(key).map(|(_, v)| v)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.values.into_iter().next() {
            Some((key, (line, _))) => Err(Error::config(&key, format!("unknown or unused key (line {line})"))),
            None => Ok(()),
        }
    }
}

fn local_name(local: LocalLoss) -> &'static str {
    match local {
        LocalLoss::Triplet => "triplet",
        LocalLoss::NPairs => "npairs",
        LocalLoss::Angular => "angular",
        LocalLoss::AngularNPairs => "angular_npairs",
        LocalLoss::None => "none",
    }
}

pub fn parse_local(name: &str) -> Option<LocalLoss> {
    Some(match name {
        "triplet" => LocalLoss::Triplet,
        "npairs" => LocalLoss::NPairs,
        "angular" => LocalLoss::Angular,
        "angular_npairs" => LocalLoss::AngularNPairs,
        "none" => LocalLoss::None,
        _ => return None,
    })
}

/// `9:1,2:0`, or `cifar10` for the ten-class object benchmark pairs.
pub fn parse_transition_map(text: &str) -> Option<Vec<(usize, usize)>> {
    if text == "cifar10" {
        return Some(NoiseSpec::cifar10_pairs());
    }
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (a, b) = pair.split_once(':')?;
            Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
        })
        .collect()
}

fn format_ks(ks: &[usize]) -> String {
    ks.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields::parse(text)?;
        let seed = f.get("seed", 0u64)?;

        let data = match f.get("data.source", "synthetic".to_string())?.as_str() {
            "synthetic" => DataSource::Synthetic {
                classes: f.get("data.classes", 5)?,
                dim: f.get("data.dim", 16)?,
                separation: f.get("data.separation", 3.0)?,
                train_per_class: f.get("data.train_per_class", 60)?,
                test_per_class: f.get("data.test_per_class", 100)?,
            },
            "file" => DataSource::Files {
                train: f.raw("data.train").ok_or_else(|| Error::config("data.train", "required for file data"))?.into(),
                test: f.raw("data.test").ok_or_else(|| Error::config("data.test", "required for file data"))?.into(),
            },
            other => return Err(Error::config("data.source", format!("expected synthetic or file, got `{other}`"))),
        };

        let kind = match f.get("noise.kind", "clean".to_string())?.as_str() {
            "clean" => NoiseKind::Clean,
            "symmetric" => NoiseKind::Symmetric,
            "asymmetric" => NoiseKind::Asymmetric,
            other => return Err(Error::config("noise.kind", format!("unknown noise kind `{other}`"))),
        };
        let delta = if kind == NoiseKind::Clean { f.get("noise.delta", 0.0)? } else { f.get("noise.delta", 0.2)? };
        let transition_map = match kind {
            NoiseKind::Asymmetric => {
                let raw = f.get("noise.map", "cifar10".to_string())?;
                parse_transition_map(&raw).ok_or_else(|| Error::config("noise.map", format!("cannot parse `{raw}`")))?
            }
            _ => Vec::new(),
        };
        let noise = NoiseSpec { kind, delta, transition_map, seed: stream_seed(seed, NOISE_STREAM) };
        if !(0.0..=1.0).contains(&noise.delta) {
            return Err(Error::config("noise.delta", "must lie in [0, 1]"));
        }

        let local_raw = f.get("loss.local", "triplet".to_string())?;
        let local = parse_local(&local_raw).ok_or_else(|| Error::config("loss.local", format!("unknown loss `{local_raw}`")))?;
        let discrepancy = match f.get("loss.discrepancy", "none".to_string())?.as_str() {
            "none" => None,
            "mmd_laplacian" => Some(DiscrepancyKind::MmdLaplacian { sigma: f.get("loss.sigma", DEFAULT_SIGMA)? }),
            "mmd_gaussian" => Some(DiscrepancyKind::MmdGaussian { sigma: f.get("loss.sigma", DEFAULT_SIGMA)? }),
            "wasserstein" => {
                let d = SinkhornConfig::default();
                Some(DiscrepancyKind::Wasserstein {
                    sinkhorn: SinkhornConfig {
                        epsilon: f.get("loss.epsilon", d.epsilon)?,
                        max_iterations: f.get("loss.sinkhorn_max_iterations", d.max_iterations)?,
                        tolerance: f.get("loss.sinkhorn_tolerance", d.tolerance)?,
                        log_domain: true,
                    },
                    p: f.get("loss.p", 2.0)?,
                    scale: f.get("loss.scale", 0.5)?,
                })
            }
            other => return Err(Error::config("loss.discrepancy", format!("unknown discrepancy `{other}`"))),
        };
        if let Some(kind) = &discrepancy {
            kind.validate().map_err(|e| Error::config("loss.discrepancy", e.to_string()))?;
        }
        let base = LossConfig::new(local, discrepancy);
        let loss = LossConfig {
            lambda: if discrepancy.is_some() { f.get("loss.lambda", base.lambda)? } else { base.lambda },
            lambda_xent: f.get("loss.lambda_xent", base.lambda_xent)?,
            lambda_ang: f.get("loss.lambda_ang", base.lambda_ang)?,
            tau: f.get("loss.tau", base.tau)?,
            alpha_degrees: f.get("loss.alpha", base.alpha_degrees)?,
            use_xent: f.get("loss.xent", false)?,
            ..base
        };
        if loss.local == LocalLoss::None && loss.discrepancy.is_none() && !loss.use_xent {
            return Err(Error::config("loss.local", "no loss term selected"));
        }

        let hidden = match f.get("model.hidden", 64usize)? {
            0 => None,
            h => Some(h),
        };
        let embedding_dim = f.get("model.dim", 64usize)?;
        if embedding_dim == 0 {
            return Err(Error::config("model.dim", "must be positive"));
        }

        let optim_base = match f.get("optim.kind", "adam".to_string())?.as_str() {
            "adam" => OptimizerConfig::adam(),
            "sgd" => OptimizerConfig::sgd(),
            other => return Err(Error::config("optim.kind", format!("expected adam or sgd, got `{other}`"))),
        };
        let optim = OptimizerConfig {
            learning_rate: f.get("optim.lr", optim_base.learning_rate)?,
            momentum: f.get("optim.momentum", optim_base.momentum)?,
            beta1: f.get("optim.beta1", optim_base.beta1)?,
            beta2: f.get("optim.beta2", optim_base.beta2)?,
            decay_factor: f.get("optim.decay_factor", optim_base.decay_factor)?,
            decay_every: f.get("optim.decay_every", optim_base.decay_every)?,
            epochs: f.get("optim.epochs", optim_base.epochs)?,
            seed: stream_seed(seed, SAMPLER_STREAM),
            ..optim_base
        };
        optim.validate().map_err(|e| Error::config("optim", e.to_string()))?;

        let batch = TrainOptions {
            batch_size: f.get("batch.size", 100)?,
            samples_per_class: Some(f.get("batch.per_class", local.default_samples_per_class())?),
            warmup_epochs: f.get("batch.warmup_epochs", 0)?,
        };

        let ks_raw = f.get("eval.ks", "1,2,4".to_string())?;
        let ks = ks_raw
            .split(',')
            .map(|k| k.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::config("eval.ks", format!("cannot parse `{ks_raw}`")))?;
        let eval = EvalOptions {
            ks,
            probe_epochs: f.get("eval.probe_epochs", 300)?,
            probe_lr: f.get("eval.probe_lr", 2.0)?,
            kmeans_seed: stream_seed(seed, KMEANS_STREAM),
            kmeans_iters: f.get("eval.kmeans_iters", 100)?,
        };
        let eval_every = f.get("eval.every", 0)?;

        let output = f.get("output.path", "results.csv".to_string())?.into();
        let checkpoint = f.raw("output.checkpoint").filter(|s| !s.is_empty()).map(PathBuf::from);
        f.finish()?;

        Ok(Self { seed, data, noise, loss, hidden, embedding_dim, optim, batch, eval, eval_every, output, checkpoint })
    }

    /// Every key with its resolved value. Parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| writeln!(out, "{k}={v}").unwrap();
        put("seed", &self.seed);
        match &self.data {
            DataSource::Synthetic { classes, dim, separation, train_per_class, test_per_class } => {
                put("data.source", &"synthetic");
                put("data.classes", classes);
                put("data.dim", dim);
                put("data.separation", separation);
                put("data.train_per_class", train_per_class);
                put("data.test_per_class", test_per_class);
            }
            DataSource::Files { train, test } => {
                put("data.source", &"file");
                put("data.train", &train.display());
                put("data.test", &test.display());
            }
        }
        let kind = match self.noise.kind {
            NoiseKind::Clean => "clean",
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Asymmetric => "asymmetric",
        };
        put("noise.kind", &kind);
        put("noise.delta", &self.noise.delta);
        if self.noise.kind == NoiseKind::Asymmetric {
            let map: Vec<String> = self.noise.transition_map.iter().map(|(a, b)| format!("{a}:{b}")).collect();
            put("noise.map", &map.join(","));
        }
        put("loss.local", &local_name(self.loss.local));
        match self.loss.discrepancy {
            None => put("loss.discrepancy", &"none"),
            Some(DiscrepancyKind::MmdLaplacian { sigma }) => {
                put("loss.discrepancy", &"mmd_laplacian");
                put("loss.sigma", &sigma);
            }
            Some(DiscrepancyKind::MmdGaussian { sigma }) => {
                put("loss.discrepancy", &"mmd_gaussian");
                put("loss.sigma", &sigma);
            }
            Some(DiscrepancyKind::Wasserstein { sinkhorn, p, scale }) => {
                put("loss.discrepancy", &"wasserstein");
                put("loss.epsilon", &sinkhorn.epsilon);
                put("loss.sinkhorn_max_iterations", &sinkhorn.max_iterations);
                put("loss.sinkhorn_tolerance", &sinkhorn.tolerance);
                put("loss.p", &p);
                put("loss.scale", &scale);
            }
        }
        if self.loss.discrepancy.is_some() {
            put("loss.lambda", &self.loss.lambda);
        }
        put("loss.lambda_xent", &self.loss.lambda_xent);
        put("loss.lambda_ang", &self.loss.lambda_ang);
        put("loss.tau", &self.loss.tau);
        put("loss.alpha", &self.loss.alpha_degrees);
        put("loss.xent", &self.loss.use_xent);
        put("model.hidden", &self.hidden.unwrap_or(0));
        put("model.dim", &self.embedding_dim);
        put("optim.kind", &if self.optim.kind == OptimizerKind::Adam { "adam" } else { "sgd" });
        put("optim.lr", &self.optim.learning_rate);
        put("optim.momentum", &self.optim.momentum);
        put("optim.beta1", &self.optim.beta1);
        put("optim.beta2", &self.optim.beta2);
        put("optim.decay_factor", &self.optim.decay_factor);
        put("optim.decay_every", &self.optim.decay_every);
        put("optim.epochs", &self.optim.epochs);
        put("batch.size", &self.batch.batch_size);
        put("batch.per_class", &self.batch.samples_per_class.unwrap_or_else(|| self.loss.local.default_samples_per_class()));
        put("batch.warmup_epochs", &self.batch.warmup_epochs);
        put("eval.ks", &format_ks(&self.eval.ks));
        put("eval.probe_epochs", &self.eval.probe_epochs);
        put("eval.probe_lr", &self.eval.probe_lr);
        put("eval.kmeans_iters", &self.eval.kmeans_iters);
        put("eval.every", &self.eval_every);
        put("output.path", &self.output.display());
        if let Some(c) = &self.checkpoint {
            put("output.checkpoint", &c.display());
        }
        out
    }

    /// Recovers the config from the `#` header of a results file.
    pub fn from_results(text: &str) -> Result<Self> {
        let header: String = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .filter_map(|l| l.strip_prefix("# "))
            .filter(|l| l.contains('='))
            .map(|l| format!("{l}\n"))
            .collect();
        Self::parse(&header)
    }

    /// Train and test sets, with a shared class count.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = match &self.data {
            DataSource::Synthetic { classes, dim, separation, train_per_class, test_per_class } => {
                let mixture = GaussianMixture::new(*classes, *dim, *separation, stream_seed(self.seed, MEANS_STREAM))?;
                (
                    mixture.sample(*train_per_class, Split::Train, stream_seed(self.seed, TRAIN_STREAM))?,
                    mixture.sample(*test_per_class, Split::Test, stream_seed(self.seed, TEST_STREAM))?,
                )
            }
            DataSource::Files { train, test } => (load_dataset(train, Split::Train)?, load_dataset(test, Split::Test)?),
        };
        if train.dim() != test.dim() {
            return Err(Error::DimensionMismatch { expected: train.dim(), got: test.dim() });
        }
        let k = train.num_classes.max(test.num_classes);
        train.num_classes = k;
        test.num_classes = k;
        Ok((train, test))
    }
}

/// Everything `dcdl train` produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub results: String,
    pub report: EvalReport,
    pub model: EmbeddingModel,
}

fn report_for(
    model: &EmbeddingModel,
    train: &Dataset,
    train_labels: &[usize],
    test: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let z_train = model.forward(train.features.view())?;
    let z_test = model.forward(test.features.view())?;
    evaluate(z_train.view(), train_labels, z_test.view(), &test.labels, train.num_classes, opts)
}

fn metric_columns(report: Option<&EvalReport>, ks: &[usize]) -> String {
    match report {
        Some(r) => {
            let mut s = format!("{},{}", r.accuracy, r.nmi);
            for k in ks {
                write!(s, ",{}", r.recall_at[k]).unwrap();
            }
            s
        }
        None => ",".repeat(ks.len() + 1),
    }
}

/// Trains and evaluates as configured, returning the results file text.
/// The linear probe is fit on the training labels the model saw, noise
/// included; accuracy, NMI and recall use the clean test labels.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let (train, test) = cfg.load_data()?;
    let model = EmbeddingModel::new(train.dim(), cfg.hidden, cfg.embedding_dim, stream_seed(cfg.seed, MODEL_STREAM))?;
    let (noisy, _) = crate::data::inject_noise(&train.labels, &cfg.noise, train.num_classes)?;

    let mut results = String::new();
    for line in cfg.to_text().lines() {
        writeln!(results, "# {line}").unwrap();
    }
    let recall_cols: String = cfg.eval.ks.iter().map(|k| format!(",r@{k}")).collect();
    writeln!(results, "epoch,lr,total,local,phi,xent,accuracy,nmi{recall_cols}").unwrap();

    let outcome = train_with(&train, model, &cfg.loss, &cfg.optim, &cfg.noise, &cfg.batch, |log, model| {
        let due = cfg.eval_every > 0 && (log.epoch + 1) % cfg.eval_every == 0;
        let report = if due { Some(report_for(model, &train, &noisy, &test, &cfg.eval)?) } else { None };
        writeln!(
            results,
            "{},{},{},{},{},{},{}",
            log.epoch,
            log.learning_rate,
            log.total,
            log.local,
            log.phi,
            log.xent,
            metric_columns(report.as_ref(), &cfg.eval.ks)
        )
        .unwrap();
        Ok(())
    })?;
    let report = report_for(&outcome.model, &train, &noisy, &test, &cfg.eval)?;
    writeln!(results, "final,,,,,,{}", metric_columns(Some(&report), &cfg.eval.ks)).unwrap();
    Ok(ExperimentOutput { results, report, model: outcome.model })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.loss.local, LocalLoss::Triplet);
        assert_eq!(cfg.optim.learning_rate, 5e-4);
        assert_eq!(cfg.embedding_dim, 64);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn dependent_defaults() {
        let cfg = ExperimentConfig::parse("loss.discrepancy=wasserstein\nloss.local=angular_npairs\noptim.kind=sgd\n").unwrap();
        assert_eq!(cfg.loss.lambda, 0.5);
        assert_eq!(cfg.loss.alpha_degrees, 45.0);
        assert_eq!(cfg.batch.samples_per_class, Some(2));
        assert_eq!(cfg.optim.learning_rate, 1e-2);
        let mmd = ExperimentConfig::parse("loss.discrepancy=mmd_laplacian").unwrap();
        assert_eq!(mmd.loss.lambda, 0.2);
        assert_eq!(ExperimentConfig::parse(&mmd.to_text()).unwrap(), mmd);
    }

    #[test]
    fn asymmetric_map_round_trips() {
        let cfg = ExperimentConfig::parse("noise.kind=asymmetric\nnoise.delta=0.3\ndata.classes=10\n").unwrap();
        assert_eq!(cfg.noise.transition_map, NoiseSpec::cifar10_pairs());
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let key = |text: &str| match ExperimentConfig::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(key("loss.lambda=abc\nloss.discrepancy=wasserstein"), "loss.lambda");
        assert_eq!(key("loss.sigma=0.1"), "loss.sigma");
        assert_eq!(key("optim.kind=rmsprop"), "optim.kind");
        assert_eq!(key("bogus=1"), "bogus");
        assert_eq!(key("seed=1\nseed=2"), "seed");
        assert_eq!(key("noise.delta=1.5\nnoise.kind=symmetric"), "noise.delta");
        assert!(matches!(ExperimentConfig::parse("no equals sign"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn zero_epochs_reports_initial_model() {
        let cfg = ExperimentConfig::parse(
            "optim.epochs=0\ndata.classes=3\ndata.dim=4\ndata.train_per_class=12\ndata.test_per_class=10\nmodel.hidden=0\nmodel.dim=4\nbatch.size=30\n",
        )
        .unwrap();
        let out = run_experiment(&cfg).unwrap();
        let (train, test) = cfg.load_data().unwrap();
        let init = EmbeddingModel::new(train.dim(), None, 4, stream_seed(cfg.seed, MODEL_STREAM)).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.report, report_for(&init, &train, &train.labels, &test, &cfg.eval).unwrap());
        assert_eq!(ExperimentConfig::from_results(&out.results).unwrap(), cfg);
    }
}
