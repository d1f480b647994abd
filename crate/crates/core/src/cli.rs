//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{inject_noise, load_dataset, NoiseKind, NoiseSpec, Split};
use crate::discrepancy::{energy_distance, mmd, DiscrepancyKind, DEFAULT_SIGMA};
use crate::distributions::{pairwise_cost, DiscreteDistribution};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::experiment::{parse_transition_map, run_experiment, ExperimentConfig};
use crate::ot::{
    exact_ot, regularized_objective, sinkhorn, sinkhorn_divergence_detailed, transport_cost, SinkhornConfig,
    DEFAULT_EPSILON, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE, EXACT_OT_MAX_CELLS,
};
use crate::selftest::{self, SelftestOptions};
use crate::trainer::EmbeddingModel;

#[derive(Debug, Parser)]
#[command(name = "dcdl", version, about = "Class-wise discrepancy losses, optimal transport and embedding evaluation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct OtArgs {
    /// Source points: a file, or inline `x1,x2;y1,y2`. A point may end in
    /// `@weight`.
    #[arg(long)]
    a: String,
    /// Target points, same format as `--a`.
    #[arg(long)]
    b: String,
    /// Entropic regularization; 2.5e-3 when omitted.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Ground cost exponent.
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    /// Ground cost scale.
    #[arg(long, default_value_t = 0.5)]
    scale: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERATIONS)]
    max_iterations: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DivergenceKind {
    Wasserstein,
    MmdLaplacian,
    MmdGaussian,
    Energy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NoiseArg {
    Clean,
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Exact and entropic transport between two point sets.
    Ot(OtArgs),
    /// A single discrepancy between two point sets.
    Divergence {
        #[command(flatten)]
        points: OtArgs,
        #[arg(long, value_enum, default_value_t = DivergenceKind::Wasserstein)]
        kind: DivergenceKind,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
    },
    /// Corrupts the labels of a dataset file.
    Noise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        kind: NoiseArg,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Class pairs `from:to,...`, or `cifar10`.
        #[arg(long)]
        map: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of classes; inferred from the labels when omitted.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Trains and evaluates as described by a config file.
    Train {
        /// `key=value` config file.
        #[arg(long, conflicts_with = "from_results")]
        config: Option<PathBuf>,
        /// Re-runs the configuration recorded in a results file header.
        #[arg(long)]
        from_results: Option<PathBuf>,
    },
    /// Evaluates a model checkpoint on train and test dataset files.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 300)]
        probe_epochs: usize,
        #[arg(long, default_value_t = 2.0)]
        probe_lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Runs the built-in invariant checks.
    Selftest {
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb_kernel: f64,
    },
}

/// Parses one point per line or `;`-separated item, each `x1,x2,...`
/// with an optional `@weight` suffix.
pub fn parse_points(text: &str) -> Result<DiscreteDistribution> {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (i, item) in text.split(['\n', ';']).map(str::trim).enumerate() {
        if item.is_empty() || item.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::Parse { line: i + 1, reason };
        let (coords, weight) = match item.split_once('@') {
            Some((c, w)) => (c, Some(w.trim().parse::<f64>().map_err(|_| bad(format!("bad weight `{w}`")))?)),
            None => (item, None),
        };
        let row = coords
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| bad(format!("bad coordinate `{x}`"))))
            .collect::<Result<Vec<_>>>()?;
        points.push(row);
        weights.push((i + 1, weight));
    }
    let weights = match weights.iter().find(|(_, w)| w.is_none()) {
        _ if weights.iter().all(|(_, w)| w.is_none()) => None,
        None => Some(weights.into_iter().filter_map(|(_, w)| w).collect::<Vec<_>>()),
        Some(&(line, _)) => {
            return Err(Error::Parse { line, reason: "weight missing while other points carry one".into() });
        }
    };
    crate::distributions::make_distribution(&points, weights.as_deref())
}

fn read_points(arg: &str) -> Result<DiscreteDistribution> {
    let path = Path::new(arg);
    if path.is_file() {
        parse_points(&std::fs::read_to_string(path)?)
    } else {
        parse_points(arg)
    }
}

fn sinkhorn_config(args: &OtArgs) -> SinkhornConfig {
    SinkhornConfig {
        epsilon: args.epsilon.unwrap_or(DEFAULT_EPSILON),
        max_iterations: args.max_iterations,
        tolerance: args.tolerance,
        log_domain: true,
    }
}

fn cmd_ot(args: &OtArgs) -> Result<()> {
    let (a, b) = (read_points(&args.a)?, read_points(&args.b)?);
    let cfg = sinkhorn_config(args);
    cfg.validate()?;
    let cost = pairwise_cost(&a, &b, args.p, args.scale)?;
    let plan = sinkhorn(&a, &b, &cost, &cfg)?;
    let note = if args.epsilon.is_none() { " (default)" } else { "" };
    println!("epsilon={}{note}", cfg.epsilon);
    println!("p={}", args.p);
    println!("scale={}", args.scale);
    if a.len() * b.len() <= EXACT_OT_MAX_CELLS {
        println!("exact_cost={}", exact_ot(&a, &b, &cost)?.1);
    } else {
        println!("exact_cost=skipped ({}x{} exceeds {EXACT_OT_MAX_CELLS} cells)", a.len(), b.len());
    }
    println!("sinkhorn_cost={}", transport_cost(&plan, &cost)?);
    println!("regularized_objective={}", regularized_objective(&plan, &cost, cfg.epsilon)?);
    let sd = sinkhorn_divergence_detailed(&a, &b, args.p, args.scale, &cfg)?;
    println!("sinkhorn_divergence={}", sd.value);
    println!("iterations={}", plan.iterations_used);
    println!("marginal_violation={}", plan.max_marginal_violation());
    println!("converged={}", plan.converged && sd.converged);
    if !plan.converged {
        return Err(Error::NotConverged { iterations: plan.iterations_used });
    }
    if !sd.converged {
        return Err(Error::NotConverged { iterations: sd.iterations });
    }
    Ok(())
}

fn cmd_divergence(args: &OtArgs, kind: DivergenceKind, sigma: f64) -> Result<()> {
    let (a, b) = (read_points(&args.a)?, read_points(&args.b)?);
    let cfg = sinkhorn_config(args);
    let value = match kind {
        DivergenceKind::Wasserstein => {
            let sd = sinkhorn_divergence_detailed(&a, &b, args.p, args.scale, &cfg)?;
            println!("epsilon={}", cfg.epsilon);
            if !sd.converged {
                println!("sinkhorn_divergence={}", sd.value);
                return Err(Error::NotConverged { iterations: sd.iterations });
            }
            println!("sinkhorn_divergence={}", sd.value);
            return Ok(());
        }
        DivergenceKind::MmdLaplacian => mmd(&a, &b, &DiscrepancyKind::MmdLaplacian { sigma })?,
        DivergenceKind::MmdGaussian => mmd(&a, &b, &DiscrepancyKind::MmdGaussian { sigma })?,
        DivergenceKind::Energy => energy_distance(&a, &b, args.p, args.scale)?,
    };
    let name = match kind {
        DivergenceKind::Energy => "energy_distance",
        _ => "mmd",
    };
    println!("{name}={value}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_noise(
    input: &Path,
    output: &Path,
    kind: NoiseArg,
    delta: f64,
    map: Option<&str>,
    seed: u64,
    classes: Option<usize>,
) -> Result<()> {
    let dataset = load_dataset(input, Split::Train)?;
    let k = classes.unwrap_or(dataset.num_classes).max(dataset.num_classes);
    let transition_map = match map {
        Some(m) => parse_transition_map(m).ok_or_else(|| Error::config("map", format!("cannot parse `{m}`")))?,
        None if matches!(kind, NoiseArg::Asymmetric) => NoiseSpec::cifar10_pairs(),
        None => Vec::new(),
    };
    let kind = match kind {
        NoiseArg::Clean => NoiseKind::Clean,
        NoiseArg::Symmetric => NoiseKind::Symmetric,
        NoiseArg::Asymmetric => NoiseKind::Asymmetric,
    };
    let (labels, mask) = inject_noise(&dataset.labels, &NoiseSpec { kind, delta, transition_map, seed }, k)?;
    let noisy = crate::data::Dataset { labels, num_classes: k, ..dataset };
    std::fs::write(output, noisy.to_text())?;
    let changed = mask.iter().filter(|&&m| m).count();
    println!("rows={}", mask.len());
    println!("changed={changed}");
    println!("changed_fraction={}", changed as f64 / mask.len() as f64);
    Ok(())
}

fn cmd_train(config: Option<&Path>, from_results: Option<&Path>) -> Result<()> {
    let cfg = match (config, from_results) {
        (Some(path), None) => ExperimentConfig::parse(&std::fs::read_to_string(path)?)?,
        (None, Some(path)) => ExperimentConfig::from_results(&std::fs::read_to_string(path)?)?,
        _ => return Err(Error::config("config", "pass --config or --from-results")),
    };
    let out = run_experiment(&cfg)?;
    std::fs::write(&cfg.output, &out.results)?;
    if let Some(path) = &cfg.checkpoint {
        out.model.save(path)?;
    }
    print!("{}", out.report.to_text());
    println!("results={}", cfg.output.display());
    Ok(())
}

fn cmd_eval(model: &Path, train: &Path, test: &Path, opts: &EvalOptions) -> Result<()> {
    let model = EmbeddingModel::load(model)?;
    let train = load_dataset(train, Split::Train)?;
    let test = load_dataset(test, Split::Test)?;
    let k = train.num_classes.max(test.num_classes);
    let z_train = model.forward(train.features.view())?;
    let z_test = model.forward(test.features.view())?;
    let report = evaluate(z_train.view(), &train.labels, z_test.view(), &test.labels, k, opts)?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_selftest(perturb_kernel: f64) -> Result<bool> {
    let start = std::time::Instant::now();
    let checks = selftest::run(&SelftestOptions { kernel_perturbation: perturb_kernel })?;
    for c in &checks {
        println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed, {:.1}s", checks.len(), start.elapsed().as_secs_f64());
    Ok(failed == 0)
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Ot(args) => cmd_ot(&args),
        Command::Divergence { points, kind, sigma } => cmd_divergence(&points, kind, sigma),
        Command::Noise { input, output, kind, delta, map, seed, classes } => {
            cmd_noise(&input, &output, kind, delta, map.as_deref(), seed, classes)
        }
        Command::Train { config, from_results } => cmd_train(config.as_deref(), from_results.as_deref()),
        Command::Eval { model, train, test, ks, probe_epochs, probe_lr, seed } => {
            let opts = EvalOptions { ks, probe_epochs, probe_lr, kmeans_seed: seed, ..EvalOptions::default() };
            cmd_eval(&model, &train, &test, &opts)
        }
        Command::Selftest { perturb_kernel } => match cmd_selftest(perturb_kernel) {
            Ok(true) => Ok(()),
            Ok(false) => return 2,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inline_points() {
        let d = parse_points("0;1").unwrap();
        assert_eq!((d.len(), d.dim()), (2, 1));
        let d = parse_points("0,0@0.25\n1,1@0.75\n").unwrap();
        assert_eq!(d.weights()[1], 0.75);
        assert!(parse_points("0@1;1").is_err());
        assert!(parse_points("a,b").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["dcdl", "frobnicate"]), 1);
        assert_eq!(run(["dcdl", "ot", "--a", "0"]), 1);
        assert_eq!(run(["dcdl", "--help"]), 0);
    }
}
