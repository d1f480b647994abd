mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use dcdl::data::{inject_noise, synth_gaussian_mixture, GaussianMixture, NoiseSpec, Split};
use dcdl::discrepancy::DiscrepancyKind;
use dcdl::eval::{kmeans, linear_probe, nmi};
use dcdl::losses::{LocalLoss, LossConfig};
use dcdl::reference;
use dcdl::trainer::{train, EmbeddingModel, OptimizerConfig, TrainOptions};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;

fn dcdl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcdl")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn value_of(text: &str, key: &str) -> String {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key}="))).unwrap_or_else(|| panic!("no {key} in {text}")).to_string()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = synth_gaussian_mixture(3, 10, 4, 3.0, 1).unwrap();
    let model = EmbeddingModel::new(4, Some(6), 3, 2).unwrap();
    let loss = LossConfig::new(LocalLoss::Triplet, Some(DiscrepancyKind::laplacian()));
    let optim = OptimizerConfig { learning_rate: 0.0, epochs: 3, ..OptimizerConfig::sgd() };
    let opts = TrainOptions { batch_size: 20, samples_per_class: Some(5), warmup_epochs: 0 };
    let out = train(&data, model.clone(), &loss, &optim, &NoiseSpec::clean(), &opts).unwrap();
    assert_eq!(out.model, model);
    assert_eq!(out.log.len(), 3);
}

#[test]
fn zero_epochs_returns_initialization() {
    let data = synth_gaussian_mixture(2, 10, 3, 3.0, 1).unwrap();
    let model = EmbeddingModel::new(3, None, 3, 5).unwrap();
    let optim = OptimizerConfig { epochs: 0, ..OptimizerConfig::adam() };
    let loss = LossConfig::new(LocalLoss::NPairs, None);
    let out = train(&data, model.clone(), &loss, &optim, &NoiseSpec::clean(), &TrainOptions::default()).unwrap();
    assert_eq!(out.model, model);
    assert!(out.log.is_empty());
}

#[test]
fn separated_two_class_training_reaches_high_probe_accuracy() {
    let mixture = GaussianMixture::new(2, 4, 4.0, 11).unwrap();
    let train_set = mixture.sample(40, Split::Train, 12).unwrap();
    let test_set = mixture.sample(100, Split::Test, 13).unwrap();
    let loss = LossConfig::new(LocalLoss::Triplet, Some(DiscrepancyKind::wasserstein()));
    let optim = OptimizerConfig { learning_rate: 1e-2, epochs: 30, seed: 3, ..OptimizerConfig::adam() };
    let model = EmbeddingModel::new(4, None, 4, 3).unwrap();
    let opts = TrainOptions { batch_size: 20, samples_per_class: None, warmup_epochs: 0 };
    let out = train(&train_set, model, &loss, &optim, &NoiseSpec::clean(), &opts).unwrap();
    let z_train = out.model.forward(train_set.features.view()).unwrap();
    let z_test = out.model.forward(test_set.features.view()).unwrap();
    let acc = linear_probe(z_train.view(), &train_set.labels, z_test.view(), &test_set.labels, 2, 300, 2.0).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn linear_model_gradient_matches_closed_form() {
    // loss = sum_rows c . z with z = y / |y|, y = W x + b
    let mut r = rng(21);
    let model = EmbeddingModel::new(3, None, 4, 8).unwrap();
    let x = gaussian(&mut r, 5, 3, 1.0).mapv(f64::abs);
    let c = Array1::from(vec![0.3, -1.0, 0.5, 2.0]);
    let grad_z = Array2::from_shape_fn((5, 4), |(_, j)| c[j]);
    let cache = model.forward_cached(x.view()).unwrap();
    let got = model.backward(&cache, grad_z.view()).unwrap();

    let layer = &model.layers()[0];
    let mut expected_w = Array2::<f64>::zeros(layer.weights.raw_dim());
    let mut expected_b = Array1::<f64>::zeros(layer.bias.len());
    for (xi, zi) in x.rows().into_iter().zip(cache.output.rows()) {
        let y = layer.weights.dot(&xi) + &layer.bias;
        let norm = y.dot(&y).sqrt();
        let dy = (&c - &(&zi * zi.dot(&c))) / norm;
        expected_w += &dy.view().insert_axis(Axis(1)).dot(&xi.view().insert_axis(Axis(0)));
        expected_b += &dy;
    }
    let diff_w = (&got.layers[0].weights - &expected_w).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    let diff_b = (&got.layers[0].bias - &expected_b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(diff_w < 1e-9 && diff_b < 1e-9, "{diff_w} {diff_b}");
}

#[test]
fn model_parameter_gradients_match_finite_differences() {
    let mut r = rng(22);
    for seed in 0..5 {
        let model = EmbeddingModel::new(4, Some(6), 3, seed).unwrap();
        let x = gaussian(&mut r, 6, 4, 1.0).mapv(|v| v.abs() + 0.5);
        let g = gaussian(&mut r, 6, 3, 1.0);
        let cache = model.forward_cached(x.view()).unwrap();
        let analytic = model.backward(&cache, g.view()).unwrap().flatten();
        let numeric = reference::central_difference_flat(
            |p| {
                let mut m = model.clone();
                m.set_params(p).unwrap();
                (&m.forward(x.view()).unwrap() * &g).sum()
            },
            &model.flatten(),
            1e-5,
        );
        let err = reference::relative_error(analytic.iter(), numeric.iter(), 1e-8);
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let mut r = rng(23);
    let train = gaussian(&mut r, 2000, 8, 1.0);
    let test = gaussian(&mut r, 2000, 8, 1.0);
    let mut y_train = labels_for(2000, 10);
    let mut y_test = labels_for(2000, 10);
    y_train.shuffle(&mut r);
    y_test.shuffle(&mut r);
    let acc = linear_probe(train.view(), &y_train, test.view(), &y_test, 10, 200, 1.0).unwrap();
    assert!((acc - 0.1).abs() <= 0.03, "accuracy {acc}");
}

#[test]
fn well_separated_mixture_is_linearly_separable() {
    let mixture = GaussianMixture::new(2, 2, 10.0, 31).unwrap();
    let train = mixture.sample(200, Split::Train, 32).unwrap();
    let test = mixture.sample(200, Split::Test, 33).unwrap();
    let acc = linear_probe(train.features.view(), &train.labels, test.features.view(), &test.labels, 2, 300, 1.0).unwrap();
    assert!(acc >= 0.99, "accuracy {acc}");
}

#[test]
fn zero_separation_is_chance_level() {
    let mixture = GaussianMixture::new(5, 4, 0.0, 41).unwrap();
    let train = mixture.sample(400, Split::Train, 42).unwrap();
    let test = mixture.sample(400, Split::Test, 43).unwrap();
    let acc = linear_probe(train.features.view(), &train.labels, test.features.view(), &test.labels, 5, 200, 1.0).unwrap();
    assert!((acc - 0.2).abs() <= 0.04, "accuracy {acc}");
}

#[test]
fn mixture_sampling_is_reproducible() {
    let a = synth_gaussian_mixture(4, 25, 3, 2.0, 9).unwrap();
    let b = synth_gaussian_mixture(4, 25, 3, 2.0, 9).unwrap();
    assert_eq!(a.to_text(), b.to_text());
}

#[test]
fn kmeans_recovers_far_blobs() {
    let mut r = rng(24);
    let mut points = gaussian(&mut r, 40, 2, 0.3);
    let truth: Vec<usize> = (0..40).map(|i| i / 20).collect();
    for (mut row, &t) in points.rows_mut().into_iter().zip(&truth) {
        row[0] += 50.0 * t as f64;
    }
    let result = kmeans(points.view(), 2, 3, 100).unwrap();
    assert_eq!(nmi(&result.assignment, &truth).unwrap(), 1.0);
}

#[test]
fn forced_asymmetric_noise_flips_everything() {
    let labels = vec![0; 50];
    let (noisy, mask) = inject_noise(&labels, &NoiseSpec::asymmetric(1.0, vec![(0, 1)], 4), 2).unwrap();
    assert!(noisy.iter().all(|&y| y == 1));
    assert!(mask.iter().all(|&m| m));
}

#[test]
fn cli_prints_forced_plan_cost_and_default_epsilon() {
    let out = dcdl(&["ot", "--a", "0;1", "--b", "2"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(value_of(&text, "epsilon").contains("(default)"));
    let cost: f64 = value_of(&text, "sinkhorn_cost").parse().unwrap();
    assert!((cost - 1.25).abs() < 1e-9);
}

#[test]
fn cli_divergence_of_identical_sets_is_zero() {
    for kind in ["wasserstein", "mmd-laplacian", "mmd-gaussian", "energy"] {
        let out = dcdl(&["divergence", "--a", "0,1;1,0;0.5,0.5", "--b", "0,1;1,0;0.5,0.5", "--kind", kind]);
        assert!(out.status.success(), "{kind}");
        let text = stdout(&out);
        let v: f64 = text.lines().last().and_then(|l| l.split_once('=')).unwrap().1.parse().unwrap();
        assert!(v.abs() <= 1e-8, "{kind}: {v}");
    }
}

#[test]
fn cli_reports_usage_errors() {
    assert_eq!(dcdl(&["ot", "--a", "x", "--b", "1"]).status.code(), Some(1));
    assert_eq!(dcdl(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn cli_selftest_passes() {
    let out = dcdl(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn cli_train_noise_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth_gaussian_mixture(3, 20, 4, 4.0, 1).unwrap();
    let test = synth_gaussian_mixture(3, 20, 4, 4.0, 2).unwrap();
    let train_path = write(dir.path(), "train.csv", &train.to_text());
    let test_path = write(dir.path(), "test.csv", &test.to_text());

    let noisy_path = dir.path().join("noisy.csv").display().to_string();
    let out = dcdl(&["noise", "--input", &train_path, "--output", &noisy_path, "--kind", "symmetric", "--delta", "0.5", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let noisy = dcdl::data::load_dataset(&noisy_path, Split::Train).unwrap();
    assert_eq!(noisy.features, train.features);
    assert_ne!(noisy.labels, train.labels);

    let results = dir.path().join("results.csv").display().to_string();
    let checkpoint = dir.path().join("model.txt").display().to_string();
    let config = format!(
        "seed=1\ndata.source=file\ndata.train={train_path}\ndata.test={test_path}\nmodel.hidden=0\nmodel.dim=4\n\
         optim.epochs=2\noptim.lr=0.01\nbatch.size=20\noutput.path={results}\noutput.checkpoint={checkpoint}\n"
    );
    let config_path = write(dir.path(), "run.cfg", &config);
    let out = dcdl(&["train", "--config", &config_path]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = std::fs::read_to_string(&results).unwrap();
    assert!(first.lines().last().unwrap().starts_with("final,"));

    let out = dcdl(&["train", "--from-results", &results]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&results).unwrap(), first);

    let out = dcdl(&["eval", "--model", &checkpoint, "--train", &train_path, "--test", &test_path]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let acc: f64 = value_of(&stdout(&out), "accuracy").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
