//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run with `cargo test -p noisefed --test acceptance -- --nocapture` to see
//! the per-criterion lines.

use std::collections::BTreeMap;
use std::process::Command;

use noisefed_core::data::synth_dataset;
use noisefed_core::federated::{fedavg, run_rounds, FederatedConfig, WeightSet};
use noisefed_core::metrics::{
    dp_check, l1_sensitivity, price_of_anarchy, price_of_stability, rademacher_estimate, snr_db,
    FiniteMechanism, MetricSeries,
};
use noisefed_core::model::{build_model, one_hot, softmax_cross_entropy, Mode, Model};
use noisefed_core::noise::{equivalent_single_sigma, gaussian_layer_forward, Mechanism, NoisePlan};
use noisefed_core::rng::RngStream;
use noisefed_core::spec::{model_s, Activation, LayerSpec, ModelSpec};
use noisefed_core::tensor::{sample_variance, Tensor};
use noisefed_core::train::{train, TrainConfig};

fn noisefed() -> Command {
    Command::new(env!("CARGO_BIN_EXE_noisefed"))
}

fn pass(criterion: u32, what: &str) {
    println!("ACCEPTANCE PASS criterion {criterion}: {what}");
}

#[test]
fn criterion_01_parameter_count_reproduction() {
    let cases = [
        ("model1", vec!["trainable=22784938", "non_trainable=1920"]),
        ("model2", vec!["trainable=2396330"]),
        ("model3", vec!["trainable=43411882", "total=43415850"]),
    ];
    for (name, expectations) in cases {
        let output = noisefed()
            .args(["count", name])
            .output()
            .expect("run count");
        assert!(output.status.success(), "count {name} failed");
        let stdout = String::from_utf8_lossy(&output.stdout);
        for needle in expectations {
            assert!(
                stdout.contains(needle),
                "count {name}: expected '{needle}' in '{stdout}'"
            );
        }
    }
    pass(
        1,
        "reference parameter counts reproduced exactly by `noisefed count`",
    );
}

// --- criterion 2: gradient fidelity ---------------------------------------

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn train_loss(model: &Model, batch: &Tensor, targets: &Tensor, rng: &RngStream) -> f64 {
    let fwd = model.forward_pure(batch, Mode::Train, rng, None).unwrap();
    let classes = targets.shape()[1];
    softmax_cross_entropy(fwd.logits.data(), targets.data(), classes).0
}

fn max_rel_err_vs_fd(spec: &ModelSpec, model_seed: u64, data_seed: u64, batch: usize) -> f64 {
    let mut model = build_model(spec, model_seed).unwrap();
    let (h, w, c) = spec.input_shape;
    let mut input = Tensor::zeros(&[batch, h, w, c]);
    RngStream::from_seed(data_seed).fill_normal(1.0, input.data_mut());
    let labels: Vec<usize> = (0..batch).map(|b| b % spec.num_classes).collect();
    let targets = one_hot(&labels, spec.num_classes);
    let rng = RngStream::from_seed(data_seed ^ 0x5eed);

    let fwd = model.forward_pure(&input, Mode::Train, &rng, None).unwrap();
    let analytic = model.backward(&fwd, &targets).unwrap().to_flat_vec();

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let w0 = model.get_trainable(i);
        model.set_trainable(i, w0 + FD_H);
        let up = train_loss(&model, &input, &targets, &rng);
        model.set_trainable(i, w0 - FD_H);
        let down = train_loss(&model, &input, &targets, &rng);
        model.set_trainable(i, w0);
        let numeric = (up - down) / (2.0 * FD_H);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn criterion_02_gradient_fidelity() {
    let mut picker = RngStream::from_seed(0xacce97);
    let mut worst_overall = 0.0f64;
    let mut checked = 0;
    while checked < 20 {
        let hw = 4 + 2 * picker.below(2);
        let classes = 2 + picker.below(2);
        let mut layers = Vec::new();
        for _ in 0..picker.below(3) {
            layers.push(LayerSpec::Conv2d {
                out_channels: 2 + picker.below(2),
                activation: Activation::Relu,
            });
            if picker.below(2) == 0 {
                layers.push(LayerSpec::BatchNorm);
            }
            if picker.below(3) == 0 {
                layers.push(LayerSpec::GaussianNoise {
                    sigma: 0.2,
                    seed: picker.below(1 << 16) as u64,
                });
            }
        }
        if picker.below(2) == 0 {
            layers.push(LayerSpec::MaxPool2d);
        }
        layers.push(LayerSpec::Flatten);
        if picker.below(2) == 0 {
            layers.push(LayerSpec::Dense {
                units: 3 + picker.below(3),
                activation: Activation::Relu,
            });
            if picker.below(3) == 0 {
                layers.push(LayerSpec::Dropout { rate: 0.25 });
            }
        }
        layers.push(LayerSpec::Dense {
            units: classes,
            activation: Activation::Softmax,
        });
        let spec = ModelSpec {
            name: format!("rand{checked}"),
            input_shape: (hw, hw, 1 + picker.below(2)),
            layers,
            num_classes: classes,
        };
        if spec.validate().is_err() || spec.count_parameters().unwrap().trainable > 500 {
            continue;
        }
        let worst = max_rel_err_vs_fd(&spec, 1000 + checked as u64, 2000 + checked as u64, 3);
        assert!(worst < FD_TOL, "model {checked}: max rel error {worst}");
        worst_overall = worst_overall.max(worst);
        checked += 1;
    }
    pass(
        2,
        &format!("backprop vs central differences on 20 random models, worst rel err {worst_overall:.2e} < 1e-4"),
    );
}

#[test]
fn criterion_03_variance_composition() {
    // Empirical: N stacked noise layers on a zero tensor give variance
    // N * sigma^2 within 5% at 1e6 samples.
    let root = RngStream::from_seed(0xc3);
    let sigma = 0.1;
    for n in [2usize, 5, 8, 11] {
        let mut x = Tensor::zeros(&[1_000_000]);
        for layer in 0..n {
            let mut stream = root.child(&[n as u64, layer as u64]);
            x = gaussian_layer_forward(&x, sigma, Mode::Train, &mut stream).unwrap();
        }
        let var = sample_variance(x.data());
        let expected = n as f64 * sigma * sigma;
        let rel = (var - expected).abs() / expected;
        assert!(rel < 0.05, "N={n}: var {var} vs {expected} (rel {rel})");
    }
    // Analytic: the reference single-layer substitutes at 2 decimals.
    let round2 = |x: f64| (x * 100.0).round() / 100.0;
    assert_eq!(round2(equivalent_single_sigma(8, 0.1).unwrap()), 0.28);
    assert_eq!(round2(equivalent_single_sigma(5, 0.1).unwrap()), 0.22);
    assert_eq!(round2(equivalent_single_sigma(11, 0.1).unwrap()), 0.33);
    pass(
        3,
        "stacked-layer variance is additive; single-layer substitutes 0.28/0.22/0.33 reproduced",
    );
}

#[test]
fn criterion_04_metric_identities() {
    // PoS = PoA = 1 at sigma = 0, exactly.
    assert_eq!(price_of_stability(0.7312, 0.7312).unwrap(), 1.0);
    assert_eq!(price_of_anarchy(1.3725, 1.3725).unwrap(), 1.0);

    // Hand-computed SNR example.
    let signal = MetricSeries::new(vec![0.5, 0.7, 0.9], 0.0, "signal").unwrap();
    let noisy = MetricSeries::new(vec![0.4, 0.5, 0.6], 0.3, "noisy").unwrap();
    let db = snr_db(&signal, &noisy).unwrap().db().unwrap();
    assert!((db - 6.020599913279624).abs() < 1e-6, "snr {db}");

    // Scale invariance about the means, c in {0.1, 10}, to 1e-9.
    let s_vals = [0.52, 0.61, 0.70, 0.74, 0.81];
    let n_vals = [0.02, 0.05, 0.01, 0.06, 0.03];
    let noisy_vals: Vec<f64> = s_vals
        .iter()
        .zip(n_vals.iter())
        .map(|(s, n)| s - n)
        .collect();
    let base = snr_db(
        &MetricSeries::new(s_vals.to_vec(), 0.0, "s").unwrap(),
        &MetricSeries::new(noisy_vals, 0.1, "n").unwrap(),
    )
    .unwrap()
    .db()
    .unwrap();
    for c in [0.1, 10.0] {
        let s_mean = s_vals.iter().sum::<f64>() / s_vals.len() as f64;
        let scaled_s: Vec<f64> = s_vals.iter().map(|v| s_mean + c * (v - s_mean)).collect();
        let scaled_noisy: Vec<f64> = scaled_s
            .iter()
            .zip(n_vals.iter())
            .map(|(s, n)| s - c * n)
            .collect();
        let scaled = snr_db(
            &MetricSeries::new(scaled_s, 0.0, "s").unwrap(),
            &MetricSeries::new(scaled_noisy, 0.1, "n").unwrap(),
        )
        .unwrap()
        .db()
        .unwrap();
        assert!((scaled - base).abs() < 1e-9, "c={c}: {scaled} vs {base}");
    }
    pass(
        4,
        "PoS/PoA base identities, 6.0206 dB hand example, SNR scale invariance at 1e-9",
    );
}

#[test]
fn criterion_05_dp_checker() {
    // Randomized response with p = 0.75.
    let mut dists = BTreeMap::new();
    dists.insert("x0".to_string(), vec![0.75, 0.25]);
    dists.insert("x1".to_string(), vec![0.25, 0.75]);
    let mech = FiniteMechanism::new(dists).unwrap();
    let pairs = vec![
        ("x0".to_string(), "x1".to_string()),
        ("x1".to_string(), "x0".to_string()),
    ];
    let ln3 = 3.0f64.ln();
    assert!(dp_check(&mech, &pairs, ln3, 0.0).unwrap().holds);
    assert!(!dp_check(&mech, &pairs, 0.9 * ln3, 0.0).unwrap().holds);

    // Counting-query sensitivity is 1.
    let base = vec![1.0, -1.0, 2.0, 0.5];
    let mut count_pairs = Vec::new();
    for i in 0..base.len() {
        for repl in [-3.0, 3.0] {
            let mut other = base.clone();
            other[i] = repl;
            count_pairs.push((base.clone(), other));
        }
    }
    let sens = l1_sensitivity(
        |d: &Vec<f64>| vec![d.iter().filter(|v| **v > 0.0).count() as f64],
        &count_pairs,
    )
    .unwrap();
    assert_eq!(sens, 1.0);

    // Monotonicity over a 5x5 (epsilon, delta) grid.
    let mut verdicts = [[false; 5]; 5];
    for (i, eps) in (0..5).map(|i| 0.35 * i as f64).enumerate() {
        for (j, delta) in (0..5).map(|j| 0.12 * j as f64).enumerate() {
            verdicts[i][j] = dp_check(&mech, &pairs, eps, delta).unwrap().holds;
        }
    }
    for i in 0..5 {
        for j in 0..5 {
            if verdicts[i][j] {
                for (i2, row) in verdicts.iter().enumerate().skip(i) {
                    for (j2, ok) in row.iter().enumerate().skip(j) {
                        assert!(*ok, "monotonicity broken at ({i},{j})->({i2},{j2})");
                    }
                }
            }
        }
    }
    assert!(
        !verdicts[0][0] && verdicts[4][4],
        "grid must contain both verdicts"
    );
    pass(
        5,
        "randomized response passes at ln 3 and fails below; sensitivity 1; (eps,delta) monotone",
    );
}

#[test]
fn criterion_06_rademacher_estimator() {
    type Hypotheses = Vec<Box<dyn Fn(&usize) -> f64>>;
    // Singleton class.
    let singleton: Hypotheses = vec![Box::new(|_| 1.0)];
    let inputs: Vec<usize> = (0..100).collect();
    let est = rademacher_estimate(&singleton, &inputs, 2000, &mut RngStream::from_seed(6)).unwrap();
    assert!(est.abs() < 0.05, "singleton estimate {est}");

    // Shattering class saturates at exactly 1.
    let n = 8usize;
    let shattering: Hypotheses = (0..1usize << n)
        .map(|pattern| {
            Box::new(move |i: &usize| if pattern >> i & 1 == 1 { 1.0 } else { -1.0 })
                as Box<dyn Fn(&usize) -> f64>
        })
        .collect();
    let small: Vec<usize> = (0..n).collect();
    let est = rademacher_estimate(&shattering, &small, 500, &mut RngStream::from_seed(7)).unwrap();
    assert_eq!(est, 1.0);

    // Inclusion monotonicity with common random numbers, 50 random pairs.
    let mut gen = RngStream::from_seed(0x50a1);
    for pair in 0..50u64 {
        let n_inputs = 10 + gen.below(20);
        let k1 = 1 + gen.below(4);
        let k2 = k1 + 1 + gen.below(4);
        // Random fixed prediction tables; H1 is a prefix of H2.
        let tables: Vec<Vec<f64>> = (0..k2)
            .map(|_| (0..n_inputs).map(|_| gen.sign()).collect())
            .collect();
        let class: Hypotheses = tables
            .iter()
            .map(|t| {
                let t = t.clone();
                Box::new(move |i: &usize| t[*i]) as Box<dyn Fn(&usize) -> f64>
            })
            .collect();
        let inputs: Vec<usize> = (0..n_inputs).collect();
        let est1 = rademacher_estimate(
            &class[..k1],
            &inputs,
            200,
            &mut RngStream::from_seed(900 + pair),
        )
        .unwrap();
        let est2 = rademacher_estimate(&class, &inputs, 200, &mut RngStream::from_seed(900 + pair))
            .unwrap();
        assert!(
            est2 >= est1,
            "pair {pair}: est({k2} hyps) {est2} < est({k1} hyps) {est1}"
        );
        assert!((-1.0..=1.0).contains(&est1) && (-1.0..=1.0).contains(&est2));
    }
    pass(
        6,
        "singleton near 0, shattering exactly 1.0, inclusion monotone on 50 random pairs",
    );
}

#[test]
fn criterion_07_federated_reduction() {
    // FedAvg algebra at 1e-12.
    let spec = model_s((8, 8, 1), 3);
    let model = build_model(&spec, 5).unwrap();
    let w = WeightSet::from_model(&model, 7);
    let avg = fedavg(&[w.clone(), w.clone(), w.clone()]).unwrap();
    for (a, b) in avg.tensors.iter().zip(w.tensors.iter()) {
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
    let make = |v: f64, count: usize| WeightSet {
        tensors: vec![Tensor::full(&[2], v)],
        sample_count: count,
    };
    let m = fedavg(&[make(0.0, 1), make(4.0, 3)]).unwrap();
    assert!((m.tensors[0].data()[0] - 3.0).abs() <= 1e-12);
    let m = fedavg(&[make(2.0, 5), make(4.0, 5)]).unwrap();
    assert!((m.tensors[0].data()[0] - 3.0).abs() <= 1e-12);

    //  1 client, sigma 0, 3 rounds x 2 local epochs == centralized 6 epochs,
    // bit for bit. Vanilla SGD (momentum 0) so that the per-round client
    // momentum reset is immaterial; shuffle/dropout streams are matched
    // through the shared (worker, global epoch) schedule.
    let data = synth_dataset(10, 60, 8, 3, 1.0, 21).unwrap();
    let spec = model_s(data.image_shape(), 10);
    let train_config = TrainConfig {
        batch_size: 32,
        learning_rate: 0.01,
        momentum: 0.0,
        epochs: 0,
        seed: 77,
    };
    let fed = FederatedConfig {
        num_clients: 1,
        rounds: 3,
        local_epochs: 2,
        per_client_sigma: vec![0.0],
        train_config: train_config.clone(),
        seed: 31,
        upload_sigma: None,
    };
    let (records, global) = run_rounds(&fed, &data, &spec).unwrap();
    assert_eq!(records.len(), 3);

    let mut centralized = build_model(&spec, 77).unwrap();
    let report = train(
        &mut centralized,
        &data,
        &TrainConfig {
            epochs: 6,
            ..train_config
        },
        &NoisePlan::none(),
    )
    .unwrap();
    for (a, b) in global
        .export_weights()
        .iter()
        .zip(centralized.export_weights().iter())
    {
        assert!(a.bits_eq(b), "weights diverged");
    }
    assert_eq!(
        records.last().unwrap().global_accuracy,
        report.final_test.test_acc
    );
    pass(7, "1-client zero-noise federated run equals centralized training bit for bit; FedAvg algebra at 1e-12");
}

#[test]
fn criterion_08_desk_scale_learning_sanity() {
    let data = synth_dataset(10, 200, 8, 3, 1.0, 7).unwrap();
    let spec = model_s(data.image_shape(), 10);
    let mut degradations = Vec::new();
    for seed in [1u64, 2, 3] {
        let config = TrainConfig {
            batch_size: 64,
            learning_rate: 0.001,
            momentum: 0.9,
            epochs: 10,
            seed,
        };
        let mut base_model = build_model(&spec, seed).unwrap();
        let base = train(&mut base_model, &data, &config, &NoisePlan::none()).unwrap();
        assert!(
            base.final_test.test_acc >= 0.35,
            "seed {seed}: base accuracy {} below 0.35",
            base.final_test.test_acc
        );
        let mut noisy_model = build_model(&spec, seed).unwrap();
        let noisy = train(
            &mut noisy_model,
            &data,
            &config,
            &NoisePlan::new(Mechanism::HiddenLayers, 0.3, seed ^ 0xbeef),
        )
        .unwrap();
        degradations.push(base.final_test.test_acc - noisy.final_test.test_acc);
    }
    let mean_degradation = degradations.iter().sum::<f64>() / degradations.len() as f64;
    assert!(
        mean_degradation < 0.10,
        "sigma=0.3 hidden noise degrades accuracy by {mean_degradation} on average"
    );
    pass(
        8,
        &format!("base accuracy >= 0.35 on all seeds; sigma=0.3 mean degradation {mean_degradation:.4} < 0.10"),
    );
}

#[test]
fn criterion_09_mechanism_ordering() {
    let data = synth_dataset(10, 200, 8, 3, 1.0, 7).unwrap();
    let spec = model_s(data.image_shape(), 10);
    let mechanisms = [
        Mechanism::HiddenLayers,
        Mechanism::Gradients,
        Mechanism::Labels,
        Mechanism::Weights,
    ];
    let mut mean_acc = BTreeMap::new();
    for &mechanism in &mechanisms {
        let mut sum = 0.0;
        for seed in [1u64, 2, 3] {
            let config = TrainConfig {
                batch_size: 64,
                learning_rate: 0.001,
                momentum: 0.9,
                epochs: 10,
                seed,
            };
            let mut model = build_model(&spec, seed).unwrap();
            let report = train(
                &mut model,
                &data,
                &config,
                &NoisePlan::new(mechanism, 0.1, seed ^ 0xfade),
            )
            .unwrap();
            sum += report.final_test.test_acc;
        }
        mean_acc.insert(mechanism.name(), sum / 3.0);
    }
    let weights = mean_acc["weights"];
    for name in ["hidden_layers", "gradients", "labels"] {
        assert!(
            mean_acc[name] >= weights,
            "{name} mean accuracy {} below weights mechanism {weights}",
            mean_acc[name]
        );
    }
    pass(
        9,
        &format!(
            "mean test accuracy at sigma=0.1: hidden {:.3}, gradients {:.3}, labels {:.3} all >= weights {:.3}",
            mean_acc["hidden_layers"], mean_acc["gradients"], mean_acc["labels"], weights
        ),
    );
}

#[test]
fn criterion_10_rerun_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("run_a");
    let out_b = dir.path().join("run_b");
    let config_text = format!(
        r#"
experiment = "sweep_centralized"
output_dir = "{}"
master_seed = 99

[model]
preset = "model_s"

[dataset]
kind = "synthetic"
classes = 5
per_class = 30
hw = 8
channels = 1
separation = 0.5
seed = 11

[noise]
mechanism = "hidden_layers"
sigma_grid = [0.0, 0.1]

[training]
batch_size = 16
learning_rate = 0.002
momentum = 0.9
epochs = 3
seed = 0
"#,
        out_a.display()
    );
    let config_path = dir.path().join("exp.toml");
    std::fs::write(&config_path, &config_text).unwrap();
    let status = noisefed().args(["run"]).arg(&config_path).status().unwrap();
    assert!(status.success());

    // Re-run from the manifest into a second directory.
    let manifest_path = out_a.join("manifest.json");
    let manifest_text = std::fs::read_to_string(&manifest_path).unwrap();
    let rewritten = manifest_text.replace(
        &serde_escape(&out_a.display().to_string()),
        &serde_escape(&out_b.display().to_string()),
    );
    let manifest_b = dir.path().join("manifest_b.json");
    std::fs::write(&manifest_b, rewritten).unwrap();
    let status = noisefed().args(["run"]).arg(&manifest_b).status().unwrap();
    assert!(status.success());

    for file in [
        "sweep.csv",
        "reports/sigma_0.00.csv",
        "reports/sigma_0.10.csv",
    ] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        let b = std::fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between runs");
    }
    pass(10, "re-run from manifest yields byte-identical CSVs");
}

fn serde_escape(path: &str) -> String {
    path.replace('\\', "\\\\")
}
