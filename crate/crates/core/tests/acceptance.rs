//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL/SKIP line (run with `--nocapture` to see them on success).
//! Dataset-backed criteria look for the published MNIST/CIFAR-10 files
//! under GHN_DATA_DIR and skip when they are absent. The two extended runs
//! (MNIST multi-epoch, CIFAR-10) are `#[ignore]`d; include them with
//! `--ignored`. Train-loop criteria want a release build
//! (`cargo test --release --test acceptance`).

use std::path::PathBuf;
use std::time::Instant;

use ghn_core::data::{load_cifar10, load_mnist_idx, Dataset};
use ghn_core::layers::{
    parse_arch, Activation, Granularity, Head, LayerOp, LayerSpec, Network, NetworkKind,
    NetworkSpec, SignalScale, ThresholdConfig,
};
use ghn_core::tensor::{Tape, TensorData};
use ghn_core::train::{
    compare_bn_experiment, evaluate, load_checkpoint, pearson, save_checkpoint, train, Checkpoint,
    TrainConfig,
};
use ghn_core::verify::{algebra_suite, distributivity_suite, gradient_suite};

// pinned tolerances and budgets
const ALGEBRA_SAMPLES: usize = 10_000;
const ALGEBRA_BUDGET_SECS: f64 = 5.0;
const DISTRIBUTIVITY_CASES: usize = 1000;
const ORACLE_CONFIGS: usize = 100;
const ORACLE_TOL_DENSE: f64 = 1e-5;
const ORACLE_TOL_CONV: f64 = 1e-4;
const ORACLE_BUDGET_SECS: f64 = 30.0;
const GRAD_TOL_ANALYTIC: f64 = 1e-12;
const MNIST_FAST_TARGET: f64 = 0.95;
const MNIST_FAST_FLOOR: f64 = 0.93;
const MNIST_FINAL_FLOOR: f64 = 0.985;
const LR_ROBUSTNESS_GAP: f64 = 0.02;
const THRESHOLD_ABLATION_GAP: f64 = 0.015;
const BN_CORRELATION_FLOOR: f64 = 0.85;

fn report(criterion: usize, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    println!("{status} criterion {criterion}: {detail}");
    assert!(passed, "criterion {criterion}: {detail}");
}

fn skip(criterion: usize, why: &str) {
    println!("SKIP criterion {criterion}: {why}");
}

fn data_dir() -> Option<PathBuf> {
    std::env::var("GHN_DATA_DIR").ok().map(PathBuf::from)
}

fn mnist() -> Option<(Dataset, Dataset)> {
    let dir = data_dir()?;
    let train = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .ok()?;
    let test = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )
    .ok()?;
    Some((train, test))
}

fn cifar10() -> Option<(Dataset, Dataset)> {
    let dir = data_dir()?;
    let batches: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let train = load_cifar10(&batches).ok()?;
    let test = load_cifar10(&[dir.join("test_batch.bin")]).ok()?;
    Some((train, test))
}

const MNIST_ARCH: &str = "cv[1,5,5,16]-pool-cv[16,5,5,64]-pool-fc[1024]-fc[1024,10]";
const CIFAR_ARCH: &str =
    "cv[3,3,3,64]-cv[64,5,5,256]-pool-cv[256,5,5,256]-pool-fc[1024]-fc[1024,512]-fc[512,10]";

fn ghn_spec(arch: &str, input: (usize, usize, usize), threshold: ThresholdConfig) -> NetworkSpec {
    let ops = parse_arch(arch).unwrap();
    let n = ops.len();
    NetworkSpec {
        kind: NetworkKind::Ghn,
        input,
        layers: ops
            .into_iter()
            .enumerate()
            .map(|(i, op)| LayerSpec {
                op,
                threshold: ThresholdConfig {
                    granularity: match op {
                        LayerOp::Conv { .. } => Granularity::PerFilter,
                        _ => Granularity::PerLayer,
                    },
                    ..threshold
                },
                activation: if i + 1 == n || matches!(op, LayerOp::Pool { .. }) {
                    Activation::None
                } else {
                    Activation::ReluGhd
                },
            })
            .collect(),
        head: Head::NegGhd,
        scale: SignalScale::Auto,
    }
}

fn soft_threshold() -> ThresholdConfig {
    ThresholdConfig::default()
}

fn mnist_cfg(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        batch_size: 64,
        steps,
        seed: 0,
        eval_every: 100,
        stats_every: 50,
    }
}

fn run_mnist(
    data: &(Dataset, Dataset),
    threshold: ThresholdConfig,
    cfg: &TrainConfig,
) -> (f64, ghn_core::train::TrainLog) {
    let spec = ghn_spec(MNIST_ARCH, (28, 28, 1), threshold);
    let mut net = Network::<f32>::init(&spec, cfg.seed).unwrap();
    let log = train(&mut net, &data.0, Some(&data.1), cfg).unwrap();
    let (acc, _) = evaluate(&mut net, &data.1, cfg.batch_size).unwrap();
    (acc, log)
}

#[test]
fn criterion_01_algebra_suite() {
    let start = Instant::now();
    let reports = algebra_suite(ALGEBRA_SAMPLES, 0);
    let elapsed = start.elapsed().as_secs_f64();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    report(
        1,
        failed.is_empty() && elapsed < ALGEBRA_BUDGET_SECS,
        &format!(
            "{} algebra properties on {ALGEBRA_SAMPLES} samples in {elapsed:.2}s (failures: {:?})",
            reports.len(),
            failed.iter().map(|r| &r.name).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_02_distributivity() {
    let reports = distributivity_suite(DISTRIBUTIVITY_CASES, 0);
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    report(
        2,
        failed.is_empty(),
        &format!(
            "distributive property on {DISTRIBUTIVITY_CASES} ensemble pairs (failures: {:?})",
            failed.iter().map(|r| &r.name).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_03_layer_oracle_equivalence() {
    use ghn_core::layers::{ghn_conv2d_forward, ghn_dense_forward};
    use ghn_core::tensor::Padding;
    use ghn_core::verify::{ghn_conv_oracle, ghn_dense_oracle};
    use rand::{Rng, SeedableRng};

    let start = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut worst_dense = 0.0f64;
    for _ in 0..ORACLE_CONFIGS {
        let n = rng.gen_range(1..5);
        let l = rng.gen_range(1..12);
        let f = rng.gen_range(1..8);
        let x = TensorData::<f32>::from_fn(&[n, l], |_| rng.gen_range(-1.0..1.0));
        let w = TensorData::<f32>::from_fn(&[l, f], |_| rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
        let h = ghn_dense_forward(&tape, xv, wv).unwrap();
        worst_dense = worst_dense.max(tape.value(h).max_abs_diff(&ghn_dense_oracle(&x, &w).unwrap()));
    }
    let mut worst_conv = 0.0f64;
    for _ in 0..ORACLE_CONFIGS {
        let n = rng.gen_range(1..3);
        let h = rng.gen_range(3..9);
        let w = rng.gen_range(3..9);
        let cin = rng.gen_range(1..3);
        let cout = rng.gen_range(1..5);
        let k = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..3);
        let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
        let x = TensorData::<f32>::from_fn(&[n, h, w, cin], |_| rng.gen_range(0.0..1.0));
        let kt = TensorData::<f32>::from_fn(&[k, k, cin, cout], |_| rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(kt.clone()));
        let out = ghn_conv2d_forward(&tape, xv, kv, stride, padding).unwrap();
        worst_conv = worst_conv
            .max(tape.value(out).max_abs_diff(&ghn_conv_oracle(&x, &kt, stride, padding).unwrap()));
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        3,
        worst_dense <= ORACLE_TOL_DENSE && worst_conv <= ORACLE_TOL_CONV && elapsed < ORACLE_BUDGET_SECS,
        &format!(
            "{ORACLE_CONFIGS} configs each: dense worst {worst_dense:.2e} (tol {ORACLE_TOL_DENSE}), \
             conv worst {worst_conv:.2e} (tol {ORACLE_TOL_CONV}), {elapsed:.2}s"
        ),
    );
}

#[test]
fn criterion_04_gradient_suite() {
    let mut failures = Vec::new();
    for r in gradient_suite::<f32>(0) {
        if !r.passed {
            failures.push(format!("f32 {}", r.name));
        }
    }
    for r in gradient_suite::<f64>(0) {
        if !r.passed {
            failures.push(format!("f64 {}", r.name));
        }
    }
    // analytic identities on the dense GHN layer
    let l = 7;
    let x = TensorData::<f64>::from_fn(&[1, l], |i| 0.1 + 0.07 * i as f64);
    let w = TensorData::<f64>::from_fn(&[l, 1], |i| 0.9 - 0.09 * i as f64);
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(w.clone());
    let h = ghn_core::layers::ghn_dense_forward(&tape, xv, wv).unwrap();
    let loss = tape.sum_all(h).unwrap();
    let grads = tape.backward(loss).unwrap();
    let gw = grads.get(wv).unwrap();
    let gx = grads.get(xv).unwrap();
    for i in 0..l {
        let ew = (1.0 - 2.0 * x.values()[i]) / l as f64;
        let ex = (1.0 - 2.0 * w.values()[i]) / l as f64;
        if (gw.values()[i] - ew).abs() > GRAD_TOL_ANALYTIC {
            failures.push(format!("analytic dh/dw at {i}"));
        }
        if (gx.values()[i] - ex).abs() > GRAD_TOL_ANALYTIC {
            failures.push(format!("analytic dh/dx at {i}"));
        }
    }
    report(
        4,
        failures.is_empty(),
        &format!("gradient checks at both precisions plus analytic identities (failures: {failures:?})"),
    );
}

#[test]
fn criterion_05_mnist_fast_learning() {
    let Some(data) = mnist() else {
        skip(5, "MNIST files not found under GHN_DATA_DIR");
        return;
    };
    let cfg = mnist_cfg(1000, 0.1);
    let (acc, log) = run_mnist(&data, soft_threshold(), &cfg);
    // loss trend invariant: median over [900,1000) below median over [0,100)
    let losses = log.series("train", "loss");
    let median = |s: &mut [f64]| {
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s[s.len() / 2]
    };
    let early = median(&mut losses[..100].to_vec());
    let late = median(&mut losses[900..].to_vec());
    report(
        5,
        acc >= MNIST_FAST_FLOOR && late < early,
        &format!(
            "test accuracy {acc:.4} after 1000 steps (target {MNIST_FAST_TARGET}, floor \
             {MNIST_FAST_FLOOR}); median loss {early:.3} -> {late:.3}"
        ),
    );
}

#[test]
#[ignore = "extended run: >= 10 MNIST epochs on CPU"]
fn criterion_06_mnist_final_accuracy() {
    let Some(data) = mnist() else {
        skip(6, "MNIST files not found under GHN_DATA_DIR");
        return;
    };
    let steps = 10 * data.0.len().div_ceil(64);
    let cfg = mnist_cfg(steps, 0.1);
    let (acc, _) = run_mnist(&data, soft_threshold(), &cfg);
    report(
        6,
        acc >= MNIST_FINAL_FLOOR,
        &format!("test accuracy {acc:.4} after {steps} steps (floor {MNIST_FINAL_FLOOR})"),
    );
}

#[test]
fn criterion_07_learning_rate_robustness() {
    let Some(data) = mnist() else {
        skip(7, "MNIST files not found under GHN_DATA_DIR");
        return;
    };
    let (acc_hi, log_hi) = run_mnist(&data, soft_threshold(), &mnist_cfg(2000, 0.1));
    let (acc_lo, log_lo) = run_mnist(&data, soft_threshold(), &mnist_cfg(2000, 0.01));
    let at_500 = |log: &ghn_core::train::TrainLog| {
        log.scalars
            .iter()
            .find(|r| r.step == 500 && r.metric == "accuracy")
            .map(|r| r.value)
            .unwrap_or(0.0)
    };
    let hi_500 = at_500(&log_hi);
    let lo_500 = at_500(&log_lo);
    report(
        7,
        (acc_hi - acc_lo).abs() <= LR_ROBUSTNESS_GAP && hi_500 > lo_500,
        &format!(
            "lr 0.1 -> {acc_hi:.4}, lr 0.01 -> {acc_lo:.4} (gap budget {LR_ROBUSTNESS_GAP}); \
             step-500 accuracies {hi_500:.4} vs {lo_500:.4}"
        ),
    );
}

#[test]
fn criterion_08_threshold_ablation() {
    let Some(data) = mnist() else {
        skip(8, "MNIST files not found under GHN_DATA_DIR");
        return;
    };
    let cfg = mnist_cfg(2000, 0.1);
    let (acc_soft, _) = run_mnist(&data, soft_threshold(), &cfg);
    let (acc_off, _) = run_mnist(&data, ThresholdConfig::off(), &cfg);
    report(
        8,
        (acc_soft - acc_off).abs() <= THRESHOLD_ABLATION_GAP,
        &format!(
            "trainable-r {acc_soft:.4} vs r=0 {acc_off:.4} (gap budget {THRESHOLD_ABLATION_GAP})"
        ),
    );
}

#[test]
fn criterion_09_bn_correlation() {
    let Some(data) = mnist() else {
        skip(9, "MNIST files not found under GHN_DATA_DIR");
        return;
    };
    let ops = parse_arch(MNIST_ARCH).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.1,
        batch_size: 64,
        steps: 3000,
        seed: 0,
        eval_every: 100,
        stats_every: 50,
    };
    let rep =
        compare_bn_experiment::<f32>(&ops, (28, 28, 1), &data.0, Some(&data.1), &cfg).unwrap();
    report(
        9,
        rep.corr_mean >= BN_CORRELATION_FLOOR,
        &format!(
            "first-conv mean-series Pearson {:.4} (floor {BN_CORRELATION_FLOOR}); \
             max {:.4}, min {:.4}",
            rep.corr_mean, rep.corr_max, rep.corr_min
        ),
    );
}

#[test]
#[ignore = "extended run: two 3000-step CIFAR-10 trainings on CPU"]
fn criterion_10_cifar_threshold_benefit() {
    let Some(data) = cifar10() else {
        skip(10, "CIFAR-10 batch files not found under GHN_DATA_DIR");
        return;
    };
    let cfg = TrainConfig {
        learning_rate: 0.1,
        batch_size: 64,
        steps: 3000,
        seed: 0,
        eval_every: 100,
        stats_every: 0,
    };
    let run = |threshold: ThresholdConfig| {
        let spec = ghn_spec(CIFAR_ARCH, (32, 32, 3), threshold);
        let mut net = Network::<f32>::init(&spec, cfg.seed).unwrap();
        train(&mut net, &data.0, Some(&data.1), &cfg).unwrap();
        evaluate(&mut net, &data.1, cfg.batch_size).unwrap().0
    };
    let acc_soft = run(soft_threshold());
    let acc_off = run(ThresholdConfig::off());
    report(
        10,
        acc_soft >= acc_off,
        &format!("soft-threshold {acc_soft:.4} vs r=0 {acc_off:.4} after 3000 steps"),
    );
}

#[test]
fn criterion_11_determinism_and_persistence() {
    // synthetic two-class set keeps this criterion independent of on-disk data
    let n = 64;
    let images = TensorData::<f32>::from_fn(&[n, 8, 8, 1], |i| {
        let sample = i / 64;
        let pix = i % 64;
        let class = sample % 2;
        let base = if (pix / 8 + pix % 8) % 2 == class { 0.9 } else { 0.1 };
        base + 0.001 * (sample as f32)
    });
    let ds = Dataset {
        images,
        labels: (0..n).map(|s| s % 2).collect(),
        classes: 2,
    };
    let spec = ghn_spec("cv[1,3,3,4]-pool-fc[2]", (8, 8, 1), soft_threshold());
    let cfg = TrainConfig {
        learning_rate: 0.1,
        batch_size: 16,
        steps: 40,
        seed: 123,
        eval_every: 10,
        stats_every: 10,
    };
    let run = || {
        let mut net = Network::<f32>::init(&spec, cfg.seed).unwrap();
        let log = train(&mut net, &ds, Some(&ds), &cfg).unwrap();
        (net, log)
    };
    let (mut net_a, log_a) = run();
    let (_, log_b) = run();
    let identical_csv =
        log_a.scalar_csv() == log_b.scalar_csv() && log_a.layer_stats_csv() == log_b.layer_stats_csv();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&Checkpoint::capture(&net_a, cfg.steps, ""), &path).unwrap();
    let (acc_before, loss_before) = evaluate(&mut net_a, &ds, cfg.batch_size).unwrap();
    let mut net_c = Network::<f32>::init(&spec, 999).unwrap();
    load_checkpoint(&path).unwrap().apply(&mut net_c).unwrap();
    let (acc_after, loss_after) = evaluate(&mut net_c, &ds, cfg.batch_size).unwrap();
    let bit_identical =
        acc_before == acc_after && loss_before.to_bits() == loss_after.to_bits();

    // same-seed comparison arms also agree perfectly (stream checksum path)
    let corr_ok = pearson(&log_a.stat_series("mean"), &log_b.stat_series("mean"))
        .map(|c| (c - 1.0).abs() < 1e-12)
        .unwrap_or(false);
    report(
        11,
        identical_csv && bit_identical && corr_ok,
        &format!(
            "metrics byte-identical: {identical_csv}; checkpoint round-trip bit-identical: \
             {bit_identical}; repeated-run stat correlation exact: {corr_ok}"
        ),
    );
}
