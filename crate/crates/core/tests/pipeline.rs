//! End to end through the public API: IDX files, pair synthesis, training,
//! archives, explanation and diagnostics.

use std::path::Path;

use deep_taylor::dataio::{
    load_idx, load_model, load_pairs, save_model, save_pairs, synthesize_pairs, write_idx, ModelArchive, PairArchive,
    PairConfig, PairedSample,
};
use deep_taylor::diagnostics::{evaluate, Method, Tolerances};
use deep_taylor::network::{train_sgd, Network, Preset, TrainConfig};
use deep_taylor::relevance::{
    explain, minmax_samples, train_minmax, MinMaxInit, RuleAssignment, DEFAULT_MINMAX_LEARNING_RATE,
};
use deep_taylor::tensor::Tensor;

const SIDE: usize = 28;

/// Twenty digit-like blobs whose position depends on the label.
fn digits(dir: &Path) -> Vec<PairedSample> {
    let n = 20;
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    for k in 0..n {
        let label = k % 10;
        for r in 0..SIDE {
            for c in 0..SIDE {
                let (dr, dc) = (r as f64 - 8.0 - label as f64, c as f64 - 14.0);
                pixels.push((255.0 * (-(dr * dr + dc * dc) / 18.0).exp()) as u8);
            }
        }
    }
    let labels: Vec<u8> = (0..n).map(|k| (k % 10) as u8).collect();
    let (images_path, labels_path) = (dir.join("images-idx3-ubyte.gz"), dir.join("labels-idx1-ubyte.gz"));
    write_idx(&images_path, &labels_path, &pixels, (n, SIDE, SIDE), &labels).unwrap();
    let ds = load_idx(&images_path, &labels_path).unwrap();
    synthesize_pairs(
        &ds,
        &PairConfig {
            count: 40,
            ..Default::default()
        },
    )
    .unwrap()
}

fn images(pairs: &[PairedSample]) -> Vec<Tensor> {
    pairs.iter().map(|p| p.image.clone()).collect()
}

fn short_training(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        ..Default::default()
    }
}

#[test]
fn pair_archive_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = digits(dir.path());
    assert_eq!(pairs.iter().filter(|p| p.target > 0.0).count(), 20);
    let archive = PairArchive {
        samples: pairs,
        metadata: [("seed".to_string(), "0".to_string())].into_iter().collect(),
    };
    let path = dir.path().join("pairs.dta");
    save_pairs(&archive, &path).unwrap();
    assert_eq!(load_pairs(&path).unwrap(), archive);
}

#[test]
fn trained_one_layer_net_explains_consistently_after_reload() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = digits(dir.path());
    let net = Network::preset(Preset::MnistOneLayer, 0.05, 0).unwrap();
    let (net, report) = train_sgd(&net, &pairs, &short_training(200)).unwrap();
    assert!(report.final_mse < report.initial_mse);

    let path = dir.path().join("one.dta");
    save_model(&ModelArchive::new(net.clone()), &path).unwrap();
    let reloaded = load_model(&path).unwrap().network;
    let rules = RuleAssignment::training_free(&net);
    for x in images(&pairs) {
        let a = explain(&net, &x, &rules).unwrap();
        let b = explain(&reloaded, &x, &rules).unwrap();
        assert_eq!(a.relevance, b.relevance);
        assert!(a.conservation_gap() <= 1e-9 * a.output.max(1.0));
        assert!(a.relevance.data().iter().all(|&r| r >= 0.0));
    }

    let xs = images(&pairs);
    let m: Method = "deep-taylor".parse().unwrap();
    let r = evaluate(&m.bind(&net, None).unwrap(), &xs, Tolerances::default()).unwrap();
    assert!(r.failures.is_empty());
    assert!(r.verdicts.conservative && r.verdicts.positive && r.verdicts.consistent);

    let m: Method = "sensitivity-raw".parse().unwrap();
    let r = evaluate(&m.bind(&net, None).unwrap(), &xs, Tolerances::default()).unwrap();
    assert!(r.verdicts.positive);
    assert!(!r.verdicts.conservative);
}

#[test]
fn minmax_model_survives_the_archive_and_stays_positive() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = digits(dir.path());
    let net = Network::preset(Preset::MnistTwoLayer, 0.05, 0).unwrap();
    let (net, _) = train_sgd(&net, &pairs, &short_training(100)).unwrap();
    let xs = images(&pairs);

    let samples = minmax_samples(&net, 0, &xs).unwrap();
    let cfg = TrainConfig {
        iterations: 100,
        learning_rate: DEFAULT_MINMAX_LEARNING_RATE,
        ..Default::default()
    };
    let (model, fit) = train_minmax(&net, 0, &samples, &cfg, &MinMaxInit::FromLayer).unwrap();
    assert!(fit.final_mse.is_finite());

    let mut archive = ModelArchive::new(net.clone());
    archive.minmax = Some(model);
    let path = dir.path().join("two.dta");
    save_model(&archive, &path).unwrap();
    let reloaded = load_model(&path).unwrap();
    assert_eq!(reloaded.minmax, archive.minmax);

    let m: Method = "minmax".parse().unwrap();
    let bound = m.bind(&reloaded.network, reloaded.minmax.as_ref()).unwrap();
    let r = evaluate(&bound, &xs, Tolerances::default()).unwrap();
    assert!(r.failures.is_empty(), "{:?}", r.failures);
    assert!(r.verdicts.positive);

    let m: Method = "minmax".parse().unwrap();
    assert!(m.bind(&net, None).is_err());
}
