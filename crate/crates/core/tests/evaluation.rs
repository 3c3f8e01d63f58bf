//! Chance-level and independence checks of the evaluation tools.

use bwssl::data::synthetic_shapes;
use bwssl::eval::{
    correlation_of_features, fit_probe, gaussian_noise, linear_probe, pooled_features, top1_accuracy, ProbeConfig,
};
use bwssl::model::{HeadConfig, Model};
use bwssl::nn::EncoderSpec;
use bwssl::rng::stream;
use bwssl::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn probe_cfg() -> ProbeConfig {
    ProbeConfig {
        epochs: 20,
        batch_size: 64,
        ..ProbeConfig::default()
    }
}

/// Features that carry the label in their first `classes` columns.
fn informative(rng: &mut ChaCha8Rng, labels: &[usize], classes: usize, d: usize) -> Tensor<f64> {
    let noise = gaussian(rng, &[labels.len(), d]);
    Tensor::from_fn(&[labels.len(), d], |i| {
        let (row, col) = (i / d, i % d);
        noise.data()[i] + if col == labels[row] % classes { 3.0 } else { 0.0 }
    })
}

#[test]
fn shuffled_labels_probe_at_chance() {
    let classes = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train_labels: Vec<usize> = (0..800).map(|i| i % classes).collect();
    let val_labels: Vec<usize> = (0..800).map(|i| i % classes).collect();
    let train = informative(&mut rng, &train_labels, classes, 16);
    let val = informative(&mut rng, &val_labels, classes, 16);

    let (control, _) = fit_probe(1, &train, &train_labels, &val, &val_labels, classes, &probe_cfg(), 0).unwrap();
    assert!(control.top1 > 0.9, "informative features only reached {}", control.top1);

    let mut shuffled = train_labels.clone();
    shuffled.shuffle(&mut rng);
    let (entry, _) = fit_probe(1, &train, &shuffled, &val, &val_labels, classes, &probe_cfg(), 0).unwrap();
    // binomial std of the accuracy at chance is about 0.015 here
    assert!((entry.top1 - 0.25).abs() < 0.08, "shuffled labels gave {}", entry.top1);
}

#[test]
fn overwhelming_noise_drives_probe_to_chance() {
    let classes = 4;
    let spec = EncoderSpec::with_blocks(&[(8, 2), (16, 2)]);
    let model: Model<f32> = Model::new(
        &spec,
        spec.training_groups(),
        &[HeadConfig::gsp(8, 8)],
        (16, 16),
        None,
        5,
    )
    .unwrap();
    let train = synthetic_shapes(400, classes, [3, 16, 16], 1).unwrap();
    let val = synthetic_shapes(400, classes, [3, 16, 16], 2).unwrap();
    let (clean, clf) = linear_probe(&model, &train, &val, 2, &probe_cfg(), 0).unwrap();
    assert!(
        clean.top1 > 0.4,
        "random features should still beat chance on shapes, got {}",
        clean.top1
    );

    // clipping turns huge noise into independent coin flips per pixel
    let [c, h, w] = val.image_dims();
    let per = c * h * w;
    let mut rng = stream(5, "noise", 0);
    let mut pixels = Vec::with_capacity(val.len() * per);
    for i in 0..val.len() {
        let img = Tensor::new(&[c, h, w], val.images.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        pixels.extend_from_slice(gaussian_noise(&img, 1e4, &mut rng).data());
    }
    let noisy = Tensor::new(&[val.len(), c, h, w], pixels).unwrap();
    let feats = pooled_features(&model.store, &model.encoder, &noisy, 2)
        .unwrap()
        .pop()
        .unwrap();
    let acc = top1_accuracy(&clf.scores(&feats).unwrap(), &val.labels).unwrap();
    assert!((acc - 0.25).abs() < 0.08, "pure-noise images gave top-1 {acc}");
}

#[test]
fn independent_features_have_no_correlation() {
    let n = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = gaussian(&mut rng, &[n, 8]);
    let b = gaussian(&mut rng, &[n, 8]);
    let stats = correlation_of_features(1, &a, &b).unwrap();
    let bound = 3.0 / (n as f64).sqrt();
    assert!(stats.on_mean.abs() < bound, "on-diagonal mean {}", stats.on_mean);
    assert!(stats.off_mean.abs() < bound, "off-diagonal mean {}", stats.off_mean);

    let same = correlation_of_features(1, &a, &a).unwrap();
    assert!((same.on_mean - 1.0).abs() < 1e-12);
}
