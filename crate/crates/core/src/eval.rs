//! Frozen-representation evaluation: linear probes per block prefix,
//! cross-correlation diagnostics of backbone features, and accuracy under
//! synthetic image corruptions.
//!
//! Nothing here mutates the model. Feature extraction runs on a private
//! copy of the parameter store with batch norm in inference mode.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, gaussian_blur, Image, ViewPipeline};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{cross_correlation, cross_entropy};
use crate::model::Model;
use crate::nn::{Encoder, ForwardPlan, Linear, ParamStore, Session};
use crate::optim::{CosineSchedule, Sgd};
use crate::rng::stream;
use crate::tensor::{Element, Tape, Tensor};

/// Images per forward pass during feature extraction.
const FEATURE_CHUNK: usize = 128;

/// Globally pooled outputs of blocks `1..=upto` for every image, one
/// `[N, C_k]` matrix per block.
pub fn pooled_features<E: Element>(
    store: &ParamStore<E>,
    encoder: &Encoder,
    images: &Tensor<f32>,
    upto: usize,
) -> Result<Vec<Tensor<f64>>> {
    if upto == 0 || upto > encoder.num_blocks() {
        return Err(Error::config(format!(
            "block {upto} outside 1..={}",
            encoder.num_blocks()
        )));
    }
    let [n, c, h, w] = *images.shape() else {
        return Err(Error::shape(format!(
            "images must be [N, C, H, W], got {:?}",
            images.shape()
        )));
    };
    let per = c * h * w;
    let starts: Vec<usize> = (0..n).step_by(FEATURE_CHUNK).collect();
    let chunks: Vec<Vec<Tensor<f64>>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + FEATURE_CHUNK).min(n);
            let x = Tensor::new(&[end - start, c, h, w], images.data()[start * per..end * per].to_vec())?;
            let mut scratch = store.clone();
            let mut s = Session::new(&mut scratch);
            let x = s.tape.constant(x.cast::<E>());
            let outs = encoder.forward(&mut s, x, &mut ForwardPlan::eval(upto))?;
            outs.into_iter()
                .map(|o| {
                    let p = s.tape.mean(o, &[2, 3], false)?;
                    Ok(s.tape.value(p).cast::<f64>())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    (0..upto)
        .map(|k| {
            let parts: Vec<f64> = chunks.iter().flat_map(|ch| ch[k].data().iter().copied()).collect();
            let d = parts.len() / n.max(1);
            Tensor::new(&[n, d], parts)
        })
        .collect()
}

/// Fraction of rows whose highest score sits at the label; ties go to the
/// lowest class index.
pub fn top1_accuracy(scores: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let preds = argmax_rows(scores)?;
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::shape("no predictions to score"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn argmax_rows(scores: &Tensor<f64>) -> Result<Vec<usize>> {
    let [_, k] = *scores.shape() else {
        return Err(Error::shape(format!("scores must be [N, K], got {:?}", scores.shape())));
    };
    if k == 0 {
        return Err(Error::shape("scores have no classes"));
    }
    Ok(scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_grid: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Standardize features with training-split statistics first.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            lr_grid: vec![0.1, 0.3, 1.0],
            momentum: 0.9,
            weight_decay: 0.0,
            standardize: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_grid.is_empty() {
            return Err(Error::config(
                "probe needs epochs, a batch size and at least one learning rate",
            ));
        }
        if self.lr_grid.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::config(format!(
                "probe learning rates {:?} must be positive",
                self.lr_grid
            )));
        }
        Ok(())
    }
}

/// An affine classifier over (optionally standardized) pooled features.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    /// 1-based block whose pooled output it reads.
    pub block: usize,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
}

impl LinearClassifier {
    pub fn scores(&self, features: &Tensor<f64>) -> Result<Tensor<f64>> {
        let x = normalize(features, &self.mean, &self.inv_std)?;
        let [n, d] = *x.shape() else { unreachable!() };
        let k = self.bias.numel();
        let (w, b) = (self.weight.data(), self.bias.data());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &x.data()[i * d..(i + 1) * d];
            for j in 0..k {
                out[i * k + j] = b[j] + row.iter().enumerate().map(|(t, v)| v * w[t * k + j]).sum::<f64>();
            }
        }
        Tensor::new(&[n, k], out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub block: usize,
    pub top1: f64,
    pub lr: f64,
    /// Validation top-1 for every learning rate tried, in grid order.
    pub grid: Vec<(f64, f64)>,
    pub per_class: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub epochs: usize,
    pub entries: Vec<ProbeEntry>,
}

fn feature_stats(x: &Tensor<f64>, standardize: bool) -> (Vec<f64>, Vec<f64>) {
    let [n, d] = *x.shape() else { unreachable!() };
    if !standardize {
        return (vec![0.0; d], vec![1.0; d]);
    }
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        row.iter().zip(&mut mean).for_each(|(v, m)| *m += v / n as f64);
    }
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for ((v, m), s) in row.iter().zip(&mean).zip(&mut var) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let inv = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-6)).collect();
    (mean, inv)
}

fn normalize(x: &Tensor<f64>, mean: &[f64], inv_std: &[f64]) -> Result<Tensor<f64>> {
    match *x.shape() {
        [_, d] if d == mean.len() => {}
        ref s => {
            return Err(Error::shape(format!(
                "features {s:?} do not match a {}-wide probe",
                mean.len()
            )))
        }
    }
    let d = mean.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(inv_std) {
            *v = (*v - m) * s;
        }
    }
    Ok(out)
}

fn per_class_accuracy(scores: &Tensor<f64>, labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let preds = argmax_rows(scores)?;
    let mut hit = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        seen[l] += 1;
        hit[l] += usize::from(p == l);
    }
    Ok(hit
        .iter()
        .zip(&seen)
        .map(|(&h, &s)| if s == 0 { f64::NAN } else { h as f64 / s as f64 })
        .collect())
}

/// Trains one classifier per grid learning rate on `train` features and
/// keeps the one with the best validation top-1 (earliest on ties).
#[allow(clippy::too_many_arguments)]
pub fn fit_probe(
    block: usize,
    train: &Tensor<f64>,
    train_labels: &[usize],
    val: &Tensor<f64>,
    val_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(ProbeEntry, LinearClassifier)> {
    cfg.validate()?;
    let [n, d] = *train.shape() else {
        return Err(Error::shape(format!(
            "train features must be [N, D], got {:?}",
            train.shape()
        )));
    };
    if train_labels.len() != n || val.shape().first() != Some(&val_labels.len()) {
        return Err(Error::shape("feature rows and label counts differ"));
    }
    if let Some(&l) = train_labels.iter().chain(val_labels).find(|&&l| l >= classes) {
        return Err(Error::Label { label: l, classes });
    }
    let (mean, inv_std) = feature_stats(train, cfg.standardize);
    let xs = normalize(train, &mean, &inv_std)?;
    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let mut best: Option<(f64, LinearClassifier)> = None;
    let mut grid = Vec::with_capacity(cfg.lr_grid.len());
    for (gi, &lr) in cfg.lr_grid.iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let layer = Linear::new(
            &mut store,
            "probe",
            d,
            classes,
            true,
            &mut stream(seed, "probe/init", block as u64),
        );
        let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
        let schedule = CosineSchedule::new(lr, cfg.epochs * steps_per_epoch);
        let ids = layer.params();
        let mut t = 0;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = stream(
                seed,
                "probe/shuffle",
                ((block as u64) << 40) | ((gi as u64) << 20) | epoch as u64,
            );
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for rows in order.chunks(batch) {
                let x = xs.select_rows(rows)?;
                let y: Vec<usize> = rows.iter().map(|&r| train_labels[r]).collect();
                let mut s = Session::new(&mut store);
                let x = s.tape.constant(x);
                let logits = layer.forward(&mut s, x)?;
                let loss = cross_entropy(&mut s.tape, logits, &y, None)?;
                s.backward(loss.total)?;
                sgd.step(&mut store, &ids, schedule.lr(t)?)?;
                store.zero_grad();
                t += 1;
            }
        }
        let clf = LinearClassifier {
            block,
            mean: mean.clone(),
            inv_std: inv_std.clone(),
            weight: store.param(layer.weight).value.clone(),
            bias: store.param(layer.bias.expect("probe has a bias")).value.clone(),
        };
        let acc = top1_accuracy(&clf.scores(val)?, val_labels)?;
        grid.push((lr, acc));
        if best.as_ref().is_none_or(|(a, _)| acc > *a) {
            best = Some((acc, clf));
        }
    }
    let (top1, clf) = best.expect("grid is non-empty");
    let lr = grid.iter().find(|g| g.1 == top1).expect("chosen rate is in the grid").0;
    let entry = ProbeEntry {
        block,
        top1,
        lr,
        grid,
        per_class: per_class_accuracy(&clf.scores(val)?, val_labels, classes)?,
    };
    Ok((entry, clf))
}

/// Probes the pooled output of block `k` (1-based).
pub fn linear_probe<E: Element>(
    model: &Model<E>,
    train: &Dataset,
    val: &Dataset,
    k: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(ProbeEntry, LinearClassifier)> {
    let feats_tr = pooled_features(&model.store, &model.encoder, &train.images, k)?
        .pop()
        .expect("k >= 1");
    let feats_va = pooled_features(&model.store, &model.encoder, &val.images, k)?
        .pop()
        .expect("k >= 1");
    fit_probe(
        k,
        &feats_tr,
        &train.labels,
        &feats_va,
        &val.labels,
        train.classes,
        cfg,
        seed,
    )
}

/// Probes every block prefix `1..=B` and returns the classifier of the
/// last block alongside the report.
pub fn probe_all_blocks<E: Element>(
    model: &Model<E>,
    train: &Dataset,
    val: &Dataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(ProbeReport, LinearClassifier)> {
    let b = model.encoder.num_blocks();
    let feats_tr = pooled_features(&model.store, &model.encoder, &train.images, b)?;
    let feats_va = pooled_features(&model.store, &model.encoder, &val.images, b)?;
    let mut entries = Vec::with_capacity(b);
    let mut last = None;
    for (k, (tr, va)) in feats_tr.iter().zip(&feats_va).enumerate() {
        let (entry, clf) = fit_probe(k + 1, tr, &train.labels, va, &val.labels, train.classes, cfg, seed)?;
        entries.push(entry);
        last = Some(clf);
    }
    Ok((
        ProbeReport {
            epochs: cfg.epochs,
            entries,
        },
        last.expect("encoder has blocks"),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCorrelation {
    pub block: usize,
    pub on_diagonal: Vec<f64>,
    pub off_diagonal: Vec<f64>,
    pub on_mean: f64,
    pub off_mean: f64,
    pub off_abs_mean: f64,
    /// Minimum, lower quartile, median, upper quartile, maximum.
    pub on_quantiles: [f64; 5],
    pub off_quantiles: [f64; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStats {
    pub samples: usize,
    pub blocks: Vec<BlockCorrelation>,
}

fn quantiles(values: &[f64]) -> [f64; 5] {
    if values.is_empty() {
        return [f64::NAN; 5];
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    [at(0.0), at(0.25), at(0.5), at(0.75), at(1.0)]
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Splits the centered cross-correlation of two `[N, D]` feature matrices
/// into its diagonal and off-diagonal entries.
pub fn correlation_of_features(block: usize, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<BlockCorrelation> {
    if a.shape() != b.shape() || a.ndim() != 2 || a.shape()[0] < 2 {
        return Err(Error::shape(format!(
            "need two equal [N >= 2, D] feature sets, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut tape = Tape::<f64>::new();
    let (za, zb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = cross_correlation(&mut tape, za, zb, true)?;
    let c = tape.value(c);
    let d = c.shape()[0];
    let mut on = Vec::with_capacity(d);
    let mut off = Vec::with_capacity(d * d.saturating_sub(1));
    for (idx, &v) in c.data().iter().enumerate() {
        if idx / d == idx % d {
            on.push(v);
        } else {
            off.push(v);
        }
    }
    Ok(BlockCorrelation {
        block,
        on_mean: mean(&on),
        off_mean: mean(&off),
        off_abs_mean: off.iter().map(|v| v.abs()).sum::<f64>() / off.len().max(1) as f64,
        on_quantiles: quantiles(&on),
        off_quantiles: quantiles(&off),
        on_diagonal: on,
        off_diagonal: off,
    })
}

/// Correlation between pooled backbone features of two augmented views of
/// `images`, for blocks `1..=upto`.
pub fn correlation_diagnostics<E: Element>(
    model: &Model<E>,
    images: &Tensor<f32>,
    pipeline: &ViewPipeline,
    upto: usize,
    seed: u64,
) -> Result<CorrelationStats> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::shape("correlation diagnostics need at least two samples"));
    }
    let keys: Vec<u64> = (0..n as u64).collect();
    let (va, vb) = augment_batch(images, &keys, pipeline, seed, "diagnostics")?;
    let fa = pooled_features(&model.store, &model.encoder, &va, upto)?;
    let fb = pooled_features(&model.store, &model.encoder, &vb, upto)?;
    let blocks = fa
        .iter()
        .zip(&fb)
        .enumerate()
        .map(|(k, (a, b))| correlation_of_features(k + 1, a, b))
        .collect::<Result<_>>()?;
    Ok(CorrelationStats { samples: n, blocks })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    Contrast,
    Pixelate,
}

pub const SEVERITIES: usize = 5;

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Blur,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian-noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Strength at severity `1..=5`: noise std, blur sigma, contrast
    /// factor, or pixelation scale.
    pub fn strength(self, severity: usize) -> Result<f64> {
        let table: [f64; SEVERITIES] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            CorruptionKind::Blur => [0.5, 0.75, 1.0, 1.5, 2.0],
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            CorruptionKind::Pixelate => [0.95, 0.9, 0.85, 0.75, 0.65],
        };
        if !(1..=SEVERITIES).contains(&severity) {
            return Err(Error::config(format!("severity {severity} outside 1..={SEVERITIES}")));
        }
        Ok(table[severity - 1])
    }

    /// Severity 0 returns the image unchanged.
    pub fn apply(self, img: &Image, severity: usize, rng: &mut crate::rng::Rng) -> Result<Image> {
        if severity == 0 {
            return Ok(img.clone());
        }
        let s = self.strength(severity)?;
        Ok(match self {
            CorruptionKind::GaussianNoise => gaussian_noise(img, s, rng),
            CorruptionKind::Blur => gaussian_blur(img, s, (2.0 * s).ceil() as usize),
            CorruptionKind::Contrast => reduce_contrast(img, s),
            CorruptionKind::Pixelate => pixelate(img, s),
        })
    }
}

/// Adds i.i.d. normal noise and clips to `[0, 1]`.
pub fn gaussian_noise(img: &Image, sigma: f64, rng: &mut crate::rng::Rng) -> Image {
    img.map(|v| {
        let z: f64 = StandardNormal.sample(rng);
        (v as f64 + sigma * z).clamp(0.0, 1.0) as f32
    })
}

/// Pulls every pixel toward the image mean by `factor`.
pub fn reduce_contrast(img: &Image, factor: f64) -> Image {
    let m = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.numel().max(1) as f64;
    img.map(|v| ((v as f64 - m) * factor + m).clamp(0.0, 1.0) as f32)
}

/// Box-averages down to `scale` of the side length, then upsamples with
/// nearest neighbour.
pub fn pixelate(img: &Image, scale: f64) -> Image {
    let [c, h, w] = *img.shape() else { unreachable!() };
    let sh = ((h as f64 * scale).round() as usize).clamp(1, h);
    let sw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let mut small = vec![0.0f64; c * sh * sw];
    for ch in 0..c {
        for i in 0..sh {
            let (r0, r1) = (i * h / sh, ((i + 1) * h).div_ceil(sh));
            for j in 0..sw {
                let (c0, c1) = (j * w / sw, ((j + 1) * w).div_ceil(sw));
                let mut acc = 0.0;
                for r in r0..r1 {
                    for q in c0..c1 {
                        acc += img.data()[(ch * h + r) * w + q] as f64;
                    }
                }
                small[(ch * sh + i) * sw + j] = acc / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, r, q) = (idx / (h * w), (idx / w) % h, idx % w);
        small[(ch * sh + r * sh / h) * sw + q * sw / w] as f32
    })
}

/// Applies `kind` at `severity` to every image of a `[N, C, H, W]` batch;
/// image `i` draws from its own stream.
pub fn corrupt_batch(images: &Tensor<f32>, kind: CorruptionKind, severity: usize, seed: u64) -> Result<Tensor<f32>> {
    let [n, c, h, w] = *images.shape() else {
        return Err(Error::shape(format!(
            "images must be [N, C, H, W], got {:?}",
            images.shape()
        )));
    };
    let per = c * h * w;
    let name = format!("corrupt/{}/{severity}", kind.name());
    let out: Vec<Image> = (0..n)
        .into_par_iter()
        .map(|i| {
            let img = Tensor::new(&[c, h, w], images.data()[i * per..(i + 1) * per].to_vec())?;
            kind.apply(&img, severity, &mut stream(seed, &name, i as u64))
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRow {
    pub kind: CorruptionKind,
    /// Top-1 error per requested severity, in request order.
    pub errors: Vec<(usize, f64)>,
    pub mean_error: f64,
    /// Population standard deviation over the severities.
    pub std_error: f64,
    /// Whether error never decreases as severity rises; reported only.
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub block: usize,
    pub clean_error: f64,
    pub rows: Vec<CorruptionRow>,
}

impl CorruptionReport {
    pub fn mean_corruption_error(&self) -> f64 {
        mean(&self.rows.iter().map(|r| r.mean_error).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,severity,error\n");
        s += &format!("clean,0,{}\n", self.clean_error);
        for r in &self.rows {
            for (sev, e) in &r.errors {
                s += &format!("{},{sev},{e}\n", r.kind.name());
            }
        }
        s
    }
}

/// Error of `probe` on clean and corrupted copies of `val`.
pub fn corruption_eval<E: Element>(
    model: &Model<E>,
    probe: &LinearClassifier,
    val: &Dataset,
    kinds: &[CorruptionKind],
    severities: &[usize],
    seed: u64,
) -> Result<CorruptionReport> {
    let error_on = |images: &Tensor<f32>| -> Result<f64> {
        let f = pooled_features(&model.store, &model.encoder, images, probe.block)?
            .pop()
            .expect("block >= 1");
        Ok(1.0 - top1_accuracy(&probe.scores(&f)?, &val.labels)?)
    };
    let clean_error = error_on(&val.images)?;
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let errors = severities
            .iter()
            .map(|&sev| Ok((sev, error_on(&corrupt_batch(&val.images, kind, sev, seed)?)?)))
            .collect::<Result<Vec<_>>>()?;
        let e: Vec<f64> = errors.iter().map(|x| x.1).collect();
        let m = mean(&e);
        rows.push(CorruptionRow {
            kind,
            mean_error: m,
            std_error: (e.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / e.len().max(1) as f64).sqrt(),
            monotone: e.windows(2).all(|p| p[1] >= p[0]),
            errors,
        });
    }
    Ok(CorruptionReport {
        block: probe.block,
        clean_error,
        rows,
    })
}
