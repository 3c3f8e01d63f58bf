//! Dataset ingestion.
//!
//! Three sources produce the same in-memory form: `[N, C, H, W]` images in
//! `[0, 1]` plus integer labels.
//!
//! * `cifar10-binary`: the published CIFAR-10 binary layout, one label byte
//!   followed by 3072 channel-major pixel bytes per record. The path may be
//!   the extracted batch directory (`data_batch_*.bin` for training,
//!   `test_batch.bin` for validation) or a single batch file.
//! * `raw-tensor-file`: magic `BWSSLRAW`, then little-endian `u32` values
//!   `N, C, H, W`, then `N` records of a `u32` label and `C*H*W` `f32`
//!   pixels.
//! * `synthetic`: procedurally drawn shapes, see [`synthetic_shapes`].

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label: l, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_dims(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
        })
    }

    /// Batch `rows` as images plus labels.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        Ok((
            self.images.select_rows(rows)?,
            rows.iter().map(|&r| self.labels[r]).collect(),
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Cifar10Binary,
    RawTensorFile,
    #[default]
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub source: Source,
    /// File or directory; relative paths resolve against the data directory.
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub train: usize,
    pub val: usize,
    pub classes: usize,
    /// `[C, H, W]`.
    pub dims: [usize; 3],
    /// Seed of the synthetic generator, independent of the run seed.
    #[serde(default)]
    pub generator_seed: u64,
}

impl DatasetDescriptor {
    pub fn synthetic(train: usize, val: usize, classes: usize, side: usize) -> Self {
        Self {
            source: Source::Synthetic,
            path: None,
            train,
            val,
            classes,
            dims: [3, side, side],
            generator_seed: 0,
        }
    }

    pub fn cifar10(train: usize, val: usize) -> Self {
        Self {
            source: Source::Cifar10Binary,
            path: Some(PathBuf::from("cifar-10-batches-bin")),
            train,
            val,
            classes: 10,
            dims: [3, 32, 32],
            generator_seed: 0,
        }
    }

    pub fn validate(&self, total_stride: usize) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        let [c, h, w] = self.dims;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("image dims {:?} must be positive", self.dims)));
        }
        if h % total_stride != 0 || w % total_stride != 0 {
            return Err(Error::config(format!(
                "image dims {h}x{w} are not divisible by the encoder stride {total_stride}"
            )));
        }
        if self.train < 2 || self.val == 0 {
            return Err(Error::config("need at least 2 training and 1 validation image"));
        }
        if self.source == Source::Synthetic && self.classes > SHAPE_CLASSES {
            return Err(Error::config(format!(
                "the synthetic generator has {SHAPE_CLASSES} classes, {} requested",
                self.classes
            )));
        }
        if self.source == Source::Cifar10Binary && (self.dims != [3, 32, 32] || self.classes != 10) {
            return Err(Error::config("cifar10-binary images are 3x32x32 with 10 classes"));
        }
        Ok(())
    }

    fn resolve(&self, data_dir: Option<&Path>) -> Result<PathBuf> {
        let p = self
            .path
            .clone()
            .ok_or_else(|| Error::config("this dataset source needs a path"))?;
        Ok(match data_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p,
        })
    }
}

pub fn load_dataset(desc: &DatasetDescriptor, data_dir: Option<&Path>) -> Result<Splits> {
    desc.validate(1)?;
    let want = desc.train + desc.val;
    let (train, val) = match desc.source {
        Source::Synthetic => {
            let all = synthetic_shapes(want, desc.classes, desc.dims, desc.generator_seed)?;
            split(all, desc.train)?
        }
        Source::Cifar10Binary => {
            let path = desc.resolve(data_dir)?;
            if !path.exists() {
                return Err(Error::MissingArtifacts(vec![path.display().to_string()]));
            }
            if path.is_dir() {
                let mut train_files: Vec<PathBuf> = (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect();
                train_files.retain(|f| f.exists());
                let test = path.join("test_batch.bin");
                let missing: Vec<String> = if train_files.is_empty() || !test.exists() {
                    vec![path.join("data_batch_1.bin"), test.clone()]
                        .into_iter()
                        .filter(|f| !f.exists())
                        .map(|f| f.display().to_string())
                        .collect()
                } else {
                    vec![]
                };
                if !missing.is_empty() {
                    return Err(Error::MissingArtifacts(missing));
                }
                let train = read_cifar_files(&train_files, desc.train)?;
                let val = read_cifar_files(&[test], desc.val)?;
                (train, val)
            } else {
                split(read_cifar_files(&[path], want)?, desc.train)?
            }
        }
        Source::RawTensorFile => {
            let path = desc.resolve(data_dir)?;
            let all = read_raw(&path, desc.classes)?;
            if all.image_dims() != desc.dims {
                return Err(Error::config(format!(
                    "{} holds {:?} images, config expects {:?}",
                    path.display(),
                    all.image_dims(),
                    desc.dims
                )));
            }
            if all.len() < want {
                return Err(Error::config(format!(
                    "{} holds {} images, {want} requested",
                    path.display(),
                    all.len()
                )));
            }
            split(all, desc.train)?
        }
    };
    if train.len() < desc.train || val.len() < desc.val {
        return Err(Error::config(format!(
            "dataset provides {}/{} images, {}/{} requested",
            train.len(),
            val.len(),
            desc.train,
            desc.val
        )));
    }
    Ok(Splits { train, val })
}

fn split(all: Dataset, n_train: usize) -> Result<(Dataset, Dataset)> {
    let n = all.len();
    let n_train = n_train.min(n);
    let train = all.subset(&(0..n_train).collect::<Vec<_>>())?;
    let val = all.subset(&(n_train..n).collect::<Vec<_>>())?;
    Ok((train, val))
}

const CIFAR_RECORD: usize = 1 + 3072;

/// Decodes CIFAR-10 binary records from `bytes`. `path` labels errors.
pub fn parse_cifar10(bytes: &[u8], path: &Path, limit: usize) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: whole as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() - whole
            ),
        });
    }
    let n = (bytes.len() / CIFAR_RECORD).min(limit);
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        if rec[0] >= 10 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: (r * CIFAR_RECORD) as u64,
                message: format!("label byte {} is not a CIFAR-10 class", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(&[n, 3, 32, 32], pixels)?, labels, 10)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_cifar_files(files: &[PathBuf], limit: usize) -> Result<Dataset> {
    let mut parts = Vec::new();
    let mut remaining = limit;
    for f in files {
        if remaining == 0 {
            break;
        }
        let d = parse_cifar10(&read_file(f)?, f, remaining)?;
        remaining -= d.len();
        parts.push(d);
    }
    concat(parts, 10)
}

fn concat(parts: Vec<Dataset>, classes: usize) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut dims = [3, 32, 32];
    for p in parts {
        dims = p.image_dims();
        labels.extend(p.labels);
        data.extend(p.images.into_data());
    }
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, dims[0], dims[1], dims[2]], data)?, labels, classes)
}

const RAW_MAGIC: &[u8; 8] = b"BWSSLRAW";

pub fn encode_raw(ds: &Dataset) -> Vec<u8> {
    let [c, h, w] = ds.image_dims();
    let mut out = Vec::with_capacity(8 + 16 + ds.images.numel() * 4 + ds.len() * 4);
    out.extend_from_slice(RAW_MAGIC);
    for v in [ds.len(), c, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let per = c * h * w;
    for (i, &l) in ds.labels.iter().enumerate() {
        out.extend_from_slice(&(l as u32).to_le_bytes());
        for v in &ds.images.data()[i * per..(i + 1) * per] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn parse_raw(bytes: &[u8], path: &Path, classes: usize) -> Result<Dataset> {
    let fail = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 24 || &bytes[..8] != RAW_MAGIC {
        return Err(fail(0, "missing BWSSLRAW header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let (n, c, h, w) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    let per = c * h * w;
    let record = 4 + 4 * per;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * per);
    for i in 0..n {
        let start = 24 + i * record;
        if bytes.len() < start + record {
            return Err(fail(start.min(bytes.len()), format!("record {i} of {n} is truncated")));
        }
        let label = u32_at(start);
        if label >= classes {
            return Err(fail(start, format!("label {label} out of range for {classes} classes")));
        }
        labels.push(label);
        for k in 0..per {
            let o = start + 4 + 4 * k;
            let v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
            if !(0.0..=1.0).contains(&v) {
                return Err(fail(o, format!("pixel value {v} outside [0, 1]")));
            }
            data.push(v);
        }
    }
    let end = 24 + n * record;
    if bytes.len() != end {
        return Err(fail(end, "trailing bytes after last record".into()));
    }
    Dataset::new(Tensor::new(&[n, c, h, w], data)?, labels, classes)
}

pub fn read_raw(path: &Path, classes: usize) -> Result<Dataset> {
    parse_raw(&read_file(path)?, path, classes)
}

pub fn write_raw(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_raw(ds)).map_err(|e| Error::io(path, e))
}

pub const SHAPE_CLASSES: usize = 10;

/// Whether offset `(dy, dx)`, in units of the shape radius, falls inside
/// the shape of `class`.
fn shape_mask(class: usize, dy: f64, dx: f64, phase: f64) -> bool {
    let r = (dx * dx + dy * dy).sqrt();
    match class {
        // filled square
        0 => dx.abs() <= 0.8 && dy.abs() <= 0.8,
        // filled disc
        1 => r <= 0.9,
        // ring
        2 => (0.55..=0.95).contains(&r),
        // plus sign
        3 => (dx.abs() <= 0.25 && dy.abs() <= 0.95) || (dy.abs() <= 0.25 && dx.abs() <= 0.95),
        // upward triangle
        4 => (-0.85..=0.85).contains(&dy) && dx.abs() <= (dy + 0.85) * 0.6,
        // horizontal stripes inside the disc
        5 => r <= 1.0 && ((dy * 2.5 + phase).rem_euclid(2.0) < 1.0),
        // vertical stripes inside the disc
        6 => r <= 1.0 && ((dx * 2.5 + phase).rem_euclid(2.0) < 1.0),
        // checkerboard inside the square
        7 => {
            dx.abs() <= 0.9
                && dy.abs() <= 0.9
                && (((dx * 2.2 + phase).floor() + (dy * 2.2 + phase).floor()) as i64).rem_euclid(2) == 0
        }
        // diagonal cross
        8 => r <= 1.0 && ((dx - dy).abs() <= 0.3 || (dx + dy).abs() <= 0.3),
        // hollow square frame
        _ => {
            let m = dx.abs().max(dy.abs());
            (0.6..=0.95).contains(&m)
        }
    }
}

/// `n` images of `classes` procedurally drawn shapes. Class identity is the
/// shape; position, size, grey level, a slight channel tint and pixel noise
/// are random nuisances. Labels cycle through the classes so
/// every prefix is balanced.
pub fn synthetic_shapes(n: usize, classes: usize, dims: [usize; 3], seed: u64) -> Result<Dataset> {
    let [c, h, w] = dims;
    if classes < 2 || classes > SHAPE_CLASSES {
        return Err(Error::config(format!(
            "synthetic classes must lie in 2..={SHAPE_CLASSES}"
        )));
    }
    if h < 8 || w < 8 {
        return Err(Error::config("synthetic images need at least 8x8 pixels"));
    }
    let per = c * h * w;
    let mut data = vec![0.0f32; n * per];
    let mut labels = Vec::with_capacity(n);
    for (i, img) in data.chunks_mut(per).enumerate() {
        let label = i % classes;
        labels.push(label);
        let mut rng = stream(seed, "synthetic", i as u64);
        let side = h.min(w) as f64;
        let radius = side * rng.random_range(0.22..0.36);
        let cy = rng.random_range(radius..h as f64 - radius);
        let cx = rng.random_range(radius..w as f64 - radius);
        let phase: f64 = rng.random_range(0.0..2.0);
        // Near-grey light-on-dark palette. Appearance cues that survive
        // colour jitter (hue, polarity, wide contrast range) would let two
        // views match without looking at the shape.
        let level: f64 = rng.random_range(0.05..0.35);
        let fg_level = level + rng.random_range(0.45..0.6);
        let bg: Vec<f64> = (0..c).map(|_| level + rng.random_range(-0.05..0.05)).collect();
        let fg: Vec<f64> = (0..c).map(|_| fg_level + rng.random_range(-0.05..0.05)).collect();
        let gain = rng.random_range(0.7..1.1);
        let noise = 0.05;
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / radius;
                let dx = (x as f64 + 0.5 - cx) / radius;
                let inside = shape_mask(label, dy, dx, phase);
                for ch in 0..c {
                    let base = if inside { fg[ch] } else { bg[ch] };
                    let v = gain * base + noise * rng.random_range(-1.0..1.0);
                    img[(ch * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Dataset::new(Tensor::new(&[n, c, h, w], data)?, labels, classes)
}
