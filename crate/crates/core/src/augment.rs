//! Two-view image augmentation and per-block augmentation schedules.
//!
//! Images are `[C, H, W]` tensors with values in `[0, 1]`. Every transform
//! clamps its output back into that range. Colour transforms that need RGB
//! (saturation, hue, grayscale) leave other channel counts untouched.

use rand::{Rng as _, RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

pub type Image = Tensor<f32>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Transform {
    /// Random area fraction and aspect ratio, resized back to full size.
    ResizedCrop {
        scale: [f64; 2],
        ratio: [f64; 2],
    },
    HorizontalFlip,
    /// Strength `s` draws a factor from `[1 - s, 1 + s]` (hue: shift in
    /// `[-s, s]` turns); components run in random order.
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    Grayscale,
    GaussianBlur {
        sigma: [f64; 2],
        radius: usize,
    },
    Solarize {
        threshold: f64,
    },
}

/// A transform applied with probability `p[0]` to the first view and
/// `p[1]` to the second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub transform: Transform,
    pub p: [f64; 2],
}

impl Step {
    pub fn always(transform: Transform) -> Self {
        Self {
            transform,
            p: [1.0, 1.0],
        }
    }

    pub fn with_p(transform: Transform, p: f64) -> Self {
        Self { transform, p: [p, p] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewPipeline {
    pub steps: Vec<Step>,
}

pub fn default_jitter() -> Transform {
    Transform::ColorJitter {
        brightness: 0.4,
        contrast: 0.4,
        saturation: 0.2,
        hue: 0.1,
    }
}

impl ViewPipeline {
    pub fn identity() -> Self {
        Self { steps: vec![] }
    }

    /// Crop, flip, jitter, grayscale, then blur and solarization with
    /// different probabilities for the two views.
    pub fn full() -> Self {
        Self {
            steps: vec![
                Step::always(Transform::ResizedCrop {
                    scale: [0.08, 1.0],
                    ratio: [0.75, 4.0 / 3.0],
                }),
                Step::with_p(Transform::HorizontalFlip, 0.5),
                Step::with_p(default_jitter(), 0.8),
                Step::with_p(Transform::Grayscale, 0.2),
                Step {
                    transform: Transform::GaussianBlur {
                        sigma: [0.1, 2.0],
                        radius: 1,
                    },
                    p: [1.0, 0.1],
                },
                Step {
                    transform: Transform::Solarize { threshold: 0.5 },
                    p: [0.0, 0.2],
                },
            ],
        }
    }

    pub fn jitter_only() -> Self {
        Self {
            steps: vec![Step::with_p(default_jitter(), 0.8)],
        }
    }

    /// Jitter plus mild crops covering 60-100% of the image.
    pub fn small_crops() -> Self {
        Self {
            steps: vec![
                Step::always(Transform::ResizedCrop {
                    scale: [0.6, 1.0],
                    ratio: [0.75, 4.0 / 3.0],
                }),
                Step::with_p(default_jitter(), 0.8),
            ],
        }
    }

    pub fn has_crop(&self) -> bool {
        self.steps
            .iter()
            .any(|s| matches!(s.transform, Transform::ResizedCrop { .. }))
    }

    pub fn validate(&self) -> Result<()> {
        for step in &self.steps {
            if step.p.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::config(format!(
                    "probabilities must lie in [0, 1], got {:?}",
                    step.p
                )));
            }
            match &step.transform {
                Transform::ResizedCrop { scale, ratio } => {
                    if !(0.0 < scale[0] && scale[0] <= scale[1] && scale[1] <= 1.0) {
                        return Err(Error::config(format!("crop scale range {scale:?} is invalid")));
                    }
                    if !(0.0 < ratio[0] && ratio[0] <= ratio[1]) {
                        return Err(Error::config(format!("crop ratio range {ratio:?} is invalid")));
                    }
                }
                Transform::ColorJitter {
                    brightness,
                    contrast,
                    saturation,
                    hue,
                } => {
                    if [brightness, contrast, saturation]
                        .iter()
                        .any(|s| !(0.0..=1.0).contains(*s))
                        || !(0.0..=0.5).contains(hue)
                    {
                        return Err(Error::config("jitter strengths must lie in [0, 1] (hue in [0, 0.5])"));
                    }
                }
                Transform::GaussianBlur { sigma, .. } => {
                    if !(0.0 < sigma[0] && sigma[0] <= sigma[1]) {
                        return Err(Error::config(format!("blur sigma range {sigma:?} is invalid")));
                    }
                }
                Transform::HorizontalFlip | Transform::Grayscale | Transform::Solarize { .. } => {}
            }
        }
        Ok(())
    }

    /// One view: `which` selects the per-view probability column.
    pub fn apply(&self, image: &Image, which: usize, rng: &mut Rng) -> Result<Image> {
        let [_, h, w] = dims(image)?;
        if h < 2 || w < 2 {
            return Err(Error::config(format!(
                "image {h}x{w} is smaller than the 2x2 crop floor"
            )));
        }
        let mut img = image.clone();
        for step in &self.steps {
            // Draw the coin even at p in {0, 1} so streams stay aligned
            // across configurations.
            let coin: f64 = rng.random();
            if coin >= step.p[which] {
                continue;
            }
            img = match &step.transform {
                Transform::ResizedCrop { scale, ratio } => resized_crop(&img, *scale, *ratio, rng),
                Transform::HorizontalFlip => hflip(&img),
                Transform::ColorJitter {
                    brightness,
                    contrast,
                    saturation,
                    hue,
                } => color_jitter(&img, [*brightness, *contrast, *saturation, *hue], rng),
                Transform::Grayscale => grayscale(&img),
                Transform::GaussianBlur { sigma, radius } => {
                    let s = rng.random_range(sigma[0]..=sigma[1]);
                    gaussian_blur(&img, s, *radius)
                }
                Transform::Solarize { threshold } => solarize(&img, *threshold),
            };
        }
        Ok(img)
    }
}

fn dims(img: &Image) -> Result<[usize; 3]> {
    match *img.shape() {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(Error::shape(format!("images must be [C, H, W], got {s:?}"))),
    }
}

/// Two independently augmented views of `image`. Each view gets its own
/// child stream seeded from `rng`.
pub fn generate_views(image: &Image, pipeline: &ViewPipeline, rng: &mut Rng) -> Result<(Image, Image)> {
    let mut ra = Rng::seed_from_u64(rng.next_u64());
    let mut rb = Rng::seed_from_u64(rng.next_u64());
    Ok((pipeline.apply(image, 0, &mut ra)?, pipeline.apply(image, 1, &mut rb)?))
}

/// Views for a batch `[N, C, H, W]`. Image `i` draws from stream
/// `(seed, name, keys[i])`, so the result does not depend on how the work
/// is split across threads.
pub fn augment_batch(
    batch: &Tensor<f32>,
    keys: &[u64],
    pipeline: &ViewPipeline,
    seed: u64,
    name: &str,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let [n, c, h, w] = *batch.shape() else {
        return Err(Error::shape(format!(
            "batch must be [N, C, H, W], got {:?}",
            batch.shape()
        )));
    };
    if keys.len() != n {
        return Err(Error::shape(format!("{} stream keys for {n} images", keys.len())));
    }
    let per = c * h * w;
    let views: Vec<(Image, Image)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let img = Tensor::new(&[c, h, w], batch.data()[i * per..(i + 1) * per].to_vec())?;
            generate_views(&img, pipeline, &mut stream(seed, name, keys[i]))
        })
        .collect::<Result<_>>()?;
    let (a, b): (Vec<_>, Vec<_>) = views.into_iter().unzip();
    Ok((Tensor::stack(&a)?, Tensor::stack(&b)?))
}

/// Which pipeline each training block uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum AugmentationSchedule {
    Uniform(ViewPipeline),
    PerBlock(Vec<ViewPipeline>),
    /// Jitter only for block 1, jitter with small crops for block 2, the
    /// full pipeline from block 3 on.
    Adaptive,
}

impl Default for AugmentationSchedule {
    fn default() -> Self {
        Self::Uniform(ViewPipeline::full())
    }
}

impl AugmentationSchedule {
    /// Pipeline of training block `b` (0-based).
    pub fn for_block(&self, b: usize) -> Result<ViewPipeline> {
        match self {
            Self::Uniform(p) => Ok(p.clone()),
            Self::PerBlock(list) => list
                .get(b)
                .cloned()
                .ok_or_else(|| Error::config(format!("augmentation schedule has no entry for block {}", b + 1))),
            Self::Adaptive => Ok(match b {
                0 => ViewPipeline::jitter_only(),
                1 => ViewPipeline::small_crops(),
                _ => ViewPipeline::full(),
            }),
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, Self::Uniform(_))
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        for b in 0..blocks {
            self.for_block(b)?.validate()?;
        }
        Ok(())
    }
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

pub fn hflip(img: &Image) -> Image {
    let [_, _, w] = *img.shape() else { unreachable!() };
    Tensor::from_fn(img.shape(), |i| {
        let x = i % w;
        img.data()[i - x + (w - 1 - x)]
    })
}

pub fn solarize(img: &Image, threshold: f64) -> Image {
    let t = threshold as f32;
    img.map(|v| if v >= t { 1.0 - v } else { v })
}

fn luma(img: &Image) -> Option<Vec<f32>> {
    let [c, h, w] = *img.shape() else { return None };
    if c != 3 {
        return None;
    }
    let p = h * w;
    let d = img.data();
    Some(
        (0..p)
            .map(|i| 0.299 * d[i] + 0.587 * d[p + i] + 0.114 * d[2 * p + i])
            .collect(),
    )
}

pub fn grayscale(img: &Image) -> Image {
    match luma(img) {
        Some(y) => {
            let p = y.len();
            Tensor::from_fn(img.shape(), |i| clamp01(y[i % p]))
        }
        None => img.clone(),
    }
}

fn blend(img: &Image, other: impl Fn(usize) -> f32, factor: f32) -> Image {
    Tensor::from_fn(img.shape(), |i| {
        clamp01(factor * img.data()[i] + (1.0 - factor) * other(i))
    })
}

pub fn adjust_brightness(img: &Image, factor: f32) -> Image {
    blend(img, |_| 0.0, factor)
}

pub fn adjust_contrast(img: &Image, factor: f32) -> Image {
    let mean = match luma(img) {
        Some(y) => y.iter().sum::<f32>() / y.len() as f32,
        None => img.data().iter().sum::<f32>() / img.numel() as f32,
    };
    blend(img, |_| mean, factor)
}

pub fn adjust_saturation(img: &Image, factor: f32) -> Image {
    match luma(img) {
        Some(y) => {
            let p = y.len();
            blend(img, |i| y[i % p], factor)
        }
        None => img.clone(),
    }
}

/// Rotates hue by `shift` turns.
pub fn adjust_hue(img: &Image, shift: f32) -> Image {
    let [c, h, w] = *img.shape() else { unreachable!() };
    if c != 3 {
        return img.clone();
    }
    let p = h * w;
    let d = img.data();
    let mut out = vec![0.0; 3 * p];
    for i in 0..p {
        let (r, g, b) = (d[i], d[p + i], d[2 * p + i]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        let mut hue = if delta == 0.0 {
            0.0
        } else if max == r {
            ((g - b) / delta).rem_euclid(6.0) / 6.0
        } else if max == g {
            ((b - r) / delta + 2.0) / 6.0
        } else {
            ((r - g) / delta + 4.0) / 6.0
        };
        let sat = if max == 0.0 { 0.0 } else { delta / max };
        hue = (hue + shift).rem_euclid(1.0);
        let (r2, g2, b2) = hsv_to_rgb(hue, sat, max);
        out[i] = clamp01(r2);
        out[p + i] = clamp01(g2);
        out[2 * p + i] = clamp01(b2);
    }
    Tensor::new(img.shape(), out).expect("same shape")
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation and hue in a random order; zero
/// strengths are skipped.
pub fn color_jitter(img: &Image, strengths: [f64; 4], rng: &mut Rng) -> Image {
    let mut order = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut out = img.clone();
    for k in order {
        let s = strengths[k];
        if s == 0.0 {
            continue;
        }
        out = if k == 3 {
            adjust_hue(&out, rng.random_range(-s..=s) as f32)
        } else {
            let f = rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32;
            match k {
                0 => adjust_brightness(&out, f),
                1 => adjust_contrast(&out, f),
                _ => adjust_saturation(&out, f),
            }
        };
    }
    out
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Image, sigma: f64, radius: usize) -> Image {
    let [c, h, w] = *img.shape() else { unreachable!() };
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if n == 1 {
            return 0;
        }
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let src = img.data();
    let mut tmp = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - r, w);
                    acc += kv * src[(ch * h + y) * w + xx] as f64;
                }
                tmp[(ch * h + y) * w + x] = acc as f32;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - r, h);
                    acc += kv * tmp[(ch * h + yy) * w + x] as f64;
                }
                out[(ch * h + y) * w + x] = clamp01(acc as f32);
            }
        }
    }
    Tensor::new(img.shape(), out).expect("same shape")
}

/// Bilinear resample of the window `(top, left, ch, cw)` to `oh x ow`,
/// half-pixel centers.
pub fn crop_resize(img: &Image, window: (f64, f64, f64, f64), oh: usize, ow: usize) -> Image {
    let [c, h, w] = *img.shape() else { unreachable!() };
    let (top, left, ch_, cw) = window;
    let d = img.data();
    let mut out = vec![0.0f32; c * oh * ow];
    for y in 0..oh {
        let sy = (top + (y as f64 + 0.5) * ch_ / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..ow {
            let sx = (left + (x as f64 + 0.5) * cw / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
                let top_row = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(ch * oh + y) * ow + x] = clamp01(top_row * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out).expect("sized")
}

/// Samples a crop window as torchvision's random-resized-crop does (ten
/// attempts, then a centred fallback) and resizes it back to full size.
pub fn resized_crop(img: &Image, scale: [f64; 2], ratio: [f64; 2], rng: &mut Rng) -> Image {
    let [_, h, w] = *img.shape() else { unreachable!() };
    let area = (h * w) as f64;
    let (lr0, lr1) = (ratio[0].ln(), ratio[1].ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale[0]..=scale[1]);
        let aspect = rng.random_range(lr0..=lr1).exp();
        let cw = (target * aspect).sqrt().round();
        let ch = (target / aspect).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w as f64 && ch <= h as f64 {
            let top = rng.random_range(0..=(h - ch as usize)) as f64;
            let left = rng.random_range(0..=(w - cw as usize)) as f64;
            return crop_resize(img, (top, left, ch, cw), h, w);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio[0] {
        ((w as f64 / ratio[0]).round(), w as f64)
    } else if in_ratio > ratio[1] {
        (h as f64, (h as f64 * ratio[1]).round())
    } else {
        (h as f64, w as f64)
    };
    let top = ((h as f64 - ch) / 2.0).floor();
    let left = ((w as f64 - cw) / 2.0).floor();
    crop_resize(img, (top, left, ch, cw), h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(h: usize, w: usize, seed: u64) -> Image {
        let mut r = stream(seed, "img", 0);
        Tensor::from_fn(&[3, h, w], |_| r.random::<f32>())
    }

    #[test]
    fn empty_pipeline_is_identity() {
        let img = rgb(6, 6, 1);
        let (a, b) = generate_views(&img, &ViewPipeline::identity(), &mut stream(0, "v", 0)).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn forced_flip_mirrors() {
        let img = Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = ViewPipeline {
            steps: vec![Step::always(Transform::HorizontalFlip)],
        };
        let (a, _) = generate_views(&img, &p, &mut stream(0, "v", 0)).unwrap();
        assert_eq!(a.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn full_pipeline_is_deterministic_and_in_range() {
        let img = rgb(16, 16, 2);
        let p = ViewPipeline::full();
        let v1 = generate_views(&img, &p, &mut stream(5, "v", 9)).unwrap();
        let v2 = generate_views(&img, &p, &mut stream(5, "v", 9)).unwrap();
        assert_eq!(v1, v2);
        assert_ne!(v1.0, v1.1);
        assert!(v1.0.data().iter().chain(v1.1.data()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_jitter_is_identity() {
        let img = rgb(5, 7, 3);
        let out = color_jitter(&img, [0.0; 4], &mut stream(0, "j", 0));
        assert_eq!(out, img);
    }

    #[test]
    fn full_size_crop_is_identity() {
        let img = rgb(8, 8, 4);
        assert_eq!(crop_resize(&img, (0.0, 0.0, 8.0, 8.0), 8, 8), img);
    }

    #[test]
    fn tiny_image_rejected() {
        let img = Tensor::<f32>::zeros(&[3, 1, 4]);
        assert!(generate_views(&img, &ViewPipeline::full(), &mut stream(0, "v", 0)).is_err());
    }

    #[test]
    fn adaptive_schedule_shape() {
        let s = AugmentationSchedule::Adaptive;
        assert!(!s.for_block(0).unwrap().has_crop());
        assert!(s.for_block(1).unwrap().has_crop());
        assert_eq!(s.for_block(2).unwrap(), s.for_block(3).unwrap());
        let per = AugmentationSchedule::PerBlock(vec![ViewPipeline::identity()]);
        assert!(per.for_block(1).is_err());
    }

    #[test]
    fn hue_full_turn_is_close_to_identity() {
        let img = rgb(4, 4, 6);
        let out = adjust_hue(&img, 1.0);
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_views_independent_of_thread_split() {
        let batch = Tensor::stack(&[rgb(8, 8, 1), rgb(8, 8, 2), rgb(8, 8, 3)]).unwrap();
        let p = ViewPipeline::full();
        let a = augment_batch(&batch, &[10, 11, 12], &p, 3, "aug").unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| augment_batch(&batch, &[10, 11, 12], &p, 3, "aug").unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn pipeline_round_trips_through_json() {
        let p = ViewPipeline::full();
        let json = serde_json::to_string(&p).unwrap();
        let back: ViewPipeline = serde_json::from_str(&json).unwrap();
        assert_eq!(p, back);
        let s: AugmentationSchedule = serde_json::from_str(r#""adaptive""#).unwrap();
        assert_eq!(s, AugmentationSchedule::Adaptive);
    }
}
