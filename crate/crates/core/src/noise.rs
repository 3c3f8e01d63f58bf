//! Gaussian perturbation of block inputs during training.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// One draw per element.
    #[default]
    Independent,
    /// One draw per `(n, h, w)` position, shared by every channel.
    SharedSpatial,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma: f64,
    #[serde(default)]
    pub mode: NoiseMode,
}

impl NoiseConfig {
    pub fn new(sigma: f64, mode: NoiseMode) -> Self {
        Self { sigma, mode }
    }

    pub fn is_active(&self) -> bool {
        self.sigma > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("noise sigma must be >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// The additive perturbation for a tensor of `shape` (`[N, C, ...]`).
pub fn noise_tensor<E: Element>(shape: &[usize], cfg: &NoiseConfig, rng: &mut Rng) -> Tensor<E> {
    let mut draw = || {
        E::of(
            cfg.sigma * {
                let z: f64 = StandardNormal.sample(rng);
                z
            },
        )
    };
    match cfg.mode {
        NoiseMode::Independent => Tensor::from_fn(shape, |_| draw()),
        NoiseMode::SharedSpatial => {
            let n = shape.first().copied().unwrap_or(1);
            let c = shape.get(1).copied().unwrap_or(1);
            let inner: usize = shape.iter().skip(2).product();
            let shared: Vec<E> = (0..n * inner).map(|_| draw()).collect();
            Tensor::from_fn(shape, |i| {
                let b = i / (c * inner);
                shared[b * inner + i % inner]
            })
        }
    }
}

/// `x + noise`; `sigma == 0` returns `x` unchanged.
pub fn inject_noise<E: Element>(x: &Tensor<E>, cfg: &NoiseConfig, rng: &mut Rng) -> Tensor<E> {
    if !cfg.is_active() {
        return x.clone();
    }
    let noise: Tensor<E> = noise_tensor(x.shape(), cfg, rng);
    Tensor::from_fn(x.shape(), |i| x.data()[i] + noise.data()[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_sigma_is_identity() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 4, 4], |i| i as f32 * 0.1);
        let y = inject_noise(
            &x,
            &NoiseConfig::new(0.0, NoiseMode::Independent),
            &mut stream(1, "n", 0),
        );
        assert_eq!(x, y);
    }

    #[test]
    fn shared_spatial_has_no_channel_variation() {
        let cfg = NoiseConfig::new(0.25, NoiseMode::SharedSpatial);
        let noise: Tensor<f64> = noise_tensor(&[3, 5, 4, 4], &cfg, &mut stream(2, "n", 0));
        for n in 0..3 {
            for p in 0..16 {
                let first = noise.at(&[n, 0, p / 4, p % 4]);
                assert_ne!(first, 0.0);
                for c in 1..5 {
                    assert_eq!(noise.at(&[n, c, p / 4, p % 4]), first);
                }
            }
        }
        // distinct positions draw distinct values
        assert_ne!(noise.at(&[0, 0, 0, 0]), noise.at(&[0, 0, 0, 1]));
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(NoiseConfig::new(-0.1, NoiseMode::Independent).validate().is_err());
    }
}
