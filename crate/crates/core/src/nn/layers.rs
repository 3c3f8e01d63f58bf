use rand::Rng as _;

use super::params::{BufferId, ParamId, ParamKind, ParamStore, Session};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{ConvGeometry, Element, Tensor, Var};

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform<E: Element>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| E::of(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Square kernel with "same" padding for odd sizes.
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Self {
        let cg = in_channels / groups.max(1);
        let shape = [out_channels, cg, kernel, kernel];
        let w = fan_in_uniform(&shape, cg * kernel * kernel, rng);
        let weight = store.add_param(format!("{name}/weight"), ParamKind::Weight, w);
        Self {
            weight,
            geom: ConvGeometry {
                stride,
                padding: kernel / 2,
                groups,
            },
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        s.tape.conv2d(x, w, self.geom)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight]
    }
}

/// How a batch-norm layer treats the current batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running statistics.
    #[default]
    Train,
    /// Normalize with batch statistics; running statistics stay bitwise fixed.
    TrainStatsFrozen,
    /// Normalize with running statistics only.
    Eval,
}

/// Batch normalization over axis 1 of `[N, C, ...]` inputs; serves both the
/// 2-D (convolutional) and 1-D (projector) cases.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize) -> Self {
        Self::with_eps(store, name, channels, BN_EPS)
    }

    pub fn with_eps<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize, eps: f64) -> Self {
        Self {
            gamma: store.add_param(format!("{name}/gamma"), ParamKind::BnScale, Tensor::ones(&[channels])),
            beta: store.add_param(format!("{name}/beta"), ParamKind::BnShift, Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}/running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}/running_var"), Tensor::ones(&[channels])),
            momentum: BN_MOMENTUM,
            eps,
        }
    }

    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var, mode: BnMode) -> Result<Var> {
        let normalized = match mode {
            BnMode::Train | BnMode::TrainStatsFrozen => {
                let (xhat, mean, var) = s.tape.batch_norm(x, E::of(self.eps))?;
                if mode == BnMode::Train {
                    let shape = s.tape.shape(x);
                    let m = shape[0] * shape[2..].iter().product::<usize>();
                    let unbias = E::of(m as f64 / (m as f64 - 1.0));
                    let mom = E::of(self.momentum);
                    let keep = E::one() - mom;
                    let rm = s.store_mut().buffer_mut(self.running_mean);
                    for (r, &b) in rm.data_mut().iter_mut().zip(&mean) {
                        *r = keep * *r + mom * b;
                    }
                    let rv = s.store_mut().buffer_mut(self.running_var);
                    for (r, &b) in rv.data_mut().iter_mut().zip(&var) {
                        *r = keep * *r + mom * b * unbias;
                    }
                }
                xhat
            }
            BnMode::Eval => {
                let eps = E::of(self.eps);
                let rm = s.store().buffer(self.running_mean).clone();
                let rv = s.store().buffer(self.running_var);
                let inv = rv.map(|v| E::one() / (v + eps).sqrt());
                let shift = Tensor::from_fn(rm.shape(), |i| -rm.data()[i] * inv.data()[i]);
                let (inv, shift) = (s.tape.constant(inv), s.tape.constant(shift));
                s.tape.channel_affine(x, inv, shift)?
            }
        };
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.tape.channel_affine(normalized, g, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// `x W (+ b)` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = fan_in_uniform(&[in_features, out_features], in_features, rng);
        let weight = store.add_param(format!("{name}/weight"), ParamKind::Weight, w);
        let bias = bias.then(|| {
            let b = fan_in_uniform(&[out_features], in_features, rng);
            store.add_param(format!("{name}/bias"), ParamKind::Bias, b)
        });
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.weight];
        p.extend(self.bias);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn batch_norm_train_normalizes_batch() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::with_eps(&mut store, "bn", 1, 0.0);
        let mut s = Session::new(&mut store);
        let x = s.tape.constant(Tensor::from_f64(&[2, 1, 1, 1], &[1.0, 3.0]).unwrap());
        let y = bn.forward(&mut s, x, BnMode::Train).unwrap();
        assert_eq!(s.tape.value(y).data(), &[-1.0, 1.0]);
        drop(s);
        // running stats moved toward mean 2, unbiased var 2
        assert_eq!(store.buffer(bn.running_mean).data(), &[0.2]);
        assert!((store.buffer(bn.running_var).data()[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_eval_identity_at_init() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::with_eps(&mut store, "bn", 2, 0.0);
        let mut s = Session::new(&mut store);
        let input = Tensor::from_f64(&[1, 2, 1, 2], &[0.5, -3.0, 7.0, 1.25]).unwrap();
        let x = s.tape.constant(input.clone());
        let y = bn.forward(&mut s, x, BnMode::Eval).unwrap();
        assert_eq!(s.tape.value(y), &input);
    }

    #[test]
    fn batch_norm_frozen_stats_untouched() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        store.buffer_mut(bn.running_mean).data_mut()[1] = 0.3;
        let before = store.checksum();
        let mut s = Session::new(&mut store);
        let x = s.tape.constant(Tensor::from_fn(&[4, 3, 2, 2], |i| (i as f64).sin()));
        bn.forward(&mut s, x, BnMode::TrainStatsFrozen).unwrap();
        drop(s);
        assert_eq!(store.checksum(), before);
    }

    #[test]
    fn batch_norm_train_needs_two_values() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut s = Session::new(&mut store);
        let x = s.tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        assert!(bn.forward(&mut s, x, BnMode::Train).is_err());
    }

    #[test]
    fn linear_shapes_and_bias() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = stream(1, "init", 0);
        let lin = Linear::new(&mut store, "fc", 4, 3, true, &mut rng);
        assert_eq!(store.param(lin.weight).value.shape(), &[4, 3]);
        let mut s = Session::new(&mut store);
        let x = s.tape.constant(Tensor::ones(&[5, 4]));
        let y = lin.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.shape(y), &[5, 3]);
    }
}
