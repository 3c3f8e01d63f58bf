use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, BnMode, Linear};
use super::params::{ParamId, ParamStore, Session};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor, Var};

/// Layer sizes of the MLP that maps pooled block features to embeddings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorSpec {
    /// Number of affine layers.
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub hidden: usize,
    pub output: usize,
}

fn default_depth() -> usize {
    3
}

impl ProjectorSpec {
    pub fn new(hidden: usize, output: usize) -> Self {
        Self {
            depth: default_depth(),
            hidden,
            output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.output == 0 {
            return Err(Error::config("projector depth and widths must be positive"));
        }
        Ok(())
    }
}

/// Affine layers separated by batch norm and relu. In the supervised variant
/// the last layer carries a bias and produces class logits.
#[derive(Clone, Debug)]
pub struct Projector {
    hidden: Vec<(Linear, BatchNorm)>,
    last: Linear,
    input: usize,
}

impl Projector {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        input: usize,
        spec: &ProjectorSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::build(store, name, input, spec, false, rng)
    }

    /// Output width is `classes`, the final layer has a bias.
    pub fn classifier<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        input: usize,
        spec: &ProjectorSpec,
        classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let spec = ProjectorSpec {
            output: classes,
            ..spec.clone()
        };
        Self::build(store, name, input, &spec, true, rng)
    }

    fn build<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        input: usize,
        spec: &ProjectorSpec,
        last_bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        if input == 0 {
            return Err(Error::config("projector input width must be positive"));
        }
        let mut width = input;
        let mut hidden = Vec::with_capacity(spec.depth - 1);
        for i in 0..spec.depth - 1 {
            let lin = Linear::new(store, &format!("{name}/fc{}", i + 1), width, spec.hidden, false, rng);
            let bn = BatchNorm::new(store, &format!("{name}/bn{}", i + 1), spec.hidden);
            hidden.push((lin, bn));
            width = spec.hidden;
        }
        let last = Linear::new(
            store,
            &format!("{name}/fc{}", spec.depth),
            width,
            spec.output,
            last_bias,
            rng,
        );
        Ok(Self { hidden, last, input })
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn output_width(&self) -> usize {
        self.last.out_features
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var, bn: BnMode) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input {
            return Err(Error::shape(format!(
                "projector expects [N, {}], got {shape:?}",
                self.input
            )));
        }
        let mut h = x;
        for (lin, norm) in &self.hidden {
            h = lin.forward(s, h)?;
            h = norm.forward(s, h, bn)?;
            h = s.tape.relu(h);
        }
        self.last.forward(s, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for (lin, norm) in &self.hidden {
            p.extend(lin.params());
            p.extend(norm.params());
        }
        p.extend(self.last.params());
        p
    }

    /// Sets every affine weight to the identity (dims must be square) and
    /// every bias to zero.
    pub fn set_identity<E: Element>(&self, store: &mut ParamStore<E>) -> Result<()> {
        let lins = self.hidden.iter().map(|(l, _)| l).chain(std::iter::once(&self.last));
        for lin in lins {
            if lin.in_features != lin.out_features {
                return Err(Error::shape(format!(
                    "identity needs square layers, got {}x{}",
                    lin.in_features, lin.out_features
                )));
            }
            store.param_mut(lin.weight).value = Tensor::eye(lin.in_features);
            if let Some(b) = lin.bias {
                store.param_mut(b).value = Tensor::zeros(&[lin.out_features]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn identity_projector_passes_nonnegative_input() {
        let mut store = ParamStore::<f64>::new();
        let p = Projector::new(
            &mut store,
            "head1",
            4,
            &ProjectorSpec::new(4, 4),
            &mut stream(0, "init", 0),
        )
        .unwrap();
        p.set_identity(&mut store).unwrap();
        // eval-mode BN at init scales by 1/sqrt(1 + eps)
        let mut s = Session::new(&mut store);
        let input = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.25);
        let x = s.tape.constant(input.clone());
        let y = p.forward(&mut s, x, BnMode::Eval).unwrap();
        for (a, b) in s.tape.value(y).data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn shapes_and_depth() {
        let mut store = ParamStore::<f32>::new();
        let spec = ProjectorSpec {
            depth: 2,
            hidden: 8,
            output: 5,
        };
        let p = Projector::new(&mut store, "head1", 6, &spec, &mut stream(0, "init", 0)).unwrap();
        assert_eq!(p.depth(), 2);
        let mut s = Session::new(&mut store);
        let x = s.tape.constant(Tensor::ones(&[4, 6]));
        let y = p.forward(&mut s, x, BnMode::Train).unwrap();
        assert_eq!(s.tape.shape(y), &[4, 5]);
        let bad = s.tape.constant(Tensor::ones(&[4, 7]));
        assert!(matches!(p.forward(&mut s, bad, BnMode::Train), Err(Error::Shape(_))));
    }

    #[test]
    fn classifier_has_class_width_and_bias() {
        let mut store = ParamStore::<f32>::new();
        let p = Projector::classifier(
            &mut store,
            "head1",
            6,
            &ProjectorSpec::new(8, 64),
            10,
            &mut stream(0, "init", 0),
        )
        .unwrap();
        assert_eq!(p.output_width(), 10);
        assert!(store.find("head1/fc3/bias").is_some());
        assert!(store.find("head1/fc1/bias").is_none());
    }
}
