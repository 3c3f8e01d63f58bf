//! Loss functions evaluated at each block head.
//!
//! Every loss is built on the tape so gradients flow back into the head and
//! block that produced the embeddings. [`LossParts`] also reports the two
//! components logged per step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 0.0051;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    BarlowTwins,
    Simclr,
    Vicreg,
    SupervisedCe,
}

/// Weights of the VicReg invariance, variance and covariance terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VicregCoeffs {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

impl Default for VicregCoeffs {
    fn default() -> Self {
        Self {
            invariance: 25.0,
            variance: 25.0,
            covariance: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the off-diagonal (redundancy) term.
    pub lambda: f64,
    /// Diagonal target of the cross-correlation.
    pub target: f64,
    /// Mean-center embedding columns before correlating.
    pub center: bool,
    pub temperature: f64,
    pub vicreg: VicregCoeffs,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::BarlowTwins,
            lambda: DEFAULT_LAMBDA,
            target: 1.0,
            center: true,
            temperature: 0.5,
            vicreg: VicregCoeffs::default(),
        }
    }
}

impl LossConfig {
    pub fn of(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.target > 0.0 && self.target <= 1.0) {
            return Err(Error::config(format!(
                "invariance target must lie in (0, 1], got {}",
                self.target
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        let v = self.vicreg;
        if [v.invariance, v.variance, v.covariance]
            .iter()
            .any(|c| !(*c >= 0.0 && c.is_finite()))
        {
            return Err(Error::config("VicReg coefficients must be finite and non-negative"));
        }
        Ok(())
    }
}

/// A scalar loss plus the values of its two logged components.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub invariance: f64,
    pub redundancy: f64,
}

fn check_pair<E: Element>(tape: &Tape<E>, za: Var, zb: Var) -> Result<(usize, usize)> {
    let (a, b) = (tape.shape(za), tape.shape(zb));
    if a.len() != 2 || a != b {
        return Err(Error::shape(format!(
            "embedding pair must be two equal [N, D] matrices, got {a:?} and {b:?}"
        )));
    }
    if a[0] < 2 {
        return Err(Error::shape(format!("need at least 2 examples, got {}", a[0])));
    }
    Ok((a[0], a[1]))
}

fn scalar_of<E: Element>(tape: &Tape<E>, v: Var) -> f64 {
    tape.value(v).data()[0].as_f64()
}

/// Prepares one view for correlation: optional (weighted) column centering,
/// then rows scaled by `sqrt(w)` so that plain inner products become
/// weighted sums.
fn prepare_view<E: Element>(tape: &mut Tape<E>, z: Var, center: bool, weights: Option<&[f64]>) -> Result<Var> {
    let n = tape.shape(z)[0];
    let Some(w) = weights else {
        return if center {
            let mean = tape.mean(z, &[0], true)?;
            tape.sub(z, mean)
        } else {
            Ok(z)
        };
    };
    let total: f64 = w.iter().sum();
    let mut z = z;
    if center {
        let norm = tape.constant(Tensor::from_fn(&[n, 1], |i| E::of(w[i] / total)));
        let weighted = tape.mul(z, norm)?;
        let mean = tape.sum(weighted, &[0], true)?;
        z = tape.sub(z, mean)?;
    }
    let root = tape.constant(Tensor::from_fn(&[n, 1], |i| E::of(w[i].sqrt())));
    tape.mul(z, root)
}

/// `[D, D]` matrix of column correlations between two `[N, D]` views.
///
/// Column norms below the tape epsilon are clamped; each clamp increments
/// [`Tape::clamp_events`].
pub fn cross_correlation<E: Element>(tape: &mut Tape<E>, za: Var, zb: Var, center: bool) -> Result<Var> {
    cross_correlation_weighted(tape, za, zb, center, None)
}

/// [`cross_correlation`] with non-negative per-example weights; a zero
/// weight removes the example entirely.
pub fn cross_correlation_weighted<E: Element>(
    tape: &mut Tape<E>,
    za: Var,
    zb: Var,
    center: bool,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let (n, _) = check_pair(tape, za, zb)?;
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::shape(format!("{} weights for {n} examples", w.len())));
        }
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config(
                "example weights must be non-negative with a positive sum",
            ));
        }
    }
    let a = prepare_view(tape, za, center, weights)?;
    let b = prepare_view(tape, zb, center, weights)?;
    let at = tape.transpose(a)?;
    let num = tape.matmul(at, b)?;
    let eps = tape.eps();
    let ss_a = column_sumsq(tape, a, eps)?;
    let ss_b = column_sumsq(tape, b, eps)?;
    let ss_a = tape.transpose(ss_a)?;
    // root of the product rather than product of roots keeps exact cases exact
    let outer = tape.matmul(ss_a, ss_b)?;
    let denom = tape.sqrt(outer);
    tape.div(num, denom)
}

fn column_sumsq<E: Element>(tape: &mut Tape<E>, z: Var, eps: E) -> Result<Var> {
    let sq = tape.square(z);
    let ss = tape.sum(sq, &[0], true)?;
    Ok(tape.clamp_min(ss, eps * eps))
}

/// `sum_i (t_i - C_ii)^2 + lambda * sum_{i != j} C_ij^2` for a square `C`.
pub fn barlow_twins<E: Element>(tape: &mut Tape<E>, c: Var, lambda: f64, targets: &[f64]) -> Result<LossParts> {
    let d = match *tape.shape(c) {
        [r, k] if r == k => r,
        ref s => return Err(Error::shape(format!("correlation matrix must be square, got {s:?}"))),
    };
    if targets.len() != d {
        return Err(Error::shape(format!("{} targets for {d} dimensions", targets.len())));
    }
    let eye = tape.constant(Tensor::eye(d));
    let off_mask = tape.constant(Tensor::from_fn(&[d, d], |i| {
        if i / d == i % d {
            E::zero()
        } else {
            E::one()
        }
    }));
    let tau = tape.constant(Tensor::from_fn(&[d], |i| E::of(targets[i])));

    let on = tape.mul(c, eye)?;
    let diag = tape.sum(on, &[1], false)?;
    let gap = tape.sub(tau, diag)?;
    let gap = tape.square(gap);
    let inv = tape.sum_all(gap)?;

    let off = tape.mul(c, off_mask)?;
    let off = tape.square(off);
    let red = tape.sum_all(off)?;
    let scaled = tape.mul_scalar(red, E::of(lambda));
    let total = tape.add(inv, scaled)?;
    Ok(LossParts {
        total,
        invariance: scalar_of(tape, inv),
        redundancy: scalar_of(tape, red),
    })
}

/// Normalized-temperature cross-entropy over the `2N` embeddings of both
/// views, each example's other view being its positive.
///
/// Reported components: the mean negative positive-pair logit (invariance)
/// and the mean log-partition (redundancy); they sum to the loss.
pub fn simclr<E: Element>(tape: &mut Tape<E>, za: Var, zb: Var, temperature: f64) -> Result<LossParts> {
    let (n, _) = check_pair(tape, za, zb)?;
    let m = 2 * n;
    let z = tape.concat(&[za, zb])?;
    let eps = tape.eps();
    let sq = tape.square(z);
    let ss = tape.sum(sq, &[1], true)?;
    let ss = tape.clamp_min(ss, eps * eps);
    let norm = tape.sqrt(ss);
    let unit = tape.div(z, norm)?;
    let unit_t = tape.transpose(unit)?;
    let sim = tape.matmul(unit, unit_t)?;
    let logits = tape.mul_scalar(sim, E::of(1.0 / temperature));
    let mask = tape.constant(Tensor::from_fn(&[m, m], |i| {
        if i / m == i % m {
            E::of(-1e9)
        } else {
            E::zero()
        }
    }));
    let logits = tape.add(logits, mask)?;
    let logp = tape.log_softmax(logits)?;
    let positive = |i: usize| (i + n) % m;
    let pick = Tensor::from_fn(&[m, m], |i| if i % m == positive(i / m) { E::one() } else { E::zero() });
    let pick_v = tape.constant(pick.clone());
    let chosen = tape.mul(logp, pick_v)?;
    let sum = tape.sum_all(chosen)?;
    let total = tape.mul_scalar(sum, E::of(-1.0 / m as f64));

    let lv = tape.value(logits);
    let pos_logit: f64 = (0..m).map(|i| lv.data()[i * m + positive(i)].as_f64()).sum::<f64>() / m as f64;
    let loss = scalar_of(tape, total);
    Ok(LossParts {
        total,
        invariance: -pos_logit,
        redundancy: loss + pos_logit,
    })
}

/// Invariance, variance and covariance regularization.
///
/// The variance term adds the mean hinge `max(0, 1 - std_j)` of each view;
/// the covariance term adds, per view, the squared off-diagonal covariances
/// divided by `D`. Reported components: the weighted invariance term and the
/// weighted sum of the other two.
pub fn vicreg<E: Element>(tape: &mut Tape<E>, za: Var, zb: Var, coeffs: VicregCoeffs) -> Result<LossParts> {
    let (n, d) = check_pair(tape, za, zb)?;
    let diff = tape.sub(za, zb)?;
    let diff = tape.square(diff);
    let inv = tape.mean_all(diff)?;
    let inv = tape.mul_scalar(inv, E::of(coeffs.invariance));

    let off_mask = tape.constant(Tensor::from_fn(&[d, d], |i| {
        if i / d == i % d {
            E::zero()
        } else {
            E::one()
        }
    }));
    let mut reg = Vec::new();
    for z in [za, zb] {
        let mean = tape.mean(z, &[0], true)?;
        let c = tape.sub(z, mean)?;
        let sq = tape.square(c);
        let ss = tape.sum(sq, &[0], false)?;
        let var = tape.mul_scalar(ss, E::of(1.0 / (n as f64 - 1.0)));
        let var = tape.add_scalar(var, E::of(1e-12));
        let std = tape.sqrt(var);
        let short = tape.neg(std);
        let short = tape.add_scalar(short, E::one());
        let hinge = tape.relu(short);
        let hinge = tape.mean_all(hinge)?;
        reg.push(tape.mul_scalar(hinge, E::of(coeffs.variance)));

        let ct = tape.transpose(c)?;
        let cov = tape.matmul(ct, c)?;
        let cov = tape.mul_scalar(cov, E::of(1.0 / (n as f64 - 1.0)));
        let off = tape.mul(cov, off_mask)?;
        let off = tape.square(off);
        let off = tape.sum_all(off)?;
        reg.push(tape.mul_scalar(off, E::of(coeffs.covariance / d as f64)));
    }
    let mut rest = reg[0];
    for &r in &reg[1..] {
        rest = tape.add(rest, r)?;
    }
    let total = tape.add(inv, rest)?;
    Ok(LossParts {
        total,
        invariance: scalar_of(tape, inv),
        redundancy: scalar_of(tape, rest),
    })
}

/// Mean (or weighted mean) negative log-likelihood of `labels` under
/// `[N, K]` logits.
pub fn cross_entropy<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<LossParts> {
    let (n, k) = match *tape.shape(logits) {
        [n, k] => (n, k),
        ref s => return Err(Error::shape(format!("logits must be [N, K], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label: bad, classes: k });
    }
    let w: Vec<f64> = match weights {
        Some(w) if w.len() != n => return Err(Error::shape(format!("{} weights for {n} rows", w.len()))),
        Some(w) => w.to_vec(),
        None => vec![1.0; n],
    };
    let total_w: f64 = w.iter().sum();
    if total_w <= 0.0 {
        return Err(Error::config("example weights must have a positive sum"));
    }
    let logp = tape.log_softmax(logits)?;
    let pick = tape.constant(Tensor::from_fn(&[n, k], |i| {
        if labels[i / k] == i % k {
            E::of(w[i / k])
        } else {
            E::zero()
        }
    }));
    let chosen = tape.mul(logp, pick)?;
    let sum = tape.sum_all(chosen)?;
    let total = tape.mul_scalar(sum, E::of(-1.0 / total_w));
    let value = scalar_of(tape, total);
    Ok(LossParts {
        total,
        invariance: value,
        redundancy: 0.0,
    })
}

/// Dispatches on `cfg.kind` for a pair of projector outputs. `weights`
/// (routing) are supported by the Barlow Twins and supervised losses only.
pub fn block_loss<E: Element>(
    tape: &mut Tape<E>,
    cfg: &LossConfig,
    za: Var,
    zb: Var,
    labels: Option<&[usize]>,
    weights: Option<&[f64]>,
) -> Result<LossParts> {
    match cfg.kind {
        LossKind::BarlowTwins => {
            let c = cross_correlation_weighted(tape, za, zb, cfg.center, weights)?;
            let d = tape.shape(c)[0];
            barlow_twins(tape, c, cfg.lambda, &vec![cfg.target; d])
        }
        LossKind::SupervisedCe => {
            let labels = labels.ok_or_else(|| Error::config("the supervised loss needs labels"))?;
            let a = cross_entropy(tape, za, labels, weights)?;
            let b = cross_entropy(tape, zb, labels, weights)?;
            let sum = tape.add(a.total, b.total)?;
            let total = tape.mul_scalar(sum, E::of(0.5));
            let v = scalar_of(tape, total);
            Ok(LossParts {
                total,
                invariance: v,
                redundancy: 0.0,
            })
        }
        kind if weights.is_some() => Err(Error::config(format!(
            "example weighting is not defined for the {kind:?} loss"
        ))),
        LossKind::Simclr => simclr(tape, za, zb, cfg.temperature),
        LossKind::Vicreg => vicreg(tape, za, zb, cfg.vicreg),
    }
}

/// Per-example disagreement between two views: mean squared difference of
/// column-standardized embeddings. Used to rank examples for routing.
pub fn view_disagreement<E: Element>(za: &Tensor<E>, zb: &Tensor<E>) -> Result<Vec<f64>> {
    if za.shape() != zb.shape() || za.ndim() != 2 {
        return Err(Error::shape(format!(
            "embedding pair must be two equal [N, D] matrices, got {:?} and {:?}",
            za.shape(),
            zb.shape()
        )));
    }
    let (n, d) = (za.shape()[0], za.shape()[1]);
    let standardize = |z: &Tensor<E>| {
        let x = z.to_f64_vec();
        let mut out = x.clone();
        for j in 0..d {
            let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = (var + 1e-12).sqrt();
            for i in 0..n {
                out[i * d + j] = (x[i * d + j] - mean) / sd;
            }
        }
        out
    };
    let (a, b) = (standardize(za), standardize(zb));
    Ok((0..n)
        .map(|i| (0..d).map(|j| (a[i * d + j] - b[i * d + j]).powi(2)).sum::<f64>() / d as f64)
        .collect())
}

/// Per-example cross-entropy of `[N, K]` logits, outside any tape.
pub fn per_example_cross_entropy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<Vec<f64>> {
    let [n, k] = *logits.shape() else {
        return Err(Error::shape(format!("logits must be [N, K], got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    let x = logits.to_f64_vec();
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l >= k {
                return Err(Error::Label { label: l, classes: k });
            }
            let row = &x[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            Ok(lse - row[l])
        })
        .collect()
}
