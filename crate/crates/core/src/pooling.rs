//! Reduction of a block's `[N, C, H, W]` activation to the flat vector fed
//! to its projector.
//!
//! ```
//! use bwssl::pooling::{gsp, lsp};
//! use bwssl::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| (i + 1) as f64));
//! let bins = lsp(&mut tape, x, 2).unwrap();
//! assert_eq!(tape.value(bins).data(), &[3.5, 5.5, 11.5, 13.5]);
//! let mean = gsp(&mut tape, x).unwrap();
//! assert_eq!(tape.value(mean).data(), &[8.5]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingKind {
    #[default]
    Gsp,
    Lsp,
    CbeGsp,
    CbeL2,
    CbeSqrt,
}

impl PoolingKind {
    pub fn is_expanded(self) -> bool {
        matches!(self, Self::CbeGsp | Self::CbeL2 | Self::CbeSqrt)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingConfig {
    #[serde(default)]
    pub kind: PoolingKind,
    /// Side of the square LSP bin grid. `None` picks the grid from the
    /// projector input width, see [`lsp_grid_for`].
    #[serde(default)]
    pub bins: Option<usize>,
    /// Channels after the CbE expansion convolution.
    #[serde(default)]
    pub expansion: usize,
    #[serde(default = "one")]
    pub filter: usize,
    #[serde(default = "one")]
    pub groups: usize,
}

fn one() -> usize {
    1
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self::gsp()
    }
}

impl PoolingConfig {
    pub fn gsp() -> Self {
        Self {
            kind: PoolingKind::Gsp,
            bins: None,
            expansion: 0,
            filter: 1,
            groups: 1,
        }
    }

    pub fn lsp(bins: usize) -> Self {
        Self {
            kind: PoolingKind::Lsp,
            bins: Some(bins),
            ..Self::gsp()
        }
    }

    pub fn cbe(kind: PoolingKind, expansion: usize) -> Self {
        Self {
            kind,
            expansion,
            ..Self::gsp()
        }
    }
}

/// Largest grid `g` dividing both spatial dims with `channels * g * g <=
/// target`; falls back to 1.
pub fn lsp_grid_for(channels: usize, h: usize, w: usize, target: usize) -> usize {
    (1..=h.min(w))
        .filter(|g| h % g == 0 && w % g == 0 && channels * g * g <= target)
        .max()
        .unwrap_or(1)
}

/// Per-channel spatial mean: `[N, C, H, W] -> [N, C]`.
pub fn gsp<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    check_4d(tape, x)?;
    tape.mean(x, &[2, 3], false)
}

/// Means over a `g x g` grid of spatial bins: `[N, C, H, W] -> [N, g*g*C]`,
/// bins in row-major order, channels contiguous within each bin.
pub fn lsp<E: Element>(tape: &mut Tape<E>, x: Var, g: usize) -> Result<Var> {
    let [n, c, h, w] = check_4d(tape, x)?;
    if g == 0 || h % g != 0 || w % g != 0 {
        return Err(Error::config(format!(
            "a {g}x{g} bin grid does not divide a {h}x{w} map"
        )));
    }
    let split = tape.reshape(x, &[n, c, g, h / g, g, w / g])?;
    let means = tape.mean(split, &[3, 5], false)?;
    let ordered = tape.permute(means, &[0, 2, 3, 1])?;
    tape.reshape(ordered, &[n, g * g * c])
}

/// Per-channel root-mean-square over spatial positions.
pub fn rms_pool<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    check_4d(tape, x)?;
    let sq = tape.square(x);
    let ms = tape.mean(sq, &[2, 3], false)?;
    Ok(tape.sqrt(ms))
}

/// Spatial mean of `sign(v) * sqrt(|v|)`.
pub fn signed_sqrt_pool<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    check_4d(tape, x)?;
    let r = tape.signed_sqrt(x);
    tape.mean(r, &[2, 3], false)
}

fn check_4d<E: Element>(tape: &Tape<E>, x: Var) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [n, c, h, w] if h > 0 && w > 0 => Ok([n, c, h, w]),
        ref s => Err(Error::shape(format!("pooling expects [N, C, H, W], got {s:?}"))),
    }
}

/// A configured pooling stage; CbE variants own a trainable expansion
/// convolution.
#[derive(Clone, Debug)]
pub struct Pooler {
    kind: PoolingKind,
    bins: usize,
    expand: Option<Conv2d>,
    out_width: usize,
}

impl Pooler {
    /// `block_shape` is the block's `[C, H, W]` output; `target` is the
    /// preferred feature width used to size an unspecified LSP grid.
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        cfg: &PoolingConfig,
        block_shape: [usize; 3],
        target: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let [c, h, w] = block_shape;
        let (bins, expand, out_width) = match cfg.kind {
            PoolingKind::Gsp => (1, None, c),
            PoolingKind::Lsp => {
                let g = cfg.bins.unwrap_or_else(|| lsp_grid_for(c, h, w, target));
                if g == 0 || h % g != 0 || w % g != 0 {
                    return Err(Error::config(format!(
                        "a {g}x{g} bin grid does not divide a {h}x{w} map"
                    )));
                }
                (g, None, c * g * g)
            }
            _ => {
                let e = cfg.expansion;
                if e < c {
                    return Err(Error::config(format!(
                        "expansion width {e} is below the block width {c}"
                    )));
                }
                if cfg.filter % 2 == 0 {
                    return Err(Error::config(format!(
                        "expansion filter must be odd, got {}",
                        cfg.filter
                    )));
                }
                if cfg.groups == 0 || c % cfg.groups != 0 || e % cfg.groups != 0 {
                    return Err(Error::config(format!(
                        "{} groups do not split {c} -> {e} channels",
                        cfg.groups
                    )));
                }
                let conv = Conv2d::new(store, &format!("{name}/expand"), c, e, cfg.filter, 1, cfg.groups, rng);
                (1, Some(conv), e)
            }
        };
        Ok(Self {
            kind: cfg.kind,
            bins,
            expand,
            out_width,
        })
    }

    pub fn kind(&self) -> PoolingKind {
        self.kind
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.expand.iter().flat_map(|c| c.params()).collect()
    }

    /// Sets a 1x1, ungrouped, square expansion to the identity.
    pub fn set_identity_expansion<E: Element>(&self, store: &mut ParamStore<E>) -> Result<()> {
        let Some(conv) = &self.expand else {
            return Err(Error::config("pooling has no expansion convolution"));
        };
        if conv.kernel != 1 || conv.geom.groups != 1 || conv.in_channels != conv.out_channels {
            return Err(Error::config("identity expansion needs a square 1x1 ungrouped kernel"));
        }
        let c = conv.in_channels;
        store.param_mut(conv.weight).value = Tensor::eye(c).reshape(&[c, c, 1, 1])?;
        Ok(())
    }

    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let x = match &self.expand {
            Some(conv) => conv.forward(s, x)?,
            None => x,
        };
        let tape = &mut s.tape;
        match self.kind {
            PoolingKind::Gsp | PoolingKind::CbeGsp => gsp(tape, x),
            PoolingKind::Lsp => lsp(tape, x, self.bins),
            PoolingKind::CbeL2 => rms_pool(tape, x),
            PoolingKind::CbeSqrt => signed_sqrt_pool(tape, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::Rng as _;
        let mut rng = stream(seed, "x", 0);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gsp_of_small_map() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = gsp(&mut t, x).unwrap();
        assert_eq!(t.value(y).data(), &[2.5]);
    }

    #[test]
    fn lsp_single_bin_equals_gsp() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(rand_input(&[3, 5, 4, 6], 1));
        let a = gsp(&mut t, x).unwrap();
        let b = lsp(&mut t, x, 1).unwrap();
        assert_eq!(t.value(a), t.value(b));
    }

    #[test]
    fn lsp_orders_bins_then_channels() {
        let mut t = Tape::<f64>::new();
        // channel 0 holds 0, channel 1 holds 100 + position
        let x = t.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| {
            if i < 4 {
                0.0
            } else {
                100.0 + (i - 4) as f64
            }
        }));
        let y = lsp(&mut t, x, 2).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 100.0, 0.0, 101.0, 0.0, 102.0, 0.0, 103.0]);
    }

    #[test]
    fn lsp_rejects_indivisible_grid() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(lsp(&mut t, x, 2), Err(Error::Config(_))));
    }

    #[test]
    fn rms_of_constant_is_constant() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(&[2, 3, 4, 4], 1.5));
        let y = rms_pool(&mut t, x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn identity_expansion_matches_gsp() {
        let mut store = ParamStore::<f64>::new();
        let p = Pooler::new(
            &mut store,
            "head1",
            &PoolingConfig::cbe(PoolingKind::CbeGsp, 4),
            [4, 3, 3],
            4,
            &mut stream(0, "init", 0),
        )
        .unwrap();
        p.set_identity_expansion(&mut store).unwrap();
        let mut s = Session::new(&mut store);
        let x = s.tape.constant(rand_input(&[2, 4, 3, 3], 2));
        let a = p.forward(&mut s, x).unwrap();
        let b = gsp(&mut s.tape, x).unwrap();
        assert_eq!(s.tape.value(a), s.tape.value(b));
    }

    #[test]
    fn config_checks() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = stream(0, "init", 0);
        let narrow = PoolingConfig::cbe(PoolingKind::CbeL2, 2);
        assert!(Pooler::new(&mut store, "h", &narrow, [4, 4, 4], 4, &mut rng).is_err());
        let mut grouped = PoolingConfig::cbe(PoolingKind::CbeL2, 9);
        grouped.groups = 2;
        assert!(Pooler::new(&mut store, "h", &grouped, [4, 4, 4], 4, &mut rng).is_err());
    }

    #[test]
    fn grid_choice_hits_target_when_possible() {
        assert_eq!(lsp_grid_for(16, 16, 16, 256), 4);
        assert_eq!(lsp_grid_for(128, 4, 4, 256), 1);
        assert_eq!(lsp_grid_for(32, 8, 8, 256), 2);
    }
}
