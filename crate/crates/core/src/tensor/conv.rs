//! 2-D cross-correlation with groups: a direct nested-loop kernel and an
//! image-to-column fast path built on gemm.

use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvAlgo {
    Direct,
    #[default]
    Im2col,
}

/// Stride, zero padding and group count of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

/// Resolved sizes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvDims {
    pub fn resolve(input: &[usize], kernel: &[usize], geom: ConvGeometry) -> Result<Self> {
        let [n, c, h, w] = *input else {
            return Err(Error::shape(format!("conv2d input must be 4-D, got {input:?}")));
        };
        let [o, cg, kh, kw] = *kernel else {
            return Err(Error::shape(format!("conv2d kernel must be 4-D, got {kernel:?}")));
        };
        let g = geom.groups;
        if g == 0 || c % g != 0 || o % g != 0 {
            return Err(Error::config(format!(
                "{g} groups do not divide {c} input and {o} output channels"
            )));
        }
        if cg != c / g {
            return Err(Error::shape(format!(
                "kernel expects {cg} channels per group, input provides {}",
                c / g
            )));
        }
        if geom.stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (hp, wp) = (h + 2 * geom.padding, w + 2 * geom.padding);
        if hp < kh || wp < kw {
            return Err(Error::config(format!(
                "kernel {kh}x{kw} larger than padded input {hp}x{wp}"
            )));
        }
        let ho = (hp - kh) / geom.stride + 1;
        let wo = (wp - kw) / geom.stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho,
            wo,
            stride: geom.stride,
            pad: geom.padding,
            groups: g,
        })
    }

    fn cg(&self) -> usize {
        self.c / self.groups
    }

    fn og(&self) -> usize {
        self.o / self.groups
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.n, self.o, self.ho, self.wo]
    }

    /// Input coordinate for output position `oy` and kernel offset `ky`, if it
    /// falls inside the unpadded image.
    #[inline]
    fn src(&self, out: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Reference convolution by direct summation.
pub fn conv2d_direct<E: Element>(input: &Tensor<E>, kernel: &Tensor<E>, geom: ConvGeometry) -> Result<Tensor<E>> {
    let d = ConvDims::resolve(input.shape(), kernel.shape(), geom)?;
    Ok(Tensor::new(&d.out_shape(), direct_forward(&d, input.data(), kernel.data())).expect("shape computed from dims"))
}

fn direct_forward<E: Element>(d: &ConvDims, x: &[E], k: &[E]) -> Vec<E> {
    let (cg, og) = (d.cg(), d.og());
    let mut out = vec![E::zero(); d.n * d.o * d.ho * d.wo];
    for n in 0..d.n {
        for o in 0..d.o {
            let g = o / og;
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let mut acc = E::zero();
                    for ci in 0..cg {
                        let c = g * cg + ci;
                        for ky in 0..d.kh {
                            let Some(iy) = d.src(oy, ky, d.h) else { continue };
                            for kx in 0..d.kw {
                                let Some(ix) = d.src(ox, kx, d.w) else { continue };
                                acc = acc
                                    + x[((n * d.c + c) * d.h + iy) * d.w + ix]
                                        * k[((o * cg + ci) * d.kh + ky) * d.kw + kx];
                            }
                        }
                    }
                    out[((n * d.o + o) * d.ho + oy) * d.wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn direct_backward<E: Element>(
    d: &ConvDims,
    x: &[E],
    k: &[E],
    dy: &[E],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let (cg, og) = (d.cg(), d.og());
    let mut dx = want_dx.then(|| vec![E::zero(); x.len()]);
    let mut dk = want_dk.then(|| vec![E::zero(); k.len()]);
    for n in 0..d.n {
        for o in 0..d.o {
            let g = o / og;
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let gy = dy[((n * d.o + o) * d.ho + oy) * d.wo + ox];
                    for ci in 0..cg {
                        let c = g * cg + ci;
                        for ky in 0..d.kh {
                            let Some(iy) = d.src(oy, ky, d.h) else { continue };
                            for kx in 0..d.kw {
                                let Some(ix) = d.src(ox, kx, d.w) else { continue };
                                let xi = ((n * d.c + c) * d.h + iy) * d.w + ix;
                                let ki = ((o * cg + ci) * d.kh + ky) * d.kw + kx;
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] = dx[xi] + gy * k[ki];
                                }
                                if let Some(dk) = dk.as_mut() {
                                    dk[ki] = dk[ki] + gy * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

impl ConvDims {
    /// Output columns `lo..hi` whose input column for kernel offset `kx`
    /// lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = p.saturating_sub(kx).div_ceil(s);
        let hi = if self.w + p > kx {
            ((self.w + p - kx - 1) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Column matrix `[C*kh*kw, N*ho*wo]`; rows of group `g` are contiguous.
fn im2col<E: Element>(d: &ConvDims, x: &[E]) -> Vec<E> {
    let p = d.ho * d.wo;
    let cols_n = d.n * p;
    let hw = d.h * d.w;
    let mut cols = vec![E::zero(); d.c * d.kh * d.kw * cols_n];
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                let (lo, hi) = d.valid_cols(kx);
                for n in 0..d.n {
                    let plane = &x[(n * d.c + c) * hw..(n * d.c + c + 1) * hw];
                    for oy in 0..d.ho {
                        let Some(iy) = d.src(oy, ky, d.h) else { continue };
                        let out = &mut dst[n * p + oy * d.wo..n * p + (oy + 1) * d.wo];
                        let line = &plane[iy * d.w..(iy + 1) * d.w];
                        if lo >= hi {
                            continue;
                        }
                        let first = lo * d.stride + kx - d.pad;
                        if d.stride == 1 {
                            out[lo..hi].copy_from_slice(&line[first..first + hi - lo]);
                        } else {
                            for (o, ix) in out[lo..hi].iter_mut().zip((first..).step_by(d.stride)) {
                                *o = line[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<E: Element>(d: &ConvDims, cols: &[E]) -> Vec<E> {
    let p = d.ho * d.wo;
    let cols_n = d.n * p;
    let hw = d.h * d.w;
    let mut x = vec![E::zero(); d.n * d.c * hw];
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                let (lo, hi) = d.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * d.stride + kx - d.pad;
                for n in 0..d.n {
                    let plane = &mut x[(n * d.c + c) * hw..(n * d.c + c + 1) * hw];
                    for oy in 0..d.ho {
                        let Some(iy) = d.src(oy, ky, d.h) else { continue };
                        let inp = &src[n * p + oy * d.wo..n * p + (oy + 1) * d.wo];
                        let line = &mut plane[iy * d.w..(iy + 1) * d.w];
                        for (v, ix) in inp[lo..hi].iter().zip((first..).step_by(d.stride)) {
                            line[ix] = line[ix] + *v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, O, P]` <-> `[O, N*P]`.
fn nop_to_onp<E: Element>(d: &ConvDims, src: &[E]) -> Vec<E> {
    let p = d.ho * d.wo;
    let mut out = vec![E::zero(); src.len()];
    for n in 0..d.n {
        for o in 0..d.o {
            let s = &src[(n * d.o + o) * p..(n * d.o + o + 1) * p];
            out[o * d.n * p + n * p..o * d.n * p + (n + 1) * p].copy_from_slice(s);
        }
    }
    out
}

fn onp_to_nop<E: Element>(d: &ConvDims, src: &[E]) -> Vec<E> {
    let p = d.ho * d.wo;
    let mut out = vec![E::zero(); src.len()];
    for o in 0..d.o {
        for n in 0..d.n {
            let s = &src[o * d.n * p + n * p..o * d.n * p + (n + 1) * p];
            out[(n * d.o + o) * p..(n * d.o + o + 1) * p].copy_from_slice(s);
        }
    }
    out
}

fn gemm_forward<E: Element>(d: &ConvDims, k: &[E], cols: &[E]) -> Vec<E> {
    let (cg, og) = (d.cg(), d.og());
    let ck = cg * d.kh * d.kw;
    let np = d.n * d.ho * d.wo;
    let mut mat = vec![E::zero(); d.o * np];
    for g in 0..d.groups {
        let kg = &k[g * og * ck..(g + 1) * og * ck];
        let colg = &cols[g * ck * np..(g + 1) * ck * np];
        let outg = &mut mat[g * og * np..(g + 1) * og * np];
        E::gemm(
            og,
            ck,
            np,
            E::one(),
            (kg, ck as isize, 1),
            (colg, np as isize, 1),
            E::zero(),
            (outg, np as isize, 1),
        );
    }
    onp_to_nop(d, &mat)
}

/// Saved state for the im2col backward pass.
pub(crate) enum ConvSaved<E> {
    Direct,
    Cols(Vec<E>),
}

pub(crate) fn forward<E: Element>(d: &ConvDims, x: &[E], k: &[E], algo: ConvAlgo) -> (Vec<E>, ConvSaved<E>) {
    match algo {
        ConvAlgo::Direct => (direct_forward(d, x, k), ConvSaved::Direct),
        ConvAlgo::Im2col => {
            let cols = im2col(d, x);
            (gemm_forward(d, k, &cols), ConvSaved::Cols(cols))
        }
    }
}

pub(crate) fn backward<E: Element>(
    d: &ConvDims,
    x: &[E],
    k: &[E],
    saved: &ConvSaved<E>,
    dy: &[E],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>) {
    let cols = match saved {
        ConvSaved::Direct => return direct_backward(d, x, k, dy, want_dx, want_dk),
        ConvSaved::Cols(cols) => cols,
    };
    let (cg, og) = (d.cg(), d.og());
    let ck = cg * d.kh * d.kw;
    let np = d.n * d.ho * d.wo;
    let dmat = nop_to_onp(d, dy);

    let dk = want_dk.then(|| {
        let mut dk = vec![E::zero(); k.len()];
        for g in 0..d.groups {
            let dg = &dmat[g * og * np..(g + 1) * og * np];
            let colg = &cols[g * ck * np..(g + 1) * ck * np];
            // dK_g [og, ck] = dY_g [og, np] x cols_g^T [np, ck]
            E::gemm(
                og,
                np,
                ck,
                E::one(),
                (dg, np as isize, 1),
                (colg, 1, np as isize),
                E::zero(),
                (&mut dk[g * og * ck..(g + 1) * og * ck], ck as isize, 1),
            );
        }
        dk
    });

    let dx = want_dx.then(|| {
        let mut dcols = vec![E::zero(); d.c * d.kh * d.kw * np];
        for g in 0..d.groups {
            let kg = &k[g * og * ck..(g + 1) * og * ck];
            let dg = &dmat[g * og * np..(g + 1) * og * np];
            // dcols_g [ck, np] = K_g^T [ck, og] x dY_g [og, np]
            E::gemm(
                ck,
                og,
                np,
                E::one(),
                (kg, 1, ck as isize),
                (dg, np as isize, 1),
                E::zero(),
                (&mut dcols[g * ck * np..(g + 1) * ck * np], np as isize, 1),
            );
        }
        col2im(d, &dcols)
    });
    (dx, dk)
}
