//! Lossless Haar wavelet pyramid.
//!
//! Axis convention for a `[C×H×W]` tensor: the first filter index runs over
//! rows (height), the second over columns (width). Filters are applied by
//! correlation, `s₁(n₁,n₂) = Σ h(k₁−2n₁) h(k₂−2n₂) s(k₁,k₂)`, so every output
//! coefficient depends on exactly one 2×2 block of its input:
//!
//! | subband | rows      | columns   |
//! |---------|-----------|-----------|
//! | `ll`    | low-pass  | low-pass  |
//! | `lh`    | low-pass  | high-pass |
//! | `hl`    | high-pass | low-pass  |
//! | `hh`    | high-pass | high-pass |
//!
//! The matrix form `B = H A Hᵀ` produces the same coefficients packed into
//! quadrants: `ll` top-left, `lh` top-right, `hl` bottom-left, `hh`
//! bottom-right. [`pack_subbands`] and [`unpack_subbands`] are that
//! permutation.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::autodiff::{Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Orthonormal Haar analysis (`low`, `high`) and synthesis filter pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HaarFilters<T> {
    pub low: [T; 2],
    pub high: [T; 2],
    pub low_synth: [T; 2],
    pub high_synth: [T; 2],
}

impl<T: Element> Default for HaarFilters<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> HaarFilters<T> {
    pub fn new() -> Self {
        let r = T::of(FRAC_1_SQRT_2);
        Self {
            low: [r, r],
            high: [r, -r],
            low_synth: [r, r],
            high_synth: [r, -r],
        }
    }

    /// Largest deviation from ‖h‖² = ‖g‖² = 1, ⟨h,g⟩ = 0.
    pub fn orthonormality_error(&self) -> f64 {
        let dot = |a: [T; 2], b: [T; 2]| a[0].f64() * b[0].f64() + a[1].f64() * b[1].f64();
        [
            (dot(self.low, self.low) - 1.0).abs(),
            (dot(self.high, self.high) - 1.0).abs(),
            dot(self.low, self.high).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// One decomposition level: four subbands of identical extents.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletLevel<X> {
    pub ll: X,
    pub lh: X,
    pub hl: X,
    pub hh: X,
}

impl<X> WaveletLevel<X> {
    pub fn parts(&self) -> [&X; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    /// Odd extents are rejected.
    #[default]
    None,
    /// Odd extents get one mirrored row/column appended; decoding crops it.
    Reflect,
}

/// Multi-level decomposition, finest level first. Only the coarsest `ll`
/// is needed alongside the details to reconstruct the input.
#[derive(Clone, Debug)]
pub struct WaveletPyramid<X> {
    pub levels: Vec<WaveletLevel<X>>,
    pub original_extents: (usize, usize),
    /// Extents of each level's input before padding.
    pub input_extents: Vec<(usize, usize)>,
    pub pad: PadMode,
}

impl<X> WaveletPyramid<X> {
    pub fn coarsest(&self) -> &WaveletLevel<X> {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

// ---- kernels ----------------------------------------------------------

/// `[C×H×W] → [4×C×H/2×W/2]` (ll, lh, hl, hh).
pub(crate) fn haar_analysis<T: Element>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let f = HaarFilters::<T>::new();
    let (h2, w2) = (h / 2, w / 2);
    let band = c * h2 * w2;
    let mut out = vec![T::zero(); 4 * band];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for n1 in 0..h2 {
            for n2 in 0..w2 {
                let mut acc = [T::zero(); 4];
                for t1 in 0..2 {
                    for t2 in 0..2 {
                        let s = src[(2 * n1 + t1) * w + 2 * n2 + t2];
                        acc[0] = acc[0] + f.low[t1] * f.low[t2] * s;
                        acc[1] = acc[1] + f.low[t1] * f.high[t2] * s;
                        acc[2] = acc[2] + f.high[t1] * f.low[t2] * s;
                        acc[3] = acc[3] + f.high[t1] * f.high[t2] * s;
                    }
                }
                let at = (ch * h2 + n1) * w2 + n2;
                for (k, v) in acc.into_iter().enumerate() {
                    out[k * band + at] = v;
                }
            }
        }
    }
    out
}

/// `[4×C×h×w] → [C×2h×2w]`, the exact inverse of [`haar_analysis`].
pub(crate) fn haar_synthesis<T: Element>(bands: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let f = HaarFilters::<T>::new();
    let band = c * h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for n1 in 0..h {
            for n2 in 0..w {
                let at = (ch * h + n1) * w + n2;
                let [ll, lh, hl, hh] = [0, 1, 2, 3].map(|k| bands[k * band + at]);
                for t1 in 0..2 {
                    for t2 in 0..2 {
                        let v = f.low_synth[t1] * f.low_synth[t2] * ll
                            + f.low_synth[t1] * f.high_synth[t2] * lh
                            + f.high_synth[t1] * f.low_synth[t2] * hl
                            + f.high_synth[t1] * f.high_synth[t2] * hh;
                        out[(ch * oh + 2 * n1 + t1) * ow + 2 * n2 + t2] = v;
                    }
                }
            }
        }
    }
    out
}

fn chw(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::contract(format!("{op} needs [C×H×W], got {shape:?}"))),
    }
}

// ---- filter form ---------------------------------------------------------

pub fn dwt2<T: Element>(x: &Tensor<T>) -> Result<WaveletLevel<Tensor<T>>> {
    let (c, h, w) = chw(x.shape(), "dwt2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!(
            "dwt2 needs even extents, got {h}×{w} (enable reflect padding for odd inputs)"
        )));
    }
    let out = haar_analysis(x.data(), c, h, w);
    let band = out.len() / 4;
    let shape = vec![c, h / 2, w / 2];
    let part = |k: usize| Tensor::from_parts(shape.clone(), out[k * band..(k + 1) * band].to_vec());
    Ok(WaveletLevel {
        ll: part(0),
        lh: part(1),
        hl: part(2),
        hh: part(3),
    })
}

pub fn idwt2<T: Element>(level: &WaveletLevel<Tensor<T>>) -> Result<Tensor<T>> {
    let shape = level.ll.shape();
    let (c, h, w) = chw(shape, "idwt2")?;
    let mut stacked = Vec::with_capacity(4 * level.ll.len());
    for p in level.parts() {
        if p.shape() != shape {
            return Err(Error::dims("idwt2", shape, p.shape()));
        }
        stacked.extend_from_slice(p.data());
    }
    Ok(Tensor::from_parts(
        vec![c, 2 * h, 2 * w],
        haar_synthesis(&stacked, c, h, w),
    ))
}

// ---- matrix form ---------------------------------------------------------

/// Orthogonal `N×N` Haar transform: low-pass rows on top, high-pass rows
/// below.
#[derive(Clone, Debug)]
pub struct HaarMatrix<T> {
    matrix: Tensor<T>,
}

impl<T: Element> HaarMatrix<T> {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n % 2 != 0 {
            return Err(Error::contract(format!(
                "Haar matrix size must be positive and even, got {n}"
            )));
        }
        let f = HaarFilters::<T>::new();
        let half = n / 2;
        let mut m = Tensor::zeros([n, n]);
        let d = m.data_mut();
        for i in 0..half {
            for t in 0..2 {
                d[i * n + 2 * i + t] = f.low[t];
                d[(half + i) * n + 2 * i + t] = f.high[t];
            }
        }
        Ok(Self { matrix: m })
    }

    pub fn size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    /// `‖HᵀH − I‖∞`
    pub fn orthogonality_error(&self) -> f64 {
        let hth = self.matrix.t().unwrap().matmul(&self.matrix).unwrap();
        hth.max_abs_diff(&Tensor::eye(self.size())).unwrap()
    }

    fn forward(&self, a: &Tensor<T>) -> Tensor<T> {
        let h = &self.matrix;
        h.matmul(a).unwrap().matmul(&h.t().unwrap()).unwrap()
    }

    fn inverse(&self, b: &Tensor<T>) -> Tensor<T> {
        let h = &self.matrix;
        h.t().unwrap().matmul(b).unwrap().matmul(h).unwrap()
    }
}

fn square_channels<T: Element>(x: &Tensor<T>, op: &str) -> Result<(usize, usize)> {
    let (c, h, w) = chw(x.shape(), op)?;
    if h != w {
        return Err(Error::contract(format!(
            "{op} needs square spatial extents, got {h}×{w}"
        )));
    }
    Ok((c, h))
}

fn per_channel<T: Element>(x: &Tensor<T>, c: usize, n: usize, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Tensor<T> {
    let mut out = Vec::with_capacity(c * n * n);
    for ch in x.data().chunks(n * n) {
        let a = Tensor::from_parts(vec![n, n], ch.to_vec());
        out.extend_from_slice(f(&a).data());
    }
    Tensor::from_parts(vec![c, n, n], out)
}

/// `B = H A Hᵀ` per channel, subbands packed in quadrants.
pub fn dwt2_matrix_packed<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, n) = square_channels(x, "dwt2_matrix")?;
    let h = HaarMatrix::new(n)?;
    Ok(per_channel(x, c, n, |a| h.forward(a)))
}

/// `A = Hᵀ B H` per channel on a quadrant-packed tensor.
pub fn idwt2_matrix_packed<T: Element>(b: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, n) = square_channels(b, "idwt2_matrix")?;
    let h = HaarMatrix::new(n)?;
    Ok(per_channel(b, c, n, |m| h.inverse(m)))
}

pub fn dwt2_matrix<T: Element>(x: &Tensor<T>) -> Result<WaveletLevel<Tensor<T>>> {
    unpack_subbands(&dwt2_matrix_packed(x)?)
}

pub fn idwt2_matrix<T: Element>(level: &WaveletLevel<Tensor<T>>) -> Result<Tensor<T>> {
    idwt2_matrix_packed(&pack_subbands(level)?)
}

/// Quadrant layout → four subband tensors.
pub fn unpack_subbands<T: Element>(packed: &Tensor<T>) -> Result<WaveletLevel<Tensor<T>>> {
    let (c, n) = square_channels(packed, "unpack_subbands")?;
    if n % 2 != 0 {
        return Err(Error::contract(format!("odd packed extent {n}")));
    }
    let half = n / 2;
    let quad = |r0: usize, c0: usize| {
        Tensor::from_fn([c, half, half], |i| {
            let (ch, rest) = (i / (half * half), i % (half * half));
            let (r, col) = (rest / half, rest % half);
            packed.data()[(ch * n + r0 + r) * n + c0 + col]
        })
    };
    Ok(WaveletLevel {
        ll: quad(0, 0),
        lh: quad(0, half),
        hl: quad(half, 0),
        hh: quad(half, half),
    })
}

/// Four subband tensors → quadrant layout.
pub fn pack_subbands<T: Element>(level: &WaveletLevel<Tensor<T>>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(level.ll.shape(), "pack_subbands")?;
    for p in level.parts() {
        if p.shape() != level.ll.shape() {
            return Err(Error::dims("pack_subbands", level.ll.shape(), p.shape()));
        }
    }
    if h != w {
        return Err(Error::contract(format!("pack_subbands needs square bands, got {h}×{w}")));
    }
    let n = 2 * h;
    let mut out = Tensor::zeros([c, n, n]);
    let d = out.data_mut();
    for (k, p) in level.parts().into_iter().enumerate() {
        let (r0, c0) = ((k / 2) * h, (k % 2) * h);
        for ch in 0..c {
            for r in 0..h {
                for col in 0..h {
                    d[(ch * n + r0 + r) * n + c0 + col] = p.data()[(ch * h + r) * h + col];
                }
            }
        }
    }
    Ok(out)
}

// ---- pyramid -------------------------------------------------------------

fn pad_index(c: usize, h: usize, w: usize) -> (Vec<usize>, usize, usize) {
    let (ph, pw) = (h + h % 2, w + w % 2);
    let mut index = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for r in 0..ph {
            for col in 0..pw {
                index.push((ch * h + r.min(h - 1)) * w + col.min(w - 1));
            }
        }
    }
    (index, ph, pw)
}

pub(crate) fn crop_index(c: usize, from: (usize, usize), to: (usize, usize)) -> Vec<usize> {
    let mut index = Vec::with_capacity(c * to.0 * to.1);
    for ch in 0..c {
        for r in 0..to.0 {
            for col in 0..to.1 {
                index.push((ch * from.0 + r) * from.1 + col);
            }
        }
    }
    index
}

fn level_extents(h: usize, w: usize, pad: PadMode, level: usize) -> Result<()> {
    if h < 2 || w < 2 {
        return Err(Error::contract(format!(
            "level {level} input {h}×{w} is too small to decompose"
        )));
    }
    if pad == PadMode::None && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::contract(format!(
            "level {level} input {h}×{w} is not divisible by 2; enable reflect padding"
        )));
    }
    Ok(())
}

fn gather_plain<T: Element>(x: &Tensor<T>, index: &[usize], shape: Vec<usize>) -> Tensor<T> {
    Tensor::from_parts(shape, index.iter().map(|&i| x.data()[i]).collect())
}

/// Recursive [`dwt2`] on the low-pass band, keeping every level's details.
pub fn encode_pyramid<T: Element>(
    x: &Tensor<T>,
    levels: usize,
    pad: PadMode,
) -> Result<WaveletPyramid<Tensor<T>>> {
    let (c, h, w) = chw(x.shape(), "encode_pyramid")?;
    if levels == 0 {
        return Err(Error::contract("pyramid needs at least one level"));
    }
    let mut out = Vec::with_capacity(levels);
    let mut input_extents = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for l in 0..levels {
        let (_, ch, cw) = chw(cur.shape(), "encode_pyramid")?;
        level_extents(ch, cw, pad, l)?;
        input_extents.push((ch, cw));
        if ch % 2 != 0 || cw % 2 != 0 {
            let (index, ph, pw) = pad_index(c, ch, cw);
            cur = gather_plain(&cur, &index, vec![c, ph, pw]);
        }
        let level = dwt2(&cur)?;
        cur = level.ll.clone();
        out.push(level);
    }
    Ok(WaveletPyramid {
        levels: out,
        original_extents: (h, w),
        input_extents,
        pad,
    })
}

/// Recursive [`idwt2`] from `processed_ll` in place of the coarsest
/// low-pass band, using the stored details unchanged.
pub fn decode_pyramid<T: Element>(
    pyramid: &WaveletPyramid<Tensor<T>>,
    processed_ll: &Tensor<T>,
) -> Result<Tensor<T>> {
    let coarse = &pyramid.coarsest().ll;
    if processed_ll.shape() != coarse.shape() {
        return Err(Error::dims("decode_pyramid", coarse.shape(), processed_ll.shape()));
    }
    let mut cur = processed_ll.clone();
    for (level, &(h, w)) in pyramid.levels.iter().zip(&pyramid.input_extents).rev() {
        let full = idwt2(&WaveletLevel {
            ll: cur,
            lh: level.lh.clone(),
            hl: level.hl.clone(),
            hh: level.hh.clone(),
        })?;
        let (c, fh, fw) = chw(full.shape(), "decode_pyramid")?;
        cur = if (fh, fw) == (h, w) {
            full
        } else {
            gather_plain(&full, &crop_index(c, (fh, fw), (h, w)), vec![c, h, w])
        };
    }
    Ok(cur)
}

// ---- on the tape -----------------------------------------------------------

pub fn dwt2_graph<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<WaveletLevel<Var>> {
    let stacked = tape.dwt2(x)?;
    Ok(WaveletLevel {
        ll: tape.select(stacked, 0)?,
        lh: tape.select(stacked, 1)?,
        hl: tape.select(stacked, 2)?,
        hh: tape.select(stacked, 3)?,
    })
}

pub fn idwt2_graph<T: Element>(tape: &mut Tape<T>, level: &WaveletLevel<Var>) -> Result<Var> {
    tape.idwt2([level.ll, level.lh, level.hl, level.hh])
}

/// Differentiable [`encode_pyramid`].
pub fn encode_pyramid_graph<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    levels: usize,
    pad: PadMode,
) -> Result<WaveletPyramid<Var>> {
    let (c, h, w) = chw(tape.shape(x), "encode_pyramid")?;
    if levels == 0 {
        return Err(Error::contract("pyramid needs at least one level"));
    }
    let mut out = Vec::with_capacity(levels);
    let mut input_extents = Vec::with_capacity(levels);
    let mut cur = x;
    for l in 0..levels {
        let (_, ch, cw) = chw(tape.shape(cur), "encode_pyramid")?;
        level_extents(ch, cw, pad, l)?;
        input_extents.push((ch, cw));
        if ch % 2 != 0 || cw % 2 != 0 {
            let (index, ph, pw) = pad_index(c, ch, cw);
            cur = tape.gather(cur, index, vec![c, ph, pw], "reflect_pad")?;
        }
        let level = dwt2_graph(tape, cur)?;
        cur = level.ll;
        out.push(level);
    }
    Ok(WaveletPyramid {
        levels: out,
        original_extents: (h, w),
        input_extents,
        pad,
    })
}

/// Differentiable [`decode_pyramid`]. `detail` maps each stored detail band
/// (finest level is index 0) before it is merged back; pass the identity
/// for plain lossless skips.
pub fn decode_pyramid_graph<T: Element>(
    tape: &mut Tape<T>,
    pyramid: &WaveletPyramid<Var>,
    processed_ll: Var,
    mut detail: impl FnMut(&mut Tape<T>, usize, Var) -> Result<Var>,
) -> Result<Var> {
    let coarse = tape.shape(pyramid.coarsest().ll).to_vec();
    if tape.shape(processed_ll) != coarse.as_slice() {
        return Err(Error::dims("decode_pyramid", &coarse, tape.shape(processed_ll)));
    }
    let mut cur = processed_ll;
    for (l, (level, &(h, w))) in pyramid
        .levels
        .iter()
        .zip(&pyramid.input_extents)
        .enumerate()
        .rev()
    {
        let lh = detail(tape, l, level.lh)?;
        let hl = detail(tape, l, level.hl)?;
        let hh = detail(tape, l, level.hh)?;
        let full = tape.idwt2([cur, lh, hl, hh])?;
        let (c, fh, fw) = chw(tape.shape(full), "decode_pyramid")?;
        cur = if (fh, fw) == (h, w) {
            full
        } else {
            tape.gather(full, crop_index(c, (fh, fw), (h, w)), vec![c, h, w], "crop")?
        };
    }
    Ok(cur)
}
