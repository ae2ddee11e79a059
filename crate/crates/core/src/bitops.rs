//! Bit-packed `{0,1}` planes and the parallel binary convolution engine.
//!
//! A quantized convolution decomposes into M weight planes and N activation
//! planes; the real-valued result is recovered as the merged-coefficient sum
//! over the M x N integer convolutions, each of which is an AND+popcount dot
//! product over packed 64-bit words.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, Tensor};

/// Packed `{0,1}` mask: bit `j` of word `k` holds element `64k + j`.
/// Bits at positions `>= len` are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitPlane {
    len: usize,
    words: Vec<u64>,
}

impl BitPlane {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_bools(mask: &[bool]) -> Self {
        let mut plane = Self::zeros(mask.len());
        for (i, &bit) in mask.iter().enumerate() {
            if bit {
                plane.words[i / 64] |= 1u64 << (i % 64);
            }
        }
        plane
    }

    /// Builds a plane by testing each element index.
    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut plane = Self::zeros(len);
        for i in 0..len {
            if f(i) {
                plane.words[i / 64] |= 1u64 << (i % 64);
            }
        }
        plane
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, bit: bool) {
        debug_assert!(i < self.len);
        if bit {
            self.words[i / 64] |= 1u64 << (i % 64);
        } else {
            self.words[i / 64] &= !(1u64 << (i % 64));
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Reconstructs a plane from raw words, re-zeroing any pad bits.
    pub fn from_words(len: usize, mut words: Vec<u64>) -> Result<Self> {
        if words.len() != len.div_ceil(64) {
            return Err(Error::ShapeMismatch(format!(
                "{} words for {} bits (want {})",
                words.len(),
                len,
                len.div_ceil(64)
            )));
        }
        let valid = len - (words.len().saturating_sub(1)) * 64;
        if let Some(last) = words.last_mut() {
            if valid < 64 {
                *last &= (1u64 << valid) - 1;
            }
        }
        Ok(Self { len, words })
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len != other.len {
            return Err(Error::LengthMismatch {
                left: self.len,
                right: other.len,
            });
        }
        Ok(())
    }
}

pub fn pack(mask: &[bool]) -> BitPlane {
    BitPlane::from_bools(mask)
}

pub fn unpack(plane: &BitPlane) -> Vec<bool> {
    plane.to_bools()
}

/// `sum_j x_j * y_j` for `{0,1}` vectors, word-wise `popcount(x AND y)`.
pub fn dot_and_popcount(x: &BitPlane, y: &BitPlane) -> Result<u64> {
    x.check_len(y)?;
    Ok(x.words
        .iter()
        .zip(&y.words)
        .map(|(a, b)| (a & b).count_ones() as u64)
        .sum())
}

/// `sum_j x_j * y_j` for `+-1` vectors stored as bits (bit 1 <=> +1).
///
/// Uses the identity `dot = 2 * popcount(XNOR(x, y)) - len`; pad bits must be
/// excluded from the XNOR count since XNOR maps a pair of zero pad bits to 1.
pub fn dot_xnor_popcount(x: &BitPlane, y: &BitPlane) -> Result<i64> {
    x.check_len(y)?;
    let mut agreements = 0u64;
    let words = x.words.len();
    for (k, (a, b)) in x.words.iter().zip(&y.words).enumerate() {
        let mut xnor = !(a ^ b);
        if k == words - 1 {
            let valid = x.len - (words - 1) * 64;
            if valid < 64 {
                xnor &= (1u64 << valid) - 1;
            }
        }
        agreements += xnor.count_ones() as u64;
    }
    Ok(2 * agreements as i64 - x.len as i64)
}

/// Flattened outer product `phi[(i-1)*N + (j-1)] = alpha[i] * beta[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedCoefficients {
    pub m: usize,
    pub n: usize,
    pub phi: Vec<f32>,
}

pub fn merge_coefficients(alpha: &[f32], beta: &[f32]) -> MergedCoefficients {
    let mut phi = Vec::with_capacity(alpha.len() * beta.len());
    for &a in alpha {
        for &b in beta {
            phi.push(a * b);
        }
    }
    MergedCoefficients {
        m: alpha.len(),
        n: beta.len(),
        phi,
    }
}

/// Rows of packed kernel-window bits for one activation plane: one row per
/// `(batch, output position)`, each row `cin * kh * kw` bits with out-of-range
/// (padding) taps left at 0.
struct BitIm2Row {
    rows: Vec<BitPlane>,
}

fn bit_im2row(
    plane: &BitPlane,
    act_shape: [usize; 4],
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
) -> BitIm2Row {
    let [n, cin, h, w] = act_shape;
    let (kh, kw) = kernel;
    let hout = conv_out_extent(h, kh, stride, pad);
    let wout = conv_out_extent(w, kw, stride, pad);
    let row_len = cin * kh * kw;
    let mut rows = Vec::with_capacity(n * hout * wout);
    for b in 0..n {
        for oy in 0..hout {
            for ox in 0..wout {
                let mut row = BitPlane::zeros(row_len);
                let mut r = 0usize;
                for ic in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                let src = ((b * cin + ic) * h + iy as usize) * w + ix as usize;
                                if plane.get(src) {
                                    row.set(r, true);
                                }
                            }
                            r += 1;
                        }
                    }
                }
                rows.push(row);
            }
        }
    }
    BitIm2Row { rows }
}

/// One packed row per output channel of a weight plane.
fn weight_rows(plane: &BitPlane, weight_shape: [usize; 4]) -> Vec<BitPlane> {
    let [cout, cin, kh, kw] = weight_shape;
    let row_len = cin * kh * kw;
    (0..cout)
        .map(|oc| BitPlane::from_fn(row_len, |r| plane.get(oc * row_len + r)))
        .collect()
}

/// Binary convolution: `sum_k phi_k * BinConv(T_i, V_j)` over the M x N plane
/// pairs, matching `conv2d_reference` on the reconstructed dense tensors.
///
/// The per-pair integer convolutions are independent; the final coefficient
/// sum runs in fixed ascending `k = (i-1)*N + (j-1)` order and accumulates in
/// f64 so the result does not depend on evaluation order.
pub fn binary_conv2d(
    weight_planes: &[BitPlane],
    weight_shape: [usize; 4],
    act_planes: &[BitPlane],
    act_shape: [usize; 4],
    phi: &MergedCoefficients,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [n, cin, h, w] = act_shape;
    let [cout, wcin, kh, kw] = weight_shape;
    if cin != wcin {
        return Err(Error::ShapeMismatch(format!(
            "activation channels {cin} vs weight input channels {wcin}"
        )));
    }
    if weight_planes.len() != phi.m || act_planes.len() != phi.n {
        return Err(Error::ShapeMismatch(format!(
            "{} weight planes x {} activation planes vs phi table {}x{}",
            weight_planes.len(),
            act_planes.len(),
            phi.m,
            phi.n
        )));
    }
    let w_elems = weight_shape.iter().product::<usize>();
    let a_elems = act_shape.iter().product::<usize>();
    for p in weight_planes {
        if p.len() != w_elems {
            return Err(Error::LengthMismatch {
                left: p.len(),
                right: w_elems,
            });
        }
    }
    for p in act_planes {
        if p.len() != a_elems {
            return Err(Error::LengthMismatch {
                left: p.len(),
                right: a_elems,
            });
        }
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be >= 1".into()));
    }

    let hout = conv_out_extent(h, kh, stride, pad);
    let wout = conv_out_extent(w, kw, stride, pad);
    let positions = n * hout * wout;
    let out_len = positions * cout;

    let act_rows: Vec<BitIm2Row> = act_planes
        .iter()
        .map(|p| bit_im2row(p, act_shape, (kh, kw), stride, pad))
        .collect();
    let w_rows: Vec<Vec<BitPlane>> = weight_planes
        .iter()
        .map(|p| weight_rows(p, weight_shape))
        .collect();

    // acc is indexed [position][cout] to keep the popcount loop contiguous,
    // transposed into [N, Cout, Hout, Wout] at the end.
    let mut acc = vec![0.0f64; out_len];
    for (i, wp) in w_rows.iter().enumerate() {
        for (j, ar) in act_rows.iter().enumerate() {
            let coeff = phi.phi[i * phi.n + j] as f64;
            if coeff == 0.0 {
                continue;
            }
            for (pos, row) in ar.rows.iter().enumerate() {
                let base = pos * cout;
                for (oc, wrow) in wp.iter().enumerate() {
                    let count: u64 = wrow
                        .words
                        .iter()
                        .zip(&row.words)
                        .map(|(a, b)| (a & b).count_ones() as u64)
                        .sum();
                    acc[base + oc] += coeff * count as f64;
                }
            }
        }
    }

    let mut out = Tensor::zeros([n, cout, hout, wout]);
    let data = out.data_mut();
    for b in 0..n {
        for oy in 0..hout {
            for ox in 0..wout {
                let pos = (b * hout + oy) * wout + ox;
                for oc in 0..cout {
                    data[((b * cout + oc) * hout + oy) * wout + ox] =
                        acc[pos * cout + oc] as f32;
                }
            }
        }
    }
    Ok(out)
}
