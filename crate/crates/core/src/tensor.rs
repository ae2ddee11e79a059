//! Dense rank-4 tensor substrate and reference operations.
//!
//! Activations are stored `[N, C, H, W]`, weights `[Cout, Cin, Kh, Kw]`, both
//! row-major. [`conv2d_reference`] is the dense oracle that the bit-packed
//! convolution engine is checked against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense rank-4 `f32` tensor, row-major in shape order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    /// Flat 1-D tensor `[1, 1, 1, len]`, convenient in tests and for FC bias.
    pub fn from_flat(data: Vec<f32>) -> Self {
        let len = data.len();
        Self {
            shape: [1, 1, 1, len],
            data,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshaped(mut self, shape: [usize; 4]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    #[inline]
    pub fn at(&self, i0: usize, i1: usize, i2: usize, i3: usize) -> f32 {
        let [_, d1, d2, d3] = self.shape;
        self.data[((i0 * d1 + i1) * d2 + i2) * d3 + i3]
    }

    #[inline]
    pub fn at_mut(&mut self, i0: usize, i1: usize, i2: usize, i3: usize) -> &mut f32 {
        let [_, d1, d2, d3] = self.shape;
        &mut self.data[((i0 * d1 + i1) * d2 + i2) * d3 + i3]
    }

    /// Quantizer entry precondition: every value finite.
    pub fn check_finite(&self) -> Result<()> {
        for (index, &value) in self.data.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { index, value });
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Population standard deviation `sqrt(mean((x - mean(x))^2))`.
///
/// Accumulates in f64 so that large tensors keep the quantizer endpoints
/// stable.
pub fn std_dev(t: &Tensor) -> Result<f32> {
    if t.is_empty() {
        return Err(Error::EmptyTensor("std_dev of empty tensor".into()));
    }
    let n = t.len() as f64;
    let mean: f64 = t.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var: f64 = t
        .data()
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(var.sqrt() as f32)
}

/// Mean over the elements selected by `mask`.
///
/// `Ok(None)` is the distinguished empty-piece signal; callers pick their own
/// fallback.
pub fn masked_mean(t: &Tensor, mask: &[bool]) -> Result<Option<f32>> {
    if mask.len() != t.len() {
        return Err(Error::ShapeMismatch(format!(
            "mask length {} vs tensor length {}",
            mask.len(),
            t.len()
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (&x, &keep) in t.data().iter().zip(mask) {
        if keep {
            sum += x as f64;
            count += 1;
        }
    }
    if count == 0 {
        Ok(None)
    } else {
        Ok(Some((sum / count as f64) as f32))
    }
}

/// Output spatial extent of a convolution: `floor((in + 2*pad - k)/stride) + 1`.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad).saturating_sub(kernel) / stride + 1
}

/// Dense cross-correlation with zero padding.
///
/// `input` is `[N, Cin, H, W]`, `weights` `[Cout, Cin, Kh, Kw]`; the output is
/// `[N, Cout, Hout, Wout]`. This is the oracle implementation: clarity over
/// speed (the training path uses the im2col layer in `net`, the inference path
/// the bitops engine, and both are tested against this).
pub fn conv2d_reference(
    input: &Tensor,
    weights: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be >= 1".into()));
    }
    let [n, cin, h, w] = input.shape();
    let [cout, wcin, kh, kw] = weights.shape();
    if cin != wcin {
        return Err(Error::ShapeMismatch(format!(
            "input channels {cin} vs weight input channels {wcin}"
        )));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let hout = conv_out_extent(h, kh, stride, pad);
    let wout = conv_out_extent(w, kw, stride, pad);
    let mut out = Tensor::zeros([n, cout, hout, wout]);
    for b in 0..n {
        for oc in 0..cout {
            for oy in 0..hout {
                for ox in 0..wout {
                    let mut acc = 0.0f32;
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input.at(b, ic, iy as usize, ix as usize)
                                    * weights.at(oc, ic, ky, kx);
                            }
                        }
                    }
                    *out.at_mut(b, oc, oy, ox) = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Second, independently coded naive implementation: pads the input
    /// explicitly and runs the plain 6-loop form. Kept deliberately different
    /// from `conv2d_reference` (which skips out-of-range taps in place).
    fn conv2d_padbuffer(input: &Tensor, weights: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [n, cin, h, w] = input.shape();
        let [cout, _, kh, kw] = weights.shape();
        let ph = h + 2 * pad;
        let pw = w + 2 * pad;
        let mut padded = Tensor::zeros([n, cin, ph, pw]);
        for b in 0..n {
            for c in 0..cin {
                for y in 0..h {
                    for x in 0..w {
                        *padded.at_mut(b, c, y + pad, x + pad) = input.at(b, c, y, x);
                    }
                }
            }
        }
        let hout = (ph - kh) / stride + 1;
        let wout = (pw - kw) / stride + 1;
        let mut out = Tensor::zeros([n, cout, hout, wout]);
        for b in 0..n {
            for oc in 0..cout {
                for oy in 0..hout {
                    for ox in 0..wout {
                        let mut acc = 0.0;
                        for ic in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    acc += padded.at(b, ic, oy * stride + ky, ox * stride + kx)
                                        * weights.at(oc, ic, ky, kx);
                                }
                            }
                        }
                        *out.at_mut(b, oc, oy, ox) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_product() {
        let input = Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap();
        let weight = Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap();
        let out = conv2d_reference(&input, &weight, 1, 0).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn zero_weights_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = rand_tensor(&mut rng, [2, 3, 6, 6]);
        let weights = Tensor::zeros([4, 3, 3, 3]);
        let out = conv2d_reference(&input, &weights, 1, 1).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matches_independent_naive_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let input = rand_tensor(&mut rng, [1, 2, 5, 5]);
        let weights = rand_tensor(&mut rng, [3, 2, 3, 3]);
        for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
            let a = conv2d_reference(&input, &weights, stride, pad).unwrap();
            let b = conv2d_padbuffer(&input, &weights, stride, pad);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_error() {
        let input = Tensor::zeros([1, 2, 4, 4]);
        let weights = Tensor::zeros([1, 3, 3, 3]);
        assert!(conv2d_reference(&input, &weights, 1, 0).is_err());
    }

    #[test]
    fn conv_linear_in_both_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = rand_tensor(&mut rng, [1, 2, 5, 5]);
        let weights = rand_tensor(&mut rng, [2, 2, 3, 3]);
        let a = 3.5f32;
        let scaled_w = weights.map(|x| a * x);
        let lhs = conv2d_reference(&input, &scaled_w, 1, 1).unwrap();
        let rhs = conv2d_reference(&input, &weights, 1, 1).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            let want = a * y;
            assert!(
                (x - want).abs() <= 1e-5 * want.abs().max(1.0),
                "{x} vs {want}"
            );
        }
    }

    #[test]
    fn std_dev_examples() {
        let t = Tensor::from_flat(vec![1.0, 1.0, 1.0, 1.0]);
        assert_eq!(std_dev(&t).unwrap(), 0.0);
        let t = Tensor::from_flat(vec![-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(std_dev(&t).unwrap(), 1.0);
        let t = Tensor::from_flat(vec![1.0, 2.0, 3.0, 4.0]);
        let got = std_dev(&t).unwrap();
        let want = 1.25f32.sqrt(); // 1.118033...
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn std_dev_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = rand_tensor(&mut rng, [1, 1, 8, 8]);
        let shifted = t.map(|x| x + 17.25);
        let a = std_dev(&t).unwrap();
        let b = std_dev(&shifted).unwrap();
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
    }

    #[test]
    fn std_dev_empty_is_error() {
        let t = Tensor::zeros([0, 1, 1, 1]);
        assert!(std_dev(&t).is_err());
    }

    #[test]
    fn masked_mean_examples() {
        let t = Tensor::from_flat(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            masked_mean(&t, &[true, true, false, false]).unwrap(),
            Some(1.5)
        );
        let t = Tensor::from_flat(vec![5.0]);
        assert_eq!(masked_mean(&t, &[true]).unwrap(), Some(5.0));
        let t = Tensor::from_flat(vec![-2.0, -1.0, 0.0, 3.0]);
        let mask: Vec<bool> = t.data().iter().map(|&x| x < 0.0).collect();
        assert_eq!(masked_mean(&t, &mask).unwrap(), Some(-1.5));
    }

    #[test]
    fn masked_mean_empty_selection() {
        let t = Tensor::from_flat(vec![1.0, 2.0]);
        assert_eq!(masked_mean(&t, &[false, false]).unwrap(), None);
    }

    #[test]
    fn masked_mean_length_mismatch() {
        let t = Tensor::from_flat(vec![1.0, 2.0]);
        assert!(masked_mean(&t, &[true]).is_err());
    }

    #[test]
    fn check_finite_flags_nan() {
        let t = Tensor::from_flat(vec![1.0, f32::NAN]);
        assert!(t.check_finite().is_err());
        let t = Tensor::from_flat(vec![1.0, 2.0]);
        assert!(t.check_finite().is_ok());
    }
}
