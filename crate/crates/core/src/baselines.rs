//! Reference quantizers used for comparison runs: sign binarization with an
//! identity STE, ternarization, fixed-point quantization, and a
//! linear-combination-of-binary-bases fit.

use serde::{Deserialize, Serialize};

use crate::bitops::BitPlane;
use crate::error::{Error, Result};
use crate::tensor::{std_dev, Tensor};

/// `+1` where `x >= 0`, `-1` below.
pub fn binarize_sign(x: &Tensor) -> Tensor {
    x.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

/// Straight-through estimator for the sign binarizer: gradients pass
/// unchanged.
pub fn binarize_sign_backward(grad_out: &Tensor) -> Tensor {
    grad_out.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TernaryParams {
    pub delta: f32,
    pub x_pos: f32,
    pub x_neg: f32,
}

/// Ternarization with threshold `delta`: values above `delta` map to the mean
/// of that region, values below `-delta` to minus the mean magnitude of that
/// region, the rest to 0.
pub fn ternarize(x: &Tensor, delta: f32) -> Result<(Tensor, TernaryParams)> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "ternary threshold must be non-negative, got {delta}"
        )));
    }
    let mut pos_sum = 0.0f64;
    let mut pos_count = 0usize;
    let mut neg_sum = 0.0f64;
    let mut neg_count = 0usize;
    for &v in x.data() {
        if v > delta {
            pos_sum += v as f64;
            pos_count += 1;
        } else if v < -delta {
            neg_sum += v.abs() as f64;
            neg_count += 1;
        }
    }
    let x_pos = if pos_count > 0 {
        (pos_sum / pos_count as f64) as f32
    } else {
        0.0
    };
    let x_neg = if neg_count > 0 {
        (neg_sum / neg_count as f64) as f32
    } else {
        0.0
    };
    let out = x.map(|v| {
        if v > delta {
            x_pos
        } else if v < -delta {
            -x_neg
        } else {
            0.0
        }
    });
    Ok((
        out,
        TernaryParams {
            delta,
            x_pos,
            x_neg,
        },
    ))
}

/// Fixed-point quantization to `f` fractional bits:
/// `y = tanh(x)/(2 max|tanh(x)|) + 1/2`, rounded onto the `2^f - 1` grid
/// (half away from zero), then mapped back to `[-1, 1]` as `2q - 1`.
pub fn quantize_fixed_point(x: &Tensor, f: u32) -> Result<Tensor> {
    if f == 0 {
        return Err(Error::InvalidConfig("bit-width must be >= 1".into()));
    }
    let max_tanh = x
        .data()
        .iter()
        .map(|&v| v.tanh().abs())
        .fold(0.0f32, f32::max);
    if max_tanh == 0.0 {
        return Ok(Tensor::zeros(x.shape()));
    }
    let levels = (2u64.pow(f) - 1) as f32;
    Ok(x.map(|v| {
        let y = v.tanh() / (2.0 * max_tanh) + 0.5;
        // f32::round ties away from zero, the rounding mode fixed here.
        let q = (y * levels).round() / levels;
        2.0 * q - 1.0
    }))
}

/// Linear combination of `+-1` bases (bit 1 encodes `+1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCombination {
    pub p: usize,
    pub epsilon: Vec<f32>,
    pub bases: Vec<BitPlane>,
}

impl LinearCombination {
    /// Dense `sum_i epsilon_i * D_i` as a flat tensor.
    pub fn reconstruct(&self) -> Tensor {
        let len = self.bases.first().map_or(0, BitPlane::len);
        let mut out = vec![0.0f32; len];
        for (eps, base) in self.epsilon.iter().zip(&self.bases) {
            for (idx, o) in out.iter_mut().enumerate() {
                *o += eps * if base.get(idx) { 1.0 } else { -1.0 };
            }
        }
        Tensor::from_flat(out)
    }
}

/// Solves `g * solution = rhs` by Gaussian elimination with partial pivoting.
/// The systems here are tiny (P x P with P in single digits).
fn solve_dense(mut g: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Result<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| g[a][col].abs().total_cmp(&g[b][col].abs()))
            .unwrap();
        if g[pivot][col].abs() < 1e-30 {
            return Err(Error::InvalidConfig(
                "singular system in linear-combination fit".into(),
            ));
        }
        g.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let factor = g[row][col] / g[col][col];
            for k in col..n {
                g[row][k] -= factor * g[col][k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut solution = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in row + 1..n {
            acc -= g[row][k] * solution[k];
        }
        solution[row] = acc / g[row][row];
    }
    Ok(solution)
}

/// Fits `x ~ sum_i epsilon_i * D_i` with fixed bases
/// `D_i = sign(x - mean(x) + u_i * std(x))`, `u_i` uniform on `[-1, 1]`
/// (the single base sits at `u = 0`), coefficients from ridge-regularized
/// normal equations.
pub fn fit_linear_combination(x: &Tensor, p: usize) -> Result<LinearCombination> {
    if p == 0 {
        return Err(Error::InvalidConfig("base count must be >= 1".into()));
    }
    if x.is_empty() {
        return Err(Error::EmptyTensor("cannot fit bases on empty tensor".into()));
    }
    let n = x.len();
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let sigma = std_dev(x)? as f64;
    let shifts: Vec<f64> = if p == 1 {
        vec![0.0]
    } else {
        (0..p)
            .map(|i| -1.0 + 2.0 * i as f64 / (p - 1) as f64)
            .collect()
    };
    let bases: Vec<BitPlane> = shifts
        .iter()
        .map(|&u| BitPlane::from_fn(n, |idx| x.data()[idx] as f64 - mean + u * sigma >= 0.0))
        .collect();

    const RIDGE: f64 = 1e-8;
    let signed = |base: &BitPlane, idx: usize| if base.get(idx) { 1.0f64 } else { -1.0 };
    let mut gram = vec![vec![0.0f64; p]; p];
    let mut rhs = vec![0.0f64; p];
    for i in 0..p {
        for j in i..p {
            let mut acc = 0.0f64;
            for idx in 0..n {
                acc += signed(&bases[i], idx) * signed(&bases[j], idx);
            }
            gram[i][j] = acc;
            gram[j][i] = acc;
        }
        gram[i][i] += RIDGE;
        rhs[i] = x
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &v)| v as f64 * signed(&bases[i], idx))
            .sum();
    }
    let epsilon = solve_dense(gram, rhs)?
        .into_iter()
        .map(|e| e as f32)
        .collect();
    Ok(LinearCombination { p, epsilon, bases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sign_examples() {
        let out = binarize_sign(&Tensor::from_flat(vec![0.0]));
        assert_eq!(out.data(), &[1.0]);
        let out = binarize_sign(&Tensor::from_flat(vec![-0.1, 0.1]));
        assert_eq!(out.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn sign_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let x = Tensor::from_flat((0..100).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let once = binarize_sign(&x);
        let twice = binarize_sign(&once);
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn sign_backward_is_identity() {
        let g = Tensor::from_flat(vec![0.5, -2.0, 0.0]);
        assert_eq!(binarize_sign_backward(&g).data(), g.data());
        let z = Tensor::zeros([1, 1, 1, 3]);
        assert!(binarize_sign_backward(&z).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ternarize_example() {
        let x = Tensor::from_flat(vec![-2.0, -1.0, 0.1, 1.0, 2.0]);
        let (out, params) = ternarize(&x, 0.5).unwrap();
        assert_eq!(params.x_pos, 1.5);
        assert_eq!(params.x_neg, 1.5);
        assert_eq!(out.data(), &[-1.5, -1.5, 0.0, 1.5, 1.5]);
    }

    #[test]
    fn ternarize_saturating_threshold() {
        let x = Tensor::from_flat(vec![-0.3, 0.2, 0.4]);
        let (out, params) = ternarize(&x, 10.0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(params.x_pos, 0.0);
        assert_eq!(params.x_neg, 0.0);
    }

    #[test]
    fn ternarize_zero_threshold_keeps_exact_zeros_only() {
        let x = Tensor::from_flat(vec![-1.0, 0.0, 0.5, 1.5]);
        let (out, _) = ternarize(&x, 0.0).unwrap();
        assert_eq!(out.data()[1], 0.0);
        assert!(out.data().iter().filter(|&&v| v == 0.0).count() == 1);
    }

    #[test]
    fn ternarize_output_is_three_valued() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let x = Tensor::from_flat((0..300).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (out, params) = ternarize(&x, 0.4).unwrap();
        for &v in out.data() {
            assert!(v == params.x_pos || v == -params.x_neg || v == 0.0);
        }
        assert!(ternarize(&x, -0.1).is_err());
    }

    #[test]
    fn fixed_point_extremes_map_to_unit() {
        for c in [0.7f32, 3.0] {
            let out = quantize_fixed_point(&Tensor::from_flat(vec![c, -c]), 4).unwrap();
            assert!((out.data()[0] - 1.0).abs() <= 1e-6);
            assert!((out.data()[1] + 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn fixed_point_one_bit_is_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let x = Tensor::from_flat((0..100).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let out = quantize_fixed_point(&x, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn fixed_point_two_bit_example() {
        let out = quantize_fixed_point(&Tensor::from_flat(vec![-1.0, 0.0, 1.0]), 2).unwrap();
        // Direct formula oracle: y = 0, 1/2, 1; grid size 3; the middle value
        // rounds 1.5 away from zero to 2, giving 2*(2/3) - 1 = 1/3.
        assert!((out.data()[0] + 1.0).abs() <= 1e-6);
        assert!((out.data()[1] - 1.0 / 3.0).abs() <= 1e-6);
        assert!((out.data()[2] - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn fixed_point_bounded_and_guarded() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let x = Tensor::from_flat((0..200).map(|_| rng.gen_range(-4.0..4.0)).collect());
        for f in [1, 2, 3, 8] {
            let out = quantize_fixed_point(&x, f).unwrap();
            assert!(out.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
        let zeros = quantize_fixed_point(&Tensor::zeros([1, 1, 2, 2]), 3).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        assert!(quantize_fixed_point(&x, 0).is_err());
    }

    fn residual(x: &Tensor, fit: &LinearCombination) -> f64 {
        let rec = fit.reconstruct();
        x.data()
            .iter()
            .zip(rec.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn single_base_closed_form() {
        // Zero-mean x: epsilon_1 = <x, D_1> / n up to the ridge term.
        let x = Tensor::from_flat(vec![-1.5, -0.5, 0.5, 1.5]);
        let fit = fit_linear_combination(&x, 1).unwrap();
        let d: Vec<f32> = fit.bases[0]
            .to_bools()
            .iter()
            .map(|&b| if b { 1.0 } else { -1.0 })
            .collect();
        let want: f32 = x.data().iter().zip(&d).map(|(a, b)| a * b).sum::<f32>() / 4.0;
        assert!((fit.epsilon[0] - want).abs() <= 1e-5);
    }

    #[test]
    fn already_binary_input_reconstructs_exactly() {
        let x = Tensor::from_flat(vec![1.0, -1.0, 1.0, 1.0]);
        let fit = fit_linear_combination(&x, 1).unwrap();
        assert!((fit.epsilon[0] - 1.0).abs() <= 1e-6);
        let rec = fit.reconstruct();
        for (a, b) in rec.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn residual_shrinks_with_more_bases() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let x = Tensor::from_flat((0..500).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let norms: Vec<f64> = [1usize, 2, 3, 5]
            .iter()
            .map(|&p| residual(&x, &fit_linear_combination(&x, p).unwrap()))
            .collect();
        for pair in norms.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{norms:?}");
        }
        let x_norm = x
            .data()
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(norms[0] <= x_norm + 1e-6);
    }

    #[test]
    fn fit_rejects_degenerate_requests() {
        let x = Tensor::from_flat(vec![1.0, 2.0]);
        assert!(fit_linear_combination(&x, 0).is_err());
        assert!(fit_linear_combination(&Tensor::zeros([0, 1, 1, 1]), 1).is_err());
    }
}
