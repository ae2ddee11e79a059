//! Piecewise activation quantizer.
//!
//! Activations are cut into a zero piece below `v_1` and N non-zero pieces
//! with trainable endpoints `v_i` and coefficients `beta_i`. The backward pass
//! runs over a shifted set of endpoints `t_0..t_N`: piece midpoints inside,
//! `v_N + lambda_delta` above, and the mirror of `t_1` about `v_1` below.
//! Outside `[t_0, t_N)` the input gradient saturates to zero.

use serde::{Deserialize, Serialize};

use crate::bitops::BitPlane;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum endpoint gap enforced by the sorted-v projection.
pub const DELTA_V: f32 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationQuantizerState {
    n: usize,
    v: Vec<f32>,
    beta: Vec<f32>,
    lambda_a: f32,
    lambda_delta: f32,
    /// Derived backward endpoints, kept in sync with `v`.
    t: Vec<f32>,
}

fn backward_endpoints(v: &[f32], lambda_delta: f32) -> Vec<f32> {
    let n = v.len();
    let mut t = vec![0.0f32; n + 1];
    for i in 1..n {
        t[i] = (v[i - 1] + v[i]) / 2.0;
    }
    t[n] = v[n - 1] + lambda_delta;
    t[0] = 2.0 * v[0] - t[1];
    t
}

/// Ascending sweep clamping each endpoint to at least `min_gap` above its
/// predecessor.
pub fn project_sorted(v: &mut [f32], min_gap: f32) {
    for i in 1..v.len() {
        if v[i] < v[i - 1] + min_gap {
            v[i] = v[i - 1] + min_gap;
        }
    }
}

/// Default `lambda_delta`: half the mean gap between consecutive initial
/// endpoints (half the endpoint itself when there is only one).
pub fn default_lambda_delta(v: &[f32]) -> f32 {
    if v.len() < 2 {
        0.5 * v[0]
    } else {
        let span = v[v.len() - 1] - v[0];
        0.5 * span / (v.len() - 1) as f32
    }
}

impl ActivationQuantizerState {
    pub fn new(v: Vec<f32>, beta: Vec<f32>, lambda_a: f32, lambda_delta: f32) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::InvalidConfig("need at least one piece".into()));
        }
        if v.len() != beta.len() {
            return Err(Error::LengthMismatch {
                left: v.len(),
                right: beta.len(),
            });
        }
        if !(lambda_a > 0.0) || !(lambda_delta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_a and lambda_delta must be positive, got {lambda_a} and {lambda_delta}"
            )));
        }
        if !v.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::InvalidConfig(
                "activation endpoints must be strictly ascending".into(),
            ));
        }
        let t = backward_endpoints(&v, lambda_delta);
        if !t.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::InvalidConfig(
                "derived backward endpoints are not ascending".into(),
            ));
        }
        Ok(Self {
            n: v.len(),
            v,
            beta,
            lambda_a,
            lambda_delta,
            t,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn beta(&self) -> &[f32] {
        &self.beta
    }

    /// Backward endpoints `t_0..t_N` (length N+1).
    pub fn t(&self) -> &[f32] {
        &self.t
    }

    pub fn lambda_a(&self) -> f32 {
        self.lambda_a
    }

    pub fn lambda_delta(&self) -> f32 {
        self.lambda_delta
    }

    /// Installs updated parameters: projects `v` back to strictly ascending
    /// (minimum gap [`DELTA_V`]) and refreshes the derived `t`.
    pub fn set_params(&mut self, mut v: Vec<f32>, beta: Vec<f32>) -> Result<()> {
        if v.len() != self.n || beta.len() != self.n {
            return Err(Error::LengthMismatch {
                left: v.len().max(beta.len()),
                right: self.n,
            });
        }
        project_sorted(&mut v, DELTA_V);
        self.t = backward_endpoints(&v, self.lambda_delta);
        self.v = v;
        self.beta = beta;
        Ok(())
    }
}

/// Linear-interpolation quantile of pre-sorted data at fraction `p`.
fn sorted_quantile(sorted: &[f32], p: f32) -> f32 {
    let h = (sorted.len() - 1) as f32 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f32;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Data-driven initial state: endpoints at the `i/(N+1)` quantiles of the
/// sample's positive part, coefficients at the within-piece means.
///
/// Falls back to a uniform grid on `[0.1, 2.0]` when the sample has too few
/// positive values, and to interval midpoints for pieces without members.
pub fn init_activation_state(
    sample: &Tensor,
    n: usize,
    lambda_a: f32,
    lambda_delta: f32,
) -> Result<ActivationQuantizerState> {
    if sample.is_empty() {
        return Err(Error::EmptyTensor(
            "cannot initialize activation quantizer from empty sample".into(),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one piece".into()));
    }
    let v = init_endpoints(sample, n);
    let beta = init_coefficients(sample, &v, lambda_delta);
    ActivationQuantizerState::new(v, beta, lambda_a, lambda_delta)
}

/// As [`init_activation_state`] but with `lambda_delta` derived from the
/// initial endpoint gaps via [`default_lambda_delta`].
pub fn init_activation_state_auto(
    sample: &Tensor,
    n: usize,
    lambda_a: f32,
) -> Result<ActivationQuantizerState> {
    if sample.is_empty() {
        return Err(Error::EmptyTensor(
            "cannot initialize activation quantizer from empty sample".into(),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one piece".into()));
    }
    let v = init_endpoints(sample, n);
    let lambda_delta = default_lambda_delta(&v).max(DELTA_V);
    let beta = init_coefficients(sample, &v, lambda_delta);
    ActivationQuantizerState::new(v, beta, lambda_a, lambda_delta)
}

fn init_endpoints(sample: &Tensor, n: usize) -> Vec<f32> {
    let mut positives: Vec<f32> = sample.data().iter().copied().filter(|&x| x > 0.0).collect();
    let mut v: Vec<f32> = if positives.len() <= n {
        if n == 1 {
            vec![1.05]
        } else {
            (0..n)
                .map(|i| 0.1 + (2.0 - 0.1) * i as f32 / (n - 1) as f32)
                .collect()
        }
    } else {
        positives.sort_by(f32::total_cmp);
        (1..=n)
            .map(|i| sorted_quantile(&positives, i as f32 / (n + 1) as f32))
            .collect()
    };
    project_sorted(&mut v, DELTA_V);
    v
}

fn init_coefficients(sample: &Tensor, v: &[f32], lambda_delta: f32) -> Vec<f32> {
    let n = v.len();
    let mut sums = vec![0.0f64; n];
    let mut counts = vec![0usize; n];
    for &x in sample.data() {
        let k = v.iter().take_while(|&&edge| edge <= x).count();
        if k >= 1 {
            sums[k - 1] += x as f64;
            counts[k - 1] += 1;
        }
    }
    (0..n)
        .map(|i| {
            if counts[i] > 0 {
                (sums[i] / counts[i] as f64) as f32
            } else if i + 1 < n {
                (v[i] + v[i + 1]) / 2.0
            } else {
                v[n - 1] + lambda_delta / 2.0
            }
        })
        .collect()
}

/// Forward map: 0 below `v_1`, `beta_i` on `[v_i, v_{i+1})`, `beta_N` above
/// `v_N` (half-open, lower-closed).
pub fn quantize_activations_forward(a: &Tensor, state: &ActivationQuantizerState) -> Tensor {
    a.map(|x| {
        let k = state.v.iter().take_while(|&&edge| edge <= x).count();
        if k == 0 {
            0.0
        } else {
            state.beta[k - 1]
        }
    })
}

#[inline]
fn input_slope(x: f32, state: &ActivationQuantizerState) -> f32 {
    let j = state.t.iter().take_while(|&&edge| edge <= x).count();
    if j == 0 || j > state.n {
        return 0.0;
    }
    let prev = if j >= 2 { state.beta[j - 2] } else { 0.0 };
    state.lambda_a * (state.beta[j - 1] - prev)
}

/// Surrogate input gradient: slope `lambda_a * (beta_j - beta_{j-1})` on
/// `[t_{j-1}, t_j)` (with `beta_0 = 0`), zero outside `[t_0, t_N)`.
pub fn activation_backward_input(
    grad_out: &Tensor,
    a: &Tensor,
    state: &ActivationQuantizerState,
) -> Result<Tensor> {
    if grad_out.shape() != a.shape() {
        return Err(Error::ShapeMismatch(format!(
            "grad shape {:?} vs activation shape {:?}",
            grad_out.shape(),
            a.shape()
        )));
    }
    let mut out = Tensor::zeros(a.shape());
    for ((g, &x), o) in grad_out
        .data()
        .iter()
        .zip(a.data())
        .zip(out.data_mut().iter_mut())
    {
        *o = g * input_slope(x, state);
    }
    Ok(out)
}

/// Exact coefficient gradient: `beta_i` receives the sum of `grad_out` over
/// its forward piece (the forward map is linear in beta).
pub fn grad_beta(
    grad_out: &Tensor,
    a: &Tensor,
    state: &ActivationQuantizerState,
) -> Result<Vec<f32>> {
    if grad_out.shape() != a.shape() {
        return Err(Error::ShapeMismatch(format!(
            "grad shape {:?} vs activation shape {:?}",
            grad_out.shape(),
            a.shape()
        )));
    }
    let mut acc = vec![0.0f64; state.n];
    for (g, &x) in grad_out.data().iter().zip(a.data()) {
        let k = state.v.iter().take_while(|&&edge| edge <= x).count();
        if k >= 1 {
            acc[k - 1] += *g as f64;
        }
    }
    Ok(acc.into_iter().map(|x| x as f32).collect())
}

/// Surrogate endpoint gradient: `v_i` receives
/// `lambda_a * (beta_i - beta_{i-1})` times the sum of `grad_out` over
/// `[t_{i-1}, t_i)` (with `beta_0 = 0`).
pub fn grad_v(
    grad_out: &Tensor,
    a: &Tensor,
    state: &ActivationQuantizerState,
) -> Result<Vec<f32>> {
    if grad_out.shape() != a.shape() {
        return Err(Error::ShapeMismatch(format!(
            "grad shape {:?} vs activation shape {:?}",
            grad_out.shape(),
            a.shape()
        )));
    }
    let mut window = vec![0.0f64; state.n];
    for (g, &x) in grad_out.data().iter().zip(a.data()) {
        let j = state.t.iter().take_while(|&&edge| edge <= x).count();
        if j >= 1 && j <= state.n {
            window[j - 1] += *g as f64;
        }
    }
    Ok((0..state.n)
        .map(|i| {
            let prev = if i >= 1 { state.beta[i - 1] } else { 0.0 };
            (state.lambda_a as f64 * (state.beta[i] - prev) as f64 * window[i]) as f32
        })
        .collect())
}

/// The N disjoint `{0,1}` base planes: plane i set exactly where the forward
/// assigns `beta_i`; elements below `v_1` appear in none.
pub fn decompose_activation_bases(a: &Tensor, state: &ActivationQuantizerState) -> Vec<BitPlane> {
    let mut planes: Vec<BitPlane> = (0..state.n).map(|_| BitPlane::zeros(a.len())).collect();
    for (idx, &x) in a.data().iter().enumerate() {
        let k = state.v.iter().take_while(|&&edge| edge <= x).count();
        if k >= 1 {
            planes[k - 1].set(idx, true);
        }
    }
    planes
}
