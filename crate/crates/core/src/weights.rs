//! Piecewise weight quantizer.
//!
//! The weight range is cut into M non-zero pieces whose endpoints are fixed
//! multiples of std(W), plus a central dead zone that quantizes to 0. Each
//! piece carries one scaling coefficient alpha_i (the piece mean, which
//! minimizes within-piece squared error); the backward pass uses a
//! piecewise-constant surrogate slope proportional to the level jumps.

use serde::{Deserialize, Serialize};

use crate::bitops::BitPlane;
use crate::error::{Error, Result};
use crate::tensor::{masked_mean, std_dev, Tensor};

/// Degenerate-std guard: all-equal tensors still get non-zero-width pieces.
pub const EPS_SIGMA: f32 = 1e-8;

/// Static configuration of the weight quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightQuantizerConfig {
    m: usize,
    lambda_w: f32,
    multipliers: Vec<f32>,
}

/// Default endpoint multipliers (units of std(W)).
///
/// M = 8 uses the reference eight-piece table (+-0.25, +-0.5, +-1.0, +-1.5);
/// other even M space the per-side multipliers uniformly over [0.25, 2.0].
pub fn default_multipliers(m: usize) -> Result<Vec<f32>> {
    if m < 2 || m % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "piece count must be a positive even integer, got {m}"
        )));
    }
    let half = m / 2;
    let positive: Vec<f32> = if m == 8 {
        vec![0.25, 0.5, 1.0, 1.5]
    } else if half == 1 {
        vec![0.25]
    } else {
        (0..half)
            .map(|i| 0.25 + (2.0 - 0.25) * i as f32 / (half - 1) as f32)
            .collect()
    };
    let mut multipliers: Vec<f32> = positive.iter().rev().map(|&x| -x).collect();
    multipliers.extend(&positive);
    Ok(multipliers)
}

impl WeightQuantizerConfig {
    pub fn new(m: usize, lambda_w: f32) -> Result<Self> {
        let multipliers = default_multipliers(m)?;
        Self::with_multipliers(m, lambda_w, multipliers)
    }

    pub fn with_multipliers(m: usize, lambda_w: f32, multipliers: Vec<f32>) -> Result<Self> {
        if m < 2 || m % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "piece count must be a positive even integer, got {m}"
            )));
        }
        if !(lambda_w > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda_w must be positive, got {lambda_w}"
            )));
        }
        if multipliers.len() != m {
            return Err(Error::InvalidConfig(format!(
                "{} multipliers for {} pieces",
                multipliers.len(),
                m
            )));
        }
        if !multipliers.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::InvalidConfig(
                "endpoint multipliers must be strictly ascending".into(),
            ));
        }
        if (0..m).any(|i| multipliers[i] != -multipliers[m - 1 - i]) {
            return Err(Error::InvalidConfig(
                "endpoint multipliers must be antisymmetric about 0".into(),
            ));
        }
        Ok(Self {
            m,
            lambda_w,
            multipliers,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn lambda_w(&self) -> f32 {
        self.lambda_w
    }

    pub fn multipliers(&self) -> &[f32] {
        &self.multipliers
    }
}

/// Endpoints for a concrete tensor: `u[i] = multiplier[i] * max(sigma, EPS_SIGMA)`.
pub fn weight_endpoints(config: &WeightQuantizerConfig, sigma: f32) -> Vec<f32> {
    let scale = sigma.max(EPS_SIGMA);
    config.multipliers.iter().map(|&c| c * scale).collect()
}

/// Identity of the piece a scalar falls into. `Piece` carries the 1-based id
/// in `1..=M`; the dead zone sits between pieces M/2 and M/2+1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieceId {
    Piece(usize),
    DeadZone,
}

/// Half-open, lower-closed piece lookup.
///
/// Piece 1 is `w < u_1`; pieces 2..=M/2 are `[u_{i-1}, u_i)`; the dead zone is
/// `[u_{M/2}, u_{M/2+1})`; pieces M/2+1..=M-1 are `[u_i, u_{i+1})`; piece M is
/// `w >= u_M`. Every finite scalar lands in exactly one piece.
pub fn piece_index(w: f32, u: &[f32]) -> PieceId {
    let m = u.len();
    let below = u.iter().take_while(|&&edge| edge <= w).count();
    if below == m / 2 {
        PieceId::DeadZone
    } else if below < m / 2 {
        PieceId::Piece(below + 1)
    } else {
        PieceId::Piece(below)
    }
}

/// Per-fit diagnostics; empty pieces fall back to interval midpoints silently
/// but are reported here (1-based ids).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub empty_pieces: Vec<usize>,
}

/// Midpoint fallback for an empty piece; the two unbounded tail pieces use the
/// nearest endpoint +- sigma/2.
fn empty_piece_fallback(piece: usize, u: &[f32], sigma: f32) -> f32 {
    let m = u.len();
    if piece == 1 {
        u[0] - sigma / 2.0
    } else if piece == m {
        u[m - 1] + sigma / 2.0
    } else if piece <= m / 2 {
        (u[piece - 2] + u[piece - 1]) / 2.0
    } else {
        (u[piece - 1] + u[piece]) / 2.0
    }
}

/// Scaling coefficients: the mean of each piece's members (the within-piece
/// least-squares optimum), midpoint fallback for empty pieces.
pub fn fit_scaling_coefficients(w: &Tensor, u: &[f32]) -> Result<(Vec<f32>, FitDiagnostics)> {
    w.check_finite()?;
    let sigma = std_dev(w)?.max(EPS_SIGMA);
    let m = u.len();
    let mut alpha = Vec::with_capacity(m);
    let mut diagnostics = FitDiagnostics::default();
    for piece in 1..=m {
        let mask: Vec<bool> = w
            .data()
            .iter()
            .map(|&x| piece_index(x, u) == PieceId::Piece(piece))
            .collect();
        match masked_mean(w, &mask)? {
            Some(mean) => alpha.push(mean),
            None => {
                alpha.push(empty_piece_fallback(piece, u, sigma));
                diagnostics.empty_pieces.push(piece);
            }
        }
    }
    Ok((alpha, diagnostics))
}

/// Fitted piecewise approximation of one weight tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPiecewise {
    u: Vec<f32>,
    s: Vec<f32>,
    alpha: Vec<f32>,
}

impl WeightPiecewise {
    /// Fits endpoints and coefficients on a live weight tensor.
    pub fn fit(config: &WeightQuantizerConfig, w: &Tensor) -> Result<(Self, FitDiagnostics)> {
        if w.is_empty() {
            return Err(Error::EmptyTensor("cannot fit quantizer on empty tensor".into()));
        }
        let u = weight_endpoints(config, std_dev(w)?);
        let (alpha, diagnostics) = fit_scaling_coefficients(w, &u)?;
        Ok((Self::from_parts(u, alpha)?, diagnostics))
    }

    /// Rebuilds a state from serialized endpoints and coefficients.
    pub fn from_parts(u: Vec<f32>, alpha: Vec<f32>) -> Result<Self> {
        if u.len() != alpha.len() {
            return Err(Error::LengthMismatch {
                left: u.len(),
                right: alpha.len(),
            });
        }
        if u.len() < 2 || u.len() % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "need a positive even number of endpoints, got {}",
                u.len()
            )));
        }
        if !u.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::InvalidConfig(
                "endpoints must be strictly ascending".into(),
            ));
        }
        let s: Vec<f32> = u.windows(2).map(|p| (p[0] + p[1]) / 2.0).collect();
        Ok(Self { u, s, alpha })
    }

    pub fn m(&self) -> usize {
        self.u.len()
    }

    pub fn endpoints(&self) -> &[f32] {
        &self.u
    }

    /// Backward endpoints `s_i = (u_i + u_{i+1})/2`, length M-1.
    pub fn backward_endpoints(&self) -> &[f32] {
        &self.s
    }

    pub fn alpha(&self) -> &[f32] {
        &self.alpha
    }

    /// Output levels in ascending input order: the M/2 negative coefficients,
    /// the dead-zone 0, then the M/2 positive coefficients (M+1 entries).
    pub fn levels(&self) -> Vec<f32> {
        let half = self.alpha.len() / 2;
        let mut c = Vec::with_capacity(self.alpha.len() + 1);
        c.extend(&self.alpha[..half]);
        c.push(0.0);
        c.extend(&self.alpha[half..]);
        c
    }
}

/// Forward map: each element becomes its piece's coefficient, 0 in the dead
/// zone.
pub fn quantize_weights_forward(w: &Tensor, wp: &WeightPiecewise) -> Tensor {
    w.map(|x| match piece_index(x, &wp.u) {
        PieceId::DeadZone => 0.0,
        PieceId::Piece(p) => wp.alpha[p - 1],
    })
}

/// Surrogate gradient: on the backward piece `[s_{k-1}, s_k)` the slope is
/// `lambda_w * (c_{k+1} - c_k)` where c are the M+1 output levels (s_0 and s_M
/// implicitly at -/+ infinity). Elementwise product with `grad_out`.
pub fn weight_backward(
    grad_out: &Tensor,
    w: &Tensor,
    wp: &WeightPiecewise,
    lambda_w: f32,
) -> Result<Tensor> {
    if grad_out.shape() != w.shape() {
        return Err(Error::ShapeMismatch(format!(
            "grad shape {:?} vs weight shape {:?}",
            grad_out.shape(),
            w.shape()
        )));
    }
    let c = wp.levels();
    let mut out = Tensor::zeros(w.shape());
    for ((g, &x), o) in grad_out
        .data()
        .iter()
        .zip(w.data())
        .zip(out.data_mut().iter_mut())
    {
        let k = wp.s.iter().take_while(|&&edge| edge <= x).count();
        let slope = lambda_w * (c[k + 1] - c[k]);
        *o = g * slope;
    }
    Ok(out)
}

/// The M disjoint `{0,1}` base planes: plane i has a bit exactly where the
/// forward assigns alpha_i. Their union misses exactly the dead zone.
pub fn decompose_weight_bases(w: &Tensor, u: &[f32]) -> Vec<BitPlane> {
    let m = u.len();
    (1..=m)
        .map(|piece| {
            BitPlane::from_fn(w.len(), |idx| {
                piece_index(w.data()[idx], u) == PieceId::Piece(piece)
            })
        })
        .collect()
}
