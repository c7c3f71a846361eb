//! Feature-map reweight unit.
//!
//! A reweight unit takes an `H x W x C` feature map `M`, applies `K` learned
//! 1x1 linear constraints `g`, standardizes the responses over the channel
//! axis, adds learned thresholds `T` and keeps the tightest constraint:
//!
//! ```text
//! W  = alpha * relu(min_k(CN(g * M) + T))
//! M' = W o M          (W broadcast over the C channels of M)
//! ```
//!
//! Pixels that satisfy every constraint get a positive weight; the rest are
//! zeroed out. The classical near-achromatic pixel selector is the special
//! case `C = 2` (chromaticity), `K = 4`, without channel normalization, see
//! [`achromatic_mask`] and [`AchromaticRegionSpec::to_params`].

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

/// Epsilon of the per-pixel channel normalization.
pub const CHANNEL_NORM_EPS: f64 = 1e-5;

/// Trainable parameters of one reweight unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ReWUParams {
    /// `1 x 1 x C x K` constraint kernels.
    pub kernel: Tensor,
    /// Length-K thresholds.
    pub thresholds: Tensor,
    /// Intensity of the reweighting map.
    pub alpha: f64,
}

impl ReWUParams {
    pub fn new(kernel: Tensor, thresholds: Tensor, alpha: f64) -> Result<Self> {
        let p = ReWUParams {
            kernel,
            thresholds,
            alpha,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let [1, 1, c, k] = *self.kernel.shape() else {
            return Err(Error::contract(
                "ReWUParams",
                alloc::format!("kernel must be 1x1xCxK, got {:?}", self.kernel.shape()),
            ));
        };
        if c == 0 || k == 0 {
            return Err(Error::contract("ReWUParams", "C and K must be at least 1"));
        }
        if self.thresholds.shape() != [k] {
            return Err(Error::shape("ReWUParams", &[k], self.thresholds.shape()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::contract("ReWUParams", "alpha must be finite"));
        }
        Ok(())
    }

    /// Input channel count `C`.
    pub fn channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    /// Constraint count `K`.
    pub fn constraints(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel.len() + self.thresholds.len() + 1
    }
}

/// Whether the constraint responses are standardized per pixel before the
/// thresholds are added.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Channel,
    /// Raw `g * M + T`, used to reproduce closed-form constraint sets.
    Bypass,
}

/// Tape handles of a reweight unit's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ReWUVars {
    pub kernel: Var,
    pub thresholds: Var,
    pub alpha: Var,
}

impl ReWUVars {
    /// Places `params` on the tape, trainable or frozen.
    pub fn on_tape(tape: &mut Tape, params: &ReWUParams, trainable: bool) -> Self {
        ReWUVars {
            kernel: tape.leaf(params.kernel.clone(), trainable),
            thresholds: tape.leaf(params.thresholds.clone(), trainable),
            alpha: tape.leaf(Tensor::scalar(params.alpha), trainable),
        }
    }
}

/// Tape handles of a reweight unit's outputs.
#[derive(Debug, Clone, Copy)]
pub struct ReWUOutput {
    /// Reweighted map `M'`, same shape as the input.
    pub reweighted: Var,
    /// Single-channel reweighting map `W`.
    pub weights: Var,
}

/// Records a reweight unit on `tape`.
pub fn rewu_graph(
    tape: &mut Tape,
    input: Var,
    params: ReWUVars,
    normalization: Normalization,
) -> Result<ReWUOutput> {
    let (_, _, c) = tape.value(input).dims3()?;
    let ks = tape.value(params.kernel).shape();
    if ks.len() != 4 || ks[2] != c {
        return Err(Error::Contract {
            op: "rewu_forward",
            reason: alloc::format!("input has {c} channels but kernel shape is {ks:?}"),
        });
    }
    let k = ks[3];
    let zero_bias = tape.constant(Tensor::zeros(&[k]));
    let responses = tape.conv2d(input, params.kernel, zero_bias, 1, Padding::Valid)?;
    let responses = match normalization {
        Normalization::Channel => tape.channel_normalize(responses, CHANNEL_NORM_EPS)?,
        Normalization::Bypass => responses,
    };
    let shifted = tape.add_channelwise(responses, params.thresholds)?;
    let tightest = tape.min_channel(shifted)?;
    let active = tape.relu(tightest);
    let weights = tape.scale(active, params.alpha)?;
    let reweighted = tape.hadamard(weights, input)?;
    Ok(ReWUOutput {
        reweighted,
        weights,
    })
}

/// Reweighted map and reweighting map of a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Reweighted {
    pub output: Tensor,
    pub weights: Tensor,
}

/// Forward pass without gradient tracking.
pub fn rewu_forward(input: &Tensor, params: &ReWUParams) -> Result<Reweighted> {
    rewu_forward_with(input, params, Normalization::Channel)
}

pub fn rewu_forward_with(
    input: &Tensor,
    params: &ReWUParams,
    normalization: Normalization,
) -> Result<Reweighted> {
    params.validate()?;
    let mut tape = Tape::new();
    let m = tape.constant(input.clone());
    let vars = ReWUVars::on_tape(&mut tape, params, false);
    let out = rewu_graph(&mut tape, m, vars, normalization)?;
    Ok(Reweighted {
        output: tape.value(out.reweighted).clone(),
        weights: tape.value(out.weights).clone(),
    })
}

/// Per-pixel channel standardization without gradient tracking.
pub fn channel_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.channel_normalize(v, eps)?;
    Ok(tape.value(y).clone())
}

// -------------------------------------------------------------------------
// Threshold initialization
// -------------------------------------------------------------------------

fn std_normal_pdf(z: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * libm::exp(-0.5 * z * z)
}

/// `1 - Phi(z)` without cancellation in the upper tail.
fn std_normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / core::f64::consts::SQRT_2)
}

fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(fa, flm, fm, a, m);
    let right = simpson(fm, frm, fb, m, b);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive_simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`. The interval is first cut into `panels` equal pieces so that a
/// narrow peak cannot hide between the initial sample points.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, panels: usize, tol: f64) -> f64 {
    let panels = panels.max(1);
    let width = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let lo = a + i as f64 * width;
            let hi = if i + 1 == panels { b } else { lo + width };
            let (fa, fb, fm) = (f(lo), f(hi), f(0.5 * (lo + hi)));
            let whole = simpson(fa, fm, fb, lo, hi);
            adaptive_simpson(f, lo, hi, fa, fm, fb, whole, tol / panels as f64, 48)
        })
        .sum()
}

/// Threshold that centres `min_k` of `K` standardized responses at zero:
/// `-E[min of K i.i.d. standard normals]`, so that roughly half of the
/// initial reweighting map is active.
pub fn tau_init(k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("tau_init", "K must be at least 1"));
    }
    if k == 1 {
        // mean of a single standard normal
        return Ok(0.0);
    }
    let kf = k as f64;
    let power = (k - 1) as f64;
    let integrand = move |z: f64| z * std_normal_pdf(z) * libm::pow(std_normal_sf(z), power);
    let expectation = kf * integrate(&integrand, -12.0, 12.0, 96, 1e-10);
    Ok(-expectation)
}

/// Standard-normal kernels, thresholds at [`tau_init`], `alpha = 1`.
pub fn init_rewu(channels: usize, constraints: usize, seed: u64) -> Result<ReWUParams> {
    init_rewu_from(channels, constraints, &mut rng::seeded(seed))
}

pub fn init_rewu_from(channels: usize, constraints: usize, rng: &mut Rng) -> Result<ReWUParams> {
    if channels == 0 || constraints == 0 {
        return Err(Error::contract("init_rewu", "C and K must be at least 1"));
    }
    let kernel = Tensor::from_fn(&[1, 1, channels, constraints], |_| {
        rng.sample::<f64, _>(StandardNormal)
    });
    let tau = tau_init(constraints)?;
    ReWUParams::new(kernel, Tensor::full(&[constraints], tau), 1.0)
}

// -------------------------------------------------------------------------
// Closed-form achromatic region
// -------------------------------------------------------------------------

/// Diamond-shaped neutral region around `(u0, v0)` in the `r/(r+g+b)`,
/// `g/(r+g+b)` chromaticity plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AchromaticRegionSpec {
    pub u0: f64,
    pub v0: f64,
    pub threshold: f64,
}

/// Rows of the constraint matrix acting on `[u, v]`.
pub const ACHROMATIC_CONSTRAINTS: [[f64; 2]; 4] = [[1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [-1.0, -1.0]];

impl AchromaticRegionSpec {
    pub fn new(u0: f64, v0: f64, threshold: f64) -> Result<Self> {
        if !(u0 > 0.0 && u0 < 1.0 && v0 > 0.0 && v0 < 1.0) {
            return Err(Error::contract(
                "AchromaticRegionSpec",
                "neutral point must lie in (0, 1)^2",
            ));
        }
        if threshold.is_nan() || threshold <= 0.0 {
            return Err(Error::contract(
                "AchromaticRegionSpec",
                "threshold must be positive",
            ));
        }
        Ok(AchromaticRegionSpec { u0, v0, threshold })
    }

    /// Offsets paired with [`ACHROMATIC_CONSTRAINTS`].
    pub fn offsets(&self) -> [f64; 4] {
        let (t, u0, v0) = (self.threshold, self.u0, self.v0);
        [t - u0 + v0, t + u0 - v0, t - u0 - v0, t + u0 + v0]
    }

    /// The region as reweight-unit parameters over a 2-channel `(u, v)` map;
    /// evaluate with [`Normalization::Bypass`].
    pub fn to_params(&self) -> ReWUParams {
        // kernel[0, 0, c, k] = A[k][c]
        let mut g = vec![0.0; 8];
        for (k, row) in ACHROMATIC_CONSTRAINTS.iter().enumerate() {
            for (c, &a) in row.iter().enumerate() {
                g[c * 4 + k] = a;
            }
        }
        ReWUParams {
            kernel: Tensor::new(&[1, 1, 2, 4], g).expect("8 values"),
            thresholds: Tensor::vector(&self.offsets()),
            alpha: 1.0,
        }
    }
}

/// `relu(min(A [u, v]^T + b))`: positive exactly when `(u, v)` lies strictly
/// inside the neutral diamond.
pub fn achromatic_mask(u: f64, v: f64, spec: &AchromaticRegionSpec) -> f64 {
    let b = spec.offsets();
    let tightest = ACHROMATIC_CONSTRAINTS
        .iter()
        .zip(b)
        .map(|(row, bk)| row[0] * u + row[1] * v + bk)
        .fold(f64::INFINITY, f64::min);
    tightest.max(0.0)
}

/// `(u, v) = (r, g) / (r + g + b)` for every pixel of an RGB map, as a
/// 2-channel map. Black pixels map to `(0, 0)`.
pub fn chromaticity_map(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::contract("chromaticity_map", "expected 3 channels"));
    }
    let mut out = Vec::with_capacity(h * w * 2);
    for px in image.data().chunks_exact(3) {
        let s = px[0] + px[1] + px[2];
        if s > 0.0 {
            out.extend([px[0] / s, px[1] / s]);
        } else {
            out.extend([0.0, 0.0]);
        }
    }
    Tensor::new(&[h, w, 2], out)
}
