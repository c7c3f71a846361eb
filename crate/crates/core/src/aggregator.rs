//! Global illuminant from per-patch estimates.

use alloc::vec::Vec;

use crate::colorlib::{self, Illuminant};
use crate::error::{Error, Result};

/// Confidence at or above which a patch counts as confident.
pub const CONFIDENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Median,
    Weighted,
    FallbackMedian,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Median => "median",
            Method::Weighted => "weighted",
            Method::FallbackMedian => "fallback_median",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchEstimate {
    pub illuminant: Illuminant,
    pub confidence: Option<f64>,
    pub grid_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub per_patch: Vec<PatchEstimate>,
    pub global: Illuminant,
    pub method_used: Method,
    /// Degrees, present when the ground truth was supplied.
    pub angular_error: Option<f64>,
}

/// Lower of the two middles for an even count.
fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Componentwise median, renormalized.
pub fn aggregate_median(locals: &[Illuminant]) -> Result<Illuminant> {
    if locals.is_empty() {
        return Err(Error::contract("aggregate_median", "no estimates"));
    }
    let mut column = Vec::with_capacity(locals.len());
    let mut rgb = [0.0; 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        column.clear();
        column.extend(locals.iter().map(|l| l.rgb()[ch]));
        *out = lower_median(&mut column);
    }
    Illuminant::from_rgb(rgb)
}

/// Confidence-weighted mean `sum(c_i L_i) / sum(c_i)`, summed in input order.
pub fn aggregate_weighted(locals: &[(Illuminant, f64)]) -> Result<Illuminant> {
    if locals.is_empty() {
        return Err(Error::contract("aggregate_weighted", "no estimates"));
    }
    if locals.iter().any(|&(_, c)| !(c >= 0.0) || !c.is_finite()) {
        return Err(Error::contract("aggregate_weighted", "confidences must be finite and nonnegative"));
    }
    let total: f64 = locals.iter().map(|&(_, c)| c).sum();
    if total <= 0.0 {
        return Err(Error::contract("aggregate_weighted", "all confidences are zero"));
    }
    let mut acc = [0.0; 3];
    for (l, c) in locals {
        for (a, v) in acc.iter_mut().zip(l.rgb()) {
            *a += c * v;
        }
    }
    Illuminant::from_rgb(acc.map(|a| a / total))
}

/// Median when no confidences are given or none reaches `threshold`,
/// otherwise the weighted mean over every patch.
pub fn aggregate(
    locals: &[Illuminant],
    confidences: Option<&[f64]>,
    threshold: f64,
    truth: Option<&Illuminant>,
) -> Result<EstimateReport> {
    if locals.is_empty() {
        return Err(Error::contract("aggregate", "no estimates"));
    }
    if let Some(c) = confidences {
        if c.len() != locals.len() {
            return Err(Error::contract("aggregate", "one confidence per estimate required"));
        }
    }
    let (global, method_used) = match confidences {
        None => (aggregate_median(locals)?, Method::Median),
        Some(c) if c.iter().all(|&c| c < threshold) => (aggregate_median(locals)?, Method::FallbackMedian),
        Some(c) => {
            let pairs: Vec<_> = locals.iter().copied().zip(c.iter().copied()).collect();
            (aggregate_weighted(&pairs)?, Method::Weighted)
        }
    };
    let per_patch = locals
        .iter()
        .enumerate()
        .map(|(i, &illuminant)| PatchEstimate {
            illuminant,
            confidence: confidences.map(|c| c[i]),
            grid_index: i,
        })
        .collect();
    let angular_error = truth
        .map(|t| colorlib::angular_error(global.rgb(), t.rgb()))
        .transpose()?;
    Ok(EstimateReport {
        per_patch,
        global,
        method_used,
        angular_error,
    })
}
