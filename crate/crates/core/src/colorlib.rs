//! Color physics and evaluation metrics.
//!
//! Images are linear RGB `H x W x 3` tensors. Illuminants are stored
//! l1-normalized. Under the von Kries (diagonal) model an observed pixel is
//! the intrinsic color scaled channelwise by the illuminant.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Mat3 = [[f64; 3]; 3];

/// Linear sRGB to CIE XYZ, D65 white.
pub const SRGB_TO_XYZ: Mat3 = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// Largest angular deviation of an augmented illuminant, in degrees.
pub const MAX_JITTER_DEGREES: f64 = 5.0;
/// Largest CIE 1960 `(u, v)` displacement of an augmented illuminant.
pub const MAX_JITTER_DUV: f64 = 0.006;

/// Color of a light source, l1-normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Illuminant {
    rgb: [f64; 3],
}

impl Illuminant {
    pub const NEUTRAL: Illuminant = Illuminant {
        rgb: [1.0 / 3.0; 3],
    };

    /// Normalizes any nonnegative, nonzero triplet.
    pub fn from_rgb(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::contract(
                "Illuminant",
                alloc::format!("components must be finite and nonnegative, got {rgb:?}"),
            ));
        }
        let s = rgb[0] + rgb[1] + rgb[2];
        if s <= 0.0 {
            return Err(Error::contract("Illuminant", "all components are zero"));
        }
        Ok(Illuminant {
            rgb: [rgb[0] / s, rgb[1] / s, rgb[2] / s],
        })
    }

    /// Accepts a triplet that is already on the simplex (within `1e-9`)
    /// without rescaling it.
    pub fn normalized(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::contract("Illuminant", "components must be nonnegative"));
        }
        if (rgb.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::contract("Illuminant", "components must sum to 1"));
        }
        Ok(Illuminant { rgb })
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.rgb
    }
}

fn check_rgb_image(op: &'static str, image: &Tensor) -> Result<()> {
    let (_, _, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::contract(op, alloc::format!("expected 3 channels, got {c}")));
    }
    Ok(())
}

fn scale_channels(image: &Tensor, gains: [f64; 3]) -> Tensor {
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        for (p, g) in px.iter_mut().zip(gains) {
            *p *= g;
        }
    }
    out
}

/// Renders an intrinsic image under `light`: `p = p* o L`.
pub fn apply_illuminant(image: &Tensor, light: &Illuminant) -> Result<Tensor> {
    check_rgb_image("apply_illuminant", image)?;
    Ok(scale_channels(image, light.rgb))
}

/// Exact inverse of [`apply_illuminant`]: `p* = p o L^-1`.
pub fn correct_image(image: &Tensor, light: &Illuminant) -> Result<Tensor> {
    check_rgb_image("correct_image", image)?;
    if light.rgb.iter().any(|&v| v <= 0.0) {
        return Err(Error::contract(
            "correct_image",
            "illuminant has a zero component",
        ));
    }
    Ok(scale_channels(image, light.rgb.map(|v| 1.0 / v)))
}

/// Display white balance: divides by `3 L`, so the neutral illuminant leaves
/// the image untouched.
pub fn white_balance(image: &Tensor, light: &Illuminant) -> Result<Tensor> {
    check_rgb_image("white_balance", image)?;
    if light.rgb.iter().any(|&v| v <= 0.0) {
        return Err(Error::contract("white_balance", "illuminant has a zero component"));
    }
    Ok(scale_channels(image, light.rgb.map(|v| 1.0 / (3.0 * v))))
}

/// Angle between two color vectors, in degrees.
pub fn angular_error(a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let na = libm::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
    let nb = libm::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::contract("angular_error", "zero or non-finite vector"));
    }
    // atan2 of |a x b| and a.b is the arccos of the cosine, without the
    // loss of precision near zero angles
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let sin = libm::sqrt(cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]);
    Ok(libm::atan2(sin, dot).to_degrees())
}

pub fn mat3_mul_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat3_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse by adjugate; `None` when the matrix is (numerically) singular.
pub fn mat3_inverse(m: &Mat3) -> Option<Mat3> {
    let det = mat3_det(m);
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if !det.is_finite() || det.abs() <= 1e-12 * scale * scale * scale {
        return None;
    }
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    Some(adj.map(|row| row.map(|v| v / det)))
}

/// CIE 1960 UCS chromaticity of a linear sRGB triplet.
pub fn rgb_to_uv1960(rgb: [f64; 3]) -> Result<(f64, f64)> {
    let [x, y, z] = mat3_mul_vec(&SRGB_TO_XYZ, rgb);
    let d = x + 15.0 * y + 3.0 * z;
    if !(d > 1e-300) {
        return Err(Error::contract("rgb_to_uv1960", "degenerate chromaticity denominator"));
    }
    Ok((4.0 * x / d, 6.0 * y / d))
}

/// Linear sRGB triplet (l1-normalized) with CIE 1960 chromaticity `(u, v)`.
/// Fails when the chromaticity lies outside the sRGB gamut.
pub fn uv1960_to_rgb(u: f64, v: f64) -> Result<[f64; 3]> {
    let d = 2.0 * u - 8.0 * v + 4.0;
    if !(v > 0.0) || d <= 0.0 {
        return Err(Error::contract("uv1960_to_rgb", "invalid chromaticity"));
    }
    let (x, y) = (3.0 * u / d, 2.0 * v / d);
    let xyz = [x / y, 1.0, (1.0 - x - y) / y];
    let inv = mat3_inverse(&SRGB_TO_XYZ).expect("sRGB matrix is invertible");
    let rgb = mat3_mul_vec(&inv, xyz);
    if rgb.iter().any(|&c| c <= 0.0) {
        return Err(Error::contract("uv1960_to_rgb", "chromaticity outside the sRGB gamut"));
    }
    let s = rgb[0] + rgb[1] + rgb[2];
    Ok(rgb.map(|c| c / s))
}

/// Euclidean distance between the CIE 1960 chromaticities of two triplets.
pub fn delta_uv(a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    let (ua, va) = rgb_to_uv1960(a)?;
    let (ub, vb) = rgb_to_uv1960(b)?;
    Ok(libm::hypot(ua - ub, va - vb))
}

/// Whether `biased` is an acceptable perturbation of `truth`: at most 5
/// degrees away and at most 0.006 apart in CIE 1960 `(u, v)`. Both bounds
/// are closed.
pub fn illuminant_jitter_valid(truth: &Illuminant, biased: &Illuminant) -> bool {
    let angle = angular_error(truth.rgb, biased.rgb);
    let duv = delta_uv(truth.rgb, biased.rgb);
    matches!((angle, duv), (Ok(a), Ok(d)) if a <= MAX_JITTER_DEGREES && d <= MAX_JITTER_DUV)
}

// -------------------------------------------------------------------------
// Baselines
// -------------------------------------------------------------------------

fn finish_baseline(op: &'static str, sums: [f64; 3]) -> Result<Illuminant> {
    if sums.iter().all(|&s| s <= 0.0) {
        return Err(Error::contract(op, "image is all zero"));
    }
    Illuminant::from_rgb(sums)
}

/// Mean of each channel.
pub fn baseline_gray_world(image: &Tensor) -> Result<Illuminant> {
    check_rgb_image("gray_world", image)?;
    let mut s = [0.0; 3];
    for px in image.data().chunks_exact(3) {
        for (a, p) in s.iter_mut().zip(px) {
            *a += p;
        }
    }
    finish_baseline("gray_world", s)
}

/// Maximum of each channel.
pub fn baseline_white_patch(image: &Tensor) -> Result<Illuminant> {
    check_rgb_image("white_patch", image)?;
    let mut s = [0.0f64; 3];
    for px in image.data().chunks_exact(3) {
        for (a, p) in s.iter_mut().zip(px) {
            *a = a.max(*p);
        }
    }
    finish_baseline("white_patch", s)
}

/// Minkowski p-norm mean of each channel; the usual choice is `p = 6`.
pub fn baseline_shades_of_gray(image: &Tensor, p: f64) -> Result<Illuminant> {
    check_rgb_image("shades_of_gray", image)?;
    if !(p >= 1.0) {
        return Err(Error::contract("shades_of_gray", "norm order must be >= 1"));
    }
    // Scale by the channel max so large p cannot underflow.
    let max = baseline_channel_max(image);
    let mut s = [0.0; 3];
    for px in image.data().chunks_exact(3) {
        for c in 0..3 {
            if max[c] > 0.0 {
                s[c] += libm::pow(px[c] / max[c], p);
            }
        }
    }
    let n = (image.len() / 3) as f64;
    let est = [0, 1, 2].map(|c| max[c] * libm::pow(s[c] / n, 1.0 / p));
    finish_baseline("shades_of_gray", est)
}

fn baseline_channel_max(image: &Tensor) -> [f64; 3] {
    let mut m = [0.0f64; 3];
    for px in image.data().chunks_exact(3) {
        for (a, p) in m.iter_mut().zip(px) {
            *a = a.max(*p);
        }
    }
    m
}

// -------------------------------------------------------------------------
// Summary statistics
// -------------------------------------------------------------------------

/// The five summary statistics of a set of angular errors, in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
    pub trimean: f64,
    pub best25: f64,
    pub worst25: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn error_stats(errors: &[f64]) -> Result<ErrorStats> {
    if errors.is_empty() {
        return Err(Error::contract("error_stats", "no errors given"));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::contract("error_stats", "NaN error value"));
    }
    let mut sorted: Vec<f64> = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let quarter = n.div_ceil(4);
    let mean_of = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (q1, q2, q3) = (
        quantile(&sorted, 0.25),
        quantile(&sorted, 0.5),
        quantile(&sorted, 0.75),
    );
    Ok(ErrorStats {
        mean: mean_of(&sorted),
        median: q2,
        trimean: (q1 + 2.0 * q2 + q3) / 4.0,
        best25: mean_of(&sorted[..quarter]),
        worst25: mean_of(&sorted[n - quarter..]),
    })
}

// -------------------------------------------------------------------------
// Color correction matrices
// -------------------------------------------------------------------------

/// Invertible 3x3 color correction matrix applied as `p' = M p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ccm(Mat3);

impl Ccm {
    pub const IDENTITY: Ccm = Ccm([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn new(m: Mat3) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) || mat3_inverse(&m).is_none() {
            return Err(Error::contract("Ccm", "matrix is singular or non-finite"));
        }
        Ok(Ccm(m))
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        let [a, b, c, d, e, f, g, h, i] = *values else {
            return Err(Error::contract("Ccm", "expected nine values"));
        };
        Self::new([[a, b, c], [d, e, f], [g, h, i]])
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn inverse(&self) -> Ccm {
        Ccm(mat3_inverse(&self.0).expect("validated at construction"))
    }
}

pub fn apply_ccm(image: &Tensor, ccm: &Ccm) -> Result<Tensor> {
    check_rgb_image("apply_ccm", image)?;
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let v = mat3_mul_vec(&ccm.0, [px[0], px[1], px[2]]);
        px.copy_from_slice(&v);
    }
    Ok(out)
}
