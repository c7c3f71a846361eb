//! Synthetic scenes, augmentation and patch sampling.
//!
//! Scenes are Mondrians: flat axis-aligned rectangles of intrinsic color over
//! a background, with mild per-pixel shading noise, rendered under an
//! illuminant with the von Kries model. The ground truth is known exactly.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::colorlib::{self, Illuminant};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn contains(&self, other: &Rect) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

/// Linear RGB image with its ground-truth illuminant.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub illuminant: Illuminant,
    pub source_id: String,
    /// Region to keep out of every crop, e.g. a calibration target.
    pub mask: Option<Rect>,
}

impl LabeledImage {
    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// Square network input cut from a [`LabeledImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Tensor,
    pub parent: String,
    /// Cell of the 4x3 inference grid, row-major; `None` for training crops.
    pub grid_index: Option<usize>,
    pub illuminant: Illuminant,
}

// -------------------------------------------------------------------------
// Illuminant prior
// -------------------------------------------------------------------------

/// Illuminants spread along a segment of CIE 1960 `(u, v)` with a bounded
/// perpendicular offset, roughly following daylight and blackbody sources.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IlluminantPrior {
    pub warm: (f64, f64),
    pub cool: (f64, f64),
    pub perpendicular: f64,
}

impl Default for IlluminantPrior {
    fn default() -> Self {
        // ~4000 K and ~8000 K on the Planckian locus
        IlluminantPrior {
            warm: (0.2251, 0.3343),
            cool: (0.1946, 0.3015),
            perpendicular: 0.006,
        }
    }
}

impl IlluminantPrior {
    pub fn sample(&self, rng: &mut Rng) -> Illuminant {
        let (du, dv) = (self.cool.0 - self.warm.0, self.cool.1 - self.warm.1);
        let len = libm::hypot(du, dv);
        let (nu, nv) = (-dv / len, du / len);
        loop {
            let t: f64 = rng.random();
            let s = self.perpendicular * (2.0 * rng.random::<f64>() - 1.0);
            let u = self.warm.0 + t * du + s * nu;
            let v = self.warm.1 + t * dv + s * nv;
            if let Ok(rgb) = colorlib::uv1960_to_rgb(u, v) {
                if let Ok(l) = Illuminant::from_rgb(rgb) {
                    return l;
                }
            }
        }
    }

    /// Illuminant at the middle of the segment.
    pub fn center(&self) -> Illuminant {
        let u = 0.5 * (self.warm.0 + self.cool.0);
        let v = 0.5 * (self.warm.1 + self.cool.1);
        Illuminant::from_rgb(colorlib::uv1960_to_rgb(u, v).expect("prior inside gamut"))
            .expect("positive")
    }
}

// -------------------------------------------------------------------------
// Mondrian scenes
// -------------------------------------------------------------------------

/// Surface statistics of one scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneStyle {
    /// Probability that a surface (background included) is near-achromatic.
    pub gray_fraction: f64,
    /// When set, every chromatic surface has a hue within a narrow band
    /// around this value (in turns, `[0, 1)`).
    pub dominant_hue: Option<f64>,
}

impl SceneStyle {
    pub fn mixed(gray_fraction: f64) -> Self {
        SceneStyle {
            gray_fraction,
            dominant_hue: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MondrianConfig {
    pub width: usize,
    pub height: usize,
    pub patch_count: usize,
    /// Standard deviation of the multiplicative per-pixel shading noise.
    pub shading_noise: f64,
    /// Global exposure gain range applied after the illuminant.
    pub exposure: (f64, f64),
}

impl MondrianConfig {
    pub fn new(width: usize, height: usize, patch_count: usize) -> Self {
        MondrianConfig {
            width,
            height,
            patch_count,
            shading_noise: 0.02,
            exposure: (1.3, 1.9),
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h - libm::floor(h)) * 6.0;
    let i = libm::floor(h6) as usize % 6;
    let f = h6 - libm::floor(h6);
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn random_surface(style: &SceneStyle, rng: &mut Rng) -> ([f64; 3], bool) {
    if rng.random::<f64>() < style.gray_fraction {
        let level = rng.random_range(0.2..0.95);
        let jitter = |rng: &mut Rng| 1.0 + rng.random_range(-0.02..0.02);
        return ([level * jitter(rng), level * jitter(rng), level * jitter(rng)], true);
    }
    let (hue, sat) = match style.dominant_hue {
        Some(h) => (h + rng.random_range(-0.04..0.04), rng.random_range(0.4..0.9)),
        None => (rng.random::<f64>(), rng.random_range(0.2..0.8)),
    };
    (hsv_to_rgb(hue, sat, rng.random_range(0.2..0.95)), false)
}

/// Intrinsic (illuminant-free) Mondrian scene.
pub fn mondrian_reflectance(cfg: &MondrianConfig, style: &SceneStyle, rng: &mut Rng) -> Result<Tensor> {
    if cfg.patch_count == 0 {
        return Err(Error::contract("generate_mondrian", "patch_count must be at least 1"));
    }
    if cfg.width == 0 || cfg.height == 0 {
        return Err(Error::contract("generate_mondrian", "empty image"));
    }
    let (w, h) = (cfg.width, cfg.height);
    let (bg, _) = random_surface(style, rng);
    let mut img = Tensor::from_fn(&[h, w, 3], |i| bg[i % 3]);
    let data = img.data_mut();
    for _ in 0..cfg.patch_count {
        let (color, _) = random_surface(style, rng);
        let pw = rng.random_range(w.div_ceil(10)..=w.div_ceil(3).max(w.div_ceil(10)));
        let ph = rng.random_range(h.div_ceil(10)..=h.div_ceil(3).max(h.div_ceil(10)));
        let x0 = rng.random_range(0..=w - pw.min(w));
        let y0 = rng.random_range(0..=h - ph.min(h));
        for y in y0..(y0 + ph).min(h) {
            for x in x0..(x0 + pw).min(w) {
                data[(y * w + x) * 3..][..3].copy_from_slice(&color);
            }
        }
    }
    for px in data.chunks_exact_mut(3) {
        let shade = 1.0 + cfg.shading_noise * rng.sample::<f64, _>(StandardNormal);
        for p in px {
            *p = (*p * shade).max(0.0);
        }
    }
    Ok(img)
}

/// Renders a Mondrian under `illuminant` with surfaces drawn from `style`.
pub fn generate_scene(
    cfg: &MondrianConfig,
    style: &SceneStyle,
    seed: u64,
    illuminant: Illuminant,
) -> Result<LabeledImage> {
    let mut rng = rng::seeded(seed);
    let reflectance = mondrian_reflectance(cfg, style, &mut rng)?;
    let exposure = rng.random_range(cfg.exposure.0..=cfg.exposure.1);
    let mut pixels = colorlib::apply_illuminant(&reflectance, &illuminant)?;
    pixels.data_mut().iter_mut().for_each(|p| *p = (*p * exposure).clamp(0.0, 1.0));
    Ok(LabeledImage {
        pixels,
        illuminant,
        source_id: alloc::format!("mondrian-{seed}"),
        mask: None,
    })
}

/// Mondrian with half of its surfaces near-achromatic.
pub fn generate_mondrian(
    seed: u64,
    width: usize,
    height: usize,
    patch_count: usize,
    illuminant: Illuminant,
) -> Result<LabeledImage> {
    let cfg = MondrianConfig::new(width, height, patch_count);
    generate_scene(&cfg, &SceneStyle::mixed(0.5), seed, illuminant)
}

/// Scene mixture of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub scene: MondrianConfig,
    pub prior: IlluminantPrior,
    /// Per-image gray fraction drawn uniformly from this range.
    pub gray_fraction: (f64, f64),
    /// Probability that an image is a single-hue scene without gray surfaces.
    pub dominant_hue_probability: f64,
}

impl DatasetConfig {
    pub fn desk(width: usize, height: usize) -> Self {
        DatasetConfig {
            scene: MondrianConfig::new(width, height, 48),
            prior: IlluminantPrior::default(),
            gray_fraction: (0.0, 0.6),
            dominant_hue_probability: 0.2,
        }
    }
}

/// `count` scenes; image `i` depends only on `(seed, i)`.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64, count: usize) -> Result<Vec<LabeledImage>> {
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let illuminant = cfg.prior.sample(&mut r);
            let style = if r.random::<f64>() < cfg.dominant_hue_probability {
                SceneStyle {
                    gray_fraction: 0.0,
                    dominant_hue: Some(r.random()),
                }
            } else {
                SceneStyle::mixed(r.random_range(cfg.gray_fraction.0..=cfg.gray_fraction.1))
            };
            let scene_seed: u64 = r.random();
            let mut img = generate_scene(&cfg.scene, &style, scene_seed, illuminant)?;
            img.source_id = alloc::format!("synth-{seed}-{i:05}");
            Ok(img)
        })
        .collect()
}

// -------------------------------------------------------------------------
// Resampling
// -------------------------------------------------------------------------

pub fn crop(image: &Tensor, x0: usize, y0: usize, w: usize, h: usize) -> Result<Tensor> {
    let (ih, iw, c) = image.dims3()?;
    if x0 + w > iw || y0 + h > ih || w == 0 || h == 0 {
        return Err(Error::contract("crop", "crop window outside the image"));
    }
    let mut out = Vec::with_capacity(w * h * c);
    for y in y0..y0 + h {
        out.extend_from_slice(&image.data()[((y * iw) + x0) * c..((y * iw) + x0 + w) * c]);
    }
    Tensor::new(&[h, w, c], out)
}

/// Bilinear sample at continuous pixel coordinates, edges clamped.
fn sample_bilinear(image: &Tensor, fy: f64, fx: f64, out: &mut [f64]) {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (libm::floor(fy) as usize, libm::floor(fx) as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        let a = image.at3(y0, x0, ch) * (1.0 - tx) + image.at3(y0, x1, ch) * tx;
        let b = image.at3(y1, x0, ch) * (1.0 - tx) + image.at3(y1, x1, ch) * tx;
        *o = a * (1.0 - ty) + b * ty;
    }
}

/// Bilinear resize with half-pixel centres.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::contract("resize", "empty extent"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = alloc::vec![0.0; out_h * out_w * c];
    for y in 0..out_h {
        for x in 0..out_w {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            let fx = (x as f64 + 0.5) * sx - 0.5;
            sample_bilinear(image, fy, fx, &mut out[(y * out_w + x) * c..][..c]);
        }
    }
    Tensor::new(&[out_h, out_w, c], out)
}

/// Mirrors `i` into `[0, n)` (reflection without edge repeat).
fn reflect(mut i: f64, n: usize) -> f64 {
    let max = (n - 1) as f64;
    if max == 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    i = i - period * libm::floor(i / period);
    if i > max {
        period - i
    } else {
        i
    }
}

/// Rotates about the centre by `degrees`, bilinear, reflect padding.
pub fn rotate_reflect(image: &Tensor, degrees: f64) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    let (s, co) = libm::sincos(degrees.to_radians());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = alloc::vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = reflect(cy + co * dy - s * dx, h);
            let sx = reflect(cx + s * dy + co * dx, w);
            sample_bilinear(image, sy, sx, &mut out[(y * w + x) * c..][..c]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Subtracts a black level and clamps at zero.
pub fn subtract_black_level(image: &mut Tensor, level: f64) {
    image.data_mut().iter_mut().for_each(|p| *p = (*p - level).max(0.0));
}

// -------------------------------------------------------------------------
// Augmentation
// -------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub crop_min: usize,
    pub crop_max: usize,
    pub output_size: usize,
    /// Rotation drawn uniformly from `[-max_rotation, max_rotation]` degrees.
    pub max_rotation: f64,
    pub bias_probability: f64,
    pub max_bias_attempts: usize,
}

impl AugmentConfig {
    /// 48 to 96 pixel crops resized to 64, for 160x120 scenes.
    pub fn desk() -> Self {
        AugmentConfig {
            crop_min: 48,
            crop_max: 96,
            output_size: 64,
            max_rotation: 30.0,
            bias_probability: 0.5,
            max_bias_attempts: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub patch: Patch,
    pub bias_applied: bool,
}

const MAX_CROP_ATTEMPTS: usize = 1000;

/// Perturbed illuminant within the angular and `(u, v)` bounds, found by
/// rejection sampling in the chromaticity plane.
pub fn sample_biased_illuminant(
    truth: &Illuminant,
    attempts: usize,
    rng: &mut Rng,
) -> Option<Illuminant> {
    let (u, v) = colorlib::rgb_to_uv1960(truth.rgb()).ok()?;
    for _ in 0..attempts {
        let r = colorlib::MAX_JITTER_DUV * libm::sqrt(rng.random::<f64>());
        let (s, c) = libm::sincos(core::f64::consts::TAU * rng.random::<f64>());
        let Ok(rgb) = colorlib::uv1960_to_rgb(u + r * c, v + r * s) else {
            continue;
        };
        let Ok(candidate) = Illuminant::from_rgb(rgb) else {
            continue;
        };
        if colorlib::illuminant_jitter_valid(truth, &candidate) {
            return Some(candidate);
        }
    }
    None
}

/// Random crop, rotation and resize, then with probability
/// `bias_probability` a relabelled illuminant perturbation.
pub fn augment(img: &LabeledImage, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Augmented> {
    let (h, w) = (img.height(), img.width());
    let largest = cfg.crop_max.min(h).min(w);
    if cfg.crop_min == 0 || cfg.crop_min > largest {
        return Err(Error::contract(
            "augment",
            alloc::format!("image {w}x{h} is smaller than the minimum crop {}", cfg.crop_min),
        ));
    }
    let whole = Rect {
        x0: 0,
        y0: 0,
        x1: w,
        y1: h,
    };
    if img.mask.is_some_and(|m| m.contains(&whole)) {
        return Err(Error::contract("augment", "mask covers the whole image"));
    }
    let mut window = None;
    for _ in 0..MAX_CROP_ATTEMPTS {
        let side = rng.random_range(cfg.crop_min..=largest);
        let x0 = rng.random_range(0..=w - side);
        let y0 = rng.random_range(0..=h - side);
        let r = Rect {
            x0,
            y0,
            x1: x0 + side,
            y1: y0 + side,
        };
        if !img.mask.is_some_and(|m| m.overlaps(&r)) {
            window = Some(r);
            break;
        }
    }
    let r = window.ok_or_else(|| Error::contract("augment", "no crop avoids the mask"))?;
    let mut pixels = crop(&img.pixels, r.x0, r.y0, r.x1 - r.x0, r.y1 - r.y0)?;
    if cfg.max_rotation > 0.0 {
        let angle = rng.random_range(-cfg.max_rotation..=cfg.max_rotation);
        pixels = rotate_reflect(&pixels, angle)?;
    }
    pixels = resize_bilinear(&pixels, cfg.output_size, cfg.output_size)?;

    let mut illuminant = img.illuminant;
    let mut bias_applied = false;
    if rng.random::<f64>() < cfg.bias_probability {
        if let Some(biased) = sample_biased_illuminant(&img.illuminant, cfg.max_bias_attempts, rng) {
            let (t, b) = (img.illuminant.rgb(), biased.rgb());
            let gains = [b[0] / t[0], b[1] / t[1], b[2] / t[2]];
            for px in pixels.data_mut().chunks_exact_mut(3) {
                for (p, g) in px.iter_mut().zip(gains) {
                    *p *= g;
                }
            }
            illuminant = biased;
            bias_applied = true;
        }
    }
    Ok(Augmented {
        patch: Patch {
            pixels,
            parent: img.source_id.clone(),
            grid_index: None,
            illuminant,
        },
        bias_applied,
    })
}

/// Twelve square crops centred in the cells of a 4 (columns) by 3 (rows)
/// grid, each resized to `output_size`. Margins are left unused when the
/// aspect ratio is not 4:3.
pub fn grid_patches(img: &LabeledImage, output_size: usize) -> Result<Vec<Patch>> {
    let (h, w) = (img.height(), img.width());
    let (cell_w, cell_h) = (w / 4, h / 3);
    let side = cell_w.min(cell_h);
    if side == 0 {
        return Err(Error::contract(
            "grid_patches",
            alloc::format!("image {w}x{h} is smaller than the 4x3 grid"),
        ));
    }
    let mut out = Vec::with_capacity(12);
    for row in 0..3 {
        for col in 0..4 {
            let x0 = col * cell_w + (cell_w - side) / 2;
            let y0 = row * cell_h + (cell_h - side) / 2;
            let pixels = crop(&img.pixels, x0, y0, side, side)?;
            out.push(Patch {
                pixels: resize_bilinear(&pixels, output_size, output_size)?,
                parent: img.source_id.clone(),
                grid_index: Some(row * 4 + col),
                illuminant: img.illuminant,
            });
        }
    }
    Ok(out)
}
