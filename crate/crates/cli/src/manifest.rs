//! Dataset manifests.
//!
//! UTF-8 CSV with the header
//! `path,r,g,b,mask_x0,mask_y0,mask_x1,mask_y1,black_level`. Paths are
//! relative to the manifest's directory. Mask fields are either all empty
//! (no exclusion) or all set; `black_level` may be empty.

use std::path::{Path, PathBuf};

use reweight_core::colorlib::{self, Ccm, Illuminant};
use reweight_core::datagen::{self, LabeledImage, Rect};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::imageio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub r: f64,
    pub g: f64,
    pub b: f64,
    pub mask_x0: Option<usize>,
    pub mask_y0: Option<usize>,
    pub mask_x1: Option<usize>,
    pub mask_y1: Option<usize>,
    pub black_level: Option<f64>,
}

impl ManifestRecord {
    pub fn new(path: impl Into<String>, illuminant: &Illuminant) -> Self {
        let [r, g, b] = illuminant.rgb();
        ManifestRecord {
            path: path.into(),
            r,
            g,
            b,
            mask_x0: None,
            mask_y0: None,
            mask_x1: None,
            mask_y1: None,
            black_level: None,
        }
    }

    pub fn mask(&self) -> std::result::Result<Option<Rect>, String> {
        match (self.mask_x0, self.mask_y0, self.mask_x1, self.mask_y1) {
            (None, None, None, None) => Ok(None),
            (Some(x0), Some(y0), Some(x1), Some(y1)) if x0 < x1 && y0 < y1 => Ok(Some(Rect { x0, y0, x1, y1 })),
            (Some(_), Some(_), Some(_), Some(_)) => Err("mask rectangle is empty".into()),
            _ => Err("mask needs all four coordinates or none".into()),
        }
    }
}

fn record_err(path: &Path, record: usize, reason: impl ToString) -> CliError {
    CliError::Manifest {
        path: path.to_path_buf(),
        record,
        reason: reason.to_string(),
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| record_err(path, 0, e))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| record_err(path, i + 1, e)))
        .collect()
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    for r in records {
        w.serialize(r)
            .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn resolve(manifest: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads every record: black level subtracted, then the optional color
/// correction applied to pixels and ground truth alike.
pub fn load_dataset(path: &Path, ccm: Option<&Ccm>) -> Result<Vec<LabeledImage>> {
    let records = read_manifest(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let n = i + 1;
        let gt = [rec.r, rec.g, rec.b];
        if gt.iter().any(|v| !(*v > 0.0)) {
            return Err(record_err(path, n, format!("ground truth {gt:?} must be positive")));
        }
        let mask = rec.mask().map_err(|e| record_err(path, n, e))?;
        let mut pixels = imageio::read_image(&resolve(path, &rec.path)).map_err(|e| record_err(path, n, e))?;
        if let Some(level) = rec.black_level {
            if !(0.0..1.0).contains(&level) {
                return Err(record_err(path, n, format!("black level {level} outside [0, 1)")));
            }
            datagen::subtract_black_level(&mut pixels, level);
        }
        let mut truth = gt;
        if let Some(m) = ccm {
            pixels = colorlib::apply_ccm(&pixels, m)?;
            pixels.data_mut().iter_mut().for_each(|p| *p = p.max(0.0));
            truth = colorlib::mat3_mul_vec(m.matrix(), gt);
        }
        let illuminant = Illuminant::from_rgb(truth).map_err(|e| record_err(path, n, e))?;
        if let Some(m) = mask {
            let (h, w, _) = pixels.dims3()?;
            if m.x1 > w || m.y1 > h {
                return Err(record_err(path, n, "mask extends past the image"));
            }
        }
        out.push(LabeledImage {
            pixels,
            illuminant,
            source_id: rec.path.clone(),
            mask,
        });
    }
    Ok(out)
}
