//! Linear RGB images on disk.
//!
//! Binary PPM with maxval 65535 is the lossless container. 8-bit PNG is
//! accepted on input and used for visualizations.

use std::path::Path;

use image::{DynamicImage, ExtendedColorType};
use reweight_core::Tensor;

use crate::error::{CliError, Result};

fn image_err(path: &Path, reason: impl ToString) -> CliError {
    CliError::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// `[0, 1]` sample to 16 bits, rounded to nearest.
pub fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn dequantize16(v: u16) -> f64 {
    f64::from(v) / 65535.0
}

/// Writes `H x W x 3` samples in `[0, 1]` as a 16-bit binary PPM.
pub fn write_ppm16(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(image_err(path, format!("expected 3 channels, got {c}")));
    }
    // the image crate only encodes 8-bit pixmaps
    let mut bytes = format!("P6\n{w} {h}\n65535\n").into_bytes();
    bytes.extend(image.data().iter().flat_map(|&v| quantize16(v).to_be_bytes()));
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Reads a PPM (any maxval) or PNG into linear `[0, 1]` RGB.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(|e| CliError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| CliError::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageRgb16(buf) => buf.into_raw().into_iter().map(dequantize16).collect(),
        DynamicImage::ImageRgb8(buf) => buf.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        other if other.color().has_color() && other.color().bytes_per_pixel() > 4 => {
            other.into_rgb16().into_raw().into_iter().map(dequantize16).collect()
        }
        other => other.into_rgb8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
    };
    Ok(Tensor::new(&[h, w, 3], data)?)
}

/// Writes a single-channel map as 8-bit grayscale PNG, stretched so that
/// its minimum is black and its maximum white.
pub fn write_gray_png(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w, c) = map.dims3()?;
    if c != 1 {
        return Err(image_err(path, format!("expected 1 channel, got {c}")));
    }
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| ((v - lo) / span * 255.0).round() as u8)
        .collect();
    image::save_buffer(path, &bytes, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ppm_round_trip_is_within_half_a_step(
            (h, w, data) in (1usize..5, 1usize..5).prop_flat_map(|(h, w)| {
                (Just(h), Just(w), proptest::collection::vec(0.0f64..=1.0, h * w * 3))
            })
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("p.ppm");
            let img = Tensor::new(&[h, w, 3], data).unwrap();
            write_ppm16(&p, &img).unwrap();
            let back = read_image(&p).unwrap();
            prop_assert_eq!(back.shape(), img.shape());
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
            }
        }
    }

    #[test]
    fn quantization_is_stable() {
        for v in [0u16, 1, 255, 32768, 65534, 65535] {
            assert_eq!(quantize16(dequantize16(v)), v);
        }
        assert_eq!(quantize16(-0.5), 0);
        assert_eq!(quantize16(1.5), 65535);
    }

    #[test]
    fn ppm_is_big_endian_with_maxval_65535() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let img = Tensor::new(&[1, 2, 3], vec![1.0, 0.0, dequantize16(0x0102), 0.5, 0.25, 0.0]).unwrap();
        write_ppm16(&p, &img).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let text = String::from_utf8_lossy(&bytes[..bytes.len() - 12]).into_owned();
        assert!(text.starts_with("P6"), "{text}");
        assert!(text.contains("65535"));
        assert_eq!(&bytes[bytes.len() - 12..bytes.len() - 6], &[0xff, 0xff, 0, 0, 0x01, 0x02]);
        let back = read_image(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert_eq!(back.data()[2], dequantize16(0x0102));
    }

    #[test]
    fn gray_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let map = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        write_gray_png(&p, &map).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.at3(0, 0, 0), 0.0);
        assert_eq!(back.at3(1, 1, 1), 1.0);
    }
}
