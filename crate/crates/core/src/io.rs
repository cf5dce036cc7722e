//! File formats: 8-bit RGB PNG for frames, 16-bit grayscale PNG for depth
//! with a scale divisor (raw value / divisor = meters, raw 0 = invalid), and
//! a raw little-endian float depth format for lossless interchange:
//! a 16-byte header — magic `DMAPF32\0`, width u32 LE, height u32 LE —
//! followed by row-major f32 LE values where 0.0 marks invalid pixels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, DepthMap, ImageBuffer};

/// The TUM wire convention: 16-bit raw depth of 5000 equals one meter.
pub const DEFAULT_DEPTH_DIVISOR: f64 = 5000.0;

pub const RAW_DEPTH_MAGIC: [u8; 8] = *b"DMAPF32\0";

/// Loads any image the PNG/JPEG decoders understand as a 3-channel [0,1]
/// buffer; grayscale inputs replicate into three equal channels.
pub fn load_rgb(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("cannot decode image: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    ImageBuffer::new(w, h, 3, data)
}

/// Loads and bilinearly resizes an RGB frame to the working resolution.
pub fn load_rgb_resized(path: &Path, width: usize, height: usize) -> Result<ImageBuffer> {
    Ok(resize_bilinear(&load_rgb(path)?, width, height))
}

/// Saves a 1- or 3-channel [0,1] buffer as an 8-bit grayscale or RGB image;
/// the format follows the file extension.
pub fn save_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let saved = match img.channels() {
        1 => image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer length matches dimensions")
            .save(path),
        3 => image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer length matches dimensions")
            .save(path),
        n => return Err(Error::BadChannelCount(n)),
    };
    saved.map_err(|e| Error::format(path, format!("cannot encode image: {e}")))
}

/// Loads a 16-bit single-channel depth PNG. Meters = raw / divisor; raw 0 is
/// the sensor's "no measurement" marker and becomes an invalid pixel. Values
/// are taken as-is — no clamping at load.
pub fn load_depth_png(path: &Path, divisor: f64) -> Result<DepthMap> {
    check_divisor(divisor)?;
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("cannot decode image: {e}")))?;
    let buf = match img {
        image::DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(Error::format(
                path,
                format!(
                    "expected 16-bit single-channel depth, got {:?}",
                    other.color()
                ),
            ))
        }
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let values = buf.as_raw().iter().map(|&r| r as f64 / divisor).collect();
    DepthMap::from_values(w, h, values)
}

/// Writes a depth map as 16-bit PNG with the given divisor. Invalid pixels
/// store raw 0. Depths too large for 16 bits at this divisor are an error
/// rather than a silent clamp; depths below half a raw unit round to 0 and
/// will reload as invalid.
pub fn save_depth_png(path: &Path, depth: &DepthMap, divisor: f64) -> Result<()> {
    check_divisor(divisor)?;
    let mut raw = Vec::with_capacity(depth.values().len());
    for (i, (&v, &m)) in depth.values().iter().zip(depth.mask()).enumerate() {
        if !m {
            raw.push(0u16);
            continue;
        }
        let r = (v * divisor).round();
        if r > u16::MAX as f64 {
            return Err(Error::InvalidInput {
                what: "depth png",
                reason: format!(
                    "depth {v} m at pixel {i} exceeds the 16-bit range for divisor {divisor}"
                ),
            });
        }
        raw.push(r as u16);
    }
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        depth.width() as u32,
        depth.height() as u32,
        raw,
    )
    .expect("buffer length matches dimensions");
    buf.save(path)
        .map_err(|e| Error::format(path, format!("cannot encode image: {e}")))
}

fn check_divisor(divisor: f64) -> Result<()> {
    if !(divisor.is_finite() && divisor > 0.0) {
        return Err(Error::InvalidInput {
            what: "depth divisor",
            reason: format!("must be positive and finite, got {divisor}"),
        });
    }
    Ok(())
}

/// Writes the raw float depth format. Values are narrowed to f32; invalid
/// pixels store 0.0.
pub fn save_depth_raw(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    if w > u32::MAX as usize || h > u32::MAX as usize {
        return Err(Error::InvalidInput {
            what: "raw depth",
            reason: format!("dimensions {w}x{h} exceed the header's 32-bit fields"),
        });
    }
    let mut bytes = Vec::with_capacity(16 + 4 * w * h);
    bytes.extend_from_slice(&RAW_DEPTH_MAGIC);
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    for (&v, &m) in depth.values().iter().zip(depth.mask()) {
        let f = if m { v as f32 } else { 0.0 };
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads the raw float depth format; rejects bad magic, truncated or
/// oversized payloads, and negative or non-finite values.
pub fn load_depth_raw(path: &Path) -> Result<DepthMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(path, "file shorter than the 16-byte header"));
    }
    if bytes[..8] != RAW_DEPTH_MAGIC {
        return Err(Error::format(path, "bad magic, not a raw depth file"));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + 4 * w * h;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload length {} does not match {w}x{h} ({} bytes expected)",
                bytes.len(),
                expected
            ),
        ));
    }
    let mut values = Vec::with_capacity(w * h);
    for (i, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        let f = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !f.is_finite() || f < 0.0 {
            return Err(Error::format(
                path,
                format!("pixel {i}: invalid depth value {f}"),
            ));
        }
        values.push(f);
    }
    DepthMap::from_values(w, h, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn random_rgb(seed: u64, w: usize, h: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::new(w, h, 3, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn rgb_png_is_stable_after_one_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("frame.png");
        let img = random_rgb(1, 20, 14);
        save_image(&path, &img).unwrap();
        let once = load_rgb(&path).unwrap();
        for (a, b) in img.data().iter().zip(once.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12, "{a} vs {b}");
        }
        save_image(&path, &once).unwrap();
        let twice = load_rgb(&path).unwrap();
        assert_eq!(once.data(), twice.data(), "u8 domain is a fixed point");
    }

    #[test]
    fn grayscale_files_load_as_three_equal_channels() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let gray =
            ImageBuffer::new(6, 4, 1, (0..24).map(|i| i as f64 / 24.0).collect()).unwrap();
        save_image(&path, &gray).unwrap();
        let loaded = load_rgb(&path).unwrap();
        assert_eq!(loaded.channels(), 3);
        for y in 0..4 {
            for x in 0..6 {
                let (r, g, b) = (
                    loaded.at(x, y, 0),
                    loaded.at(x, y, 1),
                    loaded.at(x, y, 2),
                );
                assert_eq!(r, g);
                assert_eq!(g, b);
            }
        }
    }

    #[test]
    fn rgb_load_can_resize_to_the_working_resolution() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("big.png");
        save_image(&path, &random_rgb(2, 64, 48)).unwrap();
        let img = load_rgb_resized(&path, 32, 24).unwrap();
        assert_eq!((img.width(), img.height()), (32, 24));
    }

    #[test]
    fn depth_png_round_trips_raw_values_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("depth.png");
        let raws: Vec<u16> = vec![0, 1, 777, 5000, 12345, 65535];
        let buf =
            image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(3, 2, raws.clone())
                .unwrap();
        buf.save(&path).unwrap();

        let depth = load_depth_png(&path, DEFAULT_DEPTH_DIVISOR).unwrap();
        assert!(!depth.is_valid(0, 0), "raw 0 is invalid");
        assert_eq!(depth.value(0, 1), 5000.0 / 5000.0);
        assert_eq!(depth.value(2, 1), 65535.0 / 5000.0, "13.107 m, no clamping");

        let out = dir.path().join("depth2.png");
        save_depth_png(&out, &depth, DEFAULT_DEPTH_DIVISOR).unwrap();
        let reloaded = image::open(&out).unwrap();
        match reloaded {
            image::DynamicImage::ImageLuma16(b) => assert_eq!(b.as_raw(), &raws),
            other => panic!("expected 16-bit gray, got {:?}", other.color()),
        }
    }

    #[test]
    fn eight_bit_files_are_rejected_as_depth() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        save_image(&path, &random_rgb(3, 4, 4)).unwrap();
        assert!(matches!(
            load_depth_png(&path, 5000.0),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn depths_too_large_for_sixteen_bits_error_instead_of_clamping() {
        let dir = tempdir().unwrap();
        let depth = DepthMap::constant(2, 2, 14.0).unwrap(); // raw 70000
        assert!(save_depth_png(&dir.path().join("d.png"), &depth, 5000.0).is_err());
    }

    #[test]
    fn divisor_must_be_positive() {
        let dir = tempdir().unwrap();
        let depth = DepthMap::constant(2, 2, 1.0).unwrap();
        for bad in [0.0, -5.0, f64::NAN] {
            assert!(save_depth_png(&dir.path().join("d.png"), &depth, bad).is_err());
        }
    }

    #[test]
    fn raw_depth_round_trips_bytes_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.dmap");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut values: Vec<f64> = (0..35)
            .map(|_| (0.2 + 4.0 * rng.gen::<f64>()) as f32 as f64)
            .collect();
        values[7] = 0.0;
        values[20] = 0.0;
        let depth = DepthMap::from_values(7, 5, values.clone()).unwrap();
        save_depth_raw(&path, &depth).unwrap();
        let original = std::fs::read(&path).unwrap();

        let loaded = load_depth_raw(&path).unwrap();
        assert_eq!(loaded.values(), depth.values());
        assert_eq!(loaded.mask(), depth.mask());

        let second = dir.path().join("d2.dmap");
        save_depth_raw(&second, &loaded).unwrap();
        assert_eq!(std::fs::read(&second).unwrap(), original);
    }

    #[test]
    fn raw_depth_header_layout_is_as_documented() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.dmap");
        let depth = DepthMap::constant(3, 2, 1.5).unwrap();
        save_depth_raw(&path, &depth).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"DMAPF32\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 16 + 4 * 6);
        assert_eq!(
            f32::from_le_bytes(bytes[16..20].try_into().unwrap()),
            1.5f32
        );
    }

    #[test]
    fn raw_depth_rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.dmap");
        let depth = DepthMap::constant(3, 2, 1.5).unwrap();
        save_depth_raw(&path, &depth).unwrap();
        let good = std::fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        let truncated = good[..good.len() - 4].to_vec();
        let negative = {
            let mut b = good.clone();
            b[16..20].copy_from_slice(&(-1.0f32).to_le_bytes());
            b
        };
        for (name, bytes) in [
            ("bad magic", bad_magic),
            ("truncated", truncated),
            ("negative", negative),
            ("short", vec![0u8; 7]),
        ] {
            let p = dir.path().join("corrupt.dmap");
            std::fs::write(&p, &bytes).unwrap();
            assert!(
                matches!(load_depth_raw(&p), Err(Error::Format { .. })),
                "{name} accepted"
            );
        }
    }
}
