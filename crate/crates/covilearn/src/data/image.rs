//! Image decoding and the preprocessing chain.
//!
//! Decoding of PNG/JPEG sits behind [`decode_image_bytes`]; DICOM-lite goes
//! through the native parser. The chain is: decode raw samples, divide by the
//! dtype maximum, replicate grayscale to 3 channels, bilinear-resize, then
//! optionally subtract per-channel dataset means. Resizing uses the
//! align-corners=false convention with edge-clamped sampling.

use std::path::Path;

use crate::data::dicom;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded-but-unnormalized image: raw sample values and the dtype maximum
/// they are scaled against.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    /// Shape `[C,H,W]`, C of 1 or 3, raw sample values.
    pub data: Tensor,
    /// 255 for 8-bit sources, 65535 for 16-bit.
    pub max_value: f64,
}

impl RawImage {
    pub fn from_gray8(width: usize, height: usize, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::argument("pixel buffer does not match extents"));
        }
        let data = Tensor::new(vec![1, height, width], pixels.iter().map(|&p| p as f64).collect())?;
        Ok(RawImage { data, max_value: u8::MAX as f64 })
    }
}

/// Recognized upload formats, sniffed from magic bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Jpeg,
    Dicom,
}

/// Sniffs the container format from magic bytes; `None` for anything else.
pub fn sniff_format(bytes: &[u8]) -> Option<ImageFormat> {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]) {
        Some(ImageFormat::Png)
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        Some(ImageFormat::Jpeg)
    } else if dicom::is_dicom(bytes) {
        Some(ImageFormat::Dicom)
    } else {
        None
    }
}

/// Decodes PNG, JPEG, or DICOM-lite bytes into raw samples.
pub fn decode_image_bytes(bytes: &[u8]) -> Result<RawImage> {
    match sniff_format(bytes) {
        Some(ImageFormat::Dicom) => {
            let file = dicom::parse_dicom_lite(bytes)?;
            let max_value = file.max_value();
            let data = Tensor::new(
                vec![1, file.rows as usize, file.columns as usize],
                file.samples(),
            )?;
            Ok(RawImage { data, max_value })
        }
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => decode_with_image_crate(bytes),
        None => Err(Error::Unsupported(
            "unrecognized image format: expected PNG, JPEG, or DICOM".into(),
        )),
    }
}

/// The PNG/JPEG decoding seam, delegated to the `image` crate.
fn decode_with_image_crate(bytes: &[u8]) -> Result<RawImage> {
    let decoded = image::load_from_memory(bytes)
        .map_err(|e| Error::format(format!("image decode failed: {e}")))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        image::DynamicImage::ImageLuma8(img) => RawImage::from_gray8(w, h, img.as_raw()),
        image::DynamicImage::ImageLuma16(img) => {
            let data: Vec<f64> = img.as_raw().iter().map(|&p| p as f64).collect();
            Ok(RawImage { data: Tensor::new(vec![1, h, w], data)?, max_value: u16::MAX as f64 })
        }
        other => {
            let rgb = other.to_rgb8();
            let mut data = vec![0.0; 3 * h * w];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = px.0[c] as f64;
                }
            }
            Ok(RawImage { data: Tensor::new(vec![3, h, w], data)?, max_value: u8::MAX as f64 })
        }
    }
}

pub fn decode_image_file(path: &Path) -> Result<RawImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_image_bytes(&bytes)
}

/// Bilinear resize of a `[C,H,W]` tensor, align-corners=false with
/// edge-clamped sampling.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match src.shape() {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::dimension(format!(
                "resize expects [C,H,W], got {other:?}"
            )))
        }
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::argument("resize target extents must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(src.clone());
    }
    let mut out = Tensor::zeros(vec![c, out_h, out_w]);
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let data = src.data();
    let dst = out.data_mut();
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let fy = (oy as f64 + 0.5) * sy - 0.5;
            let y0 = fy.floor();
            let wy = fy - y0;
            let y0c = (y0 as isize).clamp(0, h as isize - 1) as usize;
            let y1c = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
            for ox in 0..out_w {
                let fx = (ox as f64 + 0.5) * sx - 0.5;
                let x0 = fx.floor();
                let wx = fx - x0;
                let x0c = (x0 as isize).clamp(0, w as isize - 1) as usize;
                let x1c = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
                let top = plane[y0c * w + x0c] * (1.0 - wx) + plane[y0c * w + x1c] * wx;
                let bottom = plane[y1c * w + x0c] * (1.0 - wx) + plane[y1c * w + x1c] * wx;
                dst[ch * out_h * out_w + oy * out_w + ox] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    Ok(out)
}

/// Preprocessing options. `mean_subtract` holds per-channel dataset means to
/// subtract after resizing; `None` (the default) leaves values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessOptions {
    pub target: (usize, usize),
    pub mean_subtract: Option<[f64; 3]>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { target: (224, 224), mean_subtract: None }
    }
}

impl PreprocessOptions {
    pub fn for_target(height: usize, width: usize) -> Self {
        PreprocessOptions { target: (height, width), mean_subtract: None }
    }
}

/// Runs the preprocessing chain on a decoded image: scale to `[0,1]` by the
/// dtype maximum, replicate gray to 3 channels, resize to the target, then
/// optionally subtract per-channel means.
pub fn preprocess(raw: &RawImage, options: &PreprocessOptions) -> Result<Tensor> {
    let (c, h, w) = match raw.data.shape() {
        &[c, h, w] if c == 1 || c == 3 => (c, h, w),
        other => {
            return Err(Error::argument(format!(
                "preprocess expects a [1|3,H,W] image, got {other:?}"
            )))
        }
    };
    if raw.max_value <= 0.0 {
        return Err(Error::argument("image max value must be positive"));
    }

    let mut scaled = raw.data.clone();
    for v in scaled.data_mut() {
        *v /= raw.max_value;
    }

    let rgb = if c == 3 {
        scaled
    } else {
        let plane = scaled.data();
        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            data.extend_from_slice(plane);
        }
        Tensor::new(vec![3, h, w], data)?
    };

    let mut resized = resize_bilinear(&rgb, options.target.0, options.target.1)?;
    if let Some(means) = options.mean_subtract {
        let plane = options.target.0 * options.target.1;
        let data = resized.data_mut();
        for (ch, mean) in means.iter().enumerate() {
            for v in &mut data[ch * plane..(ch + 1) * plane] {
                *v -= mean;
            }
        }
    }
    Ok(resized)
}

/// Per-channel mean over a set of preprocessed `[3,H,W]` tensors, for the
/// dataset-mean subtraction flag.
pub fn dataset_mean(images: &[Tensor]) -> Result<[f64; 3]> {
    if images.is_empty() {
        return Err(Error::argument("dataset mean of an empty set"));
    }
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for image in images {
        let (h, w) = match image.shape() {
            &[3, h, w] => (h, w),
            other => {
                return Err(Error::dimension(format!(
                    "dataset_mean expects [3,H,W], got {other:?}"
                )))
            }
        };
        let plane = h * w;
        for ch in 0..3 {
            sums[ch] += image.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
        count += plane;
    }
    Ok([sums[0] / count as f64, sums[1] / count as f64, sums[2] / count as f64])
}

/// Encodes a `[0,1]` grayscale or RGB tensor as an 8-bit PNG.
pub fn encode_png(pixels: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_png_bytes(pixels)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn encode_png_bytes(pixels: &Tensor) -> Result<Vec<u8>> {
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (buffer, w, h, color) = match pixels.shape() {
        &[1, h, w] => {
            let buf: Vec<u8> = pixels.data().iter().map(|&v| quantize(v)).collect();
            (buf, w, h, image::ExtendedColorType::L8)
        }
        &[3, h, w] => {
            let plane = h * w;
            let mut buf = vec![0u8; 3 * plane];
            for i in 0..plane {
                for c in 0..3 {
                    buf[i * 3 + c] = quantize(pixels.data()[c * plane + i]);
                }
            }
            (buf, w, h, image::ExtendedColorType::Rgb8)
        }
        other => {
            return Err(Error::dimension(format!(
                "png encoding expects [1|3,H,W], got {other:?}"
            )))
        }
    };
    let mut bytes = Vec::new();
    image::write_buffer_with_format(
        &mut std::io::Cursor::new(&mut bytes),
        &buffer,
        w as u32,
        h as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::format(format!("png encode failed: {e}")))?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_255_maps_to_one_without_resize() {
        let raw = RawImage::from_gray8(224, 224, &vec![255u8; 224 * 224]).unwrap();
        let out = preprocess(&raw, &PreprocessOptions::default()).unwrap();
        assert_eq!(out.shape(), &[3, 224, 224]);
        assert!(out.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn constant_zero_maps_to_zero() {
        let raw = RawImage::from_gray8(10, 10, &vec![0u8; 100]).unwrap();
        let out = preprocess(&raw, &PreprocessOptions::default()).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkerboard_upscale_matches_bilinear_oracle() {
        // 2x2 [0,255;255,0] normalized then upscaled to 4x4. Expected values
        // computed from the align-corners=false, edge-clamped formula:
        // source coordinate (i + 0.5) * 0.5 - 0.5 per axis.
        let raw = RawImage::from_gray8(2, 2, &[0, 255, 255, 0]).unwrap();
        let out = preprocess(&raw, &PreprocessOptions::for_target(4, 4)).unwrap();
        #[rustfmt::skip]
        let expected = [
            0.0,   0.25,  0.75,  1.0,
            0.25,  0.375, 0.625, 0.75,
            0.75,  0.625, 0.375, 0.25,
            1.0,   0.75,  0.25,  0.0,
        ];
        for ch in 0..3 {
            for (i, want) in expected.iter().enumerate() {
                let got = out.data()[ch * 16 + i];
                assert!((got - want).abs() < 1e-12, "channel {ch} cell {i}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn mean_subtraction_keeps_range_in_minus_one_one() {
        let raw = RawImage::from_gray8(8, 8, &(0..64).map(|v| (v * 4) as u8).collect::<Vec<_>>())
            .unwrap();
        let plain = preprocess(&raw, &PreprocessOptions::default()).unwrap();
        assert!(plain.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let options = PreprocessOptions {
            target: (224, 224),
            mean_subtract: Some(dataset_mean(&[plain.clone()]).unwrap()),
        };
        let centered = preprocess(&raw, &options).unwrap();
        assert!(centered.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_sized_rejected() {
        assert!(RawImage::from_gray8(0, 4, &[]).is_err());
    }

    #[test]
    fn png_round_trip_through_decoder() {
        let pixels = Tensor::new(
            vec![1, 2, 3],
            vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        )
        .unwrap();
        let bytes = encode_png_bytes(&pixels).unwrap();
        assert_eq!(sniff_format(&bytes), Some(ImageFormat::Png));
        let raw = decode_image_bytes(&bytes).unwrap();
        assert_eq!(raw.data.shape(), &[1, 2, 3]);
        for (got, want) in raw.data.data().iter().zip(pixels.data()) {
            assert!((got / 255.0 - want).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn garbage_bytes_are_unsupported() {
        assert!(matches!(
            decode_image_bytes(b"this is not an image"),
            Err(Error::Unsupported(_))
        ));
    }
}
