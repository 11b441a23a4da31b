//! Image decoding, preprocessing, and encoding.
//!
//! Supported codecs: binary PPM (P6, maxval 255) and 8-bit RGB PNG.
//! Preprocessing is bilinear resize to the model's input size, scale to
//! [0,1], then per-channel (x - mean) / std.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::ModelConfig;
use serde::{Deserialize, Serialize};
use std::io::Cursor;
use std::path::Path;

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// RGB, row-major.
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height * 3);
        RawImage {
            width,
            height,
            pixels,
        }
    }

    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub source: String,
    pub original_width: usize,
    pub original_height: usize,
    pub resize: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// H×W×C image in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major HWC.
    pub data: Vec<f64>,
    pub provenance: Option<Provenance>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        ImageTensor {
            height,
            width,
            channels,
            data,
            provenance: None,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageTensor::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.channels],
            self.data.clone(),
        )
    }

    pub fn from_tensor(t: &Tensor, provenance: Option<Provenance>) -> Self {
        assert_eq!(t.shape.len(), 3);
        ImageTensor {
            height: t.shape[0],
            width: t.shape[1],
            channels: t.shape[2],
            data: t.data.clone(),
            provenance,
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Decode by magic bytes: "P6" for PPM, the PNG signature for PNG.
pub fn decode_image(path: &Path) -> Result<RawImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_image_bytes(&bytes, &path.display().to_string())
}

pub fn decode_image_bytes(bytes: &[u8], name: &str) -> Result<RawImage> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes, name)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes, name)
    } else {
        Err(Error::UnknownImageFormat(name.to_string()))
    }
}

fn decode_ppm(bytes: &[u8], name: &str) -> Result<RawImage> {
    let corrupt = |reason: &str| Error::CorruptImage {
        path: name.to_string(),
        reason: reason.to_string(),
    };
    let mut pos = 2; // past "P6"
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(corrupt("missing header field"));
        }
        let s = std::str::from_utf8(&bytes[start..pos]).unwrap();
        fields.push(
            s.parse::<usize>()
                .map_err(|_| corrupt("bad header number"))?,
        );
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(corrupt("maxval must be 255"));
    }
    // single whitespace byte separates header from payload
    if pos >= bytes.len() {
        return Err(corrupt("truncated after header"));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(corrupt("truncated pixel payload"));
    }
    Ok(RawImage::new(width, height, bytes[pos..pos + need].to_vec()))
}

fn decode_png(bytes: &[u8], name: &str) -> Result<RawImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| {
        Error::CorruptImage {
            path: name.to_string(),
            reason: e.to_string(),
        }
    })?;
    let rgb = img.to_rgb8();
    Ok(RawImage::new(
        rgb.width() as usize,
        rgb.height() as usize,
        rgb.into_raw(),
    ))
}

pub fn encode_ppm(img: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_png(img: &RawImage) -> Vec<u8> {
    let mut out = Vec::new();
    let buf: image::RgbImage = image::ImageBuffer::from_raw(
        img.width as u32,
        img.height as u32,
        img.pixels.clone(),
    )
    .expect("raw image buffer");
    image::DynamicImage::ImageRgb8(buf)
        .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        .expect("png encode");
    out
}

/// Write PPM or PNG depending on the file extension (.ppm default).
pub fn write_image(img: &RawImage, path: &Path) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => encode_png(img),
        _ => encode_ppm(img),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Bilinear sample of channel `c` at continuous coordinates, pixel
/// centers at integer positions, edge clamped.
fn bilinear_u8(img: &RawImage, fx: f64, fy: f64, c: usize) -> f64 {
    let x0 = fx.floor().max(0.0) as usize;
    let y0 = fy.floor().max(0.0) as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let x0 = x0.min(img.width - 1);
    let y0 = y0.min(img.height - 1);
    let tx = (fx - x0 as f64).clamp(0.0, 1.0);
    let ty = (fy - y0 as f64).clamp(0.0, 1.0);
    let p = |x: usize, y: usize| img.rgb(x, y)[c] as f64;
    let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
    let bot = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Bilinear resize of an 8-bit image into a float buffer in [0,255].
fn resize_to_f64(img: &RawImage, out_w: usize, out_h: usize) -> Vec<f64> {
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let mut out = Vec::with_capacity(out_w * out_h * 3);
    for y in 0..out_h {
        for x in 0..out_w {
            // align pixel centers
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for c in 0..3 {
                out.push(bilinear_u8(img, fx, fy, c));
            }
        }
    }
    out
}

/// Resize to the model input size, scale to [0,1], standardize with the
/// given per-channel mean/std. For single-channel configs the RGB
/// channels are averaged after standardization.
pub fn preprocess(
    raw: &RawImage,
    cfg: &ModelConfig,
    mean: &[f64],
    std: &[f64],
    source: &str,
) -> Result<ImageTensor> {
    if std.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument("std must be > 0 per channel".into()));
    }
    if mean.len() < cfg.channels.min(3) || std.len() < cfg.channels.min(3) {
        return Err(Error::InvalidArgument(
            "mean/std must cover each channel".into(),
        ));
    }
    let s = cfg.image_size;
    let rgb = resize_to_f64(raw, s, s);
    let mut data = Vec::with_capacity(s * s * cfg.channels);
    for px in rgb.chunks(3) {
        match cfg.channels {
            1 => {
                let v: f64 = (0..3)
                    .map(|c| (px[c] / 255.0 - mean[c.min(mean.len() - 1)]) / std[c.min(std.len() - 1)])
                    .sum::<f64>()
                    / 3.0;
                data.push(v);
            }
            3 => {
                for c in 0..3 {
                    data.push((px[c] / 255.0 - mean[c]) / std[c]);
                }
            }
            n => {
                return Err(Error::InvalidArgument(format!(
                    "unsupported channel count {n} for preprocessing"
                )))
            }
        }
    }
    let mut t = ImageTensor::new(s, s, cfg.channels, data);
    t.provenance = Some(Provenance {
        source: source.to_string(),
        original_width: raw.width,
        original_height: raw.height,
        resize: "bilinear".to_string(),
        mean: mean.to_vec(),
        std: std.to_vec(),
    });
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_known_bytes() {
        let bytes = b"P6\n2 2\n255\n\x01\x02\x03\x04\x05\x06\x07\x08\x09\x0a\x0b\x0c";
        let img = decode_image_bytes(bytes, "test").unwrap();
        assert_eq!(img.width, 2);
        assert_eq!(img.height, 2);
        assert_eq!(img.rgb(0, 0), [1, 2, 3]);
        assert_eq!(img.rgb(1, 1), [10, 11, 12]);
    }

    #[test]
    fn ppm_roundtrip() {
        let img = RawImage::new(3, 2, (0u8..18).collect());
        let enc = encode_ppm(&img);
        let dec = decode_image_bytes(&enc, "rt").unwrap();
        assert_eq!(img, dec);
    }

    #[test]
    fn png_roundtrip() {
        let img = RawImage::new(4, 3, (0u8..36).collect());
        let enc = encode_png(&img);
        let dec = decode_image_bytes(&enc, "rt").unwrap();
        assert_eq!(img, dec);
    }

    #[test]
    fn truncated_png_is_corrupt_error() {
        let img = RawImage::new(4, 4, vec![128; 48]);
        let mut enc = encode_png(&img);
        enc.truncate(enc.len() / 2);
        let err = decode_image_bytes(&enc, "trunc").unwrap_err();
        assert!(matches!(err, Error::CorruptImage { .. }), "{err}");
    }

    #[test]
    fn unknown_format() {
        let err = decode_image_bytes(b"GIF89a....", "x.gif").unwrap_err();
        assert!(matches!(err, Error::UnknownImageFormat(_)));
    }

    #[test]
    fn preprocess_identity_scaling() {
        let cfg = ModelConfig {
            image_size: 2,
            patch_size: 1,
            embed_dim: 4,
            num_layers: 1,
            num_heads: 1,
            mlp_ratio: 1.0,
            num_classes: 2,
            channels: 3,
        };
        let img = RawImage::new(2, 2, vec![255; 12]);
        let t = preprocess(&img, &cfg, &[0.0; 3], &[1.0; 3], "mem").unwrap();
        assert!(t.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn preprocess_gray_arithmetic() {
        let cfg = ModelConfig {
            image_size: 2,
            patch_size: 1,
            embed_dim: 4,
            num_layers: 1,
            num_heads: 1,
            mlp_ratio: 1.0,
            num_classes: 2,
            channels: 3,
        };
        let img = RawImage::new(2, 2, vec![128; 12]);
        let t = preprocess(&img, &cfg, &[0.5; 3], &[0.5; 3], "mem").unwrap();
        let expect = (128.0 / 255.0 - 0.5) / 0.5;
        assert!(t.data.iter().all(|&v| (v - expect).abs() < 1e-12));
        assert!((expect - 0.0039).abs() < 1e-3);
    }

    #[test]
    fn resize_downsampled_self_close_to_original() {
        // smooth gradient image; 2x-downsample then upsample back
        let w = 8;
        let mut pixels = Vec::new();
        for y in 0..w {
            for x in 0..w {
                let v = ((x + y) * 255 / (2 * w - 2)) as u8;
                pixels.extend_from_slice(&[v, v, v]);
            }
        }
        let orig = RawImage::new(w, w, pixels);
        let half = resize_to_f64(&orig, 4, 4);
        let half_img = RawImage::new(
            4,
            4,
            half.iter().map(|&v| v.round() as u8).collect(),
        );
        let back = resize_to_f64(&half_img, w, w);
        for y in 1..w - 1 {
            for x in 1..w - 1 {
                let o = orig.rgb(x, y)[0] as f64;
                let b = back[(y * w + x) * 3];
                assert!((o - b).abs() <= 16.0, "({x},{y}): {o} vs {b}");
            }
        }
    }
}
