//! Image transforms a defender's adversary might apply to perturbed images.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageBuffer, Rgb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Countermeasure {
    /// Adds `N(0, scale^2)` and clamps.
    RandomNoise { scale: f64 },
    /// `floor(v (2^bits - 1)) / (2^bits - 1)`.
    Quantize { bits: u32 },
    /// Normalized `k x k` Gaussian kernel with edge replication.
    GaussianBlur { kernel: usize, sigma: f64 },
    /// Baseline JPEG encode and decode.
    Jpeg { quality: u8 },
}

impl Countermeasure {
    pub const NAMES: [&'static str; 4] = ["random_noise", "quantize", "gaussian_blur", "jpeg"];

    pub fn defaults() -> [Countermeasure; 4] {
        [
            Countermeasure::RandomNoise { scale: 0.05 },
            Countermeasure::Quantize { bits: 6 },
            Countermeasure::GaussianBlur { kernel: 3, sigma: 0.05 },
            Countermeasure::Jpeg { quality: 75 },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Countermeasure::RandomNoise { .. } => "random_noise",
            Countermeasure::Quantize { .. } => "quantize",
            Countermeasure::GaussianBlur { .. } => "gaussian_blur",
            Countermeasure::Jpeg { .. } => "jpeg",
        }
    }

    /// The default-parameter transform called `kind`.
    pub fn by_name(kind: &str) -> Result<Self> {
        Self::defaults()
            .into_iter()
            .find(|c| c.name() == kind)
            .ok_or_else(|| Error::Config(format!("unknown countermeasure `{kind}`")))
    }
}

/// Applies `cm` to every image of an NCHW batch in `[0, 1]`.
pub fn apply_countermeasure(batch: &Tensor<f32>, cm: Countermeasure, seed: u64) -> Result<Tensor<f32>> {
    let d = batch.dims();
    if d.len() != 4 {
        return Err(Error::Config(format!("expected an NCHW batch, got {d:?}")));
    }
    match cm {
        Countermeasure::RandomNoise { scale } => {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(Error::Config(format!("noise scale must be non-negative, got {scale}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, scale).unwrap();
            let mut out = batch.clone();
            for v in out.data_mut() {
                *v = (*v + n.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
            Ok(out)
        }
        Countermeasure::Quantize { bits } => {
            if !(1..=16).contains(&bits) {
                return Err(Error::Config(format!("bits must be in 1..=16, got {bits}")));
            }
            let levels = ((1u32 << bits) - 1) as f32;
            // The epsilon keeps exact level values from flooring one level down.
            Ok(batch.map(|v| ((v.clamp(0.0, 1.0) * levels + 1e-4).floor() / levels).min(1.0)))
        }
        Countermeasure::GaussianBlur { kernel, sigma } => {
            if kernel % 2 == 0 || sigma <= 0.0 {
                return Err(Error::Config(format!("blur needs an odd kernel and sigma > 0, got {kernel}, {sigma}")));
            }
            Ok(blur(batch, kernel, sigma))
        }
        Countermeasure::Jpeg { quality } => {
            if !(1..=100).contains(&quality) {
                return Err(Error::Config(format!("jpeg quality must be in 1..=100, got {quality}")));
            }
            jpeg(batch, quality)
        }
    }
}

fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as f64;
    let w: Vec<f64> = (0..k).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn blur(batch: &Tensor<f32>, k: usize, sigma: f64) -> Tensor<f32> {
    let d = batch.dims();
    let (h, w) = (d[2] as i64, d[3] as i64);
    let kern = gaussian_kernel(k, sigma);
    let r = (k / 2) as i64;
    let mut out = batch.clone();
    let plane = (h * w) as usize;
    for (src, dst) in batch.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (dy, ky) in (-r..=r).zip(&kern) {
                    for (dx, kx) in (-r..=r).zip(&kern) {
                        let sy = (y + dy).clamp(0, h - 1);
                        let sx = (x + dx).clamp(0, w - 1);
                        acc += ky * kx * src[(sy * w + sx) as usize] as f64;
                    }
                }
                dst[(y * w + x) as usize] = acc as f32;
            }
        }
    }
    out
}

fn jpeg(batch: &Tensor<f32>, quality: u8) -> Result<Tensor<f32>> {
    let d = batch.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    if c != 3 {
        return Err(Error::Config(format!("jpeg needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = batch.clone();
    for i in 0..n {
        let img = &batch.data()[i * 3 * plane..(i + 1) * 3 * plane];
        let rgb = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            Rgb([0, 1, 2].map(|ch| (img[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        let mut bytes = Vec::new();
        JpegEncoder::new_with_quality(&mut bytes, quality)
            .encode_image(&rgb)
            .map_err(|e| Error::Metric(format!("jpeg encode: {e}")))?;
        let decoded = image::load(Cursor::new(bytes), image::ImageFormat::Jpeg)
            .map_err(|e| Error::Metric(format!("jpeg decode: {e}")))?
            .to_rgb8();
        let dst = &mut out.data_mut()[i * 3 * plane..(i + 1) * 3 * plane];
        for (x, y, p) in decoded.enumerate_pixels() {
            let q = y as usize * w + x as usize;
            for ch in 0..3 {
                dst[ch * plane + q] = p[ch] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> Tensor<f32> {
        Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 53) % 97) as f32 / 96.0)
    }

    #[test]
    fn quantize_is_idempotent() {
        let q = apply_countermeasure(&batch(), Countermeasure::Quantize { bits: 6 }, 0).unwrap();
        let qq = apply_countermeasure(&q, Countermeasure::Quantize { bits: 6 }, 0).unwrap();
        assert_eq!(q, qq);
        assert!(q.data().iter().all(|v| ((v * 63.0).round() - v * 63.0).abs() < 1e-4));
    }

    #[test]
    fn quantize_matches_floor_rule_off_grid() {
        let x = Tensor::new(vec![1, 3, 1, 1], vec![0.5f32, 0.999, 0.01]).unwrap();
        let q = apply_countermeasure(&x, Countermeasure::Quantize { bits: 6 }, 0).unwrap();
        let want = [31.0f32 / 63.0, 62.0 / 63.0, 0.0];
        for (a, b) in q.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn narrow_blur_is_near_identity() {
        let b = batch();
        let out = apply_countermeasure(&b, Countermeasure::GaussianBlur { kernel: 3, sigma: 0.05 }, 0).unwrap();
        let diff = out.zip_map(&b, |a, c| (a - c).abs()).unwrap().max_abs();
        assert!(diff < 1e-3, "{diff}");
    }

    #[test]
    fn wide_blur_preserves_constants_and_smooths() {
        let c = Tensor::full(&[1, 3, 5, 5], 0.4f32);
        let out = apply_countermeasure(&c, Countermeasure::GaussianBlur { kernel: 3, sigma: 2.0 }, 0).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn noise_stays_in_range_and_is_seeded() {
        let cm = Countermeasure::RandomNoise { scale: 0.05 };
        let a = apply_countermeasure(&batch(), cm, 3).unwrap();
        assert_eq!(a, apply_countermeasure(&batch(), cm, 3).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn jpeg_round_trip_is_close() {
        let x = Tensor::full(&[1, 3, 8, 8], 0.5f32);
        let out = apply_countermeasure(&x, Countermeasure::Jpeg { quality: 75 }, 0).unwrap();
        assert!(out.zip_map(&x, |a, b| (a - b).abs()).unwrap().max_abs() < 0.02);
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!(Countermeasure::by_name("sharpen"), Err(Error::Config(_))));
        assert_eq!(Countermeasure::by_name("jpeg").unwrap(), Countermeasure::Jpeg { quality: 75 });
    }
}
