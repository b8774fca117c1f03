//! Per-image complexity scoring and the adaptation rules derived from it.
//!
//! An image is scored by two 256-bin histogram entropies: one over its
//! grayscale pixel values and one over its min-max normalized 2-D DFT
//! magnitude spectrum. The combined score steers how deep the generated
//! network is and how strongly its parameters are scaled.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// 8-bit image in row-major H x W x C layout, C = 1 (grayscale) or 3 (RGB).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("image must have positive height and width"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::dim(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "image buffer holds {} bytes, expected {}x{}x{} = {}",
                data.len(),
                height,
                width,
                channels,
                height * width * channels
            )));
        }
        Ok(ImageU8 {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Grayscale view: the raw bytes for single-channel images, otherwise
    /// the rounded luminance 0.299 R + 0.587 G + 0.114 B per pixel.
    pub fn grayscale(&self) -> Vec<u8> {
        match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|px| {
                    let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                    y.round() as u8
                })
                .collect(),
        }
    }
}

/// Shannon entropy in bits of the 256-bin histogram over `bytes`.
fn histogram_entropy(bytes: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for b in bytes {
        counts[*b as usize] += 1;
    }
    let n = bytes.len() as f64;
    let e: f64 = counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.log2()
        })
        .sum();
    // a single occupied bin yields -1.0 * log2(1.0) == -0.0; keep the
    // reported entropy at a plain positive zero
    e + 0.0
}

/// Entropy of the grayscale pixel histogram, in [0, 8] bits.
pub fn pixel_entropy(img: &ImageU8) -> f64 {
    histogram_entropy(&img.grayscale())
}

/// Magnitude of the unnormalized 2-D DFT of the grayscale image, row-major
/// H x W. The (0,0) term is the plain pixel sum.
pub fn dft2_magnitude(img: &ImageU8) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let mut buf: Vec<Complex<f64>> = img
        .grayscale()
        .iter()
        .map(|v| Complex::new(*v as f64, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
    buf.iter().map(|z| z.norm()).collect()
}

/// Entropy of the spectrum histogram: magnitudes are min-max normalized to
/// [0, 255], rounded to bins, and scored like pixels. A constant spectrum
/// carries no information and scores 0.
pub fn frequency_entropy(img: &ImageU8) -> f64 {
    let mag = dft2_magnitude(img);
    let min = mag.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = mag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return 0.0;
    }
    let bytes: Vec<u8> = mag
        .iter()
        .map(|m| ((m - min) / (max - min) * 255.0).round() as u8)
        .collect();
    histogram_entropy(&bytes)
}

/// Pixel-domain, frequency-domain, and combined complexity of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexityScore {
    pub pixel: f64,
    pub frequency: f64,
    pub combined: f64,
}

pub fn complexity(img: &ImageU8) -> ComplexityScore {
    let pixel = pixel_entropy(img);
    let frequency = frequency_entropy(img);
    ComplexityScore {
        pixel,
        frequency,
        combined: 0.5 * (pixel + frequency),
    }
}

/// Knobs derived from a complexity score:
/// integration step `depth_scale` = tanh(1/score), unrolled depth
/// `depth` = floor(1/depth_scale), and initial state fill
/// `param_scale` = exp(1 - score^-2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptationParams {
    pub score: f64,
    pub depth_scale: f64,
    pub depth: usize,
    pub param_scale: f64,
}

pub fn adapt(h: f64) -> Result<AdaptationParams> {
    if !h.is_finite() || h < 0.0 {
        return Err(Error::contract(format!(
            "complexity score must be finite and non-negative, got {h}"
        )));
    }
    // The h -> 0 limit: tanh(1/h) -> 1 and exp(1 - h^-2) -> 0.
    if h < 1e-9 {
        return Ok(AdaptationParams {
            score: h,
            depth_scale: 1.0,
            depth: 1,
            param_scale: 0.0,
        });
    }
    let depth_scale = (1.0 / h).tanh();
    let depth = (1.0 / depth_scale).floor() as usize;
    let param_scale = (1.0 - 1.0 / (h * h)).exp();
    Ok(AdaptationParams {
        score: h,
        depth_scale,
        depth,
        param_scale,
    })
}
