//! Synthetic oriented-stripe datasets for desk-scale experiments.
//!
//! Four classes by stripe orientation (horizontal, vertical, diagonal,
//! anti-diagonal) with per-image random phase and Gaussian pixel
//! noise. `stripes_dataset` keeps the noise band narrow so every image lands
//! in a tight complexity band (the adaptive planner realizes the same depth
//! for all of them, and per-sample activation statistics stay close to the
//! running averages used at inference). `mixed_complexity_dataset`
//! deliberately spans a wide complexity range instead, producing a spread of
//! realized depths for adaptivity experiments.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::complexity::ImageU8;
use crate::error::Result;
use crate::train::data::Dataset;

pub const STRIPE_CLASSES: usize = 4;

/// One standard normal sample via Box-Muller.
fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn stripe_image(
    rng: &mut impl Rng,
    class: usize,
    size: usize,
    sigma_lo: f64,
    sigma_hi: f64,
) -> Result<ImageU8> {
    // fixed stripe period: every class presents a stable frequency
    // signature, and randomness comes from the phase (full square-wave
    // cycle, polarity flips included) and the pixel noise
    let period = 4usize;
    let phase = rng.gen_range(0..2 * period);
    let sigma = rng.gen_range(sigma_lo..=sigma_hi);
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let t = match class {
                0 => i,
                1 => j,
                2 => i + j,
                // i - j, shifted to stay non-negative
                _ => i + size - j,
            };
            let tone = if ((t + phase) / period) % 2 == 0 {
                40.0
            } else {
                215.0
            };
            let v = tone + sigma * normal(rng);
            data.push(v.clamp(0.0, 255.0).round() as u8);
        }
    }
    ImageU8::new(size, size, 1, data)
}

/// Deterministic dataset of `n` square grayscale stripe images. Classes
/// cycle 0..4 so every prefix is nearly balanced. Noise is mild and the
/// complexity band narrow by design.
pub fn stripes_dataset(n: usize, size: usize, seed: u64, tag: &str) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for idx in 0..n {
        let class = idx % STRIPE_CLASSES;
        images.push(stripe_image(&mut rng, class, size, 1.8, 2.2)?);
        labels.push(class as u8);
    }
    Dataset::new(images, labels, tag)
}

/// Deterministic dataset spanning a wide complexity range: heavily noised
/// stripes alternate with flat images, so entropy scores (and therefore the
/// realized depths of an adaptive model) differ strongly between samples.
/// Labels still cycle through the four stripe classes; flat images keep the
/// label of the class slot they occupy.
pub fn mixed_complexity_dataset(n: usize, size: usize, seed: u64, tag: &str) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for idx in 0..n {
        let class = idx % STRIPE_CLASSES;
        if idx % 2 == 0 {
            images.push(stripe_image(&mut rng, class, size, 25.0, 60.0)?);
        } else {
            let tone: u8 = rng.gen_range(0..=255);
            images.push(ImageU8::new(size, size, 1, vec![tone; size * size])?);
        }
        labels.push(class as u8);
    }
    Dataset::new(images, labels, tag)
}
