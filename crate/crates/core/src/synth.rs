//! Smooth synthetic clips: drifting sinusoidal gratings plus a moving
//! Gaussian blob, with per-channel colour mixing. Used for desk-scale runs
//! and tests where no real footage is available.

use alloc::vec::Vec;
use core::f64::consts::TAU;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::media::{ClipShape, VideoTensor};
use crate::Real;

const GRATINGS: usize = 3;
const PEAK: f64 = 0.85;

struct Grating {
    kx: f64,
    ky: f64,
    speed: f64,
    phase: f64,
    colour: [f64; 3],
}

pub fn synthetic_clip<T: Real>(shape: ClipShape, seed: u64) -> VideoTensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gratings: Vec<Grating> = (0..GRATINGS)
        .map(|_| {
            let cycles = rng.random_range(0.5..2.5);
            let angle = rng.random_range(0.0..TAU);
            Grating {
                kx: TAU * cycles * Float::cos(angle) / shape.width as f64,
                ky: TAU * cycles * Float::sin(angle) / shape.height as f64,
                speed: rng.random_range(-0.4..0.4),
                phase: rng.random_range(0.0..TAU),
                colour: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            }
        })
        .collect();
    let base: [f64; 3] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let (h, w) = (shape.height as f64, shape.width as f64);
    let blob_start = (rng.random_range(0.2..0.8) * w, rng.random_range(0.2..0.8) * h);
    let blob_velocity = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let blob_radius = rng.random_range(0.1..0.25) * w.min(h);
    let blob_colour: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];

    let plane = shape.height * shape.width;
    let frame = shape.frames * plane;
    let raw: Vec<f64> = (0..shape.numel())
        .map(|i| {
            let c = i / frame;
            let t = (i % frame) / plane;
            let y = ((i % plane) / shape.width) as f64;
            let x = (i % shape.width) as f64;
            let mut v = base[c];
            for g in &gratings {
                let arg = g.kx * x + g.ky * y + g.phase + g.speed * t as f64;
                v += 0.25 * g.colour[c] * Float::sin(arg);
            }
            let bx = blob_start.0 + blob_velocity.0 * t as f64;
            let by = blob_start.1 + blob_velocity.1 * t as f64;
            let d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
            v + 0.4 * blob_colour[c] * Float::exp(-d2 / (2.0 * blob_radius * blob_radius))
        })
        .collect();
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let gain = if peak > PEAK { PEAK / peak } else { 1.0 };
    VideoTensor::from_fn(shape, |i| T::of(raw[i] * gain))
}

/// `count` clips with seeds derived from `seed`.
pub fn synthetic_set<T: Real>(count: usize, shape: ClipShape, seed: u64) -> Vec<VideoTensor<T>> {
    (0..count as u64)
        .map(|i| synthetic_clip(shape, seed.wrapping_mul(1_000_003).wrapping_add(i)))
        .collect()
}
