//! Deterministic synthetic digit images.
//!
//! Digits are drawn as seven-segment strokes with per-sample affine
//! distortion, endpoint wobble, stroke-width and intensity jitter, and
//! pixel noise, rasterized into the 28x28 / single-channel / [0,1] format
//! of the classic handwritten-digit files. The generator is a pure
//! function of (sizes, seed), which keeps every experiment offline and
//! bit-reproducible.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{NoisyDataset, Split};
use crate::util::{mix_seed, normal_f32};

const SIDE: usize = 28;

/// Segment endpoints on a 1x2 canonical glyph box.
/// A=top, B=top-right, C=bottom-right, D=bottom, E=bottom-left, F=top-left,
/// G=middle.
const SEGMENTS: [((f32, f32), (f32, f32)); 7] = [
    ((0.0, 0.0), (1.0, 0.0)), // A
    ((1.0, 0.0), (1.0, 1.0)), // B
    ((1.0, 1.0), (1.0, 2.0)), // C
    ((0.0, 2.0), (1.0, 2.0)), // D
    ((0.0, 1.0), (0.0, 2.0)), // E
    ((0.0, 0.0), (0.0, 1.0)), // F
    ((0.0, 1.0), (1.0, 1.0)), // G
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 4, 2, 3],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

fn point_segment_dist(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Render one digit into a SIDE*SIDE buffer.
fn render(label: u16, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    // distorted glyph: jitter endpoints, then map through a random affine
    let theta: f32 = rng.random_range(-0.24..0.24);
    let scale: f32 = rng.random_range(0.80..1.12);
    let shear: f32 = rng.random_range(-0.18..0.18);
    let (tx, ty): (f32, f32) = (rng.random_range(-2.2..2.2), rng.random_range(-2.2..2.2));
    let thickness: f32 = rng.random_range(1.0..1.9);
    let ink: f32 = rng.random_range(0.72..1.0);
    let noise_sd: f32 = rng.random_range(0.00..0.05);

    // glyph units -> pixels: glyph box is 9x18 px centered in the canvas
    let unit = 9.0 * scale;
    let (cx, cy) = (SIDE as f32 / 2.0 + tx, SIDE as f32 / 2.0 + ty);
    let (sin, cos) = theta.sin_cos();

    let mut segs: Vec<((f32, f32), (f32, f32))> = Vec::new();
    for &si in DIGIT_SEGMENTS[label as usize] {
        let (a, b) = SEGMENTS[si];
        let wobble = |rng: &mut ChaCha8Rng, p: (f32, f32)| {
            (
                p.0 + rng.random_range(-0.09..0.09),
                p.1 + rng.random_range(-0.09..0.09),
            )
        };
        let a = wobble(rng, a);
        let b = wobble(rng, b);
        let map = |p: (f32, f32)| {
            // center glyph box ((0.5, 1.0) is the middle), shear, rotate
            let (gx, gy) = (p.0 - 0.5 + shear * (p.1 - 1.0), p.1 - 1.0);
            (
                cx + unit * (cos * gx - sin * gy),
                cy + unit * (cos * gy + sin * gx),
            )
        };
        segs.push((map(a), map(b)));
    }

    for y in 0..SIDE {
        for x in 0..SIDE {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut d = f32::MAX;
            for &(a, b) in &segs {
                d = d.min(point_segment_dist(px, py, a, b));
            }
            // soft-edged stroke
            let v = ink * ((thickness - d) / 0.9).clamp(0.0, 1.0);
            let noisy = v + noise_sd * normal_f32(rng);
            out[y * SIDE + x] = noisy.clamp(0.0, 1.0);
        }
    }
}

pub(super) fn generate(n_train: usize, n_test: usize, seed: u64) -> NoisyDataset {
    let n = n_train + n_test;
    let mut labels = vec![0u16; n];
    let mut label_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5eed_1abe, 0));
    for l in labels.iter_mut() {
        *l = label_rng.random_range(0..10u16);
    }

    let mut images = Array4::zeros((n, 1, SIDE, SIDE));
    images
        .as_slice_mut()
        .expect("contiguous")
        .par_chunks_mut(SIDE * SIDE)
        .enumerate()
        .for_each(|(i, px)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5eed_09e2, i as u64));
            render(labels[i], &mut rng, px);
        });

    let mut split = vec![Split::Train; n];
    for tag in split.iter_mut().skip(n_train) {
        *tag = Split::Test;
    }
    let class_names = (0..10).map(|d| d.to_string()).collect();
    NoisyDataset::from_parts(
        "synth-digits".to_string(),
        images,
        labels,
        split,
        10,
        class_names,
    )
    .expect("synthetic dataset construction is infallible")
}
