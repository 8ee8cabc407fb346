//! Mini-batch streaming with deterministic shuffling and augmentation.
//!
//! Sample ids travel with each batch so the label store can address its
//! rows. Augmentation randomness is a pure function of (stream seed,
//! sample id): two walks over the same epoch seed produce identical
//! pixels, and per-image work can run in parallel without ordering
//! effects.

use ndarray::{Array4, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{NoisyDataset, Split};
use crate::util::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    /// Pass pixels through unchanged.
    None,
    /// Random perspective warp plus brightness/contrast jitter (digit
    /// recipe).
    Digits,
    /// Random horizontal/vertical flip or small rotation (photo recipe).
    Flips,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    /// [b, c, h, w], augmented when requested.
    pub images: Array4<f32>,
    pub noisy_labels: Vec<u16>,
}

pub(super) fn stream<'d>(
    ds: &'d NoisyDataset,
    split: Split,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    augment: Augment,
) -> impl Iterator<Item = Batch> + 'd {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order = ds.ids(split);
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    let aug_seed = shuffle_seed.unwrap_or(0);
    let (c, h, w) = ds.image_shape();
    (0..order.len().div_ceil(batch_size)).map(move |bi| {
        let ids: Vec<usize> =
            order[bi * batch_size..((bi + 1) * batch_size).min(order.len())].to_vec();
        let mut images = Array4::zeros((ids.len(), c, h, w));
        images
            .as_slice_mut()
            .expect("contiguous")
            .par_chunks_mut(c * h * w)
            .zip(ids.par_iter())
            .for_each(|(dst, &id)| {
                let src = ds.sample(id).image;
                match augment {
                    Augment::None => {
                        dst.copy_from_slice(src.as_slice().expect("contiguous"));
                    }
                    _ => {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(mix_seed(aug_seed, 0xA0_617, id as u64));
                        augment_into(src, dst, (c, h, w), augment, &mut rng);
                    }
                }
            });
        let noisy_labels = ids.iter().map(|&id| ds.sample(id).noisy_label).collect();
        Batch {
            ids,
            images,
            noisy_labels,
        }
    })
}

fn augment_into(
    src: ArrayView3<f32>,
    dst: &mut [f32],
    (c, h, w): (usize, usize, usize),
    augment: Augment,
    rng: &mut ChaCha8Rng,
) {
    match augment {
        Augment::Digits => {
            let hm = random_perspective(h as f32, w as f32, 2.5, rng);
            let brightness: f32 = rng.random_range(-0.10..0.10);
            let contrast: f32 = rng.random_range(0.85..1.15);
            warp_bilinear(src, dst, (c, h, w), &hm);
            for v in dst.iter_mut() {
                *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
            }
        }
        Augment::Flips => {
            // one of: horizontal flip, vertical flip, rotation up to ±15°
            match rng.random_range(0..3u8) {
                0 => {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                dst[(ci * h + y) * w + x] = src[[ci, y, w - 1 - x]];
                            }
                        }
                    }
                }
                1 => {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                dst[(ci * h + y) * w + x] = src[[ci, h - 1 - y, x]];
                            }
                        }
                    }
                }
                _ => {
                    let theta: f32 = rng.random_range(-0.26..0.26);
                    let hm = rotation_homography(h as f32, w as f32, theta);
                    warp_bilinear(src, dst, (c, h, w), &hm);
                }
            }
        }
        Augment::None => unreachable!(),
    }
}

/// 3x3 homography mapping output pixel coordinates to source coordinates.
type Homography = [f32; 9];

fn rotation_homography(h: f32, w: f32, theta: f32) -> Homography {
    let (s, c) = theta.sin_cos();
    let (cx, cy) = (w / 2.0, h / 2.0);
    // inverse rotation about the image center
    [
        c,
        s,
        cx - c * cx - s * cy,
        -s,
        c,
        cy + s * cx - c * cy,
        0.0,
        0.0,
        1.0,
    ]
}

/// Random perspective: displace the four source corners by up to `delta`
/// pixels and solve the 8-dof homography that maps output corners onto the
/// displaced ones.
fn random_perspective(h: f32, w: f32, delta: f32, rng: &mut ChaCha8Rng) -> Homography {
    let dst = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let mut src = [(0.0f32, 0.0f32); 4];
    for (s, d) in src.iter_mut().zip(dst.iter()) {
        *s = (
            d.0 + rng.random_range(-delta..delta),
            d.1 + rng.random_range(-delta..delta),
        );
    }
    solve_homography(&dst, &src)
}

/// Direct linear solve of the 8-unknown system mapping `from` -> `to`.
fn solve_homography(from: &[(f32, f32); 4], to: &[(f32, f32); 4]) -> Homography {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = (from[i].0 as f64, from[i].1 as f64);
        let (u, v) = (to[i].0 as f64, to[i].1 as f64);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // gaussian elimination with partial pivoting on the 8x8 system
    for col in 0..8 {
        let mut piv = col;
        for (r, row) in a.iter().enumerate().skip(col + 1) {
            if row[col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        a.swap(col, piv);
        let p = a[col][col];
        if p.abs() < 1e-12 {
            // degenerate draw: fall back to identity
            return [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        }
        let pivot_row = a[col];
        for (r, row) in a.iter_mut().enumerate() {
            if r == col {
                continue;
            }
            let f = row[col] / p;
            for (k, &pv) in pivot_row.iter().enumerate().skip(col) {
                row[k] -= f * pv;
            }
        }
    }
    let mut hm = [0.0f32; 9];
    for (i, slot) in hm.iter_mut().take(8).enumerate() {
        *slot = (a[i][8] / a[i][i]) as f32;
    }
    hm[8] = 1.0;
    hm
}

fn warp_bilinear(
    src: ArrayView3<f32>,
    dst: &mut [f32],
    (c, h, w): (usize, usize, usize),
    hm: &Homography,
) {
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let d = hm[6] * fx + hm[7] * fy + hm[8];
            let sx = (hm[0] * fx + hm[1] * fy + hm[2]) / d - 0.5;
            let sy = (hm[3] * fx + hm[4] * fy + hm[5]) / d - 0.5;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (ax, ay) = (sx - x0, sy - y0);
            for ci in 0..c {
                let at = |yy: f32, xx: f32| -> f32 {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f32 || xx >= w as f32 {
                        0.0
                    } else {
                        src[[ci, yy as usize, xx as usize]]
                    }
                };
                let v = at(y0, x0) * (1.0 - ax) * (1.0 - ay)
                    + at(y0, x0 + 1.0) * ax * (1.0 - ay)
                    + at(y0 + 1.0, x0) * (1.0 - ax) * ay
                    + at(y0 + 1.0, x0 + 1.0) * ax * ay;
                dst[(ci * h + y) * w + x] = v;
            }
        }
    }
}
