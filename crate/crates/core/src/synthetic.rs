//! Deterministic synthetic image corpora.
//!
//! The training corpus lays zero-mean noise or impulse-noise patches, either
//! chromatic or grey, over flat or gently graded backgrounds, so texture-seeking behaviour can be
//! measured against known regions and median smoothing removes the patch
//! texture without leaving colour edges. The photo-like corpus (smooth
//! fields plus mild sensor noise) is the clean reference for the
//! steganalysis detectors.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::Result;
use crate::image::ImageTensor;

/// Class count of [`SyntheticImage::label`]: patch colouring x patch kind.
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Background,
    Noise,
    Impulse,
}

#[derive(Debug, Clone)]
pub struct SyntheticImage {
    pub image: ImageTensor,
    /// `2 * chromatic_patches + impulse_patches`.
    pub label: usize,
    /// Per-pixel region, row-major.
    pub regions: Vec<Region>,
}

impl SyntheticImage {
    pub fn region(&self, row: usize, col: usize) -> Region {
        self.regions[row * self.image.width() + col]
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One textured training image of `size x size x 3`.
pub fn textured_image<R: Rng>(rng: &mut R, size: usize) -> Result<SyntheticImage> {
    let gradient = rng.gen_bool(0.5);
    let impulse = rng.gen_bool(0.5);
    let chromatic = rng.gen_bool(0.5);
    let c0 = random_color(rng);
    let ramp = [0, 1, 2].map(|_| rng.gen_range(-0.25..0.25));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut px = vec![[0.0f64; 3]; size * size];
    for r in 0..size {
        for c in 0..size {
            px[r * size + c] = if gradient {
                let t = (c as f64 * dx + r as f64 * dy) / size as f64;
                [0, 1, 2].map(|k| c0[k] + ramp[k] * t)
            } else {
                c0
            };
        }
    }
    let mut regions = vec![Region::Background; size * size];
    let patches = rng.gen_range(1..=3);
    for _ in 0..patches {
        let side = rng.gen_range(size / 5..=size * 3 / 8).max(4);
        let top = rng.gen_range(0..=size - side);
        let left = rng.gen_range(0..=size - side);
        let amplitude = rng.gen_range(0.2..0.4);
        let density = rng.gen_range(0.2..0.4);
        for r in top..top + side {
            for c in left..left + side {
                let i = r * size + c;
                if impulse {
                    if rng.gen_bool(density) {
                        let v = if rng.gen_bool(0.5) { 0.0 } else { 1.0 };
                        px[i] = if chromatic {
                            [v, rng.gen_range(0..2) as f64, rng.gen_range(0..2) as f64]
                        } else {
                            [v; 3]
                        };
                    }
                    regions[i] = Region::Impulse;
                } else {
                    let grey = rng.gen_range(-amplitude..amplitude);
                    px[i] = [0, 1, 2].map(|k| {
                        px[i][k] + if chromatic { rng.gen_range(-amplitude..amplitude) } else { grey }
                    });
                    regions[i] = Region::Noise;
                }
            }
        }
    }
    let bytes = px.iter().flat_map(|p| p.map(to_byte)).collect();
    Ok(SyntheticImage {
        image: ImageTensor::new(size, size, 3, bytes)?,
        label: 2 * chromatic as usize + impulse as usize,
        regions,
    })
}

/// Photo-like clean image: smooth colour field, a few soft blobs, Gaussian
/// sensor noise and a tone curve.
pub fn photo_like_image<R: Rng>(rng: &mut R, size: usize) -> Result<ImageTensor> {
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.gen_range(2..6))
        .map(|_| {
            (
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
                rng.gen_range(size as f64 / 10.0..size as f64 / 3.0),
                [0, 1, 2].map(|_| rng.gen_range(-0.3..0.3)),
            )
        })
        .collect();
    let sigma = rng.gen_range(1.0..3.0) / 255.0;
    // levels adjustment applied to the already quantised values, as photo
    // pipelines do; it leaves the comb-shaped histograms of real photos
    let lo = rng.gen_range(0.0..0.08);
    let hi = rng.gen_range(0.85..1.0);
    let gamma: f64 = rng.gen_range(0.8..1.25);
    let levels = |b: u8| -> u8 {
        let t = ((b as f64 / 255.0 - lo) / (hi - lo)).clamp(0.0, 1.0);
        to_byte(t.powf(gamma))
    };
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let mut bytes = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let t = ((c as f64 * dx + r as f64 * dy) / size as f64 * 0.5 + 0.5).clamp(0.0, 1.0);
            for k in 0..3 {
                let mut v = c0[k] * (1.0 - t) + c1[k] * t;
                for &(by, bx, rad, amp) in &blobs {
                    let d2 = ((r as f64 - by).powi(2) + (c as f64 - bx).powi(2)) / (rad * rad);
                    v += amp[k] * (-d2).exp();
                }
                v += noise.sample(rng);
                bytes.push(levels(to_byte(v)));
            }
        }
    }
    ImageTensor::new(size, size, 3, bytes)
}

pub fn textured_corpus(count: usize, size: usize, seed: u64) -> Result<Vec<SyntheticImage>> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    (0..count).map(|_| textured_image(&mut rng, size)).collect()
}

pub fn photo_like_corpus(count: usize, size: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    (0..count).map(|_| photo_like_image(&mut rng, size)).collect()
}
