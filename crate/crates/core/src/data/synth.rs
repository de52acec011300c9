//! Procedural pseudo-anatomy: an elliptical brain with three nested tissue
//! regions, plus soft-edged disk lesions.

use super::{GroundTruth, LesionSpec, Modality, Slice};
use crate::error::{Error, Result};
use crate::rng;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

pub const SUPPORTED_SIZES: [usize; 4] = [32, 64, 128, 256];

const SUBJECT_SHIFT_STD: f64 = 0.05;
const BIAS_FIELD_AMPLITUDE: f64 = 0.06;
const WHITE_NOISE_STD: f64 = 0.08;

/// Intensity distribution of one tissue class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub mean: f64,
    /// Total pixel-level standard deviation (subject shift, bias field and
    /// white noise combined).
    pub std: f64,
}

/// Tissue classes ordered outer, middle, inner (region ids 1, 2, 3).
///
/// T2-like: grey-ish cortex, dark white matter, bright fluid core.
/// T1-like: the contrast of white matter and fluid is inverted.
pub fn tissue_components(modality: Modality) -> [Component; 3] {
    // two independent sinusoids of amplitude A have total variance A^2
    let std = (SUBJECT_SHIFT_STD.powi(2) + BIAS_FIELD_AMPLITUDE.powi(2) + WHITE_NOISE_STD.powi(2)).sqrt();
    let means = match modality {
        Modality::T2like => [0.2, -0.8, 1.6],
        Modality::T1like => [0.0, 0.9, -1.5],
    };
    means.map(|mean| Component { mean, std })
}

/// A generated slice with the region map it was drawn from
/// (0 = background, 1..=3 = tissue class).
#[derive(Clone, Debug)]
pub struct SynthSubject {
    pub slice: Slice,
    pub regions: Array2<u8>,
}

struct Harmonics(Vec<(f64, f64, f64)>);

impl Harmonics {
    fn draw<R: Rng>(rng: &mut R, orders: std::ops::RangeInclusive<u32>, max_amp: f64) -> Self {
        Harmonics(orders.map(|m| (m as f64, rng.random_range(0.0..max_amp), rng.random_range(0.0..2.0 * PI))).collect())
    }

    fn at(&self, phi: f64) -> f64 {
        1.0 + self.0.iter().map(|(m, a, ph)| a * (m * phi + ph).cos()).sum::<f64>()
    }
}

fn check_size(size: usize) -> Result<()> {
    if SUPPORTED_SIZES.contains(&size) {
        Ok(())
    } else {
        Err(Error::Config(format!("unsupported synthetic size {size}; expected one of {SUPPORTED_SIZES:?}")))
    }
}

/// Healthy slices with their region maps. Subject `i` depends only on
/// `(seed, i, size, modality)`.
pub fn generate_healthy_labeled(seed: u64, n: usize, size: usize, modality: Modality) -> Result<Vec<SynthSubject>> {
    check_size(size)?;
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    Ok((0..n).map(|i| generate_one(seed, i, size, modality)).collect())
}

pub fn generate_healthy(seed: u64, n: usize, size: usize, modality: Modality) -> Result<Vec<Slice>> {
    Ok(generate_healthy_labeled(seed, n, size, modality)?.into_iter().map(|s| s.slice).collect())
}

fn generate_one(seed: u64, index: usize, size: usize, modality: Modality) -> SynthSubject {
    let mut rng = rng::stream(seed, &format!("healthy/{modality}/{size}"), index as u64);
    let d = size as f64;
    // small pose and shape jitter: subjects are assumed roughly registered
    let cy = 0.5 + rng.random_range(-0.015..0.015);
    let cx = 0.5 + rng.random_range(-0.015..0.015);
    let a = rng.random_range(0.36..0.41);
    let b = rng.random_range(0.36..0.41);
    let theta: f64 = rng.random_range(-0.1..0.1);
    let edge = Harmonics::draw(&mut rng, 2..=4, 0.02);
    let inner = Harmonics::draw(&mut rng, 2..=3, 0.05);
    let middle = Harmonics::draw(&mut rng, 2..=3, 0.03);
    let t_inner = rng.random_range(0.33..0.38);
    let t_middle = rng.random_range(0.64..0.69);

    let comps = tissue_components(modality);
    let shift = Normal::new(0.0, SUBJECT_SHIFT_STD).unwrap();
    let levels: Vec<f64> = comps.iter().map(|c| c.mean + shift.sample(&mut rng)).collect();
    // smooth multiplicative-free bias field: two low-frequency plane waves
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let ang = rng.random_range(0.0..2.0 * PI);
            let freq = rng.random_range(0.5..1.5) * 2.0 * PI;
            (freq * ang.cos(), freq * ang.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let white = Normal::new(0.0, WHITE_NOISE_STD).unwrap();

    let mut pixels = Array2::<f32>::zeros((size, size));
    let mut mask = Array2::<bool>::from_elem((size, size), false);
    let mut regions = Array2::<u8>::zeros((size, size));
    let (ct, st) = (theta.cos(), theta.sin());
    for r in 0..size {
        for c in 0..size {
            let y = (r as f64 + 0.5) / d;
            let x = (c as f64 + 0.5) / d;
            let (dy, dx) = (y - cy, x - cx);
            let p = (dx * ct + dy * st) / a;
            let q = (-dx * st + dy * ct) / b;
            let rho_e = (p * p + q * q).sqrt();
            let phi = q.atan2(p);
            let rho = rho_e / edge.at(phi);
            if rho > 1.0 {
                continue;
            }
            let region = if rho < t_inner * inner.at(phi) {
                3
            } else if rho < t_middle * middle.at(phi) {
                2
            } else {
                1
            };
            let bias: f64 = waves.iter().map(|(kx, ky, ph)| BIAS_FIELD_AMPLITUDE * (kx * x + ky * y + ph).sin()).sum();
            let v = levels[region as usize - 1] + bias + white.sample(&mut rng);
            pixels[[r, c]] = v as f32;
            mask[[r, c]] = true;
            regions[[r, c]] = region;
        }
    }
    let slice = Slice {
        pixels,
        mask,
        modality,
        subject_id: format!("synth-{modality}-{seed}-{index:05}"),
        slice_index: 0,
    };
    SynthSubject { slice, regions }
}

/// Soft disk profile: 1 well inside, 0 outside, linear ramp of width
/// `softness * radius` centred on the radius so that `profile > 0.5` is
/// exactly `distance < radius`.
fn disk_profile(dist: f64, radius: f64, softness: f64) -> f64 {
    let w = softness * radius;
    if w <= 0.0 {
        return if dist < radius { 1.0 } else { 0.0 };
    }
    (0.5 + (radius - dist) / w).clamp(0.0, 1.0)
}

const PLACEMENT_RETRIES: usize = 500;

/// Add `spec.count` lesions at random positions fully inside the mask.
pub fn inject_lesion(slice: &Slice, spec: &LesionSpec, seed: u64) -> Result<(Slice, GroundTruth)> {
    spec.validate()?;
    let (h, w) = slice.dim();
    let mut rng = rng::stream(seed, "lesion", 0);
    let radius = spec.radius_px as f64;
    let support = radius + 0.5 * spec.softness * radius;
    let reach = support.ceil() as isize;
    let inside: Vec<(usize, usize)> =
        slice.mask.indexed_iter().filter(|(_, &m)| m).map(|(ix, _)| ix).collect();
    if inside.is_empty() {
        return Err(Error::Placement(format!("{} has an empty mask", slice.key())));
    }

    let mut profile = Array2::<f64>::zeros((h, w));
    for lesion in 0..spec.count {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let (r0, c0) = inside[rng.random_range(0..inside.len())];
            let fits = (-reach..=reach).all(|dr| {
                (-reach..=reach).all(|dc| {
                    let dist = ((dr * dr + dc * dc) as f64).sqrt();
                    if disk_profile(dist, radius, spec.softness) <= 0.0 {
                        return true;
                    }
                    let (r, c) = (r0 as isize + dr, c0 as isize + dc);
                    r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && slice.mask[[r as usize, c as usize]]
                })
            });
            if fits {
                placed = Some((r0, c0));
                break;
            }
        }
        let (r0, c0) = placed.ok_or_else(|| {
            Error::Placement(format!(
                "no position for lesion {lesion} of radius {} inside {} after {PLACEMENT_RETRIES} tries",
                spec.radius_px,
                slice.key()
            ))
        })?;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (r0 as isize + dr, c0 as isize + dc);
                if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
                    continue;
                }
                let p = disk_profile(((dr * dr + dc * dc) as f64).sqrt(), radius, spec.softness);
                let cell = &mut profile[[r as usize, c as usize]];
                *cell = cell.max(p);
            }
        }
    }

    let mut out = slice.clone();
    out.pixels.zip_mut_with(&profile, |v, &p| {
        if p > 0.0 {
            *v = (*v as f64 + spec.intensity_offset * p) as f32;
        }
    });
    let labels = profile.mapv(|p| p > 0.5);
    if labels.iter().all(|&l| l) {
        return Err(Error::Placement("lesion covers the whole image".into()));
    }
    Ok((out, GroundTruth { labels }))
}
