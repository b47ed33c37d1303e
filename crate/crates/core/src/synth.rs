//! Procedural 4-band scenes with per-class spectral signatures.
//!
//! Classes: 0 impervious surface, 1 building, 2 low vegetation, 3 tree,
//! 4 car, 5 water. Vegetation reflects strongly in the near infrared and
//! weakly in red, water is dark in the infrared, built surfaces are flat.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::{LabelMap, Raster, DEFAULT_BANDS};

pub const N_CLASSES: usize = 6;

pub const CLASS_NAMES: [&str; N_CLASSES] = ["impervious", "building", "low_vegetation", "tree", "car", "water"];

/// Mean reflectance per class in `nir, red, green, blue` order.
pub const SIGNATURES: [[f32; 4]; N_CLASSES] = [
    [0.35, 0.30, 0.30, 0.30],
    [0.55, 0.50, 0.50, 0.50],
    [0.60, 0.15, 0.25, 0.10],
    [0.45, 0.08, 0.15, 0.06],
    [0.20, 0.60, 0.15, 0.15],
    [0.05, 0.10, 0.15, 0.25],
];

pub const VEGETATION: [u8; 2] = [2, 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    /// Standard deviation of the additive per-band noise.
    pub noise: f64,
    pub boundary_dense: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            noise: 0.03,
            boundary_dense: false,
        }
    }
}

pub type Sample = (Raster, LabelMap);

/// `n_samples` scenes of `size`×`size`; each one contains every class.
pub fn synth_dataset(seed: u64, n_samples: usize, size: usize) -> Result<Vec<Sample>> {
    synth_dataset_with(seed, n_samples, size, SynthOptions::default())
}

pub fn synth_dataset_with(seed: u64, n_samples: usize, size: usize, opts: SynthOptions) -> Result<Vec<Sample>> {
    if size < 16 || size % 2 != 0 {
        return Err(Error::contract(format!("synthetic size must be even and at least 16, got {size}")));
    }
    if !(opts.noise >= 0.0 && opts.noise.is_finite()) {
        return Err(Error::contract(format!("noise {} must be non-negative", opts.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples).map(|_| scene(&mut rng, size, opts)).collect()
}

fn scene(rng: &mut ChaCha8Rng, size: usize, opts: SynthOptions) -> Result<Sample> {
    let mut labels = if opts.boundary_dense {
        voronoi(rng, size)
    } else {
        shapes(rng, size)
    };
    ensure_coverage(rng, &mut labels, size);
    let noise = Normal::new(0.0, opts.noise).map_err(|e| Error::contract(e.to_string()))?;
    let mut data = Vec::with_capacity(size * size * 4);
    for &l in &labels {
        for &mean in &SIGNATURES[l as usize] {
            let v = mean as f64 + noise.sample(rng);
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok((
        Raster::new(size, size, DEFAULT_BANDS.to_vec(), data)?,
        LabelMap::new(size, size, N_CLASSES, labels)?,
    ))
}

fn fill_rect(labels: &mut [u8], size: usize, (r0, c0, h, w): (usize, usize, usize, usize), class: u8) {
    for r in r0..(r0 + h).min(size) {
        for c in c0..(c0 + w).min(size) {
            labels[r * size + c] = class;
        }
    }
}

fn shapes(rng: &mut ChaCha8Rng, size: usize) -> Vec<u8> {
    let mut labels = vec![0u8; size * size];
    let n_shapes = 4 + size / 8;
    for _ in 0..n_shapes {
        let class = rng.random_range(1..N_CLASSES as u8);
        let (lo, hi) = if class == 4 { (2, 4) } else { (size / 8, size / 3) };
        let h = rng.random_range(lo..=hi.max(lo));
        let w = rng.random_range(lo..=hi.max(lo));
        let r0 = rng.random_range(0..size - h.min(size - 1));
        let c0 = rng.random_range(0..size - w.min(size - 1));
        if rng.random_bool(0.5) || class == 4 {
            fill_rect(&mut labels, size, (r0, c0, h, w), class);
        } else {
            let (cy, cx) = (r0 as f64 + h as f64 / 2.0, c0 as f64 + w as f64 / 2.0);
            let rad = h.min(w) as f64 / 2.0;
            for r in r0..(r0 + h).min(size) {
                for c in c0..(c0 + w).min(size) {
                    let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= rad * rad {
                        labels[r * size + c] = class;
                    }
                }
            }
        }
    }
    labels
}

/// Roughly one cell per 16 pixels, each with a random class.
fn voronoi(rng: &mut ChaCha8Rng, size: usize) -> Vec<u8> {
    let cells = (size * size / 16).max(N_CLASSES);
    let seeds: Vec<(f64, f64, u8)> = (0..cells)
        .map(|_| {
            (
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
                rng.random_range(0..N_CLASSES as u8),
            )
        })
        .collect();
    let mut labels = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let nearest = seeds
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - y).powi(2) + (a.1 - x).powi(2);
                    let db = (b.0 - y).powi(2) + (b.1 - x).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one cell");
            labels.push(nearest.2);
        }
    }
    labels
}

/// Stamps a small square of each missing class.
fn ensure_coverage(rng: &mut ChaCha8Rng, labels: &mut [u8], size: usize) {
    for class in 0..N_CLASSES as u8 {
        if labels.contains(&class) {
            continue;
        }
        loop {
            let r0 = rng.random_range(0..size - 3);
            let c0 = rng.random_range(0..size - 3);
            let mut trial = labels.to_vec();
            fill_rect(&mut trial, size, (r0, c0, 3, 3), class);
            // never erase the last pixels of another class
            if (0..class).all(|k| trial.contains(&k)) {
                labels.copy_from_slice(&trial);
                break;
            }
        }
    }
}
