//! Deterministic synthetic thoracic CT phantoms with five-class labels.
//!
//! Each case is an elliptical body of soft tissue with two air-filled
//! lungs and four labelled structures: a heart ellipsoid, an air-filled
//! trachea in the upper volume, a thin wavy esophagus behind it and a
//! bright aorta made of ascending and descending tubes joined by an arch
//! in the top slices. Geometry and intensities are jittered per seed;
//! Gaussian noise is added to the image only.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::preprocess::{case_dir_name, write_case, PreprocessError};
use crate::volume::{flat_index, Dims, LabelMap, Spacing, Volume, VolumeError};

pub const LABEL_ESOPHAGUS: u8 = 1;
pub const LABEL_HEART: u8 = 2;
pub const LABEL_TRACHEA: u8 = 3;
pub const LABEL_AORTA: u8 = 4;

/// Smallest in-plane extent that keeps every structure resolvable.
pub const MIN_IN_PLANE: usize = 32;
pub const MIN_DEPTH: usize = 16;
/// Structures never get a radius below this many pixels.
const MIN_RADIUS_PX: f64 = 1.5;

const AIR: f64 = -1000.0;
const LUNG: f64 = -800.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("phantom dims {0:?} too small: need height and width >= {MIN_IN_PLANE} and depth >= {MIN_DEPTH}")]
    TooSmall(Dims),
    #[error("noise_std must be finite and non-negative, got {0}")]
    BadNoise(f64),
    #[error("n_cases must be at least 1")]
    NoCases,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] PreprocessError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    /// `[depth, height, width]`.
    pub dims: Dims,
    pub spacing: Spacing,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 96, 96],
            spacing: Spacing {
                x: 0.98,
                y: 0.98,
                z: 2.5,
            },
            noise_std: 10.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let [d, h, w] = self.dims;
        if d < MIN_DEPTH || h < MIN_IN_PLANE || w < MIN_IN_PLANE {
            return Err(PhantomError::TooSmall(self.dims));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(PhantomError::BadNoise(self.noise_std));
        }
        Spacing::new(self.spacing.x, self.spacing.y, self.spacing.z)?;
        Ok(())
    }
}

/// Axis-aligned in-plane ellipse in pixel units.
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        u * u + v * v <= 1.0
    }
}

/// Case geometry in pixel units, drawn once per seed.
struct Layout {
    body: Ellipse,
    lungs: [Ellipse; 2],
    /// Heart ellipsoid: in-plane ellipse at its equator plus axial centre and radius (slices).
    heart: Ellipse,
    heart_cz: f64,
    heart_rz: f64,
    trachea: Ellipse,
    trachea_z0: usize,
    esophagus: Ellipse,
    esophagus_amp: f64,
    esophagus_phase: f64,
    aorta_up: Ellipse,
    aorta_down: Ellipse,
    aorta_up_z0: usize,
    arch_z0: usize,
    values: [f64; 5],
}

impl Layout {
    fn draw(dims: Dims, rng: &mut ChaCha8Rng) -> Self {
        let [d, h, w] = dims;
        let (hf, wf, df) = (h as f64, w as f64, d as f64);
        let mut jit = |a: f64| a + rng.random_range(-0.01..=0.01);
        // Centres and radii are given as fractions of the slice.
        let px = |fx: f64, fy: f64, rx: f64, ry: f64| Ellipse {
            cx: fx * wf - 0.5,
            cy: fy * hf - 0.5,
            rx: (rx * wf).max(MIN_RADIUS_PX),
            ry: (ry * hf).max(MIN_RADIUS_PX),
        };
        let disc = |fx: f64, fy: f64, r: f64| px(fx, fy, r, r);

        let body = px(0.5, 0.5, jit(0.42), jit(0.34));
        let lungs = [px(jit(0.22), 0.47, 0.12, 0.19), px(jit(0.80), 0.47, 0.12, 0.19)];
        let heart = px(jit(0.47), jit(0.36), jit(0.15), jit(0.10));
        let heart_cz = jit(0.28) * df - 0.5;
        let heart_rz = (0.28 * df).max(MIN_RADIUS_PX);
        let trachea = disc(0.50, jit(0.49), jit(0.045));
        let esophagus = disc(0.50, jit(0.62), 0.035);
        let aorta_x = jit(0.63);
        let aorta_up = disc(aorta_x, jit(0.38), jit(0.04));
        let aorta_down = disc(aorta_x, jit(0.70), aorta_up.rx / wf);
        let phase = rng.random_range(0.0..TAU);
        let mut tone = |base: f64| base + rng.random_range(-5.0..=5.0);
        let values = [tone(40.0), tone(65.0), tone(110.0), -950.0, tone(150.0)];
        let arch_slices = ((0.1 * df).round() as usize).max(2);
        Self {
            body,
            lungs,
            heart,
            heart_cz,
            heart_rz,
            trachea,
            trachea_z0: (0.55 * df).round() as usize,
            esophagus,
            esophagus_amp: 0.02 * wf,
            esophagus_phase: phase,
            aorta_up,
            aorta_down,
            aorta_up_z0: (0.62 * df).round() as usize,
            arch_z0: d - arch_slices,
            values,
        }
    }

    /// Label and noiseless intensity at a voxel centre.
    fn sample(&self, z: usize, y: usize, x: usize, depth: usize) -> (u8, f64) {
        let (xf, yf, zf) = (x as f64, y as f64, z as f64);
        if !self.body.contains(xf, yf) {
            return (0, AIR);
        }
        if self.trachea_z0 <= z && self.trachea.contains(xf, yf) {
            return (LABEL_TRACHEA, self.values[3]);
        }
        let t = (zf + 0.5) / depth as f64;
        let eso = Ellipse {
            cx: self.esophagus.cx + self.esophagus_amp * (TAU * 1.5 * t + self.esophagus_phase).sin(),
            ..self.esophagus
        };
        if eso.contains(xf, yf) {
            return (LABEL_ESOPHAGUS, self.values[1]);
        }
        let in_arch = z >= self.arch_z0 && {
            let (a, b) = (self.aorta_up, self.aorta_down);
            let yc = yf.clamp(a.cy, b.cy);
            let (u, v) = ((xf - a.cx) / a.rx, (yf - yc) / a.ry);
            u * u + v * v <= 1.0
        };
        if in_arch || (z >= self.aorta_up_z0 && self.aorta_up.contains(xf, yf)) || self.aorta_down.contains(xf, yf) {
            return (LABEL_AORTA, self.values[4]);
        }
        let dz = (zf - self.heart_cz) / self.heart_rz;
        if dz.abs() <= 1.0 {
            let s = (1.0 - dz * dz).sqrt();
            let section = Ellipse {
                rx: self.heart.rx * s,
                ry: self.heart.ry * s,
                ..self.heart
            };
            if s > 0.0 && section.contains(xf, yf) {
                return (LABEL_HEART, self.values[2]);
            }
        }
        if self.lungs.iter().any(|l| l.contains(xf, yf)) {
            return (0, LUNG);
        }
        (0, self.values[0])
    }
}

/// Builds one phantom case. The same spec always yields the same volume.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume, PhantomError> {
    spec.validate()?;
    let dims = spec.dims;
    let [d, h, w] = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = Layout::draw(dims, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise");
    let n = d * h * w;
    let mut image = vec![0.0; n];
    let mut labels = vec![0u8; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = flat_index(dims, z, y, x);
                let (label, value) = layout.sample(z, y, x, d);
                let noisy = if spec.noise_std > 0.0 { value + noise.sample(&mut rng) } else { value };
                // Stored as float32 on disk, so round here to keep I/O exact.
                image[i] = noisy as f32 as f64;
                labels[i] = label;
            }
        }
    }
    // Spacing is stored as float32 as well.
    let s = spec.spacing;
    let spacing = Spacing::new(s.x as f32 as f64, s.y as f32 as f64, s.z as f32 as f64)?;
    Ok(Volume::new(dims, spacing, image)?.with_labels(LabelMap::new(dims, labels)?)?)
}

/// Writes `n_cases` phantoms to `<out>/case_XXX/`, case `i` using seed `seed + i`.
/// Cases are generated on all available cores; the output does not depend
/// on how many there are.
pub fn generate_dataset(n_cases: usize, template: &PhantomSpec, seed: u64, out: &Path) -> Result<Vec<PathBuf>, PhantomError> {
    if n_cases == 0 {
        return Err(PhantomError::NoCases);
    }
    template.validate()?;
    let dirs: Vec<PathBuf> = (0..n_cases).map(|i| out.join(case_dir_name(i))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(n_cases);
    let next = AtomicUsize::new(0);
    let results: Vec<Result<(), PhantomError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| -> Result<(), PhantomError> {
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n_cases {
                            return Ok(());
                        }
                        let spec = PhantomSpec {
                            seed: seed.wrapping_add(i as u64),
                            ..*template
                        };
                        write_case(&dirs[i], &generate_phantom(&spec)?)?;
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("phantom worker panicked")).collect()
    });
    results.into_iter().collect::<Result<(), _>>()?;
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::connected_components;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: [16, 48, 48],
            seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantom(&small(3)).unwrap();
        assert_eq!(a, generate_phantom(&small(3)).unwrap());
        assert_ne!(a, generate_phantom(&small(4)).unwrap());
    }

    #[test]
    fn every_class_present_and_connected() {
        for seed in 0..4 {
            for dims in [[16, 32, 32], [16, 64, 64], [32, 96, 96]] {
                let v = generate_phantom(&PhantomSpec {
                    dims,
                    seed,
                    ..PhantomSpec::default()
                })
                .unwrap();
                let labels = v.labels().unwrap();
                for class in 1..5 {
                    let comps = connected_components(&labels.mask(class));
                    assert_eq!(comps.count(), 1, "class {class} seed {seed} dims {dims:?}");
                }
            }
        }
    }

    #[test]
    fn esophagus_has_lowest_contrast() {
        let v = generate_phantom(&PhantomSpec::default()).unwrap();
        let labels = v.labels().unwrap();
        let mut sums = [0.0; 5];
        let mut counts = [0usize; 5];
        for (&l, &x) in labels.data().iter().zip(v.data()) {
            // Body background only: skip air and lungs.
            if l == 0 && x < -300.0 {
                continue;
            }
            sums[l as usize] += x;
            counts[l as usize] += 1;
        }
        let mean: Vec<f64> = (0..5).map(|c| sums[c] / counts[c] as f64).collect();
        let contrast = |c: usize| (mean[c] - mean[0]).abs();
        for c in 2..5 {
            assert!(contrast(1) < contrast(c), "{mean:?}");
        }
        assert!(mean[3] < mean[4]);
    }

    #[test]
    fn rejects_small_dims() {
        let spec = PhantomSpec {
            dims: [16, 31, 64],
            ..PhantomSpec::default()
        };
        assert!(matches!(generate_phantom(&spec), Err(PhantomError::TooSmall(_))));
        let spec = PhantomSpec {
            noise_std: -1.0,
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(&spec).is_err());
    }
}
