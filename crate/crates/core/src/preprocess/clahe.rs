//! Contrast-limited adaptive histogram equalization of 2-D slices.

use super::PreprocessError;

pub const CLAHE_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheConfig {
    /// Bin-height cap as a multiple of the uniform height
    /// `tile_pixels / 256`; `f64::INFINITY` disables clipping.
    pub clip_limit: f64,
    /// Tile grid `(rows, cols)`.
    pub tiles: (usize, usize),
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self {
            clip_limit: 2.0,
            tiles: (8, 8),
        }
    }
}

impl ClaheConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.clip_limit > 0.0) {
            return Err(PreprocessError::InvalidConfig(format!(
                "CLAHE clip limit must be positive, got {}",
                self.clip_limit
            )));
        }
        if self.tiles.0 == 0 || self.tiles.1 == 0 {
            return Err(PreprocessError::InvalidConfig("CLAHE needs at least one tile per axis".into()));
        }
        Ok(())
    }
}

/// Histogram bin of an intensity in `[0, 1]`; values outside are clamped.
#[inline]
pub fn bin_of(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * (CLAHE_BINS - 1) as f64).round() as usize).min(CLAHE_BINS - 1)
}

/// Tile boundaries `[b_0 = 0, …, b_n = len]` splitting `len` into `n` near-equal parts.
fn tile_bounds(len: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|i| i * len / n).collect()
}

/// Intensity mapping of one tile: clipped histogram, uniform redistribution
/// of the clipped mass, normalized inclusive CDF.
fn tile_lut(hist: &mut [f64; CLAHE_BINS], pixels: usize, clip_limit: f64) -> [f64; CLAHE_BINS] {
    if clip_limit.is_finite() {
        let cap = clip_limit * pixels as f64 / CLAHE_BINS as f64;
        let mut excess = 0.0;
        for h in hist.iter_mut() {
            if *h > cap {
                excess += *h - cap;
                *h = cap;
            }
        }
        let share = excess / CLAHE_BINS as f64;
        hist.iter_mut().for_each(|h| *h += share);
    }
    let total: f64 = hist.iter().sum();
    let mut lut = [0.0; CLAHE_BINS];
    let mut acc = 0.0;
    for (l, h) in lut.iter_mut().zip(hist.iter()) {
        acc += h;
        *l = (acc / total).min(1.0);
    }
    lut
}

/// For each coordinate, the pair of neighbouring tile indices and the
/// interpolation weight of the second one.
fn interp_table(len: usize, bounds: &[usize]) -> Vec<(usize, usize, f64)> {
    let n = bounds.len() - 1;
    let centers: Vec<f64> = (0..n).map(|i| (bounds[i] + bounds[i + 1] - 1) as f64 / 2.0).collect();
    (0..len)
        .map(|p| {
            let p = p as f64;
            if p <= centers[0] {
                return (0, 0, 0.0);
            }
            if p >= centers[n - 1] {
                return (n - 1, n - 1, 0.0);
            }
            let i = centers.iter().rposition(|&c| c <= p).expect("p above first center");
            (i, i + 1, (p - centers[i]) / (centers[i + 1] - centers[i]))
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + w * (b - a)
}

/// Equalizes a row-major `h × w` slice with values in `[0, 1]`.
pub fn clahe_slice(slice: &[f64], h: usize, w: usize, config: &ClaheConfig) -> Result<Vec<f64>, PreprocessError> {
    config.validate()?;
    if slice.len() != h * w {
        return Err(PreprocessError::InvalidConfig(format!(
            "slice of {} values is not {h}×{w}",
            slice.len()
        )));
    }
    let (ty, tx) = config.tiles;
    if ty > h || tx > w {
        return Err(PreprocessError::TilesTooLarge {
            tiles: config.tiles,
            slice: (h, w),
        });
    }
    let rows = tile_bounds(h, ty);
    let cols = tile_bounds(w, tx);
    let bins: Vec<usize> = slice.iter().map(|&v| bin_of(v)).collect();

    let mut luts = Vec::with_capacity(ty * tx);
    for i in 0..ty {
        for j in 0..tx {
            let mut hist = [0.0; CLAHE_BINS];
            for y in rows[i]..rows[i + 1] {
                for &b in &bins[y * w + cols[j]..y * w + cols[j + 1]] {
                    hist[b] += 1.0;
                }
            }
            let pixels = (rows[i + 1] - rows[i]) * (cols[j + 1] - cols[j]);
            luts.push(tile_lut(&mut hist, pixels, config.clip_limit));
        }
    }

    let ry = interp_table(h, &rows);
    let rx = interp_table(w, &cols);
    let mut out = Vec::with_capacity(h * w);
    for (y, &(i0, i1, wy)) in ry.iter().enumerate() {
        for (x, &(j0, j1, wx)) in rx.iter().enumerate() {
            let b = bins[y * w + x];
            let top = lerp(luts[i0 * tx + j0][b], luts[i0 * tx + j1][b], wx);
            let bottom = lerp(luts[i1 * tx + j0][b], luts[i1 * tx + j1][b], wx);
            out.push(lerp(top, bottom, wy).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_slice_stays_constant() {
        let s = vec![0.3; 64 * 48];
        let out = clahe_slice(&s, 64, 48, &ClaheConfig::default()).unwrap();
        assert!(out.iter().all(|&v| v == out[0]));
    }

    #[test]
    fn single_tile_unclipped_is_histogram_equalization() {
        let (h, w) = (5, 7);
        let s: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let cfg = ClaheConfig {
            clip_limit: f64::INFINITY,
            tiles: (1, 1),
        };
        let out = clahe_slice(&s, h, w, &cfg).unwrap();
        for (o, &v) in out.iter().zip(&s) {
            let b = bin_of(v);
            let below = s.iter().filter(|&&u| bin_of(u) <= b).count();
            assert_eq!(*o, below as f64 / (h * w) as f64);
        }
    }

    #[test]
    fn clipping_flattens_the_mapping() {
        // Half the pixels in one bin: clipping caps the jump at that bin.
        let mut s = vec![0.5; 32];
        s.extend((0..32).map(|i| i as f64 / 31.0));
        let plain = ClaheConfig {
            clip_limit: f64::INFINITY,
            tiles: (1, 1),
        };
        let clipped = ClaheConfig {
            clip_limit: 2.0,
            tiles: (1, 1),
        };
        let a = clahe_slice(&s, 8, 8, &plain).unwrap();
        let b = clahe_slice(&s, 8, 8, &clipped).unwrap();
        // Pixel 47 holds the ramp value just below 0.5.
        let jump = |o: &[f64]| o[0] - o[47];
        assert!(jump(&a) >= 0.5);
        assert!(jump(&b) < 0.1);
    }

    #[test]
    fn rejects_oversized_tile_grid() {
        let s = vec![0.0; 4 * 4];
        let cfg = ClaheConfig {
            clip_limit: 2.0,
            tiles: (5, 1),
        };
        assert!(matches!(clahe_slice(&s, 4, 4, &cfg), Err(PreprocessError::TilesTooLarge { .. })));
    }
}
