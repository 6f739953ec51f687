//! Random in-plane affine augmentation of image/label slice pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PreprocessError;

/// Sampling ranges for [`AugmentParams::from_seed`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRanges {
    /// Inclusive zoom factor range.
    pub zoom: (f64, f64),
    /// Rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Shift drawn from `[-shift, shift]` as a fraction of the slice extent.
    pub shift: f64,
    pub shear_deg: f64,
    /// Crop-window offset drawn from `[-crop_jitter, crop_jitter]` pixels per axis.
    pub crop_jitter: u32,
    /// Probability of each mirror flip.
    pub flip_prob: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            zoom: (0.9, 1.1),
            rotation_deg: 10.0,
            shift: 0.1,
            shear_deg: 5.0,
            crop_jitter: 8,
            flip_prob: 0.0,
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: &str| Err(PreprocessError::InvalidConfig(m.to_string()));
        let (lo, hi) = self.zoom;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("zoom range must satisfy 0 < lo <= hi");
        }
        if !(self.rotation_deg >= 0.0 && self.shift >= 0.0 && self.shear_deg >= 0.0) {
            return bad("rotation, shift and shear ranges must be non-negative");
        }
        if self.shear_deg >= 90.0 {
            return bad("shear must stay below 90 degrees");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip probability must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub zoom: f64,
    pub rotation_deg: f64,
    /// `(dy, dx)` as fractions of the slice height and width.
    pub shift: (f64, f64),
    pub shear_deg: f64,
    /// `(dy, dx)` crop-window offset in pixels.
    pub crop_jitter: (i32, i32),
    pub flip_h: bool,
    pub flip_v: bool,
    pub rng_seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            zoom: 1.0,
            rotation_deg: 0.0,
            shift: (0.0, 0.0),
            shear_deg: 0.0,
            crop_jitter: (0, 0),
            flip_h: false,
            flip_v: false,
            rng_seed: 0,
        }
    }

    pub fn from_seed(rng_seed: u64, ranges: &AugmentRanges) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let rotation_deg = sym(ranges.rotation_deg);
        let shift = (sym(ranges.shift), sym(ranges.shift));
        let shear_deg = sym(ranges.shear_deg);
        let j = ranges.crop_jitter as i32;
        let crop_jitter = (rng.random_range(-j..=j), rng.random_range(-j..=j));
        let (lo, hi) = ranges.zoom;
        let zoom = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let flip_h = rng.random::<f64>() < ranges.flip_prob;
        let flip_v = rng.random::<f64>() < ranges.flip_prob;
        Self {
            zoom,
            rotation_deg,
            shift,
            shear_deg,
            crop_jitter,
            flip_h,
            flip_v,
            rng_seed,
        }
    }

    /// Inverse map from output pixel `(x, y)` to source coordinates, as
    /// `(matrix [[a, b], [c, d]], offset)` with `src = M · (p − c) + c − M · t`.
    fn inverse(&self, h: usize, w: usize) -> ([[f64; 2]; 2], [f64; 2]) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let fx = if self.flip_h { -1.0 } else { 1.0 };
        let fy = if self.flip_v { -1.0 } else { 1.0 };
        let z = self.zoom;
        // Forward matrix R · Shear · Zoom · Flip acting on (x, y).
        let f = [[c * z * fx, (c * k - s) * z * fy], [s * z * fx, (s * k + c) * z * fy]];
        let det = f[0][0] * f[1][1] - f[0][1] * f[1][0];
        let inv = [[f[1][1] / det, -f[0][1] / det], [-f[1][0] / det, f[0][0] / det]];
        let t = [
            self.shift.1 * w as f64 + self.crop_jitter.1 as f64,
            self.shift.0 * h as f64 + self.crop_jitter.0 as f64,
        ];
        (inv, t)
    }
}

/// Applies one affine warp about the slice centre. The image is resampled
/// bilinearly and the labels by nearest neighbour; pixels mapped from
/// outside the frame get the image minimum and label 0.
pub fn random_augment(
    image: &[f64],
    labels: &[u8],
    h: usize,
    w: usize,
    params: &AugmentParams,
) -> Result<(Vec<f64>, Vec<u8>), PreprocessError> {
    if image.len() != h * w || labels.len() != h * w {
        return Err(PreprocessError::InvalidConfig(format!(
            "image ({}) and labels ({}) must both hold {h}×{w} values",
            image.len(),
            labels.len()
        )));
    }
    let fill = image.iter().cloned().fold(f64::INFINITY, f64::min);
    let (inv, t) = params.inverse(h, w);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out_img = Vec::with_capacity(h * w);
    let mut out_lab = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 - cx - t[0], y as f64 - cy - t[1]);
            let sx = inv[0][0] * px + inv[0][1] * py + cx;
            let sy = inv[1][0] * px + inv[1][1] * py + cy;
            if !(sx >= -0.5 && sx < w as f64 - 0.5 && sy >= -0.5 && sy < h as f64 - 0.5) {
                out_img.push(fill);
                out_lab.push(0);
                continue;
            }
            let nx = (sx.round() as usize).min(w - 1);
            let ny = (sy.round() as usize).min(h - 1);
            out_lab.push(labels[ny * w + nx]);

            let bx = sx.clamp(0.0, (w - 1) as f64);
            let by = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (bx.floor() as usize, by.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (wx, wy) = (bx - x0 as f64, by - y0 as f64);
            let at = |yy: usize, xx: usize| image[yy * w + xx];
            let top = at(y0, x0) + wx * (at(y0, x1) - at(y0, x0));
            let bottom = at(y1, x0) + wx * (at(y1, x1) - at(y1, x0));
            out_img.push(top + wy * (bottom - top));
        }
    }
    Ok((out_img, out_lab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> (Vec<f64>, Vec<u8>) {
        let img = (0..h * w).map(|i| ((i * 7919) % 101) as f64 - 50.0).collect();
        let lab = (0..h * w).map(|i| ((i / 3) % 5) as u8).collect();
        (img, lab)
    }

    #[test]
    fn identity_is_exact() {
        let (img, lab) = sample(12, 9);
        let (a, b) = random_augment(&img, &lab, 12, 9, &AugmentParams::identity()).unwrap();
        assert_eq!(a, img);
        assert_eq!(b, lab);
    }

    #[test]
    fn flips_mirror_exactly() {
        let (img, lab) = sample(4, 6);
        let p = AugmentParams {
            flip_h: true,
            ..AugmentParams::identity()
        };
        let (a, b) = random_augment(&img, &lab, 4, 6, &p).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(a[y * 6 + x], img[y * 6 + 5 - x]);
                assert_eq!(b[y * 6 + x], lab[y * 6 + 5 - x]);
            }
        }
    }

    #[test]
    fn integer_shift_translates_and_fills() {
        let (img, lab) = sample(5, 5);
        let p = AugmentParams {
            crop_jitter: (0, 2),
            ..AugmentParams::identity()
        };
        let (a, b) = random_augment(&img, &lab, 5, 5, &p).unwrap();
        let min = img.iter().cloned().fold(f64::INFINITY, f64::min);
        for y in 0..5 {
            assert_eq!(a[y * 5], min);
            assert_eq!(b[y * 5 + 1], 0);
            assert_eq!(a[y * 5 + 4], img[y * 5 + 2]);
        }
    }

    #[test]
    fn seeded_draws_are_reproducible_and_in_range() {
        let r = AugmentRanges::default();
        for seed in 0..50 {
            let p = AugmentParams::from_seed(seed, &r);
            assert_eq!(p, AugmentParams::from_seed(seed, &r));
            assert!((0.9..=1.1).contains(&p.zoom));
            assert!(p.rotation_deg.abs() <= 10.0 && p.shear_deg.abs() <= 5.0);
            assert!(p.shift.0.abs() <= 0.1 && p.crop_jitter.1.abs() <= 8);
            assert!(!p.flip_h && !p.flip_v);
        }
        let (img, lab) = sample(16, 16);
        let p = AugmentParams::from_seed(3, &r);
        let (a1, b1) = random_augment(&img, &lab, 16, 16, &p).unwrap();
        let (a2, b2) = random_augment(&img, &lab, 16, 16, &p).unwrap();
        assert_eq!((a1, &b1), (a2, &b2));
        assert!(b1.iter().all(|&l| l < 5));
    }
}
