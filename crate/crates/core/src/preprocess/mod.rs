//! CT conditioning, geometric transforms, augmentation and volume I/O.
//!
//! The fixed conditioning order is HU windowing to `[0, 1]`, per-slice
//! CLAHE, whole-volume z-score normalization, then an in-plane centre crop.

mod augment;
mod clahe;
mod dataset;
pub mod nifti;

pub use augment::{random_augment, AugmentParams, AugmentRanges};
pub use clahe::{bin_of, clahe_slice, ClaheConfig, CLAHE_BINS};
pub use dataset::{case_dir_name, list_cases, read_case, write_case, CaseEntry, IMAGE_FILE, LABELS_FILE};
pub use nifti::{read_labels, read_volume, write_labels, write_volume, NiftiError};

use thiserror::Error;

use crate::volume::{LabelMap, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("tile grid {tiles:?} exceeds slice size {slice:?}")]
    TilesTooLarge { tiles: (usize, usize), slice: (usize, usize) },
    #[error("crop {crop:?} exceeds slice size {slice:?}")]
    CropTooLarge { crop: (usize, usize), slice: (usize, usize) },
    #[error("cannot normalize a volume with zero variance")]
    ZeroVariance,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("dataset: {0}")]
    Dataset(String),
}

/// Clamps to `[lo, hi]` and maps linearly onto `[0, 1]`.
pub fn window_and_scale(volume: &Volume, lo: f64, hi: f64) -> Result<Volume, PreprocessError> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(PreprocessError::InvalidConfig(format!("window [{lo}, {hi}] is empty")));
    }
    let span = hi - lo;
    Ok(volume.map_data(|v| (v.clamp(lo, hi) - lo) / span))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-score over the whole volume with the population standard deviation.
pub fn normalize_volume(volume: &Volume) -> Result<Volume, PreprocessError> {
    let (mean, std) = mean_std(volume.data());
    if !(std > 0.0) || !std.is_finite() {
        return Err(PreprocessError::ZeroVariance);
    }
    Ok(volume.map_data(|v| (v - mean) / std))
}

/// Top-left corner of a centred `out_h × out_w` window in an `h × w` slice.
pub fn crop_offset(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<(usize, usize), PreprocessError> {
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(PreprocessError::CropTooLarge {
            crop: (out_h, out_w),
            slice: (h, w),
        });
    }
    Ok(((h - out_h) / 2, (w - out_w) / 2))
}

fn crop_plane<T: Copy>(data: &[T], [d, h, w]: [usize; 3], (oy, ox): (usize, usize), (ch, cw): (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(d * ch * cw);
    for z in 0..d {
        for y in oy..oy + ch {
            let row = (z * h + y) * w;
            out.extend_from_slice(&data[row + ox..row + ox + cw]);
        }
    }
    out
}

/// Crops every slice (and the labels) to the centred window; depth is kept.
pub fn center_crop(volume: &Volume, out_h: usize, out_w: usize) -> Result<Volume, PreprocessError> {
    let dims = volume.dims();
    let off = crop_offset(dims[1], dims[2], out_h, out_w)?;
    let new_dims = [dims[0], out_h, out_w];
    let mut out = Volume::new(new_dims, volume.spacing, crop_plane(volume.data(), dims, off, (out_h, out_w)))?;
    if let Some(labels) = volume.labels() {
        let cropped = LabelMap::new(new_dims, crop_plane(labels.data(), dims, off, (out_h, out_w)))?;
        out = out.with_labels(cropped)?;
    }
    Ok(out)
}

/// Places a label map cropped by [`center_crop`] back into the full
/// `h × w` frame, filling the border with background.
pub fn uncrop_labels(labels: &LabelMap, h: usize, w: usize) -> Result<LabelMap, PreprocessError> {
    let [d, ch, cw] = labels.dims();
    let (oy, ox) = crop_offset(h, w, ch, cw)?;
    let mut out = LabelMap::zeros([d, h, w])?;
    for z in 0..d {
        for y in 0..ch {
            let dst = (z * h + y + oy) * w + ox;
            let src = (z * ch + y) * cw;
            out.data_mut()[dst..dst + cw].copy_from_slice(&labels.data()[src..src + cw]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror along the width axis (left/right).
    Horizontal,
    /// Mirror along the height axis (top/bottom).
    Vertical,
}

fn flip_plane<T: Copy>(data: &[T], [d, h, w]: [usize; 3], axis: FlipAxis) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for z in 0..d {
        for y in 0..h {
            let sy = match axis {
                FlipAxis::Vertical => h - 1 - y,
                FlipAxis::Horizontal => y,
            };
            let row = &data[(z * h + sy) * w..(z * h + sy + 1) * w];
            match axis {
                FlipAxis::Horizontal => out.extend(row.iter().rev()),
                FlipAxis::Vertical => out.extend_from_slice(row),
            }
        }
    }
    out
}

pub fn flip_volume(volume: &Volume, axis: FlipAxis) -> Volume {
    let dims = volume.dims();
    let mut out = Volume::new(dims, volume.spacing, flip_plane(volume.data(), dims, axis)).expect("same dims");
    if let Some(labels) = volume.labels() {
        let flipped = LabelMap::new(dims, flip_plane(labels.data(), dims, axis)).expect("same dims");
        out = out.with_labels(flipped).expect("same dims");
    }
    out
}

/// Original volume followed by its horizontal and vertical mirror images.
pub fn offline_flips(volume: &Volume) -> [Volume; 3] {
    [
        volume.clone(),
        flip_volume(volume, FlipAxis::Horizontal),
        flip_volume(volume, FlipAxis::Vertical),
    ]
}

/// Intensity conditioning applied identically at training and inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub window_lo: f64,
    pub window_hi: f64,
    pub clahe: ClaheConfig,
    /// In-plane crop `(height, width)`; `None` keeps the full slice.
    pub crop: Option<(usize, usize)>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_lo: -1000.0,
            window_hi: 1000.0,
            clahe: ClaheConfig::default(),
            crop: None,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.window_lo < self.window_hi) {
            return Err(PreprocessError::InvalidConfig(format!(
                "window [{}, {}] is empty",
                self.window_lo, self.window_hi
            )));
        }
        self.clahe.validate()
    }
}

/// Window → per-slice CLAHE → normalize → centre crop. Labels follow the crop.
pub fn preprocess_volume(volume: &Volume, config: &PreprocessConfig) -> Result<Volume, PreprocessError> {
    config.validate()?;
    let mut v = window_and_scale(volume, config.window_lo, config.window_hi)?;
    let [d, h, w] = v.dims();
    for z in 0..d {
        let eq = clahe_slice(v.slice(z), h, w, &config.clahe)?;
        v.slice_mut(z).copy_from_slice(&eq);
    }
    let v = normalize_volume(&v)?;
    match config.crop {
        Some((ch, cw)) => center_crop(&v, ch, cw),
        None => Ok(v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;

    fn vol(dims: [usize; 3], data: Vec<f64>) -> Volume {
        Volume::new(dims, Spacing::UNIT, data).unwrap()
    }

    #[test]
    fn window_endpoints_and_clamp() {
        let v = vol([1, 1, 4], vec![-1000.0, 1000.0, 0.0, -2000.0]);
        let out = window_and_scale(&v, -1000.0, 1000.0).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 0.5, 0.0]);
        assert!(window_and_scale(&v, 1.0, 1.0).is_err());
    }

    #[test]
    fn normalize_two_voxels() {
        let out = normalize_volume(&vol([1, 1, 2], vec![0.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
        assert!(matches!(
            normalize_volume(&vol([1, 1, 2], vec![3.0, 3.0])),
            Err(PreprocessError::ZeroVariance)
        ));
    }

    #[test]
    fn crop_offsets_and_identity() {
        assert_eq!(crop_offset(512, 512, 288, 288).unwrap(), (112, 112));
        assert_eq!(crop_offset(7, 6, 4, 4).unwrap(), (1, 1));
        let v = vol([2, 3, 3], (0..18).map(f64::from).collect());
        assert_eq!(center_crop(&v, 3, 3).unwrap(), v);
        let c = center_crop(&v, 1, 1).unwrap();
        assert_eq!(c.data(), &[4.0, 13.0]);
        assert!(matches!(center_crop(&v, 4, 1), Err(PreprocessError::CropTooLarge { .. })));
    }

    #[test]
    fn uncrop_restores_frame() {
        let labels = LabelMap::new([1, 5, 6], (0..30).map(|i| (i % 5) as u8).collect()).unwrap();
        let v = vol([1, 5, 6], vec![0.0; 30]).with_labels(labels.clone()).unwrap();
        let c = center_crop(&v, 3, 2).unwrap();
        let back = uncrop_labels(c.labels().unwrap(), 5, 6).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let inside = (1..4).contains(&y) && (2..4).contains(&x);
                let expect = if inside { labels.get(0, y, x) } else { 0 };
                assert_eq!(back.get(0, y, x), expect);
            }
        }
    }

    #[test]
    fn flips() {
        let v = vol([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flip_volume(&v, FlipAxis::Horizontal).data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(flip_volume(&v, FlipAxis::Vertical).data(), &[3.0, 4.0, 1.0, 2.0]);
        let lm = LabelMap::new([1, 2, 2], vec![0, 1, 2, 3]).unwrap();
        let v = v.with_labels(lm).unwrap();
        for axis in [FlipAxis::Horizontal, FlipAxis::Vertical] {
            assert_eq!(flip_volume(&flip_volume(&v, axis), axis), v);
        }
        assert_eq!(offline_flips(&v).len(), 3);
    }

    #[test]
    fn pipeline_shapes_and_statistics() {
        let data: Vec<f64> = (0..2 * 16 * 16).map(|i| ((i * 31) % 97) as f64 * 20.0 - 900.0).collect();
        let v = vol([2, 16, 16], data);
        let cfg = PreprocessConfig {
            clahe: ClaheConfig {
                clip_limit: 2.0,
                tiles: (2, 2),
            },
            ..PreprocessConfig::default()
        };
        let full = preprocess_volume(&v, &cfg).unwrap();
        let (m, s) = mean_std(full.data());
        assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        let cropped = preprocess_volume(
            &v,
            &PreprocessConfig {
                crop: Some((8, 12)),
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(cropped.dims(), [2, 8, 12]);
        assert_eq!(cropped, center_crop(&full, 8, 12).unwrap());
    }
}
