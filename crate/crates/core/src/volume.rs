//! Volumetric containers shared by the data pipeline, metrics and
//! post-processing. All arrays are row-major `[depth, height, width]`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("array of length {len} does not fit dims {dims:?}")]
    DataLength { dims: Dims, len: usize },
    #[error("dims must be positive, got {0:?}")]
    EmptyDims(Dims),
    #[error("spacing components must be positive and finite, got {0:?}")]
    BadSpacing(Spacing),
    #[error("label {label} at index {index} outside 0..{num_classes}")]
    LabelOutOfRange { label: u8, index: usize, num_classes: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Dims, Dims),
}

/// Array extents `[depth, height, width]`.
pub type Dims = [usize; 3];

/// Class names of the five-class thoracic label convention.
pub const CLASS_NAMES: [&str; 5] = ["background", "esophagus", "heart", "trachea", "aorta"];

/// Name of `label`; generic `class_<n>` outside the five-class convention.
pub fn class_name(label: u8, num_classes: usize) -> String {
    match CLASS_NAMES.get(label as usize) {
        Some(name) if num_classes == CLASS_NAMES.len() => (*name).to_string(),
        _ => format!("class_{label}"),
    }
}

/// Voxel size in millimetres, ordered `(x, y, z)`: `x` runs along width,
/// `y` along height and `z` along depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Spacing {
    pub const UNIT: Spacing = Spacing { x: 1.0, y: 1.0, z: 1.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, VolumeError> {
        let s = Spacing { x, y, z };
        if [x, y, z].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(s)
        } else {
            Err(VolumeError::BadSpacing(s))
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Spacing {
            x: self.x * factor,
            y: self.y * factor,
            z: self.z * factor,
        }
    }
}

fn check_len(dims: Dims, len: usize) -> Result<(), VolumeError> {
    if dims.contains(&0) {
        return Err(VolumeError::EmptyDims(dims));
    }
    if dims.iter().product::<usize>() != len {
        return Err(VolumeError::DataLength { dims, len });
    }
    Ok(())
}

#[inline]
pub fn flat_index(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

/// Inverse of [`flat_index`].
#[inline]
pub fn unflatten(dims: Dims, i: usize) -> [usize; 3] {
    let x = i % dims[2];
    let y = (i / dims[2]) % dims[1];
    let z = i / (dims[1] * dims[2]);
    [z, y, x]
}

/// Per-voxel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self, VolumeError> {
        check_len(dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Result<Self, VolumeError> {
        Self::new(dims, vec![0; dims.iter().product()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[flat_index(self.dims, z, y, x)]
    }

    pub fn check_range(&self, num_classes: usize) -> Result<(), VolumeError> {
        match self.data.iter().position(|&l| l as usize >= num_classes) {
            Some(index) => Err(VolumeError::LabelOutOfRange {
                label: self.data[index],
                index,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Binary mask of voxels equal to `label`.
    pub fn mask(&self, label: u8) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().map(|&l| l == label).collect(),
        }
    }

    /// Number of voxels per class `0..num_classes`; out-of-range labels are ignored.
    pub fn counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.data {
            if let Some(c) = counts.get_mut(l as usize) {
                *c += 1;
            }
        }
        counts
    }

    /// One `[height, width]` slice.
    pub fn slice(&self, z: usize) -> &[u8] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[z * plane..(z + 1) * plane]
    }
}

/// Binary voxel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self, VolumeError> {
        check_len(dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn empty(dims: Dims) -> Result<Self, VolumeError> {
        Self::new(dims, vec![false; dims.iter().product()])
    }

    /// Mask with the listed `[z, y, x]` voxels set.
    pub fn from_voxels(dims: Dims, voxels: &[[usize; 3]]) -> Result<Self, VolumeError> {
        let mut m = Self::empty(dims)?;
        for &[z, y, x] in voxels {
            m.set(z, y, x, true);
        }
        Ok(m)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[flat_index(self.dims, z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, value: bool) {
        let i = flat_index(self.dims, z, y, x);
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Indices `[z, y, x]` of set voxels in row-major order.
    pub fn voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let dims = self.dims;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| unflatten(dims, i))
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }
}

/// A scalar image with voxel spacing and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    pub spacing: Spacing,
    data: Vec<f64>,
    labels: Option<LabelMap>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self, VolumeError> {
        check_len(dims, data.len())?;
        Spacing::new(spacing.x, spacing.y, spacing.z)?;
        Ok(Self {
            dims,
            spacing,
            data,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: LabelMap) -> Result<Self, VolumeError> {
        if labels.dims() != self.dims {
            return Err(VolumeError::ShapeMismatch(self.dims, labels.dims()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn labels(&self) -> Option<&LabelMap> {
        self.labels.as_ref()
    }

    pub fn take_labels(&mut self) -> Option<LabelMap> {
        self.labels.take()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[flat_index(self.dims, z, y, x)]
    }

    /// One `[height, width]` slice.
    pub fn slice(&self, z: usize) -> &[f64] {
        let plane = self.dims[1] * self.dims[2];
        &self.data[z * plane..(z + 1) * plane]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [f64] {
        let plane = self.dims[1] * self.dims[2];
        &mut self.data[z * plane..(z + 1) * plane]
    }

    /// Same geometry and labels, new intensities.
    pub fn map_data(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
            labels: self.labels.clone(),
        }
    }
}
