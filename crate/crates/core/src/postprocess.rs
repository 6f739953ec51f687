//! Connected-component labelling and largest-component filtering.
//!
//! Adjacency is 6-connected (shared faces only) in 3D.

use std::collections::VecDeque;

use crate::volume::{flat_index, unflatten, Dims, LabelMap, Mask, VolumeError};

/// Component labelling of a binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub dims: Dims,
    /// Per-voxel component id; 0 is background. Ids are numbered in
    /// row-major order of each component's first voxel.
    pub ids: Vec<u32>,
    /// `sizes[i]` is the voxel count of component `i + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Id of the largest component; ties go to the lowest id, which holds
    /// the smallest row-major voxel index.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, u32)> = None;
        for (i, &s) in self.sizes.iter().enumerate() {
            if best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, i as u32 + 1));
            }
        }
        best.map(|(_, id)| id)
    }
}

/// Face neighbours of `[z, y, x]` inside `dims`.
pub fn face_neighbors(dims: Dims, [z, y, x]: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    let candidates = [
        (z > 0).then(|| [z - 1, y, x]),
        (z + 1 < dims[0]).then(|| [z + 1, y, x]),
        (y > 0).then(|| [z, y - 1, x]),
        (y + 1 < dims[1]).then(|| [z, y + 1, x]),
        (x > 0).then(|| [z, y, x - 1]),
        (x + 1 < dims[2]).then(|| [z, y, x + 1]),
    ];
    candidates.into_iter().flatten()
}

pub fn connected_components(mask: &Mask) -> Components {
    let dims = mask.dims();
    let data = mask.data();
    let mut ids = vec![0u32; data.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if !data[start] || ids[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for [z, y, x] in face_neighbors(dims, unflatten(dims, i)) {
                let j = flat_index(dims, z, y, x);
                if data[j] && ids[j] == 0 {
                    ids[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    Components { dims, ids, sizes }
}

/// Keeps only the largest 6-connected component of every foreground class;
/// all other foreground voxels become background.
pub fn largest_component_filter(labels: &LabelMap, num_classes: usize) -> Result<LabelMap, VolumeError> {
    labels.check_range(num_classes)?;
    let mut out = labels.clone();
    for class in 1..num_classes as u8 {
        let comps = connected_components(&labels.mask(class));
        if comps.count() <= 1 {
            continue;
        }
        let keep = comps.largest().expect("at least two components");
        for (v, &id) in out.data_mut().iter_mut().zip(&comps.ids) {
            if id != 0 && id != keep {
                *v = 0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_cube_is_one_component() {
        let m = Mask::new([3, 3, 3], vec![true; 27]).unwrap();
        let c = connected_components(&m);
        assert_eq!(c.sizes, vec![27]);
    }

    #[test]
    fn separated_and_edge_diagonal_voxels_are_distinct() {
        let m = Mask::from_voxels([6, 6, 6], &[[0, 0, 0], [5, 5, 5]]).unwrap();
        assert_eq!(connected_components(&m).count(), 2);
        let m = Mask::from_voxels([2, 2, 2], &[[0, 0, 0], [0, 1, 1]]).unwrap();
        let c = connected_components(&m);
        assert_eq!(c.sizes, vec![1, 1]);
        assert_eq!(c.ids[flat_index([2, 2, 2], 0, 1, 1)], 2);
    }

    #[test]
    fn filter_clears_smaller_blob() {
        let dims = [1, 3, 12];
        let mut data = vec![0u8; 36];
        data[..10].fill(1);
        data[24 + 10] = 1;
        data[24 + 11] = 1;
        data[12] = 2;
        let lm = LabelMap::new(dims, data.clone()).unwrap();
        let out = largest_component_filter(&lm, 5).unwrap();
        data[34] = 0;
        data[35] = 0;
        assert_eq!(out.data(), &data[..]);
        assert_eq!(largest_component_filter(&out, 5).unwrap(), out);
    }

    #[test]
    fn ties_keep_component_with_smallest_index() {
        let lm = LabelMap::new([1, 1, 5], vec![0, 3, 0, 3, 0]).unwrap();
        let out = largest_component_filter(&lm, 5).unwrap();
        assert_eq!(out.data(), &[0, 3, 0, 0, 0]);
    }

    #[test]
    fn background_only_and_range_check() {
        let lm = LabelMap::zeros([2, 2, 2]).unwrap();
        assert_eq!(largest_component_filter(&lm, 5).unwrap(), lm);
        let bad = LabelMap::new([1, 1, 2], vec![0, 9]).unwrap();
        assert!(largest_component_filter(&bad, 5).is_err());
    }
}
