use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::preprocess::offline_flips;
use crate::volume::Volume;

/// A stack of labelled 2-D slices, each tagged with its source case.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SliceSet {
    pub height: usize,
    pub width: usize,
    pub images: Vec<f64>,
    pub labels: Vec<u8>,
    pub case_ids: Vec<String>,
}

impl SliceSet {
    pub fn len(&self) -> usize {
        self.case_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.case_ids.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.plane()..(i + 1) * self.plane()]
    }

    pub fn label(&self, i: usize) -> &[u8] {
        &self.labels[i * self.plane()..(i + 1) * self.plane()]
    }

    /// Appends every axial slice of a labelled volume.
    pub fn push_volume(&mut self, case_id: &str, volume: &Volume) -> Result<(), TrainError> {
        let [d, h, w] = volume.dims();
        let labels = volume
            .labels()
            .ok_or_else(|| TrainError::Data(format!("case {case_id} has no labels")))?;
        if self.is_empty() && self.height == 0 {
            self.height = h;
            self.width = w;
        } else if (h, w) != (self.height, self.width) {
            return Err(TrainError::Data(format!(
                "case {case_id} slices are {h}×{w}, expected {}×{}",
                self.height, self.width
            )));
        }
        self.images.extend_from_slice(volume.data());
        self.labels.extend_from_slice(labels.data());
        self.case_ids.extend(std::iter::repeat_n(case_id.to_string(), d));
        Ok(())
    }

    pub fn from_volumes<'a>(cases: impl IntoIterator<Item = (&'a str, &'a Volume)>) -> Result<Self, TrainError> {
        let mut set = SliceSet::default();
        for (id, v) in cases {
            set.push_volume(id, v)?;
        }
        Ok(set)
    }
}

/// Training and validation slices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldData {
    pub train: SliceSet,
    pub val: SliceSet,
}

impl FoldData {
    /// Builds a fold from preprocessed cases. With `flips`, every training
    /// case also contributes its horizontal and vertical mirror images.
    pub fn build(train: &[(String, Volume)], val: &[(String, Volume)], flips: bool) -> Result<Self, TrainError> {
        let mut train_set = SliceSet::default();
        for (id, v) in train {
            if flips {
                for flipped in offline_flips(v) {
                    train_set.push_volume(id, &flipped)?;
                }
            } else {
                train_set.push_volume(id, v)?;
            }
        }
        let val_set = SliceSet::from_volumes(val.iter().map(|(id, v)| (id.as_str(), v)))?;
        Ok(Self {
            train: train_set,
            val: val_set,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Shuffles `case_ids` with `seed` and cuts them into `k` validation
/// blocks; fold `f` validates on block `f` and trains on the rest.
pub fn k_fold_split(case_ids: &[String], k: usize, seed: u64) -> Result<Vec<Fold>, TrainError> {
    if k < 2 {
        return Err(TrainError::Config(format!("need at least 2 folds, got {k}")));
    }
    if case_ids.len() < k {
        return Err(TrainError::Data(format!("{} cases cannot fill {k} folds", case_ids.len())));
    }
    let mut ids = case_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            Fold {
                val: ids[lo..hi].to_vec(),
                train: ids[..lo].iter().chain(&ids[hi..]).cloned().collect(),
            }
        })
        .collect())
}

pub fn five_fold_split(case_ids: &[String], seed: u64) -> Result<Vec<Fold>, TrainError> {
    k_fold_split(case_ids, 5, seed)
}
