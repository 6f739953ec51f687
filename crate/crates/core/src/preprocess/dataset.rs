//! Dataset directory layout: one directory per case holding
//! `image.nii` and, for annotated cases, `labels.nii`.

use std::fs;
use std::path::{Path, PathBuf};

use super::nifti::{read_labels, read_volume, write_labels, write_volume};
use super::PreprocessError;
use crate::volume::Volume;

pub const IMAGE_FILE: &str = "image.nii";
pub const LABELS_FILE: &str = "labels.nii";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseEntry {
    pub id: String,
    pub dir: PathBuf,
}

pub fn case_dir_name(index: usize) -> String {
    format!("case_{index:03}")
}

fn io(path: &Path, e: std::io::Error) -> PreprocessError {
    PreprocessError::Dataset(format!("{}: {e}", path.display()))
}

/// Writes the image and, when present, its labels into `dir`.
pub fn write_case(dir: &Path, volume: &Volume) -> Result<(), PreprocessError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    write_volume(volume, &dir.join(IMAGE_FILE))?;
    if let Some(labels) = volume.labels() {
        write_labels(labels, volume.spacing, &dir.join(LABELS_FILE))?;
    }
    Ok(())
}

/// Reads a case directory; labels are attached when `labels.nii` exists.
pub fn read_case(dir: &Path) -> Result<Volume, PreprocessError> {
    let image = read_volume(&dir.join(IMAGE_FILE))?;
    let labels_path = dir.join(LABELS_FILE);
    if labels_path.exists() {
        Ok(image.with_labels(read_labels(&labels_path)?)?)
    } else {
        Ok(image)
    }
}

/// Case directories under `root` (those containing `image.nii`), sorted by name.
pub fn list_cases(root: &Path) -> Result<Vec<CaseEntry>, PreprocessError> {
    let mut cases = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| io(root, e))? {
        let entry = entry.map_err(|e| io(root, e))?;
        let dir = entry.path();
        if dir.join(IMAGE_FILE).is_file() {
            cases.push(CaseEntry {
                id: entry.file_name().to_string_lossy().into_owned(),
                dir,
            });
        }
    }
    if cases.is_empty() {
        return Err(PreprocessError::Dataset(format!("no case directories under {}", root.display())));
    }
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(cases)
}
