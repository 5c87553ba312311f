//! Directory-based dataset access. A dataset directory holds `.ppm` images
//! with annotation sidecars next to them: `scene.ppm` pairs with
//! `scene.json` (or `scene.csv` plus `scene.dims.json`).

use std::path::{Path, PathBuf};

use crowdcount_core::densitymap::{load_annotations, AnnotationFormat, AnnotationSet};
use crowdcount_core::eval::EvalSample;
use crowdcount_core::imgio::read_ppm;
use crowdcount_core::train::TrainSample;
use crowdcount_core::Tensor;

use crate::CliError;

/// One loaded image with its parsed annotations.
pub struct Entry {
    pub stem: String,
    pub image: Tensor,
    pub ann: AnnotationSet,
}

/// Lists the `.ppm` files of `dir` in name order and loads each with its
/// annotation sidecar. A missing sidecar is an error: an unlabeled image
/// in a labeled directory is more likely a broken copy than an extra.
pub fn load_dir(dir: &Path, format: AnnotationFormat) -> Result<Vec<Entry>, CliError> {
    let mut stems: Vec<(String, PathBuf)> = std::fs::read_dir(dir)
        .map_err(|e| CliError::runtime(format!("{}: {}", dir.display(), e)))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            if path.extension().is_some_and(|e| e == "ppm") {
                let stem = path.file_stem()?.to_str()?.to_string();
                Some((stem, path))
            } else {
                None
            }
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::runtime(format!(
            "{}: no .ppm images found",
            dir.display()
        )));
    }

    let sidecar_ext = match format {
        AnnotationFormat::Json => "json",
        AnnotationFormat::Csv => "csv",
    };
    stems
        .into_iter()
        .map(|(stem, image_path)| {
            let annotation_path = image_path.with_extension(sidecar_ext);
            let image = read_ppm(&image_path)?;
            let (mut ann, _) = load_annotations(&annotation_path, format)?;
            if ann.image_id.is_empty() {
                ann.image_id = stem.clone();
            }
            Ok(Entry { stem, image, ann })
        })
        .collect()
}

pub fn to_train_samples(entries: Vec<Entry>) -> Vec<TrainSample> {
    entries
        .into_iter()
        .map(|e| TrainSample {
            image: e.image,
            ann: e.ann,
        })
        .collect()
}

pub fn to_eval_samples(entries: Vec<Entry>) -> Vec<EvalSample> {
    entries
        .into_iter()
        .map(|e| EvalSample {
            gt_count: e.ann.count() as f64,
            image_id: if e.ann.image_id.is_empty() {
                e.stem
            } else {
                e.ann.image_id.clone()
            },
            image: e.image,
        })
        .collect()
}
