use std::path::Path;

use crate::error::{invalid, BasnError, Result};
use crate::image::ImageTensor;
use crate::rng::derive_seed;
use crate::synthetic::textured_corpus;
use crate::training::Dataset;

use super::config::{DatasetKind, RunConfig};
use super::P;

/// Optional `file<TAB>class` listing next to folder images.
pub const LABEL_FILE: &str = "labels.tsv";

/// Training split plus held-out lossless images.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<ImageTensor>,
    pub train_labels: Option<Vec<usize>>,
    pub holdout: Vec<ImageTensor>,
}

impl Corpus {
    pub fn train_dataset(&self) -> Result<Dataset<P>> {
        Dataset::new(self.train.iter().map(|i| i.to_float()).collect())
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.train_labels.as_deref().ok_or_else(|| {
            BasnError::Precondition(format!(
                "classifier stage needs labels; add {LABEL_FILE} to the dataset folder"
            ))
        })
    }
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let d = &cfg.dataset;
    let total = d.train_images + d.holdout_images;
    match d.kind {
        DatasetKind::Synthetic => {
            let mut all = textured_corpus(total, d.image_size, derive_seed(cfg.seed, "dataset"))?;
            let holdout = all.split_off(d.train_images);
            Ok(Corpus {
                train_labels: Some(all.iter().map(|s| s.label).collect()),
                train: all.into_iter().map(|s| s.image).collect(),
                holdout: holdout.into_iter().map(|s| s.image).collect(),
            })
        }
        DatasetKind::Folder => {
            let dir = d.path.as_deref().ok_or_else(|| invalid("folder dataset needs a path"))?;
            let (mut images, labels) = load_folder(dir, total)?;
            for img in &images {
                if img.height() != d.image_size || img.width() != d.image_size {
                    return Err(invalid(format!(
                        "dataset image is {}x{}, config expects {}",
                        img.height(),
                        img.width(),
                        d.image_size
                    )));
                }
            }
            let holdout = images.split_off(d.train_images);
            Ok(Corpus {
                train: images,
                train_labels: labels.map(|mut l| {
                    l.truncate(d.train_images);
                    l
                }),
                holdout,
            })
        }
    }
}

/// First `count` lossless images by file name, with labels when listed.
fn load_folder(dir: &Path, count: usize) -> Result<(Vec<ImageTensor>, Option<Vec<usize>>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "bmp" | "tif" | "tiff")
            )
        })
        .collect();
    files.sort();
    if files.len() < count {
        return Err(invalid(format!(
            "{} holds {} images, config needs {count}",
            dir.display(),
            files.len()
        )));
    }
    files.truncate(count);
    let images = files.iter().map(|f| ImageTensor::load(f)).collect::<Result<Vec<_>>>()?;
    let label_path = dir.join(LABEL_FILE);
    let labels = if label_path.exists() {
        let text = std::fs::read_to_string(&label_path)?;
        let map: std::collections::HashMap<&str, usize> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (name, class) = l.split_once('\t').ok_or_else(|| invalid(format!("bad label line {l:?}")))?;
                let class = class.trim().parse().map_err(|_| invalid(format!("bad class in {l:?}")))?;
                Ok((name, class))
            })
            .collect::<Result<_>>()?;
        let labels = files
            .iter()
            .map(|f| {
                let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                map.get(name).copied().ok_or_else(|| invalid(format!("{name} has no label")))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(labels)
    } else {
        None
    };
    Ok((images, labels))
}
