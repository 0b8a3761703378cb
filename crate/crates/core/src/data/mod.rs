//! Labelled image datasets, label-budget partitioning and on-disk layout.

mod io;
pub mod synth;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::Image;
use crate::rng;
use crate::tensor::Tensor;

pub use io::{load, save, MANIFEST_FILE};
pub use synth::{generate, DatasetSpec};

pub const BACKGROUND: &str = "background";
pub const CLUSTER_PREFIX: &str = "cardiac_";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("label budget {per_class} exceeds the {available} training images of class {class}")]
    Budget { per_class: usize, class: String, available: usize },
    #[error("missing image file {0}")]
    MissingFile(PathBuf),
    #[error("malformed manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("malformed image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub split: Split,
    pub is_labelled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    class_names: Vec<String>,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>, samples: Vec<Sample>) -> Result<Self, DataError> {
        if class_names.len() < 2 {
            return Err(DataError::Spec("a dataset needs at least two classes".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(DataError::Spec(format!("label {} out of range for {} classes", s.label, class_names.len())));
        }
        if let Some(bg) = class_names.iter().position(|n| n == BACKGROUND) {
            if bg != class_names.len() - 1 {
                return Err(DataError::Spec("the background class must be the last class".into()));
            }
        }
        if let Some(first) = samples.first() {
            let (h, w) = (first.image.height(), first.image.width());
            if samples.iter().any(|s| s.image.height() != h || s.image.width() != w) {
                return Err(DataError::Spec("all images must share one size".into()));
            }
        }
        Ok(Self { class_names, samples })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.height(), s.image.width()))
    }

    pub fn background_index(&self) -> Option<usize> {
        self.class_names.iter().position(|n| n == BACKGROUND)
    }

    /// Indices of the confusable cluster classes.
    pub fn cluster_indices(&self) -> Vec<usize> {
        self.class_names.iter().enumerate().filter(|(_, n)| n.starts_with(CLUSTER_PREFIX)).map(|(i, _)| i).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn split(&self, split: Split) -> Dataset {
        Dataset { class_names: self.class_names.clone(), samples: self.samples.iter().filter(|s| s.split == split).cloned().collect() }
    }

    /// Drops background samples and the background class (labels of the
    /// remaining classes are unchanged since background is last).
    pub fn without_background(&self) -> Dataset {
        match self.background_index() {
            None => self.clone(),
            Some(bg) => Dataset {
                class_names: self.class_names[..bg].to_vec(),
                samples: self.samples.iter().filter(|s| s.label != bg).cloned().collect(),
            },
        }
    }

    /// SHA-256 over class names, labels, splits and 8-bit pixels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.class_names {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        for s in &self.samples {
            h.update((s.label as u64).to_le_bytes());
            h.update(s.split.as_str().as_bytes());
            h.update((s.image.height() as u64).to_le_bytes());
            h.update((s.image.width() as u64).to_le_bytes());
            h.update(s.image.to_u8());
        }
        hex::encode(h.finalize())
    }

    /// Images `[N, 1, H, W]` for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        stack_images(indices.iter().map(|&i| &self.samples[i].image))
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }
}

/// Stacks equally sized images into an `[N, 1, H, W]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Tensor<f32> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut hw = (0, 0);
    for img in images {
        hw = (img.height(), img.width());
        data.extend_from_slice(img.pixels());
        n += 1;
    }
    Tensor::new(&[n, 1, hw.0, hw.1], data).expect("non-empty batch of equal-size images")
}

/// Unlabelled partition. True labels are kept for diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabelledSet {
    images: Vec<Image>,
    hidden_labels: Vec<usize>,
}

impl UnlabelledSet {
    pub fn new(images: Vec<Image>) -> Self {
        let hidden_labels = vec![usize::MAX; images.len()];
        Self { images, hidden_labels }
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Ground truth of the unlabelled images, for analysis after training.
    pub fn diagnostic_labels(&self) -> &[usize] {
        &self.hidden_labels
    }
}

/// Splits the training portion into `per_class` labelled images per class
/// and the unlabelled remainder.
pub fn subset_labels(ds: &Dataset, per_class: usize, seed: u64) -> Result<(Dataset, UnlabelledSet), DataError> {
    let train: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].split == Split::Train).collect();
    let mut labelled = vec![false; ds.len()];
    for class in 0..ds.num_classes() {
        let mut members: Vec<usize> = train.iter().copied().filter(|&i| ds.samples[i].label == class).collect();
        if members.len() < per_class {
            return Err(DataError::Budget { per_class, class: ds.class_names[class].clone(), available: members.len() });
        }
        members.shuffle(&mut rng::stream(seed, "label-subset", &[class as u64]));
        for &i in &members[..per_class] {
            labelled[i] = true;
        }
    }
    let mut dl = Vec::new();
    let mut du_images = Vec::new();
    let mut du_labels = Vec::new();
    for i in train {
        let s = &ds.samples[i];
        if labelled[i] {
            dl.push(Sample { is_labelled: true, ..s.clone() });
        } else {
            du_images.push(s.image.clone());
            du_labels.push(s.label);
        }
    }
    let dl = Dataset { class_names: ds.class_names.clone(), samples: dl };
    Ok((dl, UnlabelledSet { images: du_images, hidden_labels: du_labels }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per_class: usize) -> Dataset {
        let mut names: Vec<String> = (0..classes - 1).map(|i| format!("distinct_{i}")).collect();
        names.push(BACKGROUND.into());
        let mut samples = Vec::new();
        for c in 0..classes {
            for k in 0..per_class {
                let v = (c * 31 + k) as f32 / 1000.0;
                for split in [Split::Train, Split::Test] {
                    samples.push(Sample { image: Image::filled(2, 2, v), label: c, split, is_labelled: false });
                }
            }
        }
        Dataset::new(names, samples).unwrap()
    }

    #[test]
    fn subset_is_stratified_partition() {
        let ds = toy(14, 8);
        let (dl, du) = subset_labels(&ds, 5, 3).unwrap();
        assert_eq!(dl.len(), 70);
        assert!(dl.class_counts().iter().all(|&c| c == 5));
        assert_eq!(dl.len() + du.len(), ds.split(Split::Train).len());
        for s in dl.samples() {
            assert!(s.is_labelled && s.split == Split::Train);
            assert!(!du.images().contains(&s.image));
        }
        assert_eq!(du.diagnostic_labels().len(), du.len());
    }

    #[test]
    fn subset_rejects_oversized_budget() {
        let ds = toy(3, 4);
        assert!(matches!(subset_labels(&ds, 5, 0), Err(DataError::Budget { per_class: 5, available: 4, .. })));
    }

    #[test]
    fn without_background_keeps_labels() {
        let ds = toy(4, 2);
        let nb = ds.without_background();
        assert_eq!(nb.num_classes(), 3);
        assert_eq!(nb.background_index(), None);
        assert_eq!(nb.len(), ds.len() - 4);
    }

    #[test]
    fn background_must_be_last() {
        let names = vec![BACKGROUND.to_string(), "distinct_0".into()];
        assert!(Dataset::new(names, vec![]).is_err());
    }
}
