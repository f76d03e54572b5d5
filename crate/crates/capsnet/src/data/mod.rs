//! Dataset loading and preparation: directory-of-images and packed
//! corpora, stratified 70/30 splitting, dataset-fraction subsetting,
//! `[0,1]` rescaling, augmentation, and feature-vector ingestion for the
//! classifier heads.

pub mod augment;
pub mod features;
pub mod imageio;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{augment, AugmentConfig};
pub use features::{load_feature_dataset, write_feature_dataset, FeatureDataset, FeatureRecord};
pub use imageio::{bilinear_resize, read_packed, rescale_u8, write_packed, write_pnm};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its class.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// Channel-major pixels in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub class_name: String,
}

/// A labeled image corpus with one shared geometry.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub samples: Vec<LabeledImage>,
    pub class_names: Vec<String>,
    pub channels: usize,
    pub side: usize,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    fn with_samples(&self, samples: Vec<LabeledImage>) -> ImageDataset {
        ImageDataset {
            samples,
            class_names: self.class_names.clone(),
            channels: self.channels,
            side: self.side,
        }
    }
}

/// Load a corpus from either a directory laid out as
/// `root/<class_name>/<file>.ppm|pgm` (classes ordered lexicographically)
/// or a packed `.capd` file. Images are resized to
/// `expected_side x expected_side` with bilinear sampling and rescaled to
/// `[0, 1]`.
pub fn load_image_dataset(root: &Path, expected_side: usize) -> Result<ImageDataset> {
    if expected_side == 0 {
        return Err(Error::contract("expected side must be positive"));
    }
    let meta = std::fs::metadata(root).map_err(|e| Error::io(root, e))?;
    if meta.is_file() {
        let packed = imageio::read_packed(root)?;
        return resize_dataset(packed, expected_side);
    }

    let mut class_dirs: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            class_dirs.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::Decode {
            path: root.to_path_buf(),
            reason: "no class subdirectories found".into(),
        });
    }
    class_dirs.sort_by(|a, b| a.0.cmp(&b.0));

    let class_names: Vec<String> = class_dirs.iter().map(|(n, _)| n.clone()).collect();
    let mut samples = Vec::new();
    let mut channels: Option<usize> = None;
    for (label, (class_name, dir)) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && matches!(
                        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase),
                        Some(ref ext) if ext == "ppm" || ext == "pgm"
                    )
            })
            .collect();
        if files.is_empty() {
            return Err(Error::EmptyClass(class_name.clone()));
        }
        files.sort();
        for file in files {
            let raw = imageio::read_pnm(&file)?;
            match channels {
                None => channels = Some(raw.channels),
                Some(c) if c != raw.channels => {
                    return Err(Error::Decode {
                        path: file,
                        reason: format!(
                            "image has {} channels but the dataset started with {}",
                            raw.channels, c
                        ),
                    })
                }
                _ => {}
            }
            let scaled = imageio::rescale_u8(&raw.pixels);
            let resized = imageio::bilinear_resize(
                &scaled,
                raw.channels,
                raw.height,
                raw.width,
                expected_side,
            );
            samples.push(LabeledImage {
                pixels: Tensor::from_vec(
                    vec![raw.channels, expected_side, expected_side],
                    resized,
                )?,
                label,
                class_name: class_name.clone(),
            });
        }
    }
    Ok(ImageDataset {
        samples,
        class_names,
        channels: channels.expect("at least one sample loaded"),
        side: expected_side,
    })
}

fn resize_dataset(mut dataset: ImageDataset, expected_side: usize) -> Result<ImageDataset> {
    if dataset.side == expected_side {
        return Ok(dataset);
    }
    let (c, s) = (dataset.channels, dataset.side);
    for sample in &mut dataset.samples {
        let resized = imageio::bilinear_resize(sample.pixels.data(), c, s, s, expected_side);
        sample.pixels = Tensor::from_vec(vec![c, expected_side, expected_side], resized)?;
    }
    dataset.side = expected_side;
    Ok(dataset)
}

/// Per-class index lists in class order.
fn indices_by_class(labels: impl Iterator<Item = usize>) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, label) in labels.enumerate() {
        by_class.entry(label).or_default().push(idx);
    }
    by_class
}

/// Stratified split of sample indices: each class is shuffled with the
/// seeded generator, `floor(train_frac * n_c)` go to train, the remainder
/// to test.
fn stratified_split_indices(
    labels: &[usize],
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0 < train_frac && train_frac < 1.0) {
        return Err(Error::contract(format!(
            "train fraction must lie in (0, 1), got {}",
            train_frac
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut indices) in indices_by_class(labels.iter().copied()) {
        if indices.len() < 2 {
            return Err(Error::contract(format!(
                "class {} has {} sample(s); need at least 2 to split",
                class,
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
        let take = (train_frac * indices.len() as f64).floor() as usize;
        train.extend_from_slice(&indices[..take]);
        test.extend_from_slice(&indices[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified subset: `floor(fraction * n_c)` samples per class.
fn stratified_fraction_indices(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(Error::contract(format!(
            "dataset fraction must lie in (0, 1], got {}",
            fraction
        )));
    }
    if fraction == 1.0 {
        return Ok((0..labels.len()).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (_, mut indices) in indices_by_class(labels.iter().copied()) {
        indices.shuffle(&mut rng);
        let take = (fraction * indices.len() as f64).floor() as usize;
        keep.extend_from_slice(&indices[..take]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// 70/30-style stratified split of an image dataset.
pub fn split_train_test(
    dataset: &ImageDataset,
    train_frac: f64,
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    let labels: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();
    let (train_idx, test_idx) = stratified_split_indices(&labels, train_frac, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.samples[i].clone()).collect();
    Ok((
        dataset.with_samples(pick(&train_idx)),
        dataset.with_samples(pick(&test_idx)),
    ))
}

/// Keep a stratified fraction of an image dataset.
pub fn dataset_fraction(dataset: &ImageDataset, fraction: f64, seed: u64) -> Result<ImageDataset> {
    let labels: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();
    let keep = stratified_fraction_indices(&labels, fraction, seed)?;
    Ok(dataset.with_samples(keep.iter().map(|&i| dataset.samples[i].clone()).collect()))
}

/// A training corpus: images or feature vectors.
#[derive(Debug, Clone)]
pub enum Dataset {
    Images(ImageDataset),
    Features(FeatureDataset),
}

impl Dataset {
    /// Load from a path: `.capd`/directory corpora load as images (resized
    /// to `expected_side`), `.feat` files as feature vectors.
    pub fn load(path: &Path, expected_side: usize) -> Result<Dataset> {
        if path.is_file()
            && path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("feat"))
        {
            Ok(Dataset::Features(load_feature_dataset(path)?))
        } else {
            Ok(Dataset::Images(load_image_dataset(path, expected_side)?))
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Images(d) => d.samples.len(),
            Dataset::Features(d) => d.records.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Dataset::Images(d) => d.n_classes(),
            Dataset::Features(d) => d.n_classes(),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        match self {
            Dataset::Images(d) => d.class_names.clone(),
            Dataset::Features(d) => (0..d.n_classes()).map(|i| format!("class_{}", i)).collect(),
        }
    }

    pub fn label(&self, idx: usize) -> usize {
        match self {
            Dataset::Images(d) => d.samples[idx].label,
            Dataset::Features(d) => d.records[idx].label,
        }
    }

    /// The input tensor for one sample (no augmentation).
    pub fn input(&self, idx: usize) -> &Tensor<f32> {
        match self {
            Dataset::Images(d) => &d.samples[idx].pixels,
            Dataset::Features(d) => &d.records[idx].features,
        }
    }

    /// Stratified split.
    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            Dataset::Images(d) => {
                let (a, b) = split_train_test(d, train_frac, seed)?;
                Ok((Dataset::Images(a), Dataset::Images(b)))
            }
            Dataset::Features(d) => {
                let labels: Vec<usize> = d.records.iter().map(|r| r.label).collect();
                let (train_idx, test_idx) = stratified_split_indices(&labels, train_frac, seed)?;
                let pick = |idx: &[usize]| FeatureDataset {
                    records: idx.iter().map(|&i| d.records[i].clone()).collect(),
                    dim: d.dim,
                };
                Ok((
                    Dataset::Features(pick(&train_idx)),
                    Dataset::Features(pick(&test_idx)),
                ))
            }
        }
    }

    /// Stratified fraction subset.
    pub fn fraction(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        match self {
            Dataset::Images(d) => Ok(Dataset::Images(dataset_fraction(d, fraction, seed)?)),
            Dataset::Features(d) => {
                let labels: Vec<usize> = d.records.iter().map(|r| r.label).collect();
                let keep = stratified_fraction_indices(&labels, fraction, seed)?;
                Ok(Dataset::Features(FeatureDataset {
                    records: keep.iter().map(|&i| d.records[i].clone()).collect(),
                    dim: d.dim,
                }))
            }
        }
    }
}
