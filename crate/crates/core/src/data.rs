//! Dataset ingestion and batching.
//!
//! Directories of image/mask pairs (matched by filename stem) are scanned
//! into deterministic manifests; training mixes every source dataset into a
//! single shuffled stream. Nothing downstream of the manifest sees which
//! dataset a sample came from: a [`Batch`] carries images, masks and ids
//! only, no task or source tag.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::resize_bilinear;
use crate::scalar::Scalar;
use crate::types::{ImageTensor, MaskTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    Train,
    Eval,
}

/// One dataset source (`datasets` config entries).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub images_dir: PathBuf,
    #[serde(default)]
    pub masks_dir: Option<PathBuf>,
    pub role: DatasetRole,
}

/// One manifest row.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn stem_map(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if IMAGE_EXTS.contains(&ext.to_lowercase().as_str()) {
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            out.push((stem, path));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Scans a dataset into a lexicographically ordered manifest. Every image
/// must have a same-stem mask when `masks_dir` is set; a missing one is an
/// error naming the offending stem.
pub fn scan_dataset(spec: &DatasetSpec) -> Result<Vec<ManifestEntry>> {
    let images = stem_map(&spec.images_dir)?;
    if images.is_empty() {
        log::warn!("dataset {}: no images under {}", spec.name, spec.images_dir.display());
    }
    let masks: Option<std::collections::HashMap<String, PathBuf>> = match &spec.masks_dir {
        Some(dir) => Some(stem_map(dir)?.into_iter().collect()),
        None => None,
    };
    let mut manifest = Vec::with_capacity(images.len());
    for (stem, image_path) in images {
        let mask_path = match &masks {
            Some(m) => Some(
                m.get(&stem)
                    .cloned()
                    .ok_or_else(|| Error::OrphanImage { stem: stem.clone() })?,
            ),
            None => None,
        };
        manifest.push(ManifestEntry { id: stem, image_path, mask_path });
    }
    Ok(manifest)
}

/// Loads one manifest entry: the image is bilinearly resized to
/// `target_size` square and scaled to [0,1]; the ground-truth mask is
/// nearest-resized and thresholded to {0,1}. Soft masks (pseudo labels)
/// never pass through here — the mask store owns those.
pub fn load_sample<T: Scalar>(
    entry: &ManifestEntry,
    target_size: usize,
) -> Result<(ImageTensor<T>, Option<MaskTensor<T>>)> {
    let raw = crate::io::load_image_rgb::<T>(&entry.image_path)?;
    let (_, h, w) = raw.dim();
    let image = if (h, w) == (target_size, target_size) {
        raw
    } else {
        let mut out = Array3::<T>::zeros((3, target_size, target_size));
        for c in 0..3 {
            let plane = raw.index_axis(Axis(0), c).to_owned();
            out.index_axis_mut(Axis(0), c)
                .assign(&resize_bilinear(&plane, target_size, target_size));
        }
        out
    };
    let image = ImageTensor::new(image)?;
    let mask = match &entry.mask_path {
        Some(path) => {
            let m = crate::io::load_mask_gray::<T>(path)?;
            Some(MaskTensor::new(m).resize_nearest(target_size, target_size).binarize())
        }
        None => None,
    };
    Ok((image, mask))
}

/// One training batch. `gt_masks` is present only when every member has a
/// ground-truth mask; `flipped` records the augmentation per sample so
/// externally stored supervision can be aligned.
pub struct Batch<T: Scalar> {
    pub images: Array4<T>,
    pub gt_masks: Option<Array3<T>>,
    pub ids: Vec<String>,
    pub flipped: Vec<bool>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Task-blind training stream over the concatenation of all sources.
pub struct MixedLoader {
    entries: Vec<ManifestEntry>,
    batch_size: usize,
    target_size: usize,
    seed: u64,
    flip: bool,
}

impl MixedLoader {
    pub fn new(
        specs: &[DatasetSpec],
        batch_size: usize,
        target_size: usize,
        seed: u64,
        flip: bool,
    ) -> Result<Self> {
        let train: Vec<&DatasetSpec> = specs.iter().filter(|s| s.role == DatasetRole::Train).collect();
        if train.is_empty() {
            return Err(Error::Config("no train datasets configured".into()));
        }
        let mut entries = Vec::new();
        for spec in train {
            entries.extend(scan_dataset(spec)?);
        }
        if batch_size == 0 || batch_size > entries.len() {
            return Err(Error::BatchTooLarge { batch: batch_size, dataset: entries.len() });
        }
        Ok(Self { entries, batch_size, target_size, seed, flip })
    }

    pub fn num_samples(&self) -> usize {
        self.entries.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.entries.len() / self.batch_size
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// The shuffled sample plan for an epoch: (entry index, flip) per slot.
    /// Pure function of (seed, epoch).
    fn plan(&self, epoch: u64) -> Vec<(usize, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch.wrapping_add(1));
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.shuffle(&mut rng);
        order
            .into_iter()
            .map(|i| (i, self.flip && rng.gen_bool(0.5)))
            .collect()
    }

    /// Loads the epoch's batches in order, dropping the last partial batch.
    pub fn epoch_batches<T: Scalar>(
        &self,
        epoch: u64,
    ) -> impl Iterator<Item = Result<Batch<T>>> + '_ {
        let plan = self.plan(epoch);
        let usable = self.batches_per_epoch() * self.batch_size;
        let batch_size = self.batch_size;
        (0..self.batches_per_epoch()).map(move |b| {
            let slots = &plan[b * batch_size..(b + 1) * batch_size];
            debug_assert!(b * batch_size < usable);
            self.load_batch(slots)
        })
    }

    fn load_batch<T: Scalar>(&self, slots: &[(usize, bool)]) -> Result<Batch<T>> {
        let n = slots.len();
        let s = self.target_size;
        let mut images = Array4::<T>::zeros((n, 3, s, s));
        let mut masks = Array3::<T>::zeros((n, s, s));
        let mut have_all_masks = true;
        let mut ids = Vec::with_capacity(n);
        let mut flipped = Vec::with_capacity(n);
        for (slot, &(idx, flip)) in slots.iter().enumerate() {
            let entry = &self.entries[idx];
            let (image, mask) = load_sample::<T>(entry, s)?;
            let mut img = image.data().clone();
            if flip {
                img = flip_lr3(&img);
            }
            images.index_axis_mut(Axis(0), slot).assign(&img);
            match mask {
                Some(m) => {
                    let mm = if flip { flip_lr2(&m.data) } else { m.data };
                    masks.index_axis_mut(Axis(0), slot).assign(&mm);
                }
                None => have_all_masks = false,
            }
            ids.push(entry.id.clone());
            flipped.push(flip);
        }
        Ok(Batch {
            images,
            gt_masks: have_all_masks.then_some(masks),
            ids,
            flipped,
        })
    }
}

pub fn flip_lr2<T: Scalar>(a: &ndarray::Array2<T>) -> ndarray::Array2<T> {
    let (h, w) = a.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| a[[y, w - 1 - x]])
}

fn flip_lr3<T: Scalar>(a: &Array3<T>) -> Array3<T> {
    let (c, h, w) = a.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| a[[ci, y, w - 1 - x]])
}
