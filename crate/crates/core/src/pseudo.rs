//! Pseudo-label machinery for the unsupervised regime: initial masks parsed
//! from self-supervised dense patch features, the per-epoch moving-average
//! refinement, and a filesystem store that persists masks between epochs.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::resize_bilinear;
use crate::scalar::Scalar;
use crate::types::MaskTensor;

/// Where initial pseudo masks come from (`pseudo.source`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PseudoSource {
    /// Principal-component 1x1 projection over dense patch features.
    #[default]
    Pca1x1,
    /// Precomputed masks ingested from disk.
    File,
}

/// `pseudo.*` config namespace.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    /// Moving-average weight on the previous mask.
    pub lambda: f64,
    pub source: PseudoSource,
    /// Directory of per-image dense feature files (`<id>.dfg`) for `pca1x1`,
    /// or of mask images for `file`.
    pub features_path: Option<PathBuf>,
    /// Root of the persisted mask tree (`<store_dir>/epoch_<k>/<id>.png`).
    pub store_dir: PathBuf,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            source: PseudoSource::Pca1x1,
            features_path: None,
            store_dir: PathBuf::from("pseudo_masks"),
        }
    }
}

/// Dense patch-token features from a self-supervised vision encoder,
/// arranged as a (P,P,D) grid.
#[derive(Debug, Clone)]
pub struct DenseFeatureGrid<T: Scalar> {
    pub patches: Array3<T>,
    pub patch_size: usize,
}

const DFG_MAGIC: &[u8; 4] = b"DFG1";

impl<T: Scalar> DenseFeatureGrid<T> {
    pub fn grid_side(&self) -> usize {
        self.patches.dim().0
    }

    pub fn feature_dim(&self) -> usize {
        self.patches.dim().2
    }

    /// Reads the flat binary format: magic "DFG1", then u32 LE P, D,
    /// patch_size, then P*P*D f32 LE values in (P,P,D) order.
    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != DFG_MAGIC {
            return Err(Error::DenseFeatures(format!(
                "bad magic in {}",
                path.display()
            )));
        }
        let p = f.read_u32::<LittleEndian>()? as usize;
        let d = f.read_u32::<LittleEndian>()? as usize;
        let patch_size = f.read_u32::<LittleEndian>()? as usize;
        if p == 0 || d == 0 || patch_size == 0 {
            return Err(Error::DenseFeatures("zero-sized feature grid".into()));
        }
        let mut values = vec![0f32; p * p * d];
        f.read_f32_into::<LittleEndian>(&mut values)?;
        let patches = Array3::from_shape_vec((p, p, d), values)
            .expect("shape checked above")
            .mapv(|v| T::cast(v as f64));
        Ok(Self { patches, patch_size })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let (p, _, d) = self.patches.dim();
        let mut f = std::fs::File::create(path)?;
        f.write_all(DFG_MAGIC)?;
        f.write_u32::<LittleEndian>(p as u32)?;
        f.write_u32::<LittleEndian>(d as u32)?;
        f.write_u32::<LittleEndian>(self.patch_size as u32)?;
        for &v in self.patches.iter() {
            f.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
        Ok(())
    }
}

/// Label-free 1x1 projection over patch features: the first principal
/// component of the training sample's features, centered on their mean and
/// scaled to unit projected variance. Deterministic given the fitting set.
#[derive(Debug, Clone)]
pub struct MaskProjector<T: Scalar> {
    pub direction: Array1<T>,
    pub mean: Array1<T>,
    pub scale: T,
}

impl<T: Scalar> MaskProjector<T> {
    /// Fits the projector on all patches of the given grids.
    pub fn fit<'a>(grids: impl IntoIterator<Item = &'a DenseFeatureGrid<T>>) -> Result<Self>
    where
        T: 'a,
    {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut d = 0usize;
        for grid in grids {
            d = grid.feature_dim();
            let p = grid.grid_side();
            for y in 0..p {
                for x in 0..p {
                    rows.push((0..d).map(|k| grid.patches[[y, x, k]].as_f64()).collect());
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput("no patches to fit the projector".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0f64; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        // Covariance (biased is fine for a direction estimate).
        let mut cov = vec![0f64; d * d];
        for r in &rows {
            for i in 0..d {
                let ci = r[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += ci * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                cov[i * d + j] = cov[j * d + i];
            }
        }
        for c in cov.iter_mut() {
            *c /= n;
        }
        // Power iteration from the highest-variance coordinate.
        let start = (0..d)
            .max_by(|&a, &b| cov[a * d + a].partial_cmp(&cov[b * d + b]).unwrap())
            .unwrap_or(0);
        let mut v = vec![0f64; d];
        v[start] = 1.0;
        let mut eigenvalue = 0.0;
        for _ in 0..300 {
            let mut w = vec![0f64; d];
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += cov[i * d + j] * v[j];
                }
                w[i] = acc;
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                // Degenerate covariance (constant features): any direction.
                break;
            }
            for (wi, vi) in w.iter().zip(v.iter_mut()) {
                *vi = wi / norm;
            }
            eigenvalue = norm;
        }
        // Deterministic sign: largest-magnitude component positive.
        let lead = (0..d)
            .max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap())
            .unwrap_or(0);
        if v[lead] < 0.0 {
            for vi in v.iter_mut() {
                *vi = -*vi;
            }
        }
        // Degenerate covariance (constant features) keeps the raw projection;
        // anything else is scaled to unit projected variance.
        let scale = if eigenvalue > 1e-18 { 1.0 / eigenvalue.sqrt() } else { 1.0 };
        Ok(Self {
            direction: Array1::from_iter(v.into_iter().map(T::cast)),
            mean: Array1::from_iter(mean.into_iter().map(T::cast)),
            scale: T::cast(scale),
        })
    }

    fn project(&self, feat: ndarray::ArrayView1<T>) -> T {
        let mut acc = T::zero();
        for ((&f, &m), &w) in feat.iter().zip(self.mean.iter()).zip(self.direction.iter()) {
            acc += (f - m) * w;
        }
        acc * self.scale
    }
}

/// Flips a mask when its >= 0.5 region covers the majority of border pixels;
/// objects rarely dominate the border, so the minority side is foreground.
pub fn normalize_polarity<T: Scalar>(mask: Array2<T>) -> Array2<T> {
    let (h, w) = mask.dim();
    let half = T::cast(0.5);
    let mut border = 0usize;
    let mut fg = 0usize;
    for y in 0..h {
        for x in 0..w {
            if y == 0 || y == h - 1 || x == 0 || x == w - 1 {
                border += 1;
                if mask[[y, x]] >= half {
                    fg += 1;
                }
            }
        }
    }
    if 2 * fg > border {
        mask.mapv(|v| T::one() - v)
    } else {
        mask
    }
}

/// Initial pseudo mask: 1x1 projection of the dense grid, sigmoid, bilinear
/// upsampling to the requested size, polarity normalization.
pub fn initial_mask<T: Scalar>(
    features: &DenseFeatureGrid<T>,
    projector: &MaskProjector<T>,
    out_h: usize,
    out_w: usize,
) -> MaskTensor<T> {
    let p = features.grid_side();
    let logits = Array2::from_shape_fn((p, p), |(y, x)| {
        projector.project(features.patches.slice(ndarray::s![y, x, ..]))
    });
    let probs = logits.mapv(|v| T::one() / (T::one() + (-v).exp()));
    let up = resize_bilinear(&probs, out_h, out_w);
    MaskTensor::new(normalize_polarity(up))
}

/// Provenance of a stored pseudo mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Initial,
    Updated,
}

/// A persisted per-image soft mask with epoch provenance.
#[derive(Debug, Clone)]
pub struct PseudoMaskRecord<T: Scalar> {
    pub image_id: String,
    pub mask: MaskTensor<T>,
    pub epoch: u32,
    pub source: MaskSource,
}

/// Moving-average refinement: epochs 1 and 2 keep the initial mask; from
/// epoch 3 on, `lambda * prev + (1 - lambda) * pred`, clamped to [0,1].
pub fn update_mask<T: Scalar>(
    prev: &PseudoMaskRecord<T>,
    pred: &Array2<T>,
    epoch: u32,
    lambda: T,
) -> Result<PseudoMaskRecord<T>> {
    assert!(epoch >= 1, "update_mask requires epoch >= 1");
    assert!(
        lambda > T::zero() && lambda < T::one(),
        "lambda must lie in (0,1)"
    );
    if prev.mask.data.dim() != pred.dim() {
        let (eh, ew) = prev.mask.data.dim();
        let (gh, gw) = pred.dim();
        return Err(Error::ResolutionMismatch {
            expected_h: eh,
            expected_w: ew,
            got_h: gh,
            got_w: gw,
        });
    }
    if epoch <= 2 {
        return Ok(PseudoMaskRecord {
            image_id: prev.image_id.clone(),
            mask: prev.mask.clone(),
            epoch,
            source: prev.source,
        });
    }
    let keep = lambda;
    let take = T::one() - lambda;
    let blended = Array2::from_shape_fn(pred.dim(), |idx| {
        keep * prev.mask.data[idx] + take * pred[idx]
    });
    Ok(PseudoMaskRecord {
        image_id: prev.image_id.clone(),
        mask: MaskTensor::new(blended),
        epoch,
        source: MaskSource::Updated,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    epoch: u32,
    source: MaskSource,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    lambda: f64,
    entries: HashMap<String, ManifestEntry>,
}

/// Filesystem-backed mask store: one 16-bit grayscale PNG per image under
/// `pseudo_masks/epoch_<k>/<image_id>.png` plus a JSON manifest carrying
/// lambda and the latest epoch per image. Readers may run concurrently;
/// writes take the exclusive lock.
pub struct MaskStore {
    root: PathBuf,
    lambda: f64,
    state: RwLock<HashMap<String, ManifestEntry>>,
}

impl MaskStore {
    pub fn open(root: impl Into<PathBuf>, lambda: f64) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        let manifest_path = root.join("manifest.json");
        let entries = if manifest_path.is_file() {
            let text = std::fs::read_to_string(&manifest_path)?;
            let manifest: Manifest = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad mask-store manifest: {e}")))?;
            manifest.entries
        } else {
            HashMap::new()
        };
        Ok(Self { root, lambda, state: RwLock::new(entries) })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.state.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn len(&self) -> usize {
        self.state.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latest_epoch(&self, id: &str) -> Option<u32> {
        self.state.read().unwrap().get(id).map(|e| e.epoch)
    }

    fn mask_path(&self, id: &str, epoch: u32) -> PathBuf {
        self.root.join(format!("epoch_{epoch}")).join(format!("{id}.png"))
    }

    fn persist_manifest(&self, entries: &HashMap<String, ManifestEntry>) -> Result<()> {
        let manifest = Manifest {
            lambda: self.lambda,
            entries: entries
                .iter()
                .map(|(k, v)| (k.clone(), ManifestEntry { epoch: v.epoch, source: v.source }))
                .collect(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(self.root.join("manifest.json"), text)?;
        Ok(())
    }

    pub fn put<T: Scalar>(&self, record: &PseudoMaskRecord<T>) -> Result<()> {
        if record.image_id.is_empty() {
            return Err(Error::EmptyInput("image_id must be non-empty".into()));
        }
        let mut state = self.state.write().unwrap();
        if let Some(entry) = state.get(&record.image_id) {
            if record.epoch < entry.epoch {
                return Err(Error::EpochRegression {
                    id: record.image_id.clone(),
                    have: entry.epoch,
                    got: record.epoch,
                });
            }
        }
        let path = self.mask_path(&record.image_id, record.epoch);
        std::fs::create_dir_all(path.parent().unwrap())?;
        crate::io::save_mask_png16(&path, &record.mask.data)?;
        state.insert(
            record.image_id.clone(),
            ManifestEntry { epoch: record.epoch, source: record.source },
        );
        self.persist_manifest(&state)
    }

    pub fn get<T: Scalar>(&self, id: &str) -> Result<PseudoMaskRecord<T>> {
        let state = self.state.read().unwrap();
        let entry = state.get(id).ok_or_else(|| Error::MaskNotFound { id: id.to_string() })?;
        let path = self.mask_path(id, entry.epoch);
        let data = crate::io::load_mask_gray::<T>(&path)?;
        Ok(PseudoMaskRecord {
            image_id: id.to_string(),
            mask: MaskTensor::new(data),
            epoch: entry.epoch,
            source: entry.source,
        })
    }
}
