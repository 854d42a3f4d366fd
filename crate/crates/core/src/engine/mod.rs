//! Training orchestration for both regimes, checkpointing, inference and
//! throughput reporting. The engine runs at `f64`: checkpoint round-trips
//! and repeated runs with one seed are bitwise reproducible.

pub mod checkpoint;
pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, TrainMode};
use crate::data::{flip_lr2, DatasetRole, MixedLoader};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::interp::resize_bilinear;
use crate::loss::{total_loss_graph, LossBreakdown};
use crate::model::SeamlessModel;
use crate::params::ParamStore;
use crate::pseudo::{update_mask, MaskStore};
use crate::types::ImageTensor;

use checkpoint::RngState;

/// One optimizer step's loss record.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown<f64>,
}

pub const HISTORY_HEADER: &str = "step,l_bce,l_ssim,l_iou,l_neg,total";

fn check_finite(step: usize, bd: &LossBreakdown<f64>) -> Result<()> {
    if !bd.is_finite() {
        return Err(Error::Diverged { step, what: "total loss".into() });
    }
    Ok(())
}

/// Drives one training run; owns the parameters, optimizer and history.
pub struct Trainer {
    cfg: Config,
    pub model: SeamlessModel,
    pub ps: ParamStore<f64>,
    optim: optim::Sgd<f64>,
    rng: ChaCha8Rng,
    store: Option<MaskStore>,
    history: Vec<StepRecord>,
    epoch: u32,
    step: usize,
    run_dir: PathBuf,
    digest: String,
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::<f64>::new();
        let model = SeamlessModel::build(cfg, &mut ps)?;
        let optim = optim::Sgd::new(
            cfg.train.lr,
            cfg.train.momentum,
            cfg.train.weight_decay,
            cfg.train.clip_norm,
        );
        let store = match cfg.train.mode {
            TrainMode::Unsupervised => Some(MaskStore::open(
                cfg.pseudo.store_dir.clone(),
                cfg.pseudo.lambda,
            )?),
            TrainMode::Supervised => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(u64::MAX); // engine stream, distinct from init/loader
        Ok(Self {
            cfg: cfg.clone(),
            model,
            ps,
            optim,
            rng,
            store,
            history: Vec::new(),
            epoch: 0,
            step: 0,
            run_dir: cfg.run_dir(),
            digest: cfg.digest(),
        })
    }

    /// Restores parameters, optimizer state and the epoch counter.
    pub fn resume(cfg: &Config, ckpt: &Path) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        let ck = checkpoint::load(ckpt)?;
        if ck.config_digest != t.digest {
            log::warn!(
                "checkpoint digest {} differs from config digest {}",
                ck.config_digest,
                t.digest
            );
        }
        checkpoint::apply_tensors(&mut t.ps, &ck.tensors, None)?;
        t.optim.import_state(&t.ps, ck.optim);
        t.rng = ck.rng.restore();
        t.epoch = ck.epoch;
        t.step = 0;
        Ok(t)
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn mask_store(&self) -> Option<&MaskStore> {
        self.store.as_ref()
    }

    fn loader(&self) -> Result<MixedLoader> {
        MixedLoader::new(
            &self.cfg.datasets,
            self.cfg.train.batch_size,
            self.cfg.train.image_size,
            self.cfg.train.seed,
            self.cfg.train.flip_enabled(),
        )
    }

    /// Supervision masks for a batch: ground truth in supervised mode,
    /// stored pseudo masks (resized to the input, flip-aligned) otherwise.
    fn supervision(
        &self,
        batch: &crate::data::Batch<f64>,
    ) -> Result<Vec<Array2<f64>>> {
        let s = self.cfg.train.image_size;
        match self.cfg.train.mode {
            TrainMode::Supervised => {
                let gt = batch.gt_masks.as_ref().ok_or_else(|| {
                    Error::Config("supervised training needs mask directories".into())
                })?;
                Ok((0..batch.len())
                    .map(|i| gt.index_axis(Axis(0), i).to_owned())
                    .collect())
            }
            TrainMode::Unsupervised => {
                let store = self.store.as_ref().expect("store exists in unsupervised mode");
                batch
                    .ids
                    .iter()
                    .zip(&batch.flipped)
                    .map(|(id, &flipped)| {
                        let rec = store.get::<f64>(id)?;
                        let mut m = resize_bilinear(&rec.mask.data, s, s);
                        if flipped {
                            m = flip_lr2(&m);
                        }
                        Ok(m)
                    })
                    .collect()
            }
        }
    }

    fn train_step(&mut self, batch: &crate::data::Batch<f64>) -> Result<LossBreakdown<f64>> {
        let masks = self.supervision(batch)?;
        let s = self.cfg.train.image_size;
        let n = batch.len();
        let mut target = ArrayD::<f64>::zeros(ndarray::IxDyn(&[n, 1, s, s]));
        for (i, m) in masks.iter().enumerate() {
            target
                .index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(m);
        }
        let mut g = Graph::new();
        let fwd = self.model.forward_train(
            &mut g,
            &mut self.ps,
            batch.images.clone(),
            &masks,
            self.cfg.cdp.enabled,
        );
        let neg = fwd.contrastive.map(|(_, _, neg)| neg);
        let losses = total_loss_graph(&mut g, fwd.t_act, &target, neg, &self.cfg.loss)?;
        let bd = LossBreakdown::from_vars(&g, &losses);
        check_finite(self.step, &bd)?;
        let grads = g.backward(losses.total);
        let by_param = g.param_grads(&grads);
        self.optim.step(&mut self.ps, &by_param);
        Ok(bd)
    }

    /// End-of-epoch pseudo-mask refresh (epochs 3+): blend each stored mask
    /// with the current model's prediction at the stored resolution.
    fn refresh_pseudo_masks(&mut self, loader: &MixedLoader, epoch: u32) -> Result<()> {
        if epoch <= 2 {
            return Ok(());
        }
        let store = self.store.as_ref().expect("unsupervised mode");
        let lambda = self.cfg.pseudo.lambda;
        let s = self.cfg.train.image_size;
        for entry in loader.entries() {
            let (image, _) = crate::data::load_sample::<f64>(entry, s)?;
            let inf = self.model.infer_one(&self.ps, &image)?;
            let prev = store.get::<f64>(&entry.id)?;
            let (mh, mw) = prev.mask.data.dim();
            let pred = resize_bilinear(&inf.t_act, mh, mw);
            let updated = update_mask(&prev, &pred, epoch, lambda)?;
            store.put(&updated)?;
        }
        Ok(())
    }

    fn history_path(&self) -> PathBuf {
        self.run_dir.join("history.csv")
    }

    fn append_history(&self, records: &[StepRecord]) -> Result<()> {
        let path = self.history_path();
        std::fs::create_dir_all(&self.run_dir)?;
        let mut f = if path.is_file() {
            std::fs::OpenOptions::new().append(true).open(&path)?
        } else {
            let mut f = std::fs::File::create(&path)?;
            writeln!(f, "{HISTORY_HEADER}")?;
            f
        };
        for r in records {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                r.step, r.loss.l_bce, r.loss.l_ssim, r.loss.l_iou, r.loss.l_neg, r.loss.total
            )?;
        }
        Ok(())
    }

    pub fn checkpoint_path(&self, epoch: u32) -> PathBuf {
        self.run_dir.join(format!("ckpt_{epoch}.bin"))
    }

    pub fn save_checkpoint(&self, epoch: u32) -> Result<PathBuf> {
        let path = self.checkpoint_path(epoch);
        checkpoint::save(
            &path,
            &self.ps,
            &self.optim.export_state(&self.ps),
            &self.digest,
            epoch,
            &RngState::capture(&self.rng),
        )?;
        Ok(path)
    }

    /// Runs one epoch (1-based counters drive the pseudo-label schedule),
    /// appends history, refreshes pseudo masks and writes a checkpoint.
    pub fn run_one_epoch(&mut self) -> Result<()> {
        let loader = self.loader()?;
        if self.cfg.train.mode == TrainMode::Unsupervised {
            let store = self.store.as_ref().expect("unsupervised mode");
            for entry in loader.entries() {
                if store.latest_epoch(&entry.id).is_none() {
                    return Err(Error::MissingPseudoMask { id: entry.id.clone() });
                }
            }
        }
        let epoch = self.epoch + 1;
        let mut fresh = Vec::new();
        let batches: Vec<_> = loader.epoch_batches::<f64>((epoch - 1) as u64).collect();
        for batch in batches {
            let batch = batch?;
            let bd = self.train_step(&batch)?;
            self.step += 1;
            let rec = StepRecord { step: self.step, loss: bd };
            self.history.push(rec);
            fresh.push(rec);
        }
        self.append_history(&fresh)?;
        if self.cfg.train.mode == TrainMode::Unsupervised {
            self.refresh_pseudo_masks(&loader, epoch)?;
        }
        self.epoch = epoch;
        self.save_checkpoint(epoch)?;
        Ok(())
    }

    /// Trains from the current epoch through `train.epochs`.
    pub fn run(&mut self) -> Result<TrainArtifacts> {
        while self.epoch < self.cfg.train.epochs {
            self.run_one_epoch()?;
        }
        Ok(TrainArtifacts {
            history: self.history.clone(),
            final_checkpoint: self.checkpoint_path(self.epoch),
            run_dir: self.run_dir.clone(),
            config_digest: self.digest.clone(),
        })
    }

    /// Mean absolute error of the current model against reference masks,
    /// evaluated over the training manifest (order-stable).
    pub fn train_set_mae(&self, reference_masks_dir: &Path) -> Result<f64> {
        let loader = self.loader()?;
        let s = self.cfg.train.image_size;
        let mut total = 0.0;
        let mut count = 0usize;
        for entry in loader.entries() {
            let (image, _) = crate::data::load_sample::<f64>(entry, s)?;
            let inf = self.model.infer_one(&self.ps, &image)?;
            let gt_path = reference_masks_dir.join(format!("{}.png", entry.id));
            let gt = crate::io::load_mask_gray::<f64>(&gt_path)?;
            let (h, w) = gt.dim();
            let pred = resize_bilinear(&inf.t_act, h, w);
            let err: f64 = pred
                .iter()
                .zip(gt.iter())
                .map(|(&p, &g)| (p - (g >= 0.5) as u8 as f64).abs())
                .sum();
            total += err / (h * w) as f64;
            count += 1;
        }
        Ok(total / count as f64)
    }
}

/// Complete-run artifacts.
pub struct TrainArtifacts {
    pub history: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
    pub run_dir: PathBuf,
    pub config_digest: String,
}

/// Trains per the config (both regimes share this entry point; nothing in
/// the loop branches on which dataset a sample came from).
pub fn train(cfg: &Config) -> Result<TrainArtifacts> {
    Trainer::new(cfg)?.run()
}

/// Inference statistics.
#[derive(Debug, Clone, Copy)]
pub struct InferStats {
    pub images: usize,
    pub seconds: f64,
    pub images_per_sec: f64,
}

/// Runs the decoder over every image in a directory, writing one 8-bit
/// grayscale PNG per image at its native resolution. No contrastive head
/// runs here. Parallel across images; outputs are bitwise deterministic.
pub fn infer(
    cfg: &Config,
    ckpt_path: &Path,
    images_dir: &Path,
    out_dir: &Path,
    jobs: Option<usize>,
) -> Result<InferStats> {
    use rayon::prelude::*;
    let mut ps = ParamStore::<f64>::new();
    let model = SeamlessModel::build(cfg, &mut ps)?;
    let ck = checkpoint::load(ckpt_path)?;
    if ck.config_digest != cfg.digest() {
        log::warn!("checkpoint was produced under a different config digest");
    }
    checkpoint::apply_tensors(&mut ps, &ck.tensors, None)?;
    let spec = crate::data::DatasetSpec {
        name: "infer".into(),
        images_dir: images_dir.to_path_buf(),
        masks_dir: None,
        role: DatasetRole::Eval,
    };
    let manifest = crate::data::scan_dataset(&spec)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Checkpoint(format!("cannot create {}: {e}", out_dir.display())))?;
    let s = cfg.train.image_size;
    let start = std::time::Instant::now();
    let run = |entries: &[crate::data::ManifestEntry]| -> Vec<Result<()>> {
        entries
            .par_iter()
            .map(|entry| {
                let native = crate::io::load_image_rgb::<f64>(&entry.image_path)?;
                let (_, nh, nw) = native.dim();
                let (image, _) = crate::data::load_sample::<f64>(entry, s)?;
                let inf = model.infer_one(&ps, &image)?;
                let up = resize_bilinear(&inf.t_act, nh, nw);
                crate::io::save_mask_png8(&out_dir.join(format!("{}.png", entry.id)), &up)
            })
            .collect()
    };
    let results = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .expect("thread pool")
            .install(|| run(&manifest)),
        None => run(&manifest),
    };
    for r in results {
        r?;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(InferStats {
        images: manifest.len(),
        seconds,
        images_per_sec: manifest.len() as f64 / seconds.max(1e-12),
    })
}

/// Throughput and size report.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct BenchReport {
    pub parameters: usize,
    pub macs_per_image: u64,
    pub images_per_sec: f64,
    pub image_size: usize,
    pub timed_runs: usize,
}

/// Parameter count, multiply-accumulate estimate and images/sec over
/// `n_images` timed single-image forwards after 3 warm-ups.
pub fn bench(cfg: &Config, ckpt_path: Option<&Path>, n_images: usize, size: usize) -> Result<BenchReport> {
    if n_images == 0 {
        return Err(Error::EmptyInput("bench needs at least one timed run".into()));
    }
    if size % 32 != 0 || size == 0 {
        return Err(Error::ShapeViolation(format!("bench size {size} not divisible by 32")));
    }
    let mut ps = ParamStore::<f64>::new();
    let model = SeamlessModel::build(cfg, &mut ps)?;
    if let Some(path) = ckpt_path {
        let ck = checkpoint::load(path)?;
        checkpoint::apply_tensors(&mut ps, &ck.tensors, None)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xBE7C);
    let image = ImageTensor::new(ndarray::Array3::from_shape_fn((3, size, size), |_| {
        rng.gen_range(0.0..1.0)
    }))?;
    // MAC estimate from an instrumented forward.
    let macs = {
        let batch = model.backbone.normalize_batch(image.data().clone().insert_axis(Axis(0)));
        let mut g = Graph::<f64>::inference();
        let imgs = g.constant(batch.into_dyn());
        let mut pass = crate::nn::Pass::Eval(&ps);
        let levels = model.backbone.extract(&mut g, &mut pass, imgs);
        let _ = model.decoder.forward(&mut g, &mut pass, &levels, size, size);
        g.macs()
    };
    for _ in 0..3 {
        let _ = model.infer_one(&ps, &image)?;
    }
    let start = std::time::Instant::now();
    for _ in 0..n_images {
        let _ = model.infer_one(&ps, &image)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        parameters: ps.learnable_scalars(),
        macs_per_image: macs,
        images_per_sec: n_images as f64 / seconds.max(1e-12),
        image_size: size,
        timed_runs: n_images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_guard_trips_on_nan() {
        let bad = LossBreakdown {
            l_bce: 0.1,
            l_ssim: f64::NAN,
            l_iou: 0.0,
            l_neg: 0.0,
            total: f64::NAN,
        };
        assert!(matches!(
            check_finite(7, &bad),
            Err(Error::Diverged { step: 7, .. })
        ));
        let ok = LossBreakdown { l_bce: 0.1, l_ssim: 0.2, l_iou: 0.3, l_neg: 0.0, total: 0.6 };
        assert!(check_finite(0, &ok).is_ok());
    }
}

/// Standalone pseudo-mask refresh: loads a checkpoint and applies the
/// moving-average update for `epoch` to every train image's stored mask
/// (a content no-op for epochs 1 and 2 per the schedule).
pub fn refresh_masks(cfg: &Config, ckpt_path: &Path, epoch: u32) -> Result<usize> {
    let mut ps = ParamStore::<f64>::new();
    let model = SeamlessModel::build(cfg, &mut ps)?;
    let ck = checkpoint::load(ckpt_path)?;
    checkpoint::apply_tensors(&mut ps, &ck.tensors, None)?;
    let store = MaskStore::open(cfg.pseudo.store_dir.clone(), cfg.pseudo.lambda)?;
    let s = cfg.train.image_size;
    let mut updated = 0usize;
    for spec in cfg.datasets.iter().filter(|d| d.role == DatasetRole::Train) {
        for entry in crate::data::scan_dataset(spec)? {
            let prev = store.get::<f64>(&entry.id)?;
            let (image, _) = crate::data::load_sample::<f64>(&entry, s)?;
            let inf = model.infer_one(&ps, &image)?;
            let (mh, mw) = prev.mask.data.dim();
            let pred = resize_bilinear(&inf.t_act, mh, mw);
            let next = update_mask(&prev, &pred, epoch, cfg.pseudo.lambda)?;
            store.put(&next)?;
            updated += 1;
        }
    }
    Ok(updated)
}
