//! `seamless` command line: train / infer / evaluate / pseudo-init /
//! pseudo-update / bench.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.
//! Every run prints the resolved configuration digest; `--dry-run` validates
//! inputs and prints what would happen without computing or writing.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seamless_core::config::Config;
use seamless_core::data::scan_dataset;
use seamless_core::engine;
use seamless_core::error::Error;
use seamless_core::metrics::{evaluate_dirs, DirEvaluation, FBetaVariant, MetricsReport};

#[derive(Parser)]
#[command(name = "seamless", version, about = "Task-agnostic salient/camouflaged object detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the config (supervised or unsupervised mode)
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Validate config and dataset manifests without training
        #[arg(long)]
        dry_run: bool,
        /// Continue from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write per-image prediction PNGs for a directory of images
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Parallel workers
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Score predictions against ground-truth masks
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Comma-separated subset of mae,fbeta,sm,em
        #[arg(long, default_value = "mae,fbeta,sm,em")]
        metrics: String,
        #[arg(long, default_value = "max")]
        fbeta_variant: String,
        /// Report format: json or csv
        #[arg(long, default_value = "json")]
        report: String,
        /// Write the dataset-mean PR curve as CSV
        #[arg(long)]
        pr_out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Generate epoch-0 pseudo masks into the store
    PseudoInit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dry_run: bool,
    },
    /// Blend stored pseudo masks with a checkpoint's predictions
    PseudoUpdate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training epoch the update belongs to (blends only when > 2)
        #[arg(long)]
        epoch: u32,
        #[arg(long)]
        dry_run: bool,
    },
    /// Parameter count, MAC estimate and images/sec
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        n_images: usize,
        #[arg(long, default_value_t = 320)]
        size: usize,
        #[arg(long)]
        dry_run: bool,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::UnknownProfile(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(path: &Path) -> Result<Config, Error> {
    let cfg = Config::load(path)?;
    println!("config digest: {}", cfg.digest());
    Ok(cfg)
}

fn print_manifest_counts(cfg: &Config) -> Result<usize, Error> {
    let mut total = 0usize;
    for spec in &cfg.datasets {
        let manifest = scan_dataset(spec)?;
        println!(
            "dataset {}: {} images ({:?})",
            spec.name,
            manifest.len(),
            spec.role
        );
        total += manifest.len();
    }
    Ok(total)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Train { config, dry_run, resume } => {
            let cfg = load_config(&config)?;
            print_manifest_counts(&cfg)?;
            if dry_run {
                println!("dry run: config and manifests are valid");
                return Ok(());
            }
            let mut trainer = match resume {
                Some(ckpt) => engine::Trainer::resume(&cfg, &ckpt)?,
                None => engine::Trainer::new(&cfg)?,
            };
            let artifacts = trainer.run()?;
            println!(
                "trained {} epochs, {} steps; final checkpoint: {}",
                cfg.train.epochs,
                artifacts.history.len(),
                artifacts.final_checkpoint.display()
            );
            if let Some(last) = artifacts.history.last() {
                println!(
                    "final losses: bce {:.5} ssim {:.5} iou {:.5} neg {:.5} total {:.5}",
                    last.loss.l_bce, last.loss.l_ssim, last.loss.l_iou, last.loss.l_neg, last.loss.total
                );
            }
            Ok(())
        }
        Command::Infer { config, checkpoint, images_dir, out_dir, jobs, dry_run } => {
            let cfg = load_config(&config)?;
            let spec = seamless_core::data::DatasetSpec {
                name: "infer".into(),
                images_dir: images_dir.clone(),
                masks_dir: None,
                role: seamless_core::data::DatasetRole::Eval,
            };
            let manifest = scan_dataset(&spec)?;
            println!("{} images under {}", manifest.len(), images_dir.display());
            if dry_run {
                engine::checkpoint::load(&checkpoint)?;
                println!("dry run: checkpoint and image directory are valid");
                return Ok(());
            }
            let stats = engine::infer(&cfg, &checkpoint, &images_dir, &out_dir, jobs)?;
            println!(
                "wrote {} predictions to {} ({:.2} images/sec)",
                stats.images,
                out_dir.display(),
                stats.images_per_sec
            );
            Ok(())
        }
        Command::Evaluate { pred_dir, gt_dir, metrics, fbeta_variant, report, pr_out, jobs, dry_run } => {
            let selection = MetricSelection::parse(&metrics)?;
            let variant = FBetaVariant::parse(&fbeta_variant)?;
            let options_digest = {
                use sha2::Digest;
                let blob = serde_json::json!({
                    "pred_dir": pred_dir, "gt_dir": gt_dir, "metrics": metrics,
                    "fbeta_variant": fbeta_variant, "report": report,
                });
                hex::encode(sha2::Sha256::digest(blob.to_string().as_bytes()))
            };
            println!("config digest: {options_digest}");
            if !matches!(report.as_str(), "json" | "csv") {
                return Err(Error::Config(format!("unknown report format: {report}")));
            }
            if dry_run {
                for d in [&pred_dir, &gt_dir] {
                    if !d.is_dir() {
                        return Err(Error::MissingDirectory(d.clone()));
                    }
                }
                println!("dry run: directories exist");
                return Ok(());
            }
            let eval: DirEvaluation<f64> = evaluate_dirs(&pred_dir, &gt_dir, variant, jobs)?;
            if eval.excluded_empty_gt > 0 {
                eprintln!("excluded {} empty-ground-truth image(s)", eval.excluded_empty_gt);
            }
            if let Some(path) = pr_out {
                write_pr_csv(&path, &eval.mean)?;
            }
            let mut rows: Vec<&MetricsReport<f64>> = eval.per_image.iter().collect();
            rows.push(&eval.mean);
            match report.as_str() {
                "json" => print_json(&rows, &selection),
                _ => print_csv(&rows, &selection),
            }
            Ok(())
        }
        Command::PseudoInit { config, dry_run } => {
            let cfg = load_config(&config)?;
            print_manifest_counts(&cfg)?;
            let written = pseudo_init(&cfg, dry_run)?;
            if dry_run {
                println!("dry run: would write {written} initial masks");
            } else {
                println!("wrote {written} initial masks to {}", cfg.pseudo.store_dir.display());
            }
            Ok(())
        }
        Command::PseudoUpdate { config, checkpoint, epoch, dry_run } => {
            let cfg = load_config(&config)?;
            if epoch < 1 {
                return Err(Error::Config("epoch must be >= 1".into()));
            }
            if dry_run {
                engine::checkpoint::load(&checkpoint)?;
                println!("dry run: checkpoint loads; would update masks for epoch {epoch}");
                return Ok(());
            }
            let updated = engine::refresh_masks(&cfg, &checkpoint, epoch)?;
            println!("updated {updated} masks at epoch {epoch}");
            Ok(())
        }
        Command::Bench { config, checkpoint, n_images, size, dry_run } => {
            let cfg = load_config(&config)?;
            if dry_run {
                println!("dry run: would time {n_images} forwards at {size}x{size}");
                return Ok(());
            }
            let report = engine::bench(&cfg, checkpoint.as_deref(), n_images, size)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
    }
}

struct MetricSelection {
    mae: bool,
    fbeta: bool,
    sm: bool,
    em: bool,
}

impl MetricSelection {
    fn parse(s: &str) -> Result<Self, Error> {
        let mut sel = Self { mae: false, fbeta: false, sm: false, em: false };
        for item in s.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "mae" => sel.mae = true,
                "fbeta" => sel.fbeta = true,
                "sm" => sel.sm = true,
                "em" => sel.em = true,
                other => return Err(Error::Config(format!("unknown metric: {other}"))),
            }
        }
        if !(sel.mae || sel.fbeta || sel.sm || sel.em) {
            return Err(Error::Config("no metrics selected".into()));
        }
        Ok(sel)
    }
}

fn row_json(r: &MetricsReport<f64>, sel: &MetricSelection) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    map.insert("id".into(), serde_json::json!(r.id));
    if sel.mae {
        map.insert("mae".into(), serde_json::json!(r.mae));
    }
    if sel.fbeta {
        map.insert("f_beta".into(), serde_json::json!(r.f_beta));
    }
    if sel.sm {
        map.insert("s_measure".into(), serde_json::json!(r.s_measure));
    }
    if sel.em {
        map.insert("e_measure".into(), serde_json::json!(r.e_measure));
    }
    serde_json::Value::Object(map)
}

fn print_json(rows: &[&MetricsReport<f64>], sel: &MetricSelection) {
    let values: Vec<_> = rows.iter().map(|r| row_json(r, sel)).collect();
    println!("{}", serde_json::to_string_pretty(&values).expect("rows serialize"));
}

fn print_csv(rows: &[&MetricsReport<f64>], sel: &MetricSelection) {
    let mut header = vec!["id"];
    if sel.mae {
        header.push("mae");
    }
    if sel.fbeta {
        header.push("f_beta");
    }
    if sel.sm {
        header.push("s_measure");
    }
    if sel.em {
        header.push("e_measure");
    }
    println!("{}", header.join(","));
    for r in rows {
        let mut cells = vec![r.id.clone()];
        if sel.mae {
            cells.push(r.mae.to_string());
        }
        if sel.fbeta {
            cells.push(r.f_beta.to_string());
        }
        if sel.sm {
            cells.push(r.s_measure.to_string());
        }
        if sel.em {
            cells.push(r.e_measure.to_string());
        }
        println!("{}", cells.join(","));
    }
}

fn write_pr_csv(path: &Path, mean: &MetricsReport<f64>) -> Result<(), Error> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "threshold,precision,recall")?;
    for (k, p) in mean.pr_curve.iter().enumerate() {
        writeln!(f, "{},{},{}", k as f64 / 255.0, p.precision, p.recall)?;
    }
    Ok(())
}

/// Builds epoch-0 masks per `pseudo.source` for every train image.
fn pseudo_init(cfg: &Config, dry_run: bool) -> Result<usize, Error> {
    use seamless_core::data::DatasetRole;
    use seamless_core::pseudo::{
        initial_mask, DenseFeatureGrid, MaskProjector, MaskSource, MaskStore, PseudoMaskRecord,
        PseudoSource,
    };
    use seamless_core::types::MaskTensor;

    let source_dir = cfg.pseudo.features_path.as_ref().ok_or_else(|| {
        Error::Config("pseudo.features_path must point at the feature/mask directory".into())
    })?;
    let mut entries = Vec::new();
    for spec in cfg.datasets.iter().filter(|s| s.role == DatasetRole::Train) {
        entries.extend(scan_dataset(spec)?);
    }
    if entries.is_empty() {
        return Err(Error::EmptyInput("no train images for pseudo-init".into()));
    }
    let native_size = |entry: &seamless_core::data::ManifestEntry| -> Result<(usize, usize), Error> {
        let img = seamless_core::io::load_image_rgb::<f64>(&entry.image_path)?;
        let (_, h, w) = img.dim();
        Ok((h, w))
    };
    match cfg.pseudo.source {
        PseudoSource::Pca1x1 => {
            let mut grids = Vec::with_capacity(entries.len());
            for entry in &entries {
                let path = source_dir.join(format!("{}.dfg", entry.id));
                if !path.is_file() {
                    return Err(Error::DenseFeatures(format!(
                        "missing dense features for {}: {}",
                        entry.id,
                        path.display()
                    )));
                }
                grids.push(DenseFeatureGrid::<f64>::read(&path)?);
            }
            if dry_run {
                return Ok(entries.len());
            }
            let projector = MaskProjector::fit(grids.iter())?;
            let store = MaskStore::open(&cfg.pseudo.store_dir, cfg.pseudo.lambda)?;
            for (entry, grid) in entries.iter().zip(grids.iter()) {
                let (h, w) = native_size(entry)?;
                let mask = initial_mask(grid, &projector, h, w);
                store.put(&PseudoMaskRecord {
                    image_id: entry.id.clone(),
                    mask,
                    epoch: 0,
                    source: MaskSource::Initial,
                })?;
            }
            Ok(entries.len())
        }
        PseudoSource::File => {
            if dry_run {
                for entry in &entries {
                    if find_mask_file(source_dir, &entry.id).is_none() {
                        return Err(Error::OrphanImage { stem: entry.id.clone() });
                    }
                }
                return Ok(entries.len());
            }
            let store = MaskStore::open(&cfg.pseudo.store_dir, cfg.pseudo.lambda)?;
            for entry in &entries {
                let path = find_mask_file(source_dir, &entry.id)
                    .ok_or_else(|| Error::OrphanImage { stem: entry.id.clone() })?;
                let raw = seamless_core::io::load_mask_gray::<f64>(&path)?;
                let (h, w) = native_size(entry)?;
                let mask = MaskTensor::new(raw).resize_bilinear(h, w);
                store.put(&PseudoMaskRecord {
                    image_id: entry.id.clone(),
                    mask,
                    epoch: 0,
                    source: MaskSource::Initial,
                })?;
            }
            Ok(entries.len())
        }
    }
}

fn find_mask_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg", "bmp"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}
