//! The `gtr` command line: generate, train, evaluate and infer.

pub mod config;
pub mod overlay;
pub mod train;

use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Parser, Subcommand};

use crate::data::{category_entries, generate_dataset, AnnotationFile, DatasetIndex, ImageEntry, RawAnnotation, SceneImage};
use crate::metrics::{decode, evaluate_model, write_report, DecodedDetection, EvalConfig};
use crate::model::Checkpoint;
use crate::{Error, Result};
pub use config::RunConfig;
pub use train::{train, TrainOptions, TrainSummary};

pub const REPORT_FILE: &str = "report.txt";
pub const DETAILS_FILE: &str = "details.jsonl";
pub const OVERLAY_FILE: &str = "overlay.png";
pub const DETECTIONS_FILE: &str = "detections.json";

#[derive(Debug, Parser)]
#[command(name = "gtr", version, about = "Head and gaze-following detection: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Generate {
        /// Run config; its [generate] section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Overrides GTR_SEED and the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of scenes placed in the `val` split.
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Train a model and write checkpoints and logs to the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to train.run_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or annotation file.
        #[arg(long)]
        data: PathBuf,
        /// Manifest split to evaluate; all images when absent.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Run a checkpoint on one image and draw the detections.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = crate::metrics::DEFAULT_SCORE_THRESHOLD)]
        threshold: f64,
    },
}

/// Entry point; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Usage errors exit with 2, --help and --version with 0.
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            config,
            out,
            count,
            seed,
            val_fraction,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            cfg.apply_env()?;
            let seed = seed.unwrap_or(cfg.seed);
            let mut gen = cfg.generate.clone();
            if let Some(f) = val_fraction {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::Config(format!("--val-fraction {f} is outside [0, 1]")));
                }
                gen.val_fraction = f;
            }
            let manifest = generate_dataset(&gen, seed, count, &out)?;
            println!("wrote {} scenes to {}", manifest.scene_ids.len(), out.display());
            for (split, n) in manifest.split_counts() {
                println!("  {split}: {n}");
            }
            Ok(())
        }
        Command::Train {
            config,
            out,
            resume,
            force,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_env()?;
            let dir = out.unwrap_or_else(|| cfg.train.run_dir.clone());
            let summary = train(&cfg, &dir, TrainOptions { resume, force })?;
            if let Some(last) = summary.epochs.last() {
                println!("finished epoch {}: loss {}", last.epoch + 1, last.mean);
            }
            if let Some(b) = summary.best_epoch {
                println!("best checkpoint from epoch {}", b + 1);
            }
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            out,
            threshold,
            batch_size,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.build_model(DType::F32)?;
            let mut eval = train::stored_run_config(&ck).map_or_else(EvalConfig::default, |c| c.eval);
            if let Some(t) = threshold {
                eval.score_threshold = t;
            }
            let index = DatasetIndex::open(&data, split.as_deref())?;
            let cfg = model.config();
            if index.num_categories != cfg.num_categories {
                return Err(Error::validation(
                    data.display().to_string(),
                    format!("dataset has {} categories, checkpoint expects {}", index.num_categories, cfg.num_categories),
                ));
            }
            let records = index.all_records()?;
            let (report, details) = evaluate_model(&model, &records, &eval, batch_size)?;
            create_dir(&out)?;
            write_report(&report, &details, &out.join(REPORT_FILE), &out.join(DETAILS_FILE))?;
            print!("{report}");
            Ok(())
        }
        Command::Infer {
            checkpoint,
            image,
            out,
            threshold,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.build_model(DType::F32)?;
            let rgb = image::open(&image)
                .map_err(|e| match e {
                    image::ImageError::IoError(io) => Error::io(&image, io),
                    other => Error::Image(other),
                })?
                .to_rgb8();
            let cfg = model.config();
            if (rgb.width() as usize, rgb.height() as usize) != (cfg.input_width, cfg.input_height) {
                return Err(Error::Shape(format!(
                    "{} is {}x{} but the model expects {}x{}; resize the image first",
                    image.display(),
                    rgb.width(),
                    rgb.height(),
                    cfg.input_width,
                    cfg.input_height
                )));
            }
            let scene = SceneImage::from_rgb8(&rgb);
            let preds = model.predict(&[&scene])?;
            let dets = decode(&preds[0], threshold);
            create_dir(&out)?;
            let overlay_path = out.join(OVERLAY_FILE);
            overlay::render(&rgb, &dets).save(&overlay_path).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&overlay_path, io),
                other => Error::Image(other),
            })?;
            let file_name = image.file_name().map_or("image.png".into(), |n| n.to_string_lossy().into_owned());
            let doc = detection_file(&dets, &file_name, rgb.width(), rgb.height(), cfg.num_categories);
            let path = out.join(DETECTIONS_FILE);
            let text = serde_json::to_string_pretty(&doc).expect("serializable") + "\n";
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            println!("{} detections written to {}", dets.len(), out.display());
            Ok(())
        }
    }
}

/// Detections in the annotation schema, with scores attached.
pub fn detection_file(dets: &[DecodedDetection], file: &str, width: u32, height: u32, num_categories: usize) -> AnnotationFile {
    let annotations = dets
        .iter()
        .map(|d| {
            let inside = d.watch_inside_score >= 0.5;
            let ann = crate::data::HgfAnnotation {
                head_box: d.head_box,
                watch_inside: inside,
                gaze_point: inside.then_some(d.gaze_point),
                gaze_object: d.gaze_object.filter(|_| inside).map(|o| crate::data::GazeObject {
                    bbox: o.bbox,
                    category: o.category,
                }),
            };
            let mut raw = RawAnnotation::from_annotation(1, &ann, width as usize, height as usize);
            raw.head_score = Some(d.head_score);
            raw.watch_inside_score = Some(d.watch_inside_score);
            raw.gaze_object_score = ann.gaze_object.and(d.gaze_object.map(|o| o.score));
            raw
        })
        .collect();
    AnnotationFile {
        images: vec![ImageEntry {
            id: 1,
            file: file.to_string(),
            width,
            height,
        }],
        annotations,
        categories: category_entries(num_categories),
    }
}
