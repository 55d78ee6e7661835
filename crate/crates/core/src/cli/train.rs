//! The training loop: epochs over a shuffled split, per-epoch checkpoints,
//! best-by-validation selection and exact resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::data::{split_names, DatasetIndex};
use crate::metrics::{evaluate_model, MetricReport};
use crate::model::params::ParamGroup;
use crate::model::{Checkpoint, CheckpointMeta, GtrModel};
use crate::objective::{training_step, AdamW, LossReport};
use crate::{seed, Error, Result};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STEP_LOG: &str = "train_log.jsonl";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LearningRates {
    pub backbone: f64,
    pub rest: f64,
}

/// One row of the step log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub components: LossReport,
    pub lr: LearningRates,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean: LossReport,
    #[serde(default)]
    pub val: Option<MetricReport>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub resume: bool,
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Pins thread pools to one thread. Must run before the first tensor op.
pub fn make_deterministic() {
    if std::env::var_os("RAYON_NUM_THREADS").is_none() {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    // Fails only if a global pool already exists, in which case the
    // variable above was read when it was built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
}

fn append_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in rows {
        let line = serde_json::to_string(r).expect("serializable");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(vec![]);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                location: format!("line {}", i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Rewrites a log keeping rows before `epoch`, so a resumed run does not
/// duplicate the rows of the interrupted epoch.
fn truncate_log<T: Serialize + for<'de> Deserialize<'de>>(path: &Path, keep: impl Fn(&T) -> bool) -> Result<Vec<T>> {
    let rows: Vec<T> = read_jsonl::<T>(path)?.into_iter().filter(|r| keep(r)).collect();
    if path.exists() {
        fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    append_jsonl(path, &rows)?;
    Ok(rows)
}

/// Checks the dataset against the model before any step runs.
fn check_dataset(index: &DatasetIndex, cfg: &RunConfig, what: &str) -> Result<()> {
    let m = &cfg.model;
    if index.is_empty() {
        return Err(Error::validation(what, "split has no annotated images"));
    }
    if index.num_categories != m.num_categories {
        return Err(Error::validation(
            what,
            format!("dataset has {} categories, model.num_categories = {}", index.num_categories, m.num_categories),
        ));
    }
    for (entry, labels) in &index.entries {
        if (entry.width as usize, entry.height as usize) != (m.input_width, m.input_height) {
            return Err(Error::validation(
                format!("{what}: {}", entry.file),
                format!(
                    "image is {}x{}, model input is {}x{}",
                    entry.width, entry.height, m.input_width, m.input_height
                ),
            ));
        }
        if labels.annotations.len() > m.num_queries {
            return Err(Error::Capacity {
                n_gt: labels.annotations.len(),
                n_q: m.num_queries,
            });
        }
    }
    Ok(())
}

fn prepare_run_dir(dir: &Path, opts: TrainOptions) -> Result<()> {
    let occupied = dir.exists() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
    if occupied && !opts.resume {
        if !opts.force {
            return Err(Error::Config(format!(
                "run directory {} already exists; pass --force to overwrite or --resume to continue",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))
}

fn lrs(opt: &AdamW) -> LearningRates {
    LearningRates {
        backbone: opt.lr(ParamGroup::Backbone),
        rest: opt.lr(ParamGroup::Rest),
    }
}

fn selection_score(e: &EpochRecord) -> f64 {
    // Validation mAP when available, otherwise lower training loss is better.
    match e.val.and_then(|v| v.hgf_map) {
        Some(m) => m,
        None if e.val.is_some() => f64::NEG_INFINITY,
        None => -e.mean.total,
    }
}

pub fn train(cfg: &RunConfig, run_dir: &Path, opts: TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    if cfg.deterministic {
        make_deterministic();
    }
    let train_set = DatasetIndex::open(&cfg.data.dir, Some(&cfg.data.train_split))?;
    check_dataset(&train_set, cfg, "training split")?;
    let val_set = match &cfg.data.val_split {
        Some(name) if split_names(&cfg.data.dir)?.contains(name) => {
            let v = DatasetIndex::open(&cfg.data.dir, Some(name))?;
            check_dataset(&v, cfg, "validation split")?;
            Some(v.all_records()?)
        }
        _ => None,
    };
    // Target encoding errors surface here rather than mid-epoch.
    for i in 0..train_set.len() {
        let (_, labels) = &train_set.entries[i];
        for (k, a) in labels.annotations.iter().enumerate() {
            a.validate(&format!("{} annotation {k}", labels.scene_id))?;
        }
    }

    prepare_run_dir(run_dir, opts)?;
    let model = GtrModel::new(cfg.model.clone(), cfg.seed, DType::F32)?;
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut start_epoch = 0;
    let mut best: Option<(usize, f64)> = None;
    let mut history: Vec<EpochRecord> = vec![];
    let step_log = run_dir.join(STEP_LOG);
    let epoch_log = run_dir.join(EPOCH_LOG);

    let last = run_dir.join(LAST_CHECKPOINT);
    if opts.resume && last.exists() {
        let ck = Checkpoint::load(&last)?;
        if ck.meta.seed != cfg.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with seed {}, config has {}",
                ck.meta.seed, cfg.seed
            )));
        }
        ck.restore_into(&model)?;
        let m = ck.extra_with_prefix("optim/m/", &Device::Cpu)?;
        let v = ck.extra_with_prefix("optim/v/", &Device::Cpu)?;
        start_epoch = ck.meta.epoch;
        opt.restore(ck.meta.step, start_epoch, m, v)?;
        history = truncate_log::<EpochRecord>(&epoch_log, |r| r.epoch < start_epoch)?;
        truncate_log::<StepRecord>(&step_log, |r| r.epoch < start_epoch)?;
        best = history
            .iter()
            .map(|e| (e.epoch, selection_score(e)))
            .fold(None, |acc, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        log::info!("resuming {} after epoch {start_epoch}", run_dir.display());
    } else {
        truncate_log::<StepRecord>(&step_log, |_| false)?;
        truncate_log::<EpochRecord>(&epoch_log, |_| false)?;
    }
    fs::write(run_dir.join(CONFIG_COPY), cfg.to_toml()).map_err(|e| Error::io(run_dir, e))?;
    log::info!(
        "{} parameters, {} training scenes, {} validation scenes",
        model.params().num_scalars(),
        train_set.len(),
        val_set.as_ref().map_or(0, Vec::len)
    );

    for epoch in start_epoch..cfg.train.epochs {
        let started = Instant::now();
        opt.set_epoch(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, "shuffle", epoch as u64));
        let mut reports = Vec::new();
        let mut rows = Vec::new();
        for chunk in order.chunks(cfg.train.batch_size) {
            let records = train_set.records(chunk)?;
            let batch: Vec<_> = records.iter().collect();
            let report = training_step(&model, &mut opt, &batch, &cfg.cost, &cfg.loss)?;
            rows.push(StepRecord {
                epoch,
                step: opt.steps(),
                components: report,
                lr: lrs(&opt),
            });
            if opt.steps() % 50 == 0 {
                log::debug!("step {} loss {:.4}", opt.steps(), report.total);
            }
            reports.push(report);
        }
        append_jsonl(&step_log, &rows)?;

        let is_eval_epoch = (epoch + 1) % cfg.train.eval_every == 0 || epoch + 1 == cfg.train.epochs;
        let val = match &val_set {
            Some(v) if is_eval_epoch => Some(evaluate_model(&model, v, &cfg.eval, cfg.train.batch_size)?.0),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            mean: LossReport::mean(&reports),
            val,
        };
        append_jsonl(&epoch_log, std::slice::from_ref(&record))?;
        log::info!(
            "epoch {}/{} loss {:.4} {} ({:.0}s)",
            epoch + 1,
            cfg.train.epochs,
            record.mean.total,
            val.and_then(|v| v.hgf_map).map_or(String::new(), |m| format!("val mAP {m:.4}")),
            started.elapsed().as_secs_f64()
        );

        let score = selection_score(&record);
        let improved = (val_set.is_none() || val.is_some()) && best.is_none_or(|(_, b)| score > b);
        if improved {
            best = Some((epoch, score));
        }
        let meta = CheckpointMeta {
            config: cfg.model.clone(),
            seed: cfg.seed,
            epoch: epoch + 1,
            step: opt.steps(),
            best_metric: best.map(|b| b.1),
            extra: serde_json::json!({ "run": cfg, "best_epoch": best.map(|b| b.0) }),
        };
        let ck = Checkpoint::capture(&model, meta, &opt.state_tensors())?;
        let ck_dir = run_dir.join("checkpoints");
        ck.save(&ck_dir.join(epoch_checkpoint_name(epoch + 1)))?;
        ck.save(&last)?;
        if improved {
            ck.save(&run_dir.join(BEST_CHECKPOINT))?;
        }
        if cfg.train.keep_checkpoints > 0 && epoch + 1 > cfg.train.keep_checkpoints {
            let old = ck_dir.join(epoch_checkpoint_name(epoch + 1 - cfg.train.keep_checkpoints));
            if old.exists() {
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        history.push(record);
    }

    Ok(TrainSummary {
        run_dir: run_dir.to_path_buf(),
        epochs: history,
        best_epoch: best.map(|b| b.0),
    })
}

/// Reads a run's epoch log.
pub fn read_epoch_log(run_dir: &Path) -> Result<Vec<EpochRecord>> {
    read_jsonl(&run_dir.join(EPOCH_LOG))
}

/// Reads a run's step log.
pub fn read_step_log(run_dir: &Path) -> Result<Vec<StepRecord>> {
    read_jsonl(&run_dir.join(STEP_LOG))
}

/// Run config stored in a checkpoint by `train`, if any.
pub fn stored_run_config(ck: &Checkpoint) -> Option<RunConfig> {
    serde_json::from_value(ck.meta.extra.get("run")?.clone()).ok()
}

