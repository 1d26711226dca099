//! `mde train`.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mde_core::dataio::{write_png_grid, ImageDataset};
use mde_core::maskgen::{make_mask, Task};
use mde_core::trainer::{derived_rng, StepLog, TrainConfig, Trainer};
use mde_core::Tensor;

use crate::data::{self, SizePolicy, Source};
use crate::settings::{Resolved, RunManifest, Settings};
use crate::UsageError;

/// Stream for the fixed masks of the sample grids; training uses others.
pub const GRID_STREAM: u64 = 3;
/// Images shown in each sample grid.
pub const GRID_ROWS: usize = 4;

const RUN_DEFAULTS: [(&str, &str); 7] = [
    ("data", "synthetic:blobs"),
    ("data_n", "1000"),
    ("data_seed", "0"),
    ("size_mismatch", "fail"),
    ("grid_every", "500"),
    ("resume", "none"),
    ("out", "runs/train"),
];

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub csv: PathBuf,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub steps_run: usize,
    pub trainer: Trainer,
}

/// Splits settings into the training config and the run options.
pub fn resolve(settings: &Settings) -> Result<(TrainConfig, Resolved)> {
    let train_keys = TrainConfig::keys();
    let mut cfg_pairs = Vec::new();
    let mut run = Settings::default();
    for (k, v) in settings.pairs() {
        if train_keys.contains(&k.as_str()) {
            cfg_pairs.push((k.as_str(), v.as_str()));
        } else {
            run.set(k, v);
        }
    }
    let cfg = TrainConfig::from_pairs(cfg_pairs)?;
    cfg.validate()?;
    let run = run.resolve(&RUN_DEFAULTS, &[])?;
    let source = Source::parse(run.str("data"))?;
    if source.is_idx() && cfg.task != Task::RandomExtrapolation {
        bail!(UsageError(format!(
            "IDX (MNIST) data is trained with the re task only, got task {}",
            cfg.task
        )));
    }
    run.parse::<SizePolicy>("size_mismatch")?;
    run.parse::<usize>("data_n")?;
    run.parse::<u64>("data_seed")?;
    run.parse::<usize>("grid_every")?;
    let mut all = Resolved {
        pairs: cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    };
    all.extend(run.pairs);
    Ok((cfg, all))
}

fn grid_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("grid_{step:06}.png"))
}

/// Rows of mask | masked | completed | ground truth for fixed images and masks.
pub fn write_grid(trainer: &Trainer, data: &ImageDataset, path: &Path) -> Result<()> {
    let cfg = &trainer.config;
    let n = GRID_ROWS.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let truth = data.batch(&idx)?;
    let masks = make_mask(
        cfg.task,
        &mut derived_rng(cfg.seed, GRID_STREAM),
        cfg.ratio,
        cfg.model.width,
        cfg.model.height,
        n,
    )?;
    let masked = truth.zip_map(&masks.mask, |a, b| a * b)?;
    let completed = trainer.gen.complete(&masked)?;
    let mut cells: Vec<Tensor<f32>> = Vec::with_capacity(4 * n);
    for i in 0..n {
        cells.push(masks.mask.index_first(i)?);
        cells.push(masked.index_first(i)?);
        cells.push(completed.index_first(i)?);
        cells.push(truth.index_first(i)?);
    }
    write_png_grid(&cells, 4, path)?;
    Ok(())
}

pub fn train(settings: &Settings) -> Result<TrainOutcome> {
    let (cfg, resolved) = resolve(settings)?;
    let out = resolved.path("out")?;
    let csv = out.join("train.csv");
    let checkpoint = out.join("checkpoint.mde");
    let resume = match resolved.str("resume") {
        "" | "none" => None,
        p => Some(PathBuf::from(p)),
    };
    let manifest = RunManifest::new("train", resolved.clone())
        .artifact("csv", csv.clone())
        .artifact("checkpoint", checkpoint.clone())
        .artifact("grids", out.join("grid_<step>.png"))
        .write(&out)?;
    eprint!("{}", resolved.echo());

    let source = Source::parse(resolved.str("data"))?;
    let data = data::load(
        &source,
        resolved.parse("data_n")?,
        resolved.parse("data_seed")?,
        cfg.model.width,
        cfg.model.height,
        resolved.parse("size_mismatch")?,
    )?;
    let grid_every: usize = resolved.parse("grid_every")?;

    let mut trainer = match &resume {
        Some(p) => {
            let t = Trainer::load_checkpoint(p).with_context(|| format!("resuming from {}", p.display()))?;
            if t.config != cfg {
                bail!(UsageError(format!(
                    "checkpoint {} was written with different settings; resume needs identical settings",
                    p.display()
                )));
            }
            t
        }
        None => Trainer::new(cfg.clone())?,
    };
    let start = trainer.step();

    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&csv)
        .with_context(|| format!("opening {}", csv.display()))?;
    let mut log = BufWriter::new(file);
    if resume.is_none() {
        writeln!(log, "{}", StepLog::CSV_HEADER)?;
    }

    while trainer.step() < cfg.steps {
        let row = trainer.train_step(&data)?;
        writeln!(log, "{}", row.csv_row())?;
        let done = trainer.step();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            log.flush()?;
            trainer.save_checkpoint(&out.join(format!("checkpoint_{done:06}.mde")))?;
        }
        if grid_every > 0 && done % grid_every == 0 {
            write_grid(&trainer, &data, &grid_path(&out, done))?;
        }
        if done % 100 == 0 {
            eprintln!("step {done}/{}: rec {:.5}", cfg.steps, row.loss_rec);
        }
    }
    log.flush()?;
    trainer.save_checkpoint(&checkpoint)?;
    let last = grid_path(&out, trainer.step());
    if !last.exists() {
        write_grid(&trainer, &data, &last)?;
    }
    Ok(TrainOutcome {
        out_dir: out,
        csv,
        checkpoint,
        manifest,
        steps_run: trainer.step() - start,
        trainer,
    })
}
