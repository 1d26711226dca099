//! `mde eval`: the train-task by test-task matrix and the six targeted occlusions.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use mde_core::dataio::ImageDataset;
use mde_core::maskgen::{make_mask, occlusion_template, MaskBatch, Occlusion, Task};
use mde_core::metrics::MetricReport;
use mde_core::models::Generator;
use mde_core::trainer::{derived_rng, load_generator, TrainConfig};
use mde_core::Tensor;

use crate::data::{self, SizePolicy, Source};
use crate::settings::{RunManifest, Settings};
use crate::UsageError;

/// Printed with every occlusion report.
pub const NON_REPRODUCIBILITY: &str = "Note: published CelebA occlusion scores (for example pSNR 21.6 on the right-half \
occlusion, inception scores 18.80 to 27.28) are not reproducible at desk scale; this report is a structural check \
of the protocol on the given data.";

const DEFAULTS: [(&str, &str); 9] = [
    ("protocol", "occlusions"),
    ("checkpoint", ""),
    ("data", "synthetic:blobs"),
    ("n", "200"),
    ("data_seed", "1"),
    ("ratio", ""),
    ("seed", "0"),
    ("size_mismatch", "fail"),
    ("out", "runs/eval"),
];

const BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    TaskMatrix,
    Occlusions,
}

impl std::str::FromStr for Protocol {
    type Err = UsageError;
    fn from_str(s: &str) -> std::result::Result<Self, UsageError> {
        match s {
            "task-matrix" => Ok(Protocol::TaskMatrix),
            "occlusions" => Ok(Protocol::Occlusions),
            other => Err(UsageError(format!("protocol must be task-matrix or occlusions, got `{other}`"))),
        }
    }
}

/// One cell of a report: mean full-image pSNR and SSIM.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    /// Train task for the matrix, template name for occlusions.
    pub row: String,
    /// Test task for the matrix; empty for occlusions.
    pub col: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub protocol: Protocol,
    pub rows: Vec<EvalRow>,
    pub csv: String,
    pub table: String,
    pub csv_path: PathBuf,
}

/// Mean metrics of `gen` completing `data` under `masks`, whose `i`-th mask
/// applies to image `i` (or a single mask shared by all).
fn score(gen: &Generator<f32>, data: &ImageDataset, masks: &Tensor<f32>) -> Result<(f64, f64)> {
    let shared = masks.shape()[0] == 1;
    let mut reports = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(BATCH) {
        let truth = data.batch(chunk)?;
        let m: Vec<Tensor<f32>> = chunk
            .iter()
            .map(|&i| masks.index_first(if shared { 0 } else { i }))
            .collect::<mde_core::Result<_>>()?;
        let m = Tensor::stack(&m)?;
        let completed = gen.complete(&truth.zip_map(&m, |a, b| a * b)?)?;
        for j in 0..chunk.len() {
            reports.push(MetricReport::compute(
                &completed.index_first(j)?,
                &truth.index_first(j)?,
                &m.index_first(j)?,
            )?);
        }
    }
    let mean = MetricReport::mean(&reports)?;
    Ok((mean.psnr_full, mean.ssim))
}

fn test_masks(task: Task, seed: u64, column: usize, ratio: f64, w: usize, h: usize, n: usize) -> Result<MaskBatch> {
    Ok(make_mask(task, &mut derived_rng(seed, column as u64), ratio, w, h, n)?)
}

pub fn eval(settings: &Settings) -> Result<EvalOutcome> {
    let mut r = settings.resolve(&DEFAULTS, &[])?;
    let protocol: Protocol = r.parse("protocol")?;
    let paths: Vec<PathBuf> = r
        .str("checkpoint")
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty() && *p != "none")
        .map(PathBuf::from)
        .collect();
    if paths.is_empty() {
        bail!(UsageError("missing required setting `checkpoint`".into()));
    }
    if protocol == Protocol::Occlusions && paths.len() != 1 {
        bail!(UsageError("the occlusion protocol evaluates exactly one checkpoint".into()));
    }
    let policy: SizePolicy = r.parse("size_mismatch")?;
    let n: usize = r.parse("n")?;
    if n == 0 {
        bail!(UsageError("n must be at least 1".into()));
    }
    let seed: u64 = r.parse("seed")?;
    let data_seed: u64 = r.parse("data_seed")?;
    let source = Source::parse(r.str("data"))?;

    let models: Vec<(TrainConfig, Generator<f32>)> = paths
        .iter()
        .map(|p| load_generator(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .collect::<Result<_>>()?;
    let (w, h) = (models[0].0.model.width, models[0].0.model.height);
    if models.iter().any(|(c, _)| (c.model.width, c.model.height) != (w, h)) {
        bail!(UsageError("all checkpoints must share one image size".into()));
    }
    if r.str("ratio").is_empty() {
        r.set("ratio", models[0].0.ratio);
    }
    let ratio: f64 = r.parse("ratio")?;
    let out = r.path("out")?;
    let csv_path = out.join("report.csv");
    RunManifest::new("eval", r.clone())
        .artifact("csv", csv_path.clone())
        .artifact("table", out.join("report.txt"))
        .write(&out)?;
    eprint!("{}", r.echo());

    let data = data::load(&source, n, data_seed, w, h, policy)?;
    let mut rows = Vec::new();
    match protocol {
        Protocol::TaskMatrix => {
            let masks: Vec<(Task, MaskBatch)> = Task::ALL
                .iter()
                .enumerate()
                .map(|(c, &t)| Ok((t, test_masks(t, seed, c, ratio, w, h, data.len())?)))
                .collect::<Result<_>>()?;
            for (cfg, gen) in &models {
                for (t, m) in &masks {
                    let (psnr, ssim) = score(gen, &data, &m.mask)?;
                    rows.push(EvalRow {
                        row: cfg.task.short_name(),
                        col: t.short_name(),
                        psnr,
                        ssim,
                    });
                }
            }
        }
        Protocol::Occlusions => {
            let gen = &models[0].1;
            for kind in Occlusion::ALL {
                let (psnr, ssim) = score(gen, &data, &occlusion_template(kind, w, h)?.mask)?;
                rows.push(EvalRow {
                    row: kind.name().to_string(),
                    col: String::new(),
                    psnr,
                    ssim,
                });
            }
        }
    }

    let (csv, table) = render(protocol, &rows);
    std::fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    std::fs::write(out.join("report.txt"), &table)?;
    Ok(EvalOutcome {
        protocol,
        rows,
        csv,
        table,
        csv_path,
    })
}

fn render(protocol: Protocol, rows: &[EvalRow]) -> (String, String) {
    let mut csv = String::new();
    let mut table = String::new();
    match protocol {
        Protocol::TaskMatrix => {
            csv.push_str("train_task,test_task,psnr,ssim\n");
            let mut cols: Vec<&str> = Vec::new();
            for r in rows {
                let _ = writeln!(csv, "{},{},{},{}", r.row, r.col, r.psnr, r.ssim);
                if !cols.contains(&r.col.as_str()) {
                    cols.push(&r.col);
                }
            }
            let _ = write!(table, "{:<10}", "train\\test");
            for c in &cols {
                let _ = write!(table, " {c:>15}");
            }
            table.push('\n');
            for chunk in rows.chunks(cols.len().max(1)) {
                let _ = write!(table, "{:<10}", chunk[0].row);
                for r in chunk {
                    let _ = write!(table, " {:>7.2}/{:<7.4}", r.psnr, r.ssim);
                }
                table.push('\n');
            }
            table.push_str("cells: full-image pSNR (dB) / SSIM\n");
        }
        Protocol::Occlusions => {
            csv.push_str("occlusion,psnr,ssim\n");
            let _ = writeln!(table, "{:<12} {:>10} {:>8}", "occlusion", "pSNR (dB)", "SSIM");
            for r in rows {
                let _ = writeln!(csv, "{},{},{}", r.row, r.psnr, r.ssim);
                let _ = writeln!(table, "{:<12} {:>10.3} {:>8.4}", r.row, r.psnr, r.ssim);
            }
            let _ = writeln!(table, "{NON_REPRODUCIBILITY}");
        }
    }
    (csv, table)
}
