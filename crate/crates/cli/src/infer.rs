//! `mde complete` and `mde resample`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mde_core::dataio::{write_png, write_png_grid, ImageDataset};
use mde_core::maskgen::{make_mask, Task};
use mde_core::metrics::MetricReport;
use mde_core::models::Generator;
use mde_core::trainer::{derived_rng, load_generator, TrainConfig};
use mde_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Source};
use crate::settings::{Resolved, RunManifest, Settings};
use crate::UsageError;

/// Checkpoint, its generator, and the task and ratio the command masks with.
pub struct Loaded {
    pub config: TrainConfig,
    pub gen: Generator<f32>,
    pub task: Task,
    pub ratio: f64,
}

/// Loads the checkpoint and fills `task`, `col_visible` and `ratio` from it
/// when they were left unset.
pub fn load_model(r: &mut Resolved) -> Result<Loaded> {
    let path = r.path("checkpoint")?;
    let (config, gen) = load_generator(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if r.str("task").is_empty() {
        r.set("task", config.task.short_name());
    }
    if r.str("ratio").is_empty() {
        r.set("ratio", config.ratio);
    }
    let k: u8 = r.parse("col_visible")?;
    let task = Task::parse(r.str("task"), Some(k))?;
    r.set("task", task.short_name());
    let ratio: f64 = r.parse("ratio")?;
    Ok(Loaded { config, gen, task, ratio })
}

fn load_input(r: &Resolved, model: &Loaded, n: usize) -> Result<ImageDataset> {
    let spec = r.str("input");
    if spec.is_empty() {
        bail!(UsageError("missing required setting `input`".into()));
    }
    data::load(
        &Source::parse(spec)?,
        n,
        r.parse("input_seed")?,
        model.config.model.width,
        model.config.model.height,
        r.parse("size_mismatch")?,
    )
}

fn mask_one(model: &Loaded, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let m = &model.config.model;
    Ok(make_mask(model.task, rng, model.ratio, m.width, m.height, 1)?.mask)
}

/// Completes one `[3,H,W]` image under a `[1,3,H,W]` mask.
fn complete_one(gen: &Generator<f32>, image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = mask.shape().to_vec();
    let x = image.clone().reshape(shape)?;
    let masked = x.zip_map(mask, |a, b| a * b)?;
    Ok(gen.complete(&masked)?.index_first(0)?)
}

const COMPLETE_DEFAULTS: [(&str, &str); 11] = [
    ("checkpoint", ""),
    ("input", ""),
    ("n", "8"),
    ("input_seed", "0"),
    ("task", ""),
    ("col_visible", "1"),
    ("ratio", ""),
    ("seed", "0"),
    ("samples", "1"),
    ("size_mismatch", "fail"),
    ("out", "runs/complete"),
];

#[derive(Debug, Clone)]
pub struct CompleteOutcome {
    pub out_dir: PathBuf,
    /// Per input, per sample.
    pub outputs: Vec<Vec<PathBuf>>,
    pub metrics: Vec<Vec<MetricReport>>,
    pub metrics_csv: PathBuf,
}

impl CompleteOutcome {
    pub fn summary(&self) -> String {
        let flat: Vec<MetricReport> = self.metrics.iter().flatten().copied().collect();
        let mut s = format!(
            "{} inputs x {} samples written to {}",
            self.outputs.len(),
            self.outputs.first().map_or(0, Vec::len),
            self.out_dir.display()
        );
        if let Ok(mean) = MetricReport::mean(&flat) {
            let _ = write!(s, "\nmean: {}", mean.summary());
        }
        s
    }
}

fn output_name(dir: &Path, image: usize, sample: usize) -> PathBuf {
    dir.join(format!("image{image:04}_sample{sample:02}.png"))
}

pub fn complete(settings: &Settings) -> Result<CompleteOutcome> {
    let mut r = settings.resolve(&COMPLETE_DEFAULTS, &[])?;
    let samples: usize = r.parse("samples")?;
    if samples == 0 {
        bail!(UsageError("samples must be at least 1".into()));
    }
    let n: usize = r.parse("n")?;
    let seed: u64 = r.parse("seed")?;
    r.parse::<crate::data::SizePolicy>("size_mismatch")?;
    let model = load_model(&mut r)?;
    let out = r.path("out")?;
    let metrics_csv = out.join("metrics.csv");
    RunManifest::new("complete", r.clone())
        .artifact("images", out.join("image<i>_sample<k>.png"))
        .artifact("metrics", metrics_csv.clone())
        .write(&out)?;
    eprint!("{}", r.echo());

    let input = load_input(&r, &model, n)?;
    let mut rng = derived_rng(seed, 0);
    let mut csv = format!("image,sample,{}\n", MetricReport::CSV_HEADER);
    let (mut outputs, mut metrics) = (Vec::new(), Vec::new());
    for (i, img) in input.images.iter().enumerate() {
        let (mut paths, mut reports) = (Vec::new(), Vec::new());
        for k in 0..samples {
            let mask = mask_one(&model, &mut rng)?;
            let completed = complete_one(&model.gen, img, &mask)?;
            let path = output_name(&out, i, k);
            write_png(&completed, &path)?;
            let rep = MetricReport::compute(&completed, img, &mask.index_first(0)?)?;
            let _ = writeln!(csv, "{i},{k},{}", rep.csv_row());
            paths.push(path);
            reports.push(rep);
        }
        outputs.push(paths);
        metrics.push(reports);
    }
    std::fs::write(&metrics_csv, csv).with_context(|| format!("writing {}", metrics_csv.display()))?;
    Ok(CompleteOutcome {
        out_dir: out,
        outputs,
        metrics,
        metrics_csv,
    })
}

const RESAMPLE_DEFAULTS: [(&str, &str); 11] = [
    ("checkpoint", ""),
    ("input", ""),
    ("index", "0"),
    ("input_seed", "0"),
    ("task", ""),
    ("col_visible", "1"),
    ("ratio", ""),
    ("seed", "0"),
    ("steps", "10"),
    ("size_mismatch", "fail"),
    ("out", "runs/resample"),
];

#[derive(Debug, Clone)]
pub struct ResampleOutcome {
    /// The original followed by one image per round.
    pub frames: Vec<Tensor<f32>>,
    pub grid: PathBuf,
}

/// x_0 is the input; x_t = G(M_t * x_{t-1}) with a fresh mask every round.
pub fn resample(settings: &Settings) -> Result<ResampleOutcome> {
    let mut r = settings.resolve(&RESAMPLE_DEFAULTS, &[])?;
    let steps: usize = r.parse("steps")?;
    if steps == 0 {
        bail!(UsageError("steps must be at least 1".into()));
    }
    let index: usize = r.parse("index")?;
    let seed: u64 = r.parse("seed")?;
    r.parse::<crate::data::SizePolicy>("size_mismatch")?;
    let model = load_model(&mut r)?;
    let out = r.path("out")?;
    let grid = out.join("resample.png");
    RunManifest::new("resample", r.clone())
        .artifact("grid", grid.clone())
        .write(&out)?;
    eprint!("{}", r.echo());

    let input = load_input(&r, &model, index + 1)?;
    let x0 = input
        .images
        .get(index)
        .ok_or_else(|| UsageError(format!("input has {} images; index {index} is out of range", input.len())))?
        .clone();
    let mut rng = derived_rng(seed, 0);
    let mut frames = vec![x0];
    for _ in 0..steps {
        let mask = mask_one(&model, &mut rng)?;
        let next = complete_one(&model.gen, frames.last().expect("non-empty"), &mask)?;
        frames.push(next);
    }
    write_png_grid(&frames, frames.len(), &grid)?;
    Ok(ResampleOutcome { frames, grid })
}
