//! Alternating discriminator / generator optimization.
//!
//! One training step draws a batch from the epoch's shuffled order, samples
//! fresh masks, updates the discriminator on real and generated images, then
//! updates the generator against the freshly updated (and frozen) discriminator.
//!
//! Randomness is split into independent ChaCha8 streams of the run seed: the
//! main stream (masks), one for each network's initialization, and one per
//! epoch (shuffle order and decoy boxes). Epoch plans are therefore a pure
//! function of `(seed, epoch)` and a checkpoint only has to carry the main stream.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::{Archive, Entry, RngState};
use crate::dataio::ImageDataset;
use crate::error::{Error, Result};
use crate::losses::{
    boxes_tensor, loss_completion, loss_disc_adv, loss_gen_adv, loss_hns_disc, loss_hns_gen, loss_perceptual,
    loss_reconstruction, loss_total_gen, Ablation, ConvFeatures, FeatureExtractor, GenTerms, HnsNorm,
    LossWeights,
};
use crate::maskgen::{make_mask, normalize_box, sample_rec_mask, NormalizedBox, Task, CHANNELS};
use crate::models::{Bound, Discriminator, Generator, Mode, ModelConfig, ParamSet};
use crate::optim::{lr_schedule, Adam, AdamConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

const STREAM_MAIN: u64 = 0;
const STREAM_GEN_INIT: u64 = 1;
const STREAM_DISC_INIT: u64 = 2;
const STREAM_EPOCH_BASE: u64 = 1 << 32;

/// Independent stream `stream` of the run seed.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub levels: usize,
    pub width: usize,
    pub seed: u64,
    /// Pretrained `phi{l}` weights; random fixed weights when absent.
    pub archive: Option<PathBuf>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            levels: 5,
            width: 8,
            seed: 1234,
            archive: None,
        }
    }
}

impl FeatureConfig {
    pub fn build(&self) -> Result<ConvFeatures<f32>> {
        match &self.archive {
            Some(p) => ConvFeatures::load(p),
            None => ConvFeatures::random(self.levels, self.width, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: Task,
    pub ratio: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub adam: AdamConfig,
    pub anneal_power: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    /// Hide-and-seek game on or off; only valid for RE and REC.
    pub hns: bool,
    pub hns_norm: HnsNorm,
    /// Checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub features: FeatureConfig,
}

impl Default for TrainConfig {
    /// Desk scale: 32x32, batch 8, 2 000 updates, far below the full 300k x 24 schedule.
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            task: Task::Rec,
            ratio: 0.1,
            batch_size: 8,
            steps: 2000,
            lr_gen: 2e-4,
            lr_disc: 2e-5,
            adam: AdamConfig::default(),
            anneal_power: 1.0,
            seed: 0,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            hns: true,
            hns_norm: HnsNorm::L1,
            checkpoint_every: 0,
            features: FeatureConfig::default(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

impl TrainConfig {
    /// Defaults for `task`, with hide-and-seek enabled exactly where it applies.
    pub fn for_task(task: Task) -> Self {
        TrainConfig {
            task,
            hns: task.supports_hide_and_seek(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !matches!(self.task, Task::Colorization { .. }) && !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("ratio S = {} must lie in (0,1)", self.ratio)));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be >= 1".into()));
        }
        if !(self.lr_gen > 0.0 && self.lr_disc > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(self.anneal_power > 0.0) {
            return Err(Error::Config("anneal_power must be > 0".into()));
        }
        self.adam.validate()?;
        self.weights.validate()?;
        if self.hns && !self.task.supports_hide_and_seek() {
            return Err(Error::Config(format!(
                "hns: hide-and-seek applies only to the re and rec tasks, not `{}`",
                self.task
            )));
        }
        if self.features.archive.is_none() && self.features.levels != self.weights.layer_weights.len() {
            return Err(Error::Config(format!(
                "feature_levels = {} but {} layer_weights",
                self.features.levels,
                self.weights.layer_weights.len()
            )));
        }
        Ok(())
    }

    /// Effective loss weights after ablation and task applicability.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.ablated(&self.ablation);
        if !self.hns {
            w.lambda_hns = 0.0;
        }
        w
    }

    /// Every setting as ordered `key = value` pairs.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let w = &self.weights;
        let (task, k) = match self.task {
            Task::Colorization { visible } => ("col".to_string(), visible),
            t => (t.short_name(), 1),
        };
        vec![
            ("task", task),
            ("col_visible", k.to_string()),
            ("ratio", self.ratio.to_string()),
            ("width", m.width.to_string()),
            ("height", m.height.to_string()),
            ("base_width", m.base_width.to_string()),
            ("depth", m.depth.to_string()),
            ("bottleneck", m.bottleneck.to_string()),
            ("leaky_slope", m.leaky_slope.to_string()),
            ("coord_channels", m.coord_channels.to_string()),
            ("bn_eps", m.bn_eps.to_string()),
            ("bn_momentum", m.bn_momentum.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("lr_gen", self.lr_gen.to_string()),
            ("lr_disc", self.lr_disc.to_string()),
            ("adam_beta1", self.adam.beta1.to_string()),
            ("adam_beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("anneal_power", self.anneal_power.to_string()),
            ("seed", self.seed.to_string()),
            ("lambda_compl", w.lambda_compl.to_string()),
            ("lambda_adv", w.lambda_adv.to_string()),
            ("lambda_hns", w.lambda_hns.to_string()),
            ("lambda_pixel_compl", w.lambda_pixel_compl.to_string()),
            (
                "layer_weights",
                w.layer_weights.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            ),
            ("no_perceptual", self.ablation.no_perceptual.to_string()),
            ("no_adversarial", self.ablation.no_adversarial.to_string()),
            ("no_hns", self.ablation.no_hns.to_string()),
            ("hns", self.hns.to_string()),
            ("hns_norm", self.hns_norm.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("feature_levels", self.features.levels.to_string()),
            ("feature_width", self.features.width.to_string()),
            ("feature_seed", self.features.seed.to_string()),
            (
                "feature_archive",
                self.features
                    .archive
                    .as_ref()
                    .map_or("none".to_string(), |p| p.display().to_string()),
            ),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().to_pairs().into_iter().map(|(k, _)| k).collect()
    }

    /// Applies one setting; unknown keys and malformed values are config errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "task" => {
                let k = match self.task {
                    Task::Colorization { visible } => Some(visible),
                    _ => None,
                };
                self.task = Task::parse(v, k).map_err(|e| Error::Config(format!("task: {e}")))?;
            }
            "col_visible" => {
                let k: u8 = parse_num(key, v)?;
                if let Task::Colorization { .. } = self.task {
                    self.task = Task::Colorization { visible: k };
                }
                if !(1..=2).contains(&k) {
                    return Err(Error::Config(format!("col_visible must be 1 or 2, got {k}")));
                }
            }
            "ratio" => self.ratio = parse_num(key, v)?,
            "width" => self.model.width = parse_num(key, v)?,
            "height" => self.model.height = parse_num(key, v)?,
            "base_width" => self.model.base_width = parse_num(key, v)?,
            "depth" => self.model.depth = parse_num(key, v)?,
            "bottleneck" => self.model.bottleneck = parse_num(key, v)?,
            "leaky_slope" => self.model.leaky_slope = parse_num(key, v)?,
            "coord_channels" => self.model.coord_channels = parse_bool(key, v)?,
            "bn_eps" => self.model.bn_eps = parse_num(key, v)?,
            "bn_momentum" => self.model.bn_momentum = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "lr_gen" => self.lr_gen = parse_num(key, v)?,
            "lr_disc" => self.lr_disc = parse_num(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam.eps = parse_num(key, v)?,
            "anneal_power" => self.anneal_power = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "lambda_compl" => self.weights.lambda_compl = parse_num(key, v)?,
            "lambda_adv" => self.weights.lambda_adv = parse_num(key, v)?,
            "lambda_hns" => self.weights.lambda_hns = parse_num(key, v)?,
            "lambda_pixel_compl" => self.weights.lambda_pixel_compl = parse_num(key, v)?,
            "layer_weights" => {
                self.weights.layer_weights = v
                    .split(',')
                    .map(|x| parse_num(key, x.trim()))
                    .collect::<Result<_>>()?
            }
            "no_perceptual" => self.ablation.no_perceptual = parse_bool(key, v)?,
            "no_adversarial" => self.ablation.no_adversarial = parse_bool(key, v)?,
            "no_hns" => self.ablation.no_hns = parse_bool(key, v)?,
            "hns" => self.hns = parse_bool(key, v)?,
            "hns_norm" => self.hns_norm = v.parse().map_err(|e: Error| Error::Config(format!("hns_norm: {e}")))?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "feature_levels" => self.features.levels = parse_num(key, v)?,
            "feature_width" => self.features.width = parse_num(key, v)?,
            "feature_seed" => self.features.seed = parse_num(key, v)?,
            "feature_archive" => {
                self.features.archive = match v {
                    "" | "none" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            other => return Err(Error::Config(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }

    /// Builds a config from ordered settings. When `hns` is not given it
    /// follows the task (on for RE/REC, off otherwise).
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut hns_given = false;
        let pairs: Vec<_> = pairs.into_iter().collect();
        // the task must be known before col_visible is applied
        for &(k, v) in pairs.iter().filter(|(k, _)| *k == "task") {
            cfg.set(k, v)?;
        }
        for &(k, v) in pairs.iter().filter(|(k, _)| *k != "task") {
            hns_given |= k == "hns";
            cfg.set(k, v)?;
        }
        if !hns_given {
            cfg.hns = cfg.task.supports_hide_and_seek();
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(parse_kv_text(text)?.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are ignored.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Renames a non-finite failure after the loss term it happened in.
fn in_term<T>(r: Result<T>, term: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(op) => Error::NonFinite(format!("{term} (in {op})")),
        other => other,
    })
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Option<Var>, term: &str) -> Result<f64> {
    match v {
        None => Ok(0.0),
        Some(v) => {
            let x = tape.value(v).item().to_f64().unwrap_or(f64::NAN);
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::NonFinite(term.to_string()))
            }
        }
    }
}

/// Discriminator objective terms on one batch.
#[derive(Debug, Clone, Copy)]
pub struct DiscTerms {
    pub adv: Option<Var>,
    pub hns: Option<Var>,
    pub total: Var,
}

/// `λ_adv L_disc(real, fake) + λ_hns L_seek(fake)`; the seek term uses fakes only.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_objective<T: Scalar>(
    tape: &mut Tape<T>,
    disc: &Discriminator<T>,
    db: &Bound,
    real: Var,
    fake: Var,
    true_boxes: Option<Var>,
    w: &LossWeights,
    norm: HnsNorm,
) -> Result<DiscTerms> {
    let fake_out = disc.forward(tape, db, fake)?;
    let mut total: Option<Var> = None;
    let mut add = |tape: &mut Tape<T>, term: Var, lam: f64| -> Result<()> {
        let t = tape.scale(term, lam)?;
        total = Some(match total {
            Some(prev) => tape.add(prev, t)?,
            None => t,
        });
        Ok(())
    };
    let adv = if w.lambda_adv > 0.0 {
        let real_out = in_term(disc.forward(tape, db, real), "loss_adv_d")?;
        let l = in_term(loss_disc_adv(tape, real_out.realness, fake_out.realness), "loss_adv_d")?;
        add(tape, l, w.lambda_adv)?;
        Some(l)
    } else {
        None
    };
    let hns = match (true_boxes, w.lambda_hns > 0.0) {
        (Some(tb), true) => {
            let l = in_term(loss_hns_disc(tape, fake_out.boxes, tb, norm), "loss_hns_d")?;
            add(tape, l, w.lambda_hns)?;
            Some(l)
        }
        _ => None,
    };
    let total = total.ok_or_else(|| Error::Contract("discriminator objective has no active term".into()))?;
    Ok(DiscTerms { adv, hns, total })
}

/// Generator objective on an already generated image `gen`.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Scalar>(
    tape: &mut Tape<T>,
    gen: Var,
    orig: Var,
    mask: Var,
    disc: &Discriminator<T>,
    db: &Bound,
    extractor: &dyn FeatureExtractor<T>,
    decoys: Option<Var>,
    w: &LossWeights,
    norm: HnsNorm,
) -> Result<(GenTerms, Var)> {
    let rec = in_term(loss_reconstruction(tape, gen, orig, mask), "loss_rec")?;
    let compl_vgg = if w.lambda_compl > 0.0 {
        Some(in_term(
            loss_perceptual(tape, gen, orig, extractor, &w.layer_weights),
            "loss_compl_vgg",
        )?)
    } else {
        None
    };
    let pixel_compl = if w.lambda_pixel_compl > 0.0 {
        Some(in_term(loss_completion(tape, gen, orig, mask), "loss_compl")?)
    } else {
        None
    };
    let hns_on = decoys.is_some() && w.lambda_hns > 0.0;
    let (adv, hns) = if w.lambda_adv > 0.0 || hns_on {
        let out = in_term(disc.forward(tape, db, gen), "loss_adv_g")?;
        let adv = if w.lambda_adv > 0.0 {
            Some(in_term(loss_gen_adv(tape, out.realness), "loss_adv_g")?)
        } else {
            None
        };
        let hns = match decoys {
            Some(q) if hns_on => Some(in_term(loss_hns_gen(tape, out.boxes, q, norm), "loss_hns_g")?),
            _ => None,
        };
        (adv, hns)
    } else {
        (None, None)
    };
    let terms = GenTerms {
        rec,
        compl_vgg,
        adv,
        hns,
        pixel_compl,
    };
    let total = in_term(loss_total_gen(tape, &terms, w), "loss_total")?;
    Ok((terms, total))
}

/// One decoy box triple per training image, drawn with the mask box sampler.
pub fn refresh_decoys(
    rng: &mut impl Rng,
    n: usize,
    ratio: f64,
    width: usize,
    height: usize,
) -> Result<Vec<[NormalizedBox; CHANNELS]>> {
    (0..n)
        .map(|_| Ok(sample_rec_mask(rng, ratio, width, height)?.map(|b| normalize_box(&b, width, height))))
        .collect()
}

/// Shuffle order and decoy table for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub epoch: usize,
    pub order: Vec<usize>,
    pub decoys: Vec<[NormalizedBox; CHANNELS]>,
}

impl EpochPlan {
    pub fn new(config: &TrainConfig, epoch: usize, n: usize) -> Result<Self> {
        let mut rng = derived_rng(config.seed, STREAM_EPOCH_BASE + epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let decoys = if config.hns {
            refresh_decoys(&mut rng, n, config.ratio, config.model.width, config.model.height)?
        } else {
            Vec::new()
        };
        Ok(EpochPlan { epoch, order, decoys })
    }
}

/// Per-step scalars; unweighted loss values, zero for inactive terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLog {
    pub step: usize,
    pub loss_rec: f64,
    pub loss_compl_vgg: f64,
    pub loss_adv_g: f64,
    pub loss_adv_d: f64,
    pub loss_hns_g: f64,
    pub loss_hns_d: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,loss_rec,loss_compl_vgg,loss_adv_g,loss_adv_d,loss_hns_g,loss_hns_d,lr_g,lr_d";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_rec,
            self.loss_compl_vgg,
            self.loss_adv_g,
            self.loss_adv_d,
            self.loss_hns_g,
            self.loss_hns_d,
            self.lr_g,
            self.lr_d
        )
    }
}

/// All mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub gen: Generator<f32>,
    pub disc: Discriminator<f32>,
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
    pub extractor: ConvFeatures<f32>,
    rng: ChaCha8Rng,
    step: usize,
    plan: Option<EpochPlan>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let gen = Generator::build(&config.model, &mut derived_rng(config.seed, STREAM_GEN_INIT))?;
        let disc = Discriminator::build(&config.model, &mut derived_rng(config.seed, STREAM_DISC_INIT))?;
        let extractor = config.features.build()?;
        if extractor.num_levels() != config.weights.layer_weights.len() {
            return Err(Error::Config(format!(
                "feature extractor has {} levels but {} layer_weights are configured",
                extractor.num_levels(),
                config.weights.layer_weights.len()
            )));
        }
        Ok(Trainer {
            adam_g: Adam::new(config.adam, &gen.params),
            adam_d: Adam::new(config.adam, &disc.params),
            rng: derived_rng(config.seed, STREAM_MAIN),
            step: 0,
            plan: None,
            gen,
            disc,
            extractor,
            config,
        })
    }

    /// Number of completed updates.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self, n: usize) -> Result<usize> {
        if n < self.config.batch_size {
            return Err(Error::Config(format!(
                "dataset of {n} images is smaller than batch_size {}",
                self.config.batch_size
            )));
        }
        Ok(n / self.config.batch_size)
    }

    /// The plan for the epoch containing the next step.
    pub fn epoch_plan(&mut self, n: usize) -> Result<&EpochPlan> {
        let epoch = self.step / self.steps_per_epoch(n)?;
        let stale = self
            .plan
            .as_ref()
            .is_none_or(|p| p.epoch != epoch || p.order.len() != n);
        if stale {
            self.plan = Some(EpochPlan::new(&self.config, epoch, n)?);
        }
        Ok(self.plan.as_ref().expect("plan just set"))
    }

    fn check_dataset(&self, data: &ImageDataset) -> Result<()> {
        if data.width != self.config.model.width || data.height != self.config.model.height {
            return Err(Error::Config(format!(
                "dataset is {}x{} but the model expects {}x{}",
                data.width, data.height, self.config.model.width, self.config.model.height
            )));
        }
        Ok(())
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, data: &ImageDataset) -> Result<StepLog> {
        self.check_dataset(data)?;
        let cfg = self.config.clone();
        let w = cfg.effective_weights();
        let (width, height) = (cfg.model.width, cfg.model.height);
        let t = self.step;
        let lr_g = lr_schedule(t, cfg.steps, cfg.lr_gen, cfg.anneal_power);
        let lr_d = lr_schedule(t, cfg.steps, cfg.lr_disc, cfg.anneal_power);

        let spe = self.steps_per_epoch(data.len())?;
        let k = t % spe;
        let bs = cfg.batch_size;
        let plan = self.epoch_plan(data.len())?;
        let idx: Vec<usize> = plan.order[k * bs..(k + 1) * bs].to_vec();
        let hns_on = cfg.hns && w.lambda_hns > 0.0;
        let decoys = if hns_on {
            let table: Vec<_> = idx.iter().map(|&i| plan.decoys[i]).collect();
            Some(boxes_tensor::<f32>(&table)?)
        } else {
            None
        };

        let z = data.batch(&idx)?;
        let masks = make_mask(cfg.task, &mut self.rng, cfg.ratio, width, height, bs)?;
        let true_boxes = if hns_on {
            Some(boxes_tensor::<f32>(&masks.normalized_boxes()?)?)
        } else {
            None
        };

        let mut gt = Tape::new();
        let gb = self.gen.params.bind(&mut gt, true);
        let zv = gt.constant(z.clone());
        let mv = gt.constant(masks.mask);
        let masked = gt.mul(mv, zv)?;
        let gout = self.gen.forward(&mut gt, &gb, masked, Mode::Train)?;
        let fake = gt.value(gout.image).clone();

        let mut log = StepLog {
            step: t,
            lr_g,
            lr_d,
            ..StepLog::default()
        };

        if w.lambda_adv > 0.0 || hns_on {
            let frozen = self.gen.params.checksum();
            let mut dt = Tape::new();
            let db = self.disc.params.bind(&mut dt, true);
            let real = dt.constant(z);
            let fv = dt.constant(fake);
            let tb = true_boxes.map(|b| dt.constant(b));
            let terms = discriminator_objective(&mut dt, &self.disc, &db, real, fv, tb, &w, cfg.hns_norm)?;
            log.loss_adv_d = check_finite(&dt, terms.adv, "loss_adv_d")?;
            log.loss_hns_d = check_finite(&dt, terms.hns, "loss_hns_d")?;
            let grads = dt.backward(terms.total)?;
            self.adam_d.update(&mut self.disc.params, &grads.params(), lr_d)?;
            if self.gen.params.checksum() != frozen {
                return Err(Error::Contract("generator changed during the discriminator update".into()));
            }
        }

        let frozen = self.disc.params.checksum();
        let db = self.disc.params.bind(&mut gt, false);
        let q = decoys.map(|d| gt.constant(d));
        let (terms, total) = generator_objective(
            &mut gt,
            gout.image,
            zv,
            mv,
            &self.disc,
            &db,
            &self.extractor,
            q,
            &w,
            cfg.hns_norm,
        )?;
        log.loss_rec = check_finite(&gt, Some(terms.rec), "loss_rec")?;
        log.loss_compl_vgg = check_finite(&gt, terms.compl_vgg, "loss_compl_vgg")?;
        log.loss_adv_g = check_finite(&gt, terms.adv, "loss_adv_g")?;
        log.loss_hns_g = check_finite(&gt, terms.hns, "loss_hns_g")?;
        let grads = gt.backward(total)?;
        self.adam_g.update(&mut self.gen.params, &grads.params(), lr_g)?;
        self.gen.update_running_stats(&gout.bn_stats)?;
        if self.disc.params.checksum() != frozen {
            return Err(Error::Contract("discriminator changed during the generator update".into()));
        }
        self.step += 1;
        Ok(log)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.push("config", Entry::Bytes(self.config.to_text().into_bytes()));
        a.push_set("gen.param/", &self.gen.params);
        a.push_set("gen.buffer/", &self.gen.buffers);
        a.push_set("disc.param/", &self.disc.params);
        a.push_set("adam_g.m/", &self.adam_g.m);
        a.push_set("adam_g.v/", &self.adam_g.v);
        a.push_set("adam_d.m/", &self.adam_d.m);
        a.push_set("adam_d.v/", &self.adam_d.v);
        a.push("adam_g.t", Tensor::<f64>::scalar(self.adam_g.t as f64));
        a.push("adam_d.t", Tensor::<f64>::scalar(self.adam_d.t as f64));
        a.rng = RngState::capture(&self.rng);
        a.step = self.step as u64;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let text = std::str::from_utf8(a.get_bytes("config")?)
            .map_err(|_| Error::Checkpoint("config record is not UTF-8".into()))?;
        let config = TrainConfig::from_text(text)?;
        let mut tr = Trainer::new(config)?;
        fn fill(dst: &mut ParamSet<f32>, src: ParamSet<f32>, what: &str) -> Result<()> {
            if dst.inventory() != src.inventory() {
                return Err(Error::Checkpoint(format!("{what} tensors do not match the stored config")));
            }
            *dst = src;
            Ok(())
        }
        fill(&mut tr.gen.params, a.take_set_f32("gen.param/"), "generator")?;
        fill(&mut tr.gen.buffers, a.take_set_f32("gen.buffer/"), "generator buffer")?;
        fill(&mut tr.disc.params, a.take_set_f32("disc.param/"), "discriminator")?;
        fill(&mut tr.adam_g.m, a.take_set_f32("adam_g.m/"), "optimizer")?;
        fill(&mut tr.adam_g.v, a.take_set_f32("adam_g.v/"), "optimizer")?;
        fill(&mut tr.adam_d.m, a.take_set_f32("adam_d.m/"), "optimizer")?;
        fill(&mut tr.adam_d.v, a.take_set_f32("adam_d.v/"), "optimizer")?;
        tr.adam_g.t = a.get_f64("adam_g.t")?.item() as u64;
        tr.adam_d.t = a.get_f64("adam_d.t")?.item() as u64;
        tr.rng = a.rng.restore();
        tr.step = usize::try_from(a.step).map_err(|_| Error::Checkpoint("step overflows".into()))?;
        Ok(tr)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Generator and its config, read back from a training checkpoint.
pub fn load_generator(path: &Path) -> Result<(TrainConfig, Generator<f32>)> {
    let a = Archive::load(path)?;
    let tr = Trainer::from_archive(&a)?;
    Ok((tr.config, tr.gen))
}

/// Trains only the box head (and trunk) of a discriminator to regress the
/// visible box of zero-filled RE-masked images. Returns the per-step loss.
pub fn train_seeker(
    disc: &mut Discriminator<f32>,
    data: &ImageDataset,
    ratio: f64,
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let cfg = disc.config.clone();
    let mut adam = Adam::new(AdamConfig::default(), &disc.params);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.len())).collect();
        let z = data.batch(&idx)?;
        let masks = make_mask(Task::RandomExtrapolation, rng, ratio, cfg.width, cfg.height, batch)?;
        let boxes = boxes_tensor::<f32>(&masks.normalized_boxes()?)?;
        let masked = z.zip_map(&masks.mask, |a, b| a * b)?;
        let mut tape = Tape::new();
        let db = disc.params.bind(&mut tape, true);
        let x = tape.constant(masked);
        let tb = tape.constant(boxes);
        let out = disc.forward(&mut tape, &db, x)?;
        let loss = loss_hns_disc(&mut tape, out.boxes, tb, HnsNorm::L1)?;
        trace.push(tape.value(loss).item() as f64);
        let grads = tape.backward(loss)?;
        adam.update(&mut disc.params, &grads.params(), lr)?;
    }
    Ok(trace)
}

/// Mean absolute coordinate error of the box head on `n` fresh RE masks.
pub fn seek_error(
    disc: &Discriminator<f32>,
    data: &ImageDataset,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let cfg = &disc.config;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(32) {
        let z = data.batch(chunk)?;
        let masks = make_mask(Task::RandomExtrapolation, rng, ratio, cfg.width, cfg.height, chunk.len())?;
        let truth = boxes_tensor::<f32>(&masks.normalized_boxes()?)?;
        let masked = z.zip_map(&masks.mask, |a, b| a * b)?;
        let (_, pred) = disc.evaluate(&masked)?;
        for (p, t) in pred.data().iter().zip(truth.data()) {
            total += (p - t).abs() as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
