//! Training objectives, built on the tape so that every term is differentiable.
//!
//! All batch losses divide by the batch size `N` (the leading dimension).

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maskgen::{NormalizedBox, CHANNELS};
use crate::models::{ParamSet, KERNEL, PAD};
use crate::tape::{Tape, Var};
use crate::tensor::{s, Scalar, Tensor};

/// Probabilities are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` before the log.
pub const LOG_CLAMP: f64 = 1e-7;

pub const DEFAULT_LAYER_WEIGHTS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Weight of the perceptual completion term.
    pub lambda_compl: f64,
    pub lambda_adv: f64,
    pub lambda_hns: f64,
    /// Weight of a pixel-space completion term on the masked region. Not part
    /// of the default objective; zero unless a recipe asks for it.
    pub lambda_pixel_compl: f64,
    /// Per-level perceptual weights.
    pub layer_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_compl: 2e-5,
            lambda_adv: 1e-2,
            lambda_hns: 1e-2,
            lambda_pixel_compl: 0.0,
            layer_weights: DEFAULT_LAYER_WEIGHTS.to_vec(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("lambda_compl", self.lambda_compl),
            ("lambda_adv", self.lambda_adv),
            ("lambda_hns", self.lambda_hns),
            ("lambda_pixel_compl", self.lambda_pixel_compl),
        ];
        for (name, v) in scalars {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if self.layer_weights.is_empty() || self.layer_weights.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("bad perceptual layer weights {:?}", self.layer_weights)));
        }
        if self.layer_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("perceptual layer weights sum to zero".into()));
        }
        Ok(())
    }

    /// Copy with the ablated terms' weights set to zero.
    pub fn ablated(&self, ablation: &Ablation) -> LossWeights {
        let mut w = self.clone();
        if ablation.no_perceptual {
            w.lambda_compl = 0.0;
        }
        if ablation.no_adversarial {
            w.lambda_adv = 0.0;
        }
        if ablation.no_hns {
            w.lambda_hns = 0.0;
        }
        w
    }
}

/// Switches that remove weighted terms from the generator objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_perceptual: bool,
    pub no_adversarial: bool,
    pub no_hns: bool,
}

/// Norm applied to each 4-coordinate box error in the hide-and-seek losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum HnsNorm {
    #[default]
    L1,
    L2,
}

impl FromStr for HnsNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(HnsNorm::L1),
            "l2" => Ok(HnsNorm::L2),
            other => Err(Error::Parameter(format!("unknown norm `{other}` (l1|l2)"))),
        }
    }
}

impl std::fmt::Display for HnsNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HnsNorm::L1 => "l1",
            HnsNorm::L2 => "l2",
        })
    }
}

fn batch_len<T: Scalar>(tape: &Tape<T>, v: Var) -> usize {
    tape.shape(v)[0]
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, vars: &[Var]) -> Result<()> {
    let first = tape.shape(vars[0]);
    for &v in &vars[1..] {
        if tape.shape(v) != first {
            return Err(Error::dim(op, format!("{:?} vs {:?}", first, tape.shape(v))));
        }
    }
    Ok(())
}

/// `sum(x) / n`.
fn mean_over_batch<T: Scalar>(tape: &mut Tape<T>, x: Var, n: usize) -> Result<Var> {
    let s = tape.sum(x)?;
    tape.scale(s, 1.0 / n as f64)
}

/// `-(1/N) sum[log d_real + log(1 - d_fake)]`.
pub fn loss_disc_adv<T: Scalar>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    same_shape(tape, "loss_disc_adv", &[d_real, d_fake])?;
    let n = batch_len(tape, d_real);
    let lr = tape.clamp_log(d_real, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
    let one_minus = tape.affine(d_fake, -1.0, 1.0)?;
    let lf = tape.clamp_log(one_minus, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
    let both = tape.add(lr, lf)?;
    let m = mean_over_batch(tape, both, n)?;
    tape.scale(m, -1.0)
}

/// `-(1/N) sum log d_fake`.
pub fn loss_gen_adv<T: Scalar>(tape: &mut Tape<T>, d_fake: Var) -> Result<Var> {
    let n = batch_len(tape, d_fake);
    let lf = tape.clamp_log(d_fake, LOG_CLAMP, 1.0 - LOG_CLAMP)?;
    let m = mean_over_batch(tape, lf, n)?;
    tape.scale(m, -1.0)
}

/// `(1/N) sum ||w * (gen - orig)||^2`.
fn weighted_l2<T: Scalar>(
    tape: &mut Tape<T>,
    op: &'static str,
    gen: Var,
    orig: Var,
    weight: Var,
) -> Result<Var> {
    same_shape(tape, op, &[gen, orig, weight])?;
    let n = batch_len(tape, gen);
    let d = tape.sub(gen, orig)?;
    let d = tape.mul(weight, d)?;
    let sq = tape.square(d)?;
    mean_over_batch(tape, sq, n)
}

/// Squared error on the masked-out entries (`mask == 0`).
pub fn loss_completion<T: Scalar>(tape: &mut Tape<T>, gen: Var, orig: Var, mask: Var) -> Result<Var> {
    let inv = tape.affine(mask, -1.0, 1.0)?;
    weighted_l2(tape, "loss_completion", gen, orig, inv)
}

/// Squared error on the visible entries (`mask == 1`).
pub fn loss_reconstruction<T: Scalar>(tape: &mut Tape<T>, gen: Var, orig: Var, mask: Var) -> Result<Var> {
    weighted_l2(tape, "loss_reconstruction", gen, orig, mask)
}

/// A fixed mapping from an image to an ordered list of feature maps.
pub trait FeatureExtractor<T: Scalar> {
    fn num_levels(&self) -> usize;
    fn features(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>>;
}

/// Features are the image itself; reduces the perceptual loss to a pixel loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityFeatures;

impl<T: Scalar> FeatureExtractor<T> for IdentityFeatures {
    fn num_levels(&self) -> usize {
        1
    }

    fn features(&self, _tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        Ok(vec![image])
    }
}

/// Stack of 3x3 convolutions with leaky ReLU; level 0 keeps the resolution and
/// each later level halves it. The activations after every level are the features.
///
/// Tensors are named `phi{l}.w` (`[out, in, 3, 3]`) and `phi{l}.b`.
#[derive(Debug, Clone)]
pub struct ConvFeatures<T> {
    pub params: ParamSet<T>,
    pub levels: usize,
    pub slope: f64,
}

impl<T: Scalar> ConvFeatures<T> {
    /// Random fixed weights, He-scaled, channel width `base << l`.
    pub fn random(levels: usize, base_width: usize, seed: u64) -> Result<Self> {
        if levels == 0 || base_width == 0 {
            return Err(Error::Config("feature extractor needs >= 1 level and width".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = CHANNELS;
        for l in 0..levels {
            let cout = base_width << l;
            let fan_in = cin * KERNEL * KERNEL;
            params.insert(
                format!("phi{l}.w"),
                Tensor::randn(vec![cout, cin, KERNEL, KERNEL], (2.0 / fan_in as f64).sqrt(), &mut rng),
            );
            params.insert(format!("phi{l}.b"), Tensor::zeros(vec![cout]));
            cin = cout;
        }
        Ok(ConvFeatures {
            params,
            levels,
            slope: 0.2,
        })
    }

    /// Wraps externally supplied weights, checking that the levels chain.
    pub fn from_params(params: ParamSet<T>, slope: f64) -> Result<Self> {
        let mut levels = 0;
        let mut cin = CHANNELS;
        while let Ok(w) = params.get(&format!("phi{levels}.w")) {
            let b = params.get(&format!("phi{levels}.b"))?;
            match w.shape() {
                &[cout, c, k1, k2] if c == cin && k1 == KERNEL && k2 == KERNEL && b.shape() == [cout] => cin = cout,
                other => {
                    return Err(Error::Config(format!(
                        "feature level {levels}: weight {other:?} does not follow {cin} input channels"
                    )))
                }
            }
            levels += 1;
        }
        if levels == 0 || params.len() != 2 * levels {
            return Err(Error::Config(format!(
                "feature archive must hold phi0..phi{{L-1}} weights and biases only ({} tensors found)",
                params.len()
            )));
        }
        Ok(ConvFeatures { params, levels, slope })
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvFeatures<T> {
    fn num_levels(&self) -> usize {
        self.levels
    }

    fn features(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.levels);
        for l in 0..self.levels {
            let w = tape.constant(self.params.get(&format!("phi{l}.w"))?.clone());
            let b = tape.constant(self.params.get(&format!("phi{l}.b"))?.clone());
            let stride = if l == 0 { 1 } else { 2 };
            x = tape.conv2d(x, w, b, stride, PAD)?;
            x = tape.leaky_relu(x, self.slope)?;
            out.push(x);
        }
        Ok(out)
    }
}

/// `(1 / (N sum λ)) sum_l λ_l ||φ_l(gen) - φ_l(orig)||^2`.
pub fn loss_perceptual<T: Scalar>(
    tape: &mut Tape<T>,
    gen: Var,
    orig: Var,
    extractor: &dyn FeatureExtractor<T>,
    layer_weights: &[f64],
) -> Result<Var> {
    if extractor.num_levels() != layer_weights.len() {
        return Err(Error::Parameter(format!(
            "{} perceptual weights for a {}-level extractor",
            layer_weights.len(),
            extractor.num_levels()
        )));
    }
    same_shape(tape, "loss_perceptual", &[gen, orig])?;
    let total: f64 = layer_weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Parameter("perceptual weights sum to zero".into()));
    }
    let n = batch_len(tape, gen);
    let fg = extractor.features(tape, gen)?;
    let fo = extractor.features(tape, orig)?;
    let mut acc: Option<Var> = None;
    for ((&a, &b), &lam) in fg.iter().zip(&fo).zip(layer_weights) {
        if lam == 0.0 {
            continue;
        }
        let d = tape.sub(a, b)?;
        let sq = tape.square(d)?;
        let s = tape.sum(sq)?;
        let term = tape.scale(s, lam)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    let acc = acc.expect("positive weight sum implies a term");
    tape.scale(acc, 1.0 / (n as f64 * total))
}

/// `(1/N) sum_i sum_c ||target_i^c - predicted_i^c||` over `[N, 3, 4]` boxes.
fn loss_box<T: Scalar>(
    tape: &mut Tape<T>,
    op: &'static str,
    predicted: Var,
    target: Var,
    norm: HnsNorm,
) -> Result<Var> {
    same_shape(tape, op, &[predicted, target])?;
    match tape.shape(predicted) {
        &[_, c, 4] if c == CHANNELS => {}
        other => return Err(Error::dim(op, format!("boxes {other:?}, expected [N, 3, 4]"))),
    }
    let n = batch_len(tape, predicted);
    let d = tape.sub(target, predicted)?;
    let per_box = match norm {
        HnsNorm::L1 => tape.abs(d)?,
        HnsNorm::L2 => tape.group_l2(d, 4)?,
    };
    mean_over_batch(tape, per_box, n)
}

/// Discriminator "seek" term: regress the true boxes of generated images.
pub fn loss_hns_disc<T: Scalar>(tape: &mut Tape<T>, predicted: Var, true_boxes: Var, norm: HnsNorm) -> Result<Var> {
    loss_box(tape, "loss_hns_disc", predicted, true_boxes, norm)
}

/// Generator "hide" term: pull the discriminator's regression towards decoys.
pub fn loss_hns_gen<T: Scalar>(tape: &mut Tape<T>, predicted: Var, decoys: Var, norm: HnsNorm) -> Result<Var> {
    loss_box(tape, "loss_hns_gen", predicted, decoys, norm)
}

/// Component losses of the generator objective; `None` marks a term that was
/// not computed (zero weight or not applicable).
#[derive(Debug, Clone, Copy)]
pub struct GenTerms {
    pub rec: Var,
    pub compl_vgg: Option<Var>,
    pub adv: Option<Var>,
    pub hns: Option<Var>,
    pub pixel_compl: Option<Var>,
}

/// `L_rec + λ_compl L_vgg + λ_adv L_adv + λ_hns L_hns (+ λ_pixel L_compl)`.
pub fn loss_total_gen<T: Scalar>(tape: &mut Tape<T>, terms: &GenTerms, w: &LossWeights) -> Result<Var> {
    let mut total = terms.rec;
    let weighted = [
        (terms.compl_vgg, w.lambda_compl),
        (terms.adv, w.lambda_adv),
        (terms.hns, w.lambda_hns),
        (terms.pixel_compl, w.lambda_pixel_compl),
    ];
    for (term, lam) in weighted {
        if let (Some(t), true) = (term, lam != 0.0) {
            let scaled = tape.scale(t, lam)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Per-image channel boxes as a `[n, 3, 4]` tensor.
pub fn boxes_tensor<T: Scalar>(boxes: &[[NormalizedBox; CHANNELS]]) -> Result<Tensor<T>> {
    let data = boxes
        .iter()
        .flat_map(|img| img.iter().flat_map(|b| b.0.iter().map(|&v| s::<T>(v))))
        .collect();
    Tensor::new(vec![boxes.len(), CHANNELS, 4], data)
}

impl ConvFeatures<f32> {
    /// Reads `phi{l}.w` / `phi{l}.b` f32 records from an `MDE1` archive.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let archive = crate::archive::Archive::load(path)?;
        Self::from_params(archive.take_set_f32(""), 0.2)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut archive = crate::archive::Archive::new();
        archive.push_set("", &self.params);
        archive.save(path)
    }
}
