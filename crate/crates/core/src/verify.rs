//! The 64-bit finite-difference suite over every tape primitive, every loss
//! and the composed generator and discriminator objectives.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::losses::{
    loss_completion, loss_disc_adv, loss_gen_adv, loss_hns_disc, loss_hns_gen, loss_perceptual,
    loss_reconstruction, loss_total_gen, ConvFeatures, GenTerms, HnsNorm, LossWeights,
};
use crate::models::{Bound, Discriminator, Generator, Mode, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::{discriminator_objective, generator_objective};

type Params = BTreeMap<String, Tensor<f64>>;
type Vars = BTreeMap<String, Var>;

/// Suite defaults: half step 1e-5, tolerance 1e-4, every entry checked for
/// primitives and losses.
pub fn suite_config() -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-5,
        ..GradCheckConfig::default()
    }
}

/// Entries sampled per tensor in the whole-network checks.
pub const NETWORK_ENTRIES: usize = 4;
/// ReLU kinks sit densely in a whole network, so the network checks use a
/// smaller half step on an objective rescaled to unit size.
pub const NETWORK_STEP: f64 = 1e-6;
/// Conv biases ahead of batch norm have exactly zero gradient; the floor keeps
/// rounding noise on those entries from reading as a relative error.
pub const NETWORK_FLOOR: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(spec: &[(&str, Vec<usize>)], seed: u64) -> Params {
    let mut r = rng(seed);
    spec.iter()
        .map(|(n, s)| (n.to_string(), Tensor::randn(s.clone(), 1.0, &mut r)))
        .collect()
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn binary_mask(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Contracts `y` with a fixed random direction so every entry matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let dir = Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut rng(seed));
    let d = tape.constant(dir);
    let m = tape.mul(y, d)?;
    tape.sum(m)
}

/// Splits `prefix.name` vars into a model binding keyed by `name`.
fn sub_binding(vars: &Vars, prefix: &str) -> Bound {
    vars.iter()
        .filter_map(|(k, &v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v)))
        .collect()
}

fn prefixed(prefix: &str, set: &crate::models::ParamSet<f64>) -> Params {
    set.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())).collect()
}

struct Suite {
    cfg: GradCheckConfig,
    reports: Vec<GradCheckReport>,
}

impl Suite {
    fn check(&mut self, label: &str, p: &Params, f: impl Fn(&mut Tape<f64>, &Vars) -> Result<Var>) -> Result<()> {
        self.reports.push(grad_check(label, f, p, &self.cfg)?);
        Ok(())
    }

    fn check_sampled(
        &mut self,
        label: &str,
        p: &Params,
        f: impl Fn(&mut Tape<f64>, &Vars) -> Result<Var>,
    ) -> Result<()> {
        let cfg = GradCheckConfig {
            max_entries: Some(self.cfg.max_entries.unwrap_or(NETWORK_ENTRIES)),
            step: self.cfg.step.min(NETWORK_STEP),
            abs_floor: self.cfg.abs_floor.max(NETWORK_FLOOR),
            ..self.cfg.clone()
        };
        let mut t = Tape::new();
        let vars = p.iter().map(|(k, v)| (k.clone(), t.param(k.clone(), v.clone()))).collect();
        let l0 = f(&mut t, &vars)?;
        let unit = 1.0 / t.value(l0).item().abs().max(1e-12);
        let scaled = |t: &mut Tape<f64>, v: &Vars| -> Result<Var> {
            let l = f(t, v)?;
            t.scale(l, unit)
        };
        self.reports.push(grad_check(label, scaled, p, &cfg)?);
        Ok(())
    }
}

fn primitives(s: &mut Suite) -> Result<()> {
    let p = randn(&[("x", vec![2, 3, 8, 8]), ("w", vec![4, 3, 3, 3]), ("b", vec![4])], 10);
    s.check("conv2d", &p, |t, v| {
        let y = t.conv2d(v["x"], v["w"], v["b"], 2, 1)?;
        project(t, y, 1)
    })?;
    let p = randn(&[("x", vec![2, 4, 4, 4]), ("w", vec![4, 3, 3, 3]), ("b", vec![3])], 11);
    s.check("conv2d_transpose", &p, |t, v| {
        let y = t.conv2d_transpose(v["x"], v["w"], v["b"], 2, 1, 1)?;
        project(t, y, 2)
    })?;
    let p = randn(&[("x", vec![4, 3, 4, 4]), ("g", vec![3]), ("b", vec![3])], 12);
    s.check("batchnorm2d (train)", &p, |t, v| {
        let (y, _) = t.batchnorm2d_train(v["x"], v["g"], v["b"], 1e-5)?;
        project(t, y, 3)
    })?;
    s.check("batchnorm2d (eval)", &p, |t, v| {
        let y = t.batchnorm2d_eval(v["x"], v["g"], v["b"], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
        project(t, y, 4)
    })?;
    let p = randn(&[("x", vec![2, 3, 4, 4])], 13);
    s.check("relu", &p, |t, v| {
        let y = t.relu(v["x"])?;
        project(t, y, 5)
    })?;
    s.check("leaky_relu", &p, |t, v| {
        let y = t.leaky_relu(v["x"], 0.2)?;
        project(t, y, 6)
    })?;
    s.check("sigmoid", &p, |t, v| {
        let y = t.sigmoid(v["x"])?;
        project(t, y, 7)
    })?;
    s.check("global_avg_pool", &p, |t, v| {
        let y = t.global_avg_pool(v["x"])?;
        project(t, y, 8)
    })?;
    s.check("abs", &p, |t, v| {
        let y = t.abs(v["x"])?;
        project(t, y, 9)
    })?;
    s.check("square", &p, |t, v| {
        let y = t.square(v["x"])?;
        project(t, y, 10)
    })?;
    s.check("group_l2", &p, |t, v| {
        let y = t.group_l2(v["x"], 4)?;
        project(t, y, 11)
    })?;
    s.check("reshape + concat_channels", &p, |t, v| {
        let sq = t.square(v["x"])?;
        let c = t.concat_channels(&[v["x"], sq])?;
        let r = t.reshape(c, &[2, 96])?;
        project(t, r, 12)
    })?;
    let p = randn(&[("a", vec![2, 3, 4, 4]), ("b", vec![2, 3, 4, 4])], 14);
    s.check("add / sub / mul / affine / scale", &p, |t, v| {
        let x = t.add(v["a"], v["b"])?;
        let y = t.sub(v["a"], v["b"])?;
        let z = t.mul(x, y)?;
        let z = t.affine(z, 0.7, -0.3)?;
        let z = t.scale(z, 1.9)?;
        project(t, z, 13)
    })?;
    let p = randn(&[("x", vec![4, 16]), ("w", vec![16, 8]), ("b", vec![8])], 15);
    s.check("fully_connected", &p, |t, v| {
        let y = t.linear(v["x"], v["w"], v["b"])?;
        project(t, y, 14)
    })?;
    let p = BTreeMap::from([("x".to_string(), uniform(vec![10], 0.05, 0.95, 16))]);
    s.check("clamp_log", &p, |t, v| {
        let y = t.clamp_log(v["x"], 1e-7, 1.0 - 1e-7)?;
        project(t, y, 15)
    })
}

fn losses(s: &mut Suite) -> Result<()> {
    let p = BTreeMap::from([
        ("real".to_string(), uniform(vec![6], 0.05, 0.95, 20)),
        ("fake".to_string(), uniform(vec![6], 0.05, 0.95, 21)),
    ]);
    s.check("loss_disc_adv", &p, |t, v| loss_disc_adv(t, v["real"], v["fake"]))?;
    s.check("loss_gen_adv", &p, |t, v| loss_gen_adv(t, v["fake"]))?;

    let shape = vec![2, 3, 8, 8];
    let mask = binary_mask(shape.clone(), 22);
    let mut p = randn(&[("gen", shape.clone()), ("orig", shape.clone())], 23);
    s.check("loss_completion", &p, |t, v| {
        let m = t.constant(mask.clone());
        loss_completion(t, v["gen"], v["orig"], m)
    })?;
    s.check("loss_reconstruction", &p, |t, v| {
        let m = t.constant(mask.clone());
        loss_reconstruction(t, v["gen"], v["orig"], m)
    })?;

    let features = ConvFeatures::<f32>::random(2, 4, 24)?;
    let features = ConvFeatures::<f64>::from_params(features.params.cast(), features.slope)?;
    p.insert("orig".into(), uniform(shape.clone(), 0.0, 1.0, 25));
    p.insert("gen".into(), uniform(shape, 0.0, 1.0, 26));
    s.check("loss_perceptual", &p, |t, v| {
        loss_perceptual(t, v["gen"], v["orig"], &features, &[1.0, 0.5])
    })?;

    let p = BTreeMap::from([
        ("pred".to_string(), uniform(vec![3, 3, 4], 0.0, 1.0, 27)),
        ("target".to_string(), uniform(vec![3, 3, 4], 0.0, 1.0, 28)),
    ]);
    for norm in [HnsNorm::L1, HnsNorm::L2] {
        s.check(&format!("loss_hns_disc ({norm})"), &p, |t, v| {
            loss_hns_disc(t, v["pred"], v["target"], norm)
        })?;
        s.check(&format!("loss_hns_gen ({norm})"), &p, |t, v| {
            loss_hns_gen(t, v["pred"], v["target"], norm)
        })?;
    }

    let p = randn(&[("a", vec![1]), ("b", vec![1]), ("c", vec![1]), ("d", vec![1]), ("e", vec![1])], 29);
    let w = LossWeights {
        lambda_pixel_compl: 0.3,
        ..LossWeights::default()
    };
    s.check("loss_total_gen", &p, |t, v| {
        let sq = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
            let y = t.square(x)?;
            t.sum(y)
        };
        let terms = GenTerms {
            rec: sq(t, v["a"])?,
            compl_vgg: Some(sq(t, v["b"])?),
            adv: Some(sq(t, v["c"])?),
            hns: Some(sq(t, v["d"])?),
            pixel_compl: Some(sq(t, v["e"])?),
        };
        loss_total_gen(t, &terms, &w)
    })
}

/// The generator and discriminator objectives on a 4x3x16x16 batch with every
/// term active, differentiated through both networks.
fn networks(s: &mut Suite) -> Result<()> {
    let cfg = ModelConfig {
        width: 16,
        height: 16,
        base_width: 4,
        depth: 2,
        bottleneck: 8,
        ..ModelConfig::desk()
    };
    let gen = Generator::<f32>::build(&cfg, &mut rng(30))?;
    let disc = Discriminator::<f32>::build(&cfg, &mut rng(31))?;
    let gen = Generator::<f64> {
        config: gen.config.clone(),
        params: gen.params.cast(),
        buffers: gen.buffers.cast(),
    };
    let disc = Discriminator::<f64> {
        config: disc.config.clone(),
        params: disc.params.cast(),
    };
    let features = ConvFeatures::<f32>::random(2, 4, 32)?;
    let features = ConvFeatures::<f64>::from_params(features.params.cast(), features.slope)?;
    let shape = vec![4, 3, 16, 16];
    let z = uniform(shape.clone(), 0.0, 1.0, 33);
    let mask = binary_mask(shape, 34);
    let true_boxes = uniform(vec![4, 3, 4], 0.0, 1.0, 35);
    let decoys = uniform(vec![4, 3, 4], 0.0, 1.0, 36);
    let w = LossWeights {
        lambda_compl: 0.5,
        lambda_adv: 0.5,
        lambda_hns: 0.5,
        lambda_pixel_compl: 0.5,
        layer_weights: vec![1.0, 0.5],
    };

    let mut p = prefixed("g.", &gen.params);
    p.extend(prefixed("d.", &disc.params));
    s.check_sampled("L_tot (generator objective)", &p, |t, v| {
        let (gb, db) = (sub_binding(v, "g."), sub_binding(v, "d."));
        let zv = t.constant(z.clone());
        let mv = t.constant(mask.clone());
        let x = t.mul(mv, zv)?;
        let out = gen.forward(t, &gb, x, Mode::Train)?;
        let q = t.constant(decoys.clone());
        let (_, total) = generator_objective(t, out.image, zv, mv, &disc, &db, &features, Some(q), &w, HnsNorm::L1)?;
        Ok(total)
    })?;

    let fake = uniform(vec![4, 3, 16, 16], 0.0, 1.0, 37);
    let p = prefixed("d.", &disc.params);
    s.check_sampled("discriminator objective", &p, |t, v| {
        let db = sub_binding(v, "d.");
        let real = t.constant(z.clone());
        let f = t.constant(fake.clone());
        let tb = t.constant(true_boxes.clone());
        Ok(discriminator_objective(t, &disc, &db, real, f, Some(tb), &w, HnsNorm::L2)?.total)
    })
}

/// Runs every check and returns one report per primitive or loss.
pub fn grad_check_suite(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut s = Suite {
        cfg: cfg.clone(),
        reports: Vec::new(),
    };
    primitives(&mut s)?;
    losses(&mut s)?;
    networks(&mut s)?;
    Ok(s.reports)
}
