use std::collections::BTreeMap;

use mde_core::gradcheck::{check_against, analytic_gradients};
use mde_core::losses::*;
use mde_core::maskgen::NormalizedBox;
use mde_core::verify::suite_config;
use mde_core::{Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn mask(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Evaluates a loss built from constant leaves.
fn eval(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t).unwrap();
    t.value(v).item()
}

fn vec1(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![v.len()], v.to_vec()).unwrap()
}

// ---- independent loop oracles ----

fn oracle_disc_adv(real: &[f64], fake: &[f64]) -> f64 {
    let c = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
    -real.iter().zip(fake).map(|(&r, &f)| c(r).ln() + c(1.0 - f).ln()).sum::<f64>() / real.len() as f64
}

fn oracle_gen_adv(fake: &[f64]) -> f64 {
    -fake.iter().map(|&f| f.clamp(1e-7, 1.0 - 1e-7).ln()).sum::<f64>() / fake.len() as f64
}

/// `(1/N) sum w * (g - o)^2` with weight `w = mask` or `1 - mask`.
fn oracle_masked_l2(g: &Tensor<f64>, o: &Tensor<f64>, m: &Tensor<f64>, visible: bool) -> f64 {
    let n = g.shape()[0] as f64;
    let mut s = 0.0;
    for i in 0..g.len() {
        let w = if visible { m.data()[i] } else { 1.0 - m.data()[i] };
        let d = w * (g.data()[i] - o.data()[i]);
        s += d * d;
    }
    s / n
}

fn oracle_box(pred: &Tensor<f64>, target: &Tensor<f64>, l2: bool) -> f64 {
    let n = pred.shape()[0];
    let mut s = 0.0;
    for b in 0..n * 3 {
        let d: Vec<f64> = (0..4).map(|k| target.data()[4 * b + k] - pred.data()[4 * b + k]).collect();
        s += if l2 {
            d.iter().map(|x| x * x).sum::<f64>().sqrt()
        } else {
            d.iter().map(|x| x.abs()).sum::<f64>()
        };
    }
    s / n as f64
}

/// Direct convolution, stride `s`, zero padding 1, then leaky ReLU 0.2.
fn oracle_conv_leaky(x: &[f64], c: usize, h: usize, w: usize, wt: &Tensor<f64>, b: &Tensor<f64>, s: usize) -> (Vec<f64>, usize, usize, usize) {
    let co = wt.shape()[0];
    let (ho, wo) = ((h + 2 - 3) / s + 1, (w + 2 - 3) / s + 1);
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = b.data()[o];
                for ci in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (y * s + ky) as isize - 1;
                            let ix = (xx * s + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += wt.data()[((o * c + ci) * 3 + ky) * 3 + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * ho + y) * wo + xx] = if acc > 0.0 { acc } else { 0.2 * acc };
            }
        }
    }
    (out, co, ho, wo)
}

fn oracle_perceptual(f: &ConvFeatures<f64>, g: &Tensor<f64>, o: &Tensor<f64>, lam: &[f64]) -> f64 {
    let [n, c, h, w] = g.shape().try_into().unwrap();
    let plane = c * h * w;
    let mut total = 0.0;
    for i in 0..n {
        let mut a = (g.data()[i * plane..(i + 1) * plane].to_vec(), c, h, w);
        let mut b = (o.data()[i * plane..(i + 1) * plane].to_vec(), c, h, w);
        for (l, &lw) in lam.iter().enumerate() {
            let wt = f.params.get(&format!("phi{l}.w")).unwrap();
            let bias = f.params.get(&format!("phi{l}.b")).unwrap();
            let s = if l == 0 { 1 } else { 2 };
            a = oracle_conv_leaky(&a.0, a.1, a.2, a.3, wt, bias, s);
            b = oracle_conv_leaky(&b.0, b.1, b.2, b.3, wt, bias, s);
            total += lw * a.0.iter().zip(&b.0).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        }
    }
    total / (n as f64 * lam.iter().sum::<f64>())
}

fn features64(levels: usize, width: usize, seed: u64) -> ConvFeatures<f64> {
    let f = ConvFeatures::<f32>::random(levels, width, seed).unwrap();
    ConvFeatures::from_params(f.params.cast(), f.slope).unwrap()
}

// ---- adversarial terms ----

#[test]
fn disc_adv_analytic_values() {
    let half = vec1(&[0.5, 0.5, 0.5]);
    let v = eval(|t| {
        let (r, f) = (t.constant(half.clone()), t.constant(half.clone()));
        loss_disc_adv(t, r, f)
    });
    assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-6);
    let g = eval(|t| {
        let f = t.constant(half.clone());
        loss_gen_adv(t, f)
    });
    assert!((g - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn gen_adv_vanishes_when_fakes_fool_and_gradient_matches() {
    let ones = vec1(&[1.0; 4]);
    let v = eval(|t| {
        let f = t.constant(ones.clone());
        loss_gen_adv(t, f)
    });
    assert!(v.abs() < 1e-6);
    // d/dp of -(1/N) sum log p at p = 1/2 is -2/N.
    let p = BTreeMap::from([("f".to_string(), vec1(&[0.5; 4]))]);
    let g = analytic_gradients(&|t: &mut Tape<f64>, v: &BTreeMap<String, Var>| loss_gen_adv(t, v["f"]), &p).unwrap();
    for &x in g["f"].data() {
        assert!((x + 0.5).abs() < 1e-9);
    }
}

#[test]
fn log_clamp_keeps_saturated_outputs_finite() {
    let v = eval(|t| {
        let r = t.constant(vec1(&[0.0, 1.0]));
        let f = t.constant(vec1(&[1.0, 0.0]));
        loss_disc_adv(t, r, f)
    });
    assert!(v.is_finite());
    assert!((v - oracle_disc_adv(&[0.0, 1.0], &[1.0, 0.0])).abs() < 1e-9);
}

#[test]
fn adversarial_losses_match_loop_oracle() {
    let real = uniform(vec![16], 1);
    let fake = uniform(vec![16], 2);
    let d = eval(|t| {
        let (r, f) = (t.constant(real.clone()), t.constant(fake.clone()));
        loss_disc_adv(t, r, f)
    });
    assert!((d - oracle_disc_adv(real.data(), fake.data())).abs() < 1e-6);
    let g = eval(|t| {
        let f = t.constant(fake.clone());
        loss_gen_adv(t, f)
    });
    assert!((g - oracle_gen_adv(fake.data())).abs() < 1e-6);
}

#[test]
fn adversarial_shape_mismatch_is_rejected() {
    let mut t = Tape::<f64>::new();
    let r = t.constant(vec1(&[0.5; 3]));
    let f = t.constant(vec1(&[0.5; 4]));
    assert!(loss_disc_adv(&mut t, r, f).is_err());
}

// ---- pixel terms ----

#[test]
fn masked_pixel_losses_match_loop_oracle() {
    let shape = vec![3, 3, 8, 8];
    let (g, o, m) = (uniform(shape.clone(), 3), uniform(shape.clone(), 4), mask(shape, 5));
    let rec = eval(|t| {
        let (a, b, c) = (t.constant(g.clone()), t.constant(o.clone()), t.constant(m.clone()));
        loss_reconstruction(t, a, b, c)
    });
    let compl = eval(|t| {
        let (a, b, c) = (t.constant(g.clone()), t.constant(o.clone()), t.constant(m.clone()));
        loss_completion(t, a, b, c)
    });
    assert!((rec - oracle_masked_l2(&g, &o, &m, true)).abs() < 1e-6);
    assert!((compl - oracle_masked_l2(&g, &o, &m, false)).abs() < 1e-6);
}

#[test]
fn completion_ignores_visible_entries_and_reconstruction_ignores_dropped() {
    let shape = vec![2, 3, 6, 6];
    let (g, o, m) = (uniform(shape.clone(), 6), uniform(shape.clone(), 7), mask(shape, 8));
    let perturbed_visible = g.zip_map(&m, |x, mm| if mm == 1.0 { x + 3.0 } else { x }).unwrap();
    let perturbed_dropped = g.zip_map(&m, |x, mm| if mm == 0.0 { x + 3.0 } else { x }).unwrap();
    let both = |gen: &Tensor<f64>| {
        let c = eval(|t| {
            let (a, b, c) = (t.constant(gen.clone()), t.constant(o.clone()), t.constant(m.clone()));
            loss_completion(t, a, b, c)
        });
        let r = eval(|t| {
            let (a, b, c) = (t.constant(gen.clone()), t.constant(o.clone()), t.constant(m.clone()));
            loss_reconstruction(t, a, b, c)
        });
        (c, r)
    };
    let (c0, r0) = both(&g);
    assert_eq!(both(&perturbed_visible).0, c0);
    assert_eq!(both(&perturbed_dropped).1, r0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn completion_plus_reconstruction_is_unmasked_l2(seed in any::<u64>(), n in 1usize..4, hw in 2usize..9) {
        let shape = vec![n, 3, hw, hw];
        let (g, o, m) = (uniform(shape.clone(), seed), uniform(shape.clone(), seed ^ 1), mask(shape.clone(), seed ^ 2));
        let ones = Tensor::<f64>::ones(shape);
        let parts = eval(|t| {
            let (a, b, c) = (t.constant(g.clone()), t.constant(o.clone()), t.constant(m.clone()));
            let x = loss_completion(t, a, b, c)?;
            let y = loss_reconstruction(t, a, b, c)?;
            t.add(x, y)
        });
        let full = eval(|t| {
            let (a, b, c) = (t.constant(g.clone()), t.constant(o.clone()), t.constant(ones.clone()));
            loss_reconstruction(t, a, b, c)
        });
        prop_assert!((parts - full).abs() < 1e-6 * full.max(1.0));
        prop_assert!(parts >= 0.0);
    }

    #[test]
    fn hns_terms_are_symmetric_and_nonnegative(seed in any::<u64>(), n in 1usize..5) {
        let (p, q) = (uniform(vec![n, 3, 4], seed), uniform(vec![n, 3, 4], seed ^ 9));
        for norm in [HnsNorm::L1, HnsNorm::L2] {
            let ab = eval(|t| { let (a, b) = (t.constant(p.clone()), t.constant(q.clone())); loss_hns_disc(t, a, b, norm) });
            let ba = eval(|t| { let (a, b) = (t.constant(q.clone()), t.constant(p.clone())); loss_hns_gen(t, a, b, norm) });
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0);
        }
    }
}

// ---- perceptual term ----

#[test]
fn perceptual_with_identity_features_is_plain_l2() {
    let shape = vec![2, 3, 5, 5];
    let (g, o) = (uniform(shape.clone(), 9), uniform(shape.clone(), 10));
    let ones = Tensor::<f64>::ones(shape);
    let p = eval(|t| {
        let (a, b) = (t.constant(g.clone()), t.constant(o.clone()));
        loss_perceptual(t, a, b, &IdentityFeatures, &[0.7])
    });
    assert!((p - oracle_masked_l2(&g, &o, &ones, true)).abs() < 1e-9);
}

#[test]
fn perceptual_matches_direct_convolution_oracle() {
    let f = features64(2, 4, 11);
    let shape = vec![2, 3, 8, 8];
    let (g, o) = (uniform(shape.clone(), 12), uniform(shape, 13));
    let lam = [1.0, 0.25];
    let p = eval(|t| {
        let (a, b) = (t.constant(g.clone()), t.constant(o.clone()));
        loss_perceptual(t, a, b, &f, &lam)
    });
    let expect = oracle_perceptual(&f, &g, &o, &lam);
    assert!((p - expect).abs() < 1e-5 * expect.max(1.0), "{p} vs {expect}");
}

#[test]
fn perceptual_weight_count_must_match_levels() {
    let f = features64(2, 4, 14);
    let mut t = Tape::<f64>::new();
    let a = t.constant(uniform(vec![1, 3, 8, 8], 15));
    assert!(matches!(
        loss_perceptual(&mut t, a, a, &f, &[1.0, 0.5, 0.25]),
        Err(mde_core::Error::Parameter(_))
    ));
}

#[test]
fn default_objective_is_finite_on_typical_images() {
    let f = features64(5, 8, 1234);
    let w = LossWeights::default();
    let shape = vec![2, 3, 32, 32];
    let (g, o) = (uniform(shape.clone(), 16), uniform(shape, 17));
    let p = eval(|t| {
        let (a, b) = (t.constant(g.clone()), t.constant(o.clone()));
        loss_perceptual(t, a, b, &f, &w.layer_weights)
    });
    assert!(p.is_finite() && p > 0.0);
}

// ---- hide-and-seek ----

#[test]
fn hns_l1_spot_value() {
    // One coordinate off by 0.1 in every channel box: 3 * 0.1 per image.
    let truth = NormalizedBox([0.2, 0.3, 0.5, 0.6]);
    let off = NormalizedBox([0.3, 0.3, 0.5, 0.6]);
    let a = boxes_tensor::<f64>(&[[truth; 3]]).unwrap();
    let b = boxes_tensor::<f64>(&[[off; 3]]).unwrap();
    for norm in [HnsNorm::L1, HnsNorm::L2] {
        let v = eval(|t| {
            let (p, q) = (t.constant(b.clone()), t.constant(a.clone()));
            loss_hns_disc(t, p, q, norm)
        });
        assert!((v - 0.3).abs() < 1e-9, "{norm}: {v}");
    }
}

#[test]
fn hns_matches_loop_oracle_for_both_norms() {
    let (p, q) = (uniform(vec![5, 3, 4], 18), uniform(vec![5, 3, 4], 19));
    for (norm, l2) in [(HnsNorm::L1, false), (HnsNorm::L2, true)] {
        let v = eval(|t| {
            let (a, b) = (t.constant(p.clone()), t.constant(q.clone()));
            loss_hns_gen(t, a, b, norm)
        });
        assert!((v - oracle_box(&p, &q, l2)).abs() < 1e-9);
    }
}

#[test]
fn hns_rejects_wrong_box_shape() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(uniform(vec![2, 3, 3], 20));
    assert!(loss_hns_disc(&mut t, a, a, HnsNorm::L1).is_err());
}

#[test]
fn norm_parses_and_prints() {
    assert_eq!("l1".parse::<HnsNorm>().unwrap(), HnsNorm::L1);
    assert_eq!("L2".parse::<HnsNorm>().unwrap(), HnsNorm::L2);
    assert!("l3".parse::<HnsNorm>().is_err());
    assert_eq!(HnsNorm::L2.to_string().parse::<HnsNorm>().unwrap(), HnsNorm::L2);
}

// ---- total objective ----

fn total_of(values: [f64; 5], w: &LossWeights) -> f64 {
    eval(|t| {
        let v: Vec<Var> = values.iter().map(|&x| t.constant(vec1(&[x]))).collect();
        let s: Vec<Var> = v.iter().map(|&x| t.sum(x)).collect::<Result<_>>()?;
        let terms = GenTerms {
            rec: s[0],
            compl_vgg: Some(s[1]),
            adv: Some(s[2]),
            hns: Some(s[3]),
            pixel_compl: Some(s[4]),
        };
        loss_total_gen(t, &terms, w)
    })
}

#[test]
fn total_is_the_weighted_sum() {
    let w = LossWeights {
        lambda_pixel_compl: 0.5,
        ..LossWeights::default()
    };
    let vals = [1.5, 200.0, 0.7, 0.4, 2.0];
    let expect = 1.5 + w.lambda_compl * 200.0 + w.lambda_adv * 0.7 + w.lambda_hns * 0.4 + 0.5 * 2.0;
    assert!((total_of(vals, &w) - expect).abs() < 1e-12);
}

#[test]
fn zero_weights_reduce_to_reconstruction() {
    let w = LossWeights {
        lambda_compl: 0.0,
        lambda_adv: 0.0,
        lambda_hns: 0.0,
        lambda_pixel_compl: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(total_of([1.25, 9.0, 9.0, 9.0, 9.0], &w), 1.25);
}

proptest! {
    #[test]
    fn total_is_linear_in_each_weight(a in 0.0f64..2.0, b in 0.0f64..2.0, vals in prop::array::uniform5(0.0f64..10.0)) {
        let base = LossWeights { lambda_compl: 0.0, lambda_adv: 0.0, lambda_hns: 0.0, lambda_pixel_compl: 0.0, ..LossWeights::default() };
        let wa = LossWeights { lambda_adv: a, ..base.clone() };
        let wb = LossWeights { lambda_adv: b, ..base.clone() };
        let wab = LossWeights { lambda_adv: a + b, ..base.clone() };
        let lhs = total_of(vals, &wab) - total_of(vals, &base);
        let rhs = (total_of(vals, &wa) - total_of(vals, &base)) + (total_of(vals, &wb) - total_of(vals, &base));
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }
}

#[test]
fn ablation_zeroes_the_selected_weights() {
    let w = LossWeights::default();
    let a = w.ablated(&Ablation {
        no_perceptual: true,
        no_adversarial: false,
        no_hns: true,
    });
    assert_eq!(a.lambda_compl, 0.0);
    assert_eq!(a.lambda_hns, 0.0);
    assert_eq!(a.lambda_adv, w.lambda_adv);
}

#[test]
fn default_weights_validate_and_negative_weights_do_not() {
    assert!(LossWeights::default().validate().is_ok());
    let bad = LossWeights {
        lambda_adv: -1.0,
        ..LossWeights::default()
    };
    assert!(bad.validate().is_err());
}

// ---- gradients ----

#[test]
fn wrong_sign_gradient_is_reported_by_name() {
    let p = BTreeMap::from([("fake".to_string(), uniform(vec![4], 21).map(|v| 0.1 + 0.8 * v))]);
    let f = |t: &mut Tape<f64>, v: &BTreeMap<String, Var>| loss_gen_adv(t, v["fake"]);
    let mut g = analytic_gradients(&f, &p).unwrap();
    g.insert("fake".into(), g["fake"].map(|x| -x));
    let r = check_against("loss_gen_adv (sign flipped)", f, &p, &g, &suite_config()).unwrap();
    assert!(!r.passed());
    assert_eq!(r.failures().next().unwrap().name, "fake");
    assert!(r.to_string().starts_with("FAIL loss_gen_adv (sign flipped)"));
}
