use mde_core::maskgen::{
    center_box, corruption_stats, denormalize_box, make_mask, normalize_box, occlusion_template,
    sample_box, sample_height, sample_rec_mask, write_mask_png, ChannelBox, Occlusion, Task,
};
use mde_core::dataio::read_png;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two-sided KS statistic of `samples` against Uniform(lo, hi).
fn ks_uniform(samples: &mut [f64], lo: f64, hi: f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn box_area_matches_ratio_up_to_rounding() {
    let mut r = rng(1);
    let (s, w, h) = (0.1, 96, 96);
    let target = s * (w * h) as f64;
    for _ in 0..20_000 {
        let b = sample_box(&mut r, s, w, h, 0).unwrap();
        assert!(b.is_valid(w, h));
        let err = (b.area() as f64 - target).abs();
        assert!(err <= b.w.max(b.h) as f64, "{b:?} area {} vs {target}", b.area());
    }
}

#[test]
fn box_height_is_uniform_ks() {
    let mut r = rng(2);
    let (s, h) = (0.1, 96usize);
    let mut draws: Vec<f64> = (0..100_000).map(|_| sample_height(&mut r, s, h)).collect();
    let ks = ks_uniform(&mut draws, s * h as f64, h as f64);
    assert!(ks < 0.01, "KS {ks}");
}

/// The integer heights of realized boxes follow the rounded uniform law: the
/// share of boxes with height <= k equals F(k + 1/2).
#[test]
fn realized_heights_follow_rounded_law() {
    let mut r = rng(3);
    let (s, h) = (0.1, 96usize);
    let n = 100_000;
    let mut counts = vec![0usize; h + 1];
    for _ in 0..n {
        counts[sample_box(&mut r, s, 96, h, 0).unwrap().h] += 1;
    }
    let (lo, hi) = (s * h as f64, h as f64);
    let mut cum = 0usize;
    let mut ks = 0.0f64;
    for (k, c) in counts.iter().enumerate() {
        cum += c;
        let f = ((k as f64 + 0.5 - lo) / (hi - lo)).clamp(0.0, 1.0);
        ks = ks.max((cum as f64 / n as f64 - f).abs());
    }
    assert!(ks < 0.01, "KS {ks}");
}

#[test]
fn rec_statistics_match_analytic_values() {
    let mut r = rng(4);
    let m = make_mask(Task::Rec, &mut r, 0.1, 96, 96, 20_000).unwrap();
    let (dropped, corrupted) = corruption_stats(&m);
    assert!((dropped - 0.729).abs() < 0.01, "dropped {dropped}");
    assert!((corrupted - 0.999).abs() < 0.001, "corrupted {corrupted}");
}

#[test]
fn re_drops_exactly_one_minus_s() {
    let mut r = rng(5);
    for s in [0.25, 0.33, 0.5] {
        let m = make_mask(Task::RandomExtrapolation, &mut r, s, 96, 96, 500).unwrap();
        let (dropped, corrupted) = corruption_stats(&m);
        assert_eq!(dropped, corrupted);
        assert!((dropped - (1.0 - s)).abs() < 0.005, "S={s}: {dropped}");
    }
}

#[test]
fn per_pixel_visibility_is_s() {
    let mut r = rng(6);
    let (s, n) = (0.3, 4000);
    let m = make_mask(Task::Rec, &mut r, s, 32, 32, n).unwrap();
    let plane = 32 * 32;
    // probe pixel (5, 20) in channel 1
    let visible = (0..n)
        .filter(|i| m.mask.data()[(i * 3 + 1) * plane + 20 * 32 + 5] == 1.0)
        .count() as f64
        / n as f64;
    // position-dependent around S: boxes near the border see it less often,
    // but the overall average is S.
    let overall: f64 = m.mask.data().iter().map(|&v| v as f64).sum::<f64>() / m.mask.len() as f64;
    let sigma = (s * (1.0 - s) / (n * 3 * plane) as f64).sqrt();
    assert!((overall - s).abs() < 3.0 * sigma + 0.01, "overall {overall}");
    assert!(visible > 0.0 && visible < 1.0);
}

#[test]
fn mask_family_identities_over_seeds() {
    for seed in 0..1000u64 {
        let s = 0.1 + (seed % 17) as f64 * 0.05;
        let (w, h) = (24, 16);
        let ri = make_mask(Task::ReverseInpainting, &mut rng(seed), s, w, h, 1).unwrap();
        let inp = make_mask(Task::Inpainting, &mut rng(seed), s, w, h, 1).unwrap();
        for (a, b) in ri.mask.data().iter().zip(inp.mask.data()) {
            assert_eq!(a + b, 1.0);
        }
        let re = make_mask(Task::RandomExtrapolation, &mut rng(seed), s, w, h, 2).unwrap();
        for boxes in &re.boxes {
            let [a, b, c] = boxes.map(|x| x.unwrap());
            assert_eq!((a.x, a.y, a.w, a.h), (b.x, b.y, b.w, b.h));
            assert_eq!((a.x, a.y, a.w, a.h), (c.x, c.y, c.w, c.h));
        }
        for k in [1u8, 2] {
            let col = make_mask(Task::Colorization { visible: k }, &mut rng(seed), s, w, h, 2).unwrap();
            for plane in col.mask.data().chunks(w * h) {
                assert!(plane.iter().all(|&v| v == plane[0]));
            }
            for img in col.mask.data().chunks(3 * w * h) {
                let ones = img.chunks(w * h).filter(|p| p[0] == 1.0).count();
                assert_eq!(ones, k as usize);
            }
        }
        for m in [&ri, &inp, &re] {
            assert!(m.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}

#[test]
fn rec_mask_is_one_exactly_inside_boxes() {
    let m = make_mask(Task::Rec, &mut rng(7), 0.2, 20, 12, 3).unwrap();
    let plane = 240;
    for (i, boxes) in m.boxes.iter().enumerate() {
        for b in boxes.iter().flatten() {
            for y in 0..12 {
                for x in 0..20 {
                    let v = m.mask.data()[(i * 3 + b.channel) * plane + y * 20 + x];
                    assert_eq!(v == 1.0, b.contains(x, y));
                }
            }
        }
    }
}

#[test]
fn colorization_statistics() {
    let m = make_mask(Task::Colorization { visible: 1 }, &mut rng(8), 0.5, 8, 8, 10).unwrap();
    let (dropped, corrupted) = corruption_stats(&m);
    assert_eq!(dropped, 0.0);
    assert!((corrupted - 1.0).abs() < 1e-12);
    let all_visible = make_mask(Task::Colorization { visible: 2 }, &mut rng(8), 0.5, 8, 8, 1).unwrap();
    let mut ones = all_visible.clone();
    ones.mask = mde_core::Tensor::ones(ones.mask.shape().to_vec());
    assert_eq!(corruption_stats(&ones), (0.0, 0.0));
}

#[test]
fn same_seed_same_boxes() {
    let a = sample_rec_mask(&mut rng(9), 0.1, 96, 96).unwrap();
    let b = sample_rec_mask(&mut rng(9), 0.1, 96, 96).unwrap();
    assert_eq!(a, b);
}

#[test]
fn center_box_geometry() {
    let b = center_box(0.25, 96, 96, 0);
    assert_eq!((b.x, b.y, b.w, b.h), (24, 24, 48, 48));
}

#[test]
fn normalize_round_trip_exhaustive_small_grid() {
    let (w, h) = (7, 5);
    for x in 0..w {
        for y in 0..h {
            for bw in 1..=w - x {
                for bh in 1..=h - y {
                    let b = ChannelBox { x, y, w: bw, h: bh, channel: 2 };
                    let nb = normalize_box(&b, w, h);
                    assert!(nb.0[2] > nb.0[0] && nb.0[3] > nb.0[1]);
                    assert_eq!(denormalize_box(&nb, 2, w, h), b);
                }
            }
        }
    }
}

#[test]
fn occlusion_templates() {
    let rh = occlusion_template(Occlusion::RightHalf, 96, 96).unwrap();
    for c in 0..3 {
        for y in 0..96 {
            for x in 0..96 {
                let v = rh.mask.data()[(c * 96 + y) * 96 + x];
                assert_eq!(v, if x >= 48 { 0.0 } else { 1.0 });
            }
        }
    }
    let lh = occlusion_template(Occlusion::LeftHalf, 96, 96).unwrap();
    for (a, b) in rh.mask.data().iter().zip(lh.mask.data()) {
        assert_eq!((1.0 - a) + (1.0 - b), 1.0, "halves must partition the image");
    }
    let dropped = |o| corruption_stats(&occlusion_template(o, 96, 96).unwrap()).0;
    assert!(dropped(Occlusion::Mouth) < dropped(Occlusion::RightHalf));
    assert!(dropped(Occlusion::RightEye) < dropped(Occlusion::BothEyes));
    assert!(occlusion_template(Occlusion::Mouth, 7, 96).is_err());
    for o in Occlusion::ALL {
        let m = occlusion_template(o, 33, 41).unwrap();
        assert!(m.boxes[0].iter().all(|b| b.unwrap().is_valid(33, 41)));
    }
}

#[test]
fn mask_png_export_is_0_or_255() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_mask(Task::Rec, &mut rng(10), 0.3, 16, 16, 1).unwrap();
    let p = dir.path().join("mask.png");
    write_mask_png(&m, 0, &p).unwrap();
    let back = read_png(&p).unwrap();
    assert_eq!(back.data(), m.image_mask(0).unwrap().data());
}

proptest! {
    #[test]
    fn sampled_boxes_are_valid(seed in 0u64..10_000, s in 0.07f64..0.95, w in 8usize..64, h in 16usize..64) {
        let b = sample_box(&mut rng(seed), s, w, h, 1).unwrap();
        prop_assert!(b.is_valid(w, h));
        let target = s * (w * h) as f64;
        prop_assert!((b.area() as f64 - target).abs() <= b.w.max(b.h) as f64);
    }
}
