use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use plda::assign::{erase_mask, mask_assign, mask_image};
use plda::cps::{confident_pixels, dynamic_threshold, pixel_prediction, refine_cam, PseudoOrigin, RefineConfig};
use plda::domadv::{Domain, DomainWeights};
use plda::evalviz::{miou, similarity_histogram, sweep_background_threshold, EvalItem};
use plda::netcore::CamMap;
use plda::trainer::poly_lr;

fn arr3(c: usize, h: usize, w: usize) -> impl Strategy<Value = Array3<f64>> {
    prop::collection::vec(0.0f64..1.0, c * h * w).prop_map(move |v| Array3::from_shape_vec((c, h, w), v).unwrap())
}

fn label(c: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, c).prop_map(|mut l| {
        if l.iter().all(|&v| v == 0) {
            l[0] = 1;
        }
        l
    })
}

fn cam_case() -> impl Strategy<Value = (CamMap, Vec<u8>)> {
    (1usize..=4, 1usize..=4, 1usize..=4)
        .prop_flat_map(|(c, h, w)| (arr3(c, h, w), label(c)))
        .prop_map(|(raw, l)| (CamMap::from_raw(raw, &l).unwrap(), l))
}

fn labels(k: usize, n: usize) -> impl Strategy<Value = Array2<u8>> {
    prop::collection::vec(0u8..k as u8, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_prediction_is_a_distribution((cam, l) in cam_case(), scale in 0.5f64..20.0) {
        let p = pixel_prediction(&cam, &l, scale, 3.0);
        let (k, h, w) = p.dim();
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (0..k).map(|c| p[[c, y, x]]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                for c in 0..k {
                    prop_assert!(p[[c, y, x]] >= 0.0);
                    if c > 0 && l[c - 1] == 0 {
                        prop_assert_eq!(p[[c, y, x]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn refined_labels_are_distributions((cam, _l) in cam_case(), iters in 0usize..4, up in 1usize..=3, seed in 0u64..1000) {
        let (_, h, w) = cam.normalized.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Array3::from_shape_fn((3, h * up, w * up), |_| rand::Rng::random::<f64>(&mut rng));
        let cfg = RefineConfig { iterations: iters, dilations: vec![1, 2], bg_power: 3.0, temperature: 1.0 };
        let p = refine_cam(&cam, &image, &cfg, PseudoOrigin::Original).unwrap();
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (0..p.probs.dim().0).map(|c| p.probs[[c, y, x]]).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(p.probs.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn confident_set_shrinks_with_beta((cam, _l) in cam_case(), b1 in 0.05f64..0.95, b2 in 0.05f64..0.95) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let (_, h, w) = cam.normalized.dim();
        let image = Array3::from_elem((3, h, w), 0.5);
        let p = refine_cam(&cam, &image, &RefineConfig::default(), PseudoOrigin::Original).unwrap();
        let all: Vec<usize> = (0..h * w).collect();
        let loose = confident_pixels(&p, &all, &dynamic_threshold(&p, lo).unwrap()).unwrap();
        let tight = confident_pixels(&p, &all, &dynamic_threshold(&p, hi).unwrap()).unwrap();
        prop_assert!(tight.iter().all(|t| loose.contains(t)));
    }

    #[test]
    fn source_set_shrinks_with_alpha((cam, l) in cam_case(), a1 in 0.05f64..0.95, a2 in 0.05f64..0.95) {
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let loose = mask_assign(&cam, &cam, lo, &l).unwrap();
        let tight = mask_assign(&cam, &cam, hi, &l).unwrap();
        prop_assert!(tight.source_idx.iter().all(|p| loose.source_idx.contains(p)));
    }

    #[test]
    fn mask_image_zeroes_exactly_the_erase_mask((cam, l) in cam_case(), alpha in 0.05f64..0.95, up in 1usize..=3) {
        let (_, h, w) = cam.normalized.dim();
        let image = Array3::from_elem((3, h * up, w * up), 0.7);
        let masked = mask_image(&image, &cam, alpha, &l).unwrap();
        let u = erase_mask(&cam, alpha, &l).unwrap();
        for y in 0..h * up {
            for x in 0..w * up {
                let erased = u[(y / up) * w + x / up];
                for ch in 0..3 {
                    prop_assert_eq!(masked[[ch, y, x]], if erased { 0.0 } else { 0.7 });
                }
            }
        }
    }

    #[test]
    fn miou_is_invariant_to_relabeling_foreground(pred in labels(4, 6), gt in labels(4, 6), perm in Just([1u8, 2, 3]).prop_shuffle()) {
        let map = |a: &Array2<u8>| a.mapv(|v| if v == 0 { 0 } else { perm[v as usize - 1] });
        let a = miou(&[pred.clone()], &[gt.clone()], 3).unwrap();
        let b = miou(&[map(&pred)], &[map(&gt)], 3).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-12);
    }

    #[test]
    fn sweep_best_dominates_grid((cam, l) in cam_case(), gt_seed in 0u64..1000) {
        let (_, h, w) = cam.normalized.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(gt_seed);
        let gt = Array2::from_shape_fn((h, w), |_| rand::Rng::random_range(&mut rng, 0..=l.len() as u8));
        let items = vec![EvalItem::from_cam(&cam, &l, &gt)];
        let grid: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        let r = sweep_background_threshold(&items, &grid).unwrap();
        for &(_, m) in &r.curve {
            prop_assert!(r.best.mean >= m);
        }
    }

    #[test]
    fn poly_lr_is_monotone(total in 1usize..500, t in 0usize..500, base in 1e-4f64..1.0, gamma in 0.1f64..2.0) {
        let t = t.min(total);
        let now = poly_lr(t, total, base, gamma).unwrap();
        prop_assert!((0.0..=base).contains(&now));
        if t < total {
            prop_assert!(poly_lr(t + 1, total, base, gamma).unwrap() <= now);
        }
    }

    #[test]
    fn inverse_frequency_balances_domains(ns in 1usize..1000, nt in 1usize..1000) {
        let w = DomainWeights::inverse_frequency(ns, nt);
        let half = (ns + nt) as f64 / 2.0;
        prop_assert!((w.source * ns as f64 - half).abs() < 1e-9);
        prop_assert!((w.target * nt as f64 - half).abs() < 1e-9);
    }

    #[test]
    fn similarity_histograms_have_unit_mass(seed in 0u64..1000, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Array3::from_shape_fn((4, n, n), |_| rand::Rng::random::<f64>(&mut rng));
        let regions: Vec<Option<(usize, Domain)>> = (0..n * n)
            .map(|p| Some((p % 2, if p % 3 == 0 { Domain::Source } else { Domain::Target })))
            .collect();
        let r = similarity_histogram(&[f], &[regions], 2, 5, 7, &mut rng).unwrap();
        prop_assert!(!r.classes_used.is_empty());
        let (s, t): (f64, f64) = (r.source_hist.iter().sum(), r.target_hist.iter().sum());
        prop_assert!((s - 1.0).abs() < 1e-12 && (t - 1.0).abs() < 1e-12);
        prop_assert!(r.source_mean >= 0.0 && r.source_mean <= 1.0);
    }
}
