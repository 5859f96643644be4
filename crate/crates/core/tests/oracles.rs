use approx::assert_abs_diff_eq;
use ndarray::{array, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plda::cps::{cps_loss, dynamic_threshold, refine_cam, PseudoLabelMap, PseudoOrigin, RefineConfig};
use plda::netcore::CamMap;

/// One affinity-averaging step written out with plain loops.
fn reference_step(cam: &CamMap, image: &Array3<f64>, q: f64, temperature: f64) -> Array3<f64> {
    let (c, h, w) = cam.normalized.dim();
    let mut p = Array3::<f64>::zeros((c + 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut m: f64 = 0.0;
            for k in 0..c {
                m = m.max(cam.normalized[[k, y, x]]);
            }
            p[[0, y, x]] = (1.0 - m).powf(q);
            for k in 0..c {
                p[[k + 1, y, x]] = cam.normalized[[k, y, x]];
            }
            let s: f64 = (0..=c).map(|k| p[[k, y, x]]).sum();
            for k in 0..=c {
                p[[k, y, x]] /= s;
            }
        }
    }
    let mut sd = [0.0; 3];
    for (ch, s) in sd.iter_mut().enumerate() {
        let mut mean = 0.0;
        for y in 0..h {
            for x in 0..w {
                mean += image[[ch, y, x]];
            }
        }
        mean /= (h * w) as f64;
        let mut var = 0.0;
        for y in 0..h {
            for x in 0..w {
                var += (image[[ch, y, x]] - mean).powi(2);
            }
        }
        *s = (var / (h * w) as f64).sqrt();
    }
    let mut out = Array3::<f64>::zeros((c + 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut nb = Vec::new();
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let nx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let mut d = 0.0;
                    for ch in 0..3 {
                        d += (image[[ch, y, x]] - image[[ch, ny, nx]]).abs() / (temperature * sd[ch] + 1e-8);
                    }
                    nb.push((ny, nx, (-d / 3.0).exp()));
                }
            }
            let z: f64 = nb.iter().map(|n| n.2).sum();
            for k in 0..=c {
                out[[k, y, x]] = nb.iter().map(|&(ny, nx, a)| a / z * p[[k, ny, nx]]).sum();
            }
            let s: f64 = (0..=c).map(|k| out[[k, y, x]]).sum();
            for k in 0..=c {
                out[[k, y, x]] /= s;
            }
        }
    }
    out
}

#[test]
fn single_step_refinement_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..20 {
        let temperature = if i % 2 == 0 { 1.0 } else { 0.1 };
        let raw = Array3::from_shape_fn((2, 4, 4), |_| rng.random::<f64>());
        let label = [1, 1];
        let cam = CamMap::from_raw(raw, &label).unwrap();
        let image = Array3::from_shape_fn((3, 4, 4), |_| rng.random::<f64>());
        let cfg = RefineConfig {
            iterations: 1,
            dilations: vec![1],
            bg_power: 3.0,
            temperature,
        };
        let got = refine_cam(&cam, &image, &cfg, PseudoOrigin::Original).unwrap();
        let want = reference_step(&cam, &image, 3.0, temperature);
        for (a, b) in got.probs.iter().zip(want.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }
}

#[test]
fn two_pixel_threshold_by_hand() {
    // C = 1: pixel 0 is background-leaning, pixel 1 foreground-leaning
    let probs = Array3::from_shape_vec((2, 1, 2), vec![0.7, 0.2, 0.3, 0.8]).unwrap();
    let p = PseudoLabelMap {
        probs,
        origin: PseudoOrigin::Original,
    };
    let beta = dynamic_threshold(&p, 0.6).unwrap();
    // argmax bg at pixel 0, max bg over the map = 0.7; class at pixel 1, max = 0.8
    assert_abs_diff_eq!(beta[[0, 0]], 0.42, epsilon = 1e-12);
    assert_abs_diff_eq!(beta[[0, 1]], 0.48, epsilon = 1e-12);
}

#[test]
fn three_pixel_cps_by_hand() {
    // C = 2, pixels on a 1x3 grid
    let probs = Array3::from_shape_vec(
        (3, 1, 3),
        vec![
            0.1, 0.5, 0.30, // background
            0.8, 0.3, 0.35, // class 1
            0.1, 0.2, 0.35, // class 2
        ],
    )
    .unwrap();
    let p = PseudoLabelMap {
        probs,
        origin: PseudoOrigin::Original,
    };
    let beta: Array2<f64> = array![[0.4, 0.4, 0.4]];
    let pred: Array3<f64> = Array3::from_shape_vec((3, 1, 3), vec![0.2, 0.6, 0.1, 0.7, 0.3, 0.3, 0.1, 0.1, 0.6]).unwrap();

    // pixel 0: argmax 1 (0.8 > 0.4), pixel 1: argmax 0 (0.5 > 0.4),
    // pixel 2: tie 1/2 at 0.35 goes to 1 and is not confident
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..3 {
        let (mut best, mut c) = (f64::NEG_INFINITY, 0);
        for k in 0..3 {
            if p.probs[[k, 0, i]] > best {
                best = p.probs[[k, 0, i]];
                c = k;
            }
        }
        if best > beta[[0, i]] {
            total += -pred[[c, 0, i]].ln();
            n += 1;
        }
    }
    let want = total / n as f64;
    assert_eq!(n, 2);
    assert_abs_diff_eq!(want, (-(0.7f64).ln() - (0.6f64).ln()) / 2.0, epsilon = 1e-12);
    let got = cps_loss(&pred, &p, &[0, 1, 2], &beta).unwrap();
    assert_abs_diff_eq!(got, want, epsilon = 1e-6);
    assert_eq!(cps_loss(&pred, &p, &[2], &beta).unwrap(), 0.0);
    assert!(cps_loss(&pred, &p, &[3], &beta).is_err());
}
