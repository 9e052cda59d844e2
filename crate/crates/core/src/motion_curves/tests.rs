use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{check_param_gradients, Graph, Init, ParamStore, Tensor};
use crate::nn::Activation;

fn random_curves(seed: u64, frames: usize, categories: usize) -> MotionCurveSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = (0..frames * categories).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0))).collect();
    MotionCurveSet { frames, categories, coords, present: vec![true; frames * categories] }
}

fn single(values: [f64; COORDS]) -> MotionCurveSet {
    MotionCurveSet { frames: 1, categories: 1, coords: vec![values], present: vec![true] }
}

#[test]
fn extract_full_frame_and_arithmetic_examples() {
    let c = extract_curves(&[[0.0, 0.0, 64.0, 64.0], [22.0, 26.0, 42.0, 38.0]], &[true, true], 1, 2, 64, 64).unwrap();
    assert_eq!(c.at(0, 0), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    assert_eq!(&c.at(0, 1)[..2], &[0.34375, 0.40625]);
    let boxes = c.boxes(64, 64);
    assert_eq!(boxes[1], [22.0, 26.0, 42.0, 38.0]);
}

#[test]
fn absent_entries_are_zero_filled() {
    let c = extract_curves(&[[3.0, 3.0, 9.0, 9.0]], &[false], 1, 1, 16, 16).unwrap();
    assert_eq!(c.at(0, 0), &[0.0; COORDS]);
    assert!(!c.is_present(0, 0));
}

#[test]
fn degenerate_box_keeps_coincident_corners() {
    let c = extract_curves(&[[8.0, 8.0, 8.0, 8.0]], &[true], 1, 1, 16, 16).unwrap();
    assert!(c.is_present(0, 0));
    assert!(c.at(0, 0).iter().all(|&v| v == 0.5));
}

#[test]
fn fourier_small_examples() {
    let f = fourier_features(&single([0.0; COORDS]), 2, EncodingMode::PerCoordinate);
    assert_eq!(&f[..4], &[0.0, 1.0, 0.0, 1.0]);
    let f = fourier_features(&single([0.25; COORDS]), 2, EncodingMode::PerCoordinate);
    let want = [1.0, 0.0, 0.0, -1.0];
    for (a, b) in f[..4].iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(f.len(), 8 * 2 * 2);
}

#[test]
fn grid_curve_sets_have_distinct_encodings() {
    // Half-open grid k/17: the features are 1-periodic in each coordinate, so
    // the closed grid would map 0 and 1 to the same code.
    let mut sets = Vec::new();
    for slot in 0..COORDS {
        for k in 0..17 {
            let mut v = [0.5; COORDS];
            v[slot] = k as f64 / 17.0;
            sets.push(v);
        }
    }
    sets.dedup();
    let codes: Vec<Vec<f64>> = sets.iter().map(|v| fourier_features(&single(*v), 8, EncodingMode::PerCoordinate)).collect();
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            if sets[i] == sets[j] {
                continue;
            }
            let d: f64 = codes[i].iter().zip(&codes[j]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-6, "sets {i} and {j} collide");
        }
    }
}

#[test]
fn placeholder_substitution() {
    let mut c = random_curves(1, 2, 2);
    c.present[3] = false;
    let bank: Vec<f64> = (0..2 * 32).map(|i| i as f64).collect();
    let enc = fourier_encode(&c, 2, EncodingMode::PerCoordinate, &bank).unwrap();
    assert_eq!(&enc[3 * 32..4 * 32], &bank[32..64]);
    let raw = fourier_features(&c, 2, EncodingMode::PerCoordinate);
    assert_eq!(&enc[..3 * 32], &raw[..3 * 32]);
    assert!(fourier_encode(&c, 2, EncodingMode::PerCoordinate, &bank[..10]).is_err());
}

#[test]
fn temporal_dft_reconstructs_the_trajectory() {
    // Summing all N harmonics' real parts gives back the sequence.
    let c = random_curves(2, 6, 1);
    let f = fourier_features(&c, 6, EncodingMode::TemporalDft);
    let e = 2 * COORDS * 6;
    for t in 0..6 {
        for j in 0..COORDS {
            let sum: f64 = (0..6).map(|k| f[t * e + (j * 6 + k) * 2]).sum();
            assert!((sum - c.at(t, 0)[j]).abs() < 1e-12);
        }
    }
}

fn encoder(levels: usize, dim: usize, activation: Activation) -> (ParamStore<f64>, MotionEncoder) {
    let mut store = ParamStore::new();
    let cfg = MotionEncoderConfig { levels, dim, depth: 2, activation, mode: EncodingMode::PerCoordinate };
    let enc = MotionEncoder::new(&mut store, &mut Init::new(5), "motion", cfg, 2).unwrap();
    (store, enc)
}

#[test]
fn zero_mlp_gives_zero_embedding() {
    let (mut store, enc) = encoder(2, 4, Activation::Silu);
    for l in &enc.mlp.layers {
        store.value_mut(l.w).data.fill(0.0);
    }
    let mut g = Graph::inference();
    let y = enc.embed(&mut g, &store, &random_curves(3, 3, 2)).unwrap();
    assert_eq!(g.shape(y), &[6, 4]);
    assert!(g.value(y).data.iter().all(|&v| v == 0.0));
}

#[test]
fn identity_mlp_passes_encoding_through() {
    let (mut store, enc) = encoder(2, 32, Activation::Identity);
    for l in &enc.mlp.layers {
        let w = store.value_mut(l.w);
        w.data.fill(0.0);
        for i in 0..32 {
            w.data[i * 32 + i] = 1.0;
        }
    }
    let curves = random_curves(4, 2, 2);
    let mut g = Graph::inference();
    let y = enc.embed(&mut g, &store, &curves).unwrap();
    assert_eq!(g.value(y).data, fourier_features(&curves, 2, EncodingMode::PerCoordinate));
}

#[test]
fn embed_rejects_wrong_width() {
    let (store, enc) = encoder(2, 4, Activation::Silu);
    let mut g = Graph::inference();
    let x = g.input(Tensor::zeros(&[3, 31]));
    assert!(enc.embed_encoded(&mut g, &store, x).is_err());
    let wrong = random_curves(1, 2, 3);
    assert!(enc.embed(&mut g, &store, &wrong).is_err());
}

#[test]
fn embedding_golden_checksum() {
    let mut store = ParamStore::<f32>::new();
    let enc = MotionEncoder::new(&mut store, &mut Init::new(2024), "motion", MotionEncoderConfig::default(), 4).unwrap();
    let mut curves = random_curves(7, 12, 4);
    curves.present[5] = false;
    let mut g = Graph::inference();
    let y = enc.embed(&mut g, &store, &curves).unwrap();
    let v = g.value(y);
    assert_eq!(v.shape, vec![48, 256]);
    let sum: f64 = v.data.iter().map(|&x| x as f64).sum();
    let sq: f64 = v.data.iter().map(|&x| (x as f64).powi(2)).sum();
    assert!((sum - GOLDEN_SUM).abs() < 1e-4 && (sq - GOLDEN_SQ).abs() < 1e-4, "sum {sum:.6} sq {sq:.6}");
}

const GOLDEN_SUM: f64 = -59.181165;
const GOLDEN_SQ: f64 = 1952.011003;

#[test]
fn embed_motion_gradients_match_finite_differences() {
    let (store, enc) = encoder(2, 5, Activation::Silu);
    let mut curves = random_curves(8, 2, 2);
    curves.present[1] = false;
    let report = check_param_gradients(&store, 1e-4, 12, |g, s| {
        let y = enc.embed(g, s, &curves).unwrap();
        let w = g.input(Init::new(3).normal(&[4, 5], 1.0));
        let p = g.mul(y, w);
        g.sum(p)
    });
    assert!(report.checked > 30);
    assert!(report.max_rel_err <= 1e-3, "{report:?}");
}

#[test]
fn absent_coordinates_do_not_leak() {
    let (store, enc) = encoder(2, 4, Activation::Silu);
    let mut a = random_curves(9, 3, 2);
    a.present[2] = false;
    let mut b = a.clone();
    b.coords[2] = [0.9; COORDS];
    let run = |c: &MotionCurveSet| {
        let mut g = Graph::inference();
        let y = enc.embed(&mut g, &store, c).unwrap();
        g.value(y).data.clone()
    };
    assert_eq!(run(&a), run(&b));
    let sa = scale_curve(&a, 0, 1.7).unwrap().curves;
    let sb = scale_curve(&b, 0, 1.7).unwrap().curves;
    for t in [0, 2] {
        assert_eq!(sa.at(t, 0), sb.at(t, 0));
    }
}

#[test]
fn scale_examples() {
    let c = MotionCurveSet { frames: 2, categories: 1, coords: vec![[0.4; COORDS], [0.6; COORDS]], present: vec![true; 2] };
    let s = scale_curve(&c, 0, 1.5).unwrap();
    assert!((s.curves.at(0, 0)[0] - 0.35).abs() < 1e-12 && (s.curves.at(1, 0)[0] - 0.65).abs() < 1e-12);
    assert_eq!(s.clamped, 0);
    assert_eq!(scale_curve(&c, 0, 1.0).unwrap().curves, c);
    let flat = scale_curve(&c, 0, 0.0).unwrap().curves;
    assert!(flat.coords.iter().all(|v| (v[0] - 0.5).abs() < 1e-12));
    assert!(scale_curve(&c, 1, 1.0).is_err());
    assert!(scale_curve(&c, 0, -1.0).is_err());
    let big = scale_curve(&c, 0, 10.0).unwrap();
    assert_eq!(big.clamped, 2 * COORDS);
    assert!(big.curves.coords.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn replace_examples() {
    let a = random_curves(10, 4, 3);
    let b = random_curves(11, 4, 3);
    assert_eq!(replace_curve(&a, &a, 1).unwrap(), a);
    let ab = replace_curve(&a, &b, 1).unwrap();
    assert_eq!(replace_curve(&ab, &a, 1).unwrap(), a);
    let x = replace_curve(&replace_curve(&a, &b, 0).unwrap(), &b, 2).unwrap();
    let y = replace_curve(&replace_curve(&a, &b, 2).unwrap(), &b, 0).unwrap();
    assert_eq!(x, y);
    assert!(replace_curve(&a, &random_curves(1, 5, 3), 0).is_err());
}

#[test]
fn resample_examples() {
    let c = random_curves(12, 5, 2);
    assert_eq!(resample_curve(&c, 5).unwrap(), c);
    let ramp = MotionCurveSet {
        frames: 3,
        categories: 1,
        coords: vec![[0.0; COORDS], [0.5; COORDS], [1.0; COORDS]],
        present: vec![true; 3],
    };
    let r = resample_curve(&ramp, 5).unwrap();
    let got: Vec<f64> = r.coords.iter().map(|v| v[0]).collect();
    assert_eq!(got, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert!(resample_curve(&c, 1).is_err());
}

#[test]
fn resample_round_trip_is_exact_at_knots() {
    // Halving the frame interval keeps the original knots on the fine grid.
    for n in [2, 5, 12] {
        let c = random_curves(n as u64, n, 3);
        let back = resample_curve(&resample_curve(&c, 2 * n - 1).unwrap(), n).unwrap();
        let err = c.coords.iter().flatten().zip(back.coords.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "n={n}: {err}");
    }
    let c = random_curves(1, 2, 1);
    let back = resample_curve(&resample_curve(&c, 4).unwrap(), 2).unwrap();
    assert_eq!(back, c);
}

#[test]
fn curve_file_round_trip_is_bit_exact() {
    let mut c = random_curves(13, 6, 4);
    c.present[7] = false;
    c.coords[7] = [0.0; COORDS];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    c.write(&path).unwrap();
    assert_eq!(MotionCurveSet::read(&path).unwrap(), c);
    assert!(MotionCurveSet::from_json(&c.to_json().unwrap().replace("ecm-curves/1", "ecm-curves/9")).is_err());
    assert!(MotionCurveSet::from_json("{\"version\": \"ecm-curves/1\"").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fourier_is_lipschitz(v in 0.0f64..1.0, dv in -0.01f64..0.01, levels in 1usize..9) {
        let a = fourier_features(&single([v; COORDS]), levels, EncodingMode::PerCoordinate);
        let b = fourier_features(&single([v + dv; COORDS]), levels, EncodingMode::PerCoordinate);
        let bound = TAU_LIP * (1u64 << (levels - 1)) as f64 * dv.abs() + 1e-12;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= bound);
        }
    }

    #[test]
    fn scaling_preserves_temporal_mean(seed in any::<u64>(), factor in 0.0f64..3.0, cat in 0usize..3) {
        let c = random_curves(seed, 6, 3);
        let s = scale_curve(&c, cat, factor).unwrap();
        for k in 0..COORDS {
            let m0: f64 = (0..6).map(|t| c.at(t, cat)[k]).sum::<f64>() / 6.0;
            let m1: f64 = (0..6).map(|t| s.curves.at(t, cat)[k]).sum::<f64>() / 6.0;
            let moved: f64 = (0..6).map(|t| {
                let raw = m0 + factor * (c.at(t, cat)[k] - m0);
                (raw - s.curves.at(t, cat)[k]).abs()
            }).sum::<f64>() / 6.0;
            prop_assert!((m1 - m0).abs() <= moved + 1e-12);
        }
        for t in 0..6 {
            for other in (0..3).filter(|&o| o != cat) {
                prop_assert_eq!(c.at(t, other), s.curves.at(t, other));
            }
        }
    }

    #[test]
    fn encoding_is_deterministic(seed in any::<u64>()) {
        let c = random_curves(seed, 3, 2);
        prop_assert_eq!(fourier_features(&c, 4, EncodingMode::PerCoordinate), fourier_features(&c, 4, EncodingMode::PerCoordinate));
    }
}

const TAU_LIP: f64 = std::f64::consts::TAU;
