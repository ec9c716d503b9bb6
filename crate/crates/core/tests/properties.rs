use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ccgrasp::evalbench::{report_rows, EvalReport, SplitResult};
use ccgrasp::flow::{consistency_calls, euler_step, sample_consistency, ConsistencyFn, StandardNormalField};
use ccgrasp::geometry::{angle_offset, decode_pose, encode_pose, harmonic_mean, rect_iou, GraspPose, PoseVec};
use ccgrasp::network::{ConsistencyNet, EmaCopy, TrunkSpec};
use ccgrasp::objectives::{detection_loss, score_loss, TrainBatch};
use ccgrasp::network::ScoreNet;
use ccgrasp::schedule::NoiseSchedule;
use ccgrasp::synthdata::{generate_sample, DatasetConfig};
use ccgrasp::{Error, Result};

fn pose() -> impl Strategy<Value = GraspPose> {
    (5.0..95.0f64, 5.0..95.0f64, 0.5..30.0f64, 0.5..30.0f64, -3.0..3.0f64)
        .prop_map(|(x, y, w, h, t)| GraspPose::new(x, y, w, h, t).unwrap())
}

fn vec5(r: f64) -> impl Strategy<Value = PoseVec> {
    prop::array::uniform5(-r..r).prop_map(PoseVec)
}

fn small_spec(cond_dim: usize) -> TrunkSpec {
    TrunkSpec {
        hidden_width: 8,
        hidden_layers: 2,
        ..TrunkSpec::new(cond_dim)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_is_decreasing_in_unit_interval(a in 0.0..1000.0f64, b in 0.0..1000.0f64) {
        let s = NoiseSchedule::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (al, ah) = (s.alpha(lo).unwrap(), s.alpha(hi).unwrap());
        prop_assert!(ah <= al);
        prop_assert!(ah > 0.0 && al <= 1.0);
    }

    #[test]
    fn schedule_rejects_times_outside_domain(t in prop_oneof![-1e6..-1e-9f64, 1000.000001..1e6f64]) {
        let s = NoiseSchedule::default();
        let rejected = matches!(s.alpha(t), Err(Error::Domain { .. }));
        prop_assert!(rejected);
    }

    #[test]
    fn encode_decode_round_trip(g in pose()) {
        let v = encode_pose(&g, 100.0).unwrap();
        let back = decode_pose(&v, 100.0);
        prop_assert!((back.cx() - g.cx()).abs() < 1e-9);
        prop_assert!((back.cy() - g.cy()).abs() < 1e-9);
        prop_assert!((back.w() - g.w()).abs() < 1e-9);
        prop_assert!((back.h() - g.h()).abs() < 1e-9);
        prop_assert!(angle_offset(&back, &g) < 1e-9);
    }

    #[test]
    fn decode_is_always_a_valid_rectangle(v in vec5(5.0)) {
        let g = decode_pose(&v, 100.0);
        prop_assert!(g.w() >= 0.1 && g.h() >= 0.1);
        prop_assert!(g.theta() >= -std::f64::consts::FRAC_PI_2 && g.theta() < std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn iou_symmetric_and_bounded(a in pose(), b in pose()) {
        let ab = rect_iou(&a, &b).value;
        let ba = rect_iou(&b, &a).value;
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((rect_iou(&a, &a).value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_invariant_under_common_translation(a in pose(), b in pose(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let shift = |g: &GraspPose| GraspPose::new(g.cx() + dx, g.cy() + dy, g.w(), g.h(), g.theta()).unwrap();
        let d = rect_iou(&a, &b).value - rect_iou(&shift(&a), &shift(&b)).value;
        prop_assert!(d.abs() < 1e-9);
    }

    #[test]
    fn angle_offset_in_range(a in pose(), b in pose()) {
        let d = angle_offset(&a, &b);
        prop_assert!((0.0..=std::f64::consts::FRAC_PI_2).contains(&d));
    }

    #[test]
    fn harmonic_mean_between_min_and_max(a in 0.01..1.0f64, b in 0.01..1.0f64) {
        let h = harmonic_mean(a, b);
        prop_assert!(h >= a.min(b) - 1e-12 && h <= a.max(b) + 1e-12);
        prop_assert!((h - harmonic_mean(b, a)).abs() < 1e-15);
    }

    #[test]
    fn stationary_field_never_moves(x in vec5(4.0), t in 2.0..1000.0f64, frac in 0.0..1.0f64) {
        let s = NoiseSchedule::default();
        let to = 1.0 + frac * (t - 1.0);
        let next = euler_step(&StandardNormalField, &x, t, to, &[], &s).unwrap();
        prop_assert!((next - x).norm() <= 1e-12 * (1.0 + x.norm()));
    }

    #[test]
    fn boundary_returns_input_bit_exactly(x in vec5(3.0), t in 0.0..=1.0f64, seed in 0u64..1000) {
        let net = ConsistencyNet::new(&small_spec(2), 1000.0, 1.0, seed).unwrap();
        prop_assert_eq!(net.forward(&x, t, &[0.5, -0.5]).unwrap(), x);
    }

    #[test]
    fn sampler_call_count(p in 1usize..20, seed in 0u64..100) {
        struct Count(std::cell::Cell<usize>);
        impl ConsistencyFn for Count {
            fn evaluate(&self, x: &PoseVec, _: f64, _: &[f64]) -> Result<PoseVec> {
                self.0.set(self.0.get() + 1);
                Ok(*x)
            }
        }
        let s = NoiseSchedule::default();
        let f = Count(std::cell::Cell::new(0));
        let out = sample_consistency(&f, &[], p, &s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(f.0.get(), consistency_calls(p));
        prop_assert_eq!(out.evaluations(), 1 + p.saturating_sub(2));
    }

    #[test]
    fn ema_stays_between_target_and_online(decay in 0.0..1.0f64, s1 in 0u64..50, s2 in 50u64..100) {
        let spec = small_spec(1);
        let a = ConsistencyNet::new(&spec, 1000.0, 1.0, s1).unwrap();
        let b = ConsistencyNet::new(&spec, 1000.0, 1.0, s2).unwrap();
        let mut ema = EmaCopy::new(&a, decay).unwrap();
        ema.update(&b).unwrap();
        let pa = a.inner().trunk().param_slices();
        let pb = b.inner().trunk().param_slices();
        let pe = ema.net().inner().trunk().param_slices();
        for ((x, y), e) in pa.iter().zip(&pb).zip(&pe) {
            for ((x, y), e) in x.iter().zip(y.iter()).zip(e.iter()) {
                prop_assert!(*e >= x.min(*y) - 1e-12 && *e <= x.max(*y) + 1e-12);
            }
        }
    }

    #[test]
    fn losses_are_nonnegative_and_finite(seed in 0u64..200, n in 1usize..6) {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<PoseVec> = (0..n).map(|k| PoseVec([0.1 * k as f64; 5])).collect();
        let ys: Vec<Vec<f64>> = (0..n).map(|k| vec![k as f64, 1.0]).collect();
        let batch = TrainBatch::new(xs, ys).unwrap();
        let mut score = ScoreNet::new(&small_spec(2), 1000.0, seed).unwrap();
        let (l, g) = score_loss(&mut score, &batch, &s, &mut rng).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite() && g.norm().is_finite());
        let mut f = ConsistencyNet::new(&small_spec(2), 1000.0, 1.0, seed).unwrap();
        let grid = s.uniform_grid(50).unwrap();
        let (d, _) = detection_loss(&mut f, &grid, &batch, &s, &mut rng).unwrap();
        prop_assert!(d >= 0.0 && d.is_finite());
    }

    #[test]
    fn generated_samples_are_reproducible(seed in 0u64..1000, index in 0u64..1000) {
        let cfg = DatasetConfig::default();
        let a = generate_sample(&cfg, seed, index).unwrap();
        let b = generate_sample(&cfg, seed, index).unwrap();
        prop_assert!(ccgrasp::synthdata::self_consistent(&a));
        let norm: f64 = a.condition[64..].iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn report_rates_are_exact_ratios(sn in 1usize..600, ss in 0usize..600, un in 1usize..600, us in 0usize..600) {
        let seen = SplitResult { n: sn, successes: ss.min(sn) };
        let unseen = SplitResult { n: un, successes: us.min(un) };
        let r = EvalReport {
            sampler_id: "llgd".into(),
            steps: 3,
            seen,
            unseen,
            harmonic: harmonic_mean(seen.rate(), unseen.rate()),
            latency: None,
            seed: 0,
            config_hash: String::new(),
        };
        let rows = report_rows(&[r]);
        prop_assert_eq!(rows.len(), 2);
        prop_assert_eq!(rows[0].rate, seen.successes as f64 / sn as f64);
        prop_assert_eq!(rows[1].rate, unseen.successes as f64 / un as f64);
    }
}
