mod common;

use common::*;
use proptest::prelude::*;
use vqa_core::data::FrameSequence;
use vqa_core::sampler::*;

#[test]
fn motion_profile_matches_loop_oracle() {
    let mut r = rng(7);
    for _ in 0..100 {
        let n = rand::Rng::random_range(&mut r, 2..9);
        let h = rand::Rng::random_range(&mut r, 1..6);
        let w = rand::Rng::random_range(&mut r, 1..6);
        let v = random_video(&mut r, n, h, w);
        let got = motion_profile(&v).unwrap();
        let want = motion_profile_oracle(v.frames(), h, w);
        assert_eq!(got.len(), n);
        for (a, b) in got.values().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-7);
        }
    }
}

#[test]
fn end_frames_use_their_single_neighbour() {
    let flat = |v: f32| vec![v; 2 * 2 * 3];
    let v = FrameSequence::new("steps", 2, 2, vec![flat(0.0), flat(0.5), flat(0.5), flat(1.0)]).unwrap();
    let p = motion_profile(&v).unwrap();
    assert_eq!(p.values(), &[0.25, 0.125, 0.125, 0.25]);

    let two = FrameSequence::new("pair", 1, 1, vec![vec![0.0; 3], vec![1.0; 3]]).unwrap();
    assert_eq!(motion_profile(&two).unwrap().values(), &[1.0, 1.0]);

    let same = FrameSequence::new("still", 2, 2, vec![flat(0.3); 5]).unwrap();
    assert!(motion_profile(&same).unwrap().values().iter().all(|&m| m == 0.0));

    let one = FrameSequence::new("one", 2, 2, vec![flat(0.3)]).unwrap();
    assert!(matches!(motion_profile(&one), Err(vqa_core::Error::Contract(_))));
}

#[test]
fn reversing_frames_reverses_the_profile() {
    let mut r = rng(8);
    for _ in 0..20 {
        let v = random_video(&mut r, 6, 3, 3);
        let mut rev = v.frames().to_vec();
        rev.reverse();
        let back = FrameSequence::new("rev", 3, 3, rev).unwrap();
        let mut a = motion_profile(&v).unwrap().values().to_vec();
        a.reverse();
        let b = motion_profile(&back).unwrap().values().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn worked_examples() {
    assert_eq!(sample_uniform(16, 8).unwrap(), vec![1, 3, 5, 7, 9, 11, 13, 15]);
    assert_eq!(sample_uniform(10, 3).unwrap(), vec![1, 5, 8]);
    assert_eq!(sample_uniform(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
    let p = MotionProfile::new(vec![0.0, 9.0, 1.0, 5.0]).unwrap();
    assert_eq!(sample_mse_sorted_uniform(&p, 2).unwrap(), vec![0, 3]);
    let p = MotionProfile::new(vec![0.0, 10.0, 0.0, 0.0, 5.0, 5.0, 9.0, 1.0]).unwrap();
    assert_eq!(sample_seg_mse_mean(&p, 4).unwrap(), vec![0, 2, 4, 6]);
    let flat = MotionProfile::new(vec![2.0; 12]).unwrap();
    assert_eq!(sample_seg_mse_mean(&flat, 4).unwrap(), vec![0, 3, 6, 9]);
    assert_eq!(sample_seg_mse_median(&flat, 4).unwrap(), vec![0, 3, 6, 9]);
    for t in [1, 3, 12] {
        assert_eq!(sample_mse_sorted_uniform(&flat, t).unwrap(), sample_uniform(12, t).unwrap());
    }
}

#[test]
fn more_frames_than_available_is_rejected_by_direct_calls() {
    let p = MotionProfile::new(vec![1.0; 4]).unwrap();
    assert!(sample_uniform(4, 5).is_err());
    assert!(sample_random(4, 5, 0).is_err());
    assert!(sample_uniform_random_start(4, 5, 0).is_err());
    assert!(sample_mse_sorted_uniform(&p, 5).is_err());
    assert!(sample_seg_mse_mean(&p, 5).is_err());
    assert!(sample_seg_mse_median(&p, 5).is_err());
}

#[test]
fn short_videos_repeat_cyclically_in_a_plan() {
    let p = MotionProfile::new(vec![1.0, 2.0, 3.0]).unwrap();
    let s = SamplingPlan::new(SamplingStrategy::UNISampl, 7, 0).sample(3, Some(&p)).unwrap();
    assert!(s.repeated);
    assert_eq!(s.indices, vec![0, 1, 2, 0, 1, 2, 0]);
}

#[test]
fn random_sampling_is_uniform() {
    let mut counts = [0usize; 100];
    for seed in 0..10_000 {
        for i in sample_random(100, 8, seed).unwrap() {
            counts[i] += 1;
        }
    }
    for c in counts {
        let f = c as f64 / 10_000.0;
        assert!((f - 0.08).abs() <= 0.01, "frequency {f}");
    }
}

#[test]
fn mixed_draws_each_base_strategy_equally() {
    let p = MotionProfile::new((0..20).map(|i| (i * 7 % 5) as f64).collect()).unwrap();
    let mut counts = std::collections::HashMap::new();
    for seed in 0..6000 {
        let (s, _) = sample_mixed(20, 8, &p, seed).unwrap();
        *counts.entry(s).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 6);
    for s in SamplingStrategy::BASE {
        let c = counts[&s];
        assert!((900..=1100).contains(&c), "{s:?}: {c}");
    }
}

#[test]
fn full_length_request_returns_every_index() {
    let p = MotionProfile::new(vec![3.0, 1.0, 4.0, 1.0, 5.0]).unwrap();
    for s in SamplingStrategy::ALL {
        for seed in 0..5 {
            let got = SamplingPlan::new(s, 5, seed).sample(5, Some(&p)).unwrap();
            assert_eq!(got.indices, vec![0, 1, 2, 3, 4], "{s:?}");
        }
    }
}

fn case() -> impl Strategy<Value = (usize, usize, Vec<f64>, u64)> {
    (1usize..40).prop_flat_map(|n| {
        (
            Just(n),
            1..=n,
            prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..10.0f64], n),
            any::<u64>(),
        )
    })
}

proptest! {
    #[test]
    fn every_strategy_returns_t_distinct_ascending_indices((n, t, m, seed) in case()) {
        let profile = MotionProfile::new(m).unwrap();
        for s in SamplingStrategy::ALL {
            let out = SamplingPlan::new(s, t, seed).sample(n, Some(&profile)).unwrap();
            prop_assert!(!out.repeated);
            prop_assert_eq!(out.indices.len(), t);
            prop_assert!(out.indices.windows(2).all(|w| w[0] < w[1]), "{:?} {:?}", s, out.indices);
            prop_assert!(out.indices.iter().all(|&i| i < n));
            let again = SamplingPlan::new(s, t, seed).sample(n, Some(&profile)).unwrap();
            prop_assert_eq!(out, again);
        }
    }

    #[test]
    fn constant_profile_sorted_uniform_equals_uniform((n, t, _m, _s) in case(), v in 0.0..5.0f64) {
        let flat = MotionProfile::new(vec![v; n]).unwrap();
        prop_assert_eq!(sample_mse_sorted_uniform(&flat, t).unwrap(), sample_uniform(n, t).unwrap());
    }

    #[test]
    fn seg_selection_stays_in_its_segment((n, t, m, _s) in case()) {
        let profile = MotionProfile::new(m).unwrap();
        let (base, extra) = (n / t, n % t);
        for out in [sample_seg_mse_mean(&profile, t).unwrap(), sample_seg_mse_median(&profile, t).unwrap()] {
            let mut start = 0;
            for (s, &i) in out.iter().enumerate() {
                let len = base + usize::from(s < extra);
                prop_assert!((start..start + len).contains(&i));
                start += len;
            }
        }
    }
}
