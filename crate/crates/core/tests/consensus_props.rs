//! Segment planning, consensus fusion and weight sharing.

use evsnn_core::consensus::{
    consensus, eval_plan, forward_segments, plan_segments, predict_ts, ClassDistribution, Consensus, SegmentPlan,
};
use evsnn_core::events::FrameClip;
use evsnn_core::network::{ArchSpec, Mode, Network};
use evsnn_core::tensor::kernels::softmax;
use evsnn_core::tensor::Tensor;
use evsnn_core::training::sample_frames;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [Consensus; 3] = [Consensus::Sum, Consensus::Average, Consensus::Max];

fn random_dist(rng: &mut ChaCha8Rng, c: usize) -> ClassDistribution {
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum();
    ClassDistribution::new(raw.into_iter().map(|v| v / total).collect()).unwrap()
}

#[test]
fn consensus_permutation_and_argmax_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let (l, c) = (rng.random_range(1..6), rng.random_range(2..8));
        let dists: Vec<ClassDistribution> = (0..l).map(|_| random_dist(&mut rng, c)).collect();
        let mut shuffled = dists.clone();
        shuffled.shuffle(&mut rng);
        for kind in KINDS {
            let a = consensus(&dists, kind).unwrap();
            let b = consensus(&shuffled, kind).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 1e-15 * l as f64, "{kind}: {x} vs {y}");
            }
        }
        let sum = consensus(&dists, Consensus::Sum).unwrap().softmax();
        let avg = consensus(&dists, Consensus::Average).unwrap().softmax();
        assert_eq!(sum.argmax(), avg.argmax());
    }
}

#[test]
fn plan_frequencies_match_hypergeometric_marginals() {
    let (total, l, k, draws) = (24, 3, 5, 10_000);
    let mut counts = vec![0usize; total];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..draws {
        let plan = plan_segments(total, l, k, &mut rng).unwrap();
        for i in plan.flat() {
            counts[i] += 1;
        }
    }
    let p = k as f64 / 8.0;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        let dev = (c as f64 - draws as f64 * p).abs();
        assert!(dev <= 5.0 * sigma, "frame {i}: {c} selections, {dev:.1} from expectation");
    }
}

#[test]
fn frame_sampling_frequencies() {
    let (total, count, draws) = (16, 12, 10_000);
    let mut counts = vec![0usize; total];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..draws {
        let idx = sample_frames(total, count, &mut rng).unwrap();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        idx.iter().for_each(|&i| counts[i] += 1);
    }
    let p = count as f64 / total as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    assert!(counts.iter().all(|&c| (c as f64 - draws as f64 * p).abs() <= 5.0 * sigma), "{counts:?}");
    let a = sample_frames(16, 12, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, sample_frames(16, 12, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
}

#[test]
fn plans_are_seed_deterministic() {
    let a = plan_segments(24, 3, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = plan_segments(24, 3, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn plan_invariants(total in 1usize..80, l in 1usize..6, k in 1usize..6, seed in any::<u64>()) {
        prop_assume!(l * k <= total);
        let plan = plan_segments(total, l, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let sizes: Vec<usize> = plan.ranges().iter().map(|r| r.len()).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), total);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(plan.ranges().windows(2).all(|w| w[0].end == w[1].start));
        for (r, idx) in plan.ranges().iter().zip(plan.indices()) {
            prop_assert_eq!(idx.len(), k);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|i| r.contains(i)));
        }
        let e = eval_plan(total, l, k).unwrap();
        prop_assert!(SegmentPlan::from_indices(total, e.indices().to_vec()).is_ok());
    }
}

fn tiny_net() -> Network {
    let mut net = Network::build(&ArchSpec { blocks: 2, ..ArchSpec::sew_2d(4, 3, 8, 8) }, 5).unwrap();
    net.set_mode(Mode::Eval);
    net
}

fn random_clip(rng: &mut ChaCha8Rng, t: usize) -> FrameClip {
    let n = t * 2 * 8 * 8;
    FrameClip::new(Tensor::new([t, 2, 8, 8], (0..n).map(|_| f64::from(rng.random_range(0..3u8))).collect()).unwrap())
        .unwrap()
}

#[test]
fn identical_segments_give_bitwise_identical_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = tiny_net();
    let base = random_clip(&mut rng, 3);
    // frames 3..6 repeat frames 0..3
    let clip = base.select(&[0, 1, 2, 0, 1, 2]).unwrap();
    let plan = SegmentPlan::from_indices(6, vec![vec![0, 2], vec![3, 5]]).unwrap();
    let d = forward_segments(&net, &clip, &plan).unwrap();
    let bits = |c: &ClassDistribution| c.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&d[0]), bits(&d[1]));
}

#[test]
fn forward_segments_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = tiny_net();
    let clip = random_clip(&mut rng, 9);
    let plan = plan_segments(9, 3, 2, &mut rng).unwrap();
    for d in forward_segments(&net, &clip, &plan).unwrap() {
        assert!((d.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let one = SegmentPlan::from_indices(9, vec![vec![1, 4, 7]]).unwrap();
    let d = forward_segments(&net, &clip, &one).unwrap();
    let direct = softmax(&net.forward_clip(&clip.select(&[1, 4, 7]).unwrap()).unwrap());
    assert_eq!(d[0].values, direct.data());
    let y = predict_ts(&net, &clip, &one, Consensus::Average).unwrap();
    assert_eq!(y.argmax(), d[0].argmax());
    let short = random_clip(&mut rng, 4);
    assert!(forward_segments(&net, &short, &plan).is_err());
}

#[test]
fn sum_and_average_predict_the_same_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = tiny_net();
    for _ in 0..5 {
        let clip = random_clip(&mut rng, 9);
        let plan = plan_segments(9, 3, 3, &mut rng).unwrap();
        let s = predict_ts(&net, &clip, &plan, Consensus::Sum).unwrap();
        let a = predict_ts(&net, &clip, &plan, Consensus::Average).unwrap();
        assert_eq!(s.argmax(), a.argmax());
        assert!((s.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
