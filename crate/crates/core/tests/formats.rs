//! File-format round trips, slicing and integration invariants, and the
//! synthetic generator's contract.

use evsnn_core::events::{
    integrate_frames, parse_events, slice_by_count, synth_moving_bar, write_events, Direction, Event, EventFormat,
    EventStream, FrameClip,
};
use evsnn_core::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use evsnn_core::tensor::Tensor;
use evsnn_core::Error;
use proptest::prelude::*;

fn arb_stream(max_events: usize) -> impl Strategy<Value = EventStream> {
    (1u32..200, 1u32..200).prop_flat_map(move |(w, h)| {
        let event = (0..w as u16, 0..h as u16, 0u64..u64::MAX, 0u8..=1).prop_map(|(x, y, t, p)| Event::new(x, y, t, p));
        proptest::collection::vec(event, 0..max_events)
            .prop_map(move |events| EventStream::new(w, h, events).expect("valid by construction"))
    })
}

fn arb_clip() -> impl Strategy<Value = FrameClip> {
    (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(t, h, w)| {
        proptest::collection::vec(0.0f32..1e6, t * 2 * h * w).prop_map(move |v| {
            let data = v.into_iter().map(f64::from).collect();
            FrameClip::new(Tensor::new([t, 2, h, w], data).unwrap()).unwrap()
        })
    })
}

fn arb_checkpoint() -> impl Strategy<Value = Vec<(String, Tensor)>> {
    let tensor = proptest::collection::vec(1usize..4, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        proptest::collection::vec(proptest::num::f64::ANY, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
    });
    proptest::collection::vec(("[a-z.0-9]{0,12}", tensor), 0..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn evt1_round_trip(s in arb_stream(300)) {
        let bytes = write_events(&s, EventFormat::Binary);
        let back = parse_events(&bytes, EventFormat::Binary).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(write_events(&back, EventFormat::Binary), bytes);
    }

    #[test]
    fn csv_round_trip(s in arb_stream(100)) {
        let bytes = write_events(&s, EventFormat::Csv);
        let back = parse_events(&bytes, EventFormat::Csv).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(write_events(&back, EventFormat::Csv), bytes);
    }

    #[test]
    fn frc1_round_trip(c in arb_clip()) {
        let bytes = c.to_frc_bytes();
        let back = FrameClip::from_frc_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_frc_bytes(), bytes);
    }

    #[test]
    fn ckpt1_round_trip(entries in arb_checkpoint()) {
        let bytes = write_checkpoint(&entries);
        let back = read_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.len(), entries.len());
        prop_assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn slicing_is_balanced_and_covering(n in 1usize..5000, t in 1usize..64) {
        prop_assume!(t <= n);
        let events = (0..n).map(|i| Event::new(0, 0, i as u64, 0)).collect();
        let s = EventStream::new(1, 1, events).unwrap();
        let r = slice_by_count(&s, t).unwrap();
        prop_assert_eq!(r.len(), t);
        prop_assert_eq!(r[0].start, 0);
        prop_assert_eq!(r[t - 1].end, n);
        prop_assert!(r.windows(2).all(|w| w[0].end == w[1].start));
        let sizes: Vec<usize> = r.iter().map(|x| x.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]), "extra events go to the earliest slices");
    }

    #[test]
    fn integration_matches_brute_force_counter(s in arb_stream(500), t in 1usize..8) {
        prop_assume!(s.len() >= t);
        let slices = slice_by_count(&s, t).unwrap();
        let clip = integrate_frames(&s, &slices).unwrap();
        prop_assert_eq!(clip.mass(), s.len() as f64);
        let (h, w) = (s.height() as usize, s.width() as usize);
        let mut want = vec![0.0; t * 2 * h * w];
        for (k, r) in slices.iter().enumerate() {
            for e in &s.events()[r.clone()] {
                want[((k * 2 + e.p as usize) * h + e.y as usize) * w + e.x as usize] += 1.0;
            }
            let frame_sum: f64 = clip.frame(k).iter().sum();
            prop_assert_eq!(frame_sum, r.len() as f64);
        }
        prop_assert_eq!(clip.tensor().data(), &want[..]);
    }
}

#[test]
fn slicing_examples() {
    let s = |n: usize| EventStream::new(1, 1, (0..n).map(|i| Event::new(0, 0, i as u64, 0)).collect()).unwrap();
    let sizes = |n, t| slice_by_count(&s(n), t).unwrap().iter().map(|r| r.len()).collect::<Vec<_>>();
    assert_eq!(sizes(10, 2), [5, 5]);
    assert_eq!(sizes(7, 3), [3, 2, 2]);
    let big = sizes(1_000_003, 16);
    assert_eq!(big.iter().sum::<usize>(), 1_000_003);
    assert!(big.iter().max().unwrap() - big.iter().min().unwrap() <= 1);
    assert!(matches!(
        slice_by_count(&s(3), 4),
        Err(Error::InsufficientEvents { available: 3, required: 4 })
    ));
    assert!(slice_by_count(&s(3), 0).is_err());
}

/// 500 random streams, checked without proptest shrinking so the count is exact.
#[test]
fn conservation_over_500_streams() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let (w, h) = (rng.random_range(1..40u16), rng.random_range(1..40u16));
        let n = rng.random_range(1..800);
        let events = (0..n)
            .map(|_| Event::new(rng.random_range(0..w), rng.random_range(0..h), rng.random_range(0..10_000), rng.random_range(0..=1)))
            .collect();
        let s = EventStream::new(u32::from(w), u32::from(h), events).unwrap();
        let t = rng.random_range(1..=n.min(24));
        let slices = slice_by_count(&s, t).unwrap();
        let sizes: Vec<usize> = slices.iter().map(|r| r.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(integrate_frames(&s, &slices).unwrap().mass(), n as f64);
    }
}

#[test]
fn integrate_counting_examples() {
    let s = EventStream::new(4, 4, vec![Event::new(1, 2, 5, 1); 3]).unwrap();
    let c = integrate_frames(&s, &[0..3]).unwrap();
    assert_eq!(c.tensor().get(&[0, 1, 2, 1]), 3.0);
    assert_eq!(c.mass(), 3.0);
    let c = integrate_frames(&s, &[0..0, 0..3]).unwrap();
    assert!(c.frame(0).iter().all(|&v| v == 0.0));
    assert!(matches!(integrate_frames(&s, &[0..4]), Err(Error::Internal(_))));
}

#[test]
fn csv_single_record() {
    let s = parse_events(b"# width=10 height=10\nx,y,t,p\n3,4,100,1\n", EventFormat::Csv).unwrap();
    assert_eq!(s.events(), &[Event::new(3, 4, 100, 1)]);
    let err = parse_events(b"# width=10 height=10\nx,y,t,p\n3,4,100,1\n3,4,100,2\n", EventFormat::Csv).unwrap_err();
    assert!(matches!(err, Error::InvalidRecord { index: 1, .. }), "{err}");
}

#[test]
fn unordered_input_is_stably_sorted() {
    let events = vec![Event::new(0, 0, 9, 0), Event::new(1, 0, 3, 0), Event::new(2, 0, 3, 1)];
    let s = EventStream::new(4, 1, events).unwrap();
    let xs: Vec<u16> = s.events().iter().map(|e| e.x).collect();
    assert_eq!(xs, [1, 2, 0]);
}

fn mean_x_per_slice(s: &EventStream, t: usize) -> Vec<f64> {
    slice_by_count(s, t)
        .unwrap()
        .into_iter()
        .map(|r| {
            let n = r.len() as f64;
            s.events()[r].iter().map(|e| f64::from(e.x)).sum::<f64>() / n
        })
        .collect()
}

#[test]
fn synthetic_bar_contract() {
    let right = synth_moving_bar(32, 32, 20, Direction::Right, 2000, 3).unwrap();
    let left = synth_moving_bar(32, 32, 20, Direction::Left, 2000, 3).unwrap();
    assert_eq!(right, synth_moving_bar(32, 32, 20, Direction::Right, 2000, 3).unwrap());
    for ((r, dr), (l, dl)) in right.iter().zip(&left) {
        assert_eq!((*dr, *dl), (Direction::Right, Direction::Left));
        assert_eq!(r.len(), 2000);
        assert!(r.events().windows(2).all(|w| w[0].t < w[1].t));
        for (a, b) in r.events().iter().zip(l.events()) {
            assert_eq!(a.x, 31 - b.x, "mirror image");
            assert_eq!((a.y, a.t, a.p), (b.y, b.t, b.p));
        }
        let mr = mean_x_per_slice(r, 8);
        let ml = mean_x_per_slice(l, 8);
        assert!(mr.windows(2).all(|w| w[0] < w[1]), "{mr:?}");
        assert!(ml.windows(2).all(|w| w[0] > w[1]), "{ml:?}");
    }
}
