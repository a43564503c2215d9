//! Optimizer recurrences, schedule, determinism and small overfitting runs.

use evsnn_core::events::{integrate_frames, slice_by_count, synth_moving_bar, Direction, FrameClip};
use evsnn_core::network::{ArchSpec, Mode, Network};
use evsnn_core::tensor::checkpoint::write_checkpoint;
use evsnn_core::tensor::Tensor;
use evsnn_core::training::{
    adam_step, batch_input, cosine_lr, evaluate, predict, sgd_step, train_epoch, train_step, ModelKind, OptimizerKind,
    OptimizerState, Sample, TrainConfig, Trainer, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
use evsnn_core::Error;
use proptest::prelude::*;

fn small_3d(h: usize, w: usize, frames: usize, train_frames: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(ModelKind::Snn3d, h, w);
    cfg.arch = ArchSpec { blocks: 2, ..ArchSpec::sew_3d(4, [3, 3, 3], 2, h, w) };
    cfg.frames = frames;
    cfg.train_frames = train_frames;
    cfg
}

fn bar_data(size: usize, per_class: usize, events: usize, frames: usize, seed: u64) -> Vec<Sample> {
    let mut data = Vec::new();
    for dir in [Direction::Right, Direction::Left] {
        for (s, d) in synth_moving_bar(size as u32, size as u32, per_class, dir, events, seed).unwrap() {
            let clip = integrate_frames(&s, &slice_by_count(&s, frames).unwrap()).unwrap();
            data.push(Sample { clip, label: d.label() });
        }
    }
    data
}

#[test]
fn sgd_two_momentum_steps_match_hand_unrolled() {
    let (g, lr, mu) = (0.5, 0.1, 0.9);
    let mut p = vec![Tensor::scalar(2.0)];
    let mut st = OptimizerState::new(OptimizerKind::Sgd, &p);
    for _ in 0..2 {
        sgd_step(&mut p, &[Tensor::scalar(g)], &mut st, lr, mu).unwrap();
    }
    // v1 = g, v2 = mu*g + g
    let want = 2.0 - lr * g - lr * (mu * g + g);
    assert!((p[0].data()[0] - want).abs() < 1e-15);
    assert_eq!(st.step, 2);
}

#[test]
fn sgd_zero_gradient_from_rest_is_noop() {
    let mut p = vec![Tensor::full([4], -0.3)];
    let mut st = OptimizerState::new(OptimizerKind::Sgd, &p);
    for _ in 0..3 {
        sgd_step(&mut p, &[Tensor::zeros([4])], &mut st, 0.1, 0.9).unwrap();
    }
    assert_eq!(p[0].data(), &[-0.3; 4]);
}

#[test]
fn adam_three_steps_match_hand_unrolled() {
    let (g, lr) = (0.5, 0.001);
    let mut p = vec![Tensor::scalar(1.0)];
    let mut st = OptimizerState::new(OptimizerKind::Adam, &p);
    let (mut m, mut v, mut want) = (0.0, 0.0, 1.0);
    for t in 1..=3 {
        adam_step(&mut p, &[Tensor::scalar(g)], &mut st, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mhat = m / (1.0 - 0.9f64.powi(t));
        let vhat = v / (1.0 - 0.999f64.powi(t));
        want -= lr * mhat / (vhat.sqrt() + 1e-8);
        assert!((p[0].data()[0] - want).abs() < 1e-12, "step {t}");
    }
    assert_eq!(st.step, 3);
}

#[test]
fn adam_first_step_is_sign_step() {
    let grads = Tensor::new([4], vec![3.0, -0.01, 1e-3, -250.0]).unwrap();
    let mut p = vec![Tensor::zeros([4])];
    let mut st = OptimizerState::new(OptimizerKind::Adam, &p);
    adam_step(&mut p, std::slice::from_ref(&grads), &mut st, 0.01, ADAM_BETA1, ADAM_BETA2, 0.0).unwrap();
    for (d, g) in p[0].data().iter().zip(grads.data()) {
        assert!((d + 0.01 * g.signum()).abs() < 1e-12, "{d} for g = {g}");
    }
}

proptest! {
    #[test]
    fn cosine_is_non_increasing(t_max in 1usize..500, lr0 in 1e-6f64..1.0) {
        let lrs: Vec<f64> = (0..=t_max).map(|t| cosine_lr(t, t_max, lr0).unwrap()).collect();
        prop_assert_eq!(lrs[0], lr0);
        prop_assert_eq!(lrs[t_max], 0.0);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn zero_learning_rate_epoch_leaves_parameters_unchanged() {
    let data = bar_data(8, 2, 200, 6, 1);
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let cfg = TrainConfig { optimizer, epochs: 3, ..small_3d(8, 8, 6, 4) };
        let mut net = Network::build(&cfg.arch, 2).unwrap();
        let before = net.params().to_vec();
        let mut opt = OptimizerState::new(optimizer, net.params());
        // cosine_lr(epochs, epochs, lr0) = 0
        train_epoch(&mut net, &data, &cfg, &mut opt, cfg.epochs).unwrap();
        for (a, b) in before.iter().zip(net.params()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(opt.step > 0);
    }
}

#[test]
fn train_epoch_rejects_mismatched_data() {
    let cfg = small_3d(8, 8, 6, 4);
    let mut net = Network::build(&cfg.arch, 0).unwrap();
    let mut opt = OptimizerState::new(cfg.optimizer, net.params());
    let wrong_frames = bar_data(8, 1, 200, 5, 1);
    assert!(matches!(train_epoch(&mut net, &wrong_frames, &cfg, &mut opt, 0), Err(Error::Validation(_))));
    let mut bad_label = bar_data(8, 1, 200, 6, 1);
    bad_label[0].label = 5;
    assert!(matches!(train_epoch(&mut net, &bad_label, &cfg, &mut opt, 0), Err(Error::Validation(_))));
    assert!(train_epoch(&mut net, &[], &cfg, &mut opt, 0).is_err());
}

fn run_log(cfg: &TrainConfig, data: &[Sample], epochs: usize) -> (Vec<String>, Vec<u8>) {
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    let lines = (0..epochs).map(|_| tr.run_epoch(data).unwrap().to_string()).collect();
    (lines, write_checkpoint(&tr.network().to_checkpoint()))
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let data = bar_data(8, 3, 300, 6, 4);
    let cfg = TrainConfig { epochs: 4, batch_size: 2, seed: 11, ..small_3d(8, 8, 6, 4) };
    let a = run_log(&cfg, &data, 3);
    assert_eq!(a, run_log(&cfg, &data, 3));
    let other = run_log(&TrainConfig { seed: 12, ..cfg.clone() }, &data, 3);
    assert_ne!(a.1, other.1);

    let mut ts = TrainConfig::new(ModelKind::TsSnn, 8, 8);
    ts.arch = ArchSpec { blocks: 2, ..ArchSpec::sew_2d(4, 2, 8, 8) };
    ts.frames = 6;
    ts.segments = 2;
    ts.frames_per_segment = 2;
    ts.batch_size = 3;
    ts.epochs = 3;
    assert_eq!(run_log(&ts, &data, 2), run_log(&ts, &data, 2));
}

#[test]
fn single_example_is_memorized() {
    let data: Vec<Sample> = bar_data(8, 1, 400, 6, 2).into_iter().take(1).collect();
    let mut cfg = TrainConfig { epochs: 200, ..small_3d(8, 8, 6, 4) };
    cfg.arch.channels = 16;
    let mut net = Network::build(&cfg.arch, 3).unwrap();
    let mut opt = OptimizerState::new(cfg.optimizer, net.params());
    let mut loss = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        loss = train_epoch(&mut net, &data, &cfg, &mut opt, epoch).unwrap();
        if loss < 0.01 {
            break;
        }
    }
    assert!(loss < 0.01, "final loss {loss}");
}

#[test]
fn frozen_batch_loss_decreases() {
    let data = bar_data(8, 4, 300, 6, 5);
    let mut cfg = small_3d(8, 8, 6, 6);
    cfg.arch.channels = 16;
    let clips: Vec<&FrameClip> = data.iter().map(|s| &s.clip).collect();
    let frames = vec![(0..6).collect::<Vec<_>>(); clips.len()];
    let input = batch_input(&clips, &frames).unwrap();
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let mut decreasing = 0;
    for seed in 0..10 {
        let mut net = Network::build(&cfg.arch, seed).unwrap();
        let mut opt = OptimizerState::new(cfg.optimizer, net.params());
        let losses: Vec<f64> = (0..6).map(|_| train_step(&mut net, &mut opt, &cfg, &input, &labels, 1e-3).unwrap()).collect();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
    }
    assert!(decreasing >= 9, "strictly decreasing for {decreasing}/10 seeds");
}

#[test]
fn evaluate_counts_and_oracle_labels() {
    let cfg = small_3d(8, 8, 6, 4);
    let mut data = bar_data(8, 60, 200, 6, 6);
    let mut net = Network::build(&cfg.arch, 7).unwrap();
    assert!(matches!(evaluate(&net, &data, &cfg), Err(Error::State(_))));
    net.set_mode(Mode::Eval);

    let untrained = evaluate(&net, &data, &cfg).unwrap();
    let n = data.len() as f64;
    assert!((untrained.accuracy - 0.5).abs() <= 3.0 * (0.25 / n).sqrt(), "{}", untrained.accuracy);
    assert_eq!(untrained.confusion.iter().flatten().sum::<usize>(), data.len());
    for (class, row) in untrained.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), data.iter().filter(|s| s.label == class).count());
    }

    for s in &mut data {
        s.label = predict(&net, &s.clip, &cfg).unwrap();
    }
    assert_eq!(evaluate(&net, &data, &cfg).unwrap().accuracy, 1.0);
    assert!(evaluate(&net, &[], &cfg).is_err());
}

#[test]
fn trainer_stops_after_configured_epochs() {
    let data = bar_data(8, 1, 200, 6, 8);
    let mut tr = Trainer::new(TrainConfig { epochs: 2, ..small_3d(8, 8, 6, 4) }).unwrap();
    let r0 = tr.run_epoch(&data).unwrap();
    assert_eq!((r0.epoch, r0.lr), (0, 1e-3));
    tr.run_epoch(&data).unwrap();
    assert!(tr.finished());
    assert!(matches!(tr.run_epoch(&data), Err(Error::State(_))));
}
