//! End-to-end training: optimizers, cosine annealing, frame sampling, the
//! epoch loop and evaluation.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consensus::{eval_plan, plan_segments, predict_ts, ts_forward, Consensus};
use crate::error::{Error, Result};
use crate::events::FrameClip;
use crate::network::{ArchKind, ArchSpec, Mode, Network};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    TsSnn,
    Snn3d,
}

impl ModelKind {
    pub fn arch_kind(self) -> ArchKind {
        match self {
            ModelKind::TsSnn => ArchKind::Sew2d,
            ModelKind::Snn3d => ArchKind::Sew3d,
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ts_snn" => Ok(ModelKind::TsSnn),
            "snn3d" => Ok(ModelKind::Snn3d),
            _ => Err(Error::validation(format!("model must be ts_snn or snn3d, got {s:?}"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::TsSnn => "ts_snn",
            ModelKind::Snn3d => "snn3d",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::validation(format!("optimizer must be sgd or adam, got {s:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub arch: ArchSpec,
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    /// Total epochs, also the annealing horizon.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Integration slices per clip.
    pub frames: usize,
    /// Frames sampled per clip on the 3D path.
    pub train_frames: usize,
    pub segments: usize,
    pub frames_per_segment: usize,
    pub consensus: Consensus,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    /// Checkpoint period in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults for `model` on `height × width` clips.
    pub fn new(model: ModelKind, height: usize, width: usize) -> Self {
        let arch = match model {
            ModelKind::TsSnn => ArchSpec::sew_2d(16, 2, height, width),
            ModelKind::Snn3d => ArchSpec::sew_3d(16, [3, 3, 3], 2, height, width),
        };
        Self {
            model,
            arch,
            optimizer: OptimizerKind::Adam,
            lr0: 1e-3,
            epochs: 200,
            batch_size: 8,
            seed: 0,
            frames: if model == ModelKind::TsSnn { 24 } else { 16 },
            train_frames: 12,
            segments: 3,
            frames_per_segment: 5,
            consensus: Consensus::Average,
            momentum: SGD_MOMENTUM,
            clip_norm: None,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.arch.kind != self.model.arch_kind() {
            return fail(format!("model={} needs arch={}", self.model, self.model.arch_kind()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.frames == 0 {
            return fail("frames must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("clip_norm must be > 0, got {c}"));
            }
        }
        match self.model {
            ModelKind::Snn3d => {
                if self.train_frames == 0 || self.train_frames > self.frames {
                    return fail(format!(
                        "train_frames must satisfy 1 <= train_frames <= frames, got {} with frames={}",
                        self.train_frames, self.frames
                    ));
                }
            }
            ModelKind::TsSnn => {
                if self.segments == 0 || self.frames_per_segment == 0 {
                    return fail("segments and frames_per_segment must be >= 1".into());
                }
                if self.segments * self.frames_per_segment > self.frames {
                    return fail(format!(
                        "segments * frames_per_segment must be <= frames, got {} * {} > {}",
                        self.segments, self.frames_per_segment, self.frames
                    ));
                }
            }
        }
        self.arch.validate()
    }
}

/// A labelled clip.
#[derive(Clone, Debug)]
pub struct Sample {
    pub clip: FrameClip,
    pub label: usize,
}

/// Per-parameter optimizer buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    /// SGD velocity, or Adam first moment.
    pub m: Vec<Tensor>,
    /// Adam second moment (empty for SGD).
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
            step: 0,
        }
    }
}

fn check_step(params: &[Tensor], grads: &[Tensor], bufs: &[&[Tensor]]) -> Result<()> {
    let ok = grads.len() == params.len()
        && params.iter().zip(grads).all(|(p, g)| p.shape() == g.shape())
        && bufs
            .iter()
            .all(|b| b.len() == params.len() && params.iter().zip(b.iter()).all(|(p, s)| p.shape() == s.shape()));
    if !ok {
        return Err(Error::shape("optimizer parameters, gradients and state must match in shape"));
    }
    Ok(())
}

/// `v ← μ·v + g; p ← p − lr·v`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState, lr: f64, momentum: f64) -> Result<()> {
    check_step(params, grads, &[&state.m])?;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.m) {
        for ((p, g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// Bias-corrected Adam.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_step(params, grads, &[&state.m, &state.v])?;
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (p, g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr0 · (1 + cos(π t / t_max)) / 2`.
pub fn cosine_lr(t: usize, t_max: usize, lr0: f64) -> Result<f64> {
    if t_max == 0 {
        return Err(Error::validation("cosine annealing needs T_max >= 1"));
    }
    if t > t_max {
        return Err(Error::validation(format!("epoch {t} is past T_max = {t_max}")));
    }
    Ok(lr0 * (1.0 + (PI * t as f64 / t_max as f64).cos()) / 2.0)
}

/// `count` distinct sorted frame indices out of `total`.
pub fn sample_frames<R: Rng + ?Sized>(total: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(Error::validation(format!("cannot sample {count} of {total} frames")));
    }
    let mut idx = rand::seq::index::sample(rng, total, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Shuffling and sampling stream for one epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn check_data(data: &[Sample], cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    for (i, s) in data.iter().enumerate() {
        let c = &s.clip;
        if c.frames() != cfg.frames || c.height() != cfg.arch.height || c.width() != cfg.arch.width {
            return Err(Error::validation(format!(
                "sample {i} is {}x{}x{} frames but the config expects {}x{}x{}",
                c.frames(),
                c.height(),
                c.width(),
                cfg.frames,
                cfg.arch.height,
                cfg.arch.width
            )));
        }
        if s.label >= cfg.arch.classes {
            return Err(Error::validation(format!(
                "sample {i} has label {} but the model has {} classes",
                s.label, cfg.arch.classes
            )));
        }
    }
    Ok(())
}

/// Frames fed to the network for training: a fresh random plan or subset.
fn training_frames<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Result<Vec<usize>> {
    match cfg.model {
        ModelKind::TsSnn => Ok(plan_segments(cfg.frames, cfg.segments, cfg.frames_per_segment, rng)?.flat()),
        ModelKind::Snn3d => sample_frames(cfg.frames, cfg.train_frames, rng),
    }
}

/// Deterministic frames for evaluation: evenly spaced within each segment
/// (TS) or across the clip (3D).
pub fn eval_frames(cfg: &TrainConfig) -> Result<Vec<usize>> {
    match cfg.model {
        ModelKind::TsSnn => Ok(eval_plan(cfg.frames, cfg.segments, cfg.frames_per_segment)?.flat()),
        ModelKind::Snn3d => Ok(eval_plan(cfg.frames, 1, cfg.train_frames)?.flat()),
    }
}

/// Stacks the selected frames of several clips into `[B, F, 2, H, W]`.
pub fn batch_input(clips: &[&FrameClip], frames: &[Vec<usize>]) -> Result<Tensor> {
    let parts = clips
        .iter()
        .zip(frames)
        .map(|(c, idx)| Ok(c.select(idx)?.into_tensor()))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

/// Model outputs used as logits by the loss: consensus values (TS) or
/// time-averaged head outputs (3D).
fn record_logits(g: &mut Graph, net: &Network, cfg: &TrainConfig, input: &Tensor, mode: Mode) -> Result<crate::network::Forward> {
    match cfg.model {
        ModelKind::TsSnn => {
            let ts = ts_forward(g, net, input, cfg.segments, cfg.consensus, mode)?;
            Ok(crate::network::Forward { logits: ts.consensus, params: ts.params, bn_updates: ts.bn_updates })
        }
        ModelKind::Snn3d => net.forward(g, input, mode),
    }
}

/// One optimization step on a prepared batch; returns the mean batch loss.
pub fn train_step(
    net: &mut Network,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    input: &Tensor,
    labels: &[usize],
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let fwd = record_logits(&mut g, net, cfg, input, Mode::Train)?;
    let loss = g.cross_entropy(fwd.logits, labels)?;
    let loss_value = g.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Numeric { layer: 0 });
    }
    g.backward(loss)?;
    let mut grads = fwd.params.iter().map(|&p| g.grad(p)).collect::<Result<Vec<_>>>()?;
    if let Some(max) = cfg.clip_norm {
        let norm = grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        if norm > max {
            let scale = max / norm;
            grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
        }
    }
    match cfg.optimizer {
        OptimizerKind::Sgd => sgd_step(net.params_mut(), &grads, opt, lr, cfg.momentum)?,
        OptimizerKind::Adam => adam_step(net.params_mut(), &grads, opt, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?,
    }
    net.apply_bn_updates(&fwd.bn_updates);
    Ok(loss_value)
}

/// One pass over `data` in epoch-seeded order; returns the mean per-sample loss.
pub fn train_epoch(net: &mut Network, data: &[Sample], cfg: &TrainConfig, opt: &mut OptimizerState, epoch: usize) -> Result<f64> {
    cfg.validate()?;
    check_data(data, cfg)?;
    let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)?;
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    net.set_mode(Mode::Train);
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let clips: Vec<&FrameClip> = chunk.iter().map(|&i| &data[i].clip).collect();
        let frames = chunk.iter().map(|_| training_frames(cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
        let input = batch_input(&clips, &frames)?;
        total += train_step(net, opt, cfg, &input, &labels, lr)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Predicted class for one clip with the deterministic evaluation frames.
pub fn predict(net: &Network, clip: &FrameClip, cfg: &TrainConfig) -> Result<usize> {
    match cfg.model {
        ModelKind::TsSnn => {
            let plan = eval_plan(cfg.frames, cfg.segments, cfg.frames_per_segment)?;
            Ok(predict_ts(net, clip, &plan, cfg.consensus)?.argmax())
        }
        ModelKind::Snn3d => Ok(net.forward_clip(&clip.select(&eval_frames(cfg)?)?)?.argmax()),
    }
}

/// Top-1 accuracy and confusion counts (`confusion[true][predicted]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy={}", self.accuracy)?;
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Evaluates an eval-mode network on `data`.
pub fn evaluate(net: &Network, data: &[Sample], cfg: &TrainConfig) -> Result<Evaluation> {
    if net.mode() != Mode::Eval {
        return Err(Error::State("evaluate needs a network in eval mode".into()));
    }
    check_data(data, cfg)?;
    let c = cfg.arch.classes;
    let mut confusion = vec![vec![0; c]; c];
    for s in data {
        confusion[s.label][predict(net, &s.clip, cfg)?] += 1;
    }
    let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
    Ok(Evaluation { accuracy: correct as f64 / data.len() as f64, confusion })
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} lr={} loss={} acc={}", self.epoch, self.lr, self.loss, self.acc)
    }
}

/// Network, optimizer state and epoch counter for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    net: Network,
    opt: OptimizerState,
    cfg: TrainConfig,
    epoch: usize,
}

impl Trainer {
    /// Builds the network from `cfg.arch` seeded with `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Network::build(&cfg.arch, cfg.seed)?;
        Ok(Self::with_network(net, cfg))
    }

    pub fn with_network(net: Network, cfg: TrainConfig) -> Self {
        let opt = OptimizerState::new(cfg.optimizer, net.params());
        Self { net, opt, cfg, epoch: 0 }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Trains one epoch, then measures accuracy on `data` in eval mode.
    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<EpochReport> {
        if self.finished() {
            return Err(Error::State(format!("all {} epochs already ran", self.cfg.epochs)));
        }
        let epoch = self.epoch;
        let lr = cosine_lr(epoch, self.cfg.epochs, self.cfg.lr0)?;
        let loss = train_epoch(&mut self.net, data, &self.cfg, &mut self.opt, epoch)?;
        self.net.set_mode(Mode::Eval);
        let acc = evaluate(&self.net, data, &self.cfg)?.accuracy;
        self.epoch += 1;
        Ok(EpochReport { epoch, lr, loss, acc })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.1).unwrap(), 0.1);
        assert_eq!(cosine_lr(10, 10, 0.1).unwrap(), 0.0);
        assert!((cosine_lr(5, 10, 0.1).unwrap() - 0.05).abs() < 1e-17);
        assert!(cosine_lr(0, 0, 0.1).is_err());
        assert!(cosine_lr(11, 10, 0.1).is_err());
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = OptimizerState::new(OptimizerKind::Sgd, &p);
        sgd_step(&mut p, &[Tensor::scalar(0.5)], &mut st, 0.1, 0.0).unwrap();
        assert!((p[0].data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut p = vec![Tensor::full([3], 0.7)];
        let mut st = OptimizerState::new(OptimizerKind::Adam, &p);
        adam_step(&mut p, &[Tensor::zeros([3])], &mut st, 0.1, ADAM_BETA1, ADAM_BETA2, ADAM_EPS).unwrap();
        assert_eq!(p[0].data(), &[0.7; 3]);
    }

    #[test]
    fn optimizer_shape_mismatch() {
        let mut p = vec![Tensor::zeros([2])];
        let mut st = OptimizerState::new(OptimizerKind::Sgd, &p);
        assert!(sgd_step(&mut p, &[Tensor::zeros([3])], &mut st, 0.1, 0.9).is_err());
    }

    #[test]
    fn sample_frames_full_and_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_frames(16, 16, &mut rng).unwrap(), (0..16).collect::<Vec<_>>());
        assert!(sample_frames(4, 5, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(ModelKind::TsSnn, 32, 32);
        c.validate().unwrap();
        c.segments = 0;
        assert!(c.validate().unwrap_err().to_string().contains("segments"));
        let mut c = TrainConfig::new(ModelKind::Snn3d, 32, 32);
        c.validate().unwrap();
        c.train_frames = 17;
        assert!(c.validate().is_err());
    }

    #[test]
    fn report_format() {
        let r = EpochReport { epoch: 3, lr: 0.5, loss: 0.25, acc: 1.0 };
        assert_eq!(r.to_string(), "epoch=3 lr=0.5 loss=0.25 acc=1");
    }
}
