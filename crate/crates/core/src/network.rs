//! SEW residual spiking networks.
//!
//! Both variants share one layout: a stem `conv → BN → PLIF`, then `blocks`
//! spike-element-wise (ADD) residual blocks of two `conv → BN → PLIF` units,
//! each block followed by a `1×2×2` max pool while both spatial dims are at
//! least 2, then a linear classifier applied per timestep and averaged over
//! time.
//!
//! * 2D: convolutions are per frame (`1×fh×fw`), activations are laid out
//!   `[B·T, C, 1, H, W]` and PLIF layers scan the `T` frames.
//! * 3D: convolutions are `ft×fh×fw` over `[B, C, T, H, W]` (stem `1×1×1`),
//!   same-padded so the temporal length survives every block, and PLIF layers
//!   scan the temporal axis of the feature map.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::FrameClip;
use crate::neuron::{Leak, SpikeConfig, SpikeFn, DEFAULT_ALPHA, DEFAULT_PLIF_A, DEFAULT_V_RESET, DEFAULT_V_TH};
use crate::tensor::kernels::{BatchStats, ConvGeometry};
use crate::tensor::{Graph, Reduce, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const POOL: [usize; 3] = [1, 2, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    Sew2d,
    Sew3d,
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(ArchKind::Sew2d),
            "3d" => Ok(ArchKind::Sew3d),
            _ => Err(Error::validation(format!("arch must be 2d or 3d, got {s:?}"))),
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Sew2d => "2d",
            ArchKind::Sew3d => "3d",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything needed to build a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub in_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    /// `(f_t, f_h, f_w)`. The 2D variant ignores `f_t`.
    pub kernel: [usize; 3],
    /// Spatial size of the 2D stem kernel. The 3D stem is always `1×1×1`.
    pub stem_kernel: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub v_th: f64,
    pub v_reset: f64,
    pub alpha: f64,
}

impl ArchSpec {
    pub fn sew_2d(channels: usize, classes: usize, height: usize, width: usize) -> Self {
        Self {
            kind: ArchKind::Sew2d,
            in_channels: 2,
            channels,
            blocks: 7,
            kernel: [1, 3, 3],
            stem_kernel: 3,
            classes,
            height,
            width,
            v_th: DEFAULT_V_TH,
            v_reset: DEFAULT_V_RESET,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn sew_3d(channels: usize, kernel: [usize; 3], classes: usize, height: usize, width: usize) -> Self {
        Self { kind: ArchKind::Sew3d, kernel, stem_kernel: 1, ..Self::sew_2d(channels, classes, height, width) }
    }

    pub fn spike_config(&self) -> SpikeConfig {
        SpikeConfig { v_th: self.v_th, v_reset: self.v_reset, alpha: self.alpha, spike_fn: SpikeFn::Heaviside }
    }

    fn block_kernel(&self) -> [usize; 3] {
        match self.kind {
            ArchKind::Sew2d => [1, self.kernel[1], self.kernel[2]],
            ArchKind::Sew3d => self.kernel,
        }
    }

    fn stem(&self) -> [usize; 3] {
        match self.kind {
            ArchKind::Sew2d => [1, self.stem_kernel, self.stem_kernel],
            ArchKind::Sew3d => [1, 1, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("channels", self.channels),
            ("classes", self.classes),
            ("stem", self.stem_kernel),
            ("ft", self.kernel[0]),
            ("fh", self.kernel[1]),
            ("fw", self.kernel[2]),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("{name} must be positive")));
        }
        self.spike_config().validate()?;
        let min_h = self.kernel[1].max(self.stem()[1]).max(2);
        let min_w = self.kernel[2].max(self.stem()[2]).max(2);
        if self.height < min_h || self.width < min_w {
            return Err(Error::validation(format!(
                "input {}x{} too small for this architecture; minimum input size is {min_h}x{min_w}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Spatial dims after each block's optional pool, and whether that block pools.
    fn pool_plan(&self) -> (Vec<bool>, usize, usize) {
        let (mut h, mut w) = (self.height, self.width);
        let plan = (0..self.blocks)
            .map(|_| {
                let pool = h >= POOL[1] && w >= POOL[2];
                if pool {
                    h /= POOL[1];
                    w /= POOL[2];
                }
                pool
            })
            .collect();
        (plan, h, w)
    }

    /// The layer sequence this spec expands to.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let c = self.channels;
        let unit = |cin: usize, kernel: [usize; 3]| {
            [
                LayerSpec::Conv { in_channels: cin, out_channels: c, kernel, geometry: ConvGeometry::same(kernel) },
                LayerSpec::BatchNorm { channels: c },
                LayerSpec::Plif,
            ]
        };
        let mut out: Vec<LayerSpec> = unit(self.in_channels, self.stem()).into();
        let (plan, h, w) = self.pool_plan();
        for pool in plan {
            out.push(LayerSpec::SewBlockStart);
            out.extend(unit(c, self.block_kernel()));
            out.extend(unit(c, self.block_kernel()));
            out.push(LayerSpec::SewAdd);
            if pool {
                out.push(LayerSpec::MaxPool { window: POOL });
            }
        }
        out.push(LayerSpec::Flatten);
        out.push(LayerSpec::Linear { in_features: c * h * w, out_features: self.classes });
        out
    }
}

/// One entry of the expanded architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv { in_channels: usize, out_channels: usize, kernel: [usize; 3], geometry: ConvGeometry },
    BatchNorm { channels: usize },
    Plif,
    MaxPool { window: [usize; 3] },
    SewBlockStart,
    SewAdd,
    Flatten,
    Linear { in_features: usize, out_features: usize },
}

impl LayerSpec {
    /// Learnable scalars owned by this layer.
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                in_channels * out_channels * kernel.iter().product::<usize>()
            }
            LayerSpec::BatchNorm { channels } => 2 * channels,
            LayerSpec::Plif => 1,
            LayerSpec::Linear { in_features, out_features } => in_features * out_features + out_features,
            _ => 0,
        }
    }
}

/// Parameter indices for one `conv → BN → PLIF` unit.
#[derive(Clone, Copy, Debug)]
struct Unit {
    conv: usize,
    gamma: usize,
    beta: usize,
    plif: usize,
    /// Index into the running-statistics buffers.
    bn: usize,
    geometry: ConvGeometry,
}

#[derive(Clone, Debug)]
struct Block {
    units: [Unit; 2],
    pool: bool,
}

#[derive(Clone, Debug)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Per-BN-layer batch statistics from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    layer: usize,
    stats: BatchStats,
}

/// Result of [`Network::forward`]: the logits node plus the graph handles of
/// every parameter, in [`Network::params`] order.
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Clone, Debug)]
pub struct Network {
    arch: ArchSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
    running: Vec<RunningStats>,
    stem: Unit,
    blocks: Vec<Block>,
    head_w: usize,
    head_b: usize,
    head_features: usize,
    mode: Mode,
}

/// Stem + 7 SEW blocks over individual frames.
pub fn build_sew_resnet_2d(arch: &ArchSpec, seed: u64) -> Result<Network> {
    if arch.kind != ArchKind::Sew2d {
        return Err(Error::validation("build_sew_resnet_2d needs arch=2d"));
    }
    Network::build(arch, seed)
}

/// `1×1×1` stem + 7 SEW blocks of `ft×fh×fw` 3D convolutions.
pub fn build_sew_resnet_3d(arch: &ArchSpec, seed: u64) -> Result<Network> {
    if arch.kind != ArchKind::Sew3d {
        return Err(Error::validation("build_sew_resnet_3d needs arch=3d"));
    }
    Network::build(arch, seed)
}

impl Network {
    /// Builds and initializes a network: conv/linear weights uniform in
    /// `±1/sqrt(fan_in)`, biases 0, BN `gamma = 1`, `beta = 0`, PLIF `a = 0`.
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network {
            arch: arch.clone(),
            names: Vec::new(),
            params: Vec::new(),
            running: Vec::new(),
            stem: Unit { conv: 0, gamma: 0, beta: 0, plif: 0, bn: 0, geometry: ConvGeometry::same([1; 3]) },
            blocks: Vec::new(),
            head_w: 0,
            head_b: 0,
            head_features: 0,
            mode: Mode::Train,
        };
        net.stem = net.add_unit("stem", arch.in_channels, arch.stem(), &mut rng);
        let (plan, h, w) = arch.pool_plan();
        for (i, pool) in plan.into_iter().enumerate() {
            let a = net.add_unit(&format!("block{i}.0"), arch.channels, arch.block_kernel(), &mut rng);
            let b = net.add_unit(&format!("block{i}.1"), arch.channels, arch.block_kernel(), &mut rng);
            net.blocks.push(Block { units: [a, b], pool });
        }
        net.head_features = arch.channels * h * w;
        let bound = 1.0 / (net.head_features as f64).sqrt();
        let w = uniform(&mut rng, net.head_features * arch.classes, bound);
        net.head_w = net.push_param("head.weight", Tensor::new([net.head_features, arch.classes], w)?);
        net.head_b = net.push_param("head.bias", Tensor::zeros([arch.classes]));
        Ok(net)
    }

    fn push_param(&mut self, name: &str, t: Tensor) -> usize {
        self.names.push(name.to_string());
        self.params.push(t);
        self.params.len() - 1
    }

    fn add_unit(&mut self, prefix: &str, cin: usize, kernel: [usize; 3], rng: &mut ChaCha8Rng) -> Unit {
        let c = self.arch.channels;
        let fan_in = cin * kernel.iter().product::<usize>();
        let data = uniform(rng, c * fan_in, 1.0 / (fan_in as f64).sqrt());
        let shape = match self.arch.kind {
            ArchKind::Sew2d => vec![c, cin, kernel[1], kernel[2]],
            ArchKind::Sew3d => vec![c, cin, kernel[0], kernel[1], kernel[2]],
        };
        let conv = self.push_param(&format!("{prefix}.conv"), Tensor::new(shape, data).expect("sized"));
        let gamma = self.push_param(&format!("{prefix}.bn.gamma"), Tensor::ones([c]));
        let beta = self.push_param(&format!("{prefix}.bn.beta"), Tensor::zeros([c]));
        let plif = self.push_param(&format!("{prefix}.plif.a"), Tensor::scalar(DEFAULT_PLIF_A));
        self.running.push(RunningStats { mean: vec![0.0; c], var: vec![1.0; c] });
        Unit { conv, gamma, beta, plif, bn: self.running.len() - 1, geometry: ConvGeometry::same(kernel) }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Folds batch statistics into the running averages (unbiased variance).
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let r = &mut self.running[u.layer];
            let n = u.stats.count as f64;
            let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for c in 0..r.mean.len() {
                r.mean[c] = (1.0 - BN_MOMENTUM) * r.mean[c] + BN_MOMENTUM * u.stats.mean[c];
                r.var[c] = (1.0 - BN_MOMENTUM) * r.var[c] + BN_MOMENTUM * u.stats.var[c] * correction;
            }
        }
    }

    /// Checks `[B, T, 2, H, W]` against the architecture.
    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        let a = &self.arch;
        if s.len() != 5 || s[2] != a.in_channels || s[3] != a.height || s[4] != a.width {
            return Err(Error::shape(format!(
                "network expects [B, T, {}, {}, {}] input, got {s:?}",
                a.in_channels, a.height, a.width
            )));
        }
        Ok(())
    }

    /// Records a forward pass of a `[B, T, 2, H, W]` batch on `g`, returning
    /// `[B, classes]` logits averaged over time.
    pub fn forward(&self, g: &mut Graph, input: &Tensor, mode: Mode) -> Result<Forward> {
        self.check_input(input)?;
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let s = input.shape();
        let (b, t) = (s[0], s[1]);
        let x = match self.arch.kind {
            ArchKind::Sew2d => input.clone().reshape([b * t, s[2], 1, s[3], s[4]])?,
            ArchKind::Sew3d => input.permute(&[0, 2, 1, 3, 4])?,
        };
        let mut cx = Ctx { g, params: &params, mode, bn: Vec::new(), batch: b, layer: 0 };
        let x = cx.g.input(x);
        let mut x = self.unit_forward(&mut cx, &self.stem, x)?;
        for block in &self.blocks {
            x = self.block_forward(&mut cx, block, x)?;
            if block.pool {
                x = cx.g.maxpool(x, &POOL, &POOL)?;
                cx.check(x)?;
            }
        }
        let logits = self.head_forward(&mut cx, x, b, t)?;
        let bn_updates = cx.bn;
        Ok(Forward { logits, params, bn_updates })
    }

    /// Runs SEW block `index` on `x` (a spike tensor in this network's internal
    /// layout, `[B·T, C, 1, H, W]` or `[B, C, T, H, W]`), without its pool.
    pub fn sew_block_forward(&self, g: &mut Graph, params: &[Var], index: usize, x: Var, batch: usize, mode: Mode) -> Result<Var> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::validation(format!("no block {index}")))?;
        let mut cx = Ctx { g, params, mode, bn: Vec::new(), batch, layer: 0 };
        self.block_forward(&mut cx, block, x)
    }

    /// The residual branch of block `index` alone (two conv/BN/PLIF units).
    pub fn sew_branch_forward(&self, g: &mut Graph, params: &[Var], index: usize, x: Var, batch: usize, mode: Mode) -> Result<Var> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::validation(format!("no block {index}")))?;
        let mut cx = Ctx { g, params, mode, bn: Vec::new(), batch, layer: 0 };
        let y = self.unit_forward(&mut cx, &block.units[0], x)?;
        self.unit_forward(&mut cx, &block.units[1], y)
    }

    fn block_forward(&self, cx: &mut Ctx<'_>, block: &Block, x: Var) -> Result<Var> {
        let y = self.unit_forward(cx, &block.units[0], x)?;
        let y = self.unit_forward(cx, &block.units[1], y)?;
        let out = cx.g.add(y, x)?;
        cx.check(out)?;
        Ok(out)
    }

    fn unit_forward(&self, cx: &mut Ctx<'_>, unit: &Unit, x: Var) -> Result<Var> {
        let w = cx.params[unit.conv];
        let w = match self.arch.kind {
            ArchKind::Sew2d => {
                let ws = cx.g.value(w).shape().to_vec();
                cx.g.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?
            }
            ArchKind::Sew3d => w,
        };
        let y = cx.g.conv3d(x, w, unit.geometry)?;
        cx.check(y)?;
        let running = (cx.mode == Mode::Eval).then(|| {
            let r = &self.running[unit.bn];
            (r.mean.as_slice(), r.var.as_slice())
        });
        let (y, stats) = cx.g.batchnorm(y, cx.params[unit.gamma], cx.params[unit.beta], 1, BN_EPS, running)?;
        if let Some(stats) = stats {
            cx.bn.push(BnUpdate { layer: unit.bn, stats });
        }
        cx.check(y)?;
        let leak = Leak::Learnable { a: cx.params[unit.plif] };
        let cfg = self.arch.spike_config();
        let s = match self.arch.kind {
            ArchKind::Sew2d => {
                let shape = cx.g.value(y).shape().to_vec();
                let per_step: usize = shape[1..].iter().product();
                let seq = cx.g.reshape(y, &[cx.batch, shape[0] / cx.batch, per_step])?;
                let s = cx.g.spiking(seq, 1, cfg, leak)?;
                cx.g.reshape(s, &shape)?
            }
            ArchKind::Sew3d => cx.g.spiking(y, 2, cfg, leak)?,
        };
        cx.check(s)?;
        Ok(s)
    }

    fn head_forward(&self, cx: &mut Ctx<'_>, x: Var, b: usize, t: usize) -> Result<Var> {
        let feats = match self.arch.kind {
            ArchKind::Sew2d => x,
            ArchKind::Sew3d => cx.g.permute(x, &[0, 2, 1, 3, 4])?,
        };
        let steps = match self.arch.kind {
            ArchKind::Sew2d => t,
            ArchKind::Sew3d => cx.g.value(x).shape()[2],
        };
        let flat = cx.g.reshape(feats, &[b * steps, self.head_features])?;
        let z = cx.g.linear(flat, cx.params[self.head_w], cx.params[self.head_b])?;
        cx.check(z)?;
        let z = cx.g.reshape(z, &[b, steps, self.arch.classes])?;
        cx.g.reduce(z, 1, Reduce::Mean)
    }

    /// Logits for one clip (`[classes]`), in the network's current mode.
    pub fn forward_clip(&self, clip: &FrameClip) -> Result<Tensor> {
        let t = clip.tensor();
        let s = t.shape();
        let input = t.clone().reshape([1, s[0], s[1], s[2], s[3]])?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &input, self.mode)?;
        g.value(out.logits).clone().reshape([self.arch.classes])
    }

    /// Parameters followed by BN running statistics, as named tensors.
    pub fn to_checkpoint(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        for (i, r) in self.running.iter().enumerate() {
            let c = r.mean.len();
            out.push((format!("bn{i}.running_mean"), Tensor::new([c], r.mean.clone()).expect("sized")));
            out.push((format!("bn{i}.running_var"), Tensor::new([c], r.var.clone()).expect("sized")));
        }
        out
    }

    /// Loads tensors written by [`Network::to_checkpoint`]; names, order and
    /// shapes must match this architecture exactly.
    pub fn load_checkpoint(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let expected = self.to_checkpoint();
        if entries.len() != expected.len() {
            return Err(Error::Compat(format!(
                "checkpoint has {} tensors, architecture needs {}",
                entries.len(),
                expected.len()
            )));
        }
        for ((name, t), (en, et)) in entries.iter().zip(&expected) {
            if name != en || t.shape() != et.shape() {
                return Err(Error::Compat(format!(
                    "checkpoint tensor `{name}` {:?} does not match `{en}` {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
        }
        let n = self.params.len();
        for (i, (_, t)) in entries.iter().enumerate().take(n) {
            self.params[i] = t.clone();
        }
        for (i, pair) in entries[n..].chunks(2).enumerate() {
            self.running[i].mean = pair[0].1.data().to_vec();
            self.running[i].var = pair[1].1.data().to_vec();
        }
        Ok(())
    }
}

struct Ctx<'a> {
    g: &'a mut Graph,
    params: &'a [Var],
    mode: Mode,
    bn: Vec<BnUpdate>,
    batch: usize,
    layer: usize,
}

impl Ctx<'_> {
    fn check(&mut self, v: Var) -> Result<()> {
        self.layer += 1;
        if !self.g.value(v).all_finite() {
            return Err(Error::Numeric { layer: self.layer });
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}
