use super::kernels::{self, BatchStats, ConvGeometry};
use super::{split_axis, Tensor};
use crate::error::{Error, Result};
use crate::neuron::{self, Leak, SpikeConfig};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Reduction applied along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SumAll(Var),
    Reduce { x: Var, axis: usize, kind: Reduce, argmax: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, inverse: Vec<usize> },
    Conv3d { x: Var, w: Var, geo: ConvGeometry },
    BatchNorm { x: Var, gamma: Var, beta: Var, axis: usize, xhat: Tensor, inv_std: Vec<f64>, training: bool },
    MaxPool { x: Var, argmax: Vec<usize> },
    Linear { x: Var, w: Var, b: Var },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    Spiking { x: Var, axis: usize, cfg: SpikeConfig, leak: Leak<Var>, coeff: f64, h: Tensor, s: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations supporting one reverse pass.
///
/// Nodes are appended in execution order, so the tape is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    /// Reduces `axis` away. `Max` routes gradient to the first maximal element.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: Reduce) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {xs:?}")));
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == Reduce::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                out[o * inner + i] = match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let mut s = 0.0;
                        for k in 0..len {
                            s += d[at(k)];
                        }
                        if kind == Reduce::Mean {
                            s / len as f64
                        } else {
                            s
                        }
                    }
                    Reduce::Max => {
                        let mut best = at(0);
                        for k in 1..len {
                            if d[at(k)] > d[best] {
                                best = at(k);
                            }
                        }
                        argmax[o * inner + i] = best;
                        d[best]
                    }
                };
            }
        }
        let mut shape = xs.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Reduce { x, axis, kind, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let rg = self.rg(x);
        Ok(self.push(v, Op::Permute { x, inverse }, rg))
    }

    /// 3-axis cross-correlation, `x: [N,Ci,T,H,W]`, `w: [Co,Ci,ft,fh,fw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, geo: ConvGeometry) -> Result<Var> {
        let v = kernels::conv3d(self.value(x), self.value(w), &geo)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(v, Op::Conv3d { x, w, geo }, rg))
    }

    /// 2-axis cross-correlation, `x: [N,Ci,H,W]`, `w: [Co,Ci,kh,kw]`, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects input [N,C,H,W] and kernel [Co,Ci,kh,kw], got {xs:?} and {ws:?}"
            )));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let geo = ConvGeometry::symmetric([1, stride, stride], [0, padding, padding]);
        let y = self.conv3d(x5, w5, geo)?;
        let ys = self.value(y).shape().to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3], ys[4]])
    }

    /// Batch normalization with per-channel statistics over every non-channel axis.
    ///
    /// `running = None` normalizes with the batch's own statistics (training)
    /// and returns them so the caller can update its running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let training = running.is_none();
        let (y, xhat, inv_std, stats) = kernels::batchnorm(
            self.value(x),
            axis,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            running,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, axis, xhat, inv_std, training }, rg);
        Ok((v, training.then_some(stats)))
    }

    /// Max pooling over the trailing `window.len()` axes (1 to 3), no padding.
    pub fn maxpool(&mut self, x: Var, window: &[usize], stride: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let k = window.len();
        if k == 0 || k > 3 || stride.len() != k || xs.len() < k {
            return Err(Error::validation(format!(
                "pool window {window:?} / stride {stride:?} incompatible with input {xs:?}"
            )));
        }
        let lead = xs.len() - k;
        let outer: usize = xs[..lead].iter().product();
        let mut dims = [1usize; 3];
        let mut win = [1usize; 3];
        let mut st = [1usize; 3];
        dims[3 - k..].copy_from_slice(&xs[lead..]);
        win[3 - k..].copy_from_slice(window);
        st[3 - k..].copy_from_slice(stride);
        let view = self.value(x).clone().reshape([outer, dims[0], dims[1], dims[2]])?;
        let (pooled, argmax) = kernels::maxpool3d(&view, win, st)?;
        let ps = pooled.shape().to_vec();
        let mut shape = xs[..lead].to_vec();
        shape.extend_from_slice(&ps[4 - k..]);
        let rg = self.rg(x);
        Ok(self.push(pooled.reshape(shape)?, Op::MaxPool { x, argmax }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = kernels::softmax(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::Softmax(x), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[target]`, computed with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let zs = z.shape();
        if zs.len() != 2 || zs[0] != targets.len() {
            return Err(Error::shape(format!(
                "cross-entropy logits {zs:?} with {} targets",
                targets.len()
            )));
        }
        let c = zs[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::validation(format!("target class {bad} out of range [0, {c})")));
        }
        let lse = kernels::logsumexp_rows(z);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(n, &t)| lse[n] - z.data()[n * c + t])
            .sum::<f64>()
            / targets.len() as f64;
        let probs = kernels::softmax(z);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Runs a layer of spiking neurons over `time_axis` of `x`, starting from
    /// `v_reset`. Returns the spike tensor, same shape as `x`.
    pub fn spiking(&mut self, x: Var, time_axis: usize, cfg: SpikeConfig, leak: Leak<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if time_axis >= xs.len() {
            return Err(Error::shape(format!("time axis {time_axis} out of range for {xs:?}")));
        }
        let leak_value = match leak {
            Leak::Fixed { tau } => Leak::Fixed { tau },
            Leak::Learnable { a } => {
                let t = self.value(a);
                if t.len() != 1 {
                    return Err(Error::shape(format!("PLIF parameter must be scalar, got {:?}", t.shape())));
                }
                Leak::Learnable { a: t.data()[0] }
            }
        };
        let coeff = leak_value.coefficient()?;
        let (h, s) = neuron::scan_forward(self.value(x), time_axis, &cfg, coeff)?;
        let rg = self.rg(x) || matches!(leak, Leak::Learnable { a } if self.rg(a));
        Ok(self.push(s.clone(), Op::Spiking { x, axis: time_axis, cfg, leak, coeff, h, s }, rg))
    }

    /// Reverse sweep from the scalar `loss`, filling gradients for every node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("loss node not recorded on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            for (input, contrib) in self.node_backward(i, &g)? {
                if !self.rg(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward's loss with respect to `v`; zero if `v`
    /// was not on a path to the loss.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::State("gradients requested before backward".into()))?;
        Ok(grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape())))
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![(*a, g.zip_map(vb, |g, y| g * y)?), (*b, g.zip_map(va, |g, x| g * x)?)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::SumAll(a) => {
                let gv = g.data()[0];
                vec![(*a, Tensor::full(self.value(*a).shape(), gv))]
            }
            Op::Reduce { x, axis, kind, argmax } => {
                let xs = self.value(*x).shape();
                let (outer, len, inner) = split_axis(xs, *axis);
                let mut dx = vec![0.0; outer * len * inner];
                let gd = g.data();
                for o in 0..outer {
                    for inn in 0..inner {
                        let gi = gd[o * inner + inn];
                        match kind {
                            Reduce::Sum | Reduce::Mean => {
                                let v = if *kind == Reduce::Mean { gi / len as f64 } else { gi };
                                for k in 0..len {
                                    dx[(o * len + k) * inner + inn] = v;
                                }
                            }
                            Reduce::Max => dx[argmax[o * inner + inn]] += gi,
                        }
                    }
                }
                vec![(*x, Tensor::new(xs, dx)?)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.value(*x).shape())?)],
            Op::Permute { x, inverse } => vec![(*x, g.permute(inverse)?)],
            Op::Conv3d { x, w, geo } => {
                let (dx, dw) = kernels::conv3d_backward(self.value(*x), self.value(*w), geo, g)?;
                vec![(*x, dx), (*w, dw)]
            }
            Op::BatchNorm { x, gamma, beta, axis, xhat, inv_std, training } => {
                let (dx, dgamma, dbeta) =
                    kernels::batchnorm_backward(g, xhat, inv_std, self.value(*gamma).data(), *axis, *training)?;
                let c = dgamma.len();
                vec![(*x, dx), (*gamma, Tensor::new([c], dgamma)?), (*beta, Tensor::new([c], dbeta)?)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                vec![(*x, dx)]
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, f, c) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
                let mut dx = vec![0.0; n * f];
                kernels::gemm(n, c, f, g.data(), false, vw.data(), true, 0.0, &mut dx);
                let mut dw = vec![0.0; f * c];
                kernels::gemm(f, n, c, vx.data(), true, g.data(), false, 0.0, &mut dw);
                let mut db = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (d, r) in db.iter_mut().zip(row) {
                        *d += r;
                    }
                }
                vec![(*x, Tensor::new([n, f], dx)?), (*w, Tensor::new([f, c], dw)?), (*b, Tensor::new([c], db)?)]
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = *y.shape().last().expect("rank >= 1");
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        dxr[k] = yr[k] * (gr[k] - dot);
                    }
                }
                vec![(*x, Tensor::new(y.shape(), dx)?)]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = probs.shape()[1];
                let scale = g.data()[0] / targets.len() as f64;
                let mut dz = probs.data().to_vec();
                for (n, &t) in targets.iter().enumerate() {
                    dz[n * c + t] -= 1.0;
                }
                dz.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, Tensor::new(probs.shape(), dz)?)]
            }
            Op::Spiking { x, axis, cfg, leak, coeff, h, s } => {
                let (dx, dcoeff) = neuron::scan_backward(self.value(*x), h, s, g, *axis, cfg, *coeff)?;
                let mut out = vec![(*x, dx)];
                if let Leak::Learnable { a } = leak {
                    // d sigmoid(a) / da = k (1 - k)
                    out.push((*a, Tensor::scalar(dcoeff * coeff * (1.0 - coeff))));
                }
                out
            }
        };
        Ok(out)
    }
}
