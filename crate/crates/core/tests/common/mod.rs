//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use evsnn_core::neuron::{Leak, NeuronParams};
use evsnn_core::tensor::kernels::ConvGeometry;
use evsnn_core::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One neuron, written out step by step: charge, fire at `H >= V_th`, hard reset.
pub fn scalar_neuron(inputs: &[f64], p: &NeuronParams) -> (Vec<f64>, Vec<f64>) {
    let k = match p.kind {
        Leak::Fixed { tau } => 1.0 / tau,
        Leak::Learnable { a } => 1.0 / (1.0 + (-a).exp()),
    };
    let mut v = p.v_reset;
    let (mut spikes, mut potentials) = (Vec::new(), Vec::new());
    for &x in inputs {
        let h = v + k * (x - (v - p.v_reset));
        let s = if h - p.v_th >= 0.0 { 1.0 } else { 0.0 };
        v = h * (1.0 - s) + p.v_reset * s;
        spikes.push(s);
        potentials.push(v);
    }
    (spikes, potentials)
}

pub fn random_neuron_params(rng: &mut ChaCha8Rng) -> NeuronParams {
    let v_reset = rng.random_range(-0.5..0.3);
    let v_th = v_reset + rng.random_range(0.2..2.0);
    let kind = if rng.random_bool(0.5) {
        Leak::Fixed { tau: rng.random_range(1.0..8.0) }
    } else {
        Leak::Learnable { a: rng.random_range(-4.0..4.0) }
    };
    NeuronParams { v_th, v_reset, alpha: 2.0, kind }
}

/// Direct cross-correlation, one output element at a time.
pub fn conv3d_ref(x: &Tensor, w: &Tensor, geo: &ConvGeometry) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let out: Vec<usize> = (0..3)
        .map(|a| (xs[a + 2] + geo.pad_lo[a] + geo.pad_hi[a] - ws[a + 2]) / geo.stride[a] + 1)
        .collect();
    let mut y = Tensor::zeros([xs[0], ws[0], out[0], out[1], out[2]]);
    for n in 0..xs[0] {
        for co in 0..ws[0] {
            for z in 0..out[0] {
                for r in 0..out[1] {
                    for c in 0..out[2] {
                        let mut acc = 0.0;
                        for ci in 0..xs[1] {
                            for a in 0..ws[2] {
                                for b in 0..ws[3] {
                                    for e in 0..ws[4] {
                                        let zi = (z * geo.stride[0] + a) as isize - geo.pad_lo[0] as isize;
                                        let ri = (r * geo.stride[1] + b) as isize - geo.pad_lo[1] as isize;
                                        let cj = (c * geo.stride[2] + e) as isize - geo.pad_lo[2] as isize;
                                        if zi < 0 || ri < 0 || cj < 0 {
                                            continue;
                                        }
                                        let (zi, ri, cj) = (zi as usize, ri as usize, cj as usize);
                                        if zi >= xs[2] || ri >= xs[3] || cj >= xs[4] {
                                            continue;
                                        }
                                        acc += x.get(&[n, ci, zi, ri, cj]) * w.get(&[co, ci, a, b, e]);
                                    }
                                }
                            }
                        }
                        y.set(&[n, co, z, r, c], acc);
                    }
                }
            }
        }
    }
    y
}

/// Plain 2D cross-correlation on `[N, C, H, W]` with symmetric padding.
pub fn conv2d_ref(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs[2] + 2 * pad - ws[2]) / stride + 1;
    let ow = (xs[3] + 2 * pad - ws[3]) / stride + 1;
    let mut y = Tensor::zeros([xs[0], ws[0], oh, ow]);
    for n in 0..xs[0] {
        for co in 0..ws[0] {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..xs[1] {
                        for b in 0..ws[2] {
                            for e in 0..ws[3] {
                                let ri = (r * stride + b) as isize - pad as isize;
                                let cj = (c * stride + e) as isize - pad as isize;
                                if ri >= 0 && cj >= 0 && (ri as usize) < xs[2] && (cj as usize) < xs[3] {
                                    acc += x.get(&[n, ci, ri as usize, cj as usize]) * w.get(&[co, ci, b, e]);
                                }
                            }
                        }
                    }
                    y.set(&[n, co, r, c], acc);
                }
            }
        }
    }
    y
}

/// Every kernel shape the architecture grid uses.
pub fn grid_kernels() -> Vec<[usize; 3]> {
    let mut k = vec![[1, 1, 1], [3, 3, 3], [1, 3, 3]];
    k.extend((1..=5).map(|ft| [ft, 3, 3]));
    k.extend((2..=7).map(|s| [3, s, s]));
    k
}

/// Records `op` on a fresh graph with `inputs` as parameters and returns the
/// scalar loss node plus the parameter handles.
fn record<F>(op: &F, inputs: &[Tensor], weight: &Option<Tensor>) -> (Graph, Var, Vec<Var>)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = op(&mut g, &vars);
    let loss = match weight {
        Some(w) => {
            let w = g.input(w.clone());
            let p = g.mul(y, w).unwrap();
            g.sum(p)
        }
        None => g.sum(y),
    };
    (g, loss, vars)
}

/// Largest relative error between analytic and central-difference gradients
/// over every element of every input.
///
/// The op's output is reduced to a scalar with a fixed random weighting.
/// `h = 1e-4 · max(1, |x|)`; the error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`, where the floor
/// keeps gradients that are zero up to finite-difference noise comparable.
pub fn max_rel_error<F>(op: F, inputs: Vec<Tensor>, seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = op(&mut g, &vars);
        g.value(y).shape().to_vec()
    };
    let weight = (probe.iter().product::<usize>() > 1).then(|| uniform(&mut rng, &probe, 1.0));
    let (mut g, loss, vars) = record(&op, &inputs, &weight);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).unwrap()).collect();

    let eval = |inputs: &[Tensor]| {
        let (g, loss, _) = record(&op, inputs, &weight);
        g.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            let h = 1e-4 * x.abs().max(1.0);
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] = x + h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] = x - h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}
