//! Temporal-segment inference: split a clip into `L` contiguous segments,
//! pick `K` frames from each, run the shared network per segment and fuse
//! the per-segment class distributions.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::events::{balanced_ranges, FrameClip};
use crate::network::{BnUpdate, Mode, Network};
use crate::tensor::kernels::softmax;
use crate::tensor::{Graph, Reduce, Tensor, Var};

/// `segments` contiguous ranges with `frames` sorted indices drawn from each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentPlan {
    ranges: Vec<Range<usize>>,
    indices: Vec<Vec<usize>>,
}

impl SegmentPlan {
    /// Builds a plan from explicit per-segment index lists, checking each
    /// list is sorted, distinct and inside the segment's range of `total`.
    pub fn from_indices(total: usize, indices: Vec<Vec<usize>>) -> Result<Self> {
        let ranges = check_shape(total, indices.len(), indices.first().map_or(0, Vec::len))?;
        for (seg, (r, idx)) in ranges.iter().zip(&indices).enumerate() {
            if idx.len() != indices[0].len() {
                return Err(Error::validation("every segment needs the same number of frames"));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) || idx.iter().any(|i| !r.contains(i)) {
                return Err(Error::validation(format!(
                    "segment {seg} indices {idx:?} must be sorted, distinct and inside {r:?}"
                )));
            }
        }
        Ok(Self { ranges, indices })
    }

    pub fn segments(&self) -> usize {
        self.ranges.len()
    }

    pub fn frames_per_segment(&self) -> usize {
        self.indices[0].len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    /// All selected frame indices, segment after segment.
    pub fn flat(&self) -> Vec<usize> {
        self.indices.concat()
    }
}

fn check_shape(total: usize, l: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if l == 0 || k == 0 {
        return Err(Error::validation("segments and frames per segment must be at least 1"));
    }
    if total < l * k {
        return Err(Error::Infeasible(format!(
            "{total} frames cannot supply {l} segments of {k} distinct frames"
        )));
    }
    Ok(balanced_ranges(total, l))
}

/// Random plan: `k` distinct frames per segment, sampled without replacement.
pub fn plan_segments<R: Rng + ?Sized>(total: usize, l: usize, k: usize, rng: &mut R) -> Result<SegmentPlan> {
    let ranges = check_shape(total, l, k)?;
    let indices = ranges
        .iter()
        .map(|r| {
            let mut idx: Vec<usize> = rand::seq::index::sample(rng, r.len(), k)
                .into_iter()
                .map(|i| r.start + i)
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(SegmentPlan { ranges, indices })
}

/// Deterministic plan: `k` evenly spaced frames per segment (centres of `k`
/// equal sub-intervals).
pub fn eval_plan(total: usize, l: usize, k: usize) -> Result<SegmentPlan> {
    let ranges = check_shape(total, l, k)?;
    let indices = ranges
        .iter()
        .map(|r| (0..k).map(|j| r.start + (2 * j + 1) * r.len() / (2 * k)).collect())
        .collect();
    Ok(SegmentPlan { ranges, indices })
}

/// Non-negative per-class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub values: Vec<f64>,
}

impl ClassDistribution {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::validation("class scores must be finite and non-negative"));
        }
        Ok(Self { values })
    }

    pub fn classes(&self) -> usize {
        self.values.len()
    }

    pub fn argmax(&self) -> usize {
        crate::tensor::argmax(&self.values)
    }

    pub fn softmax(&self) -> Self {
        let t = Tensor::new([self.values.len()], self.values.clone()).expect("non-empty");
        Self { values: softmax(&t).into_data() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Consensus {
    Sum,
    #[default]
    Average,
    Max,
}

impl Consensus {
    fn reduce(self) -> Reduce {
        match self {
            Consensus::Sum => Reduce::Sum,
            Consensus::Average => Reduce::Mean,
            Consensus::Max => Reduce::Max,
        }
    }
}

impl FromStr for Consensus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Consensus::Sum),
            "avg" | "average" => Ok(Consensus::Average),
            "max" => Ok(Consensus::Max),
            _ => Err(Error::validation(format!("consensus must be sum, avg or max, got {s:?}"))),
        }
    }
}

impl fmt::Display for Consensus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Consensus::Sum => "sum",
            Consensus::Average => "avg",
            Consensus::Max => "max",
        })
    }
}

/// Elementwise sum, mean or max across segment distributions.
pub fn consensus(dists: &[ClassDistribution], kind: Consensus) -> Result<ClassDistribution> {
    let first = dists.first().ok_or_else(|| Error::validation("consensus needs at least one distribution"))?;
    let c = first.classes();
    if let Some(d) = dists.iter().find(|d| d.classes() != c) {
        return Err(Error::shape(format!("class count mismatch: {} vs {c}", d.classes())));
    }
    let mut out = first.values.clone();
    for d in &dists[1..] {
        for (o, v) in out.iter_mut().zip(&d.values) {
            *o = match kind {
                Consensus::Sum | Consensus::Average => *o + v,
                Consensus::Max => o.max(*v),
            };
        }
    }
    if kind == Consensus::Average {
        let l = dists.len() as f64;
        out.iter_mut().for_each(|o| *o /= l);
    }
    Ok(ClassDistribution { values: out })
}

/// One softmax distribution per segment, each from a fresh network pass over
/// that segment's frames in chronological order.
pub fn forward_segments(net: &Network, clip: &FrameClip, plan: &SegmentPlan) -> Result<Vec<ClassDistribution>> {
    if let Some(&bad) = plan.flat().iter().find(|&&i| i >= clip.frames()) {
        return Err(Error::shape(format!(
            "plan selects frame {bad} but the clip has {} frames",
            clip.frames()
        )));
    }
    plan.indices()
        .iter()
        .map(|idx| {
            let logits = net.forward_clip(&clip.select(idx)?)?;
            Ok(ClassDistribution { values: softmax(&logits).into_data() })
        })
        .collect()
}

/// `softmax(consensus(per-segment distributions))`.
pub fn predict_ts(net: &Network, clip: &FrameClip, plan: &SegmentPlan, kind: Consensus) -> Result<ClassDistribution> {
    Ok(consensus(&forward_segments(net, clip, plan)?, kind)?.softmax())
}

/// Graph-level TS forward for training.
pub struct TsForward {
    /// `[B, classes]` consensus values (pre outer softmax).
    pub consensus: Var,
    pub params: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Records a batched TS forward on `g`. `input` is `[B, L·K, 2, H, W]` holding
/// each example's selected frames, segment after segment.
pub fn ts_forward(
    g: &mut Graph,
    net: &Network,
    input: &Tensor,
    segments: usize,
    kind: Consensus,
    mode: Mode,
) -> Result<TsForward> {
    let s = input.shape().to_vec();
    if s.len() != 5 || segments == 0 || !s[1].is_multiple_of(segments) {
        return Err(Error::shape(format!("TS input {s:?} cannot be split into {segments} segments")));
    }
    let k = s[1] / segments;
    let x = input.clone().reshape([s[0] * segments, k, s[2], s[3], s[4]])?;
    let out = net.forward(g, &x, mode)?;
    let probs = g.softmax(out.logits);
    let classes = g.value(probs).shape()[1];
    let probs = g.reshape(probs, &[s[0], segments, classes])?;
    let fused = g.reduce(probs, 1, kind.reduce())?;
    Ok(TsForward { consensus: fused, params: out.params, bn_updates: out.bn_updates })
}
