//! Pyramid-pooling state space block.
//!
//! The input is split into four contiguous channel groups. Group 1 goes
//! through a 1x1 convolution. Groups 2, 3 and 4 each go through two `k x k`
//! convolutions with ReLU (k = 3, 5, 7) and then a 1x1 convolution. The
//! concatenated result passes through an OSS block, and a pre-norm GELU MLP
//! with its own residual finishes the block.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::oss::{oss_block_forward, MergeMode, OssShape, NORM_EPS};
use crate::params::{Init, ParamSpec, Params};
use crate::ssm::DeltaProjection;
use crate::tensor::Float;

pub const NUM_BRANCHES: usize = 4;

/// Spatial kernel of each branch's stacked convolutions; branch 1 has none.
pub const BRANCH_KERNELS: [usize; NUM_BRANCHES] = [1, 3, 5, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PpssmShape {
    pub channels: usize,
    pub oss_inner: usize,
    pub state: usize,
    pub mlp_hidden: usize,
    pub delta: DeltaProjection,
    pub merge: MergeMode,
}

impl PpssmShape {
    pub fn oss(&self) -> OssShape {
        OssShape {
            channels: self.channels,
            inner: self.oss_inner,
            state: self.state,
            delta: self.delta,
            merge: self.merge,
        }
    }

    pub fn specs(&self, prefix: &str) -> Result<Vec<ParamSpec>> {
        let c = self.channels;
        let q = branch_width(c)?;
        let conv = |name: String, k: usize| {
            [
                ParamSpec::new(format!("{name}.w"), &[q, q, k, k], Init::FanIn(q * k * k)),
                ParamSpec::new(format!("{name}.b"), &[q], Init::Zeros),
            ]
        };
        let mut specs = Vec::new();
        specs.extend(conv(format!("{prefix}.branch1.proj"), 1));
        for (n, &k) in BRANCH_KERNELS.iter().enumerate().skip(1) {
            let b = format!("{prefix}.branch{}", n + 1);
            specs.extend(conv(format!("{b}.conv1"), k));
            specs.extend(conv(format!("{b}.conv2"), k));
            specs.extend(conv(format!("{b}.proj"), 1));
        }
        specs.extend(self.oss().specs(&format!("{prefix}.oss")));
        let r = self.mlp_hidden;
        specs.extend([
            ParamSpec::new(format!("{prefix}.norm2.gamma"), &[c], Init::Ones),
            ParamSpec::new(format!("{prefix}.norm2.beta"), &[c], Init::Zeros),
            ParamSpec::new(format!("{prefix}.mlp.fc1.w"), &[c, r], Init::FanIn(c)),
            ParamSpec::new(format!("{prefix}.mlp.fc1.b"), &[r], Init::Zeros),
            ParamSpec::new(format!("{prefix}.mlp.fc2.w"), &[r, c], Init::FanIn(r)),
            ParamSpec::new(format!("{prefix}.mlp.fc2.b"), &[c], Init::Zeros),
        ]);
        Ok(specs)
    }
}

fn branch_width(channels: usize) -> Result<usize> {
    if channels == 0 || channels % NUM_BRANCHES != 0 {
        return Err(Error::shape(format!(
            "channel count {channels} is not a positive multiple of {NUM_BRANCHES}"
        )));
    }
    Ok(channels / NUM_BRANCHES)
}

fn conv_same<T: Float>(tape: &Tape<T>, params: &Params<T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
    let w = params.get(&format!("{name}.w"))?;
    let k = w.shape()[2];
    tape.conv2d(x, w, Some(params.get(&format!("{name}.b"))?), 1, k / 2)
}

/// One pyramid branch on a `[B, C/4, H, W]` slice. `branch_id` is 1-based.
pub fn pyramid_branch<T: Float>(
    tape: &Tape<T>,
    params: &Params<T>,
    prefix: &str,
    x: &Var<T>,
    branch_id: usize,
) -> Result<Var<T>> {
    if !(1..=NUM_BRANCHES).contains(&branch_id) {
        return Err(Error::Domain(format!("branch id must be in 1..=4, got {branch_id}")));
    }
    let b = format!("{prefix}.branch{branch_id}");
    if branch_id == 1 {
        return conv_same(tape, params, &format!("{b}.proj"), x);
    }
    let h = tape.relu(&conv_same(tape, params, &format!("{b}.conv1"), x)?);
    let h = tape.relu(&conv_same(tape, params, &format!("{b}.conv2"), &h)?);
    conv_same(tape, params, &format!("{b}.proj"), &h)
}

/// The four branch outputs before concatenation.
pub fn pyramid_branches<T: Float>(
    tape: &Tape<T>,
    params: &Params<T>,
    prefix: &str,
    x: &Var<T>,
) -> Result<Vec<Var<T>>> {
    let [_, c, _, _] = x.value().dims4()?;
    branch_width(c)?;
    tape.split_channels(x, NUM_BRANCHES)?
        .iter()
        .enumerate()
        .map(|(n, xi)| pyramid_branch(tape, params, prefix, xi, n + 1))
        .collect()
}

/// `u = oss_block(concat(branches(x)))`, `y = u + mlp(layernorm(u))`.
pub fn ppssm_forward<T: Float>(
    tape: &Tape<T>,
    params: &Params<T>,
    prefix: &str,
    x: &Var<T>,
    merge: MergeMode,
) -> Result<Var<T>> {
    let [_, _, h, w] = x.value().dims4()?;
    let branches = pyramid_branches(tape, params, prefix, x)?;
    let agg = tape.concat_channels(&branches.iter().collect::<Vec<_>>())?;
    let u = oss_block_forward(tape, params, &format!("{prefix}.oss"), &agg, merge)?;

    let p = |name: &str| params.get(&format!("{prefix}.{name}"));
    let tokens = tape.nchw_to_tokens(&u)?;
    let normed = tape.layernorm(&tokens, p("norm2.gamma")?, p("norm2.beta")?, NORM_EPS)?;
    let hidden = tape.linear(&normed, p("mlp.fc1.w")?, Some(p("mlp.fc1.b")?))?;
    let hidden = tape.activation(&hidden, Activation::Gelu);
    let out = tape.linear(&hidden, p("mlp.fc2.w")?, Some(p("mlp.fc2.b")?))?;
    let out = tape.tokens_to_nchw(&out, h, w)?;
    tape.add(&u, &out)
}
