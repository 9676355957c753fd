//! The full encoder-decoder, its configuration, and analytic accounting.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::oss::{MergeMode, NORM_EPS};
use crate::params::{Init, ParamSpec, Params};
use crate::ppssm::{ppssm_forward, PpssmShape, BRANCH_KERNELS};
use crate::ssm::DeltaProjection;
use crate::tensor::Float;

pub const NUM_STAGES: usize = 4;
pub const PATCH: usize = 4;
/// Total downsampling from input to the deepest stage.
pub const MAX_STRIDE: usize = 32;
const DECODE_KERNEL: usize = 3;

/// Multiply-accumulates per state element per position in the selective
/// scan: discretization (2), state update (2), readout (2).
pub const SCAN_MACS_PER_STATE: u64 = 6;

/// Published parameter count of the default configuration, in millions.
pub const REFERENCE_PARAMS_M: f64 = 44.77;

fn default_base_channels() -> usize {
    96
}
fn default_depths() -> Vec<usize> {
    vec![2, 2, 9, 2]
}
fn default_num_classes() -> usize {
    6
}
fn default_state_dim() -> usize {
    16
}
fn default_mlp_ratio() -> usize {
    2
}
fn default_input_channels() -> usize {
    3
}
fn default_inner_ratio() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_depths")]
    pub depths: Vec<usize>,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    /// Hidden width of the block MLP as a multiple of the block width.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    /// Width of the OSS inner projection as a multiple of the block width.
    #[serde(default = "default_inner_ratio")]
    pub inner_ratio: usize,
    #[serde(default)]
    pub delta_projection: DeltaProjection,
    #[serde(default)]
    pub merge: MergeMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: default_base_channels(),
            depths: default_depths(),
            num_classes: default_num_classes(),
            state_dim: default_state_dim(),
            mlp_ratio: default_mlp_ratio(),
            input_channels: default_input_channels(),
            inner_ratio: default_inner_ratio(),
            delta_projection: DeltaProjection::default(),
            merge: MergeMode::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            return bad(format!("base_channels must be a positive multiple of 4, got {}", self.base_channels));
        }
        if self.depths.len() != NUM_STAGES {
            return bad(format!("depths must list {NUM_STAGES} stages, got {}", self.depths.len()));
        }
        // class ids are stored as u8 with 255 reserved for "ignore"
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        for (name, v) in [
            ("state_dim", self.state_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("input_channels", self.input_channels),
            ("inner_ratio", self.inner_ratio),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn block_shape(&self, stage: usize) -> PpssmShape {
        let c = self.stage_channels(stage);
        PpssmShape {
            channels: c,
            oss_inner: c * self.inner_ratio,
            state: self.state_dim,
            mlp_hidden: c * self.mlp_ratio,
            delta: self.delta_projection,
            merge: self.merge,
        }
    }

    /// Every parameter of the model in a fixed order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let c = self.base_channels;
        let mut specs = Vec::new();
        specs.extend(conv_specs("embed.conv", self.input_channels, c, PATCH));
        specs.extend(norm_specs("embed.norm", c));
        for s in 0..NUM_STAGES {
            if s > 0 {
                let cin = self.stage_channels(s - 1);
                specs.extend(conv_specs(&format!("merge{s}.conv"), cin, 2 * cin, 2));
                specs.extend(norm_specs(&format!("merge{s}.norm"), 2 * cin));
            }
            for j in 0..self.depths[s] {
                specs.extend(self.block_shape(s).specs(&format!("stage{s}.block{j}"))?);
            }
        }
        for d in 1..NUM_STAGES {
            let skip = NUM_STAGES - 1 - d;
            let (cprev, cskip) = (self.stage_channels(skip + 1), self.stage_channels(skip));
            specs.extend(conv_specs(&format!("decode{d}.conv1"), cprev + cskip, cskip, DECODE_KERNEL));
            specs.extend(norm_specs(&format!("decode{d}.norm1"), cskip));
            specs.extend(conv_specs(&format!("decode{d}.conv2"), cskip, cskip, DECODE_KERNEL));
            specs.extend(norm_specs(&format!("decode{d}.norm2"), cskip));
        }
        specs.extend(conv_specs("head", c, self.num_classes, 1));
        Ok(specs)
    }

    pub fn num_parameters(&self) -> Result<usize> {
        Ok(self.param_specs()?.iter().map(ParamSpec::numel).sum())
    }
}

fn conv_specs(name: &str, cin: usize, cout: usize, k: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{name}.w"), &[cout, cin, k, k], Init::FanIn(cin * k * k)),
        ParamSpec::new(format!("{name}.b"), &[cout], Init::Zeros),
    ]
}

fn norm_specs(name: &str, c: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{name}.gamma"), &[c], Init::Ones),
        ParamSpec::new(format!("{name}.beta"), &[c], Init::Zeros),
    ]
}

fn conv_norm<T: Float>(
    tape: &Tape<T>,
    params: &Params<T>,
    conv: &str,
    norm: &str,
    x: &Var<T>,
    stride: usize,
    pad: usize,
) -> Result<Var<T>> {
    let y = tape.conv2d(
        x,
        params.get(&format!("{conv}.w"))?,
        Some(params.get(&format!("{conv}.b"))?),
        stride,
        pad,
    )?;
    tape.layernorm_channels(
        &y,
        params.get(&format!("{norm}.gamma"))?,
        params.get(&format!("{norm}.beta"))?,
        NORM_EPS,
    )
}

/// 4x4 stride-4 convolution followed by channel layernorm.
pub fn patch_embed<T: Float>(tape: &Tape<T>, params: &Params<T>, img: &Var<T>) -> Result<Var<T>> {
    let [_, _, h, w] = img.value().dims4()?;
    if h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("input {h}x{w} is not a positive multiple of {MAX_STRIDE}")));
    }
    conv_norm(tape, params, "embed.conv", "embed.norm", img, PATCH, 0)
}

/// 2x2 stride-2 convolution doubling channels, then channel layernorm.
pub fn patch_merge<T: Float>(tape: &Tape<T>, params: &Params<T>, stage: usize, x: &Var<T>) -> Result<Var<T>> {
    let [_, _, h, w] = x.value().dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("cannot merge patches of an odd {h}x{w} map")));
    }
    conv_norm(tape, params, &format!("merge{stage}.conv"), &format!("merge{stage}.norm"), x, 2, 0)
}

/// Output of each encoder stage, at strides 4, 8, 16 and 32.
pub fn encoder_forward<T: Float>(
    tape: &Tape<T>,
    params: &Params<T>,
    config: &ModelConfig,
    img: &Var<T>,
) -> Result<Vec<Var<T>>> {
    let [_, cin, _, _] = img.value().dims4()?;
    if cin != config.input_channels {
        return Err(Error::shape(format!(
            "model expects {} input channels, got {cin}",
            config.input_channels
        )));
    }
    let mut x = patch_embed(tape, params, img)?;
    let mut stages = Vec::with_capacity(NUM_STAGES);
    for s in 0..NUM_STAGES {
        if s > 0 {
            x = patch_merge(tape, params, s, &x)?;
        }
        for j in 0..config.depths[s] {
            x = ppssm_forward(tape, params, &format!("stage{s}.block{j}"), &x, config.merge)?;
        }
        stages.push(x.clone());
    }
    Ok(stages)
}

/// Upsample `prev` by 2, concatenate `skip`, then two 3x3 conv + norm + ReLU.
pub fn decode_block<T: Float>(
    tape: &Tape<T>,
    params: &Params<T>,
    prefix: &str,
    prev: &Var<T>,
    skip: &Var<T>,
) -> Result<Var<T>> {
    let up = tape.upsample_bilinear(prev, 2)?;
    let (us, ss) = (up.value().dims4()?, skip.value().dims4()?);
    if us[0] != ss[0] || us[2..] != ss[2..] {
        return Err(Error::shape(format!(
            "upsampled decoder input {us:?} does not match skip {ss:?}"
        )));
    }
    let x = tape.concat_channels(&[&up, skip])?;
    let pad = DECODE_KERNEL / 2;
    let x = conv_norm(tape, params, &format!("{prefix}.conv1"), &format!("{prefix}.norm1"), &x, 1, pad)?;
    let x = tape.relu(&x);
    let x = conv_norm(tape, params, &format!("{prefix}.conv2"), &format!("{prefix}.norm2"), &x, 1, pad)?;
    Ok(tape.relu(&x))
}

/// Logits `[B, K, H, W]` for images `[B, C_in, H, W]`.
pub fn ppmamba_forward<T: Float>(
    tape: &Tape<T>,
    params: &Params<T>,
    config: &ModelConfig,
    img: &Var<T>,
) -> Result<Var<T>> {
    let stages = encoder_forward(tape, params, config, img)?;
    let mut x = stages[NUM_STAGES - 1].clone();
    for d in 1..NUM_STAGES {
        x = decode_block(tape, params, &format!("decode{d}"), &x, &stages[NUM_STAGES - 1 - d])?;
    }
    let logits = tape.conv2d(&x, params.get("head.w")?, Some(params.get("head.b")?), 1, 0)?;
    tape.upsample_bilinear(&logits, PATCH)
}

// ---------------------------------------------------------------------------
// Accounting

pub fn conv_params(k: usize, cin: usize, cout: usize) -> u64 {
    (k * k * cin * cout + cout) as u64
}

pub fn conv_macs(k: usize, cin: usize, cout: usize, hout: usize, wout: usize) -> u64 {
    (k * k * cin * cout * hout * wout) as u64
}

pub fn linear_macs(cin: usize, cout: usize, positions: usize) -> u64 {
    (cin * cout * positions) as u64
}

pub fn scan_macs(len: usize, channels: usize, state: usize) -> u64 {
    (len * channels * state) as u64 * SCAN_MACS_PER_STATE
}

/// Multiply-accumulates of one PP-SSM block on an `h x w` map. Norms,
/// activations and additions are not counted.
pub fn block_macs(shape: &PpssmShape, h: usize, w: usize) -> u64 {
    let (c, l) = (shape.channels, h * w);
    let q = c / 4;
    let mut macs = conv_macs(1, q, q, h, w);
    for &k in &BRANCH_KERNELS[1..] {
        macs += 2 * conv_macs(k, q, q, h, w) + conv_macs(1, q, q, h, w);
    }
    let ci = shape.oss_inner;
    macs += linear_macs(c, ci, l) + conv_macs(3, 1, ci, h, w) + linear_macs(ci, c, l);
    let s6 = shape.oss().s6();
    let r = s6.delta.rank(ci);
    let dt = match s6.delta {
        DeltaProjection::Full => linear_macs(ci, ci, l),
        DeltaProjection::LowRank => linear_macs(ci, r, l) + linear_macs(r, ci, l),
    };
    let per_direction = 2 * linear_macs(ci, s6.state, l) + dt + scan_macs(l, ci, s6.state);
    macs += crate::oss::NUM_DIRECTIONS as u64 * per_direction;
    macs + 2 * linear_macs(c, shape.mlp_hidden, l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub input_shape: [usize; 4],
    pub embed_shape: Vec<usize>,
    pub stage_shapes: Vec<Vec<usize>>,
    pub logits_shape: Vec<usize>,
    pub params: u64,
    pub macs: u64,
}

impl Summary {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

/// Shapes, parameter count and multiply-accumulates for one forward pass,
/// all derived from the configuration without running the model.
pub fn summarize(config: &ModelConfig, input_shape: [usize; 4]) -> Result<Summary> {
    let specs = config.param_specs()?;
    let [b, cin, h, w] = input_shape;
    if cin != config.input_channels {
        return Err(Error::shape(format!("model expects {} input channels, got {cin}", config.input_channels)));
    }
    if h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
        return Err(Error::shape(format!("input {h}x{w} is not a positive multiple of {MAX_STRIDE}")));
    }
    let (mut hs, mut ws) = (h / PATCH, w / PATCH);
    let c0 = config.base_channels;
    let mut macs = conv_macs(PATCH, cin, c0, hs, ws);
    let mut stage_shapes = Vec::new();
    let mut dims = Vec::new();
    for s in 0..NUM_STAGES {
        let c = config.stage_channels(s);
        if s > 0 {
            hs /= 2;
            ws /= 2;
            macs += conv_macs(2, c / 2, c, hs, ws);
        }
        macs += config.depths[s] as u64 * block_macs(&config.block_shape(s), hs, ws);
        stage_shapes.push(vec![b, c, hs, ws]);
        dims.push((c, hs, ws));
    }
    for d in 1..NUM_STAGES {
        let (cskip, hk, wk) = dims[NUM_STAGES - 1 - d];
        let cprev = dims[NUM_STAGES - d].0;
        macs += conv_macs(DECODE_KERNEL, cprev + cskip, cskip, hk, wk);
        macs += conv_macs(DECODE_KERNEL, cskip, cskip, hk, wk);
    }
    macs += conv_macs(1, c0, config.num_classes, h / PATCH, w / PATCH);
    Ok(Summary {
        input_shape,
        embed_shape: vec![b, c0, h / PATCH, w / PATCH],
        stage_shapes,
        logits_shape: vec![b, config.num_classes, h, w],
        params: specs.iter().map(|s| s.numel() as u64).sum(),
        macs: macs * b as u64,
    })
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input            {:?}", self.input_shape)?;
        writeln!(f, "patch embed      {:?}", self.embed_shape)?;
        for (s, shape) in self.stage_shapes.iter().enumerate() {
            writeln!(f, "stage {}          {:?}", s + 1, shape)?;
        }
        writeln!(f, "logits           {:?}", self.logits_shape)?;
        writeln!(f, "parameters       {} ({:.2} M)", self.params, self.params as f64 / 1e6)?;
        writeln!(f, "reference        {REFERENCE_PARAMS_M:.2} M parameters (published figure)")?;
        writeln!(f, "MACs             {} ({:.2} G)", self.macs, self.macs as f64 / 1e9)?;
        write!(f, "FLOPs (2 x MACs) {} ({:.2} G)", self.flops(), self.flops() as f64 / 1e9)
    }
}
