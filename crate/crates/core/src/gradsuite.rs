//! The gradient-check suite: every differentiable tape op plus the composite
//! blocks, each compared against central finite differences in f64.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check_with, probe_weights, GradCheckConfig, GradCheckReport};
use crate::network::{decode_block, ppmamba_forward, ModelConfig};
use crate::ops::Activation;
use crate::oss::{amplify_scan_path, oss_block_forward, ossm_forward_tape, MergeMode, OssShape, SCAN_CHECK_GAIN};
use crate::params::{ParamStore, Params};
use crate::ppssm::{ppssm_forward, pyramid_branches, PpssmShape};
use crate::ssm::{s6_forward_tape, ssm_scan, DeltaProjection, S6Shape};
use crate::tensor::{Fill, Tensor};

/// Bound for single ops and blocks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Bound for the whole network.
pub const MODEL_TOLERANCE: f64 = 1e-3;

type CheckFn = Box<dyn Fn() -> Result<GradCheckReport>>;

pub struct Target {
    pub name: String,
    pub tolerance: f64,
    run: CheckFn,
}

impl Target {
    pub fn new(name: impl Into<String>, tolerance: f64, run: impl Fn() -> Result<GradCheckReport> + 'static) -> Self {
        Target {
            name: name.into(),
            tolerance,
            run: Box::new(run),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

pub fn run_targets(targets: &[Target]) -> Result<Vec<SuiteRow>> {
    targets
        .iter()
        .map(|t| {
            Ok(SuiteRow {
                name: t.name.clone(),
                tolerance: t.tolerance,
                report: (t.run)()?,
            })
        })
        .collect()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Fill::Uniform { lo, hi, seed }).expect("valid shape")
}

/// Uniform values with magnitude in `[0.1, 1]`, keeping kinks out of reach
/// of the finite-difference step.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, seed).map(|v| v.signum() * (0.1 + 0.9 * v.abs()))
}

/// `sum(y * probe)` with a probe fixed by the shape of `y`.
fn probe(tape: &Tape<f64>, y: &Var<f64>) -> Result<Var<f64>> {
    tape.dot_const(y, &probe_weights(y.shape(), 977))
}

fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>) -> Result<GradCheckReport> {
    grad_check_with(f, &inputs, &GradCheckConfig::default())
}

fn op(name: &str, inputs: Vec<Tensor<f64>>, f: fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>) -> Target {
    Target::new(name, OP_TOLERANCE, move || check(inputs.clone(), f))
}

fn op_targets() -> Vec<Target> {
    let u = |shape: &[usize], seed| uniform(shape, -1.0, 1.0, seed);
    let labels = Rc::new(
        Tensor::<u8>::from_vec(&[2, 3, 3], vec![0, 1, 2, 3, 255, 1, 2, 0, 3, 1, 1, 255, 0, 2, 3, 3, 0, 1]).unwrap(),
    );
    let mut t = vec![
        op("add", vec![u(&[3, 4], 1), u(&[3, 4], 2)], |t, v| probe(t, &t.add(&v[0], &v[1])?)),
        op("sub", vec![u(&[3, 4], 1), u(&[3, 4], 2)], |t, v| probe(t, &t.sub(&v[0], &v[1])?)),
        op("mul", vec![u(&[3, 4], 1), u(&[3, 4], 2)], |t, v| probe(t, &t.mul(&v[0], &v[1])?)),
        op("scale", vec![u(&[5], 1)], |t, v| probe(t, &t.scale(&v[0], -2.5))),
        op("sum", vec![u(&[2, 3], 1)], |t, v| {
            let s = t.sum(&v[0]);
            t.mul(&s, &s)
        }),
        op("mean", vec![u(&[2, 3], 1)], |t, v| {
            let s = t.mean(&v[0]);
            t.mul(&s, &s)
        }),
        op("dot_const", vec![u(&[4, 2], 1)], |t, v| probe(t, &v[0])),
        op("neg_exp", vec![u(&[3, 3], 1)], |t, v| probe(t, &t.neg_exp(&v[0]))),
        op("relu", vec![away_from_zero(&[4, 5], 1)], |t, v| probe(t, &t.activation(&v[0], Activation::Relu))),
        op("silu", vec![u(&[4, 5], 1)], |t, v| probe(t, &t.activation(&v[0], Activation::Silu))),
        op("gelu", vec![u(&[4, 5], 1)], |t, v| probe(t, &t.activation(&v[0], Activation::Gelu))),
        op("softplus", vec![u(&[4, 5], 1)], |t, v| probe(t, &t.activation(&v[0], Activation::Softplus))),
        op("matmul", vec![u(&[3, 4], 1), u(&[4, 5], 2)], |t, v| probe(t, &t.matmul(&v[0], &v[1])?)),
        op("linear", vec![u(&[2, 3, 4], 1), u(&[4, 5], 2), u(&[5], 3)], |t, v| {
            probe(t, &t.linear(&v[0], &v[1], Some(&v[2]))?)
        }),
        op("conv2d 3x3 s1 p1", vec![u(&[2, 3, 5, 5], 1), u(&[4, 3, 3, 3], 2), u(&[4], 3)], |t, v| {
            probe(t, &t.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1)?)
        }),
        op("conv2d 2x2 s2", vec![u(&[1, 2, 6, 4], 1), u(&[3, 2, 2, 2], 2), u(&[3], 3)], |t, v| {
            probe(t, &t.conv2d(&v[0], &v[1], Some(&v[2]), 2, 0)?)
        }),
        op("conv2d 4x4 s4", vec![u(&[1, 3, 8, 8], 1), u(&[2, 3, 4, 4], 2), u(&[2], 3)], |t, v| {
            probe(t, &t.conv2d(&v[0], &v[1], Some(&v[2]), 4, 0)?)
        }),
        op("dwconv2d", vec![u(&[2, 3, 4, 5], 1), u(&[3, 1, 3, 3], 2), u(&[3], 3)], |t, v| {
            probe(t, &t.dwconv2d(&v[0], &v[1], Some(&v[2]), 1)?)
        }),
        op("layernorm", vec![u(&[3, 6], 1), u(&[6], 2), u(&[6], 3)], |t, v| {
            probe(t, &t.layernorm(&v[0], &v[1], &v[2], 1e-5)?)
        }),
        op("layernorm_channels", vec![u(&[2, 5, 3, 2], 1), u(&[5], 2), u(&[5], 3)], |t, v| {
            probe(t, &t.layernorm_channels(&v[0], &v[1], &v[2], 1e-5)?)
        }),
        op("upsample x2", vec![u(&[1, 2, 3, 4], 1)], |t, v| probe(t, &t.upsample_bilinear(&v[0], 2)?)),
        op("upsample x4", vec![u(&[2, 1, 2, 2], 1)], |t, v| probe(t, &t.upsample_bilinear(&v[0], 4)?)),
        op("concat_channels", vec![u(&[2, 1, 2, 3], 1), u(&[2, 3, 2, 3], 2)], |t, v| {
            probe(t, &t.concat_channels(&[&v[0], &v[1]])?)
        }),
        op("split_channels", vec![u(&[2, 4, 2, 2], 1)], |t, v| {
            let parts = t.split_channels(&v[0], 2)?;
            let a = probe(t, &parts[0])?;
            let b = t.mul(&parts[1], &parts[1])?;
            t.add(&a, &probe(t, &b)?)
        }),
        op("nchw_to_tokens", vec![u(&[2, 3, 2, 4], 1)], |t, v| probe(t, &t.nchw_to_tokens(&v[0])?)),
        op("tokens_to_nchw", vec![u(&[2, 6, 3], 1)], |t, v| probe(t, &t.tokens_to_nchw(&v[0], 2, 3)?)),
        op("gather_positions", vec![u(&[2, 5, 3], 1)], |t, v| {
            probe(t, &t.gather_positions(&v[0], Rc::from(vec![3, 0, 4, 1, 2]))?)
        }),
        op("reshape", vec![u(&[2, 6], 1)], |t, v| probe(t, &t.reshape(&v[0], &[3, 4])?)),
        op("ssm_scan", scan_inputs(), |t, v| probe(t, &ssm_scan(t, &v[0], &v[1], &v[2], &v[3], &v[4], &v[5])?)),
    ];
    let l = Rc::clone(&labels);
    t.push(Target::new("cross_entropy", OP_TOLERANCE, move || {
        let l = Rc::clone(&l);
        check(vec![u(&[2, 4, 3, 3], 1)], move |t, v| t.cross_entropy(&v[0], &l, 255))
    }));
    t.push(Target::new("cross_entropy_map", OP_TOLERANCE, move || {
        let l = Rc::clone(&labels);
        check(vec![u(&[2, 4, 3, 3], 1)], move |t, v| probe(t, &t.cross_entropy_map(&v[0], &l, 255)?))
    }));
    t
}

fn scan_inputs() -> Vec<Tensor<f64>> {
    let (b, l, c, n) = (2, 5, 3, 4);
    vec![
        uniform(&[b, l, c], -1.0, 1.0, 1),
        uniform(&[b, l, c], 0.1, 1.0, 2),
        uniform(&[c, n], -2.0, -0.2, 3),
        uniform(&[b, l, n], -1.0, 1.0, 4),
        uniform(&[b, l, n], -1.0, 1.0, 5),
        uniform(&[c], -1.0, 1.0, 6),
    ]
}

/// Gradient check of `forward(params, input)` over every parameter of
/// `store` plus the input, probing the output with fixed weights.
fn block_check(
    store: ParamStore<f64>,
    input: Tensor<f64>,
    max_coords: usize,
    forward: impl Fn(&Tape<f64>, &Params<f64>, &Var<f64>) -> Result<Var<f64>>,
) -> Result<GradCheckReport> {
    let names: Vec<String> = store.names().map(String::from).collect();
    let n = names.len();
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|k| store.get(k).unwrap().clone()).collect();
    inputs.push(input);
    grad_check_with(
        |tape, v| {
            let p = Params::from_vars(&names, &v[..n]);
            probe(tape, &forward(tape, &p, &v[n])?)
        },
        &inputs,
        &GradCheckConfig { max_coords, ..Default::default() },
    )
}

fn s6_target(delta: DeltaProjection) -> Target {
    let name = match delta {
        DeltaProjection::Full => "s6 (full step projection)",
        DeltaProjection::LowRank => "s6 (low-rank step projection)",
    };
    Target::new(name, OP_TOLERANCE, move || {
        let shape = S6Shape { channels: 4, state: 4, delta };
        let mut store = ParamStore::init(&shape.specs("s6"), 21)?;
        amplify_scan_path(&mut store, SCAN_CHECK_GAIN);
        block_check(store, uniform(&[1, 6, 4], -1.0, 1.0, 22), 200, |t, p, x| s6_forward_tape(t, p, "s6", x))
    })
}

fn oss_shape(c: usize) -> OssShape {
    OssShape { channels: c, inner: c, state: 4, delta: DeltaProjection::LowRank, merge: MergeMode::Sum }
}

fn ppssm_shape(c: usize) -> PpssmShape {
    PpssmShape {
        channels: c,
        oss_inner: c,
        state: 4,
        mlp_hidden: 2 * c,
        delta: DeltaProjection::LowRank,
        merge: MergeMode::Sum,
    }
}

fn block_targets() -> Vec<Target> {
    vec![
        s6_target(DeltaProjection::Full),
        s6_target(DeltaProjection::LowRank),
        Target::new("ossm", OP_TOLERANCE, || {
            let mut store = ParamStore::init(&oss_shape(4).specs("oss"), 31)?;
            amplify_scan_path(&mut store, SCAN_CHECK_GAIN);
            block_check(store, uniform(&[1, 16, 4], -1.0, 1.0, 32), 200, |t, p, x| {
                ossm_forward_tape(t, p, "oss", x, 4, 4, MergeMode::Sum)
            })
        }),
        Target::new("oss block", OP_TOLERANCE, || {
            let mut store = ParamStore::init(&oss_shape(4).specs("oss"), 33)?;
            amplify_scan_path(&mut store, SCAN_CHECK_GAIN);
            block_check(store, uniform(&[1, 4, 4, 4], -1.0, 1.0, 34), 200, |t, p, x| {
                oss_block_forward(t, p, "oss", x, MergeMode::Sum)
            })
        }),
        Target::new("pyramid branches", OP_TOLERANCE, || {
            let store = ParamStore::init(&ppssm_shape(8).specs("pp")?, 41)?;
            let store = only_prefix(&store, "pp.branch");
            block_check(store, uniform(&[1, 8, 5, 5], -1.0, 1.0, 42), 200, |t, p, x| {
                let outs = pyramid_branches(t, p, "pp", x)?;
                t.concat_channels(&outs.iter().collect::<Vec<_>>())
            })
        }),
        Target::new("pp-ssm block", OP_TOLERANCE, || {
            let mut store = ParamStore::init(&ppssm_shape(8).specs("pp")?, 43)?;
            amplify_scan_path(&mut store, SCAN_CHECK_GAIN);
            block_check(store, uniform(&[1, 8, 4, 4], -1.0, 1.0, 44), 200, |t, p, x| {
                ppssm_forward(t, p, "pp", x, MergeMode::Sum)
            })
        }),
        Target::new("decode block", OP_TOLERANCE, || {
            let cfg = ModelConfig { base_channels: 8, depths: vec![0; 4], num_classes: 3, ..ModelConfig::default() };
            let store = only_prefix(&ParamStore::init(&cfg.param_specs()?, 51)?, "decode3.");
            let skip = Rc::new(uniform(&[1, 8, 4, 4], -1.0, 1.0, 52));
            block_check(store, uniform(&[1, 16, 2, 2], -1.0, 1.0, 53), 200, move |t, p, x| {
                let s = t.constant((*skip).clone());
                decode_block(t, p, "decode3", x, &s)
            })
        }),
    ]
}

fn only_prefix(store: &ParamStore<f64>, prefix: &str) -> ParamStore<f64> {
    let mut out = ParamStore::default();
    for (name, value) in store.iter().filter(|(n, _)| n.starts_with(prefix)) {
        out.insert(name, value.clone()).expect("unique names");
    }
    out
}

/// Gradient check of the whole network with a per-pixel cross-entropy
/// objective on a fixed label map.
///
/// The scalar checked is the mean of (per-pixel loss minus that pixel's loss
/// at the base point). It has the same gradient as the mean loss, but its
/// value stays near zero, so its final rounding does not swamp the small
/// derivatives of the deepest stage.
pub fn full_model_check(config: &ModelConfig, seed: u64, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::init(&config.param_specs()?, seed)?;
    amplify_scan_path(&mut store, SCAN_CHECK_GAIN);
    let names: Vec<String> = store.names().map(String::from).collect();
    let n = names.len();
    let size = 32;
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|k| store.get(k).unwrap().clone()).collect();
    inputs.push(uniform(&[1, config.input_channels, size, size], 0.0, 1.0, seed + 1));
    let k = config.num_classes;
    let labels = Tensor::<u8>::from_vec(
        &[1, size, size],
        (0..size * size).map(|i| ((i * 7 + i / size) % k) as u8).collect(),
    )?;

    let objective = |tape: &Tape<f64>, v: &[Var<f64>]| -> Result<Var<f64>> {
        let p = Params::from_vars(&names, &v[..n]);
        let logits = ppmamba_forward(tape, &p, config, &v[n])?;
        tape.cross_entropy_map(&logits, &labels, 255)
    };
    let base = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        objective(&tape, &vars)?.value().clone()
    };
    grad_check_with(
        |tape, v| {
            let losses = objective(tape, v)?;
            let offset = tape.constant(base.clone());
            Ok(tape.mean(&tape.sub(&losses, &offset)?))
        },
        &inputs,
        gc,
    )
}

/// Configuration of the network-level check.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        depths: vec![1, 1, 1, 1],
        num_classes: 3,
        state_dim: 4,
        ..ModelConfig::default()
    }
}

pub fn default_targets() -> Vec<Target> {
    let mut t = op_targets();
    t.extend(block_targets());
    t.push(Target::new("full model", MODEL_TOLERANCE, || {
        full_model_check(&toy_model_config(), 11, &GradCheckConfig { max_coords: 150, ..Default::default() })
    }));
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_and_block_targets_pass() {
        let mut targets = op_targets();
        targets.extend(block_targets());
        for row in run_targets(&targets).unwrap() {
            assert!(row.passed(), "{} {:?}", row.name, row.report);
            assert!(row.report.coords_checked > 0);
        }
    }

    #[test]
    fn corrupted_rule_is_reported_as_failure() {
        let bad = Target::new("doubled square", OP_TOLERANCE, || {
            check(vec![uniform(&[4], 0.5, 1.0, 1)], |t, v| {
                let x = &v[0];
                let out = x.value().map(|a| a * a);
                let xv = x.value().clone();
                // correct rule would be 2x; this one is 4x
                let y = t.custom(out, &[x], move |g| vec![Some(g.zip_map(&xv, |gi, a| 4.0 * gi * a))]);
                probe(t, &y)
            })
        });
        let rows = run_targets(&[bad]).unwrap();
        assert!(!rows[0].passed());
    }
}
