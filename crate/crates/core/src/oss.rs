//! Omnidirectional selective scan.
//!
//! A `H x W` map is read as eight 1-D sequences, one per traversal order,
//! each sequence is processed by its own S6 model, and the eight outputs are
//! put back in row-major position and combined.
//!
//! Traversal orders over flat row-major indices `i * W + j`:
//!
//! | id | order |
//! |----|-------|
//! | 1 | rows top to bottom, each left to right |
//! | 3 | columns left to right, each top to bottom |
//! | 5 | anti-diagonals `i + j = s` for ascending `s`, ascending `i` within |
//! | 7 | diagonals `i - j = t` for ascending `t` from `-(W-1)`, ascending `i` within |
//! | 2, 4, 6, 8 | exact reversals of 1, 3, 5, 7 |

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::params::{Init, ParamSpec, ParamStore, Params};
use crate::ssm::{s6_forward_tape, DeltaProjection, S6Shape};
use crate::tensor::{Float, Tensor};

pub const NUM_DIRECTIONS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionOrder {
    pub direction: u8,
    pub height: usize,
    pub width: usize,
    pub perm: Rc<[usize]>,
    pub inverse: Rc<[usize]>,
}

fn forward_order(h: usize, w: usize, base: u8) -> Vec<usize> {
    let mut perm = Vec::with_capacity(h * w);
    match base {
        1 => perm.extend(0..h * w),
        3 => {
            for j in 0..w {
                for i in 0..h {
                    perm.push(i * w + j);
                }
            }
        }
        5 => {
            for s in 0..h + w - 1 {
                for i in 0..h {
                    if s >= i && s - i < w {
                        perm.push(i * w + (s - i));
                    }
                }
            }
        }
        7 => {
            for t in -(w as isize - 1)..h as isize {
                for i in 0..h {
                    let j = i as isize - t;
                    if (0..w as isize).contains(&j) {
                        perm.push(i * w + j as usize);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    perm
}

impl DirectionOrder {
    pub fn new(height: usize, width: usize, direction: u8) -> Result<Self> {
        if !(1..=8).contains(&direction) {
            return Err(Error::Domain(format!("scan direction must be in 1..=8, got {direction}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: "grid must be at least 1x1".into(),
            });
        }
        let base = if direction % 2 == 1 { direction } else { direction - 1 };
        let mut perm = forward_order(height, width, base);
        if direction % 2 == 0 {
            perm.reverse();
        }
        let mut inverse = vec![0; perm.len()];
        for (t, &p) in perm.iter().enumerate() {
            inverse[p] = t;
        }
        Ok(DirectionOrder {
            direction,
            height,
            width,
            perm: perm.into(),
            inverse: inverse.into(),
        })
    }

    /// All eight orders for one grid, in direction order.
    pub fn all(height: usize, width: usize) -> Result<Vec<DirectionOrder>> {
        (1..=NUM_DIRECTIONS as u8)
            .map(|d| DirectionOrder::new(height, width, d))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.perm.len()];
        for &p in self.perm.iter() {
            if p >= seen.len() || seen[p] {
                return false;
            }
            seen[p] = true;
        }
        self.perm.iter().enumerate().all(|(t, &p)| self.inverse[p] == t)
    }
}

/// `[C, H, W]` -> `[L, C]` with position `t` holding the feature at `perm[t]`.
pub fn expand<T: Float>(x: &Tensor<T>, order: &DirectionOrder) -> Result<Tensor<T>> {
    let [ch, h, w] = x.dims3()?;
    if (h, w) != (order.height, order.width) {
        return Err(Error::shape(format!(
            "order built for {}x{} applied to {h}x{w} map",
            order.height, order.width
        )));
    }
    let l = h * w;
    let mut out = vec![T::zero(); l * ch];
    for (t, &p) in order.perm.iter().enumerate() {
        for c in 0..ch {
            out[t * ch + c] = x.data()[c * l + p];
        }
    }
    Tensor::from_vec(&[l, ch], out)
}

/// Inverse of [`expand`]: `[L, C]` back to `[C, H, W]`.
pub fn restore<T: Float>(seq: &Tensor<T>, order: &DirectionOrder) -> Result<Tensor<T>> {
    let [l, ch] = seq.dims2()?;
    if l != order.len() {
        return Err(Error::shape(format!(
            "sequence of length {l} does not match order of length {}",
            order.len()
        )));
    }
    let mut out = vec![T::zero(); l * ch];
    for (t, &p) in order.perm.iter().enumerate() {
        for c in 0..ch {
            out[c * l + p] = seq.data()[t * ch + c];
        }
    }
    Tensor::from_vec(&[ch, order.height, order.width], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMode {
    #[default]
    Sum,
    Mean,
}

/// Restore each of the eight direction outputs to row-major layout and
/// combine them elementwise.
pub fn merge<T: Float>(ys: &[Tensor<T>], height: usize, width: usize, mode: MergeMode) -> Result<Tensor<T>> {
    if ys.len() != NUM_DIRECTIONS {
        return Err(Error::shape(format!("merge expects 8 sequences, got {}", ys.len())));
    }
    let orders = DirectionOrder::all(height, width)?;
    let mut acc: Option<Tensor<T>> = None;
    for (y, order) in ys.iter().zip(&orders) {
        let r = restore(y, order)?;
        match acc.as_mut() {
            Some(a) => {
                if a.shape() != r.shape() {
                    return Err(Error::shape("merge inputs have different channel counts"));
                }
                a.add_assign(&r)
            }
            None => acc = Some(r),
        }
    }
    let acc = acc.expect("eight inputs");
    Ok(match mode {
        MergeMode::Sum => acc,
        MergeMode::Mean => acc.scale(T::from_f64(1.0 / NUM_DIRECTIONS as f64)),
    })
}

/// Omnidirectional scan over a token sequence `x: [B, H*W, C]` in row-major
/// position order, with the per-direction sequence model supplied by the
/// caller as `seq_model(tape, direction_index, sequence)`.
pub fn ossm_with<T: Float, F>(
    tape: &Tape<T>,
    x: &Var<T>,
    height: usize,
    width: usize,
    mode: MergeMode,
    mut seq_model: F,
) -> Result<Var<T>>
where
    F: FnMut(&Tape<T>, usize, &Var<T>) -> Result<Var<T>>,
{
    let [_, l, _] = x.value().dims3()?;
    if l != height * width {
        return Err(Error::shape(format!("{l} tokens cannot form a {height}x{width} grid")));
    }
    let mut acc: Option<Var<T>> = None;
    for (n, order) in DirectionOrder::all(height, width)?.into_iter().enumerate() {
        let seq = tape.gather_positions(x, Rc::clone(&order.perm))?;
        let y = seq_model(tape, n, &seq)?;
        let back = tape.gather_positions(&y, Rc::clone(&order.inverse))?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &back)?,
            None => back,
        });
    }
    let acc = acc.expect("eight directions");
    Ok(match mode {
        MergeMode::Sum => acc,
        MergeMode::Mean => tape.scale(&acc, 1.0 / NUM_DIRECTIONS as f64),
    })
}

/// OSSM with eight independent S6 parameter sets `{prefix}.s6_{1..8}`.
pub fn ossm_forward_tape<T: Float>(
    tape: &Tape<T>,
    params: &Params<T>,
    prefix: &str,
    x: &Var<T>,
    height: usize,
    width: usize,
    mode: MergeMode,
) -> Result<Var<T>> {
    ossm_with(tape, x, height, width, mode, |tape, n, seq| {
        s6_forward_tape(tape, params, &format!("{prefix}.s6_{}", n + 1), seq)
    })
}

/// Widths of one OSS block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OssShape {
    pub channels: usize,
    pub inner: usize,
    pub state: usize,
    pub delta: DeltaProjection,
    pub merge: MergeMode,
}

pub const DW_KERNEL: usize = 3;

impl OssShape {
    pub fn s6(&self) -> S6Shape {
        S6Shape {
            channels: self.inner,
            state: self.state,
            delta: self.delta,
        }
    }

    pub fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let (c, ci) = (self.channels, self.inner);
        let mut specs = vec![
            ParamSpec::new(format!("{prefix}.norm.gamma"), &[c], Init::Ones),
            ParamSpec::new(format!("{prefix}.norm.beta"), &[c], Init::Zeros),
            ParamSpec::new(format!("{prefix}.linear_in.w"), &[c, ci], Init::FanIn(c)),
            ParamSpec::new(format!("{prefix}.linear_in.b"), &[ci], Init::Zeros),
            ParamSpec::new(
                format!("{prefix}.dw.w"),
                &[ci, 1, DW_KERNEL, DW_KERNEL],
                Init::FanIn(DW_KERNEL * DW_KERNEL),
            ),
            ParamSpec::new(format!("{prefix}.dw.b"), &[ci], Init::Zeros),
        ];
        for n in 1..=NUM_DIRECTIONS {
            specs.extend(self.s6().specs(&format!("{prefix}.s6_{n}")));
        }
        specs.push(ParamSpec::new(format!("{prefix}.linear_out.w"), &[ci, c], Init::FanIn(ci)));
        specs.push(ParamSpec::new(format!("{prefix}.linear_out.b"), &[c], Init::Zeros));
        specs
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// `y = x + linear_out(ossm(silu(dwconv(linear_in(layernorm(x))))))` on a
/// `[B, C, H, W]` map.
pub fn oss_block_forward<T: Float>(
    tape: &Tape<T>,
    params: &Params<T>,
    prefix: &str,
    x: &Var<T>,
    merge: MergeMode,
) -> Result<Var<T>> {
    let [_, _, h, w] = x.value().dims4()?;
    let p = |name: &str| params.get(&format!("{prefix}.{name}"));
    let tokens = tape.nchw_to_tokens(x)?;
    let normed = tape.layernorm(&tokens, p("norm.gamma")?, p("norm.beta")?, NORM_EPS)?;
    let inner = tape.linear(&normed, p("linear_in.w")?, Some(p("linear_in.b")?))?;
    let map = tape.tokens_to_nchw(&inner, h, w)?;
    let conv = tape.dwconv2d(&map, p("dw.w")?, Some(p("dw.b")?), DW_KERNEL / 2)?;
    let act = tape.activation(&conv, Activation::Silu);
    let seq = tape.nchw_to_tokens(&act)?;
    let scanned = ossm_forward_tape(tape, params, prefix, &seq, h, w, merge)?;
    let out = tape.linear(&scanned, p("linear_out.w")?, Some(p("linear_out.b")?))?;
    let out = tape.tokens_to_nchw(&out, h, w)?;
    tape.add(x, &out)
}

/// Gain used by [`amplify_scan_path`] in the gradient suites.
pub const SCAN_CHECK_GAIN: f64 = 4.0;

/// Moves a parameter point so that the selective-scan path carries
/// gradients of the same order as the rest of the network.
///
/// At initialization the scan output is roughly cubic in small activations,
/// so the gradients of its parameters sit close to the rounding floor of a
/// `1e-5` central difference. This scales the scan input projection and the
/// `B`, `C` and step-size projections by `gain` and sets every step-size bias
/// to `softplus^-1(~0.97)`. Other parameters are left alone.
pub fn amplify_scan_path<T: Float>(store: &mut ParamStore<T>, gain: f64) {
    const SCALED: [&str; 6] = ["linear_in.w", "proj_b", "proj_c", "dt_proj", "dt_down", "dt_up"];
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let t = store.get_mut(&name).expect("listed name");
        if name.ends_with("dt_bias") {
            t.data_mut().fill(T::from_f64(0.5));
        } else if SCALED.iter().any(|s| name.ends_with(s)) {
            *t = t.map(|v| v * T::from_f64(gain));
        }
    }
}
