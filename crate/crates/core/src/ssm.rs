//! Diagonal state-space models: zero-order-hold discretization and the
//! selective scan (S6).
//!
//! The continuous system `h' = A h + b x`, `y = <c, h>` with diagonal
//! `A = -exp(A_log)` is discretized per step size `delta`:
//!
//! ```text
//! A_bar = exp(delta * a)
//! b_bar = (exp(delta * a) - 1) / (delta * a) * delta * b
//! ```
//!
//! and scanned as `h_t = A_bar_t * h_{t-1} + b_bar_t * x_t`,
//! `y_t = <c_t, h_t> + D * x_t`, with `h_0 = 0`. In S6, `delta`, `b` and `c`
//! are computed from the input at every step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::params::{Init, ParamSpec, Params};
use crate::tensor::{Float, Tensor};

/// Below this `|delta * a|` the ZOH input gain uses its Taylor series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-4;

/// Default chunk length of [`selective_scan_blocked`].
pub const DEFAULT_BLOCK_LEN: usize = 64;

/// `phi(u) = (exp(u) - 1) / u`, with `phi(0) = 1`.
#[inline]
pub fn zoh_gain<T: Float>(u: T) -> T {
    if u.abs() < T::from_f64(ZOH_SERIES_THRESHOLD) {
        T::one() + u / T::from_f64(2.0) + u * u / T::from_f64(6.0)
    } else {
        u.exp_m1() / u
    }
}

/// Derivative of [`zoh_gain`].
#[inline]
fn zoh_gain_derivative<T: Float>(u: T) -> T {
    if u.abs() < T::from_f64(1e-2) {
        // sum_k k u^(k-1) / (k+1)!
        let c = |v: f64| T::from_f64(v);
        c(0.5) + u * (c(1.0 / 3.0) + u * (c(1.0 / 8.0) + u * (c(1.0 / 30.0) + u * c(1.0 / 144.0))))
    } else {
        (u * u.exp() - u.exp_m1()) / (u * u)
    }
}

/// Per-step discretization of a diagonal SSM.
///
/// `a_diag: [C, N]`, `delta: [L, C]`, `b: [L, N]`; returns
/// `(A_bar, b_bar)`, both `[L, C, N]`.
pub fn zoh_discretize<T: Float>(
    a_diag: &Tensor<T>,
    delta: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [ch, n] = a_diag.dims2()?;
    let [l, ch2] = delta.dims2()?;
    let [l2, n2] = b.dims2()?;
    if ch != ch2 || l != l2 || n != n2 {
        return Err(Error::shape(format!(
            "zoh_discretize: A {:?}, delta {:?}, b {:?} are inconsistent",
            a_diag.shape(),
            delta.shape(),
            b.shape()
        )));
    }
    if let Some(bad) = delta.data().iter().find(|d| !(**d > T::zero()) || !d.is_finite()) {
        return Err(Error::Domain(format!("step size must be positive and finite, got {bad}")));
    }
    let mut a_bar = vec![T::zero(); l * ch * n];
    let mut b_bar = vec![T::zero(); l * ch * n];
    for t in 0..l {
        for c in 0..ch {
            let dt = delta.data()[t * ch + c];
            for s in 0..n {
                let u = dt * a_diag.data()[c * n + s];
                let idx = (t * ch + c) * n + s;
                a_bar[idx] = u.exp();
                b_bar[idx] = zoh_gain(u) * dt * b.data()[t * n + s];
            }
        }
    }
    Ok((
        Tensor::from_vec(&[l, ch, n], a_bar)?,
        Tensor::from_vec(&[l, ch, n], b_bar)?,
    ))
}

struct ScanDims {
    l: usize,
    ch: usize,
    n: usize,
}

fn scan_dims<T: Float>(
    x: &Tensor<T>,
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<ScanDims> {
    let [l, ch] = x.dims2()?;
    let [l1, ch1, n] = a_bar.dims3()?;
    if b_bar.shape() != a_bar.shape() || (l1, ch1) != (l, ch) || c.shape() != [l, n] || d.shape() != [ch] {
        return Err(Error::shape(format!(
            "selective scan: x {:?}, A_bar {:?}, b_bar {:?}, C {:?}, D {:?} are inconsistent",
            x.shape(),
            a_bar.shape(),
            b_bar.shape(),
            c.shape(),
            d.shape()
        )));
    }
    Ok(ScanDims { l, ch, n })
}

/// Reference recurrence, one step at a time.
pub fn selective_scan_seq<T: Float>(
    x: &Tensor<T>,
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let ScanDims { l, ch, n } = scan_dims(x, a_bar, b_bar, c, d)?;
    let mut h = vec![T::zero(); ch * n];
    let mut y = vec![T::zero(); l * ch];
    for t in 0..l {
        let ct = &c.data()[t * n..(t + 1) * n];
        for k in 0..ch {
            let xv = x.data()[t * ch + k];
            let base = (t * ch + k) * n;
            let hs = &mut h[k * n..(k + 1) * n];
            let mut acc = T::zero();
            for s in 0..n {
                hs[s] = a_bar.data()[base + s] * hs[s] + b_bar.data()[base + s] * xv;
                acc += ct[s] * hs[s];
            }
            y[t * ch + k] = acc + d.data()[k] * xv;
        }
    }
    Tensor::from_vec(&[l, ch], y)
}

/// The same recurrence evaluated in chunks of `block_len` steps.
///
/// Each chunk is first reduced to an affine map `h -> P h + q` using the
/// composition `(A2, b2) o (A1, b1) = (A2 A1, A2 b1 + b2)` from a zero state;
/// the maps are chained across chunks to obtain every chunk's entry state,
/// and each chunk is then replayed from its entry state. Chunk reductions are
/// independent of each other.
pub fn selective_scan_blocked<T: Float>(
    x: &Tensor<T>,
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
    block_len: usize,
) -> Result<Tensor<T>> {
    let ScanDims { l, ch, n } = scan_dims(x, a_bar, b_bar, c, d)?;
    if block_len == 0 {
        return Err(Error::Domain("block length must be >= 1".into()));
    }
    let width = ch * n;
    let chunks: Vec<(usize, usize)> = (0..l)
        .step_by(block_len)
        .map(|s| (s, (s + block_len).min(l)))
        .collect();

    // Phase 1: per-chunk affine summary (P = prod A_bar, q = state from zero).
    let summaries: Vec<(Vec<T>, Vec<T>)> = chunks
        .iter()
        .map(|&(start, end)| {
            let mut p = vec![T::one(); width];
            let mut q = vec![T::zero(); width];
            for t in start..end {
                for k in 0..ch {
                    let xv = x.data()[t * ch + k];
                    for s in 0..n {
                        let j = k * n + s;
                        let a = a_bar.data()[t * width + j];
                        p[j] = a * p[j];
                        q[j] = a * q[j] + b_bar.data()[t * width + j] * xv;
                    }
                }
            }
            (p, q)
        })
        .collect();

    // Phase 2: exclusive prefix of chunk entry states.
    let mut entry = Vec::with_capacity(chunks.len());
    let mut h = vec![T::zero(); width];
    for (p, q) in &summaries {
        entry.push(h.clone());
        for j in 0..width {
            h[j] = p[j] * h[j] + q[j];
        }
    }

    // Phase 3: replay each chunk from its entry state.
    let mut y = vec![T::zero(); l * ch];
    for (&(start, end), h0) in chunks.iter().zip(entry) {
        let mut h = h0;
        for t in start..end {
            let ct = &c.data()[t * n..(t + 1) * n];
            for k in 0..ch {
                let xv = x.data()[t * ch + k];
                let mut acc = T::zero();
                for s in 0..n {
                    let j = k * n + s;
                    h[j] = a_bar.data()[t * width + j] * h[j] + b_bar.data()[t * width + j] * xv;
                    acc += ct[s] * h[j];
                }
                y[t * ch + k] = acc + d.data()[k] * xv;
            }
        }
    }
    Tensor::from_vec(&[l, ch], y)
}

// ---------------------------------------------------------------------------
// fused, differentiable scan

/// Batched selective scan with ZOH discretization fused in, recorded as a
/// single tape node.
///
/// `x, delta: [B, L, C]`, `a: [C, N]` (negative diagonal), `bm, cm: [B, L, N]`,
/// `d: [C]`; returns `y: [B, L, C]`.
pub fn ssm_scan<T: Float>(
    tape: &Tape<T>,
    x: &Var<T>,
    delta: &Var<T>,
    a: &Var<T>,
    bm: &Var<T>,
    cm: &Var<T>,
    d: &Var<T>,
) -> Result<Var<T>> {
    let [batch, l, ch] = x.value().dims3()?;
    let [ch2, n] = a.value().dims2()?;
    if delta.shape() != x.shape()
        || ch2 != ch
        || bm.shape() != [batch, l, n]
        || cm.shape() != [batch, l, n]
        || d.shape() != [ch]
    {
        return Err(Error::shape(format!(
            "ssm_scan: x {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?} are inconsistent",
            x.shape(),
            delta.shape(),
            a.shape(),
            bm.shape(),
            cm.shape(),
            d.shape()
        )));
    }
    let need_grad = [x, delta, a, bm, cm, d].iter().any(|v| v.requires_grad());
    let (xv, dv, av, bv, cv, dd) = (
        x.value_rc(),
        delta.value_rc(),
        a.value_rc(),
        bm.value_rc(),
        cm.value_rc(),
        d.value_rc(),
    );
    let width = ch * n;
    // hidden states h_1..h_L per batch element, kept only for the adjoint
    let mut states = if need_grad {
        vec![T::zero(); batch * l * width]
    } else {
        Vec::new()
    };
    let mut y = vec![T::zero(); batch * l * ch];
    let mut h = vec![T::zero(); width];
    for b in 0..batch {
        h.fill(T::zero());
        for t in 0..l {
            let row = (b * l + t) * ch;
            let bt = &bv.data()[(b * l + t) * n..][..n];
            let ct = &cv.data()[(b * l + t) * n..][..n];
            for k in 0..ch {
                let xk = xv.data()[row + k];
                let dt = dv.data()[row + k];
                let ak = &av.data()[k * n..(k + 1) * n];
                let hk = &mut h[k * n..(k + 1) * n];
                let mut acc = T::zero();
                for s in 0..n {
                    let u = dt * ak[s];
                    hk[s] = u.exp() * hk[s] + dt * zoh_gain(u) * bt[s] * xk;
                    acc += ct[s] * hk[s];
                }
                y[row + k] = acc + dd.data()[k] * xk;
            }
            if need_grad {
                states[(b * l + t) * width..][..width].copy_from_slice(&h);
            }
        }
    }
    let out = Tensor::from_vec(&[batch, l, ch], y)?;
    Ok(tape.custom(out, &[x, delta, a, bm, cm, d], move |gy| {
        let gy = gy.data();
        let mut gx = vec![T::zero(); batch * l * ch];
        let mut gdelta = vec![T::zero(); batch * l * ch];
        let mut ga = vec![T::zero(); width];
        let mut gb = vec![T::zero(); batch * l * n];
        let mut gc = vec![T::zero(); batch * l * n];
        let mut gd = vec![T::zero(); ch];
        let mut gh = vec![T::zero(); width];
        let zeros = vec![T::zero(); width];
        for b in 0..batch {
            gh.fill(T::zero());
            for t in (0..l).rev() {
                let row = (b * l + t) * ch;
                let nrow = (b * l + t) * n;
                let h_t = &states[(b * l + t) * width..][..width];
                let h_prev = if t == 0 {
                    &zeros[..]
                } else {
                    &states[(b * l + t - 1) * width..][..width]
                };
                for k in 0..ch {
                    let g_y = gy[row + k];
                    let xk = xv.data()[row + k];
                    let dt = dv.data()[row + k];
                    gd[k] += g_y * xk;
                    let mut g_x = dd.data()[k] * g_y;
                    let mut g_dt = T::zero();
                    for s in 0..n {
                        let j = k * n + s;
                        let bs = bv.data()[nrow + s];
                        let cs = cv.data()[nrow + s];
                        let a_ks = av.data()[j];
                        gc[nrow + s] += g_y * h_t[j];
                        let g = gh[j] + cs * g_y;
                        let u = dt * a_ks;
                        let abar = u.exp();
                        let phi = zoh_gain(u);
                        let g_abar = g * h_prev[j];
                        let g_bbar = g * xk;
                        g_x += g * dt * phi * bs;
                        let g_u = g_abar * abar + g_bbar * dt * zoh_gain_derivative(u) * bs;
                        g_dt += g_u * a_ks + g_bbar * phi * bs;
                        ga[j] += g_u * dt;
                        gb[nrow + s] += g_bbar * dt * phi;
                        gh[j] = g * abar;
                    }
                    gx[row + k] += g_x;
                    gdelta[row + k] += g_dt;
                }
            }
        }
        vec![
            Some(Tensor::from_vec(&[batch, l, ch], gx).unwrap()),
            Some(Tensor::from_vec(&[batch, l, ch], gdelta).unwrap()),
            Some(Tensor::from_vec(&[ch, n], ga).unwrap()),
            Some(Tensor::from_vec(&[batch, l, n], gb).unwrap()),
            Some(Tensor::from_vec(&[batch, l, n], gc).unwrap()),
            Some(Tensor::from_vec(&[ch], gd).unwrap()),
        ]
    }))
}

// ---------------------------------------------------------------------------
// S6 parameters

/// Form of the input-to-step-size projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaProjection {
    /// Dense `C x C` map.
    Full,
    /// `C -> ceil(C/16) -> C` factorization.
    #[default]
    LowRank,
}

impl DeltaProjection {
    pub fn rank(self, channels: usize) -> usize {
        match self {
            DeltaProjection::Full => channels,
            DeltaProjection::LowRank => channels.div_ceil(16),
        }
    }
}

/// Shape of one S6 parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct S6Shape {
    pub channels: usize,
    pub state: usize,
    pub delta: DeltaProjection,
}

impl S6Shape {
    /// Parameter layout under `prefix`:
    /// `a_log [C,N]`, `proj_b [C,N]`, `proj_c [C,N]`, the step-size projection
    /// (`dt_proj [C,C]` or `dt_down [C,R]` + `dt_up [R,C]`), `dt_bias [C]`,
    /// `d [C]`.
    pub fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let (c, n) = (self.channels, self.state);
        let mut specs = vec![
            ParamSpec::new(format!("{prefix}.a_log"), &[c, n], Init::StateLog),
            ParamSpec::new(format!("{prefix}.proj_b"), &[c, n], Init::FanIn(c)),
            ParamSpec::new(format!("{prefix}.proj_c"), &[c, n], Init::FanIn(c)),
        ];
        match self.delta {
            DeltaProjection::Full => {
                specs.push(ParamSpec::new(format!("{prefix}.dt_proj"), &[c, c], Init::FanIn(c)));
            }
            DeltaProjection::LowRank => {
                let r = self.delta.rank(c);
                specs.push(ParamSpec::new(format!("{prefix}.dt_down"), &[c, r], Init::FanIn(c)));
                specs.push(ParamSpec::new(format!("{prefix}.dt_up"), &[r, c], Init::FanIn(r)));
            }
        }
        specs.push(ParamSpec::new(
            format!("{prefix}.dt_bias"),
            &[c],
            Init::SoftplusInverse { lo: 1e-3, hi: 0.1 },
        ));
        specs.push(ParamSpec::new(format!("{prefix}.d"), &[c], Init::Ones));
        specs
    }
}

/// S6 on a batch of sequences `x: [B, L, C]`:
///
/// ```text
/// delta = softplus(dt_proj(x) + dt_bias)
/// B_t = x_t proj_b,  C_t = x_t proj_c,  A = -exp(a_log)
/// y = scan(x, delta, A, B, C) + D * x
/// ```
pub fn s6_forward_tape<T: Float>(
    tape: &Tape<T>,
    params: &Params<T>,
    prefix: &str,
    x: &Var<T>,
) -> Result<Var<T>> {
    let p = |name: &str| params.get(&format!("{prefix}.{name}"));
    let dt_raw = match params.get(&format!("{prefix}.dt_proj")) {
        Ok(w) => tape.linear(x, w, Some(p("dt_bias")?))?,
        Err(_) => {
            let low = tape.linear(x, p("dt_down")?, None)?;
            tape.linear(&low, p("dt_up")?, Some(p("dt_bias")?))?
        }
    };
    let delta = tape.activation(&dt_raw, Activation::Softplus);
    let bm = tape.linear(x, p("proj_b")?, None)?;
    let cm = tape.linear(x, p("proj_c")?, None)?;
    let a = tape.neg_exp(p("a_log")?);
    ssm_scan(tape, x, &delta, &a, &bm, &cm, p("d")?)
}

/// Plain-tensor S6 parameter set for one sequence model.
#[derive(Debug, Clone, PartialEq)]
pub struct S6Params<T: Float> {
    pub shape: S6Shape,
    pub names: Vec<String>,
    pub values: Vec<Tensor<T>>,
}

impl<T: Float> S6Params<T> {
    pub fn init(shape: S6Shape, seed: u64) -> Result<Self> {
        let specs = shape.specs("s6");
        let store = crate::params::ParamStore::<T>::init(&specs, seed)?;
        Ok(S6Params {
            shape,
            names: specs.iter().map(|s| s.name.clone()).collect(),
            values: specs.iter().map(|s| store.get(&s.name).unwrap().clone()).collect(),
        })
    }

    pub fn get_mut(&mut self, field: &str) -> Option<&mut Tensor<T>> {
        let key = format!("s6.{field}");
        let i = self.names.iter().position(|n| *n == key)?;
        Some(&mut self.values[i])
    }

    pub fn get(&self, field: &str) -> Option<&Tensor<T>> {
        let key = format!("s6.{field}");
        let i = self.names.iter().position(|n| *n == key)?;
        Some(&self.values[i])
    }
}

/// S6 on one sequence `x: [L, C]`.
pub fn s6_forward<T: Float>(x: &Tensor<T>, params: &S6Params<T>) -> Result<Tensor<T>> {
    let [l, ch] = x.dims2()?;
    let tape = Tape::new();
    let vars: Vec<Var<T>> = params.values.iter().map(|v| tape.constant(v.clone())).collect();
    let bound = Params::from_vars(&params.names, &vars);
    let xv = tape.constant(x.clone().reshape(&[1, l, ch])?);
    let y = s6_forward_tape(&tape, &bound, "s6", &xv)?;
    y.value().clone().reshape(&[l, ch])
}
