//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Upper bound on probed coordinates; all coordinates are probed when
    /// the inputs hold fewer.
    pub max_coords: usize,
    pub seed: u64,
    /// Indices of inputs to differentiate; `None` means all.
    pub wrt: Option<Vec<usize>>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            max_coords: 200,
            seed: 0,
            wrt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(input, index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of the scalar function `f` at `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let cfg = GradCheckConfig {
        h,
        ..GradCheckConfig::default()
    };
    grad_check_with(f, inputs, &cfg).map(|r| r.max_rel_error)
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    if !(cfg.h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {}", cfg.h)));
    }
    let wrt: Vec<usize> = cfg.wrt.clone().unwrap_or_else(|| (0..inputs.len()).collect());

    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), wrt.contains(&i)))
        .collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(&root)?;
    let analytic: Vec<Option<Tensor<f64>>> = vars.iter().map(|v| grads.get(v)).collect();
    drop(grads);
    drop(tape);

    let coords: Vec<(usize, usize)> = wrt
        .iter()
        .flat_map(|&i| (0..inputs[i].numel()).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= cfg.max_coords {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, coords.len(), cfg.max_coords).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|k| coords[k]).collect()
    };

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (i, j) in chosen {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + cfg.h;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - cfg.h;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[j]);
        let err = relative_error(a, numeric);
        report.coords_checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((i, j, a, numeric));
        }
    }
    Ok(report)
}

/// Deterministic probe weights for turning a tensor output into a scalar.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(
        shape,
        crate::tensor::Fill::Uniform {
            lo: -1.0,
            hi: 1.0,
            seed,
        },
    )
    .expect("valid probe shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(&v[0], &v[0])?;
                Ok(t.sum(&sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let val = v[0].value().map(|a| a * a);
                let xv = v[0].value().clone();
                // wrong: d(x^2)/dx reported as x instead of 2x
                let y = t.custom(val, &[&v[0]], move |g| vec![Some(g.zip_map(&xv, |gv, a| gv * a))]);
                Ok(t.sum(&y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
