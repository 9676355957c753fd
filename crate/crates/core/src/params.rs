//! Named parameters, their initialization, and the SGD update.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(1 / fan_in)`.
    FanIn(usize),
    /// Rows of `ln(1..=N)`, giving a diagonal state matrix `-(1..=N)`.
    StateLog,
    /// Bias whose softplus is uniform in `[lo, hi]`.
    SoftplusInverse { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// `x` such that `softplus(x) == y` for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn init_values(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.numel();
    match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::FanIn(fan_in) => {
            let bound = (1.0 / fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
        Init::StateLog => {
            let states = *spec.shape.last().unwrap();
            (0..n).map(|i| ((i % states) as f64 + 1.0).ln()).collect()
        }
        Init::SoftplusInverse { lo, hi } => (0..n)
            .map(|_| inverse_softplus(rng.random_range(lo..=hi)))
            .collect(),
    }
}

/// Parameters keyed by dotted path, with SGD momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Float = f32> {
    params: BTreeMap<String, Tensor<T>>,
    momentum: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            momentum: BTreeMap::new(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    /// Initialize every spec in order from one seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for spec in specs {
            let values = init_values(spec, &mut rng);
            let t = Tensor::from_vec(&spec.shape, values.into_iter().map(T::from_f64).collect())?;
            store.insert(&spec.name, t)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        self.momentum.insert(name.to_string(), Tensor::zeros(value.shape()));
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn momentum(&self, name: &str) -> Option<&Tensor<T>> {
        self.momentum.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            momentum: self.momentum.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Register every parameter on `tape` as a named trainable leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Params<T> {
        Params {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(k, v.clone())))
                .collect(),
        }
    }

    /// Register every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &Tape<T>) -> Params<T> {
        Params {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }
}

/// Parameters bound to one tape.
pub struct Params<T: Float> {
    vars: HashMap<String, Var<T>>,
}

impl<T: Float> Params<T> {
    pub fn from_vars(names: &[String], vars: &[Var<T>]) -> Self {
        Params {
            vars: names.iter().cloned().zip(vars.iter().cloned()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Usage(format!("no parameter named {name:?}")))
    }
}

/// Momentum SGD with coupled weight decay:
/// `v <- momentum*v + g + wd*p`, `p <- p - lr*v`.
pub fn sgd_update<T: Float>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for name in store.params.keys() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Usage(format!("missing gradient for parameter {name:?}")))?;
        if g.shape() != store.params[name].shape() {
            return Err(Error::shape(format!(
                "gradient for {name:?} has shape {:?}, parameter has {:?}",
                g.shape(),
                store.params[name].shape()
            )));
        }
    }
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for (name, p) in store.params.iter_mut() {
        let g = &grads[name];
        let v = store.momentum.get_mut(name).expect("momentum slot");
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
