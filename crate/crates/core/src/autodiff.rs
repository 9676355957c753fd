//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] records every operation applied to [`Var`]s in execution
//! order, so node ids are already a topological order. [`Tape::backward`]
//! walks the nodes in reverse and applies each node's adjoint rule.
//!
//! Nodes whose operands do not require gradients are recorded without a
//! backward rule and retain no operand values, which makes inference on a
//! tape of constants cheap.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Adjoint rule: given the gradient of the node's output, return one
/// optional gradient per operand (in operand order).
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// A value recorded on a tape.
#[derive(Clone)]
pub struct Var<T: Float> {
    id: usize,
    tape_id: usize,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
}

impl<T: Float> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value)
    }
}

pub struct Tape<T: Float> {
    id: usize,
    nodes: RefCell<Vec<Node<T>>>,
    names: RefCell<BTreeMap<String, usize>>,
}

fn next_tape_id() -> usize {
    use std::sync::atomic::{AtomicUsize, Ordering};
    static NEXT: AtomicUsize = AtomicUsize::new(0);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: next_tape_id(),
            nodes: RefCell::new(Vec::new()),
            names: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, parents: Vec<usize>, backward: Option<BackwardFn<T>>) -> Var<T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let requires_grad = backward.is_some();
        nodes.push(Node { parents, backward });
        Var {
            id,
            tape_id: self.id,
            value: Rc::new(value),
            requires_grad,
        }
    }

    /// A leaf value. Leaves with `requires_grad` receive gradients in
    /// [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            id,
            tape_id: self.id,
            value: Rc::new(value),
            requires_grad,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    /// A named trainable leaf; its gradient is reported by [`Grads::named`].
    pub fn param(&self, name: &str, value: Tensor<T>) -> Var<T> {
        let v = self.leaf(value, true);
        self.names.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    /// Record an operation with a caller-supplied adjoint rule.
    ///
    /// The rule receives the output gradient and must return exactly one entry
    /// per operand, each either `None` or a tensor shaped like that operand.
    /// The rule is dropped without being stored when no operand requires a
    /// gradient.
    pub fn custom<F>(&self, value: Tensor<T>, operands: &[&Var<T>], backward: F) -> Var<T>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        for v in operands {
            assert_eq!(v.tape_id, self.id, "operand recorded on a different tape");
        }
        if operands.iter().any(|v| v.requires_grad) {
            let parents = operands.iter().map(|v| v.id).collect();
            self.push(value, parents, Some(Box::new(backward)))
        } else {
            self.push(value, Vec::new(), None)
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: &Var<T>) -> Result<Grads<T>> {
        if root.tape_id != self.id {
            return Err(Error::Usage("backward root was recorded on a different tape".into()));
        }
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar root, got shape {:?}",
                root.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::filled(root.shape(), T::one()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = rule(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                match grads[pid].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[pid] = Some(pg),
                }
            }
        }
        Ok(Grads {
            grads,
            names: self.names.borrow().clone(),
        })
    }
}

/// Gradients of the leaves after a reverse sweep.
pub struct Grads<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
    names: BTreeMap<String, usize>,
}

impl<T: Float> Grads<T> {
    /// Gradient of a leaf; a leaf the root does not depend on gets zeros.
    pub fn get(&self, v: &Var<T>) -> Option<Tensor<T>> {
        if !v.requires_grad {
            return None;
        }
        Some(
            self.grads
                .get(v.id)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(v.shape())),
        )
    }

    /// Gradients of all named parameters, keyed by name.
    pub fn named(&self, shapes: impl Fn(&str) -> Vec<usize>) -> BTreeMap<String, Tensor<T>> {
        self.names
            .iter()
            .map(|(name, &id)| {
                let g = self.grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&shapes(name)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn take_named(&mut self) -> BTreeMap<String, Option<Tensor<T>>> {
        let names = std::mem::take(&mut self.names);
        names
            .into_iter()
            .map(|(name, id)| (name, self.grads[id].take()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 4.0]).unwrap(), true);
        let s = tape.sum(&x);
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum(&sq);
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(&x), Err(Error::Usage(_))));
        let other = Tape::<f64>::new();
        let y = other.leaf(Tensor::zeros(&[1]), true);
        assert!(matches!(tape.backward(&y), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_record_no_rule() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::filled(&[2], 3.0));
        let b = tape.mul(&a, &a).unwrap();
        assert!(!b.requires_grad());
        let p = tape.param("p", Tensor::filled(&[2], 1.0));
        let c = tape.mul(&b, &p).unwrap();
        let s = tape.sum(&c);
        let mut g = tape.backward(&s).unwrap();
        assert!(g.get(&a).is_none());
        let named = g.take_named();
        assert_eq!(named["p"].as_ref().unwrap().data(), &[9.0, 9.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[1], 3.0), true);
        let y = tape.add(&x, &x).unwrap();
        let z = tape.mul(&y, &x).unwrap(); // 2x^2
        let g = tape.backward(&z).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[12.0]);
    }
}
