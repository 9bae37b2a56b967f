//! Reverse-mode autodiff on a linear tape.
//!
//! Operations append nodes to a [`Tape`]; each node stores its value and a
//! backward closure that routes the node's gradient to its parents. Because
//! parents are always created before children, creation order is a valid
//! topological order and [`Tape::backward`] is a single reverse sweep with no
//! graph analysis. Tapes are per-step scratch structures: build, differentiate,
//! drop.
//!
//! Values are reference-counted dynamic-dim arrays in the working scalar, so
//! backward closures can capture the inputs they need without copying.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use hdrvid_core::Real;

/// Handle to a tape node. Only meaningful with the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Receives parent gradients during the backward sweep.
pub struct GradSink<'a, T: Real> {
    grads: &'a mut [Option<ArrayD<T>>],
}

impl<T: Real> GradSink<'_, T> {
    /// Adds `delta` into the gradient accumulator of `parent`.
    pub fn accumulate(&mut self, parent: Var, delta: ArrayD<T>) {
        match &mut self.grads[parent.0] {
            Some(acc) => *acc += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &mut GradSink<'_, T>)>;

struct Node<T: Real> {
    value: Rc<ArrayD<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Append-only computation record.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf: a value with no upstream dependencies (inputs,
    /// parameters, constants). Gradients still accumulate for leaves so
    /// optimizers can read them.
    pub fn leaf(&self, value: ArrayD<T>) -> Var {
        self.push_node(Rc::new(value), None)
    }

    /// Records an operation result together with its backward closure.
    /// The closure receives this node's gradient and must `accumulate`
    /// into each parent it wants to propagate to.
    pub fn push(
        &self,
        value: ArrayD<T>,
        backward: impl Fn(&ArrayD<T>, &mut GradSink<'_, T>) + 'static,
    ) -> Var {
        self.push_node(Rc::new(value), Some(Box::new(backward)))
    }

    /// Like [`Tape::push`] for a value the op also wants to keep a handle to
    /// (e.g. activations whose derivative is cheapest in terms of the output).
    pub fn push_shared(
        &self,
        value: Rc<ArrayD<T>>,
        backward: impl Fn(&ArrayD<T>, &mut GradSink<'_, T>) + 'static,
    ) -> Var {
        self.push_node(value, Some(Box::new(backward)))
    }

    fn push_node(&self, value: Rc<ArrayD<T>>, backward: Option<BackwardFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, backward });
        Var(nodes.len() - 1)
    }

    /// Shared handle to a node's value.
    pub fn value(&self, var: Var) -> Rc<ArrayD<T>> {
        Rc::clone(&self.nodes.borrow()[var.0].value)
    }

    /// Scalar payload of a 1-element node.
    pub fn scalar(&self, var: Var) -> T {
        let value = self.value(var);
        debug_assert_eq!(value.len(), 1, "scalar() on a non-scalar node");
        *value.iter().next().expect("non-empty node value")
    }

    /// Reverse sweep from `root` (which must hold exactly one element).
    /// Returns gradients for every node created up to `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward starts from a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(ArrayD::from_elem(
            IxDyn(nodes[root.0].value.shape()),
            T::one(),
        ));
        for i in (0..=root.0).rev() {
            // Parents always precede children, so grads[i] is final here.
            let Some(grad) = grads[i].take() else { continue };
            if let Some(backward) = &nodes[i].backward {
                let mut sink = GradSink { grads: &mut grads };
                backward(&grad, &mut sink);
            }
            grads[i] = Some(grad);
        }
        Gradients { grads }
    }
}

/// Result of a backward sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if any path reached it.
    pub fn wrt(&self, var: Var) -> Option<&ArrayD<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient as an owned array, zero-filled if the node was unreachable.
    pub fn wrt_or_zeros(&self, var: Var, shape: &[usize]) -> ArrayD<T> {
        match self.wrt(var) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn scalar_leaf(tape: &Tape<f64>, v: f64) -> Var {
        tape.leaf(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    /// y = a * b recorded by hand, checking the plumbing without the ops
    /// layer.
    fn mul(tape: &Tape<f64>, a: Var, b: Var) -> Var {
        let av = tape.value(a);
        let bv = tape.value(b);
        let out = (&*av) * (&*bv);
        tape.push(out, move |grad, sink| {
            sink.accumulate(a, grad * &*bv);
            sink.accumulate(b, grad * &*av);
        })
    }

    #[test]
    fn product_gradients() {
        let tape = Tape::<f64>::new();
        let a = scalar_leaf(&tape, 3.0);
        let b = scalar_leaf(&tape, -4.0);
        let y = mul(&tape, a, b);
        assert_eq!(tape.scalar(y), -12.0);
        let grads = tape.backward(y);
        assert_eq!(grads.wrt(a).unwrap()[[0]], -4.0);
        assert_eq!(grads.wrt(b).unwrap()[[0]], 3.0);
    }

    #[test]
    fn reused_node_accumulates() {
        // y = a * a: gradient must be 2a, i.e. both paths accumulate.
        let tape = Tape::<f64>::new();
        let a = scalar_leaf(&tape, 5.0);
        let y = mul(&tape, a, a);
        let grads = tape.backward(y);
        assert_eq!(grads.wrt(a).unwrap()[[0]], 10.0);
    }

    #[test]
    fn unreachable_nodes_have_no_gradient() {
        let tape = Tape::<f64>::new();
        let a = scalar_leaf(&tape, 1.0);
        let unused = tape.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let y = mul(&tape, a, a);
        let grads = tape.backward(y);
        assert!(grads.wrt(unused).is_none());
        assert_eq!(
            grads.wrt_or_zeros(unused, &[2]),
            ArrayD::<f64>::zeros(IxDyn(&[2]))
        );
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::<f64>::new();
        let v = tape.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let _ = tape.backward(v);
    }
}
