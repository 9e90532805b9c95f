//! Reverse-mode automatic differentiation over dynamic-dimensional `f64`
//! arrays.
//!
//! Every operation builds a node in an implicit tape: the node owns the
//! forward value, strong references to its parents, and a one-shot closure
//! that maps the incoming gradient to per-parent gradient contributions.
//! `Tensor::backward` walks the tape in reverse topological order.
//!
//! The tape is single-threaded by construction (`Rc`); training is
//! single-writer and inference with shared parameters is done per thread.

mod conv;
mod ops;

pub use conv::*;
pub use ops::*;

use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

/// Dynamic-dimensional double-precision array, the element type of the tape.
pub type Arr = ArrayD<f64>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True when newly created ops record backward information.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` without recording backward closures. Intermediate values are
/// dropped as soon as they go out of scope, which keeps inference cheap.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

type BackFn = Box<dyn FnOnce(&Arr) -> Vec<Option<Arr>>>;

pub(crate) struct Node {
    value: RefCell<Arr>,
    grad: RefCell<Option<Arr>>,
    parents: Vec<Tensor>,
    backfn: RefCell<Option<BackFn>>,
    requires_grad: bool,
}

/// Handle to a tape node. Cloning is cheap (reference count bump).
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Trainable leaf: gradients are accumulated into it by `backward`.
    pub fn param(value: Arr) -> Tensor {
        Tensor(Rc::new(Node {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backfn: RefCell::new(None),
            requires_grad: true,
        }))
    }

    /// Non-trainable leaf (inputs, fixed masks). No gradient is kept.
    pub fn constant(value: Arr) -> Tensor {
        Tensor(Rc::new(Node {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            parents: Vec::new(),
            backfn: RefCell::new(None),
            requires_grad: false,
        }))
    }

    /// Builds an op node. `backfn` receives the output gradient and returns
    /// one optional contribution per parent, in order.
    pub(crate) fn from_op(
        parents: Vec<Tensor>,
        value: Arr,
        backfn: impl FnOnce(&Arr) -> Vec<Option<Arr>> + 'static,
    ) -> Tensor {
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if track {
            Tensor(Rc::new(Node {
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents,
                backfn: RefCell::new(Some(Box::new(backfn))),
                requires_grad: true,
            }))
        } else {
            // Dropping the parent handles lets upstream intermediates free
            // immediately during inference.
            Tensor(Rc::new(Node {
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backfn: RefCell::new(None),
                requires_grad: false,
            }))
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> std::cell::Ref<'_, Arr> {
        self.0.value.borrow()
    }

    /// Clone of the forward value.
    pub fn to_array(&self) -> Arr {
        self.0.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.0.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replaces the stored value. Shape must not change; optimizers and
    /// checkpoint loading update parameters in place through this.
    pub fn set_value(&self, value: Arr) {
        let mut v = self.0.value.borrow_mut();
        assert_eq!(v.shape(), value.shape(), "set_value must preserve shape");
        *v = value;
    }

    /// Applies `f` to the stored value in place.
    pub fn update_value(&self, f: impl FnOnce(&mut Arr)) {
        f(&mut self.0.value.borrow_mut());
    }

    /// Clone of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Arr> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: Arr) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(cur) => *cur += &g,
            None => *slot = Some(g),
        }
    }

    /// Backpropagates from this node with a seed gradient of ones.
    pub fn backward(&self) {
        let seed = Arr::ones(self.0.value.borrow().raw_dim());
        self.backward_with(seed);
    }

    /// Backpropagates with an explicit seed gradient.
    pub fn backward_with(&self, seed: Arr) {
        assert_eq!(
            seed.shape(),
            self.0.value.borrow().shape(),
            "seed gradient shape mismatch"
        );
        let topo = self.topo_order();
        self.accumulate_grad(seed);
        for t in topo.iter().rev() {
            let backfn = t.0.backfn.borrow_mut().take();
            let Some(backfn) = backfn else { continue };
            let Some(g) = t.0.grad.borrow_mut().take() else {
                continue;
            };
            let contribs = backfn(&g);
            debug_assert_eq!(contribs.len(), t.0.parents.len());
            for (p, c) in t.0.parents.iter().zip(contribs) {
                if p.0.requires_grad {
                    if let Some(c) = c {
                        debug_assert_eq!(c.shape(), p.0.value.borrow().shape());
                        p.accumulate_grad(c);
                    }
                }
            }
        }
    }

    /// Post-order over the grad-requiring subgraph: parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        enum Frame {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut topo = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    let ptr = Rc::as_ptr(&t.0);
                    if !t.0.requires_grad || visited.contains(&ptr) {
                        continue;
                    }
                    visited.insert(ptr);
                    stack.push(Frame::Exit(t.clone()));
                    for p in &t.0.parents {
                        stack.push(Frame::Enter(p.clone()));
                    }
                }
                Frame::Exit(t) => topo.push(t),
            }
        }
        topo
    }

    /// Extracts the single element of a zero-dim or one-element tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.0.value.borrow();
        assert_eq!(v.len(), 1, "scalar() on tensor with {} elements", v.len());
        *v.iter().next().unwrap()
    }
}

/// Shorthand for a zero-dim array holding one value.
pub fn scalar_arr(v: f64) -> Arr {
    Arr::from_elem(IxDyn(&[]), v)
}
