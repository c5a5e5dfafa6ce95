//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation on a [`Var`] appends one node holding its value, its parents and a
//! backward rule. Creation order is a topological order, so [`Tape::backward`] walks the
//! nodes once, in reverse, and fills the gradient slot of every `requires_grad` leaf.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::conv;
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{Binary, Reduce, Tensor, Unary};

type TResult<T> = Result<T, TensorError>;

/// Maps the gradient of a node's output to one gradient per parent, in parent order.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> TResult<Vec<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recording of one forward computation. Single-threaded; build one tape per thread.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Vec::new(), None, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an operation with a caller-supplied backward rule. Used for fused operators
    /// and for exercising the gradient checker.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t, T>], value: Tensor<T>, backward: BackwardFn<T>) -> TResult<Var<'t, T>> {
        for v in inputs {
            self.check_owner(v)?;
        }
        let value = value.ensure_finite("custom")?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        if requires_grad {
            Ok(self.push(value, inputs.iter().map(|v| v.id).collect(), Some(backward), true))
        } else {
            Ok(self.push(value, Vec::new(), None, false))
        }
    }

    fn check_owner(&self, v: &Var<'_, T>) -> TResult<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVariable)
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Populates `grad` of every `requires_grad` leaf reachable from the scalar `root` with
    /// d(root)/d(leaf). Gradients from multiple uses of a node add up. A tape can be
    /// differentiated once.
    pub fn backward(&self, root: Var<'_, T>) -> TResult<()> {
        self.check_owner(&root)?;
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let root_value = self.value(root.id);
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        self.consumed.set(true);

        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::full(root_value.shape(), T::one()));
        for i in (0..=root.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            match nodes[i].backward.take() {
                Some(rule) => {
                    let parent_grads = rule(&g)?;
                    let parents = std::mem::take(&mut nodes[i].parents);
                    debug_assert_eq!(parents.len(), parent_grads.len());
                    for (&p, pg) in parents.iter().zip(parent_grads) {
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        let pg = pg.ensure_finite("backward")?;
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg)?,
                            slot => *slot = Some(pg),
                        }
                    }
                }
                None => nodes[i].grad = Some(g),
            }
        }
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        Ok(())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient accumulated by the last `backward` (leaves only).
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn record(self, inputs: &[Var<'t, T>], value: Tensor<T>, op: &'static str, backward: BackwardFn<T>) -> TResult<Var<'t, T>> {
        let value = value.ensure_finite(op)?;
        self.tape.custom(inputs, value, backward)
    }

    // ---- elementwise -------------------------------------------------------------------

    pub fn unary(self, kind: Unary) -> TResult<Self> {
        let x = self.value();
        let y = Rc::new(x.unary(kind)?);
        let out = (*y).clone();
        let rule: BackwardFn<T> = Box::new(move |g| {
            let dx = match kind {
                Unary::Neg => g.map(|v| -v),
                Unary::Relu => g.zip_map(&x, "relu", |g, x| if x > T::zero() { g } else { T::zero() })?,
                Unary::Abs => g.zip_map(&x, "abs", |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })?,
                Unary::Exp => g.mul(&y)?,
                Unary::Log => g.div(&x)?,
                Unary::Tanh => g.zip_map(&y, "tanh", |g, y| g * (T::one() - y * y))?,
                Unary::Cos => g.zip_map(&x, "cos", |g, x| -g * x.sin())?,
                Unary::Acos => g.zip_map(&x, "acos", |g, x| -g / (T::one() - x * x).sqrt())?,
                Unary::Sqrt => g.zip_map(&y, "sqrt", |g, y| g / (y + y))?,
            };
            Ok(vec![dx])
        });
        self.record(&[self], out, kind.name(), rule)
    }

    pub fn binary(self, kind: Binary, other: Var<'t, T>) -> TResult<Self> {
        let a = self.value();
        let b = other.value();
        let out = a.binary(kind, &b)?;
        let rule: BackwardFn<T> = Box::new(move |g| {
            Ok(match kind {
                Binary::Add => vec![g.clone(), g.clone()],
                Binary::Sub => vec![g.clone(), g.map(|v| -v)],
                Binary::Mul => vec![g.mul(&b)?, g.mul(&a)?],
                Binary::Div => {
                    let da = g.div(&b)?;
                    let db = g.zip_map(&a, "div", |g, a| g * a)?.zip_map(&b, "div", |ga, b| -ga / (b * b))?;
                    vec![da, db]
                }
            })
        });
        self.record(&[self, other], out, kind.name(), rule)
    }

    pub fn binary_scalar(self, kind: Binary, s: T) -> TResult<Self> {
        let out = self.value().binary_scalar(kind, s)?;
        let rule: BackwardFn<T> = Box::new(move |g| {
            Ok(vec![match kind {
                Binary::Add | Binary::Sub => g.clone(),
                Binary::Mul => g.scale(s),
                Binary::Div => g.map(|v| v / s),
            }])
        });
        self.record(&[self], out, kind.name(), rule)
    }

    pub fn add(self, other: Var<'t, T>) -> TResult<Self> {
        self.binary(Binary::Add, other)
    }

    pub fn sub(self, other: Var<'t, T>) -> TResult<Self> {
        self.binary(Binary::Sub, other)
    }

    pub fn mul(self, other: Var<'t, T>) -> TResult<Self> {
        self.binary(Binary::Mul, other)
    }

    pub fn div(self, other: Var<'t, T>) -> TResult<Self> {
        self.binary(Binary::Div, other)
    }

    pub fn add_scalar(self, s: T) -> TResult<Self> {
        self.binary_scalar(Binary::Add, s)
    }

    pub fn mul_scalar(self, s: T) -> TResult<Self> {
        self.binary_scalar(Binary::Mul, s)
    }

    pub fn neg(self) -> TResult<Self> {
        self.unary(Unary::Neg)
    }

    pub fn relu(self) -> TResult<Self> {
        self.unary(Unary::Relu)
    }

    pub fn abs(self) -> TResult<Self> {
        self.unary(Unary::Abs)
    }

    pub fn exp(self) -> TResult<Self> {
        self.unary(Unary::Exp)
    }

    pub fn log(self) -> TResult<Self> {
        self.unary(Unary::Log)
    }

    pub fn tanh(self) -> TResult<Self> {
        self.unary(Unary::Tanh)
    }

    pub fn cos(self) -> TResult<Self> {
        self.unary(Unary::Cos)
    }

    pub fn acos(self) -> TResult<Self> {
        self.unary(Unary::Acos)
    }

    pub fn sqrt(self) -> TResult<Self> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(self) -> TResult<Self> {
        self.mul(self)
    }

    /// Clamps into `[lo, hi]`; the gradient passes through only inside the interval.
    pub fn clamp(self, lo: T, hi: T) -> TResult<Self> {
        let x = self.value();
        let out = x.map(|v| v.max(lo).min(hi));
        let rule: BackwardFn<T> = Box::new(move |g| {
            Ok(vec![g.zip_map(&x, "clamp", |g, x| if x >= lo && x <= hi { g } else { T::zero() })?])
        });
        self.record(&[self], out, "clamp", rule)
    }

    // ---- reductions and shape ----------------------------------------------------------

    pub fn reduce(self, kind: Reduce, axes: Option<&[usize]>) -> TResult<Self> {
        let x = self.value();
        let reduced = x.reduce(kind, axes)?;
        let axes_owned = axes.map(<[usize]>::to_vec);
        let count = x.numel() / reduced.values.numel();
        let argmax = reduced.argmax;
        let rule: BackwardFn<T> = Box::new(move |g| {
            let dx = match kind {
                Reduce::Sum => x.broadcast_back(g.data(), axes_owned.as_deref()),
                Reduce::Mean => {
                    let n = T::of(count as f64);
                    x.broadcast_back(g.data(), axes_owned.as_deref()).map(|v| v / n)
                }
                Reduce::Max => {
                    let mut dx = Tensor::zeros(x.shape());
                    let idx = argmax.as_ref().expect("max records argmax");
                    for (&i, &gv) in idx.iter().zip(g.data()) {
                        dx.data_mut()[i] = gv;
                    }
                    dx
                }
            };
            Ok(vec![dx])
        });
        self.record(&[self], reduced.values, "reduce", rule)
    }

    pub fn sum(self) -> TResult<Self> {
        self.reduce(Reduce::Sum, None)
    }

    pub fn mean(self) -> TResult<Self> {
        self.reduce(Reduce::Mean, None)
    }

    pub fn reshape(self, shape: &[usize]) -> TResult<Self> {
        let old = self.shape();
        let out = self.value().reshape(shape)?;
        let rule: BackwardFn<T> = Box::new(move |g| Ok(vec![g.reshape(&old)?]));
        self.record(&[self], out, "reshape", rule)
    }

    pub fn matmul(self, other: Var<'t, T>) -> TResult<Self> {
        let a = self.value();
        let b = other.value();
        let out = a.matmul(&b)?;
        let rule: BackwardFn<T> = Box::new(move |g| {
            let da = g.matmul(&b.transpose2d()?)?;
            let db = a.transpose2d()?.matmul(g)?;
            Ok(vec![da, db])
        });
        self.record(&[self, other], out, "matmul", rule)
    }

    pub fn transpose(self) -> TResult<Self> {
        let out = self.value().transpose2d()?;
        let rule: BackwardFn<T> = Box::new(|g| Ok(vec![g.transpose2d()?]));
        self.record(&[self], out, "transpose", rule)
    }

    // ---- fused operators ---------------------------------------------------------------

    /// Divides every row of a 2-d tensor by its L2 norm. Zero rows are an error.
    pub fn l2_normalize_rows(self) -> TResult<Self> {
        let x = self.value();
        let (y, norms) = normalize_rows(&x)?;
        let y = Rc::new(y);
        let out = (*y).clone();
        let rule: BackwardFn<T> = Box::new(move |g| {
            let cols = y.shape()[1];
            let mut dx = Tensor::zeros(y.shape());
            for (r, &n) in norms.iter().enumerate() {
                let yr = &y.data()[r * cols..(r + 1) * cols];
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                for (c, d) in dx.data_mut()[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                    *d = (gr[c] - yr[c] * dot) / n;
                }
            }
            Ok(vec![dx])
        });
        self.record(&[self], out, "l2_normalize_rows", rule)
    }

    /// Mean softmax cross-entropy of `(batch, classes)` logits against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> TResult<Self> {
        let z = self.value();
        let (batch, classes) = match *z.shape() {
            [b, c] => (b, c),
            _ => {
                return Err(TensorError::Geometry {
                    op: "cross_entropy",
                    detail: format!("expected (batch, classes) logits, got {:?}", z.shape()),
                })
            }
        };
        if labels.len() != batch {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![batch],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Domain {
                op: "cross_entropy",
                detail: format!("label {bad} with {classes} classes"),
            });
        }
        let mut probs = vec![T::zero(); batch * classes];
        let mut loss = T::zero();
        for b in 0..batch {
            let row = &z.data()[b * classes..(b + 1) * classes];
            let (arg, m) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, row[0]), |best, (i, v)| if v > best.1 { (i, v) } else { best });
            // log-sum-exp as m + ln(1 + rest), keeping precision when one logit dominates
            let rest = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .fold(T::zero(), |acc, (_, &v)| acc + (v - m).exp());
            let denom = T::one() + rest;
            for (c, p) in probs[b * classes..(b + 1) * classes].iter_mut().enumerate() {
                *p = (row[c] - m).exp() / denom;
            }
            loss = loss + (rest.ln_1p() + (m - row[labels[b]]));
        }
        let bt = T::of(batch as f64);
        let labels = labels.to_vec();
        let rule: BackwardFn<T> = Box::new(move |g| {
            let scale = g.item() / bt;
            let mut dz = probs.clone();
            for (b, &l) in labels.iter().enumerate() {
                dz[b * classes + l] = dz[b * classes + l] - T::one();
            }
            dz.iter_mut().for_each(|v| *v = *v * scale);
            Ok(vec![Tensor::new(vec![batch, classes], dz)?])
        });
        self.record(&[self], Tensor::scalar(loss / bt), "cross_entropy", rule)
    }

    pub fn conv2d(self, weight: Var<'t, T>, bias: Var<'t, T>, stride: usize, padding: usize) -> TResult<Self> {
        let (x, w) = (self.value(), weight.value());
        let out = conv::conv2d(&x, &w, &bias.value(), stride, padding)?;
        let rule: BackwardFn<T> = Box::new(move |g| {
            let grads = conv::conv2d_backward(&x, &w, g, stride, padding)?;
            Ok(vec![grads.input, grads.weight, grads.bias])
        });
        self.record(&[self, weight, bias], out, "conv2d", rule)
    }

    pub fn conv_transpose2d(self, weight: Var<'t, T>, bias: Var<'t, T>, stride: usize, padding: usize) -> TResult<Self> {
        let (x, w) = (self.value(), weight.value());
        let out = conv::conv_transpose2d(&x, &w, &bias.value(), stride, padding)?;
        let rule: BackwardFn<T> = Box::new(move |g| {
            let grads = conv::conv_transpose2d_backward(&x, &w, g, stride, padding)?;
            Ok(vec![grads.input, grads.weight, grads.bias])
        });
        self.record(&[self, weight, bias], out, "conv_transpose2d", rule)
    }

    /// `(batch, c, h, w) → (batch, c)` spatial maximum; the gradient goes to the
    /// lowest-index maximal position of each channel.
    pub fn global_max_pool(self) -> TResult<Self> {
        if self.shape().len() != 4 {
            return Err(TensorError::Geometry {
                op: "global_max_pool",
                detail: format!("expected a 4-d tensor, got {:?}", self.shape()),
            });
        }
        self.reduce(Reduce::Max, Some(&[2, 3]))
    }
}

/// Row-wise L2 normalization of a 2-d tensor, returning the normalized rows and the norms.
pub(crate) fn normalize_rows<T: Scalar>(x: &Tensor<T>) -> TResult<(Tensor<T>, Vec<T>)> {
    let (rows, cols) = match *x.shape() {
        [r, c] => (r, c),
        _ => {
            return Err(TensorError::Geometry {
                op: "l2_normalize_rows",
                detail: format!("expected a 2-d tensor, got {:?}", x.shape()),
            })
        }
    };
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let n = row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
        if n.is_zero() {
            return Err(TensorError::DivisionByZero { op: "l2_normalize_rows" });
        }
        row.iter_mut().for_each(|v| *v = *v / n);
        norms.push(n);
    }
    Ok((out, norms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec64(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(vec64(&[1.0, 2.0]), true);
        let root = x.mul(x).unwrap().sum().unwrap();
        tape.backward(root).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_sum_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(vec64(&[-1.0, 3.0]), true);
        let root = x.relu().unwrap().sum().unwrap();
        tape.backward(root).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.leaf(vec64(&[1.0, 2.0]), true);
        let y = x.mul_scalar(3.0).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarRoot { .. })));
        let s = y.sum().unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::TapeConsumed)));

        let other = Tape::new();
        let z = other.leaf(vec64(&[1.0, 2.0]), true);
        assert!(matches!(x.add(z), Err(TensorError::ForeignVariable)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(vec64(&[1.0, 2.0]), true);
        let c = tape.constant(vec64(&[5.0, 7.0]));
        let root = x.mul(c).unwrap().sum().unwrap();
        tape.backward(root).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[5.0, 7.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let tape = Tape::new();
        let x = tape.leaf(vec64(&[800.0]), true);
        assert!(matches!(x.exp(), Err(TensorError::NonFinite { .. })));
        assert!(matches!(x.binary_scalar(Binary::Div, 0.0), Err(TensorError::DivisionByZero { .. })));
    }

    #[test]
    fn global_max_pool_routes_to_argmax() {
        let tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![1, 2, 2, 2], vec![1.0, 5.0, 3.0, 2.0, 4.0, 4.0, 4.0, 4.0]).unwrap(),
            true,
        );
        let pooled = x.global_max_pool().unwrap();
        assert_eq!(pooled.value().data(), &[5.0, 4.0]);
        tape.backward(pooled.sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0., 1., 0., 0., 1., 0., 0., 0.]);
    }

    #[test]
    fn cross_entropy_single_class_is_zero() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![3, 1], vec![0.3, -2.0, 9.0]).unwrap(), true);
        let loss = z.cross_entropy(&[0, 0, 0]).unwrap();
        assert_eq!(loss.value().item(), 0.0);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(vec64(&[3.0]), true);
        let y = x.mul_scalar(2.0).unwrap();
        let root = y.add(y).unwrap().add(x).unwrap().sum().unwrap();
        tape.backward(root).unwrap();
        assert_eq!(x.grad().unwrap().item(), 5.0);
    }
}
