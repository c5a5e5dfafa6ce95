//! Dense row-major n-dimensional array.

use crate::error::TensorError;
use crate::gemm;
use crate::scalar::Scalar;

type TResult<T> = Result<T, TensorError>;

/// Unary elementwise operator kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Relu,
    Abs,
    Exp,
    Log,
    Tanh,
    Cos,
    Acos,
    Sqrt,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Relu => "relu",
            Unary::Abs => "abs",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Tanh => "tanh",
            Unary::Cos => "cos",
            Unary::Acos => "acos",
            Unary::Sqrt => "sqrt",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Unary::Abs => x.abs(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Cos => x.cos(),
            Unary::Acos => x.acos(),
            Unary::Sqrt => x.sqrt(),
        }
    }

    fn check_domain<T: Scalar>(self, x: T) -> TResult<()> {
        let ok = match self {
            Unary::Log => x > T::zero(),
            Unary::Acos => x >= -T::one() && x <= T::one(),
            Unary::Sqrt => x >= T::zero(),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(TensorError::Domain {
                op: self.name(),
                detail: format!("value {x}"),
            })
        }
    }
}

/// Binary elementwise operator kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    pub fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

/// Reduction kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Result of a reduction; `argmax` holds flat input indices for `Reduce::Max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduced<T> {
    pub values: Tensor<T>,
    pub argmax: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that every dimension is positive and the element count
    /// matches. An empty shape denotes a scalar.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> TResult<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> TResult<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> TResult<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> TResult<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> TResult<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> TResult<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Row-major flat index of a multi-index.
    pub fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.flat_index(index)]
    }

    // ---- elementwise -------------------------------------------------------------------

    pub fn unary(&self, kind: Unary) -> TResult<Self> {
        for &v in &self.data {
            kind.check_domain(v)?;
        }
        self.map(|v| kind.apply(v)).ensure_finite(kind.name())
    }

    pub fn binary(&self, kind: Binary, other: &Self) -> TResult<Self> {
        if kind == Binary::Div && other.data.iter().any(|v| v.is_zero()) {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        self.zip_map(other, kind.name(), |a, b| kind.apply(a, b))?
            .ensure_finite(kind.name())
    }

    /// Tensor-with-scalar broadcast, the only broadcasting the crate supports.
    pub fn binary_scalar(&self, kind: Binary, s: T) -> TResult<Self> {
        if kind == Binary::Div && s.is_zero() {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        self.map(|a| kind.apply(a, s)).ensure_finite(kind.name())
    }

    pub fn add(&self, other: &Self) -> TResult<Self> {
        self.binary(Binary::Add, other)
    }

    pub fn sub(&self, other: &Self) -> TResult<Self> {
        self.binary(Binary::Sub, other)
    }

    pub fn mul(&self, other: &Self) -> TResult<Self> {
        self.binary(Binary::Mul, other)
    }

    pub fn div(&self, other: &Self) -> TResult<Self> {
        self.binary(Binary::Div, other)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| Unary::Relu.apply(v))
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> TResult<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    // ---- reductions --------------------------------------------------------------------

    /// Sum of all elements in ascending row-major order.
    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::of(self.numel() as f64)
    }

    /// Maximum over all elements; ties resolve to the lowest row-major index.
    pub fn max_all(&self) -> (T, usize) {
        let mut best = (self.data[0], 0);
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > best.0 {
                best = (v, i);
            }
        }
        best
    }

    pub fn min_all(&self) -> T {
        self.data.iter().copied().fold(self.data[0], T::min)
    }

    /// Reduces over `axes` (all axes when `None`). Reduced axes are dropped from the output
    /// shape. Accumulation visits inputs in ascending row-major order; `Max` keeps the first
    /// maximal element it meets, i.e. the lowest row-major index.
    pub fn reduce(&self, kind: Reduce, axes: Option<&[usize]>) -> TResult<Reduced<T>> {
        let ndim = self.ndim();
        let mut reduced = vec![false; ndim];
        match axes {
            None => reduced.iter_mut().for_each(|r| *r = true),
            Some(list) => {
                for &ax in list {
                    if ax >= ndim {
                        return Err(TensorError::InvalidAxis { axis: ax, ndim });
                    }
                    reduced[ax] = true;
                }
            }
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let out_len: usize = out_shape.iter().product();
        let count: usize = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();

        let out_index = self.output_index_map(&reduced);
        let mut values = vec![T::zero(); out_len];
        let mut argmax = vec![usize::MAX; out_len];
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for (i, &v) in self.data.iter().enumerate() {
                    let o = out_index(i);
                    values[o] = values[o] + v;
                }
                if kind == Reduce::Mean {
                    let n = T::of(count as f64);
                    values.iter_mut().for_each(|v| *v = *v / n);
                }
            }
            Reduce::Max => {
                for (i, &v) in self.data.iter().enumerate() {
                    let o = out_index(i);
                    if argmax[o] == usize::MAX || v > values[o] {
                        values[o] = v;
                        argmax[o] = i;
                    }
                }
            }
        }
        Ok(Reduced {
            values: Tensor {
                shape: out_shape,
                data: values,
            },
            argmax: (kind == Reduce::Max).then_some(argmax),
        })
    }

    /// Maps a flat input index to the flat output index obtained by dropping reduced axes.
    fn output_index_map(&self, reduced: &[bool]) -> impl Fn(usize) -> usize {
        let shape = self.shape.clone();
        let reduced = reduced.to_vec();
        move |mut flat| {
            let mut out = 0;
            let mut out_stride = 1;
            for ax in (0..shape.len()).rev() {
                let idx = flat % shape[ax];
                flat /= shape[ax];
                if !reduced[ax] {
                    out += idx * out_stride;
                    out_stride *= shape[ax];
                }
            }
            out
        }
    }

    /// Expands a reduced tensor back to this tensor's shape (inverse of `reduce` over `axes`).
    pub(crate) fn broadcast_back(&self, reduced_values: &[T], axes: Option<&[usize]>) -> Self {
        let mut reduced = vec![axes.is_none(); self.ndim()];
        if let Some(list) = axes {
            for &ax in list {
                reduced[ax] = true;
            }
        }
        let out_index = self.output_index_map(&reduced);
        Tensor {
            shape: self.shape.clone(),
            data: (0..self.numel()).map(|i| reduced_values[out_index(i)]).collect(),
        }
    }

    // ---- linear algebra ----------------------------------------------------------------

    /// Matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &Self) -> TResult<Self> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        Ok(Tensor {
            shape: vec![m, n],
            data: gemm::gemm(m, n, k, &self.data, &other.data),
        })
    }

    pub fn transpose2d(&self) -> TResult<Self> {
        if self.ndim() != 2 {
            return Err(TensorError::Geometry {
                op: "transpose2d",
                detail: format!("expected 2-d tensor, got {:?}", self.shape),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Tensor {
            shape: vec![c, r],
            data: gemm::transpose(r, c, &self.data),
        })
    }

    /// Copy of the `index`-th slice along axis 0.
    pub fn slice0(&self, index: usize) -> Self {
        assert!(self.ndim() >= 1 && index < self.shape[0]);
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.ndim() == 1 {
            Vec::new()
        } else {
            self.shape[1..].to_vec()
        };
        Tensor {
            shape,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack<B: std::borrow::Borrow<Self>>(items: &[B]) -> TResult<Self> {
        let first = items.first().ok_or_else(|| TensorError::Geometry {
            op: "stack",
            detail: "no tensors to stack".into(),
        })?;
        let first = first.borrow();
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            let t = t.borrow();
            first.expect_same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_abs_mul_examples() {
        assert_eq!(t(&[3], &[-1., 0., 2.]).unary(Unary::Relu).unwrap().data(), &[0., 0., 2.]);
        assert_eq!(t(&[2], &[-0.5, 0.3]).unary(Unary::Abs).unwrap().data(), &[0.5, 0.3]);
        let p = t(&[3], &[1., 2., 3.]).mul(&t(&[3], &[4., 5., 6.])).unwrap();
        assert_eq!(p.data(), &[4., 10., 18.]);
    }

    #[test]
    fn reduce_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(a.reduce(Reduce::Sum, None).unwrap().values.item(), 10.);
        let b = t(&[2, 2], &[1., 5., 3., 2.]);
        let m = b.reduce(Reduce::Max, None).unwrap();
        assert_eq!(m.values.item(), 5.);
        assert_eq!(m.argmax.unwrap(), vec![1]);
        assert_eq!(t(&[2], &[2., 4.]).reduce(Reduce::Mean, None).unwrap().values.item(), 3.);
    }

    #[test]
    fn reduce_over_axes() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let rows = a.reduce(Reduce::Sum, Some(&[1])).unwrap().values;
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.data(), &[6., 15.]);
        let cols = a.reduce(Reduce::Mean, Some(&[0])).unwrap().values;
        assert_eq!(cols.data(), &[2.5, 3.5, 4.5]);
    }

    #[test]
    fn max_ties_pick_lowest_row_major_index() {
        let a = t(&[2, 2], &[3., 1., 3., 3.]);
        let m = a.reduce(Reduce::Max, None).unwrap();
        assert_eq!(m.argmax.unwrap(), vec![0]);
        let per_col = a.reduce(Reduce::Max, Some(&[0])).unwrap();
        assert_eq!(per_col.argmax.unwrap(), vec![0, 3]);
    }

    #[test]
    fn invalid_axis_and_shape_errors() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert!(matches!(
            a.reduce(Reduce::Sum, Some(&[2])),
            Err(TensorError::InvalidAxis { axis: 2, ndim: 2 })
        ));
        assert!(matches!(
            a.add(&t(&[4], &[1., 1., 1., 1.])),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(Tensor::<f64>::new(vec![3], vec![1.0]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn division_and_domain_errors() {
        let a = t(&[2], &[1., 2.]);
        assert!(matches!(
            a.div(&t(&[2], &[1., 0.])),
            Err(TensorError::DivisionByZero { .. })
        ));
        assert!(matches!(
            a.binary_scalar(Binary::Div, 0.0),
            Err(TensorError::DivisionByZero { .. })
        ));
        assert!(matches!(
            t(&[1], &[-1.]).unary(Unary::Log),
            Err(TensorError::Domain { .. })
        ));
        assert!(matches!(
            t(&[1], &[1000.]).unary(Unary::Exp),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 1], &[1., 0., -1.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[-2., -2.]);
        assert_eq!(a.transpose2d().unwrap().shape(), &[3, 2]);
    }
}
