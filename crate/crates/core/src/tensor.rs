//! Dense row-major `f64` arrays with the few operations the propagation
//! rules need.
//!
//! There is no broadcasting. Shapes must match exactly, and anything that
//! would need broadcasting goes through [`Tensor::replicate_rows`] or a
//! reshape, so every algorithm reads the same as its matrix form.

use std::fmt;

use thiserror::Error;

/// Denominators with magnitude below this are treated as zero by
/// [`ElementwiseOp::GuardedDiv`], which then yields 0.
pub const DIV_GUARD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: every extent must be positive")]
    InvalidShape(Vec<usize>),
    #[error("axis {axis} is out of range for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{op} needs a rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("L^p norm needs p >= 1, got {0}")]
    InvalidNormExponent(f64),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    /// Division that returns 0 wherever `|denominator| < DIV_GUARD_TOLERANCE`.
    GuardedDiv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reduction {
    Sum,
    SumOfSquares,
    /// `‖·‖_p`; `f64::INFINITY` gives the maximum absolute value.
    LpNorm(f64),
}

/// Dense array of `f64` values, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor, checking that the data fills the shape and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = check_shape(&shape)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    /// Library-internal constructor for results whose shape is known good.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = check_shape(&shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::RankMismatch {
                op: "dims2",
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Element `(row, col)` of a rank-2 tensor. Panics when out of range.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        let cols = self.shape[self.shape.len() - 1];
        self.data[row * cols + col]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: n,
                actual: self.data.len(),
            });
        }
        Ok(Self::from_parts(shape, self.data.clone()))
    }

    /// Flattens to a column vector `[n, 1]`.
    pub fn as_column(&self) -> Self {
        Self::from_parts(vec![self.data.len(), 1], self.data.clone())
    }

    /// Flattens to a rank-1 vector.
    pub fn flatten(&self) -> Self {
        Self::from_parts(vec![self.data.len()], self.data.clone())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Stacks `rows` copies of a length-`n` vector into an `[rows, n]` matrix.
    pub fn replicate_rows(&self, rows: usize) -> Result<Self> {
        check_shape(&[rows])?;
        let mut out = Vec::with_capacity(rows * self.data.len());
        for _ in 0..rows {
            out.extend_from_slice(&self.data);
        }
        Ok(Self::from_parts(vec![rows, self.data.len()], out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        elementwise(self, other, ElementwiseOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        elementwise(self, other, ElementwiseOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        elementwise(self, other, ElementwiseOp::Mul)
    }

    pub fn guarded_div(&self, other: &Self) -> Result<Self> {
        elementwise(self, other, ElementwiseOp::GuardedDiv)
    }

    pub fn positive_part(&self) -> Self {
        clamp_parts(self, Part::Positive)
    }

    pub fn negative_part(&self) -> Self {
        clamp_parts(self, Part::Negative)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }
}

/// Strided `c = a·b` through `matrixmultiply`; strides are in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
) -> Vec<f64> {
    if m == 1 || n == 1 {
        return gemv(
            m,
            k,
            n,
            a,
            [rsa as usize, csa as usize],
            b,
            [rsb as usize, csb as usize],
        );
    }
    let mut out = vec![0.0; m * n];
    // SAFETY: the callers check that `a` holds an m×k and `b` a k×n matrix
    // under the given strides, and `out` is a dense m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Products with a single row or column. dgemm allocates packing buffers on
/// every call, which for vectors costs more than the product itself.
fn gemv(m: usize, k: usize, n: usize, a: &[f64], sa: [usize; 2], b: &[f64], sb: [usize; 2]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 1 {
        if sa[1] == 1 || m == 1 {
            for (i, o) in out.iter_mut().enumerate() {
                *o = (0..k).map(|p| a[i * sa[0] + p * sa[1]] * b[p * sb[0]]).sum();
            }
        } else {
            for p in 0..k {
                let bp = b[p * sb[0]];
                for (i, o) in out.iter_mut().enumerate() {
                    *o += a[i * sa[0] + p * sa[1]] * bp;
                }
            }
        }
    } else if sb[1] == 1 {
        for p in 0..k {
            let ap = a[p * sa[1]];
            for (j, o) in out.iter_mut().enumerate() {
                *o += ap * b[p * sb[0] + j];
            }
        }
    } else {
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..k).map(|p| a[p * sa[1]] * b[p * sb[0] + j * sb[1]]).sum();
        }
    }
    out
}

/// Standard matrix product of `[m, k]` and `[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let out = gemm(m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `aᵀ · b` for `a: [k, m]` and `b: [k, n]`, without materializing `aᵀ`.
pub fn matmul_transpose_lhs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_transpose_lhs",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let out = gemm(m, k, n, &a.data, 1, m as isize, &b.data, n as isize, 1);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` for `a: [m, k]` and `b: [n, k]`.
pub fn matmul_transpose_rhs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_transpose_rhs",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let out = gemm(m, k, n, &a.data, k as isize, 1, &b.data, 1, k as isize);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn elementwise(a: &Tensor, b: &Tensor, op: ElementwiseOp) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op: "elementwise",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let f: fn(f64, f64) -> f64 = match op {
        ElementwiseOp::Add => |x, y| x + y,
        ElementwiseOp::Sub => |x, y| x - y,
        ElementwiseOp::Mul => |x, y| x * y,
        ElementwiseOp::GuardedDiv => |x, y| {
            if y.abs() < DIV_GUARD_TOLERANCE {
                0.0
            } else {
                x / y
            }
        },
    };
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

pub fn clamp_parts(a: &Tensor, part: Part) -> Tensor {
    match part {
        Part::Positive => a.map(|v| v.max(0.0)),
        Part::Negative => a.map(|v| v.min(0.0)),
    }
}

/// Reduces along `axis`, dropping it from the shape. A rank-1 input reduces
/// to shape `[1]`.
pub fn reduce(a: &Tensor, op: Reduction, axis: usize) -> Result<Tensor> {
    if axis >= a.rank() {
        return Err(TensorError::InvalidAxis { axis, rank: a.rank() });
    }
    if let Reduction::LpNorm(p) = op {
        if !(p >= 1.0) {
            return Err(TensorError::InvalidNormExponent(p));
        }
    }
    let extent = a.shape[axis];
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let values = (0..extent).map(|e| a.data[(o * extent + e) * inner + i]);
            out.push(reduce_values(values, op));
        }
    }
    let mut shape: Vec<usize> = a.shape.clone();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn reduce_values(values: impl Iterator<Item = f64>, op: Reduction) -> f64 {
    match op {
        Reduction::Sum => values.sum(),
        Reduction::SumOfSquares => values.map(|v| v * v).sum(),
        Reduction::LpNorm(p) if p == 1.0 => values.map(f64::abs).sum(),
        Reduction::LpNorm(p) if p.is_infinite() => values.fold(0.0, |m, v| m.max(v.abs())),
        Reduction::LpNorm(p) if p == 2.0 => values.map(|v| v * v).sum::<f64>().sqrt(),
        Reduction::LpNorm(p) => {
            // Scale by the largest magnitude so large p does not overflow.
            let v: Vec<f64> = values.map(f64::abs).collect();
            let m = v.iter().copied().fold(0.0, f64::max);
            if m == 0.0 {
                return 0.0;
            }
            m * v.iter().map(|x| (x / m).powf(p)).sum::<f64>().powf(1.0 / p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let i = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&i, &x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]).unwrap();
        let b = Tensor::zeros(vec![2, 3]).unwrap();
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 2.0]).unwrap();
        assert_eq!(a.guarded_div(&b).unwrap().data(), &[0.0, 1.0]);
        let c = Tensor::vector(vec![2.0, 3.0]).unwrap();
        let d = Tensor::vector(vec![4.0, 5.0]).unwrap();
        assert_eq!(c.mul(&d).unwrap().data(), &[8.0, 15.0]);
        let e = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert_eq!(e.sub(&e).unwrap().data(), &[0.0, 0.0]);
        let f = Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap();
        assert!(a.add(&f).is_err());
    }

    #[test]
    fn clamp_examples() {
        let a = Tensor::vector(vec![-1.0, 2.0]).unwrap();
        assert_eq!(a.positive_part().data(), &[0.0, 2.0]);
        assert_eq!(a.negative_part().data(), &[-1.0, 0.0]);
    }

    #[test]
    fn reduce_examples() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(reduce(&a, Reduction::Sum, 0).unwrap().data(), &[6.0]);
        let b = Tensor::vector(vec![3.0, 4.0]).unwrap();
        assert_eq!(reduce(&b, Reduction::LpNorm(2.0), 0).unwrap().data(), &[5.0]);
        assert_eq!(reduce(&b, Reduction::LpNorm(f64::INFINITY), 0).unwrap().data(), &[4.0]);
        assert_eq!(reduce(&b, Reduction::SumOfSquares, 0).unwrap().data(), &[25.0]);
        assert!(matches!(
            reduce(&b, Reduction::Sum, 1),
            Err(TensorError::InvalidAxis { axis: 1, rank: 1 })
        ));
        assert!(reduce(&b, Reduction::LpNorm(0.5), 0).is_err());
    }

    #[test]
    fn reduce_along_each_axis() {
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let cols = reduce(&m, Reduction::Sum, 0).unwrap();
        assert_eq!(cols.shape(), &[3]);
        assert_eq!(cols.data(), &[5.0, 7.0, 9.0]);
        let rows = reduce(&m, Reduction::Sum, 1).unwrap();
        assert_eq!(rows.data(), &[6.0, 15.0]);
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![0], vec![]),
            Err(TensorError::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn transpose_and_transpose_lhs_agree() {
        let a = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 1, vec![1.0, -1.0, 2.0]).unwrap();
        let direct = matmul(&a.transpose().unwrap(), &b).unwrap();
        let fused = matmul_transpose_lhs(&a, &b).unwrap();
        assert_eq!(direct, fused);
    }

    fn matrix_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
        (1usize..=8, 1usize..=8, 1usize..=8).prop_flat_map(|(m, k, n)| {
            (
                Just(m),
                Just(k),
                Just(n),
                prop::collection::vec(-10.0f64..10.0, m * k),
                prop::collection::vec(-10.0f64..10.0, k * n),
            )
        })
    }

    proptest! {
        #[test]
        fn matmul_matches_triple_loop((m, k, n, a, b) in matrix_strategy()) {
            let expected = naive_matmul(&a, &b, m, k, n);
            let ta = Tensor::matrix(m, k, a).unwrap();
            let tb = Tensor::matrix(k, n, b).unwrap();
            let got = matmul(&ta, &tb).unwrap();
            for (g, e) in got.data().iter().zip(&expected) {
                prop_assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
            }
        }

        #[test]
        fn guarded_div_inverts_mul(
            pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..32)
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let ta = Tensor::vector(a.clone()).unwrap();
            let tb = Tensor::vector(b.clone()).unwrap();
            let back = ta.guarded_div(&tb).unwrap().mul(&tb).unwrap();
            for ((r, x), y) in back.data().iter().zip(&a).zip(&b) {
                if y.abs() >= DIV_GUARD_TOLERANCE {
                    prop_assert!((r - x).abs() <= 1e-12 * x.abs().max(1.0));
                } else {
                    prop_assert_eq!(*r, 0.0);
                }
            }
        }

        #[test]
        fn parts_reconstruct_input(v in prop::collection::vec(-1e6f64..1e6, 1..64)) {
            let t = Tensor::vector(v).unwrap();
            let pos = t.positive_part();
            let neg = t.negative_part();
            prop_assert!(pos.data().iter().all(|&x| x >= 0.0));
            prop_assert!(neg.data().iter().all(|&x| x <= 0.0));
            prop_assert_eq!(pos.add(&neg).unwrap(), t);
        }

        #[test]
        fn l1_norm_of_nonnegatives_is_sum(v in prop::collection::vec(0.0f64..1e3, 1..64)) {
            let t = Tensor::vector(v).unwrap();
            let l1 = reduce(&t, Reduction::LpNorm(1.0), 0).unwrap().data()[0];
            let s = reduce(&t, Reduction::Sum, 0).unwrap().data()[0];
            prop_assert!((l1 - s).abs() <= 1e-12 * s.max(1.0));
        }
    }
}
