//! Dense row-major tensors and the QTEN binary encoding.
//!
//! Every other module passes values around as [`Tensor`]. The arithmetic here
//! is intentionally narrow: elementwise ops with scalar / same-shape /
//! per-axis broadcasting, and a single-axis contraction with a fixed
//! left-to-right accumulation order so results are bit-reproducible.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::I32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::I8),
            2 => Some(DType::I32),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::F32 => "f32",
            DType::I8 => "i8",
            DType::I32 => "i32",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// Shape formatted as `[a, b, c]` for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape(pub Vec<usize>);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dims must be non-empty with every dim >= 1, got {0}")]
    InvalidDims(Shape),
    #[error("dims {dims} require {expected} elements, buffer has {actual}")]
    LengthMismatch {
        dims: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },
    #[error("axis {axis} out of range for tensor of rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("expected dtype {expected}, found {found}")]
    DTypeMismatch { expected: DType, found: DType },
    #[error("division by zero at flat index {index}")]
    DivisionByZero { index: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

fn check_dims(dims: &[usize], len: usize) -> Result<(), TensorError> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(TensorError::InvalidDims(Shape(dims.to_vec())));
    }
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::InvalidDims(Shape(dims.to_vec())))?;
    if expected != len {
        return Err(TensorError::LengthMismatch {
            dims: Shape(dims.to_vec()),
            expected,
            actual: len,
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        check_dims(&dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn from_f32(dims: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(dims.to_vec(), TensorData::F32(data))
    }

    pub fn from_i8(dims: &[usize], data: Vec<i8>) -> Result<Self, TensorError> {
        Self::new(dims.to_vec(), TensorData::I8(data))
    }

    pub fn from_i32(dims: &[usize], data: Vec<i32>) -> Result<Self, TensorError> {
        Self::new(dims.to_vec(), TensorData::I32(data))
    }

    /// 1-D f32 tensor. Panics on an empty slice.
    pub fn vector(values: &[f32]) -> Self {
        Self::from_f32(&[values.len()], values.to_vec()).expect("vector must be non-empty")
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, TensorError> {
        let n = dims.iter().product();
        Self::from_f32(dims, alloc::vec![0.0; n])
    }

    pub fn full(dims: &[usize], value: f32) -> Result<Self, TensorError> {
        let n = dims.iter().product();
        Self::from_f32(dims, alloc::vec![value; n])
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims).expect("dims already validated")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn shape(&self) -> Shape {
        Shape(self.dims.clone())
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn as_f32(&self) -> Result<&[f32], TensorError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::DTypeMismatch {
                expected: DType::F32,
                found: other.dtype(),
            }),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32], TensorError> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::DTypeMismatch {
                expected: DType::F32,
                found: other.dtype(),
            }),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>, TensorError> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::DTypeMismatch {
                expected: DType::F32,
                found: other.dtype(),
            }),
        }
    }

    /// Integer payload widened to i32, for either integer dtype.
    pub fn to_i32_vec(&self) -> Result<Vec<i32>, TensorError> {
        match &self.data {
            TensorData::I8(v) => Ok(v.iter().map(|&q| i32::from(q)).collect()),
            TensorData::I32(v) => Ok(v.clone()),
            TensorData::F32(_) => Err(TensorError::DTypeMismatch {
                expected: DType::I32,
                found: DType::F32,
            }),
        }
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self, TensorError> {
        Self::new(dims.to_vec(), self.data)
    }

    /// Applies `f` to every element of an F32 tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self, TensorError> {
        let v = self.as_f32()?.iter().map(|&x| f(x)).collect();
        Self::from_f32(&self.dims, v)
    }

    pub fn check_axis(&self, axis: usize) -> Result<usize, TensorError> {
        self.dims
            .get(axis)
            .copied()
            .ok_or(TensorError::AxisOutOfRange {
                axis,
                rank: self.rank(),
            })
    }

    pub fn max_abs(&self) -> Result<f32, TensorError> {
        Ok(self
            .as_f32()?
            .iter()
            .fold(0.0f32, |m, &x| if libm::fabsf(x) > m { libm::fabsf(x) } else { m }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Div,
    /// Unary; the right-hand operand is ignored.
    Exp,
    Pow,
}

/// Right-hand operand of an elementwise op.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Scalar(f32),
    /// Same shape as the left operand.
    Tensor(&'a Tensor),
    /// 1-D tensor broadcast along `axis` of the left operand.
    Axis { axis: usize, vector: &'a Tensor },
}

impl From<f32> for Operand<'_> {
    fn from(v: f32) -> Self {
        Operand::Scalar(v)
    }
}

impl<'a> From<&'a Tensor> for Operand<'a> {
    fn from(t: &'a Tensor) -> Self {
        Operand::Tensor(t)
    }
}

fn apply_op(op: ElementwiseOp, a: f32, b: f32) -> f32 {
    match op {
        ElementwiseOp::Add => a + b,
        ElementwiseOp::Mul => a * b,
        ElementwiseOp::Div => a / b,
        ElementwiseOp::Exp => libm::expf(a),
        ElementwiseOp::Pow => libm::powf(a, b),
    }
}

pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Operand<'_>) -> Result<Tensor, TensorError> {
    let lhs = a.as_f32()?;
    if op == ElementwiseOp::Exp {
        return a.map(libm::expf);
    }
    let n = lhs.len();
    let out: Vec<f32> = match b {
        Operand::Scalar(s) => {
            if op == ElementwiseOp::Div && s == 0.0 {
                return Err(TensorError::DivisionByZero { index: 0 });
            }
            lhs.iter().map(|&x| apply_op(op, x, s)).collect()
        }
        Operand::Tensor(t) => {
            if t.dims != a.dims {
                return Err(TensorError::ShapeMismatch {
                    left: a.shape(),
                    right: t.shape(),
                });
            }
            let rhs = t.as_f32()?;
            if op == ElementwiseOp::Div {
                if let Some(index) = rhs.iter().position(|&v| v == 0.0) {
                    return Err(TensorError::DivisionByZero { index });
                }
            }
            lhs.iter()
                .zip(rhs)
                .map(|(&x, &y)| apply_op(op, x, y))
                .collect()
        }
        Operand::Axis { axis, vector } => {
            let len = a.check_axis(axis)?;
            let rhs = vector.as_f32()?;
            if vector.rank() != 1 || rhs.len() != len {
                return Err(TensorError::ShapeMismatch {
                    left: a.shape(),
                    right: vector.shape(),
                });
            }
            if op == ElementwiseOp::Div {
                if let Some(index) = rhs.iter().position(|&v| v == 0.0) {
                    return Err(TensorError::DivisionByZero { index });
                }
            }
            let inner: usize = a.dims[axis + 1..].iter().product();
            (0..n)
                .map(|i| apply_op(op, lhs[i], rhs[(i / inner) % len]))
                .collect()
        }
    };
    Tensor::from_f32(&a.dims, out)
}

pub fn add<'a>(a: &Tensor, b: impl Into<Operand<'a>>) -> Result<Tensor, TensorError> {
    elementwise(ElementwiseOp::Add, a, b.into())
}

pub fn mul<'a>(a: &Tensor, b: impl Into<Operand<'a>>) -> Result<Tensor, TensorError> {
    elementwise(ElementwiseOp::Mul, a, b.into())
}

pub fn div<'a>(a: &Tensor, b: impl Into<Operand<'a>>) -> Result<Tensor, TensorError> {
    elementwise(ElementwiseOp::Div, a, b.into())
}

pub fn exp(a: &Tensor) -> Result<Tensor, TensorError> {
    elementwise(ElementwiseOp::Exp, a, Operand::Scalar(0.0))
}

pub fn pow<'a>(a: &Tensor, b: impl Into<Operand<'a>>) -> Result<Tensor, TensorError> {
    elementwise(ElementwiseOp::Pow, a, b.into())
}

/// Sum-product of `a` along `a_axis` with `b` along `b_axis`.
///
/// Output dims are `a`'s remaining dims followed by `b`'s remaining dims
/// (a scalar result is returned as shape `[1]`). Accumulation runs in f64 over
/// the contracted index in increasing order, rounded once per output.
pub fn contract(
    a: &Tensor,
    a_axis: usize,
    b: &Tensor,
    b_axis: usize,
) -> Result<Tensor, TensorError> {
    let k = a.check_axis(a_axis)?;
    let kb = b.check_axis(b_axis)?;
    if k != kb {
        return Err(TensorError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    let av = a.as_f32()?;
    let bv = b.as_f32()?;

    let a_outer: usize = a.dims[..a_axis].iter().product();
    let a_inner: usize = a.dims[a_axis + 1..].iter().product();
    let b_outer: usize = b.dims[..b_axis].iter().product();
    let b_inner: usize = b.dims[b_axis + 1..].iter().product();

    let mut out = Vec::with_capacity(a_outer * a_inner * b_outer * b_inner);
    for ao in 0..a_outer {
        for ai in 0..a_inner {
            for bo in 0..b_outer {
                for bi in 0..b_inner {
                    let mut acc = 0.0f64;
                    for j in 0..k {
                        acc += f64::from(av[(ao * k + j) * a_inner + ai]) * f64::from(bv[(bo * k + j) * b_inner + bi]);
                    }
                    out.push(acc as f32);
                }
            }
        }
    }

    let mut dims: Vec<usize> = a
        .dims
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != a_axis)
        .map(|(_, &d)| d)
        .collect();
    dims.extend(
        b.dims
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != b_axis)
            .map(|(_, &d)| d),
    );
    if dims.is_empty() {
        dims.push(1);
    }
    Tensor::from_f32(&dims, out)
}

/// Dense matrix product `[m, k] x [k, n] -> [m, n]`; f64 accumulation in fixed
/// order, rounded once per output.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.rank() != 2 || b.rank() != 2 || a.dims[1] != b.dims[0] {
        return Err(TensorError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.dims[0], a.dims[1], b.dims[1]);
    let av = a.as_f32()?;
    let bv = b.as_f32()?;
    let mut out = Vec::with_capacity(m * n);
    let mut row = alloc::vec![0.0f64; n];
    for i in 0..m {
        row.fill(0.0);
        for j in 0..k {
            let aij = f64::from(av[i * k + j]);
            let brow = &bv[j * n..(j + 1) * n];
            for (o, &bjn) in row.iter_mut().zip(brow) {
                *o += aij * f64::from(bjn);
            }
        }
        out.extend(row.iter().map(|&v| v as f32));
    }
    Tensor::from_f32(&[m, n], out)
}

pub fn transpose2(a: &Tensor) -> Result<Tensor, TensorError> {
    if a.rank() != 2 {
        return Err(TensorError::InvalidDims(a.shape()));
    }
    let (r, c) = (a.dims[0], a.dims[1]);
    let v = a.as_f32()?;
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(v[i * c + j]);
        }
    }
    Tensor::from_f32(&[c, r], out)
}

pub const QTEN_MAGIC: [u8; 4] = *b"QTEN";
pub const QTEN_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QtenError {
    #[error("bad magic bytes {0:?}, expected \"QTEN\"")]
    BadMagic([u8; 4]),
    #[error("unsupported QTEN version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("truncated payload: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("payload has {extra} trailing bytes beyond dims {dims}")]
    TrailingBytes { dims: Shape, extra: usize },
    #[error(transparent)]
    Dims(#[from] TensorError),
}

impl Tensor {
    /// Encodes as QTEN: `"QTEN"`, u32 version, u8 dtype, u8 ndim,
    /// ndim x u32 dims, raw little-endian data.
    pub fn to_qten_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(10 + 4 * self.rank() + self.len() * self.dtype().size_bytes());
        out.extend_from_slice(&QTEN_MAGIC);
        out.extend_from_slice(&QTEN_VERSION.to_le_bytes());
        out.push(self.dtype().code());
        out.push(u8::try_from(self.rank()).expect("rank fits in u8"));
        for &d in &self.dims {
            out.extend_from_slice(&u32::try_from(d).expect("dim fits in u32").to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_qten_bytes(bytes: &[u8]) -> Result<Self, QtenError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().expect("4 bytes");
        if magic != QTEN_MAGIC {
            return Err(QtenError::BadMagic(magic));
        }
        let version = cur.u32()?;
        if version != QTEN_VERSION {
            return Err(QtenError::UnsupportedVersion(version));
        }
        let code = cur.take(1)?[0];
        let dtype = DType::from_code(code).ok_or(QtenError::UnknownDType(code))?;
        let ndim = cur.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorError::InvalidDims(Shape(dims)).into());
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::InvalidDims(Shape(dims.clone())))?;
        let payload = cur.take(count * dtype.size_bytes())?;
        if cur.pos != bytes.len() {
            return Err(QtenError::TrailingBytes {
                dims: Shape(dims),
                extra: bytes.len() - cur.pos,
            });
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::I8 => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        Ok(Tensor::new(dims, data)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], QtenError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(QtenError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, QtenError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_broadcast_mul() {
        let t = Tensor::vector(&[1.0, 2.0, 3.0]);
        let r = mul(&t, 2.0).unwrap();
        assert_eq!(r.as_f32().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let t = Tensor::from_f32(&[2, 2], vec![1.5, -2.0, 0.25, 7.0]).unwrap();
        assert_eq!(add(&t, &t.zeros_like()).unwrap(), t);
    }

    #[test]
    fn exp_matches_scalar_math() {
        let t = Tensor::vector(&[0.0, -0.5]);
        let r = exp(&t).unwrap();
        let v = r.as_f32().unwrap();
        assert_eq!(v[0], 1.0);
        assert_relative_eq!(v[1], (-0.5f64).exp() as f32, max_relative = 1e-6);
        assert_relative_eq!(v[1], 0.606_530_66, max_relative = 1e-6);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[3, 2]).unwrap();
        let err = add(&a, &b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn div_by_zero_element_rejected() {
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[1.0, 0.0]);
        assert_eq!(
            div(&a, &b).unwrap_err(),
            TensorError::DivisionByZero { index: 1 }
        );
        assert!(div(&a, 0.0).is_err());
    }

    #[test]
    fn axis_broadcast() {
        let a = Tensor::from_f32(&[2, 3], vec![1.0; 6]).unwrap();
        let rows = Tensor::vector(&[2.0, 3.0]);
        let cols = Tensor::vector(&[1.0, 10.0, 100.0]);
        let r = mul(&a, Operand::Axis { axis: 0, vector: &rows }).unwrap();
        assert_eq!(r.as_f32().unwrap(), &[2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
        let c = mul(&a, Operand::Axis { axis: 1, vector: &cols }).unwrap();
        assert_eq!(c.as_f32().unwrap(), &[1.0, 10.0, 100.0, 1.0, 10.0, 100.0]);
        assert!(mul(&a, Operand::Axis { axis: 1, vector: &rows }).is_err());
    }

    #[test]
    fn pow_elementwise() {
        let a = Tensor::vector(&[4.0, 9.0]);
        assert_eq!(pow(&a, 0.5).unwrap().as_f32().unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn contract_hand_sum_product() {
        let c = Tensor::vector(&[1.0, 0.0]);
        let h = Tensor::from_f32(&[2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = contract(&c, 0, &h, 1).unwrap();
        assert_eq!(y.dims(), &[2]);
        assert_eq!(y.as_f32().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn contract_with_ones_and_basis() {
        let h = Tensor::from_f32(&[3, 4], (0..12).map(|i| i as f32 * 0.5 - 2.0).collect())
            .unwrap();
        let hv = h.as_f32().unwrap();
        let ones = Tensor::full(&[4], 1.0).unwrap();
        let rows = contract(&ones, 0, &h, 1).unwrap();
        for c in 0..3 {
            let expect: f32 = hv[c * 4..c * 4 + 4].iter().sum();
            assert_eq!(rows.as_f32().unwrap()[c], expect);
        }
        let e2 = Tensor::vector(&[0.0, 0.0, 1.0, 0.0]);
        let col = contract(&e2, 0, &h, 1).unwrap();
        assert_eq!(col.as_f32().unwrap(), &[hv[2], hv[6], hv[10]]);
    }

    #[test]
    fn contract_axis_mismatch() {
        let a = Tensor::vector(&[1.0, 2.0, 3.0]);
        let b = Tensor::zeros(&[2, 2]).unwrap();
        assert!(matches!(
            contract(&a, 0, &b, 1),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_f32(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_f32(&[2, 1], vec![1.0, -1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_f32().unwrap(), &[-1.0, -1.0]);
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(Tensor::from_f32(&[], vec![]).is_err());
        assert!(Tensor::from_f32(&[0, 2], vec![]).is_err());
        assert!(matches!(
            Tensor::from_f32(&[2, 2], vec![0.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn qten_round_trip_is_byte_stable() {
        let t = Tensor::from_f32(&[2, 3], vec![1.0, -0.5, 3.25, f32::MIN_POSITIVE, 0.0, -7.0])
            .unwrap();
        let bytes = t.to_qten_bytes();
        let back = Tensor::from_qten_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_qten_bytes(), bytes);
        // header: magic, version, dtype, ndim, dims
        assert_eq!(&bytes[..4], b"QTEN");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 2);
        assert_eq!(bytes.len(), 10 + 8 + 24);
    }

    #[test]
    fn qten_i8_extremes() {
        let t = Tensor::from_i8(&[4], vec![-128, 127, 0, -1]).unwrap();
        let bytes = t.to_qten_bytes();
        assert_eq!(&bytes[14..], &[0x80, 0x7f, 0x00, 0xff]);
        assert_eq!(Tensor::from_qten_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn qten_errors_are_distinct() {
        let t = Tensor::from_i32(&[2], vec![5, -6]).unwrap();
        let good = t.to_qten_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            Tensor::from_qten_bytes(&bad),
            Err(QtenError::BadMagic(_))
        ));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(
            Tensor::from_qten_bytes(&bad),
            Err(QtenError::UnsupportedVersion(2))
        );

        let mut bad = good.clone();
        bad[8] = 9;
        assert_eq!(Tensor::from_qten_bytes(&bad), Err(QtenError::UnknownDType(9)));

        assert!(matches!(
            Tensor::from_qten_bytes(&good[..good.len() - 1]),
            Err(QtenError::Truncated { .. })
        ));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(
            Tensor::from_qten_bytes(&bad),
            Err(QtenError::TrailingBytes { extra: 1, .. })
        ));

        let mut bad = good;
        bad[10..14].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            Tensor::from_qten_bytes(&bad),
            Err(QtenError::Dims(TensorError::InvalidDims(_)))
        ));
    }
}
