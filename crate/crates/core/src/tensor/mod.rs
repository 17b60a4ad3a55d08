//! Dense row-major tensors and the reverse-mode autodiff tape built on them.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use graph::{Graph, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An n-dimensional array of floats.
///
/// `requires_grad` and `grad` are only meaningful for tensors living inside a
/// [`Graph`]; after [`Graph::backward`] every node that requires a gradient
/// carries a buffer of the same length as its data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                reason: format!("expected {} elements, got {}", numel(&shape), data.len()),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::new(shape, vec![value; n]).expect("full: positive dimensions")
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(Vec::new(), vec![value]).expect("scalar")
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().f64())
            .fold(0.0, f64::max)
    }

    /// Converts element type, e.g. to run f64 oracles against f32 data.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Rows of `[B, ...]` tensors stacked along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Empty("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Slice `index` along the leading axis.
    pub fn index0(&self, index: usize) -> Result<Self> {
        let lead = *self.shape.first().ok_or_else(|| Error::InvalidShape {
            shape: self.shape.clone(),
            reason: "index0 on a scalar".into(),
        })?;
        if index >= lead {
            return Err(Error::InvalidArgument(format!(
                "index {index} out of range for leading dimension {lead}"
            )));
        }
        let inner = self.len() / lead;
        Tensor::new(
            self.shape[1..].to_vec(),
            self.data[index * inner..(index + 1) * inner].to_vec(),
        )
    }

    /// Appends the binary encoding: rank and dims as little-endian u32,
    /// then the elements little-endian at their native width.
    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(out);
        }
    }

    pub fn encoded_len(&self) -> usize {
        4 + 4 * self.shape.len() + T::DTYPE.bytes() * self.data.len()
    }

    /// Decodes one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn read_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let corrupt = |what: &str| Error::CorruptCheckpoint(format!("tensor payload: {what}"));
        let read_u32 = |at: usize| -> Result<usize> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| corrupt("truncated header"))
        };
        let rank = read_u32(0)?;
        if rank > 8 {
            return Err(corrupt("implausible rank"));
        }
        let shape = (0..rank)
            .map(|i| read_u32(4 + 4 * i))
            .collect::<Result<Vec<_>>>()?;
        let mut pos = 4 + 4 * rank;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt("element count overflow"))?;
        let width = T::DTYPE.bytes();
        let end = n
            .checked_mul(width)
            .and_then(|b| b.checked_add(pos))
            .ok_or_else(|| corrupt("length overflow"))?;
        if end > bytes.len() {
            return Err(corrupt("truncated data"));
        }
        let data = (0..n)
            .map(|i| T::read_le(&bytes[pos + i * width..pos + (i + 1) * width]))
            .collect();
        pos = end;
        let t = Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?;
        Ok((t, pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = Tensor::<f32>::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        t.write_bytes(&mut buf);
        assert_eq!(buf.len(), t.encoded_len());
        for cut in 0..buf.len() {
            assert!(Tensor::<f32>::read_bytes(&buf[..cut]).is_err());
        }
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bitwise(dims in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n = numel(&dims);
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            t.write_bytes(&mut buf);
            let (back, used) = Tensor::<f64>::read_bytes(&buf).unwrap();
            prop_assert_eq!(used, buf.len());
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
