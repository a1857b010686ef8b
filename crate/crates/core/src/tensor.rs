//! Dense row-major f64 tensors of rank 1 to 4.
//!
//! A `Tensor` is a plain value: shape plus contiguous data. Gradients and
//! graph bookkeeping live in [`crate::graph`]; a tensor that is not bound to
//! an active graph is immutable except through an optimizer step, so shared
//! references are safe across threads.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_str, Error, Result};

/// Ranks above this are rejected; nothing in the model needs rank > 4.
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape(op, "rank-0 tensor; scalars are 1-element rank-1"));
    }
    if shape.len() > MAX_RANK {
        return Err(Error::shape(
            op,
            alloc::format!("rank {} exceeds max rank {MAX_RANK}", shape.len()),
        ));
    }
    let mut len = 1usize;
    for &d in shape {
        if d == 0 {
            return Err(Error::shape(op, alloc::format!("zero-sized dim in {}", shape_str(shape))));
        }
        len = len.checked_mul(d).ok_or_else(|| Error::shape(op, "shape overflow"))?;
    }
    Ok(len)
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape("Tensor::new", shape)?;
        if data.len() != len {
            return Err(Error::shape(
                "Tensor::new",
                alloc::format!("shape {} needs {len} values, got {}", shape_str(shape), data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = check_shape("Tensor::zeros", shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![0.0; len] })
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        let len = check_shape("Tensor::full", shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![v; len] })
    }

    /// 1-element rank-1 tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = check_shape("Tensor::from_fn", shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() })
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "Tensor::item",
                alloc::format!("expected 1 element, shape is {}", shape_str(&self.shape)),
            ));
        }
        Ok(self.data[0])
    }

    pub fn iter(&self) -> core::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "length mismatch must be a shape error");
    }

    #[test]
    fn rank_0_rejected() {
        let err = Tensor::new(&[], vec![]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn rank_above_4_rejected() {
        assert!(Tensor::zeros(&[1, 1, 1, 1]).is_ok());
        assert!(Tensor::zeros(&[1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(Tensor::zeros(&[2, 0]).is_err());
    }

    #[test]
    fn scalar_is_rank_1() {
        let t = Tensor::scalar(3.5);
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.item().unwrap(), 3.5);
    }
}
