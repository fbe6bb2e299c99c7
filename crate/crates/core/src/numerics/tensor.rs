use serde::{Deserialize, Serialize};

use super::Elem;
use crate::error::{Error, Result};

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// The working precision of every model and metric input.
pub type Tensor = Array<f32>;

impl<T: Elem> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("invalid shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for callers that already guarantee the length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading dimension, i.e. the batch size for `[B, ...]` tensors.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn same_shape(&self, other: &Array<T>, what: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Array<T> {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Array<T>, f: impl Fn(T, T) -> T) -> Result<Array<T>> {
        self.same_shape(other, "zip_map")?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Array<T>) -> Result<Array<T>> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Array<T>) -> Result<Array<T>> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Array<T> {
        self.map(|v| v * c)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Array<T> {
        self.map(|v| v.max(lo).min(hi))
    }

    pub(crate) fn add_assign(&mut self, other: &Array<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v.as_f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn abs_max(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Array<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.as_f64() * b.as_f64())
            .sum()
    }

    /// Number of elements in one batch item of a `[B, ...]` tensor.
    pub fn item_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Copy of batch item `i` with a leading dimension of 1.
    pub fn item_at(&self, i: usize) -> Array<T> {
        let n = self.item_len();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self::from_parts(shape, self.data[i * n..(i + 1) * n].to_vec())
    }

    pub fn item_slice(&self, i: usize) -> &[T] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Gather batch items by index into a new `[idx.len(), ...]` tensor.
    pub fn select(&self, idx: &[usize]) -> Array<T> {
        let n = self.item_len();
        let mut data = Vec::with_capacity(n * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::from_parts(shape, data)
    }

    /// Concatenate tensors along the leading dimension.
    pub fn stack(items: &[Self]) -> Result<Array<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut lead = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::shape(format!(
                    "stack: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self::from_parts(shape, data))
    }

    /// Element-wise precision conversion.
    pub fn cast<U: Elem>(&self) -> Array<U> {
        if let Some(same) = (self as &dyn std::any::Any).downcast_ref::<Array<U>>() {
            return same.clone();
        }
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl Tensor {
    /// Little-endian byte image of the payload; used for fingerprints.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_contract() {
        let t = Tensor::zeros(&[2, 3]);
        assert_eq!(t.numel(), 6);
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn select_and_stack_agree() {
        let t = Tensor::from_fn(&[4, 2], |i| i as f32);
        let s = t.select(&[3, 1]);
        assert_eq!(s.data(), &[6.0, 7.0, 2.0, 3.0]);
        let back = Tensor::stack(&[t.item_at(3), t.item_at(1)]).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn finiteness_is_reported() {
        let t = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.ensure_finite("x"), Err(Error::NonFinite(_))));
    }
}
