use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::sync::Arc;

/// Dense row-major tensor. Rank 0 (shape `[]`) holds exactly one element and
/// is the only shape accepted as a loss by the autodiff tape. Data is shared
/// copy-on-write so cloning a tensor never copies the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "tensor_new",
                format!("shape {:?} wants {} elements, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![S::zero(); n]),
        }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn from_rows(rows: Vec<Vec<S>>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * d);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != d {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {} has length {}, expected {}", i, row.len(), d),
                ));
            }
            data.extend(row);
        }
        Tensor::new(vec![n, d], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access to the underlying buffer, cloning if shared.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn at(&self, i: usize) -> S {
        self.data[i]
    }

    pub fn scalar_value(&self) -> S {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        debug_assert_eq!(self.rank(), 2);
        let d = self.shape[1];
        &self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|x| x * c)
    }

    pub fn clamp(&self, lo: S, hi: S) -> Self {
        debug_assert!(lo <= hi);
        self.map(|x| if x < lo { lo } else if x > hi { hi } else { x })
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn l2_norm(&self) -> S {
        self.data
            .iter()
            .map(|&x| x * x)
            .sum::<S>()
            .sqrt()
    }

    pub fn linf_norm(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Plain rank-2 matrix product `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = other.shape[1];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + a * brow[j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let t = Tensor::scalar(2.5f64);
        assert!(t.is_scalar());
        assert_eq!(t.len(), 1);
        assert_eq!(t.scalar_value(), 2.5);
    }

    #[test]
    fn elementwise_ops_check_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 2]);
        let b = Tensor::<f64>::zeros(vec![4]);
        assert!(a.add(&b).is_err());
        assert!(a.add(&a).is_ok());
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_round_trips() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let back = a.transpose().unwrap().transpose().unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn clamp_and_norms() {
        let a = Tensor::new(vec![3], vec![-2.0, 0.5, 3.0]).unwrap();
        assert_eq!(a.clamp(-1.0, 1.0).to_vec(), vec![-1.0, 0.5, 1.0]);
        assert_eq!(a.linf_norm(), 3.0);
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(b.l2_norm(), 5.0);
    }

    #[test]
    fn clone_shares_then_copies_on_write() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.to_vec(), vec![1.0, 2.0]);
        assert_eq!(b.to_vec(), vec![9.0, 2.0]);
    }
}
