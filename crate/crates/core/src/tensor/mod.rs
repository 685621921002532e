//! Dense row-major `f64` arrays and the differentiable primitives the model is
//! built from. Backward passes are written out by hand per primitive.

mod kernels;
mod ops;

pub use kernels::{affine_rows, affine_rows_naive, dot, matmul_at_b_acc, matmul_a_bt};
pub use ops::*;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.data.len() / d
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with [`Error::Numeric`] naming `what` if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    /// Contiguous slab `i` along the leading axis.
    pub fn slab(&self, i: usize) -> &[f64] {
        let n = self.shape.first().copied().unwrap_or(1);
        let per = self.data.len() / n.max(1);
        &self.data[i * per..(i + 1) * per]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Argument("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.expect_same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Splits along the leading axis.
    pub fn unstack(&self) -> Vec<Tensor> {
        let n = self.shape.first().copied().unwrap_or(0);
        let inner = self.shape[1..].to_vec();
        (0..n)
            .map(|i| Tensor {
                shape: inner.clone(),
                data: self.slab(i).to_vec(),
            })
            .collect()
    }
}

/// Affine map `y = x W + b` applied along the last axis of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `[in_dim, out_dim]`
    pub weight: Tensor,
    /// `[out_dim]`
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(shape_err!(
                "linear weight {:?} incompatible with bias {:?}",
                weight.shape(),
                bias.shape()
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[in_dim, out_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn normal<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[in_dim, out_dim], std, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[in_dim, out_dim], -a, a, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        Self {
            weight: w,
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.out_dim())
    }
}

/// A fixed collection of named parameter tensors.
///
/// `named_tensors` and `named_tensors_mut` must list the same names in the same
/// order; checkpoints and the optimizer rely on it.
pub trait ParamSet {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn prefixed(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Re-prefixes the entries of a nested parameter set.
pub(crate) fn nest<T>(prefix: &str, items: Vec<(String, T)>) -> Vec<(String, T)> {
    items
        .into_iter()
        .map(|(n, t)| (prefixed(prefix, &n), t))
        .collect()
}

impl ParamSet for LinearParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

impl ParamSet for SwigluParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = nest("gate", self.gate.named_tensors());
        v.extend(nest("up", self.up.named_tensors()));
        v.extend(nest("down", self.down.named_tensors()));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = nest("gate", self.gate.named_tensors_mut());
        v.extend(nest("up", self.up.named_tensors_mut()));
        v.extend(nest("down", self.down.named_tensors_mut()));
        v
    }
}
