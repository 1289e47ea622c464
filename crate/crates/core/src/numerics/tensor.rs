use rand::Rng;
use rand_distr::{Distribution, Normal, StandardUniform};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {:?} needs {} elements, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Samples i.i.d. `N(0, std²)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// Samples i.i.d. uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let u: f64 = StandardUniform.sample(rng);
                lo + (hi - lo) * u
            })
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    /// Interprets a rank-3 tensor as `[C, H, W]`.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                op,
                format!("expected a [C, H, W] tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "Tensor::set_grad",
                format!("grad has {} elements, data has {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }
}
