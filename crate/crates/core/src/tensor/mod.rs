//! Dense float64 tensors, a reverse-mode tape and an SGD optimizer.
//!
//! Values live in [`Tensor`]; differentiable computation is recorded on a
//! [`Graph`] and replayed backwards by [`Graph::backward`]. Shapes never
//! broadcast: every elementwise op requires identical shapes.

mod kernels;
mod sgd;
mod tape;

pub use kernels::{conv_output_size, gemm, gemm_nt, gemm_tn};
pub use sgd::{Sgd, SgdConfig};
pub use tape::{FeatureRegion, Graph, Var};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded generator used everywhere randomness is needed.
pub type Rng64 = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Initial contents for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor needs at least one dimension"));
    }
    if let Some(d) = shape.iter().find(|&&d| d == 0) {
        return Err(Error::shape(format!(
            "dimension {d} in {shape:?} must be positive"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn create(shape: &[usize], fill: Fill) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = match fill {
            Fill::Zeros => vec![0.0; len],
            Fill::Constant(c) => vec![c; len],
            Fill::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::Config(format!(
                        "uniform fill needs lo < hi, got [{lo}, {hi})"
                    )));
                }
                let mut rng = seeded_rng(seed);
                (0..len).map(|_| rng.gen_range(lo..hi)).collect()
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Fill::Zeros)
    }

    /// Uniform values in `[lo, hi)` drawn from an existing generator.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng64) -> Result<Self> {
        let len = check_shape(shape)?;
        if !(lo < hi) {
            return Err(Error::Config(format!(
                "uniform fill needs lo < hi, got [{lo}, {hi})"
            )));
        }
        let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// He-style uniform initialization with bound `sqrt(6 / fan_in)`.
    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng64) -> Result<Self> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        Self::uniform(shape, -bound, bound, rng)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at a multi-dimensional index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, d) in index.iter().zip(&self.shape) {
            flat = flat * d + i;
        }
        self.data[flat]
    }
}
