//! Dense row-major tensors with storage-precision emulation.
//!
//! Every [`Tensor`] stores its elements as `f64`, but each element is
//! guaranteed to be exactly representable in the tensor's declared
//! [`Precision`]: constructors round on the way in. `F32` and `Bf16Emu`
//! values are exact in `f64`, so widening for computation never loses bits.
//!
//! Random tensors come from [`seeded_fill`], which uses ChaCha8 (a
//! counter-based stream generator with a platform-independent output
//! stream) seeded through `SeedableRng::seed_from_u64`.

use std::fmt;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    F64,
    F32,
    /// bfloat16 values carried in `f32`: 8 exponent bits, 7 mantissa bits.
    Bf16Emu,
}

impl Precision {
    /// Rounds `x` to the nearest value representable in this precision.
    ///
    /// `Bf16Emu` goes through `f32` first, as hardware casts do.
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32 => x as f32 as f64,
            Precision::Bf16Emu => bf16_round(x as f32) as f64,
        }
    }

    /// Whether kernels accumulate in `f64` (true) or `f32` (false) for this
    /// storage precision.
    pub fn computes_in_f64(self) -> bool {
        matches!(self, Precision::F64)
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
            Precision::Bf16Emu => "bf16",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f64" | "fp64" => Ok(Precision::F64),
            "f32" | "fp32" => Ok(Precision::F32),
            "bf16" | "bf16emu" | "bfloat16" => Ok(Precision::Bf16Emu),
            other => Err(Error::InvalidArgument(format!("unknown precision `{other}`"))),
        }
    }
}

/// Round an `f32` to bfloat16 (round-to-nearest, ties-to-even), returned as
/// the `f32` with the low 16 bits cleared.
///
/// Infinities pass through; finite values beyond the bf16 range round to
/// infinity; NaN stays NaN (quieted).
pub fn bf16_round(x: f32) -> f32 {
    let bits = x.to_bits();
    if x.is_nan() {
        return f32::from_bits((bits | 0x0040_0000) & 0xFFFF_0000);
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb) & 0xFFFF_0000;
    f32::from_bits(rounded)
}

/// Spacing between `x` and the next bf16 value away from zero.
pub fn bf16_ulp(x: f32) -> f32 {
    let r = bf16_round(x).abs();
    let next = f32::from_bits(r.to_bits() + 0x1_0000);
    next - r
}

/// Row-major flat offset of a multi-index.
pub fn ravel_index(shape: &[usize], index: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), index.len());
    index
        .iter()
        .zip(shape)
        .fold(0, |acc, (&i, &extent)| {
            debug_assert!(i < extent);
            acc * extent + i
        })
}

/// Inverse of [`ravel_index`].
pub fn unravel_index(shape: &[usize], mut flat: usize) -> Vec<usize> {
    let mut index = vec![0; shape.len()];
    for (slot, &extent) in index.iter_mut().zip(shape).rev() {
        *slot = flat % extent;
        flat /= extent;
    }
    index
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    /// Builds a tensor, rounding every element into `precision`.
    pub fn new(shape: impl Into<Vec<usize>>, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        if precision != Precision::F64 {
            for x in &mut data {
                *x = precision.round(*x);
            }
        }
        Ok(Self {
            shape,
            data,
            precision,
        })
    }

    pub fn from_f32(shape: impl Into<Vec<usize>>, data: &[f32], precision: Precision) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| x as f64).collect(), precision)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>, precision: Precision) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
            precision,
        }
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

    pub fn precision(&self) -> Precision {
        self.precision
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

    /// Extent of the leading (token) axis; 0 for rank-0 tensors.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of elements per leading-axis row.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[ravel_index(&self.shape, index)]
    }

    /// Sets one element, rounding into the tensor's precision.
    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = ravel_index(&self.shape, index);
        self.data[i] = self.precision.round(value);
    }

    pub fn set_flat(&mut self, i: usize, value: f64) {
        self.data[i] = self.precision.round(value);
    }

    /// Converts to another storage precision (one rounding step per element).
    pub fn cast(&self, precision: Precision) -> Self {
        let data = self.data.iter().map(|&x| precision.round(x)).collect();
        Self {
            shape: self.shape.clone(),
            data,
            precision,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data = self.data.iter().map(|&x| self.precision.round(f(x))).collect();
        Self {
            shape: self.shape.clone(),
            data,
            precision: self.precision,
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        Ok(Self { shape, ..self })
    }

    /// Copies leading-axis rows `range` into a new tensor.
    pub fn slice_rows(&self, range: Range<usize>) -> Self {
        let w = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Self {
            shape,
            data: self.data[range.start * w..range.end * w].to_vec(),
            precision: self.precision,
        }
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    expected: first.shape.clone(),
                    actual: p.shape.clone(),
                });
            }
            if p.precision != first.precision {
                return Err(Error::PrecisionMismatch(format!(
                    "{} vs {}",
                    first.precision, p.precision
                )));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self {
            shape,
            data,
            precision: first.precision,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Elementwise `|a - b| <= atol + rtol * |b|` (torch.allclose semantics).
pub fn allclose(a: &Tensor, b: &Tensor, atol: f64, rtol: f64) -> Result<bool> {
    a.check_same_shape(b)?;
    Ok(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(&x, &y)| (x - y).abs() <= atol + rtol * y.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

/// Deterministic random `F64` tensor (ChaCha8, seeded by `seed`).
pub fn seeded_fill(shape: &[usize], seed: u64, distribution: Distribution) -> Result<Tensor> {
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = match distribution {
        Distribution::Uniform { lo, hi } => {
            let dist = rand_distr::Uniform::new(lo, hi)
                .map_err(|e| Error::InvalidArgument(format!("uniform({lo}, {hi}): {e}")))?;
            (0..len).map(|_| dist.sample(&mut rng)).collect()
        }
        Distribution::Normal { mean, std } => {
            let dist = rand_distr::Normal::new(mean, std)
                .map_err(|e| Error::InvalidArgument(format!("normal({mean}, {std}): {e}")))?;
            (0..len).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data, Precision::F64)
}

/// Unit-scale uniform(-1, 1) tensor, the default for kernel tests.
pub fn seeded_unit(shape: &[usize], seed: u64) -> Tensor {
    seeded_fill(shape, seed, Distribution::Uniform { lo: -1.0, hi: 1.0 })
        .expect("uniform(-1, 1) is valid")
}
