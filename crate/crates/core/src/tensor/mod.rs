//! Dense row-major N-d tensor with reverse-mode automatic differentiation.
//!
//! The element type is generic so the same graph can be evaluated in f64
//! for finite-difference gradient verification; production code uses f32.

pub mod ops;
pub mod tape;

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::io::{BufRead, Write};
use std::iter::Sum;

/// Element type bound shared by the whole numeric stack.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Send + Sync + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting f64 literals into the element type.
#[inline]
pub fn lit<E: Scalar>(x: f64) -> E {
    E::from_f64(x).expect("literal conversion")
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero dimension in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<E>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
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
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn item(&self) -> E {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Same data, new shape. Element count must match (row-major reinterpretation).
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Convert elements to another scalar type (via f64).
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| F::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// ── Tensor file format ────────────────────────────────────────────────
// One UTF-8 JSON header line {"shape":[...],"dtype":"f32","order":"row-major"}
// terminated by '\n', followed by raw little-endian f32 values.

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
    dtype: String,
    order: String,
}

impl Tensor<f32> {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = TensorHeader {
            shape: self.shape.clone(),
            dtype: "f32".into(),
            order: "row-major".into(),
        };
        let mut line = serde_json::to_string(&header)
            .map_err(|e| Error::invalid(format!("header encode: {e}")))?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead, path: &str) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: TensorHeader = serde_json::from_str(line.trim_end()).map_err(|e| {
            Error::Format {
                path: path.into(),
                reason: format!("bad tensor header: {e}"),
            }
        })?;
        if header.dtype != "f32" || header.order != "row-major" {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("unsupported dtype/order {}/{}", header.dtype, header.order),
            });
        }
        let n: usize = header.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(|e| Error::Format {
            path: path.into(),
            reason: format!("truncated tensor data: {e}"),
        })?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(header.shape, data)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let p = path.as_ref();
        let mut f = std::io::BufReader::new(std::fs::File::open(p)?);
        Self::read_from(&mut f, &p.display().to_string())
    }
}
