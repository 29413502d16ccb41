//! Dense real arrays and the `ADT1` tensor container.
//!
//! Storage is always `f64`. Rank-3 tensors are interpreted as `C×W×H` feature
//! maps in channel-major, row-major order: element `(c, x, y)` lives at
//! `c·W·H + x·H + y`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// A rank-3 `C×W×H` tensor holding backbone activations.
pub type FeatureTensor = Tensor;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a `C×W×H` feature tensor; every dimension must be positive.
    pub fn feature(channels: usize, width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::dim(format!(
                "feature dimensions must be positive, got {channels}x{width}x{height}"
            )));
        }
        Self::new(vec![channels, width, height], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
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
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(C, W, H)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, w, h] => Ok((c, w, h)),
            other => Err(Error::dim(format!("expected a rank-3 C×W×H tensor, got shape {other:?}"))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!("shape mismatch: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the tensor as an `ADT1` file. Only rank-3 tensors are storable.
    pub fn write_adt1(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.encode_adt1(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_adt1(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        Self::decode_adt1(&mut r)
    }

    /// `ADT1` layout: magic `ADT1`, little-endian u32 version=1, C, W, H,
    /// then `C·W·H` little-endian f32 values.
    pub fn encode_adt1(&self, w: &mut impl Write) -> Result<()> {
        let (c, wd, h) = self.dims3()?;
        w.write_all(ADT1_MAGIC)?;
        for field in [ADT1_VERSION, to_u32(c)?, to_u32(wd)?, to_u32(h)?] {
            w.write_all(&field.to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn decode_adt1(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ADT1_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut header = [0u32; 4];
        for field in header.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *field = u32::from_le_bytes(b);
        }
        let [version, c, w, h] = header;
        if version != ADT1_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n = (c as usize)
            .checked_mul(w as usize)
            .and_then(|v| v.checked_mul(h as usize))
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Tensor::feature(c as usize, w as usize, h as usize, data)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

const ADT1_MAGIC: &[u8; 4] = b"ADT1";
const ADT1_VERSION: u32 = 1;

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} does not fit in u32")))
}

/// Primitive elementwise kinds shared by the eager and taped paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Square,
    Scale(f64),
    Exp,
    Relu,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul)
    }
}

/// Eager elementwise evaluation; `b` is required exactly for binary kinds.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (op.is_binary(), b) {
        (true, Some(b)) => a.zip_map(b, |x, y| match op {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            _ => x * y,
        }),
        (true, None) => Err(Error::Contract(format!("{op:?} needs two operands"))),
        (false, Some(_)) => Err(Error::Contract(format!("{op:?} takes a single operand"))),
        (false, None) => Ok(match op {
            ElementwiseOp::Square => a.map(|x| x * x),
            ElementwiseOp::Scale(s) => a.map(|x| s * x),
            ElementwiseOp::Exp => a.map(f64::exp),
            ElementwiseOp::Relu => a.map(|x| x.max(0.0)),
            _ => unreachable!(),
        }),
    }
}

/// Σ values².
pub fn frobenius_norm_sq(a: &Tensor) -> f64 {
    a.data.iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_examples() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let sq = elementwise(ElementwiseOp::Square, &x, None).unwrap();
        assert_eq!(sq.data(), &[1.0, 4.0, 9.0]);

        let zeros = Tensor::zeros(&[3]);
        let sum = elementwise(ElementwiseOp::Add, &x, Some(&zeros)).unwrap();
        assert_eq!(sum, x);

        let e = elementwise(ElementwiseOp::Exp, &Tensor::from_vec(vec![0.0]), None).unwrap();
        assert_eq!(e.data(), &[1.0]);

        let r = elementwise(ElementwiseOp::Relu, &x, None).unwrap();
        assert_eq!(r.data(), &[1.0, 0.0, 3.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(
            elementwise(ElementwiseOp::Mul, &a, Some(&b)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm_sq(&Tensor::from_vec(vec![3.0, 4.0])), 25.0);
        assert_eq!(frobenius_norm_sq(&Tensor::zeros(&[2, 2, 2])), 0.0);
    }

    #[test]
    fn feature_rejects_zero_dims() {
        assert!(matches!(Tensor::feature(0, 2, 2, vec![]), Err(Error::Dimension(_))));
    }

    #[test]
    fn adt1_header_layout() {
        let t = Tensor::feature(1, 1, 2, vec![0.5, -1.0]).unwrap();
        let mut buf = Vec::new();
        t.encode_adt1(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"ADT1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &2u32.to_le_bytes());
        assert_eq!(&buf[20..24], &0.5f32.to_le_bytes());
        assert_eq!(&buf[24..28], &(-1.0f32).to_le_bytes());
        assert_eq!(buf.len(), 28);
    }

    #[test]
    fn adt1_rejects_bad_magic() {
        let bytes = b"ADT2\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            Tensor::decode_adt1(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
