//! JPEG-style 8×8 block DCT quantization, used as the compression stand-in.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compression strength; scales the base luminance quantization table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Mild,
    Heavy,
}

impl Quality {
    pub fn table_scale(self) -> f64 {
        match self {
            Quality::Mild => 1.0,
            Quality::Heavy => 8.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Mild => "mild",
            Quality::Heavy => "heavy",
        }
    }
}

/// Baseline JPEG luminance quantization table (ITU-T T.81, Annex K).
pub const LUMA_QUANT: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

const B: usize = 8;

/// Orthonormal DCT-II basis, `m[k*8 + n] = α(k)·cos(π(2n+1)k/16)`.
fn basis() -> &'static [f64; 64] {
    static M: OnceLock<[f64; 64]> = OnceLock::new();
    M.get_or_init(|| {
        let mut m = [0.0; 64];
        for k in 0..B {
            let alpha = if k == 0 { (1.0 / B as f64).sqrt() } else { (2.0 / B as f64).sqrt() };
            for n in 0..B {
                m[k * B + n] = alpha * (PI * (2 * n + 1) as f64 * k as f64 / (2 * B) as f64).cos();
            }
        }
        m
    })
}

/// `M · X · Mᵀ` for a row-major 8×8 block.
pub fn block_dct(block: &[f64; 64]) -> [f64; 64] {
    let m = basis();
    let mut tmp = [0.0; 64];
    for k in 0..B {
        for j in 0..B {
            tmp[k * B + j] = (0..B).map(|n| m[k * B + n] * block[n * B + j]).sum();
        }
    }
    let mut out = [0.0; 64];
    for k in 0..B {
        for l in 0..B {
            out[k * B + l] = (0..B).map(|j| tmp[k * B + j] * m[l * B + j]).sum();
        }
    }
    out
}

/// `Mᵀ · C · M`, the inverse of [`block_dct`].
pub fn block_idct(coeffs: &[f64; 64]) -> [f64; 64] {
    let m = basis();
    let mut tmp = [0.0; 64];
    for n in 0..B {
        for l in 0..B {
            tmp[n * B + l] = (0..B).map(|k| m[k * B + n] * coeffs[k * B + l]).sum();
        }
    }
    let mut out = [0.0; 64];
    for n in 0..B {
        for j in 0..B {
            out[n * B + j] = (0..B).map(|l| tmp[n * B + l] * m[l * B + j]).sum();
        }
    }
    out
}

/// Compresses a `C×W×H` image with values in `[0,1]` at the given quality.
pub fn degrade(image: &Tensor, quality: Quality) -> Result<Tensor> {
    degrade_with_scale(image, quality.table_scale())
}

/// Block codec with an arbitrary multiplier on [`LUMA_QUANT`]. Pixels are
/// mapped to level-shifted 8-bit units (`255·v − 128`) before the transform.
pub fn degrade_with_scale(image: &Tensor, scale: f64) -> Result<Tensor> {
    let (c, w, h) = image.dims3()?;
    if w % B != 0 || h % B != 0 {
        return Err(Error::dim(format!("image side {w}x{h} is not a multiple of {B}")));
    }
    if !(scale > 0.0) {
        return Err(Error::config(format!("quantization scale must be positive, got {scale}")));
    }
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    let mut block = [0.0; 64];
    for ch in 0..c {
        let base = ch * w * h;
        for bx in (0..w).step_by(B) {
            for by in (0..h).step_by(B) {
                for i in 0..B {
                    for j in 0..B {
                        block[i * B + j] = 255.0 * src[base + (bx + i) * h + by + j] - 128.0;
                    }
                }
                let mut coeffs = block_dct(&block);
                for (k, q) in coeffs.iter_mut().zip(LUMA_QUANT.iter()) {
                    let step = q * scale;
                    *k = (*k / step).round() * step;
                }
                let rec = block_idct(&coeffs);
                for i in 0..B {
                    for j in 0..B {
                        out[base + (bx + i) * h + by + j] = ((rec[i * B + j] + 128.0) / 255.0).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}
