//! Frequency attention distillation loss.
//!
//! Student and teacher backbone features are transformed per channel with the
//! 2-D DFT. Each frequency `(u,v)` gets a weight
//! `w(u,v) = exp(γ · mean_c |F_S(c,u,v) − F_T(c,u,v)|²)` and the loss is
//! `Σ_c Σ_u Σ_v w(u,v) · |F_S(c,u,v) − F_T(c,u,v)|²`.

use std::fmt::Write as _;
use std::sync::Once;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::spectral::{dft2_per_channel, ChannelSpectrum};
use crate::tensor::{FeatureTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreqAttentionConfig {
    pub gamma_fr: f64,
    /// Treat `w(u,v)` as a per-step constant (no gradient through the weights).
    pub weight_detached: bool,
    pub reduction: Reduction,
    /// Upper bound on the exponent `γ·mean_c d`; `None` turns overflow into an error.
    pub exponent_clamp: Option<f64>,
}

impl Default for FreqAttentionConfig {
    fn default() -> Self {
        Self { gamma_fr: 1.0, weight_detached: true, reduction: Reduction::Sum, exponent_clamp: Some(60.0) }
    }
}

impl FreqAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_fr > 0.0 && self.gamma_fr.is_finite()) {
            return Err(Error::config(format!("gamma_fr must be positive, got {}", self.gamma_fr)));
        }
        if let Some(c) = self.exponent_clamp {
            if !(c > 0.0) {
                return Err(Error::config(format!("exponent_clamp must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// `|c1 − c2|²`.
pub fn complex_sq_distance(c1: Complex64, c2: Complex64) -> f64 {
    (c1 - c2).norm_sqr()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub width: usize,
    pub height: usize,
    /// `u·H + v` layout; every entry ≥ 1.
    pub weights: Vec<f64>,
}

impl WeightMap {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.weights[u * self.height + v]
    }

    /// CSV with header `u,v,weight`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("u,v,weight\n");
        for u in 0..self.width {
            for v in 0..self.height {
                let _ = writeln!(out, "{u},{v},{}", self.get(u, v));
            }
        }
        out
    }
}

static CLAMP_WARNING: Once = Once::new();

fn warn_clamped(u: usize, v: usize, exponent: f64, limit: f64) {
    CLAMP_WARNING.call_once(|| {
        log::warn!(
            "frequency weight exponent {exponent:.3e} at (u={u}, v={v}) clamped to {limit}; \
             further clamps are logged at debug level"
        );
    });
    log::debug!("frequency weight exponent {exponent:.3e} at (u={u}, v={v}) clamped to {limit}");
}

/// Turns the channel-summed discrepancy `Σ_c d(u,v)` into weights, applying
/// the clamp and the overflow check.
fn weights_from_discrepancy(dsum: &[f64], channels: usize, height: usize, cfg: &FreqAttentionConfig) -> Result<Vec<f64>> {
    let scale = cfg.gamma_fr / channels as f64;
    dsum.iter()
        .enumerate()
        .map(|(i, &d)| {
            let (u, v) = (i / height, i % height);
            let mut exponent = scale * d;
            if let Some(limit) = cfg.exponent_clamp {
                if exponent > limit {
                    warn_clamped(u, v, exponent, limit);
                    exponent = limit;
                }
            }
            let w = exponent.exp();
            if w.is_finite() {
                Ok(w)
            } else {
                Err(Error::Overflow { u, v, exponent })
            }
        })
        .collect()
}

/// Attention weights `w(u,v)` from two spectra.
pub fn freq_weight(fs: &ChannelSpectrum, ft: &ChannelSpectrum, cfg: &FreqAttentionConfig) -> Result<WeightMap> {
    if fs.dims() != ft.dims() {
        return Err(Error::dim(format!("spectrum shapes differ: {:?} vs {:?}", fs.dims(), ft.dims())));
    }
    let (c, w, h) = fs.dims();
    let mut dsum = vec![0.0; w * h];
    for ch in 0..c {
        for (i, acc) in dsum.iter_mut().enumerate() {
            let k = ch * w * h + i;
            *acc += complex_sq_distance(fs.coeffs[k], ft.coeffs[k]);
        }
    }
    Ok(WeightMap { width: w, height: h, weights: weights_from_discrepancy(&dsum, c, h, cfg)? })
}

/// Records the frequency loss of student node `a_s` against the frozen teacher `a_t`.
pub fn freq_loss_on_tape(tape: &mut Tape, a_s: Var, a_t: &FeatureTensor, cfg: &FreqAttentionConfig) -> Result<Var> {
    let (dsum, dims) = channel_discrepancy(tape, a_s, a_t)?;
    let (c, w, h) = dims;
    let loss = if cfg.weight_detached {
        let weights = weights_from_discrepancy(tape.value(dsum).data(), c, h, cfg)?;
        let wv = tape.constant(Tensor::new(vec![w, h], weights)?);
        let weighted = tape.mul(wv, dsum)?;
        tape.sum(weighted)
    } else {
        // Overflow check on the concrete values before building the graph.
        weights_from_discrepancy(tape.value(dsum).data(), c, h, cfg)?;
        let mut exponent = tape.scale(dsum, cfg.gamma_fr / c as f64);
        if let Some(limit) = cfg.exponent_clamp {
            exponent = tape.clamp_max(exponent, limit);
        }
        let wv = tape.exp(exponent);
        let weighted = tape.mul(wv, dsum)?;
        tape.sum(weighted)
    };
    Ok(reduce(tape, loss, cfg.reduction, c * w * h))
}

/// Loss with externally fixed weights, `Σ_uv w(u,v) · Σ_c d(u,v)`.
pub fn freq_loss_with_weights_on_tape(
    tape: &mut Tape,
    a_s: Var,
    a_t: &FeatureTensor,
    weights: &WeightMap,
    reduction: Reduction,
) -> Result<Var> {
    let (dsum, (c, w, h)) = channel_discrepancy(tape, a_s, a_t)?;
    if (weights.width, weights.height) != (w, h) {
        return Err(Error::dim(format!(
            "weight map {}x{} does not match spectrum {w}x{h}",
            weights.width, weights.height
        )));
    }
    let wv = tape.constant(Tensor::new(vec![w, h], weights.weights.clone())?);
    let weighted = tape.mul(wv, dsum)?;
    let loss = tape.sum(weighted);
    Ok(reduce(tape, loss, reduction, c * w * h))
}

fn reduce(tape: &mut Tape, loss: Var, reduction: Reduction, n: usize) -> Var {
    match reduction {
        Reduction::Sum => loss,
        Reduction::Mean => tape.scale(loss, 1.0 / n as f64),
    }
}

/// `Σ_c |F_S − F_T|²` as a `W×H` node.
fn channel_discrepancy(tape: &mut Tape, a_s: Var, a_t: &FeatureTensor) -> Result<(Var, (usize, usize, usize))> {
    let dims = tape.value(a_s).dims3()?;
    if a_t.dims3()? != dims {
        return Err(Error::dim(format!(
            "student {:?} and teacher {:?} shapes differ",
            tape.value(a_s).shape(),
            a_t.shape()
        )));
    }
    let ft = dft2_per_channel(a_t)?;
    let re_s = tape.dft2_re(a_s)?;
    let im_s = tape.dft2_im(a_s)?;
    let re_t = tape.constant(ft.real_part());
    let im_t = tape.constant(ft.imag_part());
    let dre = tape.sub(re_s, re_t)?;
    let dim = tape.sub(im_s, im_t)?;
    let sq_re = tape.square(dre);
    let sq_im = tape.square(dim);
    let dist = tape.add(sq_re, sq_im)?;
    Ok((tape.sum_channels(dist)?, dims))
}

/// Loss value.
pub fn freq_loss(a_s: &FeatureTensor, a_t: &FeatureTensor, cfg: &FreqAttentionConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(a_s.clone());
    let loss = freq_loss_on_tape(&mut tape, s, a_t, cfg)?;
    Ok(tape.value(loss).item())
}

/// Loss value and `∂L/∂a_s`.
pub fn freq_loss_with_grad(a_s: &FeatureTensor, a_t: &FeatureTensor, cfg: &FreqAttentionConfig) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let s = tape.leaf(a_s.clone());
    let loss = freq_loss_on_tape(&mut tape, s, a_t, cfg)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.wrt(s)))
}
