//! Per-channel 2-D DFT of feature maps and the normalized spectrum-difference map.
//!
//! The transform is the unnormalized forward DFT
//! `F(c,u,v) = Σ_x Σ_y A(c,x,y)·exp(−i2π(ux/W + vy/H))`, stored without a
//! frequency shift: DC sits at `(0,0)` and the highest frequencies near the
//! center of the `W×H` grid.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureTensor, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSpectrum {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    /// Indexed like the source tensor: `c·W·H + u·H + v`.
    pub coeffs: Vec<Complex64>,
}

impl ChannelSpectrum {
    pub fn get(&self, c: usize, u: usize, v: usize) -> Complex64 {
        self.coeffs[(c * self.width + u) * self.height + v]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.width, self.height)
    }

    pub fn real_part(&self) -> Tensor {
        self.part(|z| z.re)
    }

    pub fn imag_part(&self) -> Tensor {
        self.part(|z| z.im)
    }

    fn part(&self, f: impl Fn(&Complex64) -> f64) -> Tensor {
        Tensor::new(
            vec![self.channels, self.width, self.height],
            self.coeffs.iter().map(f).collect(),
        )
        .expect("spectrum dims match coefficient count")
    }

    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|z| z.norm_sqr()).sum()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

/// Forward DFT of every channel using row-column FFTs.
pub fn dft2_per_channel(a: &FeatureTensor) -> Result<ChannelSpectrum> {
    let (c, w, h) = a.dims3()?;
    if c == 0 || w == 0 || h == 0 {
        return Err(Error::dim("zero-sized dimension in DFT input"));
    }
    let mut coeffs: Vec<Complex64> = a.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut coeffs, c, w, h);
    Ok(ChannelSpectrum { channels: c, width: w, height: h, coeffs })
}

/// Transforms `channels` consecutive `w×h` complex planes in place.
pub(crate) fn fft2_in_place(buf: &mut [Complex64], channels: usize, w: usize, h: usize) {
    let row_fft = plan(h);
    let col_fft = plan(w);
    let mut scratch = vec![Complex64::new(0.0, 0.0); row_fft.get_inplace_scratch_len().max(col_fft.get_inplace_scratch_len())];
    let mut column = vec![Complex64::new(0.0, 0.0); w];
    for plane in buf.chunks_exact_mut(w * h).take(channels) {
        // Rows are contiguous runs of length h (the v axis).
        for row in plane.chunks_exact_mut(h) {
            row_fft.process_with_scratch(row, &mut scratch);
        }
        for y in 0..h {
            for x in 0..w {
                column[x] = plane[x * h + y];
            }
            col_fft.process_with_scratch(&mut column, &mut scratch);
            for x in 0..w {
                plane[x * h + y] = column[x];
            }
        }
    }
}

/// Direct double-sum evaluation of the per-channel DFT, O((WH)²) per channel.
pub fn naive_dft2(a: &FeatureTensor) -> Result<ChannelSpectrum> {
    let (c, w, h) = a.dims3()?;
    let src = a.data();
    let mut coeffs = Vec::with_capacity(c * w * h);
    for ch in 0..c {
        let plane = &src[ch * w * h..(ch + 1) * w * h];
        for u in 0..w {
            for v in 0..h {
                let mut acc = Complex64::new(0.0, 0.0);
                for x in 0..w {
                    for y in 0..h {
                        // Reduce the phase modulo the period before scaling to keep it exact for integers.
                        let phase = -2.0
                            * PI
                            * (((u * x) % w) as f64 / w as f64 + ((v * y) % h) as f64 / h as f64);
                        acc += plane[x * h + y] * Complex64::new(phase.cos(), phase.sin());
                    }
                }
                coeffs.push(acc);
            }
        }
    }
    Ok(ChannelSpectrum { channels: c, width: w, height: h, coeffs })
}

/// Normalized magnitude-difference map between two same-shape tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumDiffMap {
    pub width: usize,
    pub height: usize,
    /// `u·H + v` layout, values in `[0, 1]`.
    pub values: Vec<f64>,
}

impl SpectrumDiffMap {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.height + v]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Mean value over the cells selected by `band`.
    pub fn band_mean(&self, band: impl Fn(usize, usize) -> bool) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for u in 0..self.width {
            for v in 0..self.height {
                if band(u, v) {
                    sum += self.get(u, v);
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// ASCII PGM (P2), one image row per `u`, 255 grey levels.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.height, self.width);
        for u in 0..self.width {
            let row: Vec<String> = (0..self.height)
                .map(|v| ((self.get(u, v) * 255.0).round() as u32).min(255).to_string())
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    /// CSV with header `u,v,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("u,v,value\n");
        for u in 0..self.width {
            for v in 0..self.height {
                let _ = writeln!(out, "{u},{v},{}", self.get(u, v));
            }
        }
        out
    }
}

/// How coefficient magnitudes are compared in [`spectrum_diff`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffScale {
    /// `| |F_raw| − |F_degraded| |`.
    Magnitude,
    /// `| ln(1+|F_raw|) − ln(1+|F_degraded|) |`.
    #[default]
    LogMagnitude,
}

/// Per-`(u,v)` channel mean of the coefficient-magnitude difference, divided
/// by its maximum (left all-zero when the inputs have identical magnitudes).
pub fn spectrum_diff(raw: &FeatureTensor, degraded: &FeatureTensor) -> Result<SpectrumDiffMap> {
    spectrum_diff_scaled(raw, degraded, DiffScale::default())
}

pub fn spectrum_diff_scaled(raw: &FeatureTensor, degraded: &FeatureTensor, scale: DiffScale) -> Result<SpectrumDiffMap> {
    raw.check_same_shape(degraded)?;
    let fr = dft2_per_channel(raw)?;
    let fd = dft2_per_channel(degraded)?;
    let (c, w, h) = fr.dims();
    let level = |z: &Complex64| match scale {
        DiffScale::Magnitude => z.norm(),
        DiffScale::LogMagnitude => z.norm().ln_1p(),
    };
    let mut values = vec![0.0; w * h];
    for ch in 0..c {
        for (i, val) in values.iter_mut().enumerate() {
            let k = ch * w * h + i;
            *val += (level(&fr.coeffs[k]) - level(&fd.coeffs[k])).abs();
        }
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        // The channel mean cancels under max-normalization, so it is skipped.
        for v in values.iter_mut() {
            *v /= max;
        }
    }
    Ok(SpectrumDiffMap { width: w, height: h, values })
}

/// Distance of frequency index `k` from DC on a cyclic axis of length `n`.
pub fn cyclic_freq(k: usize, n: usize) -> usize {
    k.min(n - k)
}
