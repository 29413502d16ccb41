//! Standard finite-difference suites run by `addkd gradcheck`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::freq::{freq_loss_on_tape, freq_loss_with_grad, freq_loss_with_weights_on_tape, freq_weight, FreqAttentionConfig, Reduction};
use crate::gradcheck::{finite_difference_check, finite_difference_check_many, GradCheckReport};
use crate::model::{forward, stack_images, ConvBlock, ModelSpec};
use crate::spectral::dft2_per_channel;
use crate::swd::{mv_loss_on_tape, sample_projections, MultiViewConfig, SlicePlan};
use crate::tensor::Tensor;
use crate::train::{total_student_loss, DistillConfig, TeacherBatch};

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 3], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches length")
}

/// Runs every suite on inputs drawn from `seed`.
pub fn gradcheck_suites(seed: u64) -> Result<Vec<SuiteReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![composite(&mut rng)?, freq_detached(&mut rng)?, freq_attached(&mut rng)?, multiview(&mut rng)?, student(&mut rng)?])
}

fn composite(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let x = uniform(rng, [1, 4, 4], -1.0, 1.0);
    let other = uniform(rng, [1, 4, 4], -1.0, 1.0);
    let report = finite_difference_check(
        |tape, v| {
            let o = tape.constant(other.clone());
            let prod = tape.mul(v, o)?;
            let e = tape.exp(prod);
            let r = tape.relu(v);
            let s = tape.add(e, r)?;
            let d = tape.sub(s, o)?;
            let sq = tape.square(d);
            let sc = tape.scale(sq, 0.7);
            Ok(tape.sum(sc))
        },
        &x,
        1e-5,
    )?;
    Ok(SuiteReport { suite: "composite", report, tolerance: 1e-6 })
}

/// With detached weights the loss gradient is that of the surrogate whose
/// weights are frozen at the base point; the report also folds in any gap
/// between the two analytic gradients.
fn freq_detached(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let a_s = uniform(rng, [4, 4, 4], -0.3, 0.3);
    let a_t = uniform(rng, [4, 4, 4], -0.3, 0.3);
    let cfg = FreqAttentionConfig::default();
    let w0 = freq_weight(&dft2_per_channel(&a_s)?, &dft2_per_channel(&a_t)?, &cfg)?;
    let mut report =
        finite_difference_check(|tape, v| freq_loss_with_weights_on_tape(tape, v, &a_t, &w0, Reduction::Sum), &a_s, 1e-5)?;
    let (_, detached) = freq_loss_with_grad(&a_s, &a_t, &cfg)?;
    let mut tape = crate::autodiff::Tape::new();
    let v = tape.leaf(a_s.clone());
    let l = freq_loss_with_weights_on_tape(&mut tape, v, &a_t, &w0, Reduction::Sum)?;
    let surrogate = tape.backward(l)?.wrt(v);
    for (a, b) in detached.data().iter().zip(surrogate.data()) {
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
        report.max_relative_error = report.max_relative_error.max(rel);
    }
    Ok(SuiteReport { suite: "freq-detached", report, tolerance: 1e-3 })
}

fn freq_attached(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let a_s = uniform(rng, [4, 4, 4], -0.3, 0.3);
    let a_t = uniform(rng, [4, 4, 4], -0.3, 0.3);
    let cfg = FreqAttentionConfig { weight_detached: false, ..Default::default() };
    let report = finite_difference_check(|tape, v| freq_loss_on_tape(tape, v, &a_t, &cfg), &a_s, 1e-5)?;
    Ok(SuiteReport { suite: "freq-attached", report, tolerance: 1e-3 })
}

fn multiview(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let [a_s, a_t, pos, neg] = [(); 4].map(|_| uniform(rng, [4, 4, 4], -1.0, 1.0));
    // A large margin keeps the hinge active so every term is exercised.
    let cfg = MultiViewConfig { k: 16, margin: 10.0, ..Default::default() };
    let plan = Arc::new(SlicePlan::new((4, 4, 4), &sample_projections(cfg.k, rng.gen())?, cfg.resolve_g(4))?);
    let report =
        finite_difference_check(|tape, v| mv_loss_on_tape(tape, v, &a_t, Some(&pos), Some(&neg), &plan, &cfg), &a_s, 1e-5)?;
    Ok(SuiteReport { suite: "mv", report, tolerance: 1e-3 })
}

/// End-to-end objective of a one-block model against random teacher features.
fn student(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let spec = ModelSpec {
        input_channels: 1,
        input_size: 8,
        blocks: vec![ConvBlock { out_channels: 4, stride: 1, pool: true }],
        num_classes: 2,
    };
    let params = spec.init(rng.gen())?;
    let images: Vec<Tensor> = (0..4).map(|_| uniform(rng, [1, 8, 8], 0.0, 1.0)).collect();
    let teacher: Vec<Tensor> = (0..4).map(|_| uniform(rng, [4, 4, 4], 0.0, 1.0)).collect();
    let labels = [0, 0, 1, 1];
    let batch = TeacherBatch { features: teacher.iter().collect(), positive: vec![1, 0, 3, 2], negative: vec![2, 3, 0, 1] };
    let mut cfg = DistillConfig { alpha: 0.5, beta: 0.1, ..Default::default() };
    cfg.freq.weight_detached = false;
    cfg.freq.gamma_fr = 0.01;
    cfg.mv.margin = 10.0;
    let plan = Arc::new(SlicePlan::new((4, 4, 4), &sample_projections(4, rng.gen())?, 2)?);
    let x = stack_images(&images.iter().collect::<Vec<_>>())?;
    let probes: Vec<(usize, usize)> = (0..60)
        .map(|_| {
            let t = rng.gen_range(0..params.tensors.len());
            (t, rng.gen_range(0..params.tensors[t].len()))
        })
        .collect();
    let report = finite_difference_check_many(
        |tape, vars| {
            let xv = tape.constant(x.clone());
            let out = forward(tape, &spec, vars, xv)?;
            Ok(total_student_loss(tape, &out, Some(&batch), &labels, Some(&plan), &cfg)?.0)
        },
        &params.tensors,
        1e-6,
        Some(&probes),
    )?;
    Ok(SuiteReport { suite: "student", report, tolerance: 1e-3 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in gradcheck_suites(0).unwrap() {
            assert!(r.passed(), "{r:?}");
            if r.suite != "composite" {
                assert!(r.report.num_parameters_checked >= 50, "{r:?}");
            }
        }
    }
}
