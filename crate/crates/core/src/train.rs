//! Teacher pretraining and student distillation.
//!
//! The student objective is `CE + α·mean_i L_FR(i) + β·mean_i L_MV(i)`, with
//! per-sample distillation terms computed between the student's backbone
//! features on the degraded image and the frozen teacher's features on the
//! raw image.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::PairedSplit;
use crate::error::{Error, Result};
use crate::freq::{freq_loss_on_tape, FreqAttentionConfig};
use crate::metrics::accuracy;
use crate::model::{forward, infer, stack_images, ForwardOutput, ModelParams, ModelSpec};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::swd::{attention_targets, mv_loss_with_targets_on_tape, sample_projections, MultiViewConfig, SlicePlan};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub freq: FreqAttentionConfig,
    pub mv: MultiViewConfig,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validations_per_epoch: usize,
    pub master_seed: u64,
    pub student_init: StudentInit,
}

/// Starting point of a distilled student.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentInit {
    /// Fresh random weights derived from the master seed.
    #[default]
    Random,
    /// The teacher's own starting weights (same seed, before training).
    Shared,
    /// A copy of the frozen teacher's weights.
    Teacher,
}

impl Default for DistillConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            alpha: 1.0,
            beta: 20.0,
            freq: FreqAttentionConfig::default(),
            mv: MultiViewConfig::default(),
            lr: adam.lr,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 32,
            max_epochs: 30,
            patience: 10,
            validations_per_epoch: 10,
            master_seed: 0,
            student_init: StudentInit::Random,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("alpha and beta must be nonnegative, got {} and {}", self.alpha, self.beta)));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.batch_size < 4 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::config(format!("batch_size must be even and at least 4, got {}", self.batch_size)));
        }
        if self.max_epochs == 0 || self.validations_per_epoch == 0 {
            return Err(Error::config("max_epochs and validations_per_epoch must be positive"));
        }
        self.freq.validate()?;
        self.mv.validate()?;
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    fn uses_teacher(&self) -> bool {
        self.alpha != 0.0 || self.beta != 0.0
    }
}

/// SplitMix64 finalizer over `master ⊕ tag`, used to derive independent seeds.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_TEACHER_INIT: u64 = 1;
const TAG_STUDENT_INIT: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_PAIRS: u64 = 4;
const TAG_PROJECTIONS: u64 = 5;

/// Scalar values of the objective's parts for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub fr: f64,
    pub mv: f64,
}

/// Frozen teacher features for one batch, aligned with the student's samples.
/// `positive[i]` and `negative[i]` index the in-batch partners of sample `i`.
pub struct TeacherBatch<'a> {
    pub features: Vec<&'a Tensor>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

/// Records `CE + α·mean L_FR + β·mean L_MV`. Distillation terms whose weight is
/// zero are not built and report zero. `plan` is required when `β > 0`.
pub fn total_student_loss(
    tape: &mut Tape,
    student: &ForwardOutput,
    teacher: Option<&TeacherBatch<'_>>,
    labels: &[usize],
    plan: Option<&Arc<SlicePlan>>,
    cfg: &DistillConfig,
) -> Result<(Var, LossParts)> {
    let ce = tape.softmax_cross_entropy(student.logits, labels)?;
    let mut parts = LossParts { ce: tape.value(ce).item(), ..Default::default() };
    let mut total = ce;
    if cfg.uses_teacher() {
        let teacher = teacher.ok_or_else(|| Error::config("distillation weights are set but no teacher features were given"))?;
        let n = labels.len();
        if teacher.features.len() != n || teacher.positive.len() != n || teacher.negative.len() != n {
            return Err(Error::dim(format!("teacher batch does not match {n} student samples")));
        }
        if teacher.positive.iter().chain(&teacher.negative).any(|&j| j >= n) {
            return Err(Error::dim("partner index outside the batch"));
        }
        let targets = match (cfg.beta != 0.0, plan) {
            (true, Some(plan)) => teacher
                .features
                .iter()
                .map(|t| attention_targets(t, plan))
                .collect::<Result<Vec<_>>>()?,
            (true, None) => return Err(Error::config("beta > 0 needs a slice plan")),
            (false, _) => Vec::new(),
        };
        let mut fr_sum: Option<Var> = None;
        let mut mv_sum: Option<Var> = None;
        let accumulate = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| -> Result<()> {
            *acc = Some(match *acc {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
            Ok(())
        };
        for i in 0..n {
            let a_s = tape.select(student.features, i)?;
            if cfg.alpha != 0.0 {
                let fr = freq_loss_on_tape(tape, a_s, teacher.features[i], &cfg.freq)?;
                accumulate(tape, &mut fr_sum, fr)?;
            }
            if cfg.beta != 0.0 {
                let pair = (&targets[teacher.positive[i]], &targets[teacher.negative[i]]);
                let plan = plan.expect("checked above");
                let mv = mv_loss_with_targets_on_tape(tape, a_s, &targets[i], Some(pair), plan, &cfg.mv)?;
                accumulate(tape, &mut mv_sum, mv)?;
            }
        }
        for (sum, weight, slot) in [(fr_sum, cfg.alpha, &mut parts.fr), (mv_sum, cfg.beta, &mut parts.mv)] {
            if let Some(s) = sum {
                let mean = tape.scale(s, 1.0 / n as f64);
                *slot = tape.value(mean).item();
                let weighted = tape.scale(mean, weight);
                total = tape.add(total, weighted)?;
            }
        }
    }
    parts.total = tape.value(total).item();
    Ok((total, parts))
}

/// Draws, for every sample, a same-class partner other than itself and an
/// opposite-class partner, uniformly from the batch.
pub fn sample_pairs(labels: &[usize], rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let same: Vec<usize> = (0..labels.len()).filter(|&j| j != i && labels[j] == l).collect();
            let other: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != l).collect();
            match (same.choose(rng), other.choose(rng)) {
                (Some(&p), Some(&q)) => Ok((p, q)),
                _ => Err(Error::data(format!("batch has no positive or negative partner for sample {i}"))),
            }
        })
        .collect()
}

/// One epoch of class-stratified batches: each batch takes half its samples
/// from each class. Batches with fewer than two samples per class are dropped.
pub fn stratified_batches(labels: &[usize], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::data(format!("label {l} is not 0 or 1")))?
            .push(i);
    }
    for c in by_class.iter_mut() {
        c.shuffle(rng);
    }
    let half = batch_size / 2;
    let batches: Vec<Vec<usize>> = by_class[0]
        .chunks(half)
        .zip(by_class[1].chunks(half))
        .filter(|(a, b)| a.len() >= 2 && b.len() >= 2)
        .map(|(a, b)| a.iter().chain(b).copied().collect())
        .collect();
    if batches.is_empty() {
        return Err(Error::data("training split cannot fill a class-stratified batch"));
    }
    Ok(batches)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub epoch: usize,
    pub ce: f64,
    pub fr: f64,
    pub mv: f64,
    pub total: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    /// Step of the kept checkpoint.
    pub best_step: u64,
    pub best_val_acc: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,ce,fr,mv,total,val_acc\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{},{},{}", r.step, r.epoch, r.ce, r.fr, r.mv, r.total, r.val_acc);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters.
    pub params: ModelParams,
    pub log: TrainLog,
}

const EVAL_CHUNK: usize = 128;

/// Cross-entropy training on raw images.
pub fn train_teacher(spec: &ModelSpec, train: &PairedSplit, val: &PairedSplit, cfg: &DistillConfig) -> Result<TrainOutcome> {
    let ce_only = DistillConfig { alpha: 0.0, beta: 0.0, ..cfg.clone() };
    let init = spec.init(derive_seed(cfg.master_seed, TAG_TEACHER_INIT))?;
    run(spec, init, (&train.raw, &train.labels), (&val.raw, &val.labels), None, &ce_only)
}

/// Trains a student on degraded images against a frozen teacher.
pub fn distill_student(
    spec: &ModelSpec,
    train: &PairedSplit,
    val: &PairedSplit,
    teacher: &ModelParams,
    cfg: &DistillConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let teacher_feats = if cfg.uses_teacher() {
        if train.raw.is_empty() {
            return Err(Error::data("training split is empty"));
        }
        Some(infer(spec, teacher, &train.raw, EVAL_CHUNK)?.features)
    } else {
        None
    };
    let init = match cfg.student_init {
        StudentInit::Random => spec.init(derive_seed(cfg.master_seed, TAG_STUDENT_INIT))?,
        StudentInit::Shared => spec.init(derive_seed(cfg.master_seed, TAG_TEACHER_INIT))?,
        StudentInit::Teacher => {
            teacher.check(spec)?;
            teacher.clone()
        }
    };
    run(
        spec,
        init,
        (&train.degraded, &train.labels),
        (&val.degraded, &val.labels),
        teacher_feats.as_deref(),
        cfg,
    )
}

fn run(
    spec: &ModelSpec,
    mut params: ModelParams,
    (train_x, train_y): (&[Tensor], &[usize]),
    (val_x, val_y): (&[Tensor], &[usize]),
    teacher_feats: Option<&[Tensor]>,
    cfg: &DistillConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if train_x.is_empty() || val_x.is_empty() {
        return Err(Error::data("training and validation splits must be non-empty"));
    }
    let (fc, fw, fh) = spec.feature_dims()?;
    let adam = cfg.adam();
    let mut state = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, TAG_SHUFFLE));
    let mut pair_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, TAG_PAIRS));
    let proj_base = derive_seed(cfg.master_seed, TAG_PROJECTIONS);
    let g = cfg.mv.resolve_g(fc);

    let mut log = TrainLog { best_val_acc: f64::NEG_INFINITY, ..Default::default() };
    let mut best = params.clone();
    let mut stale = 0usize;
    let mut step = 0u64;
    let mut window = (LossParts::default(), 0usize);

    'epochs: for epoch in 0..cfg.max_epochs {
        let batches = stratified_batches(train_y, cfg.batch_size, &mut shuffle_rng)?;
        let nb = batches.len();
        for (b, batch) in batches.iter().enumerate() {
            let labels: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let images: Vec<&Tensor> = batch.iter().map(|&i| &train_x[i]).collect();
            let mut tape = Tape::new();
            let pv: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            let x = tape.constant(stack_images(&images)?);
            let out = forward(&mut tape, spec, &pv, x)?;

            let teacher = match teacher_feats {
                Some(feats) => {
                    let pairs = sample_pairs(&labels, &mut pair_rng)?;
                    Some(TeacherBatch {
                        features: batch.iter().map(|&i| &feats[i]).collect(),
                        positive: pairs.iter().map(|&(p, _)| p).collect(),
                        negative: pairs.iter().map(|&(_, q)| q).collect(),
                    })
                }
                None => None,
            };
            let plan = if cfg.beta != 0.0 {
                let proj = sample_projections(cfg.mv.k, derive_seed(proj_base, step))?;
                Some(Arc::new(SlicePlan::new((fc, fw, fh), &proj, g)?))
            } else {
                None
            };
            let (loss, parts) = total_student_loss(&mut tape, &out, teacher.as_ref(), &labels, plan.as_ref(), cfg)?;
            let grads = tape.backward(loss)?;
            let gv: Vec<Tensor> = pv.iter().map(|&v| grads.wrt(v)).collect();
            adam_step(&mut params, &gv, &mut state, &adam)?;
            step += 1;
            window.0.total += parts.total;
            window.0.ce += parts.ce;
            window.0.fr += parts.fr;
            window.0.mv += parts.mv;
            window.1 += 1;

            let due = (b + 1) * cfg.validations_per_epoch / nb > b * cfg.validations_per_epoch / nb;
            if due {
                let inf = infer(spec, &params, val_x, EVAL_CHUNK)?;
                let val_acc = accuracy(&inf.logits, val_y)?;
                let k = window.1 as f64;
                log.records.push(TrainRecord {
                    step,
                    epoch,
                    ce: window.0.ce / k,
                    fr: window.0.fr / k,
                    mv: window.0.mv / k,
                    total: window.0.total / k,
                    val_acc,
                });
                window = (LossParts::default(), 0);
                log::debug!("step {step} epoch {epoch} val_acc {val_acc:.4}");
                if val_acc > log.best_val_acc {
                    log.best_val_acc = val_acc;
                    log.best_step = step;
                    best = params.clone();
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        break 'epochs;
                    }
                }
            }
        }
    }
    log::info!("training stopped at step {step}; best val_acc {:.4} at step {}", log.best_val_acc, log.best_step);
    Ok(TrainOutcome { params: best, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvBlock;

    #[test]
    fn stratified_batches_are_balanced_and_disjoint() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = stratified_batches(&labels, 8, &mut rng).unwrap();
        assert_eq!(batches.len(), 5);
        let mut seen = [false; 40];
        for b in &batches {
            assert_eq!(b.iter().filter(|&&i| labels[i] == 0).count(), 4);
            for &i in b {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
    }

    #[test]
    fn single_class_split_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(stratified_batches(&[0; 10], 4, &mut rng), Err(Error::Data(_))));
    }

    #[test]
    fn pairs_respect_classes_and_exclude_self() {
        let labels = [0, 1, 0, 1, 0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            for (i, (p, q)) in sample_pairs(&labels, &mut rng).unwrap().into_iter().enumerate() {
                assert_ne!(p, i);
                assert_eq!(labels[p], labels[i]);
                assert_ne!(labels[q], labels[i]);
            }
        }
        assert!(matches!(sample_pairs(&[0, 1, 1], &mut rng), Err(Error::Data(_))));
    }

    #[test]
    fn derived_seeds_differ() {
        let s: Vec<u64> = (0..100).map(|t| derive_seed(7, t)).collect();
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), s.len());
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_channels: 1,
            input_size: 8,
            blocks: vec![ConvBlock { out_channels: 4, stride: 1, pool: true }],
            num_classes: 2,
        }
    }

    #[test]
    fn zero_weights_reduce_to_cross_entropy() {
        let spec = tiny_spec();
        let params = spec.init(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let imgs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::feature(1, 8, 8, (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let labels = [0, 1, 0, 1];
        let mut tape = Tape::new();
        let pv: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let x = tape.constant(stack_images(&refs).unwrap());
        let out = forward(&mut tape, &spec, &pv, x).unwrap();
        let cfg = DistillConfig { alpha: 0.0, beta: 0.0, ..Default::default() };
        let (loss, parts) = total_student_loss(&mut tape, &out, None, &labels, None, &cfg).unwrap();
        let ce = tape.softmax_cross_entropy(out.logits, &labels).unwrap();
        assert_eq!(tape.value(loss).item(), tape.value(ce).item());
        assert_eq!(parts.total, parts.ce);
    }

    #[test]
    fn bad_label_is_data_error() {
        let spec = tiny_spec();
        let params = spec.init(1).unwrap();
        let mut tape = Tape::new();
        let pv: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let img = Tensor::zeros(&[1, 8, 8]);
        let x = tape.constant(stack_images(&[&img]).unwrap());
        let out = forward(&mut tape, &spec, &pv, x).unwrap();
        let cfg = DistillConfig { alpha: 0.0, beta: 0.0, ..Default::default() };
        assert!(matches!(total_student_loss(&mut tape, &out, None, &[2], None, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn student_objective_matches_finite_differences() {
        let spec = tiny_spec();
        let params = spec.init(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let imgs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::feature(1, 8, 8, (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let labels = [0, 0, 1, 1];
        let teacher: Vec<Tensor> = (0..4)
            .map(|_| Tensor::feature(4, 4, 4, (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let batch = TeacherBatch { features: teacher.iter().collect(), positive: vec![1, 0, 3, 2], negative: vec![2, 3, 0, 1] };
        let mut cfg = DistillConfig { alpha: 0.5, beta: 0.1, ..Default::default() };
        cfg.freq.weight_detached = false;
        cfg.freq.gamma_fr = 0.01;
        cfg.mv.margin = 10.0;
        let plan = Arc::new(SlicePlan::new((4, 4, 4), &sample_projections(4, 3).unwrap(), 2).unwrap());
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let x = stack_images(&refs).unwrap();
        let probes: Vec<(usize, usize)> = (0..60)
            .map(|_| {
                let t = rng.gen_range(0..params.tensors.len());
                (t, rng.gen_range(0..params.tensors[t].len()))
            })
            .collect();
        let report = crate::gradcheck::finite_difference_check_many(
            |tape, vars| {
                let xv = tape.constant(x.clone());
                let out = forward(tape, &spec, vars, xv)?;
                Ok(total_student_loss(tape, &out, Some(&batch), &labels, Some(&plan), &cfg)?.0)
            },
            &params.tensors,
            1e-6,
            Some(&probes),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-3, "{report:?}");
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        for bad in [
            DistillConfig { alpha: -1.0, ..Default::default() },
            DistillConfig { patience: 0, ..Default::default() },
            DistillConfig { batch_size: 7, ..Default::default() },
            DistillConfig { lr: 0.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
