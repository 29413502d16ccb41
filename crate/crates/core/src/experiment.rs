//! Experiment configuration, evaluation and the four-row ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate_split, Dataset, GenConfig, PairedSplit, Split};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, recall_at_k, EvalResult};
use crate::model::{infer, ModelParams, ModelSpec};
use crate::train::{distill_student, train_teacher, DistillConfig};
use crate::tensor::Tensor;

/// Optimizer and schedule overrides for teacher pretraining. Loss settings are
/// irrelevant to the teacher, which trains on cross-entropy alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validations_per_epoch: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            lr: d.lr,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
            validations_per_epoch: d.validations_per_epoch,
        }
    }
}

impl TeacherConfig {
    /// Training settings for the teacher, sharing seed and Adam moments with `base`.
    pub fn training_config(&self, base: &DistillConfig) -> DistillConfig {
        DistillConfig {
            alpha: 0.0,
            beta: 0.0,
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            validations_per_epoch: self.validations_per_epoch,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Master seeds; each gets its own teacher and four students.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: (0..5).collect() }
    }
}

/// Everything a CLI run needs. Unknown keys are rejected at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub gen: GenConfig,
    pub model: ModelSpec,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub ablation: AblationConfig,
}

impl CliConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        if self.model.input_size != self.gen.image_size || self.model.input_channels != 1 {
            return Err(Error::config(format!(
                "model expects {}×{}×{} inputs but images are 1×{}×{}",
                self.model.input_channels, self.model.input_size, self.model.input_size, self.gen.image_size, self.gen.image_size
            )));
        }
        self.teacher.training_config(&self.distill).validate()?;
        self.distill.validate()?;
        if self.ablation.seeds.is_empty() {
            return Err(Error::config("ablation.seeds must not be empty"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Train, validation and test splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: PairedSplit,
    pub val: PairedSplit,
    pub test: PairedSplit,
}

impl Splits {
    pub fn generate(gen: &GenConfig) -> Result<Self> {
        Ok(Self {
            train: generate_split(gen, Split::Train)?,
            val: generate_split(gen, Split::Val)?,
            test: generate_split(gen, Split::Test)?,
        })
    }

    pub fn load(ds: &Dataset) -> Result<Self> {
        Ok(Self { train: ds.load_split(Split::Train)?, val: ds.load_split(Split::Val)?, test: ds.load_split(Split::Test)? })
    }
}

/// Accuracy and R@1 on the pooled features of `images`.
pub fn evaluate(spec: &ModelSpec, params: &ModelParams, images: &[Tensor], labels: &[usize]) -> Result<EvalResult> {
    let inf = infer(spec, params, images, 128)?;
    Ok(EvalResult { acc: accuracy(&inf.logits, labels)?, recall_at_1: recall_at_k(&inf.pooled, labels, 1)?, n: labels.len() })
}

pub const VARIANTS: [&str; 4] = ["baseline", "fr", "mv", "fr+mv"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TeacherRun {
    pub seed: u64,
    pub best_val_acc: f64,
    /// Test accuracy on raw images.
    pub test: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudentRun {
    pub seed: u64,
    pub variant: &'static str,
    pub alpha: f64,
    pub beta: f64,
    pub best_val_acc: f64,
    /// Test metrics on degraded images.
    pub test: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub alpha: f64,
    pub beta: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub r_at_1_mean: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AblationReport {
    pub teachers: Vec<TeacherRun>,
    pub students: Vec<StudentRun>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table_csv(&self) -> String {
        let mut out = String::from("variant,alpha,beta,acc_mean,acc_std,r_at_1_mean,seeds\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{},{},{}", r.variant, r.alpha, r.beta, r.acc_mean, r.acc_std, r.r_at_1_mean, r.seeds);
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("seed,variant,alpha,beta,best_val_acc,acc,r_at_1,n\n");
        for r in &self.students {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.seed, r.variant, r.alpha, r.beta, r.best_val_acc, r.test.acc, r.test.recall_at_1, r.test.n
            );
        }
        out
    }

    pub fn teachers_csv(&self) -> String {
        let mut out = String::from("seed,best_val_acc,raw_acc,raw_r_at_1,n\n");
        for t in &self.teachers {
            let _ = writeln!(out, "{},{},{},{},{}", t.seed, t.best_val_acc, t.test.acc, t.test.recall_at_1, t.test.n);
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Baseline, FR only, MV only and FR+MV students for every seed. Each seed
/// pretrains its own teacher on raw images; students train and are tested on
/// degraded images.
pub fn run_ablation(cfg: &CliConfig, splits: &Splits) -> Result<AblationReport> {
    cfg.validate()?;
    let spec = &cfg.model;
    let (alpha, beta) = (cfg.distill.alpha, cfg.distill.beta);
    let weights = [(0.0, 0.0), (alpha, 0.0), (0.0, beta), (alpha, beta)];
    let mut report = AblationReport::default();
    for &seed in &cfg.ablation.seeds {
        let base = DistillConfig { master_seed: seed, ..cfg.distill.clone() };
        let teacher = train_teacher(spec, &splits.train, &splits.val, &cfg.teacher.training_config(&base))?;
        let test = evaluate(spec, &teacher.params, &splits.test.raw, &splits.test.labels)?;
        log::info!("seed {seed}: teacher val {:.4}, raw test {:.4}", teacher.log.best_val_acc, test.acc);
        report.teachers.push(TeacherRun { seed, best_val_acc: teacher.log.best_val_acc, test });
        for (variant, &(a, b)) in VARIANTS.iter().zip(&weights) {
            let c = DistillConfig { alpha: a, beta: b, ..base.clone() };
            let out = distill_student(spec, &splits.train, &splits.val, &teacher.params, &c)?;
            let test = evaluate(spec, &out.params, &splits.test.degraded, &splits.test.labels)?;
            log::info!("seed {seed}: {variant} test {:.4}", test.acc);
            report.students.push(StudentRun { seed, variant, alpha: a, beta: b, best_val_acc: out.log.best_val_acc, test });
        }
    }
    for (variant, &(a, b)) in VARIANTS.iter().zip(&weights) {
        let runs: Vec<&StudentRun> = report.students.iter().filter(|r| r.variant == *variant).collect();
        let accs: Vec<f64> = runs.iter().map(|r| r.test.acc).collect();
        let (acc_mean, acc_std) = mean_std(&accs);
        let r1: Vec<f64> = runs.iter().map(|r| r.test.recall_at_1).collect();
        report.rows.push(AblationRow {
            variant,
            alpha: a,
            beta: b,
            acc_mean,
            acc_std,
            r_at_1_mean: mean_std(&r1).0,
            seeds: runs.len(),
        });
    }
    Ok(report)
}
