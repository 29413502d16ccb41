//! `addkd`: dataset generation, training, evaluation and loss inspection.
//!
//! Exit status: 0 on success, 2 on configuration or usage errors, 3 on data
//! errors (unreadable, malformed or mismatched inputs), 1 otherwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use add_core::checkpoint::{load_checkpoint, save_checkpoint};
use add_core::data::{build_dataset, Dataset, Split};
use add_core::experiment::{evaluate, run_ablation, CliConfig, Splits};
use add_core::freq::{freq_loss, freq_weight, FreqAttentionConfig, Reduction};
use add_core::spectral::{dft2_per_channel, spectrum_diff_scaled, DiffScale};
use add_core::suites::gradcheck_suites;
use add_core::swd::{mv_loss_on_tape, normalize_density, sample_projections, DensityTensor, MultiViewConfig, ProjectionSet, SlicePlan};
use add_core::train::{distill_student, train_teacher, DistillConfig};
use add_core::autodiff::Tape;
use add_core::{Error, Result, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "addkd", version, about = "Frequency and multi-view attention distillation on synthetic compressed images")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory from `gen-data`; generated in memory from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides `distill.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a paired raw/degraded dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `gen.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain a teacher on raw images.
    TrainTeacher(RunArgs),
    /// Train a student on degraded images against a frozen teacher.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        /// Teacher checkpoint directory.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Print `dataset,quality,acc,r_at_1,n` for a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = InputArg::Degraded)]
        input: InputArg,
    },
    /// Baseline / FR / MV / FR+MV students over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `ablation.seeds`, e.g. `0,1,2`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Sliced Wasserstein distance between two densities.
    Swd {
        #[arg(long)]
        k: usize,
        /// Bins per projection; half the channel count when absent.
        #[arg(long)]
        g: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// A single fixed direction `c,x,y` instead of sampled ones.
        #[arg(long, value_parser = parse_theta)]
        theta: Option<[f64; 3]>,
        /// Treat inputs as features and normalize them to densities first.
        #[arg(long)]
        from_features: bool,
        /// Write per-projection attention vectors as CSV.
        #[arg(long)]
        vectors: Option<PathBuf>,
        a: PathBuf,
        b: PathBuf,
    },
    /// Frequency attention loss of a student feature against a teacher feature.
    FreqLoss {
        student: PathBuf,
        teacher: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, value_enum, default_value_t = ReductionArg::Sum)]
        reduction: ReductionArg,
        /// Differentiate through the weights.
        #[arg(long)]
        attached: bool,
        /// Exponent clamp; `none` disables it.
        #[arg(long, default_value = "60")]
        clamp: String,
        /// Write the weight map as CSV.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Multi-view loss of a student feature against teacher, positive and negative features.
    MvLoss {
        student: PathBuf,
        teacher: PathBuf,
        #[arg(long)]
        positive: Option<PathBuf>,
        #[arg(long)]
        negative: Option<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        g: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_theta)]
        theta: Option<[f64; 3]>,
        #[arg(long, default_value_t = 100.0)]
        gamma_mv: f64,
        #[arg(long, default_value_t = 50.0)]
        eta_mv: f64,
        #[arg(long, default_value_t = 0.012)]
        margin: f64,
    },
    /// Normalized spectrum difference between a raw and a degraded tensor.
    SpectrumDiff {
        raw: PathBuf,
        degraded: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ScaleArg::LogMagnitude)]
        scale: ScaleArg,
    },
    /// Finite-difference gradient suites.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputArg {
    Raw,
    Degraded,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReductionArg {
    Sum,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Magnitude,
    LogMagnitude,
}

fn parse_theta(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| e.to_string())?;
    let [c, x, y] = parts[..] else {
        return Err(format!("expected three comma-separated numbers, got `{s}`"));
    };
    let norm = (c * c + x * x + y * y).sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err("direction must be nonzero and finite".into());
    }
    Ok([c / norm, x / norm, y / norm])
}

/// Seven significant digits with trailing zeros removed.
fn fmt_value(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-4..=15).contains(&exp) {
        return format!("{x:.6e}");
    }
    let s = format!("{:.*}", (6 - exp).max(0) as usize, x);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Dimension(_) | Error::Degenerate(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, seed } => gen_data(config, &out, seed),
        Command::TrainTeacher(run) => train(&run, None),
        Command::Distill { run, teacher } => train(&run, Some(&teacher)),
        Command::Eval { checkpoint, data, split, input } => eval(&checkpoint, &data, split, input),
        Command::Ablate { config, out, data, seeds } => ablate(config, &out, data, seeds),
        Command::Swd { k, g, seed, theta, from_features, vectors, a, b } => {
            swd_cmd(k, g, seed, theta, from_features, vectors.as_deref(), &a, &b)
        }
        Command::FreqLoss { student, teacher, gamma, reduction, attached, clamp, weights } => {
            freq_cmd(&student, &teacher, gamma, reduction, attached, &clamp, weights.as_deref())
        }
        Command::MvLoss { student, teacher, positive, negative, k, g, seed, theta, gamma_mv, eta_mv, margin } => {
            let cfg = MultiViewConfig { k, g, gamma_mv, eta_mv, margin, seed };
            mv_cmd(&student, &teacher, positive.as_deref(), negative.as_deref(), theta, &cfg)
        }
        Command::SpectrumDiff { raw, degraded, out, scale } => spectrum_cmd(&raw, &degraded, &out, scale),
        Command::Gradcheck { seed } => gradcheck_cmd(seed),
    }
}

fn load_config(path: Option<&Path>) -> Result<CliConfig> {
    match path {
        Some(p) => CliConfig::load(p),
        None => Ok(CliConfig::default()),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_config(out: &Path, cfg: &CliConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    Ok(())
}

/// Loads a dataset directory, or generates the splits when none is given.
/// A loaded dataset's generator settings replace those of the config.
fn splits(cfg: &mut CliConfig, data: Option<&Path>) -> Result<Splits> {
    match data {
        Some(dir) => {
            let ds = Dataset::open(dir)?;
            cfg.gen = ds.manifest.gen.clone();
            cfg.validate()?;
            Splits::load(&ds)
        }
        None => Splits::generate(&cfg.gen),
    }
}

fn gen_data(config: Option<PathBuf>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.gen.seed = s;
    }
    cfg.validate()?;
    let manifest = build_dataset(&cfg.gen, out)?;
    write_config(out, &cfg)?;
    log::info!("wrote {} samples to {}", manifest.samples.len(), out.display());
    Ok(())
}

fn train(run: &RunArgs, teacher_dir: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(run.config.as_deref())?;
    if let Some(s) = run.seed {
        cfg.distill.master_seed = s;
    }
    cfg.validate()?;
    let splits = splits(&mut cfg, run.data.as_deref())?;
    let outcome = match teacher_dir {
        None => train_teacher(&cfg.model, &splits.train, &splits.val, &cfg.teacher.training_config(&cfg.distill))?,
        Some(dir) => {
            let (manifest, teacher) = load_checkpoint(dir)?;
            if manifest.spec != cfg.model {
                return Err(Error::Config(format!("teacher checkpoint {} was trained with a different model spec", dir.display())));
            }
            let c: &DistillConfig = &cfg.distill;
            distill_student(&cfg.model, &splits.train, &splits.val, &teacher, c)?
        }
    };
    save_checkpoint(&run.out, &cfg.model, &outcome.params, outcome.log.best_step, outcome.log.best_val_acc)?;
    fs::write(run.out.join("train_log.csv"), outcome.log.to_csv())?;
    write_config(&run.out, &cfg)?;
    log::info!("best val_acc {:.4} at step {}", outcome.log.best_val_acc, outcome.log.best_step);
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split: SplitArg, input: InputArg) -> Result<()> {
    let (manifest, params) = load_checkpoint(checkpoint)?;
    let ds = Dataset::open(data)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let s = ds.load_split(split)?;
    let (images, quality) = match input {
        InputArg::Raw => (&s.raw, "raw"),
        InputArg::Degraded => (&s.degraded, ds.manifest.gen.quality.as_str()),
    };
    let r = evaluate(&manifest.spec, &params, images, &s.labels)?;
    println!("dataset,quality,acc,r_at_1,n");
    println!("{},{},{},{},{}", ds.name(), quality, r.acc, r.recall_at_1, r.n);
    Ok(())
}

fn ablate(config: Option<PathBuf>, out: &Path, data: Option<PathBuf>, seeds: Option<Vec<u64>>) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seeds {
        cfg.ablation.seeds = s;
    }
    cfg.validate()?;
    let splits = splits(&mut cfg, data.as_deref())?;
    let report = run_ablation(&cfg, &splits)?;
    write_config(out, &cfg)?;
    fs::write(out.join("ablation.csv"), report.table_csv())?;
    fs::write(out.join("runs.csv"), report.runs_csv())?;
    fs::write(out.join("teachers.csv"), report.teachers_csv())?;
    print!("{}", report.table_csv());
    Ok(())
}

fn read_density(path: &Path, from_features: bool) -> Result<DensityTensor> {
    let t = Tensor::read_adt1(path)?;
    if from_features {
        normalize_density(&t)
    } else {
        DensityTensor::from_masses(t)
    }
}

fn projections(k: usize, seed: u64, theta: Option<[f64; 3]>) -> Result<ProjectionSet> {
    match theta {
        Some(t) => Ok(ProjectionSet { seed, directions: vec![t] }),
        None => sample_projections(k, seed).map_err(|e| Error::Config(e.to_string())),
    }
}

#[allow(clippy::too_many_arguments)]
fn swd_cmd(
    k: usize,
    g: Option<usize>,
    seed: u64,
    theta: Option<[f64; 3]>,
    from_features: bool,
    vectors: Option<&Path>,
    a: &Path,
    b: &Path,
) -> Result<()> {
    let pa = read_density(a, from_features)?;
    let pb = read_density(b, from_features)?;
    if pa.dims() != pb.dims() {
        return Err(Error::Dimension(format!("{} is {:?} but {} is {:?}", a.display(), pa.dims(), b.display(), pb.dims())));
    }
    let proj = projections(k, seed, theta)?;
    let g = g.unwrap_or((pa.dims().0 / 2).max(1));
    let plan = SlicePlan::new(pa.dims(), &proj, g).map_err(|e| Error::Config(e.to_string()))?;
    let value = plan.distance(pa.tensor(), pb.tensor())?;
    println!("{}", fmt_value(value));
    if let Some(path) = vectors {
        let va = plan.attention_vectors(pa.tensor())?;
        let vb = plan.attention_vectors(pb.tensor())?;
        let mut csv = String::from("projection,theta_c,theta_x,theta_y,bin,mass_a,mass_b\n");
        for (i, ((t, x), y)) in proj.directions.iter().zip(&va).zip(&vb).enumerate() {
            for (j, (ma, mb)) in x.bin_mass.iter().zip(&y.bin_mass).enumerate() {
                csv += &format!("{i},{},{},{},{j},{ma},{mb}\n", t[0], t[1], t[2]);
            }
        }
        fs::write(path, csv)?;
        let options = json!({
            "command": "swd", "a": a, "b": b, "k": proj.k(), "g": g, "seed": seed,
            "theta": theta, "from_features": from_features, "value": value,
        });
        write_json(&path.with_extension("json"), &options)?;
    }
    Ok(())
}

fn freq_cmd(
    student: &Path,
    teacher: &Path,
    gamma: f64,
    reduction: ReductionArg,
    attached: bool,
    clamp: &str,
    weights: Option<&Path>,
) -> Result<()> {
    let exponent_clamp = match clamp {
        "none" => None,
        s => Some(s.parse::<f64>().map_err(|_| Error::Config(format!("bad clamp `{s}`")))?),
    };
    let cfg = FreqAttentionConfig {
        gamma_fr: gamma,
        weight_detached: !attached,
        reduction: match reduction {
            ReductionArg::Sum => Reduction::Sum,
            ReductionArg::Mean => Reduction::Mean,
        },
        exponent_clamp,
    };
    cfg.validate()?;
    let a_s = Tensor::read_adt1(student)?;
    let a_t = Tensor::read_adt1(teacher)?;
    let value = freq_loss(&a_s, &a_t, &cfg)?;
    println!("{}", fmt_value(value));
    if let Some(path) = weights {
        let w = freq_weight(&dft2_per_channel(&a_s)?, &dft2_per_channel(&a_t)?, &cfg)?;
        fs::write(path, w.to_csv())?;
        let options = json!({
            "command": "freq-loss", "student": student, "teacher": teacher, "config": cfg, "value": value,
        });
        write_json(&path.with_extension("json"), &options)?;
    }
    Ok(())
}

fn mv_cmd(
    student: &Path,
    teacher: &Path,
    positive: Option<&Path>,
    negative: Option<&Path>,
    theta: Option<[f64; 3]>,
    cfg: &MultiViewConfig,
) -> Result<()> {
    cfg.validate()?;
    let a_s = Tensor::read_adt1(student)?;
    let a_t = Tensor::read_adt1(teacher)?;
    let pos = positive.map(Tensor::read_adt1).transpose()?;
    let neg = negative.map(Tensor::read_adt1).transpose()?;
    let dims = a_s.dims3()?;
    let proj = projections(cfg.k, cfg.seed, theta)?;
    let plan = Arc::new(SlicePlan::new(dims, &proj, cfg.resolve_g(dims.0)).map_err(|e| Error::Config(e.to_string()))?);
    let mut tape = Tape::new();
    let s = tape.constant(a_s);
    let loss = mv_loss_on_tape(&mut tape, s, &a_t, pos.as_ref(), neg.as_ref(), &plan, cfg)?;
    println!("{}", fmt_value(tape.value(loss).item()));
    Ok(())
}

fn spectrum_cmd(raw: &Path, degraded: &Path, out: &Path, scale: ScaleArg) -> Result<()> {
    let scale = match scale {
        ScaleArg::Magnitude => DiffScale::Magnitude,
        ScaleArg::LogMagnitude => DiffScale::LogMagnitude,
    };
    let map = spectrum_diff_scaled(&Tensor::read_adt1(raw)?, &Tensor::read_adt1(degraded)?, scale)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("spectrum_diff.pgm"), map.to_pgm())?;
    fs::write(out.join("spectrum_diff.csv"), map.to_csv())?;
    write_json(&out.join("options.json"), &json!({ "command": "spectrum-diff", "raw": raw, "degraded": degraded, "scale": scale }))?;
    Ok(())
}

fn gradcheck_cmd(seed: u64) -> Result<()> {
    let reports = gradcheck_suites(seed)?;
    println!("suite,max_relative_error,num_parameters_checked,step_size,tolerance,status");
    let mut ok = true;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        ok &= r.passed();
        println!(
            "{},{:e},{},{:e},{:e},{status}",
            r.suite, r.report.max_relative_error, r.report.num_parameters_checked, r.report.step_size, r.tolerance
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Error::Evaluation("a gradient check exceeded its tolerance".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_formatting() {
        assert_eq!(fmt_value(0.18000000536), "0.18");
        assert_eq!(fmt_value(218.39260013), "218.3926");
        assert_eq!(fmt_value(27.0000001), "27");
        assert_eq!(fmt_value(0.0), "0");
        assert_eq!(fmt_value(1.5e-7), "1.500000e-7");
    }

    #[test]
    fn theta_is_normalized() {
        assert_eq!(parse_theta("0,0,2").unwrap(), [0.0, 0.0, 1.0]);
        assert!(parse_theta("0,0").is_err());
        assert!(parse_theta("0,0,0").is_err());
    }
}
