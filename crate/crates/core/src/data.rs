//! Synthetic paired raw/compressed two-class dataset.
//!
//! Real images are smooth random fields. Fakes add a localized checkerboard
//! patch whose energy sits at high spatial frequency, which the block codec
//! largely removes. Every sample draws from its own ChaCha8 stream selected by
//! the sample id, so generation order does not affect the output.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{degrade, Quality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train: 1000, val: 250, test: 250 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub image_size: usize,
    pub num_per_class: SplitCounts,
    pub artifact_amplitude: f64,
    pub artifact_period: usize,
    pub quality: Quality,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_per_class: SplitCounts::default(),
            artifact_amplitude: 0.22,
            artifact_period: 4,
            quality: Quality::Heavy,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::config(format!("image_size must be a positive multiple of 8, got {}", self.image_size)));
        }
        if self.artifact_period < 2 {
            return Err(Error::config(format!("artifact_period must be at least 2, got {}", self.artifact_period)));
        }
        if !(self.artifact_amplitude >= 0.0 && self.artifact_amplitude.is_finite()) {
            return Err(Error::config(format!("artifact_amplitude must be nonnegative, got {}", self.artifact_amplitude)));
        }
        Ok(())
    }

    /// Side length of the checkerboard patch.
    pub fn patch_side(&self) -> usize {
        (self.image_size / 4).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

pub const LABEL_REAL: usize = 0;
pub const LABEL_FAKE: usize = 1;

/// Independent random stream for one sample.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// White noise blurred by a circular Gaussian (σ = S/8), rescaled to `[0,1]`.
pub fn generate_real(cfg: &GenConfig, rng: &mut impl Rng) -> Tensor {
    let s = cfg.image_size;
    let noise: Vec<f64> = (0..s * s).map(|_| rng.sample(StandardNormal)).collect();
    let sigma = s as f64 / 8.0;
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let wrap = |i: isize| i.rem_euclid(s as isize) as usize;
    let mut rows = vec![0.0; s * s];
    for x in 0..s {
        for y in 0..s {
            rows[x * s + y] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * noise[x * s + wrap(y as isize + k as isize - radius)])
                .sum();
        }
    }
    let mut field = vec![0.0; s * s];
    for x in 0..s {
        for y in 0..s {
            field[x * s + y] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * rows[wrap(x as isize + k as isize - radius) * s + y])
                .sum();
        }
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Tensor::new(vec![1, s, s], field.into_iter().map(|v| (v - lo) / span).collect()).expect("square image")
}

/// A real image plus a checkerboard patch; returns `(fake, base)`.
pub fn generate_fake_with_base(cfg: &GenConfig, rng: &mut impl Rng) -> (Tensor, Tensor) {
    let base = generate_real(cfg, rng);
    let s = cfg.image_size;
    let side = cfg.patch_side();
    let x0 = rng.gen_range(0..=s - side);
    let y0 = rng.gen_range(0..=s - side);
    let cell = (cfg.artifact_period / 2).max(1);
    let mut fake = base.clone();
    let data = fake.data_mut();
    for dx in 0..side {
        for dy in 0..side {
            let sign = if (dx / cell + dy / cell).is_multiple_of(2) { 1.0 } else { -1.0 };
            let i = (x0 + dx) * s + y0 + dy;
            data[i] = (data[i] + sign * cfg.artifact_amplitude).clamp(0.0, 1.0);
        }
    }
    (fake, base)
}

pub fn generate_fake(cfg: &GenConfig, rng: &mut impl Rng) -> Tensor {
    generate_fake_with_base(cfg, rng).0
}

/// Values as they survive an `ADT1` round trip.
fn to_f32_precision(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: u64,
    pub raw: Tensor,
    pub degraded: Tensor,
    pub label: usize,
}

/// Generates sample `id`. The raw image is rounded to f32 before compression
/// so that `degrade(stored raw)` reproduces the stored degraded image.
pub fn generate_sample(cfg: &GenConfig, id: u64, label: usize) -> Result<PairedSample> {
    let mut rng = sample_rng(cfg.seed, id);
    let raw = match label {
        LABEL_REAL => generate_real(cfg, &mut rng),
        LABEL_FAKE => generate_fake(cfg, &mut rng),
        other => return Err(Error::data(format!("label {other} is not 0 or 1"))),
    };
    let raw = to_f32_precision(raw);
    let degraded = to_f32_precision(degrade(&raw, cfg.quality)?);
    Ok(PairedSample { id, raw, degraded, label })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: u64,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub gen: GenConfig,
    pub samples: Vec<SampleRecord>,
}

/// Sample ids, labels and splits. Ids run through train, val, then test;
/// labels alternate so every split is exactly balanced.
pub fn sample_records(cfg: &GenConfig) -> Vec<SampleRecord> {
    let counts = cfg.num_per_class;
    let mut out = Vec::with_capacity(2 * (counts.train + counts.val + counts.test));
    let mut id = 0u64;
    for (split, n) in [(Split::Train, counts.train), (Split::Val, counts.val), (Split::Test, counts.test)] {
        for i in 0..2 * n {
            out.push(SampleRecord { id, label: i % 2, split });
            id += 1;
        }
    }
    out
}

/// Raw images, degraded images and labels of one split, in id order.
#[derive(Clone, Debug, Default)]
pub struct PairedSplit {
    pub raw: Vec<Tensor>,
    pub degraded: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl PairedSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Generates one split in memory.
pub fn generate_split(cfg: &GenConfig, split: Split) -> Result<PairedSplit> {
    cfg.validate()?;
    let records: Vec<SampleRecord> = sample_records(cfg).into_iter().filter(|r| r.split == split).collect();
    let samples = records
        .par_iter()
        .map(|r| generate_sample(cfg, r.id, r.label))
        .collect::<Result<Vec<_>>>()?;
    let mut out = PairedSplit::default();
    for s in samples {
        out.raw.push(s.raw);
        out.degraded.push(s.degraded);
        out.labels.push(s.label);
    }
    Ok(out)
}

/// Writes `manifest.json`, `raw/<id>.adt1` and `deg/<id>.adt1` under `dir`.
pub fn build_dataset(cfg: &GenConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("raw"))?;
    fs::create_dir_all(dir.join("deg"))?;
    let records = sample_records(cfg);
    records.par_iter().try_for_each(|r| -> Result<()> {
        let s = generate_sample(cfg, r.id, r.label)?;
        s.raw.write_adt1(dir.join("raw").join(format!("{}.adt1", r.id)))?;
        s.degraded.write_adt1(dir.join("deg").join(format!("{}.adt1", r.id)))?;
        Ok(())
    })?;
    let manifest = DatasetManifest { schema_version: DATASET_SCHEMA_VERSION, gen: cfg.clone(), samples: records };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// A dataset directory produced by [`build_dataset`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::data(format!("cannot read {}/manifest.json: {e}", dir.display())))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::data(format!("bad dataset manifest: {e}")))?;
        if manifest.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::data(format!("unsupported dataset schema {}", manifest.schema_version)));
        }
        Ok(Self { dir, manifest })
    }

    /// Display name: the directory's final component.
    pub fn name(&self) -> String {
        self.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
    }

    pub fn load_split(&self, split: Split) -> Result<PairedSplit> {
        let mut out = PairedSplit::default();
        for r in self.manifest.samples.iter().filter(|r| r.split == split) {
            out.raw.push(Tensor::read_adt1(self.dir.join("raw").join(format!("{}.adt1", r.id)))?);
            out.degraded.push(Tensor::read_adt1(self.dir.join("deg").join(format!("{}.adt1", r.id)))?);
            out.labels.push(r.label);
        }
        if out.is_empty() {
            return Err(Error::data(format!("split `{}` is empty", split.as_str())));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{cyclic_freq, dft2_per_channel};

    fn small_cfg() -> GenConfig {
        GenConfig { num_per_class: SplitCounts { train: 3, val: 2, test: 1 }, ..Default::default() }
    }

    /// Fraction of spectral energy outside the band |u|,|v| ≤ S/8.
    fn high_freq_fraction(img: &Tensor) -> f64 {
        let spec = dft2_per_channel(img).unwrap();
        let s = img.shape()[1];
        let mut hi = 0.0;
        let mut total = 0.0;
        for u in 0..s {
            for v in 0..s {
                let e = spec.get(0, u, v).norm_sqr();
                total += e;
                if cyclic_freq(u, s) > s / 8 || cyclic_freq(v, s) > s / 8 {
                    hi += e;
                }
            }
        }
        hi / total
    }

    #[test]
    fn real_images_in_unit_range_and_deterministic() {
        let cfg = GenConfig::default();
        let a = generate_real(&cfg, &mut sample_rng(5, 9));
        let b = generate_real(&cfg, &mut sample_rng(5, 9));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(a, generate_real(&cfg, &mut sample_rng(5, 10)));
    }

    #[test]
    fn real_images_are_low_frequency() {
        let cfg = GenConfig::default();
        for id in 0..100 {
            let img = generate_real(&cfg, &mut sample_rng(1, id));
            let f = high_freq_fraction(&img);
            assert!(f < 0.10, "sample {id}: {f}");
        }
    }

    #[test]
    fn zero_amplitude_fake_equals_real() {
        let cfg = GenConfig { artifact_amplitude: 0.0, ..Default::default() };
        let fake = generate_fake(&cfg, &mut sample_rng(2, 3));
        let real = generate_real(&cfg, &mut sample_rng(2, 3));
        assert_eq!(fake, real);
    }

    #[test]
    fn checkerboard_is_localized() {
        let cfg = GenConfig::default();
        let (fake, base) = generate_fake_with_base(&cfg, &mut sample_rng(3, 4));
        let s = cfg.image_size;
        let changed: Vec<usize> =
            (0..s * s).filter(|&i| fake.data()[i] != base.data()[i]).collect();
        assert!(!changed.is_empty());
        let xs: Vec<usize> = changed.iter().map(|i| i / s).collect();
        let ys: Vec<usize> = changed.iter().map(|i| i % s).collect();
        let span = |v: &[usize]| v.iter().max().unwrap() - v.iter().min().unwrap() + 1;
        assert!(span(&xs) <= cfg.patch_side());
        assert!(span(&ys) <= cfg.patch_side());
    }

    #[test]
    fn fakes_carry_more_high_frequency_energy() {
        let cfg = GenConfig::default();
        let mut real_hf = 0.0;
        let mut fake_hf = 0.0;
        for id in 0..100 {
            let (fake, base) = generate_fake_with_base(&cfg, &mut sample_rng(4, id));
            let hf = |img: &Tensor| high_freq_fraction(img) * crate::tensor::frobenius_norm_sq(img);
            real_hf += hf(&base);
            fake_hf += hf(&fake);
        }
        assert!(fake_hf >= 2.0 * real_hf, "fake {fake_hf} real {real_hf}");
    }

    #[test]
    fn samples_regenerate_bitwise() {
        let cfg = small_cfg();
        let s = generate_sample(&cfg, 7, LABEL_FAKE).unwrap();
        let again = degrade(&s.raw, cfg.quality).unwrap().map(|v| v as f32 as f64);
        assert_eq!(again, s.degraded);
        assert_eq!(generate_sample(&cfg, 7, LABEL_FAKE).unwrap(), s);
    }

    #[test]
    fn records_are_balanced() {
        let cfg = small_cfg();
        let recs = sample_records(&cfg);
        assert_eq!(recs.len(), 12);
        for (split, n) in [(Split::Train, 3), (Split::Val, 2), (Split::Test, 1)] {
            let in_split: Vec<_> = recs.iter().filter(|r| r.split == split).collect();
            assert_eq!(in_split.iter().filter(|r| r.label == 0).count(), n);
            assert_eq!(in_split.iter().filter(|r| r.label == 1).count(), n);
        }
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig { image_size: 30, ..Default::default() }.validate().is_err());
        assert!(GenConfig { artifact_period: 1, ..Default::default() }.validate().is_err());
        assert!(GenConfig::default().validate().is_ok());
    }

    #[test]
    fn build_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let manifest = build_dataset(&cfg, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, manifest);
        let val = ds.load_split(Split::Val).unwrap();
        let mem = generate_split(&cfg, Split::Val).unwrap();
        assert_eq!(val.raw, mem.raw);
        assert_eq!(val.degraded, mem.degraded);
        assert_eq!(val.labels, mem.labels);
    }

    #[test]
    fn unwritable_target_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        assert!(matches!(build_dataset(&small_cfg(), blocker.join("sub")), Err(Error::Io(_))));
    }
}
