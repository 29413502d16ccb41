use std::fs;
use std::path::Path;

use add_core::codec::{degrade, Quality};
use add_core::data::{build_dataset, generate_fake_with_base, generate_sample, sample_rng, Dataset, GenConfig, Split, SplitCounts};
use proptest::prelude::*;

fn small() -> GenConfig {
    GenConfig { num_per_class: SplitCounts { train: 4, val: 2, test: 2 }, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn degraded_pairs_bitwise_with_raw(seed in any::<u64>(), id in 0u64..1000, label in 0usize..2, heavy in any::<bool>()) {
        let cfg = GenConfig { seed, quality: if heavy { Quality::Heavy } else { Quality::Mild }, ..Default::default() };
        let s = generate_sample(&cfg, id, label).unwrap();
        prop_assert!(s.raw.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = degrade(&s.raw, cfg.quality).unwrap().map(|v| v as f32 as f64);
        prop_assert_eq!(&again, &s.degraded);
        prop_assert_eq!(generate_sample(&cfg, id, label).unwrap(), s);
    }

    #[test]
    fn checkerboard_stays_inside_its_patch(seed in any::<u64>(), amp in 0.0f64..0.5, period in 2usize..6) {
        let cfg = GenConfig { seed, artifact_amplitude: amp, artifact_period: period, ..Default::default() };
        let (fake, base) = generate_fake_with_base(&cfg, &mut sample_rng(seed, 1));
        let s = cfg.image_size;
        let changed: Vec<usize> = (0..s * s).filter(|&i| fake.data()[i] != base.data()[i]).collect();
        if let (Some(&first), Some(&last)) = (changed.first(), changed.last()) {
            let rows: Vec<usize> = changed.iter().map(|i| i / s).collect();
            let cols: Vec<usize> = changed.iter().map(|i| i % s).collect();
            let side = cfg.patch_side();
            prop_assert!(rows.iter().max().unwrap() - rows.iter().min().unwrap() < side);
            prop_assert!(cols.iter().max().unwrap() - cols.iter().min().unwrap() < side);
            prop_assert!(first <= last);
        }
        prop_assert!(fake.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["raw", "deg"] {
        for e in fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            out.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), fs::read(&p).unwrap()));
        }
    }
    out.push(("manifest.json".into(), fs::read(dir.join("manifest.json")).unwrap()));
    out.sort();
    out
}

#[test]
fn rebuild_is_identical_and_balanced() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_dataset(&small(), a.path()).unwrap();
    build_dataset(&small(), b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let ds = Dataset::open(a.path()).unwrap();
    for (split, n) in [(Split::Train, 4), (Split::Val, 2), (Split::Test, 2)] {
        let s = ds.load_split(split).unwrap();
        assert_eq!(s.labels.iter().filter(|&&l| l == 0).count(), n);
        assert_eq!(s.labels.iter().filter(|&&l| l == 1).count(), n);
        for (raw, deg) in s.raw.iter().zip(&s.degraded) {
            assert_eq!(&degrade(raw, Quality::Heavy).unwrap().map(|v| v as f32 as f64), deg);
        }
    }
}

#[test]
fn default_scale_counts() {
    let cfg = GenConfig::default();
    let recs = add_core::data::sample_records(&cfg);
    for (split, n) in [(Split::Train, 1000), (Split::Val, 250), (Split::Test, 250)] {
        for label in 0..2 {
            assert_eq!(recs.iter().filter(|r| r.split == split && r.label == label).count(), n);
        }
    }
}
