mod common;

use common::*;
use fewshot_core::dataset::{base_holdout_split, generate, generate_with_latents, Dataset, SynthConfig};
use fewshot_core::error::Error;
use fewshot_core::model::Checkpoint;
use fewshot_core::rng::{stream, Stream};

#[test]
fn latent_nearest_center_oracle_is_accurate() {
    let cfg = SynthConfig::default();
    assert_eq!((cfg.n_base, cfg.n_val, cfg.n_test, cfg.examples_per_category), (64, 16, 20, 60));
    let (d, lat) = generate_with_latents(&cfg).unwrap();
    assert_eq!(d.n_categories(), 100);
    let mut correct = 0;
    let mut total = 0;
    for (c, ex) in lat.examples.iter().enumerate() {
        for i in 0..ex.rows() {
            let x = ex.row(i);
            let nearest = lat
                .centers
                .iter()
                .map(|m| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .enumerate()
                .fold((0, f64::INFINITY), |best, (j, v)| if v < best.1 { (j, v) } else { best })
                .0;
            correct += usize::from(nearest == c);
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.9, "oracle accuracy {acc}");
}

#[test]
fn splits_partition_the_categories() {
    let d = generate(&SynthConfig::default()).unwrap();
    assert!(split_pools_are_disjoint(&d));
    assert_eq!(
        (d.split.base.len(), d.split.val_novel.len(), d.split.test_novel.len()),
        (64, 16, 20)
    );
}

#[test]
fn file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let d = generate(&SynthConfig { seed: 5, ..Default::default() }).unwrap();
    d.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, d);
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn metadata_seed_regenerates_the_dataset() {
    let d = generate(&SynthConfig { seed: 8, ..Default::default() }).unwrap();
    let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
    assert_eq!(generate(&back.config).unwrap(), d);
}

#[test]
fn truncated_files_are_rejected() {
    let bytes = generate(&SynthConfig::default()).unwrap().to_bytes();
    for cut in [0, 3, 7, 8, bytes.len() / 2, bytes.len() - 1] {
        match Dataset::from_bytes(&bytes[..cut]) {
            Err(Error::Format(_)) => {}
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
}

#[test]
fn other_versions_are_rejected() {
    let mut bytes = generate(&SynthConfig::default()).unwrap().to_bytes();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        Dataset::from_bytes(&bytes),
        Err(Error::UnsupportedVersion { found: 2, expected: 1 })
    ));
    bytes[0] = b'X';
    assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Format(_))));
}

#[test]
fn dataset_and_checkpoint_files_are_not_interchangeable() {
    let bytes = generate(&SynthConfig::default()).unwrap().to_bytes();
    assert!(Checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn holdout_views_are_disjoint_and_exhaustive() {
    let d = generate(&SynthConfig::default()).unwrap();
    let v = base_holdout_split(&d, 15, &mut stream(0, Stream::Holdout)).unwrap();
    for (b, &c) in d.split.base.iter().enumerate() {
        assert_eq!(v.test[b].len(), 15);
        let mut all: Vec<usize> = v.train[b].iter().chain(&v.test[b]).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..d.count(c)).collect::<Vec<_>>());
    }
    assert_eq!(v, base_holdout_split(&d, 15, &mut stream(0, Stream::Holdout)).unwrap());
}
