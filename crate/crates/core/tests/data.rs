use std::f64::consts::PI;
use std::fs;

use discseg::data::{
    generate_sample, generate_samples, kfold_split, load_dataset, split_train_val_test,
    subsample_fraction, write_dataset, Dataset, SyntheticSpec,
};
use discseg::image::RawImage;
use discseg::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample(seed: u64) -> discseg::data::Sample {
    generate_sample(
        &SyntheticSpec::default(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

#[test]
fn generator_geometry() {
    let spec = SyntheticSpec::default();
    let s = spec.size as f64;
    let lo = PI * (spec.radius_min * s).powi(2) * 0.9;
    let hi = PI * (spec.radius_max * s).powi(2) * 1.1;
    for seed in 0..50 {
        let smp = sample(seed);
        let (cx, cy) = smp.mask.center_of_mass();
        assert!((cx - smp.centroid.x).abs() <= 1.0, "seed {seed}");
        assert!((cy - smp.centroid.y).abs() <= 1.0, "seed {seed}");
        let area = smp.mask.area() as f64;
        assert!(area >= lo && area <= hi, "seed {seed}: area {area}");
        assert_eq!(smp.image.width(), spec.size);
        assert_eq!(smp.image.channels(), 1);
    }
}

#[test]
fn generator_is_deterministic() {
    assert_eq!(sample(7), sample(7));
    assert_ne!(sample(7).image, sample(8).image);
    let spec = SyntheticSpec::default();
    assert_eq!(
        generate_samples(&spec, 1, 3).unwrap(),
        generate_samples(&spec, 1, 3).unwrap()
    );
    assert_ne!(
        generate_samples(&spec, 1, 1).unwrap(),
        generate_samples(&spec, 2, 1).unwrap()
    );
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SyntheticSpec {
            radius_max: 0.5,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            radius_min: 0.0,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            radius_min: 0.2,
            radius_max: 0.1,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            disc_min: 1.2,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            noise_sigma: -1.0,
            ..SyntheticSpec::default()
        },
    ];
    for spec in bad {
        let err = generate_samples(&spec, 0, 1).unwrap_err();
        assert!(matches!(err, Error::Param(_)), "{spec:?}");
    }
    let err = SyntheticSpec {
        radius_max: 0.6,
        ..SyntheticSpec::default()
    }
    .validate()
    .unwrap_err();
    assert!(err.to_string().contains("radius_max"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_are_binary_and_contain_the_centroid(seed: u64) {
        let smp = sample(seed);
        prop_assert!(smp.mask.area() > 0);
        prop_assert!(smp.mask.data().iter().all(|&v| v <= 1));
        let (x0, y0, x1, y1) = smp.mask.bounding_box();
        prop_assert!(smp.centroid.x >= x0 as f64 && smp.centroid.x <= x1 as f64);
        prop_assert!(smp.centroid.y >= y0 as f64 && smp.centroid.y <= y1 as f64);
    }

    #[test]
    fn folds_partition_the_ids(n in 2usize..120, k in 2usize..8, seed: u64) {
        prop_assume!(n >= k);
        let plan = kfold_split(n, k, seed).unwrap();
        let sizes = plan.sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = (0..k).flat_map(|f| plan.fold(f)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for f in 0..k {
            prop_assert_eq!(plan.fold(f).len() + plan.train(f).len(), n);
        }
    }

    #[test]
    fn subsamples_are_nested(n in 1usize..200, seed: u64) {
        let ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let mut prev: Vec<usize> = Vec::new();
        for f in (10..=100).step_by(10) {
            let cur = subsample_fraction(&ids, f, seed).unwrap();
            prop_assert_eq!(cur.len(), (f as usize * n).div_ceil(100));
            prop_assert!(prev.iter().all(|i| cur.contains(i)));
            prop_assert!(cur.windows(2).all(|w| w[0] < w[1]));
            prev = cur;
        }
        prop_assert_eq!(prev, ids);
    }
}

#[test]
fn fold_and_fraction_examples() {
    let mut sizes = kfold_split(92, 5, 0).unwrap().sizes();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(sizes, [19, 19, 18, 18, 18]);
    assert_eq!(kfold_split(10, 5, 3).unwrap().sizes(), [2; 5]);
    assert_eq!(
        kfold_split(92, 5, 9).unwrap(),
        kfold_split(92, 5, 9).unwrap()
    );
    assert!(matches!(kfold_split(4, 5, 0), Err(Error::Param(_))));

    let ids: Vec<usize> = (0..80).collect();
    assert_eq!(subsample_fraction(&ids, 10, 1).unwrap().len(), 8);
    assert_eq!(subsample_fraction(&ids, 100, 1).unwrap(), ids);
    for bad in [0, 5, 15, 110] {
        assert!(matches!(
            subsample_fraction(&ids, bad, 1),
            Err(Error::Param(_))
        ));
    }
    let (tr, va, te) = split_train_val_test(1024, 0).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (820, 102, 102));
}

fn small_set(with_masks: bool) -> Dataset {
    let spec = SyntheticSpec {
        size: 24,
        ..SyntheticSpec::default()
    };
    Dataset::from_samples(generate_samples(&spec, 3, 4).unwrap(), with_masks)
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for masks in [false, true] {
        let d = small_set(masks);
        let p = dir.path().join(format!("m{masks}"));
        write_dataset(&d, &p, "kind = test\n").unwrap();
        assert_eq!(load_dataset(&p).unwrap(), d);
        assert_eq!(
            fs::read_to_string(p.join("manifest.txt")).unwrap(),
            "kind = test\n"
        );
    }
}

#[test]
fn corrupt_datasets_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let fresh = |name: &str| {
        let p = dir.path().join(name);
        write_dataset(&small_set(true), &p, "").unwrap();
        p
    };

    let p = fresh("wrong_dims");
    RawImage::gray(3, 3, vec![255; 9])
        .unwrap()
        .write(&p.join("masks/0001.pgm"))
        .unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Format(_))));

    let p = fresh("empty_mask");
    RawImage::gray(24, 24, vec![0; 576])
        .unwrap()
        .write(&p.join("masks/0002.pgm"))
        .unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Validation(_))));

    let p = fresh("grey_mask");
    RawImage::gray(24, 24, vec![128; 576])
        .unwrap()
        .write(&p.join("masks/0000.pgm"))
        .unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Validation(_))));

    let p = fresh("missing_image");
    fs::remove_file(p.join("images/0003.pgm")).unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Format(_))));

    let p = fresh("missing_mask");
    fs::remove_file(p.join("masks/0003.pgm")).unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Format(_))));

    let p = fresh("outside");
    fs::write(p.join("centroids.csv"), "id,x,y\n0000,30.0,4.0\n").unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Validation(_))));

    let p = fresh("bad_header");
    fs::write(p.join("centroids.csv"), "x,y\n").unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Format(_))));

    assert!(matches!(
        load_dataset(&dir.path().join("nothing_here")),
        Err(Error::File { .. })
    ));
}
