use std::fs;
use std::path::Path;

use npyz::WriterBuilder;

use tut_core::data::{
    features_from_bytes, features_to_bytes, generate_synthetic, import_npy, load_dataset,
    read_features, resample_temporal, synthetic_prototypes, upsample_predictions, write_dataset,
    write_features, ClassMapping, SynthSpec, VideoSample,
};
use tut_core::loss::derive_boundaries;
use tut_core::metrics::extract_segments;
use tut_core::tensor::Tensor;
use tut_core::Error;

fn toy_fixture(root: &Path) {
    fs::create_dir_all(root.join("groundTruth")).unwrap();
    fs::create_dir_all(root.join("features")).unwrap();
    fs::create_dir_all(root.join("splits")).unwrap();
    fs::write(root.join("mapping.txt"), "0 background\n1 cut\n2 mix\n").unwrap();
    fs::write(
        root.join("groundTruth/a.txt"),
        "background\ncut\ncut\nmix\n",
    )
    .unwrap();
    fs::write(root.join("groundTruth/b.txt"), "mix\nmix\nbackground\n").unwrap();
    let fa = Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap();
    let fb = Tensor::new(vec![3, 2], (0..6).map(|x| -f64::from(x)).collect()).unwrap();
    write_features(root.join("features/a.bin"), &fa).unwrap();
    write_features(root.join("features/b.bin"), &fb).unwrap();
    fs::write(root.join("splits/train.split1.bundle"), "a.txt\nb.txt\n").unwrap();
    fs::write(root.join("splits/test.split1.bundle"), "b.txt\n").unwrap();
}

#[test]
fn two_video_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    toy_fixture(dir.path());
    let ds = load_dataset(dir.path(), Some("train.split1"), 15.0).unwrap();
    assert_eq!(ds.mapping.len(), 3);
    assert_eq!(ds.videos.len(), 2);
    assert_eq!(ds.videos[0].id, "a");
    assert_eq!(ds.videos[0].labels, vec![0, 1, 1, 2]);
    assert_eq!(ds.videos[1].labels, vec![2, 2, 0]);
    assert_eq!(ds.videos[1].features.row(2), &[-4.0, -5.0]);
    assert_eq!(ds.feature_dim(), Some(2));

    let test = load_dataset(dir.path(), Some("test.split1"), 15.0).unwrap();
    assert_eq!(test.videos.len(), 1);
    let all = load_dataset(dir.path(), None, 15.0).unwrap();
    assert_eq!(all.videos.len(), 2);
}

#[test]
fn longer_label_file_is_truncated() {
    let dir = tempfile::tempdir().unwrap();
    toy_fixture(dir.path());
    fs::write(
        dir.path().join("groundTruth/a.txt"),
        "background\ncut\ncut\nmix\nmix\n",
    )
    .unwrap();
    let ds = load_dataset(dir.path(), Some("train.split1"), 15.0).unwrap();
    assert_eq!(ds.videos[0].labels.len(), 4);
    assert_eq!(ds.videos[0].features.rows(), 4);

    // And the other way round: features longer than labels.
    fs::write(dir.path().join("groundTruth/a.txt"), "background\ncut\n").unwrap();
    let ds = load_dataset(dir.path(), Some("train.split1"), 15.0).unwrap();
    assert_eq!(ds.videos[0].features.shape(), &[2, 2]);
    assert_eq!(ds.videos[0].features.row(1), &[2.0, 3.0]);
}

#[test]
fn load_errors() {
    let dir = tempfile::tempdir().unwrap();
    toy_fixture(dir.path());
    fs::write(dir.path().join("groundTruth/b.txt"), "mix\nstir\n").unwrap();
    let err = load_dataset(dir.path(), Some("train.split1"), 15.0).unwrap_err();
    assert!(matches!(err, Error::Load { .. }));
    assert!(err.to_string().contains("stir"), "{err}");

    toy_fixture(dir.path());
    fs::remove_file(dir.path().join("features/b.bin")).unwrap();
    let err = load_dataset(dir.path(), Some("train.split1"), 15.0).unwrap_err();
    assert!(matches!(err, Error::Load { .. }));

    toy_fixture(dir.path());
    fs::write(dir.path().join("mapping.txt"), "0 background\n1 cut\nmix\n").unwrap();
    let err = load_dataset(dir.path(), Some("train.split1"), 15.0).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}

#[test]
fn feature_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    // Hand-built file with values that are not exactly representable in f64 arithmetic.
    let mut bytes = b"TUTFEAT1".to_vec();
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&3u64.to_le_bytes());
    bytes.extend_from_slice(&2u64.to_le_bytes());
    for v in [0.1f32, -1e-30, f32::MAX, 3.5, f32::MIN_POSITIVE, -0.0] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, &bytes).unwrap();
    let t = read_features(&path).unwrap();
    assert_eq!(t.shape(), &[3, 2]);
    let out = dir.path().join("g.bin");
    write_features(&out, &t).unwrap();
    assert_eq!(fs::read(&out).unwrap(), bytes);
    assert_eq!(
        features_to_bytes(&features_from_bytes(&bytes).unwrap()).unwrap(),
        bytes
    );
}

#[test]
fn corrupt_feature_files_are_rejected() {
    let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let good = features_to_bytes(&t).unwrap();
    assert!(features_from_bytes(&good[..good.len() - 1]).is_err());
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(features_from_bytes(&bad).is_err());
    let mut rank3 = good.clone();
    rank3[8] = 3;
    assert!(features_from_bytes(&rank3).is_err());
    assert!(features_to_bytes(&Tensor::vector(vec![1.0])).is_err());
}

fn write_npy<T: npyz::Serialize + npyz::AutoSerialize + Copy>(
    path: &Path,
    shape: &[u64],
    data: &[T],
    fortran: bool,
) {
    let mut buf = Vec::new();
    let mut w = npyz::WriteOptions::new()
        .default_dtype()
        .shape(shape)
        .order(if fortran {
            npyz::Order::Fortran
        } else {
            npyz::Order::C
        })
        .writer(&mut buf)
        .begin_nd()
        .unwrap();
    w.extend(data.iter().copied()).unwrap();
    w.finish().unwrap();
    fs::write(path, buf).unwrap();
}

#[test]
fn npy_import_handles_dtype_order_and_transpose() {
    let dir = tempfile::tempdir().unwrap();
    // Stored as d=2 rows by T=3 columns, like the published I3D dumps.
    let p32 = dir.path().join("a.npy");
    write_npy(&p32, &[2, 3], &[1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0], false);
    let t = import_npy(&p32, true).unwrap();
    assert_eq!(t.shape(), &[3, 2]);
    assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    let t = import_npy(&p32, false).unwrap();
    assert_eq!(t.shape(), &[2, 3]);
    assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

    // Same logical array, Fortran order and f64.
    let p64 = dir.path().join("b.npy");
    write_npy(&p64, &[2, 3], &[1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0], true);
    assert_eq!(
        import_npy(&p64, true).unwrap().data(),
        &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
    );

    let pint = dir.path().join("c.npy");
    write_npy(&pint, &[2, 1], &[1i32, 2], false);
    assert!(matches!(import_npy(&pint, false), Err(Error::Load { .. })));
    let p1 = dir.path().join("d.npy");
    write_npy(&p1, &[3], &[1.0f32, 2.0, 3.0], false);
    assert!(import_npy(&p1, false).is_err());
}

fn sample(len: usize) -> VideoSample {
    VideoSample {
        id: "v".into(),
        features: Tensor::new(vec![len, 1], (0..len).map(|x| x as f64).collect()).unwrap(),
        labels: (0..len).map(|t| t / 3).collect(),
        fps: 30.0,
    }
}

#[test]
fn resampling() {
    let s = sample(7);
    let r = resample_temporal(&s, 30.0, 15.0).unwrap();
    assert_eq!(r.features.data(), &[0.0, 2.0, 4.0, 6.0]);
    assert_eq!(r.labels, vec![0, 0, 1, 2]);
    assert_eq!(r.fps, 15.0);
    assert_eq!(resample_temporal(&s, 30.0, 30.0).unwrap(), s);
    assert!(matches!(
        resample_temporal(&s, 30.0, 20.0),
        Err(Error::Unsupported(_))
    ));

    assert_eq!(upsample_predictions(&[0, 1], 2, 4), vec![0, 0, 1, 1]);
    assert_eq!(upsample_predictions(&[5, 6, 7], 2, 5), vec![5, 5, 6, 6, 7]);
    // Round trip through 30 -> 15 -> 30 keeps the length.
    assert_eq!(upsample_predictions(&r.labels, 2, 7).len(), 7);
}

#[test]
fn synthetic_bounds_and_structure() {
    let spec = SynthSpec {
        seed: 3,
        ..SynthSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    assert_eq!(ds.videos.len(), 8);
    assert_eq!(ds.mapping.len(), 4);
    for v in &ds.videos {
        assert!((128..=256).contains(&v.len()));
        assert_eq!(v.features.shape(), &[v.len(), spec.dim]);
        let segs = extract_segments(&v.labels);
        assert!((spec.min_segments..=spec.max_segments).contains(&segs.len()));
        assert!(segs.windows(2).all(|w| w[0].class != w[1].class));
        assert!(v.labels.iter().all(|&l| l < 4));
    }
}

#[test]
fn synthetic_is_deterministic() {
    let spec = SynthSpec::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&generate_synthetic(&spec).unwrap(), a.path(), "train").unwrap();
    write_dataset(&generate_synthetic(&spec).unwrap(), b.path(), "train").unwrap();
    for entry in walk(a.path()) {
        let rel = entry.strip_prefix(a.path()).unwrap();
        assert_eq!(
            fs::read(&entry).unwrap(),
            fs::read(b.path().join(rel)).unwrap(),
            "{rel:?}"
        );
    }
    let other = generate_synthetic(&SynthSpec {
        seed: 1,
        ..spec.clone()
    })
    .unwrap();
    assert_ne!(other, generate_synthetic(&spec).unwrap());
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn noise_free_synthetic_is_nearest_prototype_separable() {
    let spec = SynthSpec {
        noise: 0.0,
        ..SynthSpec::default()
    };
    let protos = synthetic_prototypes(&spec);
    let ds = generate_synthetic(&spec).unwrap();
    for v in &ds.videos {
        for (t, &l) in v.labels.iter().enumerate() {
            let x = v.features.row(t);
            let nearest = (0..spec.classes)
                .min_by(|&a, &b| {
                    let da: f64 = x
                        .iter()
                        .zip(protos.row(a))
                        .map(|(p, q)| (p - q).powi(2))
                        .sum();
                    let db: f64 = x
                        .iter()
                        .zip(protos.row(b))
                        .map(|(p, q)| (p - q).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, l);
        }
    }
}

#[test]
fn written_dataset_loads_back_with_matching_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&SynthSpec::default()).unwrap();
    write_dataset(&ds, dir.path(), "train").unwrap();
    let back = load_dataset(dir.path(), Some("train"), 15.0).unwrap();
    assert_eq!(back.mapping, ds.mapping);
    assert_eq!(back.videos.len(), ds.videos.len());
    for (a, b) in ds.videos.iter().zip(&back.videos) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.labels, b.labels);
        // Features pass through f32 on disk.
        for (x, y) in a.features.data().iter().zip(b.features.data()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
        let bs = derive_boundaries(&b.labels);
        let segs = extract_segments(&b.labels);
        assert_eq!(bs.starts, segs.iter().map(|s| s.start).collect::<Vec<_>>());
        assert_eq!(bs.ends, segs.iter().map(|s| s.end).collect::<Vec<_>>());
    }
}

#[test]
fn mapping_text_round_trip() {
    let m = ClassMapping::new(vec!["a".into(), "b".into()]).unwrap();
    assert_eq!(
        ClassMapping::parse(&m.to_text(), Path::new("m")).unwrap(),
        m
    );
    assert_eq!(m.id("b"), Some(1));
    assert_eq!(m.name(2), None);
}
