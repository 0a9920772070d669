use geodepth::camera::DepthMap;
use geodepth::dataio::{
    load_manifest, read_depth_png, read_manifest, read_rgb_png, sparsify, synth_scene, write_corpus,
    write_depth_png, write_rgb_png, SceneSpec,
};
use geodepth::Error;
use image::{GrayImage, ImageBuffer, Luma, Rgb};
use proptest::prelude::*;

#[test]
fn raw_value_conventions() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.png");
    ImageBuffer::<Luma<u16>, _>::from_raw(2, 1, vec![256u16, 0]).unwrap().save(&p).unwrap();
    let m = read_depth_png(&p).unwrap();
    assert_eq!(m.at(0, 0), Some(1.0));
    assert_eq!(m.at(1, 0), None);
    assert_eq!(m.depth()[1], 0.0);

    let clamp = DepthMap::from_depths(1, 2, vec![300.0, 1.0]).unwrap();
    assert_eq!(write_depth_png(&clamp, &p).unwrap(), 1);
    let raw = image::open(&p).unwrap().into_luma16().into_raw();
    assert_eq!(raw, vec![65535, 256]);

    write_depth_png(&DepthMap::empty(3, 2), &p).unwrap();
    assert!(image::open(&p).unwrap().into_luma16().into_raw().iter().all(|&r| r == 0));
}

#[test]
fn wrong_formats_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g8.png");
    GrayImage::from_raw(2, 2, vec![1, 2, 3, 4]).unwrap().save(&p).unwrap();
    let e = read_depth_png(&p).unwrap_err();
    assert!(matches!(e, Error::Format { .. }));
    assert!(e.to_string().contains("8 bits"), "{e}");
    let q = dir.path().join("rgb16.png");
    ImageBuffer::<Rgb<u16>, _>::from_raw(1, 1, vec![1u16, 2, 3]).unwrap().save(&q).unwrap();
    let e = read_depth_png(&q).unwrap_err();
    assert!(e.to_string().contains("3 channel"), "{e}");
    assert!(matches!(read_depth_png(&dir.path().join("missing.png")), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn quantized_maps_roundtrip_bitwise(raw in proptest::collection::vec(0u16..=65535, 1..64), w in 1usize..8) {
        let n = raw.len() / w * w;
        prop_assume!(n > 0);
        let depth: Vec<f64> = raw[..n].iter().map(|&r| r as f64 / 256.0).collect();
        let m = DepthMap::from_depths(n / w, w, depth).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_depth_png(&m, &p).unwrap();
        prop_assert_eq!(read_depth_png(&p).unwrap(), m);
    }

    #[test]
    fn unquantized_error_is_bounded(vals in proptest::collection::vec(0.01f64..255.0, 8)) {
        let m = DepthMap::from_depths(2, 4, vals.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_depth_png(&m, &p).unwrap();
        let back = read_depth_png(&p).unwrap();
        for (a, b) in back.depth().iter().zip(&vals) {
            prop_assert!((a - b).abs() <= 1.0 / 512.0 + 1e-12);
        }
    }
}

#[test]
fn sparsify_properties() {
    let gt = synth_scene(&SceneSpec::default().with_seed(3)).unwrap().sample.gt;
    let all = sparsify(&gt, gt.valid_count(), 1);
    assert_eq!(all, gt);
    let s = sparsify(&gt, 500, 9);
    assert_eq!(s.valid_count(), 500);
    assert_eq!(s, sparsify(&gt, 500, 9));
    for i in 0..gt.depth().len() {
        if s.valid()[i] {
            assert_eq!(s.depth()[i].to_bits(), gt.depth()[i].to_bits());
        }
    }
    assert_eq!(sparsify(&s, 10_000, 2).valid_count(), 500);
}

#[test]
fn scenes_stay_in_range_and_differ_by_seed() {
    let spec = SceneSpec::default();
    let a = synth_scene(&spec.with_seed(1)).unwrap();
    let b = synth_scene(&spec.with_seed(2)).unwrap();
    assert_ne!(a.sample.gt, b.sample.gt);
    for seed in 0..20 {
        let s = synth_scene(&spec.with_seed(seed)).unwrap();
        assert!((1..=5).contains(&s.boxes.len()));
        assert!(s.sample.gt.depth().iter().all(|&d| (0.5..=80.0).contains(&d)));
        let k = s.sample.intrinsics;
        assert_eq!((k.fx, k.fy, k.cx, k.cy), (64.0, 64.0, 31.5, 31.5));
    }
    let bad = SceneSpec {
        height: 60,
        ..spec.clone()
    };
    assert!(synth_scene(&bad).is_err());
}

#[test]
fn corpus_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        height: 16,
        width: 24,
        sparse_count: 40,
        ..SceneSpec::default()
    };
    let manifest = write_corpus(dir.path(), &spec, &[5, 6]).unwrap();
    let entries = read_manifest(&manifest).unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 9);
    let loaded = load_manifest(&manifest).unwrap();
    for (seed, s) in [5, 6].iter().zip(&loaded) {
        assert_eq!(&synth_scene(&spec.with_seed(*seed)).unwrap().sample, s);
    }
    let rgb = dir.path().join("again.png");
    write_rgb_png(&loaded[0].rgb, &rgb).unwrap();
    assert_eq!(read_rgb_png(&rgb).unwrap(), loaded[0].rgb);
}
