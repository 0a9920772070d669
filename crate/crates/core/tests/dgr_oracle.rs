use geodepth::autodiff::{Mode, ParamStore, Tape, Tensor};
use geodepth::camera::PointSet;
use geodepth::dgr::{embed_to_map, DgrConfig, DgrModule, EdgeConvLayer};
use geodepth::nn::Linear;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn points(coords: Vec<[f64; 3]>) -> PointSet {
    PointSet {
        pixel: (0..coords.len()).map(|i| (i % 97, i / 97)).collect(),
        depth: coords.iter().map(|c| c[2]).collect(),
        coords,
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> PointSet {
    points(
        (0..n)
            .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0), rng.gen_range(1.0..20.0)])
            .collect(),
    )
}

/// Randomizes batchnorm affine parameters and running statistics so that
/// none of them is an identity.
fn perturb_bn<T: geodepth::autodiff::Scalar>(store: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let lo = if p.name.ends_with(".scale") || p.name.ends_with(".running_var") {
            0.5
        } else if p.name.ends_with(".shift") || p.name.ends_with(".running_mean") {
            -0.5
        } else {
            continue;
        };
        for v in p.value.data_mut() {
            *v = T::of(rng.gen_range(lo..lo + 1.0));
        }
    }
}

type Mat = Vec<Vec<f64>>;

fn weight(store: &ParamStore<f64>, name: &str) -> Mat {
    let t = store.value(store.id(name).unwrap());
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn vector(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.value(store.id(name).unwrap()).data().to_vec()
}

fn matmul(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|o| row.iter().zip(w).map(|(a, wr)| a * wr[o]).sum())
                .collect()
        })
        .collect()
}

fn bn_train_relu(x: &Mat, scale: &[f64], shift: &[f64]) -> Mat {
    let n = x.len() as f64;
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..d)
        .map(|c| x.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n)
        .collect();
    x.iter()
        .map(|r| {
            (0..d)
                .map(|c| ((r[c] - mean[c]) / (var[c] + 1e-5).sqrt() * scale[c] + shift[c]).max(0.0))
                .collect()
        })
        .collect()
}

fn nearest(f: &Mat, k: usize) -> Vec<Vec<usize>> {
    let n = f.len();
    (0..n)
        .map(|i| {
            let mut c: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (f[i].iter().zip(&f[j]).map(|(a, b)| (a - b).powi(2)).sum(), j))
                .collect();
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            c.iter().take(k).map(|p| p.1).collect()
        })
        .collect()
}

/// Train-mode embedding written out with plain loops.
fn straight_line(store: &ParamStore<f64>, cfg: &DgrConfig, pts: &PointSet) -> Mat {
    let mut f: Mat = pts.coords.iter().map(|c| c.to_vec()).collect();
    let mut outs: Vec<Mat> = Vec::new();
    for l in 0..cfg.layer_dims.len() {
        let nb = nearest(&f, cfg.k);
        let mut edges: Mat = Vec::new();
        for (i, row) in nb.iter().enumerate() {
            for &j in row {
                let mut e = f[i].clone();
                e.extend(f[j].iter().zip(&f[i]).map(|(a, b)| a - b));
                edges.push(e);
            }
        }
        let h = matmul(&edges, &weight(store, &format!("dgr.layer{l}.edge.weight")));
        let h = bn_train_relu(
            &h,
            &vector(store, &format!("dgr.layer{l}.bn.scale")),
            &vector(store, &format!("dgr.layer{l}.bn.shift")),
        );
        let kk = nb[0].len();
        f = (0..f.len())
            .map(|i| {
                (0..h[0].len())
                    .map(|c| (0..kk).map(|j| h[i * kk + j][c]).fold(f64::NEG_INFINITY, f64::max))
                    .collect()
            })
            .collect();
        outs.push(f.clone());
    }
    let cat: Mat = (0..f.len())
        .map(|i| outs.iter().flat_map(|o| o[i].clone()).collect())
        .collect();
    let r = matmul(&cat, &weight(store, "dgr.reduce.weight"));
    let r = bn_train_relu(&r, &vector(store, "dgr.reduce.bn.scale"), &vector(store, "dgr.reduce.bn.shift"));
    r.into_iter()
        .zip(&pts.depth)
        .map(|(mut row, &z)| {
            row.push(z);
            row
        })
        .collect()
}

#[test]
fn five_points_match_straight_line_transcription() {
    for (seed, k) in [(1u64, 2usize), (2, 4), (3, 9)] {
        let cfg = DgrConfig {
            k,
            ..DgrConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let dgr = DgrModule::new(&mut store, "dgr", cfg.clone(), &mut rng).unwrap();
        perturb_bn(&mut store, seed);
        let pts = random_points(&mut rng, 5);
        let want = straight_line(&store, &cfg, &pts);
        let got = dgr.embed(&mut store, &pts, Mode::Train).unwrap();
        assert_eq!(got.channels, 17);
        for i in 0..5 {
            for c in 0..17 {
                assert!((got.row(i)[c] - want[i][c]).abs() < 1e-6, "point {i} channel {c}");
            }
        }
    }
}

fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.gen_range(0..=i));
    }
    p
}

#[test]
fn embedding_is_permutation_equivariant_at_64_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let dgr = DgrModule::new(&mut store, "dgr", DgrConfig::default(), &mut rng).unwrap();
    perturb_bn(&mut store, 11);
    for _ in 0..5 {
        let n = rng.gen_range(10..=128);
        let pts = random_points(&mut rng, n);
        let base = dgr.embed(&mut store, &pts, Mode::Eval).unwrap();
        let perm = permutation(&mut rng, n);
        let moved = dgr.embed(&mut store, &pts.select(&perm), Mode::Eval).unwrap();
        for (r, &p) in perm.iter().enumerate() {
            let a: Vec<u64> = moved.row(r).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = base.row(p).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn graph_is_rebuilt_per_layer() {
    // Layer 1 outputs relu(x_j − x_i) along x: points 0, 1, 3 map to 1, 0, 0,
    // so point 1 is nearest to point 0 in space but to point 2 in features.
    let mut store = ParamStore::<f64>::new();
    let mut w1 = Tensor::zeros(&[6, 1]);
    w1.data_mut()[3] = 1.0;
    let layer = |store: &mut ParamStore<f64>, name: &str, w: Tensor<f64>, din: usize| EdgeConvLayer {
        linear: Linear {
            weight: store.add(name, w).unwrap(),
            bias: None,
        },
        bn: None,
        k: 1,
        in_dim: din,
        out_dim: 1,
    };
    let l1 = layer(&mut store, "l1.weight", w1, 3);
    let l2 = layer(&mut store, "l2.weight", Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap(), 1);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[3, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 3.0, 0.0, 1.0]).unwrap());
    let (f1, g1) = l1.forward(&mut tape, &mut store, x, Mode::Eval).unwrap();
    assert_eq!(tape.value(f1).data(), &[1.0, 0.0, 0.0]);
    let (_, g2) = l2.forward(&mut tape, &mut store, f1, Mode::Eval).unwrap();
    assert_eq!(g1.indices, vec![1, 0, 1]);
    assert_eq!(g2.indices, vec![1, 2, 1]);
    assert_ne!(g1, g2);
}

#[test]
fn depth_channel_and_map_validity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f32>::new();
    let dgr = DgrModule::new(&mut store, "dgr", DgrConfig::default(), &mut rng).unwrap();
    let pts = random_points(&mut rng, 50);
    let emb = dgr.embed(&mut store, &pts, Mode::Train).unwrap();
    let map = embed_to_map(&emb, &pts, 1, 97).unwrap();
    assert_eq!(map.channels, 17);
    assert_eq!(map.valid.iter().filter(|&&v| v).count(), 50);
    for (i, &(u, v)) in pts.pixel.iter().enumerate() {
        let at = map.at(u, v);
        assert_eq!(at.as_slice(), emb.row(i));
        assert_eq!(at[16], pts.depth[i] as f32);
    }
    assert!(emb.per_point.iter().all(|v| v.is_finite()));
}

#[test]
fn full_size_cloud_embeds_to_seventeen_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f32>::new();
    let dgr = DgrModule::new(&mut store, "dgr", DgrConfig::default(), &mut rng).unwrap();
    let pts = random_points(&mut rng, 8000);
    let emb = dgr.embed(&mut store, &pts, Mode::Eval).unwrap();
    assert_eq!((emb.n, emb.channels, emb.per_point.len()), (8000, 17, 8000 * 17));
}
