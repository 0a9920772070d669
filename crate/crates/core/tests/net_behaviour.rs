use std::cell::RefCell;

use geodepth::autodiff::gradcheck::check;
use geodepth::autodiff::{Adam, Mode, ParamStore, Tape, Tensor, Var};
use geodepth::camera::DepthMap;
use geodepth::config::{Config, NetConfig, TrainConfig};
use geodepth::dataio::{synth_scene, SceneSpec};
use geodepth::dgr::embed_to_map_var;
use geodepth::net::{check_extent, gradcheck_model, CompletionNet, Decoder, Encoder, EncoderPyramid, MODEL_TOLERANCE};
use geodepth::train::{train, train_step, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn scene(seed: u64, h: usize, w: usize, n: usize) -> Sample {
    synth_scene(&SceneSpec {
        seed,
        height: h,
        width: w,
        sparse_count: n,
        ..SceneSpec::default()
    })
    .unwrap()
    .sample
}

/// Moves batchnorm running statistics away from the identity.
fn perturb_running_stats(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        if p.name.ends_with("running_var") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        } else if p.name.ends_with("running_mean") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
        }
    }
}

#[test]
fn encoder_scale_contract_and_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let enc = Encoder::new(&mut store, "enc_c", 3, [16, 32, 64], &mut rng).unwrap();
    for (h, w) in [(64, 64), (16, 24), (8, 40)] {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, h, w]));
        let p = enc.forward(&mut tape, &mut store, x, Mode::Train).unwrap();
        let shapes: Vec<Vec<usize>> = p.scales.iter().map(|&s| tape.shape(s).to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 16, h / 2, w / 2], vec![2, 32, h / 4, w / 4], vec![2, 64, h / 8, w / 8]]);
        for s in p.scales {
            assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
        }
    }
    let geo = Encoder::new(&mut store, "enc_g", 17, [16, 32, 64], &mut rng).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 17, 16, 16]));
    let p = geo.forward(&mut tape, &mut store, z, Mode::Eval).unwrap();
    assert!(p.scales.iter().all(|&s| tape.value(s).data().iter().all(|&v| v == 0.0)));
    let mut tape = Tape::new();
    let bad = tape.constant(Tensor::zeros(&[1, 3, 12, 16]));
    assert!(enc.forward(&mut tape, &mut store, bad, Mode::Eval).is_err());
    assert!(check_extent(12, 16).is_err());
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&mut store, "enc", 3, [4, 6, 8], &mut rng).unwrap();
    perturb_running_stats(&mut store, 2);
    let store = RefCell::new(store);
    let x = random(&mut rng, &[1, 3, 8, 8]);
    let err = check(
        &[x],
        |tape, v| {
            let p = enc.forward(tape, &mut store.borrow_mut(), v[0], Mode::Eval)?;
            let parts: Vec<Var> = p
                .scales
                .iter()
                .map(|&s| {
                    let n = tape.value(s).numel();
                    tape.reshape(s, &[n])
                })
                .collect::<Result<_, _>>()?;
            tape.concat(&parts, 0)
        },
        None,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn pyramid(tape: &mut Tape<f64>, vars: &[Var]) -> (EncoderPyramid, EncoderPyramid) {
    let _ = tape;
    (
        EncoderPyramid {
            scales: [vars[0], vars[1], vars[2]],
        },
        EncoderPyramid {
            scales: [vars[3], vars[4], vars[5]],
        },
    )
}

fn pyramid_inputs(rng: &mut ChaCha8Rng, color: [usize; 3], geo: [usize; 3], h: usize) -> Vec<Tensor<f64>> {
    let mut v = Vec::new();
    for widths in [color, geo] {
        for (s, &c) in widths.iter().enumerate() {
            let e = h >> (s + 1);
            v.push(random(rng, &[1, c, e, e]));
        }
    }
    v
}

#[test]
fn decoder_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (color, geo, dec) = ([4, 6, 8], [3, 5, 7], [6, 4, 3]);
    let mut store = ParamStore::<f64>::new();
    let d = Decoder::new(&mut store, "dec", color, geo, dec, 0.5, &mut rng).unwrap();
    perturb_running_stats(&mut store, 3);
    let store = RefCell::new(store);
    let inputs = pyramid_inputs(&mut rng, color, geo, 8);
    let err = check(
        &inputs,
        |tape, v| {
            let (fc, fg) = pyramid(tape, v);
            let out = d.forward(tape, &mut store.borrow_mut(), &fc, &fg, Mode::Eval)?;
            assert_eq!(tape.shape(out), &[1, 1, 8, 8]);
            Ok(out)
        },
        None,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn geometry_guidance_is_live() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (color, geo, dec) = ([16, 32, 64], [16, 32, 64], [32, 16, 16]);
    let mut store = ParamStore::<f64>::new();
    let enc_g = Encoder::new(&mut store, "enc_g", 17, geo, &mut rng).unwrap();
    let d = Decoder::new(&mut store, "dec", color, geo, dec, 1.0, &mut rng).unwrap();
    perturb_running_stats(&mut store, 4);
    let inputs = pyramid_inputs(&mut rng, color, geo, 16);
    let run = |store: &mut ParamStore<f64>, geo_in: Option<&Tensor<f64>>, zero_fg: bool| -> Vec<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let (fc, mut fg) = pyramid(&mut tape, &vars);
        if let Some(g) = geo_in {
            let gv = tape.constant(g.clone());
            fg = enc_g.forward(&mut tape, store, gv, Mode::Eval).unwrap();
        }
        if zero_fg {
            for s in &mut fg.scales {
                let shape = tape.shape(*s).to_vec();
                *s = tape.constant(Tensor::zeros(&shape));
            }
        }
        let out = d.forward(&mut tape, store, &fc, &fg, Mode::Eval).unwrap();
        tape.value(out).data().to_vec()
    };
    assert_ne!(run(&mut store, None, false), run(&mut store, None, true));

    let g = random(&mut rng, &[1, 17, 16, 16]);
    let mut poked = g.clone();
    poked.data_mut()[5 * 256 + 7 * 16 + 9] += 0.5;
    let a = run(&mut store, Some(&g), false);
    let b = run(&mut store, Some(&poked), false);
    assert!(a.iter().zip(&b).any(|(x, y)| x != y));
}

fn small_config() -> NetConfig {
    NetConfig::default()
}

#[test]
fn forward_is_pure_nonnegative_and_composed_of_its_stages() {
    let s = scene(5, 32, 32, 60);
    let mut store = ParamStore::<f32>::new();
    let net = CompletionNet::new(&mut store, small_config(), 5).unwrap();
    let a = net.predict(&mut store, &[s.as_ref()]).unwrap();
    let b = net.predict(&mut store, &[s.as_ref()]).unwrap();
    assert_eq!(a, b);
    assert!(a[0].depth().iter().all(|&d| d >= 0.0));
    assert_eq!(a[0].valid_count(), 32 * 32);

    let mut tape = Tape::new();
    let pts = net.select_points(&s.sparse, &s.intrinsics, Mode::Eval, 0).unwrap();
    assert_eq!(pts.len(), 60);
    let dgr = net.dgr.as_ref().unwrap();
    let emb = dgr.forward(&mut tape, &mut store, &pts, Mode::Eval).unwrap();
    let geo = embed_to_map_var(&mut tape, emb.embedding, &pts, 32, 32).unwrap();
    let rgb = tape.constant(Tensor::new(&[1, 3, 32, 32], s.rgb.data().to_vec()).unwrap());
    let fc = net.enc_c.forward(&mut tape, &mut store, rgb, Mode::Eval).unwrap();
    let fg = net.enc_g.forward(&mut tape, &mut store, geo, Mode::Eval).unwrap();
    let out = net.dec.forward(&mut tape, &mut store, &fc, &fg, Mode::Eval).unwrap();
    let manual: Vec<f64> = tape.value(out).data().iter().map(|&v| v as f64).collect();
    assert_eq!(manual.as_slice(), a[0].depth());
}

#[test]
fn train_step_on_self_consistent_target_is_a_no_op() {
    let mut s = scene(6, 16, 16, 40);
    let mut store = ParamStore::<f32>::new();
    let net = CompletionNet::new(&mut store, small_config(), 6).unwrap();
    let mut probe = store.clone();
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &mut probe, &[s.as_ref()], Mode::Train, 9).unwrap();
    let pred: Vec<f64> = tape.value(out.depth).data().iter().map(|&v| v as f64).collect();
    s.gt = DepthMap::from_depths(16, 16, pred).unwrap();
    let before: Vec<Vec<f32>> = store.trainable().map(|id| store.value(id).data().to_vec()).collect();
    let loss = train_step(&net, &mut store, &Adam::default(), &[&s], 9).unwrap();
    assert_eq!(loss, 0.0);
    let after: Vec<Vec<f32>> = store.trainable().map(|id| store.value(id).data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn repeated_sample_loss_decreases_and_is_reproducible() {
    let s = scene(7, 16, 16, 40);
    let cfg = TrainConfig {
        batch_size: 1,
        epochs: 50,
        flip: false,
        ..TrainConfig::default()
    };
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let net = CompletionNet::new(&mut store, small_config(), 7).unwrap();
        train(&net, &mut store, std::slice::from_ref(&s), &cfg, 3, |_, _, _| Ok(())).unwrap()
    };
    let log = run();
    assert_eq!(log.len(), 50);
    let first = log[0].loss;
    let last = log.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
    let again = run();
    let bits = |l: &[geodepth::train::LossRecord]| l.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&log), bits(&again));
}

#[test]
fn empty_supervision_is_reported() {
    let mut s = scene(8, 16, 16, 40);
    s.gt = DepthMap::empty(16, 16);
    let mut store = ParamStore::<f32>::new();
    let net = CompletionNet::new(&mut store, small_config(), 8).unwrap();
    let e = train_step(&net, &mut store, &Adam::default(), &[&s], 0).unwrap_err();
    assert!(matches!(e, geodepth::Error::NoSupervision));
}

#[test]
fn flipping_mirrors_every_modality() {
    let s = scene(9, 16, 24, 40);
    let f = s.flipped();
    assert_eq!(f.flipped(), s);
    assert_eq!(f.gt.at(0, 3), s.gt.at(23, 3));
    assert_eq!(f.rgb.data()[2 * 16 * 24 + 5 * 24], s.rgb.data()[2 * 16 * 24 + 5 * 24 + 23]);
    assert_eq!(f.intrinsics.cx, 23.0 - s.intrinsics.cx);
}

#[test]
fn end_to_end_gradient_check() {
    for seed in [1, 2] {
        let o = gradcheck_model(seed, 10, None).unwrap();
        assert!(o.passed(), "{o:?}");
        assert_eq!(o.tolerance, MODEL_TOLERANCE);
    }
}

#[test]
fn config_file_drives_the_network() {
    let c = Config::parse("geometry_input=depth\nk=3\n", std::path::Path::new("c")).unwrap();
    let mut store = ParamStore::<f32>::new();
    let net = CompletionNet::new(&mut store, c.net, 0).unwrap();
    assert!(net.dgr.is_none());
    assert!(store.iter().all(|(_, p)| !p.name.starts_with("dgr.")));
    let s = scene(10, 16, 16, 30);
    assert_eq!(net.predict(&mut store, &[s.as_ref()]).unwrap()[0].valid_count(), 256);
}
