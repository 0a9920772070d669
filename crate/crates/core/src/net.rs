//! Two-branch encoder and geometry-guided decoder.
//!
//! Both encoders produce feature maps at 1/2, 1/4 and 1/8 of the input
//! extent. Each stage is a 4×4 stride-2 convolution followed by a 3×3
//! convolution, each with batchnorm and ReLU. The decoder upsamples with
//! 4×4 stride-2 transposed convolutions:
//!
//! ```text
//! p² = up₃(f_C³ ⊙ f_G³)
//! p¹ = up₂((p² ⊕ f_C²) ⊙ f_G²)
//! p⁰ = up₁((p¹ ⊕ f_C¹) ⊙ f_G¹)
//! depth = ReLU(conv1×1(p⁰))
//! ```
//!
//! where `⊕` is elementwise sum and `⊙` channel concatenation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{rel_err, CheckOutcome, STEP};
use crate::autodiff::{Mode, OpKind, ParamId, ParamStore, Reduction, Scalar, Tape, Tensor, Var};
use crate::camera::{backproject, farthest_indices, random_indices, CameraIntrinsics, DepthMap, PointSet};
use crate::config::{GeometryInput, NetConfig, SamplingMode};
use crate::dataio::{synth_scene, SceneSpec};
use crate::dgr::{embed_to_map_var, DgrModule};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ConvTranspose2d};

/// Conv + batchnorm + ReLU.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, pad, false, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, y, mode)?;
        Ok(tape.relu(y))
    }
}

/// Feature maps at scales 1/2, 1/4, 1/8.
#[derive(Clone, Copy, Debug)]
pub struct EncoderPyramid {
    pub scales: [Var; 3],
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<(ConvBlock, ConvBlock)>,
    pub in_channels: usize,
    pub widths: [usize; 3],
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        widths: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = in_channels;
        for (s, &w) in widths.iter().enumerate() {
            let down = ConvBlock::new(store, &format!("{prefix}.stage{s}.down"), cin, w, 4, 2, 1, rng)?;
            let refine = ConvBlock::new(store, &format!("{prefix}.stage{s}.refine"), w, w, 3, 1, 1, rng)?;
            stages.push((down, refine));
            cin = w;
        }
        Ok(Self {
            stages,
            in_channels,
            widths,
        })
    }

    /// Encodes a `[B, C, H, W]` input with `H`, `W` divisible by 8.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        input: Var,
        mode: Mode,
    ) -> Result<EncoderPyramid> {
        let s = tape.shape(input).to_vec();
        match s.as_slice() {
            [_, c, h, w] if *c == self.in_channels => check_extent(*h, *w)?,
            _ => return Err(Error::dim("encoder", &s, &[self.in_channels])),
        }
        let mut x = input;
        let mut out = Vec::with_capacity(3);
        for (down, refine) in &self.stages {
            x = down.forward(tape, store, x, mode)?;
            x = refine.forward(tape, store, x, mode)?;
            out.push(x);
        }
        Ok(EncoderPyramid {
            scales: [out[0], out[1], out[2]],
        })
    }
}

pub fn check_extent(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Config(format!("image extent {h}x{w} must be a positive multiple of 8")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct UpBlock {
    up: ConvTranspose2d,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    ups: Vec<UpBlock>,
    head: Conv2d,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        color: [usize; 3],
        geo: [usize; 3],
        dec: [usize; 3],
        head_bias: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // Inputs to up₃, up₂, up₁.
        let ins = [color[2] + geo[2], dec[0] + geo[1], dec[1] + geo[0]];
        let mut ups = Vec::new();
        for (i, (&cin, &cout)) in ins.iter().zip(&dec).enumerate() {
            let name = format!("{prefix}.up{}", 3 - i);
            ups.push(UpBlock {
                up: ConvTranspose2d::new(store, &format!("{name}.deconv"), cin, cout, 4, 2, 1, false, rng)?,
                bn: BatchNorm::new(store, &format!("{name}.bn"), cout)?,
            });
        }
        let head = Conv2d::new(store, &format!("{prefix}.head"), dec[2], 1, 1, 1, 0, true, rng)?;
        *store.value_mut(head.bias.expect("head has bias")) = Tensor::full(&[1], T::of(head_bias));
        Ok(Self { ups, head })
    }

    fn up<T: Scalar>(&self, i: usize, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let b = &self.ups[i];
        let y = b.up.forward(tape, store, x)?;
        let y = b.bn.forward(tape, store, y, mode)?;
        Ok(tape.relu(y))
    }

    /// Returns `[B, 1, H, W]` non-negative depth.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        fc: &EncoderPyramid,
        fg: &EncoderPyramid,
        mode: Mode,
    ) -> Result<Var> {
        for s in 0..3 {
            let (a, b) = (tape.shape(fc.scales[s]), tape.shape(fg.scales[s]));
            if a[0] != b[0] || a[2..] != b[2..] {
                return Err(Error::dim("decode", a, b));
            }
        }
        let x = tape.concat(&[fc.scales[2], fg.scales[2]], 1)?;
        let mut p = self.up(0, tape, store, x, mode)?;
        for (i, s) in [(1, 1), (2, 0)] {
            let fused = tape.add(p, fc.scales[s])?;
            let x = tape.concat(&[fused, fg.scales[s]], 1)?;
            p = self.up(i, tape, store, x, mode)?;
        }
        let d = self.head.forward(tape, store, p)?;
        Ok(tape.relu(d))
    }
}

/// One input example. `rgb` is `[3, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct SampleRef<'a> {
    pub rgb: &'a Tensor<f32>,
    pub sparse: &'a DepthMap,
    pub intrinsics: &'a CameraIntrinsics,
}

/// Tape handles of one batched forward pass.
pub struct ForwardOutput {
    pub depth: Var,
    pub rgb: Var,
    pub geometry: Var,
    pub color: EncoderPyramid,
    pub geo: EncoderPyramid,
    /// Point sets fed to the embedding, per sample (empty for depth-only).
    pub points: Vec<PointSet>,
    pub embeddings: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct CompletionNet {
    pub config: NetConfig,
    pub dgr: Option<DgrModule>,
    pub enc_c: Encoder,
    pub enc_g: Encoder,
    pub dec: Decoder,
}

impl CompletionNet {
    /// Builds the network and registers its parameters under `enc_c.`,
    /// `enc_g.`, `dec.` and (with embedding guidance) `dgr.`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dgr, geo_in) = match config.geometry_input {
            GeometryInput::Embedding => {
                let d = DgrModule::new(store, "dgr", config.dgr.clone(), &mut rng)?;
                (Some(d), config.dgr.channels())
            }
            GeometryInput::Depth => (None, 1),
        };
        let enc_c = Encoder::new(store, "enc_c", 3, config.color_widths, &mut rng)?;
        let enc_g = Encoder::new(store, "enc_g", geo_in, config.geo_widths, &mut rng)?;
        let dec = Decoder::new(
            store,
            "dec",
            config.color_widths,
            config.geo_widths,
            config.dec_widths,
            config.head_bias,
            &mut rng,
        )?;
        Ok(Self {
            config,
            dgr,
            enc_c,
            enc_g,
            dec,
        })
    }

    /// Points used for the embedding: all valid pixels, subsampled to
    /// `sample_count` in train mode (or to `infer_cap` in eval mode).
    pub fn select_points(&self, sparse: &DepthMap, k: &CameraIntrinsics, mode: Mode, seed: u64) -> Result<PointSet> {
        let pts = backproject(sparse, k)?;
        let limit = match mode {
            Mode::Train => Some(self.config.sample_count),
            Mode::Eval => self.config.infer_cap,
        };
        let Some(n) = limit.filter(|&n| n < pts.len()) else {
            return Ok(pts);
        };
        match self.config.sampling {
            SamplingMode::Random => Ok(pts.select(&random_indices(pts.len(), n, seed))),
            SamplingMode::Fps => {
                let start = (seed % pts.len() as u64) as usize;
                let mut idx = farthest_indices(&pts, n, start)?;
                idx.sort_unstable();
                Ok(pts.select(&idx))
            }
        }
    }

    /// Geometry-branch input `[1, C, H, W]` for one sample.
    pub fn geometry_input<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        sparse: &DepthMap,
        k: &CameraIntrinsics,
        mode: Mode,
        seed: u64,
    ) -> Result<(Var, Option<(PointSet, Var)>)> {
        let (h, w) = (sparse.height(), sparse.width());
        match &self.dgr {
            Some(dgr) => {
                let pts = self.select_points(sparse, k, mode, seed)?;
                if pts.len() < 2 {
                    return Err(Error::EmptyInput(format!("need 2 valid depth pixels, got {}", pts.len())));
                }
                let out = dgr.forward(tape, store, &pts, mode)?;
                let map = embed_to_map_var(tape, out.embedding, &pts, h, w)?;
                Ok((map, Some((pts, out.embedding))))
            }
            None => {
                let d: Vec<T> = sparse.depth().iter().map(|&v| T::of(v)).collect();
                Ok((tape.constant(Tensor::new(&[1, 1, h, w], d)?), None))
            }
        }
    }

    /// Batched forward pass; `seed` drives train-time point sampling.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        batch: &[SampleRef<'_>],
        mode: Mode,
        seed: u64,
    ) -> Result<ForwardOutput> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Contract("forward on an empty batch".into()))?;
        let (h, w) = (first.sparse.height(), first.sparse.width());
        check_extent(h, w)?;
        let mut rgbs = Vec::new();
        let mut geos = Vec::new();
        let mut points = Vec::new();
        let mut embeddings = Vec::new();
        for (i, s) in batch.iter().enumerate() {
            if s.rgb.shape() != [3, h, w] || s.sparse.height() != h || s.sparse.width() != w {
                return Err(Error::dim("forward", s.rgb.shape(), &[3, h, w]));
            }
            let rgb: Vec<T> = s.rgb.data().iter().map(|&v| T::of(v as f64)).collect();
            rgbs.push(tape.constant(Tensor::new(&[1, 3, h, w], rgb)?));
            let sample_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            let (g, emb) = self.geometry_input(tape, store, s.sparse, s.intrinsics, mode, sample_seed)?;
            geos.push(g);
            if let Some((p, e)) = emb {
                points.push(p);
                embeddings.push(e);
            }
        }
        let rgb = tape.concat(&rgbs, 0)?;
        let geometry = tape.concat(&geos, 0)?;
        let color = self.enc_c.forward(tape, store, rgb, mode)?;
        let geo = self.enc_g.forward(tape, store, geometry, mode)?;
        let depth = self.dec.forward(tape, store, &color, &geo, mode)?;
        Ok(ForwardOutput {
            depth,
            rgb,
            geometry,
            color,
            geo,
            points,
            embeddings,
        })
    }

    /// Eval-mode dense prediction for each sample.
    pub fn predict<T: Scalar>(&self, store: &mut ParamStore<T>, batch: &[SampleRef<'_>]) -> Result<Vec<DepthMap>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, batch, Mode::Eval, 0)?;
        let (h, w) = (batch[0].sparse.height(), batch[0].sparse.width());
        Ok(tape
            .value(out.depth)
            .data()
            .chunks(h * w)
            .map(|c| DepthMap::dense(h, w, c.iter().map(|v| v.as_f64()).collect()))
            .collect())
    }

    /// Masked squared error of a forward pass against ground truth.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<T>, pred: Var, gts: &[&DepthMap], reduction: Reduction) -> Result<Var> {
        let mut target = Vec::new();
        let mut mask = Vec::new();
        for gt in gts {
            target.extend(gt.depth().iter().map(|&d| T::of(d)));
            mask.extend_from_slice(gt.valid());
        }
        tape.mse_masked(pred, &target, &mask, gts.len(), reduction)
    }
}

/// Tolerance of the end-to-end gradient check.
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Central-difference check of the training loss of a 16×16 scene at 64-bit
/// with respect to `count` random parameter scalars, drawn in turn from the
/// `dgr`, `enc_c`, `enc_g` and `dec` groups.
pub fn gradcheck_model(seed: u64, count: usize, fault: Option<OpKind>) -> Result<CheckOutcome> {
    let spec = SceneSpec {
        seed,
        height: 16,
        width: 16,
        sparse_count: 48,
        ..SceneSpec::default()
    };
    let sample = synth_scene(&spec)?.sample;
    let mut store = ParamStore::<f64>::new();
    let net = CompletionNet::new(&mut store, NetConfig::default(), seed)?;
    let loss_of = |store: &mut ParamStore<f64>, fault: Option<OpKind>| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        tape.inject_fault(fault);
        let out = net.forward(&mut tape, store, &[sample.as_ref()], Mode::Train, seed)?;
        let loss = net.loss(&mut tape, out.depth, &[&sample.gt], Reduction::Mean)?;
        Ok((tape, loss))
    };
    let (tape, loss) = loss_of(&mut store, fault)?;
    tape.backward_into(loss, &mut store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let groups: Vec<Vec<ParamId>> = ["dgr.", "enc_c.", "enc_g.", "dec."]
        .iter()
        .map(|p| store.trainable().filter(|&id| store.get(id).name.starts_with(p)).collect())
        .collect();
    let mut worst = 0.0f64;
    let mut work = store.clone();
    for i in 0..count {
        let group = &groups[i % groups.len()];
        let id = group[rng.gen_range(0..group.len())];
        let e = rng.gen_range(0..store.value(id).numel());
        let analytic = store.grad(id).map_or(0.0, |g| g.data()[e]);
        let x0 = store.value(id).data()[e];
        let mut at = |x: f64| -> Result<f64> {
            work.value_mut(id).data_mut()[e] = x;
            let (t, l) = loss_of(&mut work, None)?;
            Ok(t.value(l).item())
        };
        let numeric = (at(x0 + STEP)? - at(x0 - STEP)?) / (2.0 * STEP);
        work.value_mut(id).data_mut()[e] = x0;
        let err = rel_err(analytic, numeric);
        log::debug!("{}[{e}]: analytic {analytic} numeric {numeric} err {err}", store.get(id).name);
        worst = worst.max(err);
    }
    Ok(CheckOutcome {
        name: "model".into(),
        instances: count,
        max_rel_err: worst,
        tolerance: MODEL_TOLERANCE,
        error: None,
    })
}
