//! Depth image files, corpus manifests and a synthetic scene generator.
//!
//! Depth images are 16-bit single-channel PNGs holding `round(256·depth)`;
//! raw value 0 marks an invalid pixel.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::camera::{random_indices, CameraIntrinsics, DepthMap};
use crate::error::{Error, Result};
use crate::train::Sample;

pub const DEPTH_SCALE: f64 = 256.0;
pub const MIN_SCENE_DEPTH: f64 = 0.5;
pub const MAX_SCENE_DEPTH: f64 = 80.0;

/// Seeds at or above this value belong to the validation split.
pub const VAL_SEED_BASE: u64 = 1 << 32;

fn open_image(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))
}

fn save_image(img: DynamicImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        e => Error::format(path, e.to_string()),
    })
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    match open_image(path)? {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let depth = buf.into_raw().into_iter().map(|r| r as f64 / DEPTH_SCALE).collect();
            DepthMap::from_depths(h as usize, w as usize, depth)
        }
        other => {
            let c = other.color();
            Err(Error::format(
                path,
                format!(
                    "depth image must be 16-bit single-channel, got {} channel(s) at {} bits",
                    c.channel_count(),
                    c.bits_per_pixel() / c.channel_count() as u16
                ),
            ))
        }
    }
}

/// Raw 16-bit values of a depth map and the number of valid pixels that
/// had to be clamped into `1..=65535`.
pub fn quantize_depth(map: &DepthMap) -> (Vec<u16>, usize) {
    let mut clamped = 0;
    let raw = map
        .depth()
        .iter()
        .zip(map.valid())
        .map(|(&d, &ok)| {
            if !ok {
                return 0;
            }
            let r = (d * DEPTH_SCALE).round();
            if r > u16::MAX as f64 {
                clamped += 1;
                u16::MAX
            } else if r < 1.0 {
                clamped += 1;
                1
            } else {
                r as u16
            }
        })
        .collect();
    (raw, clamped)
}

/// Writes a depth map. Returns the clamped-pixel count, also logged.
pub fn write_depth_png(map: &DepthMap, path: &Path) -> Result<usize> {
    let (raw, clamped) = quantize_depth(map);
    if clamped > 0 {
        log::warn!("{}: {clamped} depth value(s) clamped to the 16-bit range", path.display());
    }
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(map.width() as u32, map.height() as u32, raw)
        .expect("buffer matches extent");
    save_image(DynamicImage::ImageLuma16(buf), path)?;
    Ok(clamped)
}

/// Reads an 8-bit RGB image as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<Tensor<f32>> {
    let buf = match open_image(path)? {
        DynamicImage::ImageRgb8(b) => b,
        other => {
            return Err(Error::format(
                path,
                format!("color image must be 8-bit RGB, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in buf.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn write_rgb_png(rgb: &Tensor<f32>, path: &Path) -> Result<()> {
    let [3, h, w] = *rgb.shape() else {
        return Err(Error::dim("write_rgb_png", rgb.shape(), &[3]));
    };
    let d = rgb.data();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    save_image(DynamicImage::ImageRgb8(buf), path)
}

/// Keeps a uniformly random subset of `n` valid pixels. `n` larger than
/// the valid count is clamped with a warning.
pub fn sparsify(gt: &DepthMap, n: usize, seed: u64) -> DepthMap {
    let valid: Vec<usize> = (0..gt.depth().len()).filter(|&i| gt.valid()[i]).collect();
    let n = if n > valid.len() {
        log::warn!("sparsify: requested {n} samples, only {} valid pixels", valid.len());
        valid.len()
    } else {
        n
    };
    let mut keep = vec![false; gt.depth().len()];
    for j in random_indices(valid.len(), n, seed) {
        keep[valid[j]] = true;
    }
    gt.masked(&keep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Range of the ground plane's depth along the optical axis.
    pub plane_depth: (f64, f64),
    /// Largest horizontal tilt coefficient magnitude.
    pub tilt_x: f64,
    /// Range of the vertical tilt coefficient (positive: nearer at the bottom).
    pub tilt_y: (f64, f64),
    pub box_count: (usize, usize),
    /// Side length range as a fraction of the image extent.
    pub box_size: (f64, f64),
    /// Box depth as a fraction of the nearest plane depth behind it.
    pub box_depth: (f64, f64),
    pub sparse_count: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            plane_depth: (6.0, 14.0),
            tilt_x: 0.3,
            tilt_y: (0.4, 1.0),
            box_count: (1, 5),
            box_size: (0.15, 0.4),
            box_depth: (0.35, 0.85),
            sparse_count: 500,
        }
    }
}

fn range_ok(r: (f64, f64)) -> bool {
    r.0.is_finite() && r.1.is_finite() && r.0 <= r.1
}

impl SceneSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return bad("extent must be a positive multiple of 8");
        }
        if !(range_ok(self.plane_depth) && range_ok(self.tilt_y) && range_ok(self.box_size) && range_ok(self.box_depth))
            || !self.tilt_x.is_finite()
        {
            return bad("ranges must be finite and ordered");
        }
        if self.plane_depth.0 < MIN_SCENE_DEPTH || self.plane_depth.1 > MAX_SCENE_DEPTH {
            return bad("plane depth outside the scene depth range");
        }
        // The plane denominator 1 + nx·x + ny·y must stay positive over the
        // normalized image, |x|, |y| ≤ 1/2.
        if 1.0 - 0.5 * (self.tilt_x.abs() + self.tilt_y.0.abs().max(self.tilt_y.1.abs())) <= 0.05 {
            return bad("tilt too steep");
        }
        if self.box_count.0 < 1 || self.box_count.1 > 5 || self.box_count.0 > self.box_count.1 {
            return bad("box count must lie in 1..=5");
        }
        if self.box_size.0 <= 0.0 || self.box_size.1 > 1.0 {
            return bad("box size must lie in (0, 1]");
        }
        if self.box_depth.0 <= 0.0 || self.box_depth.1 >= 1.0 {
            return bad("box depth fraction must lie in (0, 1)");
        }
        if self.sparse_count == 0 {
            return bad("sparse_count must be positive");
        }
        Ok(())
    }
}

/// `z(u, v) = d / (1 + nx·x + ny·y)` with normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundPlane {
    pub d: f64,
    pub nx: f64,
    pub ny: f64,
}

impl GroundPlane {
    pub fn depth_at(&self, k: &CameraIntrinsics, u: usize, v: usize) -> f64 {
        let x = (u as f64 - k.cx) / k.fx;
        let y = (v as f64 - k.cy) / k.fy;
        (self.d / (1.0 + self.nx * x + self.ny * y)).clamp(MIN_SCENE_DEPTH, MAX_SCENE_DEPTH)
    }
}

/// Frontal box covering pixel columns `u0..u1` and rows `v0..v1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBox {
    pub u0: usize,
    pub u1: usize,
    pub v0: usize,
    pub v1: usize,
    pub depth: f64,
    pub albedo: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub sample: Sample,
    pub plane: GroundPlane,
    pub boxes: Vec<SceneBox>,
}

fn quantized(d: f64) -> f64 {
    (d * DEPTH_SCALE).round() / DEPTH_SCALE
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..r.1)
    }
}

/// Renders a tilted ground plane with frontal boxes in front of it.
/// Depths are quantized to the file format so a scene survives a disk
/// round trip unchanged.
pub fn synth_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = CameraIntrinsics::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)?;
    let plane = GroundPlane {
        d: uniform(&mut rng, spec.plane_depth),
        nx: rng.gen_range(-spec.tilt_x.abs()..=spec.tilt_x.abs()),
        ny: uniform(&mut rng, spec.tilt_y),
    };
    let mut depth: Vec<f64> = (0..h * w).map(|i| plane.depth_at(&k, i % w, i / w)).collect();
    let mut albedo = vec![[0.5; 3]; h * w];
    let count = rng.gen_range(spec.box_count.0..=spec.box_count.1);
    let mut boxes = Vec::with_capacity(count);
    for _ in 0..count {
        let bw = ((uniform(&mut rng, spec.box_size) * w as f64).round() as usize).clamp(1, w);
        let bh = ((uniform(&mut rng, spec.box_size) * h as f64).round() as usize).clamp(1, h);
        let u0 = rng.gen_range(0..=w - bw);
        let v0 = rng.gen_range(0..=h - bh);
        let behind = (v0..v0 + bh)
            .flat_map(|v| (u0..u0 + bw).map(move |u| (u, v)))
            .map(|(u, v)| plane.depth_at(&k, u, v))
            .fold(f64::INFINITY, f64::min);
        let z = (uniform(&mut rng, spec.box_depth) * behind).max(MIN_SCENE_DEPTH);
        let col = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let b = SceneBox {
            u0,
            u1: u0 + bw,
            v0,
            v1: v0 + bh,
            depth: z,
            albedo: col,
        };
        for v in b.v0..b.v1 {
            for u in b.u0..b.u1 {
                let i = v * w + u;
                if z < depth[i] {
                    depth[i] = z;
                    albedo[i] = col;
                }
            }
        }
        boxes.push(b);
    }
    let depth: Vec<f64> = depth.into_iter().map(quantized).collect();
    let mut rgb = vec![0f32; 3 * h * w];
    for i in 0..h * w {
        let gray = (-depth[i] / 12.0).exp();
        for c in 0..3 {
            let x = (0.7 * gray + 0.3 * albedo[i][c]).clamp(0.0, 1.0);
            rgb[c * h * w + i] = (x * 255.0).round() as u8 as f32 / 255.0;
        }
    }
    let gt = DepthMap::from_depths(h, w, depth)?;
    let sparse = sparsify(&gt, spec.sparse_count, spec.seed ^ 0x5eed_5eed);
    Ok(Scene {
        sample: Sample {
            rgb: Tensor::new(&[3, h, w], rgb)?,
            sparse,
            gt,
            intrinsics: k,
        },
        plane,
        boxes,
    })
}

/// File paths of one corpus sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub sparse: PathBuf,
    pub gt: PathBuf,
    pub intrinsics: PathBuf,
}

impl ManifestEntry {
    pub fn load(&self) -> Result<Sample> {
        let rgb = read_rgb_png(&self.rgb)?;
        let sparse = read_depth_png(&self.sparse)?;
        let gt = read_depth_png(&self.gt)?;
        let intrinsics = CameraIntrinsics::read(&self.intrinsics)?;
        let (h, w) = (gt.height(), gt.width());
        if rgb.shape() != [3, h, w] || (sparse.height(), sparse.width()) != (h, w) {
            return Err(Error::format(
                &self.rgb,
                format!(
                    "misaligned sample: rgb {:?}, sparse {}x{}, gt {h}x{w}",
                    rgb.shape(),
                    sparse.height(),
                    sparse.width()
                ),
            ));
        }
        Ok(Sample {
            rgb,
            sparse,
            gt,
            intrinsics,
        })
    }
}

/// Manifest lines are tab-separated `rgb sparse gt intrinsics` paths,
/// relative to the manifest's directory unless absolute.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::format(path, format!("line {}: expected 4 tab-separated paths", n + 1)));
        }
        let p = |s: &str| base.join(s);
        out.push(ManifestEntry {
            rgb: p(f[0]),
            sparse: p(f[1]),
            gt: p(f[2]),
            intrinsics: p(f[3]),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!("manifest {} lists no samples", path.display())));
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    read_manifest(path)?.iter().map(ManifestEntry::load).collect()
}

/// Writes scenes for `seeds` into `dir` with a `manifest.txt`. All scenes
/// are generated before any file is created.
pub fn write_corpus(dir: &Path, spec: &SceneSpec, seeds: &[u64]) -> Result<PathBuf> {
    let scenes: Vec<(u64, Scene)> = seeds
        .iter()
        .map(|&s| synth_scene(&spec.with_seed(s)).map(|sc| (s, sc)))
        .collect::<Result<_>>()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (seed, scene) in &scenes {
        let stem = format!("scene_{seed:010}");
        let names = [
            format!("{stem}_rgb.png"),
            format!("{stem}_sparse.png"),
            format!("{stem}_gt.png"),
            format!("{stem}_intrinsics.txt"),
        ];
        let s = &scene.sample;
        write_rgb_png(&s.rgb, &dir.join(&names[0]))?;
        write_depth_png(&s.sparse, &dir.join(&names[1]))?;
        write_depth_png(&s.gt, &dir.join(&names[2]))?;
        s.intrinsics.write(&dir.join(&names[3]))?;
        manifest.push_str(&names.join("\t"));
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Training-split seeds `first..first + count`.
pub fn train_seeds(first: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| first + i).collect()
}

/// Validation-split seeds, disjoint from every training seed below
/// [`VAL_SEED_BASE`].
pub fn val_seeds(first: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| VAL_SEED_BASE + first + i).collect()
}
