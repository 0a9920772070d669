//! Pinhole camera model: depth maps to point sets and back, feature
//! scattering onto the pixel grid, and point subsampling.
//!
//! Pixel convention: `(u, v) = (column, row)`, origin at the top-left,
//! pixel centers at integer coordinates.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::Config(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::Config("principal point must be finite".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics of the horizontally mirrored image of width `width`.
    pub fn flipped(&self, width: usize) -> Self {
        Self {
            cx: (width as f64 - 1.0) - self.cx,
            ..*self
        }
    }

    /// Parses `key=value` lines for `fx`, `fy`, `cx`, `cy`. Blank lines and
    /// `#` comments are ignored; unknown or repeated keys are rejected.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut vals: [Option<f64>; 4] = [None; 4];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("expected key=value, got {line:?}")))?;
            let slot = match k.trim() {
                "fx" => 0,
                "fy" => 1,
                "cx" => 2,
                "cy" => 3,
                other => return Err(Error::format(path, format!("unknown intrinsics key {other:?}"))),
            };
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("bad number for {}: {v:?}", k.trim())))?;
            if vals[slot].replace(v).is_some() {
                return Err(Error::format(path, format!("repeated key {:?}", k.trim())));
            }
        }
        match vals {
            [Some(fx), Some(fy), Some(cx), Some(cy)] => Self::new(fx, fy, cx, cy),
            _ => Err(Error::format(path, "intrinsics need fx, fy, cx and cy")),
        }
    }

    pub fn to_text(&self) -> String {
        format!("fx={}\nfy={}\ncx={}\ncy={}\n", self.fx, self.fy, self.cx, self.cy)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Metric depth grid with a validity mask. Invalid pixels carry depth 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a map from raw depths; pixels with non-positive or non-finite
    /// depth become invalid.
    pub fn from_depths(height: usize, width: usize, mut depth: Vec<f64>) -> Result<Self> {
        if depth.len() != height * width {
            return Err(Error::dim("depth_map", &[height, width], &[depth.len()]));
        }
        let valid: Vec<bool> = depth.iter().map(|&d| d > 0.0 && d.is_finite()).collect();
        for (d, &ok) in depth.iter_mut().zip(&valid) {
            if !ok {
                *d = 0.0;
            }
        }
        Ok(Self {
            height,
            width,
            depth,
            valid,
        })
    }

    /// All-valid map, used for network predictions. Predicted depth may be
    /// zero where the output is clamped.
    pub fn dense(height: usize, width: usize, depth: Vec<f64>) -> Self {
        assert_eq!(depth.len(), height * width);
        Self {
            height,
            width,
            depth,
            valid: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            depth: vec![0.0; height * width],
            valid: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn at(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then_some(self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Keeps only the pixels for which `keep` is true.
    pub fn masked(&self, keep: &[bool]) -> Self {
        let mut out = self.clone();
        for i in 0..out.depth.len() {
            if !keep[i] {
                out.valid[i] = false;
                out.depth[i] = 0.0;
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for v in 0..self.height {
            for u in 0..self.width {
                let (src, dst) = (v * self.width + u, v * self.width + (self.width - 1 - u));
                out.depth[dst] = self.depth[src];
                out.valid[dst] = self.valid[src];
            }
        }
        out
    }
}

/// Points in the camera frame with the pixel each one came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub coords: Vec<[f64; 3]>,
    /// Source pixel `(u, v)` of each point.
    pub pixel: Vec<(usize, usize)>,
    /// Metric depth, identical to `coords[i][2]`.
    pub depth: Vec<f64>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Subset in the given index order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            pixel: idx.iter().map(|&i| self.pixel[i]).collect(),
            depth: idx.iter().map(|&i| self.depth[i]).collect(),
        }
    }

    /// Flat `v·width + u` pixel index of each point.
    pub fn flat_pixels(&self, width: usize) -> Vec<usize> {
        self.pixel.iter().map(|&(u, v)| v * width + u).collect()
    }

    /// Coordinates as a row-major `N×3` array.
    pub fn coords_flat<T: Scalar>(&self) -> Vec<T> {
        self.coords
            .iter()
            .flat_map(|c| c.iter().map(|&x| T::of(x)))
            .collect()
    }
}

/// Lifts every valid pixel to a 3D point, in raster order.
pub fn backproject(map: &DepthMap, k: &CameraIntrinsics) -> Result<PointSet> {
    let mut pts = PointSet {
        coords: Vec::new(),
        pixel: Vec::new(),
        depth: Vec::new(),
    };
    for v in 0..map.height {
        for u in 0..map.width {
            let i = v * map.width + u;
            if !map.valid[i] {
                continue;
            }
            let z = map.depth[i];
            let x = (u as f64 - k.cx) * z / k.fx;
            let y = (v as f64 - k.cy) * z / k.fy;
            pts.coords.push([x, y, z]);
            pts.pixel.push((u, v));
            pts.depth.push(z);
        }
    }
    if pts.is_empty() {
        return Err(Error::EmptyInput("depth map has no valid pixels".into()));
    }
    Ok(pts)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedPoint {
    pub index: usize,
    pub u: usize,
    pub v: usize,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub points: Vec<ProjectedPoint>,
    /// Points that landed outside the image.
    pub dropped: usize,
}

/// Projects points to pixels, rounding half away from zero.
pub fn project(
    points: &PointSet,
    k: &CameraIntrinsics,
    height: usize,
    width: usize,
) -> Result<Projection> {
    let mut out = Projection {
        points: Vec::with_capacity(points.len()),
        dropped: 0,
    };
    for (index, &[x, y, z]) in points.coords.iter().enumerate() {
        if !(z > 0.0) {
            return Err(Error::BehindCamera { index, z });
        }
        let u = (x * k.fx / z + k.cx).round();
        let v = (y * k.fy / z + k.cy).round();
        if u < 0.0 || v < 0.0 || u >= width as f64 || v >= height as f64 {
            out.dropped += 1;
            continue;
        }
        out.points.push(ProjectedPoint {
            index,
            u: u as usize,
            v: v as usize,
            depth: z,
        });
    }
    if out.dropped > 0 {
        log::warn!("project: dropped {} out-of-bounds points", out.dropped);
    }
    Ok(out)
}

/// Per-pixel feature map with exactly one assigned vector per valid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeatureMap<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `C×H×W`, zero at invalid pixels.
    pub values: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> SparseFeatureMap<T> {
    pub fn at(&self, u: usize, v: usize) -> Vec<T> {
        let p = v * self.width + u;
        let plane = self.height * self.width;
        (0..self.channels).map(|c| self.values[c * plane + p]).collect()
    }
}

/// Writes each point's `C`-vector (`feats` is row-major `N×C`) at its source
/// pixel.
pub fn scatter_features<T: Scalar>(
    points: &PointSet,
    feats: &[T],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<SparseFeatureMap<T>> {
    if feats.len() != points.len() * channels {
        return Err(Error::dim(
            "scatter_features",
            &[points.len(), channels],
            &[feats.len()],
        ));
    }
    let plane = height * width;
    let mut values = vec![T::zero(); channels * plane];
    let mut valid = vec![false; plane];
    for (i, &(u, v)) in points.pixel.iter().enumerate() {
        if u >= width || v >= height {
            return Err(Error::Contract(format!(
                "scatter_features: pixel ({u}, {v}) outside {height}x{width}"
            )));
        }
        let p = v * width + u;
        if std::mem::replace(&mut valid[p], true) {
            return Err(Error::Collision { u, v });
        }
        for c in 0..channels {
            values[c * plane + p] = feats[i * channels + c];
        }
    }
    Ok(SparseFeatureMap {
        height,
        width,
        channels,
        values,
        valid,
    })
}

/// Uniform subset of `n` indices without replacement, ascending. All
/// indices when `len ≤ n`.
pub fn random_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, len, n).into_vec();
    idx.sort_unstable();
    idx
}

pub fn sample_random(points: &PointSet, n: usize, seed: u64) -> Result<PointSet> {
    if n == 0 {
        return Err(Error::Contract("sample_random: n must be at least 1".into()));
    }
    Ok(points.select(&random_indices(points.len(), n, seed)))
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy farthest point sampling; returns indices in selection order.
/// Ties go to the lower index.
pub fn farthest_indices(points: &PointSet, n: usize, start: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Contract("sample_farthest: n must be at least 1".into()));
    }
    if start >= points.len() {
        return Err(Error::Contract(format!(
            "sample_farthest: start index {start} out of range for {} points",
            points.len()
        )));
    }
    let n = n.min(points.len());
    let mut min_d: Vec<f64> = points
        .coords
        .iter()
        .map(|c| sq_dist(c, &points.coords[start]))
        .collect();
    let mut chosen = vec![false; points.len()];
    chosen[start] = true;
    let mut picked = vec![start];
    while picked.len() < n {
        let mut best = None;
        for (i, &d) in min_d.iter().enumerate() {
            if !chosen[i] && best.map_or(true, |(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (next, _) = best.expect("n ≤ len leaves an unchosen point");
        chosen[next] = true;
        picked.push(next);
        let c = points.coords[next];
        for (i, d) in min_d.iter_mut().enumerate() {
            *d = d.min(sq_dist(&points.coords[i], &c));
        }
    }
    Ok(picked)
}

/// Farthest point sample, returned in original relative order.
pub fn sample_farthest(points: &PointSet, n: usize, start: usize) -> Result<PointSet> {
    let picked: BTreeSet<usize> = farthest_indices(points, n, start)?.into_iter().collect();
    Ok(points.select(&picked.into_iter().collect::<Vec<_>>()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 60.0, 40.0).unwrap()
    }

    fn line_points(xs: &[f64]) -> PointSet {
        PointSet {
            coords: xs.iter().map(|&x| [x, 0.0, 1.0]).collect(),
            pixel: (0..xs.len()).map(|i| (i, 0)).collect(),
            depth: vec![1.0; xs.len()],
        }
    }

    #[test]
    fn backproject_hand_example() {
        let mut d = vec![0.0; 120 * 80];
        d[50 * 120 + 100] = 2.0;
        d[40 * 120 + 60] = 3.0;
        let m = DepthMap::from_depths(80, 120, d).unwrap();
        let p = backproject(&m, &k100()).unwrap();
        assert_eq!(p.len(), 2);
        // Raster order: row 40 first.
        assert_eq!(p.coords[0], [0.0, 0.0, 3.0]);
        let [x, y, z] = p.coords[1];
        assert!((x - 0.8).abs() < 1e-12 && (y - 0.2).abs() < 1e-12 && z == 2.0);
        assert_eq!(p.pixel[1], (100, 50));
    }

    #[test]
    fn backproject_counts_and_empty_error() {
        let mut d = vec![0.0; 100];
        for i in 0..37 {
            d[i * 2 % 100 + (i >= 50) as usize] = 1.0 + i as f64;
        }
        let m = DepthMap::from_depths(10, 10, d).unwrap();
        assert_eq!(backproject(&m, &k100()).unwrap().len(), m.valid_count());
        assert_eq!(m.valid_count(), 37);
        assert!(matches!(
            backproject(&DepthMap::empty(4, 4), &k100()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn project_hand_examples() {
        let pts = PointSet {
            coords: vec![[0.8, 0.2, 2.0], [0.0, 0.0, 5.0], [10.0, 0.0, 1.0]],
            pixel: vec![(0, 0); 3],
            depth: vec![2.0, 5.0, 1.0],
        };
        let pr = project(&pts, &k100(), 80, 120).unwrap();
        assert_eq!(pr.dropped, 1);
        assert_eq!((pr.points[0].u, pr.points[0].v), (100, 50));
        assert_eq!((pr.points[1].u, pr.points[1].v, pr.points[1].depth), (60, 40, 5.0));
        let behind = PointSet {
            coords: vec![[0.0, 0.0, -1.0]],
            pixel: vec![(0, 0)],
            depth: vec![-1.0],
        };
        assert!(matches!(
            project(&behind, &k100(), 80, 120),
            Err(Error::BehindCamera { index: 0, .. })
        ));
    }

    #[test]
    fn scatter_single_point_and_collision() {
        let pts = PointSet {
            coords: vec![[0.0, 0.0, 1.0]],
            pixel: vec![(3, 4)],
            depth: vec![1.0],
        };
        let feats: Vec<f32> = (0..17).map(|i| i as f32 + 1.0).collect();
        let m = scatter_features(&pts, &feats, 17, 6, 5).unwrap();
        assert_eq!(m.channels, 17);
        assert_eq!(m.valid.iter().filter(|&&v| v).count(), 1);
        assert_eq!(m.at(3, 4), feats);
        let nonzero = m.values.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 17);

        let dup = PointSet {
            coords: vec![[0.0; 3]; 2],
            pixel: vec![(1, 1), (1, 1)],
            depth: vec![1.0; 2],
        };
        assert!(matches!(
            scatter_features(&dup, &[0.0f32; 2], 1, 3, 3),
            Err(Error::Collision { u: 1, v: 1 })
        ));
    }

    #[test]
    fn fps_hand_examples() {
        let p = line_points(&[0.0, 1.0, 2.0, 9.0]);
        assert_eq!(farthest_indices(&p, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(farthest_indices(&p, 3, 0).unwrap(), vec![0, 3, 2]);
        assert_eq!(sample_farthest(&p, 4, 0).unwrap(), p);
        // Ties resolve to the lower index.
        let q = line_points(&[0.0, -1.0, 1.0]);
        assert_eq!(farthest_indices(&q, 2, 0).unwrap(), vec![0, 1]);
        assert!(farthest_indices(&q, 2, 3).is_err());
    }

    #[test]
    fn random_sampling_clamps_and_is_seeded() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let p = line_points(&xs);
        assert_eq!(sample_random(&p, 100, 1).unwrap(), p);
        assert_eq!(sample_random(&p, 500, 1).unwrap(), p);
        let a = sample_random(&p, 10, 7).unwrap();
        let b = sample_random(&p, 10, 7).unwrap();
        let c = sample_random(&p, 10, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 10);
        assert!(a.pixel.windows(2).all(|w| w[0].0 < w[1].0));
        assert!(sample_random(&p, 0, 1).is_err());
    }

    #[test]
    fn intrinsics_text() {
        let p = Path::new("k.txt");
        let k = CameraIntrinsics::parse("fx=100\nfy=90.5\n# c\ncx=60\ncy=40\n", p).unwrap();
        assert_eq!(k, CameraIntrinsics::new(100.0, 90.5, 60.0, 40.0).unwrap());
        assert_eq!(CameraIntrinsics::parse(&k.to_text(), p).unwrap(), k);
        assert!(CameraIntrinsics::parse("fx=1\nfy=1\ncx=0\ncy=0\nk1=0\n", p).is_err());
        assert!(CameraIntrinsics::parse("fx=1\nfy=1\ncx=0\n", p).is_err());
        assert!(CameraIntrinsics::parse("fx=-1\nfy=1\ncx=0\ncy=0\n", p).is_err());
    }

    #[test]
    fn flip_mirrors_pixels_and_principal_point() {
        let m = DepthMap::from_depths(1, 3, vec![1.0, 0.0, 3.0]).unwrap();
        let f = m.flip_horizontal();
        assert_eq!(f.depth(), &[3.0, 0.0, 1.0]);
        let k = k100();
        let pts = backproject(&m, &k).unwrap();
        let fpts = backproject(&f, &k.flipped(3)).unwrap();
        // Mirroring negates x.
        assert!((pts.coords[0][0] + fpts.coords[1][0]).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn roundtrip_recovers_pixels(
            h in 4usize..40, w in 4usize..40,
            fx in 20.0f64..500.0, fy in 20.0f64..500.0,
            cxr in 0.0f64..1.0, cyr in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<f64> = (0..h * w)
                .map(|_| if rng.gen_bool(0.3) { rng.gen_range(0.5..80.0) } else { 0.0 })
                .collect();
            let m = DepthMap::from_depths(h, w, d).unwrap();
            prop_assume!(m.valid_count() > 0);
            let k = CameraIntrinsics::new(fx, fy, cxr * w as f64, cyr * h as f64).unwrap();
            let pts = backproject(&m, &k).unwrap();
            let pr = project(&pts, &k, h, w).unwrap();
            prop_assert_eq!(pr.dropped, 0);
            for q in &pr.points {
                prop_assert_eq!((q.u, q.v), pts.pixel[q.index]);
                prop_assert!((q.depth - m.at(q.u, q.v).unwrap()).abs() < 1e-6);
                prop_assert_eq!(pts.coords[q.index][2].to_bits(), pts.depth[q.index].to_bits());
            }
        }
    }
}
