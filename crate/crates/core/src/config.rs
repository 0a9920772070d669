//! Plain-text `key=value` configuration for the network and training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{Adam, Reduction};
use crate::dgr::DgrConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SamplingMode {
    #[default]
    Random,
    Fps,
}

impl SamplingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Fps => "fps",
        }
    }
}

/// What the geometry branch sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GeometryInput {
    /// The scattered per-point embedding.
    #[default]
    Embedding,
    /// The raw one-channel sparse depth map (baseline).
    Depth,
}

impl GeometryInput {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Embedding => "embedding",
            Self::Depth => "depth",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub color_widths: [usize; 3],
    pub geo_widths: [usize; 3],
    /// Widths of p², p¹, p⁰. The first two must equal the color widths at
    /// 1/4 and 1/2 scale so the sums are defined.
    pub dec_widths: [usize; 3],
    pub dgr: DgrConfig,
    pub loss_reduction: Reduction,
    pub sampling: SamplingMode,
    /// Points kept for the embedding during training.
    pub sample_count: usize,
    /// Optional cap on embedded points at inference.
    pub infer_cap: Option<usize>,
    pub geometry_input: GeometryInput,
    /// Initial bias of the depth head, in meters.
    pub head_bias: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            color_widths: [16, 32, 64],
            geo_widths: [16, 32, 64],
            dec_widths: [32, 16, 16],
            dgr: DgrConfig::default(),
            loss_reduction: Reduction::Mean,
            sampling: SamplingMode::Random,
            sample_count: 8000,
            infer_cap: None,
            geometry_input: GeometryInput::Embedding,
            head_bias: 5.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgr.validate()?;
        let all = self
            .color_widths
            .iter()
            .chain(&self.geo_widths)
            .chain(&self.dec_widths);
        if all.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.dec_widths[0] != self.color_widths[1] || self.dec_widths[1] != self.color_widths[0] {
            return Err(Error::Config(format!(
                "dec_widths {:?} must start with color widths {} and {} for the skip sums",
                self.dec_widths, self.color_widths[1], self.color_widths[0]
            )));
        }
        if self.sample_count == 0 || self.infer_cap == Some(0) {
            return Err(Error::Config("point sample counts must be positive".into()));
        }
        if !self.head_bias.is_finite() {
            return Err(Error::Config("head_bias must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: Adam,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Random horizontal flips of rgb, depth and intrinsics.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: Adam::default(),
            batch_size: 4,
            epochs: 10,
            max_steps: None,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("bad optimizer settings {a:?}")));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Config {
    pub net: NetConfig,
    pub train: TrainConfig,
}

fn list(v: &str) -> Option<Vec<usize>> {
    v.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn triple(v: &str) -> Option<[usize; 3]> {
    list(v)?.try_into().ok()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_usize(v: &str) -> Option<Option<usize>> {
    if v == "none" {
        Some(None)
    } else {
        v.parse().ok().map(Some)
    }
}

fn opt_text(v: Option<usize>) -> String {
    v.map_or("none".into(), |x| x.to_string())
}

impl Config {
    /// Reads `key=value` lines over the defaults. Unknown keys, repeated
    /// keys and unparsable values are errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = Config::default();
        let mut seen = std::collections::HashSet::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("expected key=value, got {line:?}")))?;
            let (key, val) = (key.trim(), val.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::format(path, format!("repeated key {key:?}")));
            }
            let bad = || Error::format(path, format!("bad value for {key}: {val:?}"));
            let n = &mut c.net;
            let t = &mut c.train;
            match key {
                "color_widths" => n.color_widths = triple(val).ok_or_else(bad)?,
                "geo_widths" => n.geo_widths = triple(val).ok_or_else(bad)?,
                "dec_widths" => n.dec_widths = triple(val).ok_or_else(bad)?,
                "layer_dims" => n.dgr.layer_dims = list(val).ok_or_else(bad)?,
                "k" => n.dgr.k = val.parse().map_err(|_| bad())?,
                "embed_dim" => n.dgr.embed_dim = val.parse().map_err(|_| bad())?,
                "loss_reduction" => n.loss_reduction = Reduction::parse(val).ok_or_else(bad)?,
                "sampling" => {
                    n.sampling = match val {
                        "random" => SamplingMode::Random,
                        "fps" => SamplingMode::Fps,
                        _ => return Err(bad()),
                    }
                }
                "sample_count" => n.sample_count = val.parse().map_err(|_| bad())?,
                "infer_cap" => n.infer_cap = opt_usize(val).ok_or_else(bad)?,
                "geometry_input" => {
                    n.geometry_input = match val {
                        "embedding" => GeometryInput::Embedding,
                        "depth" => GeometryInput::Depth,
                        _ => return Err(bad()),
                    }
                }
                "head_bias" => n.head_bias = val.parse().map_err(|_| bad())?,
                "lr" => t.adam.lr = val.parse().map_err(|_| bad())?,
                "beta1" => t.adam.beta1 = val.parse().map_err(|_| bad())?,
                "beta2" => t.adam.beta2 = val.parse().map_err(|_| bad())?,
                "adam_eps" => t.adam.eps = val.parse().map_err(|_| bad())?,
                "batch_size" => t.batch_size = val.parse().map_err(|_| bad())?,
                "epochs" => t.epochs = val.parse().map_err(|_| bad())?,
                "max_steps" => t.max_steps = opt_usize(val).ok_or_else(bad)?,
                "flip" => t.flip = val.parse().map_err(|_| bad())?,
                _ => return Err(Error::format(path, format!("unknown config key {key:?}"))),
            }
        }
        c.net.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let (n, t) = (&self.net, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("color_widths", join(&n.color_widths));
        kv("geo_widths", join(&n.geo_widths));
        kv("dec_widths", join(&n.dec_widths));
        kv("layer_dims", join(&n.dgr.layer_dims));
        kv("k", n.dgr.k.to_string());
        kv("embed_dim", n.dgr.embed_dim.to_string());
        kv("loss_reduction", n.loss_reduction.as_str().into());
        kv("sampling", n.sampling.as_str().into());
        kv("sample_count", n.sample_count.to_string());
        kv("infer_cap", opt_text(n.infer_cap));
        kv("geometry_input", n.geometry_input.as_str().into());
        kv("head_bias", n.head_bias.to_string());
        kv("lr", t.adam.lr.to_string());
        kv("beta1", t.adam.beta1.to_string());
        kv("beta2", t.adam.beta2.to_string());
        kv("adam_eps", t.adam.eps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("max_steps", opt_text(t.max_steps));
        kv("flip", t.flip.to_string());
        s
    }
}
