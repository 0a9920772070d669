//! Dynamic graph representation: stacked edge convolutions whose k-NN graph
//! is rebuilt from the current features at every layer, reduced to a
//! per-point geometric embedding with the point depth appended.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, ParamStore, Scalar, Tape, Tensor, Var};
use crate::camera::{scatter_features, PointSet, SparseFeatureMap};
use crate::error::{Error, Result};
use crate::knn::{knn_graph, NeighborIndex};
use crate::nn::{BatchNorm, Linear};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DgrConfig {
    pub layer_dims: Vec<usize>,
    pub k: usize,
    pub embed_dim: usize,
}

impl Default for DgrConfig {
    fn default() -> Self {
        Self {
            layer_dims: vec![64, 64, 128, 256],
            k: 9,
            embed_dim: 16,
        }
    }
}

impl DgrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() || self.layer_dims.contains(&0) {
            return Err(Error::Config(format!("bad layer_dims {:?}", self.layer_dims)));
        }
        if self.k == 0 || self.embed_dim == 0 {
            return Err(Error::Config("k and embed_dim must be at least 1".into()));
        }
        Ok(())
    }

    /// Embedding width: structural channels plus the depth channel.
    pub fn channels(&self) -> usize {
        self.embed_dim + 1
    }
}

/// One edge convolution: a shared map over `[x_i ⊙ (x_j − x_i)]`, batchnorm
/// over all `N·k` edges, ReLU, then a channel-wise max over neighbors.
#[derive(Clone, Debug)]
pub struct EdgeConvLayer {
    pub linear: Linear,
    pub bn: Option<BatchNorm>,
    pub k: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl EdgeConvLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, &format!("{name}.edge"), 2 * in_dim, out_dim, false, rng)?,
            bn: Some(BatchNorm::new(store, &format!("{name}.bn"), out_dim)?),
            k,
            in_dim,
            out_dim,
        })
    }

    /// Returns the layer output and the graph it was computed on.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        feats: Var,
        mode: Mode,
    ) -> Result<(Var, NeighborIndex)> {
        let n = tape.shape(feats)[0];
        if n < 2 {
            return Err(Error::EmptyInput(format!("edge convolution needs 2 points, got {n}")));
        }
        let graph = knn_graph(tape.value(feats), self.k)?;
        let k = graph.k;
        let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        let center = tape.gather_rows(feats, &centers)?;
        let nbr = tape.gather_rows(feats, &graph.indices)?;
        let offset = tape.sub(nbr, center)?;
        let edge = tape.concat(&[center, offset], 1)?;
        let mut h = self.linear.forward(tape, store, edge)?;
        if let Some(bn) = &self.bn {
            h = bn.forward(tape, store, h, mode)?;
        }
        let h = tape.relu(h);
        let h = tape.reshape(h, &[n, k, self.out_dim])?;
        Ok((tape.max_over_neighbors(h)?, graph))
    }
}

#[derive(Clone, Debug)]
pub struct DgrModule {
    pub config: DgrConfig,
    pub layers: Vec<EdgeConvLayer>,
    pub reduce: Linear,
    pub reduce_bn: BatchNorm,
}

/// Per-point `[N, embed_dim + 1]` embedding; the last column is depth.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricEmbedding<T> {
    pub n: usize,
    pub channels: usize,
    pub per_point: Vec<T>,
}

impl<T: Scalar> GeometricEmbedding<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.per_point[i * self.channels..(i + 1) * self.channels]
    }
}

/// Tape handles produced by [`DgrModule::forward`].
pub struct DgrOutput {
    pub embedding: Var,
    pub layer_outputs: Vec<Var>,
    pub graphs: Vec<NeighborIndex>,
}

impl DgrModule {
    /// Registers parameters under `prefix` (conventionally `dgr`).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: DgrConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut din = 3;
        for (l, &dout) in config.layer_dims.iter().enumerate() {
            layers.push(EdgeConvLayer::new(store, &format!("{prefix}.layer{l}"), din, dout, config.k, rng)?);
            din = dout;
        }
        let total: usize = config.layer_dims.iter().sum();
        let reduce = Linear::new(store, &format!("{prefix}.reduce"), total, config.embed_dim, false, rng)?;
        let reduce_bn = BatchNorm::new(store, &format!("{prefix}.reduce.bn"), config.embed_dim)?;
        Ok(Self {
            config,
            layers,
            reduce,
            reduce_bn,
        })
    }

    /// Embeds a point set. The first graph is built on raw camera-frame
    /// coordinates, every later one on the previous layer's features.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        points: &PointSet,
        mode: Mode,
    ) -> Result<DgrOutput> {
        let n = points.len();
        if n < 2 {
            return Err(Error::EmptyInput(format!("embedding needs 2 points, got {n}")));
        }
        let mut f = tape.constant(Tensor::new(&[n, 3], points.coords_flat())?);
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let mut graphs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, g) = layer.forward(tape, store, f, mode)?;
            layer_outputs.push(out);
            graphs.push(g);
            f = out;
        }
        let multi = tape.concat(&layer_outputs, 1)?;
        let r = self.reduce.forward(tape, store, multi)?;
        let r = self.reduce_bn.forward(tape, store, r, mode)?;
        let structural = tape.relu(r);
        let depth = tape.constant(Tensor::new(
            &[n, 1],
            points.depth.iter().map(|&z| T::of(z)).collect(),
        )?);
        let embedding = tape.concat(&[structural, depth], 1)?;
        Ok(DgrOutput {
            embedding,
            layer_outputs,
            graphs,
        })
    }

    /// Value-only convenience wrapper around [`DgrModule::forward`].
    pub fn embed<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        points: &PointSet,
        mode: Mode,
    ) -> Result<GeometricEmbedding<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, points, mode)?;
        Ok(GeometricEmbedding {
            n: points.len(),
            channels: self.config.channels(),
            per_point: tape.value(out.embedding).data().to_vec(),
        })
    }
}

/// Scatters the embedding of each point onto its source pixel.
pub fn embed_to_map<T: Scalar>(
    emb: &GeometricEmbedding<T>,
    points: &PointSet,
    height: usize,
    width: usize,
) -> Result<SparseFeatureMap<T>> {
    if emb.n != points.len() {
        return Err(Error::Contract(format!(
            "embed_to_map: {} embeddings for {} points",
            emb.n,
            points.len()
        )));
    }
    scatter_features(points, &emb.per_point, emb.channels, height, width)
}

/// Differentiable counterpart of [`embed_to_map`]: `[N, C]` → `[1, C, H, W]`.
pub fn embed_to_map_var<T: Scalar>(
    tape: &mut Tape<T>,
    embedding: Var,
    points: &PointSet,
    height: usize,
    width: usize,
) -> Result<Var> {
    if let Some(&(u, v)) = points.pixel.iter().find(|&&(u, v)| u >= width || v >= height) {
        return Err(Error::Contract(format!(
            "embed_to_map: pixel ({u}, {v}) outside {height}x{width}"
        )));
    }
    tape.scatter_pixels(embedding, &points.flat_pixels(width), height, width)
}
