//! Exact k-nearest-neighbor graphs over point features.

use std::cmp::Ordering;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Directed k-NN graph: row `i` lists the `k` nearest other points of `i`,
/// ascending by squared distance, ties by ascending index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    pub n: usize,
    pub k: usize,
    /// `k` requested by the caller before clamping to `n − 1`.
    pub requested_k: usize,
    pub indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn clamped(&self) -> bool {
        self.k < self.requested_k
    }
}

fn rows<T: Scalar>(feats: &Tensor<T>) -> Result<(usize, usize)> {
    match feats.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::dim("knn", s, &[])),
    }
}

#[inline]
fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `out[i][j] = ‖f_i − f_j‖²`, computed from explicit differences so the
/// result is exactly symmetric with an exactly zero diagonal.
pub fn pairwise_sq_dist<T: Scalar>(feats: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = rows(feats)?;
    if n < 2 {
        return Err(Error::EmptyInput(format!("pairwise distances need 2 points, got {n}")));
    }
    let f = feats.data();
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(&f[i * d..(i + 1) * d], &f[j * d..(j + 1) * d]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Tensor::new(&[n, n], out)
}

/// Builds the k-NN graph of `[N, D]` features by exhaustive search.
/// `k` is clamped to `N − 1`; self-edges are excluded.
pub fn knn_graph<T: Scalar>(feats: &Tensor<T>, k: usize) -> Result<NeighborIndex> {
    let (n, d) = rows(feats)?;
    if n < 2 {
        return Err(Error::EmptyInput(format!("k-NN graph needs 2 points, got {n}")));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let kk = k.min(n - 1);
    let f = feats.data();
    let mut indices = Vec::with_capacity(n * kk);
    let mut cand: Vec<(T, usize)> = Vec::with_capacity(n - 1);
    let cmp = |a: &(T, usize), b: &(T, usize)| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
    };
    for i in 0..n {
        let fi = &f[i * d..(i + 1) * d];
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(fi, &f[j * d..(j + 1) * d]), j)),
        );
        if kk < cand.len() {
            cand.select_nth_unstable_by(kk - 1, cmp);
            cand.truncate(kk);
        }
        cand.sort_unstable_by(cmp);
        indices.extend(cand.iter().map(|&(_, j)| j));
    }
    Ok(NeighborIndex {
        n,
        k: kk,
        requested_k: k,
        indices,
    })
}

/// Edge operands of `[N, D]` features: `center[i][j] = f_i` and
/// `offset[i][j] = f_{nbr(i,j)} − f_i`, both `[N, k, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePair<T> {
    pub center: Tensor<T>,
    pub offset: Tensor<T>,
}

pub fn gather_edges<T: Scalar>(feats: &Tensor<T>, nbrs: &NeighborIndex) -> Result<EdgePair<T>> {
    let (n, d) = rows(feats)?;
    if n != nbrs.n {
        return Err(Error::Contract(format!(
            "gather_edges: graph over {} points, features for {n}",
            nbrs.n
        )));
    }
    if let Some(&bad) = nbrs.indices.iter().find(|&&j| j >= n) {
        return Err(Error::Contract(format!("gather_edges: neighbor {bad} out of range")));
    }
    let f = feats.data();
    let k = nbrs.k;
    let mut center = Vec::with_capacity(n * k * d);
    let mut offset = Vec::with_capacity(n * k * d);
    for i in 0..n {
        let fi = &f[i * d..(i + 1) * d];
        for &j in nbrs.row(i) {
            center.extend_from_slice(fi);
            offset.extend(f[j * d..(j + 1) * d].iter().zip(fi).map(|(&a, &b)| a - b));
        }
    }
    Ok(EdgePair {
        center: Tensor::new(&[n, k, d], center)?,
        offset: Tensor::new(&[n, k, d], offset)?,
    })
}
