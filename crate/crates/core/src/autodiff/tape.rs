//! Reverse-mode differentiation tape.
//!
//! Every op appends one node holding its output value and enough saved
//! state to run its backward rule. Nodes are only ever appended, so the
//! node order is a topological order and backward is a single reverse sweep.

use std::fmt;

use crate::autodiff::conv::{col2im, im2col, ConvGeom};
use crate::autodiff::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(Self::Mean),
            "sum" => Some(Self::Sum),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        }
    }
}

/// Batchnorm hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnParams {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnParams {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    Linear,
    Relu,
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    MaxOverNeighbors,
    Concat,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    GatherRows,
    Reshape,
    ScatterPixels,
    MseMasked,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Leaf,
        OpKind::Param,
        OpKind::Linear,
        OpKind::Relu,
        OpKind::BatchNorm,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::MaxOverNeighbors,
        OpKind::Concat,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::GatherRows,
        OpKind::Reshape,
        OpKind::ScatterPixels,
        OpKind::MseMasked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::Linear => "linear",
            OpKind::Relu => "relu",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::MaxOverNeighbors => "max_over_neighbors",
            OpKind::Concat => "concat",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::GatherRows => "gather_rows",
            OpKind::Reshape => "reshape",
            OpKind::ScatterPixels => "scatter_pixels",
            OpKind::MseMasked => "mse_masked",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        layout: (usize, usize, usize),
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    MaxOverNeighbors {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    GatherRows {
        input: Var,
        index: Vec<usize>,
        row: usize,
    },
    Reshape(Var),
    ScatterPixels {
        input: Var,
        pixels: Vec<usize>,
        channels: usize,
        plane: usize,
    },
    MseMasked {
        pred: Var,
        target: Vec<T>,
        mask: Vec<bool>,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::Linear { .. } => OpKind::Linear,
            Op::Relu(_) => OpKind::Relu,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::MaxOverNeighbors { .. } => OpKind::MaxOverNeighbors,
            Op::Concat { .. } => OpKind::Concat,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Reshape(_) => OpKind::Reshape,
            Op::ScatterPixels { .. } => OpKind::ScatterPixels,
            Op::MseMasked { .. } => OpKind::MseMasked,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Channel layout `(outer, channels, inner)` used by batchnorm: `[N, D]`
/// normalizes over rows, `[B, C, H, W]` over batch and pixels.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, d] => Some((*n, *d, 1)),
        [b, c, h, w] => Some((*b, *c, h * w)),
        _ => None,
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Negates the backward rule of `kind`. Used to check that the gradient
    /// checker detects broken rules.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf | Op::Param(_)) || value.is_finite(),
            "non-finite output from {}",
            op.kind()
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter; backward gradients flow back to `id`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let (n, din, dout) = match (xs.as_slice(), ws.as_slice()) {
            ([n, d], [d2, o]) if d == d2 => (*n, *d, *o),
            _ => return Err(Error::dim("linear", &xs, &ws)),
        };
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [dout] {
                return Err(Error::dim("linear", &ws, bs));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        T::gemm(
            n,
            din,
            dout,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(o, &b)| *o += b);
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(&[n, dout], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<T> = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let t = Tensor::new(x.shape(), out).expect("same shape");
        let rg = self.rg(&[input]);
        self.push(t, Op::Relu(input), rg)
    }

    /// Per-channel batch normalization of `[N, D]` or `[B, C, H, W]` input.
    ///
    /// Train mode normalizes with batch statistics and updates the running
    /// statistics by exponential moving average (unbiased variance); eval
    /// mode uses the running statistics unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        mode: Mode,
        bn: BnParams,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (outer, c, inner) =
            channel_layout(&shape).ok_or_else(|| Error::dim("batchnorm", &shape, &[]))?;
        for v in [scale, shift] {
            if self.shape(v) != [c] {
                return Err(Error::dim("batchnorm", &shape, self.shape(v)));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batchnorm", &shape, &[running_mean.len()]));
        }
        let count = outer * inner;
        let train = mode == Mode::Train;
        if train && count < 2 {
            return Err(Error::DegenerateBatch(count));
        }
        let x = self.value(input).data();
        let eps = T::of(bn.eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            let inv_n = T::one() / T::of(count as f64);
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    mean[ch] += x[base..base + inner].iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_n);
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    let m = mean[ch];
                    var[ch] += x[base..base + inner]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_n);
            let mom = T::of(bn.momentum);
            let unbias = T::of(count as f64 / (count - 1) as f64);
            for ch in 0..c {
                running_mean[ch] = (T::one() - mom) * running_mean[ch] + mom * mean[ch];
                running_var[ch] = (T::one() - mom) * running_var[ch] + mom * var[ch] * unbias;
            }
        } else {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(scale).data();
        let b = self.value(shift).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + b[ch];
                }
            }
        }
        let rg = self.rg(&[input, scale, shift]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                input,
                scale,
                shift,
                layout: (outer, c, inner),
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    fn conv_checks(
        &self,
        op: &'static str,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        bias_len: usize,
    ) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [bias_len] {
                return Err(Error::dim(op, self.shape(weight), self.shape(b)));
            }
        }
        if self.shape(input).len() != 4 || self.shape(weight).len() != 4 {
            return Err(Error::dim(op, self.shape(input), self.shape(weight)));
        }
        Ok(())
    }

    /// Cross-correlation of `[B, Cin, H, W]` with weight `[Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let cout = ws.get(0).copied().unwrap_or(0);
        self.conv_checks("conv2d", input, weight, bias, cout)?;
        if xs[1] != ws[1] {
            return Err(Error::dim("conv2d", &xs, &ws));
        }
        let batch = xs[0];
        let geom = ConvGeom::forward(xs[1], xs[2], xs[3], cout, ws[2], ws[3], stride, pad)?;
        let mut out = vec![T::zero(); batch * geom.out_len()];
        let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        for b in 0..batch {
            im2col(&geom, &x[b * geom.in_len()..][..geom.in_len()], &mut cols);
            T::gemm(
                cout,
                geom.col_rows(),
                geom.col_cols(),
                w,
                false,
                &cols,
                false,
                &mut out[b * geom.out_len()..][..geom.out_len()],
                false,
            );
        }
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv).data(), geom.col_cols());
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(&[batch, cout, geom.out_h, geom.out_w], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
            },
            rg,
        ))
    }

    /// Transposed convolution of `[B, Cin, H, W]` with weight
    /// `[Cin, Cout, kh, kw]`; output extent `(H−1)·stride − 2·pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let cout = ws.get(1).copied().unwrap_or(0);
        self.conv_checks("conv_transpose2d", input, weight, bias, cout)?;
        if xs[1] != ws[0] {
            return Err(Error::dim("conv_transpose2d", &xs, &ws));
        }
        let batch = xs[0];
        let geom = ConvGeom::transposed(xs[1], xs[2], xs[3], cout, ws[2], ws[3], stride, pad)?;
        // `geom` describes the forward conv from the output map back to the input map.
        let mut out = vec![T::zero(); batch * geom.in_len()];
        let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        for b in 0..batch {
            T::gemm(
                geom.col_rows(),
                geom.out_c,
                geom.col_cols(),
                w,
                true,
                &x[b * geom.out_len()..][..geom.out_len()],
                false,
                &mut cols,
                false,
            );
            col2im(&geom, &cols, &mut out[b * geom.in_len()..][..geom.in_len()]);
        }
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv).data(), geom.in_h * geom.in_w);
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(&[batch, cout, geom.in_h, geom.in_w], out)?,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                batch,
            },
            rg,
        ))
    }

    /// Channel-wise max over the neighbor axis of `[N, k, D]`. The first
    /// maximal entry wins ties and receives the whole gradient.
    pub fn max_over_neighbors(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let (n, k, d) = match s.as_slice() {
            [n, k, d] => (*n, *k, *d),
            _ => return Err(Error::dim("max_over_neighbors", &s, &[])),
        };
        if k == 0 {
            return Err(Error::EmptyNeighborhood);
        }
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * d];
        let mut argmax = vec![0usize; n * d];
        for i in 0..n {
            let base = i * k * d;
            out[i * d..(i + 1) * d].copy_from_slice(&x[base..base + d]);
            for (c, a) in argmax[i * d..(i + 1) * d].iter_mut().enumerate() {
                *a = base + c;
            }
            for j in 1..k {
                let row = base + j * d;
                for c in 0..d {
                    if x[row + c] > out[i * d + c] {
                        out[i * d + c] = x[row + c];
                        argmax[i * d + c] = row + c;
                    }
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(&[n, d], out)?,
            Op::MaxOverNeighbors { input, argmax },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", &base, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let chunks: Vec<usize> = inputs
            .iter()
            .map(|&v| self.shape(v)[axis..].iter().product())
            .collect();
        let total: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(total);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape(), x.data().iter().map(|&v| v * c).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Selects rows (slices along the leading axis) by index.
    pub fn gather_rows(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let n = *s
            .first()
            .ok_or_else(|| Error::dim("gather_rows", &s, &[]))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather_rows: index {bad} out of range for {n} rows"
            )));
        }
        let row: usize = s[1..].iter().product();
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut shape = s.clone();
        shape[0] = index.len();
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::GatherRows {
                input,
                index: index.to_vec(),
                row,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshaped(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, Op::Reshape(input), rg))
    }

    /// Writes row `i` of `[N, C]` input into pixel `pixels[i]` (flat
    /// `v·W + u`) of a zero `[1, C, H, W]` map.
    pub fn scatter_pixels(
        &mut self,
        input: Var,
        pixels: &[usize],
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let (n, c) = match s.as_slice() {
            [n, c] => (*n, *c),
            _ => return Err(Error::dim("scatter_pixels", &s, &[])),
        };
        if n != pixels.len() {
            return Err(Error::dim("scatter_pixels", &s, &[pixels.len()]));
        }
        let plane = height * width;
        let mut taken = vec![false; plane];
        for &p in pixels {
            if p >= plane {
                return Err(Error::Contract(format!(
                    "scatter_pixels: pixel {p} outside {height}x{width}"
                )));
            }
            if std::mem::replace(&mut taken[p], true) {
                return Err(Error::Collision {
                    u: p % width,
                    v: p / width,
                });
            }
        }
        let x = self.value(input).data();
        let mut out = vec![T::zero(); c * plane];
        for (i, &p) in pixels.iter().enumerate() {
            for ch in 0..c {
                out[ch * plane + p] = x[i * c + ch];
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(&[1, c, height, width], out)?,
            Op::ScatterPixels {
                input,
                pixels: pixels.to_vec(),
                channels: c,
                plane,
            },
            rg,
        ))
    }

    /// Masked squared error. The elements of `pred` are split into
    /// consecutive equal-sized groups (one per sample); the loss is the mean
    /// over groups of each group's sum (or mean) of squared errors over
    /// valid pixels.
    pub fn mse_masked(
        &mut self,
        pred: Var,
        target: &[T],
        mask: &[bool],
        groups: usize,
        reduction: Reduction,
    ) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n || mask.len() != n {
            return Err(Error::dim("mse_masked", self.shape(pred), &[target.len()]));
        }
        if groups == 0 || n % groups != 0 {
            return Err(Error::Contract(format!(
                "mse_masked: {n} elements cannot be split into {groups} groups"
            )));
        }
        let per = n / groups;
        let g_norm = T::one() / T::of(groups as f64);
        let mut weights = Vec::with_capacity(groups);
        for g in 0..groups {
            let count = mask[g * per..(g + 1) * per].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::NoSupervision);
            }
            weights.push(match reduction {
                Reduction::Sum => g_norm,
                Reduction::Mean => g_norm / T::of(count as f64),
            });
        }
        let p = self.value(pred).data();
        let mut loss = T::zero();
        for i in 0..n {
            if mask[i] {
                let e = target[i] - p[i];
                loss += weights[i / per] * e * e;
            }
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MseMasked {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and accumulates into the gradients of every
    /// parameter recorded on this tape. Parameters that received no
    /// gradient get zeros. Repeated calls accumulate; call
    /// [`ParamStore::zero_grads`] to reset.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<T> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                match grads.get(Var(i)) {
                    Some(g) => store.accumulate_grad(id, g),
                    None => store.accumulate_grad(id, &Tensor::zeros(node.value.shape())),
                }
            }
        }
        Ok(self.value(loss).item())
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulates `f`'s contribution into the gradient slot of `v`.
        fn acc<T: Scalar>(
            nodes: &[Node<T>],
            grads: &mut [Option<Vec<T>>],
            v: Var,
            f: impl FnOnce(&mut [T]),
        ) {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        }
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let ws = nodes[weight.0].value.shape();
                let (din, dout) = (ws[0], ws[1]);
                let n = g.len() / dout;
                acc(nodes, grads, *input, |dx| {
                    T::gemm(n, dout, din, g, false, val(*weight), true, dx, true)
                });
                acc(nodes, grads, *weight, |dw| {
                    T::gemm(din, n, dout, val(*input), true, g, false, dw, true)
                });
                if let Some(b) = bias {
                    acc(nodes, grads, *b, |db| {
                        for row in g.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                        }
                    });
                }
            }
            Op::Relu(x) => acc(nodes, grads, *x, |dx| {
                for ((d, &xv), &gv) in dx.iter_mut().zip(val(*x)).zip(g) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            }),
            Op::BatchNorm {
                input,
                scale,
                shift,
                layout: (outer, c, inner),
                xhat,
                inv_std,
                train,
            } => {
                let (outer, c, inner) = (*outer, *c, *inner);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                acc(nodes, grads, *shift, |d| {
                    d.iter_mut().zip(&sum_g).for_each(|(a, &b)| *a += b)
                });
                acc(nodes, grads, *scale, |d| {
                    d.iter_mut().zip(&sum_gx).for_each(|(a, &b)| *a += b)
                });
                let gamma = val(*scale);
                let inv_n = T::one() / T::of((outer * inner) as f64);
                acc(nodes, grads, *input, |dx| {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gamma[ch] * inv_std[ch];
                            for i in base..base + inner {
                                dx[i] += if *train {
                                    k * (g[i] - inv_n * sum_g[ch] - xhat[i] * inv_n * sum_gx[ch])
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
            } => {
                let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
                let x = val(*input);
                let w = val(*weight);
                let mut dcols = vec![T::zero(); cols.len()];
                for b in 0..*batch {
                    let gb = &g[b * geom.out_len()..][..geom.out_len()];
                    if wants(*weight) {
                        im2col(geom, &x[b * geom.in_len()..][..geom.in_len()], &mut cols);
                        acc(nodes, grads, *weight, |dw| {
                            T::gemm(
                                geom.out_c,
                                geom.col_cols(),
                                geom.col_rows(),
                                gb,
                                false,
                                &cols,
                                true,
                                dw,
                                true,
                            )
                        });
                    }
                    if wants(*input) {
                        T::gemm(
                            geom.col_rows(),
                            geom.out_c,
                            geom.col_cols(),
                            w,
                            true,
                            gb,
                            false,
                            &mut dcols,
                            false,
                        );
                        acc(nodes, grads, *input, |dx| {
                            col2im(geom, &dcols, &mut dx[b * geom.in_len()..][..geom.in_len()])
                        });
                    }
                }
                if let Some(bv) = bias {
                    acc(nodes, grads, *bv, |db| {
                        channel_bias_grad(db, g, geom.col_cols())
                    });
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                batch,
            } => {
                let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
                let x = val(*input);
                let w = val(*weight);
                for b in 0..*batch {
                    let gb = &g[b * geom.in_len()..][..geom.in_len()];
                    im2col(geom, gb, &mut cols);
                    acc(nodes, grads, *input, |dx| {
                        T::gemm(
                            geom.out_c,
                            geom.col_rows(),
                            geom.col_cols(),
                            w,
                            false,
                            &cols,
                            false,
                            &mut dx[b * geom.out_len()..][..geom.out_len()],
                            true,
                        )
                    });
                    acc(nodes, grads, *weight, |dw| {
                        T::gemm(
                            geom.out_c,
                            geom.col_cols(),
                            geom.col_rows(),
                            &x[b * geom.out_len()..][..geom.out_len()],
                            false,
                            &cols,
                            true,
                            dw,
                            true,
                        )
                    });
                }
                if let Some(bv) = bias {
                    acc(nodes, grads, *bv, |db| {
                        channel_bias_grad(db, g, geom.in_h * geom.in_w)
                    });
                }
            }
            Op::MaxOverNeighbors { input, argmax } => acc(nodes, grads, *input, |dx| {
                for (&a, &gv) in argmax.iter().zip(g) {
                    dx[a] += gv;
                }
            }),
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let stride: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    acc(nodes, grads, v, |dx| {
                        for o in 0..*outer {
                            let src = &g[o * stride + offset..][..c];
                            dx[o * c..(o + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    });
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                acc(nodes, grads, *a, |d| add_into(d, g));
                acc(nodes, grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(nodes, grads, *a, |d| add_into(d, g));
                acc(nodes, grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                acc(nodes, grads, *a, |d| {
                    for ((x, &y), &gv) in d.iter_mut().zip(val(*b)).zip(g) {
                        *x += y * gv;
                    }
                });
                acc(nodes, grads, *b, |d| {
                    for ((x, &y), &gv) in d.iter_mut().zip(val(*a)).zip(g) {
                        *x += y * gv;
                    }
                });
            }
            Op::Scale(a, c) => acc(nodes, grads, *a, |d| {
                d.iter_mut().zip(g).for_each(|(x, &y)| *x += *c * y)
            }),
            Op::Sum(a) => acc(nodes, grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::GatherRows { input, index, row } => acc(nodes, grads, *input, |dx| {
                for (j, &i) in index.iter().enumerate() {
                    dx[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[j * row..(j + 1) * row])
                        .for_each(|(d, &s)| *d += s);
                }
            }),
            Op::Reshape(a) => acc(nodes, grads, *a, |d| add_into(d, g)),
            Op::ScatterPixels {
                input,
                pixels,
                channels,
                plane,
            } => acc(nodes, grads, *input, |dx| {
                for (i, &p) in pixels.iter().enumerate() {
                    for ch in 0..*channels {
                        dx[i * channels + ch] += g[ch * plane + p];
                    }
                }
            }),
            Op::MseMasked {
                pred,
                target,
                mask,
                weights,
            } => {
                let per = target.len() / weights.len();
                let two = T::of(2.0);
                acc(nodes, grads, *pred, |dx| {
                    for (i, &p) in val(*pred).iter().enumerate() {
                        if mask[i] {
                            dx[i] += g[0] * two * weights[i / per] * (p - target[i]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad<T: Scalar>(db: &mut [T], g: &[T], plane: usize) {
    let c = db.len();
    for (i, chunk) in g.chunks(plane).enumerate() {
        db[i % c] += chunk.iter().copied().sum::<T>();
    }
}
