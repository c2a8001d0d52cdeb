use serde::{Deserialize, Serialize};

use super::{
    broadcast_shape, for_each_broadcast, gemm, numel, reduce_to_shape, strides, Result, Tensor,
    TensorError,
};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on each side; requires odd kernels.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same() -> Self {
        Self {
            stride: 1,
            padding: Padding::Same,
        }
    }

    pub fn valid() -> Self {
        Self {
            stride: 1,
            padding: Padding::Valid,
        }
    }

    pub fn strided(stride: usize) -> Self {
        Self {
            stride,
            padding: Padding::Same,
        }
    }
}

/// How per-head similarities are pooled into one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPool {
    /// Max over (head, height, width), then mean over (frequency, time).
    #[default]
    Max,
    /// Per-head max over (height, width) and mean over (frequency, time),
    /// then mean over heads. Ablation only.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Abs,
    Square,
    Relu,
    MinZero,
    Exp,
    Scale(f64),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride_h: usize,
    stride_w: usize,
    pad_h: usize,
    pad_w: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Conv {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reduce {
        x: Var,
        op: ReduceOp,
        map: Vec<usize>,
        argmax: Vec<usize>,
        count: usize,
    },
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: Var,
        rows: Vec<usize>,
    },
    Transpose(Var),
    LogSoftmax(Var),
    PairVolumes {
        audio: Var,
        visual: Var,
    },
    Aggregate {
        vol: Var,
        argmax: Vec<usize>,
        frames: usize,
    },
    PerHead {
        vol: Var,
        argmax: Vec<usize>,
        frames: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records ops and their vector-Jacobian rules for reverse-mode
/// differentiation. Nodes are stored in creation order, which is a
/// topological order.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node on its path.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::InvalidAxis { axis, rank });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that never records backward information. Forward values are
    /// identical to a recording graph.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let requires_grad = self.record;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: impl FnOnce() -> Op) -> Var {
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(ta.shape(), tb.shape()).map_err(|_| TensorError::ShapeMismatch {
            op: name,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let mut out = Tensor::zeros(shape.clone());
        let (da, db) = (ta.data(), tb.data());
        let od = out.data_mut();
        for_each_broadcast(ta.shape(), tb.shape(), &shape, |o, i, j| od[o] = f(da[i], db[j]));
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, &[a, b], || Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, &[a, b], || Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, &[a, b], || Op::Mul(a, b)))
    }

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let out = self.nodes[x.0].value.map(|v| match u {
            Unary::Abs => v.abs(),
            Unary::Square => v * v,
            Unary::Relu => v.max(0.0),
            Unary::MinZero => v.min(0.0),
            Unary::Exp => v.exp(),
            Unary::Scale(a) => a * v,
        });
        self.push(out, &[x], || Op::Unary(x, u))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// `max(x, 0)`; same function as [`Graph::relu`].
    pub fn max_with_zero(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn min_with_zero(&mut self, x: Var) -> Var {
        self.unary(x, Unary::MinZero)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        self.unary(x, Unary::Scale(alpha))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Tensor::zeros([m, n]);
        gemm(m, k, n, 1.0, ta.data(), false, tb.data(), false, 0.0, out.data_mut());
        Ok(self.push(out, &[a, b], || Op::MatMul(a, b)))
    }

    /// Cross-correlation with zero padding. The kernel is
    /// `[C_out, C_in, k]` (1-D) or `[C_out, C_in, kh, kw]` (2-D); the input is
    /// `[C_in, ...spatial]` or batched `[N, C_in, ...spatial]`. Stride applies
    /// to every spatial axis.
    pub fn conv(&mut self, input: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let (ti, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv",
            lhs: ti.shape().to_vec(),
            rhs: tk.shape().to_vec(),
        };
        let spatial = match tk.rank() {
            3 => 1,
            4 => 2,
            _ => return Err(mismatch()),
        };
        let batched = if ti.rank() == spatial + 2 {
            true
        } else if ti.rank() == spatial + 1 {
            false
        } else {
            return Err(mismatch());
        };
        if spec.stride == 0 {
            return Err(TensorError::Invalid("conv stride must be positive".into()));
        }
        let is = ti.shape();
        let ks = tk.shape();
        let (n, rest) = if batched { (is[0], &is[1..]) } else { (1, is) };
        let cin = rest[0];
        let (h, w) = if spatial == 1 { (1, rest[1]) } else { (rest[1], rest[2]) };
        let cout = ks[0];
        let (kh, kw) = if spatial == 1 { (1, ks[2]) } else { (ks[2], ks[3]) };
        if ks[1] != cin {
            return Err(mismatch());
        }
        let (stride_h, stride_w) = if spatial == 1 { (1, spec.stride) } else { (spec.stride, spec.stride) };
        let (pad_h, pad_w) = match spec.padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(mismatch());
                }
                ((kh - 1) / 2, (kw - 1) / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(mismatch());
                }
                (0, 0)
            }
        };
        let ho = (h + 2 * pad_h - kh) / stride_h + 1;
        let wo = (w + 2 * pad_w - kw) / stride_w + 1;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride_h,
            stride_w,
            pad_h,
            pad_w,
            ho,
            wo,
        };
        let cols = im2col(ti.data(), &geom);
        let mut out_mat = vec![0.0; cout * geom.cols()];
        gemm(cout, geom.rows(), geom.cols(), 1.0, tk.data(), false, &cols, false, 0.0, &mut out_mat);
        let plane = ho * wo;
        let mut data = vec![0.0; n * cout * plane];
        for b in 0..n {
            for co in 0..cout {
                let src = &out_mat[co * geom.cols() + b * plane..co * geom.cols() + (b + 1) * plane];
                data[(b * cout + co) * plane..(b * cout + co + 1) * plane].copy_from_slice(src);
            }
        }
        let mut shape = Vec::new();
        if batched {
            shape.push(n);
        }
        shape.push(cout);
        if spatial == 2 {
            shape.push(ho);
        }
        shape.push(wo);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, &[input, kernel], || Op::Conv {
            input,
            kernel,
            geom,
            cols,
        }))
    }

    /// Normalizes over `axis` at every other position:
    /// `(x - mean) / sqrt(var + eps) * gain + bias`, with `gain`, `bias` of
    /// shape `[C]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        check_axis(axis, tx.rank())?;
        let c = tx.shape()[axis];
        for p in [gain, bias] {
            if self.nodes[p.0].value.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: self.nodes[p.0].value.shape().to_vec(),
                });
            }
        }
        let outer = numel(&tx.shape()[..axis]);
        let inner = numel(&tx.shape()[axis + 1..]);
        let xd = tx.data();
        let gd = self.nodes[gain.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |ch: usize| (o * c + ch) * inner + i;
                let mean = (0..c).map(|ch| xd[at(ch)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (xd[at(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for ch in 0..c {
                    let xh = (xd[at(ch)] - mean) * is;
                    xhat[at(ch)] = xh;
                    out[at(ch)] = xh * gd[ch] + bd[ch];
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(out, &[x, gain, bias], || Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            xhat,
            inv_std,
        }))
    }

    /// Reduces over `axes`, dropping them from the shape. `Max` routes the
    /// gradient to the first (lowest linear index) maximizer.
    pub fn reduce(&mut self, x: Var, op: ReduceOp, axes: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            check_axis(a, shape.len())?;
            if reduced[a] {
                return Err(TensorError::Invalid(format!("duplicate reduction axis {a}")));
            }
            reduced[a] = true;
        }
        if axes.iter().any(|&a| shape[a] == 0) {
            return Err(TensorError::EmptyReduction(shape));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let out_strides = strides(&out_shape);
        // Input flat index -> output flat index.
        let mut map = vec![0usize; numel(&shape)];
        let mut idx = vec![0usize; shape.len()];
        for m in map.iter_mut() {
            let mut o = 0;
            let mut od = 0;
            for (d, &i) in idx.iter().enumerate() {
                if !reduced[d] {
                    o += i * out_strides[od];
                    od += 1;
                }
            }
            *m = o;
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let xd = self.nodes[x.0].value.data();
        let n_out = numel(&out_shape);
        let mut argmax = Vec::new();
        let data = match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut acc = vec![0.0; n_out];
                for (i, &o) in map.iter().enumerate() {
                    acc[o] += xd[i];
                }
                if op == ReduceOp::Mean {
                    acc.iter_mut().for_each(|v| *v /= count as f64);
                }
                acc
            }
            ReduceOp::Max => {
                let mut best = vec![f64::NEG_INFINITY; n_out];
                argmax = vec![usize::MAX; n_out];
                for (i, &o) in map.iter().enumerate() {
                    if argmax[o] == usize::MAX || xd[i] > best[o] {
                        best[o] = xd[i];
                        argmax[o] = i;
                    }
                }
                best
            }
        };
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, &[x], || Op::Reduce {
            x,
            op,
            map,
            argmax,
            count,
        }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, ReduceOp::Sum, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, ReduceOp::Mean, &axes)
    }

    /// Argmax indices recorded by a `Max` reduction (input flat indices).
    pub fn argmax_of(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::Reduce {
                op: ReduceOp::Max,
                argmax,
                ..
            } => Some(argmax),
            _ => None,
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshape(shape.to_vec())?;
        Ok(self.push(out, &[x], || Op::Reshape(x)))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        check_axis(axis, tx.rank())?;
        let shape = tx.shape();
        if start + len > shape[axis] {
            return Err(TensorError::Invalid(format!(
                "narrow [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let d = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            data.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, &[x], || Op::Narrow { x, axis, start }))
    }

    /// Selects (with repetition allowed) sub-tensors along axis 0.
    pub fn index_select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() == 0 {
            return Err(TensorError::InvalidAxis { axis: 0, rank: 0 });
        }
        let d0 = tx.shape()[0];
        let inner = numel(&tx.shape()[1..]);
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= d0 {
                return Err(TensorError::Invalid(format!("row {r} out of range {d0}")));
            }
            data.extend_from_slice(&tx.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(shape, data)?;
        let rows = rows.to_vec();
        Ok(self.push(out, &[x], || Op::IndexSelect { x, rows }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 {
            return Err(TensorError::Invalid(format!("transpose needs rank 2, got {:?}", tx.shape())));
        }
        let out = transpose2(tx);
        Ok(self.push(out, &[x], || Op::Transpose(x)))
    }

    /// Log-softmax along the last axis, stabilized by the row max.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let n = *tx.shape().last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        if n == 0 {
            return Err(TensorError::EmptyReduction(tx.shape().to_vec()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, &[x], || Op::LogSoftmax(x)))
    }

    /// All-pairs similarity volumes.
    ///
    /// `audio` is `[B, C, K, F, T]`, `visual` is `[B', C, K, H, W]`; the result
    /// is `[B, B', K, F, T, H, W]` with entry
    /// `sum_c audio[b, c, k, f, t] * visual[b', c, k, h, w]`.
    pub fn pair_volumes(&mut self, audio: Var, visual: Var) -> Result<Var> {
        let (ta, tv) = (&self.nodes[audio.0].value, &self.nodes[visual.0].value);
        let (sa, sv) = (ta.shape(), tv.shape());
        if sa.len() != 5 || sv.len() != 5 || sa[1] != sv[1] || sa[2] != sv[2] {
            return Err(TensorError::ShapeMismatch {
                op: "similarity_volume",
                lhs: sa.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let d = VolDims::new(sa, sv);
        let mut out = vec![0.0; d.b * d.b2 * d.k * d.ft * d.hw];
        let mut prod = vec![0.0; d.b * d.ft * d.b2 * d.hw];
        for k in 0..d.k {
            let am = d.audio_matrix(ta.data(), k);
            let vm = d.visual_matrix(tv.data(), k);
            gemm(d.b * d.ft, d.c, d.b2 * d.hw, 1.0, &am, false, &vm, false, 0.0, &mut prod);
            d.scatter_volume(&prod, k, &mut out);
        }
        let shape = vec![d.b, d.b2, d.k, sa[3], sa[4], sv[3], sv[4]];
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, &[audio, visual], || Op::PairVolumes { audio, visual }))
    }

    /// Single-pair volume: `[C, K, F, T]` x `[C, K, H, W]` -> `[K, F, T, H, W]`.
    pub fn similarity_volume(&mut self, audio: Var, visual: Var) -> Result<Var> {
        let sa = self.shape(audio).to_vec();
        let sv = self.shape(visual).to_vec();
        if sa.len() != 4 || sv.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "similarity_volume",
                lhs: sa,
                rhs: sv,
            });
        }
        let a = self.reshape(audio, &[1, sa[0], sa[1], sa[2], sa[3]])?;
        let v = self.reshape(visual, &[1, sv[0], sv[1], sv[2], sv[3]])?;
        let vol = self.pair_volumes(a, v)?;
        self.reshape(vol, &[sa[1], sa[2], sa[3], sv[2], sv[3]])
    }

    /// Aggregates volumes with trailing shape `[K, F, T, H, W]` into scores.
    /// Leading axes are kept.
    pub fn aggregate(&mut self, vol: Var, pool: HeadPool) -> Result<Var> {
        match pool {
            HeadPool::Max => self.aggregate_max(vol),
            HeadPool::Mean => {
                let per_head = self.per_head_scores(vol)?;
                let last = self.shape(per_head).len() - 1;
                self.reduce(per_head, ReduceOp::Mean, &[last])
            }
        }
    }

    fn aggregate_max(&mut self, vol: Var) -> Result<Var> {
        let tv = &self.nodes[vol.0].value;
        let (lead, k, ft, hw) = split_volume_shape(tv.shape())?;
        let n_lead = numel(lead);
        let data = tv.data();
        let mut argmax = vec![0usize; n_lead * ft];
        let mut out = vec![0.0; n_lead];
        for l in 0..n_lead {
            let base = l * k * ft * hw;
            let mut acc = 0.0;
            for f in 0..ft {
                let mut best = f64::NEG_INFINITY;
                let mut arg = usize::MAX;
                for kk in 0..k {
                    let off = base + (kk * ft + f) * hw;
                    for (j, &v) in data[off..off + hw].iter().enumerate() {
                        if arg == usize::MAX || v > best {
                            best = v;
                            arg = off + j;
                        }
                    }
                }
                argmax[l * ft + f] = arg;
                acc += best;
            }
            out[l] = acc / ft as f64;
        }
        let out = Tensor::new(lead.to_vec(), out)?;
        Ok(self.push(out, &[vol], || Op::Aggregate {
            vol,
            argmax,
            frames: ft,
        }))
    }

    /// Per-head scores: volumes `[..., K, F, T, H, W]` -> `[..., K]`, each the
    /// mean over (f, t) of the max over (h, w).
    pub fn per_head_scores(&mut self, vol: Var) -> Result<Var> {
        let tv = &self.nodes[vol.0].value;
        let (lead, k, ft, hw) = split_volume_shape(tv.shape())?;
        let n_lead = numel(lead);
        let data = tv.data();
        let mut argmax = vec![0usize; n_lead * k * ft];
        let mut out = vec![0.0; n_lead * k];
        for l in 0..n_lead {
            for kk in 0..k {
                let mut acc = 0.0;
                for f in 0..ft {
                    let off = ((l * k + kk) * ft + f) * hw;
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = usize::MAX;
                    for (j, &v) in data[off..off + hw].iter().enumerate() {
                        if arg == usize::MAX || v > best {
                            best = v;
                            arg = off + j;
                        }
                    }
                    argmax[(l * k + kk) * ft + f] = arg;
                    acc += best;
                }
                out[l * k + kk] = acc / ft as f64;
            }
        }
        let mut shape = lead.to_vec();
        shape.push(k);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, &[vol], || Op::PerHead {
            vol,
            argmax,
            frames: ft,
        }))
    }

    /// Reverse pass from a scalar root. Every leaf that requires a gradient
    /// receives one; leaves off the root's path get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::ones(root_value.shape().to_vec()));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros_like(&node.value));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, reduce_to_shape(g, val(*a).shape()));
                }
                if self.wants(*b) {
                    let mut gb = reduce_to_shape(g, val(*b).shape());
                    if matches!(node.op, Op::Sub(..)) {
                        gb.data_mut().iter_mut().for_each(|x| *x = -*x);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                for (target, other, flip) in [(*a, tb, false), (*b, ta, true)] {
                    if !self.wants(target) {
                        continue;
                    }
                    let mut full = Tensor::zeros(g.shape().to_vec());
                    let fd = full.data_mut();
                    let od = other.data();
                    let (sa, sb) = if flip { (other.shape(), val(target).shape()) } else { (val(target).shape(), other.shape()) };
                    for_each_broadcast(sa, sb, g.shape(), |o, i, j| {
                        let oi = if flip { i } else { j };
                        fd[o] = g.data()[o] * od[oi];
                    });
                    self.accumulate(grads, target, reduce_to_shape(&full, val(target).shape()));
                }
            }
            Op::Unary(x, u) => {
                let xv = val(*x);
                let yv = &node.value;
                let mut gx = g.clone();
                for (i, gi) in gx.data_mut().iter_mut().enumerate() {
                    let xi = xv.data()[i];
                    let d = match u {
                        Unary::Abs => {
                            if xi > 0.0 {
                                1.0
                            } else if xi < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * xi,
                        Unary::Relu => (xi > 0.0) as u8 as f64,
                        Unary::MinZero => (xi < 0.0) as u8 as f64,
                        Unary::Exp => yv.data()[i],
                        Unary::Scale(a) => *a,
                    };
                    *gi *= d;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut ga = Tensor::zeros([m, k]);
                    gemm(m, n, k, 1.0, g.data(), false, tb.data(), true, 0.0, ga.data_mut());
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros([k, n]);
                    gemm(k, m, n, 1.0, ta.data(), true, g.data(), false, 0.0, gb.data_mut());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv {
                input,
                kernel,
                geom,
                cols,
            } => {
                let plane = geom.ho * geom.wo;
                let ncols = geom.cols();
                let mut gmat = vec![0.0; geom.cout * ncols];
                for b in 0..geom.n {
                    for co in 0..geom.cout {
                        let src = &g.data()[(b * geom.cout + co) * plane..(b * geom.cout + co + 1) * plane];
                        gmat[co * ncols + b * plane..co * ncols + (b + 1) * plane].copy_from_slice(src);
                    }
                }
                if self.wants(*kernel) {
                    let mut gk = Tensor::zeros(val(*kernel).shape().to_vec());
                    gemm(geom.cout, ncols, geom.rows(), 1.0, &gmat, false, cols, true, 0.0, gk.data_mut());
                    self.accumulate(grads, *kernel, gk);
                }
                if self.wants(*input) {
                    let mut gcols = vec![0.0; geom.rows() * ncols];
                    gemm(geom.rows(), geom.cout, ncols, 1.0, val(*kernel).data(), true, &gmat, false, 0.0, &mut gcols);
                    let mut gi = Tensor::zeros(val(*input).shape().to_vec());
                    col2im(&gcols, geom, gi.data_mut());
                    self.accumulate(grads, *input, gi);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let shape = val(*x).shape();
                let c = shape[*axis];
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let gd = val(*gain).data();
                let dy = g.data();
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; dy.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |ch: usize| (o * c + ch) * inner + i;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for ch in 0..c {
                            let j = at(ch);
                            dgain[ch] += dy[j] * xhat[j];
                            dbias[ch] += dy[j];
                            let dxh = dy[j] * gd[ch];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        let is = inv_std[o * inner + i];
                        for ch in 0..c {
                            let j = at(ch);
                            dx[j] = is * (dy[j] * gd[ch] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape.to_vec(), dx).expect("shape"));
                self.accumulate(grads, *gain, Tensor::new([c], dgain).expect("shape"));
                self.accumulate(grads, *bias, Tensor::new([c], dbias).expect("shape"));
            }
            Op::Reduce {
                x,
                op,
                map,
                argmax,
                count,
            } => {
                let mut gx = Tensor::zeros(val(*x).shape().to_vec());
                let gd = g.data();
                match op {
                    ReduceOp::Sum => gx.data_mut().iter_mut().zip(map).for_each(|(v, &o)| *v = gd[o]),
                    ReduceOp::Mean => {
                        let s = 1.0 / *count as f64;
                        gx.data_mut().iter_mut().zip(map).for_each(|(v, &o)| *v = gd[o] * s);
                    }
                    ReduceOp::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            gx.data_mut()[i] += gd[o];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(val(*x).shape().to_vec()).expect("reshape grad");
                self.accumulate(grads, *x, gx);
            }
            Op::Narrow { x, axis, start } => {
                let shape = val(*x).shape();
                let mut gx = Tensor::zeros(shape.to_vec());
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let d = shape[*axis];
                let len = g.shape()[*axis];
                for o in 0..outer {
                    let dst = (o * d + start) * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::IndexSelect { x, rows } => {
                let shape = val(*x).shape();
                let inner = numel(&shape[1..]);
                let mut gx = Tensor::zeros(shape.to_vec());
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut gx.data_mut()[r * inner..(r + 1) * inner];
                    dst.iter_mut()
                        .zip(&g.data()[k * inner..(k + 1) * inner])
                        .for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, transpose2(g)),
            Op::LogSoftmax(x) => {
                let n = *g.shape().last().expect("rank");
                let mut gx = g.clone();
                for (row_g, row_y) in gx.data_mut().chunks_mut(n).zip(node.value.data().chunks(n)) {
                    let total: f64 = row_g.iter().sum();
                    for (gi, yi) in row_g.iter_mut().zip(row_y) {
                        *gi -= yi.exp() * total;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::PairVolumes { audio, visual } => {
                let (ta, tv) = (val(*audio), val(*visual));
                let d = VolDims::new(ta.shape(), tv.shape());
                let mut ga = Tensor::zeros(ta.shape().to_vec());
                let mut gv = Tensor::zeros(tv.shape().to_vec());
                let (want_a, want_v) = (self.wants(*audio), self.wants(*visual));
                let mut gam = vec![0.0; d.b * d.ft * d.c];
                let mut gvm = vec![0.0; d.c * d.b2 * d.hw];
                for k in 0..d.k {
                    let gk = d.gather_volume(g.data(), k);
                    if want_a {
                        let vm = d.visual_matrix(tv.data(), k);
                        gemm(d.b * d.ft, d.b2 * d.hw, d.c, 1.0, &gk, false, &vm, true, 0.0, &mut gam);
                        d.scatter_audio(&gam, k, ga.data_mut());
                    }
                    if want_v {
                        let am = d.audio_matrix(ta.data(), k);
                        gemm(d.c, d.b * d.ft, d.b2 * d.hw, 1.0, &am, true, &gk, false, 0.0, &mut gvm);
                        d.scatter_visual(&gvm, k, gv.data_mut());
                    }
                }
                if want_a {
                    self.accumulate(grads, *audio, ga);
                }
                if want_v {
                    self.accumulate(grads, *visual, gv);
                }
            }
            Op::Aggregate { vol, argmax, frames } | Op::PerHead { vol, argmax, frames } => {
                let mut gx = Tensor::zeros(val(*vol).shape().to_vec());
                let s = 1.0 / *frames as f64;
                for (j, &i) in argmax.iter().enumerate() {
                    gx.data_mut()[i] += g.data()[j / frames] * s;
                }
                self.accumulate(grads, *vol, gx);
            }
        }
    }
}

/// Splits `[..lead, K, F, T, H, W]` into (lead, K, F*T, H*W).
fn split_volume_shape(shape: &[usize]) -> Result<(&[usize], usize, usize, usize)> {
    if shape.len() < 5 {
        return Err(TensorError::Invalid(format!(
            "similarity volume needs trailing [K, F, T, H, W], got {shape:?}"
        )));
    }
    let r = shape.len();
    let (k, f, t, h, w) = (shape[r - 5], shape[r - 4], shape[r - 3], shape[r - 2], shape[r - 1]);
    if k * f * t * h * w == 0 {
        return Err(TensorError::EmptyReduction(shape.to_vec()));
    }
    Ok((&shape[..r - 5], k, f * t, h * w))
}

fn transpose2(x: &Tensor) -> Tensor {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new([c, r], out).expect("transpose shape")
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let plane = g.ho * g.wo;
    let mut cols = vec![0.0; g.rows() * ncols];
    for ci in 0..g.cin {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let r = (ci * g.kh + dy) * g.kw + dx;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for b in 0..g.n {
                    let src = &x[(b * g.cin + ci) * g.h * g.w..(b * g.cin + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride_h + dy) as isize - g.pad_h as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride_w + dx) as isize - g.pad_w as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            row[b * plane + oy * g.wo + ox] = src[iy * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncols = g.cols();
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let r = (ci * g.kh + dy) * g.kw + dx;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for b in 0..g.n {
                    let dst = &mut x[(b * g.cin + ci) * g.h * g.w..(b * g.cin + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride_h + dy) as isize - g.pad_h as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride_w + dx) as isize - g.pad_w as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dst[iy * g.w + ix as usize] += row[b * plane + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Index bookkeeping for the all-pairs contraction.
struct VolDims {
    b: usize,
    b2: usize,
    c: usize,
    k: usize,
    ft: usize,
    hw: usize,
}

impl VolDims {
    fn new(sa: &[usize], sv: &[usize]) -> Self {
        Self {
            b: sa[0],
            b2: sv[0],
            c: sa[1],
            k: sa[2],
            ft: sa[3] * sa[4],
            hw: sv[3] * sv[4],
        }
    }

    /// Rows (b, f, t), columns c.
    fn audio_matrix(&self, a: &[f64], k: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.b * self.ft * self.c];
        for b in 0..self.b {
            for c in 0..self.c {
                let src = ((b * self.c + c) * self.k + k) * self.ft;
                for t in 0..self.ft {
                    m[(b * self.ft + t) * self.c + c] = a[src + t];
                }
            }
        }
        m
    }

    /// Rows c, columns (b', h, w).
    fn visual_matrix(&self, v: &[f64], k: usize) -> Vec<f64> {
        let cols = self.b2 * self.hw;
        let mut m = vec![0.0; self.c * cols];
        for b in 0..self.b2 {
            for c in 0..self.c {
                let src = ((b * self.c + c) * self.k + k) * self.hw;
                m[c * cols + b * self.hw..c * cols + (b + 1) * self.hw].copy_from_slice(&v[src..src + self.hw]);
            }
        }
        m
    }

    fn vol_offset(&self, b: usize, b2: usize, k: usize, t: usize) -> usize {
        (((b * self.b2 + b2) * self.k + k) * self.ft + t) * self.hw
    }

    fn scatter_volume(&self, prod: &[f64], k: usize, out: &mut [f64]) {
        let cols = self.b2 * self.hw;
        for b in 0..self.b {
            for t in 0..self.ft {
                let row = &prod[(b * self.ft + t) * cols..(b * self.ft + t + 1) * cols];
                for b2 in 0..self.b2 {
                    let o = self.vol_offset(b, b2, k, t);
                    out[o..o + self.hw].copy_from_slice(&row[b2 * self.hw..(b2 + 1) * self.hw]);
                }
            }
        }
    }

    fn gather_volume(&self, vol: &[f64], k: usize) -> Vec<f64> {
        let cols = self.b2 * self.hw;
        let mut m = vec![0.0; self.b * self.ft * cols];
        for b in 0..self.b {
            for t in 0..self.ft {
                let row = &mut m[(b * self.ft + t) * cols..(b * self.ft + t + 1) * cols];
                for b2 in 0..self.b2 {
                    let o = self.vol_offset(b, b2, k, t);
                    row[b2 * self.hw..(b2 + 1) * self.hw].copy_from_slice(&vol[o..o + self.hw]);
                }
            }
        }
        m
    }

    fn scatter_audio(&self, m: &[f64], k: usize, ga: &mut [f64]) {
        for b in 0..self.b {
            for c in 0..self.c {
                let dst = ((b * self.c + c) * self.k + k) * self.ft;
                for t in 0..self.ft {
                    ga[dst + t] += m[(b * self.ft + t) * self.c + c];
                }
            }
        }
    }

    fn scatter_visual(&self, m: &[f64], k: usize, gv: &mut [f64]) {
        let cols = self.b2 * self.hw;
        for b in 0..self.b2 {
            for c in 0..self.c {
                let dst = ((b * self.c + c) * self.k + k) * self.hw;
                for j in 0..self.hw {
                    gv[dst + j] += m[c * cols + b * self.hw + j];
                }
            }
        }
    }
}
