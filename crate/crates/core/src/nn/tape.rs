//! Reverse-mode differentiation over a linear tape of tensor operations.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeometry, GroupNormCache};
use super::param::{Gradients, ParamId, ParamSet};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    AddRowVector { x: Var, v: Var },
    AddChannelVector { x: Var, v: Var },
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: ConvGeometry },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, cache: GroupNormCache },
    Silu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    ToTokens(Var),
    FromTokens(Var),
    ConcatChannels(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    BroadcastRows(Var),
    Upsample2x(Var),
    PadHigh { x: Var, amount: usize },
    SquaredErrorMean { x: Var, target: Tensor },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records tensor operations so gradients can be propagated back to parameters.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients for every node of a tape after a backward pass.
#[derive(Debug)]
pub struct NodeGrads(Vec<Option<Tensor>>);

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => bail!(Shape, "{what} must be 2-D, got {s:?}"),
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => bail!(Shape, "{what} must be 3-D (channels, height, width), got {s:?}"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records parameter `id`; repeated requests return the same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(params.get(id).value.clone(), Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(self.value(a), "matmul lhs")?;
        let (k2, m) = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            bail!(Shape, "inner dimensions disagree: {:?} · {:?}", self.value(a).shape(), self.value(b).shape());
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMul { a, b }))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(self.value(a), "matmul lhs")?;
        let (m, k2) = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            bail!(Shape, "inner dimensions disagree: {:?} · {:?}ᵀ", self.value(a).shape(), self.value(b).shape());
        }
        let out = kernels::matmul_bt(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMulBt { a, b }))
    }

    /// Adds `v[m]` to every row of `x[n×m]`.
    pub fn add_row_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(x), "row-broadcast target")?;
        if self.value(v).len() != m {
            bail!(Shape, "bias of length {} cannot broadcast over {:?}", self.value(v).len(), self.value(x).shape());
        }
        let vd = self.value(v).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            row.iter_mut().zip(&vd).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::AddRowVector { x, v }))
    }

    /// `x · w + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_vector(y, b),
            None => Ok(y),
        }
    }

    /// Adds `v[c]` to every element of channel `c` in `x[c×h×w]`.
    pub fn add_channel_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.value(x), "channel-broadcast target")?;
        if self.value(v).len() != c {
            bail!(Shape, "vector of length {} cannot broadcast over {c} channels", self.value(v).len());
        }
        let plane = h * w;
        let mut out = self.value(x).data().to_vec();
        for (ch, chunk) in out.chunks_mut(plane).enumerate() {
            let add = self.value(v).data()[ch];
            chunk.iter_mut().for_each(|o| *o += add);
        }
        Ok(self.push(Tensor::new(&[c, h, w], out)?, Op::AddChannelVector { x, v }))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, w) = dims3(self.value(x), "conv input")?;
        let (c_out, kc, kh, kw) = match *self.value(k).shape() {
            [a, b, c, d] => (a, b, c, d),
            ref s => bail!(Shape, "conv kernel must be 4-D, got {s:?}"),
        };
        if kc != c_in || kh != kw {
            bail!(Shape, "kernel {:?} incompatible with input {:?}", self.value(k).shape(), self.value(x).shape());
        }
        if kh % 2 == 0 {
            bail!(Config, "kernel extent must be odd, got {kh}");
        }
        if let Some(b) = b {
            if self.value(b).len() != c_out {
                bail!(Shape, "conv bias length {} != {c_out} output channels", self.value(b).len());
            }
        }
        let Some(geom) = ConvGeometry::new(c_in, h, w, c_out, kh, stride, pad) else {
            bail!(Shape, "non-integral conv output for input {h}x{w}, kernel {kh}, stride {stride}, pad {pad}");
        };
        let out = kernels::conv2d(
            self.value(x).data(),
            self.value(k).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        Ok(self.push(Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?, Op::Conv2d { x, k, b, geom }))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (c, h, w) = dims3(self.value(x), "group norm input")?;
        if groups == 0 || c % groups != 0 {
            bail!(Config, "{c} channels cannot be split into {groups} groups");
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            bail!(Shape, "group norm affine parameters must have {c} entries");
        }
        let (out, cache) = kernels::group_norm(
            self.value(x).data(),
            c,
            h * w,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        Ok(self.push(Tensor::new(&[c, h, w], out)?, Op::GroupNorm { x, gamma, beta, groups, cache }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::silu);
        self.push(out, Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, s) = dims2(self.value(x), "softmax input")?;
        let out = kernels::softmax_rows(self.value(x).data(), n, s);
        Ok(self.push(Tensor::new(&[n, s], out)?, Op::Softmax(x)))
    }

    /// `[c×h×w]` → `[(h·w)×c]`: one row per spatial position.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.value(x), "token source")?;
        let out = self.value(x).clone().reshape(&[c, h * w])?.transpose();
        Ok(self.push(out, Op::ToTokens(x)))
    }

    /// Inverse of [`Tape::to_tokens`].
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (l, c) = dims2(self.value(x), "token matrix")?;
        if l != h * w {
            bail!(Shape, "{l} tokens cannot fill a {h}x{w} plane");
        }
        let out = self.value(x).transpose().reshape(&[c, h, w])?;
        Ok(self.push(out, Op::FromTokens(x)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = dims3(self.value(a), "concat lhs")?;
        let (cb, hb, wb) = dims3(self.value(b), "concat rhs")?;
        if (ha, wa) != (hb, wb) {
            bail!(Shape, "cannot concatenate planes {ha}x{wa} and {hb}x{wb}");
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::new(&[ca + cb, ha, wa], data)?, Op::ConcatChannels(a, b)))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Shape, "nothing to concatenate");
        };
        let rows = dims2(self.value(first), "concat part")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat part")?;
            if r != rows {
                bail!(Shape, "row count mismatch in column concat: {r} vs {rows}");
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::new(&[rows, total], data)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x), "column slice source")?;
        if len == 0 || start + len > cols {
            bail!(Shape, "column slice {start}..{} out of {cols}", start + len);
        }
        let src = self.value(x);
        let data = (0..rows).flat_map(|i| src.row(i)[start..start + len].iter().copied()).collect();
        Ok(self.push(Tensor::new(&[rows, len], data)?, Op::SliceCols { x, start }))
    }

    /// Column means of `x[n×m]`, as a length-`m` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(x), "mean-pool input")?;
        let mut out = vec![0.0; m];
        for i in 0..n {
            out.iter_mut().zip(self.value(x).row(i)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(self.push(Tensor::new(&[m], out)?, Op::MeanRows(x)))
    }

    /// Repeats vector `v[m]` as `rows` identical rows.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let m = self.value(v).len();
        let mut data = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            data.extend_from_slice(self.value(v).data());
        }
        Ok(self.push(Tensor::new(&[rows, m], data)?, Op::BroadcastRows(v)))
    }

    /// Nearest-neighbour ×2 upsampling of `x[c×h×w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.value(x), "upsample input")?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    out[(ch * h2 + i) * w2 + j] = src[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(Tensor::new(&[c, h2, w2], out)?, Op::Upsample2x(x)))
    }

    /// Zero-pads `x[c×h×w]` by `amount` rows and columns at the high end of both spatial axes.
    pub fn pad_high(&mut self, x: Var, amount: usize) -> Result<Var> {
        let (c, h, w) = dims3(self.value(x), "pad input")?;
        let (h2, w2) = (h + amount, w + amount);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for i in 0..h {
                out[(ch * h2 + i) * w2..(ch * h2 + i) * w2 + w].copy_from_slice(&src[(ch * h + i) * w..(ch * h + i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(&[c, h2, w2], out)?, Op::PadHigh { x, amount }))
    }

    /// Mean over all elements of `(x − target)²`, as a scalar node.
    pub fn squared_error_mean(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        self.value(x).expect_same_shape(target)?;
        let n = target.len() as f64;
        let loss = self.value(x).data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::SquaredErrorMean { x, target: target.clone() }))
    }

    /// Propagates `d root / d node` back to every leaf and parameter node.
    /// Only leaf and parameter gradients are retained; `root` must be a scalar.
    pub fn backward(&self, root: Var) -> Result<NodeGrads> {
        if self.value(root).len() != 1 {
            bail!(Shape, "backward needs a scalar root, got {:?}", self.value(root).shape());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let shaped = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape(), data).expect("gradient matches value shape");
            match &node.op {
                Op::Leaf | Op::Param => grads[idx] = Some(g),
                Op::MatMul { a, b } => {
                    let (n, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let m = self.value(*b).shape()[1];
                    let ga = kernels::matmul_bt(g.data(), self.value(*b).data(), n, m, k);
                    let gb = kernels::matmul_at(self.value(*a).data(), g.data(), n, k, m);
                    acc(&mut grads, *a, shaped(*a, ga));
                    acc(&mut grads, *b, shaped(*b, gb));
                }
                Op::MatMulBt { a, b } => {
                    let (n, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let m = self.value(*b).shape()[0];
                    // out = a·bᵀ: da = g·b, db = gᵀ·a
                    let ga = kernels::matmul(g.data(), self.value(*b).data(), n, m, k);
                    let gb = kernels::matmul_at(g.data(), self.value(*a).data(), n, m, k);
                    acc(&mut grads, *a, shaped(*a, ga));
                    acc(&mut grads, *b, shaped(*b, gb));
                }
                Op::AddRowVector { x, v } => {
                    let m = self.value(*v).len();
                    let mut gv = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        gv.iter_mut().zip(row).for_each(|(o, r)| *o += r);
                    }
                    acc(&mut grads, *v, shaped(*v, gv));
                    acc(&mut grads, *x, g);
                }
                Op::AddChannelVector { x, v } => {
                    let c = self.value(*v).len();
                    let plane = g.len() / c;
                    let gv = g.data().chunks(plane).map(|ch| ch.iter().sum()).collect();
                    acc(&mut grads, *v, shaped(*v, gv));
                    acc(&mut grads, *x, g);
                }
                Op::Conv2d { x, k, b, geom } => {
                    let (gx, gk, gb) = kernels::conv2d_backward(self.value(*x).data(), self.value(*k).data(), g.data(), geom);
                    acc(&mut grads, *x, shaped(*x, gx));
                    acc(&mut grads, *k, shaped(*k, gk));
                    if let Some(b) = b {
                        acc(&mut grads, *b, shaped(*b, gb));
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, cache } => {
                    let s = self.value(*x).shape();
                    let (c, plane) = (s[0], s[1] * s[2]);
                    let (gx, gg, gbeta) =
                        kernels::group_norm_backward(g.data(), cache, c, plane, *groups, self.value(*gamma).data());
                    acc(&mut grads, *x, shaped(*x, gx));
                    acc(&mut grads, *gamma, shaped(*gamma, gg));
                    acc(&mut grads, *beta, shaped(*beta, gbeta));
                }
                Op::Silu(x) => {
                    let gx = self.value(*x).data().iter().zip(g.data()).map(|(&xv, &gv)| gv * kernels::silu_grad(xv)).collect();
                    acc(&mut grads, *x, shaped(*x, gx));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Scale(x, s) => acc(&mut grads, *x, g.scale(*s)),
                Op::Softmax(x) => {
                    let (n, s) = (node.value.shape()[0], node.value.shape()[1]);
                    let gx = kernels::softmax_rows_backward(node.value.data(), g.data(), n, s);
                    acc(&mut grads, *x, shaped(*x, gx));
                }
                Op::ToTokens(x) => {
                    let gx = g.transpose();
                    acc(&mut grads, *x, shaped(*x, gx.into_data()));
                }
                Op::FromTokens(x) => {
                    let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                    let gx = g.reshape(&[c, h * w])?.transpose();
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatChannels(a, b) => {
                    let na = self.value(*a).len();
                    let data = g.into_data();
                    acc(&mut grads, *a, shaped(*a, data[..na].to_vec()));
                    acc(&mut grads, *b, shaped(*b, data[na..].to_vec()));
                }
                Op::ConcatCols(parts) => {
                    let total = g.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        let data = g.data().chunks(total).flat_map(|row| row[offset..offset + w].iter().copied()).collect();
                        acc(&mut grads, p, shaped(p, data));
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let cols = self.value(*x).shape()[1];
                    let len = g.shape()[1];
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (i, row) in g.data().chunks(len).enumerate() {
                        gx[i * cols + start..i * cols + start + len].copy_from_slice(row);
                    }
                    acc(&mut grads, *x, shaped(*x, gx));
                }
                Op::MeanRows(x) => {
                    let n = self.value(*x).shape()[0];
                    let mut gx = Vec::with_capacity(self.value(*x).len());
                    for _ in 0..n {
                        gx.extend(g.data().iter().map(|v| v / n as f64));
                    }
                    acc(&mut grads, *x, shaped(*x, gx));
                }
                Op::BroadcastRows(v) => {
                    let m = self.value(*v).len();
                    let mut gv = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        gv.iter_mut().zip(row).for_each(|(o, r)| *o += r);
                    }
                    acc(&mut grads, *v, shaped(*v, gv));
                }
                Op::Upsample2x(x) => {
                    let s = self.value(*x).shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (h2, w2) = (2 * h, 2 * w);
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                gx[(ch * h + i / 2) * w + j / 2] += g.data()[(ch * h2 + i) * w2 + j];
                            }
                        }
                    }
                    acc(&mut grads, *x, shaped(*x, gx));
                }
                Op::PadHigh { x, amount } => {
                    let s = self.value(*x).shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (h2, w2) = (h + amount, w + amount);
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for i in 0..h {
                            gx[(ch * h + i) * w..(ch * h + i + 1) * w]
                                .copy_from_slice(&g.data()[(ch * h2 + i) * w2..(ch * h2 + i) * w2 + w]);
                        }
                    }
                    acc(&mut grads, *x, shaped(*x, gx));
                }
                Op::SquaredErrorMean { x, target } => {
                    let scale = 2.0 * g.data()[0] / target.len() as f64;
                    let gx = self.value(*x).data().iter().zip(target.data()).map(|(a, b)| scale * (a - b)).collect();
                    acc(&mut grads, *x, shaped(*x, gx));
                }
            }
        }
        Ok(NodeGrads(grads))
    }

    /// Backward pass that keeps only parameter gradients, laid out like `params`.
    pub fn param_gradients(&self, root: Var, params: &ParamSet) -> Result<Gradients> {
        let mut node_grads = self.backward(root)?;
        let mut out: Vec<Option<Tensor>> = vec![None; params.len()];
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                out[pid] = node_grads.0[v.0].take();
            }
        }
        Ok(Gradients(out))
    }
}
