//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, so many graphs can run
//! concurrently over the same read-only weights. [`Graph::backward`] walks the
//! tape once in reverse and returns the gradients of every parameter and every
//! trainable leaf that the loss depends on.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Silu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        c_out: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    ScaleShift {
        x: Var,
        scale: Var,
        shift: Var,
        broadcast: bool,
    },
    SoftmaxRows(Var),
    Narrow0 {
        x: Var,
        start: usize,
    },
    Concat0(Vec<Var>),
    Reshape(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    Tile2x2([Var; 4]),
    Sum(Var),
    Mean(Var),
    MseTo {
        x: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    param: Option<ParamId>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    params: Gradients,
    leaves: HashMap<Var, Tensor>,
}

impl Grads {
    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }

    /// Gradient of a trainable leaf created with [`Graph::leaf`].
    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }
}

fn channel_len(x: &Tensor) -> Result<(usize, usize)> {
    let c = *x
        .shape()
        .first()
        .ok_or_else(|| Error::dim("channel op on a scalar"))?;
    Ok((c, x.len() / c.max(1)))
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.param {
            Some(id) => self.store.value(id),
            None => node.value.as_ref().expect("non-parameter node holds a value"),
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf that lives outside the parameter store.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `scale * x + offset`
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + offset);
        let rg = self.requires(x);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::silu);
        let rg = self.requires(x);
        self.push(out, Op::Silu(x), rg)
    }

    /// Cross-correlation of a C_in×H×W input with a C_out×C_in×k×k kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).dims3()?;
        let ws = self.value(w).shape().to_vec();
        let [c_out, wc_in, k, k2] = ws[..] else {
            return Err(Error::dim(format!("conv kernel must be rank 4, got {ws:?}")));
        };
        if wc_in != c_in || k != k2 {
            return Err(Error::dim(format!(
                "conv kernel {ws:?} does not fit input with {c_in} channels"
            )));
        }
        if k % 2 == 0 || stride == 0 {
            return Err(Error::dim(format!("conv needs odd k and stride ≥ 1 (k={k}, stride={stride})")));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::dim(format!("conv kernel {k} larger than padded input {h}×{wd}")));
        }
        if !(h + 2 * pad - k).is_multiple_of(stride) || !(wd + 2 * pad - k).is_multiple_of(stride) {
            return Err(Error::dim(format!(
                "conv output extent not integral for {h}×{wd}, k={k}, stride={stride}, pad={pad}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::dim(format!(
                    "conv bias {:?} does not match {c_out} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let hw = geom.h_out * geom.w_out;
        let mut out = vec![0.0; c_out * hw];
        if let Some(b) = b {
            for (row, &bv) in out.chunks_mut(hw).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        let kk = c_in * k * k;
        if is_pointwise(&geom) {
            kernels::gemm(c_out, kk, hw, 1.0, self.value(w).data(), false, self.value(x).data(), false, 1.0, &mut out);
        } else {
            let mut cols = vec![0.0; geom.cols_len()];
            kernels::im2col(self.value(x).data(), &geom, &mut cols);
            kernels::gemm(c_out, kk, hw, 1.0, self.value(w).data(), false, &cols, false, 1.0, &mut out);
        }
        let out = Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.requires(x) || self.requires(w) || b.is_some_and(|b| self.requires(b));
        self.push(out, Op::Conv2d { x, w, b, geom, c_out }, rg)
    }

    /// Group normalization over `[C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, inner) = channel_len(xv)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim(format!("{groups} groups do not divide {c} channels")));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::dim("group norm affine must have one value per channel"));
        }
        let stats = kernels::group_stats(xv.data(), groups);
        let per_group = c / groups;
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        for ch in 0..c {
            let (mean, rstd) = stats[ch / per_group];
            let src = &xv.data()[ch * inner..(ch + 1) * inner];
            for (o, &v) in out[ch * inner..(ch + 1) * inner].iter_mut().zip(src) {
                *o = (v - mean) * rstd * gm[ch] + bt[ch];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups }, rg)
    }

    /// `x · wᵀ + b` for `x` of shape `[in]` or `[B, in]` and `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d_in) = xv.dims2()?;
        let (d_out, w_in) = self.value(w).dims2()?;
        if self.value(w).rank() != 2 || w_in != d_in {
            return Err(Error::dim(format!(
                "linear weight {:?} does not accept input {:?}",
                self.value(w).shape(),
                xv.shape()
            )));
        }
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [d_out] {
                return Err(Error::dim(format!("linear bias {:?} ≠ [{d_out}]", bv.shape())));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm(rows, d_in, d_out, 1.0, xv.data(), false, self.value(w).data(), true, 1.0, &mut out);
        let shape = if xv.rank() == 1 { vec![d_out] } else { vec![rows, d_out] };
        let out = Tensor::new(&shape, out)?;
        let rg = self.requires(x) || self.requires(w) || b.is_some_and(|b| self.requires(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    /// `op(a) · op(b)` for rank-2 operands, `op` transposing when the flag is set.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        if self.value(a).rank() != 2 || self.value(b).rank() != 2 {
            return Err(Error::dim("matmul operands must be rank 2"));
        }
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, self.value(a).data(), ta, self.value(b).data(), tb, 0.0, &mut out);
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::MatMul { a, b, ta, tb, m, k, n }, rg)
    }

    /// Adds `v[c]` to every element of channel `c` of `x` (shape `[C, ...]`).
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (c, inner) = self.check_channel_vec(x, v)?;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for ch in 0..c {
            for o in &mut out.data_mut()[ch * inner..(ch + 1) * inner] {
                *o += vv[ch];
            }
        }
        let rg = self.requires(x) || self.requires(v);
        self.push(out, Op::AddChannel(x, v), rg)
    }

    /// Multiplies channel `c` of `x` by `v[c]`.
    pub fn mul_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (c, inner) = self.check_channel_vec(x, v)?;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for ch in 0..c {
            for o in &mut out.data_mut()[ch * inner..(ch + 1) * inner] {
                *o *= vv[ch];
            }
        }
        let rg = self.requires(x) || self.requires(v);
        self.push(out, Op::MulChannel(x, v), rg)
    }

    fn check_channel_vec(&self, x: Var, v: Var) -> Result<(usize, usize)> {
        let (c, inner) = channel_len(self.value(x))?;
        if self.value(v).len() != c {
            return Err(Error::dim(format!(
                "channel vector of length {} for {c} channels",
                self.value(v).len()
            )));
        }
        Ok((c, inner))
    }

    /// `x · (1 + scale) + shift`; `scale`/`shift` are per-channel vectors or
    /// have the same shape as `x`.
    pub fn scale_shift(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xv = self.value(x);
        let (sv, hv) = (self.value(scale), self.value(shift));
        if sv.shape() != hv.shape() {
            return Err(Error::dim("scale and shift shapes differ"));
        }
        let broadcast = sv.shape() != xv.shape();
        let mut out = xv.clone();
        if broadcast {
            let (c, inner) = self.check_channel_vec(x, scale)?;
            for ch in 0..c {
                let (s, h) = (sv.data()[ch], hv.data()[ch]);
                for o in &mut out.data_mut()[ch * inner..(ch + 1) * inner] {
                    *o = *o * (1.0 + s) + h;
                }
            }
        } else {
            for ((o, s), h) in out.data_mut().iter_mut().zip(sv.data()).zip(hv.data()) {
                *o = *o * (1.0 + s) + h;
            }
        }
        let rg = self.requires(x) || self.requires(scale) || self.requires(shift);
        self.push(out, Op::ScaleShift { x, scale, shift, broadcast }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        kernels::softmax_rows(out.data_mut(), cols);
        let rg = self.requires(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow0(start, len)?;
        let rg = self.requires(x);
        self.push(out, Op::Narrow0 { x, start }, rg)
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat0(&vals)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(out, Op::Concat0(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// 2×2 mean pooling; extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("cannot downsample odd extent {h}×{w}")));
        }
        let out = Tensor::new(&[c, h / 2, w / 2], kernels::avg_pool2(self.value(x).data(), c, h, w))?;
        let rg = self.requires(x);
        self.push(out, Op::AvgPool2(x), rg)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let out = Tensor::new(&[c, 2 * h, 2 * w], kernels::upsample2(self.value(x).data(), c, h, w))?;
        let rg = self.requires(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let out = self.value(x).crop(y0, x0, h, w)?;
        let rg = self.requires(x);
        self.push(out, Op::Crop { x, y0, x0 }, rg)
    }

    /// Assembles four equally shaped C×h×w blocks as `[[tl, tr], [bl, br]]`.
    pub fn tile2x2(&mut self, parts: [Var; 4]) -> Result<Var> {
        let vals = parts.map(|p| self.value(p));
        let out = tile2x2(vals)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(out, Op::Tile2x2(parts), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.requires(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse_to(&mut self, x: Var, target: Tensor) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mse(&target)?);
        let rg = self.requires(x);
        self.push(out, Op::MseTo { x, target }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0])?);
        let mut params = Gradients::new(self.store.len());
        let mut leaves = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                match node.param {
                    Some(id) => params.accumulate(id, &dy)?,
                    None => {
                        leaves.insert(Var(idx), dy);
                    }
                }
                continue;
            }
            self.backprop_node(Var(idx), &node.op, &dy, &mut grads)?;
        }
        Ok(Grads { params, leaves })
    }

    fn backprop_node(&self, out: Var, op: &Op, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || Ok(dy.clone()))?;
                self.acc(grads, *b, || Ok(dy.clone()))?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || Ok(dy.clone()))?;
                self.acc(grads, *b, || Ok(dy.scale(-1.0)))?;
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, || dy.mul(self.value(*b)))?;
                self.acc(grads, *b, || dy.mul(self.value(*a)))?;
            }
            Op::Affine(x, s) => self.acc(grads, *x, || Ok(dy.scale(*s)))?,
            Op::Silu(x) => self.acc(grads, *x, || {
                dy.zip_with(self.value(*x), |g, v| g * kernels::silu_grad(v))
            })?,
            Op::Conv2d { x, w, b, geom, c_out } => self.conv_backward(*x, *w, *b, geom, *c_out, dy, grads)?,
            Op::GroupNorm { x, gamma, beta, groups } => {
                self.group_norm_backward(*x, *gamma, *beta, *groups, dy, grads)?
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let (rows, d_in) = xv.dims2()?;
                let (d_out, _) = self.value(*w).dims2()?;
                self.acc(grads, *x, || {
                    let mut dx = vec![0.0; rows * d_in];
                    kernels::gemm(rows, d_out, d_in, 1.0, dy.data(), false, self.value(*w).data(), false, 0.0, &mut dx);
                    Tensor::new(xv.shape(), dx)
                })?;
                self.acc(grads, *w, || {
                    let mut dw = vec![0.0; d_out * d_in];
                    kernels::gemm(d_out, rows, d_in, 1.0, dy.data(), true, xv.data(), false, 0.0, &mut dw);
                    Tensor::new(&[d_out, d_in], dw)
                })?;
                if let Some(b) = b {
                    self.acc(grads, *b, || {
                        let mut db = vec![0.0; d_out];
                        for row in dy.data().chunks(d_out) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        Tensor::new(&[d_out], db)
                    })?;
                }
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || {
                    let mut da = vec![0.0; m * k];
                    if !*ta {
                        kernels::gemm(m, n, k, 1.0, dy.data(), false, bv.data(), !*tb, 0.0, &mut da);
                    } else {
                        kernels::gemm(k, n, m, 1.0, bv.data(), *tb, dy.data(), true, 0.0, &mut da);
                    }
                    Tensor::new(av.shape(), da)
                })?;
                self.acc(grads, *b, || {
                    let mut db = vec![0.0; k * n];
                    if !*tb {
                        kernels::gemm(k, m, n, 1.0, av.data(), !*ta, dy.data(), false, 0.0, &mut db);
                    } else {
                        kernels::gemm(n, m, k, 1.0, dy.data(), true, av.data(), *ta, 0.0, &mut db);
                    }
                    Tensor::new(bv.shape(), db)
                })?;
            }
            Op::AddChannel(x, v) => {
                self.acc(grads, *x, || Ok(dy.clone()))?;
                self.acc(grads, *v, || {
                    let c = self.value(*v).len();
                    let inner = dy.len() / c;
                    let d: Vec<f64> = dy.data().chunks(inner).map(|ch| ch.iter().sum()).collect();
                    Tensor::new(self.value(*v).shape(), d)
                })?;
            }
            Op::MulChannel(x, v) => {
                let vv = self.value(*v);
                let c = vv.len();
                let inner = dy.len() / c;
                self.acc(grads, *x, || {
                    let mut d = dy.clone();
                    for (ch, chunk) in d.data_mut().chunks_mut(inner).enumerate() {
                        for g in chunk {
                            *g *= vv.data()[ch];
                        }
                    }
                    Ok(d)
                })?;
                self.acc(grads, *v, || {
                    let xv = self.value(*x);
                    let d: Vec<f64> = dy
                        .data()
                        .chunks(inner)
                        .zip(xv.data().chunks(inner))
                        .map(|(g, xs)| g.iter().zip(xs).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::new(vv.shape(), d)
                })?;
            }
            Op::ScaleShift { x, scale, shift, broadcast } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                if *broadcast {
                    let c = sv.len();
                    let inner = dy.len() / c;
                    self.acc(grads, *x, || {
                        let mut d = dy.clone();
                        for (ch, chunk) in d.data_mut().chunks_mut(inner).enumerate() {
                            for g in chunk {
                                *g *= 1.0 + sv.data()[ch];
                            }
                        }
                        Ok(d)
                    })?;
                    self.acc(grads, *scale, || {
                        let d: Vec<f64> = dy
                            .data()
                            .chunks(inner)
                            .zip(xv.data().chunks(inner))
                            .map(|(g, xs)| g.iter().zip(xs).map(|(a, b)| a * b).sum())
                            .collect();
                        Tensor::new(sv.shape(), d)
                    })?;
                    self.acc(grads, *shift, || {
                        let d: Vec<f64> = dy.data().chunks(inner).map(|g| g.iter().sum()).collect();
                        Tensor::new(sv.shape(), d)
                    })?;
                } else {
                    self.acc(grads, *x, || dy.zip_with(sv, |g, s| g * (1.0 + s)))?;
                    self.acc(grads, *scale, || dy.mul(xv))?;
                    self.acc(grads, *shift, || Ok(dy.clone()))?;
                }
            }
            Op::SoftmaxRows(x) => {
                let y = self.value(out);
                let (_, cols) = y.dims2()?;
                self.acc(grads, *x, || {
                    let mut d = vec![0.0; y.len()];
                    for ((drow, yrow), grow) in d.chunks_mut(cols).zip(y.data().chunks(cols)).zip(dy.data().chunks(cols)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    Tensor::new(y.shape(), d)
                })?;
            }
            Op::Narrow0 { x, start } => {
                self.acc(grads, *x, || {
                    let xv = self.value(*x);
                    let inner: usize = xv.shape()[1..].iter().product();
                    let mut d = Tensor::zeros(xv.shape());
                    d.data_mut()[start * inner..start * inner + dy.len()].copy_from_slice(dy.data());
                    Ok(d)
                })?;
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let shape = self.value(p).shape().to_vec();
                    let o = offset;
                    self.acc(grads, p, || Tensor::new(&shape, dy.data()[o..o + len].to_vec()))?;
                    offset += len;
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, || dy.clone().reshape(self.value(*x).shape()))?,
            Op::AvgPool2(x) => self.acc(grads, *x, || {
                let (c, h, w) = self.value(*x).dims3()?;
                let up = kernels::upsample2(dy.data(), c, h / 2, w / 2);
                Ok(Tensor::new(&[c, h, w], up)?.scale(0.25))
            })?,
            Op::Upsample2(x) => self.acc(grads, *x, || {
                let (c, h, w) = self.value(*x).dims3()?;
                let pooled = kernels::avg_pool2(dy.data(), c, 2 * h, 2 * w);
                Ok(Tensor::new(&[c, h, w], pooled)?.scale(4.0))
            })?,
            Op::Crop { x, y0, x0 } => self.acc(grads, *x, || {
                let mut d = Tensor::zeros(self.value(*x).shape());
                d.paste(dy, *y0, *x0)?;
                Ok(d)
            })?,
            Op::Tile2x2(parts) => {
                let (_, h, w) = self.value(parts[0]).dims3()?;
                for (q, &p) in parts.iter().enumerate() {
                    let (qy, qx) = (q / 2 * h, q % 2 * w);
                    self.acc(grads, p, || dy.crop(qy, qx, h, w))?;
                }
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                self.acc(grads, *x, || Ok(Tensor::full(self.value(*x).shape(), g)))?
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let g = dy.data()[0] / n;
                self.acc(grads, *x, || Ok(Tensor::full(self.value(*x).shape(), g)))?
            }
            Op::MseTo { x, target } => {
                let xv = self.value(*x);
                let s = 2.0 * dy.data()[0] / xv.len() as f64;
                self.acc(grads, *x, || xv.zip_with(target, |a, b| s * (a - b)))?
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Result<Tensor>) -> Result<()> {
        if !self.requires(v) {
            return Ok(());
        }
        let g = f()?;
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        c_out: usize,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let hw = geom.h_out * geom.w_out;
        let kk = geom.c_in * geom.k * geom.k;
        let xv = self.value(x);
        let wv = self.value(w);
        if self.requires(w) {
            let mut dw = vec![0.0; c_out * kk];
            if is_pointwise(geom) {
                kernels::gemm(c_out, hw, kk, 1.0, dy.data(), false, xv.data(), true, 0.0, &mut dw);
            } else {
                let mut cols = vec![0.0; geom.cols_len()];
                kernels::im2col(xv.data(), geom, &mut cols);
                kernels::gemm(c_out, hw, kk, 1.0, dy.data(), false, &cols, true, 0.0, &mut dw);
            }
            self.acc(grads, w, || Tensor::new(wv.shape(), dw))?;
        }
        if let Some(b) = b {
            self.acc(grads, b, || {
                let db: Vec<f64> = dy.data().chunks(hw).map(|r| r.iter().sum()).collect();
                Tensor::new(&[c_out], db)
            })?;
        }
        self.acc(grads, x, || {
            if is_pointwise(geom) {
                let mut dx = vec![0.0; xv.len()];
                kernels::gemm(kk, c_out, hw, 1.0, wv.data(), true, dy.data(), false, 0.0, &mut dx);
                return Tensor::new(xv.shape(), dx);
            }
            let mut dcols = vec![0.0; geom.cols_len()];
            kernels::gemm(kk, c_out, hw, 1.0, wv.data(), true, dy.data(), false, 0.0, &mut dcols);
            let mut dx = vec![0.0; xv.len()];
            kernels::col2im(&dcols, geom, &mut dx);
            Tensor::new(xv.shape(), dx)
        })
    }

    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xv = self.value(x);
        let gm = self.value(gamma).data();
        let (c, inner) = channel_len(xv)?;
        let per_group = c / groups;
        let stats = kernels::group_stats(xv.data(), groups);
        let xhat: Vec<f64> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (mean, rstd) = stats[i / inner / per_group];
                (v - mean) * rstd
            })
            .collect();
        self.acc(grads, beta, || {
            let d: Vec<f64> = dy.data().chunks(inner).map(|r| r.iter().sum()).collect();
            Tensor::new(&[c], d)
        })?;
        self.acc(grads, gamma, || {
            let d: Vec<f64> = dy
                .data()
                .chunks(inner)
                .zip(xhat.chunks(inner))
                .map(|(g, xh)| g.iter().zip(xh).map(|(a, b)| a * b).sum())
                .collect();
            Tensor::new(&[c], d)
        })?;
        self.acc(grads, x, || {
            let group_len = per_group * inner;
            let n = group_len as f64;
            let mut dx = vec![0.0; xv.len()];
            for gi in 0..groups {
                let rstd = stats[gi].1;
                let range = gi * group_len..(gi + 1) * group_len;
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for i in range.clone() {
                    let dxh = dy.data()[i] * gm[i / inner];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[i];
                }
                for i in range {
                    let dxh = dy.data()[i] * gm[i / inner];
                    dx[i] = rstd / n * (n * dxh - sum_dxh - xhat[i] * sum_dxh_xh);
                }
            }
            Tensor::new(xv.shape(), dx)
        })
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

/// Plain-tensor version of [`Graph::tile2x2`].
pub fn tile2x2(parts: [&Tensor; 4]) -> Result<Tensor> {
    let (c, h, w) = parts[0].dims3()?;
    for p in &parts[1..] {
        if p.dims3()? != (c, h, w) {
            return Err(Error::dim(format!(
                "tile2x2 blocks differ: {:?} vs {:?}",
                parts[0].shape(),
                p.shape()
            )));
        }
    }
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for (q, p) in parts.iter().enumerate() {
        out.paste(p, q / 2 * h, q % 2 * w)?;
    }
    Ok(out)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Affine(..) => "affine",
        Op::Silu(..) => "silu",
        Op::Conv2d { .. } => "conv2d",
        Op::GroupNorm { .. } => "group_norm",
        Op::Linear { .. } => "linear",
        Op::MatMul { .. } => "matmul",
        Op::AddChannel(..) => "add_channel",
        Op::MulChannel(..) => "mul_channel",
        Op::ScaleShift { .. } => "scale_shift",
        Op::SoftmaxRows(..) => "softmax",
        Op::Narrow0 { .. } => "narrow",
        Op::Concat0(..) => "concat",
        Op::Reshape(..) => "reshape",
        Op::AvgPool2(..) => "avg_pool2",
        Op::Upsample2(..) => "upsample2",
        Op::Crop { .. } => "crop",
        Op::Tile2x2(..) => "tile2x2",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MseTo { .. } => "mse",
    }
}
