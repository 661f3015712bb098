//! Dense 64-bit tensors and a reverse-mode tape.
//!
//! Feature maps are `[H, W, C]` row-major with channels innermost.
//! Convolution kernels are `[k, k, C_in, C_out]`, dense weights `[out, in]`.
//! Every operation records a node on the [`Tape`]; [`Tape::backward`] walks
//! the nodes in exact reverse order.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::input(format!("tensors have 1 to 4 axes, got {}", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::input(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn map3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            s => Err(Error::input(format!("expected an HxWxC map, got shape {s:?}"))),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    /// `[1, 1, C]` against `[H, W, C]`.
    Channel,
    /// `[H, W, 1]` against `[H, W, C]`.
    Spatial,
}

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul { full: Var, other: Var, mode: Broadcast },
    Scale(Var, f64),
    GlobalAvgPool(Var),
    GlobalMaxPool { input: Var, argmax: Vec<usize> },
    ChannelMean(Var),
    ChannelMax { input: Var, argmax: Vec<usize> },
    ConcatChannels(Var, Var),
    Dense { input: Var, weights: Var, bias: Var },
    Reshape(Var),
    Gather { input: Var, index: Vec<usize> },
    Sum(Var),
    SumSquares(Var),
    Affine { input: Var, matrix: Arc<DMatrix<f64>> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; use one tape per sample.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated gradients after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::input(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same-padded stride-1 cross-correlation with an odd square kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let kt = &self.nodes[kernel.0].value;
        let b = &self.nodes[bias.0].value;
        let (h, w, ci) = x.map3()?;
        let (k, co) = match kt.shape.as_slice() {
            &[k1, k2, kci, kco] if k1 == k2 && k1 % 2 == 1 && kci == ci => (k1, kco),
            s => {
                return Err(Error::input(format!(
                    "conv2d kernel {s:?} incompatible with input {:?} (need odd k x k x {ci} x C_out)",
                    x.shape
                )))
            }
        };
        if b.shape != [co] {
            return Err(Error::input(format!("conv2d bias {:?} != [{co}]", b.shape)));
        }
        let out = conv2d_forward(&x.data, &kt.data, &b.data, h, w, ci, co, k);
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Tensor { shape: vec![h, w, co], data: out },
            Op::Conv2d { input, kernel, bias },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let data = v.data.iter().map(|&a| a.max(0.0)).collect();
        let out = Tensor { shape: v.shape.clone(), data };
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let data = v.data.iter().map(|&a| sigmoid(a)).collect();
        let out = Tensor { shape: v.shape.clone(), data };
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_same(va, vb, "add")?;
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_same(va, vb, "sub")?;
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Element-wise product. Besides equal shapes, one operand may be a
    /// `[1, 1, C]` or `[H, W, 1]` mask broadcast against an `[H, W, C]` map.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        let pattern = |full: &[usize], other: &[usize]| -> Option<Broadcast> {
            if full == other {
                return Some(Broadcast::None);
            }
            match (full, other) {
                (&[_, _, c], &[1, 1, oc]) if oc == c => Some(Broadcast::Channel),
                (&[h, w, _], &[oh, ow, 1]) if oh == h && ow == w => Some(Broadcast::Spatial),
                _ => None,
            }
        };
        let (full, other, mode) = if let Some(m) = pattern(sa, sb) {
            (a, b, m)
        } else if let Some(m) = pattern(sb, sa) {
            (b, a, m)
        } else {
            return Err(Error::input(format!("mul: cannot broadcast {sa:?} with {sb:?}")));
        };
        let vf = &self.nodes[full.0].value;
        let vo = &self.nodes[other.0].value;
        let c = *vf.shape.last().unwrap();
        let data = match mode {
            Broadcast::None => vf.data.iter().zip(&vo.data).map(|(x, y)| x * y).collect(),
            Broadcast::Channel => vf.data.iter().enumerate().map(|(i, x)| x * vo.data[i % c]).collect(),
            Broadcast::Spatial => vf.data.iter().enumerate().map(|(i, x)| x * vo.data[i / c]).collect(),
        };
        let out = Tensor { shape: vf.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { full, other, mode }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = &self.nodes[x.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|a| a * factor).collect(),
        };
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Mean over height and width: `[H, W, C] -> [1, 1, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let (h, w, c) = v.map3()?;
        let mut out = vec![0.0; c];
        for px in v.data.chunks_exact(c) {
            for (o, a) in out.iter_mut().zip(px) {
                *o += a;
            }
        }
        let inv = 1.0 / (h * w) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![1, 1, c], data: out }, Op::GlobalAvgPool(x), rg))
    }

    /// Max over height and width; ties go to the lowest linear index.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let (_, _, c) = v.map3()?;
        let mut out = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for (i, &a) in v.data.iter().enumerate() {
            let ch = i % c;
            if a > out[ch] {
                out[ch] = a;
                argmax[ch] = i;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape: vec![1, 1, c], data: out },
            Op::GlobalMaxPool { input: x, argmax },
            rg,
        ))
    }

    /// Mean over channels: `[H, W, C] -> [H, W, 1]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let (h, w, c) = v.map3()?;
        let inv = 1.0 / c as f64;
        let data = v.data.chunks_exact(c).map(|px| px.iter().sum::<f64>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![h, w, 1], data }, Op::ChannelMean(x), rg))
    }

    /// Max over channels; ties go to the lowest channel index.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let (h, w, c) = v.map3()?;
        let mut data = Vec::with_capacity(h * w);
        let mut argmax = Vec::with_capacity(h * w);
        for (p, px) in v.data.chunks_exact(c).enumerate() {
            let mut best = 0;
            for (i, &a) in px.iter().enumerate() {
                if a > px[best] {
                    best = i;
                }
            }
            data.push(px[best]);
            argmax.push(p * c + best);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor { shape: vec![h, w, 1], data },
            Op::ChannelMax { input: x, argmax },
            rg,
        ))
    }

    /// Stack two maps of equal spatial size along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (h, w, ca) = va.map3()?;
        let (hb, wb, cb) = vb.map3()?;
        if (h, w) != (hb, wb) {
            return Err(Error::input("concat_channels: spatial sizes differ"));
        }
        let mut data = Vec::with_capacity(h * w * (ca + cb));
        for (pa, pb) in va.data.chunks_exact(ca).zip(vb.data.chunks_exact(cb)) {
            data.extend_from_slice(pa);
            data.extend_from_slice(pb);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor { shape: vec![h, w, ca + cb], data },
            Op::ConcatChannels(a, b),
            rg,
        ))
    }

    /// `weights * x + bias` with `weights` shaped `[out, in]`. A `[1, 1, in]`
    /// input produces a `[1, 1, out]` output, anything else a flat `[out]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weights.0].value;
        let b = &self.nodes[bias.0].value;
        let (o, i) = match wt.shape.as_slice() {
            &[o, i] if i == x.len() => (o, i),
            s => {
                return Err(Error::input(format!(
                    "dense weights {s:?} incompatible with input of length {}",
                    x.len()
                )))
            }
        };
        if b.shape != [o] {
            return Err(Error::input(format!("dense bias {:?} != [{o}]", b.shape)));
        }
        let data: Vec<f64> = (0..o)
            .map(|r| b.data[r] + wt.data[r * i..(r + 1) * i].iter().zip(&x.data).map(|(p, q)| p * q).sum::<f64>())
            .collect();
        let shape = if x.shape.len() == 3 { vec![1, 1, o] } else { vec![o] };
        let rg = self.rg(input) || self.rg(weights) || self.rg(bias);
        Ok(self.push(Tensor { shape, data }, Op::Dense { input, weights, bias }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let t = Tensor::new(shape, v.data.clone())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if let Some(&bad) = index.iter().find(|&&i| i >= v.len()) {
            return Err(Error::input(format!("gather index {bad} out of range {}", v.len())));
        }
        let t = Tensor::new(shape, index.iter().map(|&i| v.data[i]).collect())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather { input: x, index }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().map(|a| a * a).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// `matrix * x + offset` for a constant matrix and offset.
    pub fn affine(&mut self, input: Var, matrix: Arc<DMatrix<f64>>, offset: &[f64]) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        if matrix.ncols() != x.len() || matrix.nrows() != offset.len() {
            return Err(Error::input(format!(
                "affine: matrix {}x{} with input {} and offset {}",
                matrix.nrows(),
                matrix.ncols(),
                x.len(),
                offset.len()
            )));
        }
        let xv = DVector::from_column_slice(&x.data);
        let y = &*matrix * xv + DVector::from_column_slice(offset);
        let rg = self.rg(input);
        Ok(self.push(Tensor::from_vec(y.as_slice().to_vec()), Op::Affine { input, matrix }, rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::input(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias } => {
                let x = val(*input);
                let kt = val(*kernel);
                let (h, w, ci) = (x.shape[0], x.shape[1], x.shape[2]);
                let (k, co) = (kt.shape[0], kt.shape[3]);
                if self.rg(*bias) {
                    self.accumulate(grads, *bias, |gb| {
                        for px in g.chunks_exact(co) {
                            for (a, b) in gb.iter_mut().zip(px) {
                                *a += b;
                            }
                        }
                    });
                }
                if self.rg(*input) {
                    self.accumulate(grads, *input, |gx| {
                        conv2d_backward_input(g, &kt.data, gx, h, w, ci, co, k)
                    });
                }
                if self.rg(*kernel) {
                    self.accumulate(grads, *kernel, |gk| {
                        conv2d_backward_kernel(g, &x.data, gk, h, w, ci, co, k)
                    });
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((a, &b), &xi) in gx.iter_mut().zip(g).zip(&xv.data) {
                        if xi > 0.0 {
                            *a += b;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                self.accumulate(grads, *x, |gx| {
                    for ((a, &b), &s) in gx.iter_mut().zip(g).zip(y) {
                        *a += b * s * (1.0 - s);
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(p, q)| *p += sign * q));
            }
            Op::Mul { full, other, mode } => {
                let vf = val(*full);
                let vo = val(*other);
                let c = *vf.shape.last().unwrap();
                let idx = |i: usize| match mode {
                    Broadcast::None => i,
                    Broadcast::Channel => i % c,
                    Broadcast::Spatial => i / c,
                };
                self.accumulate(grads, *full, |gf| {
                    for (i, (p, q)) in gf.iter_mut().zip(g).enumerate() {
                        *p += q * vo.data[idx(i)];
                    }
                });
                self.accumulate(grads, *other, |go| {
                    for (i, (q, f)) in g.iter().zip(&vf.data).enumerate() {
                        go[idx(i)] += q * f;
                    }
                });
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += f * q));
            }
            Op::GlobalAvgPool(x) => {
                let xv = val(*x);
                let (h, w, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let inv = 1.0 / (h * w) as f64;
                self.accumulate(grads, *x, |gx| {
                    for (i, p) in gx.iter_mut().enumerate() {
                        *p += g[i % c] * inv;
                    }
                });
            }
            Op::GlobalMaxPool { input, argmax } | Op::ChannelMax { input, argmax } => {
                self.accumulate(grads, *input, |gx| {
                    for (&pos, q) in argmax.iter().zip(g) {
                        gx[pos] += q;
                    }
                });
            }
            Op::ChannelMean(x) => {
                let c = val(*x).shape[2];
                let inv = 1.0 / c as f64;
                self.accumulate(grads, *x, |gx| {
                    for (i, p) in gx.iter_mut().enumerate() {
                        *p += g[i / c] * inv;
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let ca = val(*a).shape[2];
                let cb = val(*b).shape[2];
                self.accumulate(grads, *a, |ga| {
                    for (dst, src) in ga.chunks_exact_mut(ca).zip(g.chunks_exact(ca + cb)) {
                        dst.iter_mut().zip(&src[..ca]).for_each(|(p, q)| *p += q);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (dst, src) in gb.chunks_exact_mut(cb).zip(g.chunks_exact(ca + cb)) {
                        dst.iter_mut().zip(&src[ca..]).for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::Dense { input, weights, bias } => {
                let x = val(*input);
                let wt = val(*weights);
                let i = wt.shape[1];
                self.accumulate(grads, *bias, |gb| gb.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                self.accumulate(grads, *weights, |gw| {
                    for (r, q) in g.iter().enumerate() {
                        for (p, xv) in gw[r * i..(r + 1) * i].iter_mut().zip(&x.data) {
                            *p += q * xv;
                        }
                    }
                });
                self.accumulate(grads, *input, |gx| {
                    for (r, q) in g.iter().enumerate() {
                        for (p, wv) in gx.iter_mut().zip(&wt.data[r * i..(r + 1) * i]) {
                            *p += q * wv;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            }
            Op::Gather { input, index } => {
                self.accumulate(grads, *input, |gx| {
                    for (&i, q) in index.iter().zip(g) {
                        gx[i] += q;
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|p| *p += g[0]));
            }
            Op::SumSquares(x) => {
                let xv = val(*x);
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(&xv.data).for_each(|(p, a)| *p += 2.0 * a * g[0])
                });
            }
            Op::Affine { input, matrix } => {
                let gv = matrix.tr_mul(&DVector::from_column_slice(g));
                self.accumulate(grads, *input, |gx| gx.iter_mut().zip(gv.iter()).for_each(|(p, q)| *p += q));
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(x: &[f64], kt: &[f64], b: &[f64], h: usize, w: usize, ci: usize, co: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut out = vec![0.0; h * w * co];
    for i in 0..h {
        for j in 0..w {
            let o = &mut out[(i * w + j) * co..(i * w + j + 1) * co];
            o.copy_from_slice(b);
            for di in 0..k {
                let Some(ii) = (i + di).checked_sub(pad).filter(|&v| v < h) else { continue };
                for dj in 0..k {
                    let Some(jj) = (j + dj).checked_sub(pad).filter(|&v| v < w) else { continue };
                    let xin = &x[(ii * w + jj) * ci..(ii * w + jj + 1) * ci];
                    let kbase = (di * k + dj) * ci * co;
                    for (c, &xv) in xin.iter().enumerate() {
                        let krow = &kt[kbase + c * co..kbase + (c + 1) * co];
                        for (ov, kv) in o.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(g: &[f64], kt: &[f64], gx: &mut [f64], h: usize, w: usize, ci: usize, co: usize, k: usize) {
    let pad = k / 2;
    for i in 0..h {
        for j in 0..w {
            let go = &g[(i * w + j) * co..(i * w + j + 1) * co];
            for di in 0..k {
                let Some(ii) = (i + di).checked_sub(pad).filter(|&v| v < h) else { continue };
                for dj in 0..k {
                    let Some(jj) = (j + dj).checked_sub(pad).filter(|&v| v < w) else { continue };
                    let gin = &mut gx[(ii * w + jj) * ci..(ii * w + jj + 1) * ci];
                    let kbase = (di * k + dj) * ci * co;
                    for (c, gi) in gin.iter_mut().enumerate() {
                        let krow = &kt[kbase + c * co..kbase + (c + 1) * co];
                        *gi += go.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(g: &[f64], x: &[f64], gk: &mut [f64], h: usize, w: usize, ci: usize, co: usize, k: usize) {
    let pad = k / 2;
    for i in 0..h {
        for j in 0..w {
            let go = &g[(i * w + j) * co..(i * w + j + 1) * co];
            for di in 0..k {
                let Some(ii) = (i + di).checked_sub(pad).filter(|&v| v < h) else { continue };
                for dj in 0..k {
                    let Some(jj) = (j + dj).checked_sub(pad).filter(|&v| v < w) else { continue };
                    let xin = &x[(ii * w + jj) * ci..(ii * w + jj + 1) * ci];
                    let kbase = (di * k + dj) * ci * co;
                    for (c, &xv) in xin.iter().enumerate() {
                        let krow = &mut gk[kbase + c * co..kbase + (c + 1) * co];
                        for (kv, gv) in krow.iter_mut().zip(go) {
                            *kv += xv * gv;
                        }
                    }
                }
            }
        }
    }
}
