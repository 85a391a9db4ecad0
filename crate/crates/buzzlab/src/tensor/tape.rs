//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! A tape owns every intermediate value of one forward pass. Operations
//! append nodes in topological order; `backward` walks the nodes once in
//! reverse. A tape and its tensors form one single-writer unit; distinct
//! tapes are independent.

use super::{same_shape, sign, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    L1,
    L2,
    LInf,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Relu(usize),
    Tanh(usize),
    Softmax(usize),
    CrossEntropyLogits {
        logits: usize,
        label: usize,
    },
    Reshape(usize),
    Clip {
        input: usize,
        lo: f64,
        hi: f64,
    },
    Sign,
    Sum(usize),
    Scale {
        input: usize,
        factor: f64,
    },
    AddScalar(usize),
    Gather {
        input: usize,
        indices: Vec<usize>,
    },
    Norm {
        input: usize,
        kind: NormKind,
    },
    ChannelLinear {
        input: usize,
        mats: Vec<Tensor>,
    },
    ResizeBilinear {
        input: usize,
        target: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: VarId) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor { shape: self.value(a).shape().to_vec(), data };
        Ok(self.push(value, Op::Add(a.0, b.0), self.needs(&[a.0, b.0])))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let value = Tensor { shape: self.value(a).shape().to_vec(), data };
        Ok(self.push(value, Op::Sub(a.0, b.0), self.needs(&[a.0, b.0])))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor { shape: self.value(a).shape().to_vec(), data };
        Ok(self.push(value, Op::Mul(a.0, b.0), self.needs(&[a.0, b.0])))
    }

    /// (m,k) x (k,n) -> (m,n)
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += av * row[j];
                }
            }
        }
        let value = Tensor { shape: vec![m, n], data: out };
        Ok(self.push(value, Op::MatMul(a.0, b.0), self.needs(&[a.0, b.0])))
    }

    /// 2-D convolution, stride 1, zero padding preserving spatial size.
    /// input (h,w,cin), kernel (kh,kw,cin,cout) with odd kh==kw, bias (cout).
    pub fn conv2d(&mut self, input: VarId, kernel: VarId, bias: VarId) -> Result<VarId> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        let ok = si.len() == 3
            && sk.len() == 4
            && sk[0] == sk[1]
            && sk[0] % 2 == 1
            && sk[2] == si[2]
            && self.value(bias).shape() == [sk[3]];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let (h, w, cin) = (si[0], si[1], si[2]);
        let (kh, cout) = (sk[0], sk[3]);
        let pad = kh / 2;
        let din = self.value(input).data();
        let dk = self.value(kernel).data();
        let dbias = self.value(bias).data();
        let mut out = vec![0.0; h * w * cout];
        for oy in 0..h {
            for ox in 0..w {
                let dst = &mut out[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
                dst.copy_from_slice(dbias);
                for ky in 0..kh {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for kx in 0..kh {
                        let ix = ox + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        let ix = ix - pad;
                        let src = &din[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        for (ci, &iv) in src.iter().enumerate() {
                            if iv == 0.0 {
                                continue;
                            }
                            let krow = &dk[((ky * kh + kx) * cin + ci) * cout..((ky * kh + kx) * cin + ci + 1) * cout];
                            for co in 0..cout {
                                dst[co] += iv * krow[co];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor { shape: vec![h, w, cout], data: out };
        let rg = self.needs(&[input.0, kernel.0, bias.0]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2; trailing odd row/column dropped.
    pub fn max_pool2(&mut self, input: VarId) -> Result<VarId> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 3 || s[0] < 2 || s[1] < 2 {
            return Err(Error::ShapeMismatch {
                op: "max_pool2",
                lhs: s,
                rhs: vec![2, 2],
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let din = self.value(input).data();
        let mut out = vec![0.0; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if din[idx] > best {
                                best = din[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (oy * ow + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let value = Tensor { shape: vec![oh, ow, c], data: out };
        let rg = self.needs(&[input.0]);
        Ok(self.push(value, Op::MaxPool2 { input: input.0, argmax }, rg))
    }

    pub fn relu(&mut self, input: VarId) -> VarId {
        let value = self.value(input).map(|v| v.max(0.0));
        let rg = self.needs(&[input.0]);
        self.push(value, Op::Relu(input.0), rg)
    }

    pub fn tanh(&mut self, input: VarId) -> VarId {
        let value = self.value(input).map(f64::tanh);
        let rg = self.needs(&[input.0]);
        self.push(value, Op::Tanh(input.0), rg)
    }

    /// Numerically stable softmax over the flattened input.
    pub fn softmax(&mut self, input: VarId) -> VarId {
        let x = self.value(input).data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let value = Tensor {
            shape: self.value(input).shape().to_vec(),
            data: exps.iter().map(|e| e / total).collect(),
        };
        let rg = self.needs(&[input.0]);
        self.push(value, Op::Softmax(input.0), rg)
    }

    /// Cross-entropy of softmax(logits) against a hard label, fused for stability.
    pub fn cross_entropy_logits(&mut self, logits: VarId, label: usize) -> Result<VarId> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::invalid(format!(
                "label {} out of range for {} logits",
                label,
                z.len()
            )));
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let value = Tensor::scalar(lse - z[label]);
        let rg = self.needs(&[logits.0]);
        Ok(self.push(value, Op::CrossEntropyLogits { logits: logits.0, label }, rg))
    }

    pub fn reshape(&mut self, input: VarId, shape: Vec<usize>) -> Result<VarId> {
        let value = self.value(input).reshaped(shape)?;
        let rg = self.needs(&[input.0]);
        Ok(self.push(value, Op::Reshape(input.0), rg))
    }

    pub fn clip(&mut self, input: VarId, lo: f64, hi: f64) -> VarId {
        let value = self.value(input).clamped(lo, hi);
        let rg = self.needs(&[input.0]);
        self.push(value, Op::Clip { input: input.0, lo, hi }, rg)
    }

    /// Elementwise sign with sign(0) = 0. Gradient is zero everywhere.
    pub fn sign(&mut self, input: VarId) -> VarId {
        let value = self.value(input).map(sign);
        let rg = self.needs(&[input.0]);
        self.push(value, Op::Sign, rg)
    }

    pub fn sum(&mut self, input: VarId) -> VarId {
        let value = Tensor::scalar(self.value(input).data().iter().sum());
        let rg = self.needs(&[input.0]);
        self.push(value, Op::Sum(input.0), rg)
    }

    pub fn scale(&mut self, input: VarId, factor: f64) -> VarId {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.needs(&[input.0]);
        self.push(value, Op::Scale { input: input.0, factor }, rg)
    }

    pub fn add_scalar(&mut self, input: VarId, offset: f64) -> VarId {
        let value = self.value(input).map(|v| v + offset);
        let rg = self.needs(&[input.0]);
        self.push(value, Op::AddScalar(input.0), rg)
    }

    pub fn gather(&mut self, input: VarId, indices: Vec<usize>) -> Result<VarId> {
        let d = self.value(input).data();
        if indices.iter().any(|&i| i >= d.len()) {
            return Err(Error::invalid("gather index out of range".to_string()));
        }
        let value = Tensor {
            shape: vec![indices.len()],
            data: indices.iter().map(|&i| d[i]).collect(),
        };
        let rg = self.needs(&[input.0]);
        Ok(self.push(value, Op::Gather { input: input.0, indices }, rg))
    }

    /// L1 / L2 / L-infinity norm of the flattened input, as a scalar node.
    pub fn norm(&mut self, input: VarId, kind: NormKind) -> VarId {
        let d = self.value(input).data();
        let v = match kind {
            NormKind::L1 => d.iter().map(|v| v.abs()).sum(),
            NormKind::L2 => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
            NormKind::LInf => d.iter().map(|v| v.abs()).fold(0.0, f64::max),
        };
        let rg = self.needs(&[input.0]);
        self.push(Tensor::scalar(v), Op::Norm { input: input.0, kind }, rg)
    }

    /// Per-channel right-multiplication Y_i = X_i * A_i + B_i.
    /// input (h,w,c); mats holds A_0..A_{c-1} (w,w) then B_0..B_{c-1} (h,w).
    pub fn channel_linear(&mut self, input: VarId, mats: Vec<Tensor>) -> Result<VarId> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 3 || mats.len() != 2 * s[2] {
            return Err(Error::ShapeMismatch {
                op: "channel_linear",
                lhs: s,
                rhs: vec![mats.len()],
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        for ch in 0..c {
            if mats[ch].shape() != [w, w] || mats[c + ch].shape() != [h, w] {
                return Err(Error::ShapeMismatch {
                    op: "channel_linear",
                    lhs: mats[ch].shape().to_vec(),
                    rhs: vec![w, w],
                });
            }
        }
        let din = self.value(input).data();
        let mut out = vec![0.0; h * w * c];
        for ch in 0..c {
            let a = mats[ch].data();
            let b = mats[c + ch].data();
            for y in 0..h {
                for j in 0..w {
                    let mut acc = b[y * w + j];
                    for p in 0..w {
                        acc += din[(y * w + p) * c + ch] * a[p * w + j];
                    }
                    out[(y * w + j) * c + ch] = acc;
                }
            }
        }
        let value = Tensor { shape: vec![h, w, c], data: out };
        let rg = self.needs(&[input.0]);
        Ok(self.push(value, Op::ChannelLinear { input: input.0, mats }, rg))
    }

    /// Corner-aligned bilinear resize of a square (s,s,c) image to (t,t,c), t >= s.
    pub fn resize_bilinear(&mut self, input: VarId, target: usize) -> Result<VarId> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 3 || s[0] != s[1] || target < s[0] {
            return Err(Error::ShapeMismatch {
                op: "resize_bilinear",
                lhs: s,
                rhs: vec![target, target],
            });
        }
        let (side, c) = (s[0], s[2]);
        let taps = resize_taps(side, target);
        let din = self.value(input).data();
        let mut out = vec![0.0; target * target * c];
        for (oy, &(y0, y1, wy)) in taps.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in taps.iter().enumerate() {
                for ch in 0..c {
                    let v00 = din[(y0 * side + x0) * c + ch];
                    let v01 = din[(y0 * side + x1) * c + ch];
                    let v10 = din[(y1 * side + x0) * c + ch];
                    let v11 = din[(y1 * side + x1) * c + ch];
                    let top = v00 * (1.0 - wx) + v01 * wx;
                    let bot = v10 * (1.0 - wx) + v11 * wx;
                    out[(oy * target + ox) * c + ch] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        let value = Tensor { shape: vec![target, target, c], data: out };
        let rg = self.needs(&[input.0]);
        Ok(self.push(value, Op::ResizeBilinear { input: input.0, target }, rg))
    }

    /// Reverse-mode pass from a scalar loss. Each participating node's
    /// gradient is visited exactly once in reverse topological order.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        // disconnected-but-tracked nodes get an explicit zero gradient
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; self.nodes[i].value.len()]);
            }
        }
        Ok(())
    }

    fn accum(&mut self, node: usize, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let len = self.nodes[node].value.len();
        let slot = self.grads[node].get_or_insert_with(|| vec![0.0; len]);
        contrib(slot.as_mut_slice());
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Values referenced by the node are cloned out where aliasing with
        // the gradient slot would otherwise occur.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accum(b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accum(b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a].value.data().to_vec();
                let vb = self.nodes[b].value.data().to_vec();
                self.accum(a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                self.accum(b, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a].value.shape().to_vec();
                let sb = self.nodes[b].value.shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let va = self.nodes[a].value.data().to_vec();
                let vb = self.nodes[b].value.data().to_vec();
                // dA = G * B^T
                self.accum(a, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * vb[p * n + j];
                            }
                            d[i * k + p] += acc;
                        }
                    }
                });
                // dB = A^T * G
                self.accum(b, |d| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += va[i * k + p] * g[i * n + j];
                            }
                            d[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::Conv2d { input, kernel, bias } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let si = self.nodes[input].value.shape().to_vec();
                let sk = self.nodes[kernel].value.shape().to_vec();
                let (h, w, cin) = (si[0], si[1], si[2]);
                let (kh, cout) = (sk[0], sk[3]);
                let pad = kh / 2;
                let din = self.nodes[input].value.data().to_vec();
                let dk = self.nodes[kernel].value.data().to_vec();
                self.accum(input, |d| {
                    for oy in 0..h {
                        for ox in 0..w {
                            let go = &g[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
                            for ky in 0..kh {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for kx in 0..kh {
                                    let ix = ox + kx;
                                    if ix < pad || ix - pad >= w {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    for ci in 0..cin {
                                        let krow = &dk[((ky * kh + kx) * cin + ci) * cout
                                            ..((ky * kh + kx) * cin + ci + 1) * cout];
                                        let mut acc = 0.0;
                                        for co in 0..cout {
                                            acc += go[co] * krow[co];
                                        }
                                        d[(iy * w + ix) * cin + ci] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
                self.accum(kernel, |d| {
                    for oy in 0..h {
                        for ox in 0..w {
                            let go = &g[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
                            for ky in 0..kh {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for kx in 0..kh {
                                    let ix = ox + kx;
                                    if ix < pad || ix - pad >= w {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    for ci in 0..cin {
                                        let iv = din[(iy * w + ix) * cin + ci];
                                        if iv == 0.0 {
                                            continue;
                                        }
                                        let base = ((ky * kh + kx) * cin + ci) * cout;
                                        for co in 0..cout {
                                            d[base + co] += iv * go[co];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.accum(bias, |d| {
                    for oy in 0..h {
                        for ox in 0..w {
                            let go = &g[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
                            for co in 0..cout {
                                d[co] += go[co];
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => {
                let input = *input;
                let argmax = argmax.clone();
                self.accum(input, |d| {
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += g[o];
                    }
                });
            }
            Op::Relu(a) => {
                let a = *a;
                let va = self.nodes[a].value.data().to_vec();
                self.accum(a, |d| {
                    for k in 0..d.len() {
                        if va[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = self.nodes[i].value.data().to_vec();
                self.accum(a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = self.nodes[i].value.data().to_vec();
                let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                self.accum(a, |d| {
                    for k in 0..d.len() {
                        d[k] += y[k] * (g[k] - dot);
                    }
                });
            }
            Op::CrossEntropyLogits { logits, label } => {
                let (logits, label) = (*logits, *label);
                let z = self.nodes[logits].value.data().to_vec();
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let g0 = g[0];
                self.accum(logits, |d| {
                    for k in 0..d.len() {
                        let p = exps[k] / total;
                        let onehot = if k == label { 1.0 } else { 0.0 };
                        d[k] += g0 * (p - onehot);
                    }
                });
            }
            Op::Reshape(a) => {
                let a = *a;
                self.accum(a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Clip { input, lo, hi } => {
                let (input, lo, hi) = (*input, *lo, *hi);
                let va = self.nodes[input].value.data().to_vec();
                self.accum(input, |d| {
                    for k in 0..d.len() {
                        if va[k] > lo && va[k] < hi {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sign => {}
            Op::Sum(a) => {
                let a = *a;
                let g0 = g[0];
                self.accum(a, |d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                self.accum(input, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * factor;
                    }
                });
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accum(a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Gather { input, indices } => {
                let input = *input;
                let indices = indices.clone();
                self.accum(input, |d| {
                    for (o, &src) in indices.iter().enumerate() {
                        d[src] += g[o];
                    }
                });
            }
            Op::Norm { input, kind } => {
                let (input, kind) = (*input, *kind);
                let va = self.nodes[input].value.data().to_vec();
                let g0 = g[0];
                match kind {
                    NormKind::L1 => self.accum(input, |d| {
                        for k in 0..d.len() {
                            d[k] += g0 * sign(va[k]);
                        }
                    }),
                    NormKind::L2 => {
                        let norm = self.nodes[i].value.item().max(1e-12);
                        self.accum(input, |d| {
                            for k in 0..d.len() {
                                d[k] += g0 * va[k] / norm;
                            }
                        });
                    }
                    NormKind::LInf => {
                        // subgradient at the first element of maximal magnitude
                        let mut best = 0usize;
                        for k in 1..va.len() {
                            if va[k].abs() > va[best].abs() {
                                best = k;
                            }
                        }
                        self.accum(input, |d| d[best] += g0 * sign(va[best]));
                    }
                }
            }
            Op::ChannelLinear { input, mats } => {
                let input = *input;
                let mats = mats.clone();
                let s = self.nodes[input].value.shape().to_vec();
                let (h, w, c) = (s[0], s[1], s[2]);
                // dX_i = dY_i * A_i^T
                self.accum(input, |d| {
                    for ch in 0..c {
                        let a = mats[ch].data();
                        for y in 0..h {
                            for p in 0..w {
                                let mut acc = 0.0;
                                for j in 0..w {
                                    acc += g[(y * w + j) * c + ch] * a[p * w + j];
                                }
                                d[(y * w + p) * c + ch] += acc;
                            }
                        }
                    }
                });
            }
            Op::ResizeBilinear { input, target } => {
                let (input, target) = (*input, *target);
                let s = self.nodes[input].value.shape().to_vec();
                let (side, c) = (s[0], s[2]);
                let taps = resize_taps(side, target);
                self.accum(input, |d| {
                    for (oy, &(y0, y1, wy)) in taps.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in taps.iter().enumerate() {
                            for ch in 0..c {
                                let go = g[(oy * target + ox) * c + ch];
                                d[(y0 * side + x0) * c + ch] += go * (1.0 - wy) * (1.0 - wx);
                                d[(y0 * side + x1) * c + ch] += go * (1.0 - wy) * wx;
                                d[(y1 * side + x0) * c + ch] += go * wy * (1.0 - wx);
                                d[(y1 * side + x1) * c + ch] += go * wy * wx;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Sampling grid for corner-aligned bilinear interpolation: for each output
/// coordinate, the two source indices and the fractional weight of the
/// second. t == s yields exact identity taps.
fn resize_taps(source: usize, target: usize) -> Vec<(usize, usize, f64)> {
    (0..target)
        .map(|o| {
            if target == 1 || source == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (source - 1) as f64 / (target - 1) as f64;
            let i0 = pos.floor() as usize;
            let i0 = i0.min(source - 1);
            let i1 = (i0 + 1).min(source - 1);
            let frac = pos - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}
