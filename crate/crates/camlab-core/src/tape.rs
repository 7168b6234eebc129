//! Recorded forward computation with reverse-mode differentiation.
//!
//! A `Tape` is rebuilt per forward pass. Ops append nodes holding the cached
//! output tensor plus whatever the backward rule needs (argmax locations,
//! shape metadata). `backward` replays the node list in reverse and
//! accumulates a gradient tensor per ancestor of the scalar target.
//!
//! Each tape is confined to one thread; parallelism happens one level up
//! (per-image tapes).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kind plus the locals its backward rule needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2d {
        input: NodeId,
        /// Flat input offset of the max for each output element.
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Softmax {
        input: NodeId,
    },
    Exp {
        input: NodeId,
    },
    Log {
        input: NodeId,
    },
    Recip {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    ElemMul {
        a: NodeId,
        b: NodeId,
    },
    SumOver {
        input: NodeId,
        axes: Vec<usize>,
    },
    MaxOver {
        input: NodeId,
        axis: usize,
        /// Index along `axis` of the max for each output element.
        argmax: Vec<usize>,
    },
    Reshape {
        input: NodeId,
    },
    /// Select rows along axis 0.
    Gather {
        input: NodeId,
        indices: Vec<usize>,
    },
    /// `a - s` with `s` a one-element node broadcast over `a`.
    SubBcast {
        a: NodeId,
        s: NodeId,
    },
    /// `a * s` with `s` a one-element node broadcast over `a`.
    MulBcast {
        a: NodeId,
        s: NodeId,
    },
    /// Weighted sum of a channel stack: `out[i,j] = sum_k w[k] * stack[k,i,j]`.
    ChannelCombine {
        stack: NodeId,
        weights: NodeId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one scalar target with respect to every ancestor node.
#[derive(Debug)]
pub struct GradientBundle {
    target: NodeId,
    grads: Vec<Option<Tensor>>,
}

impl GradientBundle {
    pub fn target(&self) -> NodeId {
        self.target
    }

    /// Gradient tensor for a node, if gradient flowed to it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn conv_out_dim(input: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Record an input tensor (image, parameter, constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(Op::Leaf, Tensor::scalar(value))
    }

    /// 2-D convolution with zero padding. Input `[Cin,H,W]`, weight
    /// `[Cout,Cin,kh,kw]`, bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || b.shape() != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = match (
            conv_out_dim(h, pad, kh, stride),
            conv_out_dim(wdt, pad, kw, stride),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: xs,
                    rhs: ws,
                })
            }
        };
        let xv = x.data();
        let wv = w.data();
        let bv = b.data();
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bv[o];
                    for c in 0..cin {
                        for a in 0..kh {
                            let y = (i * stride + a) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for bx in 0..kw {
                                let xcol = (j * stride + bx) as isize - pad as isize;
                                if xcol < 0 || xcol >= wdt as isize {
                                    continue;
                                }
                                acc += wv[((o * cin + c) * kh + a) * kw + bx]
                                    * xv[(c * h + y as usize) * wdt + xcol as usize];
                            }
                        }
                    }
                    out[(o * ho + i) * wo + j] = acc;
                }
            }
        }
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            value,
        ))
    }

    /// Affine map: input `[n]`, weight `[m,n]`, bias `[m]` -> `[m]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || b.shape() != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: xs,
                rhs: ws,
            });
        }
        let (m, n) = (ws[0], ws[1]);
        let xv = x.data();
        let wv = w.data();
        let mut out = b.data().to_vec();
        for r in 0..m {
            let row = &wv[r * n..(r + 1) * n];
            let mut acc = 0.0;
            for c in 0..n {
                acc += row[c] * xv[c];
            }
            out[r] += acc;
        }
        let value = Tensor::new(vec![m], out)?;
        Ok(self.push(Op::Dense { input, weight, bias }, value))
    }

    /// ReLU; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push(Op::Relu { input }, value)
    }

    /// Non-overlapping max pooling over square windows. Input `[C,H,W]`
    /// with H and W divisible by `window`.
    pub fn max_pool2d(&mut self, input: NodeId, window: usize) -> Result<NodeId> {
        let x = self.value(input);
        let xs = x.shape().to_vec();
        if xs.len() != 3 || window == 0 || xs[1] % window != 0 || xs[2] % window != 0 {
            return Err(Error::ShapeMismatch {
                op: "max_pool2d",
                lhs: xs,
                rhs: vec![window],
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (h / window, w / window);
        let xv = x.data();
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_off = 0usize;
                    for a in 0..window {
                        for b in 0..window {
                            let off = (ch * h + i * window + a) * w + j * window + b;
                            if xv[off] > best {
                                best = xv[off];
                                best_off = off;
                            }
                        }
                    }
                    let oo = (ch * ho + i) * wo + j;
                    out[oo] = best;
                    argmax[oo] = best_off;
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(Op::MaxPool2d { input, argmax }, value))
    }

    /// Spatial mean per channel. Input `[C,H,W]` -> `[C]`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let xs = x.shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "global_avg_pool",
                lhs: xs,
                rhs: vec![],
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let z = (h * w) as f64;
        let xv = x.data();
        let out: Vec<f64> = (0..c)
            .map(|ch| xv[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / z)
            .collect();
        let value = Tensor::new(vec![c], out)?;
        Ok(self.push(Op::GlobalAvgPool { input }, value))
    }

    /// Max-shifted softmax over a 1-D vector.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape().len() != 1 || x.numel() == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let m = x.max();
        let exps: Vec<f64> = x.data().iter().map(|&v| (v - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        let value = Tensor::new(
            x.shape().to_vec(),
            exps.into_iter().map(|e| e / total).collect(),
        )?;
        Ok(self.push(Op::Softmax { input }, value))
    }

    /// Elementwise exp. May overflow to infinity for very large inputs.
    pub fn exp(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(f64::exp);
        self.push(Op::Exp { input }, value)
    }

    /// Elementwise natural log. Requires positive inputs.
    pub fn log(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(f64::ln);
        self.push(Op::Log { input }, value)
    }

    /// Elementwise reciprocal. Requires nonzero inputs.
    pub fn recip(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| 1.0 / v);
        self.push(Op::Recip { input }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub { a, b }, value))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = self.value(input).scale(factor);
        self.push(Op::Scale { input, factor }, value)
    }

    pub fn elementwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::ElemMul { a, b }, value))
    }

    /// Sum away the given axes (no kept dims). Summing all axes yields a
    /// rank-0 scalar.
    pub fn sum_over(&mut self, input: NodeId, axes: &[usize]) -> Result<NodeId> {
        let x = self.value(input);
        let xs = x.shape().to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= xs.len()) {
            return Err(Error::ShapeMismatch {
                op: "sum_over",
                lhs: xs,
                rhs: axes,
            });
        }
        let out_shape: Vec<usize> = xs
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            for (flat, &v) in x.data().iter().enumerate() {
                od[reduce_offset(flat, &xs, &axes)] += v;
            }
        }
        Ok(self.push(Op::SumOver { input, axes }, out))
    }

    /// Sum every element to a rank-0 scalar.
    pub fn sum_all(&mut self, input: NodeId) -> Result<NodeId> {
        let rank = self.value(input).shape().len();
        let axes: Vec<usize> = (0..rank).collect();
        self.sum_over(input, &axes)
    }

    /// Max along one axis. Ties resolve to the lowest index.
    pub fn max_over(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let x = self.value(input);
        let xs = x.shape().to_vec();
        if axis >= xs.len() || xs[axis] == 0 {
            return Err(Error::ShapeMismatch {
                op: "max_over",
                lhs: xs,
                rhs: vec![axis],
            });
        }
        let out_shape: Vec<usize> = xs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != axis)
            .map(|(_, &d)| d)
            .collect();
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let n = xs[axis];
        let xv = x.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let oo = o * inner + i;
                for k in 0..n {
                    let v = xv[(o * n + k) * inner + i];
                    if v > out[oo] {
                        out[oo] = v;
                        argmax[oo] = k;
                    }
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            Op::MaxOver {
                input,
                axis,
                argmax,
            },
            value,
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(input).reshaped(shape)?;
        Ok(self.push(Op::Reshape { input }, value))
    }

    /// Select rows along axis 0. Output shape `[indices.len(), rest...]`.
    pub fn gather(&mut self, input: NodeId, indices: &[usize]) -> Result<NodeId> {
        let x = self.value(input);
        let xs = x.shape().to_vec();
        if xs.is_empty() || indices.iter().any(|&i| i >= xs[0]) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: xs,
                rhs: indices.to_vec(),
            });
        }
        let row: usize = xs[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = vec![indices.len()];
        out_shape.extend_from_slice(&xs[1..]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            Op::Gather {
                input,
                indices: indices.to_vec(),
            },
            value,
        ))
    }

    /// `a - s` with `s` broadcast (one-element node).
    pub fn sub_bcast(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "sub_bcast",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).item();
        let value = self.value(a).map(|v| v - sv);
        Ok(self.push(Op::SubBcast { a, s }, value))
    }

    /// `a * s` with `s` broadcast (one-element node).
    pub fn mul_bcast(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "mul_bcast",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).item();
        let value = self.value(a).map(|v| v * sv);
        Ok(self.push(Op::MulBcast { a, s }, value))
    }

    /// Weighted channel sum: stack `[K,u,v]`, weights `[K]` -> `[u,v]`.
    pub fn channel_combine(&mut self, stack: NodeId, weights: NodeId) -> Result<NodeId> {
        let a = self.value(stack);
        let w = self.value(weights);
        let (as_, ws) = (a.shape().to_vec(), w.shape().to_vec());
        if as_.len() != 3 || ws.len() != 1 || ws[0] != as_[0] {
            return Err(Error::ShapeMismatch {
                op: "channel_combine",
                lhs: as_,
                rhs: ws,
            });
        }
        let (k, u, v) = (as_[0], as_[1], as_[2]);
        let av = a.data();
        let wv = w.data();
        let mut out = vec![0.0; u * v];
        for ch in 0..k {
            let plane = &av[ch * u * v..(ch + 1) * u * v];
            let wk = wv[ch];
            for (o, &p) in out.iter_mut().zip(plane) {
                *o += wk * p;
            }
        }
        let value = Tensor::new(vec![u, v], out)?;
        Ok(self.push(Op::ChannelCombine { stack, weights }, value))
    }

    /// Reverse sweep from a one-element target node. The seed gradient is 1.
    pub fn backward(&self, target: NodeId) -> Result<GradientBundle> {
        let tval = self.value(target);
        if !tval.is_scalar() {
            return Err(Error::Numeric(format!(
                "backward target must be scalar-shaped, got {:?}",
                tval.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[target.0] = Some(Tensor::new(tval.shape().to_vec(), vec![1.0])?);

        for idx in (0..=target.0).rev() {
            let g = match grads[idx].clone() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(idx, &g, &mut grads);
        }
        Ok(GradientBundle {
            target,
            grads,
        })
    }

    fn backward_op(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| match &mut grads[id.0] {
            Some(t) => t.accumulate(&delta),
            slot @ None => *slot = Some(delta),
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (xs, ws) = (x.shape(), w.shape());
                let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = self.nodes[idx].value.shape();
                let (ho, wo) = (os[1], os[2]);
                let (s, p) = (*stride, *pad);
                let gv = g.data();
                let xv = x.data();
                let wv = w.data();
                let mut dx = Tensor::zeros(xs);
                let mut dw = Tensor::zeros(ws);
                let mut db = Tensor::zeros(&[cout]);
                {
                    let dxv = dx.data_mut();
                    for o in 0..cout {
                        for i in 0..ho {
                            for j in 0..wo {
                                let gout = gv[(o * ho + i) * wo + j];
                                if gout == 0.0 {
                                    continue;
                                }
                                db.data_mut()[o] += gout;
                                for c in 0..cin {
                                    for a in 0..kh {
                                        let y = (i * s + a) as isize - p as isize;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        for bx in 0..kw {
                                            let xc = (j * s + bx) as isize - p as isize;
                                            if xc < 0 || xc >= wdt as isize {
                                                continue;
                                            }
                                            let woff = ((o * cin + c) * kh + a) * kw + bx;
                                            let xoff = (c * h + y as usize) * wdt + xc as usize;
                                            dw.data_mut()[woff] += gout * xv[xoff];
                                            dxv[xoff] += gout * wv[woff];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *input, dx);
                acc(grads, *weight, dw);
                acc(grads, *bias, db);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (m, n) = (w.shape()[0], w.shape()[1]);
                let gv = g.data();
                let xv = x.data();
                let wv = w.data();
                let mut dx = vec![0.0; n];
                let mut dw = vec![0.0; m * n];
                for r in 0..m {
                    let gr = gv[r];
                    if gr == 0.0 {
                        continue;
                    }
                    for c in 0..n {
                        dx[c] += gr * wv[r * n + c];
                        dw[r * n + c] += gr * xv[c];
                    }
                }
                acc(grads, *input, Tensor::new(vec![n], dx).unwrap());
                acc(grads, *weight, Tensor::new(vec![m, n], dw).unwrap());
                acc(grads, *bias, g.clone());
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let dx = Tensor::new(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                acc(grads, *input, dx);
            }
            Op::MaxPool2d { input, argmax, .. } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                for (oo, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[oo];
                }
                acc(grads, *input, dx);
            }
            Op::GlobalAvgPool { input } => {
                let xs = self.value(*input).shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let z = (h * w) as f64;
                let mut dx = Tensor::zeros(&xs);
                for ch in 0..c {
                    let gch = g.data()[ch] / z;
                    for off in ch * h * w..(ch + 1) * h * w {
                        dx.data_mut()[off] = gch;
                    }
                }
                acc(grads, *input, dx);
            }
            Op::Softmax { input } => {
                let y = &self.nodes[idx].value;
                let dot: f64 = y.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                let dx = Tensor::new(
                    y.shape().to_vec(),
                    y.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&yi, &gi)| yi * (gi - dot))
                        .collect(),
                )
                .unwrap();
                acc(grads, *input, dx);
            }
            Op::Exp { input } => {
                let y = &self.nodes[idx].value;
                acc(grads, *input, y.mul(g).unwrap());
            }
            Op::Log { input } => {
                let x = self.value(*input);
                let dx = x
                    .zip(g, "log_backward", |xi, gi| gi / xi)
                    .unwrap();
                acc(grads, *input, dx);
            }
            Op::Recip { input } => {
                let y = &self.nodes[idx].value;
                let dx = y
                    .zip(g, "recip_backward", |yi, gi| -gi * yi * yi)
                    .unwrap();
                acc(grads, *input, dx);
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::Scale { input, factor } => {
                acc(grads, *input, g.scale(*factor));
            }
            Op::ElemMul { a, b } => {
                acc(grads, *a, self.value(*b).mul(g).unwrap());
                acc(grads, *b, self.value(*a).mul(g).unwrap());
            }
            Op::SumOver { input, axes } => {
                let xs = self.value(*input).shape().to_vec();
                let mut dx = Tensor::zeros(&xs);
                {
                    let dxv = dx.data_mut();
                    for (flat, slot) in dxv.iter_mut().enumerate() {
                        *slot = g.data()[reduce_offset(flat, &xs, axes)];
                    }
                }
                acc(grads, *input, dx);
            }
            Op::MaxOver {
                input,
                axis,
                argmax,
            } => {
                let xs = self.value(*input).shape().to_vec();
                let inner: usize = xs[*axis + 1..].iter().product();
                let n = xs[*axis];
                let mut dx = Tensor::zeros(&xs);
                for (oo, &k) in argmax.iter().enumerate() {
                    let (o, i) = (oo / inner, oo % inner);
                    dx.data_mut()[(o * n + k) * inner + i] += g.data()[oo];
                }
                acc(grads, *input, dx);
            }
            Op::Reshape { input } => {
                let xs = self.value(*input).shape().to_vec();
                acc(grads, *input, g.reshaped(xs).unwrap());
            }
            Op::Gather { input, indices } => {
                let xs = self.value(*input).shape().to_vec();
                let row: usize = xs[1..].iter().product();
                let mut dx = Tensor::zeros(&xs);
                for (slot, &i) in indices.iter().enumerate() {
                    for r in 0..row {
                        dx.data_mut()[i * row + r] += g.data()[slot * row + r];
                    }
                }
                acc(grads, *input, dx);
            }
            Op::SubBcast { a, s } => {
                acc(grads, *a, g.clone());
                let shape = self.value(*s).shape().to_vec();
                acc(grads, *s, Tensor::new(shape, vec![-g.sum()]).unwrap());
            }
            Op::MulBcast { a, s } => {
                let sv = self.value(*s).item();
                acc(grads, *a, g.scale(sv));
                let dot: f64 = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gi)| x * gi)
                    .sum();
                let shape = self.value(*s).shape().to_vec();
                acc(grads, *s, Tensor::new(shape, vec![dot]).unwrap());
            }
            Op::ChannelCombine { stack, weights } => {
                let a = self.value(*stack);
                let w = self.value(*weights);
                let (k, u, v) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let mut da = Tensor::zeros(a.shape());
                let mut dw = vec![0.0; k];
                for ch in 0..k {
                    let wk = w.data()[ch];
                    let plane = &a.data()[ch * u * v..(ch + 1) * u * v];
                    let dplane = &mut da.data_mut()[ch * u * v..(ch + 1) * u * v];
                    let mut dot = 0.0;
                    for i in 0..u * v {
                        dplane[i] = wk * g.data()[i];
                        dot += plane[i] * g.data()[i];
                    }
                    dw[ch] = dot;
                }
                acc(grads, *stack, da);
                acc(grads, *weights, Tensor::new(vec![k], dw).unwrap());
            }
        }
    }
}

/// Offset into the reduced tensor for a flat offset of the full tensor.
fn reduce_offset(flat: usize, shape: &[usize], axes: &[usize]) -> usize {
    let mut rem = flat;
    let mut idx = vec![0usize; shape.len()];
    for i in (0..shape.len()).rev() {
        idx[i] = rem % shape[i];
        rem /= shape[i];
    }
    let mut off = 0;
    for i in 0..shape.len() {
        if !axes.contains(&i) {
            off = off * shape[i] + idx[i];
        }
    }
    off
}

/// Result of comparing reverse-mode gradients with central finite differences.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// Coordinates skipped because the two one-sided slopes disagree
    /// (the point sits on a kink such as ReLU at exactly 0).
    pub skipped: Vec<usize>,
    pub checked: usize,
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `point`.
///
/// `build` records the function on a fresh tape given the input leaf. The
/// relative error denominator is `max(|ad|, |fd|, 1e-12)`.
pub fn finite_diff_check<F>(build: F, point: &Tensor, step: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    assert!(step > 0.0, "finite_diff_check requires step > 0");
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p.clone());
        let t = build(&mut tape, x)?;
        Ok(tape.value(t).item())
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let target = build(&mut tape, x)?;
    if !tape.value(target).is_scalar() {
        return Err(Error::Numeric(
            "finite_diff_check target must be scalar-shaped".into(),
        ));
    }
    let bundle = tape.backward(target)?;
    let zero = Tensor::zeros(point.shape());
    let ad = bundle.grad(x).unwrap_or(&zero);

    let f0 = eval(point)?;
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst_index: None,
        skipped: Vec::new(),
        checked: 0,
    };
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fp = eval(&plus)?;
        let fm = eval(&minus)?;
        let slope_p = (fp - f0) / step;
        let slope_m = (f0 - fm) / step;
        let mismatch = (slope_p - slope_m).abs();
        if mismatch > 1e-3 && mismatch > 0.25 * slope_p.abs().max(slope_m.abs()) {
            report.skipped.push(i);
            continue;
        }
        let central = (fp - fm) / (2.0 * step);
        let a = ad.data()[i];
        let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-12);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
        report.checked += 1;
    }
    Ok(report)
}
