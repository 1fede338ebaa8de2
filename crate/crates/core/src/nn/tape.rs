//! Reverse-mode differentiation over a linear tape of layer-level ops.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. [`Tape::backward`] walks the tape in reverse from
//! a scalar node and accumulates gradients for every node that reaches it.

use crate::error::{Error, Result};
use crate::nn::loss;
use crate::nn::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    filters: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
        /// im2col matrix, `patch × (batch · positions)`.
        cols: Vec<f64>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        /// Flat input index chosen for each output element.
        argmax: Vec<usize>,
    },
    AvgPool {
        x: NodeId,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Reshape {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    UncertLoss {
        mu: NodeId,
        logsigma: NodeId,
        target: Vec<f64>,
    },
    RmseLoss {
        mu: NodeId,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn mismatch(expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// 2-D convolution. `x: [B, C, H, W]`, `w: [F, C, k, k]`, `b: [F]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(mismatch(
                &[xs.first().copied().unwrap_or(0), ws[1], 0, 0],
                &xs,
            ));
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(mismatch(&[ws[0]], self.value(b).shape()));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k || stride == 0 {
            return Err(mismatch(&[xs[0], xs[1], k, k], &xs));
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            filters: ws[0],
            k,
            stride,
            pad,
            h_out: (xs[2] + 2 * pad - k) / stride + 1,
            w_out: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let p = geom.positions();
        let n = geom.batch * p;
        let mut y = vec![0.0; geom.filters * n];
        gemm(
            geom.filters,
            geom.patch(),
            n,
            self.value(w).data(),
            false,
            &cols,
            false,
            0.0,
            &mut y,
        );
        let bias = self.value(b).data();
        let mut out = vec![0.0; n * geom.filters];
        for f in 0..geom.filters {
            for bi in 0..geom.batch {
                let src = &y[f * n + bi * p..f * n + (bi + 1) * p];
                let dst = &mut out[(bi * geom.filters + f) * p..(bi * geom.filters + f + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[f];
                }
            }
        }
        let value = Tensor::new(vec![geom.batch, geom.filters, geom.h_out, geom.w_out], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// Affine map. `x: [B, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(mismatch(&[xs.first().copied().unwrap_or(0), ws[1]], &xs));
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(mismatch(&[ws[0]], self.value(b).shape()));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; batch * out];
        let bias = self.value(b).data();
        for row in y.chunks_mut(out) {
            row.copy_from_slice(bias);
        }
        gemm(
            batch,
            inp,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut y,
        );
        let value = Tensor::new(vec![batch, out], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x })
    }

    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let (geom, xs) = self.pool_geom(x, k, stride, pad)?;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(geom.batch * geom.c_in * geom.positions());
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..geom.batch * geom.c_in {
            let base = plane * geom.h * geom.w;
            for oy in 0..geom.h_out {
                for ox in 0..geom.w_out {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..k {
                        let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&v| v < geom.h)
                        else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) =
                                (ox * stride + kx).checked_sub(pad).filter(|&v| v < geom.w)
                            else {
                                continue;
                            };
                            let idx = base + iy * geom.w + ix;
                            if data[idx] > best || best_idx == usize::MAX {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], geom.h_out, geom.w_out], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// Average pooling; padded cells count toward the divisor.
    pub fn avg_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let (geom, xs) = self.pool_geom(x, k, stride, pad)?;
        let data = self.value(x).data();
        let norm = 1.0 / (k * k) as f64;
        let mut out = Vec::with_capacity(geom.batch * geom.c_in * geom.positions());
        for plane in 0..geom.batch * geom.c_in {
            let base = plane * geom.h * geom.w;
            for oy in 0..geom.h_out {
                for ox in 0..geom.w_out {
                    let mut acc = 0.0;
                    for_window(&geom, oy, ox, |iy, ix| acc += data[base + iy * geom.w + ix]);
                    out.push(acc * norm);
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], geom.h_out, geom.w_out], out)?;
        Ok(self.push(value, Op::AvgPool { x, k, stride, pad }))
    }

    fn pool_geom(
        &self,
        x: NodeId,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<(ConvGeom, Vec<usize>)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] + 2 * pad < k || xs[3] + 2 * pad < k || stride == 0 || k == 0 {
            return Err(mismatch(&[0, 0, k, k], &xs));
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            filters: xs[1],
            k,
            stride,
            pad,
            h_out: (xs[2] + 2 * pad - k) / stride + 1,
            w_out: (xs[3] + 2 * pad - k) / stride + 1,
        };
        Ok((geom, xs))
    }

    /// `[B, ...] -> [B, prod(...)]`
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let batch = v.shape()[0];
        let features = v.len() / batch.max(1);
        let value = v.clone().reshape(&[batch, features]).expect("same size");
        self.push(value, Op::Reshape { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(self.value(a).shape(), self.value(b).shape()));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Elementwise clamp. Outside `[lo, hi]` the gradient is kept only when
    /// a descent step would move the input back towards the interval, so a
    /// saturated value can recover.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { x, lo, hi })
    }

    /// Variance-attenuation loss, see [`loss::uncert_loss`].
    pub fn uncert_loss(&mut self, mu: NodeId, logsigma: NodeId, target: &Tensor) -> Result<NodeId> {
        let v = loss::uncert_loss(self.value(mu), self.value(logsigma), target)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::UncertLoss {
                mu,
                logsigma,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Root-mean-square error, see [`loss::squared_error_loss`].
    pub fn rmse_loss(&mut self, mu: NodeId, target: &Tensor) -> Result<NodeId> {
        let v = loss::squared_error_loss(self.value(mu), target)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::RmseLoss {
                mu,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: NodeId) -> Gradients {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.node_backward(node, &g);
            grads[idx] = Some(g);
            for (parent, grad) in contributions {
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Gradients { grads }
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let p = geom.positions();
                let n = geom.batch * p;
                // [B, F, P] -> [F, B·P]
                let mut dy = vec![0.0; geom.filters * n];
                let gd = g.data();
                for bi in 0..geom.batch {
                    for f in 0..geom.filters {
                        let src = &gd[(bi * geom.filters + f) * p..(bi * geom.filters + f + 1) * p];
                        dy[f * n + bi * p..f * n + (bi + 1) * p].copy_from_slice(src);
                    }
                }
                let mut dw = vec![0.0; geom.filters * geom.patch()];
                gemm(
                    geom.filters,
                    n,
                    geom.patch(),
                    &dy,
                    false,
                    cols,
                    true,
                    0.0,
                    &mut dw,
                );
                let db: Vec<f64> = dy.chunks(n).map(|row| row.iter().sum()).collect();
                let mut dcols = vec![0.0; geom.patch() * n];
                gemm(
                    geom.patch(),
                    geom.filters,
                    n,
                    self.value(*w).data(),
                    true,
                    &dy,
                    false,
                    0.0,
                    &mut dcols,
                );
                let dx = col2im(&dcols, geom);
                vec![
                    (
                        *x,
                        Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                    ),
                    (
                        *w,
                        Tensor::new(self.value(*w).shape().to_vec(), dw).unwrap(),
                    ),
                    (*b, Tensor::new(vec![geom.filters], db).unwrap()),
                ]
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (batch, inp) = (xs[0], xs[1]);
                let out = self.value(*w).shape()[0];
                let mut dx = vec![0.0; batch * inp];
                gemm(
                    batch,
                    out,
                    inp,
                    g.data(),
                    false,
                    self.value(*w).data(),
                    false,
                    0.0,
                    &mut dx,
                );
                let mut dw = vec![0.0; out * inp];
                gemm(
                    out,
                    batch,
                    inp,
                    g.data(),
                    true,
                    self.value(*x).data(),
                    false,
                    0.0,
                    &mut dw,
                );
                let mut db = vec![0.0; out];
                for row in g.data().chunks(out) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![
                    (*x, Tensor::new(vec![batch, inp], dx).unwrap()),
                    (*w, Tensor::new(vec![out, inp], dw).unwrap()),
                    (*b, Tensor::new(vec![out], db).unwrap()),
                ]
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![(*x, dx)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let dd = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dd[src] += gv;
                }
                vec![(*x, dx)]
            }
            Op::AvgPool { x, k, stride, pad } => {
                let xs = self.value(*x).shape();
                let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let os = node.value.shape();
                let geom = ConvGeom {
                    batch,
                    c_in: c,
                    h,
                    w,
                    filters: c,
                    k: *k,
                    stride: *stride,
                    pad: *pad,
                    h_out: os[2],
                    w_out: os[3],
                };
                let norm = 1.0 / (k * k) as f64;
                let mut dx = Tensor::zeros(xs);
                let dd = dx.data_mut();
                let gd = g.data();
                let mut o = 0;
                for plane in 0..batch * c {
                    let base = plane * h * w;
                    for oy in 0..geom.h_out {
                        for ox in 0..geom.w_out {
                            let gv = gd[o] * norm;
                            for_window(&geom, oy, ox, |iy, ix| dd[base + iy * w + ix] += gv);
                            o += 1;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape { x } => {
                let dx = g.clone().reshape(self.value(*x).shape()).unwrap();
                vec![(*x, dx)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if (v < *lo && *d > 0.0) || (v > *hi && *d < 0.0) {
                        *d = 0.0;
                    }
                }
                vec![(*x, dx)]
            }
            Op::UncertLoss {
                mu,
                logsigma,
                target,
            } => {
                let scale = g.item() / target.len() as f64;
                let muv = self.value(*mu);
                let lsv = self.value(*logsigma);
                let mut dmu = Tensor::zeros(muv.shape());
                let mut dls = Tensor::zeros(lsv.shape());
                for i in 0..target.len() {
                    let r = target[i] - muv.data()[i];
                    let inv_var = (-2.0 * lsv.data()[i]).exp();
                    dmu.data_mut()[i] = -2.0 * r * inv_var * scale;
                    dls.data_mut()[i] = (2.0 - 2.0 * r * r * inv_var) * scale;
                }
                vec![(*mu, dmu), (*logsigma, dls)]
            }
            Op::RmseLoss { mu, target } => {
                let loss = node.value.item();
                let muv = self.value(*mu);
                let mut dmu = Tensor::zeros(muv.shape());
                if loss > 0.0 {
                    let scale = g.item() / (target.len() as f64 * loss);
                    for (i, d) in dmu.data_mut().iter_mut().enumerate() {
                        *d = -(target[i] - muv.data()[i]) * scale;
                    }
                }
                vec![(*mu, dmu)]
            }
        }
    }
}

fn for_window(geom: &ConvGeom, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
    for ky in 0..geom.k {
        let Some(iy) = (oy * geom.stride + ky)
            .checked_sub(geom.pad)
            .filter(|&v| v < geom.h)
        else {
            continue;
        };
        for kx in 0..geom.k {
            let Some(ix) = (ox * geom.stride + kx)
                .checked_sub(geom.pad)
                .filter(|&v| v < geom.w)
            else {
                continue;
            };
            f(iy, ix);
        }
    }
}

/// `[B, C, H, W] -> [C·k·k, B·H_out·W_out]`
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let n = g.batch * p;
    let mut cols = vec![0.0; g.patch() * n];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let plane = &x[(b * g.c_in + c) * g.h * g.w..(b * g.c_in + c + 1) * g.h * g.w];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut dst_row[b * p + oy * g.w_out..b * p + (oy + 1) * g.w_out];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.positions();
    let n = g.batch * p;
    let mut x = vec![0.0; g.batch * g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let base = (b * g.c_in + c) * g.h * g.w;
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[b * p + oy * g.w_out..b * p + (oy + 1) * g.w_out];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[base + iy as usize * g.w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
