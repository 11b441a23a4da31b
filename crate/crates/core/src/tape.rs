//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive ops in topological order as they execute.
//! [`Tape::backward`] walks the record once in reverse and materializes
//! gradients for every watched tensor. One mechanism serves both the
//! per-layer attention gradients and the input-pixel gradients.

use crate::error::{Error, Result};
use crate::tensor::{matmul2, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Neg(TensorId),
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    SoftmaxLastDim(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    Gelu(TensorId),
    /// Add a length-`last_dim` vector to every row.
    AddRowBroadcast(TensorId, TensorId),
    ConcatRows(TensorId, TensorId),
    ConcatCols(TensorId, TensorId),
    SliceRows {
        x: TensorId,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    SumAll(TensorId),
    /// Pick one element by flat index; output shape [1].
    PickScalar {
        x: TensorId,
        index: usize,
    },
    /// Scalar division a / b (both numel 1).
    DivScalar(TensorId, TensorId),
    /// H×W×C image to (T-1)×(patch*patch*C) token matrix, row-major
    /// patch grid, HWC order within each patch.
    Patchify {
        image: TensorId,
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    watched: Vec<TensorId>,
}

/// Gradients of one scalar loss with respect to the watched tensors.
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
    shapes: HashMap<usize, Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. a watched tensor. A loss that never touches the
    /// tensor yields an exactly-zero gradient of the right shape.
    pub fn wrt(&self, id: TensorId) -> Tensor {
        match self.grads.get(&id.0) {
            Some(g) => g.clone(),
            None => Tensor::zeros(
                self.shapes
                    .get(&id.0)
                    .cloned()
                    .expect("gradient requested for unwatched tensor"),
            ),
        }
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let phi = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi + x * pdf
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Mark a tensor so backward() materializes its gradient.
    pub fn watch(&mut self, id: TensorId) {
        if !self.watched.contains(&id) {
            self.watched.push(id);
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> TensorId {
        debug_assert!(value.all_finite(), "non-finite value from {:?}", op);
        self.nodes.push(Node { op, value });
        TensorId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> TensorId {
        self.push(Op::Input, t)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.value(a).check_same_shape(self.value(b), "add")?;
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x + y)
                .collect(),
        );
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.value(a).check_same_shape(self.value(b), "sub")?;
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x - y)
                .collect(),
        );
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.value(a).check_same_shape(self.value(b), "mul")?;
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x * y)
                .collect(),
        );
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a).data.iter().map(|x| x * c).collect(),
        );
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a).data.iter().map(|x| -x).collect(),
        );
        self.push(Op::Neg(a), v)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = matmul2(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let t = self.value(a);
        debug_assert_eq!(t.shape.len(), 2);
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data[i * n + j];
            }
        }
        self.push(Op::Transpose(a), Tensor::new(vec![n, m], data))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: TensorId) -> TensorId {
        let x = self.value(a);
        let d = x.last_dim();
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data.chunks(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        let v = Tensor::new(x.shape.clone(), data);
        self.push(Op::SoftmaxLastDim(a), v)
    }

    /// Per-last-dim standardization followed by affine gamma/beta.
    pub fn layernorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.numel() != d || b.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: xv.shape.clone(),
                rhs: g.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (i, v) in row.iter().enumerate() {
                data.push((v - mean) * inv * g.data[i] + b.data[i]);
            }
        }
        let v = Tensor::new(xv.shape.clone(), data);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, v))
    }

    /// Exact erf-form GELU.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a).data.iter().map(|&x| gelu_scalar(x)).collect(),
        );
        self.push(Op::Gelu(a), v)
    }

    pub fn add_row_broadcast(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = xv.last_dim();
        if bv.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: xv.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data.chunks(d) {
            for (i, v) in row.iter().enumerate() {
                data.push(v + bv.data[i]);
            }
        }
        let v = Tensor::new(xv.shape.clone(), data);
        Ok(self.push(Op::AddRowBroadcast(x, bias), v))
    }

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let v = Tensor::new(vec![av.shape[0] + bv.shape[0], av.shape[1]], data);
        Ok(self.push(Op::ConcatRows(a, b), v))
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[0] != bv.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (m, n1, n2) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            data.extend_from_slice(&av.data[i * n1..(i + 1) * n1]);
            data.extend_from_slice(&bv.data[i * n2..(i + 1) * n2]);
        }
        let v = Tensor::new(vec![m, n1 + n2], data);
        Ok(self.push(Op::ConcatCols(a, b), v))
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let xv = self.value(x);
        debug_assert_eq!(xv.shape.len(), 2);
        let n = xv.shape[1];
        let data = xv.data[start * n..(start + len) * n].to_vec();
        let v = Tensor::new(vec![len, n], data);
        self.push(Op::SliceRows { x, start, len }, v)
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let xv = self.value(x);
        debug_assert_eq!(xv.shape.len(), 2);
        let (m, n) = (xv.shape[0], xv.shape[1]);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.data[i * n + start..i * n + start + len]);
        }
        let v = Tensor::new(vec![m, len], data);
        self.push(Op::SliceCols { x, start, len }, v)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s = self.value(x).data.iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn pick_scalar(&mut self, x: TensorId, index: usize) -> TensorId {
        let v = self.value(x).data[index];
        self.push(Op::PickScalar { x, index }, Tensor::scalar(v))
    }

    pub fn div_scalar(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if !self.value(a).is_scalar() || !self.value(b).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "div_scalar",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let v = Tensor::scalar(self.value(a).data[0] / self.value(b).data[0]);
        Ok(self.push(Op::DivScalar(a, b), v))
    }

    pub fn patchify(
        &mut self,
        image: TensorId,
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
    ) -> Result<TensorId> {
        let img = self.value(image);
        if img.shape != vec![height, width, channels] {
            return Err(Error::ShapeMismatch {
                op: "patchify",
                lhs: img.shape.clone(),
                rhs: vec![height, width, channels],
            });
        }
        let grid_h = height / patch;
        let grid_w = width / patch;
        let patch_dim = patch * patch * channels;
        let mut data = Vec::with_capacity(grid_h * grid_w * patch_dim);
        for gr in 0..grid_h {
            for gc in 0..grid_w {
                for py in 0..patch {
                    for px in 0..patch {
                        let y = gr * patch + py;
                        let x = gc * patch + px;
                        let base = (y * width + x) * channels;
                        data.extend_from_slice(&img.data[base..base + channels]);
                    }
                }
            }
        }
        let v = Tensor::new(vec![grid_h * grid_w, patch_dim], data);
        Ok(self.push(
            Op::Patchify {
                image,
                height,
                width,
                channels,
                patch,
            },
            v,
        ))
    }

    /// Reverse sweep from a scalar loss. Visits every node exactly once.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NotOnTape(loss.0));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::LossNotScalar(lv.shape.clone()));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape.clone(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            // keep the gradient if this node is watched
            if self.watched.iter().any(|w| w.0 == idx) {
                grads[idx] = Some(g);
            }
        }

        let mut out = HashMap::new();
        let mut shapes = HashMap::new();
        for w in &self.watched {
            shapes.insert(w.0, self.nodes[w.0].value.shape.clone());
            if let Some(g) = grads[w.0].take() {
                out.insert(w.0, g);
            }
        }
        Ok(Gradients {
            grads: out,
            shapes,
        })
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], id: TensorId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, d) in acc.data.iter_mut().zip(delta.data) {
                        *a += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(
                    grads,
                    *b,
                    Tensor::new(g.shape.clone(), g.data.iter().map(|v| -v).collect()),
                );
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                add_to(
                    grads,
                    *a,
                    Tensor::new(
                        g.shape.clone(),
                        g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
                    ),
                );
                add_to(
                    grads,
                    *b,
                    Tensor::new(
                        g.shape.clone(),
                        g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect(),
                    ),
                );
            }
            Op::Scale(a, c) => {
                add_to(
                    grads,
                    *a,
                    Tensor::new(g.shape.clone(), g.data.iter().map(|v| v * c).collect()),
                );
            }
            Op::Neg(a) => {
                add_to(
                    grads,
                    *a,
                    Tensor::new(g.shape.clone(), g.data.iter().map(|v| -v).collect()),
                );
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                // dA = g · Bᵀ ; dB = Aᵀ · g
                let bt = transpose_plain(bv);
                let at = transpose_plain(av);
                add_to(grads, *a, matmul2(g, &bt).expect("backward matmul dA"));
                add_to(grads, *b, matmul2(&at, g).expect("backward matmul dB"));
            }
            Op::Transpose(a) => {
                add_to(grads, *a, transpose_plain(g));
            }
            Op::SoftmaxLastDim(a) => {
                let y = &self.nodes[idx].value;
                let d = y.last_dim();
                let mut dx = Vec::with_capacity(y.numel());
                for (yrow, grow) in y.data.chunks(d).zip(g.data.chunks(d)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for (yv, gv) in yrow.iter().zip(grow) {
                        dx.push(yv * (gv - dot));
                    }
                }
                add_to(grads, *a, Tensor::new(y.shape.clone(), dx));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let d = xv.last_dim();
                let df = d as f64;
                let mut dx = Vec::with_capacity(xv.numel());
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (xrow, grow) in xv.data.chunks(d).zip(g.data.chunks(d)) {
                    let mean = xrow.iter().sum::<f64>() / df;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        grow.iter().zip(&gv.data).map(|(g, gm)| g * gm).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / df;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / df;
                    for i in 0..d {
                        dx.push(inv * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat));
                        dgamma[i] += grow[i] * xhat[i];
                        dbeta[i] += grow[i];
                    }
                }
                add_to(grads, *x, Tensor::new(xv.shape.clone(), dx));
                add_to(grads, *gamma, Tensor::new(gv.shape.clone(), dgamma));
                add_to(
                    grads,
                    *beta,
                    Tensor::new(self.nodes[beta.0].value.shape.clone(), dbeta),
                );
            }
            Op::Gelu(a) => {
                let xv = &self.nodes[a.0].value;
                let dx: Vec<f64> = xv
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&x, &gv)| gv * gelu_grad_scalar(x))
                    .collect();
                add_to(grads, *a, Tensor::new(xv.shape.clone(), dx));
            }
            Op::AddRowBroadcast(x, bias) => {
                let bv = &self.nodes[bias.0].value;
                let d = bv.numel();
                let mut db = vec![0.0; d];
                for grow in g.data.chunks(d) {
                    for i in 0..d {
                        db[i] += grow[i];
                    }
                }
                add_to(grads, *x, g.clone());
                add_to(grads, *bias, Tensor::new(bv.shape.clone(), db));
            }
            Op::ConcatRows(a, b) => {
                let av = &self.nodes[a.0].value;
                let (ra, n) = (av.shape[0], av.shape[1]);
                add_to(
                    grads,
                    *a,
                    Tensor::new(av.shape.clone(), g.data[..ra * n].to_vec()),
                );
                let bv = &self.nodes[b.0].value;
                add_to(
                    grads,
                    *b,
                    Tensor::new(bv.shape.clone(), g.data[ra * n..].to_vec()),
                );
            }
            Op::ConcatCols(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, n1, n2) = (av.shape[0], av.shape[1], bv.shape[1]);
                let n = n1 + n2;
                let mut da = Vec::with_capacity(m * n1);
                let mut db = Vec::with_capacity(m * n2);
                for i in 0..m {
                    da.extend_from_slice(&g.data[i * n..i * n + n1]);
                    db.extend_from_slice(&g.data[i * n + n1..(i + 1) * n]);
                }
                add_to(grads, *a, Tensor::new(av.shape.clone(), da));
                add_to(grads, *b, Tensor::new(bv.shape.clone(), db));
            }
            Op::SliceRows { x, start, len } => {
                let xv = &self.nodes[x.0].value;
                let n = xv.shape[1];
                let mut dx = vec![0.0; xv.numel()];
                dx[start * n..(start + len) * n].copy_from_slice(&g.data);
                add_to(grads, *x, Tensor::new(xv.shape.clone(), dx));
            }
            Op::SliceCols { x, start, len } => {
                let xv = &self.nodes[x.0].value;
                let (m, n) = (xv.shape[0], xv.shape[1]);
                let mut dx = vec![0.0; xv.numel()];
                for i in 0..m {
                    for j in 0..*len {
                        dx[i * n + start + j] = g.data[i * len + j];
                    }
                }
                add_to(grads, *x, Tensor::new(xv.shape.clone(), dx));
            }
            Op::SumAll(x) => {
                let xv = &self.nodes[x.0].value;
                add_to(
                    grads,
                    *x,
                    Tensor::new(xv.shape.clone(), vec![g.data[0]; xv.numel()]),
                );
            }
            Op::PickScalar { x, index } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = vec![0.0; xv.numel()];
                dx[*index] = g.data[0];
                add_to(grads, *x, Tensor::new(xv.shape.clone(), dx));
            }
            Op::DivScalar(a, b) => {
                let av = self.nodes[a.0].value.data[0];
                let bv = self.nodes[b.0].value.data[0];
                add_to(grads, *a, Tensor::scalar(g.data[0] / bv));
                add_to(grads, *b, Tensor::scalar(-g.data[0] * av / (bv * bv)));
            }
            Op::Patchify {
                image,
                height,
                width,
                channels,
                patch,
            } => {
                let mut dx = vec![0.0; height * width * channels];
                let grid_w = width / patch;
                let patch_dim = patch * patch * channels;
                for (tok, grow) in g.data.chunks(patch_dim).enumerate() {
                    let gr = tok / grid_w;
                    let gc = tok % grid_w;
                    let mut k = 0;
                    for py in 0..*patch {
                        for px in 0..*patch {
                            let y = gr * patch + py;
                            let x = gc * patch + px;
                            let base = (y * width + x) * channels;
                            for c in 0..*channels {
                                dx[base + c] += grow[k];
                                k += 1;
                            }
                        }
                    }
                }
                add_to(
                    grads,
                    *image,
                    Tensor::new(vec![*height, *width, *channels], dx),
                );
            }
        }
    }
}

fn transpose_plain(t: &Tensor) -> Tensor {
    debug_assert_eq!(t.shape.len(), 2);
    let (m, n) = (t.shape[0], t.shape[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = t.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], data)
}

/// Central-difference check of `backward` for a forward function built on
/// a fresh tape per evaluation. Relative error uses
/// max(|analytic|, |numeric|, 1e-8) as the denominator.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape, TensorId) -> TensorId,
{
    assert!(eps > 0.0);
    let mut tape = Tape::new();
    let xid = tape.input(x.clone());
    tape.watch(xid);
    let loss = f(&mut tape, xid);
    let analytic = tape.backward(loss).expect("backward").wrt(xid);

    let eval = |pt: &Tensor| -> f64 {
        let mut t = Tape::new();
        let id = t.input(pt.clone());
        let l = f(&mut t, id);
        t.value(l).data[0]
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let a = analytic.data[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    max_rel
}
