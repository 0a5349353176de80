//! Tape-based reverse-mode differentiation over the handful of ops the
//! networks need.
//!
//! A [`Graph`] records every op as it is evaluated. Nodes are addressed by
//! [`Var`] handles; [`Graph::backward`] walks the tape in reverse. Parameters
//! are named leaves: binding the same name twice returns the same node, so a
//! sub-network applied to several inputs accumulates a single gradient.

mod kernels;

use std::collections::{BTreeMap, HashMap};

use kernels::{col2im, gemm, im2col, Mat};

use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics observed by a training-mode batch-norm, for running-average updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BnObservation {
    pub name: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

pub enum BnMode<'a> {
    /// Normalize with batch statistics; record them under `name`.
    Train { name: &'a str },
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Leaf,
    Conv1d { x: Var, w: Var, b: Var, k: usize, pad: usize },
    ConvTranspose2 { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Relu { x: Var },
    Sigmoid { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    ConcatChannels { a: Var, b: Var },
    ConcatBatch { parts: Vec<Var> },
    Regroup { x: Var, map: Vec<u32> },
    ToRows { x: Var },
    SliceRows { x: Var, start: usize },
    Linear { x: Var, w: Var, b: Var },
    L1Mean { a: Var, b: Var },
    CrossEntropy { x: Var, target: usize },
    Triplet { a: Var, p: Var, n: Var, margin: f64 },
    WeightedSum { terms: Vec<(Var, f64)> },
    DotConst { x: Var, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    bn_observations: Vec<BnObservation>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf. Leaves created this way behave like parameters but
    /// are not listed by [`Graph::param_grads`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds the named parameter, reusing the existing leaf if already bound.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Registers an existing differentiable node as the parameter `name`.
    pub fn alias_param(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
    }

    pub fn bn_observations(&self) -> &[BnObservation] {
        &self.bn_observations
    }

    /// Gradients of every bound parameter, by name. Unreached parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Same-padded stride-1 convolution. `x: [cin, n, l]`, `w: [cout, cin, k]` (odd `k`), `b: [cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        let (cin, n, len) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(cin, wcin, "conv1d channel mismatch");
        assert!(k % 2 == 1, "conv1d needs an odd kernel");
        let pad = k / 2;
        let nl = n * len;
        let mut out = vec![0.0; cout * nl];
        {
            let xv = self.value(x).data();
            let wm = Mat::new(self.value(w).data(), cout, cin * k);
            if k == 1 {
                gemm(wm, Mat::new(xv, cin, nl), &mut out, false);
            } else {
                let col = im2col(xv, cin, n, len, k, pad);
                gemm(wm, Mat::new(&col, cin * k, nl), &mut out, false);
            }
            let bv = self.value(b).data();
            for (co, row) in out.chunks_mut(nl).enumerate() {
                for v in row {
                    *v += bv[co];
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(Tensor::from_vec(&[cout, n, len], out), Op::Conv1d { x, w, b, k, pad }, rg)
    }

    /// Kernel-2 stride-2 transposed convolution doubling the length.
    /// `x: [cin, n, l]`, `w: [cout, 2, cin]`, `b: [cout]`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        let (cin, n, len) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        assert_eq!(ws[1], 2);
        assert_eq!(ws[2], cin, "conv_transpose2 channel mismatch");
        let nl = n * len;
        let mut y = vec![0.0; 2 * cout * nl];
        gemm(
            Mat::new(self.value(w).data(), 2 * cout, cin),
            Mat::new(self.value(x).data(), cin, nl),
            &mut y,
            false,
        );
        let bv = self.value(b).data();
        let olen = 2 * len;
        let mut out = vec![0.0; cout * n * olen];
        for co in 0..cout {
            for kk in 0..2 {
                let yrow = &y[(co * 2 + kk) * nl..(co * 2 + kk + 1) * nl];
                for s in 0..n {
                    let dst = &mut out[(co * n + s) * olen..(co * n + s + 1) * olen];
                    for l in 0..len {
                        dst[2 * l + kk] = yrow[s * len + l] + bv[co];
                    }
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(Tensor::from_vec(&[cout, n, olen], out), Op::ConvTranspose2 { x, w, b }, rg)
    }

    /// Per-channel batch normalization over the batch and length axes.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Var {
        let shape = self.value(x).shape().to_vec();
        let c = shape[0];
        let m = shape[1] * shape[2];
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        let batch_stats = matches!(mode, BnMode::Train { .. });
        let mut obs_mean = Vec::new();
        let mut obs_var = Vec::new();
        for ch in 0..c {
            let block = &xv[ch * m..(ch + 1) * m];
            let (mean, var) = match &mode {
                BnMode::Train { .. } => {
                    let mean = block.iter().sum::<f64>() / m as f64;
                    let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    obs_mean.push(mean);
                    obs_var.push(if m > 1 { var * m as f64 / (m - 1) as f64 } else { var });
                    (mean, var)
                }
                BnMode::Eval { mean, var } => (mean[ch], var[ch]),
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            for (h, v) in xhat[ch * m..(ch + 1) * m].iter_mut().zip(block) {
                *h = (v - mean) * is;
            }
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for ch in 0..c {
            for v in &mut out[ch * m..(ch + 1) * m] {
                *v = g[ch] * *v + bt[ch];
            }
        }
        if let BnMode::Train { name } = mode {
            self.bn_observations.push(BnObservation { name: name.to_string(), mean: obs_mean, var: obs_var });
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(Tensor::from_vec(&shape, out), Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.shape(), t.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Max-pooling with window and stride 2 along the length axis.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, n, len) = (t.dim(0), t.dim(1), t.dim(2));
        assert!(len % 2 == 0, "max_pool2 needs an even length");
        let half = len / 2;
        let xv = t.data();
        let mut out = Vec::with_capacity(c * n * half);
        let mut argmax = Vec::with_capacity(c * n * half);
        for row in 0..c * n {
            for l in 0..half {
                let i = row * len + 2 * l;
                let j = if xv[i + 1] > xv[i] { i + 1 } else { i };
                out.push(xv[j]);
                argmax.push(j as u32);
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[c, n, half], out), Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape()[1..], tb.shape()[1..], "concat_channels shape mismatch");
        let shape = [ta.dim(0) + tb.dim(0), ta.dim(1), ta.dim(2)];
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_vec(&shape, data), Op::ConcatChannels { a, b }, rg)
    }

    /// Concatenates `[c, n_i, l]` tensors along the batch axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape().to_vec();
        let (c, len) = (first[0], first[2]);
        let total: usize = parts.iter().map(|&p| self.value(p).dim(1)).sum();
        let mut data = Vec::with_capacity(c * total * len);
        for ch in 0..c {
            for &p in parts {
                let t = self.value(p);
                assert_eq!((t.dim(0), t.dim(2)), (c, len), "concat_batch shape mismatch");
                let m = t.dim(1) * len;
                data.extend_from_slice(&t.data()[ch * m..(ch + 1) * m]);
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_vec(&[c, total, len], data), Op::ConcatBatch { parts: parts.to_vec() }, rg)
    }

    /// Reinterprets each sample's `c·l` features (channel-major) as `channels × (c·l / channels)`.
    pub fn regroup(&mut self, x: Var, channels: usize) -> Var {
        let t = self.value(x);
        let (c, n, len) = (t.dim(0), t.dim(1), t.dim(2));
        let per = c * len;
        assert!(per % channels == 0, "regroup: {per} features do not split into {channels} channels");
        let olen = per / channels;
        let xv = t.data();
        let mut out = vec![0.0; xv.len()];
        let mut map = vec![0u32; xv.len()];
        for ch in 0..c {
            for s in 0..n {
                for l in 0..len {
                    let f = ch * len + l;
                    let (oc, ol) = (f / olen, f % olen);
                    let src = (ch * n + s) * len + l;
                    let dst = (oc * n + s) * olen + ol;
                    out[dst] = xv[src];
                    map[dst] = src as u32;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[channels, n, olen], out), Op::Regroup { x, map }, rg)
    }

    /// `[c, n, l] → [n, c·l]`.
    pub fn to_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, n, len) = (t.dim(0), t.dim(1), t.dim(2));
        let xv = t.data();
        let mut out = vec![0.0; xv.len()];
        for ch in 0..c {
            for s in 0..n {
                out[s * c * len + ch * len..s * c * len + (ch + 1) * len]
                    .copy_from_slice(&xv[(ch * n + s) * len..(ch * n + s + 1) * len]);
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_vec(&[n, c * len], out), Op::ToRows { x }, rg)
    }

    /// Rows `start..start + count` of an `[n, d]` tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let t = self.value(x);
        let d = t.dim(1);
        assert!(start + count <= t.dim(0));
        let out = Tensor::from_vec(&[count, d], t.data()[start * d..(start + count) * d].to_vec());
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    /// `x: [n, in]`, `w: [out, in]`, `b: [out]` → `[n, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, din) = (self.value(x).dim(0), self.value(x).dim(1));
        let (dout, win) = (self.value(w).dim(0), self.value(w).dim(1));
        assert_eq!(din, win, "linear input mismatch");
        let mut out = vec![0.0; n * dout];
        gemm(
            Mat::new(self.value(x).data(), n, din),
            Mat::new(self.value(w).data(), dout, din).t(),
            &mut out,
            false,
        );
        let bv = self.value(b).data();
        for row in out.chunks_mut(dout) {
            for (v, bb) in row.iter_mut().zip(bv) {
                *v += bb;
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(Tensor::from_vec(&[n, dout], out), Op::Linear { x, w, b }, rg)
    }

    /// Mean absolute difference over all elements.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "l1_mean shape mismatch");
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum();
        let v = s / ta.len() as f64;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(v), Op::L1Mean { a, b }, rg)
    }

    /// Mean over rows of `-log softmax(x_row)[target]` for logits `x: [n, c]`.
    pub fn cross_entropy(&mut self, x: Var, target: usize) -> Var {
        let t = self.value(x);
        let (n, c) = (t.dim(0), t.dim(1));
        assert!(target < c);
        let total: f64 = t.data().chunks(c).map(|row| log_sum_exp(row) - row[target]).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total / n as f64), Op::CrossEntropy { x, target }, rg)
    }

    /// `Σ_k max(‖a_k − p_k‖² − ‖a_k − n_k‖² + margin, 0)` over rows of `[k, d]` tensors.
    pub fn triplet(&mut self, a: Var, p: Var, n: Var, margin: f64) -> Var {
        let (ta, tp, tn) = (self.value(a), self.value(p), self.value(n));
        assert!(ta.shape() == tp.shape() && ta.shape() == tn.shape(), "triplet shape mismatch");
        let d = ta.dim(1);
        let mut total = 0.0;
        for k in 0..ta.dim(0) {
            total += triplet_term(&ta.data()[k * d..(k + 1) * d], &tp.data()[k * d..(k + 1) * d], &tn.data()[k * d..(k + 1) * d], margin).max(0.0);
        }
        let rg = self.rg(&[a, p, n]);
        self.push(Tensor::scalar(total), Op::Triplet { a, p, n, margin }, rg)
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|&(x, w)| w * self.value(x).item()).sum();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(Tensor::scalar(v), Op::WeightedSum { terms: terms.to_vec() }, rg)
    }

    /// `Σ_i c_i · x_i` against a constant tensor of the same size.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), weights.len(), "dot_const size mismatch");
        let v: f64 = t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::DotConst { x, weights: weights.data().to_vec() }, rg)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv1d { x, w, b, k, pad } => {
                let xt = self.value(x);
                let (cin, n, len) = (xt.dim(0), xt.dim(1), xt.dim(2));
                let cout = node.value.dim(0);
                let nl = n * len;
                let gm = Mat::new(gd, cout, nl);
                let col_owned;
                let col: &[f64] = if k == 1 {
                    xt.data()
                } else {
                    col_owned = im2col(xt.data(), cin, n, len, k, pad);
                    &col_owned
                };
                if self.needs(w) {
                    let mut dw = vec![0.0; cout * cin * k];
                    gemm(gm, Mat::new(col, cin * k, nl).t(), &mut dw, false);
                    accumulate(grads, w, self.value(w).shape(), &dw);
                }
                if self.needs(b) {
                    let db: Vec<f64> = gd.chunks(nl).map(|r| r.iter().sum()).collect();
                    accumulate(grads, b, &[cout], &db);
                }
                if self.needs(x) {
                    let mut dcol = vec![0.0; cin * k * nl];
                    gemm(Mat::new(self.value(w).data(), cout, cin * k).t(), gm, &mut dcol, false);
                    if k == 1 {
                        accumulate(grads, x, xt.shape(), &dcol);
                    } else {
                        let mut dx = vec![0.0; cin * nl];
                        col2im(&dcol, &mut dx, cin, n, len, k, pad);
                        accumulate(grads, x, xt.shape(), &dx);
                    }
                }
            }
            &Op::ConvTranspose2 { x, w, b } => {
                let xt = self.value(x);
                let (cin, n, len) = (xt.dim(0), xt.dim(1), xt.dim(2));
                let cout = node.value.dim(0);
                let (nl, olen) = (n * len, 2 * len);
                let mut gy = vec![0.0; 2 * cout * nl];
                for co in 0..cout {
                    for kk in 0..2 {
                        let row = &mut gy[(co * 2 + kk) * nl..(co * 2 + kk + 1) * nl];
                        for s in 0..n {
                            let src = &gd[(co * n + s) * olen..(co * n + s + 1) * olen];
                            for l in 0..len {
                                row[s * len + l] = src[2 * l + kk];
                            }
                        }
                    }
                }
                let gym = Mat::new(&gy, 2 * cout, nl);
                if self.needs(w) {
                    let mut dw = vec![0.0; 2 * cout * cin];
                    gemm(gym, Mat::new(xt.data(), cin, nl).t(), &mut dw, false);
                    accumulate(grads, w, self.value(w).shape(), &dw);
                }
                if self.needs(b) {
                    let db: Vec<f64> = gd.chunks(n * olen).map(|r| r.iter().sum()).collect();
                    accumulate(grads, b, &[cout], &db);
                }
                if self.needs(x) {
                    let mut dx = vec![0.0; cin * nl];
                    gemm(Mat::new(self.value(w).data(), 2 * cout, cin).t(), gym, &mut dx, false);
                    accumulate(grads, x, xt.shape(), &dx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let shape = self.value(*x).shape();
                let c = shape[0];
                let m = shape[1] * shape[2];
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let gs = &gd[ch * m..(ch + 1) * m];
                    let hs = &xhat[ch * m..(ch + 1) * m];
                    dbeta[ch] = gs.iter().sum();
                    dgamma[ch] = gs.iter().zip(hs).map(|(a, b)| a * b).sum();
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; c * m];
                    for ch in 0..c {
                        let gs = &gd[ch * m..(ch + 1) * m];
                        let hs = &xhat[ch * m..(ch + 1) * m];
                        let out = &mut dx[ch * m..(ch + 1) * m];
                        let scale = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            let mf = m as f64;
                            let (sg, sgh) = (dbeta[ch] / mf, dgamma[ch] / mf);
                            for ((o, gv), h) in out.iter_mut().zip(gs).zip(hs) {
                                *o = scale * (gv - sg - h * sgh);
                            }
                        } else {
                            for (o, gv) in out.iter_mut().zip(gs) {
                                *o = scale * gv;
                            }
                        }
                    }
                    accumulate(grads, *x, shape, &dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, &[c], &dgamma);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, &[c], &dbeta);
                }
            }
            &Op::Relu { x } => {
                let y = node.value.data();
                let dx: Vec<f64> = gd.iter().zip(y).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect();
                accumulate(grads, x, node.value.shape(), &dx);
            }
            &Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, x, node.value.shape(), &dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let xt = self.value(*x);
                let mut dx = vec![0.0; xt.len()];
                for (gv, &j) in gd.iter().zip(argmax) {
                    dx[j as usize] += gv;
                }
                accumulate(grads, *x, xt.shape(), &dx);
            }
            &Op::ConcatChannels { a, b } => {
                let na = self.value(a).len();
                if self.needs(a) {
                    accumulate(grads, a, self.value(a).shape(), &gd[..na]);
                }
                if self.needs(b) {
                    accumulate(grads, b, self.value(b).shape(), &gd[na..]);
                }
            }
            Op::ConcatBatch { parts } => {
                let (c, total, len) = (node.value.dim(0), node.value.dim(1), node.value.dim(2));
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let m = t.dim(1) * len;
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(t.len());
                        for ch in 0..c {
                            let base = ch * total * len + offset;
                            dp.extend_from_slice(&gd[base..base + m]);
                        }
                        accumulate(grads, p, t.shape(), &dp);
                    }
                    offset += m;
                }
            }
            Op::Regroup { x, map } => {
                let xt = self.value(*x);
                let mut dx = vec![0.0; xt.len()];
                for (gv, &src) in gd.iter().zip(map) {
                    dx[src as usize] += gv;
                }
                accumulate(grads, *x, xt.shape(), &dx);
            }
            &Op::ToRows { x } => {
                let xt = self.value(x);
                let (c, n, len) = (xt.dim(0), xt.dim(1), xt.dim(2));
                let mut dx = vec![0.0; xt.len()];
                for ch in 0..c {
                    for s in 0..n {
                        dx[(ch * n + s) * len..(ch * n + s + 1) * len]
                            .copy_from_slice(&gd[s * c * len + ch * len..s * c * len + (ch + 1) * len]);
                    }
                }
                accumulate(grads, x, xt.shape(), &dx);
            }
            &Op::SliceRows { x, start } => {
                let xt = self.value(x);
                let d = xt.dim(1);
                let mut dx = vec![0.0; xt.len()];
                dx[start * d..start * d + gd.len()].copy_from_slice(gd);
                accumulate(grads, x, xt.shape(), &dx);
            }
            &Op::Linear { x, w, b } => {
                let xt = self.value(x);
                let (n, din) = (xt.dim(0), xt.dim(1));
                let dout = node.value.dim(1);
                let gm = Mat::new(gd, n, dout);
                if self.needs(w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(gm.t(), Mat::new(xt.data(), n, din), &mut dw, false);
                    accumulate(grads, w, &[dout, din], &dw);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, b, &[dout], &db);
                }
                if self.needs(x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(gm, Mat::new(self.value(w).data(), dout, din), &mut dx, false);
                    accumulate(grads, x, &[n, din], &dx);
                }
            }
            &Op::L1Mean { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let scale = gd[0] / ta.len() as f64;
                let da: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| scale * sign(x - y)).collect();
                if self.needs(b) {
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    accumulate(grads, b, tb.shape(), &db);
                }
                if self.needs(a) {
                    accumulate(grads, a, ta.shape(), &da);
                }
            }
            &Op::CrossEntropy { x, target } => {
                let xt = self.value(x);
                let (n, c) = (xt.dim(0), xt.dim(1));
                let scale = gd[0] / n as f64;
                let mut dx = Vec::with_capacity(xt.len());
                for row in xt.data().chunks(c) {
                    let lse = log_sum_exp(row);
                    for (j, v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        dx.push(scale * (p - if j == target { 1.0 } else { 0.0 }));
                    }
                }
                accumulate(grads, x, xt.shape(), &dx);
            }
            &Op::Triplet { a, p, n, margin } => {
                let (ta, tp, tn) = (self.value(a), self.value(p), self.value(n));
                let d = ta.dim(1);
                let mut da = vec![0.0; ta.len()];
                let mut dp = vec![0.0; ta.len()];
                let mut dn = vec![0.0; ta.len()];
                for k in 0..ta.dim(0) {
                    let r = k * d..(k + 1) * d;
                    let (av, pv, nv) = (&ta.data()[r.clone()], &tp.data()[r.clone()], &tn.data()[r.clone()]);
                    if triplet_term(av, pv, nv, margin) > 0.0 {
                        for j in 0..d {
                            da[k * d + j] = gd[0] * 2.0 * (nv[j] - pv[j]);
                            dp[k * d + j] = -gd[0] * 2.0 * (av[j] - pv[j]);
                            dn[k * d + j] = gd[0] * 2.0 * (av[j] - nv[j]);
                        }
                    }
                }
                for (v, dv) in [(a, da), (p, dp), (n, dn)] {
                    if self.needs(v) {
                        accumulate(grads, v, ta.shape(), &dv);
                    }
                }
            }
            Op::DotConst { x, weights } => {
                let dx: Vec<f64> = weights.iter().map(|w| w * gd[0]).collect();
                accumulate(grads, *x, self.value(*x).shape(), &dx);
            }
            Op::WeightedSum { terms } => {
                for &(x, w) in terms {
                    if self.needs(x) {
                        accumulate(grads, x, &[1], &[w * gd[0]]);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: &[f64]) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_vec(shape, delta.to_vec())),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn triplet_term(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    let dp: f64 = a.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum();
    let dn: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum();
    dp - dn + margin
}

#[cfg(test)]
mod tests;
