//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates parameter gradients into the
//! [`ParamStore`]. Values computed on a different tape enter as constants,
//! so they carry no gradient back.

use std::collections::HashMap;

use crate::error::{invalid_arg, Error, Result};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, k: usize },
    Add(Var, Var),
    Mul(Var, Var),
    /// `x (c channels) * gate (1 channel)`, gate broadcast over channels.
    ChannelGate { x: Var, gate: Var },
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    /// Weighted mean squared error; `weights` already divided by their sum.
    WeightedMse { pred: Var, target: Var, weights: Vec<f64> },
    /// Weighted mean binary cross-entropy on probabilities.
    WeightedBce { prob: Var, target: Vec<f64>, weights: Vec<f64> },
    /// Same loss taken on logits, stable for saturated probabilities.
    WeightedBceLogits { logits: Var, target: Vec<f64>, weights: Vec<f64> },
    LinearCombination(Vec<(Var, f64)>),
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

// ---- GEMM helpers (row-major) ----

/// `c = beta * c + a(m x k) * b(k x n)`, with optional transposed storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col3(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = x.shape();
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        let src = x.channel(ci);
        for kr in 0..3 {
            for kc in 0..3 {
                let dst = &mut cols[(ci * 9 + kr * 3 + kc) * hw..][..hw];
                let dr = kr as isize - 1;
                let dc = kc as isize - 1;
                for r in 0..h {
                    let rr = r as isize + dr;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    let srow = &src[rr as usize * w..][..w];
                    let drow = &mut dst[r * w..][..w];
                    let (lo, hi) = (if dc < 0 { 1 } else { 0 }, if dc > 0 { w - 1 } else { w });
                    for col in lo..hi {
                        drow[col] = srow[(col as isize + dc) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = out.channel_mut(ci);
        for kr in 0..3 {
            for kc in 0..3 {
                let src = &cols[(ci * 9 + kr * 3 + kc) * hw..][..hw];
                let dr = kr as isize - 1;
                let dc = kc as isize - 1;
                for r in 0..h {
                    let rr = r as isize + dr;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    let (lo, hi) = (if dc < 0 { 1 } else { 0 }, if dc > 0 { w - 1 } else { w });
                    let srow = &src[r * w..][..w];
                    let drow = &mut dst[rr as usize * w..][..w];
                    for col in lo..hi {
                        drow[(col as isize + dc) as usize] += srow[col];
                    }
                }
            }
        }
    }
    out
}

fn conv_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, k: usize) -> Tensor {
    let (cin, h, wd) = x.shape();
    let cout = w.c;
    let kk = cin * k * k;
    let hw = h * wd;
    let mut out = Tensor::zeros(cout, h, wd);
    if let Some(b) = b {
        for co in 0..cout {
            out.channel_mut(co).iter_mut().for_each(|v| *v = b.data[co]);
        }
    }
    if kk == 0 {
        return out;
    }
    let beta = if b.is_some() { 1.0 } else { 0.0 };
    if k == 1 {
        gemm(cout, kk, hw, &w.data, false, &x.data, false, &mut out.data, beta);
    } else {
        let cols = im2col3(x);
        gemm(cout, kk, hw, &w.data, false, &cols, false, &mut out.data, beta);
    }
    out
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

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    /// Parameter leaf; repeated requests for one id share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Zero-padded "same" convolution. `w` is `(c_out, 1, c_in * k * k)`;
    /// `b` is `(c_out, 1, 1)`. `k` must be 1 or 3.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, k: usize) -> Result<Var> {
        if k != 1 && k != 3 {
            return invalid_arg(format!("kernel size must be 1 or 3, got {k}"));
        }
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.w != xv.c * k * k || wv.h != 1 {
            return invalid_arg(format!(
                "conv weight shape {:?} does not fit input channels {} with kernel {k}",
                wv.shape(),
                xv.c
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != wv.c {
                return invalid_arg("conv bias length does not match output channels");
            }
        }
        let out = conv_forward(xv, wv, b.map(|b| self.value(b)), k);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, k }, rg))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return invalid_arg(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.c, av.h, av.w, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        if gv.c != 1 || gv.h != xv.h || gv.w != xv.w {
            return invalid_arg("gate must be a single channel on the input grid");
        }
        let n = xv.spatial();
        let mut out = xv.clone();
        for ch in out.data.chunks_mut(n) {
            for (o, g) in ch.iter_mut().zip(&gv.data) {
                *o *= g;
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(out, Op::ChannelGate { x, gate }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_vec(xv.c, xv.h, xv.w, xv.data.iter().map(|&v| f(v)).collect());
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, crate::lattice::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid_arg("concat of nothing");
        }
        let (h, w) = (self.value(parts[0]).h, self.value(parts[0]).w);
        if parts.iter().any(|&p| self.value(p).h != h || self.value(p).w != w) {
            return invalid_arg("concat: spatial shape mismatch");
        }
        let c: usize = parts.iter().map(|&p| self.value(p).c).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(c, h, w, data), Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.c || len == 0 {
            return invalid_arg("slice out of channel range");
        }
        let n = xv.spatial();
        let out = Tensor::from_vec(len, xv.h, xv.w, xv.data[start * n..(start + len) * n].to_vec());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { x, start }, rg))
    }

    /// 2×2 max pooling; height and width must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = xv.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return invalid_arg(format!("maxpool2 needs even grid, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(c, oh, ow);
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            let src = xv.channel(ch);
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = 2 * r * w + 2 * col;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * r + dr) * w + 2 * col + dc;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    let o = ch * oh * ow + r * ow + col;
                    out.data[o] = src[best];
                    argmax[o] = ch * h * w + best;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.shape();
        let mut out = Tensor::zeros(c, 2 * h, 2 * w);
        for ch in 0..c {
            let src = xv.channel(ch);
            let dst = out.channel_mut(ch);
            for r in 0..2 * h {
                for col in 0..2 * w {
                    dst[r * 2 * w + col] = src[(r / 2) * w + col / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// `sum_i w_i (pred_i - target_i)^2 / sum_i w_i` over single-channel maps.
    /// `weights` of `None` means uniform.
    pub fn weighted_mse(&mut self, pred: Var, target: Var, weights: Option<&[f64]>) -> Result<Var> {
        self.check_same(pred, target, "mse")?;
        let n = self.value(pred).len();
        let weights = normalised_weights(weights, n)?;
        let (p, t) = (self.value(pred), self.value(target));
        let loss: f64 = p.data.iter().zip(&t.data).zip(&weights).map(|((a, b), w)| w * (a - b) * (a - b)).sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(loss), Op::WeightedMse { pred, target, weights }, rg))
    }

    /// Weighted mean binary cross-entropy; `prob` must lie strictly in (0, 1).
    pub fn weighted_bce(&mut self, prob: Var, target: &[f64], weights: Option<&[f64]>) -> Result<Var> {
        let n = self.value(prob).len();
        if target.len() != n {
            return invalid_arg("bce: target length mismatch");
        }
        let weights = normalised_weights(weights, n)?;
        let p = self.value(prob);
        let loss: f64 = p
            .data
            .iter()
            .zip(target)
            .zip(&weights)
            .map(|((&q, &y), w)| -w * (y * q.ln() + (1.0 - y) * (1.0 - q).ln()))
            .sum();
        let rg = self.rg(prob);
        Ok(self.push(Tensor::scalar(loss), Op::WeightedBce { prob, target: target.to_vec(), weights }, rg))
    }

    /// Weighted mean binary cross-entropy of `sigmoid(logits)`.
    pub fn weighted_bce_logits(&mut self, logits: Var, target: &[f64], weights: Option<&[f64]>) -> Result<Var> {
        let n = self.value(logits).len();
        if target.len() != n {
            return invalid_arg("bce: target length mismatch");
        }
        let weights = normalised_weights(weights, n)?;
        let z = self.value(logits);
        // softplus(z) - y z, with softplus(z) = max(z, 0) + ln(1 + e^{-|z|})
        let loss: f64 = z
            .data
            .iter()
            .zip(target)
            .zip(&weights)
            .map(|((&z, &y), w)| w * (z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z))
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::WeightedBceLogits { logits, target: target.to_vec(), weights }, rg))
    }

    /// `sum_i c_i * s_i` over scalar nodes.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.iter().any(|&(v, _)| self.value(v).len() != 1) {
            return invalid_arg("linear_combination expects scalar terms");
        }
        let s = terms.iter().map(|&(v, c)| c * self.value(v).item()).sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(s), Op::LinearCombination(terms.to_vec()), rg))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Accumulate `d loss / d param` into `store`'s gradient slots.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::InvalidState("backward called without a recorded forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return invalid_arg("backward needs a scalar loss");
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::Conv { x, w, b, k } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (cin, h, wd) = xv.shape();
                    let hw = h * wd;
                    let cout = wv.c;
                    let kk = cin * k * k;
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let db = (0..cout).map(|co| g.channel(co).iter().sum()).collect();
                            acc(&mut grads, *b, Tensor::from_vec(cout, 1, 1, db));
                        }
                    }
                    let need_w = self.rg(*w);
                    let need_x = self.rg(*x);
                    if kk == 0 || !(need_w || need_x) {
                        continue;
                    }
                    if *k == 1 {
                        if need_w {
                            let mut dw = Tensor::zeros(cout, 1, kk);
                            gemm(cout, hw, kk, &g.data, false, &xv.data, true, &mut dw.data, 0.0);
                            acc(&mut grads, *w, dw);
                        }
                        if need_x {
                            let mut dx = Tensor::zeros(cin, h, wd);
                            gemm(kk, cout, hw, &wv.data, true, &g.data, false, &mut dx.data, 0.0);
                            acc(&mut grads, *x, dx);
                        }
                    } else {
                        if need_w {
                            let cols = im2col3(xv);
                            let mut dw = Tensor::zeros(cout, 1, kk);
                            gemm(cout, hw, kk, &g.data, false, &cols, true, &mut dw.data, 0.0);
                            acc(&mut grads, *w, dw);
                        }
                        if need_x {
                            let mut dcols = vec![0.0; kk * hw];
                            gemm(kk, cout, hw, &wv.data, true, &g.data, false, &mut dcols, 0.0);
                            acc(&mut grads, *x, col2im3(&dcols, cin, h, wd));
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let d = g.data.iter().zip(&bv.data).map(|(g, y)| g * y).collect();
                        acc(&mut grads, *a, Tensor::from_vec(av.c, av.h, av.w, d));
                    }
                    if self.rg(*b) {
                        let d = g.data.iter().zip(&av.data).map(|(g, x)| g * x).collect();
                        acc(&mut grads, *b, Tensor::from_vec(bv.c, bv.h, bv.w, d));
                    }
                }
                Op::ChannelGate { x, gate } => {
                    let (xv, gv) = (self.value(*x), self.value(*gate));
                    let n = xv.spatial();
                    if self.rg(*gate) {
                        let mut dg = Tensor::zeros(1, gv.h, gv.w);
                        for (gch, xch) in g.data.chunks(n).zip(xv.data.chunks(n)) {
                            for ((d, a), b) in dg.data.iter_mut().zip(gch).zip(xch) {
                                *d += a * b;
                            }
                        }
                        acc(&mut grads, *gate, dg);
                    }
                    if self.rg(*x) {
                        let mut dx = g;
                        for ch in dx.data.chunks_mut(n) {
                            for (d, s) in ch.iter_mut().zip(&gv.data) {
                                *d *= s;
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Scale(x, s) => {
                    let mut d = g;
                    d.data.iter_mut().for_each(|v| *v *= s);
                    acc(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let d = g.data.iter().zip(&y.data).map(|(g, s)| g * s * (1.0 - s)).collect();
                    acc(&mut grads, *x, Tensor::from_vec(y.c, y.h, y.w, d));
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let d = g.data.iter().zip(&y.data).map(|(g, t)| g * (1.0 - t * t)).collect();
                    acc(&mut grads, *x, Tensor::from_vec(y.c, y.h, y.w, d));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let d = g.data.iter().zip(&xv.data).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    acc(&mut grads, *x, Tensor::from_vec(xv.c, xv.h, xv.w, d));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let len = pv.len();
                        if self.rg(p) {
                            let d = g.data[offset..offset + len].to_vec();
                            acc(&mut grads, p, Tensor::from_vec(pv.c, pv.h, pv.w, d));
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, start } => {
                    let xv = self.value(*x);
                    let n = xv.spatial();
                    let mut d = Tensor::zeros(xv.c, xv.h, xv.w);
                    d.data[start * n..start * n + g.len()].copy_from_slice(&g.data);
                    acc(&mut grads, *x, d);
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.c, xv.h, xv.w);
                    for (gv, &src) in g.data.iter().zip(argmax) {
                        d.data[src] += gv;
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Upsample2(x) => {
                    let xv = self.value(*x);
                    let (c, h, w) = xv.shape();
                    let mut d = Tensor::zeros(c, h, w);
                    for ch in 0..c {
                        let src = g.channel(ch);
                        let dst = d.channel_mut(ch);
                        for r in 0..2 * h {
                            for col in 0..2 * w {
                                dst[(r / 2) * w + col / 2] += src[r * 2 * w + col];
                            }
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::WeightedMse { pred, target, weights } => {
                    let s = g.item();
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let d: Vec<f64> =
                        p.data.iter().zip(&t.data).zip(weights).map(|((a, b), w)| 2.0 * s * w * (a - b)).collect();
                    if self.rg(*target) {
                        let neg = d.iter().map(|v| -v).collect();
                        acc(&mut grads, *target, Tensor::from_vec(t.c, t.h, t.w, neg));
                    }
                    if self.rg(*pred) {
                        acc(&mut grads, *pred, Tensor::from_vec(p.c, p.h, p.w, d));
                    }
                }
                Op::WeightedBce { prob, target, weights } => {
                    let s = g.item();
                    let p = self.value(*prob);
                    let d = p
                        .data
                        .iter()
                        .zip(target)
                        .zip(weights)
                        .map(|((&q, &y), w)| s * w * (-(y / q) + (1.0 - y) / (1.0 - q)))
                        .collect();
                    acc(&mut grads, *prob, Tensor::from_vec(p.c, p.h, p.w, d));
                }
                Op::WeightedBceLogits { logits, target, weights } => {
                    let s = g.item();
                    let z = self.value(*logits);
                    let d = z
                        .data
                        .iter()
                        .zip(target)
                        .zip(weights)
                        .map(|((&z, &y), w)| s * w * (crate::lattice::sigmoid(z) - y))
                        .collect();
                    acc(&mut grads, *logits, Tensor::from_vec(z.c, z.h, z.w, d));
                }
                Op::LinearCombination(terms) => {
                    let s = g.item();
                    for &(v, c) in terms {
                        if self.rg(v) {
                            acc(&mut grads, v, Tensor::scalar(s * c));
                        }
                    }
                }
                Op::SumSquares(x) => {
                    let s = g.item();
                    let xv = self.value(*x);
                    let d = xv.data.iter().map(|v| 2.0 * s * v).collect();
                    acc(&mut grads, *x, Tensor::from_vec(xv.c, xv.h, xv.w, d));
                }
            }
        }
        Ok(())
    }
}

fn normalised_weights(weights: Option<&[f64]>, n: usize) -> Result<Vec<f64>> {
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n {
                return invalid_arg(format!("weight length {} does not match {n}", w.len()));
            }
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return invalid_arg("loss weights must be finite and >= 0");
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return invalid_arg("loss weights sum to zero");
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}
