//! A small vector-valued reverse-mode tape covering the operations used by
//! the scoring pipeline. Every node holds a flat `Vec<f64>`; scalars are
//! length-one nodes.

use std::sync::Arc;

use crate::sparse_select::{entmax15, entmax15_vjp_from, EntmaxResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec { m: Var, x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Slice { src: Var, start: usize },
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    WeightedSum { weights: Var, items: Vec<Var> },
    Cosine(Var, Var),
    L2Normalize(Var),
    Entmax { input: Var, result: EntmaxResult },
    Fuse { anchor: Var, prompt: Var },
    Upsample { src: Var, hp: usize, wp: usize, h: usize, w: usize },
    Bce { p: Var, positive: bool, eps: f64 },
    Focal { p: Var, mask: Arc<Vec<bool>>, gamma: f64, alpha: f64, eps: f64 },
    Dice { p: Var, mask: Arc<Vec<bool>>, smooth: f64 },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Bilinear source coordinate (half-pixel centres, clamped to the grid).
pub fn bilinear_source(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let x = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let x0 = (x.floor() as usize).min(src_len - 1);
    let x1 = (x0 + 1).min(src_len - 1);
    let frac = if x0 == x1 { 0.0 } else { x - x0 as f64 };
    (x0, x1, frac)
}

/// Bilinear resize of a row-major `hp x wp` grid to `h x w`.
pub fn upsample_bilinear(src: &[f64], hp: usize, wp: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let (r0, r1, fr) = bilinear_source(r, hp, h);
        for c in 0..w {
            let (c0, c1, fc) = bilinear_source(c, wp, w);
            let top = src[r0 * wp + c0] * (1.0 - fc) + src[r0 * wp + c1] * fc;
            let bot = src[r1 * wp + c0] * (1.0 - fc) + src[r1 * wp + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += alpha * v;
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matvec(&mut self, m: Var, x: Var, rows: usize, cols: usize) -> Var {
        let value = crate::numerics::matvec(self.value(m), rows, cols, self.value(x));
        self.push(value, Op::MatVec { m, x, rows, cols }, &[m, x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| crate::numerics::sigmoid(x)).collect();
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Var {
        let value = self.value(src)[start..start + len].to_vec();
        self.push(value, Op::Slice { src, start }, &[src])
    }

    pub fn concat(&mut self, parts: Vec<Var>) -> Var {
        let value = parts.iter().flat_map(|p| self.value(*p).to_vec()).collect();
        let parents = parts.clone();
        self.push(value, Op::Concat(parts), &parents)
    }

    pub fn mean(&mut self, items: Vec<Var>) -> Var {
        let n = items.len() as f64;
        let mut value = vec![0.0; self.value(items[0]).len()];
        for it in &items {
            axpy(&mut value, 1.0, self.value(*it));
        }
        for v in &mut value {
            *v /= n;
        }
        let parents = items.clone();
        self.push(value, Op::Mean(items), &parents)
    }

    /// `sum_k weights[k] * items[k]`.
    pub fn weighted_sum(&mut self, weights: Var, items: Vec<Var>) -> Var {
        let w = self.value(weights).to_vec();
        let mut value = vec![0.0; self.value(items[0]).len()];
        for (wk, it) in w.iter().zip(&items) {
            axpy(&mut value, *wk, self.value(*it));
        }
        let mut parents = items.clone();
        parents.push(weights);
        self.push(value, Op::WeightedSum { weights, items }, &parents)
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let value = dot(va, vb) / (dot(va, va).sqrt() * dot(vb, vb).sqrt());
        self.push(vec![value], Op::Cosine(a, b), &[a, b])
    }

    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = dot(va, va).sqrt();
        let value = va.iter().map(|x| x / n).collect();
        self.push(value, Op::L2Normalize(a), &[a])
    }

    pub fn entmax(&mut self, input: Var) -> Var {
        let result = entmax15(self.value(input));
        let value = result.weights.clone();
        self.push(value, Op::Entmax { input, result }, &[input])
    }

    /// `anchor + prompt - proj_anchor(prompt)`.
    pub fn fuse(&mut self, anchor: Var, prompt: Var) -> Var {
        let (a, t) = (self.value(anchor), self.value(prompt));
        let c = dot(a, t) / dot(a, a);
        let value = a.iter().zip(t).map(|(ai, ti)| ai + (ti - c * ai)).collect();
        self.push(value, Op::Fuse { anchor, prompt }, &[anchor, prompt])
    }

    pub fn upsample(&mut self, src: Var, hp: usize, wp: usize, h: usize, w: usize) -> Var {
        let value = upsample_bilinear(self.value(src), hp, wp, h, w);
        self.push(value, Op::Upsample { src, hp, wp, h, w }, &[src])
    }

    pub fn bce(&mut self, p: Var, positive: bool, eps: f64) -> Var {
        let pc = self.scalar(p).clamp(eps, 1.0 - eps);
        let value = if positive { -pc.ln() } else { -(1.0 - pc).ln() };
        self.push(vec![value], Op::Bce { p, positive, eps }, &[p])
    }

    pub fn focal(&mut self, p: Var, mask: Arc<Vec<bool>>, gamma: f64, alpha: f64, eps: f64) -> Var {
        let value = crate::objective::focal_from_slices(self.value(p), &mask, gamma, alpha, eps);
        self.push(
            vec![value],
            Op::Focal {
                p,
                mask,
                gamma,
                alpha,
                eps,
            },
            &[p],
        )
    }

    pub fn dice(&mut self, p: Var, mask: Arc<Vec<bool>>, smooth: f64) -> Var {
        let value = crate::objective::dice_from_slices(self.value(p), &mask, smooth);
        self.push(vec![value], Op::Dice { p, mask, smooth }, &[p])
    }

    /// Reverse sweep from scalar `root`; returns per-node gradients
    /// (`None` for nodes that do not need one).
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatVec { m, x, rows, cols } => {
                let (mv, xv) = (self.value(*m), self.value(*x));
                if let Some(gm) = self.acc(grads, *m) {
                    for r in 0..*rows {
                        axpy(&mut gm[r * cols..(r + 1) * cols], g[r], xv);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..*rows {
                        axpy(gx, g[r], &mv[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(gb, 1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    axpy(gb, -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(ga, *s, g);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, y) in node.value.iter().enumerate() {
                        ga[i] += g[i] * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, y) in node.value.iter().enumerate() {
                        ga[i] += g[i] * y * (1.0 - y);
                    }
                }
            }
            Op::Slice { src, start } => {
                if let Some(gs) = self.acc(grads, *src) {
                    axpy(&mut gs[*start..*start + g.len()], 1.0, g);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        axpy(gp, 1.0, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Mean(items) => {
                let inv = 1.0 / items.len() as f64;
                for it in items {
                    if let Some(gi) = self.acc(grads, *it) {
                        axpy(gi, inv, g);
                    }
                }
            }
            Op::WeightedSum { weights, items } => {
                let w = self.value(*weights).to_vec();
                let dw: Vec<f64> = items.iter().map(|it| dot(g, self.value(*it))).collect();
                for (k, it) in items.iter().enumerate() {
                    if let Some(gi) = self.acc(grads, *it) {
                        axpy(gi, w[k], g);
                    }
                }
                if let Some(gw) = self.acc(grads, *weights) {
                    axpy(gw, 1.0, &dw);
                }
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, nb) = (dot(va, va).sqrt(), dot(vb, vb).sqrt());
                let c = node.value[0];
                let gs = g[0];
                // d cos / d a = b / (|a||b|) - c a / |a|^2
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += gs * (vb[i] / (na * nb) - c * va[i] / (na * na));
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += gs * (va[i] / (na * nb) - c * vb[i] / (nb * nb));
                    }
                }
            }
            Op::L2Normalize(a) => {
                let va = self.value(*a);
                let n = dot(va, va).sqrt();
                let y = &node.value;
                let yg = dot(y, g);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += (g[i] - y[i] * yg) / n;
                    }
                }
            }
            Op::Entmax { input, result } => {
                if let Some(gi) = self.acc(grads, *input) {
                    axpy(gi, 1.0, &entmax15_vjp_from(result, g));
                }
            }
            Op::Fuse { anchor, prompt } => {
                let (a, t) = (self.value(*anchor), self.value(*prompt));
                let aa = dot(a, a);
                let c = dot(a, t) / aa;
                let ag = dot(a, g);
                if let Some(gt) = self.acc(grads, *prompt) {
                    for i in 0..gt.len() {
                        gt[i] += g[i] - ag / aa * a[i];
                    }
                }
                if let Some(ga) = self.acc(grads, *anchor) {
                    for i in 0..ga.len() {
                        ga[i] += (1.0 - c) * g[i] - ag * (t[i] - 2.0 * c * a[i]) / aa;
                    }
                }
            }
            Op::Upsample { src, hp, wp, h, w } => {
                if let Some(gs) = self.acc(grads, *src) {
                    for r in 0..*h {
                        let (r0, r1, fr) = bilinear_source(r, *hp, *h);
                        for c in 0..*w {
                            let (c0, c1, fc) = bilinear_source(c, *wp, *w);
                            let gv = g[r * w + c];
                            gs[r0 * wp + c0] += gv * (1.0 - fr) * (1.0 - fc);
                            gs[r0 * wp + c1] += gv * (1.0 - fr) * fc;
                            gs[r1 * wp + c0] += gv * fr * (1.0 - fc);
                            gs[r1 * wp + c1] += gv * fr * fc;
                        }
                    }
                }
            }
            Op::Bce { p, positive, eps } => {
                let pv = self.scalar(*p);
                if let Some(gp) = self.acc(grads, *p) {
                    if pv > *eps && pv < 1.0 - eps {
                        gp[0] += g[0] * if *positive { -1.0 / pv } else { 1.0 / (1.0 - pv) };
                    }
                }
            }
            Op::Focal {
                p,
                mask,
                gamma,
                alpha,
                eps,
            } => {
                let pv = self.value(*p);
                let n = pv.len() as f64;
                if let Some(gp) = self.acc(grads, *p) {
                    for i in 0..gp.len() {
                        if pv[i] <= *eps || pv[i] >= 1.0 - eps {
                            continue;
                        }
                        let (pt, sign) = if mask[i] { (pv[i], 1.0) } else { (1.0 - pv[i], -1.0) };
                        let q = 1.0 - pt;
                        let mut d = q.powf(*gamma) / pt;
                        if *gamma != 0.0 {
                            d -= gamma * q.powf(gamma - 1.0) * pt.ln();
                        }
                        gp[i] += g[0] * sign * (-alpha * d) / n;
                    }
                }
            }
            Op::Dice { p, mask, smooth } => {
                let pv = self.value(*p);
                let inter: f64 = pv.iter().zip(mask.iter()).filter(|(_, &m)| m).map(|(v, _)| v).sum();
                let psum: f64 = pv.iter().sum();
                let gsum = mask.iter().filter(|&&m| m).count() as f64;
                let num = 2.0 * inter + smooth;
                let den = psum + gsum + smooth;
                if let Some(gp) = self.acc(grads, *p) {
                    for i in 0..gp.len() {
                        let gi = if mask[i] { 1.0 } else { 0.0 };
                        gp[i] += g[0] * -(2.0 * gi * den - num) / (den * den);
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}
