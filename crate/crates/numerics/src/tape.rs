//! Wengert-list tape for reverse-mode differentiation.
//!
//! Forward ops append nodes in execution order, so replaying the list in
//! reverse visits every node after all of its consumers.

use std::sync::Arc;

use crate::error::{NumericsError, Result};
use crate::kernels::{matmul_nt_acc, matmul_tn_acc, normal_cdf, normal_pdf};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Sum(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    AddBias {
        a: Var,
        bias: Var,
    },
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    SliceRows {
        a: Var,
        offset: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
        cols: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ConcatChannels(Vec<Var>),
    Pointwise {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SubChannelBroadcast {
        x: Var,
        r: Var,
    },
    MulChannel {
        x: Var,
        s: Var,
    },
    Top1Mask {
        g: Var,
        keep: Vec<usize>,
    },
    Route {
        x: Var,
        gate: Var,
        weights: Vec<Var>,
        biases: Vec<Var>,
        assign: Vec<usize>,
        pre: Vec<f64>,
    },
    DiagCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Arc<Tensor>,
    pub(crate) op: Op,
    pub(crate) tracked: bool,
    grad: Option<Vec<f64>>,
}

/// Single-owner record of executed ops.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
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

    /// Untracked constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf_shared(Arc::new(value), false)
    }

    /// Tracked leaf that accumulates a gradient on backward.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf_shared(Arc::new(value), true)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        #[cfg(debug_assertions)]
        {
            let finite_inputs = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(
                !finite_inputs || value.is_finite(),
                "non-finite output from {op:?}"
            );
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let value = self.value(loss);
        if value.numel() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_with(loss, &Tensor::full(value.shape(), 1.0))
    }

    /// Reverse pass from an arbitrary output with an upstream adjoint.
    pub fn backward_with(&mut self, output: Var, seed: &Tensor) -> Result<()> {
        if seed.shape() != self.shape(output) {
            return Err(NumericsError::Shape {
                op: "backward",
                lhs: self.shape(output).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        if !self.nodes[output.0].tracked {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed.data().to_vec());
        let mut leaf_grads = Vec::new();
        for id in (0..=output.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                leaf_grads.push((id, g));
            } else {
                self.apply_rule(id, &g, &mut adj);
            }
        }
        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return None;
        }
        let n = node.value.numel();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn apply_rule(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(adj, v) {
                        add_into(s, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(adj, *a) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(adj, *b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(adj, *a) {
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if let Some(s) = self.slot(adj, *b) {
                    for i in 0..g.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(adj, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
                }
            }
            Op::ScaleBy(a, c) => {
                let cv = self.value(*c).item();
                let av = self.value(*a).data();
                if let Some(s) = self.slot(adj, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += cv * g);
                }
                if let Some(s) = self.slot(adj, *c) {
                    s[0] += g.iter().zip(av).map(|(g, a)| g * a).sum::<f64>();
                }
            }
            Op::Exp(a) => {
                if let Some(s) = self.slot(adj, *a) {
                    for i in 0..g.len() {
                        s[i] += g[i] * y[i];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(adj, *a) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(adj, *a) {
                    matmul_nt_acc(g, bv, s, m, n, k);
                }
                if let Some(s) = self.slot(adj, *b) {
                    matmul_tn_acc(av, g, s, k, m, n);
                }
            }
            Op::Transpose { a, rows, cols } => {
                if let Some(s) = self.slot(adj, *a) {
                    for i in 0..*rows {
                        for j in 0..*cols {
                            s[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(adj, *a) {
                    add_into(s, g);
                }
            }
            Op::AddBias { a, bias } => {
                if let Some(s) = self.slot(adj, *a) {
                    add_into(s, g);
                }
                let n = self.value(*bias).numel();
                if let Some(s) = self.slot(adj, *bias) {
                    for row in g.chunks_exact(n) {
                        add_into(s, row);
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.rows_cols().1;
                if let Some(s) = self.slot(adj, *a) {
                    for ((s, gy), yy) in s.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: f64 = gy.iter().zip(yy).map(|(g, y)| g * y).sum();
                        for j in 0..n {
                            s[j] += yy[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                if let Some(s) = self.slot(adj, *a) {
                    for i in 0..g.len() {
                        let x = xv[i];
                        s[i] += g[i] * (normal_cdf(x) + x * normal_pdf(x));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.rows_cols().1;
                let gam = self.value(*gamma).data();
                if let Some(s) = self.slot(adj, *x) {
                    for (r, ((s, gy), xh)) in s
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = gy[j] * gam[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            s[j] += rstd[r] * (gy[j] * gam[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if let Some(s) = self.slot(adj, *gamma) {
                    for (gy, xh) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            s[j] += gy[j] * xh[j];
                        }
                    }
                }
                if let Some(s) = self.slot(adj, *beta) {
                    for gy in g.chunks_exact(n) {
                        add_into(s, gy);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let n = node.value.rows_cols().1;
                if let Some(s) = self.slot(adj, *x) {
                    for (r, ((s, gy), yy)) in s
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                        .enumerate()
                    {
                        let dot: f64 = gy.iter().zip(yy).map(|(g, y)| g * y).sum();
                        for j in 0..n {
                            s[j] += (gy[j] - yy[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::SliceRows { a, offset } => {
                if let Some(s) = self.slot(adj, *a) {
                    add_into(&mut s[*offset..*offset + g.len()], g);
                }
            }
            Op::SliceCols { a, start, cols } => {
                let width = node.value.rows_cols().1;
                if let Some(s) = self.slot(adj, *a) {
                    for (r, gy) in g.chunks_exact(width).enumerate() {
                        add_into(&mut s[r * cols + start..r * cols + start + width], gy);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(s) = self.slot(adj, *p) {
                        add_into(s, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.rows_cols().1;
                let mut start = 0;
                for p in parts {
                    let (rows, w) = self.value(*p).rows_cols();
                    if let Some(s) = self.slot(adj, *p) {
                        for r in 0..rows {
                            add_into(&mut s[r * w..(r + 1) * w], &g[r * total + start..r * total + start + w]);
                        }
                    }
                    start += w;
                }
            }
            Op::ConcatChannels(parts) => {
                let shape = node.value.shape();
                let (batch, total_c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut c0 = 0;
                for p in parts {
                    let c = self.value(*p).shape()[1];
                    if let Some(s) = self.slot(adj, *p) {
                        for b in 0..batch {
                            let src = &g[(b * total_c + c0) * hw..(b * total_c + c0 + c) * hw];
                            add_into(&mut s[b * c * hw..(b + 1) * c * hw], src);
                        }
                    }
                    c0 += c;
                }
            }
            Op::Pointwise { x, w, b } => {
                let xs = self.value(*x).shape();
                let (batch, cin, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let cout = node.value.shape()[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if let Some(s) = self.slot(adj, *x) {
                    for bi in 0..batch {
                        let gb = &g[bi * cout * hw..(bi + 1) * cout * hw];
                        matmul_tn_acc(wv, gb, &mut s[bi * cin * hw..(bi + 1) * cin * hw], cin, cout, hw);
                    }
                }
                if let Some(s) = self.slot(adj, *w) {
                    for bi in 0..batch {
                        let gb = &g[bi * cout * hw..(bi + 1) * cout * hw];
                        let xb = &xv[bi * cin * hw..(bi + 1) * cin * hw];
                        matmul_nt_acc(gb, xb, s, cout, hw, cin);
                    }
                }
                if let Some(b) = b {
                    if let Some(s) = self.slot(adj, *b) {
                        for (i, plane) in g.chunks_exact(hw).enumerate() {
                            s[i % cout] += plane.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Depthwise { x, w, b, k } => {
                let xs = self.value(*x).shape();
                let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let k = *k;
                let pad = k / 2;
                if let Some(s) = self.slot(adj, *x) {
                    for plane in 0..batch * c {
                        let ch = plane % c;
                        let kern = &wv[ch * k * k..(ch + 1) * k * k];
                        let gp = &g[plane * h * wd..(plane + 1) * h * wd];
                        let sp = &mut s[plane * h * wd..(plane + 1) * h * wd];
                        depthwise_scatter(gp, kern, sp, h, wd, k, pad);
                    }
                }
                if let Some(s) = self.slot(adj, *w) {
                    for plane in 0..batch * c {
                        let ch = plane % c;
                        let gp = &g[plane * h * wd..(plane + 1) * h * wd];
                        let xp = &xv[plane * h * wd..(plane + 1) * h * wd];
                        let sk = &mut s[ch * k * k..(ch + 1) * k * k];
                        for u in 0..k {
                            for v in 0..k {
                                let mut acc = 0.0;
                                for i in 0..h {
                                    let ii = i as isize + u as isize - pad as isize;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for j in 0..wd {
                                        let jj = j as isize + v as isize - pad as isize;
                                        if jj < 0 || jj >= wd as isize {
                                            continue;
                                        }
                                        acc += gp[i * wd + j] * xp[ii as usize * wd + jj as usize];
                                    }
                                }
                                sk[u * k + v] += acc;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(s) = self.slot(adj, *b) {
                        for (plane, gp) in g.chunks_exact(h * wd).enumerate() {
                            s[plane % c] += gp.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(s) = self.slot(adj, *x) {
                    for (i, &src) in argmax.iter().enumerate() {
                        s[src] += g[i];
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(s) = self.slot(adj, *x) {
                    for i in 0..g.len() {
                        s[i] += g[i] * mask[i];
                    }
                }
            }
            Op::SubChannelBroadcast { x, r } => {
                let shape = node.value.shape();
                let (batch, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                if let Some(s) = self.slot(adj, *x) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(adj, *r) {
                    for b in 0..batch {
                        let sb = &mut s[b * hw..(b + 1) * hw];
                        for ch in 0..c {
                            let gp = &g[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                            sb.iter_mut().zip(gp).for_each(|(s, g)| *s -= g);
                        }
                    }
                }
            }
            Op::MulChannel { x, s: scale } => {
                let shape = node.value.shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                let (xv, sv) = (self.value(*x).data(), self.value(*scale).data());
                if let Some(s) = self.slot(adj, *x) {
                    for (plane, (sp, gp)) in s.chunks_exact_mut(hw).zip(g.chunks_exact(hw)).enumerate() {
                        let f = sv[plane % c];
                        sp.iter_mut().zip(gp).for_each(|(s, g)| *s += f * g);
                    }
                }
                if let Some(s) = self.slot(adj, *scale) {
                    for (plane, (xp, gp)) in xv.chunks_exact(hw).zip(g.chunks_exact(hw)).enumerate() {
                        s[plane % c] += xp.iter().zip(gp).map(|(x, g)| x * g).sum::<f64>();
                    }
                }
            }
            Op::Top1Mask { g: gate, keep } => {
                let e = node.value.rows_cols().1;
                if let Some(s) = self.slot(adj, *gate) {
                    for (row, &j) in keep.iter().enumerate() {
                        s[row * e + j] += g[row * e + j];
                    }
                }
            }
            Op::Route {
                x,
                gate,
                weights,
                biases,
                assign,
                pre,
            } => self.route_backward(g, adj, *x, *gate, weights, biases, assign, pre),
            Op::DiagCrossEntropy { logits, probs } => {
                let n = self.value(*logits).shape()[0];
                let f = g[0] / n as f64;
                if let Some(s) = self.slot(adj, *logits) {
                    for i in 0..n {
                        for j in 0..n {
                            let delta = if i == j { 1.0 } else { 0.0 };
                            s[i * n + j] += f * (probs[i * n + j] - delta);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn route_backward(
        &self,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        x: Var,
        gate: Var,
        weights: &[Var],
        biases: &[Var],
        assign: &[usize],
        pre: &[f64],
    ) {
        let (n, d_in) = self.value(x).rows_cols();
        let d_out = pre.len() / n.max(1);
        let e_count = weights.len();
        let gate_v = self.value(gate).data();
        let xv = self.value(x).data();

        if let Some(s) = self.slot(adj, gate) {
            for i in 0..n {
                let e = assign[i];
                let row = i * d_out..(i + 1) * d_out;
                s[i * e_count + e] += g[row.clone()].iter().zip(&pre[row]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        for e in 0..e_count {
            let rows: Vec<usize> = (0..n).filter(|&i| assign[i] == e).collect();
            if rows.is_empty() {
                continue;
            }
            let mut dpre = Vec::with_capacity(rows.len() * d_out);
            for &i in &rows {
                let ge = gate_v[i * e_count + e];
                dpre.extend(g[i * d_out..(i + 1) * d_out].iter().map(|v| ge * v));
            }
            if self.nodes[x.0].tracked {
                let wv = self.value(weights[e]).data();
                let mut dx = vec![0.0; rows.len() * d_in];
                matmul_nt_acc(&dpre, wv, &mut dx, rows.len(), d_out, d_in);
                let s = self.slot(adj, x).expect("tracked");
                for (r, &i) in rows.iter().enumerate() {
                    add_into(&mut s[i * d_in..(i + 1) * d_in], &dx[r * d_in..(r + 1) * d_in]);
                }
            }
            if self.nodes[weights[e].0].tracked {
                let xe: Vec<f64> = rows.iter().flat_map(|&i| xv[i * d_in..(i + 1) * d_in].iter().copied()).collect();
                let s = self.slot(adj, weights[e]).expect("tracked");
                matmul_tn_acc(&xe, &dpre, s, d_in, rows.len(), d_out);
            }
            if let Some(s) = self.slot(adj, biases[e]) {
                for row in dpre.chunks_exact(d_out) {
                    add_into(s, row);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Adjoint of a same-padded depthwise correlation for one plane.
fn depthwise_scatter(g: &[f64], kern: &[f64], dx: &mut [f64], h: usize, w: usize, k: usize, pad: usize) {
    for i in 0..h {
        for j in 0..w {
            let gij = g[i * w + j];
            if gij == 0.0 {
                continue;
            }
            for u in 0..k {
                let ii = i as isize + u as isize - pad as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for v in 0..k {
                    let jj = j as isize + v as isize - pad as isize;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    dx[ii as usize * w + jj as usize] += kern[u * k + v] * gij;
                }
            }
        }
    }
}
