//! Forward rules. Each method validates shapes, computes the output and
//! records what its backward rule needs.

use rand::Rng;

use crate::error::{NumericsError, Result};
use crate::kernels::{matmul, matmul_acc, normal_cdf, transpose};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

/// Kernel configuration for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug)]
pub enum ConvMode {
    /// `w: [C_out × C_in]`
    Pointwise { w: Var, b: Option<Var> },
    /// `w: [C × k × k]`, one filter per channel.
    Depthwise { w: Var, b: Option<Var> },
    /// Depthwise `k×k` followed by pointwise.
    Separable {
        dw: Var,
        dw_b: Option<Var>,
        pw: Var,
        pw_b: Option<Var>,
    },
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    fn dims<const N: usize>(&self, op: &'static str, v: Var) -> Result<[usize; N]> {
        let shape = self.shape(v);
        shape.try_into().map_err(|_| NumericsError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("expected rank {N}"),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| c * x);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Multiplies every element by the one-element tensor `c`.
    pub fn scale_by(&mut self, a: Var, c: Var) -> Result<Var> {
        if self.value(c).numel() != 1 {
            return Err(NumericsError::Shape {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(c).to_vec(),
            });
        }
        let cv = self.value(c).item();
        let out = self.map(a, |x| cv * x);
        Ok(self.push(out, Op::ScaleBy(a, c), &[a, c]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.dims("matmul", a)?;
        let [k2, n] = self.dims("matmul", b)?;
        if k != k2 {
            return Err(NumericsError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [rows, cols] = self.dims("transpose", a)?;
        let out = Tensor::new(vec![cols, rows], transpose(self.value(a).data(), rows, cols))?;
        Ok(self.push(out, Op::Transpose { a, rows, cols }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Adds `bias[n]` to every trailing row of `a[..×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(a).rows_cols();
        if self.shape(bias) != [n] {
            return Err(NumericsError::Shape {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        let bv = self.value(bias).data();
        for row in out.data_mut().chunks_exact_mut(n) {
            row.iter_mut().zip(bv).for_each(|(x, b)| *x += b);
        }
        Ok(self.push(out, Op::AddBias { a, bias }, &[a, bias]))
    }

    /// `x · w + b` for `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_finite() {
            return Err(NumericsError::NonFinite("softmax"));
        }
        let (_, n) = av.rows_cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x * normal_cdf(x));
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, n) = self.value(x).rows_cols();
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(NumericsError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scales each trailing row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (_, n) = self.value(x).rows_cols();
        let mut out = self.value(x).clone();
        let mut norms = Vec::new();
        for row in out.data_mut().chunks_exact_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(NumericsError::InvalidShape {
                op: "slice_rows",
                shape,
                reason: format!("rows {start}..{}", start + len),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::SliceRows { a, offset: start * inner }, &[a]))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [rows, cols] = self.dims("slice_cols", a)?;
        if start + len > cols {
            return Err(NumericsError::InvalidShape {
                op: "slice_cols",
                shape: vec![rows, cols],
                reason: format!("cols {start}..{}", start + len),
            });
        }
        let av = self.value(a).data();
        let data = (0..rows)
            .flat_map(|r| av[r * cols + start..r * cols + start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(out, Op::SliceCols { a, start, cols }, &[a]))
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(NumericsError::Shape {
                    op: "concat_rows",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Concatenation of matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let [rows, _] = self.dims("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let [r, c] = self.dims("concat_cols", p)?;
            if r != rows {
                return Err(NumericsError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Concatenation of `B×C_i×H×W` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let [b, _, h, w] = self.dims("concat_channels", parts[0])?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pb, pc, ph, pw] = self.dims("concat_channels", p)?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(NumericsError::Shape {
                    op: "concat_channels",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: vec![pb, pc, ph, pw],
                });
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for (&p, &c) in parts.iter().zip(&chans) {
                data.extend_from_slice(&self.value(p).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let out = Tensor::new(vec![b, total, h, w], data)?;
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), parts))
    }

    pub fn conv2d(&mut self, x: Var, mode: ConvMode) -> Result<Var> {
        match mode {
            ConvMode::Pointwise { w, b } => self.conv_pointwise(x, w, b),
            ConvMode::Depthwise { w, b } => self.conv_depthwise(x, w, b),
            ConvMode::Separable { dw, dw_b, pw, pw_b } => {
                let y = self.conv_depthwise(x, dw, dw_b)?;
                self.conv_pointwise(y, pw, pw_b)
            }
        }
    }

    /// 1×1 convolution, `w: [C_out × C_in]`.
    pub fn conv_pointwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, cin, h, wd] = self.dims("conv_pointwise", x)?;
        let [cout, wcin] = self.dims("conv_pointwise", w)?;
        if wcin != cin {
            return Err(NumericsError::Shape {
                op: "conv_pointwise",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(NumericsError::Shape {
                    op: "conv_pointwise",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let hw = h * wd;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; batch * cout * hw];
        for bi in 0..batch {
            let ob = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, plane) in ob.chunks_exact_mut(hw).enumerate() {
                    plane.fill(bv[o]);
                }
            }
            matmul_acc(wv, &xv[bi * cin * hw..(bi + 1) * cin * hw], ob, cout, cin, hw);
        }
        let out = Tensor::new(vec![batch, cout, h, wd], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Pointwise { x, w, b }, &inputs))
    }

    /// Same-padded stride-1 depthwise correlation, `w: [C × k × k]`, `k` odd.
    pub fn conv_depthwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, c, h, wd] = self.dims("conv_depthwise", x)?;
        let [wc, k, k2] = self.dims("conv_depthwise", w)?;
        if k != k2 || k % 2 == 0 {
            return Err(NumericsError::Unsupported(format!(
                "depthwise kernel must be square with odd size, got {k}x{k2}"
            )));
        }
        if wc != c {
            return Err(NumericsError::Shape {
                op: "conv_depthwise",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(NumericsError::Shape {
                    op: "conv_depthwise",
                    lhs: vec![c],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let pad = k / 2;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; batch * c * h * wd];
        for plane in 0..batch * c {
            let ch = plane % c;
            let kern = &wv[ch * k * k..(ch + 1) * k * k];
            let xp = &xv[plane * h * wd..(plane + 1) * h * wd];
            let op = &mut out[plane * h * wd..(plane + 1) * h * wd];
            let bias = bv.map_or(0.0, |b| b[ch]);
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for u in 0..k {
                        let ii = i as isize + u as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for v in 0..k {
                            let jj = j as isize + v as isize - pad as isize;
                            if jj < 0 || jj >= wd as isize {
                                continue;
                            }
                            acc += kern[u * k + v] * xp[ii as usize * wd + jj as usize];
                        }
                    }
                    op[i * wd + j] = acc + bias;
                }
            }
        }
        let out = Tensor::new(vec![batch, c, h, wd], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Depthwise { x, w, b, k }, &inputs))
    }

    /// 3×3 max pooling, stride 1, same padding. Ties go to the first
    /// element of the window in row-major order.
    pub fn maxpool3x3(&mut self, x: Var) -> Result<Var> {
        let [batch, c, h, w] = self.dims("maxpool3x3", x)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; batch * c * h * w];
        let mut argmax = vec![0usize; batch * c * h * w];
        for plane in 0..batch * c {
            let base = plane * h * w;
            for i in 0..h {
                for j in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ii in i.saturating_sub(1)..(i + 2).min(h) {
                        for jj in j.saturating_sub(1)..(j + 2).min(w) {
                            let idx = base + ii * w + jj;
                            if best_idx == usize::MAX || xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[base + i * w + j] = best;
                    argmax[base + i * w + j] = best_idx;
                }
            }
        }
        let out = Tensor::new(vec![batch, c, h, w], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Inverted dropout. Identity when not training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// `x − r` with `r: [B×1×H×W]` broadcast over channels.
    pub fn sub_channel_broadcast(&mut self, x: Var, r: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims("sub_channel_broadcast", x)?;
        if self.shape(r) != [b, 1, h, w] {
            return Err(NumericsError::Shape {
                op: "sub_channel_broadcast",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(r).to_vec(),
            });
        }
        let hw = h * w;
        let rv = self.value(r).data();
        let mut out = self.value(x).clone();
        for (plane, op) in out.data_mut().chunks_exact_mut(hw).enumerate() {
            let rp = &rv[(plane / c) * hw..(plane / c + 1) * hw];
            op.iter_mut().zip(rp).for_each(|(o, r)| *o -= r);
        }
        Ok(self.push(out, Op::SubChannelBroadcast { x, r }, &[x, r]))
    }

    /// `s[c] · x[b,c,h,w]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let [_, c, h, w] = self.dims("mul_channel", x)?;
        if self.shape(s) != [c] {
            return Err(NumericsError::Shape {
                op: "mul_channel",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (plane, op) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
            let f = sv[plane % c];
            op.iter_mut().for_each(|o| *o *= f);
        }
        Ok(self.push(out, Op::MulChannel { x, s }, &[x, s]))
    }

    /// Zeroes all but the largest entry of each row; ties keep the lowest
    /// index. The surviving entry is passed through unchanged.
    pub fn top1_mask(&mut self, g: Var) -> Result<Var> {
        let [_, e] = self.dims("top1_mask", g)?;
        let gv = self.value(g);
        let mut out = Tensor::zeros(gv.shape());
        let mut keep = Vec::new();
        for (src, dst) in gv.data().chunks_exact(e).zip(out.data_mut().chunks_exact_mut(e)) {
            let j = argmax_first(src);
            dst[j] = src[j];
            keep.push(j);
        }
        Ok(self.push(out, Op::Top1Mask { g, keep }, &[g]))
    }

    /// Sparse mixture of per-expert affine maps: row `i` of the output is
    /// `gate[i, e] · (x[i] · w_e + b_e)` where `e` is the single nonzero
    /// entry of `gate[i]`. Only the selected expert is evaluated per row.
    pub fn route(&mut self, x: Var, gate: Var, weights: &[Var], biases: &[Var]) -> Result<Var> {
        let [n, d_in] = self.dims("route", x)?;
        let [gn, e_count] = self.dims("route", gate)?;
        if gn != n || e_count != weights.len() || e_count != biases.len() || e_count == 0 {
            return Err(NumericsError::Shape {
                op: "route",
                lhs: vec![n, d_in],
                rhs: vec![gn, e_count],
            });
        }
        let [_, d_out] = self.dims("route", weights[0])?;
        for e in 0..e_count {
            if self.shape(weights[e]) != [d_in, d_out] || self.shape(biases[e]) != [d_out] {
                return Err(NumericsError::Shape {
                    op: "route",
                    lhs: vec![d_in, d_out],
                    rhs: self.shape(weights[e]).to_vec(),
                });
            }
        }
        let gv = self.value(gate).data();
        let assign: Vec<usize> = gv.chunks_exact(e_count).map(argmax_first).collect();
        let xv = self.value(x).data();
        let mut pre = vec![0.0; n * d_out];
        for e in 0..e_count {
            let rows: Vec<usize> = (0..n).filter(|&i| assign[i] == e).collect();
            if rows.is_empty() {
                continue;
            }
            let xe: Vec<f64> = rows
                .iter()
                .flat_map(|&i| xv[i * d_in..(i + 1) * d_in].iter().copied())
                .collect();
            let ye = matmul(&xe, self.value(weights[e]).data(), rows.len(), d_in, d_out);
            let bv = self.value(biases[e]).data();
            for (r, &i) in rows.iter().enumerate() {
                for j in 0..d_out {
                    pre[i * d_out + j] = ye[r * d_out + j] + bv[j];
                }
            }
        }
        let out: Vec<f64> = (0..n * d_out)
            .map(|idx| gv[(idx / d_out) * e_count + assign[idx / d_out]] * pre[idx])
            .collect();
        let out = Tensor::new(vec![n, d_out], out)?;
        let mut inputs = vec![x, gate];
        inputs.extend_from_slice(weights);
        inputs.extend_from_slice(biases);
        Ok(self.push(
            out,
            Op::Route {
                x,
                gate,
                weights: weights.to_vec(),
                biases: biases.to_vec(),
                assign,
                pre,
            },
            &inputs,
        ))
    }

    /// Mean over rows of `−log softmax(row)[i]` for a square logit matrix
    /// whose diagonal marks the positives.
    pub fn diag_cross_entropy(&mut self, logits: Var) -> Result<Var> {
        let [n, m] = self.dims("diag_cross_entropy", logits)?;
        if n != m || n == 0 {
            return Err(NumericsError::InvalidShape {
                op: "diag_cross_entropy",
                shape: vec![n, m],
                reason: "expected a non-empty square matrix".into(),
            });
        }
        let lv = self.value(logits);
        if !lv.is_finite() {
            return Err(NumericsError::NonFinite("diag_cross_entropy"));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (i, row) in probs.chunks_exact_mut(n).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[i];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let out = Tensor::scalar(total / n as f64);
        Ok(self.push(out, Op::DiagCrossEntropy { logits, probs }, &[logits]))
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}
