//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value and enough saved state to apply the adjoint rule. Values on the
//! tape are kept in f64; [`Tensor`] inputs are widened exactly and results are
//! narrowed back to f32 when read out. A graph is built fresh for each step
//! and dropped afterwards.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{invalid, mismatch, Error, Result};

/// Lower clamp applied to arguments of `log`.
pub const LOG_FLOOR: f64 = 1e-12;
/// Lower clamp applied to denominator magnitudes in `div`.
pub const DIV_FLOOR: f64 = 1e-12;
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ResizeMode {
    Nearest,
    Bilinear,
}

enum Op {
    Leaf,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Exp(Var),
    Log(Var, f64),
    Square(Var),
    Relu(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Resize {
        x: Var,
        mode: ResizeMode,
    },
    AvgPool {
        x: Var,
        kh: usize,
        kw: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u16>,
        probs: Vec<f64>,
        count: usize,
    },
    MaskedMean {
        x: Var,
        labels: Vec<u16>,
        counts: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the batch moments.
    Train,
    /// Normalize with stored running moments.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

/// Result of [`Graph::batch_norm`]; batch moments are reported in train mode
/// so the caller can fold them into running statistics.
#[derive(Clone, Debug)]
pub struct BnOutput {
    pub y: Var,
    pub batch_mean: Option<Vec<f64>>,
    pub batch_var: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves and readout -------------------------------------------------

    /// Registers a tensor; it is differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| v as f64).collect();
        self.push(t.shape().to_vec(), value, t.requires_grad(), Op::Leaf)
    }

    /// Registers a tensor as a differentiable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| v as f64).collect();
        self.push(t.shape().to_vec(), value, true, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&v| v as f64).collect();
        self.push(t.shape().to_vec(), value, false, Op::Leaf)
    }

    /// Leaf from f64 values, used where exact perturbations matter.
    pub fn leaf_f64(&mut self, shape: &[usize], value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(invalid(format!(
                "leaf of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, requires_grad, Op::Leaf))
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Narrows a node's value to an f32 tensor.
    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.iter().map(|&x| x as f32).collect())
            .expect("node shape and value are consistent")
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let n = self.node(v);
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    /// Adjoint accumulated for `v` by the last [`Graph::backward`]; zeros
    /// where nothing flowed.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; self.node(v).value.len()],
        }
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let g = self.grad(v);
        Tensor::new(self.node(v).shape.clone(), g.into_iter().map(|x| x as f32).collect())
            .expect("gradient shape matches node")
    }

    /// Copies the adjoint of `v` into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if t.shape() != self.shape(v) {
            return Err(mismatch("write_grad", t.shape(), self.shape(v)));
        }
        t.set_grad(self.grad(v).into_iter().map(|x| x as f32).collect())
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), value, rg, op)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.values(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Elementwise quotient with the denominator magnitude clamped at
    /// [`DIV_FLOOR`].
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.binary(a, b, |x, y| x / clamp_den(y), Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::Offset(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log with the argument clamped at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.log_floor(a, LOG_FLOOR)
    }

    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor).ln(), Op::Log(a, floor))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 || x.is_nan() { x } else { 0.0 }, Op::Relu(a))
    }

    /// Stop-gradient: same value, no adjoint flows through.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.values(a).to_vec();
        self.push(self.shape(a).to_vec(), value, false, Op::Detach)
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.values(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let value = self.values(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(invalid(format!("transpose expects rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let value = kernels::transpose(self.values(a), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], value, rg, Op::Transpose(a)))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&ax| ax >= s.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(invalid(format!("permute axes {axes:?} invalid for shape {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| s[ax]).collect();
        let value = permute_values(self.values(a), &s, axes);
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, value, rg, Op::Permute(a, axes.to_vec())))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat of an empty list"))?;
        let fs = self.shape(first).to_vec();
        if axis >= fs.len() {
            return Err(invalid(format!("concat axis {axis} for shape {fs:?}")));
        }
        for &p in &parts[1..] {
            let ps = self.shape(p);
            let ok = ps.len() == fs.len()
                && ps.iter().zip(&fs).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(mismatch("concat", &fs, ps));
            }
        }
        let outer = numel(&fs[..axis]);
        let inner = numel(&fs[axis + 1..]);
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                value.extend_from_slice(&self.values(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = fs;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid(format!("narrow({axis}, {start}, {len}) out of range for {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            value.extend_from_slice(&self.values(a)[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, rg, Op::Narrow { x: a, axis, start }))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        kernels::gemm(self.values(a), self.values(b), &mut value, m, k, n, false, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, rg, Op::MatMul(a, b)))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.values(a).len();
        if n == 0 {
            return Err(Error::EmptyReduction("mean"));
        }
        let s: f64 = self.values(a).iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![], vec![s / n as f64], rg, Op::Mean(a)))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(invalid(format!("sum_axis {axis} for shape {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let d = s[axis];
        let src = self.values(a);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..d {
                let row = &src[(o * d + k) * inner..(o * d + k + 1) * inner];
                for (v, &x) in value[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *v += x;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, rg, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let d = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| invalid(format!("mean_axis {axis} for shape {:?}", self.shape(a))))?;
        if d == 0 {
            return Err(Error::EmptyReduction("mean_axis"));
        }
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / d as f64))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let last = *s.last().ok_or_else(|| invalid("softmax of a scalar"))?;
        if last == 0 {
            return Err(Error::EmptyReduction("softmax"));
        }
        let mut value = self.values(a).to_vec();
        for row in value.chunks_mut(last) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(s, value, rg, Op::Softmax(a)))
    }

    // ---- convolution and resampling ---------------------------------------

    /// 2D convolution of `(B, Cin, H, W)` with `(Cout, Cin, kh, kw)` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(mismatch("conv2d", &si, &sw));
        }
        if stride == 0 {
            return Err(invalid("conv2d stride must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(mismatch("conv2d bias", self.shape(b), &[sw[0]]));
            }
        }
        let (bsz, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(invalid(format!("conv2d kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncols) = (geom.rows(), geom.cols());
        let mut cols = vec![0.0; bsz * rows * ncols];
        let mut value = vec![0.0; bsz * cout * ncols];
        {
            let x = self.values(input);
            let wv = self.values(weight);
            for b in 0..bsz {
                let col = &mut cols[b * rows * ncols..(b + 1) * rows * ncols];
                kernels::im2col(&x[b * cin * h * w..(b + 1) * cin * h * w], &geom, col);
                let out = &mut value[b * cout * ncols..(b + 1) * cout * ncols];
                kernels::gemm(wv, col, out, cout, rows, ncols, false, false);
            }
            if let Some(bv) = bias {
                let bias = self.values(bv);
                for b in 0..bsz {
                    for (c, &bc) in bias.iter().enumerate() {
                        let base = (b * cout + c) * ncols;
                        value[base..base + ncols].iter_mut().for_each(|v| *v += bc);
                    }
                }
            }
        }
        let mut vars = vec![input, weight];
        vars.extend(bias);
        let rg = self.rg(&vars);
        Ok(self.push(
            vec![bsz, cout, geom.ho, geom.wo],
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    fn resize(&mut self, x: Var, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 || out_h == 0 || out_w == 0 {
            return Err(invalid(format!("resize of {s:?} to {out_h}x{out_w}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.values(x);
        let mut value = vec![0.0; planes * out_h * out_w];
        match mode {
            ResizeMode::Nearest => {
                let ti = kernels::nearest_taps(h, out_h);
                let tj = kernels::nearest_taps(w, out_w);
                for p in 0..planes {
                    for (oi, &i) in ti.iter().enumerate() {
                        for (oj, &j) in tj.iter().enumerate() {
                            value[(p * out_h + oi) * out_w + oj] = src[(p * h + i) * w + j];
                        }
                    }
                }
            }
            ResizeMode::Bilinear => {
                let ti = kernels::bilinear_taps(h, out_h);
                let tj = kernels::bilinear_taps(w, out_w);
                for p in 0..planes {
                    let plane = &src[p * h * w..(p + 1) * h * w];
                    for (oi, &(i0, i1, wi)) in ti.iter().enumerate() {
                        for (oj, &(j0, j1, wj)) in tj.iter().enumerate() {
                            let top = plane[i0 * w + j0] * (1.0 - wj) + plane[i0 * w + j1] * wj;
                            let bot = plane[i1 * w + j0] * (1.0 - wj) + plane[i1 * w + j1] * wj;
                            value[(p * out_h + oi) * out_w + oj] = top * (1.0 - wi) + bot * wi;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s[0], s[1], out_h, out_w], value, rg, Op::Resize { x, mode }))
    }

    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.resize(x, out_h, out_w, ResizeMode::Nearest)
    }

    /// Half-pixel bilinear resize of `(B, C, H, W)`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.resize(x, out_h, out_w, ResizeMode::Bilinear)
    }

    /// Non-overlapping average pooling with window `kh x kw`.
    pub fn avg_pool(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kh == 0 || kw == 0 || !s[2].is_multiple_of(kh) || !s[3].is_multiple_of(kw) {
            return Err(invalid(format!("avg_pool {kh}x{kw} does not tile {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / kh, w / kw);
        let src = self.values(x);
        let norm = 1.0 / (kh * kw) as f64;
        let mut value = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for i in 0..h {
                for j in 0..w {
                    value[(p * oh + i / kh) * ow + j / kw] += src[(p * h + i) * w + j] * norm;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s[0], s[1], oh, ow], value, rg, Op::AvgPool { x, kh, kw }))
    }

    // ---- normalization and losses ------------------------------------------

    /// Batch normalization of `(B, C, ...)` over every axis but the channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<BnOutput> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(invalid(format!("batch_norm expects (B, C, ...), got {s:?}")));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batch_norm affine", &[c], self.shape(gamma)));
        }
        let b = s[0];
        let inner = numel(&s[2..]);
        let count = b * inner;
        if count == 0 {
            return Err(Error::EmptyReduction("batch_norm"));
        }
        let xv = self.values(x);
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut sq = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let row = &xv[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
                        mean[ci] += row.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for bi in 0..b {
                    for ci in 0..c {
                        let row = &xv[(bi * c + ci) * inner..(bi * c + ci + 1) * inner];
                        sq[ci] += row.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                    }
                }
                sq.iter_mut().for_each(|v| *v /= count as f64);
                (mean, sq, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch("batch_norm running stats", &[c], &[mean.len()]));
                }
                (
                    mean.iter().map(|&v| v as f64).collect(),
                    var.iter().map(|&v| v as f64).collect(),
                    false,
                )
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = self.values(gamma);
        let bv = self.values(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut value = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                for k in base..base + inner {
                    xhat[k] = (xv[k] - mean[ci]) * inv_std[ci];
                    value[k] = gv[ci] * xhat[k] + bv[ci];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let y = self.push(
            s,
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok(BnOutput {
            y,
            batch_mean: train.then_some(mean),
            batch_var: train.then_some(var),
        })
    }

    /// Mean cross-entropy over the class axis (axis 1) of `(B, K, ...)`
    /// logits. Targets equal to `ignore` are excluded.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u16], ignore: u16) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() < 2 {
            return Err(invalid(format!("cross_entropy expects (B, K, ...), got {s:?}")));
        }
        let (b, k) = (s[0], s[1]);
        let inner = numel(&s[2..]);
        if targets.len() != b * inner {
            return Err(mismatch("cross_entropy", &s, &[targets.len()]));
        }
        let lv = self.values(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0;
        for bi in 0..b {
            for p in 0..inner {
                let idx = |c: usize| (bi * k + c) * inner + p;
                let m = (0..k).map(|c| lv[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (lv[idx(c)] - m).exp()).sum();
                for c in 0..k {
                    probs[idx(c)] = (lv[idx(c)] - m).exp() / z;
                }
                let t = targets[bi * inner + p];
                if t == ignore {
                    continue;
                }
                if t as usize >= k {
                    return Err(invalid(format!("target class {t} outside 0..{k}")));
                }
                total += z.ln() + m - lv[idx(t as usize)];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyReduction("cross_entropy"));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![total / count as f64],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Per-class mean of the columns of `x: (C, N)` selected by `labels`
    /// (length N, values in `0..=k`, `k` meaning ignored). Returns the
    /// `(k, C)` means and per-class counts; empty classes yield zero rows.
    pub fn masked_mean(&mut self, x: Var, labels: &[u16], k: usize) -> Result<(Var, Vec<usize>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] != labels.len() {
            return Err(mismatch("masked_mean", &s, &[labels.len()]));
        }
        let (c, n) = (s[0], s[1]);
        let mut counts = vec![0usize; k];
        for &l in labels {
            match (l as usize).cmp(&k) {
                std::cmp::Ordering::Less => counts[l as usize] += 1,
                std::cmp::Ordering::Equal => {}
                std::cmp::Ordering::Greater => {
                    return Err(invalid(format!("label {l} exceeds ignore id {k}")));
                }
            }
        }
        let xv = self.values(x);
        let mut value = vec![0.0; k * c];
        for ci in 0..c {
            for (p, &l) in labels.iter().enumerate() {
                if (l as usize) < k {
                    value[l as usize * c + ci] += xv[ci * n + p];
                }
            }
        }
        for (cls, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                value[cls * c..(cls + 1) * c].iter_mut().for_each(|v| *v /= cnt as f64);
            }
        }
        let rg = self.rg(&[x]);
        let out = self.push(
            vec![k, c],
            value,
            rg,
            Op::MaskedMean {
                x,
                labels: labels.to_vec(),
                counts: counts.clone(),
            },
        );
        Ok((out, counts))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates adjoints from the scalar `loss` to every node that requires
    /// a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(invalid(format!(
                "backward from a non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.apply_adjoint(i, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn apply_adjoint(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / clamp_den(bv[k]);
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        if bv[k].abs() >= DIV_FLOOR {
                            d[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                        }
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::Offset(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k];
                    }
                });
            }
            Op::Log(a, floor) => {
                let xv = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] > *floor {
                            d[k] += g[k] / xv[k];
                        }
                    }
                });
            }
            Op::Square(a) => {
                let xv = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += 2.0 * xv[k] * g[k];
                    }
                });
            }
            Op::Relu(a) => {
                let xv = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let last = *node.shape.last().unwrap();
                acc(*a, &mut |d| {
                    for ((dr, yr), gr) in d.chunks_mut(last).zip(y.chunks(last)).zip(g.chunks(last)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for k in 0..last {
                            dr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let gt = kernels::transpose(g, c, r);
                acc(*a, &mut |d| add_into(d, &gt));
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let gp = permute_values(g, &node.shape, &inverse);
                acc(*a, &mut |d| add_into(d, &gp));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| kernels::gemm(g, bv, d, m, n, k, false, true));
                acc(*b, &mut |d| kernels::gemm(av, g, d, k, m, n, true, false));
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumAxis(a, axis) => {
                let s = &nodes[a.0].shape;
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let dim = s[*axis];
                acc(*a, &mut |d| {
                    for o in 0..outer {
                        for k in 0..dim {
                            let row = &mut d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                            add_into(row, &g[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let bsz = nodes[input.0].shape[0];
                let cout = nodes[weight.0].shape[0];
                let (rows, ncols) = (geom.rows(), geom.cols());
                let plane = geom.cin * geom.h * geom.w;
                acc(*weight, &mut |d| {
                    for b in 0..bsz {
                        let gb = &g[b * cout * ncols..(b + 1) * cout * ncols];
                        let col = &cols[b * rows * ncols..(b + 1) * rows * ncols];
                        kernels::gemm(gb, col, d, cout, ncols, rows, false, true);
                    }
                });
                if let Some(bv) = bias {
                    acc(*bv, &mut |d| {
                        for b in 0..bsz {
                            for (c, dc) in d.iter_mut().enumerate() {
                                let base = (b * cout + c) * ncols;
                                *dc += g[base..base + ncols].iter().sum::<f64>();
                            }
                        }
                    });
                }
                let wv = &nodes[weight.0].value;
                acc(*input, &mut |d| {
                    let mut dcol = vec![0.0; rows * ncols];
                    for b in 0..bsz {
                        dcol.iter_mut().for_each(|v| *v = 0.0);
                        let gb = &g[b * cout * ncols..(b + 1) * cout * ncols];
                        kernels::gemm(wv, gb, &mut dcol, rows, cout, ncols, true, false);
                        kernels::col2im(&dcol, geom, &mut d[b * plane..(b + 1) * plane]);
                    }
                });
            }
            Op::Resize { x, mode } => {
                let s = &nodes[x.0].shape;
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                acc(*x, &mut |d| match mode {
                    ResizeMode::Nearest => {
                        let ti = kernels::nearest_taps(h, oh);
                        let tj = kernels::nearest_taps(w, ow);
                        for p in 0..planes {
                            for (oi, &i) in ti.iter().enumerate() {
                                for (oj, &j) in tj.iter().enumerate() {
                                    d[(p * h + i) * w + j] += g[(p * oh + oi) * ow + oj];
                                }
                            }
                        }
                    }
                    ResizeMode::Bilinear => {
                        let ti = kernels::bilinear_taps(h, oh);
                        let tj = kernels::bilinear_taps(w, ow);
                        for p in 0..planes {
                            let plane = &mut d[p * h * w..(p + 1) * h * w];
                            for (oi, &(i0, i1, wi)) in ti.iter().enumerate() {
                                for (oj, &(j0, j1, wj)) in tj.iter().enumerate() {
                                    let gv = g[(p * oh + oi) * ow + oj];
                                    plane[i0 * w + j0] += gv * (1.0 - wi) * (1.0 - wj);
                                    plane[i0 * w + j1] += gv * (1.0 - wi) * wj;
                                    plane[i1 * w + j0] += gv * wi * (1.0 - wj);
                                    plane[i1 * w + j1] += gv * wi * wj;
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool { x, kh, kw } => {
                let s = &nodes[x.0].shape;
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / kh, w / kw);
                let norm = 1.0 / (kh * kw) as f64;
                acc(*x, &mut |d| {
                    for p in 0..planes {
                        for i in 0..h {
                            for j in 0..w {
                                d[(p * h + i) * w + j] += g[(p * oh + i / kh) * ow + j / kw] * norm;
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[axis + 1..]);
                let total = node.shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].shape[*axis];
                    acc(*p, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = &nodes[x.0].shape;
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let (dim, len) = (s[*axis], node.shape[*axis]);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = &node.shape;
                let (b, c) = (s[0], s[1]);
                let inner = numel(&s[2..]);
                let count = (b * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        for k in base..base + inner {
                            sum_g[ci] += g[k];
                            sum_gx[ci] += g[k] * xhat[k];
                        }
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                acc(*beta, &mut |d| add_into(d, &sum_g));
                let gv = &nodes[gamma.0].value;
                acc(*x, &mut |d| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * inner;
                            let scale = gv[ci] * inv_std[ci];
                            for k in base..base + inner {
                                d[k] += if *train {
                                    scale * (g[k] - sum_g[ci] / count - xhat[k] * sum_gx[ci] / count)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let s = &nodes[logits.0].shape;
                let (b, k) = (s[0], s[1]);
                let inner = numel(&s[2..]);
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |d| {
                    for bi in 0..b {
                        for p in 0..inner {
                            let t = targets[bi * inner + p] as usize;
                            if t >= k {
                                continue;
                            }
                            for c in 0..k {
                                let idx = (bi * k + c) * inner + p;
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                d[idx] += scale * (probs[idx] - onehot);
                            }
                        }
                    }
                });
            }
            Op::MaskedMean { x, labels, counts } => {
                let (c, n) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let k = counts.len();
                acc(*x, &mut |d| {
                    for ci in 0..c {
                        for (p, &l) in labels.iter().enumerate() {
                            let l = l as usize;
                            if l < k {
                                d[ci * n + p] += g[l * c + ci] / counts[l] as f64;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn clamp_den(y: f64) -> f64 {
    if y.abs() >= DIV_FLOOR {
        y
    } else if y < 0.0 {
        -DIV_FLOOR
    } else {
        DIV_FLOOR
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn permute_values(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_with_identity() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.values(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[1, 3]));
        let y = g.softmax(x).unwrap();
        for &v in g.values(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[4, 5]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn empty_reductions_are_rejected() {
        let mut g = Graph::new();
        let e = g.constant(&Tensor::zeros(&[0]));
        assert!(matches!(g.mean(e), Err(Error::EmptyReduction(_))));
        let logits = g.constant(&Tensor::zeros(&[1, 3, 2]));
        assert!(matches!(
            g.cross_entropy(logits, &[3, 3], 3),
            Err(Error::EmptyReduction(_))
        ));
    }

    #[test]
    fn log_clamps_and_stays_finite() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[0.0, -1.0, 1.0]));
        let y = g.log(x);
        assert!(g.values(y).iter().all(|v| v.is_finite()));
        assert_eq!(g.values(y)[0], LOG_FLOOR.ln());
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn div_clamps_denominator() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2], &[1.0, 1.0]));
        let b = g.constant(&t(&[2], &[0.0, 2.0]));
        let y = g.div(a, b).unwrap();
        assert_eq!(g.values(y), &[1e12, 0.5]);
    }

    #[test]
    fn detach_blocks_adjoint() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.square(x);
        let stopped = g.detach(sq);
        let y = g.mul(stopped, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        // only the direct path contributes: d/dx (c * x) = c = x^2
        assert_eq!(g.grad(x), vec![1.0, 4.0, 9.0]);
        assert!(g.grad(stopped).iter().all(|&v| v == 0.0) || !g.requires_grad(stopped));
        assert!(g.grad(sq).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_eval_maps_running_mean_to_shift() {
        let mut g = Graph::new();
        let mu = [0.7f32, -1.5];
        let var = [2.0f32, 0.25];
        let mut data = vec![];
        for _ in 0..2 {
            for &m in &mu {
                data.extend(std::iter::repeat_n(m, 6));
            }
        }
        let x = g.constant(&t(&[2, 2, 2, 3], &data));
        let gamma = g.constant(&t(&[2], &[1.3, -0.4]));
        let beta = g.constant(&t(&[2], &[0.25, 3.0]));
        let out = g
            .batch_norm(x, gamma, beta, BnMode::Eval { mean: &mu, var: &var })
            .unwrap();
        let y = g.values(out.y);
        for bi in 0..2 {
            for (ci, shift) in [0.25, 3.0].iter().enumerate() {
                for k in 0..6 {
                    assert!((y[(bi * 2 + ci) * 6 + k] - shift).abs() < 1e-5);
                }
            }
        }
        assert!(out.batch_mean.is_none());
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::from_fn(&[2, 3, 4], |i| i as f32));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.values(back), g.values(x));
        // element (i=1, j=2, k=3) lands at (3, 1, 2)
        let v = g.values(p)[(3 * 2 + 1) * 3 + 2];
        assert_eq!(v, ((3 + 2) * 4 + 3) as f64);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::from_fn(&[1, 1, 3, 4], |i| i as f32));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(&t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.values(y), g.values(x));
        let y2 = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y2), &[1, 1, 2, 2]);
        assert_eq!(g.values(y2), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn masked_mean_counts_and_ignores() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let (m, counts) = g.masked_mean(x, &[0, 0, 1, 2], 2).unwrap();
        assert_eq!(counts, vec![2, 1]);
        assert_eq!(g.values(m), &[1.5, 3.0]);
    }
}
