//! Dense f32 arrays, the differentiation tape built on top of them, and the
//! PTNS container format.

mod gradcheck;
mod graph;
mod kernels;
pub mod ptns;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{BnMode, BnOutput, Graph, Var};

use crate::error::{invalid, mismatch, Result};

/// Row-major f32 array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} holds {numel} elements but {} values were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(&[], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Stores a gradient buffer; it must match the data length.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(mismatch("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(mismatch("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: None,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(invalid(format!(
                "narrow({axis}, {start}, {len}) out of range for shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, data)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat of an empty list"))?;
        if axis >= first.rank() {
            return Err(invalid(format!("concat axis {axis} for rank {}", first.rank())));
        }
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &first.shape, &p.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::new(shape, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("stack of an empty list"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(mismatch("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(mismatch("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Half-pixel bilinear resize of the two trailing axes.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (lead, h, w) = self.trailing_plane("resize_bilinear", out_h, out_w)?;
        let ti = kernels::bilinear_taps(h, out_h);
        let tj = kernels::bilinear_taps(w, out_w);
        let mut data = Vec::with_capacity(lead * out_h * out_w);
        for plane in self.data.chunks(h * w) {
            for &(i0, i1, wi) in &ti {
                for &(j0, j1, wj) in &tj {
                    let at = |i: usize, j: usize| plane[i * w + j] as f64;
                    let top = at(i0, j0) * (1.0 - wj) + at(i0, j1) * wj;
                    let bot = at(i1, j0) * (1.0 - wj) + at(i1, j1) * wj;
                    data.push((top * (1.0 - wi) + bot * wi) as f32);
                }
            }
        }
        self.with_plane(out_h, out_w, data)
    }

    /// Nearest-neighbour resize of the two trailing axes.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (lead, h, w) = self.trailing_plane("resize_nearest", out_h, out_w)?;
        let ti = kernels::nearest_taps(h, out_h);
        let tj = kernels::nearest_taps(w, out_w);
        let mut data = Vec::with_capacity(lead * out_h * out_w);
        for plane in self.data.chunks(h * w) {
            for &i in &ti {
                data.extend(tj.iter().map(|&j| plane[i * w + j]));
            }
        }
        self.with_plane(out_h, out_w, data)
    }

    fn trailing_plane(&self, op: &str, out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
        let r = self.rank();
        if r < 2 || self.shape[r - 2] == 0 || self.shape[r - 1] == 0 || out_h == 0 || out_w == 0 {
            return Err(invalid(format!("{op} of {:?} to {out_h}x{out_w}", self.shape)));
        }
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        Ok((self.numel() / (h * w), h, w))
    }

    fn with_plane(&self, out_h: usize, out_w: usize, data: Vec<f32>) -> Result<Self> {
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        Tensor::new(shape, data)
    }

    pub fn mean(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(crate::Error::EmptyReduction("mean"));
        }
        Ok(self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64)
    }
}
