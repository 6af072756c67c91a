//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records primitive applications in construction order, which is
//! already a topological order. [`Graph::backward`] walks the nodes in reverse
//! and applies each primitive's vector-Jacobian product. Nodes created with
//! [`Graph::constant`] (and everything computed only from constants) are
//! skipped, so frozen weights cost nothing on the backward pass.
//!
//! Non-smooth primitives use the zero subgradient at their kinks: `abs`,
//! the L1 norm, `relu` and the complex modulus all report 0 there.

mod adam;
mod gradcheck;
mod tensor;

use std::fmt;
use std::sync::Arc;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_coord, finite_diff_grad, max_relative_error, relative_error};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear map with a known adjoint, usable as a graph primitive.
///
/// The STFT is recorded this way.
pub trait LinearMap: Send + Sync {
    fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>>;
    fn apply(&self, input: &[f64], input_shape: &[usize]) -> Vec<f64>;
    /// Transpose of [`LinearMap::apply`], mapping an output cotangent back to
    /// the input space.
    fn adjoint(&self, cotangent: &[f64], input_shape: &[usize]) -> Vec<f64>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    L1Norm(Var),
    L2NormSq(Var),
    ComplexModulus(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Conv1d { input: Var, weight: Var, bias: Option<Var> },
    Conv2d { input: Var, weight: Var, bias: Option<Var> },
    MeanPool2x2(Var),
    SpatialMean(Var),
    Linear(Var, Arc<dyn LinearMap>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L1Norm(..) => "l1_norm",
            Op::L2NormSq(..) => "l2_norm_sq",
            Op::ComplexModulus(..) => "complex_modulus",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::MeanPool2x2(..) => "mean_pool_2x2",
            Op::SpatialMean(..) => "spatial_mean",
            Op::Linear(..) => "linear_map",
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the
    /// output through differentiable nodes.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err(op: &str, detail: String) -> Error {
    Error::Dimension(format!("{op}: {detail}"))
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.record(out, op, &[a])
    }

    fn zip(&mut self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.record(out, op, &[a, b]))
    }

    fn reduce(&mut self, a: Var, op: Op, f: impl Fn(&[f64]) -> f64) -> Var {
        let v = f(self.data(a));
        self.record(Tensor::scalar(v), op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.map(a, Op::Log(a), f64::ln))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(a, Op::Sum(a), |d| d.iter().sum())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(a, Op::Mean(a), |d| d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn l1_norm(&mut self, a: Var) -> Var {
        self.reduce(a, Op::L1Norm(a), |d| d.iter().map(|v| v.abs()).sum())
    }

    pub fn l2_norm_sq(&mut self, a: Var) -> Var {
        self.reduce(a, Op::L2NormSq(a), |d| d.iter().map(|v| v * v).sum())
    }

    /// `|re + i im|` over a trailing axis of length 2.
    pub fn complex_modulus(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.last() != Some(&2) {
            return Err(dim_err(
                "complex_modulus",
                format!("trailing axis of {shape:?} is not 2"),
            ));
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        let data: Vec<f64> = self.data(a).chunks_exact(2).map(|c| c[0].hypot(c[1])).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.record(Tensor::from_parts(out_shape, data), Op::ComplexModulus(a), &[a]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(dim_err("matmul", format!("cannot multiply {sa:?} by {sb:?}"))),
        };
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        Ok(self.record(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(dim_err(
                "reshape",
                format!("{:?} to {shape:?} changes element count", self.shape(a)),
            ));
        }
        let out = Tensor::from_parts(shape.to_vec(), self.data(a).to_vec());
        Ok(self.record(out, Op::Reshape(a), &[a]))
    }

    /// Stride-1 "same" convolution (cross-correlation) over `[c_in, len]`
    /// with kernel `[c_out, c_in, k]`, `k` odd.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let geom = match (si, sw) {
            ([ci, len], [co, ci2, k]) if ci == ci2 && k % 2 == 1 => Conv2dGeom {
                c_in: *ci,
                c_out: *co,
                h: 1,
                w: *len,
                kh: 1,
                kw: *k,
            },
            _ => return Err(dim_err("conv1d", format!("input {si:?} with kernel {sw:?}"))),
        };
        self.check_bias("conv1d", bias, geom.c_out)?;
        let out = conv2d_forward(&geom, self.data(input), self.data(weight), bias.map(|b| self.data(b)));
        let shape = vec![geom.c_out, geom.w];
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.record(
            Tensor::from_parts(shape, out),
            Op::Conv1d { input, weight, bias },
            &inputs,
        ))
    }

    /// Stride-1 "same" 2-D convolution over `[c_in, h, w]` with kernel
    /// `[c_out, c_in, kh, kw]`, both kernel extents odd.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let geom = match (si, sw) {
            ([ci, h, w], [co, ci2, kh, kw]) if ci == ci2 && kh % 2 == 1 && kw % 2 == 1 => Conv2dGeom {
                c_in: *ci,
                c_out: *co,
                h: *h,
                w: *w,
                kh: *kh,
                kw: *kw,
            },
            _ => return Err(dim_err("conv2d", format!("input {si:?} with kernel {sw:?}"))),
        };
        self.check_bias("conv2d", bias, geom.c_out)?;
        let out = conv2d_forward(&geom, self.data(input), self.data(weight), bias.map(|b| self.data(b)));
        let shape = vec![geom.c_out, geom.h, geom.w];
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.record(
            Tensor::from_parts(shape, out),
            Op::Conv2d { input, weight, bias },
            &inputs,
        ))
    }

    fn check_bias(&self, op: &str, bias: Option<Var>, c_out: usize) -> Result<()> {
        match bias {
            Some(b) if self.shape(b) != [c_out] => Err(dim_err(
                op,
                format!("bias shape {:?}, expected [{c_out}]", self.shape(b)),
            )),
            _ => Ok(()),
        }
    }

    /// 2x2 average pooling over `[c, h, w]`, stride 2. Odd trailing rows and
    /// columns form partial windows averaged over their in-bounds cells.
    pub fn mean_pool_2x2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(a) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(dim_err("mean_pool_2x2", format!("expected [c, h, w], got {s:?}"))),
        };
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let x = self.data(a);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let rows = (2 * oy)..(2 * oy + 2).min(h);
                for ox in 0..ow {
                    let cols = (2 * ox)..(2 * ox + 2).min(w);
                    let count = (rows.len() * cols.len()) as f64;
                    let mut acc = 0.0;
                    for iy in rows.clone() {
                        for ix in cols.clone() {
                            acc += x[(ch * h + iy) * w + ix];
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc / count;
                }
            }
        }
        Ok(self.record(Tensor::from_parts(vec![c, oh, ow], out), Op::MeanPool2x2(a), &[a]))
    }

    /// Mean over every axis but the first: `[c, ...] -> [c]`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() < 2 {
            return Err(dim_err("spatial_mean", format!("need rank >= 2, got {shape:?}")));
        }
        let c = shape[0];
        let per = self.value(a).len() / c;
        let out: Vec<f64> = self
            .data(a)
            .chunks_exact(per)
            .map(|chunk| chunk.iter().sum::<f64>() / per as f64)
            .collect();
        Ok(self.record(Tensor::from_parts(vec![c], out), Op::SpatialMean(a), &[a]))
    }

    pub fn linear_map(&mut self, a: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let out_shape = map.output_shape(&in_shape)?;
        let out = map.apply(self.data(a), &in_shape);
        Ok(self.record(Tensor::from_parts(out_shape, out), Op::Linear(a, map), &[a]))
    }

    /// Reverse-mode accumulation from a one-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward seed must be scalar, output has shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contribution: Vec<f64>| accumulate(grads, v, contribution);

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| c * v).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Tanh(a) => acc(*a, g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Relu(a) => acc(
                *a,
                g.iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Abs(a) => acc(*a, g.iter().zip(self.data(*a)).map(|(g, &x)| g * sign(x)).collect()),
            Op::Log(a) => acc(*a, g.iter().zip(self.data(*a)).map(|(g, x)| g / x).collect()),
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / n as f64; n])
            }
            Op::L1Norm(a) => acc(*a, self.data(*a).iter().map(|&x| g[0] * sign(x)).collect()),
            Op::L2NormSq(a) => acc(*a, self.data(*a).iter().map(|&x| 2.0 * g[0] * x).collect()),
            Op::ComplexModulus(a) => {
                let x = self.data(*a);
                let mut ga = vec![0.0; x.len()];
                for ((gi, &r), (pair, slot)) in g.iter().zip(out).zip(x.chunks_exact(2).zip(ga.chunks_exact_mut(2))) {
                    if r > 0.0 {
                        slot[0] = gi * pair[0] / r;
                        slot[1] = gi * pair[1] / r;
                    }
                }
                acc(*a, ga)
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    // dA = G B^T
                    let bt = transpose(self.data(*b), k, n);
                    acc(*a, matmul_kernel(g, &bt, m, n, k));
                }
                if wants(*b) {
                    // dB = A^T G
                    let at = transpose(self.data(*a), m, k);
                    acc(*b, matmul_kernel(&at, g, k, m, n));
                }
            }
            Op::Conv1d { input, weight, bias } | Op::Conv2d { input, weight, bias } => {
                let si = self.shape(*input);
                let sw = self.shape(*weight);
                let geom = if si.len() == 2 {
                    Conv2dGeom {
                        c_in: si[0],
                        c_out: sw[0],
                        h: 1,
                        w: si[1],
                        kh: 1,
                        kw: sw[2],
                    }
                } else {
                    Conv2dGeom {
                        c_in: si[0],
                        c_out: sw[0],
                        h: si[1],
                        w: si[2],
                        kh: sw[2],
                        kw: sw[3],
                    }
                };
                if wants(*input) {
                    acc(*input, conv2d_input_grad(&geom, g, self.data(*weight)));
                }
                if wants(*weight) {
                    acc(*weight, conv2d_weight_grad(&geom, g, self.data(*input)));
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    let plane = geom.h * geom.w;
                    acc(b, g.chunks_exact(plane).map(|c| c.iter().sum()).collect());
                }
            }
            Op::MeanPool2x2(a) => {
                let (c, h, w) = match self.shape(*a) {
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!("shape checked at construction"),
                };
                let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                let mut ga = vec![0.0; c * h * w];
                for ch in 0..c {
                    for iy in 0..h {
                        let oy = iy / 2;
                        let rows = (2 * oy + 2).min(h) - 2 * oy;
                        for ix in 0..w {
                            let ox = ix / 2;
                            let cols = (2 * ox + 2).min(w) - 2 * ox;
                            ga[(ch * h + iy) * w + ix] = g[(ch * oh + oy) * ow + ox] / (rows * cols) as f64;
                        }
                    }
                }
                acc(*a, ga)
            }
            Op::SpatialMean(a) => {
                let c = self.shape(*a)[0];
                let per = self.value(*a).len() / c;
                let mut ga = Vec::with_capacity(c * per);
                for gc in g {
                    ga.extend(std::iter::repeat_n(gc / per as f64, per));
                }
                acc(*a, ga)
            }
            Op::Linear(a, map) => acc(*a, map.adjoint(g, self.shape(*a))),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contribution),
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Geometry of a stride-1 "same" convolution; 1-D convolutions use `h = 1`.
#[derive(Clone, Copy)]
struct Conv2dGeom {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl Conv2dGeom {
    /// Input planes with a zero border of half a kernel on every side.
    fn pad(&self, input: &[f64]) -> (Vec<f64>, usize) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let wp = self.w + 2 * pw;
        let hp = self.h + 2 * ph;
        let mut padded = vec![0.0; self.c_in * hp * wp];
        for (ci, plane) in input.chunks_exact(self.h * self.w).enumerate() {
            for (y, row) in plane.chunks_exact(self.w).enumerate() {
                let at = (ci * hp + y + ph) * wp + pw;
                padded[at..at + self.w].copy_from_slice(row);
            }
        }
        (padded, wp)
    }

    /// The geometry of the transposed convolution used for input gradients.
    fn transposed(&self) -> Self {
        Self {
            c_in: self.c_out,
            c_out: self.c_in,
            ..*self
        }
    }
}

/// The nine shifted length-`w` windows a 3x3 kernel reads for one output
/// row, starting at padded offset `at`.
fn taps3(pin: &[f64], at: usize, wp: usize, w: usize) -> [&[f64]; 9] {
    std::array::from_fn(|t| {
        let start = at + (t / 3) * wp + t % 3;
        &pin[start..start + w]
    })
}

fn conv2d_forward(g: &Conv2dGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane = g.h * g.w;
    let taps = g.kh * g.kw;
    let (padded, wp) = g.pad(input);
    let hp = g.h + 2 * (g.kh / 2);
    let mut out = vec![0.0; g.c_out * plane];
    if let Some(b) = bias {
        for (out_plane, &bv) in out.chunks_exact_mut(plane).zip(b) {
            out_plane.fill(bv);
        }
    }
    if g.kh == 3 && g.kw == 3 {
        let mut co = 0;
        for group in out.chunks_mut(4 * plane) {
            let kernels = &weight[co * g.c_in * 9..];
            match group.len() / plane {
                4 => conv3x3_block::<4>(g, &padded, wp, hp, kernels, group),
                3 => conv3x3_block::<3>(g, &padded, wp, hp, kernels, group),
                2 => conv3x3_block::<2>(g, &padded, wp, hp, kernels, group),
                _ => conv3x3_block::<1>(g, &padded, wp, hp, kernels, group),
            }
            co += 4;
        }
        return out;
    }
    for (co, out_plane) in out.chunks_exact_mut(plane).enumerate() {
        for ci in 0..g.c_in {
            let pin = &padded[ci * hp * wp..(ci + 1) * hp * wp];
            let k = &weight[(co * g.c_in + ci) * taps..(co * g.c_in + ci + 1) * taps];
            for (oy, o) in out_plane.chunks_exact_mut(g.w).enumerate() {
                for ky in 0..g.kh {
                    let row = &pin[(oy + ky) * wp..(oy + ky) * wp + g.w + g.kw - 1];
                    for kx in 0..g.kw {
                        let kv = k[ky * g.kw + kx];
                        for (ov, iv) in o.iter_mut().zip(&row[kx..]) {
                            *ov += kv * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 3x3 convolution into `B` consecutive output planes at once, so each
/// input window is read once per block rather than once per channel.
fn conv3x3_block<const B: usize>(
    g: &Conv2dGeom,
    padded: &[f64],
    wp: usize,
    hp: usize,
    kernels: &[f64],
    group: &mut [f64],
) {
    let (w, plane) = (g.w, g.h * g.w);
    for oy in 0..g.h {
        let mut planes = group.chunks_exact_mut(plane);
        let rows: [&mut [f64]; B] = std::array::from_fn(|_| &mut planes.next().unwrap()[oy * w..(oy + 1) * w]);
        for ci in 0..g.c_in {
            let pin = &padded[ci * hp * wp..(ci + 1) * hp * wp];
            let t = taps3(pin, oy * wp, wp, w);
            let k: [[f64; 9]; B] = std::array::from_fn(|j| std::array::from_fn(|i| kernels[(j * g.c_in + ci) * 9 + i]));
            for ox in 0..w {
                let v: [f64; 9] = std::array::from_fn(|i| t[i][ox]);
                for j in 0..B {
                    let kj = &k[j];
                    rows[j][ox] += kj[0] * v[0]
                        + kj[1] * v[1]
                        + kj[2] * v[2]
                        + kj[3] * v[3]
                        + kj[4] * v[4]
                        + kj[5] * v[5]
                        + kj[6] * v[6]
                        + kj[7] * v[7]
                        + kj[8] * v[8];
                }
            }
        }
    }
}

/// The input gradient of a "same" convolution is itself a "same"
/// convolution of the output gradient with the spatially flipped kernel,
/// input and output channels swapped.
fn conv2d_input_grad(g: &Conv2dGeom, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let taps = g.kh * g.kw;
    let mut flipped = vec![0.0; weight.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let src = &weight[(co * g.c_in + ci) * taps..(co * g.c_in + ci + 1) * taps];
            let dst = &mut flipped[(ci * g.c_out + co) * taps..(ci * g.c_out + co + 1) * taps];
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
    }
    conv2d_forward(&g.transposed(), grad_out, &flipped, None)
}

fn conv2d_weight_grad(g: &Conv2dGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let plane = g.h * g.w;
    let taps = g.kh * g.kw;
    let (padded, wp) = g.pad(input);
    let hp = g.h + 2 * (g.kh / 2);
    let mut grad_w = vec![0.0; g.c_out * g.c_in * taps];
    for co in 0..g.c_out {
        let go_plane = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let pin = &padded[ci * hp * wp..(ci + 1) * hp * wp];
            let k = &mut grad_w[(co * g.c_in + ci) * taps..(co * g.c_in + ci + 1) * taps];
            for (oy, go) in go_plane.chunks_exact(g.w).enumerate() {
                if g.kh == 3 && g.kw == 3 {
                    let t = taps3(pin, oy * wp, wp, g.w);
                    for (kv, tap) in k.iter_mut().zip(t) {
                        *kv += go.iter().zip(tap).map(|(a, b)| a * b).sum::<f64>();
                    }
                } else {
                    for ky in 0..g.kh {
                        let row = &pin[(oy + ky) * wp..(oy + ky) * wp + g.w + g.kw - 1];
                        for kx in 0..g.kw {
                            k[ky * g.kw + kx] += go.iter().zip(&row[kx..]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    grad_w
}
