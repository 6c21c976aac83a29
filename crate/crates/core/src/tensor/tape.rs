//! Single-use reverse-mode differentiation tape over dense tensors.
//!
//! Nodes are appended in evaluation order, so the insertion order is already
//! a topological order; `backward` walks it once in reverse. A tape is spent
//! after one backward pass and must be rebuilt for the next step.

use super::conv::{
    conv2d_backward, conv2d_forward, conv2d_out_extent, conv_transpose2d_backward,
    conv_transpose2d_forward, conv_transpose2d_out_extent,
};
use super::linalg;
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Operation tag recorded per node; inputs are node references.
#[derive(Debug, Clone)]
pub enum Op {
    /// Constant or parameter entry point; `param` is the parameter name.
    Leaf { param: Option<String>, trainable: bool },
    /// Gradient barrier: value copied, no backward flow.
    Detach(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    /// Multiply by a `[1]`-shaped variable, broadcast over all elements.
    MulScalarVar(Var, Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Tanh(Var),
    Elu(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    /// Sum a matrix over its first axis: `[m, n] -> [n]`.
    SumAxis0(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Reshape(Var),
    /// Horizontal concatenation of two matrices with equal row counts.
    ConcatCols(Var, Var),
    /// Column slice `[.., from..to)` of a matrix.
    SliceCols { input: Var, from: usize, to: usize },
    /// Stack k vectors of length n into an `[n, k]` matrix.
    StackCols(Vec<Var>),
    /// x `[b, c, ..]` plus a per-channel `[c]` vector.
    AddPerChannel(Var, Var),
    SubPerChannel(Var, Var),
    MulPerChannel(Var, Var),
    /// Mean over batch and trailing dims, one value per channel.
    PerChannelMean(Var),
    Conv2d { x: Var, w: Var, stride: usize, padding: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, padding: usize, output_padding: usize },
    /// Lower Cholesky factor of a symmetric matrix (jitter ladder applied).
    Cholesky(Var),
    /// X = L^-1 B
    SolveLower { l: Var, b: Var },
    /// X = L^-T B
    SolveLowerT { l: Var, b: Var },
    /// Strictly-lower entries passed through, diagonal exponentiated,
    /// upper triangle zeroed. Yields a valid Cholesky-factor parameterization.
    LowerTriExpDiag(Var),
    /// Diagonal of a square matrix.
    Diag(Var),
    /// out[i,p] = sum_j (a[i,j] - points[p,j])^2 * w[j]
    WeightedSqDist { a: Var, w: Var, points: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by parameter name, produced by `Tape::backward`.
#[derive(Debug, Default)]
pub struct GradStore {
    grads: BTreeMap<String, Tensor>,
}

impl GradStore {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_cache: RefCell<HashMap<String, Var>>,
    spent: Cell<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Clone of a node's current value.
    pub fn value(&self, v: Var) -> Tensor {
        self.with_value(v, Clone::clone)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.with_value(v, |t| t.shape().to_vec())
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn item(&self, v: Var) -> f64 {
        self.with_value(v, Tensor::item)
    }

    /// Insert a constant (no gradient).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None, trainable: false })
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Insert (or reuse) the leaf for a named parameter. Repeated calls with
    /// the same name return the same node, so gradients from all uses
    /// accumulate in one place.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_cache.borrow().get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.push(
            p.value.clone(),
            Op::Leaf { param: Some(name.to_string()), trainable: p.requires_grad },
        );
        self.param_cache.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&self, x: Var) -> Var {
        let value = self.value(x);
        self.push(value, Op::Detach(x))
    }

    fn binary_elementwise(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            ta.zip_map(tb, op_name, f)?
        };
        Ok(self.push(value, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| t.map(|x| -x));
        self.push(value, Op::Neg(a))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.with_value(a, |t| t.map(|x| x + c));
        self.push(value, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.with_value(a, |t| t.map(|x| x * c));
        self.push(value, Op::MulScalar(a, c))
    }

    /// Broadcast-multiply by a `[1]`-shaped variable.
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[s.0].value;
            if sv.numel() != 1 {
                return Err(Error::Shape {
                    op: "mul_scalar_var",
                    lhs: nodes[a.0].value.shape().to_vec(),
                    rhs: sv.shape().to_vec(),
                });
            }
            let c = sv.item();
            nodes[a.0].value.map(|x| x * c)
        };
        Ok(self.push(value, Op::MulScalarVar(a, s)))
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| t.map(f64::exp));
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| t.map(f64::ln));
        self.push(value, Op::Ln(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| t.map(f64::sqrt));
        self.push(value, Op::Sqrt(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| t.map(f64::tanh));
        self.push(value, Op::Tanh(a))
    }

    /// elu(x) = x for x >= 0, exp(x) - 1 otherwise.
    pub fn elu(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| t.map(|x| if x >= 0.0 { x } else { x.exp() - 1.0 }));
        self.push(value, Op::Elu(a))
    }

    pub fn clamp_min(&self, a: Var, min: f64) -> Var {
        let value = self.with_value(a, |t| t.map(|x| x.max(min)));
        self.push(value, Op::ClampMin(a, min))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| Tensor::scalar(t.data().iter().sum()));
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| {
            Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
        });
        self.push(value, Op::MeanAll(a))
    }

    /// `[m, n] -> [n]` summing over rows.
    pub fn sum_axis0(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape().len() != 2 {
                return Err(Error::Shape {
                    op: "sum_axis0",
                    lhs: t.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (m, n) = (t.shape()[0], t.shape()[1]);
            let mut out = Tensor::zeros(&[n]);
            for i in 0..m {
                let row = &t.data()[i * n..(i + 1) * n];
                for (o, &v) in out.data_mut().iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        };
        Ok(self.push(value, Op::SumAxis0(a)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape().len() != 2 {
                return Err(Error::Shape {
                    op: "transpose",
                    lhs: t.shape().to_vec(),
                    rhs: vec![],
                });
            }
            t.transposed()
        };
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            Tensor::new(vec![m, n], linalg::matmul(ta.data(), tb.data(), m, k, n))?
        };
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
            let mut out = Tensor::zeros(&[rows, ca + cb]);
            for r in 0..rows {
                out.data_mut()[r * (ca + cb)..r * (ca + cb) + ca]
                    .copy_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
                out.data_mut()[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                    .copy_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
            }
            out
        };
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&self, a: Var, from: usize, to: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let s = t.shape();
            if s.len() != 2 || from >= to || to > s[1] {
                return Err(Error::Shape {
                    op: "slice_cols",
                    lhs: s.to_vec(),
                    rhs: vec![from, to],
                });
            }
            let (rows, cols, width) = (s[0], s[1], to - from);
            let mut out = Tensor::zeros(&[rows, width]);
            for r in 0..rows {
                out.data_mut()[r * width..(r + 1) * width]
                    .copy_from_slice(&t.data()[r * cols + from..r * cols + to]);
            }
            out
        };
        Ok(self.push(value, Op::SliceCols { input: a, from, to }))
    }

    /// Stack k equal-length vectors into the columns of an `[n, k]` matrix.
    pub fn stack_cols(&self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::config("stack_cols of zero vectors"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let n = nodes[vars[0].0].value.numel();
            for &v in vars {
                let t = &nodes[v.0].value;
                if t.shape().len() != 1 || t.numel() != n {
                    return Err(Error::Shape {
                        op: "stack_cols",
                        lhs: vec![n],
                        rhs: t.shape().to_vec(),
                    });
                }
            }
            let k = vars.len();
            let mut out = Tensor::zeros(&[n, k]);
            for (j, &v) in vars.iter().enumerate() {
                for (i, &x) in nodes[v.0].value.data().iter().enumerate() {
                    out.data_mut()[i * k + j] = x;
                }
            }
            out
        };
        Ok(self.push(value, Op::StackCols(vars.to_vec())))
    }

    /// Channel extent and trailing size of a `[b, c, ..]` tensor.
    fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
        if shape.len() < 2 {
            return None;
        }
        let b = shape[0];
        let c = shape[1];
        let s: usize = shape[2..].iter().product();
        Some((b, c, s))
    }

    fn per_channel_op(
        &self,
        op_name: &'static str,
        x: Var,
        arg: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, ta) = (&nodes[x.0].value, &nodes[arg.0].value);
            let layout = Self::channel_layout(tx.shape());
            match layout {
                Some((b, c, s)) if ta.shape() == [c] => {
                    let mut out = tx.clone();
                    for bi in 0..b {
                        for ci in 0..c {
                            let a = ta.data()[ci];
                            let base = (bi * c + ci) * s;
                            for v in &mut out.data_mut()[base..base + s] {
                                *v = f(*v, a);
                            }
                        }
                    }
                    out
                }
                _ => {
                    return Err(Error::Shape {
                        op: op_name,
                        lhs: tx.shape().to_vec(),
                        rhs: ta.shape().to_vec(),
                    })
                }
            }
        };
        Ok(self.push(value, op))
    }

    pub fn add_per_channel(&self, x: Var, b: Var) -> Result<Var> {
        self.per_channel_op("add_per_channel", x, b, |v, a| v + a, Op::AddPerChannel(x, b))
    }

    pub fn sub_per_channel(&self, x: Var, b: Var) -> Result<Var> {
        self.per_channel_op("sub_per_channel", x, b, |v, a| v - a, Op::SubPerChannel(x, b))
    }

    pub fn mul_per_channel(&self, x: Var, s: Var) -> Result<Var> {
        self.per_channel_op("mul_per_channel", x, s, |v, a| v * a, Op::MulPerChannel(x, s))
    }

    pub fn per_channel_mean(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (b, c, s) = Self::channel_layout(t.shape()).ok_or_else(|| Error::Shape {
                op: "per_channel_mean",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            })?;
            let mut out = Tensor::zeros(&[c]);
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * s;
                    out.data_mut()[ci] += t.data()[base..base + s].iter().sum::<f64>();
                }
            }
            let denom = (b * s) as f64;
            for v in out.data_mut() {
                *v /= denom;
            }
            out
        };
        Ok(self.push(value, Op::PerChannelMean(x)))
    }

    /// Cross-correlation; `x: [b, cin, h, w]` (or `[cin, h, w]`),
    /// `w: [cout, cin, k, k]`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        if !matches!(stride, 1 | 2) {
            return Err(Error::config(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (sx, sw) = (tx.shape(), tw.shape());
            let unbatched = sx.len() == 3;
            let (b, cin, h, wd) = match sx.len() {
                3 => (1, sx[0], sx[1], sx[2]),
                4 => (sx[0], sx[1], sx[2], sx[3]),
                _ => {
                    return Err(Error::Shape { op: "conv2d", lhs: sx.to_vec(), rhs: sw.to_vec() })
                }
            };
            if sw.len() != 4 || sw[1] != cin || sw[2] != sw[3] {
                return Err(Error::Shape { op: "conv2d", lhs: sx.to_vec(), rhs: sw.to_vec() });
            }
            let (cout, k) = (sw[0], sw[2]);
            let oh = conv2d_out_extent(h, k, stride, padding);
            let ow = conv2d_out_extent(wd, k, stride, padding);
            let (oh, ow) = match (oh, ow) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                _ => {
                    return Err(Error::config(format!(
                        "conv2d produces non-positive output extent for input {h}x{wd}, \
                         kernel {k}, stride {stride}, padding {padding}"
                    )))
                }
            };
            let data = conv2d_forward(tx.data(), tw.data(), b, cin, h, wd, cout, k, stride, padding, oh, ow);
            let shape = if unbatched { vec![cout, oh, ow] } else { vec![b, cout, oh, ow] };
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, Op::Conv2d { x, w, stride, padding }))
    }

    /// Transposed convolution; `x: [b, cin, h, w]`, `w: [cin, cout, k, k]`.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        if !matches!(stride, 1 | 2) {
            return Err(Error::config(format!(
                "conv_transpose2d stride must be 1 or 2, got {stride}"
            )));
        }
        if output_padding >= stride {
            return Err(Error::config(
                "conv_transpose2d output_padding must be smaller than stride".to_string(),
            ));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (sx, sw) = (tx.shape(), tw.shape());
            if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] {
                return Err(Error::Shape {
                    op: "conv_transpose2d",
                    lhs: sx.to_vec(),
                    rhs: sw.to_vec(),
                });
            }
            let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (cout, k) = (sw[1], sw[2]);
            let oh = conv_transpose2d_out_extent(h, k, stride, padding, output_padding);
            let ow = conv_transpose2d_out_extent(wd, k, stride, padding, output_padding);
            let (oh, ow) = match (oh, ow) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                _ => {
                    return Err(Error::config(
                        "conv_transpose2d produces non-positive output extent".to_string(),
                    ))
                }
            };
            let data = conv_transpose2d_forward(
                tx.data(), tw.data(), b, cin, h, wd, cout, k, stride, padding, oh, ow,
            );
            Tensor::new(vec![b, cout, oh, ow], data)?
        };
        Ok(self.push(value, Op::ConvTranspose2d { x, w, stride, padding, output_padding }))
    }

    /// Lower Cholesky factor of a symmetric positive-definite matrix. The
    /// input is symmetrized and a jitter ladder (1e-8 .. 1e-4) is applied
    /// before giving up.
    pub fn cholesky(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let s = t.shape();
            if s.len() != 2 || s[0] != s[1] {
                return Err(Error::Shape { op: "cholesky", lhs: s.to_vec(), rhs: vec![] });
            }
            let n = s[0];
            let mut sym = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    sym[i * n + j] = 0.5 * (t.data()[i * n + j] + t.data()[j * n + i]);
                }
            }
            let (l, _jitter) = linalg::cholesky_jittered(&sym, n).ok_or_else(|| {
                Error::numerical(format!(
                    "Cholesky failed for {n}x{n} matrix after jitter ladder {:?}",
                    linalg::JITTER_LADDER
                ))
            })?;
            Tensor::new(vec![n, n], l)?
        };
        Ok(self.push(value, Op::Cholesky(a)))
    }

    fn solve_shapes(nodes: &[Node], l: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (tl, tb) = (&nodes[l.0].value, &nodes[b.0].value);
        let (sl, sb) = (tl.shape(), tb.shape());
        if sl.len() != 2 || sl[0] != sl[1] {
            return Err(Error::Shape { op, lhs: sl.to_vec(), rhs: sb.to_vec() });
        }
        let n = sl[0];
        let cols = match sb.len() {
            1 if sb[0] == n => 1,
            2 if sb[0] == n => sb[1],
            _ => return Err(Error::Shape { op, lhs: sl.to_vec(), rhs: sb.to_vec() }),
        };
        Ok((n, cols))
    }

    /// X = L^-1 B for lower-triangular L.
    pub fn solve_lower(&self, l: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (n, cols) = Self::solve_shapes(&nodes, l, b, "solve_lower")?;
            let x = linalg::solve_lower(nodes[l.0].value.data(), nodes[b.0].value.data(), n, cols);
            Tensor::new(nodes[b.0].value.shape().to_vec(), x)?
        };
        Ok(self.push(value, Op::SolveLower { l, b }))
    }

    /// X = L^-T B for lower-triangular L.
    pub fn solve_lower_t(&self, l: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (n, cols) = Self::solve_shapes(&nodes, l, b, "solve_lower_t")?;
            let x = linalg::solve_lower_t(nodes[l.0].value.data(), nodes[b.0].value.data(), n, cols);
            Tensor::new(nodes[b.0].value.shape().to_vec(), x)?
        };
        Ok(self.push(value, Op::SolveLowerT { l, b }))
    }

    /// Map an unconstrained square matrix to a lower-triangular factor with
    /// strictly positive diagonal.
    pub fn lower_tri_exp_diag(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let s = t.shape();
            if s.len() != 2 || s[0] != s[1] {
                return Err(Error::Shape { op: "lower_tri_exp_diag", lhs: s.to_vec(), rhs: vec![] });
            }
            let n = s[0];
            let mut out = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..=i {
                    let v = t.data()[i * n + j];
                    out.data_mut()[i * n + j] = if i == j { v.exp() } else { v };
                }
            }
            out
        };
        Ok(self.push(value, Op::LowerTriExpDiag(a)))
    }

    pub fn diag(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let s = t.shape();
            if s.len() != 2 || s[0] != s[1] {
                return Err(Error::Shape { op: "diag", lhs: s.to_vec(), rhs: vec![] });
            }
            let n = s[0];
            Tensor::from_fn(&[n], |i| t.data()[i * n + i])
        };
        Ok(self.push(value, Op::Diag(a)))
    }

    /// out[i, p] = sum_j (a[i, j] - points[p, j])^2 * w[j]
    ///
    /// `points` enters as data, not as a differentiable input (inducing
    /// locations are fixed).
    pub fn weighted_sqdist(&self, a: Var, points: &Tensor, w: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tw) = (&nodes[a.0].value, &nodes[w.0].value);
            let (sa, sp) = (ta.shape(), points.shape());
            if sa.len() != 2 || sp.len() != 2 || sa[1] != sp[1] || tw.shape() != [sa[1]] {
                return Err(Error::Shape {
                    op: "weighted_sqdist",
                    lhs: sa.to_vec(),
                    rhs: sp.to_vec(),
                });
            }
            let (n, d, p) = (sa[0], sa[1], sp[0]);
            let mut out = Tensor::zeros(&[n, p]);
            for i in 0..n {
                let ai = &ta.data()[i * d..(i + 1) * d];
                for pi in 0..p {
                    let bp = &points.data()[pi * d..(pi + 1) * d];
                    let mut s = 0.0;
                    for j in 0..d {
                        let diff = ai[j] - bp[j];
                        s += diff * diff * tw.data()[j];
                    }
                    out.data_mut()[i * p + pi] = s;
                }
            }
            out
        };
        Ok(self.push(value, Op::WeightedSqDist { a, w, points: points.clone() }))
    }

    /// Reverse pass from a scalar root. Consumes the tape's single use and
    /// returns gradients for every trainable parameter that was inserted
    /// (zeros for parameters the root does not depend on).
    pub fn backward(&self, root: Var) -> Result<GradStore> {
        if self.spent.get() {
            return Err(Error::contract(
                "backward called twice on a single-use tape; build a fresh tape".to_string(),
            ));
        }
        self.spent.set(true);
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            // Leaf gradients are needed at the end; put them back.
            if matches!(nodes[id].op, Op::Leaf { .. }) {
                grads[id] = Some(g);
            }
        }

        let mut store = GradStore::default();
        for (name, &var) in self.param_cache.borrow().iter() {
            let node = &nodes[var.0];
            if let Op::Leaf { trainable: true, .. } = node.op {
                let grad = grads[var.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                store.grads.insert(name.clone(), grad);
            }
        }
        Ok(store)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], target: usize, shape: &[usize], add: impl FnOnce(&mut Tensor)) {
    let slot = &mut grads[target];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    add(slot.as_mut().unwrap());
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let shape_of = |v: Var| nodes[v.0].value.shape().to_vec();
    let val_of = |v: Var| &nodes[v.0].value;
    match &nodes[id].op {
        Op::Leaf { .. } | Op::Detach(_) => {}
        Op::Add(a, b) => {
            accumulate(grads, a.0, &shape_of(*a), |t| t.add_assign_scaled(g, 1.0));
            accumulate(grads, b.0, &shape_of(*b), |t| t.add_assign_scaled(g, 1.0));
        }
        Op::Sub(a, b) => {
            accumulate(grads, a.0, &shape_of(*a), |t| t.add_assign_scaled(g, 1.0));
            accumulate(grads, b.0, &shape_of(*b), |t| t.add_assign_scaled(g, -1.0));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val_of(*a), val_of(*b));
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for ((t, &gv), &bv) in t.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                    *t += gv * bv;
                }
            });
            accumulate(grads, b.0, &shape_of(*b), |t| {
                for ((t, &gv), &av) in t.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                    *t += gv * av;
                }
            });
        }
        Op::Div(a, b) => {
            let (va, vb) = (val_of(*a), val_of(*b));
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for ((t, &gv), &bv) in t.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                    *t += gv / bv;
                }
            });
            accumulate(grads, b.0, &shape_of(*b), |t| {
                for (((t, &gv), &av), &bv) in t
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(va.data())
                    .zip(vb.data())
                {
                    *t -= gv * av / (bv * bv);
                }
            });
        }
        Op::Neg(a) => {
            accumulate(grads, a.0, &shape_of(*a), |t| t.add_assign_scaled(g, -1.0));
        }
        Op::AddScalar(a, _) => {
            accumulate(grads, a.0, &shape_of(*a), |t| t.add_assign_scaled(g, 1.0));
        }
        Op::MulScalar(a, c) => {
            let c = *c;
            accumulate(grads, a.0, &shape_of(*a), |t| t.add_assign_scaled(g, c));
        }
        Op::MulScalarVar(a, s) => {
            let sv = val_of(*s).item();
            let va = val_of(*a);
            accumulate(grads, a.0, &shape_of(*a), |t| t.add_assign_scaled(g, sv));
            let dot: f64 = g.data().iter().zip(va.data()).map(|(&gv, &av)| gv * av).sum();
            accumulate(grads, s.0, &[1], |t| t.data_mut()[0] += dot);
        }
        Op::Exp(a) => {
            let out = &nodes[id].value;
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for ((t, &gv), &ov) in t.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *t += gv * ov;
                }
            });
        }
        Op::Ln(a) => {
            let va = val_of(*a);
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for ((t, &gv), &av) in t.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                    *t += gv / av;
                }
            });
        }
        Op::Sqrt(a) => {
            let out = &nodes[id].value;
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for ((t, &gv), &ov) in t.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *t += gv * 0.5 / ov;
                }
            });
        }
        Op::Tanh(a) => {
            let out = &nodes[id].value;
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for ((t, &gv), &ov) in t.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *t += gv * (1.0 - ov * ov);
                }
            });
        }
        Op::Elu(a) => {
            let va = val_of(*a);
            let out = &nodes[id].value;
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for (((t, &gv), &av), &ov) in t
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(va.data())
                    .zip(out.data())
                {
                    *t += if av >= 0.0 { gv } else { gv * (ov + 1.0) };
                }
            });
        }
        Op::ClampMin(a, min) => {
            let va = val_of(*a);
            let min = *min;
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for ((t, &gv), &av) in t.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                    if av > min {
                        *t += gv;
                    }
                }
            });
        }
        Op::SumAll(a) => {
            let gv = g.item();
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for v in t.data_mut() {
                    *v += gv;
                }
            });
        }
        Op::MeanAll(a) => {
            let n = val_of(*a).numel() as f64;
            let gv = g.item() / n;
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for v in t.data_mut() {
                    *v += gv;
                }
            });
        }
        Op::SumAxis0(a) => {
            let sa = shape_of(*a);
            let (m, n) = (sa[0], sa[1]);
            accumulate(grads, a.0, &sa, |t| {
                for i in 0..m {
                    for j in 0..n {
                        t.data_mut()[i * n + j] += g.data()[j];
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let gt = g.transposed();
            accumulate(grads, a.0, &shape_of(*a), |t| t.add_assign_scaled(&gt, 1.0));
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val_of(*a), val_of(*b));
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            let da = linalg::matmul_nt(g.data(), vb.data(), m, n, k);
            let db = linalg::matmul_tn(va.data(), g.data(), k, m, n);
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for (t, v) in t.data_mut().iter_mut().zip(da) {
                    *t += v;
                }
            });
            accumulate(grads, b.0, &shape_of(*b), |t| {
                for (t, v) in t.data_mut().iter_mut().zip(db) {
                    *t += v;
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for (t, &v) in t.data_mut().iter_mut().zip(g.data()) {
                    *t += v;
                }
            });
        }
        Op::ConcatCols(a, b) => {
            let (sa, sb) = (shape_of(*a), shape_of(*b));
            let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
            accumulate(grads, a.0, &sa, |t| {
                for r in 0..rows {
                    for c in 0..ca {
                        t.data_mut()[r * ca + c] += g.data()[r * (ca + cb) + c];
                    }
                }
            });
            accumulate(grads, b.0, &sb, |t| {
                for r in 0..rows {
                    for c in 0..cb {
                        t.data_mut()[r * cb + c] += g.data()[r * (ca + cb) + ca + c];
                    }
                }
            });
        }
        Op::SliceCols { input, from, to } => {
            let si = shape_of(*input);
            let (rows, cols, width) = (si[0], si[1], to - from);
            let from = *from;
            accumulate(grads, input.0, &si, |t| {
                for r in 0..rows {
                    for c in 0..width {
                        t.data_mut()[r * cols + from + c] += g.data()[r * width + c];
                    }
                }
            });
        }
        Op::StackCols(vars) => {
            let k = vars.len();
            for (j, v) in vars.iter().enumerate() {
                let sv = shape_of(*v);
                let n = sv[0];
                accumulate(grads, v.0, &sv, |t| {
                    for i in 0..n {
                        t.data_mut()[i] += g.data()[i * k + j];
                    }
                });
            }
        }
        Op::AddPerChannel(x, bias) | Op::SubPerChannel(x, bias) => {
            let sign = if matches!(nodes[id].op, Op::AddPerChannel(..)) { 1.0 } else { -1.0 };
            let sx = shape_of(*x);
            let (b, c, s) = Tape::channel_layout(&sx).unwrap();
            accumulate(grads, x.0, &sx, |t| t.add_assign_scaled(g, 1.0));
            accumulate(grads, bias.0, &[c], |t| {
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        t.data_mut()[ci] += sign * g.data()[base..base + s].iter().sum::<f64>();
                    }
                }
            });
        }
        Op::MulPerChannel(x, scale) => {
            let sx = shape_of(*x);
            let (b, c, s) = Tape::channel_layout(&sx).unwrap();
            let (vx, vs) = (val_of(*x), val_of(*scale));
            accumulate(grads, x.0, &sx, |t| {
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        let sv = vs.data()[ci];
                        for (t, &gv) in t.data_mut()[base..base + s].iter_mut().zip(&g.data()[base..base + s]) {
                            *t += gv * sv;
                        }
                    }
                }
            });
            accumulate(grads, scale.0, &[c], |t| {
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        let dot: f64 = g.data()[base..base + s]
                            .iter()
                            .zip(&vx.data()[base..base + s])
                            .map(|(&gv, &xv)| gv * xv)
                            .sum();
                        t.data_mut()[ci] += dot;
                    }
                }
            });
        }
        Op::PerChannelMean(x) => {
            let sx = shape_of(*x);
            let (b, c, s) = Tape::channel_layout(&sx).unwrap();
            let denom = (b * s) as f64;
            accumulate(grads, x.0, &sx, |t| {
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        let gv = g.data()[ci] / denom;
                        for t in &mut t.data_mut()[base..base + s] {
                            *t += gv;
                        }
                    }
                }
            });
        }
        Op::Conv2d { x, w, stride, padding } => {
            let (vx, vw) = (val_of(*x), val_of(*w));
            let sx = vx.shape();
            let (b, cin, h, wd) = match sx.len() {
                3 => (1, sx[0], sx[1], sx[2]),
                _ => (sx[0], sx[1], sx[2], sx[3]),
            };
            let sw = vw.shape();
            let (cout, k) = (sw[0], sw[2]);
            let so = nodes[id].value.shape();
            let (oh, ow) = (so[so.len() - 2], so[so.len() - 1]);
            let (dx, dw) = conv2d_backward(
                vx.data(), vw.data(), g.data(), b, cin, h, wd, cout, k, *stride, *padding, oh, ow,
            );
            accumulate(grads, x.0, &shape_of(*x), |t| {
                for (t, v) in t.data_mut().iter_mut().zip(dx) {
                    *t += v;
                }
            });
            accumulate(grads, w.0, &shape_of(*w), |t| {
                for (t, v) in t.data_mut().iter_mut().zip(dw) {
                    *t += v;
                }
            });
        }
        Op::ConvTranspose2d { x, w, stride, padding, .. } => {
            let (vx, vw) = (val_of(*x), val_of(*w));
            let sx = vx.shape();
            let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let sw = vw.shape();
            let (cout, k) = (sw[1], sw[2]);
            let so = nodes[id].value.shape();
            let (oh, ow) = (so[2], so[3]);
            let (dx, dw) = conv_transpose2d_backward(
                vx.data(), vw.data(), g.data(), b, cin, h, wd, cout, k, *stride, *padding, oh, ow,
            );
            accumulate(grads, x.0, &shape_of(*x), |t| {
                for (t, v) in t.data_mut().iter_mut().zip(dx) {
                    *t += v;
                }
            });
            accumulate(grads, w.0, &shape_of(*w), |t| {
                for (t, v) in t.data_mut().iter_mut().zip(dw) {
                    *t += v;
                }
            });
        }
        Op::Cholesky(a) => {
            // Murray, "Differentiation of the Cholesky decomposition":
            // with A = L L^T and output gradient Lbar,
            //   P = Phi(L^T Lbar), Abar = L^-T P L^-1, then symmetrize.
            // Phi keeps the lower triangle with the diagonal halved.
            let l = &nodes[id].value;
            let n = l.shape()[0];
            let lt_lbar = linalg::matmul_tn(l.data(), g.data(), n, n, n);
            let mut p = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..=i {
                    p[i * n + j] = if i == j { 0.5 * lt_lbar[i * n + j] } else { lt_lbar[i * n + j] };
                }
            }
            let s1 = linalg::solve_lower_t(l.data(), &p, n, n); // L^-T P
            // G = S1 L^-1  =>  G^T = L^-T S1^T
            let s1t: Vec<f64> = {
                let mut t = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        t[j * n + i] = s1[i * n + j];
                    }
                }
                t
            };
            let gt = linalg::solve_lower_t(l.data(), &s1t, n, n);
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for i in 0..n {
                    for j in 0..n {
                        // 0.5 (G + G^T) with G = gt^T
                        t.data_mut()[i * n + j] += 0.5 * (gt[j * n + i] + gt[i * n + j]);
                    }
                }
            });
        }
        Op::SolveLower { l, b } => {
            let x = &nodes[id].value; // X = L^-1 B
            let n = val_of(*l).shape()[0];
            let cols = x.numel() / n;
            let bbar = linalg::solve_lower_t(val_of(*l).data(), g.data(), n, cols);
            accumulate(grads, b.0, &shape_of(*b), |t| {
                for (t, &v) in t.data_mut().iter_mut().zip(&bbar) {
                    *t += v;
                }
            });
            // Lbar = -(L^-T Xbar) X^T, lower triangle only.
            let lbar_full = linalg::matmul_nt(&bbar, x.data(), n, cols, n);
            accumulate(grads, l.0, &shape_of(*l), |t| {
                for i in 0..n {
                    for j in 0..=i {
                        t.data_mut()[i * n + j] -= lbar_full[i * n + j];
                    }
                }
            });
        }
        Op::SolveLowerT { l, b } => {
            let y = &nodes[id].value; // Y = L^-T B
            let n = val_of(*l).shape()[0];
            let cols = y.numel() / n;
            let bbar = linalg::solve_lower(val_of(*l).data(), g.data(), n, cols);
            accumulate(grads, b.0, &shape_of(*b), |t| {
                for (t, &v) in t.data_mut().iter_mut().zip(&bbar) {
                    *t += v;
                }
            });
            // Lbar = -Y (L^-1 Ybar)^T, lower triangle only.
            let lbar_full = linalg::matmul_nt(y.data(), &bbar, n, cols, n);
            accumulate(grads, l.0, &shape_of(*l), |t| {
                for i in 0..n {
                    for j in 0..=i {
                        t.data_mut()[i * n + j] -= lbar_full[i * n + j];
                    }
                }
            });
        }
        Op::LowerTriExpDiag(a) => {
            let out = &nodes[id].value;
            let n = out.shape()[0];
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for i in 0..n {
                    for j in 0..=i {
                        let gv = g.data()[i * n + j];
                        t.data_mut()[i * n + j] += if i == j { gv * out.data()[i * n + i] } else { gv };
                    }
                }
            });
        }
        Op::Diag(a) => {
            let sa = shape_of(*a);
            let n = sa[0];
            accumulate(grads, a.0, &sa, |t| {
                for i in 0..n {
                    t.data_mut()[i * n + i] += g.data()[i];
                }
            });
        }
        Op::WeightedSqDist { a, w, points } => {
            let (va, vw) = (val_of(*a), val_of(*w));
            let (n, d) = (va.shape()[0], va.shape()[1]);
            let p = points.shape()[0];
            accumulate(grads, a.0, &shape_of(*a), |t| {
                for i in 0..n {
                    for pi in 0..p {
                        let gv = g.data()[i * p + pi];
                        if gv == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            let diff = va.data()[i * d + j] - points.data()[pi * d + j];
                            t.data_mut()[i * d + j] += gv * 2.0 * diff * vw.data()[j];
                        }
                    }
                }
            });
            accumulate(grads, w.0, &[d], |t| {
                for i in 0..n {
                    for pi in 0..p {
                        let gv = g.data()[i * p + pi];
                        if gv == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            let diff = va.data()[i * d + j] - points.data()[pi * d + j];
                            t.data_mut()[j] += gv * diff * diff;
                        }
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamGroup;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.register(name, t, true, ParamGroup::Nn).unwrap();
        s
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::eye(2));
        let m = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let store = store_with("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut store = store_with("x", Tensor::scalar(2.0));
        store
            .register("unused", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), true, ParamGroup::Nn)
            .unwrap();
        let tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let _u = tape.param(&store, "unused").unwrap();
        let loss = tape.mul(x, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get("x").unwrap().data(), &[4.0]);
    }

    #[test]
    fn second_backward_is_a_contract_error() {
        let store = store_with("x", Tensor::scalar(1.0));
        let tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let loss = tape.mul(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let store = store_with("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_linear_over_subgraphs() {
        let store = store_with("x", Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
        // loss1 = sum(x^2), loss2 = sum(exp(x)); d(loss1+loss2) = d(loss1) + d(loss2)
        let grad_of = |build: &dyn Fn(&Tape, Var) -> Var| {
            let tape = Tape::new();
            let x = tape.param(&store, "x").unwrap();
            let loss = build(&tape, x);
            let g = tape.backward(loss).unwrap();
            g.get("x").unwrap().clone()
        };
        let g1 = grad_of(&|t, x| {
            let s = t.mul(x, x).unwrap();
            t.sum_all(s)
        });
        let g2 = grad_of(&|t, x| {
            let e = t.exp(x);
            t.sum_all(e)
        });
        let gsum = grad_of(&|t, x| {
            let s = t.mul(x, x).unwrap();
            let a = t.sum_all(s);
            let e = t.exp(x);
            let b = t.sum_all(e);
            t.add(a, b).unwrap()
        });
        for i in 0..2 {
            let expect = g1.data()[i] + g2.data()[i];
            assert!((gsum.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let store = store_with("x", Tensor::scalar(3.0));
        let tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let d = tape.detach(x);
        let loss = tape.mul(d, d).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0]);
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 5, 5], |i| i as f64 * 0.3 - 2.0));
        // 3x3 kernel with 1 in the center reproduces the input at stride 1, padding 1.
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let wv = tape.constant(w);
        let y = tape.conv2d(x, wv, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_zero_weights_zero_output() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| i as f64));
        let w = tape.constant(Tensor::zeros(&[5, 3, 3, 3]));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_bad_geometry_is_config_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn elu_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, -1.0]).unwrap());
        let y = tape.elu(x);
        let v = tape.value(y);
        assert_eq!(v.data()[0], 0.0);
        assert!((v.data()[1] - ((-1.0f64).exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn cholesky_jitter_failure_is_numerical_error() {
        let tape = Tape::new();
        // Negative definite matrix cannot be rescued by the ladder.
        let a = tape.constant(Tensor::new(vec![2, 2], vec![-1.0, 0.0, 0.0, -1.0]).unwrap());
        let err = tape.cholesky(a).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("jitter"));
    }
}
