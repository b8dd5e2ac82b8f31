//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`] holding its output value and
//! whatever it needs for the backward pass. Nodes are only ever appended, so
//! inputs always precede their consumers and a single reverse sweep is a valid
//! topological traversal.
//!
//! ```
//! use xreid::tape::Tape;
//! use xreid::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
//! let b = tape.leaf(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
//! let c = tape.matmul(a, b).unwrap();
//! assert_eq!(tape.value(c).data(), &[11.0]);
//! tape.backward(c).unwrap();
//! assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{dot, split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub const LAYERNORM_EPS: f64 = 1e-12;
pub const L2_EPS: f64 = 1e-8;

const SQRT_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Sqrt(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        from: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    L2Normalize {
        x: Var,
        axis: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        weights: Vec<f64>,
    },
}

/// Grouped multi-head attention layout: `groups` independent problems, each
/// with `queries` query rows and `keys` key/value rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub groups: usize,
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Records operations for one forward pass.
///
/// A tape is a single-writer structure. Independent forward passes (for
/// example parallel training runs) each use their own tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Index {
            op,
            index: axis,
            bound: shape.len(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(shape_err(op, t.shape(), &[0, 0])),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k, 1), b, (n, 1), c, (m, k, n));
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    gemm(a, (n, 1), b, (1, n), c, (m, n, k));
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (1, k), b, (n, 1), c, (k, m, n));
}

/// `c += A·B` for strided views, `dims = (rows, inner, cols)`.
fn gemm(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], dims: (usize, usize, usize)) {
    let (m, k, n) = dims;
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * sa.0 + (k - 1) * sa.1 + 1);
    assert!(b.len() >= (k - 1) * sb.0 + (n - 1) * sb.1 + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input. Its gradient is available after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A non-differentiable input; gradients are never propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was
    /// reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Post-softmax weights saved by an attention node, laid out as
    /// `[groups, heads, queries, keys]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&AttentionSpec, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, weights, .. } => Some((spec, weights)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, mk(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("unary preserves shape");
        self.push(value, op)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Square root with the argument floored at 1e-12 so the derivative stays finite.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(SQRT_FLOOR).sqrt(), Op::Sqrt(x))
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = matrix_dims("add_row", self.value(x))?;
        if self.shape(row) != [n] {
            return Err(shape_err("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, &b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x, row)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", t.shape(), axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        if d < 2 {
            return Err(Error::Config(format!("layernorm needs width >= 2, got {d}")));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layernorm", t.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut extent = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `from..to` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, from: usize, to: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if from >= to {
            return Err(Error::Index {
                op: "slice",
                index: from,
                bound: to,
            });
        }
        if to > shape[axis] {
            return Err(Error::Index {
                op: "slice",
                index: to,
                bound: shape[axis] + 1,
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let width = (to - from) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let start = o * len * inner + from * inner;
            out.extend_from_slice(&src[start..start + width]);
        }
        let mut new_shape = shape;
        new_shape[axis] = to - from;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, from }))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(if mean { "mean" } else { "sum" }, &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut new_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &e)| e)
            .collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(value, op))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Divides each vector along `axis` by `max(‖x‖, eps)`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("l2_normalize", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let norm = (0..len).map(|j| src[at(j)] * src[at(j)]).sum::<f64>().sqrt();
                norms[o * inner + i] = norm;
                let denom = norm.max(eps);
                for j in 0..len {
                    out[at(j)] = src[at(j)] / denom;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::L2Normalize {
                x,
                axis,
                eps,
                norms,
            },
        ))
    }

    /// Selects rows of a matrix: `out[i] = x[index[i]]`. Rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = matrix_dims("gather_rows", self.value(x))?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * n);
        for &r in index {
            if r >= m {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: r,
                    bound: m,
                });
            }
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        if index.is_empty() {
            return Err(Error::Contract("gather_rows with empty index".into()));
        }
        let value = Tensor::new(vec![index.len(), n], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = matrix_dims("cross_entropy_logits", self.value(logits))?;
        if labels.len() != b {
            return Err(shape_err("cross_entropy_logits", &[b, c], &[labels.len()]));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Index {
                    op: "cross_entropy_logits",
                    index: label,
                    bound: c,
                });
            }
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Grouped scaled dot-product attention over `heads` heads.
    ///
    /// `q` is `[groups·queries, D]`, `k` and `v` are `[groups·keys, D]`. Each
    /// group attends only within itself; heads split the channel axis evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qm, d) = matrix_dims("attention", self.value(q))?;
        let (km, kd) = matrix_dims("attention", self.value(k))?;
        if qm != spec.groups * spec.queries || km != spec.groups * spec.keys || kd != d {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if self.shape(v) != self.shape(k) {
            return Err(shape_err("attention", self.shape(k), self.shape(v)));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {} heads",
                spec.heads
            )));
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (m, n) = (spec.queries, spec.keys);
        let mut weights = vec![0.0; spec.groups * spec.heads * m * n];
        let mut out = vec![0.0; qm * d];
        let mut scores = vec![0.0; n];
        for g in 0..spec.groups {
            for h in 0..spec.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..m {
                    let qrow = &qd[(g * m + i) * d..][cols.clone()];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = dot(qrow, &kd[(g * n + j) * d..][cols.clone()]) * scale;
                    }
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let w = &mut weights[((g * spec.heads + h) * m + i) * n..][..n];
                    let mut total = 0.0;
                    for (wj, &s) in w.iter_mut().zip(&scores) {
                        *wj = (s - max).exp();
                        total += *wj;
                    }
                    w.iter_mut().for_each(|wj| *wj /= total);
                    let orow = &mut out[(g * m + i) * d..][cols.clone()];
                    for (j, &wj) in w.iter().enumerate() {
                        let vrow = &vd[(g * n + j) * d..][cols.clone()];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += wj * vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![qm, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                spec,
                weights,
            },
        ))
    }

    /// Runs the backward pass from a one-element `loss`, replacing all
    /// gradients from any previous pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(upstream) = self.nodes[id].grad.take() else {
                continue;
            };
            self.propagate(id, &upstream);
            self.nodes[id].grad = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contribution: Vec<f64>) {
        if matches!(self.nodes[target.0].op, Op::Constant) {
            return;
        }
        match &mut self.nodes[target.0].grad {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(&mut self, target: Var, f: impl FnOnce(&mut [f64])) {
        if matches!(self.nodes[target.0].op, Op::Constant) {
            return;
        }
        let n = self.nodes[target.0].value.numel();
        let g = self.nodes[target.0].grad.get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn propagate(&mut self, id: usize, dy: &[f64]) {
        // Temporarily take the op so input values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims("matmul", self.value(*a)).unwrap();
                let n = self.shape(*b)[1];
                let mut da = vec![0.0; m * k];
                gemm_nt(dy, self.value(*b).data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                gemm_tn(self.value(*a).data(), dy, &mut db, m, k, n);
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, dy.to_vec());
                self.accumulate(*b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, dy.to_vec());
                self.accumulate(*b, dy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let da = dy.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                let db = dy.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::Scale(x, s) => self.accumulate(*x, dy.iter().map(|g| g * s).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(*x, dy.to_vec()),
            Op::AddRow(x, row) => {
                let n = self.shape(*row)[0];
                let mut dr = vec![0.0; n];
                for chunk in dy.chunks(n) {
                    dr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                self.accumulate(*x, dy.to_vec());
                self.accumulate(*row, dr);
            }
            Op::Transpose(x) => {
                let (m, n) = matrix_dims("transpose", self.value(*x)).unwrap();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = dy[j * m + i];
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[id].value.data();
                let (outer, len, inner) = split_axis(self.nodes[id].value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let s: f64 = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (dy[at(j)] - s);
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let g = self.value(*gamma).data().to_vec();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let h = &xhat[r * d..(r + 1) * d];
                    let gy = &dy[r * d..(r + 1) * d];
                    for j in 0..d {
                        dgamma[j] += gy[j] * h[j];
                        dbeta[j] += gy[j];
                        dxhat[j] = gy[j] * g[j];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_h = dot(&dxhat, h) / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - h[j] * mean_dxhat_h);
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Op::Gelu(x) => {
                let dx = dy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Relu(x) => {
                let dx = dy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Sqrt(x) => {
                let dx = dy
                    .iter()
                    .zip(self.value(*x).data())
                    .zip(self.nodes[id].value.data())
                    .map(|((g, &v), &y)| if v > SQRT_FLOOR { g * 0.5 / y } else { 0.0 })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(self.nodes[id].value.shape(), *axis);
                let widths: Vec<usize> =
                    parts.iter().map(|&p| self.shape(p)[*axis] * inner).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    self.accumulate_with(p, |g| {
                        for o in 0..outer {
                            let src = &dy[o * total + offset..o * total + offset + w];
                            g[o * w..(o + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, axis, from } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let width = self.nodes[id].value.shape()[*axis] * inner;
                let start = from * inner;
                self.accumulate_with(*x, |g| {
                    for o in 0..outer {
                        let dst = &mut g[o * len * inner + start..][..width];
                        dst.iter_mut()
                            .zip(&dy[o * width..(o + 1) * width])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Mean { x, axis } | Op::Sum { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let factor = if matches!(op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                self.accumulate_with(*x, |g| {
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = &mut g[(o * len + j) * inner..][..inner];
                            dst.iter_mut()
                                .zip(&dy[o * inner..(o + 1) * inner])
                                .for_each(|(a, b)| *a += b * factor);
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![dy[0]; n]);
            }
            Op::L2Normalize {
                x,
                axis,
                eps,
                norms,
            } => {
                let y = self.nodes[id].value.data();
                let (outer, len, inner) = split_axis(self.nodes[id].value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let norm = norms[o * inner + i];
                        if norm > *eps {
                            let proj: f64 = (0..len).map(|j| y[at(j)] * dy[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] = (dy[at(j)] - y[at(j)] * proj) / norm;
                            }
                        } else {
                            for j in 0..len {
                                dx[at(j)] = dy[at(j)] / eps;
                            }
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::GatherRows { x, index } => {
                let n = self.shape(*x)[1];
                self.accumulate_with(*x, |g| {
                    for (i, &r) in index.iter().enumerate() {
                        g[r * n..(r + 1) * n]
                            .iter_mut()
                            .zip(&dy[i * n..(i + 1) * n])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let b = labels.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * dy[0] / b).collect();
                for (r, &label) in labels.iter().enumerate() {
                    dx[r * c + label] -= dy[0] / b;
                }
                self.accumulate(*logits, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                weights,
            } => {
                let d = self.shape(*q)[1];
                let dh = d / spec.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (m, n) = (spec.queries, spec.keys);
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dw = vec![0.0; n];
                for g in 0..spec.groups {
                    for h in 0..spec.heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..m {
                            let qi = (g * m + i) * d;
                            let w = &weights[((g * spec.heads + h) * m + i) * n..][..n];
                            let dout = &dy[qi..][cols.clone()];
                            for j in 0..n {
                                let vj = (g * n + j) * d;
                                dw[j] = dot(dout, &vd[vj..][cols.clone()]);
                                dv[vj..][cols.clone()]
                                    .iter_mut()
                                    .zip(dout)
                                    .for_each(|(a, b)| *a += w[j] * b);
                            }
                            let s: f64 = dw.iter().zip(w).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                let ds = w[j] * (dw[j] - s) * scale;
                                let kj = (g * n + j) * d;
                                for c in cols.clone() {
                                    dq[qi + c] += ds * kd[kj + c];
                                    dk[kj + c] += ds * qd[qi + c];
                                }
                            }
                        }
                    }
                }
                self.accumulate(*q, dq);
                self.accumulate(*k, dk);
                self.accumulate(*v, dv);
            }
        }
        self.nodes[id].op = op;
    }
}
