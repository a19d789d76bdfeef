//! Append-only computation tape with reverse-mode differentiation.
//!
//! Ops execute eagerly and record how their output was produced; nodes are
//! created strictly after their inputs, so a reverse scan over the tape is a
//! valid topological order for backpropagation. Every op validates shapes up
//! front and checks its output for NaN/Inf — a non-finite value anywhere is
//! reported as a numeric error rather than propagated.

use std::cell::{Cell, RefCell};

use super::kernels;
use super::param::{ParamId, ParamStore};
use super::{numel, sc, Scalar};
use crate::error::{Result, SentraError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: usize,
}

enum Op<T> {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    BiasAdd(usize, usize),
    ScaleByScalar(usize, usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    Reshape(usize),
    MeanAll(usize),
    SoftmaxXent { logits: usize, targets: Vec<usize> },
    BceLogits { logits: usize, targets: Vec<T> },
    NormalizeRows { x: usize, floor: T },
}

struct Node<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    param: Option<ParamId>,
    op: Op<T>,
    /// Forward by-products needed by backward (per-row stats etc.).
    aux: Vec<T>,
}

/// Reverse-mode autodiff tape.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    for &v in values {
        if !v.is_finite() {
            return Err(SentraError::Numeric(format!(
                "non-finite value produced by {what}"
            )));
        }
    }
    Ok(())
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(SentraError::shape(format!(
            "expected a rank-2 tensor, got shape {other:?}"
        ))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    fn push(
        &self,
        shape: Vec<usize>,
        values: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
        param: Option<ParamId>,
        aux: Vec<T>,
        what: &str,
    ) -> Result<Tensor> {
        if self.consumed.get() {
            return Err(SentraError::contract(
                "graph already consumed by backward; build a fresh graph",
            ));
        }
        if numel(&shape) != values.len() {
            return Err(SentraError::shape(format!(
                "shape {shape:?} implies {} values, got {} ({what})",
                numel(&shape),
                values.len()
            )));
        }
        check_finite(&values, what)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            values,
            grad: None,
            needs_grad,
            param,
            op,
            aux,
        });
        Ok(Tensor {
            id: nodes.len() - 1,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self, t: Tensor) -> Vec<usize> {
        self.nodes.borrow()[t.id].shape.clone()
    }

    pub fn values(&self, t: Tensor) -> Vec<T> {
        self.nodes.borrow()[t.id].values.clone()
    }

    /// Scalar value of a single-element tensor.
    pub fn scalar_value(&self, t: Tensor) -> Result<T> {
        let nodes = self.nodes.borrow();
        let node = &nodes[t.id];
        if node.values.len() != 1 {
            return Err(SentraError::contract(format!(
                "expected scalar, got shape {:?}",
                node.shape
            )));
        }
        Ok(node.values[0])
    }

    /// Gradient of `t` if backward reached it.
    pub fn grad(&self, t: Tensor) -> Option<Vec<T>> {
        self.nodes.borrow()[t.id].grad.clone()
    }

    /// Gradient of `t`, treating "not reached by backward" as zero.
    pub fn grad_or_zeros(&self, t: Tensor) -> Vec<T> {
        let nodes = self.nodes.borrow();
        let node = &nodes[t.id];
        node.grad
            .clone()
            .unwrap_or_else(|| vec![T::zero(); node.values.len()])
    }

    // ---- node constructors ------------------------------------------------

    /// Constant input (no gradient tracking).
    pub fn leaf(&self, shape: &[usize], values: Vec<T>) -> Result<Tensor> {
        self.push(shape.to_vec(), values, Op::Leaf, false, None, vec![], "leaf")
    }

    /// Input that participates in gradient checks.
    pub fn leaf_grad(&self, shape: &[usize], values: Vec<T>) -> Result<Tensor> {
        self.push(shape.to_vec(), values, Op::Leaf, true, None, vec![], "leaf")
    }

    /// Single-element constant.
    pub fn scalar(&self, v: T) -> Result<Tensor> {
        self.leaf(&[1], vec![v])
    }

    /// Bind a stored parameter as a differentiable leaf.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Result<Tensor> {
        let entry = store.entry(id);
        self.push(
            entry.shape.clone(),
            entry.values.clone(),
            Op::Leaf,
            true,
            Some(id),
            vec![],
            "param",
        )
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    // ---- ops ---------------------------------------------------------------

    /// `a[m x k] * b[k x n]` with a fixed left-to-right reduction.
    pub fn matmul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, ka, kb, n, va, vb) = {
            let nodes = self.nodes.borrow();
            let (m, ka) = rows_cols(&nodes[a.id].shape)?;
            let (kb, n) = rows_cols(&nodes[b.id].shape)?;
            (m, ka, kb, n, nodes[a.id].values.clone(), nodes[b.id].values.clone())
        };
        if ka != kb {
            return Err(SentraError::shape(format!(
                "matmul inner dimensions differ: {m}x{ka} vs {kb}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(&va, &vb, &mut out, m, ka, n);
        self.push(
            vec![m, n],
            out,
            Op::Matmul(a.id, b.id),
            self.needs(&[a.id, b.id]),
            None,
            vec![],
            "matmul",
        )
    }

    pub fn transpose(&self, a: Tensor) -> Result<Tensor> {
        let (m, n, va) = {
            let nodes = self.nodes.borrow();
            let (m, n) = rows_cols(&nodes[a.id].shape)?;
            (m, n, nodes[a.id].values.clone())
        };
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va[i * n + j];
            }
        }
        self.push(
            vec![n, m],
            out,
            Op::Transpose(a.id),
            self.needs(&[a.id]),
            None,
            vec![],
            "transpose",
        )
    }

    fn same_shape_binary(
        &self,
        a: Tensor,
        b: Tensor,
        what: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Tensor> {
        let (shape, values) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.id];
            let nb = &nodes[b.id];
            if na.shape != nb.shape {
                return Err(SentraError::shape(format!(
                    "{what}: shape mismatch {:?} vs {:?}",
                    na.shape, nb.shape
                )));
            }
            let values: Vec<T> = na
                .values
                .iter()
                .zip(nb.values.iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (na.shape.clone(), values)
        };
        self.push(shape, values, op, self.needs(&[a.id, b.id]), None, vec![], what)
    }

    pub fn add(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape_binary(a, b, "add", |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape_binary(a, b, "sub", |x, y| x - y, Op::Sub(a.id, b.id))
    }

    /// Elementwise product (also used for dropout masks).
    pub fn mul(&self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape_binary(a, b, "mul", |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn scale(&self, a: Tensor, c: T) -> Result<Tensor> {
        let (shape, values) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.id];
            (na.shape.clone(), na.values.iter().map(|&x| x * c).collect())
        };
        self.push(
            shape,
            values,
            Op::Scale(a.id, c),
            self.needs(&[a.id]),
            None,
            vec![],
            "scale",
        )
    }

    /// `mat[m x n] + vec[n]` broadcast over rows.
    pub fn bias_add(&self, mat: Tensor, vec_t: Tensor) -> Result<Tensor> {
        let (m, n, values) = {
            let nodes = self.nodes.borrow();
            let (m, n) = rows_cols(&nodes[mat.id].shape)?;
            let nv = &nodes[vec_t.id];
            if nv.shape != [n] {
                return Err(SentraError::shape(format!(
                    "bias_add: vector shape {:?} does not match {n} columns",
                    nv.shape
                )));
            }
            let mut values = nodes[mat.id].values.clone();
            for r in 0..m {
                for j in 0..n {
                    values[r * n + j] = values[r * n + j] + nv.values[j];
                }
            }
            (m, n, values)
        };
        self.push(
            vec![m, n],
            values,
            Op::BiasAdd(mat.id, vec_t.id),
            self.needs(&[mat.id, vec_t.id]),
            None,
            vec![],
            "bias_add",
        )
    }

    /// Multiply every element by a single-element tensor (e.g. a learned
    /// temperature); gradients flow to both operands.
    pub fn scale_by(&self, a: Tensor, s: Tensor) -> Result<Tensor> {
        let (shape, values) = {
            let nodes = self.nodes.borrow();
            let ns = &nodes[s.id];
            if ns.values.len() != 1 {
                return Err(SentraError::shape(format!(
                    "scale_by: scalar operand has shape {:?}",
                    ns.shape
                )));
            }
            let sv = ns.values[0];
            let na = &nodes[a.id];
            (na.shape.clone(), na.values.iter().map(|&x| x * sv).collect())
        };
        self.push(
            shape,
            values,
            Op::ScaleByScalar(a.id, s.id),
            self.needs(&[a.id, s.id]),
            None,
            vec![],
            "scale_by",
        )
    }

    fn unary(&self, a: Tensor, what: &str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Tensor> {
        let (shape, values) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.id];
            (na.shape.clone(), na.values.iter().map(|&x| f(x)).collect())
        };
        self.push(shape, values, op, self.needs(&[a.id]), None, vec![], what)
    }

    pub fn relu(&self, a: Tensor) -> Result<Tensor> {
        self.unary(a, "relu", |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a.id))
    }

    pub fn gelu(&self, a: Tensor) -> Result<Tensor> {
        self.unary(a, "gelu", kernels::gelu, Op::Gelu(a.id))
    }

    pub fn exp(&self, a: Tensor) -> Result<Tensor> {
        self.unary(a, "exp", |x| x.exp(), Op::Exp(a.id))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, a: Tensor) -> Result<Tensor> {
        let (m, n, mut values) = {
            let nodes = self.nodes.borrow();
            let (m, n) = rows_cols(&nodes[a.id].shape)?;
            (m, n, nodes[a.id].values.clone())
        };
        kernels::softmax_rows_inplace(&mut values, m, n);
        self.push(
            vec![m, n],
            values,
            Op::SoftmaxRows(a.id),
            self.needs(&[a.id]),
            None,
            vec![],
            "softmax_rows",
        )
    }

    /// Per-last-axis standardization followed by an affine transform.
    /// Accepts `[n]` or `[m x n]` input; `gain` and `bias` are `[n]`.
    pub fn layer_norm(&self, x: Tensor, gain: Tensor, bias: Tensor, eps: T) -> Result<Tensor> {
        if eps <= T::zero() {
            return Err(SentraError::contract("layer_norm: eps must be > 0"));
        }
        let (shape, values, aux) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let (m, n) = match nx.shape.as_slice() {
                [n] => (1usize, *n),
                [m, n] => (*m, *n),
                other => {
                    return Err(SentraError::shape(format!(
                        "layer_norm: unsupported rank for shape {other:?}"
                    )))
                }
            };
            let ng = &nodes[gain.id];
            let nb = &nodes[bias.id];
            if ng.shape != [n] || nb.shape != [n] {
                return Err(SentraError::shape(format!(
                    "layer_norm: gain/bias must be [{n}], got {:?}/{:?}",
                    ng.shape, nb.shape
                )));
            }
            let inv_n = T::one() / sc::<T>(n as f64);
            let mut values = vec![T::zero(); m * n];
            let mut aux = vec![T::zero(); 2 * m];
            for r in 0..m {
                let row = &nx.values[r * n..(r + 1) * n];
                let mut mean = T::zero();
                for &v in row {
                    mean = mean + v;
                }
                mean = mean * inv_n;
                let mut var = T::zero();
                for &v in row {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var * inv_n;
                let rstd = T::one() / (var + eps).sqrt();
                aux[2 * r] = mean;
                aux[2 * r + 1] = rstd;
                for j in 0..n {
                    let xhat = (row[j] - mean) * rstd;
                    values[r * n + j] = ng.values[j] * xhat + nb.values[j];
                }
            }
            (nx.shape.clone(), values, aux)
        };
        self.push(
            shape,
            values,
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
            },
            self.needs(&[x.id, gain.id, bias.id]),
            None,
            aux,
            "layer_norm",
        )
    }

    /// Stack rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(SentraError::contract("concat_rows: no inputs"));
        }
        let (rows, cols, values) = {
            let nodes = self.nodes.borrow();
            let (_, cols) = rows_cols(&nodes[parts[0].id].shape)?;
            let mut rows = 0usize;
            let mut values = Vec::new();
            for p in parts {
                let (m, n) = rows_cols(&nodes[p.id].shape)?;
                if n != cols {
                    return Err(SentraError::shape(format!(
                        "concat_rows: column mismatch {n} vs {cols}"
                    )));
                }
                rows += m;
                values.extend_from_slice(&nodes[p.id].values);
            }
            (rows, cols, values)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        self.push(
            vec![rows, cols],
            values,
            Op::ConcatRows(ids),
            needs,
            None,
            vec![],
            "concat_rows",
        )
    }

    /// Concatenate rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(SentraError::contract("concat_cols: no inputs"));
        }
        let (rows, cols, values) = {
            let nodes = self.nodes.borrow();
            let (rows, _) = rows_cols(&nodes[parts[0].id].shape)?;
            let mut widths = Vec::with_capacity(parts.len());
            let mut cols = 0usize;
            for p in parts {
                let (m, n) = rows_cols(&nodes[p.id].shape)?;
                if m != rows {
                    return Err(SentraError::shape(format!(
                        "concat_cols: row mismatch {m} vs {rows}"
                    )));
                }
                widths.push(n);
                cols += n;
            }
            let mut values = vec![T::zero(); rows * cols];
            for r in 0..rows {
                let mut at = 0usize;
                for (p, &w) in parts.iter().zip(widths.iter()) {
                    let src = &nodes[p.id].values[r * w..(r + 1) * w];
                    values[r * cols + at..r * cols + at + w].copy_from_slice(src);
                    at += w;
                }
            }
            (rows, cols, values)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        self.push(
            vec![rows, cols],
            values,
            Op::ConcatCols(ids),
            needs,
            None,
            vec![],
            "concat_cols",
        )
    }

    pub fn slice_rows(&self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (n, values) = {
            let nodes = self.nodes.borrow();
            let (m, n) = rows_cols(&nodes[x.id].shape)?;
            if start + len > m {
                return Err(SentraError::shape(format!(
                    "slice_rows: rows {start}..{} out of 0..{m}",
                    start + len
                )));
            }
            (n, nodes[x.id].values[start * n..(start + len) * n].to_vec())
        };
        self.push(
            vec![len, n],
            values,
            Op::SliceRows { x: x.id, start },
            self.needs(&[x.id]),
            None,
            vec![],
            "slice_rows",
        )
    }

    pub fn slice_cols(&self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, values) = {
            let nodes = self.nodes.borrow();
            let (m, n) = rows_cols(&nodes[x.id].shape)?;
            if start + len > n {
                return Err(SentraError::shape(format!(
                    "slice_cols: cols {start}..{} out of 0..{n}",
                    start + len
                )));
            }
            let mut values = vec![T::zero(); m * len];
            for r in 0..m {
                values[r * len..(r + 1) * len]
                    .copy_from_slice(&nodes[x.id].values[r * n + start..r * n + start + len]);
            }
            (m, values)
        };
        self.push(
            vec![m, len],
            values,
            Op::SliceCols { x: x.id, start },
            self.needs(&[x.id]),
            None,
            vec![],
            "slice_cols",
        )
    }

    /// Row lookup into a table, e.g. token embeddings. Gradients scatter-add
    /// back into the table rows.
    pub fn gather_rows(&self, table: Tensor, ids: &[usize]) -> Result<Tensor> {
        let (d, values) = {
            let nodes = self.nodes.borrow();
            let (v, d) = rows_cols(&nodes[table.id].shape)?;
            let mut values = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(SentraError::Index(format!(
                        "gather_rows: row {id} out of 0..{v}"
                    )));
                }
                values.extend_from_slice(&nodes[table.id].values[id * d..(id + 1) * d]);
            }
            (d, values)
        };
        self.push(
            vec![ids.len(), d],
            values,
            Op::GatherRows {
                table: table.id,
                ids: ids.to_vec(),
            },
            self.needs(&[table.id]),
            None,
            vec![],
            "gather_rows",
        )
    }

    /// Same values, new shape; element count must match.
    pub fn reshape(&self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        let values = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            if numel(shape) != nx.values.len() {
                return Err(SentraError::shape(format!(
                    "reshape: {:?} -> {shape:?} changes element count",
                    nx.shape
                )));
            }
            nx.values.clone()
        };
        self.push(
            shape.to_vec(),
            values,
            Op::Reshape(x.id),
            self.needs(&[x.id]),
            None,
            vec![],
            "reshape",
        )
    }

    /// Mean over all elements, yielding a scalar.
    pub fn mean_all(&self, x: Tensor) -> Result<Tensor> {
        let value = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.id];
            let mut acc = T::zero();
            for &v in &nx.values {
                acc = acc + v;
            }
            acc / sc::<T>(nx.values.len() as f64)
        };
        self.push(
            vec![1],
            vec![value],
            Op::MeanAll(x.id),
            self.needs(&[x.id]),
            None,
            vec![],
            "mean_all",
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`, stabilized by
    /// row-max subtraction.
    pub fn softmax_cross_entropy(&self, logits: Tensor, targets: &[usize]) -> Result<Tensor> {
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            let (m, c) = rows_cols(&nodes[logits.id].shape)?;
            if targets.len() != m {
                return Err(SentraError::shape(format!(
                    "softmax_cross_entropy: {m} rows but {} targets",
                    targets.len()
                )));
            }
            for &t in targets {
                if t >= c {
                    return Err(SentraError::Index(format!(
                        "softmax_cross_entropy: target {t} out of 0..{c}"
                    )));
                }
            }
            let mut probs = nodes[logits.id].values.clone();
            kernels::softmax_rows_inplace(&mut probs, m, c);
            let mut total = T::zero();
            for (r, &t) in targets.iter().enumerate() {
                let row = &nodes[logits.id].values[r * c..(r + 1) * c];
                let lse = kernels::log_sum_exp(row);
                total = total + (lse - row[t]);
            }
            (total / sc::<T>(m as f64), probs)
        };
        self.push(
            vec![1],
            vec![value],
            Op::SoftmaxXent {
                logits: logits.id,
                targets: targets.to_vec(),
            },
            self.needs(&[logits.id]),
            None,
            probs,
            "softmax_cross_entropy",
        )
    }

    /// Mean binary cross-entropy on logits; `targets` are 0/1 floats
    /// matched elementwise against the flattened logits.
    pub fn bce_with_logits(&self, logits: Tensor, targets: &[T]) -> Result<Tensor> {
        let value = {
            let nodes = self.nodes.borrow();
            let nl = &nodes[logits.id];
            if nl.values.len() != targets.len() {
                return Err(SentraError::shape(format!(
                    "bce_with_logits: {} logits but {} targets",
                    nl.values.len(),
                    targets.len()
                )));
            }
            let mut total = T::zero();
            for (&z, &y) in nl.values.iter().zip(targets.iter()) {
                let pos = if z > T::zero() { z } else { T::zero() };
                total = total + pos - z * y + (T::one() + (-z.abs()).exp()).ln();
            }
            total / sc::<T>(targets.len() as f64)
        };
        self.push(
            vec![1],
            vec![value],
            Op::BceLogits {
                logits: logits.id,
                targets: targets.to_vec(),
            },
            self.needs(&[logits.id]),
            None,
            vec![],
            "bce_with_logits",
        )
    }

    /// L2-normalize each row; norms are floored to keep zero rows finite.
    pub fn normalize_rows(&self, x: Tensor, floor: T) -> Result<Tensor> {
        let (shape, values, aux) = {
            let nodes = self.nodes.borrow();
            let (m, n) = rows_cols(&nodes[x.id].shape)?;
            let mut values = vec![T::zero(); m * n];
            let mut aux = vec![T::zero(); m];
            for r in 0..m {
                let row = &nodes[x.id].values[r * n..(r + 1) * n];
                let mut sq = T::zero();
                for &v in row {
                    sq = sq + v * v;
                }
                let norm = sq.sqrt().max(floor);
                aux[r] = norm;
                for j in 0..n {
                    values[r * n + j] = row[j] / norm;
                }
            }
            (nodes[x.id].shape.clone(), values, aux)
        };
        self.push(
            shape,
            values,
            Op::NormalizeRows { x: x.id, floor },
            self.needs(&[x.id]),
            None,
            aux,
            "normalize_rows",
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Backpropagate from a scalar loss, populating `grad` on every node that
    /// requires gradients. The graph is consumed: no further ops or backward
    /// calls are accepted.
    pub fn backward(&self, loss: Tensor) -> Result<()> {
        if self.consumed.get() {
            return Err(SentraError::contract("backward already ran on this graph"));
        }
        self.consumed.set(true);
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].values.len() != 1 {
            return Err(SentraError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for i in (0..loss.id + 1).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].needs_grad {
                backprop_one(&nodes, i, &g, &mut grads);
                nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }

    /// Sum gradients of all leaves bound to store parameters, aligned to the
    /// store layout. Parameters the loss never touched get zero gradients.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<Vec<T>> = store
            .iter()
            .map(|e| vec![T::zero(); e.values.len()])
            .collect();
        for node in nodes.iter() {
            if let (Some(pid), Some(g)) = (node.param, node.grad.as_ref()) {
                let acc = &mut out[pid];
                for (a, &gv) in acc.iter_mut().zip(g.iter()) {
                    *a = *a + gv;
                }
            }
        }
        out
    }
}

fn add_into<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let len = nodes[id].values.len();
    let buf = grads[id].get_or_insert_with(|| vec![T::zero(); len]);
    f(buf.as_mut_slice());
}

fn backprop_one<T: Scalar>(
    nodes: &[Node<T>],
    i: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            add_into(grads, nodes, *a, |buf| {
                kernels::matmul_nt_acc(g, &nodes[*b].values, buf, m, n, k);
            });
            add_into(grads, nodes, *b, |buf| {
                kernels::matmul_tn_acc(&nodes[*a].values, g, buf, m, k, n);
            });
        }
        Op::Transpose(a) => {
            let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            add_into(grads, nodes, *a, |buf| {
                for i0 in 0..m {
                    for j in 0..n {
                        buf[i0 * n + j] = buf[i0 * n + j] + g[j * m + i0];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            add_into(grads, nodes, *a, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                    *o = *o + gv;
                }
            });
            add_into(grads, nodes, *b, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                    *o = *o + gv;
                }
            });
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, *a, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                    *o = *o + gv;
                }
            });
            add_into(grads, nodes, *b, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                    *o = *o - gv;
                }
            });
        }
        Op::Mul(a, b) => {
            add_into(grads, nodes, *a, |buf| {
                for ((o, &gv), &bv) in buf.iter_mut().zip(g.iter()).zip(nodes[*b].values.iter()) {
                    *o = *o + gv * bv;
                }
            });
            add_into(grads, nodes, *b, |buf| {
                for ((o, &gv), &av) in buf.iter_mut().zip(g.iter()).zip(nodes[*a].values.iter()) {
                    *o = *o + gv * av;
                }
            });
        }
        Op::Scale(a, c) => {
            let c = *c;
            add_into(grads, nodes, *a, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                    *o = *o + gv * c;
                }
            });
        }
        Op::BiasAdd(mat, vec_t) => {
            let n = nodes[*vec_t].values.len();
            let m = nodes[*mat].shape[0];
            add_into(grads, nodes, *mat, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                    *o = *o + gv;
                }
            });
            add_into(grads, nodes, *vec_t, |buf| {
                for r in 0..m {
                    for j in 0..n {
                        buf[j] = buf[j] + g[r * n + j];
                    }
                }
            });
        }
        Op::ScaleByScalar(a, s) => {
            let sv = nodes[*s].values[0];
            add_into(grads, nodes, *a, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                    *o = *o + gv * sv;
                }
            });
            add_into(grads, nodes, *s, |buf| {
                let mut acc = T::zero();
                for (&gv, &av) in g.iter().zip(nodes[*a].values.iter()) {
                    acc = acc + gv * av;
                }
                buf[0] = buf[0] + acc;
            });
        }
        Op::Relu(a) => {
            add_into(grads, nodes, *a, |buf| {
                for ((o, &gv), &x) in buf.iter_mut().zip(g.iter()).zip(nodes[*a].values.iter()) {
                    if x > T::zero() {
                        *o = *o + gv;
                    }
                }
            });
        }
        Op::Gelu(a) => {
            add_into(grads, nodes, *a, |buf| {
                for ((o, &gv), &x) in buf.iter_mut().zip(g.iter()).zip(nodes[*a].values.iter()) {
                    *o = *o + gv * kernels::gelu_grad(x);
                }
            });
        }
        Op::Exp(a) => {
            add_into(grads, nodes, *a, |buf| {
                for ((o, &gv), &y) in buf.iter_mut().zip(g.iter()).zip(node.values.iter()) {
                    *o = *o + gv * y;
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let (m, n) = (node.shape[0], node.shape[1]);
            add_into(grads, nodes, *a, |buf| {
                for r in 0..m {
                    let p = &node.values[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut dot = T::zero();
                    for (&gv, &pv) in gr.iter().zip(p.iter()) {
                        dot = dot + gv * pv;
                    }
                    let out = &mut buf[r * n..(r + 1) * n];
                    for j in 0..n {
                        out[j] = out[j] + p[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias } => {
            let n = nodes[*gain].values.len();
            let m = node.values.len() / n;
            let inv_n = T::one() / sc::<T>(n as f64);
            add_into(grads, nodes, *gain, |buf| {
                for r in 0..m {
                    let mean = node.aux[2 * r];
                    let rstd = node.aux[2 * r + 1];
                    for j in 0..n {
                        let xhat = (nodes[*x].values[r * n + j] - mean) * rstd;
                        buf[j] = buf[j] + g[r * n + j] * xhat;
                    }
                }
            });
            add_into(grads, nodes, *bias, |buf| {
                for r in 0..m {
                    for j in 0..n {
                        buf[j] = buf[j] + g[r * n + j];
                    }
                }
            });
            add_into(grads, nodes, *x, |buf| {
                for r in 0..m {
                    let mean = node.aux[2 * r];
                    let rstd = node.aux[2 * r + 1];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..n {
                        let xhat = (nodes[*x].values[r * n + j] - mean) * rstd;
                        let dxhat = g[r * n + j] * nodes[*gain].values[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                    let mean_dxhat = sum_dxhat * inv_n;
                    let mean_dxhat_xhat = sum_dxhat_xhat * inv_n;
                    for j in 0..n {
                        let xhat = (nodes[*x].values[r * n + j] - mean) * rstd;
                        let dxhat = g[r * n + j] * nodes[*gain].values[j];
                        buf[r * n + j] =
                            buf[r * n + j] + rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let cols = node.shape[1];
            let mut at = 0usize;
            for &p in parts {
                let rows = nodes[p].shape[0];
                let span = rows * cols;
                let gpart = &g[at..at + span];
                add_into(grads, nodes, p, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(gpart.iter()) {
                        *o = *o + gv;
                    }
                });
                at += span;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = node.shape[0];
            let total = node.shape[1];
            let mut at = 0usize;
            for &p in parts {
                let w = nodes[p].shape[1];
                add_into(grads, nodes, p, |buf| {
                    for r in 0..rows {
                        for j in 0..w {
                            buf[r * w + j] = buf[r * w + j] + g[r * total + at + j];
                        }
                    }
                });
                at += w;
            }
        }
        Op::SliceRows { x, start } => {
            let n = node.shape[1];
            let len = node.shape[0];
            add_into(grads, nodes, *x, |buf| {
                for r in 0..len {
                    for j in 0..n {
                        buf[(start + r) * n + j] = buf[(start + r) * n + j] + g[r * n + j];
                    }
                }
            });
        }
        Op::SliceCols { x, start } => {
            let full = nodes[*x].shape[1];
            let (m, w) = (node.shape[0], node.shape[1]);
            add_into(grads, nodes, *x, |buf| {
                for r in 0..m {
                    for j in 0..w {
                        buf[r * full + start + j] = buf[r * full + start + j] + g[r * w + j];
                    }
                }
            });
        }
        Op::GatherRows { table, ids } => {
            let d = node.shape[1];
            add_into(grads, nodes, *table, |buf| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        buf[id * d + j] = buf[id * d + j] + g[r * d + j];
                    }
                }
            });
        }
        Op::Reshape(a) => {
            add_into(grads, nodes, *a, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                    *o = *o + gv;
                }
            });
        }
        Op::MeanAll(a) => {
            let inv = T::one() / sc::<T>(nodes[*a].values.len() as f64);
            let gv = g[0] * inv;
            add_into(grads, nodes, *a, |buf| {
                for o in buf.iter_mut() {
                    *o = *o + gv;
                }
            });
        }
        Op::SoftmaxXent { logits, targets } => {
            let c = nodes[*logits].shape[1];
            let m = targets.len();
            let scale = g[0] / sc::<T>(m as f64);
            add_into(grads, nodes, *logits, |buf| {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let p = node.aux[r * c + j];
                        let delta = if j == t { T::one() } else { T::zero() };
                        buf[r * c + j] = buf[r * c + j] + scale * (p - delta);
                    }
                }
            });
        }
        Op::BceLogits { logits, targets } => {
            let m = targets.len();
            let scale = g[0] / sc::<T>(m as f64);
            add_into(grads, nodes, *logits, |buf| {
                for (j, (&z, &y)) in nodes[*logits]
                    .values
                    .iter()
                    .zip(targets.iter())
                    .enumerate()
                {
                    buf[j] = buf[j] + scale * (kernels::sigmoid(z) - y);
                }
            });
        }
        Op::NormalizeRows { x, floor } => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let floor = *floor;
            add_into(grads, nodes, *x, |buf| {
                for r in 0..m {
                    let norm = node.aux[r];
                    let y = &node.values[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    if norm > floor {
                        let mut dot = T::zero();
                        for (&yv, &gv) in y.iter().zip(gr.iter()) {
                            dot = dot + yv * gv;
                        }
                        for j in 0..n {
                            buf[r * n + j] = buf[r * n + j] + (gr[j] - y[j] * dot) / norm;
                        }
                    } else {
                        // Norm pinned at the floor: the map is x/floor, a
                        // plain linear scaling.
                        for j in 0..n {
                            buf[r * n + j] = buf[r * n + j] + gr[j] / norm;
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
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g64() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let g = g64();
        let eye = g.leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = g.leaf(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(g.values(g.matmul(eye, a).unwrap()), vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(g.values(g.matmul(a, eye).unwrap()), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let g = g64();
        let a = g.leaf(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = g.leaf(&[2, 1], vec![0.0, 0.0]).unwrap();
        assert_eq!(g.values(g.matmul(a, b).unwrap()), vec![0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut oracle = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                oracle[i * n + j] = acc;
            }
        }
        let g = g64();
        let ta = g.leaf(&[m, k], a).unwrap();
        let tb = g.leaf(&[k, n], b).unwrap();
        let got = g.values(g.matmul(ta, tb).unwrap());
        for (x, y) in got.iter().zip(oracle.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_dimension_mismatch_is_shape_error() {
        let g = g64();
        let a = g.leaf(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.leaf(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(SentraError::Shape(_))));
    }

    #[test]
    fn softmax_xent_uniform_row() {
        let g = g64();
        let logits = g.leaf(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[1]).unwrap();
        assert!((g.scalar_value(loss).unwrap() - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_is_stable_under_large_logits() {
        let g = g64();
        let logits = g.leaf(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        let v = g.scalar_value(loss).unwrap();
        assert!(v.is_finite());
        assert!(v.abs() < 1e-6);
    }

    #[test]
    fn softmax_xent_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, c) = (4, 5);
        let logits: Vec<f64> = (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mut expect = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits[r * c..(r + 1) * c];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[t].exp() / denom).ln();
        }
        expect /= n as f64;
        let g = g64();
        let tl = g.leaf(&[n, c], logits).unwrap();
        let loss = g.softmax_cross_entropy(tl, &targets).unwrap();
        assert!((g.scalar_value(loss).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn softmax_xent_rejects_out_of_range_target() {
        let g = g64();
        let logits = g.leaf(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            g.softmax_cross_entropy(logits, &[3]),
            Err(SentraError::Index(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_xent_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (m, n) = (rng.random_range(1..5), rng.random_range(2..7));
            let vals: Vec<f64> = (0..m * n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g = g64();
            let t = g.leaf(&[m, n], vals.clone()).unwrap();
            let p = g.values(g.softmax_rows(t).unwrap());
            for r in 0..m {
                let s: f64 = p[r * n..(r + 1) * n].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let loss = g.softmax_cross_entropy(t, &targets).unwrap();
            assert!(g.scalar_value(loss).unwrap() >= 0.0);
        }
    }

    #[test]
    fn layer_norm_constant_input_maps_to_bias() {
        let g = g64();
        let x = g.leaf(&[3], vec![5.0, 5.0, 5.0]).unwrap();
        let gain = g.leaf(&[3], vec![1.0; 3]).unwrap();
        let bias = g.leaf(&[3], vec![0.0; 3]).unwrap();
        let y = g.values(g.layer_norm(x, gain, bias, 1e-5).unwrap());
        for v in y {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_keeps_standardized_input() {
        let g = g64();
        let x = g.leaf(&[2], vec![-1.0, 1.0]).unwrap();
        let gain = g.leaf(&[2], vec![1.0; 2]).unwrap();
        let bias = g.leaf(&[2], vec![0.0; 2]).unwrap();
        let y = g.values(g.layer_norm(x, gain, bias, 1e-5).unwrap());
        assert!((y[0] + 1.0).abs() < 1e-4);
        assert!((y[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_output_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 16;
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = g64();
        let x = g.leaf(&[n], vals).unwrap();
        let gain = g.leaf(&[n], vec![1.0; n]).unwrap();
        let bias = g.leaf(&[n], vec![0.0; n]).unwrap();
        let y = g.values(g.layer_norm(x, gain, bias, 1e-8).unwrap());
        let mean: f64 = y.iter().sum::<f64>() / n as f64;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn backward_sum_of_squares() {
        let g = g64();
        let x = g.leaf_grad(&[1, 2], vec![1.0, 2.0]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let total = g.scale(g.mean_all(sq).unwrap(), 2.0).unwrap(); // sum = mean * numel
        g.backward(total).unwrap();
        assert_eq!(g.grad(x).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_constant_leaves_zero_grad() {
        let g = g64();
        let x = g.leaf_grad(&[2, 1], vec![1.0, 2.0]).unwrap();
        let c = g.leaf(&[1], vec![42.0]).unwrap();
        let loss = g.mean_all(c).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad_or_zeros(x), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = g64();
        let x = g.leaf_grad(&[2, 1], vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(SentraError::Contract(_))));
    }

    #[test]
    fn graph_is_consumed_after_backward() {
        let g = g64();
        let x = g.leaf_grad(&[1, 1], vec![2.0]).unwrap();
        let loss = g.mean_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
        assert!(g.leaf(&[1], vec![0.0]).is_err());
    }

    #[test]
    fn non_finite_values_are_numeric_errors() {
        let g = g64();
        assert!(matches!(
            g.leaf(&[1], vec![f64::NAN]),
            Err(SentraError::Numeric(_))
        ));
        let x = g.leaf(&[1, 1], vec![1e308]).unwrap();
        assert!(matches!(g.exp(x), Err(SentraError::Numeric(_))));
    }

    #[test]
    fn determinism_two_runs_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let vals: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = g64();
            let a = g.leaf(&[3, 4], vals.clone()).unwrap();
            let b = g.leaf(&[4, 3], vals).unwrap();
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax_rows(c).unwrap();
            g.values(s).iter().map(|v| v.to_bits()).collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    /// Build a small expression touching an op under test and gradcheck it.
    fn gradcheck_expr<F>(build: F, inputs: &[Vec<f64>]) -> f64
    where
        F: Fn(&Graph<f64>, &[Tensor]) -> Tensor,
    {
        let forward = |vals: &[Vec<f64>]| -> f64 {
            let g = g64();
            let leaves: Vec<Tensor> = vals
                .iter()
                .map(|v| g.leaf(&[v.len()], v.clone()).unwrap())
                .collect();
            let out = build(&g, &leaves);
            g.scalar_value(out).unwrap()
        };
        let g = g64();
        let leaves: Vec<Tensor> = inputs
            .iter()
            .map(|v| g.leaf_grad(&[v.len()], v.clone()).unwrap())
            .collect();
        let out = build(&g, &leaves);
        g.backward(out).unwrap();
        let analytic: Vec<Vec<f64>> = leaves.iter().map(|&l| g.grad_or_zeros(l)).collect();
        crate::tensor::gradcheck::check(forward, inputs, &analytic)
    }

    #[test]
    fn gradcheck_layer_norm_gelu_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let inputs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let err = gradcheck_expr(
            |g, leaves| {
                let ln = g.layer_norm(leaves[0], leaves[1], leaves[2], 1e-5).unwrap();
                let act = g.gelu(ln).unwrap();
                g.mean_all(act).unwrap()
            },
            &inputs,
        );
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn gradcheck_normalize_rows_floor_branch() {
        // One healthy row plus one row pinned well under the norm floor, so
        // finite-difference perturbations stay inside the linear regime.
        let inputs = vec![vec![0.9, -0.7, 0.4, 0.05, -0.03, 0.02]];
        let err = gradcheck_expr(
            |g, leaves| {
                let m = g.reshape(leaves[0], &[2, 3]).unwrap();
                let nrm = g.normalize_rows(m, 0.5).unwrap();
                g.mean_all(nrm).unwrap()
            },
            &inputs,
        );
        assert!(err < 1e-4, "rel err {err}");
    }
}
