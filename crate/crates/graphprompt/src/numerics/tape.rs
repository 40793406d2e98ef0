//! Tape-based reverse-mode automatic differentiation over dense arrays.
//!
//! A forward pass records operations on a [`Tape`]; [`Tape::backward`]
//! replays them in reverse, accumulating gradients into every node that
//! was created with `needs_grad`. Values are reference-counted so that
//! binding a parameter to a tape never copies its buffer.
//!
//! Rank conventions: matrices are 2-D, vectors 1-D, scalars 0-D. All
//! operations validate operand shapes and report the offending
//! operation by name.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use ndarray::{ArrayD, Axis, IxDyn};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    recording: bool,
}

struct Node<S: Scalar> {
    value: Rc<ArrayD<S>>,
    needs_grad: bool,
    op: Op<S>,
}

enum Op<S: Scalar> {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    AddRow {
        a: NodeId,
        bias: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: S,
    },
    Relu {
        a: NodeId,
    },
    Tanh {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Gelu {
        a: NodeId,
    },
    SoftmaxRows {
        a: NodeId,
    },
    LayerNorm {
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Rc<ArrayD<S>>,
        rstd: Vec<S>,
    },
    GatherRows {
        table: NodeId,
        indices: Rc<Vec<usize>>,
    },
    MeanAxis0 {
        a: NodeId,
    },
    MaxAxis0 {
        a: NodeId,
        argmax: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    ConcatColsBroadcast {
        mat: NodeId,
        vec: NodeId,
    },
    SliceRows {
        a: NodeId,
        start: usize,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    Transpose {
        a: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Rc<Vec<Option<usize>>>,
        probs: Rc<ArrayD<S>>,
        count: usize,
    },
    MeanScalars {
        parts: Vec<NodeId>,
    },
    RowSum {
        a: NodeId,
    },
    PowConst {
        a: NodeId,
        p: f64,
    },
    MulColBroadcast {
        mat: NodeId,
        col: NodeId,
    },
    MulRowBroadcast {
        mat: NodeId,
        row: NodeId,
    },
    AssembleColumns {
        columns: Vec<(NodeId, Rc<Vec<usize>>)>,
    },
    SumAll {
        a: NodeId,
    },
    VecsToRow {
        parts: Vec<NodeId>,
    },
    RowToVec {
        a: NodeId,
    },
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads<S: Scalar> {
    g: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<S>> {
        self.g[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<S>> {
        self.g[id.0].take()
    }
}

fn dims2(v: &ArrayD<impl Scalar>) -> Option<(usize, usize)> {
    let s = v.shape();
    if s.len() == 2 {
        Some((s[0], s[1]))
    } else {
        None
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that computes forward values but records nothing; used
    /// for decoding and evaluation where no gradients are needed.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<S>, needs_grad: bool, op: Op<S>) -> NodeId {
        self.push_shared(Rc::new(value), needs_grad, op)
    }

    fn push_shared(&mut self, value: Rc<ArrayD<S>>, needs_grad: bool, op: Op<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        if self.recording {
            self.nodes.push(Node {
                value,
                needs_grad,
                op,
            });
        } else {
            self.nodes.push(Node {
                value,
                needs_grad: false,
                op: Op::Leaf,
            });
        }
        id
    }

    pub fn leaf(&mut self, value: ArrayD<S>, needs_grad: bool) -> NodeId {
        self.push(value, needs_grad, Op::Leaf)
    }

    pub fn leaf_shared(&mut self, value: Rc<ArrayD<S>>, needs_grad: bool) -> NodeId {
        self.push_shared(value, needs_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: ArrayD<S>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, value: S) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, id: NodeId) -> Rc<ArrayD<S>> {
        Rc::clone(&self.nodes[id.0].value)
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        *self.nodes[id.0]
            .value
            .first()
            .expect("scalar_value on empty tensor")
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn out_grad(&self, a: NodeId) -> bool {
        self.nodes[a.0].needs_grad
    }

    fn out_grad2(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
    }

    // ---- binary ops -----------------------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (am, ak) = dims2(&va)
            .ok_or_else(|| Error::shape("matmul", format!("lhs rank {} != 2", va.ndim())))?;
        let (bk, bn) = dims2(&vb)
            .ok_or_else(|| Error::shape("matmul", format!("rhs rank {} != 2", vb.ndim())))?;
        if ak != bk {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {am}x{ak} vs {bk}x{bn}"),
            ));
        }
        let a2 = va.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = vb.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let out = a2.dot(&b2).into_dyn();
        let ng = self.out_grad2(a, b);
        Ok(self.push(out, ng, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = &*va + &*vb;
        let ng = self.out_grad2(a, b);
        Ok(self.push(out, ng, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = &*va - &*vb;
        let ng = self.out_grad2(a, b);
        Ok(self.push(out, ng, Op::Sub { a, b }))
    }

    /// `[n,d] + [d]` row-broadcast bias add.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        let (_, d) = dims2(&va)
            .ok_or_else(|| Error::shape("add_row", format!("lhs rank {} != 2", va.ndim())))?;
        if vb.ndim() != 1 || vb.len() != d {
            return Err(Error::shape(
                "add_row",
                format!("bias shape {:?} vs width {d}", vb.shape()),
            ));
        }
        let mut out = (*va).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (x, b) in row.iter_mut().zip(vb.iter()) {
                *x = *x + *b;
            }
        }
        let ng = self.out_grad2(a, bias);
        Ok(self.push(out, ng, Op::AddRow { a, bias }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = &*va * &*vb;
        let ng = self.out_grad2(a, b);
        Ok(self.push(out, ng, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let va = self.value(a);
        let out = va.mapv(|x| x * c);
        let ng = self.out_grad(a);
        self.push(out, ng, Op::Scale { a, c })
    }

    // ---- elementwise nonlinearities -------------------------------------

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let out = va.mapv(|x| if x > S::zero() { x } else { S::zero() });
        let ng = self.out_grad(a);
        self.push(out, ng, Op::Relu { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let out = va.mapv(|x| x.tanh());
        let ng = self.out_grad(a);
        self.push(out, ng, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let out = va.mapv(sigmoid_s);
        let ng = self.out_grad(a);
        self.push(out, ng, Op::Sigmoid { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let out = va.mapv(gelu_s);
        let ng = self.out_grad(a);
        self.push(out, ng, Op::Gelu { a })
    }

    // ---- structured ops -------------------------------------------------

    /// Row-wise softmax of a 2-D tensor, stable under large inputs.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        dims2(&va)
            .ok_or_else(|| Error::shape("softmax", format!("rank {} != 2", va.ndim())))?;
        let mut out = (*va).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                denom = denom + *x;
            }
            for x in row.iter_mut() {
                *x = *x / denom;
            }
        }
        let ng = self.out_grad(a);
        Ok(self.push(out, ng, Op::SoftmaxRows { a }))
    }

    /// Layer normalization over the last axis of a 2-D tensor with
    /// learnable scale and shift.
    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let va = self.value(a);
        let (n, d) = dims2(&va)
            .ok_or_else(|| Error::shape("layer_norm", format!("rank {} != 2", va.ndim())))?;
        let vg = self.value(gamma);
        let vb = self.value(beta);
        if vg.ndim() != 1 || vg.len() != d || vb.ndim() != 1 || vb.len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} vs width {d}",
                    vg.shape(),
                    vb.shape()
                ),
            ));
        }
        let epss = S::from_f64(eps);
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut xhat = (*va).clone();
        let mut rstd = Vec::with_capacity(n);
        for mut row in xhat.axis_iter_mut(Axis(0)) {
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row
                .iter()
                .map(|&x| (x - mean) * (x - mean))
                .sum::<S>()
                * inv_d;
            let r = (var + epss).sqrt().recip();
            rstd.push(r);
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
        }
        let mut out = xhat.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, x) in row.iter_mut().enumerate() {
                *x = *x * vg[j] + vb[j];
            }
        }
        let xhat = Rc::new(xhat);
        let ng = self.out_grad2(a, gamma) || self.out_grad(beta);
        Ok(self.push(
            out,
            ng,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Select rows of a 2-D tensor by index (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, indices: Rc<Vec<usize>>) -> Result<NodeId> {
        let vt = self.value(table);
        let (r, d) = dims2(&vt)
            .ok_or_else(|| Error::shape("gather_rows", format!("rank {} != 2", vt.ndim())))?;
        let mut out = ArrayD::zeros(IxDyn(&[indices.len(), d]));
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= r {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {idx} out of range for {r} rows"),
                ));
            }
            for j in 0..d {
                out[[i, j]] = vt[[idx, j]];
            }
        }
        let ng = self.out_grad(table);
        Ok(self.push(out, ng, Op::GatherRows { table, indices }))
    }

    /// Column-wise mean of a 2-D tensor: `[n,d] -> [d]`.
    pub fn mean_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (n, d) = dims2(&va)
            .ok_or_else(|| Error::shape("mean_axis0", format!("rank {} != 2", va.ndim())))?;
        if n == 0 {
            return Err(Error::shape("mean_axis0", "zero rows".to_string()));
        }
        let inv = S::from_f64(1.0 / n as f64);
        let mut out = ArrayD::zeros(IxDyn(&[d]));
        for i in 0..n {
            for j in 0..d {
                out[j] = out[j] + va[[i, j]] * inv;
            }
        }
        let ng = self.out_grad(a);
        Ok(self.push(out, ng, Op::MeanAxis0 { a }))
    }

    /// Column-wise max of a 2-D tensor: `[n,d] -> [d]`. Ties resolve to
    /// the lowest row index.
    pub fn max_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (n, d) = dims2(&va)
            .ok_or_else(|| Error::shape("max_axis0", format!("rank {} != 2", va.ndim())))?;
        if n == 0 {
            return Err(Error::shape("max_axis0", "zero rows".to_string()));
        }
        let mut out = ArrayD::zeros(IxDyn(&[d]));
        let mut argmax = vec![0usize; d];
        for j in 0..d {
            let mut best = va[[0, j]];
            let mut bi = 0usize;
            for i in 1..n {
                if va[[i, j]] > best {
                    best = va[[i, j]];
                    bi = i;
                }
            }
            out[j] = best;
            argmax[j] = bi;
        }
        let ng = self.out_grad(a);
        Ok(self.push(out, ng, Op::MaxAxis0 { a, argmax }))
    }

    /// Stack 2-D parts vertically; all must share the column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no parts".to_string()));
        }
        let first = self.value(parts[0]);
        let (_, d) = dims2(&first)
            .ok_or_else(|| Error::shape("concat_rows", format!("rank {} != 2", first.ndim())))?;
        let mut total = 0usize;
        for &p in parts {
            let v = self.value(p);
            match dims2(&v) {
                Some((np, dp)) if dp == d => total += np,
                other => {
                    return Err(Error::shape(
                        "concat_rows",
                        format!("part shape {other:?} vs width {d}"),
                    ))
                }
            }
        }
        let mut out = ArrayD::zeros(IxDyn(&[total, d]));
        let mut r = 0usize;
        let mut ng = false;
        for &p in parts {
            let v = self.value(p);
            let (np, _) = dims2(&v).unwrap();
            for i in 0..np {
                for j in 0..d {
                    out[[r + i, j]] = v[[i, j]];
                }
            }
            r += np;
            ng = ng || self.out_grad(p);
        }
        Ok(self.push(
            out,
            ng,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Append the same 1-D vector to every row of a 2-D tensor:
    /// `[n,h] ++ [d] -> [n, h+d]`.
    pub fn concat_cols_broadcast(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        let vm = self.value(mat);
        let vv = self.value(vec);
        let (n, h) = dims2(&vm).ok_or_else(|| {
            Error::shape("concat_cols_broadcast", format!("mat rank {} != 2", vm.ndim()))
        })?;
        if vv.ndim() != 1 {
            return Err(Error::shape(
                "concat_cols_broadcast",
                format!("vec rank {} != 1", vv.ndim()),
            ));
        }
        let d = vv.len();
        let mut out = ArrayD::zeros(IxDyn(&[n, h + d]));
        for i in 0..n {
            for j in 0..h {
                out[[i, j]] = vm[[i, j]];
            }
            for j in 0..d {
                out[[i, h + j]] = vv[j];
            }
        }
        let ng = self.out_grad2(mat, vec);
        Ok(self.push(out, ng, Op::ConcatColsBroadcast { mat, vec }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (n, d) = dims2(&va)
            .ok_or_else(|| Error::shape("slice_rows", format!("rank {} != 2", va.ndim())))?;
        if start + len > n {
            return Err(Error::shape(
                "slice_rows",
                format!("range {start}..{} out of {n} rows", start + len),
            ));
        }
        let mut out = ArrayD::zeros(IxDyn(&[len, d]));
        for i in 0..len {
            for j in 0..d {
                out[[i, j]] = va[[start + i, j]];
            }
        }
        let ng = self.out_grad(a);
        Ok(self.push(out, ng, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (n, d) = dims2(&va)
            .ok_or_else(|| Error::shape("slice_cols", format!("rank {} != 2", va.ndim())))?;
        if start + len > d {
            return Err(Error::shape(
                "slice_cols",
                format!("range {start}..{} out of {d} cols", start + len),
            ));
        }
        let mut out = ArrayD::zeros(IxDyn(&[n, len]));
        for i in 0..n {
            for j in 0..len {
                out[[i, j]] = va[[i, start + j]];
            }
        }
        let ng = self.out_grad(a);
        Ok(self.push(out, ng, Op::SliceCols { a, start }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        dims2(&va)
            .ok_or_else(|| Error::shape("transpose", format!("rank {} != 2", va.ndim())))?;
        let out = va.t().to_owned();
        let ng = self.out_grad(a);
        Ok(self.push(out, ng, Op::Transpose { a }))
    }

    /// Mean token-level cross-entropy from logits. `targets[i] = None`
    /// marks an ignored (padding) position.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Rc<Vec<Option<usize>>>,
    ) -> Result<NodeId> {
        let vl = self.value(logits);
        let (n, v) = dims2(&vl)
            .ok_or_else(|| Error::shape("cross_entropy", format!("rank {} != 2", vl.ndim())))?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets vs {n} rows", targets.len()),
            ));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Argument(
                "cross entropy with no target positions".to_string(),
            ));
        }
        let mut probs = ArrayD::zeros(IxDyn(&[n, v]));
        let mut total = S::zero();
        for i in 0..n {
            let row = vl.index_axis(Axis(0), i);
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[[i, j]] = e;
                denom = denom + e;
            }
            let lse = mx + denom.ln();
            for j in 0..v {
                probs[[i, j]] = probs[[i, j]] / denom;
            }
            if let Some(t) = targets[i] {
                if t >= v {
                    return Err(Error::shape(
                        "cross_entropy",
                        format!("target {t} out of {v} classes"),
                    ));
                }
                total = total + (lse - row[t]);
            }
        }
        let mean = total * S::from_f64(1.0 / count as f64);
        let out = ArrayD::from_elem(IxDyn(&[]), mean);
        let probs = Rc::new(probs);
        let ng = self.out_grad(logits);
        Ok(self.push(
            out,
            ng,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            },
        ))
    }

    /// Mean of several scalar nodes.
    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("mean of no scalars".to_string()));
        }
        let mut total = S::zero();
        let mut ng = false;
        for &p in parts {
            let v = self.value(p);
            if v.ndim() != 0 {
                return Err(Error::shape(
                    "mean_scalars",
                    format!("part rank {} != 0", v.ndim()),
                ));
            }
            total = total + *v.first().unwrap();
            ng = ng || self.out_grad(p);
        }
        let mean = total * S::from_f64(1.0 / parts.len() as f64);
        let out = ArrayD::from_elem(IxDyn(&[]), mean);
        Ok(self.push(
            out,
            ng,
            Op::MeanScalars {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Row sums of a 2-D tensor: `[n,m] -> [n,1]`.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (n, m) = dims2(&va)
            .ok_or_else(|| Error::shape("row_sum", format!("rank {} != 2", va.ndim())))?;
        let mut out = ArrayD::zeros(IxDyn(&[n, 1]));
        for i in 0..n {
            let mut s = S::zero();
            for j in 0..m {
                s = s + va[[i, j]];
            }
            out[[i, 0]] = s;
        }
        let ng = self.out_grad(a);
        Ok(self.push(out, ng, Op::RowSum { a }))
    }

    /// Elementwise power with a constant exponent; inputs must stay in
    /// the exponent's domain (used for degree^{-1/2} on positives).
    pub fn pow_const(&mut self, a: NodeId, p: f64) -> NodeId {
        let va = self.value(a);
        let ps = S::from_f64(p);
        let out = va.mapv(|x| x.powf(ps));
        let ng = self.out_grad(a);
        self.push(out, ng, Op::PowConst { a, p })
    }

    /// Scale each row i of `mat` by `col[i,0]`.
    pub fn mul_col_broadcast(&mut self, mat: NodeId, col: NodeId) -> Result<NodeId> {
        let vm = self.value(mat);
        let vc = self.value(col);
        let (n, h) = dims2(&vm).ok_or_else(|| {
            Error::shape("mul_col_broadcast", format!("mat rank {} != 2", vm.ndim()))
        })?;
        match dims2(&vc) {
            Some((cn, 1)) if cn == n => {}
            other => {
                return Err(Error::shape(
                    "mul_col_broadcast",
                    format!("col shape {other:?} vs [{n},1]"),
                ))
            }
        }
        let mut out = (*vm).clone();
        for i in 0..n {
            let c = vc[[i, 0]];
            for j in 0..h {
                out[[i, j]] = out[[i, j]] * c;
            }
        }
        let ng = self.out_grad2(mat, col);
        Ok(self.push(out, ng, Op::MulColBroadcast { mat, col }))
    }

    /// Scale each column j of `mat` by `row[j]` (`row` is 1-D).
    pub fn mul_row_broadcast(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId> {
        let vm = self.value(mat);
        let vr = self.value(row);
        let (n, m) = dims2(&vm).ok_or_else(|| {
            Error::shape("mul_row_broadcast", format!("mat rank {} != 2", vm.ndim()))
        })?;
        if vr.ndim() != 1 || vr.len() != m {
            return Err(Error::shape(
                "mul_row_broadcast",
                format!("row shape {:?} vs width {m}", vr.shape()),
            ));
        }
        let mut out = (*vm).clone();
        for i in 0..n {
            for j in 0..m {
                out[[i, j]] = out[[i, j]] * vr[j];
            }
        }
        let ng = self.out_grad2(mat, row);
        Ok(self.push(out, ng, Op::MulRowBroadcast { mat, row }))
    }

    /// Build an `[n,k]` matrix column by column from `[c_i,1]` nodes
    /// scattered at given row indices; unmentioned entries are zero.
    pub fn assemble_columns(
        &mut self,
        num_rows: usize,
        columns: &[(NodeId, Rc<Vec<usize>>)],
    ) -> Result<NodeId> {
        let k = columns.len();
        let mut out = ArrayD::zeros(IxDyn(&[num_rows, k]));
        let mut ng = false;
        for (c, (node, rows)) in columns.iter().enumerate() {
            let v = self.value(*node);
            match dims2(&v) {
                Some((len, 1)) if len == rows.len() => {}
                other => {
                    return Err(Error::shape(
                        "assemble_columns",
                        format!("column shape {other:?} vs {} indices", rows.len()),
                    ))
                }
            }
            for (i, &r) in rows.iter().enumerate() {
                if r >= num_rows {
                    return Err(Error::shape(
                        "assemble_columns",
                        format!("row {r} out of {num_rows}"),
                    ));
                }
                out[[r, c]] = v[[i, 0]];
            }
            ng = ng || self.out_grad(*node);
        }
        Ok(self.push(
            out,
            ng,
            Op::AssembleColumns {
                columns: columns.to_vec(),
            },
        ))
    }

    /// Sum of all elements of a tensor of any rank, as a 0-D scalar.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let total = va.iter().copied().sum::<S>();
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        let ng = self.out_grad(a);
        self.push(out, ng, Op::SumAll { a })
    }

    /// Concatenate 1-D vectors into a single `[1, total]` row matrix.
    pub fn vecs_to_row(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("vecs_to_row", "no parts".to_string()));
        }
        let mut total = 0usize;
        for &p in parts {
            let v = self.value(p);
            if v.ndim() != 1 {
                return Err(Error::shape(
                    "vecs_to_row",
                    format!("part rank {} != 1", v.ndim()),
                ));
            }
            total += v.len();
        }
        let mut out = ArrayD::zeros(IxDyn(&[1, total]));
        let mut c = 0usize;
        let mut ng = false;
        for &p in parts {
            let v = self.value(p);
            for j in 0..v.len() {
                out[[0, c + j]] = v[j];
            }
            c += v.len();
            ng = ng || self.out_grad(p);
        }
        Ok(self.push(
            out,
            ng,
            Op::VecsToRow {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Flatten a `[1, d]` row matrix into a 1-D vector of length d.
    pub fn row_to_vec(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        match dims2(&va) {
            Some((1, d)) => {
                let mut out = ArrayD::zeros(IxDyn(&[d]));
                for j in 0..d {
                    out[j] = va[[0, j]];
                }
                let ng = self.out_grad(a);
                Ok(self.push(out, ng, Op::RowToVec { a }))
            }
            other => Err(Error::shape(
                "row_to_vec",
                format!("shape {other:?} is not a single row"),
            )),
        }
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<S>> {
        let lv = self.value(loss);
        if lv.ndim() != 0 {
            return Err(Error::shape(
                "backward",
                format!("loss rank {} != 0", lv.ndim()),
            ));
        }
        let mut g: Vec<Option<ArrayD<S>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(ArrayD::from_elem(IxDyn(&[]), S::one()));

        for i in (0..=loss.0).rev() {
            if g[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let d = g[i].clone().unwrap();
            self.backprop_node(i, &d, &mut g);
        }
        Ok(Grads { g })
    }

    fn backprop_node(&self, i: usize, d: &ArrayD<S>, g: &mut Vec<Option<ArrayD<S>>>) {
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let d2 = d.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if wants(*a) {
                    let b2 = vb.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    accumulate(g, *a, d2.dot(&b2.t()).into_dyn());
                }
                if wants(*b) {
                    let a2 = va.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    accumulate(g, *b, a2.t().dot(&d2).into_dyn());
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    accumulate(g, *a, d.clone());
                }
                if wants(*b) {
                    accumulate(g, *b, d.clone());
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    accumulate(g, *a, d.clone());
                }
                if wants(*b) {
                    accumulate(g, *b, d.mapv(|x| -x));
                }
            }
            Op::AddRow { a, bias } => {
                if wants(*a) {
                    accumulate(g, *a, d.clone());
                }
                if wants(*bias) {
                    let (n, w) = dims2(d).unwrap();
                    let mut db = ArrayD::zeros(IxDyn(&[w]));
                    for i in 0..n {
                        for j in 0..w {
                            db[j] = db[j] + d[[i, j]];
                        }
                    }
                    accumulate(g, *bias, db);
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let vb = self.value(*b);
                    accumulate(g, *a, d * &*vb);
                }
                if wants(*b) {
                    let va = self.value(*a);
                    accumulate(g, *b, d * &*va);
                }
            }
            Op::Scale { a, c } => {
                if wants(*a) {
                    accumulate(g, *a, d.mapv(|x| x * *c));
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let va = self.value(*a);
                    let mut da = d.clone();
                    azip_mask(&mut da, &va, |x| x > S::zero());
                    accumulate(g, *a, da);
                }
            }
            Op::Tanh { a } => {
                if wants(*a) {
                    let out = &self.nodes[i].value;
                    let da = d * &out.mapv(|t| S::one() - t * t);
                    accumulate(g, *a, da);
                }
            }
            Op::Sigmoid { a } => {
                if wants(*a) {
                    let out = &self.nodes[i].value;
                    let da = d * &out.mapv(|s| s * (S::one() - s));
                    accumulate(g, *a, da);
                }
            }
            Op::Gelu { a } => {
                if wants(*a) {
                    let va = self.value(*a);
                    let da = d * &va.mapv(gelu_grad_s);
                    accumulate(g, *a, da);
                }
            }
            Op::SoftmaxRows { a } => {
                if wants(*a) {
                    let y = &self.nodes[i].value;
                    let (n, w) = dims2(y).unwrap();
                    let mut da = ArrayD::zeros(IxDyn(&[n, w]));
                    for r in 0..n {
                        let mut dot = S::zero();
                        for j in 0..w {
                            dot = dot + d[[r, j]] * y[[r, j]];
                        }
                        for j in 0..w {
                            da[[r, j]] = y[[r, j]] * (d[[r, j]] - dot);
                        }
                    }
                    accumulate(g, *a, da);
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, w) = dims2(xhat).unwrap();
                let vg = self.value(*gamma);
                if wants(*a) {
                    let inv_w = S::from_f64(1.0 / w as f64);
                    let mut da = ArrayD::zeros(IxDyn(&[n, w]));
                    for r in 0..n {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..w {
                            let dxh = d[[r, j]] * vg[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xhat[[r, j]];
                        }
                        m1 = m1 * inv_w;
                        m2 = m2 * inv_w;
                        for j in 0..w {
                            let dxh = d[[r, j]] * vg[j];
                            da[[r, j]] = rstd[r] * (dxh - m1 - xhat[[r, j]] * m2);
                        }
                    }
                    accumulate(g, *a, da);
                }
                if wants(*gamma) {
                    let mut dg = ArrayD::zeros(IxDyn(&[w]));
                    for r in 0..n {
                        for j in 0..w {
                            dg[j] = dg[j] + d[[r, j]] * xhat[[r, j]];
                        }
                    }
                    accumulate(g, *gamma, dg);
                }
                if wants(*beta) {
                    let mut db = ArrayD::zeros(IxDyn(&[w]));
                    for r in 0..n {
                        for j in 0..w {
                            db[j] = db[j] + d[[r, j]];
                        }
                    }
                    accumulate(g, *beta, db);
                }
            }
            Op::GatherRows { table, indices } => {
                if wants(*table) {
                    let vt = self.value(*table);
                    let (rows, w) = dims2(&vt).unwrap();
                    let mut dt = ArrayD::zeros(IxDyn(&[rows, w]));
                    for (i2, &idx) in indices.iter().enumerate() {
                        for j in 0..w {
                            dt[[idx, j]] = dt[[idx, j]] + d[[i2, j]];
                        }
                    }
                    accumulate(g, *table, dt);
                }
            }
            Op::MeanAxis0 { a } => {
                if wants(*a) {
                    let va = self.value(*a);
                    let (n, w) = dims2(&va).unwrap();
                    let inv = S::from_f64(1.0 / n as f64);
                    let mut da = ArrayD::zeros(IxDyn(&[n, w]));
                    for r in 0..n {
                        for j in 0..w {
                            da[[r, j]] = d[j] * inv;
                        }
                    }
                    accumulate(g, *a, da);
                }
            }
            Op::MaxAxis0 { a, argmax } => {
                if wants(*a) {
                    let va = self.value(*a);
                    let (n, w) = dims2(&va).unwrap();
                    let mut da = ArrayD::zeros(IxDyn(&[n, w]));
                    for j in 0..w {
                        da[[argmax[j], j]] = d[j];
                    }
                    accumulate(g, *a, da);
                }
            }
            Op::ConcatRows { parts } => {
                let mut r = 0usize;
                for &p in parts {
                    let v = self.value(p);
                    let (np, w) = dims2(&v).unwrap();
                    if wants(p) {
                        let mut dp = ArrayD::zeros(IxDyn(&[np, w]));
                        for i2 in 0..np {
                            for j in 0..w {
                                dp[[i2, j]] = d[[r + i2, j]];
                            }
                        }
                        accumulate(g, p, dp);
                    }
                    r += np;
                }
            }
            Op::ConcatColsBroadcast { mat, vec } => {
                let vm = self.value(*mat);
                let (n, h) = dims2(&vm).unwrap();
                if wants(*mat) {
                    let mut dm = ArrayD::zeros(IxDyn(&[n, h]));
                    for i2 in 0..n {
                        for j in 0..h {
                            dm[[i2, j]] = d[[i2, j]];
                        }
                    }
                    accumulate(g, *mat, dm);
                }
                if wants(*vec) {
                    let vv = self.value(*vec);
                    let w = vv.len();
                    let mut dv = ArrayD::zeros(IxDyn(&[w]));
                    for i2 in 0..n {
                        for j in 0..w {
                            dv[j] = dv[j] + d[[i2, h + j]];
                        }
                    }
                    accumulate(g, *vec, dv);
                }
            }
            Op::SliceRows { a, start } => {
                if wants(*a) {
                    let va = self.value(*a);
                    let (n, w) = dims2(&va).unwrap();
                    let (len, _) = dims2(d).unwrap();
                    let mut da = ArrayD::zeros(IxDyn(&[n, w]));
                    for i2 in 0..len {
                        for j in 0..w {
                            da[[start + i2, j]] = d[[i2, j]];
                        }
                    }
                    accumulate(g, *a, da);
                }
            }
            Op::SliceCols { a, start } => {
                if wants(*a) {
                    let va = self.value(*a);
                    let (n, w) = dims2(&va).unwrap();
                    let (_, len) = dims2(d).unwrap();
                    let mut da = ArrayD::zeros(IxDyn(&[n, w]));
                    for i2 in 0..n {
                        for j in 0..len {
                            da[[i2, start + j]] = d[[i2, j]];
                        }
                    }
                    accumulate(g, *a, da);
                }
            }
            Op::Transpose { a } => {
                if wants(*a) {
                    accumulate(g, *a, d.t().as_standard_layout().into_owned());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if wants(*logits) {
                    let (n, v) = dims2(probs).unwrap();
                    let ds = *d.first().unwrap() * S::from_f64(1.0 / *count as f64);
                    let mut dl = ArrayD::zeros(IxDyn(&[n, v]));
                    for r in 0..n {
                        if let Some(t) = targets[r] {
                            for j in 0..v {
                                let onehot = if j == t { S::one() } else { S::zero() };
                                dl[[r, j]] = (probs[[r, j]] - onehot) * ds;
                            }
                        }
                    }
                    accumulate(g, *logits, dl);
                }
            }
            Op::MeanScalars { parts } => {
                let ds = *d.first().unwrap() * S::from_f64(1.0 / parts.len() as f64);
                for &p in parts {
                    if wants(p) {
                        accumulate(g, p, ArrayD::from_elem(IxDyn(&[]), ds));
                    }
                }
            }
            Op::RowSum { a } => {
                if wants(*a) {
                    let va = self.value(*a);
                    let (n, m) = dims2(&va).unwrap();
                    let mut da = ArrayD::zeros(IxDyn(&[n, m]));
                    for i2 in 0..n {
                        for j in 0..m {
                            da[[i2, j]] = d[[i2, 0]];
                        }
                    }
                    accumulate(g, *a, da);
                }
            }
            Op::PowConst { a, p } => {
                if wants(*a) {
                    let va = self.value(*a);
                    let ps = S::from_f64(*p);
                    let pm1 = S::from_f64(*p - 1.0);
                    let da = d * &va.mapv(|x| ps * x.powf(pm1));
                    accumulate(g, *a, da);
                }
            }
            Op::MulColBroadcast { mat, col } => {
                let vm = self.value(*mat);
                let vc = self.value(*col);
                let (n, h) = dims2(&vm).unwrap();
                if wants(*mat) {
                    let mut dm = d.clone();
                    for i2 in 0..n {
                        let c = vc[[i2, 0]];
                        for j in 0..h {
                            dm[[i2, j]] = dm[[i2, j]] * c;
                        }
                    }
                    accumulate(g, *mat, dm);
                }
                if wants(*col) {
                    let mut dc = ArrayD::zeros(IxDyn(&[n, 1]));
                    for i2 in 0..n {
                        let mut s = S::zero();
                        for j in 0..h {
                            s = s + d[[i2, j]] * vm[[i2, j]];
                        }
                        dc[[i2, 0]] = s;
                    }
                    accumulate(g, *col, dc);
                }
            }
            Op::MulRowBroadcast { mat, row } => {
                let vm = self.value(*mat);
                let vr = self.value(*row);
                let (n, m) = dims2(&vm).unwrap();
                if wants(*mat) {
                    let mut dm = d.clone();
                    for i2 in 0..n {
                        for j in 0..m {
                            dm[[i2, j]] = dm[[i2, j]] * vr[j];
                        }
                    }
                    accumulate(g, *mat, dm);
                }
                if wants(*row) {
                    let mut dr = ArrayD::zeros(IxDyn(&[m]));
                    for i2 in 0..n {
                        for j in 0..m {
                            dr[j] = dr[j] + d[[i2, j]] * vm[[i2, j]];
                        }
                    }
                    accumulate(g, *row, dr);
                }
            }
            Op::AssembleColumns { columns } => {
                for (c, (node, rows)) in columns.iter().enumerate() {
                    if wants(*node) {
                        let mut dn = ArrayD::zeros(IxDyn(&[rows.len(), 1]));
                        for (i2, &r) in rows.iter().enumerate() {
                            dn[[i2, 0]] = d[[r, c]];
                        }
                        accumulate(g, *node, dn);
                    }
                }
            }
            Op::SumAll { a } => {
                if wants(*a) {
                    let va = self.value(*a);
                    let ds = *d.first().unwrap();
                    accumulate(g, *a, ArrayD::from_elem(va.raw_dim(), ds));
                }
            }
            Op::VecsToRow { parts } => {
                let mut c = 0usize;
                for &p in parts {
                    let len = self.value(p).len();
                    if wants(p) {
                        let mut dp = ArrayD::zeros(IxDyn(&[len]));
                        for j in 0..len {
                            dp[j] = d[[0, c + j]];
                        }
                        accumulate(g, p, dp);
                    }
                    c += len;
                }
            }
            Op::RowToVec { a } => {
                if wants(*a) {
                    let len = d.len();
                    let mut da = ArrayD::zeros(IxDyn(&[1, len]));
                    for j in 0..len {
                        da[[0, j]] = d[j];
                    }
                    accumulate(g, *a, da);
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(g: &mut [Option<ArrayD<S>>], id: NodeId, contrib: ArrayD<S>) {
    match &mut g[id.0] {
        Some(existing) => *existing += &contrib,
        slot @ None => *slot = Some(contrib),
    }
}

fn azip_mask<S: Scalar>(d: &mut ArrayD<S>, reference: &ArrayD<S>, keep: impl Fn(S) -> bool) {
    for (x, &r) in d.iter_mut().zip(reference.iter()) {
        if !keep(r) {
            *x = S::zero();
        }
    }
}

fn sigmoid_s<S: Scalar>(x: S) -> S {
    // Split by sign to avoid overflow in exp.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

fn gelu_s<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad_s<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let du = c0 * (S::one() + three * c1 * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}
