//! Eagerly evaluated reverse-mode graph.
//!
//! Every operation computes its value immediately and records how to push
//! gradients back to its inputs. A graph is built fresh for each loss
//! evaluation and dropped afterwards; nothing persists across steps.

use std::collections::BTreeMap;

use super::array::{gemm, Array};
use super::ParameterSet;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulColumn(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SegmentSum(Var, usize),
    ExclusiveCumsum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    Conv2d(Var, Var, Var, Conv2dSpec),
    GlobalAvgPool(Var),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Parameter handles created by [`Graph::bind`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Handle for a named parameter. Panics if the name was never bound, which
    /// is always a wiring bug in the caller.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Extracts named gradients; parameters that received none get zeros.
    pub fn collect(&self, graph: &Graph, grads: &mut Gradients) -> BTreeMap<String, Array> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Array::zeros(graph.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Registers every parameter of `params` as a gradient-receiving leaf.
    pub fn bind(&mut self, params: &ParameterSet) -> ParamVars {
        let vars = params
            .iter()
            .map(|(name, p)| (name.to_string(), self.input(p.value.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Registers every parameter of `params` as a constant, for evaluation
    /// with frozen weights.
    pub fn bind_frozen(&mut self, params: &ParameterSet) -> ParamVars {
        let vars = params
            .iter()
            .map(|(name, p)| (name.to_string(), self.constant(p.value.clone())))
            .collect();
        ParamVars { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(Array::new(&[m, n], out), Op::MatMul(a, b), ng)
    }

    /// `a[m,n] + bias[n]`, bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let n = self.value(a).cols();
        assert_eq!(self.value(bias).len(), n, "bias length");
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (x, bj) in row.iter_mut().zip(&b) {
                *x += bj;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    /// `x · w + b` for `x[m,i]`, `w[i,o]`, `b[o]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Array::new(va.shape(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[m,n] * c[m,1]`, the column broadcast over `a`'s columns.
    pub fn mul_column(&mut self, a: Var, c: Var) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.shape(c), [m, 1], "mul_column needs a [{m},1] column");
        let mut out = self.value(a).clone();
        let col = self.value(c).data().to_vec();
        for (row, s) in out.data_mut().chunks_exact_mut(n).zip(&col) {
            for x in row {
                *x *= s;
            }
        }
        let ng = self.needs(a) || self.needs(c);
        self.push(out, Op::MulColumn(a, c), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so divergence stays visible downstream.
        self.unary(a, |x| if x < 0.0 { 0.0 } else { x }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Array::scalar(s), Op::Sum(a), ng)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        let ng = self.needs(a);
        self.push(Array::scalar(s), Op::Mean(a), ng)
    }

    /// Row sums: `[m,n] -> [m,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let data = v.data().chunks_exact(n).map(|r| r.iter().sum()).collect();
        let ng = self.needs(a);
        self.push(Array::new(&[m, 1], data), Op::SumCols(a), ng)
    }

    /// Sums consecutive groups of `group` rows: `[m*group, n] -> [m, n]`.
    pub fn segment_sum(&mut self, a: Var, group: usize) -> Var {
        let v = self.value(a);
        let (rows, n) = (v.rows(), v.cols());
        assert!(
            group > 0 && rows % group == 0,
            "{rows} rows not divisible by {group}"
        );
        let m = rows / group;
        let mut out = vec![0.0; m * n];
        for (r, row) in v.data().chunks_exact(n).enumerate() {
            let dst = &mut out[(r / group) * n..(r / group + 1) * n];
            for (d, x) in dst.iter_mut().zip(row) {
                *d += x;
            }
        }
        let ng = self.needs(a);
        self.push(Array::new(&[m, n], out), Op::SegmentSum(a, group), ng)
    }

    /// Exclusive prefix sum along each row: `out[i,j] = Σ_{l<j} a[i,l]`.
    pub fn exclusive_cumsum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.cols();
        let mut out = vec![0.0; v.len()];
        for (src, dst) in v.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mut acc = 0.0;
            for (d, x) in dst.iter_mut().zip(src) {
                *d = acc;
                acc += x;
            }
        }
        let shape = v.shape().to_vec();
        let ng = self.needs(a);
        self.push(Array::new(&shape, out), Op::ExclusiveCumsum(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), m, "concat_cols row mismatch");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Array::new(&[m, total], out),
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    /// Columns `start..end` of a rank-2 array.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        assert!(
            start < end && end <= n,
            "slice {start}..{end} of {n} columns"
        );
        let mut out = Vec::with_capacity(m * (end - start));
        for row in v.data().chunks_exact(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let ng = self.needs(a);
        self.push(
            Array::new(&[m, end - start], out),
            Op::SliceCols(a, start),
            ng,
        )
    }

    /// Row lookup `table[idx[i], :]`; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let v = self.value(table);
        let (n, d) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather index {i} out of {n} rows");
            out.extend_from_slice(v.row(i));
        }
        let ng = self.needs(table);
        self.push(
            Array::new(&[idx.len(), d], out),
            Op::GatherRows(table, idx.to_vec()),
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = transpose(self.value(a));
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// 2D convolution of `input[b,c,h,w]` with `weight[o,c,k,k]` and `bias[o]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Var {
        let out = conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            spec,
        );
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(out, Op::Conv2d(input, weight, bias, spec), ng)
    }

    /// Spatial mean: `[b,c,h,w] -> [b,c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.shape();
        assert_eq!(s.len(), 4, "global_avg_pool on {s:?}");
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = v
            .data()
            .chunks_exact(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.needs(a);
        self.push(Array::new(&[b, c], data), Op::GlobalAvgPool(a), ng)
    }

    /// Reverse pass from the single-element node `loss`.
    ///
    /// Fails with [`Error::Divergence`] if the loss is not finite.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        assert_eq!(lv.len(), 1, "backward from non-scalar {:?}", lv.shape());
        if !lv.item().is_finite() {
            return Err(Error::Divergence {
                iteration: None,
                context: format!("loss evaluated to {}", lv.item()),
            });
        }
        self.backward_seeded(vec![(loss, Array::new(lv.shape(), vec![1.0]))])
    }

    /// Reverse pass starting from upstream gradients on arbitrary nodes.
    ///
    /// Seeds on the same node are summed. Fails with [`Error::Divergence`]
    /// if a seed is not finite.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Array)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, seed) in seeds {
            assert_eq!(
                seed.shape(),
                self.shape(v),
                "seed shape does not match node"
            );
            if !seed.is_finite() {
                return Err(Error::Divergence {
                    iteration: None,
                    context: "non-finite upstream gradient".into(),
                });
            }
            last = last.max(v.0);
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&seed),
                slot @ None => *slot = Some(seed),
            }
        }
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            // Intermediate gradients are dropped as soon as they are consumed.
            if matches!(node.op, Op::Input) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Input => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, 0.0, &mut da);
                    self.accumulate(grads, *a, Array::new(&[m, k], da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, 0.0, &mut db);
                    self.accumulate(grads, *b, Array::new(&[k, n], db));
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    self.accumulate(grads, *bias, Array::new(&shape, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, hadamard(g, self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::MulColumn(a, c) => {
                let n = g.cols();
                let col = self.value(*c);
                if self.needs(*a) {
                    let mut da = g.clone();
                    for (row, s) in da.data_mut().chunks_exact_mut(n).zip(col.data()) {
                        for x in row {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*c) {
                    let dc = g
                        .data()
                        .chunks_exact(n)
                        .zip(self.value(*a).data().chunks_exact(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *c, Array::new(col.shape(), dc));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let da = zip_map(g, self.value(*a), |gi, x| {
                    if x > 0.0 || x.is_nan() {
                        gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = zip_map(g, out, |gi, s| gi * s * (1.0 - s));
                self.accumulate(grads, *a, da);
            }
            Op::Softplus(a) => {
                let da = zip_map(g, self.value(*a), |gi, x| gi * sigmoid(x));
                self.accumulate(grads, *a, da);
            }
            Op::Sin(a) => {
                let da = zip_map(g, self.value(*a), |gi, x| gi * x.cos());
                self.accumulate(grads, *a, da);
            }
            Op::Cos(a) => {
                let da = zip_map(g, self.value(*a), |gi, x| -gi * x.sin());
                self.accumulate(grads, *a, da);
            }
            Op::Exp(a) => self.accumulate(grads, *a, hadamard(g, out)),
            Op::Abs(a) => {
                let da = zip_map(g, self.value(*a), |gi, x| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, da);
            }
            Op::Square(a) => {
                let da = zip_map(g, self.value(*a), |gi, x| 2.0 * gi * x);
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Array::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let shape = va.shape().to_vec();
                let n = va.len() as f64;
                self.accumulate(grads, *a, Array::full(&shape, g.item() / n));
            }
            Op::SumCols(a) => {
                let va = self.value(*a);
                let n = va.cols();
                let mut da = Vec::with_capacity(va.len());
                for &gi in g.data() {
                    da.extend(std::iter::repeat_n(gi, n));
                }
                let shape = va.shape().to_vec();
                self.accumulate(grads, *a, Array::new(&shape, da));
            }
            Op::SegmentSum(a, group) => {
                let va = self.value(*a);
                let n = va.cols();
                let mut da = Vec::with_capacity(va.len());
                for r in 0..va.rows() {
                    da.extend_from_slice(g.row(r / group));
                }
                let shape = va.shape().to_vec();
                self.accumulate(grads, *a, Array::new(&shape, da));
                debug_assert_eq!(n, g.cols());
            }
            Op::ExclusiveCumsum(a) => {
                let n = g.cols();
                let mut da = vec![0.0; g.len()];
                for (src, dst) in g.data().chunks_exact(n).zip(da.chunks_exact_mut(n)) {
                    let mut acc = 0.0;
                    for j in (0..n).rev() {
                        dst[j] = acc;
                        acc += src[j];
                    }
                }
                self.accumulate(grads, *a, Array::new(g.shape(), da));
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(
                                &g.data()[i * total + offset..i * total + offset + w],
                            );
                        }
                        self.accumulate(grads, p, Array::new(&[m, w], dp));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (n, w) = (va.cols(), g.cols());
                let mut da = vec![0.0; va.len()];
                for (dst, src) in da.chunks_exact_mut(n).zip(g.data().chunks_exact(w)) {
                    dst[*start..*start + w].copy_from_slice(src);
                }
                let shape = va.shape().to_vec();
                self.accumulate(grads, *a, Array::new(&shape, da));
            }
            Op::GatherRows(table, idx) => {
                let vt = self.value(*table);
                let d = vt.cols();
                let mut dt = vec![0.0; vt.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (x, gi) in dt[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                        *x += gi;
                    }
                }
                let shape = vt.shape().to_vec();
                self.accumulate(grads, *table, Array::new(&shape, dt));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshaped(&shape));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, transpose(g)),
            Op::Conv2d(input, weight, bias, spec) => {
                let (di, dw, db) = conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *spec,
                    self.needs(*input),
                    self.needs(*weight),
                );
                if let Some(di) = di {
                    self.accumulate(grads, *input, di);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *weight, dw);
                }
                if self.needs(*bias) {
                    let shape = self.shape(*bias).to_vec();
                    self.accumulate(grads, *bias, db.reshaped(&shape));
                }
            }
            Op::GlobalAvgPool(a) => {
                let va = self.value(*a);
                let s = va.shape();
                let hw = s[2] * s[3];
                let mut da = Vec::with_capacity(va.len());
                for &gi in g.data() {
                    da.extend(std::iter::repeat_n(gi / hw as f64, hw));
                }
                let shape = s.to_vec();
                self.accumulate(grads, *a, Array::new(&shape, da));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` evaluated as `max(x,0) + log1p(e^{-|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn hadamard(a: &Array, b: &Array) -> Array {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Array::new(a.shape(), data)
}

fn transpose(a: &Array) -> Array {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Array::new(&[n, m], out)
}

struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(input: &Array, weight: &Array, spec: Conv2dSpec) -> Self {
        let (si, sw) = (input.shape(), weight.shape());
        assert_eq!(si.len(), 4, "conv2d input must be [b,c,h,w], got {si:?}");
        assert_eq!(sw.len(), 4, "conv2d weight must be [o,c,k,k], got {sw:?}");
        assert_eq!(si[1], sw[1], "conv2d channel mismatch");
        assert_eq!(sw[2], sw[3], "conv2d kernels are square");
        let k = sw[2];
        let (h, w) = (si[2], si[3]);
        assert!(
            h + 2 * spec.padding >= k && w + 2 * spec.padding >= k,
            "input smaller than kernel"
        );
        Self {
            batch: si[0],
            in_ch: si[1],
            h,
            w,
            out_ch: sw[0],
            k,
            out_h: (h + 2 * spec.padding - k) / spec.stride + 1,
            out_w: (w + 2 * spec.padding - k) / spec.stride + 1,
        }
    }

    fn patch(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[c,h,w]` into columns `[c*k*k, out_h*out_w]`.
fn im2col(img: &[f64], geo: &ConvGeometry, spec: Conv2dSpec, cols: &mut [f64]) {
    let p = geo.positions();
    for c in 0..geo.in_ch {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = (c * geo.k + ky) * geo.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..geo.out_h {
                    let y = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    for ox in 0..geo.out_w {
                        let x = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        dst[oy * geo.out_w + ox] =
                            if y >= 0 && x >= 0 && (y as usize) < geo.h && (x as usize) < geo.w {
                                img[(c * geo.h + y as usize) * geo.w + x as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], geo: &ConvGeometry, spec: Conv2dSpec, img: &mut [f64]) {
    let p = geo.positions();
    for c in 0..geo.in_ch {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = (c * geo.k + ky) * geo.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..geo.out_h {
                    let y = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if y < 0 || y as usize >= geo.h {
                        continue;
                    }
                    for ox in 0..geo.out_w {
                        let x = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if x >= 0 && (x as usize) < geo.w {
                            img[(c * geo.h + y as usize) * geo.w + x as usize] +=
                                src[oy * geo.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(input: &Array, weight: &Array, bias: &Array, spec: Conv2dSpec) -> Array {
    let geo = ConvGeometry::new(input, weight, spec);
    assert_eq!(bias.len(), geo.out_ch, "conv2d bias length");
    let (patch, p) = (geo.patch(), geo.positions());
    let in_stride = geo.in_ch * geo.h * geo.w;
    let out_stride = geo.out_ch * p;
    let mut out = vec![0.0; geo.batch * out_stride];
    let mut cols = vec![0.0; patch * p];
    for b in 0..geo.batch {
        im2col(
            &input.data()[b * in_stride..(b + 1) * in_stride],
            &geo,
            spec,
            &mut cols,
        );
        let dst = &mut out[b * out_stride..(b + 1) * out_stride];
        for (o, row) in dst.chunks_exact_mut(p).enumerate() {
            row.fill(bias.data()[o]);
        }
        gemm(
            geo.out_ch,
            patch,
            p,
            weight.data(),
            false,
            &cols,
            false,
            1.0,
            dst,
        );
    }
    Array::new(&[geo.batch, geo.out_ch, geo.out_h, geo.out_w], out)
}

fn conv2d_backward(
    input: &Array,
    weight: &Array,
    g: &Array,
    spec: Conv2dSpec,
    want_input: bool,
    want_weight: bool,
) -> (Option<Array>, Option<Array>, Array) {
    let geo = ConvGeometry::new(input, weight, spec);
    let (patch, p) = (geo.patch(), geo.positions());
    let in_stride = geo.in_ch * geo.h * geo.w;
    let out_stride = geo.out_ch * p;
    let mut d_input = want_input.then(|| vec![0.0; input.len()]);
    let mut d_weight = want_weight.then(|| vec![0.0; weight.len()]);
    let mut d_bias = vec![0.0; geo.out_ch];
    let mut cols = vec![0.0; patch * p];
    let mut d_cols = vec![0.0; patch * p];
    for b in 0..geo.batch {
        let gb = &g.data()[b * out_stride..(b + 1) * out_stride];
        for (o, row) in gb.chunks_exact(p).enumerate() {
            d_bias[o] += row.iter().sum::<f64>();
        }
        if let Some(dw) = d_weight.as_mut() {
            im2col(
                &input.data()[b * in_stride..(b + 1) * in_stride],
                &geo,
                spec,
                &mut cols,
            );
            gemm(geo.out_ch, p, patch, gb, false, &cols, true, 1.0, dw);
        }
        if let Some(di) = d_input.as_mut() {
            gemm(
                patch,
                geo.out_ch,
                p,
                weight.data(),
                true,
                gb,
                false,
                0.0,
                &mut d_cols,
            );
            col2im(
                &d_cols,
                &geo,
                spec,
                &mut di[b * in_stride..(b + 1) * in_stride],
            );
        }
    }
    (
        d_input.map(|d| Array::new(input.shape(), d)),
        d_weight.map(|d| Array::new(weight.shape(), d)),
        Array::new(&[geo.out_ch], d_bias),
    )
}
