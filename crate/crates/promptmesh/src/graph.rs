//! Reverse-mode automatic differentiation over 2-d arrays.
//!
//! A [`Graph`] is a tape of nodes created in topological order; every op
//! records its parents and enough state to compute a vector-Jacobian product.
//! Values are `ArcArray2` so parameter leaves share storage with the
//! parameter store instead of copying per step.
//!
//! All model math (encoder, decoder, body layer, losses) is expressed with
//! the primitives here, so one `backward` call yields exact analytic
//! gradients for every parameter and input.

use crate::nn::ParamStore;
use crate::scalar::{s, Scalar};
use ndarray::{concatenate, s as nds, Array2, ArcArray2, Axis};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Square,
    Recip,
    Sigmoid,
    Softplus,
    Tanh,
    Gelu,
    Relu,
}

enum Op<S: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    AddCol { a: Var, col: Var },
    MulCol { a: Var, col: Var },
    DivCol { a: Var, col: Var },
    Scale(Var, S),
    Neg(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    SliceRows { a: Var, r0: usize, r1: usize },
    SliceCols { a: Var, c0: usize, c1: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Gather { a: Var, idx: Arc<Vec<i64>> },
    UnaryOp { a: Var, f: Unary },
    SoftmaxRows(Var),
    LayerNormRows { a: Var, eps: S },
    Rodrigues { v: Var },
}

struct Node<S: Scalar> {
    value: ArcArray2<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    bound_params: HashMap<usize, Var>,
}

pub struct Grads<S: Scalar> {
    by_node: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Array2<S>> {
        self.by_node[v.0 as usize].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<S>> {
        self.by_node[v.0 as usize].take()
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            bound_params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArcArray2<S> {
        &self.nodes[v.0 as usize].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let sh = self.nodes[v.0 as usize].value.dim();
        (sh.0, sh.1)
    }

    pub fn scalar_value(&self, v: Var) -> S {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar_value on non-scalar node");
        val[(0, 0)]
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into_shared(),
            op,
            needs_grad,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0 as usize].needs_grad
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: Array2<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: ArcArray2<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    /// Differentiable leaf input (used by gradient checks and the body layer).
    pub fn input(&mut self, value: Array2<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a parameter-store entry; the binding is cached so the
    /// same parameter maps to one node per graph.
    pub fn param(&mut self, store: &ParamStore<S>, id: usize) -> Var {
        if let Some(&v) = self.bound_params.get(&id) {
            return v;
        }
        let value = store.value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() as u32 - 1);
        self.bound_params.insert(id, v);
        v
    }

    /// Parameter bindings made in this graph, as `(param_id, var)` pairs.
    pub fn bound_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound_params.iter().map(|(&k, &v)| (k, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let al = if ta { av.t() } else { av.view() };
        let bl = if tb { bv.t() } else { bv.view() };
        assert_eq!(al.ncols(), bl.nrows(), "matmul inner dims");
        let mut out = Array2::<S>::zeros((al.nrows(), bl.ncols()));
        ndarray::linalg::general_mat_mul(S::one(), &al, &bl, S::zero(), &mut out);
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Matmul { a, b, ta, tb }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).to_owned() + self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).to_owned() - self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).to_owned() * self.value(b);
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), needs)
    }

    /// `a (n×d) + row (1×d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row).clone();
        assert_eq!(rv.nrows(), 1, "add_row expects a 1×d rhs");
        let out = self.value(a).to_owned() + &rv.row(0);
        let needs = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow { a, row }, needs)
    }

    /// `a (n×d) * row (1×d)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row).clone();
        assert_eq!(rv.nrows(), 1, "mul_row expects a 1×d rhs");
        let out = self.value(a).to_owned() * &rv.row(0);
        let needs = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow { a, row }, needs)
    }

    /// `a (n×d) + col (n×1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let cv = self.value(col).clone();
        assert_eq!(cv.ncols(), 1, "add_col expects an n×1 rhs");
        let mut out = self.value(a).to_owned();
        for (mut r, &c) in out.rows_mut().into_iter().zip(cv.column(0)) {
            r.mapv_inplace(|x| x + c);
        }
        let needs = self.ng(a) || self.ng(col);
        self.push(out, Op::AddCol { a, col }, needs)
    }

    /// `a (n×d) * col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let cv = self.value(col).clone();
        assert_eq!(cv.ncols(), 1, "mul_col expects an n×1 rhs");
        let mut out = self.value(a).to_owned();
        for (mut r, &c) in out.rows_mut().into_iter().zip(cv.column(0)) {
            r.mapv_inplace(|x| x * c);
        }
        let needs = self.ng(a) || self.ng(col);
        self.push(out, Op::MulCol { a, col }, needs)
    }

    /// `a (n×d) / col (n×1)` broadcast over columns.
    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let cv = self.value(col).clone();
        assert_eq!(cv.ncols(), 1, "div_col expects an n×1 rhs");
        let mut out = self.value(a).to_owned();
        for (mut r, &c) in out.rows_mut().into_iter().zip(cv.column(0)) {
            r.mapv_inplace(|x| x / c);
        }
        let needs = self.ng(a) || self.ng(col);
        self.push(out, Op::DivCol { a, col }, needs)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let out = self.value(a).mapv(|x| x * k);
        let needs = self.ng(a);
        self.push(out, Op::Scale(a, k), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| -x);
        let needs = self.ng(a);
        self.push(out, Op::Neg(a), needs)
    }

    /// Sum of all elements, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: S = self.value(a).iter().copied().sum();
        let needs = self.ng(a);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a), needs)
    }

    /// Mean of all elements, as a 1×1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let total: S = v.iter().copied().sum();
        let out = total / s::<S>(v.len() as f64);
        let needs = self.ng(a);
        self.push(Array2::from_elem((1, 1), out), Op::Mean(a), needs)
    }

    /// Row sums: n×d → n×1.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let needs = self.ng(a);
        self.push(v, Op::SumRows(a), needs)
    }

    /// Column sums: n×d → 1×d.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let needs = self.ng(a);
        self.push(v, Op::SumCols(a), needs)
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let out = self.value(a).slice(nds![r0..r1, ..]).to_owned();
        let needs = self.ng(a);
        self.push(out, Op::SliceRows { a, r0, r1 }, needs)
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let out = self.value(a).slice(nds![.., c0..c1]).to_owned();
        let needs = self.ng(a);
        self.push(out, Op::SliceCols { a, c0, c1 }, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows shape");
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols shape");
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let needs = self.ng(a);
        self.push(out, Op::Transpose(a), needs)
    }

    /// Row-major reshape; element count must be preserved.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape must preserve element count");
        let data: Vec<S> = v.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), data).unwrap();
        let needs = self.ng(a);
        self.push(out, Op::Reshape(a), needs)
    }

    /// Gather by flat row-major index; `-1` yields zero (used for padding).
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<i64>>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather index length");
        let v = self.value(a).clone();
        let flat: Vec<S> = v.iter().copied().collect();
        let data: Vec<S> = idx
            .iter()
            .map(|&i| if i < 0 { S::zero() } else { flat[i as usize] })
            .collect();
        let out = Array2::from_shape_vec((rows, cols), data).unwrap();
        let needs = self.ng(a);
        self.push(out, Op::Gather { a, idx }, needs)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let out = self.value(a).mapv(|x| unary_forward(x, f));
        let needs = self.ng(a);
        self.push(out, Op::UnaryOp { a, f }, needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            row.mapv_inplace(|x| (x - max).exp());
            let total: S = row.iter().copied().sum();
            row.mapv_inplace(|x| x / total);
        }
        let needs = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), needs)
    }

    /// Per-row normalization `(x − μ) / sqrt(σ² + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: S) -> Var {
        let v = self.value(a);
        let mut out = v.to_owned();
        for mut row in out.rows_mut() {
            let (mean, rstd) = row_stats(row.view(), eps);
            row.mapv_inplace(|x| (x - mean) * rstd);
        }
        let needs = self.ng(a);
        self.push(out, Op::LayerNormRows { a, eps }, needs)
    }

    /// Axis-angle (1×3) → rotation matrix (3×3) by Rodrigues' formula,
    /// with the series expansion below 1e-8 rad.
    pub fn rodrigues(&mut self, v: Var) -> Var {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 3), "rodrigues expects a 1×3 axis-angle");
        let out = crate::so3::rodrigues([val[(0, 0)], val[(0, 1)], val[(0, 2)]]);
        let needs = self.ng(v);
        self.push(out, Op::Rodrigues { v }, needs)
    }

    pub fn backward(&self, loss: Var) -> Grads<S> {
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward seeds a scalar loss"
        );
        let mut grads: Vec<Option<Array2<S>>> = vec![None; self.nodes.len()];
        grads[loss.0 as usize] = Some(Array2::from_elem((1, 1), S::one()));

        for id in (0..=loss.0 as usize).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads);
            // Leaf grads are stored back; interior grads are dropped.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Grads { by_node: grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<S>>], v: Var, delta: Array2<S>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0 as usize] {
            Some(acc) => *acc += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: usize, g: &Array2<S>, grads: &mut [Option<Array2<S>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b, ta, tb } => {
                let av = self.value(*a).clone();
                let bv = self.value(*b).clone();
                if self.ng(*a) {
                    // dA' = G·B'ᵀ, then undo the transpose flag.
                    let bl = if *tb { bv.view() } else { bv.t() };
                    let mut da = Array2::<S>::zeros((g.nrows(), bl.ncols()));
                    ndarray::linalg::general_mat_mul(S::one(), &g.view(), &bl, S::zero(), &mut da);
                    let da = if *ta { da.t().to_owned() } else { da };
                    self.accumulate(grads, *a, da);
                }
                if self.ng(*b) {
                    let al = if *ta { av.view() } else { av.t() };
                    let mut db = Array2::<S>::zeros((al.nrows(), g.ncols()));
                    ndarray::linalg::general_mat_mul(S::one(), &al, &g.view(), S::zero(), &mut db);
                    let db = if *tb { db.t().to_owned() } else { db };
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g * &self.value(*b).view());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g * &self.value(*a).view());
                }
            }
            Op::AddRow { a, row } => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*row) {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulRow { a, row } => {
                let rv = self.value(*row).clone();
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.to_owned() * &rv.row(0));
                }
                if self.ng(*row) {
                    let prod = g * &self.value(*a).view();
                    self.accumulate(grads, *row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddCol { a, col } => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*col) {
                    self.accumulate(grads, *col, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::MulCol { a, col } => {
                let cv = self.value(*col).clone();
                if self.ng(*a) {
                    let mut da = g.clone();
                    for (mut r, &c) in da.rows_mut().into_iter().zip(cv.column(0)) {
                        r.mapv_inplace(|x| x * c);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.ng(*col) {
                    let prod = g * &self.value(*a).view();
                    self.accumulate(grads, *col, prod.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::DivCol { a, col } => {
                let cv = self.value(*col).clone();
                if self.ng(*a) {
                    let mut da = g.clone();
                    for (mut r, &c) in da.rows_mut().into_iter().zip(cv.column(0)) {
                        r.mapv_inplace(|x| x / c);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.ng(*col) {
                    let prod = g * &self.value(*a).view();
                    let mut dc = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
                    for (x, &c) in dc.iter_mut().zip(cv.column(0)) {
                        *x = -*x / (c * c);
                    }
                    self.accumulate(grads, *col, dc);
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.mapv(|x| x * *k)),
            Op::Neg(a) => self.accumulate(grads, *a, g.mapv(|x| -x)),
            Op::Sum(a) => {
                let sh = self.value(*a).dim();
                self.accumulate(grads, *a, Array2::from_elem(sh, g[(0, 0)]));
            }
            Op::Mean(a) => {
                let sh = self.value(*a).dim();
                let k = g[(0, 0)] / s::<S>((sh.0 * sh.1) as f64);
                self.accumulate(grads, *a, Array2::from_elem(sh, k));
            }
            Op::SumRows(a) => {
                let sh = self.value(*a).dim();
                let mut da = Array2::<S>::zeros(sh);
                for (mut r, &gv) in da.rows_mut().into_iter().zip(g.column(0)) {
                    r.fill(gv);
                }
                self.accumulate(grads, *a, da);
            }
            Op::SumCols(a) => {
                let sh = self.value(*a).dim();
                let mut da = Array2::<S>::zeros(sh);
                for mut r in da.rows_mut() {
                    r.assign(&g.row(0));
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceRows { a, r0, r1 } => {
                let sh = self.value(*a).dim();
                let mut da = Array2::<S>::zeros(sh);
                da.slice_mut(nds![*r0..*r1, ..]).assign(g);
                self.accumulate(grads, *a, da);
            }
            Op::SliceCols { a, c0, c1 } => {
                let sh = self.value(*a).dim();
                let mut da = Array2::<S>::zeros(sh);
                da.slice_mut(nds![.., *c0..*c1]).assign(g);
                self.accumulate(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    let gp = g.slice(nds![r..r + n, ..]).to_owned();
                    self.accumulate(grads, p, gp);
                    r += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    let gp = g.slice(nds![.., c..c + n]).to_owned();
                    self.accumulate(grads, p, gp);
                    c += n;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::Reshape(a) => {
                let sh = self.value(*a).dim();
                let data: Vec<S> = g.iter().copied().collect();
                self.accumulate(grads, *a, Array2::from_shape_vec(sh, data).unwrap());
            }
            Op::Gather { a, idx } => {
                let sh = self.value(*a).dim();
                let mut flat = vec![S::zero(); sh.0 * sh.1];
                for (&i, &gv) in idx.iter().zip(g.iter()) {
                    if i >= 0 {
                        flat[i as usize] += gv;
                    }
                }
                self.accumulate(grads, *a, Array2::from_shape_vec(sh, flat).unwrap());
            }
            Op::UnaryOp { a, f } => {
                let av = self.value(*a).clone();
                let da = ndarray::Zip::from(g)
                    .and(&av.view())
                    .map_collect(|&gv, &x| gv * unary_derivative(x, *f));
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(Var(id as u32)).clone();
                let mut da = g * &y.view();
                for (mut dr, yr) in da.rows_mut().into_iter().zip(y.rows()) {
                    let dot: S = dr.iter().copied().sum();
                    ndarray::Zip::from(&mut dr).and(yr).for_each(|d, &yv| {
                        *d -= dot * yv;
                    });
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNormRows { a, eps } => {
                let xv = self.value(*a).clone();
                let d = s::<S>(xv.ncols() as f64);
                let mut da = Array2::<S>::zeros(xv.dim());
                for ((xr, gr), mut dr) in xv
                    .rows()
                    .into_iter()
                    .zip(g.rows())
                    .zip(da.rows_mut())
                {
                    let (mean, rstd) = row_stats(xr, *eps);
                    let mut gdot = S::zero();
                    let mut gsum = S::zero();
                    for (&x, &gv) in xr.iter().zip(gr.iter()) {
                        let y = (x - mean) * rstd;
                        gdot += gv * y;
                        gsum += gv;
                    }
                    for ((&x, &gv), dst) in xr.iter().zip(gr.iter()).zip(dr.iter_mut()) {
                        let y = (x - mean) * rstd;
                        *dst = rstd * (gv - gsum / d - y * gdot / d);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Rodrigues { v } => {
                let val = self.value(*v).clone();
                let axis = [val[(0, 0)], val[(0, 1)], val[(0, 2)]];
                let dv = crate::so3::rodrigues_vjp(axis, g);
                self.accumulate(grads, *v, Array2::from_shape_vec((1, 3), dv.to_vec()).unwrap());
            }
        }
    }
}

fn row_stats<S: Scalar>(row: ndarray::ArrayView1<S>, eps: S) -> (S, S) {
    let n = s::<S>(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
    (mean, S::one() / (var + eps).sqrt())
}

fn unary_forward<S: Scalar>(x: S, f: Unary) -> S {
    match f {
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Recip => S::one() / x,
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Tanh => x.tanh(),
        Unary::Gelu => gelu(x),
        Unary::Relu => x.max(S::zero()),
    }
}

fn unary_derivative<S: Scalar>(x: S, f: Unary) -> S {
    match f {
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Exp => x.exp(),
        Unary::Ln => S::one() / x,
        Unary::Sqrt => s::<S>(0.5) / x.sqrt(),
        Unary::Square => s::<S>(2.0) * x,
        Unary::Recip => -S::one() / (x * x),
        Unary::Sigmoid => {
            let y = sigmoid(x);
            y * (S::one() - y)
        }
        Unary::Softplus => sigmoid(x),
        Unary::Tanh => {
            let t = x.tanh();
            S::one() - t * t
        }
        Unary::Gelu => gelu_derivative(x),
        Unary::Relu => {
            if x > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-(x.abs())).exp().ln_1p()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu<S: Scalar>(x: S) -> S {
    let u = s::<S>(GELU_C) * (x + s::<S>(GELU_A) * x * x * x);
    s::<S>(0.5) * x * (S::one() + u.tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let u = s::<S>(GELU_C) * (x + s::<S>(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = s::<S>(GELU_C) * (S::one() + s::<S>(3.0 * GELU_A) * x * x);
    s::<S>(0.5) * (S::one() + t) + s::<S>(0.5) * x * (S::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    /// Central finite differences over every element of every input,
    /// compared against the analytic gradient.
    fn check_grad<F>(inputs: &[Array2<f64>], build: F, tol: f64)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);

        let h = 1e-5;
        for (k, base) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(base.dim()));
            for i in 0..base.nrows() {
                for j in 0..base.ncols() {
                    let eval = |delta: f64| {
                        let mut g2 = Graph::<f64>::new();
                        let vs: Vec<Var> = inputs
                            .iter()
                            .enumerate()
                            .map(|(m, a)| {
                                let mut a = a.clone();
                                if m == k {
                                    a[(i, j)] += delta;
                                }
                                g2.input(a)
                            })
                            .collect();
                        let l = build(&mut g2, &vs);
                        g2.scalar_value(l)
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = analytic[(i, j)];
                    let denom = fd.abs().max(a.abs()).max(1e-4);
                    assert!(
                        (fd - a).abs() / denom < tol,
                        "input {k} at ({i},{j}): fd={fd} analytic={a}"
                    );
                }
            }
        }
    }

    fn rand_arr(r: usize, c: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let mut rng = crate::rng::stream(1, "test/matmul");
        let a = rand_arr(3, 4, &mut rng);
        let b = rand_arr(4, 2, &mut rng);
        check_grad(&[a, b], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let sq = g.unary(m, Unary::Square);
            g.sum(sq)
        }, 1e-6);
    }

    #[test]
    fn transposed_matmul_grads() {
        let mut rng = crate::rng::stream(2, "test/matmul_t");
        let a = rand_arr(4, 3, &mut rng);
        let b = rand_arr(4, 2, &mut rng);
        check_grad(&[a, b], |g, v| {
            let m = g.matmul_t(v[0], v[1], true, false); // aᵀ·b
            let sq = g.unary(m, Unary::Square);
            g.sum(sq)
        }, 1e-6);
        let mut rng = crate::rng::stream(3, "test/matmul_t2");
        let a = rand_arr(3, 4, &mut rng);
        let b = rand_arr(2, 4, &mut rng);
        check_grad(&[a, b], |g, v| {
            let m = g.matmul_t(v[0], v[1], false, true); // a·bᵀ
            let sq = g.unary(m, Unary::Square);
            g.sum(sq)
        }, 1e-6);
    }

    #[test]
    fn broadcast_ops_grads() {
        let mut rng = crate::rng::stream(4, "test/broadcast");
        let a = rand_arr(3, 4, &mut rng);
        let row = rand_arr(1, 4, &mut rng);
        let col = rand_arr(3, 1, &mut rng).mapv(|x| x + 2.5); // keep away from 0 for div
        check_grad(&[a.clone(), row.clone()], |g, v| {
            let x = g.add_row(v[0], v[1]);
            let y = g.mul_row(x, v[1]);
            let sq = g.unary(y, Unary::Square);
            g.sum(sq)
        }, 1e-6);
        check_grad(&[a, col], |g, v| {
            let x = g.mul_col(v[0], v[1]);
            let y = g.add_col(x, v[1]);
            let z = g.div_col(y, v[1]);
            let sq = g.unary(z, Unary::Square);
            g.sum(sq)
        }, 1e-6);
    }

    #[test]
    fn unary_grads() {
        let mut rng = crate::rng::stream(5, "test/unary");
        for f in [
            Unary::Sin,
            Unary::Cos,
            Unary::Exp,
            Unary::Sigmoid,
            Unary::Softplus,
            Unary::Tanh,
            Unary::Gelu,
            Unary::Square,
        ] {
            let a = rand_arr(2, 3, &mut rng);
            check_grad(&[a], |g, v| {
                let y = g.unary(v[0], f);
                let sq = g.unary(y, Unary::Square);
                g.sum(sq)
            }, 1e-5);
        }
        // Positive-domain unaries.
        for f in [Unary::Ln, Unary::Sqrt, Unary::Recip] {
            let a = rand_arr(2, 3, &mut rng).mapv(|x| x.abs() + 0.5);
            check_grad(&[a], |g, v| {
                let y = g.unary(v[0], f);
                let sq = g.unary(y, Unary::Square);
                g.sum(sq)
            }, 1e-5);
        }
    }

    #[test]
    fn softmax_and_layernorm_grads() {
        let mut rng = crate::rng::stream(6, "test/rows");
        let a = rand_arr(3, 5, &mut rng);
        check_grad(&[a.clone()], |g, v| {
            let y = g.softmax_rows(v[0]);
            let sq = g.unary(y, Unary::Square);
            g.sum(sq)
        }, 1e-5);
        check_grad(&[a], |g, v| {
            let y = g.layer_norm_rows(v[0], 1e-6);
            let sq = g.unary(y, Unary::Square);
            g.sum(sq)
        }, 1e-5);
    }

    #[test]
    fn structural_ops_grads() {
        let mut rng = crate::rng::stream(7, "test/struct");
        let a = rand_arr(4, 3, &mut rng);
        let b = rand_arr(2, 3, &mut rng);
        check_grad(&[a.clone(), b], |g, v| {
            let c = g.concat_rows(&[v[0], v[1]]);
            let sl = g.slice_rows(c, 1, 5);
            let t = g.transpose(sl);
            let r = g.reshape(t, 4, 3);
            let sr = g.sum_rows(r);
            let sc = g.sum_cols(r);
            let m1 = g.mean(sr);
            let m2 = g.mean(sc);
            g.add(m1, m2)
        }, 1e-6);
        let idx: Arc<Vec<i64>> = Arc::new(vec![0, 5, -1, 3, 3, 11]);
        check_grad(&[a], |g, v| {
            let gt = g.gather(v[0], idx.clone(), 2, 3);
            let sq = g.unary(gt, Unary::Square);
            g.sum(sq)
        }, 1e-6);
    }

    #[test]
    fn rodrigues_grad_matches_finite_differences() {
        // Note ‖R‖²_F is constant on SO(3); weight the entries so the
        // test loss actually depends on the rotation.
        let weights = array![[0.3, -1.1, 0.7], [0.9, 0.2, -0.5], [-0.8, 0.4, 1.3]];
        for seed in 0..4u64 {
            let mut rng = crate::rng::stream(seed, "test/rodrigues");
            let v = rand_arr(1, 3, &mut rng).mapv(|x| x * 2.0);
            let w = weights.clone();
            check_grad(&[v], move |g, vars| {
                let r = g.rodrigues(vars[0]);
                let wv = g.constant(w.clone());
                let p = g.mul(r, wv);
                g.sum(p)
            }, 1e-5);
        }
        // Near-zero angle takes the series branch.
        let v = array![[1e-10, -2e-10, 5e-11]];
        check_grad(&[v], |g, vars| {
            let r = g.rodrigues(vars[0]);
            let wv = g.constant(array![[0.3, -1.1, 0.7], [0.9, 0.2, -0.5], [-0.8, 0.4, 1.3]]);
            let p = g.mul(r, wv);
            g.sum(p)
        }, 1e-4);
    }

    #[test]
    fn constants_do_not_accumulate_gradients() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(array![[1.0, 2.0]]);
        let x = g.input(array![[3.0, 4.0]]);
        let y = g.mul(c, x);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &array![[1.0, 2.0]]);
    }
}
