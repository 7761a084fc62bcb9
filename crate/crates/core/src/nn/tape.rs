//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar (1×1) node walks the record in reverse and
//! accumulates vector-Jacobian products into every parameter leaf.
//!
//! The primitive set is closed: affine maps (`matmul`, `matmul_t`, `add_row`),
//! elementwise arithmetic, `relu`, `tanh`, `sigmoid`, `exp`, `log`, `sqrt`,
//! `square`, `clamp`, reductions (`sum`, `mean`, `sum_cols`, `mean_rows`),
//! row softmax, and column slicing/concatenation. Everything else (dot
//! products, norms, attention) is composed from these.

use ndarray::{concatenate, s, Array2, Axis, Zip};

use super::{NnError, Params, Scalar};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, T, T),
    Min(Var, Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RepeatRows(Var),
}

impl<T> Op<T> {
    fn operands(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Input | Param(_) => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b)
            | AddRow(a, b) | MulCol(a, b) | Min(a, b) => vec![*a, *b],
            Scale(a, _) | Clamp(a, _, _) => vec![*a],
            AddScalar(a) | Relu(a) | Tanh(a) | Sigmoid(a) | Exp(a) | Log(a) | Sqrt(a)
            | Square(a) | Sum(a) | Mean(a) | SumCols(a) | MeanRows(a) | SoftmaxRows(a)
            | SliceCols(a, _) | RepeatRows(a) => vec![*a],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    /// Whether any parameter leaf feeds this node.
    needs_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    n_params: usize,
}

/// Parameter leaves registered on a graph, in the [`Params`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"));
        self.vars[idx]
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            n_params: 0,
        }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        let needs_grad = matches!(op, Op::Param(_))
            || op.operands().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn constant(&mut self, x: T) -> Var {
        self.input(Array2::from_elem((1, 1), x))
    }

    /// Registers every array of `params` as a differentiable leaf.
    pub fn params(&mut self, params: &Params<T>) -> ParamVars {
        let mut names = Vec::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        for (name, arr) in params.iter() {
            let idx = self.n_params;
            self.n_params += 1;
            names.push(name.to_string());
            vars.push(self.push(arr.clone(), Op::Param(idx)));
        }
        ParamVars { names, vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    /// Matrix plus a broadcast 1×c row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// Matrix times a broadcast r×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).mapv(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).mapv(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.ln());
        self.push(v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]` and at the
    /// boundaries themselves.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).mapv(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        Zip::from(&mut v)
            .and(self.value(b))
            .for_each(|x, &y| *x = if *x <= y { *x } else { y });
        self.push(v, Op::Min(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::from(x.len()).unwrap();
        let v = Array2::from_elem((1, 1), x.sum() / n);
        self.push(v, Op::Mean(a))
    }

    /// Per-row sum, r×c → r×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// Per-column mean, r×c → 1×c.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::from(x.nrows()).unwrap();
        let v = x.sum_axis(Axis(0)).insert_axis(Axis(0)).mapv(|s| s / n);
        self.push(v, Op::MeanRows(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Broadcasts a 1×c row to r×c.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Var {
        let row = self.value(a);
        debug_assert_eq!(row.nrows(), 1);
        let v = row.broadcast((rows, row.ncols())).unwrap().to_owned();
        self.push(v, Op::RepeatRows(a))
    }

    // Composites.

    /// Row-wise dot product, r×c · r×c → r×1.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_cols(p)
    }

    /// Row-wise Euclidean norm, r×c → r×1.
    pub fn norm_rows(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.sum_cols(sq);
        self.sqrt(s)
    }

    /// Scales every row to unit Euclidean norm. An all-zero row maps to zero
    /// instead of NaN.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.sum_cols(sq);
        let s = self.add_scalar(s, T::from_f64(1e-24).unwrap());
        let n = self.sqrt(s);
        let (r, _) = self.shape(n);
        let ones = self.input(Array2::from_elem((r, 1), T::one()));
        let inv = self.div(ones, n);
        self.mul_col(a, inv)
    }

    /// Reverse pass from the 1×1 node `loss`. Returns one gradient per
    /// registered parameter leaf, in registration order.
    pub fn backward(&self, loss: Var) -> Result<Vec<Array2<T>>, NnError> {
        if self.shape(loss) != (1, 1) {
            return Err(NnError::Shape(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));
        let mut out: Vec<Option<Array2<T>>> = (0..self.n_params).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = &node.value;
            if !node.needs_grad {
                continue;
            }
            let needs = |v: &Var| self.nodes[v.0].needs_grad;
            let acc = |v: Var, g: Array2<T>, grads: &mut Vec<Option<Array2<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    out[*p] = Some(gy);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if needs(a) {
                        acc(*a, gy.dot(&bv.t()), &mut grads);
                    }
                    if needs(b) {
                        acc(*b, av.t().dot(&gy), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if needs(a) {
                        acc(*a, gy.dot(bv), &mut grads);
                    }
                    if needs(b) {
                        acc(*b, gy.t().dot(av), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, gy.clone(), &mut grads);
                    acc(*b, gy, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, gy.mapv(|x| -x), &mut grads);
                    acc(*a, gy, &mut grads);
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        acc(*a, &gy * self.value(*b), &mut grads);
                    }
                    if needs(b) {
                        acc(*b, &gy * self.value(*a), &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = &gy / bv;
                    let gb = -(&ga * y);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::AddRow(a, row) => {
                    let gr = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*row, gr, &mut grads);
                    acc(*a, gy, &mut grads);
                }
                Op::MulCol(a, col) => {
                    let av = self.value(*a);
                    let cv = self.value(*col);
                    let gc = (&gy * av).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*col, gc, &mut grads);
                    acc(*a, &gy * cv, &mut grads);
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(*a, gy.mapv(|x| x * k), &mut grads);
                }
                Op::AddScalar(a) => acc(*a, gy, &mut grads),
                Op::Relu(a) => {
                    let mut g = gy;
                    Zip::from(&mut g).and(y).for_each(|g, &y| {
                        if y <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    acc(*a, g, &mut grads);
                }
                Op::Tanh(a) => {
                    let mut g = gy;
                    Zip::from(&mut g)
                        .and(y)
                        .for_each(|g, &y| *g = *g * (T::one() - y * y));
                    acc(*a, g, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let mut g = gy;
                    Zip::from(&mut g)
                        .and(y)
                        .for_each(|g, &y| *g = *g * y * (T::one() - y));
                    acc(*a, g, &mut grads);
                }
                Op::Exp(a) => acc(*a, gy * y, &mut grads),
                Op::Log(a) => acc(*a, gy / self.value(*a), &mut grads),
                Op::Sqrt(a) => {
                    let two = T::from(2.0).unwrap();
                    let mut g = gy;
                    Zip::from(&mut g).and(y).for_each(|g, &y| *g = *g / (two * y));
                    acc(*a, g, &mut grads);
                }
                Op::Square(a) => {
                    let two = T::from(2.0).unwrap();
                    let mut g = gy;
                    Zip::from(&mut g)
                        .and(self.value(*a))
                        .for_each(|g, &x| *g = *g * two * x);
                    acc(*a, g, &mut grads);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let mut g = gy;
                    Zip::from(&mut g).and(self.value(*a)).for_each(|g, &x| {
                        if x <= lo || x >= hi {
                            *g = T::zero();
                        }
                    });
                    acc(*a, g, &mut grads);
                }
                Op::Min(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = gy.clone();
                    let mut gb = gy;
                    Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(av)
                        .and(bv)
                        .for_each(|ga, gb, &x, &y| {
                            if x <= y {
                                *gb = T::zero();
                            } else {
                                *ga = T::zero();
                            }
                        });
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Sum(a) => {
                    let g = gy[[0, 0]];
                    acc(*a, Array2::from_elem(self.shape(*a), g), &mut grads);
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let n = T::from(shape.0 * shape.1).unwrap();
                    acc(*a, Array2::from_elem(shape, gy[[0, 0]] / n), &mut grads);
                }
                Op::SumCols(a) => {
                    let shape = self.shape(*a);
                    let g = gy.broadcast(shape).unwrap().to_owned();
                    acc(*a, g, &mut grads);
                }
                Op::MeanRows(a) => {
                    let shape = self.shape(*a);
                    let n = T::from(shape.0).unwrap();
                    let g = gy.mapv(|x| x / n).broadcast(shape).unwrap().to_owned();
                    acc(*a, g, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y ⊙ (dy − Σ_j dy_j y_j)
                    let inner = (&gy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let g = y * &(&gy - &inner);
                    acc(*a, g, &mut grads);
                }
                Op::SliceCols(a, start) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    let w = gy.ncols();
                    g.slice_mut(s![.., *start..*start + w]).assign(&gy);
                    acc(*a, g, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(*p, gy.slice(s![.., off..off + w]).to_owned(), &mut grads);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc(*p, gy.slice(s![off..off + h, ..]).to_owned(), &mut grads);
                        off += h;
                    }
                }
                Op::RepeatRows(a) => {
                    let g = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*a, g, &mut grads);
                }
            }
        }

        out.into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.ok_or(()).or_else(|_| {
                    // Parameter did not influence the loss.
                    let var = self
                        .nodes
                        .iter()
                        .find(|n| matches!(n.op, Op::Param(p) if p == i))
                        .expect("registered parameter");
                    Ok(Array2::zeros(var.value.dim()))
                })
            })
            .collect()
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
