use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use super::params::{Gradients, ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Node handle inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    SumAll(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
}

#[derive(Debug)]
enum Data {
    Owned(Array2<f64>),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    data: Data,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape over 2-D `f64` arrays.
///
/// Values are computed eagerly as ops are recorded. Parameter leaves borrow
/// their arrays from the [`ParamStore`]; a parameter used several times maps
/// to a single node.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    frozen: Option<Vec<bool>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
            frozen: None,
        }
    }

    /// A graph that only tracks gradients for `trainable`; other parameters
    /// act as constants.
    pub fn with_trainable(params: &'p ParamStore, trainable: &[ParamId]) -> Self {
        let mut frozen = vec![true; params.len()];
        for id in trainable {
            frozen[id.index()] = false;
        }
        Self {
            frozen: Some(frozen),
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0].data {
            Data::Owned(a) => a,
            Data::Param(id) => self.params.get(*id),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            data: Data::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            data: Data::Param(id),
            op: Op::Param(id),
            requires_grad: self.frozen.as_ref().is_none_or(|f| !f[id.index()]),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// Adds a 1×n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Multiplies every row of an m×n matrix elementwise by a 1×n row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    /// Row-wise softmax. With `causal`, entry (i, j) is masked for j > i.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let mut value = self.value(a).clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let limit = if causal { i + 1 } else { row.len() };
            let max = row
                .iter()
                .take(limit)
                .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                if j < limit {
                    *x = (*x - max).exp();
                    sum += *x;
                } else {
                    *x = 0.0;
                }
            }
            row.mapv_inplace(|x| x / sum);
        }
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Row-wise layer normalization with a 1×n gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(value, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("column counts agree");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts agree");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes row i.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Array2::zeros((idx.len(), t.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            value.row_mut(i).assign(&t.row(r));
        }
        let rg = self.rg(table);
        self.push(value, Op::GatherRows(table, idx.to_vec()), rg)
    }

    /// m×1 column holding `a[i, cols[i]]`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Var {
        let av = self.value(a);
        debug_assert_eq!(av.nrows(), cols.len());
        let value = Array2::from_shape_fn((cols.len(), 1), |(i, _)| av[[i, cols[i]]]);
        let rg = self.rg(a);
        self.push(value, Op::PickPerRow(a, cols.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// 1×n column means.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// 1×n column maxima; the gradient routes to the first maximal row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut arg = vec![0usize; av.ncols()];
        let mut value = Array2::zeros((1, av.ncols()));
        for (j, col) in av.columns().into_iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            for (i, &x) in col.iter().enumerate() {
                if x > best {
                    best = x;
                    arg[j] = i;
                }
            }
            value[[0, j]] = best;
        }
        let rg = self.rg(a);
        self.push(value, Op::MaxRows(a, arg), rg)
    }

    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for p in &parts[1..] {
            acc = self.add(acc, *p);
        }
        acc
    }

    /// Backpropagates from the 1×1 node `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut out = Gradients::with_len(self.params.len());
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, i, gy, &mut grads, &mut out);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(a) => *a += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        i: usize,
        gy: Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
        out: &mut Gradients,
    ) {
        match op {
            Op::Input => {}
            Op::Param(id) => out.accumulate(*id, &gy),
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = gy.dot(&self.value(*b).t());
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).t().dot(&gy);
                    self.acc(grads, *b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = gy b, db = gyᵀ a
                if self.rg(*a) {
                    let ga = gy.dot(self.value(*b));
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = gy.t().dot(self.value(*a));
                    self.acc(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, gy.t().to_owned()),
            Op::Add(a, b) => {
                self.acc(grads, *b, gy.clone());
                self.acc(grads, *a, gy);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, -&gy);
                self.acc(grads, *a, gy);
            }
            Op::AddRow(a, row) => {
                let gr = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.acc(grads, *row, gr);
                self.acc(grads, *a, gy);
            }
            Op::Mul(a, b) => {
                let ga = &gy * self.value(*b);
                let gb = &gy * self.value(*a);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::MulRow(a, row) => {
                let ga = &gy * self.value(*row);
                let gr = (&gy * self.value(*a))
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0));
                self.acc(grads, *a, ga);
                self.acc(grads, *row, gr);
            }
            Op::Scale(a, c) => self.acc(grads, *a, gy * *c),
            Op::Gelu(a) => {
                let mut g = gy;
                g.zip_mut_with(self.value(*a), |g, &x| *g *= gelu_grad(x));
                self.acc(grads, *a, g);
            }
            Op::Softplus(a) => {
                let mut g = gy;
                g.zip_mut_with(self.value(*a), |g, &x| *g *= sigmoid(x));
                self.acc(grads, *a, g);
            }
            Op::Softmax(a) => {
                let y = self.value(Var(i));
                let mut g = &gy * y;
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let dot = grow.sum();
                    grow.zip_mut_with(&yrow, |gv, &yv| *gv -= yv * dot);
                }
                self.acc(grads, *a, g);
            }
            Op::LogSoftmax(a) => {
                let y = self.value(Var(i));
                let mut g = gy;
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let total = grow.sum();
                    grow.zip_mut_with(&yrow, |gv, &yv| *gv -= yv.exp() * total);
                }
                self.acc(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.rg(*bias) {
                    self.acc(grads, *bias, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*gain) {
                    let gg = (&gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gain, gg);
                }
                if self.rg(*x) {
                    let gxhat = &gy * self.value(*gain);
                    let n = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let gh = gxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_g = gh.sum() / n;
                        let mean_gx = gh.dot(&xh) / n;
                        let is = inv_std[r];
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = is * (gh[c] - mean_g - xh[c] * mean_gx);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = self.value(Var(i));
                let mut g = gy;
                for (r, (mut grow, yrow)) in g.rows_mut().into_iter().zip(y.rows()).enumerate() {
                    let dot = grow.dot(&yrow);
                    let n = norms[r];
                    grow.zip_mut_with(&yrow, |gv, &yv| *gv = (*gv - yv * dot) / n);
                }
                self.acc(grads, *x, g);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    if self.rg(*p) {
                        let g = gy.slice(s![start..start + rows, ..]).to_owned();
                        self.acc(grads, *p, g);
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.shape(*p).1;
                    if self.rg(*p) {
                        let g = gy.slice(s![.., start..start + cols]).to_owned();
                        self.acc(grads, *p, g);
                    }
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let mut g = Array2::zeros(self.shape(*a));
                g.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(&gy);
                self.acc(grads, *a, g);
            }
            Op::SliceCols(a, start) => {
                let mut g = Array2::zeros(self.shape(*a));
                g.slice_mut(s![.., *start..*start + gy.ncols()]).assign(&gy);
                self.acc(grads, *a, g);
            }
            Op::GatherRows(table, idx) => {
                let mut g = Array2::zeros(self.shape(*table));
                for (i, &r) in idx.iter().enumerate() {
                    let mut row = g.row_mut(r);
                    row += &gy.row(i);
                }
                self.acc(grads, *table, g);
            }
            Op::PickPerRow(a, cols) => {
                let mut g = Array2::zeros(self.shape(*a));
                for (i, &c) in cols.iter().enumerate() {
                    g[[i, c]] = gy[[i, 0]];
                }
                self.acc(grads, *a, g);
            }
            Op::SumAll(a) => {
                let g = Array2::from_elem(self.shape(*a), gy[[0, 0]]);
                self.acc(grads, *a, g);
            }
            Op::MeanRows(a) => {
                let (m, _) = self.shape(*a);
                let row = &gy / m as f64;
                let g = Array2::from_shape_fn(self.shape(*a), |(_, c)| row[[0, c]]);
                self.acc(grads, *a, g);
            }
            Op::MaxRows(a, arg) => {
                let mut g = Array2::zeros(self.shape(*a));
                for (c, &r) in arg.iter().enumerate() {
                    g[[r, c]] = gy[[0, c]];
                }
                self.acc(grads, *a, g);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(
        store: &ParamStore,
        id: ParamId,
        f: &dyn Fn(&ParamStore) -> f64,
    ) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(store.get(id).dim());
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let mut plus = store.clone();
            plus.get_mut(id)[[r, c]] += h;
            let mut minus = store.clone();
            minus.get_mut(id)[[r, c]] -= h;
            g[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn check(store: &ParamStore, ids: &[ParamId], f: &dyn Fn(&mut Graph) -> Var) {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        let grads = g.backward(loss);
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let l = f(&mut g);
            g.scalar(l)
        };
        for &id in ids {
            let num = numeric_grad(store, id, &eval);
            let ana = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(num.dim()));
            for (a, n) in ana.iter().zip(num.iter()) {
                assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
            }
        }
    }

    fn store2() -> (ParamStore, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let a = s.add("a", array![[0.3, -1.2, 0.5], [0.9, 0.1, -0.4]]);
        let b = s.add("b", array![[0.7, 0.2, -0.3], [-0.5, 1.1, 0.6]]);
        (s, a, b)
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        let (s, a, b) = store2();
        check(&s, &[a, b], &|g| {
            let (a, b) = (g.param(a), g.param(b));
            let y = g.matmul_t(a, b);
            let bt = g.transpose(b);
            let z = g.matmul(y, a);
            let w = g.matmul(a, bt);
            let zz = g.mul(z, z);
            let t = g.sum_all(zz);
            let u = g.sum_all(w);
            g.add(t, u)
        });
    }

    #[test]
    fn softmax_and_log_softmax_gradients() {
        let (s, a, b) = store2();
        check(&s, &[a, b], &|g| {
            let (a, b) = (g.param(a), g.param(b));
            let sc = g.matmul_t(a, b);
            let p = g.softmax_rows(sc, true);
            let w = g.matmul(p, b);
            let ls = g.log_softmax_rows(w);
            let picked = g.pick_per_row(ls, &[2, 0]);
            let m = g.mul(w, w);
            let x = g.sum_all(picked);
            let y = g.sum_all(m);
            g.add(x, y)
        });
    }

    #[test]
    fn layer_norm_gelu_and_normalize_gradients() {
        let mut s = ParamStore::new();
        let x = s.add("x", array![[0.3, -1.2, 0.5, 2.0], [0.9, 0.1, -0.4, 0.0]]);
        let gain = s.add("g", array![[1.1, 0.8, -0.5, 1.3]]);
        let bias = s.add("b", array![[0.1, 0.0, 0.2, -0.3]]);
        check(&s, &[x, gain, bias], &|g| {
            let (x, ga, bi) = (g.param(x), g.param(gain), g.param(bias));
            let y = g.layer_norm(x, ga, bi);
            let y = g.gelu(y);
            let y = g.mul_row(y, ga);
            let y = g.add_row(y, bi);
            let n = g.l2_normalize_rows(y);
            let sp = g.softplus(n);
            let m = g.mean_rows(sp);
            let mx = g.max_rows(y);
            let mm = g.mul(m, mx);
            g.sum_all(mm)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let (s, a, b) = store2();
        check(&s, &[a, b], &|g| {
            let (av, bv) = (g.param(a), g.param(b));
            let c = g.concat_rows(&[av, bv]);
            let d = g.concat_cols(&[av, bv]);
            let e = g.slice_rows(c, 1, 2);
            let f = g.slice_cols(d, 2, 3);
            let h = g.gather_rows(c, &[3, 0, 3]);
            let ef = g.sub(e, f);
            let q = g.mul(ef, ef);
            let r = g.scale(h, 0.5);
            let r2 = g.mul(r, r);
            let s1 = g.mean_all(q);
            let s2 = g.sum_all(r2);
            g.add_scalars(&[s1, s2])
        });
    }

    #[test]
    fn shared_param_uses_one_node() {
        let (s, a, _) = store2();
        let mut g = Graph::new(&s);
        let x = g.param(a);
        let y = g.param(a);
        assert_eq!(x, y);
        let z = g.add(x, y);
        let l = g.sum_all(z);
        let grads = g.backward(l);
        assert!(grads.get(a).unwrap().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(array![[1.0, 5.0, 9.0], [2.0, 3.0, 4.0], [0.0, 0.0, 0.0]]);
        let p = g.softmax_rows(x, true);
        let v = g.value(p);
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[1, 2]], 0.0);
        for row in v.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
