//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass on a tape. Parameters
//! live in a [`ParamStore`] outside the graph and enter it as leaves; calling
//! [`Graph::backward`] on a scalar node returns one gradient per parameter.
//! Vectors are `1 × d` matrices and scalars are `1 × 1`.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// All parameters concatenated in insertion order, each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.scalar_count(), "flat parameter length");
        let mut offset = 0;
        for v in &mut self.values {
            for (dst, src) in v.iter_mut().zip(&flat[offset..]) {
                *dst = *src;
            }
            offset += v.len();
        }
    }

    /// Round every parameter to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

/// One gradient per parameter of a [`ParamStore`], zero where untouched.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params.values.iter().map(|v| Matrix::zeros(v.dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Matrix)> {
        self.grads.iter_mut().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Transpose(Var),
    Softmax(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    PadRows(Var),
    MaskedMean { input: Var, weights: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ScalarWithGrad(Var, Matrix),
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Tape for one forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                self.req(*a) || self.req(*b)
            }
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::GatherRows(a, _)
            | Op::PadRows(a)
            | Op::SliceCols(a, _)
            | Op::ScalarWithGrad(a, _) => self.req(*a),
            Op::LayerNorm { input, .. } | Op::MaskedMean { input, .. } => self.req(*input),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.req(*v)),
            Op::WeightedSum(vs) => vs.iter().any(|(v, _)| self.req(*v)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on non-scalar node");
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimension");
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `a + row`, broadcasting a `1 × d` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "add_row shape");
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// `a ⊙ row`, broadcasting a `1 × d` row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row), (1, self.shape(a).1), "mul_row shape");
        let out = self.value(a) * self.value(row);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        assert_eq!(self.shape(a), c.dim(), "mul_const shape");
        let out = self.value(a) * &c;
        self.push(out, Op::MulConst(a, c))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    /// Row-wise softmax. Columns where `key_mask` is false get exactly zero
    /// weight. Every row must keep at least one column.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        if let Some(mask) = key_mask {
            assert_eq!(mask.len(), x.ncols(), "softmax mask length");
            assert!(mask.iter().any(|&m| m), "softmax with every key masked");
        }
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| key_mask.map_or(true, |m| m[*j]))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if key_mask.map_or(true, |m| m[j]) {
                    *v = (*v - max).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise normalization to zero mean and unit (biased) variance.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { input: a, inv_std })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = self.value(a);
        let out = x.select(Axis(0), rows);
        self.push(out, Op::GatherRows(a, rows.to_vec()))
    }

    /// Append zero rows until the matrix has `total` rows.
    pub fn pad_rows(&mut self, a: Var, total: usize) -> Var {
        let x = self.value(a);
        assert!(total >= x.nrows(), "pad_rows cannot shrink");
        let mut out = Matrix::zeros((total, x.ncols()));
        out.slice_mut(s![..x.nrows(), ..]).assign(x);
        self.push(out, Op::PadRows(a))
    }

    /// Mean over the rows flagged true in `mask`, as a `1 × d` row.
    pub fn masked_mean_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.nrows(), "masked_mean mask length");
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "masked_mean over an empty mask");
        let weights: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 1.0 / count as f64 } else { 0.0 })
            .collect();
        let mut out = Matrix::zeros((1, x.ncols()));
        for (row, w) in x.rows().into_iter().zip(&weights) {
            if *w != 0.0 {
                out.row_mut(0).scaled_add(*w, &row);
            }
        }
        self.push(out, Op::MaskedMean { input: a, weights })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows col counts");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    /// Scalar node whose value and gradient with respect to `input` were
    /// computed outside the tape (closed-form losses).
    pub fn scalar_with_grad(&mut self, input: Var, value: f64, grad: Matrix) -> Var {
        assert_eq!(self.shape(input), grad.dim(), "scalar_with_grad shape");
        self.push(Matrix::from_elem((1, 1), value), Op::ScalarWithGrad(input, grad))
    }

    /// `Σ wᵢ · xᵢ` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut out = Matrix::zeros(self.shape(terms[0].0));
        for (v, w) in terms {
            out.scaled_add(*w, self.value(*v));
        }
        self.push(out, Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of a scalar `root` with respect to every parameter.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::from_elem((1, 1), 1.0));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, delta: Matrix| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.grads[id.0] += &g,
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.req(*a) {
                        acc(*a, g.dot(&vb.t()));
                    }
                    if self.req(*b) {
                        acc(*b, va.t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::MulRow(a, row) => {
                    let (va, vr) = (self.value(*a), self.value(*row));
                    if self.req(*row) {
                        acc(*row, (&g * va).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*a, &g * vr);
                }
                Op::Scale(a, f) => acc(*a, g * *f),
                Op::MulConst(a, c) => acc(*a, g * c),
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, y * &(&g - &dot));
                }
                Op::LayerNorm { input, inv_std } => {
                    let xhat = &node.value;
                    let d = xhat.ncols() as f64;
                    let mut dx = Matrix::zeros(xhat.dim());
                    for (i, is) in inv_std.iter().enumerate() {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let mean_g = gr.sum() / d;
                        let mean_gx = gr.dot(&xr) / d;
                        Zip::from(dx.row_mut(i))
                            .and(&gr)
                            .and(&xr)
                            .for_each(|o, &gv, &xv| *o = is * (gv - mean_g - xv * mean_gx));
                    }
                    acc(*input, dx);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut dx = g;
                    Zip::from(&mut dx).and(x).for_each(|d, &xv| *d *= gelu_grad(xv));
                    acc(*a, dx);
                }
                Op::GatherRows(a, rows) => {
                    let mut dx = Matrix::zeros(self.shape(*a));
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dx.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(*a, dx);
                }
                Op::PadRows(a) => {
                    let n = self.shape(*a).0;
                    acc(*a, g.slice(s![..n, ..]).to_owned());
                }
                Op::MaskedMean { input, weights } => {
                    let (n, d) = self.shape(*input);
                    let mut dx = Matrix::zeros((n, d));
                    for (i, w) in weights.iter().enumerate() {
                        if *w != 0.0 {
                            dx.row_mut(i).scaled_add(*w, &g.row(0));
                        }
                    }
                    acc(*input, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(*p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc(*p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut dx = Matrix::zeros(self.shape(*a));
                    let w = g.ncols();
                    dx.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(*a, dx);
                }
                Op::ScalarWithGrad(a, local) => acc(*a, local * g[[0, 0]]),
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        acc(*v, &g * *w);
                    }
                }
            }
        }
        out
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
