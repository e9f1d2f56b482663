//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every network in the pipeline (sequence encoder, projection heads,
//! prompt generator, denoiser, image decoder) is written against this tape,
//! so analytic gradients can be checked against finite differences and
//! saliency maps can be read off input leaves.

use ndarray::{s, Array2, Axis};

use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Mask {
    /// Attention allowed iff both positions lie in the same block of
    /// `block` rows and the key does not come after the query.
    BlockCausal { block: usize },
}

impl Mask {
    fn allows(self, i: usize, j: usize) -> bool {
        match self {
            Mask::BlockCausal { block } => i / block == j / block && j <= i,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Vec<f64>),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax { x: Var },
    LogSoftmax(Var),
    DiagMean(Var),
    Normalize { x: Var, norms: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    param: Option<ParamId>,
}

/// Records a computation and differentiates it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a node, zero-shaped `None` if it did not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Sum of gradients over every leaf that was created from `id`.
    pub fn param(&self, id: ParamId) -> Option<Array2<f64>> {
        let mut acc: Option<Array2<f64>> = None;
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut acc {
                    Some(a) => *a += g,
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    /// All parameters touched by the graph, with their accumulated gradient.
    pub fn param_grads(&self) -> Vec<(ParamId, Array2<f64>)> {
        let mut ids: Vec<ParamId> = self.params.iter().map(|p| p.0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .filter_map(|id| self.param(id).map(|g| (id, g)))
            .collect()
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Constant or input leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Frozen parameters become plain
    /// constants and never receive gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf);
        if !p.frozen {
            self.nodes[v.0].param = Some(id);
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
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

    /// Adds a `[1 × m]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `[1 × m]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    /// Scales row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let mut v = self.value(a).clone();
        for (mut row, f) in v.rows_mut().into_iter().zip(&factors) {
            row *= *f;
        }
        self.push(v, Op::ScaleRows(a, factors))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Multiplies `a` by the `[1 × 1]` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let v = self.value(a) * c;
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std })
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<Mask>) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros(x.dim());
        for (i, (row, mut orow)) in x.rows().into_iter().zip(out.rows_mut()).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m.allows(i, j));
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| allowed(*j))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            orow /= sum;
        }
        self.push(out, Op::Softmax { x: a })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None)
    }

    /// Row softmax where position `i` only sees positions `j <= i` within
    /// its own block of `block` consecutive rows.
    pub fn block_causal_softmax(&mut self, a: Var, block: usize) -> Var {
        self.softmax_impl(a, Some(Mask::BlockCausal { block }))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Mean of the diagonal of a square matrix, as a `[1 × 1]` node.
    pub fn diag_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.nrows();
        let m = (0..n).map(|i| x[[i, i]]).sum::<f64>() / n as f64;
        self.push(Array2::from_elem((1, 1), m), Op::DiagMean(a))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row /= n;
            norms.push(n);
        }
        self.push(out, Op::Normalize { x: a, norms })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Row `k` of the output is row `idx[k]` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        let v = x.select(Axis(0), &idx);
        self.push(v, Op::GatherRows(a, idx))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape: element count differs");
        let flat: Vec<f64> = x.iter().cloned().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(v, Op::Reshape(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), v), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.sum() / x.len() as f64;
        self.push(Array2::from_elem((1, 1), v), Op::MeanAll(a))
    }

    /// Mean squared difference between two equally shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Differentiates the `[1 × 1]` node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(x) => *x += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, r) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *r, gr);
                    acc(&mut grads, *a, &g * self.value(*r));
                }
                Op::ScaleRows(a, f) => {
                    let mut ga = g.clone();
                    for (mut row, c) in ga.rows_mut().into_iter().zip(f) {
                        row *= *c;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::MulScalar(a, s) => {
                    let gs = (&g * self.value(*a)).sum();
                    acc(&mut grads, *s, Array2::from_elem((1, 1), gs));
                    acc(&mut grads, *a, &g * self.scalar(*s));
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Gelu(a) => {
                    let d = self.value(*a).mapv(gelu_grad);
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, &g * &d);
                }
                Op::Square(a) => acc(&mut grads, *a, &g * &(self.value(*a) * 2.0)),
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let m = yr.len() as f64;
                        let mean_g = gr.sum() / m;
                        let mean_gy = gr.dot(&yr) / m;
                        let mut out = gx.row_mut(r);
                        for k in 0..yr.len() {
                            out[k] = inv_std[r] * (gr[k] - mean_g - yr[k] * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax { x, .. } => {
                    let y = &node.value;
                    let mut gx = &g * y;
                    for (mut row, yr) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yr, |gv, yv| *gv -= yv * dot);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for (mut row, yr) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let total = row.sum();
                        row.zip_mut_with(&yr, |gv, yv| *gv -= yv.exp() * total);
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::DiagMean(a) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Array2::zeros((r, c));
                    let k = g[[0, 0]] / r as f64;
                    for d in 0..r.min(c) {
                        ga[[d, d]] = k;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Normalize { x, norms } => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for ((mut row, yr), n) in gx.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        let dot = row.dot(&yr);
                        row.zip_mut_with(&yr, |gv, yv| *gv = (*gv - yv * dot) / n);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let r = self.shape(*p).0;
                        acc(&mut grads, *p, g.slice(s![start..start + r, ..]).to_owned());
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.shape(*p).1;
                        acc(&mut grads, *p, g.slice(s![.., start..start + c]).to_owned());
                        start += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (k, &src) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &g.row(k);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    let flat: Vec<f64> = g.iter().cloned().collect();
                    acc(&mut grads, *a, Array2::from_shape_vec(shape, flat).expect("reshape grad"));
                }
                Op::SumAll(a) => acc(&mut grads, *a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
                Op::MeanAll(a) => {
                    let shape = self.shape(*a);
                    let k = g[[0, 0]] / (shape.0 * shape.1) as f64;
                    acc(&mut grads, *a, Array2::from_elem(shape, k));
                }
            }
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Gradients { grads, params }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Array2<f64>) {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let y = build(&mut t, x);
        let g = t.backward(y).wrt(x).cloned().unwrap_or_else(|| Array2::zeros(x0.dim()));
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += delta;
                let mut t = Tape::new();
                let x = t.leaf(xp);
                let y = build(&mut t, x);
                t.scalar(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g[[r, c]];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                "entry ({r},{c}): fd {fd} analytic {an}"
            );
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5], [-0.2, 0.9, 0.05], [0.6, -0.3, 1.4]]
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        fd_check(|t, x| { let y = t.gelu(x); t.sum_all(y) }, sample());
        fd_check(|t, x| { let y = t.tanh(x); let y = t.square(y); t.mean_all(y) }, sample());
        fd_check(|t, x| { let y = t.sigmoid(x); let y = t.exp(y); t.sum_all(y) }, sample());
    }

    #[test]
    fn row_ops_match_finite_differences() {
        let w = array![[0.5, -0.1, 0.2]];
        fd_check(
            |t, x| {
                let y = t.layer_norm(x, 1e-5);
                let r = t.leaf(w.clone());
                let y = t.mul_row(y, r);
                let y = t.add_row(y, r);
                let y = t.square(y);
                t.sum_all(y)
            },
            sample(),
        );
        fd_check(
            |t, x| {
                let y = t.normalize_rows(x);
                let y = t.scale_rows(y, vec![1.0, 2.0, -1.0, 0.5]);
                let y = t.square(y);
                let y = t.gather_rows(y, vec![0, 0, 3]);
                t.sum_all(y)
            },
            sample(),
        );
    }

    #[test]
    fn softmax_variants_match_finite_differences() {
        let w = array![[0.5, -0.1, 0.2, 1.0], [0.3, 0.3, -0.7, 0.1], [1.0, 0.0, 0.2, -0.4], [0.2, 0.9, 0.1, 0.0]];
        fd_check(
            |t, x| {
                let xt = t.transpose(x);
                let s = t.matmul(x, xt);
                let p = t.block_causal_softmax(s, 2);
                let w = t.leaf(w.clone());
                let y = t.mul(p, w);
                t.sum_all(y)
            },
            sample(),
        );
        fd_check(
            |t, x| {
                let xt = t.transpose(x);
                let s = t.matmul(x, xt);
                let l = t.log_softmax_rows(s);
                t.diag_mean(l)
            },
            sample(),
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        fd_check(
            |t, x| {
                let a = t.slice_rows(x, 1, 3);
                let b = t.slice_cols(x, 0, 2);
                let b = t.reshape(b, 2, 4);
                let c = t.concat_cols(&[a, a]);
                let c = t.slice_cols(c, 1, 5);
                let d = t.concat_rows(&[b, c]);
                let e = t.sin_free_mix(d);
                t.sum_all(e)
            },
            sample(),
        );
    }

    impl Tape {
        fn sin_free_mix(&mut self, a: Var) -> Var {
            let sq = self.square(a);
            let s = self.sum_all(a);
            self.mul_scalar(sq, s)
        }
    }

    #[test]
    fn block_causal_mask_blocks_future_and_other_blocks() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::zeros((4, 4)));
        let p = t.block_causal_softmax(x, 2);
        let v = t.value(p);
        assert_eq!(v.row(0).to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(v.row(1).to_vec(), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(v.row(3).to_vec(), vec![0.0, 0.0, 0.5, 0.5]);
    }
}
