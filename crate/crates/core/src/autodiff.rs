//! Tape-based reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array; scalars are `1 × 1`. A [`Graph`] is
//! built fresh for every forward pass. Nodes are appended in evaluation order,
//! so the tape is already topologically sorted and [`Graph::backward`] is a
//! single reverse sweep.
//!
//! Leaves created with [`Graph::param`] receive gradients; leaves created with
//! [`Graph::constant`] do not, and neither does anything computed purely from
//! constants. An inference pass that only uses constants therefore records
//! values but never allocates gradient buffers.

use std::rc::Rc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Rc<Vec<f64>>),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    PermuteRows(Var, Rc<Vec<usize>>),
    SumAll(Var),
    MeanAll(Var),
    RowSqDist(Var, Var),
    RowCosine(Var, Var, f64),
    FlatCosine(Var, Var, f64),
    BceLogits(Var, Rc<Array2<f64>>),
    GaussianKl(Var, Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
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

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMulT(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let out = self.value(a) - self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let out = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Mul(a, b), t)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row: bias must be 1 x {n}");
        let out = self.value(a) + self.value(row);
        let t = self.tracked(a) || self.tracked(row);
        self.push(out, Op::AddRow(a, row), t)
    }

    /// Multiplies row `i` of `a` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Rc<Vec<f64>>) -> Var {
        let (rows, _) = self.shape(a);
        assert_eq!(factors.len(), rows, "scale_rows: factor count mismatch");
        let mut out = self.value(a).clone();
        for (mut row, &f) in out.rows_mut().into_iter().zip(factors.iter()) {
            row *= f;
        }
        let t = self.tracked(a);
        self.push(out, Op::ScaleRows(a, factors), t)
    }

    /// Multiplies `a` by a `1 × 1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let out = self.value(a) * k;
        let t = self.tracked(a) || self.tracked(s);
        self.push(out, Op::ScaleBy(a, s), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let t = self.tracked(a);
        self.push(out, Op::Scale(a, c), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let t = self.tracked(a);
        self.push(out, Op::Relu(a), t)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let t = self.tracked(a);
        self.push(out, Op::Gelu(a), t)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        let t = self.tracked(a);
        self.push(out, Op::Softplus(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        let t = self.tracked(a);
        self.push(out, Op::SoftmaxRows(a), t)
    }

    /// Row-wise layer normalization with population variance, followed by a
    /// per-column affine map. `gamma` and `beta` are `1 × n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (rows, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let xv = self.value(x);
        let mut xhat = Array2::zeros((rows, n));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (c, &v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * inv;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let t = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            t,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + width]).to_owned();
        let t = self.tracked(a);
        self.push(out, Op::SliceCols(a, start), t)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, height: usize) -> Var {
        let out = self.value(a).slice(s![start..start + height, ..]).to_owned();
        let t = self.tracked(a);
        self.push(out, Op::SliceRows(a, start), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), t)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let out = Array2::from_shape_vec(shape, flat).expect("reshape: element count mismatch");
        let t = self.tracked(a);
        self.push(out, Op::Reshape(a), t)
    }

    /// `out[i] = a[perm[i]]`; `perm` must be a permutation of the row indices.
    pub fn permute_rows(&mut self, a: Var, perm: Rc<Vec<usize>>) -> Var {
        let src = self.value(a);
        assert_eq!(perm.len(), src.nrows(), "permute_rows: length mismatch");
        let mut out = Array2::zeros(src.dim());
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).assign(&src.row(p));
        }
        let t = self.tracked(a);
        self.push(out, Op::PermuteRows(a, perm), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = scalar(self.value(a).sum());
        let t = self.tracked(a);
        self.push(out, Op::SumAll(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = scalar(v.sum() / v.len() as f64);
        let t = self.tracked(a);
        self.push(out, Op::MeanAll(a), t)
    }

    /// Per-row squared Euclidean distance, `n × 1`.
    pub fn row_sq_dist(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "row_sq_dist: shape mismatch");
        let diff = self.value(a) - self.value(b);
        let out = diff
            .map_axis(Axis(1), |r| r.iter().map(|d| d * d).sum::<f64>())
            .insert_axis(Axis(1));
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::RowSqDist(a, b), t)
    }

    /// Per-row cosine similarity, `n × 1`. Norms are clamped below at `eps`.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: f64) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "row_cosine: shape mismatch");
        let (av, bv) = (self.value(a), self.value(b));
        let rows = av.nrows();
        let mut out = Array2::zeros((rows, 1));
        for r in 0..rows {
            out[[r, 0]] = cosine(av.row(r).iter(), bv.row(r).iter(), eps).0;
        }
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::RowCosine(a, b, eps), t)
    }

    /// Cosine similarity of the flattened matrices, `1 × 1`.
    pub fn flat_cosine(&mut self, a: Var, b: Var, eps: f64) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "flat_cosine: shape mismatch");
        let c = cosine(self.value(a).iter(), self.value(b).iter(), eps).0;
        let t = self.tracked(a) || self.tracked(b);
        self.push(scalar(c), Op::FlatCosine(a, b, eps), t)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and constant labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Rc<Array2<f64>>) -> Var {
        assert_eq!(self.shape(logits), labels.dim(), "bce: shape mismatch");
        let z = self.value(logits);
        let n = z.len() as f64;
        let total: f64 = z
            .iter()
            .zip(labels.iter())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let t = self.tracked(logits);
        self.push(scalar(total / n), Op::BceLogits(logits, labels), t)
    }

    /// Mean over elements of `KL(N(mu, sigma²) ‖ N(0, 1))`.
    pub fn gaussian_kl(&mut self, mu: Var, sigma: Var) -> Var {
        assert_eq!(self.shape(mu), self.shape(sigma), "kl: shape mismatch");
        let (m, s) = (self.value(mu), self.value(sigma));
        let n = m.len() as f64;
        let total: f64 = m
            .iter()
            .zip(s.iter())
            .map(|(&u, &sd)| -0.5 * (1.0 + (sd * sd).ln() - u * u - sd * sd))
            .sum();
        let t = self.tracked(mu) || self.tracked(sigma);
        self.push(scalar(total / n), Op::GaussianKl(mu, sigma), t)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.shape(output), (1, 1), "backward: output must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::ScaleRows(a, factors) => {
                let mut ga = g.clone();
                for (mut row, &f) in ga.rows_mut().into_iter().zip(factors.iter()) {
                    row *= f;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ScaleBy(a, s) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g * self.scalar(*s));
                }
                if self.tracked(*s) {
                    let gs: f64 = Zip::from(g)
                        .and(self.value(*a))
                        .fold(0.0, |acc, &gv, &av| acc + gv * av);
                    self.accumulate(grads, *s, scalar(gs));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gv, &x| *gv *= gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gv, &x| *gv *= sigmoid(x));
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = g * y;
                for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let dot = grow.sum();
                    Zip::from(&mut grow).and(&yrow).for_each(|gv, &yv| *gv -= yv * dot);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.tracked(*gamma) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, gg);
                }
                if self.tracked(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.tracked(*x) {
                    let gxhat = g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let gr = gxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_g = gr.sum();
                        let sum_gx: f64 = gr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum();
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = inv_std[r] / n * (n * gr[c] - sum_g - xr[c] * sum_gx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.tracked(p) {
                        self.accumulate(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.tracked(p) {
                        self.accumulate(grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                    }
                    offset += h;
                }
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = g.iter().copied().collect();
                let ga = Array2::from_shape_vec(self.shape(*a), flat).expect("reshape grad");
                self.accumulate(grads, *a, ga);
            }
            Op::PermuteRows(a, perm) => {
                let mut ga = Array2::zeros(self.shape(*a));
                for (i, &p) in perm.iter().enumerate() {
                    let mut dst = ga.row_mut(p);
                    dst += &g.row(i);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::MeanAll(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1) as f64;
                self.accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]] / n));
            }
            Op::RowSqDist(a, b) => {
                let diff = self.value(*a) - self.value(*b);
                let mut ga = diff * 2.0;
                for (mut row, &gv) in ga.rows_mut().into_iter().zip(g.iter()) {
                    row *= gv;
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, -&ga);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowCosine(a, b, eps) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Array2::zeros(av.dim());
                let mut gb = Array2::zeros(bv.dim());
                for r in 0..av.nrows() {
                    let (ra, rb) = (av.row(r), bv.row(r));
                    let (gra, grb) = cosine_grad(&ra, &rb, *eps, g[[r, 0]]);
                    ga.row_mut(r).assign(&gra);
                    gb.row_mut(r).assign(&grb);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::FlatCosine(a, b, eps) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let shape = av.dim();
                let fa = av.view().into_shape_with_order(av.len()).expect("contiguous");
                let fb = bv.view().into_shape_with_order(bv.len()).expect("contiguous");
                let (ga, gb) = cosine_grad(&fa, &fb, *eps, g[[0, 0]]);
                self.accumulate(grads, *a, ga.into_shape_with_order(shape).expect("shape"));
                self.accumulate(grads, *b, gb.into_shape_with_order(shape).expect("shape"));
            }
            Op::BceLogits(logits, labels) => {
                let z = self.value(*logits);
                let n = z.len() as f64;
                let gv = g[[0, 0]];
                let mut gz = Array2::zeros(z.dim());
                Zip::from(&mut gz)
                    .and(z)
                    .and(labels.as_ref())
                    .for_each(|o, &zv, &y| *o = gv * (sigmoid(zv) - y) / n);
                self.accumulate(grads, *logits, gz);
            }
            Op::GaussianKl(mu, sigma) => {
                let n = self.value(*mu).len() as f64;
                let gv = g[[0, 0]];
                if self.tracked(*mu) {
                    self.accumulate(grads, *mu, self.value(*mu) * (gv / n));
                }
                if self.tracked(*sigma) {
                    let gs = self.value(*sigma).mapv(|s| gv * (s - 1.0 / s) / n);
                    self.accumulate(grads, *sigma, gs);
                }
            }
        }
    }
}

/// Returns `(cos, |a| clamped, |b| clamped)`.
fn cosine<'a>(
    a: impl Iterator<Item = &'a f64> + Clone,
    b: impl Iterator<Item = &'a f64> + Clone,
    eps: f64,
) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let na = na.sqrt().max(eps);
    let nb = nb.sqrt().max(eps);
    (dot / (na * nb), na, nb)
}

fn cosine_grad(
    a: &ndarray::ArrayView1<f64>,
    b: &ndarray::ArrayView1<f64>,
    eps: f64,
    g: f64,
) -> (ndarray::Array1<f64>, ndarray::Array1<f64>) {
    let (c, na, nb) = cosine(a.iter(), b.iter(), eps);
    let raw_na = a.dot(a).sqrt();
    let raw_nb = b.dot(b).sqrt();
    let mut ga = b.mapv(|v| g * v / (na * nb));
    let mut gb = a.mapv(|v| g * v / (na * nb));
    // A clamped norm is constant, so it contributes no gradient.
    if raw_na > eps {
        ga.zip_mut_with(a, |o, &v| *o -= g * c * v / (na * na));
    }
    if raw_nb > eps {
        gb.zip_mut_with(b, |o, &v| *o -= g * c * v / (nb * nb));
    }
    (ga, gb)
}
