//! Minimal reverse-mode differentiation tape over 2-D matrices.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological backward pass. Leaves created with
//! `requires_grad = false` (frozen parameters, inputs) never receive a
//! gradient, and neither does any node whose inputs are all such leaves.

use std::sync::Arc;

use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row-mixing operator: `out[i] = sum_k w_k * in[src_k]`.
#[derive(Clone, Debug)]
pub struct RowMix {
    pub in_rows: usize,
    pub entries: Vec<Vec<(u32, f64)>>,
}

/// Sentinel for gather positions that read an implicit zero (padding).
pub const GATHER_PAD: u32 = u32::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    Gather(Var, Arc<Vec<u32>>),
    RowMix(Var, Arc<RowMix>),
    ConcatCols(Var, Var),
    SelectRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    fn ng(&self, a: Var) -> bool {
        self.nodes[a.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.cols, bv.rows, "matmul shapes {:?} x {:?}", av.shape(), bv.shape());
        let mut out = Matrix::zeros(av.rows, bv.cols);
        gemm(av.rows, av.cols, bv.cols, &av.data, false, &bv.data, false, &mut out.data, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.cols, bv.cols, "matmul_bt shapes {:?} x {:?}^T", av.shape(), bv.shape());
        let mut out = Matrix::zeros(av.rows, bv.rows);
        gemm(av.rows, av.cols, bv.rows, &av.data, false, &bv.data, true, &mut out.data, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Broadcast-add a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[row.0].value;
        assert_eq!((1, av.cols), rv.shape(), "add_row shapes");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.data.iter_mut().for_each(|x| *x = x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise normalization to zero mean / unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        let cols = out.cols as f64;
        let mut inv_std = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    /// Element gather from the flattened source into an `rows x cols` output.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<u32>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let src = &self.nodes[a.0].value.data;
        let data = index
            .iter()
            .map(|&i| if i == GATHER_PAD { 0.0 } else { src[i as usize] })
            .collect();
        let ng = self.ng(a);
        self.push(Matrix::from_vec(rows, cols, data), Op::Gather(a, index), ng)
    }

    pub fn row_mix(&mut self, a: Var, mix: Arc<RowMix>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.rows, mix.in_rows, "row_mix input rows");
        let mut out = Matrix::zeros(mix.entries.len(), av.cols);
        for (i, entries) in mix.entries.iter().enumerate() {
            let orow = &mut out.data[i * av.cols..(i + 1) * av.cols];
            for &(j, w) in entries {
                for (o, x) in orow.iter_mut().zip(av.row(j as usize)) {
                    *o += w * x;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RowMix(a, mix), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.rows, bv.rows, "concat rows");
        let cols = av.cols + bv.cols;
        let mut out = Matrix::zeros(av.rows, cols);
        for r in 0..av.rows {
            out.row_mut(r)[..av.cols].copy_from_slice(av.row(r));
            out.row_mut(r)[av.cols..].copy_from_slice(bv.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let av = &self.nodes[a.0].value;
        let mut out = Matrix::zeros(rows.len(), av.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SelectRows(a, rows), ng)
    }

    /// Places row `i` of `a` at row `rows[i]` of a zero matrix with `total` rows.
    pub fn scatter_rows(&mut self, a: Var, rows: Vec<usize>, total: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.rows, rows.len(), "scatter row count");
        let mut out = Matrix::zeros(total, av.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::ScatterRows(a, rows), ng)
    }

    /// Reverse sweep seeded with upstream gradients for one or more outputs.
    pub fn backward(&self, seeds: &[(Var, &Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (v, g) in seeds {
            assert_eq!(self.nodes[v.0].value.shape(), g.shape(), "seed shape");
            accumulate(&mut grads[v.0], (*g).clone());
            start = start.max(v.0 + 1);
        }
        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    gemm(g.rows, g.cols, bv.rows, &g.data, false, &bv.data, true, &mut ga.data, 0.0);
                    accumulate(&mut grads[a.0], ga);
                }
                if self.ng(*b) {
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    gemm(av.cols, av.rows, g.cols, &av.data, true, &g.data, false, &mut gb.data, 0.0);
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    gemm(g.rows, g.cols, bv.cols, &g.data, false, &bv.data, false, &mut ga.data, 0.0);
                    accumulate(&mut grads[a.0], ga);
                }
                if self.ng(*b) {
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    gemm(g.cols, g.rows, av.cols, &g.data, true, &av.data, false, &mut gb.data, 0.0);
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(*v) {
                        accumulate(&mut grads[v.0], g.clone());
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.ng(*row) {
                    let mut gr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, x) in gr.data.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    accumulate(&mut grads[row.0], gr);
                }
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.data.iter_mut().for_each(|x| *x *= s);
                accumulate(&mut grads[a.0], ga);
            }
            Op::Relu(a) => {
                let y = &node.value;
                let mut ga = g.clone();
                for (x, yv) in ga.data.iter_mut().zip(&y.data) {
                    if *yv <= 0.0 {
                        *x = 0.0;
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let n = y.cols as f64;
                let mut ga = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Gather(a, index) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows, av.cols);
                for (gv, &i) in g.data.iter().zip(index.iter()) {
                    if i != GATHER_PAD {
                        ga.data[i as usize] += gv;
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::RowMix(a, mix) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows, av.cols);
                for (i, entries) in mix.entries.iter().enumerate() {
                    let grow = g.row(i);
                    for &(j, w) in entries {
                        for (o, x) in ga.row_mut(j as usize).iter_mut().zip(grow) {
                            *o += w * x;
                        }
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols;
                if self.ng(*a) {
                    let mut ga = Matrix::zeros(g.rows, ac);
                    for r in 0..g.rows {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ac]);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.ng(*b) {
                    let mut gb = Matrix::zeros(g.rows, g.cols - ac);
                    for r in 0..g.rows {
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ac..]);
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::SelectRows(a, rows) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows, av.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::ScatterRows(a, rows) => {
                let mut ga = Matrix::zeros(rows.len(), g.cols);
                for (i, &r) in rows.iter().enumerate() {
                    ga.row_mut(i).copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[a.0], ga);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Builds a scalar `sum(out * weights)` and checks the tape gradient of every
    /// input against central differences.
    fn check(shapes: &[(usize, usize)], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<Matrix> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
        let flat: Vec<f64> = inputs.iter().flat_map(|m| m.data.clone()).collect();
        let probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone(), true)).collect();
            let out = build(&mut g, &vars);
            random(&mut rng, g.value(out).rows, g.value(out).cols)
        };
        let f = |x: &[f64]| {
            let mut g = Graph::new();
            let mut off = 0;
            let vars: Vec<Var> = shapes
                .iter()
                .map(|&(r, c)| {
                    let m = Matrix::from_vec(r, c, x[off..off + r * c].to_vec());
                    off += r * c;
                    g.leaf(m, true)
                })
                .collect();
            let out = build(&mut g, &vars);
            let value: f64 = g.value(out).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum();
            let grads = g.backward(&[(out, &probe)]);
            let grad: Vec<f64> = vars
                .iter()
                .flat_map(|v| grads.get(*v).expect("leaf grad").data.clone())
                .collect();
            Ok((value, grad))
        };
        let err = grad_check(f, &flat, 1e-6).unwrap();
        assert!(err < 1e-6, "grad check error {err}");
    }

    #[test]
    fn matmul_grads() {
        check(&[(3, 4), (4, 2)], |g, v| g.matmul(v[0], v[1]));
        check(&[(3, 4), (5, 4)], |g, v| g.matmul_bt(v[0], v[1]));
    }

    #[test]
    fn elementwise_grads() {
        check(&[(3, 4), (3, 4)], |g, v| g.add(v[0], v[1]));
        check(&[(3, 4), (1, 4)], |g, v| g.add_row(v[0], v[1]));
        check(&[(3, 4)], |g, v| g.scale(v[0], -0.7));
        check(&[(3, 4)], |g, v| g.relu(v[0]));
    }

    #[test]
    fn normalization_grads() {
        check(&[(3, 5)], |g, v| g.softmax_rows(v[0]));
        check(&[(3, 5)], |g, v| g.layer_norm(v[0]));
    }

    #[test]
    fn structural_grads() {
        let idx = Arc::new(vec![0, 3, GATHER_PAD, 5, 5, 1]);
        check(&[(2, 3)], move |g, v| g.gather(v[0], idx.clone(), 3, 2));
        let mix = Arc::new(RowMix {
            in_rows: 2,
            entries: vec![vec![(0, 0.25), (1, 0.75)], vec![(1, 1.0)], vec![]],
        });
        check(&[(2, 3)], move |g, v| g.row_mix(v[0], mix.clone()));
        check(&[(3, 2), (3, 1)], |g, v| g.concat_cols(v[0], v[1]));
        check(&[(4, 2)], |g, v| g.select_rows(v[0], vec![2, 0, 2]));
        check(&[(2, 3)], |g, v| g.scatter_rows(v[0], vec![3, 1], 4));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::filled(2, 2, 1.0), false);
        let b = g.leaf(Matrix::filled(2, 2, 2.0), true);
        let c = g.matmul(a, b);
        let grads = g.backward(&[(c, &Matrix::filled(2, 2, 1.0))]);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }
}
