//! A small reverse-mode tape over dense row-major matrices.
//!
//! Every op records enough of its forward state to apply its exact
//! vector-Jacobian product; `backward` walks the tape once in reverse.
//! Parameter leaves borrow from [`Parameters`] so building a graph never
//! copies weights.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::params::Parameters;

pub type Mat = Array2<f64>;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Value<'p> {
    Owned(Mat),
    Param(&'p Mat),
}

enum Op {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// a + broadcast row vector
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    /// Row softmax; with `causal`, entry (i, j) for j > i gets probability 0.
    Softmax(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<u32>,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Dropout {
        x: NodeId,
        mask: Mat,
    },
    /// Row-wise inner product, shape [n, 1].
    RowDot(NodeId, NodeId),
    /// a[n, m] scaled row-wise by c[n, 1].
    MulCol(NodeId, NodeId),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p Parameters,
    nodes: Vec<Node<'p>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Parameters) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        match &self.nodes[id.0].value {
            Value::Owned(m) => m.view(),
            Value::Param(m) => m.view(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Leaf for a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> NodeId {
        let index = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        self.nodes.push(Node {
            value: Value::Param(self.params.tensor_at(index)),
            op: Op::Param(index),
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes[index] = Some(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &(&xhat * &self.value(gain)) + &self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax(&mut self, a: NodeId, causal: bool) -> NodeId {
        let mut v = self.value(a).to_owned();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let limit = if causal {
                (i + 1).min(row.len())
            } else {
                row.len()
            };
            let max = row
                .iter()
                .take(limit)
                .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                if j < limit {
                    *x = (*x - max).exp();
                    z += *x;
                } else {
                    *x = 0.0;
                }
            }
            row.mapv_inplace(|x| x / z);
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let t = self.value(table);
        let mut out = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id as usize));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let v = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let v = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn slice_rows_last(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).nrows();
        self.slice_rows(x, n - 1, 1)
    }

    /// Inverted dropout; a no-op node is avoided when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: Option<&mut R>,
    ) -> NodeId {
        let Some(rng) = rng else { return x };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let shape = self.value(x).dim();
        let mask = Mat::from_shape_fn(shape, |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let v = &self.value(x) * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let prod = &self.value(a) * &self.value(b);
        let v = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowDot(a, b))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let v = &self.value(a) * &self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    /// Propagates `seed` (the gradient of the objective with respect to
    /// `output`) and adds parameter gradients into `grads`.
    pub fn backward(&self, output: NodeId, seed: Mat, grads: &mut Parameters) {
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(seed);

        fn acc(adj: &mut [Option<Mat>], id: NodeId, g: Mat) {
            match &mut adj[id.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(index) => {
                    *grads.tensor_at_mut(*index) += &g;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.dot(&self.value(*b));
                    let db = g.t().dot(&self.value(*a));
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *row, dr);
                    acc(&mut adj, *a, g);
                }
                Op::Scale(a, f) => acc(&mut adj, *a, g.mapv(|x| x * f)),
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&self.value(NodeId(i)))
                        .for_each(|d, &y| {
                            if y <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(&mut adj, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dgain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &self.value(*gain);
                    let n = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let mean_dh = dh.sum() / n;
                        let mean_dhh = dh.dot(&h) / n;
                        let inv = inv_std[r];
                        dx.row_mut(r)
                            .iter_mut()
                            .zip(dh.iter().zip(h.iter()))
                            .for_each(|(o, (&d, &hv))| *o = inv * (d - mean_dh - hv * mean_dhh));
                    }
                    acc(&mut adj, *bias, db);
                    acc(&mut adj, *gain, dgain);
                    acc(&mut adj, *x, dx);
                }
                Op::Softmax(a) => {
                    let p = self.value(NodeId(i));
                    let mut d = &g * &p;
                    for (mut drow, prow) in d.rows_mut().into_iter().zip(p.rows()) {
                        let s = drow.sum();
                        drow.iter_mut()
                            .zip(prow.iter())
                            .for_each(|(x, &pv)| *x -= pv * s);
                    }
                    acc(&mut adj, *a, d);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut d = Mat::zeros(t.dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = d.row_mut(id as usize);
                        row += &g.row(r);
                    }
                    acc(&mut adj, *table, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(&mut adj, p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        acc(&mut adj, p, g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                    }
                }
                Op::SliceCols { x, start } => {
                    let mut d = Mat::zeros(self.value(*x).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut adj, *x, d);
                }
                Op::SliceRows { x, start } => {
                    let mut d = Mat::zeros(self.value(*x).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut adj, *x, d);
                }
                Op::Dropout { x, mask } => acc(&mut adj, *x, &g * mask),
                Op::RowDot(a, b) => {
                    let da = &self.value(*b) * &g;
                    let db = &self.value(*a) * &g;
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::MulCol(a, col) => {
                    let da = &g * &self.value(*col);
                    let dc = (&g * &self.value(*a))
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *col, dc);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn params() -> Parameters {
        let mut p = Parameters::default();
        p.insert("w", array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]]);
        p.insert("g", array![[1.1, 0.9, 1.3]]);
        p.insert("b", array![[0.05, -0.1, 0.2]]);
        p.insert("t", array![[0.2, -0.7], [0.5, 0.3], [-0.4, 0.8]]);
        p
    }

    // sum of weighted outputs of a small composite; exercises most ops
    fn objective(p: &Parameters, grads: Option<&mut Parameters>) -> f64 {
        let mut g = Graph::new(p);
        let x = g.constant(array![[0.5, -1.0], [1.5, 0.25], [-0.3, 0.8]]);
        let w = g.param("w");
        let h = g.matmul(x, w);
        let b = g.param("b");
        let h = g.add_row(h, b);
        let gain = g.param("g");
        let h = g.layer_norm(h, gain, b);
        let r = g.relu(h);
        let e = g.param("t");
        let looked = g.gather(e, &[2, 0, 2]);
        let sc = g.matmul_bt(looked, x);
        let sm = g.softmax(sc, true);
        let mixed = g.matmul(sm, r);
        let left = g.slice_cols(mixed, 0, 2);
        let right = g.slice_cols(mixed, 1, 2);
        let right = g.slice_rows(right, 0, 3);
        let dot = g.row_dot(left, right);
        let scaled = g.mul_col(r, dot);
        let both = g.concat_cols(&[scaled, mixed]);
        let stacked = g.concat_rows(&[both, both]);
        let out = g.scale(stacked, 0.7);
        let weights = Mat::from_shape_fn(g.value(out).dim(), |(i, j)| {
            ((i * 7 + j * 3) % 5) as f64 - 2.0
        });
        let value = (&g.value(out) * &weights).sum();
        if let Some(grads) = grads {
            g.backward(out, weights, grads);
        }
        value
    }

    #[test]
    fn matches_central_differences() {
        let p = params();
        let mut grads = p.zeros_like();
        objective(&p, Some(&mut grads));
        let h = 1e-6;
        for name in p.names().to_vec() {
            let shape = p.get(&name).unwrap().dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut plus = p.clone();
                    plus.get_mut(&name).unwrap()[[i, j]] += h;
                    let mut minus = p.clone();
                    minus.get_mut(&name).unwrap()[[i, j]] -= h;
                    let numeric = (objective(&plus, None) - objective(&minus, None)) / (2.0 * h);
                    let analytic = grads.get(&name).unwrap()[[i, j]];
                    assert!(
                        (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                        "{name}[{i},{j}]: numeric {numeric} analytic {analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let p = Parameters::default();
        let mut g = Graph::new(&p);
        let x = g.constant(Mat::from_elem((3, 3), 1.0));
        let s = g.softmax(x, true);
        let v = g.value(s);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[1, 2]], 0.0);
        assert!((v[[2, 0]] - 1.0 / 3.0).abs() < 1e-15);
    }
}
