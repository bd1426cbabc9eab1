use super::tensor::{Scalar, TensorData};

pub type VarId = usize;

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, S),
    AddRow(VarId, VarId), // [m,n] + [n], broadcast over rows
    MatMul(VarId, VarId),
    Transpose(VarId),
    Gelu(VarId),
    Abs(VarId),
    SoftmaxRows(VarId),
    LayerNormRows {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: S,
    },
    Sum(VarId),
    Mean(VarId),
    ConcatCols(Vec<VarId>),
    SliceCols {
        x: VarId,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: VarId,
        indices: Vec<usize>,
    },
    ScatterRows {
        rows: VarId,
        indices: Vec<usize>,
    },
    RepeatRow {
        row: VarId,
        count: usize,
    },
}

struct Node<S> {
    op: Op<S>,
    value: TensorData<S>,
    needs_grad: bool,
}

/// Dynamically recorded computation graph with reverse-mode differentiation.
/// Values are computed eagerly; `backward` replays the tape in reverse.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<S>, value: TensorData<S>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, t: TensorData<S>) -> VarId {
        self.push(Op::Leaf, t, false)
    }

    /// Learnable leaf; `backward` produces a gradient for it.
    pub fn param(&mut self, t: TensorData<S>) -> VarId {
        self.push(Op::Leaf, t, true)
    }

    pub fn value(&self, id: VarId) -> &TensorData<S> {
        &self.nodes[id].value
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = TensorData::from_raw(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), out, ng)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = TensorData::from_raw(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), out, ng)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = TensorData::from_raw(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), out, ng)
    }

    pub fn scale(&mut self, a: VarId, c: S) -> VarId {
        let ta = &self.nodes[a].value;
        let data = ta.data().iter().map(|&x| x * c).collect();
        let out = TensorData::from_raw(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), out, ng)
    }

    /// x: [m,n] plus a length-n row vector broadcast over every row.
    pub fn add_row(&mut self, x: VarId, row: VarId) -> VarId {
        let (tx, tr) = (&self.nodes[x].value, &self.nodes[row].value);
        let (m, n) = (tx.rows(), tx.cols());
        assert_eq!(tr.shape(), [n], "add_row width mismatch");
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(tx.data()[i * n + j] + tr.data()[j]);
            }
        }
        let out = TensorData::from_raw(tx.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(row);
        self.push(Op::AddRow(x, row), out, ng)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        assert_eq!(k, kb, "matmul inner dim mismatch");
        let mut c = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            ta.data(),
            k as isize,
            1,
            tb.data(),
            n as isize,
            1,
            S::zero(),
            &mut c,
            n as isize,
            1,
        );
        let out = TensorData::from_raw(vec![m, n], c);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), out, ng)
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        let out = TensorData::from_raw(vec![n, m], data);
        let ng = self.needs(a);
        self.push(Op::Transpose(a), out, ng)
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let c0 = S::from_f64(GELU_C0);
        let c1 = S::from_f64(GELU_C1);
        let half = S::from_f64(0.5);
        let data = ta
            .data()
            .iter()
            .map(|&x| {
                let u = c0 * (x + c1 * x * x * x);
                half * x * (S::one() + u.tanh())
            })
            .collect();
        let out = TensorData::from_raw(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(Op::Gelu(a), out, ng)
    }

    /// |x|; subgradient at 0 is 0.
    pub fn abs(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let data = ta.data().iter().map(|&x| x.abs()).collect();
        let out = TensorData::from_raw(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(Op::Abs(a), out, ng)
    }

    /// Row-wise, max-subtracted softmax.
    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut s = S::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                s = s + e;
            }
            for j in 0..n {
                data[i * n + j] = data[i * n + j] / s;
            }
        }
        let out = TensorData::from_raw(ta.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), out, ng)
    }

    /// Per-row (per-token) layer normalization with learnable scale/shift.
    pub fn layer_norm_rows(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let tx = &self.nodes[x].value;
        let (m, n) = (tx.rows(), tx.cols());
        assert_eq!(self.nodes[gamma].value.shape(), [n], "layer_norm gamma");
        assert_eq!(self.nodes[beta].value.shape(), [n], "layer_norm beta");
        let eps_s = S::from_f64(eps);
        let nf = S::from_f64(n as f64);
        let g = self.nodes[gamma].value.data().to_vec();
        let b = self.nodes[beta].value.data().to_vec();
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let mu = row.iter().cloned().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / nf;
            let inv = S::one() / (var + eps_s).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mu) * inv;
                data[i * n + j] = xhat * g[j] + b[j];
            }
        }
        let out = TensorData::from_raw(tx.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                eps: eps_s,
            },
            out,
            ng,
        )
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let s: S = ta.data().iter().cloned().sum();
        let ng = self.needs(a);
        self.push(Op::Sum(a), TensorData::scalar(s), ng)
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let ta = &self.nodes[a].value;
        let s: S = ta.data().iter().cloned().sum();
        let v = s / S::from_f64(ta.numel() as f64);
        let ng = self.needs(a);
        self.push(Op::Mean(a), TensorData::scalar(v), ng)
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat of nothing");
        let m = self.nodes[parts[0]].value.rows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let t = &self.nodes[p].value;
                assert_eq!(t.rows(), m, "concat row mismatch");
                let n = t.cols();
                data.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
        }
        let out = TensorData::from_raw(vec![m, total], data);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, ng)
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let tx = &self.nodes[x].value;
        let (m, n) = (tx.rows(), tx.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&tx.data()[i * n + start..i * n + start + len]);
        }
        let out = TensorData::from_raw(vec![m, len], data);
        let ng = self.needs(x);
        self.push(Op::SliceCols { x, start, len }, out, ng)
    }

    pub fn gather_rows(&mut self, x: VarId, indices: &[usize]) -> VarId {
        let tx = &self.nodes[x].value;
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            assert!(i < m, "gather_rows index out of range");
            data.extend_from_slice(&tx.data()[i * n..(i + 1) * n]);
        }
        let out = TensorData::from_raw(vec![indices.len(), n], data);
        let ng = self.needs(x);
        self.push(
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            out,
            ng,
        )
    }

    /// Place row j of `rows` at `indices[j]` in a zero [out_rows, n] tensor.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, rows: VarId, out_rows: usize, indices: &[usize]) -> VarId {
        let tr = &self.nodes[rows].value;
        let (k, n) = (tr.rows(), tr.cols());
        assert_eq!(k, indices.len(), "scatter_rows count mismatch");
        let mut data = vec![S::zero(); out_rows * n];
        for (j, &i) in indices.iter().enumerate() {
            assert!(i < out_rows, "scatter_rows index out of range");
            data[i * n..(i + 1) * n].copy_from_slice(&tr.data()[j * n..(j + 1) * n]);
        }
        let out = TensorData::from_raw(vec![out_rows, n], data);
        let ng = self.needs(rows);
        self.push(
            Op::ScatterRows {
                rows,
                indices: indices.to_vec(),
            },
            out,
            ng,
        )
    }

    /// Tile a length-n vector into [count, n].
    pub fn repeat_row(&mut self, row: VarId, count: usize) -> VarId {
        let tr = &self.nodes[row].value;
        assert_eq!(tr.shape().len(), 1, "repeat_row expects a vector");
        let n = tr.cols();
        let mut data = Vec::with_capacity(count * n);
        for _ in 0..count {
            data.extend_from_slice(tr.data());
        }
        let out = TensorData::from_raw(vec![count, n], data);
        let ng = self.needs(row);
        self.push(Op::RepeatRow { row, count }, out, ng)
    }

    /// Reverse-mode pass from a scalar node. Returns one gradient slot per
    /// node; only nodes with `needs_grad` reachable from `loss` are filled.
    pub fn backward(&self, loss: VarId) -> Vec<Option<TensorData<S>>> {
        assert_eq!(self.nodes[loss].value.numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<TensorData<S>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(TensorData::scalar(S::one()));
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let gout = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        grads
    }

    fn acc(&self, grads: &mut [Option<TensorData<S>>], id: VarId, delta: &TensorData<S>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv = *gv + *dv;
                }
            }
            None => grads[id] = Some(delta.clone()),
        }
    }

    fn backprop_node(&self, id: VarId, gout: &TensorData<S>, grads: &mut [Option<TensorData<S>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gout);
                self.acc(grads, *b, gout);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gout);
                if self.needs(*b) {
                    let neg = TensorData::from_raw(
                        gout.shape().to_vec(),
                        gout.data().iter().map(|&v| -v).collect(),
                    );
                    self.acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let tb = &self.nodes[*b].value;
                    let d = TensorData::from_raw(
                        gout.shape().to_vec(),
                        gout.data()
                            .iter()
                            .zip(tb.data())
                            .map(|(&g, &y)| g * y)
                            .collect(),
                    );
                    self.acc(grads, *a, &d);
                }
                if self.needs(*b) {
                    let ta = &self.nodes[*a].value;
                    let d = TensorData::from_raw(
                        gout.shape().to_vec(),
                        gout.data()
                            .iter()
                            .zip(ta.data())
                            .map(|(&g, &x)| g * x)
                            .collect(),
                    );
                    self.acc(grads, *b, &d);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let d = TensorData::from_raw(
                        gout.shape().to_vec(),
                        gout.data().iter().map(|&g| g * *c).collect(),
                    );
                    self.acc(grads, *a, &d);
                }
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, gout);
                if self.needs(*row) {
                    let n = self.nodes[*row].value.cols();
                    let m = gout.numel() / n;
                    let mut d = vec![S::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] = d[j] + gout.data()[i * n + j];
                        }
                    }
                    let d = TensorData::from_raw(vec![n], d);
                    self.acc(grads, *row, &d);
                }
            }
            Op::MatMul(a, b) => {
                let ta = &self.nodes[*a].value;
                let tb = &self.nodes[*b].value;
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if self.needs(*a) {
                    // dA = dC * B^T
                    let mut d = vec![S::zero(); m * k];
                    S::gemm(
                        m,
                        n,
                        k,
                        S::one(),
                        gout.data(),
                        n as isize,
                        1,
                        tb.data(),
                        1,
                        n as isize,
                        S::zero(),
                        &mut d,
                        k as isize,
                        1,
                    );
                    let d = TensorData::from_raw(vec![m, k], d);
                    self.acc(grads, *a, &d);
                }
                if self.needs(*b) {
                    // dB = A^T * dC
                    let mut d = vec![S::zero(); k * n];
                    S::gemm(
                        k,
                        m,
                        n,
                        S::one(),
                        ta.data(),
                        1,
                        k as isize,
                        gout.data(),
                        n as isize,
                        1,
                        S::zero(),
                        &mut d,
                        n as isize,
                        1,
                    );
                    let d = TensorData::from_raw(vec![k, n], d);
                    self.acc(grads, *b, &d);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (n, m) = (gout.rows(), gout.cols());
                    let mut d = vec![S::zero(); m * n];
                    for i in 0..n {
                        for j in 0..m {
                            d[j * n + i] = gout.data()[i * m + j];
                        }
                    }
                    let d = TensorData::from_raw(vec![m, n], d);
                    self.acc(grads, *a, &d);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let ta = &self.nodes[*a].value;
                    let c0 = S::from_f64(GELU_C0);
                    let c1 = S::from_f64(GELU_C1);
                    let half = S::from_f64(0.5);
                    let three = S::from_f64(3.0);
                    let d: Vec<S> = ta
                        .data()
                        .iter()
                        .zip(gout.data())
                        .map(|(&x, &g)| {
                            let u = c0 * (x + c1 * x * x * x);
                            let t = u.tanh();
                            let du = c0 * (S::one() + three * c1 * x * x);
                            let dy = half * (S::one() + t)
                                + half * x * (S::one() - t * t) * du;
                            g * dy
                        })
                        .collect();
                    let d = TensorData::from_raw(ta.shape().to_vec(), d);
                    self.acc(grads, *a, &d);
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let ta = &self.nodes[*a].value;
                    let d: Vec<S> = ta
                        .data()
                        .iter()
                        .zip(gout.data())
                        .map(|(&x, &g)| {
                            if x > S::zero() {
                                g
                            } else if x < S::zero() {
                                -g
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    let d = TensorData::from_raw(ta.shape().to_vec(), d);
                    self.acc(grads, *a, &d);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[id].value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut d = vec![S::zero(); m * n];
                    for i in 0..m {
                        let yr = &y.data()[i * n..(i + 1) * n];
                        let gr = &gout.data()[i * n..(i + 1) * n];
                        let dot: S = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            d[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    let d = TensorData::from_raw(y.shape().to_vec(), d);
                    self.acc(grads, *a, &d);
                }
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                eps,
            } => {
                let tx = &self.nodes[*x].value;
                let (m, n) = (tx.rows(), tx.cols());
                let nf = S::from_f64(n as f64);
                let g = self.nodes[*gamma].value.data();
                let mut dx = vec![S::zero(); m * n];
                let mut dg = vec![S::zero(); n];
                let mut db = vec![S::zero(); n];
                for i in 0..m {
                    let row = &tx.data()[i * n..(i + 1) * n];
                    let gr = &gout.data()[i * n..(i + 1) * n];
                    let mu = row.iter().cloned().sum::<S>() / nf;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / nf;
                    let inv = S::one() / (var + *eps).sqrt();
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for j in 0..n {
                        let xhat = (row[j] - mu) * inv;
                        let dxhat = gr[j] * g[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dg[j] = dg[j] + gr[j] * xhat;
                        db[j] = db[j] + gr[j];
                    }
                    for j in 0..n {
                        let xhat = (row[j] - mu) * inv;
                        let dxhat = gr[j] * g[j];
                        dx[i * n + j] =
                            inv / nf * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                if self.needs(*x) {
                    let d = TensorData::from_raw(tx.shape().to_vec(), dx);
                    self.acc(grads, *x, &d);
                }
                if self.needs(*gamma) {
                    let d = TensorData::from_raw(vec![n], dg);
                    self.acc(grads, *gamma, &d);
                }
                if self.needs(*beta) {
                    let d = TensorData::from_raw(vec![n], db);
                    self.acc(grads, *beta, &d);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let ta = &self.nodes[*a].value;
                    let g = gout.data()[0];
                    let d = TensorData::full(ta.shape().to_vec(), g);
                    self.acc(grads, *a, &d);
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let ta = &self.nodes[*a].value;
                    let g = gout.data()[0] / S::from_f64(ta.numel() as f64);
                    let d = TensorData::full(ta.shape().to_vec(), g);
                    self.acc(grads, *a, &d);
                }
            }
            Op::ConcatCols(parts) => {
                let m = gout.rows();
                let total = gout.cols();
                let mut start = 0usize;
                for &p in parts {
                    let n = self.nodes[p].value.cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(m * n);
                        for i in 0..m {
                            d.extend_from_slice(
                                &gout.data()[i * total + start..i * total + start + n],
                            );
                        }
                        let d = TensorData::from_raw(vec![m, n], d);
                        self.acc(grads, p, &d);
                    }
                    start += n;
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let tx = &self.nodes[*x].value;
                    let (m, n) = (tx.rows(), tx.cols());
                    let mut d = vec![S::zero(); m * n];
                    for i in 0..m {
                        for j in 0..*len {
                            d[i * n + start + j] = gout.data()[i * len + j];
                        }
                    }
                    let d = TensorData::from_raw(vec![m, n], d);
                    self.acc(grads, *x, &d);
                }
            }
            Op::GatherRows { x, indices } => {
                if self.needs(*x) {
                    let tx = &self.nodes[*x].value;
                    let (m, n) = (tx.rows(), tx.cols());
                    let mut d = vec![S::zero(); m * n];
                    for (j, &i) in indices.iter().enumerate() {
                        for c in 0..n {
                            d[i * n + c] = d[i * n + c] + gout.data()[j * n + c];
                        }
                    }
                    let d = TensorData::from_raw(vec![m, n], d);
                    self.acc(grads, *x, &d);
                }
            }
            Op::ScatterRows { rows, indices } => {
                if self.needs(*rows) {
                    let n = gout.cols();
                    let mut d = Vec::with_capacity(indices.len() * n);
                    for &i in indices {
                        d.extend_from_slice(&gout.data()[i * n..(i + 1) * n]);
                    }
                    let d = TensorData::from_raw(vec![indices.len(), n], d);
                    self.acc(grads, *rows, &d);
                }
            }
            Op::RepeatRow { row, count } => {
                if self.needs(*row) {
                    let n = self.nodes[*row].value.cols();
                    let mut d = vec![S::zero(); n];
                    for i in 0..*count {
                        for j in 0..n {
                            d[j] = d[j] + gout.data()[i * n + j];
                        }
                    }
                    let d = TensorData::from_raw(vec![n], d);
                    self.acc(grads, *row, &d);
                }
            }
        }
    }
}
