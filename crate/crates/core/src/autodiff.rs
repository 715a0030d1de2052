//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation as a node. [`Tape::grad`] walks the
//! tape backwards and expresses each vector-Jacobian product with tape
//! operations, appending new nodes as it goes. The resulting gradient nodes
//! are therefore differentiable themselves: calling `grad` on `gᵀv` yields
//! the exact Hessian-vector product `Hv`.
//!
//! Only leaves created with [`Tape::leaf`] are differentiated. Everything
//! computed purely from constants is untracked and skipped on the way back.

use std::rc::Rc;

/// Marker for "no source element" in gather/scatter index maps.
pub const NO_INDEX: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRowBias(Var, Var),
    SumRows(Var),
    BroadcastRows(Var),
    RowSum(Var),
    BroadcastCols(Var),
    SumAll(Var),
    BroadcastAll(Var),
    Gather(Var, Rc<[u32]>),
    ScatterAdd(Var, Rc<[u32]>),
    Reshape(Var),
    LogSoftmax(Var),
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [n, m] => (n, m),
        _ => panic!("expected a matrix, got shape {shape:?}"),
    }
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

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.push(value, shape, Op::Leaf, true)
    }

    /// A value the tape never differentiates.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.push(value, shape, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.shape, nb.shape, "elementwise shape mismatch");
        let value = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = na.shape.clone();
        let tracked = self.tracked(&[a, b]);
        self.push(value, shape, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|x| x * c).collect();
        let shape = n.shape.clone();
        let tracked = n.tracked;
        self.push(value, shape, Op::Scale(a, c), tracked)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|x| x.exp()).collect();
        let shape = n.shape.clone();
        let tracked = n.tracked;
        self.push(value, shape, Op::Exp(a), tracked)
    }

    /// Rectified linear unit as a product with a constant 0/1 mask; the mask
    /// has zero derivative almost everywhere.
    pub fn relu(&mut self, a: Var) -> Var {
        let mask = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let m = self.constant(shape, mask);
        self.mul(a, m)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a stored matrix.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = rows_cols(&self.nodes[a.0].shape);
        let (br, bc) = rows_cols(&self.nodes[b.0].shape);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let (rsa, csa) = if ta {
            (1, ac as isize)
        } else {
            (ac as isize, 1)
        };
        let (rsb, csb) = if tb {
            (1, bc as isize)
        } else {
            (bc as isize, 1)
        };
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: strides describe the row-major buffers above, whose
            // lengths are (ar*ac), (br*bc) and (m*n).
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.nodes[a.0].value.as_ptr(),
                    rsa,
                    csa,
                    self.nodes[b.0].value.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        let tracked = self.tracked(&[a, b]);
        self.push(out, vec![m, n], Op::MatMul { a, b, ta, tb }, tracked)
    }

    /// Adds a length-`m` bias to every row of an `n×m` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, m) = rows_cols(&self.nodes[x.0].shape);
        assert_eq!(self.nodes[bias.0].value.len(), m, "bias length mismatch");
        let b = &self.nodes[bias.0].value;
        let mut value = self.nodes[x.0].value.clone();
        for row in value.chunks_exact_mut(m.max(1)).take(n) {
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.tracked(&[x, bias]);
        self.push(value, shape, Op::AddRowBias(x, bias), tracked)
    }

    /// `n×m → m`, summing over rows.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (_, m) = rows_cols(&self.nodes[x.0].shape);
        let mut value = vec![0.0; m];
        if m > 0 {
            for row in self.nodes[x.0].value.chunks_exact(m) {
                for (acc, v) in value.iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let tracked = self.nodes[x.0].tracked;
        self.push(value, vec![m], Op::SumRows(x), tracked)
    }

    /// `m → n×m`, repeating the vector as every row.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let src = &self.nodes[x.0].value;
        let m = src.len();
        let mut value = Vec::with_capacity(n * m);
        for _ in 0..n {
            value.extend_from_slice(src);
        }
        let tracked = self.nodes[x.0].tracked;
        self.push(value, vec![n, m], Op::BroadcastRows(x), tracked)
    }

    /// `n×m → n`, summing within each row.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (n, m) = rows_cols(&self.nodes[x.0].shape);
        let value = if m == 0 {
            vec![0.0; n]
        } else {
            self.nodes[x.0]
                .value
                .chunks_exact(m)
                .map(|r| r.iter().sum())
                .collect()
        };
        let tracked = self.nodes[x.0].tracked;
        self.push(value, vec![n], Op::RowSum(x), tracked)
    }

    /// `n → n×m`, repeating each entry across its row.
    pub fn broadcast_cols(&mut self, x: Var, m: usize) -> Var {
        let src = &self.nodes[x.0].value;
        let n = src.len();
        let mut value = Vec::with_capacity(n * m);
        for &v in src {
            value.extend(std::iter::repeat_n(v, m));
        }
        let tracked = self.nodes[x.0].tracked;
        self.push(value, vec![n, m], Op::BroadcastCols(x), tracked)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let tracked = self.nodes[x.0].tracked;
        self.push(vec![s], vec![1], Op::SumAll(x), tracked)
    }

    /// Scalar → any shape.
    pub fn broadcast_all(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            self.nodes[x.0].value.len(),
            1,
            "broadcast_all needs a scalar"
        );
        let n = shape.iter().product();
        let value = vec![self.nodes[x.0].value[0]; n];
        let tracked = self.nodes[x.0].tracked;
        self.push(value, shape, Op::BroadcastAll(x), tracked)
    }

    /// `out[i] = x[idx[i]]`, or zero where `idx[i] == NO_INDEX`.
    pub fn gather(&mut self, x: Var, idx: Rc<[u32]>, shape: Vec<usize>) -> Var {
        assert_eq!(idx.len(), shape.iter().product::<usize>());
        let src = &self.nodes[x.0].value;
        let value = idx
            .iter()
            .map(|&i| if i == NO_INDEX { 0.0 } else { src[i as usize] })
            .collect();
        let tracked = self.nodes[x.0].tracked;
        self.push(value, shape, Op::Gather(x, idx), tracked)
    }

    /// Adjoint of [`Tape::gather`]: `out[idx[i]] += x[i]`.
    pub fn scatter_add(&mut self, x: Var, idx: Rc<[u32]>, shape: Vec<usize>) -> Var {
        let src = &self.nodes[x.0].value;
        assert_eq!(idx.len(), src.len());
        let mut value = vec![0.0; shape.iter().product()];
        for (&i, &v) in idx.iter().zip(src) {
            if i != NO_INDEX {
                value[i as usize] += v;
            }
        }
        let tracked = self.nodes[x.0].tracked;
        self.push(value, shape, Op::ScatterAdd(x, idx), tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let n = &self.nodes[x.0];
        assert_eq!(n.value.len(), shape.iter().product::<usize>());
        let value = n.value.clone();
        let tracked = n.tracked;
        self.push(value, shape, Op::Reshape(x), tracked)
    }

    /// Row-wise log-softmax of an `n×m` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (_, m) = rows_cols(&self.nodes[x.0].shape);
        let mut value = self.nodes[x.0].value.clone();
        if m > 0 {
            for row in value.chunks_exact_mut(m) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.nodes[x.0].tracked;
        self.push(value, shape, Op::LogSoftmax(x), tracked)
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, g: Var) {
        if !self.nodes[target.0].tracked {
            return;
        }
        adj[target.0] = Some(match adj[target.0] {
            None => g,
            Some(prev) => self.add(prev, g),
        });
    }

    /// Gradient of `output` (seeded with ones) with respect to each of
    /// `wrt`. The returned nodes live on this tape and can be differentiated
    /// again. Leaves that `output` does not depend on get zero gradients.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        let end = output.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; end];
        if self.nodes[output.0].tracked {
            let shape = self.nodes[output.0].shape.clone();
            let n = self.nodes[output.0].value.len();
            adj[output.0] = Some(self.constant(shape, vec![1.0; n]));
        }

        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let this = Var(i);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    self.accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    if self.is_tracked(b) {
                        let ng = self.scale(g, -1.0);
                        self.accumulate(&mut adj, b, ng);
                    }
                }
                Op::Mul(a, b) => {
                    if self.is_tracked(a) {
                        let ga = self.mul(g, b);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if self.is_tracked(b) {
                        let gb = self.mul(g, a);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, this);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::MatMul { a, b, ta, tb } => {
                    if self.is_tracked(a) {
                        let ga = match (ta, tb) {
                            (false, false) => self.matmul(g, b, false, true),
                            (false, true) => self.matmul(g, b, false, false),
                            (true, false) => self.matmul(b, g, false, true),
                            (true, true) => self.matmul(b, g, true, true),
                        };
                        self.accumulate(&mut adj, a, ga);
                    }
                    if self.is_tracked(b) {
                        let gb = match (ta, tb) {
                            (false, false) => self.matmul(a, g, true, false),
                            (false, true) => self.matmul(g, a, true, false),
                            (true, false) => self.matmul(a, g, false, false),
                            (true, true) => self.matmul(g, a, true, true),
                        };
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::AddRowBias(x, bias) => {
                    self.accumulate(&mut adj, x, g);
                    if self.is_tracked(bias) {
                        let gb = self.sum_rows(g);
                        self.accumulate(&mut adj, bias, gb);
                    }
                }
                Op::SumRows(x) => {
                    let n = self.nodes[x.0].shape[0];
                    let gx = self.broadcast_rows(g, n);
                    self.accumulate(&mut adj, x, gx);
                }
                Op::BroadcastRows(x) => {
                    let gx = self.sum_rows(g);
                    self.accumulate(&mut adj, x, gx);
                }
                Op::RowSum(x) => {
                    let m = self.nodes[x.0].shape[1];
                    let gx = self.broadcast_cols(g, m);
                    self.accumulate(&mut adj, x, gx);
                }
                Op::BroadcastCols(x) => {
                    let gx = self.row_sum(g);
                    self.accumulate(&mut adj, x, gx);
                }
                Op::SumAll(x) => {
                    let shape = self.nodes[x.0].shape.clone();
                    let gx = self.broadcast_all(g, shape);
                    self.accumulate(&mut adj, x, gx);
                }
                Op::BroadcastAll(x) => {
                    let s = self.sum_all(g);
                    let shape = self.nodes[x.0].shape.clone();
                    let gx = self.reshape(s, shape);
                    self.accumulate(&mut adj, x, gx);
                }
                Op::Gather(x, idx) => {
                    let shape = self.nodes[x.0].shape.clone();
                    let gx = self.scatter_add(g, idx, shape);
                    self.accumulate(&mut adj, x, gx);
                }
                Op::ScatterAdd(x, idx) => {
                    let shape = self.nodes[x.0].shape.clone();
                    let gx = self.gather(g, idx, shape);
                    self.accumulate(&mut adj, x, gx);
                }
                Op::Reshape(x) => {
                    let shape = self.nodes[x.0].shape.clone();
                    let gx = self.reshape(g, shape);
                    self.accumulate(&mut adj, x, gx);
                }
                Op::LogSoftmax(x) => {
                    // g - softmax(x) * rowsum(g)
                    let m = self.nodes[x.0].shape[1];
                    let p = self.exp(this);
                    let s = self.row_sum(g);
                    let sb = self.broadcast_cols(s, m);
                    let ps = self.mul(p, sb);
                    let gx = self.sub(g, ps);
                    self.accumulate(&mut adj, x, gx);
                }
            }
        }

        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.nodes[w.0].shape.clone();
                    let n = self.nodes[w.0].value.len();
                    self.constant(shape, vec![0.0; n])
                }
            })
            .collect()
    }
}
