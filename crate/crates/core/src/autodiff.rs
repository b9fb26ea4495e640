//! A small matrix-valued reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. The toy classifiers
//! build one tape per forward pass and read back gradients with respect to
//! both the input embeddings and their parameters.

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// `a + bias` where `bias` is `1 × cols`, broadcast over rows.
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    SumRows(Var),
    RowSoftmax(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node, indexed by [`Var`].
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zero when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.adjoints[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        let (r, c) = self.shapes[v.0];
        self.adjoints[v.0].take().unwrap_or_else(|| Matrix::zeros(r, c))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "add_row: bias must be a row vector");
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, &y) in v.row_mut(i).iter_mut().zip(b.row(0)) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Hadamard(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_rows();
        self.push(v, Op::SumRows(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            for e in row.iter_mut() {
                *e /= total;
            }
        }
        self.push(v, Op::RowSoftmax(a))
    }

    /// Reverse sweep from `output`, seeded with `seed` (an adjoint of the same
    /// shape as `output`).
    pub fn backward(&self, output: Var, seed: Matrix) -> Gradients {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape");
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(seed);

        fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut adj[v.0] {
                Some(existing) => existing.axpy(1.0, &g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, a, g.clone());
                    accumulate(&mut adj, b, g.clone());
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut adj, bias, g.sum_rows());
                    accumulate(&mut adj, a, g.clone());
                }
                Op::AddScalar(a) => accumulate(&mut adj, a, g.clone()),
                Op::Scale(a, c) => accumulate(&mut adj, a, g.scale(c)),
                Op::Hadamard(a, b) => {
                    accumulate(&mut adj, a, g.hadamard(self.value(b)));
                    accumulate(&mut adj, b, g.hadamard(self.value(a)));
                }
                Op::MatMul(a, b) => {
                    accumulate(&mut adj, a, g.matmul(&self.value(b).transpose()));
                    accumulate(&mut adj, b, self.value(a).transpose().matmul(&g));
                }
                Op::Transpose(a) => accumulate(&mut adj, a, g.transpose()),
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                    accumulate(&mut adj, a, d);
                }
                Op::SumRows(a) => {
                    let (rows, cols) = self.value(a).shape();
                    let d = Matrix::from_fn(rows, cols, |_, j| g.get(0, j));
                    accumulate(&mut adj, a, d);
                }
                Op::RowSoftmax(a) => {
                    // dx_k = y_k (g_k - sum_l g_l y_l), row by row.
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                        for (k, out) in d.row_mut(i).iter_mut().enumerate() {
                            *out = y.get(i, k) * (g.get(i, k) - dot);
                        }
                    }
                    accumulate(&mut adj, a, d);
                }
            }
            adj[idx] = Some(g);
        }

        Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, relative_error, sample_gaussian, Rng};

    /// Builds a graph using every op and returns its scalar output.
    fn build(tape: &mut Tape, x: &Matrix, w: &Matrix, bias: &Matrix) -> (Var, Var) {
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(bias.clone());
        let xt = tape.transpose(xv);
        let scores = tape.matmul(xv, xt);
        let scores = tape.scale(scores, 0.5);
        let attn = tape.row_softmax(scores);
        let ctx = tape.matmul(attn, xv);
        let mixed = tape.hadamard(ctx, xv);
        let mixed = tape.add(mixed, xv);
        let h = tape.matmul(mixed, wv);
        let h = tape.add_row(h, bv);
        let h = tape.tanh(h);
        let h = tape.add_scalar(h, 0.3);
        let pooled = tape.sum_rows(h);
        let width = tape.value(pooled).cols();
        let ones = tape.leaf(Matrix::filled(width, 1, 1.0));
        let out = tape.matmul(pooled, ones);
        (out, xv)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = Rng::new(17);
        for _ in 0..5 {
            let x = sample_gaussian(&mut rng, 4, 3, 0.0, 1.0);
            let w = sample_gaussian(&mut rng, 3, 5, 0.0, 0.7);
            let b = sample_gaussian(&mut rng, 1, 5, 0.0, 0.3);
            let mut tape = Tape::new();
            let (out, xv) = build(&mut tape, &x, &w, &b);
            let grad = tape.backward(out, Matrix::scalar(1.0)).wrt(xv);
            let fd = finite_difference_gradient(
                |m| {
                    let mut t = Tape::new();
                    let (o, _) = build(&mut t, m, &w, &b);
                    t.value(o).as_scalar()
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(&grad, &fd) < 1e-7, "{}", relative_error(&grad, &fd));
        }
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::filled(2, 2, 1.0));
        let b = tape.leaf(Matrix::filled(1, 3, 1.0));
        let s = tape.sum_rows(a);
        let grads = tape.backward(s, Matrix::filled(1, 2, 1.0));
        assert_eq!(grads.wrt(b), Matrix::zeros(1, 3));
        assert_eq!(grads.wrt(a), Matrix::filled(2, 2, 1.0));
    }
}
