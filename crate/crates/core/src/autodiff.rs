//! A small reverse-mode tape over dense matrices. Values are computed
//! eagerly as nodes are pushed; [`Tape::backward`] walks the nodes in
//! reverse and returns gradients for every node that depends on a leaf.

use crate::linalg::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Elu(Var),
    EluDeriv(Var),
    Transpose(Var),
    Reshape(Var),
    Dot(Var, Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    tracked: bool,
}

pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_deriv(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub fn elu_second_deriv(x: f64) -> f64 {
    if x >= 0.0 {
        0.0
    } else {
        x.exp()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes the loss does not reach.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Matrix>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` if the loss ignores it.
    pub fn take_or_zeros(&mut self, v: Var, like: &Matrix) -> Matrix {
        self.0[v.0]
            .take()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    fn push(&mut self, op: Op, value: Matrix, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        let t = self.tracked(a) || self.tracked(b);
        self.push(Op::MatMul(a, b), value, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add shapes");
        let t = self.tracked(a) || self.tracked(b);
        self.push(Op::Add(a, b), value, t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b)).expect("sub shapes");
        let t = self.tracked(a) || self.tracked(b);
        self.push(Op::Sub(a, b), value, t)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b)).expect("mul shapes");
        let t = self.tracked(a) || self.tracked(b);
        self.push(Op::Mul(a, b), value, t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let t = self.tracked(a);
        self.push(Op::Scale(a, s), value, t)
    }

    /// Adds the 1×cols row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .add_row_broadcast(self.value(b))
            .expect("bias shape");
        let t = self.tracked(a) || self.tracked(b);
        self.push(Op::AddRow(a, b), value, t)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(elu);
        let t = self.tracked(a);
        self.push(Op::Elu(a), value, t)
    }

    /// Elementwise ELU derivative, itself differentiable.
    pub fn elu_deriv(&mut self, a: Var) -> Var {
        let value = self.value(a).map(elu_deriv);
        let t = self.tracked(a);
        self.push(Op::EluDeriv(a), value, t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(a);
        self.push(Op::Transpose(a), value, t)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(rows, cols)
            .expect("reshape size");
        let t = self.tracked(a);
        self.push(Op::Reshape(a), value, t)
    }

    /// Frobenius inner product as a 1×1 node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        debug_assert_eq!(x.shape(), y.shape());
        let s = crate::linalg::dot(x.as_slice(), y.as_slice());
        let t = self.tracked(a) || self.tracked(b);
        self.push(Op::Dot(a, b), Matrix::from_rows(&[&[s]]), t)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let x = self.value(a).as_slice();
        let s = crate::linalg::dot(x, x);
        let t = self.tracked(a);
        self.push(Op::SumSquares(a), Matrix::from_rows(&[&[s]]), t)
    }

    /// Reverse sweep from a 1×1 output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::from_rows(&[&[1.0]]));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match node.op {
                Op::Leaf | Op::Constant => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.tracked(a) {
                        let gb = g.matmul_unchecked(&self.value(b).transpose());
                        acc(&mut grads, a, gb);
                    }
                    if self.tracked(b) {
                        let ga = self.value(a).transpose().matmul_unchecked(&g);
                        acc(&mut grads, b, ga);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.tracked(b) {
                        acc(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.tracked(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.tracked(b) {
                        acc(&mut grads, b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.tracked(a) {
                        acc(&mut grads, a, g.zip_map(self.value(b), |x, y| x * y));
                    }
                    if self.tracked(b) {
                        acc(&mut grads, b, g.zip_map(self.value(a), |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, a, g.scale(s)),
                Op::AddRow(a, b) => {
                    if self.tracked(b) {
                        let cols = g.cols();
                        let mut sums = vec![0.0; cols];
                        for i in 0..g.rows() {
                            for (s, &x) in sums.iter_mut().zip(g.row(i)) {
                                *s += x;
                            }
                        }
                        acc(&mut grads, b, Matrix::from_vec(1, cols, sums).expect("row"));
                    }
                    if self.tracked(a) {
                        acc(&mut grads, a, g);
                    }
                }
                Op::Elu(a) => acc(
                    &mut grads,
                    a,
                    g.zip_map(self.value(a), |x, y| x * elu_deriv(y)),
                ),
                Op::EluDeriv(a) => acc(
                    &mut grads,
                    a,
                    g.zip_map(self.value(a), |x, y| x * elu_second_deriv(y)),
                ),
                Op::Transpose(a) => acc(&mut grads, a, g.transpose()),
                Op::Reshape(a) => {
                    let (r, c) = self.value(a).shape();
                    acc(&mut grads, a, g.reshape(r, c).expect("same size"));
                }
                Op::Dot(a, b) => {
                    let s = g.as_slice()[0];
                    if self.tracked(a) {
                        acc(&mut grads, a, self.value(b).scale(s));
                    }
                    if self.tracked(b) {
                        acc(&mut grads, b, self.value(a).scale(s));
                    }
                }
                Op::SumSquares(a) => {
                    let s = g.as_slice()[0];
                    acc(&mut grads, a, self.value(a).scale(2.0 * s));
                }
            }
        }
        Gradients(grads)
    }
}
