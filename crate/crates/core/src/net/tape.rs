//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Each node stores
//! its value; [`Tape::backward`] walks the nodes in reverse and accumulates
//! vector-Jacobian products. Parameters are leaves that name a slot in the
//! caller's parameter list, so a tape never owns weights.

use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis};

use super::conv::Neighborhood;

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Aggregate(Var, Arc<Neighborhood>),
    Standardize { x: Var, inv_std: Vec<f64> },
    Scale { x: Var, inv_std: Vec<f64> },
    LeakyRelu(Var, f64),
    Gather(Var, Arc<[usize]>),
    Concat(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Matrix>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf, `None` when it did not influence the
    /// seeds.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(parameter id, gradient)` for every parameter leaf that received
    /// a gradient, in recording order.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Matrix)> + '_ {
        self.params
            .iter()
            .filter_map(|&(node, pid)| self.leaves[node].as_ref().map(|g| (pid, g)))
    }

    /// Adds every parameter gradient into `acc[param_id]`.
    pub fn accumulate_into(&self, acc: &mut [Matrix]) {
        for (pid, g) in self.param_grads() {
            acc[pid] += g;
        }
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    /// A leaf whose gradient is routed to parameter slot `id`.
    pub fn param(&mut self, id: usize, value: &Matrix) -> Var {
        self.push(value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.nrows(), 1);
        let v = self.value(x) + b;
        self.push(v, Op::AddBias(x, bias))
    }

    /// Kernel-point correlation: for query `p`, output block `k` is
    /// `sum_q h_k(p, q) * x[q]`. Output is `queries x (K * C)`.
    pub fn aggregate(&mut self, x: Var, nb: Arc<Neighborhood>) -> Var {
        let v = nb.forward(self.value(x));
        self.push(v, Op::Aggregate(x, nb))
    }

    /// Per-column standardization over the rows of `x`.
    pub fn standardize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.nrows().max(1) as f64;
        let mean = xv.sum_axis(Axis(0)) / n;
        let centered = xv - &mean;
        let var = centered.mapv(|c| c * c).sum_axis(Axis(0)) / n;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut out = centered;
        for (mut col, s) in out.columns_mut().into_iter().zip(&inv_std) {
            col *= *s;
        }
        self.push(out, Op::Standardize { x, inv_std })
    }

    /// `(x - mean) / sqrt(var + eps)` per column with constant statistics.
    pub fn normalize_fixed(&mut self, x: Var, mean: &[f64], var: &[f64]) -> Var {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut out = self.value(x).clone();
        for (c, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - mean[c]) * inv_std[c]);
        }
        self.push(out, Op::Scale { x, inv_std })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).mapv(|a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(x, slope))
    }

    /// Row `i` of the output is row `rows[i]` of `x`.
    pub fn gather(&mut self, x: Var, rows: Arc<[usize]>) -> Var {
        let xv = self.value(x);
        let v = xv.select(Axis(0), &rows);
        self.push(v, Op::Gather(x, rows))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let v = concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts differ");
        self.push(v, Op::Concat(a, b))
    }

    /// Sum of all entries as a `1 x 1` matrix.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// Reverse pass from a scalar (`1 x 1`) node with unit seed.
    pub fn backward_scalar(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        self.backward(&[(loss, Matrix::ones((1, 1)))])
    }

    /// Reverse pass seeded with `d(objective)/d(node)` for each given node.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(*v).dim(), g.dim(), "seed shape mismatch");
            add_grad(&mut grads[v.0], g.clone());
        }
        let mut params = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => continue,
                Op::Param(id) => {
                    params.push((i, *id));
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    add_grad(&mut grads[a.0], ga);
                    add_grad(&mut grads[b.0], gb);
                }
                Op::AddBias(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_grad(&mut grads[b.0], gb);
                    add_grad(&mut grads[x.0], g);
                }
                Op::Aggregate(x, nb) => {
                    let gx = nb.backward(&g, self.value(*x).nrows());
                    add_grad(&mut grads[x.0], gx);
                }
                Op::Standardize { x, inv_std } => {
                    let y = &node.value;
                    let n = y.nrows().max(1) as f64;
                    let sum_g = g.sum_axis(Axis(0));
                    let sum_gy = (&g * y).sum_axis(Axis(0));
                    let mut gx = g * n - &sum_g;
                    for (c, mut col) in gx.columns_mut().into_iter().enumerate() {
                        let yc = y.column(c);
                        let k = inv_std[c] / n;
                        for (r, v) in col.iter_mut().enumerate() {
                            *v = k * (*v - yc[r] * sum_gy[c]);
                        }
                    }
                    add_grad(&mut grads[x.0], gx);
                }
                Op::Scale { x, inv_std } => {
                    let mut gx = g;
                    for (mut col, s) in gx.columns_mut().into_iter().zip(inv_std) {
                        col *= *s;
                    }
                    add_grad(&mut grads[x.0], gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    gx.zip_mut_with(xv, |gv, &a| {
                        if a <= 0.0 {
                            *gv *= slope;
                        }
                    });
                    add_grad(&mut grads[x.0], gx);
                }
                Op::Gather(x, rows) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &g.row(i);
                    }
                    add_grad(&mut grads[x.0], gx);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).ncols();
                    add_grad(&mut grads[a.0], g.slice(s![.., ..ca]).to_owned());
                    add_grad(&mut grads[b.0], g.slice(s![.., ca..]).to_owned());
                }
                Op::Sum(x) => {
                    let gx = Matrix::from_elem(self.value(*x).dim(), g[[0, 0]]);
                    add_grad(&mut grads[x.0], gx);
                }
            }
        }
        params.reverse();
        Gradients {
            leaves: grads,
            params,
        }
    }
}

fn add_grad(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}
