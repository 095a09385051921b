//! A small reverse-mode automatic differentiation tape over [`Matrix`] values.
//!
//! Every forward operation appends a node; [`Graph::backward`] walks the tape
//! in reverse once. Parameters of a player that must stay fixed for a step are
//! inserted as leaves and then passed through [`Graph::detach`], so their
//! gradient is structurally zero rather than merely small.

use crate::tensor::{gemm, Matrix};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Handle to a node on a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Silu(Var),
    Clamp(Var, f64, f64),
    SoftClip {
        x: Var,
        lo: Vec<f64>,
        hi: Vec<f64>,
        k: f64,
    },
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    MeanRows(Var),
    MeanGroups(Var, usize),
    LogSumExpRows(Var),
    SoftmaxRows(Var),
    Columns(Var, usize),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    RepeatRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    DiagLogProb(Var, Var, Var),
    ComponentScores(Var, Var, Var, Var),
    Entropy(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// The recording tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// `None` when no path connects `v` to the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// The gradient of `v`, with an unreachable node reported as zeros.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[inline]
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `f_c(x) = x + (1/β)·log[(1 + e^{β(a−x)}) / (1 + e^{β(x−b)})]`, `β = K/(b−a)`,
/// evaluated relative to the nearer bound to avoid cancellation.
#[inline]
pub(crate) fn soft_clip_value(x: f64, a: f64, b: f64, k: f64) -> f64 {
    let beta = k / (b - a);
    if x > 0.5 * (a + b) {
        b - (softplus(beta * (b - x)) - softplus(beta * (a - x))) / beta
    } else {
        a + (softplus(beta * (x - a)) - softplus(beta * (x - b))) / beta
    }
}

/// `f_c'(x) = σ(β(x−a))·σ(β(b−x))·(1 − e^{−K})`, strictly positive.
#[inline]
pub(crate) fn soft_clip_slope(x: f64, a: f64, b: f64, k: f64) -> f64 {
    let beta = k / (b - a);
    sigmoid(beta * (x - a)) * sigmoid(beta * (b - x)) * -(-k).exp_m1()
}

/// Log-density contribution of one coordinate of a diagonal Gaussian, with
/// `d = z − μ`. Every Gaussian density in the crate goes through this so that
/// identical inputs give bit-identical results on every code path.
#[inline]
pub(crate) fn log_normal_coord(d: f64, lv: f64) -> f64 {
    -0.5 * (LN_2PI + lv) - 0.5 * d * d * (-lv).exp()
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn broadcast_binary(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(a.shape(), b.shape());
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Matrix::from_fn(r, c, |i, j| {
        f(
            a.get(if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j }),
            b.get(if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j }),
        )
    })
}

/// Sums `g` over the dimensions that were broadcast to reach its shape.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g;
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        let oi = if shape.0 == 1 { 0 } else { i };
        for j in 0..g.cols() {
            let oj = if shape.1 == 1 { 0 } else { j };
            let v = out.get(oi, oj) + g.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Convenience for `1 × 1` nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: &Matrix) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: same value, no path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, op, rg)
    }

    /// Elementwise sum; either operand may be broadcast along a unit dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    /// Hard clamp; the gradient is zero outside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Column-wise soft clipping of an `M × D` matrix into `(lo_j, hi_j)`.
    pub fn soft_clip(&mut self, x: Var, lo: &[f64], hi: &[f64], k: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(lo.len(), xv.cols());
        assert_eq!(hi.len(), xv.cols());
        let v = Matrix::from_fn(xv.rows(), xv.cols(), |i, j| {
            soft_clip_value(xv.get(i, j), lo[j], hi[j], k)
        });
        let rg = self.rg(x);
        self.push(
            v,
            Op::SoftClip {
                x,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
                k,
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(v, Op::MeanAll(x), rg)
    }

    /// `n × m → n × 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Matrix::from_fn(xv.rows(), 1, |i, _| xv.row(i).iter().sum());
        let rg = self.rg(x);
        self.push(v, Op::SumCols(x), rg)
    }

    /// `n × m → 1 × m`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows() as f64;
        let mut v = Matrix::zeros(1, xv.cols());
        for i in 0..xv.rows() {
            for (o, a) in v.as_mut_slice().iter_mut().zip(xv.row(i)) {
                *o += a;
            }
        }
        let v = v.map(|s| s / n);
        let rg = self.rg(x);
        self.push(v, Op::MeanRows(x), rg)
    }

    /// Averages consecutive blocks of `t` rows: `(n·t) × m → n × m`.
    pub fn mean_groups(&mut self, x: Var, t: usize) -> Var {
        let xv = self.value(x);
        assert!(t >= 1 && xv.rows() % t == 0, "rows not divisible by group size");
        let n = xv.rows() / t;
        let mut v = Matrix::zeros(n, xv.cols());
        for i in 0..xv.rows() {
            let out = v.row_mut(i / t);
            for (o, a) in out.iter_mut().zip(xv.row(i)) {
                *o += a;
            }
        }
        let v = v.map(|s| s / t as f64);
        let rg = self.rg(x);
        self.push(v, Op::MeanGroups(x, t), rg)
    }

    /// Max-shifted log-sum-exp of each row: `n × m → n × 1`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Matrix::from_fn(xv.rows(), 1, |i, _| logsumexp(xv.row(i)));
        let rg = self.rg(x);
        self.push(v, Op::LogSumExpRows(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut v = xv.clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    /// Columns `start..start + len`.
    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).columns(start, len);
        let rg = self.rg(x);
        self.push(v, Op::Columns(x, start), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows());
        let ac = av.cols();
        let v = Matrix::from_fn(av.rows(), ac + bv.cols(), |i, j| {
            if j < ac {
                av.get(i, j)
            } else {
                bv.get(i, j - ac)
            }
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).vstack(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatRows(a, b), rg)
    }

    /// Repeats every row `t` times consecutively: `n × m → (n·t) × m`.
    pub fn repeat_rows(&mut self, x: Var, t: usize) -> Var {
        let xv = self.value(x);
        let idx: Vec<usize> = (0..xv.rows() * t).map(|r| r / t).collect();
        let v = xv.select_rows(&idx);
        let rg = self.rg(x);
        self.push(v, Op::RepeatRows(x, t), rg)
    }

    /// Row `r` of the result is row `ids[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Var {
        let v = self.value(x).select_rows(ids);
        let rg = self.rg(x);
        self.push(v, Op::GatherRows(x, ids.to_vec()), rg)
    }

    /// Row-wise diagonal Gaussian log-density: `z, mean, log_var` are all
    /// `n × D`; the result is `n × 1`.
    pub fn diag_log_prob(&mut self, z: Var, mean: Var, log_var: Var) -> Var {
        let (zv, mv, lv) = (self.value(z), self.value(mean), self.value(log_var));
        assert_eq!(zv.shape(), mv.shape());
        assert_eq!(zv.shape(), lv.shape());
        let v = Matrix::from_fn(zv.rows(), 1, |i, _| {
            zv.row(i)
                .iter()
                .zip(mv.row(i))
                .zip(lv.row(i))
                .map(|((&z, &m), &l)| log_normal_coord(z - m, l))
                .sum()
        });
        let rg = self.rg(z) || self.rg(mean) || self.rg(log_var);
        self.push(v, Op::DiagLogProb(z, mean, log_var), rg)
    }

    /// Joint log-scores `S_ik = log w_k + log N(z_i | μ_k, diag(exp lv_k))`
    /// for `z: n × D`, `means, log_vars: M × D`, `log_weights: 1 × M`.
    pub fn component_scores(
        &mut self,
        z: Var,
        means: Var,
        log_vars: Var,
        log_weights: Var,
    ) -> Var {
        let v = component_scores_value(
            self.value(z),
            self.value(means),
            self.value(log_vars),
            self.value(log_weights).as_slice(),
        );
        let rg = self.rg(z) || self.rg(means) || self.rg(log_vars) || self.rg(log_weights);
        self.push(v, Op::ComponentScores(z, means, log_vars, log_weights), rg)
    }

    /// Shannon entropy `−Σ c log c` of all entries (nats), with `0·log 0 = 0`.
    pub fn entropy(&mut self, c: Var) -> Var {
        let h = self
            .value(c)
            .as_slice()
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum();
        let rg = self.rg(c);
        self.push(Matrix::scalar(h), Op::Entropy(c), rg)
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            shapes: self.nodes.iter().map(|nd| nd.value.shape()).collect(),
            grads,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, &mut da, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, &mut db, 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                self.accumulate(grads, *a, reduce_to(g.clone(), sa));
                self.accumulate(grads, *b, reduce_to(g.clone(), sb));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                self.accumulate(grads, *a, reduce_to(g.clone(), sa));
                self.accumulate(grads, *b, reduce_to(g.map(|v| -v), sb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = broadcast_binary(g, bv, |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(ga, av.shape()));
                }
                if self.rg(*b) {
                    let gb = broadcast_binary(g, av, |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(gb, bv.shape()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = broadcast_binary(g, bv, |x, y| x / y);
                    self.accumulate(grads, *a, reduce_to(ga, av.shape()));
                }
                if self.rg(*b) {
                    // d(a/b)/db = −out/b
                    let t = broadcast_binary(g, out, |x, y| x * y);
                    let gb = broadcast_binary(&t, bv, |x, y| -x / y);
                    self.accumulate(grads, *b, reduce_to(gb, bv.shape()));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(out, |a, y| a * y)),
            Op::Ln(x) => {
                let gx = g.zip_map(self.value(*x), |a, v| a / v);
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let gx = g.zip_map(self.value(*x), |a, v| 2.0 * a * v);
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let gx = g.zip_map(self.value(*x), |a, v| {
                    let s = sigmoid(v);
                    a * s * (1.0 + v * (1.0 - s))
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let gx = g.zip_map(self.value(*x), |a, v| if v > lo && v < hi { a } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::SoftClip { x, lo, hi, k } => {
                let xv = self.value(*x);
                let gx = Matrix::from_fn(xv.rows(), xv.cols(), |i, j| {
                    g.get(i, j) * soft_clip_slope(xv.get(i, j), lo[j], hi[j], *k)
                });
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Matrix::filled(r, c, g.item()));
            }
            Op::MeanAll(x) => {
                let (r, c) = self.value(*x).shape();
                let v = g.item() / (r * c) as f64;
                self.accumulate(grads, *x, Matrix::filled(r, c, v));
            }
            Op::SumCols(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).shape();
                let n = r as f64;
                self.accumulate(grads, *x, Matrix::from_fn(r, c, |_, j| g.get(0, j) / n));
            }
            Op::MeanGroups(x, t) => {
                let t = *t;
                let (r, c) = self.value(*x).shape();
                let gx = Matrix::from_fn(r, c, |i, j| g.get(i / t, j) / t as f64);
                self.accumulate(grads, *x, gx);
            }
            Op::LogSumExpRows(x) => {
                let xv = self.value(*x);
                let gx = Matrix::from_fn(xv.rows(), xv.cols(), |i, j| {
                    let l = out.get(i, 0);
                    if l == f64::NEG_INFINITY {
                        0.0
                    } else {
                        g.get(i, 0) * (xv.get(i, j) - l).exp()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let mut gx = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gi = g.row(i);
                    let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for (o, (&yy, &gg)) in gx.row_mut(i).iter_mut().zip(y.iter().zip(gi)) {
                        *o = yy * (gg - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Columns(x, start) => {
                let (r, c) = self.value(*x).shape();
                let (start, len) = (*start, g.cols());
                let gx = Matrix::from_fn(r, c, |i, j| {
                    if j >= start && j < start + len {
                        g.get(i, j - start)
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let bc = self.value(*b).cols();
                self.accumulate(grads, *a, g.columns(0, ac));
                self.accumulate(grads, *b, g.columns(ac, bc));
            }
            Op::ConcatRows(a, b) => {
                let ar = self.value(*a).rows();
                let br = self.value(*b).rows();
                let c = g.cols();
                let top: Vec<usize> = (0..ar).collect();
                let bottom: Vec<usize> = (ar..ar + br).collect();
                debug_assert_eq!(c, self.value(*a).cols());
                self.accumulate(grads, *a, g.select_rows(&top));
                self.accumulate(grads, *b, g.select_rows(&bottom));
            }
            Op::RepeatRows(x, t) => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    let dst = gx.row_mut(i / *t);
                    for (o, v) in dst.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows(x, ids) => {
                let (r, c) = self.value(*x).shape();
                let mut gx = Matrix::zeros(r, c);
                for (row, &id) in ids.iter().enumerate() {
                    let dst = gx.row_mut(id);
                    for (o, v) in dst.iter_mut().zip(g.row(row)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::DiagLogProb(z, mean, log_var) => {
                let (zv, mv, lv) = (self.value(*z), self.value(*mean), self.value(*log_var));
                let (n, d) = zv.shape();
                let mut gz = Matrix::zeros(n, d);
                let mut glv = Matrix::zeros(n, d);
                for i in 0..n {
                    let gi = g.get(i, 0);
                    for j in 0..d {
                        let diff = zv.get(i, j) - mv.get(i, j);
                        let iv = (-lv.get(i, j)).exp();
                        gz.set(i, j, -gi * diff * iv);
                        glv.set(i, j, gi * 0.5 * (diff * diff * iv - 1.0));
                    }
                }
                if self.rg(*mean) {
                    self.accumulate(grads, *mean, gz.map(|v| -v));
                }
                self.accumulate(grads, *z, gz);
                self.accumulate(grads, *log_var, glv);
            }
            Op::ComponentScores(z, means, log_vars, log_weights) => {
                let (gz, gm, glv, gw) = component_scores_backward(
                    g,
                    self.value(*z),
                    self.value(*means),
                    self.value(*log_vars),
                );
                self.accumulate(grads, *z, gz);
                self.accumulate(grads, *means, gm);
                self.accumulate(grads, *log_vars, glv);
                self.accumulate(grads, *log_weights, gw);
            }
            Op::Entropy(c) => {
                let gc = self
                    .value(*c)
                    .map(|p| if p > 0.0 { -g.item() * (p.ln() + 1.0) } else { 0.0 });
                self.accumulate(grads, *c, gc);
            }
        }
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        let u = 1.0 / xs.len() as f64;
        xs.iter_mut().for_each(|x| *x = u);
        return;
    }
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

pub(crate) fn component_scores_value(
    z: &Matrix,
    means: &Matrix,
    log_vars: &Matrix,
    log_weights: &[f64],
) -> Matrix {
    let (n, d) = z.shape();
    let m = means.rows();
    assert_eq!(means.cols(), d, "latent dimension mismatch");
    assert_eq!(log_vars.shape(), (m, d), "log-variance shape mismatch");
    assert_eq!(log_weights.len(), m, "weight count mismatch");
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let zi = z.row(i);
        let oi = out.row_mut(i);
        for k in 0..m {
            let mk = means.row(k);
            let lk = log_vars.row(k);
            let mut s = log_weights[k];
            for j in 0..d {
                s += log_normal_coord(zi[j] - mk[j], lk[j]);
            }
            oi[k] = s;
        }
    }
    out
}

fn component_scores_backward(
    g: &Matrix,
    z: &Matrix,
    means: &Matrix,
    log_vars: &Matrix,
) -> (Matrix, Matrix, Matrix, Matrix) {
    let (n, d) = z.shape();
    let m = means.rows();
    let inv_var = log_vars.map(|l| (-l).exp());
    let mut gz = Matrix::zeros(n, d);
    let mut gm = Matrix::zeros(m, d);
    let mut glv = Matrix::zeros(m, d);
    let mut gw = Matrix::zeros(1, m);
    for i in 0..n {
        let zi = z.row(i);
        let gi = g.row(i);
        for k in 0..m {
            let v = gi[k];
            if v == 0.0 {
                continue;
            }
            gw.as_mut_slice()[k] += v;
            let mk = means.row(k);
            let ivk = inv_var.row(k);
            for j in 0..d {
                let diff = zi[j] - mk[j];
                let t = v * diff * ivk[j];
                gz.as_mut_slice()[i * d + j] -= t;
                gm.as_mut_slice()[k * d + j] += t;
                glv.as_mut_slice()[k * d + j] += 0.5 * v * (diff * diff * ivk[j] - 1.0);
            }
        }
    }
    (gz, gm, glv, gw)
}
