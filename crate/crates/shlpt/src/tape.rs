//! Reverse-mode autodiff over `Array2<f64>` values.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] on a scalar output accumulates gradients into every
//! node that requires them. Frozen inputs enter via [`Tape::constant`] and
//! never receive gradient, which is how backbone weights and pooled prompts
//! stay isolated from the optimizer during task training.

use ndarray::{Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Input,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Silu(usize),
    Exp(usize),
    Ln(usize),
    Powf(usize, f64),
    RowSoftmax(usize),
    CrossEntropy(usize, Vec<usize>),
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    ConcatRows(usize, usize),
    SliceRows(usize, usize, usize),
    ColMax(usize),
    Sum(usize),
    GatherRows(usize, Vec<usize>),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Forward-computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input; receives gradient on backward.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, true, Op::Input)
    }

    /// Frozen input; gradient is never computed for it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, false, Op::Input)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Accumulated gradient of a node, zeros if it never received one.
    pub fn grad(&self, v: Var) -> Array2<f64> {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Array2::zeros(n.value.raw_dim()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        let rg = self.requires(a);
        self.push(value, rg, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::Add(a.0, b.0))
    }

    /// Adds a `1 x d` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        let rg = self.requires(a) || self.requires(row);
        self.push(value, rg, Op::AddRow(a.0, row.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::Mul(a.0, b.0))
    }

    /// Multiplies matrix `m` by the `1 x 1` scalar node `s`.
    pub fn mul_scalar(&mut self, s: Var, m: Var) -> Var {
        let sv = self.nodes[s.0].value[[0, 0]];
        let value = &self.nodes[m.0].value * sv;
        let rg = self.requires(s) || self.requires(m);
        self.push(value, rg, Op::MulScalar(s.0, m.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        let rg = self.requires(a);
        self.push(value, rg, Op::Scale(a.0, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.requires(a);
        self.push(value, rg, Op::Relu(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        let rg = self.requires(a);
        self.push(value, rg, Op::Silu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.requires(a);
        self.push(value, rg, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        let rg = self.requires(a);
        self.push(value, rg, Op::Ln(a.0))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.powf(p));
        let rg = self.requires(a);
        self.push(value, rg, Op::Powf(a.0, p))
    }

    /// Row-wise softmax with an optional additive mask (e.g. causal).
    pub fn row_softmax(&mut self, a: Var, mask: Option<Array2<f64>>) -> Var {
        let mut logits = self.nodes[a.0].value.clone();
        if let Some(m) = &mask {
            logits += m;
        }
        let value = softmax_rows(&logits);
        let rg = self.requires(a);
        self.push(value, rg, Op::RowSoftmax(a.0))
    }

    /// Summed negative log likelihood of `targets[r]` under row-wise softmax
    /// of `logits`. Returns a `1 x 1` scalar.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let l = &self.nodes[logits.0].value;
        assert_eq!(l.nrows(), targets.len(), "one target per logit row");
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let rg = self.requires(logits);
        self.push(
            Array2::from_elem((1, 1), total),
            rg,
            Op::CrossEntropy(logits.0, targets),
        )
    }

    /// Row-wise layer normalization with learned gain and bias (`1 x d`).
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let x = &self.nodes[input.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut value = Array2::zeros(x.raw_dim());
        for (r, row) in x.axis_iter(Axis(0)).enumerate() {
            let d = row.len() as f64;
            let mu = row.sum() / d;
            let var = row.iter().map(|&v| (v - mu).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (c, &v) in row.iter().enumerate() {
                value[[r, c]] = (v - mu) * inv * g[[0, c]] + b[[0, c]];
            }
        }
        let rg = self.requires(input) || self.requires(gain) || self.requires(bias);
        self.push(
            value,
            rg,
            Op::LayerNorm {
                input: input.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        )
    }

    /// Stacks `a` on top of `b` along the row axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.ncols(), bv.ncols());
        let mut value = Array2::zeros((av.nrows() + bv.nrows(), av.ncols()));
        value.slice_mut(ndarray::s![..av.nrows(), ..]).assign(av);
        value.slice_mut(ndarray::s![av.nrows().., ..]).assign(bv);
        let rg = self.requires(a) || self.requires(b);
        self.push(value, rg, Op::ConcatRows(a.0, b.0))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        let rg = self.requires(a);
        self.push(value, rg, Op::SliceRows(a.0, start, len))
    }

    /// Column-wise max over rows (`n x d` -> `1 x d`). Gradient routes to the
    /// first row achieving the max in each column.
    pub fn col_max(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        assert!(x.nrows() > 0, "col_max of empty matrix");
        let mut value = Array2::from_elem((1, x.ncols()), f64::NEG_INFINITY);
        for row in x.axis_iter(Axis(0)) {
            for (c, &v) in row.iter().enumerate() {
                if v > value[[0, c]] {
                    value[[0, c]] = v;
                }
            }
        }
        let rg = self.requires(a);
        self.push(value, rg, Op::ColMax(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let rg = self.requires(a);
        self.push(value, rg, Op::Sum(a.0))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = Array2::zeros((indices.len(), x.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).assign(&x.row(i));
        }
        let rg = self.requires(a);
        self.push(value, rg, Op::GatherRows(a.0, indices))
    }

    /// Dot product of two `1 x d` rows as a `1 x 1` scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let bt = self.transpose(b);
        self.matmul(a, bt)
    }

    /// Cosine similarity of two `1 x d` rows. Callers must reject zero-norm
    /// inputs before reaching the tape.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let ab = self.dot(a, b);
        let aa = self.dot(a, a);
        let bb = self.dot(b, b);
        let ia = self.powf(aa, -0.5);
        let ib = self.powf(bb, -0.5);
        let t = self.mul(ab, ia);
        self.mul(t, ib)
    }

    fn add_grad(&mut self, idx: usize, g: Array2<f64>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut self.nodes[idx].grad {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagates from the `1 x 1` scalar `output` with seed gradient 1.
    pub fn backward(&mut self, output: Var) {
        assert_eq!(self.nodes[output.0].value.dim(), (1, 1), "scalar output");
        self.nodes[output.0].grad = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match self.nodes[i].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.nodes[b].value.t());
                    let gb = self.nodes[a].value.t().dot(&g);
                    self.add_grad(a, ga);
                    self.add_grad(b, gb);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    self.add_grad(a, g.t().to_owned());
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, g.clone());
                    self.add_grad(b, g);
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.add_grad(a, g);
                    self.add_grad(row, grow);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b].value;
                    let gb = &g * &self.nodes[a].value;
                    self.add_grad(a, ga);
                    self.add_grad(b, gb);
                }
                Op::MulScalar(s, m) => {
                    let (s, m) = (*s, *m);
                    let gs = (&g * &self.nodes[m].value).sum();
                    let sv = self.nodes[s].value[[0, 0]];
                    self.add_grad(s, Array2::from_elem((1, 1), gs));
                    self.add_grad(m, &g * sv);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.add_grad(a, &g * c);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let ga = &g * &self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.add_grad(a, ga);
                }
                Op::Silu(a) => {
                    let a = *a;
                    let ga = &g
                        * &self.nodes[a].value.mapv(|x| {
                            let s = sigmoid(x);
                            s * (1.0 + x * (1.0 - s))
                        });
                    self.add_grad(a, ga);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let ga = &g * &self.nodes[i].value;
                    self.add_grad(a, ga);
                }
                Op::Ln(a) => {
                    let a = *a;
                    let ga = &g / &self.nodes[a].value;
                    self.add_grad(a, ga);
                }
                Op::Powf(a, p) => {
                    let (a, p) = (*a, *p);
                    let ga = &g * &self.nodes[a].value.mapv(|x| p * x.powf(p - 1.0));
                    self.add_grad(a, ga);
                }
                Op::RowSoftmax(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let mut ga = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    self.add_grad(a, ga);
                }
                Op::CrossEntropy(a, targets) => {
                    let a = *a;
                    let targets = targets.clone();
                    let probs = softmax_rows(&self.nodes[a].value);
                    let gs = g[[0, 0]];
                    let mut ga = probs;
                    for (r, &t) in targets.iter().enumerate() {
                        ga[[r, t]] -= 1.0;
                    }
                    ga *= gs;
                    self.add_grad(a, ga);
                }
                Op::LayerNorm {
                    input,
                    gain,
                    bias,
                    eps,
                } => {
                    let (input, gain, bias, eps) = (*input, *gain, *bias, *eps);
                    let x = self.nodes[input].value.clone();
                    let gv = self.nodes[gain].value.clone();
                    let d = x.ncols() as f64;
                    let mut gx = Array2::zeros(x.raw_dim());
                    let mut gg = Array2::zeros((1, x.ncols()));
                    let mut gb = Array2::zeros((1, x.ncols()));
                    for r in 0..x.nrows() {
                        let row = x.row(r);
                        let mu = row.sum() / d;
                        let var = row.iter().map(|&v| (v - mu).powi(2)).sum::<f64>() / d;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
                        let dy: Vec<f64> = (0..x.ncols()).map(|c| g[[r, c]]).collect();
                        let dxhat: Vec<f64> =
                            (0..x.ncols()).map(|c| dy[c] * gv[[0, c]]).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(&a, &b)| a * b)
                            .sum::<f64>()
                            / d;
                        for c in 0..x.ncols() {
                            gx[[r, c]] =
                                inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                            gg[[0, c]] += dy[c] * xhat[c];
                            gb[[0, c]] += dy[c];
                        }
                    }
                    self.add_grad(input, gx);
                    self.add_grad(gain, gg);
                    self.add_grad(bias, gb);
                }
                Op::ConcatRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let na = self.nodes[a].value.nrows();
                    let ga = g.slice(ndarray::s![..na, ..]).to_owned();
                    let gb = g.slice(ndarray::s![na.., ..]).to_owned();
                    self.add_grad(a, ga);
                    self.add_grad(b, gb);
                }
                Op::SliceRows(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let mut ga = Array2::zeros(self.nodes[a].value.raw_dim());
                    ga.slice_mut(ndarray::s![start..start + len, ..]).assign(&g);
                    self.add_grad(a, ga);
                }
                Op::ColMax(a) => {
                    let a = *a;
                    let x = &self.nodes[a].value;
                    let mut ga = Array2::zeros(x.raw_dim());
                    for c in 0..x.ncols() {
                        let mut best = 0;
                        for r in 1..x.nrows() {
                            if x[[r, c]] > x[[best, c]] {
                                best = r;
                            }
                        }
                        ga[[best, c]] = g[[0, c]];
                    }
                    self.add_grad(a, ga);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let shape = self.nodes[a].value.raw_dim();
                    self.add_grad(a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::GatherRows(a, indices) => {
                    let a = *a;
                    let indices = indices.clone();
                    let mut ga = Array2::zeros(self.nodes[a].value.raw_dim());
                    for (r, &idx) in indices.iter().enumerate() {
                        let mut dst = ga.row_mut(idx);
                        dst += &g.row(r);
                    }
                    self.add_grad(a, ga);
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically-stable row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (r, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (c, e) in exps.iter().enumerate() {
            out[[r, c]] = e / sum;
        }
    }
    out
}
