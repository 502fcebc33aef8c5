//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order of the DAG and `backward` walks it in reverse, visiting
//! every node once.
//!
//! Broadcasting is deliberately narrow: binary elementwise ops accept either
//! equal shapes or one operand with a single element. Row-vector bias
//! addition and row scaling are explicit ops ([`Tape::add_bias`],
//! [`Tape::scale_rows`]).
//!
//! ```
//! use concept_mil::autodiff::Tape;
//! use concept_mil::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
//! let y = tape.sq_l2(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.value(y).item(), 25.0);
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0, 8.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &str;

    /// Returns one gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor)
        -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    SumRows(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SqL2(Var),
    Percentile {
        input: Var,
        lo: usize,
        hi: usize,
        frac: f64,
    },
    MinMax {
        input: Var,
        argmin: usize,
        argmax: usize,
    },
    Bce {
        input: Var,
        target: f64,
        clamped: bool,
    },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Probability clamp used by [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Single-threaded recording of one computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the differentiated output.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when it is unreachable.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

fn same_shape_or_scalar(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() == b.shape() || a.is_scalar() || b.is_scalar() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{op}: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (shape, n) = if a.numel() >= b.numel() {
        (a.shape().to_vec(), a.numel())
    } else {
        (b.shape().to_vec(), b.numel())
    };
    let ad = a.data();
    let bd = b.data();
    let data = (0..n)
        .map(|i| {
            let x = if ad.len() == 1 { ad[0] } else { ad[i] };
            let y = if bd.len() == 1 { bd[0] } else { bd[i] };
            f(x, y)
        })
        .collect();
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Reduces a broadcast gradient back to the operand's shape.
fn unbroadcast(grad: Vec<f64>, target: &Tensor) -> Tensor {
    if target.numel() == grad.len() {
        Tensor::new(target.shape().to_vec(), grad).expect("unbroadcast shape")
    } else {
        Tensor::new(target.shape().to_vec(), vec![grad.iter().sum()]).expect("scalar shape")
    }
}

fn scalar_at(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linear-interpolation percentile support: sorted positions and weight.
pub(crate) fn percentile_plan(values: &[f64], gamma: f64) -> (usize, usize, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let rank = gamma * (values.len() - 1) as f64;
    let lo_rank = rank.floor() as usize;
    let hi_rank = rank.ceil().min((values.len() - 1) as f64) as usize;
    (order[lo_rank], order[hi_rank], rank - lo_rank as f64)
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape_or_scalar(ta, tb, name)?;
        let out = broadcast(ta, tb, f);
        Ok(self.push(op, out))
    }

    /// `m[r×c] + b[c]` added to every row.
    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (tm, tb) = (self.value(m), self.value(bias));
        let (r, c) = tm.require_matrix("add_bias")?;
        if tb.numel() != c {
            return Err(Error::Shape(format!(
                "add_bias: bias of {} elements for {c} columns",
                tb.numel()
            )));
        }
        let mut data = tm.data().to_vec();
        for i in 0..r {
            for (x, &b) in data[i * c..(i + 1) * c].iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(Op::AddBias(m, bias), out))
    }

    /// Multiplies row `i` of `m[r×c]` by `s[i]`.
    pub fn scale_rows(&mut self, m: Var, s: Var) -> Result<Var> {
        let (tm, ts) = (self.value(m), self.value(s));
        let (r, c) = tm.require_matrix("scale_rows")?;
        if ts.numel() != r {
            return Err(Error::Shape(format!(
                "scale_rows: {} scales for {r} rows",
                ts.numel()
            )));
        }
        let mut data = tm.data().to_vec();
        for i in 0..r {
            let f = ts.data()[i];
            data[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= f);
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(Op::ScaleRows(m, s), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    /// Selects elements of a vector or rows of a matrix.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let out = match t.ndim() {
            1 => {
                let n = t.numel();
                let mut v = Vec::with_capacity(indices.len());
                for &i in indices {
                    if i >= n {
                        return Err(Error::InvalidArgument(format!(
                            "index {i} out of range for length {n}"
                        )));
                    }
                    v.push(t.data()[i]);
                }
                Tensor::vector(v)
            }
            2 => t.gather_rows(indices)?,
            _ => return Err(Error::Shape(format!("gather on shape {:?}", t.shape()))),
        };
        Ok(self.push(Op::Gather(a, indices.to_vec()), out))
    }

    /// Column sums: `[r×c] -> [c]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.require_matrix("sum_rows")?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        Ok(self.push(Op::SumRows(a), Tensor::vector(out)))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|&x| x < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let out = t.map(f64::sqrt);
        Ok(self.push(Op::Sqrt(a), out))
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.require_vector("softmax")?;
        if n == 0 {
            return Err(Error::InvalidArgument("softmax of an empty vector".into()));
        }
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out = Tensor::vector(exps.into_iter().map(|e| e / total).collect());
        Ok(self.push(Op::Softmax(a), out))
    }

    fn nonempty(&self, a: Var, what: &str) -> Result<()> {
        if self.value(a).numel() == 0 {
            Err(Error::InvalidArgument(format!("{what} of an empty tensor")))
        } else {
            Ok(())
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.nonempty(a, "sum")?;
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Op::Sum(a), Tensor::scalar(s)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.nonempty(a, "mean")?;
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(s)))
    }

    /// Sum of squares.
    pub fn sq_l2(&mut self, a: Var) -> Result<Var> {
        self.nonempty(a, "sq_l2")?;
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        Ok(self.push(Op::SqL2(a), Tensor::scalar(s)))
    }

    /// Linear-interpolation percentile at rank `gamma·(n−1)`; the gradient
    /// flows to the two order statistics it interpolates.
    pub fn percentile(&mut self, a: Var, gamma: f64) -> Result<Var> {
        let t = self.value(a);
        let n = t.require_vector("percentile")?;
        if n == 0 {
            return Err(Error::InvalidArgument("percentile of an empty vector".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!(
                "percentile level {gamma} outside [0, 1]"
            )));
        }
        let (lo, hi, frac) = percentile_plan(t.data(), gamma);
        let v = t.data()[lo] + frac * (t.data()[hi] - t.data()[lo]);
        Ok(self.push(
            Op::Percentile {
                input: a,
                lo,
                hi,
                frac,
            },
            Tensor::scalar(v),
        ))
    }

    /// `(x − min x) / (max x − min x)`; all-equal input maps to zeros.
    pub fn normalize_minmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.require_vector("normalize_minmax")?;
        if n == 0 {
            return Err(Error::InvalidArgument("normalize_minmax of an empty vector".into()));
        }
        let d = t.data();
        let mut argmin = 0;
        let mut argmax = 0;
        for i in 1..n {
            if d[i] < d[argmin] {
                argmin = i;
            }
            if d[i] > d[argmax] {
                argmax = i;
            }
        }
        let range = d[argmax] - d[argmin];
        let out = if range > 0.0 {
            t.map(|x| (x - d[argmin]) / range)
        } else {
            Tensor::zeros(vec![n])
        };
        Ok(self.push(
            Op::MinMax {
                input: a,
                argmin,
                argmax,
            },
            out,
        ))
    }

    /// Binary cross-entropy of a probability scalar against `target ∈ {0,1}`,
    /// with the probability clamped to `[BCE_EPS, 1 − BCE_EPS]`.
    pub fn bce(&mut self, p: Var, target: f64) -> Result<Var> {
        let t = self.value(p);
        if !t.is_scalar() {
            return Err(Error::Shape(format!("bce needs a scalar, got {:?}", t.shape())));
        }
        let raw = t.item();
        let q = raw.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let loss = -(target * q.ln() + (1.0 - target) * (1.0 - q).ln());
        let clamped = q != raw;
        Ok(self.push(
            Op::Bce {
                input: p,
                target,
                clamped,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Records an externally computed node with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(Op::Custom(inputs.to_vec(), op), output)
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(out_val.shape().to_vec(), vec![1.0])?);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(idx, &g)?;
            grads[idx] = Some(g);
            for (var, contrib) in contributions {
                debug_assert_eq!(contrib.shape(), self.value(var).shape());
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        let res = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.matmul(&tb.transpose()?)?;
                let db = ta.transpose()?.matmul(g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, unbroadcast(gd.to_vec(), ta)),
                    (*b, unbroadcast(gd.to_vec(), tb)),
                ]
            }
            Op::Sub(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, unbroadcast(gd.to_vec(), ta)),
                    (*b, unbroadcast(gd.iter().map(|x| -x).collect(), tb)),
                ]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = gd.iter().enumerate().map(|(i, x)| x * scalar_at(tb, i)).collect();
                let gb = gd.iter().enumerate().map(|(i, x)| x * scalar_at(ta, i)).collect();
                vec![(*a, unbroadcast(ga, ta)), (*b, unbroadcast(gb, tb))]
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = gd.iter().enumerate().map(|(i, x)| x / scalar_at(tb, i)).collect();
                let gb = gd
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let y = scalar_at(tb, i);
                        -x * scalar_at(ta, i) / (y * y)
                    })
                    .collect();
                vec![(*a, unbroadcast(ga, ta)), (*b, unbroadcast(gb, tb))]
            }
            Op::AddBias(m, b) => {
                let c = out.cols();
                let mut gb = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (acc, x) in gb.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                let tb = self.value(*b);
                vec![
                    (*m, g.clone()),
                    (*b, Tensor::new(tb.shape().to_vec(), gb)?),
                ]
            }
            Op::ScaleRows(m, s) => {
                let (tm, ts) = (self.value(*m), self.value(*s));
                let c = tm.cols();
                let mut gm = gd.to_vec();
                let mut gs = vec![0.0; ts.numel()];
                for i in 0..tm.rows() {
                    let f = ts.data()[i];
                    let row = &mut gm[i * c..(i + 1) * c];
                    gs[i] = row.iter().zip(tm.row(i)).map(|(x, y)| x * y).sum();
                    row.iter_mut().for_each(|x| *x *= f);
                }
                vec![
                    (*m, Tensor::new(tm.shape().to_vec(), gm)?),
                    (*s, Tensor::new(ts.shape().to_vec(), gs)?),
                ]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Reshape(a) => vec![(*a, g.reshaped(self.value(*a).shape().to_vec())?)],
            Op::Gather(a, indices) => {
                let ta = self.value(*a);
                let mut ga = vec![0.0; ta.numel()];
                let c = if ta.ndim() == 2 { ta.cols() } else { 1 };
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += gd[k * c + j];
                    }
                }
                vec![(*a, Tensor::new(ta.shape().to_vec(), ga)?)]
            }
            Op::SumRows(a) => {
                let ta = self.value(*a);
                let mut ga = Vec::with_capacity(ta.numel());
                for _ in 0..ta.rows() {
                    ga.extend_from_slice(gd);
                }
                vec![(*a, Tensor::new(ta.shape().to_vec(), ga)?)]
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let ga = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(ta.shape().to_vec(), ga)?)]
            }
            Op::Tanh(a) => {
                let ga = gd.iter().zip(out.data()).map(|(x, y)| x * (1.0 - y * y)).collect();
                vec![(*a, Tensor::new(out.shape().to_vec(), ga)?)]
            }
            Op::Sigmoid(a) => {
                let ga = gd.iter().zip(out.data()).map(|(x, y)| x * y * (1.0 - y)).collect();
                vec![(*a, Tensor::new(out.shape().to_vec(), ga)?)]
            }
            Op::Sqrt(a) => {
                let ga = gd
                    .iter()
                    .zip(out.data())
                    .map(|(x, y)| if *y > 0.0 { x / (2.0 * y) } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(out.shape().to_vec(), ga)?)]
            }
            Op::Softmax(a) => {
                let y = out.data();
                let dot: f64 = gd.iter().zip(y).map(|(g, y)| g * y).sum();
                let ga = gd.iter().zip(y).map(|(g, y)| y * (g - dot)).collect();
                vec![(*a, Tensor::vector(ga))]
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                vec![(*a, Tensor::filled(ta.shape().to_vec(), gd[0]))]
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let n = ta.numel() as f64;
                vec![(*a, Tensor::filled(ta.shape().to_vec(), gd[0] / n))]
            }
            Op::SqL2(a) => {
                let ta = self.value(*a);
                vec![(*a, ta.map(|x| 2.0 * x * gd[0]))]
            }
            Op::Percentile {
                input,
                lo,
                hi,
                frac,
            } => {
                let ta = self.value(*input);
                let mut ga = vec![0.0; ta.numel()];
                ga[*lo] += gd[0] * (1.0 - frac);
                ga[*hi] += gd[0] * frac;
                vec![(*input, Tensor::new(ta.shape().to_vec(), ga)?)]
            }
            Op::MinMax {
                input,
                argmin,
                argmax,
            } => {
                let ta = self.value(*input);
                let d = ta.data();
                let range = d[*argmax] - d[*argmin];
                let mut ga = vec![0.0; ta.numel()];
                if range > 0.0 {
                    // y_i = (x_i - x_min) / r
                    let y = out.data();
                    let mut to_min = 0.0;
                    let mut to_max = 0.0;
                    for i in 0..ga.len() {
                        ga[i] += gd[i] / range;
                        to_min += gd[i] * (y[i] - 1.0) / range;
                        to_max += -gd[i] * y[i] / range;
                    }
                    ga[*argmin] += to_min;
                    ga[*argmax] += to_max;
                }
                vec![(*input, Tensor::new(ta.shape().to_vec(), ga)?)]
            }
            Op::Bce {
                input,
                target,
                clamped,
            } => {
                let p = self.value(*input).item();
                let d = if *clamped {
                    0.0
                } else {
                    (p - target) / (p * (1.0 - p))
                };
                vec![(
                    *input,
                    Tensor::new(self.value(*input).shape().to_vec(), vec![gd[0] * d])?,
                )]
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&vals, out, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Shape(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (v, gi) in inputs.iter().zip(&gs) {
                    if gi.shape() != self.value(*v).shape() {
                        return Err(Error::Shape(format!(
                            "custom op {}: gradient shape {:?} for input shape {:?}",
                            op.name(),
                            gi.shape(),
                            self.value(*v).shape()
                        )));
                    }
                }
                inputs.iter().copied().zip(gs).collect()
            }
        };
        Ok(res)
    }
}

/// Maximum relative error between the tape gradient of `f` at `point` and
/// central finite differences with step `eps`:
/// `max |g − g_fd| / (|g| + |g_fd| + 1e-12)` over coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    if !tape.value(y).is_scalar() {
        return Err(Error::Shape("grad_check needs a scalar function".into()));
    }
    let analytic = tape.backward(y)?.get_or_zeros(x, point);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(p);
        let y = f(&mut t, x)?;
        Ok(t.value(y).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        let mut minus = point.data().to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let fp = eval(Tensor::new(point.shape().to_vec(), plus)?)?;
        let fm = eval(Tensor::new(point.shape().to_vec(), minus)?)?;
        let fd = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / (a.abs() + fd.abs() + 1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(vec![3, 2], &mut rng);
        let w = random(vec![4, 2], &mut rng);
        let a = random(vec![4, 3], &mut rng);
        let err = grad_check(
            |t, x| {
                let bv = t.leaf(b.clone());
                let wv = t.leaf(w.clone());
                let p = t.matmul(x, bv)?;
                let q = t.mul(p, wv)?;
                t.sum(q)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn elementwise_basics() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-3.0, 0.0, 3.0]));
        let r = t.relu(x);
        let s = t.sigmoid(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 3.0]);
        assert_eq!(t.value(s).data()[1], 0.5);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 1.0]));
        let r = t.relu(x);
        let s = t.sum(r).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn tanh_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let p = random(vec![6], &mut rng);
            let err = grad_check(
                |t, x| {
                    let y = t.tanh(x);
                    let z = t.mul(y, x)?;
                    t.sum(z)
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        let s = t.scalar(2.0);
        let c = t.mul(a, s).unwrap();
        assert_eq!(t.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_stability_and_symmetry() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let b = t.leaf(Tensor::vector(vec![1000.0; 3]));
        let sa = t.softmax(a).unwrap();
        let sb = t.softmax(b).unwrap();
        assert_eq!(t.value(sa).data(), &[0.5, 0.5]);
        for &v in t.value(sb).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let e = t.leaf(Tensor::vector(vec![]));
        assert!(t.softmax(e).is_err());
    }

    #[test]
    fn softmax_jacobian_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random(vec![5], &mut rng);
        for j in 0..5 {
            let weights = Tensor::vector((0..5).map(|i| if i == j { 1.0 } else { 0.0 }).collect());
            let err = grad_check(
                |t, x| {
                    let s = t.softmax(x)?;
                    let w = t.leaf(weights.clone());
                    let m = t.mul(s, w)?;
                    t.sum(m)
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "row {j}: {err}");
        }
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum(x).unwrap();
        assert_eq!(t.value(s).item(), 6.0);
        let y = t.leaf(Tensor::vector(vec![3.0, 4.0]));
        let q = t.sq_l2(y).unwrap();
        assert_eq!(t.value(q).item(), 25.0);
        let m = t.mean(x).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0 / 3.0; 3]);
        let e = t.leaf(Tensor::vector(vec![]));
        assert!(t.sum(e).is_err());
    }

    #[test]
    fn mean_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random(vec![7], &mut rng);
        let err = grad_check(|t, x| t.mean(x), &p, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn exact_quadratic_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random(vec![9], &mut rng);
        let err = grad_check(|t, x| t.sq_l2(x), &p, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let p = Tensor::vector(vec![1.0, 2.0]);
        assert!(grad_check(|t, x| Ok(t.tanh(x)), &p, 1e-5).is_err());
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random(vec![4, 3], &mut rng);
        let bias = random(vec![3], &mut rng);
        let scales = random(vec![2], &mut rng);
        let err = grad_check(
            |t, x| {
                let b = t.leaf(bias.clone());
                let s = t.leaf(scales.clone());
                let y = t.add_bias(x, b)?;
                let g = t.gather(y, &[3, 1])?;
                let z = t.scale_rows(g, s)?;
                let tr = t.transpose(z)?;
                let tt = t.tanh(tr);
                let cs = t.sum_rows(tt)?;
                let r = t.reshape(cs, vec![1, 2])?;
                t.sq_l2(r)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn percentile_minmax_div_sqrt_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let p = random(vec![6], &mut rng);
            let err = grad_check(
                |t, x| {
                    let pr = t.percentile(x, 0.75)?;
                    let c = t.sub(x, pr)?;
                    let sq = t.mul(c, c)?;
                    let var = t.mean(sq)?;
                    let sd = t.sqrt(var)?;
                    let sc = t.div(c, sd)?;
                    let mm = t.normalize_minmax(x)?;
                    let prod = t.mul(sc, mm)?;
                    let sg = t.sigmoid(prod);
                    t.sum(sg)
                },
                &p,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn bce_values_and_gradient() {
        let mut t = Tape::new();
        let p = t.scalar(0.5);
        let l = t.bce(p, 1.0).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let q = t.scalar(0.9);
        let l0 = t.bce(q, 0.0).unwrap();
        assert!((t.value(l0).item() - 10f64.ln()).abs() < 1e-12);
        let err = grad_check(|t, x| t.bce(x, 1.0), &Tensor::scalar(0.3), 1e-6).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn backward_accumulates_shared_inputs() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }
}
