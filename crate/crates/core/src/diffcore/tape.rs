use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::{Add, Mul, Neg, Sub};

use super::tensor::{ParameterSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    SumCols(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation graph for one forward pass; rebuilt per minibatch.
///
/// Shape errors inside recorded ops are programming errors and panic;
/// user-facing entry points (`Network::apply`, the model code) validate
/// shapes before recording.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a constant (no gradient is reported for it).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Binds a named parameter. Binding the same name twice returns the
    /// original leaf, so a network applied twice shares its weights.
    pub fn param(&self, name: &str, value: &Tensor) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { tape: self, id };
        }
        let var = self.push(value.clone(), Op::Leaf);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        var
    }

    /// Binds every entry of `params`, returning the leaves by name.
    pub fn bind(&self, params: &ParameterSet) -> HashMap<String, Var<'_>> {
        params
            .iter()
            .map(|(k, v)| (k.clone(), self.param(k, v)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let nodes = self.nodes.borrow();
        let rows = nodes[parts[0].id].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = &nodes[p.id].value;
                assert_eq!(v.shape().len(), 2, "concat_cols needs matrices");
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(nodes[p.id].value.row(r));
            }
        }
        drop(nodes);
        let value = Tensor::new(vec![rows, total], data).expect("concat shape");
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    fn binary(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'_> {
        let nodes = self.nodes.borrow();
        let (va, vb) = (&nodes[a].value, &nodes[b].value);
        assert_eq!(
            va.shape(),
            vb.shape(),
            "elementwise op on mismatched shapes"
        );
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        drop(nodes);
        self.push(value, op)
    }

    fn unary(&self, a: usize, f: impl Fn(f64) -> f64, op: Op) -> Var<'_> {
        let value = self.nodes.borrow()[a].value.map(f);
        self.push(value, op)
    }

    /// Runs the reverse sweep from `root`, which must hold a single value.
    fn backward(&self, root: usize) -> Result<Vec<Option<Tensor>>> {
        let nodes = self.nodes.borrow();
        if nodes[root].value.len() != 1 {
            return Err(Error::shape(format!(
                "gradient needs a scalar loss, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::filled(nodes[root].value.shape(), 1.0));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (n, k, o) = (va.rows(), va.cols(), vb.cols());
                    let mut ga = vec![0.0; n * k];
                    let mut gb = vec![0.0; k * o];
                    let (ad, bd, gd) = (va.data(), vb.data(), g.data());
                    for r in 0..n {
                        let grow = &gd[r * o..(r + 1) * o];
                        for c in 0..k {
                            let brow = &bd[c * o..(c + 1) * o];
                            ga[r * k + c] = dot(grow, brow);
                            axpy(ad[r * k + c], grow, &mut gb[c * o..(c + 1) * o]);
                        }
                    }
                    accumulate(&mut grads, *a, va.shape(), ga);
                    accumulate(&mut grads, *b, vb.shape(), gb);
                }
                Op::AddBias(x, b) => {
                    let o = val(*b).len();
                    let mut gb = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        axpy(1.0, row, &mut gb);
                    }
                    accumulate(&mut grads, *b, val(*b).shape(), gb);
                    accumulate(&mut grads, *x, val(*x).shape(), g.into_data());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec());
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *b, &shape, g.into_data());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.shape(), g.data().iter().map(|v| -v).collect());
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *a, &shape, g.into_data());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = zip_map(g.data(), vb.data(), |g, y| g * y);
                    let gb = zip_map(g.data(), va.data(), |g, x| g * x);
                    accumulate(&mut grads, *a, va.shape(), ga);
                    accumulate(&mut grads, *b, vb.shape(), gb);
                }
                Op::Div(a, b) => {
                    let vb = val(*b);
                    let out = node.value.data();
                    let ga = zip_map(g.data(), vb.data(), |g, y| g / y);
                    let gb: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(out)
                        .zip(vb.data())
                        .map(|((g, q), y)| -g * q / y)
                        .collect();
                    accumulate(&mut grads, *a, vb.shape(), ga);
                    accumulate(&mut grads, *b, vb.shape(), gb);
                }
                Op::Scale(a, c) => {
                    let ga = g.data().iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::AddScalar(a) => {
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *a, &shape, g.into_data());
                }
                Op::Tanh(a) => {
                    let ga = zip_map(g.data(), node.value.data(), |g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::Relu(a) => {
                    let ga = zip_map(g.data(), val(*a).data(), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::Softplus(a) => {
                    let ga = zip_map(g.data(), val(*a).data(), |g, x| g * sigmoid(x));
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(g.data(), node.value.data(), |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::Exp(a) => {
                    let ga = zip_map(g.data(), node.value.data(), |g, y| g * y);
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::Log(a) => {
                    let ga = zip_map(g.data(), val(*a).data(), |g, x| g / x);
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::Square(a) => {
                    let ga = zip_map(g.data(), val(*a).data(), |g, x| 2.0 * g * x);
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = zip_map(g.data(), val(*a).data(), |g, x| {
                        if x >= *lo && x <= *hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::SumCols(a) => {
                    let va = val(*a);
                    let c = va.cols();
                    let ga = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat(v).take(c))
                        .collect();
                    accumulate(&mut grads, *a, va.shape(), ga);
                }
                Op::Sum(a) => {
                    let va = val(*a);
                    accumulate(&mut grads, *a, va.shape(), vec![g.data()[0]; va.len()]);
                }
                Op::Mean(a) => {
                    let va = val(*a);
                    let v = g.data()[0] / va.len() as f64;
                    accumulate(&mut grads, *a, va.shape(), vec![v; va.len()]);
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let vp = val(p);
                        let w = vp.cols();
                        let mut gp = Vec::with_capacity(vp.len());
                        for row in g.data().chunks(total) {
                            gp.extend_from_slice(&row[offset..offset + w]);
                        }
                        accumulate(&mut grads, p, vp.shape(), gp);
                        offset += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let va = val(*a);
                    let c = va.cols();
                    let w = end - start;
                    let mut ga = vec![0.0; va.len()];
                    for (r, row) in g.data().chunks(w).enumerate() {
                        ga[r * c + start..r * c + end].copy_from_slice(row);
                    }
                    accumulate(&mut grads, *a, va.shape(), ga);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, shape: &[usize], g: Vec<f64>) {
    match &mut grads[id] {
        Some(t) => {
            for (acc, v) in t.data_mut().iter_mut().zip(g) {
                *acc += v;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape")),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the recorded forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Reads a one-element value.
    pub fn item(&self) -> Result<f64> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn is_finite(&self) -> bool {
        self.tape.nodes.borrow()[self.id].value.is_finite()
    }

    /// `[n, k] x [k, o] -> [n, o]`.
    pub fn matmul(self, w: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let (x, wt) = (&nodes[self.id].value, &nodes[w.id].value);
        assert_eq!(x.shape().len(), 2, "matmul lhs must be a matrix");
        assert_eq!(wt.shape().len(), 2, "matmul rhs must be a matrix");
        let (n, k, o) = (x.rows(), x.cols(), wt.cols());
        assert_eq!(wt.rows(), k, "matmul inner dimension mismatch");
        let mut out = vec![0.0; n * o];
        let (xd, wd) = (x.data(), wt.data());
        for r in 0..n {
            let orow = &mut out[r * o..(r + 1) * o];
            for c in 0..k {
                axpy(xd[r * k + c], &wd[c * o..(c + 1) * o], orow);
            }
        }
        drop(nodes);
        let value = Tensor::new(vec![n, o], out).expect("matmul shape");
        self.tape.push(value, Op::MatMul(self.id, w.id))
    }

    /// Adds a `[o]` bias to every row of a `[n, o]` matrix.
    pub fn add_bias(self, b: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let (x, bt) = (&nodes[self.id].value, &nodes[b.id].value);
        let o = bt.len();
        assert_eq!(x.cols(), o, "bias width mismatch");
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(o) {
            axpy(1.0, bt.data(), row);
        }
        let value = Tensor::new(x.shape().to_vec(), data).expect("bias shape");
        drop(nodes);
        self.tape.push(value, Op::AddBias(self.id, b.id))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, other.id, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a + c, Op::AddScalar(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, f64::tanh, Op::Tanh(self.id))
    }

    /// Rectifier; the subgradient at exactly 0 is 0.
    pub fn relu(self) -> Var<'t> {
        self.tape
            .unary(self.id, |a| if a > 0.0 { a } else { 0.0 }, Op::Relu(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self.id, softplus, Op::Softplus(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, sigmoid, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, f64::ln, Op::Log(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a * a, Op::Square(self.id))
    }

    /// Clamps to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape
            .unary(self.id, |a| a.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    /// Per-row sum over the last dimension: `[n, d] -> [n]`.
    pub fn sum_cols(self) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id].value;
        let c = x.cols();
        let data: Vec<f64> = x.data().chunks(c).map(|r| r.iter().sum()).collect();
        drop(nodes);
        self.tape.push(Tensor::vector(data), Op::SumCols(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.tape.nodes.borrow()[self.id].value.sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (s, n) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            (v.sum(), v.len())
        };
        self.tape
            .push(Tensor::scalar(s / n as f64), Op::Mean(self.id))
    }

    /// Columns `start..end` of a `[n, d]` matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id].value;
        let c = x.cols();
        assert!(start < end && end <= c, "slice {start}..{end} out of {c}");
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for row in x.data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::new(vec![x.rows(), end - start], data).expect("slice shape");
        drop(nodes);
        self.tape.push(value, Op::SliceCols(self.id, start, end))
    }

    /// Reverse sweep from this scalar.
    pub fn backward(self) -> Result<Gradients> {
        let grads = self.tape.backward(self.id)?;
        Ok(Gradients {
            grads,
            params: self.tape.params.borrow().clone(),
        })
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, |a, b| a + b, Op::Add(self.id, rhs.id))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, |a, b| a - b, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, |a, b| a * b, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, usize>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` if it does not reach the loss.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradients for every entry of `params`, keyed and shaped the same.
    ///
    /// Parameters that were never bound, or that do not influence the loss,
    /// get an all-zero gradient rather than an error.
    pub fn for_params(&self, params: &ParameterSet) -> ParameterSet {
        params
            .iter()
            .map(|(name, value)| {
                let g = self
                    .params
                    .get(name)
                    .and_then(|&id| self.grads.get(id))
                    .and_then(Option::as_ref)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Exact reverse-mode gradient of a recorded scalar with respect to `params`.
pub fn gradient(loss: Var<'_>, params: &ParameterSet) -> Result<ParameterSet> {
    Ok(loss.backward()?.for_params(params))
}

/// Compares analytic gradients against central finite differences.
///
/// `loss_fn` records the loss for a given parameter set on a fresh tape; it
/// must bind parameters by the names used in `params`. Returns the maximum
/// over coordinates of `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn fd_check<F>(loss_fn: F, params: &ParameterSet, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParameterSet) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let analytic = {
        let tape = Tape::new();
        let loss = loss_fn(&tape, params)?;
        if !loss.is_finite() {
            return Err(Error::non_finite("loss at base point"));
        }
        gradient(loss, params)?
    };
    let eval = |p: &ParameterSet| -> Result<f64> {
        let tape = Tape::new();
        let v = loss_fn(&tape, p)?.item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::non_finite("loss during finite differencing"))
        }
    };

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        let n = params.get(name).map_or(0, Tensor::len);
        for i in 0..n {
            let orig = params.get(name).expect("known name").data()[i];
            probe.get_mut(name).expect("known name").data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("known name").data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("known name").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(name).expect("same keys").data()[i];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
    }
    Ok(worst)
}
