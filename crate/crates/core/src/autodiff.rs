//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is define-by-run: each loss evaluation records primitive
//! operations on a fresh [`Tape`], and [`Tape::backward`] replays the tape in
//! reverse to accumulate exact gradients for every reachable leaf. Tensors
//! are immutable once recorded; a tape is single-threaded, but independent
//! tapes over distinct parameter copies may run concurrently.
//!
//! Conventions fixed here for reproducibility:
//! - everything is 64-bit,
//! - GELU uses the exact erf form (not the tanh approximation),
//! - the relu subgradient at 0 is 0.

use crate::tensor::Tensor;
use crate::{Error, Result};
use std::cell::RefCell;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => gelu(x),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => gelu_deriv(x),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Linear => 1.0,
        }
    }

    /// Lipschitz factor used in layer-product upper bounds: relu and tanh
    /// are 1-Lipschitz; gelu's derivative peaks at ~1.129 so a 1.13 factor
    /// keeps the bound valid.
    pub fn lipschitz_factor(self) -> f64 {
        match self {
            Activation::Gelu => 1.13,
            _ => 1.0,
        }
    }
}

/// Error function accurate to f64 precision: Maclaurin series on |x| <= 2,
/// complementary continued fraction beyond.
pub fn erf(x: f64) -> f64 {
    let ax = x.abs();
    if ax > 6.5 {
        return x.signum();
    }
    if ax <= 2.0 {
        // erf(x) = 2/sqrt(pi) * sum_k (-1)^k x^(2k+1) / (k! (2k+1))
        let x2 = x * x;
        let mut term = x;
        let mut sum = x;
        let mut k = 0usize;
        loop {
            k += 1;
            term *= -x2 / k as f64;
            let add = term / (2 * k + 1) as f64;
            sum += add;
            if add.abs() < 1e-18 * sum.abs().max(1e-300) {
                break;
            }
        }
        return sum * 2.0 / std::f64::consts::PI.sqrt();
    }
    // erfc(ax) sqrt(pi) exp(ax^2) = 1/(ax + (1/2)/(ax + 1/(ax + (3/2)/(ax + ...))))
    let mut tail = 0.0_f64;
    for k in (1..=80).rev() {
        tail = (k as f64 / 2.0) / (ax + tail);
    }
    let erfc = (-ax * ax).exp() / std::f64::consts::PI.sqrt() / (ax + tail);
    (1.0 - erfc) * x.signum()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// y = x W^T + b with x: [n,i] (or [i]), W: [o,i], b: [o].
    Affine { x: usize, w: usize, b: usize },
    /// y = x W with x: [n,o] (or [o]), W: [o,i]; no bias.
    MatMul { x: usize, w: usize },
    /// Circular 1-D convolution: x [ci,m], w [co,ci,2r+1], b [co] -> [co,m].
    ConvCirc { x: usize, w: usize, b: usize },
    Activation { x: usize, kind: Activation },
    Mse { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddConst { x: usize },
    Neg { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    Square { x: usize },
    Sqrt { x: usize },
    Exp { x: usize },
    Softplus { x: usize, beta: f64 },
    MulScalar { x: usize, s: usize },
    DivScalar { x: usize, s: usize },
    /// C_ij = ||x_i - y_j||_2^p, x: [n,d], y: [m,d].
    PairwiseCost { x: usize, y: usize, p: f64 },
    LogSumExpRows { x: usize },
    LogSumExpCols { x: usize },
    /// M[n,m] + v[m] broadcast over rows.
    AddRowVec { m: usize, v: usize },
    /// M[n,m] + v[n] broadcast over columns.
    AddColVec { m: usize, v: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    Reshape { x: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded gradients, indexed by the [`Var`] they belong to.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when unreachable from the root.
    pub fn wrt_or_zero(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.wrt(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Operation tape. Nodes are appended in topological order by construction.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    /// y = x W^T + b. Accepts a single input vector [i] or a batch [n,i].
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
        if wv.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "affine weight must be a matrix, got {:?}",
                wv.shape()
            )));
        }
        let (o, i) = (wv.shape()[0], wv.shape()[1]);
        if xv.cols() != i || bv.len() != o {
            return Err(Error::Dimension(format!(
                "affine shapes do not conform: x {:?}, W {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let n = xv.rows();
        // transposed weight once per call keeps the inner loops contiguous
        let mut wt = vec![0.0; i * o];
        for c in 0..o {
            let wrow = wv.row(c);
            for k in 0..i {
                wt[k * o + c] = wrow[k];
            }
        }
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let xrow = xv.row(r);
            let orow = &mut out[r * o..(r + 1) * o];
            orow.copy_from_slice(bv.data());
            for (k, &xk) in xrow.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let wtrow = &wt[k * o..(k + 1) * o];
                for (oc, &wv) in orow.iter_mut().zip(wtrow) {
                    *oc += xk * wv;
                }
            }
        }
        let shape = if xv.shape().len() == 1 {
            vec![o]
        } else {
            vec![n, o]
        };
        drop(nodes);
        Ok(self.push(Tensor::raw(shape, out), Op::Affine { x: x.0, w: w.0, b: b.0 }))
    }

    /// y = x W, with x: [n,o] (or [o]) and W: [o,i].
    pub fn matmul(&self, x: Var, w: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
        let (o, i) = (wv.shape()[0], wv.shape()[1]);
        if xv.cols() != o {
            return Err(Error::Dimension(format!(
                "matmul shapes do not conform: x {:?}, W {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let n = xv.rows();
        let mut out = vec![0.0; n * i];
        for r in 0..n {
            let xrow = xv.row(r);
            let orow = &mut out[r * i..(r + 1) * i];
            for (k, &xk) in xrow.iter().enumerate() {
                if xk == 0.0 {
                    continue;
                }
                let wrow = wv.row(k);
                for c in 0..i {
                    orow[c] += xk * wrow[c];
                }
            }
        }
        let shape = if xv.shape().len() == 1 {
            vec![i]
        } else {
            vec![n, i]
        };
        drop(nodes);
        Ok(self.push(Tensor::raw(shape, out), Op::MatMul { x: x.0, w: w.0 }))
    }

    /// Multi-channel circular convolution. x: [ci,m] or [m], w: [co,ci,2r+1],
    /// b: [co]; output [co,m] (or [m] when co = ci = 1 and x was a vector).
    pub fn conv_circ(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
        if wv.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "conv weight must be [co,ci,k], got {:?}",
                wv.shape()
            )));
        }
        let (co, ci, kk) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if kk % 2 == 0 {
            return Err(Error::Dimension("conv kernel length must be odd".into()));
        }
        let vec_in = xv.shape().len() == 1;
        let (xc, m) = if vec_in {
            (1, xv.shape()[0])
        } else {
            (xv.shape()[0], xv.shape()[1])
        };
        if xc != ci || bv.len() != co {
            return Err(Error::Dimension(format!(
                "conv shapes do not conform: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        if m < kk {
            return Err(Error::Dimension(format!(
                "kernel ({kk}) longer than signal ({m})"
            )));
        }
        let r = (kk - 1) / 2;
        let mut out = vec![0.0; co * m];
        for oc in 0..co {
            let orow = &mut out[oc * m..(oc + 1) * m];
            for ic in 0..ci {
                let xrow = &xv.data()[ic * m..(ic + 1) * m];
                let ker = &wv.data()[(oc * ci + ic) * kk..(oc * ci + ic + 1) * kk];
                for (j, &kj) in ker.iter().enumerate() {
                    conv_tap_add(orow, xrow, kj, (m + r - j) % m);
                }
            }
            let bias = bv.data()[oc];
            for v in orow.iter_mut() {
                *v += bias;
            }
        }
        let shape = if vec_in && co == 1 {
            vec![m]
        } else {
            vec![co, m]
        };
        drop(nodes);
        Ok(self.push(Tensor::raw(shape, out), Op::ConvCirc { x: x.0, w: w.0, b: b.0 }))
    }

    /// Single-channel circular convolution y_i = sum_j k_j x_{(i+j-r) mod m},
    /// differentiable with respect to both the signal and the kernel.
    pub fn circular_conv1d(&self, x: Var, k: Var) -> Result<Var> {
        let klen = self.nodes.borrow()[k.0].value.len();
        let kw = self.reshape(k, vec![1, 1, klen]);
        let zero = self.leaf(Tensor::zeros(vec![1]));
        self.conv_circ(x, kw, zero)
    }

    pub fn activation(&self, x: Var, kind: Activation) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let out: Vec<f64> = xv.data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::raw(xv.shape().to_vec(), out);
        drop(nodes);
        self.push(t, Op::Activation { x: x.0, kind })
    }

    /// Mean over all entries of (a - b)^2.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "mse shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = av.len() as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        drop(nodes);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { a: a.0, b: b.0 }))
    }

    fn binary_elemwise(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::raw(av.shape().to_vec(), out);
        drop(nodes);
        self.push(t, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_elemwise(a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_elemwise(a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_elemwise(a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let out: Vec<f64> = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::raw(xv.shape().to_vec(), out);
        drop(nodes);
        self.push(t, op)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale { x: x.0, c })
    }

    pub fn add_const(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddConst { x: x.0 })
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg { x: x.0 })
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square { x: x.0 })
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt { x: x.0 })
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp { x: x.0 })
    }

    /// Numerically stable S_beta(x) = log(1 + exp(beta x)) / beta.
    pub fn softplus(&self, x: Var, beta: f64) -> Var {
        assert!(beta > 0.0);
        self.unary(x, |v| softplus_stable(v, beta), Op::Softplus { x: x.0, beta })
    }

    pub fn sum(&self, x: Var) -> Var {
        let s: f64 = self.nodes.borrow()[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 })
    }

    pub fn mean(&self, x: Var) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let s: f64 = xv.data().iter().sum::<f64>() / xv.len() as f64;
        drop(nodes);
        self.push(Tensor::scalar(s), Op::Mean { x: x.0 })
    }

    /// Tensor times a scalar node (broadcast).
    pub fn mul_scalar(&self, x: Var, s: Var) -> Var {
        let nodes = self.nodes.borrow();
        let sv = nodes[s.0].value.item();
        let xv = &nodes[x.0].value;
        let out: Vec<f64> = xv.data().iter().map(|&v| v * sv).collect();
        let t = Tensor::raw(xv.shape().to_vec(), out);
        drop(nodes);
        self.push(t, Op::MulScalar { x: x.0, s: s.0 })
    }

    /// Tensor divided by a scalar node (broadcast).
    pub fn div_scalar(&self, x: Var, s: Var) -> Var {
        let nodes = self.nodes.borrow();
        let sv = nodes[s.0].value.item();
        let xv = &nodes[x.0].value;
        let out: Vec<f64> = xv.data().iter().map(|&v| v / sv).collect();
        let t = Tensor::raw(xv.shape().to_vec(), out);
        drop(nodes);
        self.push(t, Op::DivScalar { x: x.0, s: s.0 })
    }

    /// C_ij = ||x_i - y_j||^p for point matrices x: [n,d], y: [m,d].
    pub fn pairwise_cost(&self, x: Var, y: Var, p: f64) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xv, yv) = (&nodes[x.0].value, &nodes[y.0].value);
        if xv.cols() != yv.cols() {
            return Err(Error::Dimension(format!(
                "point dimensions differ: {} vs {}",
                xv.cols(),
                yv.cols()
            )));
        }
        if p < 1.0 {
            return Err(Error::InvalidValue(format!("cost exponent p = {p} < 1")));
        }
        let (n, m, d) = (xv.rows(), yv.rows(), xv.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xi = xv.row(i);
            for j in 0..m {
                let yj = yv.row(j);
                let mut sq = 0.0;
                for k in 0..d {
                    let dk = xi[k] - yj[k];
                    sq += dk * dk;
                }
                out[i * m + j] = if p == 2.0 { sq } else { sq.sqrt().powf(p) };
            }
        }
        drop(nodes);
        Ok(self.push(
            Tensor::raw(vec![n, m], out),
            Op::PairwiseCost { x: x.0, y: y.0, p },
        ))
    }

    pub fn logsumexp_rows(&self, x: Var) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let n = xv.rows();
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = logsumexp(xv.row(i));
        }
        drop(nodes);
        self.push(Tensor::raw(vec![n], out), Op::LogSumExpRows { x: x.0 })
    }

    pub fn logsumexp_cols(&self, x: Var) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let (n, m) = (xv.rows(), xv.cols());
        let mut maxes = vec![f64::NEG_INFINITY; m];
        for i in 0..n {
            for (j, &v) in xv.row(i).iter().enumerate() {
                maxes[j] = maxes[j].max(v);
            }
        }
        let mut sums = vec![0.0; m];
        for i in 0..n {
            for (j, &v) in xv.row(i).iter().enumerate() {
                sums[j] += (v - maxes[j]).exp();
            }
        }
        let out: Vec<f64> = sums
            .iter()
            .zip(&maxes)
            .map(|(&s, &mx)| mx + s.ln())
            .collect();
        drop(nodes);
        self.push(Tensor::raw(vec![m], out), Op::LogSumExpCols { x: x.0 })
    }

    /// M[n,m] + v[m], broadcast over rows.
    pub fn add_row_vec(&self, m: Var, v: Var) -> Var {
        let nodes = self.nodes.borrow();
        let (mv, vv) = (&nodes[m.0].value, &nodes[v.0].value);
        assert_eq!(mv.cols(), vv.len(), "row vector length mismatch");
        let cols = mv.cols();
        let mut out = mv.data().to_vec();
        for (idx, o) in out.iter_mut().enumerate() {
            *o += vv.data()[idx % cols];
        }
        let t = Tensor::raw(mv.shape().to_vec(), out);
        drop(nodes);
        self.push(t, Op::AddRowVec { m: m.0, v: v.0 })
    }

    /// M[n,m] + v[n], broadcast over columns.
    pub fn add_col_vec(&self, m: Var, v: Var) -> Var {
        let nodes = self.nodes.borrow();
        let (mv, vv) = (&nodes[m.0].value, &nodes[v.0].value);
        assert_eq!(mv.rows(), vv.len(), "col vector length mismatch");
        let cols = mv.cols();
        let mut out = mv.data().to_vec();
        for (idx, o) in out.iter_mut().enumerate() {
            *o += vv.data()[idx / cols];
        }
        let t = Tensor::raw(mv.shape().to_vec(), out);
        drop(nodes);
        self.push(t, Op::AddColVec { m: m.0, v: v.0 })
    }

    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        let c = xv.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::raw(vec![idx.len(), c], out);
        drop(nodes);
        self.push(
            t,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        )
    }

    /// Stack matrices (or row vectors) with identical column counts.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let nodes = self.nodes.borrow();
        let c = nodes[parts[0].0].value.cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = &nodes[p.0].value;
            assert_eq!(pv.cols(), c, "concat column mismatch");
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let t = Tensor::raw(vec![rows, c], out);
        drop(nodes);
        self.push(
            t,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    /// Concatenate matrices (or column vectors) side by side; all parts must
    /// share the row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let nodes = self.nodes.borrow();
        let n = nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let pv = &nodes[p.0].value;
                assert_eq!(pv.rows(), n, "concat_cols row mismatch");
                pv.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = &nodes[p.0].value;
            for r in 0..n {
                out[r * total + offset..r * total + offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let t = Tensor::raw(vec![n, total], out);
        drop(nodes);
        self.push(
            t,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Var {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            xv.len(),
            "reshape size mismatch"
        );
        let t = Tensor::raw(shape, xv.data().to_vec());
        drop(nodes);
        self.push(t, Op::Reshape { x: x.0 })
    }

    /// Reverse accumulation from a scalar root. Leaves unreachable from the
    /// root have no gradient entry (see [`Gradients::wrt_or_zero`]).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let xv = &nodes[*x].value;
                    let wv = &nodes[*w].value;
                    let (o, i) = (wv.shape()[0], wv.shape()[1]);
                    let n = xv.rows();
                    let gx = ensure(&mut grads, *x, xv.shape());
                    for r in 0..n {
                        let grow = &g.data()[r * o..(r + 1) * o];
                        let gxrow = &mut gx.data_mut()[r * i..(r + 1) * i];
                        for (c, &gc) in grow.iter().enumerate() {
                            if gc == 0.0 {
                                continue;
                            }
                            let wrow = wv.row(c);
                            for k in 0..i {
                                gxrow[k] += gc * wrow[k];
                            }
                        }
                    }
                    let gw = ensure(&mut grads, *w, wv.shape());
                    for r in 0..n {
                        let xrow = xv.row(r);
                        let grow = &g.data()[r * o..(r + 1) * o];
                        for (c, &gc) in grow.iter().enumerate() {
                            if gc == 0.0 {
                                continue;
                            }
                            let gwrow = &mut gw.data_mut()[c * i..(c + 1) * i];
                            for k in 0..i {
                                gwrow[k] += gc * xrow[k];
                            }
                        }
                    }
                    let gb = ensure(&mut grads, *b, &[o]);
                    for r in 0..n {
                        let grow = &g.data()[r * o..(r + 1) * o];
                        for (c, &gc) in grow.iter().enumerate() {
                            gb.data_mut()[c] += gc;
                        }
                    }
                }
                Op::MatMul { x, w } => {
                    let xv = &nodes[*x].value;
                    let wv = &nodes[*w].value;
                    let (o, i) = (wv.shape()[0], wv.shape()[1]);
                    let n = xv.rows();
                    let gx = ensure(&mut grads, *x, xv.shape());
                    for r in 0..n {
                        let grow = &g.data()[r * i..(r + 1) * i];
                        let gxrow = &mut gx.data_mut()[r * o..(r + 1) * o];
                        for (k, gk) in gxrow.iter_mut().enumerate() {
                            let wrow = wv.row(k);
                            let mut acc = 0.0;
                            for c in 0..i {
                                acc += grow[c] * wrow[c];
                            }
                            *gk += acc;
                        }
                    }
                    let gw = ensure(&mut grads, *w, wv.shape());
                    for r in 0..n {
                        let xrow = xv.row(r);
                        let grow = &g.data()[r * i..(r + 1) * i];
                        for (k, &xk) in xrow.iter().enumerate() {
                            if xk == 0.0 {
                                continue;
                            }
                            let gwrow = &mut gw.data_mut()[k * i..(k + 1) * i];
                            for c in 0..i {
                                gwrow[c] += xk * grow[c];
                            }
                        }
                    }
                }
                Op::ConvCirc { x, w, b } => {
                    let xv = &nodes[*x].value;
                    let wv = &nodes[*w].value;
                    let (co, ci, kk) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                    let m = if xv.shape().len() == 1 {
                        xv.shape()[0]
                    } else {
                        xv.shape()[1]
                    };
                    let r = (kk - 1) / 2;
                    {
                        let gx = ensure(&mut grads, *x, xv.shape());
                        for oc in 0..co {
                            let grow = &g.data()[oc * m..(oc + 1) * m];
                            for ic in 0..ci {
                                let ker = &wv.data()[(oc * ci + ic) * kk..(oc * ci + ic + 1) * kk];
                                let gxrow = &mut gx.data_mut()[ic * m..(ic + 1) * m];
                                for (j, &kj) in ker.iter().enumerate() {
                                    conv_tap_add(gxrow, grow, kj, (j + m - r) % m);
                                }
                            }
                        }
                    }
                    {
                        let gw = ensure(&mut grads, *w, wv.shape());
                        for oc in 0..co {
                            let grow = &g.data()[oc * m..(oc + 1) * m];
                            for ic in 0..ci {
                                let xrow = &xv.data()[ic * m..(ic + 1) * m];
                                let gker =
                                    &mut gw.data_mut()[(oc * ci + ic) * kk..(oc * ci + ic + 1) * kk];
                                for (j, gk) in gker.iter_mut().enumerate() {
                                    *gk += conv_tap_dot(grow, xrow, (m + r - j) % m);
                                }
                            }
                        }
                    }
                    let gb = ensure(&mut grads, *b, &[co]);
                    for oc in 0..co {
                        let grow = &g.data()[oc * m..(oc + 1) * m];
                        gb.data_mut()[oc] += grow.iter().sum::<f64>();
                    }
                }
                Op::Activation { x, kind } => {
                    let xv = &nodes[*x].value;
                    let kind = *kind;
                    let gx = ensure(&mut grads, *x, xv.shape());
                    for ((gd, &xd), &gu) in
                        gx.data_mut().iter_mut().zip(xv.data()).zip(g.data())
                    {
                        *gd += gu * kind.deriv(xd);
                    }
                }
                Op::Mse { a, b } => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let n = av.len() as f64;
                    let gs = g.item() * 2.0 / n;
                    {
                        let ga = ensure(&mut grads, *a, av.shape());
                        for ((gd, &x), &y) in ga.data_mut().iter_mut().zip(av.data()).zip(bv.data())
                        {
                            *gd += gs * (x - y);
                        }
                    }
                    let gb = ensure(&mut grads, *b, bv.shape());
                    for ((gd, &x), &y) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *gd -= gs * (x - y);
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.data(), &nodes);
                    accumulate(&mut grads, *b, g.data(), &nodes);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *a, g.data(), &nodes);
                    let gb = ensure(&mut grads, *b, nodes[*b].value.shape());
                    for (gd, &gu) in gb.data_mut().iter_mut().zip(g.data()) {
                        *gd -= gu;
                    }
                }
                Op::Mul { a, b } => {
                    let av = nodes[*a].value.clone();
                    let bv = nodes[*b].value.clone();
                    {
                        let ga = ensure(&mut grads, *a, av.shape());
                        for ((gd, &y), &gu) in ga.data_mut().iter_mut().zip(bv.data()).zip(g.data())
                        {
                            *gd += gu * y;
                        }
                    }
                    let gb = ensure(&mut grads, *b, bv.shape());
                    for ((gd, &x), &gu) in gb.data_mut().iter_mut().zip(av.data()).zip(g.data()) {
                        *gd += gu * x;
                    }
                }
                Op::Scale { x, c } => {
                    let gx = ensure(&mut grads, *x, nodes[*x].value.shape());
                    for (gd, &gu) in gx.data_mut().iter_mut().zip(g.data()) {
                        *gd += gu * c;
                    }
                }
                Op::AddConst { x } => {
                    accumulate(&mut grads, *x, g.data(), &nodes);
                }
                Op::Neg { x } => {
                    let gx = ensure(&mut grads, *x, nodes[*x].value.shape());
                    for (gd, &gu) in gx.data_mut().iter_mut().zip(g.data()) {
                        *gd -= gu;
                    }
                }
                Op::Sum { x } => {
                    let gu = g.item();
                    let gx = ensure(&mut grads, *x, nodes[*x].value.shape());
                    for gd in gx.data_mut() {
                        *gd += gu;
                    }
                }
                Op::Mean { x } => {
                    let n = nodes[*x].value.len() as f64;
                    let gu = g.item() / n;
                    let gx = ensure(&mut grads, *x, nodes[*x].value.shape());
                    for gd in gx.data_mut() {
                        *gd += gu;
                    }
                }
                Op::Square { x } => {
                    let xv = nodes[*x].value.clone();
                    let gx = ensure(&mut grads, *x, xv.shape());
                    for ((gd, &xd), &gu) in gx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                        *gd += gu * 2.0 * xd;
                    }
                }
                Op::Sqrt { x } => {
                    let yv = node.value.clone();
                    let gx = ensure(&mut grads, *x, nodes[*x].value.shape());
                    for ((gd, &yd), &gu) in gx.data_mut().iter_mut().zip(yv.data()).zip(g.data()) {
                        *gd += gu * 0.5 / yd;
                    }
                }
                Op::Exp { x } => {
                    let yv = node.value.clone();
                    let gx = ensure(&mut grads, *x, nodes[*x].value.shape());
                    for ((gd, &yd), &gu) in gx.data_mut().iter_mut().zip(yv.data()).zip(g.data()) {
                        *gd += gu * yd;
                    }
                }
                Op::Softplus { x, beta } => {
                    let xv = nodes[*x].value.clone();
                    let beta = *beta;
                    let gx = ensure(&mut grads, *x, xv.shape());
                    for ((gd, &xd), &gu) in gx.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                        *gd += gu * sigmoid(beta * xd);
                    }
                }
                Op::MulScalar { x, s } => {
                    let sv = nodes[*s].value.item();
                    let xv = nodes[*x].value.clone();
                    {
                        let gx = ensure(&mut grads, *x, xv.shape());
                        for (gd, &gu) in gx.data_mut().iter_mut().zip(g.data()) {
                            *gd += gu * sv;
                        }
                    }
                    let gs = ensure(&mut grads, *s, &[1]);
                    gs.data_mut()[0] += g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gu, &xd)| gu * xd)
                        .sum::<f64>();
                }
                Op::DivScalar { x, s } => {
                    let sv = nodes[*s].value.item();
                    let xv = nodes[*x].value.clone();
                    {
                        let gx = ensure(&mut grads, *x, xv.shape());
                        for (gd, &gu) in gx.data_mut().iter_mut().zip(g.data()) {
                            *gd += gu / sv;
                        }
                    }
                    let gs = ensure(&mut grads, *s, &[1]);
                    gs.data_mut()[0] -= g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gu, &xd)| gu * xd)
                        .sum::<f64>()
                        / (sv * sv);
                }
                Op::PairwiseCost { x, y, p } => {
                    let xv = nodes[*x].value.clone();
                    let yv = nodes[*y].value.clone();
                    let (n, m, d) = (xv.rows(), yv.rows(), xv.cols());
                    let p = *p;
                    let mut gxbuf = vec![0.0; n * d];
                    let mut gybuf = vec![0.0; m * d];
                    for i in 0..n {
                        let xi = xv.row(i);
                        for j in 0..m {
                            let gij = g.data()[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let yj = yv.row(j);
                            // dC/d(x_i) = p * D^(p-2) * (x_i - y_j)
                            let factor = if p == 2.0 {
                                2.0
                            } else {
                                let mut sq = 0.0;
                                for k in 0..d {
                                    let dk = xi[k] - yj[k];
                                    sq += dk * dk;
                                }
                                let dist = sq.sqrt();
                                if dist < 1e-300 {
                                    0.0
                                } else {
                                    p * dist.powf(p - 2.0)
                                }
                            };
                            for k in 0..d {
                                let dk = xi[k] - yj[k];
                                gxbuf[i * d + k] += gij * factor * dk;
                                gybuf[j * d + k] -= gij * factor * dk;
                            }
                        }
                    }
                    add_into(&mut grads, *x, xv.shape(), &gxbuf);
                    add_into(&mut grads, *y, yv.shape(), &gybuf);
                }
                Op::LogSumExpRows { x } => {
                    let xv = nodes[*x].value.clone();
                    let (n, m) = (xv.rows(), xv.cols());
                    let gx = ensure(&mut grads, *x, xv.shape());
                    for i in 0..n {
                        let gi = g.data()[i];
                        if gi == 0.0 {
                            continue;
                        }
                        let row = xv.row(i);
                        let lse = node.value.data()[i];
                        let grow = &mut gx.data_mut()[i * m..(i + 1) * m];
                        for (j, &v) in row.iter().enumerate() {
                            grow[j] += gi * (v - lse).exp();
                        }
                    }
                }
                Op::LogSumExpCols { x } => {
                    let xv = nodes[*x].value.clone();
                    let (n, m) = (xv.rows(), xv.cols());
                    let gx = ensure(&mut grads, *x, xv.shape());
                    for i in 0..n {
                        let row = xv.row(i);
                        let grow = &mut gx.data_mut()[i * m..(i + 1) * m];
                        for (j, &v) in row.iter().enumerate() {
                            let gj = g.data()[j];
                            if gj == 0.0 {
                                continue;
                            }
                            let lse = node.value.data()[j];
                            grow[j] += gj * (v - lse).exp();
                        }
                    }
                }
                Op::AddRowVec { m, v } => {
                    accumulate(&mut grads, *m, g.data(), &nodes);
                    let cols = nodes[*m].value.cols();
                    let gv = ensure(&mut grads, *v, nodes[*v].value.shape());
                    for (idx, &gu) in g.data().iter().enumerate() {
                        gv.data_mut()[idx % cols] += gu;
                    }
                }
                Op::AddColVec { m, v } => {
                    accumulate(&mut grads, *m, g.data(), &nodes);
                    let cols = nodes[*m].value.cols();
                    let gv = ensure(&mut grads, *v, nodes[*v].value.shape());
                    for (idx, &gu) in g.data().iter().enumerate() {
                        gv.data_mut()[idx / cols] += gu;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let c = nodes[*x].value.cols();
                    let gx = ensure(&mut grads, *x, nodes[*x].value.shape());
                    for (r, &src) in idx.iter().enumerate() {
                        let grow = &g.data()[r * c..(r + 1) * c];
                        let dst = &mut gx.data_mut()[src * c..(src + 1) * c];
                        for (d, &gu) in dst.iter_mut().zip(grow) {
                            *d += gu;
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.len();
                        let slice = &g.data()[offset..offset + len];
                        accumulate(&mut grads, p, slice, &nodes);
                        offset += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let n = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.cols();
                        let shape = nodes[p].value.shape().to_vec();
                        let gx = ensure(&mut grads, p, &shape);
                        for r in 0..n {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            let dst = &mut gx.data_mut()[r * w..(r + 1) * w];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        offset += w;
                    }
                }
                Op::Reshape { x } => {
                    accumulate(&mut grads, *x, g.data(), &nodes);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// y[t] += k * x[(t + shift) mod m], split into two contiguous runs.
#[inline]
pub(crate) fn conv_tap_add(y: &mut [f64], x: &[f64], k: f64, shift: usize) {
    if k == 0.0 {
        return;
    }
    let m = y.len();
    let split = m - shift;
    for (yt, xt) in y[..split].iter_mut().zip(&x[shift..]) {
        *yt += k * xt;
    }
    for (yt, xt) in y[split..].iter_mut().zip(&x[..shift]) {
        *yt += k * xt;
    }
}

/// sum_t y[t] * x[(t + shift) mod m], split into two contiguous runs.
#[inline]
pub(crate) fn conv_tap_dot(y: &[f64], x: &[f64], shift: usize) -> f64 {
    let m = y.len();
    let split = m - shift;
    let mut acc = 0.0;
    for (yt, xt) in y[..split].iter().zip(&x[shift..]) {
        acc += yt * xt;
    }
    for (yt, xt) in y[split..].iter().zip(&x[..shift]) {
        acc += yt * xt;
    }
    acc
}

fn ensure<'a>(grads: &'a mut [Option<Tensor>], id: usize, shape: &[usize]) -> &'a mut Tensor {
    if grads[id].is_none() {
        grads[id] = Some(Tensor::zeros(shape.to_vec()));
    }
    grads[id].as_mut().unwrap()
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, gu: &[f64], nodes: &[Node]) {
    let gx = ensure(grads, id, nodes[id].value.shape());
    for (gd, &u) in gx.data_mut().iter_mut().zip(gu) {
        *gd += u;
    }
}

fn add_into(grads: &mut [Option<Tensor>], id: usize, shape: &[usize], buf: &[f64]) {
    let gx = ensure(grads, id, shape);
    for (gd, &u) in gx.data_mut().iter_mut().zip(buf) {
        *gd += u;
    }
}

fn logsumexp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx.is_infinite() {
        return mx;
    }
    mx + v.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
}

fn softplus_stable(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        x + (-bx).exp().ln_1p() / beta
    } else {
        bx.exp().ln_1p() / beta
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
}

/// Compare the backward gradient of a scalar-valued tape function against
/// central finite differences, componentwise. Returns the worst relative
/// error and its location.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    assert!(h > 0.0);
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    if tape.shape(y) != [1] {
        return Err(Error::Dimension("grad_check target must be scalar".into()));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.wrt_or_zero(xv, x.shape());

    let mut worst = 0.0;
    let mut worst_idx = 0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fp = eval_scalar(&f, &plus)?;
        let fm = eval_scalar(&f, &minus)?;
        let fd = (fp - fm) / (2.0 * h);
        let ad = analytic.data()[i];
        let rel = (ad - fd).abs() / (ad.abs().max(fd.abs())).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_idx = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst_index: worst_idx,
    })
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    Ok(tape.item(y))
}
