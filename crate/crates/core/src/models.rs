//! Network architectures built on the autodiff engine: MLP and periodic
//! convolutional emulators, summary maps, critics, plus spectral-norm and
//! Lipschitz estimation with an optional hinge regularizer.

use crate::autodiff::{Activation, Tape, Var};
use crate::rng::Rng64;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Multilayer perceptron description.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Input, hidden..., output widths. At least one hidden layer.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Residual emulator variant: x + net(x).
    pub residual: bool,
    /// Optional output view as rows x d (summary maps emit one point per row).
    pub output_rows_d: Option<(usize, usize)>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        Self {
            widths,
            activation,
            residual: false,
            output_rows_d: None,
        }
    }

    pub fn residual(mut self) -> Self {
        self.residual = true;
        self
    }

    pub fn with_output_rows(mut self, rows: usize, d: usize) -> Self {
        self.output_rows_d = Some((rows, d));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::Dimension(
                "MLP needs at least one hidden layer".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Dimension("zero layer width".into()));
        }
        if self.residual && self.widths.first() != self.widths.last() {
            return Err(Error::Dimension(
                "residual MLP needs matching input/output widths".into(),
            ));
        }
        if let Some((rows, d)) = self.output_rows_d {
            if rows * d != *self.widths.last().unwrap() {
                return Err(Error::ShapeMismatch(format!(
                    "output reshape {rows}x{d} does not match output width {}",
                    self.widths.last().unwrap()
                )));
            }
        }
        Ok(())
    }
}

/// Residual periodic convolutional emulator over a scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEmulatorSpec {
    /// Hidden channels per layer; input and output channels are 1.
    pub channels: Vec<usize>,
    pub kernel_radius: usize,
    pub activation: Activation,
    pub residual: bool,
}

impl ConvEmulatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_radius == 0 {
            return Err(Error::Dimension("kernel radius must be >= 1".into()));
        }
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Dimension("bad channel list".into()));
        }
        Ok(())
    }

    /// Full channel sequence including the scalar input/output.
    fn channel_seq(&self) -> Vec<usize> {
        let mut seq = vec![1];
        seq.extend_from_slice(&self.channels);
        seq.push(1);
        seq
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetSpec {
    Mlp(MlpSpec),
    Conv(ConvEmulatorSpec),
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            NetSpec::Mlp(s) => s.validate(),
            NetSpec::Conv(s) => s.validate(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            NetSpec::Mlp(s) => s.activation,
            NetSpec::Conv(s) => s.activation,
        }
    }

    pub fn is_residual(&self) -> bool {
        match self {
            NetSpec::Mlp(s) => s.residual,
            NetSpec::Conv(s) => s.residual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

/// Ordered layer parameters plus the spec they instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: NetSpec,
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng64::stream(seed, 0x1417);
        let layers = match &spec {
            NetSpec::Mlp(s) => {
                let mut layers = Vec::new();
                for win in s.widths.windows(2) {
                    let (fan_in, fan_out) = (win[0], win[1]);
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let w: Vec<f64> = (0..fan_out * fan_in)
                        .map(|_| rng.uniform(-bound, bound))
                        .collect();
                    let b: Vec<f64> = (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect();
                    layers.push(Layer {
                        w: Tensor::raw(vec![fan_out, fan_in], w),
                        b: Tensor::raw(vec![fan_out], b),
                    });
                }
                layers
            }
            NetSpec::Conv(s) => {
                let k = 2 * s.kernel_radius + 1;
                let seq = s.channel_seq();
                let mut layers = Vec::new();
                for win in seq.windows(2) {
                    let (ci, co) = (win[0], win[1]);
                    let bound = 1.0 / ((ci * k) as f64).sqrt();
                    let w: Vec<f64> =
                        (0..co * ci * k).map(|_| rng.uniform(-bound, bound)).collect();
                    let b: Vec<f64> = (0..co).map(|_| rng.uniform(-bound, bound)).collect();
                    layers.push(Layer {
                        w: Tensor::raw(vec![co, ci, k], w),
                        b: Tensor::raw(vec![co], b),
                    });
                }
                layers
            }
        };
        Ok(Self { spec, layers })
    }

    /// Zero the final layer (residual emulators then start at the identity).
    pub fn zero_final_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.w = Tensor::zeros(last.w.shape().to_vec());
            last.b = Tensor::zeros(last.b.shape().to_vec());
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn max_abs_param(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.w.max_abs().max(l.b.max_abs()))
            .fold(0.0, f64::max)
    }
}

/// Clamp every parameter entry to [-c, c] in place.
pub fn clip_weights(model: &mut ModelParams, c: f64) {
    assert!(c > 0.0);
    for layer in &mut model.layers {
        for v in layer.w.data_mut() {
            *v = v.clamp(-c, c);
        }
        for v in layer.b.data_mut() {
            *v = v.clamp(-c, c);
        }
    }
}

/// Model parameters registered as leaves on a tape for one loss evaluation.
pub struct TapedModel {
    pub layers: Vec<(Var, Var)>,
}

impl ModelParams {
    pub fn leaf_on(&self, tape: &Tape) -> TapedModel {
        TapedModel {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
                .collect(),
        }
    }
}

/// One-step emulator prediction on the tape. `x` is a state [m] or a batch
/// [n,m]; the residual variant returns x + net(x).
pub fn emulator_forward(
    tape: &Tape,
    model: &ModelParams,
    taped: &TapedModel,
    x: Var,
) -> Result<Var> {
    let y = match &model.spec {
        NetSpec::Mlp(s) => mlp_forward(tape, s, taped, x)?,
        NetSpec::Conv(s) => conv_forward_batch(tape, s, taped, x)?,
    };
    if model.spec.is_residual() {
        Ok(tape.add(x, y))
    } else {
        Ok(y)
    }
}

fn mlp_forward(tape: &Tape, spec: &MlpSpec, taped: &TapedModel, x: Var) -> Result<Var> {
    let mut h = x;
    let last = taped.layers.len() - 1;
    for (i, (w, b)) in taped.layers.iter().enumerate() {
        h = tape.affine(h, *w, *b)?;
        if i < last {
            h = tape.activation(h, spec.activation);
        }
    }
    Ok(h)
}

fn conv_forward_one(
    tape: &Tape,
    spec: &ConvEmulatorSpec,
    taped: &TapedModel,
    x: Var,
) -> Result<Var> {
    let m = *tape.shape(x).last().unwrap();
    let mut h = tape.reshape(x, vec![1, m]);
    let last = taped.layers.len() - 1;
    for (i, (w, b)) in taped.layers.iter().enumerate() {
        h = tape.conv_circ(h, *w, *b)?;
        if i < last {
            h = tape.activation(h, spec.activation);
        }
    }
    Ok(tape.reshape(h, vec![m]))
}

fn conv_forward_batch(
    tape: &Tape,
    spec: &ConvEmulatorSpec,
    taped: &TapedModel,
    x: Var,
) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() == 1 {
        return conv_forward_one(tape, spec, taped, x);
    }
    let (n, m) = (shape[0], shape[1]);
    let mut rows = Vec::with_capacity(n);
    for r in 0..n {
        let row = tape.gather_rows(x, &[r]);
        let row = tape.reshape(row, vec![m]);
        let out = conv_forward_one(tape, spec, taped, row)?;
        rows.push(tape.reshape(out, vec![1, m]));
    }
    Ok(tape.concat_rows(&rows))
}

/// Summary map: states [n,m] -> point matrix [n*rows, d] on the tape.
pub fn summary_forward(
    tape: &Tape,
    model: &ModelParams,
    taped: &TapedModel,
    states: Var,
) -> Result<Var> {
    let spec = match &model.spec {
        NetSpec::Mlp(s) => s,
        NetSpec::Conv(_) => {
            return Err(Error::Dimension("summary maps are MLPs".into()));
        }
    };
    let (rows, d) = spec
        .output_rows_d
        .ok_or_else(|| Error::ShapeMismatch("summary spec needs an output reshape".into()))?;
    let n = tape.shape(states)[0];
    let out = mlp_forward(tape, spec, taped, states)?;
    Ok(tape.reshape(out, vec![n * rows, d]))
}

/// Critic witness values: summary points [n,d] -> scores [n].
pub fn critic_forward(
    tape: &Tape,
    model: &ModelParams,
    taped: &TapedModel,
    s: Var,
) -> Result<Var> {
    let spec = match &model.spec {
        NetSpec::Mlp(m) => m,
        NetSpec::Conv(_) => return Err(Error::Dimension("critics are MLPs".into())),
    };
    let n = tape.shape(s)[0];
    let out = mlp_forward(tape, spec, taped, s)?;
    Ok(tape.reshape(out, vec![n]))
}

/// Plain (tape-free) forward pass for a single input vector.
pub fn forward_plain(model: &ModelParams, x: &[f64]) -> Vec<f64> {
    let y = match &model.spec {
        NetSpec::Mlp(s) => {
            let mut h = x.to_vec();
            let last = model.layers.len() - 1;
            for (i, layer) in model.layers.iter().enumerate() {
                h = affine_plain(&layer.w, &layer.b, &h);
                if i < last {
                    for v in h.iter_mut() {
                        *v = s.activation.apply(*v);
                    }
                }
            }
            h
        }
        NetSpec::Conv(s) => {
            let m = x.len();
            let mut h = x.to_vec();
            let last = model.layers.len() - 1;
            for (i, layer) in model.layers.iter().enumerate() {
                h = conv_plain(&layer.w, &layer.b, &h, m);
                if i < last {
                    for v in h.iter_mut() {
                        *v = s.activation.apply(*v);
                    }
                }
            }
            h
        }
    };
    if model.spec.is_residual() {
        x.iter().zip(&y).map(|(a, b)| a + b).collect()
    } else {
        y
    }
}

fn affine_plain(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), i);
    let mut out = vec![0.0; o];
    for (c, oc) in out.iter_mut().enumerate() {
        let row = w.row(c);
        let mut acc = b.data()[c];
        for k in 0..i {
            acc += row[k] * x[k];
        }
        *oc = acc;
    }
    out
}

fn conv_plain(w: &Tensor, b: &Tensor, x: &[f64], m: usize) -> Vec<f64> {
    let (co, ci, kk) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let r = (kk - 1) / 2;
    debug_assert_eq!(x.len(), ci * m);
    let mut out = vec![0.0; co * m];
    for oc in 0..co {
        for ic in 0..ci {
            let ker = &w.data()[(oc * ci + ic) * kk..(oc * ci + ic + 1) * kk];
            let xrow = &x[ic * m..(ic + 1) * m];
            let orow = &mut out[oc * m..(oc + 1) * m];
            for (j, &kj) in ker.iter().enumerate() {
                crate::autodiff::conv_tap_add(orow, xrow, kj, (m + r - j) % m);
            }
        }
        for v in out[oc * m..(oc + 1) * m].iter_mut() {
            *v += b.data()[oc];
        }
    }
    out
}

/// Power-iteration estimate of the largest singular value of a matrix.
/// Deterministic given the seed of the start vector; returns 0 for the zero
/// matrix.
pub fn spectral_norm(w: &Tensor, iters: usize) -> f64 {
    spectral_norm_seeded(w, iters, 0xBEEF)
}

pub fn spectral_norm_seeded(w: &Tensor, iters: usize, seed: u64) -> f64 {
    assert!(iters >= 1);
    let (o, i) = (w.shape()[0], w.shape()[1]);
    let mut rng = Rng64::stream(seed, 0x51);
    let mut v = rng.unit_vector(i);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let mut u = vec![0.0; o];
        for (c, uc) in u.iter_mut().enumerate() {
            let row = w.row(c);
            *uc = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let un = norm(&u);
        if un < 1e-300 {
            return 0.0;
        }
        for x in u.iter_mut() {
            *x /= un;
        }
        let mut vt = vec![0.0; i];
        for (c, &uc) in u.iter().enumerate() {
            let row = w.row(c);
            for (k, vk) in vt.iter_mut().enumerate() {
                *vk += uc * row[k];
            }
        }
        sigma = norm(&vt);
        if sigma < 1e-300 {
            return 0.0;
        }
        v = vt.iter().map(|x| x / sigma).collect();
    }
    sigma
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Operator norm of one layer's linear part. Dense layers use matrix power
/// iteration; conv layers power-iterate the circular operator on a default
/// grid length.
fn layer_operator_norm(model: &ModelParams, layer: usize, grid: usize, iters: usize) -> f64 {
    match &model.spec {
        NetSpec::Mlp(_) => spectral_norm(&model.layers[layer].w, iters),
        NetSpec::Conv(_) => {
            let w = &model.layers[layer].w;
            let (co, ci, kk) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let r = (kk - 1) / 2;
            let m = grid;
            let zero_b = Tensor::zeros(vec![co]);
            let fwd = |x: &[f64]| conv_plain(w, &zero_b, x, m);
            let bwd = |y: &[f64]| {
                let mut out = vec![0.0; ci * m];
                for oc in 0..co {
                    let yrow = &y[oc * m..(oc + 1) * m];
                    for ic in 0..ci {
                        let ker = &w.data()[(oc * ci + ic) * kk..(oc * ci + ic + 1) * kk];
                        let orow = &mut out[ic * m..(ic + 1) * m];
                        for t in 0..m {
                            let yt = yrow[t];
                            if yt == 0.0 {
                                continue;
                            }
                            for (j, &kj) in ker.iter().enumerate() {
                                orow[(t + m + r - j) % m] += yt * kj;
                            }
                        }
                    }
                }
                out
            };
            let mut rng = Rng64::stream(0xC0, layer as u64);
            let mut v = rng.unit_vector(ci * m);
            let mut sigma = 0.0;
            for _ in 0..iters {
                let u = fwd(&v);
                let un = norm(&u);
                if un < 1e-300 {
                    return 0.0;
                }
                let u: Vec<f64> = u.iter().map(|x| x / un).collect();
                let vt = bwd(&u);
                sigma = norm(&vt);
                if sigma < 1e-300 {
                    return 0.0;
                }
                v = vt.iter().map(|x| x / sigma).collect();
            }
            sigma
        }
    }
}

/// Grid length used to evaluate conv-layer operator norms.
const CONV_NORM_GRID: usize = 64;

/// Layer-product Lipschitz upper bound: product of layer operator norms
/// times the activation factor per hidden nonlinearity. Residual variants
/// get 1 + product.
pub fn lipschitz_upper(model: &ModelParams) -> f64 {
    lipschitz_upper_iters(model, 100)
}

pub fn lipschitz_upper_iters(model: &ModelParams, iters: usize) -> f64 {
    let act = model.spec.activation().lipschitz_factor();
    let mut prod = 1.0;
    for l in 0..model.layers.len() {
        prod *= layer_operator_norm(model, l, CONV_NORM_GRID, iters);
    }
    prod *= act.powi(model.layers.len() as i32 - 1);
    if model.spec.is_residual() {
        1.0 + prod
    } else {
        prod
    }
}

/// Forward pass retaining pre-activation values for JVP/VJP sweeps.
struct ForwardTrace {
    preacts: Vec<Vec<f64>>,
    grid: usize,
}

fn forward_trace(model: &ModelParams, x: &[f64]) -> ForwardTrace {
    let mut preacts = Vec::new();
    let last = model.layers.len() - 1;
    match &model.spec {
        NetSpec::Mlp(s) => {
            let mut h = x.to_vec();
            for (i, layer) in model.layers.iter().enumerate() {
                h = affine_plain(&layer.w, &layer.b, &h);
                if i < last {
                    preacts.push(h.clone());
                    for v in h.iter_mut() {
                        *v = s.activation.apply(*v);
                    }
                }
            }
            ForwardTrace { preacts, grid: 0 }
        }
        NetSpec::Conv(s) => {
            let m = x.len();
            let mut h = x.to_vec();
            for (i, layer) in model.layers.iter().enumerate() {
                h = conv_plain(&layer.w, &layer.b, &h, m);
                if i < last {
                    preacts.push(h.clone());
                    for v in h.iter_mut() {
                        *v = s.activation.apply(*v);
                    }
                }
            }
            ForwardTrace { preacts, grid: m }
        }
    }
}

/// Jacobian-vector product of the full model (including residual skip).
fn jvp(model: &ModelParams, trace: &ForwardTrace, t: &[f64]) -> Vec<f64> {
    let act = model.spec.activation();
    let last = model.layers.len() - 1;
    let mut v = t.to_vec();
    for (i, layer) in model.layers.iter().enumerate() {
        let zero = Tensor::zeros(vec![layer.w.shape()[0]]);
        v = match &model.spec {
            NetSpec::Mlp(_) => affine_plain(&layer.w, &zero, &v),
            NetSpec::Conv(_) => conv_plain(&layer.w, &zero, &v, trace.grid),
        };
        if i < last {
            for (vv, z) in v.iter_mut().zip(&trace.preacts[i]) {
                *vv *= act.deriv(*z);
            }
        }
    }
    if model.spec.is_residual() {
        for (vv, tt) in v.iter_mut().zip(t) {
            *vv += tt;
        }
    }
    v
}

/// Vector-Jacobian product of the full model.
fn vjp(model: &ModelParams, trace: &ForwardTrace, s: &[f64]) -> Vec<f64> {
    let act = model.spec.activation();
    let last = model.layers.len() - 1;
    let mut v = s.to_vec();
    for (i, layer) in model.layers.iter().enumerate().rev() {
        if i < last {
            for (vv, z) in v.iter_mut().zip(&trace.preacts[i]) {
                *vv *= act.deriv(*z);
            }
        }
        v = match &model.spec {
            NetSpec::Mlp(_) => {
                let w = &layer.w;
                let (o, ii) = (w.shape()[0], w.shape()[1]);
                debug_assert_eq!(v.len(), o);
                let mut out = vec![0.0; ii];
                for (c, &vc) in v.iter().enumerate() {
                    let row = w.row(c);
                    for (k, ok) in out.iter_mut().enumerate() {
                        *ok += vc * row[k];
                    }
                }
                out
            }
            NetSpec::Conv(_) => {
                let w = &layer.w;
                let (co, ci, kk) = (w.shape()[0], w.shape()[1], w.shape()[2]);
                let r = (kk - 1) / 2;
                let m = trace.grid;
                let mut out = vec![0.0; ci * m];
                for oc in 0..co {
                    let vrow = &v[oc * m..(oc + 1) * m];
                    for ic in 0..ci {
                        let ker = &w.data()[(oc * ci + ic) * kk..(oc * ci + ic + 1) * kk];
                        let orow = &mut out[ic * m..(ic + 1) * m];
                        for t in 0..m {
                            let vt = vrow[t];
                            if vt == 0.0 {
                                continue;
                            }
                            for (j, &kj) in ker.iter().enumerate() {
                                orow[(t + m + r - j) % m] += vt * kj;
                            }
                        }
                    }
                }
                out
            }
        };
    }
    if model.spec.is_residual() {
        for (vv, ss) in v.iter_mut().zip(s) {
            *vv += ss;
        }
    }
    v
}

/// ||Df(x)||_2 by power iteration alternating JVP and VJP.
pub fn jacobian_spectral_norm(model: &ModelParams, x: &[f64], iters: usize) -> f64 {
    let trace = forward_trace(model, x);
    let mut rng = Rng64::stream(0x1AC0B, x.len() as u64);
    let mut v = rng.unit_vector(x.len());
    let mut sigma = 0.0;
    for _ in 0..iters {
        let u = jvp(model, &trace, &v);
        let un = norm(&u);
        if un < 1e-300 {
            return 0.0;
        }
        let u: Vec<f64> = u.iter().map(|a| a / un).collect();
        let w = vjp(model, &trace, &u);
        sigma = norm(&w);
        if sigma < 1e-300 {
            return 0.0;
        }
        v = w.iter().map(|a| a / sigma).collect();
    }
    sigma
}

/// Explicit Jacobian assembly (one JVP per basis vector); a small-net oracle
/// for the power-iteration path and the noise-decomposition checks.
pub fn jacobian_matrix(model: &ModelParams, x: &[f64], out_dim: usize) -> Tensor {
    let trace = forward_trace(model, x);
    let n = x.len();
    let mut jac = vec![0.0; out_dim * n];
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        let col = jvp(model, &trace, &e);
        debug_assert_eq!(col.len(), out_dim);
        for r in 0..out_dim {
            jac[r * n + c] = col[r];
        }
    }
    Tensor::raw(vec![out_dim, n], jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LowerBoundMode {
    Mean,
    Max,
}

/// Empirical Lipschitz lower bound: mean or max Jacobian spectral norm over
/// a batch of states.
pub fn lipschitz_lower(
    model: &ModelParams,
    batch: &[Vec<f64>],
    mode: LowerBoundMode,
    iters: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidValue("empty batch".into()));
    }
    let norms: Vec<f64> = batch
        .iter()
        .map(|x| jacobian_spectral_norm(model, x, iters))
        .collect();
    Ok(match mode {
        LowerBoundMode::Mean => norms.iter().sum::<f64>() / norms.len() as f64,
        LowerBoundMode::Max => norms.iter().fold(0.0, |a: f64, &b| a.max(b)),
    })
}

/// Differentiable hinge regularizer
/// S_beta(upper - L_max) + S_beta(L_min - lower_mean)
/// with the layer-product upper bound and the batch-mean Jacobian norm, both
/// unrolled on the tape (activation diagonals frozen at the forward values).
pub fn hinge_lip_reg(
    tape: &Tape,
    model: &ModelParams,
    taped: &TapedModel,
    batch: &[Vec<f64>],
    l_min: f64,
    l_max: f64,
    beta: f64,
    power_iters: usize,
) -> Result<Var> {
    assert!(l_min >= 0.0 && l_min < l_max && beta > 0.0);
    let spec = match &model.spec {
        NetSpec::Mlp(s) => s,
        NetSpec::Conv(_) => {
            return Err(Error::Dimension(
                "hinge regularizer targets MLP summary maps".into(),
            ))
        }
    };
    if batch.is_empty() {
        return Err(Error::InvalidValue("empty batch".into()));
    }
    let act_factor = spec.activation.lipschitz_factor();
    let mut upper: Option<Var> = None;
    for (l, (wv, _)) in taped.layers.iter().enumerate() {
        let i = model.layers[l].w.shape()[1];
        let mut rng = Rng64::stream(0xBEEF, l as u64);
        let mut v = tape.leaf(Tensor::raw(vec![i], rng.unit_vector(i)));
        let mut sigma = tape.leaf(Tensor::scalar(1.0));
        for _ in 0..power_iters {
            let zero = tape.leaf(Tensor::zeros(vec![model.layers[l].w.shape()[0]]));
            let u = tape.affine(v, *wv, zero)?;
            let un = tape.sqrt(tape.sum(tape.square(u)));
            let u = tape.div_scalar(u, un);
            let vt = tape.matmul(u, *wv)?;
            sigma = tape.sqrt(tape.sum(tape.square(vt)));
            v = tape.div_scalar(vt, sigma);
        }
        upper = Some(match upper {
            None => sigma,
            Some(prev) => tape.mul(prev, sigma),
        });
    }
    let mut upper = upper.unwrap();
    let factor = act_factor.powi(model.layers.len() as i32 - 1);
    if factor != 1.0 {
        upper = tape.scale(upper, factor);
    }

    let mut lowers = Vec::with_capacity(batch.len());
    for x in batch {
        let trace = forward_trace(model, x);
        let diags: Vec<Tensor> = trace
            .preacts
            .iter()
            .map(|z| {
                Tensor::raw(
                    vec![z.len()],
                    z.iter().map(|&v| spec.activation.deriv(v)).collect(),
                )
            })
            .collect();
        let mut rng = Rng64::stream(0x1AC0B, x.len() as u64);
        let mut v = tape.leaf(Tensor::raw(vec![x.len()], rng.unit_vector(x.len())));
        let mut sigma = tape.leaf(Tensor::scalar(0.0));
        for _ in 0..power_iters {
            let mut u = v;
            for (l, (wv, _)) in taped.layers.iter().enumerate() {
                let zero = tape.leaf(Tensor::zeros(vec![model.layers[l].w.shape()[0]]));
                u = tape.affine(u, *wv, zero)?;
                if l + 1 < taped.layers.len() {
                    u = tape.mul(u, tape.leaf(diags[l].clone()));
                }
            }
            let un = tape.sqrt(tape.sum(tape.square(u)));
            let u = tape.div_scalar(u, un);
            let mut w = u;
            for (l, (wv, _)) in taped.layers.iter().enumerate().rev() {
                if l + 1 < taped.layers.len() {
                    w = tape.mul(w, tape.leaf(diags[l].clone()));
                }
                w = tape.matmul(w, *wv)?;
            }
            sigma = tape.sqrt(tape.sum(tape.square(w)));
            v = tape.div_scalar(w, sigma);
        }
        lowers.push(tape.reshape(sigma, vec![1, 1]));
    }
    let lower_mean = tape.mean(tape.concat_rows(&lowers));

    let over = tape.softplus(tape.add_const(upper, -l_max), beta);
    let under = tape.softplus(tape.add_const(tape.neg(lower_mean), l_min), beta);
    Ok(tape.add(over, under))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::linalg::svd_spectral_norm;

    fn small_mlp(seed: u64, act: Activation) -> ModelParams {
        ModelParams::init(NetSpec::Mlp(MlpSpec::new(vec![4, 6, 4], act)), seed).unwrap()
    }

    #[test]
    fn residual_emulator_with_zero_final_layer_is_identity() {
        let spec = NetSpec::Mlp(MlpSpec::new(vec![3, 8, 3], Activation::Gelu).residual());
        let mut model = ModelParams::init(spec, 0).unwrap();
        model.zero_final_layer();
        let x = vec![0.3, -1.2, 2.5];
        let y = forward_plain(&model, &x);
        assert_eq!(y, x);
    }

    #[test]
    fn linear_mlp_with_identity_weights_is_identity() {
        let spec = NetSpec::Mlp(MlpSpec::new(vec![3, 3, 3], Activation::Linear));
        let mut model = ModelParams::init(spec, 0).unwrap();
        for layer in &mut model.layers {
            layer.w = Tensor::identity(3);
            layer.b = Tensor::zeros(vec![3]);
        }
        let x = vec![1.5, -2.0, 0.25];
        assert_eq!(forward_plain(&model, &x), x);
    }

    #[test]
    fn conv_emulator_is_translation_equivariant() {
        let spec = NetSpec::Conv(ConvEmulatorSpec {
            channels: vec![5, 5],
            kernel_radius: 2,
            activation: Activation::Gelu,
            residual: true,
        });
        let model = ModelParams::init(spec, 7).unwrap();
        let mut rng = Rng64::new(3);
        let m = 12;
        let x = rng.normal_vec(m);
        let y = forward_plain(&model, &x);
        for shift in [1usize, 3, 7] {
            let xs: Vec<f64> = (0..m).map(|i| x[(i + m - shift) % m]).collect();
            let ys = forward_plain(&model, &xs);
            for i in 0..m {
                assert!(
                    (ys[(i + shift) % m] - y[i]).abs() < 1e-10,
                    "shift {shift} site {i}"
                );
            }
        }
    }

    #[test]
    fn taped_and_plain_forward_agree() {
        let model = small_mlp(5, Activation::Gelu);
        let mut rng = Rng64::new(1);
        let x = rng.normal_vec(4);
        let plain = forward_plain(&model, &x);
        let tape = Tape::new();
        let taped = model.leaf_on(&tape);
        let xv = tape.leaf(Tensor::vector(x.clone()));
        let y = emulator_forward(&tape, &model, &taped, xv).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }

        // conv path, batched
        let spec = NetSpec::Conv(ConvEmulatorSpec {
            channels: vec![4],
            kernel_radius: 2,
            activation: Activation::Tanh,
            residual: true,
        });
        let cmodel = ModelParams::init(spec, 9).unwrap();
        let xs: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(8)).collect();
        let tape = Tape::new();
        let taped = cmodel.leaf_on(&tape);
        let batch = tape.leaf(Tensor::matrix(&xs).unwrap());
        let out = emulator_forward(&tape, &cmodel, &taped, batch).unwrap();
        let got = tape.value(out);
        for (r, x) in xs.iter().enumerate() {
            let plain = forward_plain(&cmodel, x);
            for (c, want) in plain.iter().enumerate() {
                assert!((got.at(r, c) - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn summary_forward_linear_row_matches_dot_products() {
        let spec = MlpSpec::new(vec![3, 4, 1], Activation::Linear).with_output_rows(1, 1);
        let mut model = ModelParams::init(NetSpec::Mlp(spec), 0).unwrap();
        model.layers[0].w = Tensor::matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0; 3],
        ])
        .unwrap();
        model.layers[0].b = Tensor::zeros(vec![4]);
        model.layers[1].w = Tensor::matrix(&[vec![2.0, -1.0, 0.5, 0.0]]).unwrap();
        model.layers[1].b = Tensor::zeros(vec![1]);
        let tape = Tape::new();
        let taped = model.leaf_on(&tape);
        let states = Tensor::matrix(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.0]]).unwrap();
        let sv = tape.leaf(states);
        let cloud = summary_forward(&tape, &model, &taped, sv).unwrap();
        let got = tape.value(cloud);
        assert_eq!(got.shape(), &[2, 1]);
        assert!((got.at(0, 0) - (2.0 - 2.0 + 1.5)).abs() < 1e-12);
        assert!((got.at(1, 0) - (-2.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn summary_forward_rows_match_direct_evaluation() {
        let m = 4;
        let d = 3;
        let spec = MlpSpec::new(vec![m, 16, m * d], Activation::Relu).with_output_rows(m, d);
        let model = ModelParams::init(NetSpec::Mlp(spec), 11).unwrap();
        let mut rng = Rng64::new(2);
        let state = rng.normal_vec(m);
        let direct = forward_plain(&model, &state);
        let tape = Tape::new();
        let taped = model.leaf_on(&tape);
        let sv = tape.leaf(Tensor::raw(vec![1, m], state.clone()));
        let cloud = summary_forward(&tape, &model, &taped, sv).unwrap();
        let got = tape.value(cloud);
        assert_eq!(got.shape(), &[m, d]);
        for r in 0..m {
            for c in 0..d {
                assert!((got.at(r, c) - direct[r * d + c]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn critic_zero_weights_and_linear_dot() {
        let spec = MlpSpec::new(vec![3, 5, 1], Activation::Relu);
        let mut model = ModelParams::init(NetSpec::Mlp(spec), 0).unwrap();
        for layer in &mut model.layers {
            layer.w = Tensor::zeros(layer.w.shape().to_vec());
            layer.b = Tensor::zeros(layer.b.shape().to_vec());
        }
        let tape = Tape::new();
        let taped = model.leaf_on(&tape);
        let s = tape.leaf(Tensor::matrix(&[vec![1.0, -2.0, 0.5]]).unwrap());
        let out = critic_forward(&tape, &model, &taped, s).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0]);

        let mut model2 = model.clone();
        model2.layers[0].w = Tensor::matrix(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0; 3],
            vec![0.0; 3],
        ])
        .unwrap();
        model2.layers[1].w = Tensor::matrix(&[vec![0.5, 1.5, -2.0, 0.0, 0.0]]).unwrap();
        let x = [2.0, 1.0, 1.0]; // keeps relu inputs positive
        let expect = 0.5 * 2.0 + 1.5 * 1.0 - 2.0 * 1.0;
        let tape2 = Tape::new();
        let taped2 = model2.leaf_on(&tape2);
        let s2 = tape2.leaf(Tensor::matrix(&[x.to_vec()]).unwrap());
        let out2 = critic_forward(&tape2, &model2, &taped2, s2).unwrap();
        assert!((tape2.value(out2).data()[0] - expect).abs() < 1e-13);

        // determinism
        let tape3 = Tape::new();
        let taped3 = model2.leaf_on(&tape3);
        let s3 = tape3.leaf(Tensor::matrix(&[x.to_vec()]).unwrap());
        let out3 = critic_forward(&tape3, &model2, &taped3, s3).unwrap();
        assert_eq!(
            tape2.value(out2).data()[0].to_bits(),
            tape3.value(out3).data()[0].to_bits()
        );
    }

    #[test]
    fn clip_weights_behaviour() {
        let mut model = small_mlp(3, Activation::Relu);
        let before = model.clone();
        clip_weights(&mut model, 10.0);
        assert_eq!(model, before);

        model.layers[0].w.data_mut()[0] = 5.0;
        clip_weights(&mut model, 0.01);
        assert_eq!(model.layers[0].w.data()[0], 0.01);
        assert!(model.max_abs_param() <= 0.01);
    }

    #[test]
    fn spectral_norm_known_and_random() {
        assert!((spectral_norm(&Tensor::identity(3), 50) - 1.0).abs() < 1e-12);
        let d = Tensor::matrix(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((spectral_norm(&d, 100) - 2.0).abs() < 1e-9);
        assert_eq!(spectral_norm(&Tensor::zeros(vec![3, 3]), 10), 0.0);

        let mut rng = Rng64::new(6);
        for _ in 0..5 {
            let w = Tensor::raw(vec![5, 3], rng.normal_vec(15));
            let est = spectral_norm(&w, 100);
            let oracle = svd_spectral_norm(&w);
            assert!(
                ((est - oracle) / oracle).abs() < 1e-6,
                "est {est} vs svd {oracle}"
            );
        }
    }

    #[test]
    fn lipschitz_upper_products() {
        let spec = MlpSpec::new(vec![2, 3, 2], Activation::Relu);
        let mut model = ModelParams::init(NetSpec::Mlp(spec), 0).unwrap();
        model.layers[0].w =
            Tensor::matrix(&[vec![2.0, 0.0], vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        model.layers[0].b = Tensor::zeros(vec![3]);
        model.layers[1].w = Tensor::matrix(&[vec![3.0, 0.0, 0.0], vec![0.0, 3.0, 0.0]]).unwrap();
        model.layers[1].b = Tensor::zeros(vec![2]);
        assert!((lipschitz_upper(&model) - 6.0).abs() < 1e-8);
    }

    #[test]
    fn lipschitz_sandwich_on_random_relu_nets() {
        let mut rng = Rng64::new(4);
        for seed in 0..5 {
            let model = small_mlp(seed, Activation::Relu);
            let batch: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(4)).collect();
            let lo_mean = lipschitz_lower(&model, &batch, LowerBoundMode::Mean, 60).unwrap();
            let lo_max = lipschitz_lower(&model, &batch, LowerBoundMode::Max, 60).unwrap();
            let hi = lipschitz_upper(&model);
            assert!(lo_mean <= lo_max + 1e-12);
            assert!(lo_max <= hi + 1e-9, "lower {lo_max} > upper {hi}");
        }
    }

    #[test]
    fn clipped_net_respects_frobenius_bound() {
        let mut model = small_mlp(9, Activation::Relu);
        let c = 0.05;
        clip_weights(&mut model, c);
        let hi = lipschitz_upper(&model);
        let mut frob_bound = 1.0;
        for layer in &model.layers {
            let (o, i) = (layer.w.shape()[0], layer.w.shape()[1]);
            frob_bound *= c * ((o * i) as f64).sqrt();
        }
        assert!(hi <= frob_bound + 1e-9, "upper {hi} vs frobenius {frob_bound}");
    }

    #[test]
    fn jacobian_norm_linear_equals_matrix_norm() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Linear);
        let model = ModelParams::init(NetSpec::Mlp(spec), 2).unwrap();
        let w1 = &model.layers[0].w;
        let w2 = &model.layers[1].w;
        let mut eff = vec![0.0; 2 * 3];
        for r in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += w2.at(r, k) * w1.at(k, c);
                }
                eff[r * 3 + c] = acc;
            }
        }
        let eff = Tensor::raw(vec![2, 3], eff);
        let expect = svd_spectral_norm(&eff);
        let got = jacobian_spectral_norm(&model, &[0.1, 0.2, 0.3], 100);
        assert!((got - expect).abs() < 1e-8, "{got} vs {expect}");
    }

    #[test]
    fn jacobian_norm_scaling_map() {
        let spec = MlpSpec::new(vec![3, 3, 3], Activation::Linear);
        let mut model = ModelParams::init(NetSpec::Mlp(spec), 0).unwrap();
        model.layers[0].w = Tensor::identity(3);
        model.layers[0].b = Tensor::zeros(vec![3]);
        let mut two = Tensor::identity(3);
        for v in two.data_mut() {
            *v *= 2.0;
        }
        model.layers[1].w = two;
        model.layers[1].b = Tensor::zeros(vec![3]);
        let got = jacobian_spectral_norm(&model, &[1.0, -1.0, 0.5], 50);
        assert!((got - 2.0).abs() < 1e-10);
    }

    #[test]
    fn jacobian_norm_matches_explicit_assembly_oracle() {
        let mut rng = Rng64::new(12);
        for seed in 0..5 {
            let model = small_mlp(seed + 100, Activation::Relu);
            let x = rng.normal_vec(4);
            let got = jacobian_spectral_norm(&model, &x, 120);
            let jac = jacobian_matrix(&model, &x, 4);
            let oracle = svd_spectral_norm(&jac);
            assert!(
                (got - oracle).abs() < 1e-6 * oracle.max(1.0),
                "seed {seed}: {got} vs {oracle}"
            );
        }
    }

    #[test]
    fn lower_bound_batch_of_one_and_order() {
        let model = small_mlp(21, Activation::Tanh);
        let mut rng = Rng64::new(5);
        let x = rng.normal_vec(4);
        let single = lipschitz_lower(&model, &[x.clone()], LowerBoundMode::Mean, 80).unwrap();
        let direct = jacobian_spectral_norm(&model, &x, 80);
        assert!((single - direct).abs() < 1e-12);
        assert!(lipschitz_lower(&model, &[], LowerBoundMode::Mean, 10).is_err());
    }

    #[test]
    fn hinge_regularizer_limits() {
        // S_beta(0) = ln 2 / beta
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let s = tape.softplus(x, 50.0);
        assert!((tape.item(s) - (2.0_f64).ln() / 50.0).abs() < 1e-12);

        let mut model = small_mlp(33, Activation::Relu);
        for layer in &mut model.layers {
            for v in layer.w.data_mut() {
                *v *= 3.0;
            }
        }
        let up = lipschitz_upper(&model);
        assert!(up > 1.5, "upscaled net should exceed 1.5, got {up}");
        let mut rng = Rng64::new(8);
        let batch: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(4)).collect();
        let lo = lipschitz_lower(&model, &batch, LowerBoundMode::Mean, 60).unwrap();
        let tape = Tape::new();
        let taped = model.leaf_on(&tape);
        let reg =
            hinge_lip_reg(&tape, &model, &taped, &batch, lo * 0.2, up * 4.0, 50.0, 60).unwrap();
        assert!(tape.item(reg) < 1e-6, "inside-band reg {}", tape.item(reg));

        let tape2 = Tape::new();
        let taped2 = model.leaf_on(&tape2);
        let reg2 =
            hinge_lip_reg(&tape2, &model, &taped2, &batch, 0.0, up - 1.0, 200.0, 60).unwrap();
        assert!(
            (tape2.item(reg2) - 1.0).abs() < 0.01,
            "hinge {}",
            tape2.item(reg2)
        );
    }

    #[test]
    fn hinge_regularizer_grad_check() {
        let spec = MlpSpec::new(vec![3, 4, 3], Activation::Relu);
        let model = ModelParams::init(NetSpec::Mlp(spec), 40).unwrap();
        let mut rng = Rng64::new(9);
        let batch: Vec<Vec<f64>> = (0..2).map(|_| rng.normal_vec(3)).collect();
        let w0 = model.layers[0].w.clone();
        let f = move |tape: &Tape, wvar: Var| -> Result<Var> {
            let mut taped = model.leaf_on(tape);
            taped.layers[0].0 = wvar;
            hinge_lip_reg(tape, &model, &taped, &batch, 0.5, 1.2, 10.0, 25)
        };
        let rep = grad_check(f, &w0, 1e-6).unwrap();
        assert!(rep.max_rel_error < 1e-5, "rel err {}", rep.max_rel_error);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = small_mlp(50, Activation::Gelu);
        let x = vec![0.2, -0.4, 1.0, 0.7];
        let a = forward_plain(&model, &x);
        let b = forward_plain(&model, &x);
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
