//! Evaluation metrics (relative RMSE, energy-spectrum distance, L1 histogram
//! error over fixed summary statistics), Benettin estimation of the leading
//! Lyapunov exponent, displacement-covariance analysis, and the numerical
//! verification suite for the transport bounds and noise results.

use crate::dynamics::{SystemTag, Trajectory};
use crate::fft::power_spectrum;
use crate::linalg::{jacobi_eigh, svd_spectral_norm};
use crate::models::{forward_plain, jacobian_matrix, MlpSpec, ModelParams, NetSpec};
use crate::ot::{exact_ot_assignment, exact_ot_cost, PointCloud};
use crate::rng::Rng64;
use crate::tensor::Tensor;
use crate::autodiff::Activation;
use crate::{Error, Result};

/// Mean over evaluation pairs of ||target - pred||_2 / ||target||_2.
pub fn relative_rmse(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch("prediction/target count mismatch".into()));
    }
    let mut acc = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::ShapeMismatch("state length mismatch".into()));
        }
        let tn: f64 = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if tn == 0.0 {
            return Err(Error::InvalidValue("zero-norm target".into()));
        }
        let dn: f64 = p
            .iter()
            .zip(t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        acc += dn / tn;
    }
    Ok(acc / preds.len() as f64)
}

/// Time-averaged relative L1 error between energy spectra.
pub fn spectral_distance(traj_true: &Trajectory, traj_pred: &Trajectory) -> Result<f64> {
    if traj_true.len() != traj_pred.len() || traj_true.dim() != traj_pred.dim() {
        return Err(Error::ShapeMismatch("trajectory shapes differ".into()));
    }
    let mut acc = 0.0;
    for t in 0..traj_true.len() {
        let pt = power_spectrum(traj_true.state(t));
        let pp = power_spectrum(traj_pred.state(t));
        let denom: f64 = pt.iter().sum();
        if denom == 0.0 {
            return Err(Error::InvalidValue(format!("zero spectrum at step {t}")));
        }
        let num: f64 = pt.iter().zip(&pp).map(|(a, b)| (a - b).abs()).sum();
        acc += num / denom;
    }
    Ok(acc / traj_true.len() as f64)
}

/// Handcrafted per-site summary statistics used for histogram evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedSummary {
    /// (du_i/dt, (u_{i+1}-u_{i-2}) u_{i-1}, u_i) per site.
    L96,
    /// (du/dt, du/dx, d^2u/dx^2) per site, spatial derivatives spectral.
    Ks { domain_bits: u64 },
    /// Raw state components (the low-dimensional system is its own summary).
    L63,
}

impl FixedSummary {
    pub fn for_system(tag: SystemTag, domain: f64) -> Result<Self> {
        match tag {
            SystemTag::L96 => Ok(FixedSummary::L96),
            SystemTag::Ks => Ok(FixedSummary::Ks {
                domain_bits: domain.to_bits(),
            }),
            SystemTag::L63 | SystemTag::Custom => Ok(FixedSummary::L63),
        }
    }

    fn ks_domain(&self) -> f64 {
        match self {
            FixedSummary::Ks { domain_bits } => f64::from_bits(*domain_bits),
            _ => unreachable!(),
        }
    }
}

/// Dense circulant matrix applying the spectral derivative of given order.
pub fn spectral_derivative_matrix(m: usize, domain: f64, order: u32) -> Result<Tensor> {
    if !crate::fft::is_power_of_two(m) {
        return Err(Error::Dimension("spectral derivative needs power-of-two grid".into()));
    }
    let mut cols = vec![0.0; m * m];
    for c in 0..m {
        let mut e = vec![0.0; m];
        e[c] = 1.0;
        let d = spectral_derivative(&e, domain, order);
        for r in 0..m {
            cols[r * m + c] = d[r];
        }
    }
    Ok(Tensor::raw(vec![m, m], cols))
}

fn spectral_derivative(u: &[f64], domain: f64, order: u32) -> Vec<f64> {
    use num_complex::Complex64;
    let m = u.len();
    let mut buf: Vec<Complex64> = u.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    crate::fft::fft(&mut buf);
    let two_pi = 2.0 * std::f64::consts::PI;
    for (k, c) in buf.iter_mut().enumerate() {
        let kk = if k <= m / 2 {
            k as isize
        } else {
            k as isize - m as isize
        };
        let q = two_pi * kk as f64 / domain;
        let factor = match order {
            1 => {
                // odd derivative: zero the Nyquist mode
                if k == m / 2 {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, q)
                }
            }
            2 => Complex64::new(-q * q, 0.0),
            _ => unreachable!("orders 1 and 2 only"),
        };
        *c *= factor;
    }
    crate::fft::ifft(&mut buf);
    buf.iter().map(|c| c.re).collect()
}

/// Pool the fixed summary of every site and interior time into one cloud.
/// Time derivatives use central differences, so the first and last stored
/// steps are dropped.
pub fn fixed_summary_cloud(summary: FixedSummary, traj: &Trajectory) -> Result<PointCloud> {
    if traj.len() < 3 {
        return Err(Error::Dimension(
            "fixed summaries need at least 3 stored steps".into(),
        ));
    }
    let m = traj.dim();
    let dt = traj.dt;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    match summary {
        FixedSummary::L96 => {
            for t in 1..traj.len() - 1 {
                let (prev, cur, next) = (traj.state(t - 1), traj.state(t), traj.state(t + 1));
                for i in 0..m {
                    let dudt = (next[i] - prev[i]) / (2.0 * dt);
                    let adv = (cur[(i + 1) % m] - cur[(i + m - 2) % m]) * cur[(i + m - 1) % m];
                    rows.push(vec![dudt, adv, cur[i]]);
                }
            }
        }
        FixedSummary::Ks { .. } => {
            let domain = summary.ks_domain();
            for t in 1..traj.len() - 1 {
                let (prev, cur, next) = (traj.state(t - 1), traj.state(t), traj.state(t + 1));
                let dx = spectral_derivative(cur, domain, 1);
                let dxx = spectral_derivative(cur, domain, 2);
                for i in 0..m {
                    let dudt = (next[i] - prev[i]) / (2.0 * dt);
                    rows.push(vec![dudt, dx[i], dxx[i]]);
                }
            }
        }
        FixedSummary::L63 => {
            for t in 1..traj.len() - 1 {
                rows.push(traj.state(t).to_vec());
            }
        }
    }
    PointCloud::from_rows(&rows)
}

/// Mean over components of the L1 distance between per-component histograms.
/// Bin ranges come from the true cloud; predictions outside clamp to the
/// edge bins.
pub fn l1_hist_error(cloud_true: &PointCloud, cloud_pred: &PointCloud, bins: usize) -> Result<f64> {
    if cloud_true.dim() != cloud_pred.dim() {
        return Err(Error::Dimension("cloud dimensions differ".into()));
    }
    if bins < 2 {
        return Err(Error::InvalidValue("need at least 2 bins".into()));
    }
    let d = cloud_true.dim();
    let mut total = 0.0;
    for c in 0..d {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..cloud_true.len() {
            let v = cloud_true.point(i)[c];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi <= lo {
            return Err(Error::InvalidValue(format!(
                "degenerate range in true cloud component {c}"
            )));
        }
        let width = (hi - lo) / bins as f64;
        let bin_of = |v: f64| -> usize {
            if v <= lo {
                0
            } else if v >= hi {
                bins - 1
            } else {
                (((v - lo) / width) as usize).min(bins - 1)
            }
        };
        let mut p = vec![0.0; bins];
        let mut q = vec![0.0; bins];
        for i in 0..cloud_true.len() {
            p[bin_of(cloud_true.point(i)[c])] += 1.0;
        }
        for i in 0..cloud_pred.len() {
            q[bin_of(cloud_pred.point(i)[c])] += 1.0;
        }
        let (np, nq) = (cloud_true.len() as f64, cloud_pred.len() as f64);
        total += p
            .iter()
            .zip(&q)
            .map(|(a, b)| (a / np - b / nq).abs())
            .sum::<f64>();
    }
    Ok(total / d as f64)
}

/// Benettin estimation settings, defaults as commonly tabulated: initial
/// separation 1e-2, rescaling band [1e-5, 10], 1000-step window after a
/// 100-step warm-up, 0.1 time units per step.
#[derive(Debug, Clone, Copy)]
pub struct BenettinOpts {
    pub d0: f64,
    pub band: (f64, f64),
    pub horizon: usize,
    pub warmup: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for BenettinOpts {
    fn default() -> Self {
        Self {
            d0: 1e-2,
            band: (1e-5, 10.0),
            horizon: 1000,
            warmup: 100,
            dt: 0.1,
            seed: 0,
        }
    }
}

/// Leading Lyapunov exponent by the Benettin two-trajectory method: evolve a
/// reference and a perturbed copy, record the log expansion factor whenever
/// the separation leaves the band (rescaling back to d0 along the current
/// direction), flush the final partial factor, and divide by elapsed time.
pub fn benettin_lle(
    step_fn: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    u0: &[f64],
    opts: BenettinOpts,
) -> Result<f64> {
    if opts.d0 <= 0.0 || opts.band.0 >= opts.band.1 || opts.horizon == 0 || opts.dt <= 0.0 {
        return Err(Error::InvalidValue("bad Benettin options".into()));
    }
    let mut u = u0.to_vec();
    for _ in 0..opts.warmup {
        u = step_fn(&u)?;
    }
    let mut rng = Rng64::stream(opts.seed, 0x11AE);
    let dir = rng.unit_vector(u.len());
    let mut pert: Vec<f64> = u.iter().zip(&dir).map(|(a, b)| a + opts.d0 * b).collect();
    let mut acc = 0.0;
    for _ in 0..opts.horizon {
        u = step_fn(&u)?;
        pert = step_fn(&pert)?;
        let sep: f64 = u
            .iter()
            .zip(&pert)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if !sep.is_finite() {
            return Err(Error::Numerical("separation blew up".into()));
        }
        if sep < opts.band.0 || sep > opts.band.1 {
            if sep == 0.0 {
                return Err(Error::Numerical("trajectories collapsed".into()));
            }
            acc += (sep / opts.d0).ln();
            let scale = opts.d0 / sep;
            for (p, r) in pert.iter_mut().zip(&u) {
                *p = r + (*p - r) * scale;
            }
        }
    }
    let sep: f64 = u
        .iter()
        .zip(&pert)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if sep > 0.0 {
        acc += (sep / opts.d0).ln();
    }
    Ok(acc / (opts.horizon as f64 * opts.dt))
}

/// Displacement covariance C_T = mean (x - y_{pi(x)})(x - y_{pi(x)})^T under
/// the exact p=2 coupling, with its eigenpairs sorted descending.
pub fn displacement_covariance(
    x: &PointCloud,
    y: &PointCloud,
) -> Result<(Tensor, Vec<(f64, Vec<f64>)>)> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension("cloud dimensions differ".into()));
    }
    let (_, perm) = exact_ot_assignment(x, y, 2.0)?;
    let d = x.dim();
    let mut cov = vec![0.0; d * d];
    for i in 0..x.len() {
        let xi = x.point(i);
        let yi = y.point(perm[i]);
        for r in 0..d {
            let dr = xi[r] - yi[r];
            for c in 0..d {
                cov[r * d + c] += dr * (xi[c] - yi[c]);
            }
        }
    }
    for v in cov.iter_mut() {
        *v /= x.len() as f64;
    }
    let cov = Tensor::raw(vec![d, d], cov);
    let (vals, vecs) = jacobi_eigh(&cov, 1e-12);
    Ok((cov, vals.into_iter().zip(vecs).collect()))
}

/// Monte-Carlo estimate of the Gaussian moment constant E[||Z||^p]^(1/p).
pub fn gaussian_kappa(p: f64, d: usize, n_samples: usize, seed: u64) -> f64 {
    assert!(n_samples >= 1 && d >= 1 && p >= 1.0);
    let mut rng = Rng64::stream(seed, 0x6A);
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let z = rng.normal_vec(d);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc += norm.powf(p);
    }
    (acc / n_samples as f64).powf(1.0 / p)
}

/// One row of the verification report.
#[derive(Debug, Clone)]
pub struct TheoryCheck {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct TheoryReport {
    pub checks: Vec<TheoryCheck>,
}

impl TheoryReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// CSV with header `check,measured,bound,margin,pass`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,measured,bound,margin,pass\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e},{}\n",
                c.name, c.measured, c.bound, c.margin, c.pass
            ));
        }
        out
    }
}

const SLACK: f64 = 1e-9;

fn random_mlp(rng: &mut Rng64, widths: Vec<usize>, act: Activation) -> ModelParams {
    ModelParams::init(NetSpec::Mlp(MlpSpec::new(widths, act)), rng.next_u64()).unwrap()
}

fn random_linear_map(rng: &mut Rng64, rows: usize, cols: usize) -> (Tensor, f64) {
    let a = Tensor::raw(vec![rows, cols], rng.normal_vec(rows * cols));
    let lf = svd_spectral_norm(&a);
    (a, lf)
}

fn apply_linear(a: &Tensor, x: &PointCloud) -> PointCloud {
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    x.map(|p| {
        (0..rows)
            .map(|r| (0..cols).map(|c| a.at(r, c) * p[c]).sum())
            .collect()
    })
    .unwrap()
}

fn random_cloud(rng: &mut Rng64, n: usize, d: usize, scale: f64) -> PointCloud {
    PointCloud::new(n, d, (0..n * d).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

/// Run the full verification suite. Deterministic given the seed; every
/// check reports the measured quantity, the bound it must respect, and the
/// worst margin across instances.
pub fn theory_suite(seed: u64) -> TheoryReport {
    let mut checks = Vec::new();

    // P1: summary-space transport of matched one-step pairs is bounded by
    // the Lipschitz constant times the mean one-step error.
    {
        let mut rng = Rng64::stream(seed, 1);
        let mut min_margin = f64::INFINITY;
        let mut worst_ratio: f64 = 0.0;
        for inst in 0..200 {
            let p = if inst % 2 == 0 { 1.0 } else { 2.0 };
            let phi = random_mlp(&mut rng, vec![3, 8, 3], Activation::Tanh);
            let g = random_mlp(&mut rng, vec![3, 8, 3], Activation::Tanh);
            let (a, lf) = random_linear_map(&mut rng, 2, 3);
            let states = random_cloud(&mut rng, 6, 3, 1.0);
            let truth = states.map(|u| forward_plain(&phi, u)).unwrap();
            let pred = states.map(|u| forward_plain(&g, u)).unwrap();
            let lhs = exact_ot_cost(&apply_linear(&a, &truth), &apply_linear(&a, &pred), p).unwrap();
            let mean_err: f64 = (0..6)
                .map(|i| {
                    let e: f64 = truth
                        .point(i)
                        .iter()
                        .zip(pred.point(i))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    e.powf(p)
                })
                .sum::<f64>()
                / 6.0;
            let rhs = lf.powf(p) * mean_err;
            min_margin = min_margin.min(rhs + SLACK - lhs);
            worst_ratio = worst_ratio.max(lhs / (rhs + SLACK));
        }
        checks.push(TheoryCheck {
            name: "P1".into(),
            measured: worst_ratio,
            bound: 1.0,
            margin: min_margin,
            pass: min_margin >= 0.0,
        });
    }

    // P2: the same bound for k-fold compositions, k <= 3.
    {
        let mut rng = Rng64::stream(seed, 2);
        let mut min_margin = f64::INFINITY;
        let mut worst_ratio: f64 = 0.0;
        for inst in 0..200 {
            let p = if inst % 2 == 0 { 1.0 } else { 2.0 };
            let k = 2 + (inst % 2);
            let phi = random_mlp(&mut rng, vec![3, 8, 3], Activation::Tanh);
            let g = random_mlp(&mut rng, vec![3, 8, 3], Activation::Tanh);
            let (a, lf) = random_linear_map(&mut rng, 2, 3);
            let states = random_cloud(&mut rng, 6, 3, 1.0);
            let compose = |model: &ModelParams, u: &[f64]| {
                let mut v = u.to_vec();
                for _ in 0..k {
                    v = forward_plain(model, &v);
                }
                v
            };
            let truth = states.map(|u| compose(&phi, u)).unwrap();
            let pred = states.map(|u| compose(&g, u)).unwrap();
            let lhs = exact_ot_cost(&apply_linear(&a, &truth), &apply_linear(&a, &pred), p).unwrap();
            let mean_err: f64 = (0..6)
                .map(|i| {
                    let e: f64 = truth
                        .point(i)
                        .iter()
                        .zip(pred.point(i))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt();
                    e.powf(p)
                })
                .sum::<f64>()
                / 6.0;
            let rhs = lf.powf(p) * mean_err;
            min_margin = min_margin.min(rhs + SLACK - lhs);
            worst_ratio = worst_ratio.max(lhs / (rhs + SLACK));
        }
        checks.push(TheoryCheck {
            name: "P2".into(),
            measured: worst_ratio,
            bound: 1.0,
            margin: min_margin,
            pass: min_margin >= 0.0,
        });
    }

    // P3: pushing both clouds through an L_f-Lipschitz map contracts exact
    // OT by at most L_f^p.
    {
        let mut rng = Rng64::stream(seed, 3);
        let mut min_margin = f64::INFINITY;
        let mut worst_ratio: f64 = 0.0;
        for inst in 0..200 {
            let p = if inst % 2 == 0 { 1.0 } else { 2.0 };
            let (a, lf) = random_linear_map(&mut rng, 2, 3);
            let x = random_cloud(&mut rng, 6, 3, 1.0);
            let y = random_cloud(&mut rng, 6, 3, 1.0);
            let lhs = exact_ot_cost(&apply_linear(&a, &x), &apply_linear(&a, &y), p).unwrap();
            let rhs = lf.powf(p) * exact_ot_cost(&x, &y, p).unwrap();
            min_margin = min_margin.min(rhs + SLACK - lhs);
            worst_ratio = worst_ratio.max(lhs / (rhs + SLACK));
        }
        checks.push(TheoryCheck {
            name: "P3".into(),
            measured: worst_ratio,
            bound: 1.0,
            margin: min_margin,
            pass: min_margin >= 0.0,
        });
    }

    // P4: the scaling map attains the bound exactly.
    {
        let mut rng = Rng64::stream(seed, 4);
        let mut worst_gap: f64 = 0.0;
        for inst in 0..100 {
            let p = if inst % 2 == 0 { 1.0 } else { 2.0 };
            let lf = rng.uniform(0.3, 2.5);
            let x = random_cloud(&mut rng, 6, 3, 1.0);
            let y = random_cloud(&mut rng, 6, 3, 1.0);
            let scaled = |c: &PointCloud| c.map(|u| u.iter().map(|v| lf * v).collect()).unwrap();
            let lhs = exact_ot_cost(&scaled(&x), &scaled(&y), p).unwrap();
            let rhs = lf.powf(p) * exact_ot_cost(&x, &y, p).unwrap();
            worst_gap = worst_gap.max((lhs - rhs).abs());
        }
        checks.push(TheoryCheck {
            name: "P4".into(),
            measured: worst_gap,
            bound: SLACK,
            margin: SLACK - worst_gap,
            pass: worst_gap < SLACK,
        });
    }

    // P5: MSE noise decomposition on an MLP over L63 states, with the true
    // map taken to be the network itself so the identity is exact; the
    // remainder after removing the Jacobian term scales as sigma^4.
    {
        let (rel_err, slope) = p5_noise_decomposition(seed);
        checks.push(TheoryCheck {
            name: "P5".into(),
            measured: rel_err,
            bound: 1e-2,
            margin: 1e-2 - rel_err,
            pass: rel_err < 1e-2,
        });
        checks.push(TheoryCheck {
            name: "P5_slope".into(),
            measured: slope,
            bound: 4.5,
            margin: (slope - 3.5).min(4.5 - slope),
            pass: (3.5..=4.5).contains(&slope),
        });
    }

    // P6: mean empirical W2 between clouds and their Gaussian-convolved
    // copies stays within 5% of the sigma*sqrt(d) population bound.
    {
        let mut rng = Rng64::stream(seed, 6);
        let d = 3;
        let sigma = 1.0;
        let mut acc = 0.0;
        for _ in 0..100 {
            let x = random_cloud(&mut rng, 8, d, 0.5);
            let y = x
                .map(|p| p.iter().map(|v| v + sigma * rng.normal()).collect())
                .unwrap();
            acc += exact_ot_cost(&x, &y, 2.0).unwrap().sqrt();
        }
        let mean_w2 = acc / 100.0;
        let bound = sigma * (d as f64).sqrt() * 1.05;
        checks.push(TheoryCheck {
            name: "P6".into(),
            measured: mean_w2,
            bound,
            margin: bound - mean_w2,
            pass: mean_w2 <= bound,
        });
    }

    // P7/P8: geometric forgetting under a contraction, and its image under
    // a Lipschitz summary map.
    {
        let mut rng = Rng64::stream(seed, 7);
        let offset: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let gmap = |u: &[f64]| -> Vec<f64> {
            u.iter().zip(&offset).map(|(v, c)| 0.5 * v + c).collect()
        };
        let base = random_cloud(&mut rng, 8, 3, 1.0);
        let eta1 = base
            .map(|p| p.iter().map(|v| v + 0.3 * rng.normal()).collect())
            .unwrap();
        let eta2 = base
            .map(|p| p.iter().map(|v| v + 0.3 * rng.normal()).collect())
            .unwrap();
        let (a, lf) = random_linear_map(&mut rng, 2, 3);
        let kmax = 7;
        let mut w = Vec::new();
        let mut margin_p8 = f64::INFINITY;
        let (mut c1, mut c2) = (eta1, eta2);
        for _k in 0..=kmax {
            let wk = exact_ot_cost(&c1, &c2, 2.0).unwrap().sqrt();
            let wk_f = exact_ot_cost(&apply_linear(&a, &c1), &apply_linear(&a, &c2), 2.0)
                .unwrap()
                .sqrt();
            margin_p8 = margin_p8.min(lf * wk + SLACK - wk_f);
            w.push(wk);
            c1 = c1.map(|p| gmap(p)).unwrap();
            c2 = c2.map(|p| gmap(p)).unwrap();
        }
        let ks: Vec<f64> = (0..=kmax).map(|k| k as f64).collect();
        let logs: Vec<f64> = w.iter().map(|v| v.ln()).collect();
        let rate = fit_slope(&ks, &logs).exp();
        checks.push(TheoryCheck {
            name: "P7".into(),
            measured: rate,
            bound: 0.5,
            margin: 0.05 - (rate - 0.5).abs() / 0.5,
            pass: ((rate - 0.5).abs() / 0.5) < 0.1,
        });
        checks.push(TheoryCheck {
            name: "P8".into(),
            measured: margin_p8,
            bound: 0.0,
            margin: margin_p8,
            pass: margin_p8 >= 0.0,
        });
    }

    // P9: displacement-covariance trace identity and the one-row linear
    // summary bound via its top eigenvalue.
    {
        let mut rng = Rng64::stream(seed, 9);
        let mut min_margin = f64::INFINITY;
        let mut worst_trace_gap: f64 = 0.0;
        for _ in 0..200 {
            let x = random_cloud(&mut rng, 8, 3, 1.0);
            let y = random_cloud(&mut rng, 8, 3, 1.0);
            let (cov, eig) = displacement_covariance(&x, &y).unwrap();
            let trace = (0..3).map(|i| cov.at(i, i)).sum::<f64>();
            let w2 = exact_ot_cost(&x, &y, 2.0).unwrap();
            worst_trace_gap = worst_trace_gap.max((trace - w2).abs());
            let (a, lf) = random_linear_map(&mut rng, 1, 3);
            let lhs = exact_ot_cost(&apply_linear(&a, &x), &apply_linear(&a, &y), 2.0).unwrap();
            let rhs = lf * lf * eig[0].0;
            min_margin = min_margin.min(rhs + SLACK - lhs);
        }
        let pass = min_margin >= 0.0 && worst_trace_gap < 1e-10;
        checks.push(TheoryCheck {
            name: "P9".into(),
            measured: worst_trace_gap,
            bound: 1e-10,
            margin: min_margin,
            pass,
        });
    }

    // M1: the histogram error always lands in [0, 2].
    {
        let mut rng = Rng64::stream(seed, 10);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let x = random_cloud(&mut rng, 40, 3, 1.0);
            let scale = rng.uniform(0.1, 3.0);
            let y = random_cloud(&mut rng, 40, 3, scale);
            let h = l1_hist_error(&x, &y, 16).unwrap();
            worst = worst.max(h);
            if h < 0.0 {
                worst = f64::INFINITY;
            }
        }
        checks.push(TheoryCheck {
            name: "M1".into(),
            measured: worst,
            bound: 2.0,
            margin: 2.0 - worst,
            pass: (0.0..=2.0).contains(&worst),
        });
    }

    // M2: spectral distance and relative RMSE are deterministic under
    // repetition and nonnegative.
    {
        let mut rng = Rng64::stream(seed, 11);
        let t = 20;
        let m = 16;
        let a = Trajectory::new(0.1, SystemTag::Custom, t, m, rng.normal_vec(t * m)).unwrap();
        let b = Trajectory::new(0.1, SystemTag::Custom, t, m, rng.normal_vec(t * m)).unwrap();
        let s1 = spectral_distance(&a, &b).unwrap();
        let s2 = spectral_distance(&a, &b).unwrap();
        let pa: Vec<Vec<f64>> = (0..t).map(|i| a.state(i).to_vec()).collect();
        let pb: Vec<Vec<f64>> = (0..t).map(|i| b.state(i).to_vec()).collect();
        let r1 = relative_rmse(&pa, &pb).unwrap();
        let r2 = relative_rmse(&pa, &pb).unwrap();
        let rep_gap = (s1 - s2).abs().max((r1 - r2).abs());
        let pass = rep_gap == 0.0 && s1 >= 0.0 && r1 >= 0.0;
        checks.push(TheoryCheck {
            name: "M2".into(),
            measured: rep_gap,
            bound: 0.0,
            margin: -rep_gap,
            pass,
        });
    }

    TheoryReport { checks }
}

/// Monte-Carlo instantiation of the noise decomposition with g as the true
/// map: returns (relative error at sigma1 = sigma2 = 1e-2, log-log slope of
/// the residual across sigma2 in {1e-3, 3e-3, 1e-2}).
fn p5_noise_decomposition(seed: u64) -> (f64, f64) {
    let mut rng = Rng64::stream(seed, 5);
    // standardized states from a short L63 run
    let spec = crate::dynamics::SystemSpec::l63_classic();
    let traj = crate::dynamics::simulate(&spec, &[1.0, 1.0, 1.0], 400, 0.05, 200, 5).unwrap();
    let std = traj.pooled_std();
    let mean: f64 = traj.states().iter().sum::<f64>() / traj.states().len() as f64;
    let states: Vec<Vec<f64>> = (0..50)
        .map(|i| {
            traj.state(i * 8)
                .iter()
                .map(|v| (v - mean) / std)
                .collect()
        })
        .collect();
    let g = random_mlp(&mut rng, vec![3, 16, 3], Activation::Tanh);
    let d = 3.0;

    // E ||Dg||_F^2 by explicit Jacobian assembly
    let jfro: f64 = states
        .iter()
        .map(|s| {
            let j = jacobian_matrix(&g, s, 3);
            j.data().iter().map(|v| v * v).sum::<f64>()
        })
        .sum::<f64>()
        / states.len() as f64;

    // part A: relative error of the decomposition at sigma1 = sigma2 = 1e-2
    let (sig1, sig2) = (1e-2, 1e-2);
    let n_draws = 2000;
    let mut acc = 0.0;
    let mut count = 0.0;
    for s in &states {
        let gs = forward_plain(&g, s);
        for _ in 0..n_draws / 2 {
            let z = rng.normal_vec(3);
            for sgn in [1.0, -1.0] {
                let xp: Vec<f64> = s.iter().zip(&z).map(|(a, b)| a + sig2 * sgn * b).collect();
                let pred = forward_plain(&g, &xp);
                let e1: Vec<f64> = (0..3).map(|_| sig1 * rng.normal()).collect();
                acc += gs
                    .iter()
                    .zip(&pred)
                    .zip(&e1)
                    .map(|((a, b), e)| (a + e - b) * (a + e - b))
                    .sum::<f64>();
                count += 1.0;
            }
        }
    }
    let noisy = acc / count / d; // per-entry MSE
    let model = (d * sig1 * sig1 + sig2 * sig2 * jfro) / d;
    let rel_err = (noisy - model).abs() / noisy;

    // part B: residual after subtracting the per-sample Jacobian term, with
    // antithetic pairs and common draws across sigma levels
    let zs: Vec<Vec<f64>> = (0..200).map(|_| rng.normal_vec(3)).collect();
    let sigmas = [1e-3, 3e-3, 1e-2];
    let mut residuals = Vec::new();
    for &s2 in &sigmas {
        let mut acc = 0.0;
        let mut count = 0.0;
        for s in &states {
            let gs = forward_plain(&g, s);
            let j = jacobian_matrix(&g, s, 3);
            for z in &zs {
                for sgn in [1.0, -1.0] {
                    let xp: Vec<f64> = s.iter().zip(z).map(|(a, b)| a + s2 * sgn * b).collect();
                    let pred = forward_plain(&g, &xp);
                    let diff2: f64 = gs
                        .iter()
                        .zip(&pred)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    let jz: f64 = (0..3)
                        .map(|r| {
                            let v: f64 =
                                (0..3).map(|c| j.at(r, c) * sgn * z[c]).sum();
                            v * v
                        })
                        .sum();
                    acc += diff2 - s2 * s2 * jz;
                    count += 1.0;
                }
            }
        }
        residuals.push((acc / count).abs());
    }
    let logs: Vec<f64> = sigmas.iter().map(|v| v.ln()).collect();
    let logr: Vec<f64> = residuals.iter().map(|v| v.ln()).collect();
    let slope = fit_slope(&logs, &logr);
    (rel_err, slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{rhs_l96, simulate, SystemSpec};

    #[test]
    fn relative_rmse_reference_cases() {
        let t = vec![vec![3.0, 4.0]];
        assert_eq!(relative_rmse(&t, &t).unwrap(), 0.0);
        let zero = vec![vec![0.0, 0.0]];
        assert!((relative_rmse(&zero, &t).unwrap() - 1.0).abs() < 1e-15);
        let scaled = vec![vec![3.3, 4.4]];
        assert!((relative_rmse(&scaled, &t).unwrap() - 0.1).abs() < 1e-12);
        assert!(relative_rmse(&t, &zero).is_err());
    }

    #[test]
    fn spectral_distance_reference_cases() {
        let mut rng = Rng64::new(1);
        let t = 10;
        let m = 16;
        let states = rng.normal_vec(t * m);
        let a = Trajectory::new(0.1, SystemTag::Custom, t, m, states.clone()).unwrap();
        assert_eq!(spectral_distance(&a, &a).unwrap(), 0.0);

        let neg: Vec<f64> = states.iter().map(|v| -v).collect();
        let b = Trajectory::new(0.1, SystemTag::Custom, t, m, neg).unwrap();
        assert!(spectral_distance(&a, &b).unwrap() < 1e-12);

        let twice: Vec<f64> = states.iter().map(|v| 2.0 * v).collect();
        let c = Trajectory::new(0.1, SystemTag::Custom, t, m, twice).unwrap();
        assert!((spectral_distance(&a, &c).unwrap() - 3.0).abs() < 1e-10);
    }

    #[test]
    fn fixed_summary_constant_trajectory_has_zero_time_derivative() {
        let m = 8;
        let state: Vec<f64> = (0..m).map(|i| i as f64).collect();
        let mut states = Vec::new();
        for _ in 0..5 {
            states.extend_from_slice(&state);
        }
        let traj = Trajectory::new(0.1, SystemTag::L96, 5, m, states).unwrap();
        let cloud = fixed_summary_cloud(FixedSummary::L96, &traj).unwrap();
        for i in 0..cloud.len() {
            assert_eq!(cloud.point(i)[0], 0.0);
        }
    }

    #[test]
    fn fixed_summary_l96_time_derivative_matches_rhs() {
        // pooled relative error against the rhs oracle, plus the O(dt^2)
        // self-convergence that justifies the central-difference choice
        let pooled_err = |dt: f64| -> f64 {
            let m = 8;
            let spec = SystemSpec::L96 {
                m,
                forcing: 10.0,
            };
            let u0 = spec.default_initial_state(0);
            let steps = (2.0 / dt) as usize;
            let burn = (10.0 / dt) as usize;
            let traj = simulate(&spec, &u0, steps, dt, burn, 1).unwrap();
            let cloud = fixed_summary_cloud(FixedSummary::L96, &traj).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for t in 1..traj.len() - 1 {
                let mut rhs = vec![0.0; m];
                rhs_l96(traj.state(t), 10.0, &mut rhs);
                for i in 0..m {
                    let got = cloud.point((t - 1) * m + i)[0];
                    num += (got - rhs[i]) * (got - rhs[i]);
                    den += rhs[i] * rhs[i];
                }
            }
            (num / den).sqrt()
        };
        let coarse = pooled_err(0.01);
        let fine = pooled_err(0.005);
        assert!(fine < 1e-3, "pooled error at dt=0.005: {fine}");
        let ratio = coarse / fine;
        assert!((3.0..=5.0).contains(&ratio), "dt^2 ratio {ratio}");
    }

    #[test]
    fn fixed_summary_ks_spectral_derivatives_are_exact_on_pure_modes() {
        let m = 64;
        let l = 22.0;
        let two_pi = 2.0 * std::f64::consts::PI;
        let q = two_pi / l;
        let snapshot: Vec<f64> = (0..m).map(|i| (q * (i as f64 * l / m as f64)).sin()).collect();
        let mut states = Vec::new();
        for _ in 0..3 {
            states.extend_from_slice(&snapshot);
        }
        let traj = Trajectory::new(0.25, SystemTag::Ks, 3, m, states).unwrap();
        let cloud = fixed_summary_cloud(
            FixedSummary::Ks {
                domain_bits: l.to_bits(),
            },
            &traj,
        )
        .unwrap();
        for i in 0..m {
            let x = i as f64 * l / m as f64;
            let expect_dx = q * (q * x).cos();
            let expect_dxx = -q * q * (q * x).sin();
            assert!((cloud.point(i)[1] - expect_dx).abs() < 1e-10);
            assert!((cloud.point(i)[2] - expect_dxx).abs() < 1e-10);
        }
    }

    #[test]
    fn hist_error_reference_cases() {
        let x = PointCloud::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(l1_hist_error(&x, &x, 2).unwrap(), 0.0);

        // every prediction clamps into the upper edge bin; the bin range
        // comes from the truth, so that bin always holds the true maximum
        // and the total-variation supremum 2 is approached as 2 - 2/n
        let mut rows: Vec<Vec<f64>> = vec![vec![0.0]; 99];
        rows.push(vec![1.0]);
        let t = PointCloud::from_rows(&rows).unwrap();
        let p = PointCloud::from_rows(&[vec![100.0], vec![200.0]]).unwrap();
        let got = l1_hist_error(&t, &p, 2).unwrap();
        assert!((got - 1.98).abs() < 1e-12, "near-supremum error {got}");
        assert!(got < 2.0);

        let a = PointCloud::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let b = PointCloud::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        assert!((l1_hist_error(&a, &b, 2).unwrap() - 1.0).abs() < 1e-15);

        let degenerate = PointCloud::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert!(l1_hist_error(&degenerate, &a, 2).is_err());
    }

    #[test]
    fn benettin_identity_and_doubling_maps() {
        let opts = BenettinOpts {
            horizon: 200,
            warmup: 10,
            ..Default::default()
        };
        let lle = benettin_lle(&mut |u| Ok(u.to_vec()), &[1.0, 2.0], opts).unwrap();
        assert!(lle.abs() < 1e-12, "identity lle {lle}");

        // tiny base state keeps the doubling trajectory inside f64 range
        let opts = BenettinOpts {
            horizon: 90,
            warmup: 0,
            dt: 0.1,
            ..Default::default()
        };
        let lle = benettin_lle(&mut |u| Ok(vec![2.0 * u[0]]), &[1e-30], opts).unwrap();
        assert!(
            (lle - 2.0_f64.ln() / 0.1).abs() < 1e-6,
            "doubling lle {lle}"
        );
    }

    #[test]
    fn displacement_covariance_reference_cases() {
        let mut rng = Rng64::new(4);
        let x = random_cloud(&mut rng, 6, 3, 1.0);
        let (cov, _) = displacement_covariance(&x, &x).unwrap();
        assert!(cov.data().iter().all(|v| v.abs() < 1e-15));

        let y = random_cloud(&mut rng, 6, 3, 1.0);
        let (cov, _) = displacement_covariance(&x, &y).unwrap();
        let trace: f64 = (0..3).map(|i| cov.at(i, i)).sum();
        let w2 = exact_ot_cost(&x, &y, 2.0).unwrap();
        assert!((trace - w2).abs() < 1e-10);

        // constant shift: C_T = v v^T, top eigenvector parallel to v
        let v = [0.6, -0.4, 1.1];
        let shifted = x.translated(&v).unwrap();
        let (cov, eig) = displacement_covariance(&x, &shifted).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((cov.at(r, c) - v[r] * v[c]).abs() < 1e-10);
            }
        }
        let vn: f64 = v.iter().map(|a| a * a).sum::<f64>();
        assert!((eig[0].0 - vn).abs() < 1e-9);
        let dot: f64 = eig[0].1.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!(dot.abs() / vn.sqrt() > 1.0 - 1e-9);
    }

    #[test]
    fn gaussian_kappa_analytic_points() {
        for d in [1usize, 3, 10] {
            let k = gaussian_kappa(2.0, d, 200_000, 0);
            assert!(
                (k - (d as f64).sqrt()).abs() / (d as f64).sqrt() < 0.01,
                "kappa(2,{d}) = {k}"
            );
        }
        let k = gaussian_kappa(1.0, 1, 400_000, 1);
        let expect = (2.0 / std::f64::consts::PI).sqrt();
        assert!((k - expect).abs() / expect < 0.01, "kappa(1,1) = {k}");
    }

    #[test]
    fn theory_suite_passes_and_enumerates() {
        let report = theory_suite(0);
        for name in ["P1", "P2", "P3", "P4", "P5", "P6", "P7", "P8", "P9", "M1", "M2"] {
            assert!(
                report.checks.iter().any(|c| c.name == name),
                "missing row {name}"
            );
        }
        for c in &report.checks {
            assert!(c.pass, "{} failed: measured {} bound {}", c.name, c.measured, c.bound);
        }
        // scaling-map equality gap is tiny (general reduction)
        let p4 = report.checks.iter().find(|c| c.name == "P4").unwrap();
        assert!(p4.measured < 1e-9);
    }

    #[test]
    fn theory_suite_is_deterministic() {
        let a = theory_suite(7).to_csv();
        let b = theory_suite(7).to_csv();
        assert_eq!(a, b);
    }
}
