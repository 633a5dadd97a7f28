//! Ground-truth simulators: Lorenz-63, Lorenz-96 and Kuramoto-Sivashinsky,
//! plus seeded observation-noise injection.
//!
//! L63/L96 integrate with classical RK4; KS uses ETDRK4 in Fourier space with
//! coefficients computed by complex contour averaging (32 points), which
//! avoids the cancellation in the phi-functions at small `h*L`.

use crate::fft::{fft, ifft, is_power_of_two};
use crate::rng::Rng64;
use crate::{Error, Result};
use num_complex::Complex64;

/// Threshold on |u|_inf beyond which a simulation is declared blown up.
pub const BLOWUP_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SystemTag {
    Custom = 0,
    L63 = 1,
    L96 = 2,
    Ks = 3,
}

impl SystemTag {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(SystemTag::Custom),
            1 => Ok(SystemTag::L63),
            2 => Ok(SystemTag::L96),
            3 => Ok(SystemTag::Ks),
            _ => Err(Error::Format(format!("unknown system tag {v}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemTag::Custom => "custom",
            SystemTag::L63 => "l63",
            SystemTag::L96 => "l96",
            SystemTag::Ks => "ks",
        }
    }
}

/// Which system to simulate, with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemSpec {
    L63 { sigma: f64, rho: f64, beta: f64 },
    L96 { m: usize, forcing: f64 },
    Ks { m: usize, domain: f64 },
}

impl SystemSpec {
    pub fn l63_classic() -> Self {
        SystemSpec::L63 {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SystemSpec::L63 { sigma, rho, beta } => {
                if ![*sigma, *rho, *beta].iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidValue("non-finite L63 parameter".into()));
                }
            }
            SystemSpec::L96 { m, forcing } => {
                if *m < 4 {
                    return Err(Error::Dimension(format!(
                        "L96 needs at least 4 sites, got {m}"
                    )));
                }
                if !forcing.is_finite() {
                    return Err(Error::InvalidValue("non-finite forcing".into()));
                }
            }
            SystemSpec::Ks { m, domain } => {
                if !is_power_of_two(*m) {
                    return Err(Error::Dimension(format!(
                        "KS grid must be a power of two, got {m}"
                    )));
                }
                if !domain.is_finite() || *domain <= 0.0 {
                    return Err(Error::InvalidValue("bad KS domain length".into()));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            SystemSpec::L63 { .. } => 3,
            SystemSpec::L96 { m, .. } => *m,
            SystemSpec::Ks { m, .. } => *m,
        }
    }

    pub fn tag(&self) -> SystemTag {
        match self {
            SystemSpec::L63 { .. } => SystemTag::L63,
            SystemSpec::L96 { .. } => SystemTag::L96,
            SystemSpec::Ks { .. } => SystemTag::Ks,
        }
    }

    /// Deterministic initial state near the attractor basin.
    pub fn default_initial_state(&self, seed: u64) -> Vec<f64> {
        let mut rng = Rng64::stream(seed, 0xD1CE);
        match self {
            SystemSpec::L63 { .. } => vec![
                1.0 + 0.1 * rng.normal(),
                1.0 + 0.1 * rng.normal(),
                1.0 + 0.1 * rng.normal(),
            ],
            SystemSpec::L96 { m, forcing } => {
                let mut u = vec![*forcing; *m];
                for v in u.iter_mut() {
                    *v += 0.01 * rng.normal();
                }
                u
            }
            SystemSpec::Ks { m, domain } => {
                let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                (0..*m)
                    .map(|i| {
                        let x = 2.0 * std::f64::consts::PI * i as f64 * (domain / *m as f64)
                            / domain;
                        (x + phase).cos() * (1.0 + (x + phase).sin())
                    })
                    .collect()
            }
        }
    }
}

/// Time-major sequence of states with stored-step metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub system: SystemTag,
    steps: usize,
    dim: usize,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn new(dt: f64, system: SystemTag, steps: usize, dim: usize, states: Vec<f64>) -> Result<Self> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::InvalidValue(format!("bad dt {dt}")));
        }
        if steps * dim != states.len() {
            return Err(Error::ShapeMismatch(format!(
                "{steps} x {dim} != {} values",
                states.len()
            )));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite state".into()));
        }
        Ok(Self {
            dt,
            system,
            steps,
            dim,
            states,
        })
    }

    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.dim..(t + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// Pooled standard deviation over all entries.
    pub fn pooled_std(&self) -> f64 {
        let n = self.states.len() as f64;
        let mean = self.states.iter().sum::<f64>() / n;
        let var = self
            .states
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        var.sqrt()
    }
}

pub fn rhs_l63(u: &[f64], sigma: f64, rho: f64, beta: f64, out: &mut [f64]) {
    out[0] = sigma * (u[1] - u[0]);
    out[1] = u[0] * (rho - u[2]) - u[1];
    out[2] = u[0] * u[1] - beta * u[2];
}

/// Cyclic-index Lorenz-96 right-hand side.
pub fn rhs_l96(u: &[f64], forcing: f64, out: &mut [f64]) {
    let m = u.len();
    debug_assert!(m >= 4);
    for i in 0..m {
        let ip1 = (i + 1) % m;
        let im1 = (i + m - 1) % m;
        let im2 = (i + m - 2) % m;
        out[i] = (u[ip1] - u[im2]) * u[im1] - u[i] + forcing;
    }
}

/// One classical RK4 step of du/dt = rhs(u).
pub fn rk4_step(rhs: &mut impl FnMut(&[f64], &mut [f64]), u: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = u.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    rhs(u, &mut k1);
    for i in 0..n {
        tmp[i] = u[i] + 0.5 * dt * k1[i];
    }
    rhs(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = u[i] + 0.5 * dt * k2[i];
    }
    rhs(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = u[i] + dt * k3[i];
    }
    rhs(&tmp, &mut k4);

    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = u[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        if !out[i].is_finite() {
            return Err(Error::Numerical("non-finite RK4 intermediate".into()));
        }
    }
    Ok(out)
}

/// Precomputed ETDRK4 coefficients for the KS equation on a periodic grid.
#[derive(Debug, Clone)]
pub struct KsCoeffs {
    m: usize,
    /// -0.5 i q with the Nyquist mode zeroed.
    gk: Vec<Complex64>,
    e_full: Vec<f64>,
    e_half: Vec<f64>,
    q: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
}

impl KsCoeffs {
    pub fn new(m: usize, domain: f64, dt: f64) -> Result<Self> {
        if !is_power_of_two(m) {
            return Err(Error::Dimension(format!(
                "KS grid must be a power of two, got {m}"
            )));
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        // wavenumbers in FFT order: 0, 1, ..., m/2, -(m/2-1), ..., -1 (scaled)
        let wavenumber = |k: usize| -> f64 {
            let kk = if k <= m / 2 {
                k as isize
            } else {
                k as isize - m as isize
            };
            two_pi * kk as f64 / domain
        };
        let mut gk = vec![Complex64::new(0.0, 0.0); m];
        let mut lop = vec![0.0; m];
        for k in 0..m {
            let q = wavenumber(k);
            lop[k] = q * q - q * q * q * q;
            gk[k] = Complex64::new(0.0, -0.5 * q);
        }
        gk[m / 2] = Complex64::new(0.0, 0.0);

        // contour averaging over 32 points on the unit circle around h*L
        const NPTS: usize = 32;
        let mut e_full = vec![0.0; m];
        let mut e_half = vec![0.0; m];
        let mut q = vec![0.0; m];
        let mut f1 = vec![0.0; m];
        let mut f2 = vec![0.0; m];
        let mut f3 = vec![0.0; m];
        for k in 0..m {
            let hl = dt * lop[k];
            e_full[k] = hl.exp();
            e_half[k] = (hl / 2.0).exp();
            let mut sq = Complex64::new(0.0, 0.0);
            let mut s1 = Complex64::new(0.0, 0.0);
            let mut s2 = Complex64::new(0.0, 0.0);
            let mut s3 = Complex64::new(0.0, 0.0);
            for j in 0..NPTS {
                let ang = std::f64::consts::PI * (j as f64 + 0.5) / NPTS as f64;
                let z = Complex64::new(hl, 0.0) + Complex64::new(ang.cos(), ang.sin());
                let ez = z.exp();
                let z2 = z * z;
                let z3 = z2 * z;
                sq += ((z / 2.0).exp() - 1.0) / z;
                s1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z2)) / z3;
                s2 += (2.0 + z + ez * (-2.0 + z)) / z3;
                s3 += (-4.0 - 3.0 * z - z2 + ez * (4.0 - z)) / z3;
            }
            let scale = dt / NPTS as f64;
            q[k] = sq.re * scale;
            f1[k] = s1.re * scale;
            f2[k] = s2.re * scale;
            f3[k] = s3.re * scale;
        }
        Ok(Self {
            m,
            gk,
            e_full,
            e_half,
            q,
            f1,
            f2,
            f3,
        })
    }

    pub fn grid_points(&self) -> usize {
        self.m
    }

    /// -0.5 i q * FFT(IFFT(v)^2), the KS nonlinearity in spectral space.
    fn nonlinear(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut real = v.to_vec();
        ifft(&mut real);
        for c in real.iter_mut() {
            let u = c.re;
            *c = Complex64::new(u * u, 0.0);
        }
        fft(&mut real);
        real.iter()
            .zip(&self.gk)
            .map(|(c, g)| c * g)
            .collect()
    }
}

/// One ETDRK4 step of u_t = -u u_x - u_xx - u_xxxx; the state stays real.
pub fn ks_etdrk4_step(u: &[f64], coeffs: &KsCoeffs) -> Result<Vec<f64>> {
    let m = u.len();
    if m != coeffs.m {
        return Err(Error::Dimension(format!(
            "state length {m} does not match coefficients ({})",
            coeffs.m
        )));
    }
    let mut v: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft(&mut v);

    let nv = coeffs.nonlinear(&v);
    let a: Vec<Complex64> = (0..m)
        .map(|k| v[k] * coeffs.e_half[k] + nv[k] * coeffs.q[k])
        .collect();
    let na = coeffs.nonlinear(&a);
    let b: Vec<Complex64> = (0..m)
        .map(|k| v[k] * coeffs.e_half[k] + na[k] * coeffs.q[k])
        .collect();
    let nb = coeffs.nonlinear(&b);
    let c: Vec<Complex64> = (0..m)
        .map(|k| a[k] * coeffs.e_half[k] + (nb[k] * 2.0 - nv[k]) * coeffs.q[k])
        .collect();
    let nc = coeffs.nonlinear(&c);

    let mut vout: Vec<Complex64> = (0..m)
        .map(|k| {
            v[k] * coeffs.e_full[k]
                + nv[k] * coeffs.f1[k]
                + (na[k] + nb[k]) * (2.0 * coeffs.f2[k])
                + nc[k] * coeffs.f3[k]
        })
        .collect();
    ifft(&mut vout);
    let out: Vec<f64> = vout.iter().map(|c| c.re).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("KS step produced non-finite state".into()));
    }
    Ok(out)
}

/// Residual imaginary part after one KS step, for symmetry diagnostics.
pub fn ks_imag_residue(u: &[f64], coeffs: &KsCoeffs) -> Result<f64> {
    let m = u.len();
    if m != coeffs.m {
        return Err(Error::Dimension("state/coefficient mismatch".into()));
    }
    let mut v: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft(&mut v);
    let nv = coeffs.nonlinear(&v);
    let mut vout: Vec<Complex64> = (0..m)
        .map(|k| v[k] * coeffs.e_full[k] + nv[k] * coeffs.f1[k])
        .collect();
    ifft(&mut vout);
    Ok(vout.iter().fold(0.0_f64, |mx, c| mx.max(c.im.abs())))
}

/// A reusable one-stored-step integrator for a system.
pub enum Stepper {
    Rk4 {
        spec: SystemSpec,
        dt: f64,
        substeps: usize,
    },
    Ks {
        coeffs: KsCoeffs,
        substeps: usize,
    },
}

impl Stepper {
    pub fn new(spec: &SystemSpec, dt: f64, substeps: usize) -> Result<Self> {
        spec.validate()?;
        if dt <= 0.0 || substeps == 0 {
            return Err(Error::InvalidValue("dt and substeps must be positive".into()));
        }
        match spec {
            SystemSpec::Ks { m, domain } => Ok(Stepper::Ks {
                coeffs: KsCoeffs::new(*m, *domain, dt / substeps as f64)?,
                substeps,
            }),
            other => Ok(Stepper::Rk4 {
                spec: other.clone(),
                dt,
                substeps,
            }),
        }
    }

    /// Advance one stored step (i.e. `substeps` integrator steps).
    pub fn step(&self, u: &[f64]) -> Result<Vec<f64>> {
        match self {
            Stepper::Rk4 { spec, dt, substeps } => {
                let h = dt / *substeps as f64;
                let mut cur = u.to_vec();
                for _ in 0..*substeps {
                    cur = match spec {
                        SystemSpec::L63 { sigma, rho, beta } => {
                            let (s, r, b) = (*sigma, *rho, *beta);
                            rk4_step(&mut |x, out| rhs_l63(x, s, r, b, out), &cur, h)?
                        }
                        SystemSpec::L96 { forcing, .. } => {
                            let f = *forcing;
                            rk4_step(&mut |x, out| rhs_l96(x, f, out), &cur, h)?
                        }
                        SystemSpec::Ks { .. } => unreachable!(),
                    };
                }
                Ok(cur)
            }
            Stepper::Ks { coeffs, substeps } => {
                let mut cur = u.to_vec();
                for _ in 0..*substeps {
                    cur = ks_etdrk4_step(&cur, coeffs)?;
                }
                Ok(cur)
            }
        }
    }
}

/// Integrate and store `steps` states after discarding `burn_in` stored
/// steps. Pure function of its inputs; aborts with the offending step index
/// if the state exceeds [`BLOWUP_LIMIT`].
pub fn simulate(
    spec: &SystemSpec,
    u0: &[f64],
    steps: usize,
    dt: f64,
    burn_in: usize,
    substeps: usize,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidValue("steps must be >= 1".into()));
    }
    if u0.len() != spec.dim() {
        return Err(Error::Dimension(format!(
            "initial state has {} entries, system needs {}",
            u0.len(),
            spec.dim()
        )));
    }
    let stepper = Stepper::new(spec, dt, substeps)?;
    let dim = spec.dim();
    let mut states = Vec::with_capacity(steps * dim);
    let mut u = u0.to_vec();
    for k in 0..burn_in + steps {
        if k > 0 {
            u = stepper
                .step(&u)
                .map_err(|e| Error::Numerical(format!("at stored step {k}: {e}")))?;
        }
        let maxabs = u.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if maxabs > BLOWUP_LIMIT {
            return Err(Error::Numerical(format!(
                "simulation blew up at stored step {k} (|u|_inf = {maxabs:.3e})"
            )));
        }
        if k >= burn_in {
            states.extend_from_slice(&u);
        }
    }
    // when burn_in = 0 the first stored state is u0 itself
    Trajectory::new(dt, spec.tag(), steps, dim, states)
}

/// Dimensionless noise level and seed for observation noise.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub level: f64,
    pub seed: u64,
}

/// Add i.i.d. Gaussian noise with standard deviation `level * pooled_std`.
pub fn add_noise(traj: &Trajectory, noise: NoiseSpec) -> Result<Trajectory> {
    if noise.level < 0.0 {
        return Err(Error::InvalidValue("noise level must be >= 0".into()));
    }
    if noise.level == 0.0 {
        return Ok(traj.clone());
    }
    let sd = noise.level * traj.pooled_std();
    let mut rng = Rng64::stream(noise.seed, 0x5EED);
    let mut states = traj.states().to_vec();
    for v in states.iter_mut() {
        *v += sd * rng.normal();
    }
    Trajectory::new(traj.dt, traj.system, traj.len(), traj.dim(), states)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l63_fixed_points() {
        let mut out = [0.0; 3];
        rhs_l63(&[0.0, 0.0, 0.0], 10.0, 28.0, 8.0 / 3.0, &mut out);
        assert_eq!(out, [0.0, 0.0, 0.0]);

        let (rho, beta) = (28.0_f64, 8.0_f64 / 3.0);
        let c = (beta * (rho - 1.0)).sqrt();
        for s in [1.0, -1.0] {
            rhs_l63(&[s * c, s * c, rho - 1.0], 10.0, rho, beta, &mut out);
            for v in out {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l63_direct_substitution() {
        let mut out = [0.0; 3];
        rhs_l63(&[1.0, 2.0, 3.0], 10.0, 28.0, 8.0 / 3.0, &mut out);
        assert!((out[0] - 10.0).abs() < 1e-15);
        assert!((out[1] - 23.0).abs() < 1e-15);
        assert!((out[2] - (2.0 - 8.0)).abs() < 1e-12);
    }

    #[test]
    fn l96_homogeneous_fixed_point_and_zero_state() {
        let f = 8.0;
        let u = vec![f; 7];
        let mut out = vec![0.0; 7];
        rhs_l96(&u, f, &mut out);
        for v in &out {
            assert!(v.abs() < 1e-12);
        }
        rhs_l96(&vec![0.0; 7], f, &mut out);
        for v in &out {
            assert!((v - f).abs() < 1e-12);
        }
    }

    #[test]
    fn l96_hand_evaluated_cyclic_formula() {
        // m = 5, u = (1,2,3,4,5), F = 0, against an independent loop oracle
        let u = [1.0, 2.0, 3.0, 4.0, 5.0];
        let mut out = [0.0; 5];
        rhs_l96(&u, 0.0, &mut out);
        let m = 5usize;
        for i in 0..m {
            let expect = (u[(i + 1) % m] - u[(i + m - 2) % m]) * u[(i + m - 1) % m] - u[i];
            assert!((out[i] - expect).abs() < 1e-13, "site {i}");
        }
        // one fully hand-computed site: i = 0 -> (u1 - u3) * u4 - u0 = (2-4)*5-1 = -11
        assert!((out[0] + 11.0).abs() < 1e-13);
    }

    #[test]
    fn rk4_preserves_fixed_points_bitwise() {
        let u = [1.5, -2.5, 3.25];
        let next = rk4_step(&mut |_x, out| out.fill(0.0), &u, 0.1).unwrap();
        assert_eq!(next, u.to_vec());
    }

    #[test]
    fn rk4_scalar_exponential_taylor() {
        // u' = u, dt = 0.1: RK4 multiplies by the 4th-order Taylor of e^0.1
        let next = rk4_step(&mut |x, out| out[0] = x[0], &[1.0], 0.1).unwrap();
        let expect = 1.0 + 0.1 + 0.005 + 0.001 / 6.0 + 0.0001 / 24.0;
        assert!((next[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn rk4_self_convergence_order() {
        // global error over a fixed horizon halves by ~16 when dt halves
        let spec = SystemSpec::l63_classic();
        let u0 = [1.0, 1.0, 1.0];
        let horizon = 0.64;
        let run = |dt: f64| -> Vec<f64> {
            let n = (horizon / dt).round() as usize;
            let stepper = Stepper::new(&spec, dt, 1).unwrap();
            let mut u = u0.to_vec();
            for _ in 0..n {
                u = stepper.step(&u).unwrap();
            }
            u
        };
        let mut errs = Vec::new();
        let mut dts = Vec::new();
        for k in 0..4 {
            let dt = 0.008 / (1 << k) as f64;
            let a = run(dt);
            let b = run(dt / 2.0);
            let err: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            errs.push(err.ln());
            dts.push(dt.ln());
        }
        // least-squares slope
        let n = errs.len() as f64;
        let mx = dts.iter().sum::<f64>() / n;
        let my = errs.iter().sum::<f64>() / n;
        let slope = dts
            .iter()
            .zip(&errs)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / dts.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
        assert!((3.8..=4.2).contains(&slope), "slope {slope}");
    }

    #[test]
    fn ks_zero_state_stays_zero() {
        let coeffs = KsCoeffs::new(64, 22.0, 0.25).unwrap();
        let u = vec![0.0; 64];
        let next = ks_etdrk4_step(&u, &coeffs).unwrap();
        assert!(next.iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn ks_linear_dispersion_relation() {
        // amplitude growth of a tiny sine mode matches q^2 - q^4
        let (m, l, dt) = (64usize, 22.0, 0.25);
        let coeffs = KsCoeffs::new(m, l, dt).unwrap();
        for kmode in [1usize, 2, 3] {
            let q = 2.0 * std::f64::consts::PI * kmode as f64 / l;
            let expect = q * q - q.powi(4);
            let u: Vec<f64> = (0..m)
                .map(|i| 1e-6 * (2.0 * std::f64::consts::PI * kmode as f64 * i as f64 / m as f64).sin())
                .collect();
            let next = ks_etdrk4_step(&u, &coeffs).unwrap();
            let amp = |x: &[f64]| {
                let spec = crate::fft::fft_real(x).unwrap();
                spec[kmode].norm()
            };
            let rate = (amp(&next) / amp(&u)).ln() / dt;
            assert!(
                ((rate - expect) / expect).abs() < 1e-4,
                "mode {kmode}: rate {rate} vs {expect}"
            );
        }
    }

    #[test]
    fn ks_energy_self_convergence() {
        let (m, l) = (64usize, 22.0);
        // settle onto the attractor at the working step size
        let spec = SystemSpec::Ks { m, domain: l };
        let mut u = spec.default_initial_state(0);
        let coarse = KsCoeffs::new(m, l, 0.25).unwrap();
        for _ in 0..2000 {
            u = ks_etdrk4_step(&u, &coarse).unwrap();
        }
        let energy = |x: &[f64]| -> f64 {
            crate::fft::power_spectrum(x).iter().sum()
        };
        let ca = KsCoeffs::new(m, l, 0.05).unwrap();
        let cb = KsCoeffs::new(m, l, 0.025).unwrap();
        let mut ua = u.clone();
        let mut ub = u.clone();
        for _ in 0..100 {
            ua = ks_etdrk4_step(&ua, &ca).unwrap();
        }
        for _ in 0..200 {
            ub = ks_etdrk4_step(&ub, &cb).unwrap();
        }
        let rel = (energy(&ua) - energy(&ub)).abs() / energy(&ub);
        assert!(rel < 1e-5, "rel {rel}");
    }

    #[test]
    fn ks_state_stays_real() {
        let (m, l) = (64usize, 22.0);
        let spec = SystemSpec::Ks { m, domain: l };
        let coeffs = KsCoeffs::new(m, l, 0.25).unwrap();
        let mut u = spec.default_initial_state(3);
        for _ in 0..50 {
            u = ks_etdrk4_step(&u, &coeffs).unwrap();
        }
        let residue = ks_imag_residue(&u, &coeffs).unwrap();
        assert!(residue < 1e-12, "imag residue {residue}");
    }

    #[test]
    fn simulate_single_step_returns_initial_state() {
        let spec = SystemSpec::L96 { m: 5, forcing: 0.0 };
        let u0 = vec![0.0; 5];
        let traj = simulate(&spec, &u0, 1, 0.01, 0, 1).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.state(0), &u0[..]);
    }

    #[test]
    fn simulate_l63_stays_in_attractor_box() {
        let spec = SystemSpec::l63_classic();
        let traj = simulate(&spec, &[1.0, 1.0, 1.0], 10_000, 0.01, 500, 1).unwrap();
        for t in 0..traj.len() {
            let s = traj.state(t);
            assert!(s[0].abs() <= 30.0 && s[1].abs() <= 30.0, "xy out of box at {t}");
            assert!(s[2] >= 0.0 && s[2] <= 55.0, "z out of box at {t}");
        }
    }

    #[test]
    fn simulate_l96_long_run_ergodic_mean() {
        // long-run oracle puts every site's time mean near 2.58
        let spec = SystemSpec::L96 { m: 60, forcing: 10.0 };
        let u0 = spec.default_initial_state(0);
        let traj = simulate(&spec, &u0, 50_000, 0.05, 2_000, 5).unwrap();
        let m = traj.dim();
        let mut means = vec![0.0; m];
        for t in 0..traj.len() {
            for (i, v) in traj.state(t).iter().enumerate() {
                means[i] += v;
            }
        }
        for mean in means.iter_mut() {
            *mean /= traj.len() as f64;
        }
        for (i, mean) in means.iter().enumerate() {
            assert!(
                (*mean - 2.58).abs() <= 0.3,
                "site {i} mean {mean} outside 2.58 +/- 0.3"
            );
        }
    }

    #[test]
    fn simulate_is_bitwise_reproducible() {
        let spec = SystemSpec::l63_classic();
        let a = simulate(&spec, &[1.0, 1.0, 1.0], 100, 0.01, 10, 2).unwrap();
        let b = simulate(&spec, &[1.0, 1.0, 1.0], 100, 0.01, 10, 2).unwrap();
        assert!(a
            .states()
            .iter()
            .zip(b.states())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn simulate_blowup_reports_step() {
        // u' = u^2 from u = 1 blows up in finite time
        let spec = SystemSpec::L96 { m: 4, forcing: 1e7 };
        let err = simulate(&spec, &[0.0; 4], 100, 1.0, 0, 1).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("blew up at stored step"), "{msg}");
    }

    #[test]
    fn add_noise_level_and_determinism() {
        let spec = SystemSpec::L96 { m: 60, forcing: 10.0 };
        let u0 = spec.default_initial_state(0);
        let traj = simulate(&spec, &u0, 2_000, 0.05, 500, 5).unwrap();

        let clean = add_noise(&traj, NoiseSpec { level: 0.0, seed: 1 }).unwrap();
        assert_eq!(clean, traj);

        let noisy = add_noise(&traj, NoiseSpec { level: 0.3, seed: 1 }).unwrap();
        let noisy2 = add_noise(&traj, NoiseSpec { level: 0.3, seed: 1 }).unwrap();
        assert!(noisy
            .states()
            .iter()
            .zip(noisy2.states())
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        // empirical std of the residual is 0.3 * pooled std (T*m = 120k samples)
        let sd = traj.pooled_std();
        let n = traj.states().len();
        let mut acc = 0.0;
        for i in 0..n {
            let d = noisy.states()[i] - traj.states()[i];
            acc += d * d;
        }
        let resid_sd = (acc / n as f64).sqrt();
        assert!(
            (resid_sd / sd - 0.3).abs() < 0.01,
            "residual std ratio {}",
            resid_sd / sd
        );
    }
}
