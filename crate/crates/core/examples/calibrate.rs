//! Desk-scale calibration runs for the training acceptance criteria.
//! Not part of the test suite; run with
//!   cargo run --release -p chaos-ot --example calibrate -- <which>

use chaos_ot::dynamics::{add_noise, simulate, NoiseSpec, SystemSpec, SystemTag};
use chaos_ot::metrics::{
    fixed_summary_cloud, l1_hist_error, relative_rmse, spectral_distance, FixedSummary,
};
use chaos_ot::models::forward_plain;
use chaos_ot::training::{rollout, train, Method, TrainConfig};
use chaos_ot::Trajectory;
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    match which.as_str() {
        "train0" => train0(),
        "l63" => l63(std::env::args().nth(2)),
        "l96" => l96(std::env::args().nth(2)),
        _ => {
            train0();
            l63(None);
            l96(None);
        }
    }
}

/// A-TRAIN-0: recover a random stable linear system with a linear MLP.
fn train0() {
    use chaos_ot::rng::Rng64;
    use chaos_ot::tensor::Tensor;
    let start = Instant::now();
    let m = 4;
    let mut rng = Rng64::new(42);
    // random matrix scaled to spectral radius ~0.9
    let raw = Tensor::new(vec![m, m], rng.normal_vec(m * m)).unwrap();
    let sigma = chaos_ot::linalg::svd_spectral_norm(&raw);
    let a: Vec<f64> = raw.data().iter().map(|v| 0.9 * v / sigma).collect();
    let amat = Tensor::new(vec![m, m], a).unwrap();
    // trajectory: u_{t+1} = A u_t with occasional re-excitation to keep
    // signal (stable system decays)
    let mut states = Vec::new();
    let mut u: Vec<f64> = rng.normal_vec(m);
    for t in 0..4000 {
        if t % 40 == 0 {
            u = rng.normal_vec(m);
        }
        states.extend_from_slice(&u);
        let mut next = vec![0.0; m];
        for r in 0..m {
            next[r] = (0..m).map(|c| amat.at(r, c) * u[c]).sum();
        }
        u = next;
    }
    let traj = Trajectory::new(1.0, SystemTag::Custom, 4000, m, states).unwrap();
    let mut config = TrainConfig::default();
    config.method = Method::NoOt;
    config.emulator_kind = chaos_ot::training::EmulatorKind::Mlp;
    config.emulator_hidden = vec![8];
    config.emulator_activation = chaos_ot::autodiff::Activation::Linear;
    config.emulator_residual = false;
    config.window = 2;
    config.stride = 2;
    config.epochs = 2;
    config.lr_emulator = 0.05;
    config.momentum = 0.9;
    config.grad_clip = 0.0;
    let outcome = train(&config, &traj).unwrap();
    // effective matrix column by column
    let mut err = 0.0;
    for c in 0..m {
        let mut e = vec![0.0; m];
        e[c] = 1.0;
        let col = forward_plain(&outcome.emulator, &e);
        let zero = forward_plain(&outcome.emulator, &vec![0.0; m]);
        for r in 0..m {
            let d = (col[r] - zero[r]) - amat.at(r, c);
            err += d * d;
        }
    }
    println!(
        "train0: frobenius error {:.3e} in {:?} (epochs {} x {} windows)",
        err.sqrt(),
        start.elapsed(),
        config.epochs,
        (4000 - config.window) / config.stride + 1
    );
}

fn sign_occupancy(traj: &Trajectory) -> (f64, f64) {
    let mut neg = 0usize;
    let mut pos = 0usize;
    for t in 0..traj.len() {
        if traj.state(t)[0] < 0.0 {
            neg += 1;
        } else {
            pos += 1;
        }
    }
    (
        neg as f64 / traj.len() as f64,
        pos as f64 / traj.len() as f64,
    )
}

/// A-TRAIN-1: L63 attractor coverage for no-ot vs wgan.
fn l63(arg: Option<String>) {
    let t_steps: usize = arg.and_then(|s| s.parse().ok()).unwrap_or(1500);
    let start = Instant::now();
    let spec = SystemSpec::l63_classic();
    let u0 = spec.default_initial_state(3);
    let clean = simulate(&spec, &u0, t_steps, 0.1, 200, 10).unwrap();
    let noisy = add_noise(&clean, NoiseSpec { level: 0.15, seed: 7 }).unwrap();
    println!("l63 data: {} steps, pooled std {:.3}", clean.len(), clean.pooled_std());

    for method in [Method::NoOt, Method::Wgan] {
        let mstart = Instant::now();
        let mut config = TrainConfig::preset(SystemTag::L63);
        config.method = method;
        let outcome = match train(&config, &noisy) {
            Ok(o) => o,
            Err(e) => {
                println!("  {}: TRAINING FAILED: {e}", method.name());
                continue;
            }
        };
        let final_mse = outcome.log.epochs.last().unwrap().mse;
        match rollout(&outcome.emulator, noisy.state(0), 20_000, 0.1, SystemTag::L63) {
            Ok(ro) => {
                let (neg, pos) = sign_occupancy(&ro);
                // attractor box sanity
                let mut zmax = 0.0_f64;
                for t in 0..ro.len() {
                    zmax = zmax.max(ro.state(t)[2].abs());
                }
                println!(
                    "  {}: mse {:.4e} occupancy -x {:.3} +x {:.3} zmax {:.1} time {:?}",
                    method.name(),
                    final_mse,
                    neg,
                    pos,
                    zmax,
                    mstart.elapsed()
                );
            }
            Err(e) => println!(
                "  {}: mse {:.4e} rollout blew up: {e} time {:?}",
                method.name(),
                final_mse,
                mstart.elapsed()
            ),
        }
    }
    println!("l63 total {:?}", start.elapsed());
}

/// A-TRAIN-2: four methods on desk-scale L96.
fn l96(arg: Option<String>) {
    let epochs: usize = arg.and_then(|s| s.parse().ok()).unwrap_or(15);
    let start = Instant::now();
    let m = 20;
    let spec = SystemSpec::L96 { m, forcing: 10.0 };
    let u0 = spec.default_initial_state(1);
    let clean = simulate(&spec, &u0, 2000, 0.05, 400, 5).unwrap();
    let noisy = add_noise(&clean, NoiseSpec { level: 0.3, seed: 5 }).unwrap();
    // clean test trajectory from a different stretch
    let u1 = clean.state(clean.len() - 1).to_vec();
    let test = simulate(&spec, &u1, 1500, 0.05, 200, 5).unwrap();
    println!("l96 data: {} steps, std {:.3}", clean.len(), clean.pooled_std());

    for method in [Method::NoOt, Method::FixedOt, Method::Sinkhorn, Method::Wgan] {
        let mstart = Instant::now();
        let mut config = TrainConfig::preset(SystemTag::L96);
        config.method = method;
        config.epochs = epochs;
        config.stride = 4;
        let outcome = match train(&config, &noisy) {
            Ok(o) => o,
            Err(e) => {
                println!("  {}: TRAINING FAILED: {e}", method.name());
                continue;
            }
        };
        let final_mse = outcome.log.epochs.last().unwrap().mse;
        // one-step rmse on clean test pairs
        let pairs = 500.min(test.len() - 1);
        let preds: Vec<Vec<f64>> = (0..pairs)
            .map(|t| forward_plain(&outcome.emulator, test.state(t)))
            .collect();
        let targets: Vec<Vec<f64>> = (1..=pairs).map(|t| test.state(t).to_vec()).collect();
        let rmse = relative_rmse(&preds, &targets).unwrap();
        match rollout(&outcome.emulator, test.state(0), 1500, 0.05, SystemTag::L96) {
            Ok(ro) => {
                let sd = spectral_distance(&test, &ro).unwrap();
                let ct = fixed_summary_cloud(FixedSummary::L96, &test).unwrap();
                let cp = fixed_summary_cloud(FixedSummary::L96, &ro).unwrap();
                let hist = l1_hist_error(&ct, &cp, 64).unwrap();
                println!(
                    "  {}: mse {:.4e} rmse {:.3} spectral {:.4} hist {:.4} time {:?}",
                    method.name(),
                    final_mse,
                    rmse,
                    sd,
                    hist,
                    mstart.elapsed()
                );
            }
            Err(e) => println!(
                "  {}: mse {:.4e} rmse {:.3} rollout blew up: {e} time {:?}",
                method.name(),
                final_mse,
                rmse,
                mstart.elapsed()
            ),
        }
    }
    println!("l96 total {:?}", start.elapsed());
}
