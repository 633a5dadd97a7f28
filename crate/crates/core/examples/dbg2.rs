use chaos_ot::dynamics::{add_noise, simulate, NoiseSpec, SystemSpec, SystemTag};
use chaos_ot::training::*;
use chaos_ot::io::model_to_bytes;

fn main() {
    let spec = SystemSpec::l63_classic();
    let u0 = spec.default_initial_state(3);
    let clean = simulate(&spec, &u0, 300, 0.1, 200, 10).unwrap();
    let noisy = add_noise(&clean, NoiseSpec { level: 0.15, seed: 7 }).unwrap();

    let mut base = TrainConfig::preset(SystemTag::L63);
    base.epochs = 14;
    base.warmup_epochs = 2;
    base.window = 40;
    base.stride = 10;

    let mut cfg_no = base.clone();
    cfg_no.method = Method::NoOt;
    let mut cfg_w = base.clone();
    cfg_w.method = Method::Wgan;
    let a = train(&cfg_no, &noisy).unwrap();
    let b = train(&cfg_w, &noisy).unwrap();
    println!("no-ot bytes == wgan bytes: {}", model_to_bytes(&a.emulator) == model_to_bytes(&b.emulator));
    for (ra, rb) in a.log.epochs.iter().zip(&b.log.epochs) {
        println!("ep {}: mse {:.10e} vs {:.10e} | ot {:.6e} adv {:.6e} critic_w {:.4}", ra.epoch, ra.mse, rb.mse, rb.ot_term, rb.adversary_objective, rb.max_critic_abs_w);
    }
}
