use chaos_ot::autodiff::Tape;
use chaos_ot::tensor::Tensor;
use chaos_ot::rng::Rng64;
use std::time::Instant;

fn main() {
    let mut rng = Rng64::new(1);
    let n = 50; let i = 128; let o = 128;
    let x = Tensor::new(vec![n, i], rng.normal_vec(n * i)).unwrap();
    let w = Tensor::new(vec![o, i], rng.normal_vec(o * i)).unwrap();
    let b = Tensor::new(vec![o], rng.normal_vec(o)).unwrap();

    let reps = 2000;
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..reps {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let y = tape.affine(xv, wv, bv).unwrap();
        sink += tape.value(y).data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = reps as f64 * 2.0 * (n * i * o) as f64;
    println!("affine fwd: {:.2} GFLOP/s ({} sink)", flops / dt / 1e9, sink);

    let reps = 200;
    let t0 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let mut h = tape.leaf(x.clone());
        let mut params = Vec::new();
        for _ in 0..4 {
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            params.push(wv);
            h = tape.affine(h, wv, bv).unwrap();
            h = tape.activation(h, chaos_ot::autodiff::Activation::Gelu);
        }
        let target = tape.leaf(x.clone());
        let loss = tape.mse(h, target).unwrap();
        let g = tape.backward(loss).unwrap();
        sink += g.wrt(params[0]).unwrap().data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = reps as f64 * 4.0 * 6.0 * (n * i * o) as f64;
    println!("mlp fwd+bwd: {:.2} GFLOP/s eff, per window {:.2} ms (sink {sink})", flops / dt / 1e9, dt / reps as f64 * 1e3);
}
