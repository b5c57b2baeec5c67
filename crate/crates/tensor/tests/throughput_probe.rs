//! Manual probe: `cargo test -p pdx-tensor --test throughput_probe -- --ignored --nocapture`

use pdx_tensor::ops::matmul;
use std::time::Instant;

#[test]
#[ignore]
fn matmul_throughput() {
    let n = 256;
    let a = vec![1.1_f64; n * n];
    let b = vec![0.9_f64; n * n];
    let t0 = Instant::now();
    let reps = 40;
    let mut acc = 0.0;
    for _ in 0..reps {
        let c = matmul(&a, &b, n, n, n);
        acc += c[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (n as f64).powi(3) * reps as f64;
    println!("acc={acc:.1} {:.2} GFLOP/s", flops / dt / 1e9);
}
