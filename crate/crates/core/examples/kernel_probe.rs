use les::linalg::{matmul, matmul_nt, matmul_tn, Matrix};
use std::time::Instant;

fn bench(name: &str, flops: f64, mut f: impl FnMut()) {
    let start = Instant::now();
    let mut reps = 0;
    while start.elapsed().as_secs_f64() < 0.5 {
        f();
        reps += 1;
    }
    let secs = start.elapsed().as_secs_f64() / reps as f64;
    println!("{name}: {:.3} ms, {:.2} GFLOP/s", secs * 1e3, flops / secs / 1e9);
}

fn main() {
    let a = Matrix::from_vec(32, 256, (0..32 * 256).map(|i| i as f64 * 1e-5).collect());
    let w = Matrix::from_vec(256, 256, (0..256 * 256).map(|i| i as f64 * 1e-6).collect());
    let wt = w.transpose();
    let flops = 2.0 * 32.0 * 256.0 * 256.0;
    bench("matmul_nt 32x256 * (256x256)^T", flops, || {
        std::hint::black_box(matmul_nt(&a, &w).unwrap());
    });
    bench("matmul    32x256 * 256x256", flops, || {
        std::hint::black_box(matmul(&a, &wt).unwrap());
    });
    bench("matmul_tn (32x256)^T * 32x256", flops, || {
        std::hint::black_box(matmul_tn(&a, &a).unwrap());
    });
    let big = Matrix::from_vec(256, 192, (0..256 * 192).map(|i| i as f64 * 1e-6).collect());
    bench("matmul_nt 32x192 * (256x192)^T", 2.0 * 32.0 * 192.0 * 256.0, || {
        std::hint::black_box(matmul_nt(&Matrix::from_vec(32, 192, vec![0.5; 32 * 192]), &big).unwrap());
    });
}
