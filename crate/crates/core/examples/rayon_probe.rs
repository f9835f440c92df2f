use rayon::prelude::*;
use std::time::Instant;

fn main() {
    println!("rayon threads: {}", rayon::current_num_threads());
    println!("available_parallelism: {:?}", std::thread::available_parallelism());
    let t = Instant::now();
    let v: Vec<f64> = (0..8u64)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|_| {
            let mut acc = 0.0f64;
            for i in 0..40_000_000u64 {
                acc += (i as f64).sqrt();
            }
            acc
        })
        .collect();
    println!("parallel: {:.2}s (sum {})", t.elapsed().as_secs_f64(), v.iter().sum::<f64>());
}
