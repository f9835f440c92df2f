use les::grammar;
use les::vae::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|v| v.parse().ok())
        .unwrap_or(30);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<_> = (0..20000)
        .map(|_| grammar::sample_expression(&mut rng, 16).unwrap())
        .collect();
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let (model, losses) = train(&data, &cfg).unwrap();
    for l in losses.iter().filter(|l| l.epoch % 5 == 0 || l.epoch + 1 == epochs) {
        println!(
            "epoch {:>3}: ce/token {:.4} kl {:.3} total {:.3}",
            l.epoch,
            l.ce / 16.0,
            l.kl,
            l.total
        );
    }
    println!("{} epochs in {:.1} s", epochs, t.elapsed().as_secs_f64());
    let acc = model.reconstruction_accuracy(&data[..2000]);
    println!("reconstruction token accuracy (first 2000): {:.4}", acc);
}
