//! Wall-clock timing of score evaluations, shared by the `bench`
//! subcommand and the timing checks in the test suite.

use crate::nn::{normal_sample, MlpParams};
use crate::scores::{les, likelihood, polarity, prior_score, ScoreKind};
use crate::vae::VaeModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Median over `reps` repetitions of scoring the whole batch, in seconds.
pub fn time_score_batch(model: &VaeModel, batch: &[Vec<f64>], kind: ScoreKind, reps: usize) -> f64 {
    assert!(reps >= 1);
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for z in batch {
            match kind {
                ScoreKind::Les => {
                    les(model, z).expect("finite z");
                }
                ScoreKind::Likelihood => {
                    likelihood(model, z).expect("finite z");
                }
                ScoreKind::Prior => {
                    prior_score(z);
                }
                ScoreKind::Polarity => {
                    polarity(model, z).expect("finite z");
                }
                ScoreKind::TrainDistance => unimplemented!("not part of the timing report"),
            }
        }
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

/// Standard-normal latent batch for timing runs.
pub fn timing_batch(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| normal_sample(&mut rng)).collect())
        .collect()
}

/// Decoder-only stub model of the given latent dimension for scaling
/// probes; geometry matches the expressions task.
pub fn stub_model(d: usize, seed: u64) -> VaeModel {
    use crate::grammar::{SEQ_LEN, VOCAB_SIZE};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decoder = MlpParams::random(&mut rng, &[d, 256, 256, SEQ_LEN * VOCAB_SIZE]);
    let encoder = MlpParams::random(&mut rng, &[SEQ_LEN * VOCAB_SIZE, 16, 2 * d]);
    VaeModel {
        encoder,
        decoder,
        latent_dim: d,
        seq_len: SEQ_LEN,
        vocab_size: VOCAB_SIZE,
        beta: 1.0,
    }
}

/// LES batch-of-20 time ratio between stub decoders of two latent
/// dimensions.
pub fn les_scaling_ratio(d_small: usize, d_large: usize, reps: usize) -> (f64, f64) {
    let small = stub_model(d_small, 7);
    let large = stub_model(d_large, 7);
    let batch_small = timing_batch(d_small, 20, 11);
    let batch_large = timing_batch(d_large, 20, 11);
    let t_small = time_score_batch(&small, &batch_small, ScoreKind::Les, reps);
    let t_large = time_score_batch(&large, &batch_large, ScoreKind::Les, reps);
    (t_small, t_large)
}
