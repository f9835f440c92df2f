//! Beta-VAE over token sequences: a ReLU-MLP encoder producing a Gaussian
//! posterior (mean and log-variance) and a ReLU-MLP decoder producing
//! per-position logits. Training minimizes cross-entropy plus
//! beta-weighted KL to the standard-normal prior, with one reparameterized
//! latent sample per example per step.

use crate::grammar::{self, TokenSequence, SEQ_LEN, VOCAB_SIZE};
use crate::linalg::Matrix;
use crate::nn::{
    self, adam_step, forward, load_checkpoint, save_checkpoint, softmax_extended,
    AdamState, Checkpoint, CheckpointError, ExtendedOutput, MlpGrads, MlpParams, NnError,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

/// Gradient accumulation fans out over this many fixed chunks per batch;
/// chunk results are reduced in index order so the sum is independent of
/// thread scheduling.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("training example {index} is not a valid expression")]
    InvalidTrainingExample { index: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint does not describe a compatible model: {0}")]
    IncompatibleCheckpoint(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Trained model: encoder (one-hot -> mean/log-variance) and decoder
/// (latent -> L*D logits), plus architecture metadata.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub latent_dim: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub beta: f64,
}

/// Training hyperparameters. Defaults are the desk-scale reference
/// settings; the paper-scale values (more epochs, larger latent) are
/// reachable through the same fields.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub beta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.1,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 256,
            seed: 1,
            latent_dim: 16,
            hidden_width: 256,
        }
    }
}

/// Per-epoch mean losses (per example): cross-entropy, KL, and their
/// beta-weighted total.
#[derive(Debug, Clone, Copy)]
pub struct EpochLoss {
    pub epoch: usize,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
}

/// Decoder output bundle for one latent point.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub logits: Matrix,
    pub ext: ExtendedOutput,
    pub tokens: TokenSequence,
}

/// Closed-form KL divergence of `N(mu, sigma^2)` from `N(0, I)`:
/// `0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1)`.
pub fn kl_divergence(mean: &[f64], logvar: &[f64]) -> f64 {
    mean.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}

/// Flattened one-hot input in the decoder's logit ordering
/// (`x[i*D + j]` covers token `j` at position `i`).
fn one_hot_flat(seq: &TokenSequence) -> Vec<f64> {
    let mut x = vec![0.0; SEQ_LEN * VOCAB_SIZE];
    for (i, t) in seq.tokens().iter().enumerate() {
        x[i * VOCAB_SIZE + t.id()] = 1.0;
    }
    x
}

/// Reshapes a flat decoder output into the `D x L` logits matrix.
pub fn logits_matrix(flat: &[f64], vocab_size: usize, seq_len: usize) -> Matrix {
    assert_eq!(flat.len(), vocab_size * seq_len);
    let mut m = Matrix::zeros(vocab_size, seq_len);
    for i in 0..seq_len {
        for j in 0..vocab_size {
            m.set(j, i, flat[i * vocab_size + j]);
        }
    }
    m
}

/// One chunk of the batch processed as matrices (example rows); every
/// weight matrix is touched once per chunk rather than once per example.
fn chunk_pass(
    encoder: &MlpParams,
    decoder: &MlpParams,
    beta: f64,
    latent_dim: usize,
    x: &Matrix,
    targets: &[&TokenSequence],
    eps: &Matrix,
) -> Result<(MlpGrads, MlpGrads, f64, f64), NnError> {
    let rows = x.rows();
    let d = latent_dim;
    let enc_trace = nn::batched_forward(encoder, x)?;
    let enc_out = enc_trace.post.last().expect("encoder layers");

    // z = mu + sigma * eps, rowwise; KL in closed form.
    let mut z = Matrix::zeros(rows, d);
    let mut sigma = Matrix::zeros(rows, d);
    let mut kl_sum = 0.0;
    for b in 0..rows {
        for k in 0..d {
            let mu = enc_out.get(b, k);
            let lv = enc_out.get(b, d + k);
            let s = (0.5 * lv).exp();
            sigma.set(b, k, s);
            z.set(b, k, mu + s * eps.get(b, k));
            kl_sum += 0.5 * (mu * mu + s * s - lv - 1.0);
        }
    }

    let dec_trace = nn::batched_forward(decoder, &z)?;
    let logits = dec_trace.post.last().expect("decoder layers");

    // Cross-entropy plus its logit gradient (softmax - one-hot) per
    // sequence position.
    let mut ce_sum = 0.0;
    let mut dlogits = Matrix::zeros(rows, SEQ_LEN * VOCAB_SIZE);
    for b in 0..rows {
        let row = logits.row(b);
        let drow = &mut dlogits.data_mut()[b * SEQ_LEN * VOCAB_SIZE..(b + 1) * SEQ_LEN * VOCAB_SIZE];
        for i in 0..SEQ_LEN {
            let col = &row[i * VOCAB_SIZE..(i + 1) * VOCAB_SIZE];
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = col.iter().map(|l| (l - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            let t = targets[b].tokens()[i].id();
            ce_sum += log_z - col[t];
            for j in 0..VOCAB_SIZE {
                let p = (col[j] - log_z).exp();
                drow[i * VOCAB_SIZE + j] = p - if j == t { 1.0 } else { 0.0 };
            }
        }
    }

    let (dec_grads, dz) = nn::batched_backward(decoder, &z, &dec_trace, &dlogits)?;

    // Chain into the encoder: d/d mu = dz + beta mu,
    // d/d logvar = dz * 0.5 sigma eps + beta 0.5 (sigma^2 - 1).
    let mut denc = Matrix::zeros(rows, 2 * d);
    for b in 0..rows {
        for k in 0..d {
            let mu = enc_out.get(b, k);
            let s = sigma.get(b, k);
            denc.set(b, k, dz.get(b, k) + beta * mu);
            denc.set(
                b,
                d + k,
                dz.get(b, k) * 0.5 * s * eps.get(b, k) + beta * 0.5 * (s * s - 1.0),
            );
        }
    }
    let enc_grads = nn::batched_backward_params(encoder, x, &enc_trace, &denc)?;
    Ok((enc_grads, dec_grads, ce_sum, kl_sum))
}

/// Trains a beta-VAE on the dataset. All shuffling and latent sampling is
/// driven by `config.seed`; two runs with the same config and data produce
/// identical parameters.
pub fn train(
    dataset: &[TokenSequence],
    config: &TrainConfig,
) -> Result<(VaeModel, Vec<EpochLoss>), VaeError> {
    if dataset.is_empty() {
        return Err(VaeError::EmptyDataset);
    }
    for (index, seq) in dataset.iter().enumerate() {
        if !grammar::is_valid(seq) {
            return Err(VaeError::InvalidTrainingExample { index });
        }
    }
    let d = config.latent_dim;
    let h = config.hidden_width;
    let input_dim = SEQ_LEN * VOCAB_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = MlpParams::random(&mut rng, &[input_dim, h, 2 * d]);
    let mut decoder = MlpParams::random(&mut rng, &[d, h, h, input_dim]);
    let mut enc_adam = AdamState::new(&encoder, config.learning_rate);
    let mut dec_adam = AdamState::new(&decoder, config.learning_rate);

    let input_dim_total = SEQ_LEN * VOCAB_SIZE;
    let inputs: Vec<Vec<f64>> = dataset.iter().map(one_hot_flat).collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        // Fisher-Yates shuffle from the training stream.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut ce_sum = 0.0;
        let mut kl_sum = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            // Latent noise is drawn sequentially up front so the parallel
            // fan-out below cannot affect the random stream.
            let eps: Vec<Vec<f64>> = batch
                .iter()
                .map(|_| (0..d).map(|_| nn::normal_sample(&mut rng)).collect())
                .collect();

            let chunk_size = batch.len().div_ceil(GRAD_CHUNKS).max(1);
            let chunk_results: Vec<Result<(MlpGrads, MlpGrads, f64, f64), NnError>> = batch
                .par_chunks(chunk_size)
                .enumerate()
                .map(|(chunk_idx, chunk)| {
                    let rows = chunk.len();
                    let mut x = Matrix::zeros(rows, input_dim_total);
                    let mut eps_m = Matrix::zeros(rows, d);
                    let mut targets = Vec::with_capacity(rows);
                    for (off, &ex) in chunk.iter().enumerate() {
                        x.data_mut()[off * input_dim_total..(off + 1) * input_dim_total]
                            .copy_from_slice(&inputs[ex]);
                        let eps_row = &eps[chunk_idx * chunk_size + off];
                        eps_m.data_mut()[off * d..(off + 1) * d].copy_from_slice(eps_row);
                        targets.push(&dataset[ex]);
                    }
                    chunk_pass(&encoder, &decoder, config.beta, d, &x, &targets, &eps_m)
                })
                .collect();

            let mut enc_grads = MlpGrads::zeros_like(&encoder);
            let mut dec_grads = MlpGrads::zeros_like(&decoder);
            let mut batch_ce = 0.0;
            let mut batch_kl = 0.0;
            for res in chunk_results {
                let (e, dgrads, ce, kl) = res?;
                enc_grads.accumulate(&e);
                dec_grads.accumulate(&dgrads);
                batch_ce += ce;
                batch_kl += kl;
            }
            let scale = 1.0 / batch.len() as f64;
            enc_grads.scale(scale);
            dec_grads.scale(scale);
            let batch_loss = (batch_ce + config.beta * batch_kl) * scale;
            if !batch_loss.is_finite() {
                return Err(VaeError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            adam_step(&mut enc_adam, &mut encoder, &enc_grads)?;
            adam_step(&mut dec_adam, &mut decoder, &dec_grads)?;
            ce_sum += batch_ce;
            kl_sum += batch_kl;
        }
        let n = dataset.len() as f64;
        let ce = ce_sum / n;
        let kl = kl_sum / n;
        losses.push(EpochLoss {
            epoch,
            ce,
            kl,
            total: ce + config.beta * kl,
        });
    }

    Ok((
        VaeModel {
            encoder,
            decoder,
            latent_dim: d,
            seq_len: SEQ_LEN,
            vocab_size: VOCAB_SIZE,
            beta: config.beta,
        },
        losses,
    ))
}

impl VaeModel {
    /// Deterministic embedding: the encoder posterior mean, no sampling.
    pub fn encode_mean(&self, seq: &TokenSequence) -> Vec<f64> {
        let x = one_hot_flat(seq);
        let (out, _) = forward(&self.encoder, &x).expect("encoder dims");
        out[..self.latent_dim].to_vec()
    }

    /// Decodes a latent point into logits, the extended softmax output and
    /// the argmax token sequence.
    pub fn decode(&self, z: &[f64]) -> DecodeOutput {
        let (flat, _) = forward(&self.decoder, z).expect("decoder dims");
        let logits = logits_matrix(&flat, self.vocab_size, self.seq_len);
        let ext = softmax_extended(&logits);
        let tokens = grammar::argmax_decode(ext.probs()).expect("probs shape");
        DecodeOutput {
            logits,
            ext,
            tokens,
        }
    }

    /// Mean token-level argmax reconstruction accuracy over a dataset.
    pub fn reconstruction_accuracy(&self, dataset: &[TokenSequence]) -> f64 {
        if dataset.is_empty() {
            return 0.0;
        }
        let correct: usize = dataset
            .par_iter()
            .map(|seq| {
                let z = self.encode_mean(seq);
                let out = self.decode(&z);
                out.tokens
                    .tokens()
                    .iter()
                    .zip(seq.tokens())
                    .filter(|(a, b)| a == b)
                    .count()
            })
            .sum();
        correct as f64 / (dataset.len() * SEQ_LEN) as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), VaeError> {
        let ckpt = Checkpoint {
            latent_dim: self.latent_dim,
            seq_len: self.seq_len,
            vocab_size: self.vocab_size,
            beta: self.beta,
            vocab: grammar::Token::ALL.iter().map(|t| t.name().into()).collect(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        };
        save_checkpoint(&ckpt, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VaeModel, VaeError> {
        let ckpt = load_checkpoint(path)?;
        let model = VaeModel {
            encoder: ckpt.encoder,
            decoder: ckpt.decoder,
            latent_dim: ckpt.latent_dim,
            seq_len: ckpt.seq_len,
            vocab_size: ckpt.vocab_size,
            beta: ckpt.beta,
        };
        if model.seq_len != SEQ_LEN || model.vocab_size != VOCAB_SIZE {
            return Err(VaeError::IncompatibleCheckpoint(format!(
                "sequence geometry {}x{} does not match the expressions domain {}x{}",
                model.vocab_size, model.seq_len, VOCAB_SIZE, SEQ_LEN
            )));
        }
        let expected_vocab: Vec<&str> = grammar::Token::ALL.iter().map(|t| t.name()).collect();
        if ckpt.vocab != expected_vocab {
            return Err(VaeError::IncompatibleCheckpoint(
                "vocabulary names differ from the expressions domain".into(),
            ));
        }
        if model.encoder.input_dim() != SEQ_LEN * VOCAB_SIZE
            || model.encoder.output_dim() != 2 * model.latent_dim
            || model.decoder.input_dim() != model.latent_dim
            || model.decoder.output_dim() != SEQ_LEN * VOCAB_SIZE
        {
            return Err(VaeError::IncompatibleCheckpoint(
                "network shapes disagree with metadata".into(),
            ));
        }
        Ok(model)
    }
}
