//! LES — the log change-of-variables determinant of the extended softmax
//! decoder — computed through two independent routes, its closed-form
//! gradient, the baseline scores (likelihood, prior, polarity, train
//! distance), and AUROC evaluation of all of them.
//!
//! The production route builds the decoder-through-softmax Jacobian
//! `J = C A` (with `A` the logits slope at `z` and `C` the block-diagonal
//! extended-softmax Jacobian) and returns `-0.5 log det(J^T J)`. The
//! verification route follows the pseudo-inverse formulation
//! `+0.5 log det((A^+ B)(A^+ B)^T)` with the inverse-softmax blocks `B_i`;
//! the two must agree wherever neither caps and `A` has full column rank.

use crate::grammar::{self, TokenSequence};
use crate::linalg::{cholesky, gram, matmul, pinv, sym_eigen, LinalgError, Matrix};
use crate::nn::{
    backward, forward, jacobian_with_output, normal_sample, softmax_extended,
    softmax_extended_jacobian, ExtendedOutput,
};
use crate::vae::{logits_matrix, VaeModel};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Eigenvalues below this are treated as an exactly singular volume
/// element.
const EIG_FLOOR: f64 = 1e-300;
/// Scores are clamped to `[-CAP, +CAP]`.
const SCORE_CAP: f64 = 1e4;
/// Fixed neighbor count of the train-distance baseline.
pub const TRAIN_DISTANCE_K: usize = 3;
/// Default size of the encoded-train latent cache.
pub const TRAIN_CACHE_SIZE: usize = 1000;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("latent point contains non-finite values")]
    NonFiniteInput,
    #[error("logits Jacobian is rank deficient (effective rank {effective_rank} of {needed})")]
    RankDeficient {
        effective_rank: usize,
        needed: usize,
    },
    #[error("score gradient unavailable: {0}")]
    GradientUnavailable(String),
    #[error("train latent cache holds {len} points, need at least {needed}")]
    CacheTooSmall { len: usize, needed: usize },
    #[error("AUROC undefined: {n_valid} valid vs {n_invalid} invalid samples")]
    UndefinedMetric { n_valid: usize, n_invalid: usize },
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// The five scores this crate evaluates. For every kind, larger values
/// claim "more in-distribution"; train distance is negated to match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    Les,
    Likelihood,
    Prior,
    Polarity,
    TrainDistance,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 5] = [
        ScoreKind::Les,
        ScoreKind::Likelihood,
        ScoreKind::Prior,
        ScoreKind::Polarity,
        ScoreKind::TrainDistance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Les => "les",
            ScoreKind::Likelihood => "likelihood",
            ScoreKind::Prior => "prior",
            ScoreKind::Polarity => "polarity",
            ScoreKind::TrainDistance => "train_distance",
        }
    }
}

/// A score plus a flag recording that the numerical floor or cap engaged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreValue {
    pub value: f64,
    pub capped: bool,
}

impl ScoreValue {
    fn finite(value: f64) -> Self {
        ScoreValue {
            value,
            capped: false,
        }
    }

    fn at_cap(value: f64) -> Self {
        ScoreValue {
            value,
            capped: true,
        }
    }
}

fn check_finite(z: &[f64]) -> Result<(), ScoreError> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ScoreError::NonFiniteInput)
    }
}

/// Decoder logits slope `A` at `z` (rows ordered position-major to match
/// the flat decoder output) together with the extended softmax of the
/// logits there.
fn logits_jacobian_and_ext(model: &VaeModel, z: &[f64]) -> (Matrix, ExtendedOutput) {
    let (flat, a) = jacobian_with_output(&model.decoder, z).expect("decoder dims");
    let logits = logits_matrix(&flat, model.vocab_size, model.seq_len);
    (a, softmax_extended(&logits))
}

/// Stacks `J = C A`: per position the extended-softmax Jacobian block
/// `(D+1) x D` times the matching `D x d` slice of `A`.
fn pushforward_jacobian(model: &VaeModel, a: &Matrix, ext: &ExtendedOutput) -> Matrix {
    let (d_vocab, l, d) = (model.vocab_size, model.seq_len, model.latent_dim);
    let mut j = Matrix::zeros(l * (d_vocab + 1), d);
    for i in 0..l {
        let block = softmax_extended_jacobian(ext, i);
        for r in 0..d_vocab + 1 {
            for col in 0..d {
                let mut acc = 0.0;
                for k in 0..d_vocab {
                    acc += block.get(r, k) * a.get(i * d_vocab + k, col);
                }
                j.set(i * (d_vocab + 1) + r, col, acc);
            }
        }
    }
    j
}

/// `-0.5 sum(log eig)` with the floor/cap policy: a sub-floor or
/// non-finite eigenvalue means the determinant is numerically zero, which
/// saturates the score at `+CAP`; otherwise the sum is clamped to the cap.
fn neg_half_logdet(eigs: &[f64]) -> ScoreValue {
    let mut sum = 0.0;
    for &lambda in eigs {
        if !lambda.is_finite() || lambda < EIG_FLOOR {
            return ScoreValue::at_cap(SCORE_CAP);
        }
        sum += lambda.ln();
    }
    let raw = -0.5 * sum;
    let value = raw.clamp(-SCORE_CAP, SCORE_CAP);
    ScoreValue {
        value,
        capped: value != raw,
    }
}

/// Latent Exploration Score via the inverse-function-theorem route:
/// `S(z) = -0.5 log det(J^T J)` for `J = C A`.
pub fn les(model: &VaeModel, z: &[f64]) -> Result<ScoreValue, ScoreError> {
    check_finite(z)?;
    let (a, ext) = logits_jacobian_and_ext(model, z);
    let j = pushforward_jacobian(model, &a, &ext);
    if !j.is_finite() {
        // An overflowing inverse normalizing constant means the extended
        // output runs away; the density there is numerically zero.
        return Ok(ScoreValue::at_cap(-SCORE_CAP));
    }
    let m = gram(&j);
    let (eigs, _) = sym_eigen(&m)?;
    Ok(neg_half_logdet(&eigs))
}

/// Inverse-softmax Jacobian block `B_i`: the derivative of
/// `(p, c^{-1}) -> log p + log c`, i.e. `[diag(1/p) | -c * 1]`, `D x (D+1)`.
pub(crate) fn inverse_softmax_jacobian_block(p: &[f64], inv_norm: f64) -> Matrix {
    let d = p.len();
    let c = 1.0 / inv_norm;
    let mut b = Matrix::zeros(d, d + 1);
    for r in 0..d {
        b.set(r, r, 1.0 / p[r]);
        b.set(r, d, -c);
    }
    b
}

/// Orthonormal basis for the column span of `m`, by modified Gram-Schmidt
/// with one re-orthogonalization pass. Returns `None` when a column
/// collapses, i.e. the span is rank deficient.
fn orthonormal_column_basis(m: &Matrix) -> Option<Matrix> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut q = m.clone();
    for c in 0..cols {
        for _pass in 0..2 {
            for prev in 0..c {
                let mut dot = 0.0;
                for r in 0..rows {
                    dot += q.get(r, prev) * q.get(r, c);
                }
                for r in 0..rows {
                    let v = q.get(r, c) - dot * q.get(r, prev);
                    q.set(r, c, v);
                }
            }
        }
        let norm: f64 = (0..rows).map(|r| q.get(r, c) * q.get(r, c)).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-150 {
            return None;
        }
        for r in 0..rows {
            q.set(r, c, q.get(r, c) / norm);
        }
    }
    Some(q)
}

/// LES via the pseudo-inverse route, used as a cross-check oracle for
/// [`les`]: builds `N = A^+ B_blockdiag` from the Moore-Penrose inverse of
/// the logits slope and the inverse-softmax blocks `B_i`, restricts `N` to
/// the tangent span of the decoder image (the inverse Jacobian only has
/// meaning there; `N` is one of many left inverses off that span), and
/// returns `+0.5 log det((N U)(N U)^T)` for an orthonormal tangent basis
/// `U`. Because `N (C A) = I`, this equals `-0.5 log det(J^T J)` exactly
/// wherever `A` has full column rank.
///
/// Errors when the logits Jacobian lacks full column rank — the degeneracy
/// case where the pushforward density stops being meaningful.
pub fn les_appendix(model: &VaeModel, z: &[f64]) -> Result<ScoreValue, ScoreError> {
    check_finite(z)?;
    let (a, ext) = logits_jacobian_and_ext(model, z);
    let d = model.latent_dim;
    let p_inv = pinv(&a)?;
    if p_inv.effective_rank < d {
        return Err(ScoreError::RankDeficient {
            effective_rank: p_inv.effective_rank,
            needed: d,
        });
    }
    // A Gram-based eigensolver resolves eigenvalues only down to roughly
    // machine epsilon times the largest one; below that, a "kept" singular
    // value is noise and the pseudo-inverse amplifies it. Decline any
    // point whose slope spectrum this route cannot certify.
    let (eig_a, _) = sym_eigen(&gram(&a))?;
    let resolvable = eig_a.iter().filter(|l| **l >= 1e-8 * eig_a[0]).count();
    if resolvable < d {
        return Err(ScoreError::RankDeficient {
            effective_rank: resolvable,
            needed: d,
        });
    }
    let (d_vocab, l) = (model.vocab_size, model.seq_len);
    // N = A^+ B_blockdiag, built block by block: the i-th column group of
    // A^+ times B_i.
    let mut n = Matrix::zeros(d, l * (d_vocab + 1));
    for i in 0..l {
        let b = inverse_softmax_jacobian_block(&ext.prob_column(i), ext.inv_norms()[i]);
        for r in 0..d {
            for col in 0..d_vocab + 1 {
                let mut acc = 0.0;
                for k in 0..d_vocab {
                    acc += p_inv.matrix.get(r, i * d_vocab + k) * b.get(k, col);
                }
                n.set(r, i * (d_vocab + 1) + col, acc);
            }
        }
    }
    if !n.is_finite() {
        return Ok(ScoreValue::at_cap(SCORE_CAP));
    }
    let tangent = pushforward_jacobian(model, &a, &ext);
    // Same certification for the composed Jacobian: saturated softmax
    // columns shrink tangent directions below what the forward route's
    // Gram spectrum can represent, and agreement is meaningless there.
    let (eig_j, _) = sym_eigen(&gram(&tangent))?;
    let resolvable_j = eig_j.iter().filter(|l| **l >= 1e-8 * eig_j[0]).count();
    if resolvable_j < d {
        return Err(ScoreError::RankDeficient {
            effective_rank: resolvable_j,
            needed: d,
        });
    }
    let basis = match orthonormal_column_basis(&tangent) {
        Some(q) => q,
        // A collapsed tangent direction is the flat/saturated limit.
        None => return Ok(ScoreValue::at_cap(SCORE_CAP)),
    };
    let restricted = matmul(&n, &basis)?;
    let m = gram(&restricted.transpose());
    let (eigs, _) = sym_eigen(&m)?;
    // Mirror of the forward-route policy with the sign flipped.
    let mut sum = 0.0;
    let mut capped = false;
    for &lambda in &eigs {
        if !lambda.is_finite() || lambda > 1.0 / EIG_FLOOR {
            return Ok(ScoreValue::at_cap(SCORE_CAP));
        }
        let floored = lambda.max(EIG_FLOOR);
        capped |= floored != lambda;
        sum += floored.ln();
    }
    let raw = 0.5 * sum;
    let value = raw.clamp(-SCORE_CAP, SCORE_CAP);
    Ok(ScoreValue {
        value,
        capped: capped || value != raw,
    })
}

/// Closed-form LES gradient. Holds the CPA slope `A` fixed (its derivative
/// is zero within a linear region) and differentiates through the extended
/// softmax only: `dS/dz_k = -tr((J^T J)^{-1} J^T dJ/dz_k)`.
pub fn les_gradient(model: &VaeModel, z: &[f64]) -> Result<Vec<f64>, ScoreError> {
    check_finite(z)?;
    let (a, ext) = logits_jacobian_and_ext(model, z);
    let j = pushforward_jacobian(model, &a, &ext);
    if !j.is_finite() {
        return Err(ScoreError::GradientUnavailable(
            "pushforward Jacobian is not finite".into(),
        ));
    }
    let m = gram(&j);
    let d = model.latent_dim;
    let max_diag = (0..d).fold(0.0_f64, |acc, i| acc.max(m.get(i, i)));
    let chol = cholesky(&m, 1e-12 * max_diag.max(f64::MIN_POSITIVE))
        .map_err(|e| ScoreError::GradientUnavailable(format!("J^T J not invertible: {e}")))?;
    let (d_vocab, l) = (model.vocab_size, model.seq_len);
    let block_rows = d_vocab + 1;

    // H = J M^{-1}, solved row by row.
    let mut h = Matrix::zeros(l * block_rows, d);
    {
        let mut col = vec![0.0; d];
        for r in 0..l * block_rows {
            for (k, c) in col.iter_mut().enumerate() {
                *c = j.get(r, k);
            }
            let solved = chol.solve(&col);
            for k in 0..d {
                h.set(r, k, solved[k]);
            }
        }
    }

    let mut grad = vec![0.0; d];
    let mut dc = Matrix::zeros(block_rows, d_vocab);
    let mut dp = vec![0.0; d_vocab];
    for i in 0..l {
        let p = ext.prob_column(i);
        let inv_c = ext.inv_norms()[i];
        // G_i = A_i H_i^T (D x (D+1)); the contribution of direction k is
        // tr(G_i dC_i(k)).
        let mut g = Matrix::zeros(d_vocab, block_rows);
        for r in 0..d_vocab {
            for c in 0..block_rows {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += a.get(i * d_vocab + r, k) * h.get(i * block_rows + c, k);
                }
                g.set(r, c, acc);
            }
        }
        for (k, gk) in grad.iter_mut().enumerate() {
            // Directional logit change at this position for basis k.
            let mut s = 0.0;
            for jdx in 0..d_vocab {
                s += p[jdx] * a.get(i * d_vocab + jdx, k);
            }
            for jdx in 0..d_vocab {
                dp[jdx] = p[jdx] * (a.get(i * d_vocab + jdx, k) - s);
            }
            // dC rows 0..D: diag(dp) - dp p^T - p dp^T; row D:
            // c^{-1} (s p - dp).
            for r in 0..d_vocab {
                for c in 0..d_vocab {
                    let mut v = -dp[r] * p[c] - p[r] * dp[c];
                    if r == c {
                        v += dp[r];
                    }
                    dc.set(r, c, v);
                }
            }
            for c in 0..d_vocab {
                dc.set(d_vocab, c, inv_c * (s * p[c] - dp[c]));
            }
            let mut tr = 0.0;
            for r in 0..d_vocab {
                for c in 0..block_rows {
                    tr += g.get(r, c) * dc.get(c, r);
                }
            }
            *gk -= tr;
        }
    }
    Ok(grad)
}

/// Central finite differences of [`les`]; the fallback configured via
/// [`crate::bo::AcqConfig`] and the oracle the analytic gradient is tested
/// against.
pub fn les_gradient_fd(model: &VaeModel, z: &[f64], h: f64) -> Result<Vec<f64>, ScoreError> {
    check_finite(z)?;
    let mut grad = vec![0.0; z.len()];
    let mut zp = z.to_vec();
    for k in 0..z.len() {
        zp[k] = z[k] + h;
        let plus = les(model, &zp)?.value;
        zp[k] = z[k] - h;
        let minus = les(model, &zp)?.value;
        zp[k] = z[k];
        grad[k] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Log of the probability of the most likely output sequence:
/// `sum_i log max_j p^(i)_j`, evaluated stably from the logits.
pub fn likelihood(model: &VaeModel, z: &[f64]) -> Result<ScoreValue, ScoreError> {
    check_finite(z)?;
    let (flat, _) = forward(&model.decoder, z).expect("decoder dims");
    let (d_vocab, l) = (model.vocab_size, model.seq_len);
    let mut score = 0.0;
    for i in 0..l {
        let col = &flat[i * d_vocab..(i + 1) * d_vocab];
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = col.iter().map(|v| (v - max).exp()).sum();
        // log max_j p_j = max logit - logsumexp = -log sum exp(l - max)
        score -= sum_exp.ln();
    }
    Ok(ScoreValue::finite(score))
}

/// Gradient of [`likelihood`] with the argmax set held fixed: the decoder
/// backward pass seeded with `one_hot(argmax) - p` per position.
pub fn likelihood_gradient(model: &VaeModel, z: &[f64]) -> Result<Vec<f64>, ScoreError> {
    check_finite(z)?;
    let (flat, trace) = forward(&model.decoder, z).expect("decoder dims");
    let (d_vocab, l) = (model.vocab_size, model.seq_len);
    let mut seed = vec![0.0; flat.len()];
    for i in 0..l {
        let col = &flat[i * d_vocab..(i + 1) * d_vocab];
        let mut argmax = 0;
        for j in 1..d_vocab {
            if col[j] > col[argmax] {
                argmax = j;
            }
        }
        let max = col[argmax];
        let sum_exp: f64 = col.iter().map(|v| (v - max).exp()).sum();
        for j in 0..d_vocab {
            let p = (col[j] - max).exp() / sum_exp;
            seed[i * d_vocab + j] = if j == argmax { 1.0 - p } else { -p };
        }
    }
    let (_, input_grad) = backward(&model.decoder, &trace, &seed).expect("trace fresh");
    Ok(input_grad)
}

/// Standard-normal log-density `log N(z; 0, I)`.
pub fn prior_score(z: &[f64]) -> ScoreValue {
    let d = z.len() as f64;
    let sq: f64 = z.iter().map(|v| v * v).sum();
    ScoreValue::finite(-0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * sq)
}

/// Gradient of [`prior_score`], exactly `-z`.
pub fn prior_gradient(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| -v).collect()
}

/// Polarity baseline: `-0.5 log det(A^T A)` of the raw logits Jacobian —
/// LES without the softmax factor.
pub fn polarity(model: &VaeModel, z: &[f64]) -> Result<ScoreValue, ScoreError> {
    check_finite(z)?;
    let (a, _) = logits_jacobian_and_ext(model, z);
    let m = gram(&a);
    let (eigs, _) = sym_eigen(&m)?;
    Ok(neg_half_logdet(&eigs))
}

/// Encoded training latents backing the train-distance baseline.
#[derive(Debug, Clone)]
pub struct TrainLatentCache {
    latents: Vec<Vec<f64>>,
    /// True when the dataset had fewer rows than the requested cache size.
    pub undersized: bool,
}

impl TrainLatentCache {
    /// Encodes a random sample of up to [`TRAIN_CACHE_SIZE`] dataset rows.
    pub fn build<R: Rng>(model: &VaeModel, dataset: &[TokenSequence], rng: &mut R) -> Self {
        let n = dataset.len();
        let take = n.min(TRAIN_CACHE_SIZE);
        let mut indices: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: the first `take` entries are a uniform
        // sample without replacement.
        for i in 0..take {
            let j = rng.gen_range(i..n);
            indices.swap(i, j);
        }
        let latents = indices[..take]
            .par_iter()
            .map(|&idx| model.encode_mean(&dataset[idx]))
            .collect();
        TrainLatentCache {
            latents,
            undersized: n < TRAIN_CACHE_SIZE,
        }
    }

    pub fn from_latents(latents: Vec<Vec<f64>>) -> Self {
        let undersized = latents.len() < TRAIN_CACHE_SIZE;
        TrainLatentCache {
            latents,
            undersized,
        }
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// Negated mean Euclidean distance to the three nearest cached training
/// latents (negated so higher means more in-distribution).
pub fn train_distance_score(cache: &TrainLatentCache, z: &[f64]) -> Result<ScoreValue, ScoreError> {
    if cache.latents.len() < TRAIN_DISTANCE_K {
        return Err(ScoreError::CacheTooSmall {
            len: cache.latents.len(),
            needed: TRAIN_DISTANCE_K,
        });
    }
    check_finite(z)?;
    let mut best = [f64::INFINITY; TRAIN_DISTANCE_K];
    for point in &cache.latents {
        let d: f64 = point
            .iter()
            .zip(z)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        // Keep the three smallest distances seen so far.
        if d < best[TRAIN_DISTANCE_K - 1] {
            best[TRAIN_DISTANCE_K - 1] = d;
            let mut i = TRAIN_DISTANCE_K - 1;
            while i > 0 && best[i] < best[i - 1] {
                best.swap(i, i - 1);
                i -= 1;
            }
        }
    }
    let mean = best.iter().sum::<f64>() / TRAIN_DISTANCE_K as f64;
    Ok(ScoreValue::finite(-mean))
}

/// AUROC by rank sum over a stable sort, ties counted one half. Errors on
/// single-class input.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, ScoreError> {
    if scores.len() != labels.len() {
        return Err(ScoreError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ScoreError::UndefinedMetric {
            n_valid: n_pos,
            n_invalid: n_neg,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average ranks within tied groups (1-based ranks).
    let mut rank_pos_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share the average.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_pos_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_pos_sum - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Which distribution a protocol sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleGroup {
    Train,
    Prior,
    Ood,
}

impl SampleGroup {
    pub fn name(self) -> &'static str {
        match self {
            SampleGroup::Train => "train",
            SampleGroup::Prior => "prior",
            SampleGroup::Ood => "ood",
        }
    }
}

/// One scored latent sample of the evaluation protocol.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub group: SampleGroup,
    pub valid: bool,
    pub les: ScoreValue,
    pub likelihood: f64,
    pub prior: f64,
    pub polarity: ScoreValue,
    pub train_distance: f64,
}

impl ScoreRow {
    pub fn score_of(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Les => self.les.value,
            ScoreKind::Likelihood => self.likelihood,
            ScoreKind::Prior => self.prior,
            ScoreKind::Polarity => self.polarity.value,
            ScoreKind::TrainDistance => self.train_distance,
        }
    }
}

/// Samples `n_per_group` latents each from encoded train data, the prior
/// `N(0, I)` and the out-of-distribution `N(0, ood_std^2 I)`, decodes each,
/// labels validity, and evaluates all five scores.
pub fn eval_scores_protocol<R: Rng>(
    model: &VaeModel,
    cache: &TrainLatentCache,
    dataset: &[TokenSequence],
    n_per_group: usize,
    ood_std: f64,
    rng: &mut R,
) -> Result<Vec<ScoreRow>, ScoreError> {
    let d = model.latent_dim;
    let mut points: Vec<(SampleGroup, Vec<f64>)> = Vec::with_capacity(3 * n_per_group);
    for _ in 0..n_per_group {
        let idx = rng.gen_range(0..dataset.len());
        points.push((SampleGroup::Train, model.encode_mean(&dataset[idx])));
    }
    for _ in 0..n_per_group {
        let z: Vec<f64> = (0..d).map(|_| normal_sample(rng)).collect();
        points.push((SampleGroup::Prior, z));
    }
    for _ in 0..n_per_group {
        let z: Vec<f64> = (0..d).map(|_| ood_std * normal_sample(rng)).collect();
        points.push((SampleGroup::Ood, z));
    }
    points
        .par_iter()
        .map(|(group, z)| {
            let decoded = model.decode(z);
            Ok(ScoreRow {
                group: *group,
                valid: grammar::is_valid(&decoded.tokens),
                les: les(model, z)?,
                likelihood: likelihood(model, z)?.value,
                prior: prior_score(z).value,
                polarity: polarity(model, z)?,
                train_distance: train_distance_score(cache, z)?.value,
            })
        })
        .collect()
}

/// AUROC of every score kind against the validity labels of the rows.
pub fn auroc_summary(rows: &[ScoreRow]) -> Result<Vec<(ScoreKind, f64)>, ScoreError> {
    let labels: Vec<bool> = rows.iter().map(|r| r.valid).collect();
    ScoreKind::ALL
        .iter()
        .map(|kind| {
            let scores: Vec<f64> = rows.iter().map(|r| r.score_of(*kind)).collect();
            auroc(&scores, &labels).map(|v| (*kind, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{SEQ_LEN, VOCAB_SIZE};
    use crate::nn::{Layer, MlpParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Score-only model wrapper around an arbitrary decoder; the encoder
    /// is a placeholder that scoring never touches.
    fn decoder_model(decoder: MlpParams, seq_len: usize, vocab_size: usize) -> VaeModel {
        let d = decoder.input_dim();
        assert_eq!(decoder.output_dim(), seq_len * vocab_size);
        VaeModel {
            encoder: MlpParams::new(vec![Layer::new(
                Matrix::zeros(2 * d, seq_len * vocab_size),
                vec![0.0; 2 * d],
            )]),
            decoder,
            latent_dim: d,
            seq_len,
            vocab_size,
            beta: 1.0,
        }
    }

    /// The d=1, L=1, D=2 toy: logits (z, -z).
    fn toy_model() -> VaeModel {
        let decoder = MlpParams::new(vec![Layer::new(
            Matrix::from_rows(2, 1, &[1.0, -1.0]),
            vec![0.0, 0.0],
        )]);
        decoder_model(decoder, 1, 2)
    }

    fn random_decoder_model(rng: &mut ChaCha8Rng, d: usize, l: usize, v: usize) -> VaeModel {
        let decoder = MlpParams::random(rng, &[d, 8, l * v]);
        decoder_model(decoder, l, v)
    }

    #[test]
    fn toy_forward_route_value() {
        let model = toy_model();
        let s = les(&model, &[0.0]).unwrap();
        assert!(!s.capped);
        assert!((s.value - 0.5 * 2.0_f64.ln()).abs() < 1e-12, "{}", s.value);
    }

    #[test]
    fn toy_pushforward_jacobian_matches_finite_differences() {
        // Independent oracle: central differences of the extended output
        // (p1, p2, c^{-1}) with respect to z.
        let model = toy_model();
        let extended = |z: f64| -> [f64; 3] {
            let p1 = 1.0 / (1.0 + (-2.0 * z).exp());
            let c = z.exp() + (-z).exp();
            [p1, 1.0 - p1, 1.0 / c]
        };
        let h = 1e-6;
        let plus = extended(h);
        let minus = extended(-h);
        let (a, ext) = logits_jacobian_and_ext(&model, &[0.0]);
        let j = pushforward_jacobian(&model, &a, &ext);
        for r in 0..3 {
            let fd = (plus[r] - minus[r]) / (2.0 * h);
            assert!(
                (j.get(r, 0) - fd).abs() < 1e-9,
                "row {r}: {} vs {fd}",
                j.get(r, 0)
            );
        }
        assert!((j.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((j.get(1, 0) + 0.5).abs() < 1e-12);
        assert!(j.get(2, 0).abs() < 1e-12);
    }

    #[test]
    fn toy_appendix_route_hand_values() {
        let model = toy_model();
        // B at p = (1/2, 1/2), c = 2.
        let b = inverse_softmax_jacobian_block(&[0.5, 0.5], 0.5);
        let expected = [[2.0, 0.0, -2.0], [0.0, 2.0, -2.0]];
        for r in 0..2 {
            for c in 0..3 {
                assert!((b.get(r, c) - expected[r][c]).abs() < 1e-15);
            }
        }
        let s = les_appendix(&model, &[0.0]).unwrap();
        assert!((s.value - 0.5 * 2.0_f64.ln()).abs() < 1e-12);
        // The two routes agree on the toy case.
        let f = les(&model, &[0.0]).unwrap();
        assert!((s.value - f.value).abs() < 1e-12);
    }

    #[test]
    fn uniform_position_block_closed_form() {
        // p = 1/D everywhere gives diag(D) with last column -D.
        let d = 4;
        let p = vec![0.25; d];
        let b = inverse_softmax_jacobian_block(&p, 0.25);
        for r in 0..d {
            for c in 0..d {
                let expected = if r == c { 4.0 } else { 0.0 };
                assert!((b.get(r, c) - expected).abs() < 1e-15);
            }
            assert!((b.get(r, d) + 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_decoder_caps_high() {
        let decoder = MlpParams::new(vec![Layer::new(
            Matrix::from_rows(2, 1, &[1000.0, -1000.0]),
            vec![0.0, 0.0],
        )]);
        let model = decoder_model(decoder, 1, 2);
        let s = les(&model, &[5.0]).unwrap();
        assert!(s.capped);
        assert_eq!(s.value, 1e4);
    }

    #[test]
    fn les_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_decoder_model(&mut rng, 4, 3, 5);
        let z = [0.3, -0.2, 0.9, 0.1];
        let a = les(&model, &z).unwrap();
        let b = les(&model, &z).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn les_rejects_non_finite_input() {
        let model = toy_model();
        assert!(matches!(
            les(&model, &[f64::NAN]),
            Err(ScoreError::NonFiniteInput)
        ));
    }

    #[test]
    fn two_routes_agree_on_random_small_decoders() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        for trial in 0..10 {
            let d = 1 + (trial % 4);
            let l = 1 + (trial % 3);
            let v = 2 + (trial % 3);
            let model = random_decoder_model(&mut rng, d, l, v);
            for _ in 0..20 {
                let z: Vec<f64> = (0..d).map(|_| normal_sample(&mut rng)).collect();
                let forward_route = les(&model, &z).unwrap();
                let appendix = match les_appendix(&model, &z) {
                    Ok(v) => v,
                    Err(ScoreError::RankDeficient { .. }) => continue,
                    Err(e) => panic!("unexpected error {e}"),
                };
                if forward_route.capped || appendix.capped {
                    continue;
                }
                checked += 1;
                let tol = 1e-6 * (1.0 + forward_route.value.abs());
                assert!(
                    (forward_route.value - appendix.value).abs() <= tol,
                    "routes disagree: {} vs {}",
                    forward_route.value,
                    appendix.value
                );
            }
        }
        assert!(checked > 100, "only {checked} comparisons ran");
    }

    #[test]
    fn les_invariant_under_zero_weight_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_decoder_model(&mut rng, 3, 2, 4);
        let z = [0.4, -0.1, 0.2];
        let before = les(&model, &z).unwrap().value;

        // Append an all-zero hidden unit: one zero row in layer 0, one
        // zero column in layer 1.
        let l0 = &model.decoder.layers()[0];
        let l1 = &model.decoder.layers()[1];
        let h = l0.out_dim();
        let mut w0 = Matrix::zeros(h + 1, l0.in_dim());
        for r in 0..h {
            for c in 0..l0.in_dim() {
                w0.set(r, c, l0.weight.get(r, c));
            }
        }
        let mut b0 = l0.bias.clone();
        b0.push(0.0);
        let mut w1 = Matrix::zeros(l1.out_dim(), h + 1);
        for r in 0..l1.out_dim() {
            for c in 0..h {
                w1.set(r, c, l1.weight.get(r, c));
            }
        }
        let padded = decoder_model(
            MlpParams::new(vec![Layer::new(w0, b0), Layer::new(w1, l1.bias.clone())]),
            2,
            4,
        );
        let after = les(&padded, &z).unwrap().value;
        assert!((before - after).abs() < 1e-10);
    }

    #[test]
    fn gradient_vanishes_at_symmetric_point() {
        let model = toy_model();
        let g = les_gradient(&model, &[0.0]).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g[0].abs() < 1e-12, "gradient {g:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 10 {
            let model = random_decoder_model(&mut rng, 3, 2, 4);
            let z: Vec<f64> = (0..3).map(|_| normal_sample(&mut rng)).collect();
            let (_, trace) = forward(&model.decoder, &z).unwrap();
            if !trace.kink_distance_above(1e-3) {
                continue;
            }
            if les(&model, &z).unwrap().capped {
                continue;
            }
            let analytic = les_gradient(&model, &z).unwrap();
            let fd = les_gradient_fd(&model, &z, 1e-4).unwrap();
            let scale = fd.iter().map(|v| v.abs()).fold(1.0_f64, f64::max);
            for k in 0..3 {
                assert!(
                    (analytic[k] - fd[k]).abs() <= 1e-3 * scale,
                    "component {k}: {} vs {}",
                    analytic[k],
                    fd[k]
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn likelihood_uniform_decoder() {
        // Zero decoder: all logits equal, p = 1/D everywhere.
        let decoder = MlpParams::new(vec![Layer::new(
            Matrix::zeros(SEQ_LEN * VOCAB_SIZE, 3),
            vec![0.0; SEQ_LEN * VOCAB_SIZE],
        )]);
        let model = decoder_model(decoder, SEQ_LEN, VOCAB_SIZE);
        let s = likelihood(&model, &[0.0, 0.0, 0.0]).unwrap();
        let expected = -(SEQ_LEN as f64) * (VOCAB_SIZE as f64).ln();
        assert!((s.value - expected).abs() < 1e-10, "{}", s.value);
    }

    #[test]
    fn likelihood_saturates_toward_zero() {
        let mut bias = vec![0.0; SEQ_LEN * VOCAB_SIZE];
        for i in 0..SEQ_LEN {
            bias[i * VOCAB_SIZE + 1] = 25.0;
        }
        let decoder = MlpParams::new(vec![Layer::new(
            Matrix::zeros(SEQ_LEN * VOCAB_SIZE, 2),
            bias,
        )]);
        let model = decoder_model(decoder, SEQ_LEN, VOCAB_SIZE);
        let s = likelihood(&model, &[0.0, 0.0]).unwrap();
        assert!(s.value < 0.0 && s.value > -1e-8, "{}", s.value);
    }

    #[test]
    fn likelihood_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_decoder_model(&mut rng, 3, 2, 4);
        let argmaxes = |z: &[f64]| -> Vec<usize> {
            let (flat, _) = forward(&model.decoder, z).unwrap();
            (0..2)
                .map(|i| {
                    let col = &flat[i * 4..(i + 1) * 4];
                    (0..4)
                        .max_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap())
                        .unwrap()
                })
                .collect()
        };
        let mut checked = 0;
        while checked < 5 {
            let z: Vec<f64> = (0..3).map(|_| normal_sample(&mut rng)).collect();
            let grad = likelihood_gradient(&model, &z).unwrap();
            let h = 1e-5;
            let mut stable = true;
            let mut fd = vec![0.0; 3];
            for k in 0..3 {
                let mut zp = z.clone();
                zp[k] += h;
                let mut zm = z.clone();
                zm[k] -= h;
                if argmaxes(&zp) != argmaxes(&zm) {
                    stable = false;
                    break;
                }
                fd[k] = (likelihood(&model, &zp).unwrap().value
                    - likelihood(&model, &zm).unwrap().value)
                    / (2.0 * h);
            }
            if !stable {
                continue;
            }
            for k in 0..3 {
                assert!(
                    (grad[k] - fd[k]).abs() <= 1e-4 * (1.0 + fd[k].abs()),
                    "{} vs {}",
                    grad[k],
                    fd[k]
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn prior_score_closed_form() {
        let z = vec![0.0; 16];
        let s = prior_score(&z);
        assert!((s.value + 8.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let g = prior_gradient(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g[0], -1.0);
        assert!(g[1..].iter().all(|v| *v == 0.0));
        // Monotone decrease in the norm.
        assert!(prior_score(&[0.5, 0.0]).value > prior_score(&[2.0, 0.0]).value);
    }

    #[test]
    fn polarity_toy_and_linear_constancy() {
        let model = toy_model();
        let s = polarity(&model, &[0.3]).unwrap();
        assert!((s.value + 0.5 * 2.0_f64.ln()).abs() < 1e-12);
        // A linear decoder has one region: polarity constant in z.
        let s2 = polarity(&model, &[-4.0]).unwrap();
        assert_eq!(s.value, s2.value);
    }

    #[test]
    fn les_minus_polarity_positive_at_uniform_probabilities() {
        // Zero bias at z = 0 gives exactly uniform softmax columns.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let mut w = Matrix::zeros(6, 2);
            for v in w.data_mut() {
                *v = normal_sample(&mut rng);
            }
            let decoder = MlpParams::new(vec![Layer::new(w, vec![0.0; 6])]);
            let model = decoder_model(decoder, 2, 3);
            let z = [0.0, 0.0];
            let l = les(&model, &z).unwrap();
            let p = polarity(&model, &z).unwrap();
            assert!(
                l.value - p.value > 0.0,
                "les {} vs polarity {}",
                l.value,
                p.value
            );
        }
    }

    #[test]
    fn train_distance_zero_on_duplicated_cache_point() {
        let z = vec![0.5, -0.5];
        let cache = TrainLatentCache::from_latents(vec![z.clone(), z.clone(), z.clone()]);
        let s = train_distance_score(&cache, &z).unwrap();
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn train_distance_far_point_is_large_negative() {
        let cache =
            TrainLatentCache::from_latents(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = train_distance_score(&cache, &[1e3, 0.0]).unwrap();
        assert!(s.value < -900.0);
    }

    #[test]
    fn train_distance_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let latents: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| normal_sample(&mut rng)).collect())
            .collect();
        let cache = TrainLatentCache::from_latents(latents.clone());
        for _ in 0..100 {
            let z: Vec<f64> = (0..3).map(|_| normal_sample(&mut rng)).collect();
            let got = train_distance_score(&cache, &z).unwrap().value;
            // Exhaustive oracle: sort all distances, take the first three.
            let mut dists: Vec<f64> = latents
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&z)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expected = -(dists[..3].iter().sum::<f64>() / 3.0);
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn train_distance_requires_three_points() {
        let cache = TrainLatentCache::from_latents(vec![vec![0.0]]);
        assert!(matches!(
            train_distance_score(&cache, &[0.0]),
            Err(ScoreError::CacheTooSmall { .. })
        ));
    }

    #[test]
    fn auroc_perfect_separation() {
        let v = auroc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        let v = auroc(&[0.3, 0.3, 0.3, 0.3], &[true, false, true, false]).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn auroc_pairwise_example() {
        // 1 correct of 2 positive-negative pairs.
        let v = auroc(&[0.5, 0.3, 0.8], &[true, false, false]).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn auroc_single_class_is_error() {
        assert!(matches!(
            auroc(&[0.1, 0.2], &[true, true]),
            Err(ScoreError::UndefinedMetric { .. })
        ));
    }

    fn auroc_pairwise_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auroc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = 2 + rng.gen_range(0..60);
            // Quantized scores so ties actually occur.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..10) as f64) / 10.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            labels[0] = true;
            labels[1] = false;
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_pairwise_oracle(&scores, &labels);
            assert_eq!(fast, slow, "rank-sum vs pairwise");
        }
    }

    #[test]
    fn auroc_complement_and_monotone_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = 10;
            let scores: Vec<f64> = (0..n).map(|_| normal_sample(&mut rng)).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            labels[0] = true;
            labels[1] = false;
            let v = auroc(&scores, &labels).unwrap();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            assert_eq!(v + auroc(&neg, &labels).unwrap(), 1.0);
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            assert_eq!(v, auroc(&exp, &labels).unwrap());
            let scaled: Vec<f64> = scores.iter().map(|s| 10.0 * s).collect();
            assert_eq!(v, auroc(&scaled, &labels).unwrap());
        }
    }

    #[test]
    fn protocol_group_sizes_and_scores_finite() {
        use crate::vae::{train, TrainConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data: Vec<TokenSequence> = (0..120)
            .map(|_| grammar::sample_expression(&mut rng, 16).unwrap())
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            latent_dim: 4,
            hidden_width: 32,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let (model, _) = train(&data, &cfg).unwrap();
        let cache = TrainLatentCache::build(&model, &data, &mut rng);
        assert!(cache.undersized);
        let rows = eval_scores_protocol(&model, &cache, &data, 20, 5.0, &mut rng).unwrap();
        assert_eq!(rows.len(), 60);
        for group in [SampleGroup::Train, SampleGroup::Prior, SampleGroup::Ood] {
            assert_eq!(rows.iter().filter(|r| r.group == group).count(), 20);
        }
        assert!(rows.iter().all(|r| r.les.value.is_finite()
            && r.likelihood.is_finite()
            && r.prior.is_finite()
            && r.polarity.value.is_finite()
            && r.train_distance.is_finite()));
    }
}

