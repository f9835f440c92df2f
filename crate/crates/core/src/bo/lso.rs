//! The latent-space optimization loop: encode an initial design, then
//! repeat fit-surrogate / propose-batch / decode-evaluate rounds until the
//! evaluation budget is spent.

use super::acquisition::{lbfgs_restart_points, optimize_acq_ga, AcqConfig};
use super::gp::{fit_gp, GpState};
use super::turbo::{turbo_propose, turbo_update, TrustRegionState};
use crate::grammar::{self, TokenSequence};
use crate::linalg::Matrix;
use crate::nn::normal_sample;
use crate::scores::{les, ScoreKind, ScoreValue};
use crate::vae::VaeModel;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Proposals closer than this to an earlier point in the same batch are
/// re-jittered.
const DUPLICATE_DISTANCE: f64 = 1e-6;
/// Standard deviation of the Gaussian jitter applied to GA start points.
const START_JITTER_STD: f64 = 0.1;

/// Acquisition optimizer family of one LSO run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Les,
    Ga,
    Prior,
    Likelihood,
    Lbfgs,
    Turbo,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Les,
        Method::Ga,
        Method::Prior,
        Method::Likelihood,
        Method::Lbfgs,
        Method::Turbo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Les => "les",
            Method::Ga => "ga",
            Method::Prior => "prior",
            Method::Likelihood => "likelihood",
            Method::Lbfgs => "lbfgs",
            Method::Turbo => "turbo",
        }
    }

    /// The score regularizing gradient ascent, if the method has one.
    fn penalty(self) -> Option<ScoreKind> {
        match self {
            Method::Les => Some(ScoreKind::Les),
            Method::Prior => Some(ScoreKind::Prior),
            Method::Likelihood => Some(ScoreKind::Likelihood),
            _ => None,
        }
    }

    fn is_gradient_ascent(self) -> bool {
        matches!(
            self,
            Method::Les | Method::Ga | Method::Prior | Method::Likelihood
        )
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}; expected one of les|ga|prior|likelihood|lbfgs|turbo"))
    }
}

/// Run settings; defaults follow the expressions task.
#[derive(Debug, Clone)]
pub struct LsoParams {
    pub method: Method,
    pub lambda: f64,
    pub eta: f64,
    pub seed: u64,
    pub init_n: usize,
    pub budget: usize,
    pub batch: usize,
    pub ga_steps: usize,
    pub facet_length: f64,
    pub max_tokens: usize,
    pub use_fd_gradient: bool,
}

impl Default for LsoParams {
    fn default() -> Self {
        LsoParams {
            method: Method::Les,
            lambda: 0.05,
            eta: 0.8,
            seed: 1,
            init_n: 500,
            budget: 500,
            batch: 20,
            ga_steps: 10,
            facet_length: 5.0,
            max_tokens: grammar::SEQ_LEN,
            use_fd_gradient: false,
        }
    }
}

/// One evaluated point: the initial design has `iteration` 0, proposal
/// rounds count from 1.
#[derive(Debug, Clone)]
pub struct LsoRecord {
    pub iteration: usize,
    pub batch_idx: usize,
    pub z: Vec<f64>,
    pub tokens: TokenSequence,
    pub objective: Option<f64>,
    pub valid: bool,
    pub les: ScoreValue,
}

/// Append-only run log; length is `init_n + budget` on a completed run.
#[derive(Debug, Clone)]
pub struct LsoHistory {
    pub method: Method,
    pub lambda: f64,
    pub seed: u64,
    pub init_n: usize,
    pub records: Vec<LsoRecord>,
}

impl LsoHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn initial_records(&self) -> impl Iterator<Item = &LsoRecord> {
        self.records.iter().filter(|r| r.iteration == 0)
    }

    pub fn proposed_records(&self) -> impl Iterator<Item = &LsoRecord> {
        self.records.iter().filter(|r| r.iteration > 0)
    }

    pub fn best_initial_objective(&self) -> Option<f64> {
        self.initial_records()
            .filter_map(|r| r.objective)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    pub fn best_proposed_objective(&self) -> Option<f64> {
        self.proposed_records()
            .filter_map(|r| r.objective)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    /// Fraction of proposed points that decoded to valid expressions.
    pub fn valid_fraction(&self) -> f64 {
        let (mut valid, mut total) = (0usize, 0usize);
        for r in self.proposed_records() {
            total += 1;
            valid += r.valid as usize;
        }
        if total == 0 {
            0.0
        } else {
            valid as f64 / total as f64
        }
    }

    /// Mean of the k best valid proposed objectives.
    pub fn top_k_mean(&self, k: usize) -> Option<f64> {
        let mut values: Vec<f64> = self.proposed_records().filter_map(|r| r.objective).collect();
        if values.is_empty() {
            return None;
        }
        values.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let take = values.len().min(k);
        Some(values[..take].iter().sum::<f64>() / take as f64)
    }
}

#[derive(Debug, Error)]
pub enum LsoError {
    #[error("run aborted at iteration {iteration}: {message}")]
    Aborted {
        iteration: usize,
        message: String,
        partial: Box<LsoHistory>,
    },
}

fn evaluate_point(model: &VaeModel, z: &[f64]) -> Result<(TokenSequence, Option<f64>, ScoreValue), String> {
    let decoded = model.decode(z);
    let objective = grammar::objective(&decoded.tokens);
    let les_value = les(model, z).map_err(|e| e.to_string())?;
    Ok((decoded.tokens, objective, les_value))
}

/// Runs Bayesian optimization in the latent space of the model and returns
/// the full evaluation history. Fully deterministic for a given seed.
pub fn lso_run(model: &VaeModel, params: &LsoParams) -> Result<LsoHistory, LsoError> {
    let d = model.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut history = LsoHistory {
        method: params.method,
        lambda: params.lambda,
        seed: params.seed,
        init_n: params.init_n,
        records: Vec::with_capacity(params.init_n + params.budget),
    };
    let abort = |history: &LsoHistory, iteration: usize, message: String| LsoError::Aborted {
        iteration,
        message,
        partial: Box::new(history.clone()),
    };

    // Initial design: encoded valid expressions with their objectives.
    let mut init_seqs = Vec::with_capacity(params.init_n);
    for _ in 0..params.init_n {
        match grammar::sample_expression(&mut rng, params.max_tokens) {
            Ok(seq) => init_seqs.push(seq),
            Err(e) => return Err(abort(&history, 0, e.to_string())),
        }
    }
    let init_rows: Vec<Result<LsoRecord, String>> = init_seqs
        .par_iter()
        .enumerate()
        .map(|(idx, seq)| {
            let z = model.encode_mean(seq);
            let objective = grammar::objective(seq);
            let les_value = les(model, &z).map_err(|e| e.to_string())?;
            Ok(LsoRecord {
                iteration: 0,
                batch_idx: idx,
                z,
                tokens: *seq,
                objective,
                valid: objective.is_some(),
                les: les_value,
            })
        })
        .collect();
    for row in init_rows {
        match row {
            Ok(r) => history.records.push(r),
            Err(e) => return Err(abort(&history, 0, e)),
        }
    }

    let worst_initial = history
        .initial_records()
        .filter_map(|r| r.objective)
        .fold(f64::INFINITY, f64::min);
    if !worst_initial.is_finite() {
        return Err(abort(&history, 0, "no valid initial observations".into()));
    }

    let mut tr: Option<TrustRegionState> = None;
    let rounds = params.budget.div_ceil(params.batch);
    for round in 1..=rounds {
        let batch_size = params.batch.min(params.budget - (round - 1) * params.batch);

        // Surrogate data: every observed latent with invalid decodes
        // imputed at the worst initial objective.
        let n = history.records.len();
        let mut x = Matrix::zeros(n, d);
        let mut y = vec![0.0; n];
        for (i, r) in history.records.iter().enumerate() {
            for c in 0..d {
                x.set(i, c, r.z[c]);
            }
            y[i] = r.objective.unwrap_or(worst_initial);
        }
        let gp: GpState = match fit_gp(&x, &y) {
            Ok(g) => g,
            Err(e) => return Err(abort(&history, round, e.to_string())),
        };
        let (incumbent, incumbent_z) = {
            let mut best = (y[0], 0);
            for (i, v) in y.iter().enumerate() {
                if *v > best.0 {
                    best = (*v, i);
                }
            }
            (best.0, history.records[best.1].z.clone())
        };

        // Method-specific proposals; every random draw happens on this
        // thread so parallel optimization cannot perturb the stream.
        let mut proposals: Vec<Vec<f64>> = if params.method.is_gradient_ascent() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| y[b].partial_cmp(&y[a]).unwrap().then(a.cmp(&b)));
            let starts: Vec<Vec<f64>> = (0..batch_size)
                .map(|slot| {
                    let base = &history.records[order[slot % n]].z;
                    base.iter()
                        .map(|v| v + START_JITTER_STD * normal_sample(&mut rng))
                        .collect()
                })
                .collect();
            let cfg = AcqConfig {
                lambda: if params.method == Method::Ga {
                    0.0
                } else {
                    params.lambda
                },
                penalty: params.method.penalty(),
                steps: params.ga_steps,
                step_size: params.eta,
                grad_norm_floor: 1e-12,
                use_fd_gradient: params.use_fd_gradient,
            };
            starts
                .par_iter()
                .map(|s| optimize_acq_ga(&gp, model, s, incumbent, &cfg).z)
                .collect()
        } else if params.method == Method::Lbfgs {
            let half = params.facet_length / 2.0;
            let starts: Vec<Vec<f64>> = (0..batch_size)
                .map(|_| (0..d).map(|_| rng.gen_range(-half..half)).collect())
                .collect();
            let mut results = lbfgs_restart_points(&gp, incumbent, params.facet_length, &starts);
            results.sort_by(|a, b| b.value.partial_cmp(&a.value).unwrap());
            results.into_iter().map(|r| r.z).collect()
        } else {
            let state = tr.take().unwrap_or_else(|| TrustRegionState::new(incumbent_z.clone()));
            let batch = turbo_propose(&gp, &state, incumbent, batch_size, &mut rng);
            tr = Some(state);
            batch
        };

        // Duplicate suppression within the batch.
        for j in 1..proposals.len() {
            let mut tries = 0;
            while tries < 20 {
                let too_close = proposals[..j].iter().any(|earlier| {
                    earlier
                        .iter()
                        .zip(&proposals[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                        < DUPLICATE_DISTANCE
                });
                if !too_close {
                    break;
                }
                for v in proposals[j].iter_mut() {
                    *v += 0.01 * normal_sample(&mut rng);
                }
                tries += 1;
            }
        }

        let evaluated: Vec<Result<(TokenSequence, Option<f64>, ScoreValue), String>> =
            proposals.par_iter().map(|z| evaluate_point(model, z)).collect();

        let mut batch_improved = false;
        for (slot, (z, outcome)) in proposals.into_iter().zip(evaluated).enumerate() {
            let (tokens, objective, les_value) = match outcome {
                Ok(v) => v,
                Err(e) => return Err(abort(&history, round, e)),
            };
            if let Some(o) = objective {
                if o > incumbent {
                    batch_improved = true;
                }
            }
            history.records.push(LsoRecord {
                iteration: round,
                batch_idx: slot,
                z,
                tokens,
                objective,
                valid: objective.is_some(),
                les: les_value,
            });
        }

        if params.method == Method::Turbo {
            // Center on the best observation seen so far (including this
            // batch).
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, r) in history.records.iter().enumerate() {
                let v = r.objective.unwrap_or(worst_initial);
                if v > best.0 {
                    best = (v, i);
                }
            }
            let best_z = history.records[best.1].z.clone();
            tr = Some(turbo_update(
                tr.as_ref().expect("trust region initialized"),
                batch_improved,
                &best_z,
            ));
        }
    }

    Ok(history)
}
