//! Trust-region state machine: a box around the incumbent doubles after
//! 10 consecutive improving batches and halves after 2 consecutive
//! non-improving ones, with the edge length clamped to `[2^-7, 1.6]`.

use super::acquisition::log_ei_value;
use super::gp::GpState;
use rand::Rng;
use rayon::prelude::*;

pub const LENGTH_INIT: f64 = 0.8;
pub const LENGTH_MIN: f64 = 0.0078125; // 2^-7
pub const LENGTH_MAX: f64 = 1.6;
pub const SUCCESS_TOL: usize = 10;
pub const FAILURE_TOL: usize = 2;

/// Candidate cloud size: 100 per latent dimension, clamped.
fn candidate_count(d: usize) -> usize {
    (100 * d).clamp(100, 1024)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionState {
    pub center: Vec<f64>,
    pub length: f64,
    pub success_count: usize,
    pub failure_count: usize,
}

impl TrustRegionState {
    pub fn new(center: Vec<f64>) -> Self {
        TrustRegionState {
            center,
            length: LENGTH_INIT,
            success_count: 0,
            failure_count: 0,
        }
    }
}

/// Draws a uniform cloud inside the box `[center +- length/2]^d`, ranks it
/// by log-EI and returns the best `batch` candidates.
pub fn turbo_propose<R: Rng>(
    gp: &GpState,
    tr: &TrustRegionState,
    incumbent: f64,
    batch: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let d = tr.center.len();
    let half = tr.length / 2.0;
    let n = candidate_count(d).max(batch);
    let candidates: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            tr.center
                .iter()
                .map(|c| c + rng.gen_range(-half..half))
                .collect()
        })
        .collect();
    let values: Vec<f64> = candidates
        .par_iter()
        .map(|z| log_ei_value(gp, z, incumbent))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    order[..batch].iter().map(|&i| candidates[i].clone()).collect()
}

/// Applies the success/failure bookkeeping for one batch outcome and moves
/// the center to the incumbent.
pub fn turbo_update(
    tr: &TrustRegionState,
    batch_improved: bool,
    incumbent_z: &[f64],
) -> TrustRegionState {
    let mut next = tr.clone();
    if batch_improved {
        next.success_count += 1;
        next.failure_count = 0;
    } else {
        next.failure_count += 1;
        next.success_count = 0;
    }
    if next.success_count >= SUCCESS_TOL {
        next.length = (next.length * 2.0).min(LENGTH_MAX);
        next.success_count = 0;
        next.failure_count = 0;
    } else if next.failure_count >= FAILURE_TOL {
        next.length = (next.length / 2.0).max(LENGTH_MIN);
        next.success_count = 0;
        next.failure_count = 0;
    }
    next.center = incumbent_z.to_vec();
    next
}
