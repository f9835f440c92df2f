//! Gaussian-process surrogate with an isotropic squared-exponential kernel
//! and marginal-likelihood hyperparameter fitting.

use crate::linalg::{cholesky, Matrix, SpdFactor};
use thiserror::Error;

/// Noise variance never drops below this.
pub const NOISE_FLOOR: f64 = 1e-8;
/// Hyperparameter search runs on at most this many rows; the final factor
/// always uses the full data.
const LML_SUBSAMPLE_CAP: usize = 128;
/// Adam steps per restart of the marginal-likelihood search.
const LML_STEPS: usize = 200;
const LML_LR: f64 = 0.05;
/// Jitter budget when factoring `K + noise I`.
const CHOL_JITTER_BUDGET_REL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("need at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("observations contain non-finite values")]
    NonFiniteData,
    #[error("kernel matrix could not be factored: {0}")]
    Factorization(#[from] crate::linalg::LinalgError),
}

/// Kernel hyperparameters of `k(a, b) = s2 * exp(-|a-b|^2 / (2 l^2))` plus
/// observation noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

/// Fitted surrogate: inputs, standardized targets, kernel hyperparameters,
/// the Cholesky factor of `K + noise I`, and the solved weights.
#[derive(Debug, Clone)]
pub struct GpState {
    inputs: Matrix,
    targets: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    hyper: Hyperparameters,
    chol: SpdFactor,
    alpha: Vec<f64>,
}

/// Posterior moments and their gradients at one point, in original target
/// units.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
    pub mean_grad: Vec<f64>,
    pub var_grad: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel_matrix(x: &Matrix, hyper: &Hyperparameters) -> Matrix {
    let n = x.rows();
    let mut k = Matrix::zeros(n, n);
    let inv_2l2 = 1.0 / (2.0 * hyper.lengthscale * hyper.lengthscale);
    for i in 0..n {
        k.set(i, i, hyper.signal_variance + hyper.noise_variance);
        for j in i + 1..n {
            let v = hyper.signal_variance * (-sq_dist(x.row(i), x.row(j)) * inv_2l2).exp();
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    k
}

/// Log marginal likelihood and its gradient with respect to
/// `(ln lengthscale, ln signal variance, ln noise variance)`.
fn lml_and_grad(
    x: &Matrix,
    y: &[f64],
    hyper: &Hyperparameters,
) -> Result<(f64, [f64; 3]), GpError> {
    let n = x.rows();
    let k = kernel_matrix(x, hyper);
    let chol = cholesky(&k, CHOL_JITTER_BUDGET_REL * (hyper.signal_variance + hyper.noise_variance))?;
    let alpha = chol.solve(y);
    let data_fit: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let logdet = crate::linalg::logdet_spd(&chol);
    let lml = -0.5 * data_fit
        - 0.5 * logdet
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // d lml / d theta = 0.5 tr((alpha alpha^T - K^{-1}) dK/dtheta)
    let k_inv = chol.inverse();
    let inv_l2 = 1.0 / (hyper.lengthscale * hyper.lengthscale);
    let mut g = [0.0; 3];
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - k_inv.get(i, j);
            let r = if i == j {
                hyper.signal_variance
            } else {
                k.get(i, j)
            };
            let d2 = if i == j { 0.0 } else { sq_dist(x.row(i), x.row(j)) };
            // d/d ln l: r * d2 / l^2; d/d ln s2: r; d/d ln noise: noise on diag
            g[0] += 0.5 * w * r * d2 * inv_l2;
            g[1] += 0.5 * w * r;
            if i == j {
                g[2] += 0.5 * w * hyper.noise_variance;
            }
        }
    }
    Ok((lml, g))
}

const LOG_BOUNDS: [(f64, f64); 3] = [
    (-6.907755278982137, 6.907755278982137),   // lengthscale in [1e-3, 1e3]
    (-13.815510557964274, 6.907755278982137),  // signal variance in [1e-6, 1e3]
    (-18.420680743952367, 4.605170185988092),  // noise variance in [1e-8, 1e2]
];

const RESTARTS: [[f64; 3]; 5] = [
    [-0.6931471805599453, 0.0, -4.605170185988091], // l=0.5,  s2=1,    n=1e-2
    [0.0, 0.0, -4.605170185988091],                 // l=1,    s2=1,    n=1e-2
    [0.6931471805599453, 0.0, -2.302585092994046],  // l=2,    s2=1,    n=1e-1
    [1.3862943611198906, 0.0, -4.605170185988091],  // l=4,    s2=1,    n=1e-2
    [0.0, -1.3862943611198906, -9.210340371976182], // l=1,    s2=0.25, n=1e-4
];

fn optimize_restart(x: &Matrix, y: &[f64], start: [f64; 3]) -> (f64, [f64; 3]) {
    let mut theta = start;
    let mut m = [0.0; 3];
    let mut v = [0.0; 3];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut best = (f64::NEG_INFINITY, theta);
    for t in 1..=LML_STEPS {
        let hyper = Hyperparameters {
            lengthscale: theta[0].exp(),
            signal_variance: theta[1].exp(),
            noise_variance: theta[2].exp().max(NOISE_FLOOR),
        };
        let Ok((lml, grad)) = lml_and_grad(x, y, &hyper) else {
            break;
        };
        if lml > best.0 {
            best = (lml, theta);
        }
        for k in 0..3 {
            m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
            v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
            let m_hat = m[k] / (1.0 - b1.powi(t as i32));
            let v_hat = v[k] / (1.0 - b2.powi(t as i32));
            // Ascent on the marginal likelihood.
            theta[k] += LML_LR * m_hat / (v_hat.sqrt() + eps);
            theta[k] = theta[k].clamp(LOG_BOUNDS[k].0, LOG_BOUNDS[k].1);
        }
    }
    best
}

/// Fits the surrogate: standardizes targets, maximizes the log marginal
/// likelihood over the three log-hyperparameters with 200 Adam steps from
/// 5 fixed restarts (search on an evenly strided subsample when the data
/// is large), then factors the full kernel with the winner.
pub fn fit_gp(inputs: &Matrix, targets: &[f64]) -> Result<GpState, GpError> {
    let n = inputs.rows();
    if n < 2 {
        return Err(GpError::TooFewObservations(n));
    }
    if targets.len() != n
        || !inputs.is_finite()
        || targets.iter().any(|v| !v.is_finite())
    {
        return Err(GpError::NonFiniteData);
    }
    let y_mean = targets.iter().sum::<f64>() / n as f64;
    let var = targets.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
    let y_std = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
    let y_standardized: Vec<f64> = targets.iter().map(|v| (v - y_mean) / y_std).collect();

    // Evenly strided subsample for the hyperparameter search.
    let (sub_x, sub_y) = if n > LML_SUBSAMPLE_CAP {
        let mut xs = Matrix::zeros(LML_SUBSAMPLE_CAP, inputs.cols());
        let mut ys = Vec::with_capacity(LML_SUBSAMPLE_CAP);
        for k in 0..LML_SUBSAMPLE_CAP {
            let idx = k * n / LML_SUBSAMPLE_CAP;
            for c in 0..inputs.cols() {
                xs.set(k, c, inputs.get(idx, c));
            }
            ys.push(y_standardized[idx]);
        }
        (xs, ys)
    } else {
        (inputs.clone(), y_standardized.clone())
    };

    let results: Vec<(f64, [f64; 3])> = {
        use rayon::prelude::*;
        RESTARTS
            .par_iter()
            .map(|start| optimize_restart(&sub_x, &sub_y, *start))
            .collect()
    };
    let mut best = results[0];
    for r in &results[1..] {
        if r.0 > best.0 {
            best = *r;
        }
    }
    let hyper = Hyperparameters {
        lengthscale: best.1[0].exp(),
        signal_variance: best.1[1].exp(),
        noise_variance: best.1[2].exp().max(NOISE_FLOOR),
    };
    GpState::with_hyperparameters(inputs.clone(), targets, hyper)
}

impl GpState {
    /// Builds the state for fixed hyperparameters (no marginal-likelihood
    /// search); also the final step of [`fit_gp`].
    pub fn with_hyperparameters(
        inputs: Matrix,
        targets: &[f64],
        hyper: Hyperparameters,
    ) -> Result<GpState, GpError> {
        let n = inputs.rows();
        if n < 2 {
            return Err(GpError::TooFewObservations(n));
        }
        let y_mean = targets.iter().sum::<f64>() / n as f64;
        let var = targets.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
        let y_std = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
        let standardized: Vec<f64> = targets.iter().map(|v| (v - y_mean) / y_std).collect();
        let hyper = Hyperparameters {
            noise_variance: hyper.noise_variance.max(NOISE_FLOOR),
            ..hyper
        };
        let k = kernel_matrix(&inputs, &hyper);
        let chol = cholesky(
            &k,
            CHOL_JITTER_BUDGET_REL * (hyper.signal_variance + hyper.noise_variance),
        )?;
        let alpha = chol.solve(&standardized);
        Ok(GpState {
            inputs,
            targets: standardized,
            y_mean,
            y_std,
            hyper,
            chol,
            alpha,
        })
    }

    pub fn hyperparameters(&self) -> Hyperparameters {
        self.hyper
    }

    /// Mean and standard deviation used to standardize the targets.
    pub fn target_stats(&self) -> (f64, f64) {
        (self.y_mean, self.y_std)
    }

    /// Standardized training targets.
    pub fn standardized_targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn num_observations(&self) -> usize {
        self.inputs.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Posterior mean/variance of the latent function and their gradients,
    /// in original target units.
    pub fn posterior(&self, z: &[f64]) -> Posterior {
        let n = self.inputs.rows();
        let d = self.inputs.cols();
        assert_eq!(z.len(), d, "query dimension mismatch");
        let inv_l2 = 1.0 / (self.hyper.lengthscale * self.hyper.lengthscale);
        let mut k_vec = vec![0.0; n];
        for i in 0..n {
            k_vec[i] = self.hyper.signal_variance
                * (-0.5 * sq_dist(self.inputs.row(i), z) * inv_l2).exp();
        }
        let mean_std: f64 = k_vec.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let w = self.chol.solve(&k_vec);
        let var_std = (self.hyper.signal_variance
            - k_vec.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
        .max(0.0);

        // dk_i/dz = k_i (x_i - z) / l^2
        let mut mean_grad = vec![0.0; d];
        let mut var_grad = vec![0.0; d];
        for i in 0..n {
            let row = self.inputs.row(i);
            let ca = self.alpha[i] * k_vec[i];
            let cw = w[i] * k_vec[i];
            for c in 0..d {
                let dir = (row[c] - z[c]) * inv_l2;
                mean_grad[c] += ca * dir;
                var_grad[c] += -2.0 * cw * dir;
            }
        }
        for c in 0..d {
            mean_grad[c] *= self.y_std;
            var_grad[c] *= self.y_std * self.y_std;
        }
        Posterior {
            mean: self.y_mean + self.y_std * mean_std,
            variance: var_std * self.y_std * self.y_std,
            mean_grad,
            var_grad,
        }
    }
}
