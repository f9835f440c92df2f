//! Log expected improvement with a numerically stable deep tail, plus the
//! two gradient-based acquisition optimizers: normalized gradient ascent
//! (optionally penalized by a score gradient) and box-constrained L-BFGS.

use super::gp::GpState;
use crate::scores::{
    les_gradient, les_gradient_fd, likelihood_gradient, prior_gradient, ScoreKind,
};
use crate::vae::VaeModel;
use statrs::function::erf::erfc;

/// Value reported when the predictive deviation collapses to zero.
pub const LOG_EI_CAP: f64 = -1e4;

/// Standard normal density.
fn phi(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the complementary error function.
fn norm_cdf(u: f64) -> f64 {
    0.5 * erfc(-u / std::f64::consts::SQRT_2)
}

/// `h(u) = log(u Phi(u) + phi(u))` evaluated directly.
fn h_direct(u: f64) -> f64 {
    (u * norm_cdf(u) + phi(u)).ln()
}

const HALF_LN_TAU: f64 = 0.9189385332046727; // 0.5 ln(2 pi)

/// Mills ratio `Phi(-t) / phi(t)` for t >= 1, through the complementary
/// error function in log space; beyond erfc underflow the asymptotic
/// series takes over (where its truncation error is ~1e-15).
fn mills_ratio(t: f64) -> f64 {
    if t < 36.0 {
        ((0.5 * erfc(t / std::f64::consts::SQRT_2)).ln() + 0.5 * t * t + HALF_LN_TAU).exp()
    } else {
        let t2 = 1.0 / (t * t);
        (1.0 - t2 * (1.0 - t2 * (3.0 - t2 * (15.0 - t2 * 105.0)))) / t
    }
}

/// Tail factor `g(t) = (u Phi(u) + phi(u)) / phi(u) = 1 - t M(t)` for
/// `u = -t`.
fn tail_factor(t: f64) -> f64 {
    if t < 36.0 {
        1.0 - t * mills_ratio(t)
    } else {
        // Series form of 1 - t M(t); past erfc underflow it is exact to
        // machine precision.
        let t2 = 1.0 / (t * t);
        t2 * (1.0 - t2 * (3.0 - t2 * (15.0 - t2 * (105.0 - t2 * 945.0))))
    }
}

/// Tail branch of `h`: `log phi(u) + log g(|u|)`, stable for all `u <= -1`
/// including far past the underflow of `phi` and `Phi`.
fn h_tail(u: f64) -> f64 {
    let t = -u;
    -0.5 * t * t - HALF_LN_TAU + tail_factor(t).ln()
}

/// `h'(u) = Phi(u) / (u Phi(u) + phi(u)) = M(t) / g(t)` on the tail.
fn h_prime_direct(u: f64) -> f64 {
    norm_cdf(u) / (u * norm_cdf(u) + phi(u))
}

fn h_prime_tail(u: f64) -> f64 {
    let t = -u;
    mills_ratio(t) / tail_factor(t)
}

fn h_and_prime(u: f64) -> (f64, f64) {
    if u > -1.0 {
        (h_direct(u), h_prime_direct(u))
    } else if u <= -6.0 {
        (h_tail(u), h_prime_tail(u))
    } else {
        // Blend the two branches linearly over (-6, -1).
        let w = (u + 6.0) / 5.0;
        (
            w * h_direct(u) + (1.0 - w) * h_tail(u),
            w * h_prime_direct(u) + (1.0 - w) * h_prime_tail(u),
        )
    }
}

/// Log expected improvement over `incumbent` and its gradient. Returns the
/// cap with a zero gradient when the predictive deviation vanishes.
pub fn log_ei(gp: &GpState, z: &[f64], incumbent: f64) -> (f64, Vec<f64>) {
    log_ei_from_posterior(&gp.posterior(z), incumbent, z.len())
}

fn log_ei_from_posterior(p: &super::gp::Posterior, incumbent: f64, dim: usize) -> (f64, Vec<f64>) {
    if p.variance <= 0.0 || !p.variance.is_finite() {
        return (LOG_EI_CAP, vec![0.0; dim]);
    }
    let sigma = p.variance.sqrt();
    let u = (p.mean - incumbent) / sigma;
    let (h, hp) = h_and_prime(u);
    let value = sigma.ln() + h;
    // d value = sigma'/sigma + h'(u) (mu' - u sigma') / sigma,
    // sigma' = var' / (2 sigma).
    let mut grad = vec![0.0; dim];
    for k in 0..dim {
        let dsigma = p.var_grad[k] / (2.0 * sigma);
        grad[k] = dsigma / sigma + hp * (p.mean_grad[k] - u * dsigma) / sigma;
    }
    (value.max(LOG_EI_CAP), grad)
}

/// Value-only variant for candidate ranking.
pub fn log_ei_value(gp: &GpState, z: &[f64], incumbent: f64) -> f64 {
    log_ei(gp, z, incumbent).0
}

/// Which score regularizes the acquisition ascent.
pub type Penalty = Option<ScoreKind>;

/// Normalized-gradient-ascent settings: `z <- z + eta (g_A/|g_A| + lambda
/// g_S/|g_S|)`, 10 steps by default.
#[derive(Debug, Clone)]
pub struct AcqConfig {
    pub lambda: f64,
    pub penalty: Penalty,
    pub steps: usize,
    pub step_size: f64,
    pub grad_norm_floor: f64,
    /// Replace the analytic score gradient by central finite differences.
    pub use_fd_gradient: bool,
}

impl Default for AcqConfig {
    fn default() -> Self {
        AcqConfig {
            lambda: 0.05,
            penalty: Some(ScoreKind::Les),
            steps: 10,
            step_size: 0.8,
            grad_norm_floor: 1e-12,
            use_fd_gradient: false,
        }
    }
}

/// One record per ascent step.
#[derive(Debug, Clone)]
pub struct GaStep {
    pub z: Vec<f64>,
    pub log_ei: f64,
    /// The analytic score gradient failed here and finite differences
    /// substituted.
    pub fd_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct GaResult {
    pub z: Vec<f64>,
    pub trajectory: Vec<GaStep>,
}

/// A gradient with norm at or above the floor contributes its direction;
/// below the floor it contributes its raw (unnormalized) value.
pub(crate) fn normalize_or_keep(g: &[f64], floor: f64) -> Vec<f64> {
    let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm >= floor {
        g.iter().map(|v| v / norm).collect()
    } else {
        g.to_vec()
    }
}

fn penalty_gradient(
    model: &VaeModel,
    kind: ScoreKind,
    z: &[f64],
    use_fd: bool,
) -> (Vec<f64>, bool) {
    match kind {
        ScoreKind::Prior => (prior_gradient(z), false),
        ScoreKind::Likelihood => (
            likelihood_gradient(model, z).unwrap_or_else(|_| vec![0.0; z.len()]),
            false,
        ),
        ScoreKind::Les => {
            if use_fd {
                return (
                    les_gradient_fd(model, z, 1e-4).unwrap_or_else(|_| vec![0.0; z.len()]),
                    true,
                );
            }
            match les_gradient(model, z) {
                Ok(g) => (g, false),
                Err(_) => (
                    les_gradient_fd(model, z, 1e-4).unwrap_or_else(|_| vec![0.0; z.len()]),
                    true,
                ),
            }
        }
        // Remaining kinds are not differentiable penalties.
        _ => (vec![0.0; z.len()], false),
    }
}

/// Penalized normalized gradient ascent on log-EI from one start point.
/// With `lambda = 0` or no penalty the update direction is exactly
/// `g_A / |g_A|` and the score is never evaluated.
pub fn optimize_acq_ga(
    gp: &GpState,
    model: &VaeModel,
    start: &[f64],
    incumbent: f64,
    cfg: &AcqConfig,
) -> GaResult {
    let mut z = start.to_vec();
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (value, g_a) = log_ei(gp, &z, incumbent);
        let mut direction = normalize_or_keep(&g_a, cfg.grad_norm_floor);
        let mut fd_fallback = false;
        if cfg.lambda != 0.0 {
            if let Some(kind) = cfg.penalty {
                let (g_s, fell_back) = penalty_gradient(model, kind, &z, cfg.use_fd_gradient);
                fd_fallback = fell_back;
                let g_s = normalize_or_keep(&g_s, cfg.grad_norm_floor);
                for (d, s) in direction.iter_mut().zip(&g_s) {
                    *d += cfg.lambda * s;
                }
            }
        }
        trajectory.push(GaStep {
            z: z.clone(),
            log_ei: value,
            fd_fallback,
        });
        for (zi, di) in z.iter_mut().zip(&direction) {
            *zi += cfg.step_size * di;
        }
    }
    let (final_value, _) = log_ei(gp, &z, incumbent);
    trajectory.push(GaStep {
        z: z.clone(),
        log_ei: final_value,
        fd_fallback: false,
    });
    GaResult { z, trajectory }
}

/// Result of a box-constrained multi-restart maximization.
#[derive(Debug, Clone)]
pub struct BoxOptResult {
    pub z: Vec<f64>,
    pub value: f64,
    /// False when no restart managed an accepted line-search step; the
    /// returned point is then the best evaluated start.
    pub line_search_ok: bool,
}

/// L-BFGS (memory 10, strong Wolfe line search) maximization of `f` inside
/// `[lo, hi]^d`, projecting onto the box after each step.
pub fn lbfgs_box_maximize<F>(
    f: &F,
    lo: f64,
    hi: f64,
    start: &[f64],
    max_iters: usize,
) -> (Vec<f64>, f64, bool)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    const MEMORY: usize = 10;
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let clip = |x: &mut Vec<f64>| {
        for v in x.iter_mut() {
            *v = v.clamp(lo, hi);
        }
    };
    let mut x = start.to_vec();
    clip(&mut x);
    let (mut fx, mut gx) = f(&x);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut any_accepted = false;

    for _ in 0..max_iters {
        // Two-loop recursion on the ascent direction.
        let mut q: Vec<f64> = gx.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / s.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
            let a = rho * s.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push((rho, a));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
            let yy: f64 = y.iter().map(|v| v * v).sum();
            let gamma = sy / yy;
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y), (rho, a)) in s_hist.iter().zip(&y_hist).zip(alphas.iter().rev()) {
            let b = rho * y.iter().zip(&q).map(|(x, y)| x * y).sum::<f64>();
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let p = q; // ascent direction
        let dir_deriv: f64 = p.iter().zip(&gx).map(|(a, b)| a * b).sum();
        if dir_deriv <= 0.0 || !dir_deriv.is_finite() {
            // Not an ascent direction; restart from steepest ascent.
            s_hist.clear();
            y_hist.clear();
            let gnorm: f64 = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm < 1e-10 {
                break;
            }
            continue;
        }
        let gnorm: f64 = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-8 {
            break;
        }

        // Strong-Wolfe line search on t -> f(x + t p) (maximization).
        let mut t = 1.0;
        let mut t_lo = 0.0;
        let mut f_lo = fx;
        let mut t_hi = f64::INFINITY;
        let mut accepted = None;
        for _ls in 0..25 {
            let mut cand: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + t * b).collect();
            clip(&mut cand);
            let (fc, gc) = f(&cand);
            let deriv: f64 = p.iter().zip(&gc).map(|(a, b)| a * b).sum();
            if fc < fx + C1 * t * dir_deriv || (t_lo > 0.0 && fc <= f_lo) {
                t_hi = t;
                t = 0.5 * (t_lo + t_hi);
            } else if deriv.abs() > C2 * dir_deriv.abs() && deriv > 0.0 {
                t_lo = t;
                f_lo = fc;
                t = if t_hi.is_finite() {
                    0.5 * (t_lo + t_hi)
                } else {
                    2.0 * t
                };
            } else {
                accepted = Some((cand, fc, gc));
                break;
            }
            if t_hi.is_finite() && (t_hi - t_lo) < 1e-12 {
                break;
            }
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };
        any_accepted = true;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        // y = grad_old - grad_new keeps s'y > 0 for ascent curvature.
        let y: Vec<f64> = gx.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let s_norm: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-10 * s_norm * y_norm {
            s_hist.push(s.clone());
            y_hist.push(y);
            if s_hist.len() > MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        if s_norm < 1e-12 {
            x = x_new;
            fx = f_new;
            break;
        }
        x = x_new;
        fx = f_new;
        gx = g_new;
    }
    (x, fx, any_accepted)
}

/// Maximizes log-EI inside the symmetric hypercube of the given facet
/// length with 20 seeded uniform restarts; the best endpoint wins.
pub fn optimize_acq_lbfgs<R: rand::Rng>(
    gp: &GpState,
    incumbent: f64,
    facet_length: f64,
    restarts: usize,
    rng: &mut R,
) -> BoxOptResult {
    let d = gp.input_dim();
    let half = facet_length / 2.0;
    let starts: Vec<Vec<f64>> = (0..restarts)
        .map(|_| (0..d).map(|_| rng.gen_range(-half..half)).collect())
        .collect();
    let results = lbfgs_restart_points(gp, incumbent, facet_length, &starts);
    let mut best = results[0].clone();
    let mut any_ok = false;
    for r in &results {
        any_ok |= r.line_search_ok;
        if r.value > best.value {
            best = r.clone();
        }
    }
    best.line_search_ok = any_ok;
    best
}

/// Runs one L-BFGS maximization per start point (in parallel, merged in
/// start order).
pub fn lbfgs_restart_points(
    gp: &GpState,
    incumbent: f64,
    facet_length: f64,
    starts: &[Vec<f64>],
) -> Vec<BoxOptResult> {
    use rayon::prelude::*;
    let half = facet_length / 2.0;
    let objective = |z: &[f64]| log_ei(gp, z, incumbent);
    starts
        .par_iter()
        .map(|start| {
            let (z, value, ok) = lbfgs_box_maximize(&objective, -half, half, start, 30);
            BoxOptResult {
                z,
                value,
                line_search_ok: ok,
            }
        })
        .collect()
}
