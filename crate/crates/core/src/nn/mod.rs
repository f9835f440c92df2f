//! Minimal feed-forward network engine: ReLU MLPs with exact forward-mode
//! Jacobians, reverse-mode gradients, the extended softmax head (per-column
//! probabilities plus inverse normalizing constants), and Adam.
//!
//! ReLU networks are piecewise affine: within one activation pattern the
//! map is exactly `z -> A z + b`, and [`jacobian`] returns that slope by
//! pushing basis tangents through the frozen pattern.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

use crate::linalg::Matrix;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input has dimension {got}, layer expects {expected}")]
    InputDimension { got: usize, expected: usize },
    #[error("gradient shape does not match trace (layer {layer})")]
    StaleTrace { layer: usize },
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
}

/// One affine layer; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Self {
        assert_eq!(weight.rows(), bias.len(), "bias length must match rows");
        Layer { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        y
    }
}

/// MLP parameters: ReLU on all hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Self {
        assert!(!layers.is_empty());
        for w in layers.windows(2) {
            assert_eq!(
                w[0].out_dim(),
                w[1].in_dim(),
                "consecutive layer dimensions must chain"
            );
        }
        MlpParams { layers }
    }

    /// He-style initialization for the given layer widths, e.g.
    /// `[16, 256, 256, 192]`.
    pub fn random<R: Rng>(rng: &mut R, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (2.0 / fan_in as f64).sqrt();
            let mut weight = Matrix::zeros(fan_out, fan_in);
            for v in weight.data_mut() {
                *v = scale * normal_sample(rng);
            }
            layers.push(Layer::new(weight, vec![0.0; fan_out]));
        }
        MlpParams { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }
}

/// Standard-normal sample via Box-Muller; kept local so seeded streams do
/// not depend on external distribution crates.
pub fn normal_sample<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Per-layer pre- and post-activations for one input, recorded by
/// [`forward`] and consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }

    pub fn post_activations(&self) -> &[Vec<f64>] {
        &self.post
    }

    /// True when every hidden pre-activation has magnitude above `margin` —
    /// the input is safely inside one linear region.
    pub fn kink_distance_above(&self, margin: f64) -> bool {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden]
            .iter()
            .flat_map(|v| v.iter())
            .all(|p| p.abs() > margin)
    }
}

/// MLP forward pass; ReLU is exactly `max(0, x)` on hidden layers.
pub fn forward(params: &MlpParams, input: &[f64]) -> Result<(Vec<f64>, ForwardTrace), NnError> {
    if input.len() != params.input_dim() {
        return Err(NnError::InputDimension {
            got: input.len(),
            expected: params.input_dim(),
        });
    }
    let n_layers = params.layers.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers);
    let mut x = input.to_vec();
    for (idx, layer) in params.layers.iter().enumerate() {
        let z = layer.apply(&x);
        pre.push(z.clone());
        let a = if idx + 1 < n_layers {
            z.into_iter().map(|v| v.max(0.0)).collect::<Vec<f64>>()
        } else {
            z
        };
        post.push(a.clone());
        x = a;
    }
    let output = x;
    Ok((
        output,
        ForwardTrace {
            input: input.to_vec(),
            pre,
            post,
        },
    ))
}

/// Per-layer parameter gradients mirroring [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for x in l.weight.data_mut() {
                *x *= s;
            }
            for x in &mut l.bias {
                *x *= s;
            }
        }
    }
}

/// Exact reverse-mode gradients. The ReLU subgradient at exactly 0 is 0.
pub fn backward(
    params: &MlpParams,
    trace: &ForwardTrace,
    output_gradient: &[f64],
) -> Result<(MlpGrads, Vec<f64>), NnError> {
    let n_layers = params.layers.len();
    if output_gradient.len() != params.output_dim() {
        return Err(NnError::StaleTrace { layer: n_layers - 1 });
    }
    if trace.pre.len() != n_layers || trace.input.len() != params.input_dim() {
        return Err(NnError::StaleTrace { layer: 0 });
    }
    for (idx, layer) in params.layers.iter().enumerate() {
        if trace.pre[idx].len() != layer.out_dim() {
            return Err(NnError::StaleTrace { layer: idx });
        }
    }

    let mut grads = MlpGrads::zeros_like(params);
    let mut delta = output_gradient.to_vec();
    for idx in (0..n_layers).rev() {
        let layer = &params.layers[idx];
        let layer_input: &[f64] = if idx == 0 {
            &trace.input
        } else {
            &trace.post[idx - 1]
        };
        // dW = delta (x) input, db = delta
        {
            let g = &mut grads.layers[idx];
            let in_dim = layer.in_dim();
            for r in 0..layer.out_dim() {
                let d = delta[r];
                g.bias[r] = d;
                if d == 0.0 {
                    continue;
                }
                let row = &mut g.weight.data_mut()[r * in_dim..(r + 1) * in_dim];
                for (wv, xv) in row.iter_mut().zip(layer_input) {
                    *wv = d * xv;
                }
            }
        }
        // delta_prev = W^T delta, masked by the previous layer's ReLU.
        let mut prev = vec![0.0; layer.in_dim()];
        for r in 0..layer.out_dim() {
            let d = delta[r];
            if d == 0.0 {
                continue;
            }
            let row = layer.weight.row(r);
            for (p, w) in prev.iter_mut().zip(row) {
                *p += w * d;
            }
        }
        if idx > 0 {
            for (p, z) in prev.iter_mut().zip(&trace.pre[idx - 1]) {
                if *z <= 0.0 {
                    *p = 0.0;
                }
            }
        }
        delta = prev;
    }
    Ok((grads, delta))
}

/// Exact Jacobian of the network at `z` (`out_dim x in_dim`), computed by
/// forward-mode propagation of basis tangents through the frozen ReLU
/// activation pattern of `z`. Within one linear region this is the affine
/// slope of the network.
pub fn jacobian(params: &MlpParams, z: &[f64]) -> Result<Matrix, NnError> {
    jacobian_with_output(params, z).map(|(_, j)| j)
}

/// [`jacobian`] fused with the primal forward pass; returns
/// `(output, jacobian)` so callers that need both pay for one traversal.
pub fn jacobian_with_output(
    params: &MlpParams,
    z: &[f64],
) -> Result<(Vec<f64>, Matrix), NnError> {
    if z.len() != params.input_dim() {
        return Err(NnError::InputDimension {
            got: z.len(),
            expected: params.input_dim(),
        });
    }
    let n_layers = params.layers.len();
    let mut x = z.to_vec();
    // Tangent starts as the identity; every layer maps it through W and
    // the ReLU mask of the primal pre-activation.
    let mut tangent = Matrix::identity(z.len());
    for (idx, layer) in params.layers.iter().enumerate() {
        let pre = layer.apply(&x);
        let mut t_next = crate::linalg::matmul(&layer.weight, &tangent).expect("chained dims");
        if idx + 1 < n_layers {
            let cols = t_next.cols();
            for (r, p) in pre.iter().enumerate() {
                if *p <= 0.0 {
                    for v in &mut t_next.data_mut()[r * cols..(r + 1) * cols] {
                        *v = 0.0;
                    }
                }
            }
            x = pre.iter().map(|v| v.max(0.0)).collect();
        } else {
            x = pre;
        }
        tangent = t_next;
    }
    Ok((x, tangent))
}

/// Per-layer batched activations: row b of each matrix belongs to example
/// b of the batch.
#[derive(Debug, Clone)]
pub struct BatchedTrace {
    pub pre: Vec<Matrix>,
    pub post: Vec<Matrix>,
}

/// Batched forward pass over a whole example-rows matrix; each weight
/// matrix is read once per batch instead of once per example.
pub fn batched_forward(params: &MlpParams, x: &Matrix) -> Result<BatchedTrace, NnError> {
    if x.cols() != params.input_dim() {
        return Err(NnError::InputDimension {
            got: x.cols(),
            expected: params.input_dim(),
        });
    }
    let n_layers = params.layers.len();
    let rows = x.rows();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers);
    let mut activ = x.clone();
    for (idx, layer) in params.layers.iter().enumerate() {
        let mut z = crate::linalg::matmul_nt(&activ, &layer.weight).expect("chained dims");
        let out_dim = layer.out_dim();
        for r in 0..rows {
            let row = &mut z.data_mut()[r * out_dim..(r + 1) * out_dim];
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        pre.push(z.clone());
        if idx + 1 < n_layers {
            for v in z.data_mut() {
                *v = v.max(0.0);
            }
        }
        post.push(z.clone());
        activ = z;
    }
    Ok(BatchedTrace { pre, post })
}

/// Batched reverse pass matching [`batched_forward`]; gradients are summed
/// over the batch rows. Returns the parameter gradients and the gradient
/// with respect to the input rows.
pub fn batched_backward(
    params: &MlpParams,
    x: &Matrix,
    trace: &BatchedTrace,
    output_gradient: &Matrix,
) -> Result<(MlpGrads, Matrix), NnError> {
    batched_backward_impl(params, x, trace, output_gradient, true)
        .map(|(g, dx)| (g, dx.expect("input gradient requested")))
}

/// [`batched_backward`] without the final input-gradient product, for
/// callers that only need parameter gradients.
pub fn batched_backward_params(
    params: &MlpParams,
    x: &Matrix,
    trace: &BatchedTrace,
    output_gradient: &Matrix,
) -> Result<MlpGrads, NnError> {
    batched_backward_impl(params, x, trace, output_gradient, false).map(|(g, _)| g)
}

fn batched_backward_impl(
    params: &MlpParams,
    x: &Matrix,
    trace: &BatchedTrace,
    output_gradient: &Matrix,
    need_input_grad: bool,
) -> Result<(MlpGrads, Option<Matrix>), NnError> {
    let n_layers = params.layers.len();
    if trace.pre.len() != n_layers {
        return Err(NnError::StaleTrace { layer: 0 });
    }
    if output_gradient.rows() != x.rows()
        || output_gradient.cols() != params.output_dim()
    {
        return Err(NnError::StaleTrace { layer: n_layers - 1 });
    }
    let mut grads = MlpGrads::zeros_like(params);
    let mut delta = output_gradient.clone();
    let mut input_grad = None;
    for idx in (0..n_layers).rev() {
        let layer = &params.layers[idx];
        let layer_input: &Matrix = if idx == 0 { x } else { &trace.post[idx - 1] };
        grads.layers[idx].weight =
            crate::linalg::matmul_tn(&delta, layer_input).expect("chained dims");
        let out_dim = layer.out_dim();
        for r in 0..delta.rows() {
            let row = &delta.data()[r * out_dim..(r + 1) * out_dim];
            for (b, v) in grads.layers[idx].bias.iter_mut().zip(row) {
                *b += v;
            }
        }
        if idx == 0 && !need_input_grad {
            break;
        }
        let mut prev = crate::linalg::matmul(&delta, &layer.weight).expect("chained dims");
        if idx > 0 {
            let pre_prev = &trace.pre[idx - 1];
            for (v, z) in prev.data_mut().iter_mut().zip(pre_prev.data()) {
                if *z <= 0.0 {
                    *v = 0.0;
                }
            }
            delta = prev;
        } else {
            input_grad = Some(prev);
        }
    }
    Ok((grads, input_grad))
}

/// Softmax probabilities per column plus the inverse normalizing constant
/// `c^{-1}` of each column.
#[derive(Debug, Clone)]
pub struct ExtendedOutput {
    probs: Matrix,
    inv_norms: Vec<f64>,
}

impl ExtendedOutput {
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn inv_norms(&self) -> &[f64] {
        &self.inv_norms
    }

    pub fn num_positions(&self) -> usize {
        self.probs.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.rows()
    }

    pub fn prob_column(&self, position: usize) -> Vec<f64> {
        (0..self.probs.rows())
            .map(|j| self.probs.get(j, position))
            .collect()
    }
}

/// Column-wise softmax with max-shift for stability, extended with the
/// inverse normalizing constant `c^{-1} = exp(-max) / sum(exp(l - max))`.
pub fn softmax_extended(logits: &Matrix) -> ExtendedOutput {
    let (d, l) = (logits.rows(), logits.cols());
    let mut probs = Matrix::zeros(d, l);
    let mut inv_norms = vec![0.0; l];
    for i in 0..l {
        let mut max = f64::NEG_INFINITY;
        for j in 0..d {
            max = max.max(logits.get(j, i));
        }
        let mut sum = 0.0;
        for j in 0..d {
            let e = (logits.get(j, i) - max).exp();
            probs.set(j, i, e);
            sum += e;
        }
        for j in 0..d {
            probs.set(j, i, probs.get(j, i) / sum);
        }
        inv_norms[i] = (-max).exp() / sum;
    }
    ExtendedOutput { probs, inv_norms }
}

/// Jacobian of one column of the extended softmax with respect to its
/// logits: a `(D+1) x D` block whose first `D` rows are
/// `diag(p) - p p^T` and whose last row is `-p^T / c`.
pub fn softmax_extended_jacobian(ext: &ExtendedOutput, position: usize) -> Matrix {
    let d = ext.vocab_size();
    assert!(position < ext.num_positions(), "position out of range");
    let p = ext.prob_column(position);
    let inv_c = ext.inv_norms[position];
    let mut block = Matrix::zeros(d + 1, d);
    for r in 0..d {
        for c in 0..d {
            let v = if r == c { p[r] * (1.0 - p[r]) } else { -p[r] * p[c] };
            block.set(r, c, v);
        }
    }
    for c in 0..d {
        block.set(d, c, -p[c] * inv_c);
    }
    block
}

/// Adam optimizer state; moment accumulators mirror the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: MlpGrads,
    v: MlpGrads,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        AdamState {
            m: MlpGrads::zeros_like(params),
            v: MlpGrads::zeros_like(params),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Errors on non-finite gradients,
/// naming the offending layer.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut MlpParams,
    grads: &MlpGrads,
) -> Result<(), NnError> {
    for (idx, g) in grads.layers.iter().enumerate() {
        let finite = g.weight.data().iter().chain(&g.bias).all(|v| v.is_finite());
        if !finite {
            return Err(NnError::NonFiniteGradient { layer: idx });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (idx, layer) in params.layers.iter_mut().enumerate() {
        let g = &grads.layers[idx];
        let m = &mut state.m.layers[idx];
        let v = &mut state.v.layers[idx];
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        };
        for ((p, &gv), (mv, vv)) in layer
            .weight
            .data_mut()
            .iter_mut()
            .zip(g.weight.data())
            .zip(m.weight.data_mut().iter_mut().zip(v.weight.data_mut()))
        {
            update(p, gv, mv, vv);
        }
        for ((p, &gv), (mv, vv)) in layer
            .bias
            .iter_mut()
            .zip(&g.bias)
            .zip(m.bias.iter_mut().zip(v.bias.iter_mut()))
        {
            update(p, gv, mv, vv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn identity_net(n: usize) -> MlpParams {
        MlpParams::new(vec![Layer::new(Matrix::identity(n), vec![0.0; n])])
    }

    fn random_net(rng: &mut StdRng, dims: &[usize]) -> MlpParams {
        MlpParams::random(rng, dims)
    }

    fn randn_vec(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| normal_sample(rng)).collect()
    }

    #[test]
    fn forward_identity_layer() {
        let net = identity_net(3);
        let (out, _) = forward(&net, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn forward_hand_relu() {
        // Two layers so the first is hidden and gets the ReLU.
        let net = MlpParams::new(vec![
            Layer::new(Matrix::from_rows(2, 1, &[1.0, -1.0]), vec![0.0, 0.0]),
            Layer::new(Matrix::identity(2), vec![0.0, 0.0]),
        ]);
        let (out, trace) = forward(&net, &[2.0]).unwrap();
        assert_eq!(trace.pre_activations()[0], vec![2.0, -2.0]);
        assert_eq!(out, vec![2.0, 0.0]);
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let mut rng = StdRng::seed_from_u64(1);
        let net = random_net(&mut rng, &[4, 7, 6, 3]);
        let x = randn_vec(&mut rng, 4);
        let (out, _) = forward(&net, &x).unwrap();
        // Naive oracle.
        let mut cur = x.clone();
        for (idx, layer) in net.layers().iter().enumerate() {
            let mut next = vec![0.0; layer.out_dim()];
            for r in 0..layer.out_dim() {
                let mut acc = layer.bias[r];
                for c in 0..layer.in_dim() {
                    acc += layer.weight.get(r, c) * cur[c];
                }
                next[r] = if idx + 1 < net.num_layers() {
                    acc.max(0.0)
                } else {
                    acc
                };
            }
            cur = next;
        }
        for (a, b) in out.iter().zip(&cur) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_dimension_error() {
        let net = identity_net(3);
        assert!(matches!(
            forward(&net, &[1.0]),
            Err(NnError::InputDimension { .. })
        ));
    }

    #[test]
    fn backward_identity_passes_gradient() {
        let net = identity_net(3);
        let (_, trace) = forward(&net, &[1.0, 2.0, 3.0]).unwrap();
        let (_, input_grad) = backward(&net, &trace, &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(input_grad, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn backward_linear_closed_form() {
        // loss = 0.5 ||out||^2 on a single linear layer: dW = out x^T.
        let w = Matrix::from_rows(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let net = MlpParams::new(vec![Layer::new(w, vec![0.0, 0.0])]);
        let x = [1.0, -1.0];
        let (out, trace) = forward(&net, &x).unwrap();
        let (grads, _) = backward(&net, &trace, &out).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((grads.layers[0].weight.get(r, c) - out[r] * x[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(2);
        let net = random_net(&mut rng, &[3, 8, 5, 2]);
        let x = randn_vec(&mut rng, 3);
        let dir = randn_vec(&mut rng, 2);
        let loss = |net: &MlpParams| {
            let (out, _) = forward(net, &x).unwrap();
            out.iter().zip(&dir).map(|(o, d)| o * d).sum::<f64>()
        };
        let (_, trace) = forward(&net, &x).unwrap();
        let (grads, _) = backward(&net, &trace, &dir).unwrap();
        let h = 1e-5;
        for layer_idx in 0..net.num_layers() {
            for flat in 0..net.layers()[layer_idx].weight.data().len() {
                let mut plus = net.clone();
                plus.layers_mut()[layer_idx].weight.data_mut()[flat] += h;
                let mut minus = net.clone();
                minus.layers_mut()[layer_idx].weight.data_mut()[flat] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads.layers[layer_idx].weight.data()[flat];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + an.abs()),
                    "layer {layer_idx} flat {flat}: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn jacobian_of_linear_net_is_weight() {
        let w = Matrix::from_rows(2, 3, &[1.0, -2.0, 0.5, 0.0, 1.0, 3.0]);
        let net = MlpParams::new(vec![Layer::new(w.clone(), vec![0.0, 0.0])]);
        let j = jacobian(&net, &[0.3, -0.7, 2.0]).unwrap();
        assert_eq!(j, w);
    }

    #[test]
    fn jacobian_constant_within_region() {
        let mut rng = StdRng::seed_from_u64(3);
        let net = random_net(&mut rng, &[3, 10, 4]);
        let z = randn_vec(&mut rng, 3);
        let (_, trace) = forward(&net, &z).unwrap();
        // Tiny perturbation that keeps all hidden signs.
        let mut z2 = z.clone();
        z2[0] += 1e-9;
        let (_, trace2) = forward(&net, &z2).unwrap();
        let same_pattern = trace.pre_activations()[0]
            .iter()
            .zip(trace2.pre_activations()[0].iter())
            .all(|(a, b)| (*a > 0.0) == (*b > 0.0));
        assert!(same_pattern, "perturbation crossed a kink; adjust test");
        let j1 = jacobian(&net, &z).unwrap();
        let j2 = jacobian(&net, &z2).unwrap();
        assert_eq!(j1.data(), j2.data(), "CPA slope must be bit-identical");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        let net = random_net(&mut rng, &[4, 12, 8, 5]);
        let mut tested = 0;
        while tested < 20 {
            let z = randn_vec(&mut rng, 4);
            let (_, trace) = forward(&net, &z).unwrap();
            if !trace.kink_distance_above(1e-4) {
                continue;
            }
            tested += 1;
            let j = jacobian(&net, &z).unwrap();
            let h = 1e-5;
            for k in 0..4 {
                let mut zp = z.clone();
                zp[k] += h;
                let mut zm = z.clone();
                zm[k] -= h;
                let (op, _) = forward(&net, &zp).unwrap();
                let (om, _) = forward(&net, &zm).unwrap();
                for r in 0..5 {
                    let fd = (op[r] - om[r]) / (2.0 * h);
                    let an = j.get(r, k);
                    assert!(
                        (fd - an).abs() <= 1e-5 * (1.0 + an.abs()),
                        "fd {fd} vs analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn jacobian_rows_agree_with_backward() {
        // Forward-mode row k equals the reverse pass seeded with e_k.
        let mut rng = StdRng::seed_from_u64(5);
        let net = random_net(&mut rng, &[3, 9, 4]);
        let z = randn_vec(&mut rng, 3);
        let j = jacobian(&net, &z).unwrap();
        let (_, trace) = forward(&net, &z).unwrap();
        for r in 0..4 {
            let mut seed = vec![0.0; 4];
            seed[r] = 1.0;
            let (_, input_grad) = backward(&net, &trace, &seed).unwrap();
            for c in 0..3 {
                assert!((j.get(r, c) - input_grad[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forward_is_affine_within_region() {
        // forward(z + t v) - forward(z) = t J v while the pattern holds.
        let mut rng = StdRng::seed_from_u64(6);
        let net = random_net(&mut rng, &[4, 16, 6]);
        let z = randn_vec(&mut rng, 4);
        let v = randn_vec(&mut rng, 4);
        let t = 1e-6;
        let (f0, _) = forward(&net, &z).unwrap();
        let zt: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + t * b).collect();
        let (ft, _) = forward(&net, &zt).unwrap();
        let j = jacobian(&net, &z).unwrap();
        let jv = j.matvec(&v);
        for r in 0..6 {
            assert!((ft[r] - f0[r] - t * jv[r]).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_uniform_column() {
        let logits = Matrix::from_rows(2, 1, &[0.0, 0.0]);
        let ext = softmax_extended(&logits);
        assert!((ext.probs().get(0, 0) - 0.5).abs() < 1e-15);
        assert!((ext.probs().get(1, 0) - 0.5).abs() < 1e-15);
        assert!((ext.inv_norms()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let logits = Matrix::from_rows(2, 1, &[1000.0, 0.0]);
        let ext = softmax_extended(&logits);
        assert!((ext.probs().get(0, 0) - 1.0).abs() < 1e-12);
        assert!(ext.probs().get(1, 0) >= 0.0);
        assert!(ext.inv_norms()[0].is_finite());
        assert!(!ext.probs().get(0, 0).is_nan());
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut logits = Matrix::zeros(5, 3);
        for v in logits.data_mut() {
            *v = normal_sample(&mut rng) * 3.0;
        }
        let ext = softmax_extended(&logits);
        for i in 0..3 {
            let raw: Vec<f64> = (0..5).map(|j| logits.get(j, i).exp()).collect();
            let c: f64 = raw.iter().sum();
            for j in 0..5 {
                assert!((ext.probs().get(j, i) - raw[j] / c).abs() < 1e-12);
            }
            assert!((ext.inv_norms()[i] - 1.0 / c).abs() <= 1e-10 * (1.0 / c));
        }
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(8);
        let mut logits = Matrix::zeros(12, 16);
        for v in logits.data_mut() {
            *v = normal_sample(&mut rng) * 5.0;
        }
        let ext = softmax_extended(&logits);
        for i in 0..16 {
            let s: f64 = (0..12).map(|j| ext.probs().get(j, i)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_jacobian_hand_case() {
        let logits = Matrix::from_rows(2, 1, &[0.0, 0.0]);
        let ext = softmax_extended(&logits);
        let block = softmax_extended_jacobian(&ext, 0);
        let expected = [[0.25, -0.25], [-0.25, 0.25], [-0.25, -0.25]];
        for r in 0..3 {
            for c in 0..2 {
                assert!((block.get(r, c) - expected[r][c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_jacobian_saturates_to_zero() {
        let logits = Matrix::from_rows(2, 1, &[60.0, -60.0]);
        let ext = softmax_extended(&logits);
        let block = softmax_extended_jacobian(&ext, 0);
        assert!(block.max_abs() < 1e-20);
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut logits = Matrix::zeros(4, 2);
        for v in logits.data_mut() {
            *v = normal_sample(&mut rng);
        }
        let ext = softmax_extended(&logits);
        let h = 1e-6;
        for pos in 0..2 {
            let block = softmax_extended_jacobian(&ext, pos);
            for inl in 0..4 {
                let mut lp = logits.clone();
                lp.set(inl, pos, lp.get(inl, pos) + h);
                let mut lm = logits.clone();
                lm.set(inl, pos, lm.get(inl, pos) - h);
                let ep = softmax_extended(&lp);
                let em = softmax_extended(&lm);
                for outr in 0..4 {
                    let fd = (ep.probs().get(outr, pos) - em.probs().get(outr, pos)) / (2.0 * h);
                    assert!((fd - block.get(outr, inl)).abs() < 1e-6);
                }
                let fd_c = (ep.inv_norms()[pos] - em.inv_norms()[pos]) / (2.0 * h);
                assert!((fd_c - block.get(4, inl)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_jacobian_probability_rows_conserve_mass() {
        let mut rng = StdRng::seed_from_u64(10);
        let mut logits = Matrix::zeros(6, 1);
        for v in logits.data_mut() {
            *v = normal_sample(&mut rng) * 2.0;
        }
        let ext = softmax_extended(&logits);
        let block = softmax_extended_jacobian(&ext, 0);
        for c in 0..6 {
            let s: f64 = (0..6).map(|r| block.get(r, c)).sum();
            assert!(s.abs() < 1e-14, "column {c} mass leak {s}");
        }
    }

    #[test]
    fn batched_passes_match_per_example_reference() {
        let mut rng = StdRng::seed_from_u64(21);
        let net = random_net(&mut rng, &[3, 7, 4]);
        let batch = 5;
        let mut x = Matrix::zeros(batch, 3);
        for v in x.data_mut() {
            *v = normal_sample(&mut rng);
        }
        let mut dout = Matrix::zeros(batch, 4);
        for v in dout.data_mut() {
            *v = normal_sample(&mut rng);
        }
        let trace = batched_forward(&net, &x).unwrap();
        let (grads, dx) = batched_backward(&net, &x, &trace, &dout).unwrap();

        // Reference: per-example forward/backward, gradients summed.
        let mut ref_grads = MlpGrads::zeros_like(&net);
        for b in 0..batch {
            let xb: Vec<f64> = (0..3).map(|c| x.get(b, c)).collect();
            let (out, tr) = forward(&net, &xb).unwrap();
            for c in 0..4 {
                assert!((trace.post[1].get(b, c) - out[c]).abs() < 1e-12);
            }
            let db: Vec<f64> = (0..4).map(|c| dout.get(b, c)).collect();
            let (g, dxb) = backward(&net, &tr, &db).unwrap();
            ref_grads.accumulate(&g);
            for c in 0..3 {
                assert!((dx.get(b, c) - dxb[c]).abs() < 1e-10);
            }
        }
        for (a, b) in grads.layers.iter().zip(&ref_grads.layers) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((x - y).abs() < 1e-10);
            }
            for (x, y) in a.bias.iter().zip(&b.bias) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut net = random_net(&mut rng, &[2, 4, 1]);
        let orig = net.clone();
        let mut state = AdamState::new(&net, 1e-3);
        let grads = MlpGrads::zeros_like(&net);
        adam_step(&mut state, &mut net, &grads).unwrap();
        assert_eq!(state.step_count(), 1);
        assert_eq!(net, orig);
    }

    #[test]
    fn adam_first_step_is_bias_corrected_sign_step() {
        let w = Matrix::from_rows(1, 1, &[0.0]);
        let mut net = MlpParams::new(vec![Layer::new(w, vec![0.0])]);
        let mut state = AdamState::new(&net, 1e-3);
        let mut grads = MlpGrads::zeros_like(&net);
        grads.layers[0].weight.set(0, 0, 0.37);
        adam_step(&mut state, &mut net, &grads).unwrap();
        // At t=1 the bias-corrected update is lr * g / (|g| + eps') ~ lr * sign(g).
        let got = net.layers()[0].weight.get(0, 0);
        assert!((got + 1e-3).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn adam_descends_convex_quadratic() {
        // Minimize 0.5 || W x - y ||^2 over W for fixed x, y.
        let mut rng = StdRng::seed_from_u64(12);
        let mut net = random_net(&mut rng, &[2, 2]);
        let mut state = AdamState::new(&net, 0.01);
        let x = [1.0, -0.5];
        let y = [2.0, 1.0];
        let loss_of = |net: &MlpParams| {
            let (out, _) = forward(net, &x).unwrap();
            out.iter().zip(&y).map(|(o, t)| 0.5 * (o - t) * (o - t)).sum::<f64>()
        };
        let mut losses = Vec::new();
        for _ in 0..100 {
            let (out, trace) = forward(&net, &x).unwrap();
            let grad_out: Vec<f64> = out.iter().zip(&y).map(|(o, t)| o - t).collect();
            let (grads, _) = backward(&net, &trace, &grad_out).unwrap();
            adam_step(&mut state, &mut net, &grads).unwrap();
            losses.push(loss_of(&net));
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] < w[0] + 1e-12, "loss not decreasing: {:?}", &losses[..10]);
        }
        assert!(losses.last().unwrap() < &losses[5]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut rng = StdRng::seed_from_u64(13);
        let mut net = random_net(&mut rng, &[2, 3, 1]);
        let mut state = AdamState::new(&net, 1e-3);
        let mut grads = MlpGrads::zeros_like(&net);
        grads.layers[1].weight.set(0, 0, f64::NAN);
        match adam_step(&mut state, &mut net, &grads) {
            Err(NnError::NonFiniteGradient { layer }) => assert_eq!(layer, 1),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
    }
}
