//! Linear head, sigmoid cross-entropy, and per-example clipped gradients.
//!
//! For a head `z = W f + b` with sigmoid cross-entropy the gradient of one
//! example is the rank-one pair `(u fᵀ, u)` with `u = sigmoid(z) − y`. Its
//! Frobenius norm is `‖u‖·sqrt(‖f‖² + 1)`, so clipping factors are available
//! without forming the `k×d` matrix, and the clipped sum reduces to one scaled
//! accumulation `Σ_i s_i u_i f_iᵀ`.
//!
//! All arithmetic is in `f64` regardless of the feature storage type. Batches
//! are reduced in fixed chunks of [`CHUNK_ROWS`] rows whose partial sums are
//! combined in index order, so results do not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::GaussianNoise;

/// Rows per partial sum in [`clipped_gradient_sum`].
pub const CHUNK_ROWS: usize = 256;

/// Feature element types accepted by the engine.
pub trait Feature: Copy + Into<f64> + Send + Sync {}
impl<T: Copy + Into<f64> + Send + Sync> Feature for T {}

/// Class weights `W` (`classes × dim`, row-major) and biases `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != classes * dim {
            return Err(Error::Shape {
                what: "head weights",
                expected: classes * dim,
                actual: weights.len(),
            });
        }
        if bias.len() != classes {
            return Err(Error::Shape {
                what: "head bias",
                expected: classes,
                actual: bias.len(),
            });
        }
        Ok(Self {
            classes,
            dim,
            weights,
            bias,
        })
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Row `j` of `W`.
    pub fn class_weights(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|x| x.is_finite())
    }

    /// Logits of a single feature row.
    pub fn logits_into<F: Feature>(&self, features: &[F], out: &mut [f64]) {
        for (j, z) in out.iter_mut().enumerate() {
            let row = self.class_weights(j);
            let mut acc = self.bias[j];
            for (w, f) in row.iter().zip(features) {
                acc += w * (*f).into();
            }
            *z = acc;
        }
    }
}

/// A batch of `n` examples: `n×dim` row-major features and class labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a, F> {
    features: &'a [F],
    labels: &'a [u16],
    dim: usize,
}

impl<'a, F: Feature> Batch<'a, F> {
    pub fn new(features: &'a [F], labels: &'a [u16], dim: usize) -> Result<Self> {
        if features.len() != labels.len() * dim {
            return Err(Error::Shape {
                what: "batch features",
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        Ok(Self { features, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &'a [u16] {
        self.labels
    }

    pub fn row(&self, i: usize) -> &'a [F] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    fn slice(&self, start: usize, end: usize) -> Batch<'a, F> {
        Batch {
            features: &self.features[start * self.dim..end * self.dim],
            labels: &self.labels[start..end],
            dim: self.dim,
        }
    }

    fn check_head(&self, head: &LinearHead) -> Result<()> {
        if self.dim != head.dim {
            return Err(Error::Shape {
                what: "feature dimension",
                expected: head.dim,
                actual: self.dim,
            });
        }
        if let Some(&y) = self.labels.iter().find(|&&y| usize::from(y) >= head.classes) {
            return Err(Error::Validation(format!(
                "label {y} out of range for {} classes",
                head.classes
            )));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Logits `z_i = W f_i + b` for an `n×dim` feature block, returned `n×classes`
/// row-major.
pub fn forward_logits<F: Feature>(head: &LinearHead, features: &[F]) -> Result<Vec<f64>> {
    if head.dim == 0 || !features.len().is_multiple_of(head.dim) {
        return Err(Error::Shape {
            what: "feature block",
            expected: head.dim,
            actual: features.len(),
        });
    }
    let n = features.len() / head.dim;
    let mut out = vec![0.0; n * head.classes];
    for (f, z) in features.chunks_exact(head.dim).zip(out.chunks_exact_mut(head.classes)) {
        head.logits_into(f, z);
    }
    Ok(out)
}

/// Mean over the batch of `Σ_j softplus(z_j) − y_j z_j`, with `targets` given
/// as one-hot rows.
pub fn sigmoid_ce_loss(logits: &[f64], targets: &[f64], classes: usize) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::Shape {
            what: "targets",
            expected: logits.len(),
            actual: targets.len(),
        });
    }
    if classes == 0 || !logits.len().is_multiple_of(classes) || logits.is_empty() {
        return Err(Error::Shape {
            what: "logits",
            expected: classes,
            actual: logits.len(),
        });
    }
    let n = logits.len() / classes;
    let mut total = 0.0;
    for (i, (z, y)) in logits
        .chunks_exact(classes)
        .zip(targets.chunks_exact(classes))
        .enumerate()
    {
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        let zeros = y.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != classes {
            return Err(Error::Validation(format!("target row {i} is not one-hot")));
        }
        total += example_loss(z, y.iter().position(|&v| v == 1.0).unwrap());
    }
    Ok(total / n as f64)
}

fn example_loss(logits: &[f64], label: usize) -> f64 {
    logits.iter().map(|&z| softplus(z)).sum::<f64>() - logits[label]
}

/// Mean loss of a labelled batch.
pub fn batch_loss<F: Feature>(head: &LinearHead, batch: &Batch<'_, F>) -> Result<f64> {
    batch.check_head(head)?;
    let mut z = vec![0.0; head.classes];
    let mut total = 0.0;
    for i in 0..batch.len() {
        head.logits_into(batch.row(i), &mut z);
        total += example_loss(&z, usize::from(batch.labels[i]));
    }
    Ok(total / batch.len() as f64)
}

/// `u = sigmoid(z) − onehot(label)`, computed in place over `z`.
fn residual_in_place(z: &mut [f64], label: usize) {
    for (j, v) in z.iter_mut().enumerate() {
        *v = sigmoid(*v) - if j == label { 1.0 } else { 0.0 };
    }
}

fn sq_norm<F: Feature>(xs: &[F]) -> f64 {
    xs.iter()
        .map(|&x| {
            let x: f64 = x.into();
            x * x
        })
        .sum()
}

/// Frobenius norm of each example's full `(W, b)` gradient.
pub fn per_example_grad_norms<F: Feature>(head: &LinearHead, batch: &Batch<'_, F>) -> Result<Vec<f64>> {
    batch.check_head(head)?;
    let mut u = vec![0.0; head.classes];
    Ok((0..batch.len())
        .map(|i| {
            let f = batch.row(i);
            head.logits_into(f, &mut u);
            residual_in_place(&mut u, usize::from(batch.labels[i]));
            (u.iter().map(|x| x * x).sum::<f64>() * (sq_norm(f) + 1.0)).sqrt()
        })
        .collect())
}

/// Clip factor `min(1, C/‖g‖)`; a zero gradient keeps factor 1.
pub fn clip_scale(norm: f64, clip_norm: f64) -> f64 {
    if norm > clip_norm {
        clip_norm / norm
    } else {
        1.0
    }
}

/// Sum of per-example gradients over a batch, before noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPacket {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    count: usize,
}

impl GradientPacket {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            count: 0,
        }
    }

    pub fn new(classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>, count: usize) -> Result<Self> {
        let head = LinearHead::new(classes, dim, weights, bias)?;
        Ok(Self {
            classes,
            dim,
            weights: head.weights,
            bias: head.bias,
            count,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// L2 norm of the flattened `(W, b)` sum.
    pub fn norm(&self) -> f64 {
        self.weights.iter().chain(&self.bias).map(|x| x * x).sum::<f64>().sqrt()
    }

    fn add_assign(&mut self, other: &GradientPacket) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        self.count += other.count;
    }
}

/// Side statistics gathered while clipping a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClipStats {
    /// Sum of per-example losses.
    pub loss_sum: f64,
    /// Examples whose gradient norm exceeded the clip norm.
    pub clipped: usize,
}

impl ClipStats {
    fn add_assign(&mut self, other: &ClipStats) {
        self.loss_sum += other.loss_sum;
        self.clipped += other.clipped;
    }
}

fn chunk_sum<F: Feature>(
    head: &LinearHead,
    batch: &Batch<'_, F>,
    clip_norm: Option<f64>,
) -> (GradientPacket, ClipStats) {
    let k = head.classes;
    let d = head.dim;
    let mut packet = GradientPacket::zeros(k, d);
    let mut stats = ClipStats::default();
    let mut u = vec![0.0; k];
    for i in 0..batch.len() {
        let f = batch.row(i);
        let label = usize::from(batch.labels[i]);
        head.logits_into(f, &mut u);
        stats.loss_sum += example_loss(&u, label);
        residual_in_place(&mut u, label);
        let scale = match clip_norm {
            Some(c) => {
                let norm = (u.iter().map(|x| x * x).sum::<f64>() * (sq_norm(f) + 1.0)).sqrt();
                if norm > c {
                    stats.clipped += 1;
                }
                clip_scale(norm, c)
            }
            None => 1.0,
        };
        for (j, &uj) in u.iter().enumerate() {
            let coef = scale * uj;
            packet.bias[j] += coef;
            let row = &mut packet.weights[j * d..(j + 1) * d];
            for (w, &x) in row.iter_mut().zip(f) {
                *w += coef * x.into();
            }
        }
    }
    packet.count = batch.len();
    (packet, stats)
}

/// [`clipped_gradient_sum`] that also reports loss and clip counts.
/// `clip_norm = None` sums raw gradients.
pub fn clipped_gradient_sum_with_stats<F: Feature>(
    head: &LinearHead,
    batch: &Batch<'_, F>,
    clip_norm: Option<f64>,
) -> Result<(GradientPacket, ClipStats)> {
    if let Some(c) = clip_norm {
        if !(c > 0.0) {
            return Err(Error::domain(format!("clip norm {c} must be positive")));
        }
    }
    batch.check_head(head)?;
    let n = batch.len();
    let mut packet = GradientPacket::zeros(head.classes, head.dim);
    let mut stats = ClipStats::default();
    // Partial packets are bounded in number to keep memory flat on large batches.
    let group = CHUNK_ROWS * rayon::current_num_threads().max(1) * 4;
    let mut start = 0;
    while start < n {
        let end = (start + group).min(n);
        let partials: Vec<(GradientPacket, ClipStats)> = (start..end)
            .step_by(CHUNK_ROWS)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|s| chunk_sum(head, &batch.slice(s, (s + CHUNK_ROWS).min(end)), clip_norm))
            .collect();
        for (p, s) in &partials {
            packet.add_assign(p);
            stats.add_assign(s);
        }
        start = end;
    }
    Ok((packet, stats))
}

/// `Σ_i min(1, C/‖g_i‖)·g_i` over the batch.
pub fn clipped_gradient_sum<F: Feature>(
    head: &LinearHead,
    batch: &Batch<'_, F>,
    clip_norm: f64,
) -> Result<GradientPacket> {
    clipped_gradient_sum_with_stats(head, batch, Some(clip_norm)).map(|(p, _)| p)
}

/// A gradient that has passed through the Gaussian mechanism. Only
/// [`noisy_gradient`] and [`noisy_gradient_with_denominator`] construct it,
/// which keeps optimizers on the post-processing side of the privacy boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatizedGradient {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl PrivatizedGradient {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

/// `(Σ clipped + N(0, (σC)²)) / count`, noise drawn for `W` row-major then `b`.
pub fn noisy_gradient(
    packet: &GradientPacket,
    sigma: f64,
    clip_norm: f64,
    rng: &mut GaussianNoise,
) -> Result<PrivatizedGradient> {
    if packet.count == 0 {
        return Err(Error::domain("cannot average a gradient over zero examples"));
    }
    noisy_gradient_with_denominator(packet, sigma, clip_norm, packet.count as f64, rng)
}

/// As [`noisy_gradient`] but divides by `denominator` instead of the example
/// count (used with Poisson batches, whose size is itself private).
pub fn noisy_gradient_with_denominator(
    packet: &GradientPacket,
    sigma: f64,
    clip_norm: f64,
    denominator: f64,
    rng: &mut GaussianNoise,
) -> Result<PrivatizedGradient> {
    if !(sigma >= 0.0) {
        return Err(Error::domain(format!("noise multiplier {sigma} must be nonnegative")));
    }
    if !(denominator > 0.0) {
        return Err(Error::domain(format!("denominator {denominator} must be positive")));
    }
    let stddev = sigma * clip_norm;
    let mut weights = packet.weights.clone();
    let mut bias = packet.bias.clone();
    if stddev != 0.0 {
        if !stddev.is_finite() {
            return Err(Error::domain("noise standard deviation is not finite"));
        }
        rng.perturb(&mut weights, stddev);
        rng.perturb(&mut bias, stddev);
    }
    for x in weights.iter_mut().chain(bias.iter_mut()) {
        *x /= denominator;
    }
    Ok(PrivatizedGradient {
        classes: packet.classes,
        dim: packet.dim,
        weights,
        bias,
    })
}

/// Per-example gradients `(u fᵀ, u)` formed explicitly. Intended as a
/// reference for tests and audits; cost is `n·k·d` memory.
pub fn materialized_per_example_grads<F: Feature>(
    head: &LinearHead,
    batch: &Batch<'_, F>,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    batch.check_head(head)?;
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let f = batch.row(i);
        let mut u = vec![0.0; head.classes];
        head.logits_into(f, &mut u);
        residual_in_place(&mut u, usize::from(batch.labels[i]));
        let mut gw = Vec::with_capacity(head.classes * head.dim);
        for &uj in &u {
            gw.extend(f.iter().map(|&x| uj * x.into()));
        }
        out.push((gw, u));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_bias_logits() {
        let head = LinearHead::new(3, 2, vec![0.0; 6], vec![-10.0; 3]).unwrap();
        let z = forward_logits(&head, &[1.5f32, -2.0, 0.25, 9.0]).unwrap();
        assert_eq!(z, vec![-10.0; 6]);
    }

    #[test]
    fn identity_head() {
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let head = LinearHead::new(3, 3, w, vec![0.0; 3]).unwrap();
        assert_eq!(forward_logits(&head, &[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let head = LinearHead::zeros(2, 3);
        assert!(matches!(forward_logits(&head, &[1.0, 2.0]), Err(Error::Shape { .. })));
        let feats = [1.0f64; 4];
        let batch = Batch::new(&feats, &[0, 1], 2).unwrap();
        assert!(matches!(
            per_example_grad_norms(&head, &batch),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_logits_cost_log_two_per_class() {
        let k = 7;
        let z = vec![0.0; k];
        let mut y = vec![0.0; k];
        y[3] = 1.0;
        let loss = sigmoid_ce_loss(&z, &y, k).unwrap();
        assert!((loss - k as f64 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn zero_init_starting_loss() {
        let k = 1000;
        let z = vec![-10.0; k];
        let mut y = vec![0.0; k];
        y[0] = 1.0;
        let loss = sigmoid_ce_loss(&z, &y, k).unwrap();
        // 1000·log1p(e^-10) + 10, evaluated independently.
        let expected = 1000.0 * (-10f64).exp().ln_1p() + 10.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 10.0454).abs() < 1e-4);
    }

    #[test]
    fn non_one_hot_targets_are_rejected() {
        let z = vec![0.0; 4];
        assert!(matches!(
            sigmoid_ce_loss(&z, &[1.0, 1.0, 0.0, 1.0], 2),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            sigmoid_ce_loss(&z, &[0.5, 0.5, 0.0, 1.0], 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn zero_features_norm_is_residual_norm() {
        let head = LinearHead::new(2, 3, vec![0.3; 6], vec![0.5, -0.5]).unwrap();
        let feats = [0.0f64; 3];
        let batch = Batch::new(&feats, &[1], 3).unwrap();
        let norm = per_example_grad_norms(&head, &batch).unwrap()[0];
        let u0 = sigmoid(0.5);
        let u1 = sigmoid(-0.5) - 1.0;
        assert!((norm - (u0 * u0 + u1 * u1).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_example_has_zero_gradient() {
        let head = LinearHead::new(1, 1, vec![0.0], vec![1e3]).unwrap();
        let batch = Batch::new(&[2.0f64], &[0], 1).unwrap();
        assert_eq!(per_example_grad_norms(&head, &batch).unwrap(), vec![0.0]);
        let packet = clipped_gradient_sum(&head, &batch, 1.0).unwrap();
        assert!(packet.weights().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn clipping_halves_a_norm_two_gradient() {
        // k=1, d=1; u = sigmoid(b) - 1 with b chosen so that |u|·sqrt(f²+1) = 2.
        let f = 3.0f64;
        let target_u = -2.0 / (f * f + 1.0).sqrt();
        let b = ((1.0 + target_u) / (-target_u)).ln();
        let head = LinearHead::new(1, 1, vec![0.0], vec![b]).unwrap();
        let feats = [f];
        let batch = Batch::new(&feats, &[0], 1).unwrap();
        let norm = per_example_grad_norms(&head, &batch).unwrap()[0];
        assert!((norm - 2.0).abs() < 1e-12);
        let raw = materialized_per_example_grads(&head, &batch).unwrap();
        let packet = clipped_gradient_sum(&head, &batch, 1.0).unwrap();
        let scale = 1.0 / norm;
        assert!((packet.weights()[0] - raw[0].0[0] * scale).abs() < 1e-15);
        assert!((packet.bias()[0] - raw[0].1[0] * scale).abs() < 1e-15);
        assert!((packet.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_clip_norm_is_rejected() {
        let head = LinearHead::zeros(2, 1);
        let batch = Batch::new(&[1.0f64], &[0], 1).unwrap();
        assert!(matches!(
            clipped_gradient_sum(&head, &batch, 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            clipped_gradient_sum(&head, &batch, -1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn single_outer_product_has_one_nonzero() {
        // Saturated logits with label 1 give u = (1, 0).
        let head = LinearHead::new(2, 3, vec![0.0; 6], vec![800.0, 800.0]).unwrap();
        let feats = [0.0f64, 1.0, 0.0];
        let batch = Batch::new(&feats, &[1], 3).unwrap();
        let g = materialized_per_example_grads(&head, &batch).unwrap();
        assert_eq!(g[0].1, vec![1.0, 0.0]);
        let nonzero: Vec<usize> = (0..6).filter(|&i| g[0].0[i] != 0.0).collect();
        assert_eq!(nonzero, vec![1]);
    }

    #[test]
    fn zero_count_cannot_be_averaged() {
        let packet = GradientPacket::zeros(2, 2);
        let mut rng = GaussianNoise::from_seed(0);
        assert!(matches!(
            noisy_gradient(&packet, 1.0, 1.0, &mut rng),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn no_noise_gives_clipped_mean() {
        let packet = GradientPacket::new(1, 2, vec![2.0, 4.0], vec![6.0], 2).unwrap();
        let mut rng = GaussianNoise::from_seed(0);
        let g = noisy_gradient(&packet, 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(g.weights(), &[1.0, 2.0]);
        assert_eq!(g.bias(), &[3.0]);
    }
}
