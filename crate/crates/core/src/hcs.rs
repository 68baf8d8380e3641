//! High-confidence cross supervision: two linear probes on frozen features,
//! trained with cross-entropy on the clean subset and with each other's
//! confident argmax predictions on the unlabeled rest.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::scalar::{self, Scalar};
use crate::selection::SelectionResult;
use crate::tensor_store::{Tensor, TensorBundle};
use crate::zeroshot::FeatureMatrix;
use crate::{Error, Result};

/// Probabilities are clipped to `[CLIP, 1 - CLIP]` inside the cross-entropy.
pub const CLIP: f64 = 1e-7;

const STOCHASTIC_TOL: f64 = 1e-4;

// rng streams; keeping them separate means an empty unlabeled pool leaves the
// labeled trajectory untouched
const STREAM_INIT: u64 = 0;
const STREAM_LABELED_ORDER: u64 = 1;
const STREAM_UNLABELED_ORDER: u64 = 2;
const STREAM_LABELED_DROPOUT: u64 = 3;
const STREAM_UNLABELED_DROPOUT: u64 = 4;

/// Single linear layer followed by softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe<T> {
    /// `[C x d]`
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LinearProbe<T> {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self { weights: Matrix::zeros(classes, dim), bias: vec![T::zero(); classes] }
    }

    pub fn random(classes: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut probe = Self::zeros(classes, dim);
        for c in 0..classes {
            for v in probe.weights.row_mut(c) {
                let z: f64 = StandardNormal.sample(rng);
                *v = T::from_f64_lossy(z * scale);
            }
        }
        probe
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, feature: &[T]) -> Result<Vec<T>> {
        if feature.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: feature.len() });
        }
        Ok(self.weights.iter_rows().zip(&self.bias).map(|(w, &b)| scalar::dot(w, feature) + b).collect())
    }

    /// `softmax(W f + b)`.
    pub fn forward(&self, feature: &[T]) -> Result<Vec<T>> {
        let mut z = self.logits(feature)?;
        scalar::softmax_in_place(&mut z);
        Ok(z)
    }

    fn is_finite(&self) -> bool {
        self.weights.all_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    /// Plain SGD step with weight decay: `p -= lr * (g + wd * p)`.
    fn sgd_step(&mut self, grad: &LinearProbe<T>, lr: T, weight_decay: T) {
        for c in 0..self.classes() {
            let g = grad.weights.row(c);
            for (w, &gw) in self.weights.row_mut(c).iter_mut().zip(g) {
                *w = *w - lr * (gw + weight_decay * *w);
            }
            let b = &mut self.bias[c];
            *b = *b - lr * (grad.bias[c] + weight_decay * *b);
        }
    }
}

pub fn forward<T: Scalar>(probe: &LinearProbe<T>, feature: &[T]) -> Result<Vec<T>> {
    probe.forward(feature)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbePair<T> {
    pub a: LinearProbe<T>,
    pub b: LinearProbe<T>,
}

impl<T: Scalar> ProbePair<T> {
    pub fn swapped(self) -> Self {
        Self { a: self.b, b: self.a }
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let (c, d) = self.a.weights.shape();
        TensorBundle::new()
            .with(Tensor::f32("probeA_w", &[c, d], self.a.weights.to_f32_vec()))
            .with(Tensor::f32("probeA_b", &[c], self.a.bias.iter().map(|v| v.to_f32_lossy()).collect()))
            .with(Tensor::f32("probeB_w", &[c, d], self.b.weights.to_f32_vec()))
            .with(Tensor::f32("probeB_b", &[c], self.b.bias.iter().map(|v| v.to_f32_lossy()).collect()))
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let probe = |w: &str, b: &str| -> Result<LinearProbe<T>> {
            let (shape, weights) = bundle.f32_entry(w, 2)?;
            let (bshape, bias) = bundle.f32_entry(b, 1)?;
            if bshape[0] != shape[0] {
                return Err(Error::DimensionMismatch { expected: shape[0], found: bshape[0] });
            }
            Ok(LinearProbe {
                weights: Matrix::from_f32(shape[0], shape[1], weights)?,
                bias: bias.iter().map(|&v| T::from_f32(v).unwrap_or(T::nan())).collect(),
            })
        };
        Ok(Self { a: probe("probeA_w", "probeA_b")?, b: probe("probeB_w", "probeB_b")? })
    }
}

/// Cross-entropy against a hard label with clipping.
pub fn cross_entropy<T: Scalar>(probs: &[T], label: usize) -> T {
    let clip = T::from_f64_lossy(CLIP);
    -probs[label].max(clip).min(T::one() - clip).ln()
}

fn check_row<T: Scalar>(row: &[T], which: usize) -> Result<()> {
    if scalar::is_stochastic(row, STOCHASTIC_TOL) {
        Ok(())
    } else {
        Err(Error::NotStochastic { row: which })
    }
}

/// Gated cross-supervision losses for one unlabeled sample: probe A learns the
/// argmax of `p_b` when `max(p_b) > gamma`, and vice versa.
pub fn hcs_losses<T: Scalar>(p_a: &[T], p_b: &[T], gamma: T) -> Result<(T, T)> {
    check_row(p_a, 0)?;
    check_row(p_b, 1)?;
    if p_a.len() != p_b.len() {
        return Err(Error::DimensionMismatch { expected: p_a.len(), found: p_b.len() });
    }
    Ok(gated_pair(p_a, p_b, gamma))
}

fn gate<T: Scalar>(p: &[T], gamma: T) -> Option<usize> {
    let label = scalar::argmax(p)?;
    (p[label] > gamma).then_some(label)
}

fn gated_pair<T: Scalar>(p_a: &[T], p_b: &[T], gamma: T) -> (T, T) {
    let loss_a = gate(p_b, gamma).map_or(T::zero(), |y| cross_entropy(p_a, y));
    let loss_b = gate(p_a, gamma).map_or(T::zero(), |y| cross_entropy(p_b, y));
    (loss_a, loss_b)
}

/// Mean of both probes' cross-entropies against the clean pseudo-label.
pub fn pl_loss<T: Scalar>(p_a: &[T], p_b: &[T], label: usize) -> Result<T> {
    check_row(p_a, 0)?;
    check_row(p_b, 1)?;
    if label >= p_a.len() || label >= p_b.len() {
        return Err(Error::LabelOutOfRange { label, classes: p_a.len().min(p_b.len()) });
    }
    Ok((cross_entropy(p_a, label) + cross_entropy(p_b, label)) / (T::one() + T::one()))
}

/// Average of the two probes' probability outputs for every feature row.
pub fn predict_pair<T: Scalar>(a: &LinearProbe<T>, b: &LinearProbe<T>, features: &Matrix<T>) -> Result<Matrix<T>> {
    if a.shape_matches(b).is_err() {
        return Err(Error::DimensionMismatch { expected: a.classes(), found: b.classes() });
    }
    let two = T::one() + T::one();
    let rows = (0..features.rows())
        .into_par_iter()
        .map(|i| {
            let x = features.row(i);
            let pa = a.forward(x)?;
            let pb = b.forward(x)?;
            Ok(pa.iter().zip(&pb).map(|(&u, &v)| (u + v) / two).collect::<Vec<T>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_vec(features.rows(), a.classes(), rows.concat())
}

impl<T: Scalar> LinearProbe<T> {
    fn shape_matches(&self, other: &Self) -> Result<()> {
        if self.weights.shape() == other.weights.shape() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected: self.dim(), found: other.dim() })
        }
    }
}

/// A sample as seen by the two probes, each through its own augmentation.
#[derive(Clone, Debug)]
pub struct PairedView<T> {
    pub x_a: Vec<T>,
    pub x_b: Vec<T>,
}

/// Loss of one minibatch, split into its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss<T> {
    pub supervised_a: T,
    pub supervised_b: T,
    pub unsupervised_a: T,
    pub unsupervised_b: T,
    pub gates_open: usize,
    pub gates_total: usize,
}

impl<T: Scalar> BatchLoss<T> {
    pub fn supervised(&self) -> T {
        (self.supervised_a + self.supervised_b) / (T::one() + T::one())
    }

    pub fn unsupervised(&self) -> T {
        (self.unsupervised_a + self.unsupervised_b) / (T::one() + T::one())
    }

    /// `L_pl + lambda * L_unsup`.
    pub fn total(&self, lambda: T) -> T {
        self.supervised() + lambda * self.unsupervised()
    }
}

/// Output-layer error signal `dCE/dz`; zero where the probability was clipped.
fn ce_logit_grad<T: Scalar>(probs: &[T], label: usize) -> Vec<T> {
    let clip = T::from_f64_lossy(CLIP);
    let p = probs[label];
    if p < clip || p > T::one() - clip {
        return vec![T::zero(); probs.len()];
    }
    let mut g = probs.to_vec();
    g[label] = g[label] - T::one();
    g
}

fn accumulate<T: Scalar>(grad: &mut LinearProbe<T>, signal: &[T], x: &[T], scale: T) {
    for (c, &s) in signal.iter().enumerate() {
        let s = s * scale;
        if s == T::zero() {
            continue;
        }
        for (g, &xj) in grad.weights.row_mut(c).iter_mut().zip(x) {
            *g = *g + s * xj;
        }
        grad.bias[c] = grad.bias[c] + s;
    }
}

struct SampleTerms<T> {
    loss_a: T,
    loss_b: T,
    signal_a: Option<Vec<T>>,
    signal_b: Option<Vec<T>>,
}

/// Loss `L_pl + lambda * L_unsup` of one minibatch and its gradient with
/// respect to both probes. Cross pseudo-labels are treated as constants.
/// Per-sample terms are computed in parallel and reduced in sample order.
pub fn hcs_objective<T: Scalar>(
    pair: &ProbePair<T>,
    labeled: &[(PairedView<T>, usize)],
    unlabeled: &[PairedView<T>],
    gamma: T,
    lambda: T,
) -> Result<(BatchLoss<T>, ProbePair<T>)> {
    pair.a.shape_matches(&pair.b)?;
    let classes = pair.a.classes();
    let mut loss = BatchLoss { gates_total: 2 * unlabeled.len(), ..Default::default() };
    let mut grad =
        ProbePair { a: LinearProbe::zeros(classes, pair.a.dim()), b: LinearProbe::zeros(classes, pair.a.dim()) };
    let two = T::one() + T::one();

    let supervised = labeled
        .par_iter()
        .map(|(view, label)| {
            if *label >= classes {
                return Err(Error::LabelOutOfRange { label: *label, classes });
            }
            let pa = pair.a.forward(&view.x_a)?;
            let pb = pair.b.forward(&view.x_b)?;
            Ok(SampleTerms {
                loss_a: cross_entropy(&pa, *label),
                loss_b: cross_entropy(&pb, *label),
                signal_a: Some(ce_logit_grad(&pa, *label)),
                signal_b: Some(ce_logit_grad(&pb, *label)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if !labeled.is_empty() {
        let n = T::from_usize_lossy(labeled.len());
        // d/dz of (CE_A + CE_B) / 2, averaged over the batch
        let scale = T::one() / (two * n);
        for ((view, _), terms) in labeled.iter().zip(&supervised) {
            loss.supervised_a = loss.supervised_a + terms.loss_a;
            loss.supervised_b = loss.supervised_b + terms.loss_b;
            accumulate(&mut grad.a, terms.signal_a.as_ref().unwrap(), &view.x_a, scale);
            accumulate(&mut grad.b, terms.signal_b.as_ref().unwrap(), &view.x_b, scale);
        }
        loss.supervised_a = loss.supervised_a / n;
        loss.supervised_b = loss.supervised_b / n;
    }

    let cross = unlabeled
        .par_iter()
        .map(|view| {
            let pa = pair.a.forward(&view.x_a)?;
            let pb = pair.b.forward(&view.x_b)?;
            let target_a = gate(&pb, gamma);
            let target_b = gate(&pa, gamma);
            Ok(SampleTerms {
                loss_a: target_a.map_or(T::zero(), |y| cross_entropy(&pa, y)),
                loss_b: target_b.map_or(T::zero(), |y| cross_entropy(&pb, y)),
                signal_a: target_a.map(|y| ce_logit_grad(&pa, y)),
                signal_b: target_b.map(|y| ce_logit_grad(&pb, y)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if !unlabeled.is_empty() {
        let n = T::from_usize_lossy(unlabeled.len());
        let scale = lambda / (two * n);
        for (view, terms) in unlabeled.iter().zip(&cross) {
            loss.unsupervised_a = loss.unsupervised_a + terms.loss_a;
            loss.unsupervised_b = loss.unsupervised_b + terms.loss_b;
            loss.gates_open += terms.signal_a.is_some() as usize + terms.signal_b.is_some() as usize;
            // lambda = 0 contributes nothing, not even signed zeros
            if lambda != T::zero() {
                if let Some(s) = &terms.signal_a {
                    accumulate(&mut grad.a, s, &view.x_a, scale);
                }
                if let Some(s) = &terms.signal_b {
                    accumulate(&mut grad.b, s, &view.x_b, scale);
                }
            }
        }
        loss.unsupervised_a = loss.unsupervised_a / n;
        loss.unsupervised_b = loss.unsupervised_b / n;
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HcsConfig {
    /// Confidence threshold; the gate opens when `max(p) > gamma`.
    pub gamma: f64,
    /// Weight of the unsupervised loss.
    pub lambda_u: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Input-feature dropout rate producing each probe's view.
    pub dropout: f64,
    /// Standard deviation of the initial weights.
    pub init_scale: f64,
}

impl Default for HcsConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            lambda_u: 1.0,
            learning_rate: 1e-4,
            weight_decay: 8e-4,
            epochs: 200,
            batch_labeled: 64,
            batch_unlabeled: 64,
            seed: 0,
            lr_decay_factor: 0.1,
            lr_decay_every: 100,
            dropout: 0.1,
            init_scale: 0.01,
        }
    }
}

impl HcsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::OutOfRange(what.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return bad("lambda_u must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if self.epochs == 0 || self.batch_labeled == 0 || self.batch_unlabeled == 0 || self.lr_decay_every == 0 {
            return bad("epochs, batch sizes and lr_decay_every must be at least 1");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad("lr_decay_factor must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be >= 0");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub supervised_loss: f64,
    pub unsupervised_loss: f64,
    pub gate_open_fraction: f64,
    pub supervised_a: f64,
    pub supervised_b: f64,
    pub unsupervised_a: f64,
    pub unsupervised_b: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport<T> {
    pub epochs: Vec<EpochStats>,
    pub probes: ProbePair<T>,
}

impl<T: Scalar> TrainReport<T> {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "epochs": self.epochs })
    }
}

/// Endless shuffled pass over a pool, reshuffled whenever it runs out.
struct Cycler {
    pool: Vec<usize>,
    order: Vec<usize>,
    next: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(pool: Vec<usize>, rng: ChaCha8Rng) -> Self {
        Self { order: Vec::new(), next: 0, pool, rng }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        if self.pool.is_empty() {
            return out;
        }
        while out.len() < n {
            if self.next == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(&mut self.rng);
                self.next = 0;
            }
            out.push(self.order[self.next]);
            self.next += 1;
        }
        out
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn dropped<T: Scalar>(x: &[T], rate: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    if rate == 0.0 {
        return x.to_vec();
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    x.iter().map(|&v| if rng.random::<f64>() < rate { T::zero() } else { v * keep }).collect()
}

/// Probes initialized from `config.seed` with small Gaussian weights and zero bias.
pub fn init_pair<T: Scalar>(classes: usize, dim: usize, config: &HcsConfig) -> ProbePair<T> {
    let mut rng = stream(config.seed, STREAM_INIT);
    let a = LinearProbe::random(classes, dim, config.init_scale, &mut rng);
    let b = LinearProbe::random(classes, dim, config.init_scale, &mut rng);
    ProbePair { a, b }
}

/// Trains both probes on `features`: `split.selected` is the clean subset with
/// its pseudo-labels and `split.rejected` the unlabeled pool.
pub fn train_hcs<T: Scalar>(
    features: &FeatureMatrix<T>,
    split: &SelectionResult,
    classes: usize,
    config: &HcsConfig,
) -> Result<TrainReport<T>> {
    let init = init_pair(classes, features.dim(), config);
    train_hcs_from(init, features, split, config)
}

pub fn train_hcs_from<T: Scalar>(
    init: ProbePair<T>,
    features: &FeatureMatrix<T>,
    split: &SelectionResult,
    config: &HcsConfig,
) -> Result<TrainReport<T>> {
    config.validate()?;
    if split.selected.is_empty() {
        return Err(Error::Empty("clean subset"));
    }
    if split.total != features.len() {
        return Err(Error::SampleMismatch(format!("split over {} rows, {} features", split.total, features.len())));
    }
    init.a.shape_matches(&init.b)?;
    if init.a.dim() != features.dim() {
        return Err(Error::DimensionMismatch { expected: init.a.dim(), found: features.dim() });
    }
    let classes = init.a.classes();
    if let Some(s) = split.selected.iter().find(|s| s.label >= classes) {
        return Err(Error::LabelOutOfRange { label: s.label, classes });
    }

    let mut pair = init;
    let gamma = T::from_f64_lossy(config.gamma);
    let lambda = T::from_f64_lossy(config.lambda_u);
    let wd = T::from_f64_lossy(config.weight_decay);
    let mut labeled_pool = Cycler::new((0..split.selected.len()).collect(), stream(config.seed, STREAM_LABELED_ORDER));
    let mut unlabeled_pool = Cycler::new(split.rejected.clone(), stream(config.seed, STREAM_UNLABELED_ORDER));
    let mut labeled_dropout = stream(config.seed, STREAM_LABELED_DROPOUT);
    let mut unlabeled_dropout = stream(config.seed, STREAM_UNLABELED_DROPOUT);
    let steps = split.selected.len().div_ceil(config.batch_labeled);

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr_f64 = config.learning_rate_at(epoch);
        let lr = T::from_f64_lossy(lr_f64);
        let mut sums = [0.0f64; 4];
        let (mut open, mut gates) = (0usize, 0usize);
        for step in 0..steps {
            let labeled: Vec<(PairedView<T>, usize)> = labeled_pool
                .take(config.batch_labeled)
                .into_iter()
                .map(|j| {
                    let s = split.selected[j];
                    let x = features.vectors.row(s.index);
                    let x_a = dropped(x, config.dropout, &mut labeled_dropout);
                    let x_b = dropped(x, config.dropout, &mut labeled_dropout);
                    (PairedView { x_a, x_b }, s.label)
                })
                .collect();
            let unlabeled: Vec<PairedView<T>> = unlabeled_pool
                .take(config.batch_unlabeled)
                .into_iter()
                .map(|i| {
                    let x = features.vectors.row(i);
                    let x_a = dropped(x, config.dropout, &mut unlabeled_dropout);
                    let x_b = dropped(x, config.dropout, &mut unlabeled_dropout);
                    PairedView { x_a, x_b }
                })
                .collect();
            let (loss, grad) = hcs_objective(&pair, &labeled, &unlabeled, gamma, lambda)?;
            if !loss.total(lambda).is_finite() || !grad.a.is_finite() || !grad.b.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            pair.a.sgd_step(&grad.a, lr, wd);
            pair.b.sgd_step(&grad.b, lr, wd);
            if !pair.a.is_finite() || !pair.b.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            sums[0] += loss.supervised_a.to_f64_lossy();
            sums[1] += loss.supervised_b.to_f64_lossy();
            sums[2] += loss.unsupervised_a.to_f64_lossy();
            sums[3] += loss.unsupervised_b.to_f64_lossy();
            open += loss.gates_open;
            gates += loss.gates_total;
        }
        let n = steps as f64;
        let [sa, sb, ua, ub] = sums.map(|s| s / n);
        history.push(EpochStats {
            supervised_loss: (sa + sb) / 2.0,
            unsupervised_loss: (ua + ub) / 2.0,
            gate_open_fraction: if gates == 0 { 0.0 } else { open as f64 / gates as f64 },
            supervised_a: sa,
            supervised_b: sb,
            unsupervised_a: ua,
            unsupervised_b: ub,
            learning_rate: lr_f64,
        });
    }
    Ok(TrainReport { epochs: history, probes: pair })
}
