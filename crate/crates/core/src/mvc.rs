//! Multi-view consensus: hard votes over K augmented views, vote entropy, and
//! lowest-entropy selection either globally or per pseudo-class.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::matrix::Matrix;
use crate::scalar::{self, Scalar};
use crate::selection::{LabeledSample, SelectionResult, Stage};
use crate::{Error, Result};

pub const DEFAULT_PERCENT: f64 = 30.0;
pub const DEFAULT_VIEWS: usize = 20;

const STOCHASTIC_TOL: f64 = 1e-4;

/// Probabilities for K views of each of N samples, stored `[N x K x C]` row-major.
#[derive(Clone, Debug)]
pub struct MultiViewPredictions<T> {
    probs: Vec<T>,
    samples: usize,
    views: usize,
    classes: usize,
}

impl<T: Scalar> MultiViewPredictions<T> {
    pub fn new(samples: usize, views: usize, classes: usize, probs: Vec<T>) -> Result<Self> {
        if views == 0 {
            return Err(Error::OutOfRange("at least one view is required".into()));
        }
        if classes == 0 {
            return Err(Error::Empty("class axis"));
        }
        if samples * views * classes != probs.len() {
            return Err(Error::Shape(format!(
                "{} values for [{samples} x {views} x {classes}] predictions",
                probs.len()
            )));
        }
        Ok(Self { probs, samples, views, classes })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// The `[K x C]` block of sample `i`.
    pub fn sample(&self, i: usize) -> &[T] {
        let w = self.views * self.classes;
        &self.probs[i * w..(i + 1) * w]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.probs
    }
}

/// Consensus summary of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteSummary<T> {
    pub label: usize,
    pub entropy: T,
    pub vote_dist: Vec<T>,
}

/// Per-view argmax votes for a `[K x C]` block of probability rows.
pub fn vote_counts<T: Scalar>(views: &[T], classes: usize) -> Result<Vec<usize>> {
    if classes == 0 || views.is_empty() || !views.len().is_multiple_of(classes) {
        return Err(Error::Shape(format!("{} values do not form rows of {classes}", views.len())));
    }
    let mut counts = vec![0usize; classes];
    for (row, probs) in views.chunks_exact(classes).enumerate() {
        if !scalar::is_stochastic(probs, STOCHASTIC_TOL) {
            return Err(Error::NotStochastic { row });
        }
        counts[scalar::argmax(probs).expect("nonempty row")] += 1;
    }
    Ok(counts)
}

/// Vote distribution, natural-log entropy (with `0 ln 0 = 0`) and majority label from vote counts.
pub fn summarize_votes<T: Scalar>(counts: &[usize]) -> Result<VoteSummary<T>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("vote counts"));
    }
    let n = T::from_usize_lossy(total);
    let vote_dist: Vec<T> = counts.iter().map(|&c| T::from_usize_lossy(c) / n).collect();
    let entropy = counts
        .iter()
        .zip(&vote_dist)
        .filter(|(&c, _)| c > 0)
        .fold(T::zero(), |acc, (&c, &p)| acc + p * (n / T::from_usize_lossy(c)).ln());
    let label = scalar::argmax(counts).expect("nonempty counts");
    Ok(VoteSummary { label, entropy, vote_dist })
}

/// Hard-vote consensus of K views given as `[K x C]` probability rows.
pub fn vote_entropy<T: Scalar>(views: &[T], classes: usize) -> Result<VoteSummary<T>> {
    summarize_votes(&vote_counts(views, classes)?)
}

/// Consensus scores for a set of samples. `rows[j]` is the dataset row scored at
/// position `j`; `total` is the size of the dataset the rows index into.
#[derive(Clone, Debug)]
pub struct MvcScores<T> {
    pub rows: Vec<usize>,
    pub total: usize,
    pub sample_ids: Vec<String>,
    pub pseudo_label: Vec<usize>,
    pub entropy: Vec<T>,
    pub vote_dist: Matrix<T>,
}

impl<T: Scalar> MvcScores<T> {
    pub fn from_summaries(
        rows: Vec<usize>,
        total: usize,
        sample_ids: Vec<String>,
        summaries: Vec<VoteSummary<T>>,
    ) -> Result<Self> {
        if rows.len() != summaries.len() || sample_ids.len() != summaries.len() {
            return Err(Error::DimensionMismatch { expected: summaries.len(), found: rows.len() });
        }
        let classes = summaries.first().map_or(0, |s| s.vote_dist.len());
        let mut pseudo_label = Vec::with_capacity(summaries.len());
        let mut entropy = Vec::with_capacity(summaries.len());
        let mut dist = Vec::with_capacity(summaries.len() * classes);
        for s in summaries {
            pseudo_label.push(s.label);
            entropy.push(s.entropy);
            dist.extend(s.vote_dist);
        }
        let vote_dist = Matrix::from_vec(rows.len(), classes, dist)?;
        Ok(Self { rows, total, sample_ids, pseudo_label, entropy, vote_dist })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Positions sorted by (entropy ascending, sample ID ascending).
    fn ranked(&self, positions: &mut [usize]) {
        positions.sort_by(|&a, &b| {
            self.entropy[a]
                .partial_cmp(&self.entropy[b])
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.sample_ids[a].cmp(&self.sample_ids[b]))
        });
    }

    fn labeled(&self, position: usize) -> LabeledSample {
        LabeledSample { index: self.rows[position], label: self.pseudo_label[position] }
    }
}

/// Scores every sample of `predictions`.
pub fn mvc_scores<T: Scalar>(predictions: &MultiViewPredictions<T>, sample_ids: &[String]) -> Result<MvcScores<T>> {
    if sample_ids.len() != predictions.samples() {
        return Err(Error::DimensionMismatch { expected: predictions.samples(), found: sample_ids.len() });
    }
    let summaries = (0..predictions.samples())
        .into_par_iter()
        .map(|i| vote_entropy(predictions.sample(i), predictions.classes()))
        .collect::<Result<Vec<_>>>()?;
    let n = predictions.samples();
    MvcScores::from_summaries((0..n).collect(), n, sample_ids.to_vec(), summaries)
}

/// `floor(n * percent / 100)`, at least one when `n > 0`.
pub fn selection_count(n: usize, percent: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((n as f64 * percent / 100.0).floor() as usize).clamp(1, n)
}

fn check_percent(percent: f64) -> Result<()> {
    if percent.is_finite() && percent > 0.0 && percent <= 100.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("selection percent must be in (0, 100], got {percent}")))
    }
}

/// Keeps the `percent`% lowest-entropy samples overall.
pub fn select_mvc<T: Scalar>(scores: &MvcScores<T>, percent: f64) -> Result<SelectionResult> {
    check_percent(percent)?;
    if scores.is_empty() {
        return Err(Error::Empty("mvc scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    scores.ranked(&mut order);
    let keep = selection_count(scores.len(), percent);
    let selected = order[..keep].iter().map(|&p| scores.labeled(p)).collect();
    SelectionResult::from_selected(Stage::Mvc, scores.total, selected)
}

/// Keeps the `percent`% lowest-entropy samples within each pseudo-class.
pub fn select_cmvc<T: Scalar>(scores: &MvcScores<T>, percent: f64) -> Result<SelectionResult> {
    check_percent(percent)?;
    if scores.is_empty() {
        return Err(Error::Empty("mvc scores"));
    }
    let classes = scores.pseudo_label.iter().max().map_or(0, |&m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (p, &label) in scores.pseudo_label.iter().enumerate() {
        groups[label].push(p);
    }
    let mut selected = Vec::new();
    for mut group in groups.into_iter().filter(|g| !g.is_empty()) {
        scores.ranked(&mut group);
        let keep = selection_count(group.len(), percent);
        selected.extend(group[..keep].iter().map(|&p| scores.labeled(p)));
    }
    SelectionResult::from_selected(Stage::Cmvc, scores.total, selected)
}
