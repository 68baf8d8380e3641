//! Prompt-based zero-shot class probabilities from image features and class
//! text embeddings, plus ensembling across several models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::scalar::{self, Scalar};
use crate::{Error, Result};

/// Temperature commonly used by CLIP-family pathology models.
pub const DEFAULT_TEMPERATURE: f64 = 4.5871;

const STOCHASTIC_TOL: f64 = 1e-4;

/// How the temperature turns a cosine similarity into a logit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// `sim / tau`
    #[default]
    Divide,
    /// `sim * exp(tau)`, the learned logit-scale convention.
    ExpScale,
}

#[derive(Clone, Debug)]
pub struct FeatureMatrix<T> {
    pub vectors: Matrix<T>,
    pub sample_ids: Vec<String>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(vectors: Matrix<T>, sample_ids: Vec<String>) -> Result<Self> {
        if vectors.rows() != sample_ids.len() {
            return Err(Error::DimensionMismatch { expected: sample_ids.len(), found: vectors.rows() });
        }
        if !vectors.all_finite() {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        if vectors.iter_rows().any(|r| scalar::norm(r) == T::zero()) {
            return Err(Error::ZeroNorm);
        }
        Ok(Self { vectors, sample_ids })
    }

    /// Features named `0..n` for callers that have no sample IDs.
    pub fn anonymous(vectors: Matrix<T>) -> Result<Self> {
        let ids = (0..vectors.rows()).map(|i| format!("{i:08}")).collect();
        Self::new(vectors, ids)
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            vectors: self.vectors.select_rows(indices),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
        }
    }
}

/// Text embeddings of the target prompts (rows `0..C`) followed by any open-set prompts.
#[derive(Clone, Debug)]
pub struct ClassEmbeddings<T> {
    pub vectors: Matrix<T>,
    pub temperature: T,
    pub mode: TemperatureMode,
}

impl<T: Scalar> ClassEmbeddings<T> {
    pub fn new(vectors: Matrix<T>, temperature: T, mode: TemperatureMode) -> Result<Self> {
        if temperature <= T::zero() || !temperature.is_finite() {
            return Err(Error::OutOfRange(format!("temperature must be positive, got {temperature}")));
        }
        if vectors.rows() == 0 {
            return Err(Error::Empty("class embeddings"));
        }
        if !vectors.all_finite() {
            return Err(Error::NonFinite("class embeddings".into()));
        }
        if vectors.iter_rows().any(|r| scalar::norm(r) == T::zero()) {
            return Err(Error::ZeroNorm);
        }
        Ok(Self { vectors, temperature, mode })
    }

    pub fn with_default_temperature(vectors: Matrix<T>) -> Result<Self> {
        Self::new(vectors, T::from_f64_lossy(DEFAULT_TEMPERATURE), TemperatureMode::Divide)
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.rows()
    }

    fn logit(&self, sim: T) -> T {
        match self.mode {
            TemperatureMode::Divide => sim / self.temperature,
            TemperatureMode::ExpScale => sim * self.temperature.exp(),
        }
    }
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    let (na, nb) = (scalar::norm(a), scalar::norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm);
    }
    let sim = scalar::dot(a, b) / (na * nb);
    if !sim.is_finite() {
        return Err(Error::NonFinite("cosine similarity".into()));
    }
    Ok(sim.max(-T::one()).min(T::one()))
}

/// Softmax over temperature-scaled cosine similarities, one row per sample.
pub fn zero_shot_probs<T: Scalar>(features: &FeatureMatrix<T>, classes: &ClassEmbeddings<T>) -> Result<Matrix<T>> {
    if features.dim() != classes.vectors.cols() {
        return Err(Error::DimensionMismatch { expected: classes.vectors.cols(), found: features.dim() });
    }
    let c = classes.num_classes();
    let class_norms: Vec<T> = classes.vectors.iter_rows().map(scalar::norm).collect();
    let rows: Vec<Result<Vec<T>>> = (0..features.len())
        .into_par_iter()
        .map(|i| {
            let f = features.vectors.row(i);
            let nf = scalar::norm(f);
            let mut logits = Vec::with_capacity(c);
            for (g, &ng) in classes.vectors.iter_rows().zip(&class_norms) {
                let sim = scalar::dot(f, g) / (nf * ng);
                if !sim.is_finite() {
                    return Err(Error::NonFinite(format!("similarity for sample {i}")));
                }
                logits.push(classes.logit(sim.max(-T::one()).min(T::one())));
            }
            scalar::softmax_in_place(&mut logits);
            Ok(logits)
        })
        .collect();
    let mut data = Vec::with_capacity(features.len() * c);
    for row in rows {
        data.extend(row?);
    }
    Matrix::from_vec(features.len(), c, data)
}

/// Element-wise mean of several probability matrices of identical shape.
pub fn ensemble_probs<T: Scalar>(matrices: &[Matrix<T>]) -> Result<Matrix<T>> {
    let first = matrices.first().ok_or(Error::Empty("ensemble input"))?;
    for m in &matrices[1..] {
        if m.shape() != first.shape() {
            return Err(Error::Shape(format!("ensemble member {:?} vs {:?}", m.shape(), first.shape())));
        }
    }
    for m in matrices {
        if let Some(row) = m.iter_rows().position(|r| !scalar::is_stochastic(r, STOCHASTIC_TOL)) {
            return Err(Error::NotStochastic { row });
        }
    }
    if matrices.len() == 1 {
        return Ok(first.clone());
    }
    let n = T::from_usize_lossy(matrices.len());
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for r in 0..first.rows() {
        for c in 0..first.cols() {
            let total = matrices.iter().fold(T::zero(), |acc, m| acc + m.get(r, c));
            out.set(r, c, total / n);
        }
    }
    Ok(out)
}

/// Pseudo-label of a probability row, lowest index on ties.
pub fn argmax_label<T: Scalar>(row: &[T]) -> Result<usize> {
    scalar::argmax(row).ok_or(Error::Empty("probability row"))
}
