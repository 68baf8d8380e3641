//! Slide-level extension: drop patches whose pseudo-label is an open-set class,
//! run the patch chain on what is left, and mean-pool patch predictions into
//! slide labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::hcs::{predict_pair, train_hcs, HcsConfig, TrainReport};
use crate::matrix::Matrix;
use crate::mvc::{summarize_votes, vote_counts, MultiViewPredictions, MvcScores};
use crate::pipeline::{select_clean, CleanSubset, SelectionConfig};
use crate::scalar::{self, Scalar};
use crate::selection::{LabeledSample, SelectionResult, Stage};
use crate::tensor_store::DatasetManifest;
use crate::zeroshot::FeatureMatrix;
use crate::{Error, Result};

/// One slide's patches; `patch_rows` index into the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideBag<T> {
    pub slide_id: String,
    pub patch_rows: Vec<usize>,
    /// `[S x C_eff]`, one row per patch.
    pub patch_probs: Matrix<T>,
}

impl<T: Scalar> SlideBag<T> {
    pub fn from_rows(slide_id: impl Into<String>, patch_rows: Vec<usize>, probs: &Matrix<T>) -> Self {
        let patch_probs = probs.select_rows(&patch_rows);
        Self { slide_id: slide_id.into(), patch_rows, patch_probs }
    }

    pub fn len(&self) -> usize {
        self.patch_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patch_rows.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlidePseudoLabel<T> {
    pub slide_id: String,
    pub probs: Vec<T>,
    pub label: usize,
}

/// Keeps the patches whose argmax is a target class (`< classes`).
pub fn osp_filter<T: Scalar>(bag: &SlideBag<T>, classes: usize) -> SlideBag<T> {
    let keep: Vec<usize> =
        (0..bag.len()).filter(|&i| scalar::argmax(bag.patch_probs.row(i)).is_some_and(|a| a < classes)).collect();
    SlideBag {
        slide_id: bag.slide_id.clone(),
        patch_rows: keep.iter().map(|&i| bag.patch_rows[i]).collect(),
        patch_probs: bag.patch_probs.select_rows(&keep),
    }
}

/// Mean of the patch rows with its argmax. Fails on an empty bag.
pub fn mean_pool_slide<T: Scalar>(bag: &SlideBag<T>) -> Result<SlidePseudoLabel<T>> {
    if bag.is_empty() {
        return Err(Error::Empty("slide bag"));
    }
    let n = T::from_usize_lossy(bag.len());
    let probs: Vec<T> = (0..bag.patch_probs.cols())
        .map(|c| bag.patch_probs.iter_rows().fold(T::zero(), |acc, r| acc + r[c]) / n)
        .collect();
    let label = scalar::argmax(&probs).ok_or(Error::Empty("class axis"))?;
    Ok(SlidePseudoLabel { slide_id: bag.slide_id.clone(), probs, label })
}

/// First `classes` columns of each row, renormalized to sum to one. A row with
/// no target mass becomes uniform.
pub fn restrict_to_targets<T: Scalar>(probs: &Matrix<T>, classes: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(probs.rows(), classes);
    for (i, row) in probs.iter_rows().enumerate() {
        let mass = row[..classes].iter().copied().fold(T::zero(), |a, b| a + b);
        let dst = out.row_mut(i);
        if mass > T::zero() {
            dst.iter_mut().zip(&row[..classes]).for_each(|(d, &v)| *d = v / mass);
        } else {
            dst.iter_mut().for_each(|d| *d = T::one() / T::from_usize_lossy(classes));
        }
    }
    out
}

fn slides_of(manifest: &DatasetManifest) -> Result<Vec<(String, Vec<usize>)>> {
    manifest.slides().ok_or_else(|| Error::Manifest("slide_of is required for slide-level runs".into()))
}

/// Slide labels from mean-pooled zero-shot probabilities over the target
/// classes. With `open_set` the patches whose argmax over all classes is an
/// open-set class are dropped first; `None` marks a slide left empty.
pub fn zero_shot_slide_labels<T: Scalar>(
    manifest: &DatasetManifest,
    probs: &Matrix<T>,
    open_set: bool,
) -> Result<Vec<Option<SlidePseudoLabel<T>>>> {
    let classes = manifest.num_classes();
    let targets = restrict_to_targets(probs, classes);
    slides_of(manifest)?
        .into_par_iter()
        .map(|(slide, rows)| {
            let rows = if open_set {
                osp_filter(&SlideBag::from_rows(slide.clone(), rows, probs), classes).patch_rows
            } else {
                rows
            };
            let bag = SlideBag::from_rows(slide, rows, &targets);
            (!bag.is_empty()).then(|| mean_pool_slide(&bag)).transpose()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideConfig {
    pub selection: SelectionConfig,
    pub hcs: HcsConfig,
}

#[derive(Clone, Debug)]
pub struct SlideRun<T> {
    /// Patches whose vote majority is a target class.
    pub osp: SelectionResult,
    /// Consensus scores of the OSP survivors over the target classes.
    pub scores: MvcScores<T>,
    pub subset: CleanSubset<T>,
    pub training: TrainReport<T>,
    /// `[N x C]` probe predictions for every patch.
    pub patch_probs: Matrix<T>,
    /// One entry per slide in manifest order; `None` when OSP emptied the slide.
    pub slides: Vec<(String, Option<SlidePseudoLabel<T>>)>,
}

impl<T> SlideRun<T> {
    pub fn emptied(&self) -> Vec<&str> {
        self.slides.iter().filter(|(_, s)| s.is_none()).map(|(id, _)| id.as_str()).collect()
    }
}

/// OSP, then MVC on the survivors with votes renormalized over the target
/// classes, then PFC and HCS with every non-clean patch unlabeled, then
/// per-slide mean pooling of probe predictions over the OSP survivors.
pub fn slide_pipeline<T: Scalar>(
    manifest: &DatasetManifest,
    multiview: &MultiViewPredictions<T>,
    features: &FeatureMatrix<T>,
    config: &SlideConfig,
) -> Result<SlideRun<T>> {
    manifest.validate()?;
    let classes = manifest.num_classes();
    let n = manifest.sample_ids.len();
    if multiview.samples() != n || features.len() != n {
        return Err(Error::SampleMismatch(format!(
            "manifest has {n} samples, predictions {}, features {}",
            multiview.samples(),
            features.len()
        )));
    }
    if multiview.classes() != classes + manifest.num_open_set() {
        return Err(Error::DimensionMismatch {
            expected: classes + manifest.num_open_set(),
            found: multiview.classes(),
        });
    }
    let slides = slides_of(manifest)?;

    let counts = (0..n)
        .into_par_iter()
        .map(|i| vote_counts(multiview.sample(i), multiview.classes()))
        .collect::<Result<Vec<_>>>()?;
    let majority: Vec<usize> = counts.iter().map(|c| scalar::argmax(c).expect("nonempty")).collect();
    let vote_dist = Matrix::from_vec(
        n,
        multiview.classes(),
        counts
            .iter()
            .flat_map(|c| {
                let k = T::from_usize_lossy(c.iter().sum());
                c.iter().map(move |&v| T::from_usize_lossy(v) / k)
            })
            .collect(),
    )?;

    let kept_per_slide: Vec<Vec<usize>> = slides
        .par_iter()
        .map(|(slide, rows)| {
            osp_filter(&SlideBag::from_rows(slide.clone(), rows.clone(), &vote_dist), classes).patch_rows
        })
        .collect();
    let mut survivors: Vec<usize> = kept_per_slide.iter().flatten().copied().collect();
    survivors.sort_unstable();
    let osp = SelectionResult::from_selected(
        Stage::Osp,
        n,
        survivors.iter().map(|&i| LabeledSample { index: i, label: majority[i] }).collect(),
    )?;
    if survivors.is_empty() {
        return Err(Error::Empty("patches left after open-set filtering"));
    }

    let summaries = survivors.iter().map(|&i| summarize_votes(&counts[i][..classes])).collect::<Result<Vec<_>>>()?;
    let ids = survivors.iter().map(|&i| manifest.sample_ids[i].clone()).collect();
    let scores = MvcScores::from_summaries(survivors.clone(), n, ids, summaries)?;

    let subset = select_clean(features, &scores, classes, &config.selection)?;
    let training = train_hcs(features, subset.clean(), classes, &config.hcs)?;
    let patch_probs = predict_pair(&training.probes.a, &training.probes.b, &features.vectors)?;

    let pooled = slides
        .par_iter()
        .zip(&kept_per_slide)
        .map(|((slide, _), kept)| {
            let bag = SlideBag::from_rows(slide.clone(), kept.clone(), &patch_probs);
            let label = (!bag.is_empty()).then(|| mean_pool_slide(&bag)).transpose()?;
            Ok((slide.clone(), label))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SlideRun { osp, scores, subset, training, patch_probs, slides: pooled })
}
