//! Prompt-feature consensus: cluster the MVC-selected samples in feature space,
//! align clusters to classes by maximum agreement, and keep only samples whose
//! prompt label matches their cluster's class.

mod hungarian;
mod kmeans;

pub use hungarian::{contingency, hungarian_from_signed, hungarian_max_agreement, min_cost_assignment, ClassMapping};
pub use kmeans::{kmeans_pp, ClusterAssignment, KMeansParams};

use crate::scalar::Scalar;
use crate::selection::{LabeledSample, SelectionResult, Stage};
use crate::zeroshot::FeatureMatrix;
use crate::{Error, Result};

/// Keeps selected sample `j` iff its prompt label equals `mapping.perm[cluster_of[j]]`.
/// `clusters` must have been fit on `prompt.selected`, in order.
pub fn pfc_filter<T: Scalar>(
    prompt: &SelectionResult,
    clusters: &ClusterAssignment<T>,
    mapping: &ClassMapping,
) -> Result<SelectionResult> {
    if clusters.cluster_of.len() != prompt.selected.len() {
        return Err(Error::SampleMismatch(format!(
            "{} cluster assignments for {} selected samples",
            clusters.cluster_of.len(),
            prompt.selected.len()
        )));
    }
    if mapping.perm.len() != clusters.num_clusters() {
        return Err(Error::SampleMismatch(format!(
            "mapping over {} clusters, assignment has {}",
            mapping.perm.len(),
            clusters.num_clusters()
        )));
    }
    let kept: Vec<LabeledSample> = prompt
        .selected
        .iter()
        .zip(&clusters.cluster_of)
        .filter(|(s, &o)| s.label == mapping.map(o))
        .map(|(s, _)| *s)
        .collect();
    SelectionResult::from_selected(Stage::Pfc, prompt.total, kept)
}

#[derive(Clone, Debug)]
pub struct PfcOutput<T> {
    pub clusters: ClusterAssignment<T>,
    pub mapping: ClassMapping,
    pub selection: SelectionResult,
}

/// Clusters the L2-normalized features of `prompt.selected` into `classes`
/// clusters, matches clusters to classes and filters.
pub fn run_pfc<T: Scalar>(
    features: &FeatureMatrix<T>,
    prompt: &SelectionResult,
    classes: usize,
    params: &KMeansParams,
    seed: u64,
) -> Result<PfcOutput<T>> {
    if prompt.total != features.len() {
        return Err(Error::SampleMismatch(format!(
            "selection over {} rows, {} feature rows",
            prompt.total,
            features.len()
        )));
    }
    if let Some(s) = prompt.selected.iter().find(|s| s.label >= classes) {
        return Err(Error::LabelOutOfRange { label: s.label, classes });
    }
    let subset = features.vectors.select_rows(&prompt.selected_indices()).l2_normalized();
    let clusters = kmeans_pp(&subset, classes, seed, params)?;
    let table = contingency(&clusters.cluster_of, &prompt.labels(), classes)?;
    let mapping = hungarian_max_agreement(&table)?;
    let selection = pfc_filter(prompt, &clusters, &mapping)?;
    Ok(PfcOutput { clusters, mapping, selection })
}
