//! The patch-level chain: consensus scores, MVC (or CMVC) selection, PFC
//! filtering and HCS training.

use serde::{Deserialize, Serialize};

use crate::hcs::{train_hcs, HcsConfig, TrainReport};
use crate::mvc::{select_cmvc, select_mvc, MvcScores};
use crate::pfc::{run_pfc, KMeansParams, PfcOutput};
use crate::scalar::Scalar;
use crate::selection::SelectionResult;
use crate::zeroshot::FeatureMatrix;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Percentage kept by MVC.
    pub percent: f64,
    /// Select per pseudo-class instead of globally.
    pub cmvc: bool,
    pub kmeans: KMeansParams,
    /// Seed of the clustering restarts.
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { percent: crate::mvc::DEFAULT_PERCENT, cmvc: false, kmeans: KMeansParams::default(), seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct CleanSubset<T> {
    pub mvc: SelectionResult,
    pub pfc: PfcOutput<T>,
}

impl<T> CleanSubset<T> {
    pub fn clean(&self) -> &SelectionResult {
        &self.pfc.selection
    }
}

pub fn select_consensus<T: Scalar>(scores: &MvcScores<T>, config: &SelectionConfig) -> Result<SelectionResult> {
    if config.cmvc {
        select_cmvc(scores, config.percent)
    } else {
        select_mvc(scores, config.percent)
    }
}

/// MVC followed by PFC over `classes` target classes.
pub fn select_clean<T: Scalar>(
    features: &FeatureMatrix<T>,
    scores: &MvcScores<T>,
    classes: usize,
    config: &SelectionConfig,
) -> Result<CleanSubset<T>> {
    let mvc = select_consensus(scores, config)?;
    let pfc = run_pfc(features, &mvc, classes, &config.kmeans, config.seed)?;
    Ok(CleanSubset { mvc, pfc })
}

#[derive(Clone, Debug)]
pub struct PatchRun<T> {
    pub subset: CleanSubset<T>,
    pub training: TrainReport<T>,
}

/// Full patch chain from consensus scores to trained probes.
pub fn run_patch_pipeline<T: Scalar>(
    features: &FeatureMatrix<T>,
    scores: &MvcScores<T>,
    classes: usize,
    selection: &SelectionConfig,
    hcs: &HcsConfig,
) -> Result<PatchRun<T>> {
    let subset = select_clean(features, scores, classes, selection)?;
    let training = train_hcs(features, subset.clean(), classes, hcs)?;
    Ok(PatchRun { subset, training })
}
