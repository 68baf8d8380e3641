use serde::{Deserialize, Serialize};

use crate::tensor_store::{Tensor, TensorBundle};
use crate::{Error, Result};

/// Which filtering stage produced a selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Every sample kept with its zero-shot label.
    All,
    Mvc,
    Cmvc,
    Pfc,
    Osp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    /// Row of the sample in the dataset.
    pub index: usize,
    pub label: usize,
}

/// Partition of the rows `0..total` into a pseudo-labeled subset and a rest
/// whose labels were discarded. Both lists are kept in ascending row order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub stage: Stage,
    pub total: usize,
    pub selected: Vec<LabeledSample>,
    pub rejected: Vec<usize>,
}

impl SelectionResult {
    /// Builds a selection from kept samples; everything else in `0..total` is rejected.
    pub fn from_selected(stage: Stage, total: usize, mut selected: Vec<LabeledSample>) -> Result<Self> {
        selected.sort_by_key(|s| s.index);
        let mut in_set = vec![false; total];
        for s in &selected {
            if s.index >= total {
                return Err(Error::SampleMismatch(format!("row {} outside 0..{total}", s.index)));
            }
            if std::mem::replace(&mut in_set[s.index], true) {
                return Err(Error::SampleMismatch(format!("row {} selected twice", s.index)));
            }
        }
        let rejected = (0..total).filter(|&i| !in_set[i]).collect();
        Ok(Self { stage, total, selected, rejected })
    }

    /// Every row selected with the given labels.
    pub fn all(labels: &[usize]) -> Self {
        Self {
            stage: Stage::All,
            total: labels.len(),
            selected: labels.iter().enumerate().map(|(index, &label)| LabeledSample { index, label }).collect(),
            rejected: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.index).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.label).collect()
    }

    pub fn selected_ids<'a>(&self, sample_ids: &'a [String]) -> Vec<&'a str> {
        self.selected.iter().map(|s| sample_ids[s.index].as_str()).collect()
    }

    pub fn rejected_ids<'a>(&self, sample_ids: &'a [String]) -> Vec<&'a str> {
        self.rejected.iter().map(|&i| sample_ids[i].as_str()).collect()
    }

    /// Checks that selected and rejected partition `0..total`.
    pub fn check_partition(&self) -> Result<()> {
        let mut seen = vec![false; self.total];
        let rows = self.selected.iter().map(|s| s.index).chain(self.rejected.iter().copied());
        let mut count = 0;
        for i in rows {
            if i >= self.total || std::mem::replace(&mut seen[i], true) {
                return Err(Error::SampleMismatch(format!("row {i} duplicated or out of range")));
            }
            count += 1;
        }
        if count != self.total {
            return Err(Error::SampleMismatch(format!("{count} of {} rows covered", self.total)));
        }
        Ok(())
    }

    pub fn mask(&self) -> Vec<u32> {
        let mut mask = vec![0u32; self.total];
        for s in &self.selected {
            mask[s.index] = 1;
        }
        mask
    }

    /// Per-row labels for the selected rows, `u32::MAX` elsewhere.
    pub fn dense_labels(&self) -> Vec<u32> {
        let mut labels = vec![u32::MAX; self.total];
        for s in &self.selected {
            labels[s.index] = s.label as u32;
        }
        labels
    }

    /// Writes `selected_mask` and `pseudo_labels` into `bundle`.
    pub fn write_into(&self, bundle: &mut TensorBundle) {
        bundle.push(Tensor::u32("selected_mask", &[self.total], self.mask()));
        bundle.push(Tensor::u32("pseudo_labels", &[self.total], self.dense_labels()));
    }

    pub fn read_from(bundle: &TensorBundle, stage: Stage) -> Result<Self> {
        let (_, mask) = bundle.u32_entry("selected_mask", 1)?;
        let (_, labels) = bundle.u32_entry("pseudo_labels", 1)?;
        if mask.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: mask.len(), found: labels.len() });
        }
        let selected = mask
            .iter()
            .zip(labels)
            .enumerate()
            .filter(|(_, (&m, _))| m != 0)
            .map(|(index, (_, &label))| LabeledSample { index, label: label as usize })
            .collect();
        Self::from_selected(stage, mask.len(), selected)
    }
}
