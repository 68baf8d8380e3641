//! Synthetic datasets with hidden ground truth: Gaussian feature blobs, class
//! embeddings whose zero-shot argmax is wrong at a chosen rate, and K-view
//! predictions in which mislabeled samples vote less consistently.
//!
//! Feature layout: the first `dim - C_total` coordinates carry the visual blob
//! structure, the last `C_total` coordinates the prompt-aligned component that
//! decides the zero-shot label. Class embedding `c` is the unit vector on the
//! `c`-th prompt coordinate.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::tensor_store::{DatasetManifest, Split, Tensor, TensorBundle};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlideSpec {
    pub slides: usize,
    pub patches_per_slide: usize,
    /// Fraction of each slide's patches that show the slide's own class; the rest are open-set tissue.
    pub tumor_fraction: f64,
}

impl Default for SlideSpec {
    fn default() -> Self {
        Self { slides: 30, patches_per_slide: 40, tumor_fraction: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub open_set_classes: usize,
    /// Samples per class (target and open-set) when `slides` is absent.
    pub samples_per_class: usize,
    pub dim: usize,
    /// Distance between blob centers in units of the blob standard deviation.
    pub separation: f64,
    /// Probability that a sample's zero-shot label is wrong.
    pub prompt_noise: f64,
    pub views: usize,
    /// Rate at which a mislabeled sample's view votes for a random other class;
    /// correctly labeled samples flip at a third of this rate.
    pub view_flip: f64,
    pub seed: u64,
    pub slides: Option<SlideSpec>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            open_set_classes: 0,
            samples_per_class: 1000,
            dim: 32,
            separation: 8.0,
            prompt_noise: 0.3,
            views: 20,
            view_flip: 0.3,
            seed: 0,
            slides: None,
        }
    }
}

impl SynthSpec {
    pub fn total_classes(&self) -> usize {
        self.classes + self.open_set_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::OutOfRange(format!("synth: {m}")));
        if self.classes == 0 {
            return bad("at least one target class");
        }
        if self.dim < 2 * self.total_classes() {
            return bad("dim must be at least twice the total class count");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation must be positive");
        }
        if !(0.0..=1.0).contains(&self.prompt_noise) || !(0.0..=1.0).contains(&self.view_flip) {
            return bad("noise and flip rates must lie in [0, 1]");
        }
        if self.prompt_noise > 0.0 && self.total_classes() < 2 {
            return bad("prompt noise needs at least two classes");
        }
        if self.views == 0 {
            return bad("at least one view");
        }
        match &self.slides {
            Some(s) => {
                if s.slides == 0 || s.patches_per_slide == 0 {
                    return bad("slides and patches_per_slide must be positive");
                }
                if !(0.0..=1.0).contains(&s.tumor_fraction) {
                    return bad("tumor_fraction must lie in [0, 1]");
                }
                if self.open_set_classes == 0 && s.tumor_fraction < 1.0 {
                    return bad("non-tumor patches need open-set classes");
                }
            }
            None if self.samples_per_class == 0 => return bad("samples_per_class must be positive"),
            None => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    /// `[N x dim]`
    pub features: Matrix<f32>,
    /// `[C_total x dim]`
    pub class_embeddings: Matrix<f32>,
    /// `[N x K x C_total]`, flattened.
    pub multiview: Vec<f32>,
    /// True class of every sample in `0..C_total`.
    pub labels: Vec<usize>,
    /// Zero-shot label the generator intended (before views).
    pub perceived: Vec<usize>,
    /// True class of each slide, in manifest slide order.
    pub slide_labels: Vec<usize>,
}

impl SynthDataset {
    pub fn features_bundle(&self) -> TensorBundle {
        let (n, d) = self.features.shape();
        TensorBundle::new().with(Tensor::f32("features", &[n, d], self.features.as_slice().to_vec()))
    }

    pub fn class_embeddings_bundle(&self) -> TensorBundle {
        let (c, d) = self.class_embeddings.shape();
        TensorBundle::new().with(Tensor::f32("class_embeddings", &[c, d], self.class_embeddings.as_slice().to_vec()))
    }

    pub fn multiview_bundle(&self, views: usize) -> TensorBundle {
        let n = self.features.rows();
        let c = self.class_embeddings.rows();
        TensorBundle::new().with(Tensor::f32("probs_multiview", &[n, views, c], self.multiview.clone()))
    }

    pub fn ground_truth_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new().with(Tensor::u32(
            "labels",
            &[self.labels.len()],
            self.labels.iter().map(|&l| l as u32).collect(),
        ));
        if !self.slide_labels.is_empty() {
            b.push(Tensor::u32(
                "slide_labels",
                &[self.slide_labels.len()],
                self.slide_labels.iter().map(|&l| l as u32).collect(),
            ));
        }
        b
    }
}

/// Open-set class `q` is mistaken for target class `q mod C` by target-only prompts.
pub fn confuser(class: usize, targets: usize) -> usize {
    class % targets
}

fn other_class(rng: &mut ChaCha8Rng, exclude: usize, count: usize) -> usize {
    let pick = rng.random_range(0..count - 1);
    if pick >= exclude {
        pick + 1
    } else {
        pick
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let c = spec.classes;
    let total = spec.total_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // true classes, sample ids, slide membership
    let mut labels = Vec::new();
    let mut sample_ids = Vec::new();
    let mut slide_labels = Vec::new();
    let mut slide_of = BTreeMap::new();
    match &spec.slides {
        Some(slides) => {
            let tumor = (slides.tumor_fraction * slides.patches_per_slide as f64).round() as usize;
            for j in 0..slides.slides {
                let label = j % c;
                slide_labels.push(label);
                let slide_id = format!("slide{j:04}");
                for p in 0..slides.patches_per_slide {
                    let class = if p < tumor { label } else { c + rng.random_range(0..spec.open_set_classes) };
                    let id = format!("{slide_id}_p{p:04}");
                    slide_of.insert(id.clone(), slide_id.clone());
                    sample_ids.push(id);
                    labels.push(class);
                }
            }
        }
        None => {
            for class in 0..total {
                for i in 0..spec.samples_per_class {
                    sample_ids.push(format!("c{class:02}_{i:06}"));
                    labels.push(class);
                }
            }
        }
    }
    let n = labels.len();

    let perceived: Vec<usize> = labels
        .iter()
        .map(|&t| {
            if rng.random::<f64>() >= spec.prompt_noise {
                t
            } else if t >= c {
                confuser(t, c)
            } else if c > 1 {
                other_class(&mut rng, t, c)
            } else {
                other_class(&mut rng, t, total)
            }
        })
        .collect();

    let visual = spec.dim - total;
    let radius = spec.separation / std::f64::consts::SQRT_2;
    let mut features = Matrix::zeros(n, spec.dim);
    for i in 0..n {
        let row = features.row_mut(i);
        for (k, v) in row[..visual].iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            let center = if k == labels[i] { radius } else { 0.0 };
            *v = (center + z) as f32;
        }
        let text = &mut row[visual..];
        for v in text.iter_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
        text[perceived[i]] += 1.0;
        if labels[i] >= c {
            text[confuser(labels[i], c)] += 0.5;
        }
    }

    let mut class_embeddings = Matrix::zeros(total, spec.dim);
    for k in 0..total {
        class_embeddings.set(k, visual + k, 1.0f32);
    }

    let mut multiview = Vec::with_capacity(n * spec.views * total);
    for i in 0..n {
        let noisy = perceived[i] != labels[i];
        let flip = if noisy { spec.view_flip } else { spec.view_flip / 3.0 };
        for _ in 0..spec.views {
            let vote = if total > 1 && rng.random::<f64>() < flip {
                other_class(&mut rng, perceived[i], total)
            } else {
                perceived[i]
            };
            let mix: f64 = rng.random_range(0.2..0.8);
            let base = mix / total as f64;
            multiview.extend((0..total).map(|k| (if k == vote { 1.0 - mix + base } else { base }) as f32));
        }
    }

    let manifest = DatasetManifest {
        sample_ids,
        class_names: (0..c).map(|k| format!("class{k}")).collect(),
        open_set_class_names: (0..spec.open_set_classes).map(|k| format!("open{k}")).collect(),
        slide_of: spec.slides.as_ref().map(|_| slide_of),
        split: Split::Train,
    };
    Ok(SynthDataset { manifest, features, class_embeddings, multiview, labels, perceived, slide_labels })
}
