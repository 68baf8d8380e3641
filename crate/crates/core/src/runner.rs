//! Stage-by-stage orchestration over files in an output directory.
//!
//! Every stage reads its inputs from `.cplt` bundles and the dataset manifest,
//! writes its artifacts into the output directory, and records a run manifest
//! `run/<stage>.run.json` with the configuration hash and SHA-256 digests of
//! every input and output. Wall-clock timings go to a separate
//! `run/<stage>.timings.json` so that all other artifacts are reproducible byte
//! for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::hcs::{predict_pair, train_hcs, HcsConfig, ProbePair};
use crate::metrics::{evaluate, pseudo_label_report, MetricReport};
use crate::mvc::{mvc_scores, MultiViewPredictions};
use crate::pfc::{run_pfc, KMeansParams};
use crate::pipeline::{select_consensus, SelectionConfig};
use crate::selection::{SelectionResult, Stage as SelectionStage};
use crate::synth::{synth_generate, SynthSpec};
use crate::tensor_store::{DatasetManifest, StoreError, Tensor, TensorBundle};
use crate::wsi::{slide_pipeline, SlideConfig};
use crate::zeroshot::{ensemble_probs, zero_shot_probs, ClassEmbeddings, FeatureMatrix, TemperatureMode};
use crate::{scalar, Error, Matrix};

pub const FEATURES_FILE: &str = "features.cplt";
pub const CLASS_EMBEDDINGS_FILE: &str = "class_embeddings.cplt";
pub const MULTIVIEW_FILE: &str = "probs_multiview.cplt";
pub const MANIFEST_FILE: &str = "dataset.manifest.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.cplt";
pub const ZEROSHOT_FILE: &str = "zeroshot.cplt";
pub const MVC_FILE: &str = "mvc.cplt";
pub const PFC_FILE: &str = "pfc.cplt";
pub const PROBES_FILE: &str = "probes.cplt";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const WSI_FILE: &str = "wsi.cplt";
pub const WSI_REPORT_FILE: &str = "wsi_report.json";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Synth,
    Zeroshot,
    Mvc,
    Pfc,
    Hcs,
    Wsi,
    Eval,
    Pipeline,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Synth => "synth",
            StageName::Zeroshot => "zeroshot",
            StageName::Mvc => "mvc",
            StageName::Pfc => "pfc",
            StageName::Hcs => "hcs",
            StageName::Wsi => "wsi",
            StageName::Eval => "eval",
            StageName::Pipeline => "pipeline",
        }
    }
}

/// Every hyperparameter and path of a run. Paths left unset resolve to the
/// default file names inside `out_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub features: Option<PathBuf>,
    pub multiview: Option<PathBuf>,
    pub class_embeddings: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// Probability bundles from other models, averaged with the computed zero-shot probabilities.
    pub ensemble: Vec<PathBuf>,
    /// MVC percentage `M`.
    pub percent: f64,
    /// Expected number of views `K`; checked against the multiview tensor when set.
    pub views: Option<usize>,
    /// Expected number of open-set classes `Q`; checked against the manifest when set.
    pub open_set_classes: Option<usize>,
    pub tau: f64,
    pub temperature_mode: TemperatureMode,
    pub cmvc: bool,
    pub kmeans: KMeansParams,
    pub hcs: HcsConfig,
    /// Drives clustering, training and synthesis; overrides `hcs.seed` and `synth.seed`.
    pub seed: u64,
    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            features: None,
            multiview: None,
            class_embeddings: None,
            manifest: None,
            ground_truth: None,
            ensemble: Vec::new(),
            percent: crate::mvc::DEFAULT_PERCENT,
            views: None,
            open_set_classes: None,
            tau: crate::zeroshot::DEFAULT_TEMPERATURE,
            temperature_mode: TemperatureMode::Divide,
            cmvc: false,
            kmeans: KMeansParams::default(),
            hcs: HcsConfig::default(),
            seed: 0,
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    MissingInput,
    Numeric,
    Stage,
}

#[derive(Debug)]
pub struct RunError {
    pub kind: ErrorKind,
    pub stage: Option<StageName>,
    pub message: String,
}

impl RunError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Config, stage: None, message: message.into() }
    }

    fn missing(stage: StageName, path: &Path) -> Self {
        Self { kind: ErrorKind::MissingInput, stage: Some(stage), message: format!("missing input {}", path.display()) }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::MissingInput => 3,
            ErrorKind::Numeric => 4,
            ErrorKind::Stage => 1,
        }
    }

    /// Single-line JSON for standard error.
    pub fn to_json(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Config => "config",
            ErrorKind::MissingInput => "missing_input",
            ErrorKind::Numeric => "numeric",
            ErrorKind::Stage => "stage",
        };
        serde_json::json!({
            "error": kind,
            "stage": self.stage.map(StageName::as_str),
            "message": self.message,
            "exit_code": self.exit_code(),
        })
        .to_string()
    }

    fn from_error(stage: StageName, err: Error) -> Self {
        let kind = match &err {
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            Error::OutOfRange(_) => ErrorKind::Config,
            Error::Store(StoreError::MissingEntry(_)) => ErrorKind::MissingInput,
            Error::Store(StoreError::Io(e)) | Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => {
                ErrorKind::MissingInput
            }
            _ => ErrorKind::Stage,
        };
        Self { kind, stage: Some(stage), message: err.to_string() }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Some(s) => write!(f, "{}: {}", s.as_str(), self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for RunError {}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides; dotted keys reach nested fields and values
    /// parse as JSON, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, RunError> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) =
                item.split_once('=').ok_or_else(|| RunError::config(format!("override `{item}` is not KEY=VALUE")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| RunError::config(format!("override `{key}`: `{part}` is not inside an object")))?;
                slot = obj.entry(part.to_string()).or_insert(serde_json::Value::Null);
            }
            *slot = parsed;
        }
        serde_json::from_value(value).map_err(|e| RunError::config(format!("override: {e}")))
    }

    /// Config with the top-level seed pushed into every seeded component.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.hcs.seed = c.seed;
        c.synth.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if !(self.percent > 0.0 && self.percent <= 100.0) {
            return Err(RunError::config(format!("percent must be in (0, 100], got {}", self.percent)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(RunError::config("tau must be positive"));
        }
        if self.views == Some(0) {
            return Err(RunError::config("views must be at least 1"));
        }
        self.hcs.validate().map_err(|e| RunError::config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the config as JSON, leaving out `out_dir` so the same run
    /// hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("config is an object").remove("out_dir");
        hex::encode(Sha256::digest(serde_json::to_vec(&value).expect("config serializes")))
    }

    fn path_or(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir.join(default))
    }

    pub fn features_path(&self) -> PathBuf {
        self.path_or(&self.features, FEATURES_FILE)
    }

    pub fn multiview_path(&self) -> PathBuf {
        self.path_or(&self.multiview, MULTIVIEW_FILE)
    }

    pub fn class_embeddings_path(&self) -> PathBuf {
        self.path_or(&self.class_embeddings, CLASS_EMBEDDINGS_FILE)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.path_or(&self.manifest, MANIFEST_FILE)
    }

    pub fn ground_truth_path(&self) -> PathBuf {
        self.path_or(&self.ground_truth, GROUND_TRUTH_FILE)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn selection(&self) -> SelectionConfig {
        SelectionConfig { percent: self.percent, cmvc: self.cmvc, kmeans: self.kmeans, seed: self.seed }
    }
}

#[derive(Serialize)]
struct RunManifest {
    stage: &'static str,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

struct StageRun<'a> {
    name: StageName,
    config: &'a PipelineConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn digest(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

impl<'a> StageRun<'a> {
    fn new(name: StageName, config: &'a PipelineConfig) -> Self {
        Self { name, config, inputs: Vec::new(), outputs: Vec::new() }
    }

    fn fail(&self, err: impl Into<Error>) -> RunError {
        RunError::from_error(self.name, err.into())
    }

    /// Registers a required input, failing when it does not exist.
    fn input(&mut self, path: PathBuf) -> Result<PathBuf, RunError> {
        if !path.is_file() {
            return Err(RunError::missing(self.name, &path));
        }
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn bundle(&mut self, path: PathBuf) -> Result<TensorBundle, RunError> {
        let path = self.input(path)?;
        TensorBundle::load(&path).map_err(|e| self.fail(e))
    }

    fn manifest(&mut self) -> Result<DatasetManifest, RunError> {
        let path = self.input(self.config.manifest_path())?;
        let manifest = DatasetManifest::load(&path).map_err(|e| self.fail(e))?;
        if let Some(q) = self.config.open_set_classes {
            if q != manifest.num_open_set() {
                return Err(RunError::config(format!(
                    "config expects {q} open-set classes, manifest has {}",
                    manifest.num_open_set()
                )));
            }
        }
        Ok(manifest)
    }

    fn features(&mut self, manifest: &DatasetManifest) -> Result<FeatureMatrix<f32>, RunError> {
        let bundle = self.bundle(self.config.features_path())?;
        let (shape, data) = bundle.f32_entry("features", 2).map_err(|e| self.fail(e))?;
        let m = Matrix::from_vec(shape[0], shape[1], data.to_vec()).map_err(|e| self.fail(e))?;
        FeatureMatrix::new(m, manifest.sample_ids.clone()).map_err(|e| self.fail(e))
    }

    fn multiview(&mut self, manifest: &DatasetManifest) -> Result<MultiViewPredictions<f32>, RunError> {
        let bundle = self.bundle(self.config.multiview_path())?;
        let (shape, data) = bundle.f32_entry("probs_multiview", 3).map_err(|e| self.fail(e))?;
        if let Some(k) = self.config.views {
            if k != shape[1] {
                return Err(RunError::config(format!("config expects {k} views, input has {}", shape[1])));
            }
        }
        if shape[0] != manifest.sample_ids.len() {
            return Err(self.fail(Error::DimensionMismatch { expected: manifest.sample_ids.len(), found: shape[0] }));
        }
        MultiViewPredictions::new(shape[0], shape[1], shape[2], data.to_vec()).map_err(|e| self.fail(e))
    }

    fn selection(&mut self, file: &str, stage: SelectionStage) -> Result<(TensorBundle, SelectionResult), RunError> {
        let bundle = self.bundle(self.config.out(file))?;
        let sel = SelectionResult::read_from(&bundle, stage).map_err(|e| self.fail(e))?;
        Ok((bundle, sel))
    }

    fn write_bundle(&mut self, file: &str, bundle: &TensorBundle) -> Result<(), RunError> {
        let path = self.config.out(file);
        bundle.save(&path).map_err(|e| self.fail(e))?;
        self.outputs.push(path);
        Ok(())
    }

    fn write_json(&mut self, file: &str, value: &impl Serialize) -> Result<(), RunError> {
        let path = self.config.out(file);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| self.fail(e))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| self.fail(e))?;
        self.outputs.push(path);
        Ok(())
    }

    fn write_manifest(&mut self, manifest: &DatasetManifest) -> Result<(), RunError> {
        let path = self.config.out(MANIFEST_FILE);
        manifest.save(&path).map_err(|e| self.fail(e))?;
        self.outputs.push(path);
        Ok(())
    }

    fn finish(self, started: Instant) -> Result<(), RunError> {
        let fail = |e: std::io::Error| RunError::from_error(self.name, e.into());
        let run_dir = self.config.out("run");
        std::fs::create_dir_all(&run_dir).map_err(fail)?;
        let mut record = RunManifest {
            stage: self.name.as_str(),
            config_hash: self.config.hash(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        for (paths, map) in [(&self.inputs, &mut record.inputs), (&self.outputs, &mut record.outputs)] {
            for p in paths {
                let shown = p.strip_prefix(&self.config.out_dir).unwrap_or(p);
                map.insert(shown.display().to_string(), digest(p).map_err(fail)?);
            }
        }
        let text = serde_json::to_string_pretty(&record).expect("run manifest serializes") + "\n";
        std::fs::write(run_dir.join(format!("{}.run.json", self.name.as_str())), text).map_err(fail)?;
        let timings =
            serde_json::json!({ "stage": self.name.as_str(), "elapsed_ms": started.elapsed().as_secs_f64() * 1e3 });
        std::fs::write(run_dir.join(format!("{}.timings.json", self.name.as_str())), timings.to_string() + "\n")
            .map_err(fail)?;
        Ok(())
    }
}

/// Runs one stage (or the full chain for [`StageName::Pipeline`]).
pub fn run_stage(stage: StageName, config: &PipelineConfig) -> Result<(), RunError> {
    let config = config.effective();
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| RunError::from_error(stage, e.into()))?;
    match stage {
        StageName::Pipeline => run_pipeline(&config),
        single => {
            let started = Instant::now();
            let mut run = StageRun::new(single, &config);
            match single {
                StageName::Synth => synth(&mut run)?,
                StageName::Zeroshot => zeroshot(&mut run)?,
                StageName::Mvc => mvc(&mut run)?,
                StageName::Pfc => pfc(&mut run)?,
                StageName::Hcs => hcs(&mut run)?,
                StageName::Wsi => wsi(&mut run)?,
                StageName::Eval => eval(&mut run)?,
                StageName::Pipeline => unreachable!(),
            }
            run.finish(started)
        }
    }
}

/// Patch datasets run zeroshot, mvc, pfc, hcs and eval. Slide datasets run
/// zeroshot, wsi and eval, since the slide stage does its own selection and training.
fn run_pipeline(config: &PipelineConfig) -> Result<(), RunError> {
    let manifest_path = config.manifest_path();
    if !manifest_path.is_file() {
        return Err(RunError::missing(StageName::Pipeline, &manifest_path));
    }
    let manifest = DatasetManifest::load(&manifest_path).map_err(|e| RunError::from_error(StageName::Pipeline, e))?;
    let stages: &[StageName] = if manifest.slide_of.is_some() {
        &[StageName::Zeroshot, StageName::Wsi, StageName::Eval]
    } else {
        &[StageName::Zeroshot, StageName::Mvc, StageName::Pfc, StageName::Hcs, StageName::Eval]
    };
    for &stage in stages {
        run_stage(stage, config)?;
    }
    Ok(())
}

/// Patch-level stages have no open-set rejection, so they work over every prompted class.
fn patch_classes(manifest: &DatasetManifest) -> usize {
    manifest.num_classes() + manifest.num_open_set()
}

fn synth(run: &mut StageRun) -> Result<(), RunError> {
    let spec = &run.config.synth;
    let ds = synth_generate(spec).map_err(|e| run.fail(e))?;
    run.write_bundle(FEATURES_FILE, &ds.features_bundle())?;
    run.write_bundle(CLASS_EMBEDDINGS_FILE, &ds.class_embeddings_bundle())?;
    run.write_bundle(MULTIVIEW_FILE, &ds.multiview_bundle(spec.views))?;
    run.write_bundle(GROUND_TRUTH_FILE, &ds.ground_truth_bundle())?;
    run.write_manifest(&ds.manifest)
}

fn zeroshot(run: &mut StageRun) -> Result<(), RunError> {
    let manifest = run.manifest()?;
    let features = run.features(&manifest)?;
    let bundle = run.bundle(run.config.class_embeddings_path())?;
    let (shape, data) = bundle.f32_entry("class_embeddings", 2).map_err(|e| run.fail(e))?;
    let expected = manifest.num_classes() + manifest.num_open_set();
    if shape[0] != expected {
        return Err(run.fail(Error::DimensionMismatch { expected, found: shape[0] }));
    }
    let vectors = Matrix::from_vec(shape[0], shape[1], data.to_vec()).map_err(|e| run.fail(e))?;
    let classes =
        ClassEmbeddings::new(vectors, run.config.tau as f32, run.config.temperature_mode).map_err(|e| run.fail(e))?;
    let mut members = vec![zero_shot_probs(&features, &classes).map_err(|e| run.fail(e))?];
    for path in run.config.ensemble.clone() {
        let extra = run.bundle(path)?;
        let (shape, data) = extra.f32_entry("probs", 2).map_err(|e| run.fail(e))?;
        members.push(Matrix::from_vec(shape[0], shape[1], data.to_vec()).map_err(|e| run.fail(e))?);
    }
    let probs = ensemble_probs(&members).map_err(|e| run.fail(e))?;
    let (n, c) = probs.shape();
    let labels = probs.iter_rows().map(|r| scalar::argmax(r).unwrap_or(0) as u32).collect();
    let out = TensorBundle::new().with(Tensor::f32("probs", &[n, c], probs.into_vec())).with(Tensor::u32(
        "pseudo_labels",
        &[n],
        labels,
    ));
    run.write_bundle(ZEROSHOT_FILE, &out)
}

fn mvc(run: &mut StageRun) -> Result<(), RunError> {
    let manifest = run.manifest()?;
    let multiview = run.multiview(&manifest)?;
    let scores = mvc_scores(&multiview, &manifest.sample_ids).map_err(|e| run.fail(e))?;
    let selection = select_consensus(&scores, &run.config.selection()).map_err(|e| run.fail(e))?;
    let mut out = TensorBundle::new();
    selection.write_into(&mut out);
    out.push(Tensor::f32("entropy", &[scores.len()], scores.entropy.clone()));
    out.push(Tensor::u32("vote_labels", &[scores.len()], scores.pseudo_label.iter().map(|&l| l as u32).collect()));
    run.write_bundle(MVC_FILE, &out)
}

fn pfc(run: &mut StageRun) -> Result<(), RunError> {
    let manifest = run.manifest()?;
    let features = run.features(&manifest)?;
    let stage = if run.config.cmvc { SelectionStage::Cmvc } else { SelectionStage::Mvc };
    let (_, prompt) = run.selection(MVC_FILE, stage)?;
    let out = run_pfc(&features, &prompt, patch_classes(&manifest), &run.config.kmeans, run.config.seed)
        .map_err(|e| run.fail(e))?;
    let mut bundle = TensorBundle::new();
    out.selection.write_into(&mut bundle);
    let k = out.clusters.num_clusters();
    let cluster_of: Vec<u32> = out.clusters.cluster_of.iter().map(|&c| c as u32).collect();
    bundle.push(Tensor::u32("cluster_of", &[cluster_of.len()], cluster_of));
    bundle.push(Tensor::u32(
        "cluster_rows",
        &[prompt.len()],
        prompt.selected_indices().iter().map(|&i| i as u32).collect(),
    ));
    bundle.push(Tensor::u32("mapping_perm", &[k], out.mapping.perm.iter().map(|&p| p as u32).collect()));
    bundle.push(Tensor::f32("centroids", &[k, features.dim()], out.clusters.centroids.as_slice().to_vec()));
    run.write_bundle(PFC_FILE, &bundle)
}

fn hcs(run: &mut StageRun) -> Result<(), RunError> {
    let manifest = run.manifest()?;
    let features = run.features(&manifest)?;
    let (_, split) = run.selection(PFC_FILE, SelectionStage::Pfc)?;
    let report = train_hcs(&features, &split, patch_classes(&manifest), &run.config.hcs).map_err(|e| run.fail(e))?;
    run.write_bundle(PROBES_FILE, &report.probes.to_bundle())?;
    run.write_json(TRAIN_REPORT_FILE, &report.to_json())
}

#[derive(Serialize)]
struct SlideEntry {
    slide_id: String,
    label: Option<usize>,
    emptied: bool,
}

fn wsi(run: &mut StageRun) -> Result<(), RunError> {
    let manifest = run.manifest()?;
    if manifest.slide_of.is_none() {
        return Err(RunError::config("wsi stage needs slide_of in the manifest"));
    }
    let features = run.features(&manifest)?;
    let multiview = run.multiview(&manifest)?;
    let config = SlideConfig { selection: run.config.selection(), hcs: run.config.hcs.clone() };
    let result = slide_pipeline(&manifest, &multiview, &features, &config).map_err(|e| run.fail(e))?;

    for (file, sel) in
        [("wsi_osp.cplt", &result.osp), ("wsi_mvc.cplt", &result.subset.mvc), ("wsi_pfc.cplt", result.subset.clean())]
    {
        let mut b = TensorBundle::new();
        sel.write_into(&mut b);
        run.write_bundle(file, &b)?;
    }
    run.write_bundle("wsi_probes.cplt", &result.training.probes.to_bundle())?;

    let c = manifest.num_classes();
    let mut slide_probs = Vec::with_capacity(result.slides.len() * c);
    let mut slide_labels = Vec::with_capacity(result.slides.len());
    for (_, pooled) in &result.slides {
        match pooled {
            Some(p) => {
                slide_probs.extend_from_slice(&p.probs);
                slide_labels.push(p.label as u32);
            }
            None => {
                slide_probs.extend(std::iter::repeat_n(f32::NAN, c));
                slide_labels.push(u32::MAX);
            }
        }
    }
    let n = result.slides.len();
    run.write_bundle(
        WSI_FILE,
        &TensorBundle::new().with(Tensor::f32("slide_probs", &[n, c], slide_probs)).with(Tensor::u32(
            "slide_labels",
            &[n],
            slide_labels,
        )),
    )?;
    let slides: Vec<SlideEntry> = result
        .slides
        .iter()
        .map(|(id, p)| SlideEntry { slide_id: id.clone(), label: p.as_ref().map(|p| p.label), emptied: p.is_none() })
        .collect();
    let report = serde_json::json!({
        "slides": slides,
        "emptied": result.emptied(),
        "clean_patches": result.subset.clean().len(),
        "training": result.training.to_json(),
    });
    run.write_json(WSI_REPORT_FILE, &report)
}

#[derive(Serialize, Default)]
struct EvalReport {
    convention: &'static str,
    zero_shot: Option<MetricReport>,
    mvc: Option<MetricReport>,
    pfc: Option<MetricReport>,
    probes: Option<MetricReport>,
    slides: Option<MetricReport>,
}

fn eval(run: &mut StageRun) -> Result<(), RunError> {
    let manifest = run.manifest()?;
    let truth_bundle = run.bundle(run.config.ground_truth_path())?;
    let (_, truth) = truth_bundle.u32_entry("labels", 1).map_err(|e| run.fail(e))?;
    let truth: Vec<usize> = truth.iter().map(|&t| t as usize).collect();
    if truth.len() != manifest.sample_ids.len() {
        return Err(run.fail(Error::DimensionMismatch { expected: manifest.sample_ids.len(), found: truth.len() }));
    }
    let c = manifest.num_classes();
    let all = c + manifest.num_open_set();
    let known: Vec<Option<usize>> = truth.iter().map(|&t| Some(t)).collect();
    let mut report = EvalReport {
        convention: "macro means divide by the class count; zero-denominator classes score 0",
        ..Default::default()
    };

    let zs = run.config.out(ZEROSHOT_FILE);
    if zs.is_file() {
        let b = run.bundle(zs)?;
        let (_, labels) = b.u32_entry("pseudo_labels", 1).map_err(|e| run.fail(e))?;
        let pred: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        report.zero_shot = Some(evaluate(&truth, &pred, all).map_err(|e| run.fail(e))?);
    }
    for (file, stage, slot) in
        [(MVC_FILE, SelectionStage::Mvc, &mut report.mvc), (PFC_FILE, SelectionStage::Pfc, &mut report.pfc)]
    {
        if run.config.out(file).is_file() {
            let (_, sel) = run.selection(file, stage)?;
            if !sel.is_empty() {
                *slot = Some(pseudo_label_report(&sel, &known, all).map_err(|e| run.fail(e))?);
            }
        }
    }
    let probes = run.config.out(PROBES_FILE);
    if probes.is_file() {
        let b = run.bundle(probes)?;
        let pair = ProbePair::<f32>::from_bundle(&b).map_err(|e| run.fail(e))?;
        let features = run.features(&manifest)?;
        let probs = predict_pair(&pair.a, &pair.b, &features.vectors).map_err(|e| run.fail(e))?;
        let pred: Vec<usize> = probs.iter_rows().map(|r| scalar::argmax(r).unwrap_or(0)).collect();
        report.probes = Some(evaluate(&truth, &pred, all).map_err(|e| run.fail(e))?);
    }
    let wsi = run.config.out(WSI_FILE);
    if wsi.is_file() {
        if let Ok((_, slide_truth)) = truth_bundle.u32_entry("slide_labels", 1) {
            let slide_truth = slide_truth.to_vec();
            let b = run.bundle(wsi)?;
            let (_, labels) = b.u32_entry("slide_labels", 1).map_err(|e| run.fail(e))?;
            if labels.len() != slide_truth.len() {
                return Err(run.fail(Error::DimensionMismatch { expected: slide_truth.len(), found: labels.len() }));
            }
            // an emptied slide has no prediction and counts as wrong
            let pred: Vec<usize> = labels
                .iter()
                .zip(&slide_truth)
                .map(|(&l, &t)| if l == u32::MAX { (t as usize + 1) % c } else { l as usize })
                .collect();
            let t: Vec<usize> = slide_truth.iter().map(|&t| t as usize).collect();
            report.slides = Some(evaluate(&t, &pred, c).map_err(|e| run.fail(e))?);
        }
    }
    run.write_json(EVAL_FILE, &report)
}
