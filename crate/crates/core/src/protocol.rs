//! Continual training loop and scenario orchestration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::datagen::{generate_dataset, sample_seed, split_incremental, Dataset, SceneSpec, ScenarioSpec};
use crate::domain::{argmax_over, ClassId, ImageSample, SegmentLabel};
use crate::error::{LabError, Result};
use crate::importance::{accumulate_buffer, finalize_importance, CostBuffer, ImportanceVector};
use crate::losses::{objective, IkdInputs, LossParts, LossWeights, ObjectiveInputs};
use crate::matching::{cost_matrix, hungarian, MatchResult};
use crate::metrics::{
    evaluate_maps, panoptic_inference, ClassSubsets, GroupMetrics, MetricReport, PanopticMap,
};
use crate::model::{ModelConfig, ModelState};
use crate::optim::{AdamW, OptimizerConfig};
use crate::pseudo::{pseudo_labels, PseudoConfig};
use crate::tensor::Matrix;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// The four method components that can be switched independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodFlags {
    pub hdhl: bool,
    pub ikd: bool,
    pub qcr: bool,
    pub pseudo: bool,
}

impl Default for MethodFlags {
    fn default() -> Self {
        MethodFlags::all()
    }
}

impl MethodFlags {
    pub fn none() -> Self {
        MethodFlags {
            hdhl: false,
            ikd: false,
            qcr: false,
            pseudo: false,
        }
    }

    pub fn all() -> Self {
        MethodFlags {
            hdhl: true,
            ikd: true,
            qcr: true,
            pseudo: true,
        }
    }

    /// Parses a comma-separated list such as `hdhl,ikd`; empty or `none` means all off.
    pub fn parse(list: &str) -> Result<Self> {
        let mut f = MethodFlags::none();
        for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part {
                "hdhl" => f.hdhl = true,
                "ikd" => f.ikd = true,
                "qcr" => f.qcr = true,
                "pseudo" => f.pseudo = true,
                "none" => {}
                "all" => f = MethodFlags::all(),
                other => {
                    return Err(LabError::InvalidArgument(format!(
                        "unknown method flag `{other}` (valid: hdhl, ikd, qcr, pseudo, all, none)"
                    )))
                }
            }
        }
        Ok(f)
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.pseudo, "pseudo"),
            (self.hdhl, "hdhl"),
            (self.ikd, "ikd"),
            (self.qcr, "qcr"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            "ft".into()
        } else {
            names.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Batches per class introduced in a step (reference scale: 1000).
    pub iterations_per_class: usize,
    /// Step-1 learning rate.
    pub learning_rate: f64,
    /// Learning rate for steps t >= 2.
    pub incremental_learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub flags: MethodFlags,
    pub weights: LossWeights,
    pub pseudo: PseudoConfig,
    pub optimizer: OptimizerConfig,
    /// Pseudo targets also supervise masks (otherwise matching and classification only).
    pub mask_on_pseudo: bool,
    /// Fully serial execution.
    pub strict_deterministic: bool,
    pub loss_curve_points: usize,
    pub score_threshold: f64,
    pub overlap_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations_per_class: 200,
            learning_rate: 1e-3,
            incremental_learning_rate: 5e-4,
            batch_size: 4,
            seed: 0,
            flags: MethodFlags::all(),
            weights: LossWeights::default(),
            pseudo: PseudoConfig {
                confidence_threshold: 0.5,
                mask_threshold: 0.5,
                ..PseudoConfig::default()
            },
            optimizer: OptimizerConfig::default(),
            mask_on_pseudo: true,
            strict_deterministic: false,
            loss_curve_points: 50,
            score_threshold: crate::metrics::DEFAULT_SCORE_THRESHOLD,
            overlap_threshold: crate::metrics::DEFAULT_OVERLAP_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_per_class == 0 || self.batch_size == 0 {
            return Err(LabError::InvalidArgument(
                "iterations_per_class and batch_size must be positive".into(),
            ));
        }
        self.weights.validate()?;
        self.pseudo.validate()?;
        self.optimizer.validate()?;
        for lr in [self.learning_rate, self.incremental_learning_rate] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(LabError::InvalidArgument(format!("learning rate {lr}")));
            }
        }
        Ok(())
    }
}

/// Stream seed for a named purpose at step `t`.
pub fn derive_seed(seed: u64, purpose: u64, t: usize) -> u64 {
    sample_seed(sample_seed(seed, purpose), t as u64)
}

const SEED_INIT: u64 = 1;
const SEED_ADAPTER: u64 = 2;
const SEED_BATCH: u64 = 3;

fn ordered_map<T, R, F>(items: &[T], serial: bool, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if serial {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

/// Everything the frozen previous model contributes for one training image.
#[derive(Clone, Debug)]
struct OldOutputs {
    pseudo: Vec<SegmentLabel>,
    teacher_logits: Matrix,
    final_queries: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub total: f64,
    pub dl: f64,
    pub ikd: f64,
    pub mask: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub classes: Vec<ClassId>,
    pub images: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Downsampled batch-mean losses.
    pub loss_curve: Vec<LossPoint>,
    pub first_window_loss: f64,
    pub last_window_loss: f64,
    pub pseudo_segments: usize,
    pub kl_clamped: usize,
    pub importance: Vec<f64>,
    pub old_model_used: bool,
    pub wall_clock_secs: f64,
}

pub struct ScenarioState {
    pub model: ModelState,
    pub old_model: Option<ModelState>,
    pub importance: ImportanceVector,
    pub history: Vec<StepReport>,
}

impl ScenarioState {
    pub fn new(model_cfg: ModelConfig, seed: u64) -> Result<Self> {
        let model = ModelState::new(model_cfg, derive_seed(seed, SEED_INIT, 0))?;
        let n = model.config.n_queries;
        Ok(ScenarioState {
            model,
            old_model: None,
            importance: ImportanceVector::initial(n),
            history: Vec::new(),
        })
    }

    /// Opens step `t` with its classes: the current model becomes the frozen old model.
    pub fn begin_step(&mut self, t: usize, classes: &[ClassId], seed: u64) -> Result<()> {
        let set: BTreeSet<ClassId> = classes.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_ADAPTER, t));
        let (next, old) = self.model.begin_step(t, &set, &mut rng)?;
        self.model = next;
        self.old_model = old;
        Ok(())
    }
}

fn old_outputs(
    old: &ModelState,
    sample: &ImageSample,
    cfg: &TrainConfig,
) -> Result<OldOutputs> {
    let out = old.forward(sample, cfg.flags.qcr)?;
    let pseudo = if cfg.flags.pseudo {
        pseudo_labels(&out, &sample.labels, &cfg.pseudo)?
    } else {
        Vec::new()
    };
    Ok(OldOutputs {
        pseudo,
        final_queries: out.final_queries().clone(),
        teacher_logits: out.class_logits,
    })
}

/// Bipartite matching of `targets` against the model's outputs (empty when no targets).
pub fn match_targets(
    class_logits: &Matrix,
    mask_logits: &Matrix,
    targets: &[SegmentLabel],
    w: &LossWeights,
) -> Result<MatchResult> {
    if targets.is_empty() {
        return Ok(MatchResult::from_pairs(Vec::new(), class_logits.rows));
    }
    let probs = crate::domain::softmax_rows(class_logits)?;
    let cost = cost_matrix(&probs, mask_logits, targets, w.lambda_cls, w.lambda_mask)?;
    hungarian(&cost)
}

fn image_gradients(
    model: &ModelState,
    sample: &ImageSample,
    old: Option<&OldOutputs>,
    importance: &[f64],
    cfg: &TrainConfig,
) -> Result<(Vec<Option<Matrix>>, LossParts, f64)> {
    let taped = model.forward_for_training(sample, cfg.flags.qcr)?;
    let out = &taped.output;
    let mut targets = sample.labels.clone();
    if let Some(o) = old {
        targets.extend(o.pseudo.iter().cloned());
    }
    let matching = match_targets(&out.class_logits, &out.mask_logits, &targets, &cfg.weights)?;
    let teacher = old.filter(|_| cfg.flags.hdhl).map(|o| &o.teacher_logits);
    let ikd = old.filter(|_| cfg.flags.ikd).map(|o| IkdInputs {
        current: out.final_queries(),
        old: &o.final_queries,
        importance,
    });
    let obj = objective(
        &ObjectiveInputs {
            class_logits: &out.class_logits,
            mask_logits: &out.mask_logits,
            targets: &targets,
            matching: &matching,
            teacher_logits: teacher,
            hdhl: cfg.flags.hdhl && teacher.is_some(),
            ikd,
            mask_on_pseudo: cfg.mask_on_pseudo,
        },
        &cfg.weights,
    )?;
    let grads = taped.backward(&obj.d_class_logits, &obj.d_mask_logits, obj.d_queries.as_ref());
    Ok((grads, obj.parts, obj.total))
}

fn window_mean(values: &[f64], from_end: bool, width: usize) -> f64 {
    let k = width.min(values.len()).max(1);
    let slice = if values.is_empty() {
        &[][..]
    } else if from_end {
        &values[values.len() - k.min(values.len())..]
    } else {
        &values[..k.min(values.len())]
    };
    if slice.is_empty() {
        0.0
    } else {
        slice.iter().sum::<f64>() / slice.len() as f64
    }
}

fn downsample(points: &[LossPoint], target: usize) -> Vec<LossPoint> {
    if target == 0 || points.len() <= target {
        return points.to_vec();
    }
    let chunk = points.len().div_ceil(target);
    points
        .chunks(chunk)
        .map(|c| {
            let n = c.len() as f64;
            LossPoint {
                iteration: c.last().expect("non-empty chunk").iteration,
                total: c.iter().map(|p| p.total).sum::<f64>() / n,
                dl: c.iter().map(|p| p.dl).sum::<f64>() / n,
                ikd: c.iter().map(|p| p.ikd).sum::<f64>() / n,
                mask: c.iter().map(|p| p.mask).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Trains the already-opened step on `step_data` (labels restricted to the
/// step's classes), then runs the importance pass.
pub fn train_step(
    state: &mut ScenarioState,
    step_data: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<StepLog> {
    cfg.validate()?;
    let started = Instant::now();
    let t = state.model.step;
    if step_data.is_empty() {
        return Err(LabError::EmptyStepDataset(t));
    }
    let classes = state
        .model
        .step_classes
        .last()
        .cloned()
        .ok_or_else(|| LabError::InvalidArgument("train_step before begin_step".into()))?;
    let serial = cfg.strict_deterministic;

    let needs_old = t >= 2 && (cfg.flags.pseudo || cfg.flags.hdhl || cfg.flags.ikd);
    let old_cache: Option<Vec<OldOutputs>> = match (&state.old_model, needs_old) {
        (Some(old), true) => Some(ordered_map(step_data, serial, |s| old_outputs(old, s, cfg))?),
        _ => None,
    };
    let pseudo_segments = old_cache
        .as_ref()
        .map(|c| c.iter().map(|o| o.pseudo.len()).sum())
        .unwrap_or(0);

    let lr = if t == 1 {
        cfg.learning_rate
    } else {
        cfg.incremental_learning_rate
    };
    let mut opt = AdamW::new(cfg.optimizer.clone(), lr, &state.model.all_params_mut())?;
    let iterations = cfg.iterations_per_class * classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_BATCH, t));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut points = Vec::with_capacity(iterations);
    let mut totals = Vec::with_capacity(iterations);
    let mut kl_clamped = 0;
    let importance = state.importance.values.clone();
    for it in 0..iterations {
        if cursor >= order.len() {
            order = (0..step_data.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<usize> = order[cursor..end].to_vec();
        cursor = end;

        let model = &state.model;
        let results = ordered_map(&batch, serial, |&i| {
            let old = old_cache.as_ref().map(|c| &c[i]);
            image_gradients(model, &step_data[i], old, &importance, cfg)
        })?;
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        let mut point = LossPoint {
            iteration: it + 1,
            total: 0.0,
            dl: 0.0,
            ikd: 0.0,
            mask: 0.0,
        };
        for (g, parts, total) in results {
            if grads.is_empty() {
                grads = g;
            } else {
                for (acc, gi) in grads.iter_mut().zip(g) {
                    match (acc.as_mut(), gi) {
                        (Some(a), Some(b)) => a.add_assign(&b),
                        (None, Some(b)) => *acc = Some(b),
                        _ => {}
                    }
                }
            }
            point.total += total * scale;
            point.dl += parts.dl * scale;
            point.ikd += parts.ikd * scale;
            point.mask += parts.mask * scale;
            kl_clamped += parts.kl_clamped;
        }
        for g in grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v *= scale);
        }
        opt.step(&mut state.model.all_params_mut(), &grads)?;
        totals.push(point.total);
        points.push(point);
    }

    // importance: accumulated minimum matching costs of the trained model
    let model = &state.model;
    let per_image = ordered_map(step_data, serial, |s| {
        if s.labels.is_empty() {
            return Ok(None);
        }
        let out = model.forward(s, cfg.flags.qcr)?;
        let probs = out.class_probs()?;
        let cost = cost_matrix(
            &probs,
            &out.mask_logits,
            &s.labels,
            cfg.weights.lambda_cls,
            cfg.weights.lambda_mask,
        )?;
        Ok(Some(cost))
    })?;
    let mut buffer = CostBuffer::new(model.config.n_queries);
    for cost in per_image.into_iter().flatten() {
        buffer = accumulate_buffer(buffer, &cost)?;
    }
    let n_old: usize = model.step_classes[..t - 1].iter().map(Vec::len).sum();
    if buffer.images_seen > 0 {
        state.importance = finalize_importance(&buffer, &state.importance, n_old, classes.len())?;
    }

    let window = 50.min(totals.len());
    Ok(StepLog {
        step: t,
        classes,
        images: step_data.len(),
        iterations,
        learning_rate: lr,
        loss_curve: downsample(&points, cfg.loss_curve_points),
        first_window_loss: window_mean(&totals, false, window),
        last_window_loss: window_mean(&totals, true, window),
        pseudo_segments,
        kl_clamped,
        importance: state.importance.values.clone(),
        old_model_used: old_cache.is_some(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Fraction of queries whose argmax class (active channels, no-obj included)
/// agrees between the penultimate and last decoder layer, QCR disabled.
pub fn selection_consistency(model: &ModelState, samples: &[ImageSample], serial: bool) -> Result<Option<f64>> {
    if model.step == 0 || samples.is_empty() {
        return Ok(None);
    }
    let active = model.layout_channels().active_channels();
    let per = ordered_map(samples, serial, |s| {
        let out = model.forward(s, false)?;
        let layers = out.queries_per_layer.len();
        let prev = model.class_logits_for(&out.queries_per_layer[layers - 2])?;
        let same = (0..out.n_queries())
            .filter(|&n| {
                argmax_over(prev.row(n), &active) == argmax_over(out.class_logits.row(n), &active)
            })
            .count();
        Ok((same, out.n_queries()))
    })?;
    let (same, total) = per.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(Some(same as f64 / total as f64))
}

/// Panoptic inference on `samples` scored against their labels restricted to
/// the classes seen so far.
pub fn evaluate(model: &ModelState, samples: &[ImageSample], cfg: &TrainConfig) -> Result<MetricReport> {
    let seen = model.seen_classes();
    let pairs = ordered_map(samples, cfg.strict_deterministic, |s| {
        let out = model.forward(s, cfg.flags.qcr)?;
        let pred = panoptic_inference(&out, cfg.score_threshold, cfg.overlap_threshold)?;
        let labels: Vec<SegmentLabel> = s
            .labels
            .iter()
            .filter(|l| seen.contains(&l.class_id))
            .cloned()
            .collect();
        let gt = PanopticMap::from_labels(s.height, s.width, &labels)?;
        Ok((pred, gt))
    })?;
    let (preds, gts): (Vec<PanopticMap>, Vec<PanopticMap>) = pairs.into_iter().unzip();
    evaluate_maps(&preds, &gts, &ClassSubsets::from_steps(&model.step_classes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub base: GroupMetrics,
    pub incremental: GroupMetrics,
    pub all: GroupMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub classes: Vec<ClassId>,
    pub summary: StepSummary,
    pub metrics: MetricReport,
    pub selection_consistency: Option<f64>,
    pub log: StepLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub schema_version: u32,
    pub label: String,
    pub seed: u64,
    pub scenario: ScenarioSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapter_parameters_per_class: usize,
    pub total_parameters: usize,
    pub steps: Vec<StepReport>,
    pub wall_clock_secs: f64,
}

impl ScenarioReport {
    pub fn final_step(&self) -> Option<&StepReport> {
        self.steps.last()
    }

    /// JSON with every `wall_clock_secs` field removed, for reproducibility checks.
    pub fn without_timing(&self) -> Result<serde_json::Value> {
        fn strip(v: &mut serde_json::Value) {
            match v {
                serde_json::Value::Object(map) => {
                    map.remove("wall_clock_secs");
                    map.values_mut().for_each(strip);
                }
                serde_json::Value::Array(items) => items.iter_mut().for_each(strip),
                _ => {}
            }
        }
        let mut v = serde_json::to_value(self)?;
        strip(&mut v);
        Ok(v)
    }

    /// Structural checks on a parsed report.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(LabError::malformed(
                "report",
                format!("schema_version {} (expected {REPORT_SCHEMA_VERSION})", self.schema_version),
            ));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.step != i + 1 || s.log.step != s.step {
                return Err(LabError::malformed("report", format!("step {} out of order", s.step)));
            }
            if s.log.importance.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(LabError::malformed("report", "importance outside [0, 1]"));
            }
            for m in s.metrics.per_class.values() {
                if let (Some(pq), Some(sq), Some(rq)) = (m.pq, m.sq, m.rq) {
                    if (pq - sq * rq).abs() > 1e-9 {
                        return Err(LabError::malformed("report", "PQ differs from SQ * RQ"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Data and knobs for one scenario run.
pub struct ScenarioRun<'a> {
    pub scenario: &'a ScenarioSpec,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub train_data: &'a [ImageSample],
    pub val_data: &'a [ImageSample],
    /// Where per-step checkpoints go (`step_{t}.ckpt`).
    pub checkpoint_dir: Option<&'a Path>,
    /// Continue from the latest checkpoint in `checkpoint_dir`.
    pub resume: bool,
    /// Stop after this many steps (for interrupted-run tests).
    pub stop_after: Option<usize>,
}

pub fn checkpoint_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("step_{t}.ckpt"))
}

fn latest_checkpoint(dir: &Path, steps: usize) -> Option<(usize, PathBuf)> {
    (1..=steps)
        .rev()
        .map(|t| (t, checkpoint_path(dir, t)))
        .find(|(_, p)| p.exists())
}

pub fn run_scenario(run: &ScenarioRun<'_>) -> Result<ScenarioReport> {
    let started = Instant::now();
    let cfg = run.train;
    cfg.validate()?;
    run.model.validate()?;
    let steps = split_incremental(run.train_data, run.scenario)?;
    let step_classes = run.scenario.step_classes();
    if step_classes.iter().flatten().any(|c| c.0 as usize > run.model.max_classes) {
        return Err(LabError::InvalidArgument(format!(
            "scenario needs {} classes, model supports {}",
            run.scenario.total_classes(),
            run.model.max_classes
        )));
    }

    let mut state = ScenarioState::new(run.model.clone(), cfg.seed)?;
    let mut first = 1;
    if let (true, Some(dir)) = (run.resume, run.checkpoint_dir) {
        if let Some((t, path)) = latest_checkpoint(dir, run.scenario.steps) {
            let ck = load_checkpoint(&path)?;
            if ck.model.config != *run.model {
                return Err(LabError::malformed("checkpoint", "model config differs from run config"));
            }
            state.history = serde_json::from_value(ck.meta)?;
            state.model = ck.model;
            state.importance = ck.importance;
            first = t + 1;
        }
    }

    let last = run.stop_after.unwrap_or(run.scenario.steps).min(run.scenario.steps);
    for t in first..=last {
        state.begin_step(t, &step_classes[t - 1], cfg.seed)?;
        let log = train_step(&mut state, &steps[t - 1], cfg)?;
        let metrics = evaluate(&state.model, run.val_data, cfg)?;
        let summary = StepSummary {
            base: metrics.group("base"),
            incremental: metrics.group("incremental"),
            all: metrics.group("all"),
        };
        let consistency = selection_consistency(&state.model, run.val_data, cfg.strict_deterministic)?;
        state.history.push(StepReport {
            step: t,
            classes: step_classes[t - 1].clone(),
            summary,
            metrics,
            selection_consistency: consistency,
            log,
        });
        if let Some(dir) = run.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
            save_checkpoint(
                &checkpoint_path(dir, t),
                &Checkpoint {
                    model: state.model.clone(),
                    importance: state.importance.clone(),
                    meta: serde_json::to_value(&state.history)?,
                },
            )?;
        }
    }

    Ok(ScenarioReport {
        schema_version: REPORT_SCHEMA_VERSION,
        label: cfg.flags.label(),
        seed: cfg.seed,
        scenario: run.scenario.clone(),
        model: run.model.clone(),
        train: cfg.clone(),
        adapter_parameters_per_class: crate::model::adapter_parameter_count(
            run.model.query_dim,
            run.model.adapter_rank,
        ),
        total_parameters: state.model.parameter_count(),
        steps: state.history,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Training and validation sets for a scenario: `images_per_step * steps`
/// training images and `val_images` validation images over all scenario classes.
pub fn scenario_datasets(
    scene: &SceneSpec,
    scenario: &ScenarioSpec,
    val_images: usize,
) -> Result<(Dataset, Dataset)> {
    scenario.validate(scene)?;
    let classes: BTreeSet<ClassId> = scenario.all_classes().into_iter().collect();
    let train = generate_dataset(
        scene,
        &classes,
        scenario.images_per_step * scenario.steps,
        sample_seed(scenario.seed, 0x7261_696e),
        "train",
    )?;
    let val = generate_dataset(scene, &classes, val_images, sample_seed(scenario.seed, 0x0076_616c), "val")?;
    Ok((train, val))
}

#[cfg(test)]
mod tests;
