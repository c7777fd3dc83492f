//! The audit grid: every (probe, plan, seed, fold) job, trained and scored
//! on patient-level folds, plus the shortcut partition, the MI table and the
//! hidden-distance leakage guard.

mod config;
mod report;

pub use config::{config_hash, PlanEntry, RunConfig};
pub use report::{
    folds_csv, merge_reports, read_report, render_groups, render_table, summary_csv, write_outputs,
    AuditReport, DatasetSummary, FoldRow, GuardReport, MiRow, PartitionRow, SeedRow, SummaryRow,
    CONFIG_FILE, FOLDS_FILE, REPORT_FILE, REPORT_SCHEMA_VERSION, SUMMARY_FILE,
};

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::evaluation::{
    confusion, macro_f1, mutual_information, partition_macro_f1, recall_large, shortcut_partition,
    stratified_folds, EvalError, FoldSplit, PartitionGroup, PartitionReport,
};
use crate::grid::Grid;
use crate::interventions::{
    ablate_group, normalize_per_frame, regime_factors, scaled_depth, substitute_mask,
    with_corrected_size, InterventionError, InterventionPlan, ScaleRegime,
};
use crate::probes::features::{depth_anchor, extract_features, masked_map_input, FrameView};
use crate::probes::{
    train_probe, InputSchema, MapChannel, ProbeError, ProbeInput, ProbeKind, Provenance, TrainSet,
    TrainedProbe,
};
use crate::stats::lower_median;
use crate::synthgen::{
    generate_dataset, Dataset, FrameId, FrameSample, MaskSource, SizeClass, SynthError,
};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("leakage guard failed: {0}")]
    Leak(String),
}

impl AuditError {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            AuditError::Config(_) => 2,
            AuditError::Data(_) => 3,
            AuditError::Numeric(_) => 4,
            AuditError::Io(_) | AuditError::Leak(_) => 1,
        }
    }
}

impl From<SynthError> for AuditError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(m) => AuditError::Config(format!("dataset: {m}")),
            SynthError::Io { .. } => AuditError::Io(e.to_string()),
            other => AuditError::Data(other.to_string()),
        }
    }
}

impl From<InterventionError> for AuditError {
    fn from(e: InterventionError) -> Self {
        match e {
            InterventionError::Config(m) => AuditError::Config(m),
            InterventionError::Synth(s) => s.into(),
            other => AuditError::Data(other.to_string()),
        }
    }
}

impl From<ProbeError> for AuditError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::NonFinite { .. } | ProbeError::GradCheck(_) => {
                AuditError::Numeric(e.to_string())
            }
            ProbeError::Config(_) | ProbeError::SchemaMismatch { .. } => {
                AuditError::Config(e.to_string())
            }
            other => AuditError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for AuditError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(m) => AuditError::Config(m),
            other => AuditError::Data(other.to_string()),
        }
    }
}

/// Probe inputs for every frame of the dataset under one plan.
pub struct PreparedInputs {
    pub schema: InputSchema,
    pub inputs: Vec<ProbeInput>,
}

/// Depth map a probe sees under `regime`: regime None divides relative depth
/// by its own median, every other regime multiplies by the regime factor.
fn depth_view(
    frame: &FrameSample,
    regime: &ScaleRegime,
    factor: f64,
) -> Result<Grid<f32>, InterventionError> {
    if *regime == ScaleRegime::None {
        Ok(normalize_per_frame(&frame.relative_depth))
    } else {
        scaled_depth(&frame.relative_depth, factor)
    }
}

/// Lower median over training frames, used to bring map inputs to unit scale.
fn train_median(values: &[f64], train: &[bool]) -> Result<f64, AuditError> {
    let v: Vec<f64> = values
        .iter()
        .zip(train)
        .filter(|(_, &t)| t)
        .map(|(&x, _)| x)
        .collect();
    match lower_median(&v) {
        Some(m) if m > 0.0 && m.is_finite() => Ok(m),
        _ => Err(AuditError::Data(
            "training maps have no positive median".into(),
        )),
    }
}

/// Builds what `kind` reads for each frame. Everything fitted (the Global
/// factor, map normalizers) comes from the frames marked in `train`.
pub fn prepare_inputs(
    kind: ProbeKind,
    plan: &InterventionPlan,
    dataset: &Dataset,
    train: &[bool],
    seed: u64,
    side: usize,
) -> Result<PreparedInputs, AuditError> {
    let frames = &dataset.frames;
    let factors = regime_factors(frames, train, &plan.scale, seed)?;
    let boxes: Vec<_> = frames
        .iter()
        .map(|f| substitute_mask(f, &plan.mask, seed))
        .collect::<Result<_, _>>()?;

    match kind {
        ProbeKind::FeatureMlp => {
            let mut names = None;
            let mut inputs = Vec::with_capacity(frames.len());
            for ((f, bbox), &a) in frames.iter().zip(&boxes).zip(&factors) {
                let depth = depth_view(f, &plan.scale, a)?;
                let mut fv = extract_features(&FrameView {
                    intrinsics: &f.intrinsics,
                    bbox: *bbox,
                    depth: &depth,
                    appearance: &f.appearance,
                    background_luminance: f.background_luminance,
                })?;
                if let Some(g) = plan.feature_ablation {
                    fv = ablate_group(&fv, g);
                }
                if let Some(q) = plan.photometric_correction {
                    fv = with_corrected_size(&fv, bbox.mean_extent(), f.background_luminance, q)?;
                }
                if names.is_none() {
                    names = Some(fv.names());
                }
                inputs.push(ProbeInput::Features(fv.values()));
            }
            let names = names.ok_or_else(|| AuditError::Data("dataset has no frames".into()))?;
            if names.is_empty() {
                return Err(AuditError::Config(format!(
                    "plan {} leaves no features",
                    plan.scale_label()
                )));
            }
            Ok(PreparedInputs {
                schema: InputSchema::for_kind(kind, &names, side),
                inputs,
            })
        }
        ProbeKind::DepthCnn3 => {
            let views: Vec<Grid<f32>> = frames
                .iter()
                .zip(&factors)
                .map(|(f, &a)| depth_view(f, &plan.scale, a))
                .collect::<Result<_, _>>()?;
            // Per-frame normalized maps are already unit scale.
            let c = if plan.scale == ScaleRegime::None {
                1.0
            } else {
                let anchors: Vec<f64> = views
                    .iter()
                    .zip(frames)
                    .zip(&boxes)
                    .map(|((d, f), b)| depth_anchor(d, &f.intrinsics, b))
                    .collect();
                train_median(&anchors, train)?
            };
            let inputs = views
                .iter()
                .zip(frames)
                .zip(&boxes)
                .map(|((d, f), b)| {
                    let scaled = d.map(|v| (f64::from(v) / c) as f32);
                    ProbeInput::Map(
                        MapChannel::Depth,
                        masked_map_input(&scaled, &f.intrinsics, b, side),
                    )
                })
                .collect();
            Ok(PreparedInputs {
                schema: InputSchema::for_kind(kind, &[], side),
                inputs,
            })
        }
        ProbeKind::AppearanceCnn => {
            let anchors: Vec<f64> = frames
                .iter()
                .zip(&boxes)
                .map(|(f, b)| depth_anchor(&f.appearance, &f.intrinsics, b))
                .collect();
            let c = train_median(&anchors, train)?;
            let inputs = frames
                .iter()
                .zip(&boxes)
                .map(|(f, b)| {
                    let scaled = f.appearance.map(|v| (f64::from(v) / c) as f32);
                    ProbeInput::Map(
                        MapChannel::Appearance,
                        masked_map_input(&scaled, &f.intrinsics, b, side),
                    )
                })
                .collect();
            Ok(PreparedInputs {
                schema: InputSchema::for_kind(kind, &[], side),
                inputs,
            })
        }
        ProbeKind::HeuristicApparent | ProbeKind::HeuristicPhysics => {
            let inputs = frames
                .iter()
                .zip(&boxes)
                .zip(&factors)
                .map(|((f, b), &a)| {
                    let anchor = if kind == ProbeKind::HeuristicPhysics {
                        depth_anchor(&depth_view(f, &plan.scale, a)?, &f.intrinsics, b)
                    } else {
                        0.0
                    };
                    Ok(ProbeInput::Cue {
                        apparent_diameter_px: b.mean_extent(),
                        depth_anchor: anchor,
                        focal_length_px: f.intrinsics.focal_length_px,
                    })
                })
                .collect::<Result<_, InterventionError>>()?;
            Ok(PreparedInputs {
                schema: InputSchema::Cue,
                inputs,
            })
        }
    }
}

/// One trained and scored fold.
#[derive(Debug, Clone)]
pub struct JobResult {
    pub probe: ProbeKind,
    pub plan: usize,
    pub seed: u64,
    pub fold: usize,
    pub macro_f1: f64,
    pub recall_large: f64,
    /// `(frame, truth, prediction)` for every test frame, in frame order.
    pub predictions: Vec<(FrameId, SizeClass, SizeClass)>,
    pub loss_history: Vec<f64>,
}

fn train_mask(dataset: &Dataset, split: &FoldSplit, fold: usize) -> Result<Vec<bool>, AuditError> {
    dataset
        .frames
        .iter()
        .map(|f| {
            split
                .fold_of(f.patient_id)
                .map(|k| k != fold)
                .ok_or_else(|| AuditError::Data(format!("patient {} has no fold", f.patient_id.0)))
        })
        .collect()
}

/// Trains `probe` on every fold but `fold` and scores it on `fold`.
pub fn run_job(
    cfg: &RunConfig,
    dataset: &Dataset,
    split: &FoldSplit,
    probe: ProbeKind,
    plan_index: usize,
    seed: u64,
    fold: usize,
) -> Result<JobResult, AuditError> {
    let plan = &cfg.plans[plan_index].plan;
    let train = train_mask(dataset, split, fold)?;
    let prepared = prepare_inputs(probe, plan, dataset, &train, seed, cfg.train.cnn_side)?;
    let labels = dataset.labels();
    let envs: Vec<u32> = dataset.frames.iter().map(|f| f.center).collect();

    let pick =
        |keep: bool| -> Vec<usize> { (0..train.len()).filter(|&i| train[i] == keep).collect() };
    let (train_idx, test_idx) = (pick(true), pick(false));
    if test_idx.is_empty() {
        return Err(AuditError::Data(format!("fold {fold} has no test frames")));
    }
    let tr_inputs: Vec<ProbeInput> = train_idx
        .iter()
        .map(|&i| prepared.inputs[i].clone())
        .collect();
    let tr_labels: Vec<SizeClass> = train_idx.iter().map(|&i| labels[i]).collect();
    let tr_envs: Vec<u32> = train_idx.iter().map(|&i| envs[i]).collect();

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let probe_model: TrainedProbe = train_probe(
        probe,
        prepared.schema,
        TrainSet {
            inputs: &tr_inputs,
            labels: &tr_labels,
            envs: &tr_envs,
        },
        &train_cfg,
        Provenance {
            fold: Some(fold),
            seed,
        },
    )?;

    let mut predictions = Vec::with_capacity(test_idx.len());
    for &i in &test_idx {
        let (pred, _) = probe_model.predict(&prepared.inputs[i])?;
        predictions.push((dataset.frames[i].frame_id, labels[i], pred));
    }
    let (truth, pred): (Vec<SizeClass>, Vec<SizeClass>) =
        predictions.iter().map(|p| (p.1, p.2)).unzip();
    let c = confusion(&truth, &pred)?;
    Ok(JobResult {
        probe,
        plan: plan_index,
        seed,
        fold,
        macro_f1: macro_f1(&c),
        recall_large: recall_large(&c)?,
        predictions,
        loss_history: probe_model.loss_history,
    })
}

/// Every job of the grid, in a fixed order independent of scheduling.
pub fn run_grid(cfg: &RunConfig, dataset: &Dataset) -> Result<Vec<JobResult>, AuditError> {
    run_jobs(cfg, dataset, &cfg.jobs())
}

fn run_jobs(
    cfg: &RunConfig,
    dataset: &Dataset,
    grid: &[(ProbeKind, usize)],
) -> Result<Vec<JobResult>, AuditError> {
    let splits: BTreeMap<u64, FoldSplit> = cfg
        .seeds
        .iter()
        .map(|&s| Ok((s, stratified_folds(&dataset.cohort, cfg.folds, s)?)))
        .collect::<Result<_, AuditError>>()?;
    let mut jobs = Vec::new();
    for &(probe, plan) in grid {
        for &seed in &cfg.seeds {
            for fold in 0..cfg.folds {
                jobs.push((probe, plan, seed, fold));
            }
        }
    }
    jobs.par_iter()
        .map(|&(probe, plan, seed, fold)| {
            run_job(cfg, dataset, &splits[&seed], probe, plan, seed, fold)
        })
        .collect()
}

/// MI of each None-regime feature with the label, over all frames.
pub fn feature_mutual_information(
    dataset: &Dataset,
    n_bins: usize,
) -> Result<Vec<MiRow>, AuditError> {
    let all = vec![true; dataset.frames.len()];
    let prepared = prepare_inputs(
        ProbeKind::FeatureMlp,
        &InterventionPlan::new(ScaleRegime::None, MaskSource::GroundTruth),
        dataset,
        &all,
        0,
        1,
    )?;
    let names = match &prepared.schema {
        InputSchema::Features { names } => names.clone(),
        _ => unreachable!("feature probe has a feature schema"),
    };
    let labels = dataset.labels();
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let column: Vec<f64> = prepared
                .inputs
                .iter()
                .map(|x| match x {
                    ProbeInput::Features(v) => v[j],
                    _ => unreachable!("feature probe has feature inputs"),
                })
                .collect();
            Ok(MiRow {
                feature: name.clone(),
                bits: mutual_information(&column, &labels, n_bins)?,
            })
        })
        .collect()
}

fn same_plan_except_scale(a: &InterventionPlan, b: &InterventionPlan) -> bool {
    a.mask == b.mask
        && a.photometric_correction == b.photometric_correction
        && a.feature_ablation == b.feature_ablation
}

/// Shortcut partition of every non-None plan against the regime-None plan
/// that differs from it only in scale. Groups are formed per test fold;
/// scores pool all seeds and folds.
pub fn partition_reports(
    cfg: &RunConfig,
    dataset: &Dataset,
    results: &[JobResult],
) -> Result<Vec<PartitionRow>, AuditError> {
    let image_area = |f: &FrameSample| f.intrinsics.image_area();
    let labels = dataset.labels();
    let area: BTreeMap<FrameId, (f64, SizeClass)> = dataset
        .frames
        .iter()
        .zip(&labels)
        .map(|(f, &l)| (f.frame_id, (f.apparent_bbox.area() / image_area(f), l)))
        .collect();

    let mut groups: BTreeMap<(u64, usize), BTreeMap<FrameId, PartitionGroup>> = BTreeMap::new();
    for r in results {
        if let std::collections::btree_map::Entry::Vacant(e) = groups.entry((r.seed, r.fold)) {
            let rows: Vec<(FrameId, f64, SizeClass)> = r
                .predictions
                .iter()
                .map(|p| (p.0, area[&p.0].0, area[&p.0].1))
                .collect();
            e.insert(shortcut_partition(&rows)?);
        }
    }
    let pooled = |probe: ProbeKind, plan: usize| -> Vec<(PartitionGroup, SizeClass, SizeClass)> {
        results
            .iter()
            .filter(|r| r.probe == probe && r.plan == plan)
            .flat_map(|r| {
                let g = &groups[&(r.seed, r.fold)];
                r.predictions.iter().map(move |p| (g[&p.0], p.1, p.2))
            })
            .collect()
    };

    let jobs = cfg.jobs();
    let mut out = Vec::new();
    for &(probe, i) in &jobs {
        let plan = &cfg.plans[i].plan;
        if plan.scale == ScaleRegime::None {
            continue;
        }
        let base = jobs.iter().find(|&&(p, j)| {
            p == probe
                && cfg.plans[j].plan.scale == ScaleRegime::None
                && same_plan_except_scale(&cfg.plans[j].plan, plan)
        });
        let Some(&(_, j)) = base else { continue };
        let report = PartitionReport::new(
            partition_macro_f1(&pooled(probe, j))?,
            partition_macro_f1(&pooled(probe, i))?,
        );
        out.push(PartitionRow {
            probe,
            baseline_scale: cfg.plans[j].plan.scale_label(),
            scale: plan.scale_label(),
            mask: plan.mask_label(),
            report,
        });
    }
    Ok(out)
}

/// Re-runs every regime-None job on a copy of the dataset whose hidden
/// distances are zero and checks that no prediction changes.
pub fn leakage_guard(
    cfg: &RunConfig,
    dataset: &Dataset,
    results: &[JobResult],
) -> Result<GuardReport, AuditError> {
    let grid: Vec<(ProbeKind, usize)> = cfg
        .jobs()
        .into_iter()
        .filter(|&(_, i)| cfg.plans[i].plan.scale == ScaleRegime::None)
        .collect();
    let zeroed = dataset.with_hidden_z_zeroed();
    let rerun = run_jobs(cfg, &zeroed, &grid)?;
    let mut compared = 0;
    for r in &rerun {
        let original = results
            .iter()
            .find(|o| {
                o.probe == r.probe && o.plan == r.plan && o.seed == r.seed && o.fold == r.fold
            })
            .ok_or_else(|| AuditError::Data("guard job missing from the main run".into()))?;
        if original.predictions != r.predictions {
            return Err(AuditError::Leak(format!(
                "{} under {} changed predictions (seed {}, fold {}) when hidden distances were zeroed",
                r.probe.name(),
                cfg.plans[r.plan].plan.scale_label(),
                r.seed,
                r.fold
            )));
        }
        compared += r.predictions.len();
    }
    Ok(GuardReport {
        jobs: rerun.len(),
        predictions_compared: compared,
    })
}

/// Generates the dataset and runs the whole audit described by `text`.
pub fn run_audit(text: &str) -> Result<AuditReport, AuditError> {
    let cfg = RunConfig::from_toml(text)?;
    cfg.validate_audit()?;
    let dataset = generate_dataset(&cfg.dataset, cfg.seed)?;
    audit_dataset(text, None, &dataset)
}

/// Runs the audit described by `text` on an already generated dataset.
/// `seed_override` replaces the config's audit seeds with a single seed.
pub fn audit_dataset(
    text: &str,
    seed_override: Option<u64>,
    dataset: &Dataset,
) -> Result<AuditReport, AuditError> {
    let mut cfg = RunConfig::from_toml(text)?;
    if let Some(s) = seed_override {
        cfg.seeds = vec![s];
    }
    let cfg = &cfg;
    cfg.validate_audit()?;
    let results = run_grid(cfg, dataset)?;
    let partition = partition_reports(cfg, dataset, &results)?;
    let mutual_information = feature_mutual_information(dataset, cfg.mi_bins)?;
    let guard = if cfg.guard {
        Some(leakage_guard(cfg, dataset, &results)?)
    } else {
        None
    };
    report::build_report(
        cfg,
        text,
        seed_override,
        dataset,
        &results,
        partition,
        mutual_information,
        guard,
    )
}
