//! Experiment orchestration: decoding setups, sweeps, the FIR grid search
//! and plan visualisation.
//!
//! A setup runs preprocess (detrend, standardize) per run, averages or
//! stacks repeated runs, maps non-reference subjects onto the reference
//! through a FUGW plan fitted on their training data, builds FIR features,
//! fits a ridge decoder on the stacked training subjects and scores the
//! test subject's predictions by retrieval.
//!
//! Plans act on volumes before FIR. Barycentric transport is linear and
//! row-wise, so for `average` aggregation this equals transporting FIR
//! features; for `stack` it transports each lagged block.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;

use ndarray::{concatenate, s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::decoder::{fit_ridge, predict, TrainingMeta};
use crate::error::{Error, Result};
use crate::fugw::{solve_fugw, FugwProblem, TransportPlan};
use crate::matrixio::{Dataset, GridShape, RetrievalConfig, RunConfig, Split};
use crate::preprocess::{detrend_cosine, fir_features, standardize, Aggregation, FirSpec};
use crate::retrieval::{evaluate_retrieval, RetrievalReport};
use crate::stats::{mean, spearman};
use crate::transport::{apply_plan, transport_colormap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    None,
    Functional {
        reference: String,
        /// Minutes of training data used to fit each plan; all when absent.
        #[serde(default)]
        alignment_minutes: Option<f64>,
    },
}

/// How repeated presentations of a training segment enter the decoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepetitionMode {
    #[default]
    AverageRuns,
    StackRuns,
}

/// Test-side handling of repeated runs: average the first `n`, or score
/// every run separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestRepetitions {
    Average(usize),
    Stack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSetup {
    pub train_subjects: Vec<String>,
    pub test_subject: String,
    pub alignment: Alignment,
    /// Training data budget per subject; all training segments when absent.
    #[serde(default)]
    pub train_minutes: Option<f64>,
    #[serde(default)]
    pub train_repetitions: RepetitionMode,
    pub test_repetitions: TestRepetitions,
    pub latent_type: String,
    #[serde(default)]
    pub fir: FirSpec,
}

impl ExperimentSetup {
    fn reference(&self) -> Option<&str> {
        match &self.alignment {
            Alignment::None => None,
            Alignment::Functional { reference, .. } => Some(reference),
        }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        self.fir.validate()?;
        if self.train_subjects.is_empty() {
            return Err(Error::Validation("setup has no training subjects".into()));
        }
        let mut seen = BTreeSet::new();
        for s in self.train_subjects.iter().chain([&self.test_subject]) {
            dataset.subject(s)?;
            if s != &self.test_subject && !seen.insert(s) {
                return Err(Error::Validation(format!("training subject {s} listed twice")));
            }
        }
        if !dataset.latents.contains_key(&self.latent_type) {
            return Err(Error::Validation(format!("no latents of type {}", self.latent_type)));
        }
        if let Alignment::Functional {
            reference,
            alignment_minutes,
        } = &self.alignment
        {
            if !self.train_subjects.contains(reference) {
                return Err(Error::Validation(format!(
                    "alignment reference {reference} is not a training subject"
                )));
            }
            if let Some(m) = alignment_minutes {
                if !(*m > 0.0) {
                    return Err(Error::Validation("alignment_minutes must be > 0".into()));
                }
            }
        }
        if let Some(m) = self.train_minutes {
            if !(m > 0.0) {
                return Err(Error::Validation("train_minutes must be > 0".into()));
            }
        }
        if self.test_repetitions == TestRepetitions::Average(0) {
            return Err(Error::Validation("test repetitions must average at least one run".into()));
        }
        Ok(())
    }

    fn alignment_label(&self) -> String {
        match self.reference() {
            None => "none".into(),
            Some(r) => format!("functional({r})"),
        }
    }
}

/// Summary of one fitted plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub subject: String,
    pub reference: String,
    pub frames: usize,
    pub mass: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupOutcome {
    pub setup: ExperimentSetup,
    pub report: RetrievalReport,
    pub train_rows: usize,
    pub test_rows: usize,
    pub alignments: Vec<AlignmentSummary>,
}

/// Plans shared between setups on the same dataset and FUGW config, keyed
/// by (subject, reference, alignment frames).
#[derive(Default)]
pub struct PlanCache {
    plans: Mutex<BTreeMap<(String, String, usize), TransportPlan>>,
}

impl PlanCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.plans.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cosine detrending and standardization of one run, as configured.
pub fn preprocess_run(x: &Array2<f64>, cfg: &RunConfig) -> Result<Array2<f64>> {
    let p = &cfg.preprocess;
    let mut out = x.clone();
    if p.detrend {
        let order = p.drift_order_for(x.nrows());
        if order > 0 {
            out = detrend_cosine(&out, order)?;
        }
    }
    if p.standardize {
        out = standardize(&out)?;
    }
    Ok(out)
}

fn average(runs: &[Array2<f64>]) -> Array2<f64> {
    let mut acc = runs[0].clone();
    for r in &runs[1..] {
        acc += r;
    }
    acc / runs.len() as f64
}

/// One stimulus segment of one subject: preprocessed runs plus the shared
/// latents.
#[derive(Clone)]
struct PreparedSegment {
    runs: Vec<Array2<f64>>,
    latents: Array2<f64>,
}

struct Prepared {
    train: BTreeMap<String, Vec<PreparedSegment>>,
    test: Vec<PreparedSegment>,
    plans: BTreeMap<String, TransportPlan>,
    alignments: Vec<AlignmentSummary>,
}

fn prepare_segments(
    dataset: &Dataset,
    subject: &str,
    split: Split,
    latent_type: &str,
    cfg: &RunConfig,
) -> Result<Vec<PreparedSegment>> {
    let subj = dataset.subject(subject)?;
    dataset
        .segments(split)
        .iter()
        .map(|seg| {
            let latents = dataset.latent(latent_type, &seg.runs[0])?.clone();
            let runs = seg
                .runs
                .iter()
                .map(|id| {
                    let x = subj
                        .run(id)
                        .ok_or_else(|| Error::Validation(format!("subject {subject} has no run {id}")))?;
                    if x.nrows() != latents.nrows() {
                        return Err(Error::Length(format!(
                            "run {id} of {subject} has {} rows, latents have {}",
                            x.nrows(),
                            latents.nrows()
                        )));
                    }
                    preprocess_run(x, cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PreparedSegment { runs, latents })
        })
        .collect()
}

/// Repetition-averaged training segments stacked in order, cut to `frames`.
fn alignment_data(segments: &[PreparedSegment], frames: Option<usize>) -> Array2<f64> {
    let views: Vec<Array2<f64>> = segments.iter().map(|s| average(&s.runs)).collect();
    let views: Vec<_> = views.iter().map(|a| a.view()).collect();
    let all = concatenate(Axis(0), &views).expect("segments share the vertex count");
    match frames {
        Some(f) if f < all.nrows() => all.slice(s![..f, ..]).to_owned(),
        _ => all,
    }
}

fn prepare(setup: &ExperimentSetup, dataset: &Dataset, cfg: &RunConfig, cache: &PlanCache) -> Result<Prepared> {
    setup.validate(dataset).map_err(|e| e.in_stage("setup"))?;
    let mut subjects: Vec<&String> = setup.train_subjects.iter().collect();
    if !subjects.contains(&&setup.test_subject) {
        subjects.push(&setup.test_subject);
    }
    let train = subjects
        .iter()
        .map(|s| {
            prepare_segments(dataset, s, Split::Train, &setup.latent_type, cfg)
                .map(|v| ((*s).clone(), v))
                .map_err(|e| e.in_stage(format!("preprocess:{s}")))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let test = prepare_segments(dataset, &setup.test_subject, Split::Test, &setup.latent_type, cfg)
        .map_err(|e| e.in_stage(format!("preprocess:{}", setup.test_subject)))?;
    if test.is_empty() {
        return Err(Error::Validation("dataset has no test segments".into()).in_stage("setup"));
    }

    let mut plans = BTreeMap::new();
    let mut alignments = Vec::new();
    if let Alignment::Functional {
        reference,
        alignment_minutes,
    } = &setup.alignment
    {
        let frames = alignment_minutes.map(|m| cfg.preprocess.frames_for_minutes(m));
        let x_ref = alignment_data(&train[reference], frames);
        let geom_ref = &dataset.subject(reference)?.geometry;
        let others: Vec<&String> = subjects.iter().copied().filter(|s| *s != reference).collect();
        let fitted = others
            .par_iter()
            .map(|s| {
                let x_out = alignment_data(&train[*s], frames);
                let n = x_out.nrows().min(x_ref.nrows());
                let key = ((*s).clone(), reference.clone(), n);
                if let Some(p) = cache.plans.lock().unwrap().get(&key) {
                    return Ok((key, p.clone()));
                }
                let problem = FugwProblem {
                    x_out: &x_out.slice(s![..n, ..]).to_owned(),
                    x_ref: &x_ref.slice(s![..n, ..]).to_owned(),
                    geom_out: &dataset.subject(s)?.geometry,
                    geom_ref,
                    config: &cfg.fugw,
                };
                let plan = solve_fugw(&problem).map_err(|e| e.in_stage(format!("align:{s}")))?;
                cache.plans.lock().unwrap().insert(key.clone(), plan.clone());
                Ok((key, plan))
            })
            .collect::<Result<Vec<_>>>()?;
        for ((subject, reference, frames), plan) in fitted {
            let trace = &plan.loss_trace;
            alignments.push(AlignmentSummary {
                subject: subject.clone(),
                reference,
                frames,
                mass: plan.mass(),
                initial_loss: trace.first().map_or(f64::NAN, |r| r.raw.total),
                final_loss: trace.last().map_or(f64::NAN, |r| r.raw.total),
            });
            plans.insert(subject, plan);
        }
    }
    Ok(Prepared {
        train,
        test,
        plans,
        alignments,
    })
}

/// Fits the plan mapping `subject` onto `reference` from their preprocessed,
/// repetition-averaged training data, optionally limited to the first
/// `alignment_minutes`.
pub fn fit_alignment(
    dataset: &Dataset,
    subject: &str,
    reference: &str,
    alignment_minutes: Option<f64>,
    cfg: &RunConfig,
) -> Result<TransportPlan> {
    let kind = dataset
        .latents
        .keys()
        .next()
        .ok_or_else(|| Error::Validation("dataset has no latents".into()))?
        .clone();
    let frames = alignment_minutes.map(|m| cfg.preprocess.frames_for_minutes(m));
    let data = |s: &str| -> Result<Array2<f64>> {
        let segs = prepare_segments(dataset, s, Split::Train, &kind, cfg).map_err(|e| e.in_stage(format!("preprocess:{s}")))?;
        if segs.is_empty() {
            return Err(Error::Validation("dataset has no training segments".into()));
        }
        Ok(alignment_data(&segs, frames))
    };
    let x_out = data(subject)?;
    let x_ref = data(reference)?;
    let n = x_out.nrows().min(x_ref.nrows());
    let problem = FugwProblem {
        x_out: &x_out.slice(s![..n, ..]).to_owned(),
        x_ref: &x_ref.slice(s![..n, ..]).to_owned(),
        geom_out: &dataset.subject(subject)?.geometry,
        geom_ref: &dataset.subject(reference)?.geometry,
        config: &cfg.fugw,
    };
    solve_fugw(&problem).map_err(|e| e.in_stage(format!("align:{subject}")))
}

impl Prepared {
    fn to_reference(&self, subject: &str, x: Array2<f64>) -> Result<Array2<f64>> {
        match self.plans.get(subject) {
            Some(p) => apply_plan(p, &x, false).map_err(|e| e.in_stage(format!("transport:{subject}"))),
            None => Ok(x),
        }
    }

    /// FIR design for one subject over the chosen training segments, with
    /// at most `budget` frames per subject.
    fn training_rows(
        &self,
        subject: &str,
        segments: &[usize],
        budget: Option<usize>,
        mode: RepetitionMode,
        fir: &FirSpec,
    ) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut left = budget.unwrap_or(usize::MAX);
        for &k in segments {
            if left == 0 {
                break;
            }
            let seg = &self.train[subject][k];
            let len = seg.latents.nrows().min(left);
            left -= len;
            let Some(rows) = fir.output_rows(len) else {
                continue;
            };
            let cut = |x: &Array2<f64>| x.slice(s![..len, ..]).to_owned();
            let blocks = match mode {
                RepetitionMode::AverageRuns => vec![average(&seg.runs.iter().map(cut).collect::<Vec<_>>())],
                RepetitionMode::StackRuns => seg.runs.iter().map(cut).collect(),
            };
            for b in blocks {
                xs.push(fir_features(&self.to_reference(subject, b)?, fir)?);
                ys.push(seg.latents.slice(s![..rows, ..]).to_owned());
            }
        }
        Ok((xs, ys))
    }
}

fn stack(blocks: &[Array2<f64>], what: &str) -> Result<Array2<f64>> {
    if blocks.is_empty() {
        return Err(Error::Length(format!("no {what} rows left after FIR truncation")));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(format!("stacking {what}: {e}")))
}

/// Predictions, truths and pool for a list of evaluation segments.
struct EvalSet {
    preds: Array2<f64>,
    truths: Array2<f64>,
    pool: Array2<f64>,
    truth_index: Vec<usize>,
}

fn evaluation_set(
    prepared: &Prepared,
    subject: &str,
    segments: &[&PreparedSegment],
    reps: TestRepetitions,
    model: &crate::decoder::DecoderModel,
    fir: &FirSpec,
) -> Result<EvalSet> {
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut pool = Vec::new();
    let mut truth_index = Vec::new();
    let mut offset = 0;
    for seg in segments {
        let rows = fir.output_rows(seg.latents.nrows()).ok_or_else(|| {
            Error::Length(format!(
                "test segment of {} frames is shorter than FIR lag {} + window {}",
                seg.latents.nrows(),
                fir.lag,
                fir.window
            ))
        })?;
        let blocks = match reps {
            TestRepetitions::Average(k) => {
                if k > seg.runs.len() {
                    return Err(Error::Validation(format!(
                        "{k} test repetitions requested, {} available",
                        seg.runs.len()
                    )));
                }
                vec![average(&seg.runs[..k])]
            }
            TestRepetitions::Stack => seg.runs.clone(),
        };
        let y = seg.latents.slice(s![..rows, ..]).to_owned();
        for b in blocks {
            let x = fir_features(&prepared.to_reference(subject, b)?, fir)?;
            preds.push(predict(model, &x)?);
            truths.push(y.clone());
            truth_index.extend(offset..offset + rows);
        }
        pool.push(y);
        offset += rows;
    }
    Ok(EvalSet {
        preds: stack(&preds, "prediction")?,
        truths: stack(&truths, "truth")?,
        pool: stack(&pool, "pool")?,
        truth_index,
    })
}

fn decode_and_score(
    setup: &ExperimentSetup,
    prepared: &Prepared,
    cfg: &RunConfig,
) -> Result<(RetrievalReport, usize, usize)> {
    let fir = &setup.fir;
    let budget = setup.train_minutes.map(|m| cfg.preprocess.frames_for_minutes(m));
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in &setup.train_subjects {
        let all: Vec<usize> = (0..prepared.train[s].len()).collect();
        let (x, y) = prepared
            .training_rows(s, &all, budget, setup.train_repetitions, fir)
            .map_err(|e| e.in_stage("fir"))?;
        xs.extend(x);
        ys.extend(y);
    }
    let x = stack(&xs, "training").map_err(|e| e.in_stage("fir"))?;
    let y = stack(&ys, "training").map_err(|e| e.in_stage("fir"))?;
    let model = fit_ridge(&x, &y, cfg.ridge.alpha_ridge)
        .map_err(|e| e.in_stage("ridge"))?
        .with_fir(*fir)
        .with_meta(TrainingMeta {
            subjects: setup.train_subjects.clone(),
            rows: x.nrows(),
            alignment: setup.alignment_label(),
        });
    let segments: Vec<&PreparedSegment> = prepared.test.iter().collect();
    let eval = evaluation_set(prepared, &setup.test_subject, &segments, setup.test_repetitions, &model, fir)
        .map_err(|e| e.in_stage("predict"))?;
    let report = evaluate_retrieval(&eval.preds, &eval.truths, &eval.pool, Some(&eval.truth_index), &cfg.retrieval)
        .map_err(|e| e.in_stage("retrieval"))?;
    Ok((report, x.nrows(), eval.preds.nrows()))
}

pub fn run_setup(setup: &ExperimentSetup, dataset: &Dataset, cfg: &RunConfig) -> Result<SetupOutcome> {
    run_setup_cached(setup, dataset, cfg, &PlanCache::new())
}

/// [`run_setup`] reusing plans already fitted with the same data and config.
pub fn run_setup_cached(
    setup: &ExperimentSetup,
    dataset: &Dataset,
    cfg: &RunConfig,
    cache: &PlanCache,
) -> Result<SetupOutcome> {
    let prepared = prepare(setup, dataset, cfg, cache)?;
    let (report, train_rows, test_rows) = decode_and_score(setup, &prepared, cfg)?;
    Ok(SetupOutcome {
        setup: setup.clone(),
        report,
        train_rows,
        test_rows,
        alignments: prepared.alignments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the resolved configuration serialised as JSON.
    pub config_hash: String,
    pub root_seed: u64,
    pub retrieval_seed: u64,
    pub synth_seed: Option<u64>,
    pub code_version: String,
    pub threads: usize,
}

impl Provenance {
    pub fn new(cfg: &RunConfig) -> Self {
        let bytes = serde_json::to_vec(cfg).expect("config serialises");
        let hash = Sha256::digest(&bytes);
        let mut hex = String::with_capacity(64);
        for b in hash {
            write!(hex, "{b:02x}").unwrap();
        }
        Self {
            config_hash: hex,
            root_seed: cfg.seed,
            retrieval_seed: cfg.retrieval.seed,
            synth_seed: cfg.synth.as_ref().map(|s| s.seed),
            code_version: env!("CARGO_PKG_VERSION").into(),
            threads: rayon::current_num_threads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub coords: BTreeMap<String, Value>,
    pub setup: ExperimentSetup,
    pub median_relative_rank: Option<f64>,
    pub topk_accuracy: Option<f64>,
    pub train_rows: Option<usize>,
    /// Per-fold MR of a cross-validated cell.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fold_mr: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RetrievalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SweepCell {
    fn from_outcome(coords: BTreeMap<String, Value>, o: SetupOutcome) -> Self {
        Self {
            coords,
            median_relative_rank: Some(o.report.median_relative_rank),
            topk_accuracy: Some(o.report.topk_accuracy),
            train_rows: Some(o.train_rows),
            setup: o.setup,
            fold_mr: Vec::new(),
            report: Some(o.report),
            error: None,
        }
    }
}

/// Spearman correlation of MR against one axis, other axes held fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub axis: String,
    pub fixed: BTreeMap<String, Value>,
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub cell: usize,
    pub fir: FirSpec,
    pub test: SetupOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: String,
    pub axes: Vec<SweepAxis>,
    pub cells: Vec<SweepCell>,
    pub trends: Vec<Trend>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<Selection>,
    pub provenance: Provenance,
}

impl SweepResult {
    pub fn mr(&self) -> Vec<Option<f64>> {
        self.cells.iter().map(|c| c.median_relative_rank).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let names: Vec<&str> = self.axes.iter().map(|a| a.name.as_str()).collect();
        let mut out = names.join(",");
        out.push_str(",median_relative_rank,topk_accuracy,train_rows,error\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            for n in &names {
                let v = &c.coords[*n];
                match v {
                    Value::String(s) => out.push_str(s),
                    other => out.push_str(&other.to_string()),
                }
                out.push(',');
            }
            writeln!(
                out,
                "{},{},{},{}",
                opt(c.median_relative_rank),
                opt(c.topk_accuracy),
                c.train_rows.map(|r| r.to_string()).unwrap_or_default(),
                c.error.as_deref().unwrap_or("").replace(',', ";")
            )
            .unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn trend(cells: &[SweepCell], axis: &str, xs: &[f64], fixed: BTreeMap<String, Value>) -> Trend {
    let mr: Vec<f64> = cells.iter().map(|c| c.median_relative_rank.unwrap_or(f64::NAN)).collect();
    Trend {
        axis: axis.into(),
        fixed,
        spearman: spearman(xs, &mr),
    }
}

fn check_grid(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Argument(format!("{what} grid is empty")));
    }
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Argument(format!("{what} grid values must be > 0")));
    }
    Ok(())
}

/// One setup per alignment budget; MR against minutes is summarised by a
/// Spearman correlation.
pub fn sweep_alignment_data(
    template: &ExperimentSetup,
    minutes_grid: &[f64],
    dataset: &Dataset,
    cfg: &RunConfig,
) -> Result<SweepResult> {
    check_grid(minutes_grid, "alignment minutes")?;
    let Alignment::Functional { reference, .. } = &template.alignment else {
        return Err(Error::Argument("alignment sweep needs a functional alignment template".into()));
    };
    let cells = minutes_grid
        .par_iter()
        .map(|&m| {
            let setup = ExperimentSetup {
                alignment: Alignment::Functional {
                    reference: reference.clone(),
                    alignment_minutes: Some(m),
                },
                ..template.clone()
            };
            let outcome = run_setup(&setup, dataset, cfg)?;
            let mut coords = BTreeMap::new();
            coords.insert("alignment_minutes".into(), json!(m));
            coords.insert("alignment_frames".into(), json!(cfg.preprocess.frames_for_minutes(m)));
            Ok(SweepCell::from_outcome(coords, outcome))
        })
        .collect::<Result<Vec<_>>>()?;
    let trends = vec![trend(&cells, "alignment_minutes", minutes_grid, BTreeMap::new())];
    Ok(SweepResult {
        kind: "alignment_data".into(),
        axes: vec![
            SweepAxis {
                name: "alignment_minutes".into(),
                values: minutes_grid.iter().map(|m| json!(m)).collect(),
            },
            SweepAxis {
                name: "alignment_frames".into(),
                values: minutes_grid
                    .iter()
                    .map(|m| json!(cfg.preprocess.frames_for_minutes(*m)))
                    .collect(),
            },
        ],
        cells,
        trends,
        selected: None,
        provenance: Provenance::new(cfg),
    })
}

/// Training budget × test repetition grid (budget-major order). Plans are
/// fitted once and shared across cells.
pub fn sweep_training_size(
    template: &ExperimentSetup,
    minutes_grid: &[f64],
    repetition_mode: RepetitionMode,
    test_repetitions: &[TestRepetitions],
    dataset: &Dataset,
    cfg: &RunConfig,
) -> Result<SweepResult> {
    check_grid(minutes_grid, "training minutes")?;
    let test_reps: Vec<TestRepetitions> = if test_repetitions.is_empty() {
        vec![template.test_repetitions]
    } else {
        test_repetitions.to_vec()
    };
    let grid: Vec<(f64, TestRepetitions)> = minutes_grid
        .iter()
        .flat_map(|&m| test_reps.iter().map(move |&r| (m, r)))
        .collect();
    let cache = PlanCache::new();
    // fit plans up front so parallel cells do not race to fit the same one
    if template.reference().is_some() {
        prepare(template, dataset, cfg, &cache)?;
    }
    let cells = grid
        .par_iter()
        .map(|&(m, r)| {
            let setup = ExperimentSetup {
                train_minutes: Some(m),
                train_repetitions: repetition_mode,
                test_repetitions: r,
                ..template.clone()
            };
            let outcome = run_setup_cached(&setup, dataset, cfg, &cache)?;
            let mut coords = BTreeMap::new();
            coords.insert("train_minutes".into(), json!(m));
            coords.insert("train_frames".into(), json!(cfg.preprocess.frames_for_minutes(m)));
            coords.insert("test_repetitions".into(), serde_json::to_value(r).unwrap());
            Ok(SweepCell::from_outcome(coords, outcome))
        })
        .collect::<Result<Vec<_>>>()?;
    let trends = test_reps
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let sub: Vec<SweepCell> = cells.iter().skip(j).step_by(test_reps.len()).cloned().collect();
            let mut fixed = BTreeMap::new();
            fixed.insert("test_repetitions".into(), serde_json::to_value(r).unwrap());
            trend(&sub, "train_minutes", minutes_grid, fixed)
        })
        .collect();
    Ok(SweepResult {
        kind: "training_size".into(),
        axes: vec![
            SweepAxis {
                name: "train_minutes".into(),
                values: minutes_grid.iter().map(|m| json!(m)).collect(),
            },
            SweepAxis {
                name: "train_frames".into(),
                values: minutes_grid
                    .iter()
                    .map(|m| json!(cfg.preprocess.frames_for_minutes(*m)))
                    .collect(),
            },
            SweepAxis {
                name: "test_repetitions".into(),
                values: test_reps.iter().map(|r| serde_json::to_value(r).unwrap()).collect(),
            },
        ],
        cells,
        trends,
        selected: None,
        provenance: Provenance::new(cfg),
    })
}

/// Ranges of the FIR grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirGrid {
    pub lags: Vec<usize>,
    pub windows: Vec<usize>,
    pub aggregations: Vec<Aggregation>,
}

impl Default for FirGrid {
    fn default() -> Self {
        Self {
            lags: (1..=5).collect(),
            windows: (1..=3).collect(),
            aggregations: vec![Aggregation::Average, Aggregation::Stack],
        }
    }
}

/// Leave-one-training-segment-out FIR selection.
///
/// Fold `k` trains on every other training segment of the training
/// subjects and scores the test subject's segment `k`, repetitions
/// averaged, with retrieval sets capped at the fold size. The cell with the
/// lowest mean fold MR wins; ties go to the smaller lag, then the smaller
/// window, then the earlier aggregation. The winner is then run as a
/// regular setup on the test split.
pub fn gridsearch_fir(template: &ExperimentSetup, grid: &FirGrid, dataset: &Dataset, cfg: &RunConfig) -> Result<SweepResult> {
    if grid.lags.is_empty() || grid.windows.is_empty() || grid.aggregations.is_empty() {
        return Err(Error::Argument("FIR grid ranges must be non-empty".into()));
    }
    if grid.windows.contains(&0) {
        return Err(Error::Argument("FIR windows must be >= 1".into()));
    }
    let cache = PlanCache::new();
    let prepared = prepare(template, dataset, cfg, &cache)?;
    let folds = prepared.train[&template.test_subject].len();
    if folds < 2 {
        return Err(Error::Argument(format!(
            "cross-validation needs at least 2 training segments, found {folds}"
        )));
    }
    let mut firs = Vec::new();
    for &lag in &grid.lags {
        for &window in &grid.windows {
            for &agg in &grid.aggregations {
                firs.push(FirSpec::new(lag, window, agg));
            }
        }
    }
    let cells = firs
        .par_iter()
        .map(|fir| {
            let setup = ExperimentSetup {
                fir: *fir,
                ..template.clone()
            };
            let mut coords = BTreeMap::new();
            coords.insert("lag".into(), json!(fir.lag));
            coords.insert("window".into(), json!(fir.window));
            coords.insert("aggregation".into(), serde_json::to_value(fir.aggregation).unwrap());
            match cross_validate(&setup, &prepared, folds, cfg) {
                Ok(fold_mr) => Ok(SweepCell {
                    coords,
                    setup,
                    median_relative_rank: Some(mean(&fold_mr)),
                    topk_accuracy: None,
                    train_rows: None,
                    fold_mr,
                    report: None,
                    error: None,
                }),
                Err(e) if matches!(e.root(), Error::Length(_)) => Ok(SweepCell {
                    coords,
                    setup,
                    median_relative_rank: None,
                    topk_accuracy: None,
                    train_rows: None,
                    fold_mr: Vec::new(),
                    report: None,
                    error: Some(e.to_string()),
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<SweepCell>>>()?;
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cells.iter().enumerate() {
        if let Some(mr) = c.median_relative_rank {
            if best.is_none_or(|(_, b)| mr < b) {
                best = Some((i, mr));
            }
        }
    }
    let Some((cell, _)) = best else {
        return Err(Error::Length("every FIR cell failed".into()));
    };
    let fir = firs[cell];
    let test = {
        let setup = ExperimentSetup {
            fir,
            ..template.clone()
        };
        let (report, train_rows, test_rows) = decode_and_score(&setup, &prepared, cfg)?;
        SetupOutcome {
            setup,
            report,
            train_rows,
            test_rows,
            alignments: prepared.alignments.clone(),
        }
    };
    Ok(SweepResult {
        kind: "gridsearch_fir".into(),
        axes: vec![
            SweepAxis {
                name: "lag".into(),
                values: grid.lags.iter().map(|v| json!(v)).collect(),
            },
            SweepAxis {
                name: "window".into(),
                values: grid.windows.iter().map(|v| json!(v)).collect(),
            },
            SweepAxis {
                name: "aggregation".into(),
                values: grid.aggregations.iter().map(|a| serde_json::to_value(a).unwrap()).collect(),
            },
        ],
        cells,
        trends: Vec::new(),
        selected: Some(Selection { cell, fir, test }),
        provenance: Provenance::new(cfg),
    })
}

fn cross_validate(setup: &ExperimentSetup, prepared: &Prepared, folds: usize, cfg: &RunConfig) -> Result<Vec<f64>> {
    let fir = &setup.fir;
    (0..folds)
        .map(|k| {
            let keep: Vec<usize> = (0..folds).filter(|&j| j != k).collect();
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for s in &setup.train_subjects {
                let (x, y) = prepared.training_rows(s, &keep, None, setup.train_repetitions, fir)?;
                xs.extend(x);
                ys.extend(y);
            }
            let x = stack(&xs, "training")?;
            let y = stack(&ys, "training")?;
            let model = fit_ridge(&x, &y, cfg.ridge.alpha_ridge).map_err(|e| e.in_stage("ridge"))?;
            let seg = &prepared.train[&setup.test_subject][k];
            let eval = evaluation_set(
                prepared,
                &setup.test_subject,
                &[seg],
                TestRepetitions::Average(seg.runs.len()),
                &model,
                fir,
            )?;
            let n = eval.pool.nrows();
            if n < 2 {
                return Err(Error::Length(format!("validation fold {k} has {n} rows")));
            }
            let rc = RetrievalConfig {
                set_size: cfg.retrieval.set_size.min(n - 1),
                ..cfg.retrieval.clone()
            };
            let report = evaluate_retrieval(&eval.preds, &eval.truths, &eval.pool, Some(&eval.truth_index), &rc)
                .map_err(|e| e.in_stage("retrieval"))?;
            Ok(report.median_relative_rank)
        })
        .collect()
}

/// Smooth RGB colouring of a grid: red grows with x, green with y.
pub fn grid_colormap(grid: &GridShape) -> Array2<f64> {
    let v = grid.width * grid.height;
    let frac = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    Array2::from_shape_fn((v, 3), |(i, c)| match c {
        0 => frac(i % grid.width, grid.width),
        1 => frac(i / grid.width, grid.height),
        _ => 0.5,
    })
}

/// Transports `colormap_out` through `plan` and writes it as CSV
/// (`vertex,r,g,b`) and as a binary PPM laid out on the reference grid, each
/// vertex drawn as a `scale`×`scale` block.
pub fn export_plan_visual(
    plan: &TransportPlan,
    grid_ref: &GridShape,
    colormap_out: &Array2<f64>,
    csv_path: impl AsRef<Path>,
    ppm_path: impl AsRef<Path>,
    scale: usize,
) -> Result<Array2<f64>> {
    let v_ref = grid_ref.width * grid_ref.height;
    if plan.shape().1 != v_ref {
        return Err(Error::Shape(format!(
            "plan has {} reference vertices, grid has {v_ref}",
            plan.shape().1
        )));
    }
    if scale == 0 {
        return Err(Error::Argument("scale must be >= 1".into()));
    }
    let rgb = transport_colormap(plan, colormap_out, true)?;
    let mut csv = String::from("vertex,r,g,b\n");
    for (i, row) in rgb.outer_iter().enumerate() {
        writeln!(csv, "{i},{},{},{}", row[0], row[1], row[2]).unwrap();
    }
    let csv_path = csv_path.as_ref();
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;

    let (w, h) = (grid_ref.width * scale, grid_ref.height * scale);
    let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let vertex = (y / scale) * grid_ref.width + x / scale;
            for c in 0..3 {
                ppm.push((rgb[[vertex, c]] * 255.0).round() as u8);
            }
        }
    }
    let ppm_path = ppm_path.as_ref();
    std::fs::write(ppm_path, ppm).map_err(|e| Error::io(ppm_path, e))?;
    Ok(rgb)
}

/// Sweep section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepConfig {
    AlignmentData {
        minutes: Vec<f64>,
    },
    TrainingSize {
        minutes: Vec<f64>,
        #[serde(default)]
        repetition_mode: RepetitionMode,
        #[serde(default)]
        test_repetitions: Vec<TestRepetitions>,
    },
}

/// Grid-search section of a run configuration.
pub type GridSearchConfig = FirGrid;
