use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use brainalign::decoder::{fit_ridge, predict, DecoderModel, TrainingMeta};
use brainalign::experiment::{
    export_plan_visual, fit_alignment, gridsearch_fir, grid_colormap, run_setup, sweep_alignment_data,
    sweep_training_size, preprocess_run, ExperimentSetup, Provenance, SweepConfig,
};
use brainalign::fugw::{plan_diagnostics, TransportPlan};
use brainalign::matrixio::{read_array, write_array, write_json, Dataset, RunConfig, Split};
use brainalign::preprocess::fir_features;
use brainalign::retrieval::evaluate_retrieval;
use brainalign::synth::{generate, oracle_align_quality};
use brainalign::transport::apply_plan;
use brainalign::{Error, Result};

#[derive(Parser)]
#[command(name = "brainalign", version, about = "Functional alignment, decoding and retrieval evaluation")]
struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; component seeds are re-derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DatasetArg {
    /// Dataset manifest; when absent the `synth` config section is generated in memory.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the `synth` config section.
    Simulate,
    /// Fit a FUGW plan mapping one subject onto a reference.
    Align {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        reference: String,
        #[arg(long)]
        alignment_minutes: Option<f64>,
    },
    /// Map a feature matrix through a saved plan.
    Transport {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = false)]
        allow_dead_vertices: bool,
    },
    /// Fit or apply a ridge decoder.
    #[command(subcommand)]
    Decode(DecodeCommand),
    /// Score predictions against ground-truth latents.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truths: PathBuf,
        /// Candidate pool; defaults to the truths, each truth excluded from its own sets.
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Run the `setup` config section end to end.
    RunSetup {
        #[command(flatten)]
        data: DatasetArg,
    },
    /// Run the `sweep` config section with `setup` as template.
    Sweep {
        #[command(flatten)]
        data: DatasetArg,
    },
    /// Cross-validated FIR selection over the `gridsearch` config section.
    GridsearchFir {
        #[command(flatten)]
        data: DatasetArg,
    },
    /// Write a transported grid colouring as CSV and PPM.
    ExportVisual {
        #[arg(long)]
        plan: PathBuf,
        /// Dataset providing the reference grid shape.
        #[command(flatten)]
        data: DatasetArg,
        /// v_out × 3 colouring; defaults to a gradient over the grid.
        #[arg(long)]
        colormap: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
}

#[derive(Subcommand)]
enum DecodeCommand {
    /// Fit on the training runs of the given subjects (no alignment).
    Fit {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long, value_delimiter = ',', required = true)]
        subjects: Vec<String>,
        #[arg(long, default_value = "synthetic")]
        latent_type: String,
    },
    /// Predict latents from a preprocessed volume matrix (FIR applied here).
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    config: &'a RunConfig,
    provenance: Provenance,
    result: T,
}

fn write_report<T: Serialize>(out: &Path, command: &str, cfg: &RunConfig, result: T) -> Result<PathBuf> {
    let path = out.join("report.json");
    write_json(
        &Report {
            command,
            config: cfg,
            provenance: Provenance::new(cfg),
            result,
        },
        &path,
    )?;
    Ok(path)
}

/// Report paths are relative to the output directory so reruns elsewhere
/// produce identical reports.
fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

fn load_dataset(arg: &DatasetArg, cfg: &RunConfig) -> Result<Dataset> {
    match (&arg.manifest, &cfg.synth) {
        (Some(m), _) => Dataset::load(m),
        (None, Some(spec)) => Ok(generate(spec)?.dataset),
        (None, None) => Err(Error::Validation(
            "no --manifest given and no synth section in the config".into(),
        )),
    }
}

fn setup_of(cfg: &RunConfig) -> Result<&ExperimentSetup> {
    cfg.setup
        .as_ref()
        .ok_or_else(|| Error::Validation("config has no setup section".into()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_root_seed(s);
    }
    cfg.resolve_seeds();
    cfg.validate()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Argument("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    }
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let report = match cli.command {
        Command::Simulate => {
            let spec = cfg.synth.clone().unwrap_or_default();
            let sd = generate(&spec)?;
            let manifest = sd.dataset.save(out.join("dataset"))?;
            write_report(
                out,
                "simulate",
                &cfg,
                json!({ "manifest": rel(out, &manifest), "spec": spec, "ground_truth": sd.ground_truth_perms }),
            )?
        }
        Command::Align {
            data,
            subject,
            reference,
            alignment_minutes,
        } => {
            let ds = load_dataset(&data, &cfg)?;
            let plan = fit_alignment(&ds, &subject, &reference, alignment_minutes, &cfg)?;
            let diag = plan_diagnostics(&plan, &ds.subject(&subject)?.geometry, &ds.subject(&reference)?.geometry)?;
            let quality = match (ds.ground_truth.get(&subject), ds.ground_truth.get(&reference)) {
                (Some(ps), Some(pr)) if plan.shape().0 == plan.shape().1 => {
                    // subject column i shows reference-space column ps[i], which the
                    // reference subject holds at its column pr⁻¹(ps[i])
                    let mut inv = vec![0; pr.len()];
                    for (i, &p) in pr.iter().enumerate() {
                        inv[p] = i;
                    }
                    let truth: Vec<usize> = ps.iter().map(|&p| inv[p]).collect();
                    Some(oracle_align_quality(&plan, &truth)?)
                }
                _ => None,
            };
            plan.save(out.join("plan.fmat"), Some(diag))?;
            write_report(
                out,
                "align",
                &cfg,
                json!({ "subject": subject, "reference": reference, "diagnostics": diag,
                        "loss_trace": plan.loss_trace, "quality": quality }),
            )?
        }
        Command::Transport {
            plan,
            input,
            allow_dead_vertices,
        } => {
            let p = TransportPlan::load(&plan)?;
            let x = read_array(&input)?;
            let y = apply_plan(&p, &x, allow_dead_vertices)?;
            let path = out.join("transported.fmat");
            write_array(&y, &path)?;
            write_report(out, "transport", &cfg, json!({ "output": rel(out, &path), "shape": y.shape() }))?
        }
        Command::Decode(DecodeCommand::Fit {
            data,
            subjects,
            latent_type,
        }) => {
            let ds = load_dataset(&data, &cfg)?;
            let (x, y) = training_design(&ds, &subjects, &latent_type, &cfg)?;
            let model = fit_ridge(&x, &y, cfg.ridge.alpha_ridge)?
                .with_fir(cfg.fir)
                .with_meta(TrainingMeta {
                    subjects: subjects.clone(),
                    rows: x.nrows(),
                    alignment: "none".into(),
                });
            model.save(out.join("model"))?;
            write_report(out, "decode-fit", &cfg, json!({ "model": "model", "rows": x.nrows() }))?
        }
        Command::Decode(DecodeCommand::Predict { model, input }) => {
            let m = DecoderModel::load(&model)?;
            let x = fir_features(&read_array(&input)?, &m.fir)?;
            let y = predict(&m, &x)?;
            let path = out.join("predictions.fmat");
            write_array(&y, &path)?;
            write_report(out, "decode-predict", &cfg, json!({ "output": rel(out, &path), "shape": y.shape() }))?
        }
        Command::Evaluate {
            predictions,
            truths,
            pool,
        } => {
            let p = read_array(&predictions)?;
            let t = read_array(&truths)?;
            let report = match pool {
                Some(path) => evaluate_retrieval(&p, &t, &read_array(&path)?, None, &cfg.retrieval)?,
                None => {
                    let idx: Vec<usize> = (0..t.nrows()).collect();
                    evaluate_retrieval(&p, &t, &t, Some(&idx), &cfg.retrieval)?
                }
            };
            report.write_per_set_csv(out.join("per_set.csv"))?;
            write_report(out, "evaluate", &cfg, report)?
        }
        Command::RunSetup { data } => {
            let ds = load_dataset(&data, &cfg)?;
            let outcome = run_setup(setup_of(&cfg)?, &ds, &cfg)?;
            outcome.report.write_per_set_csv(out.join("per_set.csv"))?;
            write_report(out, "run-setup", &cfg, outcome)?
        }
        Command::Sweep { data } => {
            let ds = load_dataset(&data, &cfg)?;
            let template = setup_of(&cfg)?;
            let sweep = cfg
                .sweep
                .as_ref()
                .ok_or_else(|| Error::Validation("config has no sweep section".into()))?;
            let result = match sweep {
                SweepConfig::AlignmentData { minutes } => sweep_alignment_data(template, minutes, &ds, &cfg)?,
                SweepConfig::TrainingSize {
                    minutes,
                    repetition_mode,
                    test_repetitions,
                } => sweep_training_size(template, minutes, *repetition_mode, test_repetitions, &ds, &cfg)?,
            };
            result.write_csv(out.join("cells.csv"))?;
            write_report(out, "sweep", &cfg, result)?
        }
        Command::GridsearchFir { data } => {
            let ds = load_dataset(&data, &cfg)?;
            let grid = cfg.gridsearch.clone().unwrap_or_default();
            let result = gridsearch_fir(setup_of(&cfg)?, &grid, &ds, &cfg)?;
            result.write_csv(out.join("cells.csv"))?;
            write_report(out, "gridsearch-fir", &cfg, result)?
        }
        Command::ExportVisual {
            plan,
            data,
            colormap,
            scale,
        } => {
            let p = TransportPlan::load(&plan)?;
            let ds = load_dataset(&data, &cfg)?;
            let grid = ds
                .grid
                .ok_or_else(|| Error::Validation("dataset manifest has no grid shape".into()))?;
            let cm = match colormap {
                Some(path) => read_array(&path)?,
                None => grid_colormap(&grid),
            };
            let (csv, ppm) = (out.join("colormap.csv"), out.join("colormap.ppm"));
            export_plan_visual(&p, &grid, &cm, &csv, &ppm, scale)?;
            write_report(out, "export-visual", &cfg, json!({ "csv": rel(out, &csv), "ppm": rel(out, &ppm) }))?
        }
    };
    println!("{}", report.display());
    Ok(())
}

/// Preprocessed, repetition-averaged FIR design over the training runs of
/// `subjects`.
fn training_design(
    ds: &Dataset,
    subjects: &[String],
    latent_type: &str,
    cfg: &RunConfig,
) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in subjects {
        let subj = ds.subject(s)?;
        for seg in ds.segments(Split::Train) {
            let mut acc: Option<ndarray::Array2<f64>> = None;
            for id in &seg.runs {
                let raw = subj
                    .run(id)
                    .ok_or_else(|| Error::Validation(format!("subject {s} has no run {id}")))?;
                let x = preprocess_run(raw, cfg)?;
                acc = Some(match acc {
                    Some(a) => a + x,
                    None => x,
                });
            }
            let x = acc.expect("segments are non-empty") / seg.runs.len() as f64;
            let Some(rows) = cfg.fir.output_rows(x.nrows()) else {
                continue;
            };
            xs.push(fir_features(&x, &cfg.fir)?);
            ys.push(ds.latent(latent_type, &seg.runs[0])?.slice(ndarray::s![..rows, ..]).to_owned());
        }
    }
    if xs.is_empty() {
        return Err(Error::Length("no training rows after FIR truncation".into()));
    }
    let cat = |v: &[ndarray::Array2<f64>]| {
        let views: Vec<_> = v.iter().map(|a| a.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    };
    Ok((cat(&xs)?, cat(&ys)?))
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if e.is_io() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
