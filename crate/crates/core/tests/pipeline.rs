use ndarray::Array2;

use brainalign::experiment::{
    export_plan_visual, grid_colormap, run_setup, sweep_alignment_data, Alignment, ExperimentSetup, RepetitionMode,
    TestRepetitions,
};
use brainalign::fugw::{solve_fugw, FugwProblem, TransportPlan};
use brainalign::geometry::rotate180;
use brainalign::matrixio::{GridShape, RetrievalConfig, RidgeConfig, RunConfig};
use brainalign::preprocess::{standardize, FirSpec};
use brainalign::synth::{generate, Permutation, Repetitions, SubjectSpec, SynthDataset, SynthSpec};
use brainalign::transport::apply_plan;

fn rotation_pair(width: usize, height: usize, snr: f64, n_train: usize) -> SynthDataset {
    generate(&SynthSpec {
        grid: GridShape {
            width,
            height,
            spacing: 1.0,
        },
        n_train,
        n_test: 20,
        train_segments: 1,
        test_segments: 1,
        snr,
        repetitions: Repetitions { train: 1, test: 1 },
        subjects: vec![
            SubjectSpec {
                id: "a".into(),
                permutation: Permutation::Rotation180,
            },
            SubjectSpec {
                id: "ref".into(),
                permutation: Permutation::Identity,
            },
        ],
        seed: 21,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn fit(sd: &SynthDataset) -> TransportPlan {
    let a = sd.dataset.subject("a").unwrap();
    let r = sd.dataset.subject("ref").unwrap();
    let xa = standardize(a.run("train-00-r0").unwrap()).unwrap();
    let xr = standardize(r.run("train-00-r0").unwrap()).unwrap();
    solve_fugw(&FugwProblem {
        x_out: &xa,
        x_ref: &xr,
        geom_out: &a.geometry,
        geom_ref: &r.geometry,
        config: &Default::default(),
    })
    .unwrap()
}

#[test]
fn noise_free_alignment_undoes_the_permutation() {
    let sd = rotation_pair(6, 6, 1e6, 200);
    let plan = fit(&sd);
    let clean_a = sd.clean_subject_segment("a", 0).unwrap();
    let clean_ref = sd.clean_subject_segment("ref", 0).unwrap();
    let moved = apply_plan(&plan, &clean_a, false).unwrap();
    let scale = clean_ref.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let dev = moved
        .iter()
        .zip(clean_ref.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(dev <= 1e-6 * scale, "deviation {dev} at scale {scale}");
}

#[test]
fn transported_colours_follow_the_rotation() {
    let (w, h) = (10, 10);
    let sd = rotation_pair(w, h, 10.0, 200);
    let plan = fit(&sd);
    let grid = GridShape {
        width: w,
        height: h,
        spacing: 1.0,
    };
    let colours = grid_colormap(&grid);
    let dir = tempfile::tempdir().unwrap();
    let out = export_plan_visual(
        &plan,
        &grid,
        &colours,
        dir.path().join("c.csv"),
        dir.path().join("c.ppm"),
        1,
    )
    .unwrap();
    let v = w * h;
    let mut agree = 0;
    for j in 0..v {
        let nearest = (0..v)
            .min_by(|&p, &q| {
                let d = |i: usize| (0..3).map(|c| (out[[j, c]] - colours[[i, c]]).powi(2)).sum::<f64>();
                d(p).total_cmp(&d(q))
            })
            .unwrap();
        agree += usize::from(nearest == rotate180(v, j));
    }
    assert!(agree as f64 >= 0.95 * v as f64, "{agree}/{v}");
    let ppm = std::fs::read(dir.path().join("c.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n10 10\n255\n"));
}

#[test]
fn identity_plan_keeps_colours() {
    let grid = GridShape {
        width: 4,
        height: 3,
        spacing: 1.0,
    };
    let colours = grid_colormap(&grid);
    let plan = TransportPlan::from_matrix(Array2::eye(12), Default::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = export_plan_visual(&plan, &grid, &colours, dir.path().join("c.csv"), dir.path().join("c.ppm"), 3).unwrap();
    assert_eq!(out, colours);
}

#[test]
fn more_alignment_data_does_not_hurt() {
    let ds = generate(&SynthSpec {
        grid: GridShape {
            width: 6,
            height: 6,
            spacing: 1.0,
        },
        n_train: 1200,
        n_test: 300,
        train_segments: 4,
        test_segments: 2,
        latent_dim: 16,
        snr: 0.05,
        subjects: vec![
            SubjectSpec {
                id: "s1".into(),
                permutation: Permutation::Identity,
            },
            SubjectSpec {
                id: "s2".into(),
                permutation: Permutation::Rotation180,
            },
        ],
        seed: 5,
        ..SynthSpec::default()
    })
    .unwrap()
    .dataset;
    let cfg = RunConfig {
        ridge: RidgeConfig { alpha_ridge: 100.0 },
        retrieval: RetrievalConfig {
            set_size: 199,
            ..RetrievalConfig::default()
        },
        ..RunConfig::default()
    };
    let template = ExperimentSetup {
        train_subjects: vec!["s1".into()],
        test_subject: "s2".into(),
        alignment: Alignment::Functional {
            reference: "s1".into(),
            alignment_minutes: None,
        },
        train_minutes: None,
        train_repetitions: RepetitionMode::AverageRuns,
        test_repetitions: TestRepetitions::Average(10),
        latent_type: "synthetic".into(),
        fir: FirSpec::identity(),
    };
    // 3, 30 and 600 frames at TR 2 s
    let sweep = sweep_alignment_data(&template, &[0.1, 1.0, 20.0], &ds, &cfg).unwrap();
    let mr: Vec<f64> = sweep.mr().into_iter().map(Option::unwrap).collect();
    assert!(sweep.trends[0].spearman <= 0.0, "{mr:?}");
    assert!(mr[2] < mr[0], "{mr:?}");
    assert_eq!(sweep.cells[1].coords["alignment_frames"], 30);

    let unaligned = run_setup(
        &ExperimentSetup {
            alignment: Alignment::None,
            ..template
        },
        &ds,
        &cfg,
    )
    .unwrap();
    assert!(mr[2] < unaligned.report.median_relative_rank);
}
