//! Synthetic multi-subject datasets with a known forward model and known
//! inter-subject vertex permutations.
//!
//! Latents `Y` are iid standard normal. A reference forward map `A` (v×m)
//! has spatially smooth columns: white noise filtered by a squared
//! exponential kernel over lattice coordinates. The clean reference signal
//! is `Y Aᵀ`; subject `s` observes its columns through a permutation
//! `π_s` (column `i` of the subject is reference column `π_s(i)`) plus iid
//! Gaussian noise at a per-column signal-to-noise power ratio. Every run is
//! an independent noise draw over the same clean signal.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fugw::{row_argmax, TransportPlan};
use crate::geometry::{grid_geometry, rotate180};
use crate::matrixio::{Dataset, GridShape, RunRecord, Split, SubjectData};
use crate::preprocess::cosine_basis;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Permutation {
    Identity,
    Rotation180,
    /// A random relabelling that is not an isometry of the lattice.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub id: String,
    pub permutation: Permutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Repetitions {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub grid: GridShape,
    /// Stimulus frames over all training segments.
    pub n_train: usize,
    pub n_test: usize,
    pub train_segments: usize,
    pub test_segments: usize,
    pub latent_dim: usize,
    /// Kernel length scale of the forward map; defaults to twice the grid
    /// spacing.
    pub smoothness: Option<f64>,
    /// Per-column signal power over noise power.
    pub snr: f64,
    pub subjects: Vec<SubjectSpec>,
    pub repetitions: Repetitions,
    /// Volumes between a stimulus and the response it drives.
    pub lag: usize,
    /// Amplitude of low-order cosine drifts added to every run, relative to
    /// the column signal standard deviation.
    pub drift: f64,
    pub latent_type: String,
    pub tr: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            grid: GridShape {
                width: 10,
                height: 10,
                spacing: 1.0,
            },
            n_train: 1200,
            n_test: 600,
            train_segments: 6,
            test_segments: 3,
            latent_dim: 16,
            smoothness: None,
            snr: 1.0,
            subjects: vec![
                SubjectSpec {
                    id: "s1".into(),
                    permutation: Permutation::Identity,
                },
                SubjectSpec {
                    id: "s2".into(),
                    permutation: Permutation::Rotation180,
                },
                SubjectSpec {
                    id: "s3".into(),
                    permutation: Permutation::Rotation180,
                },
            ],
            repetitions: Repetitions { train: 2, test: 10 },
            lag: 0,
            drift: 0.0,
            latent_type: "synthetic".into(),
            tr: 2.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.grid.width == 0 || self.grid.height == 0 || !(self.grid.spacing > 0.0) {
            return bad("synthetic grid needs positive dimensions and spacing".into());
        }
        if !(self.snr > 0.0) {
            return bad(format!("snr = {} must be > 0", self.snr));
        }
        if self.train_segments == 0 || self.test_segments == 0 {
            return bad("need at least one train and one test segment".into());
        }
        if self.n_train < 2 * self.train_segments || self.n_test < 2 * self.test_segments {
            return bad("every segment needs at least two frames".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if self.repetitions.train == 0 || self.repetitions.test == 0 {
            return bad("repetition counts must be >= 1".into());
        }
        if self.subjects.is_empty() {
            return bad("no subjects".into());
        }
        if let Some(l) = self.smoothness {
            if !(l > 0.0) {
                return bad("smoothness must be > 0".into());
            }
        }
        if !(self.drift >= 0.0) || !(self.tr > 0.0) {
            return bad("drift must be >= 0 and tr > 0".into());
        }
        Ok(())
    }

    fn segment_lengths(total: usize, segments: usize) -> Vec<usize> {
        (0..segments)
            .map(|k| total / segments + usize::from(k < total % segments))
            .collect()
    }
}

/// A generated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// Reference forward map (v × m).
    pub forward_map: Array2<f64>,
    /// Clean reference-space signal per segment, train segments first.
    pub clean_segments: Vec<Array2<f64>>,
    /// Subject id -> permutation (`subject column i` = `reference column perm[i]`).
    pub ground_truth_perms: BTreeMap<String, Vec<usize>>,
}

impl SynthDataset {
    /// Clean signal of one segment as seen by `subject`.
    pub fn clean_subject_segment(&self, subject: &str, segment: usize) -> Result<Array2<f64>> {
        let perm = self
            .ground_truth_perms
            .get(subject)
            .ok_or_else(|| Error::Argument(format!("unknown subject {subject}")))?;
        Ok(self.clean_segments[segment].select(Axis(1), perm))
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut seed::Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn permutation(kind: Permutation, v: usize, rng: &mut seed::Rng) -> Vec<usize> {
    match kind {
        Permutation::Identity => (0..v).collect(),
        Permutation::Rotation180 => (0..v).map(|i| rotate180(v, i)).collect(),
        Permutation::Random => {
            let mut p: Vec<usize> = (0..v).collect();
            p.shuffle(rng);
            p
        }
    }
}

/// Smooth forward map: squared-exponential kernel over lattice coordinates
/// applied to white noise.
fn forward_map(grid: &GridShape, m: usize, length: f64, rng: &mut seed::Rng) -> Array2<f64> {
    let v = grid.width * grid.height;
    let coords: Vec<(f64, f64)> = (0..v)
        .map(|i| ((i % grid.width) as f64 * grid.spacing, (i / grid.width) as f64 * grid.spacing))
        .collect();
    let kernel = Array2::from_shape_fn((v, v), |(i, j)| {
        let dx = coords[i].0 - coords[j].0;
        let dy = coords[i].1 - coords[j].1;
        (-(dx * dx + dy * dy) / (2.0 * length * length)).exp()
    });
    kernel.dot(&gaussian(v, m, rng))
}

pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let grid = spec.grid;
    let v = grid.width * grid.height;
    let m = spec.latent_dim;
    let geometry = grid_geometry(grid.width, grid.height, grid.spacing)?;
    let length = spec.smoothness.unwrap_or(2.0 * grid.spacing);
    let a = forward_map(&grid, m, length, &mut seed::rng(seed::derive(spec.seed, "forward_map")));

    let mut segments: Vec<(Split, usize, usize)> = Vec::new();
    for (k, len) in SynthSpec::segment_lengths(spec.n_train, spec.train_segments).into_iter().enumerate() {
        segments.push((Split::Train, k, len));
    }
    for (k, len) in SynthSpec::segment_lengths(spec.n_test, spec.test_segments).into_iter().enumerate() {
        segments.push((Split::Test, k, len));
    }

    let mut latent_rng = seed::rng(seed::derive(spec.seed, "latents"));
    let mut latents_by_segment = Vec::new();
    let mut clean_segments = Vec::new();
    for &(_, _, len) in &segments {
        // rows before the segment start drive the first `lag` responses
        let full = gaussian(len + spec.lag, m, &mut latent_rng);
        clean_segments.push(full.slice(s![..len, ..]).dot(&a.t()));
        latents_by_segment.push(full.slice(s![spec.lag.., ..]).to_owned());
    }

    let total_rows: usize = clean_segments.iter().map(|c| c.nrows()).sum();
    let power: Array1<f64> = clean_segments
        .iter()
        .map(|c| c.mapv(|x| x * x).sum_axis(Axis(0)))
        .fold(Array1::zeros(v), |acc, p| acc + p)
        / total_rows as f64;
    let noise_std = power.mapv(|p| (p / spec.snr).sqrt());
    let signal_std = power.mapv(f64::sqrt);

    let run_id = |split: Split, k: usize, r: usize| match split {
        Split::Train => format!("train-{k:02}-r{r}"),
        Split::Test => format!("test-{k:02}-r{r}"),
    };
    let reps = |split: Split| match split {
        Split::Train => spec.repetitions.train,
        Split::Test => spec.repetitions.test,
    };

    let mut ground_truth_perms = BTreeMap::new();
    let mut subjects = Vec::new();
    for subj in &spec.subjects {
        let perm = permutation(
            subj.permutation,
            v,
            &mut seed::rng(seed::derive(spec.seed, &format!("permutation/{}", subj.id))),
        );
        let mut runs = Vec::new();
        for (seg, &(split, k, len)) in segments.iter().enumerate() {
            let clean = clean_segments[seg].select(Axis(1), &perm);
            for r in 0..reps(split) {
                let id = run_id(split, k, r);
                let mut rng = seed::rng(seed::derive(spec.seed, &format!("noise/{}/{id}", subj.id)));
                let mut x = clean.clone();
                for (i, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
                    let sd = noise_std[perm[i]];
                    col.mapv_inplace(|c| c + sd * rng.sample::<f64, _>(StandardNormal));
                }
                if spec.drift > 0.0 {
                    let order = 3.min(len - 1).max(1);
                    let basis = cosine_basis(len, order).slice(s![.., 1..]).to_owned();
                    let coef = gaussian(order, v, &mut rng);
                    let mut drift = basis.dot(&coef);
                    for (i, mut col) in drift.axis_iter_mut(Axis(1)).enumerate() {
                        col *= spec.drift * signal_std[perm[i]];
                    }
                    x += &drift;
                }
                runs.push((
                    RunRecord {
                        id: id.clone(),
                        split,
                        features: String::new(),
                        rows: len,
                    },
                    x,
                ));
            }
        }
        ground_truth_perms.insert(subj.id.clone(), perm);
        subjects.push(SubjectData {
            id: subj.id.clone(),
            geometry: geometry.clone(),
            runs,
        });
    }

    let mut per_run = BTreeMap::new();
    let mut repetition_groups = Vec::new();
    for (seg, &(split, k, _)) in segments.iter().enumerate() {
        let group: Vec<String> = (0..reps(split)).map(|r| run_id(split, k, r)).collect();
        for id in &group {
            per_run.insert(id.clone(), latents_by_segment[seg].clone());
        }
        repetition_groups.push(group);
    }
    let mut latents = BTreeMap::new();
    latents.insert(spec.latent_type.clone(), per_run);

    Ok(SynthDataset {
        dataset: Dataset {
            tr: spec.tr,
            subjects,
            latents,
            repetition_groups,
            grid: Some(grid),
            ground_truth: ground_truth_perms.clone(),
        },
        forward_map: a,
        clean_segments,
        ground_truth_perms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignQuality {
    pub argmax_accuracy: f64,
    pub mass_on_truth: f64,
}

/// Compares a plan against a known vertex bijection `truth` (row `i` should
/// send its mass to column `truth[i]`).
pub fn oracle_align_quality(plan: &TransportPlan, truth: &[usize]) -> Result<AlignQuality> {
    let (r, c) = plan.shape();
    if r != c {
        return Err(Error::Argument(format!("alignment quality needs a square plan, got {r}x{c}")));
    }
    if truth.len() != r {
        return Err(Error::Argument(format!("truth has {} entries for {r} vertices", truth.len())));
    }
    let mut seen = vec![false; r];
    for &t in truth {
        if t >= r || std::mem::replace(&mut seen[t], true) {
            return Err(Error::Argument("truth is not a bijection".into()));
        }
    }
    let argmax = row_argmax(plan.plan());
    let hits = argmax.iter().zip(truth).filter(|(a, t)| a == t).count();
    let on_truth: f64 = truth.iter().enumerate().map(|(i, &j)| plan.plan()[[i, j]]).sum();
    Ok(AlignQuality {
        argmax_accuracy: hits as f64 / r as f64,
        mass_on_truth: on_truth / plan.mass(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrixio::FugwConfig;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            grid: GridShape {
                width: 4,
                height: 3,
                spacing: 1.0,
            },
            n_train: 40,
            n_test: 20,
            train_segments: 2,
            test_segments: 1,
            latent_dim: 3,
            repetitions: Repetitions { train: 2, test: 3 },
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noise_free_runs_agree() {
        let spec = SynthSpec {
            snr: 1e9,
            subjects: vec![SubjectSpec {
                id: "a".into(),
                permutation: Permutation::Identity,
            }],
            ..small_spec()
        };
        let ds = generate(&spec).unwrap().dataset;
        let s = ds.subject("a").unwrap();
        let r0 = s.run("train-00-r0").unwrap();
        let r1 = s.run("train-00-r1").unwrap();
        let scale = r0.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for (x, y) in r0.iter().zip(r1.iter()) {
            assert!((x - y).abs() <= 1e-3 * scale);
        }
    }

    #[test]
    fn rotation_columns_match_clean() {
        let spec = SynthSpec {
            snr: 1e12,
            ..small_spec()
        };
        let sd = generate(&spec).unwrap();
        let x = sd.dataset.subject("s2").unwrap().run("train-01-r0").unwrap();
        let clean = &sd.clean_segments[1];
        let v = 12;
        let scale = clean.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for i in 0..v {
            for t in 0..x.nrows() {
                assert!((x[[t, i]] - clean[[t, rotate180(v, i)]]).abs() < 1e-5 * scale);
            }
        }
    }

    #[test]
    fn averaging_repetitions_reduces_noise_power() {
        let spec = SynthSpec {
            grid: GridShape {
                width: 8,
                height: 8,
                spacing: 1.0,
            },
            n_train: 500,
            n_test: 10,
            train_segments: 1,
            test_segments: 1,
            repetitions: Repetitions { train: 10, test: 1 },
            subjects: vec![SubjectSpec {
                id: "a".into(),
                permutation: Permutation::Identity,
            }],
            ..SynthSpec::default()
        };
        let sd = generate(&spec).unwrap();
        let s = sd.dataset.subject("a").unwrap();
        let clean = &sd.clean_segments[0];
        let residual_power = |r: usize| {
            let mut avg = Array2::<f64>::zeros(clean.dim());
            for k in 0..r {
                avg += s.run(&format!("train-00-r{k}")).unwrap();
            }
            avg /= r as f64;
            (&avg - clean).mapv(|x| x * x).mean().unwrap()
        };
        let one = residual_power(1);
        for r in [2usize, 10] {
            let ratio = one / residual_power(r);
            assert!((ratio / r as f64 - 1.0).abs() < 0.1, "r = {r}: ratio {ratio}");
        }
    }

    #[test]
    fn bitwise_reproducible() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        for (sa, sb) in a.dataset.subjects.iter().zip(&b.dataset.subjects) {
            for ((_, xa), (_, xb)) in sa.runs.iter().zip(&sb.runs) {
                assert_eq!(xa, xb);
            }
        }
        let c = generate(&SynthSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a.dataset.subjects[0].runs[0].1, c.dataset.subjects[0].runs[0].1);
    }

    #[test]
    fn lag_shifts_responses() {
        let spec = SynthSpec {
            snr: 1e12,
            lag: 2,
            ..small_spec()
        };
        let sd = generate(&spec).unwrap();
        let y = sd.dataset.latent("synthetic", "train-00-r0").unwrap();
        let x = sd.dataset.subject("s1").unwrap().run("train-00-r0").unwrap();
        let expected = y.dot(&sd.forward_map.t());
        for t in 0..(x.nrows() - 2) {
            for i in 0..12 {
                assert!((x[[t + 2, i]] - expected[[t, i]]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn permutations_are_bijections() {
        let spec = SynthSpec {
            subjects: vec![SubjectSpec {
                id: "r".into(),
                permutation: Permutation::Random,
            }],
            ..small_spec()
        };
        let sd = generate(&spec).unwrap();
        let mut p = sd.ground_truth_perms["r"].clone();
        p.sort();
        assert_eq!(p, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn quality_of_known_plans() {
        let truth: Vec<usize> = (0..10).map(|i| rotate180(10, i)).collect();
        let exact = Array2::from_shape_fn((10, 10), |(i, j)| if truth[i] == j { 0.1 } else { 0.0 });
        let q = oracle_align_quality(&TransportPlan::from_matrix(exact, FugwConfig::default()).unwrap(), &truth).unwrap();
        assert_eq!(q.argmax_accuracy, 1.0);
        assert!((q.mass_on_truth - 1.0).abs() < 1e-12);
        let uniform = TransportPlan::from_matrix(Array2::from_elem((10, 10), 0.01), FugwConfig::default()).unwrap();
        let q = oracle_align_quality(&uniform, &truth).unwrap();
        assert!((q.mass_on_truth - 0.1).abs() < 1e-12);
        let rect = TransportPlan::from_matrix(Array2::from_elem((2, 3), 1.0), FugwConfig::default()).unwrap();
        assert!(oracle_align_quality(&rect, &[0, 1]).is_err());
    }

    #[test]
    fn save_and_reload() {
        let sd = generate(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = sd.dataset.save(dir.path()).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.subjects.len(), 3);
        assert_eq!(back.subjects[1].runs, sd.dataset.subjects[1].runs.iter().map(|(r, x)| {
            (RunRecord { features: format!("s2/{}.fmat", r.id), ..r.clone() }, x.clone())
        }).collect::<Vec<_>>());
        assert_eq!(back.ground_truth, sd.ground_truth_perms);
        assert_eq!(back.segments(Split::Train).len(), 2);
        assert_eq!(back.segments(Split::Test)[0].runs.len(), 3);
    }
}
