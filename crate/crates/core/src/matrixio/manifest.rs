//! Dataset manifests (`manifest.json`) and their in-memory counterpart.
//!
//! A manifest lists subjects with their geometry files and per-run feature
//! files, the latent files per run keyed by latent type, and repetition
//! groups: sets of run ids that showed identical stimuli. Paths are relative
//! to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::fmat::{read_array, read_vector, write_array, write_vector};
use crate::error::{Error, Result};
use crate::geometry::Geometry;

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryFiles {
    pub distances: String,
    pub weights: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub id: String,
    pub split: Split,
    pub features: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub id: String,
    pub geometry: GeometryFiles,
    pub runs: Vec<RunRecord>,
}

/// Lattice layout of the vertices, when the geometry is a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    pub width: usize,
    pub height: usize,
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub tr: Option<f64>,
    pub subjects: Vec<SubjectRecord>,
    /// latent type -> run id -> file
    pub latents: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    pub repetition_groups: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridShape>,
    /// subject id -> vertex permutation onto the reference lattice
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ground_truth: BTreeMap<String, Vec<usize>>,
}

impl DatasetManifest {
    /// Structural checks that do not touch the files.
    pub fn validate_structure(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.subjects {
            if !seen.insert(&s.id) {
                return Err(Error::Validation(format!("duplicate subject id {}", s.id)));
            }
            let mut runs = BTreeSet::new();
            for r in &s.runs {
                if !runs.insert(&r.id) {
                    return Err(Error::Validation(format!("subject {}: duplicate run id {}", s.id, r.id)));
                }
            }
            for group in &self.repetition_groups {
                let rows: BTreeSet<usize> = s
                    .runs
                    .iter()
                    .filter(|r| group.contains(&r.id))
                    .map(|r| r.rows)
                    .collect();
                if rows.len() > 1 {
                    return Err(Error::Validation(format!(
                        "subject {}: repetition group {:?} has mismatched run lengths {:?}",
                        s.id, group, rows
                    )));
                }
                let splits: BTreeSet<Split> = s
                    .runs
                    .iter()
                    .filter(|r| group.contains(&r.id))
                    .map(|r| r.split)
                    .collect();
                if splits.len() > 1 {
                    return Err(Error::Validation(format!(
                        "repetition group {group:?} mixes train and test runs"
                    )));
                }
            }
        }
        let mut grouped = BTreeSet::new();
        for group in &self.repetition_groups {
            for id in group {
                if !grouped.insert(id) {
                    return Err(Error::Validation(format!("run {id} appears in two repetition groups")));
                }
            }
        }
        Ok(())
    }

    /// Full validation: structure, then every referenced file is parsed and
    /// its shape checked against the manifest.
    pub fn validate(&self, base: &Path) -> Result<()> {
        Dataset::from_manifest(self.clone(), base).map(|_| ())
    }
}

#[derive(Debug, Clone)]
pub struct SubjectData {
    pub id: String,
    pub geometry: Geometry,
    pub runs: Vec<(RunRecord, Array2<f64>)>,
}

impl SubjectData {
    pub fn run(&self, id: &str) -> Option<&Array2<f64>> {
        self.runs.iter().find(|(r, _)| r.id == id).map(|(_, x)| x)
    }
}

/// A run set that showed one stimulus sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub split: Split,
    pub runs: Vec<String>,
}

/// Fully loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub tr: f64,
    pub subjects: Vec<SubjectData>,
    pub latents: BTreeMap<String, BTreeMap<String, Array2<f64>>>,
    pub repetition_groups: Vec<Vec<String>>,
    pub grid: Option<GridShape>,
    pub ground_truth: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest: DatasetManifest = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(manifest, base)
    }

    pub fn from_manifest(manifest: DatasetManifest, base: &Path) -> Result<Self> {
        manifest.validate_structure()?;
        let resolve = |p: &str| -> PathBuf { base.join(p) };
        let mut subjects = Vec::with_capacity(manifest.subjects.len());
        for s in &manifest.subjects {
            let d = read_array(resolve(&s.geometry.distances))?;
            let w = read_vector(resolve(&s.geometry.weights))?;
            let geometry = Geometry::new(d, w)
                .map_err(|e| e.in_stage(format!("geometry of subject {}", s.id)))?;
            let mut runs = Vec::with_capacity(s.runs.len());
            for r in &s.runs {
                let x = read_array(resolve(&r.features))?;
                if x.nrows() != r.rows || x.ncols() != geometry.num_vertices() {
                    return Err(Error::Validation(format!(
                        "subject {} run {}: features are {}x{}, manifest expects {}x{}",
                        s.id,
                        r.id,
                        x.nrows(),
                        x.ncols(),
                        r.rows,
                        geometry.num_vertices()
                    )));
                }
                runs.push((r.clone(), x));
            }
            subjects.push(SubjectData {
                id: s.id.clone(),
                geometry,
                runs,
            });
        }
        let mut latents = BTreeMap::new();
        for (kind, files) in &manifest.latents {
            let mut per_run = BTreeMap::new();
            for (run, file) in files {
                per_run.insert(run.clone(), read_array(resolve(file))?);
            }
            latents.insert(kind.clone(), per_run);
        }
        let ds = Dataset {
            tr: manifest.tr.unwrap_or(2.0),
            subjects,
            latents,
            repetition_groups: manifest.repetition_groups,
            grid: manifest.grid,
            ground_truth: manifest.ground_truth,
        };
        ds.check_latent_rows()?;
        Ok(ds)
    }

    fn check_latent_rows(&self) -> Result<()> {
        for (kind, per_run) in &self.latents {
            for s in &self.subjects {
                for (r, x) in &s.runs {
                    let y = per_run.get(&r.id).ok_or_else(|| {
                        Error::Validation(format!("latent type {kind} has no file for run {}", r.id))
                    })?;
                    if y.nrows() != x.nrows() {
                        return Err(Error::Validation(format!(
                            "run {}: {} feature rows but {} latent rows ({kind})",
                            r.id,
                            x.nrows(),
                            y.nrows()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the dataset as a manifest plus FMAT tree under `dir` and
    /// returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let mut subjects = Vec::new();
        for s in &self.subjects {
            let geometry = GeometryFiles {
                distances: format!("{}/distances.fmat", s.id),
                weights: format!("{}/weights.fmat", s.id),
            };
            write_array(s.geometry.distances(), dir.join(&geometry.distances))?;
            write_vector(s.geometry.weights(), dir.join(&geometry.weights))?;
            let mut runs = Vec::new();
            for (r, x) in &s.runs {
                let features = format!("{}/{}.fmat", s.id, r.id);
                write_array(x, dir.join(&features))?;
                runs.push(RunRecord {
                    id: r.id.clone(),
                    split: r.split,
                    features,
                    rows: x.nrows(),
                });
            }
            subjects.push(SubjectRecord {
                id: s.id.clone(),
                geometry,
                runs,
            });
        }
        let mut latents = BTreeMap::new();
        for (kind, per_run) in &self.latents {
            let mut files = BTreeMap::new();
            for (run, y) in per_run {
                let file = format!("latents/{kind}/{run}.fmat");
                write_array(y, dir.join(&file))?;
                files.insert(run.clone(), file);
            }
            latents.insert(kind.clone(), files);
        }
        let manifest = DatasetManifest {
            tr: Some(self.tr),
            subjects,
            latents,
            repetition_groups: self.repetition_groups.clone(),
            grid: self.grid,
            ground_truth: self.ground_truth.clone(),
        };
        let path = dir.join("manifest.json");
        write_json(&manifest, &path)?;
        Ok(path)
    }

    pub fn subject(&self, id: &str) -> Result<&SubjectData> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Argument(format!("unknown subject {id}")))
    }

    pub fn latent(&self, kind: &str, run: &str) -> Result<&Array2<f64>> {
        self.latents
            .get(kind)
            .ok_or_else(|| Error::Argument(format!("unknown latent type {kind}")))?
            .get(run)
            .ok_or_else(|| Error::Argument(format!("latent type {kind} has no run {run}")))
    }

    /// Stimulus segments of one split, in the order their first run appears
    /// in the first subject's run list. Runs outside any repetition group
    /// form singleton segments.
    pub fn segments(&self, split: Split) -> Vec<Segment> {
        let Some(first) = self.subjects.first() else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut used = BTreeSet::new();
        for (r, _) in &first.runs {
            if r.split != split || used.contains(&r.id) {
                continue;
            }
            let runs = self
                .repetition_groups
                .iter()
                .find(|g| g.contains(&r.id))
                .cloned()
                .unwrap_or_else(|| vec![r.id.clone()]);
            used.extend(runs.iter().cloned());
            out.push(Segment { split, runs });
        }
        out
    }
}
