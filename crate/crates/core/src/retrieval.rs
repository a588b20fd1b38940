//! Cosine-similarity retrieval metrics.
//!
//! For a prediction `ŷ` with ground truth `y` and a retrieval set `K` of
//! negatives, the rank is the number of negatives strictly more similar to
//! `ŷ` than `y` is, and the relative rank divides it by `|K|`. The median
//! relative rank (MR) over test samples is reported ×100, so chance is 50.
//! Top-k accuracy asks whether the truth is among the `k` most similar of
//! the `|K| + 1` candidates (truth first, ties broken by candidate index).

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrixio::RetrievalConfig;
use crate::seed;
use crate::stats::{mean, median, sem};

pub const CANDIDATE_RULE: &str =
    "candidates = truth + set_size negatives drawn without replacement from the pool, excluding the truth's own pool row";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Mean over retrieval sets of the per-set median relative rank, ×100.
    pub median_relative_rank: f64,
    /// Mean over retrieval sets of the per-set top-k accuracy, in percent.
    pub topk_accuracy: f64,
    pub k: usize,
    pub set_size: usize,
    pub num_sets: usize,
    pub seed: u64,
    pub num_samples: usize,
    pub per_set_mr: Vec<f64>,
    pub per_set_topk: Vec<f64>,
    pub sem_mr: f64,
    pub sem_topk: f64,
    pub candidate_rule: String,
}

impl RetrievalReport {
    pub fn write_per_set_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("set,median_relative_rank,topk_accuracy\n");
        for (i, (mr, acc)) in self.per_set_mr.iter().zip(&self.per_set_topk).enumerate() {
            writeln!(out, "{i},{mr},{acc}").unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn norm(a: ArrayView1<'_, f64>) -> f64 {
    a.dot(&a).sqrt()
}

pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Argument("cosine similarity of a zero vector".into()));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Fraction of negatives strictly more similar to `pred` than `truth` is.
pub fn relative_rank(pred: ArrayView1<'_, f64>, truth: ArrayView1<'_, f64>, negatives: &[ArrayView1<'_, f64>]) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Argument("retrieval set is empty".into()));
    }
    let s = cosine_similarity(pred, truth)?;
    let mut above = 0usize;
    for neg in negatives {
        if cosine_similarity(pred, *neg)? > s {
            above += 1;
        }
    }
    Ok(above as f64 / negatives.len() as f64)
}

fn normalized_rows(m: &Array2<f64>, what: &str) -> Result<Array2<f64>> {
    let mut out = m.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = norm(row.view());
        if n == 0.0 {
            return Err(Error::Argument(format!("{what} row {i} is a zero vector")));
        }
        row /= n;
    }
    Ok(out)
}

/// Retrieval metrics over `cfg.num_sets` seeded draws.
///
/// `truth_index[t]`, when given, is the pool row holding `truths[t]`; that row
/// is never drawn as a negative for sample `t`. The usual call passes the
/// test latents as both `truths` and `pool` with `truth_index = 0..n`.
pub fn evaluate_retrieval(
    preds: &Array2<f64>,
    truths: &Array2<f64>,
    pool: &Array2<f64>,
    truth_index: Option<&[usize]>,
    cfg: &RetrievalConfig,
) -> Result<RetrievalReport> {
    cfg.validate()?;
    let (n, m) = preds.dim();
    if n == 0 {
        return Err(Error::Argument("no predictions to evaluate".into()));
    }
    if truths.dim() != (n, m) || pool.ncols() != m {
        return Err(Error::Shape(format!(
            "predictions {:?}, truths {:?}, pool {:?}",
            preds.dim(),
            truths.dim(),
            pool.dim()
        )));
    }
    let pool_size = pool.nrows();
    let needed = cfg.set_size + usize::from(truth_index.is_some());
    if pool_size < needed {
        return Err(Error::Argument(format!(
            "retrieval pool has {pool_size} rows, {needed} needed for sets of {} negatives",
            cfg.set_size
        )));
    }
    if let Some(idx) = truth_index {
        if idx.len() != n || idx.iter().any(|&i| i >= pool_size) {
            return Err(Error::Argument("truth_index must map every sample to a pool row".into()));
        }
    }
    let p = normalized_rows(preds, "prediction")?;
    let pool_n = normalized_rows(pool, "pool")?;
    let sims = p.dot(&pool_n.t());
    let truth_sims: Vec<f64> = match truth_index {
        Some(idx) => (0..n).map(|t| sims[[t, idx[t]]]).collect(),
        None => {
            let tr = normalized_rows(truths, "truth")?;
            (0..n).map(|t| p.row(t).dot(&tr.row(t))).collect()
        }
    };

    let per_set: Vec<(f64, f64)> = (0..cfg.num_sets)
        .into_par_iter()
        .map(|s| {
            let mut rng = seed::rng(cfg.seed.wrapping_add(s as u64));
            let drawn = index::sample(&mut rng, pool_size, needed).into_vec();
            let mut ranks = Vec::with_capacity(n);
            let mut hits = 0usize;
            for t in 0..n {
                let own = truth_index.map(|idx| idx[t]);
                let mut skipped = false;
                let mut above = 0usize;
                let mut used = 0usize;
                for &j in &drawn {
                    if used == cfg.set_size {
                        break;
                    }
                    if Some(j) == own && !skipped {
                        skipped = true;
                        continue;
                    }
                    used += 1;
                    if sims[[t, j]] > truth_sims[t] {
                        above += 1;
                    }
                }
                ranks.push(above as f64 / cfg.set_size as f64);
                if above < cfg.top_k {
                    hits += 1;
                }
            }
            (100.0 * median(&ranks), 100.0 * hits as f64 / n as f64)
        })
        .collect();
    let per_set_mr: Vec<f64> = per_set.iter().map(|x| x.0).collect();
    let per_set_topk: Vec<f64> = per_set.iter().map(|x| x.1).collect();
    Ok(RetrievalReport {
        median_relative_rank: mean(&per_set_mr),
        topk_accuracy: mean(&per_set_topk),
        k: cfg.top_k,
        set_size: cfg.set_size,
        num_sets: cfg.num_sets,
        seed: cfg.seed,
        num_samples: n,
        sem_mr: sem(&per_set_mr),
        sem_topk: sem(&per_set_topk),
        per_set_mr,
        per_set_topk,
        candidate_rule: CANDIDATE_RULE.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed);
        Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn cosine_examples() {
        let a = array![1.0, 2.0, 3.0];
        assert!((cosine_similarity(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(), 0.0);
        assert_eq!(cosine_similarity(array![1.0, 0.0].view(), array![-1.0, 0.0].view()).unwrap(), -1.0);
        assert!(matches!(
            cosine_similarity(array![0.0, 0.0].view(), a.slice(ndarray::s![..2])),
            Err(Error::Argument(_))
        ));
    }

    /// Unit vector at angle `theta` has cosine `cos(theta)` with e1.
    fn at_cos(c: f64) -> Array1<f64> {
        array![c, (1.0 - c * c).sqrt()]
    }

    #[test]
    fn relative_rank_examples() {
        let pred = array![1.0, 0.0];
        let truth = at_cos(0.9);
        let negs = [at_cos(0.95), at_cos(0.5), at_cos(0.3)];
        let views: Vec<_> = negs.iter().map(|v| v.view()).collect();
        assert!((relative_rank(pred.view(), truth.view(), &views).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let views: Vec<_> = negs[1..].iter().map(|v| v.view()).collect();
        assert_eq!(relative_rank(pred.view(), truth.view(), &views).unwrap(), 0.0);
        assert!(relative_rank(pred.view(), truth.view(), &[]).is_err());
    }

    #[test]
    fn relative_rank_matches_sort_oracle() {
        let data = gaussian(22, 6, 4);
        let pred = data.row(0);
        let truth = data.row(1);
        let negs: Vec<_> = (2..22).map(|i| data.row(i)).collect();
        let rr = relative_rank(pred, truth, &negs).unwrap();
        // sort all candidates by similarity descending, truth first among equals
        let mut cands: Vec<(f64, bool)> = negs.iter().map(|n| (cosine_similarity(pred, *n).unwrap(), false)).collect();
        cands.push((cosine_similarity(pred, truth).unwrap(), true));
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        let pos = cands.iter().position(|c| c.1).unwrap();
        assert_eq!(rr, pos as f64 / 20.0);
    }

    #[test]
    fn perfect_predictions() {
        let y = gaussian(60, 8, 5);
        let idx: Vec<usize> = (0..60).collect();
        let cfg = RetrievalConfig {
            set_size: 40,
            num_sets: 5,
            top_k: 5,
            seed: 1,
        };
        let r = evaluate_retrieval(&y, &y, &y, Some(&idx), &cfg).unwrap();
        assert_eq!(r.median_relative_rank, 0.0);
        assert_eq!(r.topk_accuracy, 100.0);
        assert_eq!(r.per_set_mr.len(), 5);
    }

    #[test]
    fn pool_too_small() {
        let y = gaussian(10, 3, 6);
        let idx: Vec<usize> = (0..10).collect();
        let cfg = RetrievalConfig {
            set_size: 10,
            ..RetrievalConfig::default()
        };
        assert!(matches!(evaluate_retrieval(&y, &y, &y, Some(&idx), &cfg), Err(Error::Argument(_))));
        assert!(evaluate_retrieval(&y, &y, &y, None, &cfg).is_ok());
    }

    /// Three samples, pool of four, sets of two negatives: enumerate by hand.
    #[test]
    fn hand_enumerated_medians() {
        // pool rows on the unit circle at angles 0, 90, 180, 270 degrees
        let pool = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        let truths = pool.slice(ndarray::s![0..3, ..]).to_owned();
        // predictions: close to their truth, close to row 3, close to row 1
        let preds = array![[1.0, 0.1], [0.1, -1.0], [0.1, 1.0]];
        let idx = [0usize, 1, 2];
        let cfg = RetrievalConfig {
            set_size: 2,
            num_sets: 4,
            top_k: 1,
            seed: 11,
        };
        let r = evaluate_retrieval(&preds, &truths, &pool, Some(&idx), &cfg).unwrap();
        for s in 0..4 {
            let mut rng = seed::rng(11 + s as u64);
            let drawn = index::sample(&mut rng, 4, 3).into_vec();
            let mut ranks = Vec::new();
            let mut hits = 0;
            for t in 0..3 {
                let negs: Vec<usize> = {
                    let mut v: Vec<usize> = drawn.iter().copied().filter(|&j| j != t).collect();
                    v.truncate(2);
                    v
                };
                let st = cosine_similarity(preds.row(t), pool.row(t)).unwrap();
                let above = negs
                    .iter()
                    .filter(|&&j| cosine_similarity(preds.row(t), pool.row(j)).unwrap() > st)
                    .count();
                ranks.push(above as f64 / 2.0);
                if above < 1 {
                    hits += 1;
                }
            }
            assert_eq!(r.per_set_mr[s], 100.0 * median(&ranks));
            assert_eq!(r.per_set_topk[s], 100.0 * hits as f64 / 3.0);
        }
    }

    #[test]
    fn topk_non_decreasing_in_k() {
        let truths = gaussian(80, 5, 7);
        let preds = &truths + &gaussian(80, 5, 8).mapv(|x| 2.0 * x);
        let idx: Vec<usize> = (0..80).collect();
        let mut last = -1.0;
        for k in 1..10 {
            let cfg = RetrievalConfig {
                set_size: 50,
                num_sets: 6,
                top_k: k,
                seed: 3,
            };
            let r = evaluate_retrieval(&preds, &truths, &truths, Some(&idx), &cfg).unwrap();
            for s in 0..6 {
                assert!(r.per_set_topk[s] >= 0.0 && r.per_set_topk[s] <= 100.0);
            }
            assert!(r.topk_accuracy >= last);
            last = r.topk_accuracy;
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let truths = gaussian(70, 4, 9);
        let preds = gaussian(70, 4, 10);
        let idx: Vec<usize> = (0..70).collect();
        let cfg = RetrievalConfig {
            set_size: 60,
            num_sets: 7,
            top_k: 5,
            seed: 42,
        };
        let a = evaluate_retrieval(&preds, &truths, &truths, Some(&idx), &cfg).unwrap();
        let b = evaluate_retrieval(&preds, &truths, &truths, Some(&idx), &cfg).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn rank_is_scale_invariant(seed in any::<u64>(), c in 1e-3f64..1e3) {
            let data = gaussian(12, 5, seed);
            let pred = data.row(0).to_owned();
            let scaled = &pred * c;
            let negs: Vec<_> = (2..12).map(|i| data.row(i)).collect();
            prop_assert_eq!(
                relative_rank(pred.view(), data.row(1), &negs).unwrap(),
                relative_rank(scaled.view(), data.row(1), &negs).unwrap()
            );
        }
    }
}
