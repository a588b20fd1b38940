//! Ridge regression decoder from brain features to stimulus latents, and the
//! mean-predictor baseline.

use std::path::Path;

use nalgebra::Cholesky;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{from_na, to_na};
use crate::matrixio::{read_array, read_json, read_vector, write_array, write_json, write_vector};
use crate::preprocess::FirSpec;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub subjects: Vec<String>,
    pub rows: usize,
    /// Free-form alignment provenance, e.g. `none` or `functional(s1)`.
    pub alignment: String,
}

/// `Ŷ = X W + 1 bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub fir: FirSpec,
    pub alpha_ridge: f64,
    pub training_meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct ModelSidecar {
    fir: FirSpec,
    alpha_ridge: f64,
    training_meta: TrainingMeta,
    features: usize,
    latents: usize,
}

impl DecoderModel {
    pub fn with_fir(mut self, fir: FirSpec) -> Self {
        self.fir = fir;
        self
    }

    pub fn with_meta(mut self, meta: TrainingMeta) -> Self {
        self.training_meta = meta;
        self
    }

    pub fn num_features(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_latents(&self) -> usize {
        self.weights.ncols()
    }

    /// Writes `weights.fmat`, `bias.fmat` and `model.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_array(&self.weights, dir.join("weights.fmat"))?;
        write_vector(&self.bias, dir.join("bias.fmat"))?;
        write_json(
            &ModelSidecar {
                fir: self.fir,
                alpha_ridge: self.alpha_ridge,
                training_meta: self.training_meta.clone(),
                features: self.num_features(),
                latents: self.num_latents(),
            },
            dir.join("model.json"),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let weights = read_array(dir.join("weights.fmat"))?;
        let bias = read_vector(dir.join("bias.fmat"))?;
        let side: ModelSidecar = read_json(dir.join("model.json"))?;
        if weights.ncols() != bias.len() {
            return Err(Error::Shape(format!(
                "weights have {} columns but bias has {} entries",
                weights.ncols(),
                bias.len()
            )));
        }
        Ok(Self {
            weights,
            bias,
            fir: side.fir,
            alpha_ridge: side.alpha_ridge,
            training_meta: side.training_meta,
        })
    }
}

/// Centered ridge regression with an unpenalised intercept:
/// `(X_cᵀ X_c + alpha I) W = X_cᵀ Y_c`, `b = mean(Y) - mean(X) W`.
pub fn fit_ridge(x: &Array2<f64>, y: &Array2<f64>, alpha_ridge: f64) -> Result<DecoderModel> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::Shape(format!("X has {n} rows, Y has {}", y.nrows())));
    }
    if n < 2 {
        return Err(Error::Argument(format!("ridge needs >= 2 samples, got {n}")));
    }
    if !(alpha_ridge >= 0.0) || !alpha_ridge.is_finite() {
        return Err(Error::Argument(format!("alpha_ridge = {alpha_ridge} must be finite and >= 0")));
    }
    let x_mean = x.mean_axis(Axis(0)).unwrap();
    let y_mean = y.mean_axis(Axis(0)).unwrap();
    let xc = x - &x_mean;
    let yc = y - &y_mean;
    let mut gram = xc.t().dot(&xc);
    gram.diag_mut().mapv_inplace(|d| d + alpha_ridge);
    let rhs = xc.t().dot(&yc);
    let scale = gram.diag().fold(0.0f64, |m, &d| m.max(d));
    let chol = Cholesky::new(to_na(&gram)).ok_or_else(|| {
        Error::Singular(format!("X_cᵀX_c + {alpha_ridge} I is not positive definite"))
    })?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, &d| m.min(d * d));
    if !(min_pivot > 1e-12 * scale) {
        return Err(Error::Singular(format!(
            "X_cᵀX_c + {alpha_ridge} I is numerically rank deficient"
        )));
    }
    let weights = from_na(&chol.solve(&to_na(&rhs)));
    let bias = &y_mean - &x_mean.dot(&weights);
    if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Singular("ridge solution is not finite".into()));
    }
    Ok(DecoderModel {
        weights,
        bias,
        fir: FirSpec::identity(),
        alpha_ridge,
        training_meta: TrainingMeta {
            rows: n,
            ..TrainingMeta::default()
        },
    })
}

pub fn predict(model: &DecoderModel, x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.num_features() {
        return Err(Error::Shape(format!(
            "input has {} columns, model expects {}",
            x.ncols(),
            model.num_features()
        )));
    }
    Ok(x.dot(&model.weights) + &model.bias)
}

/// Predicts the training mean of `Y` for every input.
pub fn fit_dummy(y: &Array2<f64>, num_features: usize) -> Result<DecoderModel> {
    if y.nrows() == 0 {
        return Err(Error::Argument("dummy decoder needs at least one sample".into()));
    }
    Ok(DecoderModel {
        weights: Array2::zeros((num_features, y.ncols())),
        bias: y.mean_axis(Axis(0)).unwrap(),
        fir: FirSpec::identity(),
        alpha_ridge: f64::INFINITY,
        training_meta: TrainingMeta {
            rows: y.nrows(),
            alignment: "dummy".into(),
            ..TrainingMeta::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn random(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::seed::rng(seed);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exact_interpolation_without_penalty() {
        let x = random(10, 3, 1);
        let a = random(3, 2, 2);
        let c = array![0.5, -2.0];
        let y = x.dot(&a) + &c;
        let m = fit_ridge(&x, &y, 0.0).unwrap();
        for (w, t) in m.weights.iter().zip(a.iter()) {
            assert!((w - t).abs() < 1e-8);
        }
        for (b, t) in m.bias.iter().zip(c.iter()) {
            assert!((b - t).abs() < 1e-8);
        }
        let pred = predict(&m, &x).unwrap();
        for (p, t) in pred.iter().zip(y.iter()) {
            assert!((p - t).abs() < 1e-6);
        }
    }

    #[test]
    fn huge_penalty_predicts_means() {
        let x = random(20, 4, 3);
        let y = random(20, 3, 4);
        let m = fit_ridge(&x, &y, 1e12).unwrap();
        assert!(m.weights.iter().all(|w| w.abs() < 1e-6));
        let means = y.mean_axis(Axis(0)).unwrap();
        let pred = predict(&m, &x).unwrap();
        for row in pred.rows() {
            for (p, t) in row.iter().zip(means.iter()) {
                assert!((p - t).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn singular_without_penalty() {
        let mut x = random(10, 3, 5);
        let col = x.column(0).to_owned();
        x.column_mut(2).assign(&col);
        let y = random(10, 1, 6);
        assert!(matches!(fit_ridge(&x, &y, 0.0), Err(Error::Singular(_))));
        assert!(fit_ridge(&x, &y, 1.0).is_ok());
    }

    #[test]
    fn predict_shapes() {
        let m = fit_dummy(&array![[1.0, 2.0], [3.0, 4.0]], 3).unwrap();
        assert_eq!(m.bias, array![2.0, 3.0]);
        let p = predict(&m, &random(4, 3, 7)).unwrap();
        for row in p.rows() {
            assert_eq!(row.to_vec(), vec![2.0, 3.0]);
        }
        assert!(matches!(predict(&m, &random(4, 2, 7)), Err(Error::Shape(_))));
    }

    #[test]
    fn predict_matches_direct_product() {
        let x = random(6, 4, 8);
        let model = DecoderModel {
            weights: random(4, 3, 9),
            bias: array![0.1, 0.2, 0.3],
            fir: FirSpec::identity(),
            alpha_ridge: 1.0,
            training_meta: TrainingMeta::default(),
        };
        let p = predict(&model, &x).unwrap();
        for t in 0..6 {
            for k in 0..3 {
                let mut s = model.bias[k];
                for j in 0..4 {
                    s += x[[t, j]] * model.weights[[j, k]];
                }
                assert!((p[[t, k]] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_permutation_equivariance() {
        let x = random(30, 5, 10);
        let y = random(30, 2, 11);
        let m = fit_ridge(&x, &y, 3.0).unwrap();
        let order: Vec<usize> = (0..30).rev().collect();
        let xp = x.select(Axis(0), &order);
        let yp = y.select(Axis(0), &order);
        let mp = fit_ridge(&xp, &yp, 3.0).unwrap();
        for (a, b) in m.weights.iter().zip(mp.weights.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in m.bias.iter().zip(mp.bias.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_shrinks_weights_and_grows_residual() {
        let x = random(40, 6, 12);
        let y = random(40, 3, 13);
        let alphas = [0.0, 0.1, 1.0, 10.0, 100.0, 1e4];
        let mut last_norm = f64::INFINITY;
        let mut last_res = 0.0;
        for &a in &alphas {
            let m = fit_ridge(&x, &y, a).unwrap();
            let norm = m.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
            let res = (&predict(&m, &x).unwrap() - &y).iter().map(|r| r * r).sum::<f64>();
            assert!(norm <= last_norm + 1e-12);
            assert!(res >= last_res - 1e-12);
            last_norm = norm;
            last_res = res;
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = fit_ridge(&random(12, 3, 14), &random(12, 2, 15), 2.0).unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(DecoderModel::load(dir.path()).unwrap(), m);
    }
}
