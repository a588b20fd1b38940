//! Per-run signal cleaning and FIR feature construction.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{from_na, to_na};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Average,
    Stack,
}

/// Lag and window of the FIR model, in brain volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FirSpec {
    pub lag: usize,
    pub window: usize,
    pub aggregation: Aggregation,
}

impl Default for FirSpec {
    /// Lag 2, window 2, averaged.
    fn default() -> Self {
        Self {
            lag: 2,
            window: 2,
            aggregation: Aggregation::Average,
        }
    }
}

impl FirSpec {
    pub fn new(lag: usize, window: usize, aggregation: Aggregation) -> Self {
        Self { lag, window, aggregation }
    }

    /// lag 0, window 1.
    pub fn identity() -> Self {
        Self::new(0, 1, Aggregation::Average)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Validation("fir.window must be >= 1".into()));
        }
        Ok(())
    }

    /// Output rows for an `n`-row run, or `None` when the run is too short.
    pub fn output_rows(&self, n: usize) -> Option<usize> {
        (n >= self.lag + self.window).then(|| n - self.lag - self.window + 1)
    }

    pub fn output_cols(&self, v: usize) -> usize {
        match self.aggregation {
            Aggregation::Average => v,
            Aggregation::Stack => v * self.window,
        }
    }
}

/// Discrete cosine drift basis with half-sample phase: a constant column
/// followed by `cos(pi k (t + 0.5) / n)` for `k = 1..=order`.
pub fn cosine_basis(n: usize, order: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, order + 1), |(t, k)| {
        if k == 0 {
            1.0
        } else {
            (std::f64::consts::PI * k as f64 * (t as f64 + 0.5) / n as f64).cos()
        }
    })
}

/// Residual of every column after least-squares projection onto the
/// cosine drift basis of the given order.
pub fn detrend_cosine(run: &Array2<f64>, order: usize) -> Result<Array2<f64>> {
    let n = run.nrows();
    if order == 0 {
        return Err(Error::Argument("drift order must be >= 1".into()));
    }
    if order >= n {
        return Err(Error::Rank(format!("drift order {order} needs more than {n} frames")));
    }
    let basis = to_na(&cosine_basis(n, order));
    let q = basis.qr().q();
    let x = to_na(run);
    let residual = &x - &q * (q.transpose() * &x);
    Ok(from_na(&residual))
}

/// Centers each column and scales it to unit population standard deviation.
/// Constant columns become zeros.
pub fn standardize(run: &Array2<f64>) -> Result<Array2<f64>> {
    let n = run.nrows();
    if n < 2 {
        return Err(Error::Argument(format!("standardize needs >= 2 frames, got {n}")));
    }
    let mut out = run.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / n as f64;
        col.mapv_inplace(|x| x - mean);
        let var = col.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let std = var.sqrt();
        // Relative threshold: a constant column leaves only rounding residue.
        if std <= 1e-12 * mean.abs().max(1.0) {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|x| x / std);
            // second centering pass removes the rounding left by the division
            let m2 = col.sum() / n as f64;
            col.mapv_inplace(|x| x - m2);
        }
    }
    Ok(out)
}

/// Row `t` of the output aggregates run rows `t + lag .. t + lag + window`.
pub fn fir_features(run: &Array2<f64>, spec: &FirSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let (n, v) = run.dim();
    let rows = spec.output_rows(n).ok_or_else(|| {
        Error::Length(format!(
            "run of {n} frames is shorter than lag {} + window {}",
            spec.lag, spec.window
        ))
    })?;
    let mut out = Array2::<f64>::zeros((rows, spec.output_cols(v)));
    for t in 0..rows {
        let block = run.slice(s![t + spec.lag..t + spec.lag + spec.window, ..]);
        match spec.aggregation {
            Aggregation::Average => {
                let mut row = out.row_mut(t);
                for r in block.rows() {
                    row += &r;
                }
                row /= spec.window as f64;
            }
            Aggregation::Stack => {
                for (w, r) in block.rows().into_iter().enumerate() {
                    out.slice_mut(s![t, w * v..(w + 1) * v]).assign(&r);
                }
            }
        }
    }
    Ok(out)
}
