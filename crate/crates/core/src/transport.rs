//! Barycentric projection of features through a transport plan.
//!
//! Reference vertex `j` receives the plan-weighted average of the left-out
//! vertices matched to it: `out[t][j] = sum_i P[i][j] X[t][i] / P2[j]`.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::fugw::TransportPlan;

/// Maps `x` (n × v_out) to the reference vertex space (n × v_ref).
///
/// Reference vertices with zero incoming mass are an error unless
/// `allow_dead_vertices` is set, in which case their columns are zero.
pub fn apply_plan(plan: &TransportPlan, x: &Array2<f64>, allow_dead_vertices: bool) -> Result<Array2<f64>> {
    let (v_out, _) = plan.shape();
    if x.ncols() != v_out {
        return Err(Error::Shape(format!(
            "features have {} columns, plan expects {v_out}",
            x.ncols()
        )));
    }
    let dead: Vec<usize> = plan
        .marginal_ref()
        .iter()
        .enumerate()
        .filter(|(_, &m)| !(m > 0.0))
        .map(|(j, _)| j)
        .collect();
    if !dead.is_empty() && !allow_dead_vertices {
        return Err(Error::DeadVertices { vertices: dead });
    }
    let mut out = x.dot(plan.plan());
    for (mut col, &m) in out.axis_iter_mut(Axis(1)).zip(plan.marginal_ref()) {
        if m > 0.0 {
            col /= m;
        } else {
            col.fill(0.0);
        }
    }
    Ok(out)
}

/// Transports a per-vertex RGB colouring (v_out × 3, entries in [0, 1]).
pub fn transport_colormap(plan: &TransportPlan, rgb: &Array2<f64>, allow_dead_vertices: bool) -> Result<Array2<f64>> {
    if rgb.ncols() != 3 {
        return Err(Error::Shape(format!("colormap must have 3 columns, got {}", rgb.ncols())));
    }
    if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Argument("colormap entries must lie in [0, 1]".into()));
    }
    let moved = apply_plan(plan, &rgb.t().to_owned(), allow_dead_vertices)?;
    Ok(moved.t().mapv(|c| c.clamp(0.0, 1.0)))
}
