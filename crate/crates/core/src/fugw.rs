//! Fused unbalanced Gromov-Wasserstein (FUGW) alignment.
//!
//! The loss of a coupling `P` (v_out × v_ref) is
//!
//! ```text
//! (1 - alpha) * sum_ij ||X_out[:, i] - X_ref[:, j]||^2 P_ij
//!   + alpha   * sum_ijkl |D_out[i, k] - D_ref[j, l]|^2 P_ij P_kl
//!   + rho     * (KL(P1 ⊗ P1 | w_out ⊗ w_out) + KL(P2 ⊗ P2 | w_ref ⊗ w_ref))
//!   + epsilon * H(P)
//! ```
//!
//! with `KL(a | b) = sum a log(a / b) - sum a + sum b` and
//! `H(P) = sum P (log P - 1)`.
//!
//! The solver is a block coordinate descent over two plans `P` and `Q`. Each
//! step fixes one plan, linearises the quadratic term around it and solves
//! the resulting unbalanced entropic problem with log-domain Sinkhorn
//! iterations. The marginal and entropic penalties are scaled by the mass of
//! the fixed plan and the new plan is rescaled so both plans carry the same
//! mass. The returned plan is `(P + Q) / 2`.

use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::matrixio::{read_array, read_json, write_array, write_json, FugwConfig};

pub const ENTROPY_CONVENTION: &str = "H(P) = sum_ij P_ij (log P_ij - 1), 0 log 0 = 0";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub wasserstein: f64,
    pub gromov: f64,
    pub marginal_kl: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Loss of the averaged plan after a BCD iteration (0 = initial product
/// coupling). `normalized` uses the cost scaling the solver optimises;
/// `raw` is the loss in the input units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub raw: LossTerms,
    pub normalized: LossTerms,
}

/// A nonnegative coupling with its cached marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    plan: Array2<f64>,
    marginal_out: Array1<f64>,
    marginal_ref: Array1<f64>,
    pub loss_trace: Vec<LossRecord>,
    pub config: FugwConfig,
}

impl TransportPlan {
    /// Wraps a coupling matrix, checking entries and computing marginals.
    pub fn from_matrix(plan: Array2<f64>, config: FugwConfig) -> Result<Self> {
        if let Some(bad) = plan.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Validation(format!("plan entry {bad} is not finite and non-negative")));
        }
        let marginal_out = plan.sum_axis(Axis(1));
        let marginal_ref = plan.sum_axis(Axis(0));
        if !(marginal_out.sum() > 0.0) {
            return Err(Error::Validation("plan has zero total mass".into()));
        }
        Ok(Self {
            plan,
            marginal_out,
            marginal_ref,
            loss_trace: Vec::new(),
            config,
        })
    }

    pub fn plan(&self) -> &Array2<f64> {
        &self.plan
    }

    pub fn marginal_out(&self) -> &Array1<f64> {
        &self.marginal_out
    }

    pub fn marginal_ref(&self) -> &Array1<f64> {
        &self.marginal_ref
    }

    pub fn mass(&self) -> f64 {
        self.plan.sum()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.plan.dim()
    }

    /// The plan read in the opposite direction (reference -> left-out).
    pub fn transposed(&self) -> Self {
        Self {
            plan: self.plan.t().to_owned(),
            marginal_out: self.marginal_ref.clone(),
            marginal_ref: self.marginal_out.clone(),
            loss_trace: self.loss_trace.clone(),
            config: self.config.clone(),
        }
    }

    /// Index of the largest entry of each row, ties toward the lowest index.
    pub fn row_argmax(&self) -> Vec<usize> {
        row_argmax(&self.plan)
    }

    /// Writes the plan to `path` (FMAT) and a JSON sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>, diagnostics: Option<PlanDiagnostics>) -> Result<()> {
        let path = path.as_ref();
        write_array(&self.plan, path)?;
        let sidecar = PlanSidecar {
            v_out: self.plan.nrows(),
            v_ref: self.plan.ncols(),
            mass: self.mass(),
            config: self.config.clone(),
            loss_trace: self.loss_trace.clone(),
            diagnostics,
            entropy_convention: ENTROPY_CONVENTION.to_string(),
            solver_marginal_penalty: "per-marginal KL(P_#k | w) scaled by the fixed plan's mass".into(),
        };
        write_json(&sidecar, sidecar_path(path))
    }

    /// Reads a plan; the sidecar is optional.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let plan = read_array(path)?;
        let side = sidecar_path(path);
        let (config, trace) = if side.exists() {
            let s: PlanSidecar = read_json(&side)?;
            (s.config, s.loss_trace)
        } else {
            (FugwConfig::default(), Vec::new())
        };
        let mut p = Self::from_matrix(plan, config)?;
        p.loss_trace = trace;
        Ok(p)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanSidecar {
    pub v_out: usize,
    pub v_ref: usize,
    pub mass: f64,
    pub config: FugwConfig,
    pub loss_trace: Vec<LossRecord>,
    pub diagnostics: Option<PlanDiagnostics>,
    pub entropy_convention: String,
    pub solver_marginal_penalty: String,
}

pub(crate) fn row_argmax(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &x) in r.iter().enumerate() {
                if x > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Inputs of one alignment. Features are time-locked: row `t` of both
/// matrices corresponds to the same stimulus.
#[derive(Debug, Clone, Copy)]
pub struct FugwProblem<'a> {
    pub x_out: &'a Array2<f64>,
    pub x_ref: &'a Array2<f64>,
    pub geom_out: &'a Geometry,
    pub geom_ref: &'a Geometry,
    pub config: &'a FugwConfig,
}

impl FugwProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.x_out.nrows() != self.x_ref.nrows() {
            return Err(Error::Shape(format!(
                "left-out features have {} rows, reference features {}",
                self.x_out.nrows(),
                self.x_ref.nrows()
            )));
        }
        if self.x_out.ncols() != self.geom_out.num_vertices() || self.x_ref.ncols() != self.geom_ref.num_vertices() {
            return Err(Error::Shape(format!(
                "features have {} / {} columns but geometries have {} / {} vertices",
                self.x_out.ncols(),
                self.x_ref.ncols(),
                self.geom_out.num_vertices(),
                self.geom_ref.num_vertices()
            )));
        }
        Ok(())
    }
}

/// `C[i][j]`: squared Euclidean distance between column `i` of `x_out` and
/// column `j` of `x_ref`.
pub fn feature_cost(x_out: &Array2<f64>, x_ref: &Array2<f64>) -> Result<Array2<f64>> {
    if x_out.nrows() != x_ref.nrows() {
        return Err(Error::Shape(format!(
            "feature_cost: {} rows vs {} rows",
            x_out.nrows(),
            x_ref.nrows()
        )));
    }
    let a = x_out.t().as_standard_layout().to_owned();
    let b = x_ref.t().as_standard_layout().to_owned();
    let mut cost = Array2::<f64>::zeros((a.nrows(), b.nrows()));
    Zip::indexed(&mut cost).for_each(|(i, j), c| {
        let (ra, rb) = (a.row(i), b.row(j));
        let (ra, rb) = (ra.as_slice().unwrap(), rb.as_slice().unwrap());
        *c = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
    });
    Ok(cost)
}

fn check_conformable(d_out: &Array2<f64>, d_ref: &Array2<f64>, q: &Array2<f64>) -> Result<()> {
    if !d_out.is_square() || !d_ref.is_square() || q.dim() != (d_out.nrows(), d_ref.nrows()) {
        return Err(Error::Shape(format!(
            "gromov_cost: D_out {:?}, D_ref {:?}, plan {:?}",
            d_out.dim(),
            d_ref.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// `G[i][j] = sum_kl (D_out[i][k] - D_ref[j][l])^2 Q[k][l]`, evaluated as
/// `(D_out^2 q1) 1ᵀ + 1 (D_ref^2 q2)ᵀ - 2 D_out Q D_refᵀ`.
pub fn gromov_cost(d_out: &Array2<f64>, d_ref: &Array2<f64>, q: &Array2<f64>) -> Result<Array2<f64>> {
    check_conformable(d_out, d_ref, q)?;
    if let Some(bad) = q.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Argument(format!("coupling entry {bad} is negative")));
    }
    let d_out_sq = d_out.mapv(|x| x * x);
    let d_ref_sq = d_ref.mapv(|x| x * x);
    Ok(gromov_cost_with_squares(d_out, d_ref, &d_out_sq, &d_ref_sq, q))
}

fn gromov_cost_with_squares(
    d_out: &Array2<f64>,
    d_ref: &Array2<f64>,
    d_out_sq: &Array2<f64>,
    d_ref_sq: &Array2<f64>,
    q: &Array2<f64>,
) -> Array2<f64> {
    let q_row = q.sum_axis(Axis(1));
    let q_col = q.sum_axis(Axis(0));
    let left = d_out_sq.dot(&q_row);
    let right = d_ref_sq.dot(&q_col);
    let mut g = d_out.dot(q).dot(&d_ref.t());
    Zip::indexed(&mut g).for_each(|(i, j), x| {
        *x = (left[i] + right[j] - 2.0 * *x).max(0.0);
    });
    g
}

fn xlogy_ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else if b == 0.0 {
        f64::INFINITY
    } else {
        a * (a / b).ln()
    }
}

/// `KL(a ⊗ a | b ⊗ b)` in closed form: `2 m_a sum a log(a/b) - m_a^2 + m_b^2`.
pub fn kron_kl(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let ma = a.sum();
    let mb = b.sum();
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| xlogy_ratio(x, y)).sum();
    2.0 * ma * s - ma * ma + mb * mb
}

/// `H(P) = sum P (log P - 1)`.
pub fn entropy(p: &Array2<f64>) -> f64 {
    p.iter().map(|&x| if x > 0.0 { x * (x.ln() - 1.0) } else { 0.0 }).sum()
}

fn weighted_sum(cost: &Array2<f64>, p: &Array2<f64>) -> f64 {
    Zip::from(cost).and(p).fold(0.0, |acc, c, x| acc + c * x)
}

fn assemble(cfg: &FugwConfig, wasserstein: f64, gromov: f64, marginal_kl: f64, entropy: f64) -> LossTerms {
    LossTerms {
        wasserstein,
        gromov,
        marginal_kl,
        entropy,
        total: (1.0 - cfg.alpha) * wasserstein + cfg.alpha * gromov + cfg.rho * marginal_kl + cfg.epsilon * entropy,
    }
}

/// Exact loss terms of `p` for `problem`, in the input units.
pub fn fugw_loss(p: &Array2<f64>, problem: &FugwProblem<'_>) -> Result<LossTerms> {
    problem.validate()?;
    let cost = feature_cost(problem.x_out, problem.x_ref)?;
    let g = gromov_cost(problem.geom_out.distances(), problem.geom_ref.distances(), p)?;
    if p.dim() != cost.dim() {
        return Err(Error::Shape(format!("plan {:?} vs cost {:?}", p.dim(), cost.dim())));
    }
    let kl = kron_kl(&p.sum_axis(Axis(1)), problem.geom_out.weights())
        + kron_kl(&p.sum_axis(Axis(0)), problem.geom_ref.weights());
    Ok(assemble(problem.config, weighted_sum(&cost, p), weighted_sum(&g, p), kl, entropy(p)))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn for the entropic problem with KL-penalised marginals:
///
/// `min_P <cost, P> + rho KL(P1 | w_out) + rho KL(P2 | w_ref) + epsilon KL(P | w_out ⊗ w_ref)`.
///
/// Returns `P = diag(exp(f/eps)) (w_out ⊗ w_ref ∘ exp(-cost/eps)) diag(exp(g/eps))`
/// where the potentials start at zero and follow the soft-min update damped
/// by `rho / (rho + epsilon)`.
pub fn unbalanced_sinkhorn(
    cost: &Array2<f64>,
    w_out: &Array1<f64>,
    w_ref: &Array1<f64>,
    rho: f64,
    epsilon: f64,
    iters: usize,
) -> Result<Array2<f64>> {
    let (n, m) = cost.dim();
    if w_out.len() != n || w_ref.len() != m {
        return Err(Error::Shape(format!(
            "cost is {n}x{m} but weights have lengths {} and {}",
            w_out.len(),
            w_ref.len()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Argument("cost matrix has non-finite entries".into()));
    }
    if !(rho > 0.0) || !(epsilon > 0.0) {
        return Err(Error::Argument(format!("rho = {rho} and epsilon = {epsilon} must be > 0")));
    }
    let damping = if rho.is_infinite() { 1.0 } else { rho / (rho + epsilon) };
    let log_a: Vec<f64> = w_out.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = w_ref.iter().map(|w| w.ln()).collect();
    // kernel in row-major and column-major order, for contiguous sweeps
    let kern: Vec<f64> = cost.iter().map(|c| -c / epsilon).collect();
    let kern_t: Vec<f64> = cost.t().iter().map(|c| -c / epsilon).collect();
    // potentials divided by epsilon
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut row_buf = vec![0.0; m];
    let mut col_buf = vec![0.0; n];
    for it in 0..iters {
        for i in 0..n {
            let k = &kern[i * m..(i + 1) * m];
            for j in 0..m {
                row_buf[j] = k[j] + v[j] + log_b[j];
            }
            u[i] = -damping * log_sum_exp(row_buf.iter().copied());
        }
        if let Some(i) = u.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical {
                iteration: it,
                message: format!("row potential {i} is not finite"),
            });
        }
        for j in 0..m {
            let k = &kern_t[j * n..(j + 1) * n];
            for i in 0..n {
                col_buf[i] = k[i] + u[i] + log_a[i];
            }
            v[j] = -damping * log_sum_exp(col_buf.iter().copied());
        }
        if let Some(j) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical {
                iteration: it,
                message: format!("column potential {j} is not finite"),
            });
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| (kern[i * m + j] + u[i] + v[j] + log_a[i] + log_b[j]).exp());
    if let Some(bad) = plan.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numerical {
            iteration: iters,
            message: format!("plan entry {bad} overflowed"),
        });
    }
    Ok(plan)
}

/// `sum a log(a / b)` with `0 log 0 = 0`; the part of `KL(a | b)` that is not
/// proportional to mass.
fn approx_kl<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(&x, &y)| xlogy_ratio(x, y)).sum()
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

struct Solver<'a> {
    cfg: &'a FugwConfig,
    a: &'a Array1<f64>,
    b: &'a Array1<f64>,
    ab: Array2<f64>,
    d_out: &'a Array2<f64>,
    d_ref: &'a Array2<f64>,
    d_out_sq: Array2<f64>,
    d_ref_sq: Array2<f64>,
    cost_raw: Array2<f64>,
    cost: Array2<f64>,
    gromov_scale: f64,
}

impl Solver<'_> {
    fn gromov(&self, q: &Array2<f64>) -> Array2<f64> {
        gromov_cost_with_squares(self.d_out, self.d_ref, &self.d_out_sq, &self.d_ref_sq, q)
    }

    fn loss(&self, p: &Array2<f64>) -> LossRecord {
        let g = self.gromov(p);
        let gw = weighted_sum(&g, p);
        let kl = kron_kl(&p.sum_axis(Axis(1)), self.a) + kron_kl(&p.sum_axis(Axis(0)), self.b);
        let h = entropy(p);
        LossRecord {
            iteration: 0,
            raw: assemble(self.cfg, weighted_sum(&self.cost_raw, p), gw, kl, h),
            normalized: assemble(self.cfg, weighted_sum(&self.cost, p), gw / self.gromov_scale, kl, h),
        }
    }

    /// Minimises over one plan with the other fixed.
    fn step(&self, fixed: &Array2<f64>) -> Result<Array2<f64>> {
        let cfg = self.cfg;
        let mass = fixed.sum();
        let mut constant = 0.0;
        if cfg.rho.is_finite() {
            constant += cfg.rho
                * (approx_kl(&fixed.sum_axis(Axis(1)), self.a) + approx_kl(&fixed.sum_axis(Axis(0)), self.b));
        }
        constant += cfg.epsilon * approx_kl(fixed.iter(), self.ab.iter());
        let mut lin = if cfg.alpha > 0.0 {
            self.gromov(fixed) * (cfg.alpha / self.gromov_scale)
        } else {
            Array2::zeros(self.cost.dim())
        };
        Zip::from(&mut lin).and(&self.cost).for_each(|l, &c| {
            *l += (1.0 - cfg.alpha) * c + constant;
        });
        let mut p = unbalanced_sinkhorn(
            &lin,
            self.a,
            self.b,
            cfg.rho * mass,
            cfg.epsilon * mass,
            cfg.sinkhorn_iters,
        )?;
        let new_mass = p.sum();
        if !(new_mass > 0.0) {
            return Err(Error::Numerical {
                iteration: cfg.sinkhorn_iters,
                message: "Sinkhorn returned a plan with zero mass".into(),
            });
        }
        p *= (mass / new_mass).sqrt();
        Ok(p)
    }
}

/// Block coordinate descent on the FUGW loss, starting from the product
/// coupling `w_out ⊗ w_ref`.
pub fn solve_fugw(problem: &FugwProblem<'_>) -> Result<TransportPlan> {
    problem.validate()?;
    let cfg = problem.config;
    let a = problem.geom_out.weights();
    let b = problem.geom_ref.weights();
    let d_out = problem.geom_out.distances();
    let d_ref = problem.geom_ref.distances();
    let cost_raw = feature_cost(problem.x_out, problem.x_ref)?;
    let p0 = outer(a, b);
    let d_out_sq = d_out.mapv(|x| x * x);
    let d_ref_sq = d_ref.mapv(|x| x * x);
    let (cost, gromov_scale) = if cfg.normalize_costs {
        let g0 = gromov_cost_with_squares(d_out, d_ref, &d_out_sq, &d_ref_sq, &p0);
        let fmax = cost_raw.fold(0.0f64, |m, &x| m.max(x));
        let gmax = g0.fold(0.0f64, |m, &x| m.max(x));
        let fmax = if fmax > 0.0 { fmax } else { 1.0 };
        let gmax = if gmax > 0.0 { gmax } else { 1.0 };
        (&cost_raw / fmax, gmax)
    } else {
        (cost_raw.clone(), 1.0)
    };
    let solver = Solver {
        cfg,
        a,
        b,
        ab: p0.clone(),
        d_out,
        d_ref,
        d_out_sq,
        d_ref_sq,
        cost_raw,
        cost,
        gromov_scale,
    };
    let mut trace = vec![solver.loss(&p0)];
    let mut p = p0.clone();
    let mut q = p0;
    for it in 1..=cfg.bcd_iters {
        let stage = |e: Error| match e {
            Error::Numerical { iteration, message } => Error::Numerical {
                iteration,
                message: format!("{message} (BCD iteration {it})"),
            },
            other => other,
        };
        p = solver.step(&q).map_err(stage)?;
        q = solver.step(&p).map_err(stage)?;
        let avg = (&p + &q) * 0.5;
        let mut rec = solver.loss(&avg);
        rec.iteration = it;
        trace.push(rec);
    }
    let mut plan = TransportPlan::from_matrix((&p + &q) * 0.5, cfg.clone())?;
    plan.loss_trace = trace;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub mass: f64,
    pub marginal_l1_out: f64,
    pub marginal_l1_ref: f64,
    /// Only for square plans.
    pub diagonal_mass_fraction: Option<f64>,
    /// `sum_ij P_ij D_ref[i][j] / sum P`, only when both sides share the
    /// reference vertex set.
    pub mean_displacement: Option<f64>,
}

pub fn diagonal_mass_fraction(plan: &TransportPlan) -> Result<f64> {
    let (r, c) = plan.shape();
    if r != c {
        return Err(Error::Argument(format!("diagonal mass fraction needs a square plan, got {r}x{c}")));
    }
    Ok(plan.plan().diag().sum() / plan.mass())
}

pub fn plan_diagnostics(plan: &TransportPlan, geom_out: &Geometry, geom_ref: &Geometry) -> Result<PlanDiagnostics> {
    let (r, c) = plan.shape();
    if r != geom_out.num_vertices() || c != geom_ref.num_vertices() {
        return Err(Error::Shape(format!(
            "plan is {r}x{c}, geometries have {} and {} vertices",
            geom_out.num_vertices(),
            geom_ref.num_vertices()
        )));
    }
    let l1 = |m: &Array1<f64>, w: &Array1<f64>| m.iter().zip(w).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let mass = plan.mass();
    let square = r == c;
    Ok(PlanDiagnostics {
        mass,
        marginal_l1_out: l1(plan.marginal_out(), geom_out.weights()),
        marginal_l1_ref: l1(plan.marginal_ref(), geom_ref.weights()),
        diagonal_mass_fraction: if square { Some(diagonal_mass_fraction(plan)?) } else { None },
        mean_displacement: if square { Some(weighted_sum(geom_ref.distances(), plan.plan()) / mass) } else { None },
    })
}
