//! Optimal-transport engine: cost matrices, entropic Sinkhorn plans, the
//! fused Gromov-Wasserstein conditional-gradient solver and an exhaustive
//! oracle for tiny problems.

mod cost;
mod exact;
mod fgw;
mod sinkhorn;

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{HgotError, Result};

pub use cost::{feature_cost_matrix, structure_cost_apply};
pub use exact::{exact_ot_oracle, EXACT_ORACLE_MAX_N};
pub use fgw::{fgw_solve, FgwProblem, FgwSolution};
pub use sinkhorn::{sinkhorn_plan, sinkhorn_tape, wasserstein_distance, SinkhornVars};

/// Source and target probability vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub mu: Array1<f64>,
    pub nu: Array1<f64>,
}

impl Marginals {
    pub fn new(mu: Array1<f64>, nu: Array1<f64>) -> Result<Self> {
        for (name, p) in [("mu", &mu), ("nu", &nu)] {
            if p.is_empty() {
                return Err(HgotError::Input(format!("{name} is empty")));
            }
            if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(HgotError::Input(format!("{name} has a negative or non-finite entry")));
            }
            let total = p.sum();
            if (total - 1.0).abs() > 1e-12 * (p.len() as f64).max(1.0) {
                return Err(HgotError::Input(format!("{name} sums to {total}, not 1")));
            }
        }
        Ok(Self { mu, nu })
    }

    /// `mu = 1/n`, `nu = 1/m`.
    pub fn uniform(n: usize, m: usize) -> Self {
        assert!(n > 0 && m > 0, "uniform marginals need n, m >= 1");
        Self {
            mu: Array1::from_elem(n, 1.0 / n as f64),
            nu: Array1::from_elem(m, 1.0 / m as f64),
        }
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn m(&self) -> usize {
        self.nu.len()
    }

    /// Independent coupling `mu nuᵀ`.
    pub fn product(&self) -> Array2<f64> {
        let mu = self.mu.view().insert_axis(Axis(1));
        let nu = self.nu.view().insert_axis(Axis(0));
        mu.dot(&nu)
    }
}

/// Solver knobs shared by Sinkhorn and the conditional-gradient solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Entropic regularization, relative to the max-normalized cost.
    pub epsilon: f64,
    pub sinkhorn_max_iter: usize,
    /// Target for the max marginal violation.
    pub sinkhorn_tol: f64,
    pub cg_max_iter: usize,
    /// Stop once the relative objective decrease falls below this.
    pub cg_tol: f64,
    /// Regularization of the conditional-gradient linear subproblem;
    /// `None` means `epsilon / 10`.
    pub cg_sub_epsilon: Option<f64>,
    /// Sinkhorn budget of one linear subproblem. An unconverged direction is
    /// rounded onto the marginal polytope, so every iterate stays feasible.
    pub cg_sub_max_iter: usize,
    /// Fixed Sinkhorn iteration count on the differentiable path.
    pub unroll_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            sinkhorn_max_iter: 20_000,
            sinkhorn_tol: 1e-9,
            cg_max_iter: 30,
            cg_tol: 1e-7,
            cg_sub_epsilon: None,
            cg_sub_max_iter: 1000,
            unroll_iters: 50,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(HgotError::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if let Some(sub) = self.cg_sub_epsilon {
            if !(sub > 0.0 && sub.is_finite()) {
                return Err(HgotError::Config(format!("cg_sub_epsilon must be > 0, got {sub}")));
            }
        }
        if self.sinkhorn_max_iter == 0 || self.cg_max_iter == 0 || self.cg_sub_max_iter == 0 || self.unroll_iters == 0 {
            return Err(HgotError::Config("iteration counts must be >= 1".into()));
        }
        if !(self.sinkhorn_tol > 0.0) || !(self.cg_tol > 0.0) {
            return Err(HgotError::Config("tolerances must be > 0".into()));
        }
        Ok(())
    }

    pub fn sub_epsilon(&self) -> f64 {
        self.cg_sub_epsilon.unwrap_or(self.epsilon / 10.0)
    }

    /// Copy with the entropic regularization replaced.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }
}

/// A transport plan with its feasibility diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanMatrix {
    pub pi: Array2<f64>,
    /// `max_i |Σ_j π_ij − μ_i|`.
    pub row_residual: f64,
    /// `max_j |Σ_i π_ij − ν_j|`.
    pub col_residual: f64,
    /// `⟨cost, π⟩` on the caller's (un-normalized) cost scale.
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Factor the cost was divided by before solving.
    pub cost_scale: f64,
    pub log_domain: bool,
}

impl PlanMatrix {
    pub fn max_residual(&self) -> f64 {
        self.row_residual.max(self.col_residual)
    }

    /// Builds the diagnostics for an arbitrary plan.
    pub fn from_plan(pi: Array2<f64>, cost: &Array2<f64>, marg: &Marginals) -> Self {
        let (row_residual, col_residual) = residuals(&pi, marg);
        let objective_value = (cost * &pi).sum();
        Self {
            pi,
            row_residual,
            col_residual,
            objective_value,
            iterations: 0,
            converged: true,
            cost_scale: 1.0,
            log_domain: false,
        }
    }

    /// Writes `<stem>.csv` (the plan) and `<stem>.json` (diagnostics).
    pub fn dump(&self, stem: &Path) -> Result<()> {
        let csv = stem.with_extension("csv");
        let mut text = String::new();
        for row in self.pi.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        fs::write(&csv, text).map_err(|e| HgotError::io(&csv, e))?;
        let json = stem.with_extension("json");
        let sidecar = serde_json::json!({
            "rows": self.pi.nrows(),
            "cols": self.pi.ncols(),
            "objective": self.objective_value,
            "row_residual": self.row_residual,
            "col_residual": self.col_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "cost_scale": self.cost_scale,
            "log_domain": self.log_domain,
        });
        let text = serde_json::to_string_pretty(&sidecar).expect("json");
        fs::write(&json, text + "\n").map_err(|e| HgotError::io(&json, e))
    }
}

/// Row and column marginal violations of `pi`.
pub fn residuals(pi: &Array2<f64>, marg: &Marginals) -> (f64, f64) {
    let rows = pi.sum_axis(Axis(1));
    let cols = pi.sum_axis(Axis(0));
    let row = rows
        .iter()
        .zip(&marg.mu)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let col = cols
        .iter()
        .zip(&marg.nu)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (row, col)
}

/// Projects a nonnegative plan onto `Π(μ, ν)`: rows and then columns that
/// exceed their marginal are scaled down, and the remaining deficit is
/// filled by a rank-one correction. Entries move by at most the L1 marginal
/// violation of the input, and the result is feasible up to rounding.
pub fn round_to_marginals(pi: &Array2<f64>, marg: &Marginals) -> Array2<f64> {
    let mut out = pi.clone();
    let rows = out.sum_axis(Axis(1));
    for (mut row, (&r, &mu)) in out.rows_mut().into_iter().zip(rows.iter().zip(&marg.mu)) {
        if r > mu {
            row *= mu / r;
        }
    }
    let cols = out.sum_axis(Axis(0));
    for (mut col, (&c, &nu)) in out.columns_mut().into_iter().zip(cols.iter().zip(&marg.nu)) {
        if c > nu {
            col *= nu / c;
        }
    }
    // nonnegative up to rounding after the scaling above; clamping keeps
    // the correction from writing negative entries
    let row_gap = (&marg.mu - &out.sum_axis(Axis(1))).mapv(|g| g.max(0.0));
    let col_gap = (&marg.nu - &out.sum_axis(Axis(0))).mapv(|g| g.max(0.0));
    let mass: f64 = col_gap.sum();
    if mass > 0.0 {
        let r = row_gap.view().insert_axis(Axis(1));
        let c = col_gap.view().insert_axis(Axis(0));
        out += &(&r * &c / mass);
    }
    out
}

pub(crate) fn check_finite(name: &str, m: &Array2<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HgotError::Input(format!("{name} contains non-finite entries")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rounding_restores_marginals() {
        let marg = Marginals::new(array![0.2, 0.3, 0.5], array![0.6, 0.4]).unwrap();
        let pi = array![[0.3, 0.1], [0.05, 0.1], [0.2, 0.1]];
        let r = round_to_marginals(&pi, &marg);
        let (a, b) = residuals(&r, &marg);
        assert!(a < 1e-15 && b < 1e-15, "{a} {b}");
        assert!(r.iter().all(|&v| v >= 0.0));
        let feasible = marg.product();
        let back = round_to_marginals(&feasible, &marg);
        assert!((&back - &feasible).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn marginals_validation() {
        assert!(Marginals::new(array![0.5, 0.5], array![1.0]).is_ok());
        assert!(Marginals::new(array![0.5, 0.6], array![1.0]).is_err());
        assert!(Marginals::new(array![-0.5, 1.5], array![1.0]).is_err());
        assert!(Marginals::new(array![], array![1.0]).is_err());
    }

    #[test]
    fn product_coupling_is_feasible() {
        let m = Marginals::new(array![0.2, 0.8], array![0.1, 0.3, 0.6]).unwrap();
        let (r, c) = residuals(&m.product(), &m);
        assert!(r < 1e-15 && c < 1e-15);
    }

    #[test]
    fn solver_config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        assert!(SolverConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { unroll_iters: 0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { cg_tol: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!(SolverConfig::default().sub_epsilon(), 0.005);
    }

    #[test]
    fn dump_writes_plan_and_sidecar() {
        let tmp = tempfile::tempdir().unwrap();
        let marg = Marginals::uniform(2, 2);
        let plan = PlanMatrix::from_plan(marg.product(), &array![[1.0, 0.0], [0.0, 1.0]], &marg);
        plan.dump(&tmp.path().join("plan_PAP")).unwrap();
        let csv = fs::read_to_string(tmp.path().join("plan_PAP.csv")).unwrap();
        assert_eq!(csv, "0.25,0.25\n0.25,0.25\n");
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(tmp.path().join("plan_PAP.json")).unwrap()).unwrap();
        assert_eq!(side["objective"], 0.5);
    }
}
