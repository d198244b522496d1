//! Fused Gromov-Wasserstein plans by conditional gradient (Frank-Wolfe).

use ndarray::Array2;

use super::cost::structure_product;
use super::sinkhorn::sinkhorn_direction;
use super::{feature_cost_matrix, Marginals, PlanMatrix, SolverConfig};
use crate::error::{HgotError, Result};

/// Two attributed graphs to be matched, with the feature/structure trade-off.
#[derive(Clone, Debug)]
pub struct FgwProblem {
    pub h_src: Array2<f64>,
    pub h_dst: Array2<f64>,
    pub a_src: Array2<f64>,
    pub a_dst: Array2<f64>,
    /// Weight of the feature term; `1 − sigma` weighs the structure term.
    pub sigma: f64,
    pub marginals: Marginals,
}

impl FgwProblem {
    /// Uniform marginals.
    pub fn new(
        h_src: Array2<f64>,
        a_src: Array2<f64>,
        h_dst: Array2<f64>,
        a_dst: Array2<f64>,
        sigma: f64,
    ) -> Result<Self> {
        let marginals = Marginals::uniform(h_src.nrows().max(1), h_dst.nrows().max(1));
        let p = Self {
            h_src,
            h_dst,
            a_src,
            a_dst,
            sigma,
            marginals,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(HgotError::Config(format!("sigma = {} is not in [0, 1]", self.sigma)));
        }
        let (n, m) = (self.h_src.nrows(), self.h_dst.nrows());
        if n == 0 || m == 0 {
            return Err(HgotError::Input("graphs must have at least one node".into()));
        }
        if self.a_src.dim() != (n, n) || self.a_dst.dim() != (m, m) {
            return Err(HgotError::Input(format!(
                "adjacencies {:?} and {:?} do not match node counts {n} and {m}",
                self.a_src.dim(),
                self.a_dst.dim()
            )));
        }
        if self.marginals.n() != n || self.marginals.m() != m {
            return Err(HgotError::Input("marginal lengths do not match node counts".into()));
        }
        for (name, a) in [("source adjacency", &self.a_src), ("target adjacency", &self.a_dst)] {
            if !a.iter().all(|&v| v == 0.0 || v == 1.0) {
                return Err(HgotError::Input(format!("{name} is not a binary matrix")));
            }
        }
        Ok(())
    }

    /// `σ⟨F, π⟩ + (1 − σ)⟨E⊗π, π⟩` for an arbitrary plan.
    pub fn evaluate(&self, pi: &Array2<f64>) -> Result<f64> {
        self.validate()?;
        let f = feature_cost_matrix(&self.h_src, &self.h_dst)?;
        let e = structure_product(&self.a_src, &self.a_dst, pi);
        Ok(self.objective(&f, &e, pi))
    }

    fn objective(&self, f: &Array2<f64>, e_at_pi: &Array2<f64>, pi: &Array2<f64>) -> f64 {
        let feature = if self.sigma > 0.0 { (f * pi).sum() } else { 0.0 };
        let structure = if self.sigma < 1.0 { (e_at_pi * pi).sum() } else { 0.0 };
        self.sigma * feature + (1.0 - self.sigma) * structure
    }

    /// `∇_π ⟨E⊗π, π⟩ = E⊗π + E(Aᵀ)⊗π`; the second term equals the first
    /// when both adjacencies are symmetric.
    fn structure_gradient(&self, e_at_pi: &Array2<f64>, pi: &Array2<f64>) -> Array2<f64> {
        let symmetric = self.a_src == self.a_src.t() && self.a_dst == self.a_dst.t();
        if symmetric {
            e_at_pi * 2.0
        } else {
            let a_src_t = self.a_src.t().to_owned();
            let a_dst_t = self.a_dst.t().to_owned();
            e_at_pi + &structure_product(&a_src_t, &a_dst_t, pi)
        }
    }
}

#[derive(Clone, Debug)]
pub struct FgwSolution {
    /// Final plan; `objective_value` holds the fused distance and
    /// `iterations` the conditional-gradient iterations.
    pub plan: PlanMatrix,
    pub distance: f64,
    /// Objective at the starting plan and after every iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub sinkhorn_iterations: usize,
    pub converged: bool,
    /// Cosine cost between the two feature sets.
    pub feature_cost: Array2<f64>,
    /// `E⊗π` at the final plan.
    pub structure_at_plan: Array2<f64>,
}

/// Conditional gradient from `π⁰ = μνᵀ`. Each linear subproblem is an
/// entropic Sinkhorn solve at `cfg.sub_epsilon()`, and the step length comes
/// from an exact line search on the quadratic objective. A step that fails to
/// decrease the objective is retried with `2/(t+2)`; if that also fails the
/// solver stops, so the recorded trace never increases.
pub fn fgw_solve(prob: &FgwProblem, cfg: &SolverConfig) -> Result<FgwSolution> {
    cfg.validate()?;
    prob.validate()?;
    let marg = &prob.marginals;
    let sigma = prob.sigma;
    let f = feature_cost_matrix(&prob.h_src, &prob.h_dst)?;
    let mut sub_cfg = cfg.with_epsilon(cfg.sub_epsilon());
    sub_cfg.sinkhorn_max_iter = sub_cfg.sinkhorn_max_iter.min(cfg.cg_sub_max_iter);

    let mut pi = marg.product();
    let mut e_pi = structure_product(&prob.a_src, &prob.a_dst, &pi);
    let mut value = prob.objective(&f, &e_pi, &pi);
    let mut trace = vec![value];
    let mut iterations = 0;
    let mut sinkhorn_iterations = 0;
    let mut converged = false;

    while iterations < cfg.cg_max_iter {
        iterations += 1;
        let mut grad = if sigma > 0.0 { &f * sigma } else { Array2::zeros(f.dim()) };
        if sigma < 1.0 {
            grad.scaled_add(1.0 - sigma, &prob.structure_gradient(&e_pi, &pi));
        }
        let direction = sinkhorn_direction(&grad, marg, &sub_cfg)?;
        sinkhorn_iterations += direction.iterations;
        let delta = &direction.pi - &pi;
        let slope = (&grad * &delta).sum();
        if slope >= 0.0 {
            converged = true;
            break;
        }
        let e_delta = structure_product(&prob.a_src, &prob.a_dst, &delta);
        let curvature = if sigma < 1.0 {
            (1.0 - sigma) * (&e_delta * &delta).sum()
        } else {
            0.0
        };
        let exact_step = if curvature > 0.0 {
            (-slope / (2.0 * curvature)).clamp(0.0, 1.0)
        } else if curvature + slope < 0.0 {
            1.0
        } else {
            0.0
        };

        let mut accepted = None;
        for gamma in [exact_step, 2.0 / (iterations as f64 + 2.0)] {
            if gamma <= 0.0 {
                continue;
            }
            let candidate = &pi + &(&delta * gamma);
            let e_candidate = &e_pi + &(&e_delta * gamma);
            let candidate_value = prob.objective(&f, &e_candidate, &candidate);
            if candidate_value <= value {
                accepted = Some((candidate, e_candidate, candidate_value));
                break;
            }
        }
        let Some((next, _, next_value)) = accepted else {
            trace.push(value);
            converged = true;
            break;
        };
        let decrease = value - next_value;
        pi = next;
        // Refresh from scratch so that rounding in the incremental update
        // cannot accumulate across iterations.
        e_pi = structure_product(&prob.a_src, &prob.a_dst, &pi);
        value = prob.objective(&f, &e_pi, &pi);
        trace.push(value);
        if decrease <= cfg.cg_tol * trace[trace.len() - 2].abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    let mut plan = PlanMatrix::from_plan(pi, &f, marg);
    plan.objective_value = value;
    plan.iterations = iterations;
    plan.converged = converged;
    Ok(FgwSolution {
        distance: value,
        trace,
        iterations,
        sinkhorn_iterations,
        converged,
        feature_cost: f,
        structure_at_plan: e_pi,
        plan,
    })
}
