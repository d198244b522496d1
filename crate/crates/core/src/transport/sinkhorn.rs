//! Entropic optimal transport by Sinkhorn-Knopp scaling.
//!
//! Costs are divided by `max |C|` before solving so that `epsilon` has the
//! same meaning at every scale. The reported objective is `⟨C, π⟩` on the
//! original scale, without the entropy term.

use ndarray::{Array1, Array2, Axis};

use super::{check_finite, residuals, round_to_marginals, Marginals, PlanMatrix, SolverConfig};
use crate::error::{HgotError, Result};
use crate::par;
use crate::tape::{Tape, Var};

/// Largest `1/epsilon` unrolled with the multiplicative kernel on a tape;
/// beyond this the kernel entries drop below ~1e-87 and the log-domain
/// recursion is recorded instead.
const MAX_KERNEL_EXPONENT: f64 = 200.0;

/// Largest `1/epsilon` the iterative solver attempts with the kernel. Smaller
/// regularizations converge far faster with annealed log-domain updates.
const MAX_ITERATIVE_KERNEL_EXPONENT: f64 = 50.0;

/// Iterations between marginal-residual checks.
const CHECK_EVERY: usize = 10;

/// Entropic plan for `cost` between the marginals.
///
/// With `differentiable` set, exactly `cfg.unroll_iters` iterations are run
/// through the same arithmetic as [`sinkhorn_tape`]. Otherwise iteration
/// stops once the max marginal violation reaches `cfg.sinkhorn_tol` or after
/// `cfg.sinkhorn_max_iter` iterations, in which case `converged` is false
/// and the plan is rounded onto the marginal polytope.
pub fn sinkhorn_plan(
    cost: &Array2<f64>,
    marg: &Marginals,
    cfg: &SolverConfig,
    differentiable: bool,
) -> Result<PlanMatrix> {
    cfg.validate()?;
    check_shapes(cost, marg)?;
    check_finite("cost", cost)?;
    if differentiable {
        let mut tape = Tape::new();
        let c = tape.leaf(cost.clone());
        let vars = sinkhorn_tape(&mut tape, c, marg, cfg)?;
        let pi = tape.value(vars.plan).clone();
        let mut plan = PlanMatrix::from_plan(pi, cost, marg);
        plan.iterations = cfg.unroll_iters;
        plan.converged = plan.max_residual() <= cfg.sinkhorn_tol;
        plan.cost_scale = vars.cost_scale;
        plan.log_domain = vars.log_domain;
        return Ok(plan);
    }
    solve_iterative(cost, marg, cfg, true)
}

/// Iterative solve for a conditional-gradient direction. A kernel solve that
/// runs out of budget is rounded and kept instead of being redone in the log
/// domain.
pub(crate) fn sinkhorn_direction(cost: &Array2<f64>, marg: &Marginals, cfg: &SolverConfig) -> Result<PlanMatrix> {
    check_shapes(cost, marg)?;
    check_finite("cost", cost)?;
    solve_iterative(cost, marg, cfg, false)
}

fn solve_iterative(
    cost: &Array2<f64>,
    marg: &Marginals,
    cfg: &SolverConfig,
    retry_exhausted_kernel: bool,
) -> Result<PlanMatrix> {
    let scale = cost.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let normalized = cost / scale;
    let eps = cfg.epsilon;

    let mut solved = if 1.0 / eps <= MAX_ITERATIVE_KERNEL_EXPONENT {
        solve_kernel(&normalized, marg, eps, cfg)
    } else {
        None
    };
    if let Some((_, iterations, _)) = &solved {
        if retry_exhausted_kernel && *iterations >= cfg.sinkhorn_max_iter {
            solved = None;
        }
    }
    if solved.is_none() {
        solved = Some(solve_log(&normalized, marg, eps, cfg));
    }
    let (mut pi, iterations, log_domain) = solved.expect("log-domain solve always returns");
    if pi.iter().any(|v| !v.is_finite()) {
        return Err(HgotError::Numerical("Sinkhorn produced a non-finite plan".into()));
    }
    let (mut row_residual, mut col_residual) = residuals(&pi, marg);
    let converged = row_residual.max(col_residual) <= cfg.sinkhorn_tol;
    if !converged {
        pi = round_to_marginals(&pi, marg);
        (row_residual, col_residual) = residuals(&pi, marg);
    }
    let objective_value = (cost * &pi).sum();
    Ok(PlanMatrix {
        converged,
        pi,
        row_residual,
        col_residual,
        objective_value,
        iterations,
        cost_scale: scale,
        log_domain,
    })
}

fn check_shapes(cost: &Array2<f64>, marg: &Marginals) -> Result<()> {
    if cost.dim() != (marg.n(), marg.m()) {
        return Err(HgotError::Input(format!(
            "cost is {:?} but marginals are ({}, {})",
            cost.dim(),
            marg.n(),
            marg.m()
        )));
    }
    Ok(())
}

fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Multiplicative iterations. Returns `None` when a scaling vector under- or
/// overflows, signalling a restart in the log domain.
fn solve_kernel(
    cost: &Array2<f64>,
    marg: &Marginals,
    eps: f64,
    cfg: &SolverConfig,
) -> Option<(Array2<f64>, usize, bool)> {
    let kernel = cost.mapv(|c| (-c / eps).exp());
    let kernel_t = kernel.t().to_owned();
    let mut u = Array1::<f64>::ones(marg.n());
    let mut v = Array1::<f64>::ones(marg.m());
    let mut iterations = 0;
    let finite = |x: &Array1<f64>| x.iter().all(|v| v.is_finite());
    while iterations < cfg.sinkhorn_max_iter {
        iterations += 1;
        let kv = kernel.dot(&v);
        u = &marg.mu / &kv;
        let ktu = kernel_t.dot(&u);
        v = &marg.nu / &ktu;
        if !finite(&u) || !finite(&v) {
            return None;
        }
        if iterations % CHECK_EVERY == 0 || iterations == cfg.sinkhorn_max_iter {
            let rows = &u * &kernel.dot(&v);
            if max_abs_diff(&rows, &marg.mu) <= cfg.sinkhorn_tol {
                break;
            }
        }
    }
    let pi = &kernel * &u.view().insert_axis(Axis(1)) * v.view().insert_axis(Axis(0));
    Some((pi, iterations, false))
}

/// `out_i = base_i − eps · log Σ_j exp((pot_j − c[i][j]) / eps)` for each row of `c`.
fn soft_min_rows(c: &Array2<f64>, pot: &Array1<f64>, base: &Array1<f64>, eps: f64) -> Array1<f64> {
    let rows = par::map_range(c.nrows(), |i| {
        if base[i] == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let row = c.row(i);
        let mut peak = f64::NEG_INFINITY;
        for (cij, pj) in row.iter().zip(pot) {
            peak = peak.max((pj - cij) / eps);
        }
        if peak == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let total: f64 = row
            .iter()
            .zip(pot)
            .map(|(cij, pj)| ((pj - cij) / eps - peak).exp())
            .sum();
        base[i] - eps * (peak + total.ln())
    });
    Array1::from(rows)
}

fn log_plan(cost: &Array2<f64>, f: &Array1<f64>, g: &Array1<f64>, eps: f64) -> Array2<f64> {
    Array2::from_shape_fn(cost.dim(), |(i, j)| {
        let x = (f[i] + g[j] - cost[[i, j]]) / eps;
        if x.is_nan() {
            0.0
        } else {
            x.exp()
        }
    })
}

/// Log-domain iterations on dual potentials, annealing epsilon down from 1
/// so that small targets converge in few sweeps.
fn solve_log(cost: &Array2<f64>, marg: &Marginals, eps: f64, cfg: &SolverConfig) -> (Array2<f64>, usize, bool) {
    let cost_t = cost.t().to_owned();
    let log_mu = marg.mu.mapv(f64::ln);
    let log_nu = marg.nu.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(marg.n());
    let mut g = Array1::<f64>::zeros(marg.m());
    let mut schedule = Vec::new();
    let mut stage = 1.0f64;
    while stage > eps {
        schedule.push(stage);
        stage *= 0.5;
    }
    schedule.push(eps);

    let mut iterations = 0;
    for (k, &stage_eps) in schedule.iter().enumerate() {
        let last = k + 1 == schedule.len();
        let tol = if last { cfg.sinkhorn_tol } else { 1e-3 };
        let remaining = cfg.sinkhorn_max_iter.saturating_sub(iterations);
        let budget = if last {
            remaining.max(1)
        } else {
            // keep at least one iteration for the target epsilon
            remaining.saturating_sub(1).min(100)
        };
        let base_f = &log_mu * stage_eps;
        let base_g = &log_nu * stage_eps;
        for it in 1..=budget {
            iterations += 1;
            f = soft_min_rows(cost, &g, &base_f, stage_eps);
            g = soft_min_rows(&cost_t, &f, &base_g, stage_eps);
            if it % CHECK_EVERY == 0 || it == budget {
                let pi = log_plan(cost, &f, &g, stage_eps);
                let rows = pi.sum_axis(Axis(1));
                if max_abs_diff(&rows, &marg.mu) <= tol {
                    break;
                }
            }
        }
    }
    (log_plan(cost, &f, &g, eps), iterations, true)
}

/// Handles for a differentiable Sinkhorn solve recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SinkhornVars {
    pub plan: Var,
    /// `⟨cost, π⟩` as a 1×1 node.
    pub objective: Var,
    pub cost_scale: f64,
    pub log_domain: bool,
}

fn column(v: &Array1<f64>) -> Array2<f64> {
    v.view().insert_axis(Axis(1)).to_owned()
}

/// Records `cfg.unroll_iters` Sinkhorn iterations on `cost` so that adjoints
/// reach the cost matrix (including through its max-normalization).
pub fn sinkhorn_tape(
    tape: &mut Tape,
    cost: Var,
    marg: &Marginals,
    cfg: &SolverConfig,
) -> Result<SinkhornVars> {
    cfg.validate()?;
    let cost_value = tape.value(cost);
    check_shapes(cost_value, marg)?;
    check_finite("cost", cost_value)?;
    let has_negative = cost_value.iter().any(|&v| v < 0.0);
    let peak = tape.max(cost);
    let cost_scale = tape.scalar_value(peak);
    let normalized = if cost_scale > 0.0 && !has_negative {
        let inv = tape.unary(peak, crate::tape::Unary::Recip);
        tape.scale_by(cost, inv)
    } else {
        let abs_peak = tape.value(cost).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        tape.scale(cost, if abs_peak > 0.0 { 1.0 / abs_peak } else { 1.0 })
    };
    let eps = cfg.epsilon;
    let log_domain = has_negative || 1.0 / eps > MAX_KERNEL_EXPONENT;
    let steps = cfg.unroll_iters;

    let plan = if !log_domain {
        let neg = tape.scale(normalized, -1.0 / eps);
        let kernel = tape.exp(neg);
        let kernel_t = tape.transpose(kernel);
        let mu = tape.leaf(column(&marg.mu));
        let nu = tape.leaf(column(&marg.nu));
        let mut v = tape.leaf(Array2::ones((marg.m(), 1)));
        let mut u = mu;
        for _ in 0..steps {
            let kv = tape.matmul(kernel, v);
            u = tape.div(mu, kv);
            let ktu = tape.matmul(kernel_t, u);
            v = tape.div(nu, ktu);
        }
        let left = tape.scale_rows(kernel, u);
        tape.scale_cols(left, v)
    } else {
        // Potentials a = f/eps, b = g/eps.
        let logits = tape.scale(normalized, -1.0 / eps);
        let logits_t = tape.transpose(logits);
        let log_mu = tape.leaf(column(&marg.mu.mapv(f64::ln)));
        let log_nu = tape.leaf(column(&marg.nu.mapv(f64::ln)));
        let mut b = tape.leaf(Array2::zeros((marg.m(), 1)));
        let mut a = log_mu;
        for _ in 0..steps {
            let b_row = tape.transpose(b);
            let shifted = tape.add_row(logits, b_row);
            let lse = tape.row_logsumexp(shifted);
            a = tape.sub(log_mu, lse);
            let a_row = tape.transpose(a);
            let shifted = tape.add_row(logits_t, a_row);
            let lse = tape.row_logsumexp(shifted);
            b = tape.sub(log_nu, lse);
        }
        let b_row = tape.transpose(b);
        let with_b = tape.add_row(logits, b_row);
        let with_ab = tape.add_col(with_b, a);
        tape.exp(with_ab)
    };
    let weighted = tape.mul(cost, plan);
    let objective = tape.sum(weighted);
    Ok(SinkhornVars {
        plan,
        objective,
        cost_scale: if cost_scale > 0.0 { cost_scale } else { 1.0 },
        log_domain,
    })
}

/// Entropic Wasserstein objective `⟨F, π⟩` with cosine feature cost `F`.
pub fn wasserstein_distance(
    x: &Array2<f64>,
    y: &Array2<f64>,
    marg: &Marginals,
    cfg: &SolverConfig,
) -> Result<f64> {
    let cost = super::feature_cost_matrix(x, y)?;
    Ok(sinkhorn_plan(&cost, marg, cfg, false)?.objective_value)
}
