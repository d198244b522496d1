use ndarray::Array2;

use super::{Marginals, PlanMatrix};
use crate::error::{HgotError, Result};

/// Largest size the exhaustive search accepts (8! = 40320 permutations).
pub const EXACT_ORACLE_MAX_N: usize = 8;

/// Unregularized OT between uniform marginals on a square cost, by
/// enumerating every permutation plan. With uniform marginals an optimal
/// vertex of the transport polytope is a scaled permutation matrix.
///
/// Ties go to the permutation met first in lexicographic order.
pub fn exact_ot_oracle(cost: &Array2<f64>) -> Result<PlanMatrix> {
    let (n, m) = cost.dim();
    if n != m || n == 0 {
        return Err(HgotError::Input(format!("oracle needs a non-empty square cost, got {n}x{m}")));
    }
    if n > EXACT_ORACLE_MAX_N {
        return Err(HgotError::Input(format!(
            "oracle refuses n = {n} (limit {EXACT_ORACLE_MAX_N})"
        )));
    }
    super::check_finite("cost", cost)?;

    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        if total < best_cost {
            best_cost = total;
            best.clone_from(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }

    let w = 1.0 / n as f64;
    let mut pi = Array2::zeros((n, n));
    for (i, &j) in best.iter().enumerate() {
        pi[[i, j]] = w;
    }
    let mut plan = PlanMatrix::from_plan(pi, cost, &Marginals::uniform(n, n));
    plan.objective_value = best_cost * w;
    Ok(plan)
}

/// Advances to the next lexicographic permutation; false after the last one.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = p.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = p.iter().rposition(|&x| x > p[i]).expect("a larger element exists");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}
