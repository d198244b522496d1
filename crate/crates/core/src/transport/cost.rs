use ndarray::{Array1, Array2, Axis};

use super::check_finite;
use crate::error::{HgotError, Result};
use crate::tape::cosine_distance;

/// Cosine-distance cost `1 − ⟨x_i, y_j⟩ / (‖x_i‖ ‖y_j‖)`, entries in `[0, 2]`.
///
/// A zero row has similarity 0 with everything, so its distances are 1.
pub fn feature_cost_matrix(x: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != y.ncols() {
        return Err(HgotError::Input(format!(
            "feature widths differ: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    check_finite("X", x)?;
    check_finite("Y", y)?;
    Ok(cosine_distance(x, y))
}

fn check_binary(name: &str, a: &Array2<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(HgotError::Input(format!("{name} is not square")));
    }
    if a.iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(HgotError::Input(format!("{name} is not a binary matrix")))
    }
}

/// `(E ⊗ π)_ij = Σ_kl |A_src[i,k] − A_dst[j,l]| π_kl` for binary adjacencies.
///
/// Uses `|a − b| = a + b − 2ab`, which holds for `a, b ∈ {0, 1}`, so the
/// contraction costs two matrix products instead of a four-index sum.
pub fn structure_cost_apply(
    a_src: &Array2<f64>,
    a_dst: &Array2<f64>,
    pi: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_binary("source adjacency", a_src)?;
    check_binary("target adjacency", a_dst)?;
    if pi.dim() != (a_src.nrows(), a_dst.nrows()) {
        return Err(HgotError::Input(format!(
            "plan is {:?}, expected ({}, {})",
            pi.dim(),
            a_src.nrows(),
            a_dst.nrows()
        )));
    }
    check_finite("plan", pi)?;
    Ok(structure_product(a_src, a_dst, pi))
}

/// Unchecked factorized contraction; linear in `pi`, which may be signed.
pub(crate) fn structure_product(
    a_src: &Array2<f64>,
    a_dst: &Array2<f64>,
    pi: &Array2<f64>,
) -> Array2<f64> {
    let row_mass: Array1<f64> = pi.sum_axis(Axis(1));
    let col_mass: Array1<f64> = pi.sum_axis(Axis(0));
    let src_term = a_src.dot(&row_mass);
    let dst_term = a_dst.dot(&col_mass);
    let mut out = a_src.dot(pi).dot(&a_dst.t());
    out *= -2.0;
    out += &src_term.insert_axis(Axis(1));
    out += &dst_term.insert_axis(Axis(0));
    out
}
