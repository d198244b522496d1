//! Plan-alignment losses, ablation variants, the contrastive baseline and
//! the training loop.

mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{HgotError, Result};
use crate::tape::{Tape, Var};

pub use train::{
    graph_plans, graph_targets, loss_and_gradients, loss_with_targets, train, train_in_context, train_step,
    write_loss_history, Adam, PairTarget, TrainConfig, TrainOutcome, TrainingContext,
};

/// Loss weights shared by every view pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the structure loss.
    pub rho: f64,
    /// Feature share of the fused graph distance; `1 − sigma` goes to structure.
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rho: 1.0, sigma: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(HgotError::Config(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(HgotError::Config(format!("sigma must be in [0, 1], got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Which objective a run optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Plan matching plus structure loss against the aggregated view.
    #[default]
    Full,
    /// No aggregated view: every pair of meta-path views is aligned.
    NoAgg,
    /// Structure loss reported but left out of the total.
    NoStr,
    /// Matches scalar distances instead of plans.
    DistanceOnly,
    /// InfoNCE between each view and the aggregate.
    Contrastive,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NoAgg,
        AblationMode::NoStr,
        AblationMode::DistanceOnly,
        AblationMode::Contrastive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoAgg => "no_agg",
            AblationMode::NoStr => "no_str",
            AblationMode::DistanceOnly => "distance_only",
            AblationMode::Contrastive => "contrastive",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = HgotError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|m| m.as_str()).collect();
                HgotError::Config(format!("unknown ablation mode {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Inner,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub similarity: Similarity,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            similarity: Similarity::Cosine,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(HgotError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Loss terms and solver diagnostics for one aligned pair of views.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewLoss {
    /// `"PAP"` against the aggregate, or `"PAP|PSP"` for a view pair.
    pub name: String,
    /// Plan-matching term. In distance-only mode this holds the distance gap
    /// and in contrastive mode the InfoNCE value.
    pub l_mat: f64,
    pub l_str: f64,
    /// This pair's contribution before averaging.
    pub objective: f64,
    /// Fused graph-space distance.
    pub d_graph: f64,
    /// Representation-space transport cost `⟨R, π_Z⟩`.
    pub d_repr: f64,
    pub cg_iterations: usize,
    pub cg_converged: bool,
    pub graph_plan_residual: f64,
    pub repr_plan_residual: f64,
    pub sinkhorn_iterations: usize,
}

/// Per-pair terms plus their mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub mode: AblationMode,
    pub views: Vec<ViewLoss>,
    pub total: f64,
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(HgotError::Input(format!("{what}: shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

/// `‖π_G − π_Z‖_F`.
pub fn matching_loss(plan_graph: &Array2<f64>, plan_repr: &Array2<f64>) -> Result<f64> {
    same_shape(plan_graph, plan_repr, "matching loss")?;
    Ok((plan_graph - plan_repr).mapv(|v| v * v).sum().sqrt())
}

/// `‖σF + (1 − σ)(E⊗π_G) − R‖_F`.
pub fn structure_loss(
    feature_cost: &Array2<f64>,
    structure_at_plan: &Array2<f64>,
    sigma: f64,
    repr_cost: &Array2<f64>,
) -> Result<f64> {
    same_shape(feature_cost, structure_at_plan, "structure loss")?;
    same_shape(feature_cost, repr_cost, "structure loss")?;
    let target = structure_target(feature_cost, structure_at_plan, sigma);
    Ok((&target - repr_cost).mapv(|v| v * v).sum().sqrt())
}

pub(crate) fn structure_target(f: &Array2<f64>, e: &Array2<f64>, sigma: f64) -> Array2<f64> {
    f * sigma + e * (1.0 - sigma)
}

/// `|D_g − D_n|`.
pub fn distance_only_loss(d_graph: f64, d_repr: f64) -> f64 {
    (d_graph - d_repr).abs()
}

/// Mean over pairs of `l_mat + rho · l_str`, reusing the per-pair values.
pub fn total_loss(views: Vec<ViewLoss>, rho: f64, mode: AblationMode) -> LossBreakdown {
    let mut views = views;
    for v in &mut views {
        v.objective = match mode {
            AblationMode::NoStr | AblationMode::Contrastive => v.l_mat,
            _ => v.l_mat + rho * v.l_str,
        };
    }
    let total = if views.is_empty() {
        0.0
    } else {
        views.iter().map(|v| v.objective).sum::<f64>() / views.len() as f64
    };
    LossBreakdown { mode, views, total }
}

/// Records InfoNCE `−(1/n) Σ_i [s_ii/τ − log Σ_k exp(s_ik/τ)]` on the tape.
pub fn record_contrastive(tape: &mut Tape, z1: Var, z2: Var, cfg: &ContrastiveConfig) -> Var {
    let sim = match cfg.similarity {
        Similarity::Cosine => {
            let dist = tape.cosine_cost(z1, z2);
            let neg = tape.scale(dist, -1.0);
            tape.add_scalar(neg, 1.0)
        }
        Similarity::Inner => {
            let z2t = tape.transpose(z2);
            tape.matmul(z1, z2t)
        }
    };
    let logits = tape.scale(sim, 1.0 / cfg.tau);
    let n = tape.value(logits).nrows();
    let lse = tape.row_logsumexp(logits);
    let eye = tape.leaf(Array2::eye(n));
    let diag = tape.mul(logits, eye);
    let diag_sum = tape.sum(diag);
    let lse_sum = tape.sum(lse);
    let gap = tape.sub(lse_sum, diag_sum);
    tape.scale(gap, 1.0 / n as f64)
}

/// InfoNCE between matching rows of `z1` and `z2`.
pub fn contrastive_loss(z1: &Array2<f64>, z2: &Array2<f64>, cfg: &ContrastiveConfig) -> Result<f64> {
    cfg.validate()?;
    same_shape(z1, z2, "contrastive loss")?;
    if z1.nrows() == 0 {
        return Err(HgotError::Input("contrastive loss needs at least one row".into()));
    }
    let mut tape = Tape::new();
    let a = tape.leaf(z1.clone());
    let b = tape.leaf(z2.clone());
    let l = record_contrastive(&mut tape, a, b, cfg);
    // the log-sum-exp never drops below the diagonal term
    Ok(tape.scalar_value(l).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn view(l_mat: f64, l_str: f64) -> ViewLoss {
        ViewLoss {
            name: "v".into(),
            l_mat,
            l_str,
            objective: 0.0,
            d_graph: 0.0,
            d_repr: 0.0,
            cg_iterations: 0,
            cg_converged: true,
            graph_plan_residual: 0.0,
            repr_plan_residual: 0.0,
            sinkhorn_iterations: 0,
        }
    }

    #[test]
    fn matching_examples() {
        let diag = array![[0.5, 0.0], [0.0, 0.5]];
        let uniform = Array2::from_elem((2, 2), 0.25);
        assert_eq!(matching_loss(&diag, &diag).unwrap(), 0.0);
        assert_abs_diff_eq!(matching_loss(&diag, &uniform).unwrap(), (4.0f64 * 0.0625).sqrt(), epsilon = 1e-15);
        assert_eq!(matching_loss(&diag, &uniform).unwrap(), matching_loss(&uniform, &diag).unwrap());
        assert!(matching_loss(&diag, &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn structure_examples() {
        let f = array![[0.2]];
        let e = array![[0.4]];
        assert_abs_diff_eq!(structure_loss(&f, &e, 0.5, &array![[0.1]]).unwrap(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(structure_loss(&f, &e, 0.5, &array![[0.3]]).unwrap(), 0.0, epsilon = 1e-15);
        let f = array![[0.1, 0.9], [0.4, 0.0]];
        let r = array![[0.3, 0.2], [0.0, 0.5]];
        let e = array![[7.0, 1.0], [3.0, 2.0]];
        let direct: f64 = (&f - &r).mapv(|v: f64| v * v).sum().sqrt();
        assert_abs_diff_eq!(structure_loss(&f, &e, 1.0, &r).unwrap(), direct, epsilon = 1e-15);
    }

    #[test]
    fn total_examples() {
        let single = total_loss(vec![view(0.5, 0.2)], 1.0, AblationMode::Full);
        assert_abs_diff_eq!(single.total, 0.7, epsilon = 1e-15);
        let two = total_loss(vec![view(0.5, 0.2), view(0.3, 0.4)], 1.0, AblationMode::Full);
        assert_abs_diff_eq!(two.total, 0.7, epsilon = 1e-15);
        let rho0 = total_loss(vec![view(0.5, 0.2), view(0.3, 0.4)], 0.0, AblationMode::Full);
        assert_abs_diff_eq!(rho0.total, 0.4, epsilon = 1e-15);
        for rho in [0.0, 1.0, 7.0] {
            let no_str = total_loss(vec![view(0.5, 0.2), view(0.3, 0.4)], rho, AblationMode::NoStr);
            assert_abs_diff_eq!(no_str.total, 0.4, epsilon = 1e-15);
        }
    }

    #[test]
    fn distance_only_examples() {
        assert_eq!(distance_only_loss(0.4, 0.4), 0.0);
        assert_abs_diff_eq!(distance_only_loss(0.8, 0.3), 0.5, epsilon = 1e-15);
        assert_eq!(distance_only_loss(0.3, 0.8), distance_only_loss(0.8, 0.3));
    }

    #[test]
    fn contrastive_examples() {
        let cfg = ContrastiveConfig::default();
        assert_eq!(contrastive_loss(&array![[1.0, 2.0]], &array![[3.0, -1.0]], &cfg).unwrap(), 0.0);
        // all four cosine similarities equal
        let z = array![[1.0, 0.0], [1.0, 0.0]];
        assert_abs_diff_eq!(contrastive_loss(&z, &z, &cfg).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        let inner = ContrastiveConfig { tau: 1.0, similarity: Similarity::Inner };
        let far = array![[50.0, 0.0], [0.0, 50.0]];
        assert!(contrastive_loss(&far, &far, &inner).unwrap() < 1e-12);
        assert!(contrastive_loss(&z, &z, &ContrastiveConfig { tau: 0.0, ..cfg }).is_err());
    }

    #[test]
    fn contrastive_matches_direct_formula() {
        let z1 = array![[0.3, -1.0, 0.2], [1.0, 0.5, 0.0], [-0.4, 0.1, 0.9]];
        let z2 = array![[0.1, -0.8, 0.5], [0.7, 0.7, -0.2], [0.0, 0.3, 1.0]];
        let cfg = ContrastiveConfig { tau: 0.3, similarity: Similarity::Inner };
        let n = 3;
        let mut expected = 0.0;
        for i in 0..n {
            let s: Vec<f64> = (0..n).map(|k| z1.row(i).dot(&z2.row(k)) / cfg.tau).collect();
            let lse = s.iter().map(|v| v.exp()).sum::<f64>().ln();
            expected += lse - s[i];
        }
        expected /= n as f64;
        assert_abs_diff_eq!(contrastive_loss(&z1, &z2, &cfg).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
        }
        assert!("nope".parse::<AblationMode>().is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { rho: -1.0, sigma: 0.5 }.validate().is_err());
        assert!(LossWeights { rho: 1.0, sigma: 1.5 }.validate().is_err());
    }
}
