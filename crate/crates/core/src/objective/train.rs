use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    record_contrastive, structure_target, total_loss, AblationMode, ContrastiveConfig, LossBreakdown, LossWeights,
    ViewLoss,
};
use crate::encoder::{forward, record_forward, EncoderConfig, EncoderParams, ForwardVars, ParamGrads};
use crate::error::{HgotError, Result};
use crate::hetgraph::{aggregate_adjacency, build_views, AggregatedStructure, HeteroGraph, MetaPath, MetaPathView};
use crate::par;
use crate::tape::{Tape, Unary, Var};
use crate::transport::{fgw_solve, residuals, sinkhorn_tape, FgwProblem, FgwSolution, Marginals, SolverConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs without a strict improvement of the training loss before stopping.
    pub patience: usize,
    /// Seeds parameter initialization.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub ablation: AblationMode,
    pub weights: LossWeights,
    pub solver: SolverConfig,
    pub contrastive: ContrastiveConfig,
    pub encoder: EncoderConfig,
}

/// Solver settings used for training: a coarser linear subproblem with a
/// small Sinkhorn budget keeps an epoch at n = 150 under 0.1 s.
fn training_solver() -> SolverConfig {
    SolverConfig {
        cg_max_iter: 10,
        cg_sub_epsilon: Some(0.02),
        cg_sub_max_iter: 100,
        ..SolverConfig::default()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            epochs: 200,
            patience: 20,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            ablation: AblationMode::Full,
            weights: LossWeights::default(),
            solver: training_solver(),
            contrastive: ContrastiveConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(HgotError::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.patience == 0 {
            return Err(HgotError::Config("patience must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(HgotError::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(HgotError::Config("adam_epsilon must be > 0".into()));
        }
        self.weights.validate()?;
        self.solver.validate()?;
        self.contrastive.validate()?;
        self.encoder.validate()
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: ParamGrads,
    v: ParamGrads,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_epsilon,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &ParamGrads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.tensors.get_mut(name) else {
                continue;
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
        }
    }
}

/// A graph with its views and aggregated structure, built once per run.
#[derive(Clone, Debug)]
pub struct TrainingContext {
    pub graph: HeteroGraph,
    pub views: Vec<MetaPathView>,
    pub aggregate: AggregatedStructure,
}

impl TrainingContext {
    pub fn new(graph: HeteroGraph, metapaths: &[MetaPath]) -> Result<Self> {
        if metapaths.is_empty() {
            return Err(HgotError::Config("at least one meta-path is required".into()));
        }
        let views = build_views(&graph, metapaths)?;
        let aggregate = aggregate_adjacency(&views)?;
        Ok(Self {
            graph,
            views,
            aggregate,
        })
    }

    pub fn view_names(&self) -> Vec<String> {
        self.views.iter().map(|v| v.metapath.name.clone()).collect()
    }

    /// `(source view, target view)` pairs to align; `None` is the aggregate.
    pub fn pairs(&self, mode: AblationMode) -> Result<Vec<(usize, Option<usize>)>> {
        let p = self.views.len();
        if mode == AblationMode::NoAgg {
            if p < 2 {
                return Err(HgotError::Config("no_agg needs at least two meta-paths".into()));
            }
            Ok((0..p).flat_map(|a| (a + 1..p).map(move |b| (a, Some(b)))).collect())
        } else {
            Ok((0..p).map(|a| (a, None)).collect())
        }
    }

    /// Node embeddings used downstream: the fused `Z_agg`, or the mean of
    /// the view embeddings when no aggregate is trained.
    pub fn embeddings(&self, params: &EncoderParams, mode: AblationMode) -> Result<Array2<f64>> {
        let out = forward(params, &self.graph, &self.views)?;
        if mode == AblationMode::NoAgg {
            let mut mean = Array2::zeros(out.fused.z_agg.dim());
            for v in &out.views {
                mean += &v.z;
            }
            Ok(mean / out.views.len() as f64)
        } else {
            Ok(out.fused.z_agg)
        }
    }
}

/// Detached graph-space quantities for one aligned pair.
#[derive(Clone, Debug)]
pub struct PairTarget {
    pub src: usize,
    pub dst: Option<usize>,
    pub name: String,
    /// `π*_G`; absent in contrastive mode.
    pub plan: Option<Array2<f64>>,
    /// `σF + (1 − σ)E⊗π*_G`.
    pub structure: Option<Array2<f64>>,
    pub d_graph: f64,
    pub cg_iterations: usize,
    pub cg_converged: bool,
    pub residual: f64,
}

fn pair_name(ctx: &TrainingContext, src: usize, dst: Option<usize>) -> String {
    match dst {
        Some(q) => format!("{}|{}", ctx.views[src].metapath.name, ctx.views[q].metapath.name),
        None => ctx.views[src].metapath.name.clone(),
    }
}

/// Fused graph-space plan of every aligned pair on the projected features
/// `h`, named like the loss columns. Pairs are solved in parallel.
pub fn graph_plans(h: &Array2<f64>, ctx: &TrainingContext, cfg: &TrainConfig) -> Result<Vec<(String, FgwSolution)>> {
    let pairs = ctx.pairs(cfg.ablation)?;
    let sigma = cfg.weights.sigma;
    par::map_slice(&pairs, |&(src, dst)| {
        let a_dst = match dst {
            Some(q) => ctx.views[q].adjacency.clone(),
            None => ctx.aggregate.adjacency.clone(),
        };
        let prob = FgwProblem::new(h.clone(), ctx.views[src].adjacency.clone(), h.clone(), a_dst, sigma)?;
        Ok((pair_name(ctx, src, dst), fgw_solve(&prob, &cfg.solver)?))
    })
    .into_iter()
    .collect()
}

/// Detached graph-space targets for every pair. Contrastive mode needs none
/// and skips the solves.
pub fn graph_targets(h: &Array2<f64>, ctx: &TrainingContext, cfg: &TrainConfig) -> Result<Vec<PairTarget>> {
    let pairs = ctx.pairs(cfg.ablation)?;
    if cfg.ablation == AblationMode::Contrastive {
        return Ok(pairs
            .into_iter()
            .map(|(src, dst)| PairTarget {
                src,
                dst,
                name: pair_name(ctx, src, dst),
                plan: None,
                structure: None,
                d_graph: 0.0,
                cg_iterations: 0,
                cg_converged: true,
                residual: 0.0,
            })
            .collect());
    }
    let sigma = cfg.weights.sigma;
    let solved = graph_plans(h, ctx, cfg)?;
    Ok(pairs
        .into_iter()
        .zip(solved)
        .map(|((src, dst), (name, sol))| PairTarget {
            src,
            dst,
            name,
            d_graph: sol.distance,
            cg_iterations: sol.iterations,
            cg_converged: sol.converged,
            residual: sol.plan.max_residual(),
            structure: Some(structure_target(&sol.feature_cost, &sol.structure_at_plan, sigma)),
            plan: Some(sol.plan.pi),
        })
        .collect())
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

/// Records the mode's loss on top of a recorded forward pass.
fn record_objective(
    tape: &mut Tape,
    fv: &ForwardVars,
    targets: &[PairTarget],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    if targets.is_empty() {
        return Err(HgotError::Config("nothing to align".into()));
    }
    let mode = cfg.ablation;
    let rho = cfg.weights.rho;
    let mut objectives = Vec::with_capacity(targets.len());
    let mut rows = Vec::with_capacity(targets.len());
    for t in targets {
        let z_src = fv.z[t.src];
        let z_dst = t.dst.map_or(fv.z_agg, |q| fv.z[q]);
        let mut row = ViewLoss {
            name: t.name.clone(),
            l_mat: 0.0,
            l_str: 0.0,
            objective: 0.0,
            d_graph: t.d_graph,
            d_repr: 0.0,
            cg_iterations: t.cg_iterations,
            cg_converged: t.cg_converged,
            graph_plan_residual: t.residual,
            repr_plan_residual: 0.0,
            sinkhorn_iterations: 0,
        };
        let objective = if mode == AblationMode::Contrastive {
            let l = record_contrastive(tape, z_src, z_dst, &cfg.contrastive);
            row.l_mat = tape.scalar_value(l);
            l
        } else {
            let (plan, structure) = match (&t.plan, &t.structure) {
                (Some(p), Some(s)) => (p, s),
                _ => return Err(HgotError::State(format!("pair {} has no graph plan", t.name))),
            };
            let r = tape.cosine_cost(z_src, z_dst);
            let (n, m) = tape.value(r).dim();
            let marg = Marginals::uniform(n, m);
            let sk = sinkhorn_tape(tape, r, &marg, &cfg.solver)?;
            row.d_repr = tape.scalar_value(sk.objective);
            let (rr, cr) = residuals(tape.value(sk.plan), &marg);
            row.repr_plan_residual = rr.max(cr);
            row.sinkhorn_iterations = cfg.solver.unroll_iters;

            let target = tape.leaf(structure.clone());
            let diff = tape.sub(r, target);
            let l_str = tape.frobenius(diff);
            row.l_str = tape.scalar_value(l_str);
            let weighted_str = tape.scale(l_str, rho);

            match mode {
                AblationMode::DistanceOnly => {
                    let shifted = tape.add_scalar(sk.objective, -t.d_graph);
                    let gap = tape.unary(shifted, Unary::Abs);
                    row.l_mat = tape.scalar_value(gap);
                    tape.add(gap, weighted_str)
                }
                _ => {
                    let pi_g = tape.leaf(plan.clone());
                    let diff = tape.sub(sk.plan, pi_g);
                    let l_mat = tape.frobenius(diff);
                    row.l_mat = tape.scalar_value(l_mat);
                    if mode == AblationMode::NoStr {
                        l_mat
                    } else {
                        tape.add(l_mat, weighted_str)
                    }
                }
            }
        };
        objectives.push(objective);
        rows.push(row);
    }
    let summed = sum_all(tape, &objectives);
    let total = tape.scale(summed, 1.0 / objectives.len() as f64);
    let breakdown = total_loss(rows, rho, mode);
    let recorded = tape.scalar_value(total);
    if !recorded.is_finite() || breakdown.views.iter().any(|v| !v.l_mat.is_finite() || !v.l_str.is_finite()) {
        let dump = serde_json::to_string(&breakdown).unwrap_or_default();
        return Err(HgotError::Numerical(format!("non-finite loss; state: {dump}")));
    }
    Ok((total, LossBreakdown { total: recorded, ..breakdown }))
}

/// Loss and parameter gradients with the graph-space targets held fixed.
pub fn loss_with_targets(
    params: &EncoderParams,
    ctx: &TrainingContext,
    targets: &[PairTarget],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ParamGrads)> {
    let mut tape = Tape::new();
    let fv = record_forward(&mut tape, params, &ctx.graph, &ctx.views)?;
    let (total, breakdown) = record_objective(&mut tape, &fv, targets, cfg)?;
    let grads = tape.backward(total);
    Ok((breakdown, fv.param_grads(&grads, params)))
}

/// Forward pass, graph-space solves on the detached `H`, loss, gradients.
pub fn loss_and_gradients(
    params: &EncoderParams,
    ctx: &TrainingContext,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ParamGrads, Vec<PairTarget>)> {
    let mut tape = Tape::new();
    let fv = record_forward(&mut tape, params, &ctx.graph, &ctx.views)?;
    let h = tape.value(fv.h).clone();
    let targets = graph_targets(&h, ctx, cfg)?;
    let (total, breakdown) = record_objective(&mut tape, &fv, &targets, cfg)?;
    let grads = tape.backward(total);
    Ok((breakdown, fv.param_grads(&grads, params), targets))
}

/// One optimizer step; the returned breakdown is the loss before the update.
pub fn train_step(
    params: &mut EncoderParams,
    optimizer: &mut Adam,
    ctx: &TrainingContext,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (breakdown, grads, _) = loss_and_gradients(params, ctx, cfg)?;
    optimizer.step(params, &grads);
    Ok(breakdown)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest recorded training loss.
    pub params: EncoderParams,
    pub history: Vec<LossBreakdown>,
    /// Embeddings of the returned parameters.
    pub embeddings: Array2<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Runs up to `cfg.epochs` steps with early stopping on the training loss.
pub fn train(g: &HeteroGraph, metapaths: &[MetaPath], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ctx = TrainingContext::new(g.clone(), metapaths)?;
    train_in_context(&ctx, cfg)
}

/// [`train`] on a prebuilt context.
pub fn train_in_context(ctx: &TrainingContext, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = EncoderParams::init(&cfg.encoder, &ctx.graph, &ctx.view_names(), cfg.seed)?;
    let mut optimizer = Adam::new(cfg);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let before = params.clone();
        let breakdown = train_step(&mut params, &mut optimizer, ctx, cfg)?;
        let total = breakdown.total;
        history.push(breakdown);
        match &best {
            Some((b, _, _)) if total >= *b => {
                stale += 1;
                if stale >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
            _ => {
                best = Some((total, epoch, before));
                stale = 0;
            }
        }
    }
    let (best_epoch, params) = match best {
        Some((_, e, p)) => (Some(e), p),
        None => (None, params),
    };
    let embeddings = ctx.embeddings(&params, cfg.ablation)?;
    Ok(TrainOutcome {
        params,
        history,
        embeddings,
        best_epoch,
        stopped_early,
    })
}

/// `epoch, l_mat_<pair>, l_str_<pair>, …, total, cg_iterations,
/// sinkhorn_iterations`; floats in shortest round-trip form.
pub fn write_loss_history(history: &[LossBreakdown], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("epoch");
    if let Some(first) = history.first() {
        for v in &first.views {
            write!(text, ",l_mat_{0},l_str_{0}", v.name).expect("string write");
        }
    }
    text.push_str(",total,cg_iterations,sinkhorn_iterations\n");
    for (epoch, b) in history.iter().enumerate() {
        write!(text, "{epoch}").expect("string write");
        for v in &b.views {
            write!(text, ",{},{}", v.l_mat, v.l_str).expect("string write");
        }
        let cg: usize = b.views.iter().map(|v| v.cg_iterations).sum();
        let sk: usize = b.views.iter().map(|v| v.sinkhorn_iterations).sum();
        writeln!(text, ",{},{cg},{sk}", b.total).expect("string write");
    }
    fs::write(path, text).map_err(|e| HgotError::io(path, e))
}
