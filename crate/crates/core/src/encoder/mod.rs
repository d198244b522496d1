//! Type-specific projection, per-meta-path graph attention and semantic
//! attention fusion, recorded on a [`Tape`] so every weight gets an exact
//! gradient.

mod checkpoint;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HgotError, Result};
use crate::hetgraph::{HeteroGraph, MetaPathView};
use crate::tape::{Gradients, Tape, Unary, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

/// Nonlinearity selector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    LeakyRelu { slope: f64 },
    Elu { alpha: f64 },
}

impl Activation {
    fn record(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.unary(x, Unary::Relu),
            Activation::Tanh => tape.tanh(x),
            Activation::LeakyRelu { slope } => tape.unary(x, Unary::LeakyRelu(slope)),
            Activation::Elu { alpha } => tape.unary(x, Unary::Elu(alpha)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Latent width shared by every projection and view embedding.
    pub d: usize,
    pub heads: usize,
    /// Hidden width of the semantic attention.
    pub d_m: usize,
    /// Attention layers per view; 0 passes the projected features through.
    pub depth: usize,
    /// Applied to attention logits.
    pub logit_activation: Activation,
    /// Applied to each head's aggregated output.
    pub output_activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 1,
            d_m: 32,
            depth: 1,
            logit_activation: Activation::LeakyRelu { slope: 0.2 },
            output_activation: Activation::Elu { alpha: 1.0 },
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d_m == 0 {
            return Err(HgotError::Config("d, heads and d_m must be at least 1".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(HgotError::Config(format!(
                "heads ({}) must divide d ({})",
                self.heads, self.d
            )));
        }
        Ok(())
    }

    /// Per-head width `m = d / heads`.
    pub fn head_output_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Every learnable tensor, keyed by a stable name.
///
/// Names: `proj.<type>.W` (d × raw), `proj.<type>.b` (1 × d),
/// `view.<path>.layer<l>.head<k>.W` (m × d) and `.a` (2m × 1),
/// `semantic.M` (d_m × d), `semantic.b` (1 × d_m), `semantic.q` (d_m × 1).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub node_types: Vec<String>,
    pub raw_dims: Vec<usize>,
    pub target_type: usize,
    /// Meta-path names, in the order views are passed to [`forward`].
    pub views: Vec<String>,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

pub type ParamGrads = BTreeMap<String, Array2<f64>>;

pub fn projection_names(node_type: &str) -> (String, String) {
    (format!("proj.{node_type}.W"), format!("proj.{node_type}.b"))
}

pub fn attention_names(view: &str, layer: usize, head: usize) -> (String, String) {
    let stem = format!("view.{view}.layer{layer}.head{head}");
    (format!("{stem}.W"), format!("{stem}.a"))
}

pub const SEMANTIC_M: &str = "semantic.M";
pub const SEMANTIC_B: &str = "semantic.b";
pub const SEMANTIC_Q: &str = "semantic.q";

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases. Tensors are drawn in name order
    /// from a ChaCha stream seeded with `seed`.
    pub fn init(config: &EncoderConfig, g: &HeteroGraph, views: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(HgotError::Config("at least one meta-path is required".into()));
        }
        let d = config.d;
        let m = config.head_output_dim();
        let mut shapes: BTreeMap<String, (usize, usize, usize, usize)> = BTreeMap::new();
        let mut zeros = Vec::new();
        for (t, raw) in g.node_types.iter().zip(g.raw_dims()) {
            let (w, b) = projection_names(&t.name);
            shapes.insert(w, (d, raw, raw, d));
            zeros.push((b, (1, d)));
        }
        for view in views {
            for layer in 0..config.depth {
                for head in 0..config.heads {
                    let (w, a) = attention_names(view, layer, head);
                    shapes.insert(w, (m, d, d, m));
                    shapes.insert(a, (2 * m, 1, 2 * m, 1));
                }
            }
        }
        shapes.insert(SEMANTIC_M.into(), (config.d_m, d, d, config.d_m));
        shapes.insert(SEMANTIC_Q.into(), (config.d_m, 1, config.d_m, 1));
        zeros.push((SEMANTIC_B.into(), (1, config.d_m)));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, (rows, cols, fan_in, fan_out)) in shapes {
            tensors.insert(name, glorot(&mut rng, rows, cols, fan_in, fan_out));
        }
        for (name, shape) in zeros {
            tensors.insert(name, Array2::zeros(shape));
        }
        Ok(Self {
            config: config.clone(),
            node_types: g.node_types.iter().map(|t| t.name.clone()).collect(),
            raw_dims: g.raw_dims(),
            target_type: g.target_type,
            views: views.to_vec(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| HgotError::Config(format!("missing parameter {name}")))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Checks names, shapes and finiteness against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d;
        let m = self.config.head_output_dim();
        let mut expected: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (t, &raw) in self.node_types.iter().zip(&self.raw_dims) {
            let (w, b) = projection_names(t);
            expected.insert(w, (d, raw));
            expected.insert(b, (1, d));
        }
        for view in &self.views {
            for layer in 0..self.config.depth {
                for head in 0..self.config.heads {
                    let (w, a) = attention_names(view, layer, head);
                    expected.insert(w, (m, d));
                    expected.insert(a, (2 * m, 1));
                }
            }
        }
        expected.insert(SEMANTIC_M.into(), (self.config.d_m, d));
        expected.insert(SEMANTIC_B.into(), (1, self.config.d_m));
        expected.insert(SEMANTIC_Q.into(), (self.config.d_m, 1));
        if expected.len() != self.tensors.len() {
            let extra: Vec<_> = self.tensors.keys().filter(|k| !expected.contains_key(*k)).collect();
            if let Some(name) = extra.first() {
                return Err(HgotError::Config(format!("unexpected parameter {name}")));
            }
        }
        for (name, shape) in expected {
            let t = self.get(&name)?;
            if t.dim() != shape {
                return Err(HgotError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.dim()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(HgotError::Numerical(format!("parameter {name} is not finite")));
            }
        }
        if self.target_type >= self.node_types.len() {
            return Err(HgotError::Config("target type out of range".into()));
        }
        Ok(())
    }

    fn check_graph(&self, g: &HeteroGraph) -> Result<()> {
        let names: Vec<&str> = g.node_types.iter().map(|t| t.name.as_str()).collect();
        let own: Vec<&str> = self.node_types.iter().map(String::as_str).collect();
        if names != own || g.target_type != self.target_type {
            return Err(HgotError::Config("parameters were built for different node types".into()));
        }
        for ((t, raw), x) in self.node_types.iter().zip(&self.raw_dims).zip(&g.features) {
            if x.ncols() != *raw {
                return Err(HgotError::Config(format!(
                    "node type {t} has {} raw features but the projection expects {raw}",
                    x.ncols()
                )));
            }
        }
        Ok(())
    }

    /// Elementwise `self − lr · grads`, for tests and simple optimizers.
    pub fn apply_step(&mut self, grads: &ParamGrads, lr: f64) {
        for (name, g) in grads {
            if let Some(t) = self.tensors.get_mut(name) {
                t.scaled_add(-lr, g);
            }
        }
    }
}

/// Leaves and outputs of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub leaves: BTreeMap<String, Var>,
    /// Projected target features `H`.
    pub h: Var,
    /// One embedding per view, `Z_p`.
    pub z: Vec<Var>,
    /// Attention matrices of the last layer, `[view][head]`, n×n.
    pub attention: Vec<Vec<Var>>,
    pub omega: Vec<Var>,
    /// 1×P semantic weights.
    pub beta: Var,
    pub z_agg: Var,
}

impl ForwardVars {
    /// Collects parameter adjoints; parameters the loss never touched get zeros.
    pub fn param_grads(&self, grads: &Gradients, params: &EncoderParams) -> ParamGrads {
        params
            .tensors
            .iter()
            .map(|(name, t)| {
                let g = match self.leaves.get(name) {
                    Some(&v) => grads.get_or_zeros(v, t.dim()).as_standard_layout().into_owned(),
                    None => Array2::zeros(t.dim()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}

fn check_views(params: &EncoderParams, views: &[MetaPathView], n: usize) -> Result<()> {
    let names: Vec<&str> = views.iter().map(|v| v.metapath.name.as_str()).collect();
    let own: Vec<&str> = params.views.iter().map(String::as_str).collect();
    if names != own {
        return Err(HgotError::Config(format!(
            "views {names:?} do not match parameter views {own:?}"
        )));
    }
    for v in views {
        if v.n != n || v.adjacency.dim() != (n, n) {
            return Err(HgotError::Input(format!(
                "view {} covers {} nodes, features have {n}",
                v.metapath.name, v.n
            )));
        }
    }
    Ok(())
}

fn record_projection(tape: &mut Tape, leaves: &BTreeMap<String, Var>, params: &EncoderParams, x: &Array2<f64>) -> Result<Var> {
    let (w, b) = projection_names(&params.node_types[params.target_type]);
    if x.ncols() != params.raw_dims[params.target_type] {
        return Err(HgotError::Config(format!(
            "target features have {} columns, projection expects {}",
            x.ncols(),
            params.raw_dims[params.target_type]
        )));
    }
    let xv = tape.leaf(x.clone());
    let wt = tape.transpose(leaves[&w]);
    let xw = tape.matmul(xv, wt);
    Ok(tape.add_row(xw, leaves[&b]))
}

/// One attention layer for one view; returns the concatenated heads and the
/// per-head attention matrices.
fn record_attention(
    tape: &mut Tape,
    leaves: &BTreeMap<String, Var>,
    config: &EncoderConfig,
    input: Var,
    view: &MetaPathView,
    layer: usize,
) -> (Var, Vec<Var>) {
    let m = config.head_output_dim();
    let neighbors = view.neighborhoods();
    let mut heads = Vec::with_capacity(config.heads);
    let mut alphas = Vec::with_capacity(config.heads);
    for head in 0..config.heads {
        let (w, a) = attention_names(&view.metapath.name, layer, head);
        let wt = tape.transpose(leaves[&w]);
        let wh = tape.matmul(input, wt);
        let a_row = tape.transpose(leaves[&a]);
        let a_src = tape.slice_cols(a_row, 0, m);
        let a_dst = tape.slice_cols(a_row, m, 2 * m);
        let a_src = tape.transpose(a_src);
        let a_dst = tape.transpose(a_dst);
        let s = tape.matmul(wh, a_src);
        let t = tape.matmul(wh, a_dst);
        let raw = tape.outer_sum(s, t);
        let logits = config.logit_activation.record(tape, raw);
        let alpha = tape.masked_softmax(logits, neighbors.clone());
        let mixed = tape.matmul(alpha, wh);
        heads.push(config.output_activation.record(tape, mixed));
        alphas.push(alpha);
    }
    let out = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
    (out, alphas)
}

/// Semantic attention over view embeddings; returns `(ω, β, Z_agg)`.
fn record_fusion(tape: &mut Tape, leaves: &BTreeMap<String, Var>, z: &[Var]) -> (Vec<Var>, Var, Var) {
    let mt = tape.transpose(leaves[SEMANTIC_M]);
    let mut omega = Vec::with_capacity(z.len());
    for &zp in z {
        let proj = tape.matmul(zp, mt);
        let shifted = tape.add_row(proj, leaves[SEMANTIC_B]);
        let act = tape.tanh(shifted);
        let scores = tape.matmul(act, leaves[SEMANTIC_Q]);
        omega.push(tape.mean(scores));
    }
    let omega_row = if omega.len() == 1 { omega[0] } else { tape.concat_cols(&omega) };
    let beta = tape.row_softmax(omega_row);
    let mut z_agg = None;
    for (p, &zp) in z.iter().enumerate() {
        let bp = tape.slice_cols(beta, p, p + 1);
        let term = tape.scale_by(zp, bp);
        z_agg = Some(match z_agg {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    (omega, beta, z_agg.expect("at least one view"))
}

/// Records the whole encoder on `tape`, with one leaf per parameter tensor.
pub fn record_forward(
    tape: &mut Tape,
    params: &EncoderParams,
    g: &HeteroGraph,
    views: &[MetaPathView],
) -> Result<ForwardVars> {
    params.validate()?;
    params.check_graph(g)?;
    let n = g.target_count();
    check_views(params, views, n)?;
    let leaves: BTreeMap<String, Var> = params
        .tensors
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
        .collect();
    let h = record_projection(tape, &leaves, params, g.target_features())?;
    let mut z = Vec::with_capacity(views.len());
    let mut attention = Vec::with_capacity(views.len());
    for view in views {
        let mut current = h;
        let mut alphas = Vec::new();
        for layer in 0..params.config.depth {
            let (out, a) = record_attention(tape, &leaves, &params.config, current, view, layer);
            current = out;
            alphas = a;
        }
        z.push(current);
        attention.push(alphas);
    }
    let (omega, beta, z_agg) = record_fusion(tape, &leaves, &z);
    Ok(ForwardVars {
        leaves,
        h,
        z,
        attention,
        omega,
        beta,
        z_agg,
    })
}

/// Projected target-node features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedFeatures {
    pub h: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewRepresentation {
    pub z: Array2<f64>,
    /// One n×n row-stochastic matrix per head, zero outside the neighborhood.
    pub attention: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedRepresentation {
    pub z_agg: Array2<f64>,
    pub beta: Vec<f64>,
    pub omega: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub h: ProjectedFeatures,
    pub views: Vec<ViewRepresentation>,
    pub fused: FusedRepresentation,
}

/// `h_i = W x_i + b` for every target node.
pub fn project_features(params: &EncoderParams, g: &HeteroGraph) -> Result<ProjectedFeatures> {
    params.validate()?;
    params.check_graph(g)?;
    let mut tape = Tape::new();
    let leaves = params
        .tensors
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
        .collect();
    let h = record_projection(&mut tape, &leaves, params, g.target_features())?;
    Ok(ProjectedFeatures {
        h: tape.value(h).clone(),
    })
}

/// First attention layer of `view` applied to `h`.
pub fn node_attention_layer(h: &ProjectedFeatures, view: &MetaPathView, params: &EncoderParams) -> Result<ViewRepresentation> {
    params.validate()?;
    if view.n != h.h.nrows() {
        return Err(HgotError::Input(format!(
            "view has {} nodes, features have {}",
            view.n,
            h.h.nrows()
        )));
    }
    if h.h.ncols() != params.config.d {
        return Err(HgotError::Config(format!("features have width {}, d = {}", h.h.ncols(), params.config.d)));
    }
    if params.config.depth == 0 {
        return Err(HgotError::Config("encoder has no attention layers".into()));
    }
    let mut tape = Tape::new();
    let leaves: BTreeMap<String, Var> = params
        .tensors
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
        .collect();
    if !leaves.contains_key(&attention_names(&view.metapath.name, 0, 0).0) {
        return Err(HgotError::Config(format!("no attention weights for view {}", view.metapath.name)));
    }
    let input = tape.leaf(h.h.clone());
    let (out, alphas) = record_attention(&mut tape, &leaves, &params.config, input, view, 0);
    Ok(ViewRepresentation {
        z: tape.value(out).clone(),
        attention: alphas.iter().map(|&a| tape.value(a).clone()).collect(),
    })
}

/// Semantic-attention fusion of view embeddings.
pub fn semantic_fuse(views: &[Array2<f64>], params: &EncoderParams) -> Result<FusedRepresentation> {
    let first = views
        .first()
        .ok_or_else(|| HgotError::Input("semantic fusion needs at least one view".into()))?;
    if views.iter().any(|z| z.dim() != first.dim()) {
        return Err(HgotError::Input("view embeddings differ in shape".into()));
    }
    if first.ncols() != params.config.d {
        return Err(HgotError::Config(format!("embeddings have width {}, d = {}", first.ncols(), params.config.d)));
    }
    let mut tape = Tape::new();
    let mut leaves = BTreeMap::new();
    for name in [SEMANTIC_M, SEMANTIC_B, SEMANTIC_Q] {
        leaves.insert(name.to_string(), tape.leaf(params.get(name)?.clone()));
    }
    let z: Vec<Var> = views.iter().map(|v| tape.leaf(v.clone())).collect();
    let (omega, beta, z_agg) = record_fusion(&mut tape, &leaves, &z);
    Ok(FusedRepresentation {
        z_agg: tape.value(z_agg).clone(),
        beta: tape.value(beta).iter().copied().collect(),
        omega: omega.iter().map(|&w| tape.scalar_value(w)).collect(),
    })
}

fn collect_output(tape: &Tape, vars: &ForwardVars) -> ForwardOutput {
    ForwardOutput {
        h: ProjectedFeatures {
            h: tape.value(vars.h).clone(),
        },
        views: vars
            .z
            .iter()
            .zip(&vars.attention)
            .map(|(&z, alphas)| ViewRepresentation {
                z: tape.value(z).clone(),
                attention: alphas.iter().map(|&a| tape.value(a).clone()).collect(),
            })
            .collect(),
        fused: FusedRepresentation {
            z_agg: tape.value(vars.z_agg).clone(),
            beta: tape.value(vars.beta).iter().copied().collect(),
            omega: vars.omega.iter().map(|&w| tape.scalar_value(w)).collect(),
        },
    }
}

/// Full pass: projection, per-view attention, fusion.
pub fn forward(params: &EncoderParams, g: &HeteroGraph, views: &[MetaPathView]) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = record_forward(&mut tape, params, g, views)?;
    Ok(collect_output(&tape, &vars))
}

/// Owns parameters plus the most recent recorded forward pass, so that
/// gradients at the outputs can be pulled back to the weights.
#[derive(Debug)]
pub struct Encoder {
    pub params: EncoderParams,
    recorded: Option<(Tape, ForwardVars)>,
}

impl Encoder {
    pub fn new(params: EncoderParams) -> Self {
        Self { params, recorded: None }
    }

    pub fn forward(&mut self, g: &HeteroGraph, views: &[MetaPathView]) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars = record_forward(&mut tape, &self.params, g, views)?;
        let out = collect_output(&tape, &vars);
        self.recorded = Some((tape, vars));
        Ok(out)
    }

    /// Parameter gradients of a scalar loss given its gradients with respect
    /// to each `Z_p` and to `Z_agg`.
    pub fn backward(&self, grad_z: &[Array2<f64>], grad_z_agg: &Array2<f64>) -> Result<ParamGrads> {
        let (tape, vars) = self
            .recorded
            .as_ref()
            .ok_or_else(|| HgotError::State("backward called before forward".into()))?;
        if grad_z.len() != vars.z.len() {
            return Err(HgotError::Input(format!(
                "expected {} view gradients, got {}",
                vars.z.len(),
                grad_z.len()
            )));
        }
        let mut seeds = Vec::with_capacity(grad_z.len() + 1);
        for (&z, g) in vars.z.iter().zip(grad_z) {
            if tape.value(z).dim() != g.dim() {
                return Err(HgotError::Input("view gradient shape mismatch".into()));
            }
            seeds.push((z, g.clone()));
        }
        if tape.value(vars.z_agg).dim() != grad_z_agg.dim() {
            return Err(HgotError::Input("aggregate gradient shape mismatch".into()));
        }
        seeds.push((vars.z_agg, grad_z_agg.clone()));
        let grads = tape.backward_from(&seeds);
        Ok(vars.param_grads(&grads, &self.params))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::hetgraph::{build_views, generate_synthetic, SyntheticConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    pub(crate) fn small_setup(n: usize, seed: u64) -> (HeteroGraph, Vec<MetaPathView>) {
        let g = generate_synthetic(&SyntheticConfig {
            n_target: n,
            n_bridge_per_relation: 4,
            n_communities: 2,
            intra_edge_prob: 0.5,
            inter_edge_prob: 0.1,
            feature_dim: 3,
            feature_noise: 0.5,
            seed,
        })
        .unwrap();
        let views = build_views(&g, &g.metapaths).unwrap();
        (g, views)
    }

    fn view_names(views: &[MetaPathView]) -> Vec<String> {
        views.iter().map(|v| v.metapath.name.clone()).collect()
    }

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            d: 4,
            heads: 2,
            d_m: 3,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig { heads: 3, ..EncoderConfig::default() }.validate().is_err());
        assert!(EncoderConfig { d_m: 0, ..EncoderConfig::default() }.validate().is_err());
        assert_eq!(EncoderConfig { heads: 4, ..EncoderConfig::default() }.head_output_dim(), 16);
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let (g, views) = small_setup(6, 0);
        let names = view_names(&views);
        let a = EncoderParams::init(&small_config(), &g, &names, 7).unwrap();
        let b = EncoderParams::init(&small_config(), &g, &names, 7).unwrap();
        let c = EncoderParams::init(&small_config(), &g, &names, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
        assert_eq!(a.get("proj.paper.W").unwrap().dim(), (4, 3));
        assert_eq!(a.get("view.PAP.layer0.head1.a").unwrap().dim(), (4, 1));
        assert!(a.get("proj.paper.b").unwrap().iter().all(|&v| v == 0.0));
    }

    fn with_projection(params: &mut EncoderParams, w: Array2<f64>, b: Array2<f64>) {
        params.tensors.insert("proj.paper.W".into(), w);
        params.tensors.insert("proj.paper.b".into(), b);
    }

    #[test]
    fn projection_examples() {
        let (mut g, views) = small_setup(3, 1);
        let cfg = EncoderConfig { d: 3, heads: 1, ..small_config() };
        let mut params = EncoderParams::init(&cfg, &g, &view_names(&views), 0).unwrap();
        with_projection(&mut params, Array2::eye(3), Array2::zeros((1, 3)));
        let h = project_features(&params, &g).unwrap();
        assert_eq!(&h.h, g.target_features());

        g.features[0].fill(0.0);
        let bias = array![[0.5, -1.0, 2.0]];
        with_projection(&mut params, Array2::eye(3), bias.clone());
        let h = project_features(&params, &g).unwrap();
        for row in h.h.rows() {
            assert_eq!(row, bias.row(0));
        }
    }

    #[test]
    fn projection_hand_example() {
        let (mut g, views) = small_setup(2, 1);
        g.features[0] = array![[1.0, 1.0], [0.0, 0.0]];
        let cfg = EncoderConfig { d: 2, heads: 1, d_m: 2, ..EncoderConfig::default() };
        let mut params = EncoderParams::init(&cfg, &g, &view_names(&views), 0).unwrap();
        params.raw_dims[0] = 2;
        with_projection(&mut params, array![[1.0, 2.0], [0.0, 1.0]], array![[0.0, 1.0]]);
        let h = project_features(&params, &g).unwrap();
        assert_eq!(h.h.row(0), array![3.0, 2.0]);
        assert_eq!(h.h.row(1), array![0.0, 1.0]);
    }

    #[test]
    fn projection_shape_mismatch_is_config_error() {
        let (mut g, views) = small_setup(3, 1);
        let params = EncoderParams::init(&small_config(), &g, &view_names(&views), 0).unwrap();
        g.features[0] = Array2::zeros((3, 5));
        assert!(matches!(project_features(&params, &g), Err(HgotError::Config(_))));
    }

    fn single_view(adjacency: Array2<f64>) -> MetaPathView {
        let n = adjacency.nrows();
        MetaPathView {
            metapath: crate::hetgraph::MetaPath::new("PAP", &["PA", "PA"]),
            adjacency,
            n,
        }
    }

    fn one_view_params(d: usize, heads: usize, output: Activation, logit: Activation) -> EncoderParams {
        let (g, _) = small_setup(3, 0);
        let cfg = EncoderConfig {
            d,
            heads,
            d_m: 2,
            depth: 1,
            logit_activation: logit,
            output_activation: output,
        };
        EncoderParams::init(&cfg, &g, &["PAP".to_string()], 3).unwrap()
    }

    #[test]
    fn singleton_neighborhood_passes_through() {
        let params = one_view_params(2, 1, Activation::Elu { alpha: 1.0 }, Activation::LeakyRelu { slope: 0.2 });
        let h = ProjectedFeatures {
            h: array![[0.3, -0.7], [1.0, 2.0]],
        };
        let rep = node_attention_layer(&h, &single_view(Array2::eye(2)), &params).unwrap();
        let w = params.get("view.PAP.layer0.head0.W").unwrap();
        for i in 0..2 {
            assert_eq!(rep.attention[0][[i, i]], 1.0);
            let wh = w.dot(&h.h.row(i));
            for (k, &v) in wh.iter().enumerate() {
                let expected = if v > 0.0 { v } else { v.exp_m1() };
                assert_abs_diff_eq!(rep.z[[i, k]], expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn equal_logits_split_evenly() {
        let params = one_view_params(2, 1, Activation::Identity, Activation::Identity);
        // identical rows give identical logits for both neighbors
        let h = ProjectedFeatures {
            h: array![[0.4, 0.1], [0.4, 0.1]],
        };
        let rep = node_attention_layer(&h, &single_view(Array2::ones((2, 2))), &params).unwrap();
        for v in rep.attention[0].iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn path_graph_hand_evaluation() {
        let mut params = one_view_params(2, 1, Activation::Identity, Activation::Identity);
        params.tensors.insert("view.PAP.layer0.head0.W".into(), Array2::ones((2, 2)));
        params.tensors.insert("view.PAP.layer0.head0.a".into(), Array2::ones((4, 1)));
        let h = ProjectedFeatures {
            h: array![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]],
        };
        // path 0 - 1 - 2 with self loops
        let adj = array![[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]];
        let rep = node_attention_layer(&h, &single_view(adj.clone()), &params).unwrap();
        // Wh_i = (s_i, s_i) with s_i = row sum; logit_ij = 2 s_i + 2 s_j
        let s: [f64; 3] = [1.0, 2.0, 2.0];
        for i in 0..3 {
            let nbrs: Vec<usize> = (0..3).filter(|&j| adj[[i, j]] == 1.0).collect();
            let weights: Vec<f64> = nbrs.iter().map(|&j| (2.0 * s[i] + 2.0 * s[j]).exp()).collect();
            let total: f64 = weights.iter().sum();
            let out: f64 = nbrs.iter().zip(&weights).map(|(&j, w)| w / total * s[j]).sum();
            for k in 0..2 {
                assert_abs_diff_eq!(rep.z[[i, k]], out, epsilon = 1e-12);
            }
            let row_sum: f64 = rep.attention[0].row(i).sum();
            assert_abs_diff_eq!(row_sum, 1.0, epsilon = 1e-12);
        }
    }

    fn semantic_params() -> EncoderParams {
        let mut params = one_view_params(2, 1, Activation::Identity, Activation::Identity);
        params.config.d_m = 1;
        params.tensors.insert(SEMANTIC_Q.into(), array![[1.0]]);
        params.tensors.insert(SEMANTIC_M.into(), array![[1.0, 0.0]]);
        params.tensors.insert(SEMANTIC_B.into(), array![[0.0]]);
        params
    }

    #[test]
    fn semantic_fusion_examples() {
        let params = semantic_params();
        let z1 = array![[0.0, 5.0]];
        let z2 = array![[1.0, -3.0]];
        let single = semantic_fuse(std::slice::from_ref(&z1), &params).unwrap();
        assert_eq!(single.beta, vec![1.0]);
        assert_eq!(single.z_agg, z1);

        let same = semantic_fuse(&[z2.clone(), z2.clone()], &params).unwrap();
        assert_eq!(same.beta, vec![0.5, 0.5]);
        assert_abs_diff_eq!(same.z_agg[[0, 0]], z2[[0, 0]], epsilon = 1e-15);

        let fused = semantic_fuse(&[z1.clone(), z2.clone()], &params).unwrap();
        let w2 = 1f64.tanh();
        let b1 = 1.0 / (1.0 + w2.exp());
        assert_abs_diff_eq!(fused.omega[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(fused.omega[1], w2, epsilon = 1e-15);
        assert_abs_diff_eq!(fused.beta[0], b1, epsilon = 1e-15);
        // four-decimal hand value
        assert!((fused.beta[1] - 0.6817).abs() < 1e-4);
        assert_abs_diff_eq!(fused.beta.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let expected = &z1 * b1 + &z2 * (1.0 - b1);
        for (a, b) in fused.z_agg.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_depth_bypasses_attention() {
        let (g, views) = small_setup(5, 2);
        let cfg = EncoderConfig { depth: 0, ..small_config() };
        let params = EncoderParams::init(&cfg, &g, &view_names(&views), 0).unwrap();
        let out = forward(&params, &g, &views).unwrap();
        for v in &out.views {
            assert_eq!(v.z, out.h.h);
        }
    }

    #[test]
    fn forward_is_deterministic_and_consistent() {
        let (g, views) = small_setup(7, 3);
        let params = EncoderParams::init(&small_config(), &g, &view_names(&views), 1).unwrap();
        let a = forward(&params, &g, &views).unwrap();
        let b = forward(&params, &g, &views).unwrap();
        assert_eq!(a, b);
        let h = project_features(&params, &g).unwrap();
        assert_eq!(h, a.h);
        let rep = node_attention_layer(&h, &views[0], &params).unwrap();
        assert_eq!(rep, a.views[0]);
        let zs: Vec<_> = a.views.iter().map(|v| v.z.clone()).collect();
        assert_eq!(semantic_fuse(&zs, &params).unwrap(), a.fused);
        for v in &a.views {
            for alpha in &v.attention {
                for row in alpha.rows() {
                    assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
                    assert!(row.iter().all(|&x| x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn single_metapath_aggregate_is_the_view() {
        let (g, views) = small_setup(5, 4);
        let params = EncoderParams::init(&small_config(), &g, &view_names(&views[..1]), 1).unwrap();
        let out = forward(&params, &g, &views[..1]).unwrap();
        assert_eq!(out.fused.beta, vec![1.0]);
        assert_eq!(out.fused.z_agg, out.views[0].z);
    }

    #[test]
    fn backward_requires_forward() {
        let (g, views) = small_setup(4, 0);
        let params = EncoderParams::init(&small_config(), &g, &view_names(&views), 0).unwrap();
        let enc = Encoder::new(params);
        let r = enc.backward(&[], &Array2::zeros((4, 4)));
        assert!(matches!(r, Err(HgotError::State(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let (g, views) = small_setup(4, 0);
        let params = EncoderParams::init(&small_config(), &g, &view_names(&views), 0).unwrap();
        let mut enc = Encoder::new(params);
        enc.forward(&g, &views).unwrap();
        let zeros = vec![Array2::zeros((4, 4)); 2];
        let grads = enc.backward(&zeros, &Array2::zeros((4, 4))).unwrap();
        assert_eq!(grads.len(), enc.params.tensors.len());
        assert!(grads.values().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    /// Central differences on `Σ Z_agg ⊙ weights`.
    fn check_gradients(cfg: EncoderConfig, n: usize, seed: u64) {
        let (g, views) = small_setup(n, seed);
        let params = EncoderParams::init(&cfg, &g, &view_names(&views), seed).unwrap();
        let (n, d) = (g.target_count(), cfg.d);
        let weights = Array2::from_shape_fn((n, d), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let loss = |p: &EncoderParams| (&forward(p, &g, &views).unwrap().fused.z_agg * &weights).sum();
        let mut enc = Encoder::new(params.clone());
        enc.forward(&g, &views).unwrap();
        let zeros = vec![Array2::zeros((n, d)); views.len()];
        let grads = enc.backward(&zeros, &weights).unwrap();
        let h = 1e-5;
        for (name, tensor) in &params.tensors {
            for idx in 0..tensor.len() {
                let mut plus = params.clone();
                plus.tensors.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += h;
                let mut minus = params.clone();
                minus.tensors.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = grads[name].as_slice().unwrap()[idx];
                let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / scale < 1e-4,
                    "{name}[{idx}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(small_config(), 6, 11);
        check_gradients(
            EncoderConfig {
                d: 3,
                heads: 1,
                d_m: 2,
                depth: 2,
                logit_activation: Activation::Tanh,
                output_activation: Activation::Tanh,
            },
            5,
            12,
        );
    }

    #[test]
    fn identity_bias_gradient_closed_form() {
        // depth 0, W = I: Z_p = H = X + b for every view, and Z_agg = H since
        // the betas sum to one, so d(Σ Z_agg)/db = n in every coordinate.
        let (g, views) = small_setup(5, 5);
        let cfg = EncoderConfig { d: 3, heads: 1, d_m: 2, depth: 0, ..EncoderConfig::default() };
        let mut params = EncoderParams::init(&cfg, &g, &view_names(&views), 0).unwrap();
        with_projection(&mut params, Array2::eye(3), Array2::zeros((1, 3)));
        let mut enc = Encoder::new(params);
        enc.forward(&g, &views).unwrap();
        let zeros = vec![Array2::zeros((5, 3)); 2];
        let grads = enc.backward(&zeros, &Array2::ones((5, 3))).unwrap();
        for &v in grads["proj.paper.b"].iter() {
            assert_abs_diff_eq!(v, 5.0, epsilon = 1e-12);
        }
        assert!(grads["proj.author.W"].iter().all(|&v| v == 0.0));
    }
}
