//! Heterogeneous graphs, meta-path views and the OR-aggregated structure.

mod io;
mod synthetic;

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{HgotError, Result};
use crate::par;
use crate::tape::Neighborhoods;

pub use io::{load_heterograph, write_heterograph};
pub use synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeType {
    pub name: String,
    pub count: usize,
}

/// A typed edge relation. `pairs` are `(src_index, dst_index)` within the
/// source and destination node types.
#[derive(Clone, Debug, PartialEq)]
pub struct Relation {
    pub name: String,
    pub src_type: usize,
    pub dst_type: usize,
    pub pairs: Vec<(usize, usize)>,
}

/// A composite relation from the target type back to the target type.
///
/// Each step names a relation. A step is traversed forward when the current
/// node type is the relation's source and backward when it is the
/// destination; prefix the name with `~` to force the backward direction
/// (needed for relations whose source and destination types coincide).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaPath {
    pub name: String,
    pub edges: Vec<String>,
}

impl MetaPath {
    pub fn new(name: impl Into<String>, edges: &[&str]) -> Self {
        Self {
            name: name.into(),
            edges: edges.iter().map(|e| e.to_string()).collect(),
        }
    }
}

/// A typed multi-relational graph with per-type dense features.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub node_types: Vec<NodeType>,
    pub relations: Vec<Relation>,
    /// One matrix per node type; rows are nodes, columns raw features.
    pub features: Vec<Array2<f64>>,
    pub target_type: usize,
    /// Class per target node, if known.
    pub labels: Option<Vec<usize>>,
    /// Meta-paths declared with the dataset.
    pub metapaths: Vec<MetaPath>,
    /// Allows a single node type with a single relation (testing only).
    pub homogeneous: bool,
}

impl HeteroGraph {
    /// Checks every structural invariant and returns the graph unchanged.
    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n_types = self.node_types.len();
        if n_types == 0 {
            return Err(HgotError::Input("graph has no node types".into()));
        }
        if self.target_type >= n_types {
            return Err(HgotError::Input(format!(
                "target type index {} out of range",
                self.target_type
            )));
        }
        let mut names = BTreeSet::new();
        for t in &self.node_types {
            if !names.insert(t.name.as_str()) {
                return Err(HgotError::Input(format!("duplicate node type '{}'", t.name)));
            }
        }
        if !self.homogeneous && n_types + self.relations.len() <= 2 {
            return Err(HgotError::Input(format!(
                "{} node types and {} edge types is not heterogeneous; set the homogeneous flag to allow it",
                n_types,
                self.relations.len()
            )));
        }
        let mut rel_names = BTreeSet::new();
        for rel in &self.relations {
            if !rel_names.insert(rel.name.as_str()) {
                return Err(HgotError::Input(format!("duplicate edge type '{}'", rel.name)));
            }
            if rel.name.starts_with('~') {
                return Err(HgotError::Input(format!(
                    "edge type '{}' may not start with '~'",
                    rel.name
                )));
            }
            if rel.src_type >= n_types || rel.dst_type >= n_types {
                return Err(HgotError::Input(format!(
                    "edge type '{}' references an unknown node type",
                    rel.name
                )));
            }
            let (ns, nd) = (
                self.node_types[rel.src_type].count,
                self.node_types[rel.dst_type].count,
            );
            for &(s, d) in &rel.pairs {
                if s >= ns || d >= nd {
                    return Err(HgotError::Input(format!(
                        "edge ({s}, {d}) of type '{}' exceeds node counts ({ns}, {nd})",
                        rel.name
                    )));
                }
            }
        }
        if self.features.len() != n_types {
            return Err(HgotError::Input(format!(
                "{} feature matrices for {} node types",
                self.features.len(),
                n_types
            )));
        }
        for (t, x) in self.node_types.iter().zip(&self.features) {
            if x.nrows() != t.count {
                return Err(HgotError::Input(format!(
                    "feature matrix for node type '{}' has {} rows, expected {}",
                    t.name,
                    x.nrows(),
                    t.count
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(HgotError::Input(format!(
                    "non-finite feature for node type '{}'",
                    t.name
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.target_count() {
                return Err(HgotError::Input(format!(
                    "{} labels for {} target nodes",
                    labels.len(),
                    self.target_count()
                )));
            }
        }
        Ok(())
    }

    pub fn target_count(&self) -> usize {
        self.node_types[self.target_type].count
    }

    pub fn target_features(&self) -> &Array2<f64> {
        &self.features[self.target_type]
    }

    /// Raw feature width per node type.
    pub fn raw_dims(&self) -> Vec<usize> {
        self.features.iter().map(|x| x.ncols()).collect()
    }

    pub fn node_type_index(&self, name: &str) -> Option<usize> {
        self.node_types.iter().position(|t| t.name == name)
    }

    pub fn relation(&self, name: &str) -> Option<&Relation> {
        self.relations.iter().find(|r| r.name == name)
    }

    /// All edges as `(src, dst, edge type name)` triples.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, &str)> + '_ {
        self.relations
            .iter()
            .flat_map(|r| r.pairs.iter().map(move |&(s, d)| (s, d, r.name.as_str())))
    }

    /// Looks up declared meta-paths by name; an empty request selects all.
    pub fn select_metapaths(&self, names: &[String]) -> Result<Vec<MetaPath>> {
        if names.is_empty() {
            return Ok(self.metapaths.clone());
        }
        names
            .iter()
            .map(|n| {
                self.metapaths
                    .iter()
                    .find(|p| &p.name == n)
                    .cloned()
                    .ok_or_else(|| HgotError::Config(format!("unknown meta-path '{n}'")))
            })
            .collect()
    }
}

/// Binary reachability matrix over target nodes for one meta-path.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPathView {
    pub metapath: MetaPath,
    /// n×n matrix with entries in {0, 1}.
    pub adjacency: Array2<f64>,
    pub n: usize,
}

impl MetaPathView {
    /// Neighbor lists `N(i) = { j : A[i][j] = 1 }`.
    pub fn neighborhoods(&self) -> Neighborhoods {
        Arc::new(adjacency_lists(&self.adjacency))
    }
}

/// The aggregated view's structure: elementwise OR of all view adjacencies.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedStructure {
    pub adjacency: Array2<f64>,
}

pub(crate) fn adjacency_lists(a: &Array2<f64>) -> Vec<Vec<usize>> {
    a.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewOptions {
    /// Set `A[i][i] = 1` for every target node.
    pub self_loops: bool,
}

impl Default for ViewOptions {
    fn default() -> Self {
        Self { self_loops: true }
    }
}

/// One resolved traversal step: neighbor lists from the current type to the next.
struct Step {
    next_type: usize,
    next_count: usize,
    adjacency: Vec<Vec<usize>>,
}

fn resolve_steps(g: &HeteroGraph, p: &MetaPath) -> Result<Vec<Step>> {
    if p.edges.is_empty() {
        return Err(HgotError::Config(format!(
            "meta-path '{}' has no edge types",
            p.name
        )));
    }
    let mut current = g.target_type;
    let mut steps = Vec::with_capacity(p.edges.len());
    for step in &p.edges {
        let (name, force_reverse) = match step.strip_prefix('~') {
            Some(rest) => (rest, true),
            None => (step.as_str(), false),
        };
        let rel = g.relation(name).ok_or_else(|| {
            HgotError::Config(format!(
                "meta-path '{}': unknown edge type '{name}'",
                p.name
            ))
        })?;
        let reverse = force_reverse || (rel.src_type != current && rel.dst_type == current);
        let from_matches = if reverse {
            rel.dst_type == current
        } else {
            rel.src_type == current
        };
        if !from_matches {
            return Err(HgotError::Config(format!(
                "meta-path '{}': edge type '{step}' does not start at node type '{}'",
                p.name, g.node_types[current].name
            )));
        }
        let next = if reverse { rel.src_type } else { rel.dst_type };
        let mut adjacency = vec![Vec::new(); g.node_types[current].count];
        for &(s, d) in &rel.pairs {
            let (from, to) = if reverse { (d, s) } else { (s, d) };
            adjacency[from].push(to);
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        steps.push(Step {
            next_type: next,
            next_count: g.node_types[next].count,
            adjacency,
        });
        current = next;
    }
    if current != g.target_type {
        return Err(HgotError::Config(format!(
            "meta-path '{}' ends at node type '{}', not the target type '{}'",
            p.name, g.node_types[current].name, g.node_types[g.target_type].name
        )));
    }
    debug_assert_eq!(steps.last().map(|s| s.next_type), Some(g.target_type));
    Ok(steps)
}

/// Reachability adjacency of `p` with the default self-loop convention.
pub fn build_metapath_view(g: &HeteroGraph, p: &MetaPath) -> Result<MetaPathView> {
    build_metapath_view_with(g, p, ViewOptions::default())
}

/// `A[i][j] = 1` iff some instance of `p` connects target `i` to target `j`
/// (or `i == j` when self-loops are enabled).
pub fn build_metapath_view_with(
    g: &HeteroGraph,
    p: &MetaPath,
    opts: ViewOptions,
) -> Result<MetaPathView> {
    let n = g.target_count();
    if n == 0 {
        return Err(HgotError::Input(format!(
            "target type '{}' has no nodes",
            g.node_types[g.target_type].name
        )));
    }
    let steps = resolve_steps(g, p)?;
    let rows = par::map_range(n, |start| {
        let mut frontier = vec![start];
        for step in &steps {
            let mut seen = vec![false; step.next_count];
            let mut next = Vec::new();
            for &u in &frontier {
                for &v in &step.adjacency[u] {
                    if !seen[v] {
                        seen[v] = true;
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        frontier
    });
    let mut adjacency = Array2::zeros((n, n));
    for (i, reach) in rows.iter().enumerate() {
        for &j in reach {
            adjacency[[i, j]] = 1.0;
        }
        if opts.self_loops {
            adjacency[[i, i]] = 1.0;
        }
    }
    Ok(MetaPathView {
        metapath: p.clone(),
        adjacency,
        n,
    })
}

/// Builds one view per meta-path.
pub fn build_views(g: &HeteroGraph, paths: &[MetaPath]) -> Result<Vec<MetaPathView>> {
    par::map_slice(paths, |p| build_metapath_view(g, p))
        .into_iter()
        .collect()
}

/// Elementwise logical OR of all view adjacencies.
pub fn aggregate_adjacency(views: &[MetaPathView]) -> Result<AggregatedStructure> {
    let first = views
        .first()
        .ok_or_else(|| HgotError::Input("cannot aggregate an empty list of views".into()))?;
    let n = first.n;
    let mut adjacency = Array2::<f64>::zeros((n, n));
    for view in views {
        if view.n != n || view.adjacency.dim() != (n, n) {
            return Err(HgotError::Input(format!(
                "view '{}' has {} nodes, expected {n}",
                view.metapath.name, view.n
            )));
        }
        ndarray::Zip::from(&mut adjacency)
            .and(&view.adjacency)
            .for_each(|acc, &a| {
                if a != 0.0 {
                    *acc = 1.0;
                }
            });
    }
    Ok(AggregatedStructure { adjacency })
}
