//! Dataset directory format.
//!
//! ```text
//! manifest.json          node types, edge types, target type, meta-paths, file names
//! edges_<edge_type>.tsv  src_index \t dst_index   (0-based within each type)
//! features_<type>.csv    one comma-separated row of floats per node
//! labels.tsv             target_index \t class    (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{HeteroGraph, MetaPath, NodeType, Relation};
use crate::error::{HgotError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    node_types: Vec<ManifestNodeType>,
    edge_types: Vec<ManifestEdgeType>,
    target_type: String,
    #[serde(default)]
    metapaths: Vec<MetaPath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    homogeneous: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestNodeType {
    name: String,
    count: usize,
    /// Feature file; absent means the type carries no raw features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEdgeType {
    name: String,
    src: String,
    dst: String,
    /// Defaults to `edges_<name>.tsv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file: Option<String>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| HgotError::io(path, e))
}

fn parse_index(file: &Path, line: usize, field: &str) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| HgotError::data(file, line, format!("expected a non-negative integer, found '{field}'")))
}

fn parse_pairs(file: &Path) -> Result<Vec<(usize, usize, usize)>> {
    let text = read_text(file)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 2 {
            return Err(HgotError::data(
                file,
                line,
                format!("expected 2 tab-separated columns, found {}", fields.len()),
            ));
        }
        out.push((
            parse_index(file, line, fields[0])?,
            parse_index(file, line, fields[1])?,
            line,
        ));
    }
    Ok(out)
}

fn parse_features(file: &Path, expected_rows: usize, type_name: &str) -> Result<Array2<f64>> {
    let text = read_text(file)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row = raw
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| HgotError::data(file, line, format!("invalid float '{f}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(HgotError::data(
                    file,
                    line,
                    format!("row has {} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.len() != expected_rows {
        return Err(HgotError::data(
            file,
            rows.len(),
            format!(
                "node type '{type_name}' has {expected_rows} nodes but the feature file has {} rows",
                rows.len()
            ),
        ));
    }
    let width = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((expected_rows, width), flat).expect("rectangular rows"))
}

/// Reads and validates a dataset directory given the path to its manifest
/// (or to the directory itself).
pub fn load_heterograph(manifest_path: impl AsRef<Path>) -> Result<HeteroGraph> {
    let mut path = manifest_path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(MANIFEST_FILE);
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = read_text(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        HgotError::data(&path, e.line(), format!("invalid manifest: {e}"))
    })?;

    let type_index = |name: &str| {
        manifest
            .node_types
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| HgotError::data(&path, 0, format!("unknown node type '{name}'")))
    };

    let node_types: Vec<NodeType> = manifest
        .node_types
        .iter()
        .map(|t| NodeType {
            name: t.name.clone(),
            count: t.count,
        })
        .collect();

    let mut features = Vec::with_capacity(node_types.len());
    for t in &manifest.node_types {
        let x = match &t.features {
            Some(f) => parse_features(&dir.join(f), t.count, &t.name)?,
            None => Array2::zeros((t.count, 0)),
        };
        features.push(x);
    }

    let mut relations = Vec::with_capacity(manifest.edge_types.len());
    for e in &manifest.edge_types {
        let src_type = type_index(&e.src)?;
        let dst_type = type_index(&e.dst)?;
        let file = dir.join(e.file.clone().unwrap_or_else(|| format!("edges_{}.tsv", e.name)));
        let (ns, nd) = (node_types[src_type].count, node_types[dst_type].count);
        let mut pairs = Vec::new();
        for (s, d, line) in parse_pairs(&file)? {
            if s >= ns || d >= nd {
                return Err(HgotError::data(
                    &file,
                    line,
                    format!(
                        "dangling reference ({s}, {d}): '{}' has {ns} nodes and '{}' has {nd}",
                        e.src, e.dst
                    ),
                ));
            }
            pairs.push((s, d));
        }
        relations.push(Relation {
            name: e.name.clone(),
            src_type,
            dst_type,
            pairs,
        });
    }

    let target_type = type_index(&manifest.target_type)?;
    let labels = match &manifest.labels {
        None => None,
        Some(f) => {
            let file = dir.join(f);
            let n = node_types[target_type].count;
            let mut labels: Vec<Option<usize>> = vec![None; n];
            for (idx, class, line) in parse_pairs(&file)? {
                if idx >= n {
                    return Err(HgotError::data(
                        &file,
                        line,
                        format!("dangling reference: target index {idx} but only {n} target nodes"),
                    ));
                }
                if labels[idx].replace(class).is_some() {
                    return Err(HgotError::data(&file, line, format!("duplicate label for node {idx}")));
                }
            }
            let labels = labels
                .into_iter()
                .enumerate()
                .map(|(i, l)| {
                    l.ok_or_else(|| HgotError::data(&file, 0, format!("missing label for target node {i}")))
                })
                .collect::<Result<Vec<usize>>>()?;
            Some(labels)
        }
    };

    HeteroGraph {
        node_types,
        relations,
        features,
        target_type,
        labels,
        metapaths: manifest.metapaths,
        homogeneous: manifest.homogeneous,
    }
    .validated()
    .map_err(|e| match e {
        HgotError::Input(msg) => HgotError::data(&path, 0, msg),
        other => other,
    })
}

fn write_file(path: PathBuf, contents: String) -> Result<()> {
    fs::write(&path, contents).map_err(|e| HgotError::io(path, e))
}

/// Writes `g` in the dataset directory format. Output is a pure function of `g`.
pub fn write_heterograph(g: &HeteroGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    g.validate()?;
    fs::create_dir_all(dir).map_err(|e| HgotError::io(dir, e))?;

    let mut node_types = Vec::new();
    for (t, x) in g.node_types.iter().zip(&g.features) {
        let features = if x.ncols() > 0 {
            let name = format!("features_{}.csv", t.name);
            let mut text = String::new();
            for row in x.rows() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            write_file(dir.join(&name), text)?;
            Some(name)
        } else {
            None
        };
        node_types.push(ManifestNodeType {
            name: t.name.clone(),
            count: t.count,
            features,
        });
    }

    let mut edge_types = Vec::new();
    for rel in &g.relations {
        let mut text = String::new();
        for &(s, d) in &rel.pairs {
            text.push_str(&format!("{s}\t{d}\n"));
        }
        write_file(dir.join(format!("edges_{}.tsv", rel.name)), text)?;
        edge_types.push(ManifestEdgeType {
            name: rel.name.clone(),
            src: g.node_types[rel.src_type].name.clone(),
            dst: g.node_types[rel.dst_type].name.clone(),
            file: None,
        });
    }

    let labels = match &g.labels {
        Some(labels) => {
            let mut text = String::new();
            for (i, c) in labels.iter().enumerate() {
                text.push_str(&format!("{i}\t{c}\n"));
            }
            write_file(dir.join("labels.tsv"), text)?;
            Some("labels.tsv".to_string())
        }
        None => None,
    };

    let manifest = Manifest {
        node_types,
        edge_types,
        target_type: g.node_types[g.target_type].name.clone(),
        metapaths: g.metapaths.clone(),
        labels,
        homogeneous: g.homogeneous,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(dir.join(MANIFEST_FILE), text)
}
