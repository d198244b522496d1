use std::collections::BTreeMap;

use ndarray::Array2;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{HgotError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    #[default]
    Average,
    Single,
    Complete,
    /// Minimum increase of within-cluster variance.
    Ward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub assignment: Vec<usize>,
}

/// Agglomerative clustering on Euclidean distances, merged until `k`
/// clusters remain. The closest pair merges first; ties go to the pair with
/// the lowest indices. Cluster ids are numbered by their smallest member.
pub fn hierarchical_cluster(z: &Array2<f64>, k: usize, linkage: Linkage) -> Result<Vec<usize>> {
    let n = z.nrows();
    if k == 0 || k > n {
        return Err(HgotError::Input(format!("cannot cut {n} points into {k} clusters")));
    }
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = z
                .row(i)
                .iter()
                .zip(z.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            // Ward's recurrence runs on squared distances
            let d = if linkage == Linkage::Ward { d * d } else { d };
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    // owner[i] is the smallest member of the cluster holding i
    let mut owner: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    while active.len() > k {
        let mut best = (f64::INFINITY, 0, 0);
        for (x, &i) in active.iter().enumerate() {
            for &j in &active[x + 1..] {
                if dist[[i, j]] < best.0 {
                    best = (dist[[i, j]], i, j);
                }
            }
        }
        let (d_ab, a, b) = best;
        for &m in &active {
            if m == a || m == b {
                continue;
            }
            let (da, db) = (dist[[a, m]], dist[[b, m]]);
            let merged = match linkage {
                Linkage::Average => (size[a] as f64 * da + size[b] as f64 * db) / (size[a] + size[b]) as f64,
                Linkage::Single => da.min(db),
                Linkage::Complete => da.max(db),
                Linkage::Ward => {
                    let (na, nb, nm) = (size[a] as f64, size[b] as f64, size[m] as f64);
                    ((na + nm) * da + (nb + nm) * db - nm * d_ab) / (na + nb + nm)
                }
            };
            dist[[a, m]] = merged;
            dist[[m, a]] = merged;
        }
        size[a] += size[b];
        for o in owner.iter_mut() {
            if *o == b {
                *o = a;
            }
        }
        active.retain(|&m| m != b);
    }
    let ids: BTreeMap<usize, usize> = active.iter().enumerate().map(|(c, &r)| (r, c)).collect();
    Ok(owner.iter().map(|r| ids[r]).collect())
}

fn relabel(values: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    let out = values
        .iter()
        .map(|v| {
            let next = ids.len();
            *ids.entry(*v).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn pairs(c: usize) -> f64 {
    (c * c.saturating_sub(1)) as f64 / 2.0
}

/// ACC under the best one-to-one relabeling, NMI normalized by the mean of
/// the two entropies, and the adjusted Rand index.
pub fn clustering_metrics(assignment: &[usize], labels: &[usize]) -> Result<ClusterReport> {
    if assignment.len() != labels.len() {
        return Err(HgotError::Input(format!(
            "{} assignments for {} labels",
            assignment.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(HgotError::Input("cannot score an empty clustering".into()));
    }
    let n = labels.len();
    let nf = n as f64;
    let (a, ka) = relabel(assignment);
    let (t, kt) = relabel(labels);
    let mut table = vec![vec![0usize; kt]; ka];
    for (&i, &j) in a.iter().zip(&t) {
        table[i][j] += 1;
    }
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..kt).map(|j| table.iter().map(|r| r[j]).sum()).collect();

    let k = ka.max(kt);
    let square = Matrix::from_fn(k, k, |(i, j)| {
        if i < ka && j < kt {
            table[i][j] as i64
        } else {
            0
        }
    });
    let (matched, _) = kuhn_munkres(&square);
    let acc = matched as f64 / nf;

    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / nf * (c * nf / (row_sums[i] as f64 * col_sums[j] as f64)).ln();
            }
        }
    }
    let (ha, ht) = (entropy(&row_sums, nf), entropy(&col_sums, nf));
    let nmi = if ha == 0.0 && ht == 0.0 {
        1.0
    } else {
        (mi / ((ha + ht) / 2.0)).clamp(0.0, 1.0)
    };

    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_a: f64 = row_sums.iter().map(|&c| pairs(c)).sum();
    let sum_t: f64 = col_sums.iter().map(|&c| pairs(c)).sum();
    let expected = sum_a * sum_t / pairs(n).max(1.0);
    let max_index = (sum_a + sum_t) / 2.0;
    let ari = if max_index == expected {
        1.0
    } else {
        (index - expected) / (max_index - expected)
    };

    Ok(ClusterReport {
        acc,
        nmi,
        ari,
        assignment: assignment.to_vec(),
    })
}
