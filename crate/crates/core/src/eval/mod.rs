//! Evaluation of frozen embeddings: linear-probe classification,
//! agglomerative clustering with ACC/NMI/ARI, and CSV export.

mod cluster;
mod export;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HgotError, Result};
use crate::par;

pub use cluster::{clustering_metrics, hierarchical_cluster, ClusterReport, Linkage};
pub use export::{export_embeddings, load_embeddings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Share of each class used for training.
    pub train_fraction: f64,
    pub l2_penalty: f64,
    /// Full-batch gradient steps.
    pub probe_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            l2_penalty: 1e-3,
            probe_epochs: 300,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(HgotError::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(HgotError::Config(format!("l2_penalty must be >= 0, got {}", self.l2_penalty)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(HgotError::Config(format!("probe learning_rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub micro_f1: f64,
    pub macro_f1: f64,
}

/// Micro- and macro-averaged F1 of single-label predictions. Micro-F1 equals
/// accuracy; macro-F1 averages over every label seen in either vector.
pub fn f1_scores(predicted: &[usize], truth: &[usize]) -> Result<ProbeScores> {
    if predicted.len() != truth.len() {
        return Err(HgotError::Input(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(HgotError::Input("cannot score an empty split".into()));
    }
    // label -> (tp, fp, fn)
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            correct += 1;
            counts.entry(t).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(t).or_default().2 += 1;
        }
    }
    let macro_f1 = counts
        .values()
        .map(|&(tp, fp, fn_)| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        .sum::<f64>()
        / counts.len() as f64;
    Ok(ProbeScores {
        micro_f1: correct as f64 / truth.len() as f64,
        macro_f1,
    })
}

/// Per-class shuffled split; every class keeps at least one training node and,
/// when it has two or more, at least one test node.
pub fn stratified_split(labels: &[usize], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let count = members.len();
        let mut k = (train_fraction * count as f64).round() as usize;
        k = k.max(1);
        if count >= 2 {
            k = k.min(count - 1);
        }
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    if test.is_empty() {
        return Err(HgotError::Input("stratified split left no test nodes".into()));
    }
    Ok((train, test))
}

/// Multinomial logistic regression on standardized features, trained by
/// full-batch gradient descent on the training split.
#[derive(Clone, Debug)]
struct SoftmaxClassifier {
    mean: Array1<f64>,
    scale: Array1<f64>,
    w: Array2<f64>,
    b: Array1<f64>,
}

impl SoftmaxClassifier {
    fn fit(x: &Array2<f64>, y: &[usize], classes: usize, cfg: &ProbeConfig) -> Self {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty training split");
        let scale = x
            .var_axis(Axis(0), 0.0)
            .mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
        let xs = (x - &mean) / &scale;
        let mut w = Array2::<f64>::zeros((x.ncols(), classes));
        let mut b = Array1::<f64>::zeros(classes);
        let mut onehot = Array2::<f64>::zeros((x.nrows(), classes));
        for (i, &c) in y.iter().enumerate() {
            onehot[[i, c]] = 1.0;
        }
        for _ in 0..cfg.probe_epochs {
            let probs = softmax_rows(xs.dot(&w) + &b);
            let err = (probs - &onehot) / n;
            let grad_w = xs.t().dot(&err) + &(&w * cfg.l2_penalty);
            let grad_b = err.sum_axis(Axis(0));
            w.scaled_add(-cfg.learning_rate, &grad_w);
            b.scaled_add(-cfg.learning_rate, &grad_b);
        }
        Self { mean, scale, w, b }
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let scores = ((x - &self.mean) / &self.scale).dot(&self.w) + &self.b;
        scores.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
    }
}

fn softmax_rows(mut s: Array2<f64>) -> Array2<f64> {
    for mut row in s.rows_mut() {
        let peak = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - peak).exp());
        let total = row.sum();
        row /= total;
    }
    s
}

/// Index of the largest value; the first one wins ties.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Trains a linear classifier on a stratified split of frozen embeddings and
/// scores it on the held-out part.
pub fn linear_probe(z: &Array2<f64>, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeScores> {
    cfg.validate()?;
    if z.nrows() != labels.len() {
        return Err(HgotError::Input(format!("{} embeddings for {} labels", z.nrows(), labels.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(HgotError::Numerical("embeddings contain non-finite values".into()));
    }
    let classes: Vec<usize> = labels.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(HgotError::Input("a probe needs at least two classes".into()));
    }
    let index_of: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let (train, test) = stratified_split(labels, cfg.train_fraction, cfg.seed)?;
    let x_train = z.select(Axis(0), &train);
    let y_train: Vec<usize> = train.iter().map(|&i| index_of[&labels[i]]).collect();
    let model = SoftmaxClassifier::fit(&x_train, &y_train, classes.len(), cfg);
    let predicted: Vec<usize> = model
        .predict(&z.select(Axis(0), &test))
        .into_iter()
        .map(|c| classes[c])
        .collect();
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    f1_scores(&predicted, &truth)
}

/// Mean, population standard deviation and raw values of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            values,
        }
    }
}

/// `{task, metrics: {name: {mean, std, values}}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl MetricsReport {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("metrics serialize");
        fs::write(path, text + "\n").map_err(|e| HgotError::io(path, e))
    }
}

/// Probe repeated over seeds `base_seed..base_seed + runs`.
pub fn probe_report(z: &Array2<f64>, labels: &[usize], cfg: &ProbeConfig, runs: usize) -> Result<MetricsReport> {
    let seeds: Vec<u64> = (0..runs as u64).map(|k| cfg.seed + k).collect();
    let scores: Vec<ProbeScores> = par::map_slice(&seeds, |&seed| {
        linear_probe(z, labels, &ProbeConfig { seed, ..cfg.clone() })
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut metrics = BTreeMap::new();
    metrics.insert(
        "micro_f1".to_string(),
        MetricSummary::from_values(scores.iter().map(|s| s.micro_f1).collect()),
    );
    metrics.insert(
        "macro_f1".to_string(),
        MetricSummary::from_values(scores.iter().map(|s| s.macro_f1).collect()),
    );
    Ok(MetricsReport {
        task: "node_classification".into(),
        metrics,
    })
}

/// Clustering into as many groups as there are classes, reported in the
/// same shape as [`probe_report`].
pub fn clustering_report(z: &Array2<f64>, labels: &[usize], linkage: Linkage) -> Result<(MetricsReport, ClusterReport)> {
    let k = labels.iter().copied().collect::<std::collections::BTreeSet<_>>().len();
    let assignment = hierarchical_cluster(z, k, linkage)?;
    let report = clustering_metrics(&assignment, labels)?;
    let mut metrics = BTreeMap::new();
    for (name, v) in [("acc", report.acc), ("nmi", report.nmi), ("ari", report.ari)] {
        metrics.insert(name.to_string(), MetricSummary::from_values(vec![v]));
    }
    Ok((
        MetricsReport {
            task: "node_clustering".into(),
            metrics,
        },
        report,
    ))
}
