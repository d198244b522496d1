//! Commands behind the `hgot` binary. Each returns a summary value so that
//! tests can drive them without spawning a process.

pub mod bench;
pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hgot::encoder::{load_checkpoint, save_checkpoint, EncoderParams};
use hgot::eval::{clustering_report, export_embeddings, probe_report, MetricSummary, MetricsReport};
use hgot::hetgraph::{generate_synthetic, load_heterograph, write_heterograph, HeteroGraph};
use hgot::objective::{graph_plans, train_in_context, write_loss_history, AblationMode, TrainingContext};
use hgot::HgotError;
use ndarray::Array2;

pub use bench::{run_bench, BenchReport};
pub use config::{load_bench_config, load_run_config, load_sweep_spec, BenchConfig, RunConfig, SweepSpec};

/// Process exit status for an error: 2 configuration, 3 data or i/o,
/// 4 numerical or internal failure.
pub fn exit_code(err: &HgotError) -> i32 {
    match err {
        HgotError::Config(_) => 2,
        HgotError::Input(_) | HgotError::Data { .. } | HgotError::Io { .. } => 3,
        HgotError::Numerical(_) | HgotError::State(_) => 4,
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<(), HgotError> {
    fs::write(path, text).map_err(|source| HgotError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), HgotError> {
    fs::create_dir_all(path).map_err(|source| HgotError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_graph(cfg: &RunConfig) -> Result<HeteroGraph, HgotError> {
    cfg.validate()?;
    match (&cfg.dataset, &cfg.synthetic) {
        (Some(path), None) => load_heterograph(path),
        (None, Some(s)) => generate_synthetic(s),
        _ => unreachable!("validated above"),
    }
}

pub fn training_context(cfg: &RunConfig, g: HeteroGraph) -> Result<TrainingContext, HgotError> {
    let names = cfg.metapaths.clone().unwrap_or_default();
    let paths = g.select_metapaths(&names)?;
    TrainingContext::new(g, &paths)
}

/// Probe and clustering scores of one embedding matrix.
#[derive(Clone, Debug)]
pub struct Scores {
    pub classification: MetricsReport,
    pub clustering: MetricsReport,
}

impl Scores {
    pub fn macro_f1(&self) -> f64 {
        self.classification.metrics["macro_f1"].mean
    }

    pub fn micro_f1(&self) -> f64 {
        self.classification.metrics["micro_f1"].mean
    }

    pub fn nmi(&self) -> f64 {
        self.clustering.metrics["nmi"].mean
    }
}

/// Scores `z` against the graph's labels, or `None` for unlabeled graphs.
pub fn score_embeddings(cfg: &RunConfig, g: &HeteroGraph, z: &Array2<f64>) -> Result<Option<Scores>, HgotError> {
    let Some(labels) = &g.labels else {
        return Ok(None);
    };
    let classification = probe_report(z, labels, &cfg.eval.probe, cfg.eval.probe_runs)?;
    let (clustering, _) = clustering_report(z, labels, cfg.eval.linkage)?;
    Ok(Some(Scores {
        classification,
        clustering,
    }))
}

fn node_ids(g: &HeteroGraph) -> Vec<String> {
    (0..g.target_count()).map(|i| i.to_string()).collect()
}

fn write_reports(path: &Path, reports: &[&MetricsReport]) -> Result<(), HgotError> {
    let text = serde_json::to_string_pretty(reports).expect("metrics serialize");
    write_file(path, &(text + "\n"))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub seed: u64,
    pub dir: PathBuf,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub final_loss: Option<f64>,
    pub scores: Option<Scores>,
}

/// Trains once per seed. Each run writes `loss.csv`, `checkpoint.json`,
/// `embeddings.csv` and `metrics.json` under `<out>/seed_<seed>/`; a
/// cross-seed `metrics.json` goes to `<out>/`.
pub fn cmd_train(cfg: &RunConfig, dump_plans: bool) -> Result<Vec<TrainSummary>, HgotError> {
    cfg.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let g = load_graph(cfg)?;
    let ctx = training_context(cfg, g)?;
    create_dir(&out)?;
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let mut train_cfg = cfg.train.clone();
        train_cfg.seed = seed;
        let outcome = train_in_context(&ctx, &train_cfg)?;
        let dir = out.join(format!("seed_{seed}"));
        create_dir(&dir)?;
        write_loss_history(&outcome.history, dir.join("loss.csv"))?;
        save_checkpoint(&outcome.params, dir.join("checkpoint.json"))?;
        export_embeddings(&outcome.embeddings, &node_ids(&ctx.graph), dir.join("embeddings.csv"))?;
        let scores = score_embeddings(cfg, &ctx.graph, &outcome.embeddings)?;
        let reports: Vec<&MetricsReport> = scores
            .iter()
            .flat_map(|s| [&s.classification, &s.clustering])
            .collect();
        write_reports(&dir.join("metrics.json"), &reports)?;
        if dump_plans {
            dump_graph_plans(&ctx, &train_cfg, &outcome.params, &dir.join("plans"))?;
        }
        summaries.push(TrainSummary {
            seed,
            dir,
            epochs_run: outcome.history.len(),
            best_epoch: outcome.best_epoch,
            final_loss: outcome.history.last().map(|b| b.total),
            scores,
        });
    }
    if summaries.iter().all(|s| s.scores.is_some()) {
        let aggregate = |task: &str, pick: &dyn Fn(&Scores) -> &MetricsReport| {
            let first = pick(summaries[0].scores.as_ref().expect("checked"));
            let metrics = first
                .metrics
                .keys()
                .map(|name| {
                    let values = summaries
                        .iter()
                        .map(|s| pick(s.scores.as_ref().expect("checked")).metrics[name].mean)
                        .collect();
                    (name.clone(), MetricSummary::from_values(values))
                })
                .collect();
            MetricsReport {
                task: task.to_string(),
                metrics,
            }
        };
        let classification = aggregate("node_classification", &|s| &s.classification);
        let clustering = aggregate("node_clustering", &|s| &s.clustering);
        write_reports(&out.join("metrics.json"), &[&classification, &clustering])?;
    }
    Ok(summaries)
}

/// Graph-space plans at the given parameters, one CSV plus JSON sidecar per
/// aligned pair.
fn dump_graph_plans(
    ctx: &TrainingContext,
    cfg: &hgot::objective::TrainConfig,
    params: &EncoderParams,
    dir: &Path,
) -> Result<(), HgotError> {
    if cfg.ablation == AblationMode::Contrastive {
        return Ok(());
    }
    create_dir(dir)?;
    let h = hgot::encoder::project_features(params, &ctx.graph)?.h;
    for (name, sol) in graph_plans(&h, ctx, cfg)? {
        sol.plan.dump(&dir.join(name.replace('|', "_")))?;
    }
    Ok(())
}

/// Re-scores a saved checkpoint on the configured graph.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<Option<Scores>, HgotError> {
    cfg.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let params = load_checkpoint(checkpoint)?;
    let g = load_graph(cfg)?;
    let paths = g.select_metapaths(&params.views)?;
    let ctx = TrainingContext::new(g, &paths)?;
    let z = ctx.embeddings(&params, cfg.train.ablation)?;
    create_dir(&out)?;
    export_embeddings(&z, &node_ids(&ctx.graph), out.join("embeddings.csv"))?;
    let scores = score_embeddings(cfg, &ctx.graph, &z)?;
    let reports: Vec<&MetricsReport> = scores
        .iter()
        .flat_map(|s| [&s.classification, &s.clustering])
        .collect();
    write_reports(&out.join("metrics.json"), &reports)?;
    Ok(scores)
}

/// One row of the sweep table; `None` cells mean every run of the value failed.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub runs_ok: usize,
    pub runs_failed: usize,
    pub macro_f1: Option<MetricSummary>,
    pub micro_f1: Option<MetricSummary>,
    pub nmi: Option<MetricSummary>,
}

/// Trains and scores every grid value under every seed, in grid order, and
/// writes `sweep.csv`. A failed run is reported to stderr and skipped.
pub fn cmd_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, HgotError> {
    spec.validate()?;
    let out = spec.base.out_dir()?.to_path_buf();
    let g = load_graph(&spec.base)?;
    if g.labels.is_none() {
        return Err(HgotError::Config("a sweep needs a labeled graph".into()));
    }
    let ctx = training_context(&spec.base, g)?;
    let mut rows = Vec::new();
    for &value in &spec.values {
        let cfg = spec.apply(value);
        let mut scores = Vec::new();
        let mut failed = 0;
        for &seed in &cfg.seeds {
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed;
            let run = train_in_context(&ctx, &train_cfg)
                .and_then(|o| score_embeddings(&cfg, &ctx.graph, &o.embeddings));
            match run {
                Ok(Some(s)) => scores.push(s),
                Ok(None) => unreachable!("labels checked above"),
                Err(e) => {
                    eprintln!("sweep {}={value} seed {seed} failed: {e}", spec.parameter.as_str());
                    failed += 1;
                }
            }
        }
        let summary = |f: &dyn Fn(&Scores) -> f64| {
            (!scores.is_empty()).then(|| MetricSummary::from_values(scores.iter().map(f).collect()))
        };
        rows.push(SweepRow {
            value,
            runs_ok: scores.len(),
            runs_failed: failed,
            macro_f1: summary(&Scores::macro_f1),
            micro_f1: summary(&Scores::micro_f1),
            nmi: summary(&Scores::nmi),
        });
    }
    create_dir(&out)?;
    let mut text =
        String::from("parameter,value,runs_ok,runs_failed,macro_f1_mean,macro_f1_std,micro_f1_mean,micro_f1_std,nmi_mean,nmi_std\n");
    for r in &rows {
        write!(text, "{},{},{},{}", spec.parameter.as_str(), r.value, r.runs_ok, r.runs_failed).expect("string write");
        for m in [&r.macro_f1, &r.micro_f1, &r.nmi] {
            match m {
                Some(m) => write!(text, ",{},{}", m.mean, m.std),
                None => write!(text, ",,"),
            }
            .expect("string write");
        }
        text.push('\n');
    }
    write_file(&out.join("sweep.csv"), &text)?;
    Ok(rows)
}

/// Times the solvers; output goes to `out` when given.
pub fn cmd_bench(cfg: &BenchConfig, out: Option<&Path>) -> Result<BenchReport, HgotError> {
    let report = run_bench(cfg)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        report.write(dir)?;
    }
    Ok(report)
}

/// Writes the configured synthetic graph in the dataset directory format.
pub fn cmd_generate(cfg: &RunConfig) -> Result<HeteroGraph, HgotError> {
    let Some(s) = &cfg.synthetic else {
        return Err(HgotError::Config("generate needs a `synthetic` section".into()));
    };
    let out = cfg.out_dir()?;
    let g = generate_synthetic(s)?;
    create_dir(out)?;
    write_heterograph(&g, out)?;
    Ok(g)
}
