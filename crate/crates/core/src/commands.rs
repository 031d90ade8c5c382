//! The operations behind each CLI subcommand. Each returns a serializable
//! report and writes its artifacts to disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{
    correlation_analysis, discretize_routing, group_graph, selection_heatmap, sparsity_fraction, write_heatmap_csv,
    write_histograms_csv, CORRELATION_SLOT_CAP, DEFAULT_SPARSITY_THRESHOLD,
};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{load_csv, split, split_indices, Dataset, LabelColumn, NormStats, SplitTag, SynthBayesNet};
use crate::error::{GmlpError, Result};
use crate::metrics::MetricsLog;
use crate::model::{count_complexity, ArchSpec, ComplexityReport, Model};
use crate::train::{discretize, fraction_correct, predict_classes, train, TrainResult};

const VAL_SPLIT_SALT: u64 = 0x5851_F42D_4C95_7F2D;

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| GmlpError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| GmlpError::io(path, e))
}

/// Where a dataset lives on disk and how to read it.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSource {
    pub path: PathBuf,
    pub label_column: LabelColumn,
    pub has_header: bool,
}

impl DataSource {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            label_column: LabelColumn::Last,
            has_header: true,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        load_csv(&self.path, &self.label_column, self.has_header)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub final_val_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub final_test_accuracy_hard: Option<f64>,
    pub sparsity_fraction: f64,
    pub routing_table: Option<Vec<usize>>,
}

/// Training, validation and test splits prepared as the config describes.
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
    pub stats: Option<NormStats>,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let source = |path: &Path| DataSource {
        path: path.to_path_buf(),
        label_column: cfg.label_column.clone(),
        has_header: cfg.has_header,
    };
    let train_path = cfg
        .train_data
        .as_deref()
        .ok_or_else(|| GmlpError::Config("missing required key `train_data`".into()))?;
    let full = source(train_path).load()?;
    let (mut train_ds, mut val) = match (&cfg.val_data, cfg.val_fraction > 0.0) {
        (Some(p), _) => (full, source(p).load()?.with_split(SplitTag::Val)),
        (None, true) => {
            let (rest, held) = split_indices(full.y(), full.classes(), cfg.val_fraction, cfg.train.seed ^ VAL_SPLIT_SALT)?;
            (full.select(&rest)?, full.select(&held)?.with_split(SplitTag::Val))
        }
        (None, false) => (full.clone(), full.with_split(SplitTag::Val)),
    };
    let mut test = cfg
        .test_data
        .as_deref()
        .map(|p| source(p).load().map(|d| d.with_split(SplitTag::Test)))
        .transpose()?;
    let stats = if cfg.normalize {
        let mut others: Vec<&mut Dataset> = vec![&mut val];
        if let Some(t) = test.as_mut() {
            others.push(t);
        }
        Some(crate::data::normalize(&mut train_ds, &mut others)?)
    } else {
        None
    };
    Ok(PreparedData {
        train: train_ds,
        val,
        test,
        stats,
    })
}

fn training_meta(cfg: &RunConfig, result: &TrainResult, best: bool) -> serde_json::Value {
    let t = &cfg.train;
    serde_json::json!({
        "checkpoint": if best { "best" } else { "final" },
        "epochs_completed": result.history.len(),
        "best_epoch": result.best_epoch,
        "best_val_accuracy": result.best_val_accuracy,
        "config": {
            "lambda": t.lambda,
            "alpha": t.alpha,
            "lr": t.lr0,
            "plateau_patience": t.plateau_patience,
            "plateau_factor": t.plateau_factor,
            "tau_start": t.tau_start,
            "tau_end": t.tau_end,
            "epochs": t.epochs,
            "batch_size": t.batch_size,
            "seed": t.seed,
            "anneal_entropy": t.anneal_entropy,
            "anneal_temperature": t.anneal_temperature,
        },
    })
}

/// Trains per `cfg`, writing `metrics.csv`, `final.ckpt`, `best.ckpt` and
/// `summary.json` into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let arch = cfg.arch_spec(data.train.d())?;
    let model = Model::build_with_bn(&arch, cfg.bn_momentum, cfg.bn_epsilon)?;

    let out = &cfg.output_dir;
    create_dir(out)?;
    let mut log = MetricsLog::create(&out.join(METRICS_FILE))?;
    let result = train(
        model,
        &data.train,
        &data.val,
        data.test.as_ref(),
        &cfg.train,
        cfg.log_wall_time,
        |record, _| log.append(record),
    )?;

    for (name, model, best) in [(FINAL_CHECKPOINT, &result.model, false), (BEST_CHECKPOINT, &result.best, true)] {
        let ckpt = Checkpoint {
            model: model.clone(),
            normalization: data.stats.clone(),
            training: training_meta(cfg, &result, best),
        };
        ckpt.save(&out.join(name))?;
    }

    let last = result.history.last();
    let hard = match (&data.test, result.model.routing_table()) {
        (Some(t), Some(_)) => Some(fraction_correct(&predict_classes(&result.model, t.x(), true, 1)?, t.y())),
        _ => None,
    };
    let summary = TrainSummary {
        output_dir: out.clone(),
        epochs: result.history.len(),
        best_epoch: result.best_epoch,
        best_val_accuracy: result.best_val_accuracy,
        final_val_accuracy: last.map(|r| r.val_accuracy),
        final_test_accuracy: last.and_then(|r| r.test_accuracy),
        final_test_accuracy_hard: hard,
        sparsity_fraction: crate::train::current_sparsity(&result.model),
        routing_table: result.model.routing_table().map(<[usize]>::to_vec),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    /// `None` for classes absent from the dataset.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub hard_routing_accuracy: Option<f64>,
}

fn load_for_model(ckpt: &Checkpoint, source: &DataSource) -> Result<Dataset> {
    let mut ds = source.load()?;
    ds.ensure_nonempty()?;
    let arch = ckpt.model.arch();
    if ds.d() != arch.d {
        return Err(GmlpError::Dimension(format!(
            "checkpoint expects {} features, {} has {}",
            arch.d,
            source.path.display(),
            ds.d()
        )));
    }
    if ds.classes() > arch.classes {
        return Err(GmlpError::Label {
            label: ds.classes() - 1,
            classes: arch.classes,
        });
    }
    ds = ds.with_classes(arch.classes)?;
    if let Some(stats) = &ckpt.normalization {
        stats.apply(&mut ds)?;
    }
    Ok(ds)
}

/// Accuracy of a checkpoint on a CSV dataset, with per-class breakdown and
/// optionally under discretized routing. Writes the report to `out` if set.
pub fn cmd_eval(checkpoint: &Path, source: &DataSource, hard_routing: bool, threads: usize, out: Option<&Path>) -> Result<EvalReport> {
    let mut ckpt = Checkpoint::load(checkpoint)?;
    let ds = load_for_model(&ckpt, source)?;
    let pred = predict_classes(&ckpt.model, ds.x(), false, threads)?;
    let mut hits = vec![0usize; ds.classes()];
    let counts = ds.class_counts();
    for (p, &l) in pred.iter().zip(ds.y()) {
        if *p == l {
            hits[l] += 1;
        }
    }
    let hard_routing_accuracy = if hard_routing {
        if ckpt.model.psi_index().is_none() {
            return Err(GmlpError::Config("hard routing needs a GMLP checkpoint".into()));
        }
        if ckpt.model.routing_table().is_none() {
            discretize(&mut ckpt.model)?;
        }
        Some(fraction_correct(&predict_classes(&ckpt.model, ds.x(), true, threads)?, ds.y()))
    } else {
        None
    };
    let report = EvalReport {
        samples: ds.len(),
        accuracy: fraction_correct(&pred, ds.y()),
        per_class_accuracy: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        hard_routing_accuracy,
    };
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_json(path, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub samples: usize,
    pub seed: u64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub optimal_accuracy: f64,
    pub label_marginal: [f64; 2],
    pub net: SynthBayesNet,
}

pub const SYNTH_TEST_FRACTION: f64 = 0.2;

/// Samples the Bayesian network, splits 80/20 and writes `train.csv`,
/// `test.csv` and `oracle.json` into `out_dir`.
pub fn cmd_synth(out_dir: &Path, n: usize, seed: u64, net: &SynthBayesNet) -> Result<SynthReport> {
    let ds = net.generate(n, seed)?;
    let oracle = net.bayes_optimal()?;
    let (train_ds, test_ds) = split(&ds, SYNTH_TEST_FRACTION, seed)?;
    create_dir(out_dir)?;
    train_ds.write_csv(&out_dir.join("train.csv"))?;
    test_ds.write_csv(&out_dir.join("test.csv"))?;
    let report = SynthReport {
        samples: n,
        seed,
        train_rows: train_ds.len(),
        test_rows: test_ds.len(),
        optimal_accuracy: oracle.optimal_accuracy,
        label_marginal: oracle.label_marginal,
        net: net.clone(),
    };
    write_json(&out_dir.join("oracle.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationSummary {
    pub slots: usize,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
    pub zero_variance_slots: usize,
    pub mean_abs_intra: Option<f64>,
    pub mean_abs_inter: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub temperature: f64,
    pub sparsity_fraction: f64,
    pub slot_to_feature: Vec<usize>,
    pub row_confidence: Vec<f64>,
    /// Feature names of each group's slots.
    pub groups: Vec<Vec<String>>,
    pub edges: Vec<(usize, usize, usize)>,
    pub correlation: Option<CorrelationSummary>,
    pub notices: Vec<String>,
}

fn mean_abs_pairs(matrix: &[f64], n: usize, m: usize, same: bool) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for a in 0..n {
        for b in a + 1..n {
            if (a / m == b / m) == same {
                sum += matrix[a * n + b].abs();
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Writes `heatmap.csv`, `group_graph.csv` (edge list), `analysis.json`
/// and, when a dataset is given, `correlation_histograms.csv`.
pub fn cmd_analyze(checkpoint: &Path, data: Option<&DataSource>, out_dir: &Path) -> Result<AnalyzeReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = &ckpt.model;
    let routing = model
        .routing()
        .ok_or_else(|| GmlpError::Config("analysis needs a GMLP checkpoint".into()))?;
    let arch = model.arch();
    let table = match ckpt.routing_table() {
        Some(t) => t,
        None => discretize_routing(&routing),
    };
    let names: Vec<String> = match &ckpt.normalization {
        Some(s) if s.names.len() == arch.d => s.names.clone(),
        _ => (0..arch.d).map(|j| format!("x{j}")).collect(),
    };
    create_dir(out_dir)?;
    let counts = selection_heatmap(&table, arch.d)?;
    write_heatmap_csv(&out_dir.join("heatmap.csv"), &counts, &names)?;
    let graph = group_graph(&table, arch.k, arch.m)?;
    graph.write_edge_list(&out_dir.join("group_graph.csv"))?;

    let mut notices = Vec::new();
    let correlation = match data {
        Some(source) => {
            let ds = load_for_model(&ckpt, source)?;
            let rep = correlation_analysis(model, &ds, CORRELATION_SLOT_CAP)?;
            write_histograms_csv(&out_dir.join("correlation_histograms.csv"), &rep.intra, &rep.inter)?;
            if rep.zero_variance > 0 {
                notices.push(format!("{} slot(s) had zero variance; their correlations are 0", rep.zero_variance));
            }
            Some(CorrelationSummary {
                slots: rep.slots,
                intra_pairs: rep.intra.total(),
                inter_pairs: rep.inter.total(),
                zero_variance_slots: rep.zero_variance,
                mean_abs_intra: mean_abs_pairs(&rep.matrix, rep.slots, arch.m, true),
                mean_abs_inter: mean_abs_pairs(&rep.matrix, rep.slots, arch.m, false),
            })
        }
        None => {
            notices.push("no dataset given; correlation analysis skipped".into());
            None
        }
    };

    let report = AnalyzeReport {
        temperature: routing.temperature,
        sparsity_fraction: sparsity_fraction(&routing, DEFAULT_SPARSITY_THRESHOLD),
        groups: (0..arch.k)
            .map(|g| table.group(g, arch.m).iter().map(|&f| names[f].clone()).collect())
            .collect(),
        slot_to_feature: table.slot_to_feature,
        row_confidence: table.row_confidence,
        edges: graph.edges,
        correlation,
        notices,
    };
    write_json(&out_dir.join("analysis.json"), &report)?;
    Ok(report)
}

/// Complexity figures for an architecture string. Without `d`, the input
/// width defaults to `k·m`, the fewest features that fill every slot once.
pub fn cmd_complexity(arch: &str, d: Option<usize>) -> Result<ComplexityReport> {
    let probe = ArchSpec::parse(arch, d.unwrap_or(1))?;
    let d = d.unwrap_or_else(|| (probe.k * probe.m).max(1));
    count_complexity(&ArchSpec::parse(arch, d)?)
}
