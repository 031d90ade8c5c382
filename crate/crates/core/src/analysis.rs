//! Introspection of learned routing: discretization, sparsity, selection
//! counts, group co-membership graphs and slot correlations.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GmlpError, Result};
use crate::layers::RoutingParams;
use crate::model::Model;

/// Discretized routing: the chosen input feature of every slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub slot_to_feature: Vec<usize>,
    /// Largest softmax probability of each row at the temperature in effect.
    pub row_confidence: Vec<f64>,
}

impl RoutingTable {
    /// Feature indices of group `g`.
    pub fn group(&self, g: usize, m: usize) -> &[usize] {
        &self.slot_to_feature[g * m..(g + 1) * m]
    }
}

/// Row-wise argmax of the logits, lowest index on ties.
pub fn discretize_routing(routing: &RoutingParams) -> RoutingTable {
    let d = routing.d;
    let probs = routing.probabilities();
    let mut slot_to_feature = Vec::with_capacity(routing.k * routing.m);
    let mut row_confidence = Vec::with_capacity(routing.k * routing.m);
    for (row, prow) in routing.psi.data().chunks(d).zip(probs.chunks(d)) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        slot_to_feature.push(best);
        row_confidence.push(prow.iter().copied().fold(0.0, f64::max));
    }
    RoutingTable {
        slot_to_feature,
        row_confidence,
    }
}

/// Fraction of routing rows whose largest probability reaches `threshold`.
pub fn sparsity_fraction(routing: &RoutingParams, threshold: f64) -> f64 {
    let rows = routing.k * routing.m;
    if rows == 0 {
        return 0.0;
    }
    let probs = routing.probabilities();
    let hits = probs
        .chunks(routing.d)
        .filter(|row| row.iter().copied().fold(0.0, f64::max) >= threshold)
        .count();
    hits as f64 / rows as f64
}

pub const DEFAULT_SPARSITY_THRESHOLD: f64 = 0.99;

/// How many slots picked each of the `d` features.
pub fn selection_heatmap(table: &RoutingTable, d: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; d];
    for &f in &table.slot_to_feature {
        *counts
            .get_mut(f)
            .ok_or_else(|| GmlpError::Dimension(format!("slot routed to feature {f}, but d = {d}")))? += 1;
    }
    Ok(counts)
}

/// Undirected weighted co-membership graph of features.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupGraph {
    pub nodes: Vec<usize>,
    /// `(a, b, weight)` with `a < b`, sorted.
    pub edges: Vec<(usize, usize, usize)>,
}

impl GroupGraph {
    pub fn total_weight(&self) -> usize {
        self.edges.iter().map(|e| e.2).sum()
    }

    pub fn weight(&self, a: usize, b: usize) -> usize {
        let key = (a.min(b), a.max(b));
        self.edges
            .iter()
            .find(|e| (e.0, e.1) == key)
            .map_or(0, |e| e.2)
    }

    /// One `feature_a,feature_b,weight` line per edge.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (a, b, w) in &self.edges {
            text.push_str(&format!("{a},{b},{w}\n"));
        }
        fs::write(path, text).map_err(|e| GmlpError::io(path, e))
    }

    pub fn read_edge_list(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GmlpError::io(path, e))?;
        let bad = |line: usize, message: &str| GmlpError::Parse {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        };
        let mut weights = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(bad(i + 1, "expected feature_a,feature_b,weight"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "fields must be non-negative integers"));
            let (a, b, w) = (num(fields[0])?, num(fields[1])?, num(fields[2])?);
            if a == b || w == 0 {
                return Err(bad(i + 1, "edges need distinct endpoints and a positive weight"));
            }
            *weights.entry((a.min(b), a.max(b))).or_insert(0) += w;
        }
        Ok(Self::from_weights(weights))
    }

    fn from_weights(weights: BTreeMap<(usize, usize), usize>) -> Self {
        let mut nodes: Vec<usize> = weights.keys().flat_map(|&(a, b)| [a, b]).collect();
        nodes.sort_unstable();
        nodes.dedup();
        Self {
            nodes,
            edges: weights.into_iter().map(|((a, b), w)| (a, b, w)).collect(),
        }
    }
}

/// Links every pair of distinct features sharing a group; pairs repeated
/// across groups add up. A feature picked twice in one group adds no edge.
pub fn group_graph(table: &RoutingTable, k: usize, m: usize) -> Result<GroupGraph> {
    if table.slot_to_feature.len() != k * m {
        return Err(GmlpError::Dimension(format!(
            "routing table has {} slots, expected {}",
            table.slot_to_feature.len(),
            k * m
        )));
    }
    let mut weights = BTreeMap::new();
    let mut all_nodes: Vec<usize> = table.slot_to_feature.clone();
    for g in 0..k {
        let mut members = table.group(g, m).to_vec();
        members.sort_unstable();
        members.dedup();
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                *weights.entry((members[i], members[j])).or_insert(0) += 1;
            }
        }
    }
    let mut graph = GroupGraph::from_weights(weights);
    all_nodes.sort_unstable();
    all_nodes.dedup();
    graph.nodes = all_nodes;
    Ok(graph)
}

/// Fixed-width bins over `[lo, hi]`; the top edge falls in the last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self {
            lo,
            hi,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let t = ((v - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        let i = (t.max(0.0) as usize).min(bins - 1);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }
}

pub const CORRELATION_BINS: usize = 40;
pub const CORRELATION_SLOT_CAP: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    /// Number of analyzed slots `n`.
    pub slots: usize,
    /// Row-major `n × n` Pearson correlations.
    pub matrix: Vec<f64>,
    /// Pairs of slots within one group.
    pub intra: Histogram,
    /// Pairs of slots in different groups.
    pub inter: Histogram,
    /// Slots with zero variance; their correlations are recorded as 0.
    pub zero_variance: usize,
}

/// Pearson correlations between columns of a row-major `rows × cols` matrix.
pub fn pearson_matrix(values: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<bool>) {
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += values[r * cols + c];
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut centered = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            centered[r * cols + c] = values[r * cols + c] - mean[c];
        }
    }
    let mut cov = vec![0.0; cols * cols];
    for r in 0..rows {
        let row = &centered[r * cols..(r + 1) * cols];
        for a in 0..cols {
            let va = row[a];
            for b in a..cols {
                cov[a * cols + b] += va * row[b];
            }
        }
    }
    let scale: f64 = cov.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let degenerate: Vec<bool> = (0..cols).map(|c| cov[c * cols + c] <= 1e-24 * scale).collect();
    let mut corr = vec![0.0; cols * cols];
    for a in 0..cols {
        for b in a..cols {
            let v = if degenerate[a] || degenerate[b] {
                0.0
            } else if a == b {
                1.0
            } else {
                let r = cov[a * cols + b] / (cov[a * cols + a] * cov[b * cols + b]).sqrt();
                r.clamp(-1.0, 1.0)
            };
            corr[a * cols + b] = v;
            corr[b * cols + a] = v;
        }
    }
    (corr, degenerate)
}

/// Correlations of the first `cap` Group-Select outputs over `ds`, split
/// into same-group and cross-group slot pairs.
pub fn correlation_analysis(model: &Model, ds: &Dataset, cap: usize) -> Result<CorrelationReport> {
    ds.ensure_nonempty()?;
    let selected = model.select_outputs(ds.x(), model.routing_table().is_some())?;
    let m = model.arch().m;
    correlation_of_slots(selected.data(), ds.len(), selected.cols(), m, cap)
}

/// Slot correlation report for raw `[rows, slots]` outputs with groups of
/// `m` consecutive slots.
pub fn correlation_of_slots(values: &[f64], rows: usize, slots: usize, m: usize, cap: usize) -> Result<CorrelationReport> {
    if rows == 0 {
        return Err(GmlpError::EmptyDataset("no rows to correlate".into()));
    }
    let n = slots.min(cap);
    let mut kept = Vec::with_capacity(rows * n);
    for r in 0..rows {
        kept.extend_from_slice(&values[r * slots..r * slots + n]);
    }
    let (matrix, degenerate) = pearson_matrix(&kept, rows, n);
    let mut intra = Histogram::new(-1.0, 1.0, CORRELATION_BINS);
    let mut inter = Histogram::new(-1.0, 1.0, CORRELATION_BINS);
    for a in 0..n {
        for b in a + 1..n {
            let v = matrix[a * n + b];
            if a / m == b / m {
                intra.add(v);
            } else {
                inter.add(v);
            }
        }
    }
    Ok(CorrelationReport {
        slots: n,
        matrix,
        intra,
        inter,
        zero_variance: degenerate.iter().filter(|&&d| d).count(),
    })
}

/// `feature,name,count` rows.
pub fn write_heatmap_csv(path: &Path, counts: &[usize], names: &[String]) -> Result<()> {
    let mut text = String::from("feature,name,count\n");
    for (i, c) in counts.iter().enumerate() {
        let name = names.get(i).cloned().unwrap_or_else(|| format!("x{i}"));
        text.push_str(&format!("{i},{name},{c}\n"));
    }
    fs::write(path, text).map_err(|e| GmlpError::io(path, e))
}

pub fn read_heatmap_csv(path: &Path) -> Result<Vec<usize>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| GmlpError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut counts = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let bad = |message: String| GmlpError::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let count = rec
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing or invalid count".into()))?;
        counts.push(count);
    }
    Ok(counts)
}

/// `bin_lo,bin_hi,intra,inter` rows.
pub fn write_histograms_csv(path: &Path, intra: &Histogram, inter: &Histogram) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| GmlpError::io(path, e))?;
    let mut text = String::from("bin_lo,bin_hi,intra,inter\n");
    for i in 0..intra.counts.len() {
        let (lo, hi) = intra.bin_edges(i);
        text.push_str(&format!("{lo},{hi},{},{}\n", intra.counts[i], inter.counts[i]));
    }
    file.write_all(text.as_bytes()).map_err(|e| GmlpError::io(path, e))
}

pub fn read_histograms_csv(path: &Path) -> Result<(Histogram, Histogram)> {
    let text = fs::read_to_string(path).map_err(|e| GmlpError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parsed = (|| -> Option<(f64, f64, usize, usize)> {
            Some((f.first()?.parse().ok()?, f.get(1)?.parse().ok()?, f.get(2)?.parse().ok()?, f.get(3)?.parse().ok()?))
        })();
        rows.push(parsed.ok_or_else(|| GmlpError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected bin_lo,bin_hi,intra,inter".into(),
        })?);
    }
    if rows.is_empty() {
        return Err(GmlpError::EmptyDataset(format!("{} has no bins", path.display())));
    }
    let (lo, hi) = (rows[0].0, rows[rows.len() - 1].1);
    let mut intra = Histogram::new(lo, hi, rows.len());
    let mut inter = Histogram::new(lo, hi, rows.len());
    for (i, r) in rows.iter().enumerate() {
        intra.counts[i] = r.2;
        inter.counts[i] = r.3;
    }
    Ok((intra, inter))
}
