//! Datasets: CSV ingestion and export, train-only normalization, stratified
//! splits, seeded batching, and two synthetic generators.

mod images;
mod synth;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmlpError, Result};
use crate::tensor::Tensor;

pub use images::HalfNoiseImages;
pub use synth::{config_of, feature_names as synth_feature_names, BayesOracle, SynthBayesNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

/// Features `[N, d]` with class labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Tensor,
    y: Vec<usize>,
    classes: usize,
    feature_names: Vec<String>,
    /// Original label strings when the source labels were not integers.
    class_names: Option<Vec<String>>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(GmlpError::Dimension(format!("features must be [N, d], got {:?}", x.shape())));
        }
        if x.rows() != y.len() {
            return Err(GmlpError::Dimension(format!("{} feature rows but {} labels", x.rows(), y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(GmlpError::Label { label: bad, classes });
        }
        let feature_names = (0..x.cols()).map(|j| format!("x{j}")).collect();
        Ok(Self {
            x,
            y,
            classes,
            feature_names,
            class_names: None,
            split: SplitTag::Train,
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.d() {
            return Err(GmlpError::Dimension(format!("{} names for {} features", names.len(), self.d())));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Raises the class count, e.g. to match a model trained on more
    /// classes than this split happens to contain.
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if let Some(&bad) = self.y.iter().find(|&&l| l >= classes) {
            return Err(GmlpError::Label { label: bad, classes });
        }
        self.classes = classes;
        Ok(self)
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(GmlpError::EmptyDataset(format!("{} split has no rows", self.split)));
        }
        Ok(())
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.select_rows(indices)?,
            y: indices.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
            split: self.split,
        })
    }

    /// Label counts per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    /// Writes `feature..., label` rows with a header line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = self.feature_names.clone();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        let mut record = Vec::with_capacity(self.d() + 1);
        for r in 0..self.len() {
            record.clear();
            record.extend(self.x.row(r).iter().map(|v| v.to_string()));
            record.push(match &self.class_names {
                Some(names) => names[self.y[r]].clone(),
                None => self.y[r].to_string(),
            });
            w.write_record(&record).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| GmlpError::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> GmlpError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GmlpError::io(path, io),
        other => GmlpError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Which CSV column holds the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Last,
    Index(usize),
    Name(String),
}

impl std::str::FromStr for LabelColumn {
    type Err = GmlpError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(GmlpError::Config("empty label column".into()));
        }
        if s.eq_ignore_ascii_case("last") {
            return Ok(LabelColumn::Last);
        }
        Ok(match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        })
    }
}

/// Reads a comma-separated file. Integer labels are used as class indices;
/// any other label strings are numbered in order of first appearance.
pub fn load_csv(path: &Path, label: &LabelColumn, has_header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers: Option<Vec<String>> = if has_header {
        Some(reader.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect())
    } else {
        None
    };

    let parse_err = |line: usize, message: String| GmlpError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut width: Option<usize> = headers.as_ref().map(Vec::len);
    let mut label_at: Option<usize> = None;
    let resolve = |width: usize| -> Result<usize> {
        match label {
            LabelColumn::Last => Ok(width - 1),
            LabelColumn::Index(i) if *i < width => Ok(*i),
            LabelColumn::Index(i) => Err(GmlpError::Config(format!(
                "label column {i} out of range for {width} columns in {}",
                path.display()
            ))),
            LabelColumn::Name(name) => headers
                .as_ref()
                .and_then(|h| h.iter().position(|c| c == name))
                .ok_or_else(|| GmlpError::Config(format!("no label column `{name}` in {}", path.display()))),
        }
    };
    if let Some(w) = width {
        label_at = Some(resolve(w)?);
    }

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(parse_err(line, format!("expected {w} fields, found {}", record.len())));
        }
        if w < 2 {
            return Err(parse_err(line, "need at least one feature and a label".into()));
        }
        let at = match label_at {
            Some(a) => a,
            None => *label_at.insert(resolve(w)?),
        };
        for (j, field) in record.iter().enumerate() {
            if j == at {
                raw_labels.push((line, field.to_string()));
                continue;
            }
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("column {}: `{field}` is not a number", j + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column {}: non-finite value `{field}`", j + 1)));
            }
            features.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(GmlpError::EmptyDataset(format!("{} has no data rows", path.display())));
    }
    let width = width.expect("rows seen");
    let at = label_at.expect("rows seen");

    let integral: Option<Vec<usize>> = raw_labels.iter().map(|(_, s)| s.parse::<usize>().ok()).collect();
    let (y, classes, class_names) = match integral {
        Some(y) => {
            let classes = y.iter().max().map_or(0, |m| m + 1);
            (y, classes, None)
        }
        None => {
            // Sorted so that files sharing a label set share the mapping.
            let mut names: Vec<String> = raw_labels.iter().map(|(_, s)| s.clone()).collect();
            names.sort();
            names.dedup();
            let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let y = raw_labels.iter().map(|(_, s)| index[s.as_str()]).collect();
            (y, names.len(), Some(names))
        }
    };

    let n = y.len();
    let x = Tensor::new(vec![n, width - 1], features)?;
    let mut ds = Dataset::new(x, y, classes)?;
    if let Some(h) = headers {
        let names = h.into_iter().enumerate().filter(|(j, _)| *j != at).map(|(_, s)| s).collect();
        ds = ds.with_feature_names(names)?;
    }
    ds.class_names = class_names;
    Ok(ds)
}

/// Per-feature mean and population standard deviation of a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub names: Vec<String>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MuSigma {
    mu: f64,
    sigma: f64,
}

impl NormStats {
    pub fn fit(train: &Dataset) -> Result<Self> {
        train.ensure_nonempty()?;
        let (n, d) = (train.len(), train.d());
        let mut mu = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mu.iter_mut().zip(train.x.row(r)) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(train.x.row(r)).zip(&mu) {
                *s += (v - m) * (v - m);
            }
        }
        let sigma = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Self {
            names: train.feature_names.clone(),
            mu,
            sigma,
        })
    }

    /// `(x − μ)/σ` per column; columns with `σ = 0` become 0.
    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        if ds.d() != self.mu.len() {
            return Err(GmlpError::Dimension(format!(
                "normalization stats cover {} features, dataset has {}",
                self.mu.len(),
                ds.d()
            )));
        }
        let d = ds.d();
        for (i, v) in ds.x.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = if self.sigma[j] > 0.0 {
                (*v - self.mu[j]) / self.sigma[j]
            } else {
                0.0
            };
        }
        Ok(())
    }

    /// `{feature_name: {mu, sigma}}` in column order.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for ((name, &mu), &sigma) in self.names.iter().zip(&self.mu).zip(&self.sigma) {
            map.insert(name.clone(), serde_json::to_value(MuSigma { mu, sigma }).expect("plain floats"));
        }
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let map = value
            .as_object()
            .ok_or_else(|| GmlpError::Checkpoint("normalization stats must be a JSON object".into()))?;
        let mut stats = Self {
            names: Vec::new(),
            mu: Vec::new(),
            sigma: Vec::new(),
        };
        for (name, entry) in map {
            let ms: MuSigma = serde_json::from_value(entry.clone())?;
            stats.names.push(name.clone());
            stats.mu.push(ms.mu);
            stats.sigma.push(ms.sigma);
        }
        Ok(stats)
    }
}

/// Fits statistics on `train` and applies them to it and every other split.
pub fn normalize(train: &mut Dataset, others: &mut [&mut Dataset]) -> Result<NormStats> {
    let stats = NormStats::fit(train)?;
    stats.apply(train)?;
    for ds in others.iter_mut() {
        stats.apply(ds)?;
    }
    Ok(stats)
}

/// Stratified seeded partition into `(rest, held_out)` index lists, each
/// sorted. Per-class held-out counts use largest remainders so the total is
/// `round(N·fraction)`; classes with at least two rows keep one on each side.
pub fn split_indices(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(GmlpError::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n = labels.len();
    if n < 5 {
        return Err(GmlpError::EmptyDataset(format!("need at least 5 rows to split, got {n}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let target = ((n as f64) * fraction).round() as usize;
    let ideal: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * fraction).collect();
    let mut take: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    let mut short = target.saturating_sub(take.iter().sum());
    for &c in order.iter().cycle().take(classes * 2) {
        if short == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            short -= 1;
        }
    }
    // Keep every class with two or more rows on both sides.
    for c in 0..classes {
        let size = by_class[c].len();
        if size < 2 {
            continue;
        }
        if take[c] == 0 {
            if let Some(donor) = (0..classes).filter(|&o| take[o] > 1).max_by_key(|&o| (take[o], usize::MAX - o)) {
                take[donor] -= 1;
                take[c] = 1;
            }
        } else if take[c] == size {
            if let Some(recv) = (0..classes)
                .filter(|&o| o != c && take[o] + 1 < by_class[o].len())
                .max_by_key(|&o| (by_class[o].len() - take[o], usize::MAX - o))
            {
                take[recv] += 1;
                take[c] = size - 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rest = Vec::with_capacity(n - target);
    let mut held = Vec::with_capacity(target);
    for (members, &t) in by_class.iter_mut().zip(&take) {
        members.shuffle(&mut rng);
        held.extend_from_slice(&members[..t]);
        rest.extend_from_slice(&members[t..]);
    }
    rest.sort_unstable();
    held.sort_unstable();
    Ok((rest, held))
}

/// Stratified seeded split into `(train, test)`.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(&ds.y, ds.classes, test_fraction, seed)?;
    Ok((
        ds.select(&train)?.with_split(SplitTag::Train),
        ds.select(&test)?.with_split(SplitTag::Test),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Reshuffled every epoch; the short final batch is dropped.
    Train,
    /// Dataset order; the short final batch is kept.
    Eval,
}

/// Row indices of each batch for one pass over `n` rows.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64, mode: BatchMode) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(GmlpError::Config(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if mode == BatchMode::Train {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order
        .chunks(batch_size)
        .filter(|c| mode == BatchMode::Eval || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Materialized `(features, labels)` batches for one pass.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64, mode: BatchMode) -> Result<Vec<(Tensor, Vec<usize>)>> {
    batch_indices(ds.len(), batch_size, seed, epoch, mode)?
        .into_iter()
        .map(|idx| {
            let x = ds.x.select_rows(&idx)?;
            let y = idx.iter().map(|&i| ds.y[i]).collect();
            Ok((x, y))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    fn toy(n: usize, classes: usize) -> Dataset {
        let x = Tensor::new(vec![n, 2], (0..2 * n).map(|v| v as f64).collect()).unwrap();
        Dataset::new(x, (0..n).map(|i| i % classes).collect(), classes).unwrap()
    }

    #[test]
    fn loads_label_last() {
        let f = write_tmp("1,2,0\n3,4,1\n");
        let ds = load_csv(f.path(), &LabelColumn::Last, false).unwrap();
        assert_eq!(ds.x().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ds.y(), &[0, 1]);
        assert_eq!(ds.classes(), 2);
    }

    #[test]
    fn header_is_skipped_and_names_kept() {
        let f = write_tmp("a,label,b\n1,1,2\n3,0,4\n");
        let ds = load_csv(f.path(), &"label".parse().unwrap(), true).unwrap();
        assert_eq!(ds.x().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ds.y(), &[1, 0]);
        assert_eq!(ds.feature_names(), &["a", "b"]);
    }

    #[test]
    fn string_labels_in_sorted_order() {
        let f = write_tmp("0.5,dog\n1.5,cat\n2.5,dog\n");
        let ds = load_csv(f.path(), &LabelColumn::Last, false).unwrap();
        assert_eq!(ds.y(), &[1, 0, 1]);
        assert_eq!(ds.class_names().unwrap(), &["cat", "dog"]);
    }

    #[test]
    fn missing_label_column_is_an_error() {
        let f = write_tmp("a,b\n1,2\n");
        assert!(load_csv(f.path(), &LabelColumn::Name("y".into()), true).is_err());
        assert!(load_csv(f.path(), &LabelColumn::Index(5), true).is_err());
    }

    #[test]
    fn malformed_rows_report_line() {
        let f = write_tmp("1,2,0\n3,x,1\n");
        match load_csv(f.path(), &LabelColumn::Last, false) {
            Err(GmlpError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let f = write_tmp("1,2,0\n3,1\n");
        assert!(matches!(load_csv(f.path(), &LabelColumn::Last, false), Err(GmlpError::Parse { .. })));
    }

    #[test]
    fn empty_file_is_rejected() {
        let f = write_tmp("a,b,label\n");
        assert!(matches!(load_csv(f.path(), &LabelColumn::Last, true), Err(GmlpError::EmptyDataset(_))));
    }

    #[test]
    fn csv_round_trip() {
        let ds = toy(7, 3);
        let f = tempfile::NamedTempFile::new().unwrap();
        ds.write_csv(f.path()).unwrap();
        let back = load_csv(f.path(), &LabelColumn::Last, true).unwrap();
        assert_eq!(back.x(), ds.x());
        assert_eq!(back.y(), ds.y());
    }

    #[test]
    fn normalize_uses_train_stats() {
        let mut train = Dataset::new(Tensor::new(vec![2, 2], vec![1.0, 5.0, 3.0, 5.0]).unwrap(), vec![0, 1], 2).unwrap();
        let mut test = Dataset::new(Tensor::new(vec![1, 2], vec![5.0, 7.0]).unwrap(), vec![0], 2).unwrap();
        let stats = normalize(&mut train, &mut [&mut test]).unwrap();
        assert_eq!(train.x().data(), &[-1.0, 0.0, 1.0, 0.0]);
        // (5 − 2)/1 with train μ = 2, σ = 1; constant column maps to 0.
        assert_eq!(test.x().data(), &[3.0, 0.0]);
        let json = stats.to_json();
        assert_eq!(json["x0"]["mu"], serde_json::json!(2.0));
        assert_eq!(NormStats::from_json(&json).unwrap(), stats);
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = toy(100, 3);
        let (train, test) = split_indices(ds.y(), 3, 0.2, 5).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(ds.y(), 3, 0.2, 5).unwrap(), (train.clone(), test.clone()));
        assert_ne!(split_indices(ds.y(), 3, 0.2, 6).unwrap().1, test);
    }

    #[test]
    fn split_is_stratified_and_keeps_small_classes() {
        let mut labels = vec![0; 95];
        labels.extend([1, 1, 1, 2, 2]);
        let (train, test) = split_indices(&labels, 3, 0.2, 1).unwrap();
        assert_eq!(test.len(), 20);
        for c in 1..3 {
            assert!(test.iter().any(|&i| labels[i] == c));
            assert!(train.iter().any(|&i| labels[i] == c));
        }
    }

    #[test]
    fn split_rejects_bad_fraction_and_tiny_sets() {
        let ds = toy(10, 2);
        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
        assert!(split(&toy(4, 2), 0.5, 1).is_err());
    }

    #[test]
    fn batch_shapes() {
        let sizes = |mode| -> Vec<usize> { batch_indices(10, 4, 0, 0, mode).unwrap().iter().map(Vec::len).collect() };
        assert_eq!(sizes(BatchMode::Train), vec![4, 4]);
        assert_eq!(sizes(BatchMode::Eval), vec![4, 4, 2]);
        assert!(batch_indices(10, 1, 0, 0, BatchMode::Eval).is_err());
    }

    #[test]
    fn epochs_reshuffle_deterministically() {
        let e0 = batch_indices(50, 5, 3, 0, BatchMode::Train).unwrap();
        let e1 = batch_indices(50, 5, 3, 1, BatchMode::Train).unwrap();
        assert_ne!(e0, e1);
        assert_eq!(e1, batch_indices(50, 5, 3, 1, BatchMode::Train).unwrap());
        let ds = toy(10, 2);
        let b = batches(&ds, 4, 3, 0, BatchMode::Train).unwrap();
        let idx = batch_indices(10, 4, 3, 0, BatchMode::Train).unwrap();
        assert_eq!(b[0].0.row(0), ds.x().row(idx[0][0]));
    }
}
