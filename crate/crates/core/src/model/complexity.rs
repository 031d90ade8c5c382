//! Operation and parameter counts for GMLP and MLP networks.
//!
//! The GMLP series counts the routing gather (`km`), one `km²/b^j` term per
//! Group-FC stage with the group count shrinking by the branching factor
//! per stage, and the output layer over the last stage's width. `L` is the
//! number of Group-FC stages plus the output layer.

use num_rational::Ratio;
use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use super::arch::{ArchSpec, Block, NetKind};
use super::network::Model;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    /// Multiply-accumulates of one prediction.
    pub predict_ops: f64,
    /// Per-sample forward cost while the routing is still dense.
    pub train_ops: f64,
    /// Weight count implied by the training series (no biases or batch norm).
    pub param_count_formula: f64,
    /// Cost of the dense MLP of matching width and depth (GMLP only).
    pub mlp_equivalent_ops: Option<f64>,
    /// Scalars in the built model's parameter list.
    pub param_count_actual: usize,
    /// Fraction of input features each routing row touches after
    /// discretization, i.e. `1/k`.
    pub density: Ratio<u64>,
    /// Features visible to one group at each Group-FC stage.
    pub receptive_field_by_layer: Vec<usize>,
}

/// `km + Σ_{j<L-1} km²/b^j + C·km/b^{L-1}` for a GMLP.
pub fn gmlp_predict_series(k: usize, m: usize, classes: usize, layers: usize, branching: usize) -> f64 {
    let km = (k * m) as f64;
    km + group_series(k, m, classes, layers, branching)
}

/// `kmd + Σ_{j<L-1} km²/b^j + C·km/b^{L-1}`: the GMLP series with a dense
/// routing product instead of a gather.
pub fn gmlp_train_series(k: usize, m: usize, d: usize, classes: usize, layers: usize, branching: usize) -> f64 {
    (k * m * d) as f64 + group_series(k, m, classes, layers, branching)
}

/// `kmd + Σ_{j<L-1} k²m²/2^j + C·km/2^{L-1}`: a dense MLP whose hidden
/// widths halve from `km`.
pub fn mlp_series(k: usize, m: usize, d: usize, classes: usize, layers: usize) -> f64 {
    let km = (k * m) as f64;
    let mut total = km * d as f64;
    let hidden = layers.saturating_sub(1);
    for j in 0..hidden {
        total += km * km / 2f64.powi(j as i32);
    }
    total + classes as f64 * km / 2f64.powi(hidden as i32)
}

fn group_series(k: usize, m: usize, classes: usize, layers: usize, branching: usize) -> f64 {
    let km = (k * m) as f64;
    let b = branching as f64;
    let hidden = layers.saturating_sub(1);
    let mut total = 0.0;
    for j in 0..hidden {
        total += km * m as f64 / b.powi(j as i32);
    }
    total + classes as f64 * km / b.powi(hidden as i32)
}

/// `min(d, b^{l-1}·m)` for a stage `l ≥ 1`.
pub fn receptive_field(layer: usize, m: usize, branching: usize, d: usize) -> usize {
    let mut width = m as u128;
    for _ in 1..layer {
        width = width.saturating_mul(branching as u128);
        if width >= d as u128 {
            return d;
        }
    }
    (width as usize).min(d)
}

pub fn count_complexity(spec: &ArchSpec) -> Result<ComplexityReport> {
    let model = Model::build(spec)?;
    let actual = model.param_count();
    Ok(match spec.kind {
        NetKind::Gmlp => {
            let layers = spec.gfc_count() + 1;
            let train = gmlp_train_series(spec.k, spec.m, spec.d, spec.classes, layers, spec.branching);
            ComplexityReport {
                predict_ops: gmlp_predict_series(spec.k, spec.m, spec.classes, layers, spec.branching),
                train_ops: train,
                param_count_formula: train,
                mlp_equivalent_ops: Some(mlp_series(spec.k, spec.m, spec.d, spec.classes, layers)),
                param_count_actual: actual,
                density: Ratio::new(1, spec.k as u64),
                receptive_field_by_layer: (1..layers)
                    .map(|l| receptive_field(l, spec.m, spec.branching, spec.d))
                    .collect(),
            }
        }
        NetKind::Mlp => {
            let mut width = spec.d;
            let mut ops = 0usize;
            let mut fields = Vec::new();
            for block in &spec.blocks {
                if let Block::Dense(out) | Block::Output(out) = *block {
                    ops += width * out;
                    width = out;
                    if matches!(block, Block::Dense(_)) {
                        fields.push(spec.d);
                    }
                }
            }
            let ops = ops as f64;
            ComplexityReport {
                predict_ops: ops,
                train_ops: ops,
                param_count_formula: ops,
                mlp_equivalent_ops: None,
                param_count_actual: actual,
                density: Ratio::from_integer(1),
                receptive_field_by_layer: fields,
            }
        }
    })
}

fn count_value(v: f64) -> serde_json::Value {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        serde_json::Value::from(v as i64)
    } else {
        serde_json::Value::from(v)
    }
}

impl Serialize for ComplexityReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(None)?;
        map.serialize_entry("predict_ops", &count_value(self.predict_ops))?;
        map.serialize_entry("train_ops", &count_value(self.train_ops))?;
        map.serialize_entry("param_count_formula", &count_value(self.param_count_formula))?;
        if let Some(ops) = self.mlp_equivalent_ops {
            map.serialize_entry("mlp_equivalent_ops", &count_value(ops))?;
        }
        map.serialize_entry("param_count_actual", &self.param_count_actual)?;
        map.serialize_entry("density", &self.density.to_string())?;
        map.serialize_entry("density_value", &(*self.density.numer() as f64 / *self.density.denom() as f64))?;
        map.serialize_entry("receptive_field_by_layer", &self.receptive_field_by_layer)?;
        map.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::PoolKind;

    #[test]
    fn synthetic_predict_ops() {
        assert_eq!(gmlp_predict_series(4, 2, 2, 2, 2), 32.0);
        let spec = ArchSpec::parse("GSel-4-2, GFC, ReLU, BNorm, Concat, FC-2, Softmax", 6).unwrap();
        let report = count_complexity(&spec).unwrap();
        assert_eq!(report.predict_ops, 32.0);
        assert_eq!(report.train_ops, 48.0 + 16.0 + 8.0);
        assert!(report.param_count_actual as f64 >= report.param_count_formula);
    }

    #[test]
    fn density_is_one_over_k() {
        let spec = ArchSpec::gmlp_tree(3072, 10, 1536, 16, 2, PoolKind::Max, 2).unwrap();
        assert_eq!(Ratio::new(1u64, 1536), Ratio::new(1, spec.k as u64));
        let series = gmlp_predict_series(1536, 16, 10, 3, 2);
        let km = 1536.0 * 16.0;
        assert_eq!(series, km + km * 16.0 + km * 8.0 + 10.0 * km / 4.0);
    }

    #[test]
    fn receptive_field_doubles_per_stage() {
        assert_eq!(receptive_field(1, 4, 2, 100), 4);
        assert_eq!(receptive_field(2, 4, 2, 100), 8);
        assert_eq!(receptive_field(3, 4, 4, 100), 64);
        assert_eq!(receptive_field(4, 4, 4, 100), 100);
        assert_eq!(receptive_field(60, 4, 2, 100), 100);
    }

    #[test]
    fn mlp_counts() {
        // kmd + k²m² + k²m²/2 + C·km/4 with km = 8, d = 6, C = 2.
        assert_eq!(mlp_series(4, 2, 6, 2, 3), 48.0 + 64.0 + 32.0 + 4.0);
        let spec = ArchSpec::mlp(6, 2, &[8, 4]).unwrap();
        let report = count_complexity(&spec).unwrap();
        assert_eq!(report.predict_ops, 48.0 + 32.0 + 8.0);
        assert_eq!(report.density, Ratio::from_integer(1));
        assert_eq!(report.receptive_field_by_layer, vec![6, 6]);
    }

    #[test]
    fn gmlp_is_cheaper_than_matching_mlp() {
        for (k, m) in [(4, 2), (16, 4), (64, 8)] {
            assert!(gmlp_predict_series(k, m, 10, 3, 2) < mlp_series(k, m, 100, 10, 3));
        }
    }

    #[test]
    fn report_serializes_integral_counts_as_integers() {
        let spec = ArchSpec::parse("GSel-4-2, GFC, ReLU, BNorm, Concat, FC-2", 6).unwrap();
        let json = serde_json::to_value(count_complexity(&spec).unwrap()).unwrap();
        assert_eq!(json["predict_ops"], serde_json::json!(32));
        assert_eq!(json["density"], serde_json::json!("1/4"));
        assert_eq!(json["receptive_field_by_layer"], serde_json::json!([2]));
    }
}
