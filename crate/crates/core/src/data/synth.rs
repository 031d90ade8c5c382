//! A six-root Bayesian network: three second-level nodes copy the XOR of a
//! root pair (with a small flip probability) and the label depends on how
//! many of them are on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{GmlpError, Result};
use crate::tensor::Tensor;

pub const ROOTS: usize = 6;
pub const MIDDLE: usize = 3;
const CONFIGS: usize = 1 << ROOTS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthBayesNet {
    /// `P(root = 1)` for each of the six roots.
    pub root_prob: [f64; ROOTS],
    /// Probability a second-level node equals the XOR of its parents.
    pub xor_fidelity: f64,
    pub parent_pairs: [(usize, usize); MIDDLE],
    /// `P(label = 1 | number of active second-level nodes)`, indexed 0..=3.
    pub target_rule: [f64; MIDDLE + 1],
}

impl Default for SynthBayesNet {
    fn default() -> Self {
        Self {
            root_prob: [0.5; ROOTS],
            xor_fidelity: 0.99,
            parent_pairs: [(0, 1), (2, 3), (4, 5)],
            target_rule: [0.05, 0.05, 0.95, 0.95],
        }
    }
}

/// Exact posterior over the 64 root configurations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BayesOracle {
    /// `P(x)` for configuration `x` (bit `i` is root `i`).
    pub prior: Vec<f64>,
    /// `[P(J=0 | x), P(J=1 | x)]`.
    pub posterior: Vec<[f64; 2]>,
    pub optimal_accuracy: f64,
    /// `[P(J=0), P(J=1)]`.
    pub label_marginal: [f64; 2],
}

impl BayesOracle {
    /// Bayes decision for a root configuration (ties go to class 0).
    pub fn decide(&self, config: usize) -> usize {
        usize::from(self.posterior[config][1] > self.posterior[config][0])
    }
}

pub fn feature_names() -> Vec<String> {
    ["A", "B", "C", "D", "E", "F"].iter().map(|s| s.to_string()).collect()
}

impl SynthBayesNet {
    pub fn validate(&self) -> Result<()> {
        let probs = self
            .root_prob
            .iter()
            .chain(&self.target_rule)
            .chain(std::iter::once(&self.xor_fidelity));
        for &p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(GmlpError::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        let mut seen = [false; ROOTS];
        for &(a, b) in &self.parent_pairs {
            if a >= ROOTS || b >= ROOTS || a == b {
                return Err(GmlpError::Config(format!("invalid parent pair ({a}, {b})")));
            }
            seen[a] = true;
            seen[b] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(GmlpError::Config("parent pairs must cover all six roots".into()));
        }
        Ok(())
    }

    /// The unordered root pairs, smaller index first.
    pub fn interacting_pairs(&self) -> Vec<(usize, usize)> {
        self.parent_pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect()
    }

    fn xor_of(&self, config: usize, node: usize) -> bool {
        let (a, b) = self.parent_pairs[node];
        ((config >> a) & 1) != ((config >> b) & 1)
    }

    /// Draws `n` samples: features are the six roots, the label is the
    /// leaf node.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if n == 0 {
            return Err(GmlpError::EmptyDataset("cannot generate zero samples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n * ROOTS);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let mut config = 0usize;
            for (i, &p) in self.root_prob.iter().enumerate() {
                if rng.gen_bool(p) {
                    config |= 1 << i;
                }
                x.push(((config >> i) & 1) as f64);
            }
            let mut active = 0;
            for node in 0..MIDDLE {
                let xor = self.xor_of(config, node);
                let value = if rng.gen_bool(self.xor_fidelity) { xor } else { !xor };
                active += usize::from(value);
            }
            y.push(usize::from(rng.gen_bool(self.target_rule[active])));
        }
        Dataset::new(Tensor::new(vec![n, ROOTS], x)?, y, 2)?.with_feature_names(feature_names())
    }

    /// Exhaustive enumeration over roots and second-level states.
    pub fn bayes_optimal(&self) -> Result<BayesOracle> {
        self.validate()?;
        let mut prior = vec![0.0; CONFIGS];
        let mut posterior = vec![[0.0; 2]; CONFIGS];
        let mut optimal = 0.0;
        let mut marginal_one = 0.0;
        for config in 0..CONFIGS {
            let p_x: f64 = (0..ROOTS)
                .map(|i| {
                    if (config >> i) & 1 == 1 {
                        self.root_prob[i]
                    } else {
                        1.0 - self.root_prob[i]
                    }
                })
                .product();
            let mut p_one = 0.0;
            for states in 0..(1 << MIDDLE) {
                let mut p_states = 1.0;
                for node in 0..MIDDLE {
                    let on = (states >> node) & 1 == 1;
                    let agrees = on == self.xor_of(config, node);
                    p_states *= if agrees { self.xor_fidelity } else { 1.0 - self.xor_fidelity };
                }
                p_one += p_states * self.target_rule[(states as u32).count_ones() as usize];
            }
            prior[config] = p_x;
            posterior[config] = [1.0 - p_one, p_one];
            optimal += p_x * p_one.max(1.0 - p_one);
            marginal_one += p_x * p_one;
        }
        Ok(BayesOracle {
            prior,
            posterior,
            optimal_accuracy: optimal,
            label_marginal: [1.0 - marginal_one, marginal_one],
        })
    }
}

/// Root configuration index of a feature row of zeros and ones.
pub fn config_of(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |acc, (i, &v)| acc | (usize::from(v > 0.5) << i))
}
