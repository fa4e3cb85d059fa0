//! Multiclass gradient-boosted decision trees over binary permission
//! features, built from scratch.
//!
//! One regression tree per class per round is fit to the multinomial-deviance
//! pseudo-residuals, with the (L-1)/L Newton leaf step. Raw per-class
//! decision values (the logit vector) are exposed alongside softmax
//! probabilities; the open-set module thresholds the former.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FamilyLabel, OTHERS_FAMILY};
use crate::error::{Error, Result};
use crate::permissions::{PermissionVector, PermissionVocabulary};

/// Splits with gain below this are considered noise and become leaves.
const MIN_SPLIT_GAIN: f64 = 1e-12;

/// Leaf values are clipped here to guard the Newton step's division by a
/// near-zero denominator on pure leaves.
const LEAF_CLIP: f64 = 4.0;

static DECISION_VALUE_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of [`GBMModel::decision_values`] invocations so far in this
/// process. Lets tests verify that open-set classification adds no extra
/// ensemble passes.
pub fn decision_value_calls() -> u64 {
    DECISION_VALUE_CALLS.load(Ordering::Relaxed)
}

/// Boosting hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GBMConfig {
    /// Boosting rounds; each round fits one tree per class.
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Minimum training samples a leaf must cover.
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for GBMConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            max_depth: 4,
            learning_rate: 0.1,
            min_leaf: 2,
            seed: 42,
        }
    }
}

impl GBMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::InvalidConfig("max_depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning_rate must be a positive finite number".into(),
            ));
        }
        if self.min_leaf < 1 {
            return Err(Error::InvalidConfig("min_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

/// A tree node; internal nodes test one binary feature, with the `zero`
/// child taken when the bit is unset. Children are indices into the tree's
/// preorder node array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature: usize,
        zero: usize,
        one: usize,
    },
    Leaf {
        value: f64,
    },
}

/// A regression tree contributing decision values to one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    #[serde(rename = "class")]
    pub class_index: usize,
    /// Nodes in preorder; the root is `nodes[0]`.
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    /// Routes the vector from the root to its unique leaf.
    pub fn leaf_value(&self, p: &PermissionVector) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, zero, one } => {
                    idx = if p.is_set(*feature) { *one } else { *zero };
                }
            }
        }
    }

    /// Internal nodes visited while routing `p`; bounded by the tree depth.
    pub fn route_visits(&self, p: &PermissionVector) -> usize {
        let mut idx = 0;
        let mut visits = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { .. } => return visits,
                TreeNode::Split { feature, zero, one } => {
                    visits += 1;
                    idx = if p.is_set(*feature) { *one } else { *zero };
                }
            }
        }
    }

    /// Longest root-to-leaf path, in edges.
    pub fn depth(&self) -> usize {
        fn depth_at(nodes: &[TreeNode], idx: usize) -> usize {
            match &nodes[idx] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { zero, one, .. } => {
                    1 + depth_at(nodes, *zero).max(depth_at(nodes, *one))
                }
            }
        }
        depth_at(&self.nodes, 0)
    }
}

/// Raw per-class decision values, aligned with the model's class order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    values: Vec<f64>,
}

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest decision value.
    pub fn max(&self) -> f64 {
        assert!(!self.values.is_empty(), "logit vector must be non-empty");
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest value; ties resolve to the lowest index, i.e. the
    /// lexicographically first class name under the model's sorted classes.
    pub fn argmax(&self) -> usize {
        assert!(!self.values.is_empty(), "logit vector must be non-empty");
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate().skip(1) {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// The trained closed-set classifier: per-round, per-class trees plus base
/// scores, bound to the vocabulary it was trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GBMModel {
    pub config: GBMConfig,
    /// Family names, sorted lexicographically; class indices refer here.
    pub classes: Vec<String>,
    pub base_scores: Vec<f64>,
    pub vocab: PermissionVocabulary,
    pub vocab_fingerprint: String,
    /// Round-major: all class trees of round 0, then round 1, ...
    pub trees: Vec<DecisionTree>,
    /// Multinomial deviance on the training set before round 1 and after
    /// each round. Not persisted.
    #[serde(skip)]
    pub train_deviance: Vec<f64>,
}

impl GBMModel {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_features(&self) -> usize {
        self.vocab.len()
    }

    /// Structural consistency checks, applied after deserialization.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.base_scores.len() != self.classes.len() {
            return Err(Error::InvalidConfig(
                "base_scores length differs from class count".into(),
            ));
        }
        if self.trees.len() != self.config.rounds * self.classes.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} trees ({} rounds x {} classes), found {}",
                self.config.rounds * self.classes.len(),
                self.config.rounds,
                self.classes.len(),
                self.trees.len()
            )));
        }
        if self.vocab.fingerprint() != self.vocab_fingerprint {
            return Err(Error::InvalidConfig(
                "vocabulary does not match its recorded fingerprint".into(),
            ));
        }
        for tree in &self.trees {
            if tree.class_index >= self.classes.len() {
                return Err(Error::InvalidConfig("tree class index out of range".into()));
            }
            if tree.depth() > self.config.max_depth {
                return Err(Error::InvalidConfig("tree exceeds max_depth".into()));
            }
            for node in &tree.nodes {
                if let TreeNode::Split { feature, .. } = node {
                    if *feature >= self.vocab.len() {
                        return Err(Error::InvalidConfig(
                            "tree feature index out of range".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical model serialization; binds calibrated
    /// thresholds to this exact model.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("model serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Sums each class's leaf values along all its trees and applies the
    /// learning rate on top of the base score: `z_c = base_c + eta * sum`.
    pub fn decision_values(&self, p: &PermissionVector) -> Result<LogitVector> {
        if p.len() != self.vocab.len() {
            return Err(Error::DimensionMismatch {
                expected: self.vocab.len(),
                got: p.len(),
            });
        }
        DECISION_VALUE_CALLS.fetch_add(1, Ordering::Relaxed);
        let mut acc = vec![0.0f64; self.classes.len()];
        for tree in &self.trees {
            acc[tree.class_index] += tree.leaf_value(p);
        }
        let z = self
            .base_scores
            .iter()
            .zip(acc)
            .map(|(base, sum)| base + self.config.learning_rate * sum)
            .collect();
        Ok(LogitVector::new(z))
    }

    /// Closed-set prediction: the class with the highest decision value
    /// (equivalently, highest softmax probability).
    pub fn predict_closed(&self, p: &PermissionVector) -> Result<FamilyLabel> {
        let z = self.decision_values(p)?;
        Ok(FamilyLabel::known(self.classes[z.argmax()].clone()))
    }

    pub fn class_label(&self, index: usize) -> FamilyLabel {
        FamilyLabel::known(self.classes[index].clone())
    }
}

/// Trains the closed-set classifier on a dataset of known families.
///
/// Per round and class `c`, a regression tree is fit on the pseudo-residuals
/// `r_i = 1{label_i = c} - softmax(z_i)_c` by exact squared-error split
/// search over all binary feature tests; leaf values take the multiclass
/// Newton step `((L-1)/L) * sum(r) / sum(|r|(1-|r|))`, clipped to
/// [-LEAF_CLIP, LEAF_CLIP]. Deterministic given the seed and input order.
pub fn train(dataset: &Dataset, config: &GBMConfig) -> Result<GBMModel> {
    config.validate()?;

    for sample in dataset.samples() {
        match &sample.label {
            FamilyLabel::Novel => {
                return Err(Error::InvalidTrainingLabel(sample.label.to_string()))
            }
            FamilyLabel::Known(name) if name == OTHERS_FAMILY => {
                return Err(Error::InvalidTrainingLabel(name.clone()))
            }
            _ => {}
        }
    }

    let classes: Vec<String> = dataset.known_families().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::NotEnoughClasses {
            needed: 2,
            found: classes.len(),
        });
    }
    let class_index: HashMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i))
        .collect();

    let n = dataset.len();
    let l = classes.len();
    let labels: Vec<usize> = dataset
        .samples()
        .iter()
        .map(|s| class_index[s.label.family_name().expect("known label")])
        .collect();
    let vectors: Vec<&PermissionVector> = dataset.samples().iter().map(|s| &s.vector).collect();

    let base_scores = vec![0.0f64; l];
    let mut z = vec![0.0f64; n * l];
    let mut probs = vec![0.0f64; n * l];
    let mut trees = Vec::with_capacity(config.rounds * l);
    let mut train_deviance = Vec::with_capacity(config.rounds + 1);
    train_deviance.push(multinomial_deviance(&z, &labels, l));

    let newton_factor = (l as f64 - 1.0) / l as f64;
    let fitter = TreeFitter {
        vectors: &vectors,
        n_features: dataset.dim(),
        max_depth: config.max_depth,
        min_leaf: config.min_leaf,
        newton_factor,
    };

    for _round in 0..config.rounds {
        for i in 0..n {
            let row = softmax(&z[i * l..(i + 1) * l]);
            probs[i * l..(i + 1) * l].copy_from_slice(&row);
        }

        // One tree per class, all fit against this round's probabilities.
        // Fits are independent, so they may run in parallel; collecting in
        // class order keeps the model bit-identical to a sequential run.
        let fitted: Vec<(Vec<TreeNode>, Vec<f64>)> = (0..l)
            .into_par_iter()
            .map(|c| {
                let residuals: Vec<f64> = (0..n)
                    .map(|i| (labels[i] == c) as u8 as f64 - probs[i * l + c])
                    .collect();
                fitter.fit(&residuals)
            })
            .collect();

        for (c, (nodes, sample_leaf_values)) in fitted.into_iter().enumerate() {
            for i in 0..n {
                z[i * l + c] += config.learning_rate * sample_leaf_values[i];
            }
            trees.push(DecisionTree {
                class_index: c,
                nodes,
            });
        }
        train_deviance.push(multinomial_deviance(&z, &labels, l));
    }

    let vocab = dataset.vocab().clone();
    let vocab_fingerprint = vocab.fingerprint();
    Ok(GBMModel {
        config: config.clone(),
        classes,
        base_scores,
        vocab,
        vocab_fingerprint,
        trees,
        train_deviance,
    })
}

/// Mean negative log-likelihood under the softmax of the current scores.
fn multinomial_deviance(z: &[f64], labels: &[usize], l: usize) -> f64 {
    let n = labels.len();
    let total: f64 = (0..n)
        .map(|i| {
            let row = &z[i * l..(i + 1) * l];
            log_sum_exp(row) - row[labels[i]]
        })
        .sum();
    total / n as f64
}

struct TreeFitter<'a> {
    vectors: &'a [&'a PermissionVector],
    n_features: usize,
    max_depth: usize,
    min_leaf: usize,
    newton_factor: f64,
}

impl TreeFitter<'_> {
    /// Fits one tree on the residuals of all samples. Returns the preorder
    /// nodes and the leaf value each training sample lands in.
    fn fit(&self, residuals: &[f64]) -> (Vec<TreeNode>, Vec<f64>) {
        let indices: Vec<usize> = (0..residuals.len()).collect();
        let mut nodes = Vec::new();
        let mut sample_leaf_values = vec![0.0f64; residuals.len()];
        self.build(residuals, &indices, 0, &mut nodes, &mut sample_leaf_values);
        (nodes, sample_leaf_values)
    }

    fn build(
        &self,
        residuals: &[f64],
        indices: &[usize],
        depth: usize,
        nodes: &mut Vec<TreeNode>,
        sample_leaf_values: &mut [f64],
    ) -> usize {
        if depth < self.max_depth && indices.len() >= 2 * self.min_leaf {
            if let Some(feature) = self.best_split(residuals, indices) {
                let (zeros, ones): (Vec<usize>, Vec<usize>) = indices
                    .iter()
                    .partition(|&&i| !self.vectors[i].is_set(feature));
                let node_idx = nodes.len();
                nodes.push(TreeNode::Leaf { value: 0.0 }); // patched below
                let zero = self.build(residuals, &zeros, depth + 1, nodes, sample_leaf_values);
                let one = self.build(residuals, &ones, depth + 1, nodes, sample_leaf_values);
                nodes[node_idx] = TreeNode::Split { feature, zero, one };
                return node_idx;
            }
        }
        let value = self.leaf_value(residuals, indices);
        for &i in indices {
            sample_leaf_values[i] = value;
        }
        let node_idx = nodes.len();
        nodes.push(TreeNode::Leaf { value });
        node_idx
    }

    /// Exact search over every binary feature test `p[f] = 1`, maximizing the
    /// squared-error gain. Ties resolve to the lowest feature index.
    fn best_split(&self, residuals: &[f64], indices: &[usize]) -> Option<usize> {
        let n = indices.len();
        let mut sum_ones = vec![0.0f64; self.n_features];
        let mut count_ones = vec![0usize; self.n_features];
        let mut total = 0.0f64;
        for &i in indices {
            let r = residuals[i];
            total += r;
            let bits = self.vectors[i].bits();
            for (f, &bit) in bits.iter().enumerate() {
                sum_ones[f] += r * bit as f64;
                count_ones[f] += bit as usize;
            }
        }
        let parent_term = total * total / n as f64;

        let mut best: Option<(f64, usize)> = None;
        for f in 0..self.n_features {
            let n1 = count_ones[f];
            let n0 = n - n1;
            if n1 < self.min_leaf || n0 < self.min_leaf {
                continue;
            }
            let s1 = sum_ones[f];
            let s0 = total - s1;
            let gain = s0 * s0 / n0 as f64 + s1 * s1 / n1 as f64 - parent_term;
            if gain > MIN_SPLIT_GAIN && best.map_or(true, |(g, _)| gain > g) {
                best = Some((gain, f));
            }
        }
        best.map(|(_, f)| f)
    }

    fn leaf_value(&self, residuals: &[f64], indices: &[usize]) -> f64 {
        let mut sum = 0.0f64;
        let mut denom = 0.0f64;
        for &i in indices {
            let r = residuals[i];
            sum += r;
            denom += r.abs() * (1.0 - r.abs());
        }
        let raw = self.newton_factor * sum / denom;
        if raw.is_nan() {
            0.0
        } else {
            raw.clamp(-LEAF_CLIP, LEAF_CLIP)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledSample;
    use crate::permissions::{PermissionName, PermissionVector};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn vec_of(bits: Vec<u8>) -> PermissionVector {
        PermissionVector::from_bits(bits).unwrap()
    }

    fn vocab(p: usize) -> PermissionVocabulary {
        PermissionVocabulary::new(
            (0..p)
                .map(|i| PermissionName::new(format!("android.permission.P{i:03}")).unwrap())
                .collect(),
        )
        .unwrap()
    }

    /// Two families, each recognizable from one exclusive permission.
    fn separable_dataset() -> Dataset {
        let vocab = vocab(4);
        let mut samples = Vec::new();
        for i in 0..12 {
            samples.push(LabeledSample {
                id: format!("a{i}"),
                label: FamilyLabel::known("alpha"),
                vector: vec_of(vec![1, 0, (i % 2) as u8, 0]),
            });
            samples.push(LabeledSample {
                id: format!("b{i}"),
                label: FamilyLabel::known("beta"),
                vector: vec_of(vec![0, 1, 0, (i % 3 == 0) as u8]),
            });
        }
        Dataset::new(samples, vocab).unwrap()
    }

    /// Hand model from the worked examples: class 0 pays +1 when f0 is set
    /// and -1 otherwise; class 1 always pays -1.
    fn hand_model() -> GBMModel {
        let vocab = vocab(2);
        let fingerprint = vocab.fingerprint();
        GBMModel {
            config: GBMConfig {
                rounds: 1,
                max_depth: 1,
                learning_rate: 1.0,
                min_leaf: 1,
                seed: 0,
            },
            classes: vec!["alpha".into(), "beta".into()],
            base_scores: vec![0.0, 0.0],
            vocab,
            vocab_fingerprint: fingerprint,
            trees: vec![
                DecisionTree {
                    class_index: 0,
                    nodes: vec![
                        TreeNode::Split {
                            feature: 0,
                            zero: 1,
                            one: 2,
                        },
                        TreeNode::Leaf { value: -1.0 },
                        TreeNode::Leaf { value: 1.0 },
                    ],
                },
                DecisionTree {
                    class_index: 1,
                    nodes: vec![TreeNode::Leaf { value: -1.0 }],
                },
            ],
            train_deviance: Vec::new(),
        }
    }

    #[test]
    fn separable_families_reach_full_training_accuracy() {
        let data = separable_dataset();
        let cfg = GBMConfig {
            rounds: 5,
            ..GBMConfig::default()
        };
        let model = train(&data, &cfg).unwrap();
        let correct = data
            .samples()
            .iter()
            .filter(|s| model.predict_closed(&s.vector).unwrap() == s.label)
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn zero_rounds_predicts_from_base_scores() {
        let data = separable_dataset();
        let cfg = GBMConfig {
            rounds: 0,
            ..GBMConfig::default()
        };
        let model = train(&data, &cfg).unwrap();
        assert!(model.trees.is_empty());
        let z = model.decision_values(&vec_of(vec![1, 1, 0, 0])).unwrap();
        assert_eq!(z.values(), &[0.0, 0.0]);
        // Uniform argmax resolves to the lexicographically first class.
        assert_eq!(
            model.predict_closed(&vec_of(vec![1, 1, 0, 0])).unwrap(),
            FamilyLabel::known("alpha")
        );
    }

    #[test]
    fn base_scores_pass_through_without_trees() {
        let mut model = hand_model();
        model.trees.clear();
        model.config.rounds = 0;
        model.base_scores = vec![0.3, -0.3];
        let z = model.decision_values(&vec_of(vec![0, 0])).unwrap();
        assert_eq!(z.values(), &[0.3, -0.3]);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable_dataset();
        let cfg = GBMConfig {
            rounds: 10,
            ..GBMConfig::default()
        };
        let a = serde_json::to_string(&train(&data, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&train(&data, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_tree_walk() {
        let model = hand_model();
        let z = model.decision_values(&vec_of(vec![1, 0])).unwrap();
        assert_eq!(z.values(), &[1.0, -1.0]);
        assert_eq!(
            model.predict_closed(&vec_of(vec![1, 0])).unwrap(),
            FamilyLabel::known("alpha")
        );
        let z = model.decision_values(&vec_of(vec![0, 0])).unwrap();
        assert_eq!(z.values(), &[-1.0, -1.0]);
    }

    #[test]
    fn duplicated_trees_with_halved_rate_leave_logits_unchanged() {
        let data = separable_dataset();
        let cfg = GBMConfig {
            rounds: 8,
            ..GBMConfig::default()
        };
        let model = train(&data, &cfg).unwrap();
        let mut doubled = model.clone();
        doubled.config.learning_rate /= 2.0;
        doubled.config.rounds *= 2;
        let dup: Vec<DecisionTree> = model
            .trees
            .iter()
            .flat_map(|t| [t.clone(), t.clone()])
            .collect();
        doubled.trees = dup;
        for sample in data.samples() {
            let a = model.decision_values(&sample.vector).unwrap();
            let b = doubled.decision_values(&sample.vector).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);

        let p = softmax(&[1.0, 2.0, 3.0]);
        let expected = [0.09003057, 0.24472847, 0.66524096];
        for (got, want) in p.iter().zip(expected) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }

        for c in [-7.5, 0.0, 3.25] {
            let p = softmax(&[c, c, c]);
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn deviance_non_increasing() {
        let data = separable_dataset();
        let cfg = GBMConfig {
            rounds: 30,
            ..GBMConfig::default()
        };
        let model = train(&data, &cfg).unwrap();
        assert_eq!(model.train_deviance.len(), 31);
        for pair in model.train_deviance.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn depth_and_visit_bounds() {
        let data = separable_dataset();
        let cfg = GBMConfig {
            rounds: 12,
            max_depth: 3,
            ..GBMConfig::default()
        };
        let model = train(&data, &cfg).unwrap();
        for tree in &model.trees {
            assert!(tree.depth() <= 3);
        }
        for sample in data.samples() {
            let visits: usize = model
                .trees
                .iter()
                .map(|t| t.route_visits(&sample.vector))
                .sum();
            assert!(visits <= model.trees.len() * cfg.max_depth);
        }
    }

    #[test]
    fn serialization_round_trip_preserves_decision_values() {
        let data = separable_dataset();
        let model = train(
            &data,
            &GBMConfig {
                rounds: 15,
                ..GBMConfig::default()
            },
        )
        .unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let restored: GBMModel = serde_json::from_str(&json).unwrap();
        restored.validate().unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let bits: Vec<u8> = (0..4).map(|_| rng.gen_range(0..=1)).collect();
            let p = vec_of(bits);
            let a = model.decision_values(&p).unwrap();
            let b = restored.decision_values(&p).unwrap();
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn rejects_single_class_and_bad_labels() {
        let vocab = vocab(2);
        let one_class = Dataset::new(
            vec![
                LabeledSample {
                    id: "a".into(),
                    label: FamilyLabel::known("alpha"),
                    vector: vec_of(vec![1, 0]),
                },
                LabeledSample {
                    id: "b".into(),
                    label: FamilyLabel::known("alpha"),
                    vector: vec_of(vec![0, 1]),
                },
            ],
            vocab.clone(),
        )
        .unwrap();
        assert!(matches!(
            train(&one_class, &GBMConfig::default()),
            Err(Error::NotEnoughClasses { .. })
        ));

        let with_others = Dataset::new(
            vec![
                LabeledSample {
                    id: "a".into(),
                    label: FamilyLabel::known("alpha"),
                    vector: vec_of(vec![1, 0]),
                },
                LabeledSample {
                    id: "o".into(),
                    label: FamilyLabel::known(OTHERS_FAMILY),
                    vector: vec_of(vec![0, 1]),
                },
            ],
            vocab,
        )
        .unwrap();
        assert!(matches!(
            train(&with_others, &GBMConfig::default()),
            Err(Error::InvalidTrainingLabel(_))
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = hand_model();
        assert!(matches!(
            model.decision_values(&vec_of(vec![1, 0, 1])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn softmax_preserves_ranking(values in proptest::collection::vec(-20.0f64..20.0, 2..10)) {
            let probs = softmax(&values);
            let logits = LogitVector::new(values.clone());
            prop_assert_eq!(LogitVector::new(probs.clone()).argmax(), logits.argmax());
            let sum: f64 = probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn argmax_matches_softmax_argmax_on_random_vectors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let dim = rng.gen_range(2..=16);
            let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let logits = LogitVector::new(z.clone());
            let probs = LogitVector::new(softmax(&z));
            assert_eq!(logits.argmax(), probs.argmax());
        }
    }
}
