//! Representation-quality metrics: uniformity and its per-client
//! decomposition, effective rank, alignment, inter-client geometry, and
//! linear probing.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{augment_pair, stratified_subset, AugmentConfig, ClientPartition, Dataset};
use crate::losses::{alignment_loss, uniformity_loss};
use crate::model::ModelBundle;
use crate::numerics::matrix::{dot, squared_distance};
use crate::numerics::{l2_normalize_rows, singular_values, softmax_row, Matrix, Rng, NORMALIZE_EPS};
use crate::{Error, Result};

/// Tolerance on row norms accepted by [`EmbeddingSet::new`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// `−L_uniform` (higher is more uniform).
pub fn uniformity_metric(z: &Matrix, t: f64) -> Result<f64> {
    Ok(-uniformity_loss(z, t)?.value)
}

/// Unit-norm embeddings grouped by client.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    blocks: Vec<(usize, Matrix)>,
}

impl EmbeddingSet {
    /// Validates equal widths and unit rows (zero rows from a degenerate
    /// normalization are rejected too).
    pub fn new(blocks: Vec<(usize, Matrix)>) -> Result<Self> {
        if let Some((_, first)) = blocks.first() {
            let d = first.cols();
            for (id, m) in &blocks {
                if m.cols() != d {
                    return Err(Error::shape("EmbeddingSet", first.shape(), m.shape()));
                }
                if let Some(n) = m.row_norms().into_iter().find(|n| (n - 1.0).abs() > UNIT_NORM_TOLERANCE) {
                    return Err(Error::Precondition(alloc::format!(
                        "client {id} has a row of norm {n}, expected unit rows"
                    )));
                }
            }
        }
        Ok(EmbeddingSet { blocks })
    }

    /// Normalizes each block's rows, then validates.
    pub fn from_unnormalized(blocks: Vec<(usize, Matrix)>) -> Result<Self> {
        EmbeddingSet::new(
            blocks
                .into_iter()
                .map(|(id, m)| (id, l2_normalize_rows(&m, NORMALIZE_EPS)))
                .collect(),
        )
    }

    pub fn blocks(&self) -> &[(usize, Matrix)] {
        &self.blocks
    }

    pub fn total_rows(&self) -> usize {
        self.blocks.iter().map(|(_, m)| m.rows()).sum()
    }

    /// All rows stacked in block order.
    pub fn pooled(&self) -> Matrix {
        let d = self.blocks.first().map_or(0, |(_, m)| m.cols());
        let mut data = Vec::with_capacity(self.total_rows() * d);
        for (_, m) in &self.blocks {
            data.extend_from_slice(m.as_slice());
        }
        Matrix::from_vec(self.total_rows(), d, data).expect("blocks share width")
    }
}

/// Mean Gaussian potential over the within-client pairs of one client.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IntraTerm {
    pub client: usize,
    pub pairs: usize,
    pub potential: f64,
}

/// Mean Gaussian potential over the cross pairs of two clients.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InterTerm {
    pub client_a: usize,
    pub client_b: usize,
    pub pairs: usize,
    pub potential: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UniformityDecomposition {
    /// `L_uniform` rebuilt from the pair-count-weighted block potentials.
    pub global: f64,
    /// Clients with a single row have no within-client pairs and are omitted.
    pub intra: Vec<IntraTerm>,
    pub inter: Vec<InterTerm>,
}

fn mean_potential<'a>(pairs: impl Iterator<Item = (&'a [f64], &'a [f64])>, t: f64) -> (usize, f64) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for (a, b) in pairs {
        sum += libm::exp(-t * squared_distance(a, b));
        count += 1;
    }
    (count, if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Splits the pooled uniformity into within-client and cross-client blocks.
///
/// Each block is reported as its mean potential; the global value weights
/// every block by its pair count, so it equals the pooled computation over
/// all distinct pairs.
pub fn uniformity_decomposition(e: &EmbeddingSet, t: f64) -> Result<UniformityDecomposition> {
    if e.blocks.is_empty() || e.total_rows() < 2 {
        return Err(Error::Precondition("decomposition needs at least one client and two rows".into()));
    }
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    let mut weighted = 0.0;
    for (a, (id_a, ma)) in e.blocks.iter().enumerate() {
        let n = ma.rows();
        let (pairs, potential) = mean_potential(
            (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (ma.row(i), ma.row(j)))),
            t,
        );
        if pairs > 0 {
            weighted += pairs as f64 * potential;
            intra.push(IntraTerm { client: *id_a, pairs, potential });
        }
        for (id_b, mb) in &e.blocks[a + 1..] {
            let (pairs, potential) = mean_potential(
                (0..n).flat_map(|i| (0..mb.rows()).map(move |j| (ma.row(i), mb.row(j)))),
                t,
            );
            if pairs > 0 {
                weighted += pairs as f64 * potential;
                inter.push(InterTerm { client_a: *id_a, client_b: *id_b, pairs, potential });
            }
        }
    }
    let total = e.total_rows();
    let total_pairs = (total * (total - 1) / 2) as f64;
    Ok(UniformityDecomposition {
        global: libm::log(weighted / total_pairs),
        intra,
        inter,
    })
}

/// `exp` of the Shannon entropy of the normalized singular values.
pub fn effective_rank(m: &Matrix) -> Result<f64> {
    let sv = singular_values(m)?;
    let sum: f64 = sv.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::Degenerate("effective rank of an all-zero matrix".into()));
    }
    let entropy: f64 = sv
        .iter()
        .map(|&s| s / sum)
        .filter(|&p| p > 0.0)
        .map(|p| -p * libm::log(p))
        .sum();
    Ok(libm::exp(entropy))
}

/// Mean of `zᵢ·zⱼ` over all row pairs taken from different clients.
pub fn mean_inter_client_dot(e: &EmbeddingSet) -> Result<f64> {
    if e.blocks.len() < 2 {
        return Err(Error::Precondition(alloc::format!(
            "inter-client dot product needs at least 2 clients, got {}",
            e.blocks.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, (_, ma)) in e.blocks.iter().enumerate() {
        // Σᵢ Σⱼ aᵢ·bⱼ = (Σᵢ aᵢ)·(Σⱼ bⱼ).
        let sa = column_sums(ma);
        for (_, mb) in &e.blocks[a + 1..] {
            sum += dot(&sa, &column_sums(mb));
            count += ma.rows() * mb.rows();
        }
    }
    if count == 0 {
        return Err(Error::Precondition("no cross-client pairs".into()));
    }
    Ok(sum / count as f64)
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for r in m.row_iter() {
        for (a, b) in s.iter_mut().zip(r) {
            *a += b;
        }
    }
    s
}

/// Full-batch gradient descent settings for the softmax-regression probe.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 500,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression on frozen features, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    weight: Matrix,
    bias: Vec<f64>,
    /// Classes seen during training; prediction never leaves this set.
    present: Vec<bool>,
    /// Regularized training loss before each epoch's update, then after the last.
    pub loss_history: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(features: &Matrix, labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Length { op: "LinearProbe::fit", expected: features.rows(), actual: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::param(alloc::format!("label {bad} out of range for {num_classes} classes")));
        }
        let mut present = vec![false; num_classes];
        labels.iter().for_each(|&c| present[c] = true);
        if present.iter().filter(|&&p| p).count() < 2 {
            return Err(Error::Precondition("linear probe needs at least 2 classes in training labels".into()));
        }
        let n = features.rows() as f64;
        let mut probe = LinearProbe {
            weight: Matrix::zeros(num_classes, features.cols()),
            bias: vec![0.0; num_classes],
            present,
            loss_history: Vec::with_capacity(cfg.epochs + 1),
        };
        for _ in 0..cfg.epochs {
            let (loss, gw, gb) = probe.loss_and_grad(features, labels, cfg.l2, n)?;
            probe.loss_history.push(loss);
            probe.weight.add_scaled(-cfg.learning_rate, &gw)?;
            for (b, g) in probe.bias.iter_mut().zip(&gb) {
                *b -= cfg.learning_rate * g;
            }
        }
        let (loss, _, _) = probe.loss_and_grad(features, labels, cfg.l2, n)?;
        probe.loss_history.push(loss);
        Ok(probe)
    }

    fn loss_and_grad(&self, x: &Matrix, labels: &[usize], l2: f64, n: f64) -> Result<(f64, Matrix, Vec<f64>)> {
        let logits = self.logits(x)?;
        let mut delta = Matrix::zeros(logits.rows(), logits.cols());
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let p = softmax_row(logits.row(i));
            loss -= libm::log(p[y].max(1e-300));
            let row = delta.row_mut(i);
            row.copy_from_slice(&p);
            row[y] -= 1.0;
        }
        let mut gw = delta.transposed_matmul(x)?.scale(1.0 / n);
        gw.add_scaled(l2, &self.weight)?;
        let gb = column_sums(&delta).into_iter().map(|v| v / n).collect();
        let reg = 0.5 * l2 * dot(self.weight.as_slice(), self.weight.as_slice());
        Ok((loss / n + reg, gw, gb))
    }

    fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut l = x.matmul_transposed(&self.weight)?;
        for i in 0..l.rows() {
            for (v, b) in l.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(l)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .row_iter()
            .map(|r| {
                (0..r.len())
                    .filter(|&c| self.present[c])
                    .max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a)))
                    .expect("at least two classes present")
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Precondition("accuracy on an empty test set".into()));
        }
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }
}

/// Trains a probe on `train` and returns its accuracy on `test`. A class
/// that appears only in the test labels is never predicted.
pub fn linear_probe(
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train.cols() != test.cols() {
        return Err(Error::shape("linear_probe", train.shape(), test.shape()));
    }
    let num_classes = train_labels.iter().chain(test_labels).max().map_or(0, |&m| m + 1);
    LinearProbe::fit(train, train_labels, num_classes, cfg)?.accuracy(test, test_labels)
}

/// Which model output the metrics read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MetricTarget {
    /// Encoder output `h`.
    #[default]
    Representation,
    /// Projector output `z`.
    Embedding,
}

/// Unit-normalized `h` or `z` for every row of `x`.
pub fn target_features(model: &ModelBundle, x: &Matrix, target: MetricTarget) -> Result<Matrix> {
    let h = model.encode(x)?;
    let out = match target {
        MetricTarget::Representation => h,
        MetricTarget::Embedding => model.project(&h)?,
    };
    Ok(l2_normalize_rows(&out, NORMALIZE_EPS))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub target: MetricTarget,
    pub temperature: f64,
    pub probe: ProbeConfig,
    /// Labeled-subset fractions for the reduced-label probes.
    pub probe_fractions: Vec<f64>,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            target: MetricTarget::Representation,
            temperature: 2.0,
            probe: ProbeConfig::default(),
            probe_fractions: vec![0.01, 0.1],
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SubsetProbe {
    pub fraction: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub target: MetricTarget,
    pub neg_uniformity: f64,
    pub intra_terms: Vec<IntraTerm>,
    pub inter_terms: Vec<InterTerm>,
    pub effective_rank: f64,
    pub alignment: f64,
    /// `None` with fewer than two clients.
    pub mean_inter_client_dot: Option<f64>,
    pub linear_probe_accuracy: f64,
    pub subset_probe_accuracy: Vec<SubsetProbe>,
}

/// Evaluates `model` on the (clean) training data grouped by `partition`,
/// probing on `train` and scoring on `test`.
pub fn evaluate_model(
    model: &ModelBundle,
    train: &Dataset,
    partition: &ClientPartition,
    test: &Dataset,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let feats = target_features(model, &train.features, cfg.target)?;
    let blocks = partition
        .assignments
        .iter()
        .enumerate()
        .map(|(k, idx)| (k, feats.select_rows(idx)))
        .collect();
    let set = EmbeddingSet::from_unnormalized(blocks)?;
    let decomposition = uniformity_decomposition(&set, cfg.temperature)?;
    let neg_uniformity = uniformity_metric(&feats, cfg.temperature)?;
    let effective_rank = effective_rank(&feats)?;

    let rng = Rng::new(cfg.seed);
    let (v1, v2) = augment_pair(&mut rng.fork(&[1]), &train.features, &cfg.augment)?;
    let alignment = alignment_loss(
        &target_features(model, &v1, cfg.target)?,
        &target_features(model, &v2, cfg.target)?,
    )?
    .0;

    let mean_dot = if set.blocks().len() >= 2 { Some(mean_inter_client_dot(&set)?) } else { None };

    let test_feats = target_features(model, &test.features, cfg.target)?;
    let linear_probe_accuracy = linear_probe(&feats, &train.labels, &test_feats, &test.labels, &cfg.probe)?;
    let mut subset_probe_accuracy = Vec::with_capacity(cfg.probe_fractions.len());
    for (i, &fraction) in cfg.probe_fractions.iter().enumerate() {
        let idx = stratified_subset(&mut rng.fork(&[2, i as u64]), &train.labels, fraction)?;
        let sub_labels: Vec<usize> = idx.iter().map(|&j| train.labels[j]).collect();
        let accuracy = linear_probe(&feats.select_rows(&idx), &sub_labels, &test_feats, &test.labels, &cfg.probe)?;
        subset_probe_accuracy.push(SubsetProbe { fraction, accuracy });
    }

    Ok(MetricsReport {
        target: cfg.target,
        neg_uniformity,
        intra_terms: decomposition.intra,
        inter_terms: decomposition.inter,
        effective_rank,
        alignment,
        mean_inter_client_dot: mean_dot,
        linear_probe_accuracy,
        subset_probe_accuracy,
    })
}
