//! Synthetic datasets, class-wise Dirichlet partitioning across clients, and
//! two-view augmentation for vector inputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::{rng_gaussian, Matrix, Rng};
use crate::{Error, Result};

/// Feature matrix plus class ids. Labels only drive partitioning and probe
/// evaluation; the training losses never read them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Length {
                op: "Dataset::new",
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        Ok(Dataset { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// `max(label) + 1`, or 0 for an empty dataset.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Isotropic Gaussian clusters, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub centers: Matrix,
    pub within_std: f64,
}

impl GaussianMixture {
    /// Draws `num_classes` centers from `N(0, center_spread² I)`.
    pub fn new(rng: &mut Rng, num_classes: usize, input_dim: usize, center_spread: f64, within_std: f64) -> Result<Self> {
        if num_classes == 0 || input_dim == 0 {
            return Err(Error::param("mixture needs at least one class and one input dimension"));
        }
        if !(center_spread >= 0.0 && within_std >= 0.0) {
            return Err(Error::param("mixture spreads must be nonnegative"));
        }
        Ok(GaussianMixture {
            centers: rng_gaussian(rng, num_classes, input_dim, 0.0, center_spread),
            within_std,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    /// `per_class` samples of every class, class-major order.
    pub fn sample(&self, rng: &mut Rng, per_class: usize) -> Dataset {
        let (k, dim) = self.centers.shape();
        let mut features = Matrix::zeros(k * per_class, dim);
        let mut labels = Vec::with_capacity(k * per_class);
        for c in 0..k {
            for s in 0..per_class {
                let row = features.row_mut(c * per_class + s);
                for (v, &mu) in row.iter_mut().zip(self.centers.row(c)) {
                    *v = mu + self.within_std * rng.gaussian();
                }
                labels.push(c);
            }
        }
        Dataset { features, labels }
    }
}

pub fn generate_gaussian_mixture(
    rng: &mut Rng,
    num_classes: usize,
    samples_per_class: usize,
    input_dim: usize,
    center_spread: f64,
    within_std: f64,
) -> Result<Dataset> {
    if samples_per_class == 0 {
        return Err(Error::param("samples_per_class must be at least 1"));
    }
    let mixture = GaussianMixture::new(rng, num_classes, input_dim, center_spread, within_std)?;
    Ok(mixture.sample(rng, samples_per_class))
}

/// Sample indices owned by each client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientPartition {
    pub assignments: Vec<Vec<usize>>,
}

impl ClientPartition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    /// Checks the partition against a dataset of `n` samples: indices in
    /// range, pairwise disjoint, every client nonempty.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, client) in self.assignments.iter().enumerate() {
            if client.is_empty() {
                return Err(Error::param(alloc::format!("client {k} has no samples")));
            }
            for &i in client {
                if i >= n {
                    return Err(Error::param(alloc::format!("client {k}: index {i} out of range for {n} samples")));
                }
                if core::mem::replace(&mut seen[i], true) {
                    return Err(Error::param(alloc::format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }

    /// Per-client class counts.
    pub fn class_histograms(&self, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|client| {
                let mut h = vec![0; num_classes];
                for &i in client {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }
}

/// Shannon entropy (nats) of a count histogram.
pub fn label_entropy(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * libm::log(p)
        })
        .sum()
}

/// Integer counts summing to `total` that follow `proportions`: floors first,
/// then the leftover units go to the largest fractional parts, lower index
/// first on ties.
fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| libm::floor(e) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - libm::floor(exact[a]);
        let fb = exact[b] - libm::floor(exact[b]);
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Class-wise Dirichlet split: each class's indices are shuffled and cut
/// into `num_clients` pieces sized by a `Dir(alpha · 1)` draw. Clients left
/// empty then take one sample each from the currently largest client.
pub fn dirichlet_partition(rng: &mut Rng, labels: &[usize], num_clients: usize, alpha: f64) -> Result<ClientPartition> {
    if num_clients == 0 {
        return Err(Error::param("need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::param(alloc::format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    let n = labels.len();
    if num_clients > n {
        return Err(Error::param(alloc::format!("{num_clients} clients but only {n} samples")));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }

    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    let concentration = vec![alpha; num_clients];
    for mut idx in by_class.into_iter().filter(|v| !v.is_empty()) {
        rng.shuffle(&mut idx);
        let p = rng.dirichlet(&concentration)?;
        let counts = largest_remainder(&p, idx.len());
        let mut start = 0;
        for (client, &c) in assignments.iter_mut().zip(&counts) {
            client.extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }

    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let largest = (0..num_clients)
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = assignments[largest].pop().expect("largest client is nonempty");
        assignments[empty].push(moved);
    }
    for client in &mut assignments {
        client.sort_unstable();
    }
    Ok(ClientPartition { assignments })
}

/// Deterministic stratified pick of roughly `fraction` of each class (at
/// least one sample per present class). Returned indices are sorted.
pub fn stratified_subset(rng: &mut Rng, labels: &[usize], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(alloc::format!("subset fraction must be in (0, 1], got {fraction}")));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut out = Vec::new();
    for mut idx in by_class.into_iter().filter(|v| !v.is_empty()) {
        rng.shuffle(&mut idx);
        let take = (libm::ceil(fraction * idx.len() as f64) as usize).clamp(1, idx.len());
        out.extend_from_slice(&idx[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Two-view augmentation parameters for vector inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AugmentConfig {
    pub noise_stddev: f64,
    pub dropout_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_stddev: 0.1,
            dropout_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_stddev >= 0.0 && self.noise_stddev.is_finite()) {
            return Err(Error::param(alloc::format!("noise_stddev must be nonnegative, got {}", self.noise_stddev)));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::param(alloc::format!("dropout_prob must be in [0, 1), got {}", self.dropout_prob)));
        }
        Ok(())
    }

    fn view(&self, rng: &mut Rng, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for v in out.as_mut_slice() {
            if self.noise_stddev > 0.0 {
                *v += self.noise_stddev * rng.gaussian();
            }
            if self.dropout_prob > 0.0 && rng.uniform() < self.dropout_prob {
                *v = 0.0;
            }
        }
        out
    }
}

/// Two independent stochastic views of `x`: additive Gaussian noise, then
/// independent coordinate zeroing. The first view is drawn completely before
/// the second.
pub fn augment_pair(rng: &mut Rng, x: &Matrix, cfg: &AugmentConfig) -> Result<(Matrix, Matrix)> {
    cfg.validate()?;
    let a = cfg.view(rng, x);
    let b = cfg.view(rng, x);
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_counts_and_zero_spread() {
        let d = generate_gaussian_mixture(&mut Rng::new(1), 3, 5, 4, 2.0, 0.0).unwrap();
        assert_eq!(d.len(), 15);
        assert_eq!(d.num_classes(), 3);
        for c in 0..3 {
            let first = d.features.row(c * 5).to_vec();
            for s in 1..5 {
                assert_eq!(d.features.row(c * 5 + s), &first[..]);
            }
        }
    }

    #[test]
    fn well_separated_mixture_is_nearest_center_classifiable() {
        let mut rng = Rng::new(2);
        let mix = GaussianMixture::new(&mut rng, 4, 8, 10.0, 0.5).unwrap();
        let d = mix.sample(&mut rng, 100);
        let mut correct = 0;
        for i in 0..d.len() {
            let x = d.features.row(i);
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(mix.centers.row(a)).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f64 = x.iter().zip(mix.centers.row(b)).map(|(p, q)| (p - q).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += usize::from(best == d.labels[i]);
        }
        assert!(correct as f64 / d.len() as f64 > 0.99);
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = [0, 1, 2, 0, 1, 2];
        let p = dirichlet_partition(&mut Rng::new(3), &labels, 1, 0.5).unwrap();
        assert_eq!(p.assignments, vec![vec![0, 1, 2, 3, 4, 5]]);
    }

    #[test]
    fn partition_is_disjoint_cover() {
        let labels: Vec<usize> = (0..200).map(|i| i % 5).collect();
        for seed in 0..10 {
            let p = dirichlet_partition(&mut Rng::new(seed), &labels, 7, 0.1).unwrap();
            p.validate(labels.len()).unwrap();
            assert_eq!(p.total(), labels.len());
            let again = dirichlet_partition(&mut Rng::new(seed), &labels, 7, 0.1).unwrap();
            assert_eq!(p, again);
        }
    }

    #[test]
    fn partition_errors() {
        let labels = [0, 1];
        assert!(dirichlet_partition(&mut Rng::new(0), &labels, 3, 1.0).is_err());
        assert!(dirichlet_partition(&mut Rng::new(0), &labels, 0, 1.0).is_err());
        assert!(dirichlet_partition(&mut Rng::new(0), &labels, 1, 0.0).is_err());
    }

    #[test]
    fn empty_clients_are_repaired() {
        // Extreme skew with as many clients as samples.
        let labels = [0, 0, 0, 0, 0];
        for seed in 0..20 {
            let p = dirichlet_partition(&mut Rng::new(seed), &labels, 5, 0.01).unwrap();
            p.validate(5).unwrap();
            assert!(p.client_sizes().iter().all(|&s| s == 1));
        }
    }

    #[test]
    fn large_concentration_is_near_uniform() {
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let mut mean = [[0.0f64; 4]; 4];
        for seed in 0..20 {
            let p = dirichlet_partition(&mut Rng::new(seed), &labels, 4, 1000.0).unwrap();
            for (k, h) in p.class_histograms(&labels, 4).iter().enumerate() {
                for c in 0..4 {
                    mean[k][c] += h[c] as f64 / 20.0;
                }
            }
        }
        for row in mean {
            for v in row {
                assert!((v - 25.0).abs() < 2.5, "{v}");
            }
        }
    }

    #[test]
    fn heterogeneity_grows_as_concentration_shrinks() {
        let labels: Vec<usize> = (0..500).map(|i| i % 10).collect();
        let mean_entropy = |alpha: f64| {
            let mut total = 0.0;
            for seed in 0..10 {
                let p = dirichlet_partition(&mut Rng::new(seed), &labels, 5, alpha).unwrap();
                let h = p.class_histograms(&labels, 10);
                total += h.iter().map(|c| label_entropy(c)).sum::<f64>() / 5.0;
            }
            total / 10.0
        };
        assert!(mean_entropy(0.05) < mean_entropy(100.0));
    }

    #[test]
    fn largest_remainder_sums_exactly() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        let c = largest_remainder(&[0.333, 0.333, 0.334], 7);
        assert_eq!(c.iter().sum::<usize>(), 7);
    }

    #[test]
    fn identity_augmentation() {
        let x = rng_gaussian(&mut Rng::new(4), 3, 4, 0.0, 1.0);
        let cfg = AugmentConfig { noise_stddev: 0.0, dropout_prob: 0.0 };
        let (a, b) = augment_pair(&mut Rng::new(5), &x, &cfg).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn noise_statistics() {
        let x = Matrix::zeros(100, 100);
        let cfg = AugmentConfig { noise_stddev: 0.3, dropout_prob: 0.0 };
        let (a, b) = augment_pair(&mut Rng::new(6), &x, &cfg).unwrap();
        assert_ne!(a, b);
        let n = 10_000.0;
        let mean = a.as_slice().iter().sum::<f64>() / n;
        let sd = (a.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.01);
        assert!((sd - 0.3).abs() < 0.01);
        assert_eq!(x, Matrix::zeros(100, 100));
    }

    #[test]
    fn dropout_rate() {
        let x = Matrix::from_vec(1, 20_000, vec![1.0; 20_000]).unwrap();
        let cfg = AugmentConfig { noise_stddev: 0.0, dropout_prob: 0.25 };
        let (a, _) = augment_pair(&mut Rng::new(7), &x, &cfg).unwrap();
        let zeros = a.as_slice().iter().filter(|&&v| v == 0.0).count() as f64 / 20_000.0;
        assert!((zeros - 0.25).abs() < 0.02);
        assert!(augment_pair(&mut Rng::new(7), &x, &AugmentConfig { noise_stddev: 0.0, dropout_prob: 1.0 }).is_err());
    }

    #[test]
    fn stratified_subset_keeps_every_class() {
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let s = stratified_subset(&mut Rng::new(8), &labels, 0.01).unwrap();
        assert_eq!(s.len(), 4);
        let s = stratified_subset(&mut Rng::new(8), &labels, 0.1).unwrap();
        assert_eq!(s.len(), 12);
        assert!(stratified_subset(&mut Rng::new(8), &labels, 0.0).is_err());
    }
}
