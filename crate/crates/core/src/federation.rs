//! Federated training: scaled-dimension assignment, client sampling, local
//! SGD on the combined objective, and data-size-weighted averaging.
//!
//! Every random stream is derived from `FedConfig::seed` with
//! [`derive_seed`]:
//!
//! | stream                     | labels              |
//! |----------------------------|---------------------|
//! | model initialization       | `[1]`               |
//! | scaled-dimension sets      | `[2]`               |
//! | client sampling, round `r` | `[3, r]`            |
//! | client `k` base seed       | `[5, k]`            |
//!
//! A client's stream for round `r` is `derive_seed(client_seed, [r])`, so the
//! result does not depend on the order (or thread) in which clients run.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{augment_pair, AugmentConfig, ClientPartition, Dataset};
use crate::losses::{total_loss, LossReport, LossWeights, ScalingVector, Separation};
use crate::metrics::{effective_rank, mean_inter_client_dot, uniformity_metric, EmbeddingSet};
use crate::model::{Architecture, ModelBundle};
use crate::numerics::{derive_seed, l2_normalize_rows, Matrix, Rng, NORMALIZE_EPS};
use crate::{Error, Result};

pub use crate::losses::hsd_mask;

const STREAM_INIT: u64 = 1;
const STREAM_DIMS: u64 = 2;
const STREAM_SAMPLE: u64 = 3;
const STREAM_CLIENT: u64 = 5;

/// Per-client cap on samples used for the per-round diagnostics.
pub const ROUND_METRIC_SAMPLES_PER_CLIENT: usize = 256;

/// Which terms of the local objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mode {
    /// Alignment, uniformity, DSR and distillation.
    #[default]
    #[cfg_attr(feature = "serde", serde(alias = "SSD"))]
    Ssd,
    /// Alignment and uniformity only (`γ = δ = 0`).
    #[cfg_attr(feature = "serde", serde(alias = "AlignUniform"))]
    AlignUniform,
    /// No distillation (`δ = 0`).
    #[cfg_attr(feature = "serde", serde(alias = "DSR_only"))]
    DsrOnly,
    /// No DSR (`γ = 0`).
    #[cfg_attr(feature = "serde", serde(alias = "PD_only"))]
    PdOnly,
    /// Hard separation: embeddings masked to the client's own dimensions,
    /// distillation kept, DSR dropped.
    #[cfg_attr(feature = "serde", serde(alias = "HSD"))]
    Hsd,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Ssd, Mode::AlignUniform, Mode::DsrOnly, Mode::PdOnly, Mode::Hsd];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ssd => "ssd",
            Mode::AlignUniform => "align_uniform",
            Mode::DsrOnly => "dsr_only",
            Mode::PdOnly => "pd_only",
            Mode::Hsd => "hsd",
        }
    }

    /// Case-insensitive; accepts `align_uniform`, `AlignUniform`, `DSR_only`, ...
    pub fn parse(s: &str) -> Option<Mode> {
        let key: alloc::string::String = s.chars().filter(|c| *c != '_' && *c != '-').map(|c| c.to_ascii_lowercase()).collect();
        match key.as_str() {
            "ssd" => Some(Mode::Ssd),
            "alignuniform" | "fedalignuniform" => Some(Mode::AlignUniform),
            "dsronly" => Some(Mode::DsrOnly),
            "pdonly" => Some(Mode::PdOnly),
            "hsd" => Some(Mode::Hsd),
            _ => None,
        }
    }

    pub fn effective_weights(self, w: &LossWeights) -> LossWeights {
        let mut w = *w;
        match self {
            Mode::Ssd => {}
            Mode::AlignUniform => {
                w.gamma = 0.0;
                w.delta = 0.0;
            }
            Mode::DsrOnly => w.delta = 0.0,
            Mode::PdOnly | Mode::Hsd => w.gamma = 0.0,
        }
        w
    }

    pub fn separation(self) -> Separation {
        match self {
            Mode::Hsd => Separation::Hard,
            _ => Separation::Soft,
        }
    }
}

/// Hyperparameters of a federated run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub participation_rate: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    /// Scale factor applied to each client's own dimensions.
    pub alpha_scale: f64,
    pub mode: Mode,
    pub seed: u64,
    pub architecture: Architecture,
    pub augment: AugmentConfig,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_clients: 10,
            rounds: 20,
            local_epochs: 2,
            participation_rate: 1.0,
            batch_size: 64,
            learning_rate: 0.1,
            weights: LossWeights::default(),
            alpha_scale: 10.0,
            mode: Mode::Ssd,
            seed: 0,
            architecture: Architecture::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::param("num_clients must be at least 1"));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::param(alloc::format!(
                "participation_rate must be in (0, 1], got {}",
                self.participation_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(alloc::format!("learning_rate must be nonnegative, got {}", self.learning_rate)));
        }
        if !(self.alpha_scale > 0.0 && self.alpha_scale.is_finite()) {
            return Err(Error::param(alloc::format!("alpha_scale must be positive, got {}", self.alpha_scale)));
        }
        if self.architecture.embed_dim < self.num_clients {
            return Err(Error::param(alloc::format!(
                "embedding width {} is smaller than the client count {}",
                self.architecture.embed_dim, self.num_clients
            )));
        }
        self.weights.validate()?;
        self.augment.validate()?;
        self.architecture.validate()
    }

    /// `⌈participation_rate · K⌉`, clamped to `[1, K]`.
    pub fn clients_per_round(&self) -> usize {
        let m = libm::ceil(self.participation_rate * self.num_clients as f64 - 1e-9) as usize;
        m.clamp(1, self.num_clients)
    }
}

/// Fixed per-client state held by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub scaling: ScalingVector,
    pub seed: u64,
}

impl ClientState {
    fn round_rng(&self, round: usize) -> Rng {
        Rng::new(derive_seed(self.seed, &[round as u64]))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClientLoss {
    pub client: usize,
    pub steps: usize,
    /// Mean over the client's local steps.
    pub loss: LossReport,
}

/// Diagnostics of the aggregated model after one round.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundMetrics {
    pub neg_uniformity_representation: f64,
    pub neg_uniformity_embedding: f64,
    pub effective_rank_representation: f64,
    pub effective_rank_embedding: f64,
    pub inter_client_dot_representation: Option<f64>,
    pub inter_client_dot_embedding: Option<f64>,
    pub mean_representation_norm: f64,
    pub mean_embedding_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundLog {
    pub round: usize,
    pub participants: Vec<usize>,
    pub client_losses: Vec<ClientLoss>,
    pub metrics: RoundMetrics,
}

/// Random permutation of `[0, d)` cut into `K` chunks of `⌊d/K⌋`; the
/// remaining `d mod K` dimensions are left to nobody.
pub fn assign_scaled_dimensions(d: usize, num_clients: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if num_clients == 0 {
        return Err(Error::param("need at least one client"));
    }
    if num_clients > d {
        return Err(Error::param(alloc::format!(
            "cannot give {num_clients} clients disjoint nonempty subsets of {d} dimensions"
        )));
    }
    let mut perm: Vec<usize> = (0..d).collect();
    rng.shuffle(&mut perm);
    let size = d / num_clients;
    Ok(perm
        .chunks_exact(size)
        .take(num_clients)
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_unstable();
            v
        })
        .collect())
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub model: ModelBundle,
    pub samples: usize,
    pub loss: ClientLoss,
}

/// `E` epochs of minibatch SGD on a copy of `global`, over the client's
/// shuffled samples (batch size clamped to the client size; the last batch of
/// an epoch may be smaller).
pub fn local_train(
    client: &ClientState,
    global: &ModelBundle,
    data: &Dataset,
    cfg: &FedConfig,
    round: usize,
) -> Result<LocalUpdate> {
    if client.indices.is_empty() {
        return Err(Error::Precondition(alloc::format!("client {} has no samples", client.client_id)));
    }
    let weights = cfg.mode.effective_weights(&cfg.weights);
    let separation = cfg.mode.separation();
    let batch = cfg.batch_size.min(client.indices.len());
    let mut rng = client.round_rng(round);
    let mut model = global.clone();
    let mut reports = Vec::new();
    let mut order = client.indices.clone();
    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let x = data.features.select_rows(chunk);
            let (x1, x2) = augment_pair(&mut rng, &x, &cfg.augment)?;
            let (report, grad) = total_loss(&x1, &x2, &model, &client.scaling, &weights, separation)?;
            model.add_scaled(-cfg.learning_rate, &grad)?;
            reports.push(report);
        }
    }
    if !model.flatten().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("local_train"));
    }
    Ok(LocalUpdate {
        model,
        samples: client.indices.len(),
        loss: ClientLoss {
            client: client.client_id,
            steps: reports.len(),
            loss: LossReport::mean(&reports),
        },
    })
}

/// Parameter-wise mean weighted by `n_k / Σ n_i`.
pub fn fedavg_aggregate(models: &[ModelBundle], sample_counts: &[usize]) -> Result<ModelBundle> {
    let first = models.first().ok_or_else(|| Error::param("nothing to aggregate"))?;
    if models.len() != sample_counts.len() {
        return Err(Error::Length { op: "fedavg_aggregate", expected: models.len(), actual: sample_counts.len() });
    }
    if sample_counts.contains(&0) {
        return Err(Error::param("sample counts must be positive"));
    }
    if let Some(bad) = models.iter().find(|m| !m.same_architecture(first)) {
        return Err(Error::Length {
            op: "fedavg_aggregate architecture",
            expected: first.param_count(),
            actual: bad.param_count(),
        });
    }
    let total: usize = sample_counts.iter().sum();
    let mut acc = vec![0.0; first.param_count()];
    for (m, &n) in models.iter().zip(sample_counts) {
        let w = n as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(m.flatten()) {
            *a += w * v;
        }
    }
    first.unflatten(&acc)
}

/// Runs the clients of one round; implementations may do so concurrently.
pub trait ClientExecutor {
    fn execute<F>(&self, count: usize, task: F) -> Vec<Result<LocalUpdate>>
    where
        F: Fn(usize) -> Result<LocalUpdate> + Sync;
}

/// Runs clients one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ClientExecutor for Sequential {
    fn execute<F>(&self, count: usize, task: F) -> Vec<Result<LocalUpdate>>
    where
        F: Fn(usize) -> Result<LocalUpdate> + Sync,
    {
        (0..count).map(task).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: ModelBundle,
    pub logs: Vec<RoundLog>,
    pub clients: Vec<ClientState>,
}

/// Server-side setup: initial model and client states.
pub fn initialize(cfg: &FedConfig, data: &Dataset, partition: &ClientPartition) -> Result<(ModelBundle, Vec<ClientState>)> {
    cfg.validate()?;
    if partition.num_clients() != cfg.num_clients {
        return Err(Error::param(alloc::format!(
            "partition has {} clients, config expects {}",
            partition.num_clients(),
            cfg.num_clients
        )));
    }
    partition.validate(data.len())?;
    if data.input_dim() != cfg.architecture.input_dim {
        return Err(Error::shape(
            "dataset vs architecture",
            (data.len(), data.input_dim()),
            (data.len(), cfg.architecture.input_dim),
        ));
    }
    let root = Rng::new(cfg.seed);
    let model = ModelBundle::init(&mut root.fork(&[STREAM_INIT]), &cfg.architecture)?;
    let d = cfg.architecture.embed_dim;
    let dims = assign_scaled_dimensions(d, cfg.num_clients, &mut root.fork(&[STREAM_DIMS]))?;
    let clients = partition
        .assignments
        .iter()
        .zip(dims)
        .enumerate()
        .map(|(k, (idx, dims))| {
            Ok(ClientState {
                client_id: k,
                indices: idx.clone(),
                scaling: ScalingVector::new(d, &dims, cfg.alpha_scale)?,
                seed: derive_seed(cfg.seed, &[STREAM_CLIENT, k as u64]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((model, clients))
}

/// Clients taking part in `round`, ascending.
pub fn sample_clients(cfg: &FedConfig, round: usize) -> Vec<usize> {
    let mut rng = Rng::new(derive_seed(cfg.seed, &[STREAM_SAMPLE, round as u64]));
    let mut chosen = rng.sample_without_replacement(cfg.num_clients, cfg.clients_per_round());
    chosen.sort_unstable();
    chosen
}

/// Diagnostics on up to [`ROUND_METRIC_SAMPLES_PER_CLIENT`] clean samples
/// per client.
pub fn round_metrics(model: &ModelBundle, data: &Dataset, clients: &[ClientState], temperature: f64) -> Result<RoundMetrics> {
    let mut h_blocks = Vec::with_capacity(clients.len());
    let mut z_blocks = Vec::with_capacity(clients.len());
    let mut h_norm = 0.0;
    let mut z_norm = 0.0;
    let mut rows = 0usize;
    for c in clients {
        let take = c.indices.len().min(ROUND_METRIC_SAMPLES_PER_CLIENT);
        let x = data.features.select_rows(&c.indices[..take]);
        let h = model.encode(&x)?;
        let z = model.project(&h)?;
        h_norm += h.row_norms().iter().sum::<f64>();
        z_norm += z.row_norms().iter().sum::<f64>();
        rows += take;
        h_blocks.push((c.client_id, l2_normalize_rows(&h, NORMALIZE_EPS)));
        z_blocks.push((c.client_id, l2_normalize_rows(&z, NORMALIZE_EPS)));
    }
    let pooled = |blocks: &[(usize, Matrix)]| -> Matrix {
        blocks
            .iter()
            .skip(1)
            .fold(blocks[0].1.clone(), |acc, (_, m)| acc.vstack(m).expect("same width"))
    };
    let (hp, zp) = (pooled(&h_blocks), pooled(&z_blocks));
    let rank = |m: &Matrix| effective_rank(m).unwrap_or(0.0);
    let uniformity = |m: &Matrix| if m.rows() >= 2 { uniformity_metric(m, temperature) } else { Ok(0.0) };
    let dot = |blocks: Vec<(usize, Matrix)>| -> Result<Option<f64>> {
        if blocks.len() < 2 {
            return Ok(None);
        }
        // Zero rows (degenerate outputs) are kept out of the unit-norm set.
        let blocks = blocks
            .into_iter()
            .map(|(id, m)| {
                let keep: Vec<usize> = (0..m.rows()).filter(|&i| m.row(i).iter().any(|&v| v != 0.0)).collect();
                (id, m.select_rows(&keep))
            })
            .collect();
        mean_inter_client_dot(&EmbeddingSet::new(blocks)?).map(Some).or(Ok(None))
    };
    Ok(RoundMetrics {
        neg_uniformity_representation: uniformity(&hp)?,
        neg_uniformity_embedding: uniformity(&zp)?,
        effective_rank_representation: rank(&hp),
        effective_rank_embedding: rank(&zp),
        inter_client_dot_representation: dot(h_blocks)?,
        inter_client_dot_embedding: dot(z_blocks)?,
        mean_representation_norm: h_norm / rows.max(1) as f64,
        mean_embedding_norm: z_norm / rows.max(1) as f64,
    })
}

/// Full server loop with sequential clients.
pub fn run_training(cfg: &FedConfig, data: &Dataset, partition: &ClientPartition) -> Result<TrainingOutcome> {
    run_training_with(cfg, data, partition, &Sequential, |_| Ok(()))
}

/// Full server loop. `on_round` sees each log as soon as its round ends.
pub fn run_training_with<X, F>(
    cfg: &FedConfig,
    data: &Dataset,
    partition: &ClientPartition,
    executor: &X,
    mut on_round: F,
) -> Result<TrainingOutcome>
where
    X: ClientExecutor,
    F: FnMut(&RoundLog) -> Result<()>,
{
    let (mut global, clients) = initialize(cfg, data, partition)?;
    let mut logs = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let participants = sample_clients(cfg, round);
        let updates = executor.execute(participants.len(), |i| {
            local_train(&clients[participants[i]], &global, data, cfg, round)
        });
        let updates = updates.into_iter().collect::<Result<Vec<_>>>()?;
        let models: Vec<ModelBundle> = updates.iter().map(|u| u.model.clone()).collect();
        let counts: Vec<usize> = updates.iter().map(|u| u.samples).collect();
        global = fedavg_aggregate(&models, &counts)?;
        let log = RoundLog {
            round,
            participants,
            client_losses: updates.into_iter().map(|u| u.loss).collect(),
            metrics: round_metrics(&global, data, &clients, cfg.weights.temperature)?,
        };
        on_round(&log)?;
        logs.push(log);
    }
    Ok(TrainingOutcome { model: global, logs, clients })
}
