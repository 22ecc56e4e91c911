//! The subcommands, as library functions so they can be driven from tests.

use std::fmt::Write as _;
use std::path::PathBuf;

use fedssd_core::data::label_entropy;
use fedssd_core::federation::{run_training_with, ClientExecutor, Mode, RoundLog};
use fedssd_core::gradcheck::{run_gradcheck, GradcheckReport};
use fedssd_core::metrics::{evaluate_model, MetricTarget, MetricsReport};
use fedssd_core::model::ModelBundle;
use serde::Serialize;

use crate::config::RunSpec;
use crate::exec::Threaded;
use crate::formats::{save_checkpoint, write_atomic, write_json, JsonlFile};
use crate::{Error, Result};

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const FINAL_FILE: &str = "final.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RESOLVED_FILE: &str = "resolved.config";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// Command-line overrides applied on top of a spec file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    /// Replaces the training seed (`federation.seed`).
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
}

impl Overrides {
    pub fn apply(&self, mut spec: RunSpec) -> RunSpec {
        if let Some(out) = &self.out {
            spec.output.dir = out.clone();
        }
        if let Some(seed) = self.seed {
            spec.federation.seed = seed;
        }
        if let Some(mode) = self.mode {
            spec.federation.mode = mode;
        }
        spec
    }
}

/// Contents of `final.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalReport {
    pub mode: Mode,
    pub rounds: usize,
    pub seed: u64,
    pub target: MetricTarget,
    pub representation: MetricsReport,
    pub embedding: MetricsReport,
}

impl FinalReport {
    /// The report for the configured evaluation target.
    pub fn primary(&self) -> &MetricsReport {
        match self.target {
            MetricTarget::Representation => &self.representation,
            MetricTarget::Embedding => &self.embedding,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: ModelBundle,
    pub logs: Vec<RoundLog>,
    pub report: FinalReport,
    pub out_dir: PathBuf,
}

/// Trains per `spec` and writes every artifact into `spec.output.dir`,
/// fanning clients out over [`Threaded::from_env`].
pub fn run(spec: &RunSpec) -> Result<RunOutcome> {
    run_with(spec, &Threaded::from_env())
}

pub fn run_with<X: ClientExecutor>(spec: &RunSpec, executor: &X) -> Result<RunOutcome> {
    let out = spec.output.dir.clone();
    write_atomic(&out.join(RESOLVED_FILE), spec.to_toml()?.as_bytes())?;
    let data = spec.prepare()?;
    let mut rounds = JsonlFile::create(out.join(ROUNDS_FILE))?;
    let mut io_error = None;
    let trained = run_training_with(&spec.federation, &data.train, &data.partition, executor, |log| {
        rounds.append(log).map_err(|e| {
            let msg = e.to_string();
            io_error = Some(e);
            fedssd_core::Error::Precondition(msg)
        })
    });
    let outcome = match (trained, io_error) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    let eval = |target| evaluate_model(&outcome.model, &data.train, &data.partition, &data.test, &spec.eval_config(target));
    let report = FinalReport {
        mode: spec.federation.mode,
        rounds: spec.federation.rounds,
        seed: spec.federation.seed,
        target: spec.evaluation.target,
        representation: eval(MetricTarget::Representation)?,
        embedding: eval(MetricTarget::Embedding)?,
    };
    write_json(&out.join(FINAL_FILE), &report)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.model)?;
    Ok(RunOutcome { model: outcome.model, logs: outcome.logs, report, out_dir: out })
}

pub fn gradcheck(seed: u64, configs: usize) -> Result<GradcheckReport> {
    Ok(run_gradcheck(seed, configs, fedssd_core::gradcheck::DEFAULT_TOLERANCE)?)
}

pub fn render_gradcheck(report: &GradcheckReport) -> String {
    let mut s = String::new();
    let mut names: Vec<&str> = report.cases.iter().map(|c| c.check.name()).collect();
    names.dedup();
    for name in names {
        let cases: Vec<_> = report.cases.iter().filter(|c| c.check.name() == name).collect();
        let worst = cases.iter().map(|c| c.rel_error).fold(0.0, f64::max);
        let failed = report.failures().iter().filter(|c| c.check.name() == name).count();
        let _ = writeln!(s, "{name:<24} {:>3} configs  worst rel err {worst:.3e}  failed {failed}", cases.len());
    }
    let _ = writeln!(s, "loss families: {}", report.loss_families().len());
    if let Some(w) = report.worst() {
        let _ = writeln!(s, "worst case: {} seed {:#x} rel err {:.3e}", w.check.name(), w.seed, w.rel_error);
    }
    for f in report.failures() {
        let _ = writeln!(s, "FAILED: {} seed {:#x} rel err {:.3e} (tolerance {:e})", f.check.name(), f.seed, f.rel_error, report.tolerance);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientStats {
    pub client: usize,
    pub samples: usize,
    pub histogram: Vec<usize>,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionStats {
    pub dirichlet_alpha: f64,
    pub num_classes: usize,
    pub total: usize,
    pub clients: Vec<ClientStats>,
}

impl PartitionStats {
    pub fn mean_entropy(&self) -> f64 {
        self.clients.iter().map(|c| c.entropy).sum::<f64>() / self.clients.len().max(1) as f64
    }
}

pub fn partition_stats(spec: &RunSpec) -> Result<PartitionStats> {
    let data = spec.prepare()?;
    let num_classes = data.train.num_classes();
    let hist = data.partition.class_histograms(&data.train.labels, num_classes);
    Ok(PartitionStats {
        dirichlet_alpha: spec.partition.dirichlet_alpha,
        num_classes,
        total: data.partition.total(),
        clients: hist
            .into_iter()
            .enumerate()
            .map(|(client, histogram)| ClientStats {
                client,
                samples: histogram.iter().sum(),
                entropy: label_entropy(&histogram),
                histogram,
            })
            .collect(),
    })
}

pub fn render_partition_stats(stats: &PartitionStats) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "dirichlet_alpha {}  clients {}  samples {}", stats.dirichlet_alpha, stats.clients.len(), stats.total);
    for c in &stats.clients {
        let hist: Vec<String> = c.histogram.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(s, "client {:>3}  n {:>6}  entropy {:.4}  [{}]", c.client, c.samples, c.entropy, hist.join(" "));
    }
    let _ = writeln!(s, "mean entropy {:.4}", stats.mean_entropy());
    s
}

/// One line of `comparison.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub mode: Mode,
    pub target: MetricTarget,
    pub neg_uniformity: f64,
    pub effective_rank: f64,
    pub alignment: f64,
    pub mean_inter_client_dot: Option<f64>,
    pub linear_probe_accuracy: f64,
    pub subset_probe_accuracy: Vec<f64>,
}

impl ComparisonRow {
    fn from_report(mode: Mode, r: &MetricsReport) -> Self {
        ComparisonRow {
            mode,
            target: r.target,
            neg_uniformity: r.neg_uniformity,
            effective_rank: r.effective_rank,
            alignment: r.alignment,
            mean_inter_client_dot: r.mean_inter_client_dot,
            linear_probe_accuracy: r.linear_probe_accuracy,
            subset_probe_accuracy: r.subset_probe_accuracy.iter().map(|p| p.accuracy).collect(),
        }
    }
}

/// Runs `spec` once per mode (same data, partition and seeds), each into
/// `<out>/<mode>/`, and writes `<out>/comparison.csv`.
pub fn compare(spec: &RunSpec, modes: &[Mode]) -> Result<Vec<ComparisonRow>> {
    if modes.is_empty() {
        return Err(Error::Usage("compare needs at least one mode".into()));
    }
    let root = spec.output.dir.clone();
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut s = spec.clone();
        s.federation.mode = mode;
        s.output.dir = root.join(mode.name());
        let outcome = run(&s)?;
        rows.push(ComparisonRow::from_report(mode, outcome.report.primary()));
    }
    write_atomic(&root.join(COMPARISON_FILE), comparison_csv(&rows, &spec.evaluation.probe_fractions).as_bytes())?;
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow], fractions: &[f64]) -> String {
    let mut header = vec![
        "mode".to_string(),
        "target".into(),
        "neg_uniformity".into(),
        "effective_rank".into(),
        "alignment".into(),
        "mean_inter_client_dot".into(),
        "linear_probe_accuracy".into(),
    ];
    header.extend(fractions.iter().map(|f| format!("probe_accuracy_{f}")));
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let target = match r.target {
            MetricTarget::Representation => "representation",
            MetricTarget::Embedding => "embedding",
        };
        let mut cells = vec![
            r.mode.name().to_string(),
            target.to_string(),
            r.neg_uniformity.to_string(),
            r.effective_rank.to_string(),
            r.alignment.to_string(),
            r.mean_inter_client_dot.map_or(String::new(), |v| v.to_string()),
            r.linear_probe_accuracy.to_string(),
        ];
        cells.extend(r.subset_probe_accuracy.iter().map(|v| v.to_string()));
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}
