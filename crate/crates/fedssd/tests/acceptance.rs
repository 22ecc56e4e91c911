//! Acceptance suite: one test per criterion, each printing a single
//! `PASS`/`FAIL` line before asserting.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fedssd::commands::{self, ROUNDS_FILE};
use fedssd::config::{DataSpec, Prepared, RunSpec};
use fedssd::exec::Threaded;
use fedssd_core::data::{augment_pair, ClientPartition};
use fedssd_core::federation::{fedavg_aggregate, run_training_with, FedConfig, Mode, RoundLog};
use fedssd_core::gradcheck::{run_gradcheck, Check, DEFAULT_SEED};
use fedssd_core::losses::{alignment_loss, uniformity_loss};
use fedssd_core::metrics::{
    effective_rank, evaluate_model, uniformity_decomposition, EmbeddingSet, MetricTarget, MetricsReport,
};
use fedssd_core::model::ModelBundle;
use fedssd_core::numerics::{derive_seed, l2_normalize_rows, rng_gaussian, Matrix, Rng, NORMALIZE_EPS};

const SEEDS: [u64; 3] = [0, 1, 2];

fn verdict(id: u32, title: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    // Written to the raw handle so the line survives output capture.
    let _ = writeln!(std::io::stderr(), "{tag} criterion {id:>2}: {title} | {detail}");
    assert!(passed, "criterion {id} failed: {title} | {detail}");
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

/// 4-class mixture, 200 samples per class, K = 4 at Dirichlet 0.1,
/// default architecture, T = 20, E = 2.
fn desk_spec(data_seed: u64, train_seed: u64) -> RunSpec {
    let mut spec = RunSpec::default();
    spec.data = DataSpec::Synthetic {
        classes: 4,
        samples_per_class: 200,
        test_samples_per_class: 200,
        input_dim: 32,
        center_spread: 1.0,
        within_std: 1.0,
        seed: data_seed,
    };
    spec.partition.dirichlet_alpha = 0.1;
    spec.partition.seed = data_seed;
    spec.federation.num_clients = 4;
    spec.federation.rounds = 20;
    spec.federation.local_epochs = 2;
    spec.federation.seed = train_seed;
    spec
}

struct Trained {
    last: RoundLog,
    representation: MetricsReport,
}

fn train(spec: &RunSpec, data: &Prepared, mode: Mode) -> Trained {
    let mut cfg = spec.federation.clone();
    cfg.mode = mode;
    let out = run_training_with(&cfg, &data.train, &data.partition, &Threaded::from_env(), |_| Ok(())).unwrap();
    let representation = evaluate_model(
        &out.model,
        &data.train,
        &data.partition,
        &data.test,
        &spec.eval_config(MetricTarget::Representation),
    )
    .unwrap();
    Trained { last: out.logs.last().unwrap().clone(), representation }
}

const MODES: [Mode; 4] = [Mode::AlignUniform, Mode::DsrOnly, Mode::Ssd, Mode::Hsd];

struct SeedRuns {
    runs: Vec<(Mode, Trained)>,
}

impl SeedRuns {
    fn get(&self, mode: Mode) -> &Trained {
        &self.runs.iter().find(|(m, _)| *m == mode).unwrap().1
    }
}

/// The runs shared by criteria 5 to 7, with the wall time they took.
fn desk_runs() -> &'static (Vec<SeedRuns>, Duration) {
    static RUNS: OnceLock<(Vec<SeedRuns>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let runs = SEEDS
            .iter()
            .map(|&seed| {
                let spec = desk_spec(seed, seed);
                let data = spec.prepare().unwrap();
                SeedRuns { runs: MODES.iter().map(|&m| (m, train(&spec, &data, m))).collect() }
            })
            .collect();
        (runs, start.elapsed())
    })
}

fn fmt(values: impl IntoIterator<Item = f64>) -> String {
    let v: Vec<String> = values.into_iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", v.join(", "))
}

#[test]
fn criterion_01_gradients() {
    let start = Instant::now();
    let report = run_gradcheck(DEFAULT_SEED, 20, 1e-4).unwrap();
    let elapsed = start.elapsed();
    let covered = Check::ALL.iter().all(|c| report.cases.iter().filter(|r| r.check == *c).count() == 20);
    let worst = report.worst().unwrap();
    let passed = report.passed() && covered && within(Duration::from_secs(30), elapsed);
    verdict(
        1,
        "analytic gradients match central differences (rel err < 1e-4, 20 configs, < 30 s)",
        passed,
        &format!(
            "{} cases, worst {} {:.2e} (seed {:#x}), {:.1}s",
            report.cases.len(),
            worst.check.name(),
            worst.rel_error,
            worst.seed,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_decomposition() {
    let start = Instant::now();
    let t = 2.0;
    let mut worst = 0.0f64;
    for s in 0..10u64 {
        let mut rng = Rng::new(1000 + s);
        let blocks: Vec<(usize, Matrix)> = (0..3)
            .map(|k| (k, l2_normalize_rows(&rng_gaussian(&mut rng, 20, 16, 0.0, 1.0), NORMALIZE_EPS)))
            .collect();
        let set = EmbeddingSet::new(blocks).unwrap();
        let dec = uniformity_decomposition(&set, t).unwrap();
        let pairs: usize = dec.intra.iter().map(|b| b.pairs).chain(dec.inter.iter().map(|b| b.pairs)).sum();
        let weighted: f64 = dec
            .intra
            .iter()
            .map(|b| b.pairs as f64 * b.potential)
            .chain(dec.inter.iter().map(|b| b.pairs as f64 * b.potential))
            .sum();
        let rebuilt = (weighted / pairs as f64).ln();
        let direct = uniformity_loss(&set.pooled(), t).unwrap().value;
        worst = worst.max((rebuilt - direct).abs()).max((dec.global - direct).abs());
        assert_eq!(pairs, 60 * 59 / 2);
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "intra/inter decomposition rebuilds pooled uniformity (1e-10, < 5 s)",
        worst < 1e-10 && within(Duration::from_secs(5), elapsed),
        &format!("max abs diff {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    );
}

/// Orthonormal columns via modified Gram-Schmidt on a Gaussian matrix.
fn orthonormal(rng: &mut Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        cols.push(v);
    }
    cols
}

/// `s · U Vᵀ` with `k` orthonormal columns in each factor: exactly `k`
/// nonzero singular values, all equal to `s`.
fn equal_spectrum(seed: u64, rows: usize, cols: usize, k: usize, s: f64) -> Matrix {
    let mut rng = Rng::new(seed);
    let u = orthonormal(&mut rng, rows, k);
    let v = orthonormal(&mut rng, cols, k);
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = s * (0..k).map(|r| u[r][i] * v[r][j]).sum::<f64>();
        }
    }
    m
}

#[test]
fn criterion_03_effective_rank() {
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (i, k) in [1usize, 2, 5].into_iter().enumerate() {
        let m = equal_spectrum(40 + i as u64, 12, 8, k, 1.7);
        let e = effective_rank(&m).unwrap();
        worst = worst.max((e - k as f64).abs());
        let scaled = effective_rank(&m.scale(37.5)).unwrap();
        let mut order: Vec<usize> = (0..m.rows()).collect();
        Rng::new(7 + k as u64).shuffle(&mut order);
        let permuted = effective_rank(&m.select_rows(&order)).unwrap();
        worst = worst.max((scaled - e).abs()).max((permuted - e).abs());
        detail.push(format!("k={k}: {e:.12}"));
    }
    let g = rng_gaussian(&mut Rng::new(99), 20, 6, 0.0, 1.0);
    let e = effective_rank(&g).unwrap();
    let mut order: Vec<usize> = (0..20).rev().collect();
    order.rotate_left(3);
    worst = worst
        .max((effective_rank(&g.scale(0.013)).unwrap() - e).abs())
        .max((effective_rank(&g.select_rows(&order)).unwrap() - e).abs());
    verdict(
        3,
        "ERank = k for k equal singular values; scale and row-permutation invariant (1e-9)",
        worst < 1e-9,
        &format!("{}; max deviation {worst:.2e}", detail.join(", ")),
    );
}

#[test]
fn criterion_04_fedavg() {
    let arch = FedConfig::default().architecture;
    let bundles: Vec<ModelBundle> =
        (0..5).map(|s| ModelBundle::init(&mut Rng::new(500 + s), &arch).unwrap()).collect();
    let counts = [1usize, 2, 3, 4, 5];
    let avg = fedavg_aggregate(&bundles, &counts).unwrap().flatten();
    let flats: Vec<Vec<f64>> = bundles.iter().map(ModelBundle::flatten).collect();
    let mut worst = 0.0f64;
    for (p, &a) in avg.iter().enumerate() {
        let expected = flats.iter().zip(counts).map(|(f, n)| n as f64 * f[p]).sum::<f64>() / 15.0;
        worst = worst.max((a - expected).abs());
    }
    let perm = [3usize, 0, 4, 2, 1];
    let pb: Vec<ModelBundle> = perm.iter().map(|&i| bundles[i].clone()).collect();
    let pc: Vec<usize> = perm.iter().map(|&i| counts[i]).collect();
    let permuted = fedavg_aggregate(&pb, &pc).unwrap().flatten();
    let perm_diff = avg.iter().zip(&permuted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        4,
        "FedAvg equals the weighted flat mean (1e-14) and ignores input order (1e-12)",
        worst < 1e-14 && perm_diff < 1e-12,
        &format!("{} params, max error {worst:.2e}, permutation diff {perm_diff:.2e}", avg.len()),
    );
}

#[test]
fn criterion_05_dsr_lowers_inter_client_dot() {
    let (runs, elapsed) = desk_runs();
    let dot = |r: &SeedRuns, m| r.get(m).last.metrics.inter_client_dot_embedding.unwrap();
    let au: Vec<f64> = runs.iter().map(|r| dot(r, Mode::AlignUniform)).collect();
    let dsr: Vec<f64> = runs.iter().map(|r| dot(r, Mode::DsrOnly)).collect();
    let wins = dsr.iter().zip(&au).filter(|(d, a)| d < a).count();
    verdict(
        5,
        "round-T inter-client dot: DSR_only < AlignUniform in >= 2 of 3 seeds (< 5 min)",
        wins >= 2 && within(Duration::from_secs(300), *elapsed),
        &format!("dsr_only {} vs align_uniform {}, {wins}/3, {:.1}s", fmt(dsr), fmt(au), elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_06_ssd_raises_uniformity() {
    let (runs, _) = desk_runs();
    let u = |m| runs.iter().map(move |r| r.get(m).representation.neg_uniformity).collect::<Vec<f64>>();
    let (au, dsr, ssd) = (u(Mode::AlignUniform), u(Mode::DsrOnly), u(Mode::Ssd));
    let over_au = ssd.iter().zip(&au).filter(|(s, a)| s > a).count();
    let over_dsr = ssd.iter().zip(&dsr).filter(|(s, d)| s >= d).count();
    verdict(
        6,
        "representation -L_uniform: SSD > AlignUniform and SSD >= DSR_only, each in >= 2 of 3 seeds",
        over_au >= 2 && over_dsr >= 2,
        &format!(
            "ssd {} align_uniform {} dsr_only {}; >au {over_au}/3, >=dsr {over_dsr}/3",
            fmt(ssd),
            fmt(au),
            fmt(dsr)
        ),
    );
}

#[test]
fn criterion_07_hsd_tradeoff() {
    let (runs, _) = desk_runs();
    let mut wins = 0;
    let mut rows = Vec::new();
    for r in runs {
        let (au, ssd, hsd) = (r.get(Mode::AlignUniform), r.get(Mode::Ssd), r.get(Mode::Hsd));
        let top = hsd.representation.neg_uniformity > au.representation.neg_uniformity
            && hsd.representation.neg_uniformity > ssd.representation.neg_uniformity;
        let worse_alignment = hsd.representation.alignment > ssd.representation.alignment;
        wins += usize::from(top && worse_alignment);
        rows.push(format!(
            "unif au/ssd/hsd {:.4}/{:.4}/{:.4} align ssd/hsd {:.4}/{:.4}",
            au.representation.neg_uniformity,
            ssd.representation.neg_uniformity,
            hsd.representation.neg_uniformity,
            ssd.representation.alignment,
            hsd.representation.alignment
        ));
    }
    verdict(
        7,
        "HSD has the highest -L_uniform and worse alignment than SSD in >= 2 of 3 seeds",
        wins >= 2,
        &format!("{wins}/3; {}", rows.join("; ")),
    );
}

#[test]
fn criterion_08_alpha_robustness() {
    let base = desk_spec(0, 0);
    let data = base.prepare().unwrap();
    let accuracy = |mode, alpha, seed| {
        let mut spec = base.clone();
        spec.federation.alpha_scale = alpha;
        spec.federation.seed = seed;
        train(&spec, &data, mode).representation.linear_probe_accuracy
    };
    let au: Vec<f64> = SEEDS.iter().map(|&s| accuracy(Mode::AlignUniform, 10.0, s)).collect();
    let au_mean = au.iter().sum::<f64>() / au.len() as f64;
    let mut means = Vec::new();
    let mut beats_all = true;
    let mut rows = Vec::new();
    for alpha in [2.0, 5.0, 10.0, 20.0] {
        let acc: Vec<f64> = SEEDS.iter().map(|&s| accuracy(Mode::Ssd, alpha, s)).collect();
        let wins = acc.iter().filter(|&&a| a > au_mean).count();
        beats_all &= wins >= 2;
        means.push(acc.iter().sum::<f64>() / acc.len() as f64);
        rows.push(format!("alpha {alpha}: {} ({wins}/3)", fmt(acc)));
    }
    let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
    verdict(
        8,
        "SSD probe accuracy spread < 5 pp over alpha in {2,5,10,20}; each alpha beats AlignUniform's mean in >= 2 of 3",
        spread < 0.05 && beats_all,
        &format!("{}; spread {:.4}; align_uniform {} mean {au_mean:.4}", rows.join("; "), spread, fmt(au)),
    );
}

#[test]
fn criterion_09_determinism() {
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut spec = desk_spec(0, 0);
    spec.output.dir = a.path().to_path_buf();
    commands::run(&spec).unwrap();
    spec.output.dir = b.path().to_path_buf();
    commands::run(&spec).unwrap();
    let ra = std::fs::read(a.path().join(ROUNDS_FILE)).unwrap();
    let rb = std::fs::read(b.path().join(ROUNDS_FILE)).unwrap();
    let elapsed = start.elapsed();
    verdict(
        9,
        "two identical runs write byte-identical rounds.jsonl (< 2 min)",
        !ra.is_empty() && ra == rb && within(Duration::from_secs(120), elapsed),
        &format!("{} bytes each, identical: {}, {:.1}s", ra.len(), ra == rb, elapsed.as_secs_f64()),
    );
}

/// Row-wise backward of `y = x / ‖x‖`.
fn unit_backward(x: &Matrix, gy: &Matrix) -> Matrix {
    let mut gx = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let radial: f64 = x.row(i).iter().zip(gy.row(i)).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
        for j in 0..x.cols() {
            gx[(i, j)] = (gy[(i, j)] - x[(i, j)] * radial) / norm;
        }
    }
    gx
}

/// Plain minibatch SGD on alignment + uniformity over all of `data`,
/// consuming randomness exactly as one client with all samples would: each
/// round reseeds the stream and shuffles the data from its stored order.
fn centralized_oracle(cfg: &FedConfig, data: &Prepared) -> ModelBundle {
    let mut model = ModelBundle::init(&mut Rng::new(cfg.seed).fork(&[1]), &cfg.architecture).unwrap();
    let client_seed = derive_seed(cfg.seed, &[5, 0]);
    let n = data.train.len();
    let t = cfg.weights.temperature;
    for round in 0..cfg.rounds {
        let mut rng = Rng::new(derive_seed(client_seed, &[round as u64]));
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.local_epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(cfg.batch_size.min(n)) {
                let x = data.train.features.select_rows(chunk);
                let (x1, x2) = augment_pair(&mut rng, &x, &cfg.augment).unwrap();
                let (h1, r1, c1) = model.forward(&x1).unwrap();
                let (_, r2, c2) = model.forward(&x2).unwrap();
                let z1 = l2_normalize_rows(&r1, NORMALIZE_EPS);
                let z2 = l2_normalize_rows(&r2, NORMALIZE_EPS);
                let (_, mut g1, mut g2) = alignment_loss(&z1, &z2).unwrap();
                let uni = uniformity_loss(&z1.vstack(&z2).unwrap(), t).unwrap();
                let b = chunk.len();
                g1.add_scaled(cfg.weights.beta, &uni.grad.slice_rows(0, b)).unwrap();
                g2.add_scaled(cfg.weights.beta, &uni.grad.slice_rows(b, 2 * b)).unwrap();
                let zero = Matrix::zeros(h1.rows(), h1.cols());
                let mut grad = model.backward(&c1, &zero, &unit_backward(&r1, &g1)).unwrap();
                grad.add_scaled(1.0, &model.backward(&c2, &zero, &unit_backward(&r2, &g2)).unwrap()).unwrap();
                model.add_scaled(-cfg.learning_rate, &grad).unwrap();
            }
        }
    }
    model
}

#[test]
fn criterion_10_centralized_equivalence() {
    let mut spec = desk_spec(3, 3);
    spec.federation.num_clients = 1;
    spec.federation.participation_rate = 1.0;
    spec.federation.mode = Mode::AlignUniform;
    spec.federation.rounds = 5;
    spec.federation.local_epochs = 2;
    let mut data = spec.prepare().unwrap();
    data.partition = ClientPartition { assignments: vec![(0..data.train.len()).collect()] };
    let fed = run_training_with(&spec.federation, &data.train, &data.partition, &Threaded::from_env(), |_| Ok(()))
        .unwrap()
        .model
        .flatten();
    let oracle = centralized_oracle(&spec.federation, &data).flatten();
    let diff = fed.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        10,
        "K=1 AlignUniform federation equals a plain training loop after 5 rounds x 2 epochs (1e-10)",
        fed.len() == oracle.len() && diff < 1e-10,
        &format!("{} params, max abs diff {diff:.2e}", fed.len()),
    );
}
