//! Finite-difference verification of every analytic gradient.
//!
//! Each check draws a random configuration from its own seed, so a failure
//! can be replayed with [`run_check`].

use alloc::vec::Vec;

use crate::losses::{
    alignment_loss, dsr_target, freeze_targets, pd_loss, total_loss, total_loss_frozen, uniformity_loss, DistillMode,
    LossWeights, ScalingVector, Separation,
};
use crate::model::{Architecture, ModelBundle, ProjectorKind};
use crate::numerics::{
    derive_seed, finite_diff_gradient, l2_normalize_rows, relative_error, rng_gaussian, Matrix, Rng, NORMALIZE_EPS,
};
use crate::Result;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_CONFIGS: usize = 20;
pub const DEFAULT_SEED: u64 = 0x5eed;
const FD_STEP: f64 = 1e-6;
const ERROR_FLOOR: f64 = 1e-8;
const ROWS: usize = 8;
const DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Family {
    Alignment,
    Uniformity,
    Dsr,
    Distillation,
    /// The combined objective back-propagated through the model.
    Total,
}

/// One gradient under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Alignment,
    Uniformity,
    DsrNormalized,
    DsrUnnormalized,
    DistillKl,
    DistillMse,
    TotalSoft,
    TotalHard,
}

impl Check {
    pub const ALL: [Check; 8] = [
        Check::Alignment,
        Check::Uniformity,
        Check::DsrNormalized,
        Check::DsrUnnormalized,
        Check::DistillKl,
        Check::DistillMse,
        Check::TotalSoft,
        Check::TotalHard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Alignment => "alignment",
            Check::Uniformity => "uniformity",
            Check::DsrNormalized => "dsr/normalized-target",
            Check::DsrUnnormalized => "dsr/raw-target",
            Check::DistillKl => "distill/kl",
            Check::DistillMse => "distill/mse",
            Check::TotalSoft => "total/soft",
            Check::TotalHard => "total/hard",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Check::Alignment => Family::Alignment,
            Check::Uniformity => Family::Uniformity,
            Check::DsrNormalized | Check::DsrUnnormalized => Family::Dsr,
            Check::DistillKl | Check::DistillMse => Family::Distillation,
            Check::TotalSoft | Check::TotalHard => Family::Total,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseResult {
    pub check: Check,
    pub seed: u64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.rel_error < self.tolerance)
    }

    pub fn failures(&self) -> Vec<CaseResult> {
        self.cases.iter().copied().filter(|c| !(c.rel_error < self.tolerance)).collect()
    }

    pub fn worst(&self) -> Option<CaseResult> {
        self.cases.iter().copied().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Distinct loss families covered, not counting the combined objective.
    pub fn loss_families(&self) -> Vec<Family> {
        let mut f: Vec<Family> = self.cases.iter().map(|c| c.check.family()).filter(|f| *f != Family::Total).collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

/// Seeds used for `check`: a fixed function of `base_seed`.
pub fn case_seeds(base_seed: u64, check: Check, configs: usize) -> Vec<u64> {
    let id = Check::ALL.iter().position(|c| *c == check).unwrap_or(0) as u64;
    (0..configs as u64).map(|i| derive_seed(base_seed, &[id, i])).collect()
}

/// Runs `configs` random configurations of every check.
pub fn run_gradcheck(base_seed: u64, configs: usize, tolerance: f64) -> Result<GradcheckReport> {
    let mut cases = Vec::with_capacity(Check::ALL.len() * configs);
    for check in Check::ALL {
        for seed in case_seeds(base_seed, check, configs) {
            cases.push(CaseResult { check, seed, rel_error: run_check(check, seed)? });
        }
    }
    Ok(GradcheckReport { tolerance, cases })
}

fn unit_rows(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    l2_normalize_rows(&rng_gaussian(rng, rows, cols, 0.0, 1.0), NORMALIZE_EPS)
}

fn from_flat(shape: (usize, usize), v: &[f64]) -> Matrix {
    Matrix::from_vec(shape.0, shape.1, v.to_vec()).expect("shape preserved")
}

fn random_scaling(rng: &mut Rng, dim: usize) -> Result<ScalingVector> {
    let count = 1 + rng.below(dim / 2);
    let dims = rng.sample_without_replacement(dim, count);
    let alpha = 2.0 + 18.0 * rng.uniform();
    ScalingVector::new(dim, &dims, alpha)
}

/// Relative error between analytic and central-difference gradients for one
/// seeded configuration.
pub fn run_check(check: Check, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    match check {
        Check::Alignment => {
            let z = unit_rows(&mut rng, ROWS, DIM);
            let zp = unit_rows(&mut rng, ROWS, DIM);
            let (_, gz, gp) = alignment_loss(&z, &zp)?;
            let mut joint = z.as_slice().to_vec();
            joint.extend_from_slice(zp.as_slice());
            let half = z.as_slice().len();
            let fd = finite_diff_gradient(
                |v| {
                    let a = from_flat(z.shape(), &v[..half]);
                    let b = from_flat(z.shape(), &v[half..]);
                    alignment_loss(&a, &b).map(|r| r.0).unwrap_or(f64::NAN)
                },
                &joint,
                FD_STEP,
            )?;
            let mut analytic = gz.into_vec();
            analytic.extend(gp.into_vec());
            Ok(relative_error(&analytic, &fd, ERROR_FLOOR))
        }
        Check::Uniformity => {
            let z = unit_rows(&mut rng, 2 * ROWS, DIM);
            let t = 0.5 + 2.5 * rng.uniform();
            let analytic = uniformity_loss(&z, t)?.grad;
            let fd = finite_diff_gradient(
                |v| uniformity_loss(&from_flat(z.shape(), v), t).map(|r| r.value).unwrap_or(f64::NAN),
                z.as_slice(),
                FD_STEP,
            )?;
            Ok(relative_error(analytic.as_slice(), &fd, ERROR_FLOOR))
        }
        Check::DsrNormalized | Check::DsrUnnormalized => {
            let normalize = check == Check::DsrNormalized;
            let z = unit_rows(&mut rng, ROWS, DIM);
            let d_k = random_scaling(&mut rng, DIM)?;
            let analytic = crate::losses::dsr_loss(&z, &d_k, normalize)?.grad;
            // The target is a stop-gradient constant.
            let target = dsr_target(&z, &d_k, normalize)?;
            let n = z.rows() as f64;
            let fd = finite_diff_gradient(
                |v| v.iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
                z.as_slice(),
                FD_STEP,
            )?;
            Ok(relative_error(analytic.as_slice(), &fd, ERROR_FLOOR))
        }
        Check::DistillKl | Check::DistillMse => {
            let mode = if check == Check::DistillKl { DistillMode::Kl } else { DistillMode::Mse };
            let h = rng_gaussian(&mut rng, ROWS, DIM, 0.0, 1.0);
            let z = rng_gaussian(&mut rng, ROWS, DIM, 0.0, 1.0);
            let analytic = pd_loss(&h, &z, mode)?.grad;
            let fd = finite_diff_gradient(
                |v| pd_loss(&from_flat(h.shape(), v), &z, mode).map(|r| r.value).unwrap_or(f64::NAN),
                h.as_slice(),
                FD_STEP,
            )?;
            Ok(relative_error(analytic.as_slice(), &fd, ERROR_FLOOR))
        }
        Check::TotalSoft | Check::TotalHard => {
            let separation = if check == Check::TotalHard { Separation::Hard } else { Separation::Soft };
            let arch = Architecture {
                input_dim: 6,
                hidden_dims: alloc::vec![DIM],
                embed_dim: DIM,
                projector: ProjectorKind::Nonlinear,
            };
            let template = ModelBundle::zeros(&arch)?;
            let params: Vec<f64> = (0..template.param_count()).map(|_| 0.5 * rng.gaussian()).collect();
            let model = template.unflatten(&params)?;
            let x = rng_gaussian(&mut rng, ROWS, arch.input_dim, 0.0, 1.0);
            let xp = x.map(|v| v + 0.1 * libm::sin(7.0 * v));
            let d_k = random_scaling(&mut rng, DIM)?;
            let w = LossWeights {
                beta: 0.5 + rng.uniform(),
                gamma: if separation == Separation::Hard { 0.0 } else { 0.5 + rng.uniform() },
                delta: 0.05 + 0.5 * rng.uniform(),
                temperature: 0.5 + 2.5 * rng.uniform(),
                pd_mode: if rng.uniform() < 0.5 { DistillMode::Kl } else { DistillMode::Mse },
                normalize_dsr_target: rng.uniform() < 0.5,
            };
            let (_, grad) = total_loss(&x, &xp, &model, &d_k, &w, separation)?;
            let frozen = freeze_targets(&x, &xp, &model, &d_k, &w, separation)?;
            let fd = finite_diff_gradient(
                |v| {
                    template
                        .unflatten(v)
                        .and_then(|m| total_loss_frozen(&x, &xp, &m, &d_k, &w, separation, &frozen))
                        .map(|r| r.total)
                        .unwrap_or(f64::NAN)
                },
                &params,
                FD_STEP,
            )?;
            Ok(relative_error(&grad.flatten(), &fd, ERROR_FLOOR))
        }
    }
}
