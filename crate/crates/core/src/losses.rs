//! Alignment, uniformity, dimension-scaled regularization (DSR) and projector
//! distillation (PD) losses, each with a closed-form gradient, and their
//! weighted combination over an encoder/projector pair.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::ModelBundle;
use crate::numerics::{l2_normalize_rows, log_sum_exp, softmax_row, Matrix, NORMALIZE_EPS};
use crate::numerics::matrix::{dot, norm, squared_distance};
use crate::{Error, Result};

/// Lower bound applied to teacher probabilities before taking their log.
pub const KL_PROB_FLOOR: f64 = 1e-12;

/// Per-dimension scaling `d_k`: `alpha` on the client's own dimensions, 1 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingVector {
    values: Vec<f64>,
    scaled_dims: BTreeSet<usize>,
    alpha: f64,
}

impl ScalingVector {
    pub fn new(dim: usize, scaled_dims: &[usize], alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::param(alloc::format!("scale factor must be positive, got {alpha}")));
        }
        let mut values = vec![1.0; dim];
        let mut set = BTreeSet::new();
        for &i in scaled_dims {
            if i >= dim {
                return Err(Error::param(alloc::format!(
                    "scaled dimension {i} out of range for d = {dim}"
                )));
            }
            values[i] = alpha;
            set.insert(i);
        }
        Ok(ScalingVector {
            values,
            scaled_dims: set,
            alpha,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled_dims(&self) -> &BTreeSet<usize> {
        &self.scaled_dims
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

pub fn build_scaling_vector(d: usize, scaled_dims: &[usize], alpha: f64) -> Result<ScalingVector> {
    ScalingVector::new(d, scaled_dims, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DistillMode {
    #[default]
    #[cfg_attr(feature = "serde", serde(rename = "kl", alias = "KL"))]
    Kl,
    #[cfg_attr(feature = "serde", serde(rename = "mse", alias = "MSE"))]
    Mse,
}

/// How client separation enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Separation {
    /// DSR pulls embeddings toward their dimension-scaled copy.
    #[default]
    Soft,
    /// Embeddings are masked to the client's own dimensions before the
    /// alignment/uniformity terms; DSR is not used.
    Hard,
}

/// Coefficients of `align + β·uniform + γ·dsr + δ·distill`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Gaussian-potential temperature `t`.
    pub temperature: f64,
    pub pd_mode: DistillMode,
    /// Renormalize the DSR target onto the sphere.
    pub normalize_dsr_target: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1.0,
            gamma: 1.0,
            delta: 0.1,
            temperature: 2.0,
            pd_mode: DistillMode::Kl,
            normalize_dsr_target: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::param(alloc::format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(alloc::format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub align: f64,
    pub uniform: f64,
    pub dsr: f64,
    pub distill: f64,
    pub total: f64,
}

impl LossReport {
    /// Builds a report whose `total` is the weighted sum of the terms.
    pub fn combine(align: f64, uniform: f64, dsr: f64, distill: f64, w: &LossWeights) -> Self {
        LossReport {
            align,
            uniform,
            dsr,
            distill,
            total: align + w.beta * uniform + w.gamma * dsr + w.delta * distill,
        }
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        if reports.is_empty() {
            return LossReport::default();
        }
        let n = reports.len() as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.align += r.align / n;
            m.uniform += r.uniform / n;
            m.dsr += r.dsr / n;
            m.distill += r.distill / n;
            m.total += r.total / n;
        }
        m
    }
}

/// Value of a loss and its gradient with respect to one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Matrix,
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean squared distance between paired rows. Returns the value and the
/// gradients with respect to `z` and `z_plus`.
pub fn alignment_loss(z: &Matrix, z_plus: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    same_shape("alignment_loss", z, z_plus)?;
    let n = z.rows().max(1) as f64;
    let mut value = 0.0;
    let mut gz = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        for (j, (a, b)) in z.row(i).iter().zip(z_plus.row(i)).enumerate() {
            let d = a - b;
            value += d * d;
            gz[(i, j)] = 2.0 * d / n;
        }
    }
    let gp = gz.scale(-1.0);
    Ok((value / n, gz, gp))
}

/// `log` of the mean Gaussian potential `exp(−t‖zᵢ − zⱼ‖²)` over distinct
/// pairs `i < j`, evaluated as a log-sum-exp. Never positive; minimizing it
/// spreads the rows apart, and `0` means all rows coincide.
pub fn uniformity_loss(z: &Matrix, t: f64) -> Result<LossGrad> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::Precondition(alloc::format!(
            "uniformity needs at least 2 rows, got {n}"
        )));
    }
    let pairs = n * (n - 1) / 2;
    let mut exponents = Vec::with_capacity(pairs);
    for i in 0..n {
        for j in (i + 1)..n {
            exponents.push(-t * squared_distance(z.row(i), z.row(j)));
        }
    }
    let lse = log_sum_exp(&exponents);
    let value = lse - libm::log(pairs as f64);

    // ∂L/∂zᵢ = −2t Σ_{j≠i} wᵢⱼ (zᵢ − zⱼ), with wᵢⱼ the softmax of the exponents.
    let mut grad = Matrix::zeros(n, z.cols());
    let mut k = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let w = libm::exp(exponents[k] - lse);
            k += 1;
            if w == 0.0 {
                continue;
            }
            let c = -2.0 * t * w;
            for c_idx in 0..z.cols() {
                let d = c * (z[(i, c_idx)] - z[(j, c_idx)]);
                grad[(i, c_idx)] += d;
                grad[(j, c_idx)] -= d;
            }
        }
    }
    Ok(LossGrad { value, grad })
}

/// The stop-gradient DSR target for each row: `z ⊙ d_k`, optionally
/// renormalized.
pub fn dsr_target(z: &Matrix, d_k: &ScalingVector, normalize_target: bool) -> Result<Matrix> {
    if z.cols() != d_k.dim() {
        return Err(Error::Length {
            op: "dsr_loss",
            expected: z.cols(),
            actual: d_k.dim(),
        });
    }
    let mut target = z.clone();
    for i in 0..target.rows() {
        for (v, s) in target.row_mut(i).iter_mut().zip(d_k.values()) {
            *v *= s;
        }
    }
    Ok(if normalize_target {
        l2_normalize_rows(&target, NORMALIZE_EPS)
    } else {
        target
    })
}

/// Mean squared distance from each row to its (constant) scaled target.
pub fn dsr_loss(z: &Matrix, d_k: &ScalingVector, normalize_target: bool) -> Result<LossGrad> {
    let target = dsr_target(z, d_k, normalize_target)?;
    Ok(frozen_dsr(z, &target))
}

/// Distillation from the projector output `z` (teacher, stop-gradient) into
/// the representation `h` (student), row-wise over softmax distributions.
///
/// KL: `mean_i Σ_k p_k log(p_k / q_k)` with `p = σ(hᵢ)`, `q = max(σ(zᵢ), 1e-12)`.
/// MSE: `mean_i ‖σ(hᵢ) − σ(zᵢ)‖²`. The gradient is with respect to `h`;
/// the gradient with respect to `z` is zero by construction.
pub fn pd_loss(h: &Matrix, z: &Matrix, mode: DistillMode) -> Result<LossGrad> {
    same_shape("pd_loss", h, z)?;
    let n = h.rows().max(1) as f64;
    let mut grad = Matrix::zeros(h.rows(), h.cols());
    let mut value = 0.0;
    for i in 0..h.rows() {
        let p = softmax_row(h.row(i));
        let q = softmax_row(z.row(i));
        let g = grad.row_mut(i);
        match mode {
            DistillMode::Kl => {
                // a_k = log p_k − log q_k; ∂KL/∂h_j = p_j (a_j − KL).
                let a: Vec<f64> = p
                    .iter()
                    .zip(&q)
                    .map(|(&pk, &qk)| {
                        if pk == 0.0 {
                            0.0
                        } else {
                            libm::log(pk) - libm::log(qk.max(KL_PROB_FLOOR))
                        }
                    })
                    .collect();
                let kl = dot(&p, &a);
                value += kl;
                for ((gj, &pj), &aj) in g.iter_mut().zip(&p).zip(&a) {
                    *gj = pj * (aj - kl) / n;
                }
            }
            DistillMode::Mse => {
                // ∂/∂h_j = 2 p_j [(p_j − q_j) − Σ_k p_k (p_k − q_k)].
                let diff: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a - b).collect();
                value += dot(&diff, &diff);
                let s = dot(&p, &diff);
                for ((gj, &pj), &dj) in g.iter_mut().zip(&p).zip(&diff) {
                    *gj = 2.0 * pj * (dj - s) / n;
                }
            }
        }
    }
    Ok(LossGrad { value: value / n, grad })
}

/// Zeros every column outside `dims`, then renormalizes rows.
pub fn hsd_mask(z: &Matrix, dims: &BTreeSet<usize>) -> Result<Matrix> {
    Ok(l2_normalize_rows(&mask_columns(z, dims)?, NORMALIZE_EPS))
}

fn mask_columns(z: &Matrix, dims: &BTreeSet<usize>) -> Result<Matrix> {
    if dims.is_empty() {
        return Err(Error::param("hard-separation mask needs at least one dimension"));
    }
    if let Some(&bad) = dims.iter().find(|&&i| i >= z.cols()) {
        return Err(Error::param(alloc::format!(
            "mask dimension {bad} out of range for d = {}",
            z.cols()
        )));
    }
    let mut out = z.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            if !dims.contains(&j) {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Backward of `y = x / max(‖x‖, eps)` row-wise, given `y` and `‖x‖`.
fn normalize_backward(x: &Matrix, grad_y: &Matrix, eps: f64) -> Matrix {
    let mut gx = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let xr = x.row(i);
        let gy = grad_y.row(i);
        let nrm = norm(xr);
        let out = gx.row_mut(i);
        if nrm >= eps {
            let proj = dot(xr, gy) / (nrm * nrm);
            for ((o, &g), &xv) in out.iter_mut().zip(gy).zip(xr) {
                *o = (g - xv * proj) / nrm;
            }
        } else {
            for (o, &g) in out.iter_mut().zip(gy) {
                *o = g / eps;
            }
        }
    }
    gx
}

fn mask_backward(grad: &Matrix, dims: &BTreeSet<usize>) -> Matrix {
    let mut g = grad.clone();
    for i in 0..g.rows() {
        for (j, v) in g.row_mut(i).iter_mut().enumerate() {
            if !dims.contains(&j) {
                *v = 0.0;
            }
        }
    }
    g
}

/// Embedding path of one view, kept for the backward pass.
struct ViewPath {
    raw: Matrix,
    unit: Matrix,
    /// Hard separation only: masked raw embedding and its normalization.
    masked: Option<(Matrix, Matrix)>,
}

impl ViewPath {
    fn new(raw: Matrix, separation: Separation, d_k: &ScalingVector) -> Result<Self> {
        let unit = l2_normalize_rows(&raw, NORMALIZE_EPS);
        let masked = match separation {
            Separation::Soft => None,
            Separation::Hard => {
                let m = mask_columns(&unit, d_k.scaled_dims())?;
                let n = l2_normalize_rows(&m, NORMALIZE_EPS);
                Some((m, n))
            }
        };
        Ok(ViewPath { raw, unit, masked })
    }

    /// Embedding the alignment and uniformity terms act on.
    fn loss_embedding(&self) -> &Matrix {
        self.masked.as_ref().map_or(&self.unit, |(_, n)| n)
    }

    /// Distillation teacher.
    fn teacher(&self, d_k: &ScalingVector) -> Result<Matrix> {
        match self.masked {
            None => Ok(self.raw.clone()),
            Some(_) => mask_columns(&self.raw, d_k.scaled_dims()),
        }
    }

    /// Gradient on the raw projector output, given gradients on the loss
    /// embedding and (soft path) directly on the unit embedding.
    fn backward(&self, grad_loss_emb: &Matrix, grad_unit_extra: Option<&Matrix>, d_k: &ScalingVector) -> Result<Matrix> {
        let mut g_unit = match &self.masked {
            None => grad_loss_emb.clone(),
            Some((m, _)) => {
                let g_m = normalize_backward(m, grad_loss_emb, NORMALIZE_EPS);
                mask_backward(&g_m, d_k.scaled_dims())
            }
        };
        if let Some(extra) = grad_unit_extra {
            g_unit.add_scaled(1.0, extra)?;
        }
        Ok(normalize_backward(&self.raw, &g_unit, NORMALIZE_EPS))
    }
}

/// Stop-gradient quantities of [`total_loss`] captured at one parameter point.
///
/// Evaluating [`total_loss_frozen`] with these held fixed gives a function
/// whose ordinary gradient equals the stop-gradient gradient returned by
/// [`total_loss`] at the capture point; this is what finite-difference checks
/// compare against.
#[derive(Debug, Clone)]
pub struct FrozenTargets {
    dsr: [Matrix; 2],
    teacher: [Matrix; 2],
}

/// Full local objective on a batch of augmented pairs.
///
/// Both views go through encoder and projector. Alignment and uniformity act
/// on the unit-normalized embeddings (uniformity over the `2n` stacked rows);
/// DSR and distillation are averaged over the two views. With
/// [`Separation::Hard`] the embeddings are first masked to the client's own
/// dimensions, DSR is dropped, and the distillation teacher is the masked
/// projector output. The DSR value is still reported for diagnostics, but
/// callers should zero `gamma` for hard separation.
///
/// Returns the report and the gradient of `report.total` with respect to all
/// parameters, shaped like `model`.
pub fn total_loss(
    x: &Matrix,
    x_plus: &Matrix,
    model: &ModelBundle,
    d_k: &ScalingVector,
    w: &LossWeights,
    separation: Separation,
) -> Result<(LossReport, ModelBundle)> {
    let (report, grad, _) = evaluate(x, x_plus, model, d_k, w, separation, None)?;
    Ok((report, grad))
}

/// Stop-gradient targets of [`total_loss`] at `model`.
pub fn freeze_targets(
    x: &Matrix,
    x_plus: &Matrix,
    model: &ModelBundle,
    d_k: &ScalingVector,
    w: &LossWeights,
    separation: Separation,
) -> Result<FrozenTargets> {
    Ok(evaluate(x, x_plus, model, d_k, w, separation, None)?.2)
}

/// Value of the objective with the stop-gradient targets held at `frozen`.
pub fn total_loss_frozen(
    x: &Matrix,
    x_plus: &Matrix,
    model: &ModelBundle,
    d_k: &ScalingVector,
    w: &LossWeights,
    separation: Separation,
    frozen: &FrozenTargets,
) -> Result<LossReport> {
    Ok(evaluate(x, x_plus, model, d_k, w, separation, Some(frozen))?.0)
}

fn frozen_dsr(z: &Matrix, target: &Matrix) -> LossGrad {
    let n = z.rows().max(1) as f64;
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    let mut value = 0.0;
    for ((g, a), b) in grad.as_mut_slice().iter_mut().zip(z.as_slice()).zip(target.as_slice()) {
        let d = a - b;
        value += d * d;
        *g = 2.0 * d / n;
    }
    LossGrad { value: value / n, grad }
}

fn evaluate(
    x: &Matrix,
    x_plus: &Matrix,
    model: &ModelBundle,
    d_k: &ScalingVector,
    w: &LossWeights,
    separation: Separation,
    frozen: Option<&FrozenTargets>,
) -> Result<(LossReport, ModelBundle, FrozenTargets)> {
    same_shape("total_loss", x, x_plus)?;
    w.validate()?;
    let n = x.rows();
    let (h1, zr1, c1) = model.forward(x)?;
    let (h2, zr2, c2) = model.forward(x_plus)?;
    let v1 = ViewPath::new(zr1, separation, d_k)?;
    let v2 = ViewPath::new(zr2, separation, d_k)?;

    let targets = match frozen {
        Some(f) => f.clone(),
        None => FrozenTargets {
            dsr: [
                dsr_target(&v1.unit, d_k, w.normalize_dsr_target)?,
                dsr_target(&v2.unit, d_k, w.normalize_dsr_target)?,
            ],
            teacher: [v1.teacher(d_k)?, v2.teacher(d_k)?],
        },
    };

    let (align, ga1, ga2) = alignment_loss(v1.loss_embedding(), v2.loss_embedding())?;
    let stacked = v1.loss_embedding().vstack(v2.loss_embedding())?;
    let uni = uniformity_loss(&stacked, w.temperature)?;
    same_shape("dsr target", &v1.unit, &targets.dsr[0])?;
    same_shape("dsr target", &v2.unit, &targets.dsr[1])?;
    let dsr1 = frozen_dsr(&v1.unit, &targets.dsr[0]);
    let dsr2 = frozen_dsr(&v2.unit, &targets.dsr[1]);
    let pd1 = pd_loss(&h1, &targets.teacher[0], w.pd_mode)?;
    let pd2 = pd_loss(&h2, &targets.teacher[1], w.pd_mode)?;

    let report = LossReport::combine(
        align,
        uni.value,
        0.5 * (dsr1.value + dsr2.value),
        0.5 * (pd1.value + pd2.value),
        w,
    );

    let mut g_emb1 = ga1;
    let mut g_emb2 = ga2;
    g_emb1.add_scaled(w.beta, &uni.grad.slice_rows(0, n))?;
    g_emb2.add_scaled(w.beta, &uni.grad.slice_rows(n, 2 * n))?;
    let (e1, e2) = if w.gamma != 0.0 {
        (Some(dsr1.grad.scale(0.5 * w.gamma)), Some(dsr2.grad.scale(0.5 * w.gamma)))
    } else {
        (None, None)
    };
    let gz1 = v1.backward(&g_emb1, e1.as_ref(), d_k)?;
    let gz2 = v2.backward(&g_emb2, e2.as_ref(), d_k)?;
    let gh1 = pd1.grad.scale(0.5 * w.delta);
    let gh2 = pd2.grad.scale(0.5 * w.delta);

    let mut grad = model.backward(&c1, &gh1, &gz1)?;
    grad.add_scaled(1.0, &model.backward(&c2, &gh2, &gz2)?)?;
    Ok((report, grad, targets))
}
