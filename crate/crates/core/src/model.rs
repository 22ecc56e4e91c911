//! Encoder and projector MLPs with cached forward passes, closed-form
//! backward passes, and a canonical flat parameter layout.

use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::{rng_gaussian, Matrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Whether the projector's two affine layers have a nonlinearity between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ProjectorKind {
    /// Activation between the two layers. Prone to dead hidden units at
    /// small widths, which collapses every embedding onto the output bias.
    Nonlinear,
    #[default]
    Linear,
}

/// Layer widths of the encoder/projector pair.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Representation and embedding width `d`.
    pub embed_dim: usize,
    pub projector: ProjectorKind,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: 32,
            hidden_dims: vec![64],
            embed_dim: 16,
            projector: ProjectorKind::Linear,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::param(alloc::format!(
                "all layer widths must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.embed_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        let enc: usize = self
            .encoder_widths()
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum();
        enc + 2 * (self.embed_dim * self.embed_dim + self.embed_dim)
    }
}

/// One affine layer `y = x Wᵀ + b`, with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LayerParams {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_transposed(&self.weight)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

/// Activations saved by a forward pass through a layer stack.
#[derive(Debug, Clone)]
pub struct StackCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

fn stack_forward(
    layers: &[LayerParams],
    x: &Matrix,
    act: Activation,
    activate_last: bool,
) -> Result<(Matrix, StackCache)> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        if cur.cols() != layer.in_dim() {
            return Err(Error::shape(
                "layer forward",
                cur.shape(),
                layer.weight.transpose().shape(),
            ));
        }
        let z = layer.forward(&cur)?;
        let last = i + 1 == layers.len();
        let out = if last && !activate_last { z.clone() } else { z.map(|v| act.apply(v)) };
        inputs.push(cur);
        pre.push(z);
        cur = out;
    }
    Ok((cur, StackCache { inputs, pre }))
}

/// Backpropagates `grad_out` through a stack; returns parameter gradients and
/// the gradient with respect to the stack input.
fn stack_backward(
    layers: &[LayerParams],
    cache: &StackCache,
    grad_out: &Matrix,
    act: Activation,
) -> Result<(Vec<LayerParams>, Matrix)> {
    let mut grads: Vec<LayerParams> = Vec::with_capacity(layers.len());
    let mut g = grad_out.clone();
    for i in (0..layers.len()).rev() {
        let last = i + 1 == layers.len();
        if !last {
            let pre = &cache.pre[i];
            for (gv, &p) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *gv *= act.derivative(p);
            }
        }
        let weight = g.transposed_matmul(&cache.inputs[i])?;
        let mut bias = vec![0.0; g.cols()];
        for r in g.row_iter() {
            for (b, v) in bias.iter_mut().zip(r) {
                *b += v;
            }
        }
        let g_in = g.matmul(&layers[i].weight)?;
        grads.push(LayerParams { weight, bias });
        g = g_in;
    }
    grads.reverse();
    Ok((grads, g))
}

/// Encoder `f` and two-layer projector `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoder: Vec<LayerParams>,
    pub projector: Vec<LayerParams>,
    pub activation: Activation,
    pub projector_kind: ProjectorKind,
}

/// Saved activations of a full encoder+projector pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder: StackCache,
    projector: StackCache,
}

impl ModelBundle {
    /// He-initialized weights (stddev `√(2/in_dim)`), zero biases.
    pub fn init(rng: &mut Rng, arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let he = |rng: &mut Rng, out: usize, inp: usize| LayerParams {
            weight: rng_gaussian(rng, out, inp, 0.0, libm::sqrt(2.0 / inp as f64)),
            bias: vec![0.0; out],
        };
        let encoder = arch
            .encoder_widths()
            .windows(2)
            .map(|w| he(rng, w[1], w[0]))
            .collect();
        let d = arch.embed_dim;
        let projector = vec![he(rng, d, d), he(rng, d, d)];
        Ok(ModelBundle {
            encoder,
            projector,
            activation: Activation::Relu,
            projector_kind: arch.projector,
        })
    }

    /// All-zero bundle with the given architecture.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let d = arch.embed_dim;
        Ok(ModelBundle {
            encoder: arch
                .encoder_widths()
                .windows(2)
                .map(|w| LayerParams::zeros(w[1], w[0]))
                .collect(),
            projector: vec![LayerParams::zeros(d, d), LayerParams::zeros(d, d)],
            activation: Activation::Relu,
            projector_kind: arch.projector,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden_dims: self.encoder[..self.encoder.len() - 1]
                .iter()
                .map(LayerParams::out_dim)
                .collect(),
            embed_dim: self.embed_dim(),
            projector: self.projector_kind,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.last().map_or(0, LayerParams::out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(LayerParams::param_count).sum()
    }

    fn layers(&self) -> impl Iterator<Item = &LayerParams> {
        self.encoder.iter().chain(self.projector.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.encoder.iter_mut().chain(self.projector.iter_mut())
    }

    fn projector_activation(&self) -> Activation {
        match self.projector_kind {
            ProjectorKind::Nonlinear => self.activation,
            ProjectorKind::Linear => Activation::Identity,
        }
    }

    /// Representations `h = f(x)`.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        Ok(stack_forward(&self.encoder, x, self.activation, false)?.0)
    }

    /// Embeddings `z = g(h)`.
    pub fn project(&self, h: &Matrix) -> Result<Matrix> {
        Ok(stack_forward(&self.projector, h, self.projector_activation(), false)?.0)
    }

    /// Returns `(h, z, cache)` for a later [`ModelBundle::backward`].
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix, ForwardCache)> {
        let (h, encoder) = stack_forward(&self.encoder, x, self.activation, false)?;
        let (z, projector) = stack_forward(&self.projector, &h, self.projector_activation(), false)?;
        Ok((h, z, ForwardCache { encoder, projector }))
    }

    /// Parameter gradient given upstream gradients on `h` (from losses that
    /// read the representation directly) and on `z`.
    pub fn backward(&self, cache: &ForwardCache, grad_h: &Matrix, grad_z: &Matrix) -> Result<ModelBundle> {
        let (projector, g_h) =
            stack_backward(&self.projector, &cache.projector, grad_z, self.projector_activation())?;
        let mut total_h = g_h;
        total_h.add_scaled(1.0, grad_h)?;
        let (encoder, _) = stack_backward(&self.encoder, &cache.encoder, &total_h, self.activation)?;
        Ok(ModelBundle {
            encoder,
            projector,
            activation: self.activation,
            projector_kind: self.projector_kind,
        })
    }

    /// Canonical layout: encoder layers then projector layers, each as the
    /// row-major weight followed by the bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            v.extend_from_slice(l.weight.as_slice());
            v.extend_from_slice(&l.bias);
        }
        v
    }

    /// Inverse of [`ModelBundle::flatten`] against `self`'s shapes.
    pub fn unflatten(&self, values: &[f64]) -> Result<ModelBundle> {
        let expected = self.param_count();
        if values.len() != expected {
            return Err(Error::Length {
                op: "unflatten_params",
                expected,
                actual: values.len(),
            });
        }
        let mut out = self.clone();
        let mut offset = 0;
        for l in out.layers_mut() {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&values[offset..offset + w.len()]);
            offset += w.len();
            let b = l.bias.len();
            l.bias.copy_from_slice(&values[offset..offset + b]);
            offset += b;
        }
        Ok(out)
    }

    pub fn same_architecture(&self, other: &ModelBundle) -> bool {
        self.projector_kind == other.projector_kind
            && self.activation == other.activation
            && self.encoder.len() == other.encoder.len()
            && self.projector.len() == other.projector.len()
            && self
                .layers()
                .zip(other.layers())
                .all(|(a, b)| a.weight.shape() == b.weight.shape())
    }

    /// `self += s * other`, parameter-wise.
    pub fn add_scaled(&mut self, s: f64, other: &ModelBundle) -> Result<()> {
        if !self.same_architecture(other) {
            return Err(Error::param("architecture mismatch in add_scaled"));
        }
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weight.add_scaled(s, &b.weight)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += s * y;
            }
        }
        Ok(())
    }
}

pub fn init_model(rng: &mut Rng, arch: &Architecture) -> Result<ModelBundle> {
    ModelBundle::init(rng, arch)
}

pub fn encoder_forward(model: &ModelBundle, x: &Matrix) -> Result<Matrix> {
    model.encode(x)
}

pub fn projector_forward(model: &ModelBundle, h: &Matrix) -> Result<Matrix> {
    model.project(h)
}

pub fn flatten_params(model: &ModelBundle) -> Vec<f64> {
    model.flatten()
}

pub fn unflatten_params(template: &ModelBundle, values: &[f64]) -> Result<ModelBundle> {
    template.unflatten(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_gradient;

    fn arch() -> Architecture {
        Architecture {
            input_dim: 5,
            hidden_dims: vec![7],
            embed_dim: 4,
            projector: ProjectorKind::Nonlinear,
        }
    }

    /// Per-sample loop oracle for one affine stack.
    fn loop_forward(layers: &[LayerParams], x: &[f64], act: Activation) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (i, l) in layers.iter().enumerate() {
            let mut next = vec![0.0; l.out_dim()];
            for o in 0..l.out_dim() {
                let mut s = l.bias[o];
                for k in 0..l.in_dim() {
                    s += l.weight[(o, k)] * cur[k];
                }
                next[o] = if i + 1 < layers.len() { act.apply(s) } else { s };
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = ModelBundle::init(&mut Rng::new(1), &arch()).unwrap();
        let b = ModelBundle::init(&mut Rng::new(1), &arch()).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().all(|l| l.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn he_variance() {
        let arch = Architecture {
            input_dim: 256,
            hidden_dims: vec![],
            embed_dim: 256,
            projector: ProjectorKind::Nonlinear,
        };
        let m = ModelBundle::init(&mut Rng::new(2), &arch).unwrap();
        let w = m.encoder[0].weight.as_slice();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let target = 2.0 / 256.0;
        assert!((var - target).abs() < 0.2 * target, "var {var}");
    }

    #[test]
    fn zero_dims_are_rejected() {
        let mut a = arch();
        a.embed_dim = 0;
        assert!(ModelBundle::init(&mut Rng::new(0), &a).is_err());
        let mut a = arch();
        a.hidden_dims = vec![];
        assert!(ModelBundle::init(&mut Rng::new(0), &a).is_ok());
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = ModelBundle::zeros(&arch()).unwrap();
        let x = rng_gaussian(&mut Rng::new(3), 6, 5, 0.0, 1.0);
        let h = m.encode(&x).unwrap();
        assert!(h.as_slice().iter().all(|&v| v == 0.0));
        assert!(m.project(&h).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_affine_layer() {
        let a = Architecture {
            input_dim: 2,
            hidden_dims: vec![],
            embed_dim: 2,
            projector: ProjectorKind::Linear,
        };
        let mut m = ModelBundle::zeros(&a).unwrap();
        m.encoder[0].weight = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        m.encoder[0].bias = vec![0.5, -0.5];
        let x = Matrix::from_rows(&[[1.0, 1.0], [2.0, -1.0]]).unwrap();
        let h = m.encode(&x).unwrap();
        assert_eq!(h.as_slice(), &[3.5, 6.5, 0.5, 1.5]);
    }

    #[test]
    fn forward_matches_per_sample_loop() {
        let m = ModelBundle::init(&mut Rng::new(4), &arch()).unwrap();
        let x = rng_gaussian(&mut Rng::new(5), 9, 5, 0.0, 1.0);
        let (h, z, _) = m.forward(&x).unwrap();
        for i in 0..x.rows() {
            let hl = loop_forward(&m.encoder, x.row(i), Activation::Relu);
            let zl = loop_forward(&m.projector, &hl, Activation::Relu);
            for (a, b) in h.row(i).iter().zip(&hl) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in z.row(i).iter().zip(&zl) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_projector_has_no_nonlinearity() {
        let mut a = arch();
        a.projector = ProjectorKind::Linear;
        let m = ModelBundle::init(&mut Rng::new(6), &a).unwrap();
        let h = rng_gaussian(&mut Rng::new(7), 3, 4, 0.0, 1.0);
        let z = m.project(&h).unwrap();
        let two = m.project(&h.scale(-2.0)).unwrap();
        // Linear in h up to the bias, which is zero at init.
        for (a, b) in z.as_slice().iter().zip(two.as_slice()) {
            assert!((b + 2.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_round_trip_and_count() {
        let m = ModelBundle::init(&mut Rng::new(8), &arch()).unwrap();
        let v = m.flatten();
        assert_eq!(v.len(), (7 * 5 + 7) + (4 * 7 + 4) + 2 * (4 * 4 + 4));
        assert_eq!(v.len(), arch().param_count());
        assert_eq!(m.unflatten(&v).unwrap(), m);
        let zero = m.unflatten(&vec![0.0; v.len()]).unwrap();
        assert_eq!(zero, ModelBundle::zeros(&arch()).unwrap());
        assert!(matches!(m.unflatten(&v[1..]), Err(Error::Length { .. })));
    }

    #[test]
    fn single_entry_perturbation_moves_one_position() {
        let m = ModelBundle::init(&mut Rng::new(9), &arch()).unwrap();
        let mut p = m.clone();
        p.projector[1].weight[(2, 3)] += 1.0;
        let (a, b) = (m.flatten(), p.flatten());
        let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(diffs.len(), 1);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let base = ModelBundle::init(&mut Rng::new(10), &arch()).unwrap();
        let x = rng_gaussian(&mut Rng::new(11), 6, 5, 0.0, 1.0);
        let wh = rng_gaussian(&mut Rng::new(12), 6, 4, 0.0, 1.0);
        let wz = rng_gaussian(&mut Rng::new(13), 6, 4, 0.0, 1.0);
        // Linear functional of (h, z): grads are the weights themselves.
        let f = |m: &ModelBundle| {
            let (h, z, _) = m.forward(&x).unwrap();
            crate::numerics::Matrix::as_slice(&h)
                .iter()
                .zip(wh.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + z.as_slice().iter().zip(wz.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, _, cache) = base.forward(&x).unwrap();
        let analytic = base.backward(&cache, &wh, &wz).unwrap().flatten();
        let numeric =
            finite_diff_gradient(|v| f(&base.unflatten(v).unwrap()), &base.flatten(), 1e-6).unwrap();
        let err = crate::numerics::relative_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-6, "rel err {err}");
    }
}
