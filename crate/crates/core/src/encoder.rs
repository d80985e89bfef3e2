//! MLP encoder with analytic backward pass, and the query/key pair coupled
//! by an exponential moving average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, Matrix, NORM_EPS};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed in terms of the pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Layer widths from input to embedding, plus the hidden-layer activation.
///
/// The activation is applied after every affine layer except the last; the
/// last layer's output is L2-normalized instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Self {
        Self { layer_dims, activation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output widths, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::InvalidSpec(format!("zero-width layer in {:?}", self.layer_dims)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { layer_dims: vec![64, 128, 64], activation: Activation::Relu }
    }
}

/// One affine layer: `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer { weight: Matrix::zeros(self.weight.rows(), self.weight.cols()), bias: vec![0.0; self.bias.len()] }
    }
}

/// Visits parameter tensors in a fixed order: per layer, weight then bias.
pub trait Tensors {
    fn layers(&self) -> &[Layer];
    fn layers_mut(&mut self) -> &mut [Layer];

    fn tensors(&self) -> Vec<&[f64]> {
        self.layers().iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut().iter_mut().flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()]).collect()
    }

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Euclidean distance between two same-shaped parameter sets.
    fn distance(&self, other: &Self) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    fn same_shape<T: Tensors + ?Sized>(&self, other: &T) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    spec: EncoderSpec,
    layers: Vec<Layer>,
}

/// Parameter gradients, shaped like [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Layer>,
}

impl Tensors for EncoderParams {
    fn layers(&self) -> &[Layer] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

impl Tensors for Gradients {
    fn layers(&self) -> &[Layer] {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

impl Gradients {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self { layers: params.layers.iter().map(Layer::zeros_like).collect() }
    }

    /// Wraps explicit layers, which must match the shapes of `params`.
    pub fn from_layers(params: &EncoderParams, layers: Vec<Layer>) -> Result<Self> {
        let g = Self { layers };
        if !params.same_shape(&g) {
            return Err(Error::ShapeMismatch("gradient layers do not match the encoder".into()));
        }
        Ok(g)
    }
}

/// Activations retained by [`EncoderParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`B × in`).
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer (`B × out`).
    pre: Vec<Matrix>,
    /// Unit-norm output rows.
    output: Matrix,
    /// Norm of each raw embedding row before normalization.
    norms: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(seed);
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let values = (0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)).collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, values).expect("sized above"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { spec: spec.clone(), layers })
    }

    /// Builds parameters from explicit layers, checking them against `spec`.
    pub fn from_layers(spec: EncoderSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layer_dims.len() - 1 {
            return Err(Error::InvalidSpec(format!("{} layers for {} widths", layers.len(), spec.layer_dims.len())));
        }
        for (l, w) in layers.iter().zip(spec.layer_dims.windows(2)) {
            if l.weight.cols() != w[0] || l.weight.rows() != w[1] || l.bias.len() != w[1] {
                return Err(Error::InvalidSpec(format!(
                    "layer shape {}x{} (+{}) does not match {} -> {}",
                    l.weight.rows(),
                    l.weight.cols(),
                    l.bias.len(),
                    w[0],
                    w[1]
                )));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("encoder parameters"));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Embeds each row of `batch`, returning unit rows and the backward cache.
    pub fn forward(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.spec.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.spec.input_dim(), got: batch.cols() });
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut h = batch.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul_transposed(&layer.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let next = if li + 1 < n_layers {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = self.spec.activation.apply(*v));
                a
            } else {
                z.clone()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        let mut norms = Vec::with_capacity(h.rows());
        for r in 0..h.rows() {
            let row = h.row_mut(r);
            let n = dot(row, row).sqrt();
            if !n.is_finite() {
                return Err(Error::NonFinite("encoder output"));
            }
            if n <= NORM_EPS {
                return Err(Error::ZeroNorm { norm: n });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(ForwardCache { inputs, pre, output: h, norms })
    }

    /// Convenience wrapper returning only the embeddings.
    pub fn embed(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch)?.output)
    }

    /// Backpropagates `grad_output` (gradient w.r.t. the unit-norm outputs)
    /// to every weight and bias.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix) -> Result<Gradients> {
        let d = self.spec.embedding_dim();
        let b = cache.output.rows();
        if cache.inputs.len() != self.layers.len()
            || cache.output.cols() != d
            || cache.inputs.first().is_some_and(|x| x.cols() != self.spec.input_dim())
        {
            return Err(Error::StaleCache("cache was produced by a different encoder shape".into()));
        }
        if grad_output.rows() != b || grad_output.cols() != d {
            return Err(Error::StaleCache(format!(
                "grad_output is {}x{}, forward output was {}x{}",
                grad_output.rows(),
                grad_output.cols(),
                b,
                d
            )));
        }

        // through the normalization: (I - u uᵀ) g / ‖x‖
        let mut delta = Matrix::zeros(b, d);
        for r in 0..b {
            let u = cache.output.row(r);
            let g = grad_output.row(r);
            let ug = dot(u, g);
            let n = cache.norms[r];
            for (o, (gi, ui)) in delta.row_mut(r).iter_mut().zip(g.iter().zip(u)) {
                *o = (gi - ui * ug) / n;
            }
        }

        let mut grads = Gradients::zeros_like(self);
        for li in (0..self.layers.len()).rev() {
            if li + 1 < self.layers.len() {
                let z = &cache.pre[li];
                for (dv, zv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    *dv *= self.spec.activation.derivative(*zv);
                }
            }
            let input = &cache.inputs[li];
            let layer = &self.layers[li];
            let g = &mut grads.layers[li];
            let in_dim = layer.weight.cols();
            for r in 0..b {
                let dz = delta.row(r);
                let x = input.row(r);
                for (o, &dzo) in dz.iter().enumerate() {
                    if dzo == 0.0 {
                        continue;
                    }
                    g.bias[o] += dzo;
                    for (w, xi) in g.weight.row_mut(o).iter_mut().zip(x) {
                        *w += dzo * xi;
                    }
                }
            }
            if li > 0 {
                let mut prev = Matrix::zeros(b, in_dim);
                for r in 0..b {
                    let dz = delta.row(r);
                    let out = prev.row_mut(r);
                    for (o, &dzo) in dz.iter().enumerate() {
                        if dzo == 0.0 {
                            continue;
                        }
                        for (acc, w) in out.iter_mut().zip(layer.weight.row(o)) {
                            *acc += dzo * w;
                        }
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }
}

/// Query encoder (trained by gradient) and key encoder (EMA of the query).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub query: EncoderParams,
    pub key: EncoderParams,
    momentum: f64,
}

pub const DEFAULT_MOMENTUM: f64 = 0.99;

impl EncoderPair {
    /// Key encoder starts as an exact copy of the query encoder.
    pub fn new(spec: &EncoderSpec, seed: u64, momentum: f64) -> Result<Self> {
        let query = EncoderParams::init(spec, seed)?;
        Self::from_parts(query.clone(), query, momentum)
    }

    pub fn from_parts(query: EncoderParams, key: EncoderParams, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::ConfigInvalid(format!("momentum coefficient {momentum} outside [0, 1]")));
        }
        if query.spec != key.spec {
            return Err(Error::InvalidSpec("query and key encoders disagree on spec".into()));
        }
        Ok(Self { query, key, momentum })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// `θ_k ← m·θ_k + (1−m)·θ_q`, leaving the query encoder untouched.
    pub fn momentum_update(&mut self) {
        let m = self.momentum;
        if m == 1.0 {
            return;
        }
        let q = self.query.tensors();
        for (kt, qt) in self.key.tensors_mut().into_iter().zip(q) {
            if m == 0.0 {
                kt.copy_from_slice(qt);
            } else {
                for (k, q) in kt.iter_mut().zip(qt) {
                    *k = m * *k + (1.0 - m) * q;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::norm;

    fn identity_encoder(d: usize) -> EncoderParams {
        let spec = EncoderSpec::new(vec![d, d], Activation::Relu);
        EncoderParams::from_layers(spec, vec![Layer { weight: Matrix::identity(d), bias: vec![0.0; d] }]).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let spec = EncoderSpec::new(vec![2, 3], Activation::Relu);
        let a = EncoderParams::init(&spec, 7).unwrap();
        let b = EncoderParams::init(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.layers[0].weight.rows(), a.layers[0].weight.cols()), (3, 2));
        assert_eq!(a.layers[0].bias, vec![0.0; 3]);
        let bound = (6.0f64 / 5.0).sqrt();
        assert!(a.layers[0].weight.as_slice().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_rejects_bad_specs() {
        for dims in [vec![], vec![4], vec![3, 0, 2]] {
            let spec = EncoderSpec::new(dims, Activation::Tanh);
            assert!(matches!(EncoderParams::init(&spec, 1), Err(Error::InvalidSpec(_))));
        }
    }

    #[test]
    fn identity_layer_reduces_to_normalize() {
        let enc = identity_encoder(2);
        let out = enc.embed(&Matrix::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        assert!((out.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((out.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn forward_rows_are_unit() {
        let spec = EncoderSpec::new(vec![5, 9, 4], Activation::Tanh);
        let enc = EncoderParams::init(&spec, 3).unwrap();
        let mut rng = SeededRng::new(11);
        let x = Matrix::from_vec(6, 5, (0..30).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
        let out = enc.embed(&x).unwrap();
        for r in out.iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
        assert_eq!(enc.embed(&x).unwrap(), out);
    }

    #[test]
    fn forward_rejects_wrong_width_and_zero_output() {
        let enc = identity_encoder(2);
        assert!(matches!(enc.forward(&Matrix::zeros(1, 3)), Err(Error::DimensionMismatch { expected: 2, got: 3 })));
        assert!(matches!(enc.forward(&Matrix::zeros(1, 2)), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let spec = EncoderSpec::new(vec![3, 5, 2], Activation::Relu);
        let enc = EncoderParams::init(&spec, 5).unwrap();
        let x = Matrix::from_rows(&[[0.3, -0.2, 0.9], [1.0, 0.5, -0.4]]).unwrap();
        let cache = enc.forward(&x).unwrap();
        let g = enc.backward(&cache, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let a = EncoderParams::init(&EncoderSpec::new(vec![3, 2], Activation::Relu), 1).unwrap();
        let b = EncoderParams::init(&EncoderSpec::new(vec![4, 2], Activation::Relu), 1).unwrap();
        let cache = a.forward(&Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap()).unwrap();
        assert!(matches!(b.backward(&cache, &Matrix::zeros(1, 2)), Err(Error::StaleCache(_))));
        assert!(matches!(a.backward(&cache, &Matrix::zeros(2, 2)), Err(Error::StaleCache(_))));
    }

    #[test]
    fn one_dimensional_normalize_jacobian() {
        // single 1x2 linear layer y = w·x + b, output u = y/|y| = sign(y):
        // the normalize Jacobian (1 - u²)/|y| is zero, so every gradient vanishes
        let spec = EncoderSpec::new(vec![2, 1], Activation::Relu);
        let enc = EncoderParams::from_layers(
            spec,
            vec![Layer { weight: Matrix::from_rows(&[[0.5, -1.5]]).unwrap(), bias: vec![0.25] }],
        )
        .unwrap();
        let x = Matrix::from_rows(&[[2.0, 1.0]]).unwrap();
        let cache = enc.forward(&x).unwrap();
        assert_eq!(cache.output().get(0, 0), -1.0);
        let g = enc.backward(&cache, &Matrix::from_rows(&[[3.0]]).unwrap()).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| v.abs() < 1e-15)));
    }

    #[test]
    fn two_dimensional_hand_derived_jacobian() {
        // identity layer, x = [3, 4]: ‖x‖ = 5, u = [0.6, 0.8].
        // dL/dy = (I - uuᵀ) g / 5 with g = [1, 0]:
        // (I - uuᵀ) = [[0.64, -0.48], [-0.48, 0.36]] -> [0.64, -0.48] / 5 = [0.128, -0.096]
        // dW = dy xᵀ = [[0.384, 0.512], [-0.288, -0.384]], db = dy
        let enc = identity_encoder(2);
        let x = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let cache = enc.forward(&x).unwrap();
        let g = enc.backward(&cache, &Matrix::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        let expect_w = [0.384, 0.512, -0.288, -0.384];
        for (a, e) in g.layers[0].weight.as_slice().iter().zip(expect_w) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
        assert!((g.layers[0].bias[0] - 0.128).abs() < 1e-15);
        assert!((g.layers[0].bias[1] + 0.096).abs() < 1e-15);
    }

    #[test]
    fn momentum_update_identities() {
        let spec = EncoderSpec::new(vec![3, 4, 2], Activation::Relu);
        let q = EncoderParams::init(&spec, 1).unwrap();
        let k = EncoderParams::init(&spec, 2).unwrap();

        let mut pair = EncoderPair::from_parts(q.clone(), k.clone(), 1.0).unwrap();
        pair.momentum_update();
        assert_eq!(pair.key, k);
        assert_eq!(pair.query, q);

        let mut pair = EncoderPair::from_parts(q.clone(), k.clone(), 0.0).unwrap();
        pair.momentum_update();
        assert_eq!(pair.key, q);

        assert!(EncoderPair::from_parts(q.clone(), k, 1.5).is_err());
    }

    #[test]
    fn momentum_update_hand_value() {
        let spec = EncoderSpec::new(vec![1, 1], Activation::Relu);
        let mk = |v: f64| {
            EncoderParams::from_layers(
                spec.clone(),
                vec![Layer { weight: Matrix::from_vec(1, 1, vec![v]).unwrap(), bias: vec![v] }],
            )
            .unwrap()
        };
        let mut pair = EncoderPair::from_parts(mk(0.0), mk(1.0), 0.99).unwrap();
        pair.momentum_update();
        assert_eq!(pair.key.layers[0].weight.get(0, 0), 0.99);
        assert_eq!(pair.key.layers[0].bias[0], 0.99);
    }

    #[test]
    fn ema_distance_decays_geometrically() {
        let spec = EncoderSpec::new(vec![4, 6, 3], Activation::Tanh);
        let q = EncoderParams::init(&spec, 10).unwrap();
        let k = EncoderParams::init(&spec, 20).unwrap();
        let d0 = k.distance(&q);
        let m: f64 = 0.9;
        let mut pair = EncoderPair::from_parts(q, k, m).unwrap();
        for n in 1..=50 {
            pair.momentum_update();
            let d = pair.key.distance(&pair.query);
            assert!((d - m.powi(n) * d0).abs() < 1e-9);
        }
    }
}
