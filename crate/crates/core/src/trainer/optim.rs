use crate::encoder::{EncoderParams, Gradients, Tensors};
use crate::error::{Error, Result};

/// Velocity buffers for SGD with momentum, shaped like the query encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Gradients,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams) -> Self {
        Self { velocity: Gradients::zeros_like(params) }
    }
}

/// `v ← μ·v + (g + λ·θ)`, then `θ ← θ − lr·v`.
pub fn sgd_step<P, G, V>(
    params: &mut P,
    grads: &G,
    velocity: &mut V,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()>
where
    P: Tensors,
    G: Tensors,
    V: Tensors,
{
    if !params.same_shape(grads) || !params.same_shape(velocity) {
        return Err(Error::ShapeMismatch("parameters, gradients and velocity differ in shape".into()));
    }
    let g = grads.tensors();
    for ((pt, gt), vt) in params.tensors_mut().into_iter().zip(g).zip(velocity.tensors_mut()) {
        for ((p, g), v) in pt.iter_mut().zip(gt).zip(vt.iter_mut()) {
            *v = momentum * *v + (g + weight_decay * *p);
            *p -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Layer;
    use crate::numeric::Matrix;

    struct Scalar(Vec<Layer>);

    impl Tensors for Scalar {
        fn layers(&self) -> &[Layer] {
            &self.0
        }
        fn layers_mut(&mut self) -> &mut [Layer] {
            &mut self.0
        }
    }

    fn scalar(w: f64) -> Scalar {
        Scalar(vec![Layer { weight: Matrix::from_vec(1, 1, vec![w]).unwrap(), bias: vec![w] }])
    }

    fn first(s: &Scalar) -> f64 {
        s.0[0].weight.get(0, 0)
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = scalar(1.3);
        let mut v = scalar(0.0);
        sgd_step(&mut p, &scalar(0.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(first(&p), 1.3);
    }

    #[test]
    fn momentum_hand_value() {
        let mut p = scalar(1.0);
        let mut v = scalar(0.0);
        sgd_step(&mut p, &scalar(0.5), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(first(&v), 0.5);
        assert!((first(&p) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_hand_value() {
        let mut p = scalar(1.0);
        let mut v = scalar(0.0);
        sgd_step(&mut p, &scalar(0.0), &mut v, 0.1, 0.0, 0.1).unwrap();
        assert!((first(&p) - 0.99).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(1.0);
        let mut v = Scalar(vec![]);
        assert!(matches!(sgd_step(&mut p, &scalar(0.0), &mut v, 0.1, 0.9, 0.0), Err(Error::ShapeMismatch(_))));
    }
}
