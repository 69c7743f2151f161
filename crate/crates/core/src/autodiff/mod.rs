//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every evaluation: each op appends a node and
//! returns a [`Var`]. [`Graph::backward`] sweeps the nodes in reverse and
//! returns the gradient of every leaf that asked for one. Values are checked
//! for NaN/Inf at every op boundary.

pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

#[cfg(test)]
pub(crate) use graph::cosine;
pub use graph::{softmax, CustomBackward, ElementwiseOp, Gradients, Graph, Var, COSINE_EPS};
pub use optim::{AdamW, OneCycle};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite value {value} produced by {op}")]
    NonFinite { op: &'static str, value: f64 },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not connected to any tensor that requires a gradient")]
    Detached,
    #[error("optimizer state does not match the parameters")]
    StateMismatch,
    #[error("{0}")]
    External(String),
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, GradCheck};
    use super::*;

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_expansion() {
        let g = Graph::new();
        let i = g.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let v = g.constant(m(2, 1, &[3.0, 4.0])).unwrap();
        assert_eq!(g.data(g.matmul(i, v).unwrap()), vec![3.0, 4.0]);
        let a = g.constant(m(1, 2, &[1.0, 2.0])).unwrap();
        assert_eq!(g.data(g.matmul(a, v).unwrap()), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let g = Graph::new();
        let a = g.constant(m(1, 2, &[1.0, 2.0])).unwrap();
        assert!(matches!(g.matmul(a, a), Err(AutodiffError::Shape(_))));
    }

    #[test]
    fn matmul_gradient() {
        let g = Graph::new();
        let a = g.param(&m(1, 2, &[1.0, 2.0])).unwrap();
        let b = g.constant(m(2, 1, &[3.0, 4.0])).unwrap();
        let loss = g.sum(g.matmul(a, b).unwrap()).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn elementwise_values() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, -2.0]).unwrap()).unwrap();
        assert_eq!(g.data(g.tanh(x).unwrap())[0], 0.0);
        let y = g.elementwise(ElementwiseOp::LeakyRelu(0.01), &[x]).unwrap();
        assert!((g.data(y)[1] + 0.02).abs() < 1e-15);
        assert!(g.elementwise(ElementwiseOp::Add, &[x]).is_err());
    }

    #[test]
    fn tanh_derivative_at_zero() {
        let g = Graph::new();
        let x = g.param(&Tensor::vector(vec![0.0]).unwrap()).unwrap();
        let loss = g.sum(g.tanh(x).unwrap()).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn scalar_broadcast_only() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let s = g.constant(Tensor::scalar(2.0)).unwrap();
        assert_eq!(g.data(g.mul(x, s).unwrap()), vec![2.0, 4.0, 6.0]);
        assert_eq!(g.data(g.sub(s, x).unwrap()), vec![1.0, 0.0, -1.0]);
        let y = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(g.add(x, y).is_err());
    }

    #[test]
    fn non_finite_rejected_at_op() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e200]).unwrap()).unwrap();
        assert!(matches!(g.square(x), Err(AutodiffError::NonFinite { .. })));
    }

    #[test]
    fn cosine_values() {
        let g = Graph::new();
        let v = |d: &[f64]| g.constant(Tensor::vector(d.to_vec()).unwrap()).unwrap();
        let a = v(&[1.0, 2.0, 3.0]);
        assert!((g.item(g.cosine_similarity(a, a).unwrap()) - 1.0).abs() < 1e-15);
        let (e1, e2) = (v(&[1.0, 0.0]), v(&[0.0, 1.0]));
        assert_eq!(g.item(g.cosine_similarity(e1, e2).unwrap()), 0.0);
        let c = g.item(g.cosine_similarity(v(&[1.0, 1.0]), e1).unwrap());
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        // zero vector: guarded, no alignment signal
        let z = v(&[0.0, 0.0]);
        assert_eq!(g.item(g.cosine_similarity(z, e1).unwrap()), 0.0);
    }

    #[test]
    fn mse_values_and_gradient() {
        let g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(g.item(g.mse(a, b).unwrap()), 1.0);
        assert_eq!(g.item(g.mse(a, a).unwrap()), 0.0);
        assert!(g.mse(a, g.constant(Tensor::vector(vec![1.0]).unwrap()).unwrap()).is_err());

        let g = Graph::new();
        let a = g.param(&Tensor::vector(vec![0.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::vector(vec![2.0]).unwrap()).unwrap();
        let loss = g.mse(a, b).unwrap();
        // d/da (a-2)^2 at a=0
        assert_eq!(g.backward(loss).unwrap().get(a).unwrap(), &[-4.0]);
    }

    #[test]
    fn backward_linear_and_square() {
        let g = Graph::new();
        let w = g.param(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let loss = g.sum(w).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(w).unwrap(), &[1.0, 1.0, 1.0]);

        let g = Graph::new();
        let w = g.param(&Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let loss = g.sum(g.square(w).unwrap()).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let g = Graph::new();
        let w = g.param(&Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let y = g.square(w).unwrap();
        assert!(matches!(g.backward(y), Err(AutodiffError::NonScalarLoss(_))));

        let g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let loss = g.sum(c).unwrap();
        assert!(matches!(g.backward(loss), Err(AutodiffError::Detached)));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let g = Graph::new();
        let w = g.param(&Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let unused = g.param(&Tensor::vector(vec![5.0, 6.0]).unwrap()).unwrap();
        let loss = g.sum(w).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_sums_contributions() {
        // x feeds tanh and square; d/dx[tanh(x) + x²] = sech²(x) + 2x.
        let check = check_gradients(
            &[Tensor::vector(vec![0.3, -1.2]).unwrap()],
            |g, v| {
                let a = g.tanh(v[0])?;
                let b = g.square(v[0])?;
                g.sum(g.add(a, b)?)
            },
            GradCheck::default(),
        )
        .unwrap();
        assert!(check.passed(), "{check:?}");
        let x: f64 = 0.3;
        let expect = 1.0 - x.tanh().powi(2) + 2.0 * x;
        assert!((check.analytic[0][0] - expect).abs() < 1e-12);
    }

    #[test]
    fn custom_node_routes_gradients() {
        let g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        // y = 3x computed outside the tape
        let out = Tensor::vector(g.data(x).iter().map(|v| 3.0 * v).collect()).unwrap();
        let y = g.custom(&[x], out, Box::new(|gy| Ok(vec![gy.iter().map(|v| 3.0 * v).collect()]))).unwrap();
        let loss = g.sum(y).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn vjp_with_seed() {
        let g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let y = g.square(x).unwrap();
        let seed = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let grads = g.backward_with(y, &seed).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0]);
    }
}
