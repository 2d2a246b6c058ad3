//! Minimal dense reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of nodes built eagerly: every primitive computes its
//! forward value immediately and records what it needs for the backward
//! rule. Parameters live in a [`ParamStore`] that the graph borrows, so
//! building a graph never copies weight tables.
//!
//! Primitive set: `matmul`, `add` (broadcasting over leading axes), `mul`,
//! `concat` (last axis), `row_select`, `tanh`, `sigmoid`, `softmax`,
//! `layer_norm`, `cross_entropy_logits`, plus the structural helpers `sub`,
//! `scale`, `slice_cols`, `concat_rows`, `transpose`, `sum` and `mean`.

mod array;
mod graph;
mod optim;
mod params;

pub use array::Array;
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParamStore};

pub(crate) use graph::{log_sum_exp, softmax_in_place};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Array::vector(vec![0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        for label in 0..4 {
            let mut g = Graph::new();
            let x = g.constant(Array::matrix(1, 4, vec![0.0; 4]).unwrap());
            let l = g.cross_entropy_logits(x, &[label]).unwrap();
            assert!(close(g.value(l).item(), 4f64.ln(), 1e-12));
        }
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::new();
        let a = g.constant(Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = g.constant(Array::identity(2));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Array::zeros(&[2, 3]));
        let b = g.constant(Array::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(crate::Error::Shape { op, left, right }) => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let c = g.constant(Array::zeros(&[4]));
        assert!(matches!(g.add(a, c), Err(crate::Error::Shape { op: "add", .. })));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Array::vector(vec![0.3, -1.0, 2.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut g = Graph::new();
        let x = g.leaf(Array::vector(vec![1.0, -2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_twice_accumulates_exactly_double() {
        let mut g = Graph::new();
        let x = g.leaf(Array::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.3, -2.0, 0.05]).unwrap());
        let t = g.tanh(x).unwrap();
        let s = g.softmax(t).unwrap();
        let l = g.cross_entropy_logits(s, &[2, 0]).unwrap();
        g.backward(l).unwrap();
        let once = g.grad(x).unwrap().clone();
        g.backward(l).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Array::vector(vec![1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let mut store = ParamStore::new();
        let a = store.add("a", Array::vector(vec![1.0, 2.0]));
        let _b = store.add("b", Array::vector(vec![3.0]));
        let mut g = Graph::with_params(&store);
        let av = g.param(a);
        let s = g.sum(av).unwrap();
        g.backward(s).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads.arrays()[0].data(), &[1.0, 1.0]);
        assert_eq!(grads.arrays()[1].data(), &[0.0]);
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let mut g = Graph::new().checked(true);
        let x = g.constant(Array::vector(vec![f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(crate::Error::Divergence(_))));
        let mut g = Graph::new().checked(false);
        let x = g.constant(Array::vector(vec![f64::MAX]));
        assert!(g.scale(x, 10.0).is_ok());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let data: Vec<f64> = (0..5 * 7).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let mut g = Graph::new();
            let x = g.constant(Array::matrix(5, 7, data).unwrap());
            let y = g.softmax(x).unwrap();
            for r in 0..5 {
                let s: f64 = g.value(y).row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let data: Vec<f64> = (0..4 * 16).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let mut g = Graph::new();
            let x = g.constant(Array::matrix(4, 16, data).unwrap());
            let gain = g.constant(Array::full(&[16], 1.0));
            let bias = g.constant(Array::zeros(&[16]));
            let y = g.layer_norm(x, gain, bias).unwrap();
            for r in 0..4 {
                let row = g.value(y).row_slice(r);
                let mean = row.iter().sum::<f64>() / 16.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-10);
                // var/(var + eps): inputs with row variance well above 10 keep this within 1e-6.
                assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array::vector(vec![0.5, -1.5]));
        let before = store.clone();
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let zero = Gradients::zeros_like(&store);
        for _ in 0..3 {
            opt.step(&mut store, &zero).unwrap();
        }
        assert_eq!(store.get(id), before.get(id));
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array::vector(vec![0.0, 0.0, 0.0]));
        let mut opt = Adam::new(AdamConfig::with_lr(0.01), &store);
        let grads = Gradients::new(vec![Array::vector(vec![3.0, -0.2, 1e-3])]);
        opt.step(&mut store, &grads).unwrap();
        let x = store.get(id).data();
        assert!((x[0] + 0.01).abs() < 1e-6);
        assert!((x[1] - 0.01).abs() < 1e-6);
        assert!((x[2] + 0.01).abs() < 1e-4);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut store = ParamStore::new();
            let id = store.add("x", Array::vector(vec![0.0; 3]));
            let mut opt = Adam::new(AdamConfig::with_lr(0.1), &store);
            let target = Array::vector(c.clone());
            for _ in 0..200 {
                let grads = {
                    let mut g = Graph::with_params(&store);
                    let x = g.param(id);
                    let t = g.constant(target.clone());
                    let d = g.sub(x, t).unwrap();
                    let sq = g.mul(d, d).unwrap();
                    let l = g.sum(sq).unwrap();
                    g.backward(l).unwrap();
                    g.param_grads()
                };
                opt.step(&mut store, &grads).unwrap();
            }
            let err: f64 = store
                .get(id)
                .data()
                .iter()
                .zip(&c)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err < 1e-3, "distance {err} to {c:?}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient_when_checked() {
        let mut store = ParamStore::new();
        store.add("x", Array::vector(vec![0.0]));
        let mut opt = Adam::new(AdamConfig::default(), &store).checked(true);
        let grads = Gradients::new(vec![Array::vector(vec![f64::NAN])]);
        assert!(matches!(opt.step(&mut store, &grads), Err(crate::Error::Divergence(_))));
    }

    #[test]
    fn clip_bounds_global_norm() {
        let mut grads = Gradients::new(vec![
            Array::vector(vec![3.0, 4.0]),
            Array::vector(vec![12.0]),
        ]);
        let before = grads.clip_global_norm(1.0);
        assert_eq!(before, 13.0);
        assert!(grads.global_norm() <= 1.0 + 1e-9);
    }
}
