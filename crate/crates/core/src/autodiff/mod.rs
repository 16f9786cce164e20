//! Minimal reverse-mode automatic differentiation over dense rank-2 arrays.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its value and the rule for pushing gradients to its parents. Parameters
//! enter through [`Tape::param`], inputs and frozen targets through
//! [`Tape::constant`]. Calling [`Tape::backward`] on a 1×1 node fills the
//! gradients of every parameter that contributed to it.
//!
//! The operator set is deliberately narrow: temporal convolution, the
//! matrix products needed by temporal self-attention, row softmaxes, top-k
//! temporal pooling, row-wise KL and the elementwise glue between them.

mod tape;
mod tensor;

pub use tape::{Tape, Var, KL_EPS};
pub use tensor::Tensor2;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{Error, Result};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor2::from_vec(r, c, data).unwrap()
    }

    /// Compares analytic gradients of `f` against central differences.
    fn gradcheck<F>(inputs: &[Tensor2], f: F, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.backward(out).unwrap();
        let eval = |perturbed: &[Tensor2]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone()).unwrap()).collect();
            let o = f(&mut t, &vs).unwrap();
            t.value(o).item()
        };
        let eps = 1e-5;
        for (n, input) in inputs.iter().enumerate() {
            let analytic = tape
                .grad(vars[n])
                .cloned()
                .unwrap_or_else(|| Tensor2::zeros(input.rows(), input.cols()));
            for idx in 0..input.data().len() {
                let mut plus = inputs.to_vec();
                plus[n].data_mut()[idx] += eps;
                let mut minus = inputs.to_vec();
                minus[n].data_mut()[idx] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[idx];
                let scale = a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (a - numeric).abs() <= tol * scale,
                    "input {n} entry {idx}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_rows(&[[1.0, -2.0], [3.0, 0.5], [4.0, 7.0]])).unwrap();
        let w = tape.constant(Tensor2::from_rows(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
        let b = tape.constant(Tensor2::zeros(1, 2)).unwrap();
        let y = tape.conv1d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv1d_hand_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::column(&[1.0, 2.0, 3.0])).unwrap();
        let w = tape.constant(Tensor2::column(&[1.0, 1.0, 1.0])).unwrap();
        let b = tape.constant(Tensor2::zeros(1, 1)).unwrap();
        let y = tape.conv1d(x, w, b, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_rejects_even_kernel_and_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::zeros(4, 2)).unwrap();
        let w = tape.constant(Tensor2::zeros(4, 3)).unwrap();
        let b = tape.constant(Tensor2::zeros(1, 3)).unwrap();
        assert!(matches!(tape.conv1d(x, w, b, 2), Err(Error::InvalidArgument(_))));
        let w3 = tape.constant(Tensor2::zeros(5, 3)).unwrap();
        assert!(matches!(tape.conv1d(x, w3, b, 3), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn conv1d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [rand_tensor(&mut rng, 6, 3), rand_tensor(&mut rng, 9, 2), rand_tensor(&mut rng, 1, 2)];
        gradcheck(
            &inputs,
            |t, v| {
                let y = t.conv1d(v[0], v[1], v[2], 3)?;
                t.sum_all(y)
            },
            1e-4,
        );
    }

    #[test]
    fn softmax_rows_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor2::from_rows(&[[0.0, 0.0, 0.0]])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor2::from_rows(&[[1.0, 2.0], [4.5, 7.25], [5.5, 8.25]])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        assert!((v[(0, 0)] - 0.26894).abs() < 1e-5);
        assert!((v[(0, 1)] - 0.73106).abs() < 1e-5);
        assert!((v[(1, 0)] - v[(2, 0)]).abs() < 1e-15);
    }

    #[test]
    fn topk_mean_examples() {
        let mut tape = Tape::new();
        let col: Vec<f64> = (1..=8).map(f64::from).collect();
        let x = tape.constant(Tensor2::column(&col)).unwrap();
        let top2 = tape.topk_mean_time(x, 2).unwrap();
        assert_eq!(tape.value(top2).item(), 7.5);
        let all = tape.topk_mean_time(x, 8).unwrap();
        assert_eq!(tape.value(all).item(), 4.5);
        assert!(tape.topk_mean_time(x, 0).is_err());
        assert!(tape.topk_mean_time(x, 9).is_err());
    }

    #[test]
    fn topk_tie_routes_gradient_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor2::column(&[5.0, 5.0, 1.0])).unwrap();
        let v = tape.topk_mean_time(x, 1).unwrap();
        assert_eq!(tape.value(v).item(), 5.0);
        tape.backward(v).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn kl_rows_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor2::from_rows(&[[1.0, 0.0], [1.0, 0.0]])).unwrap();
        let q = tape.constant(Tensor2::from_rows(&[[0.5, 0.5], [0.5, 0.5]])).unwrap();
        let kl = tape.kl_rows(p, q).unwrap();
        assert!((tape.value(kl).item() - std::f64::consts::LN_2).abs() < 1e-6);

        let same = tape.kl_rows(q, q).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);

        let a = tape.constant(Tensor2::from_rows(&[[0.9, 0.1]])).unwrap();
        let b = tape.constant(Tensor2::from_rows(&[[0.5, 0.5]])).unwrap();
        let ab = tape.kl_rows(a, b).unwrap();
        let ba = tape.kl_rows(b, a).unwrap();
        assert!((tape.value(ab).item() - tape.value(ba).item()).abs() > 1e-3);
    }

    #[test]
    fn kl_rows_rejects_unnormalized_rows() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor2::from_rows(&[[0.7, 0.7]])).unwrap();
        let q = tape.constant(Tensor2::from_rows(&[[0.5, 0.5]])).unwrap();
        assert!(matches!(tape.kl_rows(p, q), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn kl_target_gets_no_gradient() {
        let mut tape = Tape::new();
        let p_logits = tape.param(Tensor2::from_rows(&[[0.3, -0.2, 0.1]])).unwrap();
        let q_logits = tape.param(Tensor2::from_rows(&[[1.0, 0.0, -1.0]])).unwrap();
        let p = tape.softmax_rows(p_logits).unwrap();
        let q = tape.softmax_rows(q_logits).unwrap();
        let kl = tape.kl_rows(p, q).unwrap();
        tape.backward(kl).unwrap();
        assert!(tape.grad(p_logits).is_none());
        assert!(tape.grad(q_logits).is_some());
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor2::from_rows(&[[1.0, 2.0, 3.0]])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));

        let mut tape = Tape::new();
        let x = tape.param(Tensor2::zeros(2, 3)).unwrap();
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor2::zeros(2, 2)).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(2, 2))));
        let c = tape.constant(Tensor2::scalar(1.0)).unwrap();
        assert!(matches!(tape.backward(c), Err(Error::Detached)));
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.constant(Tensor2::scalar(f64::NAN)),
            Err(Error::NonFinite(_))
        ));
        let x = tape.constant(Tensor2::scalar(1e300)).unwrap();
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite("mul"))));
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a = rand_tensor(&mut rng, 4, 3);
            let b = rand_tensor(&mut rng, 4, 3).map(|v| v.abs() + 0.5);
            let col = rand_tensor(&mut rng, 4, 1);
            gradcheck(
                &[a, b, col],
                |t, v| {
                    let d = t.div(v[0], v[1])?;
                    let m = t.mul(d, v[0])?;
                    let s = t.sub(m, v[1])?;
                    let r = t.relu(s)?;
                    let sg = t.sigmoid(v[0])?;
                    let c = t.mul_col(sg, v[2])?;
                    let ab = t.abs(c)?;
                    let sq = t.sqrt(v[1])?;
                    let sum = t.add(r, ab)?;
                    let sum = t.add(sum, sq)?;
                    let aff = t.affine(sum, -0.7, 2.0)?;
                    t.mean_all(aff)
                },
                1e-4,
            );
        }
    }

    #[test]
    fn matrix_and_row_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = rand_tensor(&mut rng, 5, 3);
            let b = rand_tensor(&mut rng, 3, 4);
            let c = rand_tensor(&mut rng, 6, 3);
            let target = rand_tensor(&mut rng, 5, 4);
            gradcheck(
                &[a, b, c],
                |t, v| {
                    let ab = t.matmul(v[0], v[1])?;
                    let act = t.matmul_t(v[0], v[2])?;
                    let sm = t.softmax_rows(act)?;
                    let ls = t.log_softmax_rows(ab)?;
                    let tr = t.transpose(sm)?;
                    let col = t.column(tr, 1)?;
                    let d = t.dot_const(ls, &target)?;
                    let pooled = t.topk_mean_time(ab, 2)?;
                    let ps = t.sum_all(pooled)?;
                    let cs = t.sum_all(col)?;
                    let s = t.add(d, ps)?;
                    t.add(s, cs)
                },
                1e-4,
            );
        }
    }

    #[test]
    fn kl_gradient_wrt_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = rand_tensor(&mut rng, 4, 5).softmax_rows();
        let logits = rand_tensor(&mut rng, 4, 5);
        gradcheck(
            &[logits],
            |t, v| {
                let p = t.constant(target.clone())?;
                let q = t.softmax_rows(v[0])?;
                t.kl_rows(p, q)
            },
            1e-4,
        );
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::new();
            let x = tape.param(rand_tensor(&mut rng, 8, 4)).unwrap();
            let w = tape.param(rand_tensor(&mut rng, 12, 3)).unwrap();
            let b = tape.param(rand_tensor(&mut rng, 1, 3)).unwrap();
            let y = tape.conv1d(x, w, b, 3).unwrap();
            let s = tape.softmax_rows(y).unwrap();
            let p = tape.topk_mean_time(s, 2).unwrap();
            let l = tape.sum_all(p).unwrap();
            tape.backward(l).unwrap();
            tape.grad(w).unwrap().clone()
        };
        let a = run();
        let b = run();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
