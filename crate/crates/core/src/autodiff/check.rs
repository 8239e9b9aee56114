use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns `max |autodiff − central| / max(1, |central|)` over every element
/// of every parameter. `f` is evaluated once on a recording tape and twice
/// per parameter element with the element shifted by `±h`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let leaves: Vec<Tensor> = params.iter().map(|p| p.clone().with_grad()).collect();

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = leaves.iter().map(|t| tape.tensor(t)).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.wrt_or_zero(v)).collect()
    };

    let eval = |shifted: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = shifted.iter().map(|t| tape.tensor(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst = 0.0_f64;
    let mut work = leaves.clone();
    for (k, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let base = work[k].data()[j];
            work[k].data_mut()[j] = base + h;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = base - h;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = base;
            let central = (plus - minus) / (2.0 * h);
            let err = (grad[j] - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_loss_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, vec![4, 4]);
        let x = random_tensor(&mut rng, vec![4]);
        let err = finite_diff_check(
            |tape, v| {
                let a = tape.tensor(&a);
                v[0].quadratic_form(a)
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-9, "err = {err:e}");
    }

    #[test]
    fn matmul_sum_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&mut rng, vec![4, 4]);
        let x = random_tensor(&mut rng, vec![4]);
        let err = finite_diff_check(|_, v| Ok(v[0].matmul(v[1])?.sum()), &[a, x], 1e-6).unwrap();
        assert!(err <= 1e-6, "err = {err:e}");
    }

    #[test]
    fn relu_network_off_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w1 = random_tensor(&mut rng, vec![6, 4]);
        let w2 = random_tensor(&mut rng, vec![1, 6]);
        let x = random_tensor(&mut rng, vec![4]);
        let err = finite_diff_check(
            |tape, v| {
                let x = tape.tensor(&x);
                let h = v[0].matmul(x)?.relu();
                Ok(v[1].matmul(h)?.abs().sum())
            },
            &[w1, w2],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "err = {err:e}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(|tape, _| Ok(tape.scalar(4.2)), &[x], 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(|_, v| Ok(v[0]), &[x], 0.0).is_err());
    }

    #[test]
    fn every_primitive_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = random_tensor(&mut rng, vec![3, 3]);
            let b = random_tensor(&mut rng, vec![3]);
            let c = random_tensor(&mut rng, vec![3]);
            let pos = Tensor::new(
                vec![3],
                (0..3).map(|_| rng.random_range(0.5..2.0)).collect(),
            )
            .unwrap();
            let gamma = Tensor::new(
                vec![3],
                (0..3).map(|_| rng.random_range(0.0..0.3)).collect(),
            )
            .unwrap();
            let err = finite_diff_check(
                |_, v| {
                    let (a, b, c, pos, gamma) = (v[0], v[1], v[2], v[3], v[4]);
                    let t1 = a.matmul(b)?.mul(c)?.sum();
                    let t2 = b.sub(c)?.relu().add(c.abs())?.sum();
                    let t3 = pos.sqrt()?.add(pos.reciprocal()?)?.sum();
                    let t4 = b.dot(c)?.mul(b.quadratic_form(a)?)?;
                    let t5 = b.outer(c)?.matmul(pos)?.sum();
                    let t6 = c.soft_threshold(gamma)?.scale(3.0).sum();
                    let t7 = a
                        .submatrix_excluding(1)?
                        .sum()
                        .add(a.column_excluding(0)?.sum())?;
                    let t8 = a.entry(2, 1)?.mul(pos.neg().sum())?;
                    t1.add(t2)?
                        .add(t3)?
                        .add(t4)?
                        .add(t5)?
                        .add(t6)?
                        .add(t7)?
                        .add(t8)
                },
                &[a, b, c, pos, gamma],
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-5, "err = {err:e}");
        }
    }

    #[test]
    fn assembly_and_inverse_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw = random_tensor(&mut rng, vec![3, 3]);
        let mut spd = vec![0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                spd[r * 3 + c] = (0..3)
                    .map(|k| raw.data()[r * 3 + k] * raw.data()[c * 3 + k])
                    .sum::<f64>()
                    + if r == c { 1.0 } else { 0.0 };
            }
        }
        let m = Tensor::new(vec![3, 3], spd).unwrap();
        let u = random_tensor(&mut rng, vec![2]);
        let d = Tensor::scalar(5.0);
        let w = random_tensor(&mut rng, vec![3, 3]);
        let err = finite_diff_check(
            |tape, v| {
                let w = tape.tensor(&w);
                let r = v[0].replace_row_col(2, v[1], v[2])?;
                let e = v[0].submatrix_excluding(0)?.embed_block(v[1], v[2], 0)?;
                let inv = v[0].inv_spd()?;
                r.mul(w)?.sum().add(e.mul(w)?.sum())?.add(inv.mul(w)?.sum())
            },
            &[m, u, d],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "err = {err:e}");
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_tensor(&mut rng, vec![3, 3]);
        let x = random_tensor(&mut rng, vec![3]).with_grad();
        let grad_of = |alpha: f64, beta: f64| {
            let tape = Tape::new();
            let xv = tape.tensor(&x);
            let av = tape.tensor(&a);
            let f = xv.quadratic_form(av).unwrap();
            let g = av.matmul(xv).unwrap().relu().sum();
            let loss = f.scale(alpha).add(g.scale(beta)).unwrap();
            tape.backward(loss).unwrap().wrt_or_zero(xv)
        };
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combo = grad_of(2.5, -0.75);
        for k in 0..3 {
            assert!((combo[k] - (2.5 * gf[k] - 0.75 * gg[k])).abs() <= 1e-12);
        }
    }
}
