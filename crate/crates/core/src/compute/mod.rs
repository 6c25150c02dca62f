//! Dense kernels and reverse-mode differentiation for the toy transformer.
//!
//! Parameters and activations are stored as the scalar type `T`; dot
//! products, softmax denominators and normalisation statistics accumulate
//! in `f64` regardless of `T`.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{AttentionSpec, Gradients, LaamSpec, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Eager matrix product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (a, b) = (tape.leaf(a), tape.leaf(b));
    let out = tape.matmul(a, b)?;
    Ok(tape.tensor(out))
}

/// Eager row softmax; `mask` entries are `0` or `-inf`.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.leaf(x);
    let out = tape.softmax_rows(x, mask)?;
    Ok(tape.tensor(out))
}

/// Mean token negative log-likelihood of `targets` under `logits[T x V]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(logits);
    let loss = tape.cross_entropy(x, targets, 1.0 / targets.len().max(1) as f64)?;
    Ok(tape.value(loss)[0].f64())
}

/// Eager layer normalisation.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (x, g, b) = (tape.leaf(x), tape.leaf(gamma), tape.leaf(beta));
    let out = tape.layer_norm(x, g, b, eps)?;
    Ok(tape.tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::seed;
    use rand::Rng;

    fn random(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap().with_grad()
    }

    /// Compares tape gradients of every input against central differences.
    fn check<F>(inputs: Vec<Tensor<f64>>, build: F, tol: f64)
    where
        F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
    {
        let eval = |ins: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
            let out = build(&mut tape, &vars);
            tape.value(out)[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for (n, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[n].numel()]);
            for i in 0..inputs[n].numel() {
                let mut plus = inputs.clone();
                plus[n].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[n].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
                assert!(err < tol, "input {n}[{i}]: analytic {} numeric {numeric}", analytic[i]);
            }
        }
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        let mut rng = seed::rng(1);
        let x = random(vec![3, 4], &mut rng);
        let eye = Tensor::<f64>::from_f64(vec![3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert_eq!(matmul(&eye, &x).unwrap().data(), x.data());
        match matmul(&x, &x) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![3, 4]);
                assert_eq!(right, vec![3, 4]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient() {
        let mut rng = seed::rng(2);
        let ins = vec![random(vec![3, 3], &mut rng), random(vec![3, 3], &mut rng)];
        check(ins, |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            t.sum(p)
        }, 1e-5);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::from_f64(vec![1, 4], &[0.3; 4]).unwrap();
        for p in softmax_rows(&x, None).unwrap().data() {
            assert!((p - 0.25f64).abs() < 1e-15);
        }
        let x = Tensor::<f64>::from_f64(vec![1, 2], &[0.0, 3f64.ln()]).unwrap();
        let y = softmax_rows(&x, None).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);

        let mut rng = seed::rng(3);
        let x = random(vec![5, 7], &mut rng);
        let y = softmax_rows(&x, None).unwrap();
        for row in y.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        let inf = f64::NEG_INFINITY;
        let mask = Tensor::<f64>::from_f64(vec![1, 3], &[0.0, inf, 0.0]).unwrap();
        let x = Tensor::<f64>::from_f64(vec![1, 3], &[1.0, 5.0, 1.0]).unwrap();
        let y = softmax_rows(&x, Some(&mask)).unwrap();
        assert_eq!(y.data(), &[0.5, 0.0, 0.5]);
        let full = Tensor::<f64>::from_f64(vec![1, 3], &[inf; 3]).unwrap();
        assert!(matches!(softmax_rows(&x, Some(&full)), Err(Error::DegenerateMask { row: 0 })));
    }

    #[test]
    fn softmax_gradient() {
        let mut rng = seed::rng(4);
        let w = random(vec![3, 4], &mut rng);
        let ins = vec![random(vec![3, 4], &mut rng)];
        let mask = Tensor::<f64>::from_f64(vec![3, 4], &[0., 0., f64::NEG_INFINITY, 0., 0., 0., 0., 0., 0., f64::NEG_INFINITY, 0., 0.]).unwrap();
        check(ins, move |t, v| {
            let s = t.softmax_rows(v[0], Some(&mask)).unwrap();
            let w = t.constant(w.clone());
            let p = t.mul(s, w).unwrap();
            t.sum(p)
        }, 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let z = Tensor::<f64>::zeros(vec![3, 8]);
        assert!((cross_entropy(&z, &[0, 5, 7]).unwrap() - 8f64.ln()).abs() < 1e-12);

        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut l = Tensor::<f64>::zeros(vec![2, 4]);
            l.data_mut()[1] = margin;
            l.data_mut()[4 + 3] = margin;
            let loss = cross_entropy(&l, &[1, 3]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);

        let z = Tensor::<f64>::zeros(vec![1, 4]);
        assert!(matches!(cross_entropy(&z, &[4]), Err(Error::TargetOutOfRange { id: 4, vocab: 4 })));
    }

    #[test]
    fn cross_entropy_matches_direct_evaluation() {
        let mut rng = seed::rng(5);
        let logits = random(vec![4, 5], &mut rng);
        let targets = [2, 0, 4, 1];
        // direct evaluation: -log(exp(x_t) / sum exp(x))
        let direct: f64 = logits
            .data()
            .chunks(5)
            .zip(targets)
            .map(|(row, t)| -(row[t].exp() / row.iter().map(|x| x.exp()).sum::<f64>()).ln())
            .sum::<f64>()
            / 4.0;
        assert!((cross_entropy(&logits, &targets).unwrap() - direct).abs() < 1e-10);
        check(vec![logits], move |t, v| t.cross_entropy(v[0], &targets, 0.25).unwrap(), 1e-6);
    }

    #[test]
    fn backward_examples() {
        let x = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.sum(v);
        assert_eq!(tape.backward(s).unwrap().get(v).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        assert_eq!(tape.backward(s).unwrap().get(v).unwrap(), &[2.0, -4.0, 1.0, 6.0]);

        assert!(matches!(tape.backward(sq), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn layer_norm_statistics_and_gradient() {
        let mut rng = seed::rng(6);
        let x = random(vec![4, 16], &mut rng);
        let ones = Tensor::from_f64(vec![16], &[1.0; 16]).unwrap();
        let zeros = Tensor::<f64>::zeros(vec![16]);
        let y = layer_norm(&x, &ones, &zeros, 0.0).unwrap();
        for row in y.data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
        let ins = vec![random(vec![3, 6], &mut rng), random(vec![6], &mut rng), random(vec![6], &mut rng)];
        let w = random(vec![3, 6], &mut rng);
        check(ins, move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], LN_EPS).unwrap();
            let w = t.constant(w.clone());
            let p = t.mul(y, w).unwrap();
            t.sum(p)
        }, 1e-5);
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = seed::rng(7);
        let ins = vec![random(vec![2, 5], &mut rng), random(vec![5], &mut rng)];
        check(ins, |t, v| {
            let x = t.add_row(v[0], v[1]).unwrap();
            let g = t.gelu(x);
            let g = t.scale(g, 1.7);
            let g = t.mul(g, g).unwrap();
            t.sum(g)
        }, 1e-6);
        // relu away from the kink
        let x = Tensor::<f64>::from_f64(vec![4], &[-1.0, 0.5, 2.0, -0.3]).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let r = tape.relu(v);
        let s = tape.sum(r);
        assert_eq!(tape.backward(s).unwrap().get(v).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_gradient_scatters() {
        let mut rng = seed::rng(8);
        let ins = vec![random(vec![5, 3], &mut rng)];
        let w = random(vec![4, 3], &mut rng);
        check(ins, move |t, v| {
            let e = t.gather(v[0], &[1, 3, 1, 0]).unwrap();
            let w = t.constant(w.clone());
            let p = t.mul(e, w).unwrap();
            t.sum(p)
        }, 1e-8);
    }

    fn attention_case(spec: AttentionSpec, nq: usize, nk: usize, seed_value: u64) {
        let mut rng = seed::rng(seed_value);
        let ins = vec![random(vec![nq, 8], &mut rng), random(vec![nk, 8], &mut rng), random(vec![nk, 8], &mut rng)];
        let w = random(vec![nq, 8], &mut rng);
        check(ins, move |t, v| {
            let a = t.attention(v[0], v[1], v[2], &spec).unwrap();
            let w = t.constant(w.clone());
            let p = t.mul(a, w).unwrap();
            t.sum(p)
        }, 1e-6);
    }

    #[test]
    fn attention_gradients() {
        attention_case(AttentionSpec { heads: 2, causal: false, laam: None }, 3, 5, 9);
        attention_case(AttentionSpec { heads: 4, causal: true, laam: None }, 4, 4, 10);
        let laam = LaamSpec { remaining: vec![2, 1, 0], boost: 1.0 };
        attention_case(AttentionSpec { heads: 2, causal: false, laam: Some(laam) }, 3, 5, 11);
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut rng = seed::rng(12);
        let q = random(vec![4, 8], &mut rng);
        let k = random(vec![4, 8], &mut rng);
        let v = random(vec![4, 8], &mut rng);
        let spec = AttentionSpec { heads: 2, causal: true, laam: None };
        let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.leaf(&q), tape.leaf(k), tape.leaf(v));
            let out = tape.attention(qv, kv, vv, &spec).unwrap();
            tape.tensor(out)
        };
        let base = run(&k, &v);
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 0..8 {
            k2.data_mut()[3 * 8 + j] += 1.0;
            v2.data_mut()[3 * 8 + j] -= 2.0;
        }
        let pert = run(&k2, &v2);
        assert_eq!(&base.data()[..24], &pert.data()[..24]);
        assert_ne!(&base.data()[24..], &pert.data()[24..]);
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut rng = seed::rng(13);
            let a = random(vec![6, 8], &mut rng);
            let b = random(vec![8, 8], &mut rng);
            let mut tape = Tape::<f32>::new();
            let (a, b) = (a.cast::<f32>().with_grad(), b.cast::<f32>().with_grad());
            let (av, bv) = (tape.input(a), tape.input(b));
            let p = tape.matmul(av, bv).unwrap();
            let spec = AttentionSpec { heads: 2, causal: true, laam: None };
            let at = tape.attention(p, p, p, &spec).unwrap();
            let loss = tape.cross_entropy(at, &[0, 1, 2, 3, 4, 5], 1.0 / 6.0).unwrap();
            let g = tape.backward(loss).unwrap();
            (tape.value(loss).to_vec(), g.get(av).unwrap().to_vec(), g.get(bv).unwrap().to_vec())
        };
        let (l1, a1, b1) = run();
        let (l2, a2, b2) = run();
        assert_eq!(l1[0].to_bits(), l2[0].to_bits());
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
