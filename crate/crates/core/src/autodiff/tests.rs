use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const EPS: f64 = 1e-3;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

/// Reduce an arbitrary tensor to a scalar with fixed random weights so every
/// output coordinate contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let r = tape.constant(Tensor::randn(tape.shape(v), &mut rng));
    let m = tape.mul(v, r)?;
    tape.sum(m)
}

fn check<F>(shapes: &[&[usize]], tol: f64, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Copy,
{
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<_> = shapes.iter().map(|s| randn(s, &mut rng)).collect();
        let res = check_gradients(&inputs, EPS, None, &mut rng, |t, v| {
            let out = f(t, v)?;
            project(t, out, seed)
        })
        .unwrap();
        assert!(
            res.max_rel_error < tol,
            "seed {seed}: max relative error {} over {} probes",
            res.max_rel_error,
            res.probes
        );
    }
}

#[test]
fn elementwise_gradients() {
    check(&[&[2, 3], &[2, 3]], 1e-4, |t, v| t.add(v[0], v[1]));
    check(&[&[2, 3], &[2, 3]], 1e-4, |t, v| t.sub(v[0], v[1]));
    check(&[&[2, 3], &[2, 3]], 1e-4, |t, v| t.mul(v[0], v[1]));
    check(&[&[4]], 1e-4, |t, v| t.scale(v[0], -1.7));
    check(&[&[3, 5]], 1e-4, |t, v| t.silu(v[0]));
}

#[test]
fn conv2d_gradients() {
    check(&[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]], 1e-4, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1)
    });
    check(&[&[2, 3, 6, 5], &[2, 3, 3, 3], &[2]], 1e-4, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 2)
    });
    check(&[&[1, 3, 4, 4], &[5, 3, 1, 1]], 1e-4, |t, v| t.conv2d(v[0], v[1], None, 1));
}

#[test]
fn linear_and_norm_gradients() {
    check(&[&[2, 3, 4], &[4, 5], &[5]], 1e-4, |t, v| t.linear(v[0], v[1], Some(v[2])));
    check(&[&[2, 4, 3, 3], &[4], &[4]], 1e-4, |t, v| t.group_norm(v[0], v[1], v[2], 2));
    check(&[&[3, 6], &[6], &[6]], 1e-4, |t, v| t.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn film_gradients() {
    check(&[&[2, 3, 4, 4], &[2, 3], &[2, 3]], 1e-4, |t, v| t.film(v[0], v[1], v[2]));
}

#[test]
fn reshaping_gradients() {
    check(&[&[2, 3, 2, 3]], 1e-4, |t, v| t.upsample2x(v[0]));
    check(&[&[2, 3, 2, 2], &[2, 1, 2, 2]], 1e-4, |t, v| t.concat_channels(v[0], v[1]));
    check(&[&[1, 3], &[2, 3]], 1e-4, |t, v| t.concat_batch(&[v[0], v[1], v[0]]));
    check(&[&[4, 3]], 1e-4, |t, v| t.slice_batch(v[0], 1, 2));
    check(&[&[2, 3]], 1e-4, |t, v| t.repeat_batch(v[0], 3));
    check(&[&[2, 3, 2, 2]], 1e-4, |t, v| {
        let tok = t.to_tokens(v[0])?;
        let s = t.silu(tok)?;
        t.from_tokens(s, 2, 2)
    });
    check(&[&[2, 3, 4]], 1e-4, |t, v| {
        let h = t.split_heads(v[0], 2)?;
        let s = t.silu(h)?;
        t.merge_heads(s, 2)
    });
    check(&[&[2, 3, 2, 2]], 1e-4, |t, v| t.mean_spatial(v[0]));
    check(&[&[2, 6]], 1e-4, |t, v| t.reshape(v[0], &[3, 1, 4]));
}

#[test]
fn attention_primitive_gradients() {
    check(&[&[2, 3, 4], &[2, 4, 5]], 1e-4, |t, v| t.bmm(v[0], v[1], false));
    check(&[&[2, 3, 4], &[2, 5, 4]], 1e-4, |t, v| t.bmm(v[0], v[1], true));
    check(&[&[3, 5]], 1e-4, |t, v| t.softmax(v[0]));
}

#[test]
fn loss_reductions() {
    check(&[&[2, 3], &[2, 3]], 1e-4, |t, v| t.mse(v[0], v[1]));
    check(&[&[2, 3]], 1e-4, |t, v| t.mean(v[0]));
}

#[test]
fn identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&[1, 1, 5, 6], &mut rng);
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let mut t = Tape::inference();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w));
    let y = t.conv2d(xv, wv, None, 1).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn constant_field_gives_nine_c_inside() {
    let x = Tensor::full(&[1, 1, 5, 5], 0.5f64);
    let w = Tensor::full(&[1, 1, 3, 3], 1.0);
    let mut t = Tape::inference();
    let (xv, wv) = (t.constant(x), t.constant(w));
    let y = t.conv2d(xv, wv, None, 1).unwrap();
    let out = t.value(y).data();
    for r in 1..4 {
        for c in 1..4 {
            assert!((out[r * 5 + c] - 4.5).abs() < 1e-12);
        }
    }
    assert!((out[0] - 2.0).abs() < 1e-12);
}

#[test]
fn strided_conv_output_size_rounds_up() {
    let mut t = Tape::<f32>::inference();
    let x = t.constant(Tensor::zeros(&[1, 2, 7, 8]));
    let w = t.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let y = t.conv2d(x, w, None, 2).unwrap();
    assert_eq!(t.shape(y), [1, 3, 4, 4]);
    let bad = t.constant(Tensor::zeros(&[3, 1, 3, 3]));
    assert!(matches!(t.conv2d(x, bad, None, 1), Err(Error::Shape { .. })));
}

#[test]
fn film_neutral_and_zeroing() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = randn(&[2, 3, 2, 2], &mut rng);
    let shift = randn(&[2, 3], &mut rng);
    let mut t = Tape::inference();
    let hv = t.constant(h.clone());
    let zero = t.constant(Tensor::zeros(&[2, 3]));
    let y = t.film(hv, zero, zero).unwrap();
    assert_eq!(t.value(y), &h);
    let minus = t.constant(Tensor::full(&[2, 3], -1.0));
    let sv = t.constant(shift.clone());
    let y = t.film(hv, minus, sv).unwrap();
    for (i, chunk) in t.value(y).data().chunks(4).enumerate() {
        assert!(chunk.iter().all(|&v| v == shift.data()[i]));
    }
}

#[test]
fn quadratic_gradient_is_two_p() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.insert("p", randn(&[3, 4], &mut rng)).unwrap();
    store.insert("unused", randn(&[2], &mut rng)).unwrap();
    let mut t = Tape::new();
    let p = t.param(&store, "p").unwrap();
    let sq = t.mul(p, p).unwrap();
    let loss = t.sum(sq).unwrap();
    let grads = backprop_gradients(loss, &store, t).unwrap();
    let p = store.get("p").unwrap();
    assert_eq!(grads["p"], p.map(|x| 2.0 * x));
    assert!(grads["unused"].data().iter().all(|&g| g == 0.0));
}

#[test]
fn shared_parameter_accumulates() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::scalar(3.0f64)).unwrap();
    let mut t = Tape::new();
    let a = t.param(&store, "w").unwrap();
    let b = t.param(&store, "w").unwrap();
    assert_eq!(a, b);
    let y = t.mul(a, b).unwrap();
    let y = t.add(y, a).unwrap();
    let g = backprop_gradients(y, &store, t).unwrap();
    assert_eq!(g["w"].data()[0], 7.0);
}

#[test]
fn backward_requires_a_tracked_scalar() {
    let mut t = Tape::<f64>::new();
    let c = t.constant(Tensor::scalar(1.0));
    let s = t.sum(c).unwrap();
    assert!(matches!(t.backward(s), Err(Error::Autodiff(_))));

    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(Error::Autodiff(_))));

    let mut t = Tape::<f64>::inference();
    let x = t.leaf(Tensor::zeros(&[1]));
    assert!(t.backward(x).is_err());
}

#[test]
fn non_finite_forward_names_the_op() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::full(&[2], 1e30));
    let err = t.scale(x, 1e30).unwrap_err();
    assert!(matches!(err, Error::NonFinite { ref op } if op == "scale"), "{err}");
}

#[test]
fn non_finite_gradient_names_the_op() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::full(&[2], 1e20));
    let y = t.mul(x, x).unwrap_err();
    assert!(matches!(y, Error::NonFinite { .. }));

    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::full(&[2], 1e-30));
    let y = t.scale(x, 1e30).unwrap();
    let z = t.scale(y, 1e30).unwrap();
    let s = t.sum(z).unwrap();
    let err = t.backward(s).unwrap_err();
    assert!(err.to_string().contains("scale"), "{err}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::<f32>::inference();
        let x = t.constant(Tensor::randn(&[2, 3, 6, 6], &mut rng));
        let w = t.constant(Tensor::randn(&[4, 3, 3, 3], &mut rng));
        let y = t.conv2d(x, w, None, 2).unwrap();
        let y = t.silu(y).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(), run());
}
