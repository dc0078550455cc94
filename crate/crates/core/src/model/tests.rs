use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::backprop_gradients;

fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        size: 16,
        base_channels: 4,
        channel_mult: vec![1, 2],
        attention_sizes: vec![8, 4],
        heads: 2,
        embed_dim: 8,
        norm_groups: 2,
        ..Default::default()
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn frames(cfg: &DenoiserConfig, n: usize, seed: u64) -> Tensor<f64> {
    randn(&[n, cfg.channels, cfg.size, cfg.size], seed)
}

fn poses(cfg: &DenoiserConfig, n: usize, seed: u64) -> Tensor<f64> {
    randn(&[n, cfg.pose_channels, cfg.size, cfg.size], seed).map(|x| x.abs().min(1.0))
}

fn w(p: &ParamStore<f64>, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().to_vec()
}

/// `x[l, :] · W + b` for row-major `W: [din, dout]`.
fn affine(x: &[f64], rows: usize, din: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
    let dout = b.len();
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for j in 0..dout {
            out[r * dout + j] = b[j] + (0..din).map(|i| x[r * din + i] * wt[i * dout + j]).sum::<f64>();
        }
    }
    out
}

/// Direct multi-head attention for one sample.
fn reference_mha(p: &ParamStore<f64>, name: &str, q: &[f64], lq: usize, kv: &[f64], lk: usize, d: usize, dkv: usize, heads: usize) -> Vec<f64> {
    let g = |s: &str| w(p, &format!("{name}.{s}"));
    let qp = affine(q, lq, d, &g("q.w"), &g("q.b"));
    let kp = affine(kv, lk, dkv, &g("k.w"), &g("k.b"));
    let vp = affine(kv, lk, dkv, &g("v.w"), &g("v.b"));
    let dh = d / heads;
    let mut cat = vec![0.0; lq * d];
    for h in 0..heads {
        for i in 0..lq {
            let scores: Vec<f64> = (0..lk)
                .map(|j| (0..dh).map(|c| qp[i * d + h * dh + c] * kp[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                cat[i * d + h * dh + c] = (0..lk).map(|j| e[j] / z * vp[j * d + h * dh + c]).sum();
            }
        }
    }
    affine(&cat, lq, d, &g("o.w"), &g("o.b"))
}

fn reference_ln(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let m = r.iter().sum::<f64>() / d as f64;
            let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (v + 1e-5).sqrt();
            r.iter().enumerate().map(move |(i, x)| (x - m) * s * g[i] + b[i]).collect::<Vec<_>>()
        })
        .collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn config_validation() {
    assert!(DenoiserConfig::default().validate().is_ok());
    let mut c = tiny();
    c.attention_sizes = vec![5];
    assert!(c.validate().is_err());
    let mut c = tiny();
    c.heads = 3;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny();
    c.size = 12;
    assert!(c.validate().is_err());
}

#[test]
fn attention_sites_follow_config() {
    let m = Model64::new(tiny(), 0).unwrap();
    let names: Vec<_> = m.attention_sites().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["down1", "mid", "up1"]);
}

#[test]
fn mha_matches_direct_formula() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    Init { store: &mut store, rng: &mut rng }.attention("a", 4, 4).unwrap();
    for (_, v) in store.iter_mut() {
        *v = Tensor::randn(v.shape(), &mut rng);
    }
    let q = randn(&[1, 3, 4], 1);
    let kv = randn(&[1, 3, 4], 2);
    let mut t = Tape::inference();
    let (qv, kvv) = (t.constant(q.clone()), t.constant(kv.clone()));
    let out = multi_head_attention(&mut t, &store, "a", qv, kvv, kvv, 2).unwrap();
    let expect = reference_mha(&store, "a", q.data(), 3, kv.data(), 3, 4, 4, 2);
    assert_close(t.value(out).data(), &expect, 1e-5);
    assert!(matches!(
        multi_head_attention(&mut t, &store, "a", qv, kvv, kvv, 3),
        Err(Error::Config(_))
    ));
}

#[test]
fn single_key_attention_returns_projected_value() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    Init { store: &mut store, rng: &mut rng }.attention("a", 4, 6).unwrap();
    let kv = randn(&[1, 1, 6], 3);
    let vp = affine(kv.data(), 1, 6, &w(&store, "a.v.w"), &w(&store, "a.v.b"));
    let expect = affine(&vp, 1, 4, &w(&store, "a.o.w"), &w(&store, "a.o.b"));
    for seed in 0..3 {
        let mut t = Tape::inference();
        let q = t.constant(randn(&[1, 5, 4], 10 + seed));
        let k = t.constant(kv.clone());
        let out = multi_head_attention(&mut t, &store, "a", q, k, k, 2).unwrap();
        for row in t.value(out).data().chunks(4) {
            assert_close(row, &expect, 1e-12);
        }
    }
}

#[test]
fn attention_weights_are_normalised() {
    let mut t = Tape::<f64>::inference();
    let x = t.constant(randn(&[3, 4, 7], 2).map(|v| 5.0 * v));
    let y = t.softmax(x).unwrap();
    for row in t.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn appearance_block_is_pair_equivariant() {
    let m = Model64::new(tiny(), 1).unwrap();
    let d = 8;
    let (a, b) = (randn(&[2, 16, d], 1), randn(&[2, 16, d], 2));
    let app = randn(&[2, 16, d], 3);
    let run = |x: &Tensor<f64>, y: &Tensor<f64>| {
        let mut t = Tape::inference();
        let (xv, yv, av) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(app.clone()));
        let (o1, o2) = m.appearance_block(&mut t, "mid", xv, yv, av).unwrap();
        (t.value(o1).clone(), t.value(o2).clone())
    };
    let (p, q) = run(&a, &b);
    let (q2, p2) = run(&b, &a);
    assert_eq!(p, p2);
    assert_eq!(q, q2);
    assert_eq!(p.shape(), a.shape());
}

#[test]
fn appearance_block_with_single_token() {
    let m = Model64::new(tiny(), 2).unwrap();
    let d = 8;
    let h = randn(&[1, 4, d], 4);
    let app = randn(&[1, 1, d], 5);
    let mut t = Tape::inference();
    let (hv, hv2, av) = (t.constant(h.clone()), t.constant(h.map(|x| -x)), t.constant(app.clone()));
    let (o1, o2) = m.appearance_block(&mut t, "mid", hv, hv2, av).unwrap();
    let p = &m.params;
    let vp = affine(app.data(), 1, d, &w(p, "mid.app.attn.v.w"), &w(p, "mid.app.attn.v.b"));
    let add = affine(&vp, 1, d, &w(p, "mid.app.attn.o.w"), &w(p, "mid.app.attn.o.b"));
    for (out, src) in [(o1, h.clone()), (o2, h.map(|x| -x))] {
        let got = t.value(out).data();
        for (r, row) in got.chunks(d).enumerate() {
            let expect: Vec<f64> = (0..d).map(|j| src.data()[r * d + j] + add[j]).collect();
            assert_close(row, &expect, 1e-12);
        }
    }
}

#[test]
fn spatiotemporal_block_symmetries() {
    let m = Model64::new(tiny(), 3).unwrap();
    let (a, b) = (randn(&[2, 16, 8], 6), randn(&[2, 16, 8], 7));
    let run = |x: &Tensor<f64>, y: &Tensor<f64>| {
        let mut t = Tape::inference();
        let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
        let (o1, o2) = m.spatiotemporal_block(&mut t, "mid", xv, yv).unwrap();
        (t.value(o1).clone(), t.value(o2).clone())
    };
    let (p, q) = run(&a, &b);
    let (q2, p2) = run(&b, &a);
    assert_eq!((p, q), (p2, q2));
    let (s1, s2) = run(&a, &a);
    assert_eq!(s1, s2);
}

#[test]
fn spatiotemporal_block_matches_direct_formula() {
    let m = Model64::new(tiny(), 4).unwrap();
    let mut m = m;
    // A 4-wide site: rebuild the mid block weights at width 4.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, rng: &mut rng };
    init.norm("x.st.ln", 4).unwrap();
    init.attention("x.st.attn", 4, 4).unwrap();
    for (_, v) in store.iter_mut() {
        *v = Tensor::randn(v.shape(), &mut rng);
    }
    for (k, v) in store.iter() {
        m.params.insert(k.clone(), v.clone()).unwrap();
    }
    let (a, b) = (randn(&[1, 2, 4], 8), randn(&[1, 2, 4], 9));
    let mut t = Tape::inference();
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let (o1, o2) = m.spatiotemporal_block(&mut t, "x", av, bv).unwrap();
    let p = &m.params;
    let (g, be) = (w(p, "x.st.ln.g"), w(p, "x.st.ln.b"));
    let (na, nb) = (reference_ln(a.data(), 4, &g, &be), reference_ln(b.data(), 4, &g, &be));
    let da = reference_mha(p, "x.st.attn", &na, 2, &nb, 2, 4, 4, 2);
    let db = reference_mha(p, "x.st.attn", &nb, 2, &na, 2, 4, 4, 2);
    let ea: Vec<f64> = a.data().iter().zip(&da).map(|(x, y)| x + y).collect();
    let eb: Vec<f64> = b.data().iter().zip(&db).map(|(x, y)| x + y).collect();
    assert_close(t.value(o1).data(), &ea, 1e-5);
    assert_close(t.value(o2).data(), &eb, 1e-5);
}

#[test]
fn pose_pyramid_shapes_and_sensitivity() {
    let cfg = DenoiserConfig {
        size: 32,
        channel_mult: vec![1, 2, 4],
        ..tiny()
    };
    for seed in 0..10 {
        let m = Model64::new(cfg.clone(), seed).unwrap();
        let mut t = Tape::inference();
        let zero = t.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let z1 = m.encode_pose(&mut t, zero).unwrap();
        let z2 = m.encode_pose(&mut t, zero).unwrap();
        assert_eq!(z1.len(), 3);
        for (l, (&a, &b)) in z1.iter().zip(&z2).enumerate() {
            assert_eq!(t.shape(a), [1, cfg.level_channels(l), 32 >> l, 32 >> l]);
            assert!(t.value(a).all_finite());
            assert_eq!(t.value(a), t.value(b));
        }
        let s1 = t.constant(poses(&cfg, 1, 100 + seed));
        let s2 = t.constant(poses(&cfg, 1, 200 + seed));
        let f1 = m.encode_pose(&mut t, s1).unwrap();
        let f2 = m.encode_pose(&mut t, s2).unwrap();
        for (&a, &b) in f1.iter().zip(&f2) {
            assert!(t.value(a).max_abs_diff(t.value(b)) > 0.0);
        }
    }
}

#[test]
fn appearance_tokens() {
    let cfg = tiny();
    let m = Model64::new(cfg.clone(), 9).unwrap();
    let mut t = Tape::inference();
    let n1 = m.encode_appearance(&mut t, &Condition::Null, 3).unwrap().unwrap();
    let n2 = m.encode_appearance(&mut t, &Condition::Null, 3).unwrap().unwrap();
    assert_eq!(t.shape(n1), [3, 1, cfg.token_dim()]);
    assert_eq!(t.value(n1), t.value(n2));
    assert!(m.encode_appearance(&mut t, &Condition::Absent, 3).unwrap().is_none());

    let c1 = Condition::Image(frames(&cfg, 1, 1));
    let c2 = Condition::Image(frames(&cfg, 1, 2));
    let a1 = m.encode_appearance(&mut t, &c1, 2).unwrap().unwrap();
    let a2 = m.encode_appearance(&mut t, &c2, 2).unwrap().unwrap();
    assert_eq!(t.shape(a1), [2, cfg.token_count(), cfg.token_dim()]);
    assert_eq!(cfg.token_count(), 16);
    assert!(t.value(a1).max_abs_diff(t.value(a2)) > 0.0);
    let bad = Condition::Image(Tensor::zeros(&[1, 3, 8, 8]));
    assert!(m.encode_appearance(&mut t, &bad, 1).is_err());
}

#[test]
fn default_config_has_sixteen_tokens() {
    let cfg = DenoiserConfig::default();
    assert_eq!(cfg.token_count(), 16);
    assert_eq!(cfg.levels(), 3);
}

#[test]
fn mixed_condition_uses_null_rows() {
    let cfg = tiny();
    let m = Model64::new(cfg.clone(), 9).unwrap();
    let imgs = frames(&cfg, 2, 3);
    let mut t = Tape::inference();
    let mixed = Condition::Mixed {
        images: imgs.clone(),
        null: vec![true, false],
    };
    let tok = m.encode_appearance(&mut t, &mixed, 2).unwrap().unwrap();
    let img = m.encode_appearance(&mut t, &Condition::Image(imgs), 2).unwrap().unwrap();
    let d = cfg.token_dim();
    let l = cfg.token_count();
    let got = t.value(tok).data();
    let null = m.params.get("ea.null").unwrap().data();
    for r in 0..l {
        assert_eq!(&got[r * d..(r + 1) * d], null);
    }
    assert_eq!(&got[l * d..], &t.value(img).data()[l * d..]);
}

fn run_pair(m: &Model64, ya: &Tensor<f64>, yb: &Tensor<f64>, sa: &Tensor<f64>, sb: &Tensor<f64>, c: &Condition<f64>, dir: Direction) -> (Tensor<f64>, Tensor<f64>) {
    m.predict(ya, yb, sa, sb, 0.7, c, dir).unwrap()
}

#[test]
fn denoise_pair_contract() {
    let cfg = tiny();
    let m = Model64::new(cfg.clone(), 0).unwrap();
    let sched = NoiseSchedule::new(1000, 10.0, -10.0).unwrap();
    let (ya, yb) = (frames(&cfg, 2, 1), frames(&cfg, 2, 2));
    let (sa, sb) = (poses(&cfg, 2, 3), poses(&cfg, 2, 4));
    let c = Condition::Image(frames(&cfg, 1, 5));
    let (a, b) = m.denoise_pair(&ya, &yb, 500, &sa, &sb, &c, Direction::Forward, &sched).unwrap();
    assert_eq!(a.shape(), ya.shape());
    assert_eq!(b.shape(), yb.shape());
    assert!(a.all_finite() && b.all_finite());
    assert!(m.denoise_pair(&ya, &yb, 0, &sa, &sb, &c, Direction::Forward, &sched).is_err());
    assert!(m.denoise_pair(&ya, &yb, 1001, &sa, &sb, &c, Direction::Forward, &sched).is_err());
    let small = Tensor::zeros(&[2, 3, 8, 8]);
    assert!(m.denoise_pair(&small, &small, 5, &sa, &sb, &c, Direction::Forward, &sched).is_err());
}

#[test]
fn direction_embedding_changes_output() {
    let cfg = tiny();
    for seed in 0..10 {
        let m = Model64::new(cfg.clone(), seed).unwrap();
        assert_ne!(m.params.get("dir.f"), m.params.get("dir.b"));
        let y = frames(&cfg, 1, seed);
        let s = poses(&cfg, 1, seed + 50);
        let c = Condition::Null;
        let (f, _) = run_pair(&m, &y, &y, &s, &s, &c, Direction::Forward);
        let (b, _) = run_pair(&m, &y, &y, &s, &s, &c, Direction::Backward);
        assert!(f.max_abs_diff(&b) > 1e-9, "seed {seed}");
    }
}

#[test]
fn swapped_streams_with_flipped_direction_swap_outputs() {
    let cfg = tiny();
    let m = Model64::new(cfg.clone(), 7).unwrap();
    let (ya, yb) = (frames(&cfg, 2, 1), frames(&cfg, 2, 2));
    let (sa, sb) = (poses(&cfg, 2, 3), poses(&cfg, 2, 4));
    for c in [Condition::Null, Condition::Absent, Condition::Image(frames(&cfg, 1, 9))] {
        let (a, b) = run_pair(&m, &ya, &yb, &sa, &sb, &c, Direction::Forward);
        let (b2, a2) = run_pair(&m, &yb, &ya, &sb, &sa, &c, Direction::Backward);
        assert!(a.max_abs_diff(&a2) < 1e-12);
        assert!(b.max_abs_diff(&b2) < 1e-12);
    }
}

#[test]
fn parameters_do_not_depend_on_sequence_length() {
    let cfg = tiny();
    let m = Model64::new(cfg.clone(), 0).unwrap();
    // Every parameter shape is a function of the config alone; a batch of
    // any size goes through the same weights.
    let again = Model64::new(cfg.clone(), 1).unwrap();
    assert_eq!(m.params.specs(), again.params.specs());
    for n in [1, 3] {
        let y = frames(&cfg, n, 0);
        let s = poses(&cfg, n, 1);
        let (a, _) = run_pair(&m, &y, &y, &s, &s, &Condition::Null, Direction::Forward);
        assert_eq!(a.batch(), n);
    }
    assert!(m.params.names().all(|name| !name.contains("frame") && !name.contains("time")));
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = tiny();
    for seed in 0..3 {
        let m = Model64::new(cfg.clone(), seed).unwrap();
        let mut t = Tape::new();
        let input_y = t.constant(frames(&cfg, 2, seed + 1));
        let input_yb = t.constant(frames(&cfg, 2, seed + 2));
        let sa = t.constant(poses(&cfg, 2, seed + 3));
        let sb = t.constant(poses(&cfg, 2, seed + 4));
        let cond = Condition::Mixed {
            images: frames(&cfg, 2, seed + 5),
            null: vec![false, true],
        };
        let lambdas = [1.5, -2.0];
        let (a, b) = m
            .forward_pair(
                &mut t,
                &PairInput {
                    y_a: input_y,
                    y_b: input_yb,
                    s_a: sa,
                    s_b: sb,
                    lambdas: &lambdas,
                    cond: &cond,
                    direction: Direction::Forward,
                },
            )
            .unwrap();
        let target = t.constant(frames(&cfg, 2, seed + 6));
        let la = t.mse(a, target).unwrap();
        let lb = t.mse(b, target).unwrap();
        let loss = t.add(la, lb).unwrap();
        let grads = backprop_gradients(loss, &m.params, t).unwrap();
        for (name, g) in &grads {
            assert!(g.sq_norm() > 0.0, "seed {seed}: no gradient for {name}");
        }
    }
}
