use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn world_at(state: PendulumState) -> PendulumWorld {
    let mut w = PendulumWorld::new(3, 0, 32, 32);
    w.state = state;
    w
}

#[test]
fn rest_start_stays_unsheared_and_matches_condition() {
    let mut w = world_at(REST);
    let states = simulate(&mut w, 8).unwrap();
    let s = render_states(&w, &states, 3, 0);
    for t in 0..8 {
        assert_eq!(states[t].shear(), 0.0);
        assert_eq!(s.frame(t).into_data(), s.condition.data().to_vec());
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_sequence(4, 17, 6, 32, 32).unwrap();
    let b = generate_sequence(4, 17, 6, 32, 32).unwrap();
    assert_eq!(a, b);
    let c = generate_sequence(4, 18, 6, 32, 32).unwrap();
    assert_ne!(a.frames, c.frames);
}

#[test]
fn value_ranges() {
    let s = generate_sequence(1, 2, 16, 32, 32).unwrap();
    assert!(s.frames.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    assert!(s.poses.data().iter().all(|x| (0.0..=1.0).contains(x)));
    let plane = 32 * 32;
    for t in 0..16 {
        let ch0 = &s.poses.data()[t * 3 * plane..t * 3 * plane + plane];
        for &v in ch0 {
            assert!([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0].iter().any(|&k| (v - k as f32).abs() == 0.0), "{v}");
        }
        assert!(ch0.iter().any(|&v| v == 1.0));
    }
}

#[test]
fn rejects_degenerate_dims() {
    assert!(generate_sequence(0, 0, 1, 32, 32).is_err());
    assert!(generate_sequence(0, 0, 4, 8, 8).is_err());
    assert!(generate_sequence(0, 0, 4, 32, 16).is_err());
}

#[test]
fn background_is_zero_in_every_pose_channel() {
    let g = Geometry::new(32, 32, 3);
    let st = PendulumState { theta: 0.4, omega: 1.0 };
    let pose = pose_for_state(&g, &st);
    for i in 0..32 {
        for j in 0..32 {
            let on = g.arm_coords(st.theta, j as f64 + 0.5, i as f64 + 0.5).is_some();
            let vals: Vec<f32> = (0..3).map(|c| pose.data()[(c * 32 + i) * 32 + j]).collect();
            if !on {
                assert_eq!(vals, [0.0, 0.0, 0.0]);
            } else {
                assert!(vals[0] > 0.0);
            }
        }
    }
}

/// Point-in-rotated-rectangle via the signs of edge cross products.
fn inside_arm_oracle(g: &Geometry, theta: f64, x: f64, y: f64) -> bool {
    let (s, c) = theta.sin_cos();
    let (px, py) = g.pivot;
    let hw = g.arm_half_width;
    let l = g.arm_length;
    // Corners in order around the rectangle.
    let corner = |a: f64, b: f64| (px + a * s + b * c, py + a * c - b * s);
    let pts = [corner(0.0, -hw), corner(l, -hw), corner(l, hw), corner(0.0, hw)];
    let mut sign = 0.0;
    for k in 0..4 {
        let (x0, y0) = pts[k];
        let (x1, y1) = pts[(k + 1) % 4];
        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        if cross == 0.0 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

#[test]
fn rasterisation_matches_rectangle_oracle() {
    let g = Geometry::new(32, 32, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hits = 0;
    for _ in 0..1000 {
        let theta = rng.gen_range(-1.0..1.0);
        let (i, j) = (rng.gen_range(0..32), rng.gen_range(0..32));
        let pose = pose_for_state(&g, &PendulumState { theta, omega: 0.0 });
        let on = pose.data()[i * 32 + j] > 0.0;
        assert_eq!(on, inside_arm_oracle(&g, theta, j as f64 + 0.5, i as f64 + 0.5), "theta {theta} pixel ({i},{j})");
        hits += on as usize;
    }
    assert!(hits > 10);
}

#[test]
fn pose_ignores_velocity_but_frames_do_not() {
    let w = world_at(REST);
    let g = &w.geometry;
    for theta in [-0.5, 0.0, 0.3] {
        let a = PendulumState { theta, omega: 2.0 };
        let b = PendulumState { theta, omega: -2.0 };
        assert_eq!(pose_for_state(g, &a), pose_for_state(g, &b));
        let (fa, fb) = (w.render(&a), w.render(&b));
        let l2 = fa.zip_map(&fb, "l2", |x, y| (x - y) * (x - y)).unwrap().sum().sqrt();
        assert!(l2 > 2.0, "theta {theta}: frame distance {l2}");
    }
}

#[test]
fn mirrored_trajectories_are_ambiguous() {
    // Mirror a trajectory about its turning point: same angles, opposite velocity.
    let mut w = world_at(PendulumState { theta: 0.6, omega: 0.0 });
    let states = simulate(&mut w, 6).unwrap();
    for s in &states[1..] {
        let mirror = PendulumState { theta: s.theta, omega: -s.omega };
        assert_eq!(pose_for_state(&w.geometry, s), pose_for_state(&w.geometry, &mirror));
        assert!(w.render(s).max_abs_diff(&w.render(&mirror)) > 0.5);
    }
}

#[test]
fn consecutive_frames_change_smoothly() {
    for motion in 0..8 {
        let mut w = PendulumWorld::new(1, motion, 32, 32);
        let states = simulate(&mut w, 16).unwrap();
        let s = render_states(&w, &states, 1, motion);
        let g = w.geometry;
        let r_max = {
            let far = g.arm_length + g.flag_height;
            (far * far + g.flag_width * g.flag_width).sqrt()
        };
        let n = (3 * 32 * 32) as f64;
        for t in 1..16 {
            let dtheta = (states[t].theta - states[t - 1].theta).abs();
            let dshear = (states[t].shear() - states[t - 1].shear()).abs();
            let area = r_max * r_max * dtheta + g.flag_width * g.flag_width * dshear;
            let bound = 2.0 * area * 3.0 / n + 1e-6;
            let mad = s.frame(t).zip_map(&s.frame(t - 1), "d", |a, b| (a - b).abs()).unwrap().sum() as f64 / n;
            assert!(mad <= bound, "motion {motion} t {t}: {mad} > {bound}");
        }
    }
}

#[test]
fn angle_stays_within_pi() {
    for m in 0..20 {
        let mut w = PendulumWorld::new(0, m, 32, 32);
        for s in simulate(&mut w, 64).unwrap() {
            assert!(s.theta.abs() <= std::f64::consts::PI);
            assert!(s.shear().abs() <= SHEAR_MAX);
        }
    }
}

#[test]
fn container_round_trip_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_split(Split::Train, 3, 2, 4, 16, 9).unwrap();
    let m = write_dataset(&samples, dir.path()).unwrap();
    assert_eq!(m.count, 3);
    let (m2, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(m, m2);
    assert_eq!(back, samples);
    let len = std::fs::metadata(dir.path().join(&m.sequences[0].file)).unwrap().len();
    assert_eq!(len as usize, 28 + 4 * (4 * 3 * 16 * 16 + 4 * 3 * 16 * 16 + 3 * 16 * 16));
    assert_eq!(len as usize, container_len(4, 3, 16, 16, 3));
}

#[test]
fn corrupted_containers_are_rejected_with_offsets() {
    let s = generate_sequence(0, 0, 3, 16, 16).unwrap();
    let bytes = encode_sequence(&s);
    let p = std::path::Path::new("x.btds");
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode_sequence(&bad, p), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_sequence(&bad, p), Err(Error::Format { offset: 4, .. })));
    let err = decode_sequence(&bytes[..bytes.len() - 3], p).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    assert!(decode_sequence(&bytes[..10], p).is_err());
}

#[test]
fn split_seeds_cycle_identities() {
    let ids: Vec<u64> = (0..10).map(|i| split_seeds(Split::Train, i, 4, 0).0).collect();
    assert_eq!(ids, [0, 1, 2, 3, 0, 1, 2, 3, 0, 1]);
    assert_ne!(split_seeds(Split::Train, 0, 4, 0).1, split_seeds(Split::Test, 0, 4, 0).1);
}
