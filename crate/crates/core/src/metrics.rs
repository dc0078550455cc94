//! SSIM, temporal consistency and drift over frame sequences.
//!
//! Frames are `[C, H, W]` (or `[1, C, H, W]`) in `[-1, 1]`; sequences are
//! `[T, C, H, W]`. Everything is computed in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = (0..SSIM_WINDOW).map(|k| g[k] * x[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(i + k) * wo + j]).sum();
        }
    }
    out
}

fn frame_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape("ssim", format!("expected a single frame, got {s:?}"))),
    }
}

/// Mean SSIM of two frames, averaged over channels.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (c, h, w) = frame_dims(x)?;
    if frame_dims(y)? != (c, h, w) {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("frames must be at least {SSIM_WINDOW} pixels")));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = h * w;
    let to01 = |v: &T| (v.f64() + 1.0) / 2.0;
    let mut total = 0.0;
    for ch in 0..c {
        let a: Vec<f64> = x.data()[ch * plane..(ch + 1) * plane].iter().map(to01).collect();
        let b: Vec<f64> = y.data()[ch * plane..(ch + 1) * plane].iter().map(to01).collect();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
        let [ma, mb, saa, sbb, sab] = [&a, &b, &aa, &bb, &ab].map(|v| filter_valid(v, h, w, &g));
        let n = ma.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / c as f64)
}

/// `(1 - ssim) / 2`.
pub fn dssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    Ok((1.0 - ssim(x, y)?) / 2.0)
}

fn check_pair<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, op: &'static str) -> Result<usize> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    if pred.shape().len() != 4 || pred.batch() < 2 {
        return Err(Error::shape(op, format!("need [T>=2, C, H, W], got {:?}", pred.shape())));
    }
    Ok(pred.batch())
}

fn frame<T: Scalar>(s: &Tensor<T>, t: usize) -> Tensor<T> {
    s.slice_batch(t, 1).expect("index checked")
}

/// Mean over `t` of `|dssim(pred_t, pred_{t-1}) - dssim(gt_t, gt_{t-1})|`.
pub fn temporal_consistency<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let n = check_pair(pred, gt, "temporal_consistency")?;
    let mut acc = 0.0;
    for t in 1..n {
        let dp = dssim(&frame(pred, t), &frame(pred, t - 1))?;
        let dg = dssim(&frame(gt, t), &frame(gt, t - 1))?;
        acc += (dp - dg).abs();
    }
    Ok(acc / (n - 1) as f64)
}

/// Least-squares slope of `values` against their index.
pub fn ls_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = values.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, v) in values.iter().enumerate() {
        let dx = i as f64 - mx;
        num += dx * (v - my);
        den += dx * dx;
    }
    num / den
}

/// Per-frame SSIM against ground truth and its least-squares slope.
pub fn drift_profile<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(Vec<f64>, f64)> {
    let n = check_pair(pred, gt, "drift_profile")?;
    let per_frame = (0..n)
        .map(|t| ssim(&frame(pred, t), &frame(gt, t)))
        .collect::<Result<Vec<_>>>()?;
    let slope = ls_slope(&per_frame);
    Ok((per_frame, slope))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub id: usize,
    pub ssim: Vec<f64>,
    pub ssim_mean: f64,
    pub tconsist: f64,
    pub drift_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ssim_mean: f64,
    pub tconsist_mean: f64,
    pub drift_slope: f64,
    /// Mean SSIM at each frame index across sequences.
    pub per_frame_ssim: Vec<f64>,
    pub per_sequence: Vec<SequenceReport>,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Score predicted sequences against ground truth, pairwise by position.
pub fn evaluate<T: Scalar>(pred: &[Tensor<T>], gt: &[Tensor<T>], config: serde_json::Value) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::Dataset(format!(
            "sequence count mismatch: {} predicted vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut per_sequence = Vec::with_capacity(pred.len());
    for (id, (p, g)) in pred.iter().zip(gt).enumerate() {
        let (ssim, drift_slope) = drift_profile(p, g)?;
        let tconsist = temporal_consistency(p, g)?;
        per_sequence.push(SequenceReport {
            id,
            ssim_mean: ssim.iter().sum::<f64>() / ssim.len() as f64,
            ssim,
            tconsist,
            drift_slope,
        });
    }
    let k = per_sequence.len() as f64;
    let mean = |f: fn(&SequenceReport) -> f64| per_sequence.iter().map(f).sum::<f64>() / k;
    let frames = per_sequence.iter().map(|s| s.ssim.len()).min().unwrap_or(0);
    let per_frame_ssim = (0..frames)
        .map(|t| per_sequence.iter().map(|s| s.ssim[t]).sum::<f64>() / k)
        .collect();
    Ok(EvalReport {
        ssim_mean: mean(|s| s.ssim_mean),
        tconsist_mean: mean(|s| s.tconsist),
        drift_slope: mean(|s| s.drift_slope),
        per_frame_ssim,
        per_sequence,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_frame(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct per-window SSIM with explicit 2-D Gaussian weights.
    fn ssim_reference(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
        let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let s2 = 2.0 * 1.5f64 * 1.5;
        let mut win = vec![0.0; 121];
        for i in 0..11 {
            for j in 0..11 {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                win[i * 11 + j] = (-(di * di + dj * dj) / s2).exp();
            }
        }
        let z: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= z);
        let (c1, c2) = (0.0001, 0.0009);
        let mut total = 0.0;
        for ch in 0..c {
            let px = |t: &Tensor<f64>, i: usize, j: usize| (t.data()[(ch * h + i) * w + j] + 1.0) / 2.0;
            let mut acc = 0.0;
            let mut n = 0;
            for i in 0..=h - 11 {
                for j in 0..=w - 11 {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for a in 0..11 {
                        for b in 0..11 {
                            mx += win[a * 11 + b] * px(x, i + a, j + b);
                            my += win[a * 11 + b] * px(y, i + a, j + b);
                        }
                    }
                    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                    for a in 0..11 {
                        for b in 0..11 {
                            let (dx, dy) = (px(x, i + a, j + b) - mx, px(y, i + a, j + b) - my);
                            vx += win[a * 11 + b] * dx * dx;
                            vy += win[a * 11 + b] * dy * dy;
                            cxy += win[a * 11 + b] * dx * dy;
                        }
                    }
                    acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
            total += acc / n as f64;
        }
        total / c as f64
    }

    #[test]
    fn self_similarity_and_symmetry() {
        let x = rand_frame(1, 3, 16, 16);
        let y = rand_frame(2, 3, 16, 16);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        let (a, b) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!((a - b).abs() < 1e-9);
        assert!(a < 1.0);
    }

    #[test]
    fn matches_direct_formula() {
        for seed in 0..3 {
            let x = rand_frame(seed, 2, 16, 16);
            let y = x.zip_map(&rand_frame(seed + 10, 2, 16, 16), "mix", |a, b| 0.7 * a + 0.3 * b).unwrap();
            let got = ssim(&x, &y).unwrap();
            let want = ssim_reference(&x, &y);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn shape_errors() {
        let x = rand_frame(1, 3, 16, 16);
        assert!(ssim(&x, &rand_frame(1, 3, 16, 15)).is_err());
        assert!(ssim(&rand_frame(1, 1, 8, 8), &rand_frame(2, 1, 8, 8)).is_err());
    }

    fn seq(frames: &[Tensor<f64>]) -> Tensor<f64> {
        let u: Vec<_> = frames.iter().map(|f| f.unsqueeze0()).collect();
        Tensor::concat_batch(&u.iter().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn temporal_consistency_cases() {
        let fs: Vec<_> = (0..4).map(|i| rand_frame(i, 1, 12, 12)).collect();
        let gt = seq(&fs);
        assert_eq!(temporal_consistency(&gt, &gt).unwrap(), 0.0);
        let static_p = seq(&[fs[0].clone(), fs[0].clone(), fs[0].clone()]);
        let static_g = seq(&[fs[1].clone(), fs[1].clone(), fs[1].clone()]);
        assert!(temporal_consistency(&static_p, &static_g).unwrap().abs() < 1e-12);

        // T = 3 by hand from pairwise SSIMs.
        let pred = seq(&[fs[0].clone(), fs[1].clone(), fs[2].clone()]);
        let gt3 = seq(&[fs[0].clone(), fs[0].clone(), fs[3].clone()]);
        let d = |a: &Tensor<f64>, b: &Tensor<f64>| (1.0 - ssim(a, b).unwrap()) / 2.0;
        let want = ((d(&fs[1], &fs[0]) - d(&fs[0], &fs[0])).abs() + (d(&fs[2], &fs[1]) - d(&fs[3], &fs[0])).abs()) / 2.0;
        assert!((temporal_consistency(&pred, &gt3).unwrap() - want).abs() < 1e-6);

        let rev = |s: &Tensor<f64>| seq(&(0..s.batch()).rev().map(|t| s.slice_batch(t, 1).unwrap().reshape(&s.shape()[1..]).unwrap()).collect::<Vec<_>>());
        let a = temporal_consistency(&pred, &gt3).unwrap();
        let b = temporal_consistency(&rev(&pred), &rev(&gt3)).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(temporal_consistency(&pred, &gt).is_err());
    }

    #[test]
    fn drift_cases() {
        let fs: Vec<_> = (0..6).map(|i| rand_frame(i, 1, 12, 12)).collect();
        let gt = seq(&fs);
        let (per, slope) = drift_profile(&gt, &gt).unwrap();
        assert!(per.iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(slope.abs() < 1e-9);

        let two = seq(&fs[..2]);
        let pred2 = seq(&[fs[2].clone(), fs[1].clone()]);
        let (per, slope) = drift_profile(&pred2, &two).unwrap();
        assert!((slope - (per[1] - per[0])).abs() < 1e-15);

        // Mixing in noise at a rate growing with t gives a negative slope that
        // steepens with the rate.
        let noise: Vec<_> = (0..6).map(|i| rand_frame(100 + i, 1, 12, 12)).collect();
        let degrade = |rate: f64| {
            let frames: Vec<_> = (0..6)
                .map(|t| {
                    let a = (rate * t as f64).min(1.0);
                    fs[t].zip_map(&noise[t], "mix", |g, n| (1.0 - a) * g + a * n).unwrap()
                })
                .collect();
            drift_profile(&seq(&frames), &gt).unwrap().1
        };
        let slopes: Vec<f64> = [0.02, 0.05, 0.1].iter().map(|&r| degrade(r)).collect();
        assert!(slopes[0] < 0.0);
        assert!(slopes[1] < slopes[0] && slopes[2] < slopes[1], "{slopes:?}");
        assert!((ls_slope(&[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn report_aggregates_and_round_trips() {
        let fs: Vec<_> = (0..3).map(|i| rand_frame(i, 1, 12, 12)).collect();
        let gt = seq(&fs);
        let pred = seq(&[fs[0].clone(), fs[2].clone(), fs[1].clone()]);
        let r = evaluate(&[gt.clone(), pred.clone()], &[gt.clone(), gt.clone()], serde_json::json!({"k": 50})).unwrap();
        assert_eq!(r.per_sequence.len(), 2);
        assert!((r.ssim_mean - (1.0 + r.per_sequence[1].ssim_mean) / 2.0).abs() < 1e-12);
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let err = evaluate(&[gt.clone()], &[gt.clone(), gt], serde_json::Value::Null).unwrap_err();
        assert!(err.to_string().contains("1 predicted vs 2"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn frame_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            let n = 2 * 12 * 12;
            (prop::collection::vec(-1.0f64..1.0, n), prop::collection::vec(-1.0f64..1.0, n))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn ssim_bounded_symmetric((a, b) in frame_strategy()) {
                let x = Tensor::new(&[2, 12, 12], a).unwrap();
                let y = Tensor::new(&[2, 12, 12], b).unwrap();
                let s = ssim(&x, &y).unwrap();
                prop_assert!(s <= 1.0 + 1e-9 && s >= -1.0 - 1e-9);
                prop_assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-9);
                prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn tconsist_non_negative((a, b) in frame_strategy()) {
                let x = Tensor::new(&[2, 1, 12, 12], a).unwrap();
                let y = Tensor::new(&[2, 1, 12, 12], b).unwrap();
                prop_assert!(temporal_consistency(&x, &y).unwrap() >= 0.0);
            }
        }
    }
}
