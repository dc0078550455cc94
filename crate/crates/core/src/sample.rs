//! Bidirectional recursive sampling and the forward-only baseline.
//!
//! Every frame starts from unit noise at the top level. Each pass moves all
//! frames down one level; passes alternate direction, and within a pass a
//! frame is denoised together with its neighbour as it stood before the pass
//! (frame t-1 going forward, frame t+1 going backward).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Condition, DenoiserModel, Direction};
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, SamplingSchedule};
use crate::tensor::Tensor;

/// Neighbour of a frame that has none in the current direction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryPolicy {
    /// The frame is its own neighbour.
    #[default]
    Duplicate,
    /// The neighbour on the other side (frame 2 for frame 1 going forward).
    /// Falls back to `Duplicate` when T = 1.
    Mirror,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub k_sample: usize,
    pub first_direction: Direction,
    pub seed: u64,
    pub boundary: BoundaryPolicy,
    /// Denoise all frames of a pass in one batch instead of one at a time.
    pub batched: bool,
    /// Keep the latents after every pass in the trace.
    pub keep_latents: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k_sample: 50,
            first_direction: Direction::Forward,
            seed: 0,
            boundary: BoundaryPolicy::Duplicate,
            batched: false,
            keep_latents: false,
        }
    }
}

/// Noise level of the frames entering a pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Level {
    /// Step index in the sampling schedule, `1..=k_sample`.
    pub step: usize,
    pub lambda: f64,
    pub alpha_bar: f64,
}

/// A denoiser seen by the sampler: clean predictions for a batch of target
/// frames `y_a` given their neighbours `y_b`.
pub trait PairDenoiser<T: Scalar> {
    /// `[C, H, W]` of one frame.
    fn frame_shape(&self) -> Vec<usize>;

    #[allow(clippy::too_many_arguments)]
    fn denoise(
        &self,
        y_a: &Tensor<T>,
        y_b: &Tensor<T>,
        s_a: &Tensor<T>,
        s_b: &Tensor<T>,
        level: Level,
        cond: &Condition<T>,
        direction: Direction,
    ) -> Result<Tensor<T>>;
}

impl<T: Scalar> PairDenoiser<T> for DenoiserModel<T> {
    fn frame_shape(&self) -> Vec<usize> {
        vec![self.config.channels, self.config.size, self.config.size]
    }

    fn denoise(
        &self,
        y_a: &Tensor<T>,
        y_b: &Tensor<T>,
        s_a: &Tensor<T>,
        s_b: &Tensor<T>,
        level: Level,
        cond: &Condition<T>,
        direction: Direction,
    ) -> Result<Tensor<T>> {
        Ok(self.predict(y_a, y_b, s_a, s_b, level.lambda, cond, direction)?.0)
    }
}

/// Posterior mean of `y0 ~ N(mean, std²)` per pixel given `y_k`, ignoring
/// the neighbour, pose and condition.
#[derive(Clone, Debug)]
pub struct GaussianOracle<T> {
    /// `[C, H, W]`.
    pub mean: Tensor<T>,
    pub std: f64,
}

impl<T: Scalar> PairDenoiser<T> for GaussianOracle<T> {
    fn frame_shape(&self) -> Vec<usize> {
        self.mean.shape().to_vec()
    }

    fn denoise(
        &self,
        y_a: &Tensor<T>,
        _: &Tensor<T>,
        _: &Tensor<T>,
        _: &Tensor<T>,
        level: Level,
        _: &Condition<T>,
        _: Direction,
    ) -> Result<Tensor<T>> {
        let ab = level.alpha_bar;
        let s2 = self.std * self.std;
        let den = ab * s2 + 1.0 - ab;
        let (cy, cm) = (ab.sqrt() * s2 / den, (1.0 - ab) / den);
        let plane = self.mean.len();
        if y_a.row_len() != plane {
            return Err(Error::shape("GaussianOracle", format!("{:?} vs mean {:?}", y_a.shape(), self.mean.shape())));
        }
        let m = self.mean.data();
        Ok(Tensor::from_fn(y_a.shape(), |i| {
            T::of(cy * y_a.data()[i].f64() + cm * m[i % plane].f64())
        }))
    }
}

/// Instrumentation of one sampling run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleTrace<T> {
    /// Direction of every pass, in order.
    pub passes: Vec<Direction>,
    /// Updates applied to each frame.
    pub counters: Vec<usize>,
    /// Largest spread of frame levels seen after any single frame update.
    pub max_level_gap: usize,
    /// Neighbours consumed at a level other than the pass's starting level.
    pub stale_neighbours: usize,
    /// `[T, C, H, W]` after each pass, if requested.
    pub latents: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct SampleOutput<T> {
    /// `[T, C, H, W]`.
    pub frames: Tensor<T>,
    pub trace: SampleTrace<T>,
}

/// Alternating forward/backward passes from unit noise to clean frames.
pub fn bidirectional_recursive_sample<T: Scalar, D: PairDenoiser<T>>(
    denoiser: &D,
    sched: &NoiseSchedule,
    poses: &Tensor<T>,
    cond: &Condition<T>,
    config: &SamplerConfig,
) -> Result<SampleOutput<T>> {
    let first = config.first_direction;
    run(denoiser, sched, poses, cond, config, |p| if p % 2 == 0 { first } else { first.flip() })
}

/// Forward passes only, with the forward direction embedding throughout.
pub fn unidirectional_sample<T: Scalar, D: PairDenoiser<T>>(
    denoiser: &D,
    sched: &NoiseSchedule,
    poses: &Tensor<T>,
    cond: &Condition<T>,
    config: &SamplerConfig,
) -> Result<SampleOutput<T>> {
    run(denoiser, sched, poses, cond, config, |_| Direction::Forward)
}

fn run<T: Scalar, D: PairDenoiser<T>>(
    denoiser: &D,
    sched: &NoiseSchedule,
    poses: &Tensor<T>,
    cond: &Condition<T>,
    config: &SamplerConfig,
    direction_of: impl Fn(usize) -> Direction,
) -> Result<SampleOutput<T>> {
    let ss = sched.respaced(config.k_sample)?;
    let frame = denoiser.frame_shape();
    let n = match *poses.shape() {
        [t, _, h, w] if t >= 1 && h == frame[1] && w == frame[2] => t,
        ref s => return Err(Error::shape("sample", format!("poses {s:?} for frames {frame:?}"))),
    };
    let mut shape = vec![n];
    shape.extend_from_slice(&frame);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut latents = Tensor::randn(&shape, &mut rng);
    let mut trace = SampleTrace {
        counters: vec![0; n],
        ..SampleTrace::default()
    };
    let mut levels = vec![ss.steps(); n];
    for p in 0..ss.steps() {
        let direction = direction_of(p);
        let step = ss.steps() - p;
        latents = pass(denoiser, &ss, &latents, poses, cond, config, direction, step, &mut levels, &mut trace)?;
        trace.passes.push(direction);
        if config.keep_latents {
            trace.latents.push(latents.clone());
        }
    }
    Ok(SampleOutput { frames: latents, trace })
}

fn neighbour(t: usize, n: usize, direction: Direction, policy: BoundaryPolicy) -> usize {
    let (prev, next) = match direction {
        Direction::Forward => (t.checked_sub(1), (t + 1 < n).then_some(t + 1)),
        Direction::Backward => ((t + 1 < n).then_some(t + 1), t.checked_sub(1)),
    };
    match (prev, policy) {
        (Some(i), _) => i,
        (None, BoundaryPolicy::Mirror) => next.unwrap_or(t),
        (None, BoundaryPolicy::Duplicate) => t,
    }
}

fn gather<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let rows = idx.iter().map(|&i| x.slice_batch(i, 1)).collect::<Result<Vec<_>>>()?;
    Tensor::concat_batch(&rows.iter().collect::<Vec<_>>())
}

/// One directional pass from `step` to `step - 1`. Predictions are computed
/// from the pre-pass snapshot; updates are then applied frame by frame in
/// pass order so the trace sees the sequential schedule.
#[allow(clippy::too_many_arguments)]
fn pass<T: Scalar, D: PairDenoiser<T>>(
    denoiser: &D,
    ss: &SamplingSchedule,
    snapshot: &Tensor<T>,
    poses: &Tensor<T>,
    cond: &Condition<T>,
    config: &SamplerConfig,
    direction: Direction,
    step: usize,
    levels: &mut [usize],
    trace: &mut SampleTrace<T>,
) -> Result<Tensor<T>> {
    let n = snapshot.batch();
    let level = Level {
        step,
        lambda: ss.lambda(step)?,
        alpha_bar: ss.alpha_bar(step)?,
    };
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..n).collect(),
        Direction::Backward => (0..n).rev().collect(),
    };
    let nb: Vec<usize> = (0..n).map(|t| neighbour(t, n, direction, config.boundary)).collect();
    for &i in &nb {
        if levels[i] != step {
            trace.stale_neighbours += 1;
        }
    }

    let x0 = if config.batched {
        let y_b = gather(snapshot, &nb)?;
        let s_b = gather(poses, &nb)?;
        denoiser.denoise(snapshot, &y_b, poses, &s_b, level, cond, direction)?
    } else {
        let mut rows = vec![None; n];
        for &t in &order {
            let pick = |x: &Tensor<T>, i: usize| x.slice_batch(i, 1);
            let out = denoiser.denoise(
                &pick(snapshot, t)?,
                &pick(snapshot, nb[t])?,
                &pick(poses, t)?,
                &pick(poses, nb[t])?,
                level,
                cond,
                direction,
            )?;
            rows[t] = Some(out);
        }
        let rows: Vec<Tensor<T>> = rows.into_iter().map(|r| r.expect("every frame predicted")).collect();
        Tensor::concat_batch(&rows.iter().collect::<Vec<_>>())?
    };
    if x0.shape() != snapshot.shape() {
        return Err(Error::shape("sample", format!("denoiser returned {:?}", x0.shape())));
    }

    let mut out = snapshot.clone();
    let row = snapshot.row_len();
    for &t in &order {
        let range = t * row..(t + 1) * row;
        let bad = Error::NonFiniteLatent {
            k: ss.train_step(step)?,
            t: t + 1,
        };
        if !x0.data()[range.clone()].iter().all(|v| v.is_finite()) {
            return Err(bad);
        }
        let y = snapshot.slice_batch(t, 1)?;
        let x = x0.slice_batch(t, 1)?;
        let next = ss.reverse_step(&y, &x, step).map_err(|_| bad)?;
        out.data_mut()[range].copy_from_slice(next.data());
        levels[t] = step - 1;
        trace.counters[t] += 1;
        let (lo, hi) = levels.iter().fold((usize::MAX, 0), |(lo, hi), &l| (lo.min(l), hi.max(l)));
        trace.max_level_gap = trace.max_level_gap.max(hi - lo);
    }
    Ok(out)
}
