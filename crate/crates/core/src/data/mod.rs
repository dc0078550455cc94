//! Procedural pendulum-with-flag sequences.
//!
//! A striped flag hangs off the tip of a swinging arm and shears with the
//! angular velocity. Pose maps cover the arm only, so a pose map fixes the
//! angle but not the sign or size of the shear.

mod btds;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use btds::{
    container_len, decode_sequence, encode_sequence, read_dataset, read_manifest, read_sequence,
    write_dataset, write_sequence, Manifest, ManifestEntry, BTDS_MAGIC, BTDS_VERSION, MANIFEST_FILE,
};
pub(crate) use btds::write_atomic;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_FRAMES: usize = 16;
pub const DEFAULT_SIZE: usize = 32;
pub const DEFAULT_PARTS: usize = 3;
pub const FRAME_CHANNELS: usize = 3;

/// Frames per simulated second.
pub const FPS: f64 = 12.0;
const GRAVITY: f64 = 9.81;
const ARM_METRES: f64 = 1.0;
const DAMPING: f64 = 0.3;
const SUBSTEPS: usize = 16;
/// Shear per unit angular velocity (seconds).
pub const SHEAR_GAIN: f64 = 0.1;
pub const SHEAR_MAX: f64 = 0.25;

const BACKGROUND: [f64; 3] = [-0.7, -0.7, -0.7];

/// One rendered sequence with its pose maps and condition image.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    /// `[T, C, H, W]` in `[-1, 1]`.
    pub frames: Tensor<f32>,
    /// `[T, P, H, W]` in `[0, 1]`, zero off the arm.
    pub poses: Tensor<f32>,
    /// `[C, H, W]`, the identity at rest.
    pub condition: Tensor<f32>,
    pub identity_seed: u64,
    pub motion_seed: u64,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W, P]` of this sample.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3], self.poses.shape()[1])
    }

    pub fn frame(&self, t: usize) -> Tensor<f32> {
        self.frames.slice_batch(t, 1).expect("frame index in range")
    }

    pub fn pose(&self, t: usize) -> Tensor<f32> {
        self.poses.slice_batch(t, 1).expect("frame index in range")
    }

    /// The condition image as a batch of one.
    pub fn condition_batch(&self) -> Tensor<f32> {
        self.condition.unsqueeze0()
    }
}

/// Look of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub arm: [f64; 3],
    pub stripe_a: [f64; 3],
    pub stripe_b: [f64; 3],
    /// Stripes across the flag width.
    pub stripes: f64,
}

impl Appearance {
    pub fn from_seed(identity_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(identity_seed ^ 0x1d3e_5a7c_9b2f_4e61);
        let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.gen_range(-0.9..0.9));
        let arm = color(&mut rng);
        let stripe_a = color(&mut rng);
        let mut stripe_b = stripe_a;
        for c in &mut stripe_b {
            *c = if *c > 0.0 { *c - 1.0 } else { *c + 1.0 };
        }
        let stripes = rng.gen_range(2..=4) as f64;
        Appearance {
            arm,
            stripe_a,
            stripe_b,
            stripes,
        }
    }
}

/// Pendulum state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumState {
    /// Angle from the downward vertical, radians.
    pub theta: f64,
    /// Angular velocity, radians per second.
    pub omega: f64,
}

impl PendulumState {
    pub fn shear(&self) -> f64 {
        (SHEAR_GAIN * self.omega).clamp(-SHEAR_MAX, SHEAR_MAX)
    }
}

/// Canvas geometry in pixels, derived from the frame size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    pub parts: usize,
    pub pivot: (f64, f64),
    pub arm_length: f64,
    pub arm_half_width: f64,
    pub flag_width: f64,
    pub flag_height: f64,
}

impl Geometry {
    pub fn new(height: usize, width: usize, parts: usize) -> Self {
        let s = height as f64;
        Geometry {
            width,
            height,
            parts,
            pivot: (width as f64 / 2.0, 0.12 * s),
            arm_length: 0.5 * s,
            arm_half_width: 0.06 * s,
            flag_width: 0.3 * s,
            flag_height: 0.25 * s,
        }
    }

    fn axes(theta: f64) -> ((f64, f64), (f64, f64)) {
        // Image y points down; theta = 0 hangs straight down.
        let d = (theta.sin(), theta.cos());
        let n = (theta.cos(), -theta.sin());
        (d, n)
    }

    /// Arm coordinates `(along, across)` of point `(x, y)`, or `None` off the arm.
    pub fn arm_coords(&self, theta: f64, x: f64, y: f64) -> Option<(f64, f64)> {
        let (d, n) = Self::axes(theta);
        let (rx, ry) = (x - self.pivot.0, y - self.pivot.1);
        let a = rx * d.0 + ry * d.1;
        let b = rx * n.0 + ry * n.1;
        (a >= 0.0 && a < self.arm_length && b.abs() < self.arm_half_width).then_some((a, b))
    }

    /// Flag coordinate across its width in `[0, 1)`, or `None` off the flag.
    pub fn flag_coord(&self, state: &PendulumState, x: f64, y: f64) -> Option<f64> {
        let (d, n) = Self::axes(state.theta);
        let tip = (
            self.pivot.0 + self.arm_length * d.0,
            self.pivot.1 + self.arm_length * d.1,
        );
        let (rx, ry) = (x - tip.0, y - tip.1);
        let across = rx * n.0 + ry * n.1;
        let along = rx * d.0 + ry * d.1 - state.shear() * across;
        (across >= 0.0 && across < self.flag_width && along.abs() < self.flag_height / 2.0)
            .then_some(across / self.flag_width)
    }
}

/// Deterministic damped pendulum with a fixed canvas and identity.
#[derive(Clone, Debug)]
pub struct PendulumWorld {
    pub geometry: Geometry,
    pub appearance: Appearance,
    pub state: PendulumState,
}

impl PendulumWorld {
    pub fn new(identity_seed: u64, motion_seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(motion_seed ^ 0x6a09_e667_f3bc_c908);
        let state = PendulumState {
            theta: rng.gen_range(-0.8..0.8),
            omega: rng.gen_range(-2.5..2.5),
        };
        PendulumWorld {
            geometry: Geometry::new(height, width, DEFAULT_PARTS),
            appearance: Appearance::from_seed(identity_seed),
            state,
        }
    }

    /// Advance one frame (semi-implicit Euler with substeps).
    pub fn step(&mut self) {
        let w2 = GRAVITY / ARM_METRES;
        let dt = 1.0 / (FPS * SUBSTEPS as f64);
        let PendulumState { mut theta, mut omega } = self.state;
        for _ in 0..SUBSTEPS {
            omega += dt * (-w2 * theta.sin() - DAMPING * omega);
            theta += dt * omega;
        }
        if theta > std::f64::consts::PI {
            theta -= 2.0 * std::f64::consts::PI;
        } else if theta < -std::f64::consts::PI {
            theta += 2.0 * std::f64::consts::PI;
        }
        self.state = PendulumState { theta, omega };
    }

    pub fn render(&self, state: &PendulumState) -> Tensor<f32> {
        render_frame(&self.geometry, &self.appearance, state)
    }
}

fn color_at(g: &Geometry, look: &Appearance, state: &PendulumState, x: f64, y: f64) -> [f64; 3] {
    if let Some(u) = g.flag_coord(state, x, y) {
        if (u * look.stripes).floor() as i64 % 2 == 0 {
            look.stripe_a
        } else {
            look.stripe_b
        }
    } else if g.arm_coords(state.theta, x, y).is_some() {
        look.arm
    } else {
        BACKGROUND
    }
}

/// `[C, H, W]` frame with 2x2 supersampling.
pub fn render_frame(g: &Geometry, look: &Appearance, state: &PendulumState) -> Tensor<f32> {
    let (h, w) = (g.height, g.width);
    let mut out = vec![0.0f32; FRAME_CHANNELS * h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..2 {
                for sx in 0..2 {
                    let x = j as f64 + (sx as f64 + 0.5) / 2.0;
                    let y = i as f64 + (sy as f64 + 0.5) / 2.0;
                    let c = color_at(g, look, state, x, y);
                    for k in 0..3 {
                        acc[k] += c[k] / 4.0;
                    }
                }
            }
            for k in 0..3 {
                out[(k * h + i) * w + j] = acc[k] as f32;
            }
        }
    }
    Tensor::new(&[FRAME_CHANNELS, h, w], out).expect("consistent shape")
}

/// `[P, H, W]` pose map of the arm at `theta`, sampled at pixel centres.
/// Channel 0 is `(part + 1) / P`, channels 1 and 2 are the part-local `(u, v)`.
pub fn pose_for_state(g: &Geometry, state: &PendulumState) -> Tensor<f32> {
    let (h, w) = (g.height, g.width);
    let mut out = vec![0.0f32; 3 * h * w];
    let parts = g.parts as f64;
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            if let Some((a, b)) = g.arm_coords(state.theta, x, y) {
                let pos = a / g.arm_length * parts;
                let part = pos.floor().min(parts - 1.0);
                let u = pos - part;
                let v = (b + g.arm_half_width) / (2.0 * g.arm_half_width);
                out[i * w + j] = ((part + 1.0) / parts) as f32;
                out[(h + i) * w + j] = u as f32;
                out[(2 * h + i) * w + j] = v as f32;
            }
        }
    }
    Tensor::new(&[3, h, w], out).expect("consistent shape")
}

/// The state at which condition images are rendered.
pub const REST: PendulumState = PendulumState {
    theta: 0.0,
    omega: 0.0,
};

/// Pose map of the rest state, i.e. of every condition image.
pub fn rest_pose(height: usize, width: usize) -> Tensor<f32> {
    pose_for_state(&Geometry::new(height, width, DEFAULT_PARTS), &REST)
}

pub fn generate_sequence(
    identity_seed: u64,
    motion_seed: u64,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<SequenceSample> {
    let mut world = PendulumWorld::new(identity_seed, motion_seed, height, width);
    let states = simulate(&mut world, frames)?;
    Ok(render_states(&world, &states, identity_seed, motion_seed))
}

/// Simulate `frames` states starting from the world's current state.
pub fn simulate(world: &mut PendulumWorld, frames: usize) -> Result<Vec<PendulumState>> {
    check_dims(frames, world.geometry.height, world.geometry.width)?;
    let mut states = Vec::with_capacity(frames);
    for t in 0..frames {
        if t > 0 {
            world.step();
        }
        states.push(world.state);
    }
    Ok(states)
}

/// Render given states with the world's identity.
pub fn render_states(world: &PendulumWorld, states: &[PendulumState], identity_seed: u64, motion_seed: u64) -> SequenceSample {
    let g = &world.geometry;
    let frames: Vec<_> = states.iter().map(|s| world.render(s)).collect();
    let poses: Vec<_> = states.iter().map(|s| pose_for_state(g, s)).collect();
    let stack = |v: &[Tensor<f32>]| {
        let refs: Vec<_> = v.iter().map(|t| t.unsqueeze0()).collect();
        let refs: Vec<_> = refs.iter().collect();
        Tensor::concat_batch(&refs).expect("equal shapes")
    };
    SequenceSample {
        frames: stack(&frames),
        poses: stack(&poses),
        condition: world.render(&REST),
        identity_seed,
        motion_seed,
    }
}

fn check_dims(frames: usize, height: usize, width: usize) -> Result<()> {
    if frames < 2 {
        return Err(Error::Dataset(format!("sequences need at least 2 frames, got {frames}")));
    }
    if height != width || height < 16 {
        return Err(Error::Dataset(format!("frames must be square and at least 16 pixels, got {height}x{width}")));
    }
    Ok(())
}

/// Seeds of the `i`-th training and test sequence for `identities` identities.
pub fn split_seeds(split: Split, i: usize, identities: usize, seed: u64) -> (u64, u64) {
    let identity = (i % identities.max(1)) as u64;
    let offset = match split {
        Split::Train => 0,
        Split::Test => 1 << 32,
    };
    (seed.wrapping_mul(1000) + identity, seed.wrapping_mul(1 << 40) + offset + i as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Generate `count` sequences of a split.
pub fn generate_split(
    split: Split,
    count: usize,
    identities: usize,
    frames: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<SequenceSample>> {
    (0..count)
        .map(|i| {
            let (id, motion) = split_seeds(split, i, identities, seed);
            generate_sequence(id, motion, frames, size, size)
        })
        .collect()
}

#[cfg(test)]
mod tests;
