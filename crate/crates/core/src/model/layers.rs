//! Parameterised building blocks. Each block has an `init_*` that registers
//! its parameters under a name prefix and a forward function that reads them
//! back by the same names.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Std of attention projections and FiLM heads.
pub(crate) const PROJ_STD: f64 = 0.02;

pub(crate) struct Init<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    pub fn tensor(&mut self, name: String, shape: &[usize], std: f64) -> Result<()> {
        let t = truncated_normal(shape, std, self.rng);
        self.store.insert(name, t)
    }

    pub fn fill(&mut self, name: String, shape: &[usize], value: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, T::of(value)))
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        let std = (1.0 / (c_in * k * k) as f64).sqrt();
        self.tensor(format!("{name}.w"), &[c_out, c_in, k, k], std)?;
        self.fill(format!("{name}.b"), &[c_out], 0.0)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, std: Option<f64>) -> Result<()> {
        let std = std.unwrap_or_else(|| (1.0 / d_in as f64).sqrt());
        self.tensor(format!("{name}.w"), &[d_in, d_out], std)?;
        self.fill(format!("{name}.b"), &[d_out], 0.0)
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.fill(format!("{name}.g"), &[c], 1.0)?;
        self.fill(format!("{name}.b"), &[c], 0.0)
    }

    pub fn attention(&mut self, name: &str, d: usize, d_kv: usize) -> Result<()> {
        self.linear(&format!("{name}.q"), d, d, Some(PROJ_STD))?;
        self.linear(&format!("{name}.k"), d_kv, d, Some(PROJ_STD))?;
        self.linear(&format!("{name}.v"), d_kv, d, Some(PROJ_STD))?;
        self.linear(&format!("{name}.o"), d, d, Some(PROJ_STD))
    }

    pub fn resblock(&mut self, name: &str, c_in: usize, c_out: usize, cond_dim: usize) -> Result<()> {
        self.norm(&format!("{name}.n1"), c_in)?;
        self.conv(&format!("{name}.c1"), c_in, c_out, 3)?;
        self.norm(&format!("{name}.n2"), c_out)?;
        self.linear(&format!("{name}.scale"), cond_dim, c_out, Some(PROJ_STD))?;
        self.linear(&format!("{name}.shift"), cond_dim, c_out, Some(PROJ_STD))?;
        self.conv(&format!("{name}.c2"), c_out, c_out, 3)?;
        if c_in != c_out {
            self.conv(&format!("{name}.skip"), c_in, c_out, 1)?;
        }
        Ok(())
    }
}

pub(crate) fn conv<T: Scalar>(
    t: &mut Tape<T>,
    p: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = t.param(p, &format!("{name}.w"))?;
    let b = t.param(p, &format!("{name}.b"))?;
    t.conv2d(x, w, Some(b), stride)
}

pub(crate) fn linear<T: Scalar>(t: &mut Tape<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = t.param(p, &format!("{name}.w"))?;
    let b = t.param(p, &format!("{name}.b"))?;
    t.linear(x, w, Some(b))
}

pub(crate) fn group_norm<T: Scalar>(
    t: &mut Tape<T>,
    p: &ParamStore<T>,
    name: &str,
    x: Var,
    groups: usize,
) -> Result<Var> {
    let g = t.param(p, &format!("{name}.g"))?;
    let b = t.param(p, &format!("{name}.b"))?;
    t.group_norm(x, g, b, groups)
}

pub(crate) fn layer_norm<T: Scalar>(t: &mut Tape<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let g = t.param(p, &format!("{name}.g"))?;
    let b = t.param(p, &format!("{name}.b"))?;
    t.layer_norm(x, g, b)
}

/// Scaled dot-product attention of `q: [N,Lq,D]` over `k, v: [N,Lk,Dk]` with
/// learned input/output projections.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar>(
    t: &mut Tape<T>,
    p: &ParamStore<T>,
    name: &str,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let d = *t.shape(q).last().expect("non-empty");
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("attention width {d} not divisible by {heads} heads")));
    }
    if t.shape(k) != t.shape(v) || t.shape(k)[0] != t.shape(q)[0] {
        return Err(Error::shape(
            "multi_head_attention",
            format!("q {:?}, k {:?}, v {:?}", t.shape(q), t.shape(k), t.shape(v)),
        ));
    }
    let q = linear(t, p, &format!("{name}.q"), q)?;
    let k = linear(t, p, &format!("{name}.k"), k)?;
    let v = linear(t, p, &format!("{name}.v"), v)?;
    let (q, k, v) = (t.split_heads(q, heads)?, t.split_heads(k, heads)?, t.split_heads(v, heads)?);
    let scores = t.bmm(q, k, true)?;
    let scores = t.scale(scores, T::of(1.0 / ((d / heads) as f64).sqrt()))?;
    let att = t.softmax(scores)?;
    let o = t.bmm(att, v, false)?;
    let o = t.merge_heads(o, heads)?;
    linear(t, p, &format!("{name}.o"), o)
}

/// `(1 + scale)·h + shift` per channel.
pub fn film_modulate<T: Scalar>(t: &mut Tape<T>, h: Var, scale: Var, shift: Var) -> Result<Var> {
    t.film(h, scale, shift)
}

/// Residual block with an optional additive spatial pose feature and FiLM
/// conditioning on `cond: [N, E]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn resblock<T: Scalar>(
    t: &mut Tape<T>,
    p: &ParamStore<T>,
    name: &str,
    x: Var,
    pose: Option<Var>,
    cond: Var,
    groups: usize,
) -> Result<Var> {
    let h = group_norm(t, p, &format!("{name}.n1"), x, groups)?;
    let h = t.silu(h)?;
    let mut h = conv(t, p, &format!("{name}.c1"), h, 1)?;
    if let Some(pose) = pose {
        h = t.add(h, pose)?;
    }
    let h = group_norm(t, p, &format!("{name}.n2"), h, groups)?;
    let scale = linear(t, p, &format!("{name}.scale"), cond)?;
    let shift = linear(t, p, &format!("{name}.shift"), cond)?;
    let h = film_modulate(t, h, scale, shift)?;
    let h = t.silu(h)?;
    let h = conv(t, p, &format!("{name}.c2"), h, 1)?;
    let skip = if p.contains(&format!("{name}.skip.w")) {
        conv(t, p, &format!("{name}.skip"), x, 1)?
    } else {
        x
    };
    t.add(h, skip)
}

/// Sinusoidal features of a scalar, log-spaced frequencies from 1/16 to 16.
pub(crate) fn sinusoidal<T: Scalar>(values: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            let f = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
            (16f64.ln() * (2.0 * f - 1.0)).exp()
        })
        .collect();
    Tensor::from_fn(&[values.len(), dim], |idx| {
        let (n, j) = (idx / dim, idx % dim);
        if j < half {
            T::of((values[n] * freqs[j]).sin())
        } else if j < 2 * half {
            T::of((values[n] * freqs[j - half]).cos())
        } else {
            T::zero()
        }
    })
}
