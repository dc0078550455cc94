//! Log-SNR noise schedule and the closed-form diffusion steps built on it.
//!
//! Step `k` (1-based) carries a log-SNR value `λ(k)`. A single forward step
//! keeps `σ(λ(k))` of the signal variance and adds `σ(-λ(k))` of fresh noise,
//! so the cumulative signal fraction after `k` steps is
//! `ᾱ_k = Π_{i≤k} σ(λ(i))` with `ᾱ_0 = 1`.
//!
//! The cumulative product is kept in log space. With the default linear
//! ±10 schedule over 1000 steps `ᾱ_K` is far below the smallest `f64`, while
//! `log ᾱ_K` stays representable and strictly decreasing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_LAMBDA_MAX: f64 = 10.0;
pub const DEFAULT_LAMBDA_MIN: f64 = -10.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`, stable for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Parameters that fully determine a [`NoiseSchedule`]; this is what
/// configs and checkpoints store.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub lambda_max: f64,
    pub lambda_min: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: DEFAULT_STEPS,
            lambda_max: DEFAULT_LAMBDA_MAX,
            lambda_min: DEFAULT_LAMBDA_MIN,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.lambda_max, self.lambda_min)
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    lambdas: Vec<f64>,
    alphas: Vec<f64>,
    /// Index 0 is `ln ᾱ_0 = 0`.
    log_alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-in-λ schedule from `lambda_max` at `k = 1` to `lambda_min` at `k = K`.
    pub fn new(steps: usize, lambda_max: f64, lambda_min: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("step count must be positive".into()));
        }
        if !(lambda_max.is_finite() && lambda_min.is_finite()) || lambda_max <= lambda_min {
            return Err(Error::Schedule(format!(
                "need finite lambda_max > lambda_min, got {lambda_max} and {lambda_min}"
            )));
        }
        let lambdas: Vec<f64> = if steps == 1 {
            vec![lambda_max]
        } else {
            let span = lambda_max - lambda_min;
            (0..steps)
                .map(|i| lambda_max - span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alphas = lambdas.iter().map(|&l| sigmoid(l)).collect();
        let mut log_alpha_bars = Vec::with_capacity(steps + 1);
        log_alpha_bars.push(0.0);
        let mut acc = 0.0;
        for &l in &lambdas {
            acc += log_sigmoid(l);
            log_alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            params: ScheduleParams {
                steps,
                lambda_max,
                lambda_min,
            },
            lambdas,
            alphas,
            log_alpha_bars,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `ln ᾱ_k` for `k = 0..=K`.
    pub fn log_alpha_bars(&self) -> &[f64] {
        &self.log_alpha_bars
    }

    fn check_step(&self, k: usize, min: usize) -> Result<()> {
        if k < min || k > self.steps() {
            return Err(Error::StepOutOfRange {
                k,
                min,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn lambda(&self, k: usize) -> Result<f64> {
        self.check_step(k, 1)?;
        Ok(self.lambdas[k - 1])
    }

    pub fn alpha(&self, k: usize) -> Result<f64> {
        self.check_step(k, 1)?;
        Ok(self.alphas[k - 1])
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        self.check_step(k, 0)?;
        Ok(self.log_alpha_bars[k].exp())
    }

    /// Draw `y_k ~ q(y_k | y_0)` given the noise `eps`: `√ᾱ_k·y0 + √(1-ᾱ_k)·eps`.
    pub fn forward_marginal<T: Scalar>(
        &self,
        y0: &Tensor<T>,
        k: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_step(k, 0)?;
        y0.expect_same_shape(eps, "forward_marginal")?;
        if k == 0 {
            return Ok(y0.clone());
        }
        let ab = self.log_alpha_bars[k].exp();
        let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        y0.zip_map(eps, "forward_marginal", |y, e| a * y + b * e)
    }

    /// One forward step `q(y_k | y_{k-1})`: `√σ(λ_k)·y_prev + √σ(-λ_k)·eps`.
    pub fn per_step_transition<T: Scalar>(
        &self,
        y_prev: &Tensor<T>,
        k: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_step(k, 1)?;
        let l = self.lambdas[k - 1];
        let (a, b) = (T::of(sigmoid(l).sqrt()), T::of(sigmoid(-l).sqrt()));
        y_prev.zip_map(eps, "per_step_transition", |y, e| a * y + b * e)
    }

    /// Deterministic x0-parameterised update from level `k` to `k-1`.
    pub fn reverse_step<T: Scalar>(
        &self,
        y_k: &Tensor<T>,
        x0_hat: &Tensor<T>,
        k: usize,
    ) -> Result<Tensor<T>> {
        self.check_step(k, 1)?;
        ddim_update(
            y_k,
            x0_hat,
            self.log_alpha_bars[k].exp(),
            self.log_alpha_bars[k - 1].exp(),
        )
    }

    /// Evenly spaced subsequence of `k_sample` steps for inference.
    ///
    /// Step `j` of the result maps to training step `⌊j·K/k_sample⌋` and
    /// reuses that step's `λ` and `ᾱ`, so a model trained on the full
    /// schedule sees the same noise levels at test time.
    pub fn respaced(&self, k_sample: usize) -> Result<SamplingSchedule> {
        let k_total = self.steps();
        if k_sample == 0 || k_sample > k_total {
            return Err(Error::Schedule(format!(
                "sampling steps must be in 1..={k_total}, got {k_sample}"
            )));
        }
        let train_steps: Vec<usize> = (1..=k_sample).map(|j| j * k_total / k_sample).collect();
        let mut log_alpha_bars = vec![0.0];
        log_alpha_bars.extend(train_steps.iter().map(|&k| self.log_alpha_bars[k]));
        Ok(SamplingSchedule {
            lambdas: train_steps.iter().map(|&k| self.lambdas[k - 1]).collect(),
            train_steps,
            log_alpha_bars,
        })
    }
}

/// `x0_hat` is turned back into a noise estimate at level `ᾱ_k` and
/// re-composed at level `ᾱ_{k-1}`. With `ᾱ_{k-1} = 1` the result is `x0_hat`.
pub fn ddim_update<T: Scalar>(
    y_k: &Tensor<T>,
    x0_hat: &Tensor<T>,
    alpha_bar: f64,
    alpha_bar_prev: f64,
) -> Result<Tensor<T>> {
    y_k.expect_same_shape(x0_hat, "reverse_step")?;
    if !y_k.all_finite() || !x0_hat.all_finite() {
        return Err(Error::NonFinite {
            op: "reverse_step input".into(),
        });
    }
    if alpha_bar_prev == 1.0 {
        return Ok(x0_hat.clone());
    }
    let sa = alpha_bar.sqrt();
    let inv_sn = 1.0 / (1.0 - alpha_bar).sqrt();
    let (sp, snp) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    // y' = sp·x0 + snp·(y - sa·x0)/sn, folded into two coefficients.
    let cy = T::of(snp * inv_sn);
    let cx = T::of(sp - snp * sa * inv_sn);
    let out = y_k.zip_map(x0_hat, "reverse_step", |y, x| cy * y + cx * x)?;
    if !out.all_finite() {
        return Err(Error::NonFinite {
            op: "reverse_step".into(),
        });
    }
    Ok(out)
}

/// Inference-time view over a subset of a [`NoiseSchedule`]'s steps.
#[derive(Clone, Debug)]
pub struct SamplingSchedule {
    train_steps: Vec<usize>,
    lambdas: Vec<f64>,
    log_alpha_bars: Vec<f64>,
}

impl SamplingSchedule {
    pub fn steps(&self) -> usize {
        self.train_steps.len()
    }

    fn check(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.steps() {
            return Err(Error::StepOutOfRange {
                k: j,
                min: 1,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn train_step(&self, j: usize) -> Result<usize> {
        self.check(j)?;
        Ok(self.train_steps[j - 1])
    }

    pub fn lambda(&self, j: usize) -> Result<f64> {
        self.check(j)?;
        Ok(self.lambdas[j - 1])
    }

    pub fn alpha_bar(&self, j: usize) -> Result<f64> {
        if j > self.steps() {
            return Err(Error::StepOutOfRange {
                k: j,
                min: 0,
                max: self.steps(),
            });
        }
        Ok(self.log_alpha_bars[j].exp())
    }

    pub fn reverse_step<T: Scalar>(
        &self,
        y_k: &Tensor<T>,
        x0_hat: &Tensor<T>,
        j: usize,
    ) -> Result<Tensor<T>> {
        self.check(j)?;
        ddim_update(
            y_k,
            x0_hat,
            self.log_alpha_bars[j].exp(),
            self.log_alpha_bars[j - 1].exp(),
        )
    }
}
