//! Bidirectional vs forward-only comparison at matched budgets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{Condition, DenoiserConfig, Model32};
use crate::sample::{bidirectional_recursive_sample, unidirectional_sample, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::train::{Objective, StepRecord, TaskMode, TrainConfig, Trainer};

/// The appearance input a task mode samples with.
pub fn condition_for(mode: TaskMode, s: &SequenceSample) -> Condition<f32> {
    match mode {
        TaskMode::SingleImage => Condition::Image(s.condition_batch()),
        TaskMode::PersonSpecific => Condition::Absent,
        TaskMode::Unconditional => Condition::Null,
    }
}

/// Sample every sequence's poses; sequence `i` uses sampler seed `seed + i`.
pub fn sample_sequences(
    model: &Model32,
    sched: &NoiseSchedule,
    sequences: &[SequenceSample],
    mode: TaskMode,
    objective: Objective,
    sampler: &SamplerConfig,
) -> Result<Vec<Tensor<f32>>> {
    sequences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = SamplerConfig {
                seed: sampler.seed.wrapping_add(i as u64),
                ..sampler.clone()
            };
            let cond = condition_for(mode, s);
            let out = match objective {
                Objective::Bidirectional => bidirectional_recursive_sample(model, sched, &s.poses, &cond, &cfg)?,
                Objective::Unidirectional => unidirectional_sample(model, sched, &s.poses, &cond, &cfg)?,
            };
            Ok(out.frames)
        })
        .collect()
}

/// Denoiser size used for the comparison on one CPU core.
pub fn desk_model() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 16,
        embed_dim: 64,
        heads: 2,
        ..DenoiserConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Shared by both variants; `objective` and `seed` are overridden.
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2],
            train: TrainConfig {
                checkpoint_every: 0,
                model: desk_model(),
                ..TrainConfig::default()
            },
            sampler: SamplerConfig {
                batched: true,
                ..SamplerConfig::default()
            },
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: AblationConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub objective: Objective,
    pub ssim_mean: f64,
    pub tconsist_mean: f64,
    pub drift_slope: f64,
    /// Mean loss over the last 10% of steps.
    pub final_loss: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub bidirectional: VariantResult,
    pub unidirectional: VariantResult,
    /// Both variants trained on the same `[sequence, t, k]` stream.
    pub same_pairs: bool,
}

impl SeedResult {
    /// Strict wins of the bidirectional variant on (ssim, tconsist, drift).
    pub fn wins(&self) -> [bool; 3] {
        let (b, u) = (&self.bidirectional, &self.unidirectional);
        [
            b.ssim_mean > u.ssim_mean,
            b.tconsist_mean < u.tconsist_mean,
            b.drift_slope > u.drift_slope,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub seeds: Vec<SeedResult>,
}

pub const METRIC_NAMES: [&str; 3] = ["ssim_mean", "tconsist_mean", "drift_slope"];

impl AblationReport {
    /// Seeds in which bidirectional strictly wins, per metric.
    pub fn win_counts(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for s in &self.seeds {
            for (o, w) in out.iter_mut().zip(s.wins()) {
                *o += w as usize;
            }
        }
        out
    }

    /// Metrics won in every seed.
    pub fn metrics_won_everywhere(&self) -> usize {
        self.win_counts().iter().filter(|&&c| c == self.seeds.len()).count()
    }

    fn mean(&self, f: impl Fn(&SeedResult) -> f64) -> f64 {
        self.seeds.iter().map(f).sum::<f64>() / self.seeds.len().max(1) as f64
    }

    /// Two-row table of seed-averaged metrics, then the per-seed rows.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| model | ssim_mean | tconsist_mean | drift_slope |");
        let _ = writeln!(s, "|---|---|---|---|");
        let _ = writeln!(
            s,
            "| bidirectional | {:.4} | {:.5} | {:+.5} |",
            self.mean(|r| r.bidirectional.ssim_mean),
            self.mean(|r| r.bidirectional.tconsist_mean),
            self.mean(|r| r.bidirectional.drift_slope)
        );
        let _ = writeln!(
            s,
            "| unidirectional | {:.4} | {:.5} | {:+.5} |",
            self.mean(|r| r.unidirectional.ssim_mean),
            self.mean(|r| r.unidirectional.tconsist_mean),
            self.mean(|r| r.unidirectional.drift_slope)
        );
        let _ = writeln!(s, "\n| seed | variant | ssim_mean | tconsist_mean | drift_slope | final loss |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for r in &self.seeds {
            for v in [&r.bidirectional, &r.unidirectional] {
                let name = match v.objective {
                    Objective::Bidirectional => "bi",
                    Objective::Unidirectional => "uni",
                };
                let _ = writeln!(
                    s,
                    "| {} | {name} | {:.4} | {:.5} | {:+.5} | {:.4} |",
                    r.seed, v.ssim_mean, v.tconsist_mean, v.drift_slope, v.final_loss
                );
            }
        }
        let wins = self.win_counts();
        let _ = writeln!(
            s,
            "\nbidirectional strictly better in {}/{} seeds ({}), {}/{} ({}), {}/{} ({})",
            wins[0],
            self.seeds.len(),
            METRIC_NAMES[0],
            wins[1],
            self.seeds.len(),
            METRIC_NAMES[1],
            wins[2],
            self.seeds.len(),
            METRIC_NAMES[2]
        );
        s
    }
}

fn tail_mean(history: &[StepRecord]) -> f64 {
    let n = (history.len() / 10).max(1).min(history.len());
    history[history.len() - n..].iter().map(|r| r.loss).sum::<f64>() / n.max(1) as f64
}

/// Train one variant and score it on `test`.
pub fn run_variant(
    cfg: &AblationConfig,
    seed: u64,
    objective: Objective,
    train: &[SequenceSample],
    test: &[SequenceSample],
) -> Result<(VariantResult, Vec<StepRecord>, Model32)> {
    let tc = TrainConfig {
        seed,
        objective,
        ..cfg.train.clone()
    };
    let mut trainer = Trainer::new(tc, train.to_vec())?;
    let history = trainer.run(cfg.train.steps, None, false)?;
    let sched = trainer.schedule().clone();
    let sampler = SamplerConfig {
        seed: seed.wrapping_mul(1_000_003),
        ..cfg.sampler.clone()
    };
    let preds = sample_sequences(&trainer.model, &sched, test, cfg.train.mode, objective, &sampler)?;
    let gt: Vec<Tensor<f32>> = test.iter().map(|s| s.frames.clone()).collect();
    let echo = serde_json::json!({ "seed": seed, "objective": objective, "train": &trainer.config, "sampler": sampler });
    let report = evaluate(&preds, &gt, echo)?;
    Ok((
        VariantResult {
            objective,
            ssim_mean: report.ssim_mean,
            tconsist_mean: report.tconsist_mean,
            drift_slope: report.drift_slope,
            final_loss: tail_mean(&history),
            report,
        },
        history,
        trainer.model,
    ))
}

/// Both variants for every seed. `progress` receives one line per finished
/// variant.
pub fn run_ablation(
    cfg: &AblationConfig,
    train: &[SequenceSample],
    test: &[SequenceSample],
    mut progress: impl FnMut(&str),
) -> Result<AblationReport> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::Dataset("ablation needs a test set".into()));
    }
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (bi, bi_hist, _) = run_variant(cfg, seed, Objective::Bidirectional, train, test)?;
        progress(&format!(
            "seed {seed} bidirectional: ssim {:.4} tconsist {:.5} drift {:+.5} loss {:.4}",
            bi.ssim_mean, bi.tconsist_mean, bi.drift_slope, bi.final_loss
        ));
        let (uni, uni_hist, _) = run_variant(cfg, seed, Objective::Unidirectional, train, test)?;
        progress(&format!(
            "seed {seed} unidirectional: ssim {:.4} tconsist {:.5} drift {:+.5} loss {:.4}",
            uni.ssim_mean, uni.tconsist_mean, uni.drift_slope, uni.final_loss
        ));
        let same_pairs = bi_hist.len() == uni_hist.len() && bi_hist.iter().zip(&uni_hist).all(|(a, b)| a.pairs == b.pairs);
        seeds.push(SeedResult {
            seed,
            bidirectional: bi,
            unidirectional: uni,
            same_pairs,
        });
    }
    Ok(AblationReport {
        config: cfg.clone(),
        seeds,
    })
}
