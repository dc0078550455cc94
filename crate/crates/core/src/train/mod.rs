//! Pair sampling, the paired denoising loss, the training loop and
//! single-image fine-tuning.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backprop_gradients, Tape, Var};
use crate::checkpoint::Checkpoint32;
use crate::data::{read_dataset, SequenceSample};
use crate::error::{Error, Result};
use crate::model::{Condition, DenoiserConfig, DenoiserModel, Direction, Model32, PairInput};
use crate::optim::{adam_update, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::tensor::Tensor;


/// Learning rate for short runs on the toy data.
pub const DESK_LR: f64 = 3e-4;
pub const REFERENCE_LR: f64 = 1e-5;
pub const FINE_TUNE_ITERATIONS: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Condition on the sequence's rest-pose image.
    SingleImage,
    /// No appearance input at all.
    PersonSpecific,
    /// The null appearance token in place of c.
    Unconditional,
}

impl FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_image" | "single-image" => Ok(TaskMode::SingleImage),
            "person_specific" | "person-specific" | "person" => Ok(TaskMode::PersonSpecific),
            "unconditional" => Ok(TaskMode::Unconditional),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Frame t given t-1 and frame t-1 given t.
    #[default]
    Bidirectional,
    /// The first term only.
    Unidirectional,
}

impl Objective {
    /// Weights of the (t | t-1) and (t-1 | t) terms.
    pub fn weights(self) -> [f64; 2] {
        match self {
            Objective::Bidirectional => [0.5, 0.5],
            Objective::Unidirectional => [1.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TaskMode,
    pub objective: Objective,
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    /// Save every this many steps; 0 saves at the end only.
    pub checkpoint_every: u64,
    /// Chance of swapping c for the null token (single_image mode only).
    pub cond_dropout: f64,
    pub schedule: ScheduleParams,
    pub model: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TaskMode::SingleImage,
            objective: Objective::Bidirectional,
            lr: DESK_LR,
            batch: 4,
            steps: 2000,
            seed: 0,
            data: PathBuf::from("data/train"),
            checkpoint: PathBuf::from("model.btck"),
            checkpoint_every: 500,
            cond_dropout: 0.0,
            schedule: ScheduleParams::default(),
            model: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    /// K = 1000 and lr = 1e-5.
    pub fn reference() -> Self {
        TrainConfig {
            lr: REFERENCE_LR,
            schedule: ScheduleParams::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad(format!("cond_dropout must be in [0, 1], got {}", self.cond_dropout));
        }
        if self.cond_dropout > 0.0 && self.mode != TaskMode::SingleImage {
            return bad(format!("cond_dropout only applies to single_image mode, not {:?}", self.mode));
        }
        self.schedule.build()?;
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Where the loss history of a checkpoint lives: `x.btck` -> `x.loss.jsonl`.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.jsonl")
}

/// Appearance input of one training pair.
#[derive(Clone, Debug, PartialEq)]
pub enum PairCondition<T> {
    Absent,
    Null,
    /// `[C, H, W]`.
    Image(Tensor<T>),
}

/// Two adjacent frames of one sequence with their poses, one shared step
/// `k` and the noise for each frame. Frames are `[C, H, W]`, poses `[P, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair<T> {
    pub sequence: usize,
    /// 1-based index of the later frame.
    pub t: usize,
    pub k: usize,
    pub y_t: Tensor<T>,
    pub y_tm1: Tensor<T>,
    pub s_t: Tensor<T>,
    pub s_tm1: Tensor<T>,
    pub eps_t: Tensor<T>,
    pub eps_tm1: Tensor<T>,
    pub cond: PairCondition<T>,
}

impl<T: Scalar> TrainingPair<T> {
    pub fn cast<U: Scalar>(&self) -> TrainingPair<U> {
        TrainingPair {
            sequence: self.sequence,
            t: self.t,
            k: self.k,
            y_t: self.y_t.cast(),
            y_tm1: self.y_tm1.cast(),
            s_t: self.s_t.cast(),
            s_tm1: self.s_tm1.cast(),
            eps_t: self.eps_t.cast(),
            eps_tm1: self.eps_tm1.cast(),
            cond: match &self.cond {
                PairCondition::Absent => PairCondition::Absent,
                PairCondition::Null => PairCondition::Null,
                PairCondition::Image(c) => PairCondition::Image(c.cast()),
            },
        }
    }
}

fn squeeze0<T: Scalar>(x: Tensor<T>) -> Tensor<T> {
    let shape = x.shape()[1..].to_vec();
    x.reshape(&shape).expect("same length")
}

/// Draw one pair: sequence uniform, t uniform over [2, T], k uniform over
/// [1, K], fresh unit noise for both frames.
pub fn sample_training_pair<R: Rng + ?Sized>(
    dataset: &[SequenceSample],
    rng: &mut R,
    config: &TrainConfig,
) -> Result<TrainingPair<f32>> {
    draw_pair(dataset, rng, config, false)
}

fn draw_pair<R: Rng + ?Sized>(
    dataset: &[SequenceSample],
    rng: &mut R,
    config: &TrainConfig,
    self_pair: bool,
) -> Result<TrainingPair<f32>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("no sequences to train on".into()));
    }
    let min_len = if self_pair { 1 } else { 2 };
    if let Some((i, s)) = dataset.iter().enumerate().find(|(_, s)| s.len() < min_len) {
        return Err(Error::Dataset(format!(
            "sequence {i} has {} frame(s); training pairs need T >= 2",
            s.len()
        )));
    }
    let sequence = rng.gen_range(0..dataset.len());
    let s = &dataset[sequence];
    let t = if s.len() >= 2 { rng.gen_range(2..=s.len()) } else { 1 };
    // 0-based rows; a one-frame sequence pairs its frame with itself.
    let (a, b) = (t - 1, t.saturating_sub(2));
    let k = rng.gen_range(1..=config.schedule.steps);
    let cond = match config.mode {
        TaskMode::SingleImage if config.cond_dropout > 0.0 && rng.gen::<f64>() < config.cond_dropout => {
            PairCondition::Null
        }
        TaskMode::SingleImage => PairCondition::Image(s.condition.clone()),
        TaskMode::Unconditional => PairCondition::Null,
        TaskMode::PersonSpecific => PairCondition::Absent,
    };
    let y_t = squeeze0(s.frame(a));
    let eps_t = Tensor::randn(y_t.shape(), rng);
    let eps_tm1 = Tensor::randn(y_t.shape(), rng);
    Ok(TrainingPair {
        sequence,
        t,
        k,
        y_tm1: squeeze0(s.frame(b)),
        s_t: squeeze0(s.pose(a)),
        s_tm1: squeeze0(s.pose(b)),
        y_t,
        eps_t,
        eps_tm1,
        cond,
    })
}

/// What the loss needs from a denoiser.
pub trait Trainable<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn forward_pair(&self, tape: &mut Tape<T>, input: &PairInput<'_, T>) -> Result<(Var, Var)>;
}

impl<T: Scalar> Trainable<T> for DenoiserModel<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn forward_pair(&self, tape: &mut Tape<T>, input: &PairInput<'_, T>) -> Result<(Var, Var)> {
        DenoiserModel::forward_pair(self, tape, input)
    }
}

/// A recorded loss ready for [`backprop_gradients`].
pub struct LossGraph<T: Scalar> {
    pub tape: Tape<T>,
    pub loss: Var,
    /// MSE of the (t | t-1) and (t-1 | t) predictions.
    pub terms: [Var; 2],
}

impl<T: Scalar> LossGraph<T> {
    pub fn value(&self) -> f64 {
        self.tape.value(self.loss).data()[0].f64()
    }

    pub fn term_values(&self) -> [f64; 2] {
        self.terms.map(|v| self.tape.value(v).data()[0].f64())
    }
}

fn stack<'a, T: Scalar + 'a>(items: impl Iterator<Item = &'a Tensor<T>>) -> Result<Tensor<T>> {
    let rows: Vec<Tensor<T>> = items.map(|x| x.unsqueeze0()).collect();
    Tensor::concat_batch(&rows.iter().collect::<Vec<_>>())
}

fn batch_condition<T: Scalar>(pairs: &[TrainingPair<T>]) -> Result<Condition<T>> {
    let absent = pairs.iter().filter(|p| p.cond == PairCondition::Absent).count();
    if absent == pairs.len() {
        return Ok(Condition::Absent);
    }
    if absent > 0 {
        return Err(Error::Config("a batch cannot mix absent and present conditions".into()));
    }
    let images: Vec<&Tensor<T>> = pairs
        .iter()
        .filter_map(|p| match &p.cond {
            PairCondition::Image(c) => Some(c),
            _ => None,
        })
        .collect();
    if images.is_empty() {
        return Ok(Condition::Null);
    }
    if images.len() == pairs.len() {
        return Ok(Condition::Image(stack(images.into_iter())?));
    }
    let blank = Tensor::zeros(images[0].shape());
    let rows = pairs.iter().map(|p| match &p.cond {
        PairCondition::Image(c) => c,
        _ => &blank,
    });
    Ok(Condition::Mixed {
        images: stack(rows)?,
        null: pairs.iter().map(|p| p.cond == PairCondition::Null).collect(),
    })
}

/// The paired objective: both frames noised at the shared k, one joint
/// forward, the mean of the two per-element MSE terms.
pub fn btdm_loss<T: Scalar, M: Trainable<T>>(
    pairs: &[TrainingPair<T>],
    model: &M,
    sched: &NoiseSchedule,
    objective: Objective,
) -> Result<LossGraph<T>> {
    weighted_loss(pairs, model, sched, objective.weights(), Direction::Forward)
}

/// [`btdm_loss`] with explicit term weights. `Direction::Backward` feeds
/// frame t-1 as stream a under the backward embedding; the loss is the same
/// quantity with the streams' roles exchanged.
pub fn weighted_loss<T: Scalar, M: Trainable<T>>(
    pairs: &[TrainingPair<T>],
    model: &M,
    sched: &NoiseSchedule,
    weights: [f64; 2],
    orientation: Direction,
) -> Result<LossGraph<T>> {
    if pairs.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let noisy = |y: &Tensor<T>, eps: &Tensor<T>, k: usize| sched.forward_marginal(y, k, eps);
    let x_t = pairs.iter().map(|p| noisy(&p.y_t, &p.eps_t, p.k)).collect::<Result<Vec<_>>>()?;
    let x_tm1 = pairs.iter().map(|p| noisy(&p.y_tm1, &p.eps_tm1, p.k)).collect::<Result<Vec<_>>>()?;
    let lambdas = pairs.iter().map(|p| sched.lambda(p.k)).collect::<Result<Vec<_>>>()?;
    let cond = batch_condition(pairs)?;

    let mut tape = Tape::new();
    let x_t = tape.constant(stack(x_t.iter())?);
    let x_tm1 = tape.constant(stack(x_tm1.iter())?);
    let s_t = tape.constant(stack(pairs.iter().map(|p| &p.s_t))?);
    let s_tm1 = tape.constant(stack(pairs.iter().map(|p| &p.s_tm1))?);
    let (y_a, y_b, s_a, s_b) = match orientation {
        Direction::Forward => (x_t, x_tm1, s_t, s_tm1),
        Direction::Backward => (x_tm1, x_t, s_tm1, s_t),
    };
    let input = PairInput {
        y_a,
        y_b,
        s_a,
        s_b,
        lambdas: &lambdas,
        cond: &cond,
        direction: orientation,
    };
    let (pa, pb) = model.forward_pair(&mut tape, &input)?;
    let (pred_t, pred_tm1) = match orientation {
        Direction::Forward => (pa, pb),
        Direction::Backward => (pb, pa),
    };
    let y_t = tape.constant(stack(pairs.iter().map(|p| &p.y_t))?);
    let y_tm1 = tape.constant(stack(pairs.iter().map(|p| &p.y_tm1))?);
    let terms = [tape.mse(pred_t, y_t)?, tape.mse(pred_tm1, y_tm1)?];

    let mut loss = None;
    for (&w, &term) in weights.iter().zip(&terms) {
        if w == 0.0 {
            continue;
        }
        let scaled = tape.scale(term, T::of(w))?;
        loss = Some(match loss {
            None => scaled,
            Some(l) => tape.add(l, scaled)?,
        });
    }
    let loss = loss.ok_or_else(|| Error::Config("both loss terms have zero weight".into()))?;
    Ok(LossGraph { tape, loss, terms })
}

/// One line of the loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Seconds spent on this step.
    pub wall_time: f64,
    /// `[sequence, t, k]` of every pair in the batch.
    pub pairs: Vec<[usize; 3]>,
}

/// Model, optimizer state and data for one run. The randomness of step `n`
/// comes from its own ChaCha stream, so a resumed run draws exactly what an
/// uninterrupted one would.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model32,
    pub optimizer: AdamState<f32>,
    /// Steps completed.
    pub step: u64,
    sched: NoiseSchedule,
    dataset: Vec<SequenceSample>,
    self_pairs: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: Vec<SequenceSample>) -> Result<Self> {
        config.validate()?;
        let model = DenoiserModel::new(config.model.clone(), config.seed)?;
        Self::with_model(config, model, dataset)
    }

    pub fn with_model(config: TrainConfig, model: Model32, dataset: Vec<SequenceSample>) -> Result<Self> {
        config.validate()?;
        if model.config != config.model {
            return Err(Error::Config("model does not match the configured architecture".into()));
        }
        let m = &model.config;
        let want = (m.channels, m.size, m.size, m.pose_channels);
        if let Some((i, s)) = dataset.iter().enumerate().find(|(_, s)| s.dims() != want) {
            return Err(Error::Dataset(format!(
                "sequence {i} has (C, H, W, P) = {:?}, model expects {want:?}",
                s.dims()
            )));
        }
        let optimizer = AdamState::new(&model.params);
        Ok(Trainer {
            sched: config.schedule.build()?,
            config,
            model,
            optimizer,
            step: 0,
            dataset,
            self_pairs: false,
        })
    }

    /// Continue the run stored in `ck`.
    pub fn resume(ck: Checkpoint32, dataset: Vec<SequenceSample>) -> Result<Self> {
        let config = ck
            .train
            .ok_or_else(|| Error::Config("checkpoint carries no training config".into()))?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::Config("checkpoint carries no optimizer state".into()))?;
        let mut t = Self::with_model(config, ck.model, dataset)?;
        t.optimizer = optimizer;
        t.step = ck.step;
        Ok(t)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn dataset(&self) -> &[SequenceSample] {
        &self.dataset
    }

    /// The pairs step `step + 1` trains on.
    pub fn draw_batch(&self, step: u64) -> Result<Vec<TrainingPair<f32>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        (0..self.config.batch)
            .map(|_| draw_pair(&self.dataset, &mut rng, &self.config, self.self_pairs))
            .collect()
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let pairs = self.draw_batch(self.step)?;
        let graph = btdm_loss(&pairs, &self.model, &self.sched, self.config.objective)?;
        let loss = graph.value();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                op: format!("training loss at step {}", self.step + 1),
            });
        }
        let grads = backprop_gradients(graph.loss, &self.model.params, graph.tape)?;
        adam_update(&mut self.model.params, &grads, &mut self.optimizer, &self.config.adam())?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            wall_time: start.elapsed().as_secs_f64(),
            pairs: pairs.iter().map(|p| [p.sequence, p.t, p.k]).collect(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint32 {
        Checkpoint32 {
            model: self.model.clone(),
            schedule: self.config.schedule,
            step: self.step,
            train: Some(self.config.clone()),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Train until `self.step == until`, appending to `log` if given and
    /// saving the checkpoint at the configured interval and at the end. An
    /// error leaves the last saved checkpoint in place.
    pub fn run(&mut self, until: u64, log: Option<&Path>, save: bool) -> Result<Vec<StepRecord>> {
        let mut log = match log {
            Some(p) => Some((OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?, p)),
            None => None,
        };
        let mut history = Vec::new();
        while self.step < until {
            let rec = self.train_step()?;
            if let Some((f, p)) = log.as_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(*p, e))?;
            }
            let every = self.config.checkpoint_every;
            if save && every > 0 && self.step.is_multiple_of(every) {
                self.checkpoint().save(&self.config.checkpoint)?;
            }
            history.push(rec);
        }
        if save {
            self.checkpoint().save(&self.config.checkpoint)?;
        }
        Ok(history)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint32,
    pub history: Vec<StepRecord>,
}

/// Train from `config.data`, writing the checkpoint and its loss history.
/// With `resume`, an existing checkpoint at `config.checkpoint` is continued
/// up to `config.steps`.
pub fn train(config: &TrainConfig, resume: bool) -> Result<TrainOutcome> {
    let (_, dataset) = read_dataset(&config.data)?;
    train_on(config, dataset, resume)
}

pub fn train_on(config: &TrainConfig, dataset: Vec<SequenceSample>, resume: bool) -> Result<TrainOutcome> {
    let log = loss_log_path(&config.checkpoint);
    let mut trainer = if resume && config.checkpoint.exists() {
        let mut t = Trainer::resume(Checkpoint32::load(&config.checkpoint)?, dataset)?;
        t.config.steps = config.steps;
        truncate_log(&log, t.step)?;
        t
    } else {
        let t = Trainer::new(config.clone(), dataset)?;
        if let Some(dir) = config.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        File::create(&log).map_err(|e| Error::io(&log, e))?;
        t
    };
    let steps = trainer.config.steps;
    let history = trainer.run(steps, Some(&log), true)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        history,
    })
}

/// Keep only the records up to and including `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let kept = match File::open(path) {
        Ok(f) => read_records(BufReader::new(f), path)?
            .into_iter()
            .filter(|r| r.step <= step)
            .collect(),
        Err(_) => Vec::new(),
    };
    let mut out = String::new();
    for r in kept {
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    crate::data::write_atomic(path, out.as_bytes())
}

fn read_records(r: impl BufRead, path: &Path) -> Result<Vec<StepRecord>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })
        })
        .collect()
}

/// Parse a loss history written by [`train`].
pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(BufReader::new(f), path)
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub iterations: u64,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            iterations: FINE_TUNE_ITERATIONS as u64,
            lr: REFERENCE_LR,
            batch: 4,
            seed: 0,
        }
    }
}

/// The one-frame sequence `Y = {c}, S = {pose}`.
pub fn single_image_dataset(c: &Tensor<f32>, pose: Option<&Tensor<f32>>) -> Result<Vec<SequenceSample>> {
    let pose = pose.ok_or_else(|| Error::Dataset("no pose available for the condition image".into()))?;
    let c = match *c.shape() {
        [_, _, _] => c.clone(),
        [1, _, _, _] => squeeze0(c.clone()),
        ref s => return Err(Error::shape("fine_tune_single_image", format!("condition image {s:?}"))),
    };
    let pose = match *pose.shape() {
        [_, _, _] => pose.clone(),
        [1, _, _, _] => squeeze0(pose.clone()),
        ref s => return Err(Error::shape("fine_tune_single_image", format!("pose {s:?}"))),
    };
    if c.shape()[1..] != pose.shape()[1..] {
        return Err(Error::shape("fine_tune_single_image", "image and pose sizes differ"));
    }
    Ok(vec![SequenceSample {
        frames: c.unsqueeze0(),
        poses: pose.unsqueeze0(),
        condition: c,
        identity_seed: 0,
        motion_seed: 0,
    }])
}

/// Continue training every weight of `ck` on the self-pair `(c, c)`.
pub fn fine_tune_single_image(
    ck: &Checkpoint32,
    c: &Tensor<f32>,
    pose: Option<&Tensor<f32>>,
    cfg: &FineTuneConfig,
) -> Result<Checkpoint32> {
    let dataset = single_image_dataset(c, pose)?;
    let base = ck.train.clone().unwrap_or_default();
    let config = TrainConfig {
        mode: TaskMode::SingleImage,
        lr: cfg.lr,
        batch: cfg.batch,
        steps: cfg.iterations,
        seed: cfg.seed,
        cond_dropout: 0.0,
        schedule: ck.schedule,
        model: ck.model.config.clone(),
        ..base
    };
    let mut trainer = Trainer::with_model(config, ck.model.clone(), dataset)?;
    trainer.self_pairs = true;
    trainer.run(cfg.iterations, None, false)?;
    Ok(Checkpoint32 {
        model: trainer.model,
        schedule: ck.schedule,
        step: ck.step + cfg.iterations,
        train: ck.train.clone(),
        optimizer: None,
    })
}
