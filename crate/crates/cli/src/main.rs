//! `btdm`: data generation, training, sampling, evaluation and the
//! bidirectional/unidirectional ablation.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or data error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use btdm::ablation::{desk_model, run_ablation, sample_sequences, AblationConfig};
use btdm::data::{generate_split, read_dataset, read_sequence, rest_pose, write_dataset, SequenceSample, Split, MANIFEST_FILE};
use btdm::imageio::{load_image, save_grid};
use btdm::metrics::evaluate;
use btdm::model::{Condition, Direction};
use btdm::sample::{bidirectional_recursive_sample, unidirectional_sample, BoundaryPolicy, SamplerConfig};
use btdm::train::{fine_tune_single_image, train, FineTuneConfig, Objective, TaskMode, TrainConfig};
use btdm::{Checkpoint32, Error, Result, Tensor32};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "btdm", version, about = "Bidirectional temporal diffusion on toy pendulum sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render train and test splits as BTDS containers.
    GenData(GenData),
    /// Train a denoiser; writes a checkpoint and a loss log next to it.
    Train(Train),
    /// Sample frames for the poses of a sequence or dataset.
    Sample(Sample),
    /// Score predicted sequences against ground truth.
    Eval(Eval),
    /// Train and score bidirectional and unidirectional variants.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    /// Output directory; `train/` and `test/` are created inside.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    train: usize,
    #[arg(long, default_value_t = 16)]
    test: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Distinct appearances, cycled through both splits.
    #[arg(long, default_value_t = 8)]
    identities: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `preview.png` with the first training sequences.
    #[arg(long)]
    preview: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    SingleImage,
    Person,
    Unconditional,
}

impl From<Mode> for TaskMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::SingleImage => TaskMode::SingleImage,
            Mode::Person => TaskMode::PersonSpecific,
            Mode::Unconditional => TaskMode::Unconditional,
        }
    }
}

#[derive(Args)]
struct Train {
    /// Dataset directory, or a directory holding `train/`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    steps: Option<u64>,
    /// TOML training config; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Train the first loss term only.
    #[arg(long)]
    uni: bool,
    /// Use the small denoiser of the ablation instead of the full default.
    #[arg(long)]
    desk: bool,
    /// Continue from the checkpoint at `--out` if it exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Forward,
    Backward,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundaryArg {
    Duplicate,
    Mirror,
}

#[derive(Args)]
struct Sample {
    #[arg(long)]
    ckpt: PathBuf,
    /// A `.btds` sequence or a dataset directory.
    #[arg(long)]
    poses: PathBuf,
    /// `own` (each sequence's condition image), `none`, or a PNG / `.btds` path.
    #[arg(long, default_value = "own")]
    cond: String,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, value_enum, default_value_t = DirectionArg::Forward)]
    first_direction: DirectionArg,
    /// Forward passes only.
    #[arg(long)]
    uni: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = BoundaryArg::Duplicate)]
    boundary: BoundaryArg,
    /// Denoise one frame at a time instead of a whole pass at once.
    #[arg(long)]
    sequential: bool,
    /// Fine-tune on each condition image for this many iterations first.
    #[arg(long, default_value_t = 0)]
    fine_tune: u64,
    /// Output directory (dataset layout plus `grid.png`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct Ablate {
    /// Directory with `train/` and `test/`.
    #[arg(long)]
    data: PathBuf,
    /// JSON report; a markdown table is written beside it.
    #[arg(long)]
    out: PathBuf,
    /// TOML ablation config; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    /// Number of seeds, starting at `--seed`.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Sample(a) => run_sample(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let train = generate_split(Split::Train, a.train, a.identities, a.frames, a.size, a.seed)?;
    let test = generate_split(Split::Test, a.test, a.identities, a.frames, a.size, a.seed)?;
    write_dataset(&train, &a.out.join("train"))?;
    write_dataset(&test, &a.out.join("test"))?;
    if a.preview {
        let rows: Vec<_> = train.iter().take(4).map(|s| &s.frames).collect();
        save_grid(&rows, &a.out.join("preview.png"))?;
    }
    println!(
        "wrote {} train and {} test sequences ({} frames, {}x{}) to {}",
        train.len(),
        test.len(),
        a.frames,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

/// `dir` itself if it holds a manifest, else `dir/sub` if that does.
fn dataset_dir(dir: &Path, sub: &str) -> PathBuf {
    let nested = dir.join(sub);
    if !dir.join(MANIFEST_FILE).exists() && nested.join(MANIFEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn run_train(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if a.desk {
        cfg.model = desk_model();
    }
    cfg.data = dataset_dir(&a.data, "train");
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.out {
        cfg.checkpoint = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if a.uni {
        cfg.objective = Objective::Unidirectional;
    }
    cfg.validate()?;
    let t0 = Instant::now();
    let out = train(&cfg, a.resume)?;
    let first = out.history.first().map_or(f64::NAN, |r| r.loss);
    let last = out.history.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained to step {} in {:.1}s (loss {first:.4} -> {last:.4}); checkpoint {}",
        out.checkpoint.step,
        t0.elapsed().as_secs_f64(),
        cfg.checkpoint.display()
    );
    Ok(())
}

fn read_inputs(path: &Path) -> Result<Vec<SequenceSample>> {
    if path.is_dir() {
        Ok(read_dataset(path)?.1)
    } else {
        Ok(vec![read_sequence(path)?])
    }
}

enum CondSource {
    Own,
    None,
    Fixed(Tensor32),
}

fn cond_source(arg: &str, size: usize) -> Result<CondSource> {
    match arg {
        "own" => Ok(CondSource::Own),
        "none" => Ok(CondSource::None),
        path => {
            let p = Path::new(path);
            if p.extension().is_some_and(|e| e == "btds") {
                Ok(CondSource::Fixed(read_sequence(p)?.condition))
            } else {
                Ok(CondSource::Fixed(load_image(p, size)?))
            }
        }
    }
}

fn run_sample(a: Sample) -> Result<()> {
    let ck = Checkpoint32::load(&a.ckpt)?;
    let sched = ck.schedule.build()?;
    let mode = ck.train.as_ref().map_or(TaskMode::SingleImage, |t| t.mode);
    let inputs = read_inputs(&a.poses)?;
    let source = cond_source(&a.cond, ck.model.config.size)?;
    let sampler = SamplerConfig {
        k_sample: a.k,
        first_direction: match a.first_direction {
            DirectionArg::Forward => Direction::Forward,
            DirectionArg::Backward => Direction::Backward,
        },
        seed: a.seed,
        boundary: match a.boundary {
            BoundaryArg::Duplicate => BoundaryPolicy::Duplicate,
            BoundaryArg::Mirror => BoundaryPolicy::Mirror,
        },
        batched: !a.sequential,
        keep_latents: false,
    };
    let objective = if a.uni { Objective::Unidirectional } else { Objective::Bidirectional };

    let t0 = Instant::now();
    let mut outputs = Vec::with_capacity(inputs.len());
    let plain = matches!(source, CondSource::Own) && a.fine_tune == 0;
    let frames = if plain {
        sample_sequences(&ck.model, &sched, &inputs, mode, objective, &sampler)?
    } else {
        let mut frames = Vec::with_capacity(inputs.len());
        for (i, s) in inputs.iter().enumerate() {
            let image = match &source {
                CondSource::Own => Some(s.condition.clone()),
                CondSource::None => None,
                CondSource::Fixed(c) => Some(c.clone()),
            };
            let cond = match (mode, &image) {
                (TaskMode::PersonSpecific, _) => Condition::Absent,
                (TaskMode::Unconditional, _) | (_, None) => Condition::Null,
                (TaskMode::SingleImage, Some(c)) => Condition::Image(c.unsqueeze0()),
            };
            let model = match (&image, a.fine_tune) {
                (Some(c), n) if n > 0 && mode == TaskMode::SingleImage => {
                    let size = ck.model.config.size;
                    let ft = FineTuneConfig {
                        iterations: n,
                        seed: a.seed.wrapping_add(i as u64),
                        ..FineTuneConfig::default()
                    };
                    fine_tune_single_image(&ck, c, Some(&rest_pose(size, size)), &ft)?.model
                }
                _ => ck.model.clone(),
            };
            let cfg = SamplerConfig {
                seed: a.seed.wrapping_add(i as u64),
                ..sampler.clone()
            };
            let out = match objective {
                Objective::Bidirectional => bidirectional_recursive_sample(&model, &sched, &s.poses, &cond, &cfg)?,
                Objective::Unidirectional => unidirectional_sample(&model, &sched, &s.poses, &cond, &cfg)?,
            };
            frames.push(out.frames);
        }
        frames
    };
    for (s, f) in inputs.iter().zip(frames) {
        let condition = match &source {
            CondSource::Fixed(c) => c.clone(),
            _ => s.condition.clone(),
        };
        outputs.push(SequenceSample {
            frames: f,
            poses: s.poses.clone(),
            condition,
            identity_seed: s.identity_seed,
            motion_seed: s.motion_seed,
        });
    }
    write_dataset(&outputs, &a.out)?;
    let rows: Vec<_> = outputs.iter().take(8).map(|s| &s.frames).collect();
    save_grid(&rows, &a.out.join("grid.png"))?;
    println!(
        "sampled {} sequences in {:.1}s into {}",
        outputs.len(),
        t0.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

fn run_eval(a: Eval) -> Result<()> {
    let (_, pred) = read_dataset(&a.pred)?;
    let (_, gt) = read_dataset(&a.gt)?;
    let p: Vec<_> = pred.into_iter().map(|s| s.frames).collect();
    let g: Vec<_> = gt.into_iter().map(|s| s.frames).collect();
    let echo = serde_json::json!({ "pred": a.pred, "gt": a.gt });
    let report = evaluate(&p, &g, echo)?;
    write_json(&a.report, &report)?;
    println!(
        "ssim_mean {:.4}  tconsist_mean {:.5}  drift_slope {:+.5}  ({} sequences)",
        report.ssim_mean,
        report.tconsist_mean,
        report.drift_slope,
        report.per_sequence.len()
    );
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run_ablate(a: Ablate) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => AblationConfig::load(p)?,
        None => AblationConfig::default(),
    };
    if a.seeds.is_some() || a.seed.is_some() {
        let n = a.seeds.unwrap_or(cfg.seeds.len()) as u64;
        let base = a.seed.unwrap_or(0);
        cfg.seeds = (base..base + n).collect();
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.k {
        cfg.sampler.k_sample = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    let train_dir = a.data.join("train");
    let test_dir = a.data.join("test");
    cfg.train.data = train_dir.clone();
    let (_, train) = read_dataset(&train_dir)?;
    let (_, test) = read_dataset(&test_dir)?;

    let t0 = Instant::now();
    let report = run_ablation(&cfg, &train, &test, |line| {
        eprintln!("[{:>6.0}s] {line}", t0.elapsed().as_secs_f64())
    })?;
    for s in &report.seeds {
        eprintln!(
            "seed {}: pair streams identical for both variants: {}",
            s.seed,
            if s.same_pairs { "yes" } else { "no" }
        );
        if !s.same_pairs {
            return Err(Error::Config(format!("seed {}: variants consumed different training pairs", s.seed)));
        }
    }
    write_json(&a.out, &report)?;
    let md = report.to_markdown();
    let md_path = a.out.with_extension("md");
    fs::write(&md_path, &md).map_err(|e| Error::Io {
        path: md_path.clone(),
        source: e,
    })?;
    println!("{md}");
    Ok(())
}
