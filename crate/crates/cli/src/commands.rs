use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use motionedit_core::diffusion::NoiseSchedule;
use motionedit_core::network::Model;
use motionedit_core::pipeline::{base_model, edit, one_shot_train, reconstruct};
use motionedit_core::skeleton::{align_clip, Aligned, AlignReport};
use motionedit_core::tensor::write_melt_file;
use motionedit_core::Tensor;
use serde::Serialize;

use crate::config::{Config, Overrides};
use crate::error::{CliError, Result};
use crate::job::{write_fixture, write_json, LoadedJob};
use crate::metrics::{frame_metrics, preview_frames, FrameMetrics};
use crate::selftest;

#[derive(Debug, Parser)]
#[command(name = "motionedit", version, about = "Toy-scale pose-guided video motion editing")]
pub struct Cli {
    /// JSON config; every field is optional.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory. Commands write nowhere else.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Training steps for `train`, sampling steps for `edit` and `reconstruct`.
    #[arg(long, global = true, value_name = "N")]
    pub steps: Option<usize>,
    #[arg(long, global = true, value_name = "X")]
    pub guidance: Option<f32>,
    #[arg(long, global = true)]
    pub no_injection: bool,
    #[arg(long, global = true)]
    pub inject_mid: bool,
    #[arg(long, global = true)]
    pub drop_masked_tokens: bool,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Job file; defaults to `paths.job` of the config.
    #[arg(long, value_name = "PATH")]
    pub job: Option<PathBuf>,
    /// Checkpoint directory; defaults to `paths.weights`, then the seeded
    /// base model.
    #[arg(long, value_name = "DIR")]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the seeded synthetic video as a job, with a matching config.
    Fixture {
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Align the reference skeletons onto the source protagonist.
    Align(Inputs),
    /// One-shot fine-tuning of the temporal attention and motion adapters.
    Train(Inputs),
    /// Invert the source video and denoise it again.
    Reconstruct(Inputs),
    /// Two-branch motion edit with attention injection.
    Edit(Inputs),
    /// Run the invariant checks and print a pass/fail table.
    Selftest {
        /// Restrict to checks whose name starts with, or whose group equals, this.
        #[arg(long, value_name = "NAME")]
        only: Vec<String>,
        /// Sabotage one primitive's backward rule; its gradient checks must fail.
        #[arg(long, value_name = "OP")]
        corrupt_backward: Option<String>,
    },
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            guidance: self.guidance,
            no_injection: self.no_injection,
            inject_mid: self.inject_mid,
            drop_masked_tokens: self.drop_masked_tokens,
        }
    }
}

/// Resolved configuration, model and job of one command.
struct Ctx {
    cfg: Config,
    schedule: NoiseSchedule,
    model: Model,
    job: LoadedJob,
}

fn base_config(cli: &Cli) -> Result<Config> {
    match &cli.config {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn prepare(cli: &Cli, inputs: &Inputs, steps_are_training: bool) -> Result<Ctx> {
    let mut cfg = base_config(cli)?;
    if let Some(w) = &inputs.weights {
        cfg.paths.weights = Some(w.clone());
    }
    let model = match &cfg.paths.weights {
        Some(dir) => {
            let m = Model::load(dir).map_err(|e| CliError::input(dir, e))?;
            if m.config != cfg.model {
                log::info!("using the model dimensions stored in {}", dir.display());
                cfg.model = m.config.clone();
            }
            Some(m)
        }
        None => None,
    };
    let job_path = inputs
        .job
        .clone()
        .or_else(|| cfg.paths.job.clone())
        .ok_or_else(|| CliError::Usage("no job file: pass --job or set paths.job".into()))?;
    let job = LoadedJob::load(&job_path, &cfg.model)?;
    if let Some(seed) = job.file.seed {
        cfg.seed = seed;
    }
    if let Some(s) = &job.file.sampler {
        cfg.sampler = s.clone();
    }
    if let Some(n) = cli.steps {
        if steps_are_training {
            cfg.train.steps = n;
        } else {
            cfg.sampler.steps = n;
        }
    }
    cfg.apply(&cli.overrides())?;
    let model = match model {
        Some(m) => m,
        None => base_model(cfg.model.clone(), cfg.seed)?,
    };
    if job.job.latents.shape() != model.config.latent_shape() {
        return Err(CliError::input(
            &job_path,
            format!("latents {:?} do not match the model's {:?}", job.job.latents.shape(), model.config.latent_shape()),
        ));
    }
    Ok(Ctx {
        schedule: cfg.noise_schedule()?,
        cfg,
        model,
        job,
    })
}

fn out_dir(cfg: &Config) -> Result<PathBuf> {
    let dir = cfg.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::input(&dir, e))?;
    Ok(dir)
}

fn subdir(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    std::fs::create_dir_all(&p).map_err(|e| CliError::input(&p, e))?;
    Ok(p)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::input(path, e))
}

fn write_previews(dir: &Path, stem: &str, t: &Tensor) -> Result<()> {
    let dir = subdir(dir, "preview")?;
    for (i, r) in preview_frames(t)?.iter().enumerate() {
        r.write_pgm(dir.join(format!("{stem}_{i:03}.pgm")))?;
    }
    Ok(())
}

fn write_aligned(dir: &Path, aligned: &[Aligned]) -> Result<()> {
    let dir = subdir(dir, "aligned")?;
    for (i, a) in aligned.iter().enumerate() {
        a.skeleton.write_pgm(dir.join(format!("skeleton_{i:03}.pgm")))?;
        a.mask.mask_to_intensity().write_pgm(dir.join(format!("mask_{i:03}.pgm")))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FrameAlign<'a> {
    frame: usize,
    #[serde(flatten)]
    report: &'a AlignReport,
}

fn align_reports(aligned: &[Aligned]) -> Vec<FrameAlign<'_>> {
    aligned.iter().enumerate().map(|(frame, a)| FrameAlign { frame, report: &a.report }).collect()
}

#[derive(Serialize)]
struct MetricsReport {
    mean_rmse: f64,
    frames: Vec<FrameMetrics>,
}

fn metrics_report(a: &Tensor, b: &Tensor) -> Result<MetricsReport> {
    let frames = frame_metrics(a, b)?;
    let mean_rmse = frames.iter().map(|m| m.rmse).sum::<f64>() / frames.len().max(1) as f64;
    Ok(MetricsReport { mean_rmse, frames })
}

pub fn cmd_fixture(cli: &Cli, frames: Option<usize>) -> Result<()> {
    let mut cfg = base_config(cli)?;
    if let Some(f) = frames {
        cfg.model.frames = f;
    }
    cfg.apply(&cli.overrides())?;
    let dir = out_dir(&cfg)?;
    write_fixture(&dir, &cfg.model, cfg.seed)?;
    let mut written = cfg.clone();
    written.paths.job = Some("job.json".into());
    written.paths.out = None;
    written.paths.weights = None;
    write_json(&dir.join("config.json"), &written)?;
    println!("{}", dir.join("job.json").display());
    Ok(())
}

#[derive(Serialize)]
struct AlignFile<'a> {
    mode: motionedit_core::skeleton::AlignMode,
    frames: Vec<FrameAlign<'a>>,
}

pub fn cmd_align(cli: &Cli, inputs: &Inputs) -> Result<()> {
    let ctx = prepare(cli, inputs, false)?;
    let j = &ctx.job.job;
    let aligned = align_clip(&j.source_skeletons, &j.source_masks, &j.reference_skeletons, &j.reference_masks, ctx.cfg.align_mode)?;
    let dir = out_dir(&ctx.cfg)?;
    write_aligned(&dir, &aligned)?;
    write_json(
        &dir.join("align_report.json"),
        &AlignFile {
            mode: ctx.cfg.align_mode,
            frames: align_reports(&aligned),
        },
    )?;
    println!("aligned {} frames into {}", aligned.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainFile {
    seed: u64,
    steps: usize,
    lr: f32,
    head_mean_loss: f32,
    tail_mean_loss: f32,
    /// Checksums as 16-digit hex.
    frozen_checksum_before: String,
    frozen_checksum_after: String,
    trainable_checksum: String,
}

pub fn cmd_train(cli: &Cli, inputs: &Inputs) -> Result<()> {
    let mut ctx = prepare(cli, inputs, true)?;
    let j = &ctx.job.job;
    let cfg = &ctx.cfg;
    let report = one_shot_train(&mut ctx.model, &j.latents, &j.source_skeletons, &j.source_prompt, &cfg.train, &ctx.schedule, cfg.seed)?;
    let dir = out_dir(cfg)?;
    ctx.model.save(dir.join("checkpoint"))?;

    let mut csv = String::from("step,timestep,loss,adapter_grad_norm,temporal_grad_norm,frozen_grad_norm\n");
    for (i, (loss, norms)) in report.losses.iter().zip(&report.group_grad_norms).enumerate() {
        let g = |k: &str| norms.get(k).copied().unwrap_or(0.0);
        writeln!(csv, "{i},{},{loss},{},{},{}", report.timesteps[i], g("adapter"), g("temporal"), g("frozen")).unwrap();
    }
    write_text(&dir.join("loss.csv"), &csv)?;

    let (head, tail) = report.head_tail_means(10);
    write_json(
        &dir.join("train_report.json"),
        &TrainFile {
            seed: cfg.seed,
            steps: cfg.train.steps,
            lr: cfg.train.lr,
            head_mean_loss: head,
            tail_mean_loss: tail,
            frozen_checksum_before: format!("{:016x}", report.frozen_checksum_before),
            frozen_checksum_after: format!("{:016x}", report.frozen_checksum_after),
            trainable_checksum: format!("{:016x}", ctx.model.trainable_checksum()),
        },
    )?;
    println!("trained {} steps, loss {head:.4} -> {tail:.4}, checkpoint in {}", report.losses.len(), dir.join("checkpoint").display());
    Ok(())
}

fn trajectory_csv(traj: &motionedit_core::diffusion::Trajectory, source: &Tensor) -> Result<String> {
    let mut csv = String::from("index,timestep,rms_from_source\n");
    for (i, (t, x)) in traj.points.iter().enumerate() {
        writeln!(csv, "{i},{t},{}", x.rms_diff(source)?).unwrap();
    }
    Ok(csv)
}

pub fn cmd_reconstruct(cli: &Cli, inputs: &Inputs) -> Result<()> {
    let ctx = prepare(cli, inputs, false)?;
    let j = &ctx.job.job;
    let rec = reconstruct(&ctx.model, j, &ctx.cfg.edit_config(), &ctx.schedule)?;
    let dir = out_dir(&ctx.cfg)?;
    write_melt_file(dir.join("reconstruction.melt"), &rec.latents)?;
    write_previews(&dir, "reconstruction", &rec.latents)?;
    write_text(&dir.join("inversion.csv"), &trajectory_csv(&rec.inversion, &j.latents)?)?;
    let metrics = metrics_report(&rec.latents, &j.latents)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    println!("reconstruction rmse {:.4}, written to {}", metrics.mean_rmse, dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EditFile<'a> {
    seed: u64,
    sampler: &'a motionedit_core::pipeline::SamplerConfig,
    injection: &'a motionedit_core::injection::InjectionPolicy,
    recon_control: bool,
    coverage: usize,
    cache_cs_reads: usize,
    recomputed_recon_kv: usize,
    active_steps: &'a [usize],
    reconstruction_vs_source: MetricsReport,
    edited_vs_reconstruction: MetricsReport,
    alignment: Vec<FrameAlign<'a>>,
}

pub fn cmd_edit(cli: &Cli, inputs: &Inputs) -> Result<()> {
    let ctx = prepare(cli, inputs, false)?;
    let j = &ctx.job.job;
    let ec = ctx.cfg.edit_config();
    let out = edit(&ctx.model, j, &ec, &ctx.schedule)?;
    let dir = out_dir(&ctx.cfg)?;
    write_melt_file(dir.join("edited.melt"), &out.edited)?;
    write_melt_file(dir.join("reconstruction.melt"), &out.reconstruction)?;
    write_previews(&dir, "edited", &out.edited)?;
    write_previews(&dir, "reconstruction", &out.reconstruction)?;
    write_aligned(&dir, &out.aligned)?;
    write_text(&dir.join("inversion.csv"), &trajectory_csv(&out.inversion, &j.latents)?)?;
    write_json(
        &dir.join("edit_report.json"),
        &EditFile {
            seed: ctx.cfg.seed,
            sampler: &ec.sampler,
            injection: &ec.injection,
            recon_control: ec.recon_control,
            coverage: out.coverage,
            cache_cs_reads: out.cache_cs_reads,
            recomputed_recon_kv: out.recomputed_recon_kv,
            active_steps: &out.active_steps,
            reconstruction_vs_source: metrics_report(&out.reconstruction, &j.latents)?,
            edited_vs_reconstruction: metrics_report(&out.edited, &out.reconstruction)?,
            alignment: align_reports(&out.aligned),
        },
    )?;
    println!("edited {} frames ({} injected frame reads), written to {}", j.frames(), out.coverage, dir.display());
    Ok(())
}

pub fn cmd_selftest(only: &[String], corrupt: Option<&str>) -> Result<()> {
    let corrupt = match corrupt {
        None => None,
        Some(op) => Some(
            selftest::BACKWARD_OPS
                .iter()
                .copied()
                .find(|o| *o == op)
                .ok_or_else(|| CliError::Usage(format!("unknown primitive `{op}`; one of {}", selftest::BACKWARD_OPS.join(", "))))?,
        ),
    };
    if !only.is_empty() && !selftest::registry().iter().any(|c| only.iter().any(|o| c.name.starts_with(o.as_str()) || c.group == o)) {
        return Err(CliError::Usage(format!("no check matches {only:?}")));
    }
    let results = selftest::run(only, corrupt);
    print!("{}", selftest::table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("failed checks: {}", failed.join(", "))))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fixture { frames } => cmd_fixture(cli, *frames),
        Command::Align(i) => cmd_align(cli, i),
        Command::Train(i) => cmd_train(cli, i),
        Command::Reconstruct(i) => cmd_reconstruct(cli, i),
        Command::Edit(i) => cmd_edit(cli, i),
        Command::Selftest { only, corrupt_backward } => cmd_selftest(only, corrupt_backward.as_deref()),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
