//! One-shot training, DDIM inversion, reconstruction, and two-branch motion
//! editing with attention injection.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{cfg_combine, invert_loop, q_sample, sample_loop, training_loss, NoiseSchedule, Timestep, Trajectory};
use crate::error::{Error, Result};
use crate::fixture::SyntheticVideo;
use crate::injection::{CacheStats, InjectionPolicy, ReconCache, Topology};
use crate::network::{
    controlnet_forward, is_trainable, text_context, unet_forward_with, ForwardStats, InjectionMasks, Model, NetConfig, Probe, Role,
};
use crate::raster::Raster;
use crate::rng::{normal_vec, stream};
use crate::skeleton::{align_clip, AlignMode, Aligned};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

/// Text and pose conditioning of one ε evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Condition<'a> {
    /// `None` selects the unconditional text embedding.
    pub prompt: Option<&'a str>,
    pub poses: Option<&'a [Raster]>,
}

/// Anything that predicts ε for a clip. [`Model`] is the real one; tests
/// substitute closed-form doubles.
pub trait Denoiser {
    fn predict(
        &self,
        x: &Tensor,
        t: usize,
        cond: &Condition,
        role: &mut Role,
        stats: Option<&ForwardStats>,
    ) -> Result<Tensor>;

    /// Layer layout, used to decide which layers injection gates.
    fn topology(&self) -> Topology;
}

impl Denoiser for Model {
    fn predict(
        &self,
        x: &Tensor,
        t: usize,
        cond: &Condition,
        role: &mut Role,
        stats: Option<&ForwardStats>,
    ) -> Result<Tensor> {
        let text = text_context(self, cond.prompt)?;
        let control = cond.poses.map(|p| controlnet_forward(self, x, t, p)).transpose()?;
        let probe = Probe { stats, trace: None };
        unet_forward_with(&self.config, &self.params, x, t, &text, control.as_ref(), role, probe)
    }

    fn topology(&self) -> Topology {
        self.config.topology()
    }
}

/// Freshly initialized network whose ControlNet projections are replaced by
/// the seeded stand-in for pretrained weights, so that pose maps steer the
/// U-Net from the start.
pub fn base_model(config: NetConfig, seed: u64) -> Result<Model> {
    Ok(Model::init(config, seed)?.with_synthetic_pretraining(seed, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 3e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 7.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub sampler: SamplerConfig,
    pub injection: InjectionPolicy,
    pub align_mode: AlignMode,
    /// Whether the reconstruction branch (and inversion) is conditioned on
    /// the source skeletons through ControlNet.
    pub recon_control: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            injection: InjectionPolicy::default(),
            align_mode: AlignMode::PerFrame,
            recon_control: true,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        self.injection.validate()?;
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler steps must be positive".into()));
        }
        if !(self.sampler.guidance >= 0.0 && self.sampler.guidance.is_finite()) {
            return Err(Error::Config(format!("guidance {} must be finite and >= 0", self.sampler.guidance)));
        }
        Ok(())
    }
}

/// Everything an edit consumes.
#[derive(Debug, Clone)]
pub struct EditJob {
    /// Source video latents `[F, C, H, W]`.
    pub latents: Tensor,
    pub source_skeletons: Vec<Raster>,
    pub source_masks: Vec<Raster>,
    pub reference_skeletons: Vec<Raster>,
    pub reference_masks: Vec<Raster>,
    pub source_prompt: String,
    pub target_prompt: String,
}

impl EditJob {
    pub fn from_video(v: &SyntheticVideo) -> Self {
        Self {
            latents: v.latents.clone(),
            source_skeletons: v.source.skeletons.clone(),
            source_masks: v.source.masks.clone(),
            reference_skeletons: v.reference.skeletons.clone(),
            reference_masks: v.reference.masks.clone(),
            source_prompt: v.source_prompt.clone(),
            target_prompt: v.target_prompt.clone(),
        }
    }

    pub fn frames(&self) -> usize {
        self.latents.shape().first().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.frames();
        if self.latents.rank() != 4 || f == 0 {
            return Err(Error::shape("edit_job", format!("latents must be [F, C, H, W], got {:?}", self.latents.shape())));
        }
        let lists = [
            ("source skeletons", &self.source_skeletons),
            ("source masks", &self.source_masks),
            ("reference skeletons", &self.reference_skeletons),
            ("reference masks", &self.reference_masks),
        ];
        for (what, list) in lists {
            if list.len() != f {
                return Err(Error::Mask(format!("{what}: {} frames for a {f}-frame video", list.len())));
            }
        }
        Ok(())
    }

    fn recon_condition<'a>(&'a self, cfg: &EditConfig) -> Condition<'a> {
        Condition {
            prompt: Some(&self.source_prompt),
            poses: cfg.recon_control.then_some(&self.source_skeletons[..]),
        }
    }
}

// ---- training ----

/// L2 norms of the gradients handed to the optimizer, by parameter group.
pub type GroupNorms = BTreeMap<String, f32>;

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f32>,
    /// Sampled timestep of each step.
    pub timesteps: Vec<usize>,
    pub group_grad_norms: Vec<GroupNorms>,
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: u64,
}

impl TrainReport {
    /// Mean loss over the first and last `n` steps.
    pub fn head_tail_means(&self, n: usize) -> (f32, f32) {
        let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len().max(1) as f32;
        let k = n.min(self.losses.len());
        (mean(&self.losses[..k]), mean(&self.losses[self.losses.len() - k..]))
    }
}

pub fn param_group(name: &str) -> &'static str {
    if !is_trainable(name) {
        "frozen"
    } else if name.starts_with("adapter.") {
        "adapter"
    } else {
        "temporal"
    }
}

/// Fine-tunes the temporal attention and adapter weights of `model` on one
/// video. Each step draws `t` uniformly from the schedule and fresh noise,
/// and takes one Adam step on the ε-prediction MSE.
pub fn one_shot_train(
    model: &mut Model,
    latents: &Tensor,
    skeletons: &[Raster],
    prompt: &str,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<TrainReport> {
    let frozen_checksum_before = model.frozen_checksum();
    let text = text_context(model, Some(prompt))?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = stream(seed, "one-shot-train");
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.steps),
        timesteps: Vec::with_capacity(cfg.steps),
        group_grad_norms: Vec::with_capacity(cfg.steps),
        frozen_checksum_before,
        frozen_checksum_after: frozen_checksum_before,
    };
    for step in 0..cfg.steps {
        let t = rng.random_range(0..schedule.alpha_bar.len());
        let eps = Tensor::from_vec(latents.shape(), normal_vec(&mut rng, latents.numel(), 1.0))?;
        let x_t = q_sample(latents, Timestep::Step(t), &eps, schedule)?;
        let control = controlnet_forward(model, &x_t, t, skeletons)?;
        let tape = Tape::new();
        let watched = model.params.watched(&tape, is_trainable);
        let pred = unet_forward_with(
            &model.config,
            &watched,
            &x_t,
            t,
            &text,
            Some(&control),
            &mut Role::Plain,
            Probe::default(),
        )?;
        let loss = training_loss(&pred, &eps)?;
        let value = loss.item()?;
        if !value.is_finite() {
            log::error!(
                "one-shot training diverged at step {step} (t = {t}); losses so far: {:?}",
                report.losses
            );
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        let grads = watched.gradients(&tape.backward(&loss)?);
        let mut norms = GroupNorms::from([("adapter".into(), 0.0), ("temporal".into(), 0.0), ("frozen".into(), 0.0)]);
        for (name, g) in &grads {
            *norms.get_mut(param_group(name)).expect("group") += g.norm().powi(2);
        }
        norms.values_mut().for_each(|v| *v = v.sqrt());
        adam.step(model.params.as_map_mut(), &grads)?;
        log::debug!("step {step} t {t} loss {value:.5}");
        report.losses.push(value);
        report.timesteps.push(t);
        report.group_grad_norms.push(norms);
    }
    report.frozen_checksum_after = model.frozen_checksum();
    Ok(report)
}

// ---- inference ----

/// DDIM inversion of `latents` over `steps` strided timesteps, with the
/// conditional prediction (guidance 1).
pub fn invert<D: Denoiser>(
    d: &D,
    latents: &Tensor,
    cond: &Condition,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Trajectory> {
    let timesteps = schedule.strided(steps)?;
    invert_loop(latents, &timesteps, schedule, |x, t| d.predict(x, t, cond, &mut Role::Plain, None))
}

fn noise_end(traj: &Trajectory) -> Result<Tensor> {
    traj.last()
        .map(|(_, x)| x.clone())
        .ok_or_else(|| Error::Timestep("empty inversion trajectory".into()))
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub latents: Tensor,
    pub inversion: Trajectory,
}

/// Inverts the source and denoises it again under the same conditioning,
/// without injection.
pub fn reconstruct<D: Denoiser>(d: &D, job: &EditJob, cfg: &EditConfig, schedule: &NoiseSchedule) -> Result<Reconstruction> {
    job.validate()?;
    cfg.validate()?;
    let cond = job.recon_condition(cfg);
    let inversion = invert(d, &job.latents, &cond, schedule, cfg.sampler.steps)?;
    let timesteps = schedule.strided(cfg.sampler.steps)?;
    let out = sample_loop(&noise_end(&inversion)?, &timesteps, schedule, |x, t| {
        d.predict(x, t, &cond, &mut Role::Plain, None)
    })?;
    Ok(Reconstruction {
        latents: noise_end(&out)?,
        inversion,
    })
}

#[derive(Debug)]
pub struct EditOutput {
    pub edited: Tensor,
    /// Output of the reconstruction branch.
    pub reconstruction: Tensor,
    pub aligned: Vec<Aligned>,
    pub inversion: Trajectory,
    /// Frames served injected consistent-sparse K/V in the conditional
    /// editing pass, summed over gated layers and active steps.
    pub coverage: usize,
    /// K/V the editing branch computed itself at gated layers during active
    /// steps; zero under cache discipline.
    pub recomputed_recon_kv: usize,
    pub cache_cs_reads: usize,
    /// Sampling steps (0 = noisiest) during which injection was active.
    pub active_steps: Vec<usize>,
}

/// Two-branch motion edit: align the reference skeletons onto the source
/// protagonist, invert the source, denoise once as reconstruction (caching
/// gated-layer K/V), then denoise again under the aligned skeletons and the
/// target prompt with injected K/V and classifier-free guidance.
pub fn edit<D: Denoiser>(d: &D, job: &EditJob, cfg: &EditConfig, schedule: &NoiseSchedule) -> Result<EditOutput> {
    job.validate()?;
    cfg.validate()?;
    let aligned = align_clip(
        &job.source_skeletons,
        &job.source_masks,
        &job.reference_skeletons,
        &job.reference_masks,
        cfg.align_mode,
    )?;
    let targets: Vec<Raster> = aligned.iter().map(|a| a.skeleton.clone()).collect();

    let recon_cond = job.recon_condition(cfg);
    let steps = cfg.sampler.steps;
    let timesteps = schedule.strided(steps)?;
    let inversion = invert(d, &job.latents, &recon_cond, schedule, steps)?;
    let x_t = noise_end(&inversion)?;

    let policy = &cfg.injection;
    let mut cache = ReconCache::new();
    let recon = sample_loop(&x_t, &timesteps, schedule, |x, t| {
        let mut role = Role::Record {
            cache: &mut cache,
            inject_mid: policy.inject_mid,
        };
        d.predict(x, t, &recon_cond, &mut role, None)
    })?;
    let topology = d.topology();
    let gated: Vec<&str> = topology.gated_layers(policy.inject_mid).iter().map(|l| l.id.as_str()).collect();
    if policy.enabled {
        cache.check_complete(&gated, &timesteps, job.frames())?;
    }

    let masks = InjectionMasks::new(&topology, &job.source_masks, policy.inject_mid)?;
    let cond = Condition {
        prompt: Some(&job.target_prompt),
        poses: Some(&targets),
    };
    let uncond = Condition { prompt: None, ..cond };
    // Counters cover only the steps where injection is active.
    let (cond_stats, uncond_stats) = (ForwardStats::default(), ForwardStats::default());
    let mut active_steps = Vec::new();
    let edited = sample_loop(&x_t, &timesteps, schedule, |x, t| {
        let index = steps - 1 - timesteps.iter().position(|&s| s == t).expect("strided timestep");
        let active = policy.active_at(index, steps);
        if active {
            active_steps.push(index);
        }
        let role = || Role::Inject {
            cache: &cache,
            masks: &masks,
            policy,
            active,
        };
        let eps_c = d.predict(x, t, &cond, &mut role(), active.then_some(&cond_stats))?;
        if cfg.sampler.guidance == 1.0 {
            return Ok(eps_c);
        }
        let eps_u = d.predict(x, t, &uncond, &mut role(), active.then_some(&uncond_stats))?;
        cfg_combine(&eps_u, &eps_c, cfg.sampler.guidance)
    })?;
    active_steps.sort_unstable();

    let coverage = gated.iter().map(|l| ForwardStats::count(&cond_stats.cs_injected, l)).sum();
    let recomputed_recon_kv = [&cond_stats, &uncond_stats]
        .iter()
        .flat_map(|s| {
            gated
                .iter()
                .map(move |l| ForwardStats::count(&s.cs_context_kv, l) + ForwardStats::count(&s.temporal_kv, l))
        })
        .sum();
    Ok(EditOutput {
        edited: noise_end(&edited)?,
        reconstruction: noise_end(&recon)?,
        aligned,
        inversion,
        coverage,
        recomputed_recon_kv,
        cache_cs_reads: CacheStats::get(&cache.stats.cs_reads),
        active_steps,
    })
}
