use motionedit_core::diffusion::{ddim_step, sample_loop, NoiseSchedule, Timestep};
use motionedit_core::fixture::synthetic_video;
use motionedit_core::injection::{InjectionPolicy, Topology};
use motionedit_core::network::{ForwardStats, Model, NetConfig, Role};
use motionedit_core::pipeline::*;
use motionedit_core::raster::Raster;
use motionedit_core::{Error, Result, Tensor};

fn small() -> NetConfig {
    NetConfig {
        frames: 2,
        ..NetConfig::default()
    }
}

fn setup(cfg: NetConfig) -> (Model, EditJob) {
    let model = base_model(cfg.clone(), 1).unwrap();
    let job = EditJob::from_video(&synthetic_video(&cfg, 11).unwrap());
    (model, job)
}

fn sampler(steps: usize, guidance: f32) -> EditConfig {
    EditConfig {
        sampler: SamplerConfig { steps, guidance },
        ..EditConfig::default()
    }
}

/// ε that points every latent exactly back at a known clean `x0`.
struct Oracle {
    x0: Tensor,
    schedule: NoiseSchedule,
}

impl Denoiser for Oracle {
    fn predict(&self, x: &Tensor, t: usize, _: &Condition, _: &mut Role, _: Option<&ForwardStats>) -> Result<Tensor> {
        let ab = self.schedule.alpha_bar[t];
        let data = x
            .data()
            .iter()
            .zip(self.x0.data())
            .map(|(&x, &x0)| ((x as f64 - ab.sqrt() * x0 as f64) / (1.0 - ab).sqrt()) as f32)
            .collect();
        Tensor::from_vec(x.shape(), data)
    }

    fn topology(&self) -> Topology {
        NetConfig::default().topology()
    }
}

#[test]
fn zero_training_steps_leave_weights_unchanged() {
    let (mut model, job) = setup(small());
    let before = model.clone();
    let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
    let report = one_shot_train(&mut model, &job.latents, &job.source_skeletons, &job.source_prompt, &cfg, &NoiseSchedule::default(), 3).unwrap();
    assert!(report.losses.is_empty());
    assert_eq!(model, before);
}

#[test]
fn training_updates_only_trainable_groups() {
    let (mut model, job) = setup(small());
    let (frozen, trainable) = (model.frozen_checksum(), model.trainable_checksum());
    let cfg = TrainConfig { steps: 4, ..TrainConfig::default() };
    let s = NoiseSchedule::default();
    let mut again = model.clone();
    let report = one_shot_train(&mut model, &job.latents, &job.source_skeletons, &job.source_prompt, &cfg, &s, 3).unwrap();
    assert_eq!(report.losses.len(), 4);
    assert!(report.losses.iter().all(|l| l.is_finite() && *l > 0.0));
    assert_eq!(report.frozen_checksum_before, frozen);
    assert_eq!(report.frozen_checksum_after, frozen);
    assert_eq!(model.frozen_checksum(), frozen);
    assert_ne!(model.trainable_checksum(), trainable);
    for norms in &report.group_grad_norms {
        assert_eq!(norms["frozen"], 0.0);
        assert!(norms["adapter"] > 0.0 && norms["temporal"] > 0.0, "{norms:?}");
    }
    assert!(report.timesteps.iter().all(|&t| t < s.alpha_bar.len()));

    let rerun = one_shot_train(&mut again, &job.latents, &job.source_skeletons, &job.source_prompt, &cfg, &s, 3).unwrap();
    assert_eq!(rerun.losses, report.losses);
    assert_eq!(again, model);
}

#[test]
fn non_finite_loss_aborts() {
    let (mut model, job) = setup(small());
    let mut data = job.latents.to_vec();
    data[5] = f32::NAN;
    let bad = Tensor::from_vec(job.latents.shape(), data).unwrap();
    let cfg = TrainConfig { steps: 3, ..TrainConfig::default() };
    let err = one_shot_train(&mut model, &bad, &job.source_skeletons, &job.source_prompt, &cfg, &NoiseSchedule::default(), 3).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
}

#[test]
fn oracle_reconstruction_recovers_source() {
    let cfg = NetConfig::default();
    let job = EditJob::from_video(&synthetic_video(&cfg, 11).unwrap());
    let schedule = NoiseSchedule::default();
    let oracle = Oracle {
        x0: job.latents.clone(),
        schedule: schedule.clone(),
    };
    let out = reconstruct(&oracle, &job, &sampler(50, 1.0), &schedule).unwrap();
    assert!(out.latents.rms_diff(&job.latents).unwrap() <= 1e-4);
}

#[test]
fn inversion_trajectory_and_single_step_inverse() {
    let (model, job) = setup(small());
    let s = NoiseSchedule::default();
    let cond = Condition {
        prompt: Some(&job.source_prompt),
        poses: Some(&job.source_skeletons),
    };
    let traj = invert(&model, &job.latents, &cond, &s, 10).unwrap();
    let ts = traj.timesteps();
    assert_eq!(ts.len(), 11);
    assert_eq!(ts[0], Timestep::Clean);
    assert!(ts.windows(2).all(|w| w[0] < w[1]));

    // One step up and back with the ε the inversion used is exact.
    let one = invert(&model, &job.latents, &cond, &s, 1).unwrap();
    assert_eq!(one.points.len(), 2);
    let x1 = &one.last().unwrap().1;
    let t0 = s.strided(1).unwrap()[0];
    let eps0 = model.predict(&job.latents, t0, &cond, &mut Role::Plain, None).unwrap();
    let back = ddim_step(x1, &eps0, Timestep::Step(t0), Timestep::Clean, &s).unwrap();
    let rms = back.rms_diff(&job.latents).unwrap();
    assert!(rms <= 1e-5, "single-step round trip rms {rms:e}");

    // Re-evaluating ε at the noisier latent moves the result by
    // √(1−ᾱ)/√ᾱ · |Δε|, about 1e-2 · |Δε| at the first timestep.
    let resampled = sample_loop(x1, &[t0], &s, |x, t| model.predict(x, t, &cond, &mut Role::Plain, None)).unwrap();
    let rms = resampled.last().unwrap().1.rms_diff(&job.latents).unwrap();
    assert!(rms <= 1e-4, "re-evaluated single-step round trip rms {rms:e}");
}

/// Regression pin: 50-step inversion and resampling of the 8-frame fixture
/// with the untrained seeded model.
const PINNED_ROUND_TRIP_RMS: f32 = 17.976_55;

#[test]
fn fifty_step_round_trip_rms_is_pinned() {
    let (model, job) = setup(NetConfig::default());
    let s = NoiseSchedule::default();
    let a = reconstruct(&model, &job, &sampler(50, 1.0), &s).unwrap();
    let rms = a.latents.rms_diff(&job.latents).unwrap();
    assert!((rms - PINNED_ROUND_TRIP_RMS).abs() <= 1e-2 * PINNED_ROUND_TRIP_RMS, "rms {rms}");
    let b = reconstruct(&model, &job, &sampler(50, 1.0), &s).unwrap();
    assert_eq!(a.latents, b.latents);
}

#[test]
fn edit_without_injection_on_coincident_skeletons_equals_reconstruction() {
    let (model, mut job) = setup(NetConfig::default());
    job.reference_skeletons = job.source_skeletons.clone();
    job.reference_masks = job.source_masks.clone();
    job.target_prompt = job.source_prompt.clone();
    let cfg = EditConfig {
        injection: InjectionPolicy::disabled(),
        ..sampler(50, 1.0)
    };
    let s = NoiseSchedule::default();
    let edited = edit(&model, &job, &cfg, &s).unwrap();
    let recon = reconstruct(&model, &job, &cfg, &s).unwrap();
    assert_eq!(edited.edited, recon.latents);
    assert_eq!(edited.reconstruction, recon.latents);
    assert_eq!(edited.coverage, 0);
    assert!(edited.active_steps.is_empty());
}

#[test]
fn full_edit_exercises_every_gated_layer() {
    let cfg = NetConfig::default();
    let (model, job) = setup(cfg.clone());
    let steps = 50;
    let out = edit(&model, &job, &sampler(steps, 7.5), &NoiseSchedule::default()).unwrap();
    assert!(out.edited.all_finite() && out.reconstruction.all_finite());
    assert_eq!(out.edited.shape(), job.latents.shape());
    let decoder_layers = 2;
    assert_eq!(out.coverage, decoder_layers * steps * cfg.frames);
    // Conditional and unconditional passes both read the cache.
    assert_eq!(out.cache_cs_reads, 2 * out.coverage);
    assert_eq!(out.recomputed_recon_kv, 0);
    assert_eq!(out.active_steps, (0..steps).collect::<Vec<_>>());
    assert_ne!(out.edited, out.reconstruction);
    assert_eq!(out.aligned.len(), cfg.frames);
}

#[test]
fn trailing_fraction_limits_injection_to_the_last_steps() {
    let (model, job) = setup(small());
    let cfg = EditConfig {
        injection: InjectionPolicy {
            trailing_fraction: 0.3,
            ..InjectionPolicy::default()
        },
        ..sampler(10, 2.0)
    };
    let out = edit(&model, &job, &cfg, &NoiseSchedule::default()).unwrap();
    assert_eq!(out.active_steps, [7, 8, 9]);
    assert_eq!(out.coverage, 2 * 3 * 2);
    assert_eq!(out.recomputed_recon_kv, 0);
}

#[test]
fn empty_reference_mask_reports_its_frame() {
    let (model, mut job) = setup(NetConfig::default());
    let m = &job.reference_masks[3];
    job.reference_masks[3] = Raster::new(m.width, m.height);
    let err = edit(&model, &job, &sampler(2, 1.0), &NoiseSchedule::default()).unwrap_err();
    assert!(matches!(err, Error::Frame { frame: 3, .. }), "{err}");
    assert!(err.to_string().starts_with("frame 3"), "{err}");
}

#[test]
fn job_frame_counts_are_validated() {
    let (model, mut job) = setup(small());
    job.source_masks.pop();
    assert!(job.validate().is_err());
    assert!(edit(&model, &job, &sampler(2, 1.0), &NoiseSchedule::default()).is_err());
    assert!(reconstruct(&model, &job, &sampler(2, 1.0), &NoiseSchedule::default()).is_err());
}

/// Paired runs at the full training protocol (300 steps, lr 3e-5). Shorter
/// runs do not reliably help: at 100 steps the reconstruction gets worse.
#[test]
fn training_improves_reconstruction() {
    let (mut model, job) = setup(NetConfig::default());
    let s = NoiseSchedule::default();
    let cfg = sampler(50, 1.0);
    let before = reconstruct(&model, &job, &cfg, &s).unwrap().latents.rms_diff(&job.latents).unwrap();
    one_shot_train(&mut model, &job.latents, &job.source_skeletons, &job.source_prompt, &TrainConfig::default(), &s, 3).unwrap();
    let after = reconstruct(&model, &job, &cfg, &s).unwrap().latents.rms_diff(&job.latents).unwrap();
    assert!(after <= before, "reconstruction rms {before} -> {after}");
}
