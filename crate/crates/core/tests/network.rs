use std::collections::BTreeMap;

use motionedit_core::injection::{InjectionPolicy, ReconCache};
use motionedit_core::network::*;
use motionedit_core::raster::Raster;
use motionedit_core::rng::{seeded, stream};
use motionedit_core::skeleton::{default_bones, render_keypoints, stick_figure};
use motionedit_core::Tensor;
use rand::seq::SliceRandom;

fn small() -> NetConfig {
    NetConfig {
        frames: 2,
        ..NetConfig::default()
    }
}

fn latents(cfg: &NetConfig, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::randn(&cfg.latent_shape(), 1.0, &mut rng)
}

fn figures(cfg: &NetConfig, scale: f64) -> Vec<Raster> {
    let (h, w) = (cfg.image_height(), cfg.image_width());
    (0..cfg.frames)
        .map(|i| {
            let k = stick_figure(w as f64 / 2.0, h as f64 / 2.0, h as f64 / scale, 0.5 * i as f64);
            render_keypoints(&k, h, w, &default_bones()).unwrap()
        })
        .collect()
}

fn masks(cfg: &NetConfig) -> Vec<Raster> {
    let (h, w) = (cfg.image_height(), cfg.image_width());
    (0..cfg.frames)
        .map(|i| {
            let mut r = Raster::new(w, h);
            for y in 6..26 {
                for x in 10 + i..20 + i {
                    r.set(x, y, 1);
                }
            }
            r
        })
        .collect()
}

#[test]
fn output_shape_matches_input() {
    let m = Model::init(small(), 1).unwrap();
    let z = latents(&m.config, 2);
    assert_eq!(z.shape(), &[2, 4, 8, 8]);
    let text = text_context(&m, Some("a person")).unwrap();
    let eps = unet_forward(&m, &z, 10, &text, None, &mut Role::Plain).unwrap();
    assert_eq!(eps.shape(), z.shape());
}

#[test]
fn forward_is_deterministic() {
    let cfg = small();
    let (a, b) = (Model::init(cfg.clone(), 5).unwrap(), Model::init(cfg.clone(), 5).unwrap());
    assert_eq!(a, b);
    assert_ne!(a.params, Model::init(cfg, 6).unwrap().params);
    let z = latents(&a.config, 3);
    let text = text_context(&a, None).unwrap();
    let poses = figures(&a.config, 4.0);
    let run = |m: &Model| {
        let c = controlnet_forward(m, &z, 300, &poses).unwrap();
        unet_forward(m, &z, 300, &text, Some(&c), &mut Role::Plain).unwrap()
    };
    assert_eq!(run(&a), run(&b));
}

#[test]
fn forward_matches_f64_reference() {
    let m = grad_check_model(21).unwrap();
    let (z, poses, text, t) = oracle_inputs(&m, 22).unwrap();
    let c = controlnet_forward(&m, &z, t, &poses).unwrap();
    let eps = latent_to_tokens(&unet_forward(&m, &z, t, &text, Some(&c), &mut Role::Plain).unwrap()).unwrap();
    let want = reference::conditioned_eps(&m.config, &reference::Weights::new(&m.params), &[], &reference_inputs(&z, &poses, &text, t));
    for (i, (g, w)) in eps.data().iter().zip(&want).enumerate() {
        assert!((*g as f64 - w).abs() < 1e-4, "element {i}: {g} vs {w}");
    }
}

#[test]
fn zero_conditioning_is_neutral() {
    let m = Model::init(small(), 7).unwrap();
    let z = latents(&m.config, 8);
    let text = text_context(&m, Some("a dancer")).unwrap();
    let c = controlnet_forward(&m, &z, 100, &figures(&m.config, 4.0)).unwrap();
    let plain = unet_forward(&m, &z, 100, &text, None, &mut Role::Plain).unwrap();
    let cond = unet_forward(&m, &z, 100, &text, Some(&c), &mut Role::Plain).unwrap();
    assert_eq!(plain, cond);
}

#[test]
fn zero_init_control_residuals_are_zero_and_shaped() {
    let m = Model::init(NetConfig::default(), 9).unwrap();
    let z = latents(&m.config, 10);
    let c = controlnet_forward(&m, &z, 700, &figures(&m.config, 4.0)).unwrap();
    let topo = m.config.topology();
    assert_eq!(c.by_layer.keys().map(String::as_str).collect::<Vec<_>>(), ["enc0", "enc1", "mid"]);
    for (id, r) in &c.by_layer {
        let l = topo.layer(id).unwrap();
        assert_eq!(r.shape(), &[m.config.frames, l.tokens(), l.channels], "{id}");
        assert!(r.data().iter().all(|&v| v == 0.0), "{id}");
    }
    let short = &figures(&m.config, 4.0)[..3];
    assert!(controlnet_forward(&m, &z, 700, short).is_err());
}

#[test]
fn pose_perturbation_changes_residuals_finitely() {
    let m = Model::init(small(), 11).unwrap().with_synthetic_pretraining(11, 1.0);
    let z = latents(&m.config, 12);
    let poses = figures(&m.config, 4.0);
    let base = controlnet_forward(&m, &z, 250, &poses).unwrap();
    let mut bumped = poses.clone();
    bumped[1] = figures(&m.config, 6.0)[1].clone();
    let moved = controlnet_forward(&m, &z, 250, &bumped).unwrap();
    for id in ["enc0", "enc1", "mid"] {
        let (a, b) = (&base.by_layer[id], &moved.by_layer[id]);
        assert!(b.all_finite());
        assert_eq!(a.slice(0, 0, 1).unwrap(), b.slice(0, 0, 1).unwrap(), "{id}: frame 0 must not move");
        assert!(a.slice(0, 1, 1).unwrap().max_abs_diff(&b.slice(0, 1, 1).unwrap()).unwrap() > 1e-4, "{id}");
    }
}

#[test]
fn pose_encoder_pyramid() {
    let m = Model::init(NetConfig::default(), 13).unwrap();
    let cfg = &m.config;
    let blank = Raster::new(cfg.image_width(), cfg.image_height());
    let [a, b] = pose_encode(&m, &blank).unwrap();
    // (N_level, d_level) per level: 8×8 at width 32, 4×4 at width 64.
    assert_eq!(a.shape(), &[64, 32]);
    assert_eq!(b.shape(), &[16, 64]);
    assert!(a.all_finite() && b.all_finite());

    let (h, w) = (cfg.image_height(), cfg.image_width());
    let k = stick_figure(16.0, 16.0, 4.0, 0.0);
    let mut bones = default_bones();
    let full = render_keypoints(&k, h, w, &bones).unwrap();
    bones.pop();
    let missing_one = render_keypoints(&k, h, w, &bones).unwrap();
    assert_ne!(full, missing_one);
    let [fa, fb] = pose_encode(&m, &full).unwrap();
    let [ma, mb] = pose_encode(&m, &missing_one).unwrap();
    assert!(fa != ma || fb != mb);

    assert!(pose_encode(&m, &Raster::new(16, 16)).is_err());
}

/// Records the reconstruction branch at `t`, then returns the traces of an
/// editing pass with and without injection.
fn gating_traces(inject_mid: bool) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
    let m = Model::init(small(), 15).unwrap().with_synthetic_pretraining(15, 1.0);
    let cfg = &m.config;
    let t = 500;
    let (z_rec, z_edit) = (latents(cfg, 16), latents(cfg, 17));
    let text = text_context(&m, Some("a man dancing")).unwrap();
    let control = controlnet_forward(&m, &z_edit, t, &figures(cfg, 5.0)).unwrap();
    let mut cache = ReconCache::new();
    unet_forward(&m, &z_rec, t, &text, None, &mut Role::Record { cache: &mut cache, inject_mid }).unwrap();
    let masks = InjectionMasks::new(&cfg.topology(), &masks(cfg), inject_mid).unwrap();
    let run = |policy: InjectionPolicy| {
        let mut trace = BTreeMap::new();
        let active = policy.enabled;
        let mut role = Role::Inject { cache: &cache, masks: &masks, policy: &policy, active };
        let probe = Probe {
            stats: None,
            trace: Some(&mut trace),
        };
        unet_forward_with(cfg, &m.params, &z_edit, t, &text, Some(&control), &mut role, probe).unwrap();
        trace
    };
    let on = run(InjectionPolicy {
        inject_mid,
        ..InjectionPolicy::default()
    });
    let off = run(InjectionPolicy::disabled());
    (on, off)
}

#[test]
fn injection_touches_only_decoder_attention() {
    let (on, off) = gating_traces(false);
    assert_eq!(on.len(), 15);
    for layer in ["enc0", "enc1", "mid"] {
        for sub in ["cs", "text", "temporal"] {
            let key = format!("{layer}.{sub}");
            assert_eq!(on[&key], off[&key], "{key}");
        }
    }
    for layer in ["dec1", "dec0"] {
        assert_ne!(on[&format!("{layer}.cs")], off[&format!("{layer}.cs")], "{layer}");
        assert_ne!(on[&format!("{layer}.temporal")], off[&format!("{layer}.temporal")], "{layer}");
    }
}

#[test]
fn inject_mid_extends_gating_to_mid() {
    let (on, off) = gating_traces(true);
    for layer in ["enc0", "enc1"] {
        assert_eq!(on[&format!("{layer}.cs")], off[&format!("{layer}.cs")]);
    }
    assert_ne!(on["mid.cs"], off["mid.cs"]);
}

#[test]
fn disabled_injection_matches_plain_role() {
    let m = Model::init(small(), 18).unwrap();
    let z = latents(&m.config, 19);
    let text = text_context(&m, Some("a man")).unwrap();
    let cache = ReconCache::new();
    let masks = InjectionMasks::new(&m.config.topology(), &masks(&m.config), false).unwrap();
    let policy = InjectionPolicy::disabled();
    let plain = unet_forward(&m, &z, 40, &text, None, &mut Role::Plain).unwrap();
    let mut role = Role::Inject { cache: &cache, masks: &masks, policy: &policy, active: false };
    assert_eq!(unet_forward(&m, &z, 40, &text, None, &mut role).unwrap(), plain);
    let mut cache = ReconCache::new();
    let mut rec = Role::Record { cache: &mut cache, inject_mid: false };
    assert_eq!(unet_forward(&m, &z, 40, &text, None, &mut rec).unwrap(), plain);
}

#[test]
fn editing_branch_reads_cache_and_never_recomputes_recon_kv() {
    let m = Model::init(small(), 23).unwrap();
    let cfg = &m.config;
    let text = text_context(&m, None).unwrap();
    let timesteps = [900, 500, 100];
    let mut cache = ReconCache::new();
    for &t in &timesteps {
        let z = latents(cfg, t as u64);
        unet_forward(&m, &z, t, &text, None, &mut Role::Record { cache: &mut cache, inject_mid: false }).unwrap();
    }
    cache.check_complete(&["dec1", "dec0"], &timesteps, cfg.frames).unwrap();

    let masks = InjectionMasks::new(&cfg.topology(), &masks(cfg), false).unwrap();
    for drop in [false, true] {
        let policy = InjectionPolicy {
            drop_masked_tokens: drop,
            ..InjectionPolicy::default()
        };
        let stats = ForwardStats::default();
        for &t in &timesteps {
            let mut role = Role::Inject { cache: &cache, masks: &masks, policy: &policy, active: true };
            let probe = Probe {
                stats: Some(&stats),
                trace: None,
            };
            let eps = unet_forward_with(cfg, &m.params, &latents(cfg, 99), t, &text, None, &mut role, probe).unwrap();
            assert!(eps.all_finite());
        }
        for layer in ["dec1", "dec0"] {
            assert_eq!(ForwardStats::count(&stats.cs_context_kv, layer), 0);
            assert_eq!(ForwardStats::count(&stats.temporal_kv, layer), 0);
            assert_eq!(ForwardStats::count(&stats.cs_injected, layer), timesteps.len() * cfg.frames);
            assert_eq!(ForwardStats::count(&stats.temporal_injected, layer), timesteps.len());
        }
        for layer in ["enc0", "enc1", "mid"] {
            assert_eq!(ForwardStats::count(&stats.cs_injected, layer), 0);
            assert_eq!(ForwardStats::count(&stats.cs_context_kv, layer), timesteps.len() * cfg.frames);
        }
    }

    // A timestep the reconstruction branch never visited is a cache miss.
    let policy = InjectionPolicy::default();
    let mut role = Role::Inject { cache: &cache, masks: &masks, policy: &policy, active: true };
    assert!(unet_forward(&m, &latents(cfg, 1), 300, &text, None, &mut role).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::init(small(), 25).unwrap().with_synthetic_pretraining(25, 1.0);
    m.save(dir.path()).unwrap();
    let back = Model::load(dir.path()).unwrap();
    assert_eq!(back, m);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["meta"]["gating"]["dec0"], true);
    assert_eq!(manifest["meta"]["gating"]["mid"], false);
    assert_eq!(manifest["meta"]["gating_inject_mid"]["mid"], true);
}

#[test]
fn gradients_of_sampled_weights_match_finite_differences() {
    let m = grad_check_model(31).unwrap();
    let mut names: Vec<&str> = m.params.names().map(String::as_str).collect();
    names.shuffle(&mut stream(31, "grad-sample"));
    names.truncate(16);
    // Always cover one weight from each family.
    for extra in ["unet.dec0.cs.w_k", "adapter.mid.cross.w_q", "control.pose.conv1.w", "unet.dec1.temporal.w_v"] {
        if !names.contains(&extra) {
            names.push(extra);
        }
    }
    let report = unet_grad_check(&m, &names, 3, 32).unwrap();
    assert_eq!(report.entries.len(), names.len());
    assert!(report.passed(), "worst {:.2e}: {:?}", report.worst(), report.failures());
}
