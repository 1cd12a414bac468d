//! Deterministic invariant checks run by `motionedit selftest` and the
//! acceptance suite.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use motionedit_core::adapter::{adapter_forward, adapter_grad_check, AdapterWeights};
use motionedit_core::attention::{
    attend, content_cross_attention_video, cs_attention, cs_attention_video, temporal_attention_video, FrameTokens,
    ProjectionSet,
};
use motionedit_core::diffusion::{ddim_invert_step, ddim_step, q_sample, sample_loop, NoiseSchedule, Timestep};
use motionedit_core::fixture::synthetic_video;
use motionedit_core::gradcheck::{self, GradCheckOptions, GradReport};
use motionedit_core::injection::{build_injected_kv, decouple_kv, Decoupled, InjectionPolicy, ReconCache};
use motionedit_core::network::{
    controlnet_forward, grad_check_model, text_context, unet_forward, unet_forward_with, unet_grad_check, InjectionMasks,
    NetConfig, Probe, Role, LAYERS,
};
use motionedit_core::pipeline::{base_model, edit, one_shot_train, reconstruct, EditConfig, EditJob, SamplerConfig, TrainConfig};
use motionedit_core::raster::Raster;
use motionedit_core::rng::{seeded, stream, Rng};
use motionedit_core::skeleton::{align, body_mask, bounding_rect, default_bones, render_keypoints, stick_figure, translate_nearest, BBox};
use motionedit_core::tensor::with_corrupted_backward;
use motionedit_core::Tensor;
use rand::Rng as _;

/// `Ok(detail)` passes, `Err(detail)` fails.
pub type Outcome = std::result::Result<String, String>;

#[derive(Clone, Copy)]
pub struct Check {
    pub name: &'static str,
    /// Checks in one group together cover one property.
    pub group: &'static str,
    pub run: fn() -> Outcome,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub group: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

/// Primitives whose backward rule `--corrupt-backward` can sabotage.
pub const BACKWARD_OPS: [&str; 22] = [
    "add", "sub", "mul", "scale", "add_scalar", "add_row", "mul_row", "silu", "tanh", "matmul", "bmm", "reshape", "permute",
    "slice", "concat", "gather", "softmax", "layer_norm", "sum", "mean", "mse", "conv_temporal",
];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: motionedit_core::Error) -> String {
    e.to_string()
}

// ---- partition, duplication, layout ----

fn partition() -> Outcome {
    let mut rng = stream(1, "selftest-partition");
    for case in 0..100 {
        let (n, d) = (rng.random_range(1..=64), rng.random_range(1..=32));
        let density: f64 = rng.random();
        let bits: Vec<f32> = (0..n).map(|_| f32::from(u8::from(rng.random_bool(density)))).collect();
        let mask = Tensor::from_vec(&[n], bits).map_err(err)?;
        let k = Tensor::randn(&[n, d], 1.0, &mut rng);
        let v = Tensor::randn(&[n, d], 1.0, &mut rng);
        let p = decouple_kv(&k, &v, &mask).map_err(err)?;
        ensure(p.k_fg.add(&p.k_bg).map_err(err)? == k, || format!("case {case}: K_fg + K_bg != K (n={n}, d={d})"))?;
        ensure(p.v_fg.add(&p.v_bg).map_err(err)? == v, || format!("case {case}: V_fg + V_bg != V (n={n}, d={d})"))?;
    }
    Ok("100 fixtures bit-exact".into())
}

fn duplication() -> Outcome {
    let mut rng = stream(2, "selftest-duplication");
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let (n, d) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let p = ProjectionSet::random(d, &mut rng);
        let z = FrameTokens::new(Tensor::randn(&[n, d], 1.0, &mut rng)).map_err(err)?;
        let cs = cs_attention(&z, &z, &p).map_err(err)?;
        let x = &z.0;
        let plain = attend(&x.matmul(&p.w_q).map_err(err)?, &x.matmul(&p.w_k).map_err(err)?, &x.matmul(&p.w_v).map_err(err)?)
            .and_then(|a| a.matmul(&p.w_out))
            .map_err(err)?;
        worst = worst.max(cs.0.max_abs_diff(&plain).map_err(err)?);
    }
    ensure(worst <= 1e-5, || format!("max |diff| {worst:.3e} > 1e-5"))?;
    Ok(format!("50 fixtures, max |diff| {worst:.2e}"))
}

fn injection_layout() -> Outcome {
    let mut rng = stream(3, "selftest-layout");
    let mut cases = 0;
    for frames in [1, 2, 4] {
        for n in 1..=16 {
            for d in [1, 3, 8, 16] {
                let mut r = |s: &[usize]| Tensor::randn(s, 1.0, &mut rng);
                let recon = Decoupled {
                    k_fg: r(&[frames, 2 * n, d]),
                    v_fg: r(&[frames, 2 * n, d]),
                    k_bg: r(&[frames, 2 * n, d]),
                    v_bg: r(&[frames, 2 * n, d]),
                };
                let (k_cu, v_cu) = (r(&[frames, n, d]), r(&[frames, n, d]));
                let (k, v) = build_injected_kv(&recon, &k_cu, &v_cu).map_err(err)?;
                let shape = || format!("F={frames}, N={n}, d={d}");
                ensure(k.shape() == [frames, 5 * n, d] && v.shape() == k.shape(), || format!("{}: shape {:?}", shape(), k.shape()))?;
                let parts = [
                    (&k, 0, 2 * n, &recon.k_fg),
                    (&k, 2 * n, 2 * n, &recon.k_bg),
                    (&k, 4 * n, n, &k_cu),
                    (&v, 0, 2 * n, &recon.v_fg),
                    (&v, 2 * n, 2 * n, &recon.v_bg),
                    (&v, 4 * n, n, &v_cu),
                ];
                for (whole, start, len, want) in parts {
                    ensure(whole.slice(1, start, len).map_err(err)? == *want, || format!("{}: block at {start} differs", shape()))?;
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} shapes, 5N tokens, blocks bit-exact"))
}

// ---- decoder-only gating ----

fn decoder_gating() -> Outcome {
    let cfg = NetConfig::default();
    let video = synthetic_video(&cfg, 11).map_err(err)?;
    let m = base_model(cfg.clone(), 1).map_err(err)?;
    let t = 500;
    let z_rec = video.latents.clone();
    let z_edit = Tensor::randn(&cfg.latent_shape(), 1.0, &mut seeded(12));
    let text = text_context(&m, Some(&video.target_prompt)).map_err(err)?;
    let control = controlnet_forward(&m, &z_edit, t, &video.reference.skeletons).map_err(err)?;
    let mut cache = ReconCache::new();
    unet_forward(&m, &z_rec, t, &text, None, &mut Role::Record { cache: &mut cache, inject_mid: false }).map_err(err)?;
    let masks = InjectionMasks::new(&cfg.topology(), &video.source.masks, false).map_err(err)?;
    let run = |policy: InjectionPolicy| -> std::result::Result<BTreeMap<String, Tensor>, String> {
        let mut trace = BTreeMap::new();
        let active = policy.enabled;
        let mut role = Role::Inject { cache: &cache, masks: &masks, policy: &policy, active };
        let probe = Probe { stats: None, trace: Some(&mut trace) };
        unet_forward_with(&cfg, &m.params, &z_edit, t, &text, Some(&control), &mut role, probe).map_err(err)?;
        Ok(trace)
    };
    let on = run(InjectionPolicy::default())?;
    let off = run(InjectionPolicy::disabled())?;
    let topo = cfg.topology();
    let (mut same, mut changed) = (0, 0);
    for layer in LAYERS {
        let gated = topo.gate(layer, false).map_err(err)?;
        for (key, a) in on.iter().filter(|(k, _)| k.starts_with(&format!("{layer}."))) {
            let b = &off[key];
            if gated {
                changed += usize::from(a != b);
            } else {
                ensure(a == b, || format!("encoder attention {key} changed under injection"))?;
                same += 1;
            }
        }
    }
    ensure(changed > 0, || "injection changed no decoder attention output".into())?;
    Ok(format!("{same} encoder outputs identical, {changed} decoder outputs injected"))
}

// ---- DDIM ----

fn oracle_eps(x: &Tensor, t: usize, x0: &Tensor, s: &NoiseSchedule) -> motionedit_core::Result<Tensor> {
    let ab = s.alpha_bar[t];
    let data = x
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&x, &x0)| ((x as f64 - ab.sqrt() * x0 as f64) / (1.0 - ab).sqrt()) as f32)
        .collect();
    Tensor::from_vec(x.shape(), data)
}

fn ddim_oracle_round_trip() -> Outcome {
    let s = NoiseSchedule::default();
    let mut rng = stream(5, "selftest-ddim");
    let x0 = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng);
    let eps = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng);
    let ts = s.strided(50).map_err(err)?;
    let x_t = q_sample(&x0, Timestep::Step(ts[49]), &eps, &s).map_err(err)?;
    let traj = sample_loop(&x_t, &ts, &s, |x, t| oracle_eps(x, t, &x0, &s)).map_err(err)?;
    let rms = traj.last().map(|(_, x)| x.rms_diff(&x0)).transpose().map_err(err)?.unwrap_or(f32::INFINITY);
    ensure(rms <= 1e-4, || format!("rms {rms:.3e} > 1e-4"))?;
    Ok(format!("50 steps, rms {rms:.2e}"))
}

fn ddim_step_inverse() -> Outcome {
    let s = NoiseSchedule::default();
    let mut rng = stream(6, "selftest-ddim-inverse");
    let ts = s.strided(50).map_err(err)?;
    let mut worst = 0.0f32;
    let bounds = std::iter::once(Timestep::Clean).chain(ts.iter().map(|&t| Timestep::Step(t))).collect::<Vec<_>>();
    for w in bounds.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let x = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng);
        let eps = Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng);
        let up = ddim_invert_step(&x, &eps, lo, hi, &s).map_err(err)?;
        let back = ddim_step(&up, &eps, hi, lo, &s).map_err(err)?;
        let down = ddim_step(&x, &eps, hi, lo, &s).map_err(err)?;
        let again = ddim_invert_step(&down, &eps, lo, hi, &s).map_err(err)?;
        worst = worst.max(back.max_abs_diff(&x).map_err(err)?).max(again.max_abs_diff(&x).map_err(err)?);
    }
    ensure(worst <= 1e-6, || format!("max |diff| {worst:.3e} > 1e-6"))?;
    Ok(format!("{} step pairs, max |diff| {worst:.2e}", bounds.len() - 1))
}

// ---- gradients ----

fn project(y: &Tensor, rng_seed: u64) -> motionedit_core::Result<Tensor> {
    let r = Tensor::randn(y.shape(), 1.0, &mut seeded(rng_seed));
    y.mul(&r)?.sum()
}

fn report_outcome(r: GradReport) -> Outcome {
    let names = r.entries.len();
    if r.passed() {
        Ok(format!("{names} inputs, worst rel {:.2e}", r.worst()))
    } else {
        let bad: Vec<String> = r.failures().iter().map(|e| format!("{} {:.2e}", e.name, e.rel_error)).collect();
        Err(format!("{} of {names} inputs over 1e-3: {}", bad.len(), bad.join(", ")))
    }
}

type Fwd = dyn Fn(&[Tensor]) -> motionedit_core::Result<Tensor>;

fn grad(inputs: &[(&str, Tensor)], f: &Fwd) -> Outcome {
    let r = gradcheck::check(inputs, f, GradCheckOptions::default()).map_err(err)?;
    report_outcome(r)
}

fn r(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

macro_rules! primitive_checks {
    ($($name:ident => |$rng:ident| $body:expr;)*) => {
        $(
            fn $name() -> Outcome {
                let mut $rng = stream(7, stringify!($name));
                $body
            }
        )*
        const PRIMITIVE_CHECKS: &[(&str, fn() -> Outcome)] = &[$((concat!("grad.", stringify!($name)), $name)),*];
    };
}

primitive_checks! {
    add => |g| { let (a, b) = (r(&mut g, &[3, 4]), r(&mut g, &[3, 4])); grad(&[("a", a), ("b", b)], &|x| project(&x[0].add(&x[1])?, 1)) };
    sub => |g| { let (a, b) = (r(&mut g, &[3, 4]), r(&mut g, &[3, 4])); grad(&[("a", a), ("b", b)], &|x| project(&x[0].sub(&x[1])?, 2)) };
    mul => |g| { let (a, b) = (r(&mut g, &[3, 4]), r(&mut g, &[3, 4])); grad(&[("a", a), ("b", b)], &|x| project(&x[0].mul(&x[1])?, 3)) };
    scale => |g| grad(&[("a", r(&mut g, &[3, 4]))], &|x| project(&x[0].scale(-1.7)?, 4));
    add_scalar => |g| grad(&[("a", r(&mut g, &[3, 4]))], &|x| project(&x[0].add_scalar(0.3)?, 5));
    add_row => |g| { let (a, b) = (r(&mut g, &[3, 4]), r(&mut g, &[4])); grad(&[("x", a), ("row", b)], &|x| project(&x[0].add_row(&x[1])?, 6)) };
    mul_row => |g| { let (a, b) = (r(&mut g, &[3, 4]), r(&mut g, &[4])); grad(&[("x", a), ("row", b)], &|x| project(&x[0].mul_row(&x[1])?, 7)) };
    silu => |g| grad(&[("a", r(&mut g, &[3, 4]))], &|x| project(&x[0].silu()?, 8));
    tanh => |g| grad(&[("a", r(&mut g, &[3, 4]))], &|x| project(&x[0].tanh()?, 9));
    matmul => |g| { let (a, b) = (r(&mut g, &[3, 4]), r(&mut g, &[4, 2])); grad(&[("a", a), ("b", b)], &|x| project(&x[0].matmul(&x[1])?, 10)) };
    bmm => |g| { let (a, b) = (r(&mut g, &[2, 3, 4]), r(&mut g, &[2, 4, 2])); grad(&[("a", a), ("b", b)], &|x| project(&x[0].bmm(&x[1])?, 11)) };
    reshape => |g| grad(&[("x", r(&mut g, &[2, 3, 4]))], &|x| project(&x[0].reshape(&[6, 4])?, 12));
    permute => |g| grad(&[("x", r(&mut g, &[2, 3, 4]))], &|x| project(&x[0].permute(&[2, 0, 1])?, 13));
    slice => |g| grad(&[("x", r(&mut g, &[2, 3, 4]))], &|x| project(&x[0].slice(1, 1, 2)?, 14));
    concat => |g| { let (a, b) = (r(&mut g, &[2, 3, 4]), r(&mut g, &[2, 1, 4])); grad(&[("a", a), ("b", b)], &|x| project(&Tensor::concat(&[&x[0], &x[1]], 1)?, 15)) };
    gather => |g| {
        let idx = Arc::new(vec![Some(1), None, Some(0), Some(1)]);
        grad(&[("x", r(&mut g, &[2, 3, 4]))], &move |x| project(&x[0].gather(idx.clone())?, 16))
    };
    softmax => |g| grad(&[("x", r(&mut g, &[3, 5]))], &|x| project(&Tensor::concat(&[&x[0].softmax(0)?, &x[0].softmax(1)?], 0)?, 17));
    layer_norm => |g| {
        let (x, gm, b) = (r(&mut g, &[3, 8]), r(&mut g, &[8]), r(&mut g, &[8]));
        grad(&[("x", x), ("gamma", gm), ("beta", b)], &|v| project(&v[0].layer_norm(&v[1], &v[2], 1e-5)?, 18))
    };
    sum => |g| grad(&[("x", r(&mut g, &[3, 4]))], &|x| x[0].mul(&x[0])?.sum());
    mean => |g| grad(&[("x", r(&mut g, &[3, 4]))], &|x| x[0].mul(&x[0])?.mean());
    mse => |g| { let (a, b) = (r(&mut g, &[3, 4]), r(&mut g, &[3, 4])); grad(&[("a", a), ("b", b)], &|x| x[0].mse(&x[1])) };
    conv_temporal => |g| {
        let (x, k, shared) = (r(&mut g, &[4, 2, 3]), r(&mut g, &[3, 2, 3]), r(&mut g, &[3]));
        grad(&[("x", x.clone()), ("kernel", k)], &|v| project(&v[0].conv_temporal(&v[1])?, 19))?;
        grad(&[("x", x), ("shared", shared)], &|v| project(&v[0].conv_temporal(&v[1])?, 20))
    };
}

fn attention_inputs(rng: &mut Rng, extra: &[(&'static str, &[usize])]) -> Vec<(&'static str, Tensor)> {
    let p = ProjectionSet::random(6, rng);
    let mut v: Vec<(&'static str, Tensor)> = p.tensors().iter().map(|(n, t)| (*n, (*t).clone())).collect();
    for (name, shape) in extra {
        v.push((name, Tensor::randn(shape, 1.0, rng)));
    }
    v
}

fn pset(x: &[Tensor]) -> motionedit_core::Result<ProjectionSet> {
    ProjectionSet::new(x[0].clone(), x[1].clone(), x[2].clone(), x[3].clone())
}

fn grad_attend() -> Outcome {
    let mut g = stream(8, "attend");
    let (q, k, v) = (r(&mut g, &[4, 6]), r(&mut g, &[5, 6]), r(&mut g, &[5, 3]));
    grad(&[("q", q), ("k", k), ("v", v)], &|x| project(&attend(&x[0], &x[1], &x[2])?, 21))
}

fn grad_cs_attention() -> Outcome {
    let inputs = attention_inputs(&mut stream(8, "cs"), &[("z", &[3, 4, 6])]);
    grad(&inputs, &|x| project(&cs_attention_video(&x[4], &pset(x)?)?, 22))
}

fn grad_temporal_attention() -> Outcome {
    let inputs = attention_inputs(&mut stream(8, "temporal"), &[("z", &[3, 4, 6])]);
    grad(&inputs, &|x| project(&temporal_attention_video(&x[4], &pset(x)?)?, 23))
}

fn grad_cross_attention() -> Outcome {
    let inputs = attention_inputs(&mut stream(8, "cross"), &[("z", &[3, 4, 6]), ("m", &[3, 5, 6])]);
    grad(&inputs, &|x| project(&content_cross_attention_video(&x[5], &x[4], &pset(x)?)?, 24))
}

fn grad_adapter() -> Outcome {
    let w = AdapterWeights::random(6, &mut stream(9, "adapter"));
    report_outcome(adapter_grad_check(&w, 9).map_err(err)?)
}

fn grad_unet() -> Outcome {
    let m = grad_check_model(31).map_err(err)?;
    let names: Vec<&str> = m.params.names().map(String::as_str).collect();
    report_outcome(unet_grad_check(&m, &names, 2, 32).map_err(err)?)
}

// ---- alignment ----

fn figure(cx: f64, cy: f64, s: f64, phase: f64) -> motionedit_core::Result<(Raster, Raster)> {
    let k = stick_figure(cx, cy, s, phase);
    let bones = default_bones();
    Ok((render_keypoints(&k, 64, 64, &bones)?, body_mask(&k, 64, 64, &bones, 2.5)))
}

fn rect(w: usize, h: usize, b: BBox) -> Raster {
    let mut r = Raster::new(w, h);
    for y in b.y..b.y + b.h {
        for x in b.x..b.x + b.w {
            r.set(x, y, 1);
        }
    }
    r
}

fn align_identity() -> Outcome {
    for phase in [0.0, 0.7, 2.1] {
        let (s, m) = figure(30.0, 33.0, 11.0, phase).map_err(err)?;
        let a = align(&s, &m, &s, &m).map_err(err)?;
        ensure(a.skeleton == s && a.mask == m, || format!("phase {phase}: aligned skeleton differs from source"))?;
        ensure(a.report.scale == 1.0 && a.report.offset == [0.0, 0.0], || format!("phase {phase}: {:?}", a.report))?;
    }
    Ok("3 poses reproduced exactly".into())
}

fn align_translation() -> Outcome {
    let (s, m) = figure(30.0, 30.0, 10.0, 0.4).map_err(err)?;
    for (dx, dy) in [(6i32, 6i32), (-6, -6), (5, -3), (-4, 7)] {
        let shift = |r: &Raster| translate_nearest(r, dx as f64, dy as f64);
        let a = align(&s, &m, &shift(&s), &shift(&m)).map_err(err)?;
        let want = [-dx as f64, -dy as f64];
        ensure(a.report.offset == want, || format!("shift ({dx}, {dy}): offset {:?}", a.report.offset))?;
        ensure(a.skeleton == s, || format!("shift ({dx}, {dy}): skeleton not restored"))?;
    }
    Ok("4 offsets recovered exactly".into())
}

fn align_resize() -> Outcome {
    let src = BBox { x: 10, y: 14, w: 40, h: 100 };
    let refb = BBox { x: 60, y: 20, w: 25, h: 50 };
    let (ms, mr) = (rect(128, 128, src), rect(128, 128, refb));
    let a = align(&ms, &ms, &mr, &mr).map_err(err)?;
    let rep = &a.report;
    ensure(rep.scaled_width == 50 && rep.ratio == 0.5 && rep.scale == 2.0, || format!("{rep:?}"))?;
    let b = bounding_rect(&a.mask).map_err(err)?;
    ensure(b == BBox { x: 5, y: 14, w: 50, h: 100 }, || format!("aligned box {b:?}"))?;
    Ok("h_s=100, h_r=50, w_r=25 gives width 50".into())
}

// ---- adapter, pipeline ----

fn adapter_identity() -> Outcome {
    let mut rng = stream(10, "selftest-adapter-identity");
    for case in 0..20 {
        let (f, n, d) = (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=8));
        let w = AdapterWeights::init(d, &mut rng);
        let m = Tensor::randn(&[f, n, d], 1.0, &mut rng);
        let z = Tensor::randn(&[f, n, d], 1.0, &mut rng);
        ensure(adapter_forward(&m, &z, &w).map_err(err)? == m, || format!("case {case}: output differs from control input"))?;
    }
    Ok("20 fixtures bit-exact".into())
}

fn branch_equivalence() -> Outcome {
    let cfg = NetConfig::default();
    let model = base_model(cfg.clone(), 1).map_err(err)?;
    let mut job = EditJob::from_video(&synthetic_video(&cfg, 11).map_err(err)?);
    job.reference_skeletons = job.source_skeletons.clone();
    job.reference_masks = job.source_masks.clone();
    job.target_prompt = job.source_prompt.clone();
    let ec = EditConfig {
        sampler: SamplerConfig { steps: 50, guidance: 1.0 },
        injection: InjectionPolicy::disabled(),
        ..EditConfig::default()
    };
    let s = NoiseSchedule::default();
    let edited = edit(&model, &job, &ec, &s).map_err(err)?;
    let recon = reconstruct(&model, &job, &ec, &s).map_err(err)?;
    ensure(edited.edited == recon.latents, || {
        format!("edit differs from reconstruction, max |diff| {:?}", edited.edited.max_abs_diff(&recon.latents))
    })?;
    Ok("50 steps, bit-identical".into())
}

fn small_job() -> std::result::Result<(motionedit_core::network::Model, EditJob), String> {
    let cfg = NetConfig { frames: 2, ..NetConfig::default() };
    let model = base_model(cfg.clone(), 1).map_err(err)?;
    Ok((model, EditJob::from_video(&synthetic_video(&cfg, 11).map_err(err)?)))
}

fn cache_discipline() -> Outcome {
    let (model, job) = small_job()?;
    let steps = 4;
    let ec = EditConfig {
        sampler: SamplerConfig { steps, guidance: 2.0 },
        ..EditConfig::default()
    };
    let out = edit(&model, &job, &ec, &NoiseSchedule::default()).map_err(err)?;
    let want = 2 * steps * job.frames();
    ensure(out.recomputed_recon_kv == 0, || format!("{} reconstruction K/V recomputed", out.recomputed_recon_kv))?;
    ensure(out.coverage == want, || format!("coverage {} != {want}", out.coverage))?;
    ensure(out.edited.all_finite(), || "non-finite output".into())?;
    Ok(format!("coverage {}, {} cache reads, 0 recomputed", out.coverage, out.cache_cs_reads))
}

fn freeze_discipline() -> Outcome {
    let (mut model, job) = small_job()?;
    let before = model.trainable_checksum();
    let cfg = TrainConfig { steps: 3, ..TrainConfig::default() };
    let rep = one_shot_train(&mut model, &job.latents, &job.source_skeletons, &job.source_prompt, &cfg, &NoiseSchedule::default(), 3)
        .map_err(err)?;
    ensure(rep.frozen_checksum_before == rep.frozen_checksum_after, || "frozen checksum changed".into())?;
    ensure(rep.group_grad_norms.iter().all(|g| g["frozen"] == 0.0), || "frozen gradient norm nonzero".into())?;
    ensure(model.trainable_checksum() != before, || "trainable weights did not move".into())?;
    Ok("3 steps, frozen checksum unchanged".into())
}

pub fn registry() -> Vec<Check> {
    let mut v = vec![
        Check { name: "partition", group: "partition", run: partition },
        Check { name: "duplication", group: "duplication", run: duplication },
        Check { name: "injection_layout", group: "layout", run: injection_layout },
        Check { name: "decoder_gating", group: "gating", run: decoder_gating },
        Check { name: "ddim.oracle_round_trip", group: "ddim", run: ddim_oracle_round_trip },
        Check { name: "ddim.step_inverse", group: "ddim", run: ddim_step_inverse },
    ];
    v.extend(PRIMITIVE_CHECKS.iter().map(|&(name, run)| Check { name, group: "gradient", run }));
    v.extend([
        Check { name: "grad.attend", group: "gradient", run: grad_attend },
        Check { name: "grad.cs_attention", group: "gradient", run: grad_cs_attention },
        Check { name: "grad.temporal_attention", group: "gradient", run: grad_temporal_attention },
        Check { name: "grad.cross_attention", group: "gradient", run: grad_cross_attention },
        Check { name: "grad.adapter", group: "gradient", run: grad_adapter },
        Check { name: "grad.unet", group: "gradient", run: grad_unet },
        Check { name: "align.identity", group: "alignment", run: align_identity },
        Check { name: "align.translation", group: "alignment", run: align_translation },
        Check { name: "align.resize", group: "alignment", run: align_resize },
        Check { name: "adapter_identity", group: "adapter_identity", run: adapter_identity },
        Check { name: "branch_equivalence", group: "branch", run: branch_equivalence },
        Check { name: "cache_discipline", group: "cache", run: cache_discipline },
        Check { name: "freeze_discipline", group: "freeze", run: freeze_discipline },
    ]);
    v
}

pub fn run_check(c: &Check, corrupt: Option<&'static str>) -> CheckResult {
    let start = Instant::now();
    let outcome = match corrupt {
        Some(op) => with_corrupted_backward(op, c.run),
        None => (c.run)(),
    };
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        name: c.name,
        group: c.group,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Runs every check whose name or group starts with one of `only` (all when
/// empty).
pub fn run(only: &[String], corrupt: Option<&'static str>) -> Vec<CheckResult> {
    registry()
        .iter()
        .filter(|c| only.is_empty() || only.iter().any(|o| c.name.starts_with(o.as_str()) || c.group == o))
        .map(|c| run_check(c, corrupt))
        .collect()
}

pub fn table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        s += &format!("{status}  {:<width$}  {:>8.3} s  {}\n", r.name, r.elapsed.as_secs_f64(), r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let total: f64 = results.iter().map(|r| r.elapsed.as_secs_f64()).sum();
    s += &format!("{} checks, {failed} failed, {total:.1} s\n", results.len());
    s
}
