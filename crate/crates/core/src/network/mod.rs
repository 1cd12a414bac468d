//! Toy inflated video U-Net ε-predictor, ControlNet-style pose conditioning,
//! and the pose encoder.
//!
//! Activations are channels-last tokens `[F, N, d]` with `N = H·W`. Video
//! latents at the interface are `[F, C, H, W]`. All weights live in one
//! [`ParamStore`] under the prefixes `unet.`, `adapter.`, and `control.`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::adapter::{adapter_forward, AdapterWeights};
use crate::attention::{attend_batched, cs_keys_values, to_locations, ProjectionSet};
use crate::error::{Error, Result};
use crate::gradcheck::{check_against_reference, GradCheckOptions, GradReport};
use crate::injection::{
    build_injected_kv, build_injected_kv_dropped, decouple_kv, inject_temporal, layer_token_mask, InjectionPolicy,
    LayerInfo, ReconCache, Stage, Topology,
};
use crate::params::ParamStore;
use crate::raster::Raster;
use crate::rng::{fnv1a, normal_vec, stream, Rng};
use crate::tensor::Tensor;

pub mod reference;

pub const LN_EPS: f32 = 1e-5;
/// Layers carrying a ControlNet residual and a motion adapter.
pub const CONDITIONED: [&str; 3] = ["enc0", "enc1", "mid"];
/// Every transformer layer, in execution order.
pub const LAYERS: [&str; 5] = ["enc0", "enc1", "mid", "dec1", "dec0"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub frames: usize,
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    /// Image-space downsampling of the stand-in encoder.
    pub image_scale: usize,
    /// Feature widths of the two resolution levels.
    pub widths: [usize; 2],
    pub text_dim: usize,
    pub time_dim: usize,
    /// Pose encoder widths at image/2 and image/4.
    pub pose_widths: [usize; 2],
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            latent_channels: 4,
            latent_height: 8,
            latent_width: 8,
            image_scale: 4,
            widths: [32, 64],
            text_dim: 16,
            time_dim: 32,
            pose_widths: [16, 32],
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let even = self.latent_height.is_multiple_of(2) && self.latent_width.is_multiple_of(2);
        let positive = [self.frames, self.latent_channels, self.text_dim, self.time_dim]
            .iter()
            .chain(&self.widths)
            .chain(&self.pose_widths)
            .all(|&v| v > 0);
        if !even || self.latent_height == 0 || self.latent_width == 0 || !positive || self.image_scale != 4 {
            return Err(Error::Config(format!(
                "network: need positive sizes, even latent grid, image scale 4; got {self:?}"
            )));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("network: time_dim {} must be even", self.time_dim)));
        }
        Ok(())
    }

    pub fn image_height(&self) -> usize {
        self.latent_height * self.image_scale
    }

    pub fn image_width(&self) -> usize {
        self.latent_width * self.image_scale
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [self.frames, self.latent_channels, self.latent_height, self.latent_width]
    }

    /// `(height, width, channels)` of each resolution level.
    pub fn levels(&self) -> [(usize, usize, usize); 2] {
        let (h, w) = (self.latent_height, self.latent_width);
        [(h, w, self.widths[0]), (h / 2, w / 2, self.widths[1])]
    }

    pub fn topology(&self) -> Topology {
        let [l0, l1] = self.levels();
        let layer = |id: &str, stage, (height, width, channels): (usize, usize, usize)| LayerInfo {
            id: id.into(),
            stage,
            height,
            width,
            channels,
        };
        Topology {
            layers: vec![
                layer("enc0", Stage::Encoder, l0),
                layer("enc1", Stage::Encoder, l1),
                layer("mid", Stage::Mid, l1),
                layer("dec1", Stage::Decoder, l1),
                layer("dec0", Stage::Decoder, l0),
            ],
        }
    }

    fn level_of(&self, id: &str) -> usize {
        match id {
            "enc0" | "dec0" => 0,
            _ => 1,
        }
    }
}

/// Whether a parameter is updated by one-shot training.
pub fn is_trainable(name: &str) -> bool {
    name.starts_with("adapter.") || (name.starts_with("unet.") && name.contains(".temporal."))
}

/// Network weights plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetConfig,
    pub params: ParamStore,
}

struct Init<'a> {
    rng: &'a mut Rng,
    store: &'a mut ParamStore,
}

impl Init<'_> {
    fn randn(&mut self, name: String, shape: &[usize], std: f32) {
        let n = shape.iter().product();
        let t = Tensor::from_vec(shape, normal_vec(self.rng, n, std)).expect("init shape");
        self.store.insert(name, t);
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape));
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.store.insert(format!("{prefix}.gamma"), Tensor::ones(&[d]));
        self.zeros(format!("{prefix}.beta"), &[d]);
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, gain: f32) {
        self.randn(format!("{prefix}.w"), &[9 * cin, cout], gain / ((9 * cin) as f32).sqrt());
        self.zeros(format!("{prefix}.b"), &[cout]);
    }

    fn proj(&mut self, prefix: &str, din: usize, d: usize) {
        for (n, i) in [("w_q", d), ("w_k", din), ("w_v", din), ("w_out", d)] {
            self.randn(format!("{prefix}.{n}"), &[i, d], 1.0 / (i as f32).sqrt());
        }
    }

    fn res(&mut self, prefix: &str, cin: usize, cout: usize, time_dim: usize) {
        self.norm(&format!("{prefix}.ln1"), cin);
        self.conv(&format!("{prefix}.conv1"), cin, cout, 1.0);
        self.randn(format!("{prefix}.time.w"), &[time_dim, cout], 1.0 / (time_dim as f32).sqrt());
        self.zeros(format!("{prefix}.time.b"), &[cout]);
        self.norm(&format!("{prefix}.ln2"), cout);
        self.conv(&format!("{prefix}.conv2"), cout, cout, 1.0);
        if cin != cout {
            self.randn(format!("{prefix}.skip.w"), &[cin, cout], 1.0 / (cin as f32).sqrt());
        }
    }

    fn transformer(&mut self, prefix: &str, d: usize, text_dim: usize) {
        for sub in ["cs", "text", "temporal"] {
            self.norm(&format!("{prefix}.ln_{sub}"), d);
        }
        self.proj(&format!("{prefix}.cs"), d, d);
        self.proj(&format!("{prefix}.text"), text_dim, d);
        self.proj(&format!("{prefix}.temporal"), d, d);
    }
}

impl Model {
    /// Seeded U-Net with zero-initialized ControlNet output projections and
    /// identity-at-init adapters.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = &config;
        let [w0, w1] = c.widths;
        {
            let mut rng = stream(seed, "unet");
            let mut it = Init { rng: &mut rng, store: &mut store };
            it.conv("unet.conv_in", c.latent_channels, w0, 1.0);
            it.res("unet.enc0.res", w0, w0, c.time_dim);
            it.transformer("unet.enc0", w0, c.text_dim);
            it.conv("unet.down", w0, w1, 1.0);
            it.res("unet.enc1.res", w1, w1, c.time_dim);
            it.transformer("unet.enc1", w1, c.text_dim);
            it.res("unet.mid.res", w1, w1, c.time_dim);
            it.transformer("unet.mid", w1, c.text_dim);
            it.res("unet.dec1.res", 2 * w1, w1, c.time_dim);
            it.transformer("unet.dec1", w1, c.text_dim);
            it.conv("unet.up", w1, w0, 1.0);
            it.res("unet.dec0.res", 2 * w0, w0, c.time_dim);
            it.transformer("unet.dec0", w0, c.text_dim);
            it.norm("unet.out.ln", w0);
            it.conv("unet.out.conv", w0, c.latent_channels, 1.0);
            it.randn("unet.text.uncond".into(), &[1, c.text_dim], 1.0);
        }
        {
            let mut rng = stream(seed, "adapter");
            for id in CONDITIONED {
                let d = c.widths[c.level_of(id)];
                AdapterWeights::init(d, &mut rng).insert_into(&mut store, &format!("adapter.{id}"));
            }
        }
        {
            let mut rng = stream(seed, "control");
            let mut it = Init { rng: &mut rng, store: &mut store };
            let [p0, p1] = c.pose_widths;
            it.conv("control.pose.conv1", 1, p0, 1.0);
            it.conv("control.pose.conv2", p0, p1, 1.0);
            it.conv("control.pose.conv3", p1, w1, 1.0);
            it.randn("control.pose.level0.w".into(), &[p1, w0], 1.0 / (p1 as f32).sqrt());
            it.conv("control.conv_in", c.latent_channels, w0, 1.0);
            it.res("control.enc0.res", w0, w0, c.time_dim);
            it.conv("control.down", w0, w1, 1.0);
            it.res("control.enc1.res", w1, w1, c.time_dim);
            it.res("control.mid.res", w1, w1, c.time_dim);
            for id in CONDITIONED {
                let d = c.widths[c.level_of(id)];
                it.zeros(format!("control.{id}.zero.w"), &[d, d]);
                it.zeros(format!("control.{id}.zero.b"), &[d]);
            }
        }
        Ok(Self { config, params: store })
    }

    /// Stands in for a pretrained ControlNet: replaces the zero output
    /// projections with seeded random ones so that pose maps steer the U-Net.
    pub fn with_synthetic_pretraining(mut self, seed: u64, gain: f32) -> Self {
        let mut rng = stream(seed, "control-pretrain");
        for id in CONDITIONED {
            let d = self.config.widths[self.config.level_of(id)];
            let std = gain / (d as f32).sqrt();
            let w = Tensor::from_vec(&[d, d], normal_vec(&mut rng, d * d, std)).expect("shape");
            self.params.insert(format!("control.{id}.zero.w"), w);
        }
        self
    }

    pub fn frozen_checksum(&self) -> u64 {
        self.params.checksum(|n| !is_trainable(n))
    }

    pub fn trainable_checksum(&self) -> u64 {
        self.params.checksum(is_trainable)
    }

    pub fn checkpoint_meta(&self) -> serde_json::Value {
        let topo = self.config.topology();
        serde_json::json!({
            "config": self.config,
            "topology": topo,
            "gating": topo.gating_table(false),
            "gating_inject_mid": topo.gating_table(true),
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.params.save_dir(dir, self.checkpoint_meta())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (params, manifest) = ParamStore::load_dir(dir)?;
        let config: NetConfig = serde_json::from_value(manifest.meta["config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        config.validate()?;
        let reference = Model::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::mismatch("checkpoint", got.shape(), t.shape()));
            }
        }
        Ok(Self { config, params })
    }
}

// ---- building blocks ----

fn p<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Tensor> {
    store.get(name)
}

fn norm(x: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    x.layer_norm(p(store, &format!("{prefix}.gamma"))?, p(store, &format!("{prefix}.beta"))?, LN_EPS)
}

/// Row index for a 3×3, padding-1 convolution over `frames` grids of
/// `h × w`, sampled with `stride`. Rows are ordered (frame, out pixel, tap).
fn conv_index(frames: usize, h: usize, w: usize, stride: usize) -> Arc<Vec<Option<usize>>> {
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut idx = Vec::with_capacity(frames * ho * wo * 9);
    for f in 0..frames {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = (oy * stride + ky) as isize - 1;
                        let x = (ox * stride + kx) as isize - 1;
                        let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                        idx.push(inside.then(|| f * h * w + y as usize * w + x as usize));
                    }
                }
            }
        }
    }
    Arc::new(idx)
}

/// 3×3 convolution with padding 1 on tokens `[F, h·w, cin]`; weights are
/// `[9·cin, cout]` with taps ordered row-major.
pub fn conv3x3(x: &Tensor, h: usize, w: usize, stride: usize, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [f, n, cin] = dims3("conv3x3", x)?;
    if n != h * w || weight.shape() != [9 * cin, bias.numel()] {
        return Err(Error::mismatch("conv3x3", x.shape(), weight.shape()));
    }
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let rows = x.reshape(&[f * n, cin])?.gather(conv_index(f, h, w, stride))?;
    rows.reshape(&[f * ho * wo, 9 * cin])?
        .matmul(weight)?
        .add_row(bias)?
        .reshape(&[f, ho * wo, bias.numel()])
}

fn conv(x: &Tensor, hw: (usize, usize), stride: usize, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    conv3x3(x, hw.0, hw.1, stride, p(store, &format!("{prefix}.w"))?, p(store, &format!("{prefix}.b"))?)
}

/// Nearest-neighbour 2× upsampling of tokens `[F, h·w, d]`.
pub fn upsample2(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [f, n, d] = dims3("upsample2", x)?;
    if n != h * w {
        return Err(Error::shape("upsample2", format!("{n} tokens for a {h}x{w} grid")));
    }
    let idx: Vec<Option<usize>> = (0..f)
        .flat_map(|fi| (0..4 * n).map(move |j| Some(fi * n + (j / (2 * w) / 2) * w + (j % (2 * w)) / 2)))
        .collect();
    x.reshape(&[f * n, d])?.gather(Arc::new(idx))?.reshape(&[f, 4 * n, d])
}

fn dims3(op: &'static str, x: &Tensor) -> Result<[usize; 3]> {
    match *x.shape() {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::shape(op, format!("expected rank 3, got {:?}", x.shape()))),
    }
}

/// Sinusoidal timestep embedding of even width `dim`.
pub fn time_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        v[i] = a.sin() as f32;
        v[half + i] = a.cos() as f32;
    }
    Tensor::from_vec(&[dim], v).expect("time embedding")
}

fn resblock(x: &Tensor, hw: (usize, usize), temb: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let h = conv(&norm(x, store, &format!("{prefix}.ln1"))?.silu()?, hw, 1, store, &format!("{prefix}.conv1"))?;
    let tproj = temb
        .reshape(&[1, temb.numel()])?
        .matmul(p(store, &format!("{prefix}.time.w"))?)?;
    let tproj = tproj.reshape(&[tproj.numel()])?.add(p(store, &format!("{prefix}.time.b"))?)?;
    let h = h.add_row(&tproj)?;
    let h = conv(&norm(&h, store, &format!("{prefix}.ln2"))?.silu()?, hw, 1, store, &format!("{prefix}.conv2"))?;
    let skip = match store.get(&format!("{prefix}.skip.w")) {
        Ok(w) => x.linear(w)?,
        Err(_) => x.clone(),
    };
    skip.add(&h)
}

fn projections(store: &ParamStore, prefix: &str) -> Result<ProjectionSet> {
    let g = |n: &str| p(store, &format!("{prefix}.{n}")).cloned();
    ProjectionSet::new(g("w_q")?, g("w_k")?, g("w_v")?, g("w_out")?)
}

// ---- text conditioning ----

/// Deterministic vocabulary-free embedding: one unit-variance vector per
/// whitespace token, derived from the token's hash. Empty prompts have no
/// tokens; use [`text_context`] to get the unconditional embedding instead.
pub fn embed_prompt(prompt: &str, dim: usize) -> Option<Tensor> {
    let tokens: Vec<String> = prompt.split_whitespace().map(str::to_lowercase).collect();
    if tokens.is_empty() {
        return None;
    }
    let mut data = Vec::with_capacity(tokens.len() * dim);
    for tok in &tokens {
        let mut rng = stream(fnv1a(tok.as_bytes()), "token");
        data.extend(normal_vec(&mut rng, dim, 1.0));
    }
    Some(Tensor::from_vec(&[tokens.len(), dim], data).expect("embedding shape"))
}

/// Text context for a prompt; `None` selects the reserved unconditional
/// embedding.
pub fn text_context(model: &Model, prompt: Option<&str>) -> Result<Tensor> {
    let uncond = || model.params.get("unet.text.uncond").cloned();
    match prompt {
        None => uncond(),
        Some(s) => embed_prompt(s, model.config.text_dim).map_or_else(uncond, Ok),
    }
}

fn text_attention(x: &Tensor, text: &Tensor, store: &ParamStore, prefix: &str) -> Result<Tensor> {
    let [f, _, _] = dims3("text_attention", x)?;
    let g = |n: &str| p(store, &format!("{prefix}.{n}"));
    let (k, v) = (text.matmul(g("w_k")?)?, text.matmul(g("w_v")?)?);
    let (l, d) = (k.shape()[0], k.shape()[1]);
    let repeat = Arc::new(vec![Some(0); f]);
    let k = k.reshape(&[1, l, d])?.gather(repeat.clone())?;
    let v = v.reshape(&[1, l, d])?.gather(repeat)?;
    attend_batched(&x.linear(g("w_q")?)?, &k, &v)?.linear(g("w_out")?)
}

// ---- branch roles ----

/// Per-layer counters of key/value work, used to verify cache discipline.
#[derive(Debug, Default)]
pub struct ForwardStats {
    /// Frames whose `[z_{i−1}, z_i]` context K/V were computed, per layer.
    pub cs_context_kv: Mutex<BTreeMap<String, usize>>,
    /// Temporal K/V computations, per layer.
    pub temporal_kv: Mutex<BTreeMap<String, usize>>,
    /// Frames served injected CS K/V, per layer.
    pub cs_injected: Mutex<BTreeMap<String, usize>>,
    /// Temporal injections, per layer.
    pub temporal_injected: Mutex<BTreeMap<String, usize>>,
}

fn bump(m: &Mutex<BTreeMap<String, usize>>, layer: &str, by: usize) {
    *m.lock().expect("stats lock").entry(layer.to_string()).or_default() += by;
}

impl ForwardStats {
    pub fn count(m: &Mutex<BTreeMap<String, usize>>, layer: &str) -> usize {
        m.lock().expect("stats lock").get(layer).copied().unwrap_or(0)
    }

    pub fn total(m: &Mutex<BTreeMap<String, usize>>) -> usize {
        m.lock().expect("stats lock").values().sum()
    }
}

/// Token masks of the reconstruction branch's protagonist at each gated
/// layer, `[F, 2N]`.
#[derive(Debug, Clone)]
pub struct InjectionMasks {
    by_layer: BTreeMap<String, Tensor>,
}

impl InjectionMasks {
    pub fn new(topology: &Topology, masks: &[Raster], inject_mid: bool) -> Result<Self> {
        let mut by_layer = BTreeMap::new();
        for l in topology.gated_layers(inject_mid) {
            by_layer.insert(l.id.clone(), layer_token_mask(masks, l.height, l.width)?);
        }
        Ok(Self { by_layer })
    }

    pub fn get(&self, layer: &str) -> Result<&Tensor> {
        self.by_layer.get(layer).ok_or_else(|| Error::UnknownLayer(layer.into()))
    }
}

/// What a forward pass does at gated layers.
pub enum Role<'a> {
    Plain,
    /// Reconstruction branch: writes gated-layer K/V for `timestep`.
    Record { cache: &'a mut ReconCache, inject_mid: bool },
    /// Editing branch: reads injected K/V at gated layers when `active`.
    Inject {
        cache: &'a ReconCache,
        masks: &'a InjectionMasks,
        policy: &'a InjectionPolicy,
        active: bool,
    },
}

struct Ctx<'a, 'r> {
    store: &'a ParamStore,
    topology: Topology,
    t: usize,
    role: &'a mut Role<'r>,
    stats: Option<&'a ForwardStats>,
    /// Attention outputs per layer and sublayer, for gating tests.
    trace: Option<&'a mut BTreeMap<String, Tensor>>,
}

impl Ctx<'_, '_> {
    fn gated(&self, id: &str) -> Result<bool> {
        let inject_mid = match &*self.role {
            Role::Plain => return Ok(false),
            Role::Record { inject_mid, .. } => *inject_mid,
            Role::Inject { policy, active, .. } => {
                if !*active {
                    return Ok(false);
                }
                policy.inject_mid
            }
        };
        self.topology.gate(id, inject_mid)
    }

    fn record(&mut self, key: String, t: &Tensor) {
        if let Some(trace) = self.trace.as_deref_mut() {
            trace.insert(key, t.detach());
        }
    }

    fn count(&self, pick: fn(&ForwardStats) -> &Mutex<BTreeMap<String, usize>>, id: &str, by: usize) {
        if let Some(s) = self.stats {
            bump(pick(s), id, by);
        }
    }

    fn cs_attention(&mut self, x: &Tensor, id: &str) -> Result<Tensor> {
        let pset = projections(self.store, &format!("unet.{id}.cs"))?;
        let [f, n, d] = dims3("cs_attention", x)?;
        let q = x.linear(&pset.w_q)?;
        let gated = self.gated(id)?;
        let out = match &mut *self.role {
            Role::Inject { cache, masks, policy, .. } if gated => {
                let recon = cache.cs_clip(id, self.t, f)?;
                let (k_cu, v_cu) = (x.linear(&pset.w_k)?, x.linear(&pset.w_v)?);
                let mask = masks.get(id)?;
                let attended = if policy.drop_masked_tokens {
                    let mut outs = Vec::with_capacity(f);
                    for i in 0..f {
                        let frame = |t: &Tensor, len| -> Result<Tensor> { t.slice(0, i, 1)?.reshape(&[len, d]) };
                        let (k, v) = build_injected_kv_dropped(
                            &frame(&recon.k, 2 * n)?,
                            &frame(&recon.v, 2 * n)?,
                            &mask.slice(0, i, 1)?.reshape(&[2 * n])?,
                            &frame(&k_cu, n)?,
                            &frame(&v_cu, n)?,
                        )?;
                        let qi = q.slice(0, i, 1)?;
                        let l = k.shape()[0];
                        outs.push(attend_batched(&qi, &k.reshape(&[1, l, d])?, &v.reshape(&[1, l, d])?)?);
                    }
                    Tensor::concat(&outs.iter().collect::<Vec<_>>(), 0)?
                } else {
                    let parts = decouple_kv(&recon.k, &recon.v, mask)?;
                    let (k, v) = build_injected_kv(&parts, &k_cu, &v_cu)?;
                    attend_batched(&q, &k, &v)?
                };
                self.count(|s| &s.cs_injected, id, f);
                attended
            }
            role => {
                let (k, v) = cs_keys_values(x, &pset)?;
                if let Role::Record { cache, .. } = role {
                    if gated {
                        cache.put_cs(id, self.t, &k, &v)?;
                    }
                }
                self.count(|s| &s.cs_context_kv, id, f);
                attend_batched(&q, &k, &v)?
            }
        };
        out.linear(&pset.w_out)
    }

    fn temporal_attention(&mut self, x: &Tensor, id: &str) -> Result<Tensor> {
        let pset = projections(self.store, &format!("unet.{id}.temporal"))?;
        let loc = to_locations(x)?;
        let q = loc.linear(&pset.w_q)?;
        let gated = self.gated(id)?;
        let out = match &mut *self.role {
            Role::Inject { cache, .. } if gated => {
                let kv = cache.temporal(id, self.t)?;
                let o = inject_temporal(&kv.k, &kv.v, &q)?;
                self.count(|s| &s.temporal_injected, id, 1);
                o
            }
            role => {
                let (k, v) = (loc.linear(&pset.w_k)?, loc.linear(&pset.w_v)?);
                if let Role::Record { cache, .. } = role {
                    if gated {
                        cache.put_temporal(id, self.t, &k, &v)?;
                    }
                }
                self.count(|s| &s.temporal_kv, id, 1);
                attend_batched(&q, &k, &v)?
            }
        };
        to_locations(&out.linear(&pset.w_out)?)
    }

    fn transformer(&mut self, h: &Tensor, id: &str, text: &Tensor) -> Result<Tensor> {
        let store = self.store;
        let pre = format!("unet.{id}");
        let a = self.cs_attention(&norm(h, store, &format!("{pre}.ln_cs"))?, id)?;
        self.record(format!("{id}.cs"), &a);
        let h = h.add(&a)?;
        let a = text_attention(&norm(&h, store, &format!("{pre}.ln_text"))?, text, store, &format!("{pre}.text"))?;
        self.record(format!("{id}.text"), &a);
        let h = h.add(&a)?;
        let a = self.temporal_attention(&norm(&h, store, &format!("{pre}.ln_temporal"))?, id)?;
        self.record(format!("{id}.temporal"), &a);
        h.add(&a)
    }
}

// ---- forward passes ----

/// `[F, C, H, W]` → `[F, H·W, C]`.
pub fn latent_to_tokens(z: &Tensor) -> Result<Tensor> {
    let [f, c, h, w] = match *z.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(Error::shape("latent", format!("expected [F, C, H, W], got {:?}", z.shape()))),
    };
    z.reshape(&[f, c, h * w])?.permute(&[0, 2, 1])
}

/// `[F, H·W, C]` → `[F, C, H, W]`.
pub fn tokens_to_latent(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [f, _, c] = dims3("tokens_to_latent", x)?;
    x.permute(&[0, 2, 1])?.reshape(&[f, c, h, w])
}

fn check_latent(cfg: &NetConfig, z: &Tensor) -> Result<()> {
    let s = z.shape();
    let ok = s.len() == 4
        && s[0] > 0
        && s[1] == cfg.latent_channels
        && s[2] == cfg.latent_height
        && s[3] == cfg.latent_width;
    if !ok {
        let want = [0, cfg.latent_channels, cfg.latent_height, cfg.latent_width];
        return Err(Error::mismatch("unet_forward", s, &want));
    }
    Ok(())
}

/// ControlNet block residuals keyed by conditioned layer id.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlResiduals {
    pub by_layer: BTreeMap<String, Tensor>,
}

/// Optional instrumentation for [`unet_forward_with`].
#[derive(Default)]
pub struct Probe<'a> {
    pub stats: Option<&'a ForwardStats>,
    pub trace: Option<&'a mut BTreeMap<String, Tensor>>,
}

/// ε-prediction for `z: [F, C, H, W]` at timestep `t` under text context
/// `text: [L, text_dim]`.
pub fn unet_forward(
    model: &Model,
    z: &Tensor,
    t: usize,
    text: &Tensor,
    control: Option<&ControlResiduals>,
    role: &mut Role,
) -> Result<Tensor> {
    unet_forward_with(&model.config, &model.params, z, t, text, control, role, Probe::default())
}

#[allow(clippy::too_many_arguments)]
pub fn unet_forward_with(
    cfg: &NetConfig,
    store: &ParamStore,
    z: &Tensor,
    t: usize,
    text: &Tensor,
    control: Option<&ControlResiduals>,
    role: &mut Role,
    probe: Probe,
) -> Result<Tensor> {
    check_latent(cfg, z)?;
    if text.rank() != 2 || text.shape()[1] != cfg.text_dim {
        return Err(Error::mismatch("unet_forward", text.shape(), &[0, cfg.text_dim]));
    }
    let frames = z.shape()[0];
    let [l0, l1] = cfg.levels();
    let (hw0, hw1) = ((l0.0, l0.1), (l1.0, l1.1));
    let temb = time_embedding(t, cfg.time_dim);
    let mut ctx = Ctx {
        store,
        topology: cfg.topology(),
        t,
        role,
        stats: probe.stats,
        trace: probe.trace,
    };
    let condition = |h: &Tensor, id: &str| -> Result<Tensor> {
        let Some(c) = control else { return Ok(h.clone()) };
        let m = c.by_layer.get(id).ok_or_else(|| Error::UnknownLayer(id.into()))?;
        if m.shape() != h.shape() {
            return Err(Error::mismatch("control_residual", m.shape(), h.shape()));
        }
        let w = AdapterWeights::from_store(store, &format!("adapter.{id}"))?;
        h.add(&adapter_forward(m, h, &w)?)
    };

    let x = latent_to_tokens(z)?;
    let h = conv(&x, hw0, 1, store, "unet.conv_in")?;
    let h = resblock(&h, hw0, &temb, store, "unet.enc0.res")?;
    let h = ctx.transformer(&h, "enc0", text)?;
    let skip0 = condition(&h, "enc0")?;
    let h = conv(&h, hw0, 2, store, "unet.down")?;
    let h = resblock(&h, hw1, &temb, store, "unet.enc1.res")?;
    let h = ctx.transformer(&h, "enc1", text)?;
    let skip1 = condition(&h, "enc1")?;
    let h = resblock(&h, hw1, &temb, store, "unet.mid.res")?;
    let h = ctx.transformer(&h, "mid", text)?;
    let h = condition(&h, "mid")?;
    let h = Tensor::concat(&[&h, &skip1], 2)?;
    let h = resblock(&h, hw1, &temb, store, "unet.dec1.res")?;
    let h = ctx.transformer(&h, "dec1", text)?;
    let h = conv(&upsample2(&h, hw1.0, hw1.1)?, hw0, 1, store, "unet.up")?;
    let h = Tensor::concat(&[&h, &skip0], 2)?;
    let h = resblock(&h, hw0, &temb, store, "unet.dec0.res")?;
    let h = ctx.transformer(&h, "dec0", text)?;
    let h = norm(&h, store, "unet.out.ln")?.silu()?;
    let eps = conv(&h, hw0, 1, store, "unet.out.conv")?;
    debug_assert_eq!(eps.shape()[0], frames);
    tokens_to_latent(&eps, hw0.0, hw0.1)
}

/// Pose raster at image resolution to intensities in `[0, 1]`, `[H·W, 1]`.
fn pose_tokens(cfg: &NetConfig, pose: &Raster) -> Result<Tensor> {
    if (pose.width, pose.height) != (cfg.image_width(), cfg.image_height()) {
        return Err(Error::shape(
            "pose_encode",
            format!(
                "pose map is {}x{}, configured {}x{}",
                pose.width,
                pose.height,
                cfg.image_width(),
                cfg.image_height()
            ),
        ));
    }
    let data = pose.data.iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::from_vec(&[pose.width * pose.height, 1], data)
}

/// Strided-convolution pyramid for a clip of pose maps: level features
/// `[F, N_l, d_l]` at both U-Net resolutions.
pub fn pose_encode_clip(cfg: &NetConfig, store: &ParamStore, poses: &[Raster]) -> Result<[Tensor; 2]> {
    let frames = poses
        .iter()
        .enumerate()
        .map(|(i, r)| pose_tokens(cfg, r).map_err(|e| e.in_frame(i)))
        .collect::<Result<Vec<_>>>()?;
    let x = Tensor::concat(&frames.iter().collect::<Vec<_>>(), 0)?;
    let (ih, iw) = (cfg.image_height(), cfg.image_width());
    let x = x.reshape(&[poses.len(), ih * iw, 1])?;
    let a = conv(&x, (ih, iw), 2, store, "control.pose.conv1")?.silu()?;
    let b = conv(&a, (ih / 2, iw / 2), 2, store, "control.pose.conv2")?.silu()?;
    let c = conv(&b, (ih / 4, iw / 4), 2, store, "control.pose.conv3")?;
    let level0 = b.linear(p(store, "control.pose.level0.w")?)?;
    Ok([level0, c])
}

/// Pyramid for a single pose map: `[N_l, d_l]` per level.
pub fn pose_encode(model: &Model, pose: &Raster) -> Result<[Tensor; 2]> {
    let [a, b] = pose_encode_clip(&model.config, &model.params, std::slice::from_ref(pose))?;
    let strip = |t: Tensor| {
        let s = t.shape().to_vec();
        t.reshape(&s[1..])
    };
    Ok([strip(a)?, strip(b)?])
}

/// ControlNet residuals for the conditioned layers.
pub fn controlnet_forward(model: &Model, z: &Tensor, t: usize, poses: &[Raster]) -> Result<ControlResiduals> {
    controlnet_forward_with(&model.config, &model.params, z, t, poses)
}

pub fn controlnet_forward_with(
    cfg: &NetConfig,
    store: &ParamStore,
    z: &Tensor,
    t: usize,
    poses: &[Raster],
) -> Result<ControlResiduals> {
    check_latent(cfg, z)?;
    if poses.len() != z.shape()[0] {
        return Err(Error::Mask(format!(
            "controlnet: {} pose maps for {} frames",
            poses.len(),
            z.shape()[0]
        )));
    }
    let [l0, l1] = cfg.levels();
    let (hw0, hw1) = ((l0.0, l0.1), (l1.0, l1.1));
    let temb = time_embedding(t, cfg.time_dim);
    let [pose0, pose1] = pose_encode_clip(cfg, store, poses)?;
    let zero = |h: &Tensor, id: &str| -> Result<Tensor> {
        h.linear(p(store, &format!("control.{id}.zero.w"))?)?
            .add_row(p(store, &format!("control.{id}.zero.b"))?)
    };
    let mut by_layer = BTreeMap::new();
    let h = conv(&latent_to_tokens(z)?, hw0, 1, store, "control.conv_in")?.add(&pose0)?;
    let h = resblock(&h, hw0, &temb, store, "control.enc0.res")?;
    by_layer.insert("enc0".to_string(), zero(&h, "enc0")?);
    let h = conv(&h, hw0, 2, store, "control.down")?.add(&pose1)?;
    let h = resblock(&h, hw1, &temb, store, "control.enc1.res")?;
    by_layer.insert("enc1".to_string(), zero(&h, "enc1")?);
    let h = resblock(&h, hw1, &temb, store, "control.mid.res")?;
    by_layer.insert("mid".to_string(), zero(&h, "mid")?);
    Ok(ControlResiduals { by_layer })
}

/// Model with every path active: random adapters, randomized control
/// projections, small frame count. Used by gradient checks.
pub fn grad_check_model(seed: u64) -> Result<Model> {
    let config = NetConfig {
        frames: 2,
        ..NetConfig::default()
    };
    let mut model = Model::init(config, seed)?.with_synthetic_pretraining(seed, 1.0);
    let mut rng = stream(seed, "grad-check-adapters");
    for id in CONDITIONED {
        let d = model.config.widths[model.config.level_of(id)];
        AdapterWeights::random(d, &mut rng).insert_into(&mut model.params, &format!("adapter.{id}"));
    }
    Ok(model)
}

/// Seeded inputs shared by the gradient check and the forward oracle test:
/// latents, diagonal-stroke pose maps, text context, and timestep.
pub fn oracle_inputs(model: &Model, seed: u64) -> Result<(Tensor, Vec<Raster>, Tensor, usize)> {
    let cfg = &model.config;
    let mut rng = stream(seed, "grad-check-inputs");
    let shape = cfg.latent_shape();
    let z = Tensor::from_vec(&shape, normal_vec(&mut rng, shape.iter().product(), 1.0))?;
    let (ih, iw) = (cfg.image_height(), cfg.image_width());
    let poses: Vec<Raster> = (0..cfg.frames)
        .map(|i| {
            let mut r = Raster::new(iw, ih);
            for k in 0..ih.min(iw) {
                r.set((k + 3 * i) % iw, k, 255);
            }
            r
        })
        .collect();
    let text = text_context(model, Some("a person dancing"))?;
    Ok((z, poses, text, 400))
}

/// f64 inputs matching [`oracle_inputs`].
pub fn reference_inputs(z: &Tensor, poses: &[Raster], text: &Tensor, t: usize) -> reference::Inputs {
    let v64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect();
    reference::Inputs {
        z: v64(z),
        t,
        text: v64(text),
        poses: poses.iter().map(|r| r.data.iter().map(|&v| v as f64 / 255.0).collect()).collect(),
    }
}

/// Gradient check of `mean(ε)` of a full conditioned forward pass with
/// respect to the named weight tensors, probing up to `probes` evenly spaced
/// entries of each. Central differences are taken on the f64 twin in
/// [`reference`]: in f32 the rounding noise of `mean(ε)` divided by the step
/// swamps the many weights whose gradients are around 1e-4.
pub fn unet_grad_check(model: &Model, names: &[&str], probes: usize, seed: u64) -> Result<GradReport> {
    let cfg = &model.config;
    let (z, poses, text, t) = oracle_inputs(model, seed)?;
    let inputs: Vec<(&str, Tensor)> = names
        .iter()
        .map(|&n| Ok((n, model.params.get(n)?.clone())))
        .collect::<Result<_>>()?;
    let f = |ws: &[Tensor]| -> Result<Tensor> {
        let mut store = model.params.clone();
        for ((n, _), w) in inputs.iter().zip(ws) {
            store.insert(*n, w.clone());
        }
        let control = controlnet_forward_with(cfg, &store, &z, t, &poses)?;
        unet_forward_with(cfg, &store, &z, t, &text, Some(&control), &mut Role::Plain, Probe::default())?.mean()
    };
    let weights = reference::Weights::new(&model.params);
    let rin = reference_inputs(&z, &poses, &text, t);
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, t)| t.data().iter().map(|&v| v as f64).collect()).collect();
    let control = reference::control_residuals(cfg, &weights, &[], &rin);
    let reference = |ws: &[Vec<f64>]| {
        // Only the perturbed tensor needs overriding; the rest equal the store.
        let overrides: Vec<(&str, &[f64])> = names
            .iter()
            .zip(ws.iter().zip(&base))
            .filter(|(_, (w, b))| w != b)
            .map(|(&n, (w, _))| (n, &w[..]))
            .collect();
        reference::conditioned_eps_mean_reusing(cfg, &weights, &overrides, &rin, &control)
    };
    let opts = GradCheckOptions {
        max_probes: probes,
        ..GradCheckOptions::default()
    };
    check_against_reference(&inputs, f, reference, opts)
}
