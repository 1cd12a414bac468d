//! Attention injection from the reconstruction branch into the editing
//! branch: foreground/background decoupling of cached keys and values,
//! assembly of the injected key/value set, temporal injection, decoder-only
//! gating and the write-once reconstruction cache.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, attend_batched, previous_frame};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::tensor::Tensor;

/// Binary token mask of one frame at one layer resolution, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentMask {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<u8>,
}

impl LatentMask {
    /// Nearest-neighbour downsample of a 0/1 mask to `height × width`, then
    /// re-binarized at 0.5.
    pub fn from_raster(mask: &Raster, height: usize, width: usize) -> Result<Self> {
        if !mask.is_binary() {
            return Err(Error::Mask("expected a 0/1 mask raster".into()));
        }
        if height == 0 || width == 0 || height > mask.height || width > mask.width {
            return Err(Error::Mask(format!(
                "cannot resample {}x{} mask to {width}x{height}",
                mask.width, mask.height
            )));
        }
        let mut tokens = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * mask.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * mask.width as f64 / width as f64) as usize;
                let v = mask.get(sx.min(mask.width - 1), sy.min(mask.height - 1)) as f32;
                tokens.push(u8::from(v >= 0.5));
            }
        }
        Ok(Self { height, width, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Per-frame `[M_{i−1}, M_i]` token masks for a clip, shape `[F, 2N]`. Frame 0
/// pairs with itself, matching the key layout of consistent-sparse attention.
pub fn cs_token_mask(frames: &[LatentMask]) -> Result<Tensor> {
    let first = frames.first().ok_or(Error::Empty("cs_token_mask"))?;
    let n = first.len();
    let mut data = Vec::with_capacity(frames.len() * 2 * n);
    for i in 0..frames.len() {
        for m in [&frames[previous_frame(i)], &frames[i]] {
            if m.len() != n {
                return Err(Error::Mask(format!("frame {i}: {} tokens, expected {n}", m.len())));
            }
            data.extend(m.tokens.iter().map(|&v| v as f32));
        }
    }
    Tensor::from_vec(&[frames.len(), 2 * n], data)
}

/// Downsamples every frame mask to a layer resolution and builds the
/// `[F, 2N]` consistent-sparse token mask.
pub fn layer_token_mask(masks: &[Raster], height: usize, width: usize) -> Result<Tensor> {
    let frames = masks
        .iter()
        .enumerate()
        .map(|(i, m)| LatentMask::from_raster(m, height, width).map_err(|e| e.in_frame(i)))
        .collect::<Result<Vec<_>>>()?;
    cs_token_mask(&frames)
}

/// Foreground and background parts of a key/value set.
#[derive(Debug, Clone)]
pub struct Decoupled {
    pub k_fg: Tensor,
    pub v_fg: Tensor,
    pub k_bg: Tensor,
    pub v_bg: Tensor,
}

fn check_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().all(|&m| m == 0.0 || m == 1.0) {
        Ok(())
    } else {
        Err(Error::Mask("token mask must contain only 0 and 1".into()))
    }
}

/// Repeats each token's mask value across the `d` feature columns.
fn expand_rows(mask: &Tensor, d: usize) -> Result<Tensor> {
    let data = mask.data().iter().flat_map(|&m| std::iter::repeat_n(m, d)).collect();
    let mut shape = mask.shape().to_vec();
    shape.push(d);
    Tensor::from_vec(&shape, data)
}

/// Splits keys and values `[..., n, d]` by a token mask `[..., n]`: a token's
/// row is kept in the foreground part and zeroed in the background part where
/// the mask is 1, and the reverse where it is 0.
pub fn decouple_kv(k: &Tensor, v: &Tensor, mask: &Tensor) -> Result<Decoupled> {
    if k.shape() != v.shape() {
        return Err(Error::mismatch("decouple_kv", k.shape(), v.shape()));
    }
    if k.rank() < 2 || mask.shape() != &k.shape()[..k.rank() - 1] {
        return Err(Error::mismatch("decouple_kv", k.shape(), mask.shape()));
    }
    check_binary(mask)?;
    let d = k.shape()[k.rank() - 1];
    let fg = expand_rows(mask, d)?;
    let bg = expand_rows(&mask.scale(-1.0)?.add_scalar(1.0)?, d)?;
    Ok(Decoupled {
        k_fg: k.mul(&fg)?,
        v_fg: v.mul(&fg)?,
        k_bg: k.mul(&bg)?,
        v_bg: v.mul(&bg)?,
    })
}

/// Injected keys and values `[K_fg, K_bg, K_cu]` along the token axis. The
/// reconstruction parts hold `2N` tokens and the editing branch's current
/// frame `N`, giving `5N`. Accepts single frames `[n, d]` or clips `[F, n, d]`.
pub fn build_injected_kv(recon: &Decoupled, k_cu: &Tensor, v_cu: &Tensor) -> Result<(Tensor, Tensor)> {
    let rank = k_cu.rank();
    if rank < 2 || k_cu.shape() != v_cu.shape() {
        return Err(Error::mismatch("build_injected_kv", k_cu.shape(), v_cu.shape()));
    }
    let axis = rank - 2;
    let n = k_cu.shape()[axis];
    for part in [&recon.k_fg, &recon.v_fg, &recon.k_bg, &recon.v_bg] {
        let mut expect = k_cu.shape().to_vec();
        expect[axis] = 2 * n;
        if part.shape() != expect.as_slice() {
            return Err(Error::mismatch("build_injected_kv", part.shape(), &expect));
        }
    }
    Ok((
        Tensor::concat(&[&recon.k_fg, &recon.k_bg, k_cu], axis)?,
        Tensor::concat(&[&recon.v_fg, &recon.v_bg, v_cu], axis)?,
    ))
}

/// Token-dropping alternative for one frame: masked-out tokens are removed
/// instead of zeroed. Keys `[2N, d]`, mask `[2N]`; the result holds the
/// foreground tokens, then the background tokens, then the current frame.
pub fn build_injected_kv_dropped(
    k: &Tensor,
    v: &Tensor,
    mask: &Tensor,
    k_cu: &Tensor,
    v_cu: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if k.rank() != 2 || k.shape() != v.shape() || mask.shape() != [k.shape()[0]] {
        return Err(Error::mismatch("build_injected_kv_dropped", k.shape(), mask.shape()));
    }
    if k_cu.rank() != 2 || k_cu.shape() != v_cu.shape() || k_cu.shape()[1] != k.shape()[1] {
        return Err(Error::mismatch("build_injected_kv_dropped", k.shape(), k_cu.shape()));
    }
    check_binary(mask)?;
    let order: Vec<Option<usize>> = (0..mask.numel())
        .filter(|&j| mask.data()[j] == 1.0)
        .chain((0..mask.numel()).filter(|&j| mask.data()[j] == 0.0))
        .map(Some)
        .collect();
    let order = Arc::new(order);
    Ok((
        Tensor::concat(&[&k.gather(order.clone())?, k_cu], 0)?,
        Tensor::concat(&[&v.gather(order)?, v_cu], 0)?,
    ))
}

/// Temporal attention of the editing branch with queries from the editing
/// branch and keys/values taken wholly from the reconstruction branch.
/// Inputs are projected tokens, either `[F, d]` or per-location `[N, F, d]`.
pub fn inject_temporal(recon_k: &Tensor, recon_v: &Tensor, edit_q: &Tensor) -> Result<Tensor> {
    if recon_k.shape() != edit_q.shape() || recon_v.shape() != edit_q.shape() {
        return Err(Error::mismatch("inject_temporal", recon_k.shape(), edit_q.shape()));
    }
    match edit_q.rank() {
        2 => attend(edit_q, recon_k, recon_v),
        3 => attend_batched(edit_q, recon_k, recon_v),
        _ => Err(Error::shape("inject_temporal", format!("unsupported shape {:?}", edit_q.shape()))),
    }
}

/// Position of a layer in the U-Net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Mid,
    Decoder,
}

/// One attention-carrying layer of the network topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: String,
    pub stage: Stage,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LayerInfo {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Ordered table of layers, encoder first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub layers: Vec<LayerInfo>,
}

impl Topology {
    pub fn layer(&self, id: &str) -> Result<&LayerInfo> {
        self.layers
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))
    }

    /// Whether injection applies at `id`. The mid block counts as encoder
    /// unless `inject_mid` is set.
    pub fn gate(&self, id: &str, inject_mid: bool) -> Result<bool> {
        Ok(match self.layer(id)?.stage {
            Stage::Encoder => false,
            Stage::Mid => inject_mid,
            Stage::Decoder => true,
        })
    }

    pub fn gated_layers(&self, inject_mid: bool) -> Vec<&LayerInfo> {
        self.layers
            .iter()
            .filter(|l| matches!(l.stage, Stage::Decoder) || (inject_mid && l.stage == Stage::Mid))
            .collect()
    }

    pub fn gating_table(&self, inject_mid: bool) -> BTreeMap<String, bool> {
        self.layers
            .iter()
            .map(|l| (l.id.clone(), self.gate(&l.id, inject_mid).unwrap_or(false)))
            .collect()
    }
}

/// Decoder-only gate with the default mid-block policy.
pub fn gate(topology: &Topology, id: &str) -> Result<bool> {
    topology.gate(id, false)
}

/// Injection switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionPolicy {
    pub enabled: bool,
    pub inject_mid: bool,
    pub drop_masked_tokens: bool,
    /// Fraction of denoising steps, counted from the end of sampling, during
    /// which injection is active. 1.0 means every step.
    pub trailing_fraction: f64,
}

impl Default for InjectionPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            inject_mid: false,
            drop_masked_tokens: false,
            trailing_fraction: 1.0,
        }
    }
}

impl InjectionPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.trailing_fraction) {
            return Err(Error::Config(format!(
                "trailing_fraction {} outside [0, 1]",
                self.trailing_fraction
            )));
        }
        Ok(())
    }

    /// Whether injection is active at sampling step `index` (0 = noisiest)
    /// out of `total`.
    pub fn active_at(&self, index: usize, total: usize) -> bool {
        if !self.enabled || total == 0 {
            return false;
        }
        let skipped = ((1.0 - self.trailing_fraction) * total as f64).round() as usize;
        index >= skipped
    }
}

/// A key/value pair.
#[derive(Debug, Clone)]
pub struct KeyValue {
    pub k: Tensor,
    pub v: Tensor,
}

/// Counters for cache traffic.
#[derive(Debug, Default)]
pub struct CacheStats {
    pub cs_writes: AtomicUsize,
    pub temporal_writes: AtomicUsize,
    /// One per (layer, timestep, frame) consistent-sparse injection.
    pub cs_reads: AtomicUsize,
    /// One per (layer, timestep) temporal injection.
    pub temporal_reads: AtomicUsize,
}

impl CacheStats {
    pub fn get(c: &AtomicUsize) -> usize {
        c.load(Ordering::Relaxed)
    }
}

/// Reconstruction-branch keys and values. Consistent-sparse entries are
/// `[2N, d]` per (layer, timestep, frame); temporal entries are per-location
/// stacks `[N, F, d]` per (layer, timestep). Every entry is written once.
#[derive(Debug, Default)]
pub struct ReconCache {
    cs: HashMap<(String, usize, usize), KeyValue>,
    temporal: HashMap<(String, usize), KeyValue>,
    pub stats: CacheStats,
}

impl ReconCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.cs.len() + self.temporal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cs_len(&self) -> usize {
        self.cs.len()
    }

    pub fn temporal_len(&self) -> usize {
        self.temporal.len()
    }

    /// Stores a clip's consistent-sparse keys/values `[F, 2N, d]` as one
    /// entry per frame.
    pub fn put_cs(&mut self, layer: &str, t: usize, k: &Tensor, v: &Tensor) -> Result<()> {
        if k.rank() != 3 || k.shape() != v.shape() {
            return Err(Error::mismatch("recon_cache", k.shape(), v.shape()));
        }
        let (n2, d) = (k.shape()[1], k.shape()[2]);
        for i in 0..k.shape()[0] {
            let key = (layer.to_string(), t, i);
            if self.cs.contains_key(&key) {
                return Err(Error::CacheOverwrite {
                    layer: layer.into(),
                    timestep: t,
                    frame: Some(i),
                });
            }
            let entry = KeyValue {
                k: k.slice(0, i, 1)?.reshape(&[n2, d])?.detach(),
                v: v.slice(0, i, 1)?.reshape(&[n2, d])?.detach(),
            };
            self.cs.insert(key, entry);
            self.stats.cs_writes.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    pub fn cs_frame(&self, layer: &str, t: usize, frame: usize) -> Result<&KeyValue> {
        self.cs
            .get(&(layer.to_string(), t, frame))
            .ok_or_else(|| Error::CacheMiss {
                layer: layer.into(),
                timestep: t,
                frame: Some(frame),
            })
    }

    /// Reassembles `[F, 2N, d]` keys/values for `frames` frames.
    pub fn cs_clip(&self, layer: &str, t: usize, frames: usize) -> Result<KeyValue> {
        let mut ks = Vec::with_capacity(frames);
        let mut vs = Vec::with_capacity(frames);
        for i in 0..frames {
            let e = self.cs_frame(layer, t, i)?;
            let s = e.k.shape();
            ks.push(e.k.reshape(&[1, s[0], s[1]])?);
            vs.push(e.v.reshape(&[1, s[0], s[1]])?);
            self.stats.cs_reads.fetch_add(1, Ordering::Relaxed);
        }
        Ok(KeyValue {
            k: Tensor::concat(&ks.iter().collect::<Vec<_>>(), 0)?,
            v: Tensor::concat(&vs.iter().collect::<Vec<_>>(), 0)?,
        })
    }

    pub fn put_temporal(&mut self, layer: &str, t: usize, k: &Tensor, v: &Tensor) -> Result<()> {
        if k.rank() != 3 || k.shape() != v.shape() {
            return Err(Error::mismatch("recon_cache", k.shape(), v.shape()));
        }
        let key = (layer.to_string(), t);
        if self.temporal.contains_key(&key) {
            return Err(Error::CacheOverwrite {
                layer: layer.into(),
                timestep: t,
                frame: None,
            });
        }
        self.temporal.insert(key, KeyValue { k: k.detach(), v: v.detach() });
        self.stats.temporal_writes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn temporal(&self, layer: &str, t: usize) -> Result<&KeyValue> {
        let e = self
            .temporal
            .get(&(layer.to_string(), t))
            .ok_or_else(|| Error::CacheMiss {
                layer: layer.into(),
                timestep: t,
                frame: None,
            })?;
        self.stats.temporal_reads.fetch_add(1, Ordering::Relaxed);
        Ok(e)
    }

    /// Checks that every gated layer has entries for every timestep and frame.
    pub fn check_complete(&self, layers: &[&str], timesteps: &[usize], frames: usize) -> Result<()> {
        for &layer in layers {
            for &t in timesteps {
                for i in 0..frames {
                    self.cs_frame(layer, t, i)?;
                }
                if !self.temporal.contains_key(&(layer.to_string(), t)) {
                    return Err(Error::CacheMiss {
                        layer: layer.into(),
                        timestep: t,
                        frame: None,
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn all_ones_and_all_zeros_masks() {
        let mut rng = seeded(1);
        let k = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let v = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let d = decouple_kv(&k, &v, &Tensor::ones(&[4])).unwrap();
        assert_eq!(d.k_fg, k);
        assert_eq!(d.v_fg, v);
        assert!(d.k_bg.data().iter().all(|&x| x == 0.0));
        let d = decouple_kv(&k, &v, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(d.k_bg, k);
        assert!(d.k_fg.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decouple_rejects_bad_masks() {
        let k = Tensor::ones(&[3, 2]);
        assert!(matches!(decouple_kv(&k, &k, &Tensor::ones(&[2])), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(decouple_kv(&k, &k, &t(&[3], &[0.0, 0.5, 1.0])), Err(Error::Mask(_))));
    }

    #[test]
    fn literal_five_n_stack() {
        // N = 2, d = 1
        let recon = Decoupled {
            k_fg: t(&[4, 1], &[1.0, 0.0, 3.0, 0.0]),
            v_fg: t(&[4, 1], &[10.0, 0.0, 30.0, 0.0]),
            k_bg: t(&[4, 1], &[0.0, 2.0, 0.0, 4.0]),
            v_bg: t(&[4, 1], &[0.0, 20.0, 0.0, 40.0]),
        };
        let (k, v) = build_injected_kv(&recon, &t(&[2, 1], &[5.0, 6.0]), &t(&[2, 1], &[50.0, 60.0])).unwrap();
        assert_eq!(k.to_vec(), vec![1.0, 0.0, 3.0, 0.0, 0.0, 2.0, 0.0, 4.0, 5.0, 6.0]);
        assert_eq!(v.to_vec(), vec![10.0, 0.0, 30.0, 0.0, 0.0, 20.0, 0.0, 40.0, 50.0, 60.0]);
        assert_eq!(k.shape(), &[10, 1]);
    }

    #[test]
    fn full_foreground_identity_layout() {
        let mut rng = seeded(2);
        let (n, d) = (3, 4);
        let k_full = Tensor::randn(&[2 * n, d], 1.0, &mut rng);
        let v_full = Tensor::randn(&[2 * n, d], 1.0, &mut rng);
        let k_cu = k_full.slice(0, n, n).unwrap();
        let v_cu = v_full.slice(0, n, n).unwrap();
        let parts = decouple_kv(&k_full, &v_full, &Tensor::ones(&[2 * n])).unwrap();
        let (k, _) = build_injected_kv(&parts, &k_cu, &v_cu).unwrap();
        assert_eq!(k.slice(0, 0, 2 * n).unwrap(), k_full);
        let bg = k.slice(0, 2 * n, 2 * n).unwrap();
        assert_eq!(bg.shape(), &[2 * n, d]);
        assert!(bg.data().iter().all(|&x| x == 0.0));
        assert_eq!(k.slice(0, 4 * n, n).unwrap(), k_cu);
    }

    #[test]
    fn dropped_tokens_keep_all_rows_once() {
        let k = t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]);
        let m = t(&[4], &[0.0, 1.0, 0.0, 1.0]);
        let cu = t(&[2, 1], &[9.0, 8.0]);
        let (ki, vi) = build_injected_kv_dropped(&k, &k, &m, &cu, &cu).unwrap();
        assert_eq!(ki.to_vec(), vec![2.0, 4.0, 1.0, 3.0, 9.0, 8.0]);
        assert_eq!(vi, ki);
    }

    #[test]
    fn temporal_injection_single_frame_passthrough() {
        let q = t(&[1, 2], &[3.0, -1.0]);
        let k = t(&[1, 2], &[0.5, 0.5]);
        let v = t(&[1, 2], &[7.0, 8.0]);
        assert_eq!(inject_temporal(&k, &v, &q).unwrap(), v);
        assert!(inject_temporal(&k, &v, &Tensor::ones(&[2, 2])).is_err());
    }

    fn topo() -> Topology {
        let l = |id: &str, stage| LayerInfo {
            id: id.into(),
            stage,
            height: 4,
            width: 4,
            channels: 8,
        };
        Topology {
            layers: vec![l("enc0", Stage::Encoder), l("mid", Stage::Mid), l("dec0", Stage::Decoder)],
        }
    }

    #[test]
    fn gating_follows_stage() {
        let tp = topo();
        assert!(!gate(&tp, "enc0").unwrap());
        assert!(gate(&tp, "dec0").unwrap());
        assert!(!gate(&tp, "mid").unwrap());
        assert!(tp.gate("mid", true).unwrap());
        assert!(matches!(gate(&tp, "nope"), Err(Error::UnknownLayer(_))));
        assert_eq!(tp.gated_layers(false).len(), 1);
    }

    #[test]
    fn trailing_fraction_window() {
        let mut p = InjectionPolicy::default();
        assert!((0..10).all(|i| p.active_at(i, 10)));
        p.trailing_fraction = 0.3;
        let active: Vec<_> = (0..10).filter(|&i| p.active_at(i, 10)).collect();
        assert_eq!(active, vec![7, 8, 9]);
        assert!((0..10).all(|i| !InjectionPolicy::disabled().active_at(i, 10)));
        p.trailing_fraction = 1.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn mask_downsample_nearest() {
        let mut m = Raster::new(8, 8);
        for y in 0..4 {
            for x in 4..8 {
                m.set(x, y, 1);
            }
        }
        let lm = LatentMask::from_raster(&m, 2, 2).unwrap();
        assert_eq!(lm.tokens, vec![0, 1, 0, 0]);
        assert!(LatentMask::from_raster(&m.mask_to_intensity(), 2, 2).is_err());
    }

    #[test]
    fn cs_mask_pairs_previous_frame() {
        let a = LatentMask { height: 1, width: 2, tokens: vec![1, 0] };
        let b = LatentMask { height: 1, width: 2, tokens: vec![0, 1] };
        let m = cs_token_mask(&[a, b]).unwrap();
        assert_eq!(m.to_vec(), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cache_is_write_once_and_reports_misses() {
        let mut c = ReconCache::new();
        let kv = Tensor::ones(&[2, 4, 3]);
        c.put_cs("dec0", 10, &kv, &kv).unwrap();
        assert!(matches!(c.put_cs("dec0", 10, &kv, &kv), Err(Error::CacheOverwrite { .. })));
        assert_eq!(c.cs_frame("dec0", 10, 1).unwrap().k.shape(), &[4, 3]);
        assert!(matches!(c.cs_frame("dec0", 20, 0), Err(Error::CacheMiss { .. })));
        let clip = c.cs_clip("dec0", 10, 2).unwrap();
        assert_eq!(clip.k, kv);
        assert_eq!(CacheStats::get(&c.stats.cs_reads), 2);
        assert!(c.check_complete(&["dec0"], &[10], 2).is_err());
        c.put_temporal("dec0", 10, &kv, &kv).unwrap();
        c.check_complete(&["dec0"], &[10], 2).unwrap();
    }
}
