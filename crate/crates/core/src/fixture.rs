//! Seeded synthetic videos: a walking stick-figure protagonist over a
//! textured background, with masks, skeleton maps, keypoints, and a
//! reference clip performing a different motion elsewhere in the frame.

use crate::error::Result;
use crate::network::NetConfig;
use crate::raster::Raster;
use crate::rng::{normal_vec, stream};
use crate::skeleton::{body_mask, default_bones, render_keypoints, stick_figure, KeypointSet};
use crate::tensor::Tensor;

pub const BODY_RADIUS: f64 = 2.0;
pub const SOURCE_PROMPT: &str = "a man walking on the street";
pub const TARGET_PROMPT: &str = "a man dancing on the street";

/// Per-frame pose data of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseClip {
    pub keypoints: Vec<KeypointSet>,
    pub skeletons: Vec<Raster>,
    pub masks: Vec<Raster>,
}

#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    /// `[F, C, H, W]` latents of the source video.
    pub latents: Tensor,
    /// Image-space frames `[F, C, H·s, W·s]` the latents were pooled from.
    pub images: Tensor,
    pub source: PoseClip,
    pub reference: PoseClip,
    pub source_prompt: String,
    pub target_prompt: String,
}

/// Stand-in for a VAE encoder: `s×s` average pooling, then shifting and
/// scaling `[0, 1]` intensities to `[-1, 1]`.
pub fn encode_frames(images: &Tensor, s: usize) -> Result<Tensor> {
    let sh = images.shape();
    let (f, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let (ho, wo) = (h / s, w / s);
    let x = images.data();
    let mut out = vec![0.0f32; f * c * ho * wo];
    for plane in 0..f * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f64;
                for dy in 0..s {
                    for dx in 0..s {
                        acc += x[plane * h * w + (oy * s + dy) * w + ox * s + dx] as f64;
                    }
                }
                let mean = acc / (s * s) as f64;
                out[plane * ho * wo + oy * wo + ox] = (2.0 * mean - 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[f, c, ho, wo], out)
}

fn pose_clip(frames: Vec<KeypointSet>, h: usize, w: usize) -> Result<PoseClip> {
    let bones = default_bones();
    let skeletons = frames
        .iter()
        .map(|k| render_keypoints(k, h, w, &bones))
        .collect::<Result<Vec<_>>>()?;
    let masks = frames.iter().map(|k| body_mask(k, h, w, &bones, BODY_RADIUS)).collect();
    Ok(PoseClip {
        keypoints: frames,
        skeletons,
        masks,
    })
}

/// Source walker: drifts right while swinging its limbs.
pub fn source_keypoints(frames: usize, h: usize, w: usize) -> Vec<KeypointSet> {
    let s = h as f64 / 7.0;
    (0..frames)
        .map(|i| stick_figure(w as f64 * 0.4 + i as f64 * 0.5, h as f64 * 0.5, s, 0.6 * i as f64))
        .collect()
}

/// Reference dancer: smaller, elsewhere in the frame, faster limb swing.
pub fn reference_keypoints(frames: usize, h: usize, w: usize) -> Vec<KeypointSet> {
    let s = h as f64 / 9.0;
    (0..frames)
        .map(|i| stick_figure(w as f64 * 0.65, h as f64 * 0.45, s, 1.3 * i as f64 + 0.8))
        .collect()
}

/// The seeded synthetic video at the configuration's resolution.
pub fn synthetic_video(cfg: &NetConfig, seed: u64) -> Result<SyntheticVideo> {
    let (f, c) = (cfg.frames, cfg.latent_channels);
    let (h, w) = (cfg.image_height(), cfg.image_width());
    let source = pose_clip(source_keypoints(f, h, w), h, w)?;
    let reference = pose_clip(reference_keypoints(f, h, w), h, w)?;

    let mut rng = stream(seed, "fixture-background");
    let texture = normal_vec(&mut rng, c * h * w, 1.0);
    let mut images = vec![0.0f32; f * c * h * w];
    for i in 0..f {
        let (mask, skel) = (&source.masks[i], &source.skeletons[i]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (fx, fy) = (x as f32 / w as f32, y as f32 / h as f32);
                    let bg = match ch % 4 {
                        0 => 0.3 + 0.4 * fx,
                        1 => 0.5 + 0.2 * (6.0 * fy).sin(),
                        2 => 0.6 - 0.3 * fy,
                        _ => 0.4 + 0.2 * (4.0 * fx + 3.0 * fy).cos(),
                    } + 0.05 * texture[(ch * h + y) * w + x];
                    let fg = [0.9, 0.2, 0.75, 0.1][ch % 4] + 0.1 * skel.get(x, y) as f32 / 255.0;
                    let v = if mask.get(x, y) != 0 { fg } else { bg };
                    images[((i * c + ch) * h + y) * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    let images = Tensor::from_vec(&[f, c, h, w], images)?;
    Ok(SyntheticVideo {
        latents: encode_frames(&images, cfg.image_scale)?,
        images,
        source,
        reference,
        source_prompt: SOURCE_PROMPT.into(),
        target_prompt: TARGET_PROMPT.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_averages_blocks() {
        let img = Tensor::from_vec(&[1, 1, 2, 4], vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let z = encode_frames(&img, 2).unwrap();
        assert_eq!(z.shape(), &[1, 1, 1, 2]);
        assert_eq!(z.data(), [0.0, 1.0]);
    }

    #[test]
    fn synthetic_video_is_consistent_and_deterministic() {
        let cfg = NetConfig::default();
        let v = synthetic_video(&cfg, 7).unwrap();
        assert_eq!(v.latents.shape(), &cfg.latent_shape());
        for clip in [&v.source, &v.reference] {
            assert_eq!(clip.masks.len(), cfg.frames);
            assert!(clip.masks.iter().all(|m| m.is_binary() && m.foreground().next().is_some()));
        }
        let again = synthetic_video(&cfg, 7).unwrap();
        assert_eq!(again.latents, v.latents);
        assert_ne!(synthetic_video(&cfg, 8).unwrap().latents, v.latents);
    }
}
