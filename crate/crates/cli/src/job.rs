//! Job files: JSON that points at the tensors, rasters and keypoints of one
//! edit, relative to the job file's directory.
//!
//! ```json
//! {
//!   "latents": "latents.melt",
//!   "source": { "masks": ["source/mask_000.pgm", ...], "skeletons": [...] },
//!   "reference": { "masks": [...], "keypoints": "reference/keypoints.json" },
//!   "source_prompt": "a man walking on the street",
//!   "target_prompt": "a man dancing on the street"
//! }
//! ```
//!
//! A pose clip gives either `skeletons` (PGM per frame) or `keypoints`
//! (rendered with `bones`, or the default 18-joint bone table).

use std::path::{Path, PathBuf};

use motionedit_core::fixture::{synthetic_video, PoseClip};
use motionedit_core::network::NetConfig;
use motionedit_core::pipeline::{EditJob, SamplerConfig};
use motionedit_core::raster::Raster;
use motionedit_core::skeleton::{default_bones, keypoints_to_json, read_bones, read_keypoints, render_keypoints};
use motionedit_core::tensor::{read_melt_file, write_melt_file};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFiles {
    pub masks: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skeletons: Option<Vec<PathBuf>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bones: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobFile {
    pub latents: PathBuf,
    pub source: PoseFiles,
    pub reference: PoseFiles,
    pub source_prompt: String,
    pub target_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerConfig>,
}

/// A job with its files read.
#[derive(Debug, Clone)]
pub struct LoadedJob {
    pub file: JobFile,
    pub job: EditJob,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(path, e))
}

fn read_masks(base: &Path, files: &[PathBuf]) -> Result<Vec<Raster>> {
    files
        .iter()
        .map(|p| {
            let p = base.join(p);
            Raster::read_mask(&p).map_err(|e| CliError::input(&p, e))
        })
        .collect()
}

fn read_skeletons(base: &Path, files: &PoseFiles, width: usize, height: usize) -> Result<Vec<Raster>> {
    match (&files.skeletons, &files.keypoints) {
        (Some(list), None) => list
            .iter()
            .map(|p| {
                let p = base.join(p);
                Raster::read_pgm(&p).map_err(|e| CliError::input(&p, e))
            })
            .collect(),
        (None, Some(kp)) => {
            let kp = base.join(kp);
            let frames = read_keypoints(&kp).map_err(|e| CliError::input(&kp, e))?;
            let bones = match &files.bones {
                Some(b) => {
                    let b = base.join(b);
                    read_bones(&b).map_err(|e| CliError::input(&b, e))?
                }
                None => default_bones(),
            };
            frames
                .iter()
                .enumerate()
                .map(|(i, k)| render_keypoints(k, height, width, &bones).map_err(|e| CliError::input(&kp, e.in_frame(i))))
                .collect()
        }
        _ => Err(CliError::Usage("a pose clip needs exactly one of `skeletons` or `keypoints`".into())),
    }
}

impl LoadedJob {
    /// Reads a job file; keypoints are rendered at the model's input
    /// resolution.
    pub fn load(path: &Path, model: &NetConfig) -> Result<Self> {
        let file: JobFile = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let latents_path = base.join(&file.latents);
        let latents = read_melt_file(&latents_path).map_err(|e| CliError::input(&latents_path, e))?;
        let (w, h) = (model.image_width(), model.image_height());
        let job = EditJob {
            latents,
            source_skeletons: read_skeletons(base, &file.source, w, h)?,
            source_masks: read_masks(base, &file.source.masks)?,
            reference_skeletons: read_skeletons(base, &file.reference, w, h)?,
            reference_masks: read_masks(base, &file.reference.masks)?,
            source_prompt: file.source_prompt.clone(),
            target_prompt: file.target_prompt.clone(),
        };
        job.validate().map_err(|e| CliError::input(path, e))?;
        Ok(Self { file, job })
    }
}

fn write_clip(dir: &Path, name: &str, clip: &PoseClip) -> Result<PoseFiles> {
    let sub = dir.join(name);
    std::fs::create_dir_all(&sub).map_err(|e| CliError::input(&sub, e))?;
    let mut files = PoseFiles::default();
    let mut skeletons = Vec::new();
    for (i, (s, m)) in clip.skeletons.iter().zip(&clip.masks).enumerate() {
        let (sk, mk) = (format!("{name}/skeleton_{i:03}.pgm"), format!("{name}/mask_{i:03}.pgm"));
        s.write_pgm(dir.join(&sk))?;
        m.mask_to_intensity().write_pgm(dir.join(&mk))?;
        skeletons.push(sk.into());
        files.masks.push(mk.into());
    }
    files.skeletons = Some(skeletons);
    let kp = dir.join(name).join("keypoints.json");
    std::fs::write(&kp, keypoints_to_json(&clip.keypoints) + "\n").map_err(|e| CliError::input(&kp, e))?;
    Ok(files)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| CliError::input(path, e))
}

/// Writes the seeded synthetic video as a job under `dir` and returns the
/// job file's path.
pub fn write_fixture(dir: &Path, model: &NetConfig, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::input(dir, e))?;
    let video = synthetic_video(model, seed)?;
    write_melt_file(dir.join("latents.melt"), &video.latents)?;
    let job = JobFile {
        latents: "latents.melt".into(),
        source: write_clip(dir, "source", &video.source)?,
        reference: write_clip(dir, "reference", &video.reference)?,
        source_prompt: video.source_prompt,
        target_prompt: video.target_prompt,
        seed: None,
        sampler: None,
    };
    let path = dir.join("job.json");
    write_json(&path, &job)?;
    Ok(path)
}
