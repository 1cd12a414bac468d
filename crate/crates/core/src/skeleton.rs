//! Skeleton alignment: rescale a reference pose drawing to the source
//! protagonist's height and move it onto the source protagonist's position.
//! Also keypoint rasterization and the JSON formats for keypoints and bones.
//!
//! Coordinates are `(x, y)` = (column, row), origin top-left.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Tightest axis-aligned box around the foreground of a mask.
pub fn bounding_rect(mask: &Raster) -> Result<BBox> {
    let mut it = mask.foreground();
    let (x0, y0) = it.next().ok_or(Error::EmptyForeground)?;
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (x0, x0, y0, y0);
    for (x, y) in it {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    Ok(BBox {
        x: xmin,
        y: ymin,
        w: xmax - xmin + 1,
        h: ymax - ymin + 1,
    })
}

/// Mean `(x, y)` of the foreground pixels.
pub fn foreground_center(mask: &Raster) -> Result<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for (x, y) in mask.foreground() {
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyForeground);
    }
    Ok((sx / n as f64, sy / n as f64))
}

fn crop(r: &Raster, b: BBox) -> Raster {
    let mut out = Raster::new(b.w, b.h);
    for y in 0..b.h {
        let src = (b.y + y) * r.width + b.x;
        out.data[y * b.w..(y + 1) * b.w].copy_from_slice(&r.data[src..src + b.w]);
    }
    out
}

/// Bilinear resize with half-pixel centers and edge clamping. Same-size
/// resizes are exact copies.
pub fn resize_bilinear(r: &Raster, w: usize, h: usize) -> Raster {
    if w == r.width && h == r.height {
        return r.clone();
    }
    let (sx, sy) = (r.width as f64 / w as f64, r.height as f64 / h as f64);
    let mut out = Raster::new(w, h);
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (r.height - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(r.height - 1);
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (r.width - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(r.width - 1);
            let p = |x, y| r.get(x, y) as f64;
            let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
            let bot = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
            out.set(x, y, (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Mask resize by footprint coverage: an output pixel is set when any source
/// pixel under it is set. Keeps masks binary, and the result's bbox spans the
/// whole output when the input's does.
pub fn resize_mask(r: &Raster, w: usize, h: usize) -> Raster {
    if w == r.width && h == r.height {
        return r.clone();
    }
    let span = |i: usize, src: usize, dst: usize| (i * src / dst, ((i + 1) * src).div_ceil(dst));
    let mut out = Raster::new(w, h);
    for y in 0..h {
        let (y0, y1) = span(y, r.height, h);
        for x in 0..w {
            let (x0, x1) = span(x, r.width, w);
            if (y0..y1).any(|sy| (x0..x1).any(|sx| r.get(sx, sy) != 0)) {
                out.set(x, y, 1);
            }
        }
    }
    out
}

/// Translation by `(dx, dy)` with bilinear sampling and zero border:
/// `out(x, y) = in(x − dx, y − dy)`.
pub fn translate_bilinear(r: &Raster, dx: f64, dy: f64) -> Raster {
    let mut out = Raster::new(r.width, r.height);
    let sample = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= r.width as i64 || y >= r.height as i64 {
            0.0
        } else {
            r.get(x as usize, y as usize) as f64
        }
    };
    for y in 0..r.height {
        let fy = y as f64 - dy;
        let (y0, ty) = (fy.floor() as i64, fy - fy.floor());
        for x in 0..r.width {
            let fx = x as f64 - dx;
            let (x0, tx) = (fx.floor() as i64, fx - fx.floor());
            let top = sample(x0, y0) * (1.0 - tx) + sample(x0 + 1, y0) * tx;
            let bot = sample(x0, y0 + 1) * (1.0 - tx) + sample(x0 + 1, y0 + 1) * tx;
            out.set(x, y, (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Translation by `(dx, dy)` with nearest sampling and zero border.
pub fn translate_nearest(r: &Raster, dx: f64, dy: f64) -> Raster {
    let mut out = Raster::new(r.width, r.height);
    for y in 0..r.height {
        let sy = (y as f64 - dy + 0.5).floor() as i64;
        for x in 0..r.width {
            let sx = (x as f64 - dx + 0.5).floor() as i64;
            if sx >= 0 && sy >= 0 && (sx as usize) < r.width && (sy as usize) < r.height {
                out.set(x, y, r.get(sx as usize, sy as usize));
            }
        }
    }
    out
}

/// Geometry of one alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub source_bbox: BBox,
    pub reference_bbox: BBox,
    /// Reference aspect ratio `w_r / h_r`.
    pub ratio: f64,
    /// Height scale `h_s / h_r` applied to the reference crop.
    pub scale: f64,
    /// Resized reference width `round(ratio · h_s)`.
    pub scaled_width: usize,
    /// Left column of the pasted crop before clamping.
    pub paste_x: i64,
    pub paste_y: usize,
    /// True when the paste ran off the left edge and was cropped.
    pub clamped: bool,
    /// Source center minus pasted reference center.
    pub v_trans: [f64; 2],
    /// Net displacement of the reference box's top-left corner: paste
    /// displacement plus `v_trans`.
    pub offset: [f64; 2],
}

/// Transform derived from a source/reference mask pair, reusable across
/// frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignPlan {
    pub report: AlignReport,
    canvas: (usize, usize),
}

fn same_dims(rs: &[&Raster]) -> Result<()> {
    let first = rs[0];
    if rs.iter().any(|r| !r.same_dims(first)) {
        let dims: Vec<_> = rs.iter().map(|r| (r.width, r.height)).collect();
        return Err(Error::Mask(format!("raster dimensions differ: {dims:?}")));
    }
    Ok(())
}

fn resize_and_paste(plan_src: BBox, plan_ref: BBox, w_star: usize, canvas: (usize, usize), s: &Raster, is_mask: bool) -> (Raster, i64, bool) {
    let cropped = crop(s, plan_ref);
    let patch = if is_mask {
        resize_mask(&cropped, w_star, plan_src.h)
    } else {
        resize_bilinear(&cropped, w_star, plan_src.h)
    };
    let paste_x = if w_star < plan_src.w {
        plan_src.x as i64
    } else {
        plan_src.x as i64 - (w_star - plan_src.w) as i64
    };
    let mut out = Raster::new(canvas.0, canvas.1);
    let mut clamped = false;
    for y in 0..plan_src.h {
        for x in 0..w_star {
            let cx = paste_x + x as i64;
            if cx < 0 || cx >= canvas.0 as i64 {
                clamped = true;
                continue;
            }
            out.set(cx as usize, plan_src.y + y, patch.get(x, y));
        }
    }
    (out, paste_x, clamped)
}

impl AlignPlan {
    pub fn new(m_sr: &Raster, m_rf: &Raster) -> Result<Self> {
        same_dims(&[m_sr, m_rf])?;
        let sb = bounding_rect(m_sr)?;
        let rb = bounding_rect(m_rf)?;
        let ratio = rb.w as f64 / rb.h as f64;
        let w_star = (ratio * sb.h as f64).round() as usize;
        if w_star == 0 {
            return Err(Error::Mask(format!(
                "degenerate resize: reference box {}x{} scaled to width 0",
                rb.w, rb.h
            )));
        }
        let canvas = (m_sr.width, m_sr.height);
        let (pasted, paste_x, clamped) = resize_and_paste(sb, rb, w_star, canvas, m_rf, true);
        if clamped {
            log::warn!("alignment paste at column {paste_x} runs off the left edge; cropping");
        }
        let c_s = foreground_center(m_sr)?;
        let c_r = foreground_center(&pasted)?;
        let v = [c_s.0 - c_r.0, c_s.1 - c_r.1];
        let report = AlignReport {
            source_bbox: sb,
            reference_bbox: rb,
            ratio,
            scale: sb.h as f64 / rb.h as f64,
            scaled_width: w_star,
            paste_x,
            paste_y: sb.y,
            clamped,
            v_trans: v,
            offset: [paste_x as f64 - rb.x as f64 + v[0], sb.y as f64 - rb.y as f64 + v[1]],
        };
        Ok(Self { report, canvas })
    }

    /// Applies the plan to a reference skeleton and mask.
    pub fn apply(&self, s_rf: &Raster, m_rf: &Raster) -> Result<Aligned> {
        same_dims(&[s_rf, m_rf])?;
        if (s_rf.width, s_rf.height) != self.canvas {
            return Err(Error::Mask("reference frame size differs from the plan".into()));
        }
        let r = &self.report;
        let (ps, ..) = resize_and_paste(r.source_bbox, r.reference_bbox, r.scaled_width, self.canvas, s_rf, false);
        let (pm, ..) = resize_and_paste(r.source_bbox, r.reference_bbox, r.scaled_width, self.canvas, m_rf, true);
        let [dx, dy] = r.v_trans;
        Ok(Aligned {
            skeleton: translate_bilinear(&ps, dx, dy),
            mask: translate_nearest(&pm, dx, dy),
            report: r.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    pub skeleton: Raster,
    pub mask: Raster,
    pub report: AlignReport,
}

/// Aligns a reference skeleton onto the source protagonist.
pub fn align(s_sr: &Raster, m_sr: &Raster, s_rf: &Raster, m_rf: &Raster) -> Result<Aligned> {
    same_dims(&[s_sr, m_sr, s_rf, m_rf])?;
    AlignPlan::new(m_sr, m_rf)?.apply(s_rf, m_rf)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    #[default]
    PerFrame,
    /// Geometry from frame 0, reused for every frame.
    FirstFrame,
}

/// Aligns every frame of a clip. Errors carry the frame index.
pub fn align_clip(
    s_sr: &[Raster],
    m_sr: &[Raster],
    s_rf: &[Raster],
    m_rf: &[Raster],
    mode: AlignMode,
) -> Result<Vec<Aligned>> {
    let n = s_sr.len();
    if [m_sr.len(), s_rf.len(), m_rf.len()].iter().any(|&l| l != n) || n == 0 {
        return Err(Error::Mask(format!(
            "frame counts differ: {n}, {}, {}, {}",
            m_sr.len(),
            s_rf.len(),
            m_rf.len()
        )));
    }
    let first = match mode {
        AlignMode::FirstFrame => Some(AlignPlan::new(&m_sr[0], &m_rf[0]).map_err(|e| e.in_frame(0))?),
        AlignMode::PerFrame => None,
    };
    (0..n)
        .map(|i| {
            let r = match &first {
                Some(plan) => same_dims(&[&s_sr[i], &m_sr[i]]).and_then(|_| plan.apply(&s_rf[i], &m_rf[i])),
                None => align(&s_sr[i], &m_sr[i], &s_rf[i], &m_rf[i]),
            };
            r.map_err(|e| e.in_frame(i))
        })
        .collect()
}

/// One detected joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Named joints of one frame. Absent names and joints with non-positive
/// confidence count as missing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeypointSet {
    pub joints: BTreeMap<String, Joint>,
}

impl KeypointSet {
    pub fn present(&self, name: &str) -> Option<&Joint> {
        self.joints.get(name).filter(|j| j.confidence > 0.0)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let joints = self
            .joints
            .iter()
            .map(|(k, j)| (k.clone(), Joint { x: j.x + dx, y: j.y + dy, ..*j }))
            .collect();
        Self { joints }
    }
}

/// Parses a JSON array of frames, each an object `joint → [x, y, confidence]`
/// (or `null` for a missing joint).
pub fn parse_keypoints(json: &str) -> Result<Vec<KeypointSet>> {
    let raw: Vec<BTreeMap<String, Option<[f64; 3]>>> =
        serde_json::from_str(json).map_err(|e| Error::Keypoints(e.to_string()))?;
    Ok(raw
        .into_iter()
        .map(|frame| KeypointSet {
            joints: frame
                .into_iter()
                .filter_map(|(k, v)| v.map(|[x, y, c]| (k, Joint { x, y, confidence: c })))
                .collect(),
        })
        .collect())
}

pub fn keypoints_to_json(frames: &[KeypointSet]) -> String {
    let raw: Vec<BTreeMap<&str, [f64; 3]>> = frames
        .iter()
        .map(|f| f.joints.iter().map(|(k, j)| (k.as_str(), [j.x, j.y, j.confidence])).collect())
        .collect();
    serde_json::to_string(&raw).expect("keypoints serialize")
}

pub fn read_keypoints(path: impl AsRef<Path>) -> Result<Vec<KeypointSet>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_keypoints(&text).map_err(|e| Error::Keypoints(format!("{}: {e}", path.display())))
}

pub type BoneTable = Vec<(String, String)>;

pub fn parse_bones(json: &str) -> Result<BoneTable> {
    serde_json::from_str(json).map_err(|e| Error::Keypoints(format!("bone table: {e}")))
}

pub fn read_bones(path: impl AsRef<Path>) -> Result<BoneTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bones(&text)
}

/// The 18 joints of the usual body-pose layout.
pub const JOINTS_18: [&str; 18] = [
    "nose",
    "neck",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_eye",
    "l_eye",
    "r_ear",
    "l_ear",
];

/// Limb connections for [`JOINTS_18`].
pub fn default_bones() -> BoneTable {
    [
        ("neck", "r_shoulder"),
        ("neck", "l_shoulder"),
        ("r_shoulder", "r_elbow"),
        ("r_elbow", "r_wrist"),
        ("l_shoulder", "l_elbow"),
        ("l_elbow", "l_wrist"),
        ("neck", "r_hip"),
        ("r_hip", "r_knee"),
        ("r_knee", "r_ankle"),
        ("neck", "l_hip"),
        ("l_hip", "l_knee"),
        ("l_knee", "l_ankle"),
        ("neck", "nose"),
        ("nose", "r_eye"),
        ("r_eye", "r_ear"),
        ("nose", "l_eye"),
        ("l_eye", "l_ear"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

/// Stick figure centred at `(cx, cy)`; `s` is roughly the head-to-ankle
/// height over 4, `phase` swings the limbs.
pub fn stick_figure(cx: f64, cy: f64, s: f64, phase: f64) -> KeypointSet {
    let (sw, sn) = (phase.sin(), phase.cos());
    let pts: [(&str, f64, f64); 18] = [
        ("nose", 0.0, -1.75),
        ("neck", 0.0, -1.25),
        ("r_shoulder", -0.5, -1.25),
        ("r_elbow", -0.7 + 0.2 * sw, -0.6),
        ("r_wrist", -0.8 + 0.45 * sw, 0.0 - 0.1 * sn),
        ("l_shoulder", 0.5, -1.25),
        ("l_elbow", 0.7 - 0.2 * sw, -0.6),
        ("l_wrist", 0.8 - 0.45 * sw, 0.0 + 0.1 * sn),
        ("r_hip", -0.3, 0.25),
        ("r_knee", -0.35 - 0.3 * sw, 1.05),
        ("r_ankle", -0.4 - 0.5 * sw, 1.85),
        ("l_hip", 0.3, 0.25),
        ("l_knee", 0.35 + 0.3 * sw, 1.05),
        ("l_ankle", 0.4 + 0.5 * sw, 1.85),
        ("r_eye", -0.12, -1.85),
        ("l_eye", 0.12, -1.85),
        ("r_ear", -0.25, -1.8),
        ("l_ear", 0.25, -1.8),
    ];
    KeypointSet {
        joints: pts
            .iter()
            .map(|&(n, x, y)| {
                (
                    n.to_string(),
                    Joint {
                        x: cx + x * s,
                        y: cy + y * s,
                        confidence: 1.0,
                    },
                )
            })
            .collect(),
    }
}

pub const LINE_WIDTH: f64 = 2.0;

fn segment_distance(px: f64, py: f64, a: &Joint, b: &Joint) -> f64 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.x) * vx + (py - a.y) * vy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.x + t * vx, a.y + t * vy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Draws every bone whose two joints are present as an anti-aliased line of
/// width [`LINE_WIDTH`]; a pixel's value is its approximate coverage.
pub fn render_keypoints(k: &KeypointSet, height: usize, width: usize, bones: &BoneTable) -> Result<Raster> {
    let present: Vec<(&String, &Joint)> = k.joints.iter().filter(|(_, j)| j.confidence > 0.0).collect();
    for (name, j) in &present {
        if !(0.0..width as f64).contains(&j.x) || !(0.0..height as f64).contains(&j.y) {
            return Err(Error::Keypoints(format!(
                "joint `{name}` at ({}, {}) outside {width}x{height}",
                j.x, j.y
            )));
        }
    }
    let distinct = present
        .iter()
        .map(|(_, j)| (j.x.to_bits(), j.y.to_bits()))
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if distinct < 2 {
        return Err(Error::Keypoints(format!(
            "need at least 2 distinct present joints, got {distinct}"
        )));
    }
    let mut cover = vec![0.0f64; width * height];
    let half = LINE_WIDTH / 2.0;
    for (a, b) in bones {
        let (Some(ja), Some(jb)) = (k.present(a), k.present(b)) else {
            continue;
        };
        let x0 = (ja.x.min(jb.x) - half - 1.0).floor().max(0.0) as usize;
        let x1 = ((ja.x.max(jb.x) + half + 1.0).ceil() as usize).min(width - 1);
        let y0 = (ja.y.min(jb.y) - half - 1.0).floor().max(0.0) as usize;
        let y1 = ((ja.y.max(jb.y) + half + 1.0).ceil() as usize).min(height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = segment_distance(x as f64, y as f64, ja, jb);
                let c = (half + 0.5 - d).clamp(0.0, 1.0);
                let cell = &mut cover[y * width + x];
                *cell = cell.max(c);
            }
        }
    }
    let data = cover.iter().map(|c| (c * 255.0).round() as u8).collect();
    Raster::from_vec(width, height, data)
}

/// Filled protagonist mask: pixels within `radius` of any bone.
pub fn body_mask(k: &KeypointSet, height: usize, width: usize, bones: &BoneTable, radius: f64) -> Raster {
    let mut m = Raster::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let inside = bones.iter().any(|(a, b)| match (k.present(a), k.present(b)) {
                (Some(ja), Some(jb)) => segment_distance(x as f64, y as f64, ja, jb) <= radius,
                _ => false,
            });
            if inside {
                m.set(x, y, 1);
            }
        }
    }
    m
}
