//! Single-head attention kernels: the shared scaled dot-product core,
//! consistent-sparse (previous + current frame) attention, temporal attention
//! across frames, and the adapter's content-aware cross-attention.
//!
//! Tokens are rows. A projection is applied as `tokens · W`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Query, key, value, and output projections of one attention layer.
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
}

impl ProjectionSet {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_out: Tensor) -> Result<Self> {
        let d = w_q.shape()[0];
        for w in [&w_q, &w_k, &w_v, &w_out] {
            if w.shape() != [d, d] {
                return Err(Error::mismatch("projection_set", &[d, d], w.shape()));
            }
        }
        Ok(Self { w_q, w_k, w_v, w_out })
    }

    pub fn random(d: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f32).sqrt();
        Self {
            w_q: Tensor::randn(&[d, d], std, rng),
            w_k: Tensor::randn(&[d, d], std, rng),
            w_v: Tensor::randn(&[d, d], std, rng),
            w_out: Tensor::randn(&[d, d], std, rng),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Tensor::eye(d),
            w_k: Tensor::eye(d),
            w_v: Tensor::eye(d),
            w_out: Tensor::eye(d),
        }
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_out", &self.w_out),
        ]
    }
}

/// Tokens of one frame, `[N, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens(pub Tensor);

impl FrameTokens {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape("frame_tokens", format!("expected [N, d], got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    t.reshape(&[1, s[0], s[1]])
}

/// Row-stochastic attention weights `softmax(Q·Kᵀ/√d)` for `[B, n, d]` inputs.
pub fn attention_weights_batched(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.rank() != 3 || k.rank() != 3 || q.shape()[0] != k.shape()[0] || q.shape()[2] != k.shape()[2] {
        return Err(Error::mismatch("attend", q.shape(), k.shape()));
    }
    let d = q.shape()[2];
    q.bmm(&k.transpose()?)?.scale(1.0 / (d as f32).sqrt())?.softmax(2)
}

/// Batched `softmax(Q·Kᵀ/√d)·V`: `q` is `[B, n_q, d]`, `k` is `[B, n_k, d]`,
/// `v` is `[B, n_k, d_v]`.
pub fn attend_batched(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if v.rank() != 3 || v.shape()[..2] != k.shape()[..2] {
        return Err(Error::mismatch("attend", k.shape(), v.shape()));
    }
    attention_weights_batched(q, k)?.bmm(v)
}

/// `softmax(Q·Kᵀ/√d)·V` for `[n_q, d]`, `[n_k, d]`, `[n_k, d_v]`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    for t in [q, k, v] {
        if t.rank() != 2 {
            return Err(Error::shape("attend", format!("expected rank-2 tokens, got {:?}", t.shape())));
        }
    }
    if q.shape()[1] != k.shape()[1] {
        return Err(Error::mismatch("attend", q.shape(), k.shape()));
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(Error::mismatch("attend", k.shape(), v.shape()));
    }
    let out = attend_batched(&as_batch(q)?, &as_batch(k)?, &as_batch(v)?)?;
    out.reshape(&[q.shape()[0], v.shape()[1]])
}

/// Index of the frame each frame attends to as "previous". Frame 0 has no
/// predecessor and uses itself.
pub fn previous_frame(i: usize) -> usize {
    i.saturating_sub(1)
}

/// Gathers the previous frame of every frame in a `[F, ...]` tensor.
pub fn shift_to_previous(z: &Tensor) -> Result<Tensor> {
    let frames = z.shape()[0];
    let index = Arc::new((0..frames).map(|i| Some(previous_frame(i))).collect());
    z.gather(index)
}

/// Keys and values over `[z_{i−1}, z_i]` for every frame of `z: [F, N, d]`;
/// both results are `[F, 2N, d]`.
pub fn cs_keys_values(z: &Tensor, p: &ProjectionSet) -> Result<(Tensor, Tensor)> {
    let ctx = Tensor::concat(&[&shift_to_previous(z)?, z], 1)?;
    Ok((ctx.linear(&p.w_k)?, ctx.linear(&p.w_v)?))
}

/// Consistent-sparse attention for a whole clip `z: [F, N, d]`: queries from
/// each frame, keys and values from the previous and current frames.
pub fn cs_attention_video(z: &Tensor, p: &ProjectionSet) -> Result<Tensor> {
    check_video("cs_attention", z, p)?;
    let q = z.linear(&p.w_q)?;
    let (k, v) = cs_keys_values(z, p)?;
    attend_batched(&q, &k, &v)?.linear(&p.w_out)
}

/// Consistent-sparse attention for one frame.
pub fn cs_attention(z_prev: &FrameTokens, z_cur: &FrameTokens, p: &ProjectionSet) -> Result<FrameTokens> {
    if z_prev.0.shape() != z_cur.0.shape() {
        return Err(Error::mismatch("cs_attention", z_prev.0.shape(), z_cur.0.shape()));
    }
    if z_cur.width() != p.width() {
        return Err(Error::mismatch("cs_attention", z_cur.0.shape(), p.w_q.shape()));
    }
    let ctx = Tensor::concat(&[&z_prev.0, &z_cur.0], 0)?;
    let out = attend(
        &z_cur.0.matmul(&p.w_q)?,
        &ctx.matmul(&p.w_k)?,
        &ctx.matmul(&p.w_v)?,
    )?;
    FrameTokens::new(out.matmul(&p.w_out)?)
}

fn check_video(op: &'static str, z: &Tensor, p: &ProjectionSet) -> Result<()> {
    if z.rank() != 3 || z.shape()[2] != p.width() {
        return Err(Error::mismatch(op, z.shape(), p.w_q.shape()));
    }
    Ok(())
}

/// Self-attention across the frame axis of `[F, d]` tokens at one location.
pub fn temporal_attention(stack: &Tensor, p: &ProjectionSet) -> Result<Tensor> {
    if stack.rank() != 2 || stack.shape()[1] != p.width() {
        return Err(Error::mismatch("temporal_attention", stack.shape(), p.w_q.shape()));
    }
    let out = temporal_attention_video(&stack.reshape(&[stack.shape()[0], 1, p.width()])?, p)?;
    out.reshape(stack.shape())
}

/// Rearranges `[F, N, d]` to per-location frame stacks `[N, F, d]`.
pub fn to_locations(z: &Tensor) -> Result<Tensor> {
    z.permute(&[1, 0, 2])
}

/// Temporal self-attention applied independently at each of the `N`
/// locations of `z: [F, N, d]`.
pub fn temporal_attention_video(z: &Tensor, p: &ProjectionSet) -> Result<Tensor> {
    check_video("temporal_attention", z, p)?;
    let loc = to_locations(z)?;
    let out = attend_batched(&loc.linear(&p.w_q)?, &loc.linear(&p.w_k)?, &loc.linear(&p.w_v)?)?;
    to_locations(&out.linear(&p.w_out)?)
}

/// Content-aware cross-attention: queries from pose tokens `m`, keys and
/// values from latent tokens `z`. Output has one row per pose token.
pub fn content_cross_attention(m: &FrameTokens, z: &FrameTokens, p: &ProjectionSet) -> Result<FrameTokens> {
    if m.width() != z.width() || m.width() != p.width() {
        return Err(Error::mismatch("content_cross_attention", m.0.shape(), z.0.shape()));
    }
    let out = attend(&m.0.matmul(&p.w_q)?, &z.0.matmul(&p.w_k)?, &z.0.matmul(&p.w_v)?)?;
    FrameTokens::new(out.matmul(&p.w_out)?)
}

/// Per-frame content-aware cross-attention over clips `m: [F, N_m, d]`,
/// `z: [F, N_z, d]`.
pub fn content_cross_attention_video(m: &Tensor, z: &Tensor, p: &ProjectionSet) -> Result<Tensor> {
    check_video("content_cross_attention", m, p)?;
    check_video("content_cross_attention", z, p)?;
    if m.shape()[0] != z.shape()[0] {
        return Err(Error::mismatch("content_cross_attention", m.shape(), z.shape()));
    }
    attend_batched(&m.linear(&p.w_q)?, &z.linear(&p.w_k)?, &z.linear(&p.w_v)?)?.linear(&p.w_out)
}
