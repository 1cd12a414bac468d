//! Differentiable primitives. Every public operation validates shapes, computes
//! its output eagerly, and records a vector-Jacobian product when any input is
//! tracked.

use std::sync::Arc;

use super::tape::record;
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Row-major single-precision GEMM with arbitrary strides: `c = a·b + beta·c`.
#[allow(clippy::too_many_arguments)]
/// Products up to this many multiply-adds skip the packed kernel, whose
/// setup dominates at attention-head sizes.
const SMALL_GEMM: usize = 16 * 1024;

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m * k * n <= SMALL_GEMM {
        let c = &mut c[..m * n];
        if beta == 0.0 {
            c.fill(0.0);
        } else if beta != 1.0 {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * rsa + p * csa];
                let b = &b[p * rsb..];
                if csb == 1 {
                    row.iter_mut().zip(&b[..n]).for_each(|(o, bv)| *o += av * bv);
                } else {
                    row.iter_mut().enumerate().for_each(|(j, o)| *o += av * b[j * csb]);
                }
            }
        }
        return;
    }
    // SAFETY: the strides describe matrices that lie within the given slices
    // (checked by the callers' shape validation), and `c` is a distinct
    // mutable buffer of at least m*n elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::Axis {
            op,
            axis,
            rank: t.rank(),
        });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn unary(
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f32) -> f32,
    df: impl Fn(f32) -> f32 + Send + Sync + 'static,
) -> Result<Tensor> {
    let out = Tensor::raw(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
    let xs = x.data.clone();
    record(op, &[x], out, move |g, _| {
        vec![Some(g.iter().zip(xs.iter()).map(|(g, &v)| g * df(v)).collect())]
    })
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        let out = Tensor::raw(self.shape.clone(), data);
        record("add", &[self, other], out, |g, needs| {
            needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        let out = Tensor::raw(self.shape.clone(), data);
        record("sub", &[self, other], out, |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -v).collect()),
            ]
        })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::raw(self.shape.clone(), data);
        let (a, b) = (self.data.clone(), other.data.clone());
        record("mul", &[self, other], out, move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()),
                needs[1].then(|| g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()),
            ]
        })
    }

    pub fn scale(&self, s: f32) -> Result<Tensor> {
        let out = Tensor::raw(self.shape.clone(), self.data().iter().map(|v| v * s).collect());
        record("scale", &[self], out, move |g, _| {
            vec![Some(g.iter().map(|v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f32) -> Result<Tensor> {
        let out = Tensor::raw(self.shape.clone(), self.data().iter().map(|v| v + s).collect());
        record("add_scalar", &[self], out, |g, _| vec![Some(g.to_vec())])
    }

    /// Adds a length-`d` vector to every row along the last axis.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let d = *self.shape.last().unwrap();
        if row.shape() != [d] {
            return Err(Error::mismatch("add_row", &self.shape, row.shape()));
        }
        let r = row.data();
        let data = self
            .data()
            .chunks(d)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::raw(self.shape.clone(), data);
        record("add_row", &[self, row], out, move |g, needs| {
            let grow = needs[1].then(|| {
                let mut acc = vec![0.0f32; d];
                for chunk in g.chunks(d) {
                    acc.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![needs[0].then(|| g.to_vec()), grow]
        })
    }

    /// Multiplies every row along the last axis by a length-`d` vector.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        let d = *self.shape.last().unwrap();
        if row.shape() != [d] {
            return Err(Error::mismatch("mul_row", &self.shape, row.shape()));
        }
        let r = row.data.clone();
        let data = self
            .data()
            .chunks(d)
            .flat_map(|chunk| chunk.iter().zip(r.iter()).map(|(a, b)| a * b))
            .collect();
        let out = Tensor::raw(self.shape.clone(), data);
        let x = self.data.clone();
        record("mul_row", &[self, row], out, move |g, needs| {
            let gx = needs[0].then(|| {
                g.chunks(d)
                    .flat_map(|chunk| chunk.iter().zip(r.iter()).map(|(g, b)| g * b))
                    .collect()
            });
            let grow = needs[1].then(|| {
                let mut acc = vec![0.0f32; d];
                for (gc, xc) in g.chunks(d).zip(x.chunks(d)) {
                    for j in 0..d {
                        acc[j] += gc[j] * xc[j];
                    }
                }
                acc
            });
            vec![gx, grow]
        })
    }

    pub fn silu(&self) -> Result<Tensor> {
        unary(
            "silu",
            self,
            |v| v / (1.0 + (-v).exp()),
            |v| {
                let s = 1.0 / (1.0 + (-v).exp());
                s * (1.0 + v * (1.0 - s))
            },
        )
    }

    pub fn tanh(&self) -> Result<Tensor> {
        unary("tanh", self, f32::tanh, |v| {
            let t = v.tanh();
            1.0 - t * t
        })
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::mismatch("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut c = vec![0.0f32; m * n];
        gemm(m, k, n, self.data(), (k, 1), other.data(), (n, 1), 0.0, &mut c);
        let out = Tensor::raw(vec![m, n], c);
        let (a, b) = (self.data.clone(), other.data.clone());
        record("matmul", &[self, other], out, move |g, needs| {
            // dA = G·Bᵀ, dB = Aᵀ·G
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0f32; m * k];
                gemm(m, n, k, g, (n, 1), &b, (1, n), 0.0, &mut ga);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0f32; k * n];
                gemm(k, m, n, &a, (1, k), g, (n, 1), 0.0, &mut gb);
                gb
            });
            vec![ga, gb]
        })
    }

    /// Batched matrix product of `[B, m, k]` and `[B, k, n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 3
            || other.rank() != 3
            || self.shape[0] != other.shape[0]
            || self.shape[2] != other.shape[1]
        {
            return Err(Error::mismatch("bmm", &self.shape, &other.shape));
        }
        let (bs, m, k, n) = (self.shape[0], self.shape[1], self.shape[2], other.shape[2]);
        let mut c = vec![0.0f32; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &self.data()[i * m * k..],
                (k, 1),
                &other.data()[i * k * n..],
                (n, 1),
                0.0,
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::raw(vec![bs, m, n], c);
        let (a, b) = (self.data.clone(), other.data.clone());
        record("bmm", &[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0f32; bs * m * k];
                for i in 0..bs {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        (n, 1),
                        &b[i * k * n..],
                        (1, n),
                        0.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0f32; bs * k * n];
                for i in 0..bs {
                    gemm(
                        k,
                        m,
                        n,
                        &a[i * m * k..],
                        (1, k),
                        &g[i * m * n..],
                        (n, 1),
                        0.0,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// Applies a `[k, n]` weight to the last axis of `[..., k]`.
    pub fn linear(&self, w: &Tensor) -> Result<Tensor> {
        let k = *self.shape.last().unwrap();
        if w.rank() != 2 || w.shape[0] != k {
            return Err(Error::mismatch("linear", &self.shape, w.shape()));
        }
        let rows = self.numel() / k;
        let mut out_shape = self.shape.clone();
        *out_shape.last_mut().unwrap() = w.shape[1];
        self.reshape(&[rows, k])?.matmul(w)?.reshape(&out_shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::mismatch("reshape", &self.shape, shape));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            node: None,
        };
        record("reshape", &[self], out, |g, _| vec![Some(g.to_vec())])
    }

    /// General axis permutation; output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("invalid axes {axes:?} for rank {rank}")));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let n = self.numel();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            map.push(idx.iter().zip(axes).map(|(i, &a)| i * in_strides[a]).sum::<usize>());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let src = self.data();
        let out = Tensor::raw(out_shape, map.iter().map(|&i| src[i]).collect());
        record("permute", &[self], out, move |g, _| {
            let mut gx = vec![0.0f32; n];
            for (o, &i) in map.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose", "rank must be at least 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("slice", self, axis)?;
        let (outer, extent, inner) = split_axis(&self.shape, axis);
        if len == 0 || start + len > extent {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} out of extent {extent}", start + len),
            ));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let out = Tensor::raw(shape, data);
        let total = self.numel();
        record("slice", &[self], out, move |g, _| {
            let mut gx = vec![0.0f32; total];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        check_axis("concat", first, axis)?;
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::mismatch("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let extents: Vec<usize> = parts.iter().map(|p| p.shape[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                data.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let out = Tensor::raw(shape, data);
        record("concat", parts, out, move |g, needs| {
            let mut grads: Vec<Option<Vec<f32>>> = needs
                .iter()
                .zip(&extents)
                .map(|(&n, &e)| n.then(|| Vec::with_capacity(outer * e * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &e) in grads.iter_mut().zip(&extents) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + e * inner]);
                    }
                    off += e * inner;
                }
            }
            grads
        })
    }

    /// Selects slices along the leading axis. `None` entries yield zeros.
    /// Gradients of repeated indices accumulate.
    pub fn gather(&self, index: Arc<Vec<Option<usize>>>) -> Result<Tensor> {
        let rows = self.shape[0];
        let width = self.numel() / rows;
        if index.is_empty() {
            return Err(Error::Empty("gather"));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= rows) {
            return Err(Error::shape("gather", format!("index {bad} out of {rows} rows")));
        }
        let src = self.data();
        let mut data = vec![0.0f32; index.len() * width];
        for (o, i) in index.iter().enumerate() {
            if let Some(i) = i {
                data[o * width..(o + 1) * width].copy_from_slice(&src[i * width..(i + 1) * width]);
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = index.len();
        let out = Tensor::raw(shape, data);
        let total = self.numel();
        record("gather", &[self], out, move |g, _| {
            let mut gx = vec![0.0f32; total];
            for (o, i) in index.iter().enumerate() {
                if let Some(i) = i {
                    gx[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[o * width..(o + 1) * width])
                        .for_each(|(a, b)| *a += b);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self, axis)?;
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let x = self.data();
        let mut y = vec![0.0f32; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    sum += e as f64;
                }
                let inv = (1.0 / sum) as f32;
                for j in 0..len {
                    y[at(j)] *= inv;
                }
            }
        }
        let out = Tensor::raw(self.shape.clone(), y);
        let ys = out.data.clone();
        record("softmax", &[self], out, move |g, _| {
            let mut gx = vec![0.0f32; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f32 = (0..len).map(|j| g[at(j)] * ys[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = ys[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let d = *self.shape.last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::mismatch("layer_norm", &self.shape, gamma.shape()));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (gm, bt) = (gamma.data.clone(), beta.data());
        let mut xhat = vec![0.0f32; x.len()];
        let mut rstd = vec![0.0f32; rows];
        let mut y = vec![0.0f32; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = (1.0 / (var + eps as f64).sqrt()) as f32;
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean as f32) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gm[j] + bt[j];
            }
        }
        let out = Tensor::raw(self.shape.clone(), y);
        record("layer_norm", &[self, gamma, beta], out, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0f32; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let (mut m1, mut m2) = (0.0f32, 0.0f32);
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= d as f32;
                    m2 /= d as f32;
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        gx[r * d + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                    }
                }
                gx
            });
            let ggamma = needs[1].then(|| {
                let mut acc = vec![0.0f32; d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        acc[j] += gr[j] * hr[j];
                    }
                }
                acc
            });
            let gbeta = needs[2].then(|| {
                let mut acc = vec![0.0f32; d];
                for gr in g.chunks(d) {
                    acc.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                }
                acc
            });
            vec![gx, ggamma, gbeta]
        })
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s = self.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let n = self.numel();
        record("sum", &[self], Tensor::scalar(s), move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        let s = (self.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
        record("mean", &[self], Tensor::scalar(s), move |g, _| {
            vec![Some(vec![g[0] / n as f32; n])]
        })
    }

    /// Mean squared difference as a `[1]` tensor.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        same_shape("mse", self, target)?;
        let n = self.numel();
        let diff: Vec<f32> = self.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let s = diff.iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>() / n as f64;
        record("mse", &[self, target], Tensor::scalar(s as f32), move |g, needs| {
            let c = 2.0 * g[0] / n as f32;
            vec![
                needs[0].then(|| diff.iter().map(|d| c * d).collect()),
                needs[1].then(|| diff.iter().map(|d| -c * d).collect()),
            ]
        })
    }

    /// Zero-padded "same" convolution along the leading (frame) axis,
    /// independently at every position of the trailing axes.
    ///
    /// `self` is `[F, C, ...]`. A `[C_out, C_in, k]` kernel mixes channels; a
    /// rank-1 `[k]` kernel is applied to each channel separately.
    pub fn conv_temporal(&self, kernel: &Tensor) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::shape("conv_temporal", "input must be [F, C, ...]"));
        }
        let (frames, c_in) = (self.shape[0], self.shape[1]);
        let loc = numel(&self.shape[2..]);
        let (c_out, width, shared) = match *kernel.shape() {
            [k] => (c_in, k, true),
            [co, ci, k] if ci == c_in => (co, k, false),
            _ => return Err(Error::mismatch("conv_temporal", &self.shape, kernel.shape())),
        };
        if width % 2 == 0 {
            return Err(Error::EvenKernel(width));
        }
        let r = width / 2;
        let taps: Arc<Vec<(usize, usize, usize, usize)>> = Arc::new(
            (0..c_out)
                .flat_map(|co| (0..c_in).map(move |ci| (co, ci)))
                .filter(|(co, ci)| shared && co == ci)
                .flat_map(|(co, ci)| {
                    (0..width).map(move |j| {
                        let ki = if shared { j } else { (co * c_in + ci) * width + j };
                        (co, ci, j, ki)
                    })
                })
                .collect(),
        );
        let x = self.data.clone();
        let w = kernel.data.clone();
        let mut y = vec![0.0f32; frames * c_out * loc];
        let source = move |f: usize, j: usize| (f + j).checked_sub(r).filter(|&s| s < frames);
        for f in 0..frames {
            if shared {
                for &(co, ci, j, ki) in taps.iter() {
                    let Some(src) = source(f, j) else { continue };
                    let wv = w[ki];
                    let dst = &mut y[(f * c_out + co) * loc..(f * c_out + co + 1) * loc];
                    let s = &x[(src * c_in + ci) * loc..(src * c_in + ci + 1) * loc];
                    dst.iter_mut().zip(s).for_each(|(d, v)| *d += wv * v);
                }
                continue;
            }
            // y_f += W_j · x_src, with W_j the [c_out, c_in] slice at tap j.
            for j in 0..width {
                let Some(src) = source(f, j) else { continue };
                gemm(
                    c_out,
                    c_in,
                    loc,
                    &w[j..],
                    (c_in * width, width),
                    &x[src * c_in * loc..],
                    (loc, 1),
                    1.0,
                    &mut y[f * c_out * loc..(f + 1) * c_out * loc],
                );
            }
        }
        let mut shape = self.shape.clone();
        shape[1] = c_out;
        let out = Tensor::raw(shape, y);
        let klen = kernel.numel();
        record("conv_temporal", &[self, kernel], out, move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0f32; x.len()]);
            let mut gw = needs[1].then(|| vec![0.0f32; klen]);
            if !shared {
                let mut tmp = vec![0.0f32; c_out * c_in];
                for f in 0..frames {
                    let go = &g[f * c_out * loc..(f + 1) * c_out * loc];
                    for j in 0..width {
                        let Some(src) = source(f, j) else { continue };
                        let xs = &x[src * c_in * loc..(src + 1) * c_in * loc];
                        if let Some(gx) = gx.as_mut() {
                            // gx_src += W_jᵀ · g_f
                            let dst = &mut gx[src * c_in * loc..(src + 1) * c_in * loc];
                            gemm(c_in, c_out, loc, &w[j..], (width, c_in * width), go, (loc, 1), 1.0, dst);
                        }
                        if let Some(gw) = gw.as_mut() {
                            // dW_j = g_f · x_srcᵀ
                            gemm(c_out, loc, c_in, go, (loc, 1), xs, (1, loc), 0.0, &mut tmp);
                            for (idx, v) in tmp.iter().enumerate() {
                                gw[idx * width + j] += v;
                            }
                        }
                    }
                }
                return vec![gx, gw];
            }
            for f in 0..frames {
                for &(co, ci, j, ki) in taps.iter() {
                    let Some(src) = source(f, j) else {
                        continue;
                    };
                    let go = &g[(f * c_out + co) * loc..(f * c_out + co + 1) * loc];
                    if let Some(gx) = gx.as_mut() {
                        let wv = w[ki];
                        gx[(src * c_in + ci) * loc..(src * c_in + ci + 1) * loc]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(d, v)| *d += wv * v);
                    }
                    if let Some(gw) = gw.as_mut() {
                        let s = &x[(src * c_in + ci) * loc..(src * c_in + ci + 1) * loc];
                        gw[ki] += go.iter().zip(s).map(|(a, b)| a * b).sum::<f32>();
                    }
                }
            }
            vec![gx, gw]
        })
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
