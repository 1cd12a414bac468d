//! Content-aware motion adapter.
//!
//! Takes control features `m` and U-Net latents `z` (both `[F, N, d]`) and
//! returns an adapted control residual. A global path cross-attends from the
//! control features to the latents and then attends across frames. A local
//! path applies two temporal convolutions to `m`. Their sum goes through a
//! zero-initialized output projection added back onto `m`.

use crate::attention::{content_cross_attention_video, temporal_attention_video, ProjectionSet};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckOptions, GradReport};
use crate::params::ParamStore;
use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;
pub const KERNEL_WIDTH: usize = 3;

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct AdapterWeights {
    pub ln_m: LayerNormParams,
    pub ln_z: LayerNormParams,
    pub ln_t: LayerNormParams,
    pub cross: ProjectionSet,
    pub temporal: ProjectionSet,
    /// `[d, d, 3]` channel-mixing temporal kernels.
    pub conv1: Tensor,
    pub conv2: Tensor,
    /// `[d, d]`, zero at initialization.
    pub out_proj: Tensor,
}

/// Parameter names in the order used by [`AdapterWeights::tensors`].
pub const PARAM_NAMES: [&str; 17] = [
    "ln_m.gamma",
    "ln_m.beta",
    "ln_z.gamma",
    "ln_z.beta",
    "ln_t.gamma",
    "ln_t.beta",
    "cross.w_q",
    "cross.w_k",
    "cross.w_v",
    "cross.w_out",
    "temporal.w_q",
    "temporal.w_k",
    "temporal.w_v",
    "temporal.w_out",
    "conv1",
    "conv2",
    "out_proj",
];

impl AdapterWeights {
    /// Fresh adapter: random attention and convolution weights, zero output
    /// projection.
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        let mut w = Self::random(d, rng);
        w.out_proj = Tensor::zeros(&[d, d]);
        w
    }

    /// Every weight random, including the output projection.
    pub fn random(d: usize, rng: &mut Rng) -> Self {
        let conv_std = 1.0 / ((KERNEL_WIDTH * d) as f32).sqrt();
        Self {
            ln_m: LayerNormParams::new(d),
            ln_z: LayerNormParams::new(d),
            ln_t: LayerNormParams::new(d),
            cross: ProjectionSet::random(d, rng),
            temporal: ProjectionSet::random(d, rng),
            conv1: Tensor::randn(&[d, d, KERNEL_WIDTH], conv_std, rng),
            conv2: Tensor::randn(&[d, d, KERNEL_WIDTH], conv_std, rng),
            out_proj: Tensor::randn(&[d, d], 1.0 / (d as f32).sqrt(), rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        let z = |s: &[usize]| Tensor::zeros(s);
        let zp = || ProjectionSet {
            w_q: z(&[d, d]),
            w_k: z(&[d, d]),
            w_v: z(&[d, d]),
            w_out: z(&[d, d]),
        };
        let zl = || LayerNormParams {
            gamma: z(&[d]),
            beta: z(&[d]),
        };
        Self {
            ln_m: zl(),
            ln_z: zl(),
            ln_t: zl(),
            cross: zp(),
            temporal: zp(),
            conv1: z(&[d, d, KERNEL_WIDTH]),
            conv2: z(&[d, d, KERNEL_WIDTH]),
            out_proj: z(&[d, d]),
        }
    }

    pub fn width(&self) -> usize {
        self.out_proj.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor; 17] {
        [
            &self.ln_m.gamma,
            &self.ln_m.beta,
            &self.ln_z.gamma,
            &self.ln_z.beta,
            &self.ln_t.gamma,
            &self.ln_t.beta,
            &self.cross.w_q,
            &self.cross.w_k,
            &self.cross.w_v,
            &self.cross.w_out,
            &self.temporal.w_q,
            &self.temporal.w_k,
            &self.temporal.w_v,
            &self.temporal.w_out,
            &self.conv1,
            &self.conv2,
            &self.out_proj,
        ]
    }

    /// Rebuilds weights from tensors in [`PARAM_NAMES`] order.
    pub fn from_tensors(t: &[Tensor]) -> Result<Self> {
        if t.len() != PARAM_NAMES.len() {
            return Err(Error::shape("adapter", format!("expected 17 tensors, got {}", t.len())));
        }
        let d = t[16].shape()[0];
        let w = Self {
            ln_m: LayerNormParams {
                gamma: t[0].clone(),
                beta: t[1].clone(),
            },
            ln_z: LayerNormParams {
                gamma: t[2].clone(),
                beta: t[3].clone(),
            },
            ln_t: LayerNormParams {
                gamma: t[4].clone(),
                beta: t[5].clone(),
            },
            cross: ProjectionSet::new(t[6].clone(), t[7].clone(), t[8].clone(), t[9].clone())?,
            temporal: ProjectionSet::new(t[10].clone(), t[11].clone(), t[12].clone(), t[13].clone())?,
            conv1: t[14].clone(),
            conv2: t[15].clone(),
            out_proj: t[16].clone(),
        };
        for (name, x) in PARAM_NAMES.iter().zip(w.tensors()) {
            let expect: Vec<usize> = match *name {
                n if n.starts_with("ln_") => vec![d],
                "conv1" | "conv2" => vec![d, d, KERNEL_WIDTH],
                _ => vec![d, d],
            };
            if x.shape() != expect.as_slice() {
                return Err(Error::mismatch("adapter", x.shape(), &expect));
            }
        }
        Ok(w)
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let t = PARAM_NAMES
            .iter()
            .map(|n| store.get(&format!("{prefix}.{n}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(&t)
    }

    pub fn insert_into(&self, store: &mut ParamStore, prefix: &str) {
        for (n, t) in PARAM_NAMES.iter().zip(self.tensors()) {
            store.insert(format!("{prefix}.{n}"), t.clone());
        }
    }
}

fn check_inputs(m: &Tensor, z: &Tensor, w: &AdapterWeights) -> Result<()> {
    if m.shape() != z.shape() {
        return Err(Error::mismatch("adapter_forward", m.shape(), z.shape()));
    }
    if m.rank() != 3 || m.shape()[2] != w.width() {
        return Err(Error::mismatch("adapter_forward", m.shape(), w.out_proj.shape()));
    }
    Ok(())
}

/// Channel-mixing temporal convolution of channels-last `[F, N, d]` tokens.
pub fn conv_frames(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    x.permute(&[0, 2, 1])?.conv_temporal(kernel)?.permute(&[0, 2, 1])
}

/// `temporal_attention(content_cross_attention(LN(m), LN(z)))`.
pub fn global_path(m: &Tensor, z: &Tensor, w: &AdapterWeights) -> Result<Tensor> {
    check_inputs(m, z, w)?;
    let cross = content_cross_attention_video(&w.ln_m.apply(m)?, &w.ln_z.apply(z)?, &w.cross)?;
    temporal_attention_video(&w.ln_t.apply(&cross)?, &w.temporal)
}

/// Two stacked temporal convolutions of `m`.
pub fn local_path(m: &Tensor, w: &AdapterWeights) -> Result<Tensor> {
    conv_frames(&conv_frames(m, &w.conv1)?, &w.conv2)
}

/// `m + (global_path(m, z) + local_path(m)) · out_proj`.
pub fn adapter_forward(m: &Tensor, z: &Tensor, w: &AdapterWeights) -> Result<Tensor> {
    let paths = global_path(m, z, w)?.add(&local_path(m, w)?)?;
    m.add(&paths.linear(&w.out_proj)?)
}

/// Finite-difference check of every adapter parameter on a seeded
/// `[3, 4, d]` fixture. The scalar probed is `Σ out ⊙ R` for a fixed random
/// `R`, so every output element contributes with a distinct weight. Central
/// differences are taken on the f64 twin in [`reference`].
pub fn adapter_grad_check(w: &AdapterWeights, seed: u64) -> Result<GradReport> {
    let d = w.width();
    let mut rng = seeded(seed);
    let m = Tensor::randn(&[3, 4, d], 1.0, &mut rng);
    let z = Tensor::randn(&[3, 4, d], 1.0, &mut rng);
    let r = Tensor::randn(&[3, 4, d], 1.0, &mut rng);
    let inputs: Vec<(&str, Tensor)> = PARAM_NAMES.iter().copied().zip(w.tensors().into_iter().cloned()).collect();
    let fixture = reference::Fixture::new(&m, &z, &r);
    gradcheck::check_against_reference(
        &inputs,
        |args| {
            let w = AdapterWeights::from_tensors(args)?;
            adapter_forward(&m, &z, &w)?.mul(&r)?.sum()
        },
        |params| fixture.weighted_output(params),
        GradCheckOptions::default(),
    )
}

/// Plain-loop f64 evaluation of the adapter, used as the numeric side of
/// gradient checks.
pub mod reference {
    use crate::tensor::Tensor;

    type Mat = Vec<f64>;

    fn to64(t: &Tensor) -> Mat {
        t.data().iter().map(|&v| v as f64).collect()
    }

    fn matmul(a: &[f64], b: &[f64], rows: usize, k: usize, n: usize) -> Mat {
        let mut c = vec![0.0; rows * n];
        for i in 0..rows {
            for p in 0..k {
                let av = a[i * k + p];
                for j in 0..n {
                    c[i * n + j] += av * b[p * n + j];
                }
            }
        }
        c
    }

    fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Mat {
        let d = gamma.len();
        x.chunks(d)
            .flat_map(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + super::LN_EPS as f64).sqrt();
                (0..d).map(move |j| (row[j] - mean) * rs * gamma[j] + beta[j])
            })
            .collect()
    }

    /// `softmax(Q·Kᵀ/√d)·V` followed by the output projection.
    fn attention(q_in: &[f64], kv_in: &[f64], d: usize, w: &[&[f64]; 4]) -> Mat {
        let (nq, nk) = (q_in.len() / d, kv_in.len() / d);
        let q = matmul(q_in, w[0], nq, d, d);
        let k = matmul(kv_in, w[1], nk, d, d);
        let v = matmul(kv_in, w[2], nk, d, d);
        let mut out = vec![0.0; nq * d];
        for i in 0..nq {
            let logits: Vec<f64> = (0..nk)
                .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..nk {
                for c in 0..d {
                    out[i * d + c] += e[j] / z * v[j * d + c];
                }
            }
        }
        matmul(&out, w[3], nq, d, d)
    }

    fn conv(x: &[f64], kernel: &[f64], f: usize, n: usize, d: usize) -> Mat {
        let kw = super::KERNEL_WIDTH;
        let r = kw / 2;
        let mut y = vec![0.0; f * n * d];
        for fi in 0..f {
            for j in 0..kw {
                let Some(src) = (fi + j).checked_sub(r).filter(|&s| s < f) else {
                    continue;
                };
                for t in 0..n {
                    for co in 0..d {
                        for ci in 0..d {
                            y[(fi * n + t) * d + co] += kernel[(co * d + ci) * kw + j] * x[(src * n + t) * d + ci];
                        }
                    }
                }
            }
        }
        y
    }

    /// Adapter output for `[F, N, d]` inputs, parameters in
    /// [`PARAM_NAMES`](super::PARAM_NAMES) order.
    pub fn adapter_forward(m: &[f64], z: &[f64], shape: [usize; 3], p: &[Vec<f64>]) -> Mat {
        let [f, n, d] = shape;
        let cross_w = [&p[6][..], &p[7][..], &p[8][..], &p[9][..]];
        let temp_w = [&p[10][..], &p[11][..], &p[12][..], &p[13][..]];
        let mut cross = Vec::with_capacity(f * n * d);
        for fi in 0..f {
            let fr = fi * n * d..(fi + 1) * n * d;
            let lm = layer_norm(&m[fr.clone()], &p[0], &p[1]);
            let lz = layer_norm(&z[fr], &p[2], &p[3]);
            cross.extend(attention(&lm, &lz, d, &cross_w));
        }
        let lt = layer_norm(&cross, &p[4], &p[5]);
        let mut global = vec![0.0; f * n * d];
        for t in 0..n {
            let stack: Mat = (0..f).flat_map(|fi| lt[(fi * n + t) * d..(fi * n + t + 1) * d].to_vec()).collect();
            let out = attention(&stack, &stack, d, &temp_w);
            for fi in 0..f {
                global[(fi * n + t) * d..(fi * n + t + 1) * d].copy_from_slice(&out[fi * d..(fi + 1) * d]);
            }
        }
        let local = conv(&conv(m, &p[14], f, n, d), &p[15], f, n, d);
        let paths: Mat = global.iter().zip(&local).map(|(a, b)| a + b).collect();
        let proj = matmul(&paths, &p[16], f * n, d, d);
        m.iter().zip(&proj).map(|(a, b)| a + b).collect()
    }

    /// Fixed inputs and output weights for `Σ adapter(m, z) ⊙ R`.
    pub struct Fixture {
        m: Mat,
        z: Mat,
        r: Mat,
        shape: [usize; 3],
    }

    impl Fixture {
        pub fn new(m: &Tensor, z: &Tensor, r: &Tensor) -> Self {
            let s = m.shape();
            Self {
                m: to64(m),
                z: to64(z),
                r: to64(r),
                shape: [s[0], s[1], s[2]],
            }
        }

        pub fn weighted_output(&self, params: &[Vec<f64>]) -> f64 {
            adapter_forward(&self.m, &self.z, self.shape, params)
                .iter()
                .zip(&self.r)
                .map(|(a, b)| a * b)
                .sum()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::with_corrupted_backward;

    #[test]
    fn identity_at_init() {
        let mut rng = seeded(3);
        let w = AdapterWeights::init(8, &mut rng);
        let m = Tensor::randn(&[3, 4, 8], 1.0, &mut rng);
        let z = Tensor::randn(&[3, 4, 8], 1.0, &mut rng);
        assert_eq!(adapter_forward(&m, &z, &w).unwrap(), m);
    }

    #[test]
    fn single_frame_delta_kernels_identity_attention() {
        let d = 4;
        let mut w = AdapterWeights::zeros(d);
        let mut delta = vec![0.0; d * d * 3];
        for c in 0..d {
            delta[(c * d + c) * 3 + 1] = 1.0;
        }
        w.conv1 = Tensor::from_vec(&[d, d, 3], delta.clone()).unwrap();
        w.conv2 = Tensor::from_vec(&[d, d, 3], delta).unwrap();
        w.cross = ProjectionSet::identity(d);
        w.temporal = ProjectionSet::identity(d);
        w.out_proj = Tensor::eye(d);
        let mut rng = seeded(4);
        let m = Tensor::randn(&[1, 5, d], 1.0, &mut rng);
        let z = Tensor::randn(&[1, 5, d], 1.0, &mut rng);
        let out = adapter_forward(&m, &z, &w).unwrap();
        assert_eq!(out.shape(), m.shape());
        assert!(out.all_finite());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let mut rng = seeded(5);
        let w = AdapterWeights::init(4, &mut rng);
        assert!(adapter_forward(&Tensor::ones(&[2, 3, 4]), &Tensor::ones(&[2, 2, 4]), &w).is_err());
        assert!(adapter_forward(&Tensor::ones(&[2, 3, 5]), &Tensor::ones(&[2, 3, 5]), &w).is_err());
    }

    #[test]
    fn grad_check_passes_and_flags_corruption() {
        let report = adapter_grad_check(&AdapterWeights::zeros(4), 6).unwrap();
        assert!(report.passed(), "{report:?}");
        let mut rng = seeded(7);
        let w = AdapterWeights::random(4, &mut rng);
        let report = adapter_grad_check(&w, 8).unwrap();
        assert!(report.passed(), "{:?}", report.failures());
        let bad = with_corrupted_backward("conv_temporal", || adapter_grad_check(&w, 8)).unwrap();
        let failed: Vec<_> = bad.failures().iter().map(|e| e.name.clone()).collect();
        assert!(failed.contains(&"conv1".to_string()), "{failed:?}");
    }

    #[test]
    fn store_round_trip() {
        let mut rng = seeded(9);
        let w = AdapterWeights::random(4, &mut rng);
        let mut s = ParamStore::new();
        w.insert_into(&mut s, "adapter.enc0");
        assert_eq!(s.len(), 17);
        let back = AdapterWeights::from_store(&s, "adapter.enc0").unwrap();
        assert_eq!(back.tensors(), w.tensors());
    }
}
