//! Plain-loop f64 evaluation of the conditioned forward pass (ControlNet,
//! adapters, U-Net), used as the numeric side of whole-network gradient
//! checks and as a forward oracle.

use std::collections::BTreeMap;

use super::{NetConfig, CONDITIONED, LN_EPS};
use crate::adapter::{reference::adapter_forward, PARAM_NAMES};
use crate::params::ParamStore;

type Mat = Vec<f64>;

/// f64 copy of a parameter store with optional per-call overrides.
pub struct Weights {
    base: BTreeMap<String, Mat>,
}

impl Weights {
    pub fn new(store: &ParamStore) -> Self {
        let base = store
            .iter()
            .map(|(n, t)| (n.clone(), t.data().iter().map(|&v| v as f64).collect()))
            .collect();
        Self { base }
    }
}

struct View<'a> {
    base: &'a Weights,
    overrides: &'a [(&'a str, &'a [f64])],
}

impl View<'_> {
    fn w(&self, name: &str) -> &[f64] {
        if let Some((_, v)) = self.overrides.iter().find(|(n, _)| *n == name) {
            return v;
        }
        self.base.base.get(name).unwrap_or_else(|| panic!("reference: missing {name}"))
    }

    fn has(&self, name: &str) -> bool {
        self.base.base.contains_key(name)
    }
}

/// Fixed inputs of one forward evaluation.
pub struct Inputs {
    /// `[F, C, H, W]`.
    pub z: Mat,
    pub t: usize,
    /// `[L, text_dim]`.
    pub text: Mat,
    /// Per-frame pose intensities in `[0, 1]`, image resolution, row-major.
    pub poses: Vec<Mat>,
}

fn matmul(a: &[f64], b: &[f64], rows: usize, k: usize, n: usize) -> Mat {
    let mut c = vec![0.0; rows * n];
    for i in 0..rows {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            for (o, bv) in c[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    c
}

fn add_row(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_mut(b.len()) {
        for (v, bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn add(a: &[f64], b: &[f64]) -> Mat {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn silu(x: &[f64]) -> Mat {
    x.iter().map(|v| v / (1.0 + (-v).exp())).collect()
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Mat {
    let d = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS as f64).sqrt();
        out.extend((0..d).map(|j| (row[j] - mean) * rs * gamma[j] + beta[j]));
    }
    out
}

/// `softmax(q·kᵀ/√dk)·v` for `q: [nq, dk]`, `k: [nk, dk]`, `v: [nk, dv]`.
fn attend(q: &[f64], k: &[f64], v: &[f64], dk: usize, dv: usize) -> Mat {
    let (nq, nk) = (q.len() / dk, k.len() / dk);
    let mut out = vec![0.0; nq * dv];
    let scale = 1.0 / (dk as f64).sqrt();
    for i in 0..nq {
        let qi = &q[i * dk..(i + 1) * dk];
        let logits: Mat = (0..nk)
            .map(|j| qi.iter().zip(&k[j * dk..(j + 1) * dk]).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Mat = logits.iter().map(|l| (l - mx).exp()).collect();
        let total: f64 = e.iter().sum();
        for j in 0..nk {
            let p = e[j] / total;
            for c in 0..dv {
                out[i * dv + c] += p * v[j * dv + c];
            }
        }
    }
    out
}

/// 3×3, padding 1, on `[F, h·w, cin]`; weights `[9·cin, cout]` indexed by
/// `(ky·3 + kx)·cin + ci`.
#[allow(clippy::too_many_arguments)]
fn conv(x: &[f64], f: usize, h: usize, w: usize, cin: usize, stride: usize, wt: &[f64], b: &[f64]) -> Mat {
    let cout = b.len();
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut patches = vec![0.0; f * ho * wo * 9 * cin];
    for fi in 0..f {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (fi * ho + oy) * wo + ox;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let y = (oy * stride + ky) as isize - 1;
                        let xx = (ox * stride + kx) as isize - 1;
                        if y < 0 || xx < 0 || y as usize >= h || xx as usize >= w {
                            continue;
                        }
                        let src = (fi * h + y as usize) * w + xx as usize;
                        let dst = row * 9 * cin + (ky * 3 + kx) * cin;
                        patches[dst..dst + cin].copy_from_slice(&x[src * cin..(src + 1) * cin]);
                    }
                }
            }
        }
    }
    let mut out = matmul(&patches, wt, f * ho * wo, 9 * cin, cout);
    add_row(&mut out, b);
    out
}

fn time_embedding(t: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let a = t as f64 * (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        v[i] = a.sin();
        v[half + i] = a.cos();
    }
    v
}

struct Net<'a> {
    cfg: &'a NetConfig,
    w: View<'a>,
    frames: usize,
    temb: Mat,
}

impl Net<'_> {
    fn conv(&self, x: &[f64], (h, w): (usize, usize), cin: usize, stride: usize, prefix: &str) -> Mat {
        let wt = self.w.w(&format!("{prefix}.w"));
        conv(x, self.frames, h, w, cin, stride, wt, self.w.w(&format!("{prefix}.b")))
    }

    fn norm(&self, x: &[f64], prefix: &str) -> Mat {
        layer_norm(x, self.w.w(&format!("{prefix}.gamma")), self.w.w(&format!("{prefix}.beta")))
    }

    fn res(&self, x: &[f64], hw: (usize, usize), cin: usize, prefix: &str) -> Mat {
        let tw = self.w.w(&format!("{prefix}.time.w"));
        let cout = tw.len() / self.temb.len();
        let mut h = self.conv(&silu(&self.norm(x, &format!("{prefix}.ln1"))), hw, cin, 1, &format!("{prefix}.conv1"));
        let mut tproj = matmul(&self.temb, tw, 1, self.temb.len(), cout);
        add_row(&mut tproj, self.w.w(&format!("{prefix}.time.b")));
        add_row(&mut h, &tproj);
        let h = self.conv(&silu(&self.norm(&h, &format!("{prefix}.ln2"))), hw, cout, 1, &format!("{prefix}.conv2"));
        let skip_name = format!("{prefix}.skip.w");
        let skip = if self.w.has(&skip_name) {
            matmul(x, self.w.w(&skip_name), x.len() / cin, cin, cout)
        } else {
            x.to_vec()
        };
        add(&skip, &h)
    }

    fn proj(&self, x: &[f64], prefix: &str, name: &str, din: usize, d: usize) -> Mat {
        matmul(x, self.w.w(&format!("{prefix}.{name}")), x.len() / din, din, d)
    }

    fn transformer(&self, h: &[f64], n: usize, d: usize, text: &[f64], id: &str) -> Mat {
        let f = self.frames;
        let pre = format!("unet.{id}");

        let x = self.norm(h, &format!("{pre}.ln_cs"));
        let cs = format!("{pre}.cs");
        let mut a = Vec::with_capacity(f * n * d);
        for i in 0..f {
            let prev = i.saturating_sub(1);
            let mut ctx = x[prev * n * d..(prev + 1) * n * d].to_vec();
            ctx.extend_from_slice(&x[i * n * d..(i + 1) * n * d]);
            let q = self.proj(&x[i * n * d..(i + 1) * n * d], &cs, "w_q", d, d);
            let k = self.proj(&ctx, &cs, "w_k", d, d);
            let v = self.proj(&ctx, &cs, "w_v", d, d);
            a.extend(self.proj(&attend(&q, &k, &v, d, d), &cs, "w_out", d, d));
        }
        let h = add(h, &a);

        let x = self.norm(&h, &format!("{pre}.ln_text"));
        let tx = format!("{pre}.text");
        let td = self.cfg.text_dim;
        let k = self.proj(text, &tx, "w_k", td, d);
        let v = self.proj(text, &tx, "w_v", td, d);
        let q = self.proj(&x, &tx, "w_q", d, d);
        let a = self.proj(&attend(&q, &k, &v, d, d), &tx, "w_out", d, d);
        let h = add(&h, &a);

        let x = self.norm(&h, &format!("{pre}.ln_temporal"));
        let tp = format!("{pre}.temporal");
        let mut a = vec![0.0; f * n * d];
        for t in 0..n {
            let stack: Mat = (0..f).flat_map(|fi| x[(fi * n + t) * d..(fi * n + t + 1) * d].to_vec()).collect();
            let q = self.proj(&stack, &tp, "w_q", d, d);
            let k = self.proj(&stack, &tp, "w_k", d, d);
            let v = self.proj(&stack, &tp, "w_v", d, d);
            let o = self.proj(&attend(&q, &k, &v, d, d), &tp, "w_out", d, d);
            for fi in 0..f {
                a[(fi * n + t) * d..(fi * n + t + 1) * d].copy_from_slice(&o[fi * d..(fi + 1) * d]);
            }
        }
        add(&h, &a)
    }

    fn condition(&self, h: &[f64], m: &[f64], n: usize, d: usize, id: &str) -> Mat {
        let p: Vec<Mat> = PARAM_NAMES.iter().map(|k| self.w.w(&format!("adapter.{id}.{k}")).to_vec()).collect();
        add(h, &adapter_forward(m, h, [self.frames, n, d], &p))
    }

    fn tokens(&self, z: &[f64]) -> Mat {
        let (c, n) = (self.cfg.latent_channels, self.cfg.latent_height * self.cfg.latent_width);
        let mut x = vec![0.0; z.len()];
        for fi in 0..self.frames {
            for ch in 0..c {
                for j in 0..n {
                    x[(fi * n + j) * c + ch] = z[(fi * c + ch) * n + j];
                }
            }
        }
        x
    }

    fn control(&self, inp: &Inputs) -> BTreeMap<&'static str, Mat> {
        let cfg = self.cfg;
        let [w0, w1] = cfg.widths;
        let [p0, p1] = cfg.pose_widths;
        let (ih, iw) = (cfg.image_height(), cfg.image_width());
        let hw0 = (cfg.latent_height, cfg.latent_width);
        let hw1 = (hw0.0 / 2, hw0.1 / 2);
        let x: Mat = inp.poses.concat();
        let a = silu(&self.conv(&x, (ih, iw), 1, 2, "control.pose.conv1"));
        let b = silu(&self.conv(&a, (ih / 2, iw / 2), p0, 2, "control.pose.conv2"));
        let pose1 = self.conv(&b, (ih / 4, iw / 4), p1, 2, "control.pose.conv3");
        let pose0 = matmul(&b, self.w.w("control.pose.level0.w"), b.len() / p1, p1, w0);

        let zero = |h: &[f64], id: &str, d: usize| {
            let mut r = matmul(h, self.w.w(&format!("control.{id}.zero.w")), h.len() / d, d, d);
            add_row(&mut r, self.w.w(&format!("control.{id}.zero.b")));
            r
        };
        let mut out = BTreeMap::new();
        let h = add(&self.conv(&self.tokens(&inp.z), hw0, cfg.latent_channels, 1, "control.conv_in"), &pose0);
        let h = self.res(&h, hw0, w0, "control.enc0.res");
        out.insert(CONDITIONED[0], zero(&h, "enc0", w0));
        let h = add(&self.conv(&h, hw0, w0, 2, "control.down"), &pose1);
        let h = self.res(&h, hw1, w1, "control.enc1.res");
        out.insert(CONDITIONED[1], zero(&h, "enc1", w1));
        let h = self.res(&h, hw1, w1, "control.mid.res");
        out.insert(CONDITIONED[2], zero(&h, "mid", w1));
        out
    }

    fn unet(&self, inp: &Inputs, control: &BTreeMap<&'static str, Mat>) -> Mat {
        let cfg = self.cfg;
        let [w0, w1] = cfg.widths;
        let hw0 = (cfg.latent_height, cfg.latent_width);
        let hw1 = (hw0.0 / 2, hw0.1 / 2);
        let (n0, n1) = (hw0.0 * hw0.1, hw1.0 * hw1.1);
        let text = &inp.text;

        let h = self.conv(&self.tokens(&inp.z), hw0, cfg.latent_channels, 1, "unet.conv_in");
        let h = self.res(&h, hw0, w0, "unet.enc0.res");
        let h = self.transformer(&h, n0, w0, text, "enc0");
        let skip0 = self.condition(&h, &control["enc0"], n0, w0, "enc0");
        let h = self.conv(&h, hw0, w0, 2, "unet.down");
        let h = self.res(&h, hw1, w1, "unet.enc1.res");
        let h = self.transformer(&h, n1, w1, text, "enc1");
        let skip1 = self.condition(&h, &control["enc1"], n1, w1, "enc1");
        let h = self.res(&h, hw1, w1, "unet.mid.res");
        let h = self.transformer(&h, n1, w1, text, "mid");
        let h = self.condition(&h, &control["mid"], n1, w1, "mid");
        let h = concat_channels(&h, &skip1, w1, w1);
        let h = self.res(&h, hw1, 2 * w1, "unet.dec1.res");
        let h = self.transformer(&h, n1, w1, text, "dec1");
        let h = self.conv(&upsample2(&h, self.frames, hw1, w1), hw0, w1, 1, "unet.up");
        let h = concat_channels(&h, &skip0, w0, w0);
        let h = self.res(&h, hw0, 2 * w0, "unet.dec0.res");
        let h = self.transformer(&h, n0, w0, text, "dec0");
        let h = silu(&self.norm(&h, "unet.out.ln"));
        self.conv(&h, hw0, w0, 1, "unet.out.conv")
    }
}

fn concat_channels(a: &[f64], b: &[f64], da: usize, db: usize) -> Mat {
    a.chunks(da).zip(b.chunks(db)).flat_map(|(x, y)| x.iter().chain(y).copied()).collect()
}

fn upsample2(x: &[f64], f: usize, (h, w): (usize, usize), d: usize) -> Mat {
    let mut out = Vec::with_capacity(x.len() * 4);
    for fi in 0..f {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = (fi * h + y / 2) * w + xx / 2;
                out.extend_from_slice(&x[src * d..(src + 1) * d]);
            }
        }
    }
    out
}

/// ControlNet residuals per conditioned layer. Depend only on `control.*`
/// weights.
pub struct Control(BTreeMap<&'static str, Mat>);

fn net<'a>(cfg: &'a NetConfig, weights: &'a Weights, overrides: &'a [(&'a str, &'a [f64])], inp: &Inputs) -> Net<'a> {
    Net {
        cfg,
        w: View { base: weights, overrides },
        frames: inp.poses.len(),
        temb: time_embedding(inp.t, cfg.time_dim),
    }
}

pub fn control_residuals(cfg: &NetConfig, weights: &Weights, overrides: &[(&str, &[f64])], inp: &Inputs) -> Control {
    Control(net(cfg, weights, overrides, inp).control(inp))
}

/// U-Net ε-prediction `[F, H·W, C]` given precomputed ControlNet residuals.
pub fn eps_given_control(cfg: &NetConfig, weights: &Weights, overrides: &[(&str, &[f64])], inp: &Inputs, control: &Control) -> Vec<f64> {
    net(cfg, weights, overrides, inp).unet(inp, &control.0)
}

/// ε-prediction as channels-last tokens `[F, H·W, C]` under ControlNet
/// conditioning, with `overrides` replacing named weights.
pub fn conditioned_eps(cfg: &NetConfig, weights: &Weights, overrides: &[(&str, &[f64])], inp: &Inputs) -> Vec<f64> {
    let control = control_residuals(cfg, weights, overrides, inp);
    eps_given_control(cfg, weights, overrides, inp, &control)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean of [`conditioned_eps`].
pub fn conditioned_eps_mean(cfg: &NetConfig, weights: &Weights, overrides: &[(&str, &[f64])], inp: &Inputs) -> f64 {
    mean(&conditioned_eps(cfg, weights, overrides, inp))
}

/// [`conditioned_eps_mean`] that reuses `control` unless an override
/// replaces a ControlNet weight.
pub fn conditioned_eps_mean_reusing(
    cfg: &NetConfig,
    weights: &Weights,
    overrides: &[(&str, &[f64])],
    inp: &Inputs,
    control: &Control,
) -> f64 {
    if overrides.iter().any(|(n, _)| n.starts_with("control.")) {
        conditioned_eps_mean(cfg, weights, overrides, inp)
    } else {
        mean(&eps_given_control(cfg, weights, overrides, inp, control))
    }
}
