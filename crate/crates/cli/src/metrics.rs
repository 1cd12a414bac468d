use motionedit_core::raster::Raster;
use motionedit_core::{Error, Tensor};
use serde::{Serialize, Serializer};

/// Peak-to-peak range of latents encoded from `[0, 1]` images.
pub const LATENT_PEAK: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub rmse: f64,
    /// `+∞` for identical frames; serialized as the string `"inf"`.
    #[serde(serialize_with = "finite_or_inf")]
    pub psnr: f64,
}

fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// RMSE and PSNR (peak [`LATENT_PEAK`]) of each frame of two `[F, ...]`
/// tensors.
pub fn frame_metrics(a: &Tensor, b: &Tensor) -> motionedit_core::Result<Vec<FrameMetrics>> {
    if a.shape() != b.shape() || a.rank() == 0 {
        return Err(Error::ShapeMismatch {
            op: "frame_metrics",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let frames = a.shape()[0];
    let per = a.numel() / frames.max(1);
    if per == 0 {
        return Err(Error::Empty("frame_metrics"));
    }
    Ok(a.data()
        .chunks(per)
        .zip(b.data().chunks(per))
        .map(|(x, y)| {
            let mse = x.iter().zip(y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / per as f64;
            let psnr = if mse == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (LATENT_PEAK * LATENT_PEAK / mse).log10()
            };
            FrameMetrics { rmse: mse.sqrt(), psnr }
        })
        .collect())
}

/// One grayscale image per frame of a `[F, C, H, W]` tensor, channels side
/// by side, each channel min-max normalized on its own.
pub fn preview_frames(t: &Tensor) -> motionedit_core::Result<Vec<Raster>> {
    if t.rank() != 4 {
        return Err(Error::Shape {
            op: "preview",
            msg: format!("expected [F, C, H, W], got {:?}", t.shape()),
        });
    }
    let [f, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let data = t.data();
    let mut out = Vec::with_capacity(f);
    for i in 0..f {
        let mut r = Raster::new(c * w, h);
        for ch in 0..c {
            let plane = &data[(i * c + ch) * h * w..][..h * w];
            let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = hi - lo;
            for y in 0..h {
                for x in 0..w {
                    let v = if span > 0.0 { (plane[y * w + x] - lo) / span } else { 0.0 };
                    r.set(ch * w + x, y, (v * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use motionedit_core::rng::seeded;

    #[test]
    fn identical_and_unit_offset() {
        let mut rng = seeded(3);
        let a = Tensor::randn(&[3, 4, 8, 8], 1.0, &mut rng);
        let m = frame_metrics(&a, &a).unwrap();
        assert!(m.iter().all(|f| f.rmse == 0.0 && f.psnr == f64::INFINITY));
        assert_eq!(serde_json::to_string(&m[0]).unwrap(), r#"{"rmse":0.0,"psnr":"inf"}"#);

        let b = a.add_scalar(1.0).unwrap();
        for f in frame_metrics(&a, &b).unwrap() {
            assert!((f.rmse - 1.0).abs() < 1e-6);
            assert!((f.psnr - 20.0 * 2f64.log10()).abs() < 1e-5);
        }
    }

    #[test]
    fn random_pair_matches_brute_force() {
        let mut rng = seeded(4);
        let a = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let got = frame_metrics(&a, &b).unwrap();
        for (i, m) in got.iter().enumerate() {
            let mut acc = 0.0f64;
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..5 {
                        let k = ((i * 3 + c) * 4 + y) * 5 + x;
                        acc += (a.data()[k] as f64 - b.data()[k] as f64).powi(2);
                    }
                }
            }
            let rmse = (acc / 60.0).sqrt();
            assert!((m.rmse - rmse).abs() < 1e-12);
            assert!((m.psnr - 20.0 * (2.0 / rmse).log10()).abs() < 1e-9);
        }
        assert!(frame_metrics(&a, &b.reshape(&[2, 60]).unwrap()).is_err());
    }

    #[test]
    fn preview_normalizes_each_channel() {
        let t = Tensor::from_vec(&[1, 2, 1, 2], vec![-3.0, 1.0, 5.0, 5.0]).unwrap();
        let p = preview_frames(&t).unwrap();
        assert_eq!((p[0].width, p[0].height), (4, 1));
        assert_eq!(p[0].data, vec![0, 255, 0, 0]);
    }
}
