//! Noise schedules, the forward marginal, the ε-prediction loss, and
//! deterministic DDIM sampling and inversion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A diffusion noise level: a schedule index, or the clean endpoint where
/// ᾱ = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Timestep {
    Clean,
    Step(usize),
}

impl Timestep {
    pub fn index(self) -> Option<usize> {
        match self {
            Timestep::Clean => None,
            Timestep::Step(t) => Some(t),
        }
    }
}

impl std::fmt::Display for Timestep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Timestep::Clean => write!(f, "clean"),
            Timestep::Step(t) => write!(f, "{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub alpha_bar: Vec<f64>,
    /// Per-step noise scale of the reverse process; zero for deterministic DDIM.
    pub eta: f64,
}

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 2e-2;

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).unwrap()
    }
}

/// Linear β from `beta_min` to `beta_max`; ᾱ_t = ∏_{s≤t} (1 − β_s).
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Schedule(format!(
            "require 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0f64;
    for t in 0..steps {
        let beta = beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64;
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        steps,
        beta_min,
        beta_max,
        alpha_bar,
        eta: 0.0,
    })
}

impl NoiseSchedule {
    pub fn alpha_bar_at(&self, t: Timestep) -> Result<f64> {
        match t {
            Timestep::Clean => Ok(1.0),
            Timestep::Step(i) => self.alpha_bar.get(i).copied().ok_or_else(|| {
                Error::Timestep(format!("timestep {i} out of range 0..{}", self.steps))
            }),
        }
    }

    /// Uniformly strided sub-sequence of `k` timesteps, ascending:
    /// `0, s, 2s, ..., (k-1)s` with `s = T / k`.
    pub fn strided(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.steps {
            return Err(Error::Schedule(format!(
                "cannot take {k} sampling steps from a {}-step schedule",
                self.steps
            )));
        }
        let stride = self.steps / k;
        Ok((0..k).map(|i| i * stride).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }
}

/// Closed-form forward marginal `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`. Differentiable
/// in both `x0` and `eps`.
pub fn q_sample(x0: &Tensor, t: Timestep, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::mismatch("q_sample", x0.shape(), eps.shape()));
    }
    let ab = s.alpha_bar_at(t)?;
    if ab == 1.0 {
        return Ok(x0.clone());
    }
    if ab == 0.0 {
        return Ok(eps.clone());
    }
    x0.scale(ab.sqrt() as f32)?.add(&eps.scale((1.0 - ab).sqrt() as f32)?)
}

/// Mean squared error between predicted and true noise.
pub fn training_loss(eps_pred: &Tensor, eps_true: &Tensor) -> Result<Tensor> {
    eps_pred.mse(eps_true)
}

/// Moves `x` from noise level `ab_from` to `ab_to` along the deterministic
/// DDIM path defined by `eps`. Arithmetic is carried out in f64 per element.
pub fn ddim_move(x: &Tensor, eps: &Tensor, ab_from: f64, ab_to: f64) -> Result<Tensor> {
    if x.shape() != eps.shape() {
        return Err(Error::mismatch("ddim", x.shape(), eps.shape()));
    }
    let (sa, sb) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (ta, tb) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| {
            let (x, e) = (x as f64, e as f64);
            let x0 = (x - sb * e) / sa;
            (ta * x0 + tb * e) as f32
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// One deterministic DDIM denoising step from `t` to the less noisy `t_prev`.
pub fn ddim_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: Timestep,
    t_prev: Timestep,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::Timestep(format!("ddim_step requires t > t_prev, got {t} -> {t_prev}")));
    }
    ddim_move(x_t, eps_pred, s.alpha_bar_at(t)?, s.alpha_bar_at(t_prev)?)
}

/// One DDIM inversion step from `t` to the noisier `t_next`.
pub fn ddim_invert_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: Timestep,
    t_next: Timestep,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if t_next <= t {
        return Err(Error::Timestep(format!(
            "ddim_invert_step requires t_next > t, got {t} -> {t_next}"
        )));
    }
    ddim_move(x_t, eps_pred, s.alpha_bar_at(t)?, s.alpha_bar_at(t_next)?)
}

/// Classifier-free guidance `ε_u + scale·(ε_c − ε_u)`. Scales 0 and 1 return
/// the unconditional and conditional predictions unchanged.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f32) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::mismatch("cfg_combine", eps_uncond.shape(), eps_cond.shape()));
    }
    if !(scale >= 0.0) {
        return Err(Error::Config(format!("guidance scale must be >= 0, got {scale}")));
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_uncond.add(&eps_cond.sub(eps_uncond)?.scale(scale)?)
}

/// Ordered `(timestep, latent)` pairs produced by inversion or sampling.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub points: Vec<(Timestep, Tensor)>,
}

impl Trajectory {
    pub fn last(&self) -> Option<&(Timestep, Tensor)> {
        self.points.last()
    }

    pub fn timesteps(&self) -> Vec<Timestep> {
        self.points.iter().map(|(t, _)| *t).collect()
    }

    fn push(&mut self, t: Timestep, x: Tensor) -> Result<()> {
        if let Some((prev_t, prev_x)) = self.points.last() {
            let rising = *prev_t < t;
            let n = self.points.len();
            let reversed = n >= 2 && (self.points[n - 2].0 < *prev_t) != rising;
            if *prev_t == t || reversed {
                return Err(Error::Timestep(format!("trajectory not monotone at {t}")));
            }
            if prev_x.shape() != x.shape() {
                return Err(Error::mismatch("trajectory", prev_x.shape(), x.shape()));
            }
        }
        self.points.push((t, x));
        Ok(())
    }
}

/// DDIM inversion from the clean latent up through `timesteps` (ascending).
/// `eps_fn(x, t)` is evaluated at the current latent and the destination
/// timestep of each step.
pub fn invert_loop<F>(x0: &Tensor, timesteps: &[usize], s: &NoiseSchedule, mut eps_fn: F) -> Result<Trajectory>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut traj = Trajectory::default();
    traj.push(Timestep::Clean, x0.clone())?;
    let mut x = x0.clone();
    let mut from = Timestep::Clean;
    for &t in timesteps {
        let to = Timestep::Step(t);
        let eps = eps_fn(&x, t)?;
        x = ddim_invert_step(&x, &eps, from, to, s)?;
        traj.push(to, x.clone())?;
        from = to;
    }
    Ok(traj)
}

/// DDIM sampling from `x_t` at the last of `timesteps` (ascending) down to the
/// clean endpoint. `eps_fn(x, t)` receives the current noise level.
pub fn sample_loop<F>(x_t: &Tensor, timesteps: &[usize], s: &NoiseSchedule, mut eps_fn: F) -> Result<Trajectory>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut traj = Trajectory::default();
    let mut x = x_t.clone();
    for (k, &t) in timesteps.iter().enumerate().rev() {
        let from = Timestep::Step(t);
        traj.push(from, x.clone())?;
        let to = if k == 0 { Timestep::Clean } else { Timestep::Step(timesteps[k - 1]) };
        let eps = eps_fn(&x, t)?;
        x = ddim_step(&x, &eps, from, to, s)?;
    }
    traj.push(Timestep::Clean, x)?;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(data: &[f32]) -> Tensor {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar[1] - 0.81).abs() < 1e-12);
        assert!(make_schedule(10, 0.0, 0.0).is_err());
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());

        let s = NoiseSchedule::default();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar[0] > 0.999);
        assert!(s.alpha_bar[999] < 1e-4);
    }

    #[test]
    fn strided_timesteps() {
        let s = NoiseSchedule::default();
        let ts = s.strided(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[1], 20);
        assert_eq!(*ts.last().unwrap(), 980);
        assert!(s.strided(0).is_err());
        assert!(s.strided(1001).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = make_schedule(4, 0.1, 0.5).unwrap();
        let x0 = t(&[1.0, -2.0]);
        let eps = t(&[0.3, 0.7]);
        assert_eq!(q_sample(&x0, Timestep::Clean, &eps, &s).unwrap(), x0);

        let pure = NoiseSchedule {
            alpha_bar: vec![0.25, 0.0],
            ..make_schedule(2, 0.1, 0.1).unwrap()
        };
        assert_eq!(q_sample(&x0, Timestep::Step(1), &eps, &pure).unwrap(), eps);
        let x = q_sample(&t(&[1.0]), Timestep::Step(0), &t(&[1.0]), &pure).unwrap();
        assert!((x.data()[0] - (0.5 + 0.75f32.sqrt())).abs() < 1e-6);

        assert!(q_sample(&x0, Timestep::Step(4), &eps, &s).is_err());
        assert!(q_sample(&x0, Timestep::Step(0), &t(&[1.0]), &s).is_err());
    }

    #[test]
    fn training_loss_examples() {
        let a = t(&[0.5, -1.0, 2.0]);
        assert_eq!(training_loss(&a, &a).unwrap().item().unwrap(), 0.0);
        let b = a.add_scalar(1.0).unwrap();
        assert!((training_loss(&b, &a).unwrap().item().unwrap() - 1.0).abs() < 1e-6);
        let l = training_loss(&t(&[0.0, 2.0]), &t(&[0.0, 0.0])).unwrap();
        assert_eq!(l.item().unwrap(), 2.0);
        assert!(training_loss(&a, &t(&[1.0])).is_err());
    }

    #[test]
    fn ddim_step_reproduces_marginal_with_exact_noise() {
        let s = NoiseSchedule::default();
        let mut rng = seeded(3);
        let x0 = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let eps = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        for (hi, lo) in [(999, 500), (500, 499), (20, 0), (980, 960)] {
            let xt = q_sample(&x0, Timestep::Step(hi), &eps, &s).unwrap();
            let stepped = ddim_step(&xt, &eps, Timestep::Step(hi), Timestep::Step(lo), &s).unwrap();
            let expect = q_sample(&x0, Timestep::Step(lo), &eps, &s).unwrap();
            // rounding in the stored x_t is amplified by sqrt(ab_lo / ab_hi)
            let amp = (s.alpha_bar[lo] / s.alpha_bar[hi]).sqrt().max(1.0) as f32;
            assert!(stepped.max_abs_diff(&expect).unwrap() <= 1e-6 * amp, "{hi}->{lo}");
        }
    }

    #[test]
    fn ddim_step_to_clean_returns_predicted_x0() {
        let s = NoiseSchedule::default();
        let mut rng = seeded(4);
        let x = Tensor::randn(&[8], 1.0, &mut rng);
        let eps = Tensor::randn(&[8], 1.0, &mut rng);
        let ab = s.alpha_bar[300];
        let out = ddim_step(&x, &eps, Timestep::Step(300), Timestep::Clean, &s).unwrap();
        for i in 0..8 {
            let (xi, ei) = (x.data()[i] as f64, eps.data()[i] as f64);
            let pred = (xi - (1.0 - ab).sqrt() * ei) / ab.sqrt();
            assert!((out.data()[i] as f64 - pred).abs() < 1e-5);
        }
    }

    #[test]
    fn ordering_violations() {
        let s = NoiseSchedule::default();
        let x = Tensor::zeros(&[2]);
        assert!(ddim_step(&x, &x, Timestep::Step(3), Timestep::Step(3), &s).is_err());
        assert!(ddim_step(&x, &x, Timestep::Clean, Timestep::Step(3), &s).is_err());
        assert!(ddim_invert_step(&x, &x, Timestep::Step(5), Timestep::Step(2), &s).is_err());
    }

    #[test]
    fn invert_and_step_are_mutual_inverses() {
        let s = NoiseSchedule::default();
        let mut rng = seeded(9);
        let x = Tensor::randn(&[64], 1.0, &mut rng);
        let eps = Tensor::randn(&[64], 1.0, &mut rng);
        for (lo, hi) in [(Timestep::Clean, Timestep::Step(0)), (Timestep::Step(20), Timestep::Step(40)), (Timestep::Step(940), Timestep::Step(960))] {
            let up = ddim_invert_step(&x, &eps, lo, hi, &s).unwrap();
            let back = ddim_step(&up, &eps, hi, lo, &s).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() <= 1e-6, "{lo}->{hi}");
        }
    }

    #[test]
    fn equal_noise_levels_are_identity() {
        let mut rng = seeded(10);
        let x = Tensor::randn(&[32], 1.0, &mut rng);
        let eps = Tensor::randn(&[32], 1.0, &mut rng);
        assert_eq!(ddim_move(&x, &eps, 0.37, 0.37).unwrap(), x);
    }

    #[test]
    fn cfg_examples() {
        let u = t(&[0.0, 1.0]);
        let c = t(&[2.0, -3.0]);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        let g = cfg_combine(&t(&[0.0]), &t(&[2.0]), 7.5).unwrap();
        assert_eq!(g.data(), &[15.0]);
        assert!(cfg_combine(&u, &t(&[1.0]), 2.0).is_err());
        assert!(cfg_combine(&u, &c, -1.0).is_err());
    }

    #[test]
    fn schedule_json_dump() {
        let s = make_schedule(3, 0.1, 0.2).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(v["T"], 3);
        assert_eq!(v["alpha_bar"].as_array().unwrap().len(), 3);
        let back: NoiseSchedule = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }
}
