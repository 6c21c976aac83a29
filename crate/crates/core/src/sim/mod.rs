//! Self-contained pendulum environment: dynamics, raster renderer, noise
//! injection, and dataset generation.

mod dataset;

pub use dataset::{generate_dataset, load_dataset, Dataset, DatasetHeader, EvalOnly, Transition, TransitionStates};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

/// Physical and integration constants of the pendulum.
#[derive(Debug, Clone, PartialEq)]
pub struct PendulumParams {
    /// Mass [kg].
    pub mass: f64,
    /// Length [m].
    pub length: f64,
    /// Gravity [m/s^2].
    pub gravity: f64,
    /// Integration timestep [s].
    pub dt: f64,
    /// Applied torque is clamped to +/- this value [N m].
    pub torque_limit: f64,
    /// Std of the additive torque disturbance [N m].
    pub dynamics_noise_std: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        // Pendulum-v1 conventions: g = 10, dt = 0.05, torque limit 2.
        PendulumParams {
            mass: 1.0,
            length: 1.0,
            gravity: 10.0,
            dt: 0.05,
            torque_limit: 2.0,
            dynamics_noise_std: 0.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        if self.mass <= 0.0 || self.length <= 0.0 || self.gravity <= 0.0 || self.dt <= 0.0 {
            return Err(Error::config(format!(
                "pendulum params must be positive: m={} l={} g={} dt={}",
                self.mass, self.length, self.gravity, self.dt
            )));
        }
        if self.dynamics_noise_std < 0.0 || self.torque_limit <= 0.0 {
            return Err(Error::config("invalid torque limit or dynamics noise".to_string()));
        }
        Ok(())
    }
}

/// Angular velocity magnitude cap [rad/s].
pub const VELOCITY_LIMIT: f64 = 8.0;

/// Pendulum state: angle wrapped to (-pi, pi], velocity clamped to +/- 8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub angle: f64,
    pub velocity: f64,
}

impl PendulumState {
    pub fn new(angle: f64, velocity: f64) -> Self {
        PendulumState {
            angle: wrap_angle(angle),
            velocity: velocity.clamp(-VELOCITY_LIMIT, VELOCITY_LIMIT),
        }
    }
}

/// Wrap to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    PI - (PI - a).rem_euclid(2.0 * PI)
}

/// Noise variances applied to measurements, controls, and dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub sigma_x2: f64,
    pub sigma_u2: f64,
    pub sigma_dyn2: f64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig { sigma_x2: 0.0, sigma_u2: 0.0, sigma_dyn2: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_x2 < 0.0 || self.sigma_u2 < 0.0 || self.sigma_dyn2 < 0.0 {
            return Err(Error::config("noise variances must be non-negative".to_string()));
        }
        Ok(())
    }
}

/// Angular acceleration `phidd = -(1/(m l)) (m g sin(phi) + u + eps)`.
pub fn angular_accel(state: &PendulumState, u: f64, p: &PendulumParams, eps_dyn: f64) -> f64 {
    -(1.0 / (p.mass * p.length)) * (p.mass * p.gravity * state.angle.sin() + u + eps_dyn)
}

/// One semi-implicit Euler step. The torque is clamped to the limit, the
/// disturbance is N(0, dynamics_noise_std^2).
pub fn step_dynamics(
    state: &PendulumState,
    u: f64,
    p: &PendulumParams,
    rng: &mut impl Rng,
) -> PendulumState {
    let u = u.clamp(-p.torque_limit, p.torque_limit);
    let eps: f64 = if p.dynamics_noise_std > 0.0 {
        p.dynamics_noise_std * rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    };
    let accel = angular_accel(state, u, p, eps);
    let velocity = (state.velocity + accel * p.dt).clamp(-VELOCITY_LIMIT, VELOCITY_LIMIT);
    let angle = wrap_angle(state.angle + velocity * p.dt);
    PendulumState { angle, velocity }
}

/// Total mechanical energy `1/2 m l^2 v^2 + m g l (1 - cos phi)`.
pub fn energy(state: &PendulumState, p: &PendulumParams) -> f64 {
    0.5 * p.mass * p.length * p.length * state.velocity * state.velocity
        + p.mass * p.gravity * p.length * (1.0 - state.angle.cos())
}

/// Render the pendulum as an anti-aliased rod on an `[H, W]` grayscale
/// image: foreground 1.0, background 0.0, rod length 0.4 min(H, W) pixels,
/// thickness 2 px, anchored at the image center with angle 0 pointing up.
pub fn render(state: &PendulumState, h: usize, w: usize) -> Result<Tensor> {
    if h < 16 || w < 16 {
        return Err(Error::config(format!("render needs H, W >= 16, got {h}x{w}")));
    }
    let cr = (h as f64 - 1.0) / 2.0;
    let cc = (w as f64 - 1.0) / 2.0;
    let len = 0.4 * h.min(w) as f64;
    // Screen convention: angle 0 points up (decreasing row index).
    let tip_r = cr - len * state.angle.cos();
    let tip_c = cc + len * state.angle.sin();
    let half_thickness = 1.0;

    let mut img = Tensor::zeros(&[h, w]);
    for r in 0..h {
        for c in 0..w {
            let d = point_segment_distance(r as f64, c as f64, cr, cc, tip_r, tip_c);
            let coverage = (half_thickness + 0.5 - d).clamp(0.0, 1.0);
            img.data_mut()[r * w + c] = coverage;
        }
    }
    Ok(img)
}

fn point_segment_distance(pr: f64, pc: f64, ar: f64, ac: f64, br: f64, bc: f64) -> f64 {
    let (dr, dc) = (br - ar, bc - ac);
    let len2 = dr * dr + dc * dc;
    let t = if len2 > 0.0 {
        (((pr - ar) * dr + (pc - ac) * dc) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qr, qc) = (ar + t * dr, ac + t * dc);
    ((pr - qr) * (pr - qr) + (pc - qc) * (pc - qc)).sqrt()
}

/// Two consecutive grayscale frames stacked along the channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    /// `[frames * channels_per_frame, H, W]` intensities; in [0, 1] before
    /// noise, unclamped after.
    pub frames: Tensor,
}

impl Measurement {
    pub fn stack(prev: &Tensor, curr: &Tensor) -> Result<Self> {
        if prev.shape() != curr.shape() || prev.shape().len() != 2 {
            return Err(Error::Shape {
                op: "measurement_stack",
                lhs: prev.shape().to_vec(),
                rhs: curr.shape().to_vec(),
            });
        }
        let (h, w) = (prev.shape()[0], prev.shape()[1]);
        let mut data = Vec::with_capacity(2 * h * w);
        data.extend_from_slice(prev.data());
        data.extend_from_slice(curr.data());
        Ok(Measurement { frames: Tensor::new(vec![2, h, w], data)? })
    }
}

/// Element-wise Gaussian measurement noise; deliberately not clamped to
/// [0, 1] — models must cope with out-of-range intensities.
pub fn add_measurement_noise(x: &Measurement, sigma_x2: f64, rng: &mut impl Rng) -> Measurement {
    if sigma_x2 == 0.0 {
        return x.clone();
    }
    let sigma = sigma_x2.sqrt();
    let frames = x
        .frames
        .map_with_rng(|v, r| v + sigma * r.sample::<f64, _>(StandardNormal), rng);
    Measurement { frames }
}

/// Scalar Gaussian control noise.
pub fn add_control_noise(u: f64, sigma_u2: f64, rng: &mut impl Rng) -> f64 {
    if sigma_u2 == 0.0 {
        return u;
    }
    u + sigma_u2.sqrt() * rng.sample::<f64, _>(StandardNormal)
}

impl Tensor {
    fn map_with_rng(&self, mut f: impl FnMut(f64, &mut dyn rand::RngCore) -> f64, rng: &mut impl Rng) -> Tensor {
        let data = self.data().iter().map(|&v| f(v, rng)).collect();
        Tensor::new(self.shape().to_vec(), data).expect("shape preserved")
    }
}
