//! Analytical one-step and multi-step propagation of Gaussian kinematic
//! distributions to position distributions.
//!
//! Four formulations are supported, all under explicit Euler integration:
//!
//! * F1 — velocity components (vx, vy): exact Gaussian pushforward,
//! * F2 — acceleration components (ax, ay): integrates to velocity
//!   distributions and then degenerates to F1,
//! * F3 — speed and heading (s, theta): first-order bicycle dynamics with
//!   sin/cos replaced by their linearizations at the heading mean,
//! * F4 — scalar acceleration and steering (a, delta): second-order bicycle
//!   dynamics with the tan linearization, degenerating to F3 for positions.
//!
//! Each rollout step consumes one per-timestep control distribution; the
//! first-order state produced by a step (velocity for F2, speed/heading for
//! F4) is the one used for that step's position update. The correlation
//! coefficient is carried through unchanged: the formulations derive no
//! cross-axis covariance update.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian1D, Gaussian2D};
use crate::scalar::Scalar;

/// Which kinematic variables the network predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    F1,
    F2,
    F3,
    F4,
}

impl Formulation {
    pub const ALL: [Formulation; 4] = [
        Formulation::F1,
        Formulation::F2,
        Formulation::F3,
        Formulation::F4,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Formulation::F1 => "f1",
            Formulation::F2 => "f2",
            Formulation::F3 => "f3",
            Formulation::F4 => "f4",
        }
    }
}

impl std::str::FromStr for Formulation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "f1" => Ok(Formulation::F1),
            "f2" => Ok(Formulation::F2),
            "f3" => Ok(Formulation::F3),
            "f4" => Ok(Formulation::F4),
            other => Err(format!("unknown formulation '{other}'")),
        }
    }
}

/// Vehicle length and timestep interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    /// Vehicle length in meters; drives the bicycle-model turn rate.
    pub length_l: f64,
    /// Timestep interval in seconds.
    pub dt: f64,
}

impl AgentProfile {
    pub fn new(length_l: f64, dt: f64) -> Result<Self> {
        if !(length_l > 0.0 && dt > 0.0 && length_l.is_finite() && dt.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(AgentProfile { length_l, dt })
    }
}

/// Per-formulation kinematic variables of one timestep.
#[derive(Debug, Clone)]
pub enum KinematicVars<T = f64> {
    F1 {
        vel_x: Gaussian1D<T>,
        vel_y: Gaussian1D<T>,
    },
    F2 {
        vel_x: Gaussian1D<T>,
        vel_y: Gaussian1D<T>,
        acc_x: Gaussian1D<T>,
        acc_y: Gaussian1D<T>,
    },
    F3 {
        speed: Gaussian1D<T>,
        heading: Gaussian1D<T>,
    },
    F4 {
        speed: Gaussian1D<T>,
        heading: Gaussian1D<T>,
        accel: Gaussian1D<T>,
        steer: Gaussian1D<T>,
    },
}

impl<T> KinematicVars<T> {
    pub fn formulation(&self) -> Formulation {
        match self {
            KinematicVars::F1 { .. } => Formulation::F1,
            KinematicVars::F2 { .. } => Formulation::F2,
            KinematicVars::F3 { .. } => Formulation::F3,
            KinematicVars::F4 { .. } => Formulation::F4,
        }
    }
}

/// Joint position and kinematic distributions of one agent at one timestep.
#[derive(Debug, Clone)]
pub struct KinematicDist<T = f64> {
    pub position: Gaussian2D<T>,
    pub vars: KinematicVars<T>,
}

/// One timestep's predicted control distribution.
#[derive(Debug, Clone)]
pub enum StepControl<T = f64> {
    F1 {
        vel_x: Gaussian1D<T>,
        vel_y: Gaussian1D<T>,
    },
    F2 {
        acc_x: Gaussian1D<T>,
        acc_y: Gaussian1D<T>,
    },
    F3 {
        speed: Gaussian1D<T>,
        heading: Gaussian1D<T>,
    },
    F4 {
        accel: Gaussian1D<T>,
        steer: Gaussian1D<T>,
    },
}

impl<T> StepControl<T> {
    pub fn formulation(&self) -> Formulation {
        match self {
            StepControl::F1 { .. } => Formulation::F1,
            StepControl::F2 { .. } => Formulation::F2,
            StepControl::F3 { .. } => Formulation::F3,
            StepControl::F4 { .. } => Formulation::F4,
        }
    }
}

/// How F4 integrates the speed spread.
///
/// `Printed` is the linear sum `sigma_s + sigma_a * dt`; `Quadrature` is the
/// root-sum-of-squares form that matches the F2 treatment of the same
/// operation and the exact Gaussian pushforward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedSigmaMode {
    #[default]
    Printed,
    Quadrature,
}

fn check_finite<T: Scalar>(values: &[&T]) -> Result<()> {
    if values.iter().all(|v| v.value().is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput)
    }
}

/// One F1 step: position advanced by per-axis velocity distributions.
///
/// Per axis: mu' = mu + mu_v * dt, sigma' = sqrt(sigma^2 + sigma_v^2 * dt^2).
pub fn propagate_f1<T: Scalar>(
    pos: &Gaussian2D<T>,
    vel_x: &Gaussian1D<T>,
    vel_y: &Gaussian1D<T>,
    dt: f64,
) -> Result<Gaussian2D<T>> {
    debug_assert!(dt > 0.0);
    check_finite(&[
        &pos.mu_x,
        &pos.mu_y,
        &pos.sigma_x,
        &pos.sigma_y,
        &vel_x.mu,
        &vel_x.sigma,
        &vel_y.mu,
        &vel_y.sigma,
    ])?;
    let dt_c = pos.mu_x.lift(dt);
    Ok(Gaussian2D {
        mu_x: pos.mu_x.clone() + vel_x.mu.clone() * dt_c.clone(),
        mu_y: pos.mu_y.clone() + vel_y.mu.clone() * dt_c.clone(),
        sigma_x: (pos.sigma_x.sq() + (vel_x.sigma.clone() * dt_c.clone()).sq()).sqrt(),
        sigma_y: (pos.sigma_y.sq() + (vel_y.sigma.clone() * dt_c).sq()).sqrt(),
        rho: pos.rho.clone(),
    })
}

/// One F2 step: velocity distributions advanced by per-axis acceleration
/// distributions. The position update then delegates to [`propagate_f1`].
pub fn propagate_f2<T: Scalar>(
    vel_x: &Gaussian1D<T>,
    vel_y: &Gaussian1D<T>,
    acc_x: &Gaussian1D<T>,
    acc_y: &Gaussian1D<T>,
    dt: f64,
) -> Result<(Gaussian1D<T>, Gaussian1D<T>)> {
    debug_assert!(dt > 0.0);
    check_finite(&[
        &vel_x.mu,
        &vel_x.sigma,
        &vel_y.mu,
        &vel_y.sigma,
        &acc_x.mu,
        &acc_x.sigma,
        &acc_y.mu,
        &acc_y.sigma,
    ])?;
    let dt_c = vel_x.mu.lift(dt);
    let step = |v: &Gaussian1D<T>, a: &Gaussian1D<T>| Gaussian1D {
        mu: v.mu.clone() + a.mu.clone() * dt_c.clone(),
        sigma: (v.sigma.sq() + (a.sigma.clone() * dt_c.clone()).sq()).sqrt(),
    };
    Ok((step(vel_x, acc_x), step(vel_y, acc_y)))
}

/// One F3 step: position advanced by speed and heading distributions with
/// sin/cos linearized at the heading mean.
///
/// mu_x' = mu_x + mu_s cos(mu_theta) dt, and
/// sigma_x' = sqrt(sigma_x^2 + A^2 + B^2 + C^2) with
/// A = mu_s sigma_theta sin(mu_theta) dt, B = sigma_s cos(mu_theta) dt,
/// C = sigma_s sigma_theta sin(mu_theta) dt; symmetrically for y.
pub fn propagate_f3<T: Scalar>(
    pos: &Gaussian2D<T>,
    speed: &Gaussian1D<T>,
    heading: &Gaussian1D<T>,
    dt: f64,
) -> Result<Gaussian2D<T>> {
    debug_assert!(dt > 0.0);
    check_finite(&[
        &pos.mu_x,
        &pos.mu_y,
        &pos.sigma_x,
        &pos.sigma_y,
        &speed.mu,
        &speed.sigma,
        &heading.mu,
        &heading.sigma,
    ])?;
    let sigma_theta = heading.sigma.value();
    if sigma_theta >= FRAC_PI_2 {
        return Err(Error::LinearizationDomain { sigma_theta });
    }
    let dt_c = pos.mu_x.lift(dt);
    let cos_t = heading.mu.cos();
    let sin_t = heading.mu.sin();

    let a = speed.mu.clone() * heading.sigma.clone() * sin_t.clone() * dt_c.clone();
    let b = speed.sigma.clone() * cos_t.clone() * dt_c.clone();
    let c = speed.sigma.clone() * heading.sigma.clone() * sin_t.clone() * dt_c.clone();

    let d = speed.mu.clone() * heading.sigma.clone() * cos_t.clone() * dt_c.clone();
    let e = speed.sigma.clone() * sin_t.clone() * dt_c.clone();
    let f = speed.sigma.clone() * heading.sigma.clone() * cos_t.clone() * dt_c.clone();

    Ok(Gaussian2D {
        mu_x: pos.mu_x.clone() + speed.mu.clone() * cos_t * dt_c.clone(),
        mu_y: pos.mu_y.clone() + speed.mu.clone() * sin_t * dt_c,
        sigma_x: (pos.sigma_x.sq() + a.sq() + b.sq() + c.sq()).sqrt(),
        sigma_y: (pos.sigma_y.sq() + d.sq() + e.sq() + f.sq()).sqrt(),
        rho: pos.rho.clone(),
    })
}

/// One F4 step: speed and heading distributions advanced by scalar
/// acceleration and steering distributions. The position update then
/// delegates to [`propagate_f3`] on the returned pair.
///
/// mu_s' = mu_s + mu_a dt; sigma_s' per [`SpeedSigmaMode`];
/// mu_theta' = mu_theta + mu_s tan(mu_delta) dt / L;
/// sigma_theta' = sqrt(sigma_theta^2 + X^2 + Y^2 + Z^2) with
/// X = mu_s sigma_delta sec^2(mu_delta) dt / L,
/// Y = sigma_s tan(mu_delta) dt / L,
/// Z = sigma_s sigma_delta sec^2(mu_delta) dt / L.
pub fn propagate_f4<T: Scalar>(
    speed: &Gaussian1D<T>,
    heading: &Gaussian1D<T>,
    accel: &Gaussian1D<T>,
    steer: &Gaussian1D<T>,
    length_l: f64,
    dt: f64,
    mode: SpeedSigmaMode,
) -> Result<(Gaussian1D<T>, Gaussian1D<T>)> {
    debug_assert!(dt > 0.0 && length_l > 0.0);
    check_finite(&[
        &speed.mu,
        &speed.sigma,
        &heading.mu,
        &heading.sigma,
        &accel.mu,
        &accel.sigma,
        &steer.mu,
        &steer.sigma,
    ])?;
    let mu_delta = steer.mu.value();
    if mu_delta.abs() >= FRAC_PI_2 {
        return Err(Error::SteeringDomain { mu_delta });
    }
    let sigma_delta = steer.sigma.value();
    if sigma_delta >= FRAC_PI_2 / 2.0 {
        return Err(Error::LinearizationDomain {
            sigma_theta: sigma_delta,
        });
    }

    let dt_c = speed.mu.lift(dt);
    let inv_l = speed.mu.lift(1.0 / length_l);
    let one = speed.mu.lift(1.0);

    let speed_next = Gaussian1D {
        mu: speed.mu.clone() + accel.mu.clone() * dt_c.clone(),
        sigma: match mode {
            SpeedSigmaMode::Printed => speed.sigma.clone() + accel.sigma.clone() * dt_c.clone(),
            SpeedSigmaMode::Quadrature => {
                (speed.sigma.sq() + (accel.sigma.clone() * dt_c.clone()).sq()).sqrt()
            }
        },
    };

    let tan_d = steer.mu.tan();
    let sec2_d = one / steer.mu.cos().sq();
    let x = inv_l.clone()
        * speed.mu.clone()
        * steer.sigma.clone()
        * sec2_d.clone()
        * dt_c.clone();
    let y = inv_l.clone() * speed.sigma.clone() * tan_d.clone() * dt_c.clone();
    let z = inv_l.clone() * speed.sigma.clone() * steer.sigma.clone() * sec2_d * dt_c.clone();

    let heading_next = Gaussian1D {
        mu: heading.mu.clone() + inv_l * speed.mu.clone() * tan_d * dt_c,
        sigma: (heading.sigma.sq() + x.sq() + y.sq() + z.sq()).sqrt(),
    };

    Ok((speed_next, heading_next))
}

/// Multi-step propagation: chains the formulation's one-step propagator over
/// `horizon` per-timestep controls and returns the resulting position
/// distributions (length `horizon`).
///
/// The initial position must carry zero spread only by convention of the
/// first prediction step; the function itself accepts any valid start.
pub fn rollout<T: Scalar>(
    initial: &KinematicDist<T>,
    controls: &[StepControl<T>],
    profile: &AgentProfile,
    horizon: usize,
    mode: SpeedSigmaMode,
) -> Result<Vec<Gaussian2D<T>>> {
    if controls.len() != horizon {
        return Err(Error::ControlLengthMismatch {
            expected: horizon,
            got: controls.len(),
        });
    }
    let formulation = initial.vars.formulation();
    if controls.iter().any(|c| c.formulation() != formulation) {
        return Err(Error::FormulationMismatch);
    }
    let dt = profile.dt;
    let mut positions = Vec::with_capacity(horizon);
    let mut pos = initial.position.clone();

    match (&initial.vars, formulation) {
        (KinematicVars::F1 { .. }, Formulation::F1) => {
            for control in controls {
                let StepControl::F1 { vel_x, vel_y } = control else {
                    return Err(Error::FormulationMismatch);
                };
                pos = propagate_f1(&pos, vel_x, vel_y, dt)?;
                positions.push(pos.clone());
            }
        }
        (KinematicVars::F2 { vel_x, vel_y, .. }, Formulation::F2) => {
            let mut vx = vel_x.clone();
            let mut vy = vel_y.clone();
            for control in controls {
                let StepControl::F2 { acc_x, acc_y } = control else {
                    return Err(Error::FormulationMismatch);
                };
                let (nvx, nvy) = propagate_f2(&vx, &vy, acc_x, acc_y, dt)?;
                vx = nvx;
                vy = nvy;
                pos = propagate_f1(&pos, &vx, &vy, dt)?;
                positions.push(pos.clone());
            }
        }
        (KinematicVars::F3 { .. }, Formulation::F3) => {
            for control in controls {
                let StepControl::F3 { speed, heading } = control else {
                    return Err(Error::FormulationMismatch);
                };
                pos = propagate_f3(&pos, speed, heading, dt)?;
                positions.push(pos.clone());
            }
        }
        (KinematicVars::F4 { speed, heading, .. }, Formulation::F4) => {
            let mut s = speed.clone();
            let mut h = heading.clone();
            for control in controls {
                let StepControl::F4 { accel, steer } = control else {
                    return Err(Error::FormulationMismatch);
                };
                let (ns, nh) = propagate_f4(&s, &h, accel, steer, profile.length_l, dt, mode)?;
                s = ns;
                h = nh;
                pos = propagate_f3(&pos, &s, &h, dt)?;
                positions.push(pos.clone());
            }
        }
        _ => return Err(Error::FormulationMismatch),
    }
    Ok(positions)
}

/// First-order Taylor replacement of sin/cos evaluated at a base angle.
#[derive(Debug, Clone, Copy)]
pub struct LinearizedTrig {
    pub base_angle: f64,
    pub sin_at_mu: f64,
    pub cos_at_mu: f64,
}

impl LinearizedTrig {
    pub fn at(mu_theta: f64) -> Self {
        LinearizedTrig {
            base_angle: mu_theta,
            sin_at_mu: mu_theta.sin(),
            cos_at_mu: mu_theta.cos(),
        }
    }

    /// T_sin(theta) = sin(mu) + cos(mu) (theta - mu)
    pub fn t_sin(&self, theta: f64) -> f64 {
        self.sin_at_mu + self.cos_at_mu * (theta - self.base_angle)
    }

    /// T_cos(theta) = cos(mu) - sin(mu) (theta - mu)
    pub fn t_cos(&self, theta: f64) -> f64 {
        self.cos_at_mu - self.sin_at_mu * (theta - self.base_angle)
    }
}

/// Lagrange remainder bound of the trig linearization, on the expected-value
/// scale (the unit-variance noise has E[eps^2] = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    /// sigma_theta^2 / 2 for the step that produced this bound.
    pub per_step: f64,
    /// Running sum of per-step bounds across a rollout.
    pub accumulated: f64,
}

impl ErrorBound {
    pub fn zero() -> Self {
        ErrorBound {
            per_step: 0.0,
            accumulated: 0.0,
        }
    }

    /// Extends the accumulated bound by the next step's heading spread.
    pub fn chain(&self, sigma_theta: f64) -> Self {
        let step = lagrange_bound(sigma_theta).per_step;
        ErrorBound {
            per_step: step,
            accumulated: self.accumulated + step,
        }
    }
}

/// Per-step Lagrange bound sigma_theta^2 / 2 of the linearized trig error.
pub fn lagrange_bound(sigma_theta: f64) -> ErrorBound {
    debug_assert!(sigma_theta >= 0.0);
    let per_step = 0.5 * sigma_theta * sigma_theta;
    ErrorBound {
        per_step,
        accumulated: per_step,
    }
}
