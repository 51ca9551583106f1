//! Monte-Carlo reference implementation.
//!
//! Samples the exact (non-linearized) kinematic updates with true
//! cos/sin/tan to validate every analytical propagator and the trig error
//! bounds. Control draws are independent per timestep, and each use of a
//! first-order quantity (velocity for F2, speed and heading for F4) draws a
//! fresh independent realization of that step's marginal, matching the
//! conditional-independence treatment the analytical formulas encode.
//! Per-sample counter seeding makes every summary bit-identical regardless
//! of how samples would be partitioned across workers.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::Gaussian1D;
use crate::propagation::{
    AgentProfile, Formulation, KinematicDist, KinematicVars, LinearizedTrig, StepControl,
};
use crate::seed::split_indexed;

/// Monte-Carlo run settings.
#[derive(Debug, Clone, Copy)]
pub struct McConfig {
    pub n_samples: u64,
    pub seed: u64,
    /// Cap on n_samples * horizon, guarding accidental huge runs.
    pub resource_cap: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_samples: 1_000_000,
            seed: 0,
            resource_cap: 1_000_000_000,
        }
    }
}

/// Per-step sample statistics of the exact pushforward distribution.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct McSummary {
    pub n_samples: u64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Standard error of the mean estimate, sigma / sqrt(n).
    pub se_mean_x: f64,
    pub se_mean_y: f64,
    /// Standard error of the sigma estimate, sigma / sqrt(2 (n - 1)).
    pub se_sigma_x: f64,
    pub se_sigma_y: f64,
}

struct Welford {
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: u64,
}

impl Welford {
    fn new(len: usize) -> Self {
        Welford {
            mean: vec![0.0; len],
            m2: vec![0.0; len],
            count: 0,
        }
    }

    fn push(&mut self, values: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for (i, &v) in values.iter().enumerate() {
            let d = v - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (v - self.mean[i]);
        }
    }

    fn sigma(&self, i: usize) -> f64 {
        (self.m2[i] / (self.count as f64 - 1.0)).sqrt()
    }
}

fn draw(rng: &mut ChaCha8Rng, g: &Gaussian1D) -> f64 {
    if g.sigma == 0.0 {
        g.mu
    } else {
        let eps: f64 = rng.sample(StandardNormal);
        g.mu + g.sigma * eps
    }
}

/// Exact-trig Monte-Carlo rollout; returns per-step summaries of the sampled
/// position distribution. Deterministic given the seed.
pub fn mc_rollout(
    initial: &KinematicDist,
    controls: &[StepControl],
    profile: &AgentProfile,
    horizon: usize,
    cfg: &McConfig,
) -> Result<Vec<McSummary>> {
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
    let requested = cfg.n_samples.saturating_mul(horizon as u64);
    if requested > cfg.resource_cap {
        return Err(Error::ResourceLimit {
            requested,
            cap: cfg.resource_cap,
        });
    }
    assert!(cfg.n_samples >= 2, "need at least two samples for sigma");

    let dt = profile.dt;
    let mut wx = Welford::new(horizon);
    let mut wy = Welford::new(horizon);
    let mut xs = vec![0.0; horizon];
    let mut ys = vec![0.0; horizon];

    for sample in 0..cfg.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(split_indexed(cfg.seed, "mc-sample", sample));
        let mut x = draw(&mut rng, &Gaussian1D::new(initial.position.mu_x, initial.position.sigma_x));
        let mut y = draw(&mut rng, &Gaussian1D::new(initial.position.mu_y, initial.position.sigma_y));

        match (&initial.vars, formulation) {
            (KinematicVars::F1 { .. }, Formulation::F1) => {
                for (t, control) in controls.iter().enumerate() {
                    let StepControl::F1 { vel_x, vel_y } = control else {
                        unreachable!()
                    };
                    x += draw(&mut rng, vel_x) * dt;
                    y += draw(&mut rng, vel_y) * dt;
                    xs[t] = x;
                    ys[t] = y;
                }
            }
            (KinematicVars::F2 { vel_x, vel_y, .. }, Formulation::F2) => {
                // The velocity used by each position increment is a fresh
                // realization of that step's velocity marginal.
                for t in 0..horizon {
                    let mut vx = draw(&mut rng, vel_x);
                    let mut vy = draw(&mut rng, vel_y);
                    for control in controls.iter().take(t + 1) {
                        let StepControl::F2 { acc_x, acc_y } = control else {
                            unreachable!()
                        };
                        vx += draw(&mut rng, acc_x) * dt;
                        vy += draw(&mut rng, acc_y) * dt;
                    }
                    x += vx * dt;
                    y += vy * dt;
                    xs[t] = x;
                    ys[t] = y;
                }
            }
            (KinematicVars::F3 { .. }, Formulation::F3) => {
                for (t, control) in controls.iter().enumerate() {
                    let StepControl::F3 { speed, heading } = control else {
                        unreachable!()
                    };
                    let s = draw(&mut rng, speed);
                    let theta = draw(&mut rng, heading);
                    x += s * theta.cos() * dt;
                    y += s * theta.sin() * dt;
                    xs[t] = x;
                    ys[t] = y;
                }
            }
            (KinematicVars::F4 { speed, heading, .. }, Formulation::F4) => {
                let inv_l = 1.0 / profile.length_l;
                // Fresh speed realization accumulating accelerations 1..=t.
                let sample_speed = |rng: &mut ChaCha8Rng, t: usize| {
                    let mut s = draw(rng, speed);
                    for control in controls.iter().take(t) {
                        let StepControl::F4 { accel, .. } = control else {
                            unreachable!()
                        };
                        s += draw(rng, accel) * dt;
                    }
                    s
                };
                for t in 0..horizon {
                    // Fresh heading realization: theta_t accumulates
                    // s_{j-1} tan(delta_j) dt / L over j = 1..=t, each inner
                    // speed itself a fresh replica.
                    let mut theta = draw(&mut rng, heading);
                    for (j, control) in controls.iter().take(t + 1).enumerate() {
                        let StepControl::F4 { steer, .. } = control else {
                            unreachable!()
                        };
                        let s_prev = sample_speed(&mut rng, j);
                        let delta = draw(&mut rng, steer);
                        theta += inv_l * s_prev * delta.tan() * dt;
                    }
                    let s = sample_speed(&mut rng, t + 1);
                    x += s * theta.cos() * dt;
                    y += s * theta.sin() * dt;
                    xs[t] = x;
                    ys[t] = y;
                }
            }
            _ => return Err(Error::FormulationMismatch),
        }
        wx.push(&xs);
        wy.push(&ys);
    }

    let n = cfg.n_samples;
    Ok((0..horizon)
        .map(|t| {
            let sx = wx.sigma(t);
            let sy = wy.sigma(t);
            let sqrt_n = (n as f64).sqrt();
            let sqrt_2n1 = (2.0 * (n as f64 - 1.0)).sqrt();
            McSummary {
                n_samples: n,
                mean_x: wx.mean[t],
                mean_y: wy.mean[t],
                sigma_x: sx,
                sigma_y: sy,
                se_mean_x: sx / sqrt_n,
                se_mean_y: sy / sqrt_n,
                se_sigma_x: sx / sqrt_2n1,
                se_sigma_y: sy / sqrt_2n1,
            }
        })
        .collect())
}

/// Empirical means of |exact trig - linearized trig| over sampled headings,
/// for both the sin and cos branches, plus the realized mean eps^2.
#[derive(Debug, Clone, Copy)]
pub struct RemainderEstimate {
    pub mean_abs_sin: f64,
    pub mean_abs_cos: f64,
    pub mean_eps_sq: f64,
}

/// Samples the Lagrange remainder of the trig linearization at `mu_theta`.
pub fn remainder_estimate(
    mu_theta: f64,
    sigma_theta: f64,
    n_samples: u64,
    seed: u64,
) -> RemainderEstimate {
    assert!(n_samples >= 1, "need at least one sample");
    let trig = LinearizedTrig::at(mu_theta);
    let mut rng = ChaCha8Rng::seed_from_u64(split_indexed(seed, "remainder", 0));
    let mut abs_sin = 0.0;
    let mut abs_cos = 0.0;
    let mut eps_sq = 0.0;
    for _ in 0..n_samples {
        let eps: f64 = rng.sample(StandardNormal);
        let theta = mu_theta + sigma_theta * eps;
        abs_sin += (theta.sin() - trig.t_sin(theta)).abs();
        abs_cos += (theta.cos() - trig.t_cos(theta)).abs();
        eps_sq += eps * eps;
    }
    let n = n_samples as f64;
    RemainderEstimate {
        mean_abs_sin: abs_sin / n,
        mean_abs_cos: abs_cos / n,
        mean_eps_sq: eps_sq / n,
    }
}
