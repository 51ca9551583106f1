//! Differentiable car-following model: an Intelligent-Driver-Model (IDM)
//! simulator, per-vehicle parameter inference from history, the
//! cosine-similarity blend weight alpha, and the blended position
//! distribution P = alpha * P_net + (1 - alpha) * P_sim.
//!
//! The simulator acts along-lane; lateral placement comes from the
//! forecaster. Parameter vector ordering everywhere is
//! `[v0, t_headway, s0, a_max, b_comf]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian2D, MixtureComponent, CFM_PARAM_COUNT};
use crate::scalar::Scalar;
use crate::trajectory::Trajectory;

/// Car-following parameters: desired speed (m/s), time headway (s),
/// minimum gap (m), maximum acceleration (m/s^2), comfortable
/// deceleration (m/s^2). All strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams<T = f64> {
    pub v0: T,
    pub t_headway: T,
    pub s0: T,
    pub a_max: T,
    pub b_comf: T,
}

impl<T: Clone> IdmParams<T> {
    pub fn to_array(&self) -> [T; CFM_PARAM_COUNT] {
        [
            self.v0.clone(),
            self.t_headway.clone(),
            self.s0.clone(),
            self.a_max.clone(),
            self.b_comf.clone(),
        ]
    }

    pub fn from_array(a: [T; CFM_PARAM_COUNT]) -> Self {
        let [v0, t_headway, s0, a_max, b_comf] = a;
        IdmParams {
            v0,
            t_headway,
            s0,
            a_max,
            b_comf,
        }
    }
}

impl IdmParams<f64> {
    /// A mid-range passenger-car parameterization.
    pub fn typical() -> Self {
        IdmParams {
            v0: 12.0,
            t_headway: 1.5,
            s0: 2.0,
            a_max: 1.5,
            b_comf: 2.0,
        }
    }

    pub fn is_valid(&self, bounds: &IdmBounds) -> bool {
        self.to_array()
            .iter()
            .zip(bounds.lo.to_array().iter())
            .zip(bounds.hi.to_array().iter())
            .all(|((p, lo), hi)| *p >= *lo && *p <= *hi)
    }

    pub fn clamped(&self, bounds: &IdmBounds) -> Self {
        let lo = bounds.lo.to_array();
        let hi = bounds.hi.to_array();
        let mut a = self.to_array();
        for i in 0..CFM_PARAM_COUNT {
            a[i] = a[i].clamp(lo[i], hi[i]);
        }
        IdmParams::from_array(a)
    }
}

/// Physical ranges the parameters must stay within.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IdmBounds {
    pub lo: IdmParams,
    pub hi: IdmParams,
}

impl Default for IdmBounds {
    fn default() -> Self {
        IdmBounds {
            lo: IdmParams {
                v0: 0.5,
                t_headway: 0.1,
                s0: 0.2,
                a_max: 0.2,
                b_comf: 0.2,
            },
            hi: IdmParams {
                v0: 60.0,
                t_headway: 5.0,
                s0: 10.0,
                a_max: 5.0,
                b_comf: 6.0,
            },
        }
    }
}

/// IDM acceleration:
/// a = a_max (1 - (v / v0)^4 - (s* / gap)^2) with
/// s* = s0 + v T + v dv / (2 sqrt(a_max b_comf)).
pub fn idm_accel<T: Scalar>(
    speed: &T,
    gap: &T,
    speed_delta: &T,
    params: &IdmParams<T>,
) -> Result<T> {
    let gap_v = gap.value();
    if gap_v <= 0.0 {
        return Err(Error::CollisionState {
            follower: None,
            leader: None,
            gap: gap_v,
        });
    }
    let half = speed.lift(0.5);
    let one = speed.lift(1.0);
    let s_star = params.s0.clone()
        + speed.clone() * params.t_headway.clone()
        + speed.clone() * speed_delta.clone() * half
            / (params.a_max.clone() * params.b_comf.clone()).sqrt();
    let free = (speed.clone() / params.v0.clone()).sq().sq();
    let interaction = (s_star / gap.clone()).sq();
    Ok(params.a_max.clone() * (one - free - interaction))
}

/// Speed profile driving the platoon lead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LeadProfile {
    Constant {
        speed: f64,
    },
    /// Piecewise-constant segments of (duration seconds, speed); the last
    /// segment's speed holds beyond the listed total duration.
    Piecewise {
        segments: Vec<(f64, f64)>,
    },
    /// Piecewise-linear speed over (time, speed) knots; constant beyond the
    /// last knot.
    Ramp {
        knots: Vec<(f64, f64)>,
    },
}

impl LeadProfile {
    pub fn speed_at(&self, time: f64) -> f64 {
        match self {
            LeadProfile::Constant { speed } => *speed,
            LeadProfile::Piecewise { segments } => {
                let mut t = time;
                for (duration, speed) in segments {
                    if t < *duration {
                        return *speed;
                    }
                    t -= duration;
                }
                segments.last().map(|(_, v)| *v).unwrap_or(0.0)
            }
            LeadProfile::Ramp { knots } => {
                if knots.is_empty() {
                    return 0.0;
                }
                if time <= knots[0].0 {
                    return knots[0].1;
                }
                for w in knots.windows(2) {
                    let (t0, v0) = w[0];
                    let (t1, v1) = w[1];
                    if time <= t1 {
                        let f = (time - t0) / (t1 - t0);
                        return v0 + f * (v1 - v0);
                    }
                }
                knots.last().unwrap().1
            }
        }
    }
}

/// One vehicle of the along-lane simulator. `pos` is the front bumper
/// coordinate; the gap to the leader subtracts the leader's length.
#[derive(Debug, Clone, PartialEq)]
pub struct SimVehicle {
    pub id: u32,
    pub pos: f64,
    pub speed: f64,
    pub length: f64,
    pub params: IdmParams,
}

/// Along-lane platoon state. `vehicles[0]` is the lead (largest position),
/// followers sorted behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub time: f64,
    pub dt: f64,
    pub lead_profile: LeadProfile,
    pub vehicles: Vec<SimVehicle>,
}

impl SimState {
    pub fn gap_ahead(&self, index: usize) -> f64 {
        let lead = &self.vehicles[index - 1];
        lead.pos - lead.length - self.vehicles[index].pos
    }
}

/// Advances the platoon one explicit-Euler step. The lead follows its speed
/// profile, followers accelerate per [`idm_accel`], speeds floor at zero.
/// A non-positive post-step gap halts with [`Error::CollisionState`].
pub fn sim_step(state: &SimState) -> Result<SimState> {
    debug_assert!(state.dt > 0.0);
    let dt = state.dt;
    let mut next = state.clone();

    // Accelerations from the current state, then simultaneous update.
    let mut accels = vec![0.0; state.vehicles.len()];
    for i in 1..state.vehicles.len() {
        let v = &state.vehicles[i];
        let lead = &state.vehicles[i - 1];
        let gap = state.gap_ahead(i);
        if gap <= 0.0 {
            return Err(Error::CollisionState {
                follower: Some(v.id),
                leader: Some(lead.id),
                gap,
            });
        }
        let dv = v.speed - lead.speed;
        let params = IdmParams::from_array(v.params.to_array());
        accels[i] = idm_accel(&v.speed, &gap, &dv, &params)?;
    }

    for (i, v) in next.vehicles.iter_mut().enumerate() {
        if i == 0 {
            v.pos += v.speed * dt;
            v.speed = state.lead_profile.speed_at(state.time + dt);
        } else {
            v.pos += v.speed * dt;
            v.speed = (v.speed + accels[i] * dt).max(0.0);
        }
    }
    next.time += dt;

    for i in 1..next.vehicles.len() {
        let gap = next.gap_ahead(i);
        if gap <= 0.0 {
            return Err(Error::CollisionState {
                follower: Some(next.vehicles[i].id),
                leader: Some(next.vehicles[i - 1].id),
                gap,
            });
        }
    }
    Ok(next)
}

/// Gradient-descent fit configuration for [`estimate_params`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub init: IdmParams,
    pub iters: usize,
    pub lr: f64,
    pub bounds: IdmBounds,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            init: IdmParams::typical(),
            iters: 10_000,
            lr: 0.01,
            bounds: IdmBounds::default(),
        }
    }
}

/// Result of a parameter fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdmFit {
    pub params: IdmParams,
    pub loss: f64,
    pub iterations: usize,
}

/// Adam moment decay rates for the fit's gradient descent. The objective is
/// badly conditioned (the minimum-gap/headway pair couples through
/// s* = s0 + v T with tightly clustered speeds), so per-coordinate adaptive
/// steps are used; the fit stays fully deterministic.
const FIT_BETA1: f64 = 0.9;
const FIT_BETA2: f64 = 0.999;
const FIT_EPS: f64 = 1e-8;

struct FitObservations {
    speeds: Vec<f64>,
    gaps: Vec<f64>,
    speed_deltas: Vec<f64>,
    accels: Vec<f64>,
}

fn fit_observations(
    follower: &Trajectory,
    leader: &Trajectory,
    leader_length: f64,
) -> Result<FitObservations> {
    let n = follower.states.len();
    if n < 3 || leader.states.len() != n {
        return Err(Error::InvalidHistory {
            reason: format!(
                "need aligned histories of length >= 3, got {} and {}",
                n,
                leader.states.len()
            ),
        });
    }
    if (follower.dt - leader.dt).abs() > 1e-12 {
        return Err(Error::InvalidHistory {
            reason: "timestep mismatch between histories".into(),
        });
    }
    let dt = follower.dt;
    let vf = follower.speeds();
    let vl = leader.speeds();

    // Observed accelerations by central differences; one-sided at the ends.
    let mut accels = Vec::with_capacity(n);
    for t in 0..n {
        let a = if t == 0 {
            (vf[1] - vf[0]) / dt
        } else if t == n - 1 {
            (vf[n - 1] - vf[n - 2]) / dt
        } else {
            (vf[t + 1] - vf[t - 1]) / (2.0 * dt)
        };
        accels.push(a);
    }

    // Along-lane gaps from each vehicle's own cumulative arc length plus the
    // initial straight-line separation.
    let arc_f = follower.arc_lengths();
    let arc_l = leader.arc_lengths();
    let dx = leader.states[0].x - follower.states[0].x;
    let dy = leader.states[0].y - follower.states[0].y;
    let gap0 = (dx * dx + dy * dy).sqrt() - leader_length;
    let mut gaps = Vec::with_capacity(n);
    for t in 0..n {
        let gap = gap0 + arc_l[t] - arc_f[t];
        if gap <= 0.0 {
            return Err(Error::InvalidHistory {
                reason: format!("non-positive gap {gap} at step {t}"),
            });
        }
        gaps.push(gap);
    }

    let speed_deltas = vf.iter().zip(&vl).map(|(f, l)| f - l).collect();
    Ok(FitObservations {
        speeds: vf,
        gaps,
        speed_deltas,
        accels,
    })
}

/// Model predictions matched to the finite-difference convention: the
/// central difference of Euler-integrated speeds equals the average of the
/// accelerations acting at the two surrounding states, so interior rows are
/// predicted by the trapezoid average of consecutive IDM evaluations. The
/// one-sided endpoint differences measure the first and the second-to-last
/// state's acceleration respectively.
fn predicted_accels<T: Scalar>(
    per_state: &[T],
) -> Vec<T> {
    let n = per_state.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let p = if t == 0 {
            per_state[0].clone()
        } else if t == n - 1 {
            per_state[n - 2].clone()
        } else {
            (per_state[t - 1].clone() + per_state[t].clone()).scale(0.5)
        };
        out.push(p);
    }
    out
}

fn fit_loss_value(obs: &FitObservations, params: &IdmParams) -> Result<f64> {
    let n = obs.speeds.len();
    let mut per_state = Vec::with_capacity(n);
    for t in 0..n {
        per_state.push(idm_accel(
            &obs.speeds[t],
            &obs.gaps[t],
            &obs.speed_deltas[t],
            params,
        )?);
    }
    let preds = predicted_accels(&per_state);
    let mut acc = 0.0;
    for (p, o) in preds.iter().zip(&obs.accels) {
        let r = p - o;
        acc += r * r;
    }
    Ok(acc / n as f64)
}

/// Mean squared error between observed accelerations (finite-differenced
/// from the follower history) and IDM predictions under `params`.
pub fn fit_loss(
    follower: &Trajectory,
    leader: &Trajectory,
    leader_length: f64,
    params: &IdmParams,
) -> Result<f64> {
    let obs = fit_observations(follower, leader, leader_length)?;
    fit_loss_value(&obs, params)
}

/// Fits IDM parameters to a follower/leader history pair by gradient
/// descent through the autodiff tape, projecting into `bounds` after every
/// step. Ten consecutive loss increases abort with
/// [`Error::FitDiverged`] carrying the best parameters found.
pub fn estimate_params(
    follower: &Trajectory,
    leader: &Trajectory,
    leader_length: f64,
    cfg: &FitConfig,
) -> Result<IdmFit> {
    use crate::autodiff::Tape;

    let obs = fit_observations(follower, leader, leader_length)?;
    let n = obs.speeds.len();

    let mut params = cfg.init.clamped(&cfg.bounds);
    let mut best = IdmFit {
        params,
        loss: f64::INFINITY,
        iterations: 0,
    };
    let mut prev_loss = f64::INFINITY;
    let mut rising = 0usize;
    let mut m = [0.0; CFM_PARAM_COUNT];
    let mut v2 = [0.0; CFM_PARAM_COUNT];

    for iter in 0..cfg.iters {
        let tape = Tape::with_capacity(n * 64);
        let u = params.to_array();
        let vars: Vec<crate::autodiff::Var> = u.iter().map(|&p| tape.var(p)).collect();
        let p_t = IdmParams {
            v0: vars[0].clone(),
            t_headway: vars[1].clone(),
            s0: vars[2].clone(),
            a_max: vars[3].clone(),
            b_comf: vars[4].clone(),
        };

        let mut per_state = Vec::with_capacity(n);
        for t in 0..n {
            let speed = tape.constant(obs.speeds[t]);
            let gap = tape.constant(obs.gaps[t]);
            let dv = tape.constant(obs.speed_deltas[t]);
            per_state.push(idm_accel(&speed, &gap, &dv, &p_t)?);
        }
        let preds = predicted_accels(&per_state);
        let mut loss = tape.constant(0.0);
        for (p, o) in preds.iter().zip(&obs.accels) {
            let r = p.clone() - tape.constant(*o);
            loss = loss + r.clone() * r;
        }
        loss = loss.scale(1.0 / n as f64);

        if let Some(node) = tape.first_nonfinite() {
            return Err(Error::NonFiniteForward { node });
        }
        let loss_v = loss.value();
        if loss_v < best.loss {
            best = IdmFit {
                params,
                loss: loss_v,
                iterations: iter,
            };
        }
        // Numerical zero: the observations are explained exactly.
        if loss_v <= 1e-12 {
            return Ok(best);
        }
        // Count a rise only when the loss is meaningfully above the best
        // found, so floating-point noise at a machine-zero floor does not
        // masquerade as divergence.
        if iter > 0 && loss_v > prev_loss && loss_v > 100.0 * best.loss && loss_v > 1e-9 {
            rising += 1;
            if rising >= 10 {
                return Err(Error::FitDiverged {
                    best: best.params,
                    loss: best.loss,
                    iterations: iter,
                });
            }
        } else {
            rising = 0;
        }
        prev_loss = loss_v;

        let adjoints = tape.backward(&loss);
        let mut u_next = u;
        let t_adam = (iter + 1) as f64;
        for i in 0..CFM_PARAM_COUNT {
            let g = adjoints[vars[i].index()];
            m[i] = FIT_BETA1 * m[i] + (1.0 - FIT_BETA1) * g;
            v2[i] = FIT_BETA2 * v2[i] + (1.0 - FIT_BETA2) * g * g;
            let m_hat = m[i] / (1.0 - FIT_BETA1.powf(t_adam));
            let v_hat = v2[i] / (1.0 - FIT_BETA2.powf(t_adam));
            u_next[i] -= cfg.lr * m_hat / (v_hat.sqrt() + FIT_EPS);
        }
        params = IdmParams::from_array(u_next).clamped(&cfg.bounds);
    }

    // Final evaluation at the last iterate.
    let final_loss = fit_loss_value(&obs, &params)?;
    if final_loss < best.loss {
        best = IdmFit {
            params,
            loss: final_loss,
            iterations: cfg.iters,
        };
    }
    Ok(best)
}

/// Blend weight from the cosine similarity of predicted vs estimated
/// car-following parameters, clamped into [0, 1]. Negative similarity means
/// the network disagrees with the observed dynamics, so the simulator side
/// takes over fully.
pub fn cosine_alpha<T: Scalar>(pred: &IdmParams<T>, est: &IdmParams<T>) -> Result<T> {
    let pa = pred.to_array();
    let ea = est.to_array();
    let mut dot = pa[0].lift(0.0);
    let mut np = pa[0].lift(0.0);
    let mut ne = pa[0].lift(0.0);
    for i in 0..CFM_PARAM_COUNT {
        dot = dot + pa[i].clone() * ea[i].clone();
        np = np + pa[i].sq();
        ne = ne + ea[i].sq();
    }
    if np.value() < 1e-12 || ne.value() < 1e-12 {
        return Err(Error::ZeroVector);
    }
    let cos = dot / (np.sqrt() * ne.sqrt());
    Ok(cos.clamp_range(0.0, 1.0))
}

/// Lifts plain parameters into another scalar context as constants.
pub fn lift_params<T: Scalar>(params: &IdmParams<f64>, like: &T) -> IdmParams<T> {
    IdmParams {
        v0: like.lift(params.v0),
        t_headway: like.lift(params.t_headway),
        s0: like.lift(params.s0),
        a_max: like.lift(params.a_max),
        b_comf: like.lift(params.b_comf),
    }
}

/// Two-component mixture alpha * P_net + (1 - alpha) * P_sim, the simulator
/// component centered at `p_sim_point` and carrying the network's
/// covariance. The cfm entries of the returned components are zero-filled.
pub fn blend_distributions<T: Scalar>(
    p_net: &Gaussian2D<T>,
    p_sim_point: (T, T),
    alpha: &T,
) -> Result<[MixtureComponent<T>; 2]> {
    let a = alpha.value();
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::InvalidAlpha { alpha: a });
    }
    let one = alpha.lift(1.0);
    let sim = Gaussian2D {
        mu_x: p_sim_point.0,
        mu_y: p_sim_point.1,
        sigma_x: p_net.sigma_x.clone(),
        sigma_y: p_net.sigma_y.clone(),
        rho: p_net.rho.clone(),
    };
    Ok([
        MixtureComponent::position_only(alpha.clone(), p_net.clone()),
        MixtureComponent::position_only(one - alpha.clone(), sim),
    ])
}

/// How the alpha-dependent loss term is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CfmPenaltyForm {
    /// gamma * (1 - alpha): vanishes as predicted parameters align with the
    /// estimated ones.
    #[default]
    AlignmentGap,
    /// gamma * alpha, kept for fidelity experiments.
    PrintedAlpha,
}

/// How alpha is derived from parameter similarity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMapping {
    #[default]
    ClampedCosine,
}

/// Blending hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BlendConfig {
    pub gamma: f64,
    pub alpha_mapping: AlphaMapping,
    pub penalty: CfmPenaltyForm,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            gamma: 0.0,
            alpha_mapping: AlphaMapping::ClampedCosine,
            penalty: CfmPenaltyForm::AlignmentGap,
        }
    }
}

/// Alignment penalty, gamma * (1 - alpha) by default.
pub fn cfm_loss_term<T: Scalar>(alpha: &T, gamma: f64) -> T {
    cfm_loss_term_with(alpha, gamma, CfmPenaltyForm::AlignmentGap)
}

pub fn cfm_loss_term_with<T: Scalar>(alpha: &T, gamma: f64, form: CfmPenaltyForm) -> T {
    debug_assert!(gamma >= 0.0);
    debug_assert!((0.0..=1.0).contains(&alpha.value()));
    let g = alpha.lift(gamma);
    match form {
        CfmPenaltyForm::AlignmentGap => g * (alpha.lift(1.0) - alpha.clone()),
        CfmPenaltyForm::PrintedAlpha => g * alpha.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gaussian::{gaussian2d_density, mixture_density};
    use crate::trajectory::TrajState;
    use proptest::prelude::*;

    #[test]
    fn free_road_start_accelerates_at_a_max() {
        let p = IdmParams::typical();
        let a = idm_accel(&0.0, &1e9, &0.0, &p).unwrap();
        assert!((a - p.a_max).abs() < 1e-6);
    }

    #[test]
    fn equilibrium_at_desired_speed() {
        let p = IdmParams::typical();
        let a = idm_accel(&p.v0, &1e9, &0.0, &p).unwrap();
        assert!(a.abs() < 1e-6, "a = {a}");
    }

    #[test]
    fn standstill_at_jam_gap_is_stationary() {
        let p = IdmParams::typical();
        let a = idm_accel(&0.0, &p.s0, &0.0, &p).unwrap();
        assert!(a.abs() < 1e-12);
    }

    #[test]
    fn collision_gap_rejected() {
        let p = IdmParams::typical();
        assert!(matches!(
            idm_accel(&1.0, &0.0, &0.0, &p),
            Err(Error::CollisionState { .. })
        ));
    }

    fn two_vehicle_state(gap: f64, lead_speed: f64, follower_speed: f64) -> SimState {
        let params = IdmParams::typical();
        SimState {
            time: 0.0,
            dt: 0.1,
            lead_profile: LeadProfile::Constant { speed: lead_speed },
            vehicles: vec![
                SimVehicle {
                    id: 0,
                    pos: 100.0,
                    speed: lead_speed,
                    length: 4.5,
                    params,
                },
                SimVehicle {
                    id: 1,
                    pos: 100.0 - 4.5 - gap,
                    speed: follower_speed,
                    length: 4.5,
                    params,
                },
            ],
        }
    }

    #[test]
    fn single_vehicle_advances_with_profile() {
        let state = SimState {
            time: 0.0,
            dt: 0.1,
            lead_profile: LeadProfile::Constant { speed: 12.0 },
            vehicles: vec![SimVehicle {
                id: 0,
                pos: 0.0,
                speed: 12.0,
                length: 4.5,
                params: IdmParams::typical(),
            }],
        };
        let next = sim_step(&state).unwrap();
        assert!((next.vehicles[0].pos - 1.2).abs() < 1e-12);
        assert_eq!(next.vehicles[0].speed, 12.0);
    }

    #[test]
    fn rest_at_jam_gap_behind_stopped_leader_is_equilibrium() {
        let state = two_vehicle_state(IdmParams::typical().s0, 0.0, 0.0);
        let next = sim_step(&state).unwrap();
        assert_eq!(next.vehicles[1].pos, state.vehicles[1].pos);
        assert_eq!(next.vehicles[1].speed, 0.0);
    }

    /// Plain scalar IDM reference, written independently of the generic
    /// implementation above: direct transliteration of the textbook
    /// formulas, no shared helpers.
    fn reference_idm_step(
        lead_pos: f64,
        lead_speed: f64,
        lead_len: f64,
        pos: f64,
        speed: f64,
        p: &IdmParams,
        dt: f64,
    ) -> (f64, f64) {
        let s = lead_pos - lead_len - pos;
        let dv = speed - lead_speed;
        let s_star =
            p.s0 + speed * p.t_headway + speed * dv / (2.0 * (p.a_max * p.b_comf).sqrt());
        let accel =
            p.a_max * (1.0 - (speed / p.v0).powi(4) - (s_star / s) * (s_star / s));
        let new_pos = pos + speed * dt;
        let new_speed = (speed + accel * dt).max(0.0);
        (new_pos, new_speed)
    }

    #[test]
    fn platoon_matches_independent_reference_over_100_steps() {
        let mut state = two_vehicle_state(12.0, 7.0, 9.5);
        let p = state.vehicles[1].params;
        let (mut rp, mut rv) = (state.vehicles[1].pos, state.vehicles[1].speed);
        let (mut lp, mut lv) = (state.vehicles[0].pos, state.vehicles[0].speed);
        for _ in 0..100 {
            let (nrp, nrv) =
                reference_idm_step(lp, lv, state.vehicles[0].length, rp, rv, &p, state.dt);
            lp += lv * state.dt;
            lv = 7.0;
            rp = nrp;
            rv = nrv;
            state = sim_step(&state).unwrap();
            assert!((state.vehicles[1].pos - rp).abs() < 1e-9);
            assert!((state.vehicles[1].speed - rv).abs() < 1e-9);
        }
    }

    #[test]
    fn sim_step_preserves_ordering() {
        let mut state = two_vehicle_state(6.0, 6.0, 11.0);
        for _ in 0..200 {
            state = match sim_step(&state) {
                Ok(s) => s,
                Err(Error::CollisionState { .. }) => return, // halted with diagnostic
                Err(e) => panic!("unexpected error {e}"),
            };
            assert!(state.vehicles[0].pos > state.vehicles[1].pos);
        }
    }

    /// Simulates a follower through free-flow acceleration, a braking
    /// approach, and steady following at two speeds: every parameter leaves
    /// a signature in the data.
    fn approach_trajectories(params: IdmParams, steps: usize) -> (Trajectory, Trajectory, f64) {
        let dt = 0.05;
        let v_fast = params.v0 * 1.25;
        let v_eq1 = params.v0 * 0.35;
        let v_eq2 = params.v0 * 0.8;
        let mut state = SimState {
            time: 0.0,
            dt,
            lead_profile: LeadProfile::Ramp {
                knots: vec![
                    (0.0, v_fast),
                    (8.0, v_fast),
                    (12.0, v_eq1),
                    (28.0, v_eq1),
                    (32.0, v_eq2),
                    (50.0, v_eq2),
                ],
            },
            vehicles: vec![
                SimVehicle {
                    id: 0,
                    pos: 44.5,
                    speed: v_fast,
                    length: 4.5,
                    params: IdmParams::typical(),
                },
                SimVehicle {
                    id: 1,
                    pos: 0.0,
                    speed: params.v0 * 0.55,
                    length: 4.5,
                    params,
                },
            ],
        };
        let mut lead_states = Vec::new();
        let mut follower_states = Vec::new();
        for _ in 0..steps {
            lead_states.push(TrajState {
                x: state.vehicles[0].pos,
                y: 0.0,
                theta: 0.0,
                v: state.vehicles[0].speed,
            });
            follower_states.push(TrajState {
                x: state.vehicles[1].pos,
                y: 0.0,
                theta: 0.0,
                v: state.vehicles[1].speed,
            });
            state = sim_step(&state).unwrap();
        }
        (
            Trajectory {
                agent_id: 1,
                leader_id: Some(0),
                dt,
                states: follower_states,
            },
            Trajectory {
                agent_id: 0,
                leader_id: None,
                dt,
                states: lead_states,
            },
            4.5,
        )
    }

    #[test]
    fn noise_free_fit_recovers_parameters_within_five_percent() {
        let truth = IdmParams {
            v0: 14.0,
            t_headway: 1.2,
            s0: 2.5,
            a_max: 1.8,
            b_comf: 2.2,
        };
        let (follower, leader, lead_len) = approach_trajectories(truth, 1000);
        let fit = estimate_params(&follower, &leader, lead_len, &FitConfig::default()).unwrap();
        let got = fit.params.to_array();
        let want = truth.to_array();
        for i in 0..CFM_PARAM_COUNT {
            let rel = (got[i] - want[i]).abs() / want[i];
            assert!(rel < 0.05, "param {i}: {} vs {} (rel {rel})", got[i], want[i]);
        }
    }

    #[test]
    fn stationary_queue_keeps_uninformed_parameters_at_init() {
        let dt = 0.1;
        let s0_true = 2.0;
        let make = |x0: f64| Trajectory {
            agent_id: 0,
            leader_id: None,
            dt,
            states: (0..30)
                .map(|_| TrajState {
                    x: x0,
                    y: 0.0,
                    theta: 0.0,
                    v: 0.0,
                })
                .collect(),
        };
        let leader = make(10.0);
        let follower = make(10.0 - 4.5 - s0_true);
        let cfg = FitConfig::default();
        let fit = estimate_params(&follower, &leader, 4.5, &cfg).unwrap();
        assert!(fit.loss < 1e-10, "loss {}", fit.loss);
        // At v = 0 the desired speed, headway and deceleration carry no
        // gradient; they stay at the initializer.
        assert_eq!(fit.params.v0, cfg.init.v0);
        assert_eq!(fit.params.t_headway, cfg.init.t_headway);
        assert_eq!(fit.params.b_comf, cfg.init.b_comf);
        assert!((fit.params.s0 - s0_true).abs() < 0.05);
    }

    #[test]
    fn noisy_fit_loss_stays_near_noise_floor() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let truth = IdmParams {
            v0: 13.0,
            t_headway: 1.4,
            s0: 2.2,
            a_max: 1.6,
            b_comf: 2.0,
        };
        let (mut follower, leader, lead_len) = approach_trajectories(truth, 1000);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.05).unwrap();
        for s in &mut follower.states {
            s.x += noise.sample(&mut rng);
        }
        let floor = fit_loss(&follower, &leader, lead_len, &truth).unwrap();
        let fit = estimate_params(&follower, &leader, lead_len, &FitConfig::default()).unwrap();
        assert!(
            fit.loss <= 2.0 * floor,
            "fit loss {} vs noise floor {floor}",
            fit.loss
        );
    }

    #[test]
    fn cosine_alpha_trivial_cases() {
        let p = IdmParams::typical();
        assert!((cosine_alpha(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        let doubled = IdmParams::from_array(p.to_array().map(|x| 2.0 * x));
        assert!((cosine_alpha(&doubled, &p).unwrap() - 1.0).abs() < 1e-12);
        // Orthogonal as raw vectors (not physical parameters).
        let a = IdmParams::from_array([1.0, 0.0, 1.0, 0.0, 0.0]);
        let b = IdmParams::from_array([0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(cosine_alpha(&a, &b).unwrap(), 0.0);
        let zero = IdmParams::from_array([0.0; 5]);
        assert!(matches!(cosine_alpha(&zero, &p), Err(Error::ZeroVector)));
    }

    #[test]
    fn blend_trivial_cases() {
        let net = Gaussian2D::new(1.0, 2.0, 0.8, 0.6, 0.2).unwrap();
        let sim_point = (3.0, 2.0);

        let at_one = blend_distributions(&net, sim_point, &1.0).unwrap();
        let o = (1.4, 1.9);
        let d_mix = mixture_density(&at_one, o).unwrap();
        let d_net = gaussian2d_density(&net, o).unwrap();
        assert!((d_mix - d_net).abs() < 1e-15);

        let at_zero = blend_distributions(&net, sim_point, &0.0).unwrap();
        let d_mix0 = mixture_density(&at_zero, o).unwrap();
        let sim = Gaussian2D::new(3.0, 2.0, 0.8, 0.6, 0.2).unwrap();
        assert!((d_mix0 - gaussian2d_density(&sim, o).unwrap()).abs() < 1e-15);

        let half = blend_distributions(&net, sim_point, &0.5).unwrap();
        let mean_x = half[0].prob * half[0].pos.mu_x + half[1].prob * half[1].pos.mu_x;
        assert!((mean_x - 2.0).abs() < 1e-15);

        assert!(matches!(
            blend_distributions(&net, sim_point, &1.5),
            Err(Error::InvalidAlpha { .. })
        ));
    }

    #[test]
    fn blend_at_alpha_one_has_zero_gradient_through_sim_side() {
        let tape = Tape::new();
        let alpha = tape.constant(1.0);
        let sim_x = tape.var(3.0);
        let sim_y = tape.var(2.0);
        let net = Gaussian2D {
            mu_x: tape.constant(1.0),
            mu_y: tape.constant(2.0),
            sigma_x: tape.constant(0.8),
            sigma_y: tape.constant(0.6),
            rho: tape.constant(0.2),
        };
        let mix = blend_distributions(&net, (sim_x.clone(), sim_y.clone()), &alpha).unwrap();
        let d = mixture_density(&mix, (1.3, 1.8)).unwrap();
        let adjoints = tape.backward(&d);
        assert_eq!(adjoints[sim_x.index()], 0.0);
        assert_eq!(adjoints[sim_y.index()], 0.0);
    }

    #[test]
    fn blended_mixture_integrates_to_one() {
        let net = Gaussian2D::new(0.0, 0.0, 1.1, 0.7, -0.3).unwrap();
        let mix = blend_distributions(&net, (2.0, -1.0), &0.35).unwrap();
        let mass = crate::gaussian::mixture_grid_mass(&mix, 220, 10.0).unwrap();
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn cfm_loss_term_cases() {
        assert_eq!(cfm_loss_term(&1.0, 0.7), 0.0);
        assert!((cfm_loss_term(&0.0, 0.1) - 0.1).abs() < 1e-15);
        assert_eq!(cfm_loss_term(&0.4, 0.0), 0.0);
        assert!(
            (cfm_loss_term_with(&0.4, 0.5, CfmPenaltyForm::PrintedAlpha) - 0.2).abs() < 1e-15
        );
    }

    proptest! {
        /// alpha(c * u, v) = alpha(u, v) for any positive rescaling c.
        #[test]
        fn cosine_alpha_scale_invariant(
            c in 0.05f64..20.0,
            v0 in 1.0f64..30.0,
            th in 0.3f64..3.0,
            s0 in 0.5f64..5.0,
            am in 0.3f64..3.0,
            bc in 0.3f64..3.0,
        ) {
            let u = IdmParams { v0, t_headway: th, s0, a_max: am, b_comf: bc };
            let v = IdmParams::typical();
            let scaled = IdmParams::from_array(u.to_array().map(|x| c * x));
            let a1 = cosine_alpha(&u, &v).unwrap();
            let a2 = cosine_alpha(&scaled, &v).unwrap();
            prop_assert!((a1 - a2).abs() < 1e-12);
        }
    }
}
