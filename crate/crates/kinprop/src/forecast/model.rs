//! Feed-forward encoder with a mixture-density head.
//!
//! The encoder consumes flattened agent-frame history features plus a
//! leader block; the head emits, per mixture component, one probability
//! logit and per predicted timestep five position/kinematic outputs plus
//! ten car-following parameter outputs (mean and spread for each of the
//! five). Kinematic means are parameterized as residuals from the last
//! observed state, so a zero-weight head degenerates to constant-velocity
//! extrapolation under the kinematic formulations and to last-position
//! persistence under the direct head.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfm::{IdmBounds, IdmParams};
use crate::error::Result;
use crate::gaussian::{Gaussian1D, Gaussian2D, MixtureComponent};
use crate::propagation::{
    rollout, AgentProfile, Formulation, KinematicDist, KinematicVars, SpeedSigmaMode, StepControl,
};
use crate::scalar::Scalar;
use crate::seed::split;
use crate::trajectory::Scene;

/// Softplus bias placing untrained position/velocity spreads at 1.0.
pub const SIGMA_BIAS: f64 = 0.541324854612918;
/// Softplus bias placing untrained angle spreads at 0.1 rad.
const ANGLE_SIGMA_BIAS: f64 = -2.252168478330255;
/// Softplus bias placing untrained cfm spreads at 0.5.
const CFM_SIGMA_BIAS: f64 = -0.432752056340792;

const POS_SCALE: f64 = 5.0;
const VEL_SCALE: f64 = 3.0;
const ACC_SCALE: f64 = 2.0;
const HEADING_SCALE: f64 = 0.5;
const STEER_MAX: f64 = std::f64::consts::FRAC_PI_3;
const RHO_MAX_HEAD: f64 = 0.999;
const SIGMA_THETA_CAP: f64 = 1.2;
const SIGMA_DELTA_CAP: f64 = 0.6;

/// Outputs per component per timestep: 5 position/kinematic + 5 cfm means
/// + 5 cfm spreads.
const BLOCK: usize = 15;
/// Features per history step: relative x, y and heading-aligned velocity
/// components.
const STEP_FEATURES: usize = 4;
/// Distances and speeds are divided by this before entering the encoder.
const FEATURE_SCALE: f64 = 0.1;
/// Leader block: presence flag, relative x, y, leader speed, gap.
const LEADER_FEATURES: usize = 5;

fn inv_softplus(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Model shape configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub formulation: Option<Formulation>,
    pub n_components: usize,
    pub hidden: Vec<usize>,
    pub history_len: usize,
    pub horizon: usize,
    pub dt: f64,
    pub speed_sigma_mode: SpeedSigmaMode,
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        STEP_FEATURES * self.history_len + LEADER_FEATURES
    }

    pub fn output_dim(&self) -> usize {
        self.n_components + self.n_components * self.horizon * BLOCK
    }
}

/// Named parameter arrays with shapes, flattened into one vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<(String, Vec<usize>)>,
    pub total: usize,
}

impl ParamLayout {
    fn for_config(cfg: &ModelConfig) -> Self {
        let mut dims = vec![cfg.input_dim()];
        dims.extend(cfg.hidden.iter().copied());
        dims.push(cfg.output_dim());
        let mut entries = Vec::new();
        let mut total = 0;
        for l in 0..dims.len() - 1 {
            let name = if l == dims.len() - 2 {
                "head".to_string()
            } else {
                format!("enc{l}")
            };
            entries.push((format!("{name}.weight"), vec![dims[l + 1], dims[l]]));
            total += dims[l + 1] * dims[l];
            entries.push((format!("{name}.bias"), vec![dims[l + 1]]));
            total += dims[l + 1];
        }
        ParamLayout { entries, total }
    }

    pub fn offset_of(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut offset = 0;
        for (n, shape) in &self.entries {
            let len: usize = shape.iter().product();
            if n == name {
                return Some(offset..offset + len);
            }
            offset += len;
        }
        None
    }
}

/// The forecaster: configuration, flat parameter vector, layout.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

impl Model {
    /// Xavier-style initialization; the head layer starts near zero so every
    /// formulation begins at its degenerate extrapolation.
    pub fn init(cfg: ModelConfig, seed: u64) -> Model {
        let layout = ParamLayout::for_config(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(split(seed, "model-init"));
        let mut params = vec![0.0; layout.total];
        let mut offset = 0;
        for (name, shape) in &layout.entries {
            let len: usize = shape.iter().product();
            if name.ends_with(".weight") {
                let fan_out = shape[0] as f64;
                let fan_in = shape[1] as f64;
                let mut s = (6.0 / (fan_in + fan_out)).sqrt();
                if name.starts_with("head") {
                    s *= 0.01;
                }
                for p in &mut params[offset..offset + len] {
                    *p = rng.random_range(-s..s);
                }
            }
            offset += len;
        }
        Model {
            cfg,
            layout,
            params,
        }
    }

    /// Zeroes the output layer (weights and biases); spreads then sit at
    /// their softplus-bias values and kinematic means at the observed state.
    pub fn zero_output_head(&mut self) {
        if let Some(r) = self.layout.offset_of("head.weight") {
            self.params[r].fill(0.0);
        }
        if let Some(r) = self.layout.offset_of("head.bias") {
            self.params[r].fill(0.0);
        }
    }

    pub fn forward_f64(&self, features: &[f64], v_last: f64, length: f64) -> Result<GmmOutput<f64>> {
        forward(&self.params, &self.cfg, features, v_last, length)
    }
}

/// Agent-centric frame: origin at the last observed position, x-axis along
/// the last observed heading.
#[derive(Debug, Clone, Copy)]
pub struct AgentFrame {
    pub origin: (f64, f64),
    pub heading: f64,
}

impl AgentFrame {
    pub fn to_frame(&self, p: (f64, f64)) -> (f64, f64) {
        let dx = p.0 - self.origin.0;
        let dy = p.1 - self.origin.1;
        let (s, c) = self.heading.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn to_world(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (
            self.origin.0 + c * p.0 - s * p.1,
            self.origin.1 + s * p.0 + c * p.1,
        )
    }
}

/// Flattened history features for one agent plus its frame and last speed.
pub fn agent_features(
    scene: &Scene,
    agent_index: usize,
    history_len: usize,
) -> (Vec<f64>, AgentFrame, f64) {
    let agent = &scene.agents[agent_index];
    assert!(
        agent.history.len() >= history_len,
        "history shorter than the configured window"
    );
    let tail = &agent.history[agent.history.len() - history_len..];
    let last = tail.last().unwrap();
    let frame = AgentFrame {
        origin: (last.x, last.y),
        heading: last.theta,
    };
    let mut features = Vec::with_capacity(STEP_FEATURES * history_len + LEADER_FEATURES);
    for s in tail {
        let (fx, fy) = frame.to_frame((s.x, s.y));
        let dtheta = s.theta - last.theta;
        features.push(fx * FEATURE_SCALE);
        features.push(fy * FEATURE_SCALE);
        features.push(s.v * dtheta.cos() * FEATURE_SCALE);
        features.push(s.v * dtheta.sin() * FEATURE_SCALE);
    }
    match agent
        .leader_id
        .and_then(|id| scene.agents.iter().find(|a| a.agent_id == id))
    {
        Some(leader) => {
            let ll = leader.history.last().unwrap();
            let (rx, ry) = frame.to_frame((ll.x, ll.y));
            let gap = ((ll.x - last.x).powi(2) + (ll.y - last.y).powi(2)).sqrt() - leader.length;
            features.extend_from_slice(&[
                1.0,
                rx * FEATURE_SCALE,
                ry * FEATURE_SCALE,
                ll.v * FEATURE_SCALE,
                gap * FEATURE_SCALE,
            ]);
        }
        None => features.extend_from_slice(&[0.0; LEADER_FEATURES]),
    }
    (features, frame, last.v)
}

/// One mixture component's full prediction.
#[derive(Debug, Clone)]
pub struct ComponentOutput<T> {
    pub prob: T,
    /// Agent-frame position Gaussians, one per predicted timestep.
    pub positions: Vec<Gaussian2D<T>>,
    /// Predicted per-timestep kinematic distributions (empty for the
    /// direct head).
    pub controls: Vec<StepControl<T>>,
    /// Per-timestep car-following parameter Gaussians.
    pub cfm: Vec<IdmParams<Gaussian1D<T>>>,
}

impl<T: Scalar> ComponentOutput<T> {
    pub fn cfm_means_at(&self, t: usize) -> IdmParams<T> {
        let g = &self.cfm[t];
        IdmParams {
            v0: g.v0.mu.clone(),
            t_headway: g.t_headway.mu.clone(),
            s0: g.s0.mu.clone(),
            a_max: g.a_max.mu.clone(),
            b_comf: g.b_comf.mu.clone(),
        }
    }
}

/// Mixture head output for one agent: K components over the horizon.
#[derive(Debug, Clone)]
pub struct GmmOutput<T = f64> {
    pub components: Vec<ComponentOutput<T>>,
}

impl<T: Scalar> GmmOutput<T> {
    /// The mixture at one timestep, in the shape the core density ops take.
    pub fn mixture_at(&self, t: usize) -> Vec<MixtureComponent<T>> {
        self.components
            .iter()
            .map(|c| MixtureComponent {
                prob: c.prob.clone(),
                pos: c.positions[t].clone(),
                cfm: c.cfm[t].to_array(),
            })
            .collect()
    }
}

fn affine<T: Scalar>(
    params: &[T],
    offset: &mut usize,
    input: AffineInput<'_, T>,
    out_dim: usize,
    in_dim: usize,
) -> Vec<T> {
    let w = &params[*offset..*offset + out_dim * in_dim];
    *offset += out_dim * in_dim;
    let b = &params[*offset..*offset + out_dim];
    *offset += out_dim;
    let mut out = Vec::with_capacity(out_dim);
    for j in 0..out_dim {
        let mut acc = b[j].clone();
        match input {
            AffineInput::Constants(x) => {
                for i in 0..in_dim {
                    acc = acc + w[j * in_dim + i].scale(x[i]);
                }
            }
            AffineInput::Scalars(x) => {
                for i in 0..in_dim {
                    acc = acc + w[j * in_dim + i].clone() * x[i].clone();
                }
            }
        }
        out.push(acc);
    }
    out
}

enum AffineInput<'a, T> {
    Constants(&'a [f64]),
    Scalars(&'a [T]),
}

/// Runs the network and assembles position distributions for every mixture
/// component, recording everything on the caller's scalar context.
///
/// For kinematic formulations the predicted per-timestep distributions are
/// pushed through the propagation rollout starting from the observed state
/// (zero spread); the head's correlation output replaces the pass-through
/// rho at every step. `length` is the agent length feeding the bicycle
/// turn-rate term.
pub fn forward<T: Scalar>(
    params: &[T],
    cfg: &ModelConfig,
    features: &[f64],
    v_last: f64,
    length: f64,
) -> Result<GmmOutput<T>> {
    assert_eq!(features.len(), cfg.input_dim(), "feature length mismatch");
    assert!(!params.is_empty());
    let anchor = params[0].clone();

    // Encoder.
    let mut offset = 0;
    let mut dims = vec![cfg.input_dim()];
    dims.extend(cfg.hidden.iter().copied());
    let mut h: Vec<T> = Vec::new();
    for l in 0..dims.len() - 1 {
        let out = affine(
            params,
            &mut offset,
            if l == 0 {
                AffineInput::Constants(features)
            } else {
                AffineInput::Scalars(&h)
            },
            dims[l + 1],
            dims[l],
        );
        h = out.into_iter().map(|v| v.tanh()).collect();
    }
    let last_hidden = *dims.last().unwrap();
    let raw = affine(
        params,
        &mut offset,
        if cfg.hidden.is_empty() {
            AffineInput::Constants(features)
        } else {
            AffineInput::Scalars(&h)
        },
        cfg.output_dim(),
        if cfg.hidden.is_empty() {
            cfg.input_dim()
        } else {
            last_hidden
        },
    );
    debug_assert_eq!(offset, params.len());

    // Component probabilities: shift-invariant softmax over the K logits.
    let k = cfg.n_components;
    let max_logit = raw[..k]
        .iter()
        .map(|v| v.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<T> = raw[..k].iter().map(|l| l.shift(-max_logit).exp()).collect();
    let mut denom = anchor.lift(0.0);
    for e in &exps {
        denom = denom + e.clone();
    }
    let probs: Vec<T> = exps.into_iter().map(|e| e / denom.clone()).collect();

    let bounds = IdmBounds::default();
    let typical = IdmParams::typical().to_array();
    let lo = bounds.lo.to_array();
    let hi = bounds.hi.to_array();

    let profile = AgentProfile::new(length, cfg.dt).expect("valid profile");
    let mut components = Vec::with_capacity(k);
    for ki in 0..k {
        let mut controls: Vec<StepControl<T>> = Vec::with_capacity(cfg.horizon);
        let mut rhos: Vec<T> = Vec::with_capacity(cfg.horizon);
        let mut cfm: Vec<IdmParams<Gaussian1D<T>>> = Vec::with_capacity(cfg.horizon);
        let mut direct_positions: Vec<Gaussian2D<T>> = Vec::with_capacity(cfg.horizon);

        for t in 0..cfg.horizon {
            let base = k + (ki * cfg.horizon + t) * BLOCK;
            let r = &raw[base..base + BLOCK];
            let rho = r[4].tanh().scale(RHO_MAX_HEAD);

            match cfg.formulation {
                None => {
                    direct_positions.push(Gaussian2D {
                        mu_x: r[0].scale(POS_SCALE),
                        mu_y: r[1].scale(POS_SCALE),
                        sigma_x: r[2].shift(SIGMA_BIAS).softplus(),
                        sigma_y: r[3].shift(SIGMA_BIAS).softplus(),
                        rho: rho.clone(),
                    });
                }
                Some(Formulation::F1) => controls.push(StepControl::F1 {
                    vel_x: Gaussian1D {
                        mu: r[0].scale(VEL_SCALE).shift(v_last),
                        sigma: r[2].shift(SIGMA_BIAS).softplus(),
                    },
                    vel_y: Gaussian1D {
                        mu: r[1].scale(VEL_SCALE),
                        sigma: r[3].shift(SIGMA_BIAS).softplus(),
                    },
                }),
                Some(Formulation::F2) => controls.push(StepControl::F2 {
                    acc_x: Gaussian1D {
                        mu: r[0].scale(ACC_SCALE),
                        sigma: r[2].shift(SIGMA_BIAS).softplus(),
                    },
                    acc_y: Gaussian1D {
                        mu: r[1].scale(ACC_SCALE),
                        sigma: r[3].shift(SIGMA_BIAS).softplus(),
                    },
                }),
                Some(Formulation::F3) => controls.push(StepControl::F3 {
                    speed: Gaussian1D {
                        mu: r[0].scale(VEL_SCALE).shift(v_last),
                        sigma: r[2].shift(SIGMA_BIAS).softplus(),
                    },
                    heading: Gaussian1D {
                        mu: r[1].scale(HEADING_SCALE),
                        sigma: r[3]
                            .shift(ANGLE_SIGMA_BIAS)
                            .softplus()
                            .clamp_range(0.0, SIGMA_THETA_CAP),
                    },
                }),
                Some(Formulation::F4) => controls.push(StepControl::F4 {
                    accel: Gaussian1D {
                        mu: r[0].scale(ACC_SCALE),
                        sigma: r[2].shift(SIGMA_BIAS).softplus(),
                    },
                    steer: Gaussian1D {
                        mu: r[1].tanh().scale(STEER_MAX),
                        sigma: r[3]
                            .shift(ANGLE_SIGMA_BIAS)
                            .softplus()
                            .clamp_range(0.0, SIGMA_DELTA_CAP),
                    },
                }),
            }
            rhos.push(rho);

            let mut entries: Vec<Gaussian1D<T>> = Vec::with_capacity(5);
            for i in 0..5 {
                let mu = r[5 + i]
                    .shift(inv_softplus(typical[i]))
                    .softplus()
                    .clamp_range(lo[i], hi[i]);
                let sigma = r[10 + i].shift(CFM_SIGMA_BIAS).softplus();
                entries.push(Gaussian1D { mu, sigma });
            }
            cfm.push(IdmParams::from_array([
                entries[0].clone(),
                entries[1].clone(),
                entries[2].clone(),
                entries[3].clone(),
                entries[4].clone(),
            ]));
        }

        let mut positions = match cfg.formulation {
            None => direct_positions,
            Some(f) => {
                let zero = anchor.lift(0.0);
                let point = Gaussian2D {
                    mu_x: zero.clone(),
                    mu_y: zero.clone(),
                    sigma_x: zero.clone(),
                    sigma_y: zero.clone(),
                    rho: zero.clone(),
                };
                let det = |v: f64| Gaussian1D {
                    mu: anchor.lift(v),
                    sigma: anchor.lift(0.0),
                };
                let vars = match f {
                    Formulation::F1 => KinematicVars::F1 {
                        vel_x: det(v_last),
                        vel_y: det(0.0),
                    },
                    Formulation::F2 => KinematicVars::F2 {
                        vel_x: det(v_last),
                        vel_y: det(0.0),
                        acc_x: det(0.0),
                        acc_y: det(0.0),
                    },
                    Formulation::F3 => KinematicVars::F3 {
                        speed: det(v_last),
                        heading: det(0.0),
                    },
                    Formulation::F4 => KinematicVars::F4 {
                        speed: det(v_last),
                        heading: det(0.0),
                        accel: det(0.0),
                        steer: det(0.0),
                    },
                };
                let initial = KinematicDist {
                    position: point,
                    vars,
                };
                rollout(
                    &initial,
                    &controls,
                    &profile,
                    cfg.horizon,
                    cfg.speed_sigma_mode,
                )?
            }
        };
        for (pos, rho) in positions.iter_mut().zip(rhos) {
            pos.rho = rho;
        }

        components.push(ComponentOutput {
            prob: probs[ki].clone(),
            positions,
            controls,
            cfm,
        });
    }
    Ok(GmmOutput { components })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::synth::{synth_generate, SynthConfig};
    use proptest::prelude::*;

    fn cfg(formulation: Option<Formulation>) -> ModelConfig {
        ModelConfig {
            formulation,
            n_components: 3,
            hidden: vec![16],
            history_len: 6,
            horizon: 5,
            dt: 0.1,
            speed_sigma_mode: SpeedSigmaMode::Printed,
        }
    }

    fn stationary_features(c: &ModelConfig) -> Vec<f64> {
        vec![0.0; c.input_dim()]
    }

    #[test]
    fn zeroed_head_f1_keeps_stationary_agent_at_origin() {
        let c = cfg(Some(Formulation::F1));
        let mut model = Model::init(c.clone(), 1);
        model.zero_output_head();
        let out = model
            .forward_f64(&stationary_features(&c), 0.0, 4.5)
            .unwrap();
        for comp in &out.components {
            assert!((comp.prob - 1.0 / 3.0).abs() < 1e-12);
            for (t, pos) in comp.positions.iter().enumerate() {
                assert!(pos.mu_x.abs() < 1e-12);
                assert!(pos.mu_y.abs() < 1e-12);
                // sigma_v = softplus(bias) = 1, so sigma_x(t) = sqrt(t+1) dt.
                let expected = ((t + 1) as f64).sqrt() * c.dt;
                assert!(
                    (pos.sigma_x - expected).abs() < 1e-9,
                    "t {t}: {} vs {expected}",
                    pos.sigma_x
                );
            }
        }
    }

    #[test]
    fn zeroed_head_extrapolates_constant_velocity() {
        for f in [Formulation::F1, Formulation::F2, Formulation::F3, Formulation::F4] {
            let c = cfg(Some(f));
            let mut model = Model::init(c.clone(), 1);
            model.zero_output_head();
            let v = 8.0;
            let out = model.forward_f64(&stationary_features(&c), v, 4.5).unwrap();
            for (t, pos) in out.components[0].positions.iter().enumerate() {
                let expected = v * c.dt * (t + 1) as f64;
                assert!(
                    (pos.mu_x - expected).abs() < 1e-9,
                    "{f:?} t {t}: {} vs {expected}",
                    pos.mu_x
                );
                assert!(pos.mu_y.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn direct_and_f1_heads_have_identical_shapes() {
        let direct = cfg(None);
        let f1 = cfg(Some(Formulation::F1));
        assert_eq!(direct.output_dim(), f1.output_dim());
        let scenes = synth_generate(&SynthConfig {
            n_scenes: 1,
            agents_per_scene: 2,
            history_len: 6,
            horizon: 5,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let (features, _, v_last) = agent_features(&scenes[0], 1, 6);
        let m_direct = Model::init(direct.clone(), 7);
        let m_f1 = Model::init(f1.clone(), 7);
        let o1 = m_direct.forward_f64(&features, v_last, 4.5).unwrap();
        let o2 = m_f1.forward_f64(&features, v_last, 4.5).unwrap();
        assert_eq!(o1.components.len(), o2.components.len());
        for (a, b) in o1.components.iter().zip(&o2.components) {
            assert_eq!(a.positions.len(), b.positions.len());
            assert_eq!(a.cfm.len(), b.cfm.len());
        }
    }

    #[test]
    fn layout_total_matches_params() {
        let c = cfg(Some(Formulation::F3));
        let model = Model::init(c, 5);
        assert_eq!(model.params.len(), model.layout.total);
        let head = model.layout.offset_of("head.bias").unwrap();
        assert_eq!(head.end, model.layout.total);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        /// Arbitrary finite parameters always produce a valid mixture:
        /// probability simplex and strictly positive spreads.
        #[test]
        fn head_always_emits_valid_mixtures(seed in 0u64..1000, scale in 0.1f64..30.0) {
            let c = cfg(Some(Formulation::F3));
            let mut model = Model::init(c.clone(), seed);
            for p in &mut model.params {
                *p *= scale;
            }
            let out = model.forward_f64(&stationary_features(&c), 7.0, 4.5).unwrap();
            let mut prob_sum = 0.0;
            for comp in &out.components {
                prob_sum += comp.prob;
                prop_assert!(comp.prob >= 0.0);
                for pos in &comp.positions {
                    prop_assert!(pos.sigma_x > 0.0);
                    prop_assert!(pos.sigma_y > 0.0);
                    prop_assert!(pos.rho.abs() <= 0.999);
                }
                for g in &comp.cfm {
                    for e in g.to_array() {
                        prop_assert!(e.mu > 0.0);
                        prop_assert!(e.sigma > 0.0);
                    }
                }
            }
            prop_assert!((prob_sum - 1.0).abs() < 1e-9);
        }
    }
}
