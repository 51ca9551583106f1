//! Synthetic traffic scenes: IDM platoons driven along constant-curvature
//! lanes through the bicycle model, with optional observation noise on the
//! recorded history. Deterministic given the seed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cfm::{sim_step, IdmParams, LeadProfile, SimState, SimVehicle};
use crate::error::{Error, Result};
use crate::seed::split_indexed;
use crate::trajectory::{Scene, SceneAgent, TrajState};

/// Sampling ranges for per-vehicle car-following parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IdmRanges {
    pub lo: IdmParams,
    pub hi: IdmParams,
}

impl Default for IdmRanges {
    fn default() -> Self {
        IdmRanges {
            lo: IdmParams {
                v0: 8.0,
                t_headway: 0.8,
                s0: 1.5,
                a_max: 1.0,
                b_comf: 1.5,
            },
            hi: IdmParams {
                v0: 18.0,
                t_headway: 2.0,
                s0: 3.0,
                a_max: 2.5,
                b_comf: 3.0,
            },
        }
    }
}

/// Scene generator configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub agents_per_scene: usize,
    pub seed: u64,
    /// Standard deviation of position noise added to recorded history.
    pub noise_sigma: f64,
    pub dt: f64,
    pub history_len: usize,
    pub horizon: usize,
    pub speed_range: (f64, f64),
    /// Lane curvature magnitude cap (1/m); sign and value drawn per scene.
    pub max_curvature: f64,
    pub idm_ranges: IdmRanges,
    /// 0..1 amplitude of lead-vehicle slowdown episodes.
    pub lead_excitation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_scenes: 100,
            agents_per_scene: 3,
            seed: 0,
            noise_sigma: 0.0,
            dt: 0.1,
            history_len: 10,
            horizon: 12,
            speed_range: (5.0, 13.0),
            max_curvature: 0.012,
            idm_ranges: IdmRanges::default(),
            lead_excitation: 0.5,
        }
    }
}

/// Pose on a constant-curvature lane at arc position `s`.
fn lane_pose(origin: (f64, f64), heading0: f64, curvature: f64, s: f64) -> (f64, f64, f64) {
    if curvature.abs() < 1e-9 {
        (
            origin.0 + s * heading0.cos(),
            origin.1 + s * heading0.sin(),
            heading0,
        )
    } else {
        let theta = heading0 + curvature * s;
        (
            origin.0 + (theta.sin() - heading0.sin()) / curvature,
            origin.1 - (theta.cos() - heading0.cos()) / curvature,
            theta,
        )
    }
}

/// IDM equilibrium gap at speed `v` (zero acceleration, zero closing speed).
fn equilibrium_gap(params: &IdmParams, v: f64) -> f64 {
    let s_star = params.s0 + v * params.t_headway;
    let free = (v / params.v0).powi(4);
    s_star / (1.0 - free).max(1e-3).sqrt()
}

/// Generates IDM platoon scenes. Histories get observation noise; futures
/// stay clean as ground truth.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    if cfg.n_scenes < 1 {
        return Err(Error::GenerationFailed {
            reason: "n_scenes must be >= 1".into(),
        });
    }
    let total_steps = cfg.history_len + cfg.horizon;
    let mut scenes = Vec::with_capacity(cfg.n_scenes);

    for scene_idx in 0..cfg.n_scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(split_indexed(
            cfg.seed,
            "synth-scene",
            scene_idx as u64,
        ));
        let curvature = if cfg.max_curvature <= 0.0 || rng.random_range(0.0..1.0) < 0.3 {
            0.0
        } else {
            let sign = if rng.random_range(0.0..1.0) < 0.5 {
                -1.0
            } else {
                1.0
            };
            sign * rng.random_range(0.2 * cfg.max_curvature..cfg.max_curvature)
        };
        let origin = (rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
        let heading0 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);

        let lead_speed = rng.random_range(cfg.speed_range.0..cfg.speed_range.1);
        let lead_profile = if cfg.lead_excitation == 0.0 || rng.random_range(0.0..1.0) < 0.5 {
            LeadProfile::Constant { speed: lead_speed }
        } else {
            // Ramp down to a dip speed, dwell, recover part way, dwell again.
            let dip = lead_speed * (1.0 - 0.4 * cfg.lead_excitation);
            let recover = lead_speed * (1.0 - 0.15 * cfg.lead_excitation);
            let hold0 = rng.random_range(0.5..1.5);
            let ramp1 = hold0 + rng.random_range(1.0..2.5);
            let hold1 = ramp1 + rng.random_range(2.0..5.0);
            let ramp2 = hold1 + rng.random_range(1.0..2.5);
            let end = ramp2 + 60.0;
            LeadProfile::Ramp {
                knots: vec![
                    (0.0, lead_speed),
                    (hold0, lead_speed),
                    (ramp1, dip),
                    (hold1, dip),
                    (ramp2, recover),
                    (end, recover),
                ],
            }
        };

        let lo = cfg.idm_ranges.lo.to_array();
        let hi = cfg.idm_ranges.hi.to_array();
        let mut vehicles = Vec::with_capacity(cfg.agents_per_scene);
        let mut pos = 0.0;
        for agent in 0..cfg.agents_per_scene {
            let mut arr = [0.0; 5];
            for i in 0..5 {
                arr[i] = rng.random_range(lo[i]..hi[i]);
            }
            let params = IdmParams::from_array(arr);
            let length = rng.random_range(4.0..5.0);
            let speed = if agent == 0 {
                lead_speed
            } else {
                (lead_speed * rng.random_range(0.9..1.1)).min(0.92 * params.v0)
            };
            if agent > 0 {
                let prev: &SimVehicle = &vehicles[agent - 1];
                let gap = equilibrium_gap(&params, speed) * rng.random_range(1.0..1.4);
                pos = prev.pos - prev.length - gap;
            }
            vehicles.push(SimVehicle {
                id: agent as u32,
                pos,
                speed,
                length,
                params,
            });
        }

        let mut state = SimState {
            time: 0.0,
            dt: cfg.dt,
            lead_profile: lead_profile.clone(),
            vehicles,
        };

        // Record arc positions and speeds over history + horizon.
        let mut tracks: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(total_steps); cfg.agents_per_scene];
        for step in 0..total_steps {
            for (i, v) in state.vehicles.iter().enumerate() {
                tracks[i].push((v.pos, v.speed));
            }
            if step + 1 < total_steps {
                state = sim_step(&state).map_err(|e| Error::GenerationFailed {
                    reason: format!("scene {scene_idx}: {e}"),
                })?;
            }
        }

        let noise = if cfg.noise_sigma > 0.0 {
            Some(Normal::new(0.0, cfg.noise_sigma).unwrap())
        } else {
            None
        };

        let mut agents = Vec::with_capacity(cfg.agents_per_scene);
        for (i, track) in tracks.iter().enumerate() {
            let states: Vec<TrajState> = track
                .iter()
                .map(|&(s, v)| {
                    let (x, y, theta) = lane_pose(origin, heading0, curvature, s);
                    TrajState { x, y, theta, v }
                })
                .collect();
            let mut history = states[..cfg.history_len].to_vec();
            let future = states[cfg.history_len..].to_vec();
            if let Some(n) = &noise {
                for st in &mut history {
                    st.x += n.sample(&mut rng);
                    st.y += n.sample(&mut rng);
                }
            }
            agents.push(SceneAgent {
                agent_id: i as u32,
                length: state.vehicles[i].length,
                leader_id: if i == 0 { None } else { Some(i as u32 - 1) },
                idm: Some(state.vehicles[i].params),
                lead_profile: if i == 0 { Some(lead_profile.clone()) } else { None },
                history,
                future,
            });
        }
        scenes.push(Scene {
            scene_id: scene_idx as u32,
            dt: cfg.dt,
            agents,
        });
    }
    Ok(scenes)
}
