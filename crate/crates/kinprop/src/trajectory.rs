//! Trajectories, scenes and their line-delimited serialization.
//!
//! A dataset file is line-delimited JSON, one record per line:
//!
//! * `{"record":"meta", ...}` — schema version, timestep, history/future
//!   lengths;
//! * `{"record":"agent", ...}` — per-agent length, leader link, generating
//!   car-following parameters (when known) and lead speed profile;
//! * `{"record":"state", ...}` — one agent-timestep with fields
//!   `scene_id, agent_id, t_index, x, y, theta, v, leader_id`.
//!
//! `t_index` runs over `0 .. history_len + future_len`; the first
//! `history_len` states are the observed history.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cfm::{IdmParams, LeadProfile};
use crate::error::{Error, Result};

pub const DATASET_SCHEMA: &str = "traj-scene-v1";

/// One state of one agent at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

/// An agent's state sequence at uniform timestep spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub agent_id: u32,
    pub leader_id: Option<u32>,
    pub dt: f64,
    pub states: Vec<TrajState>,
}

impl Trajectory {
    /// Cumulative chord length along the state sequence; a close proxy for
    /// arc length at small timesteps.
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.states.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in self.states.windows(2) {
            let dx = w[1].x - w[0].x;
            let dy = w[1].y - w[0].y;
            acc += (dx * dx + dy * dy).sqrt();
            out.push(acc);
        }
        out
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.v).collect()
    }
}

/// One traffic agent of a scene with observed history and ground-truth
/// future.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneAgent {
    pub agent_id: u32,
    pub length: f64,
    pub leader_id: Option<u32>,
    /// Generating car-following parameters, kept for round-trip checks.
    pub idm: Option<IdmParams>,
    /// Speed profile of the platoon lead; present on lead agents only.
    pub lead_profile: Option<LeadProfile>,
    pub history: Vec<TrajState>,
    pub future: Vec<TrajState>,
}

impl SceneAgent {
    pub fn history_trajectory(&self, dt: f64) -> Trajectory {
        Trajectory {
            agent_id: self.agent_id,
            leader_id: self.leader_id,
            dt,
            states: self.history.clone(),
        }
    }

    pub fn last_observed(&self) -> &TrajState {
        self.history.last().expect("history must be non-empty")
    }
}

/// A traffic scene: a platoon of agents on a shared lane.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u32,
    pub dt: f64,
    pub agents: Vec<SceneAgent>,
}

impl Scene {
    pub fn agent(&self, agent_id: u32) -> Option<&SceneAgent> {
        self.agents.iter().find(|a| a.agent_id == agent_id)
    }

    pub fn history_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.history.len())
    }

    pub fn future_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.future.len())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum SceneRecord {
    Meta {
        schema: String,
        dt: f64,
        history_len: usize,
        future_len: usize,
        scenes: usize,
    },
    Agent {
        scene_id: u32,
        agent_id: u32,
        length: f64,
        leader_id: Option<u32>,
        idm: Option<IdmParams>,
        lead_profile: Option<LeadProfile>,
    },
    State {
        scene_id: u32,
        agent_id: u32,
        t_index: usize,
        x: f64,
        y: f64,
        theta: f64,
        v: f64,
        leader_id: Option<u32>,
    },
}

/// Serializes scenes to the line-delimited dataset format.
pub fn scenes_to_string(scenes: &[Scene]) -> Result<String> {
    let mut out = String::new();
    let (dt, h, f) = scenes
        .first()
        .map(|s| (s.dt, s.history_len(), s.future_len()))
        .unwrap_or((0.0, 0, 0));
    let mut push = |rec: &SceneRecord| -> Result<()> {
        out.push_str(&serde_json::to_string(rec).map_err(|e| Error::Format {
            line: 0,
            reason: e.to_string(),
        })?);
        out.push('\n');
        Ok(())
    };
    push(&SceneRecord::Meta {
        schema: DATASET_SCHEMA.to_string(),
        dt,
        history_len: h,
        future_len: f,
        scenes: scenes.len(),
    })?;
    for scene in scenes {
        for agent in &scene.agents {
            push(&SceneRecord::Agent {
                scene_id: scene.scene_id,
                agent_id: agent.agent_id,
                length: agent.length,
                leader_id: agent.leader_id,
                idm: agent.idm,
                lead_profile: agent.lead_profile.clone(),
            })?;
            for (t, s) in agent.history.iter().chain(agent.future.iter()).enumerate() {
                push(&SceneRecord::State {
                    scene_id: scene.scene_id,
                    agent_id: agent.agent_id,
                    t_index: t,
                    x: s.x,
                    y: s.y,
                    theta: s.theta,
                    v: s.v,
                    leader_id: agent.leader_id,
                })?;
            }
        }
    }
    Ok(out)
}

/// Parses scenes from the line-delimited dataset format.
pub fn scenes_from_str(text: &str) -> Result<Vec<Scene>> {
    let mut scenes: Vec<Scene> = Vec::new();
    let mut meta: Option<(f64, usize, usize)> = None;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            line: line_no + 1,
            reason: e.to_string(),
        })?;
        match rec {
            SceneRecord::Meta {
                schema,
                dt,
                history_len,
                future_len,
                ..
            } => {
                if schema != DATASET_SCHEMA {
                    return Err(Error::Format {
                        line: line_no + 1,
                        reason: format!("unsupported schema '{schema}'"),
                    });
                }
                meta = Some((dt, history_len, future_len));
            }
            SceneRecord::Agent {
                scene_id,
                agent_id,
                length,
                leader_id,
                idm,
                lead_profile,
            } => {
                let (dt, _, _) = meta.ok_or(Error::Format {
                    line: line_no + 1,
                    reason: "agent record before meta".into(),
                })?;
                let scene = match scenes.iter_mut().find(|s| s.scene_id == scene_id) {
                    Some(s) => s,
                    None => {
                        scenes.push(Scene {
                            scene_id,
                            dt,
                            agents: Vec::new(),
                        });
                        scenes.last_mut().unwrap()
                    }
                };
                scene.agents.push(SceneAgent {
                    agent_id,
                    length,
                    leader_id,
                    idm,
                    lead_profile,
                    history: Vec::new(),
                    future: Vec::new(),
                });
            }
            SceneRecord::State {
                scene_id,
                agent_id,
                t_index,
                x,
                y,
                theta,
                v,
                ..
            } => {
                let (_, history_len, _) = meta.ok_or(Error::Format {
                    line: line_no + 1,
                    reason: "state record before meta".into(),
                })?;
                let agent = scenes
                    .iter_mut()
                    .find(|s| s.scene_id == scene_id)
                    .and_then(|s| s.agents.iter_mut().find(|a| a.agent_id == agent_id))
                    .ok_or(Error::Format {
                        line: line_no + 1,
                        reason: format!("state for unknown agent {agent_id}"),
                    })?;
                let state = TrajState { x, y, theta, v };
                if t_index < history_len {
                    agent.history.push(state);
                } else {
                    agent.future.push(state);
                }
            }
        }
    }
    Ok(scenes)
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let text = scenes_to_string(scenes)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let file = std::fs::File::open(path)?;
    let mut text = String::new();
    let mut reader = std::io::BufReader::new(file);
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        text.push_str(&line);
    }
    scenes_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_scene() -> Scene {
        let states: Vec<TrajState> = (0..6)
            .map(|i| TrajState {
                x: i as f64 * 0.8,
                y: 0.1 * i as f64,
                theta: 0.05,
                v: 8.0,
            })
            .collect();
        Scene {
            scene_id: 3,
            dt: 0.1,
            agents: vec![
                SceneAgent {
                    agent_id: 0,
                    length: 4.5,
                    leader_id: None,
                    idm: Some(IdmParams::typical()),
                    lead_profile: Some(LeadProfile::Constant { speed: 8.0 }),
                    history: states[..4].to_vec(),
                    future: states[4..].to_vec(),
                },
                SceneAgent {
                    agent_id: 1,
                    length: 4.2,
                    leader_id: Some(0),
                    idm: Some(IdmParams::typical()),
                    lead_profile: None,
                    history: states[..4].to_vec(),
                    future: states[4..].to_vec(),
                },
            ],
        }
    }

    #[test]
    fn roundtrip_preserves_scenes() {
        let scenes = vec![sample_scene()];
        let text = scenes_to_string(&scenes).unwrap();
        let back = scenes_from_str(&text).unwrap();
        assert_eq!(scenes, back);
    }

    #[test]
    fn serialization_is_deterministic() {
        let scenes = vec![sample_scene()];
        assert_eq!(
            scenes_to_string(&scenes).unwrap(),
            scenes_to_string(&scenes).unwrap()
        );
    }

    #[test]
    fn state_lines_carry_the_documented_fields() {
        let text = scenes_to_string(&[sample_scene()]).unwrap();
        let state_line = text
            .lines()
            .find(|l| l.contains("\"record\":\"state\""))
            .unwrap();
        for field in [
            "scene_id", "agent_id", "t_index", "x", "y", "theta", "v", "leader_id",
        ] {
            assert!(state_line.contains(field), "missing {field}: {state_line}");
        }
    }

    #[test]
    fn bad_lines_are_rejected_with_position() {
        let err = scenes_from_str("{\"record\":\"meta\"").unwrap_err();
        assert!(matches!(err, Error::Format { line: 1, .. }));
    }

    #[test]
    fn arc_lengths_accumulate_chords() {
        let traj = Trajectory {
            agent_id: 0,
            leader_id: None,
            dt: 0.1,
            states: vec![
                TrajState { x: 0.0, y: 0.0, theta: 0.0, v: 1.0 },
                TrajState { x: 3.0, y: 4.0, theta: 0.0, v: 1.0 },
                TrajState { x: 3.0, y: 5.0, theta: 0.0, v: 1.0 },
            ],
        };
        assert_eq!(traj.arc_lengths(), vec![0.0, 5.0, 6.0]);
    }
}
