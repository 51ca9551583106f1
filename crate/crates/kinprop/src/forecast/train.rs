//! Loss assembly, the deterministic training loop, and checkpoints.
//!
//! Per agent and timestep the loss is the negative log-likelihood of the
//! best-matching component (hard assignment: the component with the lowest
//! summed NLL over the horizon) plus the car-following alignment penalty.
//! With `gamma > 0` the position density is the blend
//! `alpha * P_net + (1 - alpha) * P_sim`, where the simulator side rolls the
//! platoon forward from the last observed state with the component's
//! predicted parameters and gradients reach the network through both alpha
//! and the simulated positions. With `gamma = 0` the prior is disabled
//! entirely and training reduces to plain mixture NLL.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cfm::{
    blend_distributions, cfm_loss_term_with, cosine_alpha, estimate_params, idm_accel,
    lift_params, CfmPenaltyForm, FitConfig, IdmParams,
};
use crate::error::{Error, Result};
use crate::forecast::model::{agent_features, forward, AgentFrame, Model, ModelConfig};
use crate::gaussian::{mixture_density, nll_loss, MixtureComponent, DENSITY_FLOOR};
use crate::propagation::{Formulation, SpeedSigmaMode};
use crate::scalar::Scalar;
use crate::seed::{split, split_indexed};
use crate::trajectory::Scene;

pub const CHECKPOINT_SCHEMA: &str = "model-checkpoint-v1";

/// Full training configuration; also the CLI's config-file payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub formulation: Option<Formulation>,
    pub n_components: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub gamma: f64,
    pub data_fraction: f64,
    pub dt: f64,
    pub history_len: usize,
    pub horizon: usize,
    pub miss_threshold: f64,
    pub speed_sigma_mode: SpeedSigmaMode,
    pub penalty: CfmPenaltyForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            formulation: None,
            n_components: 3,
            hidden: vec![32, 32],
            learning_rate: 0.01,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            gamma: 0.0,
            data_fraction: 1.0,
            dt: 0.1,
            history_len: 10,
            horizon: 12,
            miss_threshold: 2.0,
            speed_sigma_mode: SpeedSigmaMode::Printed,
            penalty: CfmPenaltyForm::AlignmentGap,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            formulation: self.formulation,
            n_components: self.n_components,
            hidden: self.hidden.clone(),
            history_len: self.history_len,
            horizon: self.horizon,
            dt: self.dt,
            speed_sigma_mode: self.speed_sigma_mode,
        }
    }
}

/// Initial along-lane platoon state for the blend-path simulator.
#[derive(Debug, Clone)]
pub struct SimSetup {
    /// (position, speed, length, params) per vehicle, lead first; params are
    /// the history-estimated ones (typical where no fit was possible).
    pub vehicles: Vec<(f64, f64, f64, IdmParams)>,
    /// Index of the predicted agent within `vehicles`.
    pub agent_slot: usize,
    /// Lead vehicle speed, held constant over the prediction horizon.
    pub lead_speed: f64,
}

/// Precomputed per-agent training inputs.
#[derive(Debug, Clone)]
pub struct PreparedAgent {
    pub scene_id: u32,
    pub agent_index: usize,
    pub features: Vec<f64>,
    pub v_last: f64,
    pub length: f64,
    pub frame: AgentFrame,
    /// Agent-frame ground-truth future positions, length = horizon.
    pub targets: Vec<(f64, f64)>,
    /// History-estimated car-following parameters (None without a leader or
    /// when the fit found no information).
    pub est: Option<IdmParams>,
    pub sim: Option<SimSetup>,
}

/// Extracts features, targets and (when the prior is enabled) estimated
/// parameters plus the platoon simulator setup for every agent.
pub fn prepare_agents(scenes: &[Scene], cfg: &TrainConfig) -> Result<Vec<PreparedAgent>> {
    let mut out = Vec::new();
    for scene in scenes {
        // Along-lane platoon coordinates from the last observed states,
        // chained through the leader links (lead at 0).
        let mut lane_pos = vec![0.0; scene.agents.len()];
        for i in 1..scene.agents.len() {
            let prev = scene.agents[i - 1].last_observed();
            let cur = scene.agents[i].last_observed();
            let dist = ((prev.x - cur.x).powi(2) + (prev.y - cur.y).powi(2)).sqrt();
            lane_pos[i] = lane_pos[i - 1] - dist;
        }

        let ests: Vec<Option<IdmParams>> = scene
            .agents
            .iter()
            .map(|agent| {
                if cfg.gamma == 0.0 {
                    return None;
                }
                let leader = agent
                    .leader_id
                    .and_then(|id| scene.agents.iter().find(|a| a.agent_id == id))?;
                estimate_params(
                    &agent.history_trajectory(scene.dt),
                    &leader.history_trajectory(scene.dt),
                    leader.length,
                    // Short observed histories carry little information;
                    // a light fit is enough for the alignment target.
                    &FitConfig {
                        iters: 1500,
                        ..FitConfig::default()
                    },
                )
                .ok()
                .map(|fit| fit.params)
            })
            .collect();

        for (idx, agent) in scene.agents.iter().enumerate() {
            if agent.future.len() < cfg.horizon {
                return Err(Error::InvalidHistory {
                    reason: format!(
                        "scene {} agent {} future shorter than horizon",
                        scene.scene_id, agent.agent_id
                    ),
                });
            }
            let (features, frame, v_last) = agent_features(scene, idx, cfg.history_len);
            let targets: Vec<(f64, f64)> = agent.future[..cfg.horizon]
                .iter()
                .map(|s| frame.to_frame((s.x, s.y)))
                .collect();
            let sim = ests[idx].map(|_| SimSetup {
                vehicles: scene
                    .agents
                    .iter()
                    .enumerate()
                    .map(|(j, a)| {
                        (
                            lane_pos[j],
                            a.last_observed().v,
                            a.length,
                            ests[j].unwrap_or_else(IdmParams::typical),
                        )
                    })
                    .collect(),
                agent_slot: idx,
                lead_speed: scene.agents[0].last_observed().v,
            });
            out.push(PreparedAgent {
                scene_id: scene.scene_id,
                agent_index: idx,
                features,
                v_last,
                length: agent.length,
                frame,
                targets,
                est: ests[idx],
                sim,
            });
        }
    }
    Ok(out)
}

/// Differentiable along-lane platoon rollout; returns the predicted agent's
/// displacement from its start at every step. The gap is floored at 0.1 m
/// so the training path stays total; the standalone simulator keeps the
/// hard collision error.
fn sim_displacements<T: Scalar>(
    setup: &SimSetup,
    predicted: &[IdmParams<T>],
    dt: f64,
    horizon: usize,
    anchor: &T,
) -> Result<Vec<T>> {
    let n = setup.vehicles.len();
    let mut pos: Vec<T> = setup.vehicles.iter().map(|v| anchor.lift(v.0)).collect();
    let mut speed: Vec<T> = setup.vehicles.iter().map(|v| anchor.lift(v.1)).collect();
    let start = pos[setup.agent_slot].clone();
    let mut out = Vec::with_capacity(horizon);

    for t in 0..horizon {
        let mut accels: Vec<Option<T>> = vec![None; n];
        for j in 1..n {
            let lead_len = setup.vehicles[j - 1].2;
            let gap = (pos[j - 1].clone() - pos[j].clone()).shift(-lead_len).clamp_range(0.1, f64::INFINITY);
            let dv = speed[j].clone() - speed[j - 1].clone();
            let params = if j == setup.agent_slot {
                predicted[t].clone()
            } else {
                lift_params(&setup.vehicles[j].3, anchor)
            };
            accels[j] = Some(idm_accel(&speed[j], &gap, &dv, &params)?);
        }
        for j in 0..n {
            pos[j] = pos[j].clone() + speed[j].scale(dt);
            match &accels[j] {
                None => speed[j] = anchor.lift(setup.lead_speed),
                Some(a) => {
                    speed[j] = (speed[j].clone() + a.scale(dt)).clamp_range(0.0, f64::INFINITY)
                }
            }
        }
        out.push(pos[setup.agent_slot].clone() - start.clone());
    }
    Ok(out)
}

/// Everything the loss and the metrics need for one agent.
pub(crate) struct AgentAssembly<T> {
    /// [component][timestep] NLL of the (possibly blended) density.
    pub nll: Vec<Vec<T>>,
    /// [component][timestep] blend weights; None when the prior is off.
    pub alphas: Option<Vec<Vec<T>>>,
    /// [component][timestep] predicted (blended) mean position, agent frame.
    pub means: Vec<Vec<(f64, f64)>>,
}

pub(crate) fn assemble<T: Scalar>(
    params: &[T],
    prepared: &PreparedAgent,
    cfg: &TrainConfig,
) -> Result<AgentAssembly<T>> {
    let model_cfg = cfg.model_config();
    let out = forward(
        params,
        &model_cfg,
        &prepared.features,
        prepared.v_last,
        prepared.length,
    )?;
    let blend_on = cfg.gamma > 0.0 && prepared.est.is_some() && prepared.sim.is_some();

    let k = out.components.len();
    let mut nll = Vec::with_capacity(k);
    let mut alphas = if blend_on { Some(Vec::with_capacity(k)) } else { None };
    let mut means = Vec::with_capacity(k);

    for comp in &out.components {
        let mut comp_nll = Vec::with_capacity(cfg.horizon);
        let mut comp_alpha = Vec::with_capacity(cfg.horizon);
        let mut comp_means = Vec::with_capacity(cfg.horizon);

        if blend_on {
            let est = prepared.est.as_ref().unwrap();
            let setup = prepared.sim.as_ref().unwrap();
            let pred_params: Vec<IdmParams<T>> =
                (0..cfg.horizon).map(|t| comp.cfm_means_at(t)).collect();
            let anchor = comp.prob.clone();
            let disp = sim_displacements(setup, &pred_params, cfg.dt, cfg.horizon, &anchor)?;
            let est_t = lift_params(est, &anchor);

            for t in 0..cfg.horizon {
                let alpha = cosine_alpha(&pred_params[t], &est_t)?;
                let sim_point = (disp[t].clone(), anchor.lift(0.0));
                let pair = blend_distributions(&comp.positions[t], sim_point, &alpha)?;
                let density = mixture_density(&pair, prepared.targets[t])?;
                let p = comp.prob.clamp_range(DENSITY_FLOOR, f64::INFINITY);
                let d = density.clamp_range(DENSITY_FLOOR, f64::INFINITY);
                comp_nll.push(-p.ln() - d.ln());
                let a_v = alpha.value();
                comp_means.push((
                    a_v * comp.positions[t].mu_x.value() + (1.0 - a_v) * disp[t].value(),
                    a_v * comp.positions[t].mu_y.value(),
                ));
                comp_alpha.push(alpha);
            }
        } else {
            for t in 0..cfg.horizon {
                let mc = MixtureComponent {
                    prob: comp.prob.clone(),
                    pos: comp.positions[t].clone(),
                    cfm: comp.cfm[t].to_array(),
                };
                comp_nll.push(nll_loss(&mc, prepared.targets[t])?.value);
                comp_means.push((
                    comp.positions[t].mu_x.value(),
                    comp.positions[t].mu_y.value(),
                ));
            }
        }
        nll.push(comp_nll);
        if let Some(a) = alphas.as_mut() {
            a.push(comp_alpha);
        }
        means.push(comp_means);
    }
    Ok(AgentAssembly { nll, alphas, means })
}

/// Index of the component with the lowest summed NLL (hard assignment).
pub(crate) fn best_component<T: Scalar>(nll: &[Vec<T>]) -> usize {
    let mut best = 0;
    let mut best_sum = f64::INFINITY;
    for (k, comp) in nll.iter().enumerate() {
        let sum: f64 = comp.iter().map(|v| v.value()).sum();
        if sum < best_sum {
            best_sum = sum;
            best = k;
        }
    }
    best
}

/// One gradient-descent update on a batch of prepared agents; returns the
/// batch loss. The model is untouched if the forward pass goes non-finite.
pub fn training_step(
    model: &mut Model,
    batch: &[&PreparedAgent],
    cfg: &TrainConfig,
) -> Result<f64> {
    assert!(!batch.is_empty(), "batch must be non-empty");
    let tape = Tape::with_capacity(model.params.len() * 2 + batch.len() * 40_000);
    let vars: Vec<Var> = model.params.iter().map(|&p| tape.var(p)).collect();

    let mut total = tape.constant(0.0);
    for prepared in batch {
        let assembly = assemble(&vars, prepared, cfg)?;
        let k_star = best_component(&assembly.nll);
        let mut agent_loss = tape.constant(0.0);
        for t in 0..cfg.horizon {
            agent_loss = agent_loss + assembly.nll[k_star][t].clone();
            if let Some(alphas) = &assembly.alphas {
                agent_loss =
                    agent_loss + cfm_loss_term_with(&alphas[k_star][t], cfg.gamma, cfg.penalty);
            }
        }
        total = total + agent_loss.scale(1.0 / cfg.horizon as f64);
    }
    let loss = total.scale(1.0 / batch.len() as f64);

    if let Some(node) = tape.first_nonfinite() {
        return Err(Error::NonFiniteForward { node });
    }
    let adjoints = tape.backward(&loss);
    for (p, v) in model.params.iter_mut().zip(&vars) {
        *p -= cfg.learning_rate * adjoints[v.index()];
    }
    Ok(loss.value())
}

/// Training outcome: the fitted model and the per-epoch mean loss curve.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: Model,
    pub loss_curve: Vec<f64>,
}

fn shuffled(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Deterministic full training run.
pub fn train(scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainResult> {
    train_with_monitor(scenes, cfg, |_, _| {})
}

/// As [`train`], invoking `monitor(epoch_index, &model)` after every epoch
/// (used for held-out tracking).
pub fn train_with_monitor<F: FnMut(usize, &Model)>(
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut monitor: F,
) -> Result<TrainResult> {
    assert!(cfg.data_fraction > 0.0 && cfg.data_fraction <= 1.0);
    let n_take = ((scenes.len() as f64) * cfg.data_fraction).ceil() as usize;
    let order = shuffled(scenes.len(), split(cfg.seed, "fraction"));
    let selected: Vec<Scene> = order[..n_take.max(1)]
        .iter()
        .map(|&i| scenes[i].clone())
        .collect();

    let prepared = prepare_agents(&selected, cfg)?;
    let mut model = Model::init(cfg.model_config(), split(cfg.seed, "init"));
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffled(prepared.len(), split_indexed(cfg.seed, "shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&PreparedAgent> = chunk.iter().map(|&i| &prepared[i]).collect();
            epoch_loss += training_step(&mut model, &batch, cfg)?;
            batches += 1;
        }
        loss_curve.push(epoch_loss / batches as f64);
        monitor(epoch, &model);
    }
    Ok(TrainResult { model, loss_curve })
}

#[derive(Serialize, Deserialize)]
struct ParamArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema: String,
    config: ModelConfig,
    params: Vec<ParamArray>,
}

/// Writes the checkpoint: named parameter arrays with shapes in a
/// self-describing JSON container.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut arrays = Vec::new();
    let mut offset = 0;
    for (name, shape) in &model.layout.entries {
        let len: usize = shape.iter().product();
        arrays.push(ParamArray {
            name: name.clone(),
            shape: shape.clone(),
            data: model.params[offset..offset + len].to_vec(),
        });
        offset += len;
    }
    let file = CheckpointFile {
        schema: CHECKPOINT_SCHEMA.to_string(),
        config: model.cfg.clone(),
        params: arrays,
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Format {
        line: 0,
        reason: e.to_string(),
    })?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        line: 0,
        reason: e.to_string(),
    })?;
    if file.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Format {
            line: 0,
            reason: format!("unsupported checkpoint schema '{}'", file.schema),
        });
    }
    let mut model = Model::init(file.config, 0);
    let mut offset = 0;
    for array in &file.params {
        let len: usize = array.shape.iter().product();
        if array.data.len() != len {
            return Err(Error::Format {
                line: 0,
                reason: format!("parameter '{}' shape/data mismatch", array.name),
            });
        }
        model.params[offset..offset + len].copy_from_slice(&array.data);
        offset += len;
    }
    if offset != model.params.len() {
        return Err(Error::Format {
            line: 0,
            reason: "checkpoint parameter count mismatch".into(),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::synth::{synth_generate, SynthConfig};

    fn small_scenes(n: usize, seed: u64) -> Vec<Scene> {
        synth_generate(&SynthConfig {
            n_scenes: n,
            agents_per_scene: 2,
            seed,
            history_len: 6,
            horizon: 5,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            n_components: 2,
            hidden: vec![12],
            history_len: 6,
            horizon: 5,
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.005,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_loss_identical() {
        let scenes = small_scenes(3, 1);
        let mut cfg = small_cfg();
        cfg.learning_rate = 0.0;
        let prepared = prepare_agents(&scenes, &cfg).unwrap();
        let refs: Vec<&PreparedAgent> = prepared.iter().collect();
        let mut model = Model::init(cfg.model_config(), 9);
        let l1 = training_step(&mut model, &refs, &cfg).unwrap();
        let l2 = training_step(&mut model, &refs, &cfg).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }

    #[test]
    fn fifty_steps_reduce_loss_on_ten_scenes() {
        let scenes = small_scenes(10, 2);
        let cfg = small_cfg();
        let prepared = prepare_agents(&scenes, &cfg).unwrap();
        let refs: Vec<&PreparedAgent> = prepared.iter().collect();
        let mut model = Model::init(cfg.model_config(), 4);
        let initial = training_step(&mut model, &refs, &cfg).unwrap();
        let mut last = initial;
        for _ in 0..49 {
            last = training_step(&mut model, &refs, &cfg).unwrap();
        }
        assert!(
            last < initial,
            "loss failed to decrease: {initial} -> {last}"
        );
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let scenes = small_scenes(4, 3);
        let cfg = small_cfg();
        let a = train(&scenes, &cfg).unwrap();
        let b = train(&scenes, &cfg).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn blend_path_trains_and_produces_alphas() {
        let scenes = small_scenes(2, 5);
        let mut cfg = small_cfg();
        cfg.gamma = 0.2;
        let prepared = prepare_agents(&scenes, &cfg).unwrap();
        // Followers carry estimated parameters; the lead has none.
        assert!(prepared.iter().any(|p| p.est.is_some()));
        assert!(prepared.iter().any(|p| p.est.is_none()));
        let refs: Vec<&PreparedAgent> = prepared.iter().collect();
        let mut model = Model::init(cfg.model_config(), 6);
        let loss = training_step(&mut model, &refs, &cfg).unwrap();
        assert!(loss.is_finite());

        let follower = prepared.iter().find(|p| p.est.is_some()).unwrap();
        let assembly = assemble(&model.params, follower, &cfg).unwrap();
        let alphas = assembly.alphas.unwrap();
        for row in &alphas {
            for a in row {
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn loss_is_invariant_to_component_permutation() {
        let scenes = small_scenes(2, 7);
        let cfg = small_cfg(); // gamma = 0, formulation = none
        let prepared = prepare_agents(&scenes, &cfg).unwrap();
        let model = Model::init(cfg.model_config(), 11);

        // Swap the two components' head rows (logits and per-step blocks).
        let mut swapped = model.clone();
        let hw = swapped.layout.offset_of("head.weight").unwrap();
        let hb = swapped.layout.offset_of("head.bias").unwrap();
        let out_dim = cfg.model_config().output_dim();
        let in_dim = hw.len() / out_dim;
        let horizon = cfg.horizon;
        let block = 15 * horizon;
        let row_map = |row: usize| -> usize {
            if row < 2 {
                1 - row
            } else {
                let body = row - 2;
                let (k, rest) = (body / block, body % block);
                2 + (1 - k) * block + rest
            }
        };
        let w_src: Vec<f64> = model.params[hw.clone()].to_vec();
        let b_src: Vec<f64> = model.params[hb.clone()].to_vec();
        for row in 0..out_dim {
            let dst = row_map(row);
            swapped.params[hw.start + dst * in_dim..hw.start + (dst + 1) * in_dim]
                .copy_from_slice(&w_src[row * in_dim..(row + 1) * in_dim]);
            swapped.params[hb.start + dst] = b_src[row];
        }

        let loss_of = |m: &Model| {
            let mut total = 0.0;
            for p in &prepared {
                let assembly = assemble(&m.params, p, &cfg).unwrap();
                let k = best_component(&assembly.nll);
                let s: f64 = assembly.nll[k].iter().sum::<f64>() / cfg.horizon as f64;
                total += s;
            }
            total / prepared.len() as f64
        };
        assert!((loss_of(&model) - loss_of(&swapped)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let cfg = small_cfg();
        let model = Model::init(cfg.model_config(), 13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model.cfg, back.cfg);
        for (a, b) in model.params.iter().zip(&back.params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn nan_parameters_abort_the_step() {
        let scenes = small_scenes(1, 8);
        let cfg = small_cfg();
        let prepared = prepare_agents(&scenes, &cfg).unwrap();
        let refs: Vec<&PreparedAgent> = prepared.iter().collect();
        let mut model = Model::init(cfg.model_config(), 2);
        model.params[0] = f64::NAN;
        assert!(matches!(
            training_step(&mut model, &refs, &cfg),
            Err(Error::NonFiniteForward { .. })
        ));
    }
}
