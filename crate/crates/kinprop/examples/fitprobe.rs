// scratch probe: IDM fit identifiability with ramped three-phase scenario
use kinprop::cfm::*;
use kinprop::trajectory::{Trajectory, TrajState};

fn rich_scenario(params: IdmParams, dt: f64) -> (Trajectory, Trajectory, f64) {
    let v_fast = params.v0 * 1.25;
    let v_eq1 = params.v0 * 0.35;
    let v_eq2 = params.v0 * 0.8;
    let mut state = SimState {
        time: 0.0,
        dt,
        lead_profile: LeadProfile::Ramp {
            knots: vec![
                (0.0, v_fast), (8.0, v_fast), (12.0, v_eq1), (28.0, v_eq1),
                (32.0, v_eq2), (50.0, v_eq2),
            ],
        },
        vehicles: vec![
            SimVehicle { id: 0, pos: 44.5, speed: v_fast, length: 4.5, params: IdmParams::typical() },
            SimVehicle { id: 1, pos: 0.0, speed: params.v0 * 0.55, length: 4.5, params },
        ],
    };
    let steps = (50.0 / dt) as usize;
    let (mut ls, mut fs) = (Vec::new(), Vec::new());
    for _ in 0..steps {
        ls.push(TrajState { x: state.vehicles[0].pos, y: 0.0, theta: 0.0, v: state.vehicles[0].speed });
        fs.push(TrajState { x: state.vehicles[1].pos, y: 0.0, theta: 0.0, v: state.vehicles[1].speed });
        state = sim_step(&state).unwrap();
    }
    (
        Trajectory { agent_id: 1, leader_id: Some(0), dt, states: fs },
        Trajectory { agent_id: 0, leader_id: None, dt, states: ls },
        4.5,
    )
}

fn main() {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    for (lr, iters) in [(0.01, 10000usize), (0.005, 20000), (0.02, 10000)] {
        let mut fails = 0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let t0 = std::time::Instant::now();
        for draw in 0..20 {
            let truth = IdmParams {
                v0: rng.random_range(8.0..18.0),
                t_headway: rng.random_range(0.8..2.0),
                s0: rng.random_range(1.5..3.0),
                a_max: rng.random_range(1.0..2.5),
                b_comf: rng.random_range(1.5..3.0),
            };
            let (f, l, len) = rich_scenario(truth, 0.05);
            let cfg = FitConfig { iters, lr, ..Default::default() };
            match estimate_params(&f, &l, len, &cfg) {
                Ok(fit) => {
                    let rels: Vec<f64> = fit.params.to_array().iter().zip(truth.to_array())
                        .map(|(g, w)| (g - w).abs() / w).collect();
                    let max = rels.iter().cloned().fold(0.0, f64::max);
                    if max >= 0.05 {
                        fails += 1;
                        println!("  draw {draw:2}: rels {:?} loss {:.2e}", rels.iter().map(|r| format!("{:.1}%", 100.0*r)).collect::<Vec<_>>(), fit.loss);
                    }
                }
                Err(e) => { fails += 1; println!("  draw {draw}: ERR {e}"); }
            }
        }
        println!("lr {lr} iters {iters}: failures {fails}/20 in {:.0} s", t0.elapsed().as_secs_f64());
    }
}
