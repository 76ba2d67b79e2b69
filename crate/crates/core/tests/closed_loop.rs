use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use riskmm::corridor::{CorridorConfig, CorridorSetup};
use riskmm::mm::MMStatus;
use riskmm::objective::risk_loss;
use riskmm::oracle::{check_solver, direct_moments, enumerate_scenario_probs};
use riskmm::{Formulation, MoEModel, RiskConfig};

fn small_config() -> CorridorConfig {
    let mut cfg = CorridorConfig::default();
    cfg.horizon.n = 8;
    cfg.horizon.n_b = 1;
    cfg.simulate.steps = 20;
    cfg
}

#[test]
fn far_static_human_gives_pure_tracking() {
    let mut cfg = small_config();
    cfg.human.v_x_mps = 0.0;
    cfg.human.y_gain_per_s = 0.0;
    cfg.human.init_p_x_range_m = [100.0, 100.0];
    cfg.human.init_p_y_range_m = [0.0, 0.0];
    cfg.simulate.steps = 60;
    let v_max = cfg.robot.v_x_max_mps;
    let tr = CorridorSetup::new(cfg).unwrap().simulate(3).unwrap();
    let m = tr.metrics.unwrap();
    // the robot only approaches a static human, so the closest point is the last one
    let last = tr.states.last().unwrap();
    assert!((m.min_distance - (100.0 - last[0]).hypot(last[1])).abs() < 1e-9);
    assert!(m.min_distance > 90.0, "{}", m.min_distance);
    assert_eq!(m.collisions, 0);
    let vx: Vec<f64> = tr.states.iter().map(|x| x[2]).collect();
    for w in vx.windows(2) {
        assert!(w[1] >= w[0] - 1e-4, "v_x dropped: {w:?}");
    }
    assert!((vx.last().unwrap() - v_max).abs() < 1e-2, "{vx:?}");
}

#[test]
fn zero_steps_gives_empty_trace() {
    let mut cfg = small_config();
    cfg.simulate.steps = 0;
    let tr = CorridorSetup::new(cfg).unwrap().simulate(0).unwrap();
    assert_eq!(tr.states.len(), 1);
    assert!(tr.inputs.is_empty() && tr.modes.is_empty());
    assert!(tr.metrics.is_none());
}

#[test]
fn runs_are_deterministic_per_seed() {
    let setup = CorridorSetup::new(small_config()).unwrap();
    let a = setup.simulate(11).unwrap();
    let b = setup.simulate(11).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.modes, b.modes);
    let c = setup.simulate(12).unwrap();
    assert_ne!(a.states[0], c.states[0]);
}

#[test]
fn trace_respects_boxes_and_constant_coordinate() {
    let cfg = small_config();
    let setup = CorridorSetup::new(cfg.clone()).unwrap();
    let tr = setup.simulate(5).unwrap();
    for x in &tr.states {
        assert_eq!(x[6], 1.0);
        assert!(x[1] >= cfg.robot.p_y_bounds_m[0] - 1e-5 && x[1] <= cfg.robot.p_y_bounds_m[1] + 1e-5);
        assert!(x[2] >= cfg.robot.v_x_bounds_mps[0] - 1e-5 && x[2] <= cfg.robot.v_x_bounds_mps[1] + 1e-5);
    }
    for u in &tr.inputs {
        for (i, v) in u.iter().enumerate() {
            assert!(*v >= cfg.robot.u_min_mps2[i] && *v <= cfg.robot.u_max_mps2[i]);
        }
    }
}

#[test]
fn dominant_logit_is_always_sampled() {
    let theta = DMatrix::from_row_slice(3, 1, &[0.0, 60.0, 0.0]);
    let model = MoEModel::new(theta, vec![DMatrix::identity(1, 1); 3], vec![DMatrix::zeros(1, 1); 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        assert_eq!(model.sample_mode(&[1.0], &mut rng).unwrap(), 1);
    }
}

#[test]
fn trivial_horizon_takes_one_mm_iteration() {
    let mut cfg = CorridorConfig::default();
    cfg.horizon.n = 1;
    cfg.horizon.n_b = 0;
    let (_, report) = CorridorSetup::new(cfg).unwrap().solve().unwrap();
    assert_eq!(report.status, MMStatus::Converged);
    assert_eq!(report.mm_iterations(), 1);
}

#[test]
fn returned_solution_satisfies_formulation_ordering() {
    let mut cfg = CorridorConfig::default();
    cfg.horizon.n = 6;
    cfg.horizon.n_b = 2;
    cfg.risk.gamma = 0.5;
    for f in [Formulation::Optimistic, Formulation::Pessimistic] {
        cfg.risk.formulation = f;
        let setup = CorridorSetup::new(cfg.clone()).unwrap();
        let (traj, _) = setup.solve().unwrap();
        let lp = setup.model.scenario_log_probs(&setup.tree, &traj).unwrap();
        let p = enumerate_scenario_probs(&setup.tree, &setup.model, &traj);
        let x = cfg.solve_state();
        let data = riskmm::objective::OcpData::new(&setup.tree, &setup.model, &setup.cost).unwrap();
        let obj = riskmm::objective::RiskObjective::new(data, RiskConfig::new(f, 0.5).unwrap(), &x).unwrap();
        let (_, l) = obj.scenario_terms(&traj);
        let e = direct_moments(&p, &l).expected;
        let o = risk_loss(&RiskConfig::new(Formulation::Optimistic, 0.5).unwrap(), &lp, &l).unwrap();
        let pe = risk_loss(&RiskConfig::new(Formulation::Pessimistic, 0.5).unwrap(), &lp, &l).unwrap();
        assert!(o <= e + 1e-9 && e <= pe + 1e-9, "{o} {e} {pe}");
    }
}

#[test]
fn inner_solver_matches_normal_equations() {
    for c in check_solver(10, 99) {
        assert!(c.passed, "{c:?}");
    }
}
