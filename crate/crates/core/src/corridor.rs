//! Robot/human corridor benchmark.
//!
//! Joint state `(p_x, p_y, v_x, v_y, p_x^h, p_y^h, 1)`. The robot is a
//! forward-Euler double integrator; the human walks at constant `v_x^h` and
//! relaxes its lateral position toward a mode-dependent reference. The
//! trailing constant coordinate carries every affine term, so each mode is a
//! plain linear map.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mm::{run_closed_loop, solve_ocp, ClosedLoopTrace, MMConfig, MetricSpec, Ocp, SolverReport};
use crate::moe::{MoEModel, TrajectoryBundle};
use crate::objective::{CollisionSpec, CostSpec, Formulation, PenaltyKind, Reference, RiskConfig};
use crate::solver::{ConstraintSet, StateBox};
use crate::tree::ScenarioTree;

pub const N_X: usize = 7;
pub const N_U: usize = 2;

const PX: usize = 0;
const PY: usize = 1;
const VX: usize = 2;
const VY: usize = 3;
const HX: usize = 4;
const HY: usize = 5;
const ONE: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotConfig {
    pub u_min_mps2: [f64; 2],
    pub u_max_mps2: [f64; 2],
    pub p_y_bounds_m: [f64; 2],
    pub v_x_bounds_mps: [f64; 2],
    pub v_y_bounds_mps: [f64; 2],
    pub v_x_max_mps: f64,
    /// `(p_x, p_y, v_x, v_y)`.
    pub init_state: [f64; 4],
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            u_min_mps2: [-1.0, -0.6],
            u_max_mps2: [1.0, 0.6],
            p_y_bounds_m: [-1.5, 1.5],
            v_x_bounds_mps: [0.0, 1.5],
            v_y_bounds_mps: [-1.0, 1.0],
            v_x_max_mps: 1.5,
            init_state: [-3.0, 0.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanConfig {
    pub v_x_mps: f64,
    pub y_gain_per_s: f64,
    /// Lateral reference per mode.
    pub y_refs_m: Vec<f64>,
    pub init_p_x_range_m: [f64; 2],
    pub init_p_y_range_m: [f64; 2],
}

impl Default for HumanConfig {
    fn default() -> Self {
        Self {
            v_x_mps: -0.8,
            y_gain_per_s: 0.3,
            y_refs_m: vec![0.0, -1.0, 1.0],
            init_p_x_range_m: [1.5, 2.5],
            init_p_y_range_m: [-0.5, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    /// One row per mode, acting on `(p_x − p_x^h, p_y − p_y^h, 1)`.
    pub theta: Vec<[f64; 3]>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            theta: vec![[-5.0, -1.0, -1.0], [0.0, 1.0, -1.0], [-12.5, 0.0, 0.0]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionKind {
    ExpNorm,
    ExpSquaredNorm,
    InversePower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollisionConfig {
    pub enabled: bool,
    pub kind: CollisionKind,
    pub alpha: f64,
    pub beta: f64,
    /// Exponent of the inverse-power kind.
    pub power: f64,
    /// Weight matrix of the squared-norm kind.
    pub sigma: [[f64; 2]; 2],
}

impl Default for CollisionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            kind: CollisionKind::ExpNorm,
            alpha: 500.0,
            beta: 5.0,
            power: 1.0,
            sigma: [[1.0, 0.0], [0.0, 1.0]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    /// Weights on `(p_x, p_y, v_x, v_y)`.
    pub q_diag: [f64; 4],
    pub r_diag: [f64; 2],
    pub qf_scale: f64,
    pub collision: CollisionConfig,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            q_diag: [50.0, 50.0, 2.0, 2.0],
            r_diag: [2.0, 2.0],
            qf_scale: 5.0,
            collision: CollisionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonConfig {
    pub n: usize,
    pub n_b: usize,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self { n: 15, n_b: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskSection {
    pub formulation: Formulation,
    pub gamma: f64,
}

impl Default for RiskSection {
    fn default() -> Self {
        Self {
            formulation: Formulation::Optimistic,
            gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmSection {
    pub eps_tol: f64,
    pub max_iters: usize,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    pub loss_decrease_tol: Option<f64>,
}

impl Default for MmSection {
    fn default() -> Self {
        let d = MMConfig::default();
        Self {
            eps_tol: d.eps_tol,
            max_iters: d.max_iters,
            inner_tol: d.inner_tol,
            inner_max_iters: d.inner_max_iters,
            loss_decrease_tol: d.loss_decrease_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    /// Joint state without (6 entries) or with (7) the constant coordinate.
    pub initial_state: Vec<f64>,
    /// Constant input used at every node as the initial guess.
    pub initial_input_mps2: [f64; 2],
}

impl Default for SolveSection {
    fn default() -> Self {
        Self {
            initial_state: vec![-2.5, 0.0, 1.0, 0.0, 1.0, 0.2],
            initial_input_mps2: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub steps: usize,
    pub repeats: usize,
    pub seed: u64,
    /// MM iterations per closed-loop step; `None` uses `mm.max_iters`.
    pub max_mm_iters: Option<usize>,
    pub collision_distance_m: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            steps: 100,
            repeats: 10,
            seed: 0,
            max_mm_iters: Some(1),
            collision_distance_m: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub gammas: Vec<f64>,
    pub formulations: Vec<Formulation>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            gammas: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2],
            formulations: vec![Formulation::Optimistic, Formulation::Pessimistic],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorConfig {
    pub dt_s: f64,
    pub robot: RobotConfig,
    pub human: HumanConfig,
    pub gate: GateConfig,
    pub cost: CostConfig,
    pub horizon: HorizonConfig,
    pub risk: RiskSection,
    pub mm: MmSection,
    pub solve: SolveSection,
    pub simulate: SimulateSection,
    pub sweep: SweepSection,
}

impl Default for CorridorConfig {
    fn default() -> Self {
        Self {
            dt_s: 0.1,
            robot: RobotConfig::default(),
            human: HumanConfig::default(),
            gate: GateConfig::default(),
            cost: CostConfig::default(),
            horizon: HorizonConfig::default(),
            risk: RiskSection::default(),
            mm: MmSection::default(),
            solve: SolveSection::default(),
            simulate: SimulateSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn all_finite<'a>(vals: impl IntoIterator<Item = &'a f64>) -> bool {
    vals.into_iter().all(|v| v.is_finite())
}

impl CorridorConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let r = &self.robot;
        let h = &self.human;
        let c = &self.cost;
        let scalars = [
            self.dt_s,
            r.v_x_max_mps,
            h.v_x_mps,
            h.y_gain_per_s,
            c.qf_scale,
            c.collision.alpha,
            c.collision.beta,
            c.collision.power,
            self.risk.gamma,
            self.mm.eps_tol,
            self.mm.inner_tol,
            self.simulate.collision_distance_m,
        ];
        if !all_finite(&scalars)
            || !all_finite(r.u_min_mps2.iter().chain(&r.u_max_mps2).chain(&r.init_state))
            || !all_finite(r.p_y_bounds_m.iter().chain(&r.v_x_bounds_mps).chain(&r.v_y_bounds_mps))
            || !all_finite(h.y_refs_m.iter().chain(&h.init_p_x_range_m).chain(&h.init_p_y_range_m))
            || !all_finite(self.gate.theta.iter().flatten())
            || !all_finite(c.q_diag.iter().chain(&c.r_diag).chain(c.collision.sigma.iter().flatten()))
            || !all_finite(&self.solve.initial_state)
            || !all_finite(&self.sweep.gammas)
        {
            return bad("all numeric values must be finite");
        }
        if self.dt_s <= 0.0 {
            return bad("dt_s must be positive");
        }
        if self.gate.theta.len() != 3 || h.y_refs_m.len() != 3 {
            return bad("the corridor model has exactly 3 modes (gate.theta and human.y_refs_m)");
        }
        let ordered = |b: &[f64; 2]| b[0] <= b[1];
        if !(ordered(&r.p_y_bounds_m)
            && ordered(&r.v_x_bounds_mps)
            && ordered(&r.v_y_bounds_mps)
            && ordered(&h.init_p_x_range_m)
            && ordered(&h.init_p_y_range_m)
            && r.u_min_mps2.iter().zip(&r.u_max_mps2).all(|(a, b)| a <= b))
        {
            return bad("bounds must satisfy lower <= upper");
        }
        if c.q_diag.iter().chain(&c.r_diag).any(|v| *v < 0.0) || c.qf_scale < 0.0 {
            return bad("cost weights must be nonnegative");
        }
        if self.horizon.n == 0 || self.horizon.n_b > self.horizon.n {
            return bad("horizon needs n >= 1 and n_b <= n");
        }
        if 3usize.checked_pow(self.horizon.n_b as u32).is_none_or(|s| s > 3usize.pow(8)) {
            return bad("branching horizon too large");
        }
        if !(self.solve.initial_state.len() == 6 || self.solve.initial_state.len() == 7) {
            return bad("solve.initial_state needs 6 or 7 entries");
        }
        if self.solve.initial_state.len() == 7 && self.solve.initial_state[6] != 1.0 {
            return bad("the constant coordinate of solve.initial_state must be 1");
        }
        if self.risk.formulation != Formulation::Neutral && self.risk.gamma <= 0.0 {
            return bad("risk.gamma must be positive");
        }
        if self.mm.eps_tol <= 0.0 || self.mm.inner_tol <= 0.0 || self.mm.inner_max_iters == 0 {
            return bad("MM tolerances and budgets must be positive");
        }
        if self.mm.loss_decrease_tol.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
            return bad("mm.loss_decrease_tol must be positive");
        }
        if self.sweep.gammas.iter().any(|g| *g <= 0.0) {
            return bad("sweep gammas must be positive");
        }
        Ok(())
    }

    pub fn tree(&self) -> Result<ScenarioTree> {
        ScenarioTree::build(3, self.horizon.n, self.horizon.n_b)
    }

    /// Per-mode joint dynamics and the gate lifted to the joint state.
    pub fn model(&self) -> Result<MoEModel> {
        let dt = self.dt_s;
        let h = &self.human;
        let mut readout = DMatrix::zeros(3, N_X);
        readout[(0, PX)] = 1.0;
        readout[(0, HX)] = -1.0;
        readout[(1, PY)] = 1.0;
        readout[(1, HY)] = -1.0;
        readout[(2, ONE)] = 1.0;
        let theta_small = DMatrix::from_fn(3, 3, |i, j| self.gate.theta[i][j]);
        let theta = theta_small * readout;

        let mut a_base = DMatrix::<f64>::identity(N_X, N_X);
        a_base[(PX, VX)] = dt;
        a_base[(PY, VY)] = dt;
        a_base[(HX, ONE)] = dt * h.v_x_mps;
        a_base[(HY, HY)] = 1.0 - h.y_gain_per_s * dt;
        let mut b = DMatrix::zeros(N_X, N_U);
        b[(VX, 0)] = dt;
        b[(VY, 1)] = dt;
        let a = h
            .y_refs_m
            .iter()
            .map(|y| {
                let mut a = a_base.clone();
                a[(HY, ONE)] = h.y_gain_per_s * dt * y;
                a
            })
            .collect();
        MoEModel::new(theta, a, vec![b; 3])
    }

    pub fn cost(&self) -> CostSpec {
        let c = &self.cost;
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&c.q_diag));
        let collision = c.collision.enabled.then(|| {
            let mut selector = DMatrix::zeros(2, N_X);
            selector[(0, PX)] = 1.0;
            selector[(0, HX)] = -1.0;
            selector[(1, PY)] = 1.0;
            selector[(1, HY)] = -1.0;
            CollisionSpec {
                alpha: c.collision.alpha,
                beta: c.collision.beta,
                kind: match c.collision.kind {
                    CollisionKind::ExpNorm => PenaltyKind::ExpNorm,
                    CollisionKind::ExpSquaredNorm => PenaltyKind::ExpSquaredNorm {
                        sigma: c.collision.sigma,
                    },
                    CollisionKind::InversePower => PenaltyKind::InversePower {
                        power: c.collision.power,
                    },
                },
                selector,
            }
        });
        CostSpec {
            tracked: vec![PX, PY, VX, VY],
            qf: &q * c.qf_scale,
            q,
            r: DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&c.r_diag)),
            reference: Reference::Ramp {
                position: PX,
                speed: self.robot.v_x_max_mps,
                dt: self.dt_s,
            },
            collision,
        }
    }

    pub fn constraints(&self) -> ConstraintSet {
        let r = &self.robot;
        let sb = |index, b: [f64; 2]| StateBox {
            index,
            lower: b[0],
            upper: b[1],
        };
        ConstraintSet {
            u_lo: r.u_min_mps2.to_vec(),
            u_hi: r.u_max_mps2.to_vec(),
            state_boxes: vec![sb(PY, r.p_y_bounds_m), sb(VX, r.v_x_bounds_mps), sb(VY, r.v_y_bounds_mps)],
        }
    }

    pub fn risk(&self) -> RiskConfig {
        RiskConfig {
            gamma: self.risk.gamma,
            formulation: self.risk.formulation,
        }
    }

    pub fn mm_config(&self) -> MMConfig {
        MMConfig {
            eps_tol: self.mm.eps_tol,
            max_iters: self.mm.max_iters,
            loss_decrease_tol: self.mm.loss_decrease_tol,
            inner_tol: self.mm.inner_tol,
            inner_max_iters: self.mm.inner_max_iters,
        }
    }

    pub fn metric_spec(&self) -> MetricSpec {
        MetricSpec {
            velocity: (VX, VY),
            v_ref: self.robot.v_x_max_mps,
            agent_position: (PX, PY),
            obstacle_position: (HX, HY),
            collision_distance: self.simulate.collision_distance_m,
        }
    }

    /// The open-loop measured state with the constant coordinate appended.
    pub fn solve_state(&self) -> Vec<f64> {
        let mut x = self.solve.initial_state.clone();
        if x.len() == 6 {
            x.push(1.0);
        }
        x
    }

    /// Robot at its configured start, human drawn from the init ranges.
    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let draw = |rng: &mut R, r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..r[1])
            }
        };
        let hx = draw(rng, self.human.init_p_x_range_m);
        let hy = draw(rng, self.human.init_p_y_range_m);
        let [px, py, vx, vy] = self.robot.init_state;
        vec![px, py, vx, vy, hx, hy, 1.0]
    }
}

/// Everything needed to solve or simulate one configuration.
#[derive(Debug, Clone)]
pub struct CorridorSetup {
    pub config: CorridorConfig,
    pub tree: ScenarioTree,
    pub model: MoEModel,
    pub cost: CostSpec,
    pub constraints: ConstraintSet,
}

impl CorridorSetup {
    pub fn new(config: CorridorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            tree: config.tree()?,
            model: config.model()?,
            cost: config.cost(),
            constraints: config.constraints(),
            config,
        })
    }

    pub fn ocp(&self, mm: MMConfig) -> Ocp<'_> {
        Ocp {
            tree: &self.tree,
            model: &self.model,
            spec: &self.cost,
            constraints: &self.constraints,
            risk: self.config.risk(),
            mm,
        }
    }

    pub fn initial_guess(&self) -> Vec<f64> {
        let mut w: Vec<f64> = (0..self.tree.num_nonleaf())
            .flat_map(|_| self.config.solve.initial_input_mps2)
            .collect();
        self.constraints.project_inputs(&mut w);
        w
    }

    /// Open-loop solve from the configured measured state.
    pub fn solve(&self) -> Result<(TrajectoryBundle, SolverReport)> {
        let x = self.config.solve_state();
        solve_ocp(&self.ocp(self.config.mm_config()), &x, &self.initial_guess())
    }

    /// One closed-loop run; `seed` drives the human initialization and the
    /// sampled modes.
    pub fn simulate(&self, seed: u64) -> Result<ClosedLoopTrace> {
        let mut mm = self.config.mm_config();
        if let Some(k) = self.config.simulate.max_mm_iters {
            mm.max_iters = k;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = self.config.sample_initial_state(&mut rng);
        run_closed_loop(
            &self.ocp(mm),
            &self.model,
            &x0,
            self.config.simulate.steps,
            &self.config.metric_spec(),
            &mut rng,
        )
    }
}

/// Median and quartiles with linear interpolation between order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            q1: at(0.25),
            median: at(0.5),
            q3: at(0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}
