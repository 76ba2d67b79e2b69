//! Majorization-minimization outer loop and the receding-horizon controller.

use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::moe::{MoEModel, TrajectoryBundle};
use crate::objective::{CostSpec, Formulation, OcpData, RiskConfig, RiskObjective, TreeObjective};
use crate::solver::{condense, ConstraintSet, SolveOptions, SolveStatus};
use crate::surrogate::{Surrogate, SurrogateParams};
use crate::tree::ScenarioTree;

/// Risk parameter used when the neutral formulation is requested: the
/// optimistic problem with a small `γ` stands in for the expectation.
pub const NEUTRAL_PROXY_GAMMA: f64 = 1e-3;

/// Slack allowed on the measured state before it counts as infeasible.
const STATE_FEAS_SLACK: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MMConfig {
    pub eps_tol: f64,
    pub max_iters: usize,
    /// Stop once the true loss decreases by less than this.
    pub loss_decrease_tol: Option<f64>,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
}

impl Default for MMConfig {
    fn default() -> Self {
        Self {
            eps_tol: 0.003,
            max_iters: 50,
            loss_decrease_tol: None,
            inner_tol: 1e-4,
            inner_max_iters: 20_000,
        }
    }
}

impl MMConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.eps_tol) || !pos(self.inner_tol) || self.loss_decrease_tol.is_some_and(|v| !pos(v)) {
            return Err(Error::InvalidParameter("MM tolerances must be positive".into()));
        }
        if self.inner_max_iters == 0 {
            return Err(Error::InvalidParameter("inner iteration budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub m: usize,
    pub loss: f64,
    /// Surrogate value at the new iterate; the loss itself for `m = 0`.
    pub surrogate: f64,
    pub optimality_error: f64,
    pub inner_iters: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MMStatus {
    Converged,
    MaxIterations,
    /// The inner solver failed; the report ends at the last good iterate.
    InnerFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub records: Vec<IterationRecord>,
    pub status: MMStatus,
    pub total_inner_iters: usize,
    /// Formulation and `γ` actually optimized.
    pub risk: RiskConfig,
    /// `E[L]` at the returned iterate.
    pub expected_loss: f64,
    /// State-box multipliers from the last inner solve (empty before any).
    pub state_multipliers: Vec<f64>,
}

impl SolverReport {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_optimality_error(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.optimality_error)
    }

    /// Number of surrogate minimizations performed.
    pub fn mm_iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }
}

/// The risk setting that is actually optimized for `risk`.
pub fn effective_risk(risk: RiskConfig) -> RiskConfig {
    match risk.formulation {
        Formulation::Neutral => RiskConfig {
            gamma: NEUTRAL_PROXY_GAMMA,
            formulation: Formulation::Optimistic,
        },
        _ => risk,
    }
}

/// Problem description shared by every solve of one closed-loop run.
#[derive(Debug, Clone, Copy)]
pub struct Ocp<'a> {
    pub tree: &'a ScenarioTree,
    pub model: &'a MoEModel,
    pub spec: &'a CostSpec,
    pub constraints: &'a ConstraintSet,
    pub risk: RiskConfig,
    pub mm: MMConfig,
}

/// Run the MM loop from the stacked inputs `initial_guess` (clipped into the
/// input box). Returns the final trajectory and the iteration report.
pub fn solve_ocp(ocp: &Ocp<'_>, x_t: &[f64], initial_guess: &[f64]) -> Result<(TrajectoryBundle, SolverReport)> {
    ocp.mm.validate()?;
    ocp.risk.validate()?;
    let risk = effective_risk(ocp.risk);
    let data = OcpData::new(ocp.tree, ocp.model, ocp.spec)?;
    let problem = condense(ocp.tree, ocp.model, x_t, ocp.constraints.clone())?;
    let root = TrajectoryBundle::from_parts(x_t.len(), 0, x_t.to_vec(), Vec::new());
    if ocp.constraints.state_violation(&root) > STATE_FEAS_SLACK {
        return Err(Error::InfeasibleState(format!("{x_t:?} violates the state boxes")));
    }
    if initial_guess.len() != problem.num_inputs() {
        return Err(Error::DimensionMismatch {
            what: "initial guess",
            expected: problem.num_inputs(),
            got: initial_guess.len(),
        });
    }
    let obj = RiskObjective::new(data, risk, x_t)?;
    let opts = SolveOptions {
        tol: ocp.mm.inner_tol,
        max_iters: ocp.mm.inner_max_iters,
        ..SolveOptions::default()
    };

    let mut w = initial_guess.to_vec();
    ocp.constraints.project_inputs(&mut w);
    let mut traj = problem.states(&w)?;
    let started = Instant::now();
    let mut loss = obj.value(&traj)?;
    let mut err = problem.optimality_error(&obj, &w, &[])?;
    let mut records = vec![IterationRecord {
        m: 0,
        loss,
        surrogate: loss,
        optimality_error: err,
        inner_iters: 0,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    }];
    let mut status = MMStatus::MaxIterations;
    let mut total_inner = 0;
    let mut state_multipliers = Vec::new();
    if err <= ocp.mm.eps_tol {
        status = MMStatus::Converged;
    } else {
        for m in 1..=ocp.mm.max_iters {
            let t0 = Instant::now();
            let params = SurrogateParams::at_iterate(&obj, &traj)?;
            let sur = Surrogate::new(data, params, x_t)?;
            let out = problem.solve(&sur, &w, &opts)?;
            total_inner += out.iterations;
            if out.status == SolveStatus::NumericalFailure {
                status = MMStatus::InnerFailure;
                break;
            }
            let new_loss = obj.value(&out.trajectory)?;
            let new_err = problem.optimality_error(&obj, &out.inputs, &out.state_multipliers)?;
            let decrease = loss - new_loss;
            w = out.inputs;
            traj = out.trajectory;
            state_multipliers = out.state_multipliers;
            loss = new_loss;
            err = new_err;
            records.push(IterationRecord {
                m,
                loss,
                surrogate: out.value,
                optimality_error: err,
                inner_iters: out.iterations,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            if err <= ocp.mm.eps_tol || ocp.mm.loss_decrease_tol.is_some_and(|tol| decrease <= tol) {
                status = MMStatus::Converged;
                break;
            }
        }
    }
    let expected_loss = obj.expected_loss(&traj);
    Ok((
        traj,
        SolverReport {
            records,
            status,
            total_inner_iters: total_inner,
            risk,
            expected_loss,
            state_multipliers,
        },
    ))
}

/// Warm start for the next measured state: node values are taken from the
/// subtree below the realized mode; nodes with no counterpart copy their
/// parent's input.
pub fn shift_inputs(tree: &ScenarioTree, prev: &TrajectoryBundle, realized_mode: usize) -> Vec<f64> {
    let n_u = prev.n_u();
    let mut u = vec![0.0; tree.num_nonleaf() * n_u];
    let root_children = &tree.node(0).children;
    let start = if root_children.len() > 1 {
        root_children[realized_mode.min(root_children.len() - 1)]
    } else {
        root_children[0]
    };
    // old node matched to each new node, if any
    let mut map: Vec<Option<usize>> = vec![None; tree.len()];
    map[0] = Some(start);
    for node in &tree.nodes()[1..] {
        let parent = node.parent.expect("non-root");
        map[node.id] = map[parent].and_then(|o| {
            let kids = &tree.node(o).children;
            match kids.len() {
                0 => None,
                1 => Some(kids[0]),
                _ => Some(kids[node.mode.expect("non-root")]),
            }
        });
    }
    for node in &tree.nodes()[..tree.num_nonleaf()] {
        let src: Vec<f64> = match map[node.id] {
            Some(o) if !tree.is_leaf(o) => prev.u(o).to_vec(),
            _ => match node.parent {
                Some(p) => u[p * n_u..(p + 1) * n_u].to_vec(),
                None => prev.u(0).to_vec(),
            },
        };
        u[node.id * n_u..(node.id + 1) * n_u].copy_from_slice(&src);
    }
    u
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub input: Vec<f64>,
    pub mode: usize,
    pub next_state: Vec<f64>,
    pub report: SolverReport,
    pub solve_ms: f64,
}

/// Receding-horizon controller holding the warm start between steps.
#[derive(Debug, Clone)]
pub struct Controller<'a> {
    pub ocp: Ocp<'a>,
    warm: Option<Vec<f64>>,
}

impl<'a> Controller<'a> {
    pub fn new(ocp: Ocp<'a>) -> Self {
        Self { ocp, warm: None }
    }

    pub fn with_initial_guess(ocp: Ocp<'a>, guess: Vec<f64>) -> Self {
        Self { ocp, warm: Some(guess) }
    }

    /// Solve at `x_t`, apply the clipped root input to `plant` under a mode
    /// drawn from the gate at `x_t`, and prepare the next warm start.
    pub fn mpc_step<R: Rng + ?Sized>(&mut self, plant: &MoEModel, x_t: &[f64], rng: &mut R) -> Result<StepResult> {
        let tree = self.ocp.tree;
        let n_u = self.ocp.model.n_u();
        let guess = self
            .warm
            .take()
            .unwrap_or_else(|| vec![0.0; tree.num_nonleaf() * n_u]);
        let t0 = Instant::now();
        let (traj, report) = solve_ocp(&self.ocp, x_t, &guess)?;
        let solve_ms = t0.elapsed().as_secs_f64() * 1e3;
        let mut input = traj.u(0).to_vec();
        self.ocp.constraints.project_inputs(&mut input);
        let mode = plant.sample_mode(x_t, rng)?;
        let next_state = plant.step(x_t, &input, mode)?;
        let mut next = shift_inputs(tree, &traj, mode);
        self.ocp.constraints.project_inputs(&mut next);
        self.warm = Some(next);
        Ok(StepResult {
            input,
            mode,
            next_state,
            report,
            solve_ms,
        })
    }
}

/// Which coordinates the closed-loop metrics read.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSpec {
    /// Indices of the controlled agent's `(v_x, v_y)`.
    pub velocity: (usize, usize),
    pub v_ref: f64,
    /// Indices whose difference gives the relative position:
    /// `(p_x, p_y)` of the agent and of the obstacle.
    pub agent_position: (usize, usize),
    pub obstacle_position: (usize, usize),
    pub collision_distance: f64,
}

impl MetricSpec {
    pub fn distance(&self, x: &[f64]) -> f64 {
        let dx = x[self.agent_position.0] - x[self.obstacle_position.0];
        let dy = x[self.agent_position.1] - x[self.obstacle_position.1];
        dx.hypot(dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoopMetrics {
    /// `Σ_t ‖(v_x − v_ref, v_y)‖₂` over the applied steps.
    pub avte: f64,
    pub min_distance: f64,
    /// Steps whose state is closer than the collision distance.
    pub collisions: usize,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    /// `steps + 1` states, the initial one first.
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub modes: Vec<usize>,
    pub reports: Vec<SolverReport>,
    pub solve_ms: Vec<f64>,
    /// `None` when no step was taken.
    pub metrics: Option<ClosedLoopMetrics>,
}

pub fn trace_metrics(states: &[Vec<f64>], spec: &MetricSpec) -> Option<ClosedLoopMetrics> {
    if states.len() < 2 {
        return None;
    }
    let steps = states.len() - 1;
    let avte = states[..steps]
        .iter()
        .map(|x| (x[spec.velocity.0] - spec.v_ref).hypot(x[spec.velocity.1]))
        .sum();
    let dists: Vec<f64> = states.iter().map(|x| spec.distance(x)).collect();
    let min_distance = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let collisions = dists[1..].iter().filter(|&&d| d < spec.collision_distance).count();
    Some(ClosedLoopMetrics {
        avte,
        min_distance,
        collisions,
    })
}

/// Simulate `steps` receding-horizon steps from `x_init`, with the plant
/// mode sampled from the gate through `rng`.
pub fn run_closed_loop<R: Rng + ?Sized>(
    ocp: &Ocp<'_>,
    plant: &MoEModel,
    x_init: &[f64],
    steps: usize,
    metrics: &MetricSpec,
    rng: &mut R,
) -> Result<ClosedLoopTrace> {
    let mut ctrl = Controller::new(*ocp);
    let mut trace = ClosedLoopTrace {
        states: vec![x_init.to_vec()],
        inputs: Vec::with_capacity(steps),
        modes: Vec::with_capacity(steps),
        reports: Vec::with_capacity(steps),
        solve_ms: Vec::with_capacity(steps),
        metrics: None,
    };
    let mut x = x_init.to_vec();
    for _ in 0..steps {
        let r = ctrl.mpc_step(plant, &x, rng)?;
        x = r.next_state;
        trace.states.push(x.clone());
        trace.inputs.push(r.input);
        trace.modes.push(r.mode);
        trace.reports.push(r.report);
        trace.solve_ms.push(r.solve_ms);
    }
    trace.metrics = trace_metrics(&trace.states, metrics);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, DMatrix};

    #[test]
    fn shift_follows_realized_subtree() {
        let tree = ScenarioTree::build(2, 3, 2).unwrap();
        let mut prev = TrajectoryBundle::zeros(&tree, 1, 1);
        for id in 0..tree.num_nonleaf() {
            prev.u_mut(id)[0] = id as f64;
        }
        // realized mode 1 → old node 2; its children 5, 6; their tails 9, 10
        let u = shift_inputs(&tree, &prev, 1);
        assert_eq!(u[0], 2.0);
        assert_eq!(&u[1..3], &[5.0, 6.0]);
        // stage-2 nodes map to stage-3 old leaves → copy parent
        assert_eq!(&u[3..7], &[5.0, 5.0, 6.0, 6.0]);
    }

    #[test]
    fn shift_chain() {
        let tree = ScenarioTree::build(1, 3, 0).unwrap();
        let prev = TrajectoryBundle::from_parts(1, 1, vec![0.0; 4], vec![1.0, 2.0, 3.0]);
        assert_eq!(shift_inputs(&tree, &prev, 0), vec![2.0, 3.0, 3.0]);
    }

    #[test]
    fn metrics_empty_and_basic() {
        let spec = MetricSpec {
            velocity: (0, 1),
            v_ref: 1.0,
            agent_position: (2, 3),
            obstacle_position: (4, 5),
            collision_distance: 0.1,
        };
        assert!(trace_metrics(&[vec![0.0; 6]], &spec).is_none());
        let states = vec![
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.05, 0.0],
        ];
        let m = trace_metrics(&states, &spec).unwrap();
        assert_eq!(m.avte, 0.0);
        assert_eq!(m.min_distance, 0.05);
        assert_eq!(m.collisions, 1);
    }

    #[test]
    fn zero_input_plant_ignores_solver() {
        let tree = ScenarioTree::build(1, 2, 1).unwrap();
        let model = MoEModel::new(DMatrix::zeros(1, 1), vec![dmatrix![0.5]], vec![dmatrix![0.0]]).unwrap();
        let spec = CostSpec {
            tracked: vec![0],
            q: dmatrix![1.0],
            r: dmatrix![1.0],
            qf: dmatrix![1.0],
            reference: crate::objective::Reference::Fixed(vec![1.0]),
            collision: None,
        };
        let cons = ConstraintSet::unconstrained(1);
        let ocp = Ocp {
            tree: &tree,
            model: &model,
            spec: &spec,
            constraints: &cons,
            risk: RiskConfig::new(Formulation::Pessimistic, 1.0).unwrap(),
            mm: MMConfig::default(),
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let r = Controller::new(ocp).mpc_step(&model, &[2.0], &mut rng).unwrap();
        assert_eq!(r.next_state, vec![1.0]);
    }
}
