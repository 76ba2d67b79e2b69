//! Stage and terminal costs, the collision penalty with its convex majorizer,
//! scenario losses and the three risk functionals.
//!
//! Every tree-level quantity here is a weighted sum of per-node terms. A
//! scenario loss is the sum of node costs along its root-to-leaf path, and a
//! scenario log-probability is the sum of branching-edge log-probabilities, so
//! any weighting over scenarios can be pushed onto nodes by summing the
//! weights of the scenarios passing through each node.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{MoEModel, TrajectoryBundle};
use crate::numeric::{lse, mat_t_vec_add, mat_vec_add, softmax, softmax_into};
use crate::tree::ScenarioTree;

/// Gradient container with the same layout as a trajectory bundle.
pub type NodeGradient = TrajectoryBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    Neutral,
    Optimistic,
    Pessimistic,
}

impl Formulation {
    pub fn name(self) -> &'static str {
        match self {
            Formulation::Neutral => "neutral",
            Formulation::Optimistic => "optimistic",
            Formulation::Pessimistic => "pessimistic",
        }
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neutral" | "neutral-proxy" | "neutral_proxy" => Ok(Formulation::Neutral),
            "optimistic" => Ok(Formulation::Optimistic),
            "pessimistic" => Ok(Formulation::Pessimistic),
            other => Err(Error::Config(format!("unknown formulation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskConfig {
    pub gamma: f64,
    pub formulation: Formulation,
}

impl RiskConfig {
    pub fn new(formulation: Formulation, gamma: f64) -> Result<Self> {
        let cfg = Self { gamma, formulation };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.formulation != Formulation::Neutral && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be positive for the {} formulation, got {}",
                self.formulation.name(),
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Outer function / inner distance pair of a collision penalty `f1(f2(Δp))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyKind {
    /// `α exp(−β ‖Δp‖)`
    ExpNorm,
    /// `α exp(−β Δpᵀ Σ Δp)`
    ExpSquaredNorm { sigma: [[f64; 2]; 2] },
    /// `(α + β ‖Δp‖)^(−p)`
    InversePower { power: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionSpec {
    pub alpha: f64,
    pub beta: f64,
    pub kind: PenaltyKind,
    /// `2 × n_x` read-out of the relative position.
    pub selector: DMatrix<f64>,
}

impl CollisionSpec {
    fn validate(&self, n_x: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidParameter("collision alpha and beta must be positive".into()));
        }
        if self.selector.shape() != (2, n_x) {
            return Err(Error::InvalidDimension(format!(
                "collision selector is {:?}, expected (2, {n_x})",
                self.selector.shape()
            )));
        }
        match &self.kind {
            PenaltyKind::InversePower { power } if !(*power > 0.0) => {
                Err(Error::InvalidParameter("inverse-power exponent must be positive".into()))
            }
            PenaltyKind::ExpSquaredNorm { sigma } => {
                let [[a, b], [c, d]] = *sigma;
                if (b - c).abs() > 1e-12 || a <= 0.0 || a * d - b * c <= 0.0 {
                    return Err(Error::InvalidParameter("sigma must be symmetric positive definite".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn relative_position(&self, x: &[f64]) -> [f64; 2] {
        let mut dp = [0.0; 2];
        mat_vec_add(&mut dp, &self.selector, x);
        dp
    }

    /// Inner convex function `f2` and its (sub)gradient; the gradient is
    /// `None` at the kink of the norm.
    fn inner(&self, dp: [f64; 2]) -> (f64, Option<[f64; 2]>) {
        match &self.kind {
            PenaltyKind::ExpNorm | PenaltyKind::InversePower { .. } => {
                let r = dp[0].hypot(dp[1]);
                if r == 0.0 {
                    (0.0, None)
                } else {
                    (r, Some([dp[0] / r, dp[1] / r]))
                }
            }
            PenaltyKind::ExpSquaredNorm { sigma } => {
                let s0 = sigma[0][0] * dp[0] + sigma[0][1] * dp[1];
                let s1 = sigma[1][0] * dp[0] + sigma[1][1] * dp[1];
                (dp[0] * s0 + dp[1] * s1, Some([2.0 * s0, 2.0 * s1]))
            }
        }
    }

    /// Outer convex decreasing function `f1` and its derivative.
    fn outer(&self, z: f64) -> (f64, f64) {
        let (a, b) = (self.alpha, self.beta);
        match &self.kind {
            PenaltyKind::ExpNorm | PenaltyKind::ExpSquaredNorm { .. } => {
                let v = a * (-b * z).exp();
                (v, -b * v)
            }
            PenaltyKind::InversePower { power } => {
                let p = *power;
                // tangent-line extension below 0 keeps f1 convex, decreasing and finite
                let zc = z.max(0.0);
                let base = a + b * zc;
                let v = base.powf(-p);
                let dv = -p * b * base.powf(-p - 1.0);
                if z < 0.0 {
                    (v + dv * z, dv)
                } else {
                    (v, dv)
                }
            }
        }
    }

    pub fn penalty(&self, x: &[f64]) -> f64 {
        let (f2, _) = self.inner(self.relative_position(x));
        self.outer(f2).0
    }

    /// Penalty and its gradient added into `grad` (scaled by `w`). Fails at
    /// the norm kink.
    fn penalty_grad(&self, x: &[f64], w: f64, grad: &mut [f64]) -> Result<f64> {
        let (f2, g2) = self.inner(self.relative_position(x));
        let (v, dv) = self.outer(f2);
        let g2 = g2.ok_or_else(|| Error::NonSmooth("coincident positions in collision penalty".into()))?;
        let scaled = [w * dv * g2[0], w * dv * g2[1]];
        mat_t_vec_add(grad, &self.selector, &scaled);
        Ok(v)
    }

    /// Subgradient of `f2` at the linearization state; zero at the kink.
    fn linearization(&self, x_lin: &[f64]) -> ([f64; 2], f64, [f64; 2]) {
        let dp_lin = self.relative_position(x_lin);
        let (f2, g) = self.inner(dp_lin);
        (dp_lin, f2, g.unwrap_or([0.0, 0.0]))
    }

    /// Convex majorizer `f1(f2(Δp̃) + wᵀ(Δp − Δp̃))`.
    pub fn upper_bound(&self, x: &[f64], x_lin: &[f64]) -> f64 {
        let dp = self.relative_position(x);
        let (dp_lin, f2, w) = self.linearization(x_lin);
        let arg = f2 + w[0] * (dp[0] - dp_lin[0]) + w[1] * (dp[1] - dp_lin[1]);
        self.outer(arg).0
    }

    fn upper_bound_grad(&self, x: &[f64], x_lin: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
        let dp = self.relative_position(x);
        let (dp_lin, f2, w) = self.linearization(x_lin);
        let arg = f2 + w[0] * (dp[0] - dp_lin[0]) + w[1] * (dp[1] - dp_lin[1]);
        let (v, dv) = self.outer(arg);
        let scaled = [weight * dv * w[0], weight * dv * w[1]];
        mat_t_vec_add(grad, &self.selector, &scaled);
        v
    }
}

/// Per-stage tracking reference generator.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    /// Same reference at every stage.
    Fixed(Vec<f64>),
    /// `(p_meas + k·speed·dt, 0, speed, 0)` with `p_meas = x_meas[position]`.
    Ramp { position: usize, speed: f64, dt: f64 },
}

/// How collision terms enter a loss evaluation.
#[derive(Debug, Clone, Copy)]
pub enum CollisionMode<'a> {
    Exact,
    /// Majorize every collision term at the matching node of this bundle.
    UpperBound(Option<&'a TrajectoryBundle>),
}

#[derive(Debug, Clone)]
pub struct CostSpec {
    /// State coordinates entering the tracking cost.
    pub tracked: Vec<usize>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub reference: Reference,
    pub collision: Option<CollisionSpec>,
}

fn check_psd(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::InvalidDimension(format!("{name} is {:?}, expected ({n}, {n})", m.shape())));
    }
    let scale = m.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    if (m - m.transpose()).iter().any(|v| v.abs() > 1e-12 * scale) {
        return Err(Error::InvalidParameter(format!("{name} is not symmetric")));
    }
    if n > 0 {
        let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-10 * scale {
            return Err(Error::InvalidParameter(format!("{name} is not positive semidefinite")));
        }
    }
    Ok(())
}

#[inline]
fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let mut mv = vec![0.0; v.len()];
    mat_vec_add(&mut mv, m, v);
    crate::numeric::dot(&mv, v)
}

impl CostSpec {
    pub fn validate(&self, n_x: usize, n_u: usize) -> Result<()> {
        let n_r = self.tracked.len();
        if let Some(&bad) = self.tracked.iter().find(|&&i| i >= n_x) {
            return Err(Error::InvalidDimension(format!("tracked coordinate {bad} >= n_x = {n_x}")));
        }
        check_psd("Q", &self.q, n_r)?;
        check_psd("R", &self.r, n_u)?;
        check_psd("Q_f", &self.qf, n_r)?;
        match &self.reference {
            Reference::Fixed(v) if v.len() != n_r => {
                return Err(Error::DimensionMismatch {
                    what: "reference",
                    expected: n_r,
                    got: v.len(),
                })
            }
            Reference::Ramp { position, .. } if n_r != 4 || *position >= n_x => {
                return Err(Error::InvalidDimension("ramp reference needs 4 tracked coordinates".into()))
            }
            _ => {}
        }
        if let Some(c) = &self.collision {
            c.validate(n_x)?;
        }
        Ok(())
    }

    /// Reference for stage `k` given the measured state.
    pub fn reference_at(&self, x_meas: &[f64], k: usize) -> Vec<f64> {
        match &self.reference {
            Reference::Fixed(v) => v.clone(),
            Reference::Ramp { position, speed, dt } => {
                vec![x_meas[*position] + k as f64 * speed * dt, 0.0, *speed, 0.0]
            }
        }
    }

    pub fn references(&self, x_meas: &[f64], horizon: usize) -> Vec<Vec<f64>> {
        (0..=horizon).map(|k| self.reference_at(x_meas, k)).collect()
    }

    fn tracking_error(&self, x: &[f64], reference: &[f64]) -> Vec<f64> {
        self.tracked.iter().zip(reference).map(|(&i, r)| x[i] - r).collect()
    }

    pub fn collision_penalty(&self, x: &[f64]) -> f64 {
        self.collision.as_ref().map_or(0.0, |c| c.penalty(x))
    }

    pub fn collision_upper_bound(&self, x: &[f64], x_lin: &[f64]) -> f64 {
        self.collision.as_ref().map_or(0.0, |c| c.upper_bound(x, x_lin))
    }

    fn collision_term(&self, x: &[f64], lin: Option<&[f64]>) -> f64 {
        match (&self.collision, lin) {
            (None, _) => 0.0,
            (Some(c), None) => c.penalty(x),
            (Some(c), Some(xl)) => c.upper_bound(x, xl),
        }
    }

    /// `½‖x_r − ref(k)‖²_Q + ½‖u‖²_R + c(x)`.
    pub fn stage_cost(&self, x: &[f64], u: &[f64], k: usize, x_meas: &[f64]) -> Result<f64> {
        if x.len() != x_meas.len() {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: x_meas.len(),
                got: x.len(),
            });
        }
        if u.len() != self.r.nrows() {
            return Err(Error::DimensionMismatch {
                what: "input",
                expected: self.r.nrows(),
                got: u.len(),
            });
        }
        let e = self.tracking_error(x, &self.reference_at(x_meas, k));
        Ok(0.5 * quad_form(&self.q, &e) + 0.5 * quad_form(&self.r, u) + self.collision_penalty(x))
    }

    /// `½‖x_r − ref(k)‖²_{Q_f} + c(x)`.
    pub fn terminal_cost(&self, x: &[f64], k: usize, x_meas: &[f64]) -> Result<f64> {
        if x.len() != x_meas.len() {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: x_meas.len(),
                got: x.len(),
            });
        }
        let e = self.tracking_error(x, &self.reference_at(x_meas, k));
        Ok(0.5 * quad_form(&self.qf, &e) + self.collision_penalty(x))
    }

    /// Cost attached to one node: stage cost for inner nodes, terminal cost for
    /// leaves.
    fn node_cost(
        &self,
        tree: &ScenarioTree,
        traj: &TrajectoryBundle,
        id: usize,
        refs: &[Vec<f64>],
        lin: Option<&TrajectoryBundle>,
    ) -> f64 {
        let x = traj.x(id);
        let k = tree.node(id).stage;
        let e = self.tracking_error(x, &refs[k]);
        let coll = self.collision_term(x, lin.map(|l| l.x(id)));
        if tree.is_leaf(id) {
            0.5 * quad_form(&self.qf, &e) + coll
        } else {
            0.5 * quad_form(&self.q, &e) + 0.5 * quad_form(&self.r, traj.u(id)) + coll
        }
    }

    /// Per-node costs.
    pub(crate) fn node_costs(
        &self,
        tree: &ScenarioTree,
        traj: &TrajectoryBundle,
        refs: &[Vec<f64>],
        lin: Option<&TrajectoryBundle>,
    ) -> Vec<f64> {
        (0..tree.len()).map(|id| self.node_cost(tree, traj, id, refs, lin)).collect()
    }

    /// Adds `Σ_ι W_ι ∇c_ι` into `grad`.
    pub(crate) fn add_node_cost_gradient(
        &self,
        tree: &ScenarioTree,
        traj: &TrajectoryBundle,
        refs: &[Vec<f64>],
        lin: Option<&TrajectoryBundle>,
        weights: &[f64],
        grad: &mut NodeGradient,
    ) -> Result<()> {
        let n_r = self.tracked.len();
        let mut e = vec![0.0; n_r];
        let mut qe = vec![0.0; n_r];
        for id in 0..tree.len() {
            let w = weights[id];
            if w == 0.0 {
                continue;
            }
            let x = traj.x(id);
            let k = tree.node(id).stage;
            for ((ei, &i), r) in e.iter_mut().zip(&self.tracked).zip(&refs[k]) {
                *ei = x[i] - r;
            }
            qe.iter_mut().for_each(|v| *v = 0.0);
            let leaf = tree.is_leaf(id);
            mat_vec_add(&mut qe, if leaf { &self.qf } else { &self.q }, &e);
            {
                let gx = grad.x_mut(id);
                for (&i, v) in self.tracked.iter().zip(&qe) {
                    gx[i] += w * v;
                }
                if let Some(c) = &self.collision {
                    match lin {
                        None => {
                            c.penalty_grad(x, w, gx)?;
                        }
                        Some(l) => {
                            c.upper_bound_grad(x, l.x(id), w, gx);
                        }
                    }
                }
            }
            if !leaf {
                let mut ru = vec![0.0; self.r.nrows()];
                mat_vec_add(&mut ru, &self.r, traj.u(id));
                for (g, v) in grad.u_mut(id).iter_mut().zip(&ru) {
                    *g += w * v;
                }
            }
        }
        Ok(())
    }
}

/// Path sums of node costs, one entry per scenario.
pub(crate) fn path_sums(tree: &ScenarioTree, node_values: &[f64]) -> Vec<f64> {
    let mut acc = node_values.to_vec();
    for node in &tree.nodes()[1..] {
        let p = node.parent.expect("non-root");
        acc[node.id] += acc[p];
    }
    acc[tree.first_leaf()..].to_vec()
}

/// Node weights `W_ι = Σ_{s through ι} w_s`.
pub(crate) fn aggregate_weights(tree: &ScenarioTree, scenario_weights: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; tree.len()];
    w[tree.first_leaf()..].copy_from_slice(scenario_weights);
    for node in tree.nodes()[1..].iter().rev() {
        let p = node.parent.expect("non-root");
        w[p] += w[node.id];
    }
    w
}

/// Adds `Σ_s v_s ∇ ℓ_s` into `grad`, where `ℓ_s` is the scenario
/// log-probability (`lin = None`) or its log-sum-exp linearization at `lin`.
/// `node_weights` are the aggregated `v` (see [`aggregate_weights`]).
pub(crate) fn add_log_prob_gradient(
    tree: &ScenarioTree,
    model: &MoEModel,
    traj: &TrajectoryBundle,
    lin: Option<&TrajectoryBundle>,
    node_weights: &[f64],
    grad: &mut NodeGradient,
) {
    let d = model.modes();
    let mut z = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    let mut r = vec![0.0; d];
    for k in 0..tree.branching_horizon() {
        for id in tree.stage_range(k) {
            let vw = node_weights[id];
            let children = &tree.node(id).children;
            if vw == 0.0 && children.iter().all(|&c| node_weights[c] == 0.0) {
                continue;
            }
            let at = lin.map_or(traj.x(id), |l| l.x(id));
            model.logits_into(at, &mut z);
            softmax_into(&z, &mut sigma);
            for ((rj, &c), sj) in r.iter_mut().zip(children).zip(&sigma) {
                *rj = node_weights[c] - vw * sj;
            }
            mat_t_vec_add(grad.x_mut(id), model.theta(), &r);
        }
    }
}

/// Scenario losses with exact or majorized collision terms.
pub fn scenario_losses(
    tree: &ScenarioTree,
    traj: &TrajectoryBundle,
    spec: &CostSpec,
    collision: CollisionMode<'_>,
) -> Result<Vec<f64>> {
    let lin = match collision {
        CollisionMode::Exact => None,
        CollisionMode::UpperBound(None) => return Err(Error::MissingLinearization),
        CollisionMode::UpperBound(Some(l)) => {
            if l.x.len() != traj.x.len() {
                return Err(Error::DimensionMismatch {
                    what: "linearization bundle",
                    expected: traj.x.len(),
                    got: l.x.len(),
                });
            }
            Some(l)
        }
    };
    if traj.num_nodes() != tree.len() || traj.u.len() != tree.num_nonleaf() * traj.n_u() {
        return Err(Error::DimensionMismatch {
            what: "trajectory bundle nodes",
            expected: tree.len(),
            got: traj.num_nodes(),
        });
    }
    let refs = spec.references(traj.x(0), tree.horizon());
    let costs = spec.node_costs(tree, traj, &refs, lin);
    let losses = path_sums(tree, &costs);
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("scenario loss".into()));
    }
    Ok(losses)
}

/// Risk value together with the scenario weights of its gradient: the
/// derivative with respect to `L_s` and to `ln p_s`.
pub(crate) struct RiskWeights {
    pub value: f64,
    pub loss_weights: Vec<f64>,
    pub log_prob_weights: Vec<f64>,
}

pub(crate) fn risk_weights(cfg: &RiskConfig, log_probs: &[f64], losses: &[f64]) -> RiskWeights {
    let g = cfg.gamma;
    match cfg.formulation {
        Formulation::Neutral => {
            let p: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
            let value = p.iter().zip(losses).map(|(p, l)| p * l).sum();
            let log_prob_weights = p.iter().zip(losses).map(|(p, l)| p * l).collect();
            RiskWeights {
                value,
                loss_weights: p,
                log_prob_weights,
            }
        }
        Formulation::Pessimistic => {
            let a: Vec<f64> = log_probs.iter().zip(losses).map(|(lp, l)| lp + g * l).collect();
            let q = softmax(&a);
            RiskWeights {
                value: lse(&a) / g,
                log_prob_weights: q.iter().map(|v| v / g).collect(),
                loss_weights: q,
            }
        }
        Formulation::Optimistic => {
            let a: Vec<f64> = log_probs.iter().zip(losses).map(|(lp, l)| lp - g * l).collect();
            let q = softmax(&a);
            RiskWeights {
                value: -lse(&a) / g,
                log_prob_weights: q.iter().map(|v| -v / g).collect(),
                loss_weights: q,
            }
        }
    }
}

/// `Σ p L`, `−(1/γ) lse(ln p − γL)` or `(1/γ) lse(ln p + γL)`.
pub fn risk_loss(cfg: &RiskConfig, log_probs: &[f64], losses: &[f64]) -> Result<f64> {
    cfg.validate()?;
    if log_probs.len() != losses.len() {
        return Err(Error::DimensionMismatch {
            what: "scenario losses",
            expected: log_probs.len(),
            got: losses.len(),
        });
    }
    if losses.iter().chain(log_probs).any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("risk loss inputs".into()));
    }
    Ok(risk_weights(cfg, log_probs, losses).value)
}

/// A differentiable function of a full tree trajectory `(x, u)`.
pub trait TreeObjective: Sync {
    fn value(&self, traj: &TrajectoryBundle) -> Result<f64>;

    /// Value, with the gradient with respect to every node state and input
    /// written into `grad` (overwritten).
    fn value_and_gradient(&self, traj: &TrajectoryBundle, grad: &mut NodeGradient) -> Result<f64>;
}

/// Shared problem data for one measured state.
#[derive(Debug, Clone, Copy)]
pub struct OcpData<'a> {
    pub tree: &'a ScenarioTree,
    pub model: &'a MoEModel,
    pub spec: &'a CostSpec,
}

impl<'a> OcpData<'a> {
    pub fn new(tree: &'a ScenarioTree, model: &'a MoEModel, spec: &'a CostSpec) -> Result<Self> {
        model.check_tree(tree)?;
        spec.validate(model.n_x(), model.n_u())?;
        Ok(Self { tree, model, spec })
    }
}

/// The true (nonconvex) risk loss with exact collision terms.
#[derive(Debug, Clone)]
pub struct RiskObjective<'a> {
    pub data: OcpData<'a>,
    pub risk: RiskConfig,
    refs: Vec<Vec<f64>>,
}

impl<'a> RiskObjective<'a> {
    pub fn new(data: OcpData<'a>, risk: RiskConfig, x_meas: &[f64]) -> Result<Self> {
        risk.validate()?;
        data.model.check_state(x_meas)?;
        let refs = data.spec.references(x_meas, data.tree.horizon());
        Ok(Self { data, risk, refs })
    }

    /// Scenario log-probabilities and exact scenario losses.
    pub fn scenario_terms(&self, traj: &TrajectoryBundle) -> (Vec<f64>, Vec<f64>) {
        let OcpData { tree, model, spec } = self.data;
        let acc = model.node_log_probs(tree, traj);
        let lp = acc[tree.first_leaf()..].to_vec();
        let losses = path_sums(tree, &spec.node_costs(tree, traj, &self.refs, None));
        (lp, losses)
    }

    pub fn expected_loss(&self, traj: &TrajectoryBundle) -> f64 {
        let (lp, l) = self.scenario_terms(traj);
        lp.iter().zip(&l).map(|(lp, l)| lp.exp() * l).sum()
    }
}

impl TreeObjective for RiskObjective<'_> {
    fn value(&self, traj: &TrajectoryBundle) -> Result<f64> {
        let (lp, l) = self.scenario_terms(traj);
        let v = risk_weights(&self.risk, &lp, &l).value;
        if !v.is_finite() {
            return Err(Error::NonFinite("risk loss".into()));
        }
        Ok(v)
    }

    fn value_and_gradient(&self, traj: &TrajectoryBundle, grad: &mut NodeGradient) -> Result<f64> {
        let OcpData { tree, model, spec } = self.data;
        let (lp, l) = self.scenario_terms(traj);
        let rw = risk_weights(&self.risk, &lp, &l);
        grad.x.iter_mut().chain(grad.u.iter_mut()).for_each(|g| *g = 0.0);
        let cw = aggregate_weights(tree, &rw.loss_weights);
        spec.add_node_cost_gradient(tree, traj, &self.refs, None, &cw, grad)?;
        let vw = aggregate_weights(tree, &rw.log_prob_weights);
        add_log_prob_gradient(tree, model, traj, None, &vw, grad);
        Ok(rw.value)
    }
}

/// Gradient of the selected risk loss with respect to all `(x, u)`.
pub fn risk_loss_gradient(
    cfg: &RiskConfig,
    tree: &ScenarioTree,
    model: &MoEModel,
    spec: &CostSpec,
    traj: &TrajectoryBundle,
) -> Result<NodeGradient> {
    let data = OcpData::new(tree, model, spec)?;
    traj.check(tree, model.n_x(), model.n_u())?;
    let obj = RiskObjective::new(data, *cfg, traj.x(0))?;
    let mut grad = TrajectoryBundle::zeros(tree, model.n_x(), model.n_u());
    obj.value_and_gradient(traj, &mut grad)?;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, DMatrix};

    fn corridor_like_spec() -> CostSpec {
        CostSpec {
            tracked: vec![0, 1, 2, 3],
            q: DMatrix::from_diagonal(&nalgebra::dvector![50.0, 50.0, 2.0, 2.0]),
            r: DMatrix::from_diagonal(&nalgebra::dvector![2.0, 2.0]),
            qf: DMatrix::from_diagonal(&nalgebra::dvector![250.0, 250.0, 10.0, 10.0]),
            reference: Reference::Fixed(vec![0.0; 4]),
            collision: None,
        }
    }

    fn collision(kind: PenaltyKind) -> CollisionSpec {
        CollisionSpec {
            alpha: 500.0,
            beta: 5.0,
            kind,
            selector: dmatrix![1.0, 0.0; 0.0, 1.0],
        }
    }

    #[test]
    fn quadratic_stage_cost() {
        let spec = corridor_like_spec();
        let c = spec.stage_cost(&[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0], 0, &[0.0; 4]).unwrap();
        assert!((c - 25.0).abs() < 1e-12);
        let base = spec.stage_cost(&[0.0; 4], &[0.3, -0.2], 0, &[0.0; 4]).unwrap();
        let doubled = spec.stage_cost(&[0.0; 4], &[0.6, -0.4], 0, &[0.0; 4]).unwrap();
        assert!((doubled - 4.0 * base).abs() < 1e-12);
        assert_eq!(spec.stage_cost(&[0.0; 4], &[0.0, 0.0], 3, &[0.0; 4]).unwrap(), 0.0);
        assert!(spec.stage_cost(&[0.0; 3], &[0.0, 0.0], 0, &[0.0; 4]).is_err());
    }

    #[test]
    fn penalty_values() {
        let c = collision(PenaltyKind::ExpNorm);
        assert_eq!(c.penalty(&[0.0, 0.0]), 500.0);
        assert!((c.penalty(&[0.6, 0.8]) - 500.0 * (-5.0f64).exp()).abs() < 1e-12);
        assert!((c.penalty(&[1.0, 0.0]) - 3.368973).abs() < 1e-6);
        assert!(c.penalty(&[2.0, 0.0]) < c.penalty(&[1.0, 0.0]));
    }

    #[test]
    fn bound_tangent_and_kink() {
        for kind in [
            PenaltyKind::ExpNorm,
            PenaltyKind::ExpSquaredNorm {
                sigma: [[1.0, 0.2], [0.2, 0.5]],
            },
            PenaltyKind::InversePower { power: 1.0 },
        ] {
            let c = collision(kind);
            let x = [0.3, -0.4];
            assert!((c.upper_bound(&x, &x) - c.penalty(&x)).abs() < 1e-12);
        }
        let c = collision(PenaltyKind::ExpNorm);
        // w = 0 at the kink: constant bound alpha
        for x in [[0.0, 0.0], [1.0, 2.0], [-3.0, 0.1]] {
            assert_eq!(c.upper_bound(&x, &[0.0, 0.0]), 500.0);
            assert!(c.upper_bound(&x, &[0.0, 0.0]) >= c.penalty(&x));
        }
    }

    #[test]
    fn inverse_power_extension_is_finite() {
        let c = CollisionSpec {
            alpha: 1.0,
            beta: 2.0,
            kind: PenaltyKind::InversePower { power: 2.0 },
            selector: dmatrix![1.0, 0.0; 0.0, 1.0],
        };
        // linearized argument far below zero
        let b = c.upper_bound(&[-10.0, 0.0], &[1.0, 0.0]);
        assert!(b.is_finite());
        assert!(b >= c.penalty(&[-10.0, 0.0]));
    }

    #[test]
    fn risk_loss_examples() {
        let lp = [0.5f64.ln(), 0.5f64.ln()];
        let l = [0.0, 1.0];
        let pes = risk_loss(&RiskConfig::new(Formulation::Pessimistic, 1.0).unwrap(), &lp, &l).unwrap();
        assert!((pes - (0.5 * (1.0 + 1f64.exp())).ln()).abs() < 1e-14);
        assert!((pes - 0.620115).abs() < 1e-6);
        let opt = risk_loss(&RiskConfig::new(Formulation::Optimistic, 1.0).unwrap(), &lp, &l).unwrap();
        assert!((opt + (0.5 * (1.0 + (-1f64).exp())).ln()).abs() < 1e-14);
        assert!((opt - 0.379885).abs() < 1e-6);
        let neu = risk_loss(&RiskConfig::new(Formulation::Neutral, 0.0).unwrap(), &lp, &l).unwrap();
        assert!(opt <= neu && neu <= pes);
        assert!((neu - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_losses_give_constant() {
        let lp = [0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()];
        let l = [4.2; 3];
        for f in [Formulation::Neutral, Formulation::Optimistic, Formulation::Pessimistic] {
            let v = risk_loss(&RiskConfig { gamma: 3.0, formulation: f }, &lp, &l).unwrap();
            assert!((v - 4.2).abs() < 1e-12, "{f:?}: {v}");
        }
    }

    #[test]
    fn huge_gamma_loss_does_not_overflow() {
        let lp = [0.5f64.ln(); 2];
        let l = [800.0, 900.0];
        let v = risk_loss(&RiskConfig::new(Formulation::Pessimistic, 10.0).unwrap(), &lp, &l).unwrap();
        assert!((v - (900.0 + 0.5f64.ln() / 10.0)).abs() < 1e-9);
    }

    #[test]
    fn gamma_validation() {
        assert!(RiskConfig::new(Formulation::Optimistic, 0.0).is_err());
        assert!(RiskConfig::new(Formulation::Pessimistic, -1.0).is_err());
        assert!(RiskConfig::new(Formulation::Neutral, 0.0).is_ok());
    }

    #[test]
    fn spec_validation() {
        let mut spec = corridor_like_spec();
        assert!(spec.validate(4, 2).is_ok());
        spec.q[(0, 0)] = -1.0;
        assert!(spec.validate(4, 2).is_err());
        let mut spec = corridor_like_spec();
        spec.q[(0, 1)] = 1.0;
        assert!(spec.validate(4, 2).is_err());
        let mut spec = corridor_like_spec();
        spec.collision = Some(CollisionSpec {
            alpha: 0.0,
            beta: 1.0,
            kind: PenaltyKind::ExpNorm,
            selector: DMatrix::zeros(2, 4),
        });
        assert!(spec.validate(4, 2).is_err());
    }

    #[test]
    fn missing_linearization() {
        let tree = ScenarioTree::build(1, 1, 1).unwrap();
        let traj = TrajectoryBundle::zeros(&tree, 4, 2);
        let spec = corridor_like_spec();
        assert!(matches!(
            scenario_losses(&tree, &traj, &spec, CollisionMode::UpperBound(None)),
            Err(Error::MissingLinearization)
        ));
    }
}
