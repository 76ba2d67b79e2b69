//! Brute-force reference computations and the verification suite.
//!
//! Everything in this module is deliberately naive: probabilities are plain
//! products of normalized exponentials, risk values are computed from their
//! defining sums, gradients come from central differences. None of it calls
//! the log-sum-exp helpers used by the main code path.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corridor::{CorridorConfig, CorridorSetup};
use crate::error::{Error, Result};
use crate::mm::{solve_ocp, MMConfig, MMStatus, Ocp};
use crate::moe::{MoEModel, TrajectoryBundle};
use crate::objective::{
    risk_loss, scenario_losses, CollisionMode, CollisionSpec, CostSpec, Formulation, OcpData, PenaltyKind,
    Reference, RiskConfig, RiskObjective, TreeObjective,
};
use crate::par::{self, Execution};
use crate::solver::{condense, ConstraintSet, SolveOptions, StateBox};
use crate::surrogate::{optimal_pi, Surrogate, SurrogateParams};
use crate::tree::ScenarioTree;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_gradient<F>(f: F, x: &[f64], step: f64, exec: Execution) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    let g = par::map_range(exec, x.len(), |i| {
        let mut p = x.to_vec();
        p[i] = x[i] + step;
        let fp = f(&p)?;
        p[i] = x[i] - step;
        let fm = f(&p)?;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite(format!("function value near coordinate {i}")));
        }
        Ok((fp - fm) / (2.0 * step))
    });
    g.into_iter().collect()
}

const MAX_GRID_DIM: usize = 4;

fn grid_steps(dim: usize, resolution: f64) -> Result<usize> {
    if dim == 0 || dim > MAX_GRID_DIM {
        return Err(Error::InvalidDimension(format!(
            "simplex grid supports 1..={MAX_GRID_DIM} dimensions, got {dim}"
        )));
    }
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::InvalidParameter("grid resolution must lie in (0, 1]".into()));
    }
    Ok((1.0 / resolution).round() as usize)
}

/// Visit every composition of `k` into `dim` parts.
fn for_each_composition(dim: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    let mut parts = vec![0usize; dim];
    fn rec(parts: &mut [usize], pos: usize, left: usize, visit: &mut dyn FnMut(&[usize])) {
        if pos + 1 == parts.len() {
            parts[pos] = left;
            visit(parts);
            return;
        }
        for v in 0..=left {
            parts[pos] = v;
            rec(parts, pos + 1, left - v, visit);
        }
    }
    rec(&mut parts, 0, k, &mut visit);
}

/// Exhaustive minimum of `f` over the simplex grid with spacing `resolution`.
pub fn simplex_grid_min<F: Fn(&[f64]) -> f64>(dim: usize, resolution: f64, f: F) -> Result<(Vec<f64>, f64)> {
    let k = grid_steps(dim, resolution)?;
    let mut best = (vec![0.0; dim], f64::INFINITY);
    let mut point = vec![0.0; dim];
    for_each_composition(dim, k, |parts| {
        for (p, &c) in point.iter_mut().zip(parts) {
            *p = c as f64 / k as f64;
        }
        let v = f(&point);
        if v < best.1 {
            best = (point.clone(), v);
        }
    });
    Ok(best)
}

/// Same search for an objective `Σ_s term(s, Π_s)`; the per-coordinate terms
/// are tabulated once, which makes fine grids in four dimensions cheap.
pub fn simplex_grid_min_separable<F: Fn(usize, f64) -> f64>(
    dim: usize,
    resolution: f64,
    term: F,
) -> Result<(Vec<f64>, f64)> {
    let k = grid_steps(dim, resolution)?;
    let table: Vec<Vec<f64>> = (0..dim)
        .map(|s| (0..=k).map(|i| term(s, i as f64 / k as f64)).collect())
        .collect();
    let mut best_parts = vec![0usize; dim];
    let mut best = f64::INFINITY;
    for_each_composition(dim, k, |parts| {
        let v: f64 = parts.iter().enumerate().map(|(s, &c)| table[s][c]).sum();
        if v < best {
            best = v;
            best_parts.copy_from_slice(parts);
        }
    });
    Ok((best_parts.iter().map(|&c| c as f64 / k as f64).collect(), best))
}

/// Scenario probabilities as products of gate probabilities along branching
/// edges, in leaf order.
pub fn enumerate_scenario_probs(tree: &ScenarioTree, model: &MoEModel, traj: &TrajectoryBundle) -> Vec<f64> {
    let theta = model.theta();
    tree.scenarios()
        .iter()
        .map(|sc| {
            let mut p = 1.0;
            for (&node, &mode) in sc.ancestors.iter().zip(&sc.modes) {
                if !tree.is_branching(node) {
                    continue;
                }
                let x = traj.x(node);
                let weights: Vec<f64> = (0..theta.nrows())
                    .map(|r| (0..theta.ncols()).map(|c| theta[(r, c)] * x[c]).sum::<f64>().exp())
                    .collect();
                p *= weights[mode] / weights.iter().sum::<f64>();
            }
            p
        })
        .collect()
}

/// `E[L]`, the entropic values from their defining sums, and extremes.
#[derive(Debug, Clone, Copy)]
pub struct DirectRisk {
    pub expected: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

pub fn direct_moments(p: &[f64], losses: &[f64]) -> DirectRisk {
    let expected: f64 = p.iter().zip(losses).map(|(p, l)| p * l).sum();
    let variance = p.iter().zip(losses).map(|(p, l)| p * (l - expected).powi(2)).sum();
    DirectRisk {
        expected,
        variance,
        min: losses.iter().copied().fold(f64::INFINITY, f64::min),
        max: losses.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// `(1/γ) ln Σ p e^{γL}` (pessimistic, `sign = 1`) or
/// `−(1/γ) ln Σ p e^{−γL}` (optimistic, `sign = −1`), shifting by the extreme
/// loss to keep the exponentials finite.
pub fn direct_entropic(p: &[f64], losses: &[f64], gamma: f64, sign: f64) -> f64 {
    let pivot = if sign > 0.0 {
        losses.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        losses.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let s: f64 = p
        .iter()
        .zip(losses)
        .map(|(p, l)| p * (sign * gamma * (l - pivot)).exp())
        .sum();
    pivot + sign * s.ln() / gamma
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollisionChoice {
    ExpNorm,
    ExpSquaredNorm,
    InversePower,
}

pub const ALL_PENALTIES: [CollisionChoice; 3] = [
    CollisionChoice::ExpNorm,
    CollisionChoice::ExpSquaredNorm,
    CollisionChoice::InversePower,
];

impl CollisionChoice {
    pub fn name(self) -> &'static str {
        match self {
            CollisionChoice::ExpNorm => "exp_norm",
            CollisionChoice::ExpSquaredNorm => "exp_squared_norm",
            CollisionChoice::InversePower => "inverse_power",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InstanceOptions {
    pub collision: Option<CollisionChoice>,
    pub max_horizon: usize,
    /// Scale of the random gate matrix entries.
    pub theta_scale: f64,
    pub max_scenarios: usize,
}

impl Default for InstanceOptions {
    fn default() -> Self {
        Self {
            collision: None,
            max_horizon: 3,
            theta_scale: 1.0,
            max_scenarios: 27,
        }
    }
}

/// A small random problem with a random trajectory bundle.
#[derive(Debug, Clone)]
pub struct Instance {
    pub tree: ScenarioTree,
    pub model: MoEModel,
    pub spec: CostSpec,
    pub constraints: ConstraintSet,
    pub x0: Vec<f64>,
    pub traj: TrajectoryBundle,
}

impl Instance {
    pub fn data(&self) -> OcpData<'_> {
        OcpData::new(&self.tree, &self.model, &self.spec).expect("generated instance is consistent")
    }

    pub fn log_probs(&self, traj: &TrajectoryBundle) -> Vec<f64> {
        self.model.scenario_log_probs(&self.tree, traj).expect("consistent")
    }

    pub fn losses(&self, traj: &TrajectoryBundle) -> Vec<f64> {
        scenario_losses(&self.tree, traj, &self.spec, CollisionMode::Exact).expect("consistent")
    }

    /// Random inputs inside the input box, rolled out from `x0`.
    pub fn random_rollout<R: Rng + ?Sized>(&self, rng: &mut R) -> TrajectoryBundle {
        let u: Vec<f64> = (0..self.tree.num_nonleaf() * self.model.n_u())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        self.model.rollout(&self.tree, &self.x0, &u).expect("consistent")
    }
}

const INST_NX: usize = 4;
const INST_NU: usize = 2;

fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn random_psd<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> DMatrix<f64> {
    let m = uniform_matrix(rng, n, n, 1.0);
    (&m * m.transpose()) * (scale / n as f64) + DMatrix::identity(n, n) * (0.1 * scale)
}

pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, opts: &InstanceOptions) -> Instance {
    let (d, n, n_b) = loop {
        let d = rng.random_range(2..=3usize);
        let n = rng.random_range(1..=opts.max_horizon.max(1));
        let n_b = rng.random_range(0..=n);
        if d.pow(n_b as u32) <= opts.max_scenarios {
            break (d, n, n_b);
        }
    };
    let tree = ScenarioTree::build(d, n, n_b).expect("valid sizes");
    let theta = uniform_matrix(rng, d, INST_NX, opts.theta_scale);
    let a = (0..d)
        .map(|_| DMatrix::identity(INST_NX, INST_NX) + uniform_matrix(rng, INST_NX, INST_NX, 0.2))
        .collect();
    let b = (0..d).map(|_| uniform_matrix(rng, INST_NX, INST_NU, 0.5)).collect();
    let model = MoEModel::new(theta, a, b).expect("valid model");
    let collision = opts.collision.map(|kind| {
        let mut selector = DMatrix::zeros(2, INST_NX);
        selector[(0, 0)] = 1.0;
        selector[(1, 1)] = 1.0;
        CollisionSpec {
            alpha: rng.random_range(1.0..5.0),
            beta: rng.random_range(0.5..2.0),
            kind: match kind {
                CollisionChoice::ExpNorm => PenaltyKind::ExpNorm,
                CollisionChoice::ExpSquaredNorm => {
                    let off = rng.random_range(-0.3..0.3);
                    PenaltyKind::ExpSquaredNorm {
                        sigma: [[1.0, off], [off, rng.random_range(0.5..1.5)]],
                    }
                }
                CollisionChoice::InversePower => PenaltyKind::InversePower {
                    power: rng.random_range(0.5..2.0),
                },
            },
            selector,
        }
    });
    let spec = CostSpec {
        tracked: (0..INST_NX).collect(),
        q: random_psd(rng, INST_NX, 1.0),
        r: random_psd(rng, INST_NU, 0.5),
        qf: random_psd(rng, INST_NX, 2.0),
        reference: Reference::Fixed((0..INST_NX).map(|_| rng.random_range(-1.0..1.0)).collect()),
        collision,
    };
    let constraints = ConstraintSet {
        u_lo: vec![-1.0; INST_NU],
        u_hi: vec![1.0; INST_NU],
        state_boxes: Vec::new(),
    };
    let x0: Vec<f64> = (0..INST_NX).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut inst = Instance {
        traj: TrajectoryBundle::zeros(&tree, INST_NX, INST_NU),
        tree,
        model,
        spec,
        constraints,
        x0,
    };
    inst.traj = inst.random_rollout(rng);
    inst
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub group: String,
    /// Worst observed violation of the checked condition (≤ 0 when it holds
    /// with room to spare).
    pub max_violation: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(group: &str, name: impl Into<String>, max_violation: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            group: group.to_string(),
            max_violation,
            tolerance,
            passed: max_violation.is_finite() && max_violation <= tolerance,
            detail: detail.into(),
        }
    }

    fn flag(group: &str, name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Self::new(group, name, if ok { 0.0 } else { 1.0 }, 0.0, detail)
    }

    fn error(group: &str, name: impl Into<String>, err: &Error) -> Self {
        Self::new(group, name, f64::INFINITY, 0.0, format!("error: {err}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl OracleReport {
    pub fn new(checks: Vec<CheckResult>) -> Self {
        Self {
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

/// Deliberate defects used to confirm that the suite detects them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Use `softmax(ln p + γL)` instead of `softmax(ln p − γL)` for Π*.
    PiSign,
}

pub const GROUPS: [&str; 11] = [
    "tree",
    "moe",
    "lemma1",
    "limits",
    "variance",
    "majorization",
    "pi_star",
    "gradients",
    "solver",
    "mm",
    "corridor",
];

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub only: Option<String>,
    pub mutation: Option<Mutation>,
    pub exec: Execution,
    pub seed: u64,
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn seeds(seed: u64, salt: u64, n: usize) -> Vec<u64> {
    let mut rng = rng_for(seed, salt);
    (0..n).map(|_| rng.random()).collect()
}

/// `min L ≤ ℒ^o ≤ E[L] ≤ ℒ^p ≤ max L` on `n` random instances for each `γ`.
pub fn check_sandwich(n: usize, gammas: &[f64], seed: u64, exec: Execution) -> CheckResult {
    let gammas = gammas.to_vec();
    let worst = par::map(exec, &seeds(seed, 1, n), |&s| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let inst = random_instance(&mut rng, &InstanceOptions::default());
        let p = enumerate_scenario_probs(&inst.tree, &inst.model, &inst.traj);
        let lp = inst.log_probs(&inst.traj);
        let l = inst.losses(&inst.traj);
        let m = direct_moments(&p, &l);
        let mut worst = f64::NEG_INFINITY;
        for &g in &gammas {
            let o = risk_loss(&RiskConfig::new(Formulation::Optimistic, g)?, &lp, &l)?;
            let pe = risk_loss(&RiskConfig::new(Formulation::Pessimistic, g)?, &lp, &l)?;
            for (a, b) in [(m.min, o), (o, m.expected), (m.expected, pe), (pe, m.max)] {
                worst = worst.max(a - b);
            }
        }
        Ok(worst)
    });
    summarize("lemma1", "sandwich min L <= L^o <= E[L] <= L^p <= max L", worst, 1e-9, n)
}

fn summarize(group: &str, name: &str, results: Vec<Result<f64>>, tol: f64, n: usize) -> CheckResult {
    let mut worst = f64::NEG_INFINITY;
    for r in results {
        match r {
            Ok(v) => worst = worst.max(v),
            Err(e) => return CheckResult::error(group, name, &e),
        }
    }
    CheckResult::new(group, name, worst, tol, format!("{n} instances"))
}

/// Small-`γ` and large-`γ` limits.
pub fn check_limits(n: usize, seed: u64) -> Vec<CheckResult> {
    let mut small = f64::NEG_INFINITY;
    let mut large = f64::NEG_INFINITY;
    let mut rng = rng_for(seed, 2);
    let mut used = 0;
    while used < n {
        let inst = random_instance(
            &mut rng,
            &InstanceOptions {
                theta_scale: 0.3,
                ..InstanceOptions::default()
            },
        );
        let p = enumerate_scenario_probs(&inst.tree, &inst.model, &inst.traj);
        let lp = inst.log_probs(&inst.traj);
        let l = inst.losses(&inst.traj);
        let m = direct_moments(&p, &l);
        // a single scenario has range 0 and the ratio would only measure round-off
        let range = m.max - m.min;
        if l.len() < 2 || range <= 0.0 {
            continue;
        }
        used += 1;
        for f in [Formulation::Optimistic, Formulation::Pessimistic] {
            let v = risk_loss(&RiskConfig { gamma: 1e-6, formulation: f }, &lp, &l).unwrap_or(f64::NAN);
            small = small.max((v - m.expected).abs() / range);
        }
        // unit-separated losses in a random order
        let mut unit: Vec<f64> = (0..l.len()).map(|i| i as f64).collect();
        for i in (1..unit.len()).rev() {
            unit.swap(i, rng.random_range(0..=i));
        }
        let o = risk_loss(&RiskConfig { gamma: 1e3, formulation: Formulation::Optimistic }, &lp, &unit);
        let pe = risk_loss(&RiskConfig { gamma: 1e3, formulation: Formulation::Pessimistic }, &lp, &unit);
        let top = (l.len() - 1) as f64;
        large = large
            .max((o.unwrap_or(f64::NAN) - 0.0).abs())
            .max((pe.unwrap_or(f64::NAN) - top).abs());
    }
    vec![
        CheckResult::new(
            "limits",
            "gamma=1e-6: |L^o/p - E[L]| / range(L)",
            small,
            1e-4,
            format!("{n} instances with at least two distinct losses"),
        ),
        CheckResult::new(
            "limits",
            "gamma=1e3: |L^o - min L|, |L^p - max L| with unit-separated losses",
            large,
            1e-2,
            format!("{n} instances"),
        ),
    ]
}

/// Error ratio of the second-order expansion `E[L] + (γ/2)Var[L]` at
/// `γ = 1e-2` versus `γ = 1e-3`.
pub fn check_variance(n: usize, seed: u64) -> CheckResult {
    let mut rng = rng_for(seed, 3);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut used = 0;
    while used < n {
        let inst = random_instance(
            &mut rng,
            &InstanceOptions {
                theta_scale: 0.3,
                ..InstanceOptions::default()
            },
        );
        if inst.tree.num_scenarios() < 2 {
            continue;
        }
        let p = enumerate_scenario_probs(&inst.tree, &inst.model, &inst.traj);
        let lp = inst.log_probs(&inst.traj);
        let l = inst.losses(&inst.traj);
        let m = direct_moments(&p, &l);
        let third: f64 = p.iter().zip(&l).map(|(p, l)| p * (l - m.expected).powi(3)).sum();
        // the error is ≈ γ²κ₃/6; skip instances where that is below round-off
        if third.abs() < 1e-2 * (1.0 + m.expected.abs()) {
            continue;
        }
        used += 1;
        let err = |g: f64| {
            let v = risk_loss(&RiskConfig::new(Formulation::Pessimistic, g).unwrap(), &lp, &l).unwrap();
            (v - (m.expected + 0.5 * g * m.variance)).abs()
        };
        let ratio = err(1e-2) / err(1e-3);
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    let violation = (50.0 - lo).max(hi - 200.0);
    CheckResult::new(
        "variance",
        "error ratio of E[L] + (gamma/2) Var[L] at gamma 1e-2 vs 1e-3 in [50, 200]",
        violation,
        0.0,
        format!("{n} instances, ratios in [{lo:.2}, {hi:.2}]"),
    )
}

fn surrogate_for<'a>(inst: &'a Instance, f: Formulation, gamma: f64, lin: &TrajectoryBundle) -> Result<Surrogate<'a>> {
    let obj = RiskObjective::new(inst.data(), RiskConfig::new(f, gamma)?, &inst.x0)?;
    let params = SurrogateParams::at_iterate(&obj, lin)?;
    Surrogate::new(inst.data(), params, &inst.x0)
}

/// Dominance at random points and tangency at the expansion point, per
/// surrogate and penalty kind.
pub fn check_majorization(points: usize, seed: u64, exec: Execution) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (ki, kind) in ALL_PENALTIES.iter().enumerate() {
        for f in [Formulation::Optimistic, Formulation::Pessimistic] {
            let salt = 10 + 2 * ki as u64 + (f == Formulation::Pessimistic) as u64;
            // 20 points per expansion point
            let per = 20;
            let groups = points.div_ceil(per);
            let res = par::map(exec, &seeds(seed, salt, groups), |&s| -> Result<(f64, f64)> {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let inst = random_instance(
                    &mut rng,
                    &InstanceOptions {
                        collision: Some(*kind),
                        ..InstanceOptions::default()
                    },
                );
                let gamma = [0.1, 1.0, 10.0][rng.random_range(0..3)];
                let obj = RiskObjective::new(inst.data(), RiskConfig::new(f, gamma)?, &inst.x0)?;
                let sur = surrogate_for(&inst, f, gamma, &inst.traj)?;
                let tangency = (sur.value(&inst.traj)? - obj.value(&inst.traj)?).abs();
                let mut dominance = f64::NEG_INFINITY;
                for _ in 0..per {
                    let t = inst.random_rollout(&mut rng);
                    dominance = dominance.max(obj.value(&t)? - sur.value(&t)?);
                }
                Ok((dominance, tangency))
            });
            let mut dom = f64::NEG_INFINITY;
            let mut tan: f64 = 0.0;
            let mut failure = None;
            for r in res {
                match r {
                    Ok((d, t)) => {
                        dom = dom.max(d);
                        tan = tan.max(t);
                    }
                    Err(e) => failure = Some(e),
                }
            }
            let name = format!("{} surrogate, {}", f.name(), kind.name());
            if let Some(e) = failure {
                out.push(CheckResult::error("majorization", name, &e));
                continue;
            }
            out.push(CheckResult::new(
                "majorization",
                format!("{name}: dominance L - Q"),
                dom,
                1e-9,
                format!("{} points", groups * per),
            ));
            out.push(CheckResult::new(
                "majorization",
                format!("{name}: tangency |Q - L| at expansion point"),
                tan,
                1e-9,
                format!("{groups} expansion points"),
            ));
        }
    }
    out
}

/// Closed-form Π* against an exhaustive simplex grid (≤ 4 scenarios).
pub fn check_pi_star(n: usize, seed: u64, resolution: f64, mutation: Option<Mutation>, exec: Execution) -> CheckResult {
    let res = par::map(exec, &seeds(seed, 4, n), |&s| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let inst = random_instance(
            &mut rng,
            &InstanceOptions {
                max_scenarios: 4,
                collision: Some(CollisionChoice::ExpNorm),
                ..InstanceOptions::default()
            },
        );
        let lp = inst.log_probs(&inst.traj);
        let p = enumerate_scenario_probs(&inst.tree, &inst.model, &inst.traj);
        let l = inst.losses(&inst.traj);
        let gamma = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let pi = match mutation {
            Some(Mutation::PiSign) => {
                let flipped: Vec<f64> = l.iter().map(|v| -v).collect();
                optimal_pi(&lp, &flipped, gamma)?
            }
            None => optimal_pi(&lp, &l, gamma)?,
        };
        let objective = |q: &[f64]| -> f64 {
            q.iter()
                .zip(&p)
                .zip(&l)
                .map(|((&q, &p), &l)| if q > 0.0 { q * (q / p).ln() / gamma + q * l } else { 0.0 })
                .sum()
        };
        let closed = objective(&pi);
        let (_, grid) = simplex_grid_min_separable(lp.len(), resolution, |s, q| {
            if q > 0.0 {
                q * (q / p[s]).ln() / gamma + q * l[s]
            } else {
                0.0
            }
        })?;
        Ok(closed - grid)
    });
    let mut c = summarize("pi_star", "grid search never beats closed-form Pi* by more than 1e-6", res, 1e-6, n);
    c.detail = format!("{n} instances, resolution {resolution}");
    c
}

fn flat(traj: &TrajectoryBundle) -> Vec<f64> {
    traj.x.iter().chain(&traj.u).copied().collect()
}

fn unflat(template: &TrajectoryBundle, v: &[f64]) -> TrajectoryBundle {
    let nx = template.x.len();
    TrajectoryBundle::from_parts(template.n_x(), template.n_u(), v[..nx].to_vec(), v[nx..].to_vec())
}

fn gradient_error(obj: &dyn TreeObjective, at: &TrajectoryBundle, exec: Execution) -> Result<f64> {
    let mut g = at.clone();
    obj.value_and_gradient(at, &mut g)?;
    let analytic = flat(&g);
    let fd = fd_gradient(|v| obj.value(&unflat(at, v)), &flat(at), 1e-6, exec)?;
    let scale = fd.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    Ok(analytic
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale)
}

/// Analytic against central-difference gradients for `ℒ^o`, `ℒ^p`, `Q^o`,
/// `Q^p`.
pub fn check_gradients(n: usize, seed: u64, exec: Execution) -> Vec<CheckResult> {
    let labels = ["L^o", "L^p", "Q^o", "Q^p"];
    let res = par::map(exec, &seeds(seed, 5, n), |&s| -> Result<[f64; 4]> {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let kind = if rng.random_bool(0.75) {
            Some(ALL_PENALTIES[rng.random_range(0..3)])
        } else {
            None
        };
        let inst = random_instance(
            &mut rng,
            &InstanceOptions {
                collision: kind,
                ..InstanceOptions::default()
            },
        );
        let gamma = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let at = inst.random_rollout(&mut rng);
        let mut errs = [0.0; 4];
        for (i, f) in [Formulation::Optimistic, Formulation::Pessimistic].into_iter().enumerate() {
            let obj = RiskObjective::new(inst.data(), RiskConfig::new(f, gamma)?, &inst.x0)?;
            errs[i] = gradient_error(&obj, &at, Execution::Sequential)?;
            let sur = surrogate_for(&inst, f, gamma, &inst.traj)?;
            errs[2 + i] = gradient_error(&sur, &at, Execution::Sequential)?;
        }
        Ok(errs)
    });
    let mut worst = [f64::NEG_INFINITY; 4];
    for r in res {
        match r {
            Ok(e) => {
                for i in 0..4 {
                    worst[i] = worst[i].max(e[i]);
                }
            }
            Err(e) => return vec![CheckResult::error("gradients", "gradient suite", &e)],
        }
    }
    labels
        .iter()
        .zip(worst)
        .map(|(l, w)| {
            CheckResult::new(
                "gradients",
                format!("{l}: analytic vs central differences (step 1e-6), relative"),
                w,
                1e-5,
                format!("{n} instances"),
            )
        })
        .collect()
}

/// Optimality error of the true loss recomputed from finite differences of
/// the Lagrangian over the stacked inputs.
pub fn recompute_optimality_error(ocp: &Ocp<'_>, x_t: &[f64], inputs: &[f64], state_mults: &[f64]) -> Result<f64> {
    let data = OcpData::new(ocp.tree, ocp.model, ocp.spec)?;
    let risk = crate::mm::effective_risk(ocp.risk);
    let obj = RiskObjective::new(data, risk, x_t)?;
    let boxes = &ocp.constraints.state_boxes;
    let mult = |c: usize| state_mults.get(c).copied().unwrap_or(0.0);
    let lagrangian = |w: &[f64]| -> Result<f64> {
        let traj = ocp.model.rollout(ocp.tree, x_t, w)?;
        let mut v = obj.value(&traj)?;
        for id in 1..ocp.tree.len() {
            for (b, sb) in boxes.iter().enumerate() {
                let c = ((id - 1) * boxes.len() + b) * 2;
                let x = traj.x(id)[sb.index];
                v += mult(c) * (sb.lower - x) + mult(c + 1) * (x - sb.upper);
            }
        }
        Ok(v)
    };
    let g = fd_gradient(lagrangian, inputs, 1e-6, Execution::Sequential)?;
    let n_u = ocp.model.n_u();
    let traj = ocp.model.rollout(ocp.tree, x_t, inputs)?;
    let mut stat: f64 = 0.0;
    let mut viol: f64 = 0.0;
    let mut compl: f64 = 0.0;
    let mut mults = Vec::new();
    for (i, (&w, &gi)) in inputs.iter().zip(&g).enumerate() {
        let (lo, hi) = (ocp.constraints.u_lo[i % n_u], ocp.constraints.u_hi[i % n_u]);
        let at_lo = w <= lo && gi > 0.0;
        let at_hi = w >= hi && gi < 0.0;
        if at_lo || at_hi {
            mults.push(gi.abs());
        } else {
            stat = stat.max(gi.abs());
        }
        viol = viol.max(lo - w).max(w - hi);
        for b in [lo, hi] {
            if b.is_finite() && !(at_lo || at_hi) {
                mults.push(0.0);
            }
        }
    }
    for id in 1..ocp.tree.len() {
        for (b, sb) in boxes.iter().enumerate() {
            let c = ((id - 1) * boxes.len() + b) * 2;
            let x = traj.x(id)[sb.index];
            viol = viol.max(sb.lower - x).max(x - sb.upper);
            compl = compl.max((mult(c) * (x - sb.lower)).abs()).max((mult(c + 1) * (sb.upper - x)).abs());
            mults.push(mult(c));
            mults.push(mult(c + 1));
        }
    }
    let mean = if mults.is_empty() {
        0.0
    } else {
        mults.iter().map(|v| v.abs()).sum::<f64>() / mults.len() as f64
    };
    let s = 100f64.max(mean) / 100.0;
    Ok((stat / s).max(viol).max(compl / s))
}

/// Non-increasing true loss across MM iterations and sound termination on
/// `n` random instances (both formulations).
pub fn check_mm_descent(n: usize, seed: u64, exec: Execution) -> Vec<CheckResult> {
    let res = par::map(exec, &seeds(seed, 6, n), |&s| -> Result<(f64, f64, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let kind = ALL_PENALTIES[rng.random_range(0..3)];
        let mut inst = random_instance(
            &mut rng,
            &InstanceOptions {
                collision: Some(kind),
                ..InstanceOptions::default()
            },
        );
        // a loose state box that may or may not bind
        inst.constraints.state_boxes.push(StateBox {
            index: 2,
            lower: -2.0,
            upper: 2.0,
        });
        let x0_ok = inst.x0[2].abs() <= 2.0;
        if !x0_ok {
            inst.x0[2] = 0.0;
        }
        let gamma = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let guess: Vec<f64> = (0..inst.tree.num_nonleaf() * INST_NU)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut worst_inc = f64::NEG_INFINITY;
        let mut worst_err = f64::NEG_INFINITY;
        let mut converged = 0;
        for f in [Formulation::Optimistic, Formulation::Pessimistic] {
            let ocp = Ocp {
                tree: &inst.tree,
                model: &inst.model,
                spec: &inst.spec,
                constraints: &inst.constraints,
                risk: RiskConfig::new(f, gamma)?,
                mm: MMConfig::default(),
            };
            let (traj, rep) = solve_ocp(&ocp, &inst.x0, &guess)?;
            for w in rep.records.windows(2) {
                worst_inc = worst_inc.max(w[1].loss - w[0].loss);
            }
            if rep.status == MMStatus::Converged {
                converged += 1;
                let e = recompute_optimality_error(&ocp, &inst.x0, &traj.u, &rep.state_multipliers)?;
                worst_err = worst_err.max(e);
            }
        }
        Ok((worst_inc, worst_err, converged))
    });
    let mut inc = f64::NEG_INFINITY;
    let mut err = f64::NEG_INFINITY;
    let mut conv = 0;
    for r in res {
        match r {
            Ok((a, b, c)) => {
                inc = inc.max(a);
                err = err.max(b);
                conv += c;
            }
            Err(e) => return vec![CheckResult::error("mm", "MM descent", &e)],
        }
    }
    vec![
        CheckResult::new(
            "mm",
            "true loss non-increasing across MM iterations",
            inc,
            1e-8,
            format!("{n} instances x 2 formulations"),
        ),
        CheckResult::new(
            "mm",
            "recomputed optimality error at converged points <= 0.003",
            err,
            0.003,
            format!("{conv} of {} runs converged", 2 * n),
        ),
    ]
}

/// Tree partition, prefix and frozen-mode properties.
pub fn check_tree() -> Vec<CheckResult> {
    let mut part = true;
    let mut prefix = true;
    let mut frozen = true;
    for d in 1..=3 {
        for n in 1..=5 {
            for n_b in 0..=n {
                let t = ScenarioTree::build(d, n, n_b).expect("valid");
                let mut seen = vec![0usize; t.len()];
                for k in 0..=n {
                    for id in t.stage_nodes(k).expect("in range") {
                        seen[id] += 1;
                        part &= t.node(id).stage == k;
                    }
                }
                part &= seen.iter().all(|&c| c == 1);
                let sc = t.scenarios();
                for a in sc {
                    for b in sc {
                        let shared = a.ancestors.iter().zip(&b.ancestors).take_while(|(x, y)| x == y).count();
                        let expect = if a.leaf == b.leaf {
                            n
                        } else {
                            // a stage-k node is fixed by the first min(k, N_b) modes
                            let diverge = a.modes.iter().zip(&b.modes).position(|(x, y)| x != y).unwrap_or(n);
                            1 + diverge.min(n - 1)
                        };
                        prefix &= shared == expect;
                    }
                    let last = if n_b == 0 { 0 } else { a.modes[n_b - 1] };
                    frozen &= a.modes[n_b..].iter().all(|&m| m == last);
                }
            }
        }
    }
    vec![
        CheckResult::flag("tree", "stage node sets partition the nodes", part, "d<=3, N<=5"),
        CheckResult::flag("tree", "leaves share ancestors exactly up to divergence", prefix, "d<=3, N<=5"),
        CheckResult::flag("tree", "modes frozen after the branching horizon", frozen, "d<=3, N<=5"),
    ]
}

/// Scenario probabilities sum to one, match the edge-product oracle and are
/// invariant to a constant logit offset.
pub fn check_moe(n: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = rng_for(seed, 7);
    let mut sum_err: f64 = 0.0;
    let mut oracle_err: f64 = 0.0;
    let mut shift_err: f64 = 0.0;
    for _ in 0..n {
        let inst = random_instance(&mut rng, &InstanceOptions::default());
        let lp = inst.log_probs(&inst.traj);
        let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        sum_err = sum_err.max((p.iter().sum::<f64>() - 1.0).abs());
        let o = enumerate_scenario_probs(&inst.tree, &inst.model, &inst.traj);
        oracle_err = oracle_err.max(p.iter().zip(&o).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        // a constant-coordinate offset: append a column that reads a 1
        let x = inst.traj.x(0);
        let base = inst.model.gate_distribution(x).expect("consistent");
        let mut theta = inst.model.theta().clone().insert_column(INST_NX, 0.0);
        let c = rng.random_range(-5.0..5.0);
        for r in 0..theta.nrows() {
            theta[(r, INST_NX)] = c;
        }
        let lifted = MoEModel::new(
            theta,
            (0..inst.model.modes())
                .map(|_| DMatrix::identity(INST_NX + 1, INST_NX + 1))
                .collect(),
            (0..inst.model.modes()).map(|_| DMatrix::zeros(INST_NX + 1, INST_NU)).collect(),
        )
        .expect("valid");
        let mut xl = x.to_vec();
        xl.push(1.0);
        let shifted = lifted.gate_distribution(&xl).expect("consistent");
        shift_err = shift_err.max(base.iter().zip(&shifted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    vec![
        CheckResult::new("moe", "scenario probabilities sum to 1", sum_err, 1e-10, format!("{n} instances")),
        CheckResult::new("moe", "log-probabilities match edge products", oracle_err, 1e-10, format!("{n} instances")),
        CheckResult::new("moe", "gate invariant to constant logit offset", shift_err, 1e-12, format!("{n} instances")),
    ]
}

/// Inner solver against the normal-equation solution of input-only
/// quadratic problems, plus condensing against rollout.
pub fn check_solver(n: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = rng_for(seed, 8);
    let mut value_gap: f64 = 0.0;
    let mut recon: f64 = 0.0;
    for _ in 0..n {
        let inst = random_instance(
            &mut rng,
            &InstanceOptions {
                max_scenarios: 4,
                ..InstanceOptions::default()
            },
        );
        let problem = condense(&inst.tree, &inst.model, &inst.x0, ConstraintSet::unconstrained(INST_NU))
            .expect("consistent");
        let nw = problem.num_inputs();
        // independent dense map: finite columns from plain matrix products
        let roll = |w: &[f64]| -> Vec<f64> {
            let n_x = INST_NX;
            let mut x = vec![0.0; inst.tree.len() * n_x];
            x[..n_x].copy_from_slice(&inst.x0);
            for node in &inst.tree.nodes()[1..] {
                let p = node.parent.unwrap();
                let m = node.mode.unwrap();
                let (a, b) = (inst.model.a(m), inst.model.b(m));
                for r in 0..n_x {
                    let mut v = 0.0;
                    for c in 0..n_x {
                        v += a[(r, c)] * x[p * n_x + c];
                    }
                    for c in 0..INST_NU {
                        v += b[(r, c)] * w[p * INST_NU + c];
                    }
                    x[node.id * n_x + r] = v;
                }
            }
            x
        };
        let w_rand: Vec<f64> = (0..nw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mine = roll(&w_rand);
        let theirs = problem.states(&w_rand).expect("consistent");
        recon = recon.max(mine.iter().zip(&theirs.x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        // risk-neutral single-scenario-equivalent: Θ = 0 and one mode keeps
        // the loss quadratic; solve the normal equations directly
        let tree = ScenarioTree::build(1, inst.tree.horizon(), 0).expect("valid");
        let model = MoEModel::new(
            DMatrix::zeros(1, INST_NX),
            vec![inst.model.a(0).clone()],
            vec![inst.model.b(0).clone()],
        )
        .expect("valid");
        let spec = CostSpec {
            collision: None,
            ..inst.spec.clone()
        };
        let data = OcpData::new(&tree, &model, &spec).expect("consistent");
        let obj = RiskObjective::new(data, RiskConfig::new(Formulation::Neutral, 0.0).unwrap(), &inst.x0)
            .expect("consistent");
        let prob = condense(&tree, &model, &inst.x0, ConstraintSet::unconstrained(INST_NU)).expect("consistent");
        let m = prob.num_inputs();
        let f = |w: &[f64]| obj.value(&prob.states(w).unwrap()).unwrap();
        // exact quadratic: recover gradient and Hessian by differences of
        // unit steps (exact up to round-off for quadratics)
        let zero = vec![0.0; m];
        let f0 = f(&zero);
        let mut h = DMatrix::zeros(m, m);
        let mut g = nalgebra::DVector::zeros(m);
        let unit = |i: usize, s: f64| {
            let mut v = zero.clone();
            v[i] = s;
            v
        };
        for i in 0..m {
            let fp = f(&unit(i, 1.0));
            let fm = f(&unit(i, -1.0));
            g[i] = (fp - fm) / 2.0;
            h[(i, i)] = fp + fm - 2.0 * f0;
        }
        for i in 0..m {
            for j in 0..i {
                let mut v = zero.clone();
                v[i] = 1.0;
                v[j] = 1.0;
                let fij = f(&v);
                let val = fij - f0 - g[i] - g[j] - 0.5 * (h[(i, i)] + h[(j, j)]);
                h[(i, j)] = val;
                h[(j, i)] = val;
            }
        }
        let w_star = h.clone().cholesky().expect("positive definite").solve(&(-&g));
        let best = f(w_star.as_slice());
        let out = prob
            .solve(
                &obj,
                &zero,
                &SolveOptions {
                    tol: 1e-8,
                    ..SolveOptions::default()
                },
            )
            .expect("solves");
        value_gap = value_gap.max((out.value - best).abs());
    }
    vec![
        CheckResult::new("solver", "condensed states match independent rollout", recon, 1e-12, format!("{n} instances")),
        CheckResult::new(
            "solver",
            "inner solver value vs normal-equation optimum",
            value_gap,
            1e-5,
            format!("{n} instances"),
        ),
    ]
}

/// Constant coordinate stays 1 along a short closed-loop trace, and the human
/// lateral velocity follows its tracking law.
pub fn check_corridor(seed: u64) -> Vec<CheckResult> {
    let mut cfg = CorridorConfig::default();
    cfg.horizon.n = 5;
    cfg.horizon.n_b = 1;
    cfg.simulate.steps = 10;
    let setup = match CorridorSetup::new(cfg.clone()) {
        Ok(s) => s,
        Err(e) => return vec![CheckResult::error("corridor", "corridor setup", &e)],
    };
    match setup.simulate(seed) {
        Ok(tr) => {
            let constant = tr.states.iter().all(|x| x[6] == 1.0);
            let mut law: f64 = 0.0;
            for (k, m) in tr.modes.iter().enumerate() {
                let (y0, y1) = (tr.states[k][5], tr.states[k + 1][5]);
                let v = (y1 - y0) / cfg.dt_s;
                law = law.max((v + cfg.human.y_gain_per_s * (y0 - cfg.human.y_refs_m[*m])).abs());
            }
            vec![
                CheckResult::flag("corridor", "constant coordinate stays exactly 1", constant, "10-step trace"),
                CheckResult::new(
                    "corridor",
                    "human lateral velocity equals -gain (p_y^h - y_ref of sampled mode)",
                    law,
                    1e-9,
                    "10-step trace",
                ),
            ]
        }
        Err(e) => vec![CheckResult::error("corridor", "corridor closed loop", &e)],
    }
}

/// Run the verification suite (or one group of it).
pub fn run_verify(opts: &VerifyOptions) -> Result<OracleReport> {
    if let Some(g) = &opts.only {
        if !GROUPS.contains(&g.as_str()) {
            return Err(Error::Config(format!(
                "unknown check group {g:?}; expected one of {}",
                GROUPS.join(", ")
            )));
        }
    }
    let want = |g: &str| opts.only.as_deref().is_none_or(|o| o == g);
    let (seed, exec) = (opts.seed, opts.exec);
    let mut checks = Vec::new();
    if want("tree") {
        checks.extend(check_tree());
    }
    if want("moe") {
        checks.extend(check_moe(50, seed));
    }
    if want("lemma1") {
        checks.push(check_sandwich(100, &[0.1, 1.0, 10.0], seed, exec));
    }
    if want("limits") {
        checks.extend(check_limits(50, seed));
    }
    if want("variance") {
        checks.push(check_variance(10, seed));
    }
    if want("majorization") {
        checks.extend(check_majorization(200, seed, exec));
    }
    if want("pi_star") {
        checks.push(check_pi_star(20, seed, 1e-3, opts.mutation, exec));
    }
    if want("gradients") {
        checks.extend(check_gradients(20, seed, exec));
    }
    if want("solver") {
        checks.extend(check_solver(20, seed));
    }
    if want("mm") {
        checks.extend(check_mm_descent(5, seed, exec));
    }
    if want("corridor") {
        checks.extend(check_corridor(seed));
    }
    Ok(OracleReport::new(checks))
}
