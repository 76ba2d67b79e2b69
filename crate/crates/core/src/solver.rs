//! Inner convex solver over the scenario tree.
//!
//! Node states are affine in the stacked inputs (`x^ι = E^ι w + e^ι`). The
//! solver keeps that map implicit: states come from a forward rollout and
//! input gradients from the matching backward (adjoint) pass, so the dense
//! blocks are only built on request. Input boxes are handled by projection
//! inside an accelerated projected-gradient method; state boxes go through an
//! augmented-Lagrangian outer loop.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::moe::{MoEModel, TrajectoryBundle};
use crate::numeric::{inf_norm, mat_t_vec_add};
use crate::objective::{NodeGradient, TreeObjective};
use crate::tree::ScenarioTree;

/// Box on one state coordinate, applied at every non-root node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateBox {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub state_boxes: Vec<StateBox>,
}

impl ConstraintSet {
    pub fn unconstrained(n_u: usize) -> Self {
        Self {
            u_lo: vec![f64::NEG_INFINITY; n_u],
            u_hi: vec![f64::INFINITY; n_u],
            state_boxes: Vec::new(),
        }
    }

    pub fn validate(&self, n_x: usize, n_u: usize) -> Result<()> {
        if self.u_lo.len() != n_u || self.u_hi.len() != n_u {
            return Err(Error::DimensionMismatch {
                what: "input bounds",
                expected: n_u,
                got: self.u_lo.len().min(self.u_hi.len()),
            });
        }
        if self.u_lo.iter().zip(&self.u_hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::InvalidParameter("input lower bound above upper bound".into()));
        }
        for b in &self.state_boxes {
            if b.index >= n_x {
                return Err(Error::InvalidDimension(format!("state box on coordinate {} >= n_x", b.index)));
            }
            if !(b.lower <= b.upper) {
                return Err(Error::InvalidParameter(format!(
                    "state box on coordinate {} has lower above upper",
                    b.index
                )));
            }
        }
        Ok(())
    }

    /// Clip stacked inputs into the box.
    pub fn project_inputs(&self, w: &mut [f64]) {
        let n_u = self.u_lo.len();
        for (i, v) in w.iter_mut().enumerate() {
            *v = v.clamp(self.u_lo[i % n_u], self.u_hi[i % n_u]);
        }
    }

    pub fn inputs_feasible(&self, w: &[f64]) -> bool {
        let n_u = self.u_lo.len();
        w.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.u_lo[i % n_u] && *v <= self.u_hi[i % n_u])
    }

    /// Largest state-box violation over all nodes (the root included).
    pub fn state_violation(&self, traj: &TrajectoryBundle) -> f64 {
        let mut worst: f64 = 0.0;
        for id in 0..traj.num_nodes() {
            let x = traj.x(id);
            for b in &self.state_boxes {
                worst = worst.max(b.lower - x[b.index]).max(x[b.index] - b.upper);
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub inputs: Vec<f64>,
    pub trajectory: TrajectoryBundle,
    pub value: f64,
    pub optimality_error: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// State-box multipliers, two per (non-root node, box): lower then upper.
    pub state_multipliers: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    /// Budget of accepted projected-gradient steps across all outer loops.
    pub max_iters: usize,
    pub feas_tol: f64,
    pub rho0: f64,
    pub max_outer: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iters: 20_000,
            feas_tol: 1e-6,
            rho0: 10.0,
            max_outer: 30,
        }
    }
}

/// One inequality-bounded quantity with its multipliers, used by
/// [`optimality_error`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerm {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub mult_lower: f64,
    pub mult_upper: f64,
}

const S_MAX: f64 = 100.0;

/// Scaled KKT residual with zero barrier parameter:
/// `max(‖∇ₓL‖∞ / s_d, max violation, max complementarity / s_c)`, with
/// `s_d = s_c = max(s_max, mean |multiplier|) / s_max`, `s_max = 100`.
/// `stationarity` is the full Lagrangian gradient, bound multipliers
/// included.
pub fn optimality_error(stationarity: &[f64], bounds: &[BoundTerm]) -> f64 {
    let mut mult_sum = 0.0;
    let mut mult_count = 0usize;
    let mut viol: f64 = 0.0;
    let mut compl: f64 = 0.0;
    for b in bounds {
        if b.lower.is_finite() {
            mult_sum += b.mult_lower.abs();
            mult_count += 1;
            viol = viol.max(b.lower - b.value);
            compl = compl.max((b.mult_lower * (b.value - b.lower)).abs());
        }
        if b.upper.is_finite() {
            mult_sum += b.mult_upper.abs();
            mult_count += 1;
            viol = viol.max(b.value - b.upper);
            compl = compl.max((b.mult_upper * (b.upper - b.value)).abs());
        }
    }
    let mean = if mult_count > 0 { mult_sum / mult_count as f64 } else { 0.0 };
    let s = S_MAX.max(mean) / S_MAX;
    (inf_norm(stationarity) / s).max(viol).max(compl / s)
}

/// How state boxes enter an evaluation.
#[derive(Clone, Copy)]
enum StateTerms<'m> {
    None,
    /// `Σ (1/2ρ)[max(0, λ + ρg)² − λ²]`.
    AugLag { mults: &'m [f64], rho: f64 },
    /// `Σ λ g`.
    Linear { mults: &'m [f64] },
}

/// Tree dynamics from a fixed measured state plus the feasible-set
/// description.
#[derive(Debug, Clone)]
pub struct CondensedProblem<'a> {
    tree: &'a ScenarioTree,
    model: &'a MoEModel,
    x0: Vec<f64>,
    free: TrajectoryBundle,
    constraints: ConstraintSet,
}

/// Build the affine state map for measured state `x0`.
pub fn condense<'a>(
    tree: &'a ScenarioTree,
    model: &'a MoEModel,
    x0: &[f64],
    constraints: ConstraintSet,
) -> Result<CondensedProblem<'a>> {
    model.check_tree(tree)?;
    model.check_state(x0)?;
    constraints.validate(model.n_x(), model.n_u())?;
    let free = model.rollout(tree, x0, &vec![0.0; tree.num_nonleaf() * model.n_u()])?;
    Ok(CondensedProblem {
        tree,
        model,
        x0: x0.to_vec(),
        free,
        constraints,
    })
}

struct Workspace {
    traj: TrajectoryBundle,
    grad: NodeGradient,
}

impl<'a> CondensedProblem<'a> {
    pub fn tree(&self) -> &'a ScenarioTree {
        self.tree
    }

    pub fn model(&self) -> &'a MoEModel {
        self.model
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    /// Length of the stacked input vector.
    pub fn num_inputs(&self) -> usize {
        self.tree.num_nonleaf() * self.model.n_u()
    }

    /// Offsets `e^ι`: node states under zero inputs.
    pub fn free_response(&self, node: usize) -> &[f64] {
        self.free.x(node)
    }

    /// Dense block `E^ι` (`n_x × num_inputs`).
    pub fn dense_map(&self, node: usize) -> DMatrix<f64> {
        let n = self.num_inputs();
        let n_x = self.model.n_x();
        let mut e = DMatrix::zeros(n_x, n);
        let zero = vec![0.0; n_x];
        let mut traj = TrajectoryBundle::zeros(self.tree, n_x, self.model.n_u());
        for j in 0..n {
            traj.u.iter_mut().for_each(|v| *v = 0.0);
            traj.u[j] = 1.0;
            traj.x[..n_x].copy_from_slice(&zero);
            self.model.propagate(self.tree, &mut traj);
            for r in 0..n_x {
                e[(r, j)] = traj.x(node)[r];
            }
        }
        e
    }

    /// States for stacked inputs `w`.
    pub fn states(&self, w: &[f64]) -> Result<TrajectoryBundle> {
        self.model.rollout(self.tree, &self.x0, w)
    }

    fn workspace(&self) -> Workspace {
        let mut traj = TrajectoryBundle::zeros(self.tree, self.model.n_x(), self.model.n_u());
        traj.x[..self.model.n_x()].copy_from_slice(&self.x0);
        Workspace {
            grad: traj.clone(),
            traj,
        }
    }

    fn num_state_constraints(&self) -> usize {
        2 * self.constraints.state_boxes.len() * (self.tree.len() - 1)
    }

    /// Constraint values `g ≤ 0`: for each non-root node and box, `lo − x`
    /// then `x − hi`.
    fn state_constraint_values(&self, traj: &TrajectoryBundle) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.num_state_constraints());
        for id in 1..self.tree.len() {
            let x = traj.x(id);
            for b in &self.constraints.state_boxes {
                g.push(b.lower - x[b.index]);
                g.push(x[b.index] - b.upper);
            }
        }
        g
    }

    fn set_inputs(&self, ws: &mut Workspace, w: &[f64]) {
        ws.traj.u.copy_from_slice(w);
        self.model.propagate(self.tree, &mut ws.traj);
    }

    fn state_term_value(&self, traj: &TrajectoryBundle, terms: StateTerms<'_>) -> f64 {
        match terms {
            StateTerms::None => 0.0,
            StateTerms::AugLag { mults, rho } => self
                .state_constraint_values(traj)
                .iter()
                .zip(mults)
                .map(|(g, l)| {
                    let s = (l + rho * g).max(0.0);
                    (s * s - l * l) / (2.0 * rho)
                })
                .sum(),
            StateTerms::Linear { mults } => self
                .state_constraint_values(traj)
                .iter()
                .zip(mults)
                .map(|(g, l)| g * l)
                .sum(),
        }
    }

    fn value_at(&self, ws: &mut Workspace, obj: &dyn TreeObjective, w: &[f64], terms: StateTerms<'_>) -> f64 {
        self.set_inputs(ws, w);
        match obj.value(&ws.traj) {
            Ok(v) => v + self.state_term_value(&ws.traj, terms),
            Err(_) => f64::NAN,
        }
    }

    /// Value and input gradient at `w` (written into `gw`).
    fn value_grad_at(
        &self,
        ws: &mut Workspace,
        obj: &dyn TreeObjective,
        w: &[f64],
        terms: StateTerms<'_>,
        gw: &mut [f64],
    ) -> Result<f64> {
        self.set_inputs(ws, w);
        let mut f = obj.value_and_gradient(&ws.traj, &mut ws.grad)?;
        if !matches!(terms, StateTerms::None) {
            let nb = self.constraints.state_boxes.len();
            let g = self.state_constraint_values(&ws.traj);
            let (mults, rho) = match terms {
                StateTerms::AugLag { mults, rho } => (mults, Some(rho)),
                StateTerms::Linear { mults } => (mults, None),
                StateTerms::None => unreachable!(),
            };
            for id in 1..self.tree.len() {
                let gx = ws.grad.x_mut(id);
                for (b, sb) in self.constraints.state_boxes.iter().enumerate() {
                    let c = ((id - 1) * nb + b) * 2;
                    for side in 0..2 {
                        let (l, gv) = (mults[c + side], g[c + side]);
                        let dpsi = match rho {
                            Some(rho) => {
                                let s = (l + rho * gv).max(0.0);
                                f += (s * s - l * l) / (2.0 * rho);
                                s
                            }
                            None => {
                                f += l * gv;
                                l
                            }
                        };
                        gx[sb.index] += if side == 0 { -dpsi } else { dpsi };
                    }
                }
            }
        }
        self.adjoint(&mut ws.grad);
        gw.copy_from_slice(&ws.grad.u);
        Ok(f)
    }

    /// Fold state gradients back onto the inputs: after this call `grad.u`
    /// holds the total derivative with respect to the stacked inputs.
    pub fn adjoint(&self, grad: &mut NodeGradient) {
        let n_x = self.model.n_x();
        let n_u = self.model.n_u();
        let mut lam_u = vec![0.0; n_u];
        for node in self.tree.nodes()[1..].iter().rev() {
            let p = node.parent.expect("non-root");
            let mode = node.mode.expect("non-root");
            let (head, tail) = grad.x.split_at_mut(node.id * n_x);
            let lam = &tail[..n_x];
            mat_t_vec_add(&mut head[p * n_x..(p + 1) * n_x], self.model.a(mode), lam);
            lam_u.iter_mut().for_each(|v| *v = 0.0);
            mat_t_vec_add(&mut lam_u, self.model.b(mode), lam);
            for (g, v) in grad.u[p * n_u..(p + 1) * n_u].iter_mut().zip(&lam_u) {
                *g += v;
            }
        }
    }

    /// Input-box stationarity: gradient with the sign-consistent part at
    /// active bounds removed.
    fn input_stationarity(&self, w: &[f64], g: &[f64]) -> Vec<f64> {
        let n_u = self.model.n_u();
        w.iter()
            .zip(g)
            .enumerate()
            .map(|(i, (&wi, &gi))| {
                let (lo, hi) = (self.constraints.u_lo[i % n_u], self.constraints.u_hi[i % n_u]);
                if (wi <= lo && gi > 0.0) || (wi >= hi && gi < 0.0) {
                    0.0
                } else {
                    gi
                }
            })
            .collect()
    }

    fn kkt_error(&self, w: &[f64], lag_grad: &[f64], traj: &TrajectoryBundle, mults: &[f64]) -> f64 {
        let n_u = self.model.n_u();
        let stat = self.input_stationarity(w, lag_grad);
        let mut bounds = Vec::with_capacity(w.len() + mults.len() / 2);
        for (i, (&wi, (&gi, &si))) in w.iter().zip(lag_grad.iter().zip(&stat)).enumerate() {
            let mult = gi - si;
            bounds.push(BoundTerm {
                value: wi,
                lower: self.constraints.u_lo[i % n_u],
                upper: self.constraints.u_hi[i % n_u],
                mult_lower: mult.max(0.0),
                mult_upper: (-mult).max(0.0),
            });
        }
        let nb = self.constraints.state_boxes.len();
        for id in 1..self.tree.len() {
            let x = traj.x(id);
            for (b, sb) in self.constraints.state_boxes.iter().enumerate() {
                let c = ((id - 1) * nb + b) * 2;
                bounds.push(BoundTerm {
                    value: x[sb.index],
                    lower: sb.lower,
                    upper: sb.upper,
                    mult_lower: mults.get(c).copied().unwrap_or(0.0),
                    mult_upper: mults.get(c + 1).copied().unwrap_or(0.0),
                });
            }
        }
        optimality_error(&stat, &bounds)
    }

    /// Optimality error of `obj` at inputs `w` given state-box multipliers
    /// (empty slice means all zero).
    pub fn optimality_error(&self, obj: &dyn TreeObjective, w: &[f64], state_mults: &[f64]) -> Result<f64> {
        let zeros;
        let mults = if state_mults.is_empty() {
            zeros = vec![0.0; self.num_state_constraints()];
            &zeros[..]
        } else if state_mults.len() == self.num_state_constraints() {
            state_mults
        } else {
            return Err(Error::DimensionMismatch {
                what: "state multipliers",
                expected: self.num_state_constraints(),
                got: state_mults.len(),
            });
        };
        let mut ws = self.workspace();
        let mut g = vec![0.0; w.len()];
        self.value_grad_at(&mut ws, obj, w, StateTerms::Linear { mults }, &mut g)?;
        Ok(self.kkt_error(w, &g, &ws.traj, mults))
    }

    /// Accelerated projected gradient on `obj` plus the state terms, from
    /// `w`. Returns the iterate, its value and the number of accepted steps.
    fn apg(
        &self,
        ws: &mut Workspace,
        obj: &dyn TreeObjective,
        terms: StateTerms<'_>,
        w0: &[f64],
        tol: f64,
        budget: usize,
    ) -> Result<(Vec<f64>, f64, usize, bool)> {
        let n = w0.len();
        let mut x = w0.to_vec();
        let mut gx = vec![0.0; n];
        let mut fx = self.value_grad_at(ws, obj, &x, terms, &mut gx)?;
        if !fx.is_finite() {
            return Err(Error::NumericalFailure("non-finite objective at start point".into()));
        }
        if inf_norm(&self.input_stationarity(&x, &gx)) <= tol {
            return Ok((x, fx, 0, true));
        }
        let mut y = x.clone();
        let mut gy = gx.clone();
        let mut fy = fx;
        let mut t = 1.0f64;
        // first trial step: unit move of the largest gradient entry
        let mut s = 1.0 / inf_norm(&gx).max(1e-12);
        let mut y_prev: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut cand = vec![0.0; n];
        let mut gc = vec![0.0; n];
        let mut iters = 0;
        while iters < budget {
            if let Some((yp, gp)) = &y_prev {
                let mut ss = 0.0;
                let mut sg = 0.0;
                for i in 0..n {
                    let dy = y[i] - yp[i];
                    let dg = gy[i] - gp[i];
                    ss += dy * dy;
                    sg += dy * dg;
                }
                if sg > 0.0 && ss > 0.0 {
                    s = (ss / sg).clamp(s * 0.25, s * 4.0);
                } else {
                    s *= 2.0;
                }
            }
            // backtracking from y
            let fc = loop {
                for i in 0..n {
                    cand[i] = y[i] - s * gy[i];
                }
                self.constraints.project_inputs(&mut cand);
                let mut lin = 0.0;
                let mut sq = 0.0;
                for i in 0..n {
                    let d = cand[i] - y[i];
                    lin += gy[i] * d;
                    sq += d * d;
                }
                let fc = self.value_at(ws, obj, &cand, terms);
                let slack = 1e-14 * (1.0 + fy.abs());
                if fc.is_finite() && fc <= fy + lin + sq / (2.0 * s) + slack {
                    break Some(fc);
                }
                s *= 0.5;
                if s < 1e-300 || sq == 0.0 {
                    break None;
                }
            };
            let Some(fc) = fc else {
                return Ok((x, fx, iters, false));
            };
            if fc > fx + 1e-14 * (1.0 + fx.abs()) {
                if y == x {
                    return Ok((x, fx, iters, false));
                }
                // momentum overshoot: restart from the last accepted point
                y.copy_from_slice(&x);
                gy.copy_from_slice(&gx);
                fy = fx;
                t = 1.0;
                y_prev = None;
                continue;
            }
            iters += 1;
            let fc = self.value_grad_at(ws, obj, &cand, terms, &mut gc)?;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y_prev = Some((y.clone(), gy.clone()));
            let moved = x.iter().zip(&cand).any(|(a, b)| a != b);
            for i in 0..n {
                y[i] = cand[i] + beta * (cand[i] - x[i]);
            }
            x.copy_from_slice(&cand);
            gx.copy_from_slice(&gc);
            fx = fc;
            t = t_next;
            if inf_norm(&self.input_stationarity(&x, &gx)) <= tol {
                return Ok((x, fx, iters, true));
            }
            if !moved {
                return Ok((x, fx, iters, false));
            }
            if beta == 0.0 {
                gy.copy_from_slice(&gx);
                fy = fx;
            } else {
                fy = self.value_grad_at(ws, obj, &y, terms, &mut gy).unwrap_or(f64::NAN);
                if !fy.is_finite() {
                    y.copy_from_slice(&x);
                    gy.copy_from_slice(&gx);
                    fy = fx;
                    t = 1.0;
                    y_prev = None;
                }
            }
        }
        Ok((x, fx, iters, false))
    }

    /// Minimize `obj` over the feasible set from warm start `w0`.
    pub fn solve(&self, obj: &dyn TreeObjective, w0: &[f64], opts: &SolveOptions) -> Result<SolveOutcome> {
        if w0.len() != self.num_inputs() {
            return Err(Error::DimensionMismatch {
                what: "warm start",
                expected: self.num_inputs(),
                got: w0.len(),
            });
        }
        if !(opts.tol > 0.0 && opts.feas_tol > 0.0 && opts.rho0 > 0.0) {
            return Err(Error::InvalidParameter("solver tolerances must be positive".into()));
        }
        let mut ws = self.workspace();
        let mut w = w0.to_vec();
        self.constraints.project_inputs(&mut w);
        let start = w.clone();
        let f_start = self.value_at(&mut ws, obj, &start, StateTerms::None);
        if !f_start.is_finite() {
            return Err(Error::NumericalFailure("non-finite objective at warm start".into()));
        }
        let start_viol = self.constraints.state_violation(&ws.traj);

        let m = self.num_state_constraints();
        let mut mults = vec![0.0; m];
        let mut rho = opts.rho0;
        let mut prev_viol = f64::INFINITY;
        let mut iters = 0;
        let mut status = SolveStatus::MaxIterations;
        let mut kkt = f64::INFINITY;
        for _ in 0..opts.max_outer.max(1) {
            let terms = if m == 0 {
                StateTerms::None
            } else {
                StateTerms::AugLag { mults: &mults, rho }
            };
            let (wn, _, it, _) = match self.apg(&mut ws, obj, terms, &w, opts.tol, opts.max_iters - iters) {
                Ok(r) => r,
                Err(Error::NumericalFailure(_)) | Err(Error::NonFinite(_)) => {
                    status = SolveStatus::NumericalFailure;
                    break;
                }
                Err(e) => return Err(e),
            };
            w = wn;
            iters += it;
            self.set_inputs(&mut ws, &w);
            let g = self.state_constraint_values(&ws.traj);
            let viol = g.iter().fold(0.0f64, |a, v| a.max(*v));
            for (l, gv) in mults.iter_mut().zip(&g) {
                *l = (*l + rho * gv).max(0.0);
            }
            let mut lg = vec![0.0; w.len()];
            self.value_grad_at(&mut ws, obj, &w, StateTerms::Linear { mults: &mults }, &mut lg)?;
            kkt = self.kkt_error(&w, &lg, &ws.traj, &mults);
            if kkt <= opts.tol && viol <= opts.feas_tol {
                status = SolveStatus::Converged;
                break;
            }
            if m == 0 || iters >= opts.max_iters {
                break;
            }
            if viol > opts.feas_tol && viol > 0.5 * prev_viol {
                rho = (rho * 10.0).min(1e10);
            }
            prev_viol = viol;
        }

        let mut value = self.value_at(&mut ws, obj, &w, StateTerms::None);
        if status == SolveStatus::NumericalFailure || !value.is_finite() {
            w = start.clone();
            value = f_start;
            status = SolveStatus::NumericalFailure;
        } else if value > f_start + 1e-12 && start_viol <= opts.feas_tol {
            w = start.clone();
            value = f_start;
            kkt = self.optimality_error(obj, &w, &[])?;
            mults.iter_mut().for_each(|v| *v = 0.0);
            status = if kkt <= opts.tol {
                SolveStatus::Converged
            } else {
                SolveStatus::MaxIterations
            };
        }
        let trajectory = self.states(&w)?;
        Ok(SolveOutcome {
            inputs: w,
            trajectory,
            value,
            optimality_error: kkt,
            iterations: iters,
            status,
            state_multipliers: mults,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    /// `½ Σ_ι ‖u_ι − c‖²` over inputs only.
    struct InputQuadratic {
        target: f64,
    }

    impl TreeObjective for InputQuadratic {
        fn value(&self, traj: &TrajectoryBundle) -> Result<f64> {
            Ok(traj.u.iter().map(|u| 0.5 * (u - self.target).powi(2)).sum())
        }

        fn value_and_gradient(&self, traj: &TrajectoryBundle, grad: &mut NodeGradient) -> Result<f64> {
            grad.x.iter_mut().for_each(|v| *v = 0.0);
            for (g, u) in grad.u.iter_mut().zip(&traj.u) {
                *g = u - self.target;
            }
            self.value(traj)
        }
    }

    /// `½ Σ_ι ‖x_ι − c‖²` over states.
    struct StateQuadratic {
        target: f64,
    }

    impl TreeObjective for StateQuadratic {
        fn value(&self, traj: &TrajectoryBundle) -> Result<f64> {
            Ok(traj.x.iter().map(|x| 0.5 * (x - self.target).powi(2)).sum())
        }

        fn value_and_gradient(&self, traj: &TrajectoryBundle, grad: &mut NodeGradient) -> Result<f64> {
            grad.u.iter_mut().for_each(|v| *v = 0.0);
            for (g, x) in grad.x.iter_mut().zip(&traj.x) {
                *g = x - self.target;
            }
            self.value(traj)
        }
    }

    fn scalar_integrator(d: usize) -> MoEModel {
        MoEModel::new(
            DMatrix::zeros(d, 1),
            vec![dmatrix![1.0]; d],
            vec![dmatrix![1.0]; d],
        )
        .unwrap()
    }

    #[test]
    fn clipped_scalar_minimizer() {
        let tree = ScenarioTree::build(1, 1, 0).unwrap();
        let model = scalar_integrator(1);
        let cons = ConstraintSet {
            u_lo: vec![-1.0],
            u_hi: vec![1.0],
            state_boxes: vec![],
        };
        let p = condense(&tree, &model, &[0.0], cons).unwrap();
        let out = p.solve(&InputQuadratic { target: 2.0 }, &[0.0], &SolveOptions::default()).unwrap();
        assert_eq!(out.inputs, vec![1.0]);
        assert_eq!(out.status, SolveStatus::Converged);
        assert!(out.optimality_error <= 1e-8);
    }

    #[test]
    fn hand_expanded_condensing() {
        let tree = ScenarioTree::build(1, 2, 0).unwrap();
        let model = scalar_integrator(1);
        let p = condense(&tree, &model, &[0.7], ConstraintSet::unconstrained(1)).unwrap();
        for id in 0..3 {
            assert_eq!(p.free_response(id), &[0.7]);
        }
        assert_eq!(p.dense_map(0), dmatrix![0.0, 0.0]);
        assert_eq!(p.dense_map(1), dmatrix![1.0, 0.0]);
        assert_eq!(p.dense_map(2), dmatrix![1.0, 1.0]);
    }

    #[test]
    fn unconstrained_state_tracking() {
        // x1 = x0 + u0, x2 = x1 + u1, min ½Σ(x − 3)² → x1 = x2 = 3
        let tree = ScenarioTree::build(1, 2, 0).unwrap();
        let model = scalar_integrator(1);
        let p = condense(&tree, &model, &[3.0], ConstraintSet::unconstrained(1)).unwrap();
        let opts = SolveOptions {
            tol: 1e-10,
            ..SolveOptions::default()
        };
        let out = p.solve(&StateQuadratic { target: 3.0 }, &[1.0, -2.0], &opts).unwrap();
        assert!(out.inputs.iter().all(|u| u.abs() < 1e-9), "{:?}", out.inputs);
    }

    #[test]
    fn state_box_enforced() {
        // pull states to 3 but cap them at 2
        let tree = ScenarioTree::build(2, 2, 1).unwrap();
        let model = scalar_integrator(2);
        let cons = ConstraintSet {
            u_lo: vec![-10.0],
            u_hi: vec![10.0],
            state_boxes: vec![StateBox {
                index: 0,
                lower: -5.0,
                upper: 2.0,
            }],
        };
        let p = condense(&tree, &model, &[0.0], cons).unwrap();
        let out = p
            .solve(&StateQuadratic { target: 3.0 }, &vec![0.0; p.num_inputs()], &SolveOptions::default())
            .unwrap();
        assert_eq!(out.status, SolveStatus::Converged);
        assert!(p.constraints().state_violation(&out.trajectory) <= 1e-6);
        for id in 1..tree.len() {
            assert!((out.trajectory.x(id)[0] - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn optimality_error_definition() {
        assert_eq!(optimality_error(&[0.0, 0.0], &[]), 0.0);
        assert_eq!(optimality_error(&[0.3, -0.5], &[]), 0.5);
        // active lower bound with its complementary multiplier
        let b = BoundTerm {
            value: 1.0,
            lower: 1.0,
            upper: f64::INFINITY,
            mult_lower: 2.0,
            mult_upper: 0.0,
        };
        assert!(optimality_error(&[0.0], &[b]) <= 1e-8);
        // large multipliers rescale stationarity
        let big = BoundTerm { mult_lower: 400.0, ..b };
        assert!((optimality_error(&[1.0], &[big]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn adjoint_matches_dense_transpose() {
        let tree = ScenarioTree::build(2, 3, 2).unwrap();
        let model = MoEModel::new(
            DMatrix::zeros(2, 2),
            vec![dmatrix![1.0, 0.1; 0.0, 1.0], dmatrix![0.9, 0.0; 0.2, 1.1]],
            vec![dmatrix![0.0; 0.1], dmatrix![0.3; 0.05]],
        )
        .unwrap();
        let p = condense(&tree, &model, &[1.0, -1.0], ConstraintSet::unconstrained(1)).unwrap();
        let mut g = TrajectoryBundle::zeros(&tree, 2, 1);
        for (i, v) in g.x.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let gx = g.x.clone();
        p.adjoint(&mut g);
        let mut expect = vec![0.0; p.num_inputs()];
        for id in 1..tree.len() {
            let e = p.dense_map(id);
            for j in 0..expect.len() {
                expect[j] += e[(0, j)] * gx[2 * id] + e[(1, j)] * gx[2 * id + 1];
            }
        }
        for (a, b) in g.u.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
