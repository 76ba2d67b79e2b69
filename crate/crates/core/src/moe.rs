//! Mixture-of-experts switched linear dynamics.
//!
//! The mode at each step is drawn from `softmax(Θ x)` and the state advances
//! with the selected expert, `x⁺ = A_ξ x + B_ξ u`. Affine gates are handled by
//! augmenting the state with a constant-1 coordinate; there is no separate
//! bias term.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{lse, mat_vec_add, softmax_into};
use crate::tree::ScenarioTree;

#[derive(Debug, Clone)]
pub struct MoEModel {
    theta: DMatrix<f64>,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
}

impl MoEModel {
    /// `theta` is `d × n_x`; `a[i]` is `n_x × n_x`; `b[i]` is `n_x × n_u`.
    pub fn new(theta: DMatrix<f64>, a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = theta.nrows();
        let n_x = theta.ncols();
        if d == 0 || n_x == 0 {
            return Err(Error::InvalidDimension("empty gate matrix".into()));
        }
        if a.len() != d || b.len() != d {
            return Err(Error::DimensionMismatch {
                what: "expert count",
                expected: d,
                got: a.len().min(b.len()),
            });
        }
        let n_u = b[0].ncols();
        for (ai, bi) in a.iter().zip(&b) {
            if ai.shape() != (n_x, n_x) {
                return Err(Error::InvalidDimension(format!(
                    "A is {:?}, expected {:?}",
                    ai.shape(),
                    (n_x, n_x)
                )));
            }
            if bi.shape() != (n_x, n_u) {
                return Err(Error::InvalidDimension(format!(
                    "B is {:?}, expected {:?}",
                    bi.shape(),
                    (n_x, n_u)
                )));
            }
        }
        if theta.iter().chain(a.iter().flatten()).chain(b.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { theta, a, b })
    }

    pub fn modes(&self) -> usize {
        self.theta.nrows()
    }

    pub fn n_x(&self) -> usize {
        self.theta.ncols()
    }

    pub fn n_u(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn a(&self, mode: usize) -> &DMatrix<f64> {
        &self.a[mode]
    }

    pub fn b(&self, mode: usize) -> &DMatrix<f64> {
        &self.b[mode]
    }

    pub(crate) fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_x() {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: self.n_x(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_tree(&self, tree: &ScenarioTree) -> Result<()> {
        if tree.modes() != self.modes() {
            return Err(Error::DimensionMismatch {
                what: "tree mode count",
                expected: self.modes(),
                got: tree.modes(),
            });
        }
        Ok(())
    }

    /// Gate logits `Θ x` written into `out` (length `d`).
    #[inline]
    pub fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_add(out, &self.theta, x);
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let mut z = vec![0.0; self.modes()];
        self.logits_into(x, &mut z);
        Ok(z)
    }

    /// `σ(Θ x)`.
    pub fn gate_distribution(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.logits(x)?;
        let mut p = vec![0.0; z.len()];
        softmax_into(&z, &mut p);
        Ok(p)
    }

    /// `A_ξ x + B_ξ u` into `out` without dimension checks.
    #[inline]
    pub fn step_into(&self, x: &[f64], u: &[f64], mode: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        mat_vec_add(out, &self.a[mode], x);
        mat_vec_add(out, &self.b[mode], u);
    }

    pub fn step(&self, x: &[f64], u: &[f64], mode: usize) -> Result<Vec<f64>> {
        self.check_state(x)?;
        if u.len() != self.n_u() {
            return Err(Error::DimensionMismatch {
                what: "input",
                expected: self.n_u(),
                got: u.len(),
            });
        }
        if mode >= self.modes() {
            return Err(Error::ModeOutOfRange {
                mode,
                modes: self.modes(),
            });
        }
        let mut out = vec![0.0; self.n_x()];
        self.step_into(x, u, mode, &mut out);
        Ok(out)
    }

    /// Simulate the tree dynamics from `x0` with inputs `u` stacked per
    /// non-leaf node (node-id order, `n_u` entries each).
    pub fn rollout(&self, tree: &ScenarioTree, x0: &[f64], u: &[f64]) -> Result<TrajectoryBundle> {
        self.check_tree(tree)?;
        self.check_state(x0)?;
        let need = tree.num_nonleaf() * self.n_u();
        if u.len() != need {
            return Err(Error::DimensionMismatch {
                what: "stacked inputs",
                expected: need,
                got: u.len(),
            });
        }
        let mut traj = TrajectoryBundle::zeros(tree, self.n_x(), self.n_u());
        traj.u.copy_from_slice(u);
        traj.x[..self.n_x()].copy_from_slice(x0);
        self.propagate(tree, &mut traj);
        Ok(traj)
    }

    /// Recompute every non-root state of `traj` from its root state and inputs.
    pub fn propagate(&self, tree: &ScenarioTree, traj: &mut TrajectoryBundle) {
        let n_x = self.n_x();
        let mut buf = vec![0.0; n_x];
        for node in &tree.nodes()[1..] {
            let p = node.parent.expect("non-root");
            let mode = node.mode.expect("non-root");
            self.step_into(traj.x(p), traj.u(p), mode, &mut buf);
            traj.x_mut(node.id).copy_from_slice(&buf);
        }
    }

    /// Per-node log-probability of reaching the node from the root. Only
    /// branching edges contribute; frozen edges carry probability one.
    pub fn node_log_probs(&self, tree: &ScenarioTree, traj: &TrajectoryBundle) -> Vec<f64> {
        let d = self.modes();
        let mut acc = vec![0.0; tree.len()];
        let mut z = vec![0.0; d];
        for k in 0..tree.branching_horizon() {
            for id in tree.stage_range(k) {
                self.logits_into(traj.x(id), &mut z);
                let norm = lse(&z);
                let base = acc[id];
                for (&c, zj) in tree.node(id).children.iter().zip(&z) {
                    acc[c] = base + (zj - norm);
                }
            }
        }
        for k in tree.branching_horizon()..tree.horizon() {
            for id in tree.stage_range(k) {
                let c = tree.node(id).children[0];
                acc[c] = acc[id];
            }
        }
        acc
    }

    /// `ln p(s | x)` for every scenario, in leaf order.
    pub fn scenario_log_probs(&self, tree: &ScenarioTree, traj: &TrajectoryBundle) -> Result<Vec<f64>> {
        self.check_tree(tree)?;
        traj.check(tree, self.n_x(), self.n_u())?;
        let acc = self.node_log_probs(tree, traj);
        Ok(acc[tree.first_leaf()..].to_vec())
    }

    /// Draw a mode from the gate at `x`.
    pub fn sample_mode<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<usize> {
        let p = self.gate_distribution(x)?;
        let r: f64 = rng.random();
        let mut c = 0.0;
        for (i, pi) in p.iter().enumerate() {
            c += pi;
            if r < c {
                return Ok(i);
            }
        }
        // r landed in the rounding gap above the cumulative sum
        Ok(p.iter()
            .rposition(|&pi| pi > 0.0)
            .unwrap_or(p.len() - 1))
    }
}

/// States for every tree node and inputs for every non-leaf node, flat and
/// indexed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    n_x: usize,
    n_u: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

impl TrajectoryBundle {
    pub fn zeros(tree: &ScenarioTree, n_x: usize, n_u: usize) -> Self {
        Self {
            n_x,
            n_u,
            x: vec![0.0; tree.len() * n_x],
            u: vec![0.0; tree.num_nonleaf() * n_u],
        }
    }

    pub fn from_parts(n_x: usize, n_u: usize, x: Vec<f64>, u: Vec<f64>) -> Self {
        Self { n_x, n_u, x, u }
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn num_nodes(&self) -> usize {
        self.x.len() / self.n_x
    }

    #[inline]
    pub fn x(&self, node: usize) -> &[f64] {
        &self.x[node * self.n_x..(node + 1) * self.n_x]
    }

    #[inline]
    pub fn x_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.x[node * self.n_x..(node + 1) * self.n_x]
    }

    #[inline]
    pub fn u(&self, node: usize) -> &[f64] {
        &self.u[node * self.n_u..(node + 1) * self.n_u]
    }

    #[inline]
    pub fn u_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.u[node * self.n_u..(node + 1) * self.n_u]
    }

    pub(crate) fn check(&self, tree: &ScenarioTree, n_x: usize, n_u: usize) -> Result<()> {
        if self.n_x != n_x || self.x.len() != tree.len() * n_x {
            return Err(Error::DimensionMismatch {
                what: "bundle states",
                expected: tree.len() * n_x,
                got: self.x.len(),
            });
        }
        if self.n_u != n_u || self.u.len() != tree.num_nonleaf() * n_u {
            return Err(Error::DimensionMismatch {
                what: "bundle inputs",
                expected: tree.num_nonleaf() * n_u,
                got: self.u.len(),
            });
        }
        Ok(())
    }
}
