//! Convex majorizers of the optimistic and pessimistic risk losses.
//!
//! Both surrogates are expanded at one linearization bundle (the current
//! iterate): the collision terms use their convex upper bound there, and the
//! pessimistic variant also linearizes the log-normalizer of every gate.

use crate::error::{Error, Result};
use crate::moe::{MoEModel, TrajectoryBundle};
use crate::numeric::{dot, log_softmax, lse, softmax, softmax_into};
use crate::objective::{
    add_log_prob_gradient, aggregate_weights, path_sums, CostSpec, Formulation, NodeGradient, OcpData,
    RiskObjective, TreeObjective,
};
use crate::tree::ScenarioTree;

#[derive(Debug, Clone)]
pub struct SurrogateParams {
    pub variant: Formulation,
    /// `ln Π` over scenarios; optimistic only.
    pub log_pi: Option<Vec<f64>>,
    pub x_lin: TrajectoryBundle,
    pub gamma: f64,
}

impl SurrogateParams {
    pub fn pi(&self) -> Option<Vec<f64>> {
        self.log_pi.as_ref().map(|l| l.iter().map(|v| v.exp()).collect())
    }

    /// Parameters that make the surrogate touch `obj` at `traj`.
    pub fn at_iterate(obj: &RiskObjective<'_>, traj: &TrajectoryBundle) -> Result<Self> {
        let gamma = obj.risk.gamma;
        match obj.risk.formulation {
            Formulation::Optimistic => {
                let (lp, l) = obj.scenario_terms(traj);
                Ok(Self {
                    variant: Formulation::Optimistic,
                    log_pi: Some(optimal_log_pi(&lp, &l, gamma)?),
                    x_lin: traj.clone(),
                    gamma,
                })
            }
            Formulation::Pessimistic => Ok(Self {
                variant: Formulation::Pessimistic,
                log_pi: None,
                x_lin: traj.clone(),
                gamma,
            }),
            Formulation::Neutral => Err(Error::VariantMismatch {
                expected: "optimistic or pessimistic",
                got: "neutral",
            }),
        }
    }
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn optimal_log_pi(log_probs: &[f64], losses: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    if log_probs.len() != losses.len() {
        return Err(Error::DimensionMismatch {
            what: "scenario losses",
            expected: log_probs.len(),
            got: losses.len(),
        });
    }
    check_finite("scenario losses", losses)?;
    if log_probs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("scenario log-probabilities".into()));
    }
    let a: Vec<f64> = log_probs.iter().zip(losses).map(|(lp, l)| lp - gamma * l).collect();
    Ok(log_softmax(&a))
}

/// Minimizer of `(1/γ) KL(Π ‖ p) + Πᵀ L` over the simplex.
pub fn optimal_pi(log_probs: &[f64], losses: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let lp = optimal_log_pi(log_probs, losses, gamma)?;
    Ok(lp.iter().map(|v| v.exp()).collect())
}

/// `(1/γ) KL(Π ‖ p) + Πᵀ L`, the objective minimized by [`optimal_pi`].
pub fn pi_objective(pi: &[f64], log_probs: &[f64], losses: &[f64], gamma: f64) -> f64 {
    let mut kl = 0.0;
    let mut lin = 0.0;
    for ((&q, &lp), &l) in pi.iter().zip(log_probs).zip(losses) {
        if q > 0.0 {
            kl += q * (q.ln() - lp);
        }
        lin += q * l;
    }
    kl / gamma + lin
}

/// Node-accumulated linearized log-probabilities: along each branching edge
/// `z_ξ − lse(z̃) − σ(z̃)ᵀ(z − z̃)` with `z = Θx`, `z̃ = Θx̃`.
fn linearized_node_log_probs(
    tree: &ScenarioTree,
    model: &MoEModel,
    traj: &TrajectoryBundle,
    lin: &TrajectoryBundle,
) -> Vec<f64> {
    let d = model.modes();
    let mut acc = vec![0.0; tree.len()];
    let mut z = vec![0.0; d];
    let mut zl = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    for k in 0..tree.horizon() {
        for id in tree.stage_range(k) {
            let node = tree.node(id);
            if tree.is_branching(id) {
                model.logits_into(traj.x(id), &mut z);
                model.logits_into(lin.x(id), &mut zl);
                let norm = softmax_into(&zl, &mut sigma);
                let base = -norm - dot(&sigma, &z) + dot(&sigma, &zl);
                for (&c, zj) in node.children.iter().zip(&z) {
                    acc[c] = acc[id] + zj + base;
                }
            } else {
                for &c in &node.children {
                    acc[c] = acc[id];
                }
            }
        }
    }
    acc
}

/// Per-scenario linearized log-probability `P̂_s(x | x̃)`; affine in the node
/// states and exact at `x = x̃`.
pub fn log_prob_linearization(
    tree: &ScenarioTree,
    model: &MoEModel,
    traj: &TrajectoryBundle,
    lin: &TrajectoryBundle,
) -> Result<Vec<f64>> {
    model.check_tree(tree)?;
    traj.check(tree, model.n_x(), model.n_u())?;
    if lin.x.len() != traj.x.len() {
        return Err(Error::DimensionMismatch {
            what: "linearization bundle",
            expected: traj.x.len(),
            got: lin.x.len(),
        });
    }
    let acc = linearized_node_log_probs(tree, model, traj, lin);
    Ok(acc[tree.first_leaf()..].to_vec())
}

/// A surrogate bound to its problem data, usable by the inner solver.
#[derive(Debug, Clone)]
pub struct Surrogate<'a> {
    pub data: OcpData<'a>,
    pub params: SurrogateParams,
    refs: Vec<Vec<f64>>,
}

impl<'a> Surrogate<'a> {
    pub fn new(data: OcpData<'a>, params: SurrogateParams, x_meas: &[f64]) -> Result<Self> {
        if params.variant == Formulation::Neutral {
            return Err(Error::VariantMismatch {
                expected: "optimistic or pessimistic",
                got: "neutral",
            });
        }
        if !(params.gamma > 0.0) {
            return Err(Error::InvalidParameter("surrogate gamma must be positive".into()));
        }
        params.x_lin.check(data.tree, data.model.n_x(), data.model.n_u())?;
        if params.variant == Formulation::Optimistic {
            let lp = params.log_pi.as_ref().ok_or(Error::InvalidParameter(
                "optimistic surrogate needs a scenario distribution".into(),
            ))?;
            if lp.len() != data.tree.num_scenarios() {
                return Err(Error::DimensionMismatch {
                    what: "scenario distribution",
                    expected: data.tree.num_scenarios(),
                    got: lp.len(),
                });
            }
        }
        data.model.check_state(x_meas)?;
        let refs = data.spec.references(x_meas, data.tree.horizon());
        Ok(Self { data, params, refs })
    }

    fn majorized_losses(&self, traj: &TrajectoryBundle) -> Vec<f64> {
        let OcpData { tree, spec, .. } = self.data;
        path_sums(tree, &spec.node_costs(tree, traj, &self.refs, Some(&self.params.x_lin)))
    }

    fn eval(&self, traj: &TrajectoryBundle, grad: Option<&mut NodeGradient>) -> Result<f64> {
        let OcpData { tree, model, spec } = self.data;
        let g = self.params.gamma;
        let losses = self.majorized_losses(traj);
        let first = tree.first_leaf();
        let (value, cost_w, logp_w, lin) = match self.params.variant {
            Formulation::Optimistic => {
                let log_pi = self.params.log_pi.as_ref().expect("checked in new");
                let lp = model.node_log_probs(tree, traj);
                let mut v = 0.0;
                let mut pi = Vec::with_capacity(log_pi.len());
                for ((lq, l), lps) in log_pi.iter().zip(&losses).zip(&lp[first..]) {
                    let q = lq.exp();
                    if q > 0.0 {
                        v += q * ((lq - lps) / g + l);
                    }
                    pi.push(q);
                }
                let logp_w: Vec<f64> = pi.iter().map(|q| -q / g).collect();
                (v, pi, logp_w, None)
            }
            Formulation::Pessimistic => {
                let acc = linearized_node_log_probs(tree, model, traj, &self.params.x_lin);
                let a: Vec<f64> = acc[first..].iter().zip(&losses).map(|(p, l)| p + g * l).collect();
                let q = softmax(&a);
                let logp_w = q.iter().map(|v| v / g).collect();
                (lse(&a) / g, q, logp_w, Some(&self.params.x_lin))
            }
            Formulation::Neutral => unreachable!("rejected in new"),
        };
        if !value.is_finite() {
            return Err(Error::NonFinite("surrogate value".into()));
        }
        if let Some(grad) = grad {
            grad.x.iter_mut().chain(grad.u.iter_mut()).for_each(|v| *v = 0.0);
            let cw = aggregate_weights(tree, &cost_w);
            spec.add_node_cost_gradient(tree, traj, &self.refs, Some(&self.params.x_lin), &cw, grad)?;
            let vw = aggregate_weights(tree, &logp_w);
            add_log_prob_gradient(tree, model, traj, lin, &vw, grad);
        }
        Ok(value)
    }
}

impl TreeObjective for Surrogate<'_> {
    fn value(&self, traj: &TrajectoryBundle) -> Result<f64> {
        self.eval(traj, None)
    }

    fn value_and_gradient(&self, traj: &TrajectoryBundle, grad: &mut NodeGradient) -> Result<f64> {
        self.eval(traj, Some(grad))
    }
}

fn build<'a>(
    tree: &'a ScenarioTree,
    model: &'a MoEModel,
    spec: &'a CostSpec,
    params: &SurrogateParams,
    traj: &TrajectoryBundle,
    expected: Formulation,
) -> Result<Surrogate<'a>> {
    if params.variant != expected {
        return Err(Error::VariantMismatch {
            expected: expected.name(),
            got: params.variant.name(),
        });
    }
    let data = OcpData::new(tree, model, spec)?;
    traj.check(tree, model.n_x(), model.n_u())?;
    Surrogate::new(data, params.clone(), traj.x(0))
}

/// `(1/γ) KL(Π ‖ P(x)) + Πᵀ L̂(x, u)`.
pub fn optimistic_surrogate(
    tree: &ScenarioTree,
    model: &MoEModel,
    spec: &CostSpec,
    params: &SurrogateParams,
    traj: &TrajectoryBundle,
) -> Result<f64> {
    build(tree, model, spec, params, traj, Formulation::Optimistic)?.value(traj)
}

/// `(1/γ) lse(P̂(x | x̃) + γ L̂(x, u))`.
pub fn pessimistic_surrogate(
    tree: &ScenarioTree,
    model: &MoEModel,
    spec: &CostSpec,
    params: &SurrogateParams,
    traj: &TrajectoryBundle,
) -> Result<f64> {
    build(tree, model, spec, params, traj, Formulation::Pessimistic)?.value(traj)
}

/// Gradient of the surrogate selected by `params.variant`.
pub fn surrogate_gradient(
    tree: &ScenarioTree,
    model: &MoEModel,
    spec: &CostSpec,
    params: &SurrogateParams,
    traj: &TrajectoryBundle,
) -> Result<NodeGradient> {
    let s = build(tree, model, spec, params, traj, params.variant)?;
    let mut grad = TrajectoryBundle::zeros(tree, model.n_x(), model.n_u());
    s.value_and_gradient(traj, &mut grad)?;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{risk_loss, RiskConfig};

    #[test]
    fn optimal_pi_closed_form() {
        let lp = [0.5f64.ln(), 0.5f64.ln()];
        let pi = optimal_pi(&lp, &[0.0, 1.0], 1.0).unwrap();
        let e = (-1f64).exp();
        assert!((pi[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((pi[1] - e / (1.0 + e)).abs() < 1e-12);
        let tight = optimal_pi(&lp, &[3.0, 3.0], 7.0).unwrap();
        assert!((tight[0] - 0.5).abs() < 1e-15);
        assert!(optimal_pi(&lp, &[0.0, 1.0], 0.0).is_err());
        assert!(optimal_pi(&lp, &[0.0, f64::NAN], 1.0).is_err());
    }

    #[test]
    fn pi_objective_at_optimum_is_optimistic_loss() {
        let lp = [0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()];
        let l = [1.0, 4.0, -2.0];
        let g = 0.7;
        let pi = optimal_pi(&lp, &l, g).unwrap();
        let v = pi_objective(&pi, &lp, &l, g);
        let o = risk_loss(&RiskConfig::new(Formulation::Optimistic, g).unwrap(), &lp, &l).unwrap();
        assert!((v - o).abs() < 1e-12);
    }

    #[test]
    fn huge_separation_keeps_log_pi_finite() {
        let lp = [0.5f64.ln(); 2];
        let lpi = optimal_log_pi(&lp, &[0.0, 1e4], 10.0).unwrap();
        assert!(lpi.iter().all(|v| v.is_finite()));
        let pi = optimal_pi(&lp, &[0.0, 1e4], 10.0).unwrap();
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
