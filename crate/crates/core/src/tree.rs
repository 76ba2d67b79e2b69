//! Scenario tree over mode realizations.
//!
//! Nodes are numbered breadth-first, stage by stage, with children ordered by
//! mode index. Every node at a stage `k < N_b` has one child per mode; after
//! that each node has a single child carrying its parent's mode. Leaves are
//! exactly the stage-`N` nodes, so the non-leaf nodes occupy the id range
//! `0..num_nonleaf()` and flat input storage can be indexed by node id.
//!
//! Modes are 0-based indices throughout the crate.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: usize,
    pub stage: usize,
    pub parent: Option<usize>,
    /// Mode realized on the edge from the parent; `None` for the root.
    pub mode: Option<usize>,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub leaf: usize,
    /// Nodes from the root to the leaf's parent.
    pub ancestors: Vec<usize>,
    /// Mode sequence along the path, length `N`.
    pub modes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ScenarioTree {
    modes: usize,
    horizon: usize,
    branching: usize,
    nodes: Vec<Node>,
    scenarios: Vec<Scenario>,
    /// `stage_start[k]..stage_start[k + 1]` are the ids of stage `k`.
    stage_start: Vec<usize>,
}

impl ScenarioTree {
    /// Build the tree for `d` modes, horizon `n` and branching horizon `n_b`.
    pub fn build(d: usize, n: usize, n_b: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidDimension("mode count must be >= 1".into()));
        }
        if n == 0 {
            return Err(Error::InvalidDimension("horizon must be >= 1".into()));
        }
        if n_b > n {
            return Err(Error::InvalidDimension(format!(
                "branching horizon {n_b} exceeds horizon {n}"
            )));
        }
        let leaves = d
            .checked_pow(n_b as u32)
            .ok_or_else(|| Error::InvalidDimension("tree too large".into()))?;
        let count = Self::node_count(d, n, n_b);

        let mut nodes = Vec::with_capacity(count);
        let mut stage_start = Vec::with_capacity(n + 2);
        nodes.push(Node {
            id: 0,
            stage: 0,
            parent: None,
            mode: None,
            children: Vec::new(),
        });
        stage_start.push(0);
        for k in 0..n {
            let (lo, hi) = (stage_start[k], nodes.len());
            stage_start.push(hi);
            for id in lo..hi {
                let child_modes: Vec<usize> = if k < n_b {
                    (0..d).collect()
                } else {
                    vec![nodes[id].mode.unwrap_or(0)]
                };
                for mode in child_modes {
                    let cid = nodes.len();
                    nodes.push(Node {
                        id: cid,
                        stage: k + 1,
                        parent: Some(id),
                        mode: Some(mode),
                        children: Vec::new(),
                    });
                    nodes[id].children.push(cid);
                }
            }
        }
        stage_start.push(nodes.len());
        debug_assert_eq!(nodes.len(), count);

        let first_leaf = stage_start[n];
        let scenarios = (first_leaf..nodes.len())
            .map(|leaf| {
                let mut ancestors = Vec::with_capacity(n);
                let mut modes = Vec::with_capacity(n);
                let mut cur = leaf;
                while let Some(p) = nodes[cur].parent {
                    modes.push(nodes[cur].mode.expect("non-root node has a mode"));
                    ancestors.push(p);
                    cur = p;
                }
                ancestors.reverse();
                modes.reverse();
                Scenario {
                    leaf,
                    ancestors,
                    modes,
                }
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(scenarios.len(), leaves);

        Ok(Self {
            modes: d,
            horizon: n,
            branching: n_b,
            nodes,
            scenarios,
            stage_start,
        })
    }

    /// `Σ_{k ≤ N_b} d^k + d^{N_b} (N − N_b)`.
    pub fn node_count(d: usize, n: usize, n_b: usize) -> usize {
        let mut total = 0;
        let mut layer = 1;
        for _ in 0..=n_b {
            total += layer;
            layer *= d;
        }
        total + d.pow(n_b as u32) * (n - n_b)
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn branching_horizon(&self) -> usize {
        self.branching
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.scenarios
    }

    pub fn num_scenarios(&self) -> usize {
        self.scenarios.len()
    }

    /// Number of nodes carrying an input (all but the leaves).
    pub fn num_nonleaf(&self) -> usize {
        self.stage_start[self.horizon]
    }

    pub fn first_leaf(&self) -> usize {
        self.stage_start[self.horizon]
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        id >= self.first_leaf()
    }

    /// A node branches when it has one child per mode.
    pub fn is_branching(&self, id: usize) -> bool {
        self.nodes[id].stage < self.branching
    }

    /// Scenario index of a leaf node.
    pub fn scenario_index(&self, leaf: usize) -> Option<usize> {
        leaf.checked_sub(self.first_leaf())
            .filter(|&s| s < self.scenarios.len())
    }

    pub fn stage_range(&self, k: usize) -> std::ops::Range<usize> {
        self.stage_start[k]..self.stage_start[k + 1]
    }

    /// All node ids at stage `k`, in id order.
    pub fn stage_nodes(&self, k: usize) -> Result<Vec<usize>> {
        if k > self.horizon {
            return Err(Error::StageOutOfRange {
                stage: k,
                horizon: self.horizon,
            });
        }
        Ok(self.stage_range(k).collect())
    }

    /// Root-to-leaf path as `(node, incoming mode)`; the root carries `None`.
    pub fn scenario_path(&self, leaf: usize) -> Result<Vec<(usize, Option<usize>)>> {
        let s = self.scenario_index(leaf).ok_or(Error::NotALeaf(leaf))?;
        let sc = &self.scenarios[s];
        Ok(sc
            .ancestors
            .iter()
            .chain(std::iter::once(&sc.leaf))
            .map(|&id| (id, self.nodes[id].mode))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_branched_two_by_two() {
        let t = ScenarioTree::build(2, 2, 2).unwrap();
        assert_eq!(t.len(), 7);
        assert_eq!(t.num_scenarios(), 4);
        let seqs: Vec<_> = t.scenarios().iter().map(|s| s.modes.clone()).collect();
        assert_eq!(seqs, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert_eq!(t.stage_nodes(0).unwrap(), vec![0]);
        assert_eq!(t.stage_nodes(2).unwrap(), vec![3, 4, 5, 6]);
        let path: Vec<usize> = t.scenario_path(3).unwrap().iter().map(|p| p.0).collect();
        assert_eq!(path, vec![0, 1, 3]);
        assert_eq!(t.scenarios()[0].ancestors, vec![0, 1]);
    }

    #[test]
    fn single_mode_chain() {
        let t = ScenarioTree::build(1, 5, 5).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.num_scenarios(), 1);
        let path = t.scenario_path(5).unwrap();
        assert_eq!(path.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn partially_branched_count() {
        let t = ScenarioTree::build(2, 20, 5).unwrap();
        assert_eq!(t.num_scenarios(), 32);
        assert_eq!(t.len(), 543);
        assert_eq!(ScenarioTree::node_count(2, 20, 5), 543);
        assert_eq!(t.stage_nodes(10).unwrap().len(), 32);
    }

    #[test]
    fn modes_frozen_after_branching() {
        let t = ScenarioTree::build(2, 3, 1).unwrap();
        for s in t.scenarios() {
            assert!(s.modes.iter().all(|&m| m == s.modes[0]));
        }
        for leaf in t.first_leaf()..t.len() {
            let p = t.scenario_path(leaf).unwrap();
            assert_eq!(p.len(), 4);
            assert_eq!(p[0].1, None);
        }
    }

    #[test]
    fn zero_branching_is_single_scenario() {
        let t = ScenarioTree::build(3, 4, 0).unwrap();
        assert_eq!(t.num_scenarios(), 1);
        assert_eq!(t.scenarios()[0].modes, vec![0, 0, 0, 0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(ScenarioTree::build(0, 2, 1), Err(Error::InvalidDimension(_))));
        assert!(matches!(ScenarioTree::build(2, 0, 0), Err(Error::InvalidDimension(_))));
        assert!(matches!(ScenarioTree::build(2, 2, 3), Err(Error::InvalidDimension(_))));
        let t = ScenarioTree::build(2, 2, 2).unwrap();
        assert!(matches!(t.stage_nodes(3), Err(Error::StageOutOfRange { .. })));
        assert!(matches!(t.scenario_path(1), Err(Error::NotALeaf(1))));
        assert!(matches!(t.scenario_path(99), Err(Error::NotALeaf(99))));
    }
}
