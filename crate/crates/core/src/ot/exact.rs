//! Exact transportation-problem solve by the primal network simplex method.
//!
//! The bipartite graph has one node per row (supply `mu_i`), one per column
//! (demand `nu_j`) and an artificial root `Z`. The starting basis is the star
//! of big-M artificial arcs around `Z`; pivots keep the spanning tree
//! strongly feasible (every zero-flow tree arc points away from the root),
//! which rules out cycling on the highly degenerate uniform-marginal
//! instances that arise for neuron couplings.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView1, ArrayView2};

use super::{
    check_dims, frobenius, marginal_violation, CostMatrix, DiscreteMeasure, OtError, SolveReport,
    TransportPlan,
};

/// Solves `min <P, M>` over couplings of `mu` and `nu`; the returned plan is
/// an optimal basic feasible solution.
pub fn solve_exact(
    cost: &CostMatrix,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<SolveReport, OtError> {
    check_dims(cost, mu, nu)?;
    let mut simplex = NetworkSimplex::new(cost.entries(), mu.weights(), nu.weights());
    let pivots = simplex.run()?;
    let plan = simplex.plan();
    let value = frobenius(plan.view(), cost.entries());
    let violation = marginal_violation(plan.view(), mu.weights(), nu.weights());
    Ok(SolveReport {
        plan: TransportPlan(plan),
        cost: value,
        iterations_used: pivots,
        final_marginal_violation: violation,
        converged: true,
    })
}

const NONE: usize = usize::MAX;

struct NetworkSimplex<'a> {
    cost: ArrayView2<'a, f64>,
    rows: usize,
    cols: usize,
    big_m: f64,
    pricing_tol: f64,
    /// Direction of each row's artificial arc: `true` for `R_i -> Z`.
    row_art_out: Vec<bool>,
    flow: Vec<f64>,
    in_tree: Vec<bool>,
    tree: Vec<usize>,
    parent: Vec<usize>,
    parent_arc: Vec<usize>,
    depth: Vec<usize>,
    potential: Vec<f64>,
}

impl<'a> NetworkSimplex<'a> {
    fn new(cost: ArrayView2<'a, f64>, mu: ArrayView1<'_, f64>, nu: ArrayView1<'_, f64>) -> Self {
        let (rows, cols) = cost.dim();
        let max_c = cost.iter().copied().fold(0.0, f64::max);
        // Any path through Z costs 2 * big_m, more than every real tree path.
        let big_m = 1.0 + (rows + cols + 1) as f64 * max_c.max(1.0);
        let real = rows * cols;
        let arcs = real + rows + cols;
        let nodes = rows + cols + 1;
        let mut flow = vec![0.0; arcs];
        let mut in_tree = vec![false; arcs];
        let mut tree = Vec::with_capacity(rows + cols);
        let mut row_art_out = Vec::with_capacity(rows);
        for i in 0..rows {
            let a = real + i;
            row_art_out.push(mu[i] > 0.0);
            flow[a] = mu[i];
            in_tree[a] = true;
            tree.push(a);
        }
        for j in 0..cols {
            let a = real + rows + j;
            flow[a] = nu[j];
            in_tree[a] = true;
            tree.push(a);
        }
        let mut s = Self {
            cost,
            rows,
            cols,
            big_m,
            pricing_tol: 1e-12 * big_m,
            row_art_out,
            flow,
            in_tree,
            tree,
            parent: vec![NONE; nodes],
            parent_arc: vec![NONE; nodes],
            depth: vec![0; nodes],
            potential: vec![0.0; nodes],
        };
        s.rebuild();
        s
    }

    fn root(&self) -> usize {
        self.rows + self.cols
    }

    fn ends(&self, arc: usize) -> (usize, usize) {
        let real = self.rows * self.cols;
        if arc < real {
            (arc / self.cols, self.rows + arc % self.cols)
        } else if arc < real + self.rows {
            let i = arc - real;
            if self.row_art_out[i] {
                (i, self.root())
            } else {
                (self.root(), i)
            }
        } else {
            (self.root(), self.rows + (arc - real - self.rows))
        }
    }

    fn arc_cost(&self, arc: usize) -> f64 {
        if arc < self.rows * self.cols {
            self.cost[[arc / self.cols, arc % self.cols]]
        } else {
            self.big_m
        }
    }

    /// Recomputes parents, depths and node potentials from the tree arcs.
    fn rebuild(&mut self) {
        let nodes = self.parent.len();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
        for &a in &self.tree {
            let (t, h) = self.ends(a);
            adj[t].push(a);
            adj[h].push(a);
        }
        self.parent.fill(NONE);
        self.parent_arc.fill(NONE);
        let root = self.root();
        self.depth[root] = 0;
        self.potential[root] = 0.0;
        let mut queue = VecDeque::from([root]);
        let mut seen = vec![false; nodes];
        seen[root] = true;
        while let Some(x) = queue.pop_front() {
            for &a in &adj[x] {
                let (t, h) = self.ends(a);
                let (y, down) = if t == x { (h, true) } else { (t, false) };
                if seen[y] {
                    continue;
                }
                seen[y] = true;
                self.parent[y] = x;
                self.parent_arc[y] = a;
                self.depth[y] = self.depth[x] + 1;
                // Tree arcs have zero reduced cost: c_a + pi_tail - pi_head = 0.
                let c = self.arc_cost(a);
                self.potential[y] = if down {
                    self.potential[x] + c
                } else {
                    self.potential[x] - c
                };
                queue.push_back(y);
            }
        }
        debug_assert!(seen.iter().all(|s| *s), "basis is not a spanning tree");
    }

    /// Dantzig pricing over the real arcs.
    fn entering_arc(&self) -> Option<usize> {
        let mut best = NONE;
        let mut best_rc = -self.pricing_tol;
        for i in 0..self.rows {
            let pi_i = self.potential[i];
            for j in 0..self.cols {
                let a = i * self.cols + j;
                if self.in_tree[a] {
                    continue;
                }
                let rc = self.cost[[i, j]] + pi_i - self.potential[self.rows + j];
                if rc < best_rc {
                    best_rc = rc;
                    best = a;
                }
            }
        }
        (best != NONE).then_some(best)
    }

    fn pivot(&mut self, entering: usize) -> Result<(), OtError> {
        let (u, v) = self.ends(entering);
        // Climb to the apex, recording (arc, child endpoint) on each side.
        let (mut x, mut y) = (u, v);
        let mut up_u = Vec::new();
        let mut up_v = Vec::new();
        while self.depth[x] > self.depth[y] {
            up_u.push((self.parent_arc[x], x));
            x = self.parent[x];
        }
        while self.depth[y] > self.depth[x] {
            up_v.push((self.parent_arc[y], y));
            y = self.parent[y];
        }
        while x != y {
            up_u.push((self.parent_arc[x], x));
            x = self.parent[x];
            up_v.push((self.parent_arc[y], y));
            y = self.parent[y];
        }

        // Orientation: apex -> u, entering arc u -> v, then v -> apex.
        let mut cycle: Vec<(usize, bool)> = Vec::with_capacity(up_u.len() + up_v.len() + 1);
        for &(a, child) in up_u.iter().rev() {
            let (_, h) = self.ends(a);
            cycle.push((a, h == child));
        }
        cycle.push((entering, true));
        for &(a, child) in &up_v {
            let (t, _) = self.ends(a);
            cycle.push((a, t == child));
        }

        let theta = cycle
            .iter()
            .filter(|(_, fwd)| !fwd)
            .map(|(a, _)| self.flow[*a])
            .fold(f64::INFINITY, f64::min);
        if !theta.is_finite() {
            return Err(OtError::Numerical(
                "unbounded pivot cycle in transportation simplex".into(),
            ));
        }
        // Last blocking arc along the orientation keeps the tree strongly feasible.
        let leaving = cycle
            .iter()
            .rev()
            .find(|(a, fwd)| !fwd && self.flow[*a] <= theta)
            .map(|(a, _)| *a)
            .expect("a blocking arc exists when theta is finite");

        if theta > 0.0 {
            for &(a, fwd) in &cycle {
                if fwd {
                    self.flow[a] += theta;
                } else {
                    self.flow[a] -= theta;
                }
            }
        }
        self.flow[leaving] = 0.0;
        self.in_tree[leaving] = false;
        self.in_tree[entering] = true;
        let slot = self
            .tree
            .iter()
            .position(|&a| a == leaving)
            .expect("leaving arc is a tree arc");
        self.tree[slot] = entering;
        self.rebuild();
        Ok(())
    }

    fn run(&mut self) -> Result<usize, OtError> {
        let arcs = self.flow.len();
        let cap = 50 * arcs + 1000;
        let mut pivots = 0;
        while let Some(a) = self.entering_arc() {
            if pivots >= cap {
                return Err(OtError::Numerical(format!(
                    "transportation simplex exceeded {cap} pivots"
                )));
            }
            self.pivot(a)?;
            pivots += 1;
        }
        let real = self.rows * self.cols;
        let stuck: f64 = self.flow[real..].iter().sum();
        if stuck > 1e-9 {
            return Err(OtError::InvalidInput(format!(
                "marginals are not balanced: {stuck} mass left on artificial arcs"
            )));
        }
        Ok(pivots)
    }

    fn plan(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(i, j)| {
            self.flow[i * self.cols + j]
        })
    }
}
