//! Partial optimal transport between video-frame and language-token
//! representations, and the alignment loss built on it.
//!
//! Both sequences are treated as uniform discrete distributions over their
//! rows. A plan may move only part of the total mass: row sums are capped
//! by `a`, column sums by `b`, and the total is pinned to a chosen mass in
//! `(0, 1]`. [`sinkhorn_partial`] approximates the optimal plan by scaling
//! an entropic kernel; [`exact_partial_ot`] solves the same linear program
//! exactly on small instances and serves as the reference.
//!
//! [`pvla_loss`] sweeps the candidate masses `g/G, g = 1..=G` (with `G`
//! defaulting to `min(N_V, N_L)`) and keeps the cheapest plan. Gradients
//! reach the representations only through the cost matrix; the plan is held
//! constant (see [`pvla_loss_var`]).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feasibility slack accepted after a full run of sweeps.
pub const FEASIBILITY_SLACK: f64 = 1e-3;

/// Largest instance (`N_V·N_L`) the exact solver accepts.
pub const EXACT_MAX_CELLS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Contract("distribution needs at least one support".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Contract(
                "distribution weights must be finite and strictly positive".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!(
                "distribution weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution over zero supports");
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `N_V × N_L` matrix of pairwise transport costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Contract("cost matrix must be nonempty".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::dim("CostMatrix::new", &[rows, cols], &[data.len()]));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Contract(format!(
                "cost entries must be finite and nonnegative, found {bad}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.iter().enumerate() {
            if row.as_ref().len() != n_cols {
                return Err(Error::Contract(format!(
                    "ragged cost matrix: row {i} has {} entries, expected {n_cols}",
                    row.as_ref().len()
                )));
            }
            data.extend_from_slice(row.as_ref());
        }
        Self::new(n_rows, n_cols, data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if !t.is_matrix() {
            return Err(Error::dim("CostMatrix::from_tensor", t.shape(), &[0, 0]));
        }
        Self::new(t.rows(), t.cols(), t.data().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.rows, self.cols], self.data.clone()).expect("valid cost shape")
    }
}

/// Nonnegative plan with capped marginals and a fixed total mass.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    mass: f64,
}

impl TransportPlan {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            mass: 0.0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Target total mass.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// `⟨T, C⟩`.
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        self.data.iter().zip(&c.data).map(|(t, c)| t * c).sum()
    }

    /// Largest violation among the row caps, column caps, total mass and
    /// nonnegativity.
    pub fn max_violation(&self, a: &DiscreteDistribution, b: &DiscreteDistribution) -> f64 {
        let rows = self
            .row_sums()
            .iter()
            .zip(a.weights())
            .map(|(s, w)| (s - w).max(0.0))
            .fold(0.0, f64::max);
        let cols = self
            .col_sums()
            .iter()
            .zip(b.weights())
            .map(|(s, w)| (s - w).max(0.0))
            .fold(0.0, f64::max);
        let neg = self.data.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
        rows.max(cols).max((self.total() - self.mass).abs()).max(neg)
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
            mass: self.mass,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.rows, self.cols], self.data.clone()).expect("valid plan shape")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    /// Sweep the mass grid and keep the cheapest plan.
    #[default]
    Partial,
    /// Transport all mass (total mass 1).
    Full,
}

impl fmt::Display for TransportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportMode::Partial => f.write_str("partial"),
            TransportMode::Full => f.write_str("full"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tau: f64,
    pub n_iter: usize,
    /// `None` means `min(N_V, N_L)`.
    pub mass_grid_size: Option<usize>,
    pub mode: TransportMode,
    /// Walk the temperature down from 1 during the first half of the sweeps.
    pub anneal: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            n_iter: 1000,
            mass_grid_size: None,
            mode: TransportMode::Partial,
            anneal: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.n_iter == 0 {
            return Err(Error::Config("n_iter must be >= 1".into()));
        }
        if self.mass_grid_size == Some(0) {
            return Err(Error::Config("mass_grid_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Candidate total masses for an `n_v × n_l` problem.
    pub fn mass_grid(&self, n_v: usize, n_l: usize) -> Vec<f64> {
        match self.mode {
            TransportMode::Full => vec![1.0],
            TransportMode::Partial => {
                let g = self.mass_grid_size.unwrap_or(n_v.min(n_l)).max(1);
                (1..=g).map(|s| s as f64 / g as f64).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PvlaResult {
    pub loss: f64,
    pub best_mass: f64,
    pub plan: TransportPlan,
}

fn check_mass(mass: f64) -> Result<()> {
    if !mass.is_finite() || mass < 0.0 {
        return Err(Error::Contract(format!("mass must be in (0, 1], got {mass}")));
    }
    if mass > 1.0 + 1e-12 {
        return Err(Error::Infeasible(format!(
            "total mass {mass} exceeds the unit mass of either marginal"
        )));
    }
    Ok(())
}

fn check_marginals(c: &CostMatrix, a: &DiscreteDistribution, b: &DiscreteDistribution) -> Result<()> {
    if a.len() != c.rows || b.len() != c.cols {
        return Err(Error::dim("marginals", &[c.rows, c.cols], &[a.len(), b.len()]));
    }
    Ok(())
}

/// Cosine distance `1 − cos(hv_i, hl_j)` for every frame/token pair.
pub fn cosine_cost(hv: &Tensor, hl: &Tensor) -> Result<CostMatrix> {
    let mut tape = Tape::new();
    let v = tape.constant(hv.clone());
    let l = tape.constant(hl.clone());
    let c = cosine_cost_var(&mut tape, v, l)?;
    let t = tape.value(c);
    // Round-off can push entries a hair outside [0, 2].
    let data = t.data().iter().map(|x| x.clamp(0.0, 2.0)).collect();
    CostMatrix::new(t.rows(), t.cols(), data)
}

/// Differentiable cosine-distance cost matrix.
pub fn cosine_cost_var(tape: &mut Tape, hv: Var, hl: Var) -> Result<Var> {
    let (sv, sl) = (tape.value(hv).shape().to_vec(), tape.value(hl).shape().to_vec());
    if sv.len() != 2 || sl.len() != 2 || sv[1] != sl[1] {
        return Err(Error::dim("cosine_cost", &sv, &sl));
    }
    let nv = tape.row_normalize(hv)?;
    let nl = tape.row_normalize(hl)?;
    let nlt = tape.transpose(nl)?;
    let sim = tape.matmul(nv, nlt)?;
    tape.affine(sim, -1.0, 1.0)
}

/// Entropic approximation of the partial transport plan at a fixed mass.
///
/// The plan is kept in scaled form `T_ij = g · u_i · K_ij · v_j` with
/// `K = exp(−C/τ)`, row factors `u ≤ 1`, column factors `v ≤ 1` and a global
/// mass factor `g`. Each sweep caps every row at `a` (recomputing `u`), caps
/// every column at `b` (recomputing `v`), then rescales the total to `mass`.
/// Recomputing the factors from the current potentials, rather than
/// compounding them, lets a row or column that was shrunk too early grow
/// back, so the sweeps converge to the entropic optimum.
///
/// When `cfg.anneal` is set, the first half of the sweeps walks the
/// temperature down from 1 to `tau` by halving, carrying the potentials
/// across stages; the remaining sweeps run at `tau`.
pub fn sinkhorn_partial(
    c: &CostMatrix,
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    mass: f64,
    cfg: &SolverConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    check_marginals(c, a, b)?;
    check_mass(mass)?;
    if mass == 0.0 {
        return Err(Error::Contract("mass must be strictly positive".into()));
    }
    let (rows, cols) = (c.rows, c.cols);
    let aw = a.weights();
    let bw = b.weights();
    // Shifting by the smallest cost only changes the global factor.
    let c_min = c.data.iter().copied().fold(f64::INFINITY, f64::min);

    // Dual potentials: u_i = exp(−row_pot_i/τ), v_j = exp(−col_pot_j/τ).
    let mut row_pot = vec![0.0; rows];
    let mut col_pot = vec![0.0; cols];
    let mut kernel = vec![0.0; rows * cols];
    let mut u = vec![1.0; rows];
    let mut v = vec![1.0; cols];
    let mut col_acc = vec![0.0; cols];
    let mut g = 1.0;

    for (tau, sweeps) in temperature_schedule(cfg) {
        for (k, &x) in kernel.iter_mut().zip(&c.data) {
            *k = (-(x - c_min) / tau).exp();
        }
        for (ui, &p) in u.iter_mut().zip(&row_pot) {
            *ui = (-p / tau).exp();
        }
        for (vj, &p) in v.iter_mut().zip(&col_pot) {
            *vj = (-p / tau).exp();
        }
        let total = scaled_total(&kernel, &u, &v, cols);
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Numeric(format!(
                "every kernel entry underflowed at tau = {tau}; use a larger temperature"
            )));
        }
        g = mass / total;

        for _ in 0..sweeps {
            for (i, ui) in u.iter_mut().enumerate() {
                let row = &kernel[i * cols..(i + 1) * cols];
                let sum = g * row.iter().zip(&v).map(|(k, vj)| k * vj).sum::<f64>();
                *ui = if sum > aw[i] { aw[i] / sum } else { 1.0 };
            }
            col_acc.iter_mut().for_each(|x| *x = 0.0);
            for (row, &ui) in kernel.chunks(cols).zip(&u) {
                for (acc, k) in col_acc.iter_mut().zip(row) {
                    *acc += k * ui;
                }
            }
            let mut total = 0.0;
            for ((vj, &acc), &cap) in v.iter_mut().zip(&col_acc).zip(bw) {
                let sum = g * acc;
                *vj = if sum > cap { cap / sum } else { 1.0 };
                total += acc * *vj;
            }
            if !(total > 0.0) || !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "transport plan collapsed during scaling at tau = {tau}"
                )));
            }
            g = mass / total;
        }
        for (p, &ui) in row_pot.iter_mut().zip(&u) {
            *p = -tau * ui.ln();
        }
        for (p, &vj) in col_pot.iter_mut().zip(&v) {
            *p = -tau * vj.ln();
        }
    }

    let mut data = vec![0.0; rows * cols];
    for (i, out) in data.chunks_mut(cols).enumerate() {
        let row = &kernel[i * cols..(i + 1) * cols];
        for ((o, k), vj) in out.iter_mut().zip(row).zip(&v) {
            *o = g * u[i] * k * vj;
        }
    }
    Ok(TransportPlan {
        rows,
        cols,
        data,
        mass,
    })
}

fn scaled_total(kernel: &[f64], u: &[f64], v: &[f64], cols: usize) -> f64 {
    kernel
        .chunks(cols)
        .zip(u)
        .map(|(row, ui)| ui * row.iter().zip(v).map(|(k, vj)| k * vj).sum::<f64>())
        .sum()
}

/// `(temperature, sweeps)` stages; sweep counts add up to `cfg.n_iter`.
fn temperature_schedule(cfg: &SolverConfig) -> Vec<(f64, usize)> {
    let mut warm = Vec::new();
    if cfg.anneal {
        let mut t = 1.0;
        while t > cfg.tau * (1.0 + 1e-9) {
            warm.push(t);
            t *= 0.5;
        }
    }
    let per_stage = if warm.is_empty() { 0 } else { (cfg.n_iter / 2) / warm.len() };
    let mut stages: Vec<(f64, usize)> = if per_stage > 0 {
        warm.into_iter().map(|t| (t, per_stage)).collect()
    } else {
        Vec::new()
    };
    let used: usize = stages.iter().map(|s| s.1).sum();
    stages.push((cfg.tau, cfg.n_iter - used));
    stages
}

/// Sweeps the configured mass grid on a precomputed cost matrix and keeps
/// the cheapest plan (ties go to the smaller mass).
pub fn solve_mass_grid(c: &CostMatrix, cfg: &SolverConfig) -> Result<PvlaResult> {
    cfg.validate()?;
    let a = DiscreteDistribution::uniform(c.rows);
    let b = DiscreteDistribution::uniform(c.cols);
    let mut best: Option<PvlaResult> = None;
    for mass in cfg.mass_grid(c.rows, c.cols) {
        let plan = sinkhorn_partial(c, &a, &b, mass, cfg)?;
        let loss = plan.cost(c);
        if best.as_ref().is_none_or(|r| loss < r.loss) {
            best = Some(PvlaResult {
                loss,
                best_mass: mass,
                plan,
            });
        }
    }
    Ok(best.expect("mass grid is never empty"))
}

/// Alignment loss between frame representations `hv` (`N_V×d`) and token
/// representations `hl` (`N_L×d`).
pub fn pvla_loss(hv: &Tensor, hl: &Tensor, cfg: &SolverConfig) -> Result<PvlaResult> {
    let c = cosine_cost(hv, hl)?;
    solve_mass_grid(&c, cfg)
}

/// Records `⟨T, C(hv, hl)⟩` on the tape with the plan solved at the current
/// values and then held constant.
pub fn pvla_loss_var(
    tape: &mut Tape,
    hv: Var,
    hl: Var,
    cfg: &SolverConfig,
) -> Result<(Var, PvlaResult)> {
    let c_var = cosine_cost_var(tape, hv, hl)?;
    let clamped: Vec<f64> = tape.value(c_var).data().iter().map(|x| x.clamp(0.0, 2.0)).collect();
    let shape = tape.value(c_var).shape().to_vec();
    let c = CostMatrix::new(shape[0], shape[1], clamped)?;
    let result = solve_mass_grid(&c, cfg)?;
    let loss = plan_cost_var(tape, c_var, &result.plan)?;
    Ok((loss, result))
}

/// `⟨T, C(hv, hl)⟩` for a caller-supplied plan.
pub fn pvla_loss_with_plan(tape: &mut Tape, hv: Var, hl: Var, plan: &TransportPlan) -> Result<Var> {
    let c_var = cosine_cost_var(tape, hv, hl)?;
    plan_cost_var(tape, c_var, plan)
}

fn plan_cost_var(tape: &mut Tape, c_var: Var, plan: &TransportPlan) -> Result<Var> {
    let t = tape.constant(plan.to_tensor());
    let weighted = tape.mul(c_var, t)?;
    tape.sum(weighted)
}

/// Exact optimum of the capped-marginal, fixed-mass transport program.
///
/// Solved as a min-cost flow (source → frame with capacity `a_i`, frame →
/// token at cost `C_ij`, token → sink with capacity `b_j`) by successive
/// shortest augmenting paths, which follows the piecewise-linear optimal
/// cost curve exactly up to the requested mass.
pub fn exact_partial_ot(
    c: &CostMatrix,
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    mass: f64,
) -> Result<(TransportPlan, f64)> {
    check_marginals(c, a, b)?;
    if c.rows * c.cols > EXACT_MAX_CELLS {
        return Err(Error::Size(format!(
            "exact solver handles at most {EXACT_MAX_CELLS} cells, got {}×{}",
            c.rows, c.cols
        )));
    }
    check_mass(mass)?;
    let mass = mass.min(1.0);
    if mass == 0.0 {
        return Ok((TransportPlan::zeros(c.rows, c.cols), 0.0));
    }
    let mut net = FlowNetwork::bipartite(c, a.weights(), b.weights());
    net.push(mass)?;
    let mut plan = TransportPlan::zeros(c.rows, c.cols);
    plan.mass = mass;
    for (cell, &e) in net.cell_edges.iter().enumerate() {
        plan.data[cell] = net.edges[e].flow.max(0.0);
    }
    let cost = plan.cost(c);
    Ok((plan, cost))
}

const FLOW_EPS: f64 = 1e-14;

struct Edge {
    to: usize,
    cap: f64,
    cost: f64,
    flow: f64,
}

struct FlowNetwork {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
    source: usize,
    sink: usize,
    cell_edges: Vec<usize>,
}

impl FlowNetwork {
    fn bipartite(c: &CostMatrix, a: &[f64], b: &[f64]) -> Self {
        let (nv, nl) = (c.rows, c.cols);
        let source = nv + nl;
        let sink = source + 1;
        let mut net = Self {
            edges: Vec::new(),
            adj: vec![Vec::new(); nv + nl + 2],
            source,
            sink,
            cell_edges: Vec::with_capacity(nv * nl),
        };
        for (i, &cap) in a.iter().enumerate() {
            net.add_edge(source, i, cap, 0.0);
        }
        for i in 0..nv {
            for j in 0..nl {
                let e = net.add_edge(i, nv + j, f64::INFINITY, c.at(i, j));
                net.cell_edges.push(e);
            }
        }
        for (j, &cap) in b.iter().enumerate() {
            net.add_edge(nv + j, sink, cap, 0.0);
        }
        net
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) -> usize {
        let id = self.edges.len();
        self.edges.push(Edge { to, cap, cost, flow: 0.0 });
        self.edges.push(Edge {
            to: from,
            cap: 0.0,
            cost: -cost,
            flow: 0.0,
        });
        self.adj[from].push(id);
        self.adj[to].push(id + 1);
        id
    }

    fn residual(&self, e: usize) -> f64 {
        let edge = &self.edges[e];
        if e.is_multiple_of(2) {
            edge.cap - edge.flow
        } else {
            // reverse edge: can cancel the forward flow
            self.edges[e - 1].flow
        }
    }

    fn push(&mut self, mut remaining: f64) -> Result<()> {
        let n = self.adj.len();
        let mut guard = 0;
        while remaining > FLOW_EPS {
            guard += 1;
            if guard > 10_000 {
                return Err(Error::Numeric("min-cost flow failed to terminate".into()));
            }
            // Bellman-Ford over the residual graph.
            let mut dist = vec![f64::INFINITY; n];
            let mut via = vec![usize::MAX; n];
            dist[self.source] = 0.0;
            for _ in 0..n {
                let mut changed = false;
                for u in 0..n {
                    if dist[u] == f64::INFINITY {
                        continue;
                    }
                    for &e in &self.adj[u] {
                        if self.residual(e) <= FLOW_EPS {
                            continue;
                        }
                        let v = self.edges[e].to;
                        let nd = dist[u] + self.edges[e].cost;
                        if nd < dist[v] - 1e-15 {
                            dist[v] = nd;
                            via[v] = e;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            if dist[self.sink] == f64::INFINITY {
                return Err(Error::Infeasible(format!(
                    "{remaining} units of mass cannot be routed under the marginal caps"
                )));
            }
            let mut bottleneck = remaining;
            let mut v = self.sink;
            while v != self.source {
                let e = via[v];
                bottleneck = bottleneck.min(self.residual(e));
                v = self.edges[e ^ 1].to;
            }
            let mut v = self.sink;
            while v != self.source {
                let e = via[v];
                if e % 2 == 0 {
                    self.edges[e].flow += bottleneck;
                } else {
                    self.edges[e - 1].flow -= bottleneck;
                }
                v = self.edges[e ^ 1].to;
            }
            remaining -= bottleneck;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PooledMetric {
    Cosine,
    L2,
}

/// Distance between sequence-pooled representations, the baseline that the
/// transport loss replaces.
pub fn pooled_distance(hv: &Tensor, hl: &Tensor, pooling: Pooling, metric: PooledMetric) -> Result<f64> {
    if !hv.is_matrix() || !hl.is_matrix() || hv.cols() != hl.cols() {
        return Err(Error::dim("pooled_distance", hv.shape(), hl.shape()));
    }
    let pool = |t: &Tensor| -> Vec<f64> {
        let n = t.cols();
        match pooling {
            Pooling::Avg => {
                let mut out = vec![0.0; n];
                for i in 0..t.rows() {
                    for (o, v) in out.iter_mut().zip(t.row(i)) {
                        *o += v;
                    }
                }
                out.iter().map(|v| v / t.rows() as f64).collect()
            }
            Pooling::Max => {
                let mut out = vec![f64::NEG_INFINITY; n];
                for i in 0..t.rows() {
                    for (o, v) in out.iter_mut().zip(t.row(i)) {
                        *o = o.max(*v);
                    }
                }
                out
            }
        }
    };
    let (pv, pl) = (pool(hv), pool(hl));
    match metric {
        PooledMetric::L2 => Ok(pv.iter().zip(&pl).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()),
        PooledMetric::Cosine => {
            let nv = pv.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nl = pl.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(nv > 0.0) || !(nl > 0.0) {
                return Err(Error::Degenerate("pooled vector has zero norm".into()));
            }
            let dot: f64 = pv.iter().zip(&pl).map(|(x, y)| x * y).sum();
            Ok(1.0 - dot / (nv * nl))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform2() -> (DiscreteDistribution, DiscreteDistribution) {
        (DiscreteDistribution::uniform(2), DiscreteDistribution::uniform(2))
    }

    fn worked() -> CostMatrix {
        CostMatrix::from_rows(&[[1.0, 2.0], [3.0, 5.0]]).unwrap()
    }

    fn sharp() -> SolverConfig {
        SolverConfig {
            tau: 0.005,
            ..SolverConfig::default()
        }
    }

    /// Brute-force reference: append a dummy row and column that absorb the
    /// untransported mass (dummy-to-dummy forbidden), then enumerate every
    /// spanning-tree basis of the balanced problem and keep the cheapest
    /// nonnegative one.
    fn vertex_enumeration(c: &CostMatrix, mass: f64) -> f64 {
        let (nv, nl) = (c.rows(), c.cols());
        let (m, n) = (nv + 1, nl + 1);
        let mut supply = vec![1.0 / nv as f64; nv];
        supply.push(1.0 - mass);
        let mut demand = vec![1.0 / nl as f64; nl];
        demand.push(1.0 - mass);
        let cells: Vec<(usize, usize)> = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| !(i == nv && j == nl))
            .collect();
        let cost = |i: usize, j: usize| if i < nv && j < nl { c.at(i, j) } else { 0.0 };
        let basis = m + n - 1;
        let mut best = f64::INFINITY;
        let mut pick = vec![0usize; basis];
        fn next(pick: &mut [usize], total: usize) -> bool {
            let k = pick.len();
            let mut i = k;
            while i > 0 {
                i -= 1;
                if pick[i] < total - k + i {
                    pick[i] += 1;
                    for j in i + 1..k {
                        pick[j] = pick[j - 1] + 1;
                    }
                    return true;
                }
            }
            false
        }
        for (i, p) in pick.iter_mut().enumerate() {
            *p = i;
        }
        loop {
            // solve flows on the chosen support by peeling leaves
            let chosen: Vec<(usize, usize)> = pick.iter().map(|&k| cells[k]).collect();
            let mut alive = vec![true; basis];
            let mut rs = supply.clone();
            let mut cd = demand.clone();
            let mut flow = vec![0.0; basis];
            let mut ok = true;
            for _ in 0..basis {
                let mut progressed = false;
                for node in 0..m + n {
                    let incident: Vec<usize> = (0..basis)
                        .filter(|&e| {
                            alive[e]
                                && if node < m { chosen[e].0 == node } else { chosen[e].1 == node - m }
                        })
                        .collect();
                    if incident.len() == 1 {
                        let e = incident[0];
                        let (i, j) = chosen[e];
                        let f = if node < m { rs[i] } else { cd[j] };
                        flow[e] = f;
                        rs[i] -= f;
                        cd[j] -= f;
                        alive[e] = false;
                        progressed = true;
                        break;
                    }
                }
                if !progressed {
                    ok = false;
                    break;
                }
            }
            let balanced = rs.iter().chain(&cd).all(|r| r.abs() < 1e-9);
            if ok && balanced && flow.iter().all(|&f| f >= -1e-12) {
                let total: f64 = chosen.iter().zip(&flow).map(|(&(i, j), f)| cost(i, j) * f).sum();
                best = best.min(total);
            }
            if !next(&mut pick, cells.len()) {
                break;
            }
        }
        best
    }

    #[test]
    fn exact_worked_values() {
        let (a, b) = uniform2();
        let (_, full) = exact_partial_ot(&worked(), &a, &b, 1.0).unwrap();
        let (plan, half) = exact_partial_ot(&worked(), &a, &b, 0.5).unwrap();
        assert!((full - 2.5).abs() < 1e-12);
        assert!((half - 0.5).abs() < 1e-12);
        assert!((plan.at(0, 0) - 0.5).abs() < 1e-12);
        // one-parameter family T = [[t, .5-t], [.5-t, t]] costs 2.5 + t
        for t in [0.0, 0.1, 0.25, 0.5] {
            assert!(2.5 + t >= full - 1e-12);
        }
        let (zero_plan, zero) = exact_partial_ot(&worked(), &a, &b, 0.0).unwrap();
        assert_eq!(zero, 0.0);
        assert!(zero_plan.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_agrees_with_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let nv = rng.random_range(1..=3);
            let nl = rng.random_range(1..=3);
            let data = (0..nv * nl).map(|_| rng.random_range(0.0..2.0)).collect();
            let c = CostMatrix::new(nv, nl, data).unwrap();
            let a = DiscreteDistribution::uniform(nv);
            let b = DiscreteDistribution::uniform(nl);
            for mass in [0.2, 0.5, 0.75, 1.0] {
                let (plan, flow_cost) = exact_partial_ot(&c, &a, &b, mass).unwrap();
                let brute = vertex_enumeration(&c, mass);
                assert!((flow_cost - brute).abs() < 1e-9, "{flow_cost} vs {brute}");
                assert!(plan.max_violation(&a, &b) < 1e-12);
            }
        }
    }

    #[test]
    fn exact_rejects_large_and_infeasible() {
        let c = CostMatrix::new(5, 5, vec![0.5; 25]).unwrap();
        let (a, b) = (DiscreteDistribution::uniform(5), DiscreteDistribution::uniform(5));
        assert!(matches!(exact_partial_ot(&c, &a, &b, 0.5), Err(Error::Size(_))));
        let (a, b) = uniform2();
        assert!(matches!(exact_partial_ot(&worked(), &a, &b, 1.5), Err(Error::Infeasible(_))));
    }

    #[test]
    fn sinkhorn_worked_examples() {
        let (a, b) = uniform2();
        let diag = CostMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let plan = sinkhorn_partial(&diag, &a, &b, 1.0, &sharp()).unwrap();
        assert!(plan.cost(&diag) < 1e-2);
        assert!((plan.at(0, 0) - 0.5).abs() < 1e-2);
        assert!((plan.at(1, 1) - 0.5).abs() < 1e-2);

        let plan = sinkhorn_partial(&worked(), &a, &b, 1.0, &sharp()).unwrap();
        assert!((plan.cost(&worked()) - 2.5).abs() < 0.05);
        assert!((plan.at(0, 1) - 0.5).abs() < 0.05);
        assert!((plan.at(1, 0) - 0.5).abs() < 0.05);

        let plan = sinkhorn_partial(&worked(), &a, &b, 0.5, &sharp()).unwrap();
        assert!((plan.cost(&worked()) - 0.5).abs() < 0.05);
        assert!((plan.at(0, 0) - 0.5).abs() < 0.05);
    }

    #[test]
    fn sinkhorn_error_paths() {
        let (a, b) = uniform2();
        let cfg = SolverConfig::default();
        assert!(matches!(
            sinkhorn_partial(&worked(), &a, &b, 1.2, &cfg),
            Err(Error::Infeasible(_))
        ));
        assert!(sinkhorn_partial(&worked(), &a, &b, 0.0, &cfg).is_err());
        let bad = SolverConfig { tau: 0.0, ..cfg.clone() };
        assert!(matches!(sinkhorn_partial(&worked(), &a, &b, 1.0, &bad), Err(Error::Config(_))));
        let bad = SolverConfig { n_iter: 0, ..cfg };
        assert!(matches!(sinkhorn_partial(&worked(), &a, &b, 1.0, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn pvla_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let r = pvla_loss(&h, &h, &SolverConfig::default()).unwrap();
        assert!(r.loss < 1e-3, "{}", r.loss);

        let grid = solve_mass_grid(&worked(), &sharp()).unwrap();
        assert_eq!(sharp().mass_grid(2, 2), vec![0.5, 1.0]);
        assert!((grid.loss - 0.5).abs() < 0.05);
        assert_eq!(grid.best_mass, 0.5);

        let full = SolverConfig {
            mode: TransportMode::Full,
            ..sharp()
        };
        let r = solve_mass_grid(&worked(), &full).unwrap();
        assert_eq!(r.best_mass, 1.0);
        assert!((r.loss - 2.5).abs() < 0.05);
    }

    #[test]
    fn cosine_cost_examples() {
        let u = Tensor::matrix(&[[0.6, 0.8]]);
        assert!(cosine_cost(&u, &u).unwrap().at(0, 0).abs() < 1e-15);
        let o = Tensor::matrix(&[[-0.8, 0.6]]);
        assert!((cosine_cost(&u, &o).unwrap().at(0, 0) - 1.0).abs() < 1e-15);
        let neg = u.map(|x| -x);
        assert!((cosine_cost(&u, &neg).unwrap().at(0, 0) - 2.0).abs() < 1e-15);
        let hl = Tensor::matrix(&[[1.0, 2.0], [0.3, -0.1]]);
        let c1 = cosine_cost(&u, &hl).unwrap();
        let c7 = cosine_cost(&u.map(|x| 7.0 * x), &hl).unwrap();
        for (x, y) in c1.data().iter().zip(c7.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let zero = Tensor::matrix(&[[0.0, 0.0]]);
        assert!(matches!(cosine_cost(&zero, &hl), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pooled_distance_examples() {
        let hv = Tensor::matrix(&[[1.0, 0.0], [0.0, 1.0]]);
        let hl = Tensor::matrix(&[[1.0, 0.0]]);
        let d = pooled_distance(&hv, &hl, Pooling::Avg, PooledMetric::L2).unwrap();
        assert!((d - 0.5f64.sqrt()).abs() < 1e-15);
        for pooling in [Pooling::Avg, Pooling::Max] {
            for metric in [PooledMetric::Cosine, PooledMetric::L2] {
                assert!(pooled_distance(&hv, &hv, pooling, metric).unwrap().abs() < 1e-15);
            }
        }
        // max-pools are [1, 0] and [0, 1]
        let p = Tensor::matrix(&[[1.0, -5.0], [0.0, 0.0]]);
        let q = Tensor::matrix(&[[-5.0, 1.0], [0.0, -3.0]]);
        let d = pooled_distance(&p, &q, Pooling::Max, PooledMetric::Cosine).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        let z = Tensor::matrix(&[[0.0, 0.0]]);
        assert!(matches!(
            pooled_distance(&z, &hl, Pooling::Avg, PooledMetric::Cosine),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn exact_cost_is_monotone_in_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let nv = rng.random_range(1..=4);
            let nl = rng.random_range(1..=4);
            let data = (0..nv * nl).map(|_| rng.random_range(0.0..2.0)).collect();
            let c = CostMatrix::new(nv, nl, data).unwrap();
            let a = DiscreteDistribution::uniform(nv);
            let b = DiscreteDistribution::uniform(nl);
            let (_, full) = exact_partial_ot(&c, &a, &b, 1.0).unwrap();
            for mass in [0.1, 0.3, 0.6, 0.9] {
                let (_, part) = exact_partial_ot(&c, &a, &b, mass).unwrap();
                assert!(full >= part - 1e-12);
            }
        }
    }

    #[test]
    fn sinkhorn_gap_shrinks_with_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let taus = [0.05, 0.02, 0.005];
        let mut gaps = [0.0; 3];
        let mut count = 0.0;
        for _ in 0..30 {
            let nv = rng.random_range(1..=4);
            let nl = rng.random_range(1..=4);
            let data = (0..nv * nl).map(|_| rng.random_range(0.0..2.0)).collect();
            let c = CostMatrix::new(nv, nl, data).unwrap();
            let a = DiscreteDistribution::uniform(nv);
            let b = DiscreteDistribution::uniform(nl);
            for mass in SolverConfig::default().mass_grid(nv, nl) {
                let (_, exact) = exact_partial_ot(&c, &a, &b, mass).unwrap();
                for (g, &tau) in gaps.iter_mut().zip(&taus) {
                    let cfg = SolverConfig { tau, ..SolverConfig::default() };
                    let plan = sinkhorn_partial(&c, &a, &b, mass, &cfg).unwrap();
                    *g += (plan.cost(&c) - exact).abs();
                }
                count += 1.0;
            }
        }
        let mean: Vec<f64> = gaps.iter().map(|g| g / count).collect();
        assert!(mean[0] >= mean[1] && mean[1] >= mean[2], "{mean:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn transpose_symmetry(seed in 0u64..10_000, nv in 1usize..6, nl in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hv = Tensor::randn(&[nv, 4], 1.0, &mut rng);
            let hl = Tensor::randn(&[nl, 4], 1.0, &mut rng);
            let cfg = SolverConfig::default();
            let fwd = pvla_loss(&hv, &hl, &cfg).unwrap();
            let rev = pvla_loss(&hl, &hv, &cfg).unwrap();
            prop_assert!((fwd.loss - rev.loss).abs() < 1e-6, "{} vs {}", fwd.loss, rev.loss);
        }

        #[test]
        fn loss_nonnegative_and_scale_invariant(seed in 0u64..10_000, alpha in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hv = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let hl = Tensor::randn(&[3, 3], 1.0, &mut rng);
            let c = cosine_cost(&hv, &hl).unwrap();
            let cs = cosine_cost(&hv.map(|x| alpha * x), &hl).unwrap();
            for (x, y) in c.data().iter().zip(cs.data()) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((0.0..=2.0).contains(x));
            }
            let r = pvla_loss(&hv, &hl, &SolverConfig::default()).unwrap();
            prop_assert!(r.loss >= 0.0);
        }

        #[test]
        fn plans_are_feasible(seed in 0u64..10_000, nv in 1usize..7, nl in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..nv * nl).map(|_| rng.random_range(0.0..2.0)).collect();
            let c = CostMatrix::new(nv, nl, data).unwrap();
            let (a, b) = (DiscreteDistribution::uniform(nv), DiscreteDistribution::uniform(nl));
            let cfg = SolverConfig::default();
            for mass in cfg.mass_grid(nv, nl) {
                let plan = sinkhorn_partial(&c, &a, &b, mass, &cfg).unwrap();
                prop_assert!(plan.max_violation(&a, &b) <= FEASIBILITY_SLACK);
            }
        }
    }
}
