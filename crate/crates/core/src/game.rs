//! Stage costs, value-based policies, attenuation conditions and saddle/L2 checks
//! for the cooperative and non-cooperative graphical games.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::BlockMap;
use crate::dynamics::{
    check_neighbor_keys, simulate, AgentPolicy, DisturbanceModel, FeedbackLaw, FleetModel,
    NeighborInputs, TrajectoryLog,
};
use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::linalg::{
    inverse, is_positive_definite, is_positive_semidefinite, min_sym_eigenvalue, quad_form,
    solve, Mat, Vector,
};

/// Margins at or above this count as satisfied.
pub const MARGIN_TOLERANCE: f64 = -1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameMode {
    Cooperative,
    Noncooperative,
}

impl GameMode {
    pub fn name(&self) -> &'static str {
        match self {
            GameMode::Cooperative => "cooperative",
            GameMode::Noncooperative => "noncooperative",
        }
    }
}

/// Per-agent weighting matrices and the attenuation level.
#[derive(Debug, Clone, PartialEq)]
pub struct GameWeights {
    pub mode: GameMode,
    pub q: Vec<Mat>,
    pub r_self: Vec<Mat>,
    /// `r_nb[i][&j]` is `R_ij` for `j ∈ N_i`.
    pub r_nb: Vec<BTreeMap<usize, Mat>>,
    pub t_self: Vec<Mat>,
    pub t_nb: Vec<BTreeMap<usize, Mat>>,
    /// `β` in the cooperative game, `β̆` in the non-cooperative one.
    pub attenuation: f64,
}

impl GameWeights {
    /// Same `Q`, `R`, `T` for every agent, and `R_ij = r_nb`, `T_ij = t_nb` on every edge.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        topology: &GraphTopology,
        mode: GameMode,
        q: Mat,
        r: Mat,
        t: Mat,
        r_nb: Mat,
        t_nb: Mat,
        attenuation: f64,
    ) -> Result<Self> {
        let n_agents = topology.n_agents();
        let edge_map = |m: &Mat| -> Vec<BTreeMap<usize, Mat>> {
            (0..n_agents)
                .map(|i| topology.neighbors(i).iter().map(|&j| (j, m.clone())).collect())
                .collect()
        };
        let w = Self {
            mode,
            q: vec![q; n_agents],
            r_self: vec![r; n_agents],
            r_nb: edge_map(&r_nb),
            t_self: vec![t; n_agents],
            t_nb: edge_map(&t_nb),
            attenuation,
        };
        w.validate(topology)?;
        Ok(w)
    }

    pub fn validate(&self, topology: &GraphTopology) -> Result<()> {
        if !(self.attenuation > 0.0) || !self.attenuation.is_finite() {
            return Err(Error::InvalidWeights(format!(
                "attenuation level must be positive, got {}",
                self.attenuation
            )));
        }
        let n_agents = topology.n_agents();
        let lens = [self.q.len(), self.r_self.len(), self.t_self.len(), self.r_nb.len(), self.t_nb.len()];
        if lens.iter().any(|&l| l != n_agents) {
            return Err(Error::InvalidWeights("weights must be given for every agent".into()));
        }
        let pd = |m: &Mat, name: String| {
            if is_positive_definite(m) {
                Ok(())
            } else {
                Err(Error::SingularWeight { name })
            }
        };
        for i in 0..n_agents {
            pd(&self.q[i], format!("Q_{0}{0}", i + 1))?;
            pd(&self.r_self[i], format!("R_{0}{0}", i + 1))?;
            pd(&self.t_self[i], format!("T_{0}{0}", i + 1))?;
            let keys: Vec<usize> = self.r_nb[i].keys().copied().collect();
            let tkeys: Vec<usize> = self.t_nb[i].keys().copied().collect();
            if keys != topology.neighbors(i) || tkeys != topology.neighbors(i) {
                return Err(Error::InvalidWeights(format!(
                    "neighbor weights of agent {} must match its neighbor set",
                    i + 1
                )));
            }
            for (j, r) in &self.r_nb[i] {
                self.check_pair(r, format!("R_{}{}", i + 1, j + 1))?;
            }
            for (j, t) in &self.t_nb[i] {
                self.check_pair(t, format!("T_{}{}", i + 1, j + 1))?;
            }
        }
        Ok(())
    }

    fn check_pair(&self, m: &Mat, name: String) -> Result<()> {
        let ok = match self.mode {
            GameMode::Cooperative => is_positive_semidefinite(m),
            GameMode::Noncooperative => is_positive_definite(m),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::SingularWeight { name })
        }
    }

    pub fn with_mode(&self, topology: &GraphTopology, mode: GameMode) -> Result<Self> {
        let w = Self { mode, ..self.clone() };
        w.validate(topology)?;
        Ok(w)
    }

    fn require(&self, mode: GameMode) -> Result<()> {
        if self.mode == mode {
            Ok(())
        } else {
            Err(Error::WrongMode { expected: mode.name() })
        }
    }

    /// `Λ_i` with `r_i(z) = zᵀ Λ_i z` in the layout of `blocks`.
    pub fn stage_kernel(&self, i: usize, blocks: &BlockMap) -> Mat {
        let b2 = self.attenuation * self.attenuation;
        let mut l = Mat::zeros(blocks.dim(), blocks.dim());
        let mut put = |start: usize, m: &Mat| {
            l.view_mut((start, start), (m.nrows(), m.ncols())).copy_from(m);
        };
        put(0, &self.q[i]);
        put(blocks.u_self().start, &self.r_self[i]);
        let nb_sign = match self.mode {
            GameMode::Cooperative => 1.0,
            GameMode::Noncooperative => -b2,
        };
        for (k, j) in blocks.neighbors.iter().enumerate() {
            put(blocks.u_neighbor(k).start, &(&self.r_nb[i][j] * nb_sign));
            put(blocks.w_neighbor(k).start, &(&self.t_nb[i][j] * -b2));
        }
        put(blocks.w_self().start, &(&self.t_self[i] * -b2));
        l
    }

    /// Stage cost of the active mode.
    #[allow(clippy::too_many_arguments)]
    pub fn stage_cost(
        &self,
        topology: &GraphTopology,
        i: usize,
        delta: &Vector,
        u_i: &Vector,
        u_neighbors: &NeighborInputs,
        w_i: &Vector,
        w_neighbors: &NeighborInputs,
    ) -> Result<f64> {
        check_neighbor_keys(topology, i, u_neighbors)?;
        check_neighbor_keys(topology, i, w_neighbors)?;
        let b2 = self.attenuation * self.attenuation;
        let nb_sign = match self.mode {
            GameMode::Cooperative => 1.0,
            GameMode::Noncooperative => -b2,
        };
        let mut r = quad_form(&self.q[i], delta) + quad_form(&self.r_self[i], u_i)
            - b2 * quad_form(&self.t_self[i], w_i);
        for (j, uj) in u_neighbors {
            r += nb_sign * quad_form(&self.r_nb[i][j], uj);
        }
        for (j, wj) in w_neighbors {
            r -= b2 * quad_form(&self.t_nb[i][j], wj);
        }
        Ok(r)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn stage_cost_coop(
    weights: &GameWeights,
    topology: &GraphTopology,
    i: usize,
    delta: &Vector,
    u_i: &Vector,
    u_neighbors: &NeighborInputs,
    w_i: &Vector,
    w_neighbors: &NeighborInputs,
) -> Result<f64> {
    weights.require(GameMode::Cooperative)?;
    weights.stage_cost(topology, i, delta, u_i, u_neighbors, w_i, w_neighbors)
}

#[allow(clippy::too_many_arguments)]
pub fn stage_cost_noncoop(
    weights: &GameWeights,
    topology: &GraphTopology,
    i: usize,
    delta: &Vector,
    u_i: &Vector,
    u_neighbors: &NeighborInputs,
    w_i: &Vector,
    w_neighbors: &NeighborInputs,
) -> Result<f64> {
    weights.require(GameMode::Noncooperative)?;
    weights.stage_cost(topology, i, delta, u_i, u_neighbors, w_i, w_neighbors)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostToGo {
    pub total: f64,
    /// Partial sum over the last quarter of the horizon.
    pub tail: f64,
}

fn logged_stage_cost(
    log: &TrajectoryLog,
    topology: &GraphTopology,
    weights: &GameWeights,
    k: usize,
    i: usize,
) -> Result<f64> {
    weights.stage_cost(
        topology,
        i,
        &log.deltas[k][i],
        &log.controls[k][i],
        &log.neighbor_controls(topology, k, i),
        &log.disturbances[k][i],
        &log.neighbor_disturbances(topology, k, i),
    )
}

/// Accumulated stage cost of agent `i` along a logged trajectory.
pub fn cost_to_go(
    log: &TrajectoryLog,
    topology: &GraphTopology,
    weights: &GameWeights,
    i: usize,
) -> Result<CostToGo> {
    let horizon = log.horizon();
    let tail_start = horizon - horizon / 4;
    let mut total = 0.0;
    let mut tail = 0.0;
    for k in 0..horizon {
        let r = logged_stage_cost(log, topology, weights, k, i)?;
        total += r;
        if k >= tail_start {
            tail += r;
        }
    }
    Ok(CostToGo { total, tail })
}

fn require_square(p: &Mat, n: usize) -> Result<()> {
    if p.nrows() != n || p.ncols() != n {
        return Err(Error::DimensionMismatch { context: "value kernel", expected: n, got: p.nrows() });
    }
    Ok(())
}

/// Stationary pair `(u_i, w_i)` for a given next error, with `∇V = 2 P δ_{k+1}`.
pub fn policies_from_value_coop(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: &GameWeights,
    i: usize,
    p: &Mat,
    delta_next: &Vector,
) -> Result<(Vector, Vector)> {
    weights.require(GameMode::Cooperative)?;
    require_square(p, model.n())?;
    let c = topology.coupling(i);
    let b2 = weights.attenuation * weights.attenuation;
    let grad = p * delta_next * 2.0;
    let r_inv = inverse(&weights.r_self[i], "R_ii")?;
    let t_inv = inverse(&weights.t_self[i], "T_ii")?;
    let u = &r_inv * model.b(i).tr_mul(&grad) * (c / 2.0);
    let w = &t_inv * model.e(i).tr_mul(&grad) * (-c / (2.0 * b2));
    Ok((u, w))
}

/// Minmax actions for agent `i`: its own pair and the worst-case neighbor actions.
#[derive(Debug, Clone, PartialEq)]
pub struct MinmaxActions {
    pub u_i: Vector,
    pub u_neighbors: NeighborInputs,
    pub w_i: Vector,
    pub w_neighbors: NeighborInputs,
}

pub fn policies_from_value_noncoop(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: &GameWeights,
    i: usize,
    p: &Mat,
    delta_next: &Vector,
) -> Result<MinmaxActions> {
    weights.require(GameMode::Noncooperative)?;
    require_square(p, model.n())?;
    let c = topology.coupling(i);
    let b2 = weights.attenuation * weights.attenuation;
    let grad = p * delta_next * 2.0;
    let r_inv = inverse(&weights.r_self[i], "R_ii")?;
    let t_inv = inverse(&weights.t_self[i], "T_ii")?;
    let u_i = &r_inv * model.b(i).tr_mul(&grad) * (c / 2.0);
    let w_i = &t_inv * model.e(i).tr_mul(&grad) * (-c / (2.0 * b2));
    let mut u_neighbors = NeighborInputs::new();
    let mut w_neighbors = NeighborInputs::new();
    for &j in topology.neighbors(i) {
        let a = topology.weight(i, j);
        let rj = inverse(&weights.r_nb[i][&j], "R_ij")?;
        let tj = inverse(&weights.t_nb[i][&j], "T_ij")?;
        u_neighbors.insert(j, &rj * model.b(j).tr_mul(&grad) * (a / (2.0 * b2)));
        w_neighbors.insert(j, &tj * model.e(j).tr_mul(&grad) * (a / (2.0 * b2)));
    }
    Ok(MinmaxActions { u_i, u_neighbors, w_i, w_neighbors })
}

/// Solves the implicit stationarity conditions simultaneously with the error
/// dynamics. Blocks listed in `free` are unknowns; the others are fixed at the
/// values in `z` (only their entries are read).
fn stationary_solve(
    m: &Mat,
    lambda: &Mat,
    p: &Mat,
    z: &Vector,
    free: &[std::ops::Range<usize>],
) -> Result<Vector> {
    let idx: Vec<usize> = free.iter().flat_map(|r| r.clone()).collect();
    let k = idx.len();
    let mut fixed = z.clone();
    for &c in &idx {
        fixed[c] = 0.0;
    }
    let f = m * fixed;
    let g = Mat::from_fn(m.nrows(), k, |r, c| m[(r, idx[c])]);
    let lam = Mat::from_fn(k, k, |r, c| lambda[(idx[r], idx[c])]);
    // a = −Λ⁻¹ Gᵀ P (f + G a), i.e. (I + Λ⁻¹ GᵀPG) a = −Λ⁻¹ GᵀP f
    let lam_inv = inverse(&lam, "action weights")?;
    let gtp = g.tr_mul(p);
    let lhs = Mat::identity(k, k) + &lam_inv * &gtp * &g;
    let rhs = -(&lam_inv * &gtp * f);
    let a = solve(&lhs, &Mat::from_column_slice(k, 1, rhs.as_slice()), "stationarity system")?;
    let mut out = z.clone();
    for (c, &pos) in idx.iter().enumerate() {
        out[pos] = a[(c, 0)];
    }
    Ok(out)
}

/// Simultaneous solution of the cooperative stationarity conditions for
/// `(u_i, w_i)` at error `δ` with neighbor inputs held fixed.
#[allow(clippy::too_many_arguments)]
pub fn stationary_policies_coop(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: &GameWeights,
    i: usize,
    p: &Mat,
    delta: &Vector,
    u_neighbors: &NeighborInputs,
    w_neighbors: &NeighborInputs,
) -> Result<(Vector, Vector)> {
    weights.require(GameMode::Cooperative)?;
    require_square(p, model.n())?;
    check_neighbor_keys(topology, i, u_neighbors)?;
    check_neighbor_keys(topology, i, w_neighbors)?;
    let blocks = model.block_map(topology, i);
    let m = model.stacked_input_matrix(topology, i, &blocks.neighbors)?;
    let lambda = weights.stage_kernel(i, &blocks);
    let unb: Vec<Vector> = u_neighbors.values().cloned().collect();
    let wnb: Vec<Vector> = w_neighbors.values().cloned().collect();
    let z = blocks.assemble(delta, &Vector::zeros(model.p()), &unb, &Vector::zeros(model.q()), &wnb)?;
    let sol = stationary_solve(&m, &lambda, p, &z, &[blocks.u_self(), blocks.w_self()])?;
    Ok((
        sol.rows(blocks.u_self().start, model.p()).into_owned(),
        sol.rows(blocks.w_self().start, model.q()).into_owned(),
    ))
}

/// Simultaneous solution of the minmax stationarity conditions at error `δ`.
pub fn stationary_policies_noncoop(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: &GameWeights,
    i: usize,
    p: &Mat,
    delta: &Vector,
) -> Result<MinmaxActions> {
    weights.require(GameMode::Noncooperative)?;
    require_square(p, model.n())?;
    let blocks = model.block_map(topology, i);
    let m = model.stacked_input_matrix(topology, i, &blocks.neighbors)?;
    let lambda = weights.stage_kernel(i, &blocks);
    let mut z = Vector::zeros(blocks.dim());
    z.rows_mut(0, model.n()).copy_from(delta);
    let sol = stationary_solve(&m, &lambda, p, &z, &[blocks.actions()])?;
    let take = |r: std::ops::Range<usize>| sol.rows(r.start, r.len()).into_owned();
    Ok(MinmaxActions {
        u_i: take(blocks.u_self()),
        u_neighbors: blocks.neighbors.iter().enumerate().map(|(k, &j)| (j, take(blocks.u_neighbor(k)))).collect(),
        w_i: take(blocks.w_self()),
        w_neighbors: blocks.neighbors.iter().enumerate().map(|(k, &j)| (j, take(blocks.w_neighbor(k)))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttenuationEntry {
    /// 1-based agent id.
    pub agent: usize,
    /// 1-based id of the weighting pair `j`, equal to `agent` for the own pair.
    pub pair: usize,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttenuationReport {
    pub entries: Vec<AttenuationEntry>,
}

impl AttenuationReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    /// Smallest margin per agent, indexed by 0-based agent.
    pub fn agent_margins(&self, n_agents: usize) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; n_agents];
        for e in &self.entries {
            out[e.agent - 1] = out[e.agent - 1].min(e.margin);
        }
        out
    }

    pub fn agent_pass(&self, agent: usize) -> bool {
        self.entries.iter().filter(|e| e.agent == agent + 1).all(|e| e.pass)
    }
}

/// `B W⁻¹ Bᵀ`, the quadratic form that acts on `∇V`.
fn gram(b: &Mat, w: &Mat, what: &'static str) -> Result<Mat> {
    Ok(b * inverse(w, what)? * b.transpose())
}

fn entry(agent: usize, pair: usize, diff: &Mat) -> AttenuationEntry {
    let margin = min_sym_eigenvalue(diff);
    AttenuationEntry { agent: agent + 1, pair: pair + 1, margin, pass: margin >= MARGIN_TOLERANCE }
}

/// Tests `B_l R_lj⁻¹ B_lᵀ ⪰ β⁻² E_l T_lj⁻¹ E_lᵀ` for every agent `l` and `j ∈ N_l ∪ {l}`.
pub fn check_attenuation_coop(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: &GameWeights,
) -> Result<AttenuationReport> {
    weights.require(GameMode::Cooperative)?;
    let b2 = weights.attenuation * weights.attenuation;
    let mut entries = Vec::new();
    for l in 0..model.n_agents() {
        let pairs = std::iter::once((l, &weights.r_self[l], &weights.t_self[l])).chain(
            topology.neighbors(l).iter().map(|j| (*j, &weights.r_nb[l][j], &weights.t_nb[l][j])),
        );
        for (j, r, t) in pairs {
            let diff = gram(model.b(l), r, "R_lj")? - gram(model.e(l), t, "T_lj")? / b2;
            entries.push(entry(l, j, &diff));
        }
    }
    Ok(AttenuationReport { entries })
}

/// Tests the minmax condition with the neighbor terms on the right-hand side.
pub fn check_attenuation_noncoop(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: &GameWeights,
) -> Result<AttenuationReport> {
    weights.require(GameMode::Noncooperative)?;
    let b2 = weights.attenuation * weights.attenuation;
    let mut entries = Vec::new();
    for i in 0..model.n_agents() {
        let c2 = topology.coupling(i).powi(2);
        let mut diff = gram(model.b(i), &weights.r_self[i], "R_ii")? * c2
            - gram(model.e(i), &weights.t_self[i], "T_ii")? * (c2 / b2);
        for &j in topology.neighbors(i) {
            let a2 = topology.weight(i, j).powi(2);
            diff -= (gram(model.b(j), &weights.r_nb[i][&j], "R_ij")?
                + gram(model.e(j), &weights.t_nb[i][&j], "T_ij")?)
                * (a2 / b2);
        }
        entries.push(entry(i, i, &diff));
    }
    Ok(AttenuationReport { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaddleGapOptions {
    pub perturbation_scale: f64,
    pub samples: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for SaddleGapOptions {
    fn default() -> Self {
        Self { perturbation_scale: 0.1, samples: 200, horizon: 300, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SaddleGap {
    /// Smallest change of `J_i` over perturbed controls (a saddle has this ≥ 0).
    pub gap_u: f64,
    /// Largest change of `J_i` over perturbed disturbances (a saddle has this ≤ 0).
    pub gap_w: f64,
}

fn perturbed(law: &FeedbackLaw, scale: f64, rng: &mut ChaCha8Rng) -> FeedbackLaw {
    let mut out = law.clone();
    for v in out.weights.iter_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *v += scale * g;
    }
    out
}

fn agent_cost(log: &TrajectoryLog, i: usize) -> f64 {
    log.stage_costs.as_ref().map_or(0.0, |c| c.iter().map(|row| row[i]).sum())
}

/// Samples Gaussian perturbations of each agent's control and disturbance
/// policy weights and measures the change of that agent's cost over coupled
/// fleet rollouts with everyone else at `policies`.
#[allow(clippy::too_many_arguments)]
pub fn saddle_gap(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: &GameWeights,
    policies: &[AgentPolicy],
    x_init: &[Vector],
    x0_init: &Vector,
    opts: &SaddleGapOptions,
) -> Result<Vec<SaddleGap>> {
    weights.require(GameMode::Cooperative)?;
    let n_agents = model.n_agents();
    if policies.iter().any(|p| p.disturbance.is_none()) {
        return Err(Error::Validation("saddle gap needs a disturbance policy for every agent".into()));
    }
    let none = vec![DisturbanceModel::zero(model.q()); n_agents];
    let run = |pol: &[AgentPolicy]| {
        simulate(model, topology, Some(weights), pol, &none, x_init, x0_init, opts.horizon, None)
    };
    let nominal = run(policies)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let j_star = agent_cost(&nominal, i);
        let mut gap_u = f64::INFINITY;
        let mut gap_w = f64::NEG_INFINITY;
        for _ in 0..opts.samples {
            let mut pol = policies.to_vec();
            pol[i].control = perturbed(&policies[i].control, opts.perturbation_scale, &mut rng);
            gap_u = gap_u.min(agent_cost(&run(&pol)?, i) - j_star);

            let mut pol = policies.to_vec();
            let dist = policies[i].disturbance.as_ref().expect("checked above");
            pol[i].disturbance = Some(perturbed(dist, opts.perturbation_scale, &mut rng));
            gap_w = gap_w.max(agent_cost(&run(&pol)?, i) - j_star);
        }
        if opts.samples == 0 {
            gap_u = 0.0;
            gap_w = 0.0;
        }
        out.push(SaddleGap { gap_u, gap_w });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct L2Report {
    pub agent: usize,
    pub slack: f64,
    pub pass: bool,
    pub tail_fraction: f64,
}

/// Checks the L2-gain dissipation inequality of each agent along `log`.
///
/// Cooperative: `Σ(δᵀQδ + uᵀRu + Σ u_jᵀR_ij u_j) ≤ V0 + β² Σ(wᵀTw + Σ w_jᵀT_ij w_j)`.
/// Non-cooperative: `Σ(δᵀQδ + uᵀRu) ≤ V0 + β̆² Σ(Σ u_jᵀR_ij u_j + wᵀTw + Σ w_jᵀT_ij w_j)`.
pub fn l2_gain_check(
    log: &TrajectoryLog,
    topology: &GraphTopology,
    weights: &GameWeights,
    v0: &[f64],
) -> Result<Vec<L2Report>> {
    let n_agents = log.n_agents();
    if v0.len() != n_agents {
        return Err(Error::DimensionMismatch { context: "initial values", expected: n_agents, got: v0.len() });
    }
    let horizon = log.horizon();
    let tail_start = horizon - horizon / 4;
    let b2 = weights.attenuation * weights.attenuation;
    let mut out = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let (mut lhs, mut rhs, mut tail) = (0.0, 0.0, 0.0);
        for k in 0..horizon {
            let mut perf = quad_form(&weights.q[i], &log.deltas[k][i])
                + quad_form(&weights.r_self[i], &log.controls[k][i]);
            let mut supply = quad_form(&weights.t_self[i], &log.disturbances[k][i]);
            for &j in topology.neighbors(i) {
                let uj = quad_form(&weights.r_nb[i][&j], &log.controls[k][j]);
                match weights.mode {
                    GameMode::Cooperative => perf += uj,
                    GameMode::Noncooperative => supply += uj,
                }
                supply += quad_form(&weights.t_nb[i][&j], &log.disturbances[k][j]);
            }
            lhs += perf;
            rhs += b2 * supply;
            if k >= tail_start {
                tail += perf + b2 * supply;
            }
        }
        let total = lhs + rhs;
        let tail_fraction = if total > 0.0 { tail / total } else { 0.0 };
        if tail_fraction >= 0.01 {
            return Err(Error::TailTooLarge { agent: i + 1, tail_fraction });
        }
        let slack = v0[i] + rhs - lhs;
        out.push(L2Report { agent: i + 1, slack, pass: slack >= 0.0, tail_fraction });
    }
    Ok(out)
}

/// Cooperative stationary actions of the whole fleet at once: every agent's
/// `(u_i, w_i)` is stationary for its own value kernel given its neighbors' actions.
pub fn fleet_stationary_actions(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: &GameWeights,
    values: &[Mat],
    deltas: &[Vector],
) -> Result<(Vec<Vector>, Vec<Vector>)> {
    weights.require(GameMode::Cooperative)?;
    let (n_agents, p, q) = (model.n_agents(), model.p(), model.q());
    let per = p + q;
    let dim = n_agents * per;
    // Unknowns ordered (u_1, w_1, u_2, w_2, ...).
    let mut lhs = Mat::zeros(dim, dim);
    let mut rhs = Vector::zeros(dim);
    let b2 = weights.attenuation * weights.attenuation;
    for i in 0..n_agents {
        let c = topology.coupling(i);
        let pv = &values[i];
        // δ' = Aδ + Σ_agents (G_u u + G_w w)
        let mut cols: Vec<(usize, Mat)> = vec![
            (i * per, model.b(i) * -c),
            (i * per + p, model.e(i) * -c),
        ];
        for &j in topology.neighbors(i) {
            let a = topology.weight(i, j);
            cols.push((j * per, model.b(j) * a));
            cols.push((j * per + p, model.e(j) * a));
        }
        let f = model.a() * &deltas[i];
        // Stationarity: Λ_b a_b + G_bᵀ P δ' = 0 for b ∈ {u_i, w_i}.
        let own = [
            (i * per, model.b(i) * -c, weights.r_self[i].clone()),
            (i * per + p, model.e(i) * -c, &weights.t_self[i] * -b2),
        ];
        for (row, g, lam) in own {
            let gtp = g.tr_mul(pv);
            let mut v = lhs.view_mut((row, row), (lam.nrows(), lam.ncols()));
            v += &lam;
            for (col, gc) in &cols {
                let blk = &gtp * gc;
                let mut v = lhs.view_mut((row, *col), (blk.nrows(), blk.ncols()));
                v += &blk;
            }
            let r = -(&gtp * &f);
            let mut v = rhs.rows_mut(row, r.len());
            v += &r;
        }
    }
    let sol = solve(&lhs, &Mat::from_column_slice(dim, 1, rhs.as_slice()), "fleet stationarity")?;
    let u = (0..n_agents).map(|i| Vector::from_fn(p, |r, _| sol[(i * per + r, 0)])).collect();
    let w = (0..n_agents).map(|i| Vector::from_fn(q, |r, _| sol[(i * per + p + r, 0)])).collect();
    Ok((u, w))
}

/// Per-step Lyapunov differences under the fleet stationary policies.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovDecrease {
    /// `ΔV_{i,k}` indexed `[k][i]`.
    pub delta_v: Vec<Vec<f64>>,
    /// Largest value of `ΔV_{i,k} + λ_min(Q_ii)‖δ_{i,k}‖²` over the run.
    pub worst_excess: f64,
    pub log: TrajectoryLog,
}

/// Rolls the fleet out with every agent at its value-stationary actions
/// (no external disturbance) and records `ΔV_{i,k} = V_i(δ_{k+1}) − V_i(δ_k)`.
pub fn lyapunov_decrease(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: &GameWeights,
    values: &[Mat],
    x_init: &[Vector],
    x0_init: &Vector,
    horizon: usize,
) -> Result<LyapunovDecrease> {
    if values.len() != model.n_agents() {
        return Err(Error::DimensionMismatch { context: "value kernels", expected: model.n_agents(), got: values.len() });
    }
    let log = crate::dynamics::rollout(model, topology, Some(weights), x_init, x0_init, horizon, |_, d, _| {
        fleet_stationary_actions(model, topology, weights, values, d)
    })?;
    let mut delta_v = Vec::with_capacity(horizon);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..horizon {
        let row: Vec<f64> = (0..model.n_agents())
            .map(|i| quad_form(&values[i], &log.deltas[k + 1][i]) - quad_form(&values[i], &log.deltas[k][i]))
            .collect();
        for (i, dv) in row.iter().enumerate() {
            let bound = min_sym_eigenvalue(&weights.q[i]) * log.deltas[k][i].norm_squared();
            worst = worst.max(dv + bound);
        }
        delta_v.push(row);
    }
    Ok(LyapunovDecrease { delta_v, worst_excess: worst, log })
}
