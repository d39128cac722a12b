//! Leader/follower dynamics, disturbances, probing noise and closed-loop rollouts.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockMap;
use crate::error::{Error, Result};
use crate::game::GameWeights;
use crate::graph::GraphTopology;
use crate::linalg::{hstack, numerical_rank, Mat, Vector};

/// Neighbor index (0-based) to a neighbor's input vector.
pub type NeighborInputs = BTreeMap<usize, Vector>;

/// Common drift `A` with per-agent input matrices `B_i` and disturbance matrices `E_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetModel {
    a: Mat,
    b: Vec<Mat>,
    e: Vec<Mat>,
}

impl FleetModel {
    pub fn new(a: Mat, b: Vec<Mat>, e: Vec<Mat>) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(Error::DimensionMismatch {
                context: "A must be square",
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        if b.is_empty() || b.len() != e.len() {
            return Err(Error::DimensionMismatch {
                context: "number of E_i matrices",
                expected: b.len(),
                got: e.len(),
            });
        }
        let p = b[0].ncols();
        let q = e[0].ncols();
        for (i, (bi, ei)) in b.iter().zip(&e).enumerate() {
            if bi.nrows() != n || bi.ncols() != p {
                return Err(Error::DimensionMismatch {
                    context: "B_i shape",
                    expected: n * p,
                    got: bi.nrows() * bi.ncols(),
                });
            }
            if ei.nrows() != n || ei.ncols() != q {
                return Err(Error::DimensionMismatch {
                    context: "E_i shape",
                    expected: n * q,
                    got: ei.nrows() * ei.ncols(),
                });
            }
            let rank = numerical_rank(&reachability_matrix(&a, bi), 1e-10);
            if rank < n {
                return Err(Error::NotReachable { agent: i + 1, rank, n });
            }
        }
        Ok(Self { a, b, e })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self, i: usize) -> &Mat {
        &self.b[i]
    }

    pub fn e(&self, i: usize) -> &Mat {
        &self.e[i]
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn p(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn q(&self) -> usize {
        self.e[0].ncols()
    }

    pub fn n_agents(&self) -> usize {
        self.b.len()
    }

    fn check_len(&self, context: &'static str, expected: usize, v: &Vector) -> Result<()> {
        if v.len() == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { context, expected, got: v.len() })
        }
    }

    pub fn step_leader(&self, x0: &Vector) -> Result<Vector> {
        self.check_len("leader state", self.n(), x0)?;
        Ok(&self.a * x0)
    }

    pub fn step_follower(&self, i: usize, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector> {
        if i >= self.n_agents() {
            return Err(Error::UnknownAgent(i));
        }
        self.check_len("follower state", self.n(), x)?;
        self.check_len("control input", self.p(), u)?;
        self.check_len("disturbance input", self.q(), w)?;
        Ok(&self.a * x + &self.b[i] * u + &self.e[i] * w)
    }

    /// One step of the local neighborhood error dynamics of agent `i`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_error_dynamics(
        &self,
        topology: &GraphTopology,
        i: usize,
        delta: &Vector,
        u_i: &Vector,
        u_neighbors: &NeighborInputs,
        w_i: &Vector,
        w_neighbors: &NeighborInputs,
    ) -> Result<Vector> {
        if i >= self.n_agents() {
            return Err(Error::UnknownAgent(i));
        }
        check_neighbor_keys(topology, i, u_neighbors)?;
        check_neighbor_keys(topology, i, w_neighbors)?;
        self.check_len("delta", self.n(), delta)?;
        self.check_len("control input", self.p(), u_i)?;
        self.check_len("disturbance input", self.q(), w_i)?;
        let c = topology.coupling(i);
        let mut next = &self.a * delta - (&self.b[i] * u_i) * c - (&self.e[i] * w_i) * c;
        for &j in topology.neighbors(i) {
            let a_ij = topology.weight(i, j);
            let (uj, wj) = (&u_neighbors[&j], &w_neighbors[&j]);
            self.check_len("neighbor control", self.p(), uj)?;
            self.check_len("neighbor disturbance", self.q(), wj)?;
            next += (&self.b[j] * uj) * a_ij + (&self.e[j] * wj) * a_ij;
        }
        Ok(next)
    }

    /// `M_i` with `δ_{i,k+1} = M_i z_{i,k}`.
    pub fn stacked_input_matrix(
        &self,
        topology: &GraphTopology,
        i: usize,
        neighbor_order: &[usize],
    ) -> Result<Mat> {
        if i >= self.n_agents() {
            return Err(Error::UnknownAgent(i));
        }
        let mut sorted = neighbor_order.to_vec();
        sorted.sort_unstable();
        if sorted != topology.neighbors(i) {
            return Err(Error::BadNeighborOrder { agent: i + 1 });
        }
        let c = topology.coupling(i);
        let n = self.n();
        let mut parts: Vec<Mat> = vec![self.a.clone(), -&self.b[i] * c];
        parts.extend(neighbor_order.iter().map(|&j| &self.b[j] * topology.weight(i, j)));
        parts.push(-&self.e[i] * c);
        parts.extend(neighbor_order.iter().map(|&j| &self.e[j] * topology.weight(i, j)));
        let refs: Vec<&Mat> = parts.iter().collect();
        Ok(hstack(&refs, n))
    }

    /// Block layout for agent `i` with neighbors in ascending order.
    pub fn block_map(&self, topology: &GraphTopology, i: usize) -> BlockMap {
        BlockMap::new(self.n(), self.p(), self.q(), topology.neighbors(i).to_vec())
    }
}

pub fn reachability_matrix(a: &Mat, b: &Mat) -> Mat {
    let n = a.nrows();
    let mut cols: Vec<Mat> = Vec::with_capacity(n);
    let mut term = b.clone();
    for _ in 0..n {
        cols.push(term.clone());
        term = a * term;
    }
    let refs: Vec<&Mat> = cols.iter().collect();
    hstack(&refs, n)
}

pub(crate) fn check_neighbor_keys(
    topology: &GraphTopology,
    i: usize,
    inputs: &NeighborInputs,
) -> Result<()> {
    let nb = topology.neighbors(i);
    for &j in nb {
        if !inputs.contains_key(&j) {
            return Err(Error::MissingNeighborInput { agent: i + 1, neighbor: j + 1 });
        }
    }
    if let Some(&extra) = inputs.keys().find(|j| !nb.contains(j)) {
        return Err(Error::MissingNeighborInput { agent: i + 1, neighbor: extra + 1 });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    Zero,
    DecayingSinusoid,
    SeededDecayingNoise,
}

/// Square-summable external disturbance `w_{i,k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceModel {
    pub kind: DisturbanceKind,
    pub amplitude: Vec<f64>,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_frequency")]
    pub frequency: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_decay() -> f64 {
    0.05
}

fn default_frequency() -> f64 {
    0.5
}

impl DisturbanceModel {
    pub fn zero(q: usize) -> Self {
        Self {
            kind: DisturbanceKind::Zero,
            amplitude: vec![0.0; q],
            decay: default_decay(),
            frequency: default_frequency(),
            seed: 0,
        }
    }

    /// `amplitude · e^{−0.05 k} sin(0.5 k)`.
    pub fn decaying_sinusoid(amplitude: Vec<f64>) -> Self {
        Self {
            kind: DisturbanceKind::DecayingSinusoid,
            amplitude,
            decay: default_decay(),
            frequency: default_frequency(),
            seed: 0,
        }
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        if self.amplitude.len() != q {
            return Err(Error::DimensionMismatch {
                context: "disturbance amplitude",
                expected: q,
                got: self.amplitude.len(),
            });
        }
        if self.kind != DisturbanceKind::Zero && !(self.decay > 0.0) {
            return Err(Error::Validation("disturbance decay must be positive".into()));
        }
        Ok(())
    }

    /// The first `horizon` samples of the signal.
    pub fn generate(&self, horizon: usize) -> Vec<Vector> {
        let q = self.amplitude.len();
        let amp = Vector::from_column_slice(&self.amplitude);
        match self.kind {
            DisturbanceKind::Zero => vec![Vector::zeros(q); horizon],
            DisturbanceKind::DecayingSinusoid => (0..horizon)
                .map(|k| {
                    let k = k as f64;
                    &amp * ((-self.decay * k).exp() * (self.frequency * k).sin())
                })
                .collect(),
            DisturbanceKind::SeededDecayingNoise => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..horizon)
                    .map(|k| {
                        let scale = (-self.decay * k as f64).exp();
                        Vector::from_fn(q, |c, _| {
                            let g: f64 = rng.sample(StandardNormal);
                            amp[c] * scale * g
                        })
                    })
                    .collect()
            }
        }
    }
}

/// Additive exploration noise, uniform in `[−amplitude, amplitude]` scaled by `e^{−decay k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    #[serde(default = "default_probe_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_probe_decay")]
    pub decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Also excite the disturbance channel.
    #[serde(default)]
    pub excite_disturbance: bool,
}

fn default_probe_amplitude() -> f64 {
    0.1
}

fn default_probe_decay() -> f64 {
    0.001
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            amplitude: default_probe_amplitude(),
            decay: default_probe_decay(),
            seed: 0,
            excite_disturbance: false,
        }
    }
}

/// Deterministic stream of probing noise. Draw order is (step, agent, component).
pub struct ProbeNoise {
    spec: ProbeSpec,
    rng: ChaCha8Rng,
}

impl ProbeNoise {
    pub fn new(spec: &ProbeSpec) -> Self {
        Self { spec: spec.clone(), rng: ChaCha8Rng::seed_from_u64(spec.seed) }
    }

    pub fn spec(&self) -> &ProbeSpec {
        &self.spec
    }

    pub fn sample(&mut self, k: usize, dim: usize) -> Vector {
        let scale = self.spec.amplitude * (-self.spec.decay * k as f64).exp();
        let rng = &mut self.rng;
        Vector::from_fn(dim, |_, _| scale * rng.random_range(-1.0..=1.0))
    }
}

/// Feature map used by linear-in-parameter policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// `φ(δ) = δ`.
    #[default]
    Identity,
    /// `φ(δ) = col(δ, δ_a δ_b for a ≤ b)`.
    Quadratic,
}

impl Basis {
    pub fn dim(&self, n: usize) -> usize {
        match self {
            Basis::Identity => n,
            Basis::Quadratic => n + n * (n + 1) / 2,
        }
    }

    pub fn eval(&self, delta: &Vector) -> Vector {
        match self {
            Basis::Identity => delta.clone(),
            Basis::Quadratic => {
                let n = delta.len();
                let mut out = Vector::zeros(self.dim(n));
                out.rows_mut(0, n).copy_from(delta);
                let mut idx = n;
                for a in 0..n {
                    for b in a..n {
                        out[idx] = delta[a] * delta[b];
                        idx += 1;
                    }
                }
                out
            }
        }
    }
}

/// `output = Wᵀ φ(δ)`; a linear gain `K` is `W = Kᵀ` with the identity basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    pub weights: Mat,
    pub basis: Basis,
}

impl FeedbackLaw {
    pub fn linear(gain: &Mat) -> Self {
        Self { weights: gain.transpose(), basis: Basis::Identity }
    }

    pub fn zero(n: usize, out: usize) -> Self {
        Self { weights: Mat::zeros(n, out), basis: Basis::Identity }
    }

    pub fn eval(&self, delta: &Vector) -> Vector {
        self.weights.tr_mul(&self.basis.eval(delta))
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentPolicy {
    pub control: FeedbackLaw,
    /// Feedback disturbance applied on top of the external signal.
    pub disturbance: Option<FeedbackLaw>,
}

impl AgentPolicy {
    pub fn control_only(control: FeedbackLaw) -> Self {
        Self { control, disturbance: None }
    }
}

/// Recorded closed-loop trajectory: `K+1` states, `K` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    /// `states[k][i]` for `k = 0..=K`.
    pub states: Vec<Vec<Vector>>,
    pub leader: Vec<Vector>,
    pub deltas: Vec<Vec<Vector>>,
    /// `controls[k][i]` for `k = 0..K`.
    pub controls: Vec<Vec<Vector>>,
    pub disturbances: Vec<Vec<Vector>>,
    pub stage_costs: Option<Vec<Vec<f64>>>,
}

impl TrajectoryLog {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn n_agents(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    /// `‖x_{i,k} − x_{0,k}‖`.
    pub fn sync_error(&self, k: usize, i: usize) -> f64 {
        (&self.states[k][i] - &self.leader[k]).norm()
    }

    pub fn max_sync_error(&self, k: usize) -> f64 {
        (0..self.n_agents()).map(|i| self.sync_error(k, i)).fold(0.0, f64::max)
    }

    /// Neighbor controls of agent `i` at step `k`.
    pub fn neighbor_controls(&self, topology: &GraphTopology, k: usize, i: usize) -> NeighborInputs {
        topology
            .neighbors(i)
            .iter()
            .map(|&j| (j, self.controls[k][j].clone()))
            .collect()
    }

    pub fn neighbor_disturbances(
        &self,
        topology: &GraphTopology,
        k: usize,
        i: usize,
    ) -> NeighborInputs {
        topology
            .neighbors(i)
            .iter()
            .map(|&j| (j, self.disturbances[k][j].clone()))
            .collect()
    }

    pub fn check_consistency(&self) -> Result<()> {
        let k = self.horizon();
        let lens = [self.states.len(), self.leader.len(), self.deltas.len()];
        if lens.iter().any(|&l| l != k + 1) || self.disturbances.len() != k {
            return Err(Error::Validation("trajectory record counts are inconsistent".into()));
        }
        Ok(())
    }
}

/// Inputs chosen at one step: per-agent controls and disturbances.
pub type StepInputs = (Vec<Vector>, Vec<Vector>);

/// Closed-loop rollout driver.
///
/// `actuate(k, deltas, states)` returns the inputs applied at step `k`.
/// `δ` is recomputed from fleet states at every step.
#[allow(clippy::too_many_arguments)]
pub fn rollout<F>(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: Option<&GameWeights>,
    x_init: &[Vector],
    x0_init: &Vector,
    horizon: usize,
    mut actuate: F,
) -> Result<TrajectoryLog>
where
    F: FnMut(usize, &[Vector], &[Vector]) -> Result<StepInputs>,
{
    if horizon == 0 {
        return Err(Error::EmptyHorizon);
    }
    let n_agents = model.n_agents();
    if topology.n_agents() != n_agents || x_init.len() != n_agents {
        return Err(Error::DimensionMismatch {
            context: "number of agents",
            expected: n_agents,
            got: x_init.len().min(topology.n_agents()),
        });
    }
    model.check_len("leader state", model.n(), x0_init)?;
    for x in x_init {
        model.check_len("initial follower state", model.n(), x)?;
    }

    let mut states = Vec::with_capacity(horizon + 1);
    let mut leader = Vec::with_capacity(horizon + 1);
    let mut deltas = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut disturbances = Vec::with_capacity(horizon);
    let mut costs = weights.map(|_| Vec::with_capacity(horizon));

    let mut x = x_init.to_vec();
    let mut x0 = x0_init.clone();
    for k in 0..=horizon {
        let d = topology.neighborhood_errors(&x, &x0)?;
        if x.iter().chain(std::iter::once(&x0)).any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NumericalDivergence { step: k, what: "state".into() });
        }
        states.push(x.clone());
        leader.push(x0.clone());
        deltas.push(d.clone());
        if k == horizon {
            break;
        }
        let (u, w) = actuate(k, &d, &x)?;
        if u.len() != n_agents || w.len() != n_agents {
            return Err(Error::DimensionMismatch {
                context: "inputs per agent",
                expected: n_agents,
                got: u.len().min(w.len()),
            });
        }
        if u.iter().chain(&w).any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NumericalDivergence { step: k, what: "input".into() });
        }
        if let (Some(gw), Some(c)) = (weights, costs.as_mut()) {
            let row = (0..n_agents)
                .map(|i| {
                    let unb = topology.neighbors(i).iter().map(|&j| (j, u[j].clone())).collect();
                    let wnb = topology.neighbors(i).iter().map(|&j| (j, w[j].clone())).collect();
                    gw.stage_cost(topology, i, &d[i], &u[i], &unb, &w[i], &wnb)
                })
                .collect::<Result<Vec<f64>>>()?;
            c.push(row);
        }
        let next: Vec<Vector> = (0..n_agents)
            .map(|i| model.step_follower(i, &x[i], &u[i], &w[i]))
            .collect::<Result<_>>()?;
        x0 = model.step_leader(&x0)?;
        x = next;
        controls.push(u);
        disturbances.push(w);
    }

    Ok(TrajectoryLog {
        n: model.n(),
        p: model.p(),
        q: model.q(),
        states,
        leader,
        deltas,
        controls,
        disturbances,
        stage_costs: costs,
    })
}

/// Closed-loop simulation under per-agent feedback policies.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: Option<&GameWeights>,
    policies: &[AgentPolicy],
    disturbances: &[DisturbanceModel],
    x_init: &[Vector],
    x0_init: &Vector,
    horizon: usize,
    probe: Option<&ProbeSpec>,
) -> Result<TrajectoryLog> {
    let n_agents = model.n_agents();
    if policies.len() != n_agents || disturbances.len() != n_agents {
        return Err(Error::DimensionMismatch {
            context: "policies/disturbances per agent",
            expected: n_agents,
            got: policies.len().min(disturbances.len()),
        });
    }
    for d in disturbances {
        d.validate(model.q())?;
    }
    let external: Vec<Vec<Vector>> = disturbances.iter().map(|d| d.generate(horizon)).collect();
    let mut noise = probe.map(ProbeNoise::new);
    rollout(model, topology, weights, x_init, x0_init, horizon, |k, deltas, _| {
        let mut u = Vec::with_capacity(n_agents);
        let mut w = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let mut ui = policies[i].control.eval(&deltas[i]);
            if let Some(nz) = noise.as_mut() {
                ui += nz.sample(k, model.p());
            }
            let mut wi = external[i][k].clone();
            if let Some(dl) = &policies[i].disturbance {
                wi += dl.eval(&deltas[i]);
            }
            if let Some(nz) = noise.as_mut().filter(|n| n.spec().excite_disturbance) {
                wi += nz.sample(k, model.q());
            }
            u.push(ui);
            w.push(wi);
        }
        Ok((u, w))
    })
}

/// Iterates the error dynamics directly from logged inputs, starting at `δ_0`.
pub fn iterate_error_dynamics(
    model: &FleetModel,
    topology: &GraphTopology,
    log: &TrajectoryLog,
) -> Result<Vec<Vec<Vector>>> {
    let n_agents = log.n_agents();
    let mut out = vec![log.deltas[0].clone()];
    for k in 0..log.horizon() {
        let cur = out.last().expect("non-empty");
        let next = (0..n_agents)
            .map(|i| {
                model.step_error_dynamics(
                    topology,
                    i,
                    &cur[i],
                    &log.controls[k][i],
                    &log.neighbor_controls(topology, k, i),
                    &log.disturbances[k][i],
                    &log.neighbor_disturbances(topology, k, i),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(next);
    }
    Ok(out)
}
