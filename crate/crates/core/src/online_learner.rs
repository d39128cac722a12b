//! Online actor–disturber–critic learning (cooperative) and
//! actor–adversary–disturber–critic learning (non-cooperative).

use serde::{Deserialize, Serialize};

use crate::blocks::{sub, BlockMap};
use crate::dynamics::{rollout, AgentPolicy, Basis, FeedbackLaw, DisturbanceModel, FleetModel, ProbeNoise, ProbeSpec, TrajectoryLog};
use crate::error::{Error, Result};
use crate::game::{GameMode, GameWeights};
use crate::graph::GraphTopology;
use crate::linalg::{all_finite, condition_number, quad_form, symmetrize, Mat, Vector};
use crate::pi_solver::{
    evaluate_model_based, joint_stationary_policies_coop, joint_stationary_policies_noncoop, AgentGains, QKernel,
    BLOCK_COND_LIMIT,
};

pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub critic: f64,
    pub actor: f64,
    pub disturber: f64,
    /// Rate of the adversary control networks (non-cooperative only).
    #[serde(default = "default_adversary_rate")]
    pub adversary_actor: f64,
    #[serde(default = "default_adversary_rate")]
    pub adversary_disturber: f64,
}

fn default_adversary_rate() -> f64 {
    0.05
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { critic: 0.1, actor: 0.1, disturber: 0.1, adversary_actor: 0.05, adversary_disturber: 0.05 }
    }
}

impl LearningRates {
    pub fn uniform(alpha: f64) -> Self {
        Self { critic: alpha, actor: alpha, disturber: alpha, adversary_actor: alpha, adversary_disturber: alpha }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.critic, self.actor, self.disturber, self.adversary_actor, self.adversary_disturber];
        if all.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Validation(format!("learning rates must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Weights of one agent's networks.
///
/// The adversary networks are indexed like `blocks.neighbors` and are empty in
/// the cooperative game.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    /// 0-based agent index.
    pub agent: usize,
    pub blocks: BlockMap,
    pub mode: GameMode,
    pub basis: Basis,
    pub critic: Mat,
    pub actor: Mat,
    pub disturber: Mat,
    pub adversary_u: Vec<Mat>,
    pub adversary_w: Vec<Mat>,
    pub rates: LearningRates,
}

/// Target actions produced by the current critic.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub u: Vector,
    pub w: Vector,
    /// Adversary targets per neighbor (non-cooperative only).
    pub u_neighbors: Vec<Vector>,
    pub w_neighbors: Vec<Vector>,
}

/// `e = r + z'ᵀ W z' − zᵀ W z`.
pub fn td_error(critic: &Mat, z: &Vector, r: f64, z_next: &Vector) -> Result<f64> {
    let m = critic.nrows();
    for (what, v) in [("z", z.len()), ("z_next", z_next.len()), ("critic columns", critic.ncols())] {
        if v != m {
            return Err(Error::DimensionMismatch { context: what_context(what), expected: m, got: v });
        }
    }
    Ok(r + quad_form(critic, z_next) - quad_form(critic, z))
}

fn what_context(what: &str) -> &'static str {
    match what {
        "z" => "TD error z",
        "z_next" => "TD error z_next",
        _ => "TD error critic",
    }
}

/// `W ← sym(W − α e (z' z'ᵀ − z zᵀ))`.
pub fn critic_step(critic: &Mat, alpha: f64, e: f64, z: &Vector, z_next: &Vector) -> Result<Mat> {
    let grad = z_next * z_next.transpose() - z * z.transpose();
    let out = symmetrize(&(critic - grad * (alpha * e)));
    if !all_finite(&out) {
        return Err(Error::NonFiniteWeights("critic"));
    }
    Ok(out)
}

/// `W ← W − α φ (Wᵀφ − target)ᵀ`.
pub fn gradient_step(w: &Mat, alpha: f64, phi: &Vector, target: &Vector) -> Result<Mat> {
    if phi.len() != w.nrows() || target.len() != w.ncols() {
        return Err(Error::DimensionMismatch {
            context: "policy network update",
            expected: w.nrows() * w.ncols(),
            got: phi.len() * target.len(),
        });
    }
    let err = w.tr_mul(phi) - target;
    let out = w - phi * err.transpose() * alpha;
    if !all_finite(&out) {
        return Err(Error::NonFiniteWeights("policy network"));
    }
    Ok(out)
}

fn is_guard_error(e: &Error) -> bool {
    matches!(e, Error::SingularSchurComplement(_) | Error::SingularBlockMatrix { .. } | Error::Singular(_))
}

impl LearnerState {
    /// Checks shapes and that the critic's `S_uu` and `S_ww` blocks are usable.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        agent: usize,
        blocks: BlockMap,
        mode: GameMode,
        basis: Basis,
        critic: Mat,
        actor: Mat,
        disturber: Mat,
        rates: LearningRates,
    ) -> Result<Self> {
        rates.validate()?;
        let m = blocks.dim();
        if critic.shape() != (m, m) {
            return Err(Error::DimensionMismatch { context: "critic weights", expected: m, got: critic.nrows() });
        }
        let bd = basis.dim(blocks.n);
        if actor.shape() != (bd, blocks.p) {
            return Err(Error::DimensionMismatch { context: "actor weights", expected: bd, got: actor.nrows() });
        }
        if disturber.shape() != (bd, blocks.q) {
            return Err(Error::DimensionMismatch { context: "disturber weights", expected: bd, got: disturber.nrows() });
        }
        let critic = symmetrize(&critic);
        for (name, r) in [("critic S_uu", blocks.u_self()), ("critic S_ww", blocks.w_self())] {
            if !(condition_number(&sub(&critic, r.clone(), r)) <= BLOCK_COND_LIMIT) {
                return Err(Error::Singular(name));
            }
        }
        let (adversary_u, adversary_w) = match mode {
            GameMode::Cooperative => (Vec::new(), Vec::new()),
            GameMode::Noncooperative => (
                vec![Mat::zeros(bd, blocks.p); blocks.n_neighbors()],
                vec![Mat::zeros(bd, blocks.q); blocks.n_neighbors()],
            ),
        };
        Ok(Self { agent, blocks, mode, basis, critic, actor, disturber, adversary_u, adversary_w, rates })
    }

    pub fn critic_kernel(&self) -> QKernel {
        QKernel { agent: self.agent, s: self.critic.clone(), blocks: self.blocks.clone(), mode: self.mode }
    }

    pub fn features(&self, delta: &Vector) -> Vector {
        self.basis.eval(delta)
    }

    pub fn control(&self, delta: &Vector) -> Vector {
        self.actor.tr_mul(&self.features(delta))
    }

    pub fn disturbance(&self, delta: &Vector) -> Vector {
        self.disturber.tr_mul(&self.features(delta))
    }

    /// Adversary estimates `(û_ij, ŵ_ij)` of every neighbor.
    pub fn adversary_estimates(&self, delta: &Vector) -> (Vec<Vector>, Vec<Vector>) {
        let phi = self.features(delta);
        (
            self.adversary_u.iter().map(|w| w.tr_mul(&phi)).collect(),
            self.adversary_w.iter().map(|w| w.tr_mul(&phi)).collect(),
        )
    }

    pub fn td_error(&self, z: &Vector, r: f64, z_next: &Vector) -> Result<f64> {
        td_error(&self.critic, z, r, z_next)
    }

    pub fn critic_update(&self, z: &Vector, z_next: &Vector, e: f64) -> Result<Self> {
        let mut out = self.clone();
        out.critic = critic_step(&self.critic, self.rates.critic, e, z, z_next)?;
        Ok(out)
    }

    /// Cooperative targets need the measured neighbor actions; the
    /// non-cooperative ones depend on `δ` alone and ignore them.
    pub fn targets(&self, delta: &Vector, u_neighbors: &[Vector], w_neighbors: &[Vector]) -> Result<Targets> {
        let b = &self.blocks;
        let kernel = self.critic_kernel();
        match self.mode {
            GameMode::Cooperative => {
                let g = joint_stationary_policies_coop(&kernel)?;
                let z = b.assemble(delta, &Vector::zeros(b.p), u_neighbors, &Vector::zeros(b.q), w_neighbors)?;
                let ctx: Vec<f64> = b.delta().chain(b.u_neighbors()).chain(b.w_neighbors()).map(|i| z[i]).collect();
                let ctx = Vector::from_vec(ctx);
                Ok(Targets { u: &g.k_u * &ctx, w: &g.k_w * &ctx, u_neighbors: Vec::new(), w_neighbors: Vec::new() })
            }
            GameMode::Noncooperative => {
                let g = joint_stationary_policies_noncoop(&kernel)?;
                let mut z = Vector::zeros(b.dim());
                z.rows_mut(b.n, b.dim() - b.n).copy_from(&(g * delta));
                let seg = |r: std::ops::Range<usize>| z.rows(r.start, r.len()).into_owned();
                Ok(Targets {
                    u: seg(b.u_self()),
                    w: seg(b.w_self()),
                    u_neighbors: (0..b.n_neighbors()).map(|k| seg(b.u_neighbor(k))).collect(),
                    w_neighbors: (0..b.n_neighbors()).map(|k| seg(b.w_neighbor(k))).collect(),
                })
            }
        }
    }

    /// Actor, disturber and (non-cooperative) adversary gradient steps toward `targets`.
    pub fn policy_update(&self, delta: &Vector, targets: &Targets) -> Result<Self> {
        let phi = self.features(delta);
        let mut out = self.clone();
        out.actor = gradient_step(&self.actor, self.rates.actor, &phi, &targets.u)?;
        out.disturber = gradient_step(&self.disturber, self.rates.disturber, &phi, &targets.w)?;
        if self.mode == GameMode::Noncooperative {
            for k in 0..self.blocks.n_neighbors() {
                out.adversary_u[k] =
                    gradient_step(&self.adversary_u[k], self.rates.adversary_actor, &phi, &targets.u_neighbors[k])?;
                out.adversary_w[k] =
                    gradient_step(&self.adversary_w[k], self.rates.adversary_disturber, &phi, &targets.w_neighbors[k])?;
            }
        }
        Ok(out)
    }

    /// The learned control and disturbance networks as a fleet policy.
    pub fn policy(&self) -> AgentPolicy {
        AgentPolicy {
            control: FeedbackLaw { weights: self.actor.clone(), basis: self.basis },
            disturbance: Some(FeedbackLaw { weights: self.disturber.clone(), basis: self.basis }),
        }
    }

    /// `(net name, Frobenius norm)` for every network, adversaries named by 1-based neighbor id.
    pub fn weight_norms(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("critic".to_string(), self.critic.norm()),
            ("actor".to_string(), self.actor.norm()),
            ("disturber".to_string(), self.disturber.norm()),
        ];
        for (k, j) in self.blocks.neighbors.iter().enumerate() {
            if let Some(w) = self.adversary_u.get(k) {
                out.push((format!("adversary_u{}", j + 1), w.norm()));
            }
        }
        for (k, j) in self.blocks.neighbors.iter().enumerate() {
            if let Some(w) = self.adversary_w.get(k) {
                out.push((format!("adversary_w{}", j + 1), w.norm()));
            }
        }
        out
    }

    fn max_abs_weight(&self) -> f64 {
        std::iter::once(&self.critic)
            .chain([&self.actor, &self.disturber])
            .chain(&self.adversary_u)
            .chain(&self.adversary_w)
            .map(|m| m.amax())
            .fold(0.0, f64::max)
    }
}

/// How the critic starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticInit {
    /// The stage kernel `Λ_i`: model-free and always has usable `S_uu`, `S_ww`.
    #[default]
    StageKernel,
    /// Model-based Q-kernel of the initial control gains.
    ModelBased,
}

/// Initial learner states from linear control gains `u_i = K_i δ_i`.
/// Disturber and adversary networks start at zero.
pub fn initial_states(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: &GameWeights,
    controls: &[Mat],
    critic_init: CriticInit,
    rates: LearningRates,
    basis: Basis,
) -> Result<Vec<LearnerState>> {
    if controls.len() != model.n_agents() {
        return Err(Error::DimensionMismatch {
            context: "initial gains per agent",
            expected: model.n_agents(),
            got: controls.len(),
        });
    }
    let bd = basis.dim(model.n());
    controls
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let blocks = model.block_map(topology, i);
            let critic = match critic_init {
                CriticInit::StageKernel => weights.stage_kernel(i, &blocks),
                CriticInit::ModelBased => {
                    let gains = AgentGains::from_control(i, k.clone(), blocks.clone(), weights.mode)?;
                    evaluate_model_based(model, topology, weights, &gains)?.0.s
                }
            };
            if k.shape() != (model.p(), model.n()) {
                return Err(Error::DimensionMismatch { context: "initial gain", expected: model.p(), got: k.nrows() });
            }
            let mut actor = Mat::zeros(bd, model.p());
            actor.view_mut((0, 0), (model.n(), model.p())).copy_from(&k.transpose());
            LearnerState::new(
                i,
                blocks,
                weights.mode,
                basis,
                critic,
                actor,
                Mat::zeros(bd, model.q()),
                rates,
            )
        })
        .collect()
}

/// Which disturbance drives the fleet while learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceSource {
    /// The disturber network's output `ŵ_i`.
    #[default]
    Learned,
    External,
    LearnedPlusExternal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineOptions {
    pub horizon: usize,
    #[serde(default)]
    pub probe: ProbeSpec,
    #[serde(default)]
    pub disturbance_source: DisturbanceSource,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    /// Keep a full copy of every learner state every this many steps (0 disables).
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
}

fn default_divergence() -> f64 {
    DIVERGENCE_THRESHOLD
}

fn default_snapshot_every() -> usize {
    1
}

impl OnlineOptions {
    pub fn new(horizon: usize, probe: ProbeSpec) -> Self {
        Self {
            horizon,
            probe,
            disturbance_source: DisturbanceSource::Learned,
            divergence_threshold: DIVERGENCE_THRESHOLD,
            snapshot_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub step: usize,
    /// 1-based agent id.
    pub agent: usize,
    pub net: String,
    pub frobenius_norm: f64,
}

/// Largest activation magnitudes seen during a run: `‖z'z'ᵀ − zzᵀ‖_F` and `‖φ(δ)‖`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivationBounds {
    pub eta: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineResult {
    pub states: Vec<LearnerState>,
    pub log: TrajectoryLog,
    pub weight_history: Vec<WeightRecord>,
    /// `td_errors[k][i]`.
    pub td_errors: Vec<Vec<f64>>,
    /// Steps whose policy update was skipped because the critic's blocks were singular.
    pub skipped_updates: Vec<usize>,
    /// `(step, states)` every `snapshot_every` steps, step 0 included.
    pub snapshots: Vec<(usize, Vec<LearnerState>)>,
    pub activation: Vec<ActivationBounds>,
}

impl OnlineResult {
    /// Norm series of one agent's network, in step order.
    pub fn norm_series(&self, agent: usize, net: &str) -> Vec<f64> {
        self.weight_history
            .iter()
            .filter(|r| r.agent == agent + 1 && r.net == net)
            .map(|r| r.frobenius_norm)
            .collect()
    }
}

struct Pending {
    deltas: Vec<Vector>,
    u: Vec<Vector>,
    w: Vec<Vector>,
}

struct Learner<'a> {
    weights: &'a GameWeights,
    states: Vec<LearnerState>,
    history: Vec<WeightRecord>,
    td: Vec<Vec<f64>>,
    skipped: Vec<usize>,
    snapshots: Vec<(usize, Vec<LearnerState>)>,
    activation: Vec<ActivationBounds>,
    opts: &'a OnlineOptions,
}

impl Learner<'_> {
    fn record(&mut self, step: usize) {
        for s in &self.states {
            for (net, norm) in s.weight_norms() {
                self.history.push(WeightRecord { step, agent: s.agent + 1, net, frobenius_norm: norm });
            }
        }
        if self.opts.snapshot_every > 0 && step.is_multiple_of(self.opts.snapshot_every) {
            self.snapshots.push((step, self.states.clone()));
        }
    }

    /// Neighbor blocks of `z` as seen by agent `i`.
    fn neighbor_view(&self, i: usize, delta_i: &Vector, u: &[Vector], w: &[Vector]) -> (Vec<Vector>, Vec<Vector>) {
        let s = &self.states[i];
        match s.mode {
            GameMode::Cooperative => (
                s.blocks.neighbors.iter().map(|&j| u[j].clone()).collect(),
                s.blocks.neighbors.iter().map(|&j| w[j].clone()).collect(),
            ),
            GameMode::Noncooperative => s.adversary_estimates(delta_i),
        }
    }

    fn clean_actions(&self, deltas: &[Vector]) -> (Vec<Vector>, Vec<Vector>) {
        (
            self.states.iter().zip(deltas).map(|(s, d)| s.control(d)).collect(),
            self.states.iter().zip(deltas).map(|(s, d)| s.disturbance(d)).collect(),
        )
    }

    /// Processes transition `k → k+1` for every agent, reading weights before any agent updates.
    fn learn(&mut self, k: usize, prev: &Pending, next_deltas: &[Vector]) -> Result<()> {
        let (u_next, w_next) = self.clean_actions(next_deltas);
        let mut updated = Vec::with_capacity(self.states.len());
        let mut td_row = Vec::with_capacity(self.states.len());
        for (i, s) in self.states.iter().enumerate() {
            let b = &s.blocks;
            let (unb, wnb) = self.neighbor_view(i, &prev.deltas[i], &prev.u, &prev.w);
            let z = b.assemble(&prev.deltas[i], &prev.u[i], &unb, &prev.w[i], &wnb)?;
            let (unb1, wnb1) = self.neighbor_view(i, &next_deltas[i], &u_next, &w_next);
            let z_next = b.assemble(&next_deltas[i], &u_next[i], &unb1, &w_next[i], &wnb1)?;
            let r = quad_form(&self.weights.stage_kernel(i, b), &z);
            let e = s.td_error(&z, r, &z_next)?;
            td_row.push(e);
            let act = &mut self.activation[i];
            act.eta = act.eta.max((&z_next * z_next.transpose() - &z * z.transpose()).norm());
            act.phi = act.phi.max(s.features(&prev.deltas[i]).norm());

            let targets = s.targets(&prev.deltas[i], &unb, &wnb);
            let mut next = s.critic_update(&z, &z_next, e)?;
            match targets {
                Ok(t) => {
                    let moved = s.policy_update(&prev.deltas[i], &t)?;
                    next.actor = moved.actor;
                    next.disturber = moved.disturber;
                    next.adversary_u = moved.adversary_u;
                    next.adversary_w = moved.adversary_w;
                }
                Err(err) if is_guard_error(&err) => self.skipped[i] += 1,
                Err(err) => return Err(err),
            }
            if !(next.max_abs_weight() <= self.opts.divergence_threshold) {
                return Err(Error::NumericalDivergence {
                    step: k + 1,
                    what: format!("agent {} weights exceed {:e}", i + 1, self.opts.divergence_threshold),
                });
            }
            updated.push(next);
        }
        self.states = updated;
        self.td.push(td_row);
        self.record(k + 1);
        Ok(())
    }
}

/// Runs the online learner for `opts.horizon` steps.
///
/// At every step each agent actuates `û_i + probe` and the disturbance chosen by
/// `opts.disturbance_source`; after the fleet moves, all critics take a TD step and
/// all policy networks take a gradient step toward the targets of the pre-update critic.
/// Cooperative agents measure neighbor actions; non-cooperative agents use their
/// adversary estimates in `z`.
#[allow(clippy::too_many_arguments)]
pub fn run_online(
    model: &FleetModel,
    topology: &GraphTopology,
    weights: &GameWeights,
    init: Vec<LearnerState>,
    x_init: &[Vector],
    x0_init: &Vector,
    external: &[DisturbanceModel],
    opts: &OnlineOptions,
) -> Result<OnlineResult> {
    weights.validate(topology)?;
    let n_agents = model.n_agents();
    if init.len() != n_agents || external.len() != n_agents {
        return Err(Error::DimensionMismatch {
            context: "learner states/disturbances per agent",
            expected: n_agents,
            got: init.len().min(external.len()),
        });
    }
    for (i, s) in init.iter().enumerate() {
        if s.agent != i || s.mode != weights.mode || s.blocks != model.block_map(topology, i) {
            return Err(Error::Validation(format!("learner state {} does not match agent {}", s.agent + 1, i + 1)));
        }
        s.rates.validate()?;
    }
    for d in external {
        d.validate(model.q())?;
    }
    let ext: Vec<Vec<Vector>> = external.iter().map(|d| d.generate(opts.horizon)).collect();
    let mut noise = ProbeNoise::new(&opts.probe);
    let mut learner = Learner {
        weights,
        states: init,
        history: Vec::new(),
        td: Vec::with_capacity(opts.horizon),
        skipped: vec![0; n_agents],
        snapshots: Vec::new(),
        activation: vec![ActivationBounds::default(); n_agents],
        opts,
    };
    learner.record(0);
    let mut pending: Option<Pending> = None;

    let log = rollout(model, topology, Some(weights), x_init, x0_init, opts.horizon, |k, deltas, _| {
        if let Some(prev) = pending.take() {
            learner.learn(k - 1, &prev, deltas)?;
        }
        let (clean_u, clean_w) = learner.clean_actions(deltas);
        let mut u = Vec::with_capacity(n_agents);
        let mut w = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            u.push(&clean_u[i] + noise.sample(k, model.p()));
            let mut wi = match opts.disturbance_source {
                DisturbanceSource::Learned => clean_w[i].clone(),
                DisturbanceSource::External => ext[i][k].clone(),
                DisturbanceSource::LearnedPlusExternal => &clean_w[i] + &ext[i][k],
            };
            if opts.probe.excite_disturbance {
                wi += noise.sample(k, model.q());
            }
            w.push(wi);
        }
        pending = Some(Pending { deltas: deltas.to_vec(), u: u.clone(), w: w.clone() });
        Ok((u, w))
    })?;
    if let Some(prev) = pending.take() {
        learner.learn(opts.horizon - 1, &prev, &log.deltas[opts.horizon])?;
    }

    Ok(OnlineResult {
        states: learner.states,
        log,
        weight_history: learner.history,
        td_errors: learner.td,
        skipped_updates: learner.skipped,
        snapshots: learner.snapshots,
        activation: learner.activation,
    })
}

/// Critic value of every agent at the fleet errors `deltas`, with all actions at
/// their network outputs (adversary estimates for non-cooperative neighbors).
pub fn learned_values(states: &[LearnerState], deltas: &[Vector]) -> Result<Vec<f64>> {
    if states.len() != deltas.len() {
        return Err(Error::DimensionMismatch { context: "errors per agent", expected: states.len(), got: deltas.len() });
    }
    states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let b = &s.blocks;
            let (unb, wnb) = match s.mode {
                GameMode::Cooperative => (
                    b.neighbors.iter().map(|&j| states[j].control(&deltas[j])).collect(),
                    b.neighbors.iter().map(|&j| states[j].disturbance(&deltas[j])).collect(),
                ),
                GameMode::Noncooperative => s.adversary_estimates(&deltas[i]),
            };
            let z = b.assemble(&deltas[i], &s.control(&deltas[i]), &unb, &s.disturbance(&deltas[i]), &wnb)?;
            Ok(quad_form(&s.critic, &z))
        })
        .collect()
}

/// Reference weights for the Lyapunov diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWeights {
    pub critic: Mat,
    pub actor: Mat,
    pub disturber: Mat,
}

impl ReferenceWeights {
    /// Weights that represent a converged kernel and linear gains exactly.
    pub fn from_gains(kernel: &QKernel, control: &Mat, disturbance: &Mat) -> Self {
        Self { critic: kernel.s.clone(), actor: control.transpose(), disturber: disturbance.transpose() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConditions {
    pub critic: bool,
    pub actor: bool,
    pub disturber: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub series: Vec<f64>,
    /// Supremum over the final 20% of the series.
    pub tail_sup: f64,
    pub initial: f64,
    pub bounded: bool,
    pub rates: RateConditions,
}

/// `L^k = ‖W̃_c‖²/α_c + ‖W̃_a‖²/(α_a r_a) + ‖W̃_d‖²/(α_d r_d)` over a weight history.
///
/// The rate conditions compare `α_c ≥ 1/η̄²`, `α_a ≥ 1/(2φ̄²)` and `α_d ≥ 1/(2φ̄²)` with the
/// empirical activation bounds of the run.
pub fn lyapunov_diagnostic(
    history: &[LearnerState],
    reference: Option<&ReferenceWeights>,
    r_a: f64,
    r_d: f64,
    bounds: ActivationBounds,
) -> Result<LyapunovReport> {
    let reference = reference.ok_or(Error::MissingReference)?;
    if history.is_empty() {
        return Err(Error::EmptyHorizon);
    }
    if !(r_a > 0.0 && r_d > 0.0) {
        return Err(Error::Validation("weighting factors r_a, r_d must be positive".into()));
    }
    let rates = history[0].rates;
    if !(rates.critic > 0.0 && rates.actor > 0.0 && rates.disturber > 0.0) {
        return Err(Error::Validation("Lyapunov diagnostic needs positive learning rates".into()));
    }
    let series = history
        .iter()
        .map(|s| {
            if s.critic.shape() != reference.critic.shape()
                || s.actor.shape() != reference.actor.shape()
                || s.disturber.shape() != reference.disturber.shape()
            {
                return Err(Error::DimensionMismatch {
                    context: "reference weights",
                    expected: reference.critic.nrows(),
                    got: s.critic.nrows(),
                });
            }
            Ok((&s.critic - &reference.critic).norm_squared() / rates.critic
                + (&s.actor - &reference.actor).norm_squared() / (rates.actor * r_a)
                + (&s.disturber - &reference.disturber).norm_squared() / (rates.disturber * r_d))
        })
        .collect::<Result<Vec<f64>>>()?;
    let start = series.len() - series.len().div_ceil(5);
    let tail_sup = series[start..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sq = |x: f64| x * x;
    Ok(LyapunovReport {
        initial: series[0],
        bounded: tail_sup.is_finite(),
        tail_sup,
        rates: RateConditions {
            critic: rates.critic >= 1.0 / sq(bounds.eta),
            actor: rates.actor >= 1.0 / (2.0 * sq(bounds.phi)),
            disturber: rates.disturber >= 1.0 / (2.0 * sq(bounds.phi)),
        },
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pi_solver::{qkernel_from_value, riccati_gains, riccati_oracle_single_agent};

    fn m1(x: f64) -> Mat {
        Mat::from_element(1, 1, x)
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn scalar(mode: GameMode) -> (FleetModel, GraphTopology, GameWeights) {
        let model = FleetModel::new(m1(0.8), vec![m1(1.0)], vec![m1(0.4)]).unwrap();
        let topo = GraphTopology::build(1, &[], &[1]).unwrap();
        let w = GameWeights::uniform(&topo, mode, m1(1.0), m1(1.0), m1(1.0), m1(1.0), m1(1.0), 2.0).unwrap();
        (model, topo, w)
    }

    #[test]
    fn td_error_by_hand() {
        let w = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        // zᵀWz = 2 + 4 + 12, z'ᵀWz' = 0.5 − 1 + 3
        let e = td_error(&w, &v(&[1.0, 2.0]), 0.7, &v(&[0.5, -1.0])).unwrap();
        assert!((e - (0.7 + 2.5 - 18.0)).abs() < 1e-14);
        assert!(matches!(td_error(&w, &v(&[1.0]), 0.0, &v(&[1.0, 1.0])), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn critic_and_gradient_steps_by_hand() {
        let c = critic_step(&m1(1.0), 0.1, 2.0, &v(&[1.0]), &v(&[2.0])).unwrap();
        assert!((c[(0, 0)] - 0.4).abs() < 1e-15);
        let g = gradient_step(&Mat::from_column_slice(2, 1, &[1.0, 2.0]), 0.1, &v(&[1.0, 1.0]), &v(&[0.5])).unwrap();
        assert!((g[(0, 0)] - 0.75).abs() < 1e-15 && (g[(1, 0)] - 1.75).abs() < 1e-15);
        assert_eq!(critic_step(&m1(1.0), 1.0, f64::INFINITY, &v(&[1.0]), &v(&[2.0])), Err(Error::NonFiniteWeights("critic")));
    }

    #[test]
    fn singular_control_block_is_rejected() {
        let (model, topo, w) = scalar(GameMode::Cooperative);
        let blocks = model.block_map(&topo, 0);
        let err = LearnerState::new(0, blocks, w.mode, Basis::Identity, Mat::zeros(3, 3), m1(0.0), m1(0.0), LearningRates::default());
        assert_eq!(err, Err(Error::Singular("critic S_uu")));
    }

    #[test]
    fn targets_of_the_oracle_kernel_are_the_saddle_gains() {
        for mode in [GameMode::Cooperative, GameMode::Noncooperative] {
            let (model, topo, w) = scalar(mode);
            let p = riccati_oracle_single_agent(&model, &topo, &w, 0, 1e-14, 10_000).unwrap();
            let s = qkernel_from_value(&model, &topo, &w, 0, &p, &[]).unwrap();
            let (k, l) = riccati_gains(&model, &topo, &w, 0, &p).unwrap();
            let state = LearnerState::new(0, s.blocks, mode, Basis::Identity, s.s, m1(0.0), m1(0.0), LearningRates::default())
                .unwrap();
            let d = v(&[0.9]);
            let t = state.targets(&d, &[], &[]).unwrap();
            assert!((t.u[0] - (&k * &d)[0]).abs() < 1e-12, "{mode:?}");
            assert!((t.w[0] - (&l * &d)[0]).abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn zero_rates_freeze_every_weight() {
        for mode in [GameMode::Cooperative, GameMode::Noncooperative] {
            let (model, topo, w) = scalar(mode);
            let init = initial_states(&model, &topo, &w, &[m1(0.3)], CriticInit::ModelBased, LearningRates::uniform(0.0), Basis::Identity)
                .unwrap();
            let opts = OnlineOptions::new(50, ProbeSpec::default());
            let res = run_online(&model, &topo, &w, init.clone(), &[v(&[1.0])], &v(&[0.0]), &[DisturbanceModel::zero(1)], &opts)
                .unwrap();
            assert_eq!(res.states, init);
            assert_eq!(res.td_errors.len(), 50);
            assert_eq!(res.snapshots.len(), 51);
        }
    }

    #[test]
    fn critic_stays_symmetric() {
        let (model, topo, w) = scalar(GameMode::Cooperative);
        let init = initial_states(&model, &topo, &w, &[m1(0.3)], CriticInit::StageKernel, LearningRates::uniform(0.05), Basis::Identity)
            .unwrap();
        let opts = OnlineOptions::new(100, ProbeSpec { excite_disturbance: true, ..Default::default() });
        let res = run_online(&model, &topo, &w, init, &[v(&[1.0])], &v(&[0.0]), &[DisturbanceModel::zero(1)], &opts).unwrap();
        for (_, states) in &res.snapshots {
            assert_eq!(states[0].critic, states[0].critic.transpose());
        }
    }

    #[test]
    fn weight_blow_up_is_reported_as_divergence() {
        let (model, topo, w) = scalar(GameMode::Cooperative);
        let init = initial_states(&model, &topo, &w, &[m1(0.3)], CriticInit::StageKernel, LearningRates::default(), Basis::Identity)
            .unwrap();
        let opts = OnlineOptions { divergence_threshold: 1e-3, ..OnlineOptions::new(10, ProbeSpec::default()) };
        let err = run_online(&model, &topo, &w, init, &[v(&[1.0])], &v(&[0.0]), &[DisturbanceModel::zero(1)], &opts);
        assert!(matches!(err, Err(Error::NumericalDivergence { step: 1, .. })));
    }

    fn lyapunov_history() -> (Vec<LearnerState>, ReferenceWeights) {
        let (model, topo, w) = scalar(GameMode::Cooperative);
        let s = initial_states(&model, &topo, &w, &[m1(0.3)], CriticInit::StageKernel, LearningRates::uniform(0.5), Basis::Identity)
            .unwrap()
            .remove(0);
        let reference = ReferenceWeights { critic: s.critic.clone(), actor: s.actor.clone(), disturber: s.disturber.clone() };
        (vec![s; 5], reference)
    }

    #[test]
    fn lyapunov_vanishes_at_the_reference() {
        let (h, r) = lyapunov_history();
        let rep = lyapunov_diagnostic(&h, Some(&r), 1.0, 1.0, ActivationBounds { eta: 2.0, phi: 1.0 }).unwrap();
        assert!(rep.series.iter().all(|&x| x == 0.0));
        assert!(rep.bounded && rep.tail_sup == 0.0);
        assert_eq!(rep.rates, RateConditions { critic: true, actor: true, disturber: true });
    }

    #[test]
    fn lyapunov_single_term() {
        let (mut h, r) = lyapunov_history();
        h[2].actor[(0, 0)] += 0.3;
        let rep = lyapunov_diagnostic(&h, Some(&r), 2.0, 1.0, ActivationBounds { eta: 1.0, phi: 1.0 }).unwrap();
        // 0.09 / (0.5 · 2)
        assert!((rep.series[2] - 0.09).abs() < 1e-15);
        assert_eq!(rep.series[1], 0.0);
        assert_eq!(rep.rates, RateConditions { critic: false, actor: true, disturber: true });
    }

    #[test]
    fn lyapunov_needs_a_reference() {
        let (h, _) = lyapunov_history();
        assert_eq!(lyapunov_diagnostic(&h, None, 1.0, 1.0, ActivationBounds::default()), Err(Error::MissingReference));
    }
}
