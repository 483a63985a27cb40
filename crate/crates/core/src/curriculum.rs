//! Staged training: plant sampling per stage, the closed loop combining the
//! baseline controller with the learned residual, episodes, and the
//! resumable training driver.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{consolidate_task, Agent, AgentConfig, FisherSnapshot, Policy, ReplayBuffer, Transition};
pub use crate::dynamics::{active_uncertainty_set, UncertaintyTag, NUM_STAGES};
use crate::dynamics::{reference_signal, sample_plant, step_plant, PlantParams, PlantState, UncertaintyRanges};
use crate::error::{CulError, Result};
use crate::lincontrol::StateSpaceController;
use crate::seed;

pub const OBS_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub stages: usize,
    pub episodes_per_stage: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule {
            stages: NUM_STAGES,
            episodes_per_stage: 100,
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > NUM_STAGES || self.episodes_per_stage == 0 {
            return Err(CulError::InvalidParams {
                name: "schedule",
                reason: format!("need 1..={NUM_STAGES} stages and at least one episode per stage"),
            });
        }
        Ok(())
    }

    pub fn total_episodes(&self) -> usize {
        self.stages * self.episodes_per_stage
    }

    pub fn stage_of(&self, episode: usize) -> usize {
        episode / self.episodes_per_stage
    }

    pub fn is_stage_end(&self, episode: usize) -> bool {
        (episode + 1) % self.episodes_per_stage == 0
    }

    /// Stage indices eligible for sampling while training stage `t`.
    pub fn eligible(&self, t: usize) -> std::ops::RangeInclusive<usize> {
        0..=t
    }
}

/// Uniform draw over the stages introduced so far.
pub fn sample_task<R: Rng + ?Sized>(stage: usize, rng: &mut R) -> Result<usize> {
    active_uncertainty_set(stage)?;
    Ok(rng.random_range(0..=stage))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationScales {
    /// Position scale (m).
    pub position: f64,
    /// Error-integral scale (m·s).
    pub integral: f64,
    /// Error-rate scale (m/s).
    pub rate: f64,
}

impl Default for ObservationScales {
    fn default() -> Self {
        ObservationScales {
            position: 0.03,
            integral: 0.03,
            rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub error: f64,
    pub input: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            error: 1e4,
            input: 1e-4,
        }
    }
}

pub fn reward(e: f64, u: f64, w: &CostWeights) -> f64 {
    -(w.error * e * e + w.input * u * u)
}

/// Simulation settings shared by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dt: f64,
    pub horizon: usize,
    pub substeps: usize,
    /// Force (N) of a unit normalized action; also scales the observed
    /// baseline input.
    pub u_max: f64,
    pub scales: ObservationScales,
    pub cost: CostWeights,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.006,
            horizon: 667,
            substeps: 200,
            u_max: 50.0,
            scales: ObservationScales::default(),
            cost: CostWeights::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.dt) || self.horizon == 0 || self.substeps == 0 {
            return Err(CulError::InvalidParams {
                name: "env",
                reason: "need dt > 0, horizon ≥ 1, substeps ≥ 1".into(),
            });
        }
        if !positive(self.u_max) {
            return Err(CulError::InvalidParams { name: "u_max", reason: format!("{}", self.u_max) });
        }
        let s = &self.scales;
        if !(positive(s.position) && positive(s.integral) && positive(s.rate)) {
            return Err(CulError::InvalidParams { name: "scales", reason: "must be positive".into() });
        }
        if !(self.cost.error >= 0.0 && positive(self.cost.input)) {
            return Err(CulError::InvalidParams { name: "cost", reason: "need error ≥ 0, input > 0".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVariant {
    /// Baseline plus learned residual.
    Residual,
    /// Learned action only; the baseline slot of the observation is zero.
    RlOnly,
    MbcOnly,
    None,
}

impl ControlVariant {
    pub fn uses_mbc(self) -> bool {
        matches!(self, ControlVariant::Residual | ControlVariant::MbcOnly)
    }

    pub fn uses_rl(self) -> bool {
        matches!(self, ControlVariant::Residual | ControlVariant::RlOnly)
    }
}

/// Everything one control step reads before acting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub yr: f64,
    pub y: f64,
    pub e: f64,
    pub u_mbc: f64,
    pub features: [f64; OBS_DIM],
}

/// `[y^r, x_B, e, ∫e, ė, u^MBC]`, each divided by its scale.
pub fn build_observation(
    yr: f64,
    y: f64,
    e: f64,
    integral: f64,
    rate: f64,
    u_mbc: f64,
    scales: &ObservationScales,
    u_max: f64,
) -> [f64; OBS_DIM] {
    [
        yr / scales.position,
        y / scales.position,
        e / scales.position,
        integral / scales.integral,
        rate / scales.rate,
        u_mbc / u_max,
    ]
}

/// Augmented closed-loop state: plant, baseline controller, and the error
/// memory behind the observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub plant: PlantState,
    pub mbc: StateSpaceController,
    pub integral: f64,
    pub prev_error: f64,
    pub step: usize,
}

impl LoopState {
    pub fn new(mut mbc: StateSpaceController) -> Self {
        mbc.reset();
        LoopState {
            plant: PlantState::default(),
            mbc,
            integral: 0.0,
            prev_error: 0.0,
            step: 0,
        }
    }

    pub fn reset(&mut self) {
        self.plant = PlantState::default();
        self.mbc.reset();
        self.integral = 0.0;
        self.prev_error = 0.0;
        self.step = 0;
    }

    /// Observation at the current step without mutating the loop.
    pub fn observe(&self, p: &PlantParams, env: &EnvConfig, variant: ControlVariant) -> Observation {
        let yr = reference_signal(p, self.step as f64 * env.dt);
        let y = self.plant.x_b;
        let e = yr - y;
        let u_mbc = if variant.uses_mbc() { self.mbc.output(e) } else { 0.0 };
        let integral = self.integral + e * env.dt;
        let rate = (e - self.prev_error) / env.dt;
        Observation {
            yr,
            y,
            e,
            u_mbc,
            features: build_observation(yr, y, e, integral, rate, u_mbc, &env.scales, env.u_max),
        }
    }

    /// Applies normalized action `a` on top of `obs` and advances one step.
    /// Returns the total force and the reward.
    pub fn advance(
        &mut self,
        obs: &Observation,
        a: f64,
        p: &PlantParams,
        env: &EnvConfig,
        variant: ControlVariant,
    ) -> Result<(f64, f64, f64)> {
        if variant.uses_mbc() {
            self.mbc.step(obs.e);
        }
        let u_rl = if variant.uses_rl() { env.u_max * a } else { 0.0 };
        let u = obs.u_mbc + u_rl;
        let r = reward(obs.e, u, &env.cost);
        self.plant = step_plant(&self.plant, u, 0.0, p, env.dt, env.substeps)
            .map_err(|_| CulError::NonFinite { step: self.step })?;
        self.integral += obs.e * env.dt;
        self.prev_error = obs.e;
        self.step += 1;
        Ok((u_rl, u, r))
    }
}

/// Supplies actions to an episode and receives the resulting transitions.
pub trait StepAgent {
    fn action(&mut self, obs: &[f64; OBS_DIM]) -> Result<f64>;

    fn observe(&mut self, _t: &Transition) -> Result<()> {
        Ok(())
    }
}

/// Always outputs zero.
pub struct ZeroAction;

impl StepAgent for ZeroAction {
    fn action(&mut self, _obs: &[f64; OBS_DIM]) -> Result<f64> {
        Ok(0.0)
    }
}

impl StepAgent for Policy {
    fn action(&mut self, obs: &[f64; OBS_DIM]) -> Result<f64> {
        Policy::action(self, obs)
    }
}

impl StepAgent for &Policy {
    fn action(&mut self, obs: &[f64; OBS_DIM]) -> Result<f64> {
        Policy::action(self, obs)
    }
}

/// Replays a fixed action sequence.
pub struct Scripted<'a> {
    pub actions: &'a [f64],
    pub next: usize,
}

impl StepAgent for Scripted<'_> {
    fn action(&mut self, _obs: &[f64; OBS_DIM]) -> Result<f64> {
        let a = self.actions.get(self.next).copied().unwrap_or(0.0);
        self.next += 1;
        Ok(a)
    }
}

/// Exploring agent that stores every transition and takes one critic and
/// one actor step per environment step once a mini-batch is available.
pub struct Learner<'a> {
    pub agent: &'a mut Agent,
    pub buffer: &'a mut ReplayBuffer,
    pub ewc: Option<&'a FisherSnapshot>,
    pub noise_rng: &'a mut ChaCha8Rng,
    pub replay_rng: &'a mut ChaCha8Rng,
}

impl StepAgent for Learner<'_> {
    fn action(&mut self, obs: &[f64; OBS_DIM]) -> Result<f64> {
        self.agent.act(obs, true, self.noise_rng)
    }

    fn observe(&mut self, t: &Transition) -> Result<()> {
        self.buffer.push(t)?;
        let m = self.agent.cfg.batch_size;
        if self.buffer.len() >= m {
            let batch = self.buffer.sample(m, self.replay_rng)?;
            self.agent.critic_update(&batch)?;
            self.agent.actor_update(&batch, self.ewc)?;
        }
        Ok(())
    }
}

/// Time series of one episode; row `k` is control step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub variant: ControlVariant,
    pub stage: usize,
    pub params: PlantParams,
    pub t: Vec<f64>,
    pub yr: Vec<f64>,
    pub y: Vec<f64>,
    pub e: Vec<f64>,
    pub u_mbc: Vec<f64>,
    pub u_rl: Vec<f64>,
    pub u: Vec<f64>,
    pub r: Vec<f64>,
    /// Tracking error after the last control step.
    pub final_error: f64,
    pub ret: f64,
}

impl EpisodeRecord {
    fn with_capacity(variant: ControlVariant, stage: usize, params: PlantParams, n: usize) -> Self {
        EpisodeRecord {
            variant,
            stage,
            params,
            t: Vec::with_capacity(n),
            yr: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            e: Vec::with_capacity(n),
            u_mbc: Vec::with_capacity(n),
            u_rl: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
            r: Vec::with_capacity(n),
            final_error: 0.0,
            ret: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Errors at steps `0..=T`, including the one after the last action.
    pub fn error_samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.e.iter().copied().chain(std::iter::once(self.final_error))
    }

    pub fn is_complete(&self) -> bool {
        let n = self.t.len();
        [&self.yr, &self.y, &self.e, &self.u_mbc, &self.u_rl, &self.u, &self.r]
            .iter()
            .all(|c| c.len() == n)
            && n > 0
    }
}

/// Runs one episode of `env.horizon` steps from rest.
pub fn run_episode<A: StepAgent + ?Sized>(
    params: &PlantParams,
    mbc: &StateSpaceController,
    agent: &mut A,
    variant: ControlVariant,
    env: &EnvConfig,
    stage: usize,
) -> Result<EpisodeRecord> {
    let mut state = LoopState::new(mbc.clone());
    run_from(&mut state, params, agent, variant, env, stage, env.horizon)
}

/// Continues the loop from `state` for `steps` steps.
pub fn run_from<A: StepAgent + ?Sized>(
    state: &mut LoopState,
    params: &PlantParams,
    agent: &mut A,
    variant: ControlVariant,
    env: &EnvConfig,
    stage: usize,
    steps: usize,
) -> Result<EpisodeRecord> {
    let mut rec = EpisodeRecord::with_capacity(variant, stage, *params, steps);
    let last = state.step + steps;
    let mut obs = state.observe(params, env, variant);
    for _ in 0..steps {
        let a = if variant.uses_rl() { agent.action(&obs.features)? } else { 0.0 };
        let (u_rl, u, r) = state.advance(&obs, a, params, env, variant)?;
        rec.t.push((state.step - 1) as f64 * env.dt);
        rec.yr.push(obs.yr);
        rec.y.push(obs.y);
        rec.e.push(obs.e);
        rec.u_mbc.push(obs.u_mbc);
        rec.u_rl.push(u_rl);
        rec.u.push(u);
        rec.r.push(r);
        rec.ret += r;
        let next = state.observe(params, env, variant);
        if variant.uses_rl() {
            agent.observe(&Transition {
                s: obs.features.to_vec(),
                a,
                r,
                s_next: next.features.to_vec(),
                done: state.step == last,
            })?;
        }
        obs = next;
    }
    rec.final_error = obs.e;
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainVariant {
    /// Staged curriculum with consolidation and the baseline in the loop.
    Proposed,
    /// Staged curriculum with consolidation, learned action only.
    NoMbc,
    /// Every episode drawn from the final stage; no consolidation.
    FullRandomization,
}

impl TrainVariant {
    pub const ALL: [TrainVariant; 3] = [TrainVariant::Proposed, TrainVariant::NoMbc, TrainVariant::FullRandomization];

    pub fn control(self) -> ControlVariant {
        match self {
            TrainVariant::NoMbc => ControlVariant::RlOnly,
            _ => ControlVariant::Residual,
        }
    }

    pub fn consolidates(self) -> bool {
        !matches!(self, TrainVariant::FullRandomization)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainVariant::Proposed => "proposed",
            TrainVariant::NoMbc => "no_mbc",
            TrainVariant::FullRandomization => "full_randomization",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "proposed" => Ok(TrainVariant::Proposed),
            "no_mbc" => Ok(TrainVariant::NoMbc),
            "full_randomization" => Ok(TrainVariant::FullRandomization),
            other => Err(CulError::Parse(format!("unknown training variant {other:?}"))),
        }
    }
}

/// One reward-curve row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub stage: usize,
    pub sampled_stage: usize,
    pub ret: f64,
    pub params: PlantParams,
}

/// Problem definition shared by every training variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub nominal: PlantParams,
    pub ranges: UncertaintyRanges,
    pub schedule: StageSchedule,
    pub env: EnvConfig,
    pub agent: AgentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainRngs {
    plant: ChaCha8Rng,
    noise: ChaCha8Rng,
    replay: ChaCha8Rng,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Resumable training run for one variant.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub variant: TrainVariant,
    pub setup: TrainSetup,
    pub mbc: StateSpaceController,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub snapshot: Option<FisherSnapshot>,
    /// Index of the next episode to run.
    pub episode: usize,
    pub curve: Vec<EpisodeSummary>,
    pub config_hash: String,
    rngs: TrainRngs,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_hash: String,
    variant: TrainVariant,
    setup: TrainSetup,
    mbc: String,
    agent: Agent,
    buffer: ReplayBuffer,
    snapshot: Option<FisherSnapshot>,
    episode: usize,
    curve: Vec<EpisodeSummary>,
    rngs: TrainRngs,
}

impl Trainer {
    pub fn new(
        variant: TrainVariant,
        setup: TrainSetup,
        mbc: StateSpaceController,
        master_seed: u64,
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        setup.schedule.validate()?;
        setup.env.validate()?;
        setup.ranges.validate()?;
        setup.nominal.validate()?;
        let mut init = seed::stream(master_seed, seed::INIT);
        let agent = Agent::new(OBS_DIM, setup.agent.clone(), &mut init)?;
        let buffer = ReplayBuffer::new(OBS_DIM, setup.agent.buffer_capacity)?;
        Ok(Trainer {
            variant,
            mbc,
            agent,
            buffer,
            snapshot: None,
            episode: 0,
            curve: Vec::new(),
            config_hash: config_hash.into(),
            rngs: TrainRngs {
                plant: seed::stream(master_seed, seed::PLANT),
                noise: seed::stream(master_seed, seed::NOISE),
                replay: seed::stream(master_seed, seed::REPLAY),
            },
            setup,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.episode >= self.setup.schedule.total_episodes()
    }

    pub fn policy(&self) -> Policy {
        self.agent.policy()
    }

    pub fn current_stage(&self) -> usize {
        self.setup.schedule.stage_of(self.episode)
    }

    /// Runs the next episode, consolidating at stage ends.
    pub fn step_episode(&mut self) -> Result<EpisodeSummary> {
        if self.is_finished() {
            return Err(CulError::InvalidParams {
                name: "episode",
                reason: "training schedule already complete".into(),
            });
        }
        let stage = self.current_stage();
        let sampled_stage = match self.variant {
            TrainVariant::FullRandomization => NUM_STAGES - 1,
            _ => sample_task(stage, &mut self.rngs.plant)?,
        };
        let params = sample_plant(sampled_stage, &self.setup.nominal, &self.setup.ranges, &mut self.rngs.plant)?;
        self.agent.noise.reset();
        let rec = {
            let mut learner = Learner {
                agent: &mut self.agent,
                buffer: &mut self.buffer,
                ewc: self.snapshot.as_ref(),
                noise_rng: &mut self.rngs.noise,
                replay_rng: &mut self.rngs.replay,
            };
            run_episode(&params, &self.mbc, &mut learner, self.variant.control(), &self.setup.env, stage)?
        };
        let summary = EpisodeSummary {
            episode: self.episode,
            stage,
            sampled_stage,
            ret: rec.ret,
            params,
        };
        self.curve.push(summary);
        if self.variant.consolidates() && self.setup.schedule.is_stage_end(self.episode) {
            self.consolidate()?;
        }
        self.episode += 1;
        Ok(summary)
    }

    fn consolidate(&mut self) -> Result<()> {
        let cfg = &self.agent.cfg;
        let fisher = self
            .agent
            .compute_fisher(&self.buffer, cfg.ewc_batch, cfg.ewc_samples, &mut self.rngs.replay)?;
        self.snapshot = Some(consolidate_task(
            self.snapshot.as_ref(),
            self.agent.actor.params(),
            &fisher,
            cfg.online_gamma,
        )?);
        Ok(())
    }

    /// Runs until the schedule is complete, calling `on_stage_end` after
    /// every finished stage (the usual place to checkpoint).
    pub fn run<F>(&mut self, mut on_stage_end: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        while !self.is_finished() {
            let s = self.step_episode()?;
            if self.setup.schedule.is_stage_end(s.episode) {
                on_stage_end(self)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: self.config_hash.clone(),
            variant: self.variant,
            setup: self.setup.clone(),
            mbc: self.mbc.to_text(),
            agent: self.agent.clone(),
            buffer: self.buffer.clone(),
            snapshot: self.snapshot.clone(),
            episode: self.episode,
            curve: self.curve.clone(),
            rngs: self.rngs.clone(),
        };
        bincode::serialize(&ck).map_err(|e| CulError::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = bincode::deserialize(bytes).map_err(|e| CulError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CulError::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(Trainer {
            variant: ck.variant,
            setup: ck.setup,
            mbc: StateSpaceController::from_text(&ck.mbc)?,
            agent: ck.agent,
            buffer: ck.buffer,
            snapshot: ck.snapshot,
            episode: ck.episode,
            curve: ck.curve,
            config_hash: ck.config_hash,
            rngs: ck.rngs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CulError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CulError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
