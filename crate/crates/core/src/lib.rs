//! Continual uncertainty learning for powertrain vibration control: a
//! randomized three-mass plant with backlash, an LQG baseline controller, a
//! DDPG residual agent consolidated across curriculum stages with online
//! elastic weight consolidation, and an evaluation bench.

pub mod agent;
pub mod config;
pub mod curriculum;
pub mod dynamics;
pub mod error;
pub mod evalbench;
pub mod lincontrol;
pub mod neural;
pub mod seed;

pub use agent::{Agent, AgentConfig, FisherSnapshot, Policy, ReplayBuffer, Transition};
pub use config::RunConfig;
pub use curriculum::{
    run_episode, ControlVariant, CostWeights, EnvConfig, EpisodeRecord, EpisodeSummary, ObservationScales, StageSchedule,
    TrainSetup, TrainVariant, Trainer, OBS_DIM,
};
pub use dynamics::{
    active_uncertainty_set, sample_plant, step_plant, Interval, LinearModel, PlantParams, PlantState, UncertaintyRanges,
    UncertaintyTag, NUM_STAGES,
};
pub use error::{CulError, Result};
pub use evalbench::{evaluate_case, monte_carlo, BenchVariant, CaseResult, McSummary, Metric, Policies, RunMeta};
pub use lincontrol::{synthesize_mbc, StateSpaceController, SynthesisWeights};

/// Baseline controller for the linearized nominal plant of `cfg`.
pub fn nominal_mbc(cfg: &RunConfig) -> Result<StateSpaceController> {
    let model = dynamics::linearize_nominal(&cfg.plant.linear(), cfg.env.dt)?;
    synthesize_mbc(&model, &cfg.synthesis)
}
