//! Simulator for over-the-air personalized federated meta-learning.
//!
//! Devices run MAML-style local updates, sparsify them with error feedback,
//! and transmit analog signals over a fading multiple-access channel. The
//! server estimates the superposition from compressed observations and
//! updates the shared initialization. Synthetic task families come with
//! exact oracles so convergence and generalization bounds can be evaluated
//! against measured quantities.

pub mod airlink;
pub mod error;
pub mod meta_learner;
pub mod metrics_bounds;
pub mod orchestrator;
pub mod rng;
pub mod sparse_feedback;
pub mod sweep;
pub mod task_model;
pub mod verify;

pub use airlink::{
    estimate, global_update, make_compression, noise_var_for_snr, sample_channel, transmit_mac, ChannelRound,
    CompressionKind, CompressionMatrix, Estimate, EstimatorKind, FadingModel, TransmitPacket,
};
pub use error::{Error, Result};
pub use meta_learner::{
    ideal_aggregate, inner_adapt, local_rounds, meta_grad_estimate, HyperVector, LocalConfig, LocalOutcome,
};
pub use metrics_bounds::{
    derived_constants, estimate_constants, eval_convergence_bound_adaptive, eval_convergence_bound_constant,
    eval_generalization_bound, evaluate_bounds, meta_generalization_error, meta_test_loss, meta_training_loss,
    stationary_convergence_error, step_condition_warnings, AssumptionConstants, BoundReport, DerivedConstants,
    GeneralizationBound, TrialBounds, TrialSummary,
};
pub use orchestrator::{
    lr_schedule, run_experiment, run_trial, ExperimentConfig, Pipeline, RoundRecord, Schedule, SimState, Simulator,
    Trajectory, TrialOutcome,
};
pub use rng::{stream_rng, trial_seed, SimRng, Stream};
pub use sparse_feedback::{
    comp_k, memory_fold, phase_precompensate, power_scale, CVector, MemoryState, PowerPolicy, SparseUpdate,
    SparsifyMode,
};
pub use sweep::{run_sweep, AggregateRow, SweepAxis, SweepPoint, SweepSpec};
pub use task_model::{
    population_meta_grad, population_meta_loss, sample_dataset, sample_device, ClosedFormObjective, DataPoint,
    Dataset, DeviceDistribution, InputCovariance, MetaOracle, Matrix, SampledObjective, TaskEnvironment,
    TaskFamily, Vector,
};
pub use verify::{run_suite, CheckRow, VerifyOptions};
