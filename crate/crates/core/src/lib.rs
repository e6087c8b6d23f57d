//! Factorized diffusion policies at desk scale: diffusion schedules, analytic
//! score oracles, base/residual noise-prediction networks, training, reverse
//! samplers, toy manipulation environments, and dataset/checkpoint storage.

pub mod data;
pub mod error;
pub mod io;
pub mod nets;
pub mod oracle;
pub mod obs;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod toyenv;
pub mod training;

pub use data::{generate_demos, load_dataset, save_dataset, AggregateRow, DemoDataset, PriorityOrder, ResultRow, ResultTable};
pub use error::{Error, Result};
pub use nets::{ComposeMode, ComposedPolicy, NetConfig, PolicyNet, ResidualNet};
pub use pipeline::{evaluate, score_check, score_check_defaults, train_method, Method, NetSize, ScoreCheckReport, TrainedModel};
pub use obs::{ModalityKind, ModalitySpec, ObservationBundle};
pub use rng::Rng;
pub use schedule::{build_schedule, eps_to_score, forward_noise, score_to_eps, NoiseSchedule, NoisyAction, ScheduleKind, Score};
pub use sampling::{sample_action, Composition, PolicySet, SampleMethod, SampleTrace, SamplerConfig};
pub use toyenv::{rollout, ArenaScale, BlockPickEnv, EnvConfig, EpisodeRecord, Perturbation, PerturbationKind, RenderedObs};
pub use training::{train, TrainItem, TrainingConfig};
