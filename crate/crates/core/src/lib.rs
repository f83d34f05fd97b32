//! Privacy-auditing core for desk-scale diffusion models.
//!
//! Trains four small generative model kinds (DDPM, SMLD, VPSDE, VESDE) on
//! 2-D toy data, mounts loss-based and likelihood-based membership-inference
//! attacks against them, and evaluates the results with worst-case ROC
//! metrics. A DP-SGD training mode is included as the defense baseline.
//!
//! The numeric modules are generic over the scalar type; the aliases at the
//! crate root pin the shipped instantiation to `f64`.

pub mod attacks;
pub mod data;
pub mod error;
pub mod metrics;
pub mod likelihood;
pub mod ode;
pub mod sampler;
pub mod scalar;
pub mod scorenet;
pub mod schedules;
pub mod tensor;
pub mod trainer;

pub use error::{AuditError, Result};
pub use scalar::Scalar;

/// Default 64-bit tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Default 64-bit tape.
pub type Tape = tensor::Tape<f64>;
/// Default 64-bit discrete schedule.
pub type DiscreteSchedule = schedules::DiscreteSchedule<f64>;
/// Default 64-bit continuous schedule.
pub type ContinuousSchedule = schedules::ContinuousSchedule<f64>;
/// Default 64-bit schedule wrapper.
pub type Schedule = schedules::Schedule<f64>;
/// Default 64-bit time point.
pub type TimePoint = schedules::TimePoint<f64>;
/// Default 64-bit marginal statistics.
pub type MarginalStats = schedules::MarginalStats<f64>;
/// Default 64-bit score network.
pub type ScoreNetwork = scorenet::ScoreNetwork<f64>;
/// Default 64-bit target model.
pub type TargetModel = scorenet::TargetModel<f64>;
/// Default 64-bit Gaussian score oracle.
pub type GaussianScoreOracle = likelihood::GaussianScoreOracle<f64>;
/// Default 64-bit attack score set.
pub type AttackScoreSet = attacks::AttackScoreSet<f64>;
/// Default 64-bit step profile.
pub type StepProfile = attacks::StepProfile<f64>;
/// Default 64-bit likelihood attack outcome.
pub type LikelihoodAttackOutcome = attacks::LikelihoodAttackOutcome<f64>;
/// Default 64-bit ROC report.
pub type RocReport = metrics::RocReport<f64>;
/// Default 64-bit dataset.
pub type Dataset = data::Dataset<f64>;
