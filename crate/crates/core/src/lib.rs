//! Sequential diagnosis engine: a knowledge base of diseases and findings,
//! patient simulators, an inquiry policy trained with REINFORCE, a disease
//! classifier, and per-disease entropy stopping thresholds.

pub mod checkpoint;
pub mod classifier;
pub mod eval;
pub mod kb;
pub mod nn;
pub mod patient_sim;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod session;
pub mod thresholds;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use classifier::{Classifier, DiagnosisPrediction};
pub use kb::{gen_toy_kb, Flavor, KnowledgeBase, ToyKbSpec};
pub use patient_sim::{simulate, Feedback, Patient, SimConfig, StateVector};
pub use policy::Policy;
pub use rewards::{Outcome, RewardConfig};
pub use thresholds::{ThresholdInit, ThresholdMode, ThresholdTable};
pub use trainer::{run_episode, train, EpisodeRecord, TrainConfig, Trainer};
