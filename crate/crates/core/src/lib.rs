//! Weakly supervised video moment localization with counterfactual
//! cross-modality reasoning.

pub mod autograd;
pub mod ccr;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod proposals;
pub mod rng;
pub mod trainer;

pub use autograd::Mat;
pub use ccr::{AggregatorKind, CounterfactualStrategy};
pub use config::RunConfig;
pub use data::{DatasetRecord, MaskedQuery, TokenizedQuery, VideoFeatures, Vocab};
pub use error::{CcrError, ErrorCategory, Result};
pub use eval::{EvalReport, Prediction, Segment};
pub use losses::{LossBundle, Margins};
pub use model::{CcrConfig, Model, ModelConfig};
pub use proposals::{Proposal, ProposalSet};
pub use trainer::{StepReport, TrainConfig, TrainPair, TrainState};
