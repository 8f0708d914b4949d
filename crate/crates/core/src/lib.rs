//! Adaptive personalized-reward pipeline: low-rank reward bases fitted from
//! pairwise preferences, jury voting over candidate outputs, and cheap
//! weight-only adaptation to new annotator cohorts.
//!
//! The pipeline has three stages:
//!
//! 1. **Reward personalization** ([`optim::train_joint`]): jointly fit K
//!    linear reward heads over item embeddings and a simplex weight vector
//!    per annotator, by maximum likelihood under the Bradley-Terry choice
//!    model.
//! 2. **Democratic filtering** ([`jury::democratic_filter`]): a jury of
//!    personalized reward models ranks a candidate slate; a social-choice
//!    rule (plurality, Borda, Copeland, or IRV with parallel-universe
//!    tie-breaking) picks the winner, with a full audit trail.
//! 3. **Jury adaptation** ([`optim::fit_weights`]): fit weights for new
//!    annotators over the frozen bases and add them to the jury pool.
//!
//! The numeric core is generic over the scalar type via [`scalar::Scalar`];
//! every generic type defaults to `f64`, which the artifact formats and the
//! CLI use throughout. Single-precision aliases live at the crate root.

pub mod data;
pub mod jury;
pub mod lab;
pub mod optim;
pub mod reward;
pub mod scalar;
pub mod voting;

pub use data::{CatalogItem, DataError, ItemCatalog, PreferenceDataset, PreferenceRecord};
pub use jury::{FilterOutcome, JuryError, JuryPool, JurySpec};
pub use optim::{
    project_to_simplex, HalvingEvent, StopReason, TrainConfig, TrainError, TrainReport,
};
pub use reward::{
    bt_nll, bt_prob, dataset_nll, nll_gradients, personal_reward, preference_accuracy,
    BasisModel, ModelError, NllGradients, WeightEntry, WeightTable,
};
pub use scalar::Scalar;
pub use voting::{
    apply_rule, borda, clone_insert, condorcet_winner, copeland, irv_put,
    mean_pairwise_spearman, pairwise_margins, plurality, Ballot, Profile, RuleAudit,
    VoteOutcome, VotingError, VotingRule,
};

/// Single-precision aliases for the generic core. The `f64` lane is the
/// default type parameter everywhere and is what artifacts use on disk.
pub type BasisModelF32 = reward::BasisModel<f32>;
pub type WeightTableF32 = reward::WeightTable<f32>;
pub type ItemCatalogF32 = data::ItemCatalog<f32>;
pub type TrainConfigF32 = optim::TrainConfig<f32>;
