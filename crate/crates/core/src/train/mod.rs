//! Optimizer, schedule, phantom data and the training loop.

pub mod adam;
pub mod evaluate;
pub mod phantom;
pub mod recipe;
pub mod sampler;
pub mod scheduler;
pub mod trainer;

pub use adam::Adam;
pub use evaluate::{evaluate, evaluate_case, predict_case, CaseSource, EvalReport, Predictor, RegionTally};
pub use phantom::{generate_phantom, phantom_set, Phantom, PhantomSpec};
pub use recipe::{DeskRecipe, DeskRun, SeedRange};
pub use sampler::{PatchSampler, TrainCase};
pub use scheduler::PlateauScheduler;
pub use trainer::{log_csv, loss_and_grads, train, validation_loss, EpochRecord, TrainConfig, TrainOutcome};
