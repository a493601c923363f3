//! The split-latent VAE, its losses, the KL decomposition, training and checkpoints.

pub mod checkpoint;
pub mod kl;
pub mod layout;
pub mod loss;
pub mod model;
pub mod train;

pub use checkpoint::{Checkpoint, StoredTensor};
pub use kl::{kl_terms, kl_terms_with_grad, KlGrads, KlTerms, KlWeights};
pub use layout::{reparameterize, reparameterize_batch, GaussianPosterior, LatentLayout, Posteriors};
pub use loss::{perceptual_loss, recon_loss, total_loss, warmup, Coefficients, FeatureExtractor, LossBreakdown, METRIC_HEADER};
pub use model::{ArchPreset, Architecture, Vae, WeightTying};
pub use train::{
    full_loss, metric_csv, objective_grad_check, train, val_csv, LossGrads, LossInputs, Mode, Schedule, Selection, TrainOutcome, TrainedVae, Trainer,
    TrainingConfig, ValRecord,
};
