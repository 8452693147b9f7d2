//! β-VAE over normalized schedules: network, training and latent sampling.

mod model;
mod sampling;
mod train;

pub use model::{kl_divergence, Dense, Gradients, LatentDecoder, LossParts, VaeModel, HIDDEN};
pub use sampling::{axis_sweep, mean_pairwise_distance, sample_latent_sphere, violation_sweep, ViolationCounts};
pub use train::{train, EpochLoss, TrainConfig};
