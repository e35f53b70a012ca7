//! Conditional denoising diffusion for magnitude-field inpainting.
//!
//! The model learns to predict the noise injected by the forward process
//! ỹ = √γ̄·y + √(1−γ̄)·ε, conditioned on the observed cells, the observation
//! mask, and a constant frequency channel. Reconstruction runs ancestral
//! sampling over a strided sub-schedule, overwrites observed cells with
//! their measurements, and denormalizes by the inference scale.

mod checkpoint;
mod nn;
mod sampler;
mod schedule;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState};
pub use nn::{DenoiserSpec, UNet, GRID_SIDE, INPUT_CHANNELS, NOISE_EMB_SCALE, OUTPUT_CHANNELS};
pub use sampler::{denoise_predict, reconstruct, reconstruct_from_observations, reconstruct_with_conditioning};
pub use schedule::{
    make_schedule, NoiseSchedule, RespacedSchedule, ScheduleConfig, DEFAULT_BETA_MAX,
    DEFAULT_BETA_MIN, DEFAULT_SAMPLING_STEPS, DEFAULT_STEPS,
};
pub use trainer::{masked_loss, train, training_step, Adam, LossMask, TrainReport, TrainerConfig};

use ndarray::Array3;

use crate::dataset::{ObservationMask, Sample};
use crate::room_acoustics::MagnitudeField;

/// Anchors of the constant frequency channel: 30 Hz maps to 0, 300 Hz to 1.
pub const FREQ_EMBED_MIN_HZ: f64 = 30.0;
pub const FREQ_EMBED_SPAN_HZ: f64 = 270.0;

/// Number of conditioning channels (observed/noise, mask, frequency).
pub const CONDITIONING_CHANNELS: usize = 3;

/// ỹ = √γ·y + √(1−γ)·ε elementwise. `gamma` must lie in [0, 1].
pub fn forward_noise(y: &MagnitudeField, gamma: f64, epsilon: &MagnitudeField) -> MagnitudeField {
    debug_assert!((0.0..=1.0).contains(&gamma));
    let (sg, sn) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    let mut out = y.mapv(|v| v * sg);
    out.zip_mut_with(epsilon, |o, &e| *o += sn * e);
    out
}

/// Constant frequency-channel value for a slice at `frequency_hz`.
pub fn frequency_embedding(frequency_hz: f64) -> f64 {
    ((frequency_hz - FREQ_EMBED_MIN_HZ) / FREQ_EMBED_SPAN_HZ).clamp(0.0, 1.0)
}

/// Builds the three conditioning channels from a normalized field, its
/// observation mask, and the slice frequency. Unobserved cells of channel 0
/// receive fresh standard-normal noise, drawn in row-major cell order.
pub fn build_conditioning_from(
    normalized: &MagnitudeField,
    mask: &ObservationMask,
    frequency_hz: f64,
    rng: &mut impl rand::Rng,
) -> Array3<f64> {
    let (i_dim, j_dim) = normalized.dim();
    let mut ch = Array3::<f64>::zeros((CONDITIONING_CHANNELS, i_dim, j_dim));
    let fval = frequency_embedding(frequency_hz);
    for i in 0..i_dim {
        for j in 0..j_dim {
            let observed = mask.is_set(i, j);
            ch[[0, i, j]] = if observed {
                normalized[[i, j]]
            } else {
                rng.sample(rand_distr::StandardNormal)
            };
            ch[[1, i, j]] = if observed { 1.0 } else { 0.0 };
            ch[[2, i, j]] = fval;
        }
    }
    ch
}

/// Conditioning for a training sample (normalized by its training scale).
pub fn build_conditioning(sample: &Sample, rng: &mut impl rand::Rng) -> Array3<f64> {
    build_conditioning_from(&sample.normalized, &sample.mask, sample.frequency_hz, rng)
}
