//! Reverse-process sampling: iterative denoising from pure noise, with the
//! conditioning channels held fixed.

use ndarray::{s, Array1, Array3, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use super::nn::{UNet, GRID_SIDE, INPUT_CHANNELS, NOISE_EMB_SCALE};
use super::schedule::NoiseSchedule;
use crate::dataset::{inference_scale, normalize_with_scale, ObservationMask, Sample};
use crate::error::{Error, Result};
use crate::room_acoustics::MagnitudeField;

/// Runs the denoiser once: estimates the noise in `noisy` at level `gamma`
/// given the conditioning channels.
pub fn denoise_predict(
    net: &mut UNet,
    conditioning: &Array3<f64>,
    noisy: &MagnitudeField,
    gamma: f64,
) -> Result<MagnitudeField> {
    let side = GRID_SIDE;
    if conditioning.dim() != (INPUT_CHANNELS - 1, side, side) {
        return Err(Error::Contract(format!(
            "conditioning shape {:?} != ({}, {side}, {side})",
            conditioning.dim(),
            INPUT_CHANNELS - 1
        )));
    }
    if noisy.dim() != (side, side) {
        return Err(Error::Contract(format!("noisy target shape {:?} != ({side}, {side})", noisy.dim())));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let mut x = Array4::<f64>::zeros((1, INPUT_CHANNELS, side, side));
    x.slice_mut(s![0, 0, .., ..]).assign(noisy);
    x.slice_mut(s![0, 1..4, .., ..]).assign(conditioning);
    let sg = Array1::from(vec![NOISE_EMB_SCALE * gamma.sqrt()]);
    let pred = net.forward(&x, &sg);
    Ok(pred.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0).to_owned())
}

/// Clean-signal estimate implied by a noise estimate, clipped to [0, 1].
pub(crate) fn signal_estimate(noisy: &MagnitudeField, eps_hat: &MagnitudeField, gamma: f64) -> MagnitudeField {
    let (a, c) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    let mut x0 = noisy.clone();
    x0.zip_mut_with(eps_hat, |x, &e| *x = ((*x - c * e) / a).clamp(0.0, 1.0));
    x0
}

/// Ancestral sampling with `steps` respaced iterations. Starts from pure
/// noise, denoises with the conditioning held fixed, clips the final field
/// to [0, 1], overwrites observed cells with their measured values, and
/// denormalizes by the sample's inference scale.
pub fn reconstruct(
    net: &mut UNet,
    sample: &Sample,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<MagnitudeField> {
    reconstruct_from_observations(
        net,
        &sample.magnitude,
        &sample.mask,
        sample.frequency_hz,
        schedule,
        steps,
        rng,
    )
}

/// [`reconstruct`] over raw observations: only `magnitude`'s observed cells
/// are read, so unobserved entries may hold anything.
pub fn reconstruct_from_observations(
    net: &mut UNet,
    magnitude: &MagnitudeField,
    mask: &ObservationMask,
    frequency_hz: f64,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<MagnitudeField> {
    let scale = inference_scale(magnitude, mask)?;
    let normalized = normalize_with_scale(magnitude, scale);
    let cond = super::build_conditioning_from(&normalized, mask, frequency_hz, rng);
    let field = reconstruct_with_conditioning(net, &cond, schedule, steps, rng)?;
    let mut out = field.mapv(|v| v * scale);
    for i in 0..out.dim().0 {
        for j in 0..out.dim().1 {
            if mask.is_set(i, j) {
                out[[i, j]] = magnitude[[i, j]];
            }
        }
    }
    Ok(out)
}

/// Core sampling loop over prepared conditioning channels. Returns the
/// normalized field in [0, 1] without observed-cell overwrite.
pub fn reconstruct_with_conditioning(
    net: &mut UNet,
    conditioning: &Array3<f64>,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<MagnitudeField> {
    let side = GRID_SIDE;
    if conditioning.dim() != (INPUT_CHANNELS - 1, side, side) {
        return Err(Error::Contract(format!(
            "conditioning shape {:?} != ({}, {side}, {side})",
            conditioning.dim(),
            INPUT_CHANNELS - 1
        )));
    }
    let resp = schedule.respace(steps)?;
    let mut x = Array4::<f64>::zeros((1, INPUT_CHANNELS, side, side));
    x.slice_mut(s![0, 1..4, .., ..]).assign(conditioning);
    for i in 0..side {
        for j in 0..side {
            x[[0, 0, i, j]] = rng.sample(StandardNormal);
        }
    }
    let mut current = x.slice(s![0, 0, .., ..]).to_owned();
    for k in (0..resp.len()).rev() {
        let gamma = resp.gammas[k];
        x.slice_mut(s![0, 0, .., ..]).assign(&current);
        let sg = Array1::from(vec![NOISE_EMB_SCALE * gamma.sqrt()]);
        let pred = net.forward(&x, &sg);
        let eps_hat = pred.slice(s![0, 0, .., ..]).to_owned();
        let x0 = signal_estimate(&current, &eps_hat, gamma);
        if k > 0 {
            let gamma_prev = resp.gammas[k - 1];
            let beta = resp.betas[k];
            let c0 = gamma_prev.sqrt() * beta / (1.0 - gamma);
            let c1 = (1.0 - beta).sqrt() * (1.0 - gamma_prev) / (1.0 - gamma);
            let std = ((1.0 - gamma_prev) / (1.0 - gamma) * beta).sqrt();
            for i in 0..side {
                for j in 0..side {
                    let noise: f64 = rng.sample(StandardNormal);
                    current[[i, j]] = c0 * x0[[i, j]] + c1 * current[[i, j]] + std * noise;
                }
            }
        } else {
            current = x0;
        }
        if current.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite sampler state at step {k} (gamma {gamma})"
            )));
        }
    }
    Ok(current)
}
