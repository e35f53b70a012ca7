//! Discrete noise schedule: linear betas, cumulative-product gammas, and
//! strided respacing for fast sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;
pub const DEFAULT_SAMPLING_STEPS: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, beta_min: DEFAULT_BETA_MIN, beta_max: DEFAULT_BETA_MAX }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

/// Forward-process schedule: `gammas[t]` is the signal retention after
/// t+1 noising steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Domain("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Domain(format!(
            "betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_min]
    } else {
        (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let mut gammas = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &b in &betas {
        acc *= 1.0 - b;
        gammas.push(acc);
    }
    Ok(NoiseSchedule { betas, gammas })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Strided sub-schedule with `steps` entries: index k maps to the
    /// original step ⌊k·T/steps⌋, and the per-step betas are rebuilt from
    /// the gamma ratios so posterior formulas stay exact.
    pub fn respace(&self, steps: usize) -> Result<RespacedSchedule> {
        let t = self.len();
        if steps == 0 || steps > t {
            return Err(Error::Domain(format!(
                "sampling steps must be in 1..={t}, got {steps}"
            )));
        }
        let taus: Vec<usize> = (0..steps).map(|k| k * t / steps).collect();
        let gammas: Vec<f64> = taus.iter().map(|&tau| self.gammas[tau]).collect();
        let mut betas = Vec::with_capacity(steps);
        betas.push(1.0 - gammas[0]);
        for k in 1..steps {
            betas.push(1.0 - gammas[k] / gammas[k - 1]);
        }
        Ok(RespacedSchedule { gammas, betas })
    }
}

/// Schedule restricted to a strided subset of steps, for fast sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct RespacedSchedule {
    pub gammas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl RespacedSchedule {
    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas, vec![0.5]);
        assert_eq!(s.gammas, vec![0.5]);
    }

    #[test]
    fn default_schedule_matches_direct_product() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.len(), 1000);
        let mut acc = 1.0;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            acc *= 1.0 - beta;
            assert!((s.gammas[i] - acc).abs() <= 1e-15 * acc.abs().max(1e-300));
        }
        assert!((s.gammas[999] / 4e-5 - 1.0).abs() < 0.1, "gamma_T = {}", s.gammas[999]);
    }

    #[test]
    fn gammas_strictly_decreasing() {
        let s = make_schedule(500, 1e-3, 0.05).unwrap();
        for w in s.gammas.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.gammas[0] > 0.99);
        assert!(*s.gammas.last().unwrap() < 0.01);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.1, 0.05).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn respacing_strides_and_rebuilds_betas() {
        let s = ScheduleConfig::default().build().unwrap();
        let r = s.respace(250).unwrap();
        assert_eq!(r.len(), 250);
        for k in 0..250 {
            assert_eq!(r.gammas[k], s.gammas[4 * k]);
        }
        assert_eq!(r.betas[0], 1.0 - s.gammas[0]);
        for k in 1..250 {
            let expect = 1.0 - r.gammas[k] / r.gammas[k - 1];
            assert_eq!(r.betas[k], expect);
            assert!(r.betas[k] > 0.0 && r.betas[k] < 1.0);
        }
    }

    #[test]
    fn full_respacing_recovers_original_betas() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let r = s.respace(100).unwrap();
        for k in 0..100 {
            assert!((r.betas[k] - s.betas[k]).abs() < 1e-12);
        }
        assert!(s.respace(0).is_err());
        assert!(s.respace(101).is_err());
    }
}
