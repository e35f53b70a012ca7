//! Evaluation: normalized mean squared error and per-(frequency, density)
//! sweep tables.
//!
//! NMSE = 10·log10( (1/N)·Σ_i ‖P̂_i − P_i‖² / ‖P_i‖² ), computed on
//! denormalized magnitudes, either over the full grid or over unknown
//! (unobserved) cells only. Exact matches are floored at −120 dB.

mod heatmap;
mod viridis;

pub use heatmap::{render_heatmap, render_heatmap_image, render_panel, render_panel_image};
pub use viridis::VIRIDIS;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ObservationMask, Sample};
use crate::error::{Error, Result};
use crate::room_acoustics::MagnitudeField;

/// Finite reporting floor for perfect reconstructions.
pub const NMSE_FLOOR_DB: f64 = -120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    #[default]
    Full,
    UnknownOnly,
}

/// Squared-error ratio ‖est − truth‖²/‖truth‖² for one sample over a region.
pub fn sample_ratio(
    estimate: &MagnitudeField,
    truth: &MagnitudeField,
    mask: Option<&ObservationMask>,
    region: Region,
) -> Result<f64> {
    if estimate.dim() != truth.dim() {
        return Err(Error::Contract(format!(
            "estimate shape {:?} != truth shape {:?}",
            estimate.dim(),
            truth.dim()
        )));
    }
    let mask = match region {
        Region::Full => None,
        Region::UnknownOnly => Some(mask.ok_or_else(|| {
            Error::Contract("unknown-only region requires the observation mask".into())
        })?),
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for ((i, j), t) in truth.indexed_iter() {
        if let Some(m) = mask {
            if m.is_set(i, j) {
                continue;
            }
        }
        let e = estimate[[i, j]];
        num += (e - t) * (e - t);
        den += t * t;
    }
    if den <= 0.0 {
        return Err(Error::Domain("ground truth has zero norm over the region".into()));
    }
    Ok(num / den)
}

/// Mean-ratio NMSE in dB with the −120 dB floor.
pub fn nmse_db_from_ratios(ratios: &[f64]) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::Domain("nmse needs at least one sample".into()));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    if mean <= 0.0 {
        return Ok(NMSE_FLOOR_DB);
    }
    Ok((10.0 * mean.log10()).max(NMSE_FLOOR_DB))
}

/// NMSE over paired estimate/truth fields.
pub fn nmse(
    estimates: &[MagnitudeField],
    truths: &[MagnitudeField],
    masks: Option<&[ObservationMask]>,
    region: Region,
) -> Result<f64> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return Err(Error::Contract(format!(
            "need equal nonempty estimate/truth lists, got {} and {}",
            estimates.len(),
            truths.len()
        )));
    }
    if let Some(m) = masks {
        if m.len() != estimates.len() {
            return Err(Error::Contract("mask list length mismatch".into()));
        }
    }
    let ratios: Vec<f64> = estimates
        .iter()
        .zip(truths)
        .enumerate()
        .map(|(i, (e, t))| {
            sample_ratio(e, t, masks.map(|m| &m[i]), region)
                .map_err(|err| Error::Domain(format!("sample {i}: {err}")))
        })
        .collect::<Result<_>>()?;
    nmse_db_from_ratios(&ratios)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub frequency_hz: f64,
    pub m: usize,
    pub nmse_db: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// CSV with the fixed header, frequencies ascending then m ascending,
    /// UTF-8 with LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frequency_hz,m,nmse_db,n_samples\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{}\n",
                row.frequency_hz, row.m, row.nmse_db, row.n_samples
            ));
        }
        out
    }

    pub fn nmse_for(&self, frequency_hz: f64, m: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.frequency_hz == frequency_hz && r.m == m)
            .map(|r| r.nmse_db)
    }
}

/// Reconstruct every sample and aggregate NMSE per (frequency, density).
///
/// Only samples whose mask count appears in `densities` contribute. The
/// reconstruction closure runs in parallel over samples; aggregation
/// order is fixed, so the table is deterministic.
pub fn sweep<F>(samples: &[Sample], densities: &[usize], region: Region, recon: F) -> Result<SweepTable>
where
    F: Fn(&Sample) -> Result<MagnitudeField> + Sync,
{
    if densities.is_empty() {
        return Ok(SweepTable::default());
    }
    let ratios: Vec<Option<(f64, usize, f64)>> = samples
        .par_iter()
        .map(|s| {
            let m = s.mask.count();
            if !densities.contains(&m) {
                return Ok(None);
            }
            let est = recon(s)?;
            let ratio = sample_ratio(&est, &s.magnitude, Some(&s.mask), region)?;
            Ok(Some((s.frequency_hz, m, ratio)))
        })
        .collect::<Result<_>>()?;

    let mut cells: Vec<((u64, usize), Vec<f64>)> = Vec::new();
    for entry in ratios.into_iter().flatten() {
        let (f, m, ratio) = entry;
        let key = (f.to_bits(), m);
        match cells.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(ratio),
            None => cells.push((key, vec![ratio])),
        }
    }
    cells.sort_by(|((fa, ma), _), ((fb, mb), _)| {
        f64::from_bits(*fa)
            .total_cmp(&f64::from_bits(*fb))
            .then(ma.cmp(mb))
    });
    let rows = cells
        .into_iter()
        .map(|((fbits, m), ratios)| {
            Ok(SweepRow {
                frequency_hz: f64::from_bits(fbits),
                m,
                nmse_db: nmse_db_from_ratios(&ratios)?,
                n_samples: ratios.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { rows })
}
