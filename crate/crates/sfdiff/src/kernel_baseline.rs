//! Kernel ridge regression with the free-field Helmholtz kernel
//! κ(r1, r2) = sinc(k·‖r1−r2‖).
//!
//! Weights solve (K + λI)·w = s over the observed cells; the field at any
//! target is Σ_a w_a·κ(t, r_a). Complex observations are fitted as two
//! independent real systems sharing one factorization. The solver tries a
//! Cholesky factorization first and falls back to a clamped symmetric
//! eigendecomposition when rounding pushes the Gram matrix indefinite.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::room_acoustics::{simulate_rtf, MagnitudeField};

/// Default ridge weight relative to the mean Gram diagonal (which is
/// exactly 1 for this kernel): λ = 1e-3 · trace(K)/m.
pub const DEFAULT_LAMBDA_REL: f64 = 1e-3;

/// Baseline observation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    /// Fit the complex field at observed cells, output its magnitude.
    Complex,
    /// Fit real magnitudes directly.
    Magnitude,
}

/// sinc(k·d) with the removable singularity evaluated analytically.
pub fn helmholtz_kernel(r1: [f64; 3], r2: [f64; 3], k: f64) -> f64 {
    let dx = r1[0] - r2[0];
    let dy = r1[1] - r2[1];
    let dz = r1[2] - r2[2];
    let d = (dx * dx + dy * dy + dz * dz).sqrt();
    sinc(k * d)
}

#[inline]
fn sinc(x: f64) -> f64 {
    // Below √(6·eps) the quadratic Taylor term is already at rounding
    // level, so 1 - x²/6 is exact to f64.
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Fitted interpolation weights over a fixed observation set.
#[derive(Debug, Clone)]
pub struct KernelModel {
    positions: Vec<[f64; 3]>,
    k: f64,
    lambda: f64,
    /// One weight vector per value channel (1 for magnitude, 2 for
    /// complex re/im).
    weights: Vec<Vec<f64>>,
}

fn gram(positions: &[[f64; 3]], k: f64) -> DMatrix<f64> {
    let m = positions.len();
    DMatrix::from_fn(m, m, |a, b| {
        if a == b {
            1.0
        } else {
            helmholtz_kernel(positions[a], positions[b], k)
        }
    })
}

/// Solve (K + λI)·x = rhs for each right-hand side.
fn solve_ridge(gram: &DMatrix<f64>, lambda: f64, rhs: &[DVector<f64>]) -> Result<Vec<Vec<f64>>> {
    let m = gram.nrows();
    let mut a = gram.clone();
    for i in 0..m {
        a[(i, i)] += lambda;
    }
    if let Some(chol) = a.clone().cholesky() {
        return Ok(rhs.iter().map(|b| chol.solve(b).as_slice().to_vec()).collect());
    }
    // Rounding can make K + λI indefinite when K is numerically
    // rank-deficient; clamp the spectrum at λ and solve in the eigenbasis.
    let eig = nalgebra::SymmetricEigen::new(a);
    let floor = lambda.max(f64::EPSILON * m as f64);
    let inv_vals: Vec<f64> = eig.eigenvalues.iter().map(|v| 1.0 / v.max(floor)).collect();
    if inv_vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "kernel system is singular at lambda={lambda} (m={m}); eigenvalue clamp failed"
        )));
    }
    Ok(rhs
        .iter()
        .map(|b| {
            let proj = eig.eigenvectors.transpose() * b;
            let scaled = DVector::from_iterator(m, proj.iter().zip(&inv_vals).map(|(p, iv)| p * iv));
            (&eig.eigenvectors * scaled).as_slice().to_vec()
        })
        .collect())
}

/// Fit interpolation weights for real observations.
pub fn fit(observations: &[f64], positions: &[[f64; 3]], k: f64, lambda: f64) -> Result<KernelModel> {
    validate_fit(observations.len(), positions, k, lambda)?;
    let g = gram(positions, k);
    let rhs = vec![DVector::from_column_slice(observations)];
    let weights = solve_ridge(&g, lambda, &rhs)?;
    Ok(KernelModel { positions: positions.to_vec(), k, lambda, weights })
}

/// Fit interpolation weights for complex observations (re and im fitted
/// against the same factorized system).
pub fn fit_complex(
    observations: &[Complex64],
    positions: &[[f64; 3]],
    k: f64,
    lambda: f64,
) -> Result<KernelModel> {
    validate_fit(observations.len(), positions, k, lambda)?;
    let g = gram(positions, k);
    let re = DVector::from_iterator(observations.len(), observations.iter().map(|z| z.re));
    let im = DVector::from_iterator(observations.len(), observations.iter().map(|z| z.im));
    let weights = solve_ridge(&g, lambda, &[re, im])?;
    Ok(KernelModel { positions: positions.to_vec(), k, lambda, weights })
}

fn validate_fit(n_obs: usize, positions: &[[f64; 3]], k: f64, lambda: f64) -> Result<()> {
    if n_obs == 0 {
        return Err(Error::Domain("kernel fit needs at least one observation".into()));
    }
    if n_obs != positions.len() {
        return Err(Error::Contract(format!(
            "{n_obs} observations but {} positions",
            positions.len()
        )));
    }
    if !(k > 0.0) {
        return Err(Error::Domain(format!("wavenumber must be positive, got {k}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be nonnegative, got {lambda}")));
    }
    Ok(())
}

impl KernelModel {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Real prediction at each target (first weight channel).
    pub fn predict(&self, targets: &[[f64; 3]]) -> Vec<f64> {
        self.predict_channel(targets, 0)
    }

    /// Complex prediction at each target; requires a complex fit.
    pub fn predict_complex(&self, targets: &[[f64; 3]]) -> Result<Vec<Complex64>> {
        if self.weights.len() != 2 {
            return Err(Error::Contract("model was not fitted on complex observations".into()));
        }
        let re = self.predict_channel(targets, 0);
        let im = self.predict_channel(targets, 1);
        Ok(re.into_iter().zip(im).map(|(a, b)| Complex64::new(a, b)).collect())
    }

    fn predict_channel(&self, targets: &[[f64; 3]], channel: usize) -> Vec<f64> {
        let w = &self.weights[channel];
        targets
            .iter()
            .map(|t| {
                let mut acc = 0.0;
                for (pos, wi) in self.positions.iter().zip(w) {
                    acc += wi * helmholtz_kernel(*t, *pos, self.k);
                }
                acc
            })
            .collect()
    }
}

/// Reconstruct a sample's magnitude field from its observed cells.
///
/// `Complex` mode re-simulates the complex field to obtain complex
/// observations (magnitude-only storage loses phase); `Magnitude` mode
/// fits the stored magnitudes directly. Observed cells are passed through
/// from the sample in the returned field.
pub fn reconstruct_slice(sample: &Sample, mode: FitMode, lambda: f64) -> Result<MagnitudeField> {
    let obs_idx = sample.mask.set_indices();
    if obs_idx.is_empty() {
        return Err(Error::Domain("sample has no observed cells".into()));
    }
    let all_pos = sample.grid.positions(&sample.room);
    let obs_pos: Vec<[f64; 3]> = obs_idx.iter().map(|&i| all_pos[i]).collect();
    let omega = 2.0 * std::f64::consts::PI * sample.frequency_hz;
    let k = omega / sample.room.speed_of_sound;

    let j_dim = sample.grid.j_dim;
    let mut out = sample.magnitude.clone();
    match mode {
        FitMode::Complex => {
            let field = simulate_rtf(&sample.room, &sample.grid, omega, crate::room_acoustics::DEFAULT_MARGIN)?;
            let obs: Vec<Complex64> = obs_idx.iter().map(|&i| field[[i / j_dim, i % j_dim]]).collect();
            let model = fit_complex(&obs, &obs_pos, k, lambda)?;
            let pred = model.predict_complex(&all_pos)?;
            for (idx, z) in pred.iter().enumerate() {
                out[[idx / j_dim, idx % j_dim]] = z.norm();
            }
        }
        FitMode::Magnitude => {
            let obs: Vec<f64> = obs_idx.iter().map(|&i| sample.magnitude[[i / j_dim, i % j_dim]]).collect();
            let model = fit(&obs, &obs_pos, k, lambda)?;
            let pred = model.predict(&all_pos);
            for (idx, v) in pred.iter().enumerate() {
                out[[idx / j_dim, idx % j_dim]] = v.max(0.0);
            }
        }
    }
    for &i in &obs_idx {
        out[[i / j_dim, i % j_dim]] = sample.magnitude[[i / j_dim, i % j_dim]];
    }
    Ok(out)
}
