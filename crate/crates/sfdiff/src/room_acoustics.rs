//! Modal simulation of room transfer functions in rigid-wall rectangular
//! rooms.
//!
//! The field of a monochromatic point source is evaluated as a damped sum
//! over cosine room modes,
//!
//! ```text
//! G(r) = Σ_n  ψ_n(r)·ψ_n(r_s) / (Λ_n·(ω_n² + 2jδω − ω²))
//! ```
//!
//! with ψ_n the rigid-wall eigenfunctions, Λ_n = V/(ε_nx·ε_ny·ε_nz) the
//! modal normalization, and δ = 3·ln(10)/t60 the uniform damping constant
//! implied by the reverberation time. The sum is truncated to modes with
//! eigenfrequency below `margin` times the driving frequency.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Hard cap on the number of modes a single field evaluation may sum.
pub const MODE_CAP: usize = 2_000_000;

/// Default truncation margin: modes up to twice the driving frequency.
pub const DEFAULT_MARGIN: f64 = 2.0;

/// Rectangular room with a fixed interior point source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
    /// Reverberation time in seconds.
    pub t60: f64,
    /// Source position in meters.
    pub source: [f64; 3],
    #[serde(default = "default_speed")]
    pub speed_of_sound: f64,
}

fn default_speed() -> f64 {
    SPEED_OF_SOUND
}

impl RoomSpec {
    pub fn new(lx: f64, ly: f64, lz: f64, t60: f64, source: [f64; 3]) -> Result<Self> {
        let room = RoomSpec { lx, ly, lz, t60, source, speed_of_sound: SPEED_OF_SOUND };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.lx, self.ly, self.lz];
        if dims.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            return Err(Error::Config(format!("room dimensions must be positive, got {dims:?}")));
        }
        if !self.t60.is_finite() || self.t60 <= 0.0 {
            return Err(Error::Config(format!("t60 must be positive, got {}", self.t60)));
        }
        if !self.speed_of_sound.is_finite() || self.speed_of_sound <= 0.0 {
            return Err(Error::Config("speed of sound must be positive".into()));
        }
        let [sx, sy, sz] = self.source;
        if !(sx > 0.0 && sx < self.lx && sy > 0.0 && sy < self.ly && sz > 0.0 && sz < self.lz) {
            return Err(Error::Config(format!(
                "source {:?} must lie strictly inside the room ({}, {}, {})",
                self.source, self.lx, self.ly, self.lz
            )));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.lx * self.ly * self.lz
    }

    /// Modal damping constant δ = 3·ln(10)/t60 in 1/s.
    pub fn damping(&self) -> f64 {
        3.0 * std::f64::consts::LN_10 / self.t60
    }

    pub fn contains(&self, r: [f64; 3]) -> bool {
        r[0] >= 0.0 && r[0] <= self.lx && r[1] >= 0.0 && r[1] <= self.ly && r[2] >= 0.0 && r[2] <= self.lz
    }
}

/// Regular I×J observation grid on a horizontal plane at height `z_o`.
///
/// Cell (i, j) sits at (i·lx/(I−1), j·ly/(J−1), z_o); the grid spans the
/// full floor plan including the walls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub i_dim: usize,
    pub j_dim: usize,
    pub z_o: f64,
}

impl Grid {
    pub fn new(i_dim: usize, j_dim: usize, z_o: f64) -> Result<Self> {
        if i_dim < 2 || j_dim < 2 {
            return Err(Error::Config(format!("grid dimensions must be at least 2, got {i_dim}x{j_dim}")));
        }
        if !z_o.is_finite() || z_o < 0.0 {
            return Err(Error::Config(format!("plane height must be nonnegative, got {z_o}")));
        }
        Ok(Grid { i_dim, j_dim, z_o })
    }

    pub fn standard(z_o: f64) -> Result<Self> {
        Grid::new(32, 32, z_o)
    }

    pub fn validate_for(&self, room: &RoomSpec) -> Result<()> {
        if self.z_o > room.lz {
            return Err(Error::Domain(format!(
                "plane height {} exceeds room height {}",
                self.z_o, room.lz
            )));
        }
        Ok(())
    }

    pub fn position(&self, i: usize, j: usize, room: &RoomSpec) -> [f64; 3] {
        [
            i as f64 * room.lx / (self.i_dim - 1) as f64,
            j as f64 * room.ly / (self.j_dim - 1) as f64,
            self.z_o,
        ]
    }

    /// All grid positions in row-major order, index (i, j) = i·J + j.
    pub fn positions(&self, room: &RoomSpec) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.i_dim * self.j_dim);
        for i in 0..self.i_dim {
            for j in 0..self.j_dim {
                out.push(self.position(i, j, room));
            }
        }
        out
    }

    pub fn cells(&self) -> usize {
        self.i_dim * self.j_dim
    }
}

/// Complex field slice over a grid.
pub type ComplexField = Array2<Complex64>;
/// Nonnegative magnitude slice over a grid.
pub type MagnitudeField = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModeIndex {
    pub nx: u32,
    pub ny: u32,
    pub nz: u32,
}

/// Eigenfrequency ω_n = c·π·√((nx/lx)² + (ny/ly)² + (nz/lz)²) in rad/s.
pub fn eigen_angular_frequency(n: ModeIndex, room: &RoomSpec) -> f64 {
    let tx = n.nx as f64 / room.lx;
    let ty = n.ny as f64 / room.ly;
    let tz = n.nz as f64 / room.lz;
    room.speed_of_sound * std::f64::consts::PI * (tx * tx + ty * ty + tz * tz).sqrt()
}

/// Rigid-wall eigenfunction ψ_n(r) = cos(nxπx/lx)·cos(nyπy/ly)·cos(nzπz/lz).
pub fn mode_shape(n: ModeIndex, r: [f64; 3], room: &RoomSpec) -> Result<f64> {
    if !room.contains(r) {
        return Err(Error::Domain(format!("position {r:?} outside room")));
    }
    let pi = std::f64::consts::PI;
    Ok((n.nx as f64 * pi * r[0] / room.lx).cos()
        * (n.ny as f64 * pi * r[1] / room.ly).cos()
        * (n.nz as f64 * pi * r[2] / room.lz).cos())
}

#[inline]
fn neumann(n: u32) -> f64 {
    if n == 0 {
        1.0
    } else {
        2.0
    }
}

/// All modes with ω_n ≤ margin·omega_max, sorted ascending by ω_n with a
/// lexicographic (nx, ny, nz) tie-break.
pub fn enumerate_modes(room: &RoomSpec, omega_max: f64, margin: f64) -> Result<Vec<ModeIndex>> {
    enumerate_modes_capped(room, omega_max, margin, MODE_CAP)
}

pub fn enumerate_modes_capped(
    room: &RoomSpec,
    omega_max: f64,
    margin: f64,
    cap: usize,
) -> Result<Vec<ModeIndex>> {
    if !(omega_max > 0.0) {
        return Err(Error::Domain(format!("omega_max must be positive, got {omega_max}")));
    }
    if !(margin >= 1.0) {
        return Err(Error::Config(format!("margin must be at least 1, got {margin}")));
    }
    let pi = std::f64::consts::PI;
    let bound = margin * omega_max;
    // ω_n ≤ bound  ⇔  (nx/lx)² + (ny/ly)² + (nz/lz)² ≤ (bound/(cπ))²
    let radius = bound / (room.speed_of_sound * pi);
    let r2 = radius * radius;
    let nx_max = (radius * room.lx).floor() as u32;
    let mut modes = Vec::new();
    for nx in 0..=nx_max {
        let tx = nx as f64 / room.lx;
        let rem_x = r2 - tx * tx;
        if rem_x < 0.0 {
            break;
        }
        let ny_max = (rem_x.sqrt() * room.ly).floor() as u32;
        for ny in 0..=ny_max {
            let ty = ny as f64 / room.ly;
            let rem_y = rem_x - ty * ty;
            if rem_y < 0.0 {
                break;
            }
            let nz_max = (rem_y.sqrt() * room.lz).floor() as u32;
            for nz in 0..=nz_max {
                let n = ModeIndex { nx, ny, nz };
                if eigen_angular_frequency(n, room) <= bound {
                    if modes.len() == cap {
                        return Err(Error::Resource(format!(
                            "mode count exceeds cap {cap} for omega_max={omega_max}, margin={margin}"
                        )));
                    }
                    modes.push(n);
                }
            }
        }
    }
    modes.sort_by(|a, b| {
        let wa = eigen_angular_frequency(*a, room);
        let wb = eigen_angular_frequency(*b, room);
        wa.total_cmp(&wb).then_with(|| (a.nx, a.ny, a.nz).cmp(&(b.nx, b.ny, b.nz)))
    });
    Ok(modes)
}

/// Complex response of the room at a single receiver position.
///
/// Sums the same truncated series as [`simulate_rtf`]; shared by tests and
/// the FFI layer for off-grid evaluations.
pub fn point_response(room: &RoomSpec, receiver: [f64; 3], omega: f64, margin: f64) -> Result<Complex64> {
    room.validate()?;
    if !room.contains(receiver) {
        return Err(Error::Domain(format!("receiver {receiver:?} outside room")));
    }
    if !(omega > 0.0) {
        return Err(Error::Domain(format!("omega must be positive, got {omega}")));
    }
    let modes = enumerate_modes(room, omega, margin)?;
    let delta = room.damping();
    let volume = room.volume();
    let omega2 = omega * omega;
    let mut acc = Complex64::new(0.0, 0.0);
    for n in &modes {
        let wn = eigen_angular_frequency(*n, room);
        let denom = Complex64::new(wn * wn - omega2, 2.0 * delta * omega);
        let eps = neumann(n.nx) * neumann(n.ny) * neumann(n.nz);
        let psi_r = mode_shape(*n, receiver, room)?;
        let psi_s = mode_shape(*n, room.source, room)?;
        acc += psi_r * psi_s * eps / (volume * denom);
    }
    Ok(acc)
}

/// Complex field over the full observation grid.
///
/// Separable cosine tables make this O(modes·(I+J)) + O(modes·I·J) instead
/// of evaluating `mode_shape` per cell; each cell accumulates modes in the
/// sorted enumeration order, so results are deterministic.
pub fn simulate_rtf(room: &RoomSpec, grid: &Grid, omega: f64, margin: f64) -> Result<ComplexField> {
    room.validate()?;
    grid.validate_for(room)?;
    if !(omega > 0.0) {
        return Err(Error::Domain(format!("omega must be positive, got {omega}")));
    }
    let modes = enumerate_modes(room, omega, margin)?;
    let pi = std::f64::consts::PI;
    let delta = room.damping();
    let volume = room.volume();
    let omega2 = omega * omega;

    let nx_max = modes.iter().map(|n| n.nx).max().unwrap_or(0) as usize;
    let ny_max = modes.iter().map(|n| n.ny).max().unwrap_or(0) as usize;
    let mut cos_x = vec![vec![0.0; grid.i_dim]; nx_max + 1];
    for (nx, row) in cos_x.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let x = i as f64 * room.lx / (grid.i_dim - 1) as f64;
            *v = (nx as f64 * pi * x / room.lx).cos();
        }
    }
    let mut cos_y = vec![vec![0.0; grid.j_dim]; ny_max + 1];
    for (ny, row) in cos_y.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let y = j as f64 * room.ly / (grid.j_dim - 1) as f64;
            *v = (ny as f64 * pi * y / room.ly).cos();
        }
    }

    let mut field = Array2::<Complex64>::zeros((grid.i_dim, grid.j_dim));
    for n in &modes {
        let wn = eigen_angular_frequency(*n, room);
        let denom = Complex64::new(wn * wn - omega2, 2.0 * delta * omega);
        let eps = neumann(n.nx) * neumann(n.ny) * neumann(n.nz);
        let psi_s = mode_shape(*n, room.source, room)?;
        let cos_z = (n.nz as f64 * pi * grid.z_o / room.lz).cos();
        let coeff = psi_s * cos_z * eps / (volume * denom);
        let cx = &cos_x[n.nx as usize];
        let cy = &cos_y[n.ny as usize];
        for i in 0..grid.i_dim {
            let ci = coeff * cx[i];
            for j in 0..grid.j_dim {
                field[[i, j]] += ci * cy[j];
            }
        }
    }
    Ok(field)
}

/// Elementwise complex modulus.
pub fn magnitude(field: &ComplexField) -> MagnitudeField {
    field.mapv(|z| z.norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_room() -> RoomSpec {
        RoomSpec::new(4.0, 3.0, 2.7, 0.6, [1.1, 0.8, 1.3]).unwrap()
    }

    #[test]
    fn eigen_frequency_examples() {
        let room = RoomSpec::new(3.43, 3.43, 3.43, 0.6, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(eigen_angular_frequency(ModeIndex { nx: 0, ny: 0, nz: 0 }, &room), 0.0);
        let axial = eigen_angular_frequency(ModeIndex { nx: 1, ny: 0, nz: 0 }, &room);
        assert!((axial - 100.0 * std::f64::consts::PI).abs() < 1e-9);
        let tangential = eigen_angular_frequency(ModeIndex { nx: 1, ny: 1, nz: 0 }, &room);
        assert!((tangential - 100.0 * std::f64::consts::PI * 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn mode_shape_examples() {
        let room = test_room();
        let any = [0.5, 0.5, 0.5];
        assert_eq!(mode_shape(ModeIndex { nx: 0, ny: 0, nz: 0 }, any, &room).unwrap(), 1.0);
        let n100 = ModeIndex { nx: 1, ny: 0, nz: 0 };
        assert_eq!(mode_shape(n100, [0.0, 1.0, 1.0], &room).unwrap(), 1.0);
        assert!((mode_shape(n100, [room.lx, 1.0, 1.0], &room).unwrap() + 1.0).abs() < 1e-12);
        let n200 = ModeIndex { nx: 2, ny: 0, nz: 0 };
        assert!((mode_shape(n200, [room.lx / 2.0, 1.0, 1.0], &room).unwrap() + 1.0).abs() < 1e-12);
        assert!(mode_shape(n100, [-0.1, 1.0, 1.0], &room).is_err());
    }

    #[test]
    fn enumerate_only_zero_mode() {
        let room = test_room();
        let first = eigen_angular_frequency(ModeIndex { nx: 1, ny: 0, nz: 0 }, &room)
            .min(eigen_angular_frequency(ModeIndex { nx: 0, ny: 1, nz: 0 }, &room))
            .min(eigen_angular_frequency(ModeIndex { nx: 0, ny: 0, nz: 1 }, &room));
        let modes = enumerate_modes(&room, first * 0.5, 1.0).unwrap();
        assert_eq!(modes, vec![ModeIndex { nx: 0, ny: 0, nz: 0 }]);
    }

    #[test]
    fn enumerate_cube_tie_break() {
        let room = RoomSpec::new(3.0, 3.0, 3.0, 0.6, [1.0, 1.0, 1.0]).unwrap();
        let w = eigen_angular_frequency(ModeIndex { nx: 1, ny: 0, nz: 0 }, &room);
        let modes = enumerate_modes(&room, w, 1.0).unwrap();
        let expect = [(0, 0, 0), (0, 0, 1), (0, 1, 0), (1, 0, 0)];
        let got: Vec<_> = modes.iter().map(|n| (n.nx, n.ny, n.nz)).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn enumerate_matches_brute_force() {
        let room = test_room();
        let omega_max = 2.0 * std::f64::consts::PI * 300.0;
        let modes = enumerate_modes(&room, omega_max, 2.0).unwrap();
        let mut count = 0usize;
        for nx in 0..=40u32 {
            for ny in 0..=40u32 {
                for nz in 0..=40u32 {
                    let w = eigen_angular_frequency(ModeIndex { nx, ny, nz }, &room);
                    if w <= 2.0 * omega_max {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(modes.len(), count);
        for pair in modes.windows(2) {
            let wa = eigen_angular_frequency(pair[0], &room);
            let wb = eigen_angular_frequency(pair[1], &room);
            assert!(wa <= wb);
        }
    }

    #[test]
    fn mode_cap_is_enforced() {
        let room = test_room();
        let err = enumerate_modes_capped(&room, 2.0 * std::f64::consts::PI * 300.0, 2.0, 10)
            .unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
    }

    #[test]
    fn single_mode_closed_form() {
        let room = test_room();
        // Drive far below the first eigenfrequency so only (0,0,0) survives.
        let omega = 40.0;
        let modes = enumerate_modes(&room, omega, 1.0).unwrap();
        assert_eq!(modes.len(), 1);
        let g = point_response(&room, [2.0, 1.5, 0.9], omega, 1.0).unwrap();
        let delta = room.damping();
        let expect = Complex64::new(1.0, 0.0)
            / (room.volume() * Complex64::new(-omega * omega, 2.0 * delta * omega));
        assert!((g - expect).norm() <= 1e-15 * expect.norm());
    }

    #[test]
    fn grid_positions_hit_walls_exactly() {
        let room = test_room();
        let grid = Grid::standard(1.2).unwrap();
        assert_eq!(grid.position(0, 0, &room), [0.0, 0.0, 1.2]);
        assert_eq!(grid.position(31, 31, &room), [room.lx, room.ly, 1.2]);
    }

    #[test]
    fn grid_cell_matches_point_response() {
        let room = test_room();
        let grid = Grid::standard(1.2).unwrap();
        let omega = 2.0 * std::f64::consts::PI * 150.0;
        let field = simulate_rtf(&room, &grid, omega, 2.0).unwrap();
        for (i, j) in [(0usize, 0usize), (7, 21), (31, 31)] {
            let p = grid.position(i, j, &room);
            let direct = point_response(&room, p, omega, 2.0).unwrap();
            let rel = (field[[i, j]] - direct).norm() / direct.norm();
            assert!(rel <= 1e-12, "cell ({i},{j}) rel err {rel}");
        }
    }

    #[test]
    fn reciprocity_holds() {
        let mut room = test_room();
        let omega = 2.0 * std::f64::consts::PI * 120.0;
        let pairs = [
            ([0.7, 0.5, 0.4], [3.1, 2.2, 2.0]),
            ([1.9, 1.1, 0.8], [2.4, 0.3, 1.5]),
            ([0.2, 2.7, 2.5], [3.9, 0.1, 0.2]),
        ];
        for (a, b) in pairs {
            room.source = a;
            let g_ab = point_response(&room, b, omega, 2.0).unwrap();
            room.source = b;
            let g_ba = point_response(&room, a, omega, 2.0).unwrap();
            let rel = (g_ab - g_ba).norm() / g_ab.norm();
            assert!(rel <= 1e-9, "reciprocity violated: {rel}");
        }
    }

    #[test]
    fn magnitude_examples() {
        let mut f: ComplexField = Array2::zeros((2, 2));
        f[[0, 1]] = Complex64::new(3.0, 4.0);
        let m = magnitude(&f);
        assert_eq!(m[[0, 0]], 0.0);
        assert_eq!(m[[0, 1]], 5.0);
    }

    #[test]
    fn invalid_rooms_are_rejected() {
        assert!(RoomSpec::new(0.0, 3.0, 2.7, 0.6, [1.0, 1.0, 1.0]).is_err());
        assert!(RoomSpec::new(4.0, 3.0, 2.7, -1.0, [1.0, 1.0, 1.0]).is_err());
        assert!(RoomSpec::new(4.0, 3.0, 2.7, 0.6, [4.0, 1.0, 1.0]).is_err());
        assert!(Grid::new(1, 32, 1.2).is_err());
    }

    #[test]
    fn truncation_differences_shrink_with_margin() {
        // The modal series converges slowly near the source singularity;
        // successive field differences must still shrink as the margin
        // doubles. The anchored error against a margin-8 field decreases.
        let room = test_room();
        let grid = Grid::standard(1.2).unwrap();
        let omega = 2.0 * std::f64::consts::PI * 150.0;
        let f2 = simulate_rtf(&room, &grid, omega, 2.0).unwrap();
        let f4 = simulate_rtf(&room, &grid, omega, 4.0).unwrap();
        let f8 = simulate_rtf(&room, &grid, omega, 8.0).unwrap();
        let max8 = f8.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let d2 = (&f2 - &f8).iter().map(|z| z.norm()).fold(0.0, f64::max) / max8;
        let d4 = (&f4 - &f8).iter().map(|z| z.norm()).fold(0.0, f64::max) / max8;
        assert!(d4 < 0.7 * d2, "margin 4 error {d4} not clearly below margin 2 error {d2}");
    }
}
