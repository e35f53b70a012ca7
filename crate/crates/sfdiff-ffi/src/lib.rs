//! C ABI over the sound field toolkit: opaque handles, status codes, and a
//! thread-local last-error message.
//!
//! Conventions: fields are row-major 32x32 `double` buffers
//! ([`GRID_CELLS`] entries); masks are `uint8_t` buffers of the same shape
//! with nonzero marking an observed cell; every fallible call returns a
//! [`SfdiffStatus`] and leaves a message for
//! [`sfdiff_last_error_message`] on failure. Handles are not thread-safe;
//! guard shared handles externally.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use sfdiff::dataset::ObservationMask;
use sfdiff::diffusion::{
    load_checkpoint, reconstruct_from_observations, NoiseSchedule, UNet,
};
use sfdiff::error::Error;
use sfdiff::eval::{nmse, Region};
use sfdiff::kernel_baseline::fit;
use sfdiff::rng::{substream, Domain};
use sfdiff::room_acoustics::{magnitude, simulate_rtf, Grid, MagnitudeField, RoomSpec};

/// Grid side length; fields are GRID_SIDE x GRID_SIDE.
pub const GRID_SIDE: usize = 32;
/// Cells per field buffer.
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfdiffStatus {
    Ok = 0,
    /// Invalid configuration or argument values.
    Config = 1,
    /// Input data violates a domain precondition.
    Domain = 2,
    /// A numerical procedure failed.
    Numerical = 3,
    /// A computation would exceed a hard resource cap.
    Resource = 4,
    /// An API contract was violated.
    Contract = 5,
    /// Malformed binary artifact.
    Format = 6,
    /// File system failure.
    Io = 7,
    /// A required pointer argument was null.
    NullArgument = 8,
    /// A string argument was not valid UTF-8.
    Utf8 = 9,
    /// An internal panic was caught at the boundary.
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(status: SfdiffStatus, message: &str) -> SfdiffStatus {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
    status
}

fn from_error(err: &Error) -> SfdiffStatus {
    let status = match err {
        Error::Config(_) => SfdiffStatus::Config,
        Error::Domain(_) => SfdiffStatus::Domain,
        Error::Numerical(_) => SfdiffStatus::Numerical,
        Error::Resource(_) => SfdiffStatus::Resource,
        Error::Contract(_) => SfdiffStatus::Contract,
        Error::Format(_) => SfdiffStatus::Format,
        Error::Io(_) => SfdiffStatus::Io,
    };
    set_error(status, &err.to_string())
}

fn guarded(body: impl FnOnce() -> SfdiffStatus) -> SfdiffStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => {
            if status == SfdiffStatus::Ok {
                set_error(SfdiffStatus::Ok, "");
            }
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(SfdiffStatus::Panic, &message)
        }
    }
}

/// Copies the last error message (empty after a success) into `buf` as a
/// NUL-terminated string, truncating to `cap` bytes. Returns the full
/// message length in bytes, excluding the NUL; pass a null `buf` to query
/// the length alone.
#[no_mangle]
pub unsafe extern "C" fn sfdiff_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        let bytes = message.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sfdiff_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// A rectangular room with a fixed source (opaque).
pub struct SfdiffRoom {
    room: RoomSpec,
}

/// Validates and allocates a room handle. Lengths and t60 in meters and
/// seconds; the source must lie strictly inside.
#[no_mangle]
pub unsafe extern "C" fn sfdiff_room_new(
    lx: f64,
    ly: f64,
    lz: f64,
    t60: f64,
    source_x: f64,
    source_y: f64,
    source_z: f64,
    out: *mut *mut SfdiffRoom,
) -> SfdiffStatus {
    guarded(|| {
        if out.is_null() {
            return set_error(SfdiffStatus::NullArgument, "out is null");
        }
        match RoomSpec::new(lx, ly, lz, t60, [source_x, source_y, source_z]) {
            Ok(room) => {
                *out = Box::into_raw(Box::new(SfdiffRoom { room }));
                SfdiffStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Frees a room handle; a null pointer is ignored.
#[no_mangle]
pub unsafe extern "C" fn sfdiff_room_free(room: *mut SfdiffRoom) {
    if !room.is_null() {
        drop(Box::from_raw(room));
    }
}

unsafe fn field_from(ptr: *const f64) -> MagnitudeField {
    let values = std::slice::from_raw_parts(ptr, GRID_CELLS);
    MagnitudeField::from_shape_vec((GRID_SIDE, GRID_SIDE), values.to_vec()).expect("fixed shape")
}

unsafe fn mask_from(ptr: *const u8) -> ObservationMask {
    let bits = std::slice::from_raw_parts(ptr, GRID_CELLS);
    ObservationMask::new(ndarray::Array2::from_shape_fn((GRID_SIDE, GRID_SIDE), |(i, j)| {
        bits[i * GRID_SIDE + j] != 0
    }))
}

unsafe fn write_field(field: &MagnitudeField, out: *mut f64) {
    let slice = std::slice::from_raw_parts_mut(out, GRID_CELLS);
    for (dst, src) in slice.iter_mut().zip(field.iter()) {
        *dst = *src;
    }
}

/// Simulates the transfer function magnitude on the standard 32x32 grid at
/// plane height `z_o`, writing GRID_CELLS doubles to `out`.
#[no_mangle]
pub unsafe extern "C" fn sfdiff_simulate_magnitude(
    room: *const SfdiffRoom,
    z_o: f64,
    frequency_hz: f64,
    margin: f64,
    out: *mut f64,
) -> SfdiffStatus {
    guarded(|| {
        if room.is_null() || out.is_null() {
            return set_error(SfdiffStatus::NullArgument, "room and out must be non-null");
        }
        let room = &(*room).room;
        let body = || -> Result<MagnitudeField, Error> {
            if !(frequency_hz.is_finite() && frequency_hz > 0.0) {
                return Err(Error::Domain(format!("frequency must be positive, got {frequency_hz}")));
            }
            let grid = Grid::standard(z_o)?;
            grid.validate_for(room)?;
            let omega = 2.0 * std::f64::consts::PI * frequency_hz;
            Ok(magnitude(&simulate_rtf(room, &grid, omega, margin)?))
        };
        match body() {
            Ok(field) => {
                write_field(&field, out);
                SfdiffStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Interpolates observed magnitudes across the grid with the free-field
/// kernel and ridge weight `lambda`. Reads observed cells of `observed`
/// per `mask`, writes the full field to `out` with observed cells passed
/// through.
#[no_mangle]
pub unsafe extern "C" fn sfdiff_kernel_reconstruct(
    room: *const SfdiffRoom,
    z_o: f64,
    frequency_hz: f64,
    observed: *const f64,
    mask: *const u8,
    lambda: f64,
    out: *mut f64,
) -> SfdiffStatus {
    guarded(|| {
        if room.is_null() || observed.is_null() || mask.is_null() || out.is_null() {
            return set_error(SfdiffStatus::NullArgument, "all pointer arguments must be non-null");
        }
        let room = &(*room).room;
        let observed = field_from(observed);
        let mask = mask_from(mask);
        let body = || -> Result<MagnitudeField, Error> {
            if !(frequency_hz.is_finite() && frequency_hz > 0.0) {
                return Err(Error::Domain(format!("frequency must be positive, got {frequency_hz}")));
            }
            let indices = mask.set_indices();
            if indices.is_empty() {
                return Err(Error::Domain("mask has no observed cells".into()));
            }
            let grid = Grid::standard(z_o)?;
            grid.validate_for(room)?;
            let positions = grid.positions(room);
            let obs_pos: Vec<[f64; 3]> = indices.iter().map(|&i| positions[i]).collect();
            let obs: Vec<f64> = indices
                .iter()
                .map(|&i| observed[[i / GRID_SIDE, i % GRID_SIDE]])
                .collect();
            let k = 2.0 * std::f64::consts::PI * frequency_hz / room.speed_of_sound;
            let model = fit(&obs, &obs_pos, k, lambda)?;
            let mut field = MagnitudeField::zeros((GRID_SIDE, GRID_SIDE));
            for (idx, v) in model.predict(&positions).iter().enumerate() {
                field[[idx / GRID_SIDE, idx % GRID_SIDE]] = v.max(0.0);
            }
            for &i in &indices {
                field[[i / GRID_SIDE, i % GRID_SIDE]] = observed[[i / GRID_SIDE, i % GRID_SIDE]];
            }
            Ok(field)
        };
        match body() {
            Ok(field) => {
                write_field(&field, out);
                SfdiffStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// A trained denoiser restored from a checkpoint (opaque).
pub struct SfdiffModel {
    net: UNet,
    schedule: NoiseSchedule,
    train_steps: u64,
}

/// Loads a checkpoint from a NUL-terminated UTF-8 path.
#[no_mangle]
pub unsafe extern "C" fn sfdiff_model_load(
    path: *const c_char,
    out: *mut *mut SfdiffModel,
) -> SfdiffStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return set_error(SfdiffStatus::NullArgument, "path and out must be non-null");
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => s,
            Err(_) => return set_error(SfdiffStatus::Utf8, "path is not valid UTF-8"),
        };
        let body = || -> Result<SfdiffModel, Error> {
            let ckpt = load_checkpoint(std::path::Path::new(path))?;
            Ok(SfdiffModel {
                net: ckpt.restore_network()?,
                schedule: ckpt.schedule.build()?,
                train_steps: ckpt.train_steps,
            })
        };
        match body() {
            Ok(model) => {
                *out = Box::into_raw(Box::new(model));
                SfdiffStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Frees a model handle; a null pointer is ignored.
#[no_mangle]
pub unsafe extern "C" fn sfdiff_model_free(model: *mut SfdiffModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Optimizer steps recorded in the loaded checkpoint (0 for a null handle).
#[no_mangle]
pub unsafe extern "C" fn sfdiff_model_train_steps(model: *const SfdiffModel) -> u64 {
    if model.is_null() {
        0
    } else {
        (*model).train_steps
    }
}

/// Reconstructs a field from sparse observations by iterative denoising
/// with `steps` sampling iterations. Randomness is fully determined by
/// (`seed`, `sample_index`); observed cells pass through to `out`.
#[no_mangle]
pub unsafe extern "C" fn sfdiff_model_reconstruct(
    model: *mut SfdiffModel,
    observed: *const f64,
    mask: *const u8,
    frequency_hz: f64,
    steps: usize,
    seed: u64,
    sample_index: u64,
    out: *mut f64,
) -> SfdiffStatus {
    guarded(|| {
        if model.is_null() || observed.is_null() || mask.is_null() || out.is_null() {
            return set_error(SfdiffStatus::NullArgument, "all pointer arguments must be non-null");
        }
        let model = &mut *model;
        let observed = field_from(observed);
        let mask = mask_from(mask);
        let mut rng = substream(seed, Domain::Reconstruct, sample_index);
        match reconstruct_from_observations(
            &mut model.net,
            &observed,
            &mask,
            frequency_hz,
            &model.schedule,
            steps,
            &mut rng,
        ) {
            Ok(field) => {
                write_field(&field, out);
                SfdiffStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Normalized mean squared error in dB between an estimate and the truth.
/// `mask` may be null for the full-grid region; pass nonzero
/// `unknown_only` to score unobserved cells alone (mask required).
#[no_mangle]
pub unsafe extern "C" fn sfdiff_nmse_db(
    estimate: *const f64,
    truth: *const f64,
    mask: *const u8,
    unknown_only: c_int,
    out_db: *mut f64,
) -> SfdiffStatus {
    guarded(|| {
        if estimate.is_null() || truth.is_null() || out_db.is_null() {
            return set_error(SfdiffStatus::NullArgument, "estimate, truth, and out_db must be non-null");
        }
        if unknown_only != 0 && mask.is_null() {
            return set_error(SfdiffStatus::NullArgument, "unknown-only scoring needs a mask");
        }
        let estimate = field_from(estimate);
        let truth = field_from(truth);
        let masks = if mask.is_null() { None } else { Some(vec![mask_from(mask)]) };
        let region = if unknown_only != 0 { Region::UnknownOnly } else { Region::Full };
        match nmse(&[estimate], &[truth], masks.as_deref(), region) {
            Ok(db) => {
                *out_db = db;
                SfdiffStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}
