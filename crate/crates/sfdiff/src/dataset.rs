//! Corpus generation and the bit-exact binary sample format.
//!
//! A corpus is a flat file of records, each holding one simulated room
//! slice: room geometry, measurement plane, frequency, observation mask,
//! and the magnitude field both raw and max-normalized. Generation is
//! seeded and chunk-parallel; sample `i` always draws from the substream
//! (seed, CorpusSample, i) in a frozen order (area, aspect, lz, source
//! xyz, z_o, frequency, density), with the mask drawn from (seed, Mask, i),
//! so regeneration is byte-identical regardless of thread count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Domain};
use crate::room_acoustics::{magnitude, simulate_rtf, Grid, MagnitudeField, RoomSpec, SPEED_OF_SOUND};

pub const CORPUS_MAGIC: &[u8; 4] = b"SFD1";
pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Headroom factor applied to the observed maximum when the full-grid
/// maximum is unknown at reconstruction time.
pub const INFERENCE_HEADROOM: f64 = 1.2;

/// Randomized-protocol parameters for corpus generation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Floor area range in m².
    pub area: [f64; 2],
    /// Aspect-ratio (lx/ly) range.
    pub aspect: [f64; 2],
    /// Room height range in m.
    pub lz: [f64; 2],
    pub t60: f64,
    /// Minimum source distance from any wall in m.
    pub source_clearance: f64,
    /// Measurement-plane height range in m.
    pub z_o: [f64; 2],
    /// Frequency range in Hz.
    pub frequency: [f64; 2],
    /// Microphone counts used for masks.
    pub densities: Vec<usize>,
    pub grid_i: usize,
    pub grid_j: usize,
    /// Mode-truncation margin passed to the simulator.
    pub margin: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            area: [20.0, 60.0],
            aspect: [0.5, 2.0],
            lz: [2.5, 4.0],
            t60: 0.6,
            source_clearance: 0.1,
            z_o: [1.0, 1.5],
            frequency: [30.0, 300.0],
            densities: vec![64, 128, 256, 512],
            grid_i: 32,
            grid_j: 32,
            margin: crate::room_acoustics::DEFAULT_MARGIN,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !ordered(self.area) || self.area[0] <= 0.0 {
            return Err(Error::Config(format!("invalid area range {:?}", self.area)));
        }
        if !ordered(self.aspect) || self.aspect[0] <= 0.0 {
            return Err(Error::Config(format!("invalid aspect range {:?}", self.aspect)));
        }
        if !ordered(self.lz) || self.lz[0] <= 0.0 {
            return Err(Error::Config(format!("invalid height range {:?}", self.lz)));
        }
        if !ordered(self.z_o) || self.z_o[0] < 0.0 || self.z_o[1] > self.lz[0] {
            return Err(Error::Config(format!(
                "plane height range {:?} must fit inside every room height (min {})",
                self.z_o, self.lz[0]
            )));
        }
        if !ordered(self.frequency) || self.frequency[0] <= 0.0 {
            return Err(Error::Config(format!("invalid frequency range {:?}", self.frequency)));
        }
        if self.t60 <= 0.0 || self.source_clearance < 0.0 || self.margin < 1.0 {
            return Err(Error::Config("t60, clearance, and margin must be positive".into()));
        }
        if self.grid_i < 2 || self.grid_j < 2 {
            return Err(Error::Config("grid dimensions must be at least 2".into()));
        }
        let cells = self.grid_i * self.grid_j;
        if self.densities.is_empty() || self.densities.iter().any(|&m| m == 0 || m > cells) {
            return Err(Error::Config(format!("invalid density list {:?}", self.densities)));
        }
        Ok(())
    }

    /// Draw a room per the randomized protocol: floor area U[area],
    /// aspect lx/ly U[aspect], height U[lz], fixed t60, source uniform
    /// with wall clearance.
    pub fn sample_room(&self, rng: &mut impl Rng) -> RoomSpec {
        let area = rng.random_range(self.area[0]..=self.area[1]);
        let aspect = rng.random_range(self.aspect[0]..=self.aspect[1]);
        let lx = (area * aspect).sqrt();
        let ly = (area / aspect).sqrt();
        let lz = rng.random_range(self.lz[0]..=self.lz[1]);
        let c = self.source_clearance;
        let source = [
            rng.random_range(c..=lx - c),
            rng.random_range(c..=ly - c),
            rng.random_range(c..=lz - c),
        ];
        RoomSpec { lx, ly, lz, t60: self.t60, source, speed_of_sound: SPEED_OF_SOUND }
    }
}

/// Binary observation mask over the grid; set bits are microphone cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask {
    bits: Array2<bool>,
}

impl ObservationMask {
    pub fn new(bits: Array2<bool>) -> Self {
        ObservationMask { bits }
    }

    pub fn full(i_dim: usize, j_dim: usize) -> Self {
        ObservationMask { bits: Array2::from_elem((i_dim, j_dim), true) }
    }

    /// Uniform sample of exactly `m` distinct cells.
    pub fn sample(rng: &mut impl Rng, i_dim: usize, j_dim: usize, m: usize) -> Result<Self> {
        let cells = i_dim * j_dim;
        if m == 0 || m > cells {
            return Err(Error::Domain(format!("mask count {m} out of range 1..={cells}")));
        }
        let chosen = rand::seq::index::sample(rng, cells, m);
        let mut bits = Array2::from_elem((i_dim, j_dim), false);
        for idx in chosen.iter() {
            bits[[idx / j_dim, idx % j_dim]] = true;
        }
        Ok(ObservationMask { bits })
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_set(&self, i: usize, j: usize) -> bool {
        self.bits[[i, j]]
    }

    pub fn dim(&self) -> (usize, usize) {
        self.bits.dim()
    }

    /// Row-major set-cell flat indices (i·J + j), ascending.
    pub fn set_indices(&self) -> Vec<usize> {
        let (_, jd) = self.bits.dim();
        self.bits
            .indexed_iter()
            .filter_map(|((i, j), b)| b.then_some(i * jd + j))
            .collect()
    }

    /// 0/1 float view used as a model input channel.
    pub fn as_f64(&self) -> Array2<f64> {
        self.bits.mapv(|b| if b { 1.0 } else { 0.0 })
    }

    /// Pack row-major, LSB-first within each byte.
    pub fn pack(&self) -> Vec<u8> {
        let (id, jd) = self.bits.dim();
        let cells = id * jd;
        let mut out = vec![0u8; cells.div_ceil(8)];
        for i in 0..id {
            for j in 0..jd {
                if self.bits[[i, j]] {
                    let idx = i * jd + j;
                    out[idx / 8] |= 1 << (idx % 8);
                }
            }
        }
        out
    }

    pub fn unpack(bytes: &[u8], i_dim: usize, j_dim: usize) -> Result<Self> {
        let cells = i_dim * j_dim;
        if bytes.len() != cells.div_ceil(8) {
            return Err(Error::Format(format!(
                "mask byte length {} does not match {}x{} grid",
                bytes.len(),
                i_dim,
                j_dim
            )));
        }
        let mut bits = Array2::from_elem((i_dim, j_dim), false);
        for i in 0..i_dim {
            for j in 0..j_dim {
                let idx = i * j_dim + j;
                bits[[i, j]] = bytes[idx / 8] & (1 << (idx % 8)) != 0;
            }
        }
        Ok(ObservationMask { bits })
    }
}

/// One corpus record: a simulated slice plus its observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub room: RoomSpec,
    pub grid: Grid,
    pub frequency_hz: f64,
    /// Normalization divisor used for `normalized` (full-grid maximum).
    pub scale: f64,
    pub mask: ObservationMask,
    /// Raw magnitude field (physical units).
    pub magnitude: MagnitudeField,
    /// magnitude / scale, clipped to [0,1].
    pub normalized: MagnitudeField,
}

impl Sample {
    /// Scale available at reconstruction time: headroom × observed max.
    pub fn inference_scale(&self) -> Result<f64> {
        inference_scale(&self.magnitude, &self.mask)
    }
}

/// Training-mode normalization: divide by the full-grid maximum.
pub fn normalize(field: &MagnitudeField) -> Result<(MagnitudeField, f64)> {
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("field contains non-finite values".into()));
    }
    let scale = field.iter().cloned().fold(0.0, f64::max);
    if scale <= 0.0 {
        return Err(Error::Domain("cannot normalize an all-zero field".into()));
    }
    Ok((normalize_with_scale(field, scale), scale))
}

/// Inference-mode scale: headroom × max over observed cells.
pub fn inference_scale(field: &MagnitudeField, mask: &ObservationMask) -> Result<f64> {
    let mut max_obs = 0.0f64;
    for ((i, j), v) in field.indexed_iter() {
        if mask.is_set(i, j) {
            max_obs = max_obs.max(*v);
        }
    }
    if max_obs <= 0.0 {
        return Err(Error::Domain("all observed cells are zero".into()));
    }
    Ok(INFERENCE_HEADROOM * max_obs)
}

/// Divide by `scale` and clip to [0,1].
pub fn normalize_with_scale(field: &MagnitudeField, scale: f64) -> MagnitudeField {
    field.mapv(|v| (v / scale).clamp(0.0, 1.0))
}

pub fn denormalize(normalized: &MagnitudeField, scale: f64) -> MagnitudeField {
    normalized.mapv(|v| v * scale)
}

/// Evenly spaced inclusive frequency grid.
pub fn test_frequencies(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum CorpusKind {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test")]
    Test,
}

/// Everything needed to regenerate a corpus bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub kind: CorpusKind,
    pub seed: u64,
    pub sample_count: u64,
    pub n_rooms: usize,
    /// Test corpora only: frequencies per room.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_freqs: Option<usize>,
    pub protocol: ProtocolConfig,
}

impl CorpusManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest parse: {e}")))
    }
}

fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Streaming corpus writer. The header's sample count is fixed up front.
pub struct CorpusWriter {
    out: BufWriter<File>,
    i_dim: usize,
    j_dim: usize,
    declared: u64,
    written: u64,
}

impl CorpusWriter {
    pub fn create(path: &Path, i_dim: usize, j_dim: usize, count: u64) -> Result<Self> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        out.write_all(CORPUS_MAGIC)?;
        out.write_all(&CORPUS_FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(i_dim as u32).to_le_bytes())?;
        out.write_all(&(j_dim as u32).to_le_bytes())?;
        out.write_all(&count.to_le_bytes())?;
        Ok(CorpusWriter { out, i_dim, j_dim, declared: count, written: 0 })
    }

    pub fn append(&mut self, s: &Sample) -> Result<()> {
        if (s.grid.i_dim, s.grid.j_dim) != (self.i_dim, self.j_dim) {
            return Err(Error::Contract("sample grid does not match corpus header".into()));
        }
        if self.written == self.declared {
            return Err(Error::Contract("more samples appended than declared".into()));
        }
        let w = &mut self.out;
        write_f64(w, s.room.lx)?;
        write_f64(w, s.room.ly)?;
        write_f64(w, s.room.lz)?;
        write_f64(w, s.room.t60)?;
        write_f64(w, s.room.source[0])?;
        write_f64(w, s.room.source[1])?;
        write_f64(w, s.room.source[2])?;
        write_f64(w, s.room.speed_of_sound)?;
        write_f64(w, s.grid.z_o)?;
        write_f64(w, s.frequency_hz)?;
        write_f64(w, s.scale)?;
        w.write_all(&s.mask.pack())?;
        for v in s.normalized.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        for v in s.magnitude.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.declared {
            return Err(Error::Contract(format!(
                "declared {} samples but wrote {}",
                self.declared, self.written
            )));
        }
        self.out.flush()?;
        Ok(())
    }
}

/// Corpus reader; samples are decoded sequentially.
pub struct CorpusReader {
    input: BufReader<File>,
    pub i_dim: usize,
    pub j_dim: usize,
    pub count: u64,
    read: u64,
}

impl CorpusReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut input = BufReader::new(file);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CORPUS_MAGIC {
            return Err(Error::Format(format!("bad corpus magic {magic:?}")));
        }
        let version = read_u32(&mut input)?;
        if version != CORPUS_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported corpus format version {version}")));
        }
        let i_dim = read_u32(&mut input)? as usize;
        let j_dim = read_u32(&mut input)? as usize;
        if i_dim < 2 || j_dim < 2 {
            return Err(Error::Format(format!("corrupt grid dimensions {i_dim}x{j_dim}")));
        }
        let count = read_u64(&mut input)?;
        Ok(CorpusReader { input, i_dim, j_dim, count, read: 0 })
    }

    pub fn next_sample(&mut self) -> Result<Option<Sample>> {
        if self.read == self.count {
            return Ok(None);
        }
        let r = &mut self.input;
        let lx = read_f64(r)?;
        let ly = read_f64(r)?;
        let lz = read_f64(r)?;
        let t60 = read_f64(r)?;
        let source = [read_f64(r)?, read_f64(r)?, read_f64(r)?];
        let speed_of_sound = read_f64(r)?;
        let z_o = read_f64(r)?;
        let frequency_hz = read_f64(r)?;
        let scale = read_f64(r)?;
        let cells = self.i_dim * self.j_dim;
        let mut mask_bytes = vec![0u8; cells.div_ceil(8)];
        r.read_exact(&mut mask_bytes)?;
        let mask = ObservationMask::unpack(&mask_bytes, self.i_dim, self.j_dim)?;
        let read_field = |r: &mut BufReader<File>| -> Result<MagnitudeField> {
            let mut buf = vec![0u8; cells * 4];
            r.read_exact(&mut buf)?;
            let vals: Vec<f64> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Array2::from_shape_vec((self.i_dim, self.j_dim), vals)
                .map_err(|e| Error::Format(format!("field shape: {e}")))
        };
        let normalized = read_field(r)?;
        let magnitude = read_field(r)?;
        self.read += 1;
        Ok(Some(Sample {
            room: RoomSpec { lx, ly, lz, t60, source, speed_of_sound },
            grid: Grid { i_dim: self.i_dim, j_dim: self.j_dim, z_o },
            frequency_hz,
            scale,
            mask,
            magnitude,
            normalized,
        }))
    }

    pub fn read_all(mut self) -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(self.count as usize);
        while let Some(s) = self.next_sample()? {
            out.push(s);
        }
        Ok(out)
    }
}

/// Generate the sample for training-corpus index `i`.
pub fn generate_training_sample(seed: u64, i: u64, config: &ProtocolConfig) -> Result<Sample> {
    let mut rng = substream(seed, Domain::CorpusSample, i);
    let room = config.sample_room(&mut rng);
    let z_o = rng.random_range(config.z_o[0]..=config.z_o[1]);
    let frequency_hz = rng.random_range(config.frequency[0]..=config.frequency[1]);
    let density_idx = rng.random_range(0..config.densities.len());
    let m = config.densities[density_idx];
    let mut mask_rng = substream(seed, Domain::Mask, i);
    let mask = ObservationMask::sample(&mut mask_rng, config.grid_i, config.grid_j, m)?;
    let grid = Grid::new(config.grid_i, config.grid_j, z_o)?;
    let omega = 2.0 * std::f64::consts::PI * frequency_hz;
    let field = simulate_rtf(&room, &grid, omega, config.margin)?;
    let mag = magnitude(&field);
    let (normalized, scale) = normalize(&mag)?;
    Ok(Sample { room, grid, frequency_hz, scale, mask, magnitude: mag, normalized })
}

/// Generate the record for test-corpus flat index `idx`; rooms are drawn
/// per room index so all records of a room share geometry and plane.
pub fn generate_test_sample(
    seed: u64,
    idx: u64,
    n_freqs: usize,
    config: &ProtocolConfig,
) -> Result<Sample> {
    let denom = (n_freqs * config.densities.len()) as u64;
    let room_idx = idx / denom;
    let rem = idx % denom;
    let freq_idx = (rem / config.densities.len() as u64) as usize;
    let density_idx = (rem % config.densities.len() as u64) as usize;

    let mut room_rng = substream(seed, Domain::CorpusSample, room_idx);
    let room = config.sample_room(&mut room_rng);
    let z_o = room_rng.random_range(config.z_o[0]..=config.z_o[1]);
    let freqs = test_frequencies(n_freqs, config.frequency[0], config.frequency[1]);
    let frequency_hz = freqs[freq_idx];
    let m = config.densities[density_idx];
    let mut mask_rng = substream(seed, Domain::Mask, idx);
    let mask = ObservationMask::sample(&mut mask_rng, config.grid_i, config.grid_j, m)?;
    let grid = Grid::new(config.grid_i, config.grid_j, z_o)?;
    let omega = 2.0 * std::f64::consts::PI * frequency_hz;
    let field = simulate_rtf(&room, &grid, omega, config.margin)?;
    let mag = magnitude(&field);
    let (normalized, scale) = normalize(&mag)?;
    Ok(Sample { room, grid, frequency_hz, scale, mask, magnitude: mag, normalized })
}

const GENERATION_CHUNK: usize = 256;

fn build_corpus(
    count: u64,
    i_dim: usize,
    j_dim: usize,
    corpus_path: &Path,
    gen: impl Fn(u64) -> Result<Sample> + Sync,
) -> Result<()> {
    let mut writer = CorpusWriter::create(corpus_path, i_dim, j_dim, count)?;
    let mut start = 0u64;
    while start < count {
        let end = (start + GENERATION_CHUNK as u64).min(count);
        let chunk: Vec<Result<Sample>> = (start..end).into_par_iter().map(&gen).collect();
        for s in chunk {
            writer.append(&s?)?;
        }
        start = end;
    }
    writer.finish()
}

/// Build a training corpus: one (room, frequency, mask) record per room.
pub fn build_training_corpus(
    seed: u64,
    n_rooms: usize,
    config: &ProtocolConfig,
    corpus_path: &Path,
    manifest_path: &Path,
) -> Result<CorpusManifest> {
    if n_rooms == 0 {
        return Err(Error::Config("training corpus needs at least one room".into()));
    }
    config.validate()?;
    build_corpus(n_rooms as u64, config.grid_i, config.grid_j, corpus_path, |i| {
        generate_training_sample(seed, i, config)
    })?;
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        kind: CorpusKind::Train,
        seed,
        sample_count: n_rooms as u64,
        n_rooms,
        n_freqs: None,
        protocol: config.clone(),
    };
    manifest.save(manifest_path)?;
    Ok(manifest)
}

/// Build a test corpus: every room is evaluated at `n_freqs` evenly spaced
/// frequencies under every mask density, one record per combination.
pub fn build_test_corpus(
    seed: u64,
    n_rooms: usize,
    n_freqs: usize,
    config: &ProtocolConfig,
    corpus_path: &Path,
    manifest_path: &Path,
) -> Result<CorpusManifest> {
    if n_rooms == 0 || n_freqs == 0 {
        return Err(Error::Config("test corpus needs at least one room and one frequency".into()));
    }
    config.validate()?;
    let count = (n_rooms * n_freqs * config.densities.len()) as u64;
    build_corpus(count, config.grid_i, config.grid_j, corpus_path, |idx| {
        generate_test_sample(seed, idx, n_freqs, config)
    })?;
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        kind: CorpusKind::Test,
        seed,
        sample_count: count,
        n_rooms,
        n_freqs: Some(n_freqs),
        protocol: config.clone(),
    };
    manifest.save(manifest_path)?;
    Ok(manifest)
}
