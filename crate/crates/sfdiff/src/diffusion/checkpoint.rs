//! Checkpoint format: a little-endian header describing the network and
//! schedule, parameters as f32 in traversal order, an optional optimizer
//! section, and a trailing CRC-64 of everything before it.

use std::fs;
use std::path::Path;

use super::nn::{DenoiserSpec, UNet};
use super::schedule::ScheduleConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SFCK";
const FORMAT_VERSION: u32 = 1;

/// Adam moment buffers flattened in parameter traversal order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// A parsed checkpoint. Parameters are stored rounded to f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: DenoiserSpec,
    pub schedule: ScheduleConfig,
    pub train_steps: u64,
    pub params: Vec<f32>,
    pub optimizer: Option<OptimizerState>,
}

fn crc64_table() -> &'static [u64; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[u64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        const POLY: u64 = 0xC96C_5795_D787_0F42;
        let mut table = [0u64; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut c = i as u64;
            for _ in 0..8 {
                c = if c & 1 == 1 { POLY ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        table
    })
}

/// CRC-64 (reflected, poly 0x42F0E1EBA9EA3693, init/xorout all-ones).
pub(crate) fn crc64(data: &[u8]) -> u64 {
    let table = crc64_table();
    let mut crc = !0u64;
    for &b in data {
        crc = table[((crc ^ b as u64) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Serializes the network. Rounds the live parameters through f32 so the
/// in-memory state matches what a load would produce.
pub fn save_checkpoint(
    path: &Path,
    net: &mut UNet,
    schedule: &ScheduleConfig,
    train_steps: u64,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let spec = net.spec().clone();
    let mut params = Vec::new();
    net.visit_params(&mut |_, mut w, _| {
        for v in w.iter_mut() {
            let r = *v as f32;
            *v = r as f64;
            params.push(r);
        }
    });
    if let Some(opt) = optimizer {
        if opt.m.len() != params.len() || opt.v.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer state length {} != parameter count {}",
                opt.m.len(),
                params.len()
            )));
        }
    }
    let mut w = Writer { buf: Vec::with_capacity(64 + 4 * params.len()) };
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(spec.base as u32);
    w.u32(spec.mults.len() as u32);
    for &m in &spec.mults {
        w.u32(m as u32);
    }
    w.u32(spec.res_blocks as u32);
    w.u32(spec.attn_resolutions.len() as u32);
    for &r in &spec.attn_resolutions {
        w.u32(r as u32);
    }
    w.u32(spec.emb_dim as u32);
    w.u64(spec.param_seed);
    w.u32(schedule.steps as u32);
    w.f64(schedule.beta_min);
    w.f64(schedule.beta_max);
    w.u64(train_steps);
    w.u64(params.len() as u64);
    w.u8(optimizer.is_some() as u8);
    for &p in &params {
        w.f32(p);
    }
    if let Some(opt) = optimizer {
        w.u64(opt.t);
        for &m in &opt.m {
            w.f32(m as f32);
        }
        for &v in &opt.v {
            w.f32(v as f32);
        }
    }
    let crc = crc64(&w.buf);
    w.u64(crc);
    fs::write(path, &w.buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path)?;
    if data.len() < 12 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (body, tail) = data.split_at(data.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let actual = crc64(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checkpoint checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"
        )));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let base = r.u32()? as usize;
    let n_mults = r.u32()? as usize;
    if n_mults > 16 {
        return Err(Error::Format(format!("implausible multiplier count {n_mults}")));
    }
    let mut mults = Vec::with_capacity(n_mults);
    for _ in 0..n_mults {
        mults.push(r.u32()? as usize);
    }
    let res_blocks = r.u32()? as usize;
    let n_attn = r.u32()? as usize;
    if n_attn > 16 {
        return Err(Error::Format(format!("implausible attention list length {n_attn}")));
    }
    let mut attn_resolutions = Vec::with_capacity(n_attn);
    for _ in 0..n_attn {
        attn_resolutions.push(r.u32()? as usize);
    }
    let emb_dim = r.u32()? as usize;
    let param_seed = r.u64()?;
    let steps = r.u32()? as usize;
    let beta_min = r.f64()?;
    let beta_max = r.f64()?;
    let train_steps = r.u64()?;
    let n_params = r.u64()? as usize;
    let has_opt = r.u8()? != 0;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(r.f32()?);
    }
    let optimizer = if has_opt {
        let t = r.u64()?;
        let mut m = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            m.push(r.f32()? as f64);
        }
        let mut v = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            v.push(r.f32()? as f64);
        }
        Some(OptimizerState { t, m, v })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            body.len() - r.pos
        )));
    }
    let spec = DenoiserSpec { base, mults, res_blocks, attn_resolutions, emb_dim, param_seed };
    spec.validate().map_err(|e| Error::Format(format!("checkpoint spec invalid: {e}")))?;
    Ok(Checkpoint {
        spec,
        schedule: ScheduleConfig { steps, beta_min, beta_max },
        train_steps,
        params,
        optimizer,
    })
}

impl Checkpoint {
    /// Rebuilds the network from the stored spec and parameters.
    pub fn restore_network(&self) -> Result<UNet> {
        let mut net = UNet::zeroed(self.spec.clone())?;
        let expected = net.param_count();
        if self.params.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, spec needs {expected}",
                self.params.len()
            )));
        }
        let mut off = 0;
        net.visit_params(&mut |_, mut w, _| {
            for v in w.iter_mut() {
                *v = self.params[off] as f64;
                off += 1;
            }
        });
        Ok(net)
    }
}
