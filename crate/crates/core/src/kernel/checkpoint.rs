//! Binary kernel snapshot.
//!
//! Layout, all little-endian: magic `QDPP`, `u32` version, then `N`, `|O|`,
//! `|A|`, `P` as `u64`, then `D` (`M` × `f64`), then `B` row-major (`M·P` × `f64`).

use std::io::{Read, Write};

use super::{GroundSet, KernelError, QDppKernel};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"QDPP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Refuse headers describing more parameters than this before allocating.
const MAX_PARAMS: u64 = 1 << 28;

pub fn write_checkpoint<W: Write>(kernel: &QDppKernel, mut out: W) -> Result<(), KernelError> {
    let gs = kernel.ground();
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for dim in [gs.n_agents(), gs.n_obs(), gs.n_actions(), kernel.feature_dim()] {
        out.write_all(&(dim as u64).to_le_bytes())?;
    }
    for x in kernel.log_quality().iter().chain(kernel.diversity()) {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<QDppKernel, KernelError> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(KernelError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut v = [0u8; 4];
    read_exact(&mut input, &mut v)?;
    let version = u32::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(KernelError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0u64; 4];
    for d in dims.iter_mut() {
        let mut b = [0u8; 8];
        read_exact(&mut input, &mut b)?;
        *d = u64::from_le_bytes(b);
    }
    let [n, o, a, p] = dims;
    let m = n
        .checked_mul(o)
        .and_then(|x| x.checked_mul(a))
        .filter(|&m| m.checked_mul(p.saturating_add(1)).is_some_and(|t| t <= MAX_PARAMS))
        .ok_or_else(|| KernelError::Checkpoint(format!("implausible shape {dims:?}")))?;
    let ground = GroundSet::new(n as usize, o as usize, a as usize)?;
    let m = m as usize;
    let p = p as usize;
    let log_quality = read_f64s(&mut input, m)?;
    let diversity = read_f64s(&mut input, m * p)?;
    let mut tail = [0u8; 1];
    if input.read(&mut tail)? != 0 {
        return Err(KernelError::Checkpoint("trailing bytes".into()));
    }
    QDppKernel::from_parts(ground, p, log_quality, diversity)
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<(), KernelError> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => KernelError::Checkpoint("truncated".into()),
        _ => KernelError::Io(e),
    })
}

fn read_f64s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f64>, KernelError> {
    let mut out = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        read_exact(input, &mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}
