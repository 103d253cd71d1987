//! Chunk files: `BVCK` magic, version, kind, grid dims, t_index, payload and
//! a trailing CRC32 of everything before it. Chunks are addressed by the
//! SHA-256 of their full byte content.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::StoreError;
use crate::solver::{FieldState, GridSpec};
use crate::strata::DeltaFrame;

pub const MAGIC: &[u8; 4] = b"BVCK";
pub const VERSION: u16 = 1;
/// Bytes before the payload.
pub const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ChunkKind {
    Checkpoint = 1,
    Delta = 2,
}

/// Hex SHA-256 of a chunk's bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkId(pub String);

impl ChunkId {
    pub fn of(bytes: &[u8]) -> Self {
        ChunkId(hex::encode(Sha256::digest(bytes)))
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkHeader {
    pub kind: ChunkKind,
    pub nx: u32,
    pub ny: u32,
    pub t_index: u64,
}

fn frame(kind: ChunkKind, grid: &GridSpec, t_index: u64, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(grid.nx as u32).to_le_bytes());
    out.extend_from_slice(&(grid.ny as u32).to_le_bytes());
    out.extend_from_slice(&t_index.to_le_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Three row-major f64 LE arrays: scalar, vel_u, vel_v.
pub fn checkpoint_payload(state: &FieldState) -> Vec<u8> {
    let mut out = Vec::with_capacity(state.scalar.len() * 24);
    for field in [&state.scalar, &state.vel_u, &state.vel_v] {
        for v in field.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode_checkpoint(grid: &GridSpec, state: &FieldState) -> Vec<u8> {
    frame(
        ChunkKind::Checkpoint,
        grid,
        state.t_index,
        &checkpoint_payload(state),
    )
}

pub fn encode_delta(grid: &GridSpec, delta: &DeltaFrame) -> Vec<u8> {
    frame(
        ChunkKind::Delta,
        grid,
        delta.t_index,
        &delta.encode_payload(),
    )
}

/// Validates framing and CRC and splits off the payload.
pub fn parse(bytes: &[u8]) -> Result<(ChunkHeader, &[u8]), StoreError> {
    let bad = |msg: &str| StoreError::Corruption(format!("chunk: {msg}"));
    if bytes.len() < HEADER_LEN + 4 {
        return Err(bad("truncated"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(bad("CRC mismatch"));
    }
    let kind = match bytes[6] {
        1 => ChunkKind::Checkpoint,
        2 => ChunkKind::Delta,
        k => return Err(bad(&format!("unknown kind {k}"))),
    };
    let nx = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
    let ny = u32::from_le_bytes(bytes[11..15].try_into().unwrap());
    let t_index = u64::from_le_bytes(bytes[15..23].try_into().unwrap());
    Ok((
        ChunkHeader {
            kind,
            nx,
            ny,
            t_index,
        },
        &body[HEADER_LEN..],
    ))
}

fn expect(header: &ChunkHeader, kind: ChunkKind, grid: &GridSpec) -> Result<(), StoreError> {
    if header.kind != kind {
        return Err(StoreError::Corruption(format!(
            "chunk: expected {kind:?}, found {:?}",
            header.kind
        )));
    }
    if header.nx as usize != grid.nx || header.ny as usize != grid.ny {
        return Err(StoreError::Corruption(format!(
            "chunk: grid {}x{} does not match run grid {}x{}",
            header.nx, header.ny, grid.nx, grid.ny
        )));
    }
    Ok(())
}

pub fn decode_checkpoint(bytes: &[u8], grid: &GridSpec) -> Result<FieldState, StoreError> {
    let (header, payload) = parse(bytes)?;
    expect(&header, ChunkKind::Checkpoint, grid)?;
    let n = grid.cells();
    if payload.len() != n * 24 {
        return Err(StoreError::Corruption(format!(
            "checkpoint payload is {} bytes, expected {}",
            payload.len(),
            n * 24
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = || values.by_ref().take(n).collect::<Vec<_>>();
    let scalar = take();
    let vel_u = take();
    let vel_v = take();
    Ok(FieldState {
        t_index: header.t_index,
        scalar,
        vel_u,
        vel_v,
    })
}

/// Store deltas always step from `t_index - 1`.
pub fn decode_delta(bytes: &[u8], grid: &GridSpec) -> Result<DeltaFrame, StoreError> {
    let (header, payload) = parse(bytes)?;
    expect(&header, ChunkKind::Delta, grid)?;
    if header.t_index == 0 {
        return Err(StoreError::Corruption("delta chunk at t_index 0".into()));
    }
    DeltaFrame::decode_payload(payload, header.t_index, header.t_index - 1)
        .map_err(|e| StoreError::Corruption(e.to_string()))
}
