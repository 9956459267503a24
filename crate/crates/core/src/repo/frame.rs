// SPDX-License-Identifier: Apache-2.0

//! Length-prefixed, CRC-checked record framing shared by the flowfile
//! journal, snapshots, provenance segments and topic partitions.
//!
//! ```text
//! frame := len:u32le crc32:u32le payload[len]
//! ```
//!
//! Scanning stops at the first frame whose length runs past the end of the
//! data or whose checksum does not match; everything before it is valid.

use std::fs;
use std::io;
use std::path::Path;

pub const HEADER_LEN: usize = 8;

pub fn encode(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Valid frames in `data` and the byte length they span.
pub fn scan(data: &[u8]) -> (Vec<&[u8]>, usize) {
    let mut frames = Vec::new();
    let mut pos = 0;
    while data.len() - pos >= HEADER_LEN {
        let len = u32::from_le_bytes(data[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(data[pos + 4..pos + 8].try_into().unwrap());
        let start = pos + HEADER_LEN;
        if data.len() - start < len {
            break;
        }
        let payload = &data[start..start + len];
        if crc32fast::hash(payload) != crc {
            break;
        }
        frames.push(payload);
        pos = start + len;
    }
    (frames, pos)
}

/// Reads a whole file; a missing file reads as empty.
pub fn read_file(path: &Path) -> io::Result<Vec<u8>> {
    match fs::read(path) {
        Ok(d) => Ok(d),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}
