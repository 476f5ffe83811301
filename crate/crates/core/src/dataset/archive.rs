//! `MREF-REC v1`: the magic `MREF0001`, little-endian `u32` version, canvas
//! and count, then per record the RGB image, the mask, `u8` query, `u8`
//! colour label and `f32` scale.

use std::path::Path;

use super::Sample;
use crate::error::{PanError, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"MREF0001";
pub const ARCHIVE_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 3 * 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub canvas: usize,
    pub samples: Vec<Sample>,
}

impl Archive {
    pub fn record_len(canvas: usize) -> usize {
        canvas * canvas * 4 + 6
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.samples.len() * Self::record_len(self.canvas)
    }
}

pub fn encode_archive(archive: &Archive) -> Result<Vec<u8>> {
    if archive.samples.is_empty() {
        return Err(PanError::usage("refusing to write an empty archive"));
    }
    let mut out = Vec::with_capacity(archive.encoded_len());
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(archive.canvas as u32).to_le_bytes());
    out.extend_from_slice(&(archive.samples.len() as u32).to_le_bytes());
    for (i, s) in archive.samples.iter().enumerate() {
        s.validate(archive.canvas)
            .map_err(|e| PanError::data(format!("record {i}: {e}")))?;
        out.extend_from_slice(&s.image);
        out.extend_from_slice(&s.mask);
        out.push(s.query);
        out.push(s.color_label);
        out.extend_from_slice(&s.scale.to_le_bytes());
    }
    Ok(out)
}

fn le_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| PanError::format(offset as u64, "archive ends inside the header"))
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    match bytes.get(..8) {
        Some(m) if m == ARCHIVE_MAGIC => {}
        Some(_) => return Err(PanError::format(0, "not an MREF-REC archive (bad magic)")),
        None => return Err(PanError::format(bytes.len() as u64, "archive ends inside the magic")),
    }
    let version = le_u32(bytes, 8)?;
    if version != ARCHIVE_VERSION {
        return Err(PanError::format(8, format!("unsupported archive version {version}")));
    }
    let canvas = le_u32(bytes, 12)? as usize;
    if canvas == 0 || canvas > 4096 {
        return Err(PanError::format(12, format!("implausible canvas {canvas}")));
    }
    let count = le_u32(bytes, 16)? as usize;
    let rec = Archive::record_len(canvas);
    let plane = canvas * canvas;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let at = HEADER_LEN + i * rec;
        let Some(r) = bytes.get(at..at + rec) else {
            return Err(PanError::format(
                bytes.len() as u64,
                format!("archive truncated inside record {i} of {count}"),
            ));
        };
        let tail = &r[plane * 4..];
        let s = Sample {
            image: r[..plane * 3].to_vec(),
            mask: r[plane * 3..plane * 4].to_vec(),
            query: tail[0],
            color_label: tail[1],
            scale: f32::from_le_bytes([tail[2], tail[3], tail[4], tail[5]]),
        };
        s.validate(canvas)
            .map_err(|e| PanError::format(at as u64, format!("record {i}: {e}")))?;
        samples.push(s);
    }
    let end = HEADER_LEN + count * rec;
    if bytes.len() != end {
        return Err(PanError::format(end as u64, "trailing bytes after the last record"));
    }
    Ok(Archive { canvas, samples })
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let bytes = encode_archive(archive)?;
    std::fs::write(path, bytes).map_err(|e| PanError::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| PanError::io(path, e))?;
    decode_archive(&bytes)
}
