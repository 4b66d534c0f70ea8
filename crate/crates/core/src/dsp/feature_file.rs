//! Binary feature file: `"SKF1"`, u32 dim, u32 frame count, f32 frame period,
//! u8 kind tag, then row-major little-endian f32 frames.

use std::io::Cursor;

use super::{DspError, FeatureKind, FeatureSequence};
use crate::binio::*;

pub const FEATURE_MAGIC: &[u8; 4] = b"SKF1";

pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 4 * seq.as_slice().len());
    out.extend_from_slice(FEATURE_MAGIC);
    // Writes into a Vec cannot fail.
    write_u32(&mut out, seq.dim() as u32).unwrap();
    write_u32(&mut out, seq.num_frames() as u32).unwrap();
    write_f32(&mut out, seq.frame_period()).unwrap();
    write_u8(&mut out, seq.kind().tag()).unwrap();
    write_f32s(&mut out, seq.as_slice()).unwrap();
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence, DspError> {
    let fmt = |e: std::io::Error| DspError::Format(e.to_string());
    let mut r = Cursor::new(bytes);
    expect_magic(&mut r, FEATURE_MAGIC).map_err(fmt)?;
    let dim = read_u32(&mut r).map_err(fmt)? as usize;
    let frames = read_u32(&mut r).map_err(fmt)? as usize;
    let period = read_f32(&mut r).map_err(fmt)?;
    let tag = read_u8(&mut r).map_err(fmt)?;
    let kind = FeatureKind::from_tag(tag).ok_or_else(|| DspError::Format(format!("unknown kind tag {tag}")))?;
    let n = dim
        .checked_mul(frames)
        .filter(|&n| n.saturating_mul(4) == bytes.len() - 17)
        .ok_or_else(|| {
            DspError::Format(format!(
                "payload of {} bytes does not hold {frames} x {dim} floats",
                bytes.len() - 17
            ))
        })?;
    let data = read_f32s(&mut r, n).map_err(fmt)?;
    FeatureSequence::new(kind, dim, period, data)
}
