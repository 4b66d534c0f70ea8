//! RIFF/WAVE PCM decoding and the mono channel views used by the monaural
//! and binaural feature pipelines.
//!
//! Only integer PCM at 16 or 24 bits with one or two channels is accepted.
//! Samples are scaled to `[-1, 1]` by dividing by `2^(bits-1)`.

use std::fmt;
use std::path::Path;

use thiserror::Error;

const WAVE_FORMAT_PCM: u16 = 0x0001;
const WAVE_FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WavError {
    #[error("malformed WAV header: {0}")]
    Malformed(String),
    #[error("unsupported WAV encoding: {0}")]
    Unsupported(String),
    #[error("truncated data chunk: header declares {declared} bytes, {available} available")]
    Truncated { declared: usize, available: usize },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("view {view} requires a stereo clip, got {channels} channel(s)")]
    NeedsStereo { view: ChannelView, channels: usize },
    #[error("i/o error: {0}")]
    Io(String),
}

/// Decoded multi-channel PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self, WavError> {
        if sample_rate == 0 {
            return Err(WavError::InvalidClip("sample rate must be positive".into()));
        }
        if !(1..=2).contains(&channels.len()) {
            return Err(WavError::InvalidClip(format!(
                "expected 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(WavError::InvalidClip("channels differ in length".into()));
        }
        if channels
            .iter()
            .flatten()
            .any(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(WavError::InvalidClip("samples must lie in [-1, 1]".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, idx: usize) -> &[f64] {
        &self.channels[idx]
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Which mono signal to derive from a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelView {
    Left,
    Right,
    Mid,
    Diff,
}

impl fmt::Display for ChannelView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ChannelView::Left => "left",
            ChannelView::Right => "right",
            ChannelView::Mid => "mid",
            ChannelView::Diff => "diff",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonoSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub view: ChannelView,
}

/// Derives a mono view. `Mid` of a mono clip is the clip itself; the other
/// views need two channels. `Diff` is left minus right.
pub fn channel_view(clip: &AudioClip, view: ChannelView) -> Result<MonoSignal, WavError> {
    let stereo = clip.num_channels() == 2;
    let samples = match (view, stereo) {
        (ChannelView::Mid, false) => clip.channels[0].clone(),
        (_, false) => {
            return Err(WavError::NeedsStereo {
                view,
                channels: clip.num_channels(),
            })
        }
        (ChannelView::Left, true) => clip.channels[0].clone(),
        (ChannelView::Right, true) => clip.channels[1].clone(),
        (ChannelView::Mid, true) => clip.channels[0]
            .iter()
            .zip(&clip.channels[1])
            .map(|(l, r)| (l + r) / 2.0)
            .collect(),
        (ChannelView::Diff, true) => clip.channels[0]
            .iter()
            .zip(&clip.channels[1])
            .map(|(l, r)| l - r)
            .collect(),
    };
    Ok(MonoSignal {
        samples,
        sample_rate: clip.sample_rate,
        view,
    })
}

struct FmtChunk {
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk, WavError> {
    if body.len() < 16 {
        return Err(WavError::Malformed(format!(
            "fmt chunk is {} bytes, need at least 16",
            body.len()
        )));
    }
    let mut format = le_u16(&body[0..2]);
    let channels = le_u16(&body[2..4]);
    let sample_rate = le_u32(&body[4..8]);
    let block_align = le_u16(&body[12..14]);
    let bits = le_u16(&body[14..16]);

    if format == WAVE_FORMAT_EXTENSIBLE {
        if body.len() < 40 {
            return Err(WavError::Malformed("truncated WAVE_FORMAT_EXTENSIBLE fmt chunk".into()));
        }
        // First two bytes of the sub-format GUID carry the actual format code.
        format = le_u16(&body[24..26]);
    }
    if format != WAVE_FORMAT_PCM {
        return Err(WavError::Unsupported(format!("format code {format:#06x} is not integer PCM")));
    }
    if bits != 16 && bits != 24 {
        return Err(WavError::Unsupported(format!("{bits}-bit samples")));
    }
    if !(1..=2).contains(&channels) {
        return Err(WavError::Unsupported(format!("{channels} channels")));
    }
    if sample_rate == 0 {
        return Err(WavError::Malformed("sample rate is zero".into()));
    }
    if usize::from(block_align) != usize::from(channels) * usize::from(bits / 8) {
        return Err(WavError::Malformed(format!(
            "block align {block_align} inconsistent with {channels} x {bits}-bit"
        )));
    }
    Ok(FmtChunk {
        channels,
        sample_rate,
        bits,
    })
}

/// Decodes a RIFF/WAVE byte stream. Unknown chunks are skipped.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, WavError> {
    if bytes.len() < 12 {
        return Err(WavError::Malformed("file shorter than RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(WavError::Malformed("missing RIFF id".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(WavError::Malformed("missing WAVE id".into()));
    }

    let mut pos = 12;
    let mut fmt: Option<FmtChunk> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        if id == b"fmt " {
            let end = body_start
                .checked_add(size)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| WavError::Malformed("fmt chunk overruns file".into()))?;
            fmt = Some(parse_fmt(&bytes[body_start..end])?);
        } else if id == b"data" {
            let fmt = fmt.ok_or_else(|| WavError::Malformed("data chunk before fmt chunk".into()))?;
            let available = bytes.len() - body_start;
            if size > available {
                return Err(WavError::Truncated {
                    declared: size,
                    available,
                });
            }
            return decode_pcm(&bytes[body_start..body_start + size], &fmt);
        }
        // Chunks are word aligned.
        pos = body_start.saturating_add(size).saturating_add(size & 1);
    }
    Err(WavError::Malformed(if fmt.is_none() {
        "no fmt chunk".into()
    } else {
        "no data chunk".into()
    }))
}

fn decode_pcm(data: &[u8], fmt: &FmtChunk) -> Result<AudioClip, WavError> {
    let n_ch = usize::from(fmt.channels);
    let width = usize::from(fmt.bits / 8);
    let frame = n_ch * width;
    if data.len() % frame != 0 {
        return Err(WavError::Truncated {
            declared: data.len(),
            available: data.len() - data.len() % frame,
        });
    }
    let n = data.len() / frame;
    let scale = 1.0 / f64::from(1u32 << (fmt.bits - 1));
    let mut channels = vec![Vec::with_capacity(n); n_ch];
    for chunk in data.chunks_exact(frame) {
        for (c, s) in chunk.chunks_exact(width).enumerate() {
            let v = match width {
                2 => i32::from(i16::from_le_bytes([s[0], s[1]])),
                // Place the three bytes in the top of an i32, then shift back
                // down arithmetically to sign-extend.
                _ => i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8,
            };
            channels[c].push(f64::from(v) * scale);
        }
    }
    AudioClip::new(channels, fmt.sample_rate)
}

pub fn read_wav(path: &Path) -> Result<AudioClip, WavError> {
    let bytes = std::fs::read(path).map_err(|e| WavError::Io(format!("{}: {e}", path.display())))?;
    decode_wav(&bytes)
}

/// Encodes a clip as integer PCM. Samples are rounded to the nearest
/// quantization step and clamped to the representable range.
pub fn encode_wav(clip: &AudioClip, bits: u16) -> Result<Vec<u8>, WavError> {
    if bits != 16 && bits != 24 {
        return Err(WavError::Unsupported(format!("{bits}-bit samples")));
    }
    let n_ch = clip.num_channels();
    let width = usize::from(bits / 8);
    let data_len = clip.len() * n_ch * width;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&WAVE_FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&(n_ch as u16).to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    let block_align = (n_ch * width) as u16;
    out.extend_from_slice(&(clip.sample_rate * u32::from(block_align)).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());

    let full = f64::from(1u32 << (bits - 1));
    let (lo, hi) = (-full, full - 1.0);
    for i in 0..clip.len() {
        for ch in &clip.channels {
            let q = (ch[i] * full).round().clamp(lo, hi) as i32;
            let b = q.to_le_bytes();
            out.extend_from_slice(&b[..width]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stereo(l: Vec<f64>, r: Vec<f64>) -> AudioClip {
        AudioClip::new(vec![l, r], 44100).unwrap()
    }

    fn header(format: u16, channels: u16, bits: u16, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + data.len()) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&44100u32.to_le_bytes());
        let align = channels * bits / 8;
        out.extend_from_slice(&(44100 * u32::from(align)).to_le_bytes());
        out.extend_from_slice(&align.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn decodes_24_bit_quarter_scale_sample() {
        // 0x400000 = 2^22, divided by 2^23.
        let clip = decode_wav(&header(1, 1, 24, &[0x00, 0x00, 0x40])).unwrap();
        assert_eq!(clip.channel(0), &[0.5]);
    }

    #[test]
    fn decodes_24_bit_negative_samples() {
        let clip = decode_wav(&header(1, 1, 24, &[0xff, 0xff, 0xff, 0x00, 0x00, 0x80])).unwrap();
        assert_eq!(clip.channel(0)[0], -1.0 / f64::from(1u32 << 23));
        assert_eq!(clip.channel(0)[1], -1.0);
    }

    #[test]
    fn silent_16_bit_mono_is_exactly_zero() {
        let clip = decode_wav(&header(1, 1, 16, &[0u8; 200])).unwrap();
        assert_eq!(clip.len(), 100);
        assert!(clip.channel(0).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn thirty_second_stereo_24_bit_clip_shape() {
        let n = 44100 * 30;
        let clip = decode_wav(&header(1, 2, 24, &vec![0u8; n * 6])).unwrap();
        assert_eq!(clip.num_channels(), 2);
        assert_eq!(clip.sample_rate(), 44100);
        assert_eq!(clip.len(), 1_323_000);
        assert!((clip.duration() - 30.0).abs() < 1e-12);
    }

    #[test]
    fn error_kinds_are_distinct() {
        assert!(matches!(decode_wav(b"RIFX\0\0\0\0WAVE"), Err(WavError::Malformed(_))));
        assert!(matches!(
            decode_wav(&header(3, 1, 32, &[0u8; 8])),
            Err(WavError::Unsupported(_))
        ));
        assert!(matches!(
            decode_wav(&header(1, 1, 8, &[0u8; 8])),
            Err(WavError::Unsupported(_))
        ));
        let mut bytes = header(1, 1, 16, &[0u8; 8]);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_wav(&bytes), Err(WavError::Truncated { .. })));
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = header(1, 1, 16, &[1, 0, 2, 0]);
        let mut with_list = plain[..36].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[9, 9, 9, 0]); // odd size plus pad byte
        with_list.extend_from_slice(&plain[36..]);
        assert_eq!(decode_wav(&with_list).unwrap(), decode_wav(&plain).unwrap());
    }

    #[test]
    fn extensible_pcm_is_accepted() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF\0\0\0\0WAVEfmt ");
        bytes.extend_from_slice(&40u32.to_le_bytes());
        bytes.extend_from_slice(&WAVE_FORMAT_EXTENSIBLE.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(&22u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let mut guid = [0u8; 16];
        guid[0] = 1;
        bytes.extend_from_slice(&guid);
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0x4000i16.to_le_bytes());
        let clip = decode_wav(&bytes).unwrap();
        assert_eq!(clip.sample_rate(), 8000);
        assert_eq!(clip.channel(0), &[0.5]);
    }

    #[test]
    fn channel_views() {
        let same = stereo(vec![0.1, -0.3], vec![0.1, -0.3]);
        assert!(channel_view(&same, ChannelView::Diff)
            .unwrap()
            .samples
            .iter()
            .all(|&s| s == 0.0));

        let c = stereo(vec![1.0, 0.0], vec![0.0, 1.0]);
        assert_eq!(channel_view(&c, ChannelView::Mid).unwrap().samples, vec![0.5, 0.5]);

        let c = stereo(vec![0.2], vec![-0.4]);
        let d = channel_view(&c, ChannelView::Diff).unwrap().samples;
        assert!((d[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn stereo_views_rejected_on_mono() {
        let mono = AudioClip::new(vec![vec![0.0; 4]], 16000).unwrap();
        assert!(channel_view(&mono, ChannelView::Mid).is_ok());
        for view in [ChannelView::Left, ChannelView::Right, ChannelView::Diff] {
            assert!(matches!(
                channel_view(&mono, view),
                Err(WavError::NeedsStereo { .. })
            ));
        }
    }

    #[test]
    fn mid_and_diff_reconstruct_channels() {
        // PCM-grid values, as produced by the decoder.
        let l: Vec<f64> = (0..64).map(|i| f64::from(i * 977 % 65536 - 32768) / 32768.0).collect();
        let r: Vec<f64> = (0..64).map(|i| f64::from(i * 1553 % 65536 - 32768) / 32768.0).collect();
        let c = stereo(l.clone(), r.clone());
        let mid = channel_view(&c, ChannelView::Mid).unwrap().samples;
        let diff = channel_view(&c, ChannelView::Diff).unwrap().samples;
        for i in 0..64 {
            assert_eq!(mid[i] + diff[i] / 2.0, l[i]);
            assert_eq!(mid[i] - diff[i] / 2.0, r[i]);
        }
    }
}
