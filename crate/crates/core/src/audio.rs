//! WAV ingestion and fixed one-second segmentation.
//!
//! Only RIFF/WAVE PCM16 mono at 16 kHz is accepted. Other rates and channel
//! layouts are rejected rather than converted so the device-side pipeline
//! stays deterministic. Chunks other than `fmt ` and `data` are skipped.

use std::io::{self, Read};

use thiserror::Error;

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE_HZ: u32 = 16_000;

/// Samples in one inference segment (one second at 16 kHz).
pub const SEGMENT_LEN: usize = SAMPLE_RATE_HZ as usize;

const PCM_FORMAT: u16 = 1;
const PCM_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("malformed WAV: {0}")]
    Malformed(String),
    #[error(
        "unsupported WAV format: format code {format_code}, {channels} channel(s), \
         {sample_rate_hz} Hz, {bits_per_sample}-bit (need PCM, mono, 16000 Hz, 16-bit)"
    )]
    UnsupportedFormat {
        format_code: u16,
        channels: u16,
        sample_rate_hz: u32,
        bits_per_sample: u16,
    },
    #[error("audio stream is empty")]
    EmptyStream,
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// A decoded mono stream with amplitudes normalized to [-1.0, 1.0].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioStream {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub channel_count: u16,
}

impl AudioStream {
    /// Wraps already-normalized 16 kHz mono samples, clamping to [-1, 1].
    pub fn from_samples(samples: Vec<f64>) -> Self {
        Self {
            samples: samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect(),
            sample_rate_hz: SAMPLE_RATE_HZ,
            channel_count: 1,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }
}

/// Exactly one second of audio. The last `padded_sample_count` samples are
/// zero fill added after the end of the source stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    samples: Vec<f64>,
    pub index: usize,
    pub start_time_s: f64,
    pub padded_sample_count: usize,
}

impl AudioSegment {
    /// Builds segment `index` from up to [`SEGMENT_LEN`] real samples,
    /// zero-padding the tail.
    ///
    /// # Panics
    /// If `real` holds more than [`SEGMENT_LEN`] samples.
    pub fn new(index: usize, real: &[f64]) -> Self {
        assert!(real.len() <= SEGMENT_LEN, "segment overflow: {} samples", real.len());
        let mut samples = Vec::with_capacity(SEGMENT_LEN);
        samples.extend_from_slice(real);
        let padded_sample_count = SEGMENT_LEN - real.len();
        samples.resize(SEGMENT_LEN, 0.0);
        Self {
            samples,
            index,
            start_time_s: index as f64,
            padded_sample_count,
        }
    }

    #[cfg(test)]
    pub(crate) fn raw(samples: Vec<f64>) -> Self {
        Self { samples, index: 0, start_time_s: 0.0, padded_sample_count: 0 }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Samples that came from the source stream (padding excluded).
    pub fn real_samples(&self) -> &[f64] {
        &self.samples[..SEGMENT_LEN - self.padded_sample_count]
    }

    /// Returns a copy with the same timing metadata and new sample values.
    /// Padding positions are forced back to zero.
    pub fn with_samples(&self, mut samples: Vec<f64>) -> Self {
        assert_eq!(samples.len(), SEGMENT_LEN);
        for s in &mut samples[SEGMENT_LEN - self.padded_sample_count..] {
            *s = 0.0;
        }
        Self {
            samples,
            index: self.index,
            start_time_s: self.start_time_s,
            padded_sample_count: self.padded_sample_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FmtChunk {
    format_code: u16,
    channels: u16,
    sample_rate_hz: u32,
    bits_per_sample: u16,
}

impl FmtChunk {
    fn check(self) -> Result<(), WavError> {
        if self.format_code != PCM_FORMAT
            || self.channels != 1
            || self.sample_rate_hz != SAMPLE_RATE_HZ
            || self.bits_per_sample != 16
        {
            return Err(WavError::UnsupportedFormat {
                format_code: self.format_code,
                channels: self.channels,
                sample_rate_hz: self.sample_rate_hz,
                bits_per_sample: self.bits_per_sample,
            });
        }
        Ok(())
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), WavError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WavError::Malformed(format!("truncated {what}")),
        _ => WavError::Io(e),
    })
}

fn skip<R: Read>(r: &mut R, n: u64, what: &str) -> Result<(), WavError> {
    let copied = io::copy(&mut r.take(n), &mut io::sink())?;
    if copied != n {
        return Err(WavError::Malformed(format!("truncated {what}")));
    }
    Ok(())
}

/// Reads the RIFF header and walks chunks up to the start of `data`.
/// Returns the data chunk's declared byte length.
fn read_header<R: Read>(r: &mut R) -> Result<u32, WavError> {
    let mut riff = [0u8; 12];
    read_exact_or(r, &mut riff, "RIFF header")?;
    if &riff[0..4] != b"RIFF" || &riff[8..12] != b"WAVE" {
        return Err(WavError::Malformed("missing RIFF/WAVE signature".into()));
    }

    let mut fmt: Option<FmtChunk> = None;
    loop {
        let mut head = [0u8; 8];
        read_exact_or(r, &mut head, "chunk header")?;
        let id = [head[0], head[1], head[2], head[3]];
        let len = u32::from_le_bytes([head[4], head[5], head[6], head[7]]);
        match &id {
            b"fmt " => {
                if len < 16 {
                    return Err(WavError::Malformed(format!("fmt chunk too short ({len} bytes)")));
                }
                let mut body = [0u8; 16];
                read_exact_or(r, &mut body, "fmt chunk")?;
                let chunk = FmtChunk {
                    format_code: u16::from_le_bytes([body[0], body[1]]),
                    channels: u16::from_le_bytes([body[2], body[3]]),
                    sample_rate_hz: u32::from_le_bytes([body[4], body[5], body[6], body[7]]),
                    bits_per_sample: u16::from_le_bytes([body[14], body[15]]),
                };
                chunk.check()?;
                fmt = Some(chunk);
                skip(r, u64::from(len - 16) + u64::from(len & 1), "fmt chunk")?;
            }
            b"data" => {
                if fmt.is_none() {
                    return Err(WavError::Malformed("data chunk precedes fmt chunk".into()));
                }
                if len % 2 != 0 {
                    return Err(WavError::Malformed(format!(
                        "data chunk length {len} is not a whole number of 16-bit samples"
                    )));
                }
                return Ok(len);
            }
            _ => skip(r, u64::from(len) + u64::from(len & 1), "chunk")?,
        }
    }
}

/// Incremental reader that yields one [`AudioSegment`] at a time, keeping at
/// most one segment of samples resident.
pub struct SegmentReader<R> {
    inner: R,
    remaining_bytes: u64,
    next_index: usize,
    buf: Vec<u8>,
    done: bool,
}

impl<R: Read> SegmentReader<R> {
    pub fn new(mut inner: R) -> Result<Self, WavError> {
        let data_len = read_header(&mut inner)?;
        if data_len == 0 {
            return Err(WavError::EmptyStream);
        }
        Ok(Self {
            inner,
            remaining_bytes: u64::from(data_len),
            next_index: 0,
            buf: vec![0u8; SEGMENT_LEN * 2],
            done: false,
        })
    }

    fn read_segment(&mut self) -> Result<AudioSegment, WavError> {
        let want = (self.remaining_bytes as usize).min(SEGMENT_LEN * 2);
        read_exact_or(&mut self.inner, &mut self.buf[..want], "data chunk")?;
        self.remaining_bytes -= want as u64;
        let real: Vec<f64> = self.buf[..want]
            .chunks_exact(2)
            .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / PCM_SCALE)
            .collect();
        let seg = AudioSegment::new(self.next_index, &real);
        self.next_index += 1;
        Ok(seg)
    }
}

impl<R: Read> Iterator for SegmentReader<R> {
    type Item = Result<AudioSegment, WavError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done || self.remaining_bytes == 0 {
            return None;
        }
        let out = self.read_segment();
        if out.is_err() {
            self.done = true;
        }
        Some(out)
    }
}

/// Decodes a complete WAV file held in memory.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioStream, WavError> {
    let mut cursor = bytes;
    let data_len = read_header(&mut cursor)? as usize;
    if cursor.len() < data_len {
        return Err(WavError::Malformed(format!(
            "data chunk declares {data_len} bytes but only {} remain",
            cursor.len()
        )));
    }
    let samples = cursor[..data_len]
        .chunks_exact(2)
        .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / PCM_SCALE)
        .collect();
    Ok(AudioStream {
        samples,
        sample_rate_hz: SAMPLE_RATE_HZ,
        channel_count: 1,
    })
}

/// Encodes samples as a 16 kHz mono PCM16 WAV. Values are scaled by 32768,
/// rounded and saturated to the i16 range, so any stream produced by
/// [`parse_wav`] round-trips bit-exactly.
pub fn encode_wav(samples: &[f64]) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE_HZ.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE_HZ * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s * PCM_SCALE).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Tiles the stream into back-to-back one-second segments, zero-padding the
/// final one.
pub fn segment(stream: &AudioStream) -> Result<Vec<AudioSegment>, WavError> {
    if stream.samples.is_empty() {
        return Err(WavError::EmptyStream);
    }
    Ok(stream
        .samples
        .chunks(SEGMENT_LEN)
        .enumerate()
        .map(|(i, chunk)| AudioSegment::new(i, chunk))
        .collect())
}
