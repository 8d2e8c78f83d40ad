//! Per-frame watermark bits, their sidecar encodings, and silence-masked
//! context waveforms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{io_err, Error, Result};
use crate::layout::{Span, SpanSet};

const SIDECAR_MAGIC: &[u8; 4] = b"WMB1";

/// One bit per codec frame; 1 marks a generated (edited) frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WatermarkSeq {
    bits: Vec<u8>,
}

impl WatermarkSeq {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(&b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidParameter(format!("watermark bit {b} is not 0 or 1")));
        }
        Ok(Self { bits })
    }

    pub fn zeros(frames: usize) -> Self {
        Self {
            bits: vec![0; frames],
        }
    }

    pub fn from_spans(spans: &SpanSet, frames: usize) -> Result<Self> {
        spans.check_within(frames)?;
        Ok(Self {
            bits: spans.indicator(frames).into_iter().map(u8::from).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Maximal runs of ones as inclusive frame spans.
    pub fn runs(&self) -> Vec<Span> {
        runs_of(self.bits.iter().map(|&b| b == 1))
    }

    /// `WMB1`, little-endian u32 frame count, then bits packed LSB-first.
    pub fn to_sidecar_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.bits.len().div_ceil(8));
        out.extend_from_slice(SIDECAR_MAGIC);
        out.extend_from_slice(&(self.bits.len() as u32).to_le_bytes());
        for chunk in self.bits.chunks(8) {
            out.push(chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b << i)));
        }
        out
    }

    pub fn from_sidecar_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != SIDECAR_MAGIC {
            return Err(Error::InvalidParameter("not a watermark sidecar".into()));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let payload = &bytes[8..];
        if payload.len() != n.div_ceil(8) {
            return Err(Error::LengthMismatch {
                what: "watermark sidecar payload bytes",
                left: payload.len(),
                right: n.div_ceil(8),
            });
        }
        let bits = (0..n).map(|i| (payload[i / 8] >> (i % 8)) & 1).collect();
        Ok(Self { bits })
    }

    pub fn save_sidecar(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_sidecar_bytes()).map_err(io_err(path))
    }

    pub fn load_sidecar(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_sidecar_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.bits).expect("bits serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }
}

pub fn runs_of(flags: impl IntoIterator<Item = bool>) -> Vec<Span> {
    let mut out = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, f) in flags.into_iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Span::new(s, i - 1));
                start = None;
            }
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        out.push(Span::new(s, n - 1));
    }
    out
}

/// The original waveform with the edited spans replaced by digital silence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedWaveform {
    pub samples: Vec<f32>,
    pub spans: SpanSet,
    pub sample_rate: u32,
}

impl MaskedWaveform {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn frames(&self, stride: usize) -> usize {
        self.samples.len() / stride
    }

    pub fn zeroed(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            spans: SpanSet::empty(),
            sample_rate,
        }
    }
}

/// Zeroes samples `[s·stride, (e+1)·stride)` for every span `(s, e)`.
pub fn build_masked_waveform(w: &Waveform, spans: &SpanSet, stride: usize) -> Result<MaskedWaveform> {
    spans.check_within(w.frames(stride))?;
    let mut samples = w.samples.clone();
    for s in spans.iter() {
        samples[s.start * stride..(s.end + 1) * stride].fill(0.0);
    }
    Ok(MaskedWaveform {
        samples,
        spans: spans.clone(),
        sample_rate: w.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| (i as f32 + 1.0) * 1e-4).collect(), 16000).unwrap()
    }

    #[test]
    fn empty_spans_is_identity() {
        let w = ramp(3200);
        let m = build_masked_waveform(&w, &SpanSet::empty(), 320).unwrap();
        assert_eq!(m.samples, w.samples);
    }

    #[test]
    fn full_span_silences_everything() {
        let w = ramp(3200);
        let m = build_masked_waveform(&w, &SpanSet::single(0, 9).unwrap(), 320).unwrap();
        assert!(m.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn span_window_is_exact() {
        let w = ramp(3200);
        let m = build_masked_waveform(&w, &SpanSet::single(2, 3).unwrap(), 320).unwrap();
        for (i, (&a, &b)) in m.samples.iter().zip(&w.samples).enumerate() {
            if (640..1280).contains(&i) {
                assert_eq!(a, 0.0, "sample {i}");
            } else {
                assert_eq!(a, b, "sample {i}");
            }
        }
    }

    #[test]
    fn span_past_end_rejected() {
        let w = ramp(3200);
        assert!(build_masked_waveform(&w, &SpanSet::single(8, 10).unwrap(), 320).is_err());
    }

    #[test]
    fn bits_from_spans() {
        let s = SpanSet::single(10, 19).unwrap();
        let wm = WatermarkSeq::from_spans(&s, 50).unwrap();
        assert_eq!(wm.ones(), 10);
        assert_eq!(wm.runs(), vec![Span::new(10, 19)]);
        assert_eq!(WatermarkSeq::from_spans(&SpanSet::empty(), 5).unwrap().ones(), 0);
    }

    #[test]
    fn sidecar_rejects_garbage() {
        assert!(WatermarkSeq::from_sidecar_bytes(b"nope").is_err());
        let mut bytes = WatermarkSeq::zeros(9).to_sidecar_bytes();
        bytes.pop();
        assert!(WatermarkSeq::from_sidecar_bytes(&bytes).is_err());
        assert!(WatermarkSeq::new(vec![0, 2]).is_err());
    }
}
