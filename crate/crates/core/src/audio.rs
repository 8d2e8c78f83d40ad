//! Mono waveforms and 16-bit PCM WAV IO.

use std::path::Path;

use crate::error::{wav_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Scales so the peak magnitude equals `target`; silent input is returned unchanged.
    pub fn peak_normalized(&self, target: f32) -> Self {
        let peak = self.peak();
        if peak == 0.0 {
            return self.clone();
        }
        let g = target / peak;
        Self {
            samples: self.samples.iter().map(|s| s * g).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Frame count for a codec stride: `floor(len / stride)`.
    pub fn frames(&self, stride: usize) -> usize {
        self.samples.len() / stride
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Reads a 16-bit PCM mono WAV, requiring `expected_rate` when given.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let unsupported = |reason: String| Error::UnsupportedAudio {
        path: path.to_path_buf(),
        reason,
    };
    if spec.channels != 1 {
        return Err(unsupported(format!("{} channels (mono required)", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(unsupported(format!(
            "{:?} {}-bit samples (16-bit PCM required)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(Error::SampleRateMismatch {
                expected: rate,
                found: spec.sample_rate,
            });
        }
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err(path))?;
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err(path))?;
    for &s in &w.samples {
        writer
            .write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)
            .map_err(wav_err(path))?;
    }
    writer.finalize().map_err(wav_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..1000).map(|i| ((i as f32) * 0.01).sin() * 0.7).collect(), 16000).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path, Some(16000)).unwrap();
        assert_eq!(back.len(), w.len());
        for (a, b) in back.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-7);
        }
        assert!(matches!(
            read_wav(&path, Some(8000)),
            Err(Error::SampleRateMismatch { .. })
        ));
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..20 {
            wr.write_sample(0i16).unwrap();
        }
        wr.finalize().unwrap();
        assert!(matches!(
            read_wav(&path, None),
            Err(Error::UnsupportedAudio { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Waveform::new(vec![0.0, f32::NAN], 16000).is_err());
    }

    #[test]
    fn peak_normalization() {
        let w = Waveform::new(vec![0.1, -0.5, 0.25], 16000).unwrap();
        let n = w.peak_normalized(0.95);
        assert!((n.peak() - 0.95).abs() < 1e-6);
        assert_eq!(Waveform::silence(4, 16000).peak_normalized(0.95).peak(), 0.0);
    }
}
