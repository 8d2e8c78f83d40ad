//! Manifests, alignment and lexicon files, and the procedural tone corpus.
//!
//! Synthetic symbols render as stationary harmonic tones whose fundamentals
//! are multiples of the codec frame rate, and every symbol, word and pause
//! starts on a frame boundary. Frames inside one symbol are therefore
//! sample-identical and word alignments are exact to the frame.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform};
use crate::error::{io_err, Error, Result};
use crate::planner::{AlignedWord, Lexicon, WordAlignment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub audio_path: String,
    pub transcript: String,
    #[serde(default)]
    pub alignment_path: Option<String>,
    pub duration: f64,
}

/// Accepted utterance durations, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationLimits {
    pub min: f64,
    pub max: f64,
}

impl Default for DurationLimits {
    fn default() -> Self {
        Self { min: 2.0, max: 15.0 }
    }
}

impl DurationLimits {
    pub fn accepts(&self, duration: f64) -> bool {
        duration >= self.min && duration <= self.max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory that relative paths in the entries resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn audio_path(&self, e: &ManifestEntry) -> PathBuf {
        self.resolve(&e.audio_path)
    }

    pub fn alignment_path(&self, e: &ManifestEntry) -> Option<PathBuf> {
        e.alignment_path.as_deref().map(|p| self.resolve(p))
    }

    pub fn filtered(&self, limits: &DurationLimits) -> Self {
        Self {
            root: self.root.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| limits.accepts(e.duration))
                .cloned()
                .collect(),
        }
    }
}

/// Reads a JSONL manifest. Blank lines are skipped; malformed lines are
/// reported with their 1-based line number.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(Manifest {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        entries,
    })
}

pub fn save_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::fs::File::create(path).map_err(io_err(path))?;
    for e in entries {
        writeln!(out, "{}", serde_json::to_string(e)?).map_err(io_err(path))?;
    }
    Ok(())
}

/// Loads an alignment as a JSON list of `{word, start, end}` or as CSV with a
/// `word,start,end` header.
pub fn load_alignment(path: impl AsRef<Path>) -> Result<WordAlignment> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.replace(' ', "") == "word,start,end" => {}
        _ => return Err(parse_err(1, "expected header word,start,end".into())),
    }
    let mut entries = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [word, start, end] = fields[..] else {
            return Err(parse_err(i + 1, format!("expected 3 fields, got {}", fields.len())));
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(i + 1, e.to_string()));
        entries.push(AlignedWord {
            word: word.to_string(),
            start: num(start)?,
            end: num(end)?,
        });
    }
    WordAlignment::new(entries)
}

pub fn save_alignment(path: impl AsRef<Path>, align: &WordAlignment) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serde_json::to_string_pretty(align)?).map_err(io_err(path))
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Lexicon> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Lexicon::parse_tsv(&text).map_err(|(line, reason)| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    })
}

pub fn save_lexicon(path: impl AsRef<Path>, lex: &Lexicon) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, lex.to_tsv()).map_err(io_err(path))
}

/// Acoustic recipe for one pseudo-phoneme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolRecipe {
    pub symbol: String,
    /// Fundamental in Hz; a multiple of the frame rate keeps frames identical.
    pub f0: f64,
    /// Relative amplitudes of harmonics 1, 2, ...
    pub harmonics: Vec<f64>,
    /// Inclusive range of frames per occurrence.
    pub min_frames: usize,
    pub max_frames: usize,
    #[serde(default)]
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub symbols: Vec<SymbolRecipe>,
    pub words: Vec<String>,
    pub sample_rate: u32,
    pub stride: usize,
    pub seed: u64,
    pub corpus_size: usize,
    /// Target utterance length range before clamping, in seconds.
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub pause_frames: (usize, usize),
    pub edge_frames: (usize, usize),
    pub amplitude: f64,
    pub limits: DurationLimits,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let table: [(&str, f64, &[f64]); 8] = [
            ("a", 150.0, &[1.0, 0.5, 0.3]),
            ("e", 200.0, &[1.0, 0.2, 0.6]),
            ("i", 250.0, &[1.0, 0.7]),
            ("o", 300.0, &[1.0, 0.1, 0.1, 0.4]),
            ("u", 350.0, &[1.0, 0.4]),
            ("m", 400.0, &[1.0]),
            ("n", 450.0, &[1.0, 0.3, 0.0, 0.2]),
            ("r", 500.0, &[1.0, 0.6, 0.2]),
        ];
        let symbols = table
            .iter()
            .map(|&(s, f0, h)| SymbolRecipe {
                symbol: s.to_string(),
                f0,
                harmonics: h.to_vec(),
                min_frames: 3,
                max_frames: 5,
                noise: 0.0,
            })
            .collect();
        let words = [
            "ma", "ne", "rio", "mou", "nai", "ire", "ome", "ram", "nui", "era", "amo", "uno",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Self {
            symbols,
            words,
            sample_rate: 16000,
            stride: 320,
            seed: 0,
            corpus_size: 24,
            min_seconds: 2.0,
            max_seconds: 3.0,
            pause_frames: (3, 6),
            edge_frames: (3, 8),
            amplitude: 0.5,
            limits: DurationLimits::default(),
        }
    }
}

impl SynthSpec {
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.stride as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.symbols.is_empty() || self.words.is_empty() || self.corpus_size == 0 {
            return bad("synthetic spec needs symbols, words and a non-zero corpus size".into());
        }
        if self.stride == 0 || self.sample_rate as usize % self.stride != 0 {
            return bad(format!("stride {} must divide the sample rate", self.stride));
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.symbols {
            if r.symbol.chars().count() != 1 {
                return bad(format!("symbol {:?} must be a single character", r.symbol));
            }
            if !seen.insert(r.symbol.clone()) {
                return bad(format!("duplicate symbol {:?}", r.symbol));
            }
            if r.min_frames == 0 || r.min_frames > r.max_frames || r.harmonics.is_empty() {
                return bad(format!("recipe for {:?} has an empty duration or harmonic range", r.symbol));
            }
        }
        for w in &self.words {
            if w.is_empty() || w.chars().any(|c| !seen.contains(&c.to_string())) {
                return bad(format!("word {w:?} uses symbols without a recipe"));
            }
        }
        if self.max_seconds < self.min_seconds || self.pause_frames.0 > self.pause_frames.1 || self.edge_frames.0 > self.edge_frames.1 {
            return bad("inverted range in synthetic spec".into());
        }
        Ok(())
    }

    fn recipe(&self, c: char) -> &SymbolRecipe {
        self.symbols
            .iter()
            .find(|r| r.symbol.starts_with(c))
            .expect("validated word symbols")
    }

    /// Lexicon mapping every pseudo-word to its characters.
    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon::new();
        for w in &self.words {
            lex.insert(w, w.chars().map(String::from).collect());
        }
        lex
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub transcript: String,
    pub waveform: Waveform,
    pub alignment: WordAlignment,
}

struct Render {
    stride: usize,
    sr: f64,
    amp: f64,
}

fn render_symbol(r: &SymbolRecipe, start: usize, len: usize, ctx: &Render, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let Render { stride, sr, amp } = *ctx;
    let norm: f64 = r.harmonics.iter().map(|h| h.abs()).sum::<f64>().max(1e-9);
    for n in start..start + len {
        let mut v: f64 = r
            .harmonics
            .iter()
            .enumerate()
            .map(|(h, &w)| {
                let f = r.f0 * (h + 1) as f64;
                // Reduce the sample index by the frame period when the partial
                // completes whole cycles per frame, so repeated frames are bit-identical.
                let cycles = f * stride as f64 / sr;
                let n = if (cycles - cycles.round()).abs() < 1e-9 { n % stride } else { n };
                w * (2.0 * std::f64::consts::PI * f * n as f64 / sr).sin()
            })
            .sum();
        v *= amp / norm;
        if r.noise > 0.0 {
            v += r.noise * (rng.gen::<f64>() * 2.0 - 1.0);
        }
        out.push(v as f32);
    }
}

/// Renders the whole corpus in memory; deterministic given `spec.seed`.
pub fn synthesize_corpus(spec: &SynthSpec) -> Result<Vec<SynthUtterance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let stride = spec.stride;
    let fr = spec.frame_rate();
    let ctx = Render {
        stride,
        sr: spec.sample_rate as f64,
        amp: spec.amplitude,
    };
    let min_frames = (spec.limits.min * fr).ceil() as usize;
    let max_frames = (spec.limits.max * fr).floor() as usize;

    let mut out = Vec::with_capacity(spec.corpus_size);
    for u in 0..spec.corpus_size {
        let target = rng.gen_range(spec.min_seconds..=spec.max_seconds);
        let target_frames = ((target * fr).round() as usize).clamp(min_frames, max_frames);
        let mut samples: Vec<f32> = Vec::new();
        let mut frame = rng.gen_range(spec.edge_frames.0..=spec.edge_frames.1);
        samples.resize(frame * stride, 0.0);
        let mut words = Vec::new();
        let mut aligned = Vec::new();
        loop {
            let word = &spec.words[rng.gen_range(0..spec.words.len())];
            let lens: Vec<usize> = word
                .chars()
                .map(|c| {
                    let r = spec.recipe(c);
                    rng.gen_range(r.min_frames..=r.max_frames)
                })
                .collect();
            let word_frames: usize = lens.iter().sum();
            let tail = spec.edge_frames.0;
            if !words.is_empty() && frame + word_frames + tail > max_frames {
                break;
            }
            let start = frame;
            for (c, len) in word.chars().zip(&lens) {
                render_symbol(spec.recipe(c), frame * stride, len * stride, &ctx, &mut rng, &mut samples);
                frame += len;
            }
            aligned.push(AlignedWord {
                word: word.clone(),
                start: start as f64 / fr,
                end: frame as f64 / fr,
            });
            words.push(word.clone());
            if frame + tail >= target_frames {
                break;
            }
            let pause = rng.gen_range(spec.pause_frames.0..=spec.pause_frames.1);
            frame += pause;
            samples.resize(frame * stride, 0.0);
        }
        let edge = rng.gen_range(spec.edge_frames.0..=spec.edge_frames.1);
        let total = (frame + edge).clamp(min_frames, max_frames.max(frame));
        samples.resize(total * stride, 0.0);
        out.push(SynthUtterance {
            id: format!("synth{u:04}"),
            transcript: words.join(" "),
            waveform: Waveform::new(samples, spec.sample_rate)?,
            alignment: WordAlignment::new(aligned)?,
        });
    }
    Ok(out)
}

/// Writes `wav/`, `align/`, `lexicon.tsv`, `spec.json` and `manifest.jsonl`
/// under `out_dir` and returns the manifest.
pub fn make_synthetic_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let utts = synthesize_corpus(spec)?;
    for sub in ["wav", "align"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let mut entries = Vec::with_capacity(utts.len());
    for u in &utts {
        let audio_path = format!("wav/{}.wav", u.id);
        let alignment_path = format!("align/{}.json", u.id);
        write_wav(out_dir.join(&audio_path), &u.waveform)?;
        save_alignment(out_dir.join(&alignment_path), &u.alignment)?;
        entries.push(ManifestEntry {
            id: u.id.clone(),
            audio_path,
            transcript: u.transcript.clone(),
            alignment_path: Some(alignment_path),
            duration: u.waveform.duration(),
        });
    }
    save_lexicon(out_dir.join("lexicon.tsv"), &spec.lexicon())?;
    let spec_path = out_dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(io_err(&spec_path))?;
    save_manifest(out_dir.join("manifest.jsonl"), &entries)?;
    Ok(Manifest {
        root: out_dir.to_path_buf(),
        entries,
    })
}
