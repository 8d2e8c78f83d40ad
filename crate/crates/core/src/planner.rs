//! Edit planning: word-level transcript diff, alignment-driven frame spans with
//! a co-articulation margin, and transcript phonemization.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Span, SpanSet};

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedWord {
    pub word: String,
    pub start: f64,
    pub end: f64,
}

/// Word-level forced alignment of the original transcript, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AlignedWord>", into = "Vec<AlignedWord>")]
pub struct WordAlignment {
    entries: Vec<AlignedWord>,
}

impl TryFrom<Vec<AlignedWord>> for WordAlignment {
    type Error = Error;

    fn try_from(entries: Vec<AlignedWord>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<WordAlignment> for Vec<AlignedWord> {
    fn from(a: WordAlignment) -> Self {
        a.entries
    }
}

impl WordAlignment {
    pub fn new(entries: Vec<AlignedWord>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if !(e.start.is_finite() && e.end.is_finite()) || e.start < 0.0 || e.start >= e.end {
                return Err(Error::InvalidAlignment(format!(
                    "entry {i} ({:?}) needs 0 <= start < end, got {}..{}",
                    e.word, e.start, e.end
                )));
            }
            if i > 0 && e.start < entries[i - 1].end {
                return Err(Error::InvalidAlignment(format!(
                    "entry {i} ({:?}) overlaps the previous word",
                    e.word
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[AlignedWord] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks the aligned words spell out `transcript` (after lowercase folding).
    pub fn check_matches(&self, transcript: &str) -> Result<()> {
        let words = tokenize(transcript);
        if words.len() != self.entries.len() {
            return Err(Error::InvalidAlignment(format!(
                "{} aligned words for a {}-word transcript",
                self.entries.len(),
                words.len()
            )));
        }
        for (i, (w, e)) in words.iter().zip(&self.entries).enumerate() {
            if *w != e.word.to_lowercase() {
                return Err(Error::InvalidAlignment(format!(
                    "word {i}: alignment has {:?}, transcript has {w:?}",
                    e.word
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Insert,
    Delete,
    Substitute,
}

/// One contiguous edit block. Ranges are half-open word indices; an insertion
/// has an empty `orig` range positioned at the gap it fills.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOp {
    pub kind: EditKind,
    pub orig: Range<usize>,
    pub target: Range<usize>,
}

impl EditOp {
    /// Primitive edit count of the block (it contains no matched words).
    pub fn cost(&self) -> usize {
        self.orig.len().max(self.target.len())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOpList {
    pub ops: Vec<EditOp>,
}

impl EditOpList {
    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn cost(&self) -> usize {
        self.ops.iter().map(EditOp::cost).sum()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Step {
    Match,
    Sub,
    Del,
    Ins,
}

/// Minimal word-level edit script with unit costs. Backtracking from the end
/// prefers the diagonal, so substitutions win over insert+delete pairs and
/// unavoidable insertions/deletions land on the leftmost candidate.
pub fn diff_transcripts<S: AsRef<str>>(orig: &[S], target: &[S]) -> EditOpList {
    let (n, m) = (orig.len(), target.len());
    let mut dist = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dist[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = orig[i - 1].as_ref() == target[j - 1].as_ref();
            let diag = dist[i - 1][j - 1] + usize::from(!same);
            dist[i][j] = diag.min(dist[i - 1][j] + 1).min(dist[i][j - 1] + 1);
        }
    }

    let mut steps = Vec::with_capacity(n + m);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = orig[i - 1].as_ref() == target[j - 1].as_ref();
            if dist[i][j] == dist[i - 1][j - 1] + usize::from(!same) {
                steps.push(if same { Step::Match } else { Step::Sub });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dist[i][j] == dist[i - 1][j] + 1 {
            steps.push(Step::Del);
            i -= 1;
        } else {
            steps.push(Step::Ins);
            j -= 1;
        }
    }
    steps.reverse();

    let mut ops = Vec::new();
    let (mut i, mut j) = (0, 0);
    let mut open: Option<(usize, usize)> = None;
    let close = |open: &mut Option<(usize, usize)>, ops: &mut Vec<EditOp>, i: usize, j: usize| {
        if let Some((i0, j0)) = open.take() {
            let kind = match (i > i0, j > j0) {
                (true, true) => EditKind::Substitute,
                (true, false) => EditKind::Delete,
                _ => EditKind::Insert,
            };
            ops.push(EditOp {
                kind,
                orig: i0..i,
                target: j0..j,
            });
        }
    };
    for step in steps {
        if step == Step::Match {
            close(&mut open, &mut ops, i, j);
        } else {
            open.get_or_insert((i, j));
        }
        match step {
            Step::Match | Step::Sub => {
                i += 1;
                j += 1;
            }
            Step::Del => i += 1,
            Step::Ins => j += 1,
        }
    }
    close(&mut open, &mut ops, i, j);
    EditOpList { ops }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditParams {
    /// Margin added on each side of an edited region, in seconds.
    pub alpha: f64,
    pub frame_rate: f64,
    pub max_spans: usize,
}

impl Default for EditParams {
    fn default() -> Self {
        Self {
            alpha: 0.12,
            frame_rate: 50.0,
            max_spans: 3,
        }
    }
}

/// Snaps values within 1e-6 of an integer so decimal second boundaries such as
/// 0.92 s · 50 Hz land on frame 46 rather than 46.000000000000007.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-6 {
        r
    } else {
        x
    }
}

/// Seconds interval → inclusive frame span, rounded outward and clamped.
pub fn seconds_to_frames(start: f64, end: f64, frame_rate: f64, frames: usize) -> Span {
    let last = frames.saturating_sub(1) as f64;
    let s = snap(start * frame_rate).floor().clamp(0.0, last) as usize;
    let e = (snap(end * frame_rate).ceil() - 1.0).clamp(0.0, last) as usize;
    Span::new(s, e.max(s))
}

/// Maps each edit block to a frame span widened by `alpha` on both sides,
/// merging spans that overlap or touch.
pub fn plan_spans(
    align: &WordAlignment,
    ops: &EditOpList,
    p: &EditParams,
    frames: usize,
) -> Result<SpanSet> {
    if p.alpha < 0.0 || !p.alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {}", p.alpha)));
    }
    if frames == 0 {
        return Err(Error::TooFewFrames {
            frames,
            reason: "cannot plan spans over an empty utterance",
        });
    }
    let words = align.entries();
    let word = |i: usize| words.get(i).ok_or(Error::MissingAlignment { index: i });
    let duration = frames as f64 / p.frame_rate;

    let mut spans = Vec::with_capacity(ops.ops.len());
    for op in &ops.ops {
        let (start, end) = if op.orig.is_empty() {
            let gap = op.orig.start;
            if gap > words.len() {
                return Err(Error::MissingAlignment { index: gap });
            }
            let left = if gap == 0 { 0.0 } else { word(gap - 1)?.end };
            let right = if gap == words.len() {
                duration.max(left)
            } else {
                word(gap)?.start
            };
            let anchor = if gap == 0 {
                0.0
            } else if gap == words.len() {
                duration.max(left)
            } else {
                0.5 * (left + right)
            };
            (anchor, anchor)
        } else {
            (word(op.orig.start)?.start, word(op.orig.end - 1)?.end)
        };
        spans.push(seconds_to_frames(
            start - p.alpha,
            end + p.alpha,
            p.frame_rate,
            frames,
        ));
    }
    let set = SpanSet::merged(spans)?;
    if set.len() > p.max_spans {
        return Err(Error::TooManySpans {
            found: set.len(),
            max: p.max_spans,
        });
    }
    Ok(set)
}

/// Word → phoneme symbols. Loaded from `word<TAB>sym sym ...` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: &str, symbols: Vec<String>) {
        self.entries.insert(word.to_lowercase(), symbols);
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.entries.iter()
    }

    pub fn parse_tsv(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut lex = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, syms) = line
                .split_once('\t')
                .ok_or((i + 1, "expected word<TAB>symbols".to_string()))?;
            let symbols: Vec<String> = syms.split_whitespace().map(str::to_string).collect();
            if word.trim().is_empty() || symbols.is_empty() {
                return Err((i + 1, "empty word or symbol list".into()));
            }
            lex.insert(word.trim(), symbols);
        }
        Ok(lex)
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|(w, s)| format!("{w}\t{}\n", s.join(" ")))
            .collect()
    }
}

pub const PAD_SYMBOL: &str = "<pad>";
pub const BOUNDARY_SYMBOL: &str = "|";
pub const UNKNOWN_SYMBOL: &str = "<unk>";
const RESERVED: u32 = 3;

/// Phoneme symbol table. Id 0 is padding and never appears in sequences; id 1
/// is the word boundary; id 2 stands for characters outside the table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
}

impl PhonemeInventory {
    /// Reserved symbols, then every lexicon symbol in sorted order.
    pub fn from_lexicon(lex: &Lexicon) -> Self {
        let mut symbols: Vec<String> = [PAD_SYMBOL, BOUNDARY_SYMBOL, UNKNOWN_SYMBOL]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let known: BTreeSet<String> = symbols.iter().cloned().collect();
        let extra: BTreeSet<&String> = lex
            .iter()
            .flat_map(|(_, s)| s.iter())
            .filter(|s| !known.contains(*s))
            .collect();
        symbols.extend(extra.into_iter().cloned());
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.symbols.iter().position(|s| s == symbol).map(|i| i as u32)
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn boundary(&self) -> u32 {
        1
    }

    pub fn unknown(&self) -> u32 {
        2
    }

    /// Ids usable inside a phoneme sequence (everything except padding).
    pub fn regular_ids(&self) -> Range<u32> {
        1..self.symbols.len() as u32
    }

    /// Ids of the lexicon's phonemes, excluding boundary and unknown.
    pub fn phoneme_ids(&self) -> Range<u32> {
        RESERVED..self.symbols.len() as u32
    }
}

/// Phoneme-token conditioning sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSeq {
    pub ids: Vec<u32>,
}

impl PhonemeSeq {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("phoneme sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                what: "phoneme",
                token: bad,
                limit: vocab_size as u32,
            });
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn word_phonemes(word: &str, lexicon: &Lexicon, inv: &PhonemeInventory, out: &mut Vec<u32>) {
    match lexicon.get(word) {
        Some(symbols) => out.extend(symbols.iter().map(|s| inv.id(s).unwrap_or(inv.unknown()))),
        None => out.extend(word.chars().map(|c| {
            let mut buf = [0u8; 4];
            inv.id(c.encode_utf8(&mut buf)).unwrap_or(inv.unknown())
        })),
    }
}

/// Lexicon lookup per word, falling back to per-character symbols for
/// unlisted words; boundary symbol between words.
pub fn build_target_phonemes(
    transcript: &str,
    lexicon: &Lexicon,
    inv: &PhonemeInventory,
) -> Result<PhonemeSeq> {
    let words = tokenize(transcript);
    if words.is_empty() {
        return Err(Error::Empty("transcript"));
    }
    let mut ids = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            ids.push(inv.boundary());
        }
        word_phonemes(w, lexicon, inv, &mut ids);
    }
    PhonemeSeq::new(ids, inv.len())
}
