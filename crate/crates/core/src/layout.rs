//! Span sets, the rearranged context-then-spans token layout, delayed stacking
//! of codebook channels, and training loss masks.
//!
//! A rearranged sequence for codes `a_0..a_{T-1}` and spans `M_1..M_P` reads
//!
//! ```text
//! [sos] C_0 [m_1] C_1 ... [m_P] C_P [eos] [m_1] M_1 [eog] ... [m_P] M_P [eog]
//! ```
//!
//! where `C_p` are the context segments between spans. Special tokens occupy
//! every channel with the same id so the delayed grid stays rectangular.

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CodeGrid, TokenGrid};

/// Ids of the layout markers. They start right after the codec vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialVocab {
    pub codebook_size: u32,
    pub max_spans: u32,
}

impl SpecialVocab {
    pub fn new(codebook_size: u32, max_spans: u32) -> Self {
        assert!(max_spans >= 1, "at least one mask marker is required");
        Self {
            codebook_size,
            max_spans,
        }
    }

    pub fn sos(&self) -> u32 {
        self.codebook_size
    }

    pub fn eos(&self) -> u32 {
        self.codebook_size + 1
    }

    pub fn eog(&self) -> u32 {
        self.codebook_size + 2
    }

    /// Mask marker `[m_p]`, with `p` counted from 1.
    pub fn mask(&self, p: usize) -> u32 {
        assert!(
            p >= 1 && p as u32 <= self.max_spans,
            "mask marker {p} outside 1..={}",
            self.max_spans
        );
        self.codebook_size + 3 + (p as u32 - 1)
    }

    pub fn pad(&self) -> u32 {
        self.codebook_size + 3 + self.max_spans
    }

    /// Token vocabulary per channel: codes, sos/eos/eog, mask markers and the delay pad.
    pub fn vocab_size(&self) -> usize {
        (self.codebook_size + 3 + self.max_spans + 1) as usize
    }

    pub fn is_code(&self, id: u32) -> bool {
        id < self.codebook_size
    }

    /// Returns `p` (1-based) when `id` is a mask marker.
    pub fn mask_index(&self, id: u32) -> Option<usize> {
        let first = self.codebook_size + 3;
        (id >= first && id < first + self.max_spans).then(|| (id - first + 1) as usize)
    }
}

/// Inclusive frame range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> Range<usize> {
        self.start..self.end + 1
    }
}

/// Sorted, disjoint, non-adjacent frame spans.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Span>", into = "Vec<Span>")]
pub struct SpanSet {
    spans: Vec<Span>,
}

impl TryFrom<Vec<Span>> for SpanSet {
    type Error = Error;

    fn try_from(spans: Vec<Span>) -> Result<Self> {
        Self::new(spans)
    }
}

impl From<SpanSet> for Vec<Span> {
    fn from(s: SpanSet) -> Self {
        s.spans
    }
}

impl SpanSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(spans: Vec<Span>) -> Result<Self> {
        for (i, s) in spans.iter().enumerate() {
            if s.start > s.end {
                return Err(Error::InvalidSpans(format!(
                    "span {i} has start {} after end {}",
                    s.start, s.end
                )));
            }
            if i > 0 && s.start <= spans[i - 1].end + 1 {
                return Err(Error::InvalidSpans(format!(
                    "span {i} ({}..={}) overlaps, touches or precedes span {} ({}..={})",
                    s.start,
                    s.end,
                    i - 1,
                    spans[i - 1].start,
                    spans[i - 1].end
                )));
            }
        }
        Ok(Self { spans })
    }

    /// Builds a set from arbitrary spans, merging overlapping and adjacent ones.
    pub fn merged(spans: impl IntoIterator<Item = Span>) -> Result<Self> {
        let mut spans: Vec<Span> = spans.into_iter().collect();
        if let Some(s) = spans.iter().find(|s| s.start > s.end) {
            return Err(Error::InvalidSpans(format!(
                "span has start {} after end {}",
                s.start, s.end
            )));
        }
        spans.sort();
        let mut out: Vec<Span> = Vec::with_capacity(spans.len());
        for s in spans {
            match out.last_mut() {
                Some(last) if s.start <= last.end + 1 => last.end = last.end.max(s.end),
                _ => out.push(s),
            }
        }
        Ok(Self { spans: out })
    }

    pub fn single(start: usize, end: usize) -> Result<Self> {
        Self::new(vec![Span::new(start, end)])
    }

    /// Checks every span lies inside `0..frames`.
    pub fn check_within(&self, frames: usize) -> Result<()> {
        match self.spans.last() {
            Some(last) if last.end >= frames => Err(Error::InvalidSpans(format!(
                "span end {} outside {frames} frames",
                last.end
            ))),
            _ => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Span> {
        self.spans.iter()
    }

    pub fn total_frames(&self) -> usize {
        self.spans.iter().map(Span::len).sum()
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.spans.iter().any(|s| s.start <= frame && frame <= s.end)
    }

    /// The `P + 1` context segments around the spans (some possibly empty).
    pub fn context_segments(&self, frames: usize) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.spans.len() + 1);
        let mut cursor = 0;
        for s in &self.spans {
            out.push(cursor..s.start);
            cursor = s.end + 1;
        }
        out.push(cursor..frames.max(cursor));
        out
    }

    /// Per-frame indicator of span membership.
    pub fn indicator(&self, frames: usize) -> Vec<bool> {
        let mut bits = vec![false; frames];
        for s in &self.spans {
            for b in &mut bits[s.start..=s.end.min(frames.saturating_sub(1))] {
                *b = true;
            }
        }
        bits
    }
}

/// Draws training spans: `P ~ Uniform{1..max_spans}` disjoint spans whose total
/// length never exceeds `max_mask_ratio · T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanSampler {
    pub max_spans: usize,
    pub max_mask_ratio: f64,
}

impl Default for SpanSampler {
    fn default() -> Self {
        Self {
            max_spans: 3,
            max_mask_ratio: 0.9,
        }
    }
}

pub const MIN_SAMPLING_FRAMES: usize = 10;

impl SpanSampler {
    pub fn sample<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> Result<SpanSet> {
        if frames < MIN_SAMPLING_FRAMES {
            return Err(Error::TooFewFrames {
                frames,
                reason: "span sampling needs at least 10 frames",
            });
        }
        let count = rng.gen_range(1..=self.max_spans);
        // Spans need a one-frame gap between them.
        let ratio_cap = (self.max_mask_ratio * frames as f64).floor() as usize;
        let cap = ratio_cap.min(frames - (count - 1));
        if cap < count {
            return Err(Error::TooFewFrames {
                frames,
                reason: "mask cap leaves less than one frame per span",
            });
        }

        let mut lengths: Vec<usize> = (0..count).map(|_| rng.gen_range(1..=cap)).collect();
        let total: usize = lengths.iter().sum();
        if total > cap {
            for l in &mut lengths {
                *l = ((*l * cap) / total).max(1);
            }
            while lengths.iter().sum::<usize>() > cap {
                let (i, _) = lengths
                    .iter()
                    .enumerate()
                    .max_by_key(|&(i, l)| (*l, std::cmp::Reverse(i)))
                    .expect("non-empty");
                lengths[i] -= 1;
            }
        }

        // Distribute the leftover frames over the P + 1 gaps (inner gaps get one extra).
        let masked: usize = lengths.iter().sum();
        let slack = frames - masked - (count - 1);
        let mut cuts: Vec<usize> = (0..count).map(|_| rng.gen_range(0..=slack)).collect();
        cuts.sort_unstable();
        let mut spans = Vec::with_capacity(count);
        let mut cursor = 0;
        let mut prev_cut = 0;
        for (i, (&cut, &len)) in cuts.iter().zip(&lengths).enumerate() {
            cursor += cut - prev_cut + usize::from(i > 0);
            prev_cut = cut;
            spans.push(Span::new(cursor, cursor + len - 1));
            cursor += len;
        }
        SpanSet::new(spans)
    }
}

/// With probability `prob`, a single span covering the tail of the utterance,
/// starting uniformly in `[ceil(0.1 T), T - 1]`.
pub fn sample_continuation_span<R: Rng + ?Sized>(
    frames: usize,
    rng: &mut R,
    prob: f64,
) -> Result<Option<SpanSet>> {
    if frames < MIN_SAMPLING_FRAMES {
        return Err(Error::TooFewFrames {
            frames,
            reason: "continuation masking needs at least 10 frames",
        });
    }
    if !rng.gen_bool(prob) {
        return Ok(None);
    }
    let lo = (frames as f64 * 0.1).ceil() as usize;
    let start = rng.gen_range(lo..frames);
    SpanSet::single(start, frames - 1).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Context,
    Masked,
    Special,
}

/// The rearranged token sequence together with per-position roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RearrangedSeq {
    pub tokens: TokenGrid,
    pub roles: Vec<Role>,
    /// Span id (0-based) of masked tokens and of the markers that delimit them.
    pub span_index: Vec<Option<usize>>,
    pub frames: usize,
    pub spans: SpanSet,
    pub vocab: SpecialVocab,
}

/// `[sos] C_0 [m_1] C_1 ... [m_P] C_P [eos]` for the given context segments.
pub fn context_prefix(segments: &[TokenGrid], sv: &SpecialVocab) -> Result<TokenGrid> {
    let Some(first) = segments.first() else {
        return Err(Error::Empty("context segments"));
    };
    let spans = segments.len() - 1;
    if spans > sv.max_spans as usize {
        return Err(Error::TooManySpans {
            found: spans,
            max: sv.max_spans as usize,
        });
    }
    let mut out = TokenGrid::empty(first.channels());
    out.push_uniform(sv.sos());
    for (i, seg) in segments.iter().enumerate() {
        if i > 0 {
            out.push_uniform(sv.mask(i));
        }
        for row in seg.iter_rows() {
            out.push_row(row)?;
        }
    }
    out.push_uniform(sv.eos());
    Ok(out)
}

pub fn rearrange(codes: &CodeGrid, spans: &SpanSet, sv: &SpecialVocab) -> Result<RearrangedSeq> {
    if codes.codebook_size() != sv.codebook_size {
        return Err(Error::InvalidParameter(format!(
            "code grid vocabulary {} differs from special vocab offset {}",
            codes.codebook_size(),
            sv.codebook_size
        )));
    }
    let frames = codes.frames();
    spans.check_within(frames)?;
    if spans.len() > sv.max_spans as usize {
        return Err(Error::TooManySpans {
            found: spans.len(),
            max: sv.max_spans as usize,
        });
    }
    let grid = codes.grid();
    let segments: Vec<TokenGrid> = spans
        .context_segments(frames)
        .into_iter()
        .map(|r| grid.slice_rows(r))
        .collect();
    let mut tokens = context_prefix(&segments, sv)?;
    for (p, span) in spans.iter().enumerate() {
        tokens.push_uniform(sv.mask(p + 1));
        for t in span.frames() {
            tokens.push_row(grid.row(t))?;
        }
        tokens.push_uniform(sv.eog());
    }
    RearrangedSeq::from_tokens(tokens, *sv)
}

struct ParsedLayout {
    contexts: Vec<Range<usize>>,
    masked: Vec<Range<usize>>,
}

fn malformed(position: usize, reason: impl Into<String>) -> Error {
    Error::MalformedLayout {
        position,
        reason: reason.into(),
    }
}

fn parse_layout(tokens: &TokenGrid, sv: &SpecialVocab) -> Result<ParsedLayout> {
    let n = tokens.rows();
    let id_at = |pos: usize| -> Result<u32> {
        let row = tokens.row(pos);
        let id = row[0];
        if sv.is_code(id) {
            if let Some(&bad) = row.iter().find(|&&c| !sv.is_code(c)) {
                return Err(malformed(pos, format!("frame row mixes code and special id {bad}")));
            }
        } else if row.iter().any(|&c| c != id) {
            return Err(malformed(pos, "special token not replicated across channels"));
        }
        if id >= sv.vocab_size() as u32 {
            return Err(malformed(pos, format!("token {id} outside vocabulary")));
        }
        Ok(id)
    };

    if n == 0 || id_at(0)? != sv.sos() {
        return Err(malformed(0, "sequence must start with [sos]"));
    }
    let mut pos = 1;
    let mut contexts = Vec::new();
    let mut seg_start = pos;
    loop {
        if pos >= n {
            return Err(malformed(pos, "missing [eos]"));
        }
        let id = id_at(pos)?;
        if sv.is_code(id) {
            pos += 1;
        } else if let Some(p) = sv.mask_index(id) {
            if p != contexts.len() + 1 {
                return Err(malformed(pos, format!("expected [m_{}], found [m_{p}]", contexts.len() + 1)));
            }
            contexts.push(seg_start..pos);
            pos += 1;
            seg_start = pos;
        } else if id == sv.eos() {
            contexts.push(seg_start..pos);
            pos += 1;
            break;
        } else {
            return Err(malformed(pos, format!("unexpected token {id} in context part")));
        }
    }

    let span_count = contexts.len() - 1;
    let mut masked = Vec::with_capacity(span_count);
    for p in 1..=span_count {
        if pos >= n || id_at(pos)? != sv.mask(p) {
            return Err(malformed(pos, format!("expected [m_{p}] opening span {p}")));
        }
        pos += 1;
        let start = pos;
        loop {
            if pos >= n {
                return Err(malformed(pos, format!("span {p} not closed by [eog]")));
            }
            let id = id_at(pos)?;
            if sv.is_code(id) {
                pos += 1;
            } else if id == sv.eog() {
                break;
            } else {
                return Err(malformed(pos, format!("unexpected token {id} inside span {p}")));
            }
        }
        if pos == start {
            return Err(malformed(pos, format!("span {p} is empty")));
        }
        masked.push(start..pos);
        pos += 1;
    }
    if pos != n {
        return Err(malformed(pos, "trailing tokens after the last [eog]"));
    }
    for (p, ctx) in contexts.iter().enumerate().skip(1).take(span_count.saturating_sub(1)) {
        if ctx.is_empty() {
            return Err(malformed(ctx.start, format!("spans {p} and {} are adjacent", p + 1)));
        }
    }
    Ok(ParsedLayout { contexts, masked })
}

impl RearrangedSeq {
    /// Parses and validates a rearranged token grid, recovering roles and spans.
    pub fn from_tokens(tokens: TokenGrid, vocab: SpecialVocab) -> Result<Self> {
        let parsed = parse_layout(&tokens, &vocab)?;
        let n = tokens.rows();
        let mut roles = vec![Role::Special; n];
        let mut span_index = vec![None; n];
        for ctx in &parsed.contexts {
            for r in &mut roles[ctx.clone()] {
                *r = Role::Context;
            }
        }
        // Context markers sit right before each context segment after the first.
        for (p, ctx) in parsed.contexts.iter().enumerate().skip(1) {
            span_index[ctx.start - 1] = Some(p - 1);
        }
        let mut spans = Vec::with_capacity(parsed.masked.len());
        let mut frame = parsed.contexts[0].len();
        for (p, m) in parsed.masked.iter().enumerate() {
            spans.push(Span::new(frame, frame + m.len() - 1));
            frame += m.len() + parsed.contexts[p + 1].len();
            for i in m.start - 1..=m.end {
                span_index[i] = Some(p);
            }
            for r in &mut roles[m.clone()] {
                *r = Role::Masked;
            }
        }
        Ok(Self {
            tokens,
            roles,
            span_index,
            frames: frame,
            spans: SpanSet::new(spans)?,
            vocab,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Reassembles the original code grid and span set.
pub fn invert_rearrange(r: &RearrangedSeq) -> Result<(CodeGrid, SpanSet)> {
    let parsed = parse_layout(&r.tokens, &r.vocab)?;
    let mut grid = TokenGrid::empty(r.tokens.channels());
    let mut spans = Vec::with_capacity(parsed.masked.len());
    for (p, ctx) in parsed.contexts.iter().enumerate() {
        if p > 0 {
            let m = &parsed.masked[p - 1];
            let start = grid.rows();
            for t in m.clone() {
                grid.push_row(r.tokens.row(t))?;
            }
            spans.push(Span::new(start, grid.rows() - 1));
        }
        for t in ctx.clone() {
            grid.push_row(r.tokens.row(t))?;
        }
    }
    Ok((
        CodeGrid::new(grid, r.vocab.codebook_size)?,
        SpanSet::new(spans)?,
    ))
}

/// Shifts channel `k` down by `k` rows, padding vacated cells.
pub fn delay_stack(tokens: &TokenGrid, sv: &SpecialVocab) -> TokenGrid {
    let k_count = tokens.channels();
    let rows = tokens.rows() + k_count - 1;
    let mut out = TokenGrid::filled(rows, k_count, sv.pad());
    for t in 0..tokens.rows() {
        for k in 0..k_count {
            out.set(t + k, k, tokens.get(t, k));
        }
    }
    out
}

pub fn delay_unstack(grid: &TokenGrid, sv: &SpecialVocab) -> Result<TokenGrid> {
    let k_count = grid.channels();
    let rows = grid
        .rows()
        .checked_sub(k_count - 1)
        .ok_or_else(|| Error::InconsistentDelay(format!("{} rows cannot hold {k_count} delayed channels", grid.rows())))?;
    let pad = sv.pad();
    for t in 0..grid.rows() {
        for k in 0..k_count {
            let expect_pad = t < k || t - k >= rows;
            let is_pad = grid.get(t, k) == pad;
            if expect_pad != is_pad {
                return Err(Error::InconsistentDelay(format!(
                    "cell ({t}, {k}) {} a pad",
                    if is_pad { "is unexpectedly" } else { "should be" }
                )));
            }
        }
    }
    let mut out = TokenGrid::filled(rows, k_count, pad);
    for t in 0..rows {
        for k in 0..k_count {
            out.set(t, k, grid.get(t + k, k));
        }
    }
    Ok(out)
}

/// Positions contributing to the training loss: span content and each `[eog]`.
pub fn loss_mask(r: &RearrangedSeq) -> Vec<bool> {
    let eog = r.vocab.eog();
    r.roles
        .iter()
        .enumerate()
        .map(|(t, role)| *role == Role::Masked || r.tokens.get(t, 0) == eog)
        .collect()
}

/// Loss mask mapped onto the delayed grid: cell `(t, k)` is live when row
/// `t - k` of the undelayed sequence is.
pub fn delayed_loss_mask(mask: &[bool], channels: usize) -> Vec<Vec<bool>> {
    let rows = mask.len() + channels - 1;
    (0..rows)
        .map(|t| {
            (0..channels)
                .map(|k| t >= k && t - k < mask.len() && mask[t - k])
                .collect()
        })
        .collect()
}

fn token_label(id: u32, sv: &SpecialVocab) -> String {
    if sv.is_code(id) {
        id.to_string()
    } else if id == sv.sos() {
        "[sos]".into()
    } else if id == sv.eos() {
        "[eos]".into()
    } else if id == sv.eog() {
        "[eog]".into()
    } else if id == sv.pad() {
        "[pad]".into()
    } else if let Some(p) = sv.mask_index(id) {
        format!("[m{p}]")
    } else {
        format!("?{id}")
    }
}

/// One line per position: index, role, span id and the per-channel tokens.
pub fn dump_layout(r: &RearrangedSeq) -> String {
    let mut out = String::new();
    for (t, row) in r.tokens.iter_rows().enumerate() {
        let role = match r.roles[t] {
            Role::Context => "context",
            Role::Masked => "masked",
            Role::Special => "special",
        };
        let span = r.span_index[t].map_or_else(|| "-".to_string(), |p| p.to_string());
        let toks: Vec<String> = row.iter().map(|&id| token_label(id, &r.vocab)).collect();
        let _ = writeln!(out, "{t:>4} {role:<7} {span:>2} {}", toks.join(" "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const V: u32 = 16;

    fn sv() -> SpecialVocab {
        SpecialVocab::new(V, 3)
    }

    fn codes(frames: usize, k: usize) -> CodeGrid {
        let data = (0..frames * k).map(|i| (i as u32) % V).collect();
        CodeGrid::new(TokenGrid::new(k, data).unwrap(), V).unwrap()
    }

    #[test]
    fn special_ids_are_distinct_and_above_codes() {
        let sv = sv();
        let mut ids = vec![sv.sos(), sv.eos(), sv.eog(), sv.pad()];
        ids.extend((1..=3).map(|p| sv.mask(p)));
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), ids.len());
        assert!(ids.iter().all(|&i| i >= V));
        assert_eq!(sv.vocab_size(), (V + 3 + 3 + 1) as usize);
        assert_eq!(*ids.iter().max().unwrap() as usize, sv.vocab_size() - 1);
    }

    #[test]
    fn single_span_layout_matches_worked_example() {
        let sv = sv();
        // a1..a5 as codes 1..5 on a single channel.
        let grid = TokenGrid::new(1, vec![1, 2, 3, 4, 5]).unwrap();
        let codes = CodeGrid::new(grid, V).unwrap();
        let r = rearrange(&codes, &SpanSet::single(1, 2).unwrap(), &sv).unwrap();
        let expect = vec![sv.sos(), 1, sv.mask(1), 4, 5, sv.eos(), sv.mask(1), 2, 3, sv.eog()];
        assert_eq!(r.tokens.column(0), expect);
        assert_eq!(
            loss_mask(&r),
            vec![false, false, false, false, false, false, false, true, true, true]
        );
    }

    #[test]
    fn span_at_start_gives_empty_first_context() {
        let sv = sv();
        let r = rearrange(&codes(4, 2), &SpanSet::single(0, 1).unwrap(), &sv).unwrap();
        assert_eq!(r.tokens.get(1, 0), sv.mask(1));
        let (back, spans) = invert_rearrange(&r).unwrap();
        assert_eq!(back, codes(4, 2));
        assert_eq!(spans, SpanSet::single(0, 1).unwrap());
    }

    #[test]
    fn single_frame_fully_masked_round_trips() {
        let sv = sv();
        let c = codes(1, 4);
        let s = SpanSet::single(0, 0).unwrap();
        let r = rearrange(&c, &s, &sv).unwrap();
        assert_eq!(invert_rearrange(&r).unwrap(), (c, s));
    }

    #[test]
    fn truncated_sequence_is_rejected() {
        let sv = sv();
        let r = rearrange(&codes(6, 2), &SpanSet::single(2, 3).unwrap(), &sv).unwrap();
        let cut = r.tokens.slice_rows(0..r.tokens.rows() - 1);
        assert!(matches!(
            RearrangedSeq::from_tokens(cut, sv),
            Err(Error::MalformedLayout { .. })
        ));
    }

    #[test]
    fn too_many_spans_rejected() {
        let sv = sv();
        let spans = SpanSet::new(vec![
            Span::new(0, 0),
            Span::new(2, 2),
            Span::new(4, 4),
            Span::new(6, 6),
        ])
        .unwrap();
        assert!(matches!(
            rearrange(&codes(8, 1), &spans, &sv),
            Err(Error::TooManySpans { found: 4, max: 3 })
        ));
    }

    #[test]
    fn span_set_validation() {
        assert!(SpanSet::new(vec![Span::new(0, 2), Span::new(3, 4)]).is_err());
        assert!(SpanSet::new(vec![Span::new(4, 5), Span::new(0, 1)]).is_err());
        assert!(SpanSet::new(vec![Span::new(3, 2)]).is_err());
        let merged = SpanSet::merged(vec![Span::new(5, 8), Span::new(0, 2), Span::new(3, 4)]).unwrap();
        assert_eq!(merged.spans(), &[Span::new(0, 8)]);
        assert!(SpanSet::single(2, 9).unwrap().check_within(9).is_err());
    }

    #[test]
    fn delay_two_channels_unrolled() {
        let sv = sv();
        let (a, b, c, d, e, f) = (1, 2, 3, 4, 5, 6);
        let x = TokenGrid::from_rows(2, &[[a, b], [c, d], [e, f]]).unwrap();
        let p = sv.pad();
        let y = delay_stack(&x, &sv);
        assert_eq!(y, TokenGrid::from_rows(2, &[[a, p], [c, b], [e, d], [p, f]]).unwrap());
        assert_eq!(delay_unstack(&y, &sv).unwrap(), x);
    }

    #[test]
    fn delay_single_channel_is_identity() {
        let sv = sv();
        let x = TokenGrid::new(1, vec![3, 1, 4, 1, 5]).unwrap();
        assert_eq!(delay_stack(&x, &sv), x);
        assert_eq!(delay_unstack(&x, &sv).unwrap(), x);
    }

    #[test]
    fn delay_unstack_rejects_bad_pads() {
        let sv = sv();
        let x = TokenGrid::from_rows(2, &[[1u32, 2], [3, 4]]).unwrap();
        let mut y = delay_stack(&x, &sv);
        y.set(0, 1, 7);
        assert!(delay_unstack(&y, &sv).is_err());
        let mut y = delay_stack(&x, &sv);
        y.set(1, 0, sv.pad());
        assert!(delay_unstack(&y, &sv).is_err());
    }

    #[test]
    fn no_spans_mask_all_false() {
        let sv = sv();
        let r = rearrange(&codes(5, 2), &SpanSet::empty(), &sv).unwrap();
        assert_eq!(r.len(), 7);
        assert!(loss_mask(&r).iter().all(|&m| !m));
    }

    #[test]
    fn continuation_span_ends_at_last_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = 0;
        for _ in 0..200 {
            if let Some(s) = sample_continuation_span(10, &mut rng, 0.5).unwrap() {
                assert_eq!(s.len(), 1);
                assert_eq!(s.spans()[0].end, 9);
                assert!(s.spans()[0].start >= 1);
                seen += 1;
            }
        }
        assert!(seen > 0);
        assert!(sample_continuation_span(9, &mut rng, 0.5).is_err());
    }

    #[test]
    fn sampler_rejects_short_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SpanSampler::default().sample(9, &mut rng).is_err());
    }

    #[test]
    fn dump_is_one_line_per_position() {
        let sv = sv();
        let r = rearrange(&codes(5, 2), &SpanSet::single(1, 2).unwrap(), &sv).unwrap();
        let dump = dump_layout(&r);
        assert_eq!(dump.lines().count(), r.len());
        assert!(dump.lines().next().unwrap().contains("[sos] [sos]"));
    }
}
