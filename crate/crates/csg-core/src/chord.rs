//! Chord vocabulary, label parsing, temporal quantization, and transposition.
//!
//! Chords are a root pitch class (C through B, twelve values) combined with
//! one of four triad qualities, giving 48 symbolic tokens. Token 48 is
//! reserved for spans with no chord. Timed annotations quantize to a fixed
//! frame rate (50 Hz by default) by sampling each frame at its midpoint.

use std::fmt;
use std::path::Path;
use thiserror::Error;

/// Token id reserved for "no chord here".
pub const NO_CHORD: u16 = 48;

/// Number of root x quality combinations.
pub const CHORD_TOKENS: u16 = 48;

pub const ROOT_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

#[derive(Debug, Error, PartialEq)]
pub enum ChordError {
    #[error("unknown chord root {root:?} at position 0 in {label:?}")]
    UnknownRoot { label: String, root: String },
    #[error("unknown chord quality {quality:?} at position {pos} in {label:?}")]
    UnknownQuality {
        label: String,
        quality: String,
        pos: usize,
    },
    #[error("chord label {label:?} is missing the ':' separator")]
    MissingSeparator { label: String },
    #[error("token id {0} outside 0..48")]
    TokenOutOfRange(u16),
    #[error("scale degree {digit:?} outside 1..=7 in progression {digits:?}")]
    BadDegree { digits: String, digit: char },
    #[error("empty progression")]
    EmptyProgression,
    #[error("key root {0} outside 0..=11")]
    BadKeyRoot(u8),
    #[error(
        "overlapping intervals: [{a_start}, {a_end}) {a_label} overlaps [{b_start}, {b_end}) {b_label}"
    )]
    OverlappingIntervals {
        a_start: f64,
        a_end: f64,
        a_label: String,
        b_start: f64,
        b_end: f64,
        b_label: String,
    },
    #[error("interval [{start}, {end}) has non-positive length")]
    EmptyInterval { start: f64, end: f64 },
    #[error("{path}:{line}: malformed interval line {content:?}")]
    MalformedLine {
        path: String,
        line: usize,
        content: String,
    },
    #[error("{path}:{line}: {source}")]
    BadLabel {
        path: String,
        line: usize,
        source: Box<ChordError>,
    },
    #[error("frame rate {0} must be positive")]
    BadFrameRate(f64),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("sequence file {path}: {message}")]
    BadSequenceFile { path: String, message: String },
}

/// Triad quality. The discriminant is the token-layout offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quality {
    Major = 0,
    Minor = 1,
    Augmented = 2,
    Diminished = 3,
}

impl Quality {
    pub const ALL: [Quality; 4] = [
        Quality::Major,
        Quality::Minor,
        Quality::Augmented,
        Quality::Diminished,
    ];

    pub fn index(self) -> u16 {
        self as u16
    }

    pub fn from_index(i: u16) -> Option<Quality> {
        Quality::ALL.get(i as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Major => "maj",
            Quality::Minor => "min",
            Quality::Augmented => "aug",
            Quality::Diminished => "dim",
        }
    }
}

/// A symbolic chord: root pitch class 0..=11 plus quality.
///
/// The token layout is `root * 4 + quality`, which makes transposition by
/// `k` semitones a `4 * k` step in token space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChordToken {
    root: u8,
    quality: Quality,
}

impl ChordToken {
    pub fn new(root: u8, quality: Quality) -> ChordToken {
        assert!(root < 12, "chord root must be 0..=11, got {root}");
        ChordToken { root, quality }
    }

    pub fn root(self) -> u8 {
        self.root
    }

    pub fn quality(self) -> Quality {
        self.quality
    }

    pub fn token_id(self) -> u16 {
        self.root as u16 * 4 + self.quality.index()
    }

    pub fn from_token_id(id: u16) -> Result<ChordToken, ChordError> {
        if id >= CHORD_TOKENS {
            return Err(ChordError::TokenOutOfRange(id));
        }
        Ok(ChordToken {
            root: (id / 4) as u8,
            quality: Quality::from_index(id % 4).unwrap(),
        })
    }

    pub fn transposed(self, semitones: i32) -> ChordToken {
        let root = (self.root as i32 + semitones).rem_euclid(12) as u8;
        ChordToken {
            root,
            quality: self.quality,
        }
    }
}

impl fmt::Display for ChordToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", ROOT_NAMES[self.root as usize], self.quality.name())
    }
}

/// Result of parsing one label: either a chord or the "N" no-chord marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChordLabel {
    Chord(ChordToken),
    NoChord,
}

impl ChordLabel {
    pub fn token(self) -> u16 {
        match self {
            ChordLabel::Chord(c) => c.token_id(),
            ChordLabel::NoChord => NO_CHORD,
        }
    }
}

impl fmt::Display for ChordLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChordLabel::Chord(c) => c.fmt(f),
            ChordLabel::NoChord => write!(f, "N"),
        }
    }
}

/// Parses `<root>:<quality>` labels such as `C:maj` or `A:min`, plus the
/// bare `N` no-chord marker. Flat roots normalize to their sharp spelling
/// (`Db` becomes `C#`); output always uses sharps.
pub fn parse_chord_label(label: &str) -> Result<ChordLabel, ChordError> {
    let trimmed = label.trim();
    if trimmed == "N" {
        return Ok(ChordLabel::NoChord);
    }
    let Some(colon) = trimmed.find(':') else {
        return Err(ChordError::MissingSeparator {
            label: label.to_string(),
        });
    };
    let (root_str, rest) = trimmed.split_at(colon);
    let quality_str = &rest[1..];

    let root = parse_root(root_str).ok_or_else(|| ChordError::UnknownRoot {
        label: label.to_string(),
        root: root_str.to_string(),
    })?;
    let quality = match quality_str {
        "maj" => Quality::Major,
        "min" => Quality::Minor,
        "aug" => Quality::Augmented,
        "dim" => Quality::Diminished,
        _ => {
            return Err(ChordError::UnknownQuality {
                label: label.to_string(),
                quality: quality_str.to_string(),
                pos: colon + 1,
            })
        }
    };
    Ok(ChordLabel::Chord(ChordToken::new(root, quality)))
}

fn parse_root(s: &str) -> Option<u8> {
    let natural = match s.as_bytes().first()? {
        b'C' => 0i32,
        b'D' => 2,
        b'E' => 4,
        b'F' => 5,
        b'G' => 7,
        b'A' => 9,
        b'B' => 11,
        _ => return None,
    };
    let adjust = match &s[1..] {
        "" => 0,
        "#" => 1,
        "b" => -1,
        _ => return None,
    };
    Some((natural + adjust).rem_euclid(12) as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Major,
    Minor,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Major => "major",
            Mode::Minor => "minor",
        }
    }
}

const MAJOR_OFFSETS: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const NATURAL_MINOR_OFFSETS: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];
const MAJOR_QUALITIES: [Quality; 7] = [
    Quality::Major,
    Quality::Minor,
    Quality::Minor,
    Quality::Major,
    Quality::Major,
    Quality::Minor,
    Quality::Diminished,
];
const NATURAL_MINOR_QUALITIES: [Quality; 7] = [
    Quality::Minor,
    Quality::Diminished,
    Quality::Major,
    Quality::Minor,
    Quality::Minor,
    Quality::Major,
    Quality::Major,
];

/// Expands a digit string of scale degrees (`"6451"`) into the diatonic
/// triads of the given key, e.g. C major `6451` is A:min F:maj G:maj C:maj.
/// Minor keys use the natural-minor triad table.
pub fn parse_progression(
    key_root: u8,
    mode: Mode,
    digits: &str,
) -> Result<Vec<ChordToken>, ChordError> {
    if key_root > 11 {
        return Err(ChordError::BadKeyRoot(key_root));
    }
    if digits.is_empty() {
        return Err(ChordError::EmptyProgression);
    }
    let (offsets, qualities) = match mode {
        Mode::Major => (&MAJOR_OFFSETS, &MAJOR_QUALITIES),
        Mode::Minor => (&NATURAL_MINOR_OFFSETS, &NATURAL_MINOR_QUALITIES),
    };
    digits
        .chars()
        .map(|ch| {
            let degree = ch.to_digit(10).filter(|d| (1..=7).contains(d)).ok_or(
                ChordError::BadDegree {
                    digits: digits.to_string(),
                    digit: ch,
                },
            )? as usize;
            let root = (key_root + offsets[degree - 1]) % 12;
            Ok(ChordToken::new(root, qualities[degree - 1]))
        })
        .collect()
}

/// One timed annotation: `[start, end)` seconds with a chord or no-chord
/// label.
#[derive(Debug, Clone, PartialEq)]
pub struct ChordInterval {
    pub start: f64,
    pub end: f64,
    pub label: ChordLabel,
}

/// Validated, sorted, non-overlapping chord annotations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChordIntervalList {
    entries: Vec<ChordInterval>,
}

impl ChordIntervalList {
    pub fn new(mut entries: Vec<ChordInterval>) -> Result<ChordIntervalList, ChordError> {
        for e in &entries {
            // written negated so NaN endpoints are rejected too
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(e.end > e.start) {
                return Err(ChordError::EmptyInterval {
                    start: e.start,
                    end: e.end,
                });
            }
        }
        entries.sort_by(|a, b| a.start.total_cmp(&b.start));
        for pair in entries.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(ChordError::OverlappingIntervals {
                    a_start: pair[0].start,
                    a_end: pair[0].end,
                    a_label: pair[0].label.to_string(),
                    b_start: pair[1].start,
                    b_end: pair[1].end,
                    b_label: pair[1].label.to_string(),
                });
            }
        }
        Ok(ChordIntervalList { entries })
    }

    pub fn entries(&self) -> &[ChordInterval] {
        &self.entries
    }

    pub fn total_end(&self) -> f64 {
        self.entries.last().map(|e| e.end).unwrap_or(0.0)
    }

    /// Token active at time `t`, treating intervals as half-open.
    pub fn token_at(&self, t: f64) -> u16 {
        // entries are sorted; partition_point finds the first entry with
        // start > t, so the candidate is the one before it
        let idx = self.entries.partition_point(|e| e.start <= t);
        if idx == 0 {
            return NO_CHORD;
        }
        let e = &self.entries[idx - 1];
        if t < e.end {
            e.label.token()
        } else {
            NO_CHORD
        }
    }
}

/// Fixed-rate token stream: one token per frame, 48 marking no-chord frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub tokens: Vec<u16>,
    pub frame_rate_hz: f64,
}

impl FrameSequence {
    pub fn new(tokens: Vec<u16>, frame_rate_hz: f64) -> FrameSequence {
        debug_assert!(tokens.iter().all(|&t| t <= NO_CHORD));
        FrameSequence {
            tokens,
            frame_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Samples `intervals` into a frame stream at `frame_rate_hz`. Frame `t`
/// covers `[t/rate, (t+1)/rate)` and takes the token active at its midpoint;
/// gaps map to the no-chord token.
pub fn quantize(
    intervals: &ChordIntervalList,
    frame_rate_hz: f64,
    total_duration: f64,
) -> Result<FrameSequence, ChordError> {
    // negated so a NaN rate is rejected as well
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(frame_rate_hz > 0.0) {
        return Err(ChordError::BadFrameRate(frame_rate_hz));
    }
    let frames = (total_duration * frame_rate_hz).ceil().max(0.0) as usize;
    let tokens = (0..frames)
        .map(|t| intervals.token_at((t as f64 + 0.5) / frame_rate_hz))
        .collect();
    Ok(FrameSequence::new(tokens, frame_rate_hz))
}

/// Shifts every chord root by `semitones` (mod 12), preserving qualities and
/// leaving no-chord frames untouched.
pub fn transpose(seq: &FrameSequence, semitones: i32) -> FrameSequence {
    let tokens = seq
        .tokens
        .iter()
        .map(|&t| transpose_token(t, semitones))
        .collect();
    FrameSequence::new(tokens, seq.frame_rate_hz)
}

pub fn transpose_token(token: u16, semitones: i32) -> u16 {
    if token >= CHORD_TOKENS {
        return token;
    }
    let root = (token / 4) as i32;
    let quality = token % 4;
    ((root + semitones).rem_euclid(12) as u16) * 4 + quality
}

/// Reads a `.lab`-style file: one `start end label` triple per line,
/// whitespace separated. Blank lines and `#` comments are skipped.
pub fn read_lab_file(path: impl AsRef<Path>) -> Result<ChordIntervalList, ChordError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ChordError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_lab(&text, &path.display().to_string())
}

pub fn parse_lab(text: &str, path: &str) -> Result<ChordIntervalList, ChordError> {
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (start, end, label) = match (fields.next(), fields.next(), fields.next()) {
            (Some(s), Some(e), Some(l)) if fields.next().is_none() => (s, e, l),
            _ => {
                return Err(ChordError::MalformedLine {
                    path: path.to_string(),
                    line: lineno + 1,
                    content: raw.to_string(),
                })
            }
        };
        let start: f64 = start.parse().map_err(|_| ChordError::MalformedLine {
            path: path.to_string(),
            line: lineno + 1,
            content: raw.to_string(),
        })?;
        let end: f64 = end.parse().map_err(|_| ChordError::MalformedLine {
            path: path.to_string(),
            line: lineno + 1,
            content: raw.to_string(),
        })?;
        let label = parse_chord_label(label).map_err(|e| ChordError::BadLabel {
            path: path.to_string(),
            line: lineno + 1,
            source: Box::new(e),
        })?;
        entries.push(ChordInterval { start, end, label });
    }
    ChordIntervalList::new(entries)
}

impl FrameSequence {
    /// Serializes as a `frame_rate=<hz>` header followed by one token per
    /// line.
    pub fn to_seq_string(&self) -> String {
        let mut out = format!("frame_rate={}\n", self.frame_rate_hz);
        for t in &self.tokens {
            out.push_str(&t.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_seq_string(text: &str, path: &str) -> Result<FrameSequence, ChordError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| ChordError::BadSequenceFile {
            path: path.to_string(),
            message: "empty file".into(),
        })?;
        let rate: f64 = header
            .strip_prefix("frame_rate=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| ChordError::BadSequenceFile {
                path: path.to_string(),
                message: format!("expected frame_rate=<hz> header, got {header:?}"),
            })?;
        let mut tokens = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let tok: u16 = line.parse().map_err(|_| ChordError::BadSequenceFile {
                path: path.to_string(),
                message: format!("line {}: bad token {line:?}", i + 2),
            })?;
            if tok > NO_CHORD {
                return Err(ChordError::BadSequenceFile {
                    path: path.to_string(),
                    message: format!("line {}: token {tok} outside 0..=48", i + 2),
                });
            }
            tokens.push(tok);
        }
        Ok(FrameSequence::new(tokens, rate))
    }

    pub fn read_seq_file(path: impl AsRef<Path>) -> Result<FrameSequence, ChordError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ChordError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_seq_string(&text, &path.display().to_string())
    }
}
