//! Rule-based extraction of anatomical location claims from clinical text.
//!
//! The grammar is small and deterministic:
//!
//! * text is split into sentences at `.`, `;`, `!`, `?` and newlines;
//! * lobe abbreviations (`LUL`, `LLL`, `RUL`, `RML`, `RLL`) expand to their
//!   full phrase; `L`/`R`/`lt`/`rt` read as laterality;
//! * a location mention is a run of laterality, level and anatomy words
//!   (`lobe`, `lung`, `sided`, ...) joined by `of`/`the`/hyphens;
//! * sizes (`8 mm`, `1.2 cm`, `8-10 mm`, `1.2 x 0.9 cm`) and counts
//!   (`two nodules`, `solitary mass`) attach to the nearest mention of their
//!   sentence;
//! * a negation trigger (`no`, `not`, `without`, `negative for`, `free of`)
//!   negates every mention after it up to the end of the sentence.
//!
//! Location-like fragments that fail these rules (a left middle lobe, a bare
//! `upper`, a size with no location) are reported as unrecognized spans.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{locate_candidate, Laterality, LobeLevel, LobeMap, Location, NoduleCandidate};

/// Half-open character range `[start, end)` into the original text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min_mm: f64,
    pub max_mm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Affirmed,
    Negated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationDescriptor {
    pub laterality: Laterality,
    pub lobe: LobeLevel,
    pub size_mm: Option<SizeRange>,
    pub count: Option<u32>,
    pub polarity: Polarity,
    pub source_span: Span,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub descriptors: Vec<LocationDescriptor>,
    pub unrecognized_spans: Vec<Span>,
    pub normalized_text: String,
}

#[derive(Clone, Debug, PartialEq)]
enum TokKind {
    Word,
    Number(f64),
    Punct(char),
    Newline,
}

#[derive(Clone, Debug)]
struct Token {
    text: String,
    kind: TokKind,
    span: Span,
}

fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            out.push(Token {
                text: "\n".into(),
                kind: TokKind::Newline,
                span: Span { start: i, end: i + 1 },
            });
            i += 1;
        } else if c.is_whitespace() {
            i += 1;
        } else if c.is_alphabetic() {
            let start = i;
            while i < chars.len() && (chars[i].is_alphabetic() || chars[i] == '\'') {
                i += 1;
            }
            out.push(Token {
                text: chars[start..i].iter().collect::<String>().to_lowercase(),
                kind: TokKind::Word,
                span: Span { start, end: i },
            });
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().unwrap_or(0.0);
            out.push(Token {
                text: s,
                kind: TokKind::Number(v),
                span: Span { start, end: i },
            });
        } else {
            out.push(Token {
                text: c.to_string(),
                kind: TokKind::Punct(c),
                span: Span { start: i, end: i + 1 },
            });
            i += 1;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Lex {
    Side(Laterality),
    /// Level word that needs an anatomy word beside it (`upper` in `upper lobe`).
    Level(LobeLevel),
    /// Self-sufficient location term (`apex`, `base`, `lingula`).
    Standalone(Laterality, LobeLevel),
    Anatomy,
    Connector,
    Finding,
    CountWord(u32),
    Number(f64),
    Unit(f64),
    Range,
    Times,
    Negation,
    Boundary,
    Other,
}

#[derive(Clone, Debug)]
struct Lexeme {
    lex: Lex,
    span: Span,
    norm: String,
}

fn word_lex(w: &str) -> Lex {
    match w {
        "left" | "lt" => Lex::Side(Laterality::Left),
        "right" | "rt" => Lex::Side(Laterality::Right),
        "upper" | "superior" => Lex::Level(LobeLevel::Upper),
        "middle" => Lex::Level(LobeLevel::Middle),
        "lower" | "inferior" => Lex::Level(LobeLevel::Lower),
        "apex" | "apical" | "apices" | "apicoposterior" => {
            Lex::Standalone(Laterality::Unspecified, LobeLevel::Upper)
        }
        "base" | "basal" | "bases" | "basilar" => {
            Lex::Standalone(Laterality::Unspecified, LobeLevel::Lower)
        }
        "lingula" | "lingular" => Lex::Standalone(Laterality::Left, LobeLevel::Upper),
        "lobe" | "lobes" | "lobar" | "lung" | "lungs" | "sided" | "side" | "hemithorax"
        | "zone" | "field" => Lex::Anatomy,
        "of" | "the" => Lex::Connector,
        "nodule" | "nodules" | "mass" | "masses" | "lesion" | "lesions" | "opacity"
        | "opacities" | "disease" | "focus" | "foci" | "tumor" | "tumors" | "tumour"
        | "tumours" | "spot" | "spots" | "finding" | "findings" | "nodularity" => Lex::Finding,
        "one" | "single" | "solitary" | "a" | "an" => match w {
            "a" | "an" => Lex::Other,
            _ => Lex::CountWord(1),
        },
        "two" | "both" => Lex::CountWord(2),
        "three" => Lex::CountWord(3),
        "four" => Lex::CountWord(4),
        "five" => Lex::CountWord(5),
        "six" => Lex::CountWord(6),
        "seven" => Lex::CountWord(7),
        "eight" => Lex::CountWord(8),
        "nine" => Lex::CountWord(9),
        "ten" => Lex::CountWord(10),
        "mm" | "millimeter" | "millimeters" | "millimetre" | "millimetres" => Lex::Unit(1.0),
        "cm" | "centimeter" | "centimeters" | "centimetre" | "centimetres" => Lex::Unit(10.0),
        "to" => Lex::Range,
        "x" | "by" => Lex::Times,
        "no" | "not" | "without" | "negative" | "free" | "denies" => Lex::Negation,
        _ => Lex::Other,
    }
}

/// Abbreviation → expanded words.
fn expand_abbreviation(w: &str) -> Option<[&'static str; 3]> {
    match w {
        "lul" => Some(["left", "upper", "lobe"]),
        "lll" => Some(["left", "lower", "lobe"]),
        "rul" => Some(["right", "upper", "lobe"]),
        "rml" => Some(["right", "middle", "lobe"]),
        "rll" => Some(["right", "lower", "lobe"]),
        _ => None,
    }
}

fn lexemes(tokens: &[Token]) -> Vec<Lexeme> {
    let mut out = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        match &t.kind {
            TokKind::Newline => out.push(Lexeme {
                lex: Lex::Boundary,
                span: t.span,
                norm: "\n".into(),
            }),
            TokKind::Punct(c) => {
                let lex = match c {
                    '.' | ';' | '!' | '?' => Lex::Boundary,
                    '-' | '\u{2013}' => Lex::Range,
                    _ => Lex::Other,
                };
                out.push(Lexeme {
                    lex,
                    span: t.span,
                    norm: t.text.clone(),
                });
            }
            TokKind::Number(v) => out.push(Lexeme {
                lex: Lex::Number(*v),
                span: t.span,
                norm: t.text.clone(),
            }),
            TokKind::Word => {
                if let Some(words) = expand_abbreviation(&t.text) {
                    for w in words {
                        out.push(Lexeme {
                            lex: word_lex(w),
                            span: t.span,
                            norm: w.to_string(),
                        });
                    }
                    continue;
                }
                let next_is_level = tokens.get(i + 1).is_some_and(|n| {
                    matches!(word_lex(&n.text), Lex::Level(_) | Lex::Anatomy)
                        && n.kind == TokKind::Word
                });
                let (lex, norm) = match t.text.as_str() {
                    "l" if next_is_level => (Lex::Side(Laterality::Left), "left".to_string()),
                    "r" if next_is_level => (Lex::Side(Laterality::Right), "right".to_string()),
                    w => (word_lex(w), w.to_string()),
                };
                out.push(Lexeme {
                    lex,
                    span: t.span,
                    norm,
                });
            }
        }
    }
    out
}

fn normalized(lexemes: &[Lexeme]) -> String {
    let mut s = String::new();
    let mut prev_joiner = true;
    for l in lexemes {
        let attach_left = matches!(l.norm.as_str(), "." | "," | ";" | ":" | "!" | "?" | ")" | "\n");
        let joiner = l.norm == "-" || l.norm == "(" || l.norm == "\n";
        if !s.is_empty() && !attach_left && !prev_joiner && l.norm != "-" {
            s.push(' ');
        }
        s.push_str(&l.norm);
        prev_joiner = joiner;
    }
    s
}

#[derive(Debug)]
struct Mention {
    first: usize,
    last: usize,
    laterality: Laterality,
    level: LobeLevel,
}

#[derive(Debug)]
enum Item {
    Size { first: usize, last: usize, range: SizeRange },
    Count { first: usize, last: usize, count: u32 },
}

impl Item {
    fn range(&self) -> (usize, usize) {
        match self {
            Item::Size { first, last, .. } | Item::Count { first, last, .. } => (*first, *last),
        }
    }
}

fn is_location_lex(l: Lex) -> bool {
    matches!(l, Lex::Side(_) | Lex::Level(_) | Lex::Standalone(..) | Lex::Anatomy)
}

/// Finds mentions in `lx[range]`; returns (valid mentions, rejected spans).
fn find_mentions(lx: &[Lexeme], lo: usize, hi: usize) -> (Vec<Mention>, Vec<Span>) {
    let mut mentions = Vec::new();
    let mut rejected = Vec::new();
    let mut i = lo;
    while i < hi {
        if !matches!(lx[i].lex, Lex::Side(_) | Lex::Level(_) | Lex::Standalone(..)) {
            i += 1;
            continue;
        }
        let first = i;
        let mut last = i;
        let mut j = i;
        while j < hi {
            match lx[j].lex {
                l if is_location_lex(l) => last = j,
                Lex::Connector => {}
                Lex::Range if lx[j].norm == "-" => {}
                _ => break,
            }
            j += 1;
        }
        let run = &lx[first..=last];
        let mut sides: Vec<Laterality> = Vec::new();
        let mut levels: Vec<LobeLevel> = Vec::new();
        let mut anchored = false;
        for l in run {
            match l.lex {
                Lex::Side(s) => sides.push(s),
                Lex::Level(v) => levels.push(v),
                Lex::Standalone(s, v) => {
                    if s != Laterality::Unspecified {
                        sides.push(s);
                    }
                    levels.push(v);
                    anchored = true;
                }
                Lex::Anatomy => anchored = true,
                _ => {}
            }
        }
        sides.dedup();
        levels.dedup();
        let followed_by_finding = lx
            .get(last + 1)
            .is_some_and(|l| matches!(l.lex, Lex::Finding));
        let span = Span {
            start: run[0].span.start,
            end: run[run.len() - 1].span.end,
        };
        let valid = sides.len() <= 1
            && levels.len() <= 1
            && (anchored || (!sides.is_empty() && levels.is_empty() && followed_by_finding));
        let laterality = sides.first().copied().unwrap_or(Laterality::Unspecified);
        let level = levels.first().copied().unwrap_or(LobeLevel::Unspecified);
        if valid && !(level == LobeLevel::Middle && laterality == Laterality::Left) {
            mentions.push(Mention {
                first,
                last,
                laterality,
                level,
            });
        } else {
            rejected.push(span);
        }
        i = last + 1;
    }
    (mentions, rejected)
}

fn positive_number(l: &Lexeme) -> Option<f64> {
    match l.lex {
        Lex::Number(v) if v > 0.0 => Some(v),
        _ => None,
    }
}

fn find_items(lx: &[Lexeme], lo: usize, hi: usize) -> Vec<Item> {
    let mut items = Vec::new();
    let mut consumed = vec![false; hi];
    let mut i = lo;
    // Sizes: NUM ((-|to|x|by) NUM)* UNIT
    while i < hi {
        let Some(v0) = positive_number(&lx[i]) else {
            i += 1;
            continue;
        };
        let mut values = vec![v0];
        let mut j = i + 1;
        while j + 1 < hi
            && matches!(lx[j].lex, Lex::Range | Lex::Times)
            && positive_number(&lx[j + 1]).is_some()
        {
            values.push(positive_number(&lx[j + 1]).unwrap());
            j += 2;
        }
        if j < hi {
            if let Lex::Unit(factor) = lx[j].lex {
                let min = values.iter().cloned().fold(f64::INFINITY, f64::min) * factor;
                let max = values.iter().cloned().fold(0.0, f64::max) * factor;
                items.push(Item::Size {
                    first: i,
                    last: j,
                    range: SizeRange {
                        min_mm: min,
                        max_mm: max,
                    },
                });
                for c in consumed.iter_mut().take(j + 1).skip(i) {
                    *c = true;
                }
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    // Counts: (COUNTWORD | integer) up to two modifiers, then a finding noun.
    for i in lo..hi {
        if consumed[i] {
            continue;
        }
        let count = match lx[i].lex {
            Lex::CountWord(n) => n,
            Lex::Number(v) if v.fract() == 0.0 && v >= 1.0 && !lx[i].norm.contains('.') => v as u32,
            _ => continue,
        };
        let mut j = i + 1;
        let mut hops = 0;
        while j < hi && hops <= 2 {
            match lx[j].lex {
                Lex::Finding => {
                    items.push(Item::Count {
                        first: i,
                        last: j,
                        count,
                    });
                    break;
                }
                _ if consumed[j] => j += 1,
                Lex::Other => {
                    hops += 1;
                    j += 1;
                }
                _ => break,
            }
        }
    }
    items.sort_by_key(|it| it.range());
    items
}

/// Parses free text into location descriptors. Total and deterministic.
pub fn parse_description(text: &str) -> ParseReport {
    let tokens = tokenize(text);
    let lx = lexemes(&tokens);
    let mut descriptors = Vec::new();
    let mut unrecognized = Vec::new();

    let mut start = 0;
    while start < lx.len() {
        let mut end = start;
        while end < lx.len() && lx[end].lex != Lex::Boundary {
            end += 1;
        }
        let negation_at = (start..end).find(|&k| lx[k].lex == Lex::Negation);
        let (mentions, rejected) = find_mentions(&lx, start, end);
        unrecognized.extend(rejected);
        let items = find_items(&lx, start, end);

        let mut sizes: Vec<Option<SizeRange>> = vec![None; mentions.len()];
        let mut counts: Vec<Option<u32>> = vec![None; mentions.len()];
        for item in &items {
            let (f, l) = item.range();
            let nearest = mentions
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let d = if l < m.first {
                        m.first - l
                    } else if f > m.last {
                        f - m.last
                    } else {
                        0
                    };
                    (d, k)
                })
                .min();
            match (nearest, item) {
                (None, _) => unrecognized.push(Span {
                    start: lx[f].span.start,
                    end: lx[l].span.end,
                }),
                (Some((_, k)), Item::Size { range, .. }) => {
                    sizes[k] = Some(match sizes[k] {
                        None => *range,
                        Some(prev) => SizeRange {
                            min_mm: prev.min_mm.min(range.min_mm),
                            max_mm: prev.max_mm.max(range.max_mm),
                        },
                    });
                }
                (Some((_, k)), Item::Count { count, .. }) => {
                    counts[k] = Some(counts[k].map_or(*count, |c| c.max(*count)));
                }
            }
        }

        for (k, m) in mentions.iter().enumerate() {
            let polarity = match negation_at {
                Some(n) if n < m.first => Polarity::Negated,
                _ => Polarity::Affirmed,
            };
            descriptors.push(LocationDescriptor {
                laterality: m.laterality,
                lobe: m.level,
                size_mm: sizes[k],
                count: counts[k],
                polarity,
                source_span: Span {
                    start: lx[m.first].span.start,
                    end: lx[m.last].span.end,
                },
            });
        }
        start = end + 1;
    }
    unrecognized.sort();
    ParseReport {
        descriptors,
        unrecognized_spans: unrecognized,
        normalized_text: normalized(&lx),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchResult {
    Match,
    Mismatch,
    Inconclusive,
}

/// Axis-wise comparison; `Unspecified` on the descriptor matches anything,
/// and a negated descriptor flips Match and Mismatch.
pub fn descriptor_matches(location: Location, d: &LocationDescriptor) -> MatchResult {
    let Location::Lobe(lobe) = location else {
        return MatchResult::Inconclusive;
    };
    let side_ok = d.laterality == Laterality::Unspecified || d.laterality == lobe.laterality();
    let level_ok = d.lobe == LobeLevel::Unspecified || d.lobe == lobe.level();
    let raw = if side_ok && level_ok {
        MatchResult::Match
    } else {
        MatchResult::Mismatch
    };
    match (d.polarity, raw) {
        (Polarity::Affirmed, r) => r,
        (Polarity::Negated, MatchResult::Match) => MatchResult::Mismatch,
        (Polarity::Negated, _) => MatchResult::Match,
    }
}

/// Per-candidate cross-check of detector output against the text.
///
/// Match when an affirmed descriptor agrees with the candidate's lobe;
/// Mismatch when affirmed descriptors exist and all disagree, or when only
/// negated descriptors exist and one of them names the candidate's lobe.
/// Everything else (no descriptors, background location) is Inconclusive.
pub fn rule_prefilter(
    candidates: &[NoduleCandidate],
    lobes: &LobeMap,
    report: &ParseReport,
) -> Result<BTreeMap<String, MatchResult>> {
    let mut out = BTreeMap::new();
    let (affirmed, negated): (Vec<_>, Vec<_>) = report
        .descriptors
        .iter()
        .partition(|d| d.polarity == Polarity::Affirmed);
    for c in candidates {
        let loc = locate_candidate(c, lobes)?;
        let result = if report.descriptors.is_empty() || loc == Location::Background {
            MatchResult::Inconclusive
        } else if affirmed
            .iter()
            .any(|d| descriptor_matches(loc, d) == MatchResult::Match)
        {
            MatchResult::Match
        } else if !affirmed.is_empty() {
            MatchResult::Mismatch
        } else if negated
            .iter()
            .any(|d| descriptor_matches(loc, d) == MatchResult::Mismatch)
        {
            MatchResult::Mismatch
        } else {
            MatchResult::Inconclusive
        };
        out.insert(c.id.clone(), result);
    }
    Ok(out)
}

/// Hand-labelled expectation for one corpus line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedDescriptor {
    pub laterality: Laterality,
    pub lobe: LobeLevel,
    #[serde(default)]
    pub size_mm: Option<[f64; 2]>,
    #[serde(default)]
    pub count: Option<u32>,
    pub polarity: Polarity,
}

impl ExpectedDescriptor {
    pub fn agrees_with(&self, d: &LocationDescriptor) -> bool {
        let size_ok = match (self.size_mm, d.size_mm) {
            (None, None) => true,
            (Some([lo, hi]), Some(r)) => (lo - r.min_mm).abs() < 1e-9 && (hi - r.max_mm).abs() < 1e-9,
            _ => false,
        };
        self.laterality == d.laterality
            && self.lobe == d.lobe
            && self.polarity == d.polarity
            && self.count == d.count
            && size_ok
    }
}

/// One line of a JSONL corpus: `{"text": ..., "expected": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub text: String,
    pub expected: Vec<ExpectedDescriptor>,
}

pub fn parse_corpus(jsonl: &str) -> Result<Vec<CorpusEntry>> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                index: i,
                field: "<line>".into(),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusFailure {
    pub index: usize,
    pub text: String,
    pub expected: Vec<ExpectedDescriptor>,
    pub got: Vec<LocationDescriptor>,
}

/// Indices of corpus entries whose parse disagrees with the hand labels.
pub fn check_corpus(entries: &[CorpusEntry]) -> Vec<CorpusFailure> {
    entries
        .iter()
        .enumerate()
        .filter_map(|(index, e)| {
            let got = parse_description(&e.text).descriptors;
            let ok = got.len() == e.expected.len()
                && e.expected.iter().zip(&got).all(|(x, d)| x.agrees_with(d));
            (!ok).then(|| CorpusFailure {
                index,
                text: e.text.clone(),
                expected: e.expected.clone(),
                got,
            })
        })
        .collect()
}
