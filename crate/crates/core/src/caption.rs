//! Deterministic caption decomposition.
//!
//! Captions are split into sentence/clause fragments before any model call;
//! the language model refines fragment-to-panel assignment later but never
//! replaces this structure, which keeps routing auditable. Identifier
//! parsing follows a fixed grammar: `(A)`, `A)`, `A.`, `A:`, ranges like
//! `A–C`, lowercase variants, and Roman numerals I–XII. Matching is
//! case-insensitive while parsed anchors preserve the source case.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Marker vocabulary used to anchor caption phrases to visual markers.
/// Singular and plural forms are both recognized; entries are canonical
/// singulars. Configurable; these are the shipped defaults.
pub const DEFAULT_MARKER_KEYWORDS: [&str; 8] =
    ["arrow", "arrowhead", "asterisk", "star", "circle", "dashed box", "inset", "bracket"];

/// Abbreviations whose trailing period never ends a sentence.
pub const DEFAULT_ABBREVIATIONS: [&str; 12] = [
    "fig.", "figs.", "al.", "vs.", "e.g.", "i.e.", "no.", "ca.", "approx.", "cf.", "etc.", "resp.",
];

const ROMAN: [&str; 12] = ["I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI", "XII"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionFragment {
    pub text: String,
    /// Panel identifiers this fragment refers to, after range expansion and
    /// forward inheritance from the nearest preceding anchored fragment.
    pub anchors: Vec<String>,
    pub marker_keywords: Vec<String>,
    /// Byte offsets of `text` in the source caption.
    pub span: (usize, usize),
    /// True when the fragment names several panels with contrastive
    /// phrasing ("in A but not B"); such fragments are routed to every
    /// named panel and flagged for a model-assisted re-check.
    pub ambiguous: bool,
}

/// True for a single ASCII letter or a Roman numeral in I..XII written in
/// one consistent case.
pub fn is_valid_identifier(s: &str) -> bool {
    if s.len() == 1 && s.chars().next().unwrap().is_ascii_alphabetic() {
        return true;
    }
    roman_value(s).is_some() && (s.chars().all(|c| c.is_ascii_uppercase()) || s.chars().all(|c| c.is_ascii_lowercase()))
}

fn roman_value(s: &str) -> Option<usize> {
    let upper = s.to_ascii_uppercase();
    ROMAN.iter().position(|r| *r == upper).map(|i| i + 1)
}

fn roman_for(value: usize, lowercase: bool) -> String {
    let s = ROMAN[value - 1];
    if lowercase {
        s.to_ascii_lowercase()
    } else {
        s.to_string()
    }
}

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // Ordered alternation: parenthesized forms win over bare ranges,
        // which win over suffix forms, at the same start position.
        Regex::new(
            r"(?x)
            \(\s*(?P<p1>[A-Za-z]{1,4})(?:\s*[-\u{2013}\u{2014}]\s*(?P<p2>[A-Za-z]{1,4}))?\s*\)
            | (?P<r1>[A-Za-z]{1,4})\s*[-\u{2013}\u{2014}]\s*(?P<r2>[A-Za-z]{1,4})
            | (?P<s1>[A-Za-z]{1,4})(?P<suffix>[).:])
            ",
        )
        .expect("identifier grammar compiles")
    })
}

/// Expand a (possibly range) token pair into identifiers, preserving case.
/// Returns `None` when the tokens do not form valid identifiers or a valid
/// ascending range.
fn expand(tok1: &str, tok2: Option<&str>) -> Option<Vec<String>> {
    match tok2 {
        None => {
            if is_valid_identifier(tok1) {
                Some(vec![tok1.to_string()])
            } else {
                None
            }
        }
        Some(tok2) => {
            // Roman expansion takes precedence: a range like I–X reads as
            // numerals one through ten, not letters I..X.
            if let (Some(a), Some(b)) = (roman_value(tok1), roman_value(tok2)) {
                if a <= b {
                    let lowercase = tok1.chars().next().unwrap().is_ascii_lowercase();
                    return Some((a..=b).map(|v| roman_for(v, lowercase)).collect());
                }
            }
            let (c1, c2) = (tok1.chars().next().unwrap(), tok2.chars().next().unwrap());
            if tok1.len() == 1 && tok2.len() == 1 && c1.is_ascii_alphabetic() && c2.is_ascii_alphabetic() {
                let start = c1.to_ascii_uppercase() as u8;
                let end = c2.to_ascii_uppercase() as u8;
                if start <= end {
                    let lowercase = c1.is_ascii_lowercase();
                    return Some(
                        (start..=end)
                            .map(|b| {
                                let ch = b as char;
                                if lowercase {
                                    ch.to_ascii_lowercase().to_string()
                                } else {
                                    ch.to_string()
                                }
                            })
                            .collect(),
                    );
                }
            }
            None
        }
    }
}

fn char_before(text: &str, pos: usize) -> Option<char> {
    text[..pos].chars().next_back()
}

fn char_at(text: &str, pos: usize) -> Option<char> {
    text[pos..].chars().next()
}

/// Extract panel identifier tokens from free text, in order of first
/// occurrence, deduplicated, case preserved.
pub fn parse_identifiers(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for caps in token_regex().captures_iter(text) {
        let whole = caps.get(0).unwrap();
        let expanded = if let Some(p1) = caps.name("p1") {
            expand(p1.as_str(), caps.name("p2").map(|m| m.as_str()))
        } else if let (Some(r1), Some(r2)) = (caps.name("r1"), caps.name("r2")) {
            // Bare range: require standalone token context on both sides.
            let before_ok = char_before(text, whole.start())
                .map_or(true, |c| !c.is_ascii_alphanumeric() && c != '.');
            let after_ok = char_at(text, whole.end()).map_or(true, |c| !c.is_ascii_alphanumeric());
            if before_ok && after_ok {
                expand(r1.as_str(), Some(r2.as_str()))
            } else {
                None
            }
        } else if let Some(s1) = caps.name("s1") {
            let suffix = caps.name("suffix").unwrap().as_str();
            let before_ok = char_before(text, whole.start())
                .map_or(true, |c| !c.is_ascii_alphanumeric() && c != '.');
            // "A." and "A:" need trailing space or end; "A)" also tolerates
            // trailing punctuation such as "see A)," in running text.
            let after = char_at(text, whole.end());
            let after_ok = match suffix {
                ")" => after.map_or(true, |c| !c.is_ascii_alphanumeric()),
                _ => after.map_or(true, |c| c.is_whitespace()),
            };
            if before_ok && after_ok {
                expand(s1.as_str(), None)
            } else {
                None
            }
        } else {
            None
        };
        if let Some(ids) = expanded {
            for id in ids {
                if !out.contains(&id) {
                    out.push(id);
                }
            }
        }
    }
    out
}

/// Find marker keywords from `lexicon` in `text`, singular or plural,
/// case-insensitively. Returns canonical (singular) entries ordered by
/// first occurrence.
pub fn detect_marker_keywords<S: AsRef<str>>(text: &str, lexicon: &[S]) -> Vec<String> {
    let mut hits: Vec<(usize, &str)> = Vec::new();
    for entry in lexicon {
        let entry = entry.as_ref();
        let pattern = format!(r"(?i)\b{}(?:es|s)?\b", regex::escape(entry).replace(r"\ ", r"\s+"));
        let re = Regex::new(&pattern).expect("keyword pattern compiles");
        if let Some(m) = re.find(text) {
            hits.push((m.start(), entry));
        }
    }
    hits.sort_by_key(|(pos, _)| *pos);
    let mut out: Vec<String> = Vec::new();
    for (_, entry) in hits {
        if !out.iter().any(|e| e == entry) {
            out.push(entry.to_string());
        }
    }
    out
}

fn default_lexicon() -> Vec<String> {
    DEFAULT_MARKER_KEYWORDS.iter().map(|s| s.to_string()).collect()
}

/// Contrastive cues that make a multi-anchor fragment ambiguous to route.
const CONTRASTIVE_CUES: [&str; 4] = ["but not", "unlike", "whereas", "in contrast to"];

/// Split a caption into fragments at sentence terminators (. ! ? ;) with an
/// abbreviation guard, attach identifier anchors (with forward inheritance)
/// and marker keywords, and record byte spans. Fragment spans cover the
/// caption up to whitespace and never overlap.
pub fn split_fragments(caption: &str) -> Vec<CaptionFragment> {
    split_fragments_with(caption, &default_lexicon(), &default_abbreviations())
}

pub fn default_abbreviations() -> Vec<String> {
    DEFAULT_ABBREVIATIONS.iter().map(|s| s.to_string()).collect()
}

pub fn split_fragments_with(caption: &str, lexicon: &[String], abbreviations: &[String]) -> Vec<CaptionFragment> {
    let bytes = caption.as_bytes();
    let mut boundaries: Vec<usize> = Vec::new(); // exclusive end of each raw segment
    let mut segment_start = 0usize;
    for (i, ch) in caption.char_indices() {
        let is_terminal = matches!(ch, '.' | '!' | '?' | ';');
        if !is_terminal {
            continue;
        }
        let end = i + ch.len_utf8();
        if ch == '.' {
            // Decimal point: digit on both sides.
            let prev_digit = i > 0 && bytes[i - 1].is_ascii_digit();
            let next_digit = end < bytes.len() && bytes[end].is_ascii_digit();
            if prev_digit && next_digit {
                continue;
            }
            // Internal dot of a dotted abbreviation ("e.g" + '.').
            if end < bytes.len() && bytes[end].is_ascii_alphabetic() {
                continue;
            }
            // Abbreviation guard: the dotted token ending here.
            let token_start = caption[..end]
                .rfind(|c: char| c.is_whitespace() || c == '(' || c == '[')
                .map(|p| p + 1)
                .unwrap_or(0);
            let token = caption[token_start..end].to_ascii_lowercase();
            if abbreviations.iter().any(|a| a.eq_ignore_ascii_case(&token)) {
                continue;
            }
            // Identifier-leading form "A. Tumor region.": keep the label
            // with its clause instead of splitting it off.
            let clause = caption[segment_start..i].trim();
            if is_valid_identifier(clause) {
                continue;
            }
        }
        boundaries.push(end);
        segment_start = end;
    }
    if segment_start < caption.len() {
        boundaries.push(caption.len());
    }

    let mut fragments: Vec<CaptionFragment> = Vec::new();
    let mut last_anchors: Vec<String> = Vec::new();
    let mut start = 0usize;
    for end in boundaries {
        let raw = &caption[start..end];
        let leading_ws = raw.len() - raw.trim_start().len();
        let trimmed = raw.trim();
        let span = (start + leading_ws, start + leading_ws + trimmed.len());
        start = end;
        if trimmed.is_empty() {
            continue;
        }
        let own = parse_identifiers(trimmed);
        let anchors = if own.is_empty() { last_anchors.clone() } else { own.clone() };
        if !own.is_empty() {
            last_anchors = own.clone();
        }
        let lowered = trimmed.to_ascii_lowercase();
        let ambiguous = anchors.len() >= 2 && CONTRASTIVE_CUES.iter().any(|cue| lowered.contains(cue));
        fragments.push(CaptionFragment {
            text: trimmed.to_string(),
            anchors,
            marker_keywords: detect_marker_keywords(trimmed, lexicon),
            span,
            ambiguous,
        });
    }
    if fragments.is_empty() && !caption.trim().is_empty() {
        // Degenerate captions (no terminator at all are handled above; this
        // covers whitespace-only splits) yield one anchor-less fragment.
        let trimmed = caption.trim();
        let offset = caption.len() - caption.trim_start().len();
        fragments.push(CaptionFragment {
            text: trimmed.to_string(),
            anchors: parse_identifiers(trimmed),
            marker_keywords: detect_marker_keywords(trimmed, lexicon),
            span: (offset, offset + trimmed.len()),
            ambiguous: false,
        });
    }
    fragments
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orphan {
    pub anchor: String,
    pub fragment_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RouteResult {
    /// Panel identifier (as supplied by the caller) → fragment indices.
    pub assignments: BTreeMap<String, Vec<usize>>,
    /// Fragments with no usable anchor; they reach every panel.
    pub global: Vec<usize>,
    /// Anchors that matched no panel, reported rather than dropped.
    pub orphans: Vec<Orphan>,
}

/// Route fragments to panels by identifier. Matching is case-insensitive.
/// Every fragment lands somewhere: matched fragments go to each matching
/// panel, fragments whose anchors all miss (or that have no anchors) go to
/// the global bucket.
pub fn route_fragments(fragments: &[CaptionFragment], panel_identifiers: &[String]) -> RouteResult {
    assert!(!panel_identifiers.is_empty(), "route_fragments requires at least one panel identifier");
    let mut result = RouteResult::default();
    for id in panel_identifiers {
        result.assignments.entry(id.clone()).or_default();
    }
    for (i, fragment) in fragments.iter().enumerate() {
        if fragment.anchors.is_empty() {
            result.global.push(i);
            continue;
        }
        let mut matched = false;
        for anchor in &fragment.anchors {
            let hit = panel_identifiers.iter().find(|p| p.eq_ignore_ascii_case(anchor));
            match hit {
                Some(panel) => {
                    let bucket = result.assignments.get_mut(panel).expect("bucket pre-created");
                    if !bucket.contains(&i) {
                        bucket.push(i);
                    }
                    matched = true;
                }
                None => result.orphans.push(Orphan { anchor: anchor.clone(), fragment_index: i }),
            }
        }
        if !matched {
            result.global.push(i);
        }
    }
    result
}
