//! Attribute normalization and the integrated attribute pool.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which modality an attribute was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSource {
    Image,
    Text,
    Both,
}

/// An original surface string together with the modality it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurfaceForm {
    pub text: String,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub text: String,
    pub source: AttributeSource,
    pub raw_forms: Vec<SurfaceForm>,
}

impl Attribute {
    /// Builds a single-modality attribute from a surface string. Returns
    /// `None` when the string normalizes to nothing.
    pub fn from_surface(raw: &str, modality: Modality) -> Option<Self> {
        let text = normalize_attribute(raw);
        if text.is_empty() {
            return None;
        }
        Some(Self {
            text,
            source: match modality {
                Modality::Image => AttributeSource::Image,
                Modality::Text => AttributeSource::Text,
            },
            raw_forms: alloc::vec![SurfaceForm {
                text: raw.into(),
                modality,
            }],
        })
    }

    fn absorb(&mut self, other: &Attribute) {
        for form in &other.raw_forms {
            if !self.raw_forms.contains(form) {
                self.raw_forms.push(form.clone());
            }
        }
        let has = |m| self.raw_forms.iter().any(|f| f.modality == m);
        self.source = match (has(Modality::Image), has(Modality::Text)) {
            (true, true) => AttributeSource::Both,
            (false, true) => AttributeSource::Text,
            _ => AttributeSource::Image,
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePool {
    pub sample_id: String,
    pub attributes: Vec<Attribute>,
    pub n_image: usize,
    pub n_text: usize,
}

impl AttributePool {
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.text.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttributeError {
    #[error("attribute pool for '{0}' is empty: no attributes from either modality")]
    EmptyPool(String),
}

/// Options for [`merge_pools`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MergeOptions {
    /// When set, two attributes whose normalized edit-distance similarity
    /// is at least this value are merged.
    pub fuzzy_threshold: Option<f64>,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '。' | '，'
                | '、'
                | '；'
                | '：'
                | '！'
                | '？'
                | '“'
                | '”'
                | '‘'
                | '’'
                | '「'
                | '」'
                | '『'
                | '』'
                | '（'
                | '）'
                | '《'
                | '》'
                | '【'
                | '】'
                | '…'
                | '\u{2014}'
                | '·'
                | '•'
        )
}

/// Strips a leading list enumerator such as `3.` or `12)`.
fn strip_enumerator(s: &str) -> &str {
    let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return s;
    }
    let rest = &s[digits..];
    match rest.chars().next() {
        Some('.') | Some(')') | Some('、') => {
            let after = &rest[rest.chars().next().unwrap().len_utf8()..];
            if after.is_empty() || after.starts_with(char::is_whitespace) {
                after
            } else {
                s
            }
        }
        _ => s,
    }
}

fn normalize_once(s: &str) -> String {
    let lowered = s.to_lowercase();
    let collapsed: Vec<&str> = lowered.split_whitespace().collect();
    let joined = collapsed.join(" ");
    let no_enum = strip_enumerator(&joined);
    no_enum.trim_matches(|c: char| is_punct(c) || c.is_whitespace()).into()
}

/// Canonical form of an attribute phrase: lowercased, internal whitespace
/// collapsed to single spaces, leading list markers and punctuation at both
/// ends removed. Idempotent.
pub fn normalize_attribute(s: &str) -> String {
    let mut cur = normalize_once(s);
    loop {
        let next = normalize_once(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Splits an extraction reply on newlines and commas (ASCII and CJK),
/// normalizes every item, drops empties and duplicates, and keeps at most
/// `cap` items in order of first appearance.
pub fn parse_attribute_list(reply: &str, modality: Modality, cap: usize) -> Vec<Attribute> {
    let mut out: Vec<Attribute> = Vec::new();
    for item in reply.split(['\n', '\r', ',', '，', '、', ';', '；']) {
        if out.len() >= cap {
            break;
        }
        let Some(attr) = Attribute::from_surface(item.trim(), modality) else {
            continue;
        };
        match out.iter_mut().find(|a| a.text == attr.text) {
            Some(existing) => existing.absorb(&attr),
            None => out.push(attr),
        }
    }
    out
}

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = alloc::vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - distance / max_len`; identical strings (including two empties) give 1.
pub fn similarity_ratio(a: &str, b: &str) -> f64 {
    let len = a.chars().count().max(b.chars().count());
    if len == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b) as f64 / len as f64
}

/// Set union of the two modality lists keyed by normalized text.
///
/// Image-derived attributes come first, then text-derived ones, each group
/// in input order. An attribute seen in both lists becomes a single entry
/// with source `Both`.
pub fn merge_pools(
    sample_id: &str,
    from_image: &[Attribute],
    from_text: &[Attribute],
    opts: MergeOptions,
) -> Result<AttributePool, AttributeError> {
    let mut attributes: Vec<Attribute> = Vec::new();
    for attr in from_image.iter().chain(from_text) {
        let key = normalize_attribute(&attr.text);
        if key.is_empty() {
            continue;
        }
        let found = attributes.iter_mut().find(|a| {
            a.text == key
                || opts
                    .fuzzy_threshold
                    .is_some_and(|t| similarity_ratio(&a.text, &key) >= t)
        });
        match found {
            Some(existing) => existing.absorb(attr),
            None => {
                let mut fresh = attr.clone();
                fresh.text = key;
                attributes.push(fresh);
            }
        }
    }
    if attributes.is_empty() {
        return Err(AttributeError::EmptyPool(sample_id.into()));
    }
    Ok(AttributePool {
        sample_id: sample_id.into(),
        attributes,
        n_image: from_image.len(),
        n_text: from_text.len(),
    })
}
