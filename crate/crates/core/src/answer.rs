//! Parsing of binary verification answers.

use alloc::string::String;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryAnswer {
    Yes,
    No,
    Unparseable,
}

impl BinaryAnswer {
    /// Collapses `Unparseable` to `No`; the verifier rejects what it cannot read.
    pub fn conservative(self) -> bool {
        self == BinaryAnswer::Yes
    }
}

const AFFIRMATIVE: [&str; 4] = ["yes", "y", "是", "正确"];
const NEGATIVE: [&str; 4] = ["no", "n", "否", "不正确"];

fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF)
}

/// Reads the leading Yes/No token of a reply.
///
/// Leading whitespace and punctuation are skipped and the match is
/// case-insensitive. For Latin tokens the leading token is the maximal run
/// of alphanumerics; for CJK the reply must start with one of the
/// recognized words, longest first (`不正确` before `正确`).
pub fn parse_binary_answer(text: &str) -> BinaryAnswer {
    let trimmed = text.trim_start_matches(|c: char| {
        c.is_whitespace() || c.is_ascii_punctuation() || (!c.is_alphanumeric() && !is_cjk(c))
    });
    if trimmed.starts_with(is_cjk) {
        // longest recognized word wins
        let mut words: alloc::vec::Vec<(&str, BinaryAnswer)> = AFFIRMATIVE
            .iter()
            .map(|w| (*w, BinaryAnswer::Yes))
            .chain(NEGATIVE.iter().map(|w| (*w, BinaryAnswer::No)))
            .filter(|(w, _)| w.starts_with(is_cjk))
            .collect();
        words.sort_by_key(|(w, _)| core::cmp::Reverse(w.chars().count()));
        return words
            .into_iter()
            .find(|(w, _)| trimmed.starts_with(w))
            .map_or(BinaryAnswer::Unparseable, |(_, a)| a);
    }
    let token: String = trimmed
        .chars()
        .take_while(|c| c.is_alphanumeric() && !is_cjk(*c))
        .flat_map(char::to_lowercase)
        .collect();
    if AFFIRMATIVE.contains(&token.as_str()) {
        BinaryAnswer::Yes
    } else if NEGATIVE.contains(&token.as_str()) {
        BinaryAnswer::No
    } else {
        BinaryAnswer::Unparseable
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(parse_binary_answer("Yes, the bottle is present."), BinaryAnswer::Yes);
        assert_eq!(parse_binary_answer("  no"), BinaryAnswer::No);
        assert_eq!(parse_binary_answer("The image is unclear."), BinaryAnswer::Unparseable);
    }

    #[test]
    fn variants() {
        assert_eq!(parse_binary_answer("YES"), BinaryAnswer::Yes);
        assert_eq!(parse_binary_answer("**No.**"), BinaryAnswer::No);
        assert_eq!(parse_binary_answer("y"), BinaryAnswer::Yes);
        assert_eq!(parse_binary_answer("N/A"), BinaryAnswer::No);
        assert_eq!(parse_binary_answer("Nope"), BinaryAnswer::Unparseable);
        assert_eq!(parse_binary_answer("yesterday"), BinaryAnswer::Unparseable);
        assert_eq!(parse_binary_answer(""), BinaryAnswer::Unparseable);
    }

    #[test]
    fn chinese() {
        assert_eq!(parse_binary_answer("是的，图中有花瓶。"), BinaryAnswer::Yes);
        assert_eq!(parse_binary_answer("否"), BinaryAnswer::No);
        assert_eq!(parse_binary_answer("正确"), BinaryAnswer::Yes);
        assert_eq!(parse_binary_answer("不正确。"), BinaryAnswer::No);
        assert_eq!(parse_binary_answer("「是」"), BinaryAnswer::Yes);
        assert_eq!(parse_binary_answer("图像不清楚"), BinaryAnswer::Unparseable);
    }

    #[test]
    fn conservative_reading() {
        assert!(BinaryAnswer::Yes.conservative());
        assert!(!BinaryAnswer::No.conservative());
        assert!(!BinaryAnswer::Unparseable.conservative());
    }
}
