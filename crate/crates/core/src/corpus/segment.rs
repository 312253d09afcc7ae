use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const DEFAULT_ABBREVIATIONS: &str = include_str!("../../data/abbreviations.txt");

/// One sentence of a segmented text. Offsets are in chars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub text: String,
    pub start: usize,
    pub end: usize,
    /// Whitespace between this sentence and the next (or the end of input).
    pub separator: String,
}

/// Rule-based sentence splitter driven by an abbreviation lexicon.
///
/// A boundary is a `.`, `!` or `?` (plus any closing brackets or quotes)
/// followed by whitespace and then an uppercase letter, digit or opening
/// bracket, unless the word ending at the period is a lexicon entry.
/// Decimal points never qualify because no whitespace follows them.
#[derive(Debug, Clone)]
pub struct Segmenter {
    abbreviations: HashSet<String>,
}

impl Default for Segmenter {
    fn default() -> Self {
        Segmenter::from_lexicon(DEFAULT_ABBREVIATIONS)
    }
}

impl Segmenter {
    /// Builds a segmenter from lexicon text: one entry per line, `#` comments.
    pub fn from_lexicon(lexicon: &str) -> Self {
        let abbreviations = lexicon
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Segmenter { abbreviations }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Segmenter::from_lexicon(&text))
    }

    pub fn is_abbreviation(&self, word: &str) -> bool {
        self.abbreviations.contains(&word.to_lowercase())
    }

    /// Splits `text` into sentences.
    ///
    /// Leading whitespace before the first sentence is not part of any
    /// segment; everything after it is reproduced by concatenating each
    /// segment's text and separator.
    pub fn segment(&self, text: &str) -> Vec<Segment> {
        let chars: Vec<char> = text.chars().collect();
        let first = chars.iter().position(|c| !c.is_whitespace());
        let Some(mut start) = first else {
            return vec![Segment {
                text: text.to_owned(),
                start: 0,
                end: chars.len(),
                separator: String::new(),
            }];
        };

        let mut segments = Vec::new();
        let mut i = start;
        while i < chars.len() {
            if !matches!(chars[i], '.' | '!' | '?') {
                i += 1;
                continue;
            }
            let mut end = i + 1;
            while end < chars.len() && matches!(chars[end], ')' | ']' | '"' | '\'' | '”' | '’')
            {
                end += 1;
            }
            let mut next = end;
            while next < chars.len() && chars[next].is_whitespace() {
                next += 1;
            }
            let followed_by_space = next > end;
            let opens_sentence = chars.get(next).is_some_and(|&c| {
                c.is_uppercase() || c.is_ascii_digit() || matches!(c, '(' | '[' | '"' | '“')
            });
            if followed_by_space
                && opens_sentence
                && !(chars[i] == '.' && self.ends_with_abbreviation(&chars[start..=i]))
            {
                segments.push(make_segment(&chars, start, end, next));
                start = next;
            }
            i = end.max(i + 1);
        }
        if start < chars.len() {
            let mut end = chars.len();
            while end > start && chars[end - 1].is_whitespace() {
                end -= 1;
            }
            segments.push(make_segment(&chars, start, end, chars.len()));
        }
        segments
    }

    fn ends_with_abbreviation(&self, sentence: &[char]) -> bool {
        let word_start = sentence
            .iter()
            .rposition(|c| c.is_whitespace())
            .map_or(0, |p| p + 1);
        let word: String = sentence[word_start..]
            .iter()
            .skip_while(|c| matches!(c, '(' | '[' | '"' | '“'))
            .collect();
        self.is_abbreviation(&word)
    }
}

fn make_segment(chars: &[char], start: usize, end: usize, next: usize) -> Segment {
    Segment {
        text: chars[start..end].iter().collect(),
        start,
        end,
        separator: chars[end..next].iter().collect(),
    }
}

/// Segments with the bundled abbreviation lexicon.
pub fn segment_sentences(text: &str) -> Vec<Segment> {
    Segmenter::default().segment(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(s: &str) -> Vec<String> {
        segment_sentences(s).into_iter().map(|s| s.text).collect()
    }

    #[test]
    fn decimals_and_units_are_protected() {
        assert_eq!(
            texts("IOP fell to 18.3 mm Hg. Safety was good."),
            ["IOP fell to 18.3 mm Hg.", "Safety was good."]
        );
    }

    #[test]
    fn no_terminal_period() {
        assert_eq!(
            texts("IOP fell in both groups"),
            ["IOP fell in both groups"]
        );
    }

    #[test]
    fn closing_bracket_then_capital() {
        assert_eq!(
            texts("Reduction was 10% (p=0.01). N=52."),
            ["Reduction was 10% (p=0.01).", "N=52."]
        );
    }

    #[test]
    fn abbreviations_do_not_split() {
        assert_eq!(
            texts(
                "Latanoprost vs. Timolol was compared (e.g. In week 4). Smith et al. Reported it."
            ),
            [
                "Latanoprost vs. Timolol was compared (e.g. In week 4).",
                "Smith et al. Reported it."
            ]
        );
    }

    #[test]
    fn lowercase_continuation_does_not_split() {
        assert_eq!(
            texts("Dose was 5 mg. daily for all."),
            ["Dose was 5 mg. daily for all."]
        );
    }

    #[test]
    fn hand_segmented_fixture() {
        let text =
            "BACKGROUND: Glaucoma is common. RESULTS: Mean IOP was 17.2 mm Hg vs. 18.9 mm Hg \
                    (P < .001). Adverse events occurred in 12% of patients! Was it safe? Yes.";
        assert_eq!(
            texts(text),
            [
                "BACKGROUND: Glaucoma is common.",
                "RESULTS: Mean IOP was 17.2 mm Hg vs. 18.9 mm Hg (P < .001).",
                "Adverse events occurred in 12% of patients!",
                "Was it safe?",
                "Yes."
            ]
        );
    }

    #[test]
    fn whitespace_only_is_one_segment() {
        assert_eq!(segment_sentences("   ").len(), 1);
    }

    #[test]
    fn edited_lexicon_changes_behaviour() {
        let s = Segmenter::from_lexicon("# none\n");
        assert_eq!(s.segment("A vs. B was done.").len(), 2);
        assert_eq!(Segmenter::default().segment("A vs. B was done.").len(), 1);
        assert!(Segmenter::from_lexicon("dr.\n").is_abbreviation("Dr."));
    }

    proptest! {
        #[test]
        fn segments_reconstruct_input(text in "[ a-zA-Z0-9.!?()%]{0,80}") {
            let segs = segment_sentences(&text);
            let lead: String = text.chars().take_while(|c| c.is_whitespace()).collect();
            let joined: String = segs.iter().map(|s| format!("{}{}", s.text, s.separator)).collect();
            if text.trim().is_empty() {
                prop_assert_eq!(joined, text.clone());
            } else {
                prop_assert_eq!(format!("{lead}{joined}"), text.clone());
            }
            let chars: Vec<char> = text.chars().collect();
            for s in &segs {
                let slice: String = chars[s.start..s.end].iter().collect();
                prop_assert_eq!(&slice, &s.text);
            }
        }
    }
}
