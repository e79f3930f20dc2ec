use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub const DEFAULT_GROUNDING_THRESHOLD: f64 = 0.6;

/// Function words ignored when measuring grounding.
pub const STOP_WORDS: &[&str] = &[
    "a", "about", "above", "across", "after", "against", "all", "along", "also", "among", "an", "and", "any", "are",
    "around", "as", "at", "be", "been", "behind", "being", "below", "beside", "between", "both", "but", "by", "can",
    "could", "did", "do", "does", "down", "each", "either", "every", "few", "for", "from", "had", "has", "have",
    "he", "her", "here", "his", "how", "i", "if", "in", "inside", "into", "is", "it", "its", "itself", "just",
    "more", "most", "much", "near", "neither", "next", "no", "nor", "not", "of", "off", "on", "one", "onto",
    "or", "other", "our", "out", "over", "own", "same", "she", "so", "some", "such", "than", "that", "the",
    "their", "them", "then", "there", "these", "they", "this", "those", "through", "to", "too", "toward", "under",
    "up", "upon", "very", "was", "we", "were", "what", "when", "where", "which", "while", "who", "whose", "why",
    "will", "with", "within", "without", "would", "you", "your",
];

fn strip(token: &str) -> &str {
    token.trim_matches(|c: char| !c.is_alphanumeric())
}

/// Whitespace tokens with surrounding punctuation removed, lowercased.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(strip)
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().filter(|t| !strip(t).is_empty()).count()
}

/// First `n` words of `text`, keeping the original tokens.
pub fn truncate_words(text: &str, n: usize) -> String {
    text.split_whitespace()
        .filter(|t| !strip(t).is_empty())
        .take(n)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Light suffix stripping so that plural and simple verb forms match.
pub fn stem(word: &str) -> String {
    let w = word.to_lowercase();
    let n = w.len();
    if !w.is_ascii() {
        return w;
    }
    if n > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..n - 3]);
    }
    if w.ends_with("sses") {
        return w[..n - 2].to_string();
    }
    if n > 5 && w.ends_with("ing") {
        return w[..n - 3].to_string();
    }
    if n > 4 && w.ends_with("ed") {
        return w[..n - 2].to_string();
    }
    if n > 4 && ["ches", "shes", "xes", "zes"].iter().any(|s| w.ends_with(s)) {
        return w[..n - 2].to_string();
    }
    if n > 3 && w.ends_with('s') && !["ss", "us", "is"].iter().any(|s| w.ends_with(s)) {
        return w[..n - 1].to_string();
    }
    w
}

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.binary_search(&word).is_ok()
}

/// Distinct stemmed content words.
pub fn content_words(text: &str) -> BTreeSet<String> {
    words(text)
        .into_iter()
        .filter(|w| !is_stop_word(w))
        .map(|w| stem(&w))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub word_count: usize,
    pub budget: usize,
    /// Fraction of reference content words found in the candidate.
    pub grounding_overlap: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl ValidationReport {
    pub fn violation(&self) -> Option<String> {
        let mut parts = Vec::new();
        if self.word_count > self.budget {
            parts.push(format!("it has {} words but the limit is {}", self.word_count, self.budget));
        }
        if self.grounding_overlap < self.threshold {
            parts.push(format!(
                "it keeps only {:.0}% of the reference caption's content words",
                100.0 * self.grounding_overlap
            ));
        }
        (!parts.is_empty()).then(|| parts.join(" and "))
    }
}

pub fn validate_caption(caption: &str, v_cc: &str, budget: usize) -> ValidationReport {
    validate_caption_with(caption, v_cc, budget, DEFAULT_GROUNDING_THRESHOLD)
}

pub fn validate_caption_with(caption: &str, v_cc: &str, budget: usize, threshold: f64) -> ValidationReport {
    let reference = content_words(v_cc);
    let candidate = content_words(caption);
    let grounding_overlap = if reference.is_empty() {
        0.0
    } else {
        reference.intersection(&candidate).count() as f64 / reference.len() as f64
    };
    let word_count = word_count(caption);
    ValidationReport {
        word_count,
        budget,
        grounding_overlap,
        threshold,
        passed: word_count <= budget && grounding_overlap >= threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_words_are_sorted_for_binary_search() {
        assert!(STOP_WORDS.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn punctuation_is_not_a_word() {
        assert_eq!(words("A dog, on -- the sofa!"), ["a", "dog", "on", "the", "sofa"]);
        assert_eq!(word_count("A dog, on -- the sofa!"), 5);
        assert_eq!(truncate_words("one, two - three four", 2), "one, two");
    }

    #[test]
    fn stems_merge_simple_inflections() {
        assert_eq!(stem("dogs"), stem("dog"));
        assert_eq!(stem("benches"), stem("bench"));
        assert_eq!(stem("ponies"), "pony");
        assert_eq!(stem("glass"), "glass");
        assert_eq!(stem("bus"), "bus");
    }

    #[test]
    fn budget_rule() {
        let caption = vec!["word"; 31].join(" ");
        let r = validate_caption(&caption, "word", 30);
        assert_eq!(r.word_count, 31);
        assert!(!r.passed);
    }

    #[test]
    fn self_overlap_is_complete() {
        let v = "A photo of a person and an umbrella.";
        let r = validate_caption(v, v, 30);
        assert_eq!(r.grounding_overlap, 1.0);
        assert!(r.passed);
    }

    #[test]
    fn hand_counted_overlap() {
        // content words of the reference: dog, red, sofa; only sofa survives
        let r = validate_caption("a cat on a sofa", "a dog on a red sofa", 30);
        assert!((r.grounding_overlap - 1.0 / 3.0).abs() < 1e-12);
        assert!(!r.passed);
        let r = validate_caption("a red dog on a sofa", "a dog on a red sofa", 30);
        assert_eq!(r.grounding_overlap, 1.0);
    }

    #[test]
    fn empty_reference_cannot_ground() {
        let r = validate_caption("anything", "", 30);
        assert_eq!(r.grounding_overlap, 0.0);
        assert!(!r.passed);
    }
}
