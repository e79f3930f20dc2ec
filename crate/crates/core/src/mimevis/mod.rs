//! Two-round caption synthesis with word-budget and grounding checks.
//!
//! Round one asks a vision-language model for an open description of the
//! stimulus; round two condenses that description to at most `N` words while
//! keeping the content of a reference caption.

mod client;
mod corpus;
mod prompt;
mod text;

pub use client::{
    ChatMessage, HttpClientConfig, HttpVlmClient, MockVlmClient, Transport, TransportError, VlmClient, VlmRequest,
    API_KEY_ENV,
};
#[cfg(feature = "http")]
pub use client::UreqTransport;
pub use corpus::{
    caption_jobs, corpus_captions, read_corpus, synthesize_corpus, write_corpus, CaptionCache, CaptionJob,
    CorpusConfig, CorpusRecord, CorpusSummary,
};
pub use prompt::{parse_round_two, reference_caption, violation_note, PromptTemplates, RoundTwoPrompt};
pub use text::{
    content_words, stem, truncate_words, validate_caption, validate_caption_with, word_count, words,
    ValidationReport, DEFAULT_GROUNDING_THRESHOLD, STOP_WORDS,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BUDGETS: [u32; 4] = [30, 45, 60, 75];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub client: String,
    pub round_one_template: String,
    pub round_two_template: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub v_cc: String,
    /// Word budget -> condensed caption.
    pub captions: BTreeMap<u32, String>,
    pub provenance: Provenance,
}

impl CaptionSet {
    pub fn get(&self, granularity: Granularity) -> Option<&str> {
        match granularity {
            Granularity::Reference => Some(&self.v_cc),
            Granularity::Words(n) => self.captions.get(&n).map(String::as_str),
            Granularity::Full => None,
        }
    }
}

/// Which caption level a semantic target is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Granularity {
    /// `v_cc`.
    Reference,
    /// `v_N`.
    Words(u32),
    /// Untruncated teacher tokens; needs no captions.
    Full,
}

impl Granularity {
    pub fn all_caption_levels() -> Vec<Granularity> {
        std::iter::once(Granularity::Reference)
            .chain(DEFAULT_BUDGETS.iter().map(|&n| Granularity::Words(n)))
            .collect()
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Reference => write!(f, "cc"),
            Self::Words(n) => write!(f, "{n}"),
            Self::Full => write!(f, "full"),
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches("v_").trim_start_matches('v');
        match t {
            "cc" => Ok(Self::Reference),
            "full" => Ok(Self::Full),
            _ => t
                .parse::<u32>()
                .ok()
                .filter(|&n| n > 0)
                .map(Self::Words)
                .ok_or_else(|| Error::config("granularity", format!("`{s}` is not cc, full or a word budget"))),
        }
    }
}

impl TryFrom<String> for Granularity {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Granularity> for String {
    fn from(g: Granularity) -> String {
        g.to_string()
    }
}

pub fn round_one_describe(client: &dyn VlmClient, image_png: &[u8], templates: &PromptTemplates) -> Result<String> {
    let text = client.complete(&VlmRequest {
        messages: vec![ChatMessage::user(templates.round_one.clone())],
        image_png: Some(image_png.to_vec()),
    })?;
    if text.trim().is_empty() {
        return Err(Error::Generation("round-one description is empty".into()));
    }
    Ok(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Round-one text cut to the budget.
    Truncated,
    /// Reference caption followed by round-one text, cut to the budget.
    Merged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condensed {
    pub caption: String,
    pub report: ValidationReport,
    pub client_attempts: usize,
    pub fallback: Option<Fallback>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondenseOptions {
    pub templates: PromptTemplates,
    /// Re-prompts after the first failed answer.
    pub max_reprompts: usize,
    pub threshold: f64,
}

impl Default for CondenseOptions {
    fn default() -> Self {
        Self {
            templates: PromptTemplates::default(),
            max_reprompts: 2,
            threshold: DEFAULT_GROUNDING_THRESHOLD,
        }
    }
}

pub fn round_two_condense(
    client: &dyn VlmClient,
    raw_description: &str,
    v_cc: &str,
    budget: usize,
    options: &CondenseOptions,
) -> Result<Condensed> {
    if words(v_cc).is_empty() {
        return Err(Error::Caption("reference caption is empty".into()));
    }
    let validate = |c: &str| validate_caption_with(c, v_cc, budget, options.threshold);
    let mut messages = vec![ChatMessage::user(options.templates.round_two(raw_description, v_cc, budget))];
    let mut attempts = 0;
    for _ in 0..=options.max_reprompts {
        attempts += 1;
        let reply = client.complete(&VlmRequest {
            messages: messages.clone(),
            image_png: None,
        })?;
        let caption = reply.trim().to_string();
        let report = validate(&caption);
        match report.violation() {
            None => {
                return Ok(Condensed {
                    caption,
                    report,
                    client_attempts: attempts,
                    fallback: None,
                })
            }
            Some(reason) => {
                log::debug!("caption for budget {budget} rejected: {reason}");
                messages.push(ChatMessage {
                    role: "assistant".into(),
                    content: caption,
                });
                messages.push(ChatMessage::user(violation_note(&reason)));
            }
        }
    }
    let candidates = [
        (Fallback::Truncated, truncate_words(raw_description, budget)),
        (Fallback::Merged, truncate_words(&format!("{v_cc} {raw_description}"), budget)),
    ];
    for (kind, caption) in candidates {
        let report = validate(&caption);
        if report.passed {
            return Ok(Condensed {
                caption,
                report,
                client_attempts: attempts,
                fallback: Some(kind),
            });
        }
    }
    Err(Error::Caption(format!(
        "no caption within {budget} words keeps the reference content"
    )))
}
