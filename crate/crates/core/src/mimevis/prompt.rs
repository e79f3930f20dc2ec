use serde::{Deserialize, Serialize};

use crate::format::hash_of;

pub const ROUND_ONE_TEMPLATE: &str = "Describe this image in detail. Mention every object you can see, \
its colour, size, shape and texture, where it is placed, and the overall scene and lighting.";

pub const ROUND_TWO_TEMPLATE: &str = "Here is a detailed description of an image.\n\
Description: \"{description}\"\n\
Reference caption: \"{reference}\"\n\
Rewrite the description as one caption of at most {budget} words. Keep every object named in the \
reference caption and do not add anything the description does not support.";

/// Editable prompt wording for both rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplates {
    pub round_one: String,
    /// Must contain `{description}`, `{reference}` and `{budget}`.
    pub round_two: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            round_one: ROUND_ONE_TEMPLATE.into(),
            round_two: ROUND_TWO_TEMPLATE.into(),
        }
    }
}

impl PromptTemplates {
    pub fn validate(&self) -> crate::Result<()> {
        for key in ["{description}", "{reference}", "{budget}"] {
            if !self.round_two.contains(key) {
                return Err(crate::Error::config("round_two", format!("template lacks {key}")));
            }
        }
        if self.round_one.trim().is_empty() {
            return Err(crate::Error::config("round_one", "template is empty"));
        }
        Ok(())
    }

    pub fn round_one_hash(&self) -> String {
        hash_of(&self.round_one)
    }

    pub fn round_two_hash(&self) -> String {
        hash_of(&self.round_two)
    }

    pub fn hash(&self) -> String {
        hash_of(self)
    }

    pub fn round_two(&self, description: &str, reference: &str, budget: usize) -> String {
        self.round_two
            .replace("{description}", &description.replace('"', "'"))
            .replace("{reference}", &reference.replace('"', "'"))
            .replace("{budget}", &budget.to_string())
    }
}

pub fn violation_note(reason: &str) -> String {
    format!("Your previous caption was rejected because {reason}. Write a new caption that fixes this.")
}

fn with_article(name: &str) -> String {
    let vowel = name.chars().next().is_some_and(|c| "aeiou".contains(c));
    format!("{} {name}", if vowel { "an" } else { "a" })
}

/// Reference caption over the (at most five) most salient objects.
pub fn reference_caption(names: &[String]) -> String {
    let items: Vec<String> = names.iter().take(5).map(|n| with_article(n)).collect();
    let list = match items.len() {
        0 => return String::new(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    };
    format!("A photo of {list}.")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundTwoPrompt {
    pub description: String,
    pub reference: String,
    pub budget: usize,
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let len = text[from..].find(end)?;
    Some(&text[from..from + len])
}

/// Recovers the fields of a prompt built from the default round-two template.
pub fn parse_round_two(prompt: &str) -> Option<RoundTwoPrompt> {
    let description = between(prompt, "Description: \"", "\"\n")?.to_string();
    let reference = between(prompt, "Reference caption: \"", "\"")?.to_string();
    let after = &prompt[prompt.find("at most ")? + "at most ".len()..];
    let digits: String = after.chars().take_while(char::is_ascii_digit).collect();
    Some(RoundTwoPrompt {
        description,
        reference,
        budget: digits.parse().ok()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_lists_top_five_with_articles() {
        let names: Vec<String> = ["person", "umbrella", "dog", "car", "apple", "kite"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            reference_caption(&names),
            "A photo of a person, an umbrella, a dog, a car and an apple."
        );
        assert_eq!(reference_caption(&names[..1]), "A photo of a person.");
        assert_eq!(reference_caption(&[]), "");
    }

    #[test]
    fn round_two_prompt_parses_back() {
        let t = PromptTemplates::default();
        t.validate().unwrap();
        let p = t.round_two("a long \"quoted\" text", "A photo of a dog.", 45);
        let parsed = parse_round_two(&p).unwrap();
        assert_eq!(parsed.budget, 45);
        assert_eq!(parsed.reference, "A photo of a dog.");
        assert_eq!(parsed.description, "a long 'quoted' text");
    }

    #[test]
    fn template_without_placeholder_is_rejected() {
        let t = PromptTemplates {
            round_two: "Shorten it.".into(),
            ..Default::default()
        };
        assert!(t.validate().is_err());
        assert_ne!(t.hash(), PromptTemplates::default().hash());
    }
}
