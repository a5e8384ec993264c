//! Prompt templates sent to the summarizer backend.
//!
//! The instruction texts are fixed; a checksum test pins their exact bytes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    /// Shorten one caption to a concept label.
    Simplify,
    /// Summarize what several captions have in common.
    Similarity,
    /// Label satellite-imagery concepts and name a land-cover superclass.
    Superclass,
}

const SIMPLIFY: &str = "Only state your answer without a period and quotation marks. Do not number your answer. \
State one coherent and concise concept label that simplifies the following description and deletes any \
unnecessary details:";

const SIMILARITY: &str = "Only state your answer without a period and quotation marks and do not simply repeat \
the descriptions. State one coherent and concise concept label that is 1-5 words long and can semantically \
summarize and represent most, not necessarily all, of the conceptual similarities in the following descriptions:";

const SUPERCLASS: &str = "State one coherent and concise concept label 1-5 words long related to \
landscapes/satellite imagery that semantically summarizes and represents most, not necessarily all, of the \
conceptual similarities in the following descriptions. Focus on colors, textures, and patterns. After, print \
one most likely natural landscape described by the satellite imagery captions, in parenthesis, on the same \
line. Be confident and do not be vague: ";

/// A worked example: input descriptions and the expected answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub descriptions: Vec<String>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub text: String,
    pub few_shot: Vec<FewShot>,
}

fn shot(answer: &str, descriptions: &[&str]) -> FewShot {
    FewShot {
        answer: answer.to_string(),
        descriptions: descriptions.iter().map(|s| s.to_string()).collect(),
    }
}

impl PromptTemplate {
    pub fn get(name: TemplateName) -> Self {
        match name {
            TemplateName::Simplify => PromptTemplate { name, text: SIMPLIFY.into(), few_shot: vec![] },
            TemplateName::Similarity => PromptTemplate {
                name,
                text: SIMILARITY.into(),
                few_shot: vec![
                    shot(
                        "multicolored textiles",
                        &[
                            "a purple background with a very soft texture",
                            "a brown background with a diagonal pattern of lines and lines",
                            "a white windmill with a red door and a red door in the middle of the picture",
                            "a beige background with a rough texture of linen",
                            "a beige background with a rough texture and a very soft texture",
                        ],
                    ),
                    shot(
                        "red-themed scenes",
                        &[
                            "a little girl is sitting in a red tractor with the word sofy on the front",
                            "a toy car sits on a red ottoman in a play room",
                            "a red dress with silver studs and a silver belt",
                            "a red chevrolet camaro is on display at a car show",
                            "a red spool of a cable with the word red on it",
                        ],
                    ),
                ],
            },
            TemplateName::Superclass => PromptTemplate { name, text: SUPERCLASS.into(), few_shot: vec![] },
        }
    }

    /// Chat messages for `descriptions`: each few-shot block as a user/assistant
    /// pair, then the real query.
    pub fn messages(&self, descriptions: &[String]) -> Vec<ChatMessage> {
        let mut out = Vec::with_capacity(2 * self.few_shot.len() + 1);
        for ex in &self.few_shot {
            out.push(ChatMessage::user(self.render(&ex.descriptions)));
            out.push(ChatMessage::assistant(ex.answer.clone()));
        }
        out.push(ChatMessage::user(self.render(descriptions)));
        out
    }

    fn render(&self, descriptions: &[String]) -> String {
        let mut s = self.text.clone();
        if !s.ends_with(' ') {
            s.push('\n');
        }
        s.push_str(&descriptions.join("\n"));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: "assistant".into(), content: content.into() }
    }
}

/// Cleans a raw completion into a label: first line only, no leading
/// enumeration, no surrounding quotes, no trailing period.
pub fn clean_label(raw: &str) -> String {
    let line = raw.trim().lines().next().unwrap_or("").trim();
    let mut s = line;
    if let Some(pos) = s.find(|c: char| !c.is_ascii_digit()) {
        let rest = &s[pos..];
        if pos > 0 && (rest.starts_with(". ") || rest.starts_with(") ") || rest.starts_with('.')) {
            s = rest[1..].trim_start();
        }
    }
    s = s.trim_start_matches(['-', '*', '•']).trim();
    loop {
        let before = s;
        s = s.trim_end_matches('.').trim();
        s = s.trim_matches(|c| matches!(c, '"' | '\'' | '“' | '”' | '‘' | '’' | '`')).trim();
        if s == before {
            break;
        }
    }
    s.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn sha(s: &str) -> String {
        hex::encode(Sha256::digest(s.as_bytes()))
    }

    #[test]
    fn template_bytes_are_pinned() {
        assert_eq!(
            sha(&PromptTemplate::get(TemplateName::Simplify).text),
            "d1c56e2141a55da7e959ab22abdeea12a9f055b4b7c36d816262d53050cec137"
        );
        assert_eq!(
            sha(&PromptTemplate::get(TemplateName::Similarity).text),
            "991298847446c77fdc8eb2c0edb8565d6135ccb923bba4fa7aef3e7d8639b21e"
        );
        assert_eq!(
            sha(&PromptTemplate::get(TemplateName::Superclass).text),
            "26342885b7571d9e5571f96ffb232a8a5930b95dde5b955d5fd05046b1184775"
        );
    }

    #[test]
    fn similarity_carries_two_examples_first() {
        let t = PromptTemplate::get(TemplateName::Similarity);
        let msgs = t.messages(&["a cat".into(), "a dog".into()]);
        assert_eq!(msgs.len(), 5);
        assert_eq!(msgs[1].content, "multicolored textiles");
        assert_eq!(msgs[3].content, "red-themed scenes");
        assert!(msgs[4].content.ends_with("descriptions:\na cat\na dog"));
        assert_eq!(t.few_shot[1].descriptions.len(), 5);
    }

    #[test]
    fn label_cleanup() {
        assert_eq!(clean_label("Red spool."), "Red spool");
        assert_eq!(clean_label("\"striped fabric\""), "striped fabric");
        assert_eq!(clean_label("1. water scenes"), "water scenes");
        assert_eq!(clean_label("2) 'dogs'.\nextra"), "dogs");
        assert_eq!(clean_label("red"), "red");
        assert_eq!(clean_label("3D shapes"), "3D shapes");
    }
}
