//! Small text helpers shared by the offline backends and the analyses.

/// Lower-cased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "close", "for", "from", "has", "in", "is", "it", "its",
    "of", "on", "or", "photo", "picture", "image", "some", "that", "the", "there", "this", "to", "up",
    "very", "with", "word",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// Tokens minus stopwords.
pub fn content_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_iter().filter(|t| !is_stopword(t)).collect()
}

/// Whether `text` contains `term` as whole words, case-insensitively.
pub fn contains_term(text: &str, term: &str) -> bool {
    let hay = tokenize(text);
    let needle = tokenize(term);
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_boundaries() {
        assert!(contains_term("Fishing boats", "fishing"));
        assert!(!contains_term("overfishing", "fishing"));
        assert!(contains_term("red-themed scenes", "red themed"));
        assert!(!contains_term("anything", ""));
        assert_eq!(content_tokens("a photo of a dog"), vec!["dog"]);
    }
}
