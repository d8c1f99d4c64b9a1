//! Word-level tokenization shared by the QA generator, vocabulary and metrics.

use crate::scene::ctag::looks_like_tag;

const PUNCT: [char; 3] = [',', '.', '?'];

/// Splits on whitespace and separates `,` `.` `?` into their own words;
/// c-tags stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if looks_like_tag(word) {
            out.push(word.to_string());
            continue;
        }
        let mut cur = String::new();
        for ch in word.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub fn detokenize<S: AsRef<str>>(words: &[S]) -> String {
    words.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Fixed point of `detokenize ∘ tokenize`.
pub fn canonicalize(text: &str) -> String {
    detokenize(&tokenize(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_punctuation_but_not_tags() {
        assert_eq!(
            tokenize("Is <c1,CAM_FRONT,800,450> moving? Go straight, acceleration."),
            vec!["Is", "<c1,CAM_FRONT,800,450>", "moving", "?", "Go", "straight", ",", "acceleration", "."]
        );
    }

    proptest! {
        #[test]
        fn canonical_form_is_idempotent(s in "[a-zA-Z ,.?]{0,40}") {
            let c = canonicalize(&s);
            prop_assert_eq!(canonicalize(&c), c.clone());
            prop_assert_eq!(tokenize(&c), tokenize(&s));
        }
    }
}
