//! Shared text normaliser: lowercase, whitespace split, punctuation split.
//!
//! Word-internal apostrophes are kept (`don't` stays one token). Every other
//! non-alphanumeric character becomes a token of its own.

pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if c == '\''
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            current.push(c);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Canonical single-spaced form of `text`.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("Hi there, I LIKE dogs!"),
            vec!["hi", "there", ",", "i", "like", "dogs", "!"]
        );
    }

    #[test]
    fn keeps_inner_apostrophes() {
        assert_eq!(tokenize("I don't 'know'"), vec!["i", "don't", "'", "know", "'"]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let s = "Well...  that's   GREAT.";
        assert_eq!(normalize(&normalize(s)), normalize(s));
        assert_eq!(normalize(s), "well . . . that's great .");
    }

    #[test]
    fn empty_and_blank() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \t").is_empty());
    }
}
