//! Word-level tokenization shared by ingestion and the live chat path.

/// A word and the char range it was cut from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

fn is_split_punct(c: char) -> bool {
    c.is_ascii_punctuation() && c != '\'' && c != '-' && c != '_'
}

/// Lowercases and splits `text` on whitespace, cutting punctuation other
/// than apostrophes and hyphens into single-char words.
pub fn words_with_offsets(text: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let flush = |current: &mut String, start: usize, end: usize, out: &mut Vec<Word>| {
        if !current.is_empty() {
            out.push(Word { text: std::mem::take(current), char_start: start, char_end: end });
        }
    };
    let mut idx = 0;
    for (i, c) in text.chars().enumerate() {
        idx = i + 1;
        if c.is_whitespace() {
            flush(&mut current, start, i, &mut out);
        } else if is_split_punct(c) {
            flush(&mut current, start, i, &mut out);
            out.push(Word { text: c.to_string(), char_start: i, char_end: i + 1 });
        } else {
            if current.is_empty() {
                start = i;
            }
            current.extend(c.to_lowercase());
        }
    }
    flush(&mut current, start, idx, &mut out);
    out
}

pub fn words(text: &str) -> Vec<String> {
    words_with_offsets(text).into_iter().map(|w| w.text).collect()
}

/// Byte offset of the `char_idx`-th char (or `text.len()` past the end).
pub fn char_to_byte(text: &str, char_idx: usize) -> usize {
    text.char_indices().nth(char_idx).map(|(b, _)| b).unwrap_or(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(words("Hi! Have you seen it?"), ["hi", "!", "have", "you", "seen", "it", "?"]);
        assert_eq!(words("I'm a sci-fi fan"), ["i'm", "a", "sci-fi", "fan"]);
    }

    #[test]
    fn offsets_point_into_source() {
        let text = "Did you like Up?";
        for w in words_with_offsets(text) {
            let slice: String = text.chars().skip(w.char_start).take(w.char_end - w.char_start).collect();
            assert_eq!(slice.to_lowercase(), w.text);
        }
    }

    #[test]
    fn empty_and_whitespace_only() {
        assert!(words("").is_empty());
        assert!(words("   \t ").is_empty());
    }
}
