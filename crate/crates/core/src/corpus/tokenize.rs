use alloc::string::String;
use alloc::vec::Vec;

/// Lowercases, splits on whitespace and emits every punctuation character as
/// a token of its own: `"So am I."` becomes `[so, am, i, .]`.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut out);
            out.push(c.to_lowercase().collect());
        }
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(core::mem::take(word));
    }
}

/// Joins tokens with single spaces; `tokenize(detokenize(t)) == t` for any
/// output `t` of [`tokenize`].
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}
