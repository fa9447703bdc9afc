//! Character-offset helpers and metric text normalization.

use unicode_normalization::UnicodeNormalization;

/// Byte offset of the `idx`-th scalar value, or `None` past the end.
pub fn byte_offset(text: &str, idx: usize) -> Option<usize> {
    if idx == 0 {
        return Some(0);
    }
    let mut indices = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    indices.nth(idx)
}

/// Substring over the scalar-value interval `[start, end)`.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let b0 = byte_offset(text, start)?;
    let b1 = byte_offset(text, end)?;
    Some(&text[b0..b1])
}

/// NFC, lowercase, trimmed. Every summary metric sees text through this.
pub fn normalize(text: &str) -> String {
    text.trim().nfc().collect::<String>().to_lowercase()
}
