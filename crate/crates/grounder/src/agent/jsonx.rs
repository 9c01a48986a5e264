//! Tolerant JSON extraction from model replies.
//!
//! Replies often wrap the requested JSON object in prose or fenced code
//! blocks. The extractor finds the first balanced top-level `{...}` group
//! (string- and escape-aware) and hands exactly that slice to serde.

use serde::de::DeserializeOwned;

/// The first balanced top-level JSON object in `text`, if any.
pub fn extract_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    // All delimiters are ASCII, so the slice boundaries fall
                    // on character boundaries even in multibyte text.
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses the first balanced JSON object in `text` into `T`.
pub fn parse_object<T: DeserializeOwned>(text: &str) -> Result<T, String> {
    let slice = extract_object(text).ok_or_else(|| "no JSON object found".to_string())?;
    serde_json::from_str(slice).map_err(|e| e.to_string())
}
