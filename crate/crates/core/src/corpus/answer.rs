//! Final-answer grammars: the last integer for arithmetic, the last
//! backquoted string for string manipulation.

use super::Family;

pub fn extract(family: Family, text: &str) -> Option<String> {
    match family {
        Family::Arith => last_integer(text),
        Family::Strings => last_backquoted(text),
    }
}

/// Last maximal run of ASCII digits, with a directly preceding `-` kept.
pub fn last_integer(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let end = bytes.iter().rposition(|b| b.is_ascii_digit())? + 1;
    let mut start = end;
    while start > 0 && bytes[start - 1].is_ascii_digit() {
        start -= 1;
    }
    if start > 0 && bytes[start - 1] == b'-' && (start == 1 || !bytes[start - 2].is_ascii_alphanumeric()) {
        start -= 1;
    }
    Some(text[start..end].to_string())
}

pub fn last_backquoted(text: &str) -> Option<String> {
    let close = text.rfind('`')?;
    let open = text[..close].rfind('`')?;
    Some(text[open + 1..close].to_string())
}
