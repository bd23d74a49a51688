//! Prompt text with byte escapes.

use anyhow::{bail, Context, Result};

/// Decodes `\xNN`, `\n`, `\t`, `\\` escapes; everything else is taken as
/// UTF-8 bytes.
pub fn parse_prompt(text: &str) -> Result<Vec<u8>> {
    let bytes = text.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        match bytes.get(i + 1) {
            Some(b'x') => {
                let hex = text
                    .get(i + 2..i + 4)
                    .with_context(|| format!("truncated \\x escape at byte {i}"))?;
                out.push(
                    u8::from_str_radix(hex, 16)
                        .with_context(|| format!("bad hex escape `\\x{hex}`"))?,
                );
                i += 4;
            }
            Some(b'n') => {
                out.push(b'\n');
                i += 2;
            }
            Some(b't') => {
                out.push(b'\t');
                i += 2;
            }
            Some(b'\\') => {
                out.push(b'\\');
                i += 2;
            }
            Some(&c) => bail!("unknown escape `\\{}` at byte {i}", c as char),
            None => bail!("dangling backslash at end of prompt"),
        }
    }
    if out.is_empty() {
        bail!("empty prompt");
    }
    Ok(out)
}

/// Inverse of [`parse_prompt`]: printable ASCII stays, the rest is escaped.
pub fn escape_prompt(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => s.push_str("\\\\"),
            b'\n' => s.push_str("\\n"),
            b'\t' => s.push_str("\\t"),
            0x20..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    s
}

/// Pads with spaces or truncates to exactly `len` bytes.
pub fn fit_prompt(bytes: &[u8], len: usize) -> Vec<u8> {
    let mut v = bytes[..bytes.len().min(len)].to_vec();
    v.resize(len, b' ');
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes() {
        assert_eq!(parse_prompt("a\\x41\\n\\\\").unwrap(), b"aA\n\\".to_vec());
        assert!(parse_prompt("\\xZZ").is_err());
        assert!(parse_prompt("\\x4").is_err());
        assert!(parse_prompt("\\q").is_err());
        assert!(parse_prompt("").is_err());
    }

    #[test]
    fn escape_round_trip() {
        let raw: Vec<u8> = (0u8..=255).collect();
        assert_eq!(parse_prompt(&escape_prompt(&raw)).unwrap(), raw);
    }

    #[test]
    fn fitting() {
        assert_eq!(fit_prompt(b"abc", 5), b"abc  ".to_vec());
        assert_eq!(fit_prompt(b"abcdef", 2), b"ab".to_vec());
    }
}
