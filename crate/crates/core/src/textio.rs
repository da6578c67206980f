//! Line cursor shared by the text file formats; tracks byte offsets for error reporting.

use crate::error::{parse_err, Error};

pub(crate) struct LineCursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        Self { text, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    /// Returns the next line (without terminator) and its starting byte offset.
    pub(crate) fn next_line(&mut self) -> Option<(usize, &'a str)> {
        if self.pos >= self.text.len() {
            return None;
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let (line, advance) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        self.pos += advance;
        Some((start, line.strip_suffix('\r').unwrap_or(line)))
    }

    pub(crate) fn expect_line(&mut self, what: &str) -> Result<(usize, &'a str), Error> {
        let at = self.pos;
        self.next_line()
            .ok_or_else(|| parse_err(at, format!("truncated stream: expected {what}")))
    }
}

/// Parses a whitespace-separated token, reporting the token's offset on failure.
pub(crate) fn parse_token<T: std::str::FromStr>(
    line_offset: usize,
    line: &str,
    token: &str,
    what: &str,
) -> Result<T, Error> {
    token.parse().map_err(|_| {
        let col = token.as_ptr() as usize - line.as_ptr() as usize;
        parse_err(line_offset + col, format!("invalid {what}: {token:?}"))
    })
}
