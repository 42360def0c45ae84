//! Helpers shared by the plain-text file formats.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

pub(crate) fn join_f64<I: IntoIterator<Item = f64>>(values: I) -> String {
    values.into_iter().map(fmt_f64).collect::<Vec<_>>().join(" ")
}

pub(crate) fn parse_f64_list(line: &str) -> Result<Vec<f64>, String> {
    line.split_whitespace()
        .map(|tok| tok.parse::<f64>().map_err(|_| format!("not a number: `{tok}`")))
        .collect()
}

/// Line cursor that skips blank lines and `#` comments, keeping 1-based line
/// numbers for error messages.
pub(crate) struct LineCursor<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> LineCursor<'a> {
    pub fn new(text: &'a str) -> Self {
        LineCursor {
            lines: text.lines().enumerate().peekable(),
        }
    }

    fn skip_ignorable(&mut self) {
        while let Some((_, line)) = self.lines.peek() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                self.lines.next();
            } else {
                break;
            }
        }
    }

    pub fn peek(&mut self) -> Option<(usize, &'a str)> {
        self.skip_ignorable();
        self.lines.peek().map(|&(i, l)| (i + 1, l.trim()))
    }

    pub fn next_line(&mut self) -> Option<(usize, &'a str)> {
        self.skip_ignorable();
        self.lines.next().map(|(i, l)| (i + 1, l.trim()))
    }
}

/// Splits `key=value`, trimming both sides.
pub(crate) fn split_key_value(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

/// Writes `contents` to a sibling temporary file and renames it into place,
/// so readers never observe a partially written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Finishes an in-memory CSV writer.
pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String, csv::Error> {
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv fields are utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 5e-324, f64::MAX, 123456.789e10, 0.0, -0.0] {
            let back: f64 = fmt_f64(v).parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn cursor_skips_comments_and_blanks() {
        let mut c = LineCursor::new("# c\n\n a=1 \n#x\nb");
        assert_eq!(c.next_line(), Some((3, "a=1")));
        assert_eq!(c.peek(), Some((5, "b")));
        assert_eq!(c.next_line(), Some((5, "b")));
        assert_eq!(c.next_line(), None);
    }
}
