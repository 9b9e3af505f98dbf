use std::io::BufRead;

use super::{ImageTextPair, RetrievalError};

/// Reads a JSON Lines corpus of `{"id", "caption", "image_ref"}` objects.
/// Blank lines are ignored; line numbers in errors are 1-based.
pub fn read_corpus<R: BufRead>(reader: R) -> impl Iterator<Item = Result<ImageTextPair, RetrievalError>> {
    reader.lines().enumerate().filter_map(|(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(RetrievalError::Io(e))),
        };
        if line.trim().is_empty() {
            return None;
        }
        Some(
            serde_json::from_str(&line).map_err(|e| RetrievalError::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            }),
        )
    })
}

pub fn write_corpus<W: std::io::Write>(mut out: W, pairs: &[ImageTextPair]) -> std::io::Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_lines_and_reports_bad_line_number() {
        let text = "{\"id\":\"a\",\"caption\":\"x\",\"image_ref\":\"r\"}\n\n{\"id\":\"b\",\"caption\":\"y\"}\n";
        let items: Vec<_> = read_corpus(text.as_bytes()).collect();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].as_ref().unwrap().id, "a");
        match &items[1] {
            Err(RetrievalError::MalformedLine { line, .. }) => assert_eq!(*line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
