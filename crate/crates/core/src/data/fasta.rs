//! Minimal FASTA reader and writer.
//!
//! Header lines start with `>`; the record id is the first whitespace
//! separated token after it. Sequence lines may be wrapped and are
//! concatenated. Blank lines are ignored.

use std::io::{BufRead, Write};
use std::path::Path;

use super::DataError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FastaRecord {
    pub id: String,
    pub description: String,
    pub sequence: String,
}

pub fn parse_fasta(path: &Path) -> Result<Vec<FastaRecord>, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    read_fasta(std::io::BufReader::new(file)).map_err(|e| e.with_path(path))
}

pub fn read_fasta(reader: impl BufRead) -> Result<Vec<FastaRecord>, DataError> {
    let mut records: Vec<FastaRecord> = Vec::new();
    let mut header_line = 0;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| DataError::Malformed {
            path: None,
            line: lineno,
            msg: e.to_string(),
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            if let Some(prev) = records.last() {
                if prev.sequence.is_empty() {
                    return Err(DataError::EmptySequence {
                        id: prev.id.clone(),
                        line: header_line,
                    });
                }
            }
            let header = header.trim();
            let (id, description) = match header.split_once(char::is_whitespace) {
                Some((id, rest)) => (id.to_string(), rest.trim().to_string()),
                None => (header.to_string(), String::new()),
            };
            if id.is_empty() {
                return Err(DataError::Malformed {
                    path: None,
                    line: lineno,
                    msg: "header without an identifier".into(),
                });
            }
            header_line = lineno;
            records.push(FastaRecord {
                id,
                description,
                sequence: String::new(),
            });
        } else {
            let Some(rec) = records.last_mut() else {
                return Err(DataError::Malformed {
                    path: None,
                    line: lineno,
                    msg: "sequence data before the first '>' header".into(),
                });
            };
            rec.sequence.push_str(line.trim());
        }
    }
    if let Some(last) = records.last() {
        if last.sequence.is_empty() {
            return Err(DataError::EmptySequence {
                id: last.id.clone(),
                line: header_line,
            });
        }
    }
    Ok(records)
}

/// Writes records with sequences wrapped at `width` columns (0 = no wrap).
pub fn write_fasta<'a>(
    mut w: impl Write,
    records: impl IntoIterator<Item = (&'a str, &'a str)>,
    width: usize,
) -> std::io::Result<()> {
    for (id, seq) in records {
        writeln!(w, ">{id}")?;
        if width == 0 {
            writeln!(w, "{seq}")?;
        } else {
            for chunk in seq.as_bytes().chunks(width) {
                w.write_all(chunk)?;
                w.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<FastaRecord>, DataError> {
        read_fasta(s.as_bytes())
    }

    #[test]
    fn single_record() {
        let r = parse(">a\nACGT\n").unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].id, "a");
        assert_eq!(r[0].sequence, "ACGT");
    }

    #[test]
    fn wrapped_lines_join() {
        let r = parse(">a desc here\nAC\nGT\n\n>b\nTT\r\n").unwrap();
        assert_eq!(r[0].sequence, "ACGT");
        assert_eq!(r[0].description, "desc here");
        assert_eq!(r[1].sequence, "TT");
    }

    #[test]
    fn missing_header() {
        match parse("ACGT\n") {
            Err(DataError::Malformed { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_sequence() {
        assert!(matches!(parse(">a\n>b\nAC\n"), Err(DataError::EmptySequence { .. })));
        assert!(matches!(parse(">a\nAC\n>b\n"), Err(DataError::EmptySequence { .. })));
    }

    #[test]
    fn empty_input_is_empty() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn write_then_read() {
        let mut buf = Vec::new();
        write_fasta(&mut buf, [("x", "ACGTACGTAC"), ("y", "GG")], 4).unwrap();
        let back = parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back[0].sequence, "ACGTACGTAC");
        assert_eq!(back[1].id, "y");
    }
}
