//! Reading and writing the libsvm sparse text format.
//!
//! ```text
//! +1 1:0.5 7:-1.25
//! -1 3:2
//! ```
//!
//! Indices are 1-based on disk and 0-based in memory. Labels `+1`, `1`,
//! `-1` and `0` are accepted; `0` is read as `-1`. Text after `#` is a
//! comment.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use svrg_core::{SparseDataset, SparseExample};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LibsvmError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no examples found")]
    Empty,
    #[error("invalid dataset: {0}")]
    Dataset(#[from] svrg_core::DataError),
}

fn parse_error(line: usize, message: impl Into<String>) -> LibsvmError {
    LibsvmError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_label(token: &str, line: usize) -> Result<f64, LibsvmError> {
    let value: f64 = token
        .parse()
        .map_err(|_| parse_error(line, format!("label `{token}` is not a number")))?;
    if value == 1.0 {
        Ok(1.0)
    } else if value == -1.0 || value == 0.0 {
        Ok(-1.0)
    } else {
        Err(parse_error(line, format!("label `{token}` is not binary")))
    }
}

/// Parses one non-empty line into an example with 0-based indices.
fn parse_line(text: &str, line: usize) -> Result<SparseExample, LibsvmError> {
    let mut tokens = text.split_whitespace();
    let label = parse_label(tokens.next().expect("caller skips blank lines"), line)?;
    let mut pairs: Vec<(usize, f64)> = Vec::new();
    for token in tokens {
        let (idx, val) = token
            .split_once(':')
            .ok_or_else(|| parse_error(line, format!("feature `{token}` lacks `index:value`")))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| parse_error(line, format!("feature index `{idx}` is not a positive integer")))?;
        if idx == 0 {
            return Err(parse_error(line, "feature indices start at 1"));
        }
        let val: f64 = val
            .parse()
            .map_err(|_| parse_error(line, format!("feature value `{val}` is not a number")))?;
        if !val.is_finite() {
            return Err(parse_error(line, format!("feature value `{val}` is not finite")));
        }
        pairs.push((idx - 1, val));
    }
    pairs.sort_by_key(|p| p.0);
    if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(parse_error(line, "duplicate feature index"));
    }
    let (indices, values) = pairs.into_iter().unzip();
    SparseExample::new(indices, values, label).map_err(|m| parse_error(line, m))
}

/// Reads a dataset; the dimension is the largest index seen.
pub fn read<R: BufRead>(reader: R) -> Result<SparseDataset, LibsvmError> {
    let mut examples = Vec::new();
    let mut dim = 0;
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let ex = parse_line(text, k + 1)?;
        if let Some(&last) = ex.indices().last() {
            dim = dim.max(last + 1);
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(LibsvmError::Empty);
    }
    Ok(SparseDataset::new(examples, dim.max(1))?)
}

pub fn read_path(path: impl AsRef<Path>) -> Result<SparseDataset, LibsvmError> {
    read(BufReader::new(File::open(path)?))
}

/// Writes labels as `+1`/`-1` and values in shortest round-trip form.
pub fn write<W: Write>(ds: &SparseDataset, mut writer: W) -> io::Result<()> {
    for ex in ds.examples() {
        write!(writer, "{}", if ex.label() > 0.0 { "+1" } else { "-1" })?;
        for (i, v) in ex.indices().iter().zip(ex.values()) {
            write!(writer, " {}:{}", i + 1, v)?;
        }
        writeln!(writer)?;
    }
    writer.flush()
}

pub fn write_path(ds: &SparseDataset, path: impl AsRef<Path>) -> io::Result<()> {
    write(ds, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_labels_and_indices() {
        let ds = read("+1 1:0.5 3:-2 # comment\n\n0 2:1\n-1\n".as_bytes()).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.example(0).indices(), &[0, 2]);
        assert_eq!(ds.example(0).values(), &[0.5, -2.0]);
        assert_eq!(ds.example(1).label(), -1.0);
        assert_eq!(ds.example(2).nnz(), 0);
    }

    #[test]
    fn unsorted_features_are_sorted() {
        let ds = read("1 4:1 2:3\n".as_bytes()).unwrap();
        assert_eq!(ds.example(0).indices(), &[1, 3]);
        assert_eq!(ds.example(0).values(), &[3.0, 1.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("1 1:1\n2 1:1\n", 2),
            ("1 1:1\n\n1 0:1\n", 3),
            ("1 x:1\n", 1),
            ("1 1:abc\n", 1),
            ("1 1\n", 1),
            ("1 1:1 1:2\n", 1),
            ("1 1:inf\n", 1),
            ("yes 1:1\n", 1),
        ];
        for (text, line) in cases {
            match read(text.as_bytes()) {
                Err(LibsvmError::Parse { line: got, .. }) => assert_eq!(got, line, "{text:?}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(read("".as_bytes()), Err(LibsvmError::Empty)));
        assert!(matches!(read("# only a comment\n".as_bytes()), Err(LibsvmError::Empty)));
    }
}
