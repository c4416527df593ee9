//! Matrix Market coordinate format (`real general` only). Indices are 1-based
//! on disk and 0-based in memory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::SparseMatrix;
use crate::error::{Error, Result};

const HEADER: &str = "%%MatrixMarket matrix coordinate real general";

pub fn load_matrix_market(path: impl AsRef<Path>) -> Result<SparseMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix_market(BufReader::new(file), path)
}

/// Parses from any reader; `origin` is only used in error messages.
pub fn read_matrix_market(reader: impl Read, origin: &Path) -> Result<SparseMatrix> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };

    let mut lines = BufReader::new(reader).lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let header = header.map_err(|e| Error::io(origin, e))?;
    let tokens: Vec<String> = header
        .split_whitespace()
        .map(str::to_ascii_lowercase)
        .collect();
    if tokens.len() != 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(parse_err(1, format!("not a Matrix Market header: {header:?}")));
    }
    if tokens[2] != "coordinate" || tokens[3] != "real" || tokens[4] != "general" {
        return Err(parse_err(
            1,
            format!(
                "unsupported format `{} {} {}`, expected `coordinate real general`",
                tokens[2], tokens[3], tokens[4]
            ),
        ));
    }

    let mut size: Option<(usize, usize, usize)> = None;
    let mut triplets = Vec::new();
    let mut last_line = 1;
    for (idx, line) in lines {
        let lineno = idx + 1;
        last_line = lineno;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        match size {
            None => {
                if fields.len() != 3 {
                    return Err(parse_err(lineno, "size line must be `rows cols nnz`".into()));
                }
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| parse_err(lineno, format!("bad size field {s:?}")))
                };
                let dims = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
                triplets.reserve(dims.2);
                size = Some(dims);
            }
            Some((rows, cols, nnz)) => {
                if fields.len() != 3 {
                    return Err(parse_err(lineno, "entry must be `row col value`".into()));
                }
                if triplets.len() == nnz {
                    return Err(parse_err(
                        lineno,
                        format!("more entries than the {nnz} declared in the size line"),
                    ));
                }
                let index = |s: &str, bound: usize| -> Result<usize> {
                    let i = s
                        .parse::<usize>()
                        .map_err(|_| parse_err(lineno, format!("bad index {s:?}")))?;
                    if i == 0 || i > bound {
                        return Err(parse_err(lineno, format!("index {i} outside 1..={bound}")));
                    }
                    Ok(i - 1)
                };
                let r = index(fields[0], rows)?;
                let c = index(fields[1], cols)?;
                let v = fields[2]
                    .parse::<f64>()
                    .map_err(|_| parse_err(lineno, format!("bad value {:?}", fields[2])))?;
                if !v.is_finite() {
                    return Err(parse_err(lineno, format!("non-finite value {v}")));
                }
                triplets.push((r, c, v));
            }
        }
    }

    let (rows, cols, nnz) =
        size.ok_or_else(|| parse_err(last_line, "missing size line (header only)".into()))?;
    if triplets.len() != nnz {
        return Err(parse_err(
            last_line,
            format!("size line declares {nnz} entries, found {}", triplets.len()),
        ));
    }
    SparseMatrix::from_triplets(rows, cols, &triplets)
        .map_err(|e| parse_err(last_line, e.to_string()))
}

pub fn save_matrix_market(m: &SparseMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_matrix_market(m, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Values are written in shortest round-trip scientific notation so that a
/// save/load cycle is bit-exact.
pub fn write_matrix_market(m: &SparseMatrix, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{HEADER}")?;
    writeln!(w, "{} {} {}", m.n_rows(), m.n_cols(), m.nnz())?;
    for (r, c, v) in m.triplets() {
        writeln!(w, "{} {} {:e}", r + 1, c + 1, v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn parse(text: &str) -> Result<SparseMatrix> {
        read_matrix_market(text.as_bytes(), Path::new("<mem>"))
    }

    #[test]
    fn roundtrip_random_10x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Vec::new();
        for r in 0..10 {
            for c in 0..5 {
                if rng.gen_bool(0.4) {
                    t.push((r, c, rng.gen_range(-1e3..1e3) * 10f64.powi(rng.gen_range(-20..20))));
                }
            }
        }
        let m = SparseMatrix::from_triplets(10, 5, &t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mtx");
        save_matrix_market(&m, &path).unwrap();
        let back = load_matrix_market(&path).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_only_is_error() {
        let err = parse("%%MatrixMarket matrix coordinate real general\n").unwrap_err();
        assert!(err.to_string().contains("header only"), "{err}");
    }

    #[test]
    fn entry_count_mismatch() {
        let text = "%%MatrixMarket matrix coordinate real general\n2 2 3\n1 1 1.0\n2 2 2.0\n";
        let err = parse(text).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 4);
                assert!(msg.contains("declares 3"));
            }
            other => panic!("unexpected {other}"),
        }
        let text = "%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 1.0\n2 2 2.0\n";
        assert!(matches!(parse(text), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn comments_and_one_based_indices() {
        let text = "%%MatrixMarket matrix coordinate real general\n% comment\n\n2 3 2\n1 3 2.5\n2 1 -1\n";
        let m = parse(text).unwrap();
        assert_eq!((m.n_rows(), m.n_cols(), m.nnz()), (2, 3, 2));
        assert_eq!(m.row(0), (&[2usize][..], &[2.5][..]));
        assert_eq!(m.row(1), (&[0usize][..], &[-1.0][..]));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse("").is_err());
        assert!(parse("%%MatrixMarket matrix array real general\n1 1\n1.0\n").is_err());
        assert!(parse("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n").is_err());
        assert!(parse("%%MatrixMarket matrix coordinate real general\n2 2 1\n0 1 1.0\n").is_err());
        assert!(parse("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 nan\n").is_err());
        assert!(parse("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 abc\n").is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_matrix_market("/nonexistent/x.mtx"),
            Err(Error::Io { .. })
        ));
    }
}
