//! Plain numeric CSV matrices.
//!
//! One matrix row per line, comma separated. Lines starting with `#` are
//! comments (an optional header may be written that way). Values are written
//! with 17 significant digits so that a write/read cycle is lossless.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Format a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    parse_matrix_csv(file)
}

pub fn parse_matrix_csv<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("not a number: {field:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }

    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn write_matrix_csv(
    path: impl AsRef<Path>,
    m: &DMatrix<f64>,
    header: Option<&str>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    write_matrix(&mut out, m, header)?;
    out.flush()?;
    Ok(())
}

pub fn write_matrix<W: Write>(out: &mut W, m: &DMatrix<f64>, header: Option<&str>) -> Result<()> {
    if let Some(h) = header {
        writeln!(out, "# {h}")?;
    }
    for i in 0..m.nrows() {
        let line = m
            .row(i)
            .iter()
            .map(|&x| fmt_f64(x))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_comments_are_skipped() {
        let text = "# band,a,b\n0.1, 0.2\n\n0.3,0.4\n";
        let m = parse_matrix_csv(text.as_bytes()).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m[(1, 0)], 0.3);
    }

    #[test]
    fn ragged_rows_report_the_line() {
        let err = parse_matrix_csv("1,2\n3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn garbage_is_a_parse_error() {
        let err = parse_matrix_csv("1,x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn write_read_is_lossless() {
        let m = DMatrix::from_row_slice(
            2,
            3,
            &[0.1, 1.0 / 3.0, -2.5e-7, 1e300, 0.0, std::f64::consts::PI],
        );
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m, Some("test")).unwrap();
        let back = parse_matrix_csv(buf.as_slice()).unwrap();
        assert_eq!(m, back);
    }
}
