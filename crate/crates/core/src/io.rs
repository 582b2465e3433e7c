//! CSV readers and writers for data matrices, covariance matrices and trees.
//!
//! Matrix files are plain comma-separated numeric rows with an optional
//! header row of variable names. Tree files have one `node_id,parent_id,label`
//! row per node; the root has an empty `parent_id`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::SymmetricMatrix;
use crate::tree::TreeSpec;

pub const TREE_HEADER: [&str; 3] = ["node_id", "parent_id", "label"];

/// A numeric matrix with the column names from its header row, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub names: Option<Vec<String>>,
    pub values: DMatrix<f64>,
}

impl LabeledMatrix {
    /// Header names, or `V1..Vp` when the file had none.
    pub fn names_or_default(&self) -> Vec<String> {
        self.names
            .clone()
            .unwrap_or_else(|| crate::solver::default_names(self.values.ncols()))
    }
}

fn parse_error(source: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_string(),
        line: line as usize,
        message: message.into(),
    }
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn csv_parse_error(source: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_error(source, line, e.to_string())
}

/// Parses a numeric matrix; `source` names the input in error messages.
pub fn parse_matrix_csv<R: Read>(input: R, source: &str) -> Result<LabeledMatrix> {
    let mut names = None;
    let mut values: Vec<f64> = Vec::new();
    let mut width = None;
    let mut rows = 0usize;
    for (idx, record) in reader(input).records().enumerate() {
        let record = record.map_err(|e| csv_parse_error(source, e))?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line());
        let parsed: Vec<std::result::Result<f64, _>> =
            record.iter().map(str::parse::<f64>).collect();
        if idx == 0 && parsed.iter().any(|v| v.is_err()) {
            let header: Vec<String> = record.iter().map(str::to_owned).collect();
            if header.iter().any(String::is_empty) {
                return Err(parse_error(source, line, "empty column name in header"));
            }
            width = Some(header.len());
            names = Some(header);
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(parse_error(
                source,
                line,
                format!("expected {w} fields, found {}", record.len()),
            ));
        }
        for (col, v) in parsed.into_iter().enumerate() {
            match v {
                Ok(x) if x.is_finite() => values.push(x),
                Ok(_) => {
                    return Err(parse_error(
                        source,
                        line,
                        format!("non-finite value in column {}", col + 1),
                    ))
                }
                Err(_) => {
                    return Err(parse_error(
                        source,
                        line,
                        format!("column {}: '{}' is not a number", col + 1, &record[col]),
                    ))
                }
            }
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(parse_error(source, 0, "no numeric rows"));
    }
    Ok(LabeledMatrix {
        names,
        values: DMatrix::from_row_slice(rows, cols, &values),
    })
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<LabeledMatrix> {
    let path = path.as_ref();
    parse_matrix_csv(File::open(path)?, &path.display().to_string())
}

/// Reads a symmetric matrix stored in full; symmetry is validated.
pub fn read_symmetric_csv(
    path: impl AsRef<Path>,
) -> Result<(Option<Vec<String>>, SymmetricMatrix)> {
    let m = read_matrix_csv(path)?;
    Ok((m.names, SymmetricMatrix::new(m.values)?))
}

pub fn write_matrix_csv<W: Write>(
    out: W,
    names: Option<&[String]>,
    m: &DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    if let Some(names) = names {
        if names.len() != m.ncols() {
            return Err(Error::Dimension(format!(
                "{} names for {} columns",
                names.len(),
                m.ncols()
            )));
        }
        w.write_record(names).map_err(to_io)?;
    }
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|x| format!("{x}")))
            .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_tree_csv<R: Read>(input: R, source: &str) -> Result<TreeSpec> {
    let mut spec = TreeSpec::default();
    for (idx, record) in reader(input).records().enumerate() {
        let record = record.map_err(|e| csv_parse_error(source, e))?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line());
        if idx == 0 && record.iter().eq(TREE_HEADER) {
            continue;
        }
        if record.len() != 3 {
            return Err(parse_error(
                source,
                line,
                format!(
                    "expected node_id,parent_id,label, found {} fields",
                    record.len()
                ),
            ));
        }
        if record[0].is_empty() {
            return Err(parse_error(source, line, "empty node_id"));
        }
        let parent = (!record[1].is_empty()).then(|| &record[1]);
        spec.push(&record[0], parent, &record[2]);
    }
    if spec.nodes.is_empty() {
        return Err(parse_error(source, 0, "no tree nodes"));
    }
    Ok(spec)
}

pub fn read_tree_csv(path: impl AsRef<Path>) -> Result<TreeSpec> {
    let path = path.as_ref();
    parse_tree_csv(File::open(path)?, &path.display().to_string())
}

pub fn write_tree_csv<W: Write>(out: W, spec: &TreeSpec) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(TREE_HEADER).map_err(to_io)?;
    for node in &spec.nodes {
        w.write_record([
            node.id.as_str(),
            node.parent.as_deref().unwrap_or(""),
            node.label.as_str(),
        ])
        .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_with_and_without_header() {
        let m = parse_matrix_csv("a,b\n1,2\n3,4.5\n".as_bytes(), "x").unwrap();
        assert_eq!(m.names, Some(vec!["a".to_string(), "b".to_string()]));
        assert_eq!(
            m.values,
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.5])
        );
        let m = parse_matrix_csv("1,2\n3,4\n".as_bytes(), "x").unwrap();
        assert_eq!(m.names, None);
        assert_eq!(m.names_or_default(), vec!["V1", "V2"]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = parse_matrix_csv("a,b\n1,2\n3,x\n".as_bytes(), "data.csv").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        assert!(e.to_string().starts_with("data.csv:3:"));
        let e = parse_matrix_csv("1,2\n3\n".as_bytes(), "d").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_matrix_csv("1,inf\n".as_bytes(), "d").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        assert!(parse_matrix_csv("a,b\n".as_bytes(), "d").is_err());
    }

    #[test]
    fn matrix_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -2.0, 1e-300, 3.0, 4.0, 5.25]);
        let names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, Some(&names), &m).unwrap();
        let back = parse_matrix_csv(buf.as_slice(), "buf").unwrap();
        assert_eq!(back.values, m);
        assert_eq!(back.names.unwrap(), names);
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, "1,0.5\n0.4,1\n").unwrap();
        assert!(matches!(
            read_symmetric_csv(&path),
            Err(Error::NotSymmetric { .. })
        ));
        std::fs::write(&path, "1,0.5\n0.5,1\n").unwrap();
        assert_eq!(read_symmetric_csv(&path).unwrap().1.get(1, 0), 0.5);
    }

    #[test]
    fn tree_round_trip() {
        let text = "node_id,parent_id,label\nroot,,root\ng,root,g\nleaf:a,g,a\nleaf:b,root,b\n";
        let spec = parse_tree_csv(text.as_bytes(), "t").unwrap();
        assert_eq!(spec.nodes.len(), 4);
        assert_eq!(spec.nodes[0].parent, None);
        assert_eq!(spec.nodes[2].parent.as_deref(), Some("g"));
        let mut buf = Vec::new();
        write_tree_csv(&mut buf, &spec).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }

    #[test]
    fn tree_errors() {
        let e = parse_tree_csv("root,,root\nx,root\n".as_bytes(), "t").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_tree_csv("root,,root\n,root,x\n".as_bytes(), "t").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
    }
}
