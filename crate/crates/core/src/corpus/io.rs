use std::io::{Read, Write};

use super::{LabelledExample, RawExample};
use crate::error::{Error, Result};
use crate::labels::Label;

const CORPUS_HEADER: [&str; 4] = ["id", "text", "primary_label", "secondary_label"];

fn parse_label(field: &str, line: usize) -> Result<Label> {
    field.parse().map_err(|e| Error::Parse { line, message: format!("{e}") })
}

fn parse_optional_label(field: &str, line: usize) -> Result<Option<Label>> {
    if field.trim().is_empty() {
        Ok(None)
    } else {
        parse_label(field, line).map(Some)
    }
}

fn line_of(record: &csv::StringRecord) -> usize {
    record.position().map_or(0, |p| p.line() as usize)
}

/// Reads a corpus CSV with columns `id,text,primary_label,secondary_label`
/// (the last may be empty).
pub fn read_corpus_csv<R: Read>(reader: R) -> Result<Vec<RawExample>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MalformedHeader(format!("missing column {name:?}")))
    };
    let (id, text, primary, secondary) = (col("id")?, col("text")?, col("primary_label")?, col("secondary_label").ok());
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = line_of(&record);
        out.push(RawExample {
            id: record[id].to_string(),
            text: record[text].to_string(),
            primary_label: parse_label(&record[primary], line)?,
            secondary_label: match secondary {
                Some(c) => parse_optional_label(&record[c], line)?,
                None => None,
            },
        });
    }
    Ok(out)
}

pub fn write_corpus_csv<W: Write>(writer: W, examples: &[RawExample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CORPUS_HEADER)?;
    for e in examples {
        w.write_record([
            e.id.as_str(),
            e.text.as_str(),
            e.primary_label.as_str(),
            e.secondary_label.map_or("", |l| l.as_str()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `id,label,secondary_label,f0,…`. Values use 17 significant digits,
/// so reading the file back is bit-exact.
pub fn write_features_csv<W: Write>(writer: W, examples: &[LabelledExample]) -> Result<()> {
    let dim = examples.first().map_or(0, |e| e.features.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "label".into(), "secondary_label".into()];
    header.extend((0..dim).map(|d| format!("f{d}")));
    w.write_record(&header)?;
    for e in examples {
        if e.features.len() != dim {
            return Err(Error::dims(dim, e.features.len()));
        }
        let mut row =
            vec![e.id.clone(), e.primary_label.to_string(), e.secondary_label.map_or(String::new(), |l| l.to_string())];
        row.extend(e.features.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features_csv<R: Read>(reader: R) -> Result<Vec<LabelledExample>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "label" || &headers[2] != "secondary_label" {
        return Err(Error::MalformedHeader("expected `id,label,secondary_label,f0,...`".into()));
    }
    let dim = headers.len() - 3;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { pos, len, .. } => Error::LineDimensionMismatch {
                line: pos.as_ref().map_or(0, |p| p.line() as usize),
                expected: dim,
                actual: (*len as usize).saturating_sub(3),
            },
            _ => Error::from(e),
        })?;
        let line = line_of(&record);
        let features = record
            .iter()
            .skip(3)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { line, message: format!("bad feature value {f:?}") })
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(LabelledExample {
            id: record[0].to_string(),
            features,
            primary_label: parse_label(&record[1], line)?,
            secondary_label: parse_optional_label(&record[2], line)?,
        });
    }
    Ok(out)
}
