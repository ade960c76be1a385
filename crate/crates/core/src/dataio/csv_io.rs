//! CSV ingestion with the header `id,label,f0,...,f{d-1}`.

use std::collections::HashSet;
use std::path::Path;

use super::EmbeddingRecord;
use crate::error::{Error, Result};

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub(crate) fn parse_csv<R: std::io::Read>(input: R) -> Result<Vec<EmbeddingRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);

    let header = reader.headers().map_err(|e| parse_error(1, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(parse_error(1, "header must start with `id,label` followed by feature columns"));
    }
    for (i, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_error(1, format!("feature column {i} is named {name:?}, expected \"f{i}\"")));
        }
    }
    let dim = header.len() - 2;

    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != dim + 2 {
            return Err(parse_error(line, format!("expected {} fields, found {}", dim + 2, row.len())));
        }
        let id = row[0].to_owned();
        if !ids.insert(id.clone()) {
            return Err(parse_error(line, format!("duplicate id {id:?}")));
        }
        let vector = row
            .iter()
            .skip(2)
            .enumerate()
            .map(|(i, field)| match field.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_error(line, format!("feature f{i} = {field:?} is not a finite number"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        records.push(EmbeddingRecord::new(id, &row[1], vector));
    }
    Ok(records)
}

/// Reads labeled vectors from CSV. Errors carry the 1-based line number.
pub fn import_csv(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(std::io::BufReader::new(file))
}

pub(crate) fn render_csv(records: &[EmbeddingRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_owned(), "label".to_owned()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    let csv_err = |e: csv::Error| Error::invalid(e.to_string());
    writer.write_record(&header).map_err(csv_err)?;
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::invalid(format!("record {:?} has dimension {}, expected {dim}", r.id, r.vector.len())));
        }
        let mut row = vec![r.id.clone(), r.label.clone()];
        row.extend(r.vector.iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(csv_err)?;
    }
    writer.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

pub fn export_csv(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let bytes = render_csv(records)?;
    super::binary::write_atomically(path, &bytes)
}
