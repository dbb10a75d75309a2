//! CSV dialect shared by ingestion and emission: comma-delimited UTF-8 with
//! a header row, ISO-8601 dates, and optional `#` comment lines before the
//! header (used for provenance preambles).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, ShipmentRecord, Timestamp};
use crate::error::{Error, Result};

/// Maps logical feature roles onto CSV header names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub categorical: Vec<String>,
    pub numerical: Vec<String>,
    pub planned_arrival: String,
    pub actual_arrival: String,
}

impl Default for ColumnMap {
    /// Column names emitted by the synthetic generator.
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            categorical: s(&[
                "to_location_id",
                "to_city",
                "to_country",
                "country_combination",
                "shipment_type",
                "preferred_carrier",
                "dangerous_goods",
            ]),
            numerical: s(&[
                "weight_kg",
                "volume_m3",
                "total_items",
                "dest_latitude",
                "dest_longitude",
                "distance_km",
            ]),
            planned_arrival: "planned_arrival".into(),
            actual_arrival: "actual_arrival".into(),
        }
    }
}

/// Parsed rows plus the number of rows rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested<T> {
    pub data: T,
    pub skipped: usize,
}

/// Reads a labeled dataset. Rows with unparseable or non-finite numerics,
/// bad dates or a missing actual arrival are skipped and counted.
pub fn ingest_csv(path: &Path, columns: &ColumnMap) -> Result<Ingested<Dataset>> {
    let Ingested { data, skipped } = read(path, columns, true)?;
    Ok(Ingested {
        data: Dataset::from_records(data)?,
        skipped,
    })
}

/// Reads records for inference; the actual-arrival column may be absent or blank.
pub fn ingest_records(path: &Path, columns: &ColumnMap) -> Result<Ingested<Vec<ShipmentRecord>>> {
    read(path, columns, false)
}

fn read(path: &Path, columns: &ColumnMap, require_actual: bool) -> Result<Ingested<Vec<ShipmentRecord>>> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.len() == 0 {
        return Err(Error::Empty(format!("{} is an empty file", path.display())));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Empty(format!("{} has no header row", path.display())));
    }
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let require = |name: &str| {
        find(name).ok_or_else(|| Error::Schema(format!("missing required column `{name}`")))
    };

    let cat_idx = columns
        .categorical
        .iter()
        .map(|c| require(c))
        .collect::<Result<Vec<_>>>()?;
    let num_idx = columns
        .numerical
        .iter()
        .map(|c| require(c))
        .collect::<Result<Vec<_>>>()?;
    let planned_idx = require(&columns.planned_arrival)?;
    let actual_idx = if require_actual {
        Some(require(&columns.actual_arrival)?)
    } else {
        find(&columns.actual_arrival)
    };

    let mut records = Vec::new();
    let mut skipped = 0usize;
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        match parse_row(&row, &cat_idx, &num_idx, planned_idx, actual_idx, require_actual) {
            Some(r) => records.push(r),
            None => {
                skipped += 1;
                log::debug!("skipping data row {} of {}", line + 1, path.display());
            }
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} malformed rows", path.display());
    }
    Ok(Ingested {
        data: records,
        skipped,
    })
}

fn parse_row(
    row: &csv::StringRecord,
    cat_idx: &[usize],
    num_idx: &[usize],
    planned_idx: usize,
    actual_idx: Option<usize>,
    require_actual: bool,
) -> Option<ShipmentRecord> {
    let categorical = cat_idx
        .iter()
        .map(|&i| row.get(i).map(|s| s.trim().to_string()))
        .collect::<Option<Vec<_>>>()?;
    let numerical = num_idx
        .iter()
        .map(|&i| {
            row.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
        })
        .collect::<Option<Vec<_>>>()?;
    let planned_arrival = Timestamp::parse_iso_date(row.get(planned_idx)?)?;
    let actual_arrival = match actual_idx.and_then(|i| row.get(i)).map(str::trim) {
        Some(s) if !s.is_empty() => Some(Timestamp::parse_iso_date(s)?),
        _ if require_actual => return None,
        _ => None,
    };
    Some(ShipmentRecord {
        categorical,
        numerical,
        planned_arrival,
        actual_arrival,
    })
}

/// Writes `data` in the dialect [`ingest_csv`] reads, preceded by `preamble`
/// lines as `#` comments. Returns the number of data rows written.
pub fn write_csv(data: &Dataset, columns: &ColumnMap, path: &Path, preamble: &[String]) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for line in preamble {
        writeln!(out, "# {line}").map_err(|e| Error::io(path, e))?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header: Vec<&str> = Vec::new();
        header.extend(columns.categorical.iter().map(String::as_str));
        header.extend(columns.numerical.iter().map(String::as_str));
        header.push(&columns.planned_arrival);
        header.push(&columns.actual_arrival);
        w.write_record(&header)?;
        for r in data.records() {
            let mut fields: Vec<String> = Vec::with_capacity(header.len());
            fields.extend(r.categorical.iter().cloned());
            fields.extend(r.numerical.iter().map(|v| v.to_string()));
            fields.push(r.planned_arrival.to_string());
            fields.push(r.actual_arrival.map(|t| t.to_string()).unwrap_or_default());
            w.write_record(&fields)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(data.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_map() -> ColumnMap {
        ColumnMap {
            categorical: vec!["country".into()],
            numerical: vec!["weight".into()],
            planned_arrival: "planned".into(),
            actual_arrival: "actual".into(),
        }
    }

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn well_formed_three_rows() {
        let f = write_tmp(
            "country,weight,planned,actual\n\
             US,1.5,2023-01-01,2023-01-01\n\
             DE,2,2023-01-02,2023-01-05\n\
             US,0.25,2023-01-03,2023-01-02\n",
        );
        let ing = ingest_csv(f.path(), &small_map()).unwrap();
        assert_eq!((ing.data.len(), ing.skipped), (3, 0));
        assert_eq!(ing.data.labels()[1].delay_days, 3.0);
        assert!(ing.data.labels()[1].is_delayed);
        assert_eq!(ing.data.labels()[2].delay_days, -1.0);
    }

    #[test]
    fn unparseable_numeric_row_is_skipped_and_counted() {
        let f = write_tmp(
            "country,weight,planned,actual\n\
             US,1.5,2023-01-01,2023-01-01\n\
             DE,abc,2023-01-02,2023-01-05\n\
             US,NaN,2023-01-02,2023-01-05\n\
             US,0.25,2023-01-03,2023-01-02\n",
        );
        let ing = ingest_csv(f.path(), &small_map()).unwrap();
        assert_eq!((ing.data.len(), ing.skipped), (2, 2));
    }

    #[test]
    fn missing_column_is_fatal() {
        let f = write_tmp("country,planned,actual\nUS,2023-01-01,2023-01-01\n");
        let err = ingest_csv(f.path(), &small_map()).unwrap_err();
        assert!(matches!(err, Error::Schema(ref m) if m.contains("weight")), "{err}");
    }

    #[test]
    fn empty_file_is_fatal() {
        let f = write_tmp("");
        assert!(matches!(ingest_csv(f.path(), &small_map()), Err(Error::Empty(_))));
    }

    #[test]
    fn unlabeled_ingest_tolerates_missing_actual_column() {
        let f = write_tmp("# provenance line\ncountry,weight,planned\nUS,1,2023-01-01\n");
        let ing = ingest_records(f.path(), &small_map()).unwrap();
        assert_eq!(ing.data.len(), 1);
        assert!(ing.data[0].actual_arrival.is_none());
        assert!(ingest_csv(f.path(), &small_map()).is_err());
    }
}
