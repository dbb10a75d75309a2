//! Shipment records, delay labels, datasets and chronological splitting.

mod csv_io;
mod schema;
mod split;

pub use csv_io::{ingest_csv, ingest_records, write_csv, ColumnMap, Ingested};
pub use schema::{encode, encode_dataset, fit_schema, CategoricalSpec, EncodedSet, FeatureSchema, NumericalSpec, Vocabulary, UNKNOWN_INDEX};
pub use split::{chronological_split, random_split, SplitRatios, Splits};

use std::fmt;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A shipment counts as delayed when it arrives at least this many days late.
pub const DELAY_THRESHOLD_DAYS: f64 = 1.0;

/// A point in time measured in days since 1970-01-01.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Timestamp(pub f64);

impl Timestamp {
    fn epoch() -> NaiveDate {
        NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch")
    }

    pub fn from_date(date: NaiveDate) -> Self {
        Timestamp(date.signed_duration_since(Self::epoch()).num_days() as f64)
    }

    /// Parses `YYYY-MM-DD`. Any time-of-day suffix after the date is ignored.
    pub fn parse_iso_date(s: &str) -> Option<Self> {
        let s = s.trim();
        let date_part = s.get(..10).unwrap_or(s);
        NaiveDate::parse_from_str(date_part, "%Y-%m-%d")
            .ok()
            .map(Self::from_date)
    }

    /// Calendar date, truncating any fractional day.
    pub fn to_date(self) -> NaiveDate {
        let days = self.0.floor() as i64;
        if days >= 0 {
            Self::epoch() + Days::new(days as u64)
        } else {
            Self::epoch() - Days::new(days.unsigned_abs())
        }
    }

    pub fn days(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_date().format("%Y-%m-%d"))
    }
}

/// One shipment's raw features and arrival times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShipmentRecord {
    pub categorical: Vec<String>,
    pub numerical: Vec<f64>,
    pub planned_arrival: Timestamp,
    /// Absent at inference time.
    pub actual_arrival: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayLabel {
    /// Actual minus planned arrival in days; negative means early.
    pub delay_days: f64,
    pub is_delayed: bool,
}

impl DelayLabel {
    pub fn from_delay(delay_days: f64) -> Self {
        Self {
            delay_days,
            is_delayed: delay_days >= DELAY_THRESHOLD_DAYS,
        }
    }
}

pub fn derive_label(planned: Timestamp, actual: Timestamp) -> DelayLabel {
    DelayLabel::from_delay(actual.0 - planned.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Calib,
    Test,
    Unsplit,
}

/// Ordered records with their parallel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ShipmentRecord>,
    labels: Vec<DelayLabel>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(records: Vec<ShipmentRecord>, labels: Vec<DelayLabel>, split_tag: SplitTag) -> Result<Self> {
        if records.len() != labels.len() {
            return Err(Error::Shape {
                op: "Dataset::new",
                detail: format!("{} records vs {} labels", records.len(), labels.len()),
            });
        }
        Ok(Self {
            records,
            labels,
            split_tag,
        })
    }

    /// Derives every label from the record timestamps.
    pub fn from_records(records: Vec<ShipmentRecord>) -> Result<Self> {
        let labels = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.actual_arrival
                    .map(|a| derive_label(r.planned_arrival, a))
                    .ok_or_else(|| Error::Schema(format!("record {i} has no actual arrival")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(records, labels, SplitTag::Unsplit)
    }

    pub fn empty() -> Self {
        Self {
            records: Vec::new(),
            labels: Vec::new(),
            split_tag: SplitTag::Unsplit,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ShipmentRecord] {
        &self.records
    }

    pub fn labels(&self) -> &[DelayLabel] {
        &self.labels
    }

    pub fn delay_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|l| l.is_delayed).count() as f64 / self.len() as f64
    }

    pub fn into_parts(self) -> (Vec<ShipmentRecord>, Vec<DelayLabel>) {
        (self.records, self.labels)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize], tag: SplitTag) -> Self {
        Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split_tag: tag,
        }
    }
}
