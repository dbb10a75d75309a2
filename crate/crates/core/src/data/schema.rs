//! Feature schema fitted on the training split: categorical vocabularies with
//! a reserved UNKNOWN slot and z-score parameters for numerical columns.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ColumnMap, Dataset, ShipmentRecord};
use crate::error::{Error, Result};

/// Index every unseen token maps to.
pub const UNKNOWN_INDEX: usize = 0;

/// Token → index map. Known tokens occupy `1..=tokens.len()` in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 1))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Cardinality including the UNKNOWN slot.
    pub fn cardinality(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNKNOWN_INDEX)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.tokens.get(i)).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalSpec {
    pub name: String,
    pub vocabulary: Vocabulary,
}

impl CategoricalSpec {
    pub fn cardinality(&self) -> usize {
        self.vocabulary.cardinality()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericalSpec {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub categorical: Vec<CategoricalSpec>,
    pub numerical: Vec<NumericalSpec>,
    /// Degenerate-column notices produced while fitting.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FeatureSchema {
    pub fn n_categorical(&self) -> usize {
        self.categorical.len()
    }

    pub fn n_numerical(&self) -> usize {
        self.numerical.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.categorical.iter().map(CategoricalSpec::cardinality).collect()
    }

    /// SHA-256 over the canonical JSON form (warnings excluded).
    pub fn hash(&self) -> String {
        let canon = FeatureSchema {
            warnings: Vec::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canon).expect("schema serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Fits vocabularies and standardization parameters on `train`. Feature
/// names come from `columns`, in record order.
pub fn fit_schema(train: &Dataset, columns: &ColumnMap) -> Result<FeatureSchema> {
    let cat_names = &columns.categorical;
    let num_names = &columns.numerical;
    if train.is_empty() {
        return Err(Error::Empty("cannot fit a schema on an empty training split".into()));
    }
    let k = cat_names.len();
    let m = num_names.len();
    for (i, r) in train.records().iter().enumerate() {
        check_widths(r, k, m, i)?;
    }

    let categorical = cat_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let distinct: BTreeSet<&str> =
                train.records().iter().map(|r| r.categorical[j].as_str()).collect();
            CategoricalSpec {
                name: name.clone(),
                vocabulary: Vocabulary::from(
                    distinct.into_iter().map(str::to_string).collect::<Vec<_>>(),
                ),
            }
        })
        .collect();

    let n = train.len() as f64;
    let mut warnings = Vec::new();
    let numerical = num_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mean = train.records().iter().map(|r| r.numerical[j]).sum::<f64>() / n;
            let var = train
                .records()
                .iter()
                .map(|r| (r.numerical[j] - mean).powi(2))
                .sum::<f64>()
                / n;
            let mut std = var.sqrt();
            if !(std > 1e-12) {
                let msg = format!("numerical column `{name}` is constant; using stddev 1");
                log::warn!("{msg}");
                warnings.push(msg);
                std = 1.0;
            }
            NumericalSpec {
                name: name.clone(),
                mean,
                std,
            }
        })
        .collect();

    Ok(FeatureSchema {
        categorical,
        numerical,
        warnings,
    })
}

fn check_widths(r: &ShipmentRecord, k: usize, m: usize, row: usize) -> Result<()> {
    if r.categorical.len() != k || r.numerical.len() != m {
        return Err(Error::Schema(format!(
            "record {row} has {} categorical / {} numerical values, schema expects {k} / {m}",
            r.categorical.len(),
            r.numerical.len()
        )));
    }
    Ok(())
}

/// Category indices (UNKNOWN for unseen tokens) and standardized numericals.
pub fn encode(record: &ShipmentRecord, schema: &FeatureSchema) -> Result<(Vec<usize>, Vec<f64>)> {
    check_widths(record, schema.n_categorical(), schema.n_numerical(), 0)?;
    let idx = schema
        .categorical
        .iter()
        .zip(&record.categorical)
        .map(|(spec, tok)| spec.vocabulary.index_of(tok))
        .collect();
    let num = schema
        .numerical
        .iter()
        .zip(&record.numerical)
        .map(|(spec, &x)| (x - spec.mean) / spec.std)
        .collect();
    Ok((idx, num))
}

/// Dense encoded features and targets for a whole split.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet {
    pub n: usize,
    pub n_cat: usize,
    pub n_num: usize,
    /// Row-major `n × n_cat`.
    pub cat: Vec<usize>,
    /// Row-major `n × n_num`.
    pub num: Vec<f64>,
    /// Delay in days; zero for unlabeled rows.
    pub y: Vec<f64>,
    pub delayed: Vec<bool>,
}

impl EncodedSet {
    pub fn cat_row(&self, i: usize) -> &[usize] {
        &self.cat[i * self.n_cat..(i + 1) * self.n_cat]
    }

    pub fn num_row(&self, i: usize) -> &[f64] {
        &self.num[i * self.n_num..(i + 1) * self.n_num]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Encodes records without labels.
    pub fn from_records(records: &[ShipmentRecord], schema: &FeatureSchema) -> Result<Self> {
        let mut out = Self {
            n: records.len(),
            n_cat: schema.n_categorical(),
            n_num: schema.n_numerical(),
            cat: Vec::with_capacity(records.len() * schema.n_categorical()),
            num: Vec::with_capacity(records.len() * schema.n_numerical()),
            y: vec![0.0; records.len()],
            delayed: vec![false; records.len()],
        };
        for (i, r) in records.iter().enumerate() {
            let (c, x) = encode(r, schema).map_err(|e| match e {
                Error::Schema(m) => Error::Schema(format!("row {i}: {m}")),
                other => other,
            })?;
            out.cat.extend(c);
            out.num.extend(x);
        }
        Ok(out)
    }
}

pub fn encode_dataset(data: &Dataset, schema: &FeatureSchema) -> Result<EncodedSet> {
    let mut out = EncodedSet::from_records(data.records(), schema)?;
    out.y = data.labels().iter().map(|l| l.delay_days).collect();
    out.delayed = data.labels().iter().map(|l| l.is_delayed).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitTag, Timestamp};

    fn rec(cat: &str, x: f64) -> ShipmentRecord {
        ShipmentRecord {
            categorical: vec![cat.into()],
            numerical: vec![x],
            planned_arrival: Timestamp(0.0),
            actual_arrival: Some(Timestamp(0.0)),
        }
    }

    fn cols() -> ColumnMap {
        ColumnMap {
            categorical: vec!["to_country".into()],
            numerical: vec!["weight".into()],
            planned_arrival: "p".into(),
            actual_arrival: "a".into(),
        }
    }

    fn ds(rows: &[(&str, f64)]) -> Dataset {
        Dataset::from_records(rows.iter().map(|&(c, x)| rec(c, x)).collect()).unwrap()
    }

    #[test]
    fn vocabulary_reserves_unknown() {
        let s = fit_schema(&ds(&[("US", 1.0), ("DE", 2.0), ("US", 3.0)]), &cols()).unwrap();
        assert_eq!(s.categorical[0].cardinality(), 3);
        let (idx, _) = encode(&rec("US", 0.0), &s).unwrap();
        assert!(idx[0] >= 1);
        let (idx, _) = encode(&rec("FR", 0.0), &s).unwrap();
        assert_eq!(idx[0], UNKNOWN_INDEX);
    }

    #[test]
    fn population_std_and_mean_identity() {
        let s = fit_schema(&ds(&[("a", 1.0), ("a", 2.0), ("a", 3.0)]), &cols()).unwrap();
        assert_eq!(s.numerical[0].mean, 2.0);
        assert!((s.numerical[0].std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let (_, x) = encode(&rec("a", 2.0), &s).unwrap();
        assert_eq!(x[0], 0.0);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn constant_column_gets_unit_std_and_warning() {
        let s = fit_schema(&ds(&[("a", 0.0), ("b", 0.0)]), &cols()).unwrap();
        assert_eq!((s.numerical[0].mean, s.numerical[0].std), (0.0, 1.0));
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn schema_round_trips_through_json_with_lookup_intact() {
        let s = fit_schema(&ds(&[("US", 1.0), ("DE", 2.0)]), &cols()).unwrap();
        let back: FeatureSchema = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.categorical[0].vocabulary.index_of("US"), s.categorical[0].vocabulary.index_of("US"));
        assert_eq!(back.hash(), s.hash());
    }

    #[test]
    fn empty_train_rejected() {
        let empty = Dataset::new(vec![], vec![], SplitTag::Train).unwrap();
        assert!(fit_schema(&empty, &cols()).is_err());
    }
}
