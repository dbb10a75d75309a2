//! Chronological train / validation / calibration / test partitioning.

use serde::{Deserialize, Serialize};

use super::{Dataset, SplitTag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub calib: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            calib: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.calib, self.test];
        if all.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config("data.split", "split ratios must be non-negative"));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split", format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Split sizes for `n` rows: val, calib and test get `floor(n·r)`, train
    /// takes the remainder.
    pub fn sizes(&self, n: usize) -> [usize; 4] {
        let f = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let (val, calib, test) = (f(self.val), f(self.calib), f(self.test));
        let train = n.saturating_sub(val + calib + test);
        [train, val, calib, test]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub calib: Dataset,
    pub test: Dataset,
}

/// Stable-sorts by planned arrival, then cuts contiguous blocks in the order
/// train → val → calib → test.
pub fn chronological_split(data: &Dataset, ratios: &SplitRatios) -> Result<Splits> {
    ratios.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let recs = data.records();
    order.sort_by(|&a, &b| {
        recs[a]
            .planned_arrival
            .0
            .total_cmp(&recs[b].planned_arrival.0)
    });
    Ok(cut(data, &order, ratios))
}

/// Seeded uniform permutation followed by the same contiguous cuts, for
/// settings where rows are treated as exchangeable.
pub fn random_split(data: &Dataset, ratios: &SplitRatios, seed: u64) -> Result<Splits> {
    use rand::seq::SliceRandom;
    ratios.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut crate::numerics::substream(seed, 300));
    Ok(cut(data, &order, ratios))
}

fn cut(data: &Dataset, order: &[usize], ratios: &SplitRatios) -> Splits {
    let [n_train, n_val, n_calib, _] = ratios.sizes(data.len());
    let (train, rest) = order.split_at(n_train);
    let (val, rest) = rest.split_at(n_val);
    let (calib, test) = rest.split_at(n_calib);
    Splits {
        train: data.select(train, SplitTag::Train),
        val: data.select(val, SplitTag::Val),
        calib: data.select(calib, SplitTag::Calib),
        test: data.select(test, SplitTag::Test),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ShipmentRecord, Timestamp};
    use proptest::prelude::*;

    fn dataset(days: &[f64]) -> Dataset {
        Dataset::from_records(
            days.iter()
                .enumerate()
                .map(|(i, &d)| ShipmentRecord {
                    categorical: vec![format!("r{i}")],
                    numerical: vec![i as f64],
                    planned_arrival: Timestamp(d),
                    actual_arrival: Some(Timestamp(d)),
                })
                .collect(),
        )
        .unwrap()
    }

    fn ids(d: &Dataset) -> Vec<String> {
        d.records().iter().map(|r| r.categorical[0].clone()).collect()
    }

    #[test]
    fn ten_records_split_7_1_1_1() {
        let d = dataset(&(0..10).map(f64::from).collect::<Vec<_>>());
        let s = chronological_split(&d, &SplitRatios::default()).unwrap();
        assert_eq!(
            [s.train.len(), s.val.len(), s.calib.len(), s.test.len()],
            [7, 1, 1, 1]
        );
        assert_eq!(s.train.split_tag, SplitTag::Train);
        let max_train = s.train.records().iter().map(|r| r.planned_arrival.0).fold(f64::MIN, f64::max);
        let min_test = s.test.records().iter().map(|r| r.planned_arrival.0).fold(f64::MAX, f64::min);
        assert!(max_train <= min_test);
    }

    #[test]
    fn ties_keep_input_order() {
        let d = dataset(&[1.0, 0.0, 1.0, 0.0]);
        let r = SplitRatios {
            train: 1.0,
            val: 0.0,
            calib: 0.0,
            test: 0.0,
        };
        let s = chronological_split(&d, &r).unwrap();
        assert_eq!(ids(&s.train), ["r1", "r3", "r0", "r2"]);
    }

    #[test]
    fn bad_ratios_rejected() {
        let d = dataset(&[0.0]);
        let neg = SplitRatios {
            train: 1.2,
            val: -0.2,
            calib: 0.0,
            test: 0.0,
        };
        assert!(chronological_split(&d, &neg).is_err());
        let short = SplitRatios {
            train: 0.5,
            ..SplitRatios::default()
        };
        assert!(chronological_split(&d, &short).is_err());
        assert!(chronological_split(&Dataset::empty(), &SplitRatios::default()).is_err());
    }

    #[test]
    fn random_split_is_seeded_partition() {
        let d = dataset(&(0..50).map(f64::from).collect::<Vec<_>>());
        let a = random_split(&d, &SplitRatios::default(), 3).unwrap();
        let b = random_split(&d, &SplitRatios::default(), 3).unwrap();
        assert_eq!(ids(&a.test), ids(&b.test));
        assert_eq!([a.train.len(), a.val.len(), a.calib.len(), a.test.len()], [35, 5, 5, 5]);
        let mut all: Vec<String> = [&a.train, &a.val, &a.calib, &a.test].iter().flat_map(|s| ids(s)).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 50);
        let c = random_split(&d, &SplitRatios::default(), 4).unwrap();
        assert_ne!(ids(&a.train), ids(&c.train));
    }

    proptest! {
        #[test]
        fn shuffled_input_gives_identical_membership(
            n in 1usize..200,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let days: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let sorted = dataset(&days);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut crate::numerics::seeded(seed));
            let shuffled = sorted.select(&perm, SplitTag::Unsplit);
            let a = chronological_split(&sorted, &SplitRatios::default()).unwrap();
            let b = chronological_split(&shuffled, &SplitRatios::default()).unwrap();
            prop_assert_eq!(ids(&a.train), ids(&b.train));
            prop_assert_eq!(ids(&a.val), ids(&b.val));
            prop_assert_eq!(ids(&a.calib), ids(&b.calib));
            prop_assert_eq!(ids(&a.test), ids(&b.test));
            prop_assert_eq!(a.train.len() + a.val.len() + a.calib.len() + a.test.len(), n);
        }
    }
}
