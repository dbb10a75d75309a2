//! Synthetic shipment generator.
//!
//! Produces zero-inflated delay data with the same column set the real
//! pipeline consumes: skewed categorical draws, log-normal physical
//! attributes, destination coordinates and great-circle distance. A latent
//! risk score (sparse additive effects plus one interaction) drives a
//! logistic delay gate whose intercept is solved by bisection so that the
//! realized delay fraction hits the target. Delayed rows get `1 + ⌊excess⌋`
//! days with a log-normal excess scaled by risk; on-time rows get a small
//! non-positive integer concentrated at 0. Timestamps are whole days, so
//! labels survive a CSV round trip exactly.

use std::path::Path;

use chrono::NaiveDate;
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_csv, ColumnMap, Dataset, DelayLabel, ShipmentRecord, SplitTag, Timestamp};
use crate::error::{Error, Result};
use crate::numerics::layers::sigmoid_scalar;
use crate::numerics::{substream, DetRng};

const ORIGIN_LAT: f64 = 51.2;
const ORIGIN_LON: f64 = 9.4;
const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_records: usize,
    pub delay_rate_target: f64,
    pub n_destinations: usize,
    pub n_carriers: usize,
    pub n_shipment_types: usize,
    pub n_countries: usize,
    pub seed: u64,
    /// Mean excess delay of delayed shipments, in days.
    pub delay_scale: f64,
    /// Spread of early arrivals for on-time shipments, in days.
    pub ontime_spread: f64,
    /// Multiplier on the latent risk inside the delay gate.
    pub signal_strength: f64,
    /// Assign planned dates in random order, making rows exchangeable in time.
    pub shuffle_time: bool,
    /// Linear drift over the time axis: shifts the gate logit by
    /// `drift·(τ−½)` and scales delay durations by `exp(drift·(τ−½))`.
    pub drift: f64,
    pub start_date: String,
    pub span_days: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_records: 20_000,
            delay_rate_target: 0.10,
            n_destinations: 2000,
            n_carriers: 40,
            n_shipment_types: 12,
            n_countries: 20,
            seed: 7,
            delay_scale: 2.0,
            ontime_spread: 1.0,
            signal_strength: 1.5,
            shuffle_time: false,
            drift: 0.0,
            start_date: "2022-09-01".into(),
            span_days: 500,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("generator.{name}");
        if !(0.01..=0.5).contains(&self.delay_rate_target) {
            return Err(Error::config(f("delay_rate_target"), "must lie in [0.01, 0.5]"));
        }
        for (name, v) in [
            ("n_destinations", self.n_destinations),
            ("n_carriers", self.n_carriers),
            ("n_shipment_types", self.n_shipment_types),
            ("n_countries", self.n_countries),
        ] {
            if v < 2 {
                return Err(Error::config(f(name), "cardinality must be at least 2"));
            }
        }
        if !(self.delay_scale > 0.0) {
            return Err(Error::config(f("delay_scale"), "must be positive"));
        }
        if !(self.ontime_spread > 0.0) {
            return Err(Error::config(f("ontime_spread"), "must be positive"));
        }
        if !self.signal_strength.is_finite() || !self.drift.is_finite() {
            return Err(Error::config(f("signal_strength"), "must be finite"));
        }
        if self.n_records == 0 {
            return Err(Error::config(f("n_records"), "must be positive"));
        }
        self.start()?;
        Ok(())
    }

    fn start(&self) -> Result<Timestamp> {
        NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map(Timestamp::from_date)
            .map_err(|_| Error::config("generator.start_date", "expected YYYY-MM-DD"))
    }
}

/// Fixed per-entity effects drawn once per seed.
struct World {
    country_effect: Vec<f64>,
    dest_country: Vec<usize>,
    dest_coords: Vec<(f64, f64)>,
    dest_effect: Vec<f64>,
    carrier_effect: Vec<f64>,
    type_effect: Vec<f64>,
}

impl World {
    fn draw(cfg: &GeneratorConfig, rng: &mut DetRng) -> Self {
        let n01 = Normal::new(0.0, 1.0).expect("unit normal");
        let country_center: Vec<(f64, f64)> = (0..cfg.n_countries)
            .map(|_| (rng.random_range(-40.0..62.0), rng.random_range(-120.0..150.0)))
            .collect();
        let country_effect = (0..cfg.n_countries).map(|_| 0.8 * n01.sample(rng)).collect();
        let country_pick = zipf(cfg.n_countries, 1.0);
        let dest_country: Vec<usize> = (0..cfg.n_destinations)
            .map(|_| country_pick.sample(rng))
            .collect();
        let dest_coords = dest_country
            .iter()
            .map(|&c| {
                let (lat, lon) = country_center[c];
                (
                    (lat + 2.0 * n01.sample(rng)).clamp(-89.0, 89.0),
                    lon + 2.0 * n01.sample(rng),
                )
            })
            .collect();
        let dest_effect = (0..cfg.n_destinations).map(|_| 0.3 * n01.sample(rng)).collect();
        let carrier_effect = (0..cfg.n_carriers).map(|_| 0.7 * n01.sample(rng)).collect();
        let type_effect = (0..cfg.n_shipment_types).map(|_| 0.6 * n01.sample(rng)).collect();
        Self {
            country_effect,
            dest_country,
            dest_coords,
            dest_effect,
            carrier_effect,
            type_effect,
        }
    }
}

fn zipf(n: usize, exponent: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|k| 1.0 / ((k + 1) as f64).powf(exponent)))
        .expect("positive weights")
}

fn haversine_km((lat1, lon1): (f64, f64), (lat2, lon2): (f64, f64)) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

/// Features of one shipment before labeling.
struct Draft {
    record: ShipmentRecord,
    risk: f64,
}

/// Generates a dataset; deterministic for a given config.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n_records;
    let world = World::draw(cfg, &mut substream(cfg.seed, 1));

    let mut rng = substream(cfg.seed, 2);
    let dest_pick = zipf(cfg.n_destinations, 1.05);
    let carrier_pick = zipf(cfg.n_carriers, 1.2);
    let type_pick = zipf(cfg.n_shipment_types, 1.1);
    let weight_dist = LogNormal::<f64>::new(3.0, 1.2).expect("valid");
    let density_dist = LogNormal::new(0.0, 0.5).expect("valid");
    let items_dist = LogNormal::<f64>::new(1.0, 0.8).expect("valid");

    let drafts: Vec<Draft> = (0..n)
        .map(|_| {
            let dest = dest_pick.sample(&mut rng);
            let carrier = carrier_pick.sample(&mut rng);
            let stype = type_pick.sample(&mut rng);
            let dangerous = rng.random::<f64>() < 0.08;
            let weight = round_to(weight_dist.sample(&mut rng), 2).max(0.01);
            let volume = round_to(weight / 200.0 * density_dist.sample(&mut rng), 4).max(0.0001);
            let items: f64 = (1.0 + items_dist.sample(&mut rng).floor()).min(500.0);
            let country = world.dest_country[dest];
            let (lat, lon) = world.dest_coords[dest];
            let distance = round_to(haversine_km((ORIGIN_LAT, ORIGIN_LON), (lat, lon)), 1);

            let long_haul = distance > 3000.0;
            let risk = world.country_effect[country]
                + world.carrier_effect[carrier]
                + world.type_effect[stype]
                + world.dest_effect[dest]
                + if dangerous { 0.9 } else { 0.0 }
                + 0.6 * ((distance + 1.0).ln() - 7.5)
                + 0.3 * ((weight + 1.0).ln() - 3.0)
                + if dangerous && long_haul { 0.5 } else { 0.0 };

            let record = ShipmentRecord {
                categorical: vec![
                    format!("D{dest:06}"),
                    format!("CITY{:05}", dest / 4),
                    format!("C{country:02}"),
                    format!("C00-C{country:02}"),
                    format!("ST{stype:02}"),
                    format!("CR{carrier:03}"),
                    if dangerous { "Y" } else { "N" }.to_string(),
                ],
                numerical: vec![weight, volume, items, round_to(lat, 4), round_to(lon, 4), distance],
                planned_arrival: Timestamp(0.0),
                actual_arrival: None,
            };
            Draft { record, risk }
        })
        .collect();

    let tau: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let logit_base: Vec<f64> = drafts
        .iter()
        .zip(&tau)
        .map(|(d, &t)| cfg.signal_strength * d.risk + cfg.drift * (t - 0.5))
        .collect();
    let mut gate_rng = substream(cfg.seed, 3);
    let u: Vec<f64> = (0..n).map(|_| gate_rng.random::<f64>()).collect();
    let intercept = solve_intercept(&logit_base, &u, cfg.delay_rate_target)?;
    let delayed: Vec<bool> = logit_base
        .iter()
        .zip(&u)
        .map(|(&z, &ui)| ui < sigmoid_scalar(intercept + z))
        .collect();
    let realized = delayed.iter().filter(|&&d| d).count() as f64 / n as f64;
    if (realized - cfg.delay_rate_target).abs() > 0.1 * cfg.delay_rate_target {
        return Err(Error::Generator(format!(
            "realized delay rate {realized} is not within 10% of {} for n = {n}",
            cfg.delay_rate_target
        )));
    }

    let mut dur_rng = substream(cfg.seed, 4);
    let sigma = 0.8;
    let excess_dist = LogNormal::new(-sigma * sigma / 2.0, sigma).expect("valid");
    let early_dist = Normal::new(0.0, cfg.ontime_spread).expect("valid");
    let delays: Vec<f64> = drafts
        .iter()
        .zip(&delayed)
        .zip(&tau)
        .map(|((d, &is_delayed), &t)| {
            if is_delayed {
                let scale = cfg.delay_scale
                    * (0.35 * d.risk).exp()
                    * (cfg.drift * (t - 0.5)).exp();
                1.0 + (scale * excess_dist.sample(&mut dur_rng)).floor().min(365.0)
            } else {
                let bound = 2.0 * cfg.ontime_spread;
                let mut k = 0.0;
                for _ in 0..64 {
                    let cand = early_dist.sample(&mut dur_rng).abs().floor();
                    if cand < bound {
                        k = cand;
                        break;
                    }
                }
                -k
            }
        })
        .collect();

    let start = cfg.start()?.0;
    let mut days: Vec<f64> = tau
        .iter()
        .map(|t| start + (t * cfg.span_days as f64).floor())
        .collect();
    if cfg.shuffle_time {
        days.shuffle(&mut substream(cfg.seed, 5));
    }

    let mut records = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for ((draft, delay), day) in drafts.into_iter().zip(delays).zip(days) {
        let mut r = draft.record;
        r.planned_arrival = Timestamp(day);
        r.actual_arrival = Some(Timestamp(day + delay));
        records.push(r);
        labels.push(DelayLabel::from_delay(delay));
    }
    Dataset::new(records, labels, SplitTag::Unsplit)
}

/// Bisection on the intercept so the realized fraction of `u_i < σ(b + z_i)`
/// reaches `target`. The realized fraction is a non-decreasing step function
/// of `b`; the smallest bracketed `b` reaching the target is returned.
fn solve_intercept(logits: &[f64], u: &[f64], target: f64) -> Result<f64> {
    let rate = |b: f64| {
        logits
            .iter()
            .zip(u)
            .filter(|(&z, &ui)| ui < sigmoid_scalar(b + z))
            .count() as f64
            / logits.len() as f64
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    if rate(lo) > target || rate(hi) < target {
        return Err(Error::Generator(format!(
            "delay rate {target} not reachable within intercept bracket [{lo}, {hi}]"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(hi)
}

/// Writes the generator's CSV dialect. Returns the number of data rows.
pub fn emit_csv(data: &Dataset, path: &Path) -> Result<usize> {
    write_csv(data, &ColumnMap::default(), path, &[])
}
