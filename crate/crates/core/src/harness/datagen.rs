//! Deterministic synthetic taxi trips and daily weather.
//!
//! Trip CSV columns (no header):
//!
//! | idx | field |
//! |-----|-------|
//! | 0 | pickup_datetime (`YYYY-MM-DDTHH:MM:SS`) |
//! | 1 | dropoff_datetime |
//! | 2 | pickup_lon |
//! | 3 | pickup_lat |
//! | 4 | dropoff_lon |
//! | 5 | dropoff_lat |
//! | 6 | trip_distance (miles) |
//! | 7 | payment_type (1 = credit, 2 = cash) |
//! | 8 | tip_amount (USD) |
//! | 9 | taxi_type (`yellow` or `green`) |
//!
//! Records are drawn sequentially from one ChaCha8 stream and cut into
//! contiguous parts, so the concatenated parts depend only on
//! `(records, seed)`. About 3% of drop-offs land in each of the two
//! headquarters boxes so the filter queries have something to count.

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::store::{ObjectRef, ObjectStore, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl BBox {
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        (self.lon_min..=self.lon_max).contains(&lon) && (self.lat_min..=self.lat_max).contains(&lat)
    }
}

pub const NYC: BBox = BBox {
    lon_min: -74.05,
    lon_max: -73.75,
    lat_min: 40.60,
    lat_max: 40.90,
};

/// Synthetic rectangle standing in for 200 West St.
pub const GOLDMAN: BBox = BBox {
    lon_min: -74.0150,
    lon_max: -74.0135,
    lat_min: 40.7140,
    lat_max: 40.7155,
};

/// Synthetic rectangle standing in for 388 Greenwich St.
pub const CITIGROUP: BBox = BBox {
    lon_min: -74.0118,
    lon_max: -74.0102,
    lat_min: 40.7200,
    lat_max: 40.7214,
};

const HQ_SHARE: f64 = 0.03;

pub fn first_day() -> NaiveDate {
    NaiveDate::from_ymd_opt(2015, 1, 1).unwrap()
}

pub fn last_day() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 6, 30).unwrap()
}

/// Where a dataset lives: `<bucket>/<prefix>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataLocation {
    pub bucket: String,
    pub prefix: String,
}

impl DataLocation {
    /// Parses `bucket/some/prefix`; the prefix may be empty.
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim_matches('/');
        let (bucket, prefix) = s.split_once('/').unwrap_or((s, ""));
        if bucket.is_empty() {
            return Err(format!("location {s:?} has no bucket"));
        }
        Ok(DataLocation {
            bucket: bucket.to_string(),
            prefix: prefix.trim_matches('/').to_string(),
        })
    }

    fn join(&self, rest: &str) -> String {
        if self.prefix.is_empty() {
            rest.to_string()
        } else {
            format!("{}/{rest}", self.prefix)
        }
    }

    /// Prefix that lists exactly the trip parts.
    pub fn trips_prefix(&self) -> String {
        self.join("trips/")
    }

    pub fn part(&self, i: u32) -> ObjectRef {
        ObjectRef::new(
            self.bucket.clone(),
            self.join(&format!("trips/part-{i:05}.csv")),
        )
        .expect("valid key")
    }

    pub fn weather(&self) -> ObjectRef {
        ObjectRef::new(self.bucket.clone(), self.join("weather.csv")).expect("valid key")
    }
}

impl std::fmt::Display for DataLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.prefix.is_empty() {
            f.write_str(&self.bucket)
        } else {
            write!(f, "{}/{}", self.bucket, self.prefix)
        }
    }
}

struct Draw(ChaCha8Rng);

impl Draw {
    fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    fn below(&mut self, n: u64) -> u64 {
        self.0.next_u64() % n
    }

    fn point(&mut self, b: &BBox) -> (f64, f64) {
        (
            self.range(b.lon_min, b.lon_max),
            self.range(b.lat_min, b.lat_max),
        )
    }
}

fn trip(d: &mut Draw, span_secs: u64) -> String {
    let epoch = first_day().and_hms_opt(0, 0, 0).unwrap();
    let pickup = epoch + Duration::seconds(d.below(span_secs) as i64);
    let dropoff = pickup + Duration::seconds(60 + d.below(3540) as i64);
    let (plon, plat) = d.point(&NYC);
    let u = d.unit();
    let (dlon, dlat) = if u < HQ_SHARE {
        d.point(&GOLDMAN)
    } else if u < 2.0 * HQ_SHARE {
        d.point(&CITIGROUP)
    } else {
        d.point(&NYC)
    };
    let distance = d.range(0.1, 20.0);
    let credit = d.unit() < 0.6;
    let tip = if !credit {
        0.0
    } else if d.unit() < 0.1 {
        d.range(10.01, 30.0)
    } else {
        d.range(0.0, 10.0)
    };
    let taxi = if d.unit() < 0.8 { "yellow" } else { "green" };
    format!(
        "{},{},{plon:.6},{plat:.6},{dlon:.6},{dlat:.6},{distance:.2},{},{tip:.2},{taxi}\n",
        fmt_ts(pickup),
        fmt_ts(dropoff),
        if credit { 1 } else { 2 },
    )
}

fn fmt_ts(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// The trip CSV for `(records, seed)`, cut into `parts` contiguous chunks.
pub fn trip_parts(records: u64, seed: u64, parts: u32) -> Vec<String> {
    assert!(parts >= 1, "parts must be >= 1");
    let mut d = Draw(ChaCha8Rng::seed_from_u64(seed));
    let span_secs = ((last_day() - first_day()).num_days() as u64 + 1) * 86_400;
    (0..parts as u64)
        .map(|i| {
            let lo = records * i / parts as u64;
            let hi = records * (i + 1) / parts as u64;
            (lo..hi).map(|_| trip(&mut d, span_secs)).collect()
        })
        .collect()
}

/// One `date,precipitation_inches` row per day of the trip date range.
/// Roughly 60% of days are dry.
pub fn weather_csv(seed: u64) -> String {
    let mut d = Draw(ChaCha8Rng::seed_from_u64(seed ^ 0x5745_4154_4845_5221));
    let mut out = String::new();
    let mut day = first_day();
    while day <= last_day() {
        let inches = if d.unit() < 0.6 {
            0.0
        } else {
            // skew toward light rain
            let u = d.unit();
            (u * u * 2.0 * 100.0).round().max(1.0) / 100.0
        };
        out.push_str(&format!("{},{inches:.2}\n", day.format("%Y-%m-%d")));
        day = day.succ_opt().unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub location: String,
    pub records: u64,
    pub seed: u64,
    pub parts: Vec<String>,
    pub weather: String,
    pub bytes: u64,
}

/// Writes `parts` trip objects and the weather table under `loc`.
pub fn generate_dataset(
    store: &ObjectStore,
    loc: &DataLocation,
    records: u64,
    seed: u64,
    parts: u32,
) -> Result<GenSummary, StoreError> {
    let mut keys = Vec::new();
    let mut bytes = 0;
    for (i, body) in trip_parts(records, seed, parts).into_iter().enumerate() {
        let obj = loc.part(i as u32);
        store.put_object(&obj, body.as_bytes())?;
        bytes += body.len() as u64;
        keys.push(obj.key);
    }
    let weather = loc.weather();
    store.put_object(&weather, weather_csv(seed).as_bytes())?;
    Ok(GenSummary {
        location: loc.to_string(),
        records,
        seed,
        parts: keys,
        weather: weather.key,
        bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    /// SHA-256 of the concatenated parts for (10^4 records, seed 42), recorded
    /// from the first run of this generator.
    const FIXTURE_SHA256: &str = "cd87b12277e3902ce048407e7658d34ccd71494bfae49891e63c811b72c7e565";

    fn digest(parts: &[String]) -> String {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p.as_bytes());
        }
        format!("{:x}", h.finalize())
    }

    #[test]
    fn zero_records_gives_empty_parts() {
        let parts = trip_parts(0, 7, 3);
        assert_eq!(parts, vec![String::new(); 3]);
    }

    #[test]
    fn deterministic_and_independent_of_part_count() {
        let a = trip_parts(10_000, 42, 8);
        let b = trip_parts(10_000, 42, 8);
        assert_eq!(a, b);
        assert_eq!(a.concat(), trip_parts(10_000, 42, 3).concat());
        assert_eq!(a.concat().lines().count(), 10_000);
        assert_ne!(a.concat(), trip_parts(10_000, 43, 8).concat());
        assert_eq!(digest(&a), FIXTURE_SHA256);
    }

    #[test]
    fn rows_respect_the_schema() {
        let text = trip_parts(5_000, 1, 1).concat();
        let (mut goldman, mut citi) = (0, 0);
        for line in text.lines() {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f.len(), 10);
            let pickup = NaiveDateTime::parse_from_str(f[0], "%Y-%m-%dT%H:%M:%S").unwrap();
            let dropoff = NaiveDateTime::parse_from_str(f[1], "%Y-%m-%dT%H:%M:%S").unwrap();
            assert!(dropoff >= pickup);
            assert!(pickup.date() >= first_day() && pickup.date() <= last_day());
            let n = |i: usize| f[i].parse::<f64>().unwrap();
            assert!(NYC.contains(n(2), n(3)) && NYC.contains(n(4), n(5)));
            assert!(n(8) >= 0.0);
            assert!(f[7] == "1" || f[7] == "2");
            assert!(f[9] == "yellow" || f[9] == "green");
            goldman += GOLDMAN.contains(n(4), n(5)) as u32;
            citi += CITIGROUP.contains(n(4), n(5)) as u32;
        }
        assert!((100..200).contains(&goldman), "{goldman}");
        assert!((100..200).contains(&citi), "{citi}");
    }

    #[test]
    fn weather_covers_every_day() {
        let w = weather_csv(42);
        let days = (last_day() - first_day()).num_days() + 1;
        assert_eq!(w.lines().count() as i64, days);
        assert!(w.starts_with("2015-01-01,"));
        assert!(w
            .trim_end()
            .lines()
            .last()
            .unwrap()
            .starts_with("2016-06-30,"));
        assert!(w
            .lines()
            .all(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap() >= 0.0));
    }

    #[test]
    fn location_parsing() {
        let l = DataLocation::parse("data/taxi/").unwrap();
        assert_eq!((l.bucket.as_str(), l.prefix.as_str()), ("data", "taxi"));
        assert_eq!(l.part(3).key, "taxi/trips/part-00003.csv");
        assert_eq!(
            DataLocation::parse("data").unwrap().weather().key,
            "weather.csv"
        );
        assert!(DataLocation::parse("/").is_err());
    }

    #[test]
    fn writes_objects() {
        let store = ObjectStore::in_memory();
        let loc = DataLocation::parse("d/x").unwrap();
        let s = generate_dataset(&store, &loc, 100, 3, 4).unwrap();
        assert_eq!(s.parts.len(), 4);
        assert_eq!(
            store.list_prefix("d", &loc.trips_prefix()).unwrap().len(),
            4
        );
        assert!(store.object_size(&loc.weather()).unwrap() > 0);
    }
}
