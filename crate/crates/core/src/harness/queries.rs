//! The benchmark queries Q0-Q6 over the synthetic taxi data.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::datagen::{BBox, DataLocation, CITIGROUP, GOLDMAN};
use crate::functions::{FnError, FunctionRegistry, SideInputs};
use crate::plan::Lineage;
use crate::record::Datum;
use crate::scheduler::ResultValue;

pub const WEATHER_TABLE: &str = "weather";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QueryId(u8);

impl QueryId {
    pub const ALL: [QueryId; 7] = [
        QueryId(0),
        QueryId(1),
        QueryId(2),
        QueryId(3),
        QueryId(4),
        QueryId(5),
        QueryId(6),
    ];

    pub fn new(n: u8) -> Option<Self> {
        (n <= 6).then_some(QueryId(n))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn title(self) -> &'static str {
        match self.0 {
            0 => "line count",
            1 => "drop-offs at Goldman Sachs by hour",
            2 => "drop-offs at Citigroup by hour",
            3 => "Goldman Sachs drop-offs tipping over $10 by hour",
            4 => "monthly share of credit card payments",
            5 => "monthly rides by taxi type",
            _ => "rides by daily precipitation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown query {0:?} (expected q0..q6)")]
pub struct UnknownQuery(pub String);

impl FromStr for QueryId {
    type Err = UnknownQuery;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s.strip_prefix(['q', 'Q']).unwrap_or(s);
        digits
            .parse::<u8>()
            .ok()
            .and_then(QueryId::new)
            .ok_or_else(|| UnknownQuery(s.to_string()))
    }
}

impl TryFrom<String> for QueryId {
    type Error = UnknownQuery;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<QueryId> for String {
    fn from(q: QueryId) -> String {
        q.to_string()
    }
}

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

fn fields(d: &Datum) -> Result<&[Datum], FnError> {
    let f = d
        .as_list()
        .ok_or_else(|| FnError(format!("expected a parsed row, got {d}")))?;
    if f.len() < 10 {
        return Err(FnError(format!("row has {} fields, expected 10", f.len())));
    }
    Ok(f)
}

fn text(f: &[Datum], i: usize) -> Result<&str, FnError> {
    f[i].as_str()
        .ok_or_else(|| FnError(format!("field {i} is not text")))
}

fn number(f: &[Datum], i: usize) -> Result<f64, FnError> {
    let s = text(f, i)?;
    s.trim()
        .parse()
        .map_err(|_| FnError(format!("field {i} is not a number: {s:?}")))
}

fn dropoff_in(d: &Datum, b: &BBox) -> Result<bool, FnError> {
    let f = fields(d)?;
    Ok(b.contains(number(f, 4)?, number(f, 5)?))
}

/// `YYYY-MM-DDTHH:MM:SS` -> hour.
fn hour(ts: &str) -> Result<i64, FnError> {
    ts.get(11..13)
        .and_then(|h| h.parse().ok())
        .ok_or_else(|| FnError(format!("bad timestamp {ts:?}")))
}

fn month(ts: &str) -> Result<&str, FnError> {
    ts.get(..7)
        .ok_or_else(|| FnError(format!("bad timestamp {ts:?}")))
}

fn date(ts: &str) -> Result<&str, FnError> {
    ts.get(..10)
        .ok_or_else(|| FnError(format!("bad timestamp {ts:?}")))
}

/// Bucket label for a precipitation amount in inches.
pub fn precipitation_bucket(inches: f64) -> &'static str {
    if inches <= 0.0 {
        "0"
    } else if inches <= 0.1 {
        "(0,0.1]"
    } else if inches <= 0.5 {
        "(0.1,0.5]"
    } else {
        ">0.5"
    }
}

/// Registers the query functions (ids prefixed `taxi.`) alongside the builtins.
pub fn register(r: &mut FunctionRegistry) {
    r.register_filter("taxi.dropoff_at_goldman", |d, _| dropoff_in(d, &GOLDMAN));
    r.register_filter("taxi.dropoff_at_citigroup", |d, _| {
        dropoff_in(d, &CITIGROUP)
    });
    r.register_filter("taxi.tip_over_10", |d, _| Ok(number(fields(d)?, 8)? > 10.0));
    r.register_map("taxi.dropoff_hour_one", |d, _| {
        let f = fields(&d)?;
        Ok(Datum::pair(Datum::Int(hour(text(f, 1)?)?), Datum::Int(1)))
    });
    r.register_map("taxi.month_credit_total", |d, _| {
        let f = fields(&d)?;
        let credit = (text(f, 7)?.trim() == "1") as i64;
        Ok(Datum::pair(
            Datum::str(month(text(f, 0)?)?),
            Datum::List(vec![Datum::Int(credit), Datum::Int(1)]),
        ))
    });
    r.register_map("taxi.credit_fraction", |d, _| {
        let (k, v) = d
            .into_pair()
            .ok_or_else(|| FnError::new("credit_fraction expects (month, [credit, total])"))?;
        match v.as_list() {
            Some([Datum::Int(c), Datum::Int(n)]) if *n > 0 => {
                Ok(Datum::pair(k, Datum::Float(*c as f64 / *n as f64)))
            }
            _ => Err(FnError(format!("bad credit tally {v}"))),
        }
    });
    r.register_map("taxi.month_type_one", |d, _| {
        let f = fields(&d)?;
        Ok(Datum::pair(
            Datum::List(vec![
                Datum::str(month(text(f, 0)?)?),
                Datum::str(text(f, 9)?),
            ]),
            Datum::Int(1),
        ))
    });
    r.register_map("taxi.precipitation_one", |d, side: &SideInputs| {
        let f = fields(&d)?;
        let day = date(text(f, 0)?)?;
        let inches: f64 = side
            .lookup(WEATHER_TABLE, day)?
            .ok_or_else(|| FnError(format!("no weather for {day}")))?
            .parse()
            .map_err(|_| FnError(format!("bad precipitation for {day}")))?;
        Ok(Datum::pair(
            Datum::str(precipitation_bucket(inches)),
            Datum::Int(1),
        ))
    });
}

/// Registry with the builtins and the query functions.
pub fn registry() -> FunctionRegistry {
    let mut r = FunctionRegistry::with_builtins();
    register(&mut r);
    r
}

/// The lineage for `q` over the dataset at `loc`; `partitions` is the
/// reduce fan-out (30 in the reference queries).
pub fn lineage(q: QueryId, loc: &DataLocation, partitions: u32) -> Lineage {
    let src = || Lineage::source(loc.bucket.clone(), loc.trips_prefix());
    let rows = || src().map("split_csv");
    match q.0 {
        0 => src().count(),
        1 => rows()
            .filter("taxi.dropoff_at_goldman")
            .map("taxi.dropoff_hour_one")
            .reduce_by_key("add", partitions)
            .collect(),
        2 => rows()
            .filter("taxi.dropoff_at_citigroup")
            .map("taxi.dropoff_hour_one")
            .reduce_by_key("add", partitions)
            .collect(),
        3 => rows()
            .filter("taxi.dropoff_at_goldman")
            .filter("taxi.tip_over_10")
            .map("taxi.dropoff_hour_one")
            .reduce_by_key("add", partitions)
            .collect(),
        4 => rows()
            .map("taxi.month_credit_total")
            .reduce_by_key("add", partitions)
            .map("taxi.credit_fraction")
            .collect(),
        5 => rows()
            .map("taxi.month_type_one")
            .reduce_by_key("add", partitions)
            .collect(),
        _ => rows()
            .side_input(WEATHER_TABLE, loc.weather())
            .map("taxi.precipitation_one")
            .reduce_by_key("add", partitions)
            .collect(),
    }
}

/// A query result in comparable form: a count, or values keyed by the
/// display form of their key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Count(i64),
    Keyed(BTreeMap<String, serde_json::Value>),
}

pub fn datum_json(d: &Datum) -> serde_json::Value {
    use serde_json::Value;
    match d {
        Datum::Int(v) => Value::from(*v),
        Datum::Float(v) => Value::from(*v),
        Datum::Str(s) => Value::from(s.as_str()),
        Datum::List(xs) => Value::Array(xs.iter().map(datum_json).collect()),
        Datum::Pair(k, v) => Value::Array(vec![datum_json(k), datum_json(v)]),
    }
}

impl Answer {
    pub fn from_result(value: &ResultValue) -> Result<Answer, String> {
        match value {
            ResultValue::Count { count } => Ok(Answer::Count(*count)),
            ResultValue::Collected { items } => {
                let mut out = BTreeMap::new();
                for item in items {
                    let Datum::Pair(k, v) = item else {
                        return Err(format!("collected item {item} is not a pair"));
                    };
                    if out.insert(k.to_string(), datum_json(v)).is_some() {
                        return Err(format!("key {k} appears twice"));
                    }
                }
                Ok(Answer::Keyed(out))
            }
            ResultValue::Saved { .. } => {
                Err("saved results are compared by content, not value".into())
            }
        }
    }
}

const REL_TOLERANCE: f64 = 1e-9;

fn values_match(a: &serde_json::Value, b: &serde_json::Value) -> bool {
    use serde_json::Value;
    match (a, b) {
        (Value::Number(x), Value::Number(y)) if x.is_f64() || y.is_f64() => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            x == y || (x - y).abs() <= REL_TOLERANCE * x.abs().max(y.abs())
        }
        (Value::Array(xs), Value::Array(ys)) => {
            xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| values_match(x, y))
        }
        _ => a == b,
    }
}

/// `None` when the answers agree (exactly, or within 1e-9 relative for
/// floats); otherwise a description of the first difference.
pub fn first_difference(got: &Answer, want: &Answer) -> Option<String> {
    match (got, want) {
        (Answer::Count(a), Answer::Count(b)) if a == b => None,
        (Answer::Count(a), Answer::Count(b)) => Some(format!("count {a} != {b}")),
        (Answer::Keyed(a), Answer::Keyed(b)) => {
            let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
            keys.into_iter().find_map(|k| match (a.get(k), b.get(k)) {
                (Some(x), Some(y)) if values_match(x, y) => None,
                (Some(x), Some(y)) => Some(format!("key {k}: {x} != {y}")),
                (Some(x), None) => Some(format!("key {k}: {x} != (missing)")),
                (None, Some(y)) => Some(format!("key {k}: (missing) != {y}")),
                (None, None) => unreachable!(),
            })
        }
        _ => Some("answers have different shapes".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn row(line: &str) -> Datum {
        Datum::List(line.split(',').map(Datum::str).collect())
    }

    const LINE: &str =
        "2015-03-04T05:06:07,2015-03-04T06:10:00,-73.9,40.7,-74.0140,40.7150,1.20,1,12.50,green";

    #[test]
    fn parse_ids() {
        assert_eq!("q3".parse::<QueryId>().unwrap().index(), 3);
        assert_eq!("Q0".parse::<QueryId>().unwrap().index(), 0);
        assert_eq!("6".parse::<QueryId>().unwrap().to_string(), "q6");
        assert!("q7".parse::<QueryId>().is_err());
        assert!("x".parse::<QueryId>().is_err());
    }

    #[test]
    fn query_functions() {
        let r = registry();
        let none = SideInputs::default();
        let d = row(LINE);
        assert!(r.filter("taxi.dropoff_at_goldman").unwrap()(&d, &none).unwrap());
        assert!(!r.filter("taxi.dropoff_at_citigroup").unwrap()(&d, &none).unwrap());
        assert!(r.filter("taxi.tip_over_10").unwrap()(&d, &none).unwrap());
        assert_eq!(
            r.map("taxi.dropoff_hour_one").unwrap()(d.clone(), &none).unwrap(),
            Datum::pair(Datum::Int(6), Datum::Int(1))
        );
        assert_eq!(
            r.map("taxi.month_credit_total").unwrap()(d.clone(), &none).unwrap(),
            Datum::pair(
                Datum::str("2015-03"),
                Datum::List(vec![Datum::Int(1), Datum::Int(1)])
            )
        );
        let frac = r.map("taxi.credit_fraction").unwrap();
        assert_eq!(
            frac(
                Datum::pair(
                    Datum::str("m"),
                    Datum::List(vec![Datum::Int(1), Datum::Int(4)])
                ),
                &none
            )
            .unwrap(),
            Datum::pair(Datum::str("m"), Datum::Float(0.25))
        );
        let mut side = SideInputs::default();
        side.insert_csv(WEATHER_TABLE, "2015-03-04,0.30\n");
        assert_eq!(
            r.map("taxi.precipitation_one").unwrap()(d.clone(), &side).unwrap(),
            Datum::pair(Datum::str("(0.1,0.5]"), Datum::Int(1))
        );
        assert!(r.map("taxi.precipitation_one").unwrap()(d, &none).is_err());
        assert!(r.filter("taxi.tip_over_10").unwrap()(&row("a,b"), &none).is_err());
    }

    #[test]
    fn buckets() {
        assert_eq!(precipitation_bucket(0.0), "0");
        assert_eq!(precipitation_bucket(0.1), "(0,0.1]");
        assert_eq!(precipitation_bucket(0.11), "(0.1,0.5]");
        assert_eq!(precipitation_bucket(0.5), "(0.1,0.5]");
        assert_eq!(precipitation_bucket(2.0), ">0.5");
    }

    #[test]
    fn lineages_validate() {
        let loc = DataLocation::parse("b/p").unwrap();
        let r = registry();
        for q in QueryId::ALL {
            lineage(q, &loc, 30).validate(&r).unwrap();
        }
        assert_eq!(lineage(QueryId(0), &loc, 30).wide_count(), 0);
        assert_eq!(lineage(QueryId(1), &loc, 30).wide_count(), 1);
    }

    #[test]
    fn comparison() {
        let a = Answer::Keyed(BTreeMap::from([
            ("1".into(), json!(3)),
            ("2".into(), json!(0.5)),
        ]));
        let close = Answer::Keyed(BTreeMap::from([
            ("1".into(), json!(3)),
            ("2".into(), json!(0.5 + 1e-12)),
        ]));
        assert_eq!(first_difference(&a, &close), None);
        let off = Answer::Keyed(BTreeMap::from([
            ("1".into(), json!(4)),
            ("2".into(), json!(0.5)),
        ]));
        assert_eq!(first_difference(&a, &off).unwrap(), "key 1: 3 != 4");
        let missing = Answer::Keyed(BTreeMap::from([("1".into(), json!(3))]));
        assert!(first_difference(&a, &missing).unwrap().starts_with("key 2"));
        assert!(first_difference(&Answer::Count(1), &Answer::Count(2)).is_some());
        assert!(first_difference(&Answer::Count(1), &a).is_some());
    }
}
