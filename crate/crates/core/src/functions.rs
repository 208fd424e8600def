//! Registry of user functions referenced by id from lineages and task
//! descriptors. Descriptors ship function ids, never code.

use std::collections::HashMap;
use std::sync::Arc;

use crate::executor::shuffle::hash_partition;
use crate::record::Datum;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct FnError(pub String);

impl FnError {
    pub fn new(msg: impl Into<String>) -> Self {
        FnError(msg.into())
    }
}

/// Small broadcast tables available to every record function of a task.
/// Each table maps the first CSV column to the second.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SideInputs {
    tables: HashMap<String, HashMap<String, String>>,
}

impl SideInputs {
    pub fn insert_csv(&mut self, name: impl Into<String>, csv: &str) {
        let table = csv
            .lines()
            .filter_map(|line| {
                let (k, v) = line.split_once(',')?;
                Some((k.trim().to_string(), v.trim().to_string()))
            })
            .collect();
        self.tables.insert(name.into(), table);
    }

    pub fn table(&self, name: &str) -> Option<&HashMap<String, String>> {
        self.tables.get(name)
    }

    pub fn lookup(&self, table: &str, key: &str) -> Result<Option<&str>, FnError> {
        self.tables
            .get(table)
            .map(|t| t.get(key).map(String::as_str))
            .ok_or_else(|| FnError(format!("side input {table:?} not loaded")))
    }

    /// Approximate in-memory size, for buffer accounting.
    pub fn tracked_bytes(&self) -> u64 {
        self.tables
            .values()
            .flat_map(|t| t.iter())
            .map(|(k, v)| (k.len() + v.len() + 48) as u64)
            .sum()
    }
}

pub type MapFn = Arc<dyn Fn(Datum, &SideInputs) -> Result<Datum, FnError> + Send + Sync>;
pub type FilterFn = Arc<dyn Fn(&Datum, &SideInputs) -> Result<bool, FnError> + Send + Sync>;
pub type FlatMapFn = Arc<dyn Fn(Datum, &SideInputs) -> Result<Vec<Datum>, FnError> + Send + Sync>;
/// Must be associative and commutative.
pub type CombineFn = Arc<dyn Fn(Datum, Datum) -> Result<Datum, FnError> + Send + Sync>;
/// Maps encoded key bytes to a partition in `0..num_partitions`.
pub type PartitionFn = Arc<dyn Fn(&[u8], u32) -> u32 + Send + Sync>;

#[derive(Clone, Default)]
pub struct FunctionRegistry {
    maps: HashMap<String, MapFn>,
    filters: HashMap<String, FilterFn>,
    flat_maps: HashMap<String, FlatMapFn>,
    combiners: HashMap<String, CombineFn>,
    partitioners: HashMap<String, PartitionFn>,
}

impl std::fmt::Debug for FunctionRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let keys = |m: Vec<&String>| {
            let mut v: Vec<_> = m.into_iter().cloned().collect();
            v.sort();
            v
        };
        f.debug_struct("FunctionRegistry")
            .field("maps", &keys(self.maps.keys().collect()))
            .field("filters", &keys(self.filters.keys().collect()))
            .field("flat_maps", &keys(self.flat_maps.keys().collect()))
            .field("combiners", &keys(self.combiners.keys().collect()))
            .field("partitioners", &keys(self.partitioners.keys().collect()))
            .finish()
    }
}

impl FunctionRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry preloaded with generic helpers: `identity`, `split_csv`,
    /// `key_with_one`, `split_words`, `non_empty`, `add`, `min`, `max` and the
    /// `hash` partitioner.
    pub fn with_builtins() -> Self {
        let mut r = Self::default();
        r.register_map("identity", |d, _| Ok(d));
        r.register_map("split_csv", |d, _| match d {
            Datum::Str(s) => Ok(Datum::List(s.split(',').map(Datum::str).collect())),
            other => Err(FnError(format!("split_csv expects a string, got {other}"))),
        });
        r.register_map("key_with_one", |d, _| Ok(Datum::pair(d, Datum::Int(1))));
        r.register_flat_map("split_words", |d, _| match d {
            Datum::Str(s) => Ok(s.split_whitespace().map(Datum::str).collect()),
            other => Err(FnError(format!(
                "split_words expects a string, got {other}"
            ))),
        });
        r.register_filter("non_empty", |d, _| {
            Ok(!matches!(d, Datum::Str(s) if s.is_empty()))
        });
        r.register_combiner("add", add);
        r.register_combiner("min", |a, b| pick(a, b, std::cmp::Ordering::Less));
        r.register_combiner("max", |a, b| pick(a, b, std::cmp::Ordering::Greater));
        r.register_partitioner("hash", hash_partition);
        r
    }

    pub fn register_map(
        &mut self,
        id: impl Into<String>,
        f: impl Fn(Datum, &SideInputs) -> Result<Datum, FnError> + Send + Sync + 'static,
    ) {
        self.maps.insert(id.into(), Arc::new(f));
    }

    pub fn register_filter(
        &mut self,
        id: impl Into<String>,
        f: impl Fn(&Datum, &SideInputs) -> Result<bool, FnError> + Send + Sync + 'static,
    ) {
        self.filters.insert(id.into(), Arc::new(f));
    }

    pub fn register_flat_map(
        &mut self,
        id: impl Into<String>,
        f: impl Fn(Datum, &SideInputs) -> Result<Vec<Datum>, FnError> + Send + Sync + 'static,
    ) {
        self.flat_maps.insert(id.into(), Arc::new(f));
    }

    pub fn register_combiner(
        &mut self,
        id: impl Into<String>,
        f: impl Fn(Datum, Datum) -> Result<Datum, FnError> + Send + Sync + 'static,
    ) {
        self.combiners.insert(id.into(), Arc::new(f));
    }

    pub fn register_partitioner(
        &mut self,
        id: impl Into<String>,
        f: impl Fn(&[u8], u32) -> u32 + Send + Sync + 'static,
    ) {
        self.partitioners.insert(id.into(), Arc::new(f));
    }

    pub fn map(&self, id: &str) -> Option<&MapFn> {
        self.maps.get(id)
    }

    pub fn filter(&self, id: &str) -> Option<&FilterFn> {
        self.filters.get(id)
    }

    pub fn flat_map(&self, id: &str) -> Option<&FlatMapFn> {
        self.flat_maps.get(id)
    }

    pub fn combiner(&self, id: &str) -> Option<&CombineFn> {
        self.combiners.get(id)
    }

    pub fn partitioner(&self, id: &str) -> Option<&PartitionFn> {
        self.partitioners.get(id)
    }
}

/// Sums numbers; lists are summed element-wise.
pub fn add(a: Datum, b: Datum) -> Result<Datum, FnError> {
    match (a, b) {
        (Datum::Int(x), Datum::Int(y)) => x
            .checked_add(y)
            .map(Datum::Int)
            .ok_or_else(|| FnError::new("integer overflow in add")),
        (Datum::Float(x), Datum::Float(y)) => Ok(Datum::Float(x + y)),
        (Datum::Int(x), Datum::Float(y)) | (Datum::Float(y), Datum::Int(x)) => {
            Ok(Datum::Float(x as f64 + y))
        }
        (Datum::List(xs), Datum::List(ys)) if xs.len() == ys.len() => xs
            .into_iter()
            .zip(ys)
            .map(|(x, y)| add(x, y))
            .collect::<Result<Vec<_>, _>>()
            .map(Datum::List),
        (a, b) => Err(FnError(format!("cannot add {a} and {b}"))),
    }
}

fn pick(a: Datum, b: Datum, want: std::cmp::Ordering) -> Result<Datum, FnError> {
    let ord = match (&a, &b) {
        (Datum::Int(x), Datum::Int(y)) => x.cmp(y),
        (Datum::Float(x), Datum::Float(y)) => x
            .partial_cmp(y)
            .ok_or_else(|| FnError::new("NaN in min/max"))?,
        (Datum::Str(x), Datum::Str(y)) => x.cmp(y),
        _ => return Err(FnError(format!("cannot compare {a} and {b}"))),
    };
    Ok(if ord == want || ord == std::cmp::Ordering::Equal {
        a
    } else {
        b
    })
}
