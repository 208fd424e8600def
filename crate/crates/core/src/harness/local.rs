//! Single-process reference executor.
//!
//! Runs a lineage directly: whole objects are read and split with
//! `str::lines`, transformations apply to an in-memory list, and
//! reduce-by-key folds into a sorted map. Shares no reader, shuffle or
//! scheduling code with the engine, which is what makes it a useful oracle.

use std::collections::BTreeMap;

use crate::functions::{FnError, FunctionRegistry, SideInputs};
use crate::plan::{Action, Lineage, PlanError, Transformation};
use crate::record::Datum;
use crate::scheduler::ResultValue;
use crate::store::{ObjectRef, ObjectStore, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum LocalError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Function(#[from] FnError),
}

pub fn run_local(
    lineage: &Lineage,
    store: &ObjectStore,
    registry: &FunctionRegistry,
) -> Result<ResultValue, LocalError> {
    lineage.validate(registry)?;
    let mut side = SideInputs::default();
    for s in &lineage.side_inputs {
        let body = store.get_object(&s.object)?;
        side.insert_csv(s.name.clone(), &String::from_utf8_lossy(&body));
    }
    let mut data: Vec<Datum> = Vec::new();
    for (key, _) in store.list_prefix(&lineage.source.bucket, &lineage.source.prefix)? {
        let body = store.get_object(&ObjectRef::new(lineage.source.bucket.clone(), key)?)?;
        let text = String::from_utf8_lossy(&body);
        data.extend(text.lines().map(Datum::str));
    }

    for t in &lineage.transformations {
        data = match t {
            Transformation::Map { fn_id } => {
                let f = registry.map(fn_id).expect("validated");
                data.into_iter()
                    .map(|d| f(d, &side))
                    .collect::<Result<_, _>>()?
            }
            Transformation::Filter { fn_id } => {
                let f = registry.filter(fn_id).expect("validated");
                let mut kept = Vec::new();
                for d in data {
                    if f(&d, &side)? {
                        kept.push(d);
                    }
                }
                kept
            }
            Transformation::FlatMap { fn_id } => {
                let f = registry.flat_map(fn_id).expect("validated");
                let mut out = Vec::new();
                for d in data {
                    out.extend(f(d, &side)?);
                }
                out
            }
            Transformation::ReduceByKey { combine_fn_id, .. } => {
                let f = registry.combiner(combine_fn_id).expect("validated");
                let mut groups: BTreeMap<Vec<u8>, (Datum, Datum)> = BTreeMap::new();
                for d in data {
                    let (k, v) = d.into_pair().ok_or_else(|| {
                        FnError::new("reduce_by_key input must be (key, value) pairs")
                    })?;
                    match groups.remove(&k.encode()) {
                        Some((k0, acc)) => {
                            groups.insert(k0.encode(), (k0, f(acc, v)?));
                        }
                        None => {
                            groups.insert(k.encode(), (k, v));
                        }
                    }
                }
                groups
                    .into_values()
                    .map(|(k, v)| Datum::pair(k, v))
                    .collect()
            }
            // repartitioning moves records around without changing them
            Transformation::PartitionBy { .. } => data,
        };
    }

    Ok(match &lineage.action {
        Action::Count => ResultValue::Count {
            count: data.len() as i64,
        },
        Action::Collect => ResultValue::Collected { items: data },
        Action::SaveAsText { bucket, prefix } => {
            let body: String = data.iter().map(|d| format!("{d}\n")).collect();
            let key = crate::executor::save_key(prefix, 0);
            store.put_object(
                &ObjectRef::new(bucket.clone(), key.clone())?,
                body.as_bytes(),
            )?;
            ResultValue::Saved {
                bucket: bucket.clone(),
                keys: vec![key],
            }
        }
    })
}
