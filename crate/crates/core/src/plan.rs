//! Lineages and their staged physical plans.
//!
//! A plan cuts the lineage at every wide transformation (`ReduceByKey`,
//! `PartitionBy`). Each stage runs a pipeline of narrow per-record operations;
//! every stage but the last ends in a shuffle write, and every stage but the
//! first starts by reading (and for `ReduceByKey`, merging) its partition of
//! the upstream shuffle.

use serde::{Deserialize, Serialize};

use crate::functions::FunctionRegistry;
use crate::store::{ObjectRange, ObjectRef};

/// Default first-stage split size: 32 MiB.
pub const DEFAULT_SPLIT_SIZE: u64 = 32 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("unknown {kind} function {id:?}")]
    UnknownFunction { kind: &'static str, id: String },
    #[error("no objects under {bucket}/{prefix}")]
    EmptySource { bucket: String, prefix: String },
    #[error("invalid lineage: {0}")]
    InvalidLineage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub bucket: String,
    pub prefix: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transformation {
    Map {
        fn_id: String,
    },
    Filter {
        fn_id: String,
    },
    FlatMap {
        fn_id: String,
    },
    ReduceByKey {
        combine_fn_id: String,
        num_partitions: u32,
    },
    PartitionBy {
        partitioner_id: String,
        num_partitions: u32,
    },
}

impl Transformation {
    pub fn is_wide(&self) -> bool {
        matches!(
            self,
            Transformation::ReduceByKey { .. } | Transformation::PartitionBy { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Count,
    Collect,
    SaveAsText { bucket: String, prefix: String },
}

/// A small table broadcast to every task (first CSV column -> second).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideInput {
    pub name: String,
    pub object: ObjectRef,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub source: DatasetRef,
    pub transformations: Vec<Transformation>,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub side_inputs: Vec<SideInput>,
}

/// Builder in the style of an RDD chain.
#[derive(Debug, Clone)]
pub struct LineageBuilder {
    source: DatasetRef,
    transformations: Vec<Transformation>,
    side_inputs: Vec<SideInput>,
}

impl Lineage {
    pub fn source(bucket: impl Into<String>, prefix: impl Into<String>) -> LineageBuilder {
        LineageBuilder {
            source: DatasetRef {
                bucket: bucket.into(),
                prefix: prefix.into(),
            },
            transformations: Vec::new(),
            side_inputs: Vec::new(),
        }
    }

    pub fn wide_count(&self) -> usize {
        self.transformations.iter().filter(|t| t.is_wide()).count()
    }

    pub fn validate(&self, registry: &FunctionRegistry) -> Result<(), PlanError> {
        if self.source.bucket.is_empty() {
            return Err(PlanError::InvalidLineage("source bucket is empty".into()));
        }
        for t in &self.transformations {
            let unknown = |kind, id: &String| PlanError::UnknownFunction {
                kind,
                id: id.clone(),
            };
            match t {
                Transformation::Map { fn_id } if registry.map(fn_id).is_none() => {
                    return Err(unknown("map", fn_id))
                }
                Transformation::Filter { fn_id } if registry.filter(fn_id).is_none() => {
                    return Err(unknown("filter", fn_id))
                }
                Transformation::FlatMap { fn_id } if registry.flat_map(fn_id).is_none() => {
                    return Err(unknown("flat_map", fn_id))
                }
                Transformation::ReduceByKey {
                    combine_fn_id,
                    num_partitions,
                } => {
                    if registry.combiner(combine_fn_id).is_none() {
                        return Err(unknown("combine", combine_fn_id));
                    }
                    if *num_partitions == 0 {
                        return Err(PlanError::InvalidLineage(
                            "reduce_by_key needs num_partitions >= 1".into(),
                        ));
                    }
                }
                Transformation::PartitionBy {
                    partitioner_id,
                    num_partitions,
                } => {
                    if registry.partitioner(partitioner_id).is_none() {
                        return Err(unknown("partitioner", partitioner_id));
                    }
                    if *num_partitions == 0 {
                        return Err(PlanError::InvalidLineage(
                            "partition_by needs num_partitions >= 1".into(),
                        ));
                    }
                }
                _ => {}
            }
        }
        if let Action::SaveAsText { bucket, prefix } = &self.action {
            if bucket.is_empty() || prefix.is_empty() {
                return Err(PlanError::InvalidLineage(
                    "save_as_text needs a non-empty bucket and prefix".into(),
                ));
            }
        }
        let mut names: Vec<_> = self.side_inputs.iter().map(|s| &s.name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.side_inputs.len() {
            return Err(PlanError::InvalidLineage(
                "duplicate side input name".into(),
            ));
        }
        Ok(())
    }
}

impl LineageBuilder {
    fn push(mut self, t: Transformation) -> Self {
        self.transformations.push(t);
        self
    }

    pub fn map(self, fn_id: &str) -> Self {
        self.push(Transformation::Map {
            fn_id: fn_id.into(),
        })
    }

    pub fn filter(self, fn_id: &str) -> Self {
        self.push(Transformation::Filter {
            fn_id: fn_id.into(),
        })
    }

    pub fn flat_map(self, fn_id: &str) -> Self {
        self.push(Transformation::FlatMap {
            fn_id: fn_id.into(),
        })
    }

    pub fn reduce_by_key(self, combine_fn_id: &str, num_partitions: u32) -> Self {
        self.push(Transformation::ReduceByKey {
            combine_fn_id: combine_fn_id.into(),
            num_partitions,
        })
    }

    pub fn partition_by(self, partitioner_id: &str, num_partitions: u32) -> Self {
        self.push(Transformation::PartitionBy {
            partitioner_id: partitioner_id.into(),
            num_partitions,
        })
    }

    pub fn side_input(mut self, name: &str, object: ObjectRef) -> Self {
        self.side_inputs.push(SideInput {
            name: name.into(),
            object,
        });
        self
    }

    pub fn action(self, action: Action) -> Lineage {
        Lineage {
            source: self.source,
            transformations: self.transformations,
            action,
            side_inputs: self.side_inputs,
        }
    }

    pub fn count(self) -> Lineage {
        self.action(Action::Count)
    }

    pub fn collect(self) -> Lineage {
        self.action(Action::Collect)
    }

    pub fn save_as_text(self, bucket: &str, prefix: &str) -> Lineage {
        self.action(Action::SaveAsText {
            bucket: bucket.into(),
            prefix: prefix.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NarrowOp {
    Map { fn_id: String },
    Filter { fn_id: String },
    FlatMap { fn_id: String },
}

impl NarrowOp {
    fn from_transformation(t: &Transformation) -> Option<NarrowOp> {
        match t {
            Transformation::Map { fn_id } => Some(NarrowOp::Map {
                fn_id: fn_id.clone(),
            }),
            Transformation::Filter { fn_id } => Some(NarrowOp::Filter {
                fn_id: fn_id.clone(),
            }),
            Transformation::FlatMap { fn_id } => Some(NarrowOp::FlatMap {
                fn_id: fn_id.clone(),
            }),
            _ => None,
        }
    }

    pub fn to_transformation(&self) -> Transformation {
        match self {
            NarrowOp::Map { fn_id } => Transformation::Map {
                fn_id: fn_id.clone(),
            },
            NarrowOp::Filter { fn_id } => Transformation::Filter {
                fn_id: fn_id.clone(),
            },
            NarrowOp::FlatMap { fn_id } => Transformation::FlatMap {
                fn_id: fn_id.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageInput {
    ObjectSplits {
        splits: Vec<ObjectRange>,
    },
    /// Reads the shuffle written by `upstream_stage`; with a merge function
    /// the values for each key are folded before the pipeline runs.
    QueuePartitions {
        upstream_stage: u32,
        merge_fn_id: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageOutput {
    ShuffleWrite {
        num_partitions: u32,
        partitioner_id: String,
    },
    Result {
        action: Action,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub stage_id: u32,
    pub input: StageInput,
    pub pipeline: Vec<NarrowOp>,
    pub output: StageOutput,
    pub num_tasks: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalPlan {
    pub plan_id: String,
    pub stages: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub side_inputs: Vec<SideInput>,
}

impl PhysicalPlan {
    pub fn queue_name(&self, stage_id: u32, partition: u32) -> String {
        queue_name(&self.plan_id, stage_id, partition)
    }

    pub fn result_stage(&self) -> &Stage {
        self.stages
            .last()
            .expect("plans always have a result stage")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Re-expands the stages into the transformation list they were cut from.
    pub fn transformations(&self) -> Vec<Transformation> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            out.extend(stage.pipeline.iter().map(NarrowOp::to_transformation));
            if let StageOutput::ShuffleWrite {
                num_partitions,
                partitioner_id,
            } = &stage.output
            {
                let merge = match self.stages.get(i + 1).map(|s| &s.input) {
                    Some(StageInput::QueuePartitions { merge_fn_id, .. }) => merge_fn_id.clone(),
                    _ => None,
                };
                out.push(match merge {
                    Some(combine_fn_id) => Transformation::ReduceByKey {
                        combine_fn_id,
                        num_partitions: *num_partitions,
                    },
                    None => Transformation::PartitionBy {
                        partitioner_id: partitioner_id.clone(),
                        num_partitions: *num_partitions,
                    },
                });
            }
        }
        out
    }
}

pub fn queue_name(plan_id: &str, stage_id: u32, partition: u32) -> String {
    format!("flint-{plan_id}-s{stage_id}-p{partition}")
}

pub fn new_plan_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()[..12].to_string()
}

/// Tiles each object into contiguous ranges of at most `split_size` bytes.
/// Empty objects yield no ranges.
pub fn split_input(objects: &[(ObjectRef, u64)], split_size: u64) -> Vec<ObjectRange> {
    assert!(split_size >= 1, "split_size must be >= 1");
    let mut out = Vec::new();
    for (object, size) in objects {
        let mut offset = 0;
        while offset < *size {
            let length = split_size.min(size - offset);
            out.push(ObjectRange::new(object.clone(), offset, length));
            offset += length;
        }
    }
    out
}

/// Builds a plan for `lineage` over the objects in `catalog` (the keys and
/// sizes listed under the source prefix).
pub fn build_plan(
    lineage: &Lineage,
    split_size: u64,
    catalog: &[(String, u64)],
    registry: &FunctionRegistry,
) -> Result<PhysicalPlan, PlanError> {
    build_plan_with_id(new_plan_id(), lineage, split_size, catalog, registry)
}

pub fn build_plan_with_id(
    plan_id: String,
    lineage: &Lineage,
    split_size: u64,
    catalog: &[(String, u64)],
    registry: &FunctionRegistry,
) -> Result<PhysicalPlan, PlanError> {
    lineage.validate(registry)?;
    if split_size == 0 {
        return Err(PlanError::InvalidLineage("split size must be >= 1".into()));
    }
    if catalog.is_empty() {
        return Err(PlanError::EmptySource {
            bucket: lineage.source.bucket.clone(),
            prefix: lineage.source.prefix.clone(),
        });
    }
    let objects = catalog
        .iter()
        .map(|(key, size)| {
            ObjectRef::new(lineage.source.bucket.clone(), key.clone())
                .map(|r| (r, *size))
                .map_err(|e| PlanError::InvalidLineage(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let splits = split_input(&objects, split_size);

    let mut stages = Vec::new();
    let mut pipeline = Vec::new();
    let mut input = StageInput::ObjectSplits {
        splits: splits.clone(),
    };
    let mut num_tasks = splits.len() as u32;
    for t in &lineage.transformations {
        if let Some(op) = NarrowOp::from_transformation(t) {
            pipeline.push(op);
            continue;
        }
        let (num_partitions, partitioner_id, merge_fn_id) = match t {
            Transformation::ReduceByKey {
                combine_fn_id,
                num_partitions,
            } => (
                *num_partitions,
                "hash".to_string(),
                Some(combine_fn_id.clone()),
            ),
            Transformation::PartitionBy {
                partitioner_id,
                num_partitions,
            } => (*num_partitions, partitioner_id.clone(), None),
            _ => unreachable!("narrow ops handled above"),
        };
        let stage_id = stages.len() as u32;
        stages.push(Stage {
            stage_id,
            input: std::mem::replace(
                &mut input,
                StageInput::QueuePartitions {
                    upstream_stage: stage_id,
                    merge_fn_id,
                },
            ),
            pipeline: std::mem::take(&mut pipeline),
            output: StageOutput::ShuffleWrite {
                num_partitions,
                partitioner_id,
            },
            num_tasks,
        });
        num_tasks = num_partitions;
    }
    stages.push(Stage {
        stage_id: stages.len() as u32,
        input,
        pipeline,
        output: StageOutput::Result {
            action: lineage.action.clone(),
        },
        num_tasks,
    });
    Ok(PhysicalPlan {
        plan_id,
        stages,
        side_inputs: lineage.side_inputs.clone(),
    })
}
