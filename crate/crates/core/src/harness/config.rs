//! Run configuration: one JSON document with `limits`, `queue`, `prices`
//! and `harness` sections. Documents are merged field by field over the
//! desk-scale defaults below, so `{"limits": {"max_concurrency": 4}}` keeps
//! the shortened time scale.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::PriceSheet;
use crate::faas::{FaultInjection, RuntimeLimits};
use crate::plan::DEFAULT_SPLIT_SIZE;
use crate::queue::QueueConfig;
use crate::scheduler::SchedulerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlintConfig {
    pub limits: RuntimeLimits,
    pub queue: QueueConfig,
    pub prices: PriceSheet,
    pub harness: HarnessConfig,
}

impl Default for FlintConfig {
    fn default() -> Self {
        FlintConfig {
            limits: RuntimeLimits {
                max_concurrency: 8,
                // 300 s of simulated time passes in 2 s
                time_scale: 2.0 / 300.0,
                ..RuntimeLimits::default()
            },
            queue: QueueConfig::default(),
            prices: PriceSheet::default(),
            harness: HarnessConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    /// Dataset location, `bucket/prefix`.
    pub data: String,
    pub records: u64,
    pub seed: u64,
    pub parts: u32,
    /// Reduce fan-out of the keyed queries.
    pub partitions: u32,
    pub split_size_bytes: u64,
    pub scheduler: SchedulerConfig,
    pub faults: FaultInjection,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            data: "flint-data/taxi".into(),
            records: 100_000,
            seed: 42,
            parts: 8,
            partitions: 30,
            split_size_bytes: DEFAULT_SPLIT_SIZE,
            scheduler: SchedulerConfig::default(),
            faults: FaultInjection::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl FlintConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let user: serde_json::Value = serde_json::from_str(text)?;
        let mut merged = serde_json::to_value(FlintConfig::default())?;
        merge(&mut merged, user);
        let cfg: FlintConfig = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.limits.validate().map_err(|e| invalid(&e))?;
        self.queue.validate().map_err(|e| invalid(&e))?;
        let p = &self.prices;
        if [
            p.rate_per_gb_second,
            p.rate_per_invocation,
            p.rate_per_queue_call,
        ]
        .iter()
        .any(|r| !(r.is_finite() && *r >= 0.0))
        {
            return Err(ConfigError::Invalid(
                "prices must be finite and >= 0".into(),
            ));
        }
        let h = &self.harness;
        if h.parts == 0 || h.partitions == 0 || h.split_size_bytes == 0 {
            return Err(ConfigError::Invalid(
                "parts, partitions and split_size_bytes must be >= 1".into(),
            ));
        }
        let m = h.scheduler.safety_margin_fraction;
        if !(0.0..1.0).contains(&m) {
            return Err(ConfigError::Invalid(format!(
                "safety_margin_fraction {m} outside [0, 1)"
            )));
        }
        if !(0.0..=1.0).contains(&h.faults.crash_probability) {
            return Err(ConfigError::Invalid(
                "crash_probability outside [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    use serde_json::Value;
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = FlintConfig::from_json("{}").unwrap();
        assert_eq!(cfg, FlintConfig::default());
        assert_eq!(cfg.limits.max_concurrency, 8);
        assert_eq!(cfg.harness.records, 100_000);
    }

    #[test]
    fn partial_sections() {
        let cfg = FlintConfig::from_json(
            r#"{"queue": {"duplicate_probability": 0.3, "rng_seed": 5},
                "harness": {"records": 10, "scheduler": {"flush_threshold_bytes": 4096}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.queue.duplicate_probability, 0.3);
        assert_eq!(cfg.queue.max_batch_entries, 10);
        assert_eq!(cfg.harness.records, 10);
        assert_eq!(cfg.harness.scheduler.flush_threshold_bytes, 4096);
        assert_eq!(cfg.harness.scheduler.retry_budget, 2);
    }

    #[test]
    fn partial_limits_keep_desk_scale() {
        let cfg = FlintConfig::from_json(r#"{"limits": {"max_concurrency": 4}}"#).unwrap();
        assert_eq!(cfg.limits.max_concurrency, 4);
        assert_eq!(
            cfg.limits.time_scale,
            FlintConfig::default().limits.time_scale
        );
        let cfg = FlintConfig::from_json(
            r#"{"limits": {"clock": {"mode": "virtual", "ms_per_record": 2}}}"#,
        )
        .unwrap();
        assert_eq!(
            cfg.limits.clock,
            crate::faas::ClockMode::Virtual { ms_per_record: 2.0 }
        );
    }

    #[test]
    fn rejects_bad_values() {
        assert!(FlintConfig::from_json(r#"{"queue": {"duplicate_probability": 2}}"#).is_err());
        assert!(FlintConfig::from_json(r#"{"harness": {"partitions": 0}}"#).is_err());
        assert!(FlintConfig::from_json(r#"{"prices": {"rate_per_invocation": -1}}"#).is_err());
        assert!(FlintConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(FlintConfig::from_json("not json").is_err());
    }
}
