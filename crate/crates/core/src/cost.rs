//! Billing model: GB-seconds of function time, per-invocation request fees
//! and per-call queue fees.

use serde::{Deserialize, Serialize};

use crate::faas::InvocationRecord;

/// Unit prices in USD.
///
/// The defaults are public AWS list prices (Lambda x86 GB-second and request
/// fees, SQS standard queue requests) and are only meant for rough reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceSheet {
    pub rate_per_gb_second: f64,
    pub rate_per_invocation: f64,
    pub rate_per_queue_call: f64,
    /// Function time is billed in whole increments of this many ms.
    pub billing_increment_ms: u64,
}

impl Default for PriceSheet {
    fn default() -> Self {
        PriceSheet {
            rate_per_gb_second: 0.000_016_666_7,
            rate_per_invocation: 0.000_000_2,
            rate_per_queue_call: 0.000_000_4,
            billing_increment_ms: 100,
        }
    }
}

impl PriceSheet {
    pub fn scaled(&self, k: f64) -> PriceSheet {
        PriceSheet {
            rate_per_gb_second: self.rate_per_gb_second * k,
            rate_per_invocation: self.rate_per_invocation * k,
            rate_per_queue_call: self.rate_per_queue_call * k,
            billing_increment_ms: self.billing_increment_ms,
        }
    }
}

/// Rounds a raw duration up to whole billing increments; any invocation is
/// billed at least one increment.
pub fn billed_duration_ms(raw_ms: f64, increment_ms: u64) -> u64 {
    let inc = increment_ms.max(1);
    let units = (raw_ms / inc as f64).ceil();
    let units = if units.is_finite() && units >= 1.0 {
        units as u64
    } else {
        1
    };
    units * inc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationUsage {
    pub duration_ms: f64,
    pub memory_mb: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub invocations: Vec<InvocationUsage>,
    pub total_invocations: u64,
    pub total_queue_calls: u64,
    #[serde(default)]
    pub wall_clock_ms: f64,
}

impl RunMetrics {
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a InvocationRecord>,
        total_queue_calls: u64,
        wall_clock_ms: f64,
    ) -> Self {
        let invocations: Vec<_> = records
            .into_iter()
            .map(|r| InvocationUsage {
                duration_ms: r.duration_ms,
                memory_mb: r.memory_mb,
            })
            .collect();
        RunMetrics {
            total_invocations: invocations.len() as u64,
            invocations,
            total_queue_calls,
            wall_clock_ms,
        }
    }

    pub fn billed_ms_total(&self, increment_ms: u64) -> u64 {
        self.invocations
            .iter()
            .map(|i| billed_duration_ms(i.duration_ms, increment_ms))
            .sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub gb_seconds: f64,
    pub compute: f64,
    pub requests: f64,
    pub queue: f64,
    pub total: f64,
}

pub fn cost_of_run(metrics: &RunMetrics, prices: &PriceSheet) -> CostBreakdown {
    let gb_seconds: f64 = metrics
        .invocations
        .iter()
        .map(|i| {
            let billed = billed_duration_ms(i.duration_ms, prices.billing_increment_ms);
            (i.memory_mb as f64 / 1024.0) * (billed as f64 / 1000.0)
        })
        .sum();
    let compute = gb_seconds * prices.rate_per_gb_second;
    let requests = metrics.total_invocations as f64 * prices.rate_per_invocation;
    let queue = metrics.total_queue_calls as f64 * prices.rate_per_queue_call;
    CostBreakdown {
        gb_seconds,
        compute,
        requests,
        queue,
        total: compute + requests + queue,
    }
}
