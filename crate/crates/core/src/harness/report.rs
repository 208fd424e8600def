//! Latency/cost report with flint-vs-oracle verdicts.

use serde::{Deserialize, Serialize};

use super::queries::{Answer, QueryId};
use crate::cost::CostBreakdown;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "MISMATCH")]
    Mismatch,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Ok => "OK",
            Verdict::Mismatch => "MISMATCH",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query: QueryId,
    pub title: String,
    /// Simulated seconds from first invocation start to last invocation end.
    pub latency_s: f64,
    pub cost_usd: f64,
    pub cost: CostBreakdown,
    pub invocations: u64,
    pub queue_calls: u64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_difference: Option<String>,
    pub flint: Answer,
    pub local: Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub v: u32,
    pub dataset: String,
    pub records: u64,
    pub seed: u64,
    pub queries: Vec<QueryReport>,
}

impl BenchReport {
    pub fn all_ok(&self) -> bool {
        self.queries.iter().all(|q| q.verdict == Verdict::Ok)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table, one row per query.
    pub fn render_table(&self) -> String {
        let header = ["Query", "Latency(s)", "Cost(USD)", "Verdict"];
        let rows: Vec<[String; 4]> = self
            .queries
            .iter()
            .map(|q| {
                let verdict = match &q.first_difference {
                    Some(d) => format!("{} ({d})", q.verdict),
                    None => q.verdict.to_string(),
                };
                [
                    q.query.to_string().to_uppercase(),
                    format!("{:.2}", q.latency_s),
                    format!("{:.6}", q.cost_usd),
                    verdict,
                ]
            })
            .collect();
        let mut width = header.map(str::len);
        for r in &rows {
            for (w, cell) in width.iter_mut().zip(r) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: [&str; 4]| {
            format!(
                "{:<w0$}  {:>w1$}  {:>w2$}  {}",
                cells[0],
                cells[1],
                cells[2],
                cells[3],
                w0 = width[0],
                w1 = width[1],
                w2 = width[2],
            )
            .trim_end()
            .to_string()
        };
        let mut out = line(header);
        out.push('\n');
        out.push_str(&"-".repeat(width.iter().sum::<usize>() + 6));
        out.push('\n');
        for r in &rows {
            out.push_str(&line([&r[0], &r[1], &r[2], &r[3]]));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    pub(crate) fn sample() -> BenchReport {
        let q = |n: u8, verdict, diff: Option<&str>| QueryReport {
            query: QueryId::new(n).unwrap(),
            title: QueryId::new(n).unwrap().title().into(),
            latency_s: 1.5 * n as f64,
            cost_usd: 0.000_123,
            cost: CostBreakdown::default(),
            invocations: 9,
            queue_calls: 40,
            verdict,
            first_difference: diff.map(String::from),
            flint: Answer::Count(3),
            local: Answer::Keyed(BTreeMap::from([("7".into(), serde_json::json!(2))])),
        };
        BenchReport {
            v: REPORT_VERSION,
            dataset: "flint-data/taxi".into(),
            records: 100,
            seed: 42,
            queries: vec![
                q(0, Verdict::Ok, None),
                q(1, Verdict::Mismatch, Some("key 7: 3 != 2")),
            ],
        }
    }

    #[test]
    fn table_layout() {
        let t = sample().render_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "Query  Latency(s)  Cost(USD)  Verdict");
        assert!(lines[1].chars().all(|c| c == '-'));
        assert_eq!(lines[2], "Q0           0.00   0.000123  OK");
        assert_eq!(
            lines[3],
            "Q1           1.50   0.000123  MISMATCH (key 7: 3 != 2)"
        );
    }

    #[test]
    fn json_roundtrip() {
        let r = sample();
        let v: serde_json::Value = serde_json::from_str(&r.to_json_pretty()).unwrap();
        assert_eq!(v["queries"][1]["verdict"], "MISMATCH");
        assert_eq!(v["queries"][0]["query"], "q0");
        assert!(v["queries"][0].get("first_difference").is_none());
        assert_eq!(serde_json::from_value::<BenchReport>(v).unwrap(), r);
        assert!(!r.all_ok());
    }
}
