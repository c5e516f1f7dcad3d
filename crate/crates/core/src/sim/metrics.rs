use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

pub const CSV_HEADER_COMMENT: &str = "#claa-sim,v1";
pub const GLOBAL: &str = "global";

/// Counters and derived measures of one run, keyed by scope (`global` or
/// `node:<id>`) and metric name.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scopes: BTreeMap<String, BTreeMap<String, f64>>,
}

impl MetricsReport {
    pub fn node_scope(id: impl std::fmt::Display) -> String {
        format!("node:{id}")
    }

    pub fn set(&mut self, scope: &str, metric: &str, v: f64) {
        self.scopes
            .entry(scope.to_string())
            .or_default()
            .insert(metric.to_string(), v);
    }

    pub fn get(&self, scope: &str, metric: &str) -> Option<f64> {
        self.scopes.get(scope)?.get(metric).copied()
    }

    pub fn global(&self, metric: &str) -> f64 {
        self.get(GLOBAL, metric).unwrap_or(0.0)
    }

    /// Adds every field of a serializable counter struct under `prefix.`.
    pub fn add_counters<T: Serialize>(&mut self, scope: &str, prefix: &str, counters: &T) {
        let v = serde_json::to_value(counters).expect("counters serialize");
        if let serde_json::Value::Object(m) = v {
            for (k, v) in m {
                if let Some(x) = v.as_f64() {
                    self.set(scope, &format!("{prefix}.{k}"), x);
                }
            }
        }
    }

    /// Sums each per-node metric into the global scope.
    pub fn aggregate_nodes(&mut self) {
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for (scope, m) in &self.scopes {
            if scope.starts_with("node:") {
                for (k, v) in m {
                    *sums.entry(k.clone()).or_default() += v;
                }
            }
        }
        for (k, v) in sums {
            self.set(GLOBAL, &k, v);
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.scopes
            .iter()
            .flat_map(|(s, m)| m.iter().map(move |(k, v)| (s.as_str(), k.as_str(), *v)))
    }

    pub fn to_csv(&self) -> String {
        let mut o = format!("{CSV_HEADER_COMMENT}\nscope,metric,value\n");
        for (s, k, v) in self.rows() {
            let _ = writeln!(o, "{s},{k},{v}");
        }
        o
    }

    pub fn summary(&self) -> String {
        let mut o = String::new();
        for k in SUMMARY_METRICS {
            if let Some(v) = self.get(GLOBAL, k) {
                let _ = writeln!(o, "{k:<40} {v}");
            }
        }
        o
    }
}

const SUMMARY_METRICS: [&str; 12] = [
    "application_goodput",
    "application_goodput_bytes",
    "corrupted_deliveries",
    "heartbeat_overhead_packets",
    "heartbeat_overhead_bytes",
    "spurious_retransmission_count",
    "unavailability_detection_latency",
    "energy_consumed",
    "checksum_operations_at_transport",
    "sctp.data_sent",
    "sctp.retransmissions",
    "olsr.hellos_sent",
];

/// Side-by-side view of several runs of the same scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub legs: Vec<(String, MetricsReport)>,
}

impl Comparison {
    /// Union of (scope, metric) keys across legs.
    fn keys(&self) -> Vec<(String, String)> {
        let mut keys = std::collections::BTreeSet::new();
        for (_, r) in &self.legs {
            for (s, k, _) in r.rows() {
                keys.insert((s.to_string(), k.to_string()));
            }
        }
        keys.into_iter().collect()
    }

    /// Absolute and relative delta of `leg` against the first leg.
    pub fn delta(&self, leg: usize, scope: &str, metric: &str) -> (f64, Option<f64>) {
        let base = self.legs[0].1.get(scope, metric).unwrap_or(0.0);
        let v = self.legs[leg].1.get(scope, metric).unwrap_or(0.0);
        let d = v - base;
        (d, (base != 0.0).then(|| d / base))
    }

    pub fn to_csv(&self) -> String {
        let mut o = format!("{CSV_HEADER_COMMENT}\nscope,metric");
        for (name, _) in &self.legs {
            let _ = write!(o, ",{name}");
        }
        for (name, _) in self.legs.iter().skip(1) {
            let _ = write!(o, ",delta_{name},rel_{name}");
        }
        o.push('\n');
        for (s, k) in self.keys() {
            let _ = write!(o, "{s},{k}");
            for (_, r) in &self.legs {
                match r.get(&s, &k) {
                    Some(v) => {
                        let _ = write!(o, ",{v}");
                    }
                    None => o.push(','),
                }
            }
            for i in 1..self.legs.len() {
                let (d, rel) = self.delta(i, &s, &k);
                match rel {
                    Some(r) => {
                        let _ = write!(o, ",{d},{r}");
                    }
                    None => {
                        let _ = write!(o, ",{d},");
                    }
                }
            }
            o.push('\n');
        }
        o
    }

    /// Global-scope table for the terminal.
    pub fn table(&self) -> String {
        let mut o = format!("{:<40}", "metric");
        for (name, _) in &self.legs {
            let _ = write!(o, " {name:>16}");
        }
        o.push('\n');
        for (s, k) in self.keys().into_iter().filter(|(s, _)| s == GLOBAL) {
            let _ = write!(o, "{k:<40}");
            for (_, r) in &self.legs {
                match r.get(&s, &k) {
                    Some(v) => {
                        let _ = write!(
                            o,
                            " {:>16}",
                            format!("{v:.6}")
                                .trim_end_matches('0')
                                .trim_end_matches('.')
                        );
                    }
                    None => {
                        let _ = write!(o, " {:>16}", "-");
                    }
                }
            }
            o.push('\n');
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut r = MetricsReport::default();
        r.set("node:1", "x", 2.0);
        r.set("node:2", "x", 3.5);
        r.aggregate_nodes();
        assert_eq!(r.global("x"), 5.5);
        let csv = r.to_csv();
        assert!(csv.starts_with("#claa-sim,v1\nscope,metric,value\n"));
        assert!(csv.contains("global,x,5.5\n"));
    }

    #[test]
    fn identical_legs_have_zero_deltas() {
        let mut r = MetricsReport::default();
        r.set(GLOBAL, "a", 4.0);
        let c = Comparison {
            legs: vec![("base".into(), r.clone()), ("same".into(), r)],
        };
        assert_eq!(c.delta(1, GLOBAL, "a"), (0.0, Some(0.0)));
        assert!(c.to_csv().contains("global,a,4,4,0,0\n"));
    }
}
