use serde::Serialize;

use crate::messages::FlowClass;

/// Latency and delivery summary for one flow class in one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowStats {
    pub flow_class: FlowClass,
    #[serde(skip)]
    pub samples_us: Vec<f64>,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub p99_us: f64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub success_rate: f64,
}

/// Nearest-rank percentile of sorted data; 0 for no data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl FlowStats {
    pub fn empty(flow_class: FlowClass) -> Self {
        Self::from_samples(flow_class, &[], 0, 0, 0)
    }

    /// Builds stats from latency samples in nanoseconds.
    pub fn from_samples(flow_class: FlowClass, samples_ns: &[u64], sent: u64, delivered: u64, dropped: u64) -> Self {
        let mut samples_us: Vec<f64> = samples_ns.iter().map(|&ns| ns as f64 / 1000.0).collect();
        samples_us.sort_by(f64::total_cmp);
        let mean_us = if samples_ns.is_empty() {
            0.0
        } else {
            samples_ns.iter().map(|&x| u128::from(x)).sum::<u128>() as f64 / samples_ns.len() as f64 / 1000.0
        };
        FlowStats {
            flow_class,
            mean_us,
            p50_us: percentile(&samples_us, 50.0),
            p95_us: percentile(&samples_us, 95.0),
            p99_us: percentile(&samples_us, 99.0),
            samples_us,
            sent,
            delivered,
            dropped,
            success_rate: if sent == 0 { 0.0 } else { delivered as f64 / sent as f64 },
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.sent == self.delivered + self.dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&[7.0], 99.0), 7.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn empty_is_all_zero() {
        let s = FlowStats::empty(FlowClass::CoapPv);
        assert_eq!((s.mean_us, s.p99_us, s.sent, s.success_rate), (0.0, 0.0, 0, 0.0));
    }

    proptest! {
        #[test]
        fn ordered_percentiles(samples in proptest::collection::vec(0u64..10_000_000, 0..300), dropped in 0u64..50) {
            let n = samples.len() as u64;
            let s = FlowStats::from_samples(FlowClass::CoapPv, &samples, n + dropped, n, dropped);
            prop_assert!(s.p50_us <= s.p95_us && s.p95_us <= s.p99_us);
            prop_assert!((0.0..=1.0).contains(&s.success_rate));
            prop_assert!(s.is_conserved());
            if n > 0 {
                prop_assert!(s.mean_us >= s.samples_us[0] && s.mean_us <= s.samples_us[n as usize - 1]);
            }
        }
    }
}
