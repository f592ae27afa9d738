use std::fmt::Write as _;

use super::Energy;

pub const METRICS_HEADER: &str = "round,alive,total_energy_j,sent,delivered,pdr,mean_delay_ms,bytes_tx,attack_attempts,attack_accepted";

/// One row of the metrics CSV. `round` is −1 on the summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub round: i64,
    /// Alive sensors plus the base station.
    pub alive: u64,
    /// Residual energy of all sensors.
    pub total_energy: Energy,
    pub sent: u64,
    pub delivered: u64,
    /// Sum over delivered readings of (arrival at the base station − generation).
    pub delay_sum_ms: u64,
    pub readings_delivered: u64,
    /// Cumulative.
    pub bytes_tx: u64,
    pub attack_attempts: u64,
    pub attack_accepted: u64,
    /// Sensors with no in-range path to their head this round (not a CSV column).
    pub isolated: u64,
}

impl MetricsRecord {
    pub fn pdr(&self) -> Option<f64> {
        (self.sent > 0).then(|| self.delivered as f64 / self.sent as f64)
    }

    pub fn mean_delay_ms(&self) -> Option<f64> {
        (self.readings_delivered > 0).then(|| self.delay_sum_ms as f64 / self.readings_delivered as f64)
    }

    pub fn csv_row(&self) -> String {
        let na = |v: Option<f64>, prec: usize| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.prec$}"));
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.alive,
            exact_joules(self.total_energy),
            self.sent,
            self.delivered,
            na(self.pdr(), 6),
            na(self.mean_delay_ms(), 3),
            self.bytes_tx,
            self.attack_attempts,
            self.attack_accepted
        )
    }
}

/// Femtojoules printed as joules with all fifteen decimals, no float rounding.
pub fn exact_joules(e: Energy) -> String {
    const FJ_PER_J: u64 = 1_000_000_000_000_000;
    let fj = e.femtojoules();
    format!("{}.{:015}", fj / FJ_PER_J, fj % FJ_PER_J)
}

/// Folds per-round rows into the summary row.
pub fn summarize(rows: &[MetricsRecord], final_alive: u64, final_energy: Energy, bytes_tx: u64) -> MetricsRecord {
    let mut s = MetricsRecord {
        round: -1,
        alive: final_alive,
        total_energy: final_energy,
        sent: 0,
        delivered: 0,
        delay_sum_ms: 0,
        readings_delivered: 0,
        bytes_tx,
        attack_attempts: 0,
        attack_accepted: 0,
        isolated: rows.last().map_or(0, |r| r.isolated),
    };
    for r in rows {
        s.sent += r.sent;
        s.delivered += r.delivered;
        s.delay_sum_ms += r.delay_sum_ms;
        s.readings_delivered += r.readings_delivered;
        s.attack_attempts += r.attack_attempts;
        s.attack_accepted += r.attack_accepted;
    }
    s
}

pub fn metrics_csv(rows: &[MetricsRecord], summary: &MetricsRecord) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 2));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows.iter().chain(std::iter::once(summary)) {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(sent: u64, delivered: u64) -> MetricsRecord {
        MetricsRecord {
            round: 0,
            alive: 3,
            total_energy: Energy::from_femtojoules(1_500_000_000_000_123),
            sent,
            delivered,
            delay_sum_ms: 0,
            readings_delivered: 0,
            bytes_tx: 0,
            attack_attempts: 0,
            attack_accepted: 0,
            isolated: 0,
        }
    }

    #[test]
    fn pdr_division_and_na() {
        assert_eq!(row(100, 90).pdr(), Some(0.9));
        assert_eq!(row(0, 0).pdr(), None);
        assert_eq!(row(0, 0).csv_row(), "0,3,1.500000000000123,0,0,NA,NA,0,0,0");
        assert_eq!(row(100, 90).csv_row(), "0,3,1.500000000000123,100,90,0.900000,NA,0,0,0");
    }

    #[test]
    fn summary_sums_rounds() {
        let mut a = row(10, 9);
        a.delay_sum_ms = 30;
        a.readings_delivered = 1;
        let mut b = row(10, 10);
        b.round = 1;
        b.delay_sum_ms = 50;
        b.readings_delivered = 1;
        let s = summarize(&[a.clone(), b.clone()], 2, Energy::ZERO, 77);
        assert_eq!((s.round, s.sent, s.delivered, s.bytes_tx), (-1, 20, 19, 77));
        assert_eq!(s.mean_delay_ms(), Some(40.0));
        let csv = metrics_csv(&[a, b], &s);
        assert!(csv.starts_with(METRICS_HEADER));
        assert!(csv.lines().last().unwrap().starts_with("-1,2,0.000000000000000,20,19,0.950000,40.000,77"));
    }
}
