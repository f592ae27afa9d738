mod energy;
mod engine;
mod event;
mod metrics;

pub use energy::{aggregation_energy, rx_energy, tx_energy, Energy, EnergyParams};
pub use engine::{run, EnergyLedger, EventKind, Hop, RunOutput, SimError, Simulation};
pub use event::{EventQueue, Scheduled, SimTime};
pub use metrics::{exact_joules, metrics_csv, summarize, MetricsRecord, METRICS_HEADER};
