//! Scenario files: flat `[section]` headers with `key = value` lines.
//!
//! ```text
//! # comment
//! [network]
//! nodes = 100
//! [attack]
//! kind = tamper
//! target = any
//! probability = 0.1
//! ```
//!
//! Every key has a default; unknown sections and keys are errors. `[attack]`
//! may repeat, one spec per section.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::adversary::{AttackKind, AttackSpec, Intensity, Schedule, Target};
use crate::aggregation::{Aggregation, HopTiming};
use crate::crypto::CurveParams;
use crate::keys::DEFAULT_WINDOW;
use crate::network::{DeployConfig, ElectionWeights, Position};
use crate::sim::EnergyParams;

pub const DEFAULT_SEED: u64 = 1;
pub const SEED_ENV: &str = "AEGISNET_SEED";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key {section}.{key}")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: {field}: {message}")]
    InvalidValue { line: usize, field: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CurveChoice {
    #[default]
    Toy,
    Secp256k1,
}

impl CurveChoice {
    pub fn params(&self) -> CurveParams {
        match self {
            CurveChoice::Toy => CurveParams::toy(),
            CurveChoice::Secp256k1 => CurveParams::secp256k1(),
        }
    }
}

impl FromStr for CurveChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "toy" => Ok(CurveChoice::Toy),
            "secp256k1" => Ok(CurveChoice::Secp256k1),
            other => Err(format!("unknown curve {other:?} (expected toy|secp256k1)")),
        }
    }
}

impl std::fmt::Display for CurveChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CurveChoice::Toy => "toy",
            CurveChoice::Secp256k1 => "secp256k1",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub nodes: u32,
    pub width: f64,
    pub height: f64,
    /// Defaults to the centre of the field.
    pub bs_x: Option<f64>,
    pub bs_y: Option<f64>,
    pub range: f64,
    pub ch_fraction: f64,
    pub recluster_rounds: u64,
    pub energy_weight: f64,
    pub distance_weight: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let w = ElectionWeights::default();
        Self {
            nodes: 100,
            width: 100.0,
            height: 100.0,
            bs_x: None,
            bs_y: None,
            range: 30.0,
            ch_fraction: 0.05,
            recluster_rounds: 20,
            energy_weight: w.energy,
            distance_weight: w.distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub aggregation: Aggregation,
    pub window: u64,
    pub freshness_ms: u64,
    pub data_bits: u64,
    pub control_bits: u64,
    pub transmission_ms: u64,
    pub processing_ms: u64,
    pub round_period_ms: u64,
    pub reauth_rounds: u64,
    pub curve: CurveChoice,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let t = HopTiming::default();
        Self {
            aggregation: Aggregation::Sum,
            window: DEFAULT_WINDOW,
            freshness_ms: crate::auth::DEFAULT_FRESHNESS_MS,
            data_bits: 4000,
            control_bits: 200,
            transmission_ms: t.transmission_ms,
            processing_ms: t.processing_ms,
            round_period_ms: 1000,
            reauth_rounds: 20,
            curve: CurveChoice::Toy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub rounds: u64,
    pub seed: Option<u64>,
    /// Store-and-forward instead of in-network aggregation.
    pub baseline: bool,
    pub metrics: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub auth_log: Option<PathBuf>,
    pub topology: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub network: NetworkConfig,
    pub energy: EnergyParams,
    pub protocol: ProtocolConfig,
    pub run: RunConfig,
    pub attacks: Vec<AttackSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            energy: EnergyParams::default(),
            protocol: ProtocolConfig::default(),
            run: RunConfig {
                rounds: 500,
                ..RunConfig::default()
            },
            attacks: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn bs_position(&self) -> Position {
        let n = &self.network;
        Position::new(n.bs_x.unwrap_or(n.width / 2.0), n.bs_y.unwrap_or(n.height / 2.0))
    }

    pub fn deploy_config(&self) -> DeployConfig {
        DeployConfig {
            node_count: self.network.nodes as usize,
            width: self.network.width,
            height: self.network.height,
            bs_position: Some(self.bs_position()),
            initial_energy: self.energy.initial_energy,
        }
    }

    pub fn weights(&self) -> ElectionWeights {
        ElectionWeights {
            energy: self.network.energy_weight,
            distance: self.network.distance_weight,
        }
    }

    pub fn timing(&self) -> HopTiming {
        HopTiming {
            transmission_ms: self.protocol.transmission_ms,
            processing_ms: self.protocol.processing_ms,
        }
    }

    /// Cluster-head count for `alive` sensors: `ceil(fraction · alive)`, at least one.
    pub fn head_count(&self, alive: usize) -> usize {
        ((self.network.ch_fraction * alive as f64).ceil() as usize).clamp(1, alive.max(1))
    }

    /// Cross-field checks; `parse_config` runs these too.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field: &str, message: &str| {
            Err(ConfigError::Invalid {
                field: field.to_string(),
                message: message.to_string(),
            })
        };
        let n = &self.network;
        if n.nodes == 0 {
            return bad("network.nodes", "must be at least 1");
        }
        for (f, v) in [("network.width", n.width), ("network.height", n.height), ("network.range", n.range)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(f, "must be a positive number");
            }
        }
        if !(n.ch_fraction > 0.0 && n.ch_fraction <= 1.0) {
            return bad("network.ch_fraction", "must be in (0, 1]");
        }
        for (f, v) in [("network.energy_weight", n.energy_weight), ("network.distance_weight", n.distance_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(f, "must be non-negative");
            }
        }
        for (f, v) in [("network.bs_x", n.bs_x), ("network.bs_y", n.bs_y)] {
            if v.is_some_and(|v| !v.is_finite()) {
                return bad(f, "must be finite");
            }
        }
        if n.recluster_rounds == 0 {
            return bad("network.recluster_rounds", "must be at least 1");
        }
        if let Err(m) = self.energy.validate() {
            return bad("energy", &m);
        }
        let p = &self.protocol;
        for (f, v) in [
            ("protocol.data_bits", p.data_bits),
            ("protocol.control_bits", p.control_bits),
            ("protocol.round_period_ms", p.round_period_ms),
            ("protocol.reauth_rounds", p.reauth_rounds),
        ] {
            if v == 0 {
                return bad(f, "must be at least 1");
            }
        }
        for a in &self.attacks {
            if let Intensity::Probability(pr) = a.intensity {
                if !(0.0..=1.0).contains(&pr) {
                    return bad("attack.probability", "must be in [0, 1]");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Network,
    Energy,
    Protocol,
    Run,
    Attack,
}

/// Attack section under construction; intensity keys are mutually exclusive.
#[derive(Default)]
struct PendingAttack {
    line: usize,
    kind: Option<AttackKind>,
    target: Option<Target>,
    schedule: Option<Schedule>,
    count: Option<u64>,
    probability: Option<f64>,
}

impl PendingAttack {
    fn finish(self) -> Result<AttackSpec, ConfigError> {
        let kind = self.kind.ok_or(ConfigError::InvalidValue {
            line: self.line,
            field: "attack.kind".into(),
            message: "missing".into(),
        })?;
        let intensity = match (self.count, self.probability) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::InvalidValue {
                    line: self.line,
                    field: "attack".into(),
                    message: "count and probability are mutually exclusive".into(),
                })
            }
            (_, Some(p)) => Intensity::Probability(p),
            (c, None) => Intensity::Count(c.unwrap_or(1)),
        };
        Ok(AttackSpec {
            kind,
            target: self.target.unwrap_or(Target::Any),
            schedule: self.schedule.unwrap_or(Schedule::ALWAYS),
            intensity,
        })
    }
}

fn value<T: FromStr>(line: usize, field: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        line,
        field: field.to_string(),
        message: format!("{raw:?}: {e}"),
    })
}

/// Parses a scenario document; missing keys take their defaults.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = ScenarioConfig::default();
    let mut section: Option<Section> = None;
    let mut attack: Option<PendingAttack> = None;
    // the line that set each validated field, for diagnostics
    let mut lines: Vec<(String, usize)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(name) = body.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                message: "unterminated section header".into(),
            })?;
            if let Some(a) = attack.take() {
                cfg.attacks.push(a.finish()?);
            }
            section = Some(match name.trim() {
                "network" => Section::Network,
                "energy" => Section::Energy,
                "protocol" => Section::Protocol,
                "run" => Section::Run,
                "attack" => {
                    attack = Some(PendingAttack {
                        line,
                        ..PendingAttack::default()
                    });
                    Section::Attack
                }
                other => {
                    return Err(ConfigError::UnknownSection {
                        line,
                        name: other.to_string(),
                    })
                }
            });
            continue;
        }
        let (key, val) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("expected key = value, got {body:?}"),
        })?;
        let (key, val) = (key.trim(), val.trim());
        let Some(sec) = section else {
            return Err(ConfigError::Syntax {
                line,
                message: format!("key {key:?} outside any section"),
            });
        };
        let unknown = |s: &str| ConfigError::UnknownKey {
            line,
            section: s.to_string(),
            key: key.to_string(),
        };
        match sec {
            Section::Network => {
                let n = &mut cfg.network;
                let f = format!("network.{key}");
                match key {
                    "nodes" => n.nodes = value(line, &f, val)?,
                    "width" => n.width = value(line, &f, val)?,
                    "height" => n.height = value(line, &f, val)?,
                    "bs_x" => n.bs_x = Some(value(line, &f, val)?),
                    "bs_y" => n.bs_y = Some(value(line, &f, val)?),
                    "range" => n.range = value(line, &f, val)?,
                    "ch_fraction" => n.ch_fraction = value(line, &f, val)?,
                    "recluster_rounds" => n.recluster_rounds = value(line, &f, val)?,
                    "energy_weight" => n.energy_weight = value(line, &f, val)?,
                    "distance_weight" => n.distance_weight = value(line, &f, val)?,
                    _ => return Err(unknown("network")),
                }
                lines.push((f, line));
            }
            Section::Energy => {
                let e = &mut cfg.energy;
                let f = format!("energy.{key}");
                match key {
                    "e_elec" => e.e_elec = value(line, &f, val)?,
                    "eps_fs" => e.eps_fs = value(line, &f, val)?,
                    "eps_mp" => e.eps_mp = value(line, &f, val)?,
                    "e_da" => e.e_da = value(line, &f, val)?,
                    "initial_energy" => e.initial_energy = value(line, &f, val)?,
                    "death_threshold" => e.death_threshold = value(line, &f, val)?,
                    _ => return Err(unknown("energy")),
                }
                lines.push(("energy".to_string(), line));
            }
            Section::Protocol => {
                let p = &mut cfg.protocol;
                let f = format!("protocol.{key}");
                match key {
                    "aggregation" => p.aggregation = value(line, &f, val)?,
                    "window" => p.window = value(line, &f, val)?,
                    "freshness_ms" => p.freshness_ms = value(line, &f, val)?,
                    "data_bits" => p.data_bits = value(line, &f, val)?,
                    "control_bits" => p.control_bits = value(line, &f, val)?,
                    "transmission_ms" => p.transmission_ms = value(line, &f, val)?,
                    "processing_ms" => p.processing_ms = value(line, &f, val)?,
                    "round_period_ms" => p.round_period_ms = value(line, &f, val)?,
                    "reauth_rounds" => p.reauth_rounds = value(line, &f, val)?,
                    "curve" => p.curve = value(line, &f, val)?,
                    _ => return Err(unknown("protocol")),
                }
                lines.push((f, line));
            }
            Section::Run => {
                let r = &mut cfg.run;
                let f = format!("run.{key}");
                match key {
                    "rounds" => r.rounds = value(line, &f, val)?,
                    "seed" => r.seed = Some(value(line, &f, val)?),
                    "baseline" => r.baseline = value(line, &f, val)?,
                    "metrics" => r.metrics = Some(PathBuf::from(val)),
                    "trace" => r.trace = Some(PathBuf::from(val)),
                    "auth_log" => r.auth_log = Some(PathBuf::from(val)),
                    "topology" => r.topology = Some(PathBuf::from(val)),
                    _ => return Err(unknown("run")),
                }
            }
            Section::Attack => {
                let a = attack.as_mut().expect("attack section open");
                let f = format!("attack.{key}");
                match key {
                    "kind" => a.kind = Some(value(line, &f, val)?),
                    "target" => a.target = Some(value(line, &f, val)?),
                    "schedule" => a.schedule = Some(value(line, &f, val)?),
                    "count" => a.count = Some(value(line, &f, val)?),
                    "probability" => a.probability = Some(value(line, &f, val)?),
                    _ => return Err(unknown("attack")),
                }
                lines.push(("attack.probability".to_string(), line));
            }
        }
    }
    if let Some(a) = attack.take() {
        cfg.attacks.push(a.finish()?);
    }
    cfg.validate().map_err(|e| match e {
        ConfigError::Invalid { field, message } => match lines.iter().rev().find(|(f, _)| *f == field) {
            Some((_, line)) => ConfigError::InvalidValue {
                line: *line,
                field,
                message,
            },
            None => ConfigError::Invalid { field, message },
        },
        other => other,
    })?;
    Ok(cfg)
}

/// Every field written out explicitly; `parse_config` reads it back unchanged.
pub fn dump_config(cfg: &ScenarioConfig) -> String {
    let mut s = String::new();
    let n = &cfg.network;
    let _ = writeln!(s, "[network]");
    let _ = writeln!(s, "nodes = {}", n.nodes);
    let _ = writeln!(s, "width = {}", n.width);
    let _ = writeln!(s, "height = {}", n.height);
    if let Some(x) = n.bs_x {
        let _ = writeln!(s, "bs_x = {x}");
    }
    if let Some(y) = n.bs_y {
        let _ = writeln!(s, "bs_y = {y}");
    }
    let _ = writeln!(s, "range = {}", n.range);
    let _ = writeln!(s, "ch_fraction = {}", n.ch_fraction);
    let _ = writeln!(s, "recluster_rounds = {}", n.recluster_rounds);
    let _ = writeln!(s, "energy_weight = {}", n.energy_weight);
    let _ = writeln!(s, "distance_weight = {}", n.distance_weight);

    let e = &cfg.energy;
    let _ = writeln!(s, "\n[energy]");
    let _ = writeln!(s, "e_elec = {}", e.e_elec);
    let _ = writeln!(s, "eps_fs = {}", e.eps_fs);
    let _ = writeln!(s, "eps_mp = {}", e.eps_mp);
    let _ = writeln!(s, "e_da = {}", e.e_da);
    let _ = writeln!(s, "initial_energy = {}", e.initial_energy);
    let _ = writeln!(s, "death_threshold = {}", e.death_threshold);

    let p = &cfg.protocol;
    let _ = writeln!(s, "\n[protocol]");
    let _ = writeln!(s, "aggregation = {}", p.aggregation);
    let _ = writeln!(s, "window = {}", p.window);
    let _ = writeln!(s, "freshness_ms = {}", p.freshness_ms);
    let _ = writeln!(s, "data_bits = {}", p.data_bits);
    let _ = writeln!(s, "control_bits = {}", p.control_bits);
    let _ = writeln!(s, "transmission_ms = {}", p.transmission_ms);
    let _ = writeln!(s, "processing_ms = {}", p.processing_ms);
    let _ = writeln!(s, "round_period_ms = {}", p.round_period_ms);
    let _ = writeln!(s, "reauth_rounds = {}", p.reauth_rounds);
    let _ = writeln!(s, "curve = {}", p.curve);

    let r = &cfg.run;
    let _ = writeln!(s, "\n[run]");
    let _ = writeln!(s, "rounds = {}", r.rounds);
    if let Some(seed) = r.seed {
        let _ = writeln!(s, "seed = {seed}");
    }
    let _ = writeln!(s, "baseline = {}", r.baseline);
    for (k, v) in [("metrics", &r.metrics), ("trace", &r.trace), ("auth_log", &r.auth_log), ("topology", &r.topology)] {
        if let Some(path) = v {
            let _ = writeln!(s, "{k} = {}", path.display());
        }
    }

    for a in &cfg.attacks {
        let _ = writeln!(s, "\n[attack]");
        let _ = writeln!(s, "kind = {}", a.kind);
        let _ = writeln!(s, "target = {}", a.target);
        let _ = writeln!(s, "schedule = {}", a.schedule);
        match a.intensity {
            Intensity::Count(c) => {
                let _ = writeln!(s, "count = {c}");
            }
            Intensity::Probability(p) => {
                let _ = writeln!(s, "probability = {p}");
            }
        }
    }
    s
}

/// `--seed` beats the config file, which beats `AEGISNET_SEED`, which beats [`DEFAULT_SEED`].
pub fn resolve_seed(cli: Option<u64>, config: Option<u64>, env: Option<&str>) -> Result<u64, ConfigError> {
    if let Some(s) = cli.or(config) {
        return Ok(s);
    }
    match env {
        Some(v) => v.trim().parse().map_err(|_| ConfigError::Invalid {
            field: SEED_ENV.to_string(),
            message: format!("{v:?} is not an unsigned integer"),
        }),
        None => Ok(DEFAULT_SEED),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::LinkId;
    use crate::network::NodeId;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(parse_config("").unwrap(), ScenarioConfig::default());
        assert_eq!(parse_config("# nothing\n\n[run]\n").unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn zero_nodes_names_the_field() {
        let e = parse_config("[network]\nnodes = 0\n").unwrap_err();
        assert_eq!(
            e,
            ConfigError::InvalidValue {
                line: 2,
                field: "network.nodes".into(),
                message: "must be at least 1".into()
            }
        );
        assert!(e.to_string().contains("network.nodes"));
    }

    #[test]
    fn strict_keys_and_sections() {
        assert!(matches!(
            parse_config("[network]\nnodez = 3\n"),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(parse_config("[netwrk]\n"), Err(ConfigError::UnknownSection { line: 1, .. })));
        assert!(matches!(parse_config("nodes = 3\n"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            parse_config("[run]\nrounds = many\n"),
            Err(ConfigError::InvalidValue { line: 2, .. })
        ));
        assert!(parse_config("[attack]\nkind = drop\ncount = 1\nprobability = 0.5\n").is_err());
        assert!(parse_config("[attack]\ntarget = any\n").is_err());
    }

    #[test]
    fn attack_sections_repeat() {
        let cfg = parse_config(
            "[attack]\nkind = replay\ntarget = link:4->2\nschedule = 3..9\ncount = 5\n\n[attack]\nkind = tamper\nprobability = 0.25\n",
        )
        .unwrap();
        assert_eq!(cfg.attacks.len(), 2);
        assert_eq!(cfg.attacks[0].target, Target::Link(LinkId::new(NodeId(2), NodeId(4))));
        assert_eq!(cfg.attacks[0].intensity, Intensity::Count(5));
        assert_eq!(cfg.attacks[1].schedule, Schedule::ALWAYS);
        assert_eq!(cfg.attacks[1].intensity, Intensity::Probability(0.25));
    }

    #[test]
    fn full_config_round_trips() {
        let text = "\
[network]
nodes = 37
width = 120.5
height = 80
bs_x = 60.25
bs_y = -10
range = 25
ch_fraction = 0.1
recluster_rounds = 7
energy_weight = 0.6
distance_weight = 0.4

[energy]
e_elec = 0.00000004
eps_fs = 0.000000000011
eps_mp = 0.0000000000000014
e_da = 0.000000006
initial_energy = 0.25
death_threshold = 0.001

[protocol]
aggregation = max
window = 5
freshness_ms = 300
data_bits = 2000
control_bits = 150
transmission_ms = 7
processing_ms = 3
round_period_ms = 800
reauth_rounds = 4
curve = secp256k1

[run]
rounds = 42
seed = 9
baseline = true
metrics = out/m.csv
trace = out/t.csv
auth_log = out/a.log
topology = out/topo.csv

[attack]
kind = compromise_link
target = random
schedule = 2..
count = 1

[attack]
kind = drop
target = handshake
schedule = 5..6
probability = 0.5
";
        let cfg = parse_config(text).unwrap();
        assert_ne!(cfg, ScenarioConfig::default());
        let dumped = dump_config(&cfg);
        assert_eq!(dumped, text);
        assert_eq!(parse_config(&dumped).unwrap(), cfg);
        assert_eq!(dump_config(&parse_config(&dump_config(&ScenarioConfig::default())).unwrap()), dump_config(&ScenarioConfig::default()));
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some(2), Some("3")).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some(2), Some("3")).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, Some("3")).unwrap(), 3);
        assert_eq!(resolve_seed(None, None, None).unwrap(), DEFAULT_SEED);
        assert!(resolve_seed(None, None, Some("x")).is_err());
    }

    #[test]
    fn head_count_rounds_up() {
        let cfg = ScenarioConfig::default();
        assert_eq!(cfg.head_count(100), 5);
        assert_eq!(cfg.head_count(101), 6);
        assert_eq!(cfg.head_count(1), 1);
    }
}
