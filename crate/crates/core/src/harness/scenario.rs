use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coap::{CoapError, RetransmitParams};
use crate::netsim::{BackgroundFlowSet, BackgroundKind, TcpParams};
use crate::qos::DscpClass;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Qos,
    NoQos,
    Wan,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Qos, Mode::NoQos, Mode::Wan];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Qos => "qos",
            Mode::NoQos => "no_qos",
            Mode::Wan => "wan",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorsPerSite {
    pub motor: usize,
    pub pressure: usize,
    pub temperature: usize,
}

impl Default for SensorsPerSite {
    fn default() -> Self {
        SensorsPerSite {
            motor: 6,
            pressure: 6,
            temperature: 6,
        }
    }
}

impl SensorsPerSite {
    pub fn total(&self) -> usize {
        self.motor + self.pressure + self.temperature
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundConfig {
    pub kind: BackgroundKind,
    /// Flows per site.
    pub n_flows: usize,
    /// Per-flow rate of datagram flows.
    pub rate_bps: u64,
    pub size_bytes: u32,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            kind: BackgroundKind::UdpLike,
            n_flows: 0,
            rate_bps: 110_000_000,
            size_bytes: 1500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoapConfig {
    #[serde(rename = "T_ms")]
    pub t_ms: f64,
    #[serde(rename = "C")]
    pub c: u32,
    #[serde(rename = "F")]
    pub f: f64,
}

impl Default for CoapConfig {
    fn default() -> Self {
        CoapConfig { t_ms: 2.0, c: 4, f: 1.5 }
    }
}

impl CoapConfig {
    pub fn params(&self) -> Result<RetransmitParams, CoapError> {
        if !self.t_ms.is_finite() || self.t_ms <= 0.0 {
            return Err(CoapError::ZeroTimeout);
        }
        RetransmitParams::new(Duration::from_nanos((self.t_ms * 1e6).round() as u64), self.c, self.f)
    }
}

/// Windowed transport settings for background flows and WebSocket sessions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcpConfig {
    pub initial_window: u32,
    pub max_window: u32,
    pub rto_ms: f64,
    pub max_rto_ms: f64,
}

impl Default for TcpConfig {
    fn default() -> Self {
        TcpConfig {
            initial_window: 4,
            max_window: 20,
            rto_ms: 20.0,
            max_rto_ms: 2000.0,
        }
    }
}

impl TcpConfig {
    pub fn params(&self, rto_floor: Duration) -> TcpParams {
        let ms = |x: f64| Duration::from_nanos((x * 1e6).round() as u64);
        let rto = ms(self.rto_ms).max(rto_floor);
        TcpParams {
            initial_window: self.initial_window,
            max_window: self.max_window,
            rto,
            max_rto: ms(self.max_rto_ms).max(rto),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WanConfig {
    pub base_ms: f64,
    pub jitter_ms: f64,
    /// Lower bound on the retransmission timeout of windowed flows
    /// crossing the WAN.
    pub rto_ms: f64,
}

impl Default for WanConfig {
    fn default() -> Self {
        WanConfig {
            base_ms: 40.0,
            jitter_ms: 40.0,
            rto_ms: 500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub v: u32,
    #[serde(default = "default_sites")]
    pub sites: usize,
    #[serde(default)]
    pub sensors_per_site: SensorsPerSite,
    #[serde(default)]
    pub background: BackgroundConfig,
    #[serde(default = "default_true")]
    pub qos_enabled: bool,
    #[serde(default)]
    pub baseline_wan: bool,
    #[serde(default)]
    pub coap: CoapConfig,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: u32,
    #[serde(default = "default_group3")]
    pub group3_dscp: DscpClass,
    /// Adds per-packet security overhead to every flow.
    #[serde(default)]
    pub secure: bool,
    #[serde(default)]
    pub tcp: TcpConfig,
    #[serde(default)]
    pub wan: WanConfig,
}

fn default_sites() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_duration() -> f64 {
    60.0
}
fn default_replications() -> u32 {
    5
}
fn default_group3() -> DscpClass {
    DscpClass::Af21
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            v: SCENARIO_SCHEMA_VERSION,
            sites: default_sites(),
            sensors_per_site: SensorsPerSite::default(),
            background: BackgroundConfig::default(),
            qos_enabled: true,
            baseline_wan: false,
            coap: CoapConfig::default(),
            duration_s: default_duration(),
            seed: 0,
            replications: default_replications(),
            group3_dscp: default_group3(),
            secure: false,
            tcp: TcpConfig::default(),
            wan: WanConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported scenario version {0}")]
    SchemaVersion(u32),
    #[error("at least one site is required")]
    NoSites,
    #[error("duration_s must be a finite number >= 0 (got {0})")]
    Duration(f64),
    #[error("replications must be >= 1")]
    Replications,
    #[error("baseline_wan excludes qos_enabled")]
    WanWithQos,
    #[error("group3_dscp must be CS4 or AF21-AF23 (got {0})")]
    Group3(DscpClass),
    #[error("background: {0}")]
    Background(String),
    #[error("tcp: {0}")]
    Tcp(String),
    #[error("wan: {0}")]
    Wan(String),
    #[error("coap: {0}")]
    Coap(#[from] CoapError),
    #[error("level {level}: {source}")]
    AtLevel { level: usize, source: Box<ScenarioError> },
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn mode(&self) -> Mode {
        if self.baseline_wan {
            Mode::Wan
        } else if self.qos_enabled {
            Mode::Qos
        } else {
            Mode::NoQos
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Scenario {
        let mut s = self.clone();
        s.qos_enabled = mode == Mode::Qos;
        s.baseline_wan = mode == Mode::Wan;
        s
    }

    pub fn with_level(&self, n_flows: usize) -> Scenario {
        let mut s = self.clone();
        s.background.n_flows = n_flows;
        s
    }

    pub fn duration(&self) -> Duration {
        Duration::from_nanos((self.duration_s * 1e9).round() as u64)
    }

    /// Retransmission parameters in effect: public-internet defaults across
    /// the WAN, the configured values otherwise.
    pub fn effective_coap(&self) -> RetransmitParams {
        if self.baseline_wan {
            RetransmitParams::internet()
        } else {
            self.coap.params().expect("validated")
        }
    }

    pub fn background_set(&self) -> BackgroundFlowSet {
        BackgroundFlowSet {
            kind: self.background.kind,
            n_flows: self.background.n_flows,
            packet_size: self.background.size_bytes,
            rate_bps: self.background.rate_bps,
            tcp: self.tcp_params(),
        }
    }

    pub fn tcp_params(&self) -> TcpParams {
        let floor = if self.baseline_wan {
            Duration::from_nanos((self.wan.rto_ms * 1e6).round() as u64)
        } else {
            Duration::ZERO
        };
        self.tcp.params(floor)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.v != SCENARIO_SCHEMA_VERSION {
            return Err(ScenarioError::SchemaVersion(self.v));
        }
        if self.sites == 0 {
            return Err(ScenarioError::NoSites);
        }
        if !self.duration_s.is_finite() || self.duration_s < 0.0 {
            return Err(ScenarioError::Duration(self.duration_s));
        }
        if self.replications == 0 {
            return Err(ScenarioError::Replications);
        }
        if self.baseline_wan && self.qos_enabled {
            return Err(ScenarioError::WanWithQos);
        }
        if !matches!(self.group3_dscp, DscpClass::Cs4 | DscpClass::Af21 | DscpClass::Af22 | DscpClass::Af23) {
            return Err(ScenarioError::Group3(self.group3_dscp));
        }
        let b = &self.background;
        if b.size_bytes == 0 {
            return Err(ScenarioError::Background("size_bytes must be positive".into()));
        }
        if b.kind == BackgroundKind::UdpLike && b.n_flows > 0 && b.rate_bps == 0 {
            return Err(ScenarioError::Background("rate_bps must be positive".into()));
        }
        let t = &self.tcp;
        if t.initial_window == 0 || t.max_window < t.initial_window {
            return Err(ScenarioError::Tcp("need 1 <= initial_window <= max_window".into()));
        }
        if !(t.rto_ms > 0.0 && t.rto_ms.is_finite() && t.max_rto_ms.is_finite()) {
            return Err(ScenarioError::Tcp("rto_ms must be positive".into()));
        }
        let w = &self.wan;
        if !(w.base_ms.is_finite() && w.jitter_ms.is_finite() && w.jitter_ms >= 0.0 && w.rto_ms > 0.0) {
            return Err(ScenarioError::Wan("delays must be finite and nonnegative".into()));
        }
        self.coap.params()?;
        Ok(())
    }
}
