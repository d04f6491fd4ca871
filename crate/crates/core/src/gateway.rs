//! Site gateway: observes field devices over CoAP, forwards readings to the
//! sensor cloud as WebSocket text frames, turns cloud commands into CoAP
//! requests and holds the installed QoS policy.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coap::{Action, Endpoint, ExchangeState};
use crate::messages::{Code, CoapMessage, NodeId, Token, WsFrame, WsOpcode};
use crate::qos::{encode_policy_ack, validate, DscpClass, PolicyAck, QosPolicy, Selector, Violation};
use crate::tdma::ProcessValue;
use crate::time::SimTime;

pub const JSON_SCHEMA_VERSION: u32 = 1;
/// Resource every field device publishes readings on.
pub const PV_RESOURCE: &str = "pv";
/// Resource field devices accept commands on.
pub const COMMAND_RESOURCE: &str = "cmd";
pub const WS_BUFFER_LIMIT: usize = 1024;

/// A reading as it moves through the system, with the times it reached the
/// gateway and the cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestampedReading {
    pub pv: ProcessValue,
    pub gw_arrival: SimTime,
    pub sc_arrival: Option<SimTime>,
}

impl TimestampedReading {
    /// generated_at <= gw_arrival <= sc_arrival.
    pub fn is_monotonic(&self) -> bool {
        self.pv.generated_at <= self.gw_arrival && self.sc_arrival.is_none_or(|sc| self.gw_arrival <= sc)
    }

    pub fn to_doc(&self) -> ReadingDoc {
        ReadingDoc {
            v: JSON_SCHEMA_VERSION,
            device_id: self.pv.device_id,
            value: self.pv.value,
            generated_at: self.pv.generated_at.as_micros(),
            gw_arrival: self.gw_arrival.as_micros(),
            sc_arrival: self.sc_arrival.map(SimTime::as_micros),
        }
    }
}

/// JSON form of a reading; times are integer microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadingDoc {
    pub v: u32,
    pub device_id: u32,
    pub value: f64,
    pub generated_at: u64,
    pub gw_arrival: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sc_arrival: Option<u64>,
}

impl ReadingDoc {
    /// Parses a frame payload. Nanosecond precision below one microsecond is
    /// lost in the JSON form.
    pub fn parse(b: &[u8]) -> Result<Self, AdapterError> {
        let doc: ReadingDoc = serde_json::from_slice(b).map_err(|e| AdapterError::Malformed(e.to_string()))?;
        if doc.v != JSON_SCHEMA_VERSION {
            return Err(AdapterError::SchemaVersion(doc.v));
        }
        Ok(doc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandDoc {
    pub v: u32,
    pub device_id: u32,
    pub command: String,
    #[serde(default)]
    pub args: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ErrorDoc {
    v: u32,
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    device_id: Option<u32>,
}

#[derive(Debug, Error, PartialEq)]
pub enum AdapterError {
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error("unknown device {0}")]
    UnknownDevice(u32),
    #[error("frame is not text")]
    NotText,
}

impl AdapterError {
    /// Error reply sent back on the originating session.
    pub fn to_frame(&self) -> WsFrame {
        let device_id = match self {
            AdapterError::UnknownDevice(d) => Some(*d),
            _ => None,
        };
        let doc = ErrorDoc {
            v: JSON_SCHEMA_VERSION,
            error: self.to_string(),
            device_id,
        };
        WsFrame::text(serde_json::to_vec(&doc).expect("serializable"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayCounters {
    pub notifications: u64,
    pub frames: u64,
    /// Notifications whose payload could not be decoded.
    pub adapter_drops: u64,
    pub duplicates: u64,
    pub command_errors: u64,
    pub registrations_sent: u64,
    pub registration_timeouts: u64,
    pub policies_applied: u64,
    pub policies_rejected: u64,
}

#[derive(Debug, Clone)]
pub struct ObservedDevice {
    pub node: NodeId,
    pub token: Token,
    pub active: bool,
    /// Registration exchange still in flight.
    pub registering: Option<u16>,
    pub last_notification: Option<SimTime>,
    pub registered_at: Option<SimTime>,
}

/// Outcome of a finished registration exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Registration {
    Active(u32),
    TimedOut(u32),
}

/// A CoAP request produced from a cloud command, with the marking it must
/// carry.
#[derive(Debug, Clone, PartialEq)]
pub struct OutboundCommand {
    pub to: NodeId,
    pub msg: CoapMessage,
    pub dscp: DscpClass,
    pub selector: Selector,
}

#[derive(Debug)]
pub struct GatewayState {
    pub site_id: usize,
    pub node: NodeId,
    directory: BTreeMap<u32, NodeId>,
    observed: BTreeMap<u32, ObservedDevice>,
    registrations: BTreeMap<u16, u32>,
    installed_policy: Option<Arc<QosPolicy>>,
    ws_sessions: BTreeSet<u32>,
    seen: HashSet<(u32, u64)>,
    pub counters: GatewayCounters,
}

impl GatewayState {
    /// `devices` maps device ids to their network nodes.
    pub fn new(site_id: usize, node: NodeId, devices: impl IntoIterator<Item = (u32, NodeId)>) -> Self {
        GatewayState {
            site_id,
            node,
            directory: devices.into_iter().collect(),
            observed: BTreeMap::new(),
            registrations: BTreeMap::new(),
            installed_policy: None,
            ws_sessions: BTreeSet::new(),
            seen: HashSet::new(),
            counters: GatewayCounters::default(),
        }
    }

    pub fn device_node(&self, device_id: u32) -> Option<NodeId> {
        self.directory.get(&device_id).copied()
    }

    pub fn device_for_node(&self, node: NodeId) -> Option<u32> {
        self.directory.iter().find(|(_, n)| **n == node).map(|(d, _)| *d)
    }

    pub fn observed(&self) -> &BTreeMap<u32, ObservedDevice> {
        &self.observed
    }

    pub fn active_observations(&self) -> usize {
        self.observed.values().filter(|o| o.active).count()
    }

    pub fn open_session(&mut self, id: u32) {
        self.ws_sessions.insert(id);
    }

    pub fn close_session(&mut self, id: u32) {
        self.ws_sessions.remove(&id);
    }

    pub fn sessions(&self) -> impl Iterator<Item = u32> + '_ {
        self.ws_sessions.iter().copied()
    }

    pub fn installed_policy(&self) -> Option<&Arc<QosPolicy>> {
        self.installed_policy.as_ref()
    }

    /// DSCP and selector for traffic of `selector`, per the installed policy.
    /// Without a policy everything is best effort.
    pub fn mark(&self, selector: Selector) -> DscpClass {
        self.installed_policy.as_ref().map_or(DscpClass::Be, |p| p.mark(selector))
    }

    /// Sends an observe registration (GET with observe 0) to each device not
    /// already registered or registering. Returns how many were sent.
    pub fn establish_observations(&mut self, endpoint: &mut Endpoint, now: SimTime, devices: &[u32], out: &mut Vec<Action>) -> usize {
        let mut sent = 0;
        for &d in devices {
            let Some(node) = self.device_node(d) else {
                continue;
            };
            if self.observed.get(&d).is_some_and(|o| o.active || o.registering.is_some()) {
                continue;
            }
            if let Some(old) = self.observed.get(&d) {
                endpoint.forget_token(&old.token);
            }
            let token = endpoint.new_token();
            let msg = CoapMessage::confirmable(Code::Get, Some(PV_RESOURCE), Vec::new())
                .with_token(token)
                .with_observe(0);
            let mid = endpoint.send_confirmable(now, node, msg, out).expect("GET is confirmable");
            self.registrations.insert(mid, d);
            let entry = self.observed.entry(d).or_insert(ObservedDevice {
                node,
                token,
                active: false,
                registering: None,
                last_notification: None,
                registered_at: None,
            });
            entry.token = token;
            entry.active = false;
            entry.registering = Some(mid);
            self.counters.registrations_sent += 1;
            sent += 1;
        }
        sent
    }

    /// Feeds back a completed exchange started by this gateway. Returns the
    /// registration outcome if it was one.
    pub fn on_exchange_done(&mut self, now: SimTime, message_id: u16, state: ExchangeState) -> Option<Registration> {
        let d = self.registrations.remove(&message_id)?;
        let o = self.observed.get_mut(&d).expect("registered device is tracked");
        o.registering = None;
        match state {
            ExchangeState::Acked => {
                o.active = true;
                o.registered_at = Some(now);
                o.last_notification = Some(now);
                Some(Registration::Active(d))
            }
            _ => {
                o.active = false;
                self.counters.registration_timeouts += 1;
                Some(Registration::TimedOut(d))
            }
        }
    }

    /// Devices whose observation looks dead: no notification for longer
    /// than `stale_after`, or never registered. They are marked inactive.
    pub fn stale_devices(&mut self, now: SimTime, stale_after: impl Fn(u32) -> Duration) -> Vec<u32> {
        let mut stale = Vec::new();
        for &d in self.directory.keys() {
            match self.observed.get_mut(&d) {
                Some(o) if o.registering.is_some() => {}
                Some(o) if o.active => {
                    let last = o.last_notification.unwrap_or(SimTime::ZERO);
                    if now - last > stale_after(d) {
                        o.active = false;
                        stale.push(d);
                    }
                }
                _ => stale.push(d),
            }
        }
        stale
    }

    /// Translates a notification into a reading frame. Returns `Ok(None)`
    /// for a reading already forwarded.
    pub fn coap_to_ws(&mut self, now: SimTime, notification: &CoapMessage) -> Result<Option<(TimestampedReading, WsFrame)>, AdapterError> {
        self.counters.notifications += 1;
        let Some(pv) = ProcessValue::decode(&notification.payload) else {
            self.counters.adapter_drops += 1;
            return Err(AdapterError::Malformed(format!("{} byte payload", notification.payload.len())));
        };
        if let Some(o) = self.observed.get_mut(&pv.device_id) {
            o.last_notification = Some(now);
            o.active = true;
        }
        if !self.seen.insert((pv.device_id, pv.generated_at.as_nanos())) {
            self.counters.duplicates += 1;
            return Ok(None);
        }
        let reading = TimestampedReading {
            pv,
            gw_arrival: now,
            sc_arrival: None,
        };
        self.counters.frames += 1;
        let frame = WsFrame::text(serde_json::to_vec(&reading.to_doc()).expect("serializable"));
        Ok(Some((reading, frame)))
    }

    /// Translates a cloud command frame into a confirmable PUT for the
    /// device, marked as network control.
    pub fn ws_to_coap(&mut self, frame: &WsFrame) -> Result<OutboundCommand, AdapterError> {
        let r = self.parse_command(frame);
        if r.is_err() {
            self.counters.command_errors += 1;
        }
        r
    }

    fn parse_command(&self, frame: &WsFrame) -> Result<OutboundCommand, AdapterError> {
        if frame.opcode != WsOpcode::Text {
            return Err(AdapterError::NotText);
        }
        let doc: CommandDoc = serde_json::from_slice(&frame.payload).map_err(|e| AdapterError::Malformed(e.to_string()))?;
        if doc.v != JSON_SCHEMA_VERSION {
            return Err(AdapterError::SchemaVersion(doc.v));
        }
        let to = self.device_node(doc.device_id).ok_or(AdapterError::UnknownDevice(doc.device_id))?;
        let body = serde_json::to_vec(&doc).expect("serializable");
        Ok(OutboundCommand {
            to,
            msg: CoapMessage::confirmable(Code::Put, Some(COMMAND_RESOURCE), body),
            dscp: DscpClass::Cs6,
            selector: Selector::CONTROL,
        })
    }

    /// Installs `policy` if it validates; otherwise keeps the current one.
    pub fn apply_policy(&mut self, policy: QosPolicy) -> Result<PolicyAck, Vec<Violation>> {
        if let Err(v) = validate(&policy) {
            self.counters.policies_rejected += 1;
            return Err(v);
        }
        let version = policy.version;
        if self.installed_policy.as_deref() != Some(&policy) {
            self.installed_policy = Some(Arc::new(policy));
        }
        self.counters.policies_applied += 1;
        Ok(PolicyAck::Applied(version))
    }

    /// Handles the body of a policy PUT and returns the reply payload.
    pub fn handle_policy_put(&mut self, body: &[u8]) -> Vec<u8> {
        let ack = match QosPolicy::from_json_bytes(body) {
            Ok(p) => self.apply_policy(p).unwrap_or(PolicyAck::Rejected),
            Err(_) => {
                self.counters.policies_rejected += 1;
                PolicyAck::Rejected
            }
        };
        encode_policy_ack(ack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coap::RetransmitParams;
    use crate::qos::{parse_policy_ack, SensorClass};

    fn gw() -> GatewayState {
        GatewayState::new(0, NodeId(100), [(1, NodeId(10)), (2, NodeId(11))])
    }

    fn notification(pv: ProcessValue) -> CoapMessage {
        CoapMessage::confirmable(Code::Content, None, pv.encode()).with_observe(1)
    }

    #[test]
    fn reading_frame_carries_gateway_time() {
        let mut g = gw();
        let pv = ProcessValue {
            device_id: 1,
            value: 1500.0,
            generated_at: SimTime::from_millis(100),
        };
        let (r, frame) = g.coap_to_ws(SimTime::from_millis(103), &notification(pv)).unwrap().unwrap();
        assert!(r.is_monotonic());
        let doc = ReadingDoc::parse(&frame.payload).unwrap();
        assert_eq!(doc.gw_arrival, 103_000);
        assert_eq!(doc.generated_at, 100_000);
        assert_eq!(doc.value, 1500.0);
        assert_eq!(doc.sc_arrival, None);
        // the same reading again is suppressed
        assert_eq!(g.coap_to_ws(SimTime::from_millis(104), &notification(pv)).unwrap(), None);
        assert_eq!(g.counters.duplicates, 1);
        assert_eq!(g.sessions().count(), 0);
    }

    #[test]
    fn malformed_notification_counted() {
        let mut g = gw();
        let bad = CoapMessage::confirmable(Code::Content, None, vec![1, 2, 3]);
        assert!(g.coap_to_ws(SimTime::ZERO, &bad).is_err());
        assert_eq!(g.counters.adapter_drops, 1);
    }

    #[test]
    fn command_translation() {
        let mut g = gw();
        let cmd = serde_json::json!({"v": 1, "device_id": 1, "command": "set_update_interval", "args": {"ms": 25}});
        let out = g.ws_to_coap(&WsFrame::text(cmd.to_string())).unwrap();
        assert_eq!(out.to, NodeId(10));
        assert_eq!(out.dscp, DscpClass::Cs6);
        assert_eq!(out.msg.code, Code::Put);
        assert_eq!(out.msg.uri_path.as_deref(), Some(COMMAND_RESOURCE));

        let unknown = serde_json::json!({"v": 1, "device_id": 99, "command": "x", "args": null});
        let err = g.ws_to_coap(&WsFrame::text(unknown.to_string())).unwrap_err();
        assert_eq!(err, AdapterError::UnknownDevice(99));
        let reply: serde_json::Value = serde_json::from_slice(&err.to_frame().payload).unwrap();
        assert_eq!(reply["device_id"], 99);
        assert_eq!(g.counters.command_errors, 1);
    }

    #[test]
    fn policy_install_is_atomic_and_idempotent() {
        let mut g = gw();
        assert_eq!(g.mark(Selector::Class(SensorClass::Class1)), DscpClass::Be);
        let p = QosPolicy::standard(3, DscpClass::Af21);
        assert_eq!(g.apply_policy(p.clone()), Ok(PolicyAck::Applied(3)));
        assert_eq!(g.mark(Selector::Class(SensorClass::Class1)), DscpClass::Ef);
        assert_eq!(g.apply_policy(p.clone()), Ok(PolicyAck::Applied(3)));

        let mut broken = p.clone();
        broken.version = 4;
        for r in broken.rules.iter_mut().filter(|r| r.selector == Selector::CONTROL) {
            r.dscp = DscpClass::Ef;
        }
        assert!(g.apply_policy(broken).is_err());
        assert_eq!(g.installed_policy().unwrap().version, 3);

        let reply = g.handle_policy_put(b"{not json");
        assert_eq!(parse_policy_ack(&reply), Some(PolicyAck::Rejected));
        assert_eq!(g.installed_policy().unwrap().version, 3);
    }

    #[test]
    fn registration_bookkeeping() {
        let mut g = gw();
        let mut ep = Endpoint::new(NodeId(100), RetransmitParams::controlled(), 1);
        let mut out = Vec::new();
        assert_eq!(g.establish_observations(&mut ep, SimTime::ZERO, &[1, 2, 7], &mut out), 2);
        // nothing resent while registrations are in flight
        assert_eq!(g.establish_observations(&mut ep, SimTime::ZERO, &[1, 2], &mut out), 0);
        let mids: Vec<u16> = g.registrations.keys().copied().collect();
        assert_eq!(g.on_exchange_done(SimTime::ZERO, mids[0], ExchangeState::Acked), Some(Registration::Active(1)));
        assert_eq!(g.on_exchange_done(SimTime::ZERO, mids[1], ExchangeState::TimedOut), Some(Registration::TimedOut(2)));
        assert_eq!(g.active_observations(), 1);
        assert_eq!(g.stale_devices(SimTime::from_millis(10), |_| Duration::from_secs(1)), vec![2]);
        assert_eq!(g.stale_devices(SimTime::from_secs(2), |_| Duration::from_secs(1)), vec![1, 2]);
    }
}
