//! DiffServ classes, the sensor-class to QoS-group mapping of the process
//! automation domain, and the policies the sensor cloud pushes to gateways.
//!
//! A [`QosPolicy`] is an ordered rule table. Each rule binds a traffic
//! selector (an ISA-100.11a sensor class, network control, or background)
//! to a QoS group, a DSCP mark and a switch queue. Senders mark packets
//! with the rule's DSCP; switches classify on the selector tag the packet
//! carries and fall back to the DSCP for untagged packets.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coap::{Action, Endpoint, ExchangeState};
use crate::messages::{Code, CoapMessage, NetPacket, NodeId};
use crate::time::SimTime;

/// Queue that receives everything not matched by a policy rule.
pub const BEST_EFFORT_QUEUE: u8 = 3;

/// Number of egress queues per switch port.
pub const QUEUE_COUNT: usize = 4;

/// Version tag of the policy JSON document.
pub const POLICY_SCHEMA_VERSION: u32 = 1;

/// CoAP resource gateways expose for policy installation.
pub const POLICY_RESOURCE: &str = "qos/policy";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DscpClass {
    #[serde(rename = "EF")]
    Ef,
    #[serde(rename = "CS6")]
    Cs6,
    #[serde(rename = "CS4")]
    Cs4,
    #[serde(rename = "AF21")]
    Af21,
    #[serde(rename = "AF22")]
    Af22,
    #[serde(rename = "AF23")]
    Af23,
    #[serde(rename = "BE")]
    Be,
}

impl DscpClass {
    pub const ALL: [DscpClass; 7] = [
        DscpClass::Ef,
        DscpClass::Cs6,
        DscpClass::Cs4,
        DscpClass::Af21,
        DscpClass::Af22,
        DscpClass::Af23,
        DscpClass::Be,
    ];

    /// The 6-bit DiffServ code point.
    pub const fn code_point(self) -> u8 {
        match self {
            DscpClass::Ef => 46,
            DscpClass::Cs6 => 48,
            DscpClass::Cs4 => 32,
            DscpClass::Af21 => 18,
            DscpClass::Af22 => 20,
            DscpClass::Af23 => 22,
            DscpClass::Be => 0,
        }
    }

    pub fn from_code_point(cp: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.code_point() == cp)
    }

    pub const fn name(self) -> &'static str {
        match self {
            DscpClass::Ef => "EF",
            DscpClass::Cs6 => "CS6",
            DscpClass::Cs4 => "CS4",
            DscpClass::Af21 => "AF21",
            DscpClass::Af22 => "AF22",
            DscpClass::Af23 => "AF23",
            DscpClass::Be => "BE",
        }
    }
}

impl fmt::Display for DscpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DscpClass {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| PolicyError::UnknownDscp(s.to_string()))
    }
}

/// ISA-100.11a sensor class, Class 0 (safety-critical control) through
/// Class 5 (monitoring).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SensorClass {
    #[serde(rename = "CLASS0")]
    Class0,
    #[serde(rename = "CLASS1")]
    Class1,
    #[serde(rename = "CLASS2")]
    Class2,
    #[serde(rename = "CLASS3")]
    Class3,
    #[serde(rename = "CLASS4")]
    Class4,
    #[serde(rename = "CLASS5")]
    Class5,
}

impl SensorClass {
    pub const ALL: [SensorClass; 6] = [
        SensorClass::Class0,
        SensorClass::Class1,
        SensorClass::Class2,
        SensorClass::Class3,
        SensorClass::Class4,
        SensorClass::Class5,
    ];

    pub const fn index(self) -> u8 {
        self as u8
    }

    /// QoS group of the class.
    pub const fn group(self) -> QosGroup {
        match self {
            SensorClass::Class0 | SensorClass::Class1 => QosGroup::G1,
            SensorClass::Class2 | SensorClass::Class3 => QosGroup::G2,
            SensorClass::Class4 | SensorClass::Class5 => QosGroup::G3,
        }
    }
}

impl fmt::Display for SensorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Class{}", self.index())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QosGroup {
    G1,
    G2,
    G3,
}

impl QosGroup {
    /// Dedicated switch queue of the group.
    pub const fn queue(self) -> u8 {
        match self {
            QosGroup::G1 => 0,
            QosGroup::G2 => 1,
            QosGroup::G3 => 2,
        }
    }
}

/// Group column of a policy rule. Extends the three sensor groups with the
/// network-control and best-effort aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleGroup {
    G1,
    G2,
    G3,
    #[serde(rename = "CONTROL")]
    Control,
    #[serde(rename = "BE")]
    BestEffort,
}

impl From<QosGroup> for RuleGroup {
    fn from(g: QosGroup) -> Self {
        match g {
            QosGroup::G1 => RuleGroup::G1,
            QosGroup::G2 => RuleGroup::G2,
            QosGroup::G3 => RuleGroup::G3,
        }
    }
}

impl RuleGroup {
    /// The queue this group must be served from. Network control shares the
    /// strict-top queue with G1.
    pub const fn queue(self) -> u8 {
        match self {
            RuleGroup::G1 | RuleGroup::Control => 0,
            RuleGroup::G2 => 1,
            RuleGroup::G3 => 2,
            RuleGroup::BestEffort => BEST_EFFORT_QUEUE,
        }
    }
}

impl fmt::Display for RuleGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleGroup::G1 => "G1",
            RuleGroup::G2 => "G2",
            RuleGroup::G3 => "G3",
            RuleGroup::Control => "CONTROL",
            RuleGroup::BestEffort => "BE",
        })
    }
}

/// What a rule matches: the sensor class of the originating device, network
/// control traffic, or background load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Selector {
    Class(SensorClass),
    Flow(FlowSelector),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FlowSelector {
    #[serde(rename = "CONTROL")]
    Control,
    #[serde(rename = "BACKGROUND")]
    Background,
}

impl Selector {
    pub const CONTROL: Selector = Selector::Flow(FlowSelector::Control);
    pub const BACKGROUND: Selector = Selector::Flow(FlowSelector::Background);
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Class(c) => write!(f, "CLASS{}", c.index()),
            Selector::Flow(FlowSelector::Control) => f.write_str("CONTROL"),
            Selector::Flow(FlowSelector::Background) => f.write_str("BACKGROUND"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRule {
    pub selector: Selector,
    pub group: RuleGroup,
    pub dscp: DscpClass,
    pub queue: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QosPolicy {
    pub version: u32,
    pub rules: Vec<PolicyRule>,
}

/// Wire form of a policy document.
#[derive(Serialize, Deserialize)]
struct PolicyDocument {
    v: u32,
    version: u32,
    rules: Vec<PolicyRule>,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("malformed policy document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported policy schema version {0}")]
    SchemaVersion(u32),
    #[error("unknown DSCP class {0:?}")]
    UnknownDscp(String),
    #[error("policy rejected: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateSelector(Selector),
    ControlNotCs6(DscpClass),
    ControlGroup(RuleGroup),
    BackgroundNotBestEffort { dscp: DscpClass, queue: u8 },
    QueueOutOfRange { selector: Selector, queue: u8 },
    QueueGroupMismatch { selector: Selector, group: RuleGroup, queue: u8 },
    ClassGroupMismatch { class: SensorClass, group: RuleGroup },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateSelector(s) => write!(f, "duplicate selector {s}"),
            Violation::ControlNotCs6(d) => write!(f, "CONTROL must map to CS6 (found {d})"),
            Violation::ControlGroup(g) => write!(f, "CONTROL selector must use group CONTROL (found {g})"),
            Violation::BackgroundNotBestEffort { dscp, queue } => write!(
                f,
                "BACKGROUND must map to BE on queue {BEST_EFFORT_QUEUE} (found {dscp} on queue {queue})"
            ),
            Violation::QueueOutOfRange { selector, queue } => {
                write!(f, "{selector}: queue {queue} out of range 0..={BEST_EFFORT_QUEUE}")
            }
            Violation::QueueGroupMismatch { selector, group, queue } => write!(
                f,
                "{selector}: group {group} must use queue {} (found {queue})",
                group.queue()
            ),
            Violation::ClassGroupMismatch { class, group } => write!(
                f,
                "{class} belongs to {:?}, not {group}",
                class.group()
            ),
        }
    }
}

/// Standard DSCP for a sensor class, with the group-3 choice left to the
/// caller (`CS4` or one of `AF21`-`AF23`).
pub fn dscp_for_class_with(class: SensorClass, group3_dscp: DscpClass) -> DscpClass {
    match class.group() {
        QosGroup::G1 => DscpClass::Ef,
        QosGroup::G2 => DscpClass::Cs4,
        QosGroup::G3 => group3_dscp,
    }
}

/// Standard DSCP for a sensor class using the default group-3 mark, `AF21`.
pub fn dscp_for_class(class: SensorClass) -> DscpClass {
    dscp_for_class_with(class, DscpClass::Af21)
}

/// Tolerance levels of a QoS group profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tolerance {
    VeryLow,
    Low,
    Tolerant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrafficPattern {
    FixedSizeConstantRate,
    VariableInelastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QosGroupProfile {
    pub group: RuleGroup,
    pub loss_tolerance: Tolerance,
    pub delay_tolerance: Tolerance,
    pub jitter_tolerance: Tolerance,
    pub traffic: TrafficPattern,
}

/// Loss/delay/jitter tolerances and traffic shape of each group.
pub fn group_profile(group: RuleGroup) -> Option<QosGroupProfile> {
    use Tolerance::*;
    use TrafficPattern::*;
    let (loss, delay, jitter, traffic) = match group {
        RuleGroup::G1 => (VeryLow, VeryLow, VeryLow, FixedSizeConstantRate),
        RuleGroup::G2 => (VeryLow, VeryLow, Low, VariableInelastic),
        RuleGroup::G3 => (VeryLow, Low, Low, VariableInelastic),
        RuleGroup::Control => (Low, Low, Tolerant, VariableInelastic),
        RuleGroup::BestEffort => return None,
    };
    Some(QosGroupProfile {
        group,
        loss_tolerance: loss,
        delay_tolerance: delay,
        jitter_tolerance: jitter,
        traffic,
    })
}

impl QosPolicy {
    /// The standard policy: one rule per sensor class, network control on
    /// CS6, background on best effort.
    pub fn standard(version: u32, group3_dscp: DscpClass) -> Self {
        let mut rules: Vec<PolicyRule> = SensorClass::ALL
            .into_iter()
            .map(|class| {
                let group = class.group();
                PolicyRule {
                    selector: Selector::Class(class),
                    group: group.into(),
                    dscp: dscp_for_class_with(class, group3_dscp),
                    queue: group.queue(),
                }
            })
            .collect();
        rules.push(PolicyRule {
            selector: Selector::CONTROL,
            group: RuleGroup::Control,
            dscp: DscpClass::Cs6,
            queue: RuleGroup::Control.queue(),
        });
        rules.push(PolicyRule {
            selector: Selector::BACKGROUND,
            group: RuleGroup::BestEffort,
            dscp: DscpClass::Be,
            queue: BEST_EFFORT_QUEUE,
        });
        QosPolicy { version, rules }
    }

    pub fn rule_for(&self, selector: Selector) -> Option<&PolicyRule> {
        self.rules.iter().find(|r| r.selector == selector)
    }

    /// DSCP a sender marks traffic of `selector` with. Unmatched traffic is
    /// left best effort.
    pub fn mark(&self, selector: Selector) -> DscpClass {
        self.rule_for(selector).map_or(DscpClass::Be, |r| r.dscp)
    }

    pub fn to_json(&self) -> String {
        let doc = PolicyDocument {
            v: POLICY_SCHEMA_VERSION,
            version: self.version,
            rules: self.rules.clone(),
        };
        serde_json::to_string(&doc).expect("policy serialization is infallible")
    }

    /// Parses a policy document. Does not validate the rules; see
    /// [`validate`].
    pub fn from_json(s: &str) -> Result<Self, PolicyError> {
        Self::from_json_bytes(s.as_bytes())
    }

    pub fn from_json_bytes(b: &[u8]) -> Result<Self, PolicyError> {
        let doc: PolicyDocument = serde_json::from_slice(b)?;
        if doc.v != POLICY_SCHEMA_VERSION {
            return Err(PolicyError::SchemaVersion(doc.v));
        }
        Ok(QosPolicy {
            version: doc.version,
            rules: doc.rules,
        })
    }
}

/// Checks every policy invariant and reports all violations found.
pub fn validate(policy: &QosPolicy) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let mut seen: BTreeMap<Selector, usize> = BTreeMap::new();

    for rule in &policy.rules {
        let count = seen.entry(rule.selector).or_insert(0);
        *count += 1;
        if *count == 2 {
            violations.push(Violation::DuplicateSelector(rule.selector));
        }

        if rule.queue > BEST_EFFORT_QUEUE {
            violations.push(Violation::QueueOutOfRange {
                selector: rule.selector,
                queue: rule.queue,
            });
        } else if rule.queue != rule.group.queue() {
            violations.push(Violation::QueueGroupMismatch {
                selector: rule.selector,
                group: rule.group,
                queue: rule.queue,
            });
        }

        match rule.selector {
            Selector::Flow(FlowSelector::Control) => {
                if rule.dscp != DscpClass::Cs6 {
                    violations.push(Violation::ControlNotCs6(rule.dscp));
                }
                if rule.group != RuleGroup::Control {
                    violations.push(Violation::ControlGroup(rule.group));
                }
            }
            Selector::Flow(FlowSelector::Background) => {
                if rule.dscp != DscpClass::Be || rule.queue != BEST_EFFORT_QUEUE {
                    violations.push(Violation::BackgroundNotBestEffort {
                        dscp: rule.dscp,
                        queue: rule.queue,
                    });
                }
            }
            Selector::Class(class) => {
                if rule.group != RuleGroup::from(class.group()) {
                    violations.push(Violation::ClassGroupMismatch {
                        class,
                        group: rule.group,
                    });
                }
            }
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Egress queue for `packet` under `policy`: the rule matching the packet's
/// selector tag, otherwise the first rule carrying the packet's DSCP,
/// otherwise best effort.
pub fn classify(packet: &NetPacket, policy: &QosPolicy) -> u8 {
    if let Some(selector) = packet.selector {
        if let Some(rule) = policy.rule_for(selector) {
            return rule.queue;
        }
    }
    if packet.dscp != DscpClass::Be {
        if let Some(rule) = policy.rules.iter().find(|r| r.dscp == packet.dscp) {
            return rule.queue;
        }
    }
    BEST_EFFORT_QUEUE
}

/// Outcome of pushing a policy to one gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionOutcome {
    Applied(u32),
    Rejected,
    TimedOut,
}

/// The sensor-cloud QoS controller: serializes a policy and pushes it to
/// gateways as confirmable PUTs, then collects per-gateway outcomes as the
/// exchanges resolve.
#[derive(Debug, Default)]
pub struct PolicyController {
    in_flight: BTreeMap<u16, NodeId>,
    outcomes: BTreeMap<NodeId, DistributionOutcome>,
}

impl PolicyController {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts distribution of `policy` to `gateways`. Returns the actions the
    /// owning endpoint must carry out; each transmitted message must be
    /// marked [`DscpClass::Cs6`].
    pub fn distribute(
        &mut self,
        endpoint: &mut Endpoint,
        now: SimTime,
        gateways: &[NodeId],
        policy: &QosPolicy,
        out: &mut Vec<Action>,
    ) -> Result<(), PolicyError> {
        validate(policy).map_err(PolicyError::Invalid)?;
        let body = policy.to_json().into_bytes();
        for &gw in gateways {
            let msg = CoapMessage::confirmable(Code::Put, Some(POLICY_RESOURCE), body.clone());
            let mid = endpoint
                .send_confirmable(now, gw, msg, out)
                .expect("PUT is confirmable");
            self.in_flight.insert(mid, gw);
            self.outcomes.remove(&gw);
        }
        Ok(())
    }

    /// Feeds a completed exchange back. Returns the gateway and its outcome if
    /// the exchange belonged to a distribution.
    pub fn on_completed(
        &mut self,
        message_id: u16,
        state: ExchangeState,
        ack: Option<&CoapMessage>,
    ) -> Option<(NodeId, DistributionOutcome)> {
        let gw = self.in_flight.remove(&message_id)?;
        let outcome = match state {
            ExchangeState::Acked => match ack.and_then(|a| parse_policy_ack(&a.payload)) {
                Some(PolicyAck::Applied(v)) => DistributionOutcome::Applied(v),
                Some(PolicyAck::Rejected) | None => DistributionOutcome::Rejected,
            },
            ExchangeState::TimedOut | ExchangeState::Waiting => DistributionOutcome::TimedOut,
        };
        self.outcomes.insert(gw, outcome);
        Some((gw, outcome))
    }

    pub fn is_settled(&self) -> bool {
        self.in_flight.is_empty()
    }

    pub fn outcomes(&self) -> &BTreeMap<NodeId, DistributionOutcome> {
        &self.outcomes
    }
}

/// Payload of a gateway's reply to a policy PUT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyAck {
    Applied(u32),
    Rejected,
}

#[derive(Serialize, Deserialize)]
struct PolicyAckDoc {
    v: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    applied: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    error: Option<String>,
}

pub fn encode_policy_ack(ack: PolicyAck) -> Vec<u8> {
    let doc = match ack {
        PolicyAck::Applied(v) => PolicyAckDoc {
            v: POLICY_SCHEMA_VERSION,
            applied: Some(v),
            error: None,
        },
        PolicyAck::Rejected => PolicyAckDoc {
            v: POLICY_SCHEMA_VERSION,
            applied: None,
            error: Some("rejected".into()),
        },
    };
    serde_json::to_vec(&doc).expect("ack serialization is infallible")
}

pub fn parse_policy_ack(b: &[u8]) -> Option<PolicyAck> {
    let doc: PolicyAckDoc = serde_json::from_slice(b).ok()?;
    match (doc.applied, doc.error) {
        (Some(v), None) => Some(PolicyAck::Applied(v)),
        (None, Some(_)) => Some(PolicyAck::Rejected),
        _ => None,
    }
}
