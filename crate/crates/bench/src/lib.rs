//! Fixtures shared by the benchmarks.

use sdiiot_core::harness::Scenario;
use sdiiot_core::messages::{Body, Transport};
use sdiiot_core::netsim::BackgroundKind;
use sdiiot_core::{CoapMessage, FlowClass, FlowId, NetPacket, NodeId, SimTime};

/// A short run of the default deployment with `n_flows` background flows
/// per site.
pub fn scenario(kind: BackgroundKind, n_flows: usize, duration_s: f64) -> Scenario {
    let mut s = Scenario {
        duration_s,
        replications: 1,
        seed: 1,
        ..Scenario::default()
    };
    s.background.kind = kind;
    s.background.n_flows = n_flows;
    s
}

/// A best-effort datagram of `size` bytes.
pub fn datagram(size: u32) -> NetPacket {
    NetPacket::new(NodeId(0), NodeId(1), size, Transport::UdpLike, FlowId(0), FlowClass::Background, SimTime::ZERO, Body::Datagram)
}

/// A typical process-value notification.
pub fn notification() -> CoapMessage {
    CoapMessage::confirmable(sdiiot_core::messages::Code::Content, None, vec![0; 20]).with_observe(1)
}
