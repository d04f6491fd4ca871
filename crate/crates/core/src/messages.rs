//! Application messages and the simulated wire envelope.
//!
//! CoAP and WebSocket messages are modelled at the level the experiments
//! need: kinds, identifiers, observe sequencing, payloads, and a
//! deterministic byte-size model. No octet-level encoding is produced.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::qos::{DscpClass, Selector};
use crate::time::SimTime;

/// Wire size of an empty CoAP ACK, headers included.
pub const COAP_BASE_SIZE: usize = 46;
/// Bytes added per CoAP option present.
pub const COAP_OPTION_SIZE: usize = 4;
/// Fixed WebSocket framing overhead (header plus masking key).
pub const WS_HEADER_OVERHEAD: usize = 8;
/// Per-packet overhead of a secured (DTLS/TLS) flow.
pub const SECURE_OVERHEAD_BYTES: u32 = 29;
/// Transport and network headers carried by every stream segment.
pub const STREAM_HEADER_BYTES: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowId(pub u32);

/// Traffic aggregate a packet is accounted under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FlowClass {
    #[serde(rename = "COAP_PV")]
    CoapPv,
    #[serde(rename = "WS_READING")]
    WsReading,
    #[serde(rename = "CONTROL")]
    Control,
    #[serde(rename = "BACKGROUND")]
    Background,
}

impl FlowClass {
    pub const ALL: [FlowClass; 4] = [
        FlowClass::CoapPv,
        FlowClass::WsReading,
        FlowClass::Control,
        FlowClass::Background,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            FlowClass::CoapPv => "COAP_PV",
            FlowClass::WsReading => "WS_READING",
            FlowClass::Control => "CONTROL",
            FlowClass::Background => "BACKGROUND",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for FlowClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Con,
    Non,
    Ack,
    Rst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Code {
    Get,
    Put,
    Post,
    Content,
    Empty,
}

/// Opaque CoAP token of 0 to 8 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Token {
    len: u8,
    bytes: [u8; 8],
}

impl Token {
    pub const EMPTY: Token = Token { len: 0, bytes: [0; 8] };

    /// Returns `None` if `b` is longer than 8 bytes.
    pub fn new(b: &[u8]) -> Option<Self> {
        if b.len() > 8 {
            return None;
        }
        let mut bytes = [0; 8];
        bytes[..b.len()].copy_from_slice(b);
        Some(Token {
            len: b.len() as u8,
            bytes,
        })
    }

    /// Four-byte token carrying `v`.
    pub fn from_u32(v: u32) -> Self {
        Token::new(&v.to_be_bytes()).expect("4 bytes fit")
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoapMessage {
    pub kind: MessageKind,
    pub code: Code,
    pub message_id: u16,
    pub token: Token,
    pub observe: Option<u32>,
    pub uri_path: Option<String>,
    pub payload: Vec<u8>,
}

impl CoapMessage {
    /// A confirmable request or notification. The message id is assigned by
    /// the sending endpoint.
    pub fn confirmable(code: Code, uri_path: Option<&str>, payload: Vec<u8>) -> Self {
        CoapMessage {
            kind: MessageKind::Con,
            code,
            message_id: 0,
            token: Token::EMPTY,
            observe: None,
            uri_path: uri_path.map(str::to_owned),
            payload,
        }
    }

    pub fn with_token(mut self, token: Token) -> Self {
        self.token = token;
        self
    }

    pub fn with_observe(mut self, seq: u32) -> Self {
        self.observe = Some(seq);
        self
    }

    /// Empty ACK answering `self`.
    pub fn empty_ack(&self) -> CoapMessage {
        CoapMessage {
            kind: MessageKind::Ack,
            code: Code::Empty,
            message_id: self.message_id,
            token: Token::EMPTY,
            observe: None,
            uri_path: None,
            payload: Vec::new(),
        }
    }

    /// ACK answering `self` with a piggybacked response.
    pub fn piggybacked_ack(&self, code: Code, observe: Option<u32>, payload: Vec<u8>) -> CoapMessage {
        if code == Code::Empty {
            return self.empty_ack();
        }
        CoapMessage {
            kind: MessageKind::Ack,
            code,
            message_id: self.message_id,
            token: self.token,
            observe,
            uri_path: None,
            payload,
        }
    }

    pub fn reset_for(&self) -> CoapMessage {
        CoapMessage {
            kind: MessageKind::Rst,
            code: Code::Empty,
            message_id: self.message_id,
            token: Token::EMPTY,
            observe: None,
            uri_path: None,
            payload: Vec::new(),
        }
    }

    pub fn option_count(&self) -> usize {
        usize::from(self.observe.is_some()) + usize::from(self.uri_path.is_some())
    }

    pub fn encoded_size(&self) -> usize {
        encoded_size(self)
    }
}

/// Byte-size model: 46 bytes for the empty exchange skeleton plus the payload
/// plus four bytes per option.
pub fn encoded_size(msg: &CoapMessage) -> usize {
    COAP_BASE_SIZE + msg.payload.len() + COAP_OPTION_SIZE * msg.option_count()
}

/// True iff `ack` acknowledges the confirmable `con`.
pub fn match_ack(con: &CoapMessage, ack: &CoapMessage) -> bool {
    debug_assert_eq!(con.kind, MessageKind::Con);
    ack.kind == MessageKind::Ack && ack.message_id == con.message_id
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WsOpcode {
    Text,
    Binary,
    Ping,
    Pong,
    Close,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WsFrame {
    pub opcode: WsOpcode,
    pub payload: Vec<u8>,
}

impl WsFrame {
    pub fn text(payload: impl Into<Vec<u8>>) -> Self {
        WsFrame {
            opcode: WsOpcode::Text,
            payload: payload.into(),
        }
    }

    pub fn encoded_size(&self) -> usize {
        self.payload.len() + WS_HEADER_OVERHEAD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transport {
    UdpLike,
    TcpLike,
}

/// Identifies one TCP-like connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConnId(pub u32);

#[derive(Debug, Clone, PartialEq)]
pub enum SegmentKind {
    /// Data segment; WebSocket sessions carry one frame per segment.
    Data { frame: Option<WsFrame>, queued_at: SimTime },
    /// Cumulative acknowledgment: every segment below `next_expected` arrived.
    Ack { next_expected: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub conn: ConnId,
    pub seq: u64,
    pub kind: SegmentKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Coap(CoapMessage),
    Segment(Segment),
    /// Opaque datagram (background load).
    Datagram,
}

/// Where the time between creation and delivery went.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DelayBreakdown {
    pub processing_ns: u64,
    pub queuing_ns: u64,
    pub transmission_ns: u64,
    pub propagation_ns: u64,
}

impl DelayBreakdown {
    pub fn total_ns(&self) -> u64 {
        self.processing_ns + self.queuing_ns + self.transmission_ns + self.propagation_ns
    }
}

/// A packet in flight through the simulated network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetPacket {
    pub id: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub dscp: DscpClass,
    /// Traffic selector tag switches classify on.
    pub selector: Option<Selector>,
    pub size_bytes: u32,
    pub transport: Transport,
    pub flow_id: FlowId,
    pub flow_class: FlowClass,
    pub created_at: SimTime,
    /// Latest hop's enqueue time.
    pub enqueued_at: SimTime,
    /// Latest hop's dequeue time.
    pub dequeued_at: SimTime,
    pub delivered_at: Option<SimTime>,
    pub hops: u16,
    pub delays: DelayBreakdown,
    pub body: Body,
}

impl NetPacket {
    /// # Panics
    /// If `size_bytes` is zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        src: NodeId,
        dst: NodeId,
        size_bytes: u32,
        transport: Transport,
        flow_id: FlowId,
        flow_class: FlowClass,
        created_at: SimTime,
        body: Body,
    ) -> Self {
        assert!(size_bytes > 0, "packets carry at least one byte");
        NetPacket {
            id: 0,
            src,
            dst,
            dscp: DscpClass::Be,
            selector: None,
            size_bytes,
            transport,
            flow_id,
            flow_class,
            created_at,
            enqueued_at: created_at,
            dequeued_at: created_at,
            delivered_at: None,
            hops: 0,
            delays: DelayBreakdown::default(),
            body,
        }
    }

    pub fn marked(mut self, dscp: DscpClass, selector: Option<Selector>) -> Self {
        self.dscp = dscp;
        self.selector = selector;
        self
    }

    pub fn coap(&self) -> Option<&CoapMessage> {
        match &self.body {
            Body::Coap(m) => Some(m),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn con(id: u16) -> CoapMessage {
        let mut m = CoapMessage::confirmable(Code::Put, None, vec![]);
        m.message_id = id;
        m
    }

    #[test]
    fn empty_ack_is_46_bytes() {
        let ack = con(1).empty_ack();
        assert_eq!(encoded_size(&ack), 46);
        assert!(ack.payload.is_empty());
        assert_eq!(ack.code, Code::Empty);
    }

    #[test]
    fn bare_con_is_46_bytes() {
        assert_eq!(encoded_size(&con(3)), 46);
    }

    #[test]
    fn process_value_con_is_under_100_bytes() {
        let m = CoapMessage::confirmable(Code::Content, Some("pv"), vec![0; 40]).with_observe(3);
        assert_eq!(m.option_count(), 2);
        assert_eq!(encoded_size(&m), 94);
        assert!(encoded_size(&m) < 100);
    }

    #[test]
    fn ack_matching() {
        let c = con(7);
        assert!(match_ack(&c, &c.empty_ack()));
        assert!(!match_ack(&c, &con(8).empty_ack()));
        assert!(!match_ack(&c, &c.reset_for()));
    }

    #[test]
    fn responses_answer_their_request() {
        let c = con(42).with_token(Token::from_u32(9));
        assert_eq!(c.empty_ack().message_id, 42);
        assert_eq!(c.reset_for().message_id, 42);
        let p = c.piggybacked_ack(Code::Content, Some(0), b"x".to_vec());
        assert_eq!((p.kind, p.message_id, p.token), (MessageKind::Ack, 42, c.token));
        assert_eq!(c.piggybacked_ack(Code::Empty, None, b"dropped".to_vec()), c.empty_ack());
    }

    #[test]
    fn ws_frame_overhead() {
        assert_eq!(WsFrame::text("abc").encoded_size(), 11);
        assert_eq!(WsFrame::text("").encoded_size(), 8);
    }

    #[test]
    fn token_bounds() {
        assert!(Token::new(&[0; 9]).is_none());
        assert_eq!(Token::new(&[1, 2]).unwrap().as_bytes(), &[1, 2]);
        assert!(Token::EMPTY.is_empty());
    }

    #[test]
    #[should_panic]
    fn zero_sized_packet_rejected() {
        NetPacket::new(NodeId(0), NodeId(1), 0, Transport::UdpLike, FlowId(0), FlowClass::Background, SimTime::ZERO, Body::Datagram);
    }

    fn arb_message() -> impl Strategy<Value = CoapMessage> {
        (
            prop_oneof![Just(MessageKind::Con), Just(MessageKind::Non), Just(MessageKind::Ack), Just(MessageKind::Rst)],
            prop_oneof![Just(Code::Get), Just(Code::Put), Just(Code::Post), Just(Code::Content), Just(Code::Empty)],
            any::<u16>(),
            proptest::collection::vec(any::<u8>(), 0..=8),
            proptest::option::of(any::<u32>()),
            proptest::option::of("[a-z/]{0,12}"),
            proptest::collection::vec(any::<u8>(), 0..64),
        )
            .prop_map(|(kind, code, message_id, token, observe, uri_path, payload)| CoapMessage {
                kind,
                code,
                message_id,
                token: Token::new(&token).unwrap(),
                observe,
                uri_path,
                payload,
            })
    }

    proptest! {
        #[test]
        fn field_round_trip(m in arb_message()) {
            let s = serde_json::to_string(&m).unwrap();
            let back: CoapMessage = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(encoded_size(&back), encoded_size(&m));
            prop_assert_eq!(back, m);
        }

        #[test]
        fn size_monotone_in_payload(m in arb_message(), extra in 0usize..200) {
            let mut bigger = m.clone();
            bigger.payload.extend(std::iter::repeat_n(0, extra));
            prop_assert!(encoded_size(&bigger) >= encoded_size(&m));
            prop_assert_eq!(encoded_size(&bigger) - encoded_size(&m), extra);
        }
    }
}
