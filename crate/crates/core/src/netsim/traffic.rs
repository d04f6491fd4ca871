//! Background load: constant-rate datagram flows and bulk windowed flows,
//! all best effort, from site-local sources to the cloud server.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::event::EventLoop;
use super::network::{NetEvent, Network};
use super::tcp::{TcpOutput, TcpParams, TcpReceiver, TcpSender, TcpStats};
use crate::messages::{Body, ConnId, FlowClass, FlowId, NetPacket, NodeId, Segment, SegmentKind, Transport, STREAM_HEADER_BYTES};
use crate::qos::{DscpClass, Selector};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackgroundKind {
    #[serde(alias = "udp")]
    UdpLike,
    #[serde(alias = "tcp")]
    TcpLike,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundFlowSet {
    pub kind: BackgroundKind,
    pub n_flows: usize,
    pub packet_size: u32,
    /// Per-flow rate for datagram flows.
    pub rate_bps: u64,
    pub tcp: TcpParams,
}

impl BackgroundFlowSet {
    /// Gap between consecutive datagrams of one flow.
    pub fn inter_packet_gap(&self) -> Duration {
        let ns = (u128::from(self.packet_size) * 8 * 1_000_000_000).div_ceil(u128::from(self.rate_bps.max(1)));
        Duration::from_nanos(ns as u64)
    }
}

/// Endpoints and flow ids of one background flow.
#[derive(Debug, Clone, Copy)]
pub struct BgFlow {
    pub data: FlowId,
    /// Flow id carried by acknowledgments (windowed flows only).
    pub ack: FlowId,
    pub src: NodeId,
    pub dst: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrafficEvent {
    Emit(usize),
    Timer(usize, u64),
}

/// Times at which a constant-rate flow emits in `[start, stop)`.
pub fn emission_times(gap: Duration, start: SimTime, stop: SimTime) -> impl Iterator<Item = SimTime> {
    let mut t = start;
    std::iter::from_fn(move || {
        if t >= stop || gap.is_zero() {
            return None;
        }
        let cur = t;
        t += gap;
        Some(cur)
    })
}

pub struct BackgroundTraffic {
    set: BackgroundFlowSet,
    flows: Vec<BgFlow>,
    by_flow_id: HashMap<FlowId, (usize, bool)>,
    senders: Vec<TcpSender>,
    receivers: Vec<TcpReceiver>,
    stop_at: SimTime,
    latencies_ns: Vec<u64>,
    scratch: Vec<TcpOutput>,
}

impl BackgroundTraffic {
    pub fn new(set: BackgroundFlowSet, flows: Vec<BgFlow>, stop_at: SimTime) -> Self {
        let mut by_flow_id = HashMap::new();
        for (i, f) in flows.iter().enumerate() {
            by_flow_id.insert(f.data, (i, false));
            by_flow_id.insert(f.ack, (i, true));
        }
        let (senders, receivers) = if set.kind == BackgroundKind::TcpLike {
            (
                (0..flows.len()).map(|i| TcpSender::bulk(ConnId(i as u32), set.tcp)).collect(),
                (0..flows.len()).map(|_| TcpReceiver::new()).collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        BackgroundTraffic {
            set,
            flows,
            by_flow_id,
            senders,
            receivers,
            stop_at,
            latencies_ns: Vec::new(),
            scratch: Vec::new(),
        }
    }

    pub fn flows(&self) -> &[BgFlow] {
        &self.flows
    }

    pub fn owns(&self, flow: FlowId) -> bool {
        self.by_flow_id.contains_key(&flow)
    }

    /// One-way latencies of delivered data packets, in nanoseconds.
    pub fn latencies_ns(&self) -> &[u64] {
        &self.latencies_ns
    }

    pub fn tcp_stats(&self) -> TcpStats {
        let mut s = TcpStats::default();
        for x in &self.senders {
            s.merge(&x.stats);
        }
        s
    }

    /// Schedules the first emission of every flow, staggered evenly over one
    /// inter-packet gap.
    pub fn start<E: From<TrafficEvent>>(&self, ev: &mut EventLoop<E>, at: SimTime) {
        let n = self.flows.len() as u32;
        let gap = match self.set.kind {
            BackgroundKind::UdpLike => self.set.inter_packet_gap(),
            BackgroundKind::TcpLike => Duration::from_micros(100),
        };
        for i in 0..n {
            ev.schedule(at + gap * i / n, TrafficEvent::Emit(i as usize).into());
        }
    }

    fn data_packet(&self, i: usize, body: Body, transport: Transport) -> NetPacket {
        let f = self.flows[i];
        NetPacket::new(f.src, f.dst, self.set.packet_size, transport, f.data, FlowClass::Background, SimTime::ZERO, body)
            .marked(DscpClass::Be, Some(Selector::BACKGROUND))
    }

    pub fn handle<E: From<NetEvent> + From<TrafficEvent>>(&mut self, net: &mut Network, ev: &mut EventLoop<E>, e: TrafficEvent) {
        let now = ev.now();
        match (self.set.kind, e) {
            (BackgroundKind::UdpLike, TrafficEvent::Emit(i)) => {
                if now >= self.stop_at {
                    return;
                }
                let p = self.data_packet(i, Body::Datagram, Transport::UdpLike);
                net.inject(ev, p);
                ev.schedule(now + self.set.inter_packet_gap(), TrafficEvent::Emit(i).into());
            }
            (BackgroundKind::TcpLike, TrafficEvent::Emit(i)) => {
                if now >= self.stop_at {
                    return;
                }
                let mut out = std::mem::take(&mut self.scratch);
                self.senders[i].open(&mut out);
                self.flush(net, ev, i, &mut out);
                self.scratch = out;
            }
            (BackgroundKind::TcpLike, TrafficEvent::Timer(i, generation)) => {
                if now >= self.stop_at {
                    self.senders[i].stop();
                    return;
                }
                let mut out = std::mem::take(&mut self.scratch);
                self.senders[i].on_timer(generation, &mut out);
                self.flush(net, ev, i, &mut out);
                self.scratch = out;
            }
            (BackgroundKind::UdpLike, TrafficEvent::Timer(..)) => {}
        }
    }

    fn flush<E: From<NetEvent> + From<TrafficEvent>>(&mut self, net: &mut Network, ev: &mut EventLoop<E>, i: usize, out: &mut Vec<TcpOutput>) {
        for o in out.drain(..) {
            match o {
                TcpOutput::Send(seg) => {
                    let p = self.data_packet(i, Body::Segment(seg), Transport::TcpLike);
                    net.inject(ev, p);
                }
                TcpOutput::ArmTimer { after, generation } => {
                    ev.schedule(ev.now() + after, TrafficEvent::Timer(i, generation).into());
                }
            }
        }
    }

    /// Consumes a delivered background packet. Returns false if the packet
    /// does not belong to this traffic set.
    pub fn on_delivered<E: From<NetEvent> + From<TrafficEvent>>(&mut self, net: &mut Network, ev: &mut EventLoop<E>, p: NetPacket) -> bool {
        let Some(&(i, is_ack)) = self.by_flow_id.get(&p.flow_id) else {
            return false;
        };
        let now = ev.now();
        if !is_ack {
            self.latencies_ns.push((now - p.created_at).as_nanos() as u64);
        }
        let Body::Segment(seg) = p.body else {
            return true;
        };
        if is_ack {
            if let SegmentKind::Ack { next_expected } = seg.kind {
                if now >= self.stop_at {
                    self.senders[i].stop();
                    return true;
                }
                let mut out = std::mem::take(&mut self.scratch);
                self.senders[i].on_ack(next_expected, &mut out);
                self.flush(net, ev, i, &mut out);
                self.scratch = out;
            }
        } else {
            let conn = seg.conn;
            let (next_expected, _) = self.receivers[i].on_data(seg);
            let f = self.flows[i];
            let ack = NetPacket::new(
                f.dst,
                f.src,
                STREAM_HEADER_BYTES,
                Transport::TcpLike,
                f.ack,
                FlowClass::Background,
                SimTime::ZERO,
                Body::Segment(Segment {
                    conn,
                    seq: 0,
                    kind: SegmentKind::Ack { next_expected },
                }),
            )
            .marked(DscpClass::Be, Some(Selector::BACKGROUND));
            net.inject(ev, ack);
        }
        true
    }
}
