//! Packet forwarding over a [`Topology`]: per-port priority queues,
//! serialization, propagation, loss and tracing.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::event::EventLoop;
use super::queue::{PriorityQueueSet, QueueConfig, Serve};
use super::topology::{LossModel, NodeSpec, Topology, WanPath};
use crate::messages::{FlowClass, FlowId, NetPacket, NodeId};
use crate::qos::{classify, QosPolicy, BEST_EFFORT_QUEUE};
use crate::time::{nanos, SimTime};

pub type PortId = u32;
const NO_ROUTE: u32 = u32::MAX;

#[derive(Debug)]
pub enum NetEvent {
    Arrive { node: NodeId, packet: Box<NetPacket> },
    TxDone(PortId),
    Wake(PortId, SimTime),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Overflow,
    Loss,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Overflow => "overflow",
            DropReason::Loss => "loss",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Enqueue,
    Dequeue,
    Drop,
    Deliver,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TraceEvent::Enqueue => "enqueue",
            TraceEvent::Dequeue => "dequeue",
            TraceEvent::Drop => "drop",
            TraceEvent::Deliver => "deliver",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub node: NodeId,
    pub event: TraceEvent,
    pub packet_id: u64,
    pub flow_id: FlowId,
    pub flow_class: FlowClass,
    pub queue: Option<u8>,
    pub reason: Option<DropReason>,
}

/// Writes a trace as CSV with columns time_us,node,event,flow_id,queue,reason.
pub fn write_trace_csv<W: io::Write>(records: &[TraceRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time_us", "node", "event", "flow_id", "queue", "reason"])?;
    for r in records {
        w.write_record([
            format!("{:.3}", r.time.as_micros_f64()),
            r.node.0.to_string(),
            r.event.to_string(),
            r.flow_id.0.to_string(),
            r.queue.map(|q| q.to_string()).unwrap_or_default(),
            r.reason.map(|x| x.as_str().to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PacketCounts {
    pub injected: u64,
    pub delivered: u64,
    pub dropped_overflow: u64,
    pub dropped_loss: u64,
}

impl PacketCounts {
    pub fn dropped(&self) -> u64 {
        self.dropped_overflow + self.dropped_loss
    }

    pub fn in_flight(&self) -> u64 {
        self.injected - self.delivered - self.dropped()
    }

    pub fn merge(&mut self, o: &PacketCounts) {
        self.injected += o.injected;
        self.delivered += o.delivered;
        self.dropped_overflow += o.dropped_overflow;
        self.dropped_loss += o.dropped_loss;
    }
}

/// One direction of a link: the egress port of `from` towards `to`.
#[derive(Debug)]
pub struct Port {
    pub from: NodeId,
    pub to: NodeId,
    pub bandwidth_bps: u64,
    pub propagation: std::time::Duration,
    pub wan: Option<WanPath>,
    pub loss: LossModel,
    transmissions: u64,
    pub queues: PriorityQueueSet,
    classifier: Option<Arc<QosPolicy>>,
    busy: bool,
    wake_at: Option<SimTime>,
    pub bytes_sent: u64,
}

impl Port {
    fn queue_for(&self, p: &NetPacket) -> u8 {
        match (&self.classifier, self.wan) {
            (Some(policy), None) => classify(p, policy),
            _ => BEST_EFFORT_QUEUE,
        }
    }

    /// Serialization time of `bytes`, rounded up to whole nanoseconds.
    pub fn transmission_ns(&self, bytes: u32) -> u64 {
        (u128::from(bytes) * 8 * 1_000_000_000).div_ceil(u128::from(self.bandwidth_bps)) as u64
    }
}

pub struct Network {
    nodes: Vec<NodeSpec>,
    ports: Vec<Port>,
    port_index: HashMap<(NodeId, NodeId), PortId>,
    next_hop: Vec<u32>,
    rng: ChaCha8Rng,
    next_packet_id: u64,
    flows: Vec<PacketCounts>,
    classes: [PacketCounts; 4],
    trace: Option<Vec<TraceRecord>>,
}

impl Network {
    pub fn new(topology: &Topology, queues: &QueueConfig, seed: u64) -> Self {
        let mut ports = Vec::new();
        let mut port_index = HashMap::new();
        for l in &topology.links {
            for (from, to) in [(l.a, l.b), (l.b, l.a)] {
                port_index.insert((from, to), ports.len() as PortId);
                ports.push(Port {
                    from,
                    to,
                    bandwidth_bps: l.bandwidth_bps,
                    propagation: l.propagation,
                    wan: l.wan,
                    loss: l.loss.clone(),
                    transmissions: 0,
                    queues: PriorityQueueSet::new(queues),
                    classifier: None,
                    busy: false,
                    wake_at: None,
                    bytes_sent: 0,
                });
            }
        }
        let n = topology.nodes.len();
        let adj = topology.adjacency();
        let mut next_hop = vec![NO_ROUTE; n * n];
        // BFS outward from each destination; the first discovery of a node
        // fixes its next hop towards that destination.
        for dst in 0..n {
            let mut seen = vec![false; n];
            seen[dst] = true;
            let mut q = VecDeque::from([dst]);
            while let Some(u) = q.pop_front() {
                for &(v, _) in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        next_hop[v * n + dst] = port_index[&(NodeId(v as u32), NodeId(u as u32))];
                        q.push_back(v);
                    }
                }
            }
        }
        Network {
            nodes: topology.nodes.clone(),
            ports,
            port_index,
            next_hop,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_packet_id: 1,
            flows: Vec::new(),
            classes: [PacketCounts::default(); 4],
            trace: None,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn port(&self, from: NodeId, to: NodeId) -> Option<&Port> {
        self.port_index.get(&(from, to)).map(|&i| &self.ports[i as usize])
    }

    pub fn ports(&self) -> &[Port] {
        &self.ports
    }

    pub fn set_loss(&mut self, from: NodeId, to: NodeId, loss: LossModel) {
        let i = self.port_index[&(from, to)];
        self.ports[i as usize].loss = loss;
        self.ports[i as usize].transmissions = 0;
    }

    /// Installs `policy` as the classifier on every egress port of `node`.
    /// `None` puts all traffic in the best-effort queue.
    pub fn set_classifier(&mut self, node: NodeId, policy: Option<Arc<QosPolicy>>) {
        for p in self.ports.iter_mut().filter(|p| p.from == node) {
            p.classifier = policy.clone();
        }
    }

    pub fn flow_counts(&self, flow: FlowId) -> PacketCounts {
        self.flows.get(flow.0 as usize).copied().unwrap_or_default()
    }

    pub fn class_counts(&self, class: FlowClass) -> PacketCounts {
        self.classes[class as usize]
    }

    pub fn overflow_drops(&self) -> [u64; 4] {
        let mut d = [0; 4];
        for p in &self.ports {
            for (q, n) in p.queues.overflow_drops.iter().enumerate() {
                d[q] += n;
            }
        }
        d
    }

    fn counts_mut(&mut self, flow: FlowId, class: FlowClass) -> (&mut PacketCounts, &mut PacketCounts) {
        let i = flow.0 as usize;
        if self.flows.len() <= i {
            self.flows.resize(i + 1, PacketCounts::default());
        }
        (&mut self.flows[i], &mut self.classes[class as usize])
    }

    fn record(&mut self, time: SimTime, node: NodeId, event: TraceEvent, p: &NetPacket, queue: Option<u8>, reason: Option<DropReason>) {
        if let Some(t) = &mut self.trace {
            t.push(TraceRecord {
                time,
                node,
                event,
                packet_id: p.id,
                flow_id: p.flow_id,
                flow_class: p.flow_class,
                queue,
                reason,
            });
        }
    }

    fn record_drop(&mut self, now: SimTime, node: NodeId, p: &NetPacket, queue: u8, reason: DropReason) {
        let (f, c) = self.counts_mut(p.flow_id, p.flow_class);
        match reason {
            DropReason::Overflow => {
                f.dropped_overflow += 1;
                c.dropped_overflow += 1;
            }
            DropReason::Loss => {
                f.dropped_loss += 1;
                c.dropped_loss += 1;
            }
        }
        self.record(now, node, TraceEvent::Drop, p, Some(queue), Some(reason));
    }

    /// Injects `packet` at its source node at the current time. Returns the
    /// id assigned to it.
    ///
    /// # Panics
    /// If the source cannot reach the destination.
    pub fn inject<E: From<NetEvent>>(&mut self, ev: &mut EventLoop<E>, mut packet: NetPacket) -> u64 {
        let now = ev.now();
        packet.id = self.next_packet_id;
        self.next_packet_id += 1;
        packet.created_at = now;
        let (f, c) = self.counts_mut(packet.flow_id, packet.flow_class);
        f.injected += 1;
        c.injected += 1;
        let id = packet.id;
        let src = packet.src;
        self.forward(ev, src, Box::new(packet));
        id
    }

    fn route(&self, at: NodeId, dst: NodeId) -> PortId {
        let n = self.nodes.len();
        let port = self.next_hop[at.0 as usize * n + dst.0 as usize];
        assert!(port != NO_ROUTE, "no route from node {} to node {}", at.0, dst.0);
        port
    }

    fn forward<E: From<NetEvent>>(&mut self, ev: &mut EventLoop<E>, at: NodeId, mut packet: Box<NetPacket>) {
        let now = ev.now();
        let pid = self.route(at, packet.dst);
        let port = &mut self.ports[pid as usize];
        let q = port.queue_for(&packet);
        packet.enqueued_at = now;
        match port.queues.enqueue(q, packet) {
            Ok(()) => {
                if self.trace.is_some() {
                    let p = self.ports[pid as usize].queues.queues_tail(q).clone();
                    self.record(now, at, TraceEvent::Enqueue, &p, Some(q), None);
                }
                if !self.ports[pid as usize].busy {
                    self.start(ev, pid);
                }
            }
            Err(p) => self.record_drop(now, at, &p, q, DropReason::Overflow),
        }
    }

    fn start<E: From<NetEvent>>(&mut self, ev: &mut EventLoop<E>, pid: PortId) {
        let now = ev.now();
        let port = &mut self.ports[pid as usize];
        debug_assert!(!port.busy);
        match port.queues.serve(now) {
            Serve::Empty => {}
            Serve::WaitUntil(at) => {
                if port.wake_at.is_none_or(|w| at < w) {
                    port.wake_at = Some(at);
                    ev.schedule(at, NetEvent::Wake(pid, at).into());
                }
            }
            Serve::Packet(q, mut p) => {
                port.busy = true;
                let tx = port.transmission_ns(p.size_bytes);
                port.bytes_sent += u64::from(p.size_bytes);
                p.dequeued_at = now;
                p.delays.queuing_ns += nanos(now - p.enqueued_at);
                p.delays.transmission_ns += tx;
                p.hops += 1;
                let nth = port.transmissions;
                port.transmissions += 1;
                let lost = port.loss.drops(nth, &mut self.rng);
                let prop = match port.wan {
                    Some(w) => w.sample(&mut self.rng),
                    None => port.propagation,
                };
                let (from, to) = (port.from, port.to);
                let tx_done = now + std::time::Duration::from_nanos(tx);
                ev.schedule(tx_done, NetEvent::TxDone(pid).into());
                self.record(now, from, TraceEvent::Dequeue, &p, Some(q), None);
                if lost {
                    self.record_drop(now, from, &p, q, DropReason::Loss);
                    return;
                }
                p.delays.propagation_ns += nanos(prop);
                let mut arrive = tx_done + prop;
                if to != p.dst {
                    let proc = self.nodes[to.0 as usize].processing_delay;
                    p.delays.processing_ns += nanos(proc);
                    arrive += proc;
                }
                ev.schedule(arrive, NetEvent::Arrive { node: to, packet: p }.into());
            }
        }
    }

    /// Processes a network event. Returns the packet if it reached its
    /// destination.
    pub fn handle<E: From<NetEvent>>(&mut self, ev: &mut EventLoop<E>, event: NetEvent) -> Option<Box<NetPacket>> {
        match event {
            NetEvent::TxDone(pid) => {
                self.ports[pid as usize].busy = false;
                self.start(ev, pid);
                None
            }
            NetEvent::Wake(pid, at) => {
                let port = &mut self.ports[pid as usize];
                if port.wake_at == Some(at) {
                    port.wake_at = None;
                    if !port.busy {
                        self.start(ev, pid);
                    }
                }
                None
            }
            NetEvent::Arrive { node, mut packet } => {
                if node == packet.dst {
                    let now = ev.now();
                    packet.delivered_at = Some(now);
                    let (f, c) = self.counts_mut(packet.flow_id, packet.flow_class);
                    f.delivered += 1;
                    c.delivered += 1;
                    self.record(now, node, TraceEvent::Deliver, &packet, None, None);
                    Some(packet)
                } else {
                    self.forward(ev, node, packet);
                    None
                }
            }
        }
    }
}

impl PriorityQueueSet {
    fn queues_tail(&self, q: u8) -> &NetPacket {
        self.tail(q as usize).expect("just enqueued")
    }
}
