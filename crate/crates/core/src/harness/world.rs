//! One simulated deployment: field devices, gateways, the cloud server and
//! background load wired onto a [`Network`] and driven by one event loop.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use super::scenario::{Mode, Scenario, ScenarioError};
use super::stats::FlowStats;
use crate::coap::{Action, CoapCounters, Endpoint, ExchangeState, ObserveRegistry, Response, RetransmitParams, TimerToken};
use crate::gateway::{CommandDoc, GatewayCounters, GatewayState, ReadingDoc, COMMAND_RESOURCE, PV_RESOURCE, WS_BUFFER_LIMIT};
use crate::messages::{
    Body, Code, CoapMessage, ConnId, FlowClass, FlowId, NetPacket, NodeId, Segment, SegmentKind, Transport, WsFrame,
    SECURE_OVERHEAD_BYTES, STREAM_HEADER_BYTES,
};
use crate::netsim::{
    wan_path, BackgroundTraffic, BgFlow, EventLoop, Layout, NetEvent, Network, PacketCounts, QueueConfig, TcpOutput,
    TcpReceiver, TcpSender, TcpStats, TraceRecord, TrafficEvent,
};
use crate::qos::{dscp_for_class_with, DscpClass, PolicyController, QosPolicy, Selector, SensorClass, POLICY_RESOURCE};
use crate::tdma::{build_superframe, Superframe, next_publish_time, site_population, PvGenerator, SlotAssignment, DEFAULT_SLOT_LENGTH};
use crate::time::SimTime;

/// Gap between a device's silence and its gateway re-registering.
const MIN_STALE_AFTER: Duration = Duration::from_secs(1);
const WATCHDOG_PERIOD: Duration = Duration::from_secs(1);

#[derive(Debug)]
enum Ev {
    Net(NetEvent),
    Traffic(TrafficEvent),
    CoapTimer(NodeId, TimerToken),
    Publish(usize),
    Watchdog,
    WsTimer(usize, u64),
}

impl From<NetEvent> for Ev {
    fn from(e: NetEvent) -> Self {
        Ev::Net(e)
    }
}

impl From<TrafficEvent> for Ev {
    fn from(e: TrafficEvent) -> Self {
        Ev::Traffic(e)
    }
}

#[derive(Debug, Clone, Copy)]
enum Role {
    Device(usize),
    Gateway(usize),
    Cloud,
    Other,
}

struct Device {
    node: NodeId,
    class: SensorClass,
    slot: SlotAssignment,
    interval: Duration,
    pv: PvGenerator,
    ep: Endpoint,
    reg: ObserveRegistry,
    flow: FlowId,
    /// Notification exchanges in flight, by message id, with start time.
    pending: HashMap<u16, SimTime>,
}

struct Gw {
    node: NodeId,
    switch: NodeId,
    state: GatewayState,
    ep: Endpoint,
    ws: TcpSender,
    ws_flow: FlowId,
    ws_ack_flow: FlowId,
    control_flow: FlowId,
    class_of: HashMap<u32, SensorClass>,
    interval_of: HashMap<u32, Duration>,
}

struct Cloud {
    node: NodeId,
    ep: Endpoint,
    ctl: PolicyController,
    started: HashMap<u16, SimTime>,
    ws_rx: Vec<TcpReceiver>,
}

#[derive(Debug, Default)]
struct Tally {
    samples: Vec<u64>,
    sent: u64,
    delivered: u64,
    dropped: u64,
}

impl Tally {
    fn stats(&self, class: FlowClass) -> FlowStats {
        FlowStats::from_samples(class, &self.samples, self.sent, self.delivered, self.dropped)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Record a per-hop packet trace.
    pub trace: bool,
}

/// Everything measured in one replication.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub level: usize,
    pub replication: u32,
    pub seed: u64,
    /// Stats per flow class, in [`FlowClass::ALL`] order.
    pub stats: Vec<FlowStats>,
    #[serde(skip)]
    pub packets: [PacketCounts; 4],
    #[serde(skip)]
    pub background_tcp: TcpStats,
    #[serde(skip)]
    pub ws_transport: TcpStats,
    #[serde(skip)]
    pub gateway: GatewayCounters,
    #[serde(skip)]
    pub coap: CoapCounters,
    /// Observations active when measurement started.
    pub observations_at_start: usize,
    pub observations_expected: usize,
    pub readings_checked: u64,
    /// Readings whose timestamps were not generated <= gw <= sc.
    pub reading_violations: u64,
    pub overflow_drops: [u64; 4],
    pub events: u64,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

impl RunReport {
    pub fn stats_for(&self, class: FlowClass) -> &FlowStats {
        &self.stats[class as usize]
    }

    /// Per-class packet and exchange conservation.
    pub fn is_conserved(&self) -> bool {
        self.stats.iter().all(FlowStats::is_conserved)
            && self.packets.iter().all(|c| c.injected == c.delivered + c.dropped())
    }

    fn empty(s: &Scenario, replication: u32, seed: u64) -> Self {
        RunReport {
            mode: s.mode(),
            level: s.background.n_flows,
            replication,
            seed,
            stats: FlowClass::ALL.iter().map(|c| FlowStats::empty(*c)).collect(),
            packets: [PacketCounts::default(); 4],
            background_tcp: TcpStats::default(),
            ws_transport: TcpStats::default(),
            gateway: GatewayCounters::default(),
            coap: CoapCounters::default(),
            observations_at_start: 0,
            observations_expected: s.sites * s.sensors_per_site.total(),
            readings_checked: 0,
            reading_violations: 0,
            overflow_drops: [0; 4],
            events: 0,
            trace: Vec::new(),
        }
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct World {
    scenario: Scenario,
    secure_bytes: u32,
    ev: EventLoop<Ev>,
    net: Network,
    roles: Vec<Role>,
    devices: Vec<Device>,
    gateways: Vec<Gw>,
    cloud: Cloud,
    bg: Option<BackgroundTraffic>,
    bg_flows: Vec<BgFlow>,
    ws_flows: HashMap<FlowId, (usize, bool)>,
    policy: Arc<QosPolicy>,
    core: NodeId,
    measure_end: SimTime,
    gw_first_delivery: HashMap<(NodeId, u16), SimTime>,
    coap: Tally,
    ws: Tally,
    control: Tally,
    readings_checked: u64,
    reading_violations: u64,
}

impl World {
    fn build(s: &Scenario, seed: u64, opts: &RunOptions) -> Result<World, ScenarioError> {
        let params: RetransmitParams = s.effective_coap();
        let mut layout = Layout {
            sites: s.sites,
            devices_per_site: s.sensors_per_site.total(),
            background_per_site: s.background.n_flows,
            ..Layout::default()
        };
        if s.baseline_wan {
            let ms = |x: f64| Duration::from_nanos((x * 1e6).round() as u64);
            layout.wan = Some(
                wan_path(ms(s.wan.base_ms), ms(s.wan.jitter_ms), layout.max_controlled_delay())
                    .map_err(|e| ScenarioError::Wan(e.to_string()))?,
            );
        }
        let topo = layout.build();
        topo.validate().map_err(|e| ScenarioError::Wan(e.to_string()))?;
        let mut net = Network::new(&topo, &QueueConfig::default(), mix(seed, 1));
        if opts.trace {
            net.enable_trace();
        }
        let mut roles = vec![Role::Other; topo.nodes.len()];
        let mut next_flow = 0u32;
        let mut flow = || {
            next_flow += 1;
            FlowId(next_flow - 1)
        };
        let policy = Arc::new(QosPolicy::standard(1, s.group3_dscp));
        let tcp = s.tcp_params();

        let mut devices = Vec::new();
        let mut gateways = Vec::new();
        let mut ws_flows = HashMap::new();
        let mut next_device_id = 1u32;
        let sp = s.sensors_per_site;
        for (site_idx, site) in topo.sites.iter().enumerate() {
            let mut pop = site_population(sp.motor, sp.pressure, sp.temperature, next_device_id, mix(seed, 2));
            next_device_id += pop.len() as u32;
            let frame = if pop.is_empty() {
                None
            } else {
                Some(build_superframe(&mut pop, DEFAULT_SLOT_LENGTH).expect("generated population is schedulable"))
            };
            let mut directory = Vec::new();
            let mut class_of = HashMap::new();
            let mut interval_of = HashMap::new();
            for (fd, &node) in pop.into_iter().zip(&site.devices) {
                let slot = *frame.as_ref().expect("nonempty").assignment(fd.device_id).expect("scheduled");
                roles[node.0 as usize] = Role::Device(devices.len());
                directory.push((fd.device_id, node));
                class_of.insert(fd.device_id, fd.spec.isa_class);
                interval_of.insert(fd.device_id, fd.spec.update_interval);
                devices.push(Device {
                    node,
                    class: fd.spec.isa_class,
                    slot,
                    interval: fd.spec.update_interval,
                    pv: fd.pv,
                    ep: Endpoint::new(node, params, mix(seed, 1000 + u64::from(node.0))),
                    reg: ObserveRegistry::new(),
                    flow: flow(),
                    pending: HashMap::new(),
                });
            }
            roles[site.gateway.0 as usize] = Role::Gateway(site_idx);
            let mut state = GatewayState::new(site_idx, site.gateway, directory);
            state.open_session(0);
            let ws_flow = flow();
            let ws_ack_flow = flow();
            ws_flows.insert(ws_flow, (site_idx, false));
            ws_flows.insert(ws_ack_flow, (site_idx, true));
            gateways.push(Gw {
                node: site.gateway,
                switch: site.switch,
                state,
                ep: Endpoint::new(site.gateway, params, mix(seed, 1000 + u64::from(site.gateway.0))),
                ws: TcpSender::framed(ConnId(site_idx as u32), tcp, WS_BUFFER_LIMIT),
                ws_flow,
                ws_ack_flow,
                control_flow: flow(),
                class_of,
                interval_of,
            });
        }
        roles[topo.sc_server.0 as usize] = Role::Cloud;
        let mut bg_flows = Vec::new();
        for site in &topo.sites {
            for &src in &site.background_sources {
                bg_flows.push(BgFlow {
                    data: flow(),
                    ack: flow(),
                    src,
                    dst: topo.sc_server,
                });
            }
        }
        let cloud = Cloud {
            node: topo.sc_server,
            ep: Endpoint::new(topo.sc_server, params, mix(seed, 1000 + u64::from(topo.sc_server.0))),
            ctl: PolicyController::new(),
            started: HashMap::new(),
            ws_rx: (0..topo.sites.len()).map(|_| TcpReceiver::new()).collect(),
        };
        Ok(World {
            scenario: s.clone(),
            secure_bytes: if s.secure { SECURE_OVERHEAD_BYTES } else { 0 },
            ev: EventLoop::new(),
            net,
            roles,
            devices,
            gateways,
            cloud,
            bg: None,
            bg_flows,
            ws_flows,
            policy,
            core: topo.core_switch,
            measure_end: SimTime::MAX,
            gw_first_delivery: HashMap::new(),
            coap: Tally::default(),
            ws: Tally::default(),
            control: Tally::default(),
            readings_checked: 0,
            reading_violations: 0,
        })
    }

    fn run(&mut self) -> usize {
        let now = self.ev.now();
        // setup: policy distribution and observe registration
        if self.scenario.qos_enabled {
            self.net.set_classifier(self.core, Some(self.policy.clone()));
        }
        let gw_nodes: Vec<NodeId> = self.gateways.iter().map(|g| g.node).collect();
        let mut out = Vec::new();
        self.cloud
            .ctl
            .distribute(&mut self.cloud.ep, now, &gw_nodes, &self.policy, &mut out)
            .expect("built-in policy validates");
        for a in &out {
            if let Action::Transmit { msg, .. } = a {
                self.cloud.started.entry(msg.message_id).or_insert(now);
            }
        }
        self.control.sent += gw_nodes.len() as u64;
        let cloud = self.cloud.node;
        self.apply(cloud, out);
        for g in 0..self.gateways.len() {
            let mut out = Vec::new();
            let gw = &mut self.gateways[g];
            let ids: Vec<u32> = gw.class_of.keys().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            gw.state.establish_observations(&mut gw.ep, now, &ids, &mut out);
            let node = gw.node;
            self.apply(node, out);
        }
        self.drain();

        // measurement window starts on the next whole millisecond
        let t = self.ev.now().as_nanos();
        let start = SimTime::from_millis(t / 1_000_000 + 1);
        self.measure_end = start + self.scenario.duration();
        let active = self.gateways.iter().map(|g| g.state.active_observations()).sum();

        let bg = BackgroundTraffic::new(self.scenario.background_set(), self.bg_flows.clone(), self.measure_end);
        bg.start(&mut self.ev, start);
        self.bg = Some(bg);
        for (i, d) in self.devices.iter().enumerate() {
            let first = start + (next_publish_time(&d.slot, SimTime::ZERO) - SimTime::ZERO);
            self.ev.schedule(first, Ev::Publish(i));
        }
        self.ev.schedule(start + WATCHDOG_PERIOD, Ev::Watchdog);
        self.drain();
        active
    }

    fn drain(&mut self) {
        while let Some((_, e)) = self.ev.pop() {
            self.dispatch(e);
        }
    }

    fn dispatch(&mut self, e: Ev) {
        match e {
            Ev::Net(ne) => {
                if let Some(p) = self.net.handle(&mut self.ev, ne) {
                    self.on_packet(*p);
                }
            }
            Ev::Traffic(te) => {
                if let Some(bg) = &mut self.bg {
                    bg.handle(&mut self.net, &mut self.ev, te);
                }
            }
            Ev::CoapTimer(node, timer) => {
                let now = self.ev.now();
                let mut out = Vec::new();
                self.endpoint(node).on_timer(now, timer, &mut out);
                self.apply(node, out);
            }
            Ev::Publish(i) => self.publish(i),
            Ev::Watchdog => self.watchdog(),
            Ev::WsTimer(site, generation) => {
                let mut out = Vec::new();
                self.gateways[site].ws.on_timer(generation, &mut out);
                self.flush_ws(site, out);
            }
        }
    }

    fn endpoint(&mut self, node: NodeId) -> &mut Endpoint {
        match self.roles[node.0 as usize] {
            Role::Device(d) => &mut self.devices[d].ep,
            Role::Gateway(g) => &mut self.gateways[g].ep,
            Role::Cloud => &mut self.cloud.ep,
            Role::Other => panic!("node {} has no CoAP endpoint", node.0),
        }
    }

    fn publish(&mut self, i: usize) {
        let now = self.ev.now();
        if now >= self.measure_end {
            return;
        }
        let d = &mut self.devices[i];
        let pv = d.pv.generate(now);
        let mut out = Vec::new();
        let emitted = d.reg.notify_observers(&mut d.ep, now, PV_RESOURCE, &pv.encode(), &mut out);
        for m in &emitted {
            d.pending.insert(m.message_id, now);
        }
        self.coap.sent += emitted.len() as u64;
        let next = now + d.interval;
        let node = d.node;
        self.ev.schedule(next, Ev::Publish(i));
        self.apply(node, out);
    }

    fn watchdog(&mut self) {
        let now = self.ev.now();
        if now >= self.measure_end {
            return;
        }
        for g in 0..self.gateways.len() {
            let gw = &mut self.gateways[g];
            let intervals = &gw.interval_of;
            let stale = gw
                .state
                .stale_devices(now, |d| intervals.get(&d).map_or(MIN_STALE_AFTER, |i| (*i * 3).max(MIN_STALE_AFTER)));
            if stale.is_empty() {
                continue;
            }
            let mut out = Vec::new();
            gw.state.establish_observations(&mut gw.ep, now, &stale, &mut out);
            let node = gw.node;
            self.apply(node, out);
        }
        self.ev.schedule(now + WATCHDOG_PERIOD, Ev::Watchdog);
    }

    fn apply(&mut self, node: NodeId, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Transmit { to, msg } => self.send_coap(node, to, msg),
                Action::ArmTimer { at, timer } => self.ev.schedule(at, Ev::CoapTimer(node, timer)),
                Action::Deliver { from, msg } => self.on_deliver(node, from, msg),
                Action::Completed { exchange, ack } => {
                    self.on_completed(node, exchange.request.message_id, exchange.state, ack.as_ref(), exchange.started_at)
                }
                Action::Reset { exchange } => {
                    self.on_completed(node, exchange.request.message_id, ExchangeState::TimedOut, None, exchange.started_at)
                }
            }
        }
    }

    fn send_coap(&mut self, from: NodeId, to: NodeId, msg: CoapMessage) {
        let g3 = self.scenario.group3_dscp;
        let (flow, class, selector, dscp) = match (self.roles[from.0 as usize], self.roles[to.0 as usize]) {
            (Role::Device(d), Role::Gateway(_)) => {
                let d = &self.devices[d];
                (d.flow, FlowClass::CoapPv, Selector::Class(d.class), dscp_for_class_with(d.class, g3))
            }
            (Role::Gateway(g), Role::Device(d)) => {
                let d = &self.devices[d];
                let sel = Selector::Class(d.class);
                (d.flow, FlowClass::CoapPv, sel, self.gateways[g].state.mark(sel))
            }
            (Role::Cloud, Role::Gateway(g)) => {
                (self.gateways[g].control_flow, FlowClass::Control, Selector::CONTROL, DscpClass::Cs6)
            }
            (Role::Gateway(g), Role::Cloud) => {
                let gw = &self.gateways[g];
                (gw.control_flow, FlowClass::Control, Selector::CONTROL, gw.state.mark(Selector::CONTROL))
            }
            (a, b) => panic!("no CoAP relationship between {a:?} and {b:?}"),
        };
        let size = msg.encoded_size() as u32 + self.secure_bytes;
        let p = NetPacket::new(from, to, size, Transport::UdpLike, flow, class, SimTime::ZERO, Body::Coap(msg))
            .marked(dscp, Some(selector));
        self.net.inject(&mut self.ev, p);
    }

    fn on_packet(&mut self, p: NetPacket) {
        if let Some(&(site, is_ack)) = self.ws_flows.get(&p.flow_id) {
            let Body::Segment(seg) = p.body else {
                return;
            };
            if is_ack {
                if let SegmentKind::Ack { next_expected } = seg.kind {
                    let mut out = Vec::new();
                    self.gateways[site].ws.on_ack(next_expected, &mut out);
                    self.flush_ws(site, out);
                }
            } else {
                self.on_ws_data(site, seg);
            }
            return;
        }
        if matches!(p.body, Body::Coap(_)) {
            let NetPacket { src, dst, body, .. } = p;
            if let Body::Coap(msg) = body {
                self.on_coap(dst, src, msg);
            }
        } else if let Some(bg) = &mut self.bg {
            bg.on_delivered(&mut self.net, &mut self.ev, p);
        }
    }

    fn on_coap(&mut self, node: NodeId, from: NodeId, msg: CoapMessage) {
        let now = self.ev.now();
        let mut out = Vec::new();
        match self.roles[node.0 as usize] {
            Role::Device(d) => {
                let dev = &mut self.devices[d];
                let reg = &mut dev.reg;
                dev.ep.handle_inbound_with(
                    now,
                    from,
                    msg,
                    |m| {
                        (m.code == Code::Get && m.observe == Some(0) && m.uri_path.as_deref() == Some(PV_RESOURCE)).then(|| {
                            let seq = reg.register(PV_RESOURCE, from, m.token);
                            Response {
                                code: Code::Content,
                                observe: Some(seq),
                                payload: Vec::new(),
                            }
                        })
                    },
                    &mut out,
                );
            }
            Role::Gateway(g) => {
                let gw = &mut self.gateways[g];
                let before = gw.state.installed_policy().map(|p| p.version);
                let state = &mut gw.state;
                gw.ep.handle_inbound_with(
                    now,
                    from,
                    msg,
                    |m| {
                        (m.code == Code::Put && m.uri_path.as_deref() == Some(POLICY_RESOURCE)).then(|| Response {
                            code: Code::Content,
                            observe: None,
                            payload: state.handle_policy_put(&m.payload),
                        })
                    },
                    &mut out,
                );
                let after = gw.state.installed_policy().cloned();
                if self.scenario.qos_enabled && after.as_ref().map(|p| p.version) != before {
                    let (switch, gnode) = (gw.switch, gw.node);
                    self.net.set_classifier(switch, after.clone());
                    self.net.set_classifier(gnode, after);
                }
            }
            Role::Cloud => self.cloud.ep.handle_inbound(now, from, msg, &mut out),
            Role::Other => return,
        }
        self.apply(node, out);
    }

    fn on_deliver(&mut self, node: NodeId, from: NodeId, msg: CoapMessage) {
        let now = self.ev.now();
        match self.roles[node.0 as usize] {
            Role::Gateway(g) => {
                if msg.code != Code::Content || msg.observe.is_none() {
                    return;
                }
                self.gw_first_delivery.entry((from, msg.message_id)).or_insert(now);
                let gw = &mut self.gateways[g];
                if let Ok(Some((_, frame))) = gw.state.coap_to_ws(now, &msg) {
                    if gw.state.sessions().next().is_none() {
                        return;
                    }
                    let mut out = Vec::new();
                    self.ws.sent += 1;
                    if gw.ws.push_frame(frame, now, &mut out).is_some() {
                        self.ws.dropped += 1;
                    }
                    self.flush_ws(g, out);
                }
            }
            Role::Device(d)
                if msg.code == Code::Put && msg.uri_path.as_deref() == Some(COMMAND_RESOURCE) => {
                    self.on_command(d, &msg.payload);
                }
            _ => {}
        }
    }

    fn on_command(&mut self, d: usize, body: &[u8]) {
        let Ok(cmd) = serde_json::from_slice::<CommandDoc>(body) else {
            return;
        };
        if cmd.command == "set_update_interval" {
            let ms = cmd.args.get("ms").and_then(|v| v.as_f64()).or_else(|| cmd.args.as_f64());
            if let Some(ms) = ms {
                let dev = &mut self.devices[d];
                let interval = Duration::from_nanos((ms * 1e6).round() as u64);
                let (lo, hi) = crate::tdma::interval_range(dev.class);
                if (lo..=hi).contains(&interval) {
                    dev.interval = interval;
                }
            }
        }
    }

    fn on_completed(&mut self, node: NodeId, mid: u16, state: ExchangeState, ack: Option<&CoapMessage>, started: SimTime) {
        let now = self.ev.now();
        match self.roles[node.0 as usize] {
            Role::Device(d) => {
                let dev = &mut self.devices[d];
                if !dev.reg.is_notification(mid) {
                    return;
                }
                let result = (state == ExchangeState::Acked && ack.is_some()).then_some(ExchangeState::Acked);
                dev.reg.on_exchange_done(mid, result.or(Some(ExchangeState::TimedOut)));
                let first = self.gw_first_delivery.remove(&(dev.node, mid));
                if dev.pending.remove(&mid).is_none() {
                    return;
                }
                match (result, first) {
                    (Some(_), Some(at)) => {
                        self.coap.delivered += 1;
                        self.coap.samples.push((at - started).as_nanos() as u64);
                    }
                    _ => self.coap.dropped += 1,
                }
            }
            Role::Gateway(g) => {
                self.gateways[g].state.on_exchange_done(now, mid, state);
            }
            Role::Cloud => {
                let start = self.cloud.started.remove(&mid).unwrap_or(started);
                if let Some((_, outcome)) = self.cloud.ctl.on_completed(mid, state, ack) {
                    match outcome {
                        crate::qos::DistributionOutcome::Applied(_) => {
                            self.control.delivered += 1;
                            self.control.samples.push((now - start).as_nanos() as u64);
                        }
                        _ => self.control.dropped += 1,
                    }
                }
            }
            Role::Other => {}
        }
    }

    fn flush_ws(&mut self, site: usize, out: Vec<TcpOutput>) {
        let now = self.ev.now();
        for o in out {
            match o {
                TcpOutput::Send(seg) => {
                    let gw = &self.gateways[site];
                    let (selector, frame_len) = match &seg.kind {
                        SegmentKind::Data { frame: Some(f), .. } => (self.frame_selector(site, f), f.encoded_size() as u32),
                        _ => (None, 0),
                    };
                    let dscp = selector.map_or(DscpClass::Be, |s| gw.state.mark(s));
                    let size = STREAM_HEADER_BYTES + frame_len + self.secure_bytes;
                    let p = NetPacket::new(
                        gw.node,
                        self.cloud.node,
                        size,
                        Transport::TcpLike,
                        gw.ws_flow,
                        FlowClass::WsReading,
                        SimTime::ZERO,
                        Body::Segment(seg),
                    )
                    .marked(dscp, selector);
                    self.net.inject(&mut self.ev, p);
                }
                TcpOutput::ArmTimer { after, generation } => {
                    self.ev.schedule(now + after, Ev::WsTimer(site, generation));
                }
            }
        }
    }

    fn frame_selector(&self, site: usize, f: &WsFrame) -> Option<Selector> {
        let doc = ReadingDoc::parse(&f.payload).ok()?;
        self.gateways[site].class_of.get(&doc.device_id).map(|c| Selector::Class(*c))
    }

    fn on_ws_data(&mut self, site: usize, seg: Segment) {
        let now = self.ev.now();
        let conn = seg.conn;
        let (next_expected, delivered) = self.cloud.ws_rx[site].on_data(seg);
        let gw = &self.gateways[site];
        let ack = NetPacket::new(
            self.cloud.node,
            gw.node,
            STREAM_HEADER_BYTES + self.secure_bytes,
            Transport::TcpLike,
            gw.ws_ack_flow,
            FlowClass::WsReading,
            SimTime::ZERO,
            Body::Segment(Segment {
                conn,
                seq: 0,
                kind: SegmentKind::Ack { next_expected },
            }),
        )
        .marked(DscpClass::Be, None);
        self.net.inject(&mut self.ev, ack);
        for (_, kind) in delivered {
            if let SegmentKind::Data {
                frame: Some(f),
                queued_at,
            } = kind
            {
                self.ws.delivered += 1;
                self.ws.samples.push((now - queued_at).as_nanos() as u64);
                self.readings_checked += 1;
                let ok = ReadingDoc::parse(&f.payload)
                    .map(|d| d.generated_at <= d.gw_arrival && d.gw_arrival <= now.as_micros())
                    .unwrap_or(false);
                if !ok {
                    self.reading_violations += 1;
                }
            }
        }
    }

    fn report(self, replication: u32, seed: u64, active: usize) -> RunReport {
        let mut r = RunReport::empty(&self.scenario, replication, seed);
        let mut bg = Tally::default();
        for f in &self.bg_flows {
            let c = self.net.flow_counts(f.data);
            bg.sent += c.injected;
            bg.delivered += c.delivered;
            bg.dropped += c.dropped();
        }
        if let Some(b) = &self.bg {
            bg.samples = b.latencies_ns().to_vec();
            r.background_tcp = b.tcp_stats();
        }
        r.stats = vec![
            self.coap.stats(FlowClass::CoapPv),
            self.ws.stats(FlowClass::WsReading),
            self.control.stats(FlowClass::Control),
            bg.stats(FlowClass::Background),
        ];
        debug_assert!(FlowClass::ALL.iter().enumerate().all(|(i, c)| r.stats[i].flow_class == *c));
        for c in FlowClass::ALL {
            r.packets[c as usize] = self.net.class_counts(c);
        }
        for g in &self.gateways {
            r.ws_transport.merge(&g.ws.stats);
            let gc = &g.state.counters;
            let acc = &mut r.gateway;
            acc.notifications += gc.notifications;
            acc.frames += gc.frames;
            acc.adapter_drops += gc.adapter_drops;
            acc.duplicates += gc.duplicates;
            acc.command_errors += gc.command_errors;
            acc.registrations_sent += gc.registrations_sent;
            acc.registration_timeouts += gc.registration_timeouts;
            acc.policies_applied += gc.policies_applied;
            acc.policies_rejected += gc.policies_rejected;
            r.coap.merge(g.ep.counters());
        }
        for d in &self.devices {
            r.coap.merge(d.ep.counters());
        }
        r.coap.merge(self.cloud.ep.counters());
        r.observations_at_start = active;
        r.readings_checked = self.readings_checked;
        r.reading_violations = self.reading_violations;
        r.overflow_drops = self.net.overflow_drops();
        r.events = self.ev.executed();
        r.trace = self.net.trace().to_vec();
        r
    }
}

/// Per-site TDMA superframes of the scenario's device population, with the
/// same device ids a run uses.
pub fn superframes(s: &Scenario) -> Vec<Superframe> {
    let sp = s.sensors_per_site;
    let mut first = 1u32;
    (0..s.sites)
        .filter_map(|_| {
            let mut pop = site_population(sp.motor, sp.pressure, sp.temperature, first, 0);
            first += pop.len() as u32;
            build_superframe(&mut pop, DEFAULT_SLOT_LENGTH).ok()
        })
        .collect()
}

/// Runs replication `replication` of `s`, seeded with `seed + replication`.
pub fn run_replication(s: &Scenario, replication: u32, opts: &RunOptions) -> Result<RunReport, ScenarioError> {
    s.validate()?;
    let seed = s.seed.wrapping_add(u64::from(replication));
    if s.duration().is_zero() {
        return Ok(RunReport::empty(s, replication, seed));
    }
    let mut w = World::build(s, seed, opts)?;
    let active = w.run();
    Ok(w.report(replication, seed, active))
}

/// Runs every replication of `s`.
pub fn run_scenario(s: &Scenario) -> Result<Vec<RunReport>, ScenarioError> {
    s.validate()?;
    let jobs: Vec<_> = (0..s.replications).map(|r| (s.clone(), r)).collect();
    super::sweep::run_parallel(jobs, &RunOptions::default())
}
