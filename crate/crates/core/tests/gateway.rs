//! Gateway behaviour end to end over the simulated network: observe
//! registration, command delivery and policy distribution.

use std::collections::HashMap;

use sdiiot_core::coap::{Action, ObserveRegistry, Response, TimerToken};
use sdiiot_core::gateway::{GatewayState, Registration, PV_RESOURCE};
use sdiiot_core::messages::{Body, Code, Transport};
use sdiiot_core::netsim::{EventLoop, Layout, LossModel, NetEvent, Network, QueueConfig, Topology};
use sdiiot_core::qos::{DistributionOutcome, PolicyController, Selector, POLICY_RESOURCE};
use sdiiot_core::{
    CoapMessage, DscpClass, Endpoint, ExchangeState, FlowClass, FlowId, NetPacket, NodeId, QosPolicy, RetransmitParams,
    SimTime, WsFrame,
};

#[derive(Debug)]
enum Ev {
    Net(NetEvent),
    Timer(NodeId, TimerToken),
}

impl From<NetEvent> for Ev {
    fn from(e: NetEvent) -> Self {
        Ev::Net(e)
    }
}

struct Device {
    ep: Endpoint,
    reg: ObserveRegistry,
    puts: Vec<CoapMessage>,
}

/// Gateways, devices and the cloud endpoint wired onto one network.
struct Bench {
    topo: Topology,
    ev: EventLoop<Ev>,
    net: Network,
    gws: HashMap<NodeId, (GatewayState, Endpoint)>,
    devices: HashMap<NodeId, Device>,
    cloud: Endpoint,
    controller: PolicyController,
    registrations: Vec<Registration>,
    /// Completed exchanges per originating node: (message id, state).
    completed: Vec<(NodeId, u16, ExchangeState)>,
    outcomes: Vec<(NodeId, DistributionOutcome)>,
}

impl Bench {
    fn new(sites: usize, devices_per_site: usize) -> Bench {
        let topo = Layout {
            sites,
            devices_per_site,
            ..Layout::default()
        }
        .build();
        let net = Network::new(&topo, &QueueConfig::default(), 1);
        let params = RetransmitParams::controlled();
        let mut gws = HashMap::new();
        let mut devices = HashMap::new();
        let mut id = 1;
        for s in &topo.sites {
            let mut dir = Vec::new();
            for &d in &s.devices {
                dir.push((id, d));
                id += 1;
                devices.insert(
                    d,
                    Device {
                        ep: Endpoint::new(d, params, u64::from(d.0)),
                        reg: ObserveRegistry::new(),
                        puts: Vec::new(),
                    },
                );
            }
            let gw = GatewayState::new(gws.len(), s.gateway, dir);
            gws.insert(s.gateway, (gw, Endpoint::new(s.gateway, params, u64::from(s.gateway.0))));
        }
        let cloud = Endpoint::new(topo.sc_server, params, 99);
        Bench {
            topo,
            ev: EventLoop::new(),
            net,
            gws,
            devices,
            cloud,
            controller: PolicyController::new(),
            registrations: Vec::new(),
            completed: Vec::new(),
            outcomes: Vec::new(),
        }
    }

    fn gateway(&self, site: usize) -> NodeId {
        self.topo.sites[site].gateway
    }

    fn establish(&mut self, site: usize, ids: &[u32]) -> usize {
        let node = self.gateway(site);
        let (gw, ep) = self.gws.get_mut(&node).unwrap();
        let mut out = Vec::new();
        let sent = gw.establish_observations(ep, self.ev.now(), ids, &mut out);
        self.apply(node, out);
        sent
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: CoapMessage, dscp: DscpClass) {
        let size = msg.encoded_size() as u32;
        let p = NetPacket::new(from, to, size, Transport::UdpLike, FlowId(0), FlowClass::Control, SimTime::ZERO, Body::Coap(msg))
            .marked(dscp, Some(Selector::CONTROL));
        self.net.inject(&mut self.ev, p);
    }

    fn apply(&mut self, node: NodeId, actions: Vec<Action>) {
        let now = self.ev.now();
        for a in actions {
            match a {
                Action::Transmit { to, msg } => self.send(node, to, msg, DscpClass::Cs6),
                Action::ArmTimer { at, timer } => self.ev.schedule(at, Ev::Timer(node, timer)),
                Action::Deliver { msg, .. } => {
                    if let Some(d) = self.devices.get_mut(&node) {
                        d.puts.push(msg);
                    }
                }
                Action::Completed { exchange, ack } => {
                    let mid = exchange.request.message_id;
                    self.completed.push((node, mid, exchange.state));
                    if let Some((gw, _)) = self.gws.get_mut(&node) {
                        if let Some(r) = gw.on_exchange_done(now, mid, exchange.state) {
                            self.registrations.push(r);
                        }
                    } else if node == self.topo.sc_server {
                        if let Some(o) = self.controller.on_completed(mid, exchange.state, ack.as_ref()) {
                            self.outcomes.push(o);
                        }
                    }
                }
                Action::Reset { exchange } => {
                    self.completed.push((node, exchange.request.message_id, ExchangeState::TimedOut));
                }
            }
        }
    }

    fn run(&mut self) {
        while let Some((now, e)) = self.ev.pop() {
            match e {
                Ev::Net(ne) => {
                    let Some(p) = self.net.handle(&mut self.ev, ne) else { continue };
                    let NetPacket { src, dst, body, .. } = *p;
                    let Body::Coap(msg) = body else { continue };
                    let mut out = Vec::new();
                    if let Some(d) = self.devices.get_mut(&dst) {
                        let reg = &mut d.reg;
                        d.ep.handle_inbound_with(
                            now,
                            src,
                            msg,
                            |m| {
                                (m.code == Code::Get && m.observe == Some(0)).then(|| Response {
                                    code: Code::Content,
                                    observe: Some(reg.register(PV_RESOURCE, src, m.token)),
                                    payload: Vec::new(),
                                })
                            },
                            &mut out,
                        );
                    } else if let Some((gw, ep)) = self.gws.get_mut(&dst) {
                        ep.handle_inbound_with(
                            now,
                            src,
                            msg,
                            |m| {
                                (m.code == Code::Put && m.uri_path.as_deref() == Some(POLICY_RESOURCE)).then(|| Response {
                                    code: Code::Content,
                                    observe: None,
                                    payload: gw.handle_policy_put(&m.payload),
                                })
                            },
                            &mut out,
                        );
                    } else {
                        self.cloud.handle_inbound(now, src, msg, &mut out);
                    }
                    self.apply(dst, out);
                }
                Ev::Timer(node, t) => {
                    let mut out = Vec::new();
                    let ep = if let Some(d) = self.devices.get_mut(&node) {
                        &mut d.ep
                    } else if let Some((_, ep)) = self.gws.get_mut(&node) {
                        ep
                    } else {
                        &mut self.cloud
                    };
                    ep.on_timer(now, t, &mut out);
                    self.apply(node, out);
                }
            }
        }
    }

    fn active(&self, site: usize) -> usize {
        self.gws[&self.gateway(site)].0.active_observations()
    }
}

#[test]
fn eighteen_devices_lossless_all_observed() {
    let mut b = Bench::new(1, 18);
    let ids: Vec<u32> = (1..=18).collect();
    assert_eq!(b.establish(0, &ids), 18);
    b.run();
    assert_eq!(b.active(0), 18);
    assert_eq!(b.registrations.len(), 18);
    assert!(b.registrations.iter().all(|r| matches!(r, Registration::Active(_))));
    // each device holds exactly one active observation
    assert!(b.devices.values().all(|d| d.reg.active_count(PV_RESOURCE) == 1));
}

#[test]
fn no_devices_no_observations() {
    let mut b = Bench::new(1, 0);
    assert_eq!(b.establish(0, &[]), 0);
    b.run();
    assert_eq!(b.active(0), 0);
}

#[test]
fn dropped_registrations_time_out() {
    let mut b = Bench::new(1, 1);
    let (switch, dev) = (b.topo.sites[0].switch, b.topo.sites[0].devices[0]);
    b.net.set_loss(switch, dev, LossModel::All);
    b.establish(0, &[1]);
    b.run();
    assert_eq!(b.active(0), 0);
    assert_eq!(b.registrations, vec![Registration::TimedOut(1)]);
    assert_eq!(b.gws[&b.gateway(0)].0.counters.registration_timeouts, 1);
    // the exchange ran its full retransmission schedule
    let span = sdiiot_core::expected_time_span(&RetransmitParams::controlled());
    assert!(b.ev.now() >= SimTime::ZERO + span / 3);
}

#[test]
fn command_to_timed_out_device_times_out() {
    let mut b = Bench::new(1, 2);
    let (switch, dev) = (b.topo.sites[0].switch, b.topo.sites[0].devices[0]);
    b.net.set_loss(switch, dev, LossModel::All);
    b.establish(0, &[1, 2]);
    b.run();
    assert_eq!(b.active(0), 1);

    let gw_node = b.gateway(0);
    let frame = WsFrame::text(r#"{"v":1,"device_id":1,"command":"set_update_interval","args":{"ms":25}}"#);
    let (gw, ep) = b.gws.get_mut(&gw_node).unwrap();
    let cmd = gw.ws_to_coap(&frame).unwrap();
    assert_eq!(cmd.dscp, DscpClass::Cs6);
    assert_eq!(cmd.to, dev);
    let mut out = Vec::new();
    let mid = ep.send_confirmable(b.ev.now(), cmd.to, cmd.msg, &mut out).unwrap();
    b.completed.clear();
    b.apply(gw_node, out);
    b.run();
    assert_eq!(b.completed, vec![(gw_node, mid, ExchangeState::TimedOut)]);
    assert!(b.devices[&dev].puts.is_empty());
}

#[test]
fn command_to_reachable_device_is_delivered() {
    let mut b = Bench::new(1, 1);
    let gw_node = b.gateway(0);
    let frame = WsFrame::text(r#"{"v":1,"device_id":1,"command":"set_update_interval","args":{"ms":25}}"#);
    let (gw, ep) = b.gws.get_mut(&gw_node).unwrap();
    let cmd = gw.ws_to_coap(&frame).unwrap();
    let mut out = Vec::new();
    let mid = ep.send_confirmable(SimTime::ZERO, cmd.to, cmd.msg, &mut out).unwrap();
    b.apply(gw_node, out);
    b.run();
    assert_eq!(b.completed, vec![(gw_node, mid, ExchangeState::Acked)]);
    let dev = b.topo.sites[0].devices[0];
    assert_eq!(b.devices[&dev].puts.len(), 1);
}

fn distribute(b: &mut Bench, gateways: &[NodeId], policy: &QosPolicy) {
    let mut out = Vec::new();
    b.controller.distribute(&mut b.cloud, b.ev.now(), gateways, policy, &mut out).unwrap();
    let sc = b.topo.sc_server;
    b.apply(sc, out);
    b.run();
}

#[test]
fn policy_reaches_four_gateways() {
    let mut b = Bench::new(4, 1);
    let gws: Vec<NodeId> = (0..4).map(|s| b.gateway(s)).collect();
    let policy = QosPolicy::standard(7, DscpClass::Af21);
    distribute(&mut b, &gws, &policy);
    assert_eq!(b.outcomes.len(), 4);
    assert!(b.outcomes.iter().all(|(_, o)| *o == DistributionOutcome::Applied(7)));
    for g in &gws {
        let installed = b.gws[g].0.installed_policy().expect("installed");
        assert_eq!(installed.version, 7);
    }
    assert!(b.controller.is_settled());
}

#[test]
fn unreachable_gateway_times_out() {
    let mut b = Bench::new(4, 1);
    let gws: Vec<NodeId> = (0..4).map(|s| b.gateway(s)).collect();
    let core = b.topo.core_switch;
    b.net.set_loss(core, gws[2], LossModel::All);
    distribute(&mut b, &gws, &QosPolicy::standard(1, DscpClass::Af21));
    let applied = b.outcomes.iter().filter(|(_, o)| *o == DistributionOutcome::Applied(1)).count();
    assert_eq!(applied, 3);
    assert_eq!(b.outcomes.iter().find(|(g, _)| *g == gws[2]).unwrap().1, DistributionOutcome::TimedOut);
    assert!(b.gws[&gws[2]].0.installed_policy().is_none());
}

#[test]
fn empty_gateway_set() {
    let mut b = Bench::new(1, 0);
    distribute(&mut b, &[], &QosPolicy::standard(1, DscpClass::Af21));
    assert!(b.outcomes.is_empty());
    assert!(b.controller.outcomes().is_empty());
}
