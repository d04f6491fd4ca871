use std::collections::VecDeque;
use std::time::Duration;

use rand::Rng;
use thiserror::Error;

use crate::messages::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    FieldDevice,
    BackgroundSource,
    Switch,
    Gateway,
    CoreSwitch,
    SensorCloud,
}

#[derive(Debug, Clone)]
pub struct NodeSpec {
    pub kind: NodeKind,
    pub site: Option<usize>,
    /// Fixed per-packet cost when the node forwards a packet.
    pub processing_delay: Duration,
}

/// Uncontrolled wide-area path: per-packet delay uniform in
/// `[base_delay, base_delay + jitter_spread]`, one FIFO, no QoS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WanPath {
    pub base_delay: Duration,
    pub jitter_spread: Duration,
}

impl WanPath {
    pub fn sample(&self, rng: &mut impl Rng) -> Duration {
        let spread = self.jitter_spread.as_nanos() as u64;
        if spread == 0 {
            return self.base_delay;
        }
        self.base_delay + Duration::from_nanos(rng.gen_range(0..=spread))
    }
}

/// Builds a WAN path model. `base_delay` has to exceed `controlled_delay`,
/// the largest propagation delay on the controlled network.
pub fn wan_path(
    base_delay: Duration,
    jitter_spread: Duration,
    controlled_delay: Duration,
) -> Result<WanPath, TopologyError> {
    if base_delay <= controlled_delay {
        return Err(TopologyError::WanTooFast {
            base: base_delay,
            controlled: controlled_delay,
        });
    }
    Ok(WanPath {
        base_delay,
        jitter_spread,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossModel {
    None,
    Bernoulli(f64),
    /// Drops every packet.
    All,
    /// `script[i]` says whether the i-th transmission is dropped; later
    /// transmissions pass.
    Script(Vec<bool>),
}

impl LossModel {
    pub(crate) fn drops(&self, nth: u64, rng: &mut impl Rng) -> bool {
        match self {
            LossModel::None => false,
            LossModel::Bernoulli(p) => *p > 0.0 && rng.gen::<f64>() < *p,
            LossModel::All => true,
            LossModel::Script(s) => s.get(nth as usize).copied().unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    pub bandwidth_bps: u64,
    pub propagation: Duration,
    pub loss: LossModel,
    pub wan: Option<WanPath>,
}

#[derive(Debug, Clone)]
pub struct Site {
    pub gateway: NodeId,
    pub switch: NodeId,
    pub devices: Vec<NodeId>,
    pub background_sources: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    pub sites: Vec<Site>,
    pub core_switch: NodeId,
    pub sc_server: NodeId,
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("link {0} connects node {1} to itself")]
    SelfLink(usize, u32),
    #[error("link {0} references unknown node {1}")]
    UnknownNode(usize, u32),
    #[error("link {0} has zero bandwidth")]
    ZeroBandwidth(usize),
    #[error("node {0} is unreachable")]
    Disconnected(u32),
    #[error("site {0}: gateway and switch must be distinct {1:?} nodes")]
    SiteShape(usize, NodeKind),
    #[error("WAN base delay {base:?} does not exceed controlled delay {controlled:?}")]
    WanTooFast { base: Duration, controlled: Duration },
}

impl Topology {
    pub fn node(&self, id: NodeId) -> &NodeSpec {
        &self.nodes[id.0 as usize]
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let n = self.nodes.len() as u32;
        for (i, l) in self.links.iter().enumerate() {
            for end in [l.a, l.b] {
                if end.0 >= n {
                    return Err(TopologyError::UnknownNode(i, end.0));
                }
            }
            if l.a == l.b {
                return Err(TopologyError::SelfLink(i, l.a.0));
            }
            if l.bandwidth_bps == 0 {
                return Err(TopologyError::ZeroBandwidth(i));
            }
        }
        for (i, s) in self.sites.iter().enumerate() {
            if s.gateway == s.switch || s.gateway.0 >= n || s.switch.0 >= n {
                return Err(TopologyError::SiteShape(i, NodeKind::Gateway));
            }
            if self.node(s.gateway).kind != NodeKind::Gateway {
                return Err(TopologyError::SiteShape(i, NodeKind::Gateway));
            }
            if self.node(s.switch).kind != NodeKind::Switch {
                return Err(TopologyError::SiteShape(i, NodeKind::Switch));
            }
        }
        if n == 0 {
            return Ok(());
        }
        let adj = self.adjacency();
        let mut seen = vec![false; n as usize];
        let mut q = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = q.pop_front() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    q.push_back(v);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(TopologyError::Disconnected(i as u32)),
            None => Ok(()),
        }
    }

    /// Neighbours of each node as (node index, link index).
    pub(crate) fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (i, l) in self.links.iter().enumerate() {
            adj[l.a.0 as usize].push((l.b.0 as usize, i));
            adj[l.b.0 as usize].push((l.a.0 as usize, i));
        }
        adj
    }

    pub fn devices(&self) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.sites
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.devices.iter().map(move |d| (i, *d)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinkParams {
    pub bandwidth_bps: u64,
    pub propagation: Duration,
}

impl LinkParams {
    pub const fn new(bandwidth_bps: u64, propagation_us: u64) -> Self {
        LinkParams {
            bandwidth_bps,
            propagation: Duration::from_micros(propagation_us),
        }
    }
}

/// Shape of the multi-site deployment. Each site is a chain
/// device/background source -> switch -> gateway -> core -> cloud.
#[derive(Debug, Clone)]
pub struct Layout {
    pub sites: usize,
    pub devices_per_site: usize,
    pub background_per_site: usize,
    pub field: LinkParams,
    pub switch_gateway: LinkParams,
    pub gateway_core: LinkParams,
    pub core_cloud: LinkParams,
    pub processing_delay: Duration,
    /// When set, the switch-gateway and gateway-core hops cross the WAN.
    pub wan: Option<WanPath>,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            sites: 4,
            devices_per_site: 18,
            background_per_site: 0,
            field: LinkParams::new(1_000_000_000, 100),
            switch_gateway: LinkParams::new(1_000_000_000, 100),
            gateway_core: LinkParams::new(1_000_000_000, 1_000),
            core_cloud: LinkParams::new(1_000_000_000, 2_000),
            processing_delay: Duration::from_micros(10),
            wan: None,
        }
    }
}

impl Layout {
    /// Largest propagation delay on the controlled network.
    pub fn max_controlled_delay(&self) -> Duration {
        [self.field, self.switch_gateway, self.gateway_core, self.core_cloud]
            .iter()
            .map(|l| l.propagation)
            .max()
            .unwrap_or_default()
    }

    pub fn build(&self) -> Topology {
        let mut nodes = Vec::new();
        let mut links = Vec::new();
        let add = |kind, site, nodes: &mut Vec<NodeSpec>| {
            let processing_delay = match kind {
                NodeKind::Switch | NodeKind::Gateway | NodeKind::CoreSwitch => self.processing_delay,
                _ => Duration::ZERO,
            };
            nodes.push(NodeSpec {
                kind,
                site,
                processing_delay,
            });
            NodeId(nodes.len() as u32 - 1)
        };
        let link = |a, b, p: LinkParams, wan| LinkSpec {
            a,
            b,
            bandwidth_bps: p.bandwidth_bps,
            propagation: p.propagation,
            loss: LossModel::None,
            wan,
        };
        let core = add(NodeKind::CoreSwitch, None, &mut nodes);
        let sc = add(NodeKind::SensorCloud, None, &mut nodes);
        links.push(link(core, sc, self.core_cloud, None));
        let mut sites = Vec::new();
        for s in 0..self.sites {
            let switch = add(NodeKind::Switch, Some(s), &mut nodes);
            let gateway = add(NodeKind::Gateway, Some(s), &mut nodes);
            links.push(link(switch, gateway, self.switch_gateway, self.wan));
            links.push(link(gateway, core, self.gateway_core, self.wan));
            let mut site = Site {
                gateway,
                switch,
                devices: Vec::new(),
                background_sources: Vec::new(),
            };
            for _ in 0..self.devices_per_site {
                let d = add(NodeKind::FieldDevice, Some(s), &mut nodes);
                links.push(link(d, switch, self.field, None));
                site.devices.push(d);
            }
            for _ in 0..self.background_per_site {
                let b = add(NodeKind::BackgroundSource, Some(s), &mut nodes);
                links.push(link(b, switch, self.field, None));
                site.background_sources.push(b);
            }
            sites.push(site);
        }
        Topology {
            nodes,
            links,
            sites,
            core_switch: core,
            sc_server: sc,
        }
    }
}
