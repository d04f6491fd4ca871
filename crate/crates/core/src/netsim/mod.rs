//! Deterministic discrete-event network simulator.

mod event;
mod network;
mod queue;
mod tcp;
mod topology;
mod traffic;

pub use event::EventLoop;
pub use network::{write_trace_csv, DropReason, NetEvent, Network, PacketCounts, Port, PortId, TraceEvent, TraceRecord};
pub use queue::{PriorityQueueSet, QueueConfig, Serve, TokenBucket};
pub use tcp::{TcpOutput, TcpParams, TcpReceiver, TcpSender, TcpStats};
pub use topology::{wan_path, Layout, LinkParams, LinkSpec, LossModel, NodeKind, NodeSpec, Site, Topology, TopologyError, WanPath};
pub use traffic::{emission_times, BackgroundFlowSet, BackgroundKind, BackgroundTraffic, BgFlow, TrafficEvent};
