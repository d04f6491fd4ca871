//! Simulation of a software-defined industrial IoT deployment: field
//! devices publishing over CoAP, site gateways bridging to a sensor cloud
//! over WebSocket, and DiffServ-style priority queueing in the switches.

pub mod coap;
pub mod gateway;
pub mod harness;
pub mod messages;
pub mod netsim;
pub mod qos;
pub mod tdma;
pub mod time;

pub use coap::{expected_time_span, retransmit_schedule, Endpoint, ExchangeState, RetransmitParams};
pub use messages::{CoapMessage, FlowClass, FlowId, NetPacket, NodeId, WsFrame};
pub use qos::{classify, dscp_for_class, dscp_for_class_with, validate, DscpClass, QosGroup, QosPolicy, SensorClass};
pub use time::SimTime;
